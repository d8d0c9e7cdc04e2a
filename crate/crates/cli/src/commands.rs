//! The `estimate`, `render`, `relight`, `fit` and `eval` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use derender_core::coarse::{coarse_pipeline, Geometry};
use derender_core::fit::{fit_decomposition, FitConfig, FitReport};
use derender_core::formation::{
    alpha_from_raw, normals_from_depth, render, Decomposition, MaterialParams, RenderConfig,
    Rendered,
};
use derender_core::metrics::MetricReport;
use derender_core::{Grid, Image, Mask, Vec3};
use serde_json::json;

use crate::error::{io_err, CliError, Result};
use crate::light::{parse_light_arg, LightOverride};
use crate::manifest::{
    file_sha256, write_json, CoarseSummary, DecompositionManifest, FitSummary, LightMaterialJson,
    LoadedDecomposition, ManifestFiles, Preset, Provenance, Stage, MANIFEST_FILE,
};
use crate::{pfm, png};

const ALBEDO_PNG: &str = "albedo.png";
const ALBEDO_PFM: &str = "albedo.pfm";
const ALBEDO_TILDE_PFM: &str = "albedo_tilde.pfm";
const NORMALS_PFM: &str = "normals.pfm";
const N_REFINE_PFM: &str = "n_refine.pfm";
const DEPTH_PFM: &str = "depth.pfm";
const MASK_PNG: &str = "mask.png";
const LIGHT_JSON: &str = "light.json";
const RECON_PNG: &str = "recon.png";
pub const TRACE_CSV: &str = "trace.csv";

#[derive(Args, Clone, Debug)]
pub struct EstimateArgs {
    /// Input image (PNG, or PFM for linear float data).
    #[arg(long)]
    pub image: PathBuf,
    /// Coarse depth map (PFM).
    #[arg(long, conflicts_with = "normals", required_unless_present = "normals")]
    pub depth: Option<PathBuf>,
    /// Coarse normal map (PFM).
    #[arg(long)]
    pub normals: Option<PathBuf>,
    /// Valid-pixel mask (8-bit gray PNG, >127 is valid).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "face")]
    pub preset: Preset,
    /// Overrides the preset.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr_light: Option<f64>,
    #[arg(long)]
    pub lr_albedo: Option<f64>,
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    /// Decomposition id; defaults to `<image stem>-estimate`.
    #[arg(long)]
    pub id: Option<String>,
}

impl EstimateArgs {
    /// Preset values with any explicit flags applied.
    pub fn coarse_config(&self) -> derender_core::coarse::CoarseConfig {
        let mut c = self.preset.coarse();
        if let Some(v) = self.iters {
            c.iters = v;
        }
        if let Some(v) = self.lr_light {
            c.lr_light = v;
        }
        if let Some(v) = self.lr_albedo {
            c.lr_albedo = v;
        }
        if let Some(v) = self.lambda_tv {
            c.lambda_tv = v;
        }
        c
    }
}

#[derive(Args, Clone, Debug)]
pub struct RenderArgs {
    /// Decomposition manifest, or the directory holding it.
    #[arg(long, conflicts_with_all = ["albedo", "normals", "depth"])]
    pub manifest: Option<PathBuf>,
    /// Albedo (PFM or PNG) when not using a manifest.
    #[arg(long, required_unless_present = "manifest")]
    pub albedo: Option<PathBuf>,
    /// Normals (PFM) when not using a manifest.
    #[arg(long, conflicts_with = "depth", required_unless_present_any = ["manifest", "depth"])]
    pub normals: Option<PathBuf>,
    /// Depth (PFM); normals are derived from it.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Shininess for component mode.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Specular intensity for component mode.
    #[arg(long)]
    pub a_spec: Option<f64>,
    /// Model ranges for component mode.
    #[arg(long, value_enum, default_value = "face")]
    pub preset: Preset,
    /// `"x,y,s_amb,s_dir"`, inline JSON, or a JSON file.
    #[arg(long, allow_hyphen_values = true)]
    pub light: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Diffuse shading map (PFM).
    #[arg(long)]
    pub out_diff: Option<PathBuf>,
    /// Specular shading map (PFM).
    #[arg(long)]
    pub out_spec: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory of `estimate`.
    #[arg(long)]
    pub coarse_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Defaults to the coarse manifest's preset.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub lambda_n: Option<f64>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub lambda_l: Option<f64>,
    #[arg(long)]
    pub lambda_rec: Option<f64>,
    /// Also optimise the depth map.
    #[arg(long)]
    pub optimize_depth: bool,
    /// Charbonnier scale of the L1 terms; 0 gives plain L1.
    #[arg(long, default_value_t = 1e-3)]
    pub l1_smoothing: f64,
    /// Defaults to `<image stem>-fit`.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_albedo: PathBuf,
    #[arg(long)]
    pub gt_albedo: PathBuf,
    #[arg(long)]
    pub pred_normals: PathBuf,
    #[arg(long)]
    pub gt_normals: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn is_pfm(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

/// An RGB image from a PNG, or a PFM when the extension says so.
pub fn read_image_any(path: &Path) -> Result<Image> {
    if is_pfm(path) {
        Ok(pfm::read_rgb(path)?)
    } else {
        Ok(png::read_image(path)?)
    }
}

/// Ids end up in URLs, so anything outside `[A-Za-z0-9._-]` becomes `-`.
pub fn sanitize_id(raw: &str) -> String {
    let id: String = raw
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    if id.is_empty() {
        "decomposition".into()
    } else {
        id
    }
}

fn default_id(image: &Path, stage: &str) -> String {
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!("{stem}-{stage}")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn hash_inputs(inputs: &[(&str, Option<&Path>)]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (role, path) in inputs {
        if let Some(p) = path {
            out.insert((*role).to_string(), file_sha256(p)?);
        }
    }
    Ok(out)
}

/// Render with optional light and material overrides.
pub fn render_with(
    dec: &Decomposition,
    cfg: &RenderConfig,
    ov: Option<&LightOverride>,
) -> Result<Rendered> {
    let Some(ov) = ov else {
        return Ok(render(dec, &dec.light, cfg)?);
    };
    if ov.alpha.is_none() && ov.a_spec.is_none() {
        return Ok(render(dec, &ov.light, cfg)?);
    }
    let mut dec = dec.clone();
    dec.material.alpha = ov.alpha.unwrap_or(dec.material.alpha);
    dec.material.a_spec = ov.a_spec.unwrap_or(dec.material.a_spec);
    Ok(render(&dec, &ov.light, cfg)?)
}

/// The relit PNG exactly as both the CLI and the HTTP service emit it.
pub fn relight_png(
    dec: &Decomposition,
    cfg: &RenderConfig,
    ov: Option<&LightOverride>,
) -> Result<Vec<u8>> {
    Ok(png::encode_image(&render_with(dec, cfg, ov)?.image))
}

fn write_pfm(path: &Path, map: pfm::Pfm) -> Result<()> {
    Ok(map.write(path)?)
}

/// Write the light file and manifest, then render `recon.png` from the
/// decomposition as re-read from disk so later relights reproduce it exactly.
fn finalize(dir: &Path, mut manifest: DecompositionManifest) -> Result<DecompositionManifest> {
    manifest.files.light_json = LIGHT_JSON.into();
    write_json(&dir.join(LIGHT_JSON), &manifest.light_material)?;
    manifest.files.recon_png = None;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let loaded = LoadedDecomposition::load(dir)?;
    let bytes = relight_png(&loaded.decomposition, &loaded.render_config(), None)?;
    png::write(&dir.join(RECON_PNG), &bytes)?;
    manifest.files.recon_png = Some(RECON_PNG.into());
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<DecompositionManifest> {
    let cfg = args.coarse_config();
    let image = read_image_any(&args.image)?;
    let geometry = match (&args.depth, &args.normals) {
        (Some(d), None) => Geometry::Depth(pfm::read_scalar(d)?),
        (None, Some(n)) => Geometry::Normals(pfm::read_normals(n)?),
        _ => {
            return Err(CliError::Invalid(
                "exactly one of --depth and --normals is required".into(),
            ))
        }
    };
    let mask = args.mask.as_deref().map(png::read_mask).transpose()?;
    let est = coarse_pipeline(&image, &geometry, mask.as_ref(), &cfg)?;
    log::info!("coarse light {:?}", est.light);

    let dir = &args.out_dir;
    create_dir(dir)?;
    write_pfm(&dir.join(ALBEDO_PFM), pfm::Pfm::from_rgb(&est.albedo))?;
    png::write(&dir.join(ALBEDO_PNG), &png::encode_image(&est.albedo))?;
    write_pfm(
        &dir.join(ALBEDO_TILDE_PFM),
        pfm::Pfm::from_rgb(&est.albedo_tilde),
    )?;
    write_pfm(&dir.join(NORMALS_PFM), pfm::Pfm::from_normals(&est.normals))?;
    if let Some(d) = &est.depth {
        write_pfm(&dir.join(DEPTH_PFM), pfm::Pfm::from_scalar(d))?;
    }
    png::write(&dir.join(MASK_PNG), &png::encode_mask(&est.valid))?;

    let render_cfg = args.preset.render();
    let alpha = alpha_from_raw(0.0, render_cfg.alpha_max);
    let config = json!({
        "command": "estimate",
        "preset": args.preset,
        "iters": cfg.iters,
        "lr_light": cfg.lr_light,
        "lr_albedo": cfg.lr_albedo,
        "lambda_tv": cfg.lambda_tv,
    });
    let inputs = hash_inputs(&[
        ("image", Some(&args.image)),
        ("depth", args.depth.as_deref()),
        ("normals", args.normals.as_deref()),
        ("mask", args.mask.as_deref()),
    ])?;
    let diag = est.diagnostics.as_ref();
    let (h, w) = est.dims();
    let manifest = DecompositionManifest {
        id: sanitize_id(
            args.id
                .as_deref()
                .unwrap_or(&default_id(&args.image, "estimate")),
        ),
        stage: Stage::Estimate,
        preset: args.preset,
        width: w,
        height: h,
        files: ManifestFiles {
            albedo_png: ALBEDO_PNG.into(),
            albedo_pfm: ALBEDO_PFM.into(),
            normals_pfm: NORMALS_PFM.into(),
            depth_pfm: est.depth.as_ref().map(|_| DEPTH_PFM.into()),
            mask_png: Some(MASK_PNG.into()),
            albedo_tilde_pfm: Some(ALBEDO_TILDE_PFM.into()),
            ..Default::default()
        },
        light_material: LightMaterialJson::new(&est.light, alpha, 0.0),
        coarse: Some(CoarseSummary {
            degenerate_direction: diag.is_some_and(|d| d.degenerate_direction),
            light_objective: diag.map_or(f64::NAN, |d| d.light.final_value()),
            image_resampled: diag.is_some_and(|d| d.resampled),
        }),
        fit: None,
        provenance: Provenance::new(&config, inputs),
    };
    if manifest
        .coarse
        .as_ref()
        .is_some_and(|c| c.degenerate_direction)
    {
        log::warn!("coarse normals span too few directions; the light estimate is unreliable");
    }
    finalize(dir, manifest)
}

/// Decomposition and render ranges named by `render`/`relight` arguments.
pub fn load_render_inputs(args: &RenderArgs) -> Result<(Decomposition, RenderConfig)> {
    if let Some(m) = &args.manifest {
        let loaded = LoadedDecomposition::load(m)?;
        let cfg = loaded.render_config();
        return Ok((loaded.decomposition, cfg));
    }
    let cfg = args.preset.render();
    let albedo_path = args
        .albedo
        .as_deref()
        .ok_or_else(|| CliError::Invalid("--albedo or --manifest is required".into()))?;
    let albedo = read_image_any(albedo_path)?;
    let (depth, normals) = match (&args.depth, &args.normals) {
        (Some(d), None) => {
            let d = pfm::read_scalar(d)?;
            let n = normals_from_depth(&d)?;
            (Some(d), n)
        }
        (None, Some(n)) => (None, pfm::read_normals(n)?),
        _ => {
            return Err(CliError::Invalid(
                "exactly one of --depth and --normals is required".into(),
            ))
        }
    };
    let (h, w) = normals.dims();
    let alpha = args
        .alpha
        .unwrap_or_else(|| alpha_from_raw(0.0, cfg.alpha_max));
    let light = match &args.light {
        Some(l) => {
            parse_light_arg(l, &cfg)
                .map_err(|e| CliError::Invalid(e.to_string()))?
                .light
        }
        None => {
            return Err(CliError::Invalid(
                "--light is required without --manifest".into(),
            ))
        }
    };
    let dec = Decomposition {
        depth,
        normals,
        n_refine: Grid::filled(h, w, Vec3::Z),
        material: MaterialParams::new(albedo, alpha, args.a_spec.unwrap_or(0.0))?,
        light,
        spec_refine: None,
    };
    dec.validate(&cfg)?;
    Ok((dec, cfg))
}

fn write_render_outputs(args: &RenderArgs, rendered: &Rendered) -> Result<()> {
    png::write(&args.out, &png::encode_image(&rendered.image))?;
    if let Some(p) = &args.out_diff {
        write_pfm(p, pfm::Pfm::from_scalar(&rendered.diffuse))?;
    }
    if let Some(p) = &args.out_spec {
        write_pfm(p, pfm::Pfm::from_scalar(&rendered.specular))?;
    }
    Ok(())
}

fn light_override(args: &RenderArgs, cfg: &RenderConfig) -> Result<Option<LightOverride>> {
    args.light
        .as_deref()
        .map(|l| parse_light_arg(l, cfg).map_err(|e| CliError::Invalid(e.to_string())))
        .transpose()
}

/// Render under the decomposition's own light unless `--light` is given.
pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let (dec, cfg) = load_render_inputs(args)?;
    let ov = light_override(args, &cfg)?;
    write_render_outputs(args, &render_with(&dec, &cfg, ov.as_ref())?)
}

/// Render under the light given by `--light`.
pub fn cmd_relight(args: &RenderArgs) -> Result<()> {
    if args.light.is_none() {
        return Err(CliError::Invalid("relight needs --light".into()));
    }
    cmd_render(args)
}

impl FitArgs {
    pub fn fit_config(&self, preset: Preset) -> FitConfig {
        let mut weights = preset.weights();
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut weights.lambda_d, self.lambda_d);
        set(&mut weights.lambda_n, self.lambda_n);
        set(&mut weights.lambda_a, self.lambda_a);
        set(&mut weights.lambda_l, self.lambda_l);
        set(&mut weights.lambda_rec, self.lambda_rec);
        FitConfig {
            iters: self.iters,
            lr: self.lr,
            weights,
            render: preset.render(),
            optimize_depth: self.optimize_depth,
            l1_smoothing: self.l1_smoothing,
        }
    }
}

/// `iteration,total,coarse,rec` with one row per trace entry.
pub fn trace_csv(report: &FitReport) -> String {
    let mut out = String::from("iteration,total,coarse,rec\n");
    for r in &report.rows {
        writeln!(out, "{},{},{},{}", r.iteration, r.total, r.coarse, r.rec).expect("string write");
    }
    out
}

pub fn cmd_fit(args: &FitArgs) -> Result<DecompositionManifest> {
    let coarse_loaded = LoadedDecomposition::load(&args.coarse_dir)?;
    let preset = args.preset.unwrap_or(coarse_loaded.manifest.preset);
    let cfg = args.fit_config(preset);
    let image = read_image_any(&args.image)?;
    let coarse = coarse_loaded.as_coarse()?;
    let (dec, report) = fit_decomposition(&image, &coarse, &cfg)?;
    let last = report
        .rows
        .last()
        .copied()
        .expect("trace has the initial row");
    log::info!("fit finished: total {} rec {}", last.total, last.rec);

    let dir = &args.out_dir;
    create_dir(dir)?;
    let (h, w) = dec.dims();
    let valid: Mask = coarse.resampled(h, w).valid;
    write_pfm(
        &dir.join(ALBEDO_PFM),
        pfm::Pfm::from_rgb(&dec.material.albedo),
    )?;
    png::write(
        &dir.join(ALBEDO_PNG),
        &png::encode_image(&dec.material.albedo),
    )?;
    write_pfm(&dir.join(NORMALS_PFM), pfm::Pfm::from_normals(&dec.normals))?;
    write_pfm(
        &dir.join(N_REFINE_PFM),
        pfm::Pfm::from_normals(&dec.n_refine),
    )?;
    if let Some(d) = &dec.depth {
        write_pfm(&dir.join(DEPTH_PFM), pfm::Pfm::from_scalar(d))?;
    }
    png::write(&dir.join(MASK_PNG), &png::encode_mask(&valid))?;
    let trace_path = dir.join(TRACE_CSV);
    std::fs::write(&trace_path, trace_csv(&report)).map_err(io_err(&trace_path))?;

    let coarse_manifest = args.coarse_dir.join(MANIFEST_FILE);
    let coarse_manifest = if args.coarse_dir.is_dir() {
        coarse_manifest
    } else {
        args.coarse_dir.clone()
    };
    let inputs = hash_inputs(&[
        ("image", Some(&args.image)),
        ("coarse_manifest", Some(&coarse_manifest)),
    ])?;
    let config = json!({
        "command": "fit",
        "preset": preset,
        "iters": cfg.iters,
        "lr": cfg.lr,
        "weights": cfg.weights,
        "optimize_depth": cfg.optimize_depth,
        "l1_smoothing": cfg.l1_smoothing,
    });
    let manifest = DecompositionManifest {
        id: sanitize_id(
            args.id
                .as_deref()
                .unwrap_or(&default_id(&args.image, "fit")),
        ),
        stage: Stage::Fit,
        preset,
        width: w,
        height: h,
        files: ManifestFiles {
            albedo_png: ALBEDO_PNG.into(),
            albedo_pfm: ALBEDO_PFM.into(),
            normals_pfm: NORMALS_PFM.into(),
            depth_pfm: dec.depth.as_ref().map(|_| DEPTH_PFM.into()),
            mask_png: Some(MASK_PNG.into()),
            n_refine_pfm: Some(N_REFINE_PFM.into()),
            trace_csv: Some(TRACE_CSV.into()),
            ..Default::default()
        },
        light_material: LightMaterialJson::new(&dec.light, dec.material.alpha, dec.material.a_spec),
        coarse: None,
        fit: Some(FitSummary {
            iters: cfg.iters,
            final_total: last.total,
            final_rec: last.rec,
            rejected_steps: report.objective.rejected_steps,
        }),
        provenance: Provenance::new(&config, inputs),
    };
    finalize(dir, manifest)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport> {
    let pred_a = read_image_any(&args.pred_albedo)?;
    let gt_a = read_image_any(&args.gt_albedo)?;
    let pred_n = pfm::read_normals(&args.pred_normals)?;
    let gt_n = pfm::read_normals(&args.gt_normals)?;
    let mask = match &args.mask {
        Some(p) => png::read_mask(p)?,
        None => Mask::all_valid(gt_a.height(), gt_a.width()),
    };
    let report = MetricReport::evaluate(&pred_a, &gt_a, &pred_n, &gt_n, &mask)?;
    write_json(&args.out, &report)?;
    Ok(report)
}
