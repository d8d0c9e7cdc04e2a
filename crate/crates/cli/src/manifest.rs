//! On-disk decompositions: a `manifest.json` next to the PFM/PNG maps it
//! references by relative path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use derender_core::coarse::{CoarseConfig, CoarseEstimate};
use derender_core::formation::{
    light_from_xy, Decomposition, LightParams, MaterialParams, RenderConfig,
};
use derender_core::losses::LossWeights;
use derender_core::{Grid, Mask, Vec3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};
use crate::{pfm, png};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Face,
    Object,
}

impl Preset {
    pub fn render(self) -> RenderConfig {
        match self {
            Preset::Face => RenderConfig::face(),
            Preset::Object => RenderConfig::object(),
        }
    }

    pub fn coarse(self) -> CoarseConfig {
        match self {
            Preset::Face => CoarseConfig::face(),
            Preset::Object => CoarseConfig::object(),
        }
    }

    pub fn weights(self) -> LossWeights {
        match self {
            Preset::Face => LossWeights::default(),
            Preset::Object => LossWeights::object(),
        }
    }
}

/// Light and global material as stored on disk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightMaterialJson {
    pub s_amb: f64,
    pub s_dir: f64,
    pub l: [f64; 3],
    pub alpha: f64,
    pub a_spec: f64,
}

impl LightMaterialJson {
    pub fn new(light: &LightParams, alpha: f64, a_spec: f64) -> Self {
        Self {
            s_amb: light.s_amb,
            s_dir: light.s_dir,
            l: light.dir.to_array(),
            alpha,
            a_spec,
        }
    }

    /// Light pad coordinates `(l_x / l_z, l_y / l_z)`.
    pub fn xy(&self) -> (f64, f64) {
        (self.l[0] / self.l[2], self.l[1] / self.l[2])
    }

    /// The stored light, with its direction rebuilt from [`Self::xy`] so that
    /// relighting from pad coordinates reproduces it exactly.
    pub fn light(&self) -> Result<LightParams> {
        let raw = LightParams::new(self.s_amb, self.s_dir, Vec3::from_array(self.l))?;
        let (x, y) = self.xy();
        Ok(LightParams {
            dir: light_from_xy(x, y),
            ..raw
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Estimate,
    Fit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub albedo_png: String,
    pub albedo_pfm: String,
    pub normals_pfm: String,
    pub light_json: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_pfm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_refine_pfm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub albedo_tilde_pfm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_png: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_csv: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    /// SHA-256 of the command configuration.
    pub config_hash: String,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` when set.
    pub created_unix: u64,
}

impl Provenance {
    pub fn new<C: Serialize>(config: &C, inputs: BTreeMap<String, String>) -> Self {
        let json = serde_json::to_vec(config).expect("config serialises");
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hex::encode(Sha256::digest(&json)),
            inputs,
            created_unix: timestamp(),
        }
    }
}

fn timestamp() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
    {
        return v;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseSummary {
    pub degenerate_direction: bool,
    pub light_objective: f64,
    pub image_resampled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iters: usize,
    pub final_total: f64,
    pub final_rec: f64,
    pub rejected_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionManifest {
    pub id: String,
    pub stage: Stage,
    pub preset: Preset,
    pub width: usize,
    pub height: usize,
    pub files: ManifestFiles,
    pub light_material: LightMaterialJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse: Option<CoarseSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
    pub provenance: Provenance,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serialises");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// A manifest with every referenced file loaded and checked.
#[derive(Clone, Debug)]
pub struct LoadedDecomposition {
    pub manifest: DecompositionManifest,
    pub dir: PathBuf,
    pub decomposition: Decomposition,
    pub mask: Option<Mask>,
    pub albedo_tilde: Option<derender_core::Image>,
}

impl LoadedDecomposition {
    /// Load `manifest.json` from `path`, which may be the file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let manifest: DecompositionManifest = read_json(&file)?;
        let f = &manifest.files;
        let dims = (manifest.height, manifest.width);
        let check = |what: &str, got: (usize, usize)| {
            if got == dims {
                Ok(())
            } else {
                Err(CliError::Invalid(format!(
                    "{what} is {}x{}, manifest says {}x{}",
                    got.0, got.1, dims.0, dims.1
                )))
            }
        };
        let albedo = pfm::read_rgb(&dir.join(&f.albedo_pfm))?;
        check("albedo", albedo.dims())?;
        albedo.check_unit_range()?;
        png::read_image(&dir.join(&f.albedo_png)).map(|a| check("albedo png", a.dims()))??;
        let normals = pfm::read_normals(&dir.join(&f.normals_pfm))?;
        check("normals", normals.dims())?;
        let depth = match &f.depth_pfm {
            Some(p) => {
                let d = pfm::read_scalar(&dir.join(p))?;
                check("depth", d.dims())?;
                Some(d)
            }
            None => None,
        };
        let n_refine = match &f.n_refine_pfm {
            Some(p) => {
                let n = pfm::read_normals(&dir.join(p))?;
                check("refinement normals", n.dims())?;
                n
            }
            None => Grid::filled(dims.0, dims.1, Vec3::Z),
        };
        let mask = match &f.mask_png {
            Some(p) => {
                let m = png::read_mask(&dir.join(p))?;
                check("mask", m.dims())?;
                Some(m)
            }
            None => None,
        };
        let albedo_tilde = match &f.albedo_tilde_pfm {
            Some(p) => {
                let a = pfm::read_rgb(&dir.join(p))?;
                check("inverted albedo", a.dims())?;
                Some(a)
            }
            None => None,
        };
        let on_disk: LightMaterialJson = read_json(&dir.join(&f.light_json))?;
        if on_disk != manifest.light_material {
            return Err(CliError::Invalid(format!(
                "{} disagrees with the manifest",
                f.light_json
            )));
        }
        let lm = manifest.light_material;
        let decomposition = Decomposition {
            depth,
            normals,
            n_refine,
            material: MaterialParams::new(albedo, lm.alpha, lm.a_spec)?,
            light: lm.light()?,
            spec_refine: None,
        };
        decomposition.validate(&manifest.preset.render())?;
        Ok(Self {
            manifest,
            dir,
            decomposition,
            mask,
            albedo_tilde,
        })
    }

    pub fn render_config(&self) -> RenderConfig {
        self.manifest.preset.render()
    }

    /// The decomposition read back as a coarse estimate.
    pub fn as_coarse(&self) -> Result<CoarseEstimate> {
        let d = &self.decomposition;
        let (h, w) = d.dims();
        let mut est = CoarseEstimate::from_parts(
            d.depth.clone(),
            d.normals.clone(),
            d.material.albedo.clone(),
            d.light,
            self.mask.clone().unwrap_or_else(|| Mask::all_valid(h, w)),
        )?;
        if let Some(a) = &self.albedo_tilde {
            est.albedo_tilde = a.clone();
        }
        Ok(est)
    }
}
