//! Synthetic scenes and helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use derender_core::coarse::CoarseEstimate;
use derender_core::formation::{
    alpha_from_raw, normals_from_depth, render, Decomposition, LightParams, MaterialParams,
    RenderConfig,
};
use derender_core::{Grid, Image, Mask, NormalMap, ScalarMap, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unit hemisphere filling an `n x n` image; the mask marks the disk.
pub fn hemisphere(n: usize) -> (NormalMap, Mask) {
    let r = (n as f64 - 1.0) / 2.0;
    let mut mask = Grid::filled(n, n, false);
    let normals = Grid::from_fn(n, n, |i, j| {
        let x = (r - j as f64) / r;
        let y = (r - i as f64) / r;
        let z2 = 1.0 - x * x - y * y;
        if z2 > 0.0 {
            Vec3::new(x, y, z2.sqrt())
        } else {
            Vec3::Z
        }
    });
    for i in 0..n {
        for j in 0..n {
            let x = (r - j as f64) / r;
            let y = (r - i as f64) / r;
            *mask.get_mut(i, j) = x * x + y * y < 1.0;
        }
    }
    (normals, mask)
}

/// Smoothly varying albedo whose largest channel is exactly 1/2, so HSV
/// value equals half the shading.
pub fn half_value_albedo(n: usize, phase: f64) -> Image {
    Grid::from_fn(n, n, |i, j| {
        let u = i as f64 / n as f64;
        let v = j as f64 / n as f64;
        [
            0.5,
            0.5 * (0.55 + 0.35 * (3.0 * u + phase).sin()),
            0.5 * (0.5 + 0.3 * (2.0 * v - phase).cos()),
        ]
    })
}

/// Linear rendering, as assumed by the Lambertian coarse light model.
pub fn linear_config() -> RenderConfig {
    RenderConfig {
        gamma: 1.0,
        ..RenderConfig::face()
    }
}

pub struct LambertScene {
    pub image: Image,
    pub albedo: Image,
    pub normals: NormalMap,
    pub mask: Mask,
    pub light: LightParams,
}

/// Lambertian hemisphere rendered by the toolkit with `a_spec = 0`.
pub fn lambert_scene(n: usize, light: LightParams, phase: f64) -> LambertScene {
    let (normals, mask) = hemisphere(n);
    let albedo = half_value_albedo(n, phase);
    let dec = Decomposition {
        depth: None,
        normals: normals.clone(),
        n_refine: Grid::filled(n, n, Vec3::Z),
        material: MaterialParams::new(albedo.clone(), 1.0, 0.0).unwrap(),
        light,
        spec_refine: None,
    };
    let image = render(&dec, &light, &linear_config()).unwrap().image;
    LambertScene {
        image,
        albedo,
        normals,
        mask,
        light,
    }
}

/// Random light with `s_amb + s_dir <= 1` and a moderate tilt.
pub fn random_light(rng: &mut ChaCha8Rng) -> LightParams {
    let s_amb = rng.random_range(0.1..0.35);
    let s_dir = rng.random_range(0.4..0.65);
    let x = rng.random_range(-0.5..0.5);
    let y = rng.random_range(-0.5..0.5);
    LightParams::from_xy(s_amb, s_dir, x, y).unwrap()
}

/// Gaussian bump in depth with smooth colour albedo, rendered with a tone
/// curve and specular term. Returns the image, the generating decomposition
/// and a coarse estimate equal to the ground truth.
pub fn bump_scene(
    n: usize,
    light: LightParams,
    t: f64,
    a_spec: f64,
    phase: f64,
) -> (Image, Decomposition, CoarseEstimate) {
    let cfg = RenderConfig::face();
    let depth = Grid::from_fn(n, n, |i, j| {
        let x = (j as f64 + 0.5) / n as f64 - 0.5;
        let y = (i as f64 + 0.5) / n as f64 - 0.5;
        1.1 - 0.2 * (-(x * x + y * y) / (2.0 * 0.15 * 0.15)).exp()
    });
    let albedo = Grid::from_fn(n, n, |i, j| {
        let x = (j as f64 + 0.5) / n as f64 - 0.5;
        let y = (i as f64 + 0.5) / n as f64 - 0.5;
        [
            0.6 + 0.2 * (6.0 * x + phase).sin(),
            0.5 + 0.2 * (5.0 * y - phase).cos(),
            0.4 + 0.1 * (4.0 * (x + y) + phase).sin(),
        ]
    });
    let base = normals_from_depth(&depth).unwrap();
    let normals = base.map(|b| (*b + Vec3::Z).normalized().unwrap());
    let dec = Decomposition {
        depth: Some(depth.clone()),
        normals: normals.clone(),
        n_refine: Grid::filled(n, n, Vec3::Z),
        material: MaterialParams::new(albedo.clone(), alpha_from_raw(t, cfg.alpha_max), a_spec)
            .unwrap(),
        light,
        spec_refine: None,
    };
    let image = render(&dec, &light, &cfg).unwrap().image;
    let coarse =
        CoarseEstimate::from_parts(Some(depth), normals, albedo, light, Mask::all_valid(n, n))
            .unwrap();
    (image, dec, coarse)
}

/// Sphere of radius `0.35` in front of a flat background, as depth.
pub fn sphere_depth(n: usize) -> ScalarMap {
    Grid::from_fn(n, n, |i, j| {
        let x = (j as f64 + 0.5) / n as f64 - 0.5;
        let y = (i as f64 + 0.5) / n as f64 - 0.5;
        let r2 = 0.35 * 0.35 - x * x - y * y;
        1.1 - 0.2 * r2.max(0.0).sqrt() / 0.35
    })
}

/// Shiny, uniformly coloured sphere rendered with the face preset.
pub fn sphere_scene(n: usize, light: LightParams) -> (Image, ScalarMap) {
    let depth = sphere_depth(n);
    let normals = normals_from_depth(&depth).unwrap();
    let dec = Decomposition {
        depth: Some(depth.clone()),
        normals,
        n_refine: Grid::filled(n, n, Vec3::Z),
        material: MaterialParams::new(Grid::filled(n, n, [0.7, 0.45, 0.3]), 40.0, 0.4).unwrap(),
        light,
        spec_refine: None,
    };
    (
        render(&dec, &light, &RenderConfig::face()).unwrap().image,
        depth,
    )
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_derender"))
}

/// Run the command-line tool with a pinned timestamp.
pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("DERENDER_LOG", "error")
        .output()
        .expect("spawn derender")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "derender {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Write `image.png` and `depth.pfm` for a sphere scene into `dir`.
pub fn write_sphere_inputs(dir: &Path, n: usize, light: LightParams) -> (PathBuf, PathBuf) {
    let (image, depth) = sphere_scene(n, light);
    let img = dir.join("image.png");
    let dep = dir.join("depth.pfm");
    derender::png::write(&img, &derender::png::encode_image(&image)).unwrap();
    derender::pfm::Pfm::from_scalar(&depth).write(&dep).unwrap();
    (img, dep)
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
