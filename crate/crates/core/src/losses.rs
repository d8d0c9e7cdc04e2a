//! Training losses: coarse pseudo-supervision, reconstruction, LSGAN and
//! the random relighting sampler.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::coarse::CoarseEstimate;
use crate::formation::{Decomposition, LightParams};
use crate::math::{self, Vec3};
use crate::metrics::{ssim, ssim_with_grad};
use crate::raster::{Image, Mask, NormalMap, Rgb, ScalarMap};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_a: f64,
    pub lambda_l: f64,
    pub lambda_rec: f64,
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 0.5,
            lambda_n: 1.0,
            lambda_a: 1.0,
            lambda_l: 1.0,
            lambda_rec: 0.5,
            lambda_gan: 0.01,
        }
    }
}

impl LossWeights {
    /// Weights for general objects, where coarse light is not trusted.
    pub fn object() -> Self {
        Self {
            lambda_l: 0.0,
            ..Self::default()
        }
    }

    pub fn zero() -> Self {
        Self {
            lambda_d: 0.0,
            lambda_n: 0.0,
            lambda_a: 0.0,
            lambda_l: 0.0,
            lambda_rec: 0.0,
            lambda_gan: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_d,
            self.lambda_n,
            self.lambda_a,
            self.lambda_l,
            self.lambda_rec,
            self.lambda_gan,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(alloc::format!(
                "loss weights must be >= 0: {self:?}"
            )))
        }
    }
}

/// `|x|`, or its Charbonnier surrogate `sqrt(x^2 + k^2) - k` when `k > 0`.
#[inline]
pub fn smooth_abs(x: f64, k: f64) -> f64 {
    if k > 0.0 {
        math::sqrt(x * x + k * k) - k
    } else {
        math::abs(x)
    }
}

#[inline]
pub fn smooth_abs_grad(x: f64, k: f64) -> f64 {
    if k > 0.0 {
        x / math::sqrt(x * x + k * k)
    } else if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Coarse targets the prediction is pulled towards.
#[derive(Clone, Copy, Debug)]
pub struct CoarseTargets<'a> {
    pub depth: Option<&'a ScalarMap>,
    pub normals: &'a NormalMap,
    pub albedo: &'a Image,
    pub light: &'a LightParams,
    pub valid: &'a Mask,
}

impl<'a> CoarseTargets<'a> {
    pub fn of(coarse: &'a CoarseEstimate) -> Self {
        Self {
            depth: coarse.depth.as_ref(),
            normals: &coarse.normals,
            albedo: &coarse.albedo,
            light: &coarse.light,
            valid: &coarse.valid,
        }
    }
}

/// Prediction-side fields of the coarse loss.
#[derive(Clone, Copy, Debug)]
pub struct CoarsePrediction<'a> {
    pub depth: Option<&'a ScalarMap>,
    pub normals: &'a NormalMap,
    pub albedo: &'a Image,
    pub light: &'a LightParams,
}

/// Value and gradients of [`coarse_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseLossGrad {
    pub value: f64,
    /// Empty when the depth term is inactive.
    pub depth: Vec<f64>,
    pub normals: Vec<Vec3>,
    pub albedo: Vec<Rgb>,
    /// With respect to `(s_amb, s_dir, l_x, l_y, l_z)`.
    pub light: [f64; 5],
}

/// Weighted coarse loss: mean depth L1, negative mean normal alignment, mean
/// per-pixel albedo L1 (channels summed) over valid pixels, plus the squared
/// distance between the light 5-vectors. `l1_smoothing > 0` replaces the L1
/// terms by their Charbonnier surrogates.
pub fn coarse_loss_with_grad(
    pred: &CoarsePrediction<'_>,
    target: &CoarseTargets<'_>,
    w: &LossWeights,
    l1_smoothing: f64,
) -> Result<CoarseLossGrad> {
    w.validate()?;
    let dims = pred.normals.dims();
    pred.normals.ensure_same_dims(pred.albedo)?;
    pred.normals.ensure_same_dims(target.normals)?;
    pred.normals.ensure_same_dims(target.albedo)?;
    pred.normals.ensure_same_dims(target.valid)?;
    let depth_pair = if w.lambda_d > 0.0 {
        let p = pred.depth.ok_or(Error::MissingComponent("depth"))?;
        let t = target
            .depth
            .ok_or(Error::MissingComponent("coarse depth"))?;
        p.ensure_same_dims(t)?;
        if p.dims() != dims {
            return Err(Error::ShapeMismatch {
                expected: dims,
                got: p.dims(),
            });
        }
        Some((p, t))
    } else {
        None
    };
    let count = target.valid.count_valid();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let k = 1.0 / count as f64;
    let n_px = pred.normals.len();
    let mut out = CoarseLossGrad {
        value: 0.0,
        depth: if depth_pair.is_some() {
            vec![0.0; n_px]
        } else {
            Vec::new()
        },
        normals: vec![Vec3::ZERO; n_px],
        albedo: vec![[0.0; 3]; n_px],
        light: [0.0; 5],
    };
    let (mut sd, mut sn, mut sa) = (0.0, 0.0, 0.0);
    for q in 0..n_px {
        if !target.valid.as_slice()[q] {
            continue;
        }
        if let Some((p, t)) = depth_pair {
            let d = p.as_slice()[q] - t.as_slice()[q];
            sd += smooth_abs(d, l1_smoothing);
            out.depth[q] = w.lambda_d * k * smooth_abs_grad(d, l1_smoothing);
        }
        let nc = target.normals.as_slice()[q];
        sn += pred.normals.as_slice()[q].dot(nc);
        out.normals[q] = nc * (-w.lambda_n * k);
        let (a, ac) = (pred.albedo.as_slice()[q], target.albedo.as_slice()[q]);
        for c in 0..3 {
            let d = a[c] - ac[c];
            sa += smooth_abs(d, l1_smoothing);
            out.albedo[q][c] = w.lambda_a * k * smooth_abs_grad(d, l1_smoothing);
        }
    }
    let (lp, lt) = (pred.light.as_vector(), target.light.as_vector());
    let mut sl = 0.0;
    for i in 0..5 {
        let d = lp[i] - lt[i];
        sl += d * d;
        out.light[i] = 2.0 * w.lambda_l * d;
    }
    out.value = w.lambda_d * sd * k - w.lambda_n * sn * k + w.lambda_a * sa * k + w.lambda_l * sl;
    Ok(out)
}

/// [`coarse_loss_with_grad`] value for a decomposition, without smoothing.
pub fn coarse_loss(dec: &Decomposition, coarse: &CoarseEstimate, w: &LossWeights) -> Result<f64> {
    let pred = CoarsePrediction {
        depth: dec.depth.as_ref(),
        normals: &dec.normals,
        albedo: &dec.material.albedo,
        light: &dec.light,
    };
    coarse_loss_with_grad(&pred, &CoarseTargets::of(coarse), w, 0.0).map(|g| g.value)
}

/// Mean per-channel L1 plus `(1 - SSIM) / 2`.
pub fn reconstruction_loss(i_in: &Image, i_hat: &Image) -> Result<f64> {
    i_in.ensure_same_dims(i_hat)?;
    let l1 = mean_l1(i_in, i_hat, 0.0);
    Ok(l1 + 0.5 * (1.0 - ssim(i_in, i_hat)?))
}

fn mean_l1(a: &Image, b: &Image, k: f64) -> f64 {
    let sum: f64 = a
        .as_slice()
        .iter()
        .flatten()
        .zip(b.as_slice().iter().flatten())
        .map(|(x, y)| smooth_abs(y - x, k))
        .sum();
    sum / (3 * a.len()) as f64
}

/// Reconstruction loss and its gradient with respect to `i_hat`, with the
/// L1 part optionally Charbonnier-smoothed.
pub fn reconstruction_loss_with_grad(
    i_in: &Image,
    i_hat: &Image,
    l1_smoothing: f64,
) -> Result<(f64, Vec<Rgb>)> {
    i_in.ensure_same_dims(i_hat)?;
    let (s, mut g) = ssim_with_grad(i_in, i_hat)?;
    let k = 1.0 / (3 * i_in.len()) as f64;
    for (gq, (a, b)) in g
        .iter_mut()
        .zip(i_in.as_slice().iter().zip(i_hat.as_slice()))
    {
        for c in 0..3 {
            gq[c] = k * smooth_abs_grad(b[c] - a[c], l1_smoothing) - 0.5 * gq[c];
        }
    }
    Ok((mean_l1(i_in, i_hat, l1_smoothing) + 0.5 * (1.0 - s), g))
}

/// Least-squares GAN losses `(discriminator, generator)` from raw scores.
pub fn lsgan_losses(real: &[f64], fake: &[f64]) -> Result<(f64, f64)> {
    if real.is_empty() {
        return Err(Error::EmptyInput("real scores"));
    }
    if fake.is_empty() {
        return Err(Error::EmptyInput("fake scores"));
    }
    let mean =
        |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let d = mean(real, &|r| (r - 1.0) * (r - 1.0)) + mean(fake, &|f| f * f);
    let g = mean(fake, &|f| (1.0 - f) * (1.0 - f));
    Ok((d, g))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightSampleConfig {
    pub sigma_l: f64,
    pub strength_sigma: f64,
    pub rng_seed: u64,
}

impl Default for LightSampleConfig {
    fn default() -> Self {
        Self {
            sigma_l: 1.0,
            strength_sigma: 0.1,
            rng_seed: 0,
        }
    }
}

/// Draws random relighting conditions around a batch of lights.
#[derive(Clone, Debug)]
pub struct LightSampler {
    cfg: LightSampleConfig,
    rng: ChaCha8Rng,
    dir: Normal<f64>,
}

impl LightSampler {
    pub fn new(cfg: LightSampleConfig) -> Result<Self> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(cfg.sigma_l) || !positive(cfg.strength_sigma) {
            return Err(Error::InvalidParameter(alloc::format!(
                "sampler sigmas must be positive: {cfg:?}"
            )));
        }
        let dir =
            Normal::new(0.0, cfg.sigma_l).map_err(|_| Error::InvalidParameter("sigma_l".into()))?;
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            dir,
        })
    }

    /// `x, y ~ N(0, sigma_l)` with `z = 1`, normalised; each strength drawn
    /// around its batch mean and clamped to [0, 1].
    pub fn sample(&mut self, batch: &[LightParams]) -> Result<LightParams> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("light batch"));
        }
        let k = 1.0 / batch.len() as f64;
        let mu_amb = batch.iter().map(|l| l.s_amb).sum::<f64>() * k;
        let mu_dir = batch.iter().map(|l| l.s_dir).sum::<f64>() * k;
        let x = self.dir.sample(&mut self.rng);
        let y = self.dir.sample(&mut self.rng);
        let amb = self.strength(mu_amb);
        let sdir = self.strength(mu_dir);
        let dir = Vec3::new(x, y, 1.0).normalized().unwrap_or(Vec3::Z);
        LightParams::new(amb, sdir, dir)
    }

    /// One strength draw before clamping.
    pub fn raw_strength(&mut self, mean: f64) -> f64 {
        mean + self.cfg.strength_sigma * self.standard()
    }

    fn strength(&mut self, mean: f64) -> f64 {
        self.raw_strength(mean).clamp(0.0, 1.0)
    }

    fn standard(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.rng)
    }
}

/// One-shot convenience around [`LightSampler`].
pub fn sample_random_light(batch: &[LightParams], cfg: &LightSampleConfig) -> Result<LightParams> {
    LightSampler::new(*cfg)?.sample(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::MaterialParams;
    use crate::raster::Grid;

    fn scene() -> (Decomposition, CoarseEstimate) {
        let (h, w) = (4, 4);
        let normals = Grid::from_fn(h, w, |i, j| {
            Vec3::new(0.1 * j as f64 - 0.15, 0.1 * i as f64 - 0.15, 1.0)
                .normalized()
                .unwrap()
        });
        let albedo = Grid::from_fn(h, w, |i, j| {
            [0.2 + 0.1 * i as f64, 0.5, 0.3 + 0.05 * j as f64]
        });
        let depth = Grid::from_fn(h, w, |i, j| 1.0 + 0.01 * (i + j) as f64);
        let light = LightParams::from_xy(0.3, 0.6, 0.2, -0.1).unwrap();
        let coarse = CoarseEstimate::from_parts(
            Some(depth.clone()),
            normals.clone(),
            albedo.clone(),
            light,
            Mask::all_valid(h, w),
        )
        .unwrap();
        let dec = Decomposition {
            depth: Some(depth),
            n_refine: Grid::filled(h, w, Vec3::Z),
            normals,
            material: MaterialParams::new(albedo, 10.0, 0.2).unwrap(),
            light,
            spec_refine: None,
        };
        (dec, coarse)
    }

    #[test]
    fn coarse_loss_examples() {
        let (mut dec, coarse) = scene();
        let w = LossWeights::default();
        assert!((coarse_loss(&dec, &coarse, &w).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(
            coarse_loss(&dec, &coarse, &LossWeights::zero()).unwrap(),
            0.0
        );
        dec.normals = coarse.normals.map(|n| -*n);
        assert!((coarse_loss(&dec, &coarse, &w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coarse_loss_missing_depth() {
        let (mut dec, coarse) = scene();
        dec.depth = None;
        assert_eq!(
            coarse_loss(&dec, &coarse, &LossWeights::default()),
            Err(Error::MissingComponent("depth"))
        );
        let w = LossWeights {
            lambda_d: 0.0,
            ..LossWeights::default()
        };
        assert!(coarse_loss(&dec, &coarse, &w).is_ok());
    }

    #[test]
    fn reconstruction_examples() {
        let a = Grid::from_fn(12, 12, |i, j| {
            [0.2 + 0.02 * i as f64, 0.3 + 0.01 * j as f64, 0.4]
        });
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]);
        let expected = 0.1 + 0.5 * (1.0 - ssim(&a, &b).unwrap());
        assert!((reconstruction_loss(&a, &b).unwrap() - expected).abs() < 1e-15);
        assert!((mean_l1(&a, &b, 0.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lsgan_examples() {
        assert_eq!(lsgan_losses(&[1.0], &[0.0]).unwrap(), (0.0, 1.0));
        assert_eq!(lsgan_losses(&[1.0], &[1.0]).unwrap().1, 0.0);
        assert_eq!(lsgan_losses(&[0.5], &[0.5]).unwrap(), (0.5, 0.25));
        assert!(lsgan_losses(&[], &[0.5]).is_err());
    }

    #[test]
    fn sampler_examples() {
        let batch = [LightParams::from_xy(0.4, 0.5, 0.1, 0.2).unwrap(); 3];
        let tiny = LightSampleConfig {
            sigma_l: 1e-12,
            ..LightSampleConfig::default()
        };
        let l = sample_random_light(&batch, &tiny).unwrap();
        assert!((l.dir - Vec3::Z).norm() < 1e-10);

        let cfg = LightSampleConfig {
            rng_seed: 7,
            ..LightSampleConfig::default()
        };
        let mut s = LightSampler::new(cfg).unwrap();
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| s.sample(&batch).unwrap().s_amb).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let std = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - 0.4).abs() < 2e-3);
        assert!((std - 0.1).abs() < 0.01);

        let mut a = LightSampler::new(cfg).unwrap();
        let mut b = LightSampler::new(cfg).unwrap();
        for _ in 0..10 {
            assert_eq!(a.sample(&batch).unwrap(), b.sample(&batch).unwrap());
        }
    }
}
