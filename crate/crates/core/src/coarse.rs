//! Coarse pseudo-supervision from an image and a rough shape: a Lambertian
//! light fit at fixed albedo brightness, shading inversion for albedo and a
//! total-variation refinement of that albedo.

use alloc::vec;
use alloc::vec::Vec;

use crate::formation::{light_from_xy, light_from_xy_jacobian, normals_from_depth, LightParams};
use crate::math::{self, charbonnier, charbonnier_grad, symmetric_eigenvalues, Vec3};
use crate::optim::{gradient_descent, ObjectiveReport, OptimConfig, StepRule};
use crate::raster::{
    brightness_hsv, fill_sparse_nearest, resample, resample_normals, sobel_adjoint,
    sobel_gradients, Grid, Image, Mask, NormalMap, ResampleMode, ScalarMap,
};
use crate::{Error, Result};

/// Shading floor used when dividing the image by the fitted shading.
pub const SHADING_FLOOR: f64 = 0.05;
/// Smoothing of the L1 terms in the albedo refinement.
pub const TV_SMOOTHING: f64 = 1e-3;
/// Below this smallest covariance eigenvalue the normals span too few
/// directions to separate ambient from directional light.
pub const DEGENERATE_EIGENVALUE: f64 = 1e-4;
pub const MIN_LIGHT_PIXELS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseConfig {
    pub iters: usize,
    pub lr_light: f64,
    pub lr_albedo: f64,
    pub lambda_tv: f64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self::face()
    }
}

impl CoarseConfig {
    pub fn face() -> Self {
        Self {
            iters: 100,
            lr_light: 0.01,
            lr_albedo: 0.04,
            lambda_tv: 5.0,
        }
    }

    pub fn object() -> Self {
        Self {
            lr_albedo: 0.01,
            lambda_tv: 20.0,
            ..Self::face()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.iters >= 1
            && self.lr_light > 0.0
            && self.lr_albedo > 0.0
            && self.lambda_tv >= 0.0
            && self.lr_light.is_finite()
            && self.lr_albedo.is_finite()
            && self.lambda_tv.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(alloc::format!(
                "invalid coarse config {self:?}"
            )))
        }
    }
}

/// Result of [`fit_coarse_light`].
#[derive(Clone, Debug, PartialEq)]
pub struct LightFit {
    pub light: LightParams,
    /// The valid normals are (nearly) coplanar or constant, so the
    /// ambient/directional split is not identifiable.
    pub degenerate: bool,
    pub report: ObjectiveReport,
}

/// Per-pixel samples of the light objective.
struct LightSamples {
    normals: Vec<Vec3>,
    /// Twice the brightness: the target shading at albedo brightness 1/2.
    target: Vec<f64>,
}

impl LightSamples {
    fn inv_n(&self) -> f64 {
        1.0 / self.normals.len() as f64
    }

    fn objective(&self, s_amb: f64, s_dir: f64, l: Vec3) -> f64 {
        let sum: f64 = self
            .normals
            .iter()
            .zip(&self.target)
            .map(|(n, t)| {
                let r = t - s_amb - s_dir * n.dot(l).max(0.0);
                r * r
            })
            .sum();
        sum * self.inv_n()
    }

    /// Best strengths in `[0,1]^2` for a fixed direction.
    fn strengths(&self, l: Vec3) -> (f64, f64) {
        let k = self.inv_n();
        let (mut q1, mut q2, mut t1, mut tq, mut tt) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (n, &t) in self.normals.iter().zip(&self.target) {
            let q = n.dot(l).max(0.0);
            q1 += q;
            q2 += q * q;
            t1 += t;
            tq += t * q;
            tt += t * t;
        }
        let (q1, q2, t1, tq, tt) = (q1 * k, q2 * k, t1 * k, tq * k, tt * k);
        let f = |a: f64, d: f64| {
            tt - 2.0 * a * t1 - 2.0 * d * tq + a * a + 2.0 * a * d * q1 + d * d * q2
        };
        let var = q2 - q1 * q1;
        let interior = if var > 1e-12 * q2.max(1e-300) {
            let d = (tq - t1 * q1) / var;
            (t1 - d * q1, d)
        } else {
            // shading is constant: only a + d q1 is determined; take the min-norm split
            let s = t1 / (1.0 + q1 * q1);
            (s, s * q1)
        };
        let unit = |v: f64| v.clamp(0.0, 1.0);
        let d_given_a = |a: f64| {
            if q2 > 0.0 {
                unit((tq - a * q1) / q2)
            } else {
                0.0
            }
        };
        let a_given_d = |d: f64| unit(t1 - d * q1);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let inside = (0.0..=1.0).contains(&interior.0) && (0.0..=1.0).contains(&interior.1);
        let mut candidates = vec![
            (0.0, d_given_a(0.0)),
            (1.0, d_given_a(1.0)),
            (a_given_d(0.0), 0.0),
            (a_given_d(1.0), 1.0),
        ];
        if inside {
            candidates.insert(0, interior);
        }
        for (a, d) in candidates {
            let v = f(a, d);
            if v < best.0 {
                best = (v, a, d);
            }
        }
        (best.1, best.2)
    }

    /// Objective with the strengths eliminated, and its gradient in `(x, y)`.
    fn reduced(&self, x: f64, y: f64, grad: &mut [f64]) -> f64 {
        let l = light_from_xy(x, y);
        let (a, d) = self.strengths(l);
        let k = self.inv_n();
        let mut g_l = Vec3::ZERO;
        let mut value = 0.0;
        for (n, t) in self.normals.iter().zip(&self.target) {
            let ndl = n.dot(l);
            let r = t - a - d * ndl.max(0.0);
            value += r * r;
            if ndl > 0.0 {
                g_l -= *n * (2.0 * r * d);
            }
        }
        let (jx, jy) = light_from_xy_jacobian(x, y);
        grad[0] = g_l.dot(jx) * k;
        grad[1] = g_l.dot(jy) * k;
        value * k
    }
}

/// True when the sample covariance of `normals` has a tiny eigenvalue.
pub fn directions_degenerate(normals: &[Vec3]) -> bool {
    if normals.len() < 2 {
        return true;
    }
    let k = 1.0 / normals.len() as f64;
    let mean = normals.iter().fold(Vec3::ZERO, |acc, &n| acc + n) * k;
    let mut c = [0.0; 6];
    for &n in normals {
        let d = n - mean;
        c[0] += d.x * d.x;
        c[1] += d.y * d.y;
        c[2] += d.z * d.z;
        c[3] += d.x * d.y;
        c[4] += d.x * d.z;
        c[5] += d.y * d.z;
    }
    c.iter_mut().for_each(|v| *v *= k);
    symmetric_eigenvalues(c)[0] < DEGENERATE_EIGENVALUE
}

/// Fit ambient/directional strengths and a direction to the brightness of
/// valid pixels, assuming Lambertian shading and albedo brightness 1/2.
///
/// The strengths are eliminated in closed form at every direction; the
/// direction then follows an RMS-preconditioned, monotone gradient descent
/// from frontal light.
pub fn fit_coarse_light(
    b: &ScalarMap,
    n_c: &NormalMap,
    valid: &Mask,
    cfg: &CoarseConfig,
) -> Result<LightFit> {
    cfg.validate()?;
    b.ensure_same_dims(n_c)?;
    b.ensure_same_dims(valid)?;
    let mut samples = LightSamples {
        normals: Vec::new(),
        target: Vec::new(),
    };
    for ((&bv, &n), &m) in b
        .as_slice()
        .iter()
        .zip(n_c.as_slice())
        .zip(valid.as_slice())
    {
        if !m {
            continue;
        }
        if !bv.is_finite() {
            return Err(Error::NonFinite("brightness"));
        }
        Error::check_range("brightness", bv, 0.0, 1.0)?;
        if !n.is_finite() {
            return Err(Error::NonFinite("coarse normals"));
        }
        samples.normals.push(n);
        samples.target.push(2.0 * bv);
    }
    if samples.normals.len() < MIN_LIGHT_PIXELS {
        return Err(Error::TooFewPixels {
            need: MIN_LIGHT_PIXELS,
            got: samples.normals.len(),
        });
    }

    let opt = OptimConfig {
        iters: cfg.iters,
        lr: cfg.lr_light,
        bounds: Some(vec![(-1.0, 1.0), (-1.0, 1.0)]),
        rule: StepRule::rms(),
        adaptive: None,
        monotone: true,
        max_halvings: 20,
    };
    let report = gradient_descent(|p, g| samples.reduced(p[0], p[1], g), &[0.0, 0.0], &opt)?;
    let (x, y) = (report.params[0], report.params[1]);
    let dir = light_from_xy(x, y);
    let (s_amb, s_dir) = samples.strengths(dir);
    Ok(LightFit {
        light: LightParams::new(s_amb, s_dir, dir)?,
        degenerate: directions_degenerate(&samples.normals),
        report,
    })
}

/// Mean squared residual of the Lambertian light model over valid pixels.
pub fn light_objective(
    b: &ScalarMap,
    n_c: &NormalMap,
    valid: &Mask,
    light: &LightParams,
) -> Result<f64> {
    b.ensure_same_dims(n_c)?;
    b.ensure_same_dims(valid)?;
    let (normals, target): (Vec<Vec3>, Vec<f64>) = b
        .as_slice()
        .iter()
        .zip(n_c.as_slice())
        .zip(valid.as_slice())
        .filter(|(_, &m)| m)
        .map(|((&bv, &n), _)| (n, 2.0 * bv))
        .unzip();
    if normals.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(LightSamples { normals, target }.objective(light.s_amb, light.s_dir, light.dir))
}

/// Gradient of [`light_objective`] in `(s_amb, s_dir, x, y)` for a light
/// built with [`light_from_xy`].
pub fn light_objective_grad(
    b: &ScalarMap,
    n_c: &NormalMap,
    valid: &Mask,
    p: [f64; 4],
) -> Result<(f64, [f64; 4])> {
    b.ensure_same_dims(n_c)?;
    b.ensure_same_dims(valid)?;
    let l = light_from_xy(p[2], p[3]);
    let (jx, jy) = light_from_xy_jacobian(p[2], p[3]);
    let mut count = 0usize;
    let (mut v, mut ga, mut gd, mut gl) = (0.0, 0.0, 0.0, Vec3::ZERO);
    for ((&bv, &n), &m) in b
        .as_slice()
        .iter()
        .zip(n_c.as_slice())
        .zip(valid.as_slice())
    {
        if !m {
            continue;
        }
        count += 1;
        let ndl = n.dot(l);
        let q = ndl.max(0.0);
        let r = 2.0 * bv - p[0] - p[1] * q;
        v += r * r;
        ga -= 2.0 * r;
        gd -= 2.0 * r * q;
        if ndl > 0.0 {
            gl -= n * (2.0 * r * p[1]);
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let k = 1.0 / count as f64;
    Ok((v * k, [ga * k, gd * k, gl.dot(jx) * k, gl.dot(jy) * k]))
}

/// `s_amb + s_dir max(0, n . l)` per pixel.
pub fn lambertian_shading(n_c: &NormalMap, light: &LightParams) -> ScalarMap {
    n_c.map(|n| light.s_amb + light.s_dir * n.dot(light.dir).max(0.0))
}

/// Divide the image by the Lambertian shading (floored at [`SHADING_FLOOR`])
/// and clamp to [0, 1]. Pixels outside `valid` take the value of the nearest
/// valid pixel.
pub fn invert_albedo(
    image: &Image,
    n_c: &NormalMap,
    light: &LightParams,
    valid: &Mask,
) -> Result<Image> {
    image.ensure_same_dims(n_c)?;
    image.ensure_same_dims(valid)?;
    let shading = lambertian_shading(n_c, light);
    let data = image
        .as_slice()
        .iter()
        .zip(shading.as_slice())
        .map(|(px, &s)| {
            let d = s.max(SHADING_FLOOR);
            [
                (px[0] / d).clamp(0.0, 1.0),
                (px[1] / d).clamp(0.0, 1.0),
                (px[2] / d).clamp(0.0, 1.0),
            ]
        })
        .collect();
    let inverted = Grid::new(image.height(), image.width(), data)?;
    if valid.is_all_valid() {
        Ok(inverted)
    } else {
        fill_sparse_nearest(&inverted, valid)
    }
}

/// Result of [`refine_albedo`].
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedAlbedo {
    pub albedo: Image,
    pub report: ObjectiveReport,
}

/// Edge-preserving smoothing objective, averaged over pixels and channels:
/// squared Sobel-gradient fidelity to `reference` plus `lambda_tv` times the
/// smoothed L1 norm of the Sobel gradients.
pub struct TvObjective {
    height: usize,
    width: usize,
    lambda_tv: f64,
    ref_gx: [ScalarMap; 3],
    ref_gy: [ScalarMap; 3],
}

impl TvObjective {
    pub fn new(reference: &Image, lambda_tv: f64) -> Result<Self> {
        let (h, w) = reference.dims();
        let mut gx = Vec::with_capacity(3);
        let mut gy = Vec::with_capacity(3);
        for c in 0..3 {
            let (x, y) = sobel_gradients(&reference.channel(c))?;
            gx.push(x);
            gy.push(y);
        }
        let arr = |v: Vec<ScalarMap>| -> [ScalarMap; 3] {
            let mut it = v.into_iter();
            [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
        };
        Ok(Self {
            height: h,
            width: w,
            lambda_tv,
            ref_gx: arr(gx),
            ref_gy: arr(gy),
        })
    }

    /// Value at the flattened RGB albedo `x`, gradient written into `grad`.
    pub fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        let k = 1.0 / (3 * n) as f64;
        let mut value = 0.0;
        for c in 0..3 {
            let plane =
                Grid::new(h, w, (0..n).map(|q| x[3 * q + c]).collect()).expect("plane dims");
            let (gx, gy) = sobel_gradients(&plane).expect("size checked at construction");
            let mut bx = Grid::filled(h, w, 0.0);
            let mut by = Grid::filled(h, w, 0.0);
            for q in 0..n {
                let (ax, ay) = (gx.as_slice()[q], gy.as_slice()[q]);
                let dx = ax - self.ref_gx[c].as_slice()[q];
                let dy = ay - self.ref_gy[c].as_slice()[q];
                value += dx * dx
                    + dy * dy
                    + self.lambda_tv
                        * (charbonnier(ax, TV_SMOOTHING) + charbonnier(ay, TV_SMOOTHING));
                bx.as_mut_slice()[q] =
                    k * (2.0 * dx + self.lambda_tv * charbonnier_grad(ax, TV_SMOOTHING));
                by.as_mut_slice()[q] =
                    k * (2.0 * dy + self.lambda_tv * charbonnier_grad(ay, TV_SMOOTHING));
            }
            let back = sobel_adjoint(&bx, &by).expect("same dims");
            for q in 0..n {
                grad[3 * q + c] = back.as_slice()[q];
            }
        }
        value * k
    }
}

/// Sum of absolute Sobel gradients over all channels.
pub fn total_variation(img: &Image) -> Result<f64> {
    let mut tv = 0.0;
    for c in 0..3 {
        let (gx, gy) = sobel_gradients(&img.channel(c))?;
        tv += gx
            .as_slice()
            .iter()
            .chain(gy.as_slice())
            .map(|v| math::abs(*v))
            .sum::<f64>();
    }
    Ok(tv)
}

/// Total-variation refinement by projected gradient descent from `a_tilde`.
pub fn refine_albedo(a_tilde: &Image, cfg: &CoarseConfig) -> Result<RefinedAlbedo> {
    cfg.validate()?;
    a_tilde.check_unit_range()?;
    let objective = TvObjective::new(a_tilde, cfg.lambda_tv)?;
    let init: Vec<f64> = a_tilde.as_slice().iter().flatten().copied().collect();
    let opt =
        OptimConfig::plain(cfg.iters, cfg.lr_albedo).with_bounds(vec![(0.0, 1.0); init.len()]);
    let report = gradient_descent(|x, g| objective.eval(x, g), &init, &opt)?;
    let data = report
        .params
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(RefinedAlbedo {
        albedo: Grid::new(a_tilde.height(), a_tilde.width(), data)?,
        report,
    })
}

/// Coarse shape input to [`coarse_pipeline`].
#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Depth(ScalarMap),
    Normals(NormalMap),
}

impl Geometry {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Geometry::Depth(d) => d.dims(),
            Geometry::Normals(n) => n.dims(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseDiagnostics {
    pub light: ObjectiveReport,
    pub albedo: ObjectiveReport,
    pub degenerate_direction: bool,
    /// The image was resampled to the geometry resolution.
    pub resampled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseEstimate {
    /// Densified coarse depth when the input was a depth map.
    pub depth: Option<ScalarMap>,
    pub normals: NormalMap,
    /// Refined albedo.
    pub albedo: Image,
    /// Albedo straight from shading inversion.
    pub albedo_tilde: Image,
    pub light: LightParams,
    /// Pixels where the coarse geometry was observed.
    pub valid: Mask,
    pub diagnostics: Option<CoarseDiagnostics>,
}

impl CoarseEstimate {
    /// An estimate assembled from known fields, e.g. ground truth.
    pub fn from_parts(
        depth: Option<ScalarMap>,
        normals: NormalMap,
        albedo: Image,
        light: LightParams,
        valid: Mask,
    ) -> Result<Self> {
        normals.ensure_same_dims(&albedo)?;
        normals.ensure_same_dims(&valid)?;
        if let Some(d) = &depth {
            normals.ensure_same_dims(d)?;
        }
        Ok(Self {
            depth,
            albedo_tilde: albedo.clone(),
            normals,
            albedo,
            light,
            valid,
            diagnostics: None,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.normals.dims()
    }

    /// Maps resampled to `h x w` (bilinear for continuous maps, nearest for
    /// the mask); the identity when dimensions already match.
    pub fn resampled(&self, h: usize, w: usize) -> Self {
        if self.dims() == (h, w) {
            return self.clone();
        }
        Self {
            depth: self
                .depth
                .as_ref()
                .map(|d| resample(d, h, w, ResampleMode::Bilinear)),
            normals: resample_normals(&self.normals, h, w, ResampleMode::Bilinear),
            albedo: resample(&self.albedo, h, w, ResampleMode::Bilinear),
            albedo_tilde: resample(&self.albedo_tilde, h, w, ResampleMode::Bilinear),
            light: self.light,
            valid: crate::raster::resample_nearest(&self.valid, h, w),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Densify the geometry, fit the light on observed pixels, invert shading
/// everywhere and refine. Runs at the geometry's resolution; the image is
/// resampled to it when the sizes differ.
pub fn coarse_pipeline(
    image: &Image,
    geometry: &Geometry,
    valid: Option<&Mask>,
    cfg: &CoarseConfig,
) -> Result<CoarseEstimate> {
    cfg.validate()?;
    image.check_unit_range()?;
    let (h, w) = geometry.dims();
    let valid = match valid {
        Some(m) => {
            if m.dims() != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: (h, w),
                    got: m.dims(),
                });
            }
            m.clone()
        }
        None => Mask::all_valid(h, w),
    };
    if valid.count_valid() == 0 {
        return Err(Error::EmptyMask);
    }
    let dense = valid.is_all_valid();
    let (depth, normals) = match geometry {
        Geometry::Depth(d) => {
            let d = if dense {
                d.clone()
            } else {
                fill_sparse_nearest(d, &valid)?
            };
            let n = normals_from_depth(&d)?;
            (Some(d), n)
        }
        Geometry::Normals(n) => {
            let n = if dense {
                n.clone()
            } else {
                fill_sparse_nearest(n, &valid)?
            };
            (None, n)
        }
    };
    let resampled = image.dims() != (h, w);
    let image = if resampled {
        resample(image, h, w, ResampleMode::Bilinear)
    } else {
        image.clone()
    };
    let b = brightness_hsv(&image);
    let light_fit = fit_coarse_light(&b, &normals, &valid, cfg)?;
    let albedo_tilde = invert_albedo(&image, &normals, &light_fit.light, &Mask::all_valid(h, w))?;
    let refined = refine_albedo(&albedo_tilde, cfg)?;
    Ok(CoarseEstimate {
        depth,
        normals,
        albedo: refined.albedo,
        albedo_tilde,
        light: light_fit.light,
        valid,
        diagnostics: Some(CoarseDiagnostics {
            light: light_fit.report,
            albedo: refined.report,
            degenerate_direction: light_fit.degenerate,
            resampled,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::grad_check;

    fn hemisphere(n: usize) -> (NormalMap, Mask) {
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

    #[test]
    fn recovers_light_on_hemisphere() {
        let (n, m) = hemisphere(48);
        let truth =
            LightParams::new(0.3, 0.6, Vec3::new(0.3, 0.2, 1.0).normalized().unwrap()).unwrap();
        let b = n.map(|v| 0.5 * (truth.s_amb + truth.s_dir * v.dot(truth.dir).max(0.0)));
        let fit = fit_coarse_light(&b, &n, &m, &CoarseConfig::default()).unwrap();
        assert!(
            fit.light.dir.angle_degrees(truth.dir) < 2.0,
            "{:?}",
            fit.light
        );
        assert!((fit.light.s_amb - 0.3).abs() < 0.05 && (fit.light.s_dir - 0.6).abs() < 0.05);
        assert!(!fit.degenerate);
        let mut prev = fit.report.initial;
        for &v in &fit.report.trace {
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn flat_normals_are_degenerate() {
        let n = Grid::filled(8, 8, Vec3::Z);
        let b = Grid::filled(8, 8, 0.45);
        let fit =
            fit_coarse_light(&b, &n, &Mask::all_valid(8, 8), &CoarseConfig::default()).unwrap();
        assert!(fit.degenerate);
        assert!((fit.light.s_amb + fit.light.s_dir * fit.light.dir.z - 0.9).abs() < 1e-9);
    }

    #[test]
    fn zero_brightness_gives_zero_strengths() {
        let (n, m) = hemisphere(16);
        let b = Grid::filled(16, 16, 0.0);
        let fit = fit_coarse_light(&b, &n, &m, &CoarseConfig::default()).unwrap();
        assert_eq!((fit.light.s_amb, fit.light.s_dir), (0.0, 0.0));
    }

    #[test]
    fn light_fit_needs_pixels() {
        let n = Grid::filled(3, 3, Vec3::Z);
        let err = fit_coarse_light(
            &Grid::filled(3, 3, 0.2),
            &n,
            &Mask::all_valid(3, 3),
            &CoarseConfig::default(),
        );
        assert_eq!(err.unwrap_err(), Error::TooFewPixels { need: 10, got: 9 });
        let mut b = Grid::filled(4, 4, 0.2);
        *b.get_mut(1, 1) = f64::NAN;
        let err = fit_coarse_light(
            &b,
            &Grid::filled(4, 4, Vec3::Z),
            &Mask::all_valid(4, 4),
            &CoarseConfig::default(),
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn light_objective_gradient() {
        let (n, m) = hemisphere(12);
        let b = Grid::from_fn(12, 12, |i, j| 0.2 + 0.03 * ((i + 2 * j) % 7) as f64);
        let err = grad_check(
            |p, g| {
                let (v, gr) = light_objective_grad(&b, &n, &m, [p[0], p[1], p[2], p[3]]).unwrap();
                g.copy_from_slice(&gr);
                v
            },
            &[0.4, 0.5, 0.2, -0.3],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn inversion_examples() {
        let a = Grid::from_fn(4, 4, |i, j| [0.1 * i as f64, 0.2, 0.05 * j as f64 + 0.3]);
        let amb = LightParams::new(0.5, 0.0, Vec3::Z).unwrap();
        let img = a.map(|p| [0.5 * p[0], 0.5 * p[1], 0.5 * p[2]]);
        let n = Grid::filled(4, 4, Vec3::Z);
        let all = Mask::all_valid(4, 4);
        let out = invert_albedo(&img, &n, &amb, &all).unwrap();
        for (x, y) in out
            .as_slice()
            .iter()
            .flatten()
            .zip(a.as_slice().iter().flatten())
        {
            assert!((x - y).abs() < 1e-15);
        }
        let unit = LightParams::new(1.0, 0.0, Vec3::Z).unwrap();
        assert_eq!(invert_albedo(&img, &n, &unit, &all).unwrap(), img);
        let dark = LightParams::new(0.01, 0.0, Vec3::Z).unwrap();
        let px = Grid::filled(1, 1, [0.01, 0.2, 0.0]);
        let out = invert_albedo(
            &px,
            &Grid::filled(1, 1, Vec3::Z),
            &dark,
            &Mask::all_valid(1, 1),
        )
        .unwrap();
        assert!((out.get(0, 0)[0] - 0.2).abs() < 1e-15);
        assert_eq!(out.get(0, 0)[1], 1.0);
    }

    #[test]
    fn inversion_fills_invalid_pixels() {
        let img = Grid::from_fn(1, 3, |_, j| [0.1 * j as f64; 3]);
        let n = Grid::filled(1, 3, Vec3::Z);
        let mask = Grid::new(1, 3, vec![true, false, false]).unwrap();
        let light = LightParams::new(1.0, 0.0, Vec3::Z).unwrap();
        let out = invert_albedo(&img, &n, &light, &mask).unwrap();
        assert!(out.as_slice().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn refine_constant_and_zero_lambda() {
        let c = Grid::filled(6, 6, [0.3, 0.4, 0.5]);
        assert_eq!(
            refine_albedo(&c, &CoarseConfig::default()).unwrap().albedo,
            c
        );
        let a = Grid::from_fn(6, 6, |i, j| [0.1 + 0.1 * ((i * j) % 5) as f64; 3]);
        let cfg = CoarseConfig {
            lambda_tv: 0.0,
            ..CoarseConfig::default()
        };
        let out = refine_albedo(&a, &cfg).unwrap().albedo;
        for (x, y) in out
            .as_slice()
            .iter()
            .flatten()
            .zip(a.as_slice().iter().flatten())
        {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_objective_gradient() {
        let a = Grid::from_fn(8, 8, |i, j| {
            [0.3 + 0.05 * i as f64, 0.5, 0.2 + 0.07 * j as f64]
        });
        let obj = TvObjective::new(&a, 5.0).unwrap();
        let x: Vec<f64> = a
            .as_slice()
            .iter()
            .enumerate()
            .flat_map(|(k, p)| p.map(|v| v + 0.03 * libm::sin(k as f64 * 0.9)))
            .collect();
        let err = grad_check(|p, g| obj.eval(p, g), &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pipeline_identity_path_and_resampling() {
        let (n, m) = hemisphere(20);
        let light = LightParams::new(0.3, 0.6, light_from_xy(0.2, 0.1)).unwrap();
        let img = n.map(|v| [0.5 * (light.s_amb + light.s_dir * v.dot(light.dir).max(0.0)); 3]);
        let est = coarse_pipeline(
            &img,
            &Geometry::Normals(n.clone()),
            Some(&m),
            &CoarseConfig::default(),
        )
        .unwrap();
        assert!(!est.diagnostics.as_ref().unwrap().resampled);
        for ((a, b), v) in est
            .normals
            .as_slice()
            .iter()
            .zip(n.as_slice())
            .zip(m.as_slice())
        {
            assert!(!v || a == b);
        }
        let big = resample(&img, 40, 40, ResampleMode::Bilinear);
        let est = coarse_pipeline(
            &big,
            &Geometry::Normals(n),
            Some(&m),
            &CoarseConfig::default(),
        )
        .unwrap();
        assert!(est.diagnostics.unwrap().resampled);
        assert_eq!(est.albedo.dims(), (20, 20));
    }
}
