//! Evaluation metrics: SSIM, mean normal angle, scale-invariant albedo
//! error and masked MSE/L1.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{self, Vec3};
use crate::raster::{Grid, Image, Mask, NormalMap, Rgb};
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - c;
        *v = math::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian blur of a `h x w` plane.
fn blur_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        let row = &x[i * w..(i + 1) * w];
        for p in 0..ow {
            tmp[i * ow + p] = taps
                .iter()
                .zip(&row[p..p + SSIM_WINDOW])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for q in 0..oh {
        for (k, &t) in taps.iter().enumerate() {
            let src = &tmp[(q + k) * ow..(q + k + 1) * ow];
            for (o, s) in out[q * ow..(q + 1) * ow].iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    out
}

/// Adjoint of [`blur_valid`].
fn blur_valid_adjoint(g: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for q in 0..oh {
        for (k, &t) in taps.iter().enumerate() {
            let dst = &mut tmp[(q + k) * ow..(q + k + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&g[q * ow..(q + 1) * ow]) {
                *d += t * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for p in 0..ow {
            let v = tmp[i * ow + p];
            for (k, &t) in taps.iter().enumerate() {
                out[i * w + p + k] += t * v;
            }
        }
    }
    out
}

fn check_ssim_inputs(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_dims(b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min_height: SSIM_WINDOW,
            min_width: SSIM_WINDOW,
        });
    }
    Ok(())
}

/// Mean SSIM over valid 11x11 windows, averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, false).map(|(v, _)| v)
}

/// SSIM together with its gradient with respect to `b`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<Rgb>)> {
    ssim_impl(a, b, true).map(|(v, g)| (v, g.unwrap_or_default()))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<Rgb>>)> {
    check_ssim_inputs(a, b)?;
    let (h, w) = a.dims();
    let taps = ssim_taps();
    let n_win = ((h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; h * w]);
    for c in 0..3 {
        let xa: Vec<f64> = a.as_slice().iter().map(|p| p[c]).collect();
        let xb: Vec<f64> = b.as_slice().iter().map(|p| p[c]).collect();
        let sq =
            |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = blur_valid(&xa, h, w, &taps);
        let mu_b = blur_valid(&xb, h, w, &taps);
        let e_aa = blur_valid(&sq(&xa, &xa), h, w, &taps);
        let e_bb = blur_valid(&sq(&xb, &xb), h, w, &taps);
        let e_ab = blur_valid(&sq(&xa, &xb), h, w, &taps);
        let n = mu_a.len();
        let mut g_mu = vec![0.0; if want_grad { n } else { 0 }];
        let mut g_ebb = g_mu.clone();
        let mut g_eab = g_mu.clone();
        let mut sum = 0.0;
        for k in 0..n {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let n1 = 2.0 * ma * mb + SSIM_C1;
            let n2 = 2.0 * (e_ab[k] - ma * mb) + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = (e_aa[k] - ma * ma) + (e_bb[k] - mb * mb) + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            sum += s;
            if want_grad {
                let scale = 1.0 / (3.0 * n_win);
                g_mu[k] =
                    scale * s * (2.0 * ma / n1 - 2.0 * ma / n2 - 2.0 * mb / d1 + 2.0 * mb / d2);
                g_eab[k] = scale * s * 2.0 / n2;
                g_ebb[k] = -scale * s / d2;
            }
        }
        total += sum / n_win;
        if let Some(g) = grad.as_mut() {
            let b_mu = blur_valid_adjoint(&g_mu, h, w, &taps);
            let b_bb = blur_valid_adjoint(&g_ebb, h, w, &taps);
            let b_ab = blur_valid_adjoint(&g_eab, h, w, &taps);
            for q in 0..h * w {
                g[q][c] = b_mu[q] + 2.0 * xb[q] * b_bb[q] + xa[q] * b_ab[q];
            }
        }
    }
    Ok((total / 3.0, grad))
}

fn valid_count(mask: &Mask) -> Result<f64> {
    match mask.count_valid() {
        0 => Err(Error::EmptyMask),
        n => Ok(n as f64),
    }
}

/// Mean angle in degrees between corresponding normals over the mask.
pub fn metric_dia(n_pred: &NormalMap, n_gt: &NormalMap, mask: &Mask) -> Result<f64> {
    n_pred.ensure_same_dims(n_gt)?;
    n_pred.ensure_same_dims(mask)?;
    let count = valid_count(mask)?;
    let sum: f64 = n_pred
        .as_slice()
        .iter()
        .zip(n_gt.as_slice())
        .zip(mask.as_slice())
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| a.angle_degrees(*b))
        .sum();
    Ok(sum / count)
}

/// Scale-invariant error: squared error after removing each channel's mean
/// over the mask, summed over channels and averaged over pixels.
pub fn metric_sie(a_pred: &Image, a_gt: &Image, mask: &Mask) -> Result<f64> {
    a_pred.ensure_same_dims(a_gt)?;
    a_pred.ensure_same_dims(mask)?;
    let count = valid_count(mask)?;
    let pairs = || {
        a_pred
            .as_slice()
            .iter()
            .zip(a_gt.as_slice())
            .zip(mask.as_slice())
            .filter(|(_, &m)| m)
            .map(|(p, _)| p)
    };
    let mut mean = [0.0; 3];
    for (p, g) in pairs() {
        for c in 0..3 {
            mean[c] += p[c] - g[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let sum: f64 = pairs()
        .map(|(p, g)| {
            (0..3)
                .map(|c| {
                    let d = p[c] - g[c] - mean[c];
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(sum / count)
}

/// Pixel types the masked error metrics can compare channel by channel.
pub trait Channels {
    const COUNT: usize;
    fn channel(&self, c: usize) -> f64;
}

impl Channels for f64 {
    const COUNT: usize = 1;
    fn channel(&self, _: usize) -> f64 {
        *self
    }
}

impl Channels for Rgb {
    const COUNT: usize = 3;
    fn channel(&self, c: usize) -> f64 {
        self[c]
    }
}

impl Channels for Vec3 {
    const COUNT: usize = 3;
    fn channel(&self, c: usize) -> f64 {
        [self.x, self.y, self.z][c]
    }
}

/// Masked `(mse, l1)` averaged over pixels and channels.
pub fn metric_mse_l1<T: Channels>(pred: &Grid<T>, gt: &Grid<T>, mask: &Mask) -> Result<(f64, f64)> {
    pred.ensure_same_dims(gt)?;
    pred.ensure_same_dims(mask)?;
    let count = valid_count(mask)? * T::COUNT as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for ((p, g), _) in pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.as_slice())
        .filter(|(_, &m)| m)
    {
        for c in 0..T::COUNT {
            let d = p.channel(c) - g.channel(c);
            se += d * d;
            ae += math::abs(d);
        }
    }
    Ok((se / count, ae / count))
}

/// Flat summary of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub mse: f64,
    pub l1: f64,
    pub dia_degrees: f64,
    pub sie: f64,
    pub ssim: f64,
    pub pixel_count: usize,
}

impl MetricReport {
    /// Albedo MSE/L1/SIE/SSIM plus normal DIA over `mask`.
    pub fn evaluate(
        pred_albedo: &Image,
        gt_albedo: &Image,
        pred_normals: &NormalMap,
        gt_normals: &NormalMap,
        mask: &Mask,
    ) -> Result<Self> {
        let (mse, l1) = metric_mse_l1(pred_albedo, gt_albedo, mask)?;
        Ok(Self {
            mse,
            l1,
            dia_degrees: metric_dia(pred_normals, gt_normals, mask)?,
            sie: metric_sie(pred_albedo, gt_albedo, mask)?,
            ssim: ssim(pred_albedo, gt_albedo)?,
            pixel_count: mask.count_valid(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        Grid::from_fn(h, w, |i, j| [f(i, j, 0), f(i, j, 1), f(i, j, 2)])
    }

    fn wavy(h: usize, w: usize, phase: f64) -> Image {
        img(h, w, |i, j, c| {
            0.5 + 0.4 * libm::sin(0.7 * i as f64 + 1.3 * j as f64 + phase + c as f64)
        })
    }

    #[test]
    fn ssim_examples() {
        let a = wavy(12, 13, 0.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = wavy(12, 13, 0.8);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let zero = Grid::filled(11, 11, [0.0; 3]);
        let one = Grid::filled(11, 11, [1.0; 3]);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            ssim(
                &Grid::filled(10, 20, [0.0; 3]),
                &Grid::filled(10, 20, [0.0; 3])
            ),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn ssim_gradient_matches_finite_difference() {
        let (h, w) = (12, 13);
        let a = wavy(h, w, 0.0);
        let b = wavy(h, w, 0.4);
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let flat: Vec<f64> = b.as_slice().iter().flatten().copied().collect();
        let fd = finite_diff(
            |x| {
                let px = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                ssim(&a, &Grid::new(h, w, px).unwrap()).unwrap()
            },
            &flat,
            1e-6,
        );
        let ga: Vec<f64> = g.iter().flatten().copied().collect();
        for (x, y) in ga.iter().zip(&fd) {
            assert!((x - y).abs() < 1e-7 + 1e-5 * y.abs(), "{x} vs {y}");
        }
    }

    #[test]
    fn dia_examples() {
        let m = Mask::all_valid(2, 2);
        let n = Grid::filled(2, 2, Vec3::Z);
        assert_eq!(metric_dia(&n, &n, &m).unwrap(), 0.0);
        let anti = n.map(|v| -*v);
        assert!((metric_dia(&n, &anti, &m).unwrap() - 180.0).abs() < 1e-12);
        let half = Grid::from_fn(2, 2, |i, _| {
            if i == 0 {
                Vec3::Z
            } else {
                Vec3::new(1.0, 0.0, 0.0)
            }
        });
        assert!((metric_dia(&n, &half, &m).unwrap() - 45.0).abs() < 1e-12);
        assert_eq!(
            metric_dia(&n, &n, &Grid::filled(2, 2, false)),
            Err(Error::EmptyMask)
        );
    }

    #[test]
    fn sie_examples() {
        let m = Mask::all_valid(1, 2);
        let gt = Grid::new(1, 2, vec![[0.0; 3], [1.0; 3]]).unwrap();
        let pred = Grid::new(1, 2, vec![[1.0; 3], [0.0; 3]]).unwrap();
        assert!((metric_sie(&pred, &gt, &m).unwrap() - 3.0).abs() < 1e-15);
        let shifted = gt.map(|p| [p[0] + 0.25, p[1] - 0.5, p[2] + 0.125]);
        assert_eq!(metric_sie(&shifted, &gt, &m).unwrap(), 0.0);
        assert_eq!(metric_sie(&gt, &gt, &m).unwrap(), 0.0);
    }

    #[test]
    fn mse_l1_examples() {
        let m = Mask::all_valid(3, 3);
        let a = wavy(3, 3, 0.0);
        assert_eq!(metric_mse_l1(&a, &a, &m).unwrap(), (0.0, 0.0));
        let z = Grid::filled(3, 3, [0.0; 3]);
        let h = Grid::filled(3, 3, [0.5; 3]);
        assert_eq!(metric_mse_l1(&h, &z, &m).unwrap(), (0.25, 0.5));
    }
}
