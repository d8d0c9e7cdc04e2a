//! Image and geometry containers plus the low-level raster operations every
//! other module builds on.
//!
//! All maps are stored row-major. Row `i` runs top to bottom and column `j`
//! left to right in image space.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::Vec3;
use crate::{Error, Result};

pub type Rgb = [f64; 3];

/// A dense `height x width` grid of pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type ScalarMap = Grid<f64>;
pub type Image = Grid<Rgb>;
pub type NormalMap = Grid<Vec3>;
pub type Mask = Grid<bool>;

impl<T> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::BadDimensions);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid must be at least 1x1");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.width + j]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.width + j]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_same_dims<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.dims(),
                got: other.dims(),
            })
        }
    }

    /// Swap rows and columns.
    pub fn transposed(&self) -> Self
    where
        T: Clone,
    {
        Grid::from_fn(self.width, self.height, |i, j| self.get(j, i).clone())
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "grid must be at least 1x1");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl Grid<Rgb> {
    /// Build an image, checking that every channel is finite and in [0, 1].
    pub fn from_rgb(height: usize, width: usize, data: Vec<Rgb>) -> Result<Self> {
        let img = Grid::new(height, width, data)?;
        img.check_unit_range()?;
        Ok(img)
    }

    pub fn check_unit_range(&self) -> Result<()> {
        for px in &self.data {
            for &c in px {
                if !c.is_finite() {
                    return Err(Error::NonFinite("image"));
                }
                Error::check_range("image channel", c, 0.0, 1.0)?;
            }
        }
        Ok(())
    }

    pub fn channel(&self, c: usize) -> ScalarMap {
        self.map(|p| p[c])
    }

    pub fn from_channels(r: &ScalarMap, g: &ScalarMap, b: &ScalarMap) -> Result<Self> {
        r.ensure_same_dims(g)?;
        r.ensure_same_dims(b)?;
        let data = (0..r.len())
            .map(|k| [r.data[k], g.data[k], b.data[k]])
            .collect();
        Grid::new(r.height, r.width, data)
    }
}

impl Grid<Vec3> {
    /// Build a normal map, checking finiteness and unit length within `tol`.
    pub fn from_normals(height: usize, width: usize, data: Vec<Vec3>, tol: f64) -> Result<Self> {
        let map = Grid::new(height, width, data)?;
        for n in &map.data {
            if !n.is_finite() {
                return Err(Error::NonFinite("normal map"));
            }
            let len = n.norm();
            if (len - 1.0).abs() > tol {
                return Err(Error::InvalidParameter(alloc::format!(
                    "normal of length {len} is not unit within {tol}"
                )));
            }
        }
        Ok(map)
    }

    /// Rescale every vector to unit length; zero vectors become `+z`.
    pub fn renormalized(&self) -> Self {
        self.map(|n| n.normalized().unwrap_or(Vec3::Z))
    }
}

impl Grid<bool> {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Grid::filled(height, width, true)
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_all_valid(&self) -> bool {
        self.data.iter().all(|&v| v)
    }
}

/// HSV value channel, `max(R, G, B)`, of every pixel.
pub fn brightness_hsv(img: &Image) -> ScalarMap {
    img.map(|p| p[0].max(p[1]).max(p[2]))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

#[inline]
fn clamp_index(k: isize, n: usize) -> usize {
    k.clamp(0, n as isize - 1) as usize
}

/// Sobel gradients with the 3x3 kernels normalised by 1/8 and replicate padding.
///
/// `gx` is the derivative along increasing column index and `gy` along
/// increasing row index, so a unit ramp in either direction yields 1.
pub fn sobel_gradients(map: &ScalarMap) -> Result<(ScalarMap, ScalarMap)> {
    let (h, w) = map.dims();
    if h < 3 || w < 3 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min_height: 3,
            min_width: 3,
        });
    }
    let mut gx = Grid::filled(h, w, 0.0);
    let mut gy = Grid::filled(h, w, 0.0);
    for i in 0..h {
        let (up, down) = (
            clamp_index(i as isize - 1, h),
            clamp_index(i as isize + 1, h),
        );
        for j in 0..w {
            let (left, right) = (
                clamp_index(j as isize - 1, w),
                clamp_index(j as isize + 1, w),
            );
            let at = |r: usize, c: usize| *map.get(r, c);
            // differences first: exact zeros on constants, symmetric under transposition
            let sx = (at(up, right) - at(up, left))
                + 2.0 * (at(i, right) - at(i, left))
                + (at(down, right) - at(down, left));
            let sy = (at(down, left) - at(up, left))
                + 2.0 * (at(down, j) - at(up, j))
                + (at(down, right) - at(up, right));
            *gx.get_mut(i, j) = sx / 8.0;
            *gy.get_mut(i, j) = sy / 8.0;
        }
    }
    Ok((gx, gy))
}

/// Adjoint of [`sobel_gradients`]: given `dL/dgx` and `dL/dgy`, returns `dL/dmap`.
pub fn sobel_adjoint(grad_x: &ScalarMap, grad_y: &ScalarMap) -> Result<ScalarMap> {
    grad_x.ensure_same_dims(grad_y)?;
    let (h, w) = grad_x.dims();
    if h < 3 || w < 3 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min_height: 3,
            min_width: 3,
        });
    }
    let mut out = Grid::filled(h, w, 0.0);
    for i in 0..h {
        for j in 0..w {
            let ux = *grad_x.get(i, j) / 8.0;
            let uy = *grad_y.get(i, j) / 8.0;
            for di in 0..3 {
                let ii = clamp_index(i as isize + di as isize - 1, h);
                for dj in 0..3 {
                    let jj = clamp_index(j as isize + dj as isize - 1, w);
                    *out.get_mut(ii, jj) += SOBEL_X[di][dj] * ux + SOBEL_X[dj][di] * uy;
                }
            }
        }
    }
    Ok(out)
}

/// Replace every invalid pixel by the value of its nearest valid pixel.
///
/// Distance is Euclidean in pixel units. Ties go to the lexicographically
/// smallest `(row, col)`. Valid pixels are left untouched.
pub fn fill_sparse_nearest<T: Clone>(map: &Grid<T>, valid: &Mask) -> Result<Grid<T>> {
    map.ensure_same_dims(valid)?;
    let (h, w) = map.dims();
    if valid.is_all_valid() {
        return Ok(map.clone());
    }
    if valid.count_valid() == 0 {
        return Err(Error::EmptyMask);
    }

    // For each column, the nearest valid row to every row (smaller row on ties).
    let mut nearest_row: Vec<Option<usize>> = vec![None; h * w];
    for j in 0..w {
        let mut above: Option<usize> = None;
        let mut up = vec![None; h];
        for i in 0..h {
            if *valid.get(i, j) {
                above = Some(i);
            }
            up[i] = above;
        }
        let mut below: Option<usize> = None;
        for i in (0..h).rev() {
            if *valid.get(i, j) {
                below = Some(i);
            }
            nearest_row[i * w + j] = match (up[i], below) {
                (Some(a), Some(b)) => {
                    if i - a <= b - i {
                        Some(a)
                    } else {
                        Some(b)
                    }
                }
                (Some(a), None) => Some(a),
                (None, b) => b,
            };
        }
    }

    let mut out = map.clone();
    for i in 0..h {
        for j in 0..w {
            if *valid.get(i, j) {
                continue;
            }
            let mut best: Option<(usize, usize, usize)> = None;
            for jj in 0..w {
                if let Some(ii) = nearest_row[i * w + jj] {
                    let d2 = ii.abs_diff(i).pow(2) + jj.abs_diff(j).pow(2);
                    let cand = (d2, ii, jj);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            let (_, ii, jj) = best.expect("at least one valid pixel");
            *out.get_mut(i, j) = map.get(ii, jj).clone();
        }
    }
    Ok(out)
}

/// How [`resample`] interpolates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

/// Pixel types that can be blended by bilinear resampling.
pub trait Blend: Copy {
    fn blend(a: Self, wa: f64, b: Self, wb: f64) -> Self;
}

impl Blend for f64 {
    #[inline]
    fn blend(a: f64, wa: f64, b: f64, wb: f64) -> f64 {
        a * wa + b * wb
    }
}

impl Blend for Rgb {
    #[inline]
    fn blend(a: Rgb, wa: f64, b: Rgb, wb: f64) -> Rgb {
        [
            a[0] * wa + b[0] * wb,
            a[1] * wa + b[1] * wb,
            a[2] * wa + b[2] * wb,
        ]
    }
}

impl Blend for Vec3 {
    #[inline]
    fn blend(a: Vec3, wa: f64, b: Vec3, wb: f64) -> Vec3 {
        a * wa + b * wb
    }
}

/// Source coordinate of destination pixel `dst` under the half-pixel-centre convention.
#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5
}

fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = source_coord(dst, src_len, dst_len).clamp(0.0, (src_len - 1) as f64);
    let lo = libm::floor(s) as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

fn nearest_tap(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let s = (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64);
    (libm::floor(s) as usize).min(src_len - 1)
}

/// Resample to `new_h x new_w` with the align-corners=false pixel-centre convention.
pub fn resample<T: Blend>(
    map: &Grid<T>,
    new_h: usize,
    new_w: usize,
    mode: ResampleMode,
) -> Grid<T> {
    let (h, w) = map.dims();
    if (h, w) == (new_h, new_w) {
        return map.clone();
    }
    match mode {
        ResampleMode::Nearest => resample_nearest(map, new_h, new_w),
        ResampleMode::Bilinear => {
            let rows: Vec<_> = (0..new_h).map(|i| bilinear_taps(i, h, new_h)).collect();
            let cols: Vec<_> = (0..new_w).map(|j| bilinear_taps(j, w, new_w)).collect();
            Grid::from_fn(new_h, new_w, |i, j| {
                let (i0, i1, fi) = rows[i];
                let (j0, j1, fj) = cols[j];
                let top = T::blend(*map.get(i0, j0), 1.0 - fj, *map.get(i0, j1), fj);
                let bot = T::blend(*map.get(i1, j0), 1.0 - fj, *map.get(i1, j1), fj);
                T::blend(top, 1.0 - fi, bot, fi)
            })
        }
    }
}

/// Nearest-neighbour resampling for any pixel type (masks included).
pub fn resample_nearest<T: Clone>(map: &Grid<T>, new_h: usize, new_w: usize) -> Grid<T> {
    let (h, w) = map.dims();
    if (h, w) == (new_h, new_w) {
        return map.clone();
    }
    Grid::from_fn(new_h, new_w, |i, j| {
        map.get(nearest_tap(i, h, new_h), nearest_tap(j, w, new_w))
            .clone()
    })
}

/// Resample a normal map and re-normalise each vector afterwards.
pub fn resample_normals(
    map: &NormalMap,
    new_h: usize,
    new_w: usize,
    mode: ResampleMode,
) -> NormalMap {
    let out = resample(map, new_h, new_w, mode);
    match mode {
        ResampleMode::Nearest => out,
        ResampleMode::Bilinear => out.renormalized(),
    }
}
