//! Forward image formation: depth to normals, normal refinement, Phong
//! shading with tone mapping, and the light/shininess parameterisations.
//!
//! Normals live in a camera frame with x pointing left, y pointing up and z
//! towards the viewer. Light directions point from the surface towards the
//! light. Every continuous operation has a matching `*_backward` (or
//! derivative) function used by the optimisers.

use alloc::vec::Vec;

use crate::math::{self, normalize_backward, Vec3};
use crate::raster::{Grid, Image, NormalMap, Rgb, ScalarMap};
use crate::{Error, Result};

/// Ambient and directional strength plus a unit direction with positive z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightParams {
    pub s_amb: f64,
    pub s_dir: f64,
    pub dir: Vec3,
}

impl LightParams {
    pub fn new(s_amb: f64, s_dir: f64, dir: Vec3) -> Result<Self> {
        Error::check_range("s_amb", s_amb, 0.0, 1.0)?;
        Error::check_range("s_dir", s_dir, 0.0, 1.0)?;
        if !dir.is_finite() || (dir.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(alloc::format!(
                "light direction {dir:?} is not a unit vector"
            )));
        }
        if dir.z <= 0.0 {
            return Err(Error::InvalidParameter(alloc::format!(
                "light direction {dir:?} must face the camera (z > 0)"
            )));
        }
        Ok(Self { s_amb, s_dir, dir })
    }

    /// Light from the free `(x, y)` direction components with `z` fixed to 1.
    pub fn from_xy(s_amb: f64, s_dir: f64, x: f64, y: f64) -> Result<Self> {
        Error::check_range("x", x, -1.0, 1.0)?;
        Error::check_range("y", y, -1.0, 1.0)?;
        Self::new(s_amb, s_dir, light_from_xy(x, y))
    }

    /// Inverse of [`light_from_xy`].
    pub fn xy(&self) -> (f64, f64) {
        (self.dir.x / self.dir.z, self.dir.y / self.dir.z)
    }

    /// `(s_amb, s_dir, l_x, l_y, l_z)`.
    pub fn as_vector(&self) -> [f64; 5] {
        [self.s_amb, self.s_dir, self.dir.x, self.dir.y, self.dir.z]
    }
}

/// Per-pixel albedo and the global Phong material.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialParams {
    pub albedo: Image,
    pub alpha: f64,
    pub a_spec: f64,
}

impl MaterialParams {
    pub fn new(albedo: Image, alpha: f64, a_spec: f64) -> Result<Self> {
        albedo.check_unit_range()?;
        if !(alpha.is_finite() && alpha >= 1.0) {
            return Err(Error::OutOfRange {
                field: "alpha",
                value: alpha,
                min: 1.0,
                max: f64::INFINITY,
            });
        }
        Error::check_range("a_spec", a_spec, 0.0, 1.0)?;
        Ok(Self {
            albedo,
            alpha,
            a_spec,
        })
    }
}

/// Rendering constants and model ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub gamma: f64,
    pub view_dir: Vec3,
    pub alpha_max: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub a_spec_min: f64,
    pub a_spec_max: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self::face()
    }
}

impl RenderConfig {
    /// Model ranges used for faces.
    pub fn face() -> Self {
        Self {
            gamma: 2.2,
            view_dir: Vec3::Z,
            alpha_max: 64.0,
            d_min: 0.9,
            d_max: 1.1,
            a_spec_min: 0.0,
            a_spec_max: 0.5,
        }
    }

    /// Model ranges used for general objects.
    pub fn object() -> Self {
        Self {
            a_spec_min: 0.1,
            ..Self::face()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if (self.view_dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "view direction must be unit".into(),
            ));
        }
        if !(self.d_min < self.d_max && self.a_spec_min <= self.a_spec_max && self.alpha_max >= 1.0)
        {
            return Err(Error::InvalidParameter("inconsistent model ranges".into()));
        }
        Ok(())
    }

    /// Largest shininess reachable through [`alpha_from_raw`].
    pub fn alpha_upper(&self) -> f64 {
        self.alpha_max * self.alpha_max
    }
}

/// Everything needed to re-render one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    /// Absent when the shape came from normals only.
    pub depth: Option<ScalarMap>,
    /// Final normals used for shading.
    pub normals: NormalMap,
    pub n_refine: NormalMap,
    pub material: MaterialParams,
    pub light: LightParams,
    /// Optional per-pixel multiplier on the specular term, in [0, 2].
    pub spec_refine: Option<ScalarMap>,
}

impl Decomposition {
    pub fn dims(&self) -> (usize, usize) {
        self.normals.dims()
    }

    pub fn validate(&self, cfg: &RenderConfig) -> Result<()> {
        let dims = self.dims();
        let check = |d: (usize, usize)| {
            if d == dims {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    expected: dims,
                    got: d,
                })
            }
        };
        check(self.material.albedo.dims())?;
        check(self.n_refine.dims())?;
        Error::check_range("alpha", self.material.alpha, 1.0, cfg.alpha_upper())?;
        if let Some(d) = &self.depth {
            check(d.dims())?;
            if d.as_slice().iter().any(|z| !z.is_finite()) {
                return Err(Error::NonFinite("depth"));
            }
        }
        if let Some(s) = &self.spec_refine {
            check(s.dims())?;
            for &v in s.as_slice() {
                Error::check_range("spec_refine", v, 0.0, 2.0)?;
            }
        }
        for n in self.normals.as_slice() {
            if !n.is_finite() || (n.norm() - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidParameter(
                    "normals must be unit length".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Spacing between neighbouring pixels in scene units.
#[inline]
fn pixel_spacing(h: usize, w: usize) -> f64 {
    1.0 / h.max(w) as f64
}

/// One-sided at the borders, central inside; returns `(lo, hi, scale)` such
/// that the difference is `scale * (v[hi] - v[lo])`.
#[inline]
fn diff_taps(k: usize, n: usize) -> (usize, usize, f64) {
    if k == 0 {
        (0, 1, 1.0)
    } else if k == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (k - 1, k + 1, 0.5)
    }
}

/// Unnormalised tangent-plane normal `(-dD/dcol, -dD/drow, spacing)` at `(i, j)`.
fn depth_normal_raw(depth: &ScalarMap, i: usize, j: usize, spacing: f64) -> Vec3 {
    let (h, w) = depth.dims();
    let (c0, c1, cs) = diff_taps(j, w);
    let (r0, r1, rs) = diff_taps(i, h);
    let dcol = cs * (depth.get(i, c1) - depth.get(i, c0));
    let drow = rs * (depth.get(r1, j) - depth.get(r0, j));
    Vec3::new(-dcol, -drow, spacing)
}

/// Normals of the tangent planes through each pixel's 4-neighbourhood.
///
/// Depth is orthographic on a pixel grid of spacing `1 / max(H, W)`. With x
/// pointing left, a surface receding to the right (depth increasing with the
/// column index) gets a normal with negative x.
pub fn normals_from_depth(depth: &ScalarMap) -> Result<NormalMap> {
    let (h, w) = depth.dims();
    if h < 2 || w < 2 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min_height: 2,
            min_width: 2,
        });
    }
    if depth.as_slice().iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("depth"));
    }
    let s = pixel_spacing(h, w);
    Ok(Grid::from_fn(h, w, |i, j| {
        depth_normal_raw(depth, i, j, s)
            .normalized()
            .unwrap_or(Vec3::Z)
    }))
}

/// Backward pass of [`normals_from_depth`].
pub fn normals_from_depth_backward(
    depth: &ScalarMap,
    grad_normals: &NormalMap,
) -> Result<ScalarMap> {
    depth.ensure_same_dims(grad_normals)?;
    let (h, w) = depth.dims();
    let s = pixel_spacing(h, w);
    let mut out = Grid::filled(h, w, 0.0);
    for i in 0..h {
        for j in 0..w {
            let u = depth_normal_raw(depth, i, j, s);
            let gu = normalize_backward(u, *grad_normals.get(i, j));
            // u.x = -cs (D[i,c1] - D[i,c0]), u.y = -rs (D[r1,j] - D[r0,j])
            let (c0, c1, cs) = diff_taps(j, w);
            let (r0, r1, rs) = diff_taps(i, h);
            *out.get_mut(i, c1) -= cs * gu.x;
            *out.get_mut(i, c0) += cs * gu.x;
            *out.get_mut(r1, j) -= rs * gu.y;
            *out.get_mut(r0, j) += rs * gu.y;
        }
    }
    Ok(out)
}

/// Result of [`combine_normals`].
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedNormals {
    pub normals: NormalMap,
    /// Flat indices of pixels whose two inputs cancelled out.
    pub degenerate: Vec<usize>,
}

/// `N = (N_D + N_ref) / |N_D + N_ref|` per pixel.
pub fn combine_normals(n_d: &NormalMap, n_ref: &NormalMap) -> Result<CombinedNormals> {
    n_d.ensure_same_dims(n_ref)?;
    let mut degenerate = Vec::new();
    let data = n_d
        .as_slice()
        .iter()
        .zip(n_ref.as_slice())
        .enumerate()
        .map(|(k, (&a, &b))| {
            let s = a + b;
            if s.norm() <= 1e-12 {
                degenerate.push(k);
                Vec3::Z
            } else {
                s.normalized().unwrap_or(Vec3::Z)
            }
        })
        .collect();
    Ok(CombinedNormals {
        normals: Grid::new(n_d.height(), n_d.width(), data)?,
        degenerate,
    })
}

/// Backward pass of [`combine_normals`]; the same gradient flows to both inputs.
pub fn combine_normals_backward(
    n_d: &NormalMap,
    n_ref: &NormalMap,
    grad: &NormalMap,
) -> Result<NormalMap> {
    n_d.ensure_same_dims(n_ref)?;
    n_d.ensure_same_dims(grad)?;
    let data = (0..n_d.len())
        .map(|k| normalize_backward(n_d.as_slice()[k] + n_ref.as_slice()[k], grad.as_slice()[k]))
        .collect();
    Grid::new(n_d.height(), n_d.width(), data)
}

/// `(x, y, 1) / |(x, y, 1)|`.
pub fn light_from_xy(x: f64, y: f64) -> Vec3 {
    let inv = 1.0 / math::sqrt(x * x + y * y + 1.0);
    Vec3::new(x * inv, y * inv, inv)
}

/// Columns `d l / d x` and `d l / d y` of the Jacobian of [`light_from_xy`].
pub fn light_from_xy_jacobian(x: f64, y: f64) -> (Vec3, Vec3) {
    let r2 = x * x + y * y + 1.0;
    let inv = 1.0 / math::sqrt(r2);
    let inv3 = inv / r2;
    let dx = Vec3::new(inv - x * x * inv3, -x * y * inv3, -x * inv3);
    let dy = Vec3::new(-x * y * inv3, inv - y * y * inv3, -y * inv3);
    (dx, dy)
}

/// Shininess from a raw value in [-1, 1]: `((t + 1) / 2 * (alpha_max - 1) + 1)^2`.
pub fn alpha_from_raw(t: f64, alpha_max: f64) -> f64 {
    let b = (t + 1.0) * 0.5 * (alpha_max - 1.0) + 1.0;
    b * b
}

pub fn alpha_from_raw_derivative(t: f64, alpha_max: f64) -> f64 {
    let b = (t + 1.0) * 0.5 * (alpha_max - 1.0) + 1.0;
    b * (alpha_max - 1.0)
}

/// Inverse of [`alpha_from_raw`] on `[1, alpha_max^2]`.
pub fn raw_from_alpha(alpha: f64, alpha_max: f64) -> f64 {
    (math::sqrt(alpha) - 1.0) / (alpha_max - 1.0) * 2.0 - 1.0
}

/// `max(0, n . l)` per pixel.
pub fn shade_diffuse(n: &NormalMap, l: Vec3) -> ScalarMap {
    n.map(|&v| v.dot(l).max(0.0))
}

/// Mirror reflection of `l` about `n`: `2 (n . l) n - l`.
#[inline]
pub fn reflect(n: Vec3, l: Vec3) -> Vec3 {
    n * (2.0 * n.dot(l)) - l
}

/// `max(0, r . v)^alpha` per pixel; the caller applies `a_spec`.
pub fn shade_specular(n: &NormalMap, l: Vec3, v: Vec3, alpha: f64) -> ScalarMap {
    n.map(|&nv| specular_value(reflect(nv, l).dot(v), alpha))
}

#[inline]
fn specular_value(rv: f64, alpha: f64) -> f64 {
    if rv > 0.0 {
        math::powf(rv, alpha)
    } else {
        0.0
    }
}

/// `x^(1/gamma)`, clamped to [0, 1]. Negative input is an error.
pub fn tone_map(x: f64, gamma: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("tone map input"));
    }
    if x < 0.0 {
        return Err(Error::OutOfRange {
            field: "tone map input",
            value: x,
            min: 0.0,
            max: f64::INFINITY,
        });
    }
    Ok(tone_map_unchecked(x, gamma))
}

#[inline]
fn tone_map_unchecked(x: f64, gamma: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        math::powf(x, 1.0 / gamma).min(1.0)
    }
}

/// Derivative of [`tone_map`]; zero where the output is clamped or the input is 0.
pub fn tone_map_derivative(x: f64, gamma: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        math::powf(x, 1.0 / gamma - 1.0) / gamma
    }
}

/// Tone map every channel of a radiance map.
pub fn tone_map_image(radiance: &Grid<Rgb>, gamma: f64) -> Result<Image> {
    let mut out = Vec::with_capacity(radiance.len());
    for px in radiance.as_slice() {
        out.push([
            tone_map(px[0], gamma)?,
            tone_map(px[1], gamma)?,
            tone_map(px[2], gamma)?,
        ]);
    }
    Grid::new(radiance.height(), radiance.width(), out)
}

/// Output of [`render`].
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Image,
    /// `s_amb + s_dir max(0, n . l)`, not tone mapped.
    pub diffuse: ScalarMap,
    /// `s_dir a_spec max(0, r . v)^alpha` times the optional refinement map, not tone mapped.
    pub specular: ScalarMap,
}

/// Combine albedo with shading maps: `tau(A * diffuse + specular)` clamped to [0, 1].
pub fn compose(
    albedo: &Image,
    diffuse: &ScalarMap,
    specular: &ScalarMap,
    gamma: f64,
) -> Result<Image> {
    albedo.ensure_same_dims(diffuse)?;
    albedo.ensure_same_dims(specular)?;
    let data = (0..albedo.len())
        .map(|k| {
            let a = albedo.as_slice()[k];
            let d = diffuse.as_slice()[k];
            let s = specular.as_slice()[k];
            [
                tone_map_unchecked((a[0] * d + s).max(0.0), gamma),
                tone_map_unchecked((a[1] * d + s).max(0.0), gamma),
                tone_map_unchecked((a[2] * d + s).max(0.0), gamma),
            ]
        })
        .collect();
    Grid::new(albedo.height(), albedo.width(), data)
}

fn shading_maps(
    normals: &NormalMap,
    light: &LightParams,
    alpha: f64,
    a_spec: f64,
    spec_refine: Option<&ScalarMap>,
    cfg: &RenderConfig,
) -> (ScalarMap, ScalarMap) {
    let diffuse = normals.map(|n| light.s_amb + light.s_dir * n.dot(light.dir).max(0.0));
    let mut specular = normals.map(|&n| {
        light.s_dir * a_spec * specular_value(reflect(n, light.dir).dot(cfg.view_dir), alpha)
    });
    if let Some(refine) = spec_refine {
        for (s, r) in specular.as_mut_slice().iter_mut().zip(refine.as_slice()) {
            *s *= r;
        }
    }
    (diffuse, specular)
}

/// Render a decomposition under `light`.
pub fn render(dec: &Decomposition, light: &LightParams, cfg: &RenderConfig) -> Result<Rendered> {
    cfg.validate()?;
    dec.validate(cfg)?;
    let (diffuse, specular) = shading_maps(
        &dec.normals,
        light,
        dec.material.alpha,
        dec.material.a_spec,
        dec.spec_refine.as_ref(),
        cfg,
    );
    let image = compose(&dec.material.albedo, &diffuse, &specular, cfg.gamma)?;
    Ok(Rendered {
        image,
        diffuse,
        specular,
    })
}

/// Render with the light replaced; the material is left untouched.
pub fn relight(dec: &Decomposition, new_light: &LightParams, cfg: &RenderConfig) -> Result<Image> {
    render(dec, new_light, cfg).map(|r| r.image)
}

/// Inputs of the differentiable renderer, borrowed from wherever they live.
#[derive(Clone, Copy, Debug)]
pub struct ShadingInputs<'a> {
    pub normals: &'a NormalMap,
    pub albedo: &'a Image,
    pub light: &'a LightParams,
    pub alpha: f64,
    pub a_spec: f64,
    pub spec_refine: Option<&'a ScalarMap>,
}

/// Tone-mapped image for [`ShadingInputs`], without range validation.
///
/// Used by optimisers whose iterates may briefly leave the model ranges.
pub fn render_unchecked(inp: &ShadingInputs<'_>, cfg: &RenderConfig) -> Result<Image> {
    let (d, s) = shading_maps(
        inp.normals,
        inp.light,
        inp.alpha,
        inp.a_spec,
        inp.spec_refine,
        cfg,
    );
    compose(inp.albedo, &d, &s, cfg.gamma)
}

/// Gradients of a scalar loss with respect to the renderer inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad {
    pub albedo: Vec<Rgb>,
    pub normals: Vec<Vec3>,
    pub s_amb: f64,
    pub s_dir: f64,
    pub dir: Vec3,
    pub alpha: f64,
    pub a_spec: f64,
}

/// Backward pass of the renderer given `dL/dimage`.
///
/// Clamped branches (`n . l <= 0`, `r . v <= 0`, saturated output) contribute
/// zero gradient.
pub fn render_backward(
    inp: &ShadingInputs<'_>,
    cfg: &RenderConfig,
    grad_image: &[Rgb],
) -> Result<RenderGrad> {
    let n_px = inp.normals.len();
    inp.normals.ensure_same_dims(inp.albedo)?;
    if grad_image.len() != n_px {
        return Err(Error::ShapeMismatch {
            expected: inp.normals.dims(),
            got: (grad_image.len(), 1),
        });
    }
    let l = inp.light.dir;
    let v = cfg.view_dir;
    let (s_amb, s_dir) = (inp.light.s_amb, inp.light.s_dir);
    let alpha = inp.alpha;
    let mut g = RenderGrad {
        albedo: alloc::vec![[0.0; 3]; n_px],
        normals: alloc::vec![Vec3::ZERO; n_px],
        s_amb: 0.0,
        s_dir: 0.0,
        dir: Vec3::ZERO,
        alpha: 0.0,
        a_spec: 0.0,
    };
    for k in 0..n_px {
        let n = inp.normals.as_slice()[k];
        let a = inp.albedo.as_slice()[k];
        let sref = inp.spec_refine.map_or(1.0, |m| m.as_slice()[k]);
        let ndl = n.dot(l);
        let diff = ndl.max(0.0);
        let nv = n.dot(v);
        let rv = 2.0 * ndl * nv - l.dot(v);
        let spec = specular_value(rv, alpha);
        let idiff = s_amb + s_dir * diff;
        let ispec = s_dir * inp.a_spec * spec * sref;

        let mut g_idiff = 0.0;
        let mut g_ispec = 0.0;
        for c in 0..3 {
            let x = a[c] * idiff + ispec;
            let gx = grad_image[k][c] * tone_map_derivative(x, cfg.gamma);
            g.albedo[k][c] = gx * idiff;
            g_idiff += gx * a[c];
            g_ispec += gx;
        }
        g.s_amb += g_idiff;
        g.s_dir += g_idiff * diff + g_ispec * inp.a_spec * spec * sref;
        g.a_spec += g_ispec * s_dir * spec * sref;
        let g_spec = g_ispec * s_dir * inp.a_spec * sref;

        let mut g_ndl = 0.0;
        let mut g_n = Vec3::ZERO;
        if rv > 0.0 {
            g.alpha += g_spec * spec * math::ln(rv);
            let g_rv = g_spec * alpha * math::powf(rv, alpha - 1.0);
            g_ndl += g_rv * 2.0 * nv;
            g_n += v * (g_rv * 2.0 * ndl);
            g.dir -= v * g_rv;
        }
        if ndl > 0.0 {
            g_ndl += g_idiff * s_dir;
        }
        g_n += l * g_ndl;
        g.dir += n * g_ndl;
        g.normals[k] = g_n;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff;
    use std::vec;

    fn flat(h: usize, w: usize) -> NormalMap {
        Grid::filled(h, w, Vec3::Z)
    }

    fn const_image(h: usize, w: usize, a: f64) -> Image {
        Grid::filled(h, w, [a; 3])
    }

    fn flat_decomposition(
        h: usize,
        w: usize,
        a: f64,
        a_spec: f64,
        light: LightParams,
    ) -> Decomposition {
        Decomposition {
            depth: None,
            normals: flat(h, w),
            n_refine: flat(h, w),
            material: MaterialParams::new(const_image(h, w, a), 16.0, a_spec).unwrap(),
            light,
            spec_refine: None,
        }
    }

    #[test]
    fn constant_depth_gives_frontal_normals() {
        let n = normals_from_depth(&Grid::filled(4, 5, 1.0)).unwrap();
        assert!(n.as_slice().iter().all(|&v| v == Vec3::Z));
    }

    #[test]
    fn depth_ramp_normal_matches_plane() {
        // depth = 1 + s * (column spacing), slope s in scene units
        let (h, w) = (6, 8);
        let s = 0.3;
        let spacing = 1.0 / 8.0;
        let d = Grid::from_fn(h, w, |_, j| 1.0 + s * j as f64 * spacing);
        let n = normals_from_depth(&d).unwrap();
        let expected = Vec3::new(-s, 0.0, 1.0).normalized().unwrap();
        for v in n.as_slice() {
            assert!((*v - expected).norm() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn mirrored_depth_mirrors_normals() {
        let d = Grid::from_fn(5, 6, |i, j| {
            1.0 + 0.01 * ((i * i) as f64 + 0.5 * (j * j * j) as f64 / 10.0)
        });
        let m = Grid::from_fn(5, 6, |i, j| *d.get(i, 5 - j));
        let n = normals_from_depth(&d).unwrap();
        let nm = normals_from_depth(&m).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let a = *n.get(i, j);
                let b = *nm.get(i, 5 - j);
                assert!(
                    (a.x + b.x).abs() < 1e-12
                        && (a.y - b.y).abs() < 1e-12
                        && (a.z - b.z).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn combine_examples() {
        let a = Grid::filled(1, 1, Vec3::Z);
        let b = Grid::filled(1, 1, Vec3::new(1.0, 0.0, 0.0));
        let out = combine_normals(&a, &b).unwrap();
        let e = core::f64::consts::FRAC_1_SQRT_2;
        assert!((*out.normals.get(0, 0) - Vec3::new(e, 0.0, e)).norm() < 1e-15);
        assert_eq!(combine_normals(&b, &a).unwrap(), out);
        assert_eq!(combine_normals(&a, &a).unwrap().normals, a);
        let anti = Grid::filled(1, 1, -Vec3::Z);
        let out = combine_normals(&a, &anti).unwrap();
        assert_eq!(out.degenerate, vec![0]);
        assert_eq!(*out.normals.get(0, 0), Vec3::Z);
    }

    #[test]
    fn light_and_alpha_examples() {
        assert_eq!(light_from_xy(0.0, 0.0), Vec3::Z);
        let e = core::f64::consts::FRAC_1_SQRT_2;
        assert!((light_from_xy(1.0, 0.0) - Vec3::new(e, 0.0, e)).norm() < 1e-15);
        assert!(light_from_xy(1.0, -1.0).z >= 1.0 / 3f64.sqrt() - 1e-15);
        assert_eq!(alpha_from_raw(-1.0, 64.0), 1.0);
        assert_eq!(alpha_from_raw(1.0, 64.0), 4096.0);
        assert_eq!(alpha_from_raw(0.0, 64.0), 1056.25);
        assert!((raw_from_alpha(alpha_from_raw(0.37, 64.0), 64.0) - 0.37).abs() < 1e-12);
    }

    #[test]
    fn shading_examples() {
        let n = flat(1, 1);
        assert_eq!(*shade_diffuse(&n, Vec3::Z).get(0, 0), 1.0);
        assert_eq!(*shade_diffuse(&n, Vec3::new(1.0, 0.0, 0.0)).get(0, 0), 0.0);
        let l = Vec3::new(0.0, 0.866_025_403_784_438_6, -0.5);
        assert_eq!(*shade_diffuse(&n, l).get(0, 0), 0.0);

        assert_eq!(*shade_specular(&n, Vec3::Z, Vec3::Z, 37.0).get(0, 0), 1.0);
        let l = light_from_xy(1.0, 0.0);
        let r = reflect(Vec3::Z, l);
        let e = core::f64::consts::FRAC_1_SQRT_2;
        assert!((r - Vec3::new(-e, 0.0, e)).norm() < 1e-15);
        let s = *shade_specular(&n, l, Vec3::Z, 5.0).get(0, 0);
        assert!((s - e.powf(5.0)).abs() < 1e-14);
        // grazing: r points away from the viewer
        let l = Vec3::new(0.0, 0.6, 0.8);
        let tilted = Grid::filled(1, 1, Vec3::new(0.0, -0.8, 0.6));
        assert_eq!(*shade_specular(&tilted, l, Vec3::Z, 2.0).get(0, 0), 0.0);
    }

    #[test]
    fn tone_map_examples() {
        assert_eq!(tone_map(0.0, 2.2).unwrap(), 0.0);
        assert_eq!(tone_map(1.0, 2.2).unwrap(), 1.0);
        assert!((tone_map(0.5, 2.2).unwrap() - 0.72974).abs() < 1e-4);
        assert!(tone_map(-0.1, 2.2).is_err());
        assert!(tone_map(0.3, 2.2).unwrap() < tone_map(0.31, 2.2).unwrap());
    }

    #[test]
    fn render_closed_forms() {
        let cfg = RenderConfig::default();
        let frontal = LightParams::new(0.3, 0.5, Vec3::Z).unwrap();

        let black = flat_decomposition(3, 3, 0.0, 0.0, frontal);
        let out = render(&black, &frontal, &cfg).unwrap();
        assert!(out.image.as_slice().iter().all(|p| *p == [0.0; 3]));

        let amb = LightParams::new(0.4, 0.0, Vec3::Z).unwrap();
        let dec = flat_decomposition(3, 3, 0.6, 0.2, amb);
        let out = render(&dec, &amb, &cfg).unwrap();
        let expected = tone_map(0.4 * 0.6, 2.2).unwrap();
        assert!(out
            .image
            .as_slice()
            .iter()
            .all(|p| p.iter().all(|&c| (c - expected).abs() < 1e-15)));

        let dec = flat_decomposition(3, 3, 0.4, 0.25, frontal);
        let out = render(&dec, &frontal, &cfg).unwrap();
        let expected = tone_map(0.3 * 0.4 + 0.5 * (0.4 + 0.25), 2.2).unwrap();
        for p in out.image.as_slice() {
            for &c in p {
                assert!((c - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn recomposition_is_bit_exact() {
        let cfg = RenderConfig::default();
        let light = LightParams::from_xy(0.2, 0.7, 0.3, -0.2).unwrap();
        let normals = Grid::from_fn(5, 5, |i, j| {
            Vec3::new(0.2 * (j as f64 - 2.0), 0.15 * (i as f64 - 2.0), 1.0)
                .normalized()
                .unwrap()
        });
        let dec = Decomposition {
            depth: None,
            n_refine: flat(5, 5),
            material: MaterialParams::new(
                Grid::from_fn(5, 5, |i, j| [0.1 * i as f64, 0.5, 0.1 * j as f64]),
                20.0,
                0.3,
            )
            .unwrap(),
            normals,
            light,
            spec_refine: Some(Grid::from_fn(5, 5, |i, _| 0.5 + 0.2 * i as f64)),
        };
        let out = render(&dec, &light, &cfg).unwrap();
        let again = compose(&dec.material.albedo, &out.diffuse, &out.specular, cfg.gamma).unwrap();
        assert_eq!(again, out.image);
        assert_eq!(relight(&dec, &light, &cfg).unwrap(), out.image);
    }

    #[test]
    fn render_rejects_shape_mismatch() {
        let light = LightParams::new(0.3, 0.5, Vec3::Z).unwrap();
        let mut dec = flat_decomposition(3, 3, 0.5, 0.1, light);
        dec.material.albedo = const_image(3, 4, 0.5);
        assert!(matches!(
            render(&dec, &light, &RenderConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tone_map_gradient_matches_finite_difference() {
        let fd = finite_diff(|x: &[f64]| tone_map(x[0], 2.2).unwrap(), &[0.5], 1e-5);
        let a = tone_map_derivative(0.5, 2.2);
        assert!((fd[0] - a).abs() / a < 1e-5);
    }

    #[test]
    fn light_jacobian_matches_finite_difference() {
        let (x, y) = (0.37, -0.61);
        let (dx, dy) = light_from_xy_jacobian(x, y);
        for (c, f) in [|v: Vec3| v.x, |v: Vec3| v.y, |v: Vec3| v.z]
            .iter()
            .enumerate()
        {
            let g = finite_diff(|p: &[f64]| f(light_from_xy(p[0], p[1])), &[x, y], 1e-6);
            assert!((g[0] - dx.to_array()[c]).abs() < 1e-9);
            assert!((g[1] - dy.to_array()[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_backward_matches_finite_difference() {
        let (h, w) = (4, 5);
        let d0: Vec<f64> = (0..h * w)
            .map(|k| 1.0 + 0.02 * libm::sin(k as f64 * 1.3))
            .collect();
        let weights: Vec<Vec3> = (0..h * w)
            .map(|k| Vec3::new(libm::cos(k as f64), libm::sin(2.0 * k as f64), 0.3))
            .collect();
        let loss = |d: &[f64]| {
            let n = normals_from_depth(&Grid::new(h, w, d.to_vec()).unwrap()).unwrap();
            n.as_slice()
                .iter()
                .zip(&weights)
                .map(|(a, b)| a.dot(*b))
                .sum::<f64>()
        };
        let fd = finite_diff(loss, &d0, 1e-7);
        let gn = Grid::new(h, w, weights.clone()).unwrap();
        let g = normals_from_depth_backward(&Grid::new(h, w, d0.clone()).unwrap(), &gn).unwrap();
        for k in 0..h * w {
            let a = g.as_slice()[k];
            assert!(
                (a - fd[k]).abs() <= 1e-5 * a.abs().max(1.0),
                "{k}: {a} vs {}",
                fd[k]
            );
        }
    }
}
