//! Direct per-image optimisation of a decomposition against the coarse loss
//! plus the reconstruction loss.
//!
//! Free variables are the albedo map, an unconstrained refinement vector per
//! pixel (normalised before it is combined with the depth normals),
//! optionally the depth map, and six globals: `s_amb`, `s_dir`, the light
//! `(x, y)`, the raw shininess `t` and `a_spec`. Box constraints are applied
//! by projection after each step.
//!
//! Per-pixel variables take plain steps on the pixel-averaged objective; the
//! globals take Adam steps. Momentum matters here: globals already at their
//! optimum would otherwise jitter by a full step and, through the shared
//! backtracking scale, stall the ones still moving. A monotone guard rejects increasing steps,
//! so the trace never goes up. L1 terms are Charbonnier-smoothed so that the
//! guard is not defeated by kinks at zero residual.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::coarse::CoarseEstimate;
use crate::formation::{
    alpha_from_raw, alpha_from_raw_derivative, light_from_xy, light_from_xy_jacobian,
    normals_from_depth, normals_from_depth_backward, relight, render_backward, render_unchecked,
    Decomposition, LightParams, MaterialParams, RenderConfig, ShadingInputs,
};
use crate::losses::{
    coarse_loss_with_grad, reconstruction_loss_with_grad, CoarsePrediction, CoarseTargets,
    LossWeights,
};
use crate::math::{normalize_backward, Vec3};
use crate::optim::{gradient_descent_observed, ObjectiveReport, OptimConfig, StepRule};
use crate::raster::{Grid, Image, NormalMap, ScalarMap};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub render: RenderConfig,
    /// Free the depth map; otherwise it is held at the coarse depth.
    pub optimize_depth: bool,
    /// Charbonnier scale for the L1 terms.
    pub l1_smoothing: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 0.01,
            weights: LossWeights::default(),
            render: RenderConfig::default(),
            optimize_depth: false,
            l1_smoothing: 1e-3,
        }
    }
}

/// One row of the fit trace. Losses are the smoothed values being minimised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitTraceRow {
    pub iteration: usize,
    pub total: f64,
    pub coarse: f64,
    /// Unweighted reconstruction loss.
    pub rec: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// `iters + 1` rows, starting with the initialisation.
    pub rows: Vec<FitTraceRow>,
    pub objective: ObjectiveReport,
}

const N_GLOBALS: usize = 6;

/// Parameter vector layout.
struct Layout {
    n_px: usize,
    depth: bool,
}

impl Layout {
    fn albedo(&self) -> core::ops::Range<usize> {
        0..3 * self.n_px
    }
    fn refine(&self) -> core::ops::Range<usize> {
        3 * self.n_px..6 * self.n_px
    }
    fn depth(&self) -> core::ops::Range<usize> {
        let s = 6 * self.n_px;
        s..s + if self.depth { self.n_px } else { 0 }
    }
    fn globals(&self) -> usize {
        self.depth().end
    }
    fn len(&self) -> usize {
        self.globals() + N_GLOBALS
    }
}

struct Problem<'a> {
    image: &'a Image,
    coarse: &'a CoarseEstimate,
    cfg: FitConfig,
    weights: LossWeights,
    layout: Layout,
    dims: (usize, usize),
    /// Base normals when the depth is fixed.
    fixed_base: NormalMap,
    /// `(total bits, coarse, rec)` of recent evaluations.
    recent: RefCell<Vec<(u64, f64, f64)>>,
}

struct State {
    depth: Option<ScalarMap>,
    base: NormalMap,
    refine_unit: NormalMap,
    normals: NormalMap,
    albedo: Image,
    light: LightParams,
    alpha: f64,
    a_spec: f64,
}

fn to_rgb(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn to_vec3(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect()
}

impl Problem<'_> {
    fn state(&self, x: &[f64]) -> State {
        let (h, w) = self.dims;
        let l = &self.layout;
        let depth = if l.depth {
            Some(Grid::new(h, w, x[l.depth()].to_vec()).expect("layout"))
        } else {
            self.coarse.depth.clone()
        };
        let base = match (&depth, l.depth) {
            (Some(d), true) => normals_from_depth(d).expect("depth validated at init"),
            _ => self.fixed_base.clone(),
        };
        let refine = to_vec3(&x[l.refine()]);
        let refine_unit: Vec<Vec3> = refine
            .iter()
            .map(|r| r.normalized().unwrap_or(Vec3::Z))
            .collect();
        let normals = base
            .as_slice()
            .iter()
            .zip(&refine_unit)
            .map(|(&a, &b)| (a + b).normalized().unwrap_or(Vec3::Z))
            .collect();
        let g = l.globals();
        State {
            depth,
            base,
            refine_unit: Grid::new(h, w, refine_unit).expect("layout"),
            normals: Grid::new(h, w, normals).expect("layout"),
            albedo: Grid::new(h, w, to_rgb(&x[l.albedo()])).expect("layout"),
            light: LightParams {
                s_amb: x[g],
                s_dir: x[g + 1],
                dir: light_from_xy(x[g + 2], x[g + 3]),
            },
            alpha: alpha_from_raw(x[g + 4], self.cfg.render.alpha_max),
            a_spec: x[g + 5],
        }
    }

    /// `(total, coarse, rec)` with the gradient written into `grad`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> Result<(f64, f64, f64)> {
        let l = &self.layout;
        let s = self.state(x);
        let kappa = self.cfg.l1_smoothing;
        let coarse_depth = if l.depth {
            self.coarse.depth.as_ref()
        } else {
            None
        };
        let pred = CoarsePrediction {
            depth: if l.depth { s.depth.as_ref() } else { None },
            normals: &s.normals,
            albedo: &s.albedo,
            light: &s.light,
        };
        let targets = CoarseTargets {
            depth: coarse_depth,
            ..CoarseTargets::of(self.coarse)
        };
        let cg = coarse_loss_with_grad(&pred, &targets, &self.weights, kappa)?;

        let inputs = ShadingInputs {
            normals: &s.normals,
            albedo: &s.albedo,
            light: &s.light,
            alpha: s.alpha,
            a_spec: s.a_spec,
            spec_refine: None,
        };
        let lam = self.weights.lambda_rec;
        let (rec, rg) = if lam > 0.0 {
            let i_hat = render_unchecked(&inputs, &self.cfg.render)?;
            let (rec, g_img) = reconstruction_loss_with_grad(self.image, &i_hat, kappa)?;
            let g_img: Vec<[f64; 3]> = g_img
                .iter()
                .map(|p| [lam * p[0], lam * p[1], lam * p[2]])
                .collect();
            (
                rec,
                Some(render_backward(&inputs, &self.cfg.render, &g_img)?),
            )
        } else {
            (0.0, None)
        };

        grad.iter_mut().for_each(|v| *v = 0.0);
        let n_px = l.n_px;
        let mut g_depth_normals = vec![Vec3::ZERO; if l.depth { n_px } else { 0 }];
        for q in 0..n_px {
            let mut ga = cg.albedo[q];
            let mut gn = cg.normals[q];
            if let Some(rg) = &rg {
                for c in 0..3 {
                    ga[c] += rg.albedo[q][c];
                }
                gn += rg.normals[q];
            }
            grad[3 * q..3 * q + 3].copy_from_slice(&ga);
            let base = s.base.as_slice()[q];
            let ru = s.refine_unit.as_slice()[q];
            let g_sum = normalize_backward(base + ru, gn);
            let r = Vec3::new(
                x[3 * n_px + 3 * q],
                x[3 * n_px + 3 * q + 1],
                x[3 * n_px + 3 * q + 2],
            );
            let g_r = normalize_backward(r, g_sum);
            grad[3 * n_px + 3 * q..3 * n_px + 3 * q + 3].copy_from_slice(&g_r.to_array());
            if l.depth {
                g_depth_normals[q] = g_sum;
            }
        }
        if l.depth {
            let d = s.depth.as_ref().expect("depth present");
            let gd = normals_from_depth_backward(
                d,
                &Grid::new(self.dims.0, self.dims.1, g_depth_normals)?,
            )?;
            let off = l.depth().start;
            for q in 0..n_px {
                grad[off + q] = gd.as_slice()[q] + cg.depth.get(q).copied().unwrap_or(0.0);
            }
        }

        let g = l.globals();
        let (mut g_sa, mut g_sd, mut g_dir) = (
            cg.light[0],
            cg.light[1],
            Vec3::new(cg.light[2], cg.light[3], cg.light[4]),
        );
        let (mut g_alpha, mut g_aspec) = (0.0, 0.0);
        if let Some(rg) = &rg {
            g_sa += rg.s_amb;
            g_sd += rg.s_dir;
            g_dir += rg.dir;
            g_alpha = rg.alpha;
            g_aspec = rg.a_spec;
        }
        let (jx, jy) = light_from_xy_jacobian(x[g + 2], x[g + 3]);
        grad[g] = g_sa;
        grad[g + 1] = g_sd;
        grad[g + 2] = g_dir.dot(jx);
        grad[g + 3] = g_dir.dot(jy);
        grad[g + 4] = g_alpha * alpha_from_raw_derivative(x[g + 4], self.cfg.render.alpha_max);
        grad[g + 5] = g_aspec;

        Ok((cg.value + lam * rec, cg.value, rec))
    }

    fn objective(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self.eval(x, grad) {
            Ok((total, coarse, rec)) => {
                let mut recent = self.recent.borrow_mut();
                recent.push((total.to_bits(), coarse, rec));
                total
            }
            Err(_) => f64::NAN,
        }
    }

    fn decomposition(&self, x: &[f64]) -> Result<Decomposition> {
        let s = self.state(x);
        Ok(Decomposition {
            depth: s.depth,
            normals: s.normals,
            n_refine: s.refine_unit,
            material: MaterialParams::new(s.albedo, s.alpha, s.a_spec)?,
            light: LightParams::new(s.light.s_amb, s.light.s_dir, s.light.dir)?,
            spec_refine: None,
        })
    }
}

fn validate_inputs(image: &Image, coarse: &CoarseEstimate, cfg: &FitConfig) -> Result<()> {
    cfg.render.validate()?;
    cfg.weights.validate()?;
    image.check_unit_range()?;
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidParameter(alloc::format!(
            "lr must be positive, got {}",
            cfg.lr
        )));
    }
    if !(cfg.l1_smoothing.is_finite() && cfg.l1_smoothing >= 0.0) {
        return Err(Error::InvalidParameter("l1_smoothing must be >= 0".into()));
    }
    if coarse.dims() != image.dims() {
        return Err(Error::ShapeMismatch {
            expected: image.dims(),
            got: coarse.dims(),
        });
    }
    if cfg.optimize_depth && coarse.depth.is_none() {
        return Err(Error::MissingComponent("coarse depth"));
    }
    Ok(())
}

/// Fit a decomposition of `image`, starting from and regularised towards
/// `coarse`. Coarse maps at another resolution are resampled to the image.
pub fn fit_decomposition(
    image: &Image,
    coarse: &CoarseEstimate,
    cfg: &FitConfig,
) -> Result<(Decomposition, FitReport)> {
    let (h, w) = image.dims();
    let coarse = coarse.resampled(h, w);
    validate_inputs(image, &coarse, cfg)?;
    let n_px = h * w;
    let layout = Layout {
        n_px,
        depth: cfg.optimize_depth,
    };
    let fixed_base = match &coarse.depth {
        Some(d) => normals_from_depth(d)?,
        None => coarse.normals.clone(),
    };
    let weights = LossWeights {
        lambda_d: if cfg.optimize_depth {
            cfg.weights.lambda_d
        } else {
            0.0
        },
        ..cfg.weights
    };
    let rc = cfg.render;

    let mut init = Vec::with_capacity(layout.len());
    init.extend(coarse.albedo.as_slice().iter().flatten());
    for _ in 0..n_px {
        init.extend([0.0, 0.0, 1.0]);
    }
    let mut bounds = vec![(0.0, 1.0); 3 * n_px];
    bounds.extend(core::iter::repeat_n(
        (f64::NEG_INFINITY, f64::INFINITY),
        3 * n_px,
    ));
    if let Some(d) = coarse.depth.as_ref().filter(|_| cfg.optimize_depth) {
        init.extend(d.as_slice().iter().map(|v| v.clamp(rc.d_min, rc.d_max)));
        bounds.extend(core::iter::repeat_n((rc.d_min, rc.d_max), n_px));
    }
    let (lx, ly) = coarse.light.xy();
    init.extend([
        coarse.light.s_amb,
        coarse.light.s_dir,
        lx.clamp(-1.0, 1.0),
        ly.clamp(-1.0, 1.0),
        0.0,
        0.5 * (rc.a_spec_min + rc.a_spec_max),
    ]);
    bounds.extend([
        (0.0, 1.0),
        (0.0, 1.0),
        (-1.0, 1.0),
        (-1.0, 1.0),
        (-1.0, 1.0),
        (rc.a_spec_min, rc.a_spec_max),
    ]);
    let mut adaptive = vec![false; layout.globals()];
    adaptive.extend([true; N_GLOBALS]);

    let problem = Problem {
        image,
        coarse: &coarse,
        cfg: *cfg,
        weights,
        layout,
        dims: (h, w),
        fixed_base,
        recent: RefCell::new(Vec::new()),
    };

    let mut g0 = vec![0.0; init.len()];
    let (t0, c0, r0) = problem.eval(&init, &mut g0)?;
    let mut rows = vec![FitTraceRow {
        iteration: 0,
        total: t0,
        coarse: c0,
        rec: r0,
    }];
    if cfg.iters == 0 {
        let dec = problem.decomposition(&init)?;
        let objective = ObjectiveReport {
            initial: t0,
            trace: Vec::new(),
            params: init,
            converged: false,
            rejected_steps: 0,
        };
        return Ok((dec, FitReport { rows, objective }));
    }

    let opt = OptimConfig {
        iters: cfg.iters,
        lr: cfg.lr,
        bounds: Some(bounds),
        rule: StepRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        adaptive: Some(adaptive),
        monotone: true,
        max_halvings: 30,
    };
    let mut current = (c0, r0);
    let report = gradient_descent_observed(
        |x, g| problem.objective(x, g),
        &init,
        &opt,
        |it, _, fx| {
            let mut recent = problem.recent.borrow_mut();
            if let Some(&(_, c, r)) = recent.iter().rev().find(|e| e.0 == fx.to_bits()) {
                current = (c, r);
            }
            recent.clear();
            rows.push(FitTraceRow {
                iteration: it,
                total: fx,
                coarse: current.0,
                rec: current.1,
            });
        },
    )?;
    let dec = problem.decomposition(&report.params)?;
    Ok((
        dec,
        FitReport {
            rows,
            objective: report,
        },
    ))
}

/// Re-render a fitted decomposition under a new light.
pub fn relight_after_fit(
    dec: &Decomposition,
    new_light: &LightParams,
    cfg: &RenderConfig,
) -> Result<Image> {
    relight(dec, new_light, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::render;
    use crate::losses::reconstruction_loss;
    use crate::optim::{finite_diff, relative_error};

    fn layout_depth_start(n_px: usize) -> usize {
        6 * n_px
    }
    use crate::raster::Mask;

    fn bump_scene(
        n: usize,
        light: LightParams,
        t: f64,
        a_spec: f64,
    ) -> (Image, Decomposition, CoarseEstimate) {
        let depth = Grid::from_fn(n, n, |i, j| {
            let x = (j as f64 + 0.5) / n as f64 - 0.5;
            let y = (i as f64 + 0.5) / n as f64 - 0.5;
            1.1 - 0.2 * libm::exp(-(x * x + y * y) / (2.0 * 0.15 * 0.15))
        });
        let albedo = Grid::from_fn(n, n, |i, j| {
            let x = (j as f64 + 0.5) / n as f64 - 0.5;
            let y = (i as f64 + 0.5) / n as f64 - 0.5;
            [
                0.6 + 0.2 * libm::sin(6.0 * x),
                0.5 + 0.2 * libm::cos(5.0 * y),
                0.4 + 0.1 * libm::sin(4.0 * (x + y)),
            ]
        });
        let base = normals_from_depth(&depth).unwrap();
        let normals = base.map(|b| (*b + Vec3::Z).normalized().unwrap());
        let cfg = RenderConfig::default();
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

    #[test]
    fn zero_iterations_returns_initialisation() {
        let light = LightParams::from_xy(0.3, 0.6, 0.25, 0.15).unwrap();
        let (img, _, coarse) = bump_scene(16, light, -0.8, 0.3);
        let cfg = FitConfig {
            iters: 0,
            ..FitConfig::default()
        };
        let (dec, rep) = fit_decomposition(&img, &coarse, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(dec.material.albedo, coarse.albedo);
        assert_eq!(dec.light.s_amb, 0.3);
        assert_eq!(dec.material.alpha, alpha_from_raw(0.0, 64.0));
        assert_eq!(dec.material.a_spec, 0.25);
        assert!(dec.n_refine.as_slice().iter().all(|&r| r == Vec3::Z));
    }

    #[test]
    fn objective_gradient_matches_finite_difference() {
        let light = LightParams::from_xy(0.3, 0.6, 0.25, 0.15).unwrap();
        let (img, _, coarse) = bump_scene(12, light, -0.8, 0.3);
        for optimize_depth in [false, true] {
            let cfg = FitConfig {
                optimize_depth,
                iters: 0,
                ..FitConfig::default()
            };
            let n_px = 144;
            let layout = Layout {
                n_px,
                depth: optimize_depth,
            };
            let problem = Problem {
                image: &img,
                coarse: &coarse,
                cfg,
                weights: LossWeights {
                    lambda_d: if optimize_depth { 0.5 } else { 0.0 },
                    ..LossWeights::default()
                },
                layout,
                dims: (12, 12),
                fixed_base: normals_from_depth(coarse.depth.as_ref().unwrap()).unwrap(),
                recent: RefCell::new(Vec::new()),
            };
            let mut x = Vec::new();
            // offsets well outside the Charbonnier core keep the check away from its kink
            x.extend(
                coarse
                    .albedo
                    .as_slice()
                    .iter()
                    .flatten()
                    .enumerate()
                    .map(|(k, v)| v + if k % 2 == 0 { 0.02 } else { -0.02 }),
            );
            for q in 0..n_px {
                x.extend([0.05 * libm::sin(q as f64), 0.04 * libm::cos(q as f64), 1.0]);
            }
            if optimize_depth {
                x.extend(
                    coarse
                        .depth
                        .as_ref()
                        .unwrap()
                        .as_slice()
                        .iter()
                        .enumerate()
                        .map(|(q, d)| d + 0.004 + 0.002 * libm::sin(q as f64 * 0.3)),
                );
            }
            x.extend([0.35, 0.55, 0.2, 0.1, -0.5, 0.2]);
            let mut analytic = vec![0.0; x.len()];
            problem.objective(&x, &mut analytic);
            // depth enters through 1/spacing derivatives, so it needs a finer step
            let blocks = [
                (0..layout_depth_start(n_px), 1e-4),
                (layout_depth_start(n_px)..x.len() - 6, 1e-6),
                (x.len() - 6..x.len(), 1e-4),
            ];
            for (range, eps) in blocks {
                let mut p = x.clone();
                let numeric = finite_diff(
                    |sub| {
                        p[range.clone()].copy_from_slice(sub);
                        problem.objective(&p, &mut vec![0.0; p.len()])
                    },
                    &x[range.clone()],
                    eps,
                );
                for (k, n) in range.clone().zip(numeric) {
                    let err = relative_error(analytic[k], n);
                    assert!(
                        err < 1e-4,
                        "optimize_depth={optimize_depth} coord {k}: {} vs {n}",
                        analytic[k]
                    );
                }
            }
        }
    }

    #[test]
    fn fit_recovers_synthetic_scene() {
        let light = LightParams::from_xy(0.3, 0.6, 0.25, 0.15).unwrap();
        let (img, _, coarse) = bump_scene(32, light, -0.8, 0.3);
        let (dec, rep) = fit_decomposition(&img, &coarse, &FitConfig::default()).unwrap();
        assert_eq!(rep.rows.len(), 501);
        for pair in rep.rows.windows(2) {
            assert!(pair[1].total <= pair[0].total);
        }
        let out = render(&dec, &dec.light, &RenderConfig::default())
            .unwrap()
            .image;
        let rec = reconstruction_loss(&img, &out).unwrap();
        assert!(rec < 1e-3, "{rec}");
        assert!(dec.light.dir.angle_degrees(light.dir) < 3.0);
        assert_eq!(
            relight_after_fit(&dec, &dec.light, &RenderConfig::default()).unwrap(),
            out
        );
    }

    #[test]
    fn without_reconstruction_albedo_stays_coarse() {
        let light = LightParams::from_xy(0.3, 0.6, 0.25, 0.15).unwrap();
        let (img, truth, coarse) = bump_scene(12, light, -0.8, 0.3);
        let cfg = FitConfig {
            iters: 50,
            weights: LossWeights {
                lambda_rec: 0.0,
                ..LossWeights::default()
            },
            ..FitConfig::default()
        };
        let (dec, _) = fit_decomposition(&img, &coarse, &cfg).unwrap();
        assert_eq!(dec.material.albedo, coarse.albedo);
        for (a, b) in dec.normals.as_slice().iter().zip(truth.normals.as_slice()) {
            assert!((*a - *b).norm() < 1e-9);
        }
    }
}
