//! Deterministic projected gradient descent and a finite-difference oracle.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// How a raw gradient turns into a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    /// `x -= lr * g`.
    Plain,
    /// Bias-corrected Adam. With `beta1 = 0` this is a per-coordinate RMS
    /// preconditioner without momentum.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl StepRule {
    pub fn rms() -> Self {
        StepRule::Adam {
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub iters: usize,
    pub lr: f64,
    /// Per-parameter box, applied after every step.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub rule: StepRule,
    /// Which coordinates follow `rule`; the rest take plain steps. `None` means all.
    pub adaptive: Option<Vec<bool>>,
    /// Reject steps that increase the objective, halving the step up to
    /// `max_halvings` times before staying put for the iteration.
    pub monotone: bool,
    pub max_halvings: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            lr: 0.01,
            bounds: None,
            rule: StepRule::Plain,
            adaptive: None,
            monotone: false,
            max_halvings: 30,
        }
    }
}

impl OptimConfig {
    pub fn plain(iters: usize, lr: f64) -> Self {
        Self {
            iters,
            lr,
            ..Self::default()
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn validate(&self, n_params: usize) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::InvalidParameter("iters must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if let Some(b) = &self.bounds {
            if b.len() != n_params {
                return Err(Error::InvalidParameter(alloc::format!(
                    "{} bounds for {n_params} parameters",
                    b.len()
                )));
            }
            if b.iter()
                .any(|&(lo, hi)| lo.is_nan() || hi.is_nan() || lo > hi)
            {
                return Err(Error::InvalidParameter("bound with lo > hi".into()));
            }
        }
        if let Some(a) = &self.adaptive {
            if a.len() != n_params {
                return Err(Error::InvalidParameter(
                    "adaptive mask length mismatch".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveReport {
    /// Objective at the starting point.
    pub initial: f64,
    /// Objective after each iteration; `trace.len() == iters`.
    pub trace: Vec<f64>,
    pub params: Vec<f64>,
    /// Relative decrease below 1e-8 over the last ten iterations.
    pub converged: bool,
    /// Iterations where the monotone guard kept the previous iterate.
    pub rejected_steps: usize,
}

impl ObjectiveReport {
    pub fn final_value(&self) -> f64 {
        self.trace.last().copied().unwrap_or(self.initial)
    }
}

const CONVERGENCE_WINDOW: usize = 10;
const CONVERGENCE_TOL: f64 = 1e-8;

fn converged(initial: f64, trace: &[f64]) -> bool {
    if trace.len() < CONVERGENCE_WINDOW {
        return false;
    }
    let last = trace[trace.len() - 1];
    let start = if trace.len() == CONVERGENCE_WINDOW {
        initial
    } else {
        trace[trace.len() - 1 - CONVERGENCE_WINDOW]
    };
    (start - last) <= CONVERGENCE_TOL * math::abs(start).max(f64::MIN_POSITIVE)
}

fn project(x: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (v, &(lo, hi)) in x.iter_mut().zip(b) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Minimise `objective`, which writes the gradient into its second argument
/// and returns the value.
pub fn gradient_descent<F>(objective: F, init: &[f64], cfg: &OptimConfig) -> Result<ObjectiveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    gradient_descent_observed(objective, init, cfg, |_, _, _| {})
}

/// [`gradient_descent`] with a callback after every iteration, receiving the
/// iteration index (1-based), the current parameters and their objective.
pub fn gradient_descent_observed<F, O>(
    mut objective: F,
    init: &[f64],
    cfg: &OptimConfig,
    mut observer: O,
) -> Result<ObjectiveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    O: FnMut(usize, &[f64], f64),
{
    let n = init.len();
    cfg.validate(n)?;
    let bounds = cfg.bounds.as_deref();
    let mut x = init.to_vec();
    project(&mut x, bounds);
    let mut g = vec![0.0; n];
    let mut fx = objective(&x, &mut g);
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at init"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient at init"));
    }
    let initial = fx;
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut rejected = 0;

    for it in 1..=cfg.iters {
        for k in 0..n {
            let adaptive = cfg.adaptive.as_ref().is_none_or(|a| a[k]);
            step[k] = match cfg.rule {
                StepRule::Adam { beta1, beta2, eps } if adaptive => {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                    let t = it as f64;
                    let mh = m[k] / (1.0 - math::powf(beta1, t));
                    let vh = v[k] / (1.0 - math::powf(beta2, t));
                    mh / (math::sqrt(vh) + eps)
                }
                _ => g[k],
            };
        }

        let mut scale = cfg.lr;
        let mut accepted = false;
        let attempts = if cfg.monotone {
            cfg.max_halvings + 1
        } else {
            1
        };
        for _ in 0..attempts {
            for k in 0..n {
                trial[k] = x[k] - scale * step[k];
            }
            project(&mut trial, bounds);
            let ft = objective(&trial, &mut g_trial);
            let finite = ft.is_finite() && g_trial.iter().all(|v| v.is_finite());
            if !cfg.monotone {
                if !finite {
                    trace.push(ft);
                    return Err(Error::Aborted {
                        iteration: it,
                        what: if ft.is_finite() {
                            "gradient"
                        } else {
                            "objective"
                        },
                        trace,
                    });
                }
                accepted = true;
            } else if finite && ft <= fx {
                accepted = true;
            }
            if accepted {
                core::mem::swap(&mut x, &mut trial);
                core::mem::swap(&mut g, &mut g_trial);
                fx = ft;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            rejected += 1;
        }
        trace.push(fx);
        observer(it, &x, fx);
    }

    Ok(ObjectiveReport {
        initial,
        converged: converged(initial, &trace),
        trace,
        params: x,
        rejected_steps: rejected,
    })
}

/// Central differences, one coordinate at a time.
pub fn finite_diff<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + eps;
            let hi = f(&p);
            p[k] = x[k] - eps;
            let lo = f(&p);
            p[k] = x[k];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    math::abs(analytic - numeric) / math::abs(analytic).max(math::abs(numeric)).max(1e-6)
}

/// Largest [`relative_error`] between the analytic gradient of `objective`
/// and central differences.
pub fn grad_check<F>(mut objective: F, x: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    Error::check_range("eps", eps, 1e-6, 1e-3)?;
    let mut analytic = vec![0.0; x.len()];
    let f0 = objective(x, &mut analytic);
    if !f0.is_finite() || analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective"));
    }
    let mut scratch = vec![0.0; x.len()];
    let numeric = finite_diff(|p| objective(p, &mut scratch), x, eps);
    if numeric.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at perturbed point"));
    }
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
