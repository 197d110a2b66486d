//! Coordinate-ascent driver, full-inclusion restarts and initialization.

use std::time::Instant;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};

use crate::elbo::{collapsed_elbo, compute_elbo, ElboBreakdown};
use crate::em::{run_em, EmConfig};
use crate::error::{Error, Result};
use crate::kalman::{build_collapsed_system, smooth};
use crate::types::{validate, ModelContext, ModelDims, Panel, PriorSpec, SmoothedMoments, Standardization, VariationalState};
use crate::vi_updates::{update_loadings, update_selectors, update_transition};

/// Relative decrease of the bound tolerated as round-off.
pub const DECREASE_TOL: f64 = 1e-6;

/// Starting point of the coordinate ascent.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitMethod {
    /// Regressions on principal-component factors.
    Pca,
    /// Regressions on factors smoothed under the EM estimate (itself started from PCA).
    #[default]
    PcaEm,
    /// A given state, used as is after validation.
    State(Box<VariationalState>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Convergence threshold on `|delta ELBO| / (|ELBO| + 1)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Restart from the end state with all selectors switched on.
    pub rerun: bool,
    /// Minimum absolute ELBO gain for another restart.
    pub rerun_criterion: f64,
    /// Cap on restarts.
    pub max_reruns: usize,
    pub init: InitMethod,
    /// Settings of the EM run used by [`InitMethod::PcaEm`].
    pub em: EmConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            rerun: true,
            rerun_criterion: 1e-6,
            max_reruns: 10,
            init: InitMethod::default(),
            em: EmConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub state: VariationalState,
    /// Bound at the end of every sweep of the reported run.
    pub elbo_trace: Vec<ElboBreakdown>,
    /// Sweeps of the reported run.
    pub sweeps: usize,
    pub converged: bool,
    /// Restarts performed (0 without restarting).
    pub reruns: usize,
    /// Wall time in seconds, restarts included.
    pub wall_time: f64,
    /// Factor moments of the last sweep.
    pub moments: SmoothedMoments,
}

impl FitReport {
    pub fn elbo(&self) -> f64 {
        self.elbo_trace.last().map_or(f64::NEG_INFINITY, |e| e.total)
    }

    /// Smoothed dynamic factors, T×r.
    pub fn factors(&self) -> DMatrix<f64> {
        self.moments.factor_means(self.state.transition_mean.nrows())
    }
}

/// Mean-imputed principal-component factors, T×r, scaled to unit sample second moment.
pub fn pca_factors(panel: &Panel, r: usize) -> Result<DMatrix<f64>> {
    let (n, t_len) = (panel.n(), panel.t());
    if n < r {
        return Err(Error::TooFewVariables { n, r });
    }
    if t_len < r {
        return Err(Error::Dimension(format!("T = {t_len} is smaller than r = {r}")));
    }
    let means: Vec<f64> = (0..n)
        .map(|i| {
            let c = panel.count(i);
            if c == 0 {
                0.0
            } else {
                panel.values().row(i).sum() / c as f64
            }
        })
        .collect();
    let x = DMatrix::from_fn(t_len, n, |t, i| {
        if panel.available(i, t) {
            panel.values()[(i, t)] - means[i]
        } else {
            0.0
        }
    });
    let svd = x.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::NotPositiveDefinite("principal components".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let scale = (t_len as f64).sqrt();
    let mut f = DMatrix::zeros(t_len, r);
    for (j, &c) in order.iter().take(r).enumerate() {
        // fix the sign so the largest-magnitude entry is positive
        let col = u.column(c);
        let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        f.set_column(j, &(col * (sign * scale)));
    }
    Ok(f)
}

/// State path `F_0..F_T` from dynamic factors (T×r); factors before period 1 are zero.
pub fn stack_lags(f: &DMatrix<f64>, p: usize) -> Vec<DVector<f64>> {
    let (t_len, r) = f.shape();
    (0..=t_len)
        .map(|t| {
            DVector::from_fn(r * (p + 1), |k, _| {
                let (lag, j) = (k / r, k % r);
                if t > lag {
                    f[(t - lag - 1, j)]
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// Initial selector probabilities: one wherever the prior allows inclusion.
pub fn full_inclusion(ctx: &ModelContext) -> DMatrix<f64> {
    ctx.prior.inclusion.map(|beta| if beta == 0.0 { 0.0 } else { 1.0 })
}

/// Conjugate regressions of the panel on a known factor path, selectors fully on.
pub fn state_from_factor_path(ctx: &ModelContext, path: &[DVector<f64>]) -> Result<VariationalState> {
    let m = SmoothedMoments::point_mass(path, &ctx.panel, ctx.dims.r());
    let mut state = VariationalState::at_prior(ctx, full_inclusion(ctx));
    update_transition(ctx, &m, &mut state)?;
    update_loadings(ctx, &m, &mut state)?;
    Ok(state)
}

/// Starting state for [`run_vi`].
pub fn initialize(ctx: &ModelContext, method: &InitMethod, em: &EmConfig) -> Result<VariationalState> {
    if let InitMethod::State(s) = method {
        s.check(ctx.dims)?;
        return Ok((**s).clone());
    }
    if ctx.dims.n() < ctx.dims.r() {
        return Err(Error::TooFewVariables {
            n: ctx.dims.n(),
            r: ctx.dims.r(),
        });
    }
    if ctx.panel.mask().total_count() == 0 {
        info!("panel has no observations, starting from the prior");
        return Ok(VariationalState::at_prior(ctx, ctx.prior.inclusion.clone()));
    }
    let path = match method {
        InitMethod::Pca => stack_lags(&pca_factors(&ctx.panel, ctx.dims.r())?, ctx.dims.p()),
        InitMethod::PcaEm => run_em(&ctx.panel, ctx.dims, em)?.moments.mean,
        InitMethod::State(_) => unreachable!(),
    };
    state_from_factor_path(ctx, &path)
}

/// Coordinate ascent from `init` until the relative bound change drops below `cfg.tol`.
pub fn run_vi(ctx: &ModelContext, cfg: &FitConfig, init: VariationalState) -> Result<FitReport> {
    cfg.check()?;
    init.check(ctx.dims)?;
    let start = Instant::now();
    let mut state = init;
    let mut trace = Vec::new();
    let mut previous = f64::NAN;
    let mut converged = false;
    let mut last_moments = None;
    for sweep in 1..=cfg.max_iter {
        let sys = build_collapsed_system(ctx, &state)?;
        let (moments, by) = smooth(&sys, &ctx.panel)?;
        if sweep == 1 {
            previous = collapsed_elbo(ctx, &state, &by, sys.init_cov_ln_det)?.total;
        }
        update_transition(ctx, &moments, &mut state)?;
        update_loadings(ctx, &moments, &mut state)?;
        update_selectors(ctx, &moments, &mut state);
        let elbo = compute_elbo(ctx, &state, &moments)?;
        let delta = elbo.total - previous;
        if delta / (previous.abs() + 1.0) < -DECREASE_TOL {
            return Err(Error::ElboDecrease {
                sweep,
                previous,
                current: elbo.total,
                state: Box::new(state),
            });
        }
        debug!("sweep {sweep}: elbo {:.10}", elbo.total);
        trace.push(elbo);
        last_moments = Some(moments);
        if delta.abs() / (elbo.total.abs() + 1.0) < cfg.tol {
            converged = true;
            break;
        }
        previous = elbo.total;
    }
    Ok(FitReport {
        state,
        sweeps: trace.len(),
        elbo_trace: trace,
        converged,
        reruns: 0,
        wall_time: start.elapsed().as_secs_f64(),
        moments: last_moments.expect("at least one sweep"),
    })
}

/// [`run_vi`] followed by restarts with all selectors switched back on, while
/// each restart improves the bound by more than `cfg.rerun_criterion`.
/// Returns the run with the highest bound.
pub fn run_with_reruns(ctx: &ModelContext, cfg: &FitConfig, init: VariationalState) -> Result<FitReport> {
    let start = Instant::now();
    let mut best = run_vi(ctx, cfg, init)?;
    let mut reruns = 0;
    if cfg.rerun {
        while reruns < cfg.max_reruns {
            let mut restart = best.state.clone();
            restart.inclusion = full_inclusion(ctx);
            let report = run_vi(ctx, cfg, restart)?;
            reruns += 1;
            let gain = report.elbo() - best.elbo();
            debug!("restart {reruns}: elbo gain {gain:e}");
            if gain > 0.0 {
                best = report;
            }
            if gain <= cfg.rerun_criterion {
                break;
            }
        }
    }
    best.reruns = reruns;
    best.wall_time = start.elapsed().as_secs_f64();
    Ok(best)
}

/// Standardized panel, validated context and initial state in one call.
pub fn prepare(raw: &Panel, dims: ModelDims, prior: PriorSpec) -> Result<(ModelContext, Standardization)> {
    let (panel, st) = raw.standardized()?;
    Ok((validate(dims, panel, prior)?, st))
}

/// Full pipeline on a raw panel: standardize, initialize, fit with restarts.
pub fn fit(raw: &Panel, dims: ModelDims, prior: PriorSpec, cfg: &FitConfig) -> Result<(FitReport, Standardization)> {
    let (ctx, st) = prepare(raw, dims, prior)?;
    let init = initialize(&ctx, &cfg.init, &cfg.em)?;
    Ok((run_with_reruns(&ctx, cfg, init)?, st))
}

/// Loadings in the units of the raw panel.
pub fn destandardize_loadings(loadings: &DMatrix<f64>, st: &Standardization) -> DMatrix<f64> {
    DMatrix::from_fn(loadings.nrows(), loadings.ncols(), |i, k| loadings[(i, k)] * st.sd[i])
}
