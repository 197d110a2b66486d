//! Maximum-likelihood baseline fitted by expectation maximization.
//!
//! The E-step runs the same information-form smoother as the variational
//! fit, but on point parameters. Missing cells simply drop out of each
//! period's potential. Factor innovations are fixed to unit variance and the
//! initial state covariance is fixed, which pins down the factor scale.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{pca_factors, stack_lags};
use crate::kalman::{smooth, StateSpaceSystem};
use crate::linalg::{cholesky, diag_matrix};
use crate::types::{ModelDims, Panel, SmoothedMoments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Stop when the relative log-likelihood change falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Lower bound on idiosyncratic variances.
    pub idio_floor: f64,
    /// Diagonal of the fixed initial state covariance.
    pub init_var: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            idio_floor: 1e-8,
            init_var: 2.0,
        }
    }
}

/// Point parameters of the DFM.
#[derive(Debug, Clone, PartialEq)]
pub struct EmParams {
    /// n×s.
    pub loadings: DMatrix<f64>,
    /// Idiosyncratic variances.
    pub idio: DVector<f64>,
    /// r×s.
    pub transition: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct EmReport {
    pub params: EmParams,
    /// Log-likelihood evaluated at the parameters entering each E-step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Smoothed moments under the final parameters.
    pub moments: SmoothedMoments,
}

/// Least-squares parameters from factor moments.
fn m_step(panel: &Panel, m: &SmoothedMoments, prev_idio: Option<&DVector<f64>>, cfg: &EmConfig, ridge: f64) -> Result<EmParams> {
    let (n, s) = (panel.n(), m.lagged_second_sum.nrows());
    let r = m.lead_lag_sum.nrows();
    let rows: Vec<Result<(DVector<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ti = panel.count(i);
            if ti == 0 {
                return Ok((DVector::zeros(s), prev_idio.map_or(1.0, |v| v[i])));
            }
            let q = &m.q[i] + diag_matrix(s, ridge);
            let chol = cholesky(&q, "loading normal equations")
                .map_err(|_| Error::NotPositiveDefinite(format!("loading normal equations for variable {i}")))?;
            let g = m.g.row(i).transpose();
            let lambda = chol.solve(&g);
            let resid = (panel.observed_sum_sq(i) - lambda.dot(&g)) / ti as f64;
            Ok((lambda, resid.max(cfg.idio_floor)))
        })
        .collect();
    let mut loadings = DMatrix::zeros(n, s);
    let mut idio = DVector::zeros(n);
    for (i, row) in rows.into_iter().enumerate() {
        let (l, v) = row?;
        loadings.set_row(i, &l.transpose());
        idio[i] = v;
    }
    let sff = &m.lagged_second_sum + diag_matrix(s, ridge);
    let chol = cholesky(&sff, "transition normal equations")?;
    let mut transition = DMatrix::zeros(r, s);
    for j in 0..r {
        let phi = chol.solve(&m.lead_lag_sum.row(j).transpose());
        transition.set_row(j, &phi.transpose());
    }
    Ok(EmParams {
        loadings,
        idio,
        transition,
    })
}

/// Regressions on principal-component factors (missing cells mean-imputed).
pub fn initial_params(panel: &Panel, dims: ModelDims, cfg: &EmConfig) -> Result<EmParams> {
    let f = pca_factors(panel, dims.r())?;
    let path = stack_lags(&f, dims.p());
    let m = SmoothedMoments::point_mass(&path, panel, dims.r());
    m_step(panel, &m, None, cfg, 1e-8)
}

/// Builds the point-parameter system used in the E-step.
pub fn em_system(panel: &Panel, params: &EmParams, cfg: &EmConfig) -> Result<StateSpaceSystem> {
    let (r, s) = params.transition.shape();
    StateSpaceSystem::point_dfm(
        panel,
        &params.loadings,
        &params.idio,
        params.transition.clone(),
        DVector::from_element(r, 1.0),
        diag_matrix(s, cfg.init_var),
    )
}

/// Log-likelihood of the panel under `params`, with the matching smoothed moments.
pub fn log_likelihood(panel: &Panel, params: &EmParams, cfg: &EmConfig) -> Result<(f64, SmoothedMoments)> {
    let sys = em_system(panel, params, cfg)?;
    let (m, by) = smooth(&sys, panel)?;
    let ln2pi = (2.0 * PI).ln();
    let mut ll = by.total_log_normalizer();
    for i in 0..panel.n() {
        let ti = panel.count(i) as f64;
        ll -= 0.5 * ti * (ln2pi + params.idio[i].ln());
    }
    Ok((ll, m))
}

pub fn run_em(panel: &Panel, dims: ModelDims, cfg: &EmConfig) -> Result<EmReport> {
    run_em_from(panel, dims, cfg, initial_params(panel, dims, cfg)?)
}

/// EM iterations from given starting parameters.
pub fn run_em_from(panel: &Panel, dims: ModelDims, cfg: &EmConfig, mut params: EmParams) -> Result<EmReport> {
    if dims.n() != panel.n() || dims.t() != panel.t() {
        return Err(Error::Dimension("panel does not match dimensions".into()));
    }
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let (mut ll, mut moments) = log_likelihood(panel, &params, cfg)?;
    trace.push(ll);
    while iterations < cfg.max_iter {
        iterations += 1;
        let next = m_step(panel, &moments, Some(&params.idio), cfg, 0.0)?;
        let (next_ll, next_m) = log_likelihood(panel, &next, cfg)?;
        let change = (next_ll - ll).abs() / ll.abs().max(1.0);
        params = next;
        moments = next_m;
        ll = next_ll;
        trace.push(ll);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmReport {
        params,
        loglik_trace: trace,
        iterations,
        converged,
        moments,
    })
}
