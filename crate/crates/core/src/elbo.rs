//! Evidence lower bound.
//!
//! [`compute_elbo`] evaluates the bound term by term and is valid for any
//! combination of block parameters. [`collapsed_elbo`] uses the fact that,
//! right after the factor update, the factor terms reduce to the log
//! partition function of the smoother; the two must agree at that point.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::FilterByproducts;
use crate::linalg::{chol_ln_det, cholesky, quad_form, trace_product};
use crate::special::{digamma, ln_gamma, xlogx_over};
use crate::types::{ModelContext, RegressionPrior, SmoothedMoments, VariationalState};

/// The bound split by block. Each parameter group is the negative KL
/// divergence of that block from its prior.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// Expected complete-data log likelihood plus the entropy of `q(F)`.
    pub f_terms: f64,
    pub lambda_terms: f64,
    pub phi_terms: f64,
    pub sigma_eps_terms: f64,
    pub sigma_u_terms: f64,
    pub z_terms: f64,
    pub total: f64,
}

impl ElboBreakdown {
    fn from_groups(g: [f64; 6]) -> Self {
        Self {
            f_terms: g[0],
            lambda_terms: g[1],
            phi_terms: g[2],
            sigma_eps_terms: g[3],
            sigma_u_terms: g[4],
            z_terms: g[5],
            total: g.iter().sum(),
        }
    }

    fn check(self) -> Result<Self> {
        let groups = [
            self.f_terms,
            self.lambda_terms,
            self.phi_terms,
            self.sigma_eps_terms,
            self.sigma_u_terms,
            self.z_terms,
        ];
        match groups.iter().position(|v| !v.is_finite()) {
            None => Ok(self),
            Some(idx) => Err(Error::NonFinite { stage: "elbo group", index: idx }),
        }
    }
}

/// `E_q[ln sigma^2]` under a scaled inverse chi-square with `dof` and `scale`.
pub fn expected_ln_variance(dof: f64, scale: f64) -> f64 {
    (0.5 * dof * scale).ln() - digamma(0.5 * dof)
}

/// KL of `N(mu, sigma^2 Sigma)` from `N(0, sigma^2 V)`, averaged over `q(sigma^2)`.
pub fn kl_gaussian(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    scale: f64,
    v_inv: &DMatrix<f64>,
    v_ln_det: f64,
) -> Result<f64> {
    let s = mean.len() as f64;
    let cov_ln_det = chol_ln_det(&cholesky(cov, "posterior covariance")?);
    Ok(0.5 * (trace_product(v_inv, cov) + quad_form(v_inv, mean) / scale - s + v_ln_det - cov_ln_det))
}

/// KL between scaled inverse chi-square densities, posterior `(nu + count, psi2)` vs prior `(nu, tau2)`.
pub fn kl_scaled_inv_chi2(count: usize, psi2: f64, prior: &RegressionPrior) -> f64 {
    let (nu, tau2) = (prior.nu, prior.tau2);
    let post = nu + count as f64;
    0.5 * count as f64 * digamma(0.5 * post) - ln_gamma(0.5 * post)
        + ln_gamma(0.5 * nu)
        + 0.5 * nu * (post * psi2 / (nu * tau2)).ln()
        + nu * tau2 / (2.0 * psi2)
        - 0.5 * post
}

/// KL of `Bernoulli(b)` from `Bernoulli(beta)`.
pub fn kl_bernoulli(b: f64, beta: f64) -> f64 {
    xlogx_over(b, beta) + xlogx_over(1.0 - b, 1.0 - beta)
}

/// Parameter-block KL divergences: (lambda, phi, sigma_eps, sigma_u, z), each summed.
fn parameter_kls(ctx: &ModelContext, state: &VariationalState) -> Result<[f64; 5]> {
    let per_i: Vec<Result<(f64, f64, f64)>> = (0..ctx.dims.n())
        .into_par_iter()
        .map(|i| {
            let kl_l = kl_gaussian(
                &state.loading_mean.row(i).transpose(),
                &state.loading_cov[i],
                state.eps_scale[i],
                &ctx.cache.loading_v_inv[i],
                ctx.cache.loading_ln_det[i],
            )?;
            let kl_s = kl_scaled_inv_chi2(ctx.panel.count(i), state.eps_scale[i], &ctx.prior.loadings[i]);
            let kl_z: f64 = (0..ctx.dims.s())
                .map(|k| kl_bernoulli(state.inclusion[(i, k)], ctx.prior.inclusion[(i, k)]))
                .sum();
            Ok((kl_l, kl_s, kl_z))
        })
        .collect();
    let (mut kl_l, mut kl_se, mut kl_z) = (0.0, 0.0, 0.0);
    for r in per_i {
        let (a, b, c) = r?;
        kl_l += a;
        kl_se += b;
        kl_z += c;
    }
    let t = ctx.dims.t();
    let (mut kl_p, mut kl_su) = (0.0, 0.0);
    for j in 0..ctx.dims.r() {
        kl_p += kl_gaussian(
            &state.transition_mean.row(j).transpose(),
            &state.transition_cov[j],
            state.innov_scale[j],
            &ctx.cache.transition_v_inv[j],
            ctx.cache.transition_ln_det[j],
        )?;
        kl_su += kl_scaled_inv_chi2(t, state.innov_scale[j], &ctx.prior.transition[j]);
    }
    Ok([kl_l, kl_p, kl_se, kl_su, kl_z])
}

/// Expected log density of the observations given factors, parameters and selectors.
pub fn expected_data_log_lik(ctx: &ModelContext, state: &VariationalState, m: &SmoothedMoments) -> f64 {
    let ln2pi = (2.0 * PI).ln();
    let effective = state.effective_loadings();
    let per_i: Vec<f64> = (0..ctx.dims.n())
        .into_par_iter()
        .map(|i| {
            let ti = ctx.panel.count(i);
            if ti == 0 {
                return 0.0;
            }
            let psi2 = state.eps_scale[i];
            let nu_post = ctx.prior.loadings[i].nu + ti as f64;
            let e_ln = expected_ln_variance(nu_post, psi2);
            let eff = effective.row(i).transpose();
            let pr = state.selector_moment(i).component_mul(&state.scaled_loading_moment(i));
            let quad = ctx.panel.observed_sum_sq(i) / psi2 - 2.0 * eff.dot(&m.g.row(i).transpose()) / psi2
                + trace_product(&pr, &m.q[i]);
            -0.5 * ti as f64 * (ln2pi + e_ln) - 0.5 * quad
        })
        .collect();
    per_i.iter().sum()
}

/// Expected log prior density of the factor path.
pub fn expected_factor_log_prior(ctx: &ModelContext, state: &VariationalState, m: &SmoothedMoments) -> f64 {
    let ln2pi = (2.0 * PI).ln();
    let s = ctx.dims.s() as f64;
    let t = m.transitions() as f64;
    let mut acc = -0.5 * s * ln2pi - 0.5 * ctx.cache.v_f0_ln_det - 0.5 * trace_product(&ctx.cache.v_f0_inv, &m.second[0]);
    for j in 0..ctx.dims.r() {
        let psi2 = state.innov_scale[j];
        let nu_post = ctx.prior.transition[j].nu + t;
        let mu = state.transition_mean.row(j).transpose();
        let r_phi = &state.transition_cov[j] + &mu * mu.transpose() / psi2;
        let quad = m.lead_second_sum[j] / psi2 - 2.0 * mu.dot(&m.lead_lag_sum.row(j).transpose()) / psi2
            + trace_product(&r_phi, &m.lagged_second_sum);
        acc += -0.5 * t * (ln2pi + expected_ln_variance(nu_post, psi2)) - 0.5 * quad;
    }
    acc
}

/// The bound at arbitrary block parameters.
pub fn compute_elbo(ctx: &ModelContext, state: &VariationalState, m: &SmoothedMoments) -> Result<ElboBreakdown> {
    let f_terms = expected_data_log_lik(ctx, state, m) + expected_factor_log_prior(ctx, state, m) + m.entropy;
    let [kl_l, kl_p, kl_se, kl_su, kl_z] = parameter_kls(ctx, state)?;
    ElboBreakdown::from_groups([f_terms, -kl_l, -kl_p, -kl_se, -kl_su, -kl_z]).check()
}

/// The bound evaluated through the smoother's log partition function.
///
/// Equal to [`compute_elbo`] only when `q(F)` is the optimal factor density
/// for `state`, i.e. right after smoothing with the system built from `state`.
pub fn collapsed_elbo(
    ctx: &ModelContext,
    state: &VariationalState,
    byproducts: &FilterByproducts,
    init_cov_ln_det: f64,
) -> Result<ElboBreakdown> {
    let ln2pi = (2.0 * PI).ln();
    let t = ctx.dims.t() as f64;
    let mut f_terms = 0.5 * (init_cov_ln_det - ctx.cache.v_f0_ln_det) + byproducts.total_log_normalizer();
    for j in 0..ctx.dims.r() {
        let psi2 = state.innov_scale[j];
        let nu_post = ctx.prior.transition[j].nu + t;
        f_terms += 0.5 * t * (psi2.ln() - expected_ln_variance(nu_post, psi2));
    }
    for i in 0..ctx.dims.n() {
        let ti = ctx.panel.count(i);
        if ti > 0 {
            let nu_post = ctx.prior.loadings[i].nu + ti as f64;
            f_terms -= 0.5 * ti as f64 * (ln2pi + expected_ln_variance(nu_post, state.eps_scale[i]));
        }
    }
    let [kl_l, kl_p, kl_se, kl_su, kl_z] = parameter_kls(ctx, state)?;
    ElboBreakdown::from_groups([f_terms, -kl_l, -kl_p, -kl_se, -kl_su, -kl_z]).check()
}
