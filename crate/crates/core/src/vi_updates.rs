//! Closed-form coordinate updates of the parameter and selector blocks.
//!
//! Each update maximizes the bound over one block with the others held at
//! their current values. The loading and transition blocks are conjugate
//! regressions whose "data" are the smoothed factor moments.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky};
use crate::special::expit;
use crate::types::{selector_moment, ModelContext, SmoothedMoments, VariationalState};

/// Floor applied to residual scales.
pub const SCALE_FLOOR: f64 = 1e-12;
const SCALE_NEG_TOL: f64 = -1e-10;

/// Posterior of one normal / scaled-inverse-chi-square regression block.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub scale: f64,
}

/// Conjugate update with cross-moment matrix `xx`, cross vector `xy`,
/// response sum of squares `yy` and `count` observations.
#[allow(clippy::too_many_arguments)]
pub fn conjugate_regression(
    xx: &DMatrix<f64>,
    xy: &DVector<f64>,
    yy: f64,
    count: usize,
    v_inv: &DMatrix<f64>,
    nu: f64,
    tau2: f64,
    what: &'static str,
    index: usize,
) -> Result<RegressionPosterior> {
    let a = xx + v_inv;
    let chol = cholesky(&a, what)?;
    let mean = chol.solve(xy);
    let cov = linalg::symmetrized(chol.inverse());
    let resid = yy - mean.dot(xy);
    let num = nu * tau2 + resid;
    let mut scale = num / (nu + count as f64);
    if !scale.is_finite() {
        return Err(Error::NonFinite { stage: what, index });
    }
    if resid < SCALE_NEG_TOL * (1.0 + yy.abs()) && scale <= 0.0 {
        return Err(Error::NonPositiveScale { what, index, value: scale });
    }
    if scale < SCALE_FLOOR {
        warn!("{what} scale {index} is {scale:e}, clamped to {SCALE_FLOOR:e}");
        scale = SCALE_FLOOR;
    }
    Ok(RegressionPosterior { mean, cov, scale })
}

/// Updates `q(phi_j, sigma2_u_j)` for every factor.
pub fn update_transition(ctx: &ModelContext, m: &SmoothedMoments, state: &mut VariationalState) -> Result<()> {
    let t = m.transitions();
    let posts: Vec<Result<RegressionPosterior>> = (0..ctx.dims.r())
        .into_par_iter()
        .map(|j| {
            let prior = &ctx.prior.transition[j];
            conjugate_regression(
                &m.lagged_second_sum,
                &m.lead_lag_sum.row(j).transpose(),
                m.lead_second_sum[j],
                t,
                &ctx.cache.transition_v_inv[j],
                prior.nu,
                prior.tau2,
                "transition",
                j,
            )
        })
        .collect();
    for (j, post) in posts.into_iter().enumerate() {
        let post = post?;
        state.transition_mean.set_row(j, &post.mean.transpose());
        state.transition_cov[j] = post.cov;
        state.innov_scale[j] = post.scale;
    }
    Ok(())
}

/// Updates `q(lambda_i, sigma2_eps_i)` for every variable given the current selectors.
pub fn update_loadings(ctx: &ModelContext, m: &SmoothedMoments, state: &mut VariationalState) -> Result<()> {
    let posts: Vec<Result<RegressionPosterior>> = (0..ctx.dims.n())
        .into_par_iter()
        .map(|i| {
            let b = state.inclusion.row(i).transpose();
            let p = state.selector_moment(i);
            let xx = p.component_mul(&m.q[i]);
            let xy = b.component_mul(&m.g.row(i).transpose());
            let prior = &ctx.prior.loadings[i];
            conjugate_regression(
                &xx,
                &xy,
                ctx.panel.observed_sum_sq(i),
                ctx.panel.count(i),
                &ctx.cache.loading_v_inv[i],
                prior.nu,
                prior.tau2,
                "loadings",
                i,
            )
        })
        .collect();
    for (i, post) in posts.into_iter().enumerate() {
        let post = post?;
        state.loading_mean.set_row(i, &post.mean.transpose());
        state.loading_cov[i] = post.cov;
        state.eps_scale[i] = post.scale;
    }
    Ok(())
}

/// Evidence `gamma_{i,k}` for one selector given the other selectors `b`.
pub fn selector_gamma(
    mu: &DVector<f64>,
    g: &DVector<f64>,
    psi2: f64,
    r: &DMatrix<f64>,
    q: &DMatrix<f64>,
    b: &[f64],
    k: usize,
) -> f64 {
    let mut gamma = mu[k] * g[k] / psi2 - 0.5 * r[(k, k)] * q[(k, k)];
    for (mm, bm) in b.iter().enumerate() {
        if mm != k {
            gamma -= bm * r[(k, mm)] * q[(k, mm)];
        }
    }
    gamma
}

/// One ascending sweep over the selectors of variable `i`; returns the new row of `B`.
pub fn sweep_selectors(ctx: &ModelContext, m: &SmoothedMoments, state: &VariationalState, i: usize) -> Vec<f64> {
    let s = ctx.dims.s();
    let mut b: Vec<f64> = state.inclusion.row(i).iter().copied().collect();
    let mu = state.loading_mean.row(i).transpose();
    let g = m.g.row(i).transpose();
    let r = state.scaled_loading_moment(i);
    let q = &m.q[i];
    for k in 0..s {
        let beta = ctx.prior.inclusion[(i, k)];
        b[k] = if beta == 0.0 || beta == 1.0 {
            beta
        } else {
            let gamma = selector_gamma(&mu, &g, state.eps_scale[i], &r, q, &b, k);
            expit(gamma + ctx.cache.logit_beta[(i, k)])
        };
    }
    b
}

/// Updates `q(z_{i,k})` for all variables.
pub fn update_selectors(ctx: &ModelContext, m: &SmoothedMoments, state: &mut VariationalState) {
    let rows: Vec<Vec<f64>> = (0..ctx.dims.n())
        .into_par_iter()
        .map(|i| sweep_selectors(ctx, m, state, i))
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            state.inclusion[(i, k)] = v;
        }
    }
}

/// `P_i` for every variable, rebuilt from `B`.
pub fn selector_moments(state: &VariationalState) -> Vec<DMatrix<f64>> {
    (0..state.inclusion.nrows())
        .map(|i| selector_moment(state.inclusion.row(i).iter().copied()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_by_hand() {
        let one = |v: f64| DVector::from_element(1, v);
        let mat = |v: f64| DMatrix::from_element(1, 1, v);
        let gamma = selector_gamma(&one(1.0), &one(2.0), 1.0, &mat(1.5), &mat(2.0), &[0.9], 0);
        assert!((gamma - 0.5).abs() < 1e-15);
        let b = expit(gamma + crate::special::logit(0.5));
        assert!((b - 0.622_459_331_201_854_6).abs() < 1e-12);
    }

    #[test]
    fn gamma_uses_other_selectors() {
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        let g = DVector::from_vec(vec![0.5, 0.0]);
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 4.0, 4.0, 3.0]);
        let gamma = selector_gamma(&mu, &g, 2.0, &r, &q, &[0.3, 0.25], 0);
        // 0.25 - 1 - 0.25 * 0.5 * 4
        assert!((gamma - (-1.25)).abs() < 1e-15);
    }

    #[test]
    fn empty_regression_returns_prior() {
        let v_inv = DMatrix::from_diagonal_element(2, 2, 0.5);
        let post = conjugate_regression(
            &DMatrix::zeros(2, 2),
            &DVector::zeros(2),
            0.0,
            0,
            &v_inv,
            1.0,
            1.3,
            "t",
            0,
        )
        .unwrap();
        assert_eq!(post.mean, DVector::zeros(2));
        assert!((post.cov.clone() - DMatrix::from_diagonal_element(2, 2, 2.0)).abs().max() < 1e-15);
        assert!((post.scale - 1.3).abs() < 1e-15);
    }
}
