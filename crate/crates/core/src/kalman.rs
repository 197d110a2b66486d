//! Smoothing of the factor path under the current variational parameters.
//!
//! The variational density of the factors is Gaussian and Markov. Each period
//! contributes a quadratic potential `-c_t/2 + h_t'F_t - F_t'J_t F_t/2` built
//! from the loading blocks (data precision plus the parameter-uncertainty
//! pseudo-precision), and the transition uses the mean companion matrix. The
//! filter works directly with `(J_t, h_t)`, i.e. in information form, so a
//! period without observations (or a singular `J_t`) needs no special case.
//! The equivalent collapsed observation `(y*_t, H*_t) = (J_t^-1 h_t, J_t^-1)`
//! is available through [`StateSpaceSystem::collapsed_observation`].

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, spd_inverse, symmetrize, trace_product};
use crate::types::{finish_sums, ModelContext, Panel, SmoothedMoments, VariationalState};

/// Linear-Gaussian system in information form.
#[derive(Debug, Clone)]
pub struct StateSpaceSystem {
    r: usize,
    /// `M_Phi`, r×s.
    pub transition_mean: DMatrix<f64>,
    /// Companion matrix, s×s.
    pub transition: DMatrix<f64>,
    /// Innovation variances of the first r state entries.
    pub innov_var: DVector<f64>,
    /// Covariance of `F_0`.
    pub init_cov: DMatrix<f64>,
    pub init_precision: DMatrix<f64>,
    pub init_cov_ln_det: f64,
    /// `J_t`, t = 1..=T (stored at `t - 1`).
    pub precision: Vec<DMatrix<f64>>,
    /// `h_t`.
    pub info: Vec<DVector<f64>>,
    /// `c_t`.
    pub data_sq: Vec<f64>,
    /// Pseudo-observation precision of each period (zero for point-parameter systems).
    pub pseudo_precision: Vec<DMatrix<f64>>,
}

/// Companion form of an r×s transition block.
pub fn companion(transition_mean: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, s) = transition_mean.shape();
    let mut m = DMatrix::zeros(s, s);
    m.rows_mut(0, r).copy_from(transition_mean);
    for k in r..s {
        m[(k, k - r)] = 1.0;
    }
    m
}

impl StateSpaceSystem {
    /// System with explicit per-period potentials.
    pub fn from_potentials(
        transition_mean: DMatrix<f64>,
        innov_var: DVector<f64>,
        init_cov: DMatrix<f64>,
        precision: Vec<DMatrix<f64>>,
        info: Vec<DVector<f64>>,
        data_sq: Vec<f64>,
    ) -> Result<Self> {
        let (r, s) = transition_mean.shape();
        if innov_var.len() != r || init_cov.shape() != (s, s) {
            return Err(Error::Dimension("state-space system blocks disagree".into()));
        }
        if precision.len() != info.len() || info.len() != data_sq.len() {
            return Err(Error::Dimension("potential sequences differ in length".into()));
        }
        let (init_precision, ln_det) = spd_inverse(&init_cov, "initial state covariance")?;
        let t_len = precision.len();
        Ok(Self {
            r,
            transition: companion(&transition_mean),
            transition_mean,
            innov_var,
            init_cov,
            init_precision,
            init_cov_ln_det: ln_det,
            precision,
            info,
            data_sq,
            pseudo_precision: vec![DMatrix::zeros(s, s); t_len],
        })
    }

    /// Point-parameter DFM: loadings `lambda` (n×s), idiosyncratic variances
    /// `idio`, transition block, innovation variances and `F_0` covariance.
    pub fn point_dfm(
        panel: &Panel,
        lambda: &DMatrix<f64>,
        idio: &DVector<f64>,
        transition_mean: DMatrix<f64>,
        innov_var: DVector<f64>,
        init_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let s = lambda.ncols();
        let outer: Vec<DMatrix<f64>> = (0..panel.n())
            .map(|i| {
                let l = lambda.row(i).transpose();
                &l * l.transpose() / idio[i]
            })
            .collect();
        let zero = DMatrix::zeros(s, s);
        let pieces: Vec<_> = (0..panel.t())
            .into_par_iter()
            .map(|t| potential_at(panel, t, lambda, idio, &outer, &zero))
            .collect();
        let (precision, info, data_sq) = unzip3(pieces);
        Self::from_potentials(transition_mean, innov_var, init_cov, precision, info, data_sq)
    }

    pub fn s(&self) -> usize {
        self.transition.nrows()
    }
    pub fn r(&self) -> usize {
        self.r
    }
    pub fn t(&self) -> usize {
        self.precision.len()
    }

    /// Collapsed observation `(y*_t, H*_t)` for period `t` (1-based).
    ///
    /// When `J_t` is numerically singular a ridge of 1e-10 is added first.
    pub fn collapsed_observation(&self, t: usize) -> (DVector<f64>, DMatrix<f64>) {
        let j = &self.precision[t - 1];
        let (h_star, _) = match spd_inverse(j, "collapsed precision") {
            Ok(v) => v,
            Err(_) => {
                warn!("collapsed precision at t={t} is singular, adding ridge 1e-10");
                let ridged = j + linalg::diag_matrix(j.nrows(), 1e-10);
                spd_inverse(&ridged, "collapsed precision").expect("ridged PSD matrix is PD")
            }
        };
        (&h_star * &self.info[t - 1], h_star)
    }
}

/// Potential of one period for a point-parameter observation equation plus `extra` precision.
fn potential_at(
    panel: &Panel,
    t: usize,
    loadings: &DMatrix<f64>,
    scale: &DVector<f64>,
    blocks: &[DMatrix<f64>],
    extra: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let s = loadings.ncols();
    let mut j = extra.clone();
    let mut h = DVector::zeros(s);
    let mut c = 0.0;
    for i in 0..panel.n() {
        if panel.available(i, t) {
            let y = panel.values()[(i, t)];
            j += &blocks[i];
            for k in 0..s {
                h[k] += y * loadings[(i, k)] / scale[i];
            }
            c += y * y / scale[i];
        }
    }
    (j, h, c)
}

type Potentials = (Vec<DMatrix<f64>>, Vec<DVector<f64>>, Vec<f64>);

fn unzip3(v: Vec<(DMatrix<f64>, DVector<f64>, f64)>) -> Potentials {
    let mut a = Vec::with_capacity(v.len());
    let mut b = Vec::with_capacity(v.len());
    let mut c = Vec::with_capacity(v.len());
    for (x, y, z) in v {
        a.push(x);
        b.push(y);
        c.push(z);
    }
    (a, b, c)
}

/// `W`, n×s: selector variance times squared loading mean, over the residual scale.
pub fn selection_weights(state: &VariationalState) -> DMatrix<f64> {
    let b = &state.inclusion;
    let m = &state.loading_mean;
    DMatrix::from_fn(b.nrows(), b.ncols(), |i, k| {
        b[(i, k)] * (1.0 - b[(i, k)]) * m[(i, k)] * m[(i, k)] / state.eps_scale[i]
    })
}

/// Builds the factor system implied by the current `q` of all other blocks.
pub fn build_collapsed_system(ctx: &ModelContext, state: &VariationalState) -> Result<StateSpaceSystem> {
    let (n, s, t_len) = (ctx.dims.n(), ctx.dims.s(), ctx.dims.t());
    let eff = state.effective_loadings();
    let w = selection_weights(state);

    let mut phi_unc = DMatrix::zeros(s, s);
    for cov in &state.transition_cov {
        phi_unc += cov;
    }

    // per-variable pseudo-precision P_i ∘ Sigma_lambda_i + diag(w_i) and data block
    let blocks: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut pseudo = state.selector_moment(i).component_mul(&state.loading_cov[i]);
            for k in 0..s {
                pseudo[(k, k)] += w[(i, k)];
            }
            let e = eff.row(i).transpose();
            let data = &e * e.transpose() / state.eps_scale[i];
            (pseudo, data)
        })
        .collect();

    let pieces: Vec<_> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let mut pseudo = if t + 1 < t_len {
                phi_unc.clone()
            } else {
                DMatrix::zeros(s, s)
            };
            let mut j = DMatrix::zeros(s, s);
            let mut h = DVector::zeros(s);
            let mut c = 0.0;
            for (i, (pb, db)) in blocks.iter().enumerate() {
                if ctx.panel.available(i, t) {
                    let y = ctx.panel.values()[(i, t)];
                    pseudo += pb;
                    j += db;
                    let scale = state.eps_scale[i];
                    for k in 0..s {
                        h[k] += y * eff[(i, k)] / scale;
                    }
                    c += y * y / scale;
                }
            }
            j += &pseudo;
            (j, h, c, pseudo)
        })
        .collect();

    let mut precision = Vec::with_capacity(t_len);
    let mut info = Vec::with_capacity(t_len);
    let mut data_sq = Vec::with_capacity(t_len);
    let mut pseudo_precision = Vec::with_capacity(t_len);
    for (j, h, c, p) in pieces {
        precision.push(j);
        info.push(h);
        data_sq.push(c);
        pseudo_precision.push(p);
    }

    let init_precision = &ctx.cache.v_f0_inv + &phi_unc;
    let (init_cov, prec_ln_det) = spd_inverse(&init_precision, "initial state precision")?;
    Ok(StateSpaceSystem {
        r: ctx.dims.r(),
        transition: companion(&state.transition_mean),
        transition_mean: state.transition_mean.clone(),
        innov_var: state.innov_scale.clone(),
        init_cov,
        init_precision: linalg::symmetrized(init_precision),
        init_cov_ln_det: -prec_ln_det,
        precision,
        info,
        data_sq,
        pseudo_precision,
    })
}

/// Filter quantities kept for likelihood and bound evaluation.
#[derive(Debug, Clone)]
pub struct FilterByproducts {
    /// One-step predictive mean and covariance, t = 1..=T (stored at `t - 1`).
    pub predicted_mean: Vec<DVector<f64>>,
    pub predicted_cov: Vec<DMatrix<f64>>,
    /// Filtered mean and covariance, t = 0..=T.
    pub filtered_mean: Vec<DVector<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    /// Information residual `h_t - J_t m_t^-`.
    pub residual: Vec<DVector<f64>>,
    /// Log normalizer of each period's potential under the predictive density.
    pub log_normalizer: Vec<f64>,
    /// Log integral of the unnormalized factor density over `(F_0, f_1..f_T)`.
    pub log_partition: f64,
}

impl FilterByproducts {
    /// `sum_t log_normalizer[t]`.
    pub fn total_log_normalizer(&self) -> f64 {
        self.log_normalizer.iter().sum()
    }
}

fn check_finite(v: &DVector<f64>, stage: &'static str, t: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, index: t })
    }
}

/// Forward filter and fixed-interval smoother with lag-one cross moments.
pub fn smooth(sys: &StateSpaceSystem, panel: &Panel) -> Result<(SmoothedMoments, FilterByproducts)> {
    let (r, s, t_len) = (sys.r(), sys.s(), sys.t());
    let mt = &sys.transition;
    let mt_t = mt.transpose();

    let mut pred_mean = Vec::with_capacity(t_len);
    let mut pred_cov = Vec::with_capacity(t_len);
    let mut filt_mean = Vec::with_capacity(t_len + 1);
    let mut filt_cov = Vec::with_capacity(t_len + 1);
    let mut residual = Vec::with_capacity(t_len);
    let mut log_normalizer = Vec::with_capacity(t_len);
    filt_mean.push(DVector::zeros(s));
    filt_cov.push(sys.init_cov.clone());

    let identity = DMatrix::<f64>::identity(s, s);
    for t in 1..=t_len {
        let mp = mt * &filt_mean[t - 1];
        let mut pp = mt * &filt_cov[t - 1] * &mt_t;
        for j in 0..r {
            pp[(j, j)] += sys.innov_var[j];
        }
        symmetrize(&mut pp);
        let jt = &sys.precision[t - 1];
        let ht = &sys.info[t - 1];

        // (I + P J)^{-1} P = (P^{-1} + J)^{-1}
        let lu = (&identity + &pp * jt).lu();
        let mut pf = lu
            .solve(&pp)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("filter update at t={t}")))?;
        symmetrize(&mut pf);
        let ln_det_k: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();

        let jm = jt * &mp;
        let eta = ht - &jm;
        let pf_eta = &pf * &eta;
        let mf = &mp + &pf_eta;
        check_finite(&mf, "filter", t)?;
        let ell = -0.5 * sys.data_sq[t - 1] + ht.dot(&mp) - 0.5 * mp.dot(&jm) + 0.5 * eta.dot(&pf_eta) - 0.5 * ln_det_k;

        pred_mean.push(mp);
        pred_cov.push(pp);
        filt_mean.push(mf);
        filt_cov.push(pf);
        residual.push(eta);
        log_normalizer.push(ell);
    }

    // backward pass
    let mut mean = filt_mean.clone();
    let mut cov = filt_cov.clone();
    let mut cross = vec![DMatrix::zeros(s, s); t_len];
    for t in (0..t_len).rev() {
        let chol = linalg::cholesky(&pred_cov[t], "predictive covariance")
            .map_err(|_| Error::NotPositiveDefinite(format!("predictive covariance at t={}", t + 1)))?;
        // L_t = P_t M' (P_{t+1}^-)^{-1}
        let gain = chol.solve(&(mt * &filt_cov[t])).transpose();
        let dm = &mean[t + 1] - &pred_mean[t];
        mean[t] = &filt_mean[t] + &gain * dm;
        let dp = &cov[t + 1] - &pred_cov[t];
        let mut c = &filt_cov[t] + &gain * dp * gain.transpose();
        symmetrize(&mut c);
        cov[t] = c;
        check_finite(&mean[t], "smoother", t)?;
        cross[t] = &cov[t + 1] * gain.transpose() + &mean[t + 1] * mean[t].transpose();
    }

    let second: Vec<DMatrix<f64>> = mean
        .iter()
        .zip(cov.iter())
        .map(|(m, p)| {
            let mut v = p + m * m.transpose();
            symmetrize(&mut v);
            v
        })
        .collect();

    let mut moments = finish_sums(mean, second, cross, panel, r, s, 0.0);

    let ell_sum: f64 = log_normalizer.iter().sum();
    let ln2pi = (2.0 * PI).ln();
    let log_partition = 0.5 * (s + r * t_len) as f64 * ln2pi
        + 0.5 * sys.init_cov_ln_det
        + 0.5 * t_len as f64 * sys.innov_var.iter().map(|v| v.ln()).sum::<f64>()
        + ell_sum;
    moments.entropy = entropy(sys, &moments, log_partition);

    Ok((
        moments,
        FilterByproducts {
            predicted_mean: pred_mean,
            predicted_cov: pred_cov,
            filtered_mean: filt_mean,
            filtered_cov: filt_cov,
            residual,
            log_normalizer,
            log_partition,
        },
    ))
}

/// `H[q(F)] = log Z - E_q[log unnormalized density]`.
fn entropy(sys: &StateSpaceSystem, m: &SmoothedMoments, log_partition: f64) -> f64 {
    let mut energy = -0.5 * trace_product(&sys.init_precision, &m.second[0]);
    for j in 0..sys.r() {
        let mj = sys.transition_mean.row(j).transpose();
        let resid = m.lead_second_sum[j] - 2.0 * m.lead_lag_sum.row(j).transpose().dot(&mj)
            + linalg::quad_form(&m.lagged_second_sum, &mj);
        energy -= 0.5 * resid / sys.innov_var[j];
    }
    for t in 1..=sys.t() {
        energy += -0.5 * sys.data_sq[t - 1] + sys.info[t - 1].dot(&m.mean[t])
            - 0.5 * trace_product(&sys.precision[t - 1], &m.second[t]);
    }
    log_partition - energy
}
