//! Model dimensions, data panel, priors, variational state and smoothed moments.
//!
//! Everything here is plain data shared by the estimation modules. The only
//! logic is validation: [`validate`] checks every shape and invariant once and
//! returns a [`ModelContext`] carrying the inputs together with the prior
//! quantities every sweep needs (inverse shrinkage matrices, log-determinants,
//! prior log-odds).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, spd_inverse};
use crate::special::logit;

/// Problem sizes. The state dimension `s = r (p + 1)` is derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDims", into = "RawDims")]
pub struct ModelDims {
    n: usize,
    t: usize,
    r: usize,
    p: usize,
}

#[derive(Serialize, Deserialize)]
struct RawDims {
    n: usize,
    t: usize,
    r: usize,
    p: usize,
}

impl TryFrom<RawDims> for ModelDims {
    type Error = Error;
    fn try_from(raw: RawDims) -> Result<Self> {
        ModelDims::new(raw.n, raw.t, raw.r, raw.p)
    }
}

impl From<ModelDims> for RawDims {
    fn from(d: ModelDims) -> Self {
        RawDims {
            n: d.n,
            t: d.t,
            r: d.r,
            p: d.p,
        }
    }
}

impl ModelDims {
    pub fn new(n: usize, t: usize, r: usize, p: usize) -> Result<Self> {
        if n == 0 || t == 0 || r == 0 {
            return Err(Error::Dimension(format!(
                "need n >= 1, T >= 1, r >= 1 (got n={n}, T={t}, r={r})"
            )));
        }
        Ok(Self { n, t, r, p })
    }

    /// Number of observed variables.
    pub fn n(&self) -> usize {
        self.n
    }
    /// Number of time points.
    pub fn t(&self) -> usize {
        self.t
    }
    /// Number of dynamic factors.
    pub fn r(&self) -> usize {
        self.r
    }
    /// Number of loading lags.
    pub fn p(&self) -> usize {
        self.p
    }
    /// State dimension `r (p + 1)`.
    pub fn s(&self) -> usize {
        self.r * (self.p + 1)
    }
}

/// Bit-packed n×T availability mask, one row of words per variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvailabilityMask {
    n: usize,
    t: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl AvailabilityMask {
    pub fn full(n: usize, t: usize) -> Self {
        let mut m = Self::empty(n, t);
        for i in 0..n {
            for tt in 0..t {
                m.set(i, tt, true);
            }
        }
        m
    }

    pub fn empty(n: usize, t: usize) -> Self {
        let words_per_row = t.div_ceil(64);
        Self {
            n,
            t,
            words_per_row,
            bits: vec![0; n * words_per_row],
        }
    }

    /// Builds a mask from a real matrix, which must contain only 0 and 1.
    pub fn from_matrix(a: &DMatrix<f64>) -> Result<Self> {
        let mut m = Self::empty(a.nrows(), a.ncols());
        for i in 0..a.nrows() {
            for t in 0..a.ncols() {
                let v = a[(i, t)];
                if v == 1.0 {
                    m.set(i, t, true);
                } else if v != 0.0 {
                    return Err(Error::MaskNotBinary { i, t, value: v });
                }
            }
        }
        Ok(m)
    }

    pub fn nrows(&self) -> usize {
        self.n
    }
    pub fn ncols(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> bool {
        debug_assert!(i < self.n && t < self.t);
        let w = self.bits[i * self.words_per_row + t / 64];
        (w >> (t % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize, value: bool) {
        let w = &mut self.bits[i * self.words_per_row + t / 64];
        if value {
            *w |= 1 << (t % 64);
        } else {
            *w &= !(1 << (t % 64));
        }
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.bits[i * self.words_per_row..(i + 1) * self.words_per_row]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// An n×T observation panel with its availability mask.
///
/// Missing cells are stored as exactly 0 so that availability-weighted sums
/// can run over the raw matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    y: DMatrix<f64>,
    mask: AvailabilityMask,
    counts: Vec<usize>,
    sum_sq: Vec<f64>,
}

impl Panel {
    pub fn new(mut y: DMatrix<f64>, mask: AvailabilityMask) -> Result<Self> {
        if y.nrows() != mask.nrows() || y.ncols() != mask.ncols() {
            return Err(Error::Dimension(format!(
                "panel is {}x{} but mask is {}x{}",
                y.nrows(),
                y.ncols(),
                mask.nrows(),
                mask.ncols()
            )));
        }
        for i in 0..y.nrows() {
            for t in 0..y.ncols() {
                if !mask.get(i, t) {
                    y[(i, t)] = 0.0;
                } else if !y[(i, t)].is_finite() {
                    return Err(Error::NonFinite {
                        stage: "panel",
                        index: i * y.ncols() + t,
                    });
                }
            }
        }
        let counts = (0..y.nrows()).map(|i| mask.row_count(i)).collect();
        let sum_sq = (0..y.nrows())
            .map(|i| y.row(i).iter().map(|v| v * v).sum())
            .collect();
        Ok(Self {
            y,
            mask,
            counts,
            sum_sq,
        })
    }

    /// Fully observed panel.
    pub fn complete(y: DMatrix<f64>) -> Result<Self> {
        let mask = AvailabilityMask::full(y.nrows(), y.ncols());
        Self::new(y, mask)
    }

    /// Panel from a real-valued 0/1 mask matrix.
    pub fn with_mask_matrix(y: DMatrix<f64>, a: &DMatrix<f64>) -> Result<Self> {
        Self::new(y, AvailabilityMask::from_matrix(a)?)
    }

    /// Panel from optional cells (`None` = missing), indexed `[i][t]`.
    pub fn from_options(rows: &[Vec<Option<f64>>]) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        let mut y = DMatrix::zeros(n, t);
        let mut mask = AvailabilityMask::empty(n, t);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Dimension(format!("row {i} has {} cells, expected {t}", row.len())));
            }
            for (tt, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    y[(i, tt)] = *v;
                    mask.set(i, tt, true);
                }
            }
        }
        Self::new(y, mask)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }
    pub fn t(&self) -> usize {
        self.y.ncols()
    }

    /// Raw matrix with missing cells set to zero.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn mask(&self) -> &AvailabilityMask {
        &self.mask
    }

    #[inline]
    pub fn available(&self, i: usize, t: usize) -> bool {
        self.mask.get(i, t)
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.mask.get(i, t).then(|| self.y[(i, t)])
    }

    /// `T_i`, the number of available observations of variable `i`.
    pub fn count(&self, i: usize) -> usize {
        self.counts[i]
    }

    /// `sum_t a_{i,t} y_{i,t}^2`.
    pub fn observed_sum_sq(&self, i: usize) -> f64 {
        self.sum_sq[i]
    }

    pub fn with_mask(&self, mask: AvailabilityMask) -> Result<Self> {
        let mut y = self.y.clone();
        for i in 0..self.n() {
            for t in 0..self.t() {
                if mask.get(i, t) && !self.mask.get(i, t) {
                    return Err(Error::Dimension(format!(
                        "cell ({i}, {t}) was missing and cannot be made available"
                    )));
                }
                if !mask.get(i, t) {
                    y[(i, t)] = 0.0;
                }
            }
        }
        Self::new(y, mask)
    }

    /// Mean and standard deviation of each variable over its available entries.
    /// Variables with fewer than two observations get mean 0 and sd 1.
    pub fn moments(&self) -> Standardization {
        let mut mean = DVector::zeros(self.n());
        let mut sd = DVector::from_element(self.n(), 1.0);
        for i in 0..self.n() {
            let c = self.count(i);
            if c < 2 {
                continue;
            }
            let m = self.y.row(i).sum() / c as f64;
            let ss: f64 = (0..self.t())
                .filter(|&t| self.available(i, t))
                .map(|t| (self.y[(i, t)] - m).powi(2))
                .sum();
            mean[i] = m;
            sd[i] = (ss / (c - 1) as f64).sqrt();
        }
        Standardization { mean, sd }
    }

    /// Demeans each variable and scales it to unit standard deviation.
    pub fn standardized(&self) -> Result<(Panel, Standardization)> {
        let st = self.moments();
        for i in 0..self.n() {
            if !(st.sd[i] > 0.0) {
                return Err(Error::ConstantVariable(i));
            }
        }
        let mut y = self.y.clone();
        for i in 0..self.n() {
            for t in 0..self.t() {
                if self.available(i, t) {
                    y[(i, t)] = (y[(i, t)] - st.mean[i]) / st.sd[i];
                }
            }
        }
        Ok((Panel::new(y, self.mask.clone())?, st))
    }
}

/// Per-variable location and scale applied by [`Panel::standardized`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
}

/// Normal / scaled-inverse-chi-square prior of one regression block.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPrior {
    /// Shrinkage matrix `V` (s×s, SPD).
    pub shrinkage: DMatrix<f64>,
    /// Prior degrees of freedom `nu`.
    pub nu: f64,
    /// Prior scale `tau^2`.
    pub tau2: f64,
}

impl RegressionPrior {
    pub fn isotropic(s: usize, v: f64, nu: f64, tau2: f64) -> Self {
        Self {
            shrinkage: linalg::diag_matrix(s, v),
            nu,
            tau2,
        }
    }
}

/// All hyperparameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    /// Prior covariance of the initial state.
    pub v_f0: DMatrix<f64>,
    /// One prior per observed variable (loadings and idiosyncratic variance).
    pub loadings: Vec<RegressionPrior>,
    /// One prior per dynamic factor (transition row and innovation variance).
    pub transition: Vec<RegressionPrior>,
    /// Prior inclusion probabilities, n×s.
    pub inclusion: DMatrix<f64>,
}

impl PriorSpec {
    /// Homogeneous prior: shrinkage `v·I` everywhere, common `nu`, `tau^2` and `beta`.
    pub fn homogeneous(dims: ModelDims, cfg: &PriorConfig) -> Self {
        let s = dims.s();
        Self {
            v_f0: linalg::diag_matrix(s, cfg.v_f0),
            loadings: (0..dims.n())
                .map(|_| RegressionPrior::isotropic(s, cfg.v_lambda, cfg.nu_eps, cfg.tau2_eps))
                .collect(),
            transition: (0..dims.r())
                .map(|_| RegressionPrior::isotropic(s, cfg.v_phi, cfg.nu_u, cfg.tau2_u))
                .collect(),
            inclusion: DMatrix::from_element(dims.n(), s, cfg.beta),
        }
    }

    /// Defaults used throughout the simulation study with the given inclusion probability.
    pub fn standard(dims: ModelDims, beta: f64) -> Self {
        Self::homogeneous(
            dims,
            &PriorConfig {
                beta,
                ..PriorConfig::default()
            },
        )
    }
}

/// Human-editable prior description (TOML). Unset keys take the defaults:
/// unit degrees of freedom and scale, diagonal shrinkage 2, inclusion 0.2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub nu_eps: f64,
    pub tau2_eps: f64,
    pub v_lambda: f64,
    pub nu_u: f64,
    pub tau2_u: f64,
    pub v_phi: f64,
    pub v_f0: f64,
    pub beta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            nu_eps: 1.0,
            tau2_eps: 1.0,
            v_lambda: 2.0,
            nu_u: 1.0,
            tau2_u: 1.0,
            v_phi: 2.0,
            v_f0: 2.0,
            beta: 0.2,
        }
    }
}

/// Prior quantities derived once at validation.
#[derive(Debug, Clone)]
pub struct PriorCache {
    pub v_f0_inv: DMatrix<f64>,
    pub v_f0_ln_det: f64,
    pub loading_v_inv: Vec<DMatrix<f64>>,
    pub loading_ln_det: Vec<f64>,
    pub transition_v_inv: Vec<DMatrix<f64>>,
    pub transition_ln_det: Vec<f64>,
    /// Clamped prior log-odds `logit(beta)`.
    pub logit_beta: DMatrix<f64>,
}

/// Validated bundle of dimensions, data and prior.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub dims: ModelDims,
    pub panel: Panel,
    pub prior: PriorSpec,
    pub cache: PriorCache,
}

impl ModelContext {
    /// Runs [`validate`] again on the same inputs.
    pub fn revalidate(&self) -> Result<ModelContext> {
        validate(self.dims, self.panel.clone(), self.prior.clone())
    }
}

fn check_positive(what: &str, idx: usize, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Hyperparameter(format!("{what}[{idx}] must be positive, got {v}")))
    }
}

fn check_block(what: &str, idx: usize, s: usize, prior: &RegressionPrior) -> Result<(DMatrix<f64>, f64)> {
    if prior.shrinkage.shape() != (s, s) {
        return Err(Error::Dimension(format!(
            "{what}[{idx}] shrinkage is {:?}, expected ({s}, {s})",
            prior.shrinkage.shape()
        )));
    }
    check_positive(&format!("{what}.nu"), idx, prior.nu)?;
    check_positive(&format!("{what}.tau2"), idx, prior.tau2)?;
    spd_inverse(&prior.shrinkage, "").map_err(|_| Error::NonSpdPrior(format!("{what}[{idx}]")))
}

/// Checks every type invariant and mutual shape, returning the model context.
pub fn validate(dims: ModelDims, panel: Panel, prior: PriorSpec) -> Result<ModelContext> {
    let (n, s) = (dims.n(), dims.s());
    if panel.n() != n || panel.t() != dims.t() {
        return Err(Error::Dimension(format!(
            "panel is {}x{}, dims say {}x{}",
            panel.n(),
            panel.t(),
            n,
            dims.t()
        )));
    }
    if prior.v_f0.shape() != (s, s) {
        return Err(Error::Dimension(format!("V_F0 must be {s}x{s}")));
    }
    let (v_f0_inv, v_f0_ln_det) =
        spd_inverse(&prior.v_f0, "").map_err(|_| Error::NonSpdPrior("V_F0".into()))?;
    if prior.loadings.len() != n {
        return Err(Error::Dimension(format!(
            "{} loading priors for {n} variables",
            prior.loadings.len()
        )));
    }
    if prior.transition.len() != dims.r() {
        return Err(Error::Dimension(format!(
            "{} transition priors for {} factors",
            prior.transition.len(),
            dims.r()
        )));
    }
    let mut loading_v_inv = Vec::with_capacity(n);
    let mut loading_ln_det = Vec::with_capacity(n);
    for (i, lp) in prior.loadings.iter().enumerate() {
        let (inv, ld) = check_block("V_lambda", i, s, lp)?;
        loading_v_inv.push(inv);
        loading_ln_det.push(ld);
    }
    let mut transition_v_inv = Vec::with_capacity(dims.r());
    let mut transition_ln_det = Vec::with_capacity(dims.r());
    for (j, tp) in prior.transition.iter().enumerate() {
        let (inv, ld) = check_block("V_phi", j, s, tp)?;
        transition_v_inv.push(inv);
        transition_ln_det.push(ld);
    }
    if prior.inclusion.shape() != (n, s) {
        return Err(Error::Dimension(format!(
            "inclusion prior is {:?}, expected ({n}, {s})",
            prior.inclusion.shape()
        )));
    }
    for i in 0..n {
        for k in 0..s {
            let b = prior.inclusion[(i, k)];
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::InclusionOutOfRange { i, k, value: b });
            }
        }
    }
    let logit_beta = prior.inclusion.map(logit);
    Ok(ModelContext {
        dims,
        panel,
        prior,
        cache: PriorCache {
            v_f0_inv,
            v_f0_ln_det,
            loading_v_inv,
            loading_ln_det,
            transition_v_inv,
            transition_ln_det,
            logit_beta,
        },
    })
}

/// Parameters of the factorized variational density `q`.
///
/// The selector second moments `P_i` and the scaled loading moments `R_i` are
/// functions of the stored fields and are computed on demand by
/// [`VariationalState::selector_moment`] and
/// [`VariationalState::scaled_loading_moment`].
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// `M_Lambda`, n×s.
    pub loading_mean: DMatrix<f64>,
    /// `Sigma_lambda_i`, one s×s matrix per variable.
    pub loading_cov: Vec<DMatrix<f64>>,
    /// `psi^2_eps_i`.
    pub eps_scale: DVector<f64>,
    /// `M_Phi`, r×s.
    pub transition_mean: DMatrix<f64>,
    /// `Sigma_phi_j`, one s×s matrix per factor.
    pub transition_cov: Vec<DMatrix<f64>>,
    /// `psi^2_u_j`.
    pub innov_scale: DVector<f64>,
    /// Posterior inclusion probabilities `B`, n×s.
    pub inclusion: DMatrix<f64>,
}

impl VariationalState {
    /// State sitting exactly at the prior (zero means, prior covariances and
    /// scales) with the given inclusion probabilities.
    pub fn at_prior(ctx: &ModelContext, inclusion: DMatrix<f64>) -> Self {
        let (n, r, s) = (ctx.dims.n(), ctx.dims.r(), ctx.dims.s());
        Self {
            loading_mean: DMatrix::zeros(n, s),
            loading_cov: ctx.prior.loadings.iter().map(|p| p.shrinkage.clone()).collect(),
            eps_scale: DVector::from_iterator(n, ctx.prior.loadings.iter().map(|p| p.tau2)),
            transition_mean: DMatrix::zeros(r, s),
            transition_cov: ctx.prior.transition.iter().map(|p| p.shrinkage.clone()).collect(),
            innov_scale: DVector::from_iterator(r, ctx.prior.transition.iter().map(|p| p.tau2)),
            inclusion,
        }
    }

    /// `P_i = E[z_i z_i']`: `b_k` on the diagonal, `b_k b_m` off it.
    pub fn selector_moment(&self, i: usize) -> DMatrix<f64> {
        selector_moment(self.inclusion.row(i).iter().copied())
    }

    /// `R_i = Sigma_lambda_i + mu mu' / psi^2`.
    pub fn scaled_loading_moment(&self, i: usize) -> DMatrix<f64> {
        let mu = self.loading_mean.row(i).transpose();
        &self.loading_cov[i] + (&mu * mu.transpose()) / self.eps_scale[i]
    }

    /// `B ∘ M_Lambda`, the point estimate of `Z ∘ Lambda`.
    pub fn effective_loadings(&self) -> DMatrix<f64> {
        self.inclusion.component_mul(&self.loading_mean)
    }

    /// Checks shapes against `dims` and the state invariants.
    pub fn check(&self, dims: ModelDims) -> Result<()> {
        let (n, r, s) = (dims.n(), dims.r(), dims.s());
        let shape_ok = self.loading_mean.shape() == (n, s)
            && self.loading_cov.len() == n
            && self.loading_cov.iter().all(|m| m.shape() == (s, s))
            && self.eps_scale.len() == n
            && self.transition_mean.shape() == (r, s)
            && self.transition_cov.len() == r
            && self.transition_cov.iter().all(|m| m.shape() == (s, s))
            && self.innov_scale.len() == r
            && self.inclusion.shape() == (n, s);
        if !shape_ok {
            return Err(Error::Dimension("variational state does not match model dimensions".into()));
        }
        for (i, b) in self.inclusion.iter().enumerate() {
            if !(0.0..=1.0).contains(b) {
                return Err(Error::InclusionOutOfRange {
                    i: i % n,
                    k: i / n,
                    value: *b,
                });
            }
        }
        for (i, v) in self.eps_scale.iter().enumerate() {
            check_positive("psi2_eps", i, *v)?;
        }
        for (j, v) in self.innov_scale.iter().enumerate() {
            check_positive("psi2_u", j, *v)?;
        }
        for (i, m) in self.loading_cov.iter().enumerate() {
            if !linalg::is_spd(m) {
                return Err(Error::NotPositiveDefinite(format!("Sigma_lambda[{i}]")));
            }
        }
        for (j, m) in self.transition_cov.iter().enumerate() {
            if !linalg::is_spd(m) {
                return Err(Error::NotPositiveDefinite(format!("Sigma_phi[{j}]")));
            }
        }
        if self.loading_mean.iter().chain(self.transition_mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "state means",
                index: 0,
            });
        }
        Ok(())
    }
}

/// `E[z z']` for independent Bernoulli selectors with the given means.
pub fn selector_moment(b: impl ExactSizeIterator<Item = f64> + Clone) -> DMatrix<f64> {
    let b: Vec<f64> = b.collect();
    let s = b.len();
    DMatrix::from_fn(s, s, |k, m| if k == m { b[k] } else { b[k] * b[m] })
}

/// Smoothed moments of `q(F)` and the time sums the parameter updates consume.
///
/// Index conventions: `mean[t]`, `second[t]` for `t = 0..=T`; `cross[t - 1]`
/// holds `E[F_t F_{t-1}']` for `t = 1..=T`.
#[derive(Debug, Clone)]
pub struct SmoothedMoments {
    pub mean: Vec<DVector<f64>>,
    /// `E[F_t F_t']`.
    pub second: Vec<DMatrix<f64>>,
    /// `E[F_t F_{t-1}']`.
    pub cross: Vec<DMatrix<f64>>,
    /// `sum_t E[F_{t-1} F_{t-1}']`.
    pub lagged_second_sum: DMatrix<f64>,
    /// Row `j`: `sum_t E[f_{j,t} F_{t-1}']`.
    pub lead_lag_sum: DMatrix<f64>,
    /// `sum_t E[f_{j,t}^2]`.
    pub lead_second_sum: DVector<f64>,
    /// Row `i`: `g_i = sum_t a_{i,t} y_{i,t} E[F_t]`.
    pub g: DMatrix<f64>,
    /// `Q_i = sum_t a_{i,t} E[F_t F_t']`.
    pub q: Vec<DMatrix<f64>>,
    /// Differential entropy of `q(F)` over `(F_0, f_1, ..., f_T)`.
    pub entropy: f64,
}

impl SmoothedMoments {
    /// Number of transitions summed over (`T`).
    pub fn transitions(&self) -> usize {
        self.cross.len()
    }

    /// Smoothed dynamic factors `E[f_t]` for `t = 1..=T` as a T×r matrix.
    pub fn factor_means(&self, r: usize) -> DMatrix<f64> {
        let t = self.mean.len() - 1;
        DMatrix::from_fn(t, r, |tt, j| self.mean[tt + 1][j])
    }

    /// Moments of a degenerate `q(F)` concentrated on a known path
    /// `states[t]`, `t = 0..=T`. Zero entropy by convention; used for
    /// regressions on estimated factors.
    pub fn point_mass(states: &[DVector<f64>], panel: &Panel, r: usize) -> Self {
        let s = states[0].len();
        let second: Vec<DMatrix<f64>> = states.iter().map(|f| f * f.transpose()).collect();
        let cross: Vec<DMatrix<f64>> = (1..states.len())
            .map(|t| &states[t] * states[t - 1].transpose())
            .collect();
        finish_sums(states.to_vec(), second, cross, panel, r, s, 0.0)
    }
}

/// Accumulates the time sums from per-t moments.
pub(crate) fn finish_sums(
    mean: Vec<DVector<f64>>,
    second: Vec<DMatrix<f64>>,
    cross: Vec<DMatrix<f64>>,
    panel: &Panel,
    r: usize,
    s: usize,
    entropy: f64,
) -> SmoothedMoments {
    use rayon::prelude::*;
    let t_len = cross.len();
    let mut lagged_second_sum = DMatrix::zeros(s, s);
    let mut lead_lag_sum = DMatrix::zeros(r, s);
    let mut lead_second_sum = DVector::zeros(r);
    for t in 1..=t_len {
        lagged_second_sum += &second[t - 1];
        lead_lag_sum += cross[t - 1].rows(0, r);
        for j in 0..r {
            lead_second_sum[j] += second[t][(j, j)];
        }
    }
    let per_var: Vec<(DVector<f64>, DMatrix<f64>)> = (0..panel.n())
        .into_par_iter()
        .map(|i| {
            let mut g = DVector::zeros(s);
            let mut q = DMatrix::zeros(s, s);
            for t in 0..panel.t().min(t_len) {
                if panel.available(i, t) {
                    g.axpy(panel.values()[(i, t)], &mean[t + 1], 1.0);
                    q += &second[t + 1];
                }
            }
            (g, q)
        })
        .collect();
    let mut g = DMatrix::zeros(panel.n(), s);
    let mut q = Vec::with_capacity(panel.n());
    for (i, (gi, qi)) in per_var.into_iter().enumerate() {
        g.set_row(i, &gi.transpose());
        q.push(qi);
    }
    SmoothedMoments {
        mean,
        second,
        cross,
        lagged_second_sum,
        lead_lag_sum,
        lead_second_sum,
        g,
        q,
        entropy,
    }
}
