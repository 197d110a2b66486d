//! Synthetic sparse DFM panels with known ground truth.
//!
//! Randomness comes from one ChaCha20 generator per (root seed, stream). The
//! stream id is `16 * replication + purpose`, so every replication and every
//! purpose within it (the DGP itself, the missing-data pattern) draws from an
//! independent, platform-stable sequence.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AvailabilityMask, ModelDims, Panel};

/// Stream purposes inside one replication.
const PURPOSE_DGP: u64 = 0;
const PURPOSE_MISSING: u64 = 1;

/// Generator for one replication and purpose.
pub fn stream_rng(seed: u64, replication: u64, purpose: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replication * 16 + purpose);
    rng
}

/// Availability pattern imposed after simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPattern {
    /// Everything observed.
    #[default]
    None,
    /// Four equal variable blocks: complete, every third period, ragged start,
    /// and 20% missing at random.
    Experiment2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dims: ModelDims,
    /// Share of included loadings.
    pub omega: f64,
    pub seed: u64,
    /// Replication index, selects the RNG stream.
    pub replication: u64,
    pub pattern: MissingPattern,
}

/// Ground truth of one simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// `Lambda*`, n×s, zero wherever `Z*` is zero.
    pub loadings: DMatrix<f64>,
    /// `Z*`, n×s with entries 0 or 1.
    pub inclusion: DMatrix<f64>,
    /// Diagonal of `Phi_1`.
    pub ar: DVector<f64>,
    /// Share of idiosyncratic variance per variable.
    pub xi: DVector<f64>,
    /// Diagonal of `Sigma_eps`.
    pub eps_var: DVector<f64>,
    /// Stacked state path, row `t` holds `F_{t+1}'` (T×s).
    pub factors: DMatrix<f64>,
}

impl SimTruth {
    /// `Phi_1` as a dense diagonal matrix.
    pub fn phi1(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.ar)
    }

    /// Dynamic factors `f_t` (first r state entries), T×r.
    pub fn dynamic_factors(&self, r: usize) -> DMatrix<f64> {
        self.factors.columns(0, r).into_owned()
    }
}

/// `zeta_i` and the implied idiosyncratic variance for one variable.
pub fn idiosyncratic_variance(loadings_row: &[f64], ar: &[f64], xi: f64) -> f64 {
    let r = ar.len();
    let zeta: f64 = loadings_row
        .iter()
        .enumerate()
        .map(|(k, l)| l * l / (1.0 - ar[k % r].powi(2)))
        .sum();
    if zeta > 0.0 {
        xi / (1.0 - xi) * zeta
    } else {
        1.0
    }
}

pub fn simulate_dfm(cfg: &SimConfig) -> Result<(Panel, SimTruth)> {
    if !(0.0..=1.0).contains(&cfg.omega) {
        return Err(Error::Config(format!("omega must lie in [0, 1], got {}", cfg.omega)));
    }
    let d = cfg.dims;
    let (n, t_len, r, p, s) = (d.n(), d.t(), d.r(), d.p(), d.s());
    let mut rng = stream_rng(cfg.seed, cfg.replication, PURPOSE_DGP);

    let ar_dist = Uniform::new(-0.95, 0.95).expect("valid range");
    let xi_dist = Uniform::new(0.1, 0.9).expect("valid range");
    let ar: Vec<f64> = (0..r).map(|_| ar_dist.sample(&mut rng)).collect();
    let xi: Vec<f64> = (0..n).map(|_| xi_dist.sample(&mut rng)).collect();

    let total = n * s;
    let included = (cfg.omega * total as f64).round() as usize;
    let mut loadings = DMatrix::zeros(n, s);
    let mut inclusion = DMatrix::zeros(n, s);
    for gamma in sample(&mut rng, total, included).into_iter() {
        // column-major vec(Lambda) index
        let (i, k) = (gamma % n, gamma / n);
        loadings[(i, k)] = rng.sample::<f64, _>(StandardNormal);
        inclusion[(i, k)] = 1.0;
    }

    let eps_var: Vec<f64> = (0..n)
        .map(|i| {
            let row: Vec<f64> = loadings.row(i).iter().copied().collect();
            idiosyncratic_variance(&row, &ar, xi[i])
        })
        .collect();

    // f_{1-p}, ..., f_T, started from the stationary distribution
    let path_len = t_len + p;
    let mut f = DMatrix::zeros(path_len, r);
    for j in 0..r {
        let z: f64 = rng.sample(StandardNormal);
        f[(0, j)] = z / (1.0 - ar[j] * ar[j]).sqrt();
    }
    for t in 1..path_len {
        for j in 0..r {
            let u: f64 = rng.sample(StandardNormal);
            f[(t, j)] = ar[j] * f[(t - 1, j)] + u;
        }
    }
    let factors = DMatrix::from_fn(t_len, s, |t, k| {
        let (lag, j) = (k / r, k % r);
        f[(t + p - lag, j)]
    });

    let mut y = &loadings * factors.transpose();
    for t in 0..t_len {
        for i in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            y[(i, t)] += eps_var[i].sqrt() * e;
        }
    }

    let panel = Panel::complete(y)?;
    let panel = apply_missing_pattern(&panel, cfg.pattern, cfg.seed, cfg.replication)?;
    let truth = SimTruth {
        loadings,
        inclusion,
        ar: DVector::from_vec(ar),
        xi: DVector::from_vec(xi),
        eps_var: DVector::from_vec(eps_var),
        factors,
    };
    Ok((panel, truth))
}

/// Imposes `pattern` on an (assumed complete) panel.
pub fn apply_missing_pattern(panel: &Panel, pattern: MissingPattern, seed: u64, replication: u64) -> Result<Panel> {
    match pattern {
        MissingPattern::None => Ok(panel.clone()),
        MissingPattern::Experiment2 => {
            let mask = experiment2_mask(panel.n(), panel.t(), &mut stream_rng(seed, replication, PURPOSE_MISSING))?;
            panel.with_mask(mask)
        }
    }
}

/// Four-block availability mask.
///
/// Block 2 keeps periods whose 1-based index is a multiple of three. Block 3
/// repeatedly picks a variable uniformly and deletes its earliest available
/// observation. Blocks 3 and 4 each lose `round(0.2 * q * T)` cells.
pub fn experiment2_mask(n: usize, t_len: usize, rng: &mut impl Rng) -> Result<AvailabilityMask> {
    if !n.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "the four-block missing pattern needs n divisible by 4, got {n}"
        )));
    }
    let q = n / 4;
    let mut mask = AvailabilityMask::full(n, t_len);
    for i in q..2 * q {
        for t in 0..t_len {
            mask.set(i, t, (t + 1) % 3 == 0);
        }
    }

    let target = (0.2 * (q * t_len) as f64).round() as usize;
    let mut first_available = vec![0usize; q];
    let mut removed = 0;
    while removed < target {
        let v = rng.random_range(0..q);
        if first_available[v] < t_len {
            mask.set(2 * q + v, first_available[v], false);
            first_available[v] += 1;
            removed += 1;
        }
    }

    for cell in sample(rng, q * t_len, target).into_iter() {
        let (v, t) = (cell / t_len, cell % t_len);
        mask.set(3 * q + v, t, false);
    }
    Ok(mask)
}
