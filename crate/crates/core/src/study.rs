//! Monte Carlo studies over a grid of simulation designs.
//!
//! Each replication simulates one panel, standardizes it, fits EM once and
//! then the variational model once per prior inclusion probability. The EM
//! fit doubles as the starting point of the variational fits when the
//! configured initialization asks for it. Replications run in parallel and
//! are reduced in replication order, so results do not depend on scheduling.

use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{run_em, EmReport};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, Metrics};
use crate::fit::{initialize, run_with_reruns, state_from_factor_path, FitConfig, InitMethod};
use crate::io::write_atomic;
use crate::simulate::{simulate_dfm, MissingPattern, SimConfig, SimTruth};
use crate::types::{validate, ModelDims, Panel, PriorConfig, PriorSpec, Standardization};

/// Upper bound on fits per study.
pub const MAX_FITS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub omega: Vec<f64>,
    pub n: Vec<usize>,
    pub t: Vec<usize>,
    pub r: Vec<usize>,
    pub p: Vec<usize>,
    /// Prior inclusion probabilities, one variational fit each.
    pub beta: Vec<f64>,
    pub replications: u64,
    /// Root seed; replication k draws from stream k of this seed.
    pub seed: u64,
    pub pattern: MissingPattern,
    /// Also fit the maximum-likelihood baseline.
    pub ml: bool,
    /// Remaining prior hyperparameters (its `beta` is overridden per fit).
    pub prior: PriorConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            omega: vec![0.2],
            n: vec![50],
            t: vec![100],
            r: vec![1],
            p: vec![0],
            beta: vec![0.2],
            replications: 100,
            seed: 7,
            pattern: MissingPattern::None,
            ml: true,
            prior: PriorConfig::default(),
        }
    }
}

/// Named configurations.
pub const PRESETS: [&str; 3] = ["table1-smallest", "experiment1", "experiment2"];

impl StudyConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1-smallest" => Ok(Self::default()),
            "experiment1" => Ok(Self {
                omega: vec![0.2, 0.5, 1.0],
                n: vec![50, 100, 400],
                t: vec![100, 200],
                r: vec![1, 2],
                p: vec![0, 2],
                beta: vec![0.2, 0.5, 1.0],
                replications: 200,
                ..Self::default()
            }),
            "experiment2" => Ok(Self {
                omega: vec![0.1, 0.025],
                n: vec![800],
                t: vec![250],
                r: vec![4],
                p: vec![2],
                beta: vec![0.1],
                replications: 1,
                pattern: MissingPattern::Experiment2,
                ..Self::default()
            }),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Cross product of the grid, in (ω, n, T, r, p) order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut out = Vec::new();
        for &omega in &self.omega {
            for &n in &self.n {
                for &t in &self.t {
                    for &r in &self.r {
                        for &p in &self.p {
                            out.push(Cell {
                                omega,
                                dims: ModelDims::new(n, t, r, p)?,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Validates the grid and returns the number of fits it implies.
    pub fn check(&self) -> Result<usize> {
        let cells = self.cells()?;
        if cells.is_empty() || self.replications == 0 {
            return Err(Error::Config("study grid is empty".into()));
        }
        if self.beta.is_empty() && !self.ml {
            return Err(Error::Config("no estimator selected".into()));
        }
        if let Some(o) = self.omega.iter().find(|o| !(0.0..=1.0).contains(*o)) {
            return Err(Error::Config(format!("omega {o} outside [0, 1]")));
        }
        if let Some(b) = self.beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1]")));
        }
        let per_rep = self.beta.len() + usize::from(self.ml);
        let fits = cells
            .len()
            .checked_mul(self.replications as usize)
            .and_then(|v| v.checked_mul(per_rep))
            .filter(|v| *v <= MAX_FITS)
            .ok_or_else(|| Error::Config(format!("study exceeds {MAX_FITS} fits")))?;
        Ok(fits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub omega: f64,
    pub dims: ModelDims,
}

/// Which estimator produced a result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Vi { beta: f64 },
    Ml,
}

/// Statistics of one fit, or why it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub estimator: Estimator,
    pub result: std::result::Result<Metrics, String>,
}

/// Outcomes of one replication, ML first (if requested) then one per beta.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub replication: u64,
    pub outcomes: Vec<FitOutcome>,
}

fn em_metrics(em: &EmReport, truth: &SimTruth, st: &Standardization, r: usize) -> Result<Metrics> {
    evaluate(
        &em.params.loadings,
        &em.params.loadings.map(|_| 1.0),
        &em.moments.factor_means(r),
        &truth.loadings,
        &truth.inclusion,
        &truth.dynamic_factors(r),
        st.sd.as_slice(),
    )
}

fn vi_fit(
    panel: &Panel,
    dims: ModelDims,
    prior: PriorSpec,
    em: Option<&EmReport>,
    fit: &FitConfig,
    truth: &SimTruth,
    st: &Standardization,
) -> Result<Metrics> {
    let ctx = validate(dims, panel.clone(), prior)?;
    let init = match (&fit.init, em) {
        (InitMethod::PcaEm, Some(em)) => state_from_factor_path(&ctx, &em.moments.mean)?,
        (method, _) => initialize(&ctx, method, &fit.em)?,
    };
    let report = run_with_reruns(&ctx, fit, init)?;
    debug!("vi fit: {} sweeps, {} restarts, {:.3}s", report.sweeps, report.reruns, report.wall_time);
    evaluate(
        &report.state.effective_loadings(),
        &report.state.inclusion,
        &report.factors(),
        &truth.loadings,
        &truth.inclusion,
        &truth.dynamic_factors(dims.r()),
        st.sd.as_slice(),
    )
}

/// Simulates and fits one replication of `cell`.
pub fn run_replication(cfg: &StudyConfig, cell: Cell, replication: u64, fit: &FitConfig) -> Result<Replication> {
    let dims = cell.dims;
    let sim = SimConfig {
        dims,
        omega: cell.omega,
        seed: cfg.seed,
        replication,
        pattern: cfg.pattern,
    };
    let (raw, truth) = simulate_dfm(&sim)?;
    let (panel, st) = raw.standardized()?;
    let mut outcomes = Vec::new();

    let need_em = cfg.ml || fit.init == InitMethod::PcaEm;
    let em = if need_em { Some(run_em(&panel, dims, &fit.em)) } else { None };
    if cfg.ml {
        let result = match em.as_ref().expect("em requested") {
            Ok(report) => em_metrics(report, &truth, &st, dims.r()).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        outcomes.push(FitOutcome {
            estimator: Estimator::Ml,
            result,
        });
    }
    let em_ok = em.as_ref().and_then(|r| r.as_ref().ok());
    for &beta in &cfg.beta {
        let prior = PriorSpec::homogeneous(dims, &PriorConfig { beta, ..cfg.prior.clone() });
        let result = if need_em && em_ok.is_none() && fit.init == InitMethod::PcaEm {
            Err("initial EM fit failed".to_string())
        } else {
            vi_fit(&panel, dims, prior, em_ok, fit, &truth, &st).map_err(|e| e.to_string())
        };
        outcomes.push(FitOutcome {
            estimator: Estimator::Vi { beta },
            result,
        });
    }
    Ok(Replication { replication, outcomes })
}

/// Means over the successful replications of one (cell, estimator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub omega: f64,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub r: usize,
    pub p: usize,
    pub estimator: String,
    pub beta: Option<f64>,
    pub replications: usize,
    pub failures: usize,
    /// Not defined for ML, which does no selection.
    pub p_z: Option<f64>,
    pub e_lambda: Option<f64>,
    pub p_f: Option<f64>,
}

fn summarize(cell: Cell, reps: &[Replication]) -> Vec<SummaryRow> {
    let Some(first) = reps.first() else {
        return Vec::new();
    };
    (0..first.outcomes.len())
        .map(|j| {
            let estimator = first.outcomes[j].estimator;
            let ok: Vec<Metrics> = reps.iter().filter_map(|r| r.outcomes[j].result.clone().ok()).collect();
            let failures = reps.len() - ok.len();
            let k = ok.len() as f64;
            let mean = |f: &dyn Fn(&Metrics) -> f64| (!ok.is_empty()).then(|| ok.iter().map(f).sum::<f64>() / k);
            let (label, beta) = match estimator {
                Estimator::Vi { beta } => ("vi-ls", Some(beta)),
                Estimator::Ml => ("ml", None),
            };
            SummaryRow {
                omega: cell.omega,
                n: cell.dims.n(),
                t: cell.dims.t(),
                r: cell.dims.r(),
                p: cell.dims.p(),
                estimator: label.into(),
                beta,
                replications: ok.len(),
                failures,
                p_z: if beta.is_some() { mean(&|o| o.p_z) } else { None },
                e_lambda: mean(&|o| o.e_lambda),
                p_f: mean(&|o| o.p_f),
            }
        })
        .collect()
}

/// Runs every cell and returns one summary row per (cell, estimator).
pub fn run_study(cfg: &StudyConfig, fit: &FitConfig) -> Result<Vec<SummaryRow>> {
    let fits = cfg.check()?;
    let cells = cfg.cells()?;
    info!(
        "study: {} cells x {} replications, {fits} fits, root seed {}",
        cells.len(),
        cfg.replications,
        cfg.seed
    );
    let mut rows = Vec::new();
    for cell in cells {
        let reps: Vec<Replication> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| {
                run_replication(cfg, cell, rep, fit).unwrap_or_else(|e| Replication {
                    replication: rep,
                    outcomes: estimators(cfg)
                        .into_iter()
                        .map(|estimator| FitOutcome {
                            estimator,
                            result: Err(e.to_string()),
                        })
                        .collect(),
                })
            })
            .collect();
        for r in &reps {
            for o in &r.outcomes {
                if let Err(e) = &o.result {
                    warn!("replication {} {:?} failed: {e}", r.replication, o.estimator);
                }
            }
        }
        let summary = summarize(cell, &reps);
        for row in &summary {
            info!(
                "omega={} n={} T={} r={} p={} {} beta={:?}: P_Z={:?} E_L={:?} P_F={:?} ({} ok, {} failed)",
                row.omega, row.n, row.t, row.r, row.p, row.estimator, row.beta, row.p_z, row.e_lambda, row.p_f, row.replications, row.failures
            );
        }
        rows.extend(summary);
    }
    Ok(rows)
}

fn estimators(cfg: &StudyConfig) -> Vec<Estimator> {
    let mut v = Vec::new();
    if cfg.ml {
        v.push(Estimator::Ml);
    }
    v.extend(cfg.beta.iter().map(|&beta| Estimator::Vi { beta }));
    v
}

pub fn write_summary(w: &mut dyn Write, rows: &[SummaryRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_atomic(path, |w| write_summary(w, rows))
}
