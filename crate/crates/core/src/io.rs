//! Files: panel CSVs, fitted-state JSON, simulation truth, and plot-data exports.
//!
//! Panel CSV layout: a header row whose first cell names the time index and
//! whose remaining cells name the variables, then one row per period. Empty
//! cells are missing. Every writer goes through [`write_atomic`].

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::elbo::ElboBreakdown;
use crate::error::{Error, Result};
use crate::simulate::SimTruth;
use crate::types::{validate, AvailabilityMask, ModelDims, Panel, PriorSpec, RegressionPrior, Standardization, VariationalState};

/// Identifies state files written by this crate.
pub const STATE_FORMAT: &str = "vidfm-state";
pub const STATE_VERSION: u32 = 1;
pub const TRUTH_FORMAT: &str = "vidfm-truth";

/// Writes through a temporary file in the target directory, then renames it into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// A panel with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPanel {
    pub index_name: String,
    pub index: Vec<String>,
    pub names: Vec<String>,
    pub panel: Panel,
}

impl LabeledPanel {
    /// Default labels: `t` with 1-based periods, variables `y1..yn`.
    pub fn unlabeled(panel: Panel) -> Self {
        Self {
            index_name: "t".into(),
            index: (1..=panel.t()).map(|t| t.to_string()).collect(),
            names: (1..=panel.n()).map(|i| format!("y{i}")).collect(),
            panel,
        }
    }
}

/// Tokens read as missing when not in strict mode.
const MISSING_TOKENS: [&str; 5] = ["NA", "N/A", "NaN", "nan", "."];

fn parse_error(row: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column,
        message: message.into(),
    }
}

/// Parses a panel CSV. Rows and columns in errors are 1-based file positions.
///
/// In strict mode only empty cells are missing; otherwise the common
/// not-available tokens are accepted too.
pub fn read_panel(reader: impl Read, strict: bool) -> Result<LabeledPanel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(parse_error(1, 1, "file is empty")),
    };
    if header.len() < 2 {
        return Err(parse_error(1, header.len().max(1), "need a time index column and at least one variable"));
    }
    let index_name = header[0].trim().to_string();
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = names.len();

    let mut index = Vec::new();
    let mut seen = HashSet::new();
    let mut cols: Vec<Vec<Option<f64>>> = Vec::new();
    for (k, rec) in records.enumerate() {
        let row = k + 2;
        let rec = rec?;
        if rec.len() != n + 1 {
            return Err(parse_error(row, rec.len().min(n + 1), format!("expected {} fields, found {}", n + 1, rec.len())));
        }
        let label = rec[0].trim().to_string();
        if !seen.insert(label.clone()) {
            return Err(parse_error(row, 1, format!("duplicate time index '{label}'")));
        }
        index.push(label);
        let mut period = Vec::with_capacity(n);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            let value = if cell.is_empty() || (!strict && MISSING_TOKENS.contains(&cell)) {
                None
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_error(row, j + 2, format!("'{cell}' in variable '{}' is not a number", names[j])))?;
                if !v.is_finite() {
                    return Err(parse_error(row, j + 2, format!("non-finite value '{cell}'")));
                }
                Some(v)
            };
            period.push(value);
        }
        cols.push(period);
    }
    if cols.is_empty() {
        return Err(parse_error(2, 1, "no data rows"));
    }
    let rows: Vec<Vec<Option<f64>>> = (0..n).map(|i| cols.iter().map(|p| p[i]).collect()).collect();
    for (i, r) in rows.iter().enumerate() {
        if r.iter().all(Option::is_none) {
            warn!("variable '{}' has no observations; it is kept and will carry prior-only estimates", names[i]);
        }
    }
    Ok(LabeledPanel {
        index_name,
        index,
        names,
        panel: Panel::from_options(&rows)?,
    })
}

pub fn read_panel_csv(path: &Path, strict: bool) -> Result<LabeledPanel> {
    read_panel(fs::File::open(path)?, strict)
}

/// Writes in the layout [`read_panel`] expects; values use shortest round-trip formatting.
pub fn write_panel(w: &mut dyn Write, data: &LabeledPanel) -> Result<()> {
    let p = &data.panel;
    if data.names.len() != p.n() || data.index.len() != p.t() {
        return Err(Error::Dimension("labels do not match the panel".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![data.index_name.clone()];
    header.extend(data.names.iter().cloned());
    wtr.write_record(&header)?;
    for t in 0..p.t() {
        let mut rec = vec![data.index[t].clone()];
        rec.extend((0..p.n()).map(|i| p.get(i, t).map(|v| v.to_string()).unwrap_or_default()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_panel_csv(path: &Path, data: &LabeledPanel) -> Result<()> {
    write_atomic(path, |w| write_panel(w, data))
}

/// Row-major nested vectors, the layout used in every JSON file.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Schema(format!("{what}: rows must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn square(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    from_rows(rows, rows.len(), what)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressionPriorFile {
    shrinkage: Vec<Vec<f64>>,
    nu: f64,
    tau2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorFile {
    v_f0: Vec<Vec<f64>>,
    loadings: Vec<RegressionPriorFile>,
    transition: Vec<RegressionPriorFile>,
    inclusion: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateBody {
    loading_mean: Vec<Vec<f64>>,
    loading_cov: Vec<Vec<Vec<f64>>>,
    eps_scale: Vec<f64>,
    transition_mean: Vec<Vec<f64>>,
    transition_cov: Vec<Vec<Vec<f64>>>,
    innov_scale: Vec<f64>,
    inclusion: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    format: String,
    version: u32,
    dims: ModelDims,
    prior: PriorFile,
    state: StateBody,
    elbo_trace: Vec<ElboBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standardization: Option<Standardization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

/// Everything persisted about one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedFit {
    pub dims: ModelDims,
    pub prior: PriorSpec,
    pub state: VariationalState,
    pub elbo_trace: Vec<ElboBreakdown>,
    /// Scaling applied to the raw panel before fitting, if any.
    pub standardization: Option<Standardization>,
    pub names: Option<Vec<String>>,
}

fn regression_prior_file(p: &RegressionPrior) -> RegressionPriorFile {
    RegressionPriorFile {
        shrinkage: matrix_rows(&p.shrinkage),
        nu: p.nu,
        tau2: p.tau2,
    }
}

fn regression_prior(f: &RegressionPriorFile, what: &str) -> Result<RegressionPrior> {
    Ok(RegressionPrior {
        shrinkage: square(&f.shrinkage, what)?,
        nu: f.nu,
        tau2: f.tau2,
    })
}

fn encode(fit: &SavedFit) -> StateFile {
    let st = &fit.state;
    StateFile {
        format: STATE_FORMAT.into(),
        version: STATE_VERSION,
        dims: fit.dims,
        prior: PriorFile {
            v_f0: matrix_rows(&fit.prior.v_f0),
            loadings: fit.prior.loadings.iter().map(regression_prior_file).collect(),
            transition: fit.prior.transition.iter().map(regression_prior_file).collect(),
            inclusion: matrix_rows(&fit.prior.inclusion),
        },
        state: StateBody {
            loading_mean: matrix_rows(&st.loading_mean),
            loading_cov: st.loading_cov.iter().map(matrix_rows).collect(),
            eps_scale: st.eps_scale.iter().copied().collect(),
            transition_mean: matrix_rows(&st.transition_mean),
            transition_cov: st.transition_cov.iter().map(matrix_rows).collect(),
            innov_scale: st.innov_scale.iter().copied().collect(),
            inclusion: matrix_rows(&st.inclusion),
        },
        elbo_trace: fit.elbo_trace.clone(),
        standardization: fit.standardization.clone(),
        names: fit.names.clone(),
    }
}

fn decode(file: StateFile) -> Result<SavedFit> {
    if file.format != STATE_FORMAT {
        return Err(Error::Schema(format!("format is '{}', expected '{STATE_FORMAT}'", file.format)));
    }
    if file.version != STATE_VERSION {
        return Err(Error::Schema(format!("version {} is not supported (expected {STATE_VERSION})", file.version)));
    }
    let d = file.dims;
    let (n, s) = (d.n(), d.s());
    let p = &file.prior;
    let prior = PriorSpec {
        v_f0: square(&p.v_f0, "prior.v_f0")?,
        loadings: p.loadings.iter().map(|l| regression_prior(l, "prior.loadings")).collect::<Result<_>>()?,
        transition: p.transition.iter().map(|l| regression_prior(l, "prior.transition")).collect::<Result<_>>()?,
        inclusion: from_rows(&p.inclusion, s, "prior.inclusion")?,
    };
    let b = &file.state;
    let state = VariationalState {
        loading_mean: from_rows(&b.loading_mean, s, "state.loading_mean")?,
        loading_cov: b.loading_cov.iter().map(|m| square(m, "state.loading_cov")).collect::<Result<_>>()?,
        eps_scale: DVector::from_vec(b.eps_scale.clone()),
        transition_mean: from_rows(&b.transition_mean, s, "state.transition_mean")?,
        transition_cov: b.transition_cov.iter().map(|m| square(m, "state.transition_cov")).collect::<Result<_>>()?,
        innov_scale: DVector::from_vec(b.innov_scale.clone()),
        inclusion: from_rows(&b.inclusion, s, "state.inclusion")?,
    };
    state.check(d)?;
    // the prior is checked against an empty panel of the right shape
    let empty = Panel::new(DMatrix::zeros(n, d.t()), AvailabilityMask::empty(n, d.t()))?;
    validate(d, empty, prior.clone())?;
    if let Some(st) = &file.standardization {
        if st.mean.len() != n || st.sd.len() != n {
            return Err(Error::Schema("standardization does not match n".into()));
        }
    }
    if let Some(names) = &file.names {
        if names.len() != n {
            return Err(Error::Schema("names do not match n".into()));
        }
    }
    Ok(SavedFit {
        dims: d,
        prior,
        state,
        elbo_trace: file.elbo_trace,
        standardization: file.standardization,
        names: file.names,
    })
}

pub fn state_to_string(fit: &SavedFit) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&encode(fit))?;
    s.push('\n');
    Ok(s)
}

/// Parses and validates a state file's contents.
pub fn state_from_str(text: &str) -> Result<SavedFit> {
    decode(serde_json::from_str(text)?)
}

pub fn save_state(path: &Path, fit: &SavedFit) -> Result<()> {
    let text = state_to_string(fit)?;
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub fn load_state(path: &Path) -> Result<SavedFit> {
    state_from_str(&fs::read_to_string(path)?)
}

/// Simulation truth sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub format: String,
    pub dims: ModelDims,
    pub omega: f64,
    pub seed: u64,
    pub replication: u64,
    pub loadings: Vec<Vec<f64>>,
    pub inclusion: Vec<Vec<f64>>,
    pub ar: Vec<f64>,
    pub xi: Vec<f64>,
    pub eps_var: Vec<f64>,
    /// Stacked state path, one row per period.
    pub factors: Vec<Vec<f64>>,
}

impl TruthFile {
    pub fn new(dims: ModelDims, omega: f64, seed: u64, replication: u64, truth: &SimTruth) -> Self {
        Self {
            format: TRUTH_FORMAT.into(),
            dims,
            omega,
            seed,
            replication,
            loadings: matrix_rows(&truth.loadings),
            inclusion: matrix_rows(&truth.inclusion),
            ar: truth.ar.iter().copied().collect(),
            xi: truth.xi.iter().copied().collect(),
            eps_var: truth.eps_var.iter().copied().collect(),
            factors: matrix_rows(&truth.factors),
        }
    }

    pub fn truth(&self) -> Result<SimTruth> {
        let s = self.dims.s();
        let t = SimTruth {
            loadings: from_rows(&self.loadings, s, "loadings")?,
            inclusion: from_rows(&self.inclusion, s, "inclusion")?,
            ar: DVector::from_vec(self.ar.clone()),
            xi: DVector::from_vec(self.xi.clone()),
            eps_var: DVector::from_vec(self.eps_var.clone()),
            factors: from_rows(&self.factors, s, "factors")?,
        };
        if t.loadings.nrows() != self.dims.n() || t.factors.nrows() != self.dims.t() || t.ar.len() != self.dims.r() {
            return Err(Error::Schema("truth does not match its dimensions".into()));
        }
        Ok(t)
    }
}

pub fn save_truth(path: &Path, truth: &TruthFile) -> Result<()> {
    let mut text = serde_json::to_string_pretty(truth)?;
    text.push('\n');
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub fn load_truth(path: &Path) -> Result<TruthFile> {
    let t: TruthFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if t.format != TRUTH_FORMAT {
        return Err(Error::Schema(format!("format is '{}', expected '{TRUTH_FORMAT}'", t.format)));
    }
    t.truth()?;
    Ok(t)
}

/// Parses a TOML configuration file (prior or study settings).
pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(toml::from_str(&fs::read_to_string(path)?)?)
}

/// Long-format loading table: `variable,i,k,mean,b,effective` plus
/// `effective_raw` in data units when a standardization is given.
pub fn write_loadings(
    w: &mut dyn Write,
    names: &[String],
    state: &VariationalState,
    standardization: Option<&Standardization>,
) -> Result<()> {
    let (n, s) = state.loading_mean.shape();
    if names.len() != n {
        return Err(Error::Dimension("names do not match the loadings".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["variable", "i", "k", "mean", "b", "effective"];
    if standardization.is_some() {
        header.push("effective_raw");
    }
    wtr.write_record(&header)?;
    let eff = state.effective_loadings();
    for i in 0..n {
        for k in 0..s {
            let mut rec = vec![
                names[i].clone(),
                (i + 1).to_string(),
                (k + 1).to_string(),
                state.loading_mean[(i, k)].to_string(),
                state.inclusion[(i, k)].to_string(),
                eff[(i, k)].to_string(),
            ];
            if let Some(st) = standardization {
                rec.push((eff[(i, k)] * st.sd[i]).to_string());
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Long-format inclusion table `i,k,b,z_true` with 1-based indices; `z_true` is empty without truth.
pub fn write_inclusion(w: &mut dyn Write, inclusion: &DMatrix<f64>, truth: Option<&DMatrix<f64>>) -> Result<()> {
    if let Some(z) = truth {
        if z.shape() != inclusion.shape() {
            return Err(Error::Dimension("truth and inclusion differ in shape".into()));
        }
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["i", "k", "b", "z_true"])?;
    for i in 0..inclusion.nrows() {
        for k in 0..inclusion.ncols() {
            let z = truth.map(|z| z[(i, k)].to_string()).unwrap_or_default();
            wtr.write_record([(i + 1).to_string(), (k + 1).to_string(), inclusion[(i, k)].to_string(), z])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// One row per sweep with the bound and its groups.
pub fn write_elbo_trace(w: &mut dyn Write, trace: &[ElboBreakdown]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["sweep", "total", "f_terms", "lambda_terms", "phi_terms", "sigma_eps_terms", "sigma_u_terms", "z_terms"])?;
    for (k, e) in trace.iter().enumerate() {
        let vals = [e.total, e.f_terms, e.lambda_terms, e.phi_terms, e.sigma_eps_terms, e.sigma_u_terms, e.z_terms];
        let mut rec = vec![(k + 1).to_string()];
        rec.extend(vals.iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Column-labelled matrix, one row per period: `t,<prefix>1..`.
pub fn write_series(w: &mut dyn Write, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=m.ncols()).map(|j| format!("{prefix}{j}")));
    wtr.write_record(&header)?;
    for t in 0..m.nrows() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(m.row(t).iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
