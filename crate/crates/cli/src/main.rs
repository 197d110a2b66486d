//! `vidfm`: fit, simulate and evaluate sparse dynamic factor models from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use serde::Serialize;
use vidfm::em::{run_em, EmConfig};
use vidfm::evaluate::{align, evaluate, Metrics};
use vidfm::fit::{fit, FitConfig, InitMethod, DECREASE_TOL};
use vidfm::io::{self, LabeledPanel, SavedFit, TruthFile};
use vidfm::kalman::{build_collapsed_system, smooth};
use vidfm::simulate::{simulate_dfm, MissingPattern, SimConfig};
use vidfm::study::{run_study, write_summary_csv, StudyConfig};
use vidfm::{validate, Error, ModelDims, PriorConfig, PriorSpec, Result};

#[derive(Parser, Debug)]
#[command(name = "vidfm", version, about = "Variational inference for sparse dynamic factor models")]
struct Cli {
    /// Worker threads for the parallel phases (default: all cores).
    #[arg(long, global = true, env = "VIDFM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the variational model with loading selection to a panel CSV.
    Fit(FitArgs),
    /// Fit the maximum-likelihood baseline by EM.
    Em(EmArgs),
    /// Simulate a panel and write it with its ground truth.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study and write a summary table.
    Study(StudyArgs),
    /// Write plot-ready tables from a saved fit.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Panel CSV: header row, time index in the first column, empty cells missing.
    #[arg(long, short)]
    input: PathBuf,
    /// Output directory (created if absent).
    #[arg(long, short)]
    out: PathBuf,
    /// Number of factors.
    #[arg(short, long = "factors", default_value_t = 1)]
    r: usize,
    /// Number of factor lags in the loadings.
    #[arg(short, long = "lags", default_value_t = 0)]
    p: usize,
    /// Also read NA, NaN and "." as missing.
    #[arg(long)]
    lenient: bool,
    /// Recorded in the run log; fitting itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Convergence threshold on the relative change of the objective.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Restart with all selectors switched on until the bound stops improving.
    #[arg(long, overrides_with = "no_rerun")]
    rerun: bool,
    #[arg(long, overrides_with = "rerun")]
    no_rerun: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Prior hyperparameters (TOML); unset keys keep their defaults.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Prior inclusion probability for every loading (overrides the prior file).
    #[arg(long)]
    beta: Option<f64>,
    /// Starting point: `pca`, `pca-em`, or a saved state file.
    #[arg(long, default_value = "pca-em")]
    init: String,
}

#[derive(Args, Debug)]
struct EmArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Starting point; only principal components are available.
    #[arg(long, default_value = "pca")]
    init: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pattern {
    None,
    Experiment2,
}

impl From<Pattern> for MissingPattern {
    fn from(p: Pattern) -> Self {
        match p {
            Pattern::None => MissingPattern::None,
            Pattern::Experiment2 => MissingPattern::Experiment2,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(short, long)]
    n: usize,
    #[arg(short, long)]
    t: usize,
    #[arg(short, long = "factors", default_value_t = 1)]
    r: usize,
    #[arg(short, long = "lags", default_value_t = 0)]
    p: usize,
    /// Share of included loadings.
    #[arg(long, default_value_t = 0.2)]
    omega: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    replication: u64,
    #[arg(long, value_enum, default_value = "none")]
    pattern: Pattern,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long, short)]
    out: PathBuf,
    /// Named grid (table1-smallest, experiment1, experiment2).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Grid file (TOML); unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    replications: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    run: RunArgs,
    /// Variational starting point: `pca` or `pca-em`.
    #[arg(long, default_value = "pca-em")]
    init: String,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// State file written by `fit`.
    #[arg(long)]
    state: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Truth sidecar written by `simulate`; adds the true pattern and accuracy statistics.
    #[arg(long, requires = "input")]
    truth: Option<PathBuf>,
    /// The fitted panel, needed to align factors with the truth.
    #[arg(long, short)]
    input: Option<PathBuf>,
    #[arg(long)]
    lenient: bool,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            error!("--threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Em(a) => cmd_em(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Study(a) => cmd_study(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn apply_run_args(cfg: &mut FitConfig, run: &RunArgs) {
    if let Some(t) = run.tol {
        cfg.tol = t;
    }
    if let Some(m) = run.max_iter {
        cfg.max_iter = m;
    }
    if run.rerun {
        cfg.rerun = true;
    }
    if run.no_rerun {
        cfg.rerun = false;
    }
}

fn read_input(data: &DataArgs) -> Result<(LabeledPanel, ModelDims)> {
    let lp = io::read_panel_csv(&data.input, !data.lenient)?;
    let dims = ModelDims::new(lp.panel.n(), lp.panel.t(), data.r, data.p)?;
    info!(
        "read {}: n={} T={} ({} of {} cells observed), seed {}",
        data.input.display(),
        dims.n(),
        dims.t(),
        lp.panel.mask().total_count(),
        dims.n() * dims.t(),
        data.seed
    );
    Ok((lp, dims))
}

fn write_csv(path: PathBuf, write: impl FnOnce(&mut dyn std::io::Write) -> Result<()>) -> Result<()> {
    io::write_atomic(&path, write)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let (lp, dims) = read_input(&a.data)?;
    let mut prior_cfg: PriorConfig = match &a.prior {
        Some(path) => io::read_toml(path)?,
        None => PriorConfig::default(),
    };
    if let Some(b) = a.beta {
        prior_cfg.beta = b;
    }
    let prior = PriorSpec::homogeneous(dims, &prior_cfg);
    let mut cfg = FitConfig::default();
    apply_run_args(&mut cfg, &a.run);
    cfg.init = match a.init.as_str() {
        "pca" => InitMethod::Pca,
        "pca-em" => InitMethod::PcaEm,
        path => {
            let saved = io::load_state(Path::new(path))?;
            if saved.dims != dims {
                return Err(Error::Config(format!("{path} was fitted with {:?}, the data give {dims:?}", saved.dims)));
            }
            InitMethod::State(Box::new(saved.state))
        }
    };
    cfg.check()?;
    out_dir(&a.data.out)?;

    let (report, st) = match fit(&lp.panel, dims, prior.clone(), &cfg) {
        Ok(v) => v,
        Err(Error::ElboDecrease { sweep, previous, current, state }) => {
            // keep the offending state for diagnosis
            let saved = SavedFit {
                dims,
                prior,
                state: *state,
                elbo_trace: Vec::new(),
                standardization: None,
                names: Some(lp.names.clone()),
            };
            let path = a.data.out.join("failed_state.json");
            io::save_state(&path, &saved)?;
            warn!("state at the failing sweep saved to {}", path.display());
            return Err(Error::ElboDecrease {
                sweep,
                previous,
                current,
                state: Box::new(saved.state),
            });
        }
        Err(e) => return Err(e),
    };
    if !report.converged {
        warn!(
            "no convergence after {} sweeps (relative change above {:e}; decreases up to {DECREASE_TOL:e} tolerated)",
            report.sweeps, cfg.tol
        );
    }
    info!(
        "elbo {:.6} after {} sweeps, {} restarts, {:.2}s",
        report.elbo(),
        report.sweeps,
        report.reruns,
        report.wall_time
    );
    let saved = SavedFit {
        dims,
        prior,
        state: report.state.clone(),
        elbo_trace: report.elbo_trace.clone(),
        standardization: Some(st.clone()),
        names: Some(lp.names.clone()),
    };
    let out = &a.data.out;
    io::save_state(&out.join("state.json"), &saved)?;
    info!("wrote {}", out.join("state.json").display());
    write_csv(out.join("factors.csv"), |w| io::write_series(w, "f", &report.factors()))?;
    write_csv(out.join("elbo.csv"), |w| io::write_elbo_trace(w, &report.elbo_trace))?;
    write_csv(out.join("loadings.csv"), |w| io::write_loadings(w, &lp.names, &report.state, Some(&st)))?;
    write_csv(out.join("inclusion.csv"), |w| io::write_inclusion(w, &report.state.inclusion, None))?;
    println!(
        "elbo={:.6} sweeps={} reruns={} converged={}",
        report.elbo(),
        report.sweeps,
        report.reruns,
        report.converged
    );
    Ok(())
}

#[derive(Serialize)]
struct EmOutput<'a> {
    dims: ModelDims,
    converged: bool,
    iterations: usize,
    loglik: f64,
    loglik_trace: &'a [f64],
    loadings: Vec<Vec<f64>>,
    idio: Vec<f64>,
    transition: Vec<Vec<f64>>,
    names: &'a [String],
    standardization: &'a vidfm::Standardization,
}

fn cmd_em(a: EmArgs) -> Result<()> {
    if a.init != "pca" {
        return Err(Error::Config(format!("EM starts from principal components only, got --init {}", a.init)));
    }
    let (lp, dims) = read_input(&a.data)?;
    let cfg = EmConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        ..EmConfig::default()
    };
    out_dir(&a.data.out)?;
    let (panel, st) = lp.panel.standardized()?;
    let report = run_em(&panel, dims, &cfg)?;
    let ll = *report.loglik_trace.last().expect("at least one evaluation");
    if !report.converged {
        warn!("EM stopped after {} iterations without converging", report.iterations);
    }
    let output = EmOutput {
        dims,
        converged: report.converged,
        iterations: report.iterations,
        loglik: ll,
        loglik_trace: &report.loglik_trace,
        loadings: io::matrix_rows(&report.params.loadings),
        idio: report.params.idio.iter().copied().collect(),
        transition: io::matrix_rows(&report.params.transition),
        names: &lp.names,
        standardization: &st,
    };
    let text = serde_json::to_string_pretty(&output).map_err(Error::Json)? + "\n";
    let path = a.data.out.join("em.json");
    io::write_atomic(&path, |w| Ok(w.write_all(text.as_bytes())?))?;
    info!("wrote {}", path.display());
    write_csv(a.data.out.join("factors.csv"), |w| io::write_series(w, "f", &report.moments.factor_means(dims.r())))?;
    println!("loglik={ll:.6} iterations={} converged={}", report.iterations, report.converged);
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let dims = ModelDims::new(a.n, a.t, a.r, a.p)?;
    let cfg = SimConfig {
        dims,
        omega: a.omega,
        seed: a.seed,
        replication: a.replication,
        pattern: a.pattern.into(),
    };
    info!("simulating {dims:?} with omega {} from seed {} replication {}", a.omega, a.seed, a.replication);
    let (panel, truth) = simulate_dfm(&cfg)?;
    out_dir(&a.out)?;
    io::write_panel_csv(&a.out.join("panel.csv"), &LabeledPanel::unlabeled(panel))?;
    io::save_truth(&a.out.join("truth.json"), &TruthFile::new(dims, a.omega, a.seed, a.replication, &truth))?;
    info!("wrote {} and {}", a.out.join("panel.csv").display(), a.out.join("truth.json").display());
    Ok(())
}

fn cmd_study(a: StudyArgs) -> Result<()> {
    let mut cfg = match (&a.preset, &a.config) {
        (Some(name), _) => StudyConfig::preset(name)?,
        (None, Some(path)) => io::read_toml(path)?,
        (None, None) => StudyConfig::default(),
    };
    if let Some(k) = a.replications {
        cfg.replications = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut fit_cfg = FitConfig::default();
    apply_run_args(&mut fit_cfg, &a.run);
    fit_cfg.init = match a.init.as_str() {
        "pca" => InitMethod::Pca,
        "pca-em" => InitMethod::PcaEm,
        other => return Err(Error::Config(format!("study --init must be pca or pca-em, got {other}"))),
    };
    fit_cfg.check()?;
    let fits = cfg.check()?;
    info!("{} cells, {} replications each, {fits} fits in total", cfg.cells()?.len(), cfg.replications);
    out_dir(&a.out)?;
    let rows = run_study(&cfg, &fit_cfg)?;
    let path = a.out.join("summary.csv");
    write_summary_csv(&path, &rows)?;
    info!("wrote {}", path.display());
    let failures: usize = rows.iter().map(|r| r.failures).sum();
    if failures > 0 {
        warn!("{failures} fits failed and were left out of the means");
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let saved = io::load_state(&a.state)?;
    let names = saved
        .names
        .clone()
        .unwrap_or_else(|| (1..=saved.dims.n()).map(|i| format!("y{i}")).collect());
    out_dir(&a.out)?;
    write_csv(a.out.join("elbo.csv"), |w| io::write_elbo_trace(w, &saved.elbo_trace))?;
    write_csv(a.out.join("loadings.csv"), |w| io::write_loadings(w, &names, &saved.state, saved.standardization.as_ref()))?;

    let Some(truth_path) = &a.truth else {
        return write_csv(a.out.join("inclusion.csv"), |w| io::write_inclusion(w, &saved.state.inclusion, None));
    };
    let truth = io::load_truth(truth_path)?.truth()?;
    let input = a.input.as_ref().expect("clap requires --input with --truth");
    let lp = io::read_panel_csv(input, !a.lenient)?;
    let d = saved.dims;
    if truth.loadings.shape() != (d.n(), d.s()) || lp.panel.n() != d.n() || lp.panel.t() != d.t() {
        return Err(Error::Config("state, panel and truth have different dimensions".into()));
    }
    let (panel, st) = lp.panel.standardized()?;
    let ctx = validate(d, panel, saved.prior.clone())?;
    let (moments, _) = smooth(&build_collapsed_system(&ctx, &saved.state)?, &ctx.panel)?;
    let factors = moments.factor_means(d.r());
    let al = align(&factors, &truth.dynamic_factors(d.r()))?;
    let aligned_b = al.apply_inclusion(&saved.state.inclusion);
    write_csv(a.out.join("inclusion.csv"), |w| io::write_inclusion(w, &aligned_b, Some(&truth.inclusion)))?;
    let metrics: Metrics = evaluate(
        &saved.state.effective_loadings(),
        &saved.state.inclusion,
        &factors,
        &truth.loadings,
        &truth.inclusion,
        &truth.dynamic_factors(d.r()),
        st.sd.as_slice(),
    )?;
    let text = serde_json::to_string_pretty(&metrics).map_err(Error::Json)? + "\n";
    io::write_atomic(&a.out.join("metrics.json"), |w| Ok(w.write_all(text.as_bytes())?))?;
    println!("p_z={:.4} e_lambda={:.4} p_f={:.4}", metrics.p_z, metrics.e_lambda, metrics.p_f);
    Ok(())
}
