//! Acceptance criteria 1-9. Each test prints one PASS/FAIL line; run with
//! `cargo test -p vidfm-core --test acceptance -- --nocapture --test-threads 1`
//! to see them in order.

mod common;

use std::sync::OnceLock;

use common::*;
use nalgebra::{DMatrix, DVector};
use vidfm::em::{run_em, EmConfig};
use vidfm::evaluate::{align, factor_precision, inclusion_accuracy, loading_rmse, Alignment};
use vidfm::fit::{fit, full_inclusion, initialize, prepare, run_vi, FitConfig, InitMethod};
use vidfm::kalman::{build_collapsed_system, smooth};
use vidfm::simulate::{simulate_dfm, MissingPattern, SimConfig};
use vidfm::study::{run_replication, run_study, Estimator, StudyConfig, SummaryRow};
use vidfm::{AvailabilityMask, ModelDims, Panel, PriorSpec, RegressionPrior, SmoothedMoments};

fn verdict(id: &str, what: &str, ok: bool, detail: String) {
    println!("{} criterion {id}: {what} [{detail}]", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} failed: {detail}");
}

/// Heterogeneous prior with SPD shrinkage matrices and some dogmatic selectors.
fn random_prior(dims: ModelDims, seed: u64) -> PriorSpec {
    let mut g = rng(seed);
    let (n, r, s) = (dims.n(), dims.r(), dims.s());
    let reg = |g: &mut _| RegressionPrior {
        shrinkage: random_spd(g, s, 1.5),
        nu: 0.5 + normal(g).abs(),
        tau2: 0.2 + normal(g).abs(),
    };
    let loadings = (0..n).map(|_| reg(&mut g)).collect();
    let transition = (0..r).map(|_| reg(&mut g)).collect();
    let inclusion = DMatrix::from_fn(n, s, |i, k| match (i + k) % 5 {
        0 => 0.0,
        1 => 1.0,
        _ => 0.05 + 0.9 * (0.5 + 0.5 * (normal(&mut g) / 3.0).tanh()),
    });
    PriorSpec {
        v_f0: random_spd(&mut g, s, 1.0),
        loadings,
        transition,
        inclusion,
    }
}

#[test]
fn criterion_1_prior_reduction() {
    let mut worst: f64 = 0.0;
    for (case, (n, t, r, p)) in [(3, 5, 1, 0), (4, 6, 2, 1), (5, 4, 1, 2)].into_iter().enumerate() {
        let dims = ModelDims::new(n, t, r, p).unwrap();
        let prior = random_prior(dims, 10 + case as u64);
        let mut g = rng(20 + case as u64);
        // variable 0 is never observed; the others are, partially
        let y = DMatrix::from_fn(n, t, |_, _| normal(&mut g));
        let mut partial = AvailabilityMask::full(n, t);
        for tt in 0..t {
            partial.set(0, tt, false);
        }
        for panel in [
            Panel::new(y.clone(), AvailabilityMask::empty(n, t)).unwrap(),
            Panel::new(y.clone(), partial).unwrap(),
        ] {
            let unobserved: Vec<usize> = (0..n).filter(|&i| panel.count(i) == 0).collect();
            for init in [InitMethod::Pca, InitMethod::PcaEm] {
                let cfg = FitConfig { init, ..FitConfig::default() };
                let (report, _) = fit(&panel, dims, prior.clone(), &cfg).unwrap();
                let st = &report.state;
                for &i in &unobserved {
                    worst = worst.max(st.loading_mean.row(i).abs().max());
                    worst = worst.max(max_abs_diff(&st.loading_cov[i], &prior.loadings[i].shrinkage));
                    worst = worst.max((st.eps_scale[i] - prior.loadings[i].tau2).abs());
                    for k in 0..dims.s() {
                        worst = worst.max((st.inclusion[(i, k)] - prior.inclusion[(i, k)]).abs());
                    }
                }
            }
        }
    }
    verdict("1", "unobserved variables keep their prior", worst <= 1e-12, format!("max deviation {worst:e}"));
}

fn centered(m: &SmoothedMoments) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let cov = m.mean.iter().zip(&m.second).map(|(mu, v)| v - mu * mu.transpose()).collect();
    let cross = (1..m.mean.len())
        .map(|t| &m.cross[t - 1] - &m.mean[t] * m.mean[t - 1].transpose())
        .collect();
    (cov, cross)
}

#[test]
fn criterion_2_smoother_oracle() {
    let (mut dense_err, mut path_err): (f64, f64) = (0.0, 0.0);
    for seed in 1000..1025 {
        let (ctx, state) = random_problem(seed, 3, 4);
        let sys = build_collapsed_system(&ctx, &state).unwrap();
        let (m, _) = smooth(&sys, &ctx.panel).unwrap();
        let model = explicit_model(&ctx, &state);
        let oracle = dense_oracle(&model);
        let (cov, cross) = centered(&m);
        dense_err = dense_err.max(compare(&oracle, &m.mean, &cov, &cross));

        let unc = covariance_filter(&model, &uncollapsed_observations(&model));
        let s = ctx.dims.s();
        let collapsed: Vec<_> = (1..=ctx.dims.t())
            .map(|t| {
                let (y, h) = sys.collapsed_observation(t);
                (DMatrix::identity(s, s), y, h)
            })
            .collect();
        let col = covariance_filter(&model, &collapsed);
        path_err = path_err.max(compare(&unc, &col.mean, &col.cov, &col.cross_cov));
    }
    verdict(
        "2",
        "smoother matches dense conditioning; collapsed and uncollapsed paths agree",
        dense_err < 1e-8 && path_err < 1e-8,
        format!("dense {dense_err:e}, paths {path_err:e}"),
    );
}

#[test]
fn criterion_3_elbo_monotone() {
    let dims = ModelDims::new(50, 100, 1, 0).unwrap();
    let omegas = [0.2, 0.5, 1.0];
    let mut worst = f64::INFINITY;
    let mut runs = 0;
    let mut errors = Vec::new();
    for k in 0..20u64 {
        let cfg = SimConfig {
            dims,
            omega: omegas[k as usize % 3],
            seed: 2024,
            replication: k,
            pattern: MissingPattern::None,
        };
        let (raw, _) = simulate_dfm(&cfg).unwrap();
        let (ctx, _) = prepare(&raw, dims, PriorSpec::standard(dims, 0.2)).unwrap();
        let fit_cfg = FitConfig::default();
        let init = initialize(&ctx, &fit_cfg.init, &fit_cfg.em).unwrap();
        // the first run and one full-inclusion restart, each checked sweep by sweep
        let first = match run_vi(&ctx, &fit_cfg, init) {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("seed {k}: {e}"));
                continue;
            }
        };
        let mut restart = first.state.clone();
        restart.inclusion = full_inclusion(&ctx);
        let second = match run_vi(&ctx, &fit_cfg, restart) {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("seed {k} restart: {e}"));
                continue;
            }
        };
        for report in [&first, &second] {
            runs += 1;
            for w in report.elbo_trace.windows(2) {
                worst = worst.min((w[1].total - w[0].total) / (w[0].total.abs() + 1.0));
            }
        }
    }
    verdict(
        "3",
        "bound never drops by more than 1e-6 relative",
        errors.is_empty() && worst >= -1e-6,
        format!("{runs} runs, worst relative change {worst:e}, errors {errors:?}"),
    );
}

fn smallest_cell() -> &'static (SummaryRow, SummaryRow) {
    static CELL: OnceLock<(SummaryRow, SummaryRow)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = StudyConfig::preset("table1-smallest").unwrap();
        let rows = run_study(&cfg, &FitConfig::default()).unwrap();
        let ml = rows.iter().find(|r| r.estimator == "ml").unwrap().clone();
        let vi = rows.iter().find(|r| r.beta == Some(0.2)).unwrap().clone();
        (vi, ml)
    })
}

#[test]
fn criterion_4_inclusion_accuracy_smallest_cell() {
    let (vi, _) = smallest_cell();
    let p_z = vi.p_z.unwrap_or(f64::NAN);
    verdict(
        "4",
        "mean P_Z within 97.16% +- 3 points",
        vi.replications == 100 && (p_z - 0.9716).abs() <= 0.03,
        format!("P_Z {:.4} over {} replications, {} failed", p_z, vi.replications, vi.failures),
    );
}

#[test]
fn criterion_5_loading_rmse_smallest_cell() {
    let (vi, ml) = smallest_cell();
    let (ev, em) = (vi.e_lambda.unwrap_or(f64::NAN), ml.e_lambda.unwrap_or(f64::NAN));
    verdict(
        "5",
        "mean E_Lambda within .048 +- .02 (VI) and .096 +- .03 (ML)",
        vi.replications == 100 && ml.replications == 100 && (ev - 0.048).abs() <= 0.02 && (em - 0.096).abs() <= 0.03,
        format!("VI {ev:.4}, ML {em:.4}"),
    );
}

#[test]
fn criterion_6_factor_precision_smallest_cell() {
    let (vi, _) = smallest_cell();
    let p_f = vi.p_f.unwrap_or(f64::NAN);
    verdict(
        "6",
        "mean P_F within 90.65% +- 3 points",
        vi.replications == 100 && (p_f - 0.9065).abs() <= 0.03,
        format!("P_F {p_f:.4}"),
    );
}

fn sparse_design(n: usize, t: usize, r: usize, p: usize, omega: f64) -> StudyConfig {
    StudyConfig {
        omega: vec![omega],
        n: vec![n],
        t: vec![t],
        r: vec![r],
        p: vec![p],
        beta: vec![0.1],
        replications: 1,
        seed: 7,
        pattern: MissingPattern::Experiment2,
        ml: true,
        ..StudyConfig::default()
    }
}

fn vi_and_ml(cfg: &StudyConfig) -> (vidfm::evaluate::Metrics, vidfm::evaluate::Metrics) {
    let cell = cfg.cells().unwrap()[0];
    let rep = run_replication(cfg, cell, 0, &FitConfig::default()).unwrap();
    let get = |want: fn(&Estimator) -> bool| {
        let o = rep.outcomes.iter().find(|o| want(&o.estimator)).unwrap();
        o.result.clone().unwrap()
    };
    (get(|e| matches!(e, Estimator::Vi { .. })), get(|e| *e == Estimator::Ml))
}

#[test]
fn criterion_7_sparsity_identification() {
    let (vi, ml) = vi_and_ml(&sparse_design(200, 150, 2, 1, 0.1));
    verdict(
        "7",
        "VI loading RMSE below ML, VI P_F >= 0.95 (four-block availability)",
        vi.e_lambda < ml.e_lambda && vi.p_f >= 0.95,
        format!("E_Lambda VI {:.4} ML {:.4}; P_F VI {:.4} ML {:.4}", vi.e_lambda, ml.e_lambda, vi.p_f, ml.p_f),
    );
}

/// Full-size second experiment, within 50% of the reference values.
#[test]
#[ignore = "slow: two n=800 fits"]
fn criterion_7_full_size() {
    let reference = [(0.1, [0.036, 0.139, 0.993, 0.991]), (0.025, [0.024, 0.111, 0.982, 0.971])];
    let mut ok = true;
    let mut details = Vec::new();
    for (omega, target) in reference {
        let (vi, ml) = vi_and_ml(&sparse_design(800, 250, 4, 2, omega));
        let got = [vi.e_lambda, ml.e_lambda, vi.p_f, ml.p_f];
        for (g, t) in got.iter().zip(target) {
            ok &= (g - t).abs() <= 0.5 * t;
        }
        details.push(format!("omega {omega}: {got:.4?} vs {target:?}"));
    }
    verdict("7 (full size)", "reference values within 50%", ok, details.join("; "));
}

#[test]
fn criterion_8_em_sanity() {
    let mut worst_fit: f64 = 0.0;
    let mut worst_step = f64::INFINITY;
    for (r, seed) in [(1, 1u64), (2, 2), (3, 3)] {
        let (n, t_len) = (10, 80);
        let mut g = rng(seed);
        let ar: Vec<f64> = (0..r).map(|j| 0.9 - 0.3 * j as f64).collect();
        let mut f = DMatrix::zeros(t_len, r);
        for j in 0..r {
            let mut prev = 0.0;
            for t in 0..t_len {
                prev = ar[j] * prev + normal(&mut g);
                f[(t, j)] = prev;
            }
        }
        let lam = DMatrix::from_fn(n, r, |_, _| normal(&mut g));
        let y = &lam * f.transpose();
        let dims = ModelDims::new(n, t_len, r, 0).unwrap();
        let report = run_em(&Panel::complete(y.clone()).unwrap(), dims, &EmConfig::default()).unwrap();
        let common = &report.params.loadings * report.moments.factor_means(r).transpose();
        worst_fit = worst_fit.max((common - &y).abs().max());
        for w in report.loglik_trace.windows(2) {
            worst_step = worst_step.min((w[1] - w[0]) / w[0].abs().max(1.0));
        }
    }
    // monotonicity on noisy data with missing cells as well
    let dims = ModelDims::new(24, 80, 2, 1).unwrap();
    let sim = SimConfig {
        dims,
        omega: 0.4,
        seed: 3,
        replication: 0,
        pattern: MissingPattern::Experiment2,
    };
    let (raw, _) = simulate_dfm(&sim).unwrap();
    let report = run_em(&raw.standardized().unwrap().0, dims, &EmConfig::default()).unwrap();
    for w in report.loglik_trace.windows(2) {
        worst_step = worst_step.min((w[1] - w[0]) / w[0].abs().max(1.0));
    }
    verdict(
        "8",
        "noiseless rank-r panel reproduced, likelihood monotone",
        worst_fit < 1e-6 && worst_step >= -1e-12,
        format!("common-component error {worst_fit:e}, worst step {worst_step:e}"),
    );
}

#[test]
fn criterion_9_statistic_identities() {
    let mut g = rng(9);
    let f = DMatrix::from_fn(50, 2, |_, _| normal(&mut g));
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let q = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.5, 3.0]);
    let noisy = &f + DMatrix::from_fn(50, 2, |_, _| 0.5 * normal(&mut g));
    let base = factor_precision(&noisy, &f).unwrap();
    let rotated = factor_precision(&(&noisy * &q), &f).unwrap();
    checks.push(("P_F invariant to invertible right-multiplication", (base - rotated).abs() < 1e-12));
    checks.push(("P_F of the truth is 1", (factor_precision(&f, &f).unwrap() - 1.0).abs() < 1e-12));
    // a column orthogonal to both true factors
    let mut o = DVector::from_fn(50, |t, _| ((t * 7 % 11) as f64) - 5.0);
    for j in 0..2 {
        let c = f.column(j).into_owned();
        let proj = o.dot(&c) / c.dot(&c);
        o -= c * proj;
    }
    let (a, b) = (f.column(0).into_owned(), f.column(1).into_owned());
    let ab = a.dot(&b) / b.dot(&b);
    let b_perp = &a - &b * ab;
    let o = &o - &b_perp * (o.dot(&b_perp) / b_perp.dot(&b_perp));
    let orth = DMatrix::from_columns(&[o]);
    checks.push(("P_F of an orthogonal estimate is 0", factor_precision(&orth, &f).unwrap().abs() < 1e-12));

    let z = DMatrix::from_fn(6, 3, |i, k| ((i + 2 * k) % 3 == 0) as u8 as f64);
    checks.push(("P_Z is 1 at the truth", inclusion_accuracy(&z, &z).unwrap() == 1.0));
    checks.push(("P_Z is 0 at the complement", inclusion_accuracy(&z.map(|v| 1.0 - v), &z).unwrap() == 0.0));

    let lam = DMatrix::from_fn(6, 2, |i, k| (i as f64 - 2.5) * (k as f64 + 1.0));
    let y_sd = [1.5, 2.0, 0.5, 1.0, 3.0, 0.8];
    let f_sd = [1.2, 0.7];
    // estimates already on the standardized scale with unit factor sd
    let est = DMatrix::from_fn(6, 2, |i, k| lam[(i, k)] * f_sd[k] / y_sd[i]);
    checks.push(("E_Lambda is 0 at matching scales", loading_rmse(&est, &lam, &f_sd, &y_sd, &[1.0, 1.0]).unwrap() == 0.0));
    let one = loading_rmse(
        &DMatrix::from_element(1, 1, 0.3),
        &DMatrix::from_element(1, 1, 1.1),
        &[2.0],
        &[4.0],
        &[1.5],
    )
    .unwrap();
    checks.push(("E_Lambda single term", one == (1.1 * 2.0 / 4.0 - 0.3 * 1.5f64).abs()));

    let swapped = DMatrix::from_columns(&[f.column(1).into_owned(), -f.column(0).into_owned()]);
    let al = align(&swapped, &f).unwrap();
    checks.push((
        "swapped and negated columns realign",
        al == Alignment {
            perm: vec![1, 0],
            signs: vec![1.0, -1.0],
        },
    ));
    checks.push(("identity alignment of the truth", align(&f, &f).unwrap() == Alignment::identity(2)));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict("9", "evaluation identities", failed.is_empty(), format!("{} checks, failed {failed:?}", checks.len()));
}
