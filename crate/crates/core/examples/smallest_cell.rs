//! Fits a handful of replications of the smallest simulation cell and prints the statistics.

use vidfm::em::{run_em, EmConfig};
use vidfm::evaluate::evaluate;
use vidfm::fit::{fit, FitConfig};
use vidfm::simulate::{simulate_dfm, MissingPattern, SimConfig};
use vidfm::{ModelDims, PriorSpec};

fn main() -> vidfm::Result<()> {
    let dims = ModelDims::new(50, 100, 1, 0)?;
    let reps: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    for rep in 0..reps {
        let cfg = SimConfig { dims, omega: 0.2, seed: 7, replication: rep, pattern: MissingPattern::None };
        let (raw, truth) = simulate_dfm(&cfg)?;
        let (report, st) = fit(&raw, dims, PriorSpec::standard(dims, 0.2), &FitConfig::default())?;
        let vi = evaluate(
            &report.state.effective_loadings(),
            &report.state.inclusion,
            &report.factors(),
            &truth.loadings,
            &truth.inclusion,
            &truth.dynamic_factors(1),
            st.sd.as_slice(),
        )?;
        let (z, _) = raw.standardized()?;
        let em = run_em(&z, dims, &EmConfig::default())?;
        let ml = evaluate(
            &em.params.loadings,
            &em.params.loadings.map(|_| 1.0),
            &em.moments.factor_means(1),
            &truth.loadings,
            &truth.inclusion,
            &truth.dynamic_factors(1),
            st.sd.as_slice(),
        )?;
        println!(
            "rep {rep}: VI P_Z {:.4} E_L {:.4} P_F {:.4} | sweeps {} reruns {} {:.2}s | ML E_L {:.4} P_F {:.4} it {}",
            vi.p_z, vi.e_lambda, vi.p_f, report.sweeps, report.reruns, report.wall_time, ml.e_lambda, ml.p_f, em.iterations
        );
    }
    Ok(())
}
