//! Scalar special functions used by the updates and the ELBO.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Bound applied to prior log-odds so that dogmatic priors (0 or 1) stay finite.
pub const LOGIT_CLAMP: f64 = 700.0;

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
pub fn logit(p: f64) -> f64 {
    let v = (p / (1.0 - p)).ln();
    if v.is_nan() {
        // p outside [0, 1] never reaches here after validation
        return 0.0;
    }
    v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// `a * ln(a / b)` with the convention `0 * ln(0 / b) = 0`.
pub fn xlogx_over(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a / b).ln()
    }
}
