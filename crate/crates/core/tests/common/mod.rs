//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls the library's smoother or bound code: the oracles rebuild
//! the factor model from the raw state fields and solve it with dense linear
//! algebra or a textbook covariance-form filter.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use vidfm::{validate, AvailabilityMask, ModelContext, ModelDims, Panel, PriorSpec, VariationalState};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_spd(rng: &mut ChaCha20Rng, s: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(s, s, |_, _| normal(rng));
    (&a * a.transpose() + DMatrix::identity(s, s) * 0.2) * scale
}

/// Random model with random (not optimized) variational parameters.
pub fn random_problem(seed: u64, max_n: usize, max_t: usize) -> (ModelContext, VariationalState) {
    let mut g = rng(seed);
    let n = g.random_range(1..=max_n);
    let t = g.random_range(1..=max_t);
    let (r, p) = [(1, 0), (1, 1), (2, 0)][g.random_range(0..3)];
    let dims = ModelDims::new(n, t, r, p).unwrap();
    let s = dims.s();
    let mut mask = AvailabilityMask::empty(n, t);
    let y = DMatrix::from_fn(n, t, |_, _| normal(&mut g));
    for i in 0..n {
        for tt in 0..t {
            mask.set(i, tt, g.random_bool(0.7));
        }
    }
    let panel = Panel::new(y, mask).unwrap();
    let mut prior = PriorSpec::standard(dims, 0.5);
    prior.inclusion = DMatrix::from_fn(n, s, |_, _| g.random_range(0.1..0.9));
    prior.v_f0 = random_spd(&mut g, s, 1.0);
    let ctx = validate(dims, panel, prior).unwrap();
    let state = VariationalState {
        loading_mean: DMatrix::from_fn(n, s, |_, _| normal(&mut g)),
        loading_cov: (0..n).map(|_| random_spd(&mut g, s, 0.3)).collect(),
        eps_scale: DVector::from_fn(n, |_, _| g.random_range(0.3..2.0)),
        transition_mean: DMatrix::from_fn(r, s, |_, _| g.random_range(-0.8..0.8)),
        transition_cov: (0..r).map(|_| random_spd(&mut g, s, 0.1)).collect(),
        innov_scale: DVector::from_fn(r, |_, _| g.random_range(0.3..1.5)),
        inclusion: DMatrix::from_fn(n, s, |_, _| g.random_range(0.0..1.0)),
    };
    (ctx, state)
}

/// The factor model implied by a state, spelled out from the raw fields.
pub struct ExplicitModel {
    pub r: usize,
    pub s: usize,
    pub t: usize,
    pub m_phi: DMatrix<f64>,
    pub psi_u: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    /// Per period: loading rows of the available variables and their noise variances.
    pub obs: Vec<(DMatrix<f64>, DVector<f64>, DVector<f64>)>,
    /// Per period: pseudo-observation precision.
    pub pseudo: Vec<DMatrix<f64>>,
}

pub fn explicit_model(ctx: &ModelContext, st: &VariationalState) -> ExplicitModel {
    let (n, r, s, t) = (ctx.dims.n(), ctx.dims.r(), ctx.dims.s(), ctx.dims.t());
    let mut sum_phi = DMatrix::zeros(s, s);
    for c in &st.transition_cov {
        sum_phi += c;
    }
    let v_inv = ctx.prior.v_f0.clone().try_inverse().unwrap();
    let init_cov = (v_inv + &sum_phi).try_inverse().unwrap();
    let mut obs = Vec::new();
    let mut pseudo = Vec::new();
    for tt in 0..t {
        let avail: Vec<usize> = (0..n).filter(|&i| ctx.panel.available(i, tt)).collect();
        let rows = DMatrix::from_fn(avail.len(), s, |a, k| {
            let i = avail[a];
            st.inclusion[(i, k)] * st.loading_mean[(i, k)]
        });
        let y = DVector::from_fn(avail.len(), |a, _| ctx.panel.values()[(avail[a], tt)]);
        let var = DVector::from_fn(avail.len(), |a, _| st.eps_scale[avail[a]]);
        obs.push((rows, y, var));
        let mut sig = if tt + 1 < t { sum_phi.clone() } else { DMatrix::zeros(s, s) };
        for &i in &avail {
            for k in 0..s {
                for m in 0..s {
                    let b = &st.inclusion;
                    let p = if k == m { b[(i, k)] } else { b[(i, k)] * b[(i, m)] };
                    sig[(k, m)] += p * st.loading_cov[i][(k, m)];
                }
                let (b, mu) = (st.inclusion[(i, k)], st.loading_mean[(i, k)]);
                sig[(k, k)] += b * (1.0 - b) * mu * mu / st.eps_scale[i];
            }
        }
        pseudo.push(sig);
    }
    ExplicitModel {
        r,
        s,
        t,
        m_phi: st.transition_mean.clone(),
        psi_u: st.innov_scale.clone(),
        init_cov,
        obs,
        pseudo,
    }
}

/// `C` with `C'C = sig`, from the symmetric eigendecomposition.
fn pseudo_root(sig: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = sig.clone().symmetric_eigen();
    let s = sig.nrows();
    let mut c = DMatrix::zeros(s, s);
    for k in 0..s {
        let l = eig.eigenvalues[k].max(0.0).sqrt();
        for m in 0..s {
            c[(k, m)] = l * eig.eigenvectors[(m, k)];
        }
    }
    c
}

fn companion(m_phi: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, s) = m_phi.shape();
    let mut m = DMatrix::zeros(s, s);
    m.rows_mut(0, r).copy_from(m_phi);
    for k in r..s {
        m[(k, k - r)] = 1.0;
    }
    m
}

/// Smoothed moments from any reference method.
pub struct RefMoments {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    /// `Cov(F_t, F_{t-1})` for t = 1..=T at `t - 1`.
    pub cross_cov: Vec<DMatrix<f64>>,
    pub log_partition: f64,
    pub entropy: f64,
}

/// Brute-force conditioning of the joint Gaussian of `(F_0, f_1..f_T)` and all observations.
pub fn dense_oracle(model: &ExplicitModel) -> RefMoments {
    let (r, s, t) = (model.r, model.s, model.t);
    let d = s + r * t;
    // x = A e with e ~ N(0, I)
    let l0 = model.init_cov.clone().cholesky().unwrap().l();
    let mut a = DMatrix::zeros(d, d);
    a.view_mut((0, 0), (s, s)).copy_from(&l0);
    // selection of F_t from x: F_t = [f_t; ...; f_{t-p}], f_{-l} inside F_0
    let sel = |tt: usize| -> DMatrix<f64> {
        let mut sm = DMatrix::zeros(s, d);
        for k in 0..s {
            let (lag, j) = (k / r, k % r);
            if tt > lag {
                let tau = tt - lag;
                sm[(k, s + (tau - 1) * r + j)] = 1.0;
            } else {
                let back = lag - tt;
                sm[(k, back * r + j)] = 1.0;
            }
        }
        sm
    };
    for tt in 1..=t {
        let prev = sel(tt - 1) * &a;
        let f = &model.m_phi * prev;
        for j in 0..r {
            let row = s + (tt - 1) * r + j;
            a.set_row(row, &f.row(j));
            a[(row, row)] += model.psi_u[j].sqrt();
        }
    }
    let sigma_x = &a * a.transpose();

    let mut h_rows: Vec<DVector<f64>> = Vec::new();
    let mut z = Vec::new();
    let mut noise = Vec::new();
    let mut obs_ln_var = 0.0;
    for tt in 1..=t {
        let st = sel(tt);
        let (rows, y, var) = &model.obs[tt - 1];
        for a_i in 0..rows.nrows() {
            h_rows.push((rows.row(a_i) * &st).transpose());
            z.push(y[a_i]);
            noise.push(var[a_i]);
            obs_ln_var += var[a_i].ln();
        }
        let c = pseudo_root(&model.pseudo[tt - 1]);
        for k in 0..s {
            h_rows.push((c.row(k) * &st).transpose());
            z.push(0.0);
            noise.push(1.0);
        }
    }
    let m_obs = z.len();
    let h = DMatrix::from_fn(m_obs, d, |q, c| h_rows[q][c]);
    let z = DVector::from_vec(z);
    let cov_z = &h * &sigma_x * h.transpose() + DMatrix::from_diagonal(&DVector::from_vec(noise));
    let chol = cov_z.clone().cholesky().unwrap();
    let gain = chol.solve(&(&h * &sigma_x)).transpose();
    let post_mean = &gain * &z;
    let post_cov = &sigma_x - &gain * &h * &sigma_x;
    let ln2pi = (2.0 * PI).ln();
    let ln_det_z = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_evidence = -0.5 * (m_obs as f64 * ln2pi + ln_det_z + z.dot(&chol.solve(&z)));
    let init_ln_det = model.init_cov.determinant().ln();
    let log_partition = log_evidence
        + 0.5 * d as f64 * ln2pi
        + 0.5 * init_ln_det
        + 0.5 * t as f64 * model.psi_u.iter().map(|v| v.ln()).sum::<f64>()
        + 0.5 * m_obs as f64 * ln2pi
        + 0.5 * obs_ln_var;
    let pc = (&post_cov + post_cov.transpose()) * 0.5;
    let entropy = 0.5 * (d as f64 * (1.0 + ln2pi) + pc.determinant().ln());

    let mut mean = Vec::new();
    let mut cov = Vec::new();
    let mut cross_cov = Vec::new();
    for tt in 0..=t {
        let st = sel(tt);
        mean.push(&st * &post_mean);
        cov.push(&st * &pc * st.transpose());
        if tt > 0 {
            cross_cov.push(&st * &pc * sel(tt - 1).transpose());
        }
    }
    RefMoments {
        mean,
        cov,
        cross_cov,
        log_partition,
        entropy,
    }
}

/// Textbook covariance-form filter (Joseph update) and RTS smoother over a
/// sequence of per-period observations `(H_t, y_t, R_t)` on the state `F_t`.
pub fn covariance_filter(model: &ExplicitModel, obs: &[(DMatrix<f64>, DVector<f64>, DMatrix<f64>)]) -> RefMoments {
    let (r, s, t) = (model.r, model.s, model.t);
    let m = companion(&model.m_phi);
    let mut q = DMatrix::zeros(s, s);
    for j in 0..r {
        q[(j, j)] = model.psi_u[j];
    }
    let mut fm = vec![DVector::zeros(s)];
    let mut fp = vec![model.init_cov.clone()];
    let mut pm = Vec::new();
    let mut pp = Vec::new();
    for tt in 1..=t {
        let xm = &m * &fm[tt - 1];
        let xp = &m * &fp[tt - 1] * m.transpose() + &q;
        let (h, y, rr) = &obs[tt - 1];
        let (xf, pf) = if h.nrows() == 0 {
            (xm.clone(), xp.clone())
        } else {
            let sinv = (h * &xp * h.transpose() + rr).try_inverse().unwrap();
            let k = &xp * h.transpose() * sinv;
            let xf = &xm + &k * (y - h * &xm);
            let ikh = DMatrix::identity(s, s) - &k * h;
            let pf = &ikh * &xp * ikh.transpose() + &k * rr * k.transpose();
            (xf, pf)
        };
        pm.push(xm);
        pp.push(xp);
        fm.push(xf);
        fp.push((&pf + pf.transpose()) * 0.5);
    }
    let mut sm = fm.clone();
    let mut sp = fp.clone();
    let mut cross_cov = vec![DMatrix::zeros(s, s); t];
    for tt in (0..t).rev() {
        let l = &fp[tt] * m.transpose() * pp[tt].clone().try_inverse().unwrap();
        sm[tt] = &fm[tt] + &l * (&sm[tt + 1] - &pm[tt]);
        sp[tt] = &fp[tt] + &l * (&sp[tt + 1] - &pp[tt]) * l.transpose();
        cross_cov[tt] = &sp[tt + 1] * l.transpose();
    }
    RefMoments {
        mean: sm,
        cov: sp,
        cross_cov,
        log_partition: f64::NAN,
        entropy: f64::NAN,
    }
}

/// Augmented observations: data rows stacked over the zero pseudo-observations.
pub fn uncollapsed_observations(model: &ExplicitModel) -> Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    (0..model.t)
        .map(|tt| {
            let (rows, y, var) = &model.obs[tt];
            let c = pseudo_root(&model.pseudo[tt]);
            let k = rows.nrows();
            let s = model.s;
            let mut h = DMatrix::zeros(k + s, s);
            h.rows_mut(0, k).copy_from(rows);
            h.rows_mut(k, s).copy_from(&c);
            let mut yy = DVector::zeros(k + s);
            yy.rows_mut(0, k).copy_from(y);
            let mut rr = DMatrix::identity(k + s, k + s);
            for a in 0..k {
                rr[(a, a)] = var[a];
            }
            (h, yy, rr)
        })
        .collect()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Largest discrepancy in means, covariances and cross covariances.
pub fn compare(a: &RefMoments, b_mean: &[DVector<f64>], b_cov: &[DMatrix<f64>], b_cross: &[DMatrix<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..a.mean.len() {
        worst = worst.max((&a.mean[t] - &b_mean[t]).abs().max());
        worst = worst.max(max_abs_diff(&a.cov[t], &b_cov[t]));
    }
    for (x, y) in a.cross_cov.iter().zip(b_cross.iter()) {
        worst = worst.max(max_abs_diff(x, y));
    }
    worst
}

/// Log marginal likelihood of a one-variable, one-factor, two-period model by
/// quadrature over `(lambda, sigma2_eps, phi, sigma2_u)`; the factors are
/// integrated exactly. Priors: `lambda | s2 ~ N(0, v s2)`, `s2 ~ SI-chi2(nu, tau2)`,
/// same for `(phi, s2_u)`, and `F_0 ~ N(0, v0)`.
pub fn quadrature_log_evidence(y: [f64; 2], v: f64, nu: f64, tau2: f64, v0: f64) -> f64 {
    let ln_sichi2 = |x: f64| {
        let a = nu / 2.0;
        let b = nu * tau2 / 2.0;
        a * b.ln() - statrs::function::gamma::ln_gamma(a) - (a + 1.0) * x.ln() - b / x
    };
    let nz = 48;
    let zmax = 7.0;
    let dz = 2.0 * zmax / nz as f64;
    let nu_grid = 80;
    let (umin, umax) = (-14.0f64, 16.0f64);
    let du = (umax - umin) / nu_grid as f64;
    let ln2pi = (2.0 * PI).ln();
    let zs: Vec<f64> = (0..nz).map(|k| -zmax + (k as f64 + 0.5) * dz).collect();
    let ln_phi_z: Vec<f64> = zs.iter().map(|z| -0.5 * (ln2pi + z * z)).collect();
    let us: Vec<f64> = (0..nu_grid).map(|k| umin + (k as f64 + 0.5) * du).collect();
    // density of log variance: p(e^u) e^u
    let ln_pu: Vec<f64> = us.iter().map(|u| ln_sichi2(u.exp()) + u).collect();
    // streaming log-sum-exp
    let mut mx = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for (iu_e, ue) in us.iter().enumerate() {
        let se = ue.exp();
        for (iu_u, uu) in us.iter().enumerate() {
            let su = uu.exp();
            for (iz_p, zp) in zs.iter().enumerate() {
                let phi = (v * su).sqrt() * zp;
                let var1 = phi * phi * v0 + su;
                let c12 = phi * var1;
                let var2 = phi * phi * var1 + su;
                for (iz_l, zl) in zs.iter().enumerate() {
                    let lam = (v * se).sqrt() * zl;
                    let l2 = lam * lam;
                    let a = l2 * var1 + se;
                    let b = l2 * c12;
                    let c = l2 * var2 + se;
                    let det = a * c - b * b;
                    let quad = (c * y[0] * y[0] - 2.0 * b * y[0] * y[1] + a * y[1] * y[1]) / det;
                    let ll = -ln2pi - 0.5 * det.ln() - 0.5 * quad;
                    let term = ll + ln_phi_z[iz_l] + ln_phi_z[iz_p] + ln_pu[iu_e] + ln_pu[iu_u];
                    if term > mx {
                        sum = sum * (mx - term).exp() + 1.0;
                        mx = term;
                    } else {
                        sum += (term - mx).exp();
                    }
                }
            }
        }
    }
    mx + sum.ln() + 2.0 * dz.ln() + 2.0 * du.ln()
}
