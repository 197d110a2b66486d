//! Accuracy statistics against simulation truth.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky;

/// Column permutation and sign flips mapping estimated factors onto true ones.
///
/// Estimated column `k` is matched to true column `perm[k]` and multiplied by `signs[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl Alignment {
    pub fn identity(r: usize) -> Self {
        Self {
            perm: (0..r).collect(),
            signs: vec![1.0; r],
        }
    }

    pub fn inverse(&self) -> Self {
        let r = self.perm.len();
        let mut perm = vec![0; r];
        let mut signs = vec![1.0; r];
        for k in 0..r {
            perm[self.perm[k]] = k;
            signs[self.perm[k]] = self.signs[k];
        }
        Self { perm, signs }
    }

    /// Reorders and flips the columns of a T×r factor matrix.
    pub fn apply_factors(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(f.nrows(), f.ncols());
        for (k, &j) in self.perm.iter().enumerate() {
            out.set_column(j, &(f.column(k) * self.signs[k]));
        }
        out
    }

    /// Same transformation on the lag blocks of an n×s loading matrix.
    pub fn apply_loadings(&self, l: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_blocks(l, true)
    }

    /// Permutes the lag blocks of an n×s probability matrix without sign changes.
    pub fn apply_inclusion(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_blocks(b, false)
    }

    fn apply_blocks(&self, l: &DMatrix<f64>, flip: bool) -> DMatrix<f64> {
        let r = self.perm.len();
        let mut out = DMatrix::zeros(l.nrows(), l.ncols());
        for block in 0..l.ncols() / r {
            for (k, &j) in self.perm.iter().enumerate() {
                let sign = if flip { self.signs[k] } else { 1.0 };
                out.set_column(block * r + j, &(l.column(block * r + k) * sign));
            }
        }
        out
    }
}

/// `corr[k][j]` between estimated column k and true column j.
fn correlations(f_hat: &DMatrix<f64>, f_true: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f_hat.shape() != f_true.shape() {
        return Err(Error::Dimension(format!(
            "factor matrices are {:?} and {:?}",
            f_hat.shape(),
            f_true.shape()
        )));
    }
    let r = f_hat.ncols();
    let centered = |f: &DMatrix<f64>, k: usize| {
        let c = f.column(k);
        let m = c.mean();
        c.map(|v| v - m)
    };
    let est: Vec<DVector<f64>> = (0..r).map(|k| centered(f_hat, k)).collect();
    let tru: Vec<DVector<f64>> = (0..r).map(|k| centered(f_true, k)).collect();
    for (k, e) in est.iter().enumerate() {
        if e.norm() == 0.0 {
            return Err(Error::ZeroVarianceFactor(k));
        }
    }
    Ok(DMatrix::from_fn(r, r, |k, j| {
        let d = est[k].norm() * tru[j].norm();
        if d == 0.0 {
            0.0
        } else {
            est[k].dot(&tru[j]) / d
        }
    }))
}

fn sign_of(c: f64) -> f64 {
    if c < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Greedy matching by descending absolute correlation.
pub fn align(f_hat: &DMatrix<f64>, f_true: &DMatrix<f64>) -> Result<Alignment> {
    let c = correlations(f_hat, f_true)?;
    let r = c.nrows();
    let mut pairs: Vec<(usize, usize)> = (0..r).flat_map(|k| (0..r).map(move |j| (k, j))).collect();
    // stable sort keeps ties in row-major order
    pairs.sort_by(|a, b| c[*b].abs().total_cmp(&c[*a].abs()));
    let mut perm = vec![usize::MAX; r];
    let mut signs = vec![1.0; r];
    let mut taken = vec![false; r];
    for (k, j) in pairs {
        if perm[k] == usize::MAX && !taken[j] {
            perm[k] = j;
            signs[k] = sign_of(c[(k, j)]);
            taken[j] = true;
        }
    }
    Ok(Alignment { perm, signs })
}

/// Best assignment over all permutations (sum of absolute correlations). Meant for small r.
pub fn align_exhaustive(f_hat: &DMatrix<f64>, f_true: &DMatrix<f64>) -> Result<Alignment> {
    let c = correlations(f_hat, f_true)?;
    let r = c.nrows();
    if r > 8 {
        return Err(Error::Config(format!("exhaustive alignment limited to r <= 8, got {r}")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..r).collect();
    permutations(&mut perm, 0, &mut |p| {
        let score: f64 = p.iter().enumerate().map(|(k, &j)| c[(k, j)].abs()).sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, p.to_vec()));
        }
    });
    let perm = best.map(|(_, p)| p).unwrap_or_default();
    let signs = perm.iter().enumerate().map(|(k, &j)| sign_of(c[(k, j)])).collect();
    Ok(Alignment { perm, signs })
}

fn permutations(v: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == v.len() {
        visit(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permutations(v, start + 1, visit);
        v.swap(start, i);
    }
}

/// Share of loadings whose selection (`b > 0.5`) matches the truth.
pub fn inclusion_accuracy(b: &DMatrix<f64>, z_true: &DMatrix<f64>) -> Result<f64> {
    if b.shape() != z_true.shape() {
        return Err(Error::Dimension("inclusion matrices differ in shape".into()));
    }
    let hits = b
        .iter()
        .zip(z_true.iter())
        .filter(|(bk, zk)| (**bk > 0.5) == (**zk == 1.0))
        .count();
    Ok(hits as f64 / b.len() as f64)
}

/// Sample standard deviation of each column.
pub fn column_sd(f: &DMatrix<f64>) -> Vec<f64> {
    (0..f.ncols()).map(|j| f.column(j).variance().sqrt() * sd_correction(f.nrows())).collect()
}

fn sd_correction(t: usize) -> f64 {
    // nalgebra's variance divides by T
    if t > 1 {
        (t as f64 / (t - 1) as f64).sqrt()
    } else {
        1.0
    }
}

/// Scale-adjusted loading RMSE.
///
/// True loadings are scaled by `true_factor_sd[j] / y_sd[i]`, estimates by
/// `est_factor_sd[j]`, where `j` is the factor behind state column `k`.
pub fn loading_rmse(
    est: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    true_factor_sd: &[f64],
    y_sd: &[f64],
    est_factor_sd: &[f64],
) -> Result<f64> {
    if est.shape() != truth.shape() || y_sd.len() != est.nrows() {
        return Err(Error::Dimension("loading matrices differ in shape".into()));
    }
    let r = true_factor_sd.len();
    if est_factor_sd.len() != r || !est.ncols().is_multiple_of(r) {
        return Err(Error::Dimension("factor scales do not match loading columns".into()));
    }
    let mut acc = 0.0;
    for i in 0..est.nrows() {
        if !(y_sd[i] > 0.0) {
            return Err(Error::ConstantVariable(i));
        }
        for k in 0..est.ncols() {
            let j = k % r;
            let d = truth[(i, k)] * true_factor_sd[j] / y_sd[i] - est[(i, k)] * est_factor_sd[j];
            acc += d * d;
        }
    }
    Ok((acc / est.len() as f64).sqrt())
}

/// Trace R² of projecting the true factors on the span of the estimated ones.
pub fn factor_precision(f_hat: &DMatrix<f64>, f_true: &DMatrix<f64>) -> Result<f64> {
    if f_hat.nrows() != f_true.nrows() {
        return Err(Error::Dimension("factor matrices differ in length".into()));
    }
    let gram = f_hat.transpose() * f_hat;
    let chol = cholesky(&gram, "estimated factor Gram matrix").map_err(|_| Error::RankDeficient)?;
    let cross = f_hat.transpose() * f_true;
    let explained = cross.dot(&chol.solve(&cross));
    let total = f_true.norm_squared();
    Ok(explained / total)
}

/// The three statistics for one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub p_z: f64,
    pub e_lambda: f64,
    pub p_f: f64,
}

/// Aligns an estimate to the truth and computes all statistics.
///
/// `loadings` and `inclusion` are on the standardized scale; `y_sd` is the
/// standard deviation used for standardization.
pub fn evaluate(
    loadings: &DMatrix<f64>,
    inclusion: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    true_loadings: &DMatrix<f64>,
    true_inclusion: &DMatrix<f64>,
    true_factors: &DMatrix<f64>,
    y_sd: &[f64],
) -> Result<Metrics> {
    let al = align(factors, true_factors)?;
    let f_al = al.apply_factors(factors);
    let l_al = al.apply_loadings(loadings);
    let b_al = al.apply_inclusion(inclusion);
    Ok(Metrics {
        p_z: inclusion_accuracy(&b_al, true_inclusion)?,
        e_lambda: loading_rmse(&l_al, true_loadings, &column_sd(true_factors), y_sd, &column_sd(&f_al))?,
        p_f: factor_precision(factors, true_factors)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_factors() -> DMatrix<f64> {
        DMatrix::from_fn(40, 2, |t, j| ((t as f64) * (0.3 + j as f64)).sin() + 0.1 * j as f64)
    }

    #[test]
    fn identity_alignment() {
        let f = sample_factors();
        assert_eq!(align(&f, &f).unwrap(), Alignment::identity(2));
    }

    #[test]
    fn swapped_and_negated() {
        let f = sample_factors();
        let mut g = DMatrix::zeros(40, 2);
        g.set_column(0, &f.column(1));
        g.set_column(1, &(-f.column(0)));
        let al = align(&g, &f).unwrap();
        assert_eq!(al.perm, vec![1, 0]);
        assert_eq!(al.signs, vec![1.0, -1.0]);
        assert_eq!(al.apply_factors(&g), f);
        let back = al.inverse().apply_factors(&al.apply_factors(&g));
        assert_eq!(back, g);
    }

    #[test]
    fn zero_variance_is_flagged() {
        let f = sample_factors();
        let mut g = f.clone();
        g.column_mut(1).fill(3.0);
        assert!(matches!(align(&g, &f), Err(Error::ZeroVarianceFactor(1))));
    }

    #[test]
    fn accuracy_trivial_cases() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(inclusion_accuracy(&z, &z).unwrap(), 1.0);
        assert_eq!(inclusion_accuracy(&z.map(|v| 1.0 - v), &z).unwrap(), 0.0);
        // exactly 0.5 counts as excluded
        let half = DMatrix::from_element(2, 2, 0.5);
        assert_eq!(inclusion_accuracy(&half, &z).unwrap(), 0.5);
    }

    #[test]
    fn rmse_single_term() {
        let est = DMatrix::from_element(1, 1, 0.7);
        let tru = DMatrix::from_element(1, 1, 2.0);
        let e = loading_rmse(&est, &tru, &[1.5], &[3.0], &[0.8]).unwrap();
        assert!((e - (2.0 * 1.5 / 3.0 - 0.7 * 0.8f64).abs()).abs() < 1e-15);
        assert_eq!(loading_rmse(&tru, &tru, &[1.0], &[1.0], &[1.0]).unwrap(), 0.0);
        assert!(matches!(
            loading_rmse(&est, &tru, &[1.0], &[0.0], &[1.0]),
            Err(Error::ConstantVariable(0))
        ));
    }

    #[test]
    fn precision_trivial_cases() {
        let f = sample_factors();
        assert!((factor_precision(&f, &f).unwrap() - 1.0).abs() < 1e-12);
        let a = DMatrix::from_fn(4, 1, |t, _| [1.0, 1.0, 0.0, 0.0][t]);
        let b = DMatrix::from_fn(4, 1, |t, _| [1.0, -1.0, 2.0, 0.0][t]);
        assert_eq!(factor_precision(&a, &b).unwrap(), 0.0);
        let rank1 = DMatrix::from_fn(5, 2, |t, _| t as f64);
        assert!(matches!(factor_precision(&rank1, &f.rows(0, 5).into_owned()), Err(Error::RankDeficient)));
    }
}
