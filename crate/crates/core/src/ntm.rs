//! Noise transition matrices at class level (`C x C`) and affinity level
//! (`2 x 2`), and the translation between them.
//!
//! Affinity index convention: 0 = "different class", 1 = "same class".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied to entries before taking the log-determinant.
pub const VOLUME_FLOOR: f64 = 1e-12;

fn row_tol<T: Scalar>() -> f64 {
    crate::grid::simplex_tol::<T>()
}

fn check_row_stochastic<T: Scalar>(k: usize, data: &[T]) -> Result<()> {
    for (i, row) in data.chunks_exact(k).enumerate() {
        if row.iter().any(|v| !v.is_finite() || *v < T::zero() || *v > T::one()) {
            return Err(Error::Degenerate(format!("row {i} has entries outside [0, 1]")));
        }
        let s: T = row.iter().copied().sum();
        if (s.as_f64() - 1.0).abs() > row_tol::<T>() {
            return Err(Error::Degenerate(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Class-level NTM: entry `(m, n)` is `p(noisy = n | clean = m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassNtm<T> {
    classes: usize,
    data: Vec<T>,
}

impl<T: Scalar> ClassNtm<T> {
    pub fn new(classes: usize, data: Vec<T>) -> Result<Self> {
        if classes == 0 || data.len() != classes * classes {
            return Err(Error::shape(format!(
                "class NTM with {classes} classes needs {} entries, got {}",
                classes * classes,
                data.len()
            )));
        }
        check_row_stochastic(classes, &data)?;
        Ok(ClassNtm { classes, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("class NTM rows must be square".to_string()));
        }
        Self::new(c, rows.concat())
    }

    pub fn identity(classes: usize) -> Self {
        let mut data = vec![T::zero(); classes * classes];
        (0..classes).for_each(|i| data[i * classes + i] = T::one());
        ClassNtm { classes, data }
    }

    /// `1 - rho` on the diagonal, `rho / (C - 1)` elsewhere.
    pub fn symmetric(classes: usize, rho: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Degenerate("symmetric NTM needs at least two classes".into()));
        }
        let off = T::lit(rho / (classes - 1) as f64);
        let mut data = vec![off; classes * classes];
        (0..classes).for_each(|i| data[i * classes + i] = T::lit(1.0 - rho));
        Self::new(classes, data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> T {
        self.data[m * self.classes + n]
    }

    pub fn row(&self, m: usize) -> &[T] {
        &self.data[m * self.classes..(m + 1) * self.classes]
    }

    pub fn to_json(&self) -> NtmJson {
        NtmJson::from_square(self.classes, &self.data)
    }

    pub fn from_json(j: &NtmJson) -> Result<Self> {
        Self::new(j.classes, j.flat()?.into_iter().map(T::lit).collect())
    }
}

/// Affinity-level NTM, row-major `[[t00, t01], [t10, t11]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityNtm<T> {
    data: [T; 4],
}

impl<T: Scalar> AffinityNtm<T> {
    pub fn new(data: [T; 4]) -> Result<Self> {
        check_row_stochastic(2, &data)?;
        Ok(AffinityNtm { data })
    }

    pub fn identity() -> Self {
        AffinityNtm {
            data: [T::one(), T::zero(), T::zero(), T::one()],
        }
    }

    pub fn data(&self) -> &[T; 4] {
        &self.data
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> T {
        self.data[a * 2 + b]
    }

    pub fn to_json(&self) -> NtmJson {
        NtmJson::from_square(2, &self.data)
    }

    pub fn from_json(j: &NtmJson) -> Result<Self> {
        if j.classes != 2 {
            return Err(Error::shape("affinity NTM must be 2x2".to_string()));
        }
        let v = j.flat()?;
        Self::new([T::lit(v[0]), T::lit(v[1]), T::lit(v[2]), T::lit(v[3])])
    }

    pub fn max_abs_diff(&self, other: &AffinityNtm<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// On-disk form: `{"classes": C, "rows": [[...], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtmJson {
    pub classes: usize,
    pub rows: Vec<Vec<f64>>,
}

impl NtmJson {
    fn from_square<T: Scalar>(k: usize, data: &[T]) -> Self {
        NtmJson {
            classes: k,
            rows: data
                .chunks_exact(k)
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
        }
    }

    fn flat(&self) -> Result<Vec<f64>> {
        if self.rows.len() != self.classes || self.rows.iter().any(|r| r.len() != self.classes) {
            return Err(Error::shape("NTM rows do not match class count".to_string()));
        }
        Ok(self.rows.concat())
    }
}

/// Pixel-count proportions per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution<T> {
    proportions: Vec<T>,
}

impl<T: Scalar> ClassDistribution<T> {
    pub fn new(proportions: Vec<T>) -> Result<Self> {
        if proportions.is_empty() {
            return Err(Error::Degenerate("empty class distribution".into()));
        }
        if proportions.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Degenerate("negative or non-finite proportion".into()));
        }
        let s: T = proportions.iter().copied().sum();
        if (s.as_f64() - 1.0).abs() > row_tol::<T>() {
            return Err(Error::Degenerate(format!("proportions sum to {s}")));
        }
        Ok(ClassDistribution { proportions })
    }

    /// Normalises nonnegative counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Degenerate("no pixels counted".into()));
        }
        let t = total as f64;
        Self::new(counts.iter().map(|&c| T::lit(c as f64 / t)).collect())
    }

    pub fn uniform(classes: usize) -> Self {
        let v = T::one() / <T as Scalar>::from_usize(classes);
        ClassDistribution {
            proportions: vec![v; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.proportions.len()
    }

    pub fn proportions(&self) -> &[T] {
        &self.proportions
    }

    /// True when a single class holds all the mass.
    pub fn is_degenerate(&self) -> bool {
        self.proportions.iter().filter(|v| **v > T::zero()).count() < 2
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        ClassDistribution {
            proportions: perm.iter().map(|&i| self.proportions[i]).collect(),
        }
    }
}

/// Unconstrained square parameters mapped to a row-stochastic matrix by a
/// row-wise softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct NtmParams<T> {
    classes: usize,
    raw: Vec<T>,
}

impl<T: Scalar> NtmParams<T> {
    pub fn new(classes: usize, raw: Vec<T>) -> Result<Self> {
        if classes == 0 || raw.len() != classes * classes {
            return Err(Error::shape("NTM parameter matrix must be square".to_string()));
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("NTM parameter {i}")));
        }
        Ok(NtmParams { classes, raw })
    }

    /// `kappa` on the diagonal, zero elsewhere.
    pub fn scaled_identity(classes: usize, kappa: f64) -> Self {
        let mut raw = vec![T::zero(); classes * classes];
        (0..classes).for_each(|i| raw[i * classes + i] = T::lit(kappa));
        NtmParams { classes, raw }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn raw(&self) -> &[T] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [T] {
        &mut self.raw
    }

    /// Row-wise softmax of the raw parameters.
    pub fn matrix(&self) -> Vec<T> {
        let k = self.classes;
        let mut out = self.raw.clone();
        for row in out.chunks_exact_mut(k) {
            crate::losses::softmax_in_place(row);
        }
        out
    }

    /// Pulls a gradient on matrix entries back to the raw parameters.
    pub fn backward(&self, grad_matrix: &[T]) -> Vec<T> {
        let k = self.classes;
        let m = self.matrix();
        let mut out = vec![T::zero(); k * k];
        for i in 0..k {
            let p = &m[i * k..(i + 1) * k];
            let g = &grad_matrix[i * k..(i + 1) * k];
            let inner = crate::affinity::dot(p, g);
            for j in 0..k {
                out[i * k + j] = p[j] * (g[j] - inner);
            }
        }
        out
    }

    pub fn affinity_ntm(&self) -> Result<AffinityNtm<T>> {
        if self.classes != 2 {
            return Err(Error::shape("affinity NTM parameters must be 2x2".to_string()));
        }
        let m = self.matrix();
        Ok(AffinityNtm {
            data: [m[0], m[1], m[2], m[3]],
        })
    }
}

pub fn ntm_from_params<T: Scalar>(params: &NtmParams<T>) -> Result<ClassNtm<T>> {
    if let Some(i) = params.raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("NTM parameter {i}")));
    }
    Ok(ClassNtm {
        classes: params.classes,
        data: params.matrix(),
    })
}

fn check_pair<T: Scalar>(t_c: &ClassNtm<T>, n_dist: &ClassDistribution<T>) -> Result<()> {
    if t_c.classes() != n_dist.classes() {
        return Err(Error::shape(format!(
            "NTM has {} classes, distribution has {}",
            t_c.classes(),
            n_dist.classes()
        )));
    }
    if t_c.classes() < 2 {
        return Err(Error::Degenerate(
            "affinity translation needs at least two classes".into(),
        ));
    }
    Ok(())
}

/// The four weighted pair sums over `(m, m', n, n')`, split by whether the
/// clean pair agrees (`m == m'`) and whether the noisy pair agrees (`n == n'`).
#[derive(Clone, Copy, Debug)]
struct PairSums<T> {
    same_same: T,
    same_diff: T,
    diff_same: T,
    diff_diff: T,
}

fn pair_sums<T: Scalar>(t: &[T], w: &[T], c: usize) -> PairSums<T> {
    let row_sum: Vec<T> = t.chunks_exact(c).map(|r| r.iter().copied().sum()).collect();
    let mut s = PairSums {
        same_same: T::zero(),
        same_diff: T::zero(),
        diff_same: T::zero(),
        diff_diff: T::zero(),
    };
    for m in 0..c {
        let rm = &t[m * c..(m + 1) * c];
        for m2 in 0..c {
            let rm2 = &t[m2 * c..(m2 + 1) * c];
            let weight = w[m] * w[m2];
            let agree: T = crate::affinity::dot(rm, rm2);
            let disagree = row_sum[m] * row_sum[m2] - agree;
            if m == m2 {
                s.same_same += weight * agree;
                s.same_diff += weight * disagree;
            } else {
                s.diff_same += weight * agree;
                s.diff_diff += weight * disagree;
            }
        }
    }
    s
}

/// Affinity NTM induced by class-dependent noise, from the exact pair sums.
pub fn translate_exact<T: Scalar>(
    t_c: &ClassNtm<T>,
    n_dist: &ClassDistribution<T>,
) -> Result<AffinityNtm<T>> {
    check_pair(t_c, n_dist)?;
    let s = pair_sums(t_c.data(), n_dist.proportions(), t_c.classes());
    let diff = s.diff_same + s.diff_diff;
    let same = s.same_same + s.same_diff;
    if !(diff > T::zero()) || !(same > T::zero()) {
        return Err(Error::Degenerate(
            "class distribution leaves an affinity class empty".into(),
        ));
    }
    Ok(AffinityNtm {
        data: [
            s.diff_diff / diff,
            s.diff_same / diff,
            s.same_diff / same,
            s.same_same / same,
        ],
    })
}

/// Gradient of `sum_ab grad[a][b] * translate_exact(T_C, N)[a][b]` with
/// respect to the entries of `T_C`, treating them as free variables.
pub fn translate_exact_backward<T: Scalar>(
    t_c: &ClassNtm<T>,
    n_dist: &ClassDistribution<T>,
    grad: &[T; 4],
) -> Result<Vec<T>> {
    check_pair(t_c, n_dist)?;
    let c = t_c.classes();
    let t = t_c.data();
    let w = n_dist.proportions();
    let s = pair_sums(t, w, c);
    let diff = s.diff_same + s.diff_diff;
    let same = s.same_same + s.same_diff;
    if !(diff > T::zero()) || !(same > T::zero()) {
        return Err(Error::Degenerate(
            "class distribution leaves an affinity class empty".into(),
        ));
    }
    // Ratio x / (x + y): d/dx = y / (x+y)^2, d/dy = -x / (x+y)^2.
    let dd2 = diff * diff;
    let ss2 = same * same;
    let g_dd = grad[0] * s.diff_same / dd2 - grad[1] * s.diff_same / dd2;
    let g_ds = grad[1] * s.diff_diff / dd2 - grad[0] * s.diff_diff / dd2;
    let g_sd = grad[2] * s.same_same / ss2 - grad[3] * s.same_same / ss2;
    let g_ss = grad[3] * s.same_diff / ss2 - grad[2] * s.same_diff / ss2;

    let two = T::lit(2.0);
    let row_sum: Vec<T> = t.chunks_exact(c).map(|r| r.iter().copied().sum()).collect();
    // Column sums over the other classes: sum_{m' != m} w_m' T[m', n].
    let mut wcol = vec![T::zero(); c];
    let mut wrow = T::zero();
    for m in 0..c {
        for n in 0..c {
            wcol[n] += w[m] * t[m * c + n];
        }
        wrow += w[m] * row_sum[m];
    }
    let mut out = vec![T::zero(); c * c];
    for m in 0..c {
        let w2 = w[m] * w[m];
        let other_row = wrow - w[m] * row_sum[m];
        for n in 0..c {
            let tmn = t[m * c + n];
            let other_col = wcol[n] - w[m] * tmn;
            let d_ss = two * w2 * tmn;
            let d_sd = two * w2 * (row_sum[m] - tmn);
            let d_ds = two * w[m] * other_col;
            let d_dd = two * w[m] * (other_row - other_col);
            out[m * c + n] = g_ss * d_ss + g_sd * d_sd + g_ds * d_ds + g_dd * d_dd;
        }
    }
    Ok(out)
}

/// Closed-form translation. The off-diagonal numerator uses
/// `sum_m [N_m sum_n T_C(m, n)]^2`, and `||T_C||^2` is the per-row squared norm.
pub fn translate_closed_form<T: Scalar>(
    t_c: &ClassNtm<T>,
    n_dist: &ClassDistribution<T>,
) -> Result<AffinityNtm<T>> {
    check_pair(t_c, n_dist)?;
    let c = t_c.classes();
    let w = n_dist.proportions();
    let total: T = w.iter().copied().sum();
    let mut row_mass_sq = T::zero();
    let mut diag_weighted = T::zero();
    let mut w_sq = T::zero();
    let mut cross = T::zero();
    for m in 0..c {
        let row = t_c.row(m);
        let r: T = row.iter().copied().sum();
        let q: T = row.iter().map(|&v| v * v).sum();
        row_mass_sq += (w[m] * r) * (w[m] * r);
        diag_weighted += w[m] * w[m] * q;
        w_sq += w[m] * w[m];
        cross += w[m] * (total - w[m]);
    }
    if !(cross > T::zero()) || !(w_sq > T::zero()) {
        return Err(Error::Degenerate(
            "single-class distribution: closed form denominator vanishes".into(),
        ));
    }
    let t01 = (row_mass_sq - diag_weighted) / cross;
    let t11 = diag_weighted / w_sq;
    Ok(AffinityNtm {
        data: [T::one() - t01, t01, T::one() - t11, t11],
    })
}

/// Monte-Carlo estimate of the affinity NTM with binomial standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: [f64; 4],
    pub std_err: [f64; 4],
    /// Sampled pairs per clean-affinity bucket: `[different, same]`.
    pub bucket_sizes: [u64; 2],
}

impl McEstimate {
    /// Largest `|estimate - reference| / std_err` over entries; zero-error
    /// entries must match exactly (returns infinity otherwise).
    pub fn max_z(&self, reference: &[f64; 4]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..4 {
            let d = (self.estimate[i] - reference[i]).abs();
            let z = if self.std_err[i] > 0.0 {
                d / self.std_err[i]
            } else if d < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
        worst
    }
}

pub const MIN_MC_SAMPLES: u64 = 10_000;

fn cdf(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// Samples clean pairs from `N`, corrupts each label through `T_C` and tallies
/// the clean-affinity to noisy-affinity confusion. Single-threaded, so the
/// result depends only on the seed.
pub fn mc_translate_oracle<T: Scalar>(
    t_c: &ClassNtm<T>,
    n_dist: &ClassDistribution<T>,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    check_pair(t_c, n_dist)?;
    if samples < MIN_MC_SAMPLES {
        return Err(Error::Config(format!(
            "oracle needs at least {MIN_MC_SAMPLES} samples, got {samples}"
        )));
    }
    let c = t_c.classes();
    let class_cdf = cdf(n_dist.proportions().iter().map(|v| v.as_f64()));
    let row_cdfs: Vec<Vec<f64>> = (0..c)
        .map(|m| cdf(t_c.row(m).iter().map(|v| v.as_f64())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // counts[clean][noisy]
    let mut counts = [[0u64; 2]; 2];
    for _ in 0..samples {
        let m1 = draw(&class_cdf, rng.random::<f64>());
        let m2 = draw(&class_cdf, rng.random::<f64>());
        let n1 = draw(&row_cdfs[m1], rng.random::<f64>());
        let n2 = draw(&row_cdfs[m2], rng.random::<f64>());
        counts[(m1 == m2) as usize][(n1 == n2) as usize] += 1;
    }
    let mut estimate = [0.0; 4];
    let mut std_err = [0.0; 4];
    let mut bucket_sizes = [0u64; 2];
    for a in 0..2 {
        let total = counts[a][0] + counts[a][1];
        if total == 0 {
            let which = if a == 0 { "different" } else { "same" };
            return Err(Error::InsufficientSamples(format!(
                "no clean pairs of the {which}-class affinity were drawn"
            )));
        }
        bucket_sizes[a] = total;
        for b in 0..2 {
            let p = counts[a][b] as f64 / total as f64;
            estimate[a * 2 + b] = p;
            std_err[a * 2 + b] = (p * (1.0 - p) / total as f64).sqrt();
        }
    }
    Ok(McEstimate {
        estimate,
        std_err,
        bucket_sizes,
    })
}

/// Log-absolute-determinant volume surrogate and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeReg<T> {
    pub value: T,
    /// Gradient with respect to the (floored) matrix entries.
    pub grad: Vec<T>,
    /// Set when the matrix was numerically singular after flooring.
    pub singular: bool,
}

pub fn volume_reg<T: Scalar>(t_c: &ClassNtm<T>) -> VolumeReg<T> {
    let c = t_c.classes();
    let floor = T::lit(VOLUME_FLOOR);
    let a: Vec<T> = t_c.data().iter().map(|&v| v.max(floor)).collect();
    match lu_logdet_inverse(&a, c) {
        Some((logdet, inv)) => {
            // d log|det A| / dA = A^{-T}; floored entries get no gradient.
            let mut grad = vec![T::zero(); c * c];
            for i in 0..c {
                for j in 0..c {
                    if t_c.data()[i * c + j] >= floor {
                        grad[i * c + j] = inv[j * c + i];
                    }
                }
            }
            VolumeReg {
                value: logdet,
                grad,
                singular: false,
            }
        }
        None => {
            log::warn!("class NTM is singular after flooring; volume term clamped");
            VolumeReg {
                value: floor.ln() * <T as Scalar>::from_usize(c),
                grad: vec![T::zero(); c * c],
                singular: true,
            }
        }
    }
}

/// LU with partial pivoting. Returns `(log|det|, inverse)` or `None` when a
/// pivot underflows.
fn lu_logdet_inverse<T: Scalar>(a: &[T], c: usize) -> Option<(T, Vec<T>)> {
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..c).collect();
    let mut logdet = T::zero();
    let tiny = T::lit(1e-300).max(T::min_positive_value());
    for k in 0..c {
        let p = (k..c)
            .max_by(|&x, &y| lu[x * c + k].abs().partial_cmp(&lu[y * c + k].abs()).unwrap())
            .unwrap();
        if lu[p * c + k].abs() <= tiny {
            return None;
        }
        if p != k {
            for j in 0..c {
                lu.swap(k * c + j, p * c + j);
            }
            perm.swap(k, p);
        }
        let pivot = lu[k * c + k];
        logdet += pivot.abs().ln();
        for i in k + 1..c {
            let f = lu[i * c + k] / pivot;
            lu[i * c + k] = f;
            for j in k + 1..c {
                let v = lu[k * c + j];
                lu[i * c + j] -= f * v;
            }
        }
    }
    let mut inv = vec![T::zero(); c * c];
    for col in 0..c {
        let mut x: Vec<T> = (0..c)
            .map(|i| if perm[i] == col { T::one() } else { T::zero() })
            .collect();
        for i in 0..c {
            for j in 0..i {
                let v = lu[i * c + j] * x[j];
                x[i] -= v;
            }
        }
        for i in (0..c).rev() {
            for j in i + 1..c {
                let v = lu[i * c + j] * x[j];
                x[i] -= v;
            }
            x[i] /= lu[i * c + i];
        }
        for i in 0..c {
            inv[i * c + col] = x[i];
        }
    }
    Some((logdet, inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asym() -> ClassNtm<f64> {
        ClassNtm::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    fn close4(a: &[f64; 4], b: &[f64; 4], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_rows() {
        let p = NtmParams::<f64>::new(3, vec![0.0; 9]).unwrap();
        let t = ntm_from_params(&p).unwrap();
        assert!(t.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let p = NtmParams::new(3, vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let t = ntm_from_params(&p).unwrap();
        let e10 = 10f64.exp();
        assert!((t.get(0, 0) - e10 / (e10 + 2.0)).abs() < 1e-15);
        assert!(t.get(0, 0) > 0.9999);
    }

    #[test]
    fn non_finite_params_rejected() {
        assert!(NtmParams::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_translates_to_identity() {
        let n = ClassDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let t = ClassNtm::<f64>::identity(3);
        let ex = translate_exact(&t, &n).unwrap();
        let cf = translate_closed_form(&t, &n).unwrap();
        assert_eq!(ex.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(close4(cf.data(), &[1.0, 0.0, 0.0, 1.0], 1e-15));
    }

    #[test]
    fn uniform_noise_destroys_affinity() {
        let n = ClassDistribution::uniform(2);
        let t = ClassNtm::new(2, vec![0.5; 4]).unwrap();
        assert!(close4(translate_exact(&t, &n).unwrap().data(), &[0.5; 4], 1e-15));
        assert!(close4(translate_closed_form(&t, &n).unwrap().data(), &[0.5; 4], 1e-15));
    }

    #[test]
    fn asymmetric_pair_sums() {
        let n = ClassDistribution::uniform(2);
        let ex = translate_exact(&asym(), &n).unwrap();
        assert!(close4(ex.data(), &[0.74, 0.26, 0.25, 0.75], 1e-12));
        let cf = translate_closed_form(&asym(), &n).unwrap();
        assert!((cf.get(0, 1) - 0.25).abs() < 1e-12);
        assert!((cf.get(1, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_degenerate() {
        let n = ClassDistribution::new(vec![1.0]).unwrap();
        assert!(translate_exact(&ClassNtm::<f64>::identity(1), &n).is_err());
        let n = ClassDistribution::new(vec![1.0, 0.0]).unwrap();
        assert!(translate_exact(&asym(), &n).is_err());
        assert!(translate_closed_form(&asym(), &n).is_err());
    }

    #[test]
    fn oracle_is_seeded() {
        let n = ClassDistribution::uniform(2);
        let a = mc_translate_oracle(&asym(), &n, 20_000, 11).unwrap();
        let b = mc_translate_oracle(&asym(), &n, 20_000, 11).unwrap();
        assert_eq!(a, b);
        assert!(mc_translate_oracle(&asym(), &n, 100, 11).is_err());
    }

    #[test]
    fn oracle_identity_is_exact() {
        let n = ClassDistribution::new(vec![0.6, 0.3, 0.1]).unwrap();
        let est = mc_translate_oracle(&ClassNtm::<f64>::identity(3), &n, 10_000, 5).unwrap();
        assert_eq!(est.estimate, [1.0, 0.0, 0.0, 1.0]);
        assert_eq!(est.max_z(&[1.0, 0.0, 0.0, 1.0]), 0.0);
    }

    #[test]
    fn oracle_empty_bucket() {
        let n = ClassDistribution::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            mc_translate_oracle(&asym(), &n, 10_000, 1),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn volume_of_identity_and_hand_case() {
        let v = volume_reg(&ClassNtm::<f64>::identity(4));
        assert!(v.value.abs() < 1e-9, "{}", v.value);
        let v = volume_reg(&asym());
        assert!((v.value - 0.7f64.ln()).abs() < 1e-12);
        assert!((v.value + 0.3567).abs() < 1e-4);
        // inverse transpose of [[.9,.1],[.2,.8]] / 0.7
        let expect = [0.8 / 0.7, -0.2 / 0.7, -0.1 / 0.7, 0.9 / 0.7];
        for (g, e) in v.grad.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_volume_is_flagged() {
        let t = ClassNtm::new(2, vec![0.5; 4]).unwrap();
        assert!(volume_reg(&t).singular);
    }

    #[test]
    fn json_round_trip() {
        let t = asym();
        let j = serde_json::to_string(&t.to_json()).unwrap();
        assert_eq!(j, r#"{"classes":2,"rows":[[0.9,0.1],[0.2,0.8]]}"#);
        let back = ClassNtm::<f64>::from_json(&serde_json::from_str(&j).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
