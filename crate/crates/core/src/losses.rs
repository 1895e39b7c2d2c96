//! Training losses. Each returns a [`LossBundle`] holding the mean loss and its
//! gradient with respect to every continuous input.

use std::collections::BTreeMap;

use crate::affinity::AffinityMap;
use crate::error::{Error, Result};
use crate::grid::{OneHotMap, ProbMap};
use crate::ntm::{translate_exact, translate_exact_backward, volume_reg, AffinityNtm, ClassDistribution, ClassNtm};
use crate::scalar::{pairwise_sum, Scalar};

/// Floor on log arguments.
pub const LOG_EPS: f64 = 1e-12;

/// Default weight of the consistency term.
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Smallest usable log floor for `T` (`1 - eps` must differ from 1).
pub fn log_eps<T: Scalar>() -> T {
    T::lit(LOG_EPS.max(T::epsilon().as_f64()))
}

/// Which input a gradient belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Wrt {
    /// Per-pixel class probabilities (`n x C`).
    Prob,
    /// Class-level NTM entries (`C x C`).
    ClassNtm,
    /// Affinity map entries (`n x n`).
    Affinity,
    /// Affinity-level NTM entries (`2 x 2`).
    AffinityNtm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle<T> {
    pub value: T,
    pub grads: BTreeMap<Wrt, Vec<T>>,
}

impl<T: Scalar> LossBundle<T> {
    pub fn new(value: T) -> Self {
        LossBundle {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with(mut self, wrt: Wrt, grad: Vec<T>) -> Self {
        self.grads.insert(wrt, grad);
        self
    }

    pub fn grad(&self, wrt: Wrt) -> Option<&[T]> {
        self.grads.get(&wrt).map(Vec::as_slice)
    }

    /// `self + weight * other`, summing gradients key by key.
    pub fn add_scaled(&mut self, other: &LossBundle<T>, weight: T) -> Result<()> {
        self.value += weight * other.value;
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(dst) => {
                    if dst.len() != g.len() {
                        return Err(Error::shape(format!("gradient {k:?} length")));
                    }
                    dst.iter_mut().zip(g).for_each(|(d, &v)| *d += weight * v);
                }
                None => {
                    self.grads.insert(*k, g.iter().map(|&v| weight * v).collect());
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    xs.iter_mut().for_each(|v| *v /= s);
}

fn check_dims<T: Scalar>(p: &ProbMap<T>, noisy: &OneHotMap) -> Result<()> {
    if p.height() != noisy.height() || p.width() != noisy.width() || p.classes() != noisy.classes()
    {
        return Err(Error::shape(format!(
            "prediction {}x{}x{} vs labels {}x{}x{}",
            p.height(),
            p.width(),
            p.classes(),
            noisy.height(),
            noisy.width(),
            noisy.classes()
        )));
    }
    Ok(())
}

/// Mean pixel-wise cross-entropy against one-hot noisy labels.
pub fn ce_loss<T: Scalar>(p: &ProbMap<T>, noisy: &OneHotMap) -> Result<LossBundle<T>> {
    check_dims(p, noisy)?;
    let n = p.pixels();
    let c = p.classes();
    let eps = log_eps::<T>();
    let inv_n = T::one() / <T as Scalar>::from_usize(n);
    let mut terms = vec![T::zero(); n];
    let mut grad = vec![T::zero(); n * c];
    for k in 0..n {
        let y = noisy.hot(k);
        let pk = p.pixel(k)[y];
        terms[k] = -pk.max(eps).ln();
        if pk > eps {
            grad[k * c + y] = -inv_n / pk;
        }
    }
    Ok(LossBundle::new(pairwise_sum(&terms) * inv_n).with(Wrt::Prob, grad))
}

/// Forward-corrected cross-entropy `-log [P(k) T_C]_y`.
pub fn class_corrected_loss<T: Scalar>(
    p: &ProbMap<T>,
    t_c: &ClassNtm<T>,
    noisy: &OneHotMap,
) -> Result<LossBundle<T>> {
    check_dims(p, noisy)?;
    let c = p.classes();
    if t_c.classes() != c {
        return Err(Error::shape(format!(
            "NTM has {} classes, prediction has {c}",
            t_c.classes()
        )));
    }
    let n = p.pixels();
    let eps = log_eps::<T>();
    let inv_n = T::one() / <T as Scalar>::from_usize(n);
    let mut terms = vec![T::zero(); n];
    let mut grad_p = vec![T::zero(); n * c];
    let mut grad_t = vec![T::zero(); c * c];
    for k in 0..n {
        let y = noisy.hot(k);
        let pk = p.pixel(k);
        let mut s = T::zero();
        for m in 0..c {
            s += pk[m] * t_c.get(m, y);
        }
        terms[k] = -s.max(eps).ln();
        if s > eps {
            let w = -inv_n / s;
            for m in 0..c {
                grad_p[k * c + m] = w * t_c.get(m, y);
                grad_t[m * c + y] += w * pk[m];
            }
        }
    }
    Ok(LossBundle::new(pairwise_sum(&terms) * inv_n)
        .with(Wrt::Prob, grad_p)
        .with(Wrt::ClassNtm, grad_t))
}

/// Binary pair labels: `n x n` row-major, each entry 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLabels {
    n: usize,
    data: Vec<u8>,
}

impl PairLabels {
    pub fn new(n: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::shape(format!("pair labels of size {n}")));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Degenerate("pair labels must be binary".into()));
        }
        Ok(PairLabels { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.n + j]
    }
}

fn check_pairs<T: Scalar>(p: &AffinityMap<T>, y: &PairLabels) -> Result<()> {
    if p.n() != y.n() {
        return Err(Error::shape(format!(
            "affinity map size {} vs pair labels {}",
            p.n(),
            y.n()
        )));
    }
    Ok(())
}

/// Whether an affinity entry sits on the `[eps, 1 - eps]` clamp.
pub fn affinity_clamped<T: Scalar>(v: T) -> bool {
    let eps = log_eps::<T>();
    v <= eps || v >= T::one() - eps
}

/// Mean binary cross-entropy over all ordered pairs, diagonal included.
pub fn affinity_bce<T: Scalar>(p_aff: &AffinityMap<T>, noisy_aff: &PairLabels) -> Result<LossBundle<T>> {
    check_pairs(p_aff, noisy_aff)?;
    let eps = log_eps::<T>();
    let hi = T::one() - eps;
    let count = p_aff.data().len();
    let inv = T::one() / <T as Scalar>::from_usize(count);
    let mut terms = vec![T::zero(); count];
    let mut grad = vec![T::zero(); count];
    for (idx, (&raw, &y)) in p_aff.data().iter().zip(noisy_aff.data()).enumerate() {
        let p = raw.max(eps).min(hi);
        let clamped = affinity_clamped(raw);
        if y == 1 {
            terms[idx] = -p.ln();
            if !clamped {
                grad[idx] = -inv / p;
            }
        } else {
            terms[idx] = -(T::one() - p).ln();
            if !clamped {
                grad[idx] = inv / (T::one() - p);
            }
        }
    }
    Ok(LossBundle::new(pairwise_sum(&terms) * inv).with(Wrt::Affinity, grad))
}

/// Affinity BCE after pushing each pair's `[1 - p', p']` through `T_A`.
pub fn affinity_corrected_loss<T: Scalar>(
    p_aff: &AffinityMap<T>,
    t_a: &AffinityNtm<T>,
    noisy_aff: &PairLabels,
) -> Result<LossBundle<T>> {
    check_pairs(p_aff, noisy_aff)?;
    let eps = log_eps::<T>();
    let hi = T::one() - eps;
    let [t00, t01, t10, t11] = *t_a.data();
    let count = p_aff.data().len();
    let inv = T::one() / <T as Scalar>::from_usize(count);
    let mut terms = vec![T::zero(); count];
    let mut grad = vec![T::zero(); count];
    let mut gt = [T::zero(); 4];
    for (idx, (&raw, &y)) in p_aff.data().iter().zip(noisy_aff.data()).enumerate() {
        let p = raw.max(eps).min(hi);
        let clamped = affinity_clamped(raw);
        let lo = T::one() - p;
        if y == 1 {
            let q1 = lo * t01 + p * t11;
            terms[idx] = -q1.max(eps).ln();
            if q1 > eps {
                let w = -inv / q1;
                if !clamped {
                    grad[idx] = w * (t11 - t01);
                }
                gt[1] += w * lo;
                gt[3] += w * p;
            }
        } else {
            let q0 = lo * t00 + p * t10;
            terms[idx] = -q0.max(eps).ln();
            if q0 > eps {
                let w = -inv / q0;
                if !clamped {
                    grad[idx] = w * (t10 - t00);
                }
                gt[0] += w * lo;
                gt[2] += w * p;
            }
        }
    }
    Ok(LossBundle::new(pairwise_sum(&terms) * inv)
        .with(Wrt::Affinity, grad)
        .with(Wrt::AffinityNtm, gt.to_vec()))
}

/// Mean squared difference between the translated class NTM and `T_A`.
pub fn cacr<T: Scalar>(
    t_c: &ClassNtm<T>,
    t_a: &AffinityNtm<T>,
    n_dist: &ClassDistribution<T>,
) -> Result<LossBundle<T>> {
    let translated = translate_exact(t_c, n_dist)?;
    let quarter = T::lit(0.25);
    let mut value = T::zero();
    let mut diff = [T::zero(); 4];
    for i in 0..4 {
        diff[i] = translated.data()[i] - t_a.data()[i];
        value += diff[i] * diff[i];
    }
    let two_q = T::lit(2.0) * quarter;
    let g_trans = diff.map(|d| two_q * d);
    let grad_c = translate_exact_backward(t_c, n_dist, &g_trans)?;
    Ok(LossBundle::new(value * quarter)
        .with(Wrt::ClassNtm, grad_c)
        .with(Wrt::AffinityNtm, g_trans.iter().map(|&g| -g).collect()))
}

/// Log-determinant of `T_C` as a bundle over [`Wrt::ClassNtm`].
pub fn volume_loss<T: Scalar>(t_c: &ClassNtm<T>) -> LossBundle<T> {
    let v = volume_reg(t_c);
    LossBundle::new(v.value).with(Wrt::ClassNtm, v.grad)
}

/// `class + affinity + lambda * cacr (+ weight * volume)`.
pub fn joint_loss<T: Scalar>(
    class_term: &LossBundle<T>,
    affinity_term: &LossBundle<T>,
    cacr_term: &LossBundle<T>,
    lambda: T,
    volume: Option<(&LossBundle<T>, T)>,
) -> Result<LossBundle<T>> {
    if lambda < T::zero() || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let mut out = LossBundle::new(T::zero());
    out.add_scaled(class_term, T::one())?;
    out.add_scaled(affinity_term, T::one())?;
    out.add_scaled(cacr_term, lambda)?;
    if let Some((v, w)) = volume {
        out.add_scaled(v, w)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{one_hot, LabelMap};

    fn single(p: [f64; 2]) -> ProbMap<f64> {
        ProbMap::new(1, 1, 2, p.to_vec()).unwrap()
    }

    fn label(c: u8, classes: usize) -> OneHotMap {
        one_hot(&LabelMap::new(1, 1, vec![c]).unwrap(), classes).unwrap()
    }

    #[test]
    fn ce_single_pixel() {
        let l = ce_loss(&single([0.7, 0.3]), &label(0, 2)).unwrap();
        assert!((l.value - 0.35667494393873245).abs() < 1e-12);
        assert!((l.value - 0.35667).abs() < 1e-5);
    }

    #[test]
    fn ce_perfect_prediction() {
        let eps = 1e-12;
        let l = ce_loss(&single([1.0 - eps, eps]), &label(0, 2)).unwrap();
        assert!(l.value < 1e-11);
    }

    #[test]
    fn ce_dimension_mismatch() {
        let p = ProbMap::<f64>::uniform(1, 2, 2).unwrap();
        assert!(ce_loss(&p, &label(0, 2)).is_err());
    }

    #[test]
    fn corrected_single_pixel() {
        let t = ClassNtm::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let l = class_corrected_loss(&single([0.7, 0.3]), &t, &label(0, 2)).unwrap();
        assert!((l.value + 0.65f64.ln()).abs() < 1e-12);
        assert!((l.value - 0.43078).abs() < 1e-5);
    }

    #[test]
    fn corrected_identity_is_ce() {
        let p = single([0.2, 0.8]);
        let y = label(1, 2);
        let a = ce_loss(&p, &y).unwrap();
        let b = class_corrected_loss(&p, &ClassNtm::identity(2), &y).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad(Wrt::Prob), b.grad(Wrt::Prob));
    }

    #[test]
    fn bce_self_pair() {
        let p = AffinityMap::new(1, vec![1.0f64]).unwrap();
        let y = PairLabels::new(1, vec![1]).unwrap();
        assert!(affinity_bce(&p, &y).unwrap().value < 1e-11);

        let p = AffinityMap::from_raw(1, vec![0.8f64]).unwrap();
        let l = affinity_bce(&p, &y).unwrap();
        assert!((l.value + 0.8f64.ln()).abs() < 1e-12);
        assert!((l.value - 0.22314).abs() < 1e-5);
    }

    #[test]
    fn corrected_affinity_hand_case() {
        let p = AffinityMap::from_raw(1, vec![0.8f64]).unwrap();
        let y = PairLabels::new(1, vec![1]).unwrap();
        let t = AffinityNtm::new([0.9, 0.1, 0.2, 0.8]).unwrap();
        let l = affinity_corrected_loss(&p, &t, &y).unwrap();
        assert!((l.value + 0.66f64.ln()).abs() < 1e-12);
        assert!((l.value - 0.41552).abs() < 1e-5);
    }

    #[test]
    fn cacr_zero_at_translation() {
        let t = ClassNtm::<f64>::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let n = ClassDistribution::uniform(2);
        let ta = translate_exact(&t, &n).unwrap();
        assert!(cacr(&t, &ta, &n).unwrap().value.abs() < 1e-30);
    }

    #[test]
    fn cacr_identity_vs_uniform() {
        let n = ClassDistribution::uniform(3);
        let ta = AffinityNtm::new([0.5; 4]).unwrap();
        let l = cacr(&ClassNtm::<f64>::identity(3), &ta, &n).unwrap();
        assert!((l.value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn joint_sums_components() {
        let a = LossBundle::new(0.4308f64).with(Wrt::Prob, vec![1.0, 2.0]);
        let b = LossBundle::new(0.4155f64).with(Wrt::Affinity, vec![3.0]);
        let c = LossBundle::new(0.25f64).with(Wrt::ClassNtm, vec![4.0]);
        let j = joint_loss(&a, &b, &c, 0.01, None).unwrap();
        assert!((j.value - 0.8488).abs() < 1e-12);
        assert_eq!(j.grad(Wrt::ClassNtm).unwrap(), &[0.04]);
        let z = joint_loss(&a, &b, &c, 0.0, None).unwrap();
        assert!((z.value - (0.4308 + 0.4155)).abs() < 1e-15);
        assert!(joint_loss(&a, &b, &c, -1.0, None).is_err());
    }

    #[test]
    fn pair_labels_must_be_binary() {
        assert!(PairLabels::new(1, vec![2]).is_err());
        assert!(PairLabels::new(2, vec![1, 0, 0]).is_err());
    }
}
