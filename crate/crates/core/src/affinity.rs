//! Pair-wise affinity maps and differentiated affinity reasoning.
//!
//! Forward passes are exposed through small "tape" structs that keep the
//! intermediates needed by the matching vector-Jacobian products.

use crate::error::{Error, Result};
use crate::grid::{simplex_tol, FeatureMap, ProbMap};
use crate::scalar::Scalar;

/// Floor applied to refined probabilities before renormalisation.
pub const DAR_FLOOR: f64 = 1e-8;

/// Row-stochastic `n x n` matrix with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMap<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> AffinityMap<T> {
    pub fn new(n: usize, data: Vec<T>) -> Result<Self> {
        let map = Self::from_raw(n, data)?;
        let tol = simplex_tol::<T>() * (n as f64).max(1.0);
        for i in 0..n {
            let row = map.row(i);
            if row.iter().any(|v| !v.is_finite() || *v < T::zero() || *v > T::one()) {
                return Err(Error::Degenerate(format!("affinity row {i} leaves [0, 1]")));
            }
            let s: T = row.iter().copied().sum();
            if (s.as_f64() - 1.0).abs() > tol {
                return Err(Error::Degenerate(format!("affinity row {i} sums to {s}")));
            }
        }
        Ok(map)
    }

    pub(crate) fn from_raw(n: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Degenerate("empty affinity map".into()));
        }
        if data.len() != n * n {
            return Err(Error::shape(format!(
                "affinity map of size {n} needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(AffinityMap { n, data })
    }

    /// Row-normalises a nonnegative matrix.
    pub fn from_weights(n: usize, mut weights: Vec<T>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::shape("affinity weights".to_string()));
        }
        for i in 0..n {
            let row = &mut weights[i * n..(i + 1) * n];
            let s: T = row.iter().copied().sum();
            if !(s > T::zero()) {
                return Err(Error::DegenerateRow(i));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Self::from_raw(n, weights)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }
}

/// Intermediates of the affinity generator.
#[derive(Clone, Debug)]
pub struct AffinityTape<T> {
    channels: usize,
    unit: Vec<T>,
    norms: Vec<T>,
    row_sums: Vec<T>,
    map: AffinityMap<T>,
}

impl<T: Scalar> AffinityTape<T> {
    /// Shifted cosine similarity `(1 + cos) / 2`, normalised along each row.
    pub fn forward(features: &FeatureMap<T>) -> Result<Self> {
        let n = features.pixels();
        let d = features.channels();
        let mut unit = vec![T::zero(); n * d];
        let mut norms = vec![T::zero(); n];
        for k in 0..n {
            let fk = features.pixel(k);
            let norm = fk.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(Error::SingularFeature(k));
            }
            norms[k] = norm;
            for (u, &v) in unit[k * d..(k + 1) * d].iter_mut().zip(fk) {
                *u = v / norm;
            }
        }
        let half = T::lit(0.5);
        let mut data = vec![T::zero(); n * n];
        let mut row_sums = vec![T::zero(); n];
        for i in 0..n {
            let ui = &unit[i * d..(i + 1) * d];
            let row = &mut data[i * n..(i + 1) * n];
            for (j, out) in row.iter_mut().enumerate() {
                let uj = &unit[j * d..(j + 1) * d];
                let cos = dot(ui, uj).max(-T::one()).min(T::one());
                *out = half * (T::one() + cos);
            }
            let s = row.iter().copied().sum::<T>();
            if !(s > T::zero()) {
                return Err(Error::DegenerateRow(i));
            }
            row_sums[i] = s;
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(AffinityTape {
            channels: d,
            unit,
            norms,
            row_sums,
            map: AffinityMap { n, data },
        })
    }

    pub fn map(&self) -> &AffinityMap<T> {
        &self.map
    }

    pub fn into_map(self) -> AffinityMap<T> {
        self.map
    }

    /// Gradient with respect to the feature map given `dL/dP'` (row-major `n x n`).
    pub fn backward(&self, grad_map: &[T]) -> Vec<T> {
        let n = self.map.n;
        let d = self.channels;
        assert_eq!(grad_map.len(), n * n, "affinity gradient shape");
        let half = T::lit(0.5);
        // dL/dcos, from the row normalisation and the (1 + cos) / 2 shift.
        let mut dcos = vec![T::zero(); n * n];
        for i in 0..n {
            let g = &grad_map[i * n..(i + 1) * n];
            let p = self.map.row(i);
            let inner = dot(g, p);
            let scale = half / self.row_sums[i];
            for j in 0..n {
                dcos[i * n + j] = (g[j] - inner) * scale;
            }
        }
        let mut grad_unit = vec![T::zero(); n * d];
        for i in 0..n {
            let gi = &mut grad_unit[i * d..(i + 1) * d];
            for j in 0..n {
                let w = dcos[i * n + j] + dcos[j * n + i];
                if w == T::zero() {
                    continue;
                }
                let uj = &self.unit[j * d..(j + 1) * d];
                for (g, &u) in gi.iter_mut().zip(uj) {
                    *g += w * u;
                }
            }
        }
        let mut grad = vec![T::zero(); n * d];
        for k in 0..n {
            let u = &self.unit[k * d..(k + 1) * d];
            let gu = &grad_unit[k * d..(k + 1) * d];
            let along = dot(u, gu);
            for c in 0..d {
                grad[k * d + c] = (gu[c] - u[c] * along) / self.norms[k];
            }
        }
        grad
    }
}

pub fn affinity_map<T: Scalar>(features: &FeatureMap<T>) -> Result<AffinityMap<T>> {
    AffinityTape::forward(features).map(AffinityTape::into_map)
}

/// `norm(1 - P')` together with the row sums needed for its gradient.
#[derive(Clone, Debug)]
pub struct ReverseTape<T> {
    row_sums: Vec<T>,
    map: AffinityMap<T>,
}

impl<T: Scalar> ReverseTape<T> {
    pub fn forward(p: &AffinityMap<T>) -> Result<Self> {
        let n = p.n();
        let mut data: Vec<T> = p.data().iter().map(|&v| T::one() - v).collect();
        let mut row_sums = vec![T::zero(); n];
        for i in 0..n {
            let row = &mut data[i * n..(i + 1) * n];
            let s = row.iter().copied().sum::<T>();
            if !(s > T::zero()) {
                return Err(Error::DegenerateRow(i));
            }
            row_sums[i] = s;
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(ReverseTape {
            row_sums,
            map: AffinityMap { n, data },
        })
    }

    pub fn map(&self) -> &AffinityMap<T> {
        &self.map
    }

    /// Accumulates `dL/dP'` into `out` given `dL/dP'_re`.
    pub fn backward_into(&self, grad_rev: &[T], out: &mut [T]) {
        let n = self.map.n;
        for i in 0..n {
            let g = &grad_rev[i * n..(i + 1) * n];
            let inner = dot(g, self.map.row(i));
            let inv = T::one() / self.row_sums[i];
            for j in 0..n {
                out[i * n + j] -= (g[j] - inner) * inv;
            }
        }
    }
}

pub fn reverse_affinity<T: Scalar>(p: &AffinityMap<T>) -> Result<AffinityMap<T>> {
    ReverseTape::forward(p).map(|t| t.map)
}

/// Differentiated affinity reasoning: the coarse map plus half the difference
/// between intra-class aggregation (`P' Q`) and inter-class aggregation
/// (`P'_re Q`), floored and renormalised per pixel.
#[derive(Clone, Debug)]
pub struct DarTape<T> {
    q: ProbMap<T>,
    affinity: AffinityMap<T>,
    reverse: ReverseTape<T>,
    raw: Vec<T>,
    floored_sums: Vec<T>,
    refined: ProbMap<T>,
}

impl<T: Scalar> DarTape<T> {
    pub fn forward(q: &ProbMap<T>, p_aff: &AffinityMap<T>) -> Result<Self> {
        let n = q.pixels();
        let c = q.classes();
        if n != p_aff.n() {
            return Err(Error::shape(format!(
                "probability map has {n} pixels, affinity map has size {}",
                p_aff.n()
            )));
        }
        let reverse = ReverseTape::forward(p_aff)?;
        let raw = refine_raw(q, p_aff, reverse.map());
        let floor = T::lit(DAR_FLOOR);
        let mut out = vec![T::zero(); n * c];
        let mut floored_sums = vec![T::zero(); n];
        for k in 0..n {
            let src = &raw[k * c..(k + 1) * c];
            let dst = &mut out[k * c..(k + 1) * c];
            for (o, &r) in dst.iter_mut().zip(src) {
                *o = r.max(floor);
            }
            let s = dst.iter().copied().sum::<T>();
            floored_sums[k] = s;
            dst.iter_mut().for_each(|v| *v /= s);
        }
        let refined = ProbMap::from_raw(q.height(), q.width(), c, out)?;
        Ok(DarTape {
            q: q.clone(),
            affinity: p_aff.clone(),
            reverse,
            raw,
            floored_sums,
            refined,
        })
    }

    pub fn refined(&self) -> &ProbMap<T> {
        &self.refined
    }

    pub fn reverse(&self) -> &AffinityMap<T> {
        self.reverse.map()
    }

    /// Pre-floor refinement `Q + (P'Q - P'_re Q) / 2`.
    pub fn raw(&self) -> &[T] {
        &self.raw
    }

    /// Whether `(pixel, class)` hit the probability floor.
    pub fn is_floored(&self, k: usize, class: usize) -> bool {
        self.raw[k * self.q.classes() + class] <= T::lit(DAR_FLOOR)
    }

    /// Returns `(dL/dQ, dL/dP')` given `dL/dP`.
    pub fn backward(&self, grad_p: &[T]) -> (Vec<T>, Vec<T>) {
        let n = self.q.pixels();
        let c = self.q.classes();
        assert_eq!(grad_p.len(), n * c, "refined gradient shape");
        let floor = T::lit(DAR_FLOOR);
        let half = T::lit(0.5);

        let mut graw = vec![T::zero(); n * c];
        for k in 0..n {
            let g = &grad_p[k * c..(k + 1) * c];
            let p = self.refined.pixel(k);
            let inner = dot(g, p);
            let inv = T::one() / self.floored_sums[k];
            for j in 0..c {
                if self.raw[k * c + j] > floor {
                    graw[k * c + j] = (g[j] - inner) * inv;
                }
            }
        }

        let q = self.q.data();
        let a = self.affinity.data();
        let r = self.reverse.map().data();
        let mut grad_q = graw.clone();
        for i in 0..n {
            let gi = &graw[i * c..(i + 1) * c];
            for j in 0..n {
                let w = half * (a[i * n + j] - r[i * n + j]);
                let qj = &mut grad_q[j * c..(j + 1) * c];
                for (dst, &g) in qj.iter_mut().zip(gi) {
                    *dst += w * g;
                }
            }
        }

        let mut grad_a = vec![T::zero(); n * n];
        let mut grad_r = vec![T::zero(); n * n];
        for i in 0..n {
            let gi = &graw[i * c..(i + 1) * c];
            for j in 0..n {
                let v = half * dot(gi, &q[j * c..(j + 1) * c]);
                grad_a[i * n + j] = v;
                grad_r[i * n + j] = -v;
            }
        }
        self.reverse.backward_into(&grad_r, &mut grad_a);
        (grad_q, grad_a)
    }
}

fn refine_raw<T: Scalar>(q: &ProbMap<T>, a: &AffinityMap<T>, r: &AffinityMap<T>) -> Vec<T> {
    let n = q.pixels();
    let c = q.classes();
    let half = T::lit(0.5);
    let qd = q.data();
    let mut raw = qd.to_vec();
    let mut acc = vec![T::zero(); c];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = T::zero());
        let ar = a.row(i);
        let rr = r.row(i);
        for j in 0..n {
            let w = ar[j] - rr[j];
            for (dst, &v) in acc.iter_mut().zip(&qd[j * c..(j + 1) * c]) {
                *dst += w * v;
            }
        }
        for (dst, &v) in raw[i * c..(i + 1) * c].iter_mut().zip(&acc) {
            *dst += half * v;
        }
    }
    raw
}

/// Refinement before the floor and renormalisation.
pub fn dar_refine_unclamped<T: Scalar>(q: &ProbMap<T>, p_aff: &AffinityMap<T>) -> Result<Vec<T>> {
    if q.pixels() != p_aff.n() {
        return Err(Error::shape("dar inputs".to_string()));
    }
    let rev = reverse_affinity(p_aff)?;
    Ok(refine_raw(q, p_aff, &rev))
}

pub fn dar_refine<T: Scalar>(q: &ProbMap<T>, p_aff: &AffinityMap<T>) -> Result<ProbMap<T>> {
    DarTape::forward(q, p_aff).map(|t| t.refined)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_features_give_uniform_affinity() {
        let f = FeatureMap::new(2, 2, 3, [0.3, -1.0, 2.0].repeat(4)).unwrap();
        let p = affinity_map(&f).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25f64).abs() < 1e-15));
    }

    #[test]
    fn orthogonal_pair() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let p = affinity_map(&f).unwrap();
        assert!(close(p.data(), &[2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0], 1e-15));
    }

    #[test]
    fn zero_feature_is_singular() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(affinity_map(&f), Err(Error::SingularFeature(1))));
    }

    #[test]
    fn random_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let data: Vec<f64> = (0..3 * 4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = affinity_map(&FeatureMap::new(3, 4, 5, data).unwrap()).unwrap();
            for i in 0..p.n() {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!(AffinityMap::new(p.n(), p.data().to_vec()).is_ok());
        }
    }

    #[test]
    fn reverse_fixed_point_and_hand_case() {
        let p = AffinityMap::new(2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(reverse_affinity(&p).unwrap().data(), p.data());
        let p = AffinityMap::new(2, vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        let r = reverse_affinity(&p).unwrap();
        assert!(close(r.data(), &[0.1, 0.9, 0.7, 0.3], 1e-15));
    }

    #[test]
    fn reverse_of_single_pixel_is_degenerate() {
        let p = AffinityMap::new(1, vec![1.0f64]).unwrap();
        assert!(matches!(reverse_affinity(&p), Err(Error::DegenerateRow(0))));
    }

    #[test]
    fn dar_hand_example() {
        let q = ProbMap::new(1, 2, 2, vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let p = AffinityMap::new(2, vec![0.6, 0.4, 0.4, 0.6]).unwrap();
        let tape = DarTape::forward(&q, &p).unwrap();
        assert!(close(tape.reverse().data(), &[0.4, 0.6, 0.6, 0.4], 1e-15));
        assert!(close(tape.refined().data(), &[0.84, 0.16, 0.36, 0.64], 1e-12));
    }

    #[test]
    fn dar_size_mismatch() {
        let q = ProbMap::<f64>::uniform(1, 3, 2).unwrap();
        let p = AffinityMap::new(2, vec![0.5; 4]).unwrap();
        assert!(dar_refine(&q, &p).is_err());
    }

    #[test]
    fn identity_affinity_sharpens_against_other_pixels() {
        // P' = I, so P'_re is uniform over the other pixels.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = Vec::new();
        for _ in 0..3 {
            let a: f64 = rng.random_range(0.05..0.95);
            q.extend_from_slice(&[a, 1.0 - a]);
        }
        let qm = ProbMap::new(1, 3, 2, q.clone()).unwrap();
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let p = AffinityMap::new(3, eye).unwrap();
        let raw = dar_refine_unclamped(&qm, &p).unwrap();
        let refined = dar_refine(&qm, &p).unwrap();
        for k in 0..3 {
            // brute force: Q + (Q - mean of the other two) / 2
            for c in 0..2 {
                let others: f64 =
                    (0..3).filter(|&j| j != k).map(|j| q[j * 2 + c]).sum::<f64>() / 2.0;
                let expect = q[k * 2 + c] + 0.5 * (q[k * 2 + c] - others);
                assert!((raw[k * 2 + c] - expect).abs() < 1e-14);
            }
            let px = refined.pixel(k);
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(px.iter().all(|&v| v > 0.0));
        }
    }
}
