#![allow(dead_code)]

use jcas::{AffinityMap, ClassDistribution, ClassNtm, FeatureMap, LabelMap, ProbMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Row-stochastic matrix with every entry at least 0.01.
pub fn random_ntm(rng: &mut ChaCha8Rng, c: usize) -> ClassNtm<f64> {
    let rows: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    ClassNtm::from_rows(&rows).unwrap()
}

pub fn random_distribution(rng: &mut ChaCha8Rng, c: usize) -> ClassDistribution<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    ClassDistribution::new(raw.iter().map(|v| v / s).collect()).unwrap()
}

pub fn random_prob_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ProbMap<f64> {
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    ProbMap::new(h, w, c, data).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap<f64> {
    let data = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(h, w, d, data).unwrap()
}

pub fn random_affinity(rng: &mut ChaCha8Rng, n: usize) -> AffinityMap<f64> {
    let w = (0..n * n).map(|_| rng.random_range(0.01..1.0)).collect();
    AffinityMap::from_weights(n, w).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LabelMap {
    let data = (0..h * w).map(|_| rng.random_range(0..c) as u8).collect();
    LabelMap::new(h, w, data).unwrap()
}
