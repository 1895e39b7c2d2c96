//! Synthetic label noise, affinity labels and noise-rate measurement.

pub mod morph;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::losses::PairLabels;
use crate::ntm::{ClassDistribution, ClassNtm, NtmJson};
use crate::scalar::Scalar;
use morph::Mask;

/// Label-noise pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Flip with probability `rate` to a uniformly drawn other class.
    Symmetric { rate: f64 },
    /// Flip with probability `rate` to the next class, cyclically.
    Asymmetric { rate: f64 },
    /// Draw each noisy label from the clean label's row of `ntm`.
    Ntm { ntm: NtmJson },
    /// Replace each foreground component by its covering ellipse, then dilate
    /// or erode it by a random radius.
    Ellipse { max_dilate: usize, max_erode: usize },
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::Symmetric { rate: 0.5 }
    }
}

impl NoiseSpec {
    /// The class NTM this pattern draws from; ellipse noise has none.
    pub fn class_ntm(&self, classes: usize) -> Result<ClassNtm<f64>> {
        self.validate()?;
        match self {
            NoiseSpec::Symmetric { rate } => ClassNtm::symmetric(classes, *rate),
            NoiseSpec::Asymmetric { rate } => {
                if classes < 2 {
                    return Err(Error::Degenerate("asymmetric noise needs at least two classes".into()));
                }
                let mut data = vec![0.0; classes * classes];
                for m in 0..classes {
                    data[m * classes + m] += 1.0 - rate;
                    data[m * classes + (m + 1) % classes] += rate;
                }
                ClassNtm::new(classes, data)
            }
            NoiseSpec::Ntm { ntm } => {
                let t = ClassNtm::from_json(ntm)?;
                if t.classes() != classes {
                    return Err(Error::shape(format!("NTM has {} classes, expected {classes}", t.classes())));
                }
                Ok(t)
            }
            NoiseSpec::Ellipse { .. } => Err(Error::Config("ellipse noise has no class NTM".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::Symmetric { rate } | NoiseSpec::Asymmetric { rate } => {
                if !(0.0..=1.0).contains(rate) {
                    return Err(Error::Config(format!("noise rate {rate} outside [0, 1]")));
                }
            }
            NoiseSpec::Ntm { ntm } => {
                ClassNtm::<f64>::from_json(ntm)?;
            }
            NoiseSpec::Ellipse { .. } => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub class_noise_rate: f64,
    /// Over off-diagonal ordered pairs.
    pub affinity_noise_rate: f64,
}

/// `Y'(k1, k2) = 1` iff the two pixels carry the same label.
pub fn affinity_label(labels: &LabelMap) -> PairLabels {
    let d = labels.data();
    let n = d.len();
    let mut out = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (d[i] == d[j]) as u8;
        }
    }
    PairLabels::new(n, out).expect("square by construction")
}

pub fn corrupt(labels: &LabelMap, classes: usize, spec: &NoiseSpec, seed: u64) -> Result<LabelMap> {
    spec.validate()?;
    labels.check_classes(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.clone();
    match spec {
        NoiseSpec::Symmetric { rate } => {
            if classes < 2 {
                return Err(Error::Config("symmetric noise needs at least two classes".into()));
            }
            for v in out.data_mut() {
                if rng.random::<f64>() < *rate {
                    let shift = rng.random_range(1..classes);
                    *v = ((*v as usize + shift) % classes) as u8;
                }
            }
        }
        NoiseSpec::Asymmetric { rate } => {
            if classes < 2 {
                return Err(Error::Config("asymmetric noise needs at least two classes".into()));
            }
            for v in out.data_mut() {
                if rng.random::<f64>() < *rate {
                    *v = ((*v as usize + 1) % classes) as u8;
                }
            }
        }
        NoiseSpec::Ntm { ntm } => {
            let t = ClassNtm::<f64>::from_json(ntm)?;
            if t.classes() != classes {
                return Err(Error::Config(format!(
                    "noise NTM has {} classes, labels use {classes}",
                    t.classes()
                )));
            }
            for v in out.data_mut() {
                let u: f64 = rng.random();
                let row = t.row(*v as usize);
                let mut acc = 0.0;
                let mut pick = classes - 1;
                for (n, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = n;
                        break;
                    }
                }
                *v = pick as u8;
            }
        }
        NoiseSpec::Ellipse {
            max_dilate,
            max_erode,
        } => {
            return Ok(ellipse_noise(labels, classes, *max_dilate, *max_erode, &mut rng));
        }
    }
    Ok(out)
}

fn ellipse_noise(
    labels: &LabelMap,
    classes: usize,
    max_dilate: usize,
    max_erode: usize,
    rng: &mut ChaCha8Rng,
) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    if labels.data().iter().all(|&l| l == 0) {
        log::warn!("ellipse noise on an image without foreground; returning input");
        return labels.clone();
    }
    let mut shapes: Vec<(u8, Mask)> = Vec::new();
    for class in 1..classes {
        let mut mask = Mask::new(h, w);
        for (k, &l) in labels.data().iter().enumerate() {
            mask.data[k] = l as usize == class;
        }
        for comp in morph::components(&mask) {
            let ellipse = morph::covering_ellipse(&comp, h, w);
            let grow = rng.random::<bool>();
            let warped = if grow {
                morph::dilate(&ellipse, rng.random_range(0..=max_dilate))
            } else {
                morph::erode(&ellipse, rng.random_range(0..=max_erode))
            };
            shapes.push((class as u8, warped));
        }
    }
    // Descending class index: lower classes are painted last and win overlaps.
    let mut out = LabelMap::filled(h, w, 0).expect("nonzero dimensions");
    for (class, mask) in shapes.iter().rev() {
        for (k, &inside) in mask.data.iter().enumerate() {
            if inside {
                out.data_mut()[k] = *class;
            }
        }
    }
    out
}

/// Confusion counts `A[a][b]` = pixels with clean `a` and noisy `b`.
fn confusion(clean: &LabelMap, noisy: &LabelMap, classes: usize) -> Vec<u64> {
    let mut a = vec![0u64; classes * classes];
    for (&c, &n) in clean.data().iter().zip(noisy.data()) {
        a[c as usize * classes + n as usize] += 1;
    }
    a
}

pub fn noise_rates(clean: &LabelMap, noisy: &LabelMap) -> Result<NoiseReport> {
    clean.same_shape(noisy)?;
    let classes = clean.class_bound().max(noisy.class_bound());
    let a = confusion(clean, noisy, classes);
    let n = clean.len() as u128;
    let mut changed = 0u128;
    let (mut rows, mut cols, mut cells) = (0u128, 0u128, 0u128);
    for i in 0..classes {
        let r: u128 = (0..classes).map(|j| a[i * classes + j] as u128).sum();
        let c: u128 = (0..classes).map(|j| a[j * classes + i] as u128).sum();
        rows += r * r;
        cols += c * c;
        for j in 0..classes {
            let v = a[i * classes + j] as u128;
            cells += v * v;
            if i != j {
                changed += v;
            }
        }
    }
    // Ordered pairs whose same/different status differs; diagonal pairs never do.
    let mismatched = rows + cols - 2 * cells;
    let off_diag = n * (n - 1);
    Ok(NoiseReport {
        class_noise_rate: changed as f64 / n as f64,
        affinity_noise_rate: if off_diag == 0 {
            0.0
        } else {
            mismatched as f64 / off_diag as f64
        },
    })
}

pub fn empirical_ntm<T: Scalar>(clean: &LabelMap, noisy: &LabelMap, classes: usize) -> Result<ClassNtm<T>> {
    clean.same_shape(noisy)?;
    clean.check_classes(classes)?;
    noisy.check_classes(classes)?;
    let a = confusion(clean, noisy, classes);
    let mut data = Vec::with_capacity(classes * classes);
    for m in 0..classes {
        let row = &a[m * classes..(m + 1) * classes];
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(Error::UndefinedRow(m));
        }
        data.extend(row.iter().map(|&v| T::lit(v as f64 / total as f64)));
    }
    ClassNtm::new(classes, data)
}

/// Noise statistics over a set of (clean, noisy) label maps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSummary {
    pub images: usize,
    pub mean_class_noise_rate: f64,
    pub mean_affinity_noise_rate: f64,
    /// Fraction of images whose affinity rate is strictly below their class rate.
    pub affinity_below_class: f64,
    /// Pooled over all pixels; `None` when some class never occurs clean.
    pub empirical_ntm: Option<NtmJson>,
    pub per_image: Vec<NoiseReport>,
}

pub fn summarize(clean: &[LabelMap], noisy: &[LabelMap], classes: usize) -> Result<NoiseSummary> {
    if clean.len() != noisy.len() {
        return Err(Error::shape(format!("{} clean vs {} noisy maps", clean.len(), noisy.len())));
    }
    if clean.is_empty() {
        return Err(Error::Degenerate("no label maps given".into()));
    }
    let mut per_image = Vec::with_capacity(clean.len());
    let mut pooled = vec![0u64; classes * classes];
    for (c, n) in clean.iter().zip(noisy) {
        c.check_classes(classes)?;
        n.check_classes(classes)?;
        per_image.push(noise_rates(c, n)?);
        pooled.iter_mut().zip(confusion(c, n, classes)).for_each(|(a, b)| *a += b);
    }
    let count = per_image.len() as f64;
    let empirical_ntm = (0..classes)
        .map(|m| {
            let row = &pooled[m * classes..(m + 1) * classes];
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row.iter().map(|&v| v as f64 / total as f64).collect::<Vec<_>>())
        })
        .collect::<Option<Vec<_>>>()
        .map(|rows| NtmJson { classes, rows });
    Ok(NoiseSummary {
        images: per_image.len(),
        mean_class_noise_rate: per_image.iter().map(|r| r.class_noise_rate).sum::<f64>() / count,
        mean_affinity_noise_rate: per_image.iter().map(|r| r.affinity_noise_rate).sum::<f64>() / count,
        affinity_below_class: per_image
            .iter()
            .filter(|r| r.affinity_noise_rate < r.class_noise_rate)
            .count() as f64
            / count,
        empirical_ntm,
        per_image,
    })
}

pub fn class_distribution<T: Scalar>(maps: &[LabelMap], classes: usize) -> Result<ClassDistribution<T>> {
    if maps.is_empty() {
        return Err(Error::Degenerate("no label maps given".into()));
    }
    let mut counts = vec![0u64; classes];
    for m in maps {
        m.check_classes(classes)?;
        for &l in m.data() {
            counts[l as usize] += 1;
        }
    }
    let dist = ClassDistribution::from_counts(&counts)?;
    if dist.is_degenerate() {
        log::warn!("class distribution has a single class; affinity translation is undefined");
    }
    Ok(dist)
}
