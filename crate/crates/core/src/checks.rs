//! Finite-difference checks of every loss, the affinity generator, the
//! refinement step and the composed training objective at random interior
//! points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::affinity::{AffinityMap, AffinityTape, DarTape};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckConfig};
use crate::grid::{one_hot, FeatureMap, LabelMap, OneHotMap, ProbMap};
use crate::losses::{
    affinity_bce, affinity_corrected_loss, cacr, ce_loss, class_corrected_loss, volume_loss, PairLabels, Wrt,
};
use crate::model::{objective, Arch, Mode, ModelParams, Weights};
use crate::ntm::{ntm_from_params, ClassDistribution, NtmParams};
use crate::seed::derive_seed;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

struct Suite {
    cfg: GradCheckConfig,
    entries: Vec<CheckEntry>,
}

impl Suite {
    fn run<F>(&mut self, name: &str, tol: f64, f: F, x: &[f64], grad: &[f64]) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let r = finite_diff_check(f, x, grad, &self.cfg, |_| false)?;
        self.entries.push(CheckEntry {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            tolerance: tol,
            checked: r.checked,
            passed: r.max_rel_err < tol,
        });
        Ok(())
    }
}

fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let w: Vec<f64> = (0..cols).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        out.extend(w.iter().map(|v| v / s));
    }
    out
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes as u8)).collect()).expect("valid")
}

fn random_raw(rng: &mut ChaCha8Rng, len: usize, spread: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-spread..spread)).collect()
}

fn probs(h: usize, w: usize, c: usize, x: &[f64]) -> Result<ProbMap<f64>> {
    ProbMap::from_raw(h, w, c, x.to_vec())
}

fn affinity(n: usize, x: &[f64]) -> Result<AffinityMap<f64>> {
    AffinityMap::from_raw(n, x.to_vec())
}

fn weighted(x: &[f64], r: &[f64]) -> f64 {
    x.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Runs every check; entries report their own pass/fail.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite {
        cfg: GradCheckConfig {
            seed: derive_seed(seed, 1),
            ..Default::default()
        },
        entries: Vec::new(),
    };
    let (h, w, c) = (4, 4, 3);
    let n = h * w;
    let labels = random_labels(&mut rng, h, w, c);
    let target: OneHotMap = one_hot(&labels, c)?;
    let pairs: PairLabels = crate::noise::affinity_label(&labels);
    let p = simplex_rows(&mut rng, n, c);
    let p_aff = simplex_rows(&mut rng, n, n);
    let tc = NtmParams::new(c, random_raw(&mut rng, c * c, 1.0))?;
    let ta = NtmParams::new(2, random_raw(&mut rng, 4, 1.0))?;
    let dist = ClassDistribution::new(simplex_rows(&mut rng, 1, c))?;

    // Class losses.
    let g = ce_loss(&probs(h, w, c, &p)?, &target)?;
    s.run(
        "ce_loss/prob",
        OP_TOLERANCE,
        |x| Ok(ce_loss(&probs(h, w, c, x)?, &target)?.value),
        &p,
        g.grad(Wrt::Prob).expect("grad"),
    )?;
    let t_c = ntm_from_params(&tc)?;
    let g = class_corrected_loss(&probs(h, w, c, &p)?, &t_c, &target)?;
    s.run(
        "class_corrected_loss/prob",
        OP_TOLERANCE,
        |x| Ok(class_corrected_loss(&probs(h, w, c, x)?, &t_c, &target)?.value),
        &p,
        g.grad(Wrt::Prob).expect("grad"),
    )?;
    let pm = probs(h, w, c, &p)?;
    s.run(
        "class_corrected_loss/ntm",
        OP_TOLERANCE,
        |x| {
            let t = ntm_from_params(&NtmParams::new(c, x.to_vec())?)?;
            Ok(class_corrected_loss(&pm, &t, &target)?.value)
        },
        tc.raw(),
        &tc.backward(g.grad(Wrt::ClassNtm).expect("grad")),
    )?;

    // Affinity losses.
    let g = affinity_bce(&affinity(n, &p_aff)?, &pairs)?;
    s.run(
        "affinity_bce/affinity",
        OP_TOLERANCE,
        |x| Ok(affinity_bce(&affinity(n, x)?, &pairs)?.value),
        &p_aff,
        g.grad(Wrt::Affinity).expect("grad"),
    )?;
    let t_a = ta.affinity_ntm()?;
    let g = affinity_corrected_loss(&affinity(n, &p_aff)?, &t_a, &pairs)?;
    s.run(
        "affinity_corrected_loss/affinity",
        OP_TOLERANCE,
        |x| Ok(affinity_corrected_loss(&affinity(n, x)?, &t_a, &pairs)?.value),
        &p_aff,
        g.grad(Wrt::Affinity).expect("grad"),
    )?;
    let am = affinity(n, &p_aff)?;
    s.run(
        "affinity_corrected_loss/ntm",
        OP_TOLERANCE,
        |x| {
            let t = NtmParams::new(2, x.to_vec())?.affinity_ntm()?;
            Ok(affinity_corrected_loss(&am, &t, &pairs)?.value)
        },
        ta.raw(),
        &ta.backward(g.grad(Wrt::AffinityNtm).expect("grad")),
    )?;

    // Regularisers.
    let g = cacr(&t_c, &t_a, &dist)?;
    s.run(
        "cacr/class_ntm",
        OP_TOLERANCE,
        |x| Ok(cacr(&ntm_from_params(&NtmParams::new(c, x.to_vec())?)?, &t_a, &dist)?.value),
        tc.raw(),
        &tc.backward(g.grad(Wrt::ClassNtm).expect("grad")),
    )?;
    s.run(
        "cacr/affinity_ntm",
        OP_TOLERANCE,
        |x| Ok(cacr(&t_c, &NtmParams::new(2, x.to_vec())?.affinity_ntm()?, &dist)?.value),
        ta.raw(),
        &ta.backward(g.grad(Wrt::AffinityNtm).expect("grad")),
    )?;
    let g = volume_loss(&t_c);
    s.run(
        "volume/class_ntm",
        OP_TOLERANCE,
        |x| Ok(volume_loss(&ntm_from_params(&NtmParams::new(c, x.to_vec())?)?).value),
        tc.raw(),
        &tc.backward(g.grad(Wrt::ClassNtm).expect("grad")),
    )?;

    // Affinity generator.
    let d = 5;
    let feats = random_raw(&mut rng, n * d, 1.0);
    let r = random_raw(&mut rng, n * n, 1.0);
    let tape = AffinityTape::forward(&FeatureMap::new(h, w, d, feats.clone())?)?;
    s.run(
        "affinity_map/features",
        OP_TOLERANCE,
        |x| Ok(weighted(AffinityTape::forward(&FeatureMap::new(h, w, d, x.to_vec())?)?.map().data(), &r)),
        &feats,
        &tape.backward(&r),
    )?;

    // Refinement, at a point where no entry sits on the floor.
    let (q, a) = loop {
        let q = simplex_rows(&mut rng, n, c);
        let a = simplex_rows(&mut rng, n, n);
        let t = DarTape::forward(&probs(h, w, c, &q)?, &affinity(n, &a)?)?;
        if (0..n).all(|k| (0..c).all(|j| !t.is_floored(k, j))) {
            break (q, a);
        }
    };
    let r = random_raw(&mut rng, n * c, 1.0);
    let tape = DarTape::forward(&probs(h, w, c, &q)?, &affinity(n, &a)?)?;
    let (gq, ga) = tape.backward(&r);
    let am = affinity(n, &a)?;
    s.run(
        "dar_refine/prob",
        OP_TOLERANCE,
        |x| Ok(weighted(DarTape::forward(&probs(h, w, c, x)?, &am)?.refined().data(), &r)),
        &q,
        &gq,
    )?;
    let qm = probs(h, w, c, &q)?;
    s.run(
        "dar_refine/affinity",
        OP_TOLERANCE,
        |x| Ok(weighted(DarTape::forward(&qm, &affinity(n, x)?)?.refined().data(), &r)),
        &a,
        &ga,
    )?;

    // Composed objectives through the whole network.
    let (ih, iw, cin) = (6, 6, 3);
    let image = random_raw(&mut rng, ih * iw * cin, 1.0);
    let noisy = random_labels(&mut rng, ih, iw, c);
    let arch = Arch {
        hidden: 4,
        features: 4,
        stride: 2,
    };
    let mut params = ModelParams::<f64>::init(cin, c, arch, 1.0, derive_seed(seed, 2))?;
    for b in params.conv1_b.iter_mut().chain(params.conv2_b.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    let raw_c = random_raw(&mut rng, c * c, 1.0);
    params.ntm_c.raw_mut().copy_from_slice(&raw_c);
    let weights = Weights {
        lambda: 0.5,
        volume: 0.1,
    };
    for mode in Mode::ALL {
        let (_, grads) = objective(&params, &image, &noisy, mode, Some(&dist), weights)?;
        let mut probe = params.clone();
        s.run(
            &format!("objective/{}", mode.name()),
            COMPOSED_TOLERANCE,
            |x| {
                probe.set_flat(x)?;
                Ok(objective(&probe, &image, &noisy, mode, Some(&dist), weights)?.0.total)
            },
            &params.to_flat(),
            &grads.to_flat(),
        )?;
    }
    Ok(s.entries)
}
