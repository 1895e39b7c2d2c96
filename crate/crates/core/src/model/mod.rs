//! Toy segmentation network (two 3x3 convolutions plus a 1x1 classifier),
//! the per-mode training objectives, SGD with momentum, warm-up and the
//! training loop.
//!
//! Feature map `f` is the linear output of the second convolution; the
//! classifier reads `relu(f)` while the affinity generator reads `f` itself.

mod checkpoint;
mod layers;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affinity::{AffinityTape, DarTape};
use crate::dataset::{Sample, Splits};
use crate::error::{Error, Result};
use crate::grid::{one_hot, FeatureMap, LabelMap, ProbMap};
use crate::losses::{
    affinity_bce, affinity_corrected_loss, cacr, ce_loss, class_corrected_loss, softmax_in_place, volume_loss,
    LossBundle, Wrt,
};
use crate::metrics::{OverlapCounts, SegMetrics};
use crate::noise::{affinity_label, class_distribution};
use crate::ntm::{ntm_from_params, AffinityNtm, ClassDistribution, ClassNtm, NtmParams};
use crate::scalar::Scalar;
use crate::seed::derive_seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use layers::{conv3x3_backward, conv3x3_forward, pointwise_backward, pointwise_forward, relu, relu_backward, ConvTape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BaselineCe,
    Affinity,
    Dar,
    Calc,
    Jcas,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::BaselineCe, Mode::Affinity, Mode::Dar, Mode::Calc, Mode::Jcas];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaselineCe => "baseline_ce",
            Mode::Affinity => "affinity",
            Mode::Dar => "dar",
            Mode::Calc => "calc",
            Mode::Jcas => "jcas",
        }
    }

    pub fn uses_affinity(self) -> bool {
        self != Mode::BaselineCe
    }

    /// Prediction is the DAR-refined `P` rather than `Q`.
    pub fn uses_dar(self) -> bool {
        matches!(self, Mode::Dar | Mode::Jcas)
    }

    /// Loss-corrected through the NTMs; needs an estimated class distribution.
    pub fn corrected(self) -> bool {
        matches!(self, Mode::Calc | Mode::Jcas)
    }

    /// The uncorrected objective with the same architecture, used for warm-up.
    pub fn warmup_mode(self) -> Mode {
        match self {
            Mode::Calc => Mode::Affinity,
            Mode::Jcas => Mode::Dar,
            m => m,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub hidden: usize,
    pub features: usize,
    pub stride: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            hidden: 16,
            features: 16,
            stride: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Leading epochs (within `epochs`) trained uncorrected before `N` is
    /// estimated; only used by corrected modes.
    pub warmup_epochs: usize,
    pub lr: f64,
    pub ntm_lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub volume_weight: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip applied before each step; 0 disables.
    pub grad_clip: f64,
    /// Diagonal of the raw NTM parameters at initialisation.
    pub ntm_init: f64,
    pub arch: Arch,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Jcas,
            epochs: 40,
            warmup_epochs: 10,
            lr: 0.05,
            ntm_lr: 0.05,
            momentum: 0.9,
            lambda: crate::losses::DEFAULT_LAMBDA,
            volume_weight: 0.01,
            batch_size: 4,
            grad_clip: 2.0,
            ntm_init: 2.0,
            arch: Arch::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.ntm_lr >= 0.0 && self.ntm_lr.is_finite()) {
            return bad("ntm_lr must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative");
        }
        if !(self.volume_weight >= 0.0 && self.volume_weight.is_finite()) {
            return bad("volume_weight must be nonnegative");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !self.ntm_init.is_finite() {
            return bad("ntm_init must be finite");
        }
        if self.arch.hidden == 0 || self.arch.features == 0 || self.arch.stride == 0 {
            return bad("architecture sizes must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

pub const TENSOR_NAMES: [&str; 8] = ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "cls_w", "cls_b", "ntm_c", "ntm_a"];

/// Index of the first NTM tensor in [`TENSOR_NAMES`].
const NTM_SLOT: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Arch,
    pub in_channels: usize,
    pub classes: usize,
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub cls_w: Vec<T>,
    pub cls_b: Vec<T>,
    pub ntm_c: NtmParams<T>,
    pub ntm_a: NtmParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters (raw NTM parameters too, i.e. uniform NTMs).
    pub fn zeros(in_channels: usize, classes: usize, arch: Arch) -> Result<Self> {
        if in_channels == 0 || classes < 2 {
            return Err(Error::Config("model needs input channels and at least two classes".into()));
        }
        let (h, d) = (arch.hidden, arch.features);
        let z = |n: usize| vec![T::zero(); n];
        Ok(ModelParams {
            arch,
            in_channels,
            classes,
            conv1_w: z(h * 9 * in_channels),
            conv1_b: z(h),
            conv2_w: z(d * 9 * h),
            conv2_b: z(d),
            cls_w: z(classes * d),
            cls_b: z(classes),
            ntm_c: NtmParams::new(classes, z(classes * classes))?,
            ntm_a: NtmParams::new(2, z(4))?,
        })
    }

    /// He-normal convolution weights, zero biases, NTMs at `ntm_init * I`.
    pub fn init(in_channels: usize, classes: usize, arch: Arch, ntm_init: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(in_channels, classes, arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [T], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            w.iter_mut().for_each(|v| *v = T::lit(normal.sample(&mut rng)));
        };
        fill(&mut p.conv1_w, 9 * in_channels);
        fill(&mut p.conv2_w, 9 * arch.hidden);
        fill(&mut p.cls_w, arch.features);
        p.ntm_c = NtmParams::scaled_identity(classes, ntm_init);
        p.ntm_a = NtmParams::scaled_identity(2, ntm_init);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.classes, self.arch).expect("shape already validated")
    }

    pub fn shapes(&self) -> [Vec<usize>; 8] {
        let (h, d, c, cin) = (self.arch.hidden, self.arch.features, self.classes, self.in_channels);
        [
            vec![h, 3, 3, cin],
            vec![h],
            vec![d, 3, 3, h],
            vec![d],
            vec![c, d],
            vec![c],
            vec![c, c],
            vec![2, 2],
        ]
    }

    pub fn tensors(&self) -> [&[T]; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.cls_w,
            &self.cls_b,
            self.ntm_c.raw(),
            self.ntm_a.raw(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.cls_w,
            &mut self.cls_b,
            self.ntm_c.raw_mut(),
            self.ntm_a.raw_mut(),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!("{} parameters, got {}", self.len(), flat.len())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn class_ntm(&self) -> Result<ClassNtm<T>> {
        ntm_from_params(&self.ntm_c)
    }

    pub fn affinity_ntm(&self) -> Result<AffinityNtm<T>> {
        self.ntm_a.affinity_ntm()
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}[{i}]")));
            }
        }
        Ok(())
    }
}

/// Forward intermediates for one image.
struct Tape<T> {
    c1: ConvTape<T>,
    pre1: Vec<T>,
    c2: ConvTape<T>,
    f: Vec<T>,
    g: Vec<T>,
    q: ProbMap<T>,
}

fn forward_tape<T: Scalar>(params: &ModelParams<T>, image: &[T], height: usize, width: usize) -> Result<Tape<T>> {
    let cin = params.in_channels;
    if height == 0 || width == 0 || image.len() != height * width * cin {
        return Err(Error::shape(format!(
            "image of {} values does not match {height}x{width}x{cin}",
            image.len()
        )));
    }
    let (pre1, c1) = conv3x3_forward(image, (height, width, cin), &params.conv1_w, &params.conv1_b, 1);
    let h1 = relu(&pre1);
    let (f, c2) = conv3x3_forward(
        &h1,
        (height, width, params.arch.hidden),
        &params.conv2_w,
        &params.conv2_b,
        params.arch.stride,
    );
    let g = relu(&f);
    let mut logits = pointwise_forward(&g, params.arch.features, &params.cls_w, &params.cls_b);
    for px in logits.chunks_exact_mut(params.classes) {
        softmax_in_place(px);
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("class probability {i}")));
    }
    let q = ProbMap::from_raw(c2.out_h, c2.out_w, params.classes, logits)?;
    Ok(Tape { c1, pre1, c2, f, g, q })
}

/// Feature map `f` and class probabilities `Q`, both at feature resolution.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    image: &[T],
    height: usize,
    width: usize,
) -> Result<(FeatureMap<T>, ProbMap<T>)> {
    let t = forward_tape(params, image, height, width)?;
    let fm = FeatureMap::new(t.c2.out_h, t.c2.out_w, params.arch.features, t.f)?;
    Ok((fm, t.q))
}

/// Argmax prediction upsampled (nearest neighbour) to image resolution:
/// DAR-refined `P` for modes that use it, `Q` otherwise.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    image: &[T],
    height: usize,
    width: usize,
    mode: Mode,
) -> Result<LabelMap> {
    let small = predict_small(params, image, height, width, mode)?;
    small.resize_nearest(height, width)
}

fn predict_small<T: Scalar>(
    params: &ModelParams<T>,
    image: &[T],
    height: usize,
    width: usize,
    mode: Mode,
) -> Result<LabelMap> {
    let (f, q) = forward(params, image, height, width)?;
    if mode.uses_dar() {
        let aff = AffinityTape::forward(&f)?;
        Ok(DarTape::forward(&q, aff.map())?.refined().argmax())
    } else {
        Ok(q.argmax())
    }
}

/// Test-split scores; means run over foreground classes (1..C) present in
/// the reference.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, test: &[Sample<T>], mode: Mode) -> Result<SegMetrics> {
    Ok(evaluate_counts(params, test, mode)?.metrics_over(1..params.classes))
}

pub fn evaluate_counts<T: Scalar>(params: &ModelParams<T>, test: &[Sample<T>], mode: Mode) -> Result<OverlapCounts> {
    let mut counts = OverlapCounts::new(params.classes);
    for s in test {
        let pred = predict(params, &s.image, s.height(), s.width(), mode)?;
        counts.add(&pred, &s.label)?;
    }
    Ok(counts)
}

/// Loss components of one objective evaluation. `total` is
/// `class + aff + lambda * cacr + volume_weight * volume`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts<T> {
    pub class: T,
    pub aff: T,
    pub cacr: T,
    pub volume: T,
    pub total: T,
}

/// Fixed NTMs and class distribution for the corrected objectives.
#[derive(Clone, Copy, Debug)]
pub struct NtmContext<'a, T> {
    pub t_c: &'a ClassNtm<T>,
    pub t_a: &'a AffinityNtm<T>,
    pub n: &'a ClassDistribution<T>,
}

/// Gradients of [`objective_with`]: backbone slots of `params` (its NTM
/// slots stay zero) and gradients on the NTM entries themselves.
#[derive(Clone, Debug)]
pub struct ObjectiveGrads<T> {
    pub params: ModelParams<T>,
    pub t_c: Vec<T>,
    pub t_a: [T; 4],
}

#[derive(Clone, Copy, Debug)]
pub struct Weights<T> {
    pub lambda: T,
    pub volume: T,
}

impl<T: Scalar> Weights<T> {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Weights {
            lambda: T::lit(cfg.lambda),
            volume: T::lit(cfg.volume_weight),
        }
    }
}

fn grad_of<T: Scalar>(b: &LossBundle<T>, wrt: Wrt) -> Result<&[T]> {
    b.grad(wrt)
        .ok_or_else(|| Error::shape(format!("loss is missing its {wrt:?} gradient")))
}

/// One image's objective for `mode` with explicitly supplied NTMs, and its
/// exact gradient. `noisy` is at image resolution and is downsampled
/// (nearest neighbour) to the feature grid.
pub fn objective_with<T: Scalar>(
    params: &ModelParams<T>,
    image: &[T],
    noisy: &LabelMap,
    mode: Mode,
    ntms: Option<NtmContext<'_, T>>,
    weights: Weights<T>,
) -> Result<(LossParts<T>, ObjectiveGrads<T>)> {
    let (height, width) = (noisy.height(), noisy.width());
    let tape = forward_tape(params, image, height, width)?;
    let (fh, fw) = (tape.c2.out_h, tape.c2.out_w);
    let small = noisy.resize_nearest(fh, fw)?;
    let target = one_hot(&small, params.classes)?;
    let ctx = if mode.corrected() {
        Some(ntms.ok_or_else(|| {
            Error::Config(format!("mode {} needs NTMs and an estimated class distribution", mode.name()))
        })?)
    } else {
        None
    };

    let aff = if mode.uses_affinity() {
        let fm = FeatureMap::new(fh, fw, params.arch.features, tape.f.clone())?;
        Some(AffinityTape::forward(&fm)?)
    } else {
        None
    };
    let dar = match (&aff, mode.uses_dar()) {
        (Some(a), true) => Some(DarTape::forward(&tape.q, a.map())?),
        _ => None,
    };
    let pred = dar.as_ref().map_or(&tape.q, |d| d.refined());

    let class_loss = match ctx {
        Some(c) => class_corrected_loss(pred, c.t_c, &target)?,
        None => ce_loss(pred, &target)?,
    };
    let aff_loss = match (&aff, ctx) {
        (Some(a), Some(c)) => Some(affinity_corrected_loss(a.map(), c.t_a, &affinity_label(&small))?),
        (Some(a), None) => Some(affinity_bce(a.map(), &affinity_label(&small))?),
        _ => None,
    };
    let reg = match ctx {
        Some(c) => Some((cacr(c.t_c, c.t_a, c.n)?, volume_loss(c.t_c))),
        None => None,
    };

    let zero = T::zero();
    let mut parts = LossParts {
        class: class_loss.value,
        aff: aff_loss.as_ref().map_or(zero, |l| l.value),
        cacr: reg.as_ref().map_or(zero, |r| r.0.value),
        volume: reg.as_ref().map_or(zero, |r| r.1.value),
        total: zero,
    };
    parts.total = parts.class + parts.aff + weights.lambda * parts.cacr + weights.volume * parts.volume;

    // NTM entry gradients.
    let c = params.classes;
    let mut g_tc = vec![zero; c * c];
    let mut g_ta = [zero; 4];
    if let (Some(_), Some((cr, vol))) = (ctx, &reg) {
        let terms = [
            (grad_of(&class_loss, Wrt::ClassNtm)?, T::one()),
            (grad_of(cr, Wrt::ClassNtm)?, weights.lambda),
            (grad_of(vol, Wrt::ClassNtm)?, weights.volume),
        ];
        for (g, w) in terms {
            g_tc.iter_mut().zip(g).for_each(|(a, &v)| *a += w * v);
        }
        let al = aff_loss.as_ref().expect("corrected modes use the affinity loss");
        let terms = [(grad_of(al, Wrt::AffinityNtm)?, T::one()), (grad_of(cr, Wrt::AffinityNtm)?, weights.lambda)];
        for (g, w) in terms {
            g_ta.iter_mut().zip(g).for_each(|(a, &v)| *a += w * v);
        }
    }

    // Back through DAR to Q and the affinity map.
    let grad_pred = grad_of(&class_loss, Wrt::Prob)?;
    let mut grad_aff = match &aff_loss {
        Some(l) => grad_of(l, Wrt::Affinity)?.to_vec(),
        None => Vec::new(),
    };
    let grad_q = match &dar {
        Some(d) => {
            let (gq, ga) = d.backward(grad_pred);
            grad_aff.iter_mut().zip(&ga).for_each(|(a, &v)| *a += v);
            gq
        }
        None => grad_pred.to_vec(),
    };

    let mut grads = params.zeros_like();
    // Softmax.
    let mut grad_z = vec![zero; grad_q.len()];
    for k in 0..tape.q.pixels() {
        let q = tape.q.pixel(k);
        let gq = &grad_q[k * c..(k + 1) * c];
        let inner = crate::affinity::dot(q, gq);
        for j in 0..c {
            grad_z[k * c + j] = q[j] * (gq[j] - inner);
        }
    }
    let d = params.arch.features;
    let mut grad_f = pointwise_backward(&tape.g, d, &params.cls_w, &grad_z, &mut grads.cls_w, &mut grads.cls_b);
    relu_backward(&tape.f, &mut grad_f);
    if let Some(a) = &aff {
        let ga = a.backward(&grad_aff);
        grad_f.iter_mut().zip(&ga).for_each(|(x, &v)| *x += v);
    }
    let mut grad_h1 = conv3x3_backward(
        &tape.c2,
        &params.conv2_w,
        &grad_f,
        &mut grads.conv2_w,
        &mut grads.conv2_b,
        true,
    )
    .expect("input gradient requested");
    relu_backward(&tape.pre1, &mut grad_h1);
    conv3x3_backward(
        &tape.c1,
        &params.conv1_w,
        &grad_h1,
        &mut grads.conv1_w,
        &mut grads.conv1_b,
        false,
    );

    Ok((
        parts,
        ObjectiveGrads {
            params: grads,
            t_c: g_tc,
            t_a: g_ta,
        },
    ))
}

/// [`objective_with`] using the model's own softmax-parameterised NTMs, with
/// gradients pulled back to every raw parameter.
pub fn objective<T: Scalar>(
    params: &ModelParams<T>,
    image: &[T],
    noisy: &LabelMap,
    mode: Mode,
    n: Option<&ClassDistribution<T>>,
    weights: Weights<T>,
) -> Result<(LossParts<T>, ModelParams<T>)> {
    if !mode.corrected() {
        return objective_with(params, image, noisy, mode, None, weights).map(|(l, g)| (l, g.params));
    }
    let n = n.ok_or_else(|| {
        Error::Config(format!("mode {} needs an estimated class distribution; run warm-up first", mode.name()))
    })?;
    let t_c = params.class_ntm()?;
    let t_a = params.affinity_ntm()?;
    let ctx = NtmContext {
        t_c: &t_c,
        t_a: &t_a,
        n,
    };
    let (loss, g) = objective_with(params, image, noisy, mode, Some(ctx), weights)?;
    let mut grads = g.params;
    let gc = params.ntm_c.backward(&g.t_c);
    let ga = params.ntm_a.backward(&g.t_a);
    grads.ntm_c.raw_mut().copy_from_slice(&gc);
    grads.ntm_a.raw_mut().copy_from_slice(&ga);
    Ok((loss, grads))
}

/// SGD with momentum; NTM parameters get their own learning rate.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    velocity: ModelParams<T>,
    lr: T,
    ntm_lr: T,
    momentum: T,
    clip: T,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ModelParams<T>, cfg: &TrainConfig) -> Self {
        Sgd {
            velocity: params.zeros_like(),
            lr: T::lit(cfg.lr),
            ntm_lr: T::lit(cfg.ntm_lr),
            momentum: T::lit(cfg.momentum),
            clip: T::lit(cfg.grad_clip),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        let norm = grads
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt();
        let scale = if self.clip > T::zero() && norm > self.clip {
            self.clip / norm
        } else {
            T::one()
        };
        let vel = self.velocity.tensors_mut();
        for (slot, ((p, v), g)) in params.tensors_mut().into_iter().zip(vel).zip(grads.tensors()).enumerate() {
            let lr = if slot >= NTM_SLOT { self.ntm_lr } else { self.lr };
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + scale * g;
                *p -= lr * *v;
            }
        }
    }
}

/// Mean objective over `batch` (image, noisy labels) and one optimiser step.
/// A non-finite loss or parameter aborts with a diagnostic and leaves
/// `params` untouched.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut Sgd<T>,
    batch: &[(&[T], &LabelMap)],
    mode: Mode,
    n: Option<&ClassDistribution<T>>,
    weights: Weights<T>,
) -> Result<LossParts<T>> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let inv = T::one() / <T as Scalar>::from_usize(batch.len());
    let mut sum = LossParts::<T>::default();
    let mut grads = params.zeros_like();
    for (i, (image, noisy)) in batch.iter().enumerate() {
        let (l, g) = objective(params, image, noisy, mode, n, weights)?;
        if !l.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss at batch item {i}: class={} aff={} cacr={} volume={}",
                mode.name(),
                l.class,
                l.aff,
                l.cacr,
                l.volume
            )));
        }
        sum.class += l.class;
        sum.aff += l.aff;
        sum.cacr += l.cacr;
        sum.volume += l.volume;
        sum.total += l.total;
        for (dst, src) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            dst.iter_mut().zip(src).for_each(|(a, &v)| *a += inv * v);
        }
    }
    let mut next = params.clone();
    opt.step(&mut next, &grads);
    next.check_finite()?;
    *params = next;
    Ok(LossParts {
        class: sum.class * inv,
        aff: sum.aff * inv,
        cacr: sum.cacr * inv,
        volume: sum.volume * inv,
        total: sum.total * inv,
    })
}

/// Training images with their noisy labels plus the clean test split.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a, T> {
    pub train: &'a [Sample<T>],
    pub noisy: &'a [LabelMap],
    pub test: &'a [Sample<T>],
    pub classes: usize,
}

impl<'a, T: Scalar> TrainData<'a, T> {
    pub fn new(splits: &'a Splits<T>, noisy: &'a [LabelMap], classes: usize) -> Result<Self> {
        let data = TrainData {
            train: &splits.train,
            noisy,
            test: &splits.test,
            classes,
        };
        data.validate()?;
        Ok(data)
    }

    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InsufficientSamples("no training images".into()));
        }
        if self.noisy.len() != self.train.len() {
            return Err(Error::shape(format!(
                "{} noisy label maps for {} training images",
                self.noisy.len(),
                self.train.len()
            )));
        }
        let ch = self.train[0].channels;
        for (i, (s, y)) in self.train.iter().zip(self.noisy).enumerate() {
            s.label.same_shape(y).map_err(|e| Error::shape(format!("training sample {i}: {e}")))?;
            y.check_classes(self.classes)?;
            if s.channels != ch {
                return Err(Error::shape(format!("training sample {i} has {} channels", s.channels)));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.train[0].channels
    }
}

fn run_epoch<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut Sgd<T>,
    data: &TrainData<'_, T>,
    mode: Mode,
    n: Option<&ClassDistribution<T>>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossParts<f64>> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + epoch as u64)));
    let weights = Weights::from_config(cfg);
    let mut acc = LossParts::<f64>::default();
    let mut steps = 0usize;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<(&[T], &LabelMap)> = chunk
            .iter()
            .map(|&i| (data.train[i].image.as_slice(), &data.noisy[i]))
            .collect();
        let l = train_step(params, opt, &batch, mode, n, weights)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} step {step}: {m}")),
                other => other,
            })?;
        let w = chunk.len() as f64;
        acc.class += w * l.class.as_f64();
        acc.aff += w * l.aff.as_f64();
        acc.cacr += w * l.cacr.as_f64();
        acc.volume += w * l.volume.as_f64();
        acc.total += w * l.total.as_f64();
        steps += chunk.len();
    }
    let inv = 1.0 / steps as f64;
    Ok(LossParts {
        class: acc.class * inv,
        aff: acc.aff * inv,
        cacr: acc.cacr * inv,
        volume: acc.volume * inv,
        total: acc.total * inv,
    })
}

/// Class proportions of the argmax pseudo-labels over the training images;
/// falls back to the noisy-label distribution when a class never appears.
pub fn estimate_class_distribution<T: Scalar>(
    params: &ModelParams<T>,
    data: &TrainData<'_, T>,
    mode: Mode,
) -> Result<ClassDistribution<T>> {
    let mut counts = vec![0u64; data.classes];
    for s in data.train {
        let pred = predict_small(params, &s.image, s.height(), s.width(), mode)?;
        pred.data().iter().for_each(|&l| counts[l as usize] += 1);
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        log::warn!("class {k} absent from pseudo-labels; using the noisy-label distribution");
        return class_distribution(data.noisy, data.classes);
    }
    ClassDistribution::from_counts(&counts)
}

/// Runs `cfg.warmup_epochs` epochs of the uncorrected counterpart of
/// `cfg.mode`, then estimates `N` from the model's pseudo-labels.
pub fn warmup_and_estimate_n<T: Scalar>(
    data: &TrainData<'_, T>,
    params: &mut ModelParams<T>,
    cfg: &TrainConfig,
) -> Result<ClassDistribution<T>> {
    if cfg.warmup_epochs == 0 {
        return Err(Error::Config("warmup_epochs must be at least 1".into()));
    }
    cfg.validate()?;
    data.validate()?;
    let mode = cfg.mode.warmup_mode();
    let mut opt = Sgd::new(params, cfg);
    for epoch in 0..cfg.warmup_epochs {
        run_epoch(params, &mut opt, data, mode, None, cfg, epoch)?;
    }
    estimate_class_distribution(params, data, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub warmup: bool,
    pub loss: LossParts<f64>,
    pub test: SegMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Class distribution estimated after warm-up (corrected modes only).
    pub class_distribution: Option<Vec<f64>>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_jac(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.test.mean_jac)
    }

    /// `epoch,loss_class,loss_aff,loss_cacr,mean_dice,mean_jac,dice_0..,jac_0..`
    pub fn metrics_csv(&self, classes: usize) -> String {
        let mut out = String::from("epoch,loss_class,loss_aff,loss_cacr,mean_dice,mean_jac");
        (0..classes).for_each(|k| out.push_str(&format!(",dice_{k}")));
        (0..classes).for_each(|k| out.push_str(&format!(",jac_{k}")));
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.loss.class, r.loss.aff, r.loss.cacr, r.test.mean_dice, r.test.mean_jac
            ));
            r.test.per_class_dice.iter().for_each(|v| out.push_str(&format!(",{v:.6}")));
            r.test.per_class_jac.iter().for_each(|v| out.push_str(&format!(",{v:.6}")));
            out.push('\n');
        }
        out
    }

    pub fn jac_curve_csv(&self) -> String {
        let mut out = String::from("epoch,mean_jac\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{:.6}\n", r.epoch, r.test.mean_jac));
        }
        out
    }
}

/// Full loop: initialise, warm up (corrected modes), train, and evaluate on
/// the clean test split after every epoch. Warm-up epochs count towards
/// `cfg.epochs`.
pub fn train<T: Scalar>(data: &TrainData<'_, T>, cfg: &TrainConfig) -> Result<(ModelParams<T>, TrainHistory)> {
    cfg.validate()?;
    data.validate()?;
    let mut params = ModelParams::init(data.channels(), data.classes, cfg.arch, cfg.ntm_init, derive_seed(cfg.seed, 0))?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((params, history));
    }
    let warmup = if cfg.mode.corrected() {
        if cfg.warmup_epochs == 0 {
            return Err(Error::Config(format!("mode {} needs warmup_epochs >= 1", cfg.mode.name())));
        }
        cfg.warmup_epochs.min(cfg.epochs)
    } else {
        0
    };
    let mut opt = Sgd::new(&params, cfg);
    let mut n: Option<ClassDistribution<T>> = None;
    for epoch in 0..cfg.epochs {
        let in_warmup = epoch < warmup;
        if epoch == warmup && warmup > 0 {
            let est = estimate_class_distribution(&params, data, cfg.mode.warmup_mode())?;
            log::info!("estimated class distribution {:?}", est.proportions());
            history.class_distribution = Some(est.proportions().iter().map(|v| v.as_f64()).collect());
            n = Some(est);
            opt = Sgd::new(&params, cfg);
        }
        let mode = if in_warmup { cfg.mode.warmup_mode() } else { cfg.mode };
        let loss = run_epoch(&mut params, &mut opt, data, mode, n.as_ref(), cfg, epoch)?;
        let test = evaluate(&params, data.test, cfg.mode)?;
        log::info!(
            "epoch {} {}: loss {:.4} test jac {:.4}",
            epoch + 1,
            mode.name(),
            loss.total,
            test.mean_jac
        );
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            warmup: in_warmup,
            loss,
            test,
        });
    }
    Ok((params, history))
}
