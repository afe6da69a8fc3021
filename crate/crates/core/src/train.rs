//! Toy-scale training: reconstruction losses, data augmentation, Adam,
//! the plateau learning-rate schedule and the epoch loop.
//!
//! Estimates and references are planar stem tensors `[stem][channel][sample]`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::audio::StemSet;
use crate::dsp::{Stft, WindowSpec};
use crate::error::{check_len, Error, Result};
use crate::model::Model;
use crate::nn::ParamTensor;
use crate::real::Real;

/// `[stem][channel][sample]`
pub type Stems<T> = Vec<Vec<Vec<T>>>;

/// Cap applied to SI-SNR / SD-SDR values, in dB.
pub const SNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Stems<T>,
}

fn check_shapes<T>(est: &[Vec<Vec<T>>], reference: &[Vec<Vec<T>>]) -> Result<usize> {
    check_len("loss stems", reference.len(), est.len())?;
    let mut count = 0;
    for (e, r) in est.iter().zip(reference) {
        check_len("loss channels", r.len(), e.len())?;
        for (ec, rc) in e.iter().zip(r) {
            check_len("loss samples", rc.len(), ec.len())?;
            count += rc.len();
        }
    }
    Ok(count)
}

fn zeros_like<T: Real>(x: &[Vec<Vec<T>>]) -> Stems<T> {
    x.iter()
        .map(|s| s.iter().map(|c| vec![T::zero(); c.len()]).collect())
        .collect()
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute error over every stem, channel and sample. The subgradient
/// at ties is 0.
pub fn l1_loss<T: Real>(est: &[Vec<Vec<T>>], reference: &[Vec<Vec<T>>]) -> Result<LossValue<T>> {
    let count = check_shapes(est, reference)?;
    if count == 0 {
        return Err(Error::Domain("empty loss input".into()));
    }
    let inv = T::one() / T::lit(count as f64);
    let mut total = 0.0f64;
    let mut grad = zeros_like(est);
    for ((e, r), g) in est.iter().zip(reference).zip(grad.iter_mut()) {
        for ((ec, rc), gc) in e.iter().zip(r).zip(g.iter_mut()) {
            for ((&a, &b), gv) in ec.iter().zip(rc).zip(gc.iter_mut()) {
                let d = a - b;
                total += d.abs().to_f64_lossy();
                *gv = sign(d) * inv;
            }
        }
    }
    Ok(LossValue {
        value: T::lit(total / count as f64),
        grad,
    })
}

/// Magnitude-spectrogram frames of one signal: `ceil(len/hop)` windows,
/// zero-padded at the end.
fn spectrogram<T: Real>(stft: &Stft<T>, x: &[T]) -> Result<Vec<Vec<Complex<T>>>> {
    let spec = stft.spec();
    let frames = x.len().div_ceil(spec.hop);
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![T::zero(); spec.size];
    for k in 0..frames {
        buf.iter_mut().for_each(|v| *v = T::zero());
        let start = k * spec.hop;
        let end = (start + spec.size).min(x.len());
        buf[..end - start].copy_from_slice(&x[start..end]);
        let mut bins = vec![Complex::new(T::zero(), T::zero()); spec.bins()];
        stft.analyze(&buf, &mut bins)?;
        out.push(bins);
    }
    Ok(out)
}

/// `alpha * L1(waveform) + (1 - alpha) * L1(|STFT|)`.
///
/// The magnitude term's gradient is undefined where the estimate's bin is
/// exactly zero; it is taken as zero there.
pub fn multi_domain_loss<T: Real>(
    est: &[Vec<Vec<T>>],
    reference: &[Vec<Vec<T>>],
    alpha: T,
    spec: &WindowSpec,
) -> Result<LossValue<T>> {
    if !(T::zero()..=T::one()).contains(&alpha) {
        return Err(Error::Config("multi-domain alpha must lie in [0, 1]".into()));
    }
    let wave = l1_loss(est, reference)?;
    let stft = Stft::<T>::new(*spec)?;
    let mut spec_grad = zeros_like(est);
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut per_signal = Vec::new();
    for (e, r) in est.iter().zip(reference) {
        for (ec, rc) in e.iter().zip(r) {
            let se = spectrogram(&stft, ec)?;
            let sr = spectrogram(&stft, rc)?;
            count += se.len() * spec.bins();
            per_signal.push((se, sr));
        }
    }
    if count == 0 {
        return Err(Error::Domain("empty loss input".into()));
    }
    let inv = T::one() / T::lit(count as f64);
    let mut gbins = vec![Complex::new(T::zero(), T::zero()); spec.bins()];
    let mut gframe = vec![T::zero(); spec.size];
    let mut idx = 0;
    for g in spec_grad.iter_mut() {
        for gc in g.iter_mut() {
            let (se, sr) = &per_signal[idx];
            idx += 1;
            for (k, (fe, fr)) in se.iter().zip(sr).enumerate() {
                for ((gb, be), br) in gbins.iter_mut().zip(fe).zip(fr) {
                    let (me, mr) = (be.norm(), br.norm());
                    total += (me - mr).abs().to_f64_lossy();
                    *gb = if me > T::zero() {
                        *be * (sign(me - mr) * inv / me)
                    } else {
                        Complex::new(T::zero(), T::zero())
                    };
                }
                stft.analyze_adjoint(&gbins, &mut gframe)?;
                let start = k * spec.hop;
                let end = (start + spec.size).min(gc.len());
                for (a, &b) in gc[start..end].iter_mut().zip(&gframe) {
                    *a = *a + b;
                }
            }
        }
    }
    let beta = T::one() - alpha;
    let value = alpha * wave.value + beta * T::lit(total / count as f64);
    let mut grad = wave.grad;
    for (g, s) in grad.iter_mut().flatten().zip(spec_grad.iter().flatten()) {
        for (a, &b) in g.iter_mut().zip(s) {
            *a = alpha * *a + beta * b;
        }
    }
    Ok(LossValue { value, grad })
}

#[derive(Clone, Copy)]
enum SnrKind {
    ScaleInvariant,
    ScaleDependent,
}

/// Per-stem ratio (stereo flattened), averaged over stems and negated.
fn snr_loss<T: Real>(est: &[Vec<Vec<T>>], reference: &[Vec<Vec<T>>], kind: SnrKind) -> Result<LossValue<T>> {
    check_shapes(est, reference)?;
    let stems = est.len();
    if stems == 0 {
        return Err(Error::Domain("empty loss input".into()));
    }
    let db = 10.0 / std::f64::consts::LN_10;
    let mut grad = zeros_like(est);
    let mut total = 0.0;
    for ((e, r), g) in est.iter().zip(reference).zip(grad.iter_mut()) {
        let pairs = || e.iter().flatten().zip(r.iter().flatten());
        let rr: f64 = r.iter().flatten().map(|v| v.to_f64_lossy().powi(2)).sum();
        if rr == 0.0 {
            return Err(Error::Domain("reference has zero energy".into()));
        }
        let er: f64 = pairs().map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy()).sum();
        let ee: f64 = e.iter().flatten().map(|v| v.to_f64_lossy().powi(2)).sum();
        let scale = er / rr;
        let target = er * er / rr;
        let distortion = match kind {
            SnrKind::ScaleInvariant => {
                // ||e - a r||^2, computed directly to avoid cancellation
                pairs()
                    .map(|(a, b)| (a.to_f64_lossy() - scale * b.to_f64_lossy()).powi(2))
                    .sum::<f64>()
            }
            SnrKind::ScaleDependent => pairs()
                .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
                .sum::<f64>(),
        };
        let raw = if target <= 0.0 {
            f64::NEG_INFINITY
        } else if distortion <= 0.0 {
            f64::INFINITY
        } else {
            db * (target.ln() - distortion.ln())
        };
        let value = raw.clamp(-SNR_CAP_DB, SNR_CAP_DB);
        total += value;
        if raw.is_finite() && raw.abs() < SNR_CAP_DB {
            // d value / d e = db * (dP/P - dD/D), scaled by -1/stems for the loss
            let coef = -1.0 / stems as f64;
            for ((ec, rc), gc) in e.iter().zip(r).zip(g.iter_mut()) {
                for ((&a, &b), gv) in ec.iter().zip(rc).zip(gc.iter_mut()) {
                    let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
                    let dp = 2.0 * scale * b;
                    let dd = match kind {
                        SnrKind::ScaleInvariant => 2.0 * (a - scale * b),
                        SnrKind::ScaleDependent => 2.0 * (a - b),
                    };
                    *gv = T::lit(coef * db * (dp / target - dd / distortion));
                }
            }
        }
        let _ = ee;
    }
    Ok(LossValue {
        value: T::lit(-total / stems as f64),
        grad,
    })
}

/// Negative scale-invariant SNR, `10 log10(|s_t|^2 / |e - s_t|^2)` with
/// `s_t = (<e,r>/|r|^2) r`, capped at ±100 dB.
pub fn si_snr_loss<T: Real>(est: &[Vec<Vec<T>>], reference: &[Vec<Vec<T>>]) -> Result<LossValue<T>> {
    snr_loss(est, reference, SnrKind::ScaleInvariant)
}

/// Negative scale-dependent SDR, `10 log10(|s_t|^2 / |e - r|^2)`, capped at ±100 dB.
pub fn sd_sdr_loss<T: Real>(est: &[Vec<Vec<T>>], reference: &[Vec<Vec<T>>]) -> Result<LossValue<T>> {
    snr_loss(est, reference, SnrKind::ScaleDependent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    L1,
    MultiDomain { alpha: f64 },
    SiSnr,
    SdSdr,
}

impl LossKind {
    pub fn compute<T: Real>(
        &self,
        est: &[Vec<Vec<T>>],
        reference: &[Vec<Vec<T>>],
        spec: &WindowSpec,
    ) -> Result<LossValue<T>> {
        match *self {
            LossKind::L1 => l1_loss(est, reference),
            LossKind::MultiDomain { alpha } => multi_domain_loss(est, reference, T::lit(alpha), spec),
            LossKind::SiSnr => si_snr_loss(est, reference),
            LossKind::SdSdr => sd_sdr_loss(est, reference),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentations {
    pub channel_swap: bool,
    /// Uniform per-stem gain range `[lo, hi]`.
    pub random_gain: Option<(f32, f32)>,
    pub source_shuffle: bool,
}

impl Default for Augmentations {
    fn default() -> Self {
        Augmentations {
            channel_swap: true,
            random_gain: Some((0.25, 1.25)),
            source_shuffle: true,
        }
    }
}

impl Augmentations {
    pub fn none() -> Self {
        Augmentations {
            channel_swap: false,
            random_gain: None,
            source_shuffle: false,
        }
    }
}

/// One training example: mixture and its four reference stems.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mixture: Vec<Vec<f32>>,
    pub stems: Stems<f32>,
}

/// Sums stems in a fixed order.
pub fn mix(stems: &[Vec<Vec<f32>>]) -> Vec<Vec<f32>> {
    let mut out = stems[0].clone();
    for s in &stems[1..] {
        for (o, c) in out.iter_mut().zip(s) {
            for (a, &b) in o.iter_mut().zip(c) {
                *a += b;
            }
        }
    }
    out
}

/// Applies the enabled augmentations independently per stem and rebuilds
/// each mixture as the sum of its (possibly recombined) stems.
pub fn augment<R: Rng>(batch: &[Stems<f32>], aug: &Augmentations, rng: &mut R) -> Result<Vec<Example>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    if aug.source_shuffle && batch.len() < 2 {
        return Err(Error::Config("source shuffling needs a batch of at least 2".into()));
    }
    if let Some((lo, hi)) = aug.random_gain {
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid gain range [{lo}, {hi}]")));
        }
    }
    let stems = batch[0].len();
    let mut order: Vec<Vec<usize>> = (0..stems).map(|_| (0..batch.len()).collect()).collect();
    if aug.source_shuffle {
        for o in &mut order {
            o.shuffle(rng);
        }
    }
    let mut out = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let mut item: Stems<f32> = Vec::with_capacity(stems);
        for (s, o) in order.iter().enumerate() {
            let mut stem = batch[o[b]][s].clone();
            if aug.channel_swap && stem.len() == 2 && rng.gen_bool(0.5) {
                stem.swap(0, 1);
            }
            if let Some((lo, hi)) = aug.random_gain {
                let g = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
                if g != 1.0 {
                    stem.iter_mut().flatten().for_each(|v| *v *= g);
                }
            }
            item.push(stem);
        }
        out.push(Example {
            mixture: mix(&item),
            stems: item,
        });
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Updates each parameter from its gradient slot (missing slot = zero gradient).
    pub fn step(&mut self, params: Vec<&mut ParamTensor<T>>, lr: f64) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = &p.grad else { continue };
            for (((x, &g), m), v) in p.values.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *x = *x - step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Single Adam update on plain slices (moment buffers supplied by the caller).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
}

/// Reduce-on-plateau with early stopping. "Improvement" is a strictly lower
/// validation loss.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub decay_patience: usize,
    pub stop_patience: usize,
    best: f64,
    stale: usize,
    stale_since_decay: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub decay: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(factor: f64, decay_patience: usize, stop_patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("decay factor {factor} must lie in (0, 1)")));
        }
        if decay_patience == 0 || stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        Ok(PlateauSchedule {
            factor,
            decay_patience,
            stop_patience,
            best: f64::INFINITY,
            stale: 0,
            stale_since_decay: 0,
        })
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> ScheduleEvent {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            self.stale_since_decay = 0;
            return ScheduleEvent {
                improved: true,
                decay: false,
                stop: false,
            };
        }
        self.stale += 1;
        self.stale_since_decay += 1;
        let decay = self.stale_since_decay >= self.decay_patience;
        if decay {
            self.stale_since_decay = 0;
        }
        ScheduleEvent {
            improved: false,
            decay,
            stop: self.stale >= self.stop_patience,
        }
    }
}

/// Replays a validation-loss history; returns one event per epoch.
pub fn plateau_schedule(history: &[f64], factor: f64, decay_patience: usize, stop_patience: usize) -> Result<Vec<ScheduleEvent>> {
    let mut s = PlateauSchedule::new(factor, decay_patience, stop_patience)?;
    Ok(history.iter().map(|&l| s.observe(l)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_patience: usize,
    pub stop_patience: usize,
    pub excerpt_seconds: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentations: Augmentations,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    /// Seconds of each validation track scored per epoch (0 = whole track).
    pub valid_seconds: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::L1,
            lr: 3e-4,
            decay_factor: 0.5,
            decay_patience: 3,
            stop_patience: 10,
            excerpt_seconds: 6.0,
            batch_size: 4,
            seed: 0,
            augmentations: Augmentations::default(),
            max_epochs: 100,
            steps_per_epoch: 50,
            valid_seconds: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1)".into()));
        }
        if self.decay_patience == 0 || self.stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if self.lr <= 0.0 || self.batch_size == 0 || self.steps_per_epoch == 0 || self.excerpt_seconds <= 0.0 {
            return Err(Error::Config("lr, batch size, steps and excerpt length must be positive".into()));
        }
        if let Some((lo, hi)) = self.augmentations.random_gain {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("invalid gain range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
    pub stopped: bool,
}

/// In-memory training corpus.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<StemSet>,
    pub valid: Vec<StemSet>,
}

fn planar_stems(set: &StemSet, start: usize, len: usize) -> Stems<f32> {
    set.stems
        .iter()
        .map(|w| w.channels.iter().map(|c| c[start..start + len].to_vec()).collect())
        .collect()
}

pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub best: Model<f32>,
    pub best_valid_loss: f64,
}

/// One optimisation step over a batch; returns the mean batch loss.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut Adam<f32>,
    batch: &[Example],
    loss: &LossKind,
    lr: f64,
) -> Result<f64> {
    model.zero_grad();
    let spec = model.config().window_spec();
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for ex in batch {
        let (est, tape) = model.forward_train(&ex.mixture)?;
        let mut l = loss.compute(&est, &ex.stems, &spec)?;
        total += l.value as f64;
        l.grad.iter_mut().flatten().flatten().for_each(|g| *g *= scale);
        model.backward_train(&tape, &l.grad)?;
    }
    opt.step(model.params_mut(), lr);
    Ok(total / batch.len() as f64)
}

/// Mean validation loss over whole (or leading `valid_seconds` of) tracks.
pub fn validation_loss(model: &Model<f32>, tracks: &[StemSet], loss: &LossKind, valid_seconds: f64) -> Result<f64> {
    let spec = model.config().window_spec();
    let mut total = 0.0;
    for t in tracks {
        let len = if valid_seconds > 0.0 {
            ((valid_seconds * model.config().sample_rate as f64) as usize).min(t.len())
        } else {
            t.len()
        };
        let stems = planar_stems(t, 0, len);
        let (est, _) = model.forward_train(&mix(&stems))?;
        total += loss.compute(&est, &stems, &spec)?.value as f64;
    }
    Ok(total / tracks.len() as f64)
}

/// Full loop: excerpt sampling, augmentation, forward/backward, Adam,
/// per-epoch validation, plateau schedule and best-weight retention.
///
/// With `log`, one JSON record per epoch is written.
pub fn train_loop(
    model: &mut Model<f32>,
    data: &TrainData,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let valid = if data.valid.is_empty() { &data.train } else { &data.valid };
    let sr = model.config().sample_rate as f64;
    let excerpt = ((config.excerpt_seconds * sr) as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::default();
    let mut schedule = PlateauSchedule::new(config.decay_factor, config.decay_patience, config.stop_patience)?;
    let mut lr = config.lr;
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut reports = Vec::new();
    for epoch in 0..config.max_epochs {
        let mut train_total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let raw: Vec<Stems<f32>> = (0..config.batch_size)
                .map(|_| {
                    let t = &data.train[rng.gen_range(0..data.train.len())];
                    let len = excerpt.min(t.len());
                    let start = rng.gen_range(0..=t.len() - len);
                    planar_stems(t, start, len)
                })
                .collect();
            let mut aug = config.augmentations.clone();
            if raw.len() < 2 {
                aug.source_shuffle = false;
            }
            let batch = augment(&raw, &aug, &mut rng)?;
            train_total += train_step(model, &mut opt, &batch, &config.loss, lr)?;
        }
        let train_loss = train_total / config.steps_per_epoch as f64;
        let valid_loss = validation_loss(model, valid, &config.loss, config.valid_seconds)?;
        let event = schedule.observe(valid_loss);
        if event.improved {
            best.load_values_from(model)?;
            best_loss = valid_loss;
        }
        let report = EpochReport {
            epoch,
            train_loss,
            valid_loss,
            lr,
            stopped: event.stop,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        reports.push(report);
        if event.decay {
            lr *= config.decay_factor;
        }
        if event.stop {
            break;
        }
    }
    Ok(TrainOutcome {
        reports,
        best,
        best_valid_loss: best_loss,
    })
}
