//! The three causal separators: HS-TasNet, HS-TasNet-Small and TasNet.
//!
//! Every architecture consumes one stereo analysis window per hop and returns
//! one frame-length contribution per stem and channel, which is overlap-added
//! into the output stream. Nothing looks ahead of the current window.
//!
//! HS-TasNet wiring, per frame:
//!
//! ```text
//!  |STFT| (2 x 513) -> linear -> memory ----.            .-> memory(+enc skip) -> linear -> sigmoid -> x STFT -> iSTFT --.
//!                                           &/+ -> memory -- split                                                          + -> stem
//!  conv encoder (N) -> linear -> memory ----'            '-> memory(+enc skip) -> linear -> sigmoid -> x enc -> deconv ----'
//! ```
//!
//! The small variant sums instead of concatenating and uses one LSTM per
//! memory block; its split halves the trunk output, so the post-split blocks
//! carry a linear projection back to the branch width before the skip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::audio::{StemSet, Waveform, STEM_NAMES};
use crate::dsp::{OverlapState, Stft, WindowSpec};
use crate::error::{check_len, Error, Result};
use crate::nn::{
    flatten, ConvEncoder, Linear, LstmState, MemoryBlock, MemoryTape, ParamTensor, Skip,
    WindowedDeconv,
};
use crate::real::{sigmoid, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    HsTasnet,
    HsTasnetSmall,
    Tasnet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::HsTasnet => "hs_tasnet",
            Arch::HsTasnetSmall => "hs_tasnet_small",
            Arch::Tasnet => "tasnet",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hs_tasnet" | "hs-tasnet" => Ok(Arch::HsTasnet),
            "hs_tasnet_small" | "hs-tasnet-small" | "small" => Ok(Arch::HsTasnetSmall),
            "tasnet" => Ok(Arch::Tasnet),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub window: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub stems: usize,
    pub channels: usize,
    pub conv_basis: usize,
    pub branch_hidden: usize,
    pub combined_hidden: usize,
    pub tasnet_hidden: usize,
    pub tasnet_lstm_layers: usize,
}

impl ModelConfig {
    pub fn hs_tasnet() -> Self {
        ModelConfig {
            arch: Arch::HsTasnet,
            window: 1024,
            hop: 512,
            sample_rate: 44_100,
            stems: 4,
            channels: 2,
            conv_basis: 1024,
            branch_hidden: 500,
            combined_hidden: 1000,
            tasnet_hidden: 1000,
            tasnet_lstm_layers: 4,
        }
    }

    pub fn hs_tasnet_small() -> Self {
        ModelConfig {
            arch: Arch::HsTasnetSmall,
            combined_hidden: 500,
            ..Self::hs_tasnet()
        }
    }

    pub fn tasnet() -> Self {
        ModelConfig {
            arch: Arch::Tasnet,
            conv_basis: 1500,
            ..Self::hs_tasnet()
        }
    }

    pub fn preset(arch: Arch) -> Self {
        match arch {
            Arch::HsTasnet => Self::hs_tasnet(),
            Arch::HsTasnetSmall => Self::hs_tasnet_small(),
            Arch::Tasnet => Self::tasnet(),
        }
    }

    /// Toy dimensions (window 16, hop 8, a handful of units) for tests and
    /// gradient checks.
    pub fn toy(arch: Arch) -> Self {
        ModelConfig {
            arch,
            window: 16,
            hop: 8,
            sample_rate: 44_100,
            stems: 4,
            channels: 2,
            conv_basis: 6,
            branch_hidden: 4,
            combined_hidden: if arch == Arch::HsTasnet { 8 } else { 4 },
            tasnet_hidden: 5,
            tasnet_lstm_layers: 4,
        }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            size: self.window,
            hop: self.hop,
            shape: Default::default(),
        }
    }

    pub fn spec_bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn latency_samples(&self) -> usize {
        self.window
    }

    pub fn hop_ms(&self) -> f64 {
        1000.0 * self.hop as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.window_spec().validate()?;
        if self.hop * 2 != self.window {
            return Err(Error::Config("hop must be half the window".into()));
        }
        if self.stems != STEM_NAMES.len() {
            return Err(Error::Config(format!("exactly 4 stems are supported, got {}", self.stems)));
        }
        if self.channels != 2 {
            return Err(Error::Config(format!("stereo input required, got {} channels", self.channels)));
        }
        if self.sample_rate == 0 || self.conv_basis == 0 {
            return Err(Error::Config("sample rate and basis count must be positive".into()));
        }
        match self.arch {
            Arch::HsTasnet => {
                if self.branch_hidden == 0 || self.combined_hidden != 2 * self.branch_hidden {
                    return Err(Error::Config(
                        "hs_tasnet concatenates branches: combined_hidden must be 2 x branch_hidden".into(),
                    ));
                }
            }
            Arch::HsTasnetSmall => {
                if self.branch_hidden < 2
                    || self.combined_hidden != self.branch_hidden
                    || self.branch_hidden % 2 != 0
                {
                    return Err(Error::Config(
                        "hs_tasnet_small sums branches: combined_hidden must equal an even branch_hidden"
                            .into(),
                    ));
                }
            }
            Arch::Tasnet => {
                if self.tasnet_hidden == 0
                    || self.tasnet_lstm_layers == 0
                    || self.tasnet_lstm_layers % 2 != 0
                {
                    return Err(Error::Config(
                        "tasnet needs a positive, even number of LSTM layers".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One hop of output: `[stem][channel][hop]`, stems in [`STEM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct StemFrames<T> {
    pub stems: Vec<Vec<Vec<T>>>,
}

impl<T> StemFrames<T> {
    pub fn labels(&self) -> [&'static str; 4] {
        STEM_NAMES
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.stems.first().and_then(|s| s.first()).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    Concat,
    Sum,
}

/// Spectral + temporal hybrid (both HS-TasNet variants).
#[derive(Debug, Clone, PartialEq)]
pub struct HybridNet<T> {
    pub merge: Merge,
    pub spec_in: Linear<T>,
    pub encoder: ConvEncoder<T>,
    pub temp_in: Linear<T>,
    pub spec_pre: MemoryBlock<T>,
    pub temp_pre: MemoryBlock<T>,
    pub trunk: MemoryBlock<T>,
    pub spec_post: MemoryBlock<T>,
    pub temp_post: MemoryBlock<T>,
    pub spec_head: Linear<T>,
    pub temp_head: Linear<T>,
    pub decoder: WindowedDeconv<T>,
}

/// Encoder / LSTM masker / windowed decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TasNet<T> {
    pub encoder: ConvEncoder<T>,
    pub input: Linear<T>,
    pub blocks: Vec<MemoryBlock<T>>,
    pub head: Linear<T>,
    pub decoder: WindowedDeconv<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network<T> {
    Hybrid(HybridNet<T>),
    TasNet(TasNet<T>),
}

/// Everything a streaming pass mutates: LSTM states per memory block and the
/// overlap-add carry per stem.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelState<T> {
    blocks: Vec<Vec<LstmState<T>>>,
    ola: Vec<OverlapState<T>>,
    frames: u64,
}

impl<T: Real> ModelState<T> {
    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn reset(&mut self) {
        self.blocks.iter_mut().flatten().for_each(LstmState::reset);
        self.ola.iter_mut().for_each(OverlapState::reset);
        self.frames = 0;
    }

    pub fn is_initialized(&self) -> bool {
        !self.ola.is_empty()
    }
}

/// A built or loaded separator.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: ModelConfig,
    stft: Stft<T>,
    pub net: Network<T>,
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = config.window_spec();
        let stft = Stft::new(spec)?;
        let (w, ch, stems, n) = (config.window, config.channels, config.stems, config.conv_basis);
        let net = match config.arch {
            Arch::HsTasnet | Arch::HsTasnetSmall => {
                let (merge, depth) = if config.arch == Arch::HsTasnet {
                    (Merge::Concat, 2)
                } else {
                    (Merge::Sum, 1)
                };
                let b = config.branch_hidden;
                let trunk_width = config.combined_hidden;
                let split = trunk_width / 2;
                let proj = (split != b).then_some(b);
                let bins = config.spec_bins();
                let r = &mut rng;
                let spec_in = Linear::new("spec_in", ch * bins, b, r);
                let encoder = ConvEncoder::new("encoder", n, ch, w, r);
                let temp_in = Linear::new("temp_in", n, b, r);
                let spec_pre = MemoryBlock::new("spec_pre", b, b, depth, None, Skip::Identity, r);
                let temp_pre = MemoryBlock::new("temp_pre", b, b, depth, None, Skip::Identity, r);
                let trunk =
                    MemoryBlock::new("trunk", trunk_width, trunk_width, depth, None, Skip::Identity, r);
                let spec_post = MemoryBlock::new("spec_post", split, split, depth, proj, Skip::Encoded, r);
                let temp_post = MemoryBlock::new("temp_post", split, split, depth, proj, Skip::Encoded, r);
                let spec_head = Linear::new("spec_head", b, stems * ch * bins, r);
                let temp_head = Linear::new("temp_head", b, stems * n, r);
                let decoder = WindowedDeconv::new("decoder", n, ch, stft.window(), r);
                Network::Hybrid(HybridNet {
                    merge,
                    spec_in,
                    encoder,
                    temp_in,
                    spec_pre,
                    temp_pre,
                    trunk,
                    spec_post,
                    temp_post,
                    spec_head,
                    temp_head,
                    decoder,
                })
            }
            Arch::Tasnet => {
                let h = config.tasnet_hidden;
                let r = &mut rng;
                let encoder = ConvEncoder::new("encoder", n, ch, w, r);
                let input = Linear::new("input", n, h, r);
                let blocks = (0..config.tasnet_lstm_layers / 2)
                    .map(|i| MemoryBlock::new(&format!("block{i}"), h, h, 2, None, Skip::Identity, r))
                    .collect();
                let head = Linear::new("head", h, stems * n, r);
                let decoder = WindowedDeconv::new("decoder", n, ch, stft.window(), r);
                Network::TasNet(TasNet {
                    encoder,
                    input,
                    blocks,
                    head,
                    decoder,
                })
            }
        };
        Ok(Model {
            config: config.clone(),
            stft,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stft(&self) -> &Stft<T> {
        &self.stft
    }

    fn blocks(&self) -> Vec<&MemoryBlock<T>> {
        match &self.net {
            Network::Hybrid(h) => vec![&h.spec_pre, &h.temp_pre, &h.trunk, &h.spec_post, &h.temp_post],
            Network::TasNet(t) => t.blocks.iter().collect(),
        }
    }

    pub fn init_state(&self) -> ModelState<T> {
        let spec = self.config.window_spec();
        ModelState {
            blocks: self.blocks().iter().map(|b| b.zero_state()).collect(),
            ola: (0..self.config.stems)
                .map(|_| OverlapState::new(&spec, self.config.channels))
                .collect(),
            frames: 0,
        }
    }

    fn check_state(&self, state: &ModelState<T>) -> Result<()> {
        if !state.is_initialized() {
            return Err(Error::State("model state is not initialised".into()));
        }
        let blocks = self.blocks();
        let ok = state.blocks.len() == blocks.len()
            && state.ola.len() == self.config.stems
            && blocks.iter().zip(&state.blocks).all(|(b, s)| {
                b.lstms.len() == s.len()
                    && b.lstms.iter().zip(s).all(|(l, st)| l.hidden_size() == st.h.len())
            });
        if ok {
            Ok(())
        } else {
            Err(Error::State("state was initialised for a different model".into()))
        }
    }

    /// Processes one analysis window (`channels x window` samples) and emits
    /// `hop` samples per stem and channel.
    pub fn forward_frame(&self, state: &mut ModelState<T>, window: &[Vec<T>]) -> Result<StemFrames<T>> {
        self.check_state(state)?;
        check_len("frame channels", self.config.channels, window.len())?;
        for c in window {
            check_len("frame samples", self.config.window, c.len())?;
        }
        let contrib = match &self.net {
            Network::Hybrid(h) => h.step(&self.stft, &mut state.blocks, window)?,
            Network::TasNet(t) => t.step(&mut state.blocks, window)?,
        };
        let hop = self.config.hop;
        let stems = contrib
            .iter()
            .zip(state.ola.iter_mut())
            .map(|(c, ola)| ola.overlap_add(c, hop))
            .collect::<Result<Vec<_>>>()?;
        state.frames += 1;
        Ok(StemFrames { stems })
    }

    /// Splits `input` into the frames a stream + flush would see: `ceil(len/hop)`
    /// windows, zero-padded past the end.
    pub fn frames_for(&self, input: &[Vec<T>]) -> Vec<Vec<Vec<T>>> {
        let (w, h) = (self.config.window, self.config.hop);
        let len = input.first().map_or(0, Vec::len);
        let count = len.div_ceil(h);
        (0..count)
            .map(|k| {
                input
                    .iter()
                    .map(|c| {
                        let mut f = vec![T::zero(); w];
                        let start = k * h;
                        let end = (start + w).min(len);
                        f[..end - start].copy_from_slice(&c[start..end]);
                        f
                    })
                    .collect()
            })
            .collect()
    }

    /// Offline pass over planar input from a reset state. Returns
    /// `[stem][channel][len]` when `trim_latency`, otherwise with `window - hop`
    /// leading zeros (the device-clock view of the same stream).
    pub fn separate_planar(&self, input: &[Vec<T>], trim_latency: bool) -> Result<Vec<Vec<Vec<T>>>> {
        check_len("input channels", self.config.channels, input.len())?;
        let len = input[0].len();
        for c in input {
            check_len("input channel length", len, c.len())?;
        }
        let lead = if trim_latency { 0 } else { self.config.window - self.config.hop };
        let mut out = vec![vec![vec![T::zero(); lead]; self.config.channels]; self.config.stems];
        let mut state = self.init_state();
        for frame in self.frames_for(input) {
            let hop = self.forward_frame(&mut state, &frame)?;
            for (o, s) in out.iter_mut().zip(hop.stems) {
                for (oc, sc) in o.iter_mut().zip(s) {
                    oc.extend(sc);
                }
            }
        }
        for o in out.iter_mut().flatten() {
            o.truncate(lead + len);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        match &self.net {
            Network::Hybrid(h) => {
                let mut v = h.spec_in.params();
                v.extend(h.encoder.params());
                v.extend(h.temp_in.params());
                for b in [&h.spec_pre, &h.temp_pre, &h.trunk, &h.spec_post, &h.temp_post] {
                    v.extend(b.params());
                }
                v.extend(h.spec_head.params());
                v.extend(h.temp_head.params());
                v.extend(h.decoder.params());
                v
            }
            Network::TasNet(t) => {
                let mut v = t.encoder.params();
                v.extend(t.input.params());
                for b in &t.blocks {
                    v.extend(b.params());
                }
                v.extend(t.head.params());
                v.extend(t.decoder.params());
                v
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        match &mut self.net {
            Network::Hybrid(h) => {
                let mut v = h.spec_in.params_mut();
                v.extend(h.encoder.params_mut());
                v.extend(h.temp_in.params_mut());
                for b in [
                    &mut h.spec_pre,
                    &mut h.temp_pre,
                    &mut h.trunk,
                    &mut h.spec_post,
                    &mut h.temp_post,
                ] {
                    v.extend(b.params_mut());
                }
                v.extend(h.spec_head.params_mut());
                v.extend(h.temp_head.params_mut());
                v.extend(h.decoder.params_mut());
                v
            }
            Network::TasNet(t) => {
                let mut v = t.encoder.params_mut();
                v.extend(t.input.params_mut());
                for b in &mut t.blocks {
                    v.extend(b.params_mut());
                }
                v.extend(t.head.params_mut());
                v.extend(t.decoder.params_mut());
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params())
    }

    /// Parameter count per layer, in graph order. Layer = tensor name up to
    /// its last `.`.
    pub fn layer_table(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for p in self.params() {
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
            match rows.last_mut() {
                Some((name, n)) if name == layer => *n += p.len(),
                _ => rows.push((layer.to_string(), p.len())),
            }
        }
        rows
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Same topology and weights at another precision.
    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::build(&self.config, 0)?;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        Ok(out)
    }

    /// Copies parameter values from `other` (same config required).
    pub fn load_values_from(&mut self, other: &Model<T>) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Config("cannot copy weights between different configs".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.values.clone_from(&src.values);
        }
        Ok(())
    }
}

/// Exact sum of tensor sizes.
pub fn param_count<T: Real>(params: &[&ParamTensor<T>]) -> usize {
    params.iter().map(|p| p.len()).sum()
}

/// Offline separation of a stereo waveform.
pub fn forward_offline(model: &Model<f32>, wave: &Waveform, trim_latency: bool) -> Result<StemSet> {
    if wave.channel_count() != model.config().channels {
        return Err(Error::Format(format!(
            "expected {} channels, got {}",
            model.config().channels,
            wave.channel_count()
        )));
    }
    let out = model.separate_planar(&wave.channels, trim_latency)?;
    StemSet::new(
        out.into_iter()
            .map(|channels| Waveform {
                sample_rate: wave.sample_rate,
                channels,
            })
            .collect(),
    )
}

fn magnitudes<T: Real>(spec: &[Vec<Complex<T>>]) -> Vec<T> {
    spec.iter().flatten().map(|c| c.norm()).collect()
}

fn sigmoid_vec<T: Real>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = sigmoid(*x));
}

fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}

/// Mask each stem's spectrum and synthesise its frame contribution.
/// `masks` is `[stem][channel][bin]` flattened.
fn spectral_contrib<T: Real>(
    stft: &Stft<T>,
    spec: &[Vec<Complex<T>>],
    masks: &[T],
    stems: usize,
) -> Result<Vec<Vec<Vec<T>>>> {
    let (ch, bins, w) = (spec.len(), stft.spec().bins(), stft.spec().size);
    let mut out = Vec::with_capacity(stems);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); bins];
    for s in 0..stems {
        let mut chans = Vec::with_capacity(ch);
        for (c, x) in spec.iter().enumerate() {
            let m = &masks[(s * ch + c) * bins..(s * ch + c + 1) * bins];
            for ((b, &xv), &mv) in buf.iter_mut().zip(x).zip(m) {
                *b = xv * mv;
            }
            let mut y = vec![T::zero(); w];
            stft.synthesize(&buf, &mut y)?;
            chans.push(y);
        }
        out.push(chans);
    }
    Ok(out)
}

fn mask_latents<T: Real>(masks: &[T], enc: &[T], stems: usize) -> Vec<Vec<T>> {
    let n = enc.len();
    (0..stems)
        .map(|s| masks[s * n..(s + 1) * n].iter().zip(enc).map(|(&m, &e)| m * e).collect())
        .collect()
}

impl<T: Real> HybridNet<T> {
    fn stems(&self) -> usize {
        self.temp_head.output_size() / self.encoder.basis()
    }

    fn merge(&self, s: &[T], t: &[T]) -> Vec<T> {
        match self.merge {
            Merge::Concat => s.iter().chain(t).copied().collect(),
            Merge::Sum => s.iter().zip(t).map(|(&a, &b)| a + b).collect(),
        }
    }

    fn step(
        &self,
        stft: &Stft<T>,
        states: &mut [Vec<LstmState<T>>],
        window: &[Vec<T>],
    ) -> Result<Vec<Vec<Vec<T>>>> {
        let stems = self.stems();
        let spec = stft.stft_frame(window)?.channels;
        let zs = self.spec_in.apply(&magnitudes(&spec))?;
        let s = self.spec_pre.forward_step(&zs, None, &mut states[0])?;

        let e = self.encoder.encode_flat(&flatten(window))?;
        let zt = self.temp_in.apply(&e)?;
        let t = self.temp_pre.forward_step(&zt, None, &mut states[1])?;

        let c = self.trunk.forward_step(&self.merge(&s, &t), None, &mut states[2])?;
        let (cs, ct) = c.split_at(c.len() / 2);
        let ys = self.spec_post.forward_step(cs, Some(&zs), &mut states[3])?;
        let yt = self.temp_post.forward_step(ct, Some(&zt), &mut states[4])?;

        let mut ms = self.spec_head.apply(&ys)?;
        sigmoid_vec(&mut ms);
        let mut mt = self.temp_head.apply(&yt)?;
        sigmoid_vec(&mut mt);

        let mut out = spectral_contrib(stft, &spec, &ms, stems)?;
        let temporal = self.decoder.synthesize(&mask_latents(&mt, &e, stems))?;
        for (o, t) in out.iter_mut().zip(&temporal) {
            for (oc, tc) in o.iter_mut().zip(t) {
                add_into(oc, tc);
            }
        }
        Ok(out)
    }
}

impl<T: Real> TasNet<T> {
    fn stems(&self) -> usize {
        self.head.output_size() / self.encoder.basis()
    }

    fn step(&self, states: &mut [Vec<LstmState<T>>], window: &[Vec<T>]) -> Result<Vec<Vec<Vec<T>>>> {
        let e = self.encoder.encode_flat(&flatten(window))?;
        let mut z = self.input.apply(&e)?;
        for (b, st) in self.blocks.iter().zip(states.iter_mut()) {
            z = b.forward_step(&z, None, st)?;
        }
        let mut m = self.head.apply(&z)?;
        sigmoid_vec(&mut m);
        self.decoder.synthesize(&mask_latents(&m, &e, self.stems()))
    }
}

// ---------------------------------------------------------------------------
// Training passes: layer-major over a whole excerpt, same arithmetic as the
// per-frame path.

/// Activations recorded by [`Model::forward_train`].
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    len: usize,
    frames: usize,
    inner: TapeKind<T>,
}

#[derive(Debug, Clone)]
enum TapeKind<T> {
    Hybrid(Box<HybridTape<T>>),
    TasNet(Box<TasNetTape<T>>),
}

#[derive(Debug, Clone)]
struct HybridTape<T> {
    spec: Vec<Vec<Vec<Complex<T>>>>,
    mags: Vec<Vec<T>>,
    flats: Vec<Vec<T>>,
    es: Vec<Vec<T>>,
    spec_pre: MemoryTape<T>,
    temp_pre: MemoryTape<T>,
    trunk: MemoryTape<T>,
    spec_post: MemoryTape<T>,
    temp_post: MemoryTape<T>,
    ys: Vec<Vec<T>>,
    yt: Vec<Vec<T>>,
    ms: Vec<Vec<T>>,
    mt: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
struct TasNetTape<T> {
    flats: Vec<Vec<T>>,
    es: Vec<Vec<T>>,
    blocks: Vec<MemoryTape<T>>,
    z: Vec<Vec<T>>,
    m: Vec<Vec<T>>,
}

fn map_seq<T: Real>(lin: &Linear<T>, xs: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    xs.iter().map(|x| lin.apply(x)).collect()
}

fn backward_seq_linear<T: Real>(
    lin: &mut Linear<T>,
    xs: &[Vec<T>],
    gys: &[Vec<T>],
    want_input: bool,
) -> Result<Vec<Vec<T>>> {
    let mut gxs = Vec::with_capacity(xs.len());
    for (x, gy) in xs.iter().zip(gys) {
        if want_input {
            let mut gx = vec![T::zero(); lin.input_size()];
            lin.backward(x, gy, Some(&mut gx))?;
            gxs.push(gx);
        } else {
            lin.backward(x, gy, None)?;
        }
    }
    Ok(gxs)
}

/// Overlap-adds per-frame contributions `[frame][stem][ch][w]` into
/// `[stem][ch][len]`.
fn overlap_add_all<T: Real>(contribs: &[Vec<Vec<Vec<T>>>], hop: usize, len: usize) -> Vec<Vec<Vec<T>>> {
    let stems = contribs.first().map_or(0, Vec::len);
    let ch = contribs.first().and_then(|c| c.first()).map_or(0, Vec::len);
    let w = contribs
        .first()
        .and_then(|c| c.first())
        .and_then(|c| c.first())
        .map_or(0, Vec::len);
    let full = contribs.len().saturating_sub(1) * hop + w;
    let mut out = vec![vec![vec![T::zero(); full.max(len)]; ch]; stems];
    for (k, frame) in contribs.iter().enumerate() {
        for (o, s) in out.iter_mut().zip(frame) {
            for (oc, sc) in o.iter_mut().zip(s) {
                add_into(&mut oc[k * hop..k * hop + w], sc);
            }
        }
    }
    for o in out.iter_mut().flatten() {
        o.truncate(len);
    }
    out
}

/// Slice of the output gradient that frame `k` contributed to, zero-extended.
fn frame_grad<T: Real>(grad: &[Vec<Vec<T>>], k: usize, hop: usize, w: usize) -> Vec<Vec<Vec<T>>> {
    grad.iter()
        .map(|s| {
            s.iter()
                .map(|c| {
                    let mut g = vec![T::zero(); w];
                    let start = k * hop;
                    if start < c.len() {
                        let end = (start + w).min(c.len());
                        g[..end - start].copy_from_slice(&c[start..end]);
                    }
                    g
                })
                .collect()
        })
        .collect()
}

impl<T: Real> Model<T> {
    /// Training forward pass over an excerpt (`[channel][len]`), returning
    /// trimmed `[stem][channel][len]` estimates and the activation tape.
    pub fn forward_train(&self, input: &[Vec<T>]) -> Result<(Vec<Vec<Vec<T>>>, ForwardTape<T>)> {
        check_len("input channels", self.config.channels, input.len())?;
        let len = input[0].len();
        let frames = self.frames_for(input);
        let stems = self.config.stems;
        let hop = self.config.hop;
        match &self.net {
            Network::Hybrid(h) => {
                let spec: Vec<Vec<Vec<Complex<T>>>> = frames
                    .iter()
                    .map(|f| self.stft.stft_frame(f).map(|s| s.channels))
                    .collect::<Result<_>>()?;
                let mags: Vec<Vec<T>> = spec.iter().map(|s| magnitudes(s)).collect();
                let zs = map_seq(&h.spec_in, &mags)?;
                let (s, spec_pre) = h.spec_pre.forward_seq(&zs, None)?;
                let flats: Vec<Vec<T>> = frames.iter().map(|f| flatten(f)).collect();
                let es: Vec<Vec<T>> = flats
                    .iter()
                    .map(|f| h.encoder.encode_flat(f))
                    .collect::<Result<_>>()?;
                let zt = map_seq(&h.temp_in, &es)?;
                let (t, temp_pre) = h.temp_pre.forward_seq(&zt, None)?;
                let merged: Vec<Vec<T>> = s.iter().zip(&t).map(|(a, b)| h.merge(a, b)).collect();
                let (c, trunk) = h.trunk.forward_seq(&merged, None)?;
                let half = h.trunk.output_size() / 2;
                let cs: Vec<Vec<T>> = c.iter().map(|v| v[..half].to_vec()).collect();
                let ct: Vec<Vec<T>> = c.iter().map(|v| v[half..].to_vec()).collect();
                let (ys, spec_post) = h.spec_post.forward_seq(&cs, Some(&zs))?;
                let (yt, temp_post) = h.temp_post.forward_seq(&ct, Some(&zt))?;
                let mut ms = map_seq(&h.spec_head, &ys)?;
                ms.iter_mut().for_each(|m| sigmoid_vec(m));
                let mut mt = map_seq(&h.temp_head, &yt)?;
                mt.iter_mut().for_each(|m| sigmoid_vec(m));

                let mut contribs = Vec::with_capacity(frames.len());
                for k in 0..frames.len() {
                    let mut out = spectral_contrib(&self.stft, &spec[k], &ms[k], stems)?;
                    let temporal = h.decoder.synthesize(&mask_latents(&mt[k], &es[k], stems))?;
                    for (o, t) in out.iter_mut().zip(&temporal) {
                        for (oc, tc) in o.iter_mut().zip(t) {
                            add_into(oc, tc);
                        }
                    }
                    contribs.push(out);
                }
                let y = overlap_add_all(&contribs, hop, len);
                let tape = HybridTape {
                    spec,
                    mags,
                    flats,
                    es,
                    spec_pre,
                    temp_pre,
                    trunk,
                    spec_post,
                    temp_post,
                    ys,
                    yt,
                    ms,
                    mt,
                };
                Ok((
                    y,
                    ForwardTape {
                        len,
                        frames: frames.len(),
                        inner: TapeKind::Hybrid(Box::new(tape)),
                    },
                ))
            }
            Network::TasNet(tn) => {
                let flats: Vec<Vec<T>> = frames.iter().map(|f| flatten(f)).collect();
                let es: Vec<Vec<T>> = flats
                    .iter()
                    .map(|f| tn.encoder.encode_flat(f))
                    .collect::<Result<_>>()?;
                let mut z = map_seq(&tn.input, &es)?;
                let mut blocks = Vec::new();
                for b in &tn.blocks {
                    let (y, tape) = b.forward_seq(&z, None)?;
                    z = y;
                    blocks.push(tape);
                }
                let mut m = map_seq(&tn.head, &z)?;
                m.iter_mut().for_each(|v| sigmoid_vec(v));
                let contribs: Vec<_> = m
                    .iter()
                    .zip(&es)
                    .map(|(mk, ek)| tn.decoder.synthesize(&mask_latents(mk, ek, stems)))
                    .collect::<Result<_>>()?;
                let y = overlap_add_all(&contribs, hop, len);
                let tape = TasNetTape {
                    flats,
                    es,
                    blocks,
                    z,
                    m,
                };
                Ok((
                    y,
                    ForwardTape {
                        len,
                        frames: frames.len(),
                        inner: TapeKind::TasNet(Box::new(tape)),
                    },
                ))
            }
        }
    }

    /// Accumulates parameter gradients for `grad = dL/d(estimates)`.
    pub fn backward_train(&mut self, tape: &ForwardTape<T>, grad: &[Vec<Vec<T>>]) -> Result<()> {
        check_len("grad stems", self.config.stems, grad.len())?;
        for s in grad {
            check_len("grad channels", self.config.channels, s.len())?;
            for c in s {
                check_len("grad length", tape.len, c.len())?;
            }
        }
        let (hop, w, stems) = (self.config.hop, self.config.window, self.config.stems);
        let stft = self.stft.clone();
        match (&mut self.net, &tape.inner) {
            (Network::Hybrid(h), TapeKind::Hybrid(tp)) => {
                let bins = stft.spec().bins();
                let n = h.encoder.basis();
                let mut dys = Vec::with_capacity(tape.frames);
                let mut dyt = Vec::with_capacity(tape.frames);
                let mut des = vec![vec![T::zero(); n]; tape.frames];
                let mut gbins = vec![Complex::new(T::zero(), T::zero()); bins];
                for k in 0..tape.frames {
                    let g = frame_grad(grad, k, hop, w);
                    // spectral head
                    let ms = &tp.ms[k];
                    let mut dms = vec![T::zero(); ms.len()];
                    for (s, gs) in g.iter().enumerate() {
                        for (c, gc) in gs.iter().enumerate() {
                            stft.synthesize_adjoint(gc, &mut gbins)?;
                            let base = (s * self.config.channels + c) * bins;
                            for (b, (gb, x)) in gbins.iter().zip(&tp.spec[k][c]).enumerate() {
                                let m = ms[base + b];
                                let dm = gb.re * x.re + gb.im * x.im;
                                dms[base + b] = dm * m * (T::one() - m);
                            }
                        }
                    }
                    let mut gy = vec![T::zero(); h.spec_head.input_size()];
                    h.spec_head.backward(&tp.ys[k], &dms, Some(&mut gy))?;
                    dys.push(gy);
                    // temporal head
                    let mt = &tp.mt[k];
                    let e = &tp.es[k];
                    let latents = mask_latents(mt, e, stems);
                    let mut dmt = vec![T::zero(); mt.len()];
                    for (s, gs) in g.iter().enumerate() {
                        let mut gl = vec![T::zero(); n];
                        h.decoder.backward(&latents[s], gs, &mut gl)?;
                        for j in 0..n {
                            let m = mt[s * n + j];
                            dmt[s * n + j] = gl[j] * e[j] * m * (T::one() - m);
                            des[k][j] = des[k][j] + gl[j] * m;
                        }
                    }
                    let mut gy = vec![T::zero(); h.temp_head.input_size()];
                    h.temp_head.backward(&tp.yt[k], &dmt, Some(&mut gy))?;
                    dyt.push(gy);
                }
                let (dcs, dzs_skip) = h.spec_post.backward_seq(&tp.spec_post, &dys)?;
                let (dct, dzt_skip) = h.temp_post.backward_seq(&tp.temp_post, &dyt)?;
                let dc: Vec<Vec<T>> = dcs
                    .iter()
                    .zip(&dct)
                    .map(|(a, b)| a.iter().chain(b).copied().collect())
                    .collect();
                let (dmerged, _) = h.trunk.backward_seq(&tp.trunk, &dc)?;
                let b = h.spec_pre.output_size();
                let (ds, dt): (Vec<Vec<T>>, Vec<Vec<T>>) = match h.merge {
                    Merge::Concat => dmerged
                        .iter()
                        .map(|d| (d[..b].to_vec(), d[b..].to_vec()))
                        .unzip(),
                    Merge::Sum => dmerged.iter().map(|d| (d.clone(), d.clone())).unzip(),
                };
                let (mut dzs, _) = h.spec_pre.backward_seq(&tp.spec_pre, &ds)?;
                let (mut dzt, _) = h.temp_pre.backward_seq(&tp.temp_pre, &dt)?;
                for (a, s) in dzs.iter_mut().zip(dzs_skip.iter().flatten()) {
                    add_into(a, s);
                }
                for (a, s) in dzt.iter_mut().zip(dzt_skip.iter().flatten()) {
                    add_into(a, s);
                }
                backward_seq_linear(&mut h.spec_in, &tp.mags, &dzs, false)?;
                let de_in = backward_seq_linear(&mut h.temp_in, &tp.es, &dzt, true)?;
                for ((d, extra), (flat, e)) in des.iter_mut().zip(&de_in).zip(tp.flats.iter().zip(&tp.es)) {
                    add_into(d, extra);
                    h.encoder.backward(flat, e, d, None)?;
                }
                Ok(())
            }
            (Network::TasNet(tn), TapeKind::TasNet(tp)) => {
                let n = tn.encoder.basis();
                let mut dz = Vec::with_capacity(tape.frames);
                let mut des = vec![vec![T::zero(); n]; tape.frames];
                for k in 0..tape.frames {
                    let g = frame_grad(grad, k, hop, w);
                    let m = &tp.m[k];
                    let e = &tp.es[k];
                    let latents = mask_latents(m, e, stems);
                    let mut dm = vec![T::zero(); m.len()];
                    for (s, gs) in g.iter().enumerate() {
                        let mut gl = vec![T::zero(); n];
                        tn.decoder.backward(&latents[s], gs, &mut gl)?;
                        for j in 0..n {
                            let mv = m[s * n + j];
                            dm[s * n + j] = gl[j] * e[j] * mv * (T::one() - mv);
                            des[k][j] = des[k][j] + gl[j] * mv;
                        }
                    }
                    let mut gz = vec![T::zero(); tn.head.input_size()];
                    tn.head.backward(&tp.z[k], &dm, Some(&mut gz))?;
                    dz.push(gz);
                }
                for (b, bt) in tn.blocks.iter_mut().zip(&tp.blocks).rev() {
                    dz = b.backward_seq(bt, &dz)?.0;
                }
                let de_in = backward_seq_linear(&mut tn.input, &tp.es, &dz, true)?;
                for ((d, extra), (flat, e)) in des.iter_mut().zip(&de_in).zip(tp.flats.iter().zip(&tp.es)) {
                    add_into(d, extra);
                    tn.encoder.backward(flat, e, d, None)?;
                }
                Ok(())
            }
            _ => Err(Error::State("tape was recorded by a different architecture".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(arch: Arch) -> ModelConfig {
        ModelConfig::toy(arch)
    }

    fn noise(len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..2).map(|_| (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::hs_tasnet().validate().is_ok());
        assert!(ModelConfig::hs_tasnet_small().validate().is_ok());
        assert!(ModelConfig::tasnet().validate().is_ok());
        let mut c = ModelConfig::hs_tasnet();
        c.combined_hidden = 700;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tasnet();
        c.tasnet_lstm_layers = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::hs_tasnet_small();
        c.channels = 1;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::hs_tasnet().spec_bins(), 513);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        for arch in [Arch::HsTasnet, Arch::HsTasnetSmall, Arch::Tasnet] {
            let m = Model::<f64>::build(&tiny(arch), 1).unwrap();
            let out = m.separate_planar(&vec![vec![0.0; 80]; 2], true).unwrap();
            assert!(out.iter().flatten().flatten().all(|&v| v == 0.0), "{arch:?}");
        }
    }

    #[test]
    fn uninitialised_state_rejected() {
        let m = Model::<f32>::build(&tiny(Arch::HsTasnet), 1).unwrap();
        let mut st = ModelState::default();
        let w = vec![vec![0.0f32; 16]; 2];
        assert!(matches!(m.forward_frame(&mut st, &w), Err(Error::State(_))));
        let other = Model::<f32>::build(&tiny(Arch::Tasnet), 1).unwrap();
        let mut st = other.init_state();
        assert!(matches!(m.forward_frame(&mut st, &w), Err(Error::State(_))));
    }

    #[test]
    fn train_forward_matches_frame_path() {
        for arch in [Arch::HsTasnet, Arch::HsTasnetSmall, Arch::Tasnet] {
            let m = Model::<f64>::build(&tiny(arch), 2).unwrap();
            let x = noise(77, 3);
            let offline = m.separate_planar(&x, true).unwrap();
            let (train, _) = m.forward_train(&x).unwrap();
            for (a, b) in offline.iter().flatten().flatten().zip(train.iter().flatten().flatten()) {
                assert!((a - b).abs() < 1e-12, "{arch:?}");
            }
        }
    }

    #[test]
    fn masks_stay_in_unit_interval() {
        let m = Model::<f64>::build(&tiny(Arch::HsTasnet), 4).unwrap();
        let (_, tape) = m.forward_train(&noise(64, 5)).unwrap();
        if let TapeKind::Hybrid(t) = &tape.inner {
            assert!(t.ms.iter().chain(&t.mt).flatten().all(|&v| (0.0..=1.0).contains(&v)));
        } else {
            panic!("expected hybrid tape");
        }
    }

    #[test]
    fn unit_masks_reproduce_stft_round_trip() {
        let spec = WindowSpec::default();
        let stft = Stft::<f64>::new(spec).unwrap();
        let x = noise(44100 / 4, 6);
        let mut cursor = crate::dsp::FrameCursor::new(spec, 2);
        let refs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let frames = cursor.push_samples(&refs).unwrap();
        let ones = vec![1.0; 4 * 2 * spec.bins()];
        let mut ola: Vec<_> = (0..4).map(|_| OverlapState::new(&spec, 2)).collect();
        let mut plain = OverlapState::new(&spec, 2);
        let mut worst = 0.0f64;
        for frame in &frames {
            let f = stft.stft_frame(frame).unwrap();
            let reference = stft.istft_frame(&f, &mut plain).unwrap();
            let contrib = spectral_contrib(&stft, &f.channels, &ones, 4).unwrap();
            for (c, st) in contrib.iter().zip(&mut ola) {
                let hop = st.overlap_add(c, spec.hop).unwrap();
                for (a, b) in hop.iter().flatten().zip(reference.iter().flatten()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn layer_table_sums_to_total() {
        let m = Model::<f32>::build(&tiny(Arch::HsTasnetSmall), 0).unwrap();
        let table = m.layer_table();
        assert_eq!(table.iter().map(|r| r.1).sum::<usize>(), m.param_count());
        let names: std::collections::HashSet<_> = m.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), m.params().len());
        assert_eq!(param_count::<f32>(&[]), 0);
    }
}
