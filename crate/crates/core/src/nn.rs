//! Neural kernels with forward passes for streaming inference and
//! sequence forward/backward passes for training.
//!
//! Conventions:
//! - matrices are row-major, `[rows x cols]`;
//! - LSTM gates are packed in the order input, forget, cell, output with a
//!   single combined bias;
//! - every `backward*` function *adds* into parameter gradients and into any
//!   input-gradient buffer it is handed.

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::real::{sigmoid, Real};

/// A named learnable array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> ParamTensor<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![T::zero(); len],
            grad: None,
        }
    }

    /// Uniform(-bound, bound) initialisation. Values are drawn in `f64` so that
    /// the same seed yields the same weights at any precision.
    pub fn uniform<R: Rng>(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in &mut p.values {
            *v = T::lit(rng.gen_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Gradient slot, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamTensor<U> {
        ParamTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            grad: None,
        }
    }
}

/// `y = W x + b` (overwrites `y`).
pub fn matvec<T: Real>(w: &[T], x: &[T], bias: Option<&[T]>, y: &mut [T]) {
    T::gemv(w, x, y);
    if let Some(b) = bias {
        for (out, &b) in y.iter_mut().zip(b) {
            *out = *out + b;
        }
    }
}

/// `gx += W^T gy`
fn matvec_t_acc<T: Real>(w: &[T], gy: &[T], gx: &mut [T]) {
    let cols = gx.len();
    for (r, &g) in gy.iter().enumerate() {
        if g != T::zero() {
            T::axpy(g, &w[r * cols..(r + 1) * cols], gx);
        }
    }
}

/// `gw += gy x^T`
fn outer_acc<T: Real>(gy: &[T], x: &[T], gw: &mut [T]) {
    let cols = x.len();
    for (r, &g) in gy.iter().enumerate() {
        if g != T::zero() {
            T::axpy(g, x, &mut gw[r * cols..(r + 1) * cols]);
        }
    }
}

/// Fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: ParamTensor<T>,
    pub bias: ParamTensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: ParamTensor::uniform(format!("{name}.weight"), &[output, input], bound, rng),
            bias: ParamTensor::uniform(format!("{name}.bias"), &[output], bound, rng),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_size(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[T], y: &mut [T]) -> Result<()> {
        check_len("linear input", self.input_size(), x.len())?;
        check_len("linear output", self.output_size(), y.len())?;
        matvec(&self.weight.values, x, Some(&self.bias.values), y);
        Ok(())
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        let mut y = vec![T::zero(); self.output_size()];
        self.forward(x, &mut y)?;
        Ok(y)
    }

    pub fn backward(&mut self, x: &[T], gy: &[T], gx: Option<&mut [T]>) -> Result<()> {
        check_len("linear input", self.input_size(), x.len())?;
        check_len("linear grad", self.output_size(), gy.len())?;
        outer_acc(gy, x, self.weight.grad_mut());
        for (b, &g) in self.bias.grad_mut().iter_mut().zip(gy) {
            *b = *b + g;
        }
        if let Some(gx) = gx {
            check_len("linear input grad", self.input_size(), gx.len())?;
            matvec_t_acc(&self.weight.values, gy, gx);
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Recurrent state of one LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|v| *v = T::zero());
        self.c.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Unidirectional LSTM layer, gates packed `[i; f; g; o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    pub w_ih: ParamTensor<T>,
    pub w_hh: ParamTensor<T>,
    pub bias: ParamTensor<T>,
}

/// Activations recorded by [`Lstm::forward_seq`] for backpropagation through time.
#[derive(Debug, Clone, Default)]
pub struct LstmTape<T> {
    xs: Vec<Vec<T>>,
    // h_{t-1}, c_{t-1} for each step, then the post-activation gates and c_t
    h_prev: Vec<Vec<T>>,
    c_prev: Vec<Vec<T>>,
    gates: Vec<Vec<T>>,
    c: Vec<Vec<T>>,
}

impl<T> LstmTape<T> {
    pub fn steps(&self) -> usize {
        self.xs.len()
    }
}

impl<T: Real> Lstm<T> {
    /// Weights and bias drawn from uniform(-1/sqrt(h), 1/sqrt(h)).
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Lstm {
            w_ih: ParamTensor::uniform(format!("{name}.w_ih"), &[4 * hidden, input], bound, rng),
            w_hh: ParamTensor::uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], bound, rng),
            bias: ParamTensor::uniform(format!("{name}.bias"), &[4 * hidden], bound, rng),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.shape[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape[1]
    }

    /// `4 (in*h + h*h + h)`
    pub fn param_count(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.bias.len()
    }

    fn gates(&self, x: &[T], h: &[T], out: &mut [T]) {
        let hid = self.hidden_size();
        let mut rec = vec![T::zero(); out.len()];
        T::gemv(&self.w_ih.values, x, out);
        T::gemv(&self.w_hh.values, h, &mut rec);
        for ((g, &r), &b) in out.iter_mut().zip(&rec).zip(&self.bias.values) {
            *g = *g + r + b;
        }
        let (ifg, o) = out.split_at_mut(3 * hid);
        let (if_, g) = ifg.split_at_mut(2 * hid);
        if_.iter_mut().chain(o.iter_mut()).for_each(|v| *v = sigmoid(*v));
        g.iter_mut().for_each(|v| *v = v.tanh());
    }

    /// One time step; the output is the new `state.h`.
    pub fn step(&self, x: &[T], state: &mut LstmState<T>) -> Result<()> {
        let hid = self.hidden_size();
        check_len("lstm input", self.input_size(), x.len())?;
        check_len("lstm state", hid, state.h.len())?;
        check_len("lstm cell", hid, state.c.len())?;
        let mut a = vec![T::zero(); 4 * hid];
        self.gates(x, &state.h, &mut a);
        for j in 0..hid {
            let (i, f, g, o) = (a[j], a[hid + j], a[2 * hid + j], a[3 * hid + j]);
            let c = f * state.c[j] + i * g;
            state.c[j] = c;
            state.h[j] = o * c.tanh();
        }
        Ok(())
    }

    /// Runs a sequence from `init` and records what backpropagation needs.
    pub fn forward_seq(&self, xs: &[Vec<T>], init: &LstmState<T>) -> Result<(Vec<Vec<T>>, LstmTape<T>)> {
        let hid = self.hidden_size();
        let mut state = init.clone();
        let mut tape = LstmTape {
            xs: xs.to_vec(),
            h_prev: Vec::with_capacity(xs.len()),
            c_prev: Vec::with_capacity(xs.len()),
            gates: Vec::with_capacity(xs.len()),
            c: Vec::with_capacity(xs.len()),
        };
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            check_len("lstm input", self.input_size(), x.len())?;
            let mut a = vec![T::zero(); 4 * hid];
            self.gates(x, &state.h, &mut a);
            tape.h_prev.push(state.h.clone());
            tape.c_prev.push(state.c.clone());
            for j in 0..hid {
                let (i, f, g, o) = (a[j], a[hid + j], a[2 * hid + j], a[3 * hid + j]);
                let c = f * state.c[j] + i * g;
                state.c[j] = c;
                state.h[j] = o * c.tanh();
            }
            tape.gates.push(a);
            tape.c.push(state.c.clone());
            ys.push(state.h.clone());
        }
        Ok((ys, tape))
    }

    /// Backpropagation through the whole recorded sequence. Returns input gradients.
    pub fn backward_seq(&mut self, tape: &LstmTape<T>, dys: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        if tape.steps() == 0 && !dys.is_empty() {
            return Err(Error::State("lstm backward called before forward".into()));
        }
        check_len("lstm output grads", tape.steps(), dys.len())?;
        let (inp, hid) = (self.input_size(), self.hidden_size());
        let mut dh_next = vec![T::zero(); hid];
        let mut dc_next = vec![T::zero(); hid];
        let mut dxs = vec![vec![T::zero(); inp]; tape.steps()];
        let mut da = vec![T::zero(); 4 * hid];
        for t in (0..tape.steps()).rev() {
            let a = &tape.gates[t];
            let (c, c_prev) = (&tape.c[t], &tape.c_prev[t]);
            for j in 0..hid {
                let (i, f, g, o) = (a[j], a[hid + j], a[2 * hid + j], a[3 * hid + j]);
                let tc = c[j].tanh();
                let dh = dys[t][j] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
                let di = dc * g;
                let dg = dc * i;
                let df = dc * c_prev[j];
                dc_next[j] = dc * f;
                da[j] = di * i * (T::one() - i);
                da[hid + j] = df * f * (T::one() - f);
                da[2 * hid + j] = dg * (T::one() - g * g);
                da[3 * hid + j] = d_o * o * (T::one() - o);
            }
            outer_acc(&da, &tape.xs[t], self.w_ih.grad_mut());
            outer_acc(&da, &tape.h_prev[t], self.w_hh.grad_mut());
            for (b, &g) in self.bias.grad_mut().iter_mut().zip(&da) {
                *b = *b + g;
            }
            matvec_t_acc(&self.w_ih.values, &da, &mut dxs[t]);
            dh_next.iter_mut().for_each(|v| *v = T::zero());
            matvec_t_acc(&self.w_hh.values, &da, &mut dh_next);
        }
        Ok(dxs)
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

/// What a [`MemoryBlock`] adds to its recurrent output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    /// The block input itself.
    Identity,
    /// An externally supplied vector (the branch's encoded representation).
    Encoded,
    None,
}

/// One or two stacked LSTMs, an optional width-matching projection, and a
/// residual skip added to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBlock<T> {
    pub lstms: Vec<Lstm<T>>,
    pub proj: Option<Linear<T>>,
    pub skip: Skip,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryTape<T> {
    lstm: Vec<LstmTape<T>>,
    proj_in: Vec<Vec<T>>,
}

impl<T: Real> MemoryBlock<T> {
    pub fn new<R: Rng>(
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        output: Option<usize>,
        skip: Skip,
        rng: &mut R,
    ) -> Self {
        let lstms = (0..layers)
            .map(|l| Lstm::new(&format!("{name}.lstm{l}"), if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        let proj = output.map(|o| Linear::new(&format!("{name}.proj"), hidden, o, rng));
        MemoryBlock { lstms, proj, skip }
    }

    pub fn output_size(&self) -> usize {
        match &self.proj {
            Some(p) => p.output_size(),
            None => self.lstms.last().map_or(0, Lstm::hidden_size),
        }
    }

    pub fn input_size(&self) -> usize {
        self.lstms.first().map_or(0, Lstm::input_size)
    }

    pub fn zero_state(&self) -> Vec<LstmState<T>> {
        self.lstms.iter().map(|l| LstmState::zeros(l.hidden_size())).collect()
    }

    fn skip_source<'a>(&self, x: &'a [T], encoded: Option<&'a [T]>) -> Result<Option<&'a [T]>> {
        let src = match self.skip {
            Skip::Identity => Some(x),
            Skip::Encoded => Some(
                encoded.ok_or_else(|| Error::State("encoded skip requires a source vector".into()))?,
            ),
            Skip::None => None,
        };
        if let Some(s) = src {
            check_len("memory block skip", self.output_size(), s.len())?;
        }
        Ok(src)
    }

    pub fn forward_step(
        &self,
        x: &[T],
        encoded: Option<&[T]>,
        states: &mut [LstmState<T>],
    ) -> Result<Vec<T>> {
        check_len("memory block states", self.lstms.len(), states.len())?;
        let skip = self.skip_source(x, encoded)?;
        let mut cur = x.to_vec();
        for (l, st) in self.lstms.iter().zip(states.iter_mut()) {
            l.step(&cur, st)?;
            cur.clone_from(&st.h);
        }
        if let Some(p) = &self.proj {
            cur = p.apply(&cur)?;
        }
        if let Some(s) = skip {
            for (c, &v) in cur.iter_mut().zip(s) {
                *c = *c + v;
            }
        }
        Ok(cur)
    }

    pub fn forward_seq(
        &self,
        xs: &[Vec<T>],
        encoded: Option<&[Vec<T>]>,
    ) -> Result<(Vec<Vec<T>>, MemoryTape<T>)> {
        let mut tape = MemoryTape::default();
        let mut cur = xs.to_vec();
        for l in &self.lstms {
            let (ys, t) = l.forward_seq(&cur, &LstmState::zeros(l.hidden_size()))?;
            tape.lstm.push(t);
            cur = ys;
        }
        if let Some(p) = &self.proj {
            tape.proj_in = cur;
            cur = tape.proj_in.iter().map(|v| p.apply(v)).collect::<Result<_>>()?;
        }
        for (t, y) in cur.iter_mut().enumerate() {
            let enc = encoded.map(|e| e[t].as_slice());
            if let Some(s) = self.skip_source(&xs[t], enc)? {
                for (c, &v) in y.iter_mut().zip(s) {
                    *c = *c + v;
                }
            }
        }
        Ok((cur, tape))
    }

    /// Returns `(input grads, encoded-skip grads)`.
    pub fn backward_seq(
        &mut self,
        tape: &MemoryTape<T>,
        dys: &[Vec<T>],
    ) -> Result<(Vec<Vec<T>>, Option<Vec<Vec<T>>>)> {
        if tape.lstm.len() != self.lstms.len() {
            return Err(Error::State("memory block backward called before forward".into()));
        }
        let mut g = dys.to_vec();
        if let Some(p) = &mut self.proj {
            let mut gin = vec![vec![T::zero(); p.input_size()]; g.len()];
            for ((x, gy), gx) in tape.proj_in.iter().zip(&g).zip(gin.iter_mut()) {
                p.backward(x, gy, Some(gx))?;
            }
            g = gin;
        }
        for (l, t) in self.lstms.iter_mut().zip(&tape.lstm).rev() {
            g = l.backward_seq(t, &g)?;
        }
        let mut enc_grad = None;
        match self.skip {
            Skip::Identity => {
                for (gx, dy) in g.iter_mut().zip(dys) {
                    for (a, &b) in gx.iter_mut().zip(dy) {
                        *a = *a + b;
                    }
                }
            }
            Skip::Encoded => enc_grad = Some(dys.to_vec()),
            Skip::None => {}
        }
        Ok((g, enc_grad))
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut v: Vec<_> = self.lstms.iter().flat_map(Lstm::params).collect();
        if let Some(p) = &self.proj {
            v.extend(p.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut v: Vec<_> = self.lstms.iter_mut().flat_map(Lstm::params_mut).collect();
        if let Some(p) = &mut self.proj {
            v.extend(p.params_mut());
        }
        v
    }
}

/// Learned strided 1-D convolution over one analysis window, ReLU output.
///
/// Filters are `[basis, channels, window]`; a frame is the planar window
/// flattened channel-major, so each basis is a single dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder<T> {
    pub filters: ParamTensor<T>,
}

impl<T: Real> ConvEncoder<T> {
    pub fn new<R: Rng>(name: &str, basis: usize, channels: usize, window: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((channels * window) as f64).sqrt();
        ConvEncoder {
            filters: ParamTensor::uniform(format!("{name}.filters"), &[basis, channels, window], bound, rng),
        }
    }

    pub fn basis(&self) -> usize {
        self.filters.shape[0]
    }

    fn row(&self) -> usize {
        self.filters.shape[1] * self.filters.shape[2]
    }

    /// `flat` is `channels * window` samples, channel-major.
    pub fn encode_flat(&self, flat: &[T]) -> Result<Vec<T>> {
        let row = self.row();
        check_len("conv encoder frame", row, flat.len())?;
        let mut y = vec![T::zero(); self.basis()];
        T::gemv(&self.filters.values, flat, &mut y);
        y.iter_mut().for_each(|v| *v = v.max(T::zero()));
        Ok(y)
    }

    pub fn encode(&self, frame: &[Vec<T>]) -> Result<Vec<T>> {
        check_len("conv encoder channels", self.filters.shape[1], frame.len())?;
        self.encode_flat(&flatten(frame))
    }

    /// `y` is the encoder output for `flat`; ReLU gates the gradient.
    pub fn backward(&mut self, flat: &[T], y: &[T], gy: &[T], gx: Option<&mut [T]>) -> Result<()> {
        let row = self.row();
        check_len("conv encoder frame", row, flat.len())?;
        check_len("conv encoder grad", self.basis(), gy.len())?;
        let gated: Vec<T> = gy
            .iter()
            .zip(y)
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect();
        outer_acc(&gated, flat, self.filters.grad_mut());
        if let Some(gx) = gx {
            check_len("conv encoder input grad", row, gx.len())?;
            matvec_t_acc(&self.filters.values, &gated, gx);
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.filters]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.filters]
    }
}

pub(crate) fn flatten<T: Real>(frame: &[Vec<T>]) -> Vec<T> {
    frame.iter().flatten().copied().collect()
}

/// Transposed convolution whose filters are multiplied by a Hann window at
/// synthesis time, so that 50 %-overlapped outputs add up without seams.
///
/// Filters are `[basis, channels, window]` and shared by every stem.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDeconv<T> {
    pub filters: ParamTensor<T>,
    window: Vec<T>,
}

impl<T: Real> WindowedDeconv<T> {
    pub fn new<R: Rng>(name: &str, basis: usize, channels: usize, window: &[T], rng: &mut R) -> Self {
        let size = window.len();
        let bound = 1.0 / ((channels * size) as f64).sqrt();
        WindowedDeconv {
            filters: ParamTensor::uniform(format!("{name}.filters"), &[basis, channels, size], bound, rng),
            window: window.to_vec(),
        }
    }

    pub fn from_filters(filters: ParamTensor<T>, window: &[T]) -> Result<Self> {
        if filters.shape.len() != 3 {
            return Err(Error::Config("deconv filters must be rank 3".into()));
        }
        check_len("deconv window", filters.shape[2], window.len())?;
        Ok(WindowedDeconv {
            filters,
            window: window.to_vec(),
        })
    }

    pub fn basis(&self) -> usize {
        self.filters.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.filters.shape[1]
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Frame contributions for several latent vectors at once (one per stem),
    /// reading each filter row a single time. Output: `[stem][channel][n]`.
    pub fn synthesize(&self, latents: &[Vec<T>]) -> Result<Vec<Vec<Vec<T>>>> {
        let (basis, ch, size) = (self.basis(), self.channels(), self.window.len());
        for l in latents {
            check_len("deconv latent", basis, l.len())?;
        }
        let mut acc = vec![vec![T::zero(); ch * size]; latents.len()];
        for (k, row) in self.filters.values.chunks_exact(ch * size).enumerate() {
            for (l, a) in latents.iter().zip(acc.iter_mut()) {
                if l[k] != T::zero() {
                    T::axpy(l[k], row, a);
                }
            }
        }
        Ok(acc
            .into_iter()
            .map(|a| {
                a.chunks_exact(size)
                    .map(|c| c.iter().zip(&self.window).map(|(&v, &w)| v * w).collect())
                    .collect()
            })
            .collect())
    }

    /// Single-latent form of [`WindowedDeconv::synthesize`].
    pub fn contribution(&self, latent: &[T]) -> Result<Vec<Vec<T>>> {
        Ok(self.synthesize(std::slice::from_ref(&latent.to_vec()))?.remove(0))
    }

    /// Gradient of one latent's contribution; adds into filter grads and `glatent`.
    pub fn backward(&mut self, latent: &[T], gout: &[Vec<T>], glatent: &mut [T]) -> Result<()> {
        let (basis, ch, size) = (self.basis(), self.channels(), self.window.len());
        check_len("deconv latent", basis, latent.len())?;
        check_len("deconv latent grad", basis, glatent.len())?;
        check_len("deconv channels", ch, gout.len())?;
        let mut gw = Vec::with_capacity(ch * size);
        for g in gout {
            check_len("deconv output grad", size, g.len())?;
            gw.extend(g.iter().zip(&self.window).map(|(&a, &w)| a * w));
        }
        for (k, row) in self.filters.values.chunks_exact(ch * size).enumerate() {
            glatent[k] = glatent[k] + T::dot(row, &gw);
        }
        let grad = self.filters.grad_mut();
        for (k, &m) in latent.iter().enumerate() {
            if m != T::zero() {
                T::axpy(m, &gw, &mut grad[k * ch * size..(k + 1) * ch * size]);
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&ParamTensor<T>> {
        vec![&self.filters]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.filters]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{make_window, OverlapState, WindowSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut r = rng(0);
        let mut l = Linear::<f64>::new("l", 3, 3, &mut r);
        l.weight.values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        l.bias.values = vec![0.0; 3];
        assert_eq!(l.apply(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
        l.weight.values = vec![0.0; 9];
        l.bias.values = vec![0.1, 0.2, 0.3];
        assert_eq!(l.apply(&[9.0, 9.0, 9.0]).unwrap(), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn linear_matches_naive_loop() {
        let mut r = rng(1);
        let l = Linear::<f32>::new("l", 2, 3, &mut r);
        let x = [0.3f32, -0.7];
        let y = l.apply(&x).unwrap();
        for o in 0..3 {
            let mut acc = l.bias.values[o] as f64;
            for i in 0..2 {
                acc += l.weight.values[o * 2 + i] as f64 * x[i] as f64;
            }
            assert!((y[o] as f64 - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_shape_errors() {
        let l = Linear::<f32>::new("l", 2, 3, &mut rng(2));
        assert!(matches!(l.apply(&[1.0]), Err(Error::Size { .. })));
    }

    #[test]
    fn lstm_zero_weights_give_zero() {
        let mut l = Lstm::<f64>::new("l", 3, 4, &mut rng(3));
        for p in l.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = LstmState::zeros(4);
        l.step(&[1.0, -1.0, 0.5], &mut s).unwrap();
        assert!(s.h.iter().chain(&s.c).all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_scalar_cell_closed_form() {
        let mut l = Lstm::<f64>::new("l", 1, 1, &mut rng(4));
        l.w_ih.values = vec![1.0; 4];
        l.w_hh.values = vec![1.0; 4];
        l.bias.values = vec![0.0; 4];
        let mut s = LstmState::zeros(1);
        l.step(&[1.0], &mut s).unwrap();
        let sig = 1.0 / (1.0 + (-1.0f64).exp());
        let c = sig * 1.0f64.tanh();
        let h = sig * c.tanh();
        assert!((s.c[0] - c).abs() < 1e-15);
        assert!((s.h[0] - h).abs() < 1e-15);
        // f32 path agrees with the double-precision reference
        let l32 = Lstm::<f32> {
            w_ih: l.w_ih.cast(),
            w_hh: l.w_hh.cast(),
            bias: l.bias.cast(),
        };
        let mut s32 = LstmState::zeros(1);
        l32.step(&[1.0], &mut s32).unwrap();
        assert!((s32.h[0] as f64 - h).abs() < 1e-6);
    }

    #[test]
    fn lstm_cell_bounded_under_constant_drive() {
        for seed in 0..5 {
            let l = Lstm::<f64>::new("l", 3, 5, &mut rng(10 + seed));
            let x = [0.4, -0.2, 0.9];
            let mut s = LstmState::zeros(5);
            // bound: |c| <= i_max * |g|_max / (1 - f_max) with every gate in (0, 1)
            let mut i_max: f64 = 0.0;
            let mut f_max: f64 = 0.0;
            let mut g_max: f64 = 0.0;
            for _ in 0..200 {
                let mut a = vec![0.0; 20];
                l.gates(&x, &s.h, &mut a);
                i_max = i_max.max(a[..5].iter().cloned().fold(0.0, f64::max));
                f_max = f_max.max(a[5..10].iter().cloned().fold(0.0, f64::max));
                g_max = g_max.max(a[10..15].iter().map(|v| v.abs()).fold(0.0, f64::max));
                l.step(&x, &mut s).unwrap();
            }
            let bound = i_max * g_max / (1.0 - f_max);
            assert!(s.c.iter().all(|c| c.abs() <= bound + 1e-12));
        }
    }

    #[test]
    fn lstm_param_count_closed_form() {
        let l = Lstm::<f32>::new("l", 500, 500, &mut rng(5));
        assert_eq!(l.param_count(), 2_002_000);
    }

    #[test]
    fn lstm_seq_equals_steps() {
        let l = Lstm::<f64>::new("l", 3, 4, &mut rng(6));
        let xs: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64 * 0.1, -0.3, 0.2]).collect();
        let (ys, tape) = l.forward_seq(&xs, &LstmState::zeros(4)).unwrap();
        assert_eq!(tape.steps(), 6);
        let mut s = LstmState::zeros(4);
        for (x, y) in xs.iter().zip(&ys) {
            l.step(x, &mut s).unwrap();
            assert_eq!(&s.h, y);
        }
    }

    #[test]
    fn lstm_backward_before_forward_is_state_error() {
        let mut l = Lstm::<f64>::new("l", 2, 2, &mut rng(7));
        let err = l.backward_seq(&LstmTape::default(), &[vec![1.0, 1.0]]);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn memory_block_zero_lstm_skips() {
        let mut b = MemoryBlock::<f64>::new("b", 4, 4, 2, None, Skip::Identity, &mut rng(8));
        for p in b.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = [0.1, -0.2, 0.3, 0.4];
        let mut st = b.zero_state();
        assert_eq!(b.forward_step(&x, None, &mut st).unwrap(), x.to_vec());

        b.skip = Skip::Encoded;
        let e = [1.0, 2.0, 3.0, 4.0];
        let mut st = b.zero_state();
        assert_eq!(b.forward_step(&x, Some(&e), &mut st).unwrap(), e.to_vec());
        assert!(matches!(
            b.forward_step(&x, Some(&e[..3]), &mut b.zero_state()),
            Err(Error::Size { .. })
        ));
        assert!(matches!(
            b.forward_step(&x, None, &mut b.zero_state()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn memory_block_matches_composed_steps() {
        let b = MemoryBlock::<f64>::new("b", 3, 3, 2, None, Skip::Identity, &mut rng(9));
        let mut st = b.zero_state();
        let mut s1 = LstmState::zeros(3);
        let mut s2 = LstmState::zeros(3);
        for t in 0..4 {
            let x = vec![0.2 * t as f64, -0.1, 0.5];
            let y = b.forward_step(&x, None, &mut st).unwrap();
            b.lstms[0].step(&x, &mut s1).unwrap();
            b.lstms[1].step(&s1.h.clone(), &mut s2).unwrap();
            for j in 0..3 {
                assert!((y[j] - (s2.h[j] + x[j])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_encoder_contracts() {
        let mut enc = ConvEncoder::<f64>::new("e", 8, 2, 16, &mut rng(12));
        let zero = vec![vec![0.0; 16]; 2];
        assert!(enc.encode(&zero).unwrap().iter().all(|&v| v == 0.0));

        let mut r = rng(13);
        let frame: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..16).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let y = enc.encode(&frame).unwrap();
        for k in 0..8 {
            let mut acc = 0.0;
            for ch in 0..2 {
                for n in 0..16 {
                    acc += enc.filters.values[(k * 2 + ch) * 16 + n] * frame[ch][n];
                }
            }
            assert!((y[k] - acc.max(0.0)).abs() < 1e-12);
        }

        enc.filters.values.iter_mut().for_each(|v| *v = 0.0);
        enc.filters.values[3 * 32] = 1.0;
        let y = enc.encode(&frame).unwrap();
        assert_eq!(y[3], frame[0][0].max(0.0));
        assert!(matches!(enc.encode(&[vec![0.0; 15], vec![0.0; 16]]), Err(Error::Size { .. })));
    }

    #[test]
    fn deconv_zero_latent_and_one_hot() {
        let spec = WindowSpec::default();
        let w: Vec<f64> = make_window(&spec).unwrap();
        let mut dec = WindowedDeconv::new("d", 4, 2, &w, &mut rng(14));
        let out = dec.contribution(&[0.0; 4]).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));

        dec.filters.values.iter_mut().for_each(|v| *v = 0.0);
        dec.filters.values[(2 * 2) * 1024 + 700] = 1.0;
        let out = dec.contribution(&[0.0, 0.0, 0.8, 0.0]).unwrap();
        assert_eq!(out[0][700], w[700] * 0.8);
        assert_eq!(out[0].iter().filter(|v| **v != 0.0).count(), 1);
        assert!(out[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_constant_latent_has_no_ripple() {
        let spec = WindowSpec::default();
        let w: Vec<f64> = make_window(&spec).unwrap();
        let mut dec = WindowedDeconv::new("d", 3, 2, &w, &mut rng(15));
        dec.filters.values.iter_mut().for_each(|v| *v = 1.0);
        let latent = [0.5, 0.25, 0.25];
        let mut ola = OverlapState::new(&spec, 2);
        let mut out = Vec::new();
        for _ in 0..10 {
            let c = dec.contribution(&latent).unwrap();
            out.extend(ola.overlap_add(&c, spec.hop).unwrap().remove(0));
        }
        let steady = &out[512..];
        let (lo, hi) = steady
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!((hi - lo) < 1e-12, "ripple {}", hi - lo);
        assert!((steady[0] - 1.0).abs() < 1e-12);
    }
}
