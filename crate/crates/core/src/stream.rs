//! Hop-synchronous streaming sessions.
//!
//! A [`Session`] owns everything one stream mutates (input cursor, LSTM
//! states, overlap-add tails) and borrows an immutable [`Model`], so many
//! sessions can share one model across threads.
//!
//! Output is index-aligned with input: the hop emitted for window `k` holds
//! output samples `[k*hop, k*hop + hop)`, available once input sample
//! `k*hop + window - 1` has arrived. Algorithmic latency is therefore one
//! window.

use std::time::{Duration, Instant};

use crate::dsp::FrameCursor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelState, StemFrames};
use crate::real::Real;

/// Per-frame wall-clock timing of a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamStats {
    pub frame_times: Vec<Duration>,
}

impl StreamStats {
    pub fn frames_processed(&self) -> usize {
        self.frame_times.len()
    }

    pub fn max(&self) -> Duration {
        self.frame_times.iter().copied().max().unwrap_or_default()
    }

    pub fn mean(&self) -> Duration {
        if self.frame_times.is_empty() {
            return Duration::ZERO;
        }
        self.frame_times.iter().sum::<Duration>() / self.frame_times.len() as u32
    }
}

pub struct Session<'m, T: Real> {
    model: &'m Model<T>,
    cursor: FrameCursor<T>,
    state: ModelState<T>,
    samples_in: u64,
    samples_out: u64,
    closed: bool,
    stats: StreamStats,
}

pub fn open_session<T: Real>(model: &Model<T>) -> Session<'_, T> {
    Session::new(model)
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        let cfg = model.config();
        Session {
            model,
            cursor: FrameCursor::new(cfg.window_spec(), cfg.channels),
            state: model.init_state(),
            samples_in: 0,
            samples_out: 0,
            closed: false,
            stats: StreamStats::default(),
        }
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    /// One analysis window, in samples.
    pub fn latency_samples(&self) -> usize {
        self.model.config().latency_samples()
    }

    pub fn samples_in(&self) -> u64 {
        self.samples_in
    }

    pub fn samples_out(&self) -> u64 {
        self.samples_out
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn stats(&self) -> &StreamStats {
        &self.stats
    }

    /// Returns the session to its freshly opened state.
    pub fn reset(&mut self) {
        self.cursor.reset();
        self.state.reset();
        self.samples_in = 0;
        self.samples_out = 0;
        self.closed = false;
        self.stats = StreamStats::default();
    }

    fn ensure_open(&self) -> Result<()> {
        if self.closed {
            return Err(Error::State("session was flushed; reset it before pushing".into()));
        }
        Ok(())
    }

    fn run(&mut self, frames: Vec<Vec<Vec<T>>>) -> Result<Vec<StemFrames<T>>> {
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let t = Instant::now();
            let hop = self.model.forward_frame(&mut self.state, &f)?;
            self.stats.frame_times.push(t.elapsed());
            self.samples_out += hop.len() as u64;
            out.push(hop);
        }
        Ok(out)
    }

    /// Pushes interleaved samples; returns one [`StemFrames`] per completed window.
    pub fn push(&mut self, interleaved: &[T]) -> Result<Vec<StemFrames<T>>> {
        self.ensure_open()?;
        let before = self.cursor.filled();
        let frames = self.cursor.push_interleaved(interleaved)?;
        self.samples_in += self.cursor.filled() - before;
        self.run(frames)
    }

    /// Planar form of [`Session::push`].
    pub fn push_planar(&mut self, channels: &[&[T]]) -> Result<Vec<StemFrames<T>>> {
        self.ensure_open()?;
        let before = self.cursor.filled();
        let frames = self.cursor.push_samples(channels)?;
        self.samples_in += self.cursor.filled() - before;
        self.run(frames)
    }

    /// Zero-pads the input to complete every window that still covers real
    /// samples, emits the remaining output (so `samples_out == samples_in`)
    /// and closes the session.
    pub fn flush(&mut self) -> Result<StemFrames<T>> {
        self.ensure_open()?;
        let cfg = self.model.config();
        let (w, h) = (cfg.window, cfg.hop);
        let total = self.samples_in.div_ceil(h as u64);
        let emitted = self.cursor.frames_emitted();
        let pending = self.cursor.pending();
        let frames: Vec<Vec<Vec<T>>> = (0..total.saturating_sub(emitted) as usize)
            .map(|j| {
                pending
                    .iter()
                    .map(|p| {
                        let mut f = vec![T::zero(); w];
                        let start = (j * h).min(p.len());
                        let end = (start + w).min(p.len());
                        f[..end - start].copy_from_slice(&p[start..end]);
                        f
                    })
                    .collect()
            })
            .collect();
        let hops = self.run(frames)?;
        let mut stems = vec![vec![Vec::new(); cfg.channels]; cfg.stems];
        for hop in hops {
            for (o, s) in stems.iter_mut().zip(hop.stems) {
                for (oc, sc) in o.iter_mut().zip(s) {
                    oc.extend(sc);
                }
            }
        }
        let excess = (self.samples_out - self.samples_in) as usize;
        for c in stems.iter_mut().flatten() {
            c.truncate(c.len() - excess);
        }
        self.samples_out = self.samples_in;
        self.closed = true;
        Ok(StemFrames { stems })
    }
}

/// Concatenates hops into `[stem][channel][samples]`.
pub fn concat<T: Clone>(hops: &[StemFrames<T>]) -> Vec<Vec<Vec<T>>> {
    let Some(first) = hops.first() else {
        return Vec::new();
    };
    let mut out: Vec<Vec<Vec<T>>> = first.stems.iter().map(|s| vec![Vec::new(); s.len()]).collect();
    for hop in hops {
        for (o, s) in out.iter_mut().zip(&hop.stems) {
            for (oc, sc) in o.iter_mut().zip(s) {
                oc.extend_from_slice(sc);
            }
        }
    }
    out
}
