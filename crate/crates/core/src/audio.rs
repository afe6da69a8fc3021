//! Planar sample buffers shared by every module.

use crate::error::{Error, Result};

/// Stem labels in output order.
pub const STEM_NAMES: [&str; 4] = ["vocals", "drums", "bass", "other"];

/// Planar multichannel `f32` audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f32>>,
}

impl Waveform {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f32>>) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Format("channels differ in length".into()));
        }
        Ok(Waveform {
            sample_rate,
            channels,
        })
    }

    pub fn silence(sample_rate: u32, channels: usize, len: usize) -> Self {
        Waveform {
            sample_rate,
            channels: vec![vec![0.0; len]; channels],
        }
    }

    pub fn from_interleaved(sample_rate: u32, channels: usize, data: &[f32]) -> Result<Self> {
        if channels == 0 || data.len() % channels != 0 {
            return Err(Error::Format(format!(
                "{} interleaved values do not divide into {} channels",
                data.len(),
                channels
            )));
        }
        let mut planar = vec![Vec::with_capacity(data.len() / channels); channels];
        for frame in data.chunks_exact(channels) {
            for (p, &v) in planar.iter_mut().zip(frame) {
                p.push(v);
            }
        }
        Ok(Waveform {
            sample_rate,
            channels: planar,
        })
    }

    pub fn interleaved(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * self.channel_count());
        for i in 0..self.len() {
            for c in &self.channels {
                out.push(c[i]);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn append(&mut self, other: &[Vec<f32>]) {
        for (c, o) in self.channels.iter_mut().zip(other) {
            c.extend_from_slice(o);
        }
    }
}

/// Four waveforms (vocals, drums, bass, other) on a common clock.
#[derive(Debug, Clone, PartialEq)]
pub struct StemSet {
    pub stems: Vec<Waveform>,
}

impl StemSet {
    pub fn new(stems: Vec<Waveform>) -> Result<Self> {
        if stems.len() != STEM_NAMES.len() {
            return Err(Error::Format(format!("expected 4 stems, got {}", stems.len())));
        }
        let len = stems[0].len();
        if stems.iter().any(|s| s.len() != len) {
            return Err(Error::Format("stems differ in length".into()));
        }
        Ok(StemSet { stems })
    }

    pub fn silence(sample_rate: u32, channels: usize, len: usize) -> Self {
        StemSet {
            stems: (0..4).map(|_| Waveform::silence(sample_rate, channels, len)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.stems.first().map_or(0, Waveform::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Waveform> {
        STEM_NAMES.iter().position(|n| *n == name).map(|i| &self.stems[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Waveform)> {
        STEM_NAMES.iter().copied().zip(&self.stems)
    }

    /// Sample-wise sum of all stems.
    pub fn mixture(&self) -> Waveform {
        let mut mix = self.stems[0].clone();
        for s in &self.stems[1..] {
            for (m, c) in mix.channels.iter_mut().zip(&s.channels) {
                for (a, &b) in m.iter_mut().zip(c) {
                    *a += b;
                }
            }
        }
        mix
    }
}
