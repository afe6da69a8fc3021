//! Deterministic synthetic multitracks for tests, examples and smoke training.
//!
//! Each stem occupies its own spectral/temporal niche so a separator has
//! something learnable: a vibrato tone (vocals), decaying noise bursts
//! (drums), a low sine line (bass) and a sustained chord (other).

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{StemSet, Waveform};
use crate::error::Result;

/// A stereo 4-stem clip of `seconds` at `sample_rate`.
pub fn synthetic_track(seconds: f64, sample_rate: u32, seed: u64) -> StemSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let pan = |rng: &mut ChaCha8Rng| {
        let p: f64 = rng.gen_range(0.3..0.7);
        [(1.0 - p).sqrt(), p.sqrt()]
    };

    let f0 = rng.gen_range(300.0..600.0);
    let vib = rng.gen_range(4.0..6.0);
    let vp = pan(&mut rng);
    let mut phase = 0.0;
    let vocals: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            phase += TAU * f0 * (1.0 + 0.02 * (TAU * vib * t).sin()) / sr;
            0.25 * (phase.sin() + 0.3 * (2.0 * phase).sin())
        })
        .collect();

    let beat = (sr * rng.gen_range(0.35..0.55)) as usize;
    let dp = pan(&mut rng);
    let mut drums = vec![0.0; len];
    let mut env = 0.0f64;
    for (i, d) in drums.iter_mut().enumerate() {
        if i % beat.max(1) == 0 {
            env = 1.0;
        }
        env *= 0.9993;
        *d = 0.3 * env * rng.gen_range(-1.0..1.0);
    }

    let fb = rng.gen_range(50.0..110.0);
    let bp = pan(&mut rng);
    let bass: Vec<f64> = (0..len).map(|i| 0.3 * (TAU * fb * i as f64 / sr).sin()).collect();

    let root = rng.gen_range(180.0..260.0);
    let op = pan(&mut rng);
    let other: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            [1.0, 1.25, 1.5].iter().map(|r| (TAU * root * r * t).sin()).sum::<f64>() * 0.08
        })
        .collect();

    let stereo = |x: &[f64], g: [f64; 2]| -> Waveform {
        Waveform {
            sample_rate,
            channels: g.iter().map(|&k| x.iter().map(|&v| (v * k) as f32).collect()).collect(),
        }
    };
    StemSet {
        stems: vec![
            stereo(&vocals, vp),
            stereo(&drums, dp),
            stereo(&bass, bp),
            stereo(&other, op),
        ],
    }
}

/// Uniform white noise in [-amp, amp], stereo.
pub fn noise(len: usize, sample_rate: u32, amp: f32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform {
        sample_rate,
        channels: (0..2).map(|_| (0..len).map(|_| rng.gen_range(-amp..=amp)).collect()).collect(),
    }
}

/// Writes `<root>/<split>/<name>/{mixture,vocals,drums,bass,other}.wav` as float32.
pub fn write_track(root: &std::path::Path, split: &str, name: &str, track: &StemSet) -> Result<()> {
    let dir = root.join(split).join(name);
    std::fs::create_dir_all(&dir)?;
    let spec = crate::io::WavSpec::float32(track.stems[0].sample_rate, 2);
    crate::io::write_wav(dir.join("mixture.wav"), &track.mixture(), spec)?;
    for (n, w) in track.iter() {
        crate::io::write_wav(dir.join(format!("{n}.wav")), w, spec)?;
    }
    Ok(())
}
