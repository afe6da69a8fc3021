//! SDR scoring, dataset evaluation and the per-block compute benchmark.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::{StemSet, Waveform, STEM_NAMES};
use crate::error::{check_len, Error, Result};
use crate::io::{load_track, scan_dataset, TrackEntry};
use crate::model::{forward_offline, Model};

pub const SDR_CAP_DB: f64 = 100.0;
pub const DEFAULT_BENCH_ITERATIONS: usize = 1000;
pub const WARMUP_ITERATIONS: usize = 10;

/// `10 log10(sum ref^2 / sum (ref - est)^2)`, clamped to ±100 dB. Channels
/// are pooled.
pub fn sdr(reference: &[Vec<f32>], est: &[Vec<f32>]) -> Result<f64> {
    check_len("sdr channels", reference.len(), est.len())?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (r, e) in reference.iter().zip(est) {
        check_len("sdr samples", r.len(), e.len())?;
        for (&a, &b) in r.iter().zip(e) {
            let (a, b) = (a as f64, b as f64);
            num += a * a;
            den += (a - b) * (a - b);
        }
    }
    if num == 0.0 {
        return Err(Error::Domain("reference has zero energy".into()));
    }
    let v = if den == 0.0 {
        SDR_CAP_DB
    } else {
        10.0 * (num / den).log10()
    };
    Ok(v.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median of per-chunk SDRs over non-overlapping chunks of `chunk` samples.
/// A trailing partial chunk is ignored; chunks with a silent reference are
/// skipped.
pub fn chunked_sdr(reference: &[Vec<f32>], est: &[Vec<f32>], chunk: usize) -> Result<f64> {
    check_len("sdr channels", reference.len(), est.len())?;
    let len = reference.first().map_or(0, Vec::len);
    for (r, e) in reference.iter().zip(est) {
        check_len("sdr samples", len, r.len())?;
        check_len("sdr samples", len, e.len())?;
    }
    if chunk == 0 || len < chunk {
        return Err(Error::Domain(format!("signal of {len} samples is shorter than one {chunk}-sample chunk")));
    }
    let mut scores = Vec::new();
    for k in 0..len / chunk {
        let span = k * chunk..(k + 1) * chunk;
        let r: Vec<Vec<f32>> = reference.iter().map(|c| c[span.clone()].to_vec()).collect();
        if r.iter().flatten().all(|&v| v == 0.0) {
            continue;
        }
        let e: Vec<Vec<f32>> = est.iter().map(|c| c[span.clone()].to_vec()).collect();
        scores.push(sdr(&r, &e)?);
    }
    median(&mut scores).ok_or_else(|| Error::Domain("every chunk has a silent reference".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackScore {
    pub track: String,
    /// Chunked-median SDR per stem, in [`STEM_NAMES`] order.
    pub stems: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdrReport {
    pub tracks: Vec<TrackScore>,
    /// Median over tracks per stem.
    pub stems: [f64; 4],
    /// Mean of the four stem aggregates.
    pub overall: f64,
}

impl SdrReport {
    pub fn from_tracks(tracks: Vec<TrackScore>) -> Result<Self> {
        if tracks.is_empty() {
            return Err(Error::Domain("no tracks to aggregate".into()));
        }
        let mut stems = [0.0; 4];
        for (s, out) in stems.iter_mut().enumerate() {
            let mut v: Vec<f64> = tracks.iter().map(|t| t.stems[s]).collect();
            *out = median(&mut v).unwrap_or(0.0);
        }
        let overall = stems.iter().sum::<f64>() / 4.0;
        Ok(SdrReport { tracks, stems, overall })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<32}", "track");
        for n in STEM_NAMES {
            s += &format!("{n:>9}");
        }
        s.push('\n');
        for t in &self.tracks {
            s += &format!("{:<32}", t.track);
            for v in t.stems {
                s += &format!("{v:>9.2}");
            }
            s.push('\n');
        }
        s += &format!("{:<32}", "median");
        for v in self.stems {
            s += &format!("{v:>9.2}");
        }
        s += &format!("\nall (mean of stems): {:.2} dB\n", self.overall);
        s
    }

    /// One JSON object per track, then one `summary` object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.tracks {
            let mut rec = serde_json::json!({ "kind": "track", "track": t.track });
            for (n, v) in STEM_NAMES.iter().zip(t.stems) {
                rec[n] = serde_json::json!(v);
            }
            out += &format!("{rec}\n");
        }
        let mut rec = serde_json::json!({ "kind": "summary", "all": self.overall });
        for (n, v) in STEM_NAMES.iter().zip(self.stems) {
            rec[n] = serde_json::json!(v);
        }
        out += &format!("{rec}\n");
        out
    }
}

/// What produces the stem estimates during evaluation.
pub enum Separator<'a> {
    Model(&'a Model<f32>),
    /// Returns the reference stems (harness check; every score is the cap).
    Oracle,
    /// Returns the mixture for every stem (do-nothing baseline).
    Mixture,
}

impl Separator<'_> {
    fn separate(&self, mixture: &Waveform, stems: &StemSet) -> Result<StemSet> {
        match self {
            Separator::Model(m) => forward_offline(m, mixture, true),
            Separator::Oracle => Ok(stems.clone()),
            Separator::Mixture => StemSet::new(vec![mixture.clone(); 4]),
        }
    }
}

/// Worker count: `DEMIX_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("DEMIX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn score_track(sep: &Separator, track: &TrackEntry, chunk_seconds: f64) -> Result<TrackScore> {
    let (mixture, stems) = load_track(&track.dir)?;
    let est = sep.separate(&mixture, &stems)?;
    let chunk = ((chunk_seconds * mixture.sample_rate as f64) as usize).clamp(1, mixture.len().max(1));
    let mut scores = [0.0; 4];
    for (s, out) in scores.iter_mut().enumerate() {
        *out = chunked_sdr(&stems.stems[s].channels, &est.stems[s].channels, chunk)?;
    }
    Ok(TrackScore {
        track: track.name.clone(),
        stems: scores,
    })
}

/// Scores `tracks` with 1 s chunks (shorter tracks use a single chunk),
/// fanning out across up to [`worker_count`] threads. Results are in track
/// order regardless of scheduling.
pub fn evaluate_tracks(sep: &Separator, tracks: &[TrackEntry]) -> Result<SdrReport> {
    let workers = worker_count().min(tracks.len()).max(1);
    let mut results: Vec<Option<Result<TrackScore>>> = (0..tracks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks = results.chunks_mut(tracks.len().div_ceil(workers).max(1));
        for (w, slots) in chunks.enumerate() {
            let base = w * tracks.len().div_ceil(workers).max(1);
            scope.spawn(move || {
                for (i, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(score_track(sep, &tracks[base + i], 1.0));
                }
            });
        }
    });
    let scores = results
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::State("worker did not finish".into()))))
        .collect::<Result<Vec<_>>>()?;
    SdrReport::from_tracks(scores)
}

/// Evaluates the `split` of a dataset tree (`test` by default, or every
/// split when the tree has no `test` directory).
pub fn evaluate_dataset(sep: &Separator, root: impl AsRef<Path>, split: Option<&str>) -> Result<SdrReport> {
    let root = root.as_ref();
    let index = scan_dataset(root)?;
    if let Some(w) = index.warnings.first() {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            detail: w.clone(),
        });
    }
    let tracks: Vec<TrackEntry> = match split {
        Some(s) => index.split(s).to_vec(),
        None if index.splits.contains_key("test") => index.split("test").to_vec(),
        None => index.splits.values().flatten().cloned().collect(),
    };
    if tracks.is_empty() {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            detail: "no tracks found".into(),
        });
    }
    evaluate_tracks(sep, &tracks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub hardware: String,
    pub iterations: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub budget_ms: f64,
    pub pass: bool,
}

/// Published per-block timings (1 core, 4 cores) in ms, for context.
pub const REFERENCE_TIMINGS: [(&str, f64, f64); 2] = [("hs_tasnet", 9.10, 4.26), ("hs_tasnet_small", 3.98, 1.83)];

/// Half the hop duration, in ms.
pub fn budget_ms(hop: usize, sample_rate: u32) -> f64 {
    0.5 * 1000.0 * hop as f64 / sample_rate as f64
}

pub fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {cores} logical cores available; timed single-threaded")
}

/// Times `forward_frame` on random windows after [`WARMUP_ITERATIONS`]
/// untimed calls on the same session.
pub fn bench_block(model: &Model<f32>, iterations: usize, seed: u64) -> Result<BenchReport> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut window = || -> Vec<Vec<f32>> {
        (0..cfg.channels)
            .map(|_| (0..cfg.window).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let mut state = model.init_state();
    for _ in 0..WARMUP_ITERATIONS {
        model.forward_frame(&mut state, &window())?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let w = window();
        let t = Instant::now();
        let out = model.forward_frame(&mut state, &w)?;
        samples.push(t.elapsed().as_secs_f64() * 1000.0);
        std::hint::black_box(out);
    }
    let mean = if samples.is_empty() {
        0.0
    } else {
        samples.iter().sum::<f64>() / samples.len() as f64
    };
    let max = samples.iter().copied().fold(0.0, f64::max);
    let budget = budget_ms(cfg.hop, cfg.sample_rate);
    Ok(BenchReport {
        model: cfg.arch.name().to_string(),
        hardware: hardware_note(),
        iterations,
        samples_ms: samples,
        mean_ms: mean,
        max_ms: max,
        budget_ms: budget,
        pass: mean < budget,
    })
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "model      {}\nhardware   {}\niterations {}\nmean       {:.3} ms\nmax        {:.3} ms\nbudget     {:.3} ms (50% of hop)\nresult     {}\n",
            self.model,
            self.hardware,
            self.iterations,
            self.mean_ms,
            self.max_ms,
            self.budget_ms,
            if self.pass { "PASS" } else { "FAIL" }
        );
        s += "published reference (1 core / 4 cores):";
        for (m, one, four) in REFERENCE_TIMINGS {
            s += &format!(" {m} {one:.2}/{four:.2} ms;");
        }
        s.push('\n');
        s
    }

    /// Summary record without the per-iteration samples.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "kind": "bench",
            "model": self.model,
            "hardware": self.hardware,
            "iterations": self.iterations,
            "mean_ms": self.mean_ms,
            "max_ms": self.max_ms,
            "budget_ms": self.budget_ms,
            "pass": self.pass,
        })
        .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelConfig};

    fn noise(seed: u64, len: usize) -> Vec<Vec<f32>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..2).map(|_| (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn scale(x: &[Vec<f32>], k: f32) -> Vec<Vec<f32>> {
        x.iter().map(|c| c.iter().map(|v| v * k).collect()).collect()
    }

    #[test]
    fn closed_form_cases() {
        let r = noise(1, 1000);
        assert_eq!(sdr(&r, &r).unwrap(), 100.0);
        assert_eq!(sdr(&r, &scale(&r, 0.0)).unwrap(), 0.0);
        assert!((sdr(&r, &scale(&r, 0.5)).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(sdr(&r, &scale(&r, 2.0)).unwrap(), 0.0);
        assert!(matches!(sdr(&scale(&r, 0.0), &r), Err(Error::Domain(_))));
        assert!(matches!(sdr(&r, &noise(2, 999)), Err(Error::Size { .. })));
    }

    #[test]
    fn noise_monotonicity() {
        let r = noise(3, 4000);
        let n = noise(4, 4000);
        let mut last = f64::INFINITY;
        for level in [0.01f32, 0.05, 0.1, 0.5, 1.0] {
            let e: Vec<Vec<f32>> = r
                .iter()
                .zip(&n)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + level * y).collect())
                .collect();
            let v = sdr(&r, &e).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn chunked_median_cases() {
        let r = noise(5, 10 * 100);
        assert_eq!(chunked_sdr(&r, &r, 100).unwrap(), 100.0);
        let mut half = r.clone();
        half.iter_mut().for_each(|c| c[500..].iter_mut().for_each(|v| *v = 0.0));
        assert_eq!(chunked_sdr(&r, &half, 100).unwrap(), 50.0);
        let silent = vec![vec![0.0f32; 1000]; 2];
        assert!(matches!(chunked_sdr(&silent, &r, 100), Err(Error::Domain(_))));
        // stationary noise: chunked close to the full-signal value
        let long_r = noise(7, 44_100 * 4);
        let long_e: Vec<Vec<f32>> = long_r
            .iter()
            .zip(&noise(8, 44_100 * 4))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + 0.3 * y).collect())
            .collect();
        let full = sdr(&long_r, &long_e).unwrap();
        let chunked = chunked_sdr(&long_r, &long_e, 44_100).unwrap();
        assert!((full - chunked).abs() < 1.0);
    }

    #[test]
    fn report_overall_is_stem_mean() {
        let tracks = vec![
            TrackScore {
                track: "a".into(),
                stems: [1.0, 2.0, 3.0, 4.0],
            },
            TrackScore {
                track: "b".into(),
                stems: [3.0, 2.0, 5.0, 0.0],
            },
            TrackScore {
                track: "c".into(),
                stems: [2.0, 9.0, 4.0, 8.0],
            },
        ];
        let r = SdrReport::from_tracks(tracks).unwrap();
        assert_eq!(r.stems, [2.0, 2.0, 4.0, 4.0]);
        assert_eq!(r.overall, 3.0);
        assert_eq!(r.to_json_lines().lines().count(), 4);
    }

    #[test]
    fn bench_single_iteration() {
        let m = Model::<f32>::build(&ModelConfig::toy(Arch::HsTasnetSmall), 0).unwrap();
        let r = bench_block(&m, 1, 0).unwrap();
        assert_eq!(r.samples_ms.len(), 1);
        assert_eq!(r.mean_ms, r.max_ms);
        assert_eq!(r.pass, r.mean_ms < r.budget_ms);
        assert!((budget_ms(512, 44_100) - 5.805).abs() < 5e-4);
        assert!(r.to_text().contains("3.98/1.83"));
    }
}
