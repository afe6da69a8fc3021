//! WAV codec, the `HSTN` weight format and dataset ingestion.
//!
//! Weight file layout (little-endian throughout):
//!
//! ```text
//! "HSTN" | version u32 | tensor count u32 |
//!   per tensor: name len u16 | UTF-8 name | dtype u8 (0 = f32) | rank u8 | dims u32 x rank | values f32 x prod(dims)
//! ```
//!
//! The architecture config is stored next to the weights as TOML, in a file
//! named after the weight file with `.toml` appended.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{StemSet, Waveform, STEM_NAMES};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    Pcm24,
    Float32,
}

impl WavEncoding {
    fn bytes(self) -> usize {
        match self {
            WavEncoding::Pcm16 => 2,
            WavEncoding::Pcm24 => 3,
            WavEncoding::Float32 => 4,
        }
    }
}

impl std::str::FromStr for WavEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" => Ok(WavEncoding::Pcm16),
            "pcm24" => Ok(WavEncoding::Pcm24),
            "float32" | "f32" => Ok(WavEncoding::Float32),
            other => Err(Error::Config(format!("unknown WAV encoding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavSpec {
    pub sample_rate: u32,
    pub channels: u16,
    pub encoding: WavEncoding,
}

impl WavSpec {
    pub fn float32(sample_rate: u32, channels: u16) -> Self {
        WavSpec {
            sample_rate,
            channels,
            encoding: WavEncoding::Float32,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.channels) || self.sample_rate == 0 {
            return Err(Error::Format(format!(
                "unsupported WAV layout: {} channels at {} Hz",
                self.channels, self.sample_rate
            )));
        }
        Ok(())
    }
}

const PCM16_SCALE: f32 = 32768.0;
const PCM24_SCALE: f32 = 8_388_608.0;

fn quantize(v: f32, scale: f32, max: i32) -> i32 {
    ((v * scale).round() as i64).clamp(-(max as i64) - 1, max as i64) as i32
}

fn fourcc(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Decodes a RIFF/WAVE byte buffer. Ancillary chunks (`LIST`, `fact`, ...)
/// are skipped.
pub fn decode_wav(bytes: &[u8]) -> Result<(Waveform, WavSpec)> {
    if bytes.len() < 12 {
        return Err(Error::Truncated("WAV header shorter than 12 bytes".into()));
    }
    if &bytes[..4] != b"RIFF" {
        return Err(Error::UnsupportedWav {
            chunk: fourcc(&bytes[..4]),
            detail: "expected a RIFF container".into(),
        });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::UnsupportedWav {
            chunk: fourcc(&bytes[8..12]),
            detail: "RIFF form is not WAVE".into(),
        });
    }
    let mut pos = 12;
    let mut spec = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = body_end.ok_or_else(|| Error::Truncated("fmt chunk".into()))?;
                spec = Some(parse_fmt(&bytes[body_start..end])?);
            }
            b"data" => {
                // tolerate writers that leave the data size unset on streams
                let end = body_end.unwrap_or(bytes.len());
                data = Some(&bytes[body_start..end]);
            }
            _ => {}
        }
        pos = body_start.saturating_add(size).saturating_add(size & 1);
        if data.is_some() && spec.is_some() {
            break;
        }
    }
    let spec = spec.ok_or_else(|| Error::Format("WAV file has no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("WAV file has no data chunk".into()))?;
    let ch = spec.channels as usize;
    let width = spec.encoding.bytes();
    let frames = data.len() / (ch * width);
    let mut planar = vec![Vec::with_capacity(frames); ch];
    for frame in data.chunks_exact(ch * width).take(frames) {
        for (c, s) in planar.iter_mut().zip(frame.chunks_exact(width)) {
            let v = match spec.encoding {
                WavEncoding::Pcm16 => i16::from_le_bytes([s[0], s[1]]) as f32 / PCM16_SCALE,
                WavEncoding::Pcm24 => (i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8) as f32 / PCM24_SCALE,
                WavEncoding::Float32 => f32::from_le_bytes([s[0], s[1], s[2], s[3]]),
            };
            c.push(v);
        }
    }
    Ok((Waveform::new(spec.sample_rate, planar)?, spec))
}

fn parse_fmt(b: &[u8]) -> Result<WavSpec> {
    if b.len() < 16 {
        return Err(Error::Truncated("fmt chunk shorter than 16 bytes".into()));
    }
    let mut tag = le_u16(&b[0..2]);
    let channels = le_u16(&b[2..4]);
    let sample_rate = le_u32(&b[4..8]);
    let bits = le_u16(&b[14..16]);
    if tag == 0xFFFE {
        if b.len() < 26 {
            return Err(Error::Truncated("extensible fmt chunk".into()));
        }
        tag = le_u16(&b[24..26]);
    }
    let encoding = match (tag, bits) {
        (1, 16) => WavEncoding::Pcm16,
        (1, 24) => WavEncoding::Pcm24,
        (3, 32) => WavEncoding::Float32,
        _ => {
            return Err(Error::UnsupportedWav {
                chunk: "fmt ".into(),
                detail: format!("format tag {tag} with {bits} bits per sample"),
            })
        }
    };
    let spec = WavSpec {
        sample_rate,
        channels,
        encoding,
    };
    spec.validate()?;
    Ok(spec)
}

/// Encodes a waveform. PCM values are rounded to nearest and clipped.
pub fn encode_wav(wave: &Waveform, spec: WavSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    if wave.channel_count() != spec.channels as usize {
        return Err(Error::Format(format!(
            "waveform has {} channels, spec says {}",
            wave.channel_count(),
            spec.channels
        )));
    }
    let width = spec.encoding.bytes();
    let data_len = wave.len() * wave.channel_count() * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    let tag: u16 = if spec.encoding == WavEncoding::Float32 { 3 } else { 1 };
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&spec.channels.to_le_bytes());
    out.extend_from_slice(&spec.sample_rate.to_le_bytes());
    let block = spec.channels as u32 * width as u32;
    out.extend_from_slice(&(spec.sample_rate * block).to_le_bytes());
    out.extend_from_slice(&(block as u16).to_le_bytes());
    out.extend_from_slice(&(8 * width as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..wave.len() {
        for c in &wave.channels {
            let v = c[i];
            match spec.encoding {
                WavEncoding::Pcm16 => {
                    out.extend_from_slice(&(quantize(v, PCM16_SCALE, 32767) as i16).to_le_bytes())
                }
                WavEncoding::Pcm24 => {
                    out.extend_from_slice(&quantize(v, PCM24_SCALE, 8_388_607).to_le_bytes()[..3])
                }
                WavEncoding::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<(Waveform, WavSpec)> {
    decode_wav(&fs::read(path)?)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, spec: WavSpec) -> Result<()> {
    fs::write(path, encode_wav(wave, spec)?)?;
    Ok(())
}

pub const WEIGHT_MAGIC: [u8; 4] = *b"HSTN";
pub const WEIGHT_VERSION: u32 = 1;

/// One tensor as stored in a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_weights(params: &[&ParamTensor<f32>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.iter().map(|p| 4 * p.len() + 64).sum::<usize>());
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut seen = HashSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{}`", p.name)));
        }
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format("tensor name too long".into()))?;
        let rank = u8::try_from(p.shape.len()).map_err(|_| Error::Format("tensor rank too large".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(0);
        out.push(rank);
        for &d in &p.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format("tensor dimension too large".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(le_u32(self.take(4, what)?))
    }
}

/// Parses a weight file. Every length field is checked against the bytes
/// that remain before anything of that size is allocated.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: WEIGHT_VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    // each tensor needs at least 4 header bytes
    if count > (bytes.len() - r.pos) / 4 {
        return Err(Error::Truncated(format!("{count} tensors declared in a {}-byte file", bytes.len())));
    }
    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = le_u16(r.take(2, "name length")?) as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let dtype = r.take(1, "dtype")?[0];
        if dtype != 0 {
            return Err(Error::Format(format!("tensor `{name}` has unsupported dtype code {dtype}")));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` size overflows")))?;
        let raw = r.take(numel, "tensor values")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(StoredTensor { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Copies stored tensors into `model`, requiring an exact name/shape match.
pub fn apply_weights(model: &mut Model<f32>, tensors: Vec<StoredTensor>) -> Result<()> {
    let mut by_name: BTreeMap<String, StoredTensor> = tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    for p in model.params_mut() {
        let t = by_name.remove(&p.name).ok_or_else(|| Error::ShapeMismatch {
            name: p.name.clone(),
            expected: p.shape.clone(),
            found: Vec::new(),
        })?;
        if t.shape != p.shape {
            return Err(Error::ShapeMismatch {
                name: p.name.clone(),
                expected: p.shape.clone(),
                found: t.shape,
            });
        }
        p.values = t.values;
    }
    if let Some((name, t)) = by_name.into_iter().next() {
        return Err(Error::ShapeMismatch {
            name,
            expected: Vec::new(),
            found: t.shape,
        });
    }
    Ok(())
}

/// Sidecar path holding the model config: `<weights>.toml`.
pub fn config_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_weights(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = toml::to_string(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(config_path(path), header)?;
    fs::write(path, encode_weights(&model.params())?)?;
    Ok(())
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ModelConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let tensors = decode_weights(&bytes)?;
    let cfg = read_config(config_path(path))?;
    let mut model = Model::build(&cfg, 0)?;
    apply_weights(&mut model, tensors)?;
    Ok(model)
}

const TRACK_FILES: [&str; 5] = ["mixture", "vocals", "drums", "bass", "other"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    pub name: String,
    pub dir: PathBuf,
    pub frames: usize,
    pub sample_rate: u32,
    /// Stems sum to the mixture within 1e-3 (diagnostic only).
    pub consistent: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub splits: BTreeMap<String, Vec<TrackEntry>>,
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn split(&self, name: &str) -> &[TrackEntry] {
        self.splits.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn track_count(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `mixture` and the four stems of one track directory.
pub fn load_track(dir: &Path) -> Result<(Waveform, StemSet)> {
    let read = |stem: &str| -> Result<Waveform> {
        let p = dir.join(format!("{stem}.wav"));
        if !p.is_file() {
            return Err(Error::Ingestion {
                path: p,
                detail: "missing stem file".into(),
            });
        }
        read_wav(&p).map(|(w, _)| w).map_err(|e| Error::Ingestion {
            path: p,
            detail: e.to_string(),
        })
    };
    let mixture = read("mixture")?;
    let stems = STEM_NAMES.iter().map(|s| read(s)).collect::<Result<Vec<_>>>()?;
    if stems.iter().any(|s| s.len() != mixture.len() || s.channel_count() != mixture.channel_count()) {
        return Err(Error::Ingestion {
            path: dir.to_path_buf(),
            detail: "stem lengths or channel counts differ from the mixture".into(),
        });
    }
    Ok((mixture, StemSet::new(stems)?))
}

/// Indexes `<root>/<split>/<track>/{mixture,vocals,drums,bass,other}.wav`.
/// Broken tracks are excluded and reported in `warnings`.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            detail: "dataset root is not a directory".into(),
        });
    }
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        ..Default::default()
    };
    for split_dir in sorted_dirs(root)? {
        let split = split_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut tracks = Vec::new();
        for dir in sorted_dirs(&split_dir)? {
            let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let missing: Vec<&str> = TRACK_FILES
                .iter()
                .copied()
                .filter(|f| !dir.join(format!("{f}.wav")).is_file())
                .collect();
            if !missing.is_empty() {
                index
                    .warnings
                    .push(format!("{split}/{name}: missing {}", missing.join(", ")));
                continue;
            }
            match load_track(&dir) {
                Ok((mix, stems)) => {
                    let sum = stems.mixture();
                    let consistent = mix
                        .channels
                        .iter()
                        .flatten()
                        .zip(sum.channels.iter().flatten())
                        .all(|(a, b)| (a - b).abs() <= 1e-3);
                    tracks.push(TrackEntry {
                        name,
                        dir,
                        frames: mix.len(),
                        sample_rate: mix.sample_rate,
                        consistent,
                    });
                }
                Err(e) => index.warnings.push(format!("{split}/{name}: {e}")),
            }
        }
        index.splits.insert(split, tracks);
    }
    Ok(index)
}
