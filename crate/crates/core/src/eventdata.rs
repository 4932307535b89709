//! Event streams and their conversion into frame clips.
//!
//! EVST files are little-endian: `"EVST"`, `u32` version, `u32` width,
//! `u32` height, `u64` count, then `count` records of `u32 t_us, u16 x,
//! u16 y, u8 p`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, EventError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::FrameDataset;

const MAGIC: &[u8; 4] = b"EVST";
const VERSION: u32 = 1;
const HEADER: usize = 24;
const RECORD: usize = 9;
pub const MANIFEST: &str = "manifest.sha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub t_us: u32,
    pub x: u16,
    pub y: u16,
    /// 0 = OFF, 1 = ON.
    pub p: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u32, height: u32, events: Vec<Event>) -> Result<Self> {
        let s = Self { width, height, events };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = 0u32;
        for (index, e) in self.events.iter().enumerate() {
            if u32::from(e.x) >= self.width || u32::from(e.y) >= self.height {
                return Err(EventError::CoordinateOutOfRange {
                    index,
                    x: e.x.into(),
                    y: e.y.into(),
                    width: self.width,
                    height: self.height,
                }
                .into());
            }
            if e.p > 1 {
                return Err(EventError::PolarityOutOfRange { index, p: e.p }.into());
            }
            if e.t_us < prev {
                return Err(EventError::DecreasingTimestamp {
                    index,
                    t: e.t_us,
                    prev,
                }
                .into());
            }
            prev = e.t_us;
        }
        Ok(())
    }
}

pub fn serialize(s: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + RECORD * s.events.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&s.width.to_le_bytes());
    out.extend_from_slice(&s.height.to_le_bytes());
    out.extend_from_slice(&(s.events.len() as u64).to_le_bytes());
    for e in &s.events {
        out.extend_from_slice(&e.t_us.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p);
    }
    out
}

pub fn parse_evt(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < 4 {
        return Err(EventError::Truncated {
            needed: 4,
            have: bytes.len(),
        }
        .into());
    }
    if &bytes[..4] != MAGIC {
        return Err(EventError::BadMagic.into());
    }
    if bytes.len() < HEADER {
        return Err(EventError::Truncated {
            needed: HEADER,
            have: bytes.len(),
        }
        .into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(EventError::Version(version).into());
    }
    let (width, height) = (u32_at(8), u32_at(12));
    let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let needed = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(RECORD))
        .and_then(|b| b.checked_add(HEADER))
        .unwrap_or(usize::MAX);
    if bytes.len() < needed {
        return Err(EventError::Truncated {
            needed,
            have: bytes.len(),
        }
        .into());
    }
    let events = bytes[HEADER..needed]
        .chunks_exact(RECORD)
        .map(|r| Event {
            t_us: u32::from_le_bytes(r[0..4].try_into().expect("4 bytes")),
            x: u16::from_le_bytes(r[4..6].try_into().expect("2 bytes")),
            y: u16::from_le_bytes(r[6..8].try_into().expect("2 bytes")),
            p: r[8],
        })
        .collect();
    EventStream::new(width, height, events)
}

/// Per-polarity event counts `[T, 2, H, W]` (channel 0 = OFF, channel 1 = ON).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub frames: Tensor<f64>,
    pub window_ms: f64,
    pub label: Option<usize>,
}

/// Frame `k` counts events with `t` in `[k w, (k + 1) w)`; the first `t_max`
/// frames are kept and missing ones are zero.
pub fn integrate_frames(s: &EventStream, window_ms: f64, t_max: usize) -> Result<FrameClip> {
    if !(window_ms > 0.0 && window_ms.is_finite()) {
        return Err(invalid("integrate_frames", format!("window must be > 0 ms, got {window_ms}")));
    }
    if t_max == 0 {
        return Err(invalid("integrate_frames", "T_max must be >= 1"));
    }
    let (h, w) = (s.height as usize, s.width as usize);
    let mut frames = Tensor::zeros(&[t_max, 2, h, w]);
    let window_us = window_ms * 1000.0;
    let data = frames.data_mut();
    for e in &s.events {
        let k = (f64::from(e.t_us) / window_us).floor() as usize;
        if k >= t_max {
            continue;
        }
        let idx = ((k * 2 + e.p as usize) * h + e.y as usize) * w + e.x as usize;
        data[idx] += 1.0;
    }
    Ok(FrameClip {
        frames,
        window_ms,
        label: None,
    })
}

/// Row-stochastic `[target, source]` weights: each target cell averages the
/// source interval it covers, splitting partially covered source cells.
fn area_weights(source: usize, target: usize) -> Vec<f64> {
    let mut m = vec![0.0; target * source];
    // Work in units of 1 / (source * target) so every boundary is an integer.
    for j in 0..target {
        let (lo, hi) = (j * source, (j + 1) * source);
        for i in 0..source {
            let (a, b) = (i * target, (i + 1) * target);
            let overlap = hi.min(b).saturating_sub(lo.max(a));
            m[j * source + i] = overlap as f64 / source as f64;
        }
    }
    m
}

/// Area-average resize of every `[H, W]` plane to `target`.
pub fn downsample(clip: &FrameClip, target: (usize, usize)) -> Result<FrameClip> {
    let [t, c, h, w] = clip.frames.dims::<4>("downsample clip [T,C,H,W]")?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(invalid("downsample", "target size must be >= 1"));
    }
    if th > h || tw > w {
        return Err(invalid("downsample", format!("target {th}x{tw} exceeds source {h}x{w}")));
    }
    let wy = area_weights(h, th);
    let wx = area_weights(w, tw);
    let mut out = Tensor::zeros(&[t, c, th, tw]);
    let src = clip.frames.data();
    let mut rows = vec![0.0; th * w];
    for (plane, dst) in src.chunks(h * w).zip(out.data_mut().chunks_mut(th * tw)) {
        rows.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..th {
            for i in 0..h {
                let wt = wy[j * h + i];
                if wt != 0.0 {
                    for x in 0..w {
                        rows[j * w + x] += wt * plane[i * w + x];
                    }
                }
            }
        }
        for j in 0..th {
            for k in 0..tw {
                let mut acc = 0.0;
                for x in 0..w {
                    acc += wx[k * w + x] * rows[j * w + x];
                }
                dst[j * tw + k] = acc;
            }
        }
    }
    Ok(FrameClip {
        frames: out,
        window_ms: clip.window_ms,
        label: clip.label,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    /// 2 to 4: right, left, down, up.
    pub classes: usize,
    pub size: usize,
    pub frames: usize,
    pub window_ms: f64,
    pub seed: u64,
    /// Uniform background events per frame.
    pub noise_per_frame: usize,
    /// Probability of dropping each edge event.
    pub dropout: f64,
}

impl SynthConfig {
    pub fn new(samples: usize, size: usize, frames: usize, seed: u64) -> Self {
        Self {
            samples,
            classes: 2,
            size,
            frames,
            window_ms: 10.0,
            seed,
            noise_per_frame: 0,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub stream: EventStream,
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Moving-bar clips: a bar sweeps one pixel per frame, emitting ON events on
/// its leading edge and OFF events on its trailing edge. Labels cycle
/// `i % classes`.
pub fn synth_moving_bars(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.size < 8 || cfg.frames < 2 {
        return Err(invalid("synth", "need size >= 8 and at least 2 frames"));
    }
    if !(2..=4).contains(&cfg.classes) {
        return Err(invalid("synth", format!("classes must be 2..=4, got {}", cfg.classes)));
    }
    if !(0.0..1.0).contains(&cfg.dropout) || !(cfg.window_ms >= 0.001) {
        return Err(invalid("synth", "dropout must be in [0, 1) and the window >= 1 us"));
    }
    let size = cfg.size;
    let window_us = (cfg.window_ms * 1000.0).round() as u32;
    (0..cfg.samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i));
            let label = i % cfg.classes;
            let bar = rng.random_range(2..=4usize);
            let travel = cfg.frames - 1 + bar;
            let start = rng.random_range(0..=size.saturating_sub(travel));
            let extent = rng.random_range(size / 2..=size);
            let top = rng.random_range(0..=size - extent);
            // (along, across, polarity) in the bar's own frame of reference.
            let mut events = Vec::new();
            for k in 0..cfg.frames {
                let mut cols: Vec<(usize, u8)> = Vec::new();
                if k == 0 {
                    cols.extend((start..start + bar).map(|c| (c, 1)));
                } else {
                    cols.push((start + k + bar - 1, 1));
                    cols.push((start + k - 1, 0));
                }
                for (col, p) in cols {
                    if col >= size {
                        continue;
                    }
                    for across in top..top + extent {
                        if cfg.dropout > 0.0 && rng.random::<f64>() < cfg.dropout {
                            continue;
                        }
                        let t = k as u32 * window_us + rng.random_range(0..window_us);
                        events.push((t, col, across, p));
                    }
                }
                for _ in 0..cfg.noise_per_frame {
                    let t = k as u32 * window_us + rng.random_range(0..window_us);
                    events.push((t, rng.random_range(0..size), rng.random_range(0..size), rng.random_range(0..=1u8)));
                }
            }
            let mut events: Vec<Event> = events
                .into_iter()
                .map(|(t, along, across, p)| {
                    let (x, y) = match label {
                        0 => (along, across),
                        1 => (size - 1 - along, across),
                        2 => (across, along),
                        _ => (across, size - 1 - along),
                    };
                    Event {
                        t_us: t,
                        x: x as u16,
                        y: y as u16,
                        p,
                    }
                })
                .collect();
            events.sort_unstable();
            Ok(Sample {
                id: i,
                label,
                stream: EventStream::new(size as u32, size as u32, events)?,
            })
        })
        .collect()
}

/// Stratified split: within each class a seeded shuffle puts
/// `round(n_c * test_fraction)` samples (at least one, never all) in the test
/// set. Returns sorted `(train, test)` index lists.
pub fn split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid("split", format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Dataset(format!("class {c} has fewer than 2 samples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, c));
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes `<root>/<split>/<class>/<id>.evst` for every sample and a sorted
/// sha-256 manifest at `<root>/manifest.sha256`.
pub fn write_dataset(root: &Path, train: &[Sample], test: &[Sample]) -> Result<()> {
    let mut lines = Vec::new();
    for (name, samples) in [("train", train), ("test", test)] {
        for s in samples {
            let rel = format!("{name}/{}/{:06}.evst", s.label, s.id);
            let path = root.join(&rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            let bytes = serialize(&s.stream);
            fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
            lines.push(format!("{}  {rel}", sha256_hex(&bytes)));
        }
    }
    lines.sort();
    let manifest = root.join(MANIFEST);
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&manifest, text).map_err(|e| io_err(&manifest, e))
}

/// Digest of the manifest file itself, identifying the dataset as a whole.
pub fn manifest_digest(root: &Path) -> Result<String> {
    let path = root.join(MANIFEST);
    Ok(sha256_hex(&fs::read(&path).map_err(|e| io_err(&path, e))?))
}

/// Reads one split, verifying each file against the manifest.
pub fn load_split(root: &Path, split_name: &str) -> Result<Vec<Sample>> {
    let manifest_path = root.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (digest, rel) = line
            .split_once("  ")
            .ok_or_else(|| Error::Dataset(format!("malformed manifest line `{line}`")))?;
        let parts: Vec<&str> = rel.split('/').collect();
        if parts.len() != 3 || parts[0] != split_name {
            continue;
        }
        let label: usize = parts[1]
            .parse()
            .map_err(|_| Error::Dataset(format!("bad class directory in `{rel}`")))?;
        let id: usize = parts[2]
            .strip_suffix(".evst")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Dataset(format!("bad sample name in `{rel}`")))?;
        let path: PathBuf = root.join(rel);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        if sha256_hex(&bytes) != digest {
            return Err(Error::Dataset(format!("{rel}: checksum mismatch")));
        }
        out.push(Sample {
            id,
            label,
            stream: parse_evt(&bytes)?,
        });
    }
    out.sort_by_key(|s| s.id);
    if out.is_empty() {
        return Err(Error::Dataset(format!("no samples in split `{split_name}` under {}", root.display())));
    }
    Ok(out)
}

/// Integrates, resizes and casts samples into a training set.
pub fn to_frame_dataset<F: Scalar>(
    samples: &[Sample],
    window_ms: f64,
    frames: usize,
    size: Option<(usize, usize)>,
) -> Result<FrameDataset<F>> {
    let mut clips = Vec::with_capacity(samples.len());
    for s in samples {
        let mut clip = integrate_frames(&s.stream, window_ms, frames)?;
        if let Some(target) = size {
            if target != (s.stream.height as usize, s.stream.width as usize) {
                clip = downsample(&clip, target)?;
            }
        }
        clips.push(clip.frames.cast::<F>());
    }
    Ok(FrameDataset {
        clips,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}
