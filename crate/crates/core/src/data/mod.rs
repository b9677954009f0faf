//! Audio clips, WAV I/O, synthetic corpora, mixing and augmentation.

mod augment;
mod synth;
mod wav;

use std::path::{Path, PathBuf};

use rand::Rng;

pub use augment::{bandmask, remix, revecho, MixItem, RevEcho, BANDMASK_HOP, BANDMASK_WIN};
pub use synth::{mix_at_snr, power, snr_db, synth_clean, synth_clean_with_f0, synth_noise, synth_pairs, NoiseKind};
pub use wav::{load_wav, quantize, read_wav, save_wav, write_wav};

use crate::error::{Error, Result};
use crate::io::atomic_write;

/// A mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("clip needs at least one sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(Self { sample_rate, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::InvalidArgument(format!("slice {start}+{len} of {} samples", self.len())));
        }
        Ok(Self { sample_rate: self.sample_rate, samples: self.samples[start..start + len].to_vec() })
    }

    fn check_matches(&self, other: &Self, what: &str) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::InvalidArgument(format!("{what}: sample rates {} vs {}", self.sample_rate, other.sample_rate)));
        }
        if self.len() != other.len() {
            return Err(Error::InvalidArgument(format!("{what}: lengths {} vs {}", self.len(), other.len())));
        }
        Ok(())
    }
}

/// Length-matched (clean, noisy) pairs plus the training clip length range in
/// seconds. A fixed length uses `min == max`.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pairs: Vec<(AudioClip, AudioClip)>,
    clip_seconds: (f64, f64),
}

impl PairDataset {
    pub fn new(pairs: Vec<(AudioClip, AudioClip)>, clip_seconds: (f64, f64)) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("dataset has no pairs".into()));
        }
        let (lo, hi) = clip_seconds;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!("clip length range {lo}..{hi}")));
        }
        let rate = pairs[0].0.sample_rate;
        for (i, (c, n)) in pairs.iter().enumerate() {
            c.check_matches(n, &format!("pair {i}"))?;
            if c.sample_rate != rate {
                return Err(Error::InvalidArgument(format!("pair {i}: rate {} differs from {rate}", c.sample_rate)));
            }
        }
        let shortest = pairs.iter().map(|(c, _)| c.duration()).fold(f64::INFINITY, f64::min);
        if hi > shortest + 1e-9 {
            return Err(Error::InvalidArgument(format!("clip length {hi} s exceeds shortest pair ({shortest} s)")));
        }
        Ok(Self { pairs, clip_seconds })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.pairs[0].0.sample_rate
    }

    pub fn pairs(&self) -> &[(AudioClip, AudioClip)] {
        &self.pairs
    }

    pub fn clip_seconds(&self) -> (f64, f64) {
        self.clip_seconds
    }

    fn clip_samples(&self, seconds: f64) -> usize {
        ((seconds * self.sample_rate() as f64).round() as usize).max(1)
    }

    /// Draws `batch` aligned windows from random pairs. When the length range is
    /// non-degenerate each item draws its own length and the batch is cropped to
    /// the shortest.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize) -> Vec<(AudioClip, AudioClip)> {
        let (lo, hi) = self.clip_seconds;
        let lens: Vec<usize> = (0..batch)
            .map(|_| self.clip_samples(if hi > lo { rng.gen_range(lo..=hi) } else { lo }))
            .collect();
        let len = lens.into_iter().min().unwrap_or(0);
        (0..batch)
            .map(|_| {
                let (c, n) = &self.pairs[rng.gen_range(0..self.pairs.len())];
                let len = len.min(c.len());
                let start = rng.gen_range(0..=c.len() - len);
                (c.slice(start, len).expect("bounded window"), n.slice(start, len).expect("bounded window"))
            })
            .collect()
    }
}

/// Parses a manifest: one `clean<TAB>noisy` pair per line, `#` comments.
/// Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim_end_matches(['\r', ' ']);
        if line.trim().is_empty() {
            continue;
        }
        let (c, n) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected clean<TAB>noisy", lineno + 1)))?;
        let (c, n) = (c.trim(), n.trim());
        if c.is_empty() || n.is_empty() || n.contains('\t') {
            return Err(Error::Format(format!("manifest line {}: expected exactly two paths", lineno + 1)));
        }
        out.push((base.join(c), base.join(n)));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(PathBuf, PathBuf)]) -> Result<()> {
    let mut text = String::from("# clean\tnoisy\n");
    for (c, n) in entries {
        text.push_str(&format!("{}\t{}\n", c.display(), n.display()));
    }
    atomic_write(path, |w| Ok(std::io::Write::write_all(w, text.as_bytes())?))
}

/// Loads every pair listed in a manifest file.
pub fn load_manifest(path: &Path, clip_seconds: (f64, f64)) -> Result<PairDataset> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let pairs = parse_manifest(&text, base)?
        .into_iter()
        .map(|(c, n)| Ok((load_wav(&c)?, load_wav(&n)?)))
        .collect::<Result<Vec<_>>>()?;
    PairDataset::new(pairs, clip_seconds)
}
