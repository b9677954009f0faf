//! Synthetic voiced/silence surrogates for clean speech, several noise
//! colours, and SNR mixing.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::AudioClip;
use crate::error::{Error, Result};

const HARMONIC_GAINS: [f64; 3] = [1.0, 0.5, 0.25];
const F0_RANGE: (f64, f64) = (100.0, 300.0);
const MIN_SILENCE: f64 = 0.1;
const RAMP_SECONDS: f64 = 0.01;

fn sample_count(duration: f64, sample_rate: u32) -> Result<usize> {
    if sample_rate == 0 || !duration.is_finite() {
        return Err(Error::InvalidArgument(format!("duration {duration} at {sample_rate} Hz")));
    }
    Ok((duration * sample_rate as f64).round() as usize)
}

/// Envelope with alternating voiced segments and exact-zero pauses covering at
/// least a tenth of the clip.
fn envelope(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let ramp = ((RAMP_SECONDS * sr) as usize).max(1);
    let mut pos = (rng.gen_range(0.0..0.1) * sr) as usize;
    while pos < n {
        let voiced = ((rng.gen_range(0.15..0.45) * sr) as usize).max(1);
        let end = (pos + voiced).min(n);
        let gain = rng.gen_range(0.5..1.0);
        let len = end - pos;
        for i in 0..len {
            let edge = i.min(len - 1 - i);
            let shape = if edge < ramp { (0.5 * std::f64::consts::PI * (edge + 1) as f64 / (ramp + 1) as f64).sin().powi(2) } else { 1.0 };
            env[pos + i] = gain * shape;
        }
        pos = end + ((rng.gen_range(0.05..0.2) * sr) as usize).max(1);
    }
    let need = (MIN_SILENCE * n as f64).ceil() as usize;
    let silent = env.iter().filter(|&&v| v == 0.0).count();
    if silent < need {
        // extend the trailing pause
        let mut missing = need - silent;
        for v in env.iter_mut().rev() {
            if missing == 0 {
                break;
            }
            if *v != 0.0 {
                *v = 0.0;
                missing -= 1;
            }
        }
    }
    env
}

fn f0_track(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let centre = rng.gen_range(150.0..250.0);
    let depth = rng.gen_range(0.2..1.0) * (centre - F0_RANGE.0).min(F0_RANGE.1 - centre);
    let rate = rng.gen_range(0.5..3.0);
    let phase = rng.gen_range(0.0..TAU);
    (0..n).map(|i| centre + depth * (TAU * rate * i as f64 / sr + phase).sin()).collect()
}

fn clean_parts(seed: u64, duration: f64, sample_rate: u32) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if duration < 0.1 {
        return Err(Error::InvalidArgument(format!("clean clips need at least 0.1 s, got {duration}")));
    }
    let n = sample_count(duration, sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = f0_track(&mut rng, n, sr);
    let env = envelope(&mut rng, n, sr);
    let mut phase = rng.gen_range(0.0..TAU);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = 0.0;
        for (h, g) in HARMONIC_GAINS.iter().enumerate() {
            if (h + 1) as f64 * f0[i] < 0.5 * sr {
                v += g * ((h + 1) as f64 * phase).sin();
            }
        }
        out.push(v * env[i]);
        phase = (phase + TAU * f0[i] / sr) % TAU;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = rng.gen_range(0.5..0.8);
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= target / peak);
    }
    Ok((out, f0, env))
}

/// Deterministic harmonic tone with a drifting fundamental and silent pauses.
pub fn synth_clean(seed: u64, duration: f64, sample_rate: u32) -> Result<AudioClip> {
    synth_clean_with_f0(seed, duration, sample_rate).map(|(clip, _)| clip)
}

/// Like [`synth_clean`], also returning the per-sample fundamental in Hz.
pub fn synth_clean_with_f0(seed: u64, duration: f64, sample_rate: u32) -> Result<(AudioClip, Vec<f32>)> {
    let (x, f0, _) = clean_parts(seed, duration, sample_rate)?;
    let clip = AudioClip::new(sample_rate, x.into_iter().map(|v| v as f32).collect())?;
    Ok((clip, f0.into_iter().map(|v| v as f32).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    /// Mains hum harmonics over a white floor.
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Brown, NoiseKind::Hum];
}

/// Unit-RMS noise of the given colour.
pub fn synth_noise(kind: NoiseKind, seed: u64, duration: f64, sample_rate: u32) -> Result<AudioClip> {
    let n = sample_count(duration, sample_rate)?;
    if n == 0 {
        return Err(Error::InvalidArgument("noise duration too short".into()));
    }
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut white = || -> f64 { rng.sample(StandardNormal) };
    let mut x: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..n)
                .map(|_| {
                    let w = white();
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Brown => {
            let mut acc = 0.0;
            (0..n)
                .map(|_| {
                    acc = 0.995 * acc + 0.1 * white();
                    acc
                })
                .collect()
        }
        NoiseKind::Hum => {
            let base = if white() > 0.0 { 50.0 } else { 60.0 };
            let phases: Vec<f64> = (0..4).map(|_| white() * TAU).collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let hum: f64 = phases.iter().enumerate().map(|(h, p)| (TAU * base * (h + 1) as f64 * t + p).sin() / (h + 1) as f64).sum();
                    hum + 0.1 * white()
                })
                .collect()
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    AudioClip::new(sample_rate, x.into_iter().map(|v| v as f32).collect())
}

/// Mean square over the whole signal.
pub fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

pub fn snr_db(clean: &[f32], noise: &[f32]) -> f64 {
    10.0 * (power(clean) / power(noise)).log10()
}

pub(crate) fn noise_gain(clean_power: f64, noise_power: f64, snr: f64) -> f64 {
    (clean_power / (noise_power * 10f64.powf(snr / 10.0))).sqrt()
}

/// `clean + g * noise` with `g` chosen so the mixture has the requested SNR.
pub fn mix_at_snr(clean: &AudioClip, noise: &AudioClip, snr: f64) -> Result<AudioClip> {
    clean.check_matches(noise, "mix_at_snr")?;
    if !snr.is_finite() {
        return Err(Error::InvalidArgument(format!("snr {snr}")));
    }
    let pc = power(&clean.samples);
    let pn = power(&noise.samples);
    if pc == 0.0 {
        return Err(Error::InvalidArgument("clean signal has zero power".into()));
    }
    if pn == 0.0 {
        return Err(Error::InvalidArgument("noise has zero power".into()));
    }
    let g = noise_gain(pc, pn, snr);
    let samples = clean.samples.iter().zip(&noise.samples).map(|(&c, &n)| (c as f64 + g * n as f64) as f32).collect();
    AudioClip::new(clean.sample_rate, samples)
}

/// `count` (clean, noisy) pairs with random noise colours and SNRs drawn
/// uniformly from `snr_range` dB.
pub fn synth_pairs(count: usize, seed: u64, duration: f64, sample_rate: u32, snr_range: (f64, f64)) -> Result<Vec<(AudioClip, AudioClip)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let clean = synth_clean(rng.gen(), duration, sample_rate)?;
            let kind = NoiseKind::ALL[rng.gen_range(0..NoiseKind::ALL.len())];
            let noise = synth_noise(kind, rng.gen(), duration, sample_rate)?;
            let snr = if snr_range.1 > snr_range.0 { rng.gen_range(snr_range.0..=snr_range.1) } else { snr_range.0 };
            let noisy = mix_at_snr(&clean, &noise, snr)?;
            Ok((clean, noisy))
        })
        .collect()
}
