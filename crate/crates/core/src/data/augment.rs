//! Remix, BandMask and RevEcho augmentations.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{noise_gain, power, snr_db};
use super::AudioClip;
use crate::dsp::StftSynth;
use crate::error::{Error, Result};

pub const BANDMASK_HOP: usize = 256;
pub const BANDMASK_WIN: usize = 1024;

/// A clean signal with its noise component and mixing SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct MixItem {
    pub clean: AudioClip,
    pub noise: AudioClip,
    pub snr_db: f64,
}

impl MixItem {
    /// Splits a noisy pair into clean + noise at the pair's own SNR.
    pub fn from_pair(clean: &AudioClip, noisy: &AudioClip) -> Result<Self> {
        clean.check_matches(noisy, "mix item")?;
        let noise: Vec<f32> = noisy.samples.iter().zip(&clean.samples).map(|(n, c)| n - c).collect();
        let snr = snr_db(&clean.samples, &noise);
        Ok(Self { clean: clean.clone(), noise: AudioClip { sample_rate: clean.sample_rate, samples: noise }, snr_db: snr })
    }

    /// The mixture at `snr_db`. With a silent clean signal or silent noise the
    /// ratio is undefined and the noise is added unscaled.
    pub fn noisy(&self) -> AudioClip {
        let (pc, pn) = (power(&self.clean.samples), power(&self.noise.samples));
        let g = if pc > 0.0 && pn > 0.0 && self.snr_db.is_finite() { noise_gain(pc, pn, self.snr_db) } else { 1.0 };
        let samples = self.clean.samples.iter().zip(&self.noise.samples).map(|(&c, &n)| (c as f64 + g * n as f64) as f32).collect();
        AudioClip { sample_rate: self.clean.sample_rate, samples }
    }
}

/// Sattolo's algorithm: a uniformly random cyclic permutation, so no index
/// maps to itself.
fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Shuffles noises across the batch; every item keeps its clean signal and SNR.
pub fn remix(items: &[MixItem], rng: &mut impl Rng) -> Result<Vec<MixItem>> {
    if items.len() < 2 {
        return Err(Error::InvalidArgument(format!("remix needs a batch of at least 2, got {}", items.len())));
    }
    for it in items {
        it.clean.check_matches(&items[0].clean, "remix batch")?;
        it.clean.check_matches(&it.noise, "remix item")?;
    }
    let perm = derangement(items.len(), rng);
    Ok(items
        .iter()
        .zip(&perm)
        .map(|(it, &src)| MixItem { clean: it.clean.clone(), noise: items[src].noise.clone(), snr_db: it.snr_db })
        .collect())
}

fn mask_band(bins: usize, max_fraction: f64, seed: u64) -> Range<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_width = (max_fraction * bins as f64).floor() as usize;
    let width = rng.gen_range(0..=max_width);
    let start = rng.gen_range(0..=bins - width);
    start..start + width
}

/// Zeros a random contiguous frequency band of at most `max_fraction` of the
/// bins, returning the edited clip and the band's bin range.
pub fn bandmask_with_band(clip: &AudioClip, max_fraction: f64, seed: u64) -> Result<(AudioClip, Range<usize>)> {
    if !(0.0..=1.0).contains(&max_fraction) {
        return Err(Error::InvalidArgument(format!("bandmask fraction {max_fraction} outside [0, 1]")));
    }
    if clip.len() < BANDMASK_WIN {
        return Err(Error::TooShort { len: clip.len(), needed: BANDMASK_WIN });
    }
    let synth = StftSynth::new(BANDMASK_HOP, BANDMASK_WIN);
    let band = mask_band(synth.bins(), max_fraction, seed);
    if band.is_empty() {
        return Ok((clip.clone(), band));
    }
    let x: Vec<f64> = clip.samples.iter().map(|&v| v as f64).collect();
    let y = synth.process(&x, |bins| bins[band.clone()].iter_mut().for_each(|b| *b = Default::default()));
    let out = AudioClip::new(clip.sample_rate, y.into_iter().map(|v| v as f32).collect())?;
    Ok((out, band))
}

pub fn bandmask(clip: &AudioClip, max_fraction: f64, seed: u64) -> Result<AudioClip> {
    bandmask_with_band(clip, max_fraction, seed).map(|(c, _)| c)
}

/// Finite comb of decaying echoes: `x + sum_i strength^i * x[t - i*delay]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RevEcho {
    pub strength: f64,
    pub delay_ms: f64,
    pub echoes: usize,
}

impl RevEcho {
    pub const STRENGTH_RANGE: (f64, f64) = (0.0, 0.3);
    pub const DELAY_RANGE_MS: (f64, f64) = (10.0, 100.0);
    pub const ECHOES: usize = 3;

    pub fn new(strength: f64, delay_ms: f64, echoes: usize) -> Result<Self> {
        let (s0, s1) = Self::STRENGTH_RANGE;
        let (d0, d1) = Self::DELAY_RANGE_MS;
        if !(s0..=s1).contains(&strength) || !(d0..=d1).contains(&delay_ms) {
            return Err(Error::InvalidArgument(format!("revecho strength {strength} / delay {delay_ms} ms out of range")));
        }
        Ok(Self { strength, delay_ms, echoes })
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let (s0, s1) = Self::STRENGTH_RANGE;
        let (d0, d1) = Self::DELAY_RANGE_MS;
        Self { strength: rng.gen_range(s0..=s1), delay_ms: rng.gen_range(d0..=d1), echoes: Self::ECHOES }
    }

    pub fn apply(&self, clip: &AudioClip) -> AudioClip {
        let delay = ((self.delay_ms * clip.sample_rate as f64 / 1000.0).round() as usize).max(1);
        let x = &clip.samples;
        let mut out: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut gain = 1.0;
        for i in 1..=self.echoes {
            gain *= self.strength;
            let shift = i * delay;
            if shift >= x.len() || gain == 0.0 {
                break;
            }
            for t in shift..x.len() {
                out[t] += gain * x[t - shift] as f64;
            }
        }
        AudioClip { sample_rate: clip.sample_rate, samples: out.into_iter().map(|v| v as f32).collect() }
    }
}

pub fn revecho(clip: &AudioClip, strength: f64, delay_ms: f64, echoes: usize) -> Result<AudioClip> {
    Ok(RevEcho::new(strength, delay_ms, echoes)?.apply(clip))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{mix_at_snr, synth_clean, synth_noise, NoiseKind};
    use crate::dsp::{stft_magnitude, StftResolution};

    fn items(n: usize) -> Vec<MixItem> {
        (0..n)
            .map(|i| {
                let clean = synth_clean(i as u64, 0.2, 8000).unwrap();
                let noise = synth_noise(NoiseKind::ALL[i % 4], 100 + i as u64, 0.2, 8000).unwrap();
                MixItem { clean, noise, snr_db: i as f64 * 3.0 - 5.0 }
            })
            .collect()
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 2..12 {
            for _ in 0..20 {
                let p = derangement(n, &mut rng);
                assert!(p.iter().enumerate().all(|(i, &j)| i != j));
                let mut s = p.clone();
                s.sort();
                assert_eq!(s, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn remix_swaps_pair_and_keeps_snr() {
        let batch = items(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = remix(&batch, &mut rng).unwrap();
        assert_eq!(out[0].noise, batch[1].noise);
        assert_eq!(out[1].noise, batch[0].noise);
        assert!(remix(&batch[..1], &mut rng).is_err());

        let batch = items(5);
        let out = remix(&batch, &mut rng).unwrap();
        for (a, b) in out.iter().zip(&batch) {
            assert_eq!(a.clean, b.clean);
            let noisy = a.noisy();
            let resid: Vec<f32> = noisy.samples.iter().zip(&a.clean.samples).map(|(n, c)| n - c).collect();
            let measured = snr_db(&a.clean.samples, &resid);
            assert!((measured - b.snr_db).abs() < 1e-4, "{measured} vs {}", b.snr_db);
        }
        let mut before: Vec<_> = batch.iter().map(|i| i.noise.samples[0].to_bits()).collect();
        let mut after: Vec<_> = out.iter().map(|i| i.noise.samples[0].to_bits()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }

    #[test]
    fn pair_round_trip_recovers_snr() {
        let it = &items(3)[2];
        let noisy = mix_at_snr(&it.clean, &it.noise, 7.0).unwrap();
        let back = MixItem::from_pair(&it.clean, &noisy).unwrap();
        assert!((back.snr_db - 7.0).abs() < 1e-4);
    }

    #[test]
    fn bandmask_identity_determinism_and_errors() {
        let clip = synth_noise(NoiseKind::White, 3, 0.5, 16000).unwrap();
        let same = bandmask(&clip, 0.0, 7).unwrap();
        assert!(same.samples.iter().zip(&clip.samples).all(|(a, b)| (a - b).abs() <= 1e-6));
        assert_eq!(bandmask(&clip, 0.2, 7).unwrap(), bandmask(&clip, 0.2, 7).unwrap());
        assert_eq!(bandmask(&clip, 0.2, 7).unwrap().len(), clip.len());
        let short = clip.slice(0, 1000).unwrap();
        assert!(matches!(bandmask(&short, 0.2, 0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn bandmask_removes_band_energy() {
        let res = StftResolution::new(BANDMASK_HOP, BANDMASK_WIN, BANDMASK_WIN).unwrap();
        let clip = synth_noise(NoiseKind::White, 11, 1.0, 16000).unwrap();
        let mut tested = 0;
        for seed in 0..30 {
            let (out, band) = bandmask_with_band(&clip, 0.2, seed).unwrap();
            assert!(band.len() <= (0.2 * 513.0) as usize);
            // the analysis window's main lobe spreads two bins past each edge
            if band.len() < 8 {
                continue;
            }
            let inner = band.start + 2..band.end - 2;
            let energy = |x: &[f32]| {
                let s = stft_magnitude(x, res).unwrap();
                let f = s.frames();
                inner.clone().flat_map(|k| s.mags.data()[k * f..(k + 1) * f].to_vec()).map(|m| (m as f64).powi(2)).sum::<f64>()
            };
            let ratio = energy(&out.samples) / energy(&clip.samples);
            assert!(ratio <= 1e-3, "seed {seed} band {band:?}: ratio {ratio}");
            tested += 1;
        }
        assert!(tested > 5);
    }

    #[test]
    fn revecho_impulse_and_bounds() {
        let mut x = vec![0.0f32; 4000];
        x[10] = 1.0;
        let clip = AudioClip::new(16000, x).unwrap();
        assert_eq!(revecho(&clip, 0.0, 50.0, 3).unwrap(), clip);
        let out = revecho(&clip, 0.3, 50.0, 3).unwrap();
        let nz: Vec<(usize, f32)> = out.samples.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        assert_eq!(nz.len(), 4);
        for (i, (pos, v)) in nz.iter().enumerate() {
            assert_eq!(*pos, 10 + i * 800);
            assert!((*v as f64 - 0.3f64.powi(i as i32)).abs() < 1e-6);
        }
        assert!(revecho(&clip, 0.5, 50.0, 3).is_err());
        assert!(revecho(&clip, 0.1, 5.0, 3).is_err());

        let noise = synth_noise(NoiseKind::Pink, 1, 0.3, 16000).unwrap();
        for rho in [0.1, 0.2, 0.3] {
            let e_in: f64 = noise.samples.iter().map(|&v| (v as f64).powi(2)).sum();
            let e_out: f64 = revecho(&noise, rho, 20.0, 3).unwrap().samples.iter().map(|&v| (v as f64).powi(2)).sum();
            let bound = (1.0 + rho + rho * rho + rho.powi(3)).powi(2);
            assert!(e_out <= e_in * bound);
        }
    }
}
