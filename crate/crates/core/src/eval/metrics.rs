//! SI-SDR, segmental SNR and log-spectral distance.

use crate::data::AudioClip;
use crate::dsp::{stft_magnitude, StftResolution};
use crate::error::{Error, Result};

pub const SI_SDR_CLAMP: f64 = 60.0;
pub const SEG_SNR_RANGE: (f64, f64) = (-10.0, 35.0);
pub const SEG_SNR_FRAME: usize = 256;
/// Frames whose reference energy is below this are skipped.
pub const SILENCE_ENERGY: f64 = 1e-8;
pub const LSD_EPS: f64 = 1e-8;

fn check_pair(reference: &[f32], estimate: &[f32]) -> Result<()> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::InvalidArgument(format!("metric inputs of length {} and {}", reference.len(), estimate.len())));
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scale-invariant SDR in dB, clamped to ±60.
pub fn si_sdr(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::InvalidArgument("SI-SDR reference is silent".into()));
    }
    let alpha = dot(estimate, reference) / rr;
    let target = alpha * alpha * rr;
    let resid: f64 = reference.iter().zip(estimate).map(|(&r, &e)| (e as f64 - alpha * r as f64).powi(2)).sum();
    let db = if resid == 0.0 { SI_SDR_CLAMP } else if target == 0.0 { -SI_SDR_CLAMP } else { 10.0 * (target / resid).log10() };
    Ok(db.clamp(-SI_SDR_CLAMP, SI_SDR_CLAMP))
}

/// Mean over non-silent frames of the per-frame SNR, each clamped to
/// [-10, 35] dB. A trailing partial frame counts as a frame.
pub fn seg_snr(reference: &[f32], estimate: &[f32], frame: usize) -> Result<f64> {
    check_pair(reference, estimate)?;
    if frame == 0 {
        return Err(Error::InvalidArgument("segment length must be positive".into()));
    }
    let (lo, hi) = SEG_SNR_RANGE;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, e) in reference.chunks(frame).zip(estimate.chunks(frame)) {
        let sig = dot(r, r);
        if sig < SILENCE_ENERGY {
            continue;
        }
        let noise: f64 = r.iter().zip(e).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        let snr = if noise == 0.0 { hi } else { 10.0 * (sig / noise).log10() };
        total += snr.clamp(lo, hi);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("segmental SNR: every reference frame is silent".into()));
    }
    Ok(total / count as f64)
}

pub fn default_lsd_resolution() -> StftResolution {
    StftResolution::new(128, 512, 512).expect("valid resolution")
}

/// Log-spectral distance in dB: RMS over frames of the per-frame RMS
/// difference of `20 log10(|X| + eps)`.
pub fn lsd(reference: &[f32], estimate: &[f32], res: StftResolution) -> Result<f64> {
    check_pair(reference, estimate)?;
    let r64: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let e64: Vec<f64> = estimate.iter().map(|&v| v as f64).collect();
    let a = stft_magnitude(&r64, res)?;
    let b = stft_magnitude(&e64, res)?;
    let (bins, frames) = (a.bins(), a.frames());
    let db = |m: f64| 20.0 * (m + LSD_EPS).log10();
    let mut acc = 0.0;
    for f in 0..frames {
        let mut s = 0.0;
        for k in 0..bins {
            let d = db(a.mags.data()[k * frames + f]) - db(b.mags.data()[k * frames + f]);
            s += d * d;
        }
        acc += s / bins as f64;
    }
    Ok((acc / frames as f64).sqrt())
}

/// Metrics of one (reference, estimate) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipMetrics {
    pub si_sdr: f64,
    pub seg_snr: f64,
    pub lsd: f64,
}

impl ClipMetrics {
    pub fn measure(reference: &AudioClip, estimate: &AudioClip) -> Result<Self> {
        if reference.sample_rate != estimate.sample_rate {
            return Err(Error::InvalidArgument("metric inputs have different sample rates".into()));
        }
        Ok(Self {
            si_sdr: si_sdr(&reference.samples, &estimate.samples)?,
            seg_snr: seg_snr(&reference.samples, &estimate.samples, SEG_SNR_FRAME)?,
            lsd: lsd(&reference.samples, &estimate.samples, default_lsd_resolution())?,
        })
    }
}

/// Per-clip metrics and their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    pub si_sdr_db: f64,
    pub seg_snr_db: f64,
    pub lsd: f64,
}

impl MetricReport {
    pub fn from_clips(clips: Vec<ClipMetrics>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument("no clips to evaluate".into()));
        }
        let n = clips.len() as f64;
        let mean = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
        Ok(Self { si_sdr_db: mean(|c| c.si_sdr), seg_snr_db: mean(|c| c.seg_snr), lsd: mean(|c| c.lsd), clips })
    }

    pub fn evaluate(pairs: &[(AudioClip, AudioClip)]) -> Result<Self> {
        Self::from_clips(pairs.iter().map(|(r, e)| ClipMetrics::measure(r, e)).collect::<Result<_>>()?)
    }

    pub fn count(&self) -> usize {
        self.clips.len()
    }

    /// Tab-separated table with one row per clip and a final `mean` row.
    pub fn to_tsv(&self, names: Option<&[String]>) -> String {
        let mut rows = vec![["clip".to_string(), "si_sdr_db".into(), "seg_snr_db".into(), "lsd_db".into()]];
        for (i, c) in self.clips.iter().enumerate() {
            let name = names.and_then(|n| n.get(i)).cloned().unwrap_or_else(|| i.to_string());
            rows.push([name, format!("{:.3}", c.si_sdr), format!("{:.3}", c.seg_snr), format!("{:.3}", c.lsd)]);
        }
        rows.push(["mean".into(), format!("{:.3}", self.si_sdr_db), format!("{:.3}", self.seg_snr_db), format!("{:.3}", self.lsd)]);
        aligned_tsv(&rows)
    }
}

/// Joins cells with tabs, padding each column to a common width.
pub fn aligned_tsv<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().zip(&widths).enumerate().map(|(i, (c, &w))| if i + 1 == N { c.clone() } else { format!("{c:<w$}") }).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn si_sdr_reference_cases() {
        let r = noise(1000, 1);
        assert_eq!(si_sdr(&r, &r).unwrap(), 60.0);
        let twice: Vec<f32> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&r, &twice).unwrap(), 60.0);
        // orthogonalize a second signal against r and match its power
        let n = noise(1000, 2);
        let a = dot(&n, &r) / dot(&r, &r);
        let mut o: Vec<f32> = n.iter().zip(&r).map(|(&x, &y)| (x as f64 - a * y as f64) as f32).collect();
        let k = (dot(&r, &r) / dot(&o, &o)).sqrt();
        o.iter_mut().for_each(|v| *v = (*v as f64 * k) as f32);
        let mix: Vec<f32> = r.iter().zip(&o).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&r, &mix).unwrap().abs() < 0.01);
        assert!(si_sdr(&vec![0.0; 10], &r[..10]).is_err());
        assert!(si_sdr(&r, &r[..10]).is_err());
    }

    #[test]
    fn seg_snr_cases() {
        let tone: Vec<f32> = (0..2048).map(|i| (i as f32 * 0.05).sin() * 0.5).collect();
        assert_eq!(seg_snr(&tone, &tone, 256).unwrap(), 35.0);
        let loud = noise(2048, 3).iter().map(|v| v * 10.0).collect::<Vec<_>>();
        assert_eq!(seg_snr(&tone, &loud, 256).unwrap(), -10.0);
        let mut gated = tone.clone();
        gated[..1024].iter_mut().for_each(|v| *v = 0.0);
        let est: Vec<f32> = gated.iter().zip(noise(2048, 4)).map(|(a, b)| a + b * 1e-3).collect();
        let only_live = seg_snr(&gated[1024..], &est[1024..], 256).unwrap();
        assert!((seg_snr(&gated, &est, 256).unwrap() - only_live).abs() < 1e-12);
        assert!(seg_snr(&vec![0.0; 512], &vec![0.0; 512], 256).is_err());
    }

    #[test]
    fn lsd_identity_and_naive_dft_oracle() {
        let res = StftResolution::new(64, 128, 128).unwrap();
        let r = noise(600, 5);
        assert_eq!(lsd(&r, &r, res).unwrap(), 0.0);
        let zero = vec![0.0f32; 600];
        let frames = (600 - 128) / 64 + 1;
        let mut acc = 0.0;
        for f in 0..frames {
            let mut s = 0.0;
            for k in 0..65 {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for n in 0..128 {
                    let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / 128.0).cos();
                    let x = r[f * 64 + n] as f64 * w;
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 128.0;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                let d = 20.0 * ((re * re + im * im).sqrt() + LSD_EPS).log10() - 20.0 * LSD_EPS.log10();
                s += d * d;
            }
            acc += s / 65.0;
        }
        let oracle = (acc / frames as f64).sqrt();
        assert!((lsd(&r, &zero, res).unwrap() - oracle).abs() < 1e-6 * oracle);
    }

    #[test]
    fn report_means_are_arithmetic() {
        let clips = vec![ClipMetrics { si_sdr: 1.0, seg_snr: 2.0, lsd: 3.0 }, ClipMetrics { si_sdr: 3.0, seg_snr: 6.0, lsd: 1.0 }];
        let r = MetricReport::from_clips(clips).unwrap();
        assert_eq!((r.si_sdr_db, r.seg_snr_db, r.lsd, r.count()), (2.0, 4.0, 2.0, 2));
        let tsv = r.to_tsv(None);
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.lines().last().unwrap().starts_with("mean"));
        assert!(MetricReport::from_clips(vec![]).is_err());
    }
}
