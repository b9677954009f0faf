//! Short-time Fourier magnitude analysis used by the losses and metrics.
//!
//! Frames start at `j * hop` with no centering, are multiplied by a periodic
//! Hann window of `win_len` samples and zero-padded to `n_fft`. Only bins
//! `0..=n_fft/2` are kept.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Tensor, Var};

/// One analysis resolution: hop, window length and FFT size in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftResolution {
    hop: usize,
    win_len: usize,
    n_fft: usize,
}

impl StftResolution {
    pub fn new(hop: usize, win_len: usize, n_fft: usize) -> Result<Self> {
        if hop == 0 || hop > win_len || win_len > n_fft {
            return Err(Error::InvalidArgument(format!("STFT resolution needs 0 < hop <= win <= n_fft, got {hop}/{win_len}/{n_fft}")));
        }
        if !n_fft.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("n_fft {n_fft} is not a power of two")));
        }
        Ok(Self { hop, win_len, n_fft })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Number of retained frequency bins, `n_fft/2 + 1`.
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.win_len {
            return Err(Error::TooShort { len, needed: self.win_len });
        }
        Ok(1 + (len - self.win_len) / self.hop)
    }

    /// The three resolutions used for 16 kHz training:
    /// hops 50/120/240, windows 240/600/1200, FFT sizes 512/1024/2048.
    pub fn standard_set() -> Vec<Self> {
        [(50, 240, 512), (120, 600, 1024), (240, 1200, 2048)]
            .into_iter()
            .map(|(h, w, n)| Self { hop: h, win_len: w, n_fft: n })
            .collect()
    }
}

/// `hop:win:fft`
impl fmt::Display for StftResolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.hop, self.win_len, self.n_fft)
    }
}

impl FromStr for StftResolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::InvalidArgument(format!("expected hop:win:fft, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let num = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
        Self::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }
}

/// Magnitude spectrogram, `mags[bin, frame]`.
#[derive(Clone, Debug)]
pub struct Spectrogram<R> {
    pub mags: Tensor<R>,
    pub resolution: StftResolution,
}

impl<R: Real> Spectrogram<R> {
    pub fn bins(&self) -> usize {
        self.mags.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.mags.dim(1)
    }
}

/// Periodic Hann window `0.5 * (1 - cos(2 pi k / n))`.
pub fn hann_window<R: Real>(n: usize) -> Vec<R> {
    let two_pi = 2.0 * std::f64::consts::PI;
    (0..n).map(|k| R::lit(0.5 * (1.0 - (two_pi * k as f64 / n as f64).cos()))).collect()
}

fn forward_plan<R: Real>(n: usize) -> Arc<dyn Fft<R>> {
    FftPlanner::new().plan_fft_forward(n)
}

/// DFT of a real signal of power-of-two length, bins `0..=n/2`.
pub fn fft_real<R: Real>(x: &[R]) -> Result<Vec<Complex<R>>> {
    let n = x.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("FFT length {n} is not a power of two")));
    }
    let mut buf: Vec<Complex<R>> = x.iter().map(|&v| Complex::new(v, R::zero())).collect();
    forward_plan::<R>(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    Ok(buf)
}

/// Complex spectra of every frame, `spec[frame * bins + bin]`.
fn frame_spectra<R: Real>(x: &[R], res: StftResolution, window: &[R], plan: &dyn Fft<R>) -> Result<(usize, Vec<Complex<R>>)> {
    let frames = res.frames(x.len())?;
    let (n, bins) = (res.n_fft, res.bins());
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(R::zero(), R::zero()); n];
    let mut scratch = vec![Complex::new(R::zero(), R::zero()); plan.get_inplace_scratch_len()];
    for j in 0..frames {
        let seg = &x[j * res.hop..j * res.hop + res.win_len];
        for (slot, (&s, &w)) in buf.iter_mut().zip(seg.iter().zip(window)) {
            *slot = Complex::new(s * w, R::zero());
        }
        for slot in &mut buf[res.win_len..] {
            *slot = Complex::new(R::zero(), R::zero());
        }
        plan.process_with_scratch(&mut buf, &mut scratch);
        out.extend_from_slice(&buf[..bins]);
    }
    Ok((frames, out))
}

fn magnitudes<R: Real>(spec: &[Complex<R>], frames: usize, bins: usize) -> Vec<R> {
    let mut mags = vec![R::zero(); frames * bins];
    for j in 0..frames {
        for k in 0..bins {
            mags[k * frames + j] = spec[j * bins + k].norm();
        }
    }
    mags
}

/// Magnitude STFT of `x`.
pub fn stft_magnitude<R: Real>(x: &[R], res: StftResolution) -> Result<Spectrogram<R>> {
    let window = hann_window::<R>(res.win_len);
    let plan = forward_plan::<R>(res.n_fft);
    let (frames, spec) = frame_spectra(x, res, &window, plan.as_ref())?;
    let mags = magnitudes(&spec, frames, res.bins());
    Ok(Spectrogram { mags: Tensor::from_parts(vec![res.bins(), frames], mags), resolution: res })
}

impl<R: Real> Graph<R> {
    /// Differentiable magnitude STFT of the flattened `x`, shaped
    /// `[bins, frames]`. The magnitude gradient at an exactly zero bin is 0.
    pub fn stft_magnitude(&self, x: &Var<R>, res: StftResolution) -> Result<Var<R>> {
        let window = hann_window::<R>(res.win_len);
        let plan = forward_plan::<R>(res.n_fft);
        let (frames, spec) = frame_spectra(x.value().data(), res, &window, plan.as_ref())?;
        let bins = res.bins();
        let mags = Tensor::from_parts(vec![bins, frames], magnitudes(&spec, frames, bins));
        let xshape = x.shape().to_vec();
        let len = x.value().numel();
        Ok(self.record(mags, &[x], move |g, _| {
            // d|X_k|/dy_n = Re(conj(X_k / |X_k|) e^{-i w k n}), so the frame
            // gradient is the real part of a forward DFT of G_k conj(Z_k).
            let n = res.n_fft;
            let zero = Complex::new(R::zero(), R::zero());
            let mut buf = vec![zero; n];
            let mut scratch = vec![zero; plan.get_inplace_scratch_len()];
            let mut dx = vec![R::zero(); len];
            for j in 0..frames {
                buf.iter_mut().for_each(|c| *c = zero);
                for k in 0..bins {
                    let z = spec[j * bins + k];
                    let m = z.norm();
                    if m > R::zero() {
                        buf[k] = (z / m).conj() * g.data()[k * frames + j];
                    }
                }
                plan.process_with_scratch(&mut buf, &mut scratch);
                let base = j * res.hop;
                for (i, &w) in window.iter().enumerate() {
                    dx[base + i] = dx[base + i] + buf[i].re * w;
                }
            }
            vec![Some(Tensor::from_parts(xshape, dx))]
        }))
    }
}

/// Complex STFT/inverse pair used by the band-mask augmentation. Frames
/// use a periodic Hann window at 75% overlap; the signal is padded so that
/// every original sample is covered by the same number of frames, making
/// weighted overlap-add an exact inverse.
pub(crate) struct StftSynth {
    hop: usize,
    win: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl StftSynth {
    pub(crate) fn new(hop: usize, win: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { hop, win, window: hann_window(win), fwd: planner.plan_fft_forward(win), inv: planner.plan_fft_inverse(win) }
    }

    pub(crate) fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    /// Applies `edit` to every frame's positive-frequency bins and resynthesizes
    /// a signal of the original length.
    pub(crate) fn process(&self, x: &[f64], mut edit: impl FnMut(&mut [Complex<f64>])) -> Vec<f64> {
        let (hop, win) = (self.hop, self.win);
        let lead = win - hop;
        let body = lead + x.len();
        let frames = body.div_ceil(hop);
        let total = (frames - 1) * hop + win;
        let mut padded = vec![0.0; total];
        padded[lead..lead + x.len()].copy_from_slice(x);

        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let bins = self.bins();
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        for j in 0..frames {
            let base = j * hop;
            for i in 0..win {
                buf[i] = Complex::new(padded[base + i] * self.window[i], 0.0);
            }
            self.fwd.process(&mut buf);
            edit(&mut buf[..bins]);
            for k in 1..win - bins + 1 {
                buf[win - k] = buf[k].conj();
            }
            self.inv.process(&mut buf);
            for i in 0..win {
                let w = self.window[i];
                out[base + i] += buf[i].re / win as f64 * w;
                norm[base + i] += w * w;
            }
        }
        (lead..lead + x.len()).map(|i| if norm[i] > 1e-12 { out[i] / norm[i] } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::testing::{assert_grads_match, rand_tensor};
    use std::f64::consts::PI;

    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    (re + v * a.cos(), im + v * a.sin())
                })
            })
            .collect()
    }

    #[test]
    fn hann_closed_forms() {
        assert_eq!(hann_window::<f64>(1), vec![0.0]);
        let w = hann_window::<f64>(4);
        let want = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        for n in [8, 64, 600] {
            let s: f64 = hann_window::<f64>(n).iter().sum();
            assert!((s - n as f64 / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fft_delta_zero_and_random() {
        assert!(fft_real(&[0.0f64; 8]).unwrap().iter().all(|c| c.norm() == 0.0));
        for c in fft_real(&[1.0f64, 0.0, 0.0, 0.0]).unwrap() {
            assert_eq!((c.re, c.im), (1.0, 0.0));
        }
        assert!(fft_real(&[0.0f64; 6]).is_err());

        let x = rand_tensor(&[64], 3);
        let got = fft_real(x.data()).unwrap();
        for (c, (re, im)) in got.iter().zip(naive_dft(x.data())) {
            let scale = (re * re + im * im).sqrt().max(1.0);
            assert!((c.re - re).abs() <= 1e-6 * scale && (c.im - im).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn fft_inverse_round_trip() {
        let x = rand_tensor(&[128], 4);
        let bins = fft_real(x.data()).unwrap();
        // Naive inverse from the half spectrum of a real signal.
        let n = 128;
        for t in 0..n {
            let mut acc = 0.0;
            for (k, c) in bins.iter().enumerate() {
                let w = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                let a = 2.0 * PI * (k * t) as f64 / n as f64;
                acc += w * (c.re * a.cos() - c.im * a.sin());
            }
            assert!((acc / n as f64 - x.data()[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn resolution_validation_and_parsing() {
        assert!(StftResolution::new(0, 4, 4).is_err());
        assert!(StftResolution::new(4, 3, 4).is_err());
        assert!(StftResolution::new(2, 4, 6).is_err());
        let r: StftResolution = "120:600:1024".parse().unwrap();
        assert_eq!(r, StftResolution::new(120, 600, 1024).unwrap());
        assert_eq!(r.to_string(), "120:600:1024");
        assert_eq!(r.frames(1200).unwrap(), 6);
        assert_eq!(StftResolution::new(240, 600, 1024).unwrap().frames(1200).unwrap(), 3);
        assert!(matches!(r.frames(599), Err(Error::TooShort { .. })));
    }

    #[test]
    fn stft_of_zeros_and_frame_count() {
        let res = StftResolution::new(240, 600, 1024).unwrap();
        let s = stft_magnitude(&vec![0.0f64; 1200], res).unwrap();
        assert_eq!(s.frames(), 3);
        assert_eq!(s.bins(), 513);
        assert!(s.mags.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn stft_sine_matches_windowed_dft() {
        let res = StftResolution::new(128, 512, 512).unwrap();
        let x: Vec<f64> = (0..1024).map(|t| (2.0 * PI * 16.0 * t as f64 / 512.0).sin()).collect();
        let s = stft_magnitude(&x, res).unwrap();
        let w = hann_window::<f64>(512);
        for j in 0..s.frames() {
            let frame: Vec<f64> = (0..512).map(|i| x[j * 128 + i] * w[i]).collect();
            for (k, (re, im)) in naive_dft(&frame).into_iter().enumerate() {
                let want = (re * re + im * im).sqrt();
                assert!((s.mags.data()[k * s.frames() + j] - want).abs() <= 1e-6 * want.max(1.0));
            }
            let col: Vec<f64> = (0..s.bins()).map(|k| s.mags.data()[k * s.frames() + j]).collect();
            let peak = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(peak, 16);
        }
    }

    #[test]
    fn stft_is_absolutely_homogeneous() {
        let res = StftResolution::new(16, 32, 64).unwrap();
        let x = rand_tensor(&[200], 5);
        let a = stft_magnitude(x.data(), res).unwrap();
        let scaled: Vec<f64> = x.data().iter().map(|v| -2.5 * v).collect();
        let b = stft_magnitude(&scaled, res).unwrap();
        for (p, q) in a.mags.data().iter().zip(b.mags.data()) {
            assert!((2.5 * p - q).abs() <= 1e-12 * q.max(1.0));
        }
    }

    #[test]
    fn stft_gradient_matches_finite_differences() {
        let res = StftResolution::new(8, 16, 32).unwrap();
        let x = rand_tensor(&[40], 6);
        let wts = rand_tensor(&[17, 4], 7);
        assert_grads_match(&[x], move |g, v| {
            let s = g.stft_magnitude(&v[0], res).unwrap();
            g.sum(&g.mul(&s, &g.constant(wts.clone())).unwrap())
        });
    }

    #[test]
    fn synthesis_is_identity_without_edits() {
        let synth = StftSynth::new(256, 1024);
        let x = rand_tensor(&[3000], 8);
        let y = synth.process(x.data(), |_| {});
        assert_eq!(y.len(), 3000);
        for (a, b) in x.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
