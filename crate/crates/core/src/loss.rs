//! Waveform L1 plus full-band or high-band multi-resolution STFT losses.
//!
//! Per resolution the spectral term is
//! `||S - Ŝ||_F / (||S||_F + eps) + sum|log(S + eps) - log(Ŝ + eps)| / norm`
//! where `norm` is the spectrogram element count by default, or the
//! waveform length. The high band keeps the last `floor(F/2)` bin rows.

use std::fmt;
use std::str::FromStr;

use crate::dsp::StftResolution;
use crate::error::{shape_err, Error, Result};
use crate::numeric::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Full,
    High,
}

/// Normalizer of the log-magnitude term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogNorm {
    /// Number of spectrogram elements in the compared band.
    Elements,
    /// Waveform length `T`.
    WaveformLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    L1,
    L1Full,
    L1High,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::L1, LossMode::L1Full, LossMode::L1High];

    pub fn band(self) -> Option<Band> {
        match self {
            LossMode::L1 => None,
            LossMode::L1Full => Some(Band::Full),
            LossMode::L1High => Some(Band::High),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::L1 => "l1",
            LossMode::L1Full => "l1+full",
            LossMode::L1High => "l1+high",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "l1" => Ok(LossMode::L1),
            "l1+full" => Ok(LossMode::L1Full),
            "l1+high" => Ok(LossMode::L1High),
            other => Err(Error::InvalidArgument(format!("unknown loss mode {other:?} (expected l1, l1+full, l1+high)"))),
        }
    }
}

impl fmt::Display for LogNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogNorm::Elements => "elements",
            LogNorm::WaveformLength => "waveform_length",
        })
    }
}

impl FromStr for LogNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "elements" => Ok(LogNorm::Elements),
            "waveform_length" => Ok(LogNorm::WaveformLength),
            other => Err(Error::InvalidArgument(format!("unknown log normalizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MstftConfig {
    pub resolutions: Vec<StftResolution>,
    pub band: Band,
    pub eps: f64,
    pub log_norm: LogNorm,
}

impl Default for MstftConfig {
    fn default() -> Self {
        Self { resolutions: StftResolution::standard_set(), band: Band::Full, eps: 1e-8, log_norm: LogNorm::Elements }
    }
}

impl MstftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("multi-resolution STFT loss needs at least one resolution".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn max_window(&self) -> usize {
        self.resolutions.iter().map(|r| r.win_len()).max().unwrap_or(0)
    }
}

/// Per-term values of one loss evaluation (summed over resolutions).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub sc: f64,
    pub logmag: f64,
}

/// `||S_ref - S_est||_F / (||S_ref||_F + eps)`.
pub fn spectral_convergence<R: Real>(g: &Graph<R>, s_ref: &Var<R>, s_est: &Var<R>, eps: f64) -> Result<Var<R>> {
    let diff = g.frob_norm(&g.sub(s_ref, s_est)?);
    let denom = g.add_scalar(&g.frob_norm(s_ref), R::lit(eps));
    g.div(&diff, &denom)
}

/// `sum |log(S_ref + eps) - log(S_est + eps)| / normalizer`.
pub fn log_magnitude_l1<R: Real>(g: &Graph<R>, s_ref: &Var<R>, s_est: &Var<R>, eps: f64, normalizer: usize) -> Result<Var<R>> {
    let e = R::lit(eps);
    let lr = g.ln(&g.add_scalar(s_ref, e));
    let le = g.ln(&g.add_scalar(s_est, e));
    let s = g.sum(&g.abs(&g.sub(&lr, &le)?));
    Ok(g.scale(&s, R::one() / R::lit(normalizer as f64)))
}

fn select_band<R: Real>(g: &Graph<R>, s: &Var<R>, band: Band) -> Result<Var<R>> {
    match band {
        Band::Full => Ok(s.clone()),
        Band::High => {
            let bins = s.shape()[0];
            let rows = bins / 2;
            g.narrow(s, 0, bins - rows, rows)
        }
    }
}

/// Multi-resolution STFT loss and its summed spectral-convergence and
/// log-magnitude parts.
pub fn mstft_terms<R: Real>(g: &Graph<R>, x: &Var<R>, xhat: &Var<R>, cfg: &MstftConfig) -> Result<(Var<R>, Var<R>, Var<R>)> {
    cfg.validate()?;
    if x.shape() != xhat.shape() {
        return Err(shape_err!("mstft: reference {:?} vs estimate {:?}", x.shape(), xhat.shape()));
    }
    let len = x.value().numel();
    let mut sc_total: Option<Var<R>> = None;
    let mut lm_total: Option<Var<R>> = None;
    let acc = |slot: &mut Option<Var<R>>, v: Var<R>| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(prev) => g.add(&prev, &v)?,
            None => v,
        });
        Ok(())
    };
    for &res in &cfg.resolutions {
        let s_ref = select_band(g, &g.stft_magnitude(x, res)?, cfg.band)?;
        let s_est = select_band(g, &g.stft_magnitude(xhat, res)?, cfg.band)?;
        let norm = match cfg.log_norm {
            LogNorm::Elements => s_ref.value().numel(),
            LogNorm::WaveformLength => len,
        };
        acc(&mut sc_total, spectral_convergence(g, &s_ref, &s_est, cfg.eps)?)?;
        acc(&mut lm_total, log_magnitude_l1(g, &s_ref, &s_est, cfg.eps, norm)?)?;
    }
    let (sc, lm) = (sc_total.expect("at least one resolution"), lm_total.expect("at least one resolution"));
    Ok((g.add(&sc, &lm)?, sc, lm))
}

pub fn mstft<R: Real>(g: &Graph<R>, x: &Var<R>, xhat: &Var<R>, cfg: &MstftConfig) -> Result<Var<R>> {
    mstft_terms(g, x, xhat, cfg).map(|(total, _, _)| total)
}

/// Mean absolute error over samples.
pub fn l1_loss<R: Real>(g: &Graph<R>, x: &Var<R>, xhat: &Var<R>) -> Result<Var<R>> {
    if x.shape() != xhat.shape() {
        return Err(shape_err!("l1: reference {:?} vs estimate {:?}", x.shape(), xhat.shape()));
    }
    Ok(g.mean(&g.abs(&g.sub(x, xhat)?)))
}

/// `l1`, or `stft_weight * mstft(band) + l1`. The band in `cfg` is
/// overridden by the mode.
pub fn total_loss<R: Real>(
    g: &Graph<R>,
    x: &Var<R>,
    xhat: &Var<R>,
    mode: LossMode,
    cfg: &MstftConfig,
    stft_weight: f64,
) -> Result<(Var<R>, LossTerms)> {
    let l1 = l1_loss(g, x, xhat)?;
    let l1v = l1.value().item()?.as_f64();
    match mode.band() {
        None => Ok((l1, LossTerms { total: l1v, l1: l1v, sc: 0.0, logmag: 0.0 })),
        Some(band) => {
            let cfg = MstftConfig { band, ..cfg.clone() };
            let (spec, sc, lm) = mstft_terms(g, x, xhat, &cfg)?;
            let total = g.add(&g.scale(&spec, R::lit(stft_weight)), &l1)?;
            let terms = LossTerms {
                total: total.value().item()?.as_f64(),
                l1: l1v,
                sc: sc.value().item()?.as_f64(),
                logmag: lm.value().item()?.as_f64(),
            };
            Ok((total, terms))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::testing::{assert_grads_match, rand_tensor};
    use crate::numeric::Tensor;

    fn scalar(v: &Var<f64>) -> f64 {
        v.value().item().unwrap()
    }

    #[test]
    fn spectral_convergence_cases() {
        let g = Graph::<f64>::no_grad();
        let s = g.constant(rand_tensor(&[3, 4], 1));
        assert_eq!(scalar(&spectral_convergence(&g, &s, &s, 1e-8).unwrap()), 0.0);
        let z = g.constant(Tensor::zeros([3, 4]));
        assert!((scalar(&spectral_convergence(&g, &s, &z, 1e-8).unwrap()) - 1.0).abs() < 1e-7);

        let a = rand_tensor(&[3, 4], 2);
        let b = rand_tensor(&[3, 4], 3);
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-8;
        let got = scalar(&spectral_convergence(&g, &g.constant(a.clone()), &g.constant(b.clone()), 1e-8).unwrap());
        assert!((got - num / den).abs() <= 1e-7);

        let scaled = |t: &Tensor<f64>| Tensor::from_fn(t.shape().to_vec(), |i| 3.5 * t.data()[i]);
        let got2 = scalar(&spectral_convergence(&g, &g.constant(scaled(&a)), &g.constant(scaled(&b)), 1e-8).unwrap());
        assert!((got - got2).abs() < 1e-7);
    }

    #[test]
    fn log_magnitude_cases() {
        let g = Graph::<f64>::no_grad();
        let s = g.constant(Tensor::from_fn([2, 2], |i| i as f64 + 0.5));
        assert_eq!(scalar(&log_magnitude_l1(&g, &s, &s, 1e-8, 4).unwrap()), 0.0);
        let e = std::f64::consts::E;
        let r = g.constant(Tensor::from_slice(&[e * 2.0]));
        let est = g.constant(Tensor::from_slice(&[2.0]));
        assert!((scalar(&log_magnitude_l1(&g, &r, &est, 1e-8, 5).unwrap()) - 0.2).abs() < 1e-7);

        let a = Tensor::from_fn([3, 4], |i| (i as f64 * 0.37).sin().abs());
        let b = Tensor::from_fn([3, 4], |i| (i as f64 * 0.91).cos().abs());
        let want: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x + 1e-8).ln() - (y + 1e-8).ln()).abs()).sum::<f64>() / 12.0;
        let got = scalar(&log_magnitude_l1(&g, &g.constant(a), &g.constant(b), 1e-8, 12).unwrap());
        assert!((got - want).abs() <= 1e-7);
    }

    #[test]
    fn high_band_row_selection() {
        let g = Graph::<f64>::no_grad();
        let s = g.constant(Tensor::from_fn([257, 2], |i| (i / 2) as f64));
        let h = select_band(&g, &s, Band::High).unwrap();
        assert_eq!(h.shape(), &[128, 2]);
        assert_eq!(h.value().data()[0], 129.0);
        assert_eq!(*h.value().data().last().unwrap(), 256.0);
    }

    #[test]
    fn identical_signals_have_zero_loss_in_every_mode() {
        let g = Graph::<f64>::no_grad();
        let x = g.constant(rand_tensor(&[1, 2400], 4));
        for mode in LossMode::ALL {
            let (l, terms) = total_loss(&g, &x, &x, mode, &MstftConfig::default(), 0.5).unwrap();
            assert_eq!(scalar(&l), 0.0, "{mode}");
            assert_eq!(terms.total, 0.0);
        }
    }

    #[test]
    fn l1_of_constant_offset() {
        let g = Graph::<f64>::no_grad();
        let x = rand_tensor(&[1, 50], 5);
        let y = Tensor::from_fn([1, 50], |i| x.data()[i] - 0.3);
        let (l, _) = total_loss(&g, &g.constant(x), &g.constant(y), LossMode::L1, &MstftConfig::default(), 0.5).unwrap();
        assert!((scalar(&l) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn full_mode_composes_halved_mstft_and_l1() {
        let g = Graph::<f64>::no_grad();
        let x = g.constant(rand_tensor(&[1, 2400], 6));
        let y = g.constant(rand_tensor(&[1, 2400], 7));
        let cfg = MstftConfig::default();
        let (l, terms) = total_loss(&g, &x, &y, LossMode::L1Full, &cfg, 0.5).unwrap();
        let want = 0.5 * scalar(&mstft(&g, &x, &y, &cfg).unwrap()) + scalar(&l1_loss(&g, &x, &y).unwrap());
        assert!((scalar(&l) - want).abs() <= 1e-7);
        assert!((terms.sc + terms.logmag - scalar(&mstft(&g, &x, &y, &cfg).unwrap())).abs() < 1e-9);
    }

    #[test]
    fn waveform_length_normalizer() {
        let g = Graph::<f64>::no_grad();
        let res = StftResolution::new(50, 240, 512).unwrap();
        let x = g.constant(rand_tensor(&[1, 1000], 8));
        let y = g.constant(rand_tensor(&[1, 1000], 9));
        let elems = MstftConfig { resolutions: vec![res], ..MstftConfig::default() };
        let wave = MstftConfig { log_norm: LogNorm::WaveformLength, ..elems.clone() };
        let (_, _, lm_e) = mstft_terms(&g, &x, &y, &elems).unwrap();
        let (_, _, lm_w) = mstft_terms(&g, &x, &y, &wave).unwrap();
        let numel = 257 * res.frames(1000).unwrap();
        assert!((scalar(&lm_e) * numel as f64 - scalar(&lm_w) * 1000.0).abs() < 1e-8);
    }

    #[test]
    fn errors() {
        let g = Graph::<f64>::no_grad();
        let x = g.constant(rand_tensor(&[1, 100], 1));
        let y = g.constant(rand_tensor(&[1, 90], 2));
        assert!(l1_loss(&g, &x, &y).is_err());
        let cfg = MstftConfig::default();
        assert!(matches!(mstft(&g, &x, &x, &cfg), Err(Error::TooShort { .. })));
        assert!("l2".parse::<LossMode>().is_err());
        assert!(mstft(&g, &x, &x, &MstftConfig { resolutions: vec![], ..cfg.clone() }).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let res = StftResolution::new(8, 16, 16).unwrap();
        let x = rand_tensor(&[1, 48], 10);
        let xhat = rand_tensor(&[1, 48], 11);
        for mode in [LossMode::L1Full, LossMode::L1High] {
            let cfg = MstftConfig { resolutions: vec![res], ..MstftConfig::default() };
            let xr = x.clone();
            assert_grads_match(&[xhat.clone()], move |g, v| total_loss(g, &g.constant(xr.clone()), &v[0], mode, &cfg, 0.5).unwrap().0);
        }
    }
}
