//! Objective metrics, real-time-factor benchmarking and the ablation grid.

mod metrics;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use metrics::{
    aligned_tsv, default_lsd_resolution, lsd, seg_snr, si_sdr, ClipMetrics, MetricReport, LSD_EPS, SEG_SNR_FRAME, SEG_SNR_RANGE, SILENCE_ENERGY,
    SI_SDR_CLAMP,
};

use crate::data::{AudioClip, PairDataset};
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::model::{Model, ModelConfig};
use crate::numeric::Tensor;
use crate::train::{train_loop, RunOutputs, TrainConfig, Trainer};

/// Offline denoising of one clip; output has the input's length and rate.
pub fn denoise(model: &Model<f32>, clip: &AudioClip) -> Result<AudioClip> {
    let y = model.forward(&Tensor::new(vec![1, clip.len()], clip.samples.clone())?)?;
    AudioClip::new(clip.sample_rate, y.into_data())
}

/// Metrics of the model's output on `(clean, noisy)` pairs.
pub fn evaluate_model(model: &Model<f32>, pairs: &[(AudioClip, AudioClip)]) -> Result<MetricReport> {
    let clips = pairs
        .iter()
        .map(|(clean, noisy)| ClipMetrics::measure(clean, &denoise(model, noisy)?))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_clips(clips)
}

/// Metrics of the unprocessed noisy input.
pub fn evaluate_noisy(pairs: &[(AudioClip, AudioClip)]) -> Result<MetricReport> {
    MetricReport::evaluate(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtfOptions {
    pub seconds: f64,
    pub batch: usize,
    pub sample_rate: u32,
    pub reps: usize,
    pub seed: u64,
}

impl Default for RtfOptions {
    fn default() -> Self {
        Self { seconds: 10.0, batch: 4, sample_rate: 16000, reps: 3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtfReport {
    /// Median over repetitions of wall time divided by audio time.
    pub rtf: f64,
    pub per_rep: Vec<f64>,
    pub param_count: usize,
}

/// Denoises `batch` random clips of `seconds` each, `reps` times, on the
/// calling thread.
pub fn rtf_bench(model: &Model<f32>, opts: RtfOptions) -> Result<RtfReport> {
    if opts.batch == 0 || opts.reps == 0 || !(opts.seconds > 0.0) || opts.sample_rate == 0 {
        return Err(Error::InvalidArgument(format!("bench options {opts:?}")));
    }
    let n = ((opts.seconds * opts.sample_rate as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inputs: Vec<Tensor<f32>> = (0..opts.batch).map(|_| Tensor::from_fn(vec![1, n], |_| rng.gen_range(-0.5..0.5))).collect();
    let audio = opts.batch as f64 * n as f64 / opts.sample_rate as f64;
    let mut per_rep = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        let t0 = Instant::now();
        for x in &inputs {
            std::hint::black_box(model.forward(x)?);
        }
        per_rep.push(t0.elapsed().as_secs_f64() / audio);
    }
    let mut sorted = per_rep.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let rtf = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    Ok(RtfReport { rtf, per_rep, param_count: model.num_params() })
}

/// Grid over attention block counts and loss modes on a fixed encoder shape.
#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub blocks: Vec<usize>,
    pub modes: Vec<LossMode>,
    pub depth: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub train: TrainConfig,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self { blocks: vec![3, 5], modes: LossMode::ALL.to_vec(), depth: 4, hidden: 16, kernel: 4, train: TrainConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub blocks: usize,
    pub mode: LossMode,
    pub params: usize,
    pub final_loss: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub baseline: MetricReport,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut rows = vec![["model".to_string(), "blocks".into(), "loss".into(), "si_sdr_db".into(), "seg_snr_db".into(), "lsd_db".into()]];
        let b = &self.baseline;
        rows.push(["noisy".into(), "-".into(), "-".into(), format!("{:.3}", b.si_sdr_db), format!("{:.3}", b.seg_snr_db), format!("{:.3}", b.lsd)]);
        for r in &self.rows {
            let m = &r.report;
            rows.push([
                "unet".into(),
                r.blocks.to_string(),
                r.mode.to_string(),
                format!("{:.3}", m.si_sdr_db),
                format!("{:.3}", m.seg_snr_db),
                format!("{:.3}", m.lsd),
            ]);
        }
        aligned_tsv(&rows)
    }

    pub fn cell(&self, blocks: usize, mode: LossMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.blocks == blocks && r.mode == mode)
    }

    /// Block counts where `l1+full` has an LSD worse than plain `l1` by more
    /// than `tolerance` dB, with the two values.
    pub fn lsd_reversals(&self, tolerance: f64) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for r in self.rows.iter().filter(|r| r.mode == LossMode::L1) {
            if let Some(full) = self.cell(r.blocks, LossMode::L1Full) {
                if full.report.lsd > r.report.lsd + tolerance {
                    out.push((r.blocks, full.report.lsd, r.report.lsd));
                }
            }
        }
        out
    }
}

/// Trains every cell with identical seed and budget and evaluates it on the
/// held-out pairs.
pub fn ablation_run(
    train: &PairDataset,
    test: &[(AudioClip, AudioClip)],
    opts: &AblationOptions,
    mut progress: impl FnMut(usize, LossMode, &AblationRow),
) -> Result<AblationTable> {
    let baseline = evaluate_noisy(test)?;
    let mut rows = Vec::new();
    for &blocks in &opts.blocks {
        for &mode in &opts.modes {
            let cfg = ModelConfig::small(opts.depth, opts.hidden, opts.kernel, blocks);
            let model = Model::build(cfg, opts.train.seed)?;
            let mut trainer = Trainer::new(model, TrainConfig { loss_mode: mode, ..opts.train.clone() })?;
            let log = train_loop(&mut trainer, train, &RunOutputs::default(), |_| {})?;
            let model = trainer.into_model();
            let row = AblationRow {
                blocks,
                mode,
                params: model.num_params(),
                final_loss: log.last().map_or(f64::NAN, |r| r.terms.total),
                report: evaluate_model(&model, test)?,
            };
            progress(blocks, mode, &row);
            rows.push(row);
        }
    }
    Ok(AblationTable { baseline, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_pairs;
    use crate::dsp::StftResolution;

    #[test]
    fn denoise_preserves_length_and_rate() {
        let m = Model::<f32>::build(ModelConfig::small(2, 4, 4, 1), 0).unwrap();
        let clip = AudioClip::new(8000, vec![0.1; 37]).unwrap();
        let out = denoise(&m, &clip).unwrap();
        assert_eq!((out.len(), out.sample_rate), (37, 8000));
    }

    #[test]
    fn rtf_is_positive() {
        let m = Model::<f32>::build(ModelConfig::small(2, 4, 4, 1), 0).unwrap();
        let r = rtf_bench(&m, RtfOptions { seconds: 0.1, batch: 2, reps: 3, ..Default::default() }).unwrap();
        assert!(r.rtf > 0.0 && r.per_rep.len() == 3);
        assert_eq!(r.param_count, m.num_params());
    }

    #[test]
    fn tiny_ablation_grid_is_deterministic() {
        let pairs = synth_pairs(6, 2, 0.15, 8000, (0.0, 10.0)).unwrap();
        let data = PairDataset::new(pairs[..4].to_vec(), (0.1, 0.1)).unwrap();
        let mut train = TrainConfig { batch_size: 2, total_iters: 3, clip_seconds: (0.1, 0.1), ..Default::default() };
        train.mstft.resolutions = vec![StftResolution::new(16, 64, 64).unwrap()];
        let opts = AblationOptions { blocks: vec![1, 2], depth: 2, hidden: 4, kernel: 4, train, ..Default::default() };
        let a = ablation_run(&data, &pairs[4..], &opts, |_, _, _| {}).unwrap();
        assert_eq!(a.rows.len(), 6);
        assert_eq!(a.to_text().lines().count(), 8);
        let b = ablation_run(&data, &pairs[4..], &opts, |_, _, _| {}).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }
}
