//! Optimization: schedule, Adam, the training loop and checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{parse_run_config, run_config_text, TrainConfig};
pub use optim::{adam_step, lr_at, AdamConfig, OptimizerState};

use crate::data::{bandmask, remix, AudioClip, MixItem, PairDataset, RevEcho, BANDMASK_WIN};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::loss::{total_loss, LossTerms};
use crate::model::Model;
use crate::numeric::{Graph, Tensor};

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub terms: LossTerms,
}

pub const LOG_HEADER: &str = "step\tlr\ttotal\tl1\tsc\tlogmag";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let t = r.terms;
        let _ = writeln!(s, "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}", r.step, r.lr, t.total, t.l1, t.sc, t.logmag);
    }
    s
}

/// Owns a model and its optimizer state for the duration of a run.
pub struct Trainer {
    model: Model<f32>,
    cfg: TrainConfig,
    opt: OptimizerState<f32>,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(model.params());
        Ok(Self { model, cfg, opt, step: 0 })
    }

    /// Resumes from a checkpoint that carries optimizer state.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model()?;
        let opt = ck.optimizer.clone().ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        opt.check_matches(model.params())?;
        ck.train_config.validate()?;
        Ok(Self { model, cfg: ck.train_config.clone(), opt, step: ck.step })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.cfg, self.step, Some(&self.opt))
    }

    /// Every step draws from its own stream so a resumed run replays the same
    /// batches.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step + 1);
        rng
    }

    /// Samples, augments and returns `(clean, noisy)` training items.
    pub fn make_batch(&self, data: &PairDataset, rng: &mut ChaCha8Rng) -> Result<Vec<(AudioClip, AudioClip)>> {
        let mut batch = data.sample_batch(rng, self.cfg.batch_size);
        if self.cfg.remix && batch.len() >= 2 {
            let items = batch.iter().map(|(c, n)| MixItem::from_pair(c, n)).collect::<Result<Vec<_>>>()?;
            batch = remix(&items, rng)?.into_iter().map(|it| { let noisy = it.noisy(); (it.clean, noisy) }).collect();
        }
        for (clean, noisy) in batch.iter_mut() {
            if self.cfg.revecho > 0.0 && rng.gen_bool(self.cfg.revecho) {
                let echo = RevEcho::sample(rng);
                *clean = echo.apply(clean);
                *noisy = echo.apply(noisy);
            }
            if self.cfg.bandmask > 0.0 && clean.len() >= BANDMASK_WIN {
                let seed = rng.gen();
                *clean = bandmask(clean, self.cfg.bandmask, seed)?;
                *noisy = bandmask(noisy, self.cfg.bandmask, seed)?;
            }
        }
        Ok(batch)
    }

    /// Forward/backward over `batch`, accumulating the mean loss gradient into
    /// the parameters. Returns the batch-mean loss terms.
    pub fn accumulate(&mut self, batch: &[(AudioClip, AudioClip)]) -> Result<LossTerms> {
        self.model.zero_grad();
        let scale = 1.0 / batch.len() as f32;
        let mut mean = LossTerms::default();
        for (clean, noisy) in batch {
            let g = Graph::<f32>::new();
            let vars = self.model.bind(&g, true);
            let x = g.constant(Tensor::new(vec![1, noisy.len()], noisy.samples.clone())?);
            let target = g.constant(Tensor::new(vec![1, clean.len()], clean.samples.clone())?);
            let y = self.model.forward_graph(&g, &vars, &x)?;
            let (loss, terms) = total_loss(&g, &target, &y, self.cfg.loss_mode, &self.cfg.mstft, self.cfg.stft_weight)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
            }
            let loss = g.scale(&loss, scale);
            let mut grads = g.backward(&loss)?;
            for (p, v) in self.model.params_mut().iter_mut().zip(&vars) {
                if let Some(gr) = grads.take(v) {
                    p.accumulate_grad(&gr)?;
                }
            }
            let b = batch.len() as f64;
            mean.total += terms.total / b;
            mean.l1 += terms.l1 / b;
            mean.sc += terms.sc / b;
            mean.logmag += terms.logmag / b;
        }
        Ok(mean)
    }

    /// One optimization step. On a non-finite loss or gradient the parameters
    /// and optimizer are left untouched and the error is returned.
    pub fn train_step(&mut self, data: &PairDataset) -> Result<LogRow> {
        let mut rng = self.step_rng();
        let batch = self.make_batch(data, &mut rng)?;
        let terms = self.accumulate(&batch)?;
        let total = self.cfg.total_iters;
        let next = (self.step + 1).min(total as u64) as usize;
        let lr = lr_at(next, total, &self.cfg)?;
        adam_step(self.model.params_mut(), &mut self.opt, lr, AdamConfig::from(&self.cfg))?;
        self.model.zero_grad();
        self.step += 1;
        Ok(LogRow { step: self.step, lr, terms })
    }
}

/// Output locations for [`train_loop`].
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Directory receiving `loss.tsv`, periodic `step_N.clun` and `final.clun`.
    pub dir: Option<PathBuf>,
}

/// Runs `trainer` until `total_iters`, logging every step. On a numeric
/// failure a `failed_step_N.clun` snapshot of the pre-step state is written
/// before the error is returned.
pub fn train_loop(trainer: &mut Trainer, data: &PairDataset, out: &RunOutputs, mut on_step: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
    let total = trainer.cfg.total_iters as u64;
    let every = trainer.cfg.checkpoint_every as u64;
    let mut rows = Vec::new();
    let write_log = |dir: &Path, rows: &[LogRow]| atomic_write(&dir.join("loss.tsv"), |w| Ok(std::io::Write::write_all(w, format_log(rows).as_bytes())?));
    while trainer.step < total {
        match trainer.train_step(data) {
            Ok(row) => {
                on_step(&row);
                rows.push(row);
            }
            Err(e) => {
                if let (Error::NonFinite(_), Some(dir)) = (&e, &out.dir) {
                    save_checkpoint(&dir.join(format!("failed_step_{}.clun", trainer.step + 1)), &trainer.checkpoint())?;
                    write_log(dir, &rows)?;
                }
                return Err(e);
            }
        }
        if let Some(dir) = &out.dir {
            if every > 0 && trainer.step % every == 0 && trainer.step < total {
                save_checkpoint(&dir.join(format!("step_{}.clun", trainer.step)), &trainer.checkpoint())?;
                write_log(dir, &rows)?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        save_checkpoint(&dir.join("final.clun"), &trainer.checkpoint())?;
        write_log(dir, &rows)?;
    }
    Ok(rows)
}

/// Centered moving average with window `w`, used to compare early and late
/// loss levels.
pub fn smoothed(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1).min(values.len().max(1));
    values.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}
