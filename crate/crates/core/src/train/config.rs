use std::fmt;

use crate::dsp::StftResolution;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::loss::{LossMode, MstftConfig};
use crate::model::ModelConfig;

/// Optimizer, schedule, data and loss settings for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    /// Training clip length range in seconds; fixed when both ends agree.
    pub clip_seconds: (f64, f64),
    pub loss_mode: LossMode,
    pub mstft: MstftConfig,
    /// Weight of the multi-resolution STFT term.
    pub stft_weight: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub remix: bool,
    /// Maximum masked band fraction; 0 disables BandMask.
    pub bandmask: f64,
    /// Per-item probability of RevEcho; 0 disables.
    pub revecho: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 2e-4,
            warmup_ratio: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            total_iters: 1000,
            clip_seconds: (1.0, 1.0),
            loss_mode: LossMode::L1Full,
            mstft: MstftConfig::default(),
            stft_weight: 0.5,
            seed: 0,
            checkpoint_every: 0,
            remix: false,
            bandmask: 0.0,
            revecho: 0.0,
        }
    }
}

const KEYS: &[&str] = &[
    "lr_max",
    "warmup_ratio",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "total_iters",
    "clip_seconds",
    "clip_seconds_max",
    "loss_mode",
    "resolutions",
    "stft_eps",
    "log_norm",
    "stft_weight",
    "seed",
    "checkpoint_every",
    "remix",
    "bandmask",
    "revecho",
];

const MODEL_KEYS: &[&str] = &["depth", "hidden", "kernel", "stride", "blocks", "heads", "d_model", "d_ff", "c_max"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open_unit("warmup_ratio", self.warmup_ratio)?;
        open_unit("beta1", self.beta1)?;
        open_unit("beta2", self.beta2)?;
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return Err(Error::Config("batch_size and total_iters must be positive".into()));
        }
        let (lo, hi) = self.clip_seconds;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("clip length range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.bandmask) || !(0.0..=1.0).contains(&self.revecho) {
            return Err(Error::Config("bandmask and revecho must lie in [0, 1]".into()));
        }
        if !(self.stft_weight >= 0.0) {
            return Err(Error::Config("stft_weight must be non-negative".into()));
        }
        self.mstft.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("lr_max", self.lr_max);
        kv.insert("warmup_ratio", self.warmup_ratio);
        kv.insert("beta1", self.beta1);
        kv.insert("beta2", self.beta2);
        kv.insert("adam_eps", self.adam_eps);
        kv.insert("batch_size", self.batch_size);
        kv.insert("total_iters", self.total_iters);
        kv.insert("clip_seconds", self.clip_seconds.0);
        kv.insert("clip_seconds_max", self.clip_seconds.1);
        kv.insert("loss_mode", self.loss_mode);
        let res: Vec<String> = self.mstft.resolutions.iter().map(|r| r.to_string()).collect();
        kv.insert("resolutions", res.join(","));
        kv.insert("stft_eps", self.mstft.eps);
        kv.insert("log_norm", self.mstft.log_norm);
        kv.insert("stft_weight", self.stft_weight);
        kv.insert("seed", self.seed);
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv.insert("remix", self.remix);
        kv.insert("bandmask", self.bandmask);
        kv.insert("revecho", self.revecho);
        kv
    }

    /// Missing keys take their defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let clip: f64 = kv.get_or("clip_seconds", d.clip_seconds.0)?;
        let mstft = MstftConfig {
            resolutions: match kv.raw("resolutions") {
                Some(text) => text.split(',').map(|r| r.parse::<StftResolution>().map_err(|e| Error::Config(e.to_string()))).collect::<Result<_>>()?,
                None => d.mstft.resolutions.clone(),
            },
            eps: kv.get_or("stft_eps", d.mstft.eps)?,
            log_norm: kv.get_or("log_norm", d.mstft.log_norm)?,
            ..d.mstft.clone()
        };
        let cfg = Self {
            lr_max: kv.get_or("lr_max", d.lr_max)?,
            warmup_ratio: kv.get_or("warmup_ratio", d.warmup_ratio)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            adam_eps: kv.get_or("adam_eps", d.adam_eps)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            total_iters: kv.get_or("total_iters", d.total_iters)?,
            clip_seconds: (clip, kv.get_or("clip_seconds_max", clip)?),
            loss_mode: kv.get_or("loss_mode", d.loss_mode)?,
            mstft,
            stft_weight: kv.get_or("stft_weight", d.stft_weight)?,
            seed: kv.get_or("seed", d.seed)?,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
            remix: kv.get_or("remix", d.remix)?,
            bandmask: kv.get_or("bandmask", d.bandmask)?,
            revecho: kv.get_or("revecho", d.revecho)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv().to_text())
    }
}

/// Parses a combined model + training `key=value` file. Unknown keys are
/// rejected so typos do not silently fall back to defaults.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let kv = KvMap::parse(text)?;
    if let Some(k) = kv.keys().find(|k| !KEYS.contains(k) && !MODEL_KEYS.contains(k)) {
        return Err(Error::Config(format!("unknown key {k:?}")));
    }
    Ok((ModelConfig::from_kv(&kv)?, TrainConfig::from_kv(&kv)?))
}

pub fn run_config_text(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut kv = model.to_kv();
    kv.merge(&train.to_kv());
    kv.to_text()
}
