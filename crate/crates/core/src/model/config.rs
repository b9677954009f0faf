use std::fmt;

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Architecture hyperparameters of the denoiser.
///
/// Encoder layer `d` (1-based) emits `min(hidden * 2^(d-1), c_max)` channels,
/// and the deepest encoder output must equal `d_model` so it can feed the
/// attention bottleneck directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub stride: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub c_max: usize,
}

impl ModelConfig {
    /// Depth 8, kernel 4, stride 2, 8 heads, model dimension 512, feed-forward 2048.
    pub fn full(hidden: usize, blocks: usize) -> Self {
        Self { depth: 8, hidden, kernel: 4, stride: 2, blocks, heads: 8, d_model: 512, d_ff: 2048, c_max: 512 }
    }

    /// A small configuration whose model dimension is derived from the
    /// encoder (`hidden * 2^(depth-1)`), with `d_ff = 4 * d_model`.
    pub fn small(depth: usize, hidden: usize, kernel: usize, blocks: usize) -> Self {
        let d_model = hidden.checked_shl((depth.max(1) - 1) as u32).unwrap_or(usize::MAX);
        Self { depth, hidden, kernel, stride: kernel / 2, blocks, heads: 8, d_model, d_ff: d_model.saturating_mul(4), c_max: d_model }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad(format!("depth, hidden, heads and d_ff must be positive: {self}"));
        }
        if self.kernel < 2 || self.kernel % 2 != 0 || self.stride * 2 != self.kernel {
            return bad(format!("stride must equal kernel/2 with an even kernel, got K={} S={}", self.kernel, self.stride));
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        let top = self.hidden.checked_shl((self.depth - 1) as u32).filter(|&v| v >> (self.depth - 1) == self.hidden).unwrap_or(usize::MAX);
        if top.min(self.c_max) != self.d_model {
            return bad(format!(
                "deepest encoder width min(hidden*2^(depth-1), c_max) = {} must equal d_model {}",
                top.min(self.c_max),
                self.d_model
            ));
        }
        self.frame_len_checked().map(|_| ())
    }

    fn frame_len_checked(&self) -> Result<usize> {
        self.stride
            .checked_pow(self.depth as u32)
            .ok_or_else(|| Error::Config(format!("stride^depth overflows for S={} D={}", self.stride, self.depth)))
    }

    /// Input samples per bottleneck frame, `stride^depth`.
    pub fn frame_len(&self) -> usize {
        self.stride.pow(self.depth as u32)
    }

    /// Channel count at encoder level `level` (0 is the waveform, 1 channel).
    pub fn channels(&self, level: usize) -> usize {
        if level == 0 {
            return 1;
        }
        let shift = (level - 1) as u32;
        match self.hidden.checked_shl(shift) {
            Some(v) if v >> shift == self.hidden => v.min(self.c_max),
            _ => self.c_max,
        }
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(&self) -> usize {
        let k = self.kernel;
        let mut total = 0;
        for level in 1..=self.depth {
            let (cin, c) = (self.channels(level - 1), self.channels(level));
            let pointwise = c * 2 * c + 2 * c;
            total += cin * c * k + c + pointwise; // encoder
            total += pointwise + c * cin * k + cin; // decoder
        }
        total + self.blocks * self.block_param_count()
    }

    /// Parameters of one attention block; independent of depth, hidden and kernel.
    pub fn block_param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("depth", self.depth);
        kv.insert("hidden", self.hidden);
        kv.insert("kernel", self.kernel);
        kv.insert("stride", self.stride);
        kv.insert("blocks", self.blocks);
        kv.insert("heads", self.heads);
        kv.insert("d_model", self.d_model);
        kv.insert("d_ff", self.d_ff);
        kv.insert("c_max", self.c_max);
        kv
    }

    /// Reads a config; missing `stride`, `d_model`, `d_ff`, `c_max` and `heads`
    /// default to the values [`ModelConfig::small`] would derive.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let depth = kv.require("depth")?;
        let hidden = kv.require("hidden")?;
        let kernel = kv.require("kernel")?;
        let blocks = kv.require("blocks")?;
        let derived = Self::small(depth, hidden, kernel, blocks);
        let d_model = kv.get_or("d_model", derived.d_model.min(512))?;
        let cfg = Self {
            depth,
            hidden,
            kernel,
            stride: kv.get_or("stride", kernel / 2)?,
            blocks,
            heads: kv.get_or("heads", 8)?,
            d_model,
            d_ff: kv.get_or("d_ff", 4 * d_model)?,
            c_max: kv.get_or("c_max", d_model)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "D={} H={} K={} S={} N={} heads={} d_model={} d_ff={} c_max={}",
            self.depth, self.hidden, self.kernel, self.stride, self.blocks, self.heads, self.d_model, self.d_ff, self.c_max
        )
    }
}
