//! The causal U-Net denoiser.
//!
//! ```text
//! x ─ pad to k*S^D ─ enc 1 ─ enc 2 ─ … ─ enc D ─ N attention blocks ─┐
//!                      │       │            │                        │
//!                      │       │            └──────── + ─ dec D ──────┘
//!                      │       └──────────────── + ─ dec 2
//!                      └─────────────────── + ─ dec 1 ─ truncate ─ x̂
//! ```
//!
//! Encoder layer: causal strided conv, ReLU, 1x1 conv doubling channels, GLU.
//! Decoder layer: identity skip added to the input, 1x1 conv, GLU, causal
//! transposed conv, ReLU on every layer but the last. Attention blocks are
//! post-norm: `ln(h + attn(h))` then `ln(h + ff(h))`, with a strictly causal
//! mask and no positional encoding.

mod config;

pub use config::ModelConfig;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Graph, Parameter, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub conv_w: usize,
    pub conv_b: usize,
    pub pw_w: usize,
    pub pw_b: usize,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub pw_w: usize,
    pub pw_b: usize,
    pub convt_w: usize,
    pub convt_b: usize,
    /// Channels entering (and added by the skip), equal to the paired encoder output.
    pub cin: usize,
    pub cout: usize,
    pub final_layer: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionBlock {
    pub q: (usize, usize),
    pub k: (usize, usize),
    pub v: (usize, usize),
    pub out: (usize, usize),
    pub ln1: (usize, usize),
    pub ff1: (usize, usize),
    pub ff2: (usize, usize),
    pub ln2: (usize, usize),
}

/// All trainable state of the denoiser plus the layer index tables.
#[derive(Clone, Debug)]
pub struct Model<R> {
    config: ModelConfig,
    params: Vec<Parameter<R>>,
    pub(crate) encoder: Vec<EncoderLayer>,
    pub(crate) blocks: Vec<AttentionBlock>,
    /// Indexed by paired encoder level (0 is paired with the first encoder layer).
    pub(crate) decoder: Vec<DecoderLayer>,
}

struct Builder<R> {
    params: Vec<Parameter<R>>,
    rng: ChaCha8Rng,
}

impl<R: Real> Builder<R> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| R::lit(rng.gen_range(-bound..bound)));
        self.params.push(Parameter::new(name, t));
        self.params.len() - 1
    }

    fn fill(&mut self, name: String, len: usize, value: f64) -> usize {
        self.params.push(Parameter::new(name, Tensor::full([len], R::lit(value))));
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> (usize, usize) {
        (self.uniform(format!("{prefix}.w"), vec![din, dout], din), self.uniform(format!("{prefix}.b"), vec![dout], din))
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> (usize, usize) {
        (self.fill(format!("{prefix}.g"), dim, 1.0), self.fill(format!("{prefix}.b"), dim, 0.0))
    }
}

impl<R: Real> Model<R> {
    /// Deterministically initializes every weight and bias uniformly in
    /// `±1/sqrt(fan_in)`; layer norms start at unit scale and zero shift.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let (k, s) = (config.kernel, config.stride);

        let mut encoder = Vec::with_capacity(config.depth);
        for level in 1..=config.depth {
            let (cin, cout) = (config.channels(level - 1), config.channels(level));
            let i = level - 1;
            encoder.push(EncoderLayer {
                conv_w: b.uniform(format!("enc.{i}.conv.w"), vec![cout, cin, k], cin * k),
                conv_b: b.uniform(format!("enc.{i}.conv.b"), vec![cout], cin * k),
                pw_w: b.uniform(format!("enc.{i}.pw.w"), vec![2 * cout, cout, 1], cout),
                pw_b: b.uniform(format!("enc.{i}.pw.b"), vec![2 * cout], cout),
                cin,
                cout,
            });
        }

        let d = config.d_model;
        let mut blocks = Vec::with_capacity(config.blocks);
        for n in 0..config.blocks {
            let p = format!("attn.{n}");
            blocks.push(AttentionBlock {
                q: b.linear(&format!("{p}.q"), d, d),
                k: b.linear(&format!("{p}.k"), d, d),
                v: b.linear(&format!("{p}.v"), d, d),
                out: b.linear(&format!("{p}.out"), d, d),
                ln1: b.norm(&format!("{p}.ln1"), d),
                ff1: b.linear(&format!("{p}.ff1"), d, config.d_ff),
                ff2: b.linear(&format!("{p}.ff2"), config.d_ff, d),
                ln2: b.norm(&format!("{p}.ln2"), d),
            });
        }

        let mut decoder = Vec::with_capacity(config.depth);
        for level in 1..=config.depth {
            let (c, cout) = (config.channels(level), config.channels(level - 1));
            let i = level - 1;
            let fan_t = (c * k / s).max(1);
            decoder.push(DecoderLayer {
                pw_w: b.uniform(format!("dec.{i}.pw.w"), vec![2 * c, c, 1], c),
                pw_b: b.uniform(format!("dec.{i}.pw.b"), vec![2 * c], c),
                convt_w: b.uniform(format!("dec.{i}.convt.w"), vec![c, cout, k], fan_t),
                convt_b: b.uniform(format!("dec.{i}.convt.b"), vec![cout], fan_t),
                cin: c,
                cout,
                final_layer: level == 1,
            });
        }

        Ok(Self { config, params: b.params, encoder, blocks, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<R>] {
        &mut self.params
    }

    pub(crate) fn p(&self, i: usize) -> &[R] {
        self.params[i].value().data()
    }

    /// Number of scalar parameters, summed over the named tensors.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value().numel()).sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Same architecture and values at another precision.
    pub fn cast<Q: Real>(&self) -> Model<Q> {
        Model {
            config: self.config,
            params: self.params.iter().map(|p| Parameter::new(p.name(), p.value().cast())).collect(),
            encoder: self.encoder.clone(),
            blocks: self.blocks.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Lifts every parameter into `g`; tracked leaves when `trainable`.
    pub fn bind(&self, g: &Graph<R>, trainable: bool) -> Vec<Var<R>> {
        self.params
            .iter()
            .map(|p| if trainable { g.leaf_arc(p.value_arc().clone()) } else { g.constant_arc(p.value_arc().clone()) })
            .collect()
    }

    /// Denoises `x[1, T]` without recording gradients.
    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let g = Graph::no_grad();
        let vars = self.bind(&g, false);
        let y = self.forward_graph(&g, &vars, &g.constant(x.clone()))?;
        Ok(y.into_tensor())
    }

    /// Forward pass on a graph with parameters bound by [`Model::bind`].
    pub fn forward_graph(&self, g: &Graph<R>, p: &[Var<R>], x: &Var<R>) -> Result<Var<R>> {
        if x.shape().len() != 2 || x.shape()[0] != 1 {
            return Err(shape_err!("model input must be [1, T], got {:?}", x.shape()));
        }
        if p.len() != self.params.len() {
            return Err(shape_err!("{} bound parameters for a model with {}", p.len(), self.params.len()));
        }
        let len = x.shape()[1];
        let frame = self.config.frame_len();
        let padded = len.div_ceil(frame) * frame;
        let s = self.config.stride;

        let mut h = g.pad_last(x, padded)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            h = g.conv1d_causal(&h, &p[layer.conv_w], &p[layer.conv_b], s)?;
            h = g.relu(&h);
            h = g.conv1d_causal(&h, &p[layer.pw_w], &p[layer.pw_b], 1)?;
            h = g.glu(&h)?;
            skips.push(h.clone());
        }

        let mut seq = g.transpose2d(&h)?;
        for block in &self.blocks {
            seq = self.attention_block_graph(g, p, block, &seq)?;
        }
        h = g.transpose2d(&seq)?;

        for (layer, skip) in self.decoder.iter().zip(&skips).rev() {
            h = g.add(&h, skip)?;
            h = g.conv1d_causal(&h, &p[layer.pw_w], &p[layer.pw_b], 1)?;
            h = g.glu(&h)?;
            h = g.conv_transpose1d_causal(&h, &p[layer.convt_w], &p[layer.convt_b], s)?;
            if !layer.final_layer {
                h = g.relu(&h);
            }
        }
        let y = g.narrow(&h, 1, 0, len)?;
        if !y.value().is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(y)
    }

    fn attention_block_graph(&self, g: &Graph<R>, p: &[Var<R>], b: &AttentionBlock, h: &Var<R>) -> Result<Var<R>> {
        let lin = |x: &Var<R>, (w, bias): (usize, usize)| g.dense(x, &p[w], &p[bias]);
        let q = lin(h, b.q)?;
        let k = lin(h, b.k)?;
        let v = lin(h, b.v)?;
        let att = g.causal_attention(&q, &k, &v, self.config.heads)?;
        let att = lin(&att, b.out)?;
        let h1 = g.layer_norm(&g.add(h, &att)?, &p[b.ln1.0], &p[b.ln1.1])?;
        let ff = lin(&g.relu(&lin(&h1, b.ff1)?), b.ff2)?;
        g.layer_norm(&g.add(&h1, &ff)?, &p[b.ln2.0], &p[b.ln2.1])
    }

    /// Applies one attention block to `[frames, d_model]` without recording.
    pub fn attention_block(&self, index: usize, h: &Tensor<R>) -> Result<Tensor<R>> {
        let block = self.blocks.get(index).ok_or_else(|| Error::InvalidArgument(format!("no attention block {index}")))?;
        let g = Graph::no_grad();
        let vars = self.bind(&g, false);
        Ok(self.attention_block_graph(&g, &vars, block, &g.constant(h.clone()))?.into_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::testing::rand_tensor;

    fn tiny() -> ModelConfig {
        ModelConfig { depth: 2, hidden: 4, kernel: 4, stride: 2, blocks: 1, heads: 8, d_model: 8, d_ff: 32, c_max: 8 }
    }

    #[test]
    fn channel_progressions() {
        let c = ModelConfig::full(64, 5);
        assert_eq!((1..=8).map(|d| c.channels(d)).collect::<Vec<_>>(), [64, 128, 256, 512, 512, 512, 512, 512]);
        let c = ModelConfig::full(48, 5);
        assert_eq!((1..=8).map(|d| c.channels(d)).collect::<Vec<_>>(), [48, 96, 192, 384, 512, 512, 512, 512]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::full(64, 5).validate().is_ok());
        let mut c = ModelConfig::full(64, 5);
        c.stride = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::full(2, 5); // 2*128 < 512
        assert!(c.validate().is_err());
        c.hidden = 4;
        assert!(c.validate().is_ok());
        let mut c = ModelConfig::full(64, 5);
        c.heads = 7;
        assert!(c.validate().is_err());
        assert!(Model::<f32>::build(ModelConfig::full(2, 1), 0).is_err());
    }

    #[test]
    fn tiny_param_count_by_hand() {
        let c = ModelConfig { depth: 1, hidden: 2, kernel: 4, stride: 2, blocks: 0, heads: 1, d_model: 2, d_ff: 8, c_max: 2 };
        assert_eq!(c.param_count(), 43);
        assert_eq!(Model::<f32>::build(c, 0).unwrap().num_params(), 43);
    }

    #[test]
    fn block_count_is_structural() {
        let a = Model::<f32>::build(ModelConfig::small(3, 4, 4, 1), 0).unwrap();
        let b = Model::<f32>::build(ModelConfig::small(3, 4, 4, 2), 0).unwrap();
        let c = ModelConfig::small(3, 4, 4, 1);
        assert_eq!(b.num_params() - a.num_params(), c.block_param_count());
        let other = ModelConfig { depth: 2, hidden: 8, kernel: 6, stride: 3, ..c };
        assert_eq!(other.block_param_count(), c.block_param_count());
        assert_eq!(a.num_params(), c.param_count());
    }

    #[test]
    fn names_unique_and_build_deterministic() {
        let a = Model::<f32>::build(tiny(), 7).unwrap();
        let b = Model::<f32>::build(tiny(), 7).unwrap();
        let mut names: Vec<_> = a.param_names().collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.name(), q.name());
            assert_eq!(p.value().data(), q.value().data());
        }
        assert!(a.param_names().any(|n| n == "enc.1.conv.w"));
    }

    #[test]
    fn shape_contract_and_determinism() {
        let m = Model::<f32>::build(tiny(), 1).unwrap();
        for t in [1, 3, 4, 37, 64] {
            let x = Tensor::from_fn([1, t], |i| ((i * 7919) % 13) as f32 / 13.0 - 0.5);
            let y = m.forward(&x).unwrap();
            assert_eq!(y.shape(), &[1, t]);
            assert_eq!(y, m.forward(&x).unwrap());
        }
        assert!(m.forward(&Tensor::zeros([2, 4])).is_err());
    }

    #[test]
    fn causal_at_frame_horizon() {
        let m = Model::<f64>::build(tiny(), 3).unwrap();
        let x = rand_tensor(&[1, 64], 5);
        let base = m.forward(&x).unwrap();
        let frame = 4;
        for p in [0, 1, 5, 17, 40, 63] {
            let mut y = x.clone();
            y.data_mut()[p] += 0.75;
            let out = m.forward(&y).unwrap();
            let keep = p / frame * frame;
            assert_eq!(&out.data()[..keep], &base.data()[..keep], "perturbation at {p}");
        }
    }

    #[test]
    fn attention_block_passes_single_frame_and_checks_index() {
        let m = Model::<f64>::build(tiny(), 4).unwrap();
        let h = rand_tensor(&[1, 8], 6);
        let y = m.attention_block(0, &h).unwrap();
        assert_eq!(y.shape(), &[1, 8]);
        assert!(m.attention_block(1, &h).is_err());
    }
}
