//! Chunked causal inference with cached convolution contexts and an
//! attention key/value cache.
//!
//! Input is staged until a full bottleneck frame (`S^D` samples) is
//! available; each complete frame then runs through every layer once, reusing
//! the last `K - S` inputs of each encoder convolution and the un-emitted
//! overlap of each transposed convolution. Emitted output is always final, so
//! the concatenation of everything a stream returns equals the offline
//! forward pass on the same input.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Model};
use crate::numeric::{
    causal_attention_kernel, col2im_add, conv1d_kernel, conv_transpose_cols, dense_kernel, glu_kernel, layer_norm_kernel, relu_in_place, AttnShape,
    Real,
};

/// Algorithmic latency in input samples: one bottleneck frame.
pub fn latency_samples(config: &ModelConfig) -> usize {
    config.frame_len()
}

/// Streaming options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamOptions {
    /// Keep at most this many past bottleneck frames in the attention cache.
    /// `None` keeps all of them and matches offline inference exactly.
    pub max_context: Option<usize>,
}

/// Buffer sizes of a stream, in scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateSize {
    pub encoder_context: usize,
    pub decoder_tail: usize,
    pub staged: usize,
    /// Bottleneck frames held per attention block.
    pub kv_frames: usize,
    pub kv_values: usize,
}

impl StateSize {
    /// Everything except the attention cache; constant over a stream's life.
    pub fn fixed(&self) -> usize {
        self.encoder_context + self.decoder_tail
    }
}

struct KvCache<R> {
    k: Vec<R>,
    v: Vec<R>,
    start: usize,
}

impl<R> KvCache<R> {
    fn rows(&self, d: usize) -> usize {
        self.k.len() / d
    }
}

/// Incremental inference state bound to one model.
pub struct Stream<'m, R> {
    model: &'m Model<R>,
    opts: StreamOptions,
    enc_ctx: Vec<Vec<R>>,
    dec_tail: Vec<Vec<R>>,
    kv: Vec<KvCache<R>>,
    staged: Vec<R>,
    frames_done: usize,
    fed: usize,
    emitted: usize,
    closed: bool,
}

pub fn new_stream<R: Real>(model: &Model<R>) -> Stream<'_, R> {
    Stream::with_options(model, StreamOptions::default())
}

impl<'m, R: Real> Stream<'m, R> {
    pub fn with_options(model: &'m Model<R>, opts: StreamOptions) -> Self {
        let cfg = model.config();
        let ctx = cfg.kernel - cfg.stride;
        Self {
            model,
            opts,
            enc_ctx: model.encoder.iter().map(|l| vec![R::zero(); l.cin * ctx]).collect(),
            dec_tail: model.decoder.iter().map(|l| vec![R::zero(); l.cout * ctx]).collect(),
            kv: model.blocks.iter().map(|_| KvCache { k: Vec::new(), v: Vec::new(), start: 0 }).collect(),
            staged: Vec::new(),
            frames_done: 0,
            fed: 0,
            emitted: 0,
            closed: false,
        }
    }

    pub fn latency(&self) -> usize {
        self.model.config().frame_len()
    }

    pub fn samples_fed(&self) -> usize {
        self.fed
    }

    pub fn samples_emitted(&self) -> usize {
        self.emitted
    }

    pub fn frames_processed(&self) -> usize {
        self.frames_done
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn state_size(&self) -> StateSize {
        let d = self.model.config().d_model;
        StateSize {
            encoder_context: self.enc_ctx.iter().map(Vec::len).sum(),
            decoder_tail: self.dec_tail.iter().map(Vec::len).sum(),
            staged: self.staged.len(),
            kv_frames: self.kv.first().map_or(0, |c| c.rows(d)),
            kv_values: self.kv.iter().map(|c| c.k.len() + c.v.len()).sum(),
        }
    }

    /// Stages `chunk` and returns the output of every bottleneck frame it
    /// completes.
    pub fn feed(&mut self, chunk: &[R]) -> Result<Vec<R>> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stream input".into()));
        }
        self.fed += chunk.len();
        self.staged.extend_from_slice(chunk);
        let frame = self.latency();
        let ready = self.staged.len() / frame;
        if ready == 0 {
            return Ok(Vec::new());
        }
        let rest = self.staged.split_off(ready * frame);
        let block = std::mem::replace(&mut self.staged, rest);
        let out = self.process(&block, ready)?;
        self.emitted += out.len();
        Ok(out)
    }

    /// Zero-pads the partial frame, emits the remaining output truncated to
    /// the total input length and closes the stream.
    pub fn flush(&mut self) -> Result<Vec<R>> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        self.closed = true;
        if self.staged.is_empty() {
            return Ok(Vec::new());
        }
        let mut block = std::mem::take(&mut self.staged);
        block.resize(self.latency(), R::zero());
        let mut out = self.process(&block, 1)?;
        out.truncate(self.fed - self.emitted);
        self.emitted += out.len();
        Ok(out)
    }

    fn process(&mut self, x: &[R], frames: usize) -> Result<Vec<R>> {
        let model = self.model;
        let cfg = *model.config();
        let (k, s) = (cfg.kernel, cfg.stride);
        let ctx = k - s;

        let mut h = x.to_vec();
        let mut len = x.len();
        let mut skips = Vec::with_capacity(model.encoder.len());
        for (layer, state) in model.encoder.iter().zip(self.enc_ctx.iter_mut()) {
            let cin = layer.cin;
            let full = ctx + len;
            let mut buf = Vec::with_capacity(cin * full);
            for c in 0..cin {
                buf.extend_from_slice(&state[c * ctx..(c + 1) * ctx]);
                buf.extend_from_slice(&h[c * len..(c + 1) * len]);
            }
            for c in 0..cin {
                state[c * ctx..(c + 1) * ctx].copy_from_slice(&buf[c * full + len..(c + 1) * full]);
            }
            let out_len = len / s;
            let mut y = conv1d_kernel(&buf, cin, full, model.p(layer.conv_w), layer.cout, k, model.p(layer.conv_b), s, 0, out_len);
            relu_in_place(&mut y);
            let y = conv1d_kernel(&y, layer.cout, out_len, model.p(layer.pw_w), 2 * layer.cout, 1, model.p(layer.pw_b), 1, 0, out_len);
            h = glu_kernel(&y);
            len = out_len;
            skips.push(h.clone());
        }
        debug_assert_eq!(len, frames);

        let d = cfg.d_model;
        let mut seq = transpose(&h, d, frames);
        match self.opts.max_context {
            None => seq = self.bottleneck(seq, frames, None),
            Some(cap) => {
                let mut out = Vec::with_capacity(seq.len());
                for f in 0..frames {
                    out.extend(self.bottleneck(seq[f * d..(f + 1) * d].to_vec(), 1, Some(cap.max(1))));
                }
                seq = out;
            }
        }
        self.frames_done += frames;
        h = transpose(&seq, frames, d);

        for ((layer, skip), tail) in model.decoder.iter().zip(&skips).zip(self.dec_tail.iter_mut()).rev() {
            let (cin, cout) = (layer.cin, layer.cout);
            for (a, b) in h.iter_mut().zip(skip) {
                *a = *a + *b;
            }
            let y = conv1d_kernel(&h, cin, len, model.p(layer.pw_w), 2 * cin, 1, model.p(layer.pw_b), 1, 0, len);
            let g = glu_kernel(&y);
            let cols = conv_transpose_cols(&g, cin, len, model.p(layer.convt_w), cout, k);
            let out_len = len * s;
            let full = out_len + ctx;
            let mut buf = vec![R::zero(); cout * full];
            for c in 0..cout {
                buf[c * full..c * full + ctx].copy_from_slice(&tail[c * ctx..(c + 1) * ctx]);
            }
            col2im_add(&cols, cout, k, s, 0, len, &mut buf, full);
            let bias = model.p(layer.convt_b);
            let mut next = Vec::with_capacity(cout * out_len);
            for c in 0..cout {
                let row = &buf[c * full..(c + 1) * full];
                next.extend(row[..out_len].iter().map(|&v| v + bias[c]));
                tail[c * ctx..(c + 1) * ctx].copy_from_slice(&row[out_len..]);
            }
            if !layer.final_layer {
                relu_in_place(&mut next);
            }
            h = next;
            len = out_len;
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("stream output".into()));
        }
        Ok(h)
    }

    /// Runs every attention block on `rows` new frames `[rows, d]`.
    fn bottleneck(&mut self, mut seq: Vec<R>, rows: usize, cap: Option<usize>) -> Vec<R> {
        let model = self.model;
        let cfg = model.config();
        let d = cfg.d_model;
        // absolute index of the first new frame
        let q_start = self.kv.first().map_or(0, |c| c.start + c.rows(d));
        for (b, cache) in model.blocks.iter().zip(self.kv.iter_mut()) {
            let lin = |x: &[R], n: usize, (w, bias): (usize, usize), dout: usize| dense_kernel(x, n, model.p(w).len() / dout, model.p(w), dout, model.p(bias));
            let q = lin(&seq, rows, b.q, d);
            cache.k.extend(lin(&seq, rows, b.k, d));
            cache.v.extend(lin(&seq, rows, b.v, d));
            if let Some(cap) = cap {
                let excess = cache.rows(d).saturating_sub(cap);
                if excess > 0 {
                    cache.k.drain(..excess * d);
                    cache.v.drain(..excess * d);
                    cache.start += excess;
                }
            }
            let shape = AttnShape { nq: rows, nk: cache.rows(d), d, heads: cfg.heads, q_start, k_start: cache.start };
            let (att, _) = causal_attention_kernel(&q, &cache.k, &cache.v, shape, false);
            let att = lin(&att, rows, b.out, d);
            let mut r: Vec<R> = seq.iter().zip(&att).map(|(&a, &c)| a + c).collect();
            let (h1, _) = layer_norm_kernel(&r, d, model.p(b.ln1.0), model.p(b.ln1.1));
            let mut ff = lin(&h1, rows, b.ff1, cfg.d_ff);
            relu_in_place(&mut ff);
            let ff = lin(&ff, rows, b.ff2, d);
            r.clear();
            r.extend(h1.iter().zip(&ff).map(|(&a, &c)| a + c));
            seq = layer_norm_kernel(&r, d, model.p(b.ln2.0), model.p(b.ln2.1)).0;
        }
        seq
    }
}

fn transpose<R: Copy>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| x[r * cols + c]));
    }
    out
}

/// Streams `x` through a fresh state in chunks of `chunk` samples.
pub fn stream_all<R: Real>(model: &Model<R>, x: &[R], chunk: usize) -> Result<Vec<R>> {
    let mut st = new_stream(model);
    let mut out = Vec::with_capacity(x.len());
    for piece in x.chunks(chunk.max(1)) {
        out.extend(st.feed(piece)?);
    }
    out.extend(st.flush()?);
    Ok(out)
}
