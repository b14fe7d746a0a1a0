//! The shared transformer backbone.
//!
//! One parameter set serves both generation paths: text autoregression runs
//! it under a causal mask, latent diffusion under the hybrid mask. The blocks
//! follow the LLaMA convention: pre-RMS-normalization, multi-head attention,
//! and a gated (SiLU) feed-forward, all without biases. Forward passes record
//! a trace of intermediate activations so the hand-written reverse pass can
//! consume them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::masking::{softmax_biased_row, AttentionMask};
use crate::real::{silu, silu_grad, Real};
use crate::rng;

/// Width of the raw sinusoidal timestep features before the MLP.
pub const TIME_FREQ_DIM: usize = 256;

/// Standard deviation for normally initialized weight tensors.
pub const INIT_STD: f64 = 0.02;

const RMS_EPS: f64 = 1e-5;

/// Whether image-latent positions attend bidirectionally (the default) or
/// causally (ablation variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentAttention {
    #[default]
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Number of transformer blocks. Zero is permitted and degenerates to
    /// the final normalization alone.
    pub depth: usize,
    /// Embedding width d.
    pub model_dim: usize,
    pub num_heads: usize,
    /// Hidden width of the gated feed-forward.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Width of one patchified latent token entering/leaving the model.
    pub latent_token_width: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0
            || self.num_heads == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
            || self.latent_token_width == 0
        {
            return Err(Error::Config("transformer dimensions must be >= 1".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config(
                "model_dim must be even for sine-cosine positions".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Position-wise hidden states, one row per sequence position.
pub type HiddenStates<T> = Mat<T>;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm_gain: Mat<T>, // 1 x d
    pub wq: Mat<T>,             // d x d
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ffn_norm_gain: Mat<T>, // 1 x d
    pub w_gate: Mat<T>,        // d x ffn
    pub w_up: Mat<T>,          // d x ffn
    pub w_down: Mat<T>,        // ffn x d
}

/// Every learnable tensor of the model: the shared backbone plus both heads
/// and the diffusion-side conditioning machinery. There is exactly one copy
/// of the backbone; both generation paths borrow it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: TransformerConfig,
    pub token_embedding: Mat<T>,     // vocab x d
    pub null_cond_embedding: Mat<T>, // 1 x d, stands in for dropped text
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gain: Mat<T>, // 1 x d
    pub ar_head: Mat<T>,         // d x vocab, no bias
    pub latent_proj: Mat<T>,     // token_width x d, zero-initialized
    pub time_w1: Mat<T>,         // TIME_FREQ_DIM x d, zero-initialized
    pub time_b1: Mat<T>,         // 1 x d
    pub time_w2: Mat<T>,         // d x d, zero-initialized
    pub time_b2: Mat<T>,         // 1 x d
    pub adaln_gamma: Mat<T>,     // d x d
    pub adaln_beta: Mat<T>,      // d x d
    pub head_w1: Mat<T>,         // d x d
    pub head_b1: Mat<T>,         // 1 x d
    pub head_w2: Mat<T>,         // d x token_width
    pub head_b2: Mat<T>,         // 1 x token_width
    /// Bumped on every optimizer update; lets tests observe that both paths
    /// see the same evolving weights.
    pub version: u64,
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters. Projection weights are N(0, 0.02), normalization
    /// gains are 1, and the latent input projection and timestep MLP are
    /// zero-initialized.
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut r = rng::substream(seed, 0x7061_7261); // params stream
        let mut ones = Mat::zeros(1, d);
        ones.fill(T::ONE);

        let token_embedding = rng::normal_mat(config.vocab_size, d, INIT_STD, &mut r);
        let null_cond_embedding = rng::normal_mat(1, d, INIT_STD, &mut r);
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            layers.push(LayerParams {
                attn_norm_gain: ones.clone(),
                wq: rng::normal_mat(d, d, INIT_STD, &mut r),
                wk: rng::normal_mat(d, d, INIT_STD, &mut r),
                wv: rng::normal_mat(d, d, INIT_STD, &mut r),
                wo: rng::normal_mat(d, d, INIT_STD, &mut r),
                ffn_norm_gain: ones.clone(),
                w_gate: rng::normal_mat(d, config.ffn_dim, INIT_STD, &mut r),
                w_up: rng::normal_mat(d, config.ffn_dim, INIT_STD, &mut r),
                w_down: rng::normal_mat(config.ffn_dim, d, INIT_STD, &mut r),
            });
        }
        Ok(Self {
            config: config.clone(),
            token_embedding,
            null_cond_embedding,
            layers,
            final_norm_gain: ones.clone(),
            ar_head: rng::normal_mat(d, config.vocab_size, INIT_STD, &mut r),
            latent_proj: Mat::zeros(config.latent_token_width, d),
            time_w1: Mat::zeros(TIME_FREQ_DIM, d),
            time_b1: Mat::zeros(1, d),
            time_w2: Mat::zeros(d, d),
            time_b2: Mat::zeros(1, d),
            adaln_gamma: rng::normal_mat(d, d, INIT_STD, &mut r),
            adaln_beta: rng::normal_mat(d, d, INIT_STD, &mut r),
            head_w1: rng::normal_mat(d, d, INIT_STD, &mut r),
            head_b1: Mat::zeros(1, d),
            head_w2: rng::normal_mat(d, config.latent_token_width, INIT_STD, &mut r),
            head_b2: Mat::zeros(1, config.latent_token_width),
            version: 0,
        })
    }

    /// Same shapes as `self`, every tensor zero. Used for gradients and
    /// optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.named_tensors_mut() {
            t.fill(T::ZERO);
        }
        out.version = 0;
        out
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            null_cond_embedding: self.null_cond_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm_gain: l.attn_norm_gain.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm_gain: l.ffn_norm_gain.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm_gain: self.final_norm_gain.cast(),
            ar_head: self.ar_head.cast(),
            latent_proj: self.latent_proj.cast(),
            time_w1: self.time_w1.cast(),
            time_b1: self.time_b1.cast(),
            time_w2: self.time_w2.cast(),
            time_b2: self.time_b2.cast(),
            adaln_gamma: self.adaln_gamma.cast(),
            adaln_beta: self.adaln_beta.cast(),
            head_w1: self.head_w1.cast(),
            head_b1: self.head_b1.cast(),
            head_w2: self.head_w2.cast(),
            head_b2: self.head_b2.cast(),
            version: self.version,
        }
    }

    /// Deterministically ordered (name, tensor) pairs covering every
    /// learnable tensor. Checkpointing, the optimizer, EMA and the gradient
    /// checker all iterate this list.
    pub fn named_tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out: Vec<(String, &Mat<T>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("null_cond_embedding".into(), &self.null_cond_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm_gain"), &l.attn_norm_gain));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm_gain"), &l.ffn_norm_gain));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out.push(("ar_head".into(), &self.ar_head));
        out.push(("latent_proj".into(), &self.latent_proj));
        out.push(("time_w1".into(), &self.time_w1));
        out.push(("time_b1".into(), &self.time_b1));
        out.push(("time_w2".into(), &self.time_w2));
        out.push(("time_b2".into(), &self.time_b2));
        out.push(("adaln_gamma".into(), &self.adaln_gamma));
        out.push(("adaln_beta".into(), &self.adaln_beta));
        out.push(("head_w1".into(), &self.head_w1));
        out.push(("head_b1".into(), &self.head_b1));
        out.push(("head_w2".into(), &self.head_w2));
        out.push(("head_b2".into(), &self.head_b2));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out: Vec<(String, &mut Mat<T>)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("null_cond_embedding".into(), &mut self.null_cond_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm_gain"), &mut l.attn_norm_gain));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn_norm_gain"), &mut l.ffn_norm_gain));
            out.push((format!("layers.{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layers.{i}.w_up"), &mut l.w_up));
            out.push((format!("layers.{i}.w_down"), &mut l.w_down));
        }
        out.push(("final_norm_gain".into(), &mut self.final_norm_gain));
        out.push(("ar_head".into(), &mut self.ar_head));
        out.push(("latent_proj".into(), &mut self.latent_proj));
        out.push(("time_w1".into(), &mut self.time_w1));
        out.push(("time_b1".into(), &mut self.time_b1));
        out.push(("time_w2".into(), &mut self.time_w2));
        out.push(("time_b2".into(), &mut self.time_b2));
        out.push(("adaln_gamma".into(), &mut self.adaln_gamma));
        out.push(("adaln_beta".into(), &mut self.adaln_beta));
        out.push(("head_w1".into(), &mut self.head_w1));
        out.push(("head_b1".into(), &mut self.head_b1));
        out.push(("head_w2".into(), &mut self.head_w2));
        out.push(("head_b2".into(), &mut self.head_b2));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_all_finite())
    }
}

/// Row i is the embedding-table row for `tokens[i]`.
pub fn embed_tokens<T: Real>(tokens: &[u32], params: &ModelParams<T>) -> Result<Mat<T>> {
    let d = params.config.model_dim;
    let mut out = Mat::zeros(tokens.len(), d);
    for (i, &id) in tokens.iter().enumerate() {
        if id as usize >= params.config.vocab_size {
            return Err(Error::invalid(format!(
                "token id {id} out of range (vocab {})",
                params.config.vocab_size
            )));
        }
        out.row_mut(i)
            .copy_from_slice(params.token_embedding.row(id as usize));
    }
    Ok(out)
}

/// Interleaved sine-cosine positional table:
/// entry (pos, 2i) = sin(pos / 10000^(2i/d)), entry (pos, 2i+1) = cos(same).
pub fn sincos_positional_embedding<T: Real>(n: usize, d: usize) -> Result<Mat<T>> {
    if d % 2 != 0 {
        return Err(Error::invalid("sine-cosine embedding needs even width"));
    }
    let mut out = Mat::zeros(n, d);
    for pos in 0..n {
        let row = out.row_mut(pos);
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            row[2 * i] = T::from_f64(angle.sin());
            row[2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forward pass with activation trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct BlockTrace<T> {
    x_in: Mat<T>,
    inv_rms1: Vec<T>,
    h1: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>, // one n x n matrix per head
    attn_concat: Mat<T>,
    x_mid: Mat<T>, // after the attention residual, before the FFN
    inv_rms2: Vec<T>,
    h2: Mat<T>,
    gate: Mat<T>,
    up: Mat<T>,
    act: Mat<T>,
    x_out: Mat<T>, // block output
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    final_in: Mat<T>,
    final_inv_rms: Vec<T>,
    pub output: Mat<T>,
}

fn rms_norm<T: Real>(x: &Mat<T>, gain: &Mat<T>) -> (Mat<T>, Vec<T>) {
    let (n, d) = x.shape();
    let eps = T::from_f64(RMS_EPS);
    let inv_d = T::ONE / T::from_usize(d);
    let mut out = Mat::zeros(n, d);
    let mut inv_rms = Vec::with_capacity(n);
    let g = gain.row(0);
    for i in 0..n {
        let row = x.row(i);
        let mut ms = T::ZERO;
        for &v in row {
            ms += v * v;
        }
        let r = T::ONE / (ms * inv_d + eps).sqrt();
        inv_rms.push(r);
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = row[j] * r * g[j];
        }
    }
    (out, inv_rms)
}

/// Backward through `y = x * inv_rms(x) * gain`. Accumulates the gain
/// gradient and returns dL/dx.
fn rms_norm_backward<T: Real>(
    x: &Mat<T>,
    inv_rms: &[T],
    gain: &Mat<T>,
    d_out: &Mat<T>,
    d_gain: &mut Mat<T>,
) -> Mat<T> {
    let (n, d) = x.shape();
    let inv_d = T::ONE / T::from_usize(d);
    let mut dx = Mat::zeros(n, d);
    let g = gain.row(0);
    for i in 0..n {
        let r = inv_rms[i];
        let xr = x.row(i);
        let dy = d_out.row(i);
        let dg = d_gain.row_mut(0);
        let mut s = T::ZERO;
        for j in 0..d {
            dg[j] += dy[j] * xr[j] * r;
            s += dy[j] * g[j] * xr[j];
        }
        let coeff = r * r * r * inv_d * s;
        let dxr = dx.row_mut(i);
        for j in 0..d {
            dxr[j] = r * g[j] * dy[j] - xr[j] * coeff;
        }
    }
    dx
}

fn block_forward<T: Real>(
    x: &Mat<T>,
    mask: &AttentionMask,
    layer: &LayerParams<T>,
    num_heads: usize,
) -> BlockTrace<T> {
    let (n, d) = x.shape();
    let head_dim = d / num_heads;
    let scale = T::ONE / T::from_usize(head_dim).sqrt();

    let (h1, inv_rms1) = rms_norm(x, &layer.attn_norm_gain);
    let q = h1.matmul(&layer.wq);
    let k = h1.matmul(&layer.wk);
    let v = h1.matmul(&layer.wv);

    let mut attn_concat = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = q.col_band(h * head_dim, head_dim);
        let kh = k.col_band(h * head_dim, head_dim);
        let vh = v.col_band(h * head_dim, head_dim);
        let mut scores = qh.matmul_bt(&kh);
        scores.scale(scale);
        for i in 0..n {
            softmax_biased_row(scores.row_mut(i), mask.bias_row(i));
        }
        let out_h = scores.matmul(&vh);
        attn_concat.add_col_band(&out_h, h * head_dim);
        probs.push(scores);
    }

    let o = attn_concat.matmul(&layer.wo);
    let mut x_mid = x.clone();
    x_mid.add_assign(&o);

    let (h2, inv_rms2) = rms_norm(&x_mid, &layer.ffn_norm_gain);
    let gate = h2.matmul(&layer.w_gate);
    let up = h2.matmul(&layer.w_up);
    let mut act = Mat::zeros(n, gate.cols());
    for (a, (&g, &u)) in act
        .as_mut_slice()
        .iter_mut()
        .zip(gate.as_slice().iter().zip(up.as_slice()))
    {
        *a = silu(g) * u;
    }
    let down = act.matmul(&layer.w_down);
    let mut x_out = x_mid.clone();
    x_out.add_assign(&down);

    BlockTrace {
        x_in: x.clone(),
        inv_rms1,
        h1,
        q,
        k,
        v,
        probs,
        attn_concat,
        x_mid,
        inv_rms2,
        h2,
        gate,
        up,
        act,
        x_out,
    }
}

/// Forward pass keeping every intermediate needed by the reverse pass.
pub fn transformer_forward_traced<T: Real>(
    input: &HiddenStates<T>,
    mask: &AttentionMask,
    params: &ModelParams<T>,
) -> Result<ForwardTrace<T>> {
    let (n, d) = input.shape();
    if d != params.config.model_dim {
        return Err(Error::invalid(format!(
            "input width {d} does not match model_dim {}",
            params.config.model_dim
        )));
    }
    if mask.n() != n {
        return Err(Error::invalid(format!(
            "mask size {} does not match sequence length {n}",
            mask.n()
        )));
    }
    if n > params.config.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence length {n} exceeds max_seq_len {}",
            params.config.max_seq_len
        )));
    }

    let mut blocks = Vec::with_capacity(params.config.depth);
    let mut x = input.clone();
    for layer in &params.layers {
        let trace = block_forward(&x, mask, layer, params.config.num_heads);
        x = trace.x_out.clone();
        blocks.push(trace);
    }
    let (output, final_inv_rms) = rms_norm(&x, &params.final_norm_gain);
    Ok(ForwardTrace {
        blocks,
        final_in: x,
        final_inv_rms,
        output,
    })
}

/// `transformer(input, mask; params)`: depth blocks of pre-norm attention and
/// feed-forward, then a final normalization. Output shape equals input shape.
pub fn transformer_forward<T: Real>(
    input: &HiddenStates<T>,
    mask: &AttentionMask,
    params: &ModelParams<T>,
) -> Result<HiddenStates<T>> {
    Ok(transformer_forward_traced(input, mask, params)?.output)
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

fn block_backward<T: Real>(
    trace: &BlockTrace<T>,
    d_out: &Mat<T>,
    layer: &LayerParams<T>,
    grads: &mut LayerParams<T>,
    num_heads: usize,
) -> Mat<T> {
    let (n, d) = trace.x_in.shape();
    let head_dim = d / num_heads;
    let scale = T::ONE / T::from_usize(head_dim).sqrt();

    // FFN branch. x_out = x_mid + down, so d_out feeds both the residual
    // stream and the FFN stack.
    let mut d_act = d_out.matmul_bt(&layer.w_down);
    trace.act.matmul_at_acc(d_out, &mut grads.w_down);

    let mut d_gate = Mat::zeros(n, trace.gate.cols());
    for idx in 0..d_act.len() {
        let g = trace.gate.as_slice()[idx];
        let u = trace.up.as_slice()[idx];
        let da = d_act.as_slice()[idx];
        d_gate.as_mut_slice()[idx] = da * u * silu_grad(g);
        d_act.as_mut_slice()[idx] = da * silu(g); // now holds d_up
    }
    let d_up = d_act;

    trace.h2.matmul_at_acc(&d_gate, &mut grads.w_gate);
    trace.h2.matmul_at_acc(&d_up, &mut grads.w_up);
    let mut d_h2 = d_gate.matmul_bt(&layer.w_gate);
    d_h2.add_assign(&d_up.matmul_bt(&layer.w_up));

    let mut d_x_mid = rms_norm_backward(
        &trace.x_mid,
        &trace.inv_rms2,
        &layer.ffn_norm_gain,
        &d_h2,
        &mut grads.ffn_norm_gain,
    );
    d_x_mid.add_assign(d_out); // residual path around the FFN

    // Attention branch. x_mid = x_in + attn_concat · wo.
    trace.attn_concat.matmul_at_acc(&d_x_mid, &mut grads.wo);
    let d_attn_concat = d_x_mid.matmul_bt(&layer.wo);

    let mut d_q = Mat::zeros(n, d);
    let mut d_k = Mat::zeros(n, d);
    let mut d_v = Mat::zeros(n, d);
    for h in 0..num_heads {
        let start = h * head_dim;
        let d_out_h = d_attn_concat.col_band(start, head_dim);
        let probs = &trace.probs[h];
        let kh = trace.k.col_band(start, head_dim);
        let qh = trace.q.col_band(start, head_dim);
        let vh = trace.v.col_band(start, head_dim);

        let mut d_vh = Mat::zeros(n, head_dim);
        probs.matmul_at_acc(&d_out_h, &mut d_vh);
        let d_probs = d_out_h.matmul_bt(&vh);

        // softmax backward row-wise: dS = P ⊙ (dP − <P, dP>)
        let mut d_scores = Mat::zeros(n, n);
        for i in 0..n {
            let p = probs.row(i);
            let dp = d_probs.row(i);
            let mut dot = T::ZERO;
            for j in 0..n {
                dot += p[j] * dp[j];
            }
            let ds = d_scores.row_mut(i);
            for j in 0..n {
                ds[j] = p[j] * (dp[j] - dot);
            }
        }

        let mut d_qh = d_scores.matmul(&kh);
        d_qh.scale(scale);
        let mut d_kh = Mat::zeros(n, head_dim);
        d_scores.matmul_at_acc(&qh, &mut d_kh);
        d_kh.scale(scale);

        d_q.add_col_band(&d_qh, start);
        d_k.add_col_band(&d_kh, start);
        d_v.add_col_band(&d_vh, start);
    }

    trace.h1.matmul_at_acc(&d_q, &mut grads.wq);
    trace.h1.matmul_at_acc(&d_k, &mut grads.wk);
    trace.h1.matmul_at_acc(&d_v, &mut grads.wv);

    let mut d_h1 = d_q.matmul_bt(&layer.wq);
    d_h1.add_assign(&d_k.matmul_bt(&layer.wk));
    d_h1.add_assign(&d_v.matmul_bt(&layer.wv));

    let mut d_x = rms_norm_backward(
        &trace.x_in,
        &trace.inv_rms1,
        &layer.attn_norm_gain,
        &d_h1,
        &mut grads.attn_norm_gain,
    );
    d_x.add_assign(&d_x_mid); // residual path around attention
    d_x
}

/// Reverse pass through the backbone. `d_output` is dL/d(final output);
/// gradients accumulate into `grads`; the return value is dL/d(input).
pub fn transformer_backward<T: Real>(
    trace: &ForwardTrace<T>,
    d_output: &Mat<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) -> Mat<T> {
    let mut d_x = rms_norm_backward(
        &trace.final_in,
        &trace.final_inv_rms,
        &params.final_norm_gain,
        d_output,
        &mut grads.final_norm_gain,
    );
    for (i, block) in trace.blocks.iter().enumerate().rev() {
        d_x = block_backward(
            block,
            &d_x,
            &params.layers[i],
            &mut grads.layers[i],
            params.config.num_heads,
        );
    }
    d_x
}
