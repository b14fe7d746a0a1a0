//! Discrete next-token modeling: byte-level vocabulary, AR head, NLL loss,
//! and text decoding including the image-start handoff token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::masking::build_causal_mask;
use crate::real::Real;
use crate::rng;
use crate::transformer::{
    embed_tokens, sincos_positional_embedding, transformer_forward, ModelParams,
};

/// Byte-level vocabulary: 256 raw bytes plus four special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    /// Image-start token: its emission hands decoding over to diffusion.
    pub const SI: u32 = 258;
    pub const PAD: u32 = 259;
    pub const SIZE: usize = 260;

    /// Byte string to token ids (no specials added).
    pub fn encode(text: &str) -> Vec<u32> {
        text.as_bytes().iter().map(|&b| b as u32).collect()
    }

    /// Inverse of `encode`; ignores special tokens.
    pub fn decode(tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn is_special(id: u32) -> bool {
        id >= 256 && (id as usize) < Self::SIZE
    }
}

/// A tokenized text sample: BOS prefix, byte tokens, EOS suffix. The
/// `prompt_len` prefix can be excluded from the loss for instruction-style
/// pairs (see `TrainingConfig::loss_on_prompt`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl TextSample {
    pub fn from_text(text: &str, max_seq_len: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(text.len() + 2);
        tokens.push(Vocabulary::BOS);
        tokens.extend(Vocabulary::encode(text));
        tokens.push(Vocabulary::EOS);
        if tokens.len() > max_seq_len {
            return Err(Error::invalid(format!(
                "sample of {} tokens exceeds max_seq_len {max_seq_len}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            prompt_len: 0,
        })
    }

    /// Caption sample whose continuation is the image-start token: BOS,
    /// caption bytes, SI, EOS. Supervising these in the AR stream teaches
    /// the model to emit SI after a caption.
    pub fn caption_to_si(caption: &str, max_seq_len: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(caption.len() + 3);
        tokens.push(Vocabulary::BOS);
        tokens.extend(Vocabulary::encode(caption));
        tokens.push(Vocabulary::SI);
        tokens.push(Vocabulary::EOS);
        if tokens.len() > max_seq_len {
            return Err(Error::invalid(format!(
                "caption of {} tokens exceeds max_seq_len {max_seq_len}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            prompt_len: 0,
        })
    }
}

/// Linear projection of hidden states to vocabulary logits (no bias).
pub fn ar_head<T: Real>(hidden: &Mat<T>, params: &ModelParams<T>) -> Result<Mat<T>> {
    if hidden.cols() != params.config.model_dim {
        return Err(Error::invalid(format!(
            "hidden width {} does not match model_dim {}",
            hidden.cols(),
            params.config.model_dim
        )));
    }
    Ok(hidden.matmul(&params.ar_head))
}

fn log_softmax_nll<T: Real>(logits_row: &[T], target: usize) -> T {
    let mut max = logits_row[0];
    for &v in logits_row {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::ZERO;
    for &v in logits_row {
        sum += (v - max).exp();
    }
    sum.ln() + max - logits_row[target]
}

/// Mean negative log-likelihood in nats per included position. Positions
/// whose target is PAD are excluded, as are positions after the EOS target.
pub fn ar_loss<T: Real>(logits: &Mat<T>, targets: &[u32]) -> Result<T> {
    ar_loss_masked(logits, targets, 0)
}

/// `ar_loss` with the first `prompt_exclude` positions additionally left out
/// of the average (instruction-style pairs).
pub fn ar_loss_masked<T: Real>(logits: &Mat<T>, targets: &[u32], prompt_exclude: usize) -> Result<T> {
    let included = included_positions(logits, targets, prompt_exclude)?;
    let mut total = T::ZERO;
    for &i in &included {
        total += log_softmax_nll(logits.row(i), targets[i] as usize);
    }
    Ok(total / T::from_usize(included.len()))
}

fn included_positions<T: Real>(
    logits: &Mat<T>,
    targets: &[u32],
    prompt_exclude: usize,
) -> Result<Vec<usize>> {
    if logits.rows() != targets.len() {
        return Err(Error::invalid(format!(
            "{} logit rows vs {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut included = Vec::with_capacity(targets.len());
    let mut seen_eos = false;
    for (i, &t) in targets.iter().enumerate() {
        if seen_eos || t == Vocabulary::PAD {
            continue;
        }
        if t == Vocabulary::EOS {
            seen_eos = true;
        }
        if i >= prompt_exclude {
            included.push(i);
        }
    }
    if included.is_empty() {
        return Err(Error::invalid("no positions included in AR loss"));
    }
    Ok(included)
}

/// Loss plus dL/dlogits, for training. The gradient of excluded positions is
/// zero; included positions carry `(softmax - onehot) / count`.
pub fn ar_loss_with_grad<T: Real>(
    logits: &Mat<T>,
    targets: &[u32],
    prompt_exclude: usize,
) -> Result<(T, Mat<T>)> {
    let included = included_positions(logits, targets, prompt_exclude)?;
    let inv_count = T::ONE / T::from_usize(included.len());
    let mut d_logits = Mat::zeros(logits.rows(), logits.cols());
    let mut total = T::ZERO;
    for &i in &included {
        let row = logits.row(i);
        let target = targets[i] as usize;
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        let d_row = d_logits.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            d_row[j] = e;
            sum += e;
        }
        total += sum.ln() + max - row[target];
        let inv_sum = T::ONE / sum;
        for d in d_row.iter_mut() {
            *d *= inv_sum * inv_count;
        }
        d_row[target] -= inv_count;
    }
    Ok((total * inv_count, d_logits))
}

/// Decoding strategy for `generate_text`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    TopK { k: usize, temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    /// The image-start token was produced; the caller should enter the
    /// diffusion pipeline.
    Si,
    Length,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::Eos => write!(f, "EOS"),
            StopReason::Si => write!(f, "SI"),
            StopReason::Length => write!(f, "LENGTH"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Newly generated tokens, excluding the terminator.
    pub tokens: Vec<u32>,
    pub stop_reason: StopReason,
}

/// Full-sequence logits under the causal mask (embedding + positions +
/// backbone + AR head).
pub fn ar_logits<T: Real>(tokens: &[u32], params: &ModelParams<T>) -> Result<Mat<T>> {
    let d = params.config.model_dim;
    let mut input = embed_tokens(tokens, params)?;
    let pos = sincos_positional_embedding::<T>(tokens.len(), d)?;
    input.add_assign(&pos);
    let mask = build_causal_mask(tokens.len())?;
    let hidden = transformer_forward(&input, &mask, params)?;
    ar_head(&hidden, params)
}

/// Autoregressive decoding loop. Stops at EOS, at SI (diffusion handoff), or
/// after `max_new` tokens / the model's context limit.
pub fn generate_text<T: Real>(
    prompt: &[u32],
    params: &ModelParams<T>,
    max_new: usize,
    sampler: Sampler,
) -> Result<Generation> {
    if prompt.is_empty() || prompt[0] != Vocabulary::BOS {
        return Err(Error::invalid("prompt must be non-empty and start with BOS"));
    }
    if prompt.len() > params.config.max_seq_len {
        return Err(Error::invalid(format!(
            "prompt of {} tokens exceeds max_seq_len {}",
            prompt.len(),
            params.config.max_seq_len
        )));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let mut rng_state = match sampler {
        Sampler::TopK { seed, .. } => Some(rng::seeded(seed)),
        Sampler::Greedy => None,
    };
    for _ in 0..max_new {
        if seq.len() >= params.config.max_seq_len {
            return Ok(Generation {
                tokens: out,
                stop_reason: StopReason::Length,
            });
        }
        let logits = ar_logits(&seq, params)?;
        let last = logits.row(logits.rows() - 1);
        let next = match sampler {
            Sampler::Greedy => argmax(last),
            Sampler::TopK { k, temperature, .. } => {
                sample_top_k(last, k, temperature, rng_state.as_mut().unwrap())
            }
        } as u32;
        if next == Vocabulary::EOS {
            return Ok(Generation {
                tokens: out,
                stop_reason: StopReason::Eos,
            });
        }
        if next == Vocabulary::SI {
            return Ok(Generation {
                tokens: out,
                stop_reason: StopReason::Si,
            });
        }
        out.push(next);
        seq.push(next);
    }
    Ok(Generation {
        tokens: out,
        stop_reason: StopReason::Length,
    })
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k<T: Real>(row: &[T], k: usize, temperature: f64, r: &mut rng::SeedRng) -> usize {
    let k = k.max(1).min(row.len());
    let temp = temperature.max(1e-6);
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    let max = row[idx[0]].to_f64();
    let weights: Vec<f64> = idx
        .iter()
        .map(|&i| ((row[i].to_f64() - max) / temp).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = r.gen::<f64>() * total;
    for (w, &i) in weights.iter().zip(&idx) {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    *idx.last().unwrap()
}
