//! Joint optimization of the shared transformer: mixed-task batching, the
//! training step for both loss paths, AdamW, and the weight EMA.
//!
//! All per-step randomness (sample choice, timestep, noise, guidance
//! dropout) is derived from `(seed, step)`, so a training trajectory is a
//! pure function of its config and resuming from a checkpoint replays the
//! exact stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoregression::{ar_loss_with_grad, TextSample, Vocabulary};
use crate::codec::{encode, patchify, CodecConfig};
use crate::data::PairedSample;
use crate::diffusion::{diffusion_loss_with_grad, forward_diffuse, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::pipeline::{
    ar_backward, ar_forward_traced, diff_backward, diff_forward_traced, DiffusionInput,
};
use crate::real::Real;
use crate::rng;
use crate::transformer::{LatentAttention, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Probability that an image batch drops its text condition.
    pub cfg_drop_prob: f64,
    /// Deterministic interleave: this many image batches, ...
    pub task_ratio_image: u32,
    /// ... then this many text batches, cyclically.
    pub task_ratio_text: u32,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    /// Include prompt positions in the AR loss (pretraining style). When
    /// false, each sample's `prompt_len` prefix is excluded.
    pub loss_on_prompt: bool,
    pub checkpoint_interval: u64,
    /// Append a wall-time column to the metrics log. Off by default so the
    /// log is byte-reproducible from the seed.
    pub log_walltime: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            cfg_drop_prob: 0.1,
            task_ratio_image: 9,
            task_ratio_text: 1,
            batch_size: 8,
            total_steps: 1000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            loss_on_prompt: true,
            checkpoint_interval: 500,
            log_walltime: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::Config("cfg_drop_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        if self.task_ratio_image == 0 && self.task_ratio_text == 0 {
            return Err(Error::Config("task ratio cannot be 0:0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("negative learning rate or weight decay".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    TextAr,
    TextToImage,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::TextAr => "text_ar",
            TaskKind::TextToImage => "text_to_image",
        }
    }
}

/// One paired sample prepared for training: caption tokens ending in the
/// image-start token, plus the clean patchified latents.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTokens {
    pub text: Vec<u32>,
    pub latents: Mat<f32>,
}

/// Tokenize captions (BOS + bytes + SI) and patchify encoded images.
pub fn prepare_image_dataset(
    samples: &[PairedSample],
    codec: &CodecConfig,
    max_seq_len: usize,
) -> Result<Vec<PairedTokens>> {
    let n_img = codec.num_tokens();
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut text = Vec::with_capacity(s.caption.len() + 2);
        text.push(Vocabulary::BOS);
        text.extend(Vocabulary::encode(&s.caption));
        text.push(Vocabulary::SI);
        if text.len() + n_img > max_seq_len {
            return Err(Error::invalid(format!(
                "sample {i}: caption ({} tokens) plus {n_img} latent tokens exceeds max_seq_len {max_seq_len}",
                text.len()
            )));
        }
        let latent = encode(&s.image)?;
        let tokens = patchify(&latent, codec.patch_size)?;
        out.push(PairedTokens {
            text,
            latents: tokens.tokens,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ImageItem {
    pub text: Vec<u32>,
    pub latents: Mat<f32>,
    pub eps: Mat<f32>,
}

#[derive(Debug, Clone)]
pub struct TextItem {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

#[derive(Debug, Clone)]
pub enum BatchPayload {
    TextAr {
        items: Vec<TextItem>,
    },
    TextToImage {
        items: Vec<ImageItem>,
        timestep: usize,
        drop_text: bool,
    },
}

/// A tagged unit of work: one single-task batch.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub step: u64,
    pub payload: BatchPayload,
}

impl TrainingBatch {
    pub fn task(&self) -> TaskKind {
        match self.payload {
            BatchPayload::TextAr { .. } => TaskKind::TextAr,
            BatchPayload::TextToImage { .. } => TaskKind::TextToImage,
        }
    }
}

/// Deterministic mixed-task batch source. Tasks interleave cyclically
/// (`task_ratio_image` image batches, then `task_ratio_text` text batches);
/// batch contents come from a per-step seeded stream, so
/// `batch_for_step(step)` is a pure function.
pub struct MixedBatchSampler {
    images: Vec<PairedTokens>,
    texts: Vec<TextSample>,
    ratio_image: u32,
    ratio_text: u32,
    batch_size: usize,
    timesteps: usize,
    cfg_drop_prob: f64,
    seed: u64,
}

impl MixedBatchSampler {
    pub fn new(
        images: Vec<PairedTokens>,
        texts: Vec<TextSample>,
        config: &TrainingConfig,
        timesteps: usize,
    ) -> Result<Self> {
        config.validate()?;
        if config.task_ratio_image > 0 && images.is_empty() {
            return Err(Error::invalid("image dataset is empty"));
        }
        if config.task_ratio_text > 0 && texts.is_empty() {
            return Err(Error::invalid("text dataset is empty"));
        }
        Ok(Self {
            images,
            texts,
            ratio_image: config.task_ratio_image,
            ratio_text: config.task_ratio_text,
            batch_size: config.batch_size,
            timesteps,
            cfg_drop_prob: config.cfg_drop_prob,
            seed: config.seed,
        })
    }

    pub fn task_for_step(&self, step: u64) -> TaskKind {
        let cycle = (self.ratio_image + self.ratio_text) as u64;
        if (step % cycle) < self.ratio_image as u64 {
            TaskKind::TextToImage
        } else {
            TaskKind::TextAr
        }
    }

    /// Draw order within a step's stream: the task is positional (not
    /// random); image batches draw the timestep, then the drop flag, then
    /// per item the sample index and its noise; text batches draw per-item
    /// indices.
    pub fn batch_for_step(&self, step: u64) -> TrainingBatch {
        let mut r = rng::step_rng(self.seed, step);
        let payload = match self.task_for_step(step) {
            TaskKind::TextToImage => {
                let timestep = 1 + (r.gen::<u64>() as usize) % self.timesteps;
                let drop_text = r.gen::<f64>() < self.cfg_drop_prob;
                let mut items = Vec::with_capacity(self.batch_size);
                for _ in 0..self.batch_size {
                    let idx = (r.gen::<u64>() as usize) % self.images.len();
                    let sample = &self.images[idx];
                    let mut eps = Mat::zeros(sample.latents.rows(), sample.latents.cols());
                    rng::fill_normal(&mut eps, 1.0, &mut r);
                    items.push(ImageItem {
                        text: sample.text.clone(),
                        latents: sample.latents.clone(),
                        eps,
                    });
                }
                BatchPayload::TextToImage {
                    items,
                    timestep,
                    drop_text,
                }
            }
            TaskKind::TextAr => {
                let mut items = Vec::with_capacity(self.batch_size);
                for _ in 0..self.batch_size {
                    let idx = (r.gen::<u64>() as usize) % self.texts.len();
                    items.push(TextItem {
                        tokens: self.texts[idx].tokens.clone(),
                        prompt_len: self.texts[idx].prompt_len,
                    });
                }
                BatchPayload::TextAr { items }
            }
        };
        TrainingBatch { step, payload }
    }

    /// Stream view starting at step 0.
    pub fn iter(&self) -> impl Iterator<Item = TrainingBatch> + '_ {
        (0u64..).map(|s| self.batch_for_step(s))
    }
}

// ---------------------------------------------------------------------------
// Optimizer and EMA
// ---------------------------------------------------------------------------

/// AdamW first/second moments plus the update counter for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub updates: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            updates: 0,
        }
    }
}

/// Decoupled AdamW with bias correction:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_update(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    opt: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    opt.updates += 1;
    let (b1, b2) = (betas.0 as f32, betas.1 as f32);
    let bc1 = (1.0 - betas.0.powi(opt.updates as i32)) as f32;
    let bc2 = (1.0 - betas.1.powi(opt.updates as i32)) as f32;
    let lr = lr as f32;
    let eps = eps as f32;
    let wd = weight_decay as f32;

    let mut p_t = params.named_tensors_mut();
    let g_t = grads.named_tensors();
    let mut m_t = opt.m.named_tensors_mut();
    let mut v_t = opt.v.named_tensors_mut();
    if p_t.len() != g_t.len() {
        return Err(Error::invalid("gradient tensor set does not mirror params"));
    }
    for i in 0..p_t.len() {
        let (gname, g) = &g_t[i];
        {
            let (pname, p) = &p_t[i];
            if pname != gname || p.shape() != g.shape() {
                return Err(Error::invalid(format!(
                    "optimizer tensor mismatch: {pname} vs {gname}"
                )));
            }
        }
        let ps = p_t[i].1.as_mut_slice();
        let gs = g.as_slice();
        let ms = m_t[i].1.as_mut_slice();
        let vs = v_t[i].1.as_mut_slice();
        for j in 0..ps.len() {
            ms[j] = b1 * ms[j] + (1.0 - b1) * gs[j];
            vs[j] = b2 * vs[j] + (1.0 - b2) * gs[j] * gs[j];
            let m_hat = ms[j] / bc1;
            let v_hat = vs[j] / bc2;
            ps[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * ps[j]);
        }
    }
    params.version += 1;
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`, per tensor.
pub fn ema_update<T: Real>(
    ema: &mut ModelParams<T>,
    params: &ModelParams<T>,
    decay: f64,
) -> Result<()> {
    let mut e_t = ema.named_tensors_mut();
    let p_t = params.named_tensors();
    if e_t.len() != p_t.len() {
        return Err(Error::invalid("EMA tensor set does not mirror params"));
    }
    let d = T::from_f64(decay);
    let omd = T::from_f64(1.0 - decay);
    for i in 0..e_t.len() {
        let (pname, p) = &p_t[i];
        let (ename, e) = &mut e_t[i];
        if ename != pname || e.shape() != p.shape() {
            return Err(Error::invalid(format!(
                "EMA tensor mismatch: {ename} vs {pname}"
            )));
        }
        for (ev, &pv) in e.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *ev = d * *ev + omd * pv;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub step: u64,
    pub task: TaskKind,
    pub loss: f32,
}

fn global_grad_norm(grads: &ModelParams<f32>) -> f64 {
    let mut acc = 0.0f64;
    for (_, t) in grads.named_tensors() {
        for &v in t.as_slice() {
            acc += (v as f64) * (v as f64);
        }
    }
    acc.sqrt()
}

/// Accumulate gradients for one batch into `grads` (which the caller zeroes)
/// and return the batch loss (mean over the batch's samples). Exposed
/// separately from the optimizer update so gradient checks can reuse it.
pub fn batch_loss_and_grads<T: Real>(
    batch: &TrainingBatch,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
    schedule: &DiffusionSchedule,
    latent_attention: LatentAttention,
    loss_on_prompt: bool,
) -> Result<T> {
    match &batch.payload {
        BatchPayload::TextAr { items } => {
            if items.is_empty() {
                return Err(Error::invalid("empty text batch"));
            }
            let inv_b = T::ONE / T::from_usize(items.len());
            let mut total = T::ZERO;
            for item in items {
                let seq = &item.tokens;
                if seq.len() < 2 {
                    return Err(Error::invalid("text sample too short to shift"));
                }
                let inputs = &seq[..seq.len() - 1];
                let targets = &seq[1..];
                let prompt_exclude = if loss_on_prompt { 0 } else { item.prompt_len };
                let trace = ar_forward_traced(inputs, params)?;
                let (loss, mut d_logits) =
                    ar_loss_with_grad(&trace.logits, targets, prompt_exclude)?;
                total += loss;
                d_logits.scale(inv_b);
                ar_backward(&trace, &d_logits, params, grads);
            }
            Ok(total * inv_b)
        }
        BatchPayload::TextToImage {
            items,
            timestep,
            drop_text,
        } => {
            if items.is_empty() {
                return Err(Error::invalid("empty image batch"));
            }
            let inv_b = T::ONE / T::from_usize(items.len());
            let mut total = T::ZERO;
            for item in items {
                let latents = item.latents.cast::<T>();
                let eps = item.eps.cast::<T>();
                let x_t = forward_diffuse(&latents, *timestep, &eps, schedule)?;
                let trace = diff_forward_traced(
                    params,
                    &DiffusionInput {
                        text_tokens: &item.text,
                        drop_text: *drop_text,
                        noised_tokens: &x_t,
                        timestep: *timestep,
                        latent_attention,
                    },
                    schedule,
                )?;
                let (loss, mut d_eps) = diffusion_loss_with_grad(&trace.eps_pred, &eps)?;
                total += loss;
                d_eps.scale(inv_b);
                diff_backward(&trace, &d_eps, params, grads);
            }
            Ok(total * inv_b)
        }
    }
}

/// One optimization step: forward, loss, backward, optional clip, AdamW.
pub fn train_step(
    batch: &TrainingBatch,
    params: &mut ModelParams<f32>,
    opt: &mut AdamState,
    config: &TrainingConfig,
    schedule: &DiffusionSchedule,
    latent_attention: LatentAttention,
) -> Result<StepOutcome> {
    let mut grads = params.zeros_like();
    let loss = batch_loss_and_grads(
        batch,
        params,
        &mut grads,
        schedule,
        latent_attention,
        config.loss_on_prompt,
    )?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: batch.step,
            task: batch.task().as_str(),
            loss: loss as f64,
        });
    }
    if let Some(max_norm) = config.grad_clip {
        let norm = global_grad_norm(&grads);
        if norm > max_norm {
            let scale = (max_norm / norm) as f32;
            for (_, t) in grads.named_tensors_mut() {
                t.scale(scale);
            }
        }
    }
    adamw_update(
        params,
        &grads,
        opt,
        config.learning_rate,
        (config.adam_beta1, config.adam_beta2),
        config.adam_eps,
        config.weight_decay,
    )?;
    Ok(StepOutcome {
        step: batch.step,
        task: batch.task(),
        loss,
    })
}

/// Token-weighted mean NLL of a text corpus under the current weights.
pub fn corpus_text_loss(params: &ModelParams<f32>, corpus: &[TextSample]) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for s in corpus {
        let inputs = &s.tokens[..s.tokens.len() - 1];
        let targets = &s.tokens[1..];
        let trace = ar_forward_traced(inputs, params)?;
        let (loss, _) = ar_loss_with_grad(&trace.logits, targets, 0)?;
        total += loss as f64 * targets.len() as f64;
        count += targets.len();
    }
    Ok((total / count as f64) as f32)
}

/// Owns one training run: parameters, EMA shadow, optimizer state, and the
/// deterministic batch source.
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub ema: ModelParams<f32>,
    pub opt: AdamState,
    pub step: u64,
    pub sampler: MixedBatchSampler,
    pub config: TrainingConfig,
    pub schedule: DiffusionSchedule,
    pub latent_attention: LatentAttention,
}

impl Trainer {
    pub fn new(
        params: ModelParams<f32>,
        sampler: MixedBatchSampler,
        config: TrainingConfig,
        schedule: DiffusionSchedule,
        latent_attention: LatentAttention,
    ) -> Self {
        let ema = params.clone();
        let opt = AdamState::new(&params);
        Self {
            params,
            ema,
            opt,
            step: 0,
            sampler,
            config,
            schedule,
            latent_attention,
        }
    }

    /// Run one step at the current step counter; updates EMA afterwards.
    pub fn step_once(&mut self) -> Result<StepOutcome> {
        let batch = self.sampler.batch_for_step(self.step);
        let outcome = train_step(
            &batch,
            &mut self.params,
            &mut self.opt,
            &self.config,
            &self.schedule,
            self.latent_attention,
        )?;
        ema_update(&mut self.ema, &self.params, self.config.ema_decay)?;
        self.step += 1;
        Ok(outcome)
    }
}
