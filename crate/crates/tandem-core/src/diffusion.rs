//! Continuous denoising machinery: variance schedule, forward corruption,
//! timestep conditioning, the diffusion head, the noise-prediction loss,
//! ancestral sampling, and classifier-free guidance.

use crate::codec::{decode, unpatchify, CodecConfig, ImageTensor, LatentTokens};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::pipeline::{diff_forward_traced, DiffusionInput};
use crate::real::{silu, silu_grad, Real};
use crate::rng;
use crate::transformer::{LatentAttention, ModelParams, TIME_FREQ_DIM};

const LN_EPS: f64 = 1e-5;

/// Beta/alpha tables for T timesteps, 1-indexed by convention: `beta(1)` is
/// the first step. `alpha_bar(0)` is defined as 1 so the final reverse step
/// is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::invalid(format!(
                "timestep {t} out of range 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

/// Linear variance schedule: `beta` interpolates from `beta_start` at t=1 to
/// `beta_end` at t=T; `alpha_bar` is the running product of `1 - beta`.
pub fn linear_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_count == 0 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut betas = Vec::with_capacity(t_count);
    if t_count == 1 {
        betas.push(beta_start);
    } else {
        for t in 1..=t_count {
            betas.push(beta_start + (t - 1) as f64 / (t_count - 1) as f64 * (beta_end - beta_start));
        }
        // the lerp is exact at both ends mathematically; pin the endpoints
        // against last-ulp rounding
        betas[0] = beta_start;
        betas[t_count - 1] = beta_end;
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_count);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// Forward corruption: `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse<T: Real>(
    x0: &Mat<T>,
    t: usize,
    eps: &Mat<T>,
    schedule: &DiffusionSchedule,
) -> Result<Mat<T>> {
    schedule.check_timestep(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "x0 shape {:?} does not match noise shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let a = T::from_f64(ab.sqrt());
    let b = T::from_f64((1.0 - ab).sqrt());
    let mut out = x0.clone();
    out.scale(a);
    out.add_scaled(eps, b);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Timestep conditioning
// ---------------------------------------------------------------------------

/// Sinusoidal frequency features of an integer timestep, interleaved
/// sin/cos with the same layout as the positional table.
pub fn timestep_frequency_features<T: Real>(t: usize, dim: usize) -> Mat<T> {
    let mut out = Mat::zeros(1, dim);
    let row = out.row_mut(0);
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = t as f64 * freq;
        row[2 * i] = T::from_f64(angle.sin());
        row[2 * i + 1] = T::from_f64(angle.cos());
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct TimeTrace<T> {
    freq: Mat<T>,
    z1: Mat<T>,
    a1: Mat<T>,
    pub(crate) emb: Mat<T>,
}

pub(crate) fn timestep_embedding_traced<T: Real>(
    t: usize,
    params: &ModelParams<T>,
    schedule: &DiffusionSchedule,
) -> Result<TimeTrace<T>> {
    schedule.check_timestep(t)?;
    let freq = timestep_frequency_features::<T>(t, TIME_FREQ_DIM);
    let mut z1 = freq.matmul(&params.time_w1);
    z1.add_assign(&params.time_b1);
    let mut a1 = z1.clone();
    for v in a1.as_mut_slice() {
        *v = silu(*v);
    }
    let mut emb = a1.matmul(&params.time_w2);
    emb.add_assign(&params.time_b2);
    Ok(TimeTrace { freq, z1, a1, emb })
}

/// 256-dim frequency features of t followed by a two-layer MLP with SiLU,
/// projecting to model width.
pub fn timestep_embedding<T: Real>(
    t: usize,
    params: &ModelParams<T>,
    schedule: &DiffusionSchedule,
) -> Result<Mat<T>> {
    Ok(timestep_embedding_traced(t, params, schedule)?.emb)
}

pub(crate) fn timestep_embedding_backward<T: Real>(
    trace: &TimeTrace<T>,
    d_emb: &Mat<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) {
    trace.a1.matmul_at_acc(d_emb, &mut grads.time_w2);
    grads.time_b2.add_assign(d_emb);
    let d_a1 = d_emb.matmul_bt(&params.time_w2);
    let mut d_z1 = d_a1;
    for (dz, &z) in d_z1.as_mut_slice().iter_mut().zip(trace.z1.as_slice()) {
        *dz *= silu_grad(z);
    }
    trace.freq.matmul_at_acc(&d_z1, &mut grads.time_w1);
    grads.time_b1.add_assign(&d_z1);
}

// ---------------------------------------------------------------------------
// AdaLN
// ---------------------------------------------------------------------------

fn layer_norm_rows<T: Real>(x: &Mat<T>) -> (Mat<T>, Vec<T>, Vec<T>) {
    let (n, d) = x.shape();
    let inv_d = T::ONE / T::from_usize(d);
    let eps = T::from_f64(LN_EPS);
    let mut out = Mat::zeros(n, d);
    let mut means = Vec::with_capacity(n);
    let mut inv_stds = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv_std = T::ONE / (var + eps).sqrt();
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = (row[j] - mean) * inv_std;
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (out, means, inv_stds)
}

/// Backward through `y = (x - mean) * inv_std`, per row.
fn layer_norm_backward_rows<T: Real>(normed: &Mat<T>, inv_stds: &[T], d_out: &Mat<T>) -> Mat<T> {
    let (n, d) = normed.shape();
    let inv_d = T::ONE / T::from_usize(d);
    let mut dx = Mat::zeros(n, d);
    for i in 0..n {
        let y = normed.row(i);
        let dy = d_out.row(i);
        let mut mean_dy = T::ZERO;
        let mut mean_dy_y = T::ZERO;
        for j in 0..d {
            mean_dy += dy[j];
            mean_dy_y += dy[j] * y[j];
        }
        mean_dy *= inv_d;
        mean_dy_y *= inv_d;
        let r = inv_stds[i];
        let dxr = dx.row_mut(i);
        for j in 0..d {
            dxr[j] = r * (dy[j] - mean_dy - y[j] * mean_dy_y);
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub(crate) struct AdalnTrace<T> {
    normed: Mat<T>,
    inv_stds: Vec<T>,
    gamma: Mat<T>,
    pub(crate) out: Mat<T>,
}

pub(crate) fn adaln_traced<T: Real>(
    latent_rows: &Mat<T>,
    time_emb: &Mat<T>,
    params: &ModelParams<T>,
) -> Result<AdalnTrace<T>> {
    let d = params.config.model_dim;
    if latent_rows.cols() != d || time_emb.shape() != (1, d) {
        return Err(Error::invalid(format!(
            "adaln width mismatch: latent {:?}, time {:?}, d {d}",
            latent_rows.shape(),
            time_emb.shape()
        )));
    }
    let gamma = time_emb.matmul(&params.adaln_gamma);
    let beta = time_emb.matmul(&params.adaln_beta);
    let (normed, _means, inv_stds) = layer_norm_rows(latent_rows);
    let mut out = Mat::zeros(latent_rows.rows(), d);
    let g = gamma.row(0);
    let b = beta.row(0);
    for i in 0..latent_rows.rows() {
        let n = normed.row(i);
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = n[j] * (T::ONE + g[j]) + b[j];
        }
    }
    Ok(AdalnTrace {
        normed,
        inv_stds,
        gamma,
        out,
    })
}

/// Layer-normalize latent rows, then scale by `1 + gamma(time)` and shift by
/// `beta(time)`, where gamma and beta are linear maps of the time embedding.
pub fn adaln_modulate<T: Real>(
    latent_rows: &Mat<T>,
    time_emb: &Mat<T>,
    params: &ModelParams<T>,
) -> Result<Mat<T>> {
    Ok(adaln_traced(latent_rows, time_emb, params)?.out)
}

/// Returns (d_latent_rows, d_time_emb).
pub(crate) fn adaln_backward<T: Real>(
    trace: &AdalnTrace<T>,
    time_emb: &Mat<T>,
    d_out: &Mat<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) -> (Mat<T>, Mat<T>) {
    let (n, d) = trace.normed.shape();
    let g = trace.gamma.row(0);
    let mut d_normed = Mat::zeros(n, d);
    let mut d_gamma = Mat::zeros(1, d);
    let mut d_beta = Mat::zeros(1, d);
    for i in 0..n {
        let dy = d_out.row(i);
        let nr = trace.normed.row(i);
        let dn = d_normed.row_mut(i);
        let dg = d_gamma.row_mut(0);
        let db = d_beta.row_mut(0);
        for j in 0..d {
            dn[j] = dy[j] * (T::ONE + g[j]);
            dg[j] += dy[j] * nr[j];
            db[j] += dy[j];
        }
    }
    time_emb.matmul_at_acc(&d_gamma, &mut grads.adaln_gamma);
    time_emb.matmul_at_acc(&d_beta, &mut grads.adaln_beta);
    let mut d_time = d_gamma.matmul_bt(&params.adaln_gamma);
    d_time.add_assign(&d_beta.matmul_bt(&params.adaln_beta));
    let d_latent = layer_norm_backward_rows(&trace.normed, &trace.inv_stds, &d_normed);
    (d_latent, d_time)
}

// ---------------------------------------------------------------------------
// Diffusion head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct HeadTrace<T> {
    normed: Mat<T>,
    inv_stds: Vec<T>,
    z1: Mat<T>,
    a1: Mat<T>,
    pub(crate) out: Mat<T>,
}

pub(crate) fn diffusion_head_traced<T: Real>(
    hidden: &Mat<T>,
    params: &ModelParams<T>,
) -> Result<HeadTrace<T>> {
    if hidden.cols() != params.config.model_dim {
        return Err(Error::invalid(format!(
            "head input width {} does not match model_dim {}",
            hidden.cols(),
            params.config.model_dim
        )));
    }
    let (normed, _means, inv_stds) = layer_norm_rows(hidden);
    let mut z1 = normed.matmul(&params.head_w1);
    for i in 0..z1.rows() {
        let b = params.head_b1.row(0);
        let row = z1.row_mut(i);
        for j in 0..row.len() {
            row[j] += b[j];
        }
    }
    let mut a1 = z1.clone();
    for v in a1.as_mut_slice() {
        *v = silu(*v);
    }
    let mut out = a1.matmul(&params.head_w2);
    for i in 0..out.rows() {
        let b = params.head_b2.row(0);
        let row = out.row_mut(i);
        for j in 0..row.len() {
            row[j] += b[j];
        }
    }
    Ok(HeadTrace {
        normed,
        inv_stds,
        z1,
        a1,
        out,
    })
}

/// Noise-prediction head over image-position hidden states: layer norm, then
/// a linear layer with SiLU activation, then the linear projection to latent
/// token width.
pub fn diffusion_head<T: Real>(hidden: &Mat<T>, params: &ModelParams<T>) -> Result<Mat<T>> {
    Ok(diffusion_head_traced(hidden, params)?.out)
}

/// Returns dL/d(hidden rows).
pub(crate) fn diffusion_head_backward<T: Real>(
    trace: &HeadTrace<T>,
    d_out: &Mat<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) -> Mat<T> {
    trace.a1.matmul_at_acc(d_out, &mut grads.head_w2);
    for i in 0..d_out.rows() {
        let db = grads.head_b2.row_mut(0);
        for (d, &v) in db.iter_mut().zip(d_out.row(i)) {
            *d += v;
        }
    }
    let mut d_z1 = d_out.matmul_bt(&params.head_w2);
    for (dz, &z) in d_z1.as_mut_slice().iter_mut().zip(trace.z1.as_slice()) {
        *dz *= silu_grad(z);
    }
    trace.normed.matmul_at_acc(&d_z1, &mut grads.head_w1);
    for i in 0..d_z1.rows() {
        let db = grads.head_b1.row_mut(0);
        for (d, &v) in db.iter_mut().zip(d_z1.row(i)) {
            *d += v;
        }
    }
    let d_normed = d_z1.matmul_bt(&params.head_w1);
    layer_norm_backward_rows(&trace.normed, &trace.inv_stds, &d_normed)
}

// ---------------------------------------------------------------------------
// Loss, reverse step, guidance
// ---------------------------------------------------------------------------

/// Mean squared error between predicted and ground-truth noise, averaged
/// over all elements.
pub fn diffusion_loss<T: Real>(eps_pred: &Mat<T>, eps: &Mat<T>) -> Result<T> {
    if eps_pred.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} does not match noise shape {:?}",
            eps_pred.shape(),
            eps.shape()
        )));
    }
    let mut total = T::ZERO;
    for (&p, &e) in eps_pred.as_slice().iter().zip(eps.as_slice()) {
        let d = p - e;
        total += d * d;
    }
    Ok(total / T::from_usize(eps_pred.len()))
}

/// Loss plus dL/d(eps_pred) = 2 (eps_pred - eps) / count.
pub fn diffusion_loss_with_grad<T: Real>(eps_pred: &Mat<T>, eps: &Mat<T>) -> Result<(T, Mat<T>)> {
    let loss = diffusion_loss(eps_pred, eps)?;
    let scale = T::from_f64(2.0) / T::from_usize(eps_pred.len());
    let mut grad = eps_pred.clone();
    for (g, &e) in grad.as_mut_slice().iter_mut().zip(eps.as_slice()) {
        *g = (*g - e) * scale;
    }
    Ok((loss, grad))
}

/// Posterior standard deviation for the jump t -> prev_t:
/// `sigma^2 = beta_eff * (1 - alpha_bar_prev) / (1 - alpha_bar_t)`.
fn posterior_sigma(schedule: &DiffusionSchedule, t: usize, prev_t: usize) -> f64 {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(prev_t);
    let beta_eff = 1.0 - ab_t / ab_prev;
    (beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)).max(0.0).sqrt()
}

/// Generalized ancestral step from timestep `t` to `prev_t < t` (`prev_t = 0`
/// lands on the clean sample):
/// `x_prev = (x_t - beta_eff / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_eff)
///  + sigma * z`.
pub fn ddpm_step_between<T: Real>(
    x_t: &Mat<T>,
    eps_pred: &Mat<T>,
    t: usize,
    prev_t: usize,
    schedule: &DiffusionSchedule,
    z: Option<&Mat<T>>,
) -> Result<Mat<T>> {
    schedule.check_timestep(t)?;
    if prev_t >= t {
        return Err(Error::invalid(format!("prev timestep {prev_t} must be below {t}")));
    }
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::invalid("x_t and eps_pred shapes differ"));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(prev_t);
    let alpha_eff = ab_t / ab_prev;
    let beta_eff = 1.0 - alpha_eff;
    let coef = T::from_f64(beta_eff / (1.0 - ab_t).sqrt());
    let inv_sqrt_alpha = T::from_f64(1.0 / alpha_eff.sqrt());
    let sigma = posterior_sigma(schedule, t, prev_t);

    let mut out = x_t.clone();
    out.add_scaled(eps_pred, -coef);
    out.scale(inv_sqrt_alpha);
    if sigma > 0.0 {
        if let Some(z) = z {
            if z.shape() != x_t.shape() {
                return Err(Error::invalid("z shape differs from x_t"));
            }
            out.add_scaled(z, T::from_f64(sigma));
        }
    }
    Ok(out)
}

/// Single ancestral DDPM step from `t` to `t - 1`. With the
/// `alpha_bar(0) = 1` convention, `sigma_1 = 0` and the final step is
/// deterministic regardless of `z`.
pub fn ddpm_step<T: Real>(
    x_t: &Mat<T>,
    eps_pred: &Mat<T>,
    t: usize,
    schedule: &DiffusionSchedule,
    z: Option<&Mat<T>>,
) -> Result<Mat<T>> {
    schedule.check_timestep(t)?;
    ddpm_step_between(x_t, eps_pred, t, t - 1, schedule, z)
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`. The
/// endpoints are returned exactly so scale 1 reproduces the conditional
/// prediction bit-for-bit and scale 0 the unconditional one.
pub fn cfg_combine<T: Real>(eps_cond: &Mat<T>, eps_uncond: &Mat<T>, scale: f64) -> Result<Mat<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::invalid("guidance inputs have different shapes"));
    }
    if scale < 0.0 {
        return Err(Error::invalid("guidance scale must be >= 0"));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let mut out = eps_uncond.clone();
    let s = T::from_f64(scale);
    for (o, &c) in out.as_mut_slice().iter_mut().zip(eps_cond.as_slice()) {
        let u = *o;
        *o = u + s * (c - u);
    }
    Ok(out)
}

/// Evenly spaced descending timestep subsequence from T down to 1.
pub fn strided_timesteps(schedule: &DiffusionSchedule, steps: usize) -> Result<Vec<usize>> {
    let t_max = schedule.timesteps();
    if steps == 0 {
        return Err(Error::invalid("need at least one sampling step"));
    }
    if steps >= t_max {
        return Ok((1..=t_max).rev().collect());
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|i| 1 + ((t_max - 1) as f64 * i as f64 / (steps - 1).max(1) as f64).round() as usize)
        .collect();
    if steps == 1 {
        out = vec![t_max];
    }
    out.dedup();
    out.reverse();
    Ok(out)
}

/// Sampling controls for `generate_image`.
#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub latent_attention: LatentAttention,
}

/// Draws initial latents from a standard normal, runs the denoising loop
/// under the hybrid mask with classifier-free guidance, then unpatchifies
/// and decodes to an image.
///
/// RNG protocol (documented so an oracle can replay it): one seeded stream
/// draws the initial latents row-major, then for every reverse jump whose
/// target timestep is >= 1 it draws the step noise z row-major.
pub fn generate_image<T: Real>(
    text_tokens: &[u32],
    params: &ModelParams<T>,
    schedule: &DiffusionSchedule,
    codec: &CodecConfig,
    opts: &SampleOpts,
) -> Result<ImageTensor> {
    use crate::autoregression::Vocabulary;
    if text_tokens.last() != Some(&Vocabulary::SI) {
        return Err(Error::invalid("text tokens must end with the image-start token"));
    }
    if codec.token_width() != params.config.latent_token_width {
        return Err(Error::Config(format!(
            "codec token width {} does not match model latent_token_width {}",
            codec.token_width(),
            params.config.latent_token_width
        )));
    }
    let n_img = codec.num_tokens();
    let width = codec.token_width();
    let mut r = rng::seeded(opts.seed);
    let mut x = rng::normal_mat::<T, _>(n_img, width, 1.0, &mut r);

    let taus = strided_timesteps(schedule, opts.steps)?;
    for (i, &t) in taus.iter().enumerate() {
        let prev = if i + 1 < taus.len() { taus[i + 1] } else { 0 };
        let cond = diff_forward_traced(
            params,
            &DiffusionInput {
                text_tokens,
                drop_text: false,
                noised_tokens: &x,
                timestep: t,
                latent_attention: opts.latent_attention,
            },
            schedule,
        )?;
        let eps = if opts.guidance_scale == 1.0 {
            cond.eps_pred
        } else {
            let uncond = diff_forward_traced(
                params,
                &DiffusionInput {
                    text_tokens,
                    drop_text: true,
                    noised_tokens: &x,
                    timestep: t,
                    latent_attention: opts.latent_attention,
                },
                schedule,
            )?;
            cfg_combine(&cond.eps_pred, &uncond.eps_pred, opts.guidance_scale)?
        };
        let z = if prev >= 1 {
            Some(rng::normal_mat::<T, _>(n_img, width, 1.0, &mut r))
        } else {
            None
        };
        x = ddpm_step_between(&x, &eps, t, prev, schedule, z.as_ref())?;
    }

    let tokens = LatentTokens {
        tokens: x.cast::<f32>(),
        patch_size: codec.patch_size,
        height: codec.latent_size(),
        width: codec.latent_size(),
        channels: codec.latent_channels,
    };
    Ok(decode(&unpatchify(&tokens)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TransformerConfig;

    fn schedule_1000() -> DiffusionSchedule {
        linear_schedule(1000, 1e-4, 2e-2).unwrap()
    }

    fn diff_config() -> TransformerConfig {
        TransformerConfig {
            depth: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 260,
            max_seq_len: 32,
            latent_token_width: 12,
        }
    }

    #[test]
    fn schedule_endpoints_are_exact() {
        let s = schedule_1000();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 2e-2);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.alpha_bar(1), 0.9999);
    }

    #[test]
    fn schedule_identities_and_monotonicity() {
        let s = schedule_1000();
        for t in 1..=1000usize {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn degenerate_single_step_schedule() {
        let s = linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.timesteps(), 1);
        assert_eq!(s.beta(1), 0.5);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(linear_schedule(0, 1e-4, 2e-2).is_err());
        assert!(linear_schedule(10, 0.0, 0.1).is_err());
        assert!(linear_schedule(10, 0.2, 0.1).is_err());
        assert!(linear_schedule(10, 0.2, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let s = linear_schedule(10, 1e-9, 1e-9).unwrap(); // alpha_bar ~ 1
        let x0 = Mat::from_vec(1, 2, vec![0.7f64, -0.4]);
        let eps = Mat::from_vec(1, 2, vec![1.0f64, 1.0]);
        let x1 = forward_diffuse(&x0, 5, &eps, &s).unwrap();
        for (a, b) in x1.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() < 1e-4);
        }

        let s2 = schedule_1000();
        let zero = Mat::zeros(1, 2);
        let xt = forward_diffuse(&zero, 400, &eps, &s2).unwrap();
        let want = (1.0 - s2.alpha_bar(400)).sqrt();
        for v in xt.as_slice() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_diffuse_scalar_case() {
        // x0=1, eps=0.5, alpha_bar=0.25 -> 0.5 + 0.8660*0.5 = 0.9330
        let beta = 0.75;
        let s = linear_schedule(1, beta, beta).unwrap();
        assert!((s.alpha_bar(1) - 0.25).abs() < 1e-12);
        let x0 = Mat::from_vec(1, 1, vec![1.0f64]);
        let eps = Mat::from_vec(1, 1, vec![0.5f64]);
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        assert!((xt.get(0, 0) - 0.9330127).abs() < 1e-6);
    }

    #[test]
    fn forward_diffuse_validates() {
        let s = schedule_1000();
        let x0 = Mat::<f64>::zeros(2, 2);
        let eps = Mat::<f64>::zeros(2, 3);
        assert!(forward_diffuse(&x0, 0, &x0, &s).is_err());
        assert!(forward_diffuse(&x0, 1001, &x0, &s).is_err());
        assert!(forward_diffuse(&x0, 5, &eps, &s).is_err());
    }

    #[test]
    fn fresh_time_embedding_is_zero() {
        let params = ModelParams::<f32>::init(&diff_config(), 1).unwrap();
        let s = schedule_1000();
        let emb = timestep_embedding(17, &params, &s).unwrap();
        assert!(emb.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_embedding_is_deterministic_and_freq_features_alternate() {
        let params = ModelParams::<f32>::init(&diff_config(), 1).unwrap();
        let s = schedule_1000();
        let a = timestep_embedding(7, &params, &s).unwrap();
        let b = timestep_embedding(7, &params, &s).unwrap();
        assert_eq!(a, b);
        assert!(timestep_embedding(0, &params, &s).is_err());

        let f = timestep_frequency_features::<f64>(0, 8);
        assert_eq!(f.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn adaln_with_zero_time_is_plain_layer_norm() {
        let params = ModelParams::<f64>::init(&diff_config(), 2).unwrap();
        let mut r = rng::seeded(3);
        let latent = rng::normal_mat::<f64, _>(4, 8, 1.0, &mut r);
        let zero_time = Mat::zeros(1, 8);
        let out = adaln_modulate(&latent, &zero_time, &params).unwrap();
        let (normed, _, _) = layer_norm_rows(&latent);
        assert_eq!(out, normed);
    }

    #[test]
    fn adaln_constant_row_returns_beta() {
        let mut params = ModelParams::<f64>::init(&diff_config(), 2).unwrap();
        let mut r = rng::seeded(4);
        rng::fill_normal(&mut params.adaln_beta, 0.5, &mut r);
        let latent = Mat::from_fn(1, 8, |_, _| 3.25);
        let time = rng::normal_mat::<f64, _>(1, 8, 1.0, &mut r);
        let beta = time.matmul(&params.adaln_beta);
        let out = adaln_modulate(&latent, &time, &params).unwrap();
        for j in 0..8 {
            assert!((out.get(0, j) - beta.get(0, j)).abs() < 1e-9, "col {j}");
        }
    }

    #[test]
    fn adaln_matches_scalar_oracle_width_two() {
        let config = TransformerConfig {
            model_dim: 2,
            num_heads: 1,
            latent_token_width: 2,
            ..diff_config()
        };
        let mut params = ModelParams::<f64>::init(&config, 5).unwrap();
        params.adaln_gamma = Mat::from_vec(2, 2, vec![0.3, -0.1, 0.2, 0.4]);
        params.adaln_beta = Mat::from_vec(2, 2, vec![-0.2, 0.5, 0.1, 0.0]);
        let time = Mat::from_vec(1, 2, vec![1.0, -1.0]);
        let latent = Mat::from_vec(1, 2, vec![0.6, -0.8]);
        let out = adaln_modulate(&latent, &time, &params).unwrap();

        // hand LN + affine
        let mean = (0.6 - 0.8) / 2.0;
        let var = ((0.6f64 - mean).powi(2) + (-0.8f64 - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let n = [(0.6 - mean) * inv, (-0.8 - mean) * inv];
        let gamma = [0.3 - 0.2, -0.1 - 0.4];
        let beta = [-0.2 - 0.1, 0.5];
        for j in 0..2 {
            let want = n[j] * (1.0 + gamma[j]) + beta[j];
            assert!((out.get(0, j) - want).abs() < 1e-12, "col {j}");
        }
    }

    #[test]
    fn head_is_finite_nonzero_at_init_and_stable_on_zero_rows() {
        let params = ModelParams::<f32>::init(&diff_config(), 6).unwrap();
        let mut r = rng::seeded(7);
        let hidden = rng::normal_mat::<f32, _>(3, 8, 1.0, &mut r);
        let out = diffusion_head(&hidden, &params).unwrap();
        assert!(out.is_all_finite());
        assert!(out.as_slice().iter().any(|&v| v != 0.0));

        let zeros = Mat::zeros(2, 8);
        let out0 = diffusion_head(&zeros, &params).unwrap();
        assert!(out0.is_all_finite(), "epsilon-stabilized LN must not NaN");
    }

    #[test]
    fn head_matches_scalar_oracle_width_two() {
        let config = TransformerConfig {
            model_dim: 2,
            num_heads: 1,
            latent_token_width: 2,
            ..diff_config()
        };
        let mut params = ModelParams::<f64>::init(&config, 8).unwrap();
        params.head_w1 = Mat::from_vec(2, 2, vec![0.5, -0.3, 0.2, 0.7]);
        params.head_b1 = Mat::from_vec(1, 2, vec![0.1, -0.2]);
        params.head_w2 = Mat::from_vec(2, 2, vec![1.0, 0.0, -0.5, 0.25]);
        params.head_b2 = Mat::from_vec(1, 2, vec![0.05, 0.0]);
        let hidden = Mat::from_vec(1, 2, vec![0.9, -0.3]);
        let got = diffusion_head(&hidden, &params).unwrap();

        let mean = (0.9 - 0.3) / 2.0;
        let var = ((0.9f64 - mean).powi(2) + (-0.3f64 - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let n = [(0.9 - mean) * inv, (-0.3 - mean) * inv];
        let z = [
            n[0] * 0.5 + n[1] * 0.2 + 0.1,
            n[0] * -0.3 + n[1] * 0.7 - 0.2,
        ];
        let sl = |x: f64| x / (1.0 + (-x).exp());
        let a = [sl(z[0]), sl(z[1])];
        let want = [
            a[0] * 1.0 + a[1] * -0.5 + 0.05,
            a[0] * 0.0 + a[1] * 0.25,
        ];
        for j in 0..2 {
            assert!((got.get(0, j) - want[j]).abs() < 1e-12, "col {j}");
        }
    }

    #[test]
    fn loss_basics_and_loop_oracle() {
        let mut r = rng::seeded(9);
        let a = rng::normal_mat::<f64, _>(3, 4, 1.0, &mut r);
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);

        let mut b = a.clone();
        for v in b.as_mut_slice() {
            *v += 1.0;
        }
        assert!((diffusion_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);

        let c = rng::normal_mat::<f64, _>(3, 4, 1.0, &mut r);
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                want += (a.get(i, j) - c.get(i, j)).powi(2);
            }
        }
        want /= 12.0;
        assert!((diffusion_loss(&a, &c).unwrap() - want).abs() < 1e-12);

        let d = Mat::<f64>::zeros(2, 2);
        assert!(diffusion_loss(&a, &d).is_err());
    }

    #[test]
    fn loss_grad_matches_finite_difference() {
        let mut r = rng::seeded(10);
        let mut pred = rng::normal_mat::<f64, _>(2, 3, 1.0, &mut r);
        let eps = rng::normal_mat::<f64, _>(2, 3, 1.0, &mut r);
        let (_, grad) = diffusion_loss_with_grad(&pred, &eps).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let orig = pred.get(i, j);
                pred.set(i, j, orig + h);
                let up = diffusion_loss(&pred, &eps).unwrap();
                pred.set(i, j, orig - h);
                let down = diffusion_loss(&pred, &eps).unwrap();
                pred.set(i, j, orig);
                let fd = (up - down) / (2.0 * h);
                assert!((grad.get(i, j) - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ddpm_step_inverts_single_step_corruption() {
        let s = schedule_1000();
        let mut r = rng::seeded(11);
        let x0 = rng::normal_mat::<f64, _>(2, 3, 1.0, &mut r);
        let eps = rng::normal_mat::<f64, _>(2, 3, 1.0, &mut r);
        let x1 = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let back = ddpm_step(&x1, &eps, 1, &s, None).unwrap();
        for (a, b) in back.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn ddpm_step_is_noop_for_tiny_beta() {
        let s = linear_schedule(10, 1e-12, 1e-12).unwrap();
        let mut r = rng::seeded(12);
        let x = rng::normal_mat::<f64, _>(2, 2, 1.0, &mut r);
        let eps = rng::normal_mat::<f64, _>(2, 2, 1.0, &mut r);
        let stepped = ddpm_step(&x, &eps, 5, &s, None).unwrap();
        for (a, b) in stepped.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sigma_at_t1_is_zero() {
        let s = schedule_1000();
        assert_eq!(posterior_sigma(&s, 1, 0), 0.0);
        assert!(posterior_sigma(&s, 2, 1) > 0.0);
        // z must not matter at t = 1
        let x = Mat::from_vec(1, 2, vec![0.3f64, -0.9]);
        let eps = Mat::from_vec(1, 2, vec![0.1f64, 0.2]);
        let z = Mat::from_vec(1, 2, vec![100.0f64, -100.0]);
        let with_z = ddpm_step(&x, &eps, 1, &s, Some(&z)).unwrap();
        let without = ddpm_step(&x, &eps, 1, &s, None).unwrap();
        assert_eq!(with_z, without);
    }

    #[test]
    fn ddpm_step_validates_timestep() {
        let s = schedule_1000();
        let x = Mat::<f64>::zeros(1, 1);
        assert!(ddpm_step(&x, &x, 0, &s, None).is_err());
        assert!(ddpm_step(&x, &x, 1001, &s, None).is_err());
    }

    #[test]
    fn cfg_endpoints_and_affinity() {
        let mut r = rng::seeded(13);
        let cond = rng::normal_mat::<f32, _>(2, 3, 1.0, &mut r);
        let uncond = rng::normal_mat::<f32, _>(2, 3, 1.0, &mut r);
        assert_eq!(cfg_combine(&cond, &uncond, 1.0).unwrap(), cond);
        assert_eq!(cfg_combine(&cond, &uncond, 0.0).unwrap(), uncond);

        // eps_uncond = 0, eps_cond = 1, scale = 1.5 -> 1.5
        let ones = Mat::from_fn(1, 2, |_, _| 1.0f64);
        let zeros = Mat::<f64>::zeros(1, 2);
        let combined = cfg_combine(&ones, &zeros, 1.5).unwrap();
        assert!(combined.as_slice().iter().all(|&v| (v - 1.5).abs() < 1e-12));

        // cfg(a, a, s) = a for all s
        for &s in &[0.0, 0.3, 1.0, 2.5, 7.0] {
            let same = cfg_combine(&cond, &cond, s).unwrap();
            for (x, y) in same.as_slice().iter().zip(cond.as_slice()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert!(cfg_combine(&cond, &uncond, -0.5).is_err());
    }

    #[test]
    fn strided_timesteps_cover_range() {
        let s = schedule_1000();
        let taus = strided_timesteps(&s, 250).unwrap();
        assert_eq!(taus.first(), Some(&1000));
        assert_eq!(taus.last(), Some(&1));
        assert!(taus.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(taus.len(), 250);

        let full = strided_timesteps(&s, 1000).unwrap();
        assert_eq!(full.len(), 1000);
        let one = strided_timesteps(&s, 1).unwrap();
        assert_eq!(one, vec![1000]);
    }
}
