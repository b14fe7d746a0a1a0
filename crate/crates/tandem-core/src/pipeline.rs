//! End-to-end forward/backward composition of the two generation paths.
//!
//! Both paths run the same backbone; they differ only in the attention mask,
//! the input construction, and the output head. The traces returned here own
//! everything the reverse pass needs, so a training step is
//! `forward -> loss grad -> backward`.

use crate::diffusion::{
    adaln_backward, adaln_traced, diffusion_head_backward, diffusion_head_traced,
    timestep_embedding_backward, timestep_embedding_traced, AdalnTrace, DiffusionSchedule,
    HeadTrace, TimeTrace,
};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::masking::{build_causal_mask, build_hybrid_mask, SequenceLayout};
use crate::real::Real;
use crate::transformer::{
    embed_tokens, sincos_positional_embedding, transformer_backward, transformer_forward_traced,
    ForwardTrace, LatentAttention, ModelParams,
};

// ---------------------------------------------------------------------------
// Autoregressive path
// ---------------------------------------------------------------------------

pub struct ArTrace<T: Real> {
    tokens: Vec<u32>,
    backbone: ForwardTrace<T>,
    pub logits: Mat<T>,
}

/// Embed tokens, add positions, run the backbone under the causal mask, and
/// project to vocabulary logits.
pub fn ar_forward_traced<T: Real>(tokens: &[u32], params: &ModelParams<T>) -> Result<ArTrace<T>> {
    if tokens.is_empty() {
        return Err(Error::invalid("AR forward needs at least one token"));
    }
    let mut input = embed_tokens(tokens, params)?;
    let pos = sincos_positional_embedding::<T>(tokens.len(), params.config.model_dim)?;
    input.add_assign(&pos);
    let mask = build_causal_mask(tokens.len())?;
    let backbone = transformer_forward_traced(&input, &mask, params)?;
    let logits = backbone.output.matmul(&params.ar_head);
    Ok(ArTrace {
        tokens: tokens.to_vec(),
        backbone,
        logits,
    })
}

/// Reverse pass from dL/dlogits into every parameter the AR path touches.
pub fn ar_backward<T: Real>(
    trace: &ArTrace<T>,
    d_logits: &Mat<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) {
    trace
        .backbone
        .output
        .matmul_at_acc(d_logits, &mut grads.ar_head);
    let d_output = d_logits.matmul_bt(&params.ar_head);
    let d_input = transformer_backward(&trace.backbone, &d_output, params, grads);
    for (i, &id) in trace.tokens.iter().enumerate() {
        let dst = grads.token_embedding.row_mut(id as usize);
        for (d, &v) in dst.iter_mut().zip(d_input.row(i)) {
            *d += v;
        }
    }
}

// ---------------------------------------------------------------------------
// Diffusion path
// ---------------------------------------------------------------------------

pub struct DiffusionInput<'a, T: Real> {
    /// Text prefix token ids, ending with the image-start token.
    pub text_tokens: &'a [u32],
    /// Replace every text embedding with the learned null-condition token
    /// (classifier-free guidance dropout); the layout stays fixed.
    pub drop_text: bool,
    /// Noised latent tokens at the given timestep, one row per token.
    pub noised_tokens: &'a Mat<T>,
    pub timestep: usize,
    pub latent_attention: LatentAttention,
}

pub struct DiffTrace<T: Real> {
    text_tokens: Vec<u32>,
    drop_text: bool,
    noised_tokens: Mat<T>,
    time: TimeTrace<T>,
    adaln: AdalnTrace<T>,
    backbone: ForwardTrace<T>,
    head: HeadTrace<T>,
    text_len: usize,
    pub eps_pred: Mat<T>,
}

impl<T: Real> DiffTrace<T> {
    /// Backbone output row (pre-head hidden state) at sequence position `i`.
    pub fn backbone_output_row(&self, i: usize) -> &[T] {
        self.backbone.output.row(i)
    }
}

/// Assemble `[text embeddings ‖ AdaLN(proj(z_t) + positions, t)]`, run the
/// backbone under the hybrid mask (or fully causal mask for the ablation),
/// and predict the noise at the image positions.
pub fn diff_forward_traced<T: Real>(
    params: &ModelParams<T>,
    input: &DiffusionInput<'_, T>,
    schedule: &DiffusionSchedule,
) -> Result<DiffTrace<T>> {
    let d = params.config.model_dim;
    let text_len = input.text_tokens.len();
    let n_img = input.noised_tokens.rows();
    if n_img == 0 {
        return Err(Error::invalid("diffusion forward needs at least one latent token"));
    }
    if input.noised_tokens.cols() != params.config.latent_token_width {
        return Err(Error::invalid(format!(
            "latent token width {} does not match config {}",
            input.noised_tokens.cols(),
            params.config.latent_token_width
        )));
    }
    let n = text_len + n_img;
    let pos = sincos_positional_embedding::<T>(n, d)?;

    let mut stacked = Mat::zeros(n, d);
    for i in 0..text_len {
        let emb = if input.drop_text {
            params.null_cond_embedding.row(0)
        } else {
            let id = input.text_tokens[i] as usize;
            if id >= params.config.vocab_size {
                return Err(Error::invalid(format!("token id {id} out of range")));
            }
            params.token_embedding.row(id)
        };
        let row = stacked.row_mut(i);
        for (r, (&e, &p)) in row.iter_mut().zip(emb.iter().zip(pos.row(i))) {
            *r = e + p;
        }
    }

    let time = timestep_embedding_traced(input.timestep, params, schedule)?;

    let mut lat = input.noised_tokens.matmul(&params.latent_proj);
    for i in 0..n_img {
        let row = lat.row_mut(i);
        for (r, &p) in row.iter_mut().zip(pos.row(text_len + i)) {
            *r += p;
        }
    }
    let adaln = adaln_traced(&lat, &time.emb, params)?;
    for i in 0..n_img {
        stacked
            .row_mut(text_len + i)
            .copy_from_slice(adaln.out.row(i));
    }

    let mask = match input.latent_attention {
        LatentAttention::Bidirectional => {
            build_hybrid_mask(SequenceLayout::new(text_len, n_img)?)?
        }
        LatentAttention::Causal => build_causal_mask(n)?,
    };
    let backbone = transformer_forward_traced(&stacked, &mask, params)?;
    let img_hidden = backbone.output.rows_slice(text_len, n_img);
    let head = diffusion_head_traced(&img_hidden, params)?;
    let eps_pred = head.out.clone();

    Ok(DiffTrace {
        text_tokens: input.text_tokens.to_vec(),
        drop_text: input.drop_text,
        noised_tokens: input.noised_tokens.clone(),
        time,
        adaln,
        backbone,
        head,
        text_len,
        eps_pred,
    })
}

/// Reverse pass from dL/d(eps_pred) into every parameter the diffusion path
/// touches: head, backbone, AdaLN maps, timestep MLP, latent projection, and
/// the text (or null-condition) embeddings.
pub fn diff_backward<T: Real>(
    trace: &DiffTrace<T>,
    d_eps: &Mat<T>,
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
) {
    let d = params.config.model_dim;
    let n_img = trace.noised_tokens.rows();
    let n = trace.text_len + n_img;

    let d_img_hidden = diffusion_head_backward(&trace.head, d_eps, params, grads);

    let mut d_output = Mat::zeros(n, d);
    for i in 0..n_img {
        d_output
            .row_mut(trace.text_len + i)
            .copy_from_slice(d_img_hidden.row(i));
    }
    let d_input = transformer_backward(&trace.backbone, &d_output, params, grads);

    let d_lat_mod = d_input.rows_slice(trace.text_len, n_img);
    let (d_lat, d_time) = adaln_backward(&trace.adaln, &trace.time.emb, &d_lat_mod, params, grads);
    // positions are constant; the projection sees d_lat directly
    trace
        .noised_tokens
        .matmul_at_acc(&d_lat, &mut grads.latent_proj);
    timestep_embedding_backward(&trace.time, &d_time, params, grads);

    for i in 0..trace.text_len {
        let src = d_input.row(i);
        let dst = if trace.drop_text {
            grads.null_cond_embedding.row_mut(0)
        } else {
            grads.token_embedding.row_mut(trace.text_tokens[i] as usize)
        };
        for (dv, &v) in dst.iter_mut().zip(src) {
            *dv += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoregression::Vocabulary;
    use crate::diffusion::linear_schedule;
    use crate::rng;
    use crate::transformer::TransformerConfig;

    fn config() -> TransformerConfig {
        TransformerConfig {
            depth: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: Vocabulary::SIZE,
            max_seq_len: 32,
            latent_token_width: 12,
        }
    }

    #[test]
    fn diffusion_forward_shapes_and_determinism() {
        let params = ModelParams::<f32>::init(&config(), 3).unwrap();
        let schedule = linear_schedule(100, 1e-4, 2e-2).unwrap();
        let mut r = rng::seeded(5);
        let noised = rng::normal_mat::<f32, _>(4, 12, 1.0, &mut r);
        let text = [Vocabulary::BOS, 99, 100, Vocabulary::SI];
        let input = DiffusionInput {
            text_tokens: &text,
            drop_text: false,
            noised_tokens: &noised,
            timestep: 50,
            latent_attention: LatentAttention::Bidirectional,
        };
        let a = diff_forward_traced(&params, &input, &schedule).unwrap();
        let b = diff_forward_traced(&params, &input, &schedule).unwrap();
        assert_eq!(a.eps_pred.shape(), (4, 12));
        assert_eq!(a.eps_pred, b.eps_pred);
        assert!(a.eps_pred.is_all_finite());
    }

    #[test]
    fn dropping_text_changes_prediction_only_via_null_token() {
        let mut params = ModelParams::<f32>::init(&config(), 4).unwrap();
        let schedule = linear_schedule(100, 1e-4, 2e-2).unwrap();
        let mut r = rng::seeded(6);
        // make the latent projection nonzero so image tokens carry signal
        rng::fill_normal(&mut params.latent_proj, 0.1, &mut r);
        let noised = rng::normal_mat::<f32, _>(4, 12, 1.0, &mut r);
        let text = [Vocabulary::BOS, 50, Vocabulary::SI];
        let mk = |drop| DiffusionInput {
            text_tokens: &text,
            drop_text: drop,
            noised_tokens: &noised,
            timestep: 10,
            latent_attention: LatentAttention::Bidirectional,
        };
        let cond = diff_forward_traced(&params, &mk(false), &schedule).unwrap();
        let uncond = diff_forward_traced(&params, &mk(true), &schedule).unwrap();
        assert_ne!(cond.eps_pred, uncond.eps_pred);
    }

    #[test]
    fn text_rows_are_untouched_by_latent_tokens_under_hybrid_mask() {
        // The hybrid mask isolates text rows from image rows end to end.
        let mut params = ModelParams::<f32>::init(&config(), 7).unwrap();
        let schedule = linear_schedule(100, 1e-4, 2e-2).unwrap();
        let mut r = rng::seeded(8);
        rng::fill_normal(&mut params.latent_proj, 0.2, &mut r);
        let text = [Vocabulary::BOS, 10, 20, Vocabulary::SI];
        let a_tokens = rng::normal_mat::<f32, _>(4, 12, 1.0, &mut r);
        let b_tokens = rng::normal_mat::<f32, _>(4, 12, 1.0, &mut r);
        let run = |tok: &Mat<f32>| {
            diff_forward_traced(
                &params,
                &DiffusionInput {
                    text_tokens: &text,
                    drop_text: false,
                    noised_tokens: tok,
                    timestep: 5,
                    latent_attention: LatentAttention::Bidirectional,
                },
                &schedule,
            )
            .unwrap()
        };
        let ta = run(&a_tokens);
        let tb = run(&b_tokens);
        for i in 0..text.len() {
            assert_eq!(
                ta.backbone.output.row(i),
                tb.backbone.output.row(i),
                "text row {i} depends on latent tokens"
            );
        }
        assert_ne!(ta.eps_pred, tb.eps_pred);
    }
}
