//! Named verification suites behind the `verify` CLI command: mask
//! semantics, gradient oracles, schedule fidelity, and round-trips. Each
//! check yields one machine-readable pass/fail line.

use rand::Rng;

use crate::autoregression::Vocabulary;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::codec::{decode, encode, patchify, unpatchify, ImageTensor};
use crate::diffusion::{forward_diffuse, linear_schedule};
use crate::error::{Error, Result};
use crate::gradcheck::{run_standard_check, CheckOpts, REL_TOL};
use crate::mat::Mat;
use crate::masking::{build_causal_mask, build_hybrid_mask, masked_attention, AttentionMask, SequenceLayout};
use crate::pipeline::{diff_forward_traced, DiffusionInput};
use crate::rng;
use crate::training::AdamState;
use crate::transformer::{transformer_forward, LatentAttention, ModelParams, TransformerConfig};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

pub const SUITES: [&str; 4] = ["masks", "gradients", "schedule", "roundtrip"];

/// Options forwarded from the CLI.
#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOpts {
    /// Flip one analytic gradient entry; the gradients suite must then fail.
    pub negative_control: bool,
    /// Element stride for the gradient check (1 = every element).
    pub gradient_stride: usize,
}

pub fn run_suite(name: &str, opts: VerifyOpts) -> Result<Vec<CheckResult>> {
    match name {
        "masks" => Ok(masks_suite()),
        "gradients" => gradients_suite(opts),
        "schedule" => Ok(schedule_suite()),
        "roundtrip" => roundtrip_suite(),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, opts)?);
            }
            Ok(out)
        }
        other => Err(Error::invalid(format!(
            "unknown suite '{other}'; expected one of masks|gradients|schedule|roundtrip|all"
        ))),
    }
}

fn small_model(seed: u64) -> ModelParams<f32> {
    let config = TransformerConfig {
        depth: 2,
        model_dim: 16,
        num_heads: 4,
        ffn_dim: 32,
        vocab_size: Vocabulary::SIZE,
        max_seq_len: 32,
        latent_token_width: 12,
    };
    ModelParams::init(&config, seed).expect("small model config is valid")
}

fn masks_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();

    // printed 7x7 causal pattern
    {
        let m = build_causal_mask(7).unwrap();
        let ok = (0..7).all(|i| (0..7).all(|j| m.is_allowed(i, j) == (j <= i)));
        out.push(CheckResult::new(
            "masks.causal_7x7_pattern",
            ok,
            "lower-triangular open entries",
        ));
    }

    // printed 7x7 hybrid pattern (3 text + 4 image)
    {
        let m = build_hybrid_mask(SequenceLayout::new(3, 4).unwrap()).unwrap();
        let ok = (0..7).all(|i| {
            (0..7).all(|j| {
                let want = if i >= 3 { true } else { j <= i };
                m.is_allowed(i, j) == want
            })
        });
        out.push(CheckResult::new(
            "masks.hybrid_3text_4image_pattern",
            ok,
            "causal prefix rows, fully open image rows",
        ));
    }

    // end-to-end causality through the backbone
    {
        let mut worst = true;
        'outer: for trial in 0..20u64 {
            let params = small_model(100 + trial);
            let mut r = rng::seeded(trial);
            let n = 8;
            let input = rng::normal_mat::<f32, _>(n, 16, 1.0, &mut r);
            let mask = build_causal_mask(n).unwrap();
            let base = transformer_forward(&input, &mask, &params).unwrap();
            for j in 1..n {
                let mut p = input.clone();
                p.set(j, 0, p.get(j, 0) + 1.0);
                let o = transformer_forward(&p, &mask, &params).unwrap();
                for i in 0..j {
                    if o.row(i) != base.row(i) {
                        worst = false;
                        break 'outer;
                    }
                }
            }
        }
        out.push(CheckResult::new(
            "masks.causal_perturbation",
            worst,
            "20 random models, bit-exact prefix outputs",
        ));
    }

    // hybrid isolation through the full diffusion forward
    {
        let params = small_model(7);
        let schedule = linear_schedule(100, 1e-4, 2e-2).unwrap();
        let mut r = rng::seeded(3);
        let text = [Vocabulary::BOS, 110, 111, Vocabulary::SI];
        let a = rng::normal_mat::<f32, _>(4, 12, 1.0, &mut r);
        let b = rng::normal_mat::<f32, _>(4, 12, 1.0, &mut r);
        let run = |tok: &Mat<f32>| {
            diff_forward_traced(
                &params,
                &DiffusionInput {
                    text_tokens: &text,
                    drop_text: false,
                    noised_tokens: tok,
                    timestep: 9,
                    latent_attention: LatentAttention::Bidirectional,
                },
                &schedule,
            )
            .unwrap()
        };
        let ta = run(&a);
        let tb = run(&b);
        let text_fixed = (0..text.len())
            .all(|i| ta.backbone_output_row(i) == tb.backbone_output_row(i));
        out.push(CheckResult::new(
            "masks.hybrid_isolation",
            text_fixed,
            "image perturbations never reach text rows",
        ));
    }

    // attention rows are probability distributions: with V = I the output
    // of masked_attention is exactly the weight matrix
    {
        let mut r = rng::seeded(4);
        let n = 10;
        let q = rng::normal_mat::<f32, _>(n, n, 1.0, &mut r);
        let k = rng::normal_mat::<f32, _>(n, n, 1.0, &mut r);
        let eye = Mat::from_fn(n, n, |i, j| if i == j { 1.0f32 } else { 0.0 });
        let mask = build_causal_mask(n).unwrap();
        let probs = masked_attention(&q, &k, &eye, &mask).unwrap();
        let mut ok = true;
        for i in 0..n {
            let sum: f32 = probs.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                ok = false;
            }
            for j in 0..n {
                let w = probs.get(i, j);
                if w < 0.0 || (j > i && w > 1e-8) {
                    ok = false;
                }
            }
        }
        out.push(CheckResult::new(
            "masks.row_stochastic",
            ok,
            "weights nonnegative, rows sum to 1 within 1e-6, masked below 1e-8",
        ));
    }

    // all-zero bias equals unmasked attention exactly
    {
        let mut r = rng::seeded(5);
        let n = 6;
        let d = 8;
        let q = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let k = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let v = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let open = AttentionMask::from_predicate(n, |_, _| true).unwrap();
        let got = masked_attention(&q, &k, &v, &open).unwrap();
        // reference without any bias application
        let mut scores = q.matmul_bt(&k);
        scores.scale(1.0 / (d as f32).sqrt());
        let zero = vec![0.0f64; n];
        for i in 0..n {
            crate::masking::softmax_biased_row(scores.row_mut(i), &zero);
        }
        let want = scores.matmul(&v);
        out.push(CheckResult::new(
            "masks.zero_bias_equivalence",
            got == want,
            "bit-equal to unmasked attention",
        ));
    }

    out
}

fn gradients_suite(opts: VerifyOpts) -> Result<Vec<CheckResult>> {
    let report = run_standard_check(
        11,
        CheckOpts {
            stride: opts.gradient_stride.max(1),
            inject_sign_bug: opts.negative_control,
        },
    )?;
    let mut out = Vec::new();
    for path in ["ar", "diffusion"] {
        let worst = report
            .groups
            .iter()
            .filter(|g| g.path == path)
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max);
        let checked: usize = report
            .groups
            .iter()
            .filter(|g| g.path == path)
            .map(|g| g.elements)
            .sum();
        out.push(CheckResult::new(
            &format!("gradients.{path}_path"),
            worst < REL_TOL,
            format!("max_rel_err={worst:.3e} over {checked} elements (tol {REL_TOL:.0e})"),
        ));
    }
    Ok(out)
}

fn schedule_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let s = linear_schedule(1000, 1e-4, 2e-2).unwrap();

    out.push(CheckResult::new(
        "schedule.endpoints",
        s.beta(1) == 1e-4 && s.beta(1000) == 2e-2,
        format!("beta_1={}, beta_1000={}", s.beta(1), s.beta(1000)),
    ));
    out.push(CheckResult::new(
        "schedule.alpha_bar_first",
        s.alpha_bar(1) == 0.9999,
        format!("alpha_bar_1={}", s.alpha_bar(1)),
    ));
    let monotone = (2..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1));
    out.push(CheckResult::new(
        "schedule.alpha_bar_monotone",
        monotone,
        "strictly decreasing over 1000 steps",
    ));
    let identity = (1..=1000).all(|t| s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t));
    out.push(CheckResult::new(
        "schedule.product_identity",
        identity,
        "alpha_bar(t) = alpha_bar(t-1) * alpha(t) exactly as computed",
    ));

    // forward marginal statistics at t in {1, 500, 1000}
    let x0_val = 0.7f64;
    let n = 10_000usize;
    let mut stats_ok = true;
    let mut detail = String::new();
    for (k, &t) in [1usize, 500, 1000].iter().enumerate() {
        let ab = s.alpha_bar(t);
        let want_mean = ab.sqrt() * x0_val;
        let want_var = 1.0 - ab;
        let mut r = rng::substream(900 + k as u64, 1);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let x0 = Mat::from_vec(1, 1, vec![x0_val]);
        for _ in 0..n {
            let eps = rng::normal_mat::<f64, _>(1, 1, 1.0, &mut r);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap().get(0, 0);
            sum += xt;
            sumsq += xt * xt;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / n as f64).sqrt();
        let ok_t = (mean - want_mean).abs() < 3.0 * se_mean.max(1e-9)
            && (var - want_var).abs() < 3.0 * se_var.max(1e-9);
        stats_ok &= ok_t;
        detail.push_str(&format!("t={t}: mean err {:.2e}; ", (mean - want_mean).abs()));
    }
    out.push(CheckResult::new(
        "schedule.forward_marginals",
        stats_ok,
        format!("{n} samples within 3 standard errors ({detail})"),
    ));

    // final-step determinism convention
    let sigma1_zero = {
        let x = Mat::from_vec(1, 1, vec![0.4f64]);
        let e = Mat::from_vec(1, 1, vec![0.1f64]);
        let z = Mat::from_vec(1, 1, vec![1000.0f64]);
        let a = crate::diffusion::ddpm_step(&x, &e, 1, &s, Some(&z)).unwrap();
        let b = crate::diffusion::ddpm_step(&x, &e, 1, &s, None).unwrap();
        a == b
    };
    out.push(CheckResult::new(
        "schedule.sigma1_zero",
        sigma1_zero,
        "step noise is ignored at t=1 (alpha_bar_0 = 1)",
    ));

    out
}

fn roundtrip_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    {
        let mut r = rng::seeded(6);
        let mut ok = true;
        for _ in 0..20 {
            let data: Vec<f32> = (0..8 * 8 * 3).map(|_| r.gen::<f32>()).collect();
            let img = ImageTensor::new(8, 8, 3, data).unwrap();
            let back = decode(&encode(&img)?);
            if img
                .data
                .iter()
                .zip(&back.data)
                .any(|(a, b)| (a - b).abs() > 1e-6)
            {
                ok = false;
            }
        }
        out.push(CheckResult::new(
            "roundtrip.codec_affine",
            ok,
            "decode(encode(x)) within 1e-6 on random images",
        ));
    }

    {
        let mut r = rng::seeded(7);
        let data: Vec<f32> = (0..8 * 8 * 3).map(|_| r.gen::<f32>()).collect();
        let img = ImageTensor::new(8, 8, 3, data).unwrap();
        let latent = encode(&img)?;
        let ok = [1usize, 2, 4].iter().all(|&p| {
            let tokens = patchify(&latent, p).unwrap();
            unpatchify(&tokens).unwrap() == latent
        });
        out.push(CheckResult::new(
            "roundtrip.patchify_identity",
            ok,
            "unpatchify(patchify(z, p)) exact for p in {1, 2, 4}",
        ));
    }

    {
        let text = "tokens -> bytes -> tokens \u{1F980}";
        let ok = Vocabulary::decode(&Vocabulary::encode(text)) == text;
        out.push(CheckResult::new(
            "roundtrip.vocabulary_bytes",
            ok,
            "byte strings survive encode/decode exactly",
        ));
    }

    {
        let params = small_model(8);
        let opt = AdamState::new(&params);
        let path = std::env::temp_dir().join(format!("tdm_verify_ckpt_{}", std::process::id()));
        save_checkpoint(&params, &params, &opt, &serde_json::json!({}), 5, &path)?;
        let loaded = load_checkpoint(&path)?;
        let ok = loaded.step == 5
            && loaded
                .params
                .named_tensors()
                .iter()
                .zip(params.named_tensors())
                .all(|((_, a), (_, b))| a.as_slice() == b.as_slice());
        std::fs::remove_file(&path).ok();
        out.push(CheckResult::new(
            "roundtrip.checkpoint_bits",
            ok,
            "save/load restores every tensor bit-exactly",
        ));
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_fast_suites() {
        for suite in ["masks", "schedule", "roundtrip"] {
            let results = run_suite(suite, VerifyOpts::default()).unwrap();
            assert!(!results.is_empty());
            for r in &results {
                assert!(r.passed, "{}", r.line());
            }
        }
    }

    #[test]
    fn unknown_suite_is_usage_error() {
        assert!(run_suite("bogus", VerifyOpts::default()).is_err());
    }

    #[test]
    fn negative_control_fails_gradients() {
        let results = run_suite(
            "gradients",
            VerifyOpts {
                negative_control: true,
                gradient_stride: 13,
            },
        )
        .unwrap();
        assert!(results.iter().any(|r| !r.passed));
    }
}
