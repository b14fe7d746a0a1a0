//! Attention masks and masked scaled-dot-product attention.
//!
//! Two mask shapes drive the whole model: the causal mask used for text
//! autoregression, and the hybrid mask used for diffusion, where a causal
//! text prefix is followed by image-latent positions that attend to every
//! position. Masks are additive logit biases: 0 keeps an entry, [`NEG_INF`]
//! removes it.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

/// Large negative finite bias standing in for -inf. Finite so that
/// `0 * masked_value` stays 0 instead of producing NaN; after softmax the
/// masked weights underflow to exactly zero.
pub const NEG_INF: f64 = -1e9;

/// Additive attention bias with entries in {0, NEG_INF}.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n: usize,
    bias: Mat<f64>,
}

impl AttentionMask {
    /// Builds a mask from a predicate `allowed(i, j)`; validates that no row
    /// is fully masked (softmax must stay defined).
    pub fn from_predicate(n: usize, allowed: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("attention mask requires n >= 1"));
        }
        let mut bias = Mat::zeros(n, n);
        for i in 0..n {
            let mut any_open = false;
            for j in 0..n {
                if allowed(i, j) {
                    any_open = true;
                } else {
                    bias.set(i, j, NEG_INF);
                }
            }
            if !any_open {
                return Err(Error::invalid(format!("mask row {i} is fully masked")));
            }
        }
        Ok(Self { n, bias })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn bias(&self, i: usize, j: usize) -> f64 {
        self.bias.get(i, j)
    }

    #[inline]
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.bias.get(i, j) == 0.0
    }

    #[inline]
    pub(crate) fn bias_row(&self, i: usize) -> &[f64] {
        self.bias.row(i)
    }
}

/// Positions of the text prefix and the image-latent suffix in one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    text_len: usize,
    image_len: usize,
}

impl SequenceLayout {
    pub fn new(text_len: usize, image_len: usize) -> Result<Self> {
        if text_len + image_len == 0 {
            return Err(Error::invalid("sequence layout must have total length >= 1"));
        }
        Ok(Self { text_len, image_len })
    }

    #[inline]
    pub fn text_len(&self) -> usize {
        self.text_len
    }

    #[inline]
    pub fn image_len(&self) -> usize {
        self.image_len
    }

    #[inline]
    pub fn total(&self) -> usize {
        self.text_len + self.image_len
    }

    #[inline]
    pub fn is_image_pos(&self, i: usize) -> bool {
        i >= self.text_len
    }
}

/// Standard causal mask: position i attends to positions j <= i.
pub fn build_causal_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::invalid("causal mask requires n >= 1"));
    }
    AttentionMask::from_predicate(n, |i, j| j <= i)
}

/// Hybrid mask: the text prefix stays causal (and never sees image
/// positions); image positions attend to all text and all image positions.
pub fn build_hybrid_mask(layout: SequenceLayout) -> Result<AttentionMask> {
    AttentionMask::from_predicate(layout.total(), |i, j| {
        if layout.is_image_pos(i) {
            true
        } else {
            j <= i
        }
    })
}

/// Softmax over one row of logits with an additive bias, in place.
/// Max-subtraction keeps it stable; masked entries underflow to exactly 0.
pub(crate) fn softmax_biased_row<T: Real>(scores: &mut [T], bias: &[f64]) {
    debug_assert_eq!(scores.len(), bias.len());
    let mut max = T::from_f64(f64::NEG_INFINITY);
    for (s, &b) in scores.iter_mut().zip(bias) {
        *s += T::from_f64(b);
        if *s > max {
            max = *s;
        }
    }
    let mut sum = T::ZERO;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = T::ONE / sum;
    for s in scores.iter_mut() {
        *s *= inv;
    }
}

/// `softmax(Q Kᵀ / sqrt(d) + bias) V` with row-wise softmax.
pub fn masked_attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    mask: &AttentionMask,
) -> Result<Mat<T>> {
    let (n, d) = q.shape();
    if d == 0 {
        return Err(Error::invalid("attention requires d >= 1"));
    }
    if k.shape() != (n, d) || v.shape() != (n, d) {
        return Err(Error::invalid(format!(
            "attention shape mismatch: q={:?} k={:?} v={:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask.n() != n {
        return Err(Error::invalid(format!(
            "mask size {} does not match sequence length {n}",
            mask.n()
        )));
    }
    let scale = T::ONE / T::from_usize(d).sqrt();
    let mut scores = q.matmul_bt(k);
    scores.scale(scale);
    for i in 0..n {
        softmax_biased_row(scores.row_mut(i), mask.bias_row(i));
    }
    Ok(scores.matmul(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Loop oracle: entry (i, j) of the causal mask is open iff j <= i.
    fn causal_oracle(n: usize) -> Vec<Vec<bool>> {
        (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
    }

    #[test]
    fn causal_mask_seven_matches_printed_pattern() {
        // 7x7 lower-triangular: rows of unmasked prefixes 1..=7.
        let m = build_causal_mask(7).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let want = if j <= i { 0.0 } else { NEG_INF };
                assert_eq!(m.bias(i, j), want, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn causal_mask_single_position() {
        let m = build_causal_mask(1).unwrap();
        assert_eq!(m.n(), 1);
        assert_eq!(m.bias(0, 0), 0.0);
    }

    #[test]
    fn causal_mask_three_prefix_lengths() {
        let m = build_causal_mask(3).unwrap();
        let oracle = causal_oracle(3);
        for i in 0..3 {
            let open = (0..3).filter(|&j| m.is_allowed(i, j)).count();
            assert_eq!(open, i + 1);
            for j in 0..3 {
                assert_eq!(m.is_allowed(i, j), oracle[i][j]);
            }
        }
    }

    #[test]
    fn causal_mask_zero_is_invalid() {
        assert!(build_causal_mask(0).is_err());
    }

    #[test]
    fn hybrid_mask_three_text_four_image() {
        // Top 3 rows causal over the whole width, bottom 4 rows fully open.
        let layout = SequenceLayout::new(3, 4).unwrap();
        let m = build_hybrid_mask(layout).unwrap();
        assert_eq!(m.n(), 7);
        for i in 0..3 {
            for j in 0..7 {
                assert_eq!(m.is_allowed(i, j), j <= i, "text row {i}, col {j}");
            }
        }
        for i in 3..7 {
            for j in 0..7 {
                assert!(m.is_allowed(i, j), "image row {i}, col {j}");
            }
        }
    }

    #[test]
    fn hybrid_mask_degenerate_cases() {
        let pure_image = build_hybrid_mask(SequenceLayout::new(0, 5).unwrap()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!(pure_image.is_allowed(i, j));
            }
        }
        let pure_text = build_hybrid_mask(SequenceLayout::new(4, 0).unwrap()).unwrap();
        assert_eq!(pure_text, build_causal_mask(4).unwrap());
    }

    #[test]
    fn layout_rejects_empty() {
        assert!(SequenceLayout::new(0, 0).is_err());
    }

    #[test]
    fn attention_single_position_returns_v() {
        let q = Mat::from_vec(1, 2, vec![0.3f32, -1.0]);
        let k = Mat::from_vec(1, 2, vec![2.0f32, 0.5]);
        let v = Mat::from_vec(1, 2, vec![7.0f32, -3.0]);
        let mask = build_causal_mask(1).unwrap();
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(out.as_slice(), v.as_slice());
    }

    #[test]
    fn attention_causal_first_row_is_exactly_v0() {
        let mut r = rng::seeded(3);
        let q = rng::normal_mat::<f32, _>(2, 4, 1.0, &mut r);
        let k = rng::normal_mat::<f32, _>(2, 4, 1.0, &mut r);
        let v = rng::normal_mat::<f32, _>(2, 4, 1.0, &mut r);
        let mask = build_causal_mask(2).unwrap();
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn attention_two_position_hand_case() {
        // Q = K = I, V = 2I, d = 2, no masking. Row 0 logits are
        // [1/sqrt(2), 0]; hand-evaluated softmax weights and output follow.
        let q = Mat::from_vec(2, 2, vec![1.0f64, 0.0, 0.0, 1.0]);
        let k = q.clone();
        let v = Mat::from_vec(2, 2, vec![2.0f64, 0.0, 0.0, 2.0]);
        let mask = AttentionMask::from_predicate(2, |_, _| true).unwrap();
        let out = masked_attention(&q, &k, &v, &mask).unwrap();

        // exp oracle evaluated in the test, independent of the kernel.
        let e = (1.0f64 / 2.0f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        let w1 = 1.0 / (e + 1.0);
        assert!((w0 - 0.6698).abs() < 5e-4);
        assert!((w1 - 0.3302).abs() < 5e-4);
        assert!((out.get(0, 0) - 2.0 * w0).abs() < 1e-12);
        assert!((out.get(0, 1) - 2.0 * w1).abs() < 1e-12);
        assert!((out.get(0, 0) - 1.3396).abs() < 1e-3);
        assert!((out.get(0, 1) - 0.6604).abs() < 1e-3);
    }

    #[test]
    fn attention_rejects_shape_mismatch() {
        let q = Mat::<f32>::zeros(2, 3);
        let k = Mat::<f32>::zeros(3, 3);
        let v = Mat::<f32>::zeros(2, 3);
        let mask = build_causal_mask(2).unwrap();
        assert!(masked_attention(&q, &k, &v, &mask).is_err());
        let k_ok = Mat::<f32>::zeros(2, 3);
        let bad_mask = build_causal_mask(3).unwrap();
        assert!(masked_attention(&q, &k_ok, &v, &bad_mask).is_err());
    }

    #[test]
    fn masked_weights_vanish() {
        let mut r = rng::seeded(9);
        let q = rng::normal_mat::<f32, _>(5, 4, 1.0, &mut r);
        let k = rng::normal_mat::<f32, _>(5, 4, 1.0, &mut r);
        let mask = build_causal_mask(5).unwrap();
        let scale = 1.0f32 / (4.0f32).sqrt();
        let mut scores = q.matmul_bt(&k);
        scores.scale(scale);
        for i in 0..5 {
            let bias: Vec<f64> = (0..5).map(|j| mask.bias(i, j)).collect();
            softmax_biased_row(scores.row_mut(i), &bias);
            let mut sum = 0.0f32;
            for j in 0..5 {
                let w = scores.get(i, j);
                if j > i {
                    assert!(w < 1e-8, "masked weight ({i},{j}) = {w}");
                }
                sum += w;
            }
            assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn zero_bias_equals_unmasked_attention_exactly() {
        let mut r = rng::seeded(21);
        let n = 6;
        let d = 8;
        let q = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let k = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let v = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let mask = AttentionMask::from_predicate(n, |_, _| true).unwrap();
        let masked = masked_attention(&q, &k, &v, &mask).unwrap();

        // Unmasked reference computed without any bias addition.
        let scale = 1.0f32 / (d as f32).sqrt();
        let mut scores = q.matmul_bt(&k);
        scores.scale(scale);
        let zero_bias = vec![0.0f64; n];
        for i in 0..n {
            softmax_biased_row(scores.row_mut(i), &zero_bias);
        }
        let unmasked = scores.matmul(&v);
        assert_eq!(masked, unmasked);
    }

    #[test]
    fn causal_perturbation_changes_only_later_rows() {
        let mut r = rng::seeded(4);
        let n = 6;
        let d = 4;
        let q = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let k = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let v = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let mask = build_causal_mask(n).unwrap();
        let base = masked_attention(&q, &k, &v, &mask).unwrap();
        for j in 0..n {
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            for c in 0..d {
                k2.set(j, c, k2.get(j, c) + 0.5);
                v2.set(j, c, v2.get(j, c) - 0.25);
            }
            let out = masked_attention(&q, &k2, &v2, &mask).unwrap();
            for i in 0..j {
                assert_eq!(out.row(i), base.row(i), "perturb {j} leaked into row {i}");
            }
        }
    }

    #[test]
    fn hybrid_isolation_image_perturbation_never_reaches_text() {
        let mut r = rng::seeded(5);
        let layout = SequenceLayout::new(3, 4).unwrap();
        let n = layout.total();
        let d = 4;
        let q = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let k = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let v = rng::normal_mat::<f32, _>(n, d, 1.0, &mut r);
        let mask = build_hybrid_mask(layout).unwrap();
        let base = masked_attention(&q, &k, &v, &mask).unwrap();

        for j in layout.text_len()..n {
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            for c in 0..d {
                k2.set(j, c, k2.get(j, c) * 1.7 + 0.3);
                v2.set(j, c, v2.get(j, c) - 1.1);
            }
            let out = masked_attention(&q, &k2, &v2, &mask).unwrap();
            for i in 0..layout.text_len() {
                assert_eq!(out.row(i), base.row(i));
            }
        }

        // Text perturbation must be able to reach image rows.
        let mut v3 = v.clone();
        v3.set(0, 0, v3.get(0, 0) + 2.0);
        let out = masked_attention(&q, &k, &v3, &mask).unwrap();
        let changed = (layout.text_len()..n).any(|i| out.row(i) != base.row(i));
        assert!(changed, "text perturbation did not reach image rows");
    }
}
