//! Pixel-space latent codec and patchification.
//!
//! A desk-scale stand-in for a pretrained VAE: the latent map is the exact
//! affine `latent = 2*image - 1` at identity resolution, so end-to-end tests
//! are noise-free. The geometry a real VAE would impose (downsample factor,
//! latent channel count) is carried in the config so one can be slotted in
//! behind the same interface later.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;
use crate::transformer::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Image height and width in pixels (square images).
    pub image_size: usize,
    /// Pixel channels (RGB = 3).
    pub channels: usize,
    /// Patch edge length for patchification.
    pub patch_size: usize,
    /// Spatial downsample factor of the (identity) latent map. A real VAE
    /// would use 8; the affine codec uses 1.
    pub downsample_factor: usize,
    /// Latent channel count. A real VAE would use 4; the affine codec keeps
    /// the pixel channel count.
    pub latent_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            patch_size: 2,
            downsample_factor: 1,
            latent_channels: 3,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.channels == 0 || self.patch_size == 0 {
            return Err(Error::Config("codec dimensions must be >= 1".into()));
        }
        if self.downsample_factor != 1 || self.latent_channels != self.channels {
            return Err(Error::Config(
                "the affine codec supports only identity resolution; \
                 downsample_factor must be 1 and latent_channels must equal channels"
                    .into(),
            ));
        }
        if self.latent_size() % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "latent size {} not divisible by patch size {}",
                self.latent_size(),
                self.patch_size
            )));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_factor
    }

    /// Number of latent tokens per image.
    pub fn num_tokens(&self) -> usize {
        let side = self.latent_size() / self.patch_size;
        side * side
    }

    /// Width of one latent token.
    pub fn token_width(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }
}

/// H x W x C image with values in [0, 1], stored row-major with channel
/// fastest: index = (y * W + x) * C + c.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid("image data length does not match shape"));
        }
        if !data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    pub fn channel_means(&self) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        sums.iter().map(|&s| (s / n) as f32).collect()
    }
}

/// Spatial latent array with the same layout as `ImageTensor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Patchified latent: one row per patch token, raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTokens {
    pub tokens: Mat<f32>,
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// `latent = 2*image - 1`: zero-mean unit-range latents.
pub fn encode(image: &ImageTensor) -> Result<Latent> {
    if !image.data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("pixel values out of [0, 1]"));
    }
    Ok(Latent {
        height: image.height,
        width: image.width,
        channels: image.channels,
        data: image.data.iter().map(|&v| 2.0 * v - 1.0).collect(),
    })
}

/// `image = clamp((latent + 1) / 2, 0, 1)`: exact inverse of `encode` for
/// in-range latents.
pub fn decode(latent: &Latent) -> ImageTensor {
    ImageTensor {
        height: latent.height,
        width: latent.width,
        channels: latent.channels,
        data: latent
            .data
            .iter()
            .map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
            .collect(),
    }
}

/// Non-overlapping p x p x C blocks flattened row-major into tokens, tokens
/// in raster order: token i covers patch (i div W/p, i mod W/p).
pub fn patchify(latent: &Latent, patch_size: usize) -> Result<LatentTokens> {
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be >= 1"));
    }
    if latent.height % patch_size != 0 || latent.width % patch_size != 0 {
        return Err(Error::invalid(format!(
            "latent {}x{} not divisible by patch size {patch_size}",
            latent.height, latent.width
        )));
    }
    let ph = latent.height / patch_size;
    let pw = latent.width / patch_size;
    let width = patch_size * patch_size * latent.channels;
    let mut tokens = Mat::zeros(ph * pw, width);
    for py in 0..ph {
        for px in 0..pw {
            let row = tokens.row_mut(py * pw + px);
            let mut w = 0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let y = py * patch_size + dy;
                    let x = px * patch_size + dx;
                    for c in 0..latent.channels {
                        row[w] = latent.data[(y * latent.width + x) * latent.channels + c];
                        w += 1;
                    }
                }
            }
        }
    }
    Ok(LatentTokens {
        tokens,
        patch_size,
        height: latent.height,
        width: latent.width,
        channels: latent.channels,
    })
}

/// Exact inverse of `patchify`.
pub fn unpatchify(tokens: &LatentTokens) -> Result<Latent> {
    let p = tokens.patch_size;
    let ph = tokens.height / p;
    let pw = tokens.width / p;
    let expect_rows = ph * pw;
    let expect_width = p * p * tokens.channels;
    if tokens.tokens.shape() != (expect_rows, expect_width) {
        return Err(Error::invalid(format!(
            "token shape {:?} inconsistent with {}x{}x{} patches of size {p}",
            tokens.tokens.shape(),
            tokens.height,
            tokens.width,
            tokens.channels
        )));
    }
    let mut data = vec![0.0f32; tokens.height * tokens.width * tokens.channels];
    for py in 0..ph {
        for px in 0..pw {
            let row = tokens.tokens.row(py * pw + px);
            let mut r = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let y = py * p + dy;
                    let x = px * p + dx;
                    for c in 0..tokens.channels {
                        data[(y * tokens.width + x) * tokens.channels + c] = row[r];
                        r += 1;
                    }
                }
            }
        }
    }
    Ok(Latent {
        height: tokens.height,
        width: tokens.width,
        channels: tokens.channels,
        data,
    })
}

/// Linear map from latent-token width to model width; zero-initialized so a
/// fresh model projects every token to the zero vector.
pub fn project_latent_tokens<T: Real>(tokens: &Mat<T>, params: &ModelParams<T>) -> Result<Mat<T>> {
    if tokens.cols() != params.config.latent_token_width {
        return Err(Error::invalid(format!(
            "token width {} does not match configured latent_token_width {}",
            tokens.cols(),
            params.config.latent_token_width
        )));
    }
    Ok(tokens.matmul(&params.latent_proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::transformer::TransformerConfig;
    use rand::Rng;

    fn image_from_fn(size: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> ImageTensor {
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageTensor::new(size, size, 3, data).unwrap()
    }

    #[test]
    fn mid_gray_encodes_to_zero() {
        let img = image_from_fn(4, |_, _, _| 0.5);
        let latent = encode(&img).unwrap();
        assert!(latent.data.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut r = rng::seeded(8);
        let img = image_from_fn(8, |_, _, _| r.gen::<f32>());
        let back = decode(&encode(&img).unwrap());
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_matches_elementwise_oracle() {
        let mut r = rng::seeded(9);
        let img = image_from_fn(4, |_, _, _| r.gen::<f32>());
        let latent = encode(&img).unwrap();
        for (p, l) in img.data.iter().zip(&latent.data) {
            assert_eq!(*l, 2.0 * p - 1.0);
        }
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let img = ImageTensor {
            height: 1,
            width: 1,
            channels: 3,
            data: vec![0.5, 1.5, 0.0],
        };
        assert!(encode(&img).is_err());
    }

    #[test]
    fn decode_clamps() {
        let latent = Latent {
            height: 1,
            width: 1,
            channels: 2,
            data: vec![3.0, -3.0],
        };
        let img = decode(&latent);
        assert_eq!(img.data, vec![1.0, 0.0]);
    }

    #[test]
    fn patchify_shapes_8x8x3_p2() {
        // (8/2)^2 = 16 tokens of width 2*2*3 = 12
        let img = image_from_fn(8, |y, x, c| ((y + x + c) % 7) as f32 / 7.0);
        let latent = encode(&img).unwrap();
        let tokens = patchify(&latent, 2).unwrap();
        assert_eq!(tokens.tokens.shape(), (16, 12));
    }

    #[test]
    fn patchify_p1_is_flatten() {
        let img = image_from_fn(4, |y, x, c| ((y * 4 + x) * 3 + c) as f32 / 64.0);
        let latent = encode(&img).unwrap();
        let tokens = patchify(&latent, 1).unwrap();
        assert_eq!(tokens.tokens.shape(), (16, 3));
        for i in 0..16 {
            for c in 0..3 {
                assert_eq!(tokens.tokens.get(i, c), latent.data[i * 3 + c]);
            }
        }
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = image_from_fn(4, |_, _, _| 0.0);
        let latent = encode(&img).unwrap();
        assert!(patchify(&latent, 3).is_err());
    }

    #[test]
    fn patch_round_trip_is_exact() {
        let mut r = rng::seeded(10);
        for &p in &[1usize, 2, 4] {
            let img = image_from_fn(8, |_, _, _| r.gen::<f32>());
            let latent = encode(&img).unwrap();
            let tokens = patchify(&latent, p).unwrap();
            let back = unpatchify(&tokens).unwrap();
            assert_eq!(latent, back, "patch size {p}");
        }
    }

    #[test]
    fn raster_order_marker_test() {
        // Put a unique marker in the top-left pixel of each patch; token i
        // must carry the marker of patch (i div W/p, i mod W/p).
        let p = 2;
        let size = 8;
        let img = image_from_fn(size, |y, x, c| {
            if y % p == 0 && x % p == 0 && c == 0 {
                let patch_id = (y / p) * (size / p) + (x / p);
                patch_id as f32 / 64.0
            } else {
                0.99
            }
        });
        let latent = encode(&img).unwrap();
        let tokens = patchify(&latent, p).unwrap();
        for i in 0..tokens.tokens.rows() {
            let marker = tokens.tokens.get(i, 0);
            let want = 2.0 * (i as f32 / 64.0) - 1.0;
            assert!((marker - want).abs() < 1e-6, "token {i}");
        }
    }

    #[test]
    fn zero_initialized_projection_maps_to_zero() {
        let config = TransformerConfig {
            depth: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            vocab_size: 16,
            max_seq_len: 16,
            latent_token_width: 12,
        };
        let params = ModelParams::<f32>::init(&config, 4).unwrap();
        let mut r = rng::seeded(12);
        let tokens = rng::normal_mat::<f32, _>(16, 12, 1.0, &mut r);
        let projected = project_latent_tokens(&tokens, &params).unwrap();
        assert!(projected.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let config = TransformerConfig {
            depth: 1,
            model_dim: 4,
            num_heads: 2,
            ffn_dim: 8,
            vocab_size: 16,
            max_seq_len: 16,
            latent_token_width: 3,
        };
        let mut params = ModelParams::<f64>::init(&config, 4).unwrap();
        let mut r = rng::seeded(13);
        rng::fill_normal(&mut params.latent_proj, 1.0, &mut r);
        let tokens = rng::normal_mat::<f64, _>(5, 3, 1.0, &mut r);
        let got = project_latent_tokens(&tokens, &params).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += tokens.get(i, k) * params.latent_proj.get(k, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-12);
            }
        }
        // identity-sized pass-through
        let mut id_params = params.clone();
        id_params.latent_proj = Mat::from_fn(3, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let through = project_latent_tokens(&tokens, &id_params).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(through.get(i, j), tokens.get(i, j));
            }
        }
    }

    #[test]
    fn config_consistency() {
        let c = CodecConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_tokens(), 16);
        assert_eq!(c.token_width(), 12);
        // token count x token width = latent element count
        assert_eq!(
            c.num_tokens() * c.token_width(),
            c.latent_size() * c.latent_size() * c.latent_channels
        );
    }
}
