//! Synthetic dataset generation and file ingestion.
//!
//! Experiments are self-contained: a seeded generator produces class-
//! conditional images with templated captions, and loaders read the same
//! data back from disk (lossless PNG + a tab-separated captions file).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::{self, normal_f64};

/// One class of the synthetic task: a display name and a base RGB color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub rgb: [f32; 3],
}

/// Generator spec for the synthetic class-conditional image task. Each
/// sample is the class color plus a per-image shared brightness offset and
/// per-pixel Gaussian jitter, clamped to [0, 1] and snapped to the 8-bit
/// grid so PNG round-trips are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticImageSpec {
    pub classes: Vec<ClassSpec>,
    pub image_size: usize,
    pub samples_per_class: usize,
    /// Per-pixel, per-channel jitter sigma.
    pub pixel_jitter: f32,
    /// Per-image brightness jitter sigma, shared across all pixels (this is
    /// what makes bidirectional attention over latent tokens informative).
    pub shared_jitter: f32,
    pub seed: u64,
}

impl Default for SyntheticImageSpec {
    fn default() -> Self {
        Self {
            classes: vec![
                ClassSpec {
                    name: "slate".into(),
                    rgb: [0.25, 0.25, 0.25],
                },
                ClassSpec {
                    name: "pearl".into(),
                    rgb: [0.75, 0.75, 0.75],
                },
            ],
            image_size: 8,
            samples_per_class: 32,
            pixel_jitter: 0.02,
            shared_jitter: 0.08,
            seed: 7,
        }
    }
}

const CAPTION_TEMPLATES: [&str; 3] = [
    "an image of {}",
    "please generate an image of {}",
    "a picture of {}",
];

impl SyntheticImageSpec {
    /// Total jitter sigma used in the separability invariant.
    pub fn sigma(&self) -> f32 {
        (self.pixel_jitter * self.pixel_jitter + self.shared_jitter * self.shared_jitter).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("need at least one class"));
        }
        if self.image_size == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid("image size and sample count must be >= 1"));
        }
        if self.image_size > 32 {
            return Err(Error::invalid("image_size above 32 is not supported"));
        }
        if self.pixel_jitter < 0.0 || self.shared_jitter < 0.0 {
            return Err(Error::invalid("jitter sigmas must be >= 0"));
        }
        for c in &self.classes {
            if !c.rgb.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("class {} color out of [0,1]", c.name)));
            }
        }
        // classes must be distinguishable by pixel-mean statistics
        let min_gap = (5.0 * self.sigma()).max(f32::MIN_POSITIVE);
        for i in 0..self.classes.len() {
            for j in (i + 1)..self.classes.len() {
                let a = &self.classes[i].rgb;
                let b = &self.classes[j].rgb;
                let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                    .sqrt();
                if dist < min_gap {
                    return Err(Error::invalid(format!(
                        "classes {} and {} are not separable: mean distance {dist:.4} < 5 sigma = {min_gap:.4}",
                        self.classes[i].name, self.classes[j].name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Class index of sample `i` in the generated (class-major) order.
    pub fn class_of(&self, sample_index: usize) -> usize {
        sample_index / self.samples_per_class
    }

    pub fn caption_for(&self, class: usize, sample_index: usize) -> String {
        let template = CAPTION_TEMPLATES[sample_index % CAPTION_TEMPLATES.len()];
        template.replace("{}", &self.classes[class].name)
    }
}

/// A caption/image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub caption: String,
    pub image: ImageTensor,
}

fn snap_to_u8_grid(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic synthetic dataset, class-major order. Per sample the draw
/// order is: one shared brightness offset, then per-pixel-channel jitter.
pub fn generate_image_dataset(spec: &SyntheticImageSpec) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    let mut r = rng::substream(spec.seed, 0x6461_7461);
    let size = spec.image_size;
    let mut out = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    for (class_idx, class) in spec.classes.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let shared = normal_f64(&mut r) as f32 * spec.shared_jitter;
            let mut data = Vec::with_capacity(size * size * 3);
            for _ in 0..size * size {
                for c in 0..3 {
                    let jitter = normal_f64(&mut r) as f32 * spec.pixel_jitter;
                    data.push(snap_to_u8_grid(class.rgb[c] + shared + jitter));
                }
            }
            let sample_index = class_idx * spec.samples_per_class + s;
            out.push(PairedSample {
                caption: spec.caption_for(class_idx, sample_index),
                image: ImageTensor::new(size, size, 3, data)?,
            });
        }
    }
    Ok(out)
}

/// A list of UTF-8 sentences, one training sample each.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    pub sentences: Vec<String>,
}

impl TextCorpus {
    pub fn new(sentences: Vec<String>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::invalid("text corpus is empty"));
        }
        Ok(Self { sentences })
    }
}

/// Load a corpus from a plain-text file, one sample per line. Blank lines
/// are skipped.
pub fn load_text_corpus(path: impl AsRef<Path>) -> Result<TextCorpus> {
    let raw = fs::read_to_string(path.as_ref())?;
    let sentences: Vec<String> = raw
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    TextCorpus::new(sentences)
}

/// A non-fatal problem found while loading a dataset, tied to its line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordIssue {
    pub line: usize,
    pub message: String,
}

/// Load images named by a tab-separated captions file
/// (`filename<TAB>caption` per line, paths relative to `dir`). Malformed
/// records are reported with their line numbers instead of aborting the
/// load; an empty captions file yields an empty dataset plus a warning.
pub fn load_image_dir(
    dir: impl AsRef<Path>,
    captions_path: impl AsRef<Path>,
) -> Result<(Vec<PairedSample>, Vec<RecordIssue>)> {
    let dir = dir.as_ref();
    let raw = fs::read_to_string(captions_path.as_ref())?;
    let mut samples = Vec::new();
    let mut issues = Vec::new();
    let mut any_line = false;
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        any_line = true;
        let Some((file, caption)) = line.split_once('\t') else {
            issues.push(RecordIssue {
                line: line_no,
                message: "missing tab separator between filename and caption".into(),
            });
            continue;
        };
        let path = dir.join(file);
        match read_png(&path) {
            Ok(image) => samples.push(PairedSample {
                caption: caption.to_owned(),
                image,
            }),
            Err(e) => issues.push(RecordIssue {
                line: line_no,
                message: format!("{}: {e}", path.display()),
            }),
        }
    }
    if !any_line {
        issues.push(RecordIssue {
            line: 0,
            message: "captions file is empty; dataset has no samples".into(),
        });
    }
    Ok((samples, issues))
}

/// Write a dataset as `img_<index>.png` files plus `captions.tsv` in `dir`.
pub fn write_image_dataset(samples: &[PairedSample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut captions = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("img_{i:05}.png");
        write_png(&s.image, &dir.join(&name))?;
        captions.push_str(&name);
        captions.push('\t');
        captions.push_str(&s.caption);
        captions.push('\n');
    }
    fs::write(dir.join("captions.tsv"), captions)?;
    Ok(())
}

pub fn write_png(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::invalid("PNG writer expects 3-channel images"));
    }
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| Error::invalid("image buffer size mismatch"))?;
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

/// Built-in 20-sentence corpus for self-contained runs. First words are
/// unique so a one-word prompt identifies its sentence during greedy
/// recitation checks.
pub fn demo_corpus() -> Vec<String> {
    [
        "amber light settles over the quiet harbor.",
        "bronze bells ring across the valley floor.",
        "cedar smoke drifts between the tall pines.",
        "dusk gathers slowly behind the old mill.",
        "ember sparks scatter above the campfire stones.",
        "frost patterns creep along the window glass.",
        "glacier water runs clear over gray pebbles.",
        "harbor seals doze on the warm planks.",
        "indigo clouds pile up before the storm.",
        "juniper branches bend under the wet snow.",
        "kelp ribbons sway beneath the green swell.",
        "lantern glow spills onto the cobbled lane.",
        "meadow grass leans with the evening wind.",
        "north ridges hold the last of the sun.",
        "orchid petals open in the damp greenhouse.",
        "prairie hawks circle high above the fence line.",
        "quartz veins glitter in the canyon wall.",
        "river ice cracks softly near the bend.",
        "summit flags snap in the thin cold air.",
        "thunder rolls away over the far hills.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoregression::{TextSample, Vocabulary};

    #[test]
    fn zero_jitter_gives_exactly_one_image_per_class() {
        let spec = SyntheticImageSpec {
            pixel_jitter: 0.0,
            shared_jitter: 0.0,
            samples_per_class: 4,
            ..SyntheticImageSpec::default()
        };
        let data = generate_image_dataset(&spec).unwrap();
        assert_eq!(data.len(), 8);
        for class in 0..2 {
            let base = &data[class * 4].image;
            for s in 1..4 {
                assert_eq!(&data[class * 4 + s].image, base);
            }
        }
        assert_ne!(&data[0].image, &data[4].image);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = SyntheticImageSpec::default();
        let a = generate_image_dataset(&spec).unwrap();
        let b = generate_image_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let other = SyntheticImageSpec {
            seed: 8,
            ..SyntheticImageSpec::default()
        };
        assert_ne!(a, generate_image_dataset(&other).unwrap());
    }

    #[test]
    fn class_means_match_spec_within_sampling_error() {
        let spec = SyntheticImageSpec {
            samples_per_class: 500,
            ..SyntheticImageSpec::default()
        };
        let data = generate_image_dataset(&spec).unwrap();
        for class in 0..2 {
            let mut mean = 0.0f64;
            let mut count = 0usize;
            for s in 0..500 {
                let img = &data[class * 500 + s].image;
                mean += img.mean() as f64;
                count += 1;
            }
            mean /= count as f64;
            let want = spec.classes[class].rgb[0] as f64; // gray classes
            // mean over 500 images of (shared + pixel/sqrt(npix)) jitter
            let se = spec.sigma() as f64 / (count as f64).sqrt();
            assert!(
                (mean - want).abs() < 3.0 * se + 1.0 / 255.0,
                "class {class}: mean {mean} vs {want}"
            );
        }
    }

    #[test]
    fn degenerate_spec_is_rejected() {
        let spec = SyntheticImageSpec {
            classes: vec![
                ClassSpec {
                    name: "a".into(),
                    rgb: [0.5, 0.5, 0.5],
                },
                ClassSpec {
                    name: "b".into(),
                    rgb: [0.52, 0.5, 0.5],
                },
            ],
            ..SyntheticImageSpec::default()
        };
        assert!(generate_image_dataset(&spec).is_err());
    }

    #[test]
    fn captions_cycle_templates_and_round_trip_through_vocabulary() {
        let spec = SyntheticImageSpec::default();
        let data = generate_image_dataset(&spec).unwrap();
        assert_eq!(data[0].caption, "an image of slate");
        assert_eq!(data[1].caption, "please generate an image of slate");
        assert_eq!(data[2].caption, "a picture of slate");
        for s in &data {
            let tokens = Vocabulary::encode(&s.caption);
            assert_eq!(Vocabulary::decode(&tokens), s.caption);
            TextSample::from_text(&s.caption, 64).unwrap();
        }
    }

    #[test]
    fn dataset_png_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("tdm_data_rt_{}", std::process::id()));
        let spec = SyntheticImageSpec {
            samples_per_class: 3,
            ..SyntheticImageSpec::default()
        };
        let data = generate_image_dataset(&spec).unwrap();
        write_image_dataset(&data, &dir).unwrap();
        let (loaded, issues) = load_image_dir(&dir, dir.join("captions.tsv")).unwrap();
        assert!(issues.is_empty(), "{issues:?}");
        assert_eq!(loaded.len(), data.len());
        for (a, b) in loaded.iter().zip(&data) {
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.image, b.image, "pixels must survive the PNG round trip");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_caption_lines_are_reported_not_fatal() {
        let dir = std::env::temp_dir().join(format!("tdm_data_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = ImageTensor::new(2, 2, 3, vec![0.5; 12]).unwrap();
        write_png(&img, dir.join("ok.png")).unwrap();
        std::fs::write(
            dir.join("captions.tsv"),
            "ok.png\ta fine image\nno-tab-here\nmissing.png\tgone\n",
        )
        .unwrap();
        let (samples, issues) = load_image_dir(&dir, dir.join("captions.tsv")).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(issues.len(), 2);
        assert_eq!(issues[0].line, 2);
        assert_eq!(issues[1].line, 3);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_captions_file_warns() {
        let dir = std::env::temp_dir().join(format!("tdm_data_empty_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("captions.tsv"), "").unwrap();
        let (samples, issues) = load_image_dir(&dir, dir.join("captions.tsv")).unwrap();
        assert!(samples.is_empty());
        assert_eq!(issues.len(), 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corpus_loading_skips_blanks_and_needs_content() {
        let dir = std::env::temp_dir().join(format!("tdm_corpus_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("corpus.txt"), "one\n\ntwo\n").unwrap();
        let corpus = load_text_corpus(dir.join("corpus.txt")).unwrap();
        assert_eq!(corpus.sentences, vec!["one".to_string(), "two".to_string()]);
        std::fs::write(dir.join("empty.txt"), "\n\n").unwrap();
        assert!(load_text_corpus(dir.join("empty.txt")).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn demo_corpus_has_twenty_unique_first_words() {
        let corpus = demo_corpus();
        assert_eq!(corpus.len(), 20);
        let mut firsts: Vec<&str> = corpus
            .iter()
            .map(|s| s.split_whitespace().next().unwrap())
            .collect();
        firsts.sort_unstable();
        firsts.dedup();
        assert_eq!(firsts.len(), 20);
        for s in &corpus {
            assert!(s.len() <= 60);
        }
    }
}
