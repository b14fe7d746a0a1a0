//! Run orchestration: configuration resolution, the train/sample/verify
//! workflows, and output-directory management.
//!
//! A run directory holds `config.resolved` (the exact configuration plus
//! seed for reproduction), `metrics.csv`, `ckpt_<step>` checkpoints, and
//! `samples/`. One CLI invocation owns its directory via a `.lock` file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autoregression::{generate_text, Sampler, StopReason, TextSample, Vocabulary};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::codec::CodecConfig;
use crate::data::{
    demo_corpus, generate_image_dataset, load_image_dir, load_text_corpus, PairedSample,
    SyntheticImageSpec, TextCorpus,
};
use crate::diffusion::{generate_image, linear_schedule, DiffusionSchedule, SampleOpts};
use crate::error::{Error, Result};
use crate::training::{
    prepare_image_dataset, corpus_text_loss, MixedBatchSampler, Trainer, TrainingConfig,
};
use crate::transformer::{LatentAttention, ModelParams, TransformerConfig};
use crate::verify::{run_suite, VerifyOpts};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TANDEM_OUT";

fn default_model_config() -> TransformerConfig {
    TransformerConfig {
        depth: 4,
        model_dim: 64,
        num_heads: 4,
        ffn_dim: 128,
        vocab_size: Vocabulary::SIZE,
        max_seq_len: 64,
        latent_token_width: 12,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionRunConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampling steps (strided subset of the schedule).
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub latent_attention: LatentAttention,
}

impl Default for DiffusionRunConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sample_steps: 250,
            guidance_scale: 1.5,
            latent_attention: LatentAttention::Bidirectional,
        }
    }
}

impl DiffusionRunConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    /// Synthetic image task (used when no image directory is given).
    pub synthetic: SyntheticImageSpec,
    /// Plain-text corpus path; the built-in demo corpus is used if absent.
    pub text_path: Option<PathBuf>,
    /// Directory of images plus a captions file; overrides `synthetic`.
    pub image_dir: Option<PathBuf>,
    pub captions_path: Option<PathBuf>,
    /// Also supervise each distinct caption (with a trailing image-start
    /// token) in the text stream, so decoding learns the handoff.
    pub caption_ar: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub codec: CodecConfig,
    pub diffusion: DiffusionRunConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
    pub mode: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: default_model_config(),
            codec: CodecConfig::default(),
            diffusion: DiffusionRunConfig::default(),
            training: TrainingConfig::default(),
            data: DataConfig {
                caption_ar: true,
                ..DataConfig::default()
            },
            output_dir: None,
            mode: None,
        }
    }
}

impl RunConfig {
    /// Cross-field consistency checks, with field-level messages.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.codec.validate()?;
        self.training.validate()?;
        if self.model.vocab_size != Vocabulary::SIZE {
            return Err(Error::Config(format!(
                "model.vocab_size must be {} (byte vocabulary plus specials)",
                Vocabulary::SIZE
            )));
        }
        if self.codec.token_width() != self.model.latent_token_width {
            return Err(Error::Config(format!(
                "model.latent_token_width {} does not match codec token width {} \
                 (patch_size^2 * latent_channels)",
                self.model.latent_token_width,
                self.codec.token_width()
            )));
        }
        if self.diffusion.timesteps == 0 {
            return Err(Error::Config("diffusion.timesteps must be >= 1".into()));
        }
        if self.diffusion.sample_steps == 0 {
            return Err(Error::Config("diffusion.sample_steps must be >= 1".into()));
        }
        self.diffusion.schedule()?;
        if self.data.image_dir.is_some() != self.data.captions_path.is_some() {
            return Err(Error::Config(
                "data.image_dir and data.captions_path must be given together".into(),
            ));
        }
        // longest synthetic caption + BOS/SI + latent tokens must fit
        if self.data.image_dir.is_none() {
            self.data.synthetic.validate()?;
            let longest = (0..self.data.synthetic.classes.len())
                .map(|c| self.data.synthetic.caption_for(c, 1).len())
                .max()
                .unwrap_or(0);
            let need = longest + 2 + self.codec.num_tokens();
            if need > self.model.max_seq_len {
                return Err(Error::Config(format!(
                    "model.max_seq_len {} too small: longest caption needs {need} positions",
                    self.model.max_seq_len
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Resolve a config: defaults, then the optional file, then `--set` overrides
/// (`path.to.key=value`, values parsed as JSON scalars with a string
/// fallback).
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())
        .map_err(|e| Error::Config(format!("default config serialization: {e}")))?;
    if let Some(p) = path {
        let raw = fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        let file_value: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", p.display())))?;
        merge_json(&mut value, &file_value);
    }
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let config: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("config does not match the schema: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn merge_json(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        return Err(Error::Config(format!(
            "override '{spec}' must look like path.to.key=value"
        )));
    };
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut slot = value;
    for part in path.split('.') {
        let obj = slot.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path '{path}' crosses a non-object"))
        })?;
        slot = obj
            .entry(part.to_string())
            .or_insert(serde_json::Value::Null);
    }
    *slot = parsed;
    Ok(())
}

// ---------------------------------------------------------------------------
// Output directory
// ---------------------------------------------------------------------------

/// Exclusive ownership of a run directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is owned by another invocation \
                 (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Output root: explicit flag, then config, then `$TANDEM_OUT`, then `runs/`.
pub fn resolve_output_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &config.output_dir {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join("run")
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

pub struct RunDatasets {
    pub image_samples: Vec<PairedSample>,
    pub text_samples: Vec<TextSample>,
    /// The plain corpus (without caption samples), for loss evaluation.
    pub corpus: Vec<TextSample>,
}

pub fn build_datasets(config: &RunConfig) -> Result<RunDatasets> {
    let image_samples = match (&config.data.image_dir, &config.data.captions_path) {
        (Some(dir), Some(captions)) => {
            let (samples, issues) = load_image_dir(dir, captions)?;
            for issue in &issues {
                eprintln!("warning: captions line {}: {}", issue.line, issue.message);
            }
            if samples.is_empty() {
                return Err(Error::invalid("image dataset is empty"));
            }
            samples
        }
        _ => generate_image_dataset(&config.data.synthetic)?,
    };

    let corpus_text: TextCorpus = match &config.data.text_path {
        Some(p) => load_text_corpus(p)?,
        None => TextCorpus::new(demo_corpus())?,
    };
    let corpus: Vec<TextSample> = corpus_text
        .sentences
        .iter()
        .map(|s| TextSample::from_text(s, config.model.max_seq_len))
        .collect::<Result<_>>()?;

    let mut text_samples = corpus.clone();
    if config.data.caption_ar {
        let mut seen = std::collections::BTreeSet::new();
        for s in &image_samples {
            if seen.insert(s.caption.clone()) {
                text_samples.push(TextSample::caption_to_si(
                    &s.caption,
                    config.model.max_seq_len,
                )?);
            }
        }
    }

    Ok(RunDatasets {
        image_samples,
        text_samples,
        corpus,
    })
}

/// Build a ready-to-run trainer from a resolved config.
pub fn build_trainer(config: &RunConfig, resume: Option<Checkpoint>) -> Result<(Trainer, RunDatasets)> {
    let datasets = build_datasets(config)?;
    let images = prepare_image_dataset(
        &datasets.image_samples,
        &config.codec,
        config.model.max_seq_len,
    )?;
    let sampler = MixedBatchSampler::new(
        images,
        datasets.text_samples.clone(),
        &config.training,
        config.diffusion.timesteps,
    )?;
    let schedule = config.diffusion.schedule()?;
    let mut trainer = match resume {
        Some(ckpt) => {
            if ckpt.model_config != config.model {
                return Err(Error::Config(
                    "checkpoint model config does not match the current config".into(),
                ));
            }
            let mut t = Trainer::new(
                ckpt.params,
                sampler,
                config.training.clone(),
                schedule,
                config.diffusion.latent_attention,
            );
            t.ema = ckpt.ema;
            t.opt = ckpt.opt;
            t.step = ckpt.step;
            t
        }
        None => {
            let params = ModelParams::init(&config.model, config.training.seed)?;
            Trainer::new(
                params,
                sampler,
                config.training.clone(),
                schedule,
                config.diffusion.latent_attention,
            )
        }
    };
    trainer.latent_attention = config.diffusion.latent_attention;
    Ok((trainer, datasets))
}

// ---------------------------------------------------------------------------
// Workflows
// ---------------------------------------------------------------------------

pub struct TrainCli {
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub quiet: bool,
}

pub fn cli_train(args: &TrainCli) -> Result<()> {
    let mut config = resolve_config(args.config_path.as_deref(), &args.overrides)?;
    config.mode = Some("train".into());
    let out_dir = resolve_output_dir(args.out.as_deref(), &config);
    let _lock = DirLock::acquire(&out_dir)?;

    let resolved = serde_json::to_string_pretty(&config.to_json())
        .map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out_dir.join("config.resolved"), &resolved)?;
    if !args.quiet {
        println!("resolved config -> {}", out_dir.join("config.resolved").display());
        println!("{resolved}");
    }

    let resume = match &args.resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let (mut trainer, _datasets) = build_trainer(&config, resume)?;

    fs::create_dir_all(out_dir.join("samples"))?;
    let mut metrics = fs::File::create(out_dir.join("metrics.csv"))?;
    if config.training.log_walltime {
        writeln!(metrics, "step,task,loss,walltime_s")?;
    } else {
        writeln!(metrics, "step,task,loss")?;
    }

    let ckpt_path = |step: u64| out_dir.join(format!("ckpt_{step}"));
    let write_ckpt = |trainer: &Trainer, step: u64| -> Result<()> {
        save_checkpoint(
            &trainer.params,
            &trainer.ema,
            &trainer.opt,
            &config.to_json(),
            step,
            ckpt_path(step),
        )
    };
    write_ckpt(&trainer, trainer.step)?;

    let started = Instant::now();
    let total = config.training.total_steps;
    while trainer.step < total {
        let outcome = trainer.step_once()?;
        if config.training.log_walltime {
            writeln!(
                metrics,
                "{},{},{},{:.3}",
                outcome.step,
                outcome.task.as_str(),
                outcome.loss,
                started.elapsed().as_secs_f64()
            )?;
        } else {
            writeln!(metrics, "{},{},{}", outcome.step, outcome.task.as_str(), outcome.loss)?;
        }
        let done = trainer.step;
        if config.training.checkpoint_interval > 0
            && done % config.training.checkpoint_interval == 0
            && done < total
        {
            write_ckpt(&trainer, done)?;
        }
        if !args.quiet && (done % 100 == 0 || done == total) {
            println!(
                "step {done}/{total} task {} loss {:.4}",
                outcome.task.as_str(),
                outcome.loss
            );
        }
    }
    metrics.flush()?;
    if total > 0 {
        write_ckpt(&trainer, total)?;
    }
    if !args.quiet {
        println!(
            "training finished: {total} steps in {:.1}s -> {}",
            started.elapsed().as_secs_f64(),
            out_dir.display()
        );
    }
    Ok(())
}

/// Which weight set sampling uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Ema,
    Raw,
}

impl std::str::FromStr for WeightSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(WeightSource::Ema),
            "raw" => Ok(WeightSource::Raw),
            other => Err(Error::invalid(format!("weights must be 'ema' or 'raw', got '{other}'"))),
        }
    }
}

fn pick_weights(ckpt: Checkpoint, source: WeightSource) -> ModelParams<f32> {
    match source {
        WeightSource::Ema => ckpt.ema,
        WeightSource::Raw => ckpt.params,
    }
}

fn stored_run_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let value: serde_json::Value = serde_json::from_str(&ckpt.run_config_json)
        .map_err(|e| Error::Format(format!("stored run config unreadable: {e}")))?;
    if value.is_null() {
        return Ok(RunConfig::default());
    }
    serde_json::from_value(value)
        .map_err(|e| Error::Format(format!("stored run config does not match schema: {e}")))
}

pub struct SampleTextCli {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub max_new: usize,
    pub top_k: Option<usize>,
    pub temperature: f64,
    pub sample_seed: u64,
    pub weights: WeightSource,
}

pub fn cli_sample_text(args: &SampleTextCli) -> Result<(String, StopReason)> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let params = pick_weights(ckpt, args.weights);
    let mut prompt = vec![Vocabulary::BOS];
    prompt.extend(Vocabulary::encode(&args.prompt));
    let sampler = match args.top_k {
        Some(k) => Sampler::TopK {
            k,
            temperature: args.temperature,
            seed: args.sample_seed,
        },
        None => Sampler::Greedy,
    };
    let generation = generate_text(&prompt, &params, args.max_new, sampler)?;
    Ok((Vocabulary::decode(&generation.tokens), generation.stop_reason))
}

pub struct SampleImageCli {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub steps: Option<usize>,
    pub scale: Option<f64>,
    pub seed: u64,
    pub out_path: PathBuf,
    pub force_si: bool,
    pub si_budget: usize,
    pub weights: WeightSource,
}

pub fn cli_sample_image(args: &SampleImageCli) -> Result<PathBuf> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let run_config = stored_run_config(&ckpt)?;
    let params = pick_weights(ckpt, args.weights);

    let mut text = vec![Vocabulary::BOS];
    text.extend(Vocabulary::encode(&args.prompt));
    if args.force_si {
        text.push(Vocabulary::SI);
    } else {
        let generation = generate_text(&text, &params, args.si_budget, Sampler::Greedy)?;
        match generation.stop_reason {
            StopReason::Si => {
                text.extend(generation.tokens);
                text.push(Vocabulary::SI);
            }
            other => {
                return Err(Error::invalid(format!(
                    "the model stopped with {other} before emitting the image-start token \
                     within {} tokens; pass --force-si to append it to the prompt directly",
                    args.si_budget
                )));
            }
        }
    }

    let schedule = run_config.diffusion.schedule()?;
    let opts = SampleOpts {
        steps: args.steps.unwrap_or(run_config.diffusion.sample_steps),
        guidance_scale: args.scale.unwrap_or(run_config.diffusion.guidance_scale),
        seed: args.seed,
        latent_attention: run_config.diffusion.latent_attention,
    };
    let image = generate_image(&text, &params, &schedule, &run_config.codec, &opts)?;
    if let Some(parent) = args.out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    crate::data::write_png(&image, &args.out_path)?;
    Ok(args.out_path.clone())
}

pub struct VerifyCli {
    pub suite: String,
    pub negative_control: bool,
    pub gradient_stride: usize,
}

/// Runs the requested suites, printing one line per check. Returns whether
/// everything passed.
pub fn cli_verify(args: &VerifyCli) -> Result<bool> {
    let results = run_suite(
        &args.suite,
        VerifyOpts {
            negative_control: args.negative_control,
            gradient_stride: args.gradient_stride,
        },
    )?;
    let mut all = true;
    for r in &results {
        println!("{}", r.line());
        all &= r.passed;
    }
    Ok(all)
}

/// Convenience used by tests: text loss of the stored corpus sentences.
pub fn eval_corpus_loss(params: &ModelParams<f32>, config: &RunConfig) -> Result<f32> {
    let datasets = build_datasets(config)?;
    corpus_text_loss(params, &datasets.corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_beat_file_beats_defaults() {
        let dir = std::env::temp_dir().join(format!("tdm_cfg_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let file = dir.join("config.json");
        fs::write(
            &file,
            r#"{"training": {"total_steps": 42, "seed": 3}, "model": {"depth": 2}}"#,
        )
        .unwrap();
        let config = resolve_config(
            Some(&file),
            &["training.total_steps=7".into(), "diffusion.sample_steps=10".into()],
        )
        .unwrap();
        // default survives where neither file nor override touches it
        assert_eq!(config.model.model_dim, 64);
        // file beats default
        assert_eq!(config.training.seed, 3);
        assert_eq!(config.model.depth, 2);
        // override beats file
        assert_eq!(config.training.total_steps, 7);
        assert_eq!(config.diffusion.sample_steps, 10);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_override_and_bad_schema_are_config_errors() {
        assert!(matches!(
            resolve_config(None, &["no-equals-sign".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve_config(None, &["model.depth=\"notanumber\"".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve_config(None, &["model.latent_token_width=5".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dir_lock_excludes_second_owner() {
        let dir = std::env::temp_dir().join(format!("tdm_lock_{}", std::process::id()));
        let lock = DirLock::acquire(&dir).unwrap();
        assert!(matches!(DirLock::acquire(&dir), Err(Error::Config(_))));
        drop(lock);
        let relock = DirLock::acquire(&dir);
        assert!(relock.is_ok());
        drop(relock);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn datasets_include_caption_ar_samples() {
        let config = RunConfig::default();
        let ds = build_datasets(&config).unwrap();
        assert_eq!(ds.corpus.len(), 20);
        // 2 classes x 3 templates = 6 distinct captions
        assert_eq!(ds.text_samples.len(), 26);
        let si_samples = ds
            .text_samples
            .iter()
            .filter(|s| s.tokens.contains(&Vocabulary::SI))
            .count();
        assert_eq!(si_samples, 6);
    }
}
