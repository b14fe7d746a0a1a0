//! Command-line entry point: train, sample-text, sample-image, verify.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tandem_core::app::{
    cli_sample_image, cli_sample_text, cli_train, cli_verify, SampleImageCli, SampleTextCli,
    TrainCli, VerifyCli, WeightSource,
};
use tandem_core::Error;

#[derive(Parser)]
#[command(
    name = "tandem",
    about = "One shared-weight transformer for text autoregression and latent-diffusion images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a model and write checkpoints plus a metrics log.
    Train {
        /// JSON config file; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set training.total_steps=200.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (beats config.output_dir and $TANDEM_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress progress output.
        #[arg(long)]
        quiet: bool,
    },
    /// Generate text from a checkpoint.
    SampleText {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Top-k sampling (greedy when absent).
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        /// Weight set to sample with: ema or raw.
        #[arg(long, default_value = "ema")]
        weights: String,
    },
    /// Generate an image: decode text until the image-start token, then run
    /// the denoising loop and write a PNG.
    SampleImage {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Denoising steps (default: the value stored with the checkpoint).
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale (default: stored value).
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sample.png")]
        out: PathBuf,
        /// Append the image-start token to the prompt instead of decoding
        /// until the model emits it.
        #[arg(long)]
        force_si: bool,
        /// Token budget for reaching the image-start token.
        #[arg(long, default_value_t = 32)]
        si_budget: usize,
        #[arg(long, default_value = "ema")]
        weights: String,
    },
    /// Run verification suites: masks | gradients | schedule | roundtrip | all.
    Verify {
        suite: String,
        /// Inject a sign bug into the gradient comparison; the gradients
        /// suite must then fail (harness self-test).
        #[arg(long, hide = true)]
        negative_control: bool,
        /// Check every Nth parameter element in the gradients suite.
        #[arg(long, default_value_t = 1)]
        gradient_stride: usize,
    },
}

enum Outcome {
    Ok,
    VerifyFailed,
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            out,
            resume,
            quiet,
        } => {
            cli_train(&TrainCli {
                config_path: config,
                overrides,
                out,
                resume,
                quiet,
            })?;
            Ok(Outcome::Ok)
        }
        Command::SampleText {
            checkpoint,
            prompt,
            max_new,
            top_k,
            temperature,
            sample_seed,
            weights,
        } => {
            let (text, stop) = cli_sample_text(&SampleTextCli {
                checkpoint,
                prompt,
                max_new,
                top_k,
                temperature,
                sample_seed,
                weights: weights.parse::<WeightSource>()?,
            })?;
            println!("{text}");
            println!("stop_reason: {stop}");
            Ok(Outcome::Ok)
        }
        Command::SampleImage {
            checkpoint,
            prompt,
            steps,
            scale,
            seed,
            out,
            force_si,
            si_budget,
            weights,
        } => {
            let path = cli_sample_image(&SampleImageCli {
                checkpoint,
                prompt,
                steps,
                scale,
                seed,
                out_path: out,
                force_si,
                si_budget,
                weights: weights.parse::<WeightSource>()?,
            })?;
            println!("wrote {}", path.display());
            Ok(Outcome::Ok)
        }
        Command::Verify {
            suite,
            negative_control,
            gradient_stride,
        } => {
            let all_passed = cli_verify(&VerifyCli {
                suite,
                negative_control,
                gradient_stride,
            })?;
            if all_passed {
                Ok(Outcome::Ok)
            } else {
                Ok(Outcome::VerifyFailed)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerifyFailed) => {
            eprintln!("error: one or more verification checks failed");
            ExitCode::from(2)
        }
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
