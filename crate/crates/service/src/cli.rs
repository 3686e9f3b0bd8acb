//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use lomit::checkpoint;
use lomit::data::{self, Dataset, SyntheticConfig};
use lomit::evaluation::{self, EvalOptions, FeatureExtractor, PixelFeatures, RandomConvEmbedder};
use lomit::imageio;
use lomit::training::{self, DatasetSource, TrainConfig};
use lomit::{LomitError, Result};

use crate::api::{self, AppState};
use crate::inference;

#[derive(Debug, Parser)]
#[command(name = "lomit", version, about = "Exemplar-guided local-mask image translation")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Extractor {
    /// Fixed random convolutional embedder.
    Conv,
    /// Pooled raw pixels.
    Pixel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML config, resuming from the latest checkpoint in its
    /// output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Ignore existing checkpoints and start over.
        #[arg(long)]
        fresh: bool,
    },
    /// Render the synthetic two-domain dataset to a directory.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: i64,
    },
    /// Translate one image toward an exemplar.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        exemplar: PathBuf,
        #[arg(long)]
        input_mask: Option<PathBuf>,
        #[arg(long)]
        exemplar_mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the extracted mask of an image as grayscale PNG.
    ExtractMask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Attribute splitting the data into two domains; defaults to the
        /// one used in training, else the first attribute.
        #[arg(long)]
        domain_attribute: Option<String>,
        #[arg(long, value_enum, default_value_t = Extractor::Conv)]
        extractor: Extractor,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the HTTP API.
    Serve {
        /// Checkpoint files; the first is the default.
        #[arg(long, env = "LOMIT_CHECKPOINT", value_delimiter = ',', required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, env = "LOMIT_PORT", default_value_t = 8080)]
        port: u16,
    },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LomitError::Io {
        context: format!("reading {}", path.display()),
        source: e,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, fresh } => {
            let config = TrainConfig::load(&config)?;
            let outcome = training::train(&config, !fresh)?;
            log::info!(
                "ran {} iterations; final checkpoint {}",
                outcome.iterations_run,
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Command::SynthData {
            out,
            count,
            seed,
            resolution,
        } => {
            let config = SyntheticConfig {
                count,
                seed,
                resolution,
                ..Default::default()
            };
            let samples = data::generate_synthetic(&config)?;
            data::export_synthetic(&samples, &out)?;
            log::info!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Translate {
            checkpoint,
            input,
            exemplar,
            input_mask,
            exemplar_mask,
            out,
        } => {
            let ckpt = checkpoint::load_checkpoint(&checkpoint)?;
            let res = ckpt.architecture().resolution as u32;
            let pair = inference::decode_pair(&read(&input)?, &read(&exemplar)?, res)
                .map_err(|e| with_context(e, &input, &exemplar))?;
            for name in &pair.resized {
                log::warn!("{name} image resized to {res}x{res}");
            }
            let m_in = input_mask.map(|p| imageio::load_mask(&p, Some((res, res)))).transpose()?;
            let m_ex = exemplar_mask.map(|p| imageio::load_mask(&p, Some((res, res)))).transpose()?;
            let t = inference::translate(&ckpt.model, &pair.input, &pair.exemplar, m_in.as_ref(), m_ex.as_ref())?;
            imageio::save_image(&t.output, &out)
        }
        Command::ExtractMask {
            checkpoint,
            input,
            out,
        } => {
            let ckpt = checkpoint::load_checkpoint(&checkpoint)?;
            let res = ckpt.architecture().resolution as u32;
            let (image, resized) = imageio::load_image(&input, Some(res))?;
            if resized {
                log::warn!("input image resized to {res}x{res}");
            }
            imageio::save_mask(&inference::extract_mask(&ckpt.model, &image)?, &out)
        }
        Command::Evaluate {
            checkpoint,
            data: dir,
            report,
            domain_attribute,
            extractor,
            seed,
        } => {
            let ckpt = checkpoint::load_checkpoint(&checkpoint)?;
            let manifest = data::load_manifest(&dir.join(data::MANIFEST_FILE))?;
            let attribute = match (domain_attribute, &ckpt.config.dataset) {
                (Some(a), _) => a,
                (None, DatasetSource::Manifest { domain_attribute, .. }) => domain_attribute.clone(),
                (None, DatasetSource::Synthetic(_)) => manifest.attribute_names[0].clone(),
            };
            let dataset = Dataset::from_manifest(&manifest, &attribute, ckpt.architecture().resolution)?;
            let extractor: Box<dyn FeatureExtractor> = match extractor {
                Extractor::Conv => Box::new(RandomConvEmbedder::default()),
                Extractor::Pixel => Box::new(PixelFeatures::default()),
            };
            let options = EvalOptions {
                seed,
                ..Default::default()
            };
            let result = evaluation::evaluate(&ckpt.model, &dataset, extractor.as_ref(), options)?;
            result.save(&report)?;
            let csv = report.with_extension("csv");
            std::fs::write(&csv, result.per_sample_csv()).map_err(|e| LomitError::Io {
                context: format!("writing {}", csv.display()),
                source: e,
            })?;
            println!("{}", summary_line(&result));
            Ok(())
        }
        Command::Serve { checkpoint, port } => {
            let state = AppState::load(&checkpoint)?;
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|e| LomitError::Io {
                    context: "starting async runtime".into(),
                    source: e,
                })?;
            runtime
                .block_on(api::serve(state, port))
                .map_err(|e| LomitError::Io {
                    context: format!("serving on port {port}"),
                    source: e,
                })
        }
    }
}

fn with_context(e: LomitError, input: &Path, exemplar: &Path) -> LomitError {
    match e {
        LomitError::Dimension(msg) => LomitError::Dimension(format!(
            "{msg} ({} vs {})",
            input.display(),
            exemplar.display()
        )),
        other => other,
    }
}

fn summary_line(r: &evaluation::EvalReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    format!(
        "mask_iou={} fg_transfer_error={} bg_preservation_error={} samples={}",
        fmt(r.mask_iou),
        fmt(r.fg_transfer_error),
        fmt(r.bg_preservation_error),
        r.samples
    )
}
