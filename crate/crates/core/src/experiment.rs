//! The synthetic two-domain experiment: train on rendered blobs, evaluate on
//! a held-out rendering, optionally alongside the exemplar-mask ablation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, Dataset, SyntheticConfig};
use crate::error::Result;
use crate::evaluation::{self, EvalOptions, EvalReport, IdentityTranslator, RandomConvEmbedder};
use crate::training::{self, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: SyntheticConfig,
    pub held_out: SyntheticConfig,
    pub iterations: u64,
    pub checkpoint_interval: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// 500 images per domain at 64×64, 20k iterations, 200 held-out images
    /// per domain rendered from a different seed. Both variants train with
    /// self-reconstruction.
    pub fn standard(output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let train = SyntheticConfig {
            count: 1000,
            resolution: 64,
            seed,
            ..Default::default()
        };
        let held_out = SyntheticConfig {
            count: 400,
            seed: seed.wrapping_add(1_000_003),
            ..train.clone()
        };
        Self {
            train,
            held_out,
            iterations: 20_000,
            checkpoint_interval: 1000,
            output_dir: output_dir.into(),
        }
    }

    pub fn train_config(&self, ablation: bool) -> TrainConfig {
        let name = if ablation { "ablation" } else { "full" };
        TrainConfig {
            iterations: self.iterations,
            checkpoint_interval: self.checkpoint_interval,
            lomit_minus_minus: ablation,
            self_reconstruction: true,
            ..TrainConfig::synthetic(self.output_dir.join(name), self.train.clone())
        }
    }
}

/// Metrics of one trained variant on the held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub checkpoint: PathBuf,
    pub report: EvalReport,
    pub train_seconds: f64,
}

/// Trains one variant (resuming if checkpoints exist) and evaluates it.
pub fn run_variant(config: &ExperimentConfig, ablation: bool) -> Result<VariantResult> {
    let train_config = config.train_config(ablation);
    let start = std::time::Instant::now();
    let outcome = training::train(&train_config, true)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let report = evaluate_checkpoint(&outcome.final_checkpoint, &config.held_out)?;
    report.save(&train_config.output_dir.join("eval.json"))?;
    Ok(VariantResult {
        checkpoint: outcome.final_checkpoint,
        report,
        train_seconds,
    })
}

pub fn held_out_dataset(config: &SyntheticConfig) -> Result<Dataset> {
    Dataset::from_synthetic(&data::generate_synthetic(config)?)
}

/// Evaluates a checkpoint on a synthetic held-out set with the desk
/// extractor.
pub fn evaluate_checkpoint(path: &Path, held_out: &SyntheticConfig) -> Result<EvalReport> {
    let ckpt = checkpoint::load_checkpoint(path)?;
    let dataset = held_out_dataset(held_out)?;
    evaluation::evaluate(
        &ckpt.model,
        &dataset,
        &RandomConvEmbedder::default(),
        EvalOptions::default(),
    )
}

/// The untranslated baseline on the same held-out set.
pub fn evaluate_identity(held_out: &SyntheticConfig) -> Result<EvalReport> {
    evaluation::evaluate(
        &IdentityTranslator,
        &held_out_dataset(held_out)?,
        &RandomConvEmbedder::default(),
        EvalOptions::default(),
    )
}
