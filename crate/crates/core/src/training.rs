//! Run configuration, the alternating critic/generator update and the
//! checkpointed training loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, derive_seed, Augmentations, Dataset, PairedBatch, SyntheticConfig};
use crate::error::{LomitError, Result};
use crate::hadain;
use crate::networks::{Architecture, ModelBundle, ParamGroup, Translation};
use crate::objectives::{
    self, CriticTerms, DirectionTerms, GeneratorTerm, LossReport, LossWeights,
};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.lomit";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A `manifest.tsv`; `domain_attribute` splits it into the two domains.
    Manifest {
        path: PathBuf,
        domain_attribute: String,
    },
    Synthetic(SyntheticConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub resolution: i64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub style_dim: i64,
    pub attributes: i64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub lomit_minus_minus: bool,
    pub self_reconstruction: bool,
    #[serde(default = "default_critic_steps")]
    pub critic_steps: u32,
    #[serde(default = "default_base_channels")]
    pub base_channels: i64,
    #[serde(default)]
    pub horizontal_flip: bool,
    /// Probability that a sample's exemplar is drawn from its own domain
    /// instead of the opposite one.
    #[serde(default = "default_same_domain_rate")]
    pub same_domain_exemplar_rate: f64,
    /// Iterations over which the mask-size weight ramps linearly from zero.
    #[serde(default = "default_mask_size_warmup")]
    pub mask_size_warmup: u64,
    pub dataset: DatasetSource,
    pub output_dir: PathBuf,
}

fn default_critic_steps() -> u32 {
    1
}

fn default_same_domain_rate() -> f64 {
    0.5
}

fn default_mask_size_warmup() -> u64 {
    2000
}

fn default_base_channels() -> i64 {
    Architecture::default().base_channels
}

impl TrainConfig {
    /// Desk-scale defaults on a synthetic dataset.
    pub fn synthetic(output_dir: impl Into<PathBuf>, data: SyntheticConfig) -> Self {
        Self {
            resolution: data.resolution,
            batch_size: 8,
            iterations: 20_000,
            lr_generator: 1e-4,
            lr_critic: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            style_dim: 8,
            attributes: 1,
            seed: data.seed,
            checkpoint_interval: 1000,
            lomit_minus_minus: false,
            self_reconstruction: false,
            critic_steps: 1,
            base_channels: default_base_channels(),
            horizontal_flip: false,
            same_domain_exemplar_rate: default_same_domain_rate(),
            mask_size_warmup: default_mask_size_warmup(),
            dataset: DatasetSource::Synthetic(data),
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr_generator", self.lr_generator),
            ("lr_critic", self.lr_critic),
            ("checkpoint_interval", self.checkpoint_interval as f64),
            ("critic_steps", self.critic_steps as f64),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(LomitError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.same_domain_exemplar_rate) {
            return Err(LomitError::Config(format!(
                "same_domain_exemplar_rate must lie in [0, 1], got {}",
                self.same_domain_exemplar_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(LomitError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        self.weights.validate()?;
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
            if s.resolution != self.resolution {
                return Err(LomitError::Config(format!(
                    "synthetic resolution {} differs from training resolution {}",
                    s.resolution, self.resolution
                )));
            }
        }
        self.architecture().validate()
    }

    /// Loss weights in effect at `iteration`.
    pub fn weights_at(&self, iteration: u64) -> LossWeights {
        let mut w = self.weights.clone();
        if iteration < self.mask_size_warmup {
            w.lambda_r2 *= iteration as f64 / self.mask_size_warmup as f64;
        }
        w
    }

    /// True when both configurations produce the same training run, ignoring
    /// where and how often it is checkpointed.
    pub fn same_trajectory(&self, other: &TrainConfig) -> bool {
        let normalize = |c: &TrainConfig| TrainConfig {
            output_dir: PathBuf::new(),
            checkpoint_interval: 1,
            ..c.clone()
        };
        normalize(self) == normalize(other)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            resolution: self.resolution,
            base_channels: self.base_channels,
            style_dim: self.style_dim,
            attributes: self.attributes,
            whole_image_style: self.lomit_minus_minus,
            ..Architecture::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)
            .map_err(|e| LomitError::Config(format!("invalid training config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LomitError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LomitError::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join(CHECKPOINT_DIR)
    }

    pub fn log_path(&self) -> PathBuf {
        self.output_dir.join(LOG_FILE)
    }

    /// Loads (or renders) the training images.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.dataset {
            DatasetSource::Synthetic(s) => Dataset::from_synthetic(&data::generate_synthetic(s)?)?,
            DatasetSource::Manifest {
                path,
                domain_attribute,
            } => {
                let manifest = data::load_manifest(path)?;
                Dataset::from_manifest(&manifest, domain_attribute, self.resolution)?
            }
        };
        if ds.attribute_names.len() as i64 != self.attributes {
            return Err(LomitError::Config(format!(
                "config declares {} attributes but the dataset has {:?}",
                self.attributes, ds.attribute_names
            )));
        }
        Ok(ds)
    }
}

/// Adaptive moment estimation over a named parameter list.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    params: Vec<(String, Tensor)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect();
        let v = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            params,
            m,
            v,
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            p.zero_grad();
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        tch::no_grad(|| {
            for (((_, p), m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                m.copy_(&(&*m * self.beta1 + &g * (1.0 - self.beta1)));
                v.copy_(&(&*v * self.beta2 + g.square() * (1.0 - self.beta2)));
                let update = (&*m / c1) / ((&*v / c2).sqrt() + self.eps) * self.lr;
                p.shallow_clone().copy_(&(p - update));
            }
        });
    }

    /// `(name, first moment, second moment)` per parameter.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|((n, _), (m, v))| (n.as_str(), m, v))
    }

    pub(crate) fn load_moments(
        &mut self,
        step: u64,
        mut lookup: impl FnMut(&str, &str) -> Result<Tensor>,
    ) -> Result<()> {
        tch::no_grad(|| -> Result<()> {
            for (((name, p), m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
                for (slot, dst) in [("m", m), ("v", v)] {
                    let src = lookup(slot, name)?;
                    if src.size() != p.size() {
                        return Err(LomitError::Corrupt(format!(
                            "optimizer state {slot}/{name} has shape {:?}, expected {:?}",
                            src.size(),
                            p.size()
                        )));
                    }
                    dst.copy_(&src);
                }
            }
            Ok(())
        })?;
        self.step = step;
        Ok(())
    }
}

fn group_params(model: &ModelBundle, groups: &[ParamGroup]) -> Vec<(String, Tensor)> {
    groups.iter().flat_map(|g| model.group_variables(*g)).collect()
}

pub fn generator_optimizer(model: &ModelBundle, config: &TrainConfig) -> Adam {
    Adam::new(
        group_params(model, &ParamGroup::GENERATOR),
        config.lr_generator,
        config.beta1,
        config.beta2,
    )
}

pub fn critic_optimizer(model: &ModelBundle, config: &TrainConfig) -> Adam {
    Adam::new(
        group_params(model, &[ParamGroup::Critic]),
        config.lr_critic,
        config.beta1,
        config.beta2,
    )
}

fn set_trainable(vars: &[(String, Tensor)], on: bool) {
    for (_, v) in vars {
        let _ = v.shallow_clone().set_requires_grad(on);
    }
}

/// Foreground and background style codes of `x` split by `m`; with
/// whole-image style both come from the unmasked image.
fn style_codes(model: &ModelBundle, x: &Tensor, m: &Tensor) -> Result<(Tensor, Tensor)> {
    if model.architecture().whole_image_style {
        let s = model.encode_style(x)?;
        Ok((s.shallow_clone(), s))
    } else {
        let (fg, bg) = hadain::split_by_mask(x, m)?;
        Ok((model.encode_style(&fg)?, model.encode_style(&bg)?))
    }
}

/// Mask/content consistency on the content grid. The mask is recomputed from
/// a detached content code and the similarities are detached, so only the
/// attention network receives gradient.
pub fn mask_consistency_term(model: &ModelBundle, c: &Tensor) -> Result<Tensor> {
    let c = c.detach();
    let m = model.mask_from_content(&c)?;
    let size = c.size();
    let m_small = hadain::downsample_mask(&m, (size[2], size[3]))?;
    let c_hat = hadain::unit_content_rows(&c)?;
    objectives::mask_content_consistency_reg(&hadain::flatten_mask(&m_small)?, &c_hat, true)
}

struct Side<'a> {
    x: &'a Tensor,
    c: Tensor,
    m: Tensor,
    labels: &'a Tensor,
}

/// Exemplar images, masks and labels for one translation direction.
struct Exemplars {
    x: Tensor,
    m: Tensor,
    labels: Tensor,
}

/// Per sample, takes the opposite-domain exemplar or, with probability
/// `rate`, a shuffled exemplar from the input's own domain.
fn choose_exemplars(rng: &mut ChaCha8Rng, rate: f64, own: &Side, other: &Side) -> Exemplars {
    let n = own.x.size()[0];
    let pick = |t: &Tensor| t.shallow_clone();
    if rate == 0.0 {
        return Exemplars {
            x: pick(other.x),
            m: pick(&other.m),
            labels: pick(other.labels),
        };
    }
    let keep: Vec<f32> = (0..n).map(|_| if rng.gen_bool(rate) { 0.0 } else { 1.0 }).collect();
    let mut perm: Vec<i64> = (0..n).collect();
    perm.shuffle(rng);
    let keep = Tensor::from_slice(&keep);
    let perm = Tensor::from_slice(&perm);
    let blend = |a: &Tensor, b: &Tensor| -> Tensor {
        let mut shape = vec![n];
        shape.extend(std::iter::repeat(1).take(a.dim() - 1));
        let k = keep.view(shape.as_slice()).to_kind(a.kind());
        let shuffled = b.index_select(0, &perm);
        &k * a + (1.0 - &k) * shuffled
    };
    Exemplars {
        x: blend(other.x, own.x),
        m: blend(&other.m, &own.m),
        labels: blend(other.labels, own.labels),
    }
}

fn direction_terms(
    model: &ModelBundle,
    input: &Side,
    exemplar_labels: &Tensor,
    t: &Translation,
    self_reconstruction: bool,
) -> Result<DirectionTerms> {
    let x12 = &t.output;
    let c12 = model.encode_content(x12)?;
    let (s12_fg, s12_bg) = style_codes(model, x12, &input.m)?;
    let m12 = model.mask_from_content(&c12)?;
    let cyc = model.translate_from_parts(x12, &c12, &m12, input.x, &input.m)?;
    let critic = model.criticize(x12)?;
    let (_, adv_g) = objectives::adversarial_losses(&critic.realness, &critic.realness)?;

    let mut terms = DirectionTerms::new();
    terms.insert(GeneratorTerm::StyleFg, objectives::style_recon_loss(&s12_fg, &t.style_fg)?);
    terms.insert(GeneratorTerm::StyleBg, objectives::style_recon_loss(&s12_bg, &t.style_bg)?);
    terms.insert(GeneratorTerm::Content, objectives::content_recon_loss(&c12, &input.c)?);
    terms.insert(GeneratorTerm::MaskConsistency, mask_consistency_term(model, &input.c)?);
    terms.insert(GeneratorTerm::MaskSize, objectives::mask_size_reg(&input.m)?);
    terms.insert(GeneratorTerm::Cycle, objectives::cycle_loss(&cyc.output, input.x)?);
    terms.insert(GeneratorTerm::Adversarial, adv_g);
    terms.insert(
        GeneratorTerm::Classification,
        objectives::classification_loss(&critic.attr_logits, exemplar_labels)?,
    );
    if self_reconstruction {
        let own = model.translate_from_parts(input.x, &input.c, &input.m, input.x, &input.m)?;
        terms.insert(GeneratorTerm::SelfRecon, objectives::cycle_loss(&own.output, input.x)?);
    }
    Ok(terms)
}

fn encode_side<'a>(model: &ModelBundle, x: &'a Tensor, labels: &'a Tensor) -> Result<Side<'a>> {
    let c = model.encode_content(x)?;
    let m = model.mask_from_content(&c)?;
    Ok(Side { x, c, m, labels })
}

fn uniform_alpha(rng: &mut ChaCha8Rng, n: i64) -> Tensor {
    let v: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
    Tensor::from_slice(&v)
}

fn critic_update(
    model: &ModelBundle,
    opt_d: &mut Adam,
    real: &Tensor,
    fake: &Tensor,
    labels: &Tensor,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<CriticTerms> {
    opt_d.zero_grad();
    let on_real = model.criticize(real)?;
    let on_fake = model.critic_realness(fake)?;
    let (adv, _) = objectives::adversarial_losses(&on_real.realness, &on_fake)?;
    let alpha = uniform_alpha(rng, real.size()[0]);
    let gp = objectives::gradient_penalty(|x| model.critic_realness(x), real, fake, &alpha)?;
    let cls = objectives::classification_loss(&on_real.attr_logits, labels)?;
    let total = &adv * weights.lambda_adv + &gp * weights.lambda_gp + &cls * weights.lambda_cls;
    let terms = CriticTerms {
        adversarial: objectives::scalar(&adv),
        gradient_penalty: objectives::scalar(&gp),
        classification: objectives::scalar(&cls),
    };
    for (name, v) in [
        ("adv_d", terms.adversarial),
        ("gp", terms.gradient_penalty),
        ("cls_d", terms.classification),
    ] {
        if !v.is_finite() {
            return Err(LomitError::Numeric(format!("loss term {name} is {v}")));
        }
    }
    total.backward();
    opt_d.step();
    Ok(terms)
}

/// One training step on `batch`.
///
/// Both translations are computed once. The critic is updated
/// `critic_steps` times on the detached translations, then the generator is
/// updated against the refreshed critic over both translation directions.
pub fn train_step(
    model: &ModelBundle,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    batch: &PairedBatch,
    config: &TrainConfig,
    iteration: u64,
    step_seed: u64,
) -> Result<LossReport> {
    let weights = &config.weights_at(iteration);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    opt_g.zero_grad();
    let s1 = encode_side(model, &batch.x1, &batch.labels1)?;
    let s2 = encode_side(model, &batch.x2, &batch.labels2)?;
    let rate = config.same_domain_exemplar_rate;
    let e1 = choose_exemplars(&mut rng, rate, &s1, &s2);
    let e2 = choose_exemplars(&mut rng, rate, &s2, &s1);
    let t12 = model.translate_from_parts(s1.x, &s1.c, &s1.m, &e1.x, &e1.m)?;
    let t21 = model.translate_from_parts(s2.x, &s2.c, &s2.m, &e2.x, &e2.m)?;

    let real = Tensor::cat(&[&batch.x1, &batch.x2], 0);
    let fake = Tensor::cat(&[t12.output.detach(), t21.output.detach()], 0);
    let labels = Tensor::cat(&[&batch.labels1, &batch.labels2], 0);
    let mut critic = None;
    for _ in 0..config.critic_steps {
        critic = Some(critic_update(model, opt_d, &real, &fake, &labels, weights, &mut rng)?);
    }
    let critic = critic.expect("critic_steps is positive");

    let critic_vars = model.group_variables(ParamGroup::Critic);
    set_trainable(&critic_vars, false);
    let result = (|| -> Result<LossReport> {
        let fwd = direction_terms(model, &s1, &e1.labels, &t12, config.self_reconstruction)?;
        let bwd = direction_terms(model, &s2, &e2.labels, &t21, config.self_reconstruction)?;
        let averaged = objectives::averaged_terms(&fwd, &bwd)?;
        let report = LossReport::new(&averaged, critic, weights)?;
        objectives::total_generator_loss(&fwd, &bwd, weights)?.backward();
        opt_g.step();
        Ok(report)
    })();
    set_trainable(&critic_vars, true);
    result
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub losses: LossReport,
    pub wall_time_s: f64,
}

/// Model, optimizers and data for an in-progress run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelBundle,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: u64,
    pub dataset: Dataset,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("iteration", &self.iteration)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.load_dataset()?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let model = ModelBundle::new(config.architecture(), derive_seed(&[config.seed, 0x1417]))?;
        let opt_g = generator_optimizer(&model, &config);
        let opt_d = critic_optimizer(&model, &config);
        Ok(Self {
            config,
            model,
            opt_g,
            opt_d,
            iteration: 0,
            dataset,
        })
    }

    /// Resumes from a checkpoint that carries optimizer state.
    pub fn from_checkpoint(ckpt: Checkpoint, dataset: Dataset) -> Result<Self> {
        let state = ckpt.optimizer.ok_or_else(|| {
            LomitError::Config("checkpoint carries no optimizer state; cannot resume".into())
        })?;
        Ok(Self {
            config: ckpt.config,
            model: ckpt.model,
            opt_g: state.generator,
            opt_d: state.critic,
            iteration: ckpt.iteration,
            dataset,
        })
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.dataset.attribute_names
    }

    /// Trains on the batch for the current iteration and advances.
    pub fn step(&mut self) -> Result<LossReport> {
        let stream = data::make_batches(
            &self.dataset,
            self.config.batch_size,
            self.config.seed,
            Augmentations {
                horizontal_flip: self.config.horizontal_flip,
            },
        )?;
        let batch = stream.batch_at(self.iteration);
        let step_seed = derive_seed(&[self.config.seed, 0x57E9, self.iteration]);
        let report = train_step(
            &self.model,
            &mut self.opt_g,
            &mut self.opt_d,
            &batch,
            &self.config,
            self.iteration,
            step_seed,
        )
        .map_err(|e| match e {
            LomitError::Numeric(msg) => {
                LomitError::Numeric(format!("iteration {}: {msg}", self.iteration))
            }
            other => other,
        })?;
        self.iteration += 1;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_training_state(self, path)
    }
}

/// Fails with the first non-finite parameter.
pub fn check_parameters_finite(model: &ModelBundle) -> Result<()> {
    for (name, t) in model.named_variables() {
        if t.isfinite().all().int64_value(&[]) == 0 {
            return Err(LomitError::Numeric(format!("parameter {name} is not finite")));
        }
    }
    Ok(())
}

/// Summary of a finished `train` call.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub iterations_run: u64,
    pub last_report: Option<LossReport>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("iter_{iteration:08}.lomit"))
}

/// Latest `iter_*.lomit` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| LomitError::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("iter_") && n.ends_with(".lomit"))
        })
        .collect();
    found.sort();
    Ok(found.pop())
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| LomitError::io(format!("creating {}", dir.display()), e))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| LomitError::io(format!("checkpoint directory {} is not writable", dir.display()), e))
}

/// Keeps the first `keep` records of the log, dropping any later ones left by
/// an interrupted run.
fn truncate_log(path: &Path, keep: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(|e| LomitError::io(format!("reading {}", path.display()), e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines().take(keep as usize) {
        let line = line.map_err(|e| LomitError::io(format!("reading {}", path.display()), e))?;
        kept.push_str(&line);
        kept.push('\n');
    }
    fs::write(path, kept).map_err(|e| LomitError::io(format!("writing {}", path.display()), e))
}

/// Runs (or, with `resume`, continues) a training run. Checkpoints land in
/// `output_dir/checkpoints` every `checkpoint_interval` iterations plus at
/// iteration 0 and at the end; every step appends one record to
/// `output_dir/train_log.jsonl`.
pub fn train(config: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let ckpt_dir = config.checkpoint_dir();
    ensure_writable(&ckpt_dir)?;
    let dataset = config.load_dataset()?;
    let log_path = config.log_path();

    let mut trainer = match latest_checkpoint(&ckpt_dir)? {
        Some(path) if resume => {
            let ckpt = checkpoint::load_checkpoint(&path)?;
            if !ckpt.config.same_trajectory(config) {
                return Err(LomitError::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            log::info!("resuming from {} at iteration {}", path.display(), ckpt.iteration);
            truncate_log(&log_path, ckpt.iteration)?;
            Trainer::from_checkpoint(ckpt, dataset)?
        }
        _ => {
            let t = Trainer::with_dataset(config.clone(), dataset)?;
            if log_path.exists() {
                fs::remove_file(&log_path)
                    .map_err(|e| LomitError::io(format!("removing {}", log_path.display()), e))?;
            }
            t.save(&checkpoint_path(&ckpt_dir, 0))?;
            t
        }
    };

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| LomitError::io(format!("opening {}", log_path.display()), e))?;
    let start = Instant::now();
    let first = trainer.iteration;
    let mut last_report = None;
    while trainer.iteration < config.iterations {
        let iteration = trainer.iteration;
        let report = trainer.step()?;
        let record = LogRecord {
            iteration,
            losses: report.clone(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| LomitError::Config(format!("cannot serialize log record: {e}")))?;
        writeln!(log, "{line}").map_err(|e| LomitError::io("writing training log", e))?;
        if trainer.iteration % config.checkpoint_interval == 0 || trainer.iteration == config.iterations {
            check_parameters_finite(&trainer.model)?;
            trainer.save(&checkpoint_path(&ckpt_dir, trainer.iteration))?;
            log::info!(
                "iteration {}: total_g {:.4} total_d {:.4} cycle {:.4}",
                trainer.iteration,
                report.total_g,
                report.total_d,
                report.cycle
            );
        }
        last_report = Some(report);
    }
    let final_checkpoint = config.output_dir.join(FINAL_CHECKPOINT);
    trainer.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        iterations_run: trainer.iteration - first,
        last_report,
    })
}

/// Reads every record of a training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| LomitError::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LomitError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Named parameter snapshot, for comparisons in tests and tools.
pub fn parameter_snapshot(model: &ModelBundle) -> BTreeMap<String, Tensor> {
    model
        .named_variables()
        .into_iter()
        .map(|(n, t)| (n, t.detach().copy()))
        .collect()
}

/// L2 norm of all gradients accumulated in `vars`.
pub fn gradient_norm(vars: &[(String, Tensor)]) -> f64 {
    vars.iter()
        .map(|(_, v)| {
            let g = v.grad();
            if g.defined() {
                g.to_kind(Kind::Double).square().sum(Kind::Double).double_value(&[])
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .sqrt()
}
