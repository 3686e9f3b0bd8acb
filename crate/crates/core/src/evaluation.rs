//! Fréchet distance between feature sets, mask IoU, local translation
//! fidelity, and the held-out evaluation driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Device, Kind, Tensor};

use crate::data::{derive_seed, Dataset, Domain, ImageRecord};
use crate::error::{dim_err, LomitError, Result};
use crate::networks::{MaskOverrides, ModelBundle};

pub const IOU_THRESHOLD: f64 = 0.5;

/// Feature vectors as rows, `n × F`.
pub type Features = DMatrix<f64>;

/// Fréchet distance between Gaussian fits of two feature sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetResult {
    pub distance: f64,
    /// Either set has at most `F` samples, so its covariance is rank deficient.
    pub undersized: bool,
}

fn check_features(f: &Features, what: &str) -> Result<()> {
    if f.nrows() < 2 {
        return Err(LomitError::Dimension(format!(
            "{what} needs at least 2 samples, got {}",
            f.nrows()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(LomitError::Numeric(format!("{what} contains non-finite features")));
    }
    Ok(())
}

/// Sample mean and unbiased covariance of the rows.
pub fn mean_and_covariance(f: &Features) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.nrows() as f64;
    let mu = f.row_mean().transpose();
    let centered = DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| f[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

/// Principal square root of a symmetric positive semi-definite matrix via its
/// eigendecomposition; round-off negative eigenvalues are clipped to zero.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((C_a C_b)^{1/2})`, evaluated as the trace of the square root of the
/// symmetric product `C_a^{1/2} C_b C_a^{1/2}`.
pub fn trace_sqrt_product(ca: &DMatrix<f64>, cb: &DMatrix<f64>) -> f64 {
    let sa = sqrtm_psd(ca);
    let m = &sa * cb * &sa;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// `‖μ_a − μ_b‖² + Tr(C_a + C_b − 2 (C_a C_b)^{1/2})`, clamped at zero.
pub fn frechet_distance(a: &Features, b: &Features) -> Result<FrechetResult> {
    check_features(a, "first feature set")?;
    check_features(b, "second feature set")?;
    if a.ncols() != b.ncols() {
        return dim_err(format!(
            "feature sets have different widths ({} vs {})",
            a.ncols(),
            b.ncols()
        ));
    }
    let (mu_a, ca) = mean_and_covariance(a);
    let (mu_b, cb) = mean_and_covariance(b);
    let d = (&mu_a - &mu_b).norm_squared() + ca.trace() + cb.trace()
        - 2.0 * trace_sqrt_product(&ca, &cb);
    let width = a.ncols();
    Ok(FrechetResult {
        distance: d.max(0.0),
        undersized: a.nrows() <= width || b.nrows() <= width,
    })
}

fn binarize(t: &Tensor, threshold: f64) -> Vec<bool> {
    Vec::<f64>::try_from(t.to_kind(Kind::Double).flatten(0, -1))
        .expect("double tensor")
        .into_iter()
        .map(|v| v >= threshold)
        .collect()
}

/// IoU of `m` thresholded at `threshold` against a binary `truth` (itself
/// read as `truth ≥ 0.5`). An empty union counts as a perfect match.
pub fn mask_iou(m: &Tensor, truth: &Tensor, threshold: f64) -> Result<f64> {
    if m.size() != truth.size() {
        return dim_err(format!(
            "mask {:?} and ground truth {:?} differ in shape",
            m.size(),
            truth.size()
        ));
    }
    let (pm, pt) = (binarize(m, threshold), binarize(truth, 0.5));
    let inter = pm.iter().zip(&pt).filter(|(a, b)| **a && **b).count();
    let union = pm.iter().zip(&pt).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Foreground transfer and background preservation errors for one sample.
/// `None` marks an empty region (all-zero foreground or all-one mask).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub fg_transfer_error: Option<f64>,
    pub bg_preservation_error: Option<f64>,
}

const REGION_EPS: f64 = 1e-12;

/// Per-channel mean color of `x` `[3, H, W]` weighted by `m` `[1, H, W]`.
fn masked_mean_color(x: &Tensor, m: &Tensor) -> Option<Vec<f64>> {
    let mass = m.sum(Kind::Double).double_value(&[]);
    if mass <= REGION_EPS {
        return None;
    }
    let sums = (x * m).to_kind(Kind::Double).sum_dim_intlist(&[1i64, 2][..], false, None);
    Some(Vec::<f64>::try_from(sums).expect("double").into_iter().map(|s| s / mass).collect())
}

/// `fg`: mean over channels of |mean color of `x_out` inside `m_in` − mean
/// color of `exemplar` inside `m_ex`|. `bg`: mean |x_out − x_in| outside
/// `m_in`. Single-sample tensors shaped `[3, H, W]` / `[1, H, W]`.
pub fn local_fidelity(
    x_in: &Tensor,
    x_out: &Tensor,
    exemplar: &Tensor,
    m_in: &Tensor,
    m_ex: &Tensor,
) -> Result<Fidelity> {
    for (name, t) in [("output", x_out), ("exemplar", exemplar)] {
        if t.size() != x_in.size() {
            return dim_err(format!(
                "{name} {:?} does not match input {:?}",
                t.size(),
                x_in.size()
            ));
        }
    }
    let image = x_in.size();
    if image.len() != 3 {
        return dim_err(format!("expected [C, H, W] images, got {image:?}"));
    }
    for (name, m) in [("input mask", m_in), ("exemplar mask", m_ex)] {
        if m.size() != [1, image[1], image[2]] {
            return dim_err(format!("{name} {:?} does not match image {image:?}", m.size()));
        }
        crate::hadain::check_mask_range(m)?;
    }
    let fg = match (masked_mean_color(x_out, m_in), masked_mean_color(exemplar, m_ex)) {
        (Some(a), Some(b)) => {
            Some(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
        }
        _ => None,
    };
    let outside: Tensor = 1.0 - m_in;
    let mass = outside.sum(Kind::Double).double_value(&[]) * image[0] as f64;
    let bg = if mass <= REGION_EPS {
        None
    } else {
        let diff = ((x_out - x_in).abs() * &outside).sum(Kind::Double).double_value(&[]);
        Some(diff / mass)
    };
    Ok(Fidelity {
        fg_transfer_error: fg,
        bg_preservation_error: bg,
    })
}

/// Maps image batches `[B, 3, H, W]` to feature rows.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, images: &Tensor) -> Result<Features>;
}

fn rows_to_features(t: &Tensor) -> Result<Features> {
    let t = t.to_kind(Kind::Double).contiguous();
    let (n, f) = match t.size().as_slice() {
        &[n, f] => (n as usize, f as usize),
        other => return dim_err(format!("feature tensor must be rank 2, got {other:?}")),
    };
    let values = Vec::<f64>::try_from(t.flatten(0, -1))?;
    Ok(DMatrix::from_row_slice(n, f, &values))
}

/// A fixed, randomly initialized convolutional embedder.
#[derive(Debug)]
pub struct RandomConvEmbedder {
    _vs: nn::VarStore,
    net: nn::Sequential,
    dim: usize,
}

impl RandomConvEmbedder {
    pub const DEFAULT_DIM: i64 = 64;
    pub const DEFAULT_SEED: u64 = 0xF1D;

    pub fn new(seed: u64, dim: i64) -> Self {
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let widths = [3, 16, 32, dim];
        let mut net = nn::seq();
        for (i, w) in widths.windows(2).enumerate() {
            let cfg = nn::ConvConfig {
                stride: 2,
                padding: 1,
                ..Default::default()
            };
            net = net
                .add(nn::conv2d(&root / format!("conv{i}"), w[0], w[1], 4, cfg))
                .add_fn(|x| x.relu());
        }
        net = net.add_fn(|x| x.mean_dim(&[2i64, 3][..], false, None));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vars: Vec<_> = vs.variables().into_iter().collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        tch::no_grad(|| {
            for (name, var) in vars {
                let shape = var.size();
                let numel: i64 = shape.iter().product();
                let values: Vec<f32> = if name.ends_with(".bias") {
                    vec![0.0; numel as usize]
                } else {
                    let fan_in: i64 = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound) as f32).collect()
                };
                var.shallow_clone().copy_(&Tensor::from_slice(&values).reshape(&shape));
                let _ = var.shallow_clone().set_requires_grad(false);
            }
        });
        Self {
            _vs: vs,
            net,
            dim: dim as usize,
        }
    }
}

impl Default for RandomConvEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED, Self::DEFAULT_DIM)
    }
}

impl FeatureExtractor for RandomConvEmbedder {
    fn name(&self) -> &str {
        "random_conv"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, images: &Tensor) -> Result<Features> {
        rows_to_features(&tch::no_grad(|| self.net.forward(images)))
    }
}

/// Raw pixels area-averaged down to `side × side`.
#[derive(Clone, Copy, Debug)]
pub struct PixelFeatures {
    pub side: i64,
}

impl Default for PixelFeatures {
    fn default() -> Self {
        Self { side: 4 }
    }
}

impl FeatureExtractor for PixelFeatures {
    fn name(&self) -> &str {
        "pixels"
    }

    fn dim(&self) -> usize {
        (3 * self.side * self.side) as usize
    }

    fn extract(&self, images: &Tensor) -> Result<Features> {
        let pooled = images.adaptive_avg_pool2d([self.side, self.side]);
        rows_to_features(&pooled.flatten(1, -1))
    }
}

/// Output of translating a batch.
#[derive(Debug)]
pub struct TranslatedBatch {
    pub output: Tensor,
    /// Input masks used, if the translator produces any.
    pub input_mask: Option<Tensor>,
}

pub trait Translator {
    fn translate_batch(&self, inputs: &Tensor, exemplars: &Tensor) -> Result<TranslatedBatch>;
}

impl Translator for ModelBundle {
    fn translate_batch(&self, inputs: &Tensor, exemplars: &Tensor) -> Result<TranslatedBatch> {
        tch::no_grad(|| {
            let t = self.translate(inputs, exemplars, MaskOverrides::default())?;
            Ok(TranslatedBatch {
                output: t.output,
                input_mask: Some(t.input_mask),
            })
        })
    }
}

/// Returns inputs unchanged; the untranslated baseline.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate_batch(&self, inputs: &Tensor, _exemplars: &Tensor) -> Result<TranslatedBatch> {
        Ok(TranslatedBatch {
            output: inputs.shallow_clone(),
            input_mask: None,
        })
    }
}

/// Fréchet distances for one translation direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetEntry {
    /// Outputs against real images of the target domain.
    pub translated: f64,
    /// Untranslated inputs against real images of the target domain.
    pub untranslated: f64,
    /// Outputs against their own inputs.
    pub input_drift: f64,
    pub undersized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub image: String,
    pub iou: Option<f64>,
    pub fg_err: Option<f64>,
    pub bg_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor: String,
    /// Keyed by target subset, `<attribute>=<0|1>`.
    pub frechet: BTreeMap<String, FrechetEntry>,
    pub mask_iou: Option<f64>,
    pub fg_transfer_error: Option<f64>,
    pub bg_preservation_error: Option<f64>,
    pub samples: usize,
    /// Samples whose foreground or background region was empty.
    pub undefined_regions: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn check_finite(&self) -> Result<()> {
        let mut values: Vec<(String, f64)> = Vec::new();
        for (k, e) in &self.frechet {
            values.push((format!("frechet[{k}].translated"), e.translated));
            values.push((format!("frechet[{k}].untranslated"), e.untranslated));
            values.push((format!("frechet[{k}].input_drift"), e.input_drift));
        }
        for (k, v) in [
            ("mask_iou", self.mask_iou),
            ("fg_transfer_error", self.fg_transfer_error),
            ("bg_preservation_error", self.bg_preservation_error),
        ] {
            if let Some(v) = v {
                values.push((k.into(), v));
            }
        }
        match values.into_iter().find(|(_, v)| !v.is_finite()) {
            Some((k, v)) => Err(LomitError::Numeric(format!("{k} is {v}"))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| LomitError::Config(format!("cannot serialize report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LomitError::Config(format!("invalid report: {e}")))
    }

    /// `image,iou,fg_err,bg_err`, empty cells for undefined values.
    pub fn per_sample_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("image,iou,fg_err,bg_err\n");
        for s in &self.per_sample {
            let _ = writeln!(out, "{},{},{},{}", s.image, cell(s.iou), cell(s.fg_err), cell(s.bg_err));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| LomitError::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
        }
    }
}

fn stack_images(records: &[&ImageRecord]) -> Tensor {
    Tensor::cat(&records.iter().map(|r| r.image.to_tensor()).collect::<Vec<_>>(), 0)
}

fn stack_masks(records: &[&ImageRecord], resolution: i64) -> Option<Tensor> {
    let masks: Option<Vec<Tensor>> = records
        .iter()
        .map(|r| r.mask.as_ref().map(|m| Tensor::from_slice(m).reshape([1, 1, resolution, resolution])))
        .collect();
    masks.map(|m| Tensor::cat(&m, 0))
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Translates every image of each domain toward a random exemplar of the
/// other domain and computes all metrics. Mask IoU and fidelity use the
/// dataset's ground-truth masks where available.
pub fn evaluate(
    translator: &dyn Translator,
    dataset: &Dataset,
    extractor: &dyn FeatureExtractor,
    options: EvalOptions,
) -> Result<EvalReport> {
    if options.batch_size == 0 {
        return Err(LomitError::Config("evaluation batch size must be at least 1".into()));
    }
    let attribute = dataset
        .attribute_names
        .first()
        .cloned()
        .unwrap_or_else(|| "domain".into());
    let r = dataset.resolution;
    let mut frechet = BTreeMap::new();
    let mut per_sample = Vec::new();
    let mut undefined = 0;

    for (source, target, label) in [(Domain::A, Domain::B, 1), (Domain::B, Domain::A, 0)] {
        let inputs = dataset.domain(source);
        let targets = dataset.domain(target);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[options.seed, label]));
        let pairing: Vec<usize> = (0..inputs.len()).map(|_| rng.gen_range(0..targets.len())).collect();

        let mut out_feats = Vec::new();
        let mut in_feats = Vec::new();
        for start in (0..inputs.len()).step_by(options.batch_size) {
            let end = (start + options.batch_size).min(inputs.len());
            let ins: Vec<&ImageRecord> = inputs[start..end].iter().collect();
            let exs: Vec<&ImageRecord> = pairing[start..end].iter().map(|j| &targets[*j]).collect();
            let (x_in, x_ex) = (stack_images(&ins), stack_images(&exs));
            let t = translator.translate_batch(&x_in, &x_ex)?;
            if t.output.size() != x_in.size() {
                return dim_err(format!(
                    "translator returned {:?} for inputs {:?}",
                    t.output.size(),
                    x_in.size()
                ));
            }
            out_feats.push(extractor.extract(&t.output)?);
            in_feats.push(extractor.extract(&x_in)?);
            let truth_in = stack_masks(&ins, r);
            let truth_ex = stack_masks(&exs, r);
            for k in 0..ins.len() {
                let ki = k as i64;
                let iou = match (&t.input_mask, &truth_in) {
                    (Some(m), Some(truth)) => Some(mask_iou(&m.get(ki), &truth.get(ki), IOU_THRESHOLD)?),
                    _ => None,
                };
                let fid = match (&truth_in, &truth_ex) {
                    (Some(mi), Some(me)) => Some(local_fidelity(
                        &x_in.get(ki),
                        &t.output.get(ki),
                        &x_ex.get(ki),
                        &mi.get(ki),
                        &me.get(ki),
                    )?),
                    _ => None,
                };
                if let Some(f) = fid {
                    if f.fg_transfer_error.is_none() || f.bg_preservation_error.is_none() {
                        undefined += 1;
                    }
                }
                per_sample.push(SampleMetrics {
                    image: ins[k].name.clone(),
                    iou,
                    fg_err: fid.and_then(|f| f.fg_transfer_error),
                    bg_err: fid.and_then(|f| f.bg_preservation_error),
                });
            }
        }
        let outputs = vstack(&out_feats);
        let originals = vstack(&in_feats);
        let reference = batched_features(extractor, targets, options.batch_size)?;
        let translated = frechet_distance(&outputs, &reference)?;
        let untranslated = frechet_distance(&originals, &reference)?;
        let drift = frechet_distance(&outputs, &originals)?;
        frechet.insert(
            format!("{attribute}={label}"),
            FrechetEntry {
                translated: translated.distance,
                untranslated: untranslated.distance,
                input_drift: drift.distance,
                undersized: translated.undersized || untranslated.undersized,
            },
        );
    }

    let report = EvalReport {
        extractor: extractor.name().to_string(),
        frechet,
        mask_iou: mean_of(per_sample.iter().map(|s| s.iou)),
        fg_transfer_error: mean_of(per_sample.iter().map(|s| s.fg_err)),
        bg_preservation_error: mean_of(per_sample.iter().map(|s| s.bg_err)),
        samples: per_sample.len(),
        undefined_regions: undefined,
        per_sample,
    };
    report.check_finite()?;
    Ok(report)
}

fn batched_features(
    extractor: &dyn FeatureExtractor,
    records: &[ImageRecord],
    batch_size: usize,
) -> Result<Features> {
    let parts = records
        .chunks(batch_size)
        .map(|chunk| extractor.extract(&stack_images(&chunk.iter().collect::<Vec<_>>())))
        .collect::<Result<Vec<_>>>()?;
    Ok(vstack(&parts))
}

fn vstack(parts: &[Features]) -> Features {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.nrows()).copy_from(p);
        at += p.nrows();
    }
    out
}
