//! Training losses, mask regularizers and the weighted generator/critic totals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{dim_err, LomitError, Result};
use crate::hadain;

/// Tolerance on the unit length of normalized content rows.
const UNIT_ROW_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_style_fg: f64,
    pub lambda_style_bg: f64,
    pub lambda_content: f64,
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    pub lambda_cycle: f64,
    pub lambda_adv: f64,
    pub lambda_cls: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_style_fg: 1.0,
            lambda_style_bg: 1.0,
            lambda_content: 1.0,
            lambda_r1: 1e-4,
            lambda_r2: 1e-3,
            lambda_cycle: 10.0,
            lambda_adv: 1.0,
            lambda_cls: 1.0,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_style_fg: 0.0,
            lambda_style_bg: 0.0,
            lambda_content: 0.0,
            lambda_r1: 0.0,
            lambda_r2: 0.0,
            lambda_cycle: 0.0,
            lambda_adv: 0.0,
            lambda_cls: 0.0,
            lambda_gp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_style_fg", self.lambda_style_fg),
            ("lambda_style_bg", self.lambda_style_bg),
            ("lambda_content", self.lambda_content),
            ("lambda_r1", self.lambda_r1),
            ("lambda_r2", self.lambda_r2),
            ("lambda_cycle", self.lambda_cycle),
            ("lambda_adv", self.lambda_adv),
            ("lambda_cls", self.lambda_cls),
            ("lambda_gp", self.lambda_gp),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LomitError::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Weight applied to a generator-side term. Self-reconstruction shares
    /// the cycle weight.
    pub fn generator_weight(&self, term: GeneratorTerm) -> f64 {
        match term {
            GeneratorTerm::StyleFg => self.lambda_style_fg,
            GeneratorTerm::StyleBg => self.lambda_style_bg,
            GeneratorTerm::Content => self.lambda_content,
            GeneratorTerm::MaskConsistency => self.lambda_r1,
            GeneratorTerm::MaskSize => self.lambda_r2,
            GeneratorTerm::Cycle | GeneratorTerm::SelfRecon => self.lambda_cycle,
            GeneratorTerm::Adversarial => self.lambda_adv,
            GeneratorTerm::Classification => self.lambda_cls,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorTerm {
    StyleFg,
    StyleBg,
    Content,
    MaskConsistency,
    MaskSize,
    Cycle,
    SelfRecon,
    Adversarial,
    Classification,
}

impl GeneratorTerm {
    /// Terms every generator update must provide.
    pub const REQUIRED: [GeneratorTerm; 8] = [
        GeneratorTerm::StyleFg,
        GeneratorTerm::StyleBg,
        GeneratorTerm::Content,
        GeneratorTerm::MaskConsistency,
        GeneratorTerm::MaskSize,
        GeneratorTerm::Cycle,
        GeneratorTerm::Adversarial,
        GeneratorTerm::Classification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorTerm::StyleFg => "style_fg",
            GeneratorTerm::StyleBg => "style_bg",
            GeneratorTerm::Content => "content",
            GeneratorTerm::MaskConsistency => "r1",
            GeneratorTerm::MaskSize => "r2",
            GeneratorTerm::Cycle => "cycle",
            GeneratorTerm::SelfRecon => "self_recon",
            GeneratorTerm::Adversarial => "adv_g",
            GeneratorTerm::Classification => "cls_g",
        }
    }
}

/// Generator-side loss tensors for one translation direction.
pub type DirectionTerms = BTreeMap<GeneratorTerm, Tensor>;

/// One training step's scalar losses. Generator terms are averaged over the
/// two translation directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub style_fg: f64,
    pub style_bg: f64,
    pub content: f64,
    pub r1: f64,
    pub r2: f64,
    pub cycle: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_recon: Option<f64>,
    pub adv_g: f64,
    pub cls_g: f64,
    pub adv_d: f64,
    pub gp: f64,
    pub cls_d: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    /// Assembles a report from averaged generator terms and critic terms;
    /// the totals are the declared weighted sums.
    pub fn new(
        generator: &BTreeMap<GeneratorTerm, f64>,
        critic: CriticTerms,
        weights: &LossWeights,
    ) -> Result<Self> {
        let get = |t: GeneratorTerm| {
            generator.get(&t).copied().ok_or_else(|| {
                LomitError::Contract(format!("missing generator term {}", t.name()))
            })
        };
        let total_g = generator
            .iter()
            .map(|(t, v)| weights.generator_weight(*t) * v)
            .sum();
        let report = Self {
            style_fg: get(GeneratorTerm::StyleFg)?,
            style_bg: get(GeneratorTerm::StyleBg)?,
            content: get(GeneratorTerm::Content)?,
            r1: get(GeneratorTerm::MaskConsistency)?,
            r2: get(GeneratorTerm::MaskSize)?,
            cycle: get(GeneratorTerm::Cycle)?,
            self_recon: generator.get(&GeneratorTerm::SelfRecon).copied(),
            adv_g: get(GeneratorTerm::Adversarial)?,
            cls_g: get(GeneratorTerm::Classification)?,
            adv_d: critic.adversarial,
            gp: critic.gradient_penalty,
            cls_d: critic.classification,
            total_g,
            total_d: critic.weighted_total(weights),
        };
        report.check_finite()?;
        Ok(report)
    }

    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("style_fg", self.style_fg),
            ("style_bg", self.style_bg),
            ("content", self.content),
            ("r1", self.r1),
            ("r2", self.r2),
            ("cycle", self.cycle),
        ];
        if let Some(s) = self.self_recon {
            v.push(("self_recon", s));
        }
        v.extend([
            ("adv_g", self.adv_g),
            ("cls_g", self.cls_g),
            ("adv_d", self.adv_d),
            ("gp", self.gp),
            ("cls_d", self.cls_d),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]);
        v
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.named_values().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(LomitError::Numeric(format!("loss term {name} is {v}"))),
            None => Ok(()),
        }
    }
}

/// Critic-side scalar terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticTerms {
    pub adversarial: f64,
    pub gradient_penalty: f64,
    pub classification: f64,
}

impl CriticTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_adv * self.adversarial
            + w.lambda_gp * self.gradient_penalty
            + w.lambda_cls * self.classification
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.size() != b.size() {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.size(),
            b.size()
        ));
    }
    Ok((a - b).abs().mean(a.kind()))
}

/// Mean absolute difference between two style codes.
pub fn style_recon_loss(s_trans: &Tensor, s_ref: &Tensor) -> Result<Tensor> {
    mean_abs_diff(s_trans, s_ref, "style reconstruction")
}

/// Mean absolute difference between two content codes.
pub fn content_recon_loss(c_trans: &Tensor, c_in: &Tensor) -> Result<Tensor> {
    mean_abs_diff(c_trans, c_in, "content reconstruction")
}

/// Mean absolute pixel difference between a cycled image and its original.
pub fn cycle_loss(x_cyc: &Tensor, x_orig: &Tensor) -> Result<Tensor> {
    mean_abs_diff(x_cyc, x_orig, "cycle reconstruction")
}

/// Mask/content consistency regularizer.
///
/// `m` is `[B, N]` (flattened mask), `c_hat` is `[B, N, C]` with unit rows.
/// Returns `Σ_ij |m_i − m_j| · (ĉ_i · ĉ_j)` averaged over the batch. With
/// `stop_content_grad` the similarity matrix is detached so gradients reach
/// only the mask.
pub fn mask_content_consistency_reg(
    m: &Tensor,
    c_hat: &Tensor,
    stop_content_grad: bool,
) -> Result<Tensor> {
    let (b, n) = match m.size().as_slice() {
        &[b, n] => (b, n),
        other => return dim_err(format!("flattened mask must be [B, N], got {other:?}")),
    };
    match c_hat.size().as_slice() {
        &[cb, cn, _] if cb == b && cn == n => {}
        other => {
            return dim_err(format!(
                "normalized content must be [{b}, {n}, C], got {other:?}"
            ))
        }
    }
    let norms = c_hat.square().sum_dim_intlist(&[2i64][..], false, None).sqrt();
    let worst = (norms - 1.0).abs().max().double_value(&[]);
    if !(worst <= UNIT_ROW_TOLERANCE) {
        return Err(LomitError::Domain(format!(
            "content rows must have unit norm (worst deviation {worst:e})"
        )));
    }
    let c_hat = if stop_content_grad {
        c_hat.detach()
    } else {
        c_hat.shallow_clone()
    };
    let distance = (m.unsqueeze(2) - m.unsqueeze(1)).abs();
    let similarity = c_hat.bmm(&c_hat.transpose(1, 2));
    Ok((distance * similarity)
        .sum_dim_intlist(&[1i64, 2][..], false, None)
        .mean(m.kind()))
}

/// Mask-size regularizer: per-sample L1 mass, averaged over the batch.
pub fn mask_size_reg(m: &Tensor) -> Result<Tensor> {
    let flat = hadain::flatten_mask(m)?;
    Ok(flat.sum_dim_intlist(&[1i64][..], false, None).mean(m.kind()))
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let all_finite = t.isfinite().all().int64_value(&[]) != 0;
    if !all_finite {
        return Err(LomitError::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Wasserstein critic and generator terms:
/// `(mean(fake) − mean(real), −mean(fake))`.
pub fn adversarial_losses(critic_real: &Tensor, critic_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    check_finite(critic_real, "critic output on real images")?;
    check_finite(critic_fake, "critic output on generated images")?;
    let fake_mean = critic_fake.mean(critic_fake.kind());
    let d_term = &fake_mean - critic_real.mean(critic_real.kind());
    let g_term = -fake_mean;
    Ok((d_term, g_term))
}

/// Gradient penalty on points interpolated between real and generated
/// images: `mean((‖∇ critic(x̂)‖₂ − 1)²)` with
/// `x̂ = α·real + (1 − α)·fake` and one `α ∈ [0, 1]` per sample.
///
/// The returned tensor is differentiable with respect to the critic's
/// parameters.
pub fn gradient_penalty<F>(
    critic: F,
    x_real: &Tensor,
    x_fake: &Tensor,
    alpha: &Tensor,
) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x_real.size() != x_fake.size() {
        return dim_err(format!(
            "real {:?} and fake {:?} batches differ in shape",
            x_real.size(),
            x_fake.size()
        ));
    }
    let b = x_real.size()[0];
    if alpha.size() != [b] {
        return dim_err(format!("alpha must be [{b}], got {:?}", alpha.size()));
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat(1).take(x_real.dim() - 1));
    let alpha = alpha.to_kind(x_real.kind()).reshape(&shape);
    let from_real: Tensor = &alpha * x_real.detach();
    let from_fake: Tensor = (1.0 - &alpha) * x_fake.detach();
    let interpolated = (from_real + from_fake).set_requires_grad(true);
    let out = critic(&interpolated)?;
    let grads = Tensor::f_run_backward(&[out.sum(out.kind())], &[&interpolated], true, true)?;
    let grad = grads[0].flatten(1, -1);
    let norm = (grad.square().sum_dim_intlist(&[1i64][..], false, None) + 1e-12).sqrt();
    let penalty = (norm - 1.0).square().mean(x_real.kind());
    check_finite(&penalty, "gradient penalty")?;
    Ok(penalty)
}

/// Mean per-attribute binary cross-entropy on logits.
pub fn classification_loss(attr_logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if attr_logits.size() != target.size() {
        return dim_err(format!(
            "attribute logits {:?} and targets {:?} differ in shape",
            attr_logits.size(),
            target.size()
        ));
    }
    Ok(attr_logits.binary_cross_entropy_with_logits::<Tensor>(
        &target.to_kind(attr_logits.kind()),
        None,
        None,
        tch::Reduction::Mean,
    ))
}

/// `Σ_k λ_k · (L_k(1→2) + L_k(2→1)) / 2` over the generator terms.
///
/// Every term in [`GeneratorTerm::REQUIRED`] must be present in both
/// directions; optional terms must be present in both or neither.
pub fn total_generator_loss(
    forward: &DirectionTerms,
    backward: &DirectionTerms,
    weights: &LossWeights,
) -> Result<Tensor> {
    check_terms(forward.keys().copied(), backward.keys().copied())?;
    let mut total: Option<Tensor> = None;
    for (term, f) in forward {
        let b = &backward[term];
        let w = weights.generator_weight(*term);
        let contribution = (f + b) * (0.5 * w);
        total = Some(match total {
            Some(t) => t + contribution,
            None => contribution,
        });
    }
    Ok(total.expect("required terms are present"))
}

/// Scalar counterpart of [`total_generator_loss`].
pub fn total_generator_value(
    forward: &BTreeMap<GeneratorTerm, f64>,
    backward: &BTreeMap<GeneratorTerm, f64>,
    weights: &LossWeights,
) -> Result<f64> {
    check_terms(forward.keys().copied(), backward.keys().copied())?;
    Ok(forward
        .iter()
        .map(|(t, f)| weights.generator_weight(*t) * 0.5 * (f + backward[t]))
        .sum())
}

fn check_terms(
    forward: impl Iterator<Item = GeneratorTerm>,
    backward: impl Iterator<Item = GeneratorTerm>,
) -> Result<()> {
    let f: Vec<_> = forward.collect();
    let b: Vec<_> = backward.collect();
    for term in GeneratorTerm::REQUIRED {
        if !f.contains(&term) || !b.contains(&term) {
            return Err(LomitError::Contract(format!(
                "generator term {} missing from a translation direction",
                term.name()
            )));
        }
    }
    if f != b {
        return Err(LomitError::Contract(format!(
            "directions carry different terms: {f:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// Averages each term's scalar value over the two directions.
pub fn averaged_terms(
    forward: &DirectionTerms,
    backward: &DirectionTerms,
) -> Result<BTreeMap<GeneratorTerm, f64>> {
    check_terms(forward.keys().copied(), backward.keys().copied())?;
    Ok(forward
        .iter()
        .map(|(t, f)| {
            let b = &backward[t];
            (*t, 0.5 * (scalar(f) + scalar(b)))
        })
        .collect())
}

pub(crate) fn scalar(t: &Tensor) -> f64 {
    t.to_kind(Kind::Double).double_value(&[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    fn t64(data: &[f64], shape: &[i64]) -> Tensor {
        Tensor::from_slice(data).reshape(shape)
    }

    #[test]
    fn style_loss_examples() {
        let a = t64(&[1., 2.], &[1, 2]);
        let b = t64(&[2., 4.], &[1, 2]);
        assert_eq!(scalar(&style_recon_loss(&a, &a).unwrap()), 0.0);
        assert_eq!(scalar(&style_recon_loss(&a, &b).unwrap()), 1.5);
        assert_eq!(scalar(&style_recon_loss(&b, &a).unwrap()), 1.5);
        let c = t64(&[1., 2., 3.], &[1, 3]);
        assert!(matches!(style_recon_loss(&a, &c), Err(LomitError::Dimension(_))));
    }

    #[test]
    fn content_and_cycle_examples() {
        let zeros = Tensor::zeros([2, 4, 3, 3], (Kind::Double, Device::Cpu));
        let ones = zeros.ones_like();
        assert_eq!(scalar(&content_recon_loss(&zeros, &zeros).unwrap()), 0.0);
        assert_eq!(scalar(&content_recon_loss(&zeros, &ones).unwrap()), 1.0);
        let x = Tensor::rand([2, 3, 4, 4], (Kind::Double, Device::Cpu)) - 0.5;
        assert_eq!(scalar(&cycle_loss(&x, &x).unwrap()), 0.0);
        let y = &x + 0.5;
        assert!((scalar(&cycle_loss(&y, &x).unwrap()) - 0.5).abs() < 1e-12);
        assert_eq!(
            scalar(&cycle_loss(&y, &x).unwrap()),
            scalar(&cycle_loss(&x, &y).unwrap())
        );
    }

    #[test]
    fn r1_examples() {
        let c_hat = t64(&[1., 0., 1., 0.], &[1, 2, 2]);
        let m = t64(&[1., 0.], &[1, 2]);
        assert_eq!(scalar(&mask_content_consistency_reg(&m, &c_hat, true).unwrap()), 2.0);

        let uniform = t64(&[0.3, 0.3], &[1, 2]);
        assert_eq!(
            scalar(&mask_content_consistency_reg(&uniform, &c_hat, true).unwrap()),
            0.0
        );

        let orthogonal = t64(&[1., 0., 0., 1.], &[1, 2, 2]);
        assert_eq!(
            scalar(&mask_content_consistency_reg(&m, &orthogonal, true).unwrap()),
            0.0
        );
    }

    #[test]
    fn r1_errors() {
        let c_hat = t64(&[1., 0., 1., 0.], &[1, 2, 2]);
        let m = t64(&[1., 0., 0.5], &[1, 3]);
        assert!(matches!(
            mask_content_consistency_reg(&m, &c_hat, true),
            Err(LomitError::Dimension(_))
        ));
        let not_unit = t64(&[2., 0., 1., 0.], &[1, 2, 2]);
        let m = t64(&[1., 0.], &[1, 2]);
        assert!(matches!(
            mask_content_consistency_reg(&m, &not_unit, true),
            Err(LomitError::Domain(_))
        ));
    }

    #[test]
    fn r2_examples() {
        let ones = Tensor::ones([1, 1, 8, 8], (Kind::Double, Device::Cpu));
        assert_eq!(scalar(&mask_size_reg(&ones).unwrap()), 64.0);
        assert_eq!(scalar(&mask_size_reg(&ones.zeros_like()).unwrap()), 0.0);
        let m = t64(&[0.5, 0.25, 0., 1.], &[1, 1, 2, 2]);
        assert_eq!(scalar(&mask_size_reg(&m).unwrap()), 1.75);
    }

    #[test]
    fn adversarial_examples() {
        let same = t64(&[0.7, -0.2], &[2]);
        let (d, _) = adversarial_losses(&same, &same).unwrap();
        assert_eq!(scalar(&d), 0.0);
        let (d, g) = adversarial_losses(&t64(&[3.], &[1]), &t64(&[1.], &[1])).unwrap();
        assert_eq!(scalar(&d), -2.0);
        assert_eq!(scalar(&g), -1.0);
        let (_, g_hi) = adversarial_losses(&t64(&[3.], &[1]), &t64(&[1.5], &[1])).unwrap();
        assert!(scalar(&g_hi) < scalar(&g));
        let nan = t64(&[f64::NAN], &[1]);
        assert!(matches!(
            adversarial_losses(&nan, &same),
            Err(LomitError::Numeric(_))
        ));
    }

    #[test]
    fn classification_examples() {
        let one = t64(&[1.], &[1, 1]);
        let zero = t64(&[0.], &[1, 1]);
        assert!(scalar(&classification_loss(&t64(&[30.], &[1, 1]), &one).unwrap()) < 1e-12);
        for label in [&one, &zero] {
            let l = scalar(&classification_loss(&zero, label).unwrap());
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let l = scalar(&classification_loss(&t64(&[-2.], &[1, 1]), &one).unwrap());
        assert!((l - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!((l - 2.1269).abs() < 1e-4);
        assert!(matches!(
            classification_loss(&t64(&[0., 0.], &[1, 2]), &one),
            Err(LomitError::Dimension(_))
        ));
    }

    fn full_terms(value: f64) -> DirectionTerms {
        GeneratorTerm::REQUIRED
            .iter()
            .map(|t| (*t, t64(&[value], &[])))
            .collect()
    }

    #[test]
    fn totals_are_linear() {
        let f = full_terms(3.0);
        let b = full_terms(3.0);
        assert_eq!(scalar(&total_generator_loss(&f, &b, &LossWeights::zero()).unwrap()), 0.0);
        let mut w = LossWeights::zero();
        w.lambda_content = 2.0;
        assert_eq!(scalar(&total_generator_loss(&f, &b, &w).unwrap()), 6.0);
    }

    #[test]
    fn totals_reject_missing_terms() {
        let f = full_terms(1.0);
        let mut b = full_terms(1.0);
        b.remove(&GeneratorTerm::Cycle);
        assert!(matches!(
            total_generator_loss(&f, &b, &LossWeights::default()),
            Err(LomitError::Contract(_))
        ));
        let mut f2 = full_terms(1.0);
        f2.insert(GeneratorTerm::SelfRecon, t64(&[1.0], &[]));
        assert!(matches!(
            total_generator_loss(&f2, &full_terms(1.0), &LossWeights::default()),
            Err(LomitError::Contract(_))
        ));
    }

    #[test]
    fn weights_validation() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.lambda_gp = -1.0;
        assert!(w.validate().is_err());
        w.lambda_gp = f64::NAN;
        assert!(w.validate().is_err());
    }
}
