//! Mask splitting, instance statistics, AdaIN and the highway (mask-gated) AdaIN blend.
//!
//! Tensor layouts follow the rest of the crate: images are `[B, 3, H, W]`,
//! soft masks `[B, 1, H, W]`, content codes `[B, C, H, W]` and affine
//! parameters `[B, C]`. Every function here is a pure, differentiable tensor
//! expression; nothing holds learned state.

use tch::Tensor;

use crate::error::{dim_err, LomitError, Result};

/// Stabilizer added to the population variance before the square root.
pub const VARIANCE_EPS: f64 = 1e-5;

/// Per-sample, per-channel scale and shift produced by an affine head.
#[derive(Debug)]
pub struct AffineParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl AffineParams {
    pub fn new(gamma: Tensor, beta: Tensor) -> Result<Self> {
        if gamma.size() != beta.size() || gamma.dim() != 2 {
            return dim_err(format!(
                "affine params must be matching [B, C] tensors, got gamma {:?} beta {:?}",
                gamma.size(),
                beta.size()
            ));
        }
        Ok(Self { gamma, beta })
    }

    pub fn channels(&self) -> i64 {
        self.gamma.size()[1]
    }

    pub fn shallow_clone(&self) -> Self {
        Self {
            gamma: self.gamma.shallow_clone(),
            beta: self.beta.shallow_clone(),
        }
    }
}

fn check_rank4(t: &Tensor, what: &str) -> Result<[i64; 4]> {
    match t.size().as_slice() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        other => dim_err(format!("{what} must be rank 4, got shape {other:?}")),
    }
}

/// Fails with a domain error unless every mask entry lies in `[0, 1]`.
pub fn check_mask_range(m: &Tensor) -> Result<()> {
    if m.numel() == 0 {
        return Ok(());
    }
    let lo = m.min().double_value(&[]);
    let hi = m.max().double_value(&[]);
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(LomitError::Domain(format!(
            "mask values must lie in [0, 1], found range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

fn check_mask_alignment(m: &Tensor, x: &Tensor, what: &str) -> Result<()> {
    let [mb, mc, mh, mw] = check_rank4(m, "mask")?;
    let [xb, _, xh, xw] = check_rank4(x, what)?;
    if mc != 1 {
        return dim_err(format!("mask must have a single channel, got {mc}"));
    }
    if mb != xb || mh != xh || mw != xw {
        return dim_err(format!(
            "mask {:?} is not aligned with {what} {:?}",
            m.size(),
            x.size()
        ));
    }
    Ok(())
}

/// Splits `x` into `(m ⊙ x, (1 − m) ⊙ x)` with the mask broadcast over channels.
pub fn split_by_mask(x: &Tensor, m: &Tensor) -> Result<(Tensor, Tensor)> {
    check_mask_alignment(m, x, "image")?;
    check_mask_range(m)?;
    let foreground = x * m;
    let background = x * (1.0 - m);
    Ok((foreground, background))
}

/// Per-sample, per-channel mean and stabilized population standard deviation,
/// both shaped `[B, C]`.
pub fn channel_stats(c: &Tensor) -> Result<(Tensor, Tensor)> {
    let [_, _, h, w] = check_rank4(c, "content code")?;
    if h * w == 0 {
        return dim_err("channel statistics need a non-empty spatial extent");
    }
    let mu = c.mean_dim(&[2i64, 3][..], true, None);
    let var = (c - &mu).square().mean_dim(&[2i64, 3][..], false, None);
    let sigma = (var + VARIANCE_EPS).sqrt();
    Ok((mu.squeeze_dim(3).squeeze_dim(2), sigma))
}

/// Instance normalization without affine parameters.
pub fn instance_normalize(c: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = check_rank4(c, "content code")?;
    if h * w == 0 {
        return dim_err("instance normalization needs a non-empty spatial extent");
    }
    Ok(c.instance_norm::<Tensor>(None, None, None, None, true, 0.0, VARIANCE_EPS, false))
}

/// `gamma ⊙ (c − μ(c)) / σ(c) + beta`, per channel, broadcast over space.
pub fn adain(c: &Tensor, params: &AffineParams) -> Result<Tensor> {
    let [b, ch, _, _] = check_rank4(c, "content code")?;
    if params.gamma.size() != [b, ch] {
        return dim_err(format!(
            "affine params {:?} do not match content code with batch {b} and {ch} channels",
            params.gamma.size()
        ));
    }
    let normalized = instance_normalize(c)?;
    let gamma = params.gamma.unsqueeze(2).unsqueeze(3);
    let beta = params.beta.unsqueeze(2).unsqueeze(3);
    Ok(normalized * gamma + beta)
}

/// Highway AdaIN: `m ⊙ adain(c, fg) + (1 − m) ⊙ adain(c, bg)`.
///
/// `m` must already be at the resolution of `c` (see [`downsample_mask`]).
pub fn hadain(
    m: &Tensor,
    c: &Tensor,
    fg_params: &AffineParams,
    bg_params: &AffineParams,
) -> Result<Tensor> {
    check_mask_alignment(m, c, "content code")?;
    check_mask_range(m)?;
    let fg = adain(c, fg_params)?;
    let bg = adain(c, bg_params)?;
    Ok(blend(m, &fg, &bg))
}

/// The gated combination used by [`hadain`], without validation.
pub(crate) fn blend(m: &Tensor, fg: &Tensor, bg: &Tensor) -> Tensor {
    fg * m + bg * (1.0 - m)
}

/// Area-average pooling of a full-resolution mask down to `(h, w)`.
pub fn downsample_mask(m: &Tensor, target: (i64, i64)) -> Result<Tensor> {
    let [_, mc, mh, mw] = check_rank4(m, "mask")?;
    let (th, tw) = target;
    if mc != 1 {
        return dim_err(format!("mask must have a single channel, got {mc}"));
    }
    if th <= 0 || tw <= 0 || mh % th != 0 || mw % tw != 0 {
        return dim_err(format!(
            "target {th}x{tw} does not evenly divide mask resolution {mh}x{mw}"
        ));
    }
    let (kh, kw) = (mh / th, mw / tw);
    if kh == 1 && kw == 1 {
        return Ok(m.shallow_clone());
    }
    Ok(m.avg_pool2d([kh, kw], [kh, kw], [0, 0], false, true, None))
}

/// Rows of a content code flattened to `[B, H·W, C]` and scaled to unit length.
///
/// Zero rows stay zero.
pub fn unit_content_rows(c: &Tensor) -> Result<Tensor> {
    let [b, ch, h, w] = check_rank4(c, "content code")?;
    let rows = c.reshape([b, ch, h * w]).transpose(1, 2);
    let norm = rows
        .square()
        .sum_dim_intlist(&[2i64][..], true, None)
        .sqrt()
        .clamp_min(1e-12);
    Ok(rows / norm)
}

/// A mask `[B, 1, H, W]` flattened to `[B, H·W]`.
pub fn flatten_mask(m: &Tensor) -> Result<Tensor> {
    let [b, mc, h, w] = check_rank4(m, "mask")?;
    if mc != 1 {
        return dim_err(format!("mask must have a single channel, got {mc}"));
    }
    Ok(m.reshape([b, h * w]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    fn t64(data: &[f64], shape: &[i64]) -> Tensor {
        Tensor::from_slice(data).reshape(shape)
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).abs().max().double_value(&[])
    }

    #[test]
    fn split_identity_and_zero_masks() {
        let x = Tensor::randn([2, 3, 4, 4], (Kind::Double, Device::Cpu)).clamp(-1.0, 1.0);
        let ones = Tensor::ones([2, 1, 4, 4], (Kind::Double, Device::Cpu));
        let (fg, bg) = split_by_mask(&x, &ones).unwrap();
        assert_eq!(max_abs_diff(&fg, &x), 0.0);
        assert_eq!(bg.abs().max().double_value(&[]), 0.0);
        let zeros = ones.zeros_like();
        let (fg, bg) = split_by_mask(&x, &zeros).unwrap();
        assert_eq!(fg.abs().max().double_value(&[]), 0.0);
        assert_eq!(max_abs_diff(&bg, &x), 0.0);
    }

    #[test]
    fn split_worked_example() {
        let x = t64(&[2., 4., 6., 8.], &[1, 1, 2, 2]);
        let m = t64(&[1., 0.5, 0., 1.], &[1, 1, 2, 2]);
        let (fg, bg) = split_by_mask(&x, &m).unwrap();
        assert_eq!(Vec::<f64>::try_from(fg.flatten(0, -1)).unwrap(), [2., 2., 0., 8.]);
        assert_eq!(Vec::<f64>::try_from(bg.flatten(0, -1)).unwrap(), [0., 2., 6., 0.]);
    }

    #[test]
    fn split_rejects_bad_masks() {
        let x = Tensor::zeros([1, 3, 4, 4], (Kind::Double, Device::Cpu));
        let m = Tensor::ones([1, 1, 2, 2], (Kind::Double, Device::Cpu));
        assert!(matches!(split_by_mask(&x, &m), Err(LomitError::Dimension(_))));
        let m = Tensor::ones([1, 1, 4, 4], (Kind::Double, Device::Cpu)) * 1.5;
        assert!(matches!(split_by_mask(&x, &m), Err(LomitError::Domain(_))));
        let m = Tensor::ones([1, 1, 4, 4], (Kind::Double, Device::Cpu)) * -0.1;
        assert!(matches!(split_by_mask(&x, &m), Err(LomitError::Domain(_))));
    }

    #[test]
    fn stats_of_constant_and_two_point_channels() {
        let c = Tensor::full([1, 1, 3, 3], 5.0, (Kind::Double, Device::Cpu));
        let (mu, sigma) = channel_stats(&c).unwrap();
        assert_eq!(mu.double_value(&[0, 0]), 5.0);
        assert!((sigma.double_value(&[0, 0]) - VARIANCE_EPS.sqrt()).abs() < 1e-15);

        let c = t64(&[1., 3.], &[1, 1, 1, 2]);
        let (mu, sigma) = channel_stats(&c).unwrap();
        // population variance of {1, 3} is ((1-2)^2 + (3-2)^2) / 2 = 1
        assert!((mu.double_value(&[0, 0]) - 2.0).abs() < 1e-15);
        assert!((sigma.double_value(&[0, 0]) - (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stats_reject_empty_extent() {
        let c = Tensor::zeros([1, 2, 0, 3], (Kind::Double, Device::Cpu));
        assert!(matches!(channel_stats(&c), Err(LomitError::Dimension(_))));
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let c = Tensor::randn([2, 3, 4, 4], (Kind::Double, Device::Cpu));
        let perm = Tensor::randperm(16, (Kind::Int64, Device::Cpu));
        let shuffled = c.reshape([2, 3, 16]).index_select(2, &perm).reshape([2, 3, 4, 4]);
        let (mu_a, sd_a) = channel_stats(&c).unwrap();
        let (mu_b, sd_b) = channel_stats(&shuffled).unwrap();
        assert!(max_abs_diff(&mu_a, &mu_b) < 1e-12);
        assert!(max_abs_diff(&sd_a, &sd_b) < 1e-12);
    }

    #[test]
    fn adain_scalar_example() {
        let c = t64(&[1., 3.], &[1, 1, 1, 2]);
        let p = AffineParams::new(t64(&[2.], &[1, 1]), t64(&[5.], &[1, 1])).unwrap();
        let out = Vec::<f64>::try_from(adain(&c, &p).unwrap().flatten(0, -1)).unwrap();
        // 2 * (±1 / sqrt(1 + 1e-5)) + 5
        let s = (1.0f64 + 1e-5).sqrt();
        assert!((out[0] - (5.0 - 2.0 / s)).abs() < 1e-12);
        assert!((out[1] - (5.0 + 2.0 / s)).abs() < 1e-12);
        assert!((out[0] - 3.0).abs() < 1e-4 && (out[1] - 7.0).abs() < 1e-4);
    }

    #[test]
    fn adain_identity_params_recover_input() {
        let c = Tensor::randn([2, 4, 5, 5], (Kind::Double, Device::Cpu));
        let (mu, sigma) = channel_stats(&c).unwrap();
        let out = adain(&c, &AffineParams::new(sigma, mu).unwrap()).unwrap();
        assert!(max_abs_diff(&out, &c) < 1e-12);
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let c = Tensor::randn([1, 4, 2, 2], (Kind::Double, Device::Cpu));
        let p = AffineParams::new(
            Tensor::ones([1, 3], (Kind::Double, Device::Cpu)),
            Tensor::zeros([1, 3], (Kind::Double, Device::Cpu)),
        )
        .unwrap();
        assert!(matches!(adain(&c, &p), Err(LomitError::Dimension(_))));
    }

    #[test]
    fn hadain_rejects_resolution_mismatch() {
        let c = Tensor::randn([1, 2, 4, 4], (Kind::Double, Device::Cpu));
        let p = AffineParams::new(
            Tensor::ones([1, 2], (Kind::Double, Device::Cpu)),
            Tensor::zeros([1, 2], (Kind::Double, Device::Cpu)),
        )
        .unwrap();
        let m = Tensor::ones([1, 1, 8, 8], (Kind::Double, Device::Cpu));
        assert!(matches!(hadain(&m, &c, &p, &p), Err(LomitError::Dimension(_))));
    }

    #[test]
    fn downsample_examples() {
        let ones = Tensor::ones([1, 1, 64, 64], (Kind::Float, Device::Cpu));
        let d = downsample_mask(&ones, (16, 16)).unwrap();
        assert_eq!(d.size(), [1, 1, 16, 16]);
        assert_eq!(d.min().double_value(&[]), 1.0);
        let d = downsample_mask(&ones.zeros_like(), (16, 16)).unwrap();
        assert_eq!(d.max().double_value(&[]), 0.0);
        let block = t64(&[1., 1., 0., 0.], &[1, 1, 2, 2]);
        let d = downsample_mask(&block, (1, 1)).unwrap();
        assert_eq!(d.double_value(&[0, 0, 0, 0]), 0.5);
        assert!(matches!(
            downsample_mask(&ones, (10, 10)),
            Err(LomitError::Dimension(_))
        ));
    }

    #[test]
    fn unit_rows_are_normalized() {
        let c = Tensor::randn([2, 5, 3, 3], (Kind::Double, Device::Cpu));
        let rows = unit_content_rows(&c).unwrap();
        assert_eq!(rows.size(), [2, 9, 5]);
        let norms = rows.square().sum_dim_intlist(&[2i64][..], false, None).sqrt();
        assert!((norms - 1.0).abs().max().double_value(&[]) < 1e-12);
    }
}
