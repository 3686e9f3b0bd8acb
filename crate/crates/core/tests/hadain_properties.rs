use lomit::hadain::{self, AffineParams, VARIANCE_EPS};
use lomit::LomitError;
use proptest::prelude::*;
use tch::{Kind, Tensor};

fn t64(data: &[f64], shape: &[i64]) -> Tensor {
    Tensor::from_slice(data).reshape(shape)
}

fn values(t: &Tensor) -> Vec<f64> {
    Vec::<f64>::try_from(t.to_kind(Kind::Double).flatten(0, -1)).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).abs().max().double_value(&[])
}

const B: i64 = 2;
const C: i64 = 3;
const S: i64 = 4;

/// A content code, a mask at the same resolution and two affine parameter sets.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-3.0f64..3.0, (B * C * S * S) as usize),
        prop::collection::vec(0.0f64..=1.0, (B * S * S) as usize),
        prop::collection::vec(-2.0f64..2.0, (2 * B * C) as usize),
        prop::collection::vec(-2.0f64..2.0, (2 * B * C) as usize),
    )
}

fn params(v: &[f64]) -> AffineParams {
    let n = (B * C) as usize;
    AffineParams::new(t64(&v[..n], &[B, C]), t64(&v[n..], &[B, C])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hadain_endpoints_and_convexity((c, m, fg, bg) in instance()) {
        let c = t64(&c, &[B, C, S, S]);
        let m = t64(&m, &[B, 1, S, S]);
        let (fg, bg) = (params(&fg), params(&bg));
        let a = hadain::adain(&c, &fg).unwrap();
        let b = hadain::adain(&c, &bg).unwrap();

        let ones = hadain::hadain(&m.ones_like(), &c, &fg, &bg).unwrap();
        prop_assert!(max_abs_diff(&ones, &a) <= 1e-5);
        let zeros = hadain::hadain(&m.zeros_like(), &c, &fg, &bg).unwrap();
        prop_assert!(max_abs_diff(&zeros, &b) <= 1e-5);
        let half = hadain::hadain(&(m.ones_like() * 0.5), &c, &fg, &bg).unwrap();
        prop_assert!(max_abs_diff(&half, &((&a + &b) * 0.5)) <= 1e-5);

        let out = hadain::hadain(&m, &c, &fg, &bg).unwrap();
        let lo = a.minimum(&b) - 1e-5;
        let hi = a.maximum(&b) + 1e-5;
        prop_assert!(out.ge_tensor(&lo).all().int64_value(&[]) == 1);
        prop_assert!(out.le_tensor(&hi).all().int64_value(&[]) == 1);
    }

    #[test]
    fn split_reconstructs_input(
        x in prop::collection::vec(-1.0f64..=1.0, 3 * 16),
        m in prop::collection::vec(0.0f64..=1.0, 16),
    ) {
        let x = t64(&x, &[1, 3, 4, 4]);
        let m = t64(&m, &[1, 1, 4, 4]);
        let (fg, bg) = hadain::split_by_mask(&x, &m).unwrap();
        prop_assert!(max_abs_diff(&(fg + bg), &x) <= 1e-12);
    }

    #[test]
    fn adain_normalizes_to_target_statistics(
        c in prop::collection::vec(-5.0f64..5.0, (C * 8 * 8) as usize),
    ) {
        let c = t64(&c, &[1, C, 8, 8]);
        let (_, sigma) = hadain::channel_stats(&c).unwrap();
        prop_assume!(sigma.min().double_value(&[]) > 0.1);
        let unit = AffineParams::new(Tensor::ones([1, C], (Kind::Double, tch::Device::Cpu)), Tensor::zeros([1, C], (Kind::Double, tch::Device::Cpu))).unwrap();
        let out = hadain::adain(&c, &unit).unwrap();
        let (mu, sd) = hadain::channel_stats(&out).unwrap();
        prop_assert!(mu.abs().max().double_value(&[]) < 1e-4);
        prop_assert!((sd - 1.0).abs().max().double_value(&[]) < 1e-3);
    }

    #[test]
    fn channel_stats_ignore_spatial_order(
        c in prop::collection::vec(-5.0f64..5.0, 2 * 9),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<i64> = (0..9).collect();
        let mut state = seed;
        for i in (1..perm.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let t = t64(&c, &[1, 2, 9]);
        let shuffled = t.index_select(2, &Tensor::from_slice(&perm)).reshape([1, 2, 3, 3]);
        let (mu_a, sd_a) = hadain::channel_stats(&t.reshape([1, 2, 3, 3])).unwrap();
        let (mu_b, sd_b) = hadain::channel_stats(&shuffled).unwrap();
        prop_assert!(max_abs_diff(&mu_a, &mu_b) < 1e-12);
        prop_assert!(max_abs_diff(&sd_a, &sd_b) < 1e-12);
    }

    #[test]
    fn downsampled_masks_stay_in_range(m in prop::collection::vec(0.0f64..=1.0, 64)) {
        let m = t64(&m, &[1, 1, 8, 8]);
        let d = hadain::downsample_mask(&m, (2, 2)).unwrap();
        prop_assert!(d.min().double_value(&[]) >= 0.0);
        prop_assert!(d.max().double_value(&[]) <= 1.0);
        prop_assert!((d.mean(Kind::Double).double_value(&[]) - m.mean(Kind::Double).double_value(&[])).abs() < 1e-12);
    }
}

#[test]
fn split_example_table() {
    let x = t64(&[2.0, 4.0, 6.0, 8.0], &[1, 1, 2, 2]);
    let m = t64(&[1.0, 0.5, 0.0, 1.0], &[1, 1, 2, 2]);
    let (fg, bg) = hadain::split_by_mask(&x, &m).unwrap();
    assert_eq!(values(&fg), vec![2.0, 2.0, 0.0, 8.0]);
    assert_eq!(values(&bg), vec![0.0, 2.0, 6.0, 0.0]);

    let x = t64(&[0.3, -0.7, 0.1, 0.9], &[1, 1, 2, 2]);
    let (fg, bg) = hadain::split_by_mask(&x, &x.ones_like()).unwrap();
    assert_eq!(values(&fg), values(&x));
    assert!(values(&bg).iter().all(|v| *v == 0.0));
    let (fg, bg) = hadain::split_by_mask(&x, &x.zeros_like()).unwrap();
    assert!(values(&fg).iter().all(|v| *v == 0.0));
    assert_eq!(values(&bg), values(&x));
}

#[test]
fn split_rejects_bad_masks() {
    let x = t64(&[0.0; 12], &[1, 3, 2, 2]);
    let wide = t64(&[0.0; 6], &[1, 1, 2, 3]);
    assert!(matches!(hadain::split_by_mask(&x, &wide), Err(LomitError::Dimension(_))));
    let out_of_range = t64(&[0.0, 1.5, 0.0, 0.0], &[1, 1, 2, 2]);
    assert!(matches!(hadain::split_by_mask(&x, &out_of_range), Err(LomitError::Domain(_))));
}

#[test]
fn channel_stats_example_table() {
    let (mu, sd) = hadain::channel_stats(&t64(&[5.0; 4], &[1, 1, 2, 2])).unwrap();
    assert!((mu.double_value(&[0, 0]) - 5.0).abs() < 1e-12);
    assert!((sd.double_value(&[0, 0]) - VARIANCE_EPS.sqrt()).abs() < 1e-12);

    let (mu, sd) = hadain::channel_stats(&t64(&[1.0, 3.0], &[1, 1, 1, 2])).unwrap();
    assert!((mu.double_value(&[0, 0]) - 2.0).abs() < 1e-12);
    assert!((sd.double_value(&[0, 0]) - (1.0 + VARIANCE_EPS).sqrt()).abs() < 1e-12);

    let empty = Tensor::zeros([1, 1, 0, 2], (Kind::Double, tch::Device::Cpu));
    assert!(matches!(hadain::channel_stats(&empty), Err(LomitError::Dimension(_))));
}

#[test]
fn adain_example_table() {
    let c = t64(&[1.0, 3.0], &[1, 1, 1, 2]);
    let p = AffineParams::new(t64(&[2.0], &[1, 1]), t64(&[5.0], &[1, 1])).unwrap();
    let out = values(&hadain::adain(&c, &p).unwrap());
    let s = (1.0 + VARIANCE_EPS).sqrt();
    assert!((out[0] - (5.0 - 2.0 / s)).abs() < 1e-6);
    assert!((out[1] - (5.0 + 2.0 / s)).abs() < 1e-6);
    assert!((out[0] - 3.0).abs() < 1e-4 && (out[1] - 7.0).abs() < 1e-4);

    let c = t64(&[0.5, -1.0, 2.0, 4.0, 1.0, 1.5, -3.0, 0.0], &[1, 2, 2, 2]);
    let (mu, sd) = hadain::channel_stats(&c).unwrap();
    let inverse = AffineParams::new(sd, mu).unwrap();
    assert!(max_abs_diff(&hadain::adain(&c, &inverse).unwrap(), &c) < 1e-6);

    let wrong = AffineParams::new(t64(&[1.0; 3], &[1, 3]), t64(&[0.0; 3], &[1, 3])).unwrap();
    assert!(matches!(hadain::adain(&c, &wrong), Err(LomitError::Dimension(_))));
}

#[test]
fn hadain_rejects_misaligned_mask() {
    let c = t64(&[0.0; 16], &[1, 1, 4, 4]);
    let p = AffineParams::new(t64(&[1.0], &[1, 1]), t64(&[0.0], &[1, 1])).unwrap();
    let m = t64(&[1.0; 4], &[1, 1, 2, 2]);
    assert!(matches!(hadain::hadain(&m, &c, &p, &p), Err(LomitError::Dimension(_))));
}

#[test]
fn downsample_example_table() {
    let ones = Tensor::ones([1, 1, 64, 64], (Kind::Double, tch::Device::Cpu));
    let d = hadain::downsample_mask(&ones, (16, 16)).unwrap();
    assert_eq!(d.size(), [1, 1, 16, 16]);
    assert!(values(&d).iter().all(|v| *v == 1.0));
    let d = hadain::downsample_mask(&ones.zeros_like(), (16, 16)).unwrap();
    assert!(values(&d).iter().all(|v| *v == 0.0));
    let block = t64(&[1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2]);
    assert_eq!(values(&hadain::downsample_mask(&block, (1, 1)).unwrap()), vec![0.5]);
    assert!(matches!(
        hadain::downsample_mask(&ones, (10, 10)),
        Err(LomitError::Dimension(_))
    ));
}
