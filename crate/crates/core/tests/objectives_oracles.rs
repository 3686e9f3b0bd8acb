use std::collections::BTreeMap;

use lomit::hadain;
use lomit::networks::{Architecture, ModelBundle, ParamGroup};
use lomit::objectives::{self, DirectionTerms, GeneratorTerm, LossWeights};
use lomit::training::{self, gradient_norm};
use lomit::LomitError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Device, Kind, Tensor};

fn t64(data: &[f64], shape: &[i64]) -> Tensor {
    Tensor::from_slice(data).reshape(shape)
}

fn val(t: &Tensor) -> f64 {
    t.to_kind(Kind::Double).double_value(&[])
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Explicit double loop over all pixel pairs.
fn r1_brute_force(m: &[f64], c_hat: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..m.len() {
        for j in 0..m.len() {
            let dot: f64 = c_hat[i].iter().zip(&c_hat[j]).map(|(a, b)| a * b).sum();
            total += (m[i] - m[j]).abs() * dot;
        }
    }
    total
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

fn r1_tensor(m: &[f64], rows: &[Vec<f64>]) -> f64 {
    let n = m.len() as i64;
    let c = rows[0].len() as i64;
    let flat: Vec<f64> = rows.concat();
    let v = objectives::mask_content_consistency_reg(&t64(m, &[1, n]), &t64(&flat, &[1, n, c]), true).unwrap();
    val(&v)
}

#[test]
fn r1_matches_brute_force_on_random_6x6() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for trial in 0..100 {
        let m: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
        let rows = unit_rows(&mut rng, 36, 5);
        let expected = r1_brute_force(&m, &rows);
        let got = r1_tensor(&m, &rows);
        assert!(close(got, expected, 1e-6), "trial {trial}: {got} vs {expected}");
    }
}

#[test]
fn r1_example_table() {
    assert!(close(r1_tensor(&[1.0, 0.0], &[vec![1.0, 0.0], vec![1.0, 0.0]]), 2.0, 1e-12));
    assert!(close(r1_tensor(&[0.9, 0.1], &[vec![1.0, 0.0], vec![0.0, 1.0]]), 0.0, 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = unit_rows(&mut rng, 9, 3);
    assert!(close(r1_tensor(&[0.37; 9], &rows), 0.0, 1e-12));
}

#[test]
fn r1_validates_inputs() {
    let m = t64(&[0.5, 0.5], &[1, 2]);
    let bad_rows = t64(&[2.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
    assert!(matches!(
        objectives::mask_content_consistency_reg(&m, &bad_rows, true),
        Err(LomitError::Domain(_))
    ));
    let three = t64(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[1, 3, 2]);
    assert!(matches!(
        objectives::mask_content_consistency_reg(&m, &three, true),
        Err(LomitError::Dimension(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn r1_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
        let rows = unit_rows(&mut rng, 16, 4);
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pm: Vec<f64> = perm.iter().map(|&i| m[i]).collect();
        let prows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        prop_assert!(close(r1_tensor(&m, &rows), r1_tensor(&pm, &prows), 1e-9));
    }

    #[test]
    fn r1_nonnegative_for_nonnegative_similarity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
        let rows: Vec<Vec<f64>> = unit_rows(&mut rng, 9, 3)
            .into_iter()
            .map(|r| r.into_iter().map(f64::abs).collect())
            .collect();
        prop_assert!(r1_tensor(&m, &rows) >= 0.0);
    }

    #[test]
    fn l1_losses_are_nonnegative_and_symmetric(
        a in prop::collection::vec(-3.0f64..3.0, 12),
        b in prop::collection::vec(-3.0f64..3.0, 12),
    ) {
        let (ta, tb) = (t64(&a, &[1, 3, 2, 2]), t64(&b, &[1, 3, 2, 2]));
        for f in [objectives::cycle_loss, objectives::content_recon_loss] {
            let ab = val(&f(&ta, &tb).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert!(close(ab, val(&f(&tb, &ta).unwrap()), 1e-12));
        }
        let (sa, sb) = (t64(&a, &[2, 6]), t64(&b, &[2, 6]));
        let s = val(&objectives::style_recon_loss(&sa, &sb).unwrap());
        prop_assert!(s >= 0.0);
        prop_assert!(close(s, val(&objectives::style_recon_loss(&sb, &sa).unwrap()), 1e-12));
    }

    #[test]
    fn mask_size_is_nonnegative(m in prop::collection::vec(0.0f64..=1.0, 32)) {
        prop_assert!(val(&objectives::mask_size_reg(&t64(&m, &[2, 1, 4, 4])).unwrap()) >= 0.0);
    }
}

#[test]
fn l1_loss_example_tables() {
    let s = |a: &[f64], b: &[f64]| val(&objectives::style_recon_loss(&t64(a, &[1, 2]), &t64(b, &[1, 2])).unwrap());
    assert_eq!(s(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!(close(s(&[1.0, 2.0], &[2.0, 4.0]), 1.5, 1e-12));
    assert!(matches!(
        objectives::style_recon_loss(&t64(&[1.0, 2.0], &[1, 2]), &t64(&[1.0; 3], &[1, 3])),
        Err(LomitError::Dimension(_))
    ));

    let zeros = Tensor::zeros([1, 4, 3, 3], (Kind::Double, Device::Cpu));
    assert_eq!(val(&objectives::content_recon_loss(&zeros, &zeros).unwrap()), 0.0);
    assert!(close(val(&objectives::content_recon_loss(&zeros, &zeros.ones_like()).unwrap()), 1.0, 1e-12));

    let img = Tensor::zeros([2, 3, 4, 4], (Kind::Double, Device::Cpu));
    assert_eq!(val(&objectives::cycle_loss(&img, &img).unwrap()), 0.0);
    assert!(close(val(&objectives::cycle_loss(&(&img + 0.5), &img).unwrap()), 0.5, 1e-12));
    let narrow = Tensor::zeros([2, 3, 4, 2], (Kind::Double, Device::Cpu));
    assert!(matches!(objectives::cycle_loss(&img, &narrow), Err(LomitError::Dimension(_))));
}

#[test]
fn mask_size_example_table() {
    let ones = Tensor::ones([1, 1, 8, 8], (Kind::Double, Device::Cpu));
    assert_eq!(val(&objectives::mask_size_reg(&ones).unwrap()), 64.0);
    assert_eq!(val(&objectives::mask_size_reg(&ones.zeros_like()).unwrap()), 0.0);
    let m = t64(&[0.5, 0.25, 0.0, 1.0], &[1, 1, 2, 2]);
    assert!(close(val(&objectives::mask_size_reg(&m).unwrap()), 1.75, 1e-12));
}

#[test]
fn adversarial_example_table() {
    let same = t64(&[0.3, -1.2], &[2]);
    let (d, _) = objectives::adversarial_losses(&same, &same).unwrap();
    assert!(close(val(&d), 0.0, 1e-12));
    let (d, g) = objectives::adversarial_losses(&t64(&[3.0], &[1]), &t64(&[1.0], &[1])).unwrap();
    assert!(close(val(&d), -2.0, 1e-12));
    assert!(close(val(&g), -1.0, 1e-12));
    let real = t64(&[0.0], &[1]);
    let mut last = f64::INFINITY;
    for f in [-2.0, -0.5, 0.0, 1.0, 4.0] {
        let (_, g) = objectives::adversarial_losses(&real, &t64(&[f], &[1])).unwrap();
        assert!(val(&g) < last);
        last = val(&g);
    }
    assert!(matches!(
        objectives::adversarial_losses(&real, &t64(&[f64::NAN], &[1])),
        Err(LomitError::Numeric(_))
    ));
}

#[test]
fn classification_example_table() {
    let bce = |logit: f64, label: f64| {
        val(&objectives::classification_loss(&t64(&[logit], &[1, 1]), &t64(&[label], &[1, 1])).unwrap())
    };
    assert!(bce(30.0, 1.0) < 1e-12);
    assert!(close(bce(0.0, 1.0), std::f64::consts::LN_2, 1e-12));
    assert!(close(bce(0.0, 0.0), std::f64::consts::LN_2, 1e-12));
    assert!(close(bce(-2.0, 1.0), (1.0 + 2f64.exp()).ln(), 1e-12));
    assert!(close(bce(-2.0, 1.0), 2.1269, 1e-4));
    assert!(matches!(
        objectives::classification_loss(&t64(&[0.0, 0.0], &[1, 2]), &t64(&[1.0], &[1, 1])),
        Err(LomitError::Dimension(_))
    ));
}

#[test]
fn gradient_penalty_of_linear_critic() {
    let w = t64(&[0.3, -0.4, 1.2, 0.5, 0.1, -0.7, 0.2, 0.9, -0.3, 0.6, 0.0, 0.4], &[1, 3, 2, 2]);
    let norm = w.square().sum(Kind::Double).sqrt().double_value(&[]);
    let real = Tensor::randn([4, 3, 2, 2], (Kind::Double, Device::Cpu));
    let fake = Tensor::randn([4, 3, 2, 2], (Kind::Double, Device::Cpu));
    let alpha = t64(&[0.0, 0.25, 0.6, 1.0], &[4]);
    let linear = |x: &Tensor| -> lomit::Result<Tensor> { Ok((x * &w).sum_dim_intlist(&[1i64, 2, 3][..], false, None)) };
    let gp = objectives::gradient_penalty(linear, &real, &fake, &alpha).unwrap();
    assert!(close(val(&gp), (norm - 1.0).powi(2), 1e-10));

    let unit = &w / norm;
    let unit_critic = |x: &Tensor| -> lomit::Result<Tensor> { Ok((x * &unit).sum_dim_intlist(&[1i64, 2, 3][..], false, None)) };
    let gp = objectives::gradient_penalty(unit_critic, &real, &fake, &alpha).unwrap();
    assert!(val(&gp).abs() < 1e-10);
}

fn terms(values: &[(GeneratorTerm, f64)]) -> DirectionTerms {
    values.iter().map(|(t, v)| (*t, Tensor::from(*v))).collect()
}

fn all_terms(v: f64) -> Vec<(GeneratorTerm, f64)> {
    GeneratorTerm::REQUIRED.iter().map(|t| (*t, v)).collect()
}

#[test]
fn total_generator_loss_examples() {
    let f = terms(&all_terms(1.3));
    let b = terms(&all_terms(0.4));
    assert_eq!(val(&objectives::total_generator_loss(&f, &b, &LossWeights::zero()).unwrap()), 0.0);

    let single = LossWeights {
        lambda_cycle: 2.0,
        ..LossWeights::zero()
    };
    let mut fv = all_terms(0.0);
    let mut bv = all_terms(0.0);
    for v in fv.iter_mut().chain(bv.iter_mut()) {
        if v.0 == GeneratorTerm::Cycle {
            v.1 = 3.0;
        }
    }
    let total = objectives::total_generator_loss(&terms(&fv), &terms(&bv), &single).unwrap();
    assert!(close(val(&total), 6.0, 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fv: Vec<_> = GeneratorTerm::REQUIRED.iter().map(|t| (*t, rng.gen_range(0.0..5.0))).collect();
    let bv: Vec<_> = GeneratorTerm::REQUIRED.iter().map(|t| (*t, rng.gen_range(0.0..5.0))).collect();
    let w = LossWeights::default();
    let by_hand: f64 = fv
        .iter()
        .zip(&bv)
        .map(|((t, a), (_, b))| w.generator_weight(*t) * (a + b) / 2.0)
        .sum();
    let total = objectives::total_generator_loss(&terms(&fv), &terms(&bv), &w).unwrap();
    assert!(close(val(&total), by_hand, 1e-6));
    let fmap: BTreeMap<_, _> = fv.iter().copied().collect();
    let bmap: BTreeMap<_, _> = bv.iter().copied().collect();
    assert!(close(objectives::total_generator_value(&fmap, &bmap, &w).unwrap(), by_hand, 1e-9));

    let mut missing = terms(&all_terms(1.0));
    missing.remove(&GeneratorTerm::MaskSize);
    assert!(matches!(
        objectives::total_generator_loss(&missing, &b, &w),
        Err(LomitError::Contract(_))
    ));
}

fn tiny_model() -> ModelBundle {
    let arch = Architecture {
        resolution: 16,
        base_channels: 4,
        ..Architecture::default()
    };
    ModelBundle::new(arch, 4).unwrap()
}

#[test]
fn r1_gradient_reaches_only_the_attention_network() {
    let model = tiny_model();
    let x = Tensor::rand([2, 3, 16, 16], (Kind::Float, Device::Cpu)) * 2.0 - 1.0;
    let c = model.encode_content(&x).unwrap();
    let r1 = training::mask_consistency_term(&model, &c).unwrap();
    r1.backward();
    let encoder = model.group_variables(ParamGroup::ContentEncoder);
    let attention = model.group_variables(ParamGroup::Attention);
    assert_eq!(gradient_norm(&encoder), 0.0);
    assert!(gradient_norm(&attention) > 0.0);
}

#[test]
fn r1_on_the_content_grid_uses_pooled_masks() {
    let model = tiny_model();
    let x = Tensor::rand([1, 3, 16, 16], (Kind::Float, Device::Cpu)) * 2.0 - 1.0;
    let c = tch::no_grad(|| model.encode_content(&x).unwrap());
    let m = tch::no_grad(|| model.mask_from_content(&c).unwrap());
    let pooled = hadain::downsample_mask(&m, (4, 4)).unwrap();
    let rows = hadain::unit_content_rows(&c).unwrap();
    let expected = objectives::mask_content_consistency_reg(&hadain::flatten_mask(&pooled).unwrap(), &rows, true).unwrap();
    let got = tch::no_grad(|| training::mask_consistency_term(&model, &c).unwrap());
    assert!(close(val(&got), val(&expected), 1e-5));
}
