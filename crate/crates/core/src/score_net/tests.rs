use super::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;

fn tiny_config(d: usize, classes: Option<usize>) -> ScoreNetConfig {
    ScoreNetConfig {
        input_dim: d,
        hidden_dim: 8,
        num_blocks: 2,
        time_embed_dim: 6,
        class_embed_dim: 4,
        num_classes: classes,
    }
}

/// Initialized model with every parameter (including the head) randomized.
fn random_model(cfg: ScoreNetConfig, seed: u64, scale: f64) -> ScoreModel {
    let mut model = ScoreModel::init(cfg, SdeSpec::subvp(), seed).unwrap();
    let mut rng = crate::seed::rng(seed ^ 0xABCD);
    let params: Vec<f64> = (0..model.param_count())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    model.set_params(params).unwrap();
    model
}

/// Second, independent implementation of the documented frequency generator.
fn reference_frequencies(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    let mut out = Vec::new();
    let mut i = 0u64;
    while out.len() < n {
        let a = mix(seed.wrapping_add(i.wrapping_mul(0x9E3779B97F4A7C15)));
        let b = mix(seed.wrapping_add((i + 1).wrapping_mul(0x9E3779B97F4A7C15)));
        i += 2;
        let u1 = ((a >> 11) as f64 + 1.0) / 9007199254740992.0;
        let u2 = ((b >> 11) as f64 + 1.0) / 9007199254740992.0;
        let r = (-2.0 * u1.ln()).sqrt();
        out.push(scale * r * (2.0 * std::f64::consts::PI * u2).cos());
        out.push(scale * r * (2.0 * std::f64::consts::PI * u2).sin());
    }
    out.truncate(n);
    out
}

#[test]
fn fourier_at_zero() {
    assert_eq!(
        fourier_embed(0.0, 4, 3.0, 99).unwrap(),
        vec![0.0, 0.0, 1.0, 1.0]
    );
}

#[test]
fn fourier_shape_and_odd_dim() {
    assert_eq!(fourier_embed(0.3, 10, 1.0, 1).unwrap().len(), 10);
    assert!(matches!(
        fourier_embed(0.3, 5, 1.0, 1),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn fourier_matches_independent_generator() {
    let got = fourier_embed(0.5, 8, 2.0, 7).unwrap();
    let freqs = reference_frequencies(7, 4, 2.0);
    let two_pi = 2.0 * std::f64::consts::PI;
    for k in 0..4 {
        assert_eq!(got[k], (two_pi * freqs[k] * 0.5).sin());
        assert_eq!(got[4 + k], (two_pi * freqs[k] * 0.5).cos());
    }
}

#[test]
fn zero_params_give_zero_score() {
    let mut model = ScoreModel::init(tiny_config(3, None), SdeSpec::vp(), 1).unwrap();
    model.set_params(vec![0.0; model.param_count()]).unwrap();
    let s = model
        .forward(array![1.0, -2.0, 0.5].view(), 0.4, None)
        .unwrap();
    assert_eq!(s, array![0.0, 0.0, 0.0]);
}

#[test]
fn init_is_reproducible_and_zero_headed() {
    let cfg = tiny_config(3, None);
    let a = ScoreModel::init(cfg.clone(), SdeSpec::subvp(), 1).unwrap();
    let b = ScoreModel::init(cfg.clone(), SdeSpec::subvp(), 1).unwrap();
    let c = ScoreModel::init(cfg, SdeSpec::subvp(), 2).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    for (z, t) in [
        (array![0.1, 5.0, -3.0], 1e-5),
        (array![100.0, 0.0, 1.0], 0.9),
    ] {
        let s = a.forward(z.view(), t, None).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn param_count_matches_layout() {
    let cfg = tiny_config(3, Some(4));
    let (d, h, t, c, nb) = (3, 8, 6, 4, 2);
    let expected = h * d + h + nb * (2 * h * h + 2 * h + h * t) + d * h + d + nb * h * c;
    assert_eq!(cfg.param_count(), expected);
    let model = ScoreModel::init(cfg, SdeSpec::vp(), 0).unwrap();
    assert_eq!(model.param_count(), expected);
    assert_eq!(model.class_param_range().len(), nb * h * c);
}

#[test]
fn forward_is_deterministic() {
    let model = random_model(tiny_config(3, Some(2)), 3, 0.4);
    let z = array![0.2, -0.7, 1.1];
    let a = model.forward(z.view(), 0.3, Some(1)).unwrap();
    let b = model.forward(z.view(), 0.3, Some(1)).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn batch_forward_matches_single_samples() {
    let model = random_model(tiny_config(3, Some(3)), 4, 0.4);
    let z = array![[0.2, -0.7, 1.1], [3.0, 0.0, -1.0], [0.0, 0.1, 0.2]];
    let t = [0.3, 0.01, 1.0];
    let classes = [0, 2, 1];
    let batch = model.forward_batch(z.view(), &t, Some(&classes)).unwrap();
    let rows = model.forward_rows(z.view(), &t, Some(&classes)).unwrap();
    for (a, b) in batch.iter().zip(rows.iter()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn input_validation() {
    let model = random_model(tiny_config(3, Some(2)), 4, 0.4);
    assert!(matches!(
        model.forward(array![1.0, 2.0].view(), 0.5, Some(0)),
        Err(Error::DimensionMismatch {
            expected: 3,
            got: 2
        })
    ));
    assert!(model
        .forward(array![1.0, 2.0, 3.0].view(), 0.5, Some(2))
        .is_err());
    assert!(model
        .forward(array![1.0, 2.0, 3.0].view(), 0.5, None)
        .is_err());
    assert!(model
        .forward(array![1.0, 2.0, 3.0].view(), 0.0, Some(0))
        .is_err());
    let mut bad = model.params().to_vec();
    bad[0] = f64::NAN;
    assert!(matches!(
        ScoreModel::from_parts(model.config().clone(), *model.sde(), 4, bad),
        Err(Error::NonFinite(_))
    ));
}

fn quadratic_loss(target: &Array2<f64>) -> impl Fn(&Array2<f64>) -> (f64, Array2<f64>) + '_ {
    move |s: &Array2<f64>| {
        let diff = s - target;
        let n = s.nrows() as f64;
        ((&diff * &diff).sum() / n, diff * (2.0 / n))
    }
}

fn check_gradient(model: &ScoreModel, classes: Option<&[usize]>) {
    let z = array![[0.3, -0.5, 0.8], [-1.2, 0.4, 0.1], [0.05, 0.9, -0.6]];
    let t = [0.35, 0.6, 0.9];
    let target = array![[0.1, 0.2, -0.3], [0.0, -1.0, 0.5], [0.7, 0.0, 0.2]];
    let loss = quadratic_loss(&target);
    let (_, grad) = model.backward(z.view(), &t, classes, &loss).unwrap();
    assert_eq!(grad.len(), model.param_count());

    let step = 1e-4;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.param_count() {
        let base = model.params()[i];
        probe.params_mut()[i] = base + step;
        let up = loss(&probe.forward_batch(z.view(), &t, classes).unwrap()).0;
        probe.params_mut()[i] = base - step;
        let down = loss(&probe.forward_batch(z.view(), &t, classes).unwrap()).0;
        probe.params_mut()[i] = base;
        let numeric = (up - down) / (2.0 * step);
        let err = (grad[i] - numeric).abs();
        let rel = err / grad[i].abs().max(numeric.abs()).max(1e-12);
        if err > 1e-9 {
            worst = worst.max(rel);
            assert!(
                rel <= 1e-4,
                "param {i}: analytic {} numeric {numeric}",
                grad[i]
            );
        }
    }
    assert!(worst <= 1e-4);
}

#[test]
fn gradient_matches_finite_differences_unconditional() {
    check_gradient(&random_model(tiny_config(3, None), 11, 0.5), None);
}

#[test]
fn gradient_matches_finite_differences_conditional() {
    check_gradient(
        &random_model(tiny_config(3, Some(3)), 12, 0.5),
        Some(&[2, 0, 1]),
    );
}

#[test]
fn constant_loss_has_zero_gradient() {
    let model = random_model(tiny_config(3, None), 13, 0.5);
    let z = array![[0.3, -0.5, 0.8]];
    let (loss, grad) = model
        .backward(z.view(), &[0.5], None, |s| {
            (4.2, Array2::zeros(s.raw_dim()))
        })
        .unwrap();
    assert_eq!(loss, 4.2);
    assert!(grad.iter().all(|g| *g == 0.0));
}

#[test]
fn non_finite_loss_is_rejected() {
    let model = random_model(tiny_config(3, None), 13, 0.5);
    let z = array![[0.3, -0.5, 0.8], [0.1, 0.1, 0.1]];
    let err = model
        .backward(z.view(), &[0.5, 0.5], None, |s| {
            let mut g = Array2::zeros(s.raw_dim());
            g[[1, 0]] = f64::NAN;
            (f64::NAN, g)
        })
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { batch_index: 1 }));
    assert!(model
        .backward(Array2::zeros((0, 3)).view(), &[], None, |s| (
            0.0,
            s.clone()
        ))
        .is_err());
}

#[test]
fn jvp_matches_directional_finite_difference() {
    let model = random_model(tiny_config(3, Some(2)), 21, 0.5);
    let z = [0.4, -0.3, 0.9];
    let tangents = [1.0, -1.0, 1.0, 0.3, 0.5, -0.2];
    let (s, jvp) = model.score_jvp(&z, 0.45, Some(1), &tangents).unwrap();
    assert_eq!(s, model.score(&z, 0.45, Some(1)).unwrap());
    let eps = 1e-6;
    for k in 0..2 {
        let v = &tangents[3 * k..3 * k + 3];
        let up: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + eps * b).collect();
        let dn: Vec<f64> = z.iter().zip(v).map(|(a, b)| a - eps * b).collect();
        let su = model.score(&up, 0.45, Some(1)).unwrap();
        let sd = model.score(&dn, 0.45, Some(1)).unwrap();
        for i in 0..3 {
            let fd = (su[i] - sd[i]) / (2.0 * eps);
            assert!((fd - jvp[3 * k + i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn class_pathway_is_isolated() {
    let cond_cfg = tiny_config(3, Some(1));
    let uncond_cfg = tiny_config(3, None);
    let mut cond = ScoreModel::init(cond_cfg, SdeSpec::vp(), 8).unwrap();
    let uncond = ScoreModel::init(uncond_cfg, SdeSpec::vp(), 8).unwrap();
    let shared = cond.class_param_range().start;
    assert_eq!(&cond.params()[..shared], uncond.params());

    let mut rng = crate::seed::rng(77);
    let mut p = cond.params().to_vec();
    let mut q = uncond.params().to_vec();
    for i in 0..shared {
        let v: f64 = rng.sample(StandardNormal);
        p[i] = 0.5 * v;
        q[i] = 0.5 * v;
    }
    for v in &mut p[shared..] {
        *v = 0.0;
    }
    cond.set_params(p).unwrap();
    let mut uncond = uncond;
    uncond.set_params(q).unwrap();
    let z = [0.4, -0.3, 0.9];
    let a = cond.score(&z, 0.2, Some(0)).unwrap();
    let b = uncond.score(&z, 0.2, None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_stays_finite_on_bounded_inputs(
        seed in 0u64..1000,
        z in proptest::collection::vec(-577.0f64..577.0, 3),
        log_t in (1e-5f64).ln()..0.0,
    ) {
        let model = random_model(tiny_config(3, None), seed, 0.3);
        let s = model.score(&z, log_t.exp(), None).unwrap();
        prop_assert!(s.iter().all(|v| v.is_finite()));
    }
}
