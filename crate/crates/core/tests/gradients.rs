use epiforge::cleirnet::{loss_weights, BackboneState, CleirConfig, CleirNet, Variant};
use epiforge::nn::gradcheck::gradcheck;
use epiforge::nn::{Mat, Tape};
use epiforge::rng::rng_from_seed;
use epiforge::tdefsi::{sequence_loss, Arm, PhiScale, Sequence, TdefsiConfig, TdefsiNet};
use ndarray::Array2;
use rand::Rng;

/// Moves zero-initialized biases off the activation kinks.
fn jitter_biases(store: &mut epiforge::nn::ParameterStore, seed: u64) {
    let mut rng = rng_from_seed(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.entry(id).name.ends_with("bias") {
            for v in store.value_mut(id).data.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
}

fn tiny_cleir(variant: Variant) -> CleirConfig {
    CleirConfig {
        n_c: 3,
        n_tf: 2,
        n_d: 4,
        n_x: 2,
        n_f: 2,
        variant,
        ..CleirConfig::default()
    }
}

fn cleir_gradcheck(variant: Variant, seed: u64) -> f64 {
    let cfg = tiny_cleir(variant);
    let mut net = CleirNet::new(cfg.clone(), seed).unwrap();
    jitter_biases(&mut net.store, seed);
    let mut rng = rng_from_seed(seed + 100);
    let current: Vec<f64> = (0..3).map(|_| rng.random_range(1.0..20.0)).collect();
    let features = Mat::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let targets = Mat::from_vec(3, 2, (0..6).map(|i| current[i / 2] + rng.random_range(0.0..4.0)).collect()).unwrap();
    let weights = Mat::from_array(&loss_weights(&[500.0, 2000.0, 9000.0], 2));
    let state = BackboneState {
        h0: vec![0.1, -0.2],
        c0: vec![0.3, 0.05],
        h1: vec![-0.1, 0.2],
        c1: vec![0.4, -0.3],
    };
    let report = gradcheck(
        &mut net.store.clone(),
        |store| {
            let mut probe = net.clone();
            probe.store = store.clone();
            let mut tape = Tape::new();
            let out = probe.forward_horizon(&mut tape, &current, 12.0, &state, &features)?;
            let t = tape.constant(targets.clone());
            let w = tape.constant(weights.clone());
            let e = tape.sub(out.predictions, t)?;
            let e2 = tape.mul(e, e)?;
            let we = tape.mul(e2, w)?;
            let s = tape.sum(we);
            let loss = tape.scale(s, 1.0 / 6.0);
            Ok((tape, loss))
        },
        |_| true,
    )
    .unwrap();
    net.store.zero_grads();
    assert_eq!(report.checked, net.store.n_values());
    report.max_rel_err()
}

#[test]
fn cleirnet_variant_ii_gradients_match_finite_differences() {
    for seed in [1, 2, 3] {
        let err = cleir_gradcheck(Variant::II, seed);
        assert!(err < 1e-4, "seed {seed}: worst relative error {err}");
    }
}

#[test]
fn cleirnet_variant_i_gradients_match_finite_differences() {
    let err = cleir_gradcheck(Variant::I, 4);
    assert!(err < 1e-4, "worst relative error {err}");
}

fn tdefsi_sequence(seed: u64) -> Sequence {
    let mut rng = rng_from_seed(seed);
    let raw = Array2::from_shape_fn((3, 7), |_| rng.random_range(0.0..30.0f64).floor());
    Sequence::from_incidence(&raw).unwrap()
}

fn tdefsi_gradcheck(scale: PhiScale, seed: u64) -> f64 {
    let cfg = TdefsiConfig {
        k: 2,
        hidden: 4,
        dense: 6,
        n_counties: 3,
        phi_scale: scale,
        ..TdefsiConfig::default()
    };
    let mut net = TdefsiNet::new(cfg, seed).unwrap();
    jitter_biases(&mut net.store, seed);
    let seq = tdefsi_sequence(seed + 7);
    let report = gradcheck(
        &mut net.store.clone(),
        |store| {
            let mut probe = net.clone();
            probe.store = store.clone();
            let mut tape = Tape::new();
            let (loss, _) = sequence_loss(&probe, &mut tape, &seq, Arm::DropoutNonnegSpatial.flags(), Some(seed))?;
            Ok((tape, loss))
        },
        |_| true,
    )
    .unwrap();
    assert_eq!(report.checked, net.store.n_values());
    report.max_rel_err()
}

#[test]
fn tdefsi_gradients_with_both_penalties_match_finite_differences() {
    for seed in [1, 2, 3] {
        for scale in [PhiScale::Raw, PhiScale::Normalized] {
            let err = tdefsi_gradcheck(scale, seed);
            assert!(err < 1e-4, "seed {seed} {scale:?}: worst relative error {err}");
        }
    }
}

#[test]
fn regularization_gradient_matches_penalty_derivative() {
    let net = CleirNet::new(tiny_cleir(Variant::II), 9).unwrap();
    let mut store = net.store.clone();
    store.zero_grads();
    let (l1, l2) = (0.3, 0.7);
    store.regularization_penalty(l1, l2, epiforge::nn::regularized);
    for e in store.entries() {
        let on = epiforge::nn::regularized(&e.name);
        for (w, g) in e.value.data.iter().zip(&e.grad.data) {
            let expected = if on { l1 * w.signum() + 2.0 * l2 * w } else { 0.0 };
            let expected = if on && *w == 0.0 { 0.0 } else { expected };
            assert!((g - expected).abs() < 1e-12, "{}: {g} vs {expected}", e.name);
        }
    }
}
