use hep_core::audit::{self, finite_difference};
use hep_core::config::RunConfig;
use hep_core::equinet::Tape;
use hep_core::group::GroupElement;
use hep_core::low_level::{
    decode_chunk, encode_chunk, pi_low, sample_trajectory, DeltaOracle, Denoiser, DiffusionSchedule, LowBatch,
    PositionSensitiveStub, RngNoise,
};
use hep_core::math::IDENTITY3;
use hep_core::model::Model;
use hep_core::scene::{ActionChunk, GripperState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn chunk(m: usize) -> ActionChunk {
    let steps = (0..m)
        .map(|i| GripperState { position: [0.0625 * i as f64, -0.125, 0.25], q: IDENTITY3, c: (i % 2) as f64 })
        .collect();
    ActionChunk::new(steps).unwrap()
}

#[test]
fn alpha_bar_matches_log_space_product() {
    let s = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
    assert_eq!(s.beta[0], 1e-3);
    assert!((s.beta[99] - 0.2).abs() < 1e-15);
    let mut log_sum = 0.0;
    for k in 0..100 {
        log_sum += (1.0 - s.beta[k]).ln();
        assert!((s.alpha_bar[k] - log_sum.exp()).abs() < 1e-12 * s.alpha_bar[k].max(1e-300) + 1e-15);
    }
    assert!(s.alpha_bar[99] < 0.05);
}

#[test]
fn reverse_step_with_true_noise_recovers_the_mean() {
    // With the exact noise, the posterior mean at k = 1 is a0 itself.
    let s = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
    let a0 = [0.3, -0.7, 1.1];
    let e = [0.5, 0.25, -1.0];
    let a1 = s.forward(&a0, 1, &e).unwrap();
    let back = s.reverse_mean(&a1, &e, 1);
    for (a, b) in a0.iter().zip(&back) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(s.reverse_std(1), 0.0);
}

#[test]
fn exact_noise_oracle_samples_the_single_target() {
    let target = encode_chunk(&chunk(4), 0.25);
    let sched = DiffusionSchedule::linear(100, 1e-3, 0.2).unwrap();
    let oracle = DeltaOracle { target: target.clone(), sched: sched.clone(), pos_scale: 0.25 };
    for seed in 0..5 {
        let out = sample_trajectory(&oracle, &sched, &[], &mut RngNoise::seeded(seed)).unwrap();
        assert_eq!(out.steps.iter().map(|s| s.position).collect::<Vec<_>>(), chunk(4).steps.iter().map(|s| s.position).collect::<Vec<_>>());
        // Positions snap to the lattice; orientations only match to rounding.
        assert!(decode_chunk(&target, 0.25).unwrap().max_abs_diff(&out) < 1e-12);
    }
}

#[test]
fn low_loss_equals_noise_mse() {
    let cfg = RunConfig::default();
    let model = Model::build(&cfg).unwrap();
    let net = &model.low;
    let scenes = audit::audit_scenes(&cfg, 1, 0).unwrap();
    let cond = net.condition(&scenes[0], [0.0; 3]).unwrap();
    let frozen = net.freeze(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut batch = LowBatch::default();
    let mut oracle = 0.0;
    let rows = 5;
    for _ in 0..rows {
        let a0: Vec<f64> = (0..net.action_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let e: Vec<f64> = (0..net.action_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let k = rng.gen_range(1..=100);
        let ak = net.sched.forward(&a0, k, &e).unwrap();
        let start = batch.rows.len();
        net.input_row(&ak, &cond, k, &mut batch.rows);
        let pred = net.predict_noise(&frozen, &batch.rows[start..], &ak, k);
        oracle += pred.iter().zip(&e).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / rows as f64;
        batch.a0.extend(a0);
        batch.noise.extend(e);
        batch.ks.push(k);
    }
    let mut tape = Tape::<f64>::new();
    let l = net.loss(&mut tape, &model.store, &batch).unwrap();
    let got = tape.value(l)[0];
    assert!((got - oracle).abs() <= 1e-9 * oracle, "{got} vs {oracle}");
}

#[test]
fn weighted_row_error_gradient() {
    let target = vec![0.5, -1.0, 0.25, 2.0, 0.0, 1.5];
    let w = [0.3, 4.0];
    let (a, n) = finite_difference::<f64>(
        |t, x| t.weighted_row_sq_err(x, target.clone(), &w),
        &[0.1, 0.2, -0.3, 1.0, 0.7, -0.4],
        &[2, 3],
        1e-6,
    )
    .unwrap();
    for (a, n) in a.iter().zip(&n) {
        assert!((a - n).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {n}");
    }
}

#[test]
fn stub_is_not_translation_equivariant_on_its_own() {
    let stub = PositionSensitiveStub { m: 2, pos_scale: 0.25 };
    let a = [0.1; 20];
    let p = stub.predict(&[0.0, 0.0, 0.1], &a, 5).unwrap();
    let q = stub.predict(&[0.0625, 0.0, 0.1], &a, 5).unwrap();
    assert!(p.iter().zip(&q).any(|(x, y)| (x - y).abs() > 1e-3));
}

#[test]
fn translation_chain_is_exact_even_with_the_stub() {
    let cfg = RunConfig::default();
    let model = Model::build(&cfg).unwrap();
    let scenes = audit::audit_scenes(&cfg, 8, 3).unwrap();
    let stub = PositionSensitiveStub { m: cfg.m, pos_scale: 0.25 };
    let c = audit::translation_chain("stub", &model, &stub, &scenes, 0).unwrap();
    assert_eq!(c.max_residual, 0.0, "{c:?}");
    let eps = model.bind();
    let c = audit::translation_chain("eps", &model, &eps, &scenes, 0).unwrap();
    assert_eq!(c.max_residual, 0.0, "{c:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pi_low_rotates_with_matched_noise(seed in 0u64..1000, m in 1u32..4) {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let model = Model::build(&cfg).unwrap();
        let scenes = audit::audit_scenes(&cfg, 1, seed).unwrap();
        let eps = model.bind();
        let t = [0.0625, 0.125, 0.15625];
        let g = GroupElement::rotation(m, 4).unwrap();
        let base = pi_low(&eps, &model.sched, &scenes[0], t, &mut RngNoise::seeded(seed)).unwrap();
        let mut noise = hep_core::low_level::TransformedNoise {
            inner: RngNoise::seeded(seed),
            rep: hep_core::low_level::action_rep(cfg.m, 4).unwrap(),
            m,
        };
        let go = g.act_observation(&scenes[0]).unwrap();
        let moved = pi_low(&eps, &model.sched, &go, g.act_position(t), &mut noise).unwrap();
        prop_assert!(moved.max_abs_diff(&g.act_chunk(&base).unwrap()) <= 1e-4);
    }
}
