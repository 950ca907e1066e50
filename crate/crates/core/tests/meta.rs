mod common;

use migs_core::checkpoint::Checkpoint;
use migs_core::meta::{
    baseline_train, finetune, inner_adapt, meta_train, reptile_step, reptile_step_where,
    InnerConfig, OuterConfig, QuadraticLearner, TrainRngs,
};
use migs_core::model::DecoderKind;
use migs_core::optim::OptimizerKind;
use migs_core::state::ModelState;
use migs_core::MigsError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sgd(k: usize, lr: f64) -> InnerConfig {
    InnerConfig {
        k,
        lr,
        optimizer: OptimizerKind::Sgd,
        ..InnerConfig::default()
    }
}

fn theta(state: &ModelState) -> Vec<f64> {
    state.tensor("theta").data().to_vec()
}

#[test]
fn reptile_unit_identities_are_exact() {
    let t = QuadraticLearner::init(&[1.0, 1.0]);
    let a = QuadraticLearner::init(&[3.0, 1.0]);
    let b = QuadraticLearner::init(&[1.0, 3.0]);
    assert_eq!(
        theta(&reptile_step(&t, &[a.clone(), b.clone()], 0.5).unwrap()),
        vec![1.5, 1.5]
    );
    assert_eq!(reptile_step(&t, &[a.clone(), b.clone()], 0.0).unwrap(), t);
    assert_eq!(reptile_step(&t, std::slice::from_ref(&a), 1.0).unwrap(), a);
    assert_eq!(
        reptile_step(&t, &[a.clone(), a.clone(), a.clone()], 1.0).unwrap(),
        a
    );
}

#[test]
fn reptile_is_affine_in_each_adapted_state() {
    let t = QuadraticLearner::init(&[0.5, -1.0]);
    let a = QuadraticLearner::init(&[2.0, 0.25]);
    let b = QuadraticLearner::init(&[-1.0, 4.0]);
    let c = QuadraticLearner::init(&[0.0, 1.0]);
    let lam = 0.25;
    let mix_values: Vec<f64> = theta(&a)
        .iter()
        .zip(theta(&c))
        .map(|(p, q)| lam * p + (1.0 - lam) * q)
        .collect();
    let mix = QuadraticLearner::init(&mix_values);
    let f = |x: &ModelState| theta(&reptile_step(&t, &[x.clone(), b.clone()], 0.5).unwrap());
    let want: Vec<f64> = f(&a)
        .iter()
        .zip(f(&c))
        .map(|(p, q)| lam * p + (1.0 - lam) * q)
        .collect();
    for (g, w) in f(&mix).iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn one_sgd_step_on_scalar_quadratic() {
    let t = QuadraticLearner::init(&[1.0]);
    let a = inner_adapt(
        &QuadraticLearner,
        &t,
        &[3.0][..],
        &sgd(1, 0.1),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!((theta(&a)[0] - 1.2).abs() < 1e-7);
}

#[test]
fn ten_adam_steps_match_reference_loop() {
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
    let inner = InnerConfig {
        k: 10,
        lr,
        optimizer: OptimizerKind::Adam {
            beta1: b1,
            beta2: b2,
            eps,
        },
        ..InnerConfig::default()
    };
    let start = [1.0, -2.0, 0.5];
    let centre = [3.0, 0.0, 0.5];
    let t = QuadraticLearner::init(&start);
    let got = theta(
        &inner_adapt(
            &QuadraticLearner,
            &t,
            &centre[..],
            &inner,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap(),
    );
    let mut x = start.to_vec();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for step in 1..=10 {
        for i in 0..3 {
            let g = x[i] - centre[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(step));
            let vh = v[i] / (1.0 - b2.powi(step));
            x[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    for (g, w) in got.iter().zip(&x) {
        // Parameters are stored at single precision.
        assert!((g - w).abs() < 1e-6, "{g} vs {w}");
    }
    assert_eq!(theta(&t), start.to_vec(), "input state mutated");
}

#[test]
fn quadratic_family_converges_to_mean_centre() {
    let pools: Vec<&[f64]> = vec![&[-1.0, -1.0], &[1.0, 1.0]];
    let inner = sgd(10, 0.01);
    let outer = OuterConfig {
        beta: 1.0,
        iterations: 2000,
        tasks_per_step: 2,
        ..OuterConfig::default()
    };
    let start = [2.0, -3.0];
    let out = meta_train(
        &QuadraticLearner,
        QuadraticLearner::init(&start),
        &pools,
        &inner,
        &outer,
        &mut TrainRngs::new(0),
        0,
        None,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    // Averaging both adapted copies contracts θ by 0.99^10 per outer step.
    let oracle: Vec<f64> = start.iter().map(|s| s * 0.99f64.powi(10 * 2000)).collect();
    for (g, w) in theta(&out).iter().zip(&oracle) {
        assert!(g.abs() < 0.05, "{g}");
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn single_task_meta_step_is_inner_adaptation() {
    let t = QuadraticLearner::init(&[0.0, 4.0]);
    let pools: Vec<&[f64]> = vec![&[1.0, 1.0]];
    let inner = sgd(5, 0.1);
    let outer = OuterConfig {
        iterations: 1,
        ..OuterConfig::default()
    };
    let mut rngs = TrainRngs::new(1);
    let mut batches = rngs.batches.clone();
    let meta = meta_train(
        &QuadraticLearner,
        t.clone(),
        &pools,
        &inner,
        &outer,
        &mut rngs,
        0,
        None,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    let adapted = inner_adapt(&QuadraticLearner, &t, pools[0], &inner, &mut batches).unwrap();
    assert_eq!(meta, adapted);
}

#[test]
fn separate_updates_never_cross_groups() {
    let data = common::tiny_data();
    let p = common::pipeline(common::tiny_model(DecoderKind::Crn), &data, 2);
    let theta = p.init_state(0);
    let other = p.init_state(1);
    for (group, others) in [
        ("gen.", ["dglobal.", "dobj."]),
        ("dglobal.", ["gen.", "dobj."]),
        ("dobj.", ["gen.", "dglobal."]),
    ] {
        let out =
            reptile_step_where(&theta, std::slice::from_ref(&other), 0.5, |n| n.starts_with(group)).unwrap();
        for (name, entry) in theta.iter() {
            let same = out.tensor(name) == &entry.value;
            if others.iter().any(|o| name.starts_with(o)) {
                assert!(same, "{group} update changed {name}");
            } else if name.starts_with(group) && entry.value != *other.tensor(name) {
                assert!(!same, "{name} did not move");
            }
        }
    }
}

#[test]
fn baseline_and_meta_visit_the_same_states() {
    let data = common::tiny_data();
    let p = common::pipeline(common::tiny_model(DecoderKind::Spade), &data, 2);
    let pool = common::pool(&data.tasks[0]);
    let inner = sgd(3, 0.01);
    let outer = OuterConfig {
        iterations: 4,
        ..OuterConfig::default()
    };
    let mut meta_trace = Vec::new();
    meta_train(
        &p,
        p.init_state(5),
        &[&pool],
        &inner,
        &outer,
        &mut TrainRngs::new(9),
        0,
        None,
        |pr, s, _, _| {
            meta_trace.push((pr.iteration, s.clone()));
            Ok(())
        },
    )
    .unwrap();
    let mut base_trace = Vec::new();
    baseline_train(
        &p,
        p.init_state(5),
        &pool,
        &inner,
        12,
        3,
        1e6,
        &mut TrainRngs::new(9),
        0,
        None,
        |pr, s, _, _| {
            base_trace.push((pr.iteration, s.clone()));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(meta_trace.len(), 4);
    for ((mi, ms), (bi, bs)) in meta_trace.iter().zip(&base_trace) {
        assert_eq!(mi * 3, *bi);
        assert_eq!(ms, bs, "states differ after outer iteration {mi}");
    }
}

#[test]
fn finetune_reads_exactly_the_sampled_shots() {
    let data = common::tiny_data();
    let p = common::pipeline(common::tiny_model(DecoderKind::Spade), &data, 2);
    let t = p.init_state(2);
    let inner = InnerConfig {
        lr: 1e-3,
        batch_size: 2,
        ..InnerConfig::default()
    };
    for seed in 0..3 {
        let pool = common::pool(&data.tasks[1]);
        let before = t.clone();
        let out = finetune(
            &p,
            &t,
            &pool,
            5,
            6,
            &inner,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        assert_eq!(t, before, "theta mutated");
        let ids: std::collections::BTreeSet<usize> = out.shot_ids.iter().copied().collect();
        assert_eq!(ids.len(), 5);
        assert!(pool.accessed().is_subset(&ids), "read outside the shots");
        // A batch as large as the shot set reads every shot.
        let full = common::pool(&data.tasks[1]);
        let wide = common::pipeline(common::tiny_model(DecoderKind::Spade), &data, 5);
        let out_full = finetune(
            &wide,
            &t,
            &full,
            5,
            2,
            &inner,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        assert_eq!(full.accessed(), out_full.shot_ids.iter().copied().collect());
        let again = finetune(
            &p,
            &t,
            &common::pool(&data.tasks[1]),
            5,
            6,
            &inner,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        assert_eq!(again.shot_ids, out.shot_ids);
        assert_eq!(again.state, out.state);
    }
}

#[test]
fn finetune_edge_cases() {
    let data = common::tiny_data();
    let p = common::pipeline(common::tiny_model(DecoderKind::Crn), &data, 2);
    let t = p.init_state(2);
    let pool = common::pool(&data.tasks[0]);
    let inner = InnerConfig::default();
    let zero = finetune(
        &p,
        &t,
        &pool,
        3,
        0,
        &inner,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(zero.state, t);
    assert!(pool.accessed().is_empty());
    let err = finetune(
        &p,
        &t,
        &pool,
        pool.len() + 1,
        1,
        &inner,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap_err();
    assert!(matches!(err, MigsError::Contract(_)));
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let data = common::tiny_data();
    let p = common::pipeline(common::tiny_model(DecoderKind::Spade), &data, 2);
    let pools: Vec<_> = data.train_tasks().into_iter().map(common::pool).collect();
    let refs: Vec<_> = pools.iter().collect();
    let inner = InnerConfig {
        k: 2,
        lr: 1e-3,
        batch_size: 2,
        ..InnerConfig::default()
    };
    let outer = OuterConfig {
        iterations: 3,
        ..OuterConfig::default()
    };
    let run = || {
        let mut rngs = TrainRngs::new(4);
        let state = meta_train(
            &p,
            p.init_state(4),
            &refs,
            &inner,
            &outer,
            &mut rngs,
            0,
            None,
            |_, _, _, _| Ok(()),
        )
        .unwrap();
        Checkpoint {
            config_hash: [7; 32],
            outer_iteration: 3,
            rngs,
            state,
        }
        .to_bytes()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let back = Checkpoint::from_bytes(&a, std::path::Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes(), a);
}
