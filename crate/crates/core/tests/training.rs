mod common;

use common::{perturbed_adapter, small_config, small_field};
use rats_core::objective::reward_gate;
use rats_core::train::{read_metrics, write_metrics, Ablation, Phase, TrainConfig, TrainState, Trainer};

fn closed_form_gate(r_t: f64, r_s: f64, tau: f64) -> f64 {
    1.0 / (1.0 + (-(r_t - r_s) / tau).exp())
}

#[test]
fn iteration_trace_follows_the_algorithm() {
    let cfg = small_config();
    let field = small_field(&cfg);
    let scorer = cfg.scorer().unwrap();
    let train = cfg.train_config();
    let trainer = Trainer::new(&train, &field, &cfg.task, &scorer).unwrap();
    let state = TrainState::new(perturbed_adapter(&field, 1, 0.1));
    let (detail, _) = trainer.compute(&state).unwrap();

    let mut expected = vec![
        Phase::SampleInputs,
        Phase::StudentRollout,
        Phase::TeacherRollout,
        Phase::StudentReward,
        Phase::HorizonLoop,
    ];
    for _ in 0..3 {
        expected.extend([Phase::MatchHorizon, Phase::HorizonDivergence]);
    }
    expected.extend([
        Phase::HorizonLoopEnd,
        Phase::ShapingAggregate,
        Phase::TeacherReward,
        Phase::Gate,
        Phase::TotalLoss,
        Phase::BackwardUpdate,
        Phase::EmaUpdate,
    ]);
    assert_eq!(detail.trace, expected);

    for id in &detail.gradient_leaves {
        assert!(!detail.teacher_leaves.contains(id), "teacher leaf received a gradient");
        assert!(detail.student_leaves.contains(id));
    }
    assert!(!detail.gradient_leaves.is_empty());
}

#[test]
fn failed_iteration_rolls_back_bitwise() {
    let cfg = small_config();
    let field = small_field(&cfg);
    let scorer = cfg.scorer().unwrap();
    let train = cfg.train_config();
    let trainer = Trainer::new(&train, &field, &cfg.task, &scorer).unwrap();
    let mut state = TrainState::new(perturbed_adapter(&field, 2, 0.1));
    trainer.train_iteration(&mut state).unwrap();

    let mut poisoned = state.clone();
    poisoned.student.values_mut()[0] = f64::NAN;
    let snapshot = poisoned.clone();
    let err = trainer.train_iteration(&mut poisoned).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    let bits = |s: &TrainState| -> Vec<u64> {
        s.student
            .values()
            .iter()
            .chain(s.teacher.values())
            .chain(&s.adam.m)
            .chain(&s.adam.v)
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(bits(&poisoned), bits(&snapshot));
    assert_eq!(poisoned.adam.t, snapshot.adam.t);
    assert_eq!(poisoned.iteration, snapshot.iteration);
}

#[test]
fn logged_gate_matches_recomputation() {
    let cfg = small_config();
    let field = small_field(&cfg);
    let scorer = cfg.scorer().unwrap();
    let train = cfg.train_config();
    let trainer = Trainer::new(&train, &field, &cfg.task, &scorer).unwrap();
    let mut state = TrainState::new(perturbed_adapter(&field, 3, 0.1));
    let mut log = Vec::new();
    trainer.run(&mut state, &mut log, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics(&path, &log, "h", train.seed).unwrap();
    let (_, rows) = read_metrics(&path).unwrap();
    assert_eq!(rows.len(), train.iterations);
    for row in rows {
        let (gate, r_s, r_t) = (row[3], row[5], row[6]);
        assert!((gate - closed_form_gate(r_t, r_s, train.temperature)).abs() <= 1e-12);
        assert_eq!(gate, reward_gate(r_t, r_s, &train.gate()));
        let total = row[1] + train.alpha * gate * row[2];
        assert!((total - row[4]).abs() <= 1e-12 * total.abs().max(1.0));
    }
}

#[test]
fn reward_only_equals_full_with_zero_alpha() {
    let cfg = small_config();
    let field = small_field(&cfg);
    let scorer = cfg.scorer().unwrap();
    let reward_only = TrainConfig {
        ablation: Ablation::RewardOnly,
        ..cfg.train_config()
    };
    let zero_alpha = TrainConfig {
        alpha: 0.0,
        ..cfg.train_config()
    };
    let adapter = perturbed_adapter(&field, 4, 0.1);
    let run = |train: &TrainConfig| {
        let trainer = Trainer::new(train, &field, &cfg.task, &scorer).unwrap();
        let mut state = TrainState::new(adapter.clone());
        let mut log = Vec::new();
        trainer.run(&mut state, &mut log, |_| {}).unwrap();
        for r in &log {
            assert_eq!(r.breakdown.alpha * r.breakdown.gate * r.breakdown.shape_loss, 0.0);
        }
        (trainer.window_start(), state)
    };
    let (wa, a) = run(&reward_only);
    let (wb, b) = run(&zero_alpha);
    assert_eq!(wa, 3);
    assert_eq!(wa, wb);
    assert_eq!(a, b);
}

#[test]
fn first_iteration_with_shared_noise_opens_the_gate_halfway() {
    let cfg = small_config();
    let field = small_field(&cfg);
    let scorer = cfg.scorer().unwrap();
    let train = TrainConfig {
        teacher_steps: 3,
        shared_noise: true,
        ..cfg.train_config()
    };
    let trainer = Trainer::new(&train, &field, &cfg.task, &scorer).unwrap();
    let state = TrainState::new(field.init_adapter(&mut rats_core::rng::RngStream::new(1, "a")));
    let (detail, _) = trainer.compute(&state).unwrap();
    let b = &detail.record.breakdown;
    assert_eq!(b.student_reward, b.teacher_reward);
    assert_eq!(b.gate, 0.5);
    for i in 1..=3 {
        assert_eq!(detail.student.prediction(i).data(), detail.teacher.prediction(i).data());
    }
}

#[test]
fn teacher_follows_ema_of_the_updated_student() {
    let cfg = small_config();
    let field = small_field(&cfg);
    let scorer = cfg.scorer().unwrap();
    let train = cfg.train_config();
    let trainer = Trainer::new(&train, &field, &cfg.task, &scorer).unwrap();
    let mut state = TrainState::new(perturbed_adapter(&field, 5, 0.1));
    trainer.train_iteration(&mut state).unwrap();
    let before = state.clone();
    trainer.train_iteration(&mut state).unwrap();
    for ((t1, t0), s1) in state
        .teacher
        .values()
        .iter()
        .zip(before.teacher.values())
        .zip(state.student.values())
    {
        let expect = train.gamma * t0 + (1.0 - train.gamma) * s1;
        assert!((t1 - expect).abs() <= 1e-15 * expect.abs().max(1.0));
    }
}

#[test]
fn same_seed_same_metrics_bytes() {
    let cfg = small_config();
    let field = small_field(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        rats_core::experiment::train_to_dir(&cfg, &cfg.train_config(), &field, &out).unwrap();
        files.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let text = String::from_utf8(files[0].clone()).unwrap();
    assert!(text.starts_with(&format!("# config_hash={} seed=3\n", cfg.hash())));
    assert!(text.lines().nth(1).unwrap().starts_with("iteration,reward_loss,shape_loss,gate,total,R_S,R_T,grad_norm,wall_ms"));
}

#[test]
fn zero_iterations_emit_initial_checkpoint() {
    let mut cfg = small_config();
    cfg.rats.iterations = 0;
    let field = small_field(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let run = rats_core::experiment::train_to_dir(&cfg, &cfg.train_config(), &field, dir.path()).unwrap();
    assert!(run.records.is_empty());
    let (header, adapter) = rats_core::model::load_checkpoint(&dir.path().join("adapter.ckpt")).unwrap();
    assert_eq!(header.config_hash, cfg.hash());
    assert_eq!(adapter, field.init_adapter(&mut rats_core::rng::RngStream::new(cfg.seed, "init/adapter")));
    let (_, rows) = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert!(rows.is_empty());
}

#[test]
fn distill_only_and_no_gate_pin_the_gate() {
    let cfg = small_config();
    let field = small_field(&cfg);
    let scorer = cfg.scorer().unwrap();
    for ablation in [Ablation::DistillOnly, Ablation::NoGate] {
        let train = TrainConfig {
            ablation,
            ..cfg.train_config()
        };
        let trainer = Trainer::new(&train, &field, &cfg.task, &scorer).unwrap();
        let mut state = TrainState::new(perturbed_adapter(&field, 6, 0.1));
        let rec = trainer.train_iteration(&mut state).unwrap();
        assert_eq!(rec.breakdown.gate, 1.0);
        let expect_weight = if ablation == Ablation::DistillOnly { 0.0 } else { 1.0 };
        assert_eq!(rec.breakdown.reward_weight, expect_weight);
        assert_eq!(rec.breakdown.recompute_total(), rec.breakdown.total);
    }
}
