use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgddpg_core::agent::Transition;
use sgddpg_core::env::{Environment, Pendulum, PendulumParams, PendulumState, SwingUpController};
use sgddpg_core::harness::trajectory::{
    load_init_trajectory, read_trajectory, rollout, split_init_data, write_trajectory, InitData,
};
use sgddpg_core::harness::{evaluate, metrics_csv, RecordKind, Trainer};
use sgddpg_core::harness::{GpMode, TrainConfig};

fn quick_config(seed: u64, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        total_steps: steps,
        eval_interval: 200,
        eval_episodes: 1,
        actor_updates_per_episode: 10,
        gp_fit_steps: 2,
        ..TrainConfig::default()
    };
    cfg.nets.actor_hidden = vec![16];
    cfg.nets.critic_hidden = vec![16];
    cfg.agent.batch_size = 16;
    cfg
}

fn scripted(steps: usize, seed: u64) -> Vec<Transition> {
    let mut env = Pendulum::default();
    let ctrl = SwingUpController::default();
    let params = env.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(
        &mut env,
        steps,
        |s: &[f64], _r: &mut dyn RngCore| Ok(vec![ctrl.action(PendulumState::from_slice(s)?, &params)]),
        &mut rng,
    )
    .unwrap()
}

fn demo_init(steps: usize) -> InitData {
    split_init_data(scripted(steps, 3), 5.0)
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let run = || {
        let mut t = Trainer::new(quick_config(5, 600), Pendulum::default(), Some(demo_init(200))).unwrap();
        t.run().unwrap();
        metrics_csv(t.records())
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.lines().count() > 3);
}

#[test]
fn fixed_mode_keeps_gp_bit_identical() {
    let mut cfg = quick_config(6, 800);
    cfg.gp_mode = GpMode::Fixed;
    let mut t = Trainer::new(cfg, Pendulum::default(), Some(demo_init(200))).unwrap();
    let gp0 = t.gp().clone();
    let hp0 = t.hyperparams().clone();
    let beta0 = t.beta_value();
    assert!(!gp0.is_empty());
    while !t.is_finished() {
        t.run_episode().unwrap();
        assert_eq!(t.gp(), &gp0);
        assert_eq!(t.hyperparams(), &hp0);
        assert_eq!(t.beta_value(), beta0);
    }
    assert!(t.audit_log().is_empty());
}

#[test]
fn every_stored_measurement_passes_filters() {
    let cfg = quick_config(7, 1000);
    let sigma = cfg.sigma;
    let init = demo_init(200);
    let mut t = Trainer::new(cfg, Pendulum::default(), Some(init.clone())).unwrap();
    t.run().unwrap();
    for e in t.audit_log() {
        assert!(e.passes_filters(sigma), "{e:?}");
        assert!(e.y.abs() > sigma);
    }
    // the GP holds only initial pairs and audited measurements
    for (z, y) in t.gp().inputs.iter().zip(&t.gp().targets) {
        let from_init = init
            .gp_inputs
            .iter()
            .zip(&init.gp_targets)
            .any(|(iz, iy)| iz == z && iy == y);
        let audited = t.audit_log().iter().any(|e| &e.z == z && e.y == *y);
        assert!(from_init || audited);
    }
    assert!(t.gp().len() <= t.config().gp_capacity);
}

#[test]
fn fixed_empty_gp_matches_vanilla_trajectory() {
    let mut guided = quick_config(8, 600);
    guided.gp_mode = GpMode::Fixed;
    let mut vanilla = guided.clone();
    vanilla.vanilla = true;

    let mut a = Trainer::new(guided, Pendulum::default(), None).unwrap();
    let mut b = Trainer::new(vanilla, Pendulum::default(), None).unwrap();
    a.run().unwrap();
    b.run().unwrap();
    assert!(a.gp().is_empty());
    assert_eq!(a.nets().actor, b.nets().actor);
    assert_eq!(a.nets().critic, b.nets().critic);
    for (ra, rb) in a.records().iter().zip(b.records()) {
        assert_eq!(ra.episode_return, rb.episode_return);
        assert_eq!(ra.critic_loss, rb.critic_loss);
        assert_eq!(ra.cumulative_catastrophes, rb.cumulative_catastrophes);
    }
    // guided objective differs by the constant prior-bound terms only
    let beta = a.beta_value().unwrap();
    let l = -beta * a.hyperparams().signal_variance.sqrt();
    let shift = -a.config().agent.penalty_weight * (-l) + (-l * l).exp();
    for (ra, rb) in a
        .records()
        .iter()
        .zip(b.records())
        .filter(|(r, _)| r.kind == RecordKind::Train)
    {
        if let (Some(ja), Some(jb)) = (ra.actor_objective, rb.actor_objective) {
            assert!((ja - jb - shift).abs() < 1e-8);
        }
    }
}

#[test]
fn init_trajectory_threshold_reapplied() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demo.csv");
    let mut transitions = scripted(300, 4);
    // a few costly rows that must be excluded from the GP
    for t in transitions.iter_mut().step_by(37) {
        t.c = -7.5;
    }
    write_trajectory(&path, &transitions).unwrap();
    let threshold = 5.0;
    let init = load_init_trajectory(&path, threshold).unwrap();
    let kept: Vec<&Transition> = transitions.iter().filter(|t| t.c >= -threshold).collect();
    assert_eq!(init.gp_inputs.len(), kept.len());
    for ((z, y), t) in init.gp_inputs.iter().zip(&init.gp_targets).zip(kept) {
        assert_eq!(z, &t.state_action());
        assert_eq!(*y, -t.c);
    }
    assert_eq!(init.transitions.len(), 300);
}

#[test]
fn trajectory_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let transitions = scripted(1000, 5);
    write_trajectory(&path, &transitions).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1001);
    assert_eq!(read_trajectory(&path).unwrap(), transitions);
    assert_eq!(transitions.iter().filter(|t| t.done).count(), 5);
}

#[test]
fn evaluation_is_additive_over_episodes() {
    let t = Trainer::new(quick_config(9, 0), Pendulum::default(), None).unwrap();
    let nets = t.nets();
    let mut env = Pendulum::new(PendulumParams {
        reset_theta: 1.0,
        ..PendulumParams::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let all = evaluate(nets, &mut env, 4, &mut rng).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let parts: Vec<_> = (0..4).map(|_| evaluate(nets, &mut env, 1, &mut rng).unwrap()).collect();
    let sum: f64 = parts.iter().map(|p| p.mean_return).sum();
    assert!((all.mean_return * 4.0 - sum).abs() < 1e-9);
    assert_eq!(all.catastrophes, parts.iter().map(|p| p.catastrophes).sum::<usize>());
    assert!(evaluate(nets, &mut env, 0, &mut rng).is_err());
}

#[test]
fn eval_rows_appear_on_interval() {
    let mut t = Trainer::new(quick_config(10, 1000), Pendulum::default(), None).unwrap();
    t.run().unwrap();
    let evals: Vec<usize> = t
        .records()
        .iter()
        .filter(|r| r.kind == RecordKind::Eval)
        .map(|r| r.step)
        .collect();
    assert_eq!(evals, vec![200, 400, 600, 800, 1000]);
    let trains = t.records().iter().filter(|r| r.kind == RecordKind::Train).count();
    assert_eq!(trains, 5);
    // eval rows land on episode ends and must include that episode's catastrophes
    for e in t.records().iter().filter(|r| r.kind == RecordKind::Eval) {
        let tr = t.records().iter().find(|r| r.kind == RecordKind::Train && r.step == e.step).unwrap();
        assert_eq!(e.cumulative_catastrophes, tr.cumulative_catastrophes);
    }
    assert!(t.records().last().unwrap().cumulative_catastrophes > 0);
    let env = Pendulum::default();
    assert_eq!(env.episode_length(), 200);
}
