use dual_ac::driver::{run_experiment, AnyTrainer, DualAcConfig, MemorySink};
use dual_ac::envs::make_tabular;
use dual_ac::function_approx::{Policy, TabularSoftmaxPolicy};
use dual_ac::io::{load_checkpoint, save_checkpoint};
use dual_ac::mdp::{greedy_policy, policy_return, LpOracle};
use dual_ac::optimizer::{natural_gradient_step, AnalyticFisher, CgConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short(iterations: usize, seed: u64) -> DualAcConfig {
    DualAcConfig {
        iterations,
        seed,
        ..DualAcConfig::default()
    }
}

fn pendulum_cfg(iterations: usize) -> DualAcConfig {
    let mut cfg = short(iterations, 3);
    cfg.batch_m = 4;
    cfg.horizon = Some(40);
    cfg.features.policy_features = 20;
    cfg.features.value_features = 20;
    cfg.features.bandwidth_rollouts = 2;
    cfg
}

#[test]
fn runs_are_deterministic_given_the_seed() {
    for (env, cfg) in [("gridworld", short(15, 7)), ("pendulum", pendulum_cfg(4))] {
        let a = run_experiment(&cfg, env, &mut MemorySink::default()).unwrap();
        let b = run_experiment(&cfg, env, &mut MemorySink::default()).unwrap();
        assert_eq!(a.len(), cfg.iterations);
        let strip = |r: &[dual_ac::driver::IterationRecord]| r.iter().map(|x| x.without_timing()).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b), "{env}");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_the_next_iteration() {
    let dir = std::env::temp_dir().join(format!("dual-ac-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for (env, cfg) in [("chain5", short(0, 11)), ("pendulum", pendulum_cfg(0))] {
        let mut trainer = AnyTrainer::new(&cfg, env).unwrap();
        for _ in 0..5 {
            trainer.step().unwrap();
        }
        let path = dir.join(format!("{env}.json"));
        save_checkpoint(&path, &trainer.checkpoint(env)).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, trainer.checkpoint(env));
        let mut resumed = AnyTrainer::from_checkpoint(&cfg, &ckpt).unwrap();
        for _ in 0..2 {
            let (a, b) = (trainer.step().unwrap(), resumed.step().unwrap());
            assert_eq!(a.without_timing(), b.without_timing(), "{env}");
        }
        assert_eq!(trainer.checkpoint(env), resumed.checkpoint(env));
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn chain_policy_becomes_optimal() {
    let cfg = short(200, 0);
    let mut trainer = AnyTrainer::new(&cfg, "chain2").unwrap();
    for _ in 0..cfg.iterations {
        trainer.step().unwrap();
    }
    let AnyTrainer::Tabular(t) = &trainer else {
        panic!("chain2 is tabular")
    };
    let mdp = make_tabular("chain2").unwrap().mdp().clone();
    let oracle = LpOracle::solve(&mdp, 1e-12).unwrap();
    let learned = greedy_policy(&mdp, &policy_return_values(t.policy(), &mdp)).unwrap();
    assert_eq!(learned.probs(), oracle.pi_star.probs());
    let ret = policy_return(&mdp, &t.policy().to_tabular()).unwrap();
    let best = policy_return(&mdp, &oracle.pi_star).unwrap();
    assert!(ret > 0.95 * best, "{ret} vs {best}");
}

/// Values whose greedy policy is the policy's own mode.
fn policy_return_values(policy: &TabularSoftmaxPolicy, mdp: &dual_ac::mdp::TabularMdp) -> dual_ac::mdp::ValueVector {
    let mode = (0..mdp.n_states())
        .map(|s| {
            let p = policy.probs_at(s);
            (0..p.len()).fold(0, |b, a| if p[a] > p[b] { a } else { b })
        })
        .collect::<Vec<_>>();
    let det = dual_ac::mdp::TabularPolicy::deterministic(mdp.n_actions(), &mode).unwrap();
    dual_ac::mdp::policy_value(mdp, &det).unwrap()
}

#[test]
fn stepsizes_decrease_over_a_run() {
    let records = run_experiment(&short(40, 2), "chain5", &mut MemorySink::default()).unwrap();
    assert!(records.windows(2).all(|w| w[1].stepsize < w[0].stepsize));
    assert!(records.iter().all(|r| r.kl.is_finite() && r.kl >= 0.0));
}

#[test]
fn single_state_run_has_nothing_to_learn() {
    // One state, one action: the policy has no freedom and the critic sees R / (1 - gamma).
    let dir = std::env::temp_dir().join(format!("dual-ac-single-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("single.json");
    let mdp = dual_ac::envs::tabular::single_state_mdp(0.9);
    std::fs::write(&path, dual_ac::io::mdp_to_json(&mdp)).unwrap();
    let env = format!("mdp:{}", path.display());
    let mut trainer = AnyTrainer::new(&short(0, 0), &env).unwrap();
    let mut last = None;
    for _ in 0..5 {
        last = Some(trainer.step().unwrap());
    }
    let AnyTrainer::Tabular(t) = &trainer else {
        panic!("file MDPs are tabular")
    };
    assert_eq!(t.policy().params(), &[0.0]);
    assert!((last.unwrap().exact_return.unwrap() - 10.0).abs() < 1e-9);
    assert!((t.value().weights()[0] - 10.0).abs() < 0.5, "{:?}", t.value().weights());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn kl_of_a_natural_step_is_quadratic_in_zeta() {
    let (ns, na) = (6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in g.chunks_mut(na) {
        let mean = row.iter().sum::<f64>() / na as f64;
        row.iter_mut().for_each(|x| *x -= mean);
    }
    let old = TabularSoftmaxPolicy::new(ns, na, logits.clone()).unwrap();
    let states: Vec<usize> = (0..ns).collect();
    let held_out: Vec<usize> = (0..200).map(|_| rng.random_range(0..ns)).collect();
    let cg = CgConfig { max_iters: 100, damping: 0.0, residual_tol: 1e-14 };
    let fisher = AnalyticFisher::new(&old, &states, 1e-10).unwrap();
    let kl_at = |zeta: f64, normalize: bool, on: &[usize]| {
        let step = natural_gradient_step(&logits, &g, &fisher, zeta, normalize, &cg).unwrap();
        let new = TabularSoftmaxPolicy::new(ns, na, step.params).unwrap();
        let mut grad = vec![0.0; ns * na];
        on.iter().map(|s| new.kl_and_grad(&old, s, &mut grad).unwrap()).sum::<f64>() / on.len() as f64
    };
    let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&z| kl_at(z, false, &held_out) / (z * z)).collect();
    assert!(ratios.iter().all(|r| *r > 0.0));
    assert!((ratios[1] / ratios[2] - 1.0).abs() < 0.01, "{ratios:?}");
    assert!((ratios[0] / ratios[2] - 1.0).abs() < 0.1, "{ratios:?}");
    // A normalized step of size zeta moves the Fisher states by KL = zeta^2 / 2.
    for zeta in [1e-2, 1e-3] {
        let kl = kl_at(zeta, true, &states);
        assert!((kl / (0.5 * zeta * zeta) - 1.0).abs() < 0.05, "{zeta}: {kl}");
    }
}
