use opposd_core::actor::{actor_gradient, behavior_clone, hard_example_actor, offpac_actor_gradient, ActorModel};
use opposd_core::data::{collect_dataset, PreparedData};
use opposd_core::env::{state_index, CartPole, StatePolicy, TabularEnv, TabularPolicy, UniformPolicy};
use opposd_core::mdp::hard_example::{HORIZON, LEFT, RIGHT, S1, TERMINAL};
use opposd_core::mdp::{exact_value, expected_return, hard_example_mdp, PolicyTable};
use opposd_core::nn::gradcheck::central_differences;
use opposd_core::ratio::exact_ratio_tabular;
use opposd_core::rng::derive;
use rand::Rng;

const N_STATES: usize = TERMINAL + 1;

struct HardSetup {
    data: PreparedData,
    actor: ActorModel,
    w: Vec<f64>,
    q: Vec<f64>,
}

/// Hard-example data with the exact ratio and action values of the actor at
/// alpha = 1/2 on every row.
fn hard_setup(n_episodes: usize, seed: u64) -> HardSetup {
    let hard = hard_example_mdp();
    let ds = collect_dataset(
        &mut TabularEnv::new(hard.mdp.clone()),
        &UniformPolicy { n_actions: 2 },
        n_episodes,
        HORIZON,
        &mut derive(seed, 0, 0),
    )
    .unwrap();
    let data = PreparedData::new(&ds, &ds.normalization).unwrap();
    let actor = hard_example_actor(0.01, data.normalization.clone()).unwrap();
    let pi = actor.policy_table(N_STATES).unwrap();
    assert!((pi.prob(S1, LEFT) - 0.5).abs() < 1e-12);
    let ratio = exact_ratio_tabular(&hard.mdp, &pi, &hard.behavior).unwrap();
    let vf = exact_value(&hard.mdp, &pi).unwrap();
    let states: Vec<usize> = ds
        .trajectories
        .iter()
        .flat_map(|t| t.transitions.iter().map(|tr| state_index(&tr.state).unwrap()))
        .collect();
    let w = states.iter().map(|&s| ratio[s]).collect();
    let q = states.iter().zip(&data.actions).map(|(&s, &a)| vf.q[s][a]).collect();
    HardSetup {
        data,
        actor,
        w,
        q,
    }
}

fn trainable(actor: &ActorModel, v: &[f64]) -> Vec<f64> {
    let mask = actor.trainable.as_ref().unwrap();
    v.iter().zip(mask).map(|(&x, &m)| if m { x } else { 0.0 }).collect()
}

#[test]
fn corrected_gradient_points_uphill_on_the_hard_example() {
    let s = hard_setup(2000, 1);
    let hard = hard_example_mdp();
    let mut net = s.actor.net.clone();
    let stats = s.actor.normalization.clone();
    let mut ret = |theta: &[f64]| {
        net.set_flat(theta).unwrap();
        let a = ActorModel::from_net(net.clone(), 0.01, stats.clone(), None).unwrap();
        expected_return(&hard.mdp, &a.policy_table(N_STATES).unwrap(), true).unwrap()
    };
    let exact = trainable(&s.actor, &central_differences(&s.actor.net.flatten(), &mut ret, 1e-6));
    assert!(exact.iter().any(|g| g.abs() > 1e-3));
    let mut positive = 0;
    for seed in 0..20 {
        let mut rng = derive(seed, 5, 0);
        let rows: Vec<usize> = (0..500).map(|_| rng.gen_range(0..s.data.len())).collect();
        let w: Vec<f64> = rows.iter().map(|&r| s.w[r]).collect();
        let q: Vec<f64> = rows.iter().map(|&r| s.q[r]).collect();
        let g = actor_gradient(&s.actor, &s.data, &rows, &w, &q, 0.0).unwrap();
        // The returned gradient is for descent on the negated surrogate.
        let inner: f64 = g.grads.flatten().iter().zip(&exact).map(|(a, b)| -a * b).sum();
        if inner > 0.0 {
            positive += 1;
        }
    }
    // One-sided sign test at the 5% level.
    assert!(positive >= 15, "{positive}/20 batches point uphill");
}

#[test]
fn offpac_estimator_vanishes_on_the_hard_example() {
    let s = hard_setup(33_334, 2);
    let n = s.data.len();
    assert!(n >= 100_000);
    let dim = s.actor.net.n_params();
    let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
    for r in 0..n {
        let g = offpac_actor_gradient(&s.actor, &s.data, &[r], &[s.q[r]], 0.0).unwrap();
        for (k, v) in g.grads.flatten().iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    let m = n as f64;
    for k in 0..dim {
        let mean = sum[k] / m;
        let var = (sq[k] / m - mean * mean).max(0.0) * m / (m - 1.0);
        let sigma = (var / m).sqrt();
        assert!(mean.abs() <= 3.0 * sigma + 1e-15, "coordinate {k}: mean {mean:e}, sigma {sigma:e}");
    }
    // The ratio-corrected estimator on the same rows does not vanish.
    let rows: Vec<usize> = (0..n).collect();
    let g = actor_gradient(&s.actor, &s.data, &rows, &s.w, &s.q, 0.0).unwrap();
    assert!(g.norm > 1e-2, "corrected norm {}", g.norm);
}

#[test]
fn cloning_a_uniform_behavior_stays_near_uniform() {
    let mut env = CartPole::new();
    let policy = UniformPolicy { n_actions: 2 };
    let ds = collect_dataset(&mut env, &policy, 100, 200, &mut derive(3, 8, 0)).unwrap();
    let held_out = collect_dataset(&mut env, &policy, 20, 200, &mut derive(3, 8, 1)).unwrap();
    let data = PreparedData::new(&ds, &ds.normalization).unwrap();
    let mut rng = derive(3, 2, 0);
    let mut actor = ActorModel::new(&[4, 32, 2], 1e-3, data.normalization.clone(), &mut rng).unwrap();
    behavior_clone(&mut actor, &data, 2000, 500, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for t in &held_out.trajectories {
        for tr in t.transitions.iter().filter(|tr| !tr.state_is_absorbing()) {
            let p = actor.action_probs(&tr.state).unwrap();
            worst = worst.max((p[0] - 0.5).abs());
        }
    }
    assert!(worst <= 0.05, "total variation {worst}");
}

#[test]
fn cloning_a_deterministic_behavior_concentrates_mass() {
    let hard = hard_example_mdp();
    let always_right = PolicyTable::new(vec![vec![0.0, 1.0]; N_STATES]).unwrap();
    let ds = collect_dataset(
        &mut TabularEnv::new(hard.mdp.clone()),
        &TabularPolicy { table: always_right },
        200,
        HORIZON,
        &mut derive(4, 8, 0),
    )
    .unwrap();
    let data = PreparedData::new(&ds, &ds.normalization).unwrap();
    let mut rng = derive(4, 2, 0);
    let mut actor = ActorModel::new(&[N_STATES, 16, 2], 1e-2, data.normalization.clone(), &mut rng).unwrap();
    let before = actor.clone();
    behavior_clone(&mut actor, &data, 0, 64, &mut rng).unwrap();
    assert_eq!(actor, before);
    behavior_clone(&mut actor, &data, 500, 64, &mut rng).unwrap();
    let pi = actor.policy_table(N_STATES).unwrap();
    for tr in ds.trajectories.iter().flat_map(|t| &t.transitions) {
        let s = state_index(&tr.state).unwrap();
        assert!(pi.prob(s, RIGHT) >= 0.99, "state {s}: {}", pi.prob(s, RIGHT));
    }
}
