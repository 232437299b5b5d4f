//! Logged trajectories and everything that reshapes them before learning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::env::{sample_categorical, Environment, StatePolicy};
use crate::error::{Error, Result};
use crate::math;

pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Where a transition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Provenance {
    /// Collected under the behavior policy.
    Logged,
    /// Action replaced during smoothing; the next state is the absorbing
    /// sentinel.
    Injected,
    /// Self-loop of the absorbing sentinel after an injection.
    AbsorbingLoop,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub behavior_prob: f64,
    pub timestep: usize,
    pub provenance: Provenance,
    /// The episode ended on or before this step.
    pub done: bool,
    /// Step added after the episode ended.
    pub padded: bool,
}

impl Transition {
    /// The next state is the absorbing sentinel.
    pub fn is_absorbing(&self) -> bool {
        self.provenance != Provenance::Logged
    }

    /// The state itself is the absorbing sentinel.
    pub fn state_is_absorbing(&self) -> bool {
        self.provenance == Provenance::AbsorbingLoop
    }

    /// The state-action pair is in the behavior support.
    pub fn in_support(&self) -> bool {
        self.provenance == Provenance::Logged
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn discounted_reward(&self, gamma: f64) -> f64 {
        let mut g = 1.0;
        let mut total = 0.0;
        for t in &self.transitions {
            total += g * t.reward;
            g *= gamma;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(dim: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_into(&self, state: &[f64], out: &mut [f64]) {
        for i in 0..state.len() {
            out[i] = (state[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn normalize(&self, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; state.len()];
        self.normalize_into(state, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub horizon: usize,
    pub n_actions: usize,
    pub state_dim: usize,
    pub smoothing_epsilon: f64,
    pub normalization: NormalizationStats,
}

impl Dataset {
    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.len() * self.horizon
    }

    /// Checks shapes, contiguous timesteps, positive propensities and the
    /// absorbing suffix.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.n_actions == 0 {
            return Err(Error::InvalidInput("dataset needs a horizon and actions".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing_epsilon) {
            return Err(Error::InvalidInput(format!(
                "smoothing epsilon {} outside [0, 1)",
                self.smoothing_epsilon
            )));
        }
        if self.normalization.mean.len() != self.state_dim
            || self.normalization.std.len() != self.state_dim
            || self.normalization.std.iter().any(|&s| !(s > 0.0))
        {
            return Err(Error::InvalidInput("normalization statistics are malformed".into()));
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != self.horizon {
                return Err(Error::InvalidInput(format!(
                    "trajectory {i} has {} steps, horizon is {}",
                    traj.len(),
                    self.horizon
                )));
            }
            let mut absorbed = false;
            for (t, tr) in traj.transitions.iter().enumerate() {
                let ctx = |what: &str| Error::InvalidInput(format!("trajectory {i} step {t}: {what}"));
                if tr.timestep != t {
                    return Err(ctx("timestep out of order"));
                }
                if tr.state.len() != self.state_dim || tr.next_state.len() != self.state_dim {
                    return Err(ctx("wrong state dimension"));
                }
                if tr.action >= self.n_actions {
                    return Err(ctx("action out of range"));
                }
                if !(tr.behavior_prob > 0.0 && tr.behavior_prob <= 1.0) {
                    return Err(ctx("behavior probability outside (0, 1]"));
                }
                if !tr.reward.is_finite()
                    || tr.state.iter().chain(&tr.next_state).any(|x| !x.is_finite())
                {
                    return Err(ctx("non-finite value"));
                }
                match (absorbed, tr.provenance) {
                    (false, Provenance::AbsorbingLoop) => return Err(ctx("absorbing loop before injection")),
                    (true, Provenance::Logged | Provenance::Injected) => {
                        return Err(ctx("left the absorbing state"))
                    }
                    _ => {}
                }
                if tr.is_absorbing() {
                    if tr.reward != 0.0 || tr.next_state.iter().any(|&x| x != 0.0) {
                        return Err(ctx("absorbing transition must have zero reward and sentinel next state"));
                    }
                    absorbed = true;
                }
            }
        }
        Ok(())
    }

    /// Mean undiscounted return over trajectories.
    pub fn mean_return(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(Trajectory::total_reward).sum::<f64>()
            / self.trajectories.len() as f64
    }

    pub fn recompute_normalization(&mut self) -> Result<()> {
        self.normalization = compute_normalization(self)?;
        Ok(())
    }
}

/// Rolls out `n_trajectories` episodes of exactly `horizon` steps. An
/// episode that ends early is padded by repeating its final state with zero
/// reward while actions keep being drawn from the behavior policy.
pub fn collect_dataset(
    env: &mut dyn Environment,
    behavior: &dyn StatePolicy,
    n_trajectories: usize,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    if n_trajectories == 0 {
        return Err(Error::Empty("trajectories"));
    }
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    let n_actions = env.n_actions();
    let state_dim = env.state_dim();
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for _ in 0..n_trajectories {
        let mut state = env.reset(rng);
        let mut done = false;
        let mut transitions = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let probs = behavior.action_probs(&state)?;
            if probs.len() != n_actions {
                return Err(Error::DimensionMismatch {
                    context: "behavior policy actions",
                    expected: n_actions,
                    found: probs.len(),
                });
            }
            let action = sample_categorical(&probs, rng);
            let behavior_prob = probs[action];
            if !(behavior_prob > 0.0) {
                return Err(Error::InvalidInput("sampled an action with zero propensity".into()));
            }
            if done {
                transitions.push(Transition {
                    state: state.clone(),
                    action,
                    reward: 0.0,
                    next_state: state.clone(),
                    behavior_prob,
                    timestep: t,
                    provenance: Provenance::Logged,
                    done: true,
                    padded: true,
                });
                continue;
            }
            let step = env.step(action, rng)?;
            done = step.done;
            transitions.push(Transition {
                state: core::mem::replace(&mut state, step.next_state.clone()),
                action,
                reward: step.reward,
                next_state: step.next_state,
                behavior_prob,
                timestep: t,
                provenance: Provenance::Logged,
                done,
                padded: false,
            });
        }
        trajectories.push(Trajectory { transitions });
    }
    let mut ds = Dataset {
        trajectories,
        horizon,
        n_actions,
        state_dim,
        smoothing_epsilon: 0.0,
        normalization: NormalizationStats::identity(state_dim),
    };
    ds.recompute_normalization()?;
    Ok(ds)
}

/// Realizes `mu~ = (1 - eps) mu + eps U(zero-probability actions)`.
///
/// At states where the behavior has `k > 0` zero-probability actions each
/// transition is kept with probability `1 - eps` (propensity scaled by
/// `1 - eps`) or replaced by one of those `k` actions (propensity `eps / k`),
/// in which case the episode moves to the absorbing sentinel for good.
pub fn epsilon_smooth(
    dataset: &Dataset,
    behavior: &dyn StatePolicy,
    epsilon: f64,
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} outside [0, 1)")));
    }
    if epsilon > 0.0 && dataset.state_dim == 0 {
        return Err(Error::MissingSentinel);
    }
    let mut out = dataset.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    out.smoothing_epsilon = epsilon;
    let n_actions = dataset.n_actions;
    let sentinel = vec![0.0; dataset.state_dim];
    for traj in &mut out.trajectories {
        let mut absorbed = false;
        for tr in &mut traj.transitions {
            if absorbed {
                let action = rng.gen_range(0..n_actions);
                *tr = Transition {
                    state: sentinel.clone(),
                    action,
                    reward: 0.0,
                    next_state: sentinel.clone(),
                    behavior_prob: 1.0 / n_actions as f64,
                    timestep: tr.timestep,
                    provenance: Provenance::AbsorbingLoop,
                    done: tr.done,
                    padded: tr.padded,
                };
                continue;
            }
            let probs = behavior.action_probs(&tr.state)?;
            let zeros: Vec<usize> = (0..n_actions).filter(|&a| probs[a] == 0.0).collect();
            if zeros.is_empty() {
                continue;
            }
            if rng.gen::<f64>() < epsilon {
                let k = zeros.len();
                tr.action = zeros[rng.gen_range(0..k)];
                tr.behavior_prob = epsilon / k as f64;
                tr.reward = 0.0;
                tr.next_state = sentinel.clone();
                tr.provenance = Provenance::Injected;
                absorbed = true;
            } else {
                tr.behavior_prob = (1.0 - epsilon) * probs[tr.action];
            }
        }
    }
    out.recompute_normalization()?;
    Ok(out)
}

/// Per-dimension mean and population std over all non-sentinel states,
/// both `s` and `s'`, with the std floored at [`STD_FLOOR`].
pub fn compute_normalization(dataset: &Dataset) -> Result<NormalizationStats> {
    let dim = dataset.state_dim;
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    let states = || {
        let transitions = || dataset.trajectories.iter().flat_map(|t| &t.transitions);
        transitions()
            .filter(|t| !t.state_is_absorbing())
            .map(|t| &t.state)
            .chain(transitions().filter(|t| !t.is_absorbing()).map(|t| &t.next_state))
    };
    for s in states() {
        for (acc, x) in sum.iter_mut().zip(s) {
            *acc += x;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("non-absorbing states"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; dim];
    for s in states() {
        for i in 0..dim {
            let d = s[i] - mean[i];
            sq[i] += d * d;
        }
    }
    let std = sq
        .iter()
        .map(|v| math::sqrt(v / count as f64).max(STD_FLOOR))
        .collect();
    Ok(NormalizationStats { mean, std })
}

/// Timestep sampler with `P(t) = gamma^t / sum_{u<H} gamma^u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedSampler {
    gamma: f64,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DiscountedSampler {
    pub fn new(gamma: f64, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidInput(format!("gamma {gamma} outside (0, 1]")));
        }
        let mut raw = Vec::with_capacity(horizon);
        let mut g = 1.0;
        for _ in 0..horizon {
            raw.push(g);
            g *= gamma;
        }
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut cumulative = Vec::with_capacity(horizon);
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        Ok(DiscountedSampler {
            gamma,
            weights,
            cumulative,
        })
    }

    /// Uniform over `0..horizon`.
    pub fn uniform(horizon: usize) -> Result<Self> {
        DiscountedSampler::new(1.0, horizon)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample_timestep(&self, rng: &mut dyn RngCore) -> usize {
        if self.gamma == 1.0 {
            return rng.gen_range(0..self.weights.len());
        }
        let u: f64 = rng.gen();
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.weights.len() - 1)
    }

    /// Flat row index `trajectory * horizon + t`.
    pub fn sample_row(&self, n_trajectories: usize, rng: &mut dyn RngCore) -> usize {
        let traj = rng.gen_range(0..n_trajectories);
        traj * self.weights.len() + self.sample_timestep(rng)
    }

    pub fn sample_rows(&self, n_trajectories: usize, batch_size: usize, rng: &mut dyn RngCore) -> Vec<usize> {
        (0..batch_size).map(|_| self.sample_row(n_trajectories, rng)).collect()
    }
}

/// I.i.d. draws: trajectory uniform, timestep from the sampler.
pub fn sample_minibatch_dgamma(
    dataset: &Dataset,
    sampler: &DiscountedSampler,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Transition>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if dataset.trajectories.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if sampler.horizon() != dataset.horizon {
        return Err(Error::DimensionMismatch {
            context: "sampler horizon",
            expected: dataset.horizon,
            found: sampler.horizon(),
        });
    }
    Ok(sampler
        .sample_rows(dataset.n_trajectories(), batch_size, rng)
        .into_iter()
        .map(|row| dataset.trajectories[row / dataset.horizon].transitions[row % dataset.horizon].clone())
        .collect())
}

/// Flat, normalized copy of a dataset for the training hot paths. Row
/// `i * horizon + t` is step `t` of trajectory `i`.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    /// Normalized states; the sentinel stays all-zero.
    pub states: Vec<f64>,
    pub next_states: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub behavior_probs: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub in_support: Vec<bool>,
    pub state_absorbing: Vec<bool>,
    pub next_absorbing: Vec<bool>,
    /// No bootstrap past this row: last step, episode over, or sentinel next.
    pub stop_bootstrap: Vec<bool>,
    pub normalization: NormalizationStats,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, normalization: &NormalizationStats) -> Result<Self> {
        if dataset.trajectories.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if normalization.dim() != dataset.state_dim {
            return Err(Error::DimensionMismatch {
                context: "normalization dimension",
                expected: dataset.state_dim,
                found: normalization.dim(),
            });
        }
        let n = dataset.n_transitions();
        let dim = dataset.state_dim;
        let mut p = PreparedData {
            n_trajectories: dataset.n_trajectories(),
            horizon: dataset.horizon,
            state_dim: dim,
            n_actions: dataset.n_actions,
            states: vec![0.0; n * dim],
            next_states: vec![0.0; n * dim],
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            behavior_probs: Vec::with_capacity(n),
            timesteps: Vec::with_capacity(n),
            in_support: Vec::with_capacity(n),
            state_absorbing: Vec::with_capacity(n),
            next_absorbing: Vec::with_capacity(n),
            stop_bootstrap: Vec::with_capacity(n),
            normalization: normalization.clone(),
        };
        let mut row = 0;
        for traj in &dataset.trajectories {
            if traj.len() != dataset.horizon {
                return Err(Error::InvalidInput("trajectory length differs from horizon".into()));
            }
            for tr in &traj.transitions {
                if !tr.state_is_absorbing() {
                    normalization.normalize_into(&tr.state, &mut p.states[row * dim..(row + 1) * dim]);
                }
                if !tr.is_absorbing() {
                    normalization
                        .normalize_into(&tr.next_state, &mut p.next_states[row * dim..(row + 1) * dim]);
                }
                p.actions.push(tr.action);
                p.rewards.push(tr.reward);
                p.behavior_probs.push(tr.behavior_prob);
                p.timesteps.push(tr.timestep);
                p.in_support.push(tr.in_support());
                p.state_absorbing.push(tr.state_is_absorbing());
                p.next_absorbing.push(tr.is_absorbing());
                p.stop_bootstrap.push(
                    tr.timestep + 1 == dataset.horizon || tr.done || tr.padded || tr.is_absorbing(),
                );
                row += 1;
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state(&self, row: usize) -> &[f64] {
        &self.states[row * self.state_dim..(row + 1) * self.state_dim]
    }

    pub fn next_state(&self, row: usize) -> &[f64] {
        &self.next_states[row * self.state_dim..(row + 1) * self.state_dim]
    }

    /// Row of the first step of `row`'s trajectory.
    pub fn initial_row(&self, row: usize) -> usize {
        row - row % self.horizon
    }

    /// Gathers states of the given rows into a row-major buffer.
    pub fn gather_states(&self, rows: &[usize], out: &mut Vec<f64>) {
        for &r in rows {
            out.extend_from_slice(self.state(r));
        }
    }

    pub fn gather_next_states(&self, rows: &[usize], out: &mut Vec<f64>) {
        for &r in rows {
            out.extend_from_slice(self.next_state(r));
        }
    }

    pub fn gather_initial_states(&self, rows: &[usize], out: &mut Vec<f64>) {
        for &r in rows {
            out.extend_from_slice(self.state(self.initial_row(r)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{CartPole, TabularEnv, TabularPolicy, UniformPolicy};
    use crate::mdp::{PolicyTable, TabularMdp};
    use crate::rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn single_state_env() -> TabularEnv {
        TabularEnv::new(
            TabularMdp::new(
                vec![vec![vec![1.0], vec![1.0]]],
                vec![vec![0.5, 0.5]],
                0.9,
                vec![1.0],
                None,
            )
            .unwrap(),
        )
    }

    /// Two states, action 0 stays, action 1 flips.
    fn flip_env() -> TabularEnv {
        TabularEnv::new(
            TabularMdp::new(
                vec![
                    vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                ],
                vec![vec![0.2, 0.7], vec![0.4, 0.1]],
                0.9,
                vec![0.5, 0.5],
                None,
            )
            .unwrap(),
        )
    }

    #[test]
    fn horizon_one_gives_single_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = collect_dataset(&mut CartPole::new(), &UniformPolicy { n_actions: 2 }, 7, 1, &mut rng).unwrap();
        assert!(ds.trajectories.iter().all(|t| t.len() == 1));
        ds.validate().unwrap();
    }

    #[test]
    fn single_state_env_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = collect_dataset(&mut single_state_env(), &UniformPolicy { n_actions: 2 }, 5, 10, &mut rng).unwrap();
        for tr in ds.trajectories.iter().flat_map(|t| &t.transitions) {
            assert_eq!(tr.state, vec![1.0]);
            assert_eq!(tr.reward, 0.5);
        }
        assert_eq!(ds.normalization.std, vec![STD_FLOOR]);
        assert_eq!(ds.normalization.mean, vec![1.0]);
    }

    #[test]
    fn cartpole_padding_preserves_returns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = collect_dataset(&mut CartPole::new(), &UniformPolicy { n_actions: 2 }, 500, 200, &mut rng).unwrap();
        ds.validate().unwrap();
        let mean = ds.mean_return();
        assert!((mean - 22.0).abs() < 3.0, "{mean}");
        for traj in &ds.trajectories {
            let unpadded: f64 = traj.transitions.iter().filter(|t| !t.padded).map(|t| t.reward).sum();
            assert_eq!(unpadded, traj.total_reward());
            let last = traj.transitions.iter().rposition(|t| !t.padded).unwrap();
            for tr in &traj.transitions[last + 1..] {
                assert_eq!(tr.state, traj.transitions[last].next_state);
                assert_eq!(tr.reward, 0.0);
            }
        }
    }

    #[test]
    fn smoothing_full_support_or_zero_epsilon_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = collect_dataset(&mut CartPole::new(), &UniformPolicy { n_actions: 2 }, 20, 50, &mut rng).unwrap();
        let same = epsilon_smooth(&ds, &UniformPolicy { n_actions: 2 }, 0.05, &mut rng).unwrap();
        assert_eq!(same.trajectories, ds.trajectories);
        let zero = epsilon_smooth(&ds, &UniformPolicy { n_actions: 2 }, 0.0, &mut rng).unwrap();
        assert_eq!(zero, ds);
    }

    #[test]
    fn smoothing_deterministic_behavior_reroutes_half() {
        let mu = TabularPolicy {
            table: PolicyTable::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = collect_dataset(&mut flip_env(), &mu, 4000, 3, &mut rng).unwrap();
        let sm = epsilon_smooth(&ds, &mu, 0.5, &mut rng).unwrap();
        sm.validate().unwrap();
        let n = sm.trajectories.len() as f64;
        let rerouted = sm
            .trajectories
            .iter()
            .filter(|t| t.transitions[0].provenance == Provenance::Injected)
            .count() as f64;
        let sd = math::sqrt(n * 0.25);
        assert!((rerouted - n / 2.0).abs() < 3.0 * sd);
        for tr in sm.trajectories.iter().flat_map(|t| &t.transitions) {
            match tr.provenance {
                Provenance::Injected => {
                    assert_eq!(tr.behavior_prob, 0.5);
                    assert_eq!(tr.action, 1);
                }
                Provenance::Logged => assert_eq!(tr.behavior_prob, 0.5),
                Provenance::AbsorbingLoop => assert_eq!(tr.reward, 0.0),
            }
        }
    }

    #[test]
    fn normalization_of_gaussian_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let transitions = (0..n)
            .map(|_| {
                // Box-Muller
                let (u1, u2): (f64, f64) = (rng.gen::<f64>().max(1e-300), rng.gen());
                let z = math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2);
                Transition {
                    state: vec![z],
                    action: 0,
                    reward: 0.0,
                    next_state: vec![z],
                    behavior_prob: 1.0,
                    timestep: 0,
                    provenance: Provenance::Logged,
                    done: false,
                    padded: false,
                }
            })
            .map(|t| Trajectory { transitions: vec![t] })
            .collect();
        let mut ds = Dataset {
            trajectories: transitions,
            horizon: 1,
            n_actions: 1,
            state_dim: 1,
            smoothing_epsilon: 0.0,
            normalization: NormalizationStats::identity(1),
        };
        let stats = compute_normalization(&ds).unwrap();
        let se = 1.0 / math::sqrt(n as f64);
        assert!(stats.mean[0].abs() < 3.0 * se);
        assert!((stats.std[0] - 1.0).abs() < 3.0 * se * core::f64::consts::SQRT_2);
        for t in ds.trajectories.iter_mut().flat_map(|t| &mut t.transitions) {
            t.state = stats.normalize(&t.state);
            t.next_state = stats.normalize(&t.next_state);
        }
        let again = compute_normalization(&ds).unwrap();
        assert!(again.mean[0].abs() < 1e-9 && (again.std[0] - 1.0).abs() < 1e-9);
    }

    fn chi_square_uniformity(counts: &[usize], probs: &[f64], n: usize) -> f64 {
        counts
            .iter()
            .zip(probs)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e) * (c as f64 - e) / e
            })
            .sum()
    }

    #[test]
    fn discounted_sampler_marginals() {
        let mut rng = rng::derive(11, 0, 0);
        let s = DiscountedSampler::new(0.5, 3).unwrap();
        let expect = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (w, e) in s.weights().iter().zip(expect) {
            assert!((w - e).abs() < 1e-15);
        }
        let n = 1_000_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[s.sample_timestep(&mut rng)] += 1;
        }
        for (c, e) in counts.iter().zip(expect) {
            let sd = math::sqrt(n as f64 * e * (1.0 - e));
            assert!((*c as f64 - n as f64 * e).abs() < 3.0 * sd);
        }
        let u = DiscountedSampler::new(1.0, 10).unwrap();
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[u.sample_timestep(&mut rng)] += 1;
        }
        // 9 dof, p = 0.001 critical value 27.88
        assert!(chi_square_uniformity(&counts, &[0.1; 10], n) < 27.88);
    }

    #[test]
    fn minibatch_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = collect_dataset(&mut flip_env(), &UniformPolicy { n_actions: 2 }, 3, 4, &mut rng).unwrap();
        let s = DiscountedSampler::new(0.9, 4).unwrap();
        let b = sample_minibatch_dgamma(&ds, &s, 1, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b[0].timestep < 4 && b[0].behavior_prob == 0.5);
    }

    #[test]
    fn prepared_data_keeps_sentinel_zero() {
        let mu = TabularPolicy {
            table: PolicyTable::new(vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = collect_dataset(&mut flip_env(), &mu, 50, 5, &mut rng).unwrap();
        let sm = epsilon_smooth(&ds, &mu, 0.3, &mut rng).unwrap();
        let p = PreparedData::new(&sm, &sm.normalization).unwrap();
        for r in 0..p.len() {
            if p.state_absorbing[r] {
                assert!(p.state(r).iter().all(|&x| x == 0.0));
            }
            if p.next_absorbing[r] {
                assert!(p.next_state(r).iter().all(|&x| x == 0.0));
                assert!(p.stop_bootstrap[r]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn smoothed_propensities_are_bounded_and_suffix_closed(seed in any::<u64>(), eps in 0.01f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = PolicyTable::random(2, 2, 0.5, &mut rng);
            let mu = TabularPolicy { table: table.clone() };
            let ds = collect_dataset(&mut flip_env(), &mu, 20, 6, &mut rng).unwrap();
            let sm = epsilon_smooth(&ds, &mu, eps, &mut rng).unwrap();
            sm.validate().unwrap();
            let min_logged = table.rows().iter().flatten().copied().filter(|&p| p > 0.0).fold(1.0, f64::min);
            let bound = ((1.0 - eps) * min_logged).min(eps / 2.0);
            for traj in &sm.trajectories {
                let mut seen = false;
                for tr in &traj.transitions {
                    prop_assert!(tr.behavior_prob >= bound - 1e-15);
                    if seen { prop_assert!(tr.is_absorbing()); }
                    seen |= tr.is_absorbing();
                }
            }
        }
    }
}
