//! Tabular MDPs and their exact oracles.
//!
//! Values are un-normalized discounted sums unless a function says otherwise.
//! Occupancies are normalized: `d(s) = sum_t g^t d_t(s) / sum_t g^t`, summed to
//! convergence for `g < 1` and over the first `horizon` steps for `g = 1`.

mod augmented;
mod exact;
mod gradient;
pub mod hard_example;
mod linalg;

pub use augmented::{build_augmented_mdp, AugmentedMdp, DEFAULT_SUPPORT_TOL};
pub use exact::{
    exact_occupancy, exact_value, expected_return, occupancy_normalizer, return_normalizer,
    ValueFunction, OCCUPANCY_TAIL_TOL,
};
pub use gradient::{
    exact_policy_gradient, offpac_gradient_exact, AliasedFamily, PolicyFamily, TabularSoftmax,
};
pub use hard_example::{hard_example_mdp, HardExampleFamily};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Explicit finite MDP `(S, A, P, r, gamma, p0)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[s][a][s']`
    transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`, in `[0, 1]`
    reward: Vec<Vec<f64>>,
    gamma: f64,
    initial_dist: Vec<f64>,
    /// Episode length for undiscounted occupancies.
    #[cfg_attr(feature = "serde", serde(default))]
    horizon: Option<usize>,
}

impl TabularMdp {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        initial_dist: Vec<f64>,
        horizon: Option<usize>,
    ) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map(|t| t.len()).unwrap_or(0);
        let mdp = TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            initial_dist,
            horizon,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks every structural invariant; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp("needs at least one state and action".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidMdp(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.gamma == 1.0 && self.horizon.is_none() {
            return Err(Error::InvalidMdp("gamma = 1 requires a horizon".into()));
        }
        if self.transition.len() != ns || self.reward.len() != ns || self.initial_dist.len() != ns {
            return Err(Error::InvalidMdp("table sizes disagree on the number of states".into()));
        }
        for s in 0..ns {
            if self.transition[s].len() != na || self.reward[s].len() != na {
                return Err(Error::InvalidMdp(format!("state {s}: wrong number of actions")));
            }
            for a in 0..na {
                let row = &self.transition[s][a];
                if row.len() != ns || row.iter().any(|&p| !(p >= 0.0)) {
                    return Err(Error::InvalidMdp(format!("P[{s}][{a}] is not a distribution")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > SUM_TOL {
                    return Err(Error::InvalidMdp(format!("P[{s}][{a}] sums to {sum}")));
                }
                let r = self.reward[s][a];
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::InvalidMdp(format!("r[{s}][{a}] = {r} outside [0, 1]")));
                }
            }
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if self.initial_dist.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidMdp("initial distribution is not a distribution".into()));
        }
        Ok(())
    }

    /// Random MDP with `branching` successors per state-action (all states
    /// when `branching >= n_states`), uniform rewards and a random `p0`.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        branching: usize,
        horizon: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let branching = branching.clamp(1, n_states);
        let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        for row_s in transition.iter_mut() {
            for row in row_s.iter_mut() {
                let mut idx: Vec<usize> = (0..n_states).collect();
                for i in 0..branching {
                    let j = rng.gen_range(i..n_states);
                    idx.swap(i, j);
                }
                let w: Vec<f64> = (0..branching).map(|_| rng.gen::<f64>() + 0.05).collect();
                let total: f64 = w.iter().sum();
                for (k, &s2) in idx[..branching].iter().enumerate() {
                    row[s2] = w[k] / total;
                }
                renormalize(row);
            }
        }
        let reward = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let mut p0: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.05).collect();
        renormalize(&mut p0);
        TabularMdp::new(transition, reward, gamma, p0, horizon)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> Option<usize> {
        self.horizon
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    #[inline]
    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn with_gamma(&self, gamma: f64, horizon: Option<usize>) -> Result<Self> {
        TabularMdp::new(
            self.transition.clone(),
            self.reward.clone(),
            gamma,
            self.initial_dist.clone(),
            horizon,
        )
    }

    /// `P_pi[s][s']` and `r_pi[s]` for a fixed policy.
    pub fn policy_chain(&self, policy: &PolicyTable) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut p = vec![vec![0.0; self.n_states]; self.n_states];
        let mut r = vec![0.0; self.n_states];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                r[s] += pa * self.reward[s][a];
                for (dst, &t) in p[s].iter_mut().zip(&self.transition[s][a]) {
                    *dst += pa * t;
                }
            }
        }
        (p, r)
    }

    /// States that loop onto themselves with probability one and zero reward
    /// under every action.
    pub fn terminal_states(&self) -> Vec<bool> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions).all(|a| {
                    self.reward[s][a] == 0.0 && self.transition[s][a][s] == 1.0
                })
            })
            .collect()
    }

    pub(crate) fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::InvalidInput(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

fn renormalize(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= total;
    }
    // push the roundoff into the largest entry so the row sums to 1 tightly
    let residual = 1.0 - row.iter().sum::<f64>();
    if let Some(m) = row.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *m += residual;
    }
}

/// Stochastic policy table `probs[s][a]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolicyTable {
    probs: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = probs.first().map(|r| r.len()).unwrap_or(0);
        for (s, row) in probs.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n_actions || row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9
            {
                return Err(Error::InvalidInput(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(PolicyTable { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        PolicyTable {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    /// Random policy; each action is dropped with probability `drop_prob`
    /// (at least one action always survives).
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        drop_prob: f64,
        rng: &mut R,
    ) -> Self {
        let probs = (0..n_states)
            .map(|_| {
                let keep_always = rng.gen_range(0..n_actions);
                let mut row: Vec<f64> = (0..n_actions)
                    .map(|a| {
                        if a != keep_always && rng.gen::<f64>() < drop_prob {
                            0.0
                        } else {
                            rng.gen::<f64>() + 0.05
                        }
                    })
                    .collect();
                let total: f64 = row.iter().sum();
                for v in &mut row {
                    *v /= total;
                }
                row
            })
            .collect();
        PolicyTable { probs }
    }

    /// Softmax over `logits[s][a]`.
    pub fn softmax(logits: &[Vec<f64>]) -> Self {
        let probs = logits
            .iter()
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|&z| crate::math::exp(z - max)).collect();
                let total: f64 = e.iter().sum();
                e.into_iter().map(|v| v / total).collect()
            })
            .collect();
        PolicyTable { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.first().map(|r| r.len()).unwrap_or(0)
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// Mixture `(1 - t) * self + t * other`.
    pub fn mix(&self, other: &PolicyTable, t: f64) -> Self {
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect())
            .collect();
        PolicyTable { probs }
    }
}
