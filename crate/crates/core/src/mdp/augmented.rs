use alloc::vec;
use alloc::vec::Vec;

use super::exact::exact_occupancy;
use super::{PolicyTable, TabularMdp};
use crate::error::{Error, Result};

/// Occupancy threshold for support membership.
pub const DEFAULT_SUPPORT_TOL: f64 = 1e-12;

/// `M` restricted to the behavior support: every state-action outside it
/// moves to an absorbing zero-reward state appended as the last index.
#[derive(Debug, Clone)]
pub struct AugmentedMdp {
    pub mdp: TabularMdp,
    pub absorbing_state: usize,
    /// `d^mu(s) > tol`, over the original states.
    pub state_support: Vec<bool>,
    /// `state_support[s] && mu(a|s) > 0`.
    pub pair_support: Vec<Vec<bool>>,
}

impl AugmentedMdp {
    /// Appends a uniform row for the absorbing state.
    pub fn extend_policy(&self, policy: &PolicyTable) -> Result<PolicyTable> {
        let n_actions = self.mdp.n_actions();
        let mut rows = policy.rows().to_vec();
        if rows.len() + 1 != self.mdp.n_states() {
            return Err(Error::DimensionMismatch {
                context: "policy states before augmentation",
                expected: self.mdp.n_states() - 1,
                found: rows.len(),
            });
        }
        rows.push(vec![1.0 / n_actions as f64; n_actions]);
        PolicyTable::new(rows)
    }

    pub fn in_support(&self, s: usize, a: usize) -> bool {
        s < self.absorbing_state && self.pair_support[s][a]
    }
}

pub fn build_augmented_mdp(
    mdp: &TabularMdp,
    behavior: &PolicyTable,
    support_tol: f64,
) -> Result<AugmentedMdp> {
    mdp.check_policy(behavior)?;
    let d_mu = exact_occupancy(mdp, behavior)?;
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let state_support: Vec<bool> = d_mu.iter().map(|&d| d > support_tol).collect();
    let pair_support: Vec<Vec<bool>> = (0..n)
        .map(|s| (0..na).map(|a| state_support[s] && behavior.prob(s, a) > 0.0).collect())
        .collect();
    if !pair_support.iter().flatten().any(|&b| b) {
        return Err(Error::EmptySupport);
    }
    let abs = n;
    let mut transition = vec![vec![vec![0.0; n + 1]; na]; n + 1];
    let mut reward = vec![vec![0.0; na]; n + 1];
    for s in 0..n {
        for a in 0..na {
            if pair_support[s][a] {
                transition[s][a][..n].copy_from_slice(mdp.transition(s, a));
                reward[s][a] = mdp.reward(s, a);
            } else {
                transition[s][a][abs] = 1.0;
            }
        }
    }
    for a in 0..na {
        transition[abs][a][abs] = 1.0;
    }
    let mut p0 = mdp.initial_dist().to_vec();
    p0.push(0.0);
    let augmented = TabularMdp::new(transition, reward, mdp.gamma(), p0, mdp.horizon())?;
    Ok(AugmentedMdp {
        mdp: augmented,
        absorbing_state: abs,
        state_support,
        pair_support,
    })
}
