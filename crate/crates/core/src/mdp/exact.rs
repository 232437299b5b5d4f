use alloc::vec;
use alloc::vec::Vec;

use super::linalg::solve;
use super::{PolicyTable, TabularMdp};
use crate::error::{Error, Result};
use crate::math;

/// Power iteration for discounted occupancies stops once `gamma^t` falls
/// below this.
pub const OCCUPANCY_TAIL_TOL: f64 = 1e-10;
const OCCUPANCY_MAX_ITERS: usize = 1_000_000;

/// Exact `V[s]` and `Q[s][a]` of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

/// Solves `V = r_pi + gamma P_pi V`.
///
/// For `gamma < 1` this is a direct linear solve. For `gamma = 1` states
/// whose reachable set carries no reward are pinned to zero and the rest must
/// be transient; a closed class that keeps paying reward makes the sum diverge
/// and is rejected.
pub fn exact_value(mdp: &TabularMdp, policy: &PolicyTable) -> Result<ValueFunction> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let (p, r) = mdp.policy_chain(policy);
    let v = if gamma < 1.0 {
        let mut a = vec![0.0; n * n];
        for s in 0..n {
            for s2 in 0..n {
                a[s * n + s2] = -gamma * p[s][s2];
            }
            a[s * n + s] += 1.0;
        }
        solve(a, r.clone())?
    } else {
        undiscounted_values(&p, &r)?
    };
    let q = (0..n)
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    let next: f64 = mdp
                        .transition(s, a)
                        .iter()
                        .zip(&v)
                        .map(|(t, vv)| t * vv)
                        .sum();
                    mdp.reward(s, a) + gamma * next
                })
                .collect()
        })
        .collect();
    Ok(ValueFunction { v, q })
}

fn undiscounted_values(p: &[Vec<f64>], r: &[f64]) -> Result<Vec<f64>> {
    let n = r.len();
    let mut dead = vec![false; n];
    for s in 0..n {
        let mut seen = vec![false; n];
        let mut stack = vec![s];
        seen[s] = true;
        let mut rewarding = false;
        while let Some(u) = stack.pop() {
            if r[u] != 0.0 {
                rewarding = true;
                break;
            }
            for (v, &pv) in p[u].iter().enumerate() {
                if pv > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        dead[s] = !rewarding;
    }
    // Every live state must be able to reach a dead one, otherwise it sits in
    // a closed class with reward.
    for s in 0..n {
        if dead[s] {
            continue;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![s];
        seen[s] = true;
        let mut escapes = false;
        while let Some(u) = stack.pop() {
            if dead[u] {
                escapes = true;
                break;
            }
            for (v, &pv) in p[u].iter().enumerate() {
                if pv > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if !escapes {
            return Err(Error::RecurrentReward { state: s });
        }
    }
    let live: Vec<usize> = (0..n).filter(|&s| !dead[s]).collect();
    let m = live.len();
    let mut a = vec![0.0; m * m];
    let mut b = vec![0.0; m];
    for (i, &s) in live.iter().enumerate() {
        for (j, &s2) in live.iter().enumerate() {
            a[i * m + j] = -p[s][s2];
        }
        a[i * m + i] += 1.0;
        b[i] = r[s];
    }
    let x = solve(a, b)?;
    let mut v = vec![0.0; n];
    for (i, &s) in live.iter().enumerate() {
        v[s] = x[i];
    }
    Ok(v)
}

/// `sum_{t < T} gamma^t` for the truncation used by [`exact_occupancy`].
pub fn occupancy_normalizer(mdp: &TabularMdp) -> f64 {
    if mdp.gamma() < 1.0 {
        1.0 / (1.0 - mdp.gamma())
    } else {
        mdp.horizon().unwrap_or(1) as f64
    }
}

/// Divisor that turns an un-normalized value into the normalized return
/// convention (`1 / (1 - gamma)` or the horizon when `gamma = 1`).
pub fn return_normalizer(mdp: &TabularMdp) -> f64 {
    occupancy_normalizer(mdp)
}

/// `sum_s p0(s) V(s)`, optionally divided by [`return_normalizer`].
pub fn expected_return(mdp: &TabularMdp, policy: &PolicyTable, normalized: bool) -> Result<f64> {
    let vf = exact_value(mdp, policy)?;
    let r: f64 = mdp.initial_dist().iter().zip(&vf.v).map(|(p, v)| p * v).sum();
    Ok(if normalized { r / return_normalizer(mdp) } else { r })
}

/// Normalized occupancy `d(s) = sum_t g^t d_t(s) / sum_t g^t`.
///
/// Discounted chains are iterated until `gamma^t < OCCUPANCY_TAIL_TOL`;
/// undiscounted chains average the first `horizon` steps.
pub fn exact_occupancy(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let (p, _) = mdp.policy_chain(policy);
    let steps = if gamma < 1.0 {
        let needed = math::ln(OCCUPANCY_TAIL_TOL) / math::ln(gamma);
        let needed = libm::ceil(needed) as usize + 1;
        if needed > OCCUPANCY_MAX_ITERS {
            return Err(Error::NoConvergence {
                iterations: OCCUPANCY_MAX_ITERS,
                tail: math::powi(gamma, OCCUPANCY_MAX_ITERS),
            });
        }
        needed
    } else {
        mdp.horizon().ok_or_else(|| {
            Error::InvalidMdp("undiscounted occupancy needs a horizon".into())
        })?
    };
    let mut dt = mdp.initial_dist().to_vec();
    let mut acc = vec![0.0; n];
    let mut weight = 1.0;
    let mut total = 0.0;
    let mut next = vec![0.0; n];
    for _ in 0..steps {
        for (a, &d) in acc.iter_mut().zip(&dt) {
            *a += weight * d;
        }
        total += weight;
        next.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..n {
            if dt[s] == 0.0 {
                continue;
            }
            for (dst, &t) in next.iter_mut().zip(&p[s]) {
                *dst += dt[s] * t;
            }
        }
        core::mem::swap(&mut dt, &mut next);
        weight *= gamma;
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(acc)
}
