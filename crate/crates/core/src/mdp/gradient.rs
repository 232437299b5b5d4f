use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::exact::{exact_occupancy, exact_value};
use super::{PolicyTable, TabularMdp};
use crate::error::{Error, Result};

/// Differentiable map from parameters `theta` to a policy table.
pub trait PolicyFamily {
    fn n_params(&self) -> usize;

    fn policy(&self, theta: &[f64]) -> Result<PolicyTable>;

    /// `jac[k][s][a] = d pi(a|s) / d theta_k`.
    fn jacobian(&self, theta: &[f64]) -> Result<Vec<Vec<Vec<f64>>>>;
}

fn check_len(theta: &[f64], n: usize) -> Result<()> {
    if theta.len() != n {
        return Err(Error::DimensionMismatch {
            context: "policy parameters",
            expected: n,
            found: theta.len(),
        });
    }
    Ok(())
}

/// Independent softmax per state; `theta[s * n_actions + a]` is the logit.
#[derive(Debug, Clone, Copy)]
pub struct TabularSoftmax {
    pub n_states: usize,
    pub n_actions: usize,
}

impl TabularSoftmax {
    fn logits(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        theta.chunks(self.n_actions).map(|c| c.to_vec()).collect()
    }
}

impl PolicyFamily for TabularSoftmax {
    fn n_params(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn policy(&self, theta: &[f64]) -> Result<PolicyTable> {
        check_len(theta, self.n_params())?;
        Ok(PolicyTable::softmax(&self.logits(theta)))
    }

    fn jacobian(&self, theta: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
        let pi = self.policy(theta)?;
        let (ns, na) = (self.n_states, self.n_actions);
        let mut jac = vec![vec![vec![0.0; na]; ns]; ns * na];
        for s in 0..ns {
            for b in 0..na {
                let k = s * na + b;
                for a in 0..na {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    jac[k][s][a] = pi.prob(s, a) * (delta - pi.prob(s, b));
                }
            }
        }
        Ok(jac)
    }
}

/// One scalar `alpha` shared by a set of two-action states:
/// `pi(0|s) = alpha`, `pi(1|s) = 1 - alpha` there, and a fixed table
/// elsewhere.
#[derive(Debug, Clone)]
pub struct AliasedFamily {
    base: PolicyTable,
    aliased: Vec<usize>,
}

impl AliasedFamily {
    pub fn new(base: PolicyTable, aliased: Vec<usize>) -> Result<Self> {
        if base.n_actions() != 2 {
            return Err(Error::InvalidInput("aliased family needs two actions".into()));
        }
        if let Some(&s) = aliased.iter().find(|&&s| s >= base.n_states()) {
            return Err(Error::InvalidInput(format!("aliased state {s} out of range")));
        }
        Ok(AliasedFamily { base, aliased })
    }

    pub fn aliased_states(&self) -> &[usize] {
        &self.aliased
    }
}

impl PolicyFamily for AliasedFamily {
    fn n_params(&self) -> usize {
        1
    }

    fn policy(&self, theta: &[f64]) -> Result<PolicyTable> {
        check_len(theta, 1)?;
        let alpha = theta[0];
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidInput(format!("alpha = {alpha} outside [0, 1]")));
        }
        let mut rows = self.base.rows().to_vec();
        for &s in &self.aliased {
            rows[s] = vec![alpha, 1.0 - alpha];
        }
        PolicyTable::new(rows)
    }

    fn jacobian(&self, theta: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
        check_len(theta, 1)?;
        let mut jac = vec![vec![vec![0.0; 2]; self.base.n_states()]];
        for &s in &self.aliased {
            jac[0][s] = vec![1.0, -1.0];
        }
        Ok(jac)
    }
}

fn assemble(
    weights: &[f64],
    jac: &[Vec<Vec<f64>>],
    q: &[Vec<f64>],
) -> Vec<f64> {
    jac.iter()
        .map(|jk| {
            jk.iter()
                .zip(weights)
                .zip(q)
                .map(|((row, &d), qs)| d * row.iter().zip(qs).map(|(j, qv)| j * qv).sum::<f64>())
                .sum()
        })
        .collect()
}

/// `sum_s d^pi(s) sum_a dpi(a|s)/dtheta Q^pi(s, a)` with normalized `d^pi`;
/// equals the gradient of the normalized return.
pub fn exact_policy_gradient<F: PolicyFamily + ?Sized>(
    mdp: &TabularMdp,
    family: &F,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let pi = family.policy(theta)?;
    let d = exact_occupancy(mdp, &pi)?;
    let vf = exact_value(mdp, &pi)?;
    Ok(assemble(&d, &family.jacobian(theta)?, &vf.q))
}

/// The same sum with the behavior occupancy `d^mu` in place of `d^pi`.
pub fn offpac_gradient_exact<F: PolicyFamily + ?Sized>(
    mdp: &TabularMdp,
    behavior: &PolicyTable,
    family: &F,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let pi = family.policy(theta)?;
    let d_mu = exact_occupancy(mdp, behavior)?;
    let vf = exact_value(mdp, &pi)?;
    Ok(assemble(&d_mu, &family.jacobian(theta)?, &vf.q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::expected_return;
    use crate::nn::gradcheck::{central_differences, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_return<F: PolicyFamily>(mdp: &TabularMdp, family: &F, theta: &[f64]) -> Vec<f64> {
        let mut f = |t: &[f64]| expected_return(mdp, &family.policy(t).unwrap(), true).unwrap();
        central_differences(theta, &mut f, 1e-6)
    }

    #[test]
    fn bandit_optimum_has_zero_gradient() {
        // one state, two arms with equal reward: every policy is optimal
        let mdp = TabularMdp::new(
            vec![vec![vec![1.0], vec![1.0]]],
            vec![vec![0.5, 0.5]],
            0.9,
            vec![1.0],
            None,
        )
        .unwrap();
        let fam = TabularSoftmax { n_states: 1, n_actions: 2 };
        let g = exact_policy_gradient(&mdp, &fam, &[0.3, -1.2]).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let fam = TabularSoftmax { n_states: 2, n_actions: 3 };
        let theta = [0.1, -0.4, 0.7, 1.1, 0.0, -0.3];
        let jac = fam.jacobian(&theta).unwrap();
        for s in 0..2 {
            for a in 0..3 {
                let mut f = |t: &[f64]| fam.policy(t).unwrap().prob(s, a);
                let num = central_differences(&theta, &mut f, 1e-6);
                for k in 0..6 {
                    assert!((jac[k][s][a] - num[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn offpac_equals_exact_when_behavior_is_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mdp = TabularMdp::random(4, 3, 0.9, 3, None, &mut rng).unwrap();
        let fam = TabularSoftmax { n_states: 4, n_actions: 3 };
        let theta: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pi = fam.policy(&theta).unwrap();
        let g = exact_policy_gradient(&mdp, &fam, &theta).unwrap();
        let h = offpac_gradient_exact(&mdp, &pi, &fam, &theta).unwrap();
        for (a, b) in g.iter().zip(&h) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_wrong_parameter_count() {
        let fam = TabularSoftmax { n_states: 2, n_actions: 2 };
        assert!(matches!(
            fam.policy(&[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tabular_softmax_gradient_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = TabularMdp::random(4, 2, 0.8, 3, None, &mut rng).unwrap();
            let fam = TabularSoftmax { n_states: 4, n_actions: 2 };
            let theta: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let g = exact_policy_gradient(&mdp, &fam, &theta).unwrap();
            let num = fd_return(&mdp, &fam, &theta);
            for (a, n) in g.iter().zip(&num) {
                prop_assert!(relative_error(*a, *n) <= 1e-6, "analytic {a} numeric {n}");
            }
        }
    }
}
