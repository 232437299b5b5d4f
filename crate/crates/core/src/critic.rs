//! Importance-weighted lambda-return value learning.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::data::{NormalizationStats, PreparedData};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{AdamState, DenseMatrix, Gradients, Head, MlpParams};
use crate::ratio::{importance_ratios, RowPolicy};

/// Per-step ratio cap inside the lambda recursion.
pub const RHO_CLIP: f64 = 10.0;

/// Linear-head network `V(s)` with its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    pub net: MlpParams,
    pub optimizer: AdamState,
    pub normalization: NormalizationStats,
}

impl CriticModel {
    pub fn new(
        layer_sizes: &[usize],
        learning_rate: f64,
        normalization: NormalizationStats,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if layer_sizes.last() != Some(&1) {
            return Err(Error::InvalidInput("critic network must have one output".into()));
        }
        let net = MlpParams::random(layer_sizes, Head::Linear, rng)?;
        let optimizer = AdamState::for_params(&net, learning_rate, 0.0);
        Ok(CriticModel {
            net,
            optimizer,
            normalization,
        })
    }

    /// `V` at normalized, row-major states.
    pub fn predict(&self, states: &[f64]) -> Result<Vec<f64>> {
        predict_values(&self.net, states)
    }
}

fn predict_values(net: &MlpParams, states: &[f64]) -> Result<Vec<f64>> {
    let dim = net.input_dim();
    let x = DenseMatrix::from_vec(states.len() / dim, dim, states.to_vec())?;
    Ok(net.predict(&x)?.into_vec())
}

/// Backward recursion over one trajectory:
///
/// `R_t = r_t + (1 - lambda) gamma V(s'_t) + lambda gamma rho_{t+1} R_{t+1}`,
///
/// with `rho` clipped at [`RHO_CLIP`] and both bootstrap terms dropped where
/// `stop[t]` is set (always at the last step).
pub fn lambda_returns(
    rewards: &[f64],
    next_values: &[f64],
    rho: &[f64],
    stop: &[bool],
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if next_values.len() != n || rho.len() != n || stop.len() != n {
        return Err(Error::InvalidInput("lambda-return inputs disagree in length".into()));
    }
    ensure_finite(rho, "importance ratio")?;
    ensure_finite(next_values, "bootstrap value")?;
    let mut out = vec![0.0; n];
    let mut next_return = 0.0;
    for t in (0..n).rev() {
        let r = if stop[t] || t + 1 == n {
            rewards[t]
        } else {
            let rho_next = rho[t + 1].min(RHO_CLIP);
            rewards[t] + (1.0 - lambda) * gamma * next_values[t] + lambda * gamma * rho_next * next_return
        };
        out[t] = r;
        next_return = r;
    }
    Ok(out)
}

/// `Q(s, a)` for the actor: the lambda return on behavior-supported pairs,
/// zero elsewhere.
pub fn masked_q(in_support: bool, lambda_return: f64) -> f64 {
    if in_support {
        lambda_return
    } else {
        0.0
    }
}

/// How lambda-return targets are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// `false` sets every ratio to 1 (on-policy regression).
    pub importance: bool,
}

fn row_ratios(data: &PreparedData, rows: &[usize], target: Option<&dyn RowPolicy>) -> Result<Vec<f64>> {
    match target {
        Some(t) => importance_ratios(data, rows, &t.logged_action_probs(data, rows)?),
        None => Ok(vec![1.0; rows.len()]),
    }
}

/// Lambda returns of every dataset row, bootstrapped from `net`.
pub fn dataset_lambda_returns(
    net: &MlpParams,
    data: &PreparedData,
    target: Option<&dyn RowPolicy>,
    cfg: ReturnConfig,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let values = predict_values(net, &data.next_states)?;
    let rho = if cfg.importance { row_ratios(data, &all, target)? } else { vec![1.0; data.len()] };
    let h = data.horizon;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.n_trajectories {
        let r = i * h..(i + 1) * h;
        out.extend(lambda_returns(
            &data.rewards[r.clone()],
            &values[r.clone()],
            &rho[r.clone()],
            &data.stop_bootstrap[r],
            cfg.lambda,
            cfg.gamma,
        )?);
    }
    Ok(out)
}

/// Lambda returns on selected rows. With `lambda = 0` only those rows'
/// bootstrap values are computed.
pub fn lambda_returns_for_rows(
    net: &MlpParams,
    data: &PreparedData,
    rows: &[usize],
    target: Option<&dyn RowPolicy>,
    cfg: ReturnConfig,
) -> Result<Vec<f64>> {
    if cfg.lambda == 0.0 {
        let mut buf = Vec::with_capacity(rows.len() * data.state_dim);
        data.gather_next_states(rows, &mut buf);
        let v = predict_values(net, &buf)?;
        ensure_finite(&v, "bootstrap value")?;
        return Ok(rows
            .iter()
            .zip(v)
            .map(|(&r, v)| if data.stop_bootstrap[r] { data.rewards[r] } else { data.rewards[r] + cfg.gamma * v })
            .collect());
    }
    let all = dataset_lambda_returns(net, data, target, cfg)?;
    Ok(rows.iter().map(|&r| all[r]).collect())
}

/// `l_c = mean rho (R - V(s))^2` on normalized row-major `states`, with the
/// parameter gradient. The targets are constants.
pub fn critic_loss(net: &MlpParams, states: &[f64], returns: &[f64], rho: &[f64]) -> Result<(f64, Gradients)> {
    let n = returns.len();
    if n == 0 {
        return Err(Error::Empty("critic batch"));
    }
    if rho.len() != n {
        return Err(Error::InvalidInput("critic batch arrays disagree in length".into()));
    }
    let dim = net.input_dim();
    let x = DenseMatrix::from_vec(n, dim, states.to_vec())?;
    let fwd = net.forward(&x)?;
    let v = fwd.output.as_slice();
    let mut loss = 0.0;
    let mut up = Vec::with_capacity(n);
    for i in 0..n {
        let res = returns[i] - v[i];
        loss += rho[i] * res * res;
        up.push(-2.0 * rho[i] * res / n as f64);
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "critic loss" });
    }
    let grads = net.param_gradients(&x, &fwd, &DenseMatrix::from_vec(n, 1, up)?)?;
    Ok((loss, grads))
}

/// One critic round: freeze the bootstrap network, then `n_steps` Adam steps
/// on uniformly drawn mini-batches. Returns the mean loss of the round (0 if
/// `n_steps` is 0).
pub fn critic_update_round(
    model: &mut CriticModel,
    data: &PreparedData,
    target: Option<&dyn RowPolicy>,
    cfg: ReturnConfig,
    n_steps: usize,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if n_steps == 0 {
        return Ok(0.0);
    }
    if batch_size == 0 {
        return Err(Error::Empty("critic batch"));
    }
    let frozen = model.net.clone();
    let full = if cfg.lambda == 0.0 {
        None
    } else {
        Some(dataset_lambda_returns(&frozen, data, target, cfg)?)
    };
    let mut total = 0.0;
    let mut states = Vec::with_capacity(batch_size * data.state_dim);
    for _ in 0..n_steps {
        let rows: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..data.len())).collect();
        let returns = match &full {
            Some(all) => rows.iter().map(|&r| all[r]).collect(),
            None => lambda_returns_for_rows(&frozen, data, &rows, target, cfg)?,
        };
        let rho = if cfg.importance { row_ratios(data, &rows, target)? } else { vec![1.0; rows.len()] };
        states.clear();
        data.gather_states(&rows, &mut states);
        let (loss, grads) = critic_loss(&model.net, &states, &returns, &rho)?;
        model.optimizer.step(&mut model.net, &grads, None)?;
        total += loss;
    }
    Ok(total / n_steps as f64)
}

/// On-policy regression (every ratio 1) for `iterations` steps, in rounds of
/// `steps_per_round` with the bootstrap refreshed between rounds.
pub fn warm_start_critic(
    model: &mut CriticModel,
    data: &PreparedData,
    lambda: f64,
    gamma: f64,
    iterations: usize,
    steps_per_round: usize,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let cfg = ReturnConfig {
        lambda,
        gamma,
        importance: false,
    };
    let per = steps_per_round.max(1);
    let mut done = 0;
    let mut last = 0.0;
    while done < iterations {
        let n = per.min(iterations - done);
        last = critic_update_round(model, data, None, cfg, n, batch_size, rng)?;
        done += n;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_differences, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_zero_is_one_step_td() {
        let r = [0.5, 1.0, 0.2, 0.7];
        let v = [2.0, -1.0, 0.4, 9.0];
        let rho = [3.0, 0.1, 2.0, 0.5];
        let stop = [false, false, false, false];
        let out = lambda_returns(&r, &v, &rho, &stop, 0.0, 0.9).unwrap();
        for t in 0..3 {
            assert_eq!(out[t], r[t] + 0.9 * v[t]);
        }
        assert_eq!(out[3], r[3]);
    }

    #[test]
    fn lambda_one_on_policy_is_monte_carlo() {
        let r = [1.0, 0.0, 2.0, 0.5, 0.25];
        let v = [7.0; 5];
        let out = lambda_returns(&r, &v, &[1.0; 5], &[false; 5], 1.0, 1.0).unwrap();
        let mut tail = 0.0;
        for t in (0..5).rev() {
            tail += r[t];
            assert_eq!(out[t], tail);
        }
    }

    #[test]
    fn three_step_hand_unroll() {
        let (l, g) = (0.5, 0.9);
        let r = [1.0, 0.5, 2.0];
        let v = [0.3, -0.2, 5.0];
        let rho = [0.7, 1.5, 0.4];
        let out = lambda_returns(&r, &v, &rho, &[false; 3], l, g).unwrap();
        let r2 = 2.0;
        let r1 = 0.5 + (1.0 - l) * g * -0.2 + l * g * 0.4 * r2;
        let r0 = 1.0 + (1.0 - l) * g * 0.3 + l * g * 1.5 * r1;
        assert!((out[2] - r2).abs() < 1e-15);
        assert!((out[1] - r1).abs() < 1e-15);
        assert!((out[0] - r0).abs() < 1e-15);
    }

    #[test]
    fn stop_flags_cut_the_bootstrap() {
        let out = lambda_returns(&[1.0, 1.0, 0.0], &[5.0; 3], &[1.0; 3], &[false, true, true], 0.5, 1.0).unwrap();
        assert_eq!(out[1], 1.0);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[0], 1.0 + 0.5 * 5.0 + 0.5 * 1.0);
    }

    #[test]
    fn ratio_clip_applies_inside_recursion() {
        let out = lambda_returns(&[0.0, 1.0], &[0.0; 2], &[1.0, 50.0], &[false; 2], 1.0, 1.0).unwrap();
        assert_eq!(out[0], RHO_CLIP);
    }

    #[test]
    fn non_finite_ratio_fails() {
        assert!(lambda_returns(&[0.0], &[0.0], &[f64::NAN], &[false], 0.5, 1.0).is_err());
    }

    #[test]
    fn masked_q_cases() {
        assert_eq!(masked_q(true, 2.5), 2.5);
        assert_eq!(masked_q(false, 2.5), 0.0);
    }

    fn small_net(rng: &mut ChaCha8Rng) -> MlpParams {
        MlpParams::random(&[3, 5, 1], Head::Linear, rng).unwrap()
    }

    #[test]
    fn critic_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = small_net(&mut rng);
        let states = [0.3, -0.2, 0.9];
        let v = predict_values(&net, &states).unwrap();
        let (loss, g) = critic_loss(&net, &states, &v, &[1.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&x| x == 0.0));
        let (loss, _) = critic_loss(&net, &states, &[v[0] + 0.5], &[2.0]).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = small_net(&mut rng);
        let n = 6;
        let states: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let returns: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let rho: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..3.0)).collect();
        let (_, g) = critic_loss(&net, &states, &returns, &rho).unwrap();
        let mut f = |p: &[f64]| {
            let mut m = net.clone();
            m.set_flat(p).unwrap();
            critic_loss(&m, &states, &returns, &rho).unwrap().0
        };
        let num = central_differences(&net.flatten(), &mut f, 1e-5);
        for (a, b) in g.flatten().iter().zip(&num) {
            assert!(relative_error(*a, *b) < 1e-4);
        }
    }
}
