//! Ratio-based off-policy evaluation, Monte-Carlo ground truth and
//! checkpoint selection.

use alloc::vec::Vec;

use rand::RngCore;

use crate::actor::{ActorModel, CheckpointEvaluator};
use crate::data::{DiscountedSampler, PreparedData};
use crate::env::{sample_categorical, Environment, StatePolicy};
use crate::error::{ensure_finite, Error, Result};
use crate::math;
use crate::ratio::{importance_ratios, ratio_update_step, RatioLossKind, RatioModel, RowPolicy};
use crate::rng::{derive, tags};

/// Below this the weighted normalizer is treated as no overlap.
pub const MIN_NORMALIZER: f64 = 1e-8;

/// `sum_{t < horizon} gamma^t`.
pub fn horizon_discount_sum(gamma: f64, horizon: usize) -> f64 {
    let mut acc = 0.0;
    let mut g = 1.0;
    for _ in 0..horizon {
        acc += g;
        g *= gamma;
    }
    acc
}

/// Self-normalized estimate from per-row state ratios `w` and target
/// probabilities of the logged actions. Every row is weighted by
/// `gamma^t`, so the expectation over `d_gamma` is taken exactly on the
/// dataset.
pub fn oppe_estimate_from_weights(data: &PreparedData, w: &[f64], target_probs: &[f64], gamma: f64) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("evaluation dataset"));
    }
    if w.len() != n || target_probs.len() != n {
        return Err(Error::DimensionMismatch {
            context: "evaluation weights",
            expected: n,
            found: if w.len() != n { w.len() } else { target_probs.len() },
        });
    }
    ensure_finite(w, "state ratio")?;
    let rows: Vec<usize> = (0..n).collect();
    let rho = importance_ratios(data, &rows, target_probs)?;
    let mut pow = Vec::with_capacity(data.horizon);
    let mut g = 1.0;
    for _ in 0..data.horizon {
        pow.push(g);
        g *= gamma;
    }
    let (mut num, mut den, mut mass) = (0.0, 0.0, 0.0);
    for r in 0..n {
        let dt = pow[data.timesteps[r]];
        let v = dt * w[r] * rho[r];
        num += v * data.rewards[r];
        den += v;
        mass += dt;
    }
    let normalizer = den / mass;
    if !(normalizer >= MIN_NORMALIZER) {
        return Err(Error::DegenerateNormalizer { value: normalizer });
    }
    let est = num / den * horizon_discount_sum(gamma, data.horizon);
    if !est.is_finite() {
        return Err(Error::NonFinite { context: "evaluation estimate" });
    }
    Ok(est)
}

/// Estimate of `policy`'s return with the ratio model's `w`.
pub fn oppe_estimate(policy: &dyn RowPolicy, data: &PreparedData, ratio: &RatioModel, gamma: f64) -> Result<f64> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let w = ratio.predict_rows(data, &rows)?;
    let probs = policy.logged_action_probs(data, &rows)?;
    oppe_estimate_from_weights(data, &w, &probs, gamma)
}

/// Continues fitting a copy of `ratio` for `policy` on an evaluation
/// dataset, which must be prepared with the model's normalization.
pub fn refit_ratio(
    ratio: &RatioModel,
    policy: &dyn RowPolicy,
    data: &PreparedData,
    iterations: usize,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<RatioModel> {
    if data.normalization != ratio.normalization {
        return Err(Error::InvalidInput(
            "evaluation data must be normalized with the ratio model's statistics".into(),
        ));
    }
    let sampler = match ratio.loss {
        RatioLossKind::Average => DiscountedSampler::uniform(data.horizon)?,
        RatioLossKind::Discounted { gamma } => DiscountedSampler::new(gamma, data.horizon)?,
    };
    let mut model = ratio.clone();
    for _ in 0..iterations {
        ratio_update_step(&mut model, data, policy, &sampler, batch_size, rng)?;
    }
    Ok(model)
}

/// Summary of on-policy rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McResult {
    pub mean: f64,
    pub std: f64,
    pub n_episodes: usize,
    /// Set when a single episode makes the spread meaningless.
    pub degenerate_std: bool,
}

/// Mean and population std of `sum_t gamma^t r_t` over `n_episodes`
/// rollouts of at most `horizon` steps.
pub fn onpolicy_mc_eval(
    policy: &dyn StatePolicy,
    env: &mut dyn Environment,
    n_episodes: usize,
    horizon: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<McResult> {
    if n_episodes == 0 {
        return Err(Error::Empty("evaluation episodes"));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut state = env.reset(rng);
        let (mut ret, mut disc) = (0.0, 1.0);
        for _ in 0..horizon {
            let probs = policy.action_probs(&state)?;
            let step = env.step(sample_categorical(&probs, rng), rng)?;
            ret += disc * step.reward;
            disc *= gamma;
            state = step.next_state;
            if step.done {
                break;
            }
        }
        returns.push(ret);
    }
    let (mean, std) = math::mean_std(&returns);
    Ok(McResult {
        mean,
        std,
        n_episodes,
        degenerate_std: n_episodes == 1,
    })
}

/// Checkpoint evaluator running rollouts in a simulator. Update `u` uses
/// its own evaluation stream.
#[derive(Debug, Clone)]
pub struct MonteCarloEvaluator<E> {
    pub env: E,
    pub episodes: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl<E: Environment> CheckpointEvaluator for MonteCarloEvaluator<E> {
    fn evaluate(&mut self, actor: &ActorModel, update: usize) -> Result<(f64, f64)> {
        let mut rng = derive(self.seed, tags::EVAL, update as u64);
        let r = onpolicy_mc_eval(actor, &mut self.env, self.episodes, self.horizon, self.gamma, &mut rng)?;
        Ok((r.mean, r.std))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvaluationRecord {
    pub checkpoint: usize,
    pub oppe_estimate: f64,
    pub mc_estimate: Option<f64>,
    pub mc_std: Option<f64>,
    pub n_mc_episodes: usize,
}

/// Checkpoint with the largest estimate; ties go to the later checkpoint.
pub fn select_best(records: &[EvaluationRecord]) -> Result<usize> {
    let mut best: Option<&EvaluationRecord> = None;
    for r in records {
        if !r.oppe_estimate.is_finite() {
            return Err(Error::NonFinite { context: "evaluation estimate" });
        }
        best = match best {
            Some(b) if r.oppe_estimate < b.oppe_estimate => Some(b),
            Some(b) if r.oppe_estimate == b.oppe_estimate && r.checkpoint < b.checkpoint => Some(b),
            _ => Some(r),
        };
    }
    best.map(|r| r.checkpoint).ok_or(Error::Empty("evaluation records"))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "correlation inputs",
            expected: x.len(),
            found: y.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / math::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Pearson coefficient between estimates and ground truth, with the points
/// it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub coefficient: f64,
    /// `(checkpoint, oppe_estimate, mc_estimate)`.
    pub points: Vec<(usize, f64, f64)>,
}

pub fn correlation_report(records: &[EvaluationRecord]) -> Result<CorrelationReport> {
    let points: Vec<(usize, f64, f64)> = records
        .iter()
        .filter_map(|r| r.mc_estimate.map(|m| (r.checkpoint, r.oppe_estimate, m)))
        .collect();
    if points.len() < 3 {
        return Err(Error::InvalidInput(alloc::format!(
            "correlation needs at least 3 records with both estimates, got {}",
            points.len()
        )));
    }
    let x: Vec<f64> = points.iter().map(|p| p.1).collect();
    let y: Vec<f64> = points.iter().map(|p| p.2).collect();
    Ok(CorrelationReport {
        coefficient: pearson(&x, &y)?,
        points,
    })
}
