//! Behavior cloning, the corrected and uncorrected actor gradients and the
//! alternating training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::critic::{critic_update_round, lambda_returns_for_rows, masked_q, warm_start_critic, CriticModel, ReturnConfig};
use crate::data::{DiscountedSampler, NormalizationStats, PreparedData};
use crate::env::{one_hot, StatePolicy};
use crate::error::{ensure_finite, Error, Result};
use crate::math;
use crate::mdp::PolicyTable;
use crate::nn::{entropy_of_policy, AdamState, DenseMatrix, Gradients, Head, Layer, MlpParams};
use crate::ratio::{importance_ratios, ratio_update_step, KernelConfig, RatioLossKind, RatioModel, RowPolicy};
use crate::rng::{derive, tags};

/// Softmax policy network with its optimizer and an optional mask of
/// trainable parameters (canonical flat order).
#[derive(Debug, Clone, PartialEq)]
pub struct ActorModel {
    pub net: MlpParams,
    pub optimizer: AdamState,
    pub normalization: NormalizationStats,
    pub trainable: Option<Vec<bool>>,
}

impl ActorModel {
    pub fn new(
        layer_sizes: &[usize],
        learning_rate: f64,
        normalization: NormalizationStats,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let net = MlpParams::random(layer_sizes, Head::Softmax, rng)?;
        Self::from_net(net, learning_rate, normalization, None)
    }

    pub fn from_net(
        net: MlpParams,
        learning_rate: f64,
        normalization: NormalizationStats,
        trainable: Option<Vec<bool>>,
    ) -> Result<Self> {
        if net.head() != Head::Softmax {
            return Err(Error::InvalidInput("actor network needs a softmax head".into()));
        }
        if net.input_dim() != normalization.dim() {
            return Err(Error::DimensionMismatch {
                context: "actor normalization",
                expected: net.input_dim(),
                found: normalization.dim(),
            });
        }
        if let Some(mask) = &trainable {
            if mask.len() != net.n_params() {
                return Err(Error::DimensionMismatch {
                    context: "trainable mask",
                    expected: net.n_params(),
                    found: mask.len(),
                });
            }
        }
        let optimizer = AdamState::for_params(&net, learning_rate, 0.0);
        Ok(ActorModel {
            net,
            optimizer,
            normalization,
            trainable,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim()
    }

    /// Fresh Adam moments at the same learning rate.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamState::for_params(&self.net, self.optimizer.learning_rate, self.optimizer.weight_decay);
    }

    /// Action probabilities at normalized, row-major states.
    pub fn probs_normalized(&self, states: &[f64]) -> Result<DenseMatrix> {
        let dim = self.net.input_dim();
        let x = DenseMatrix::from_vec(states.len() / dim.max(1), dim, states.to_vec())?;
        self.net.predict(&x)
    }

    /// The policy read at every one-hot state of an `n_states` tabular MDP.
    pub fn policy_table(&self, n_states: usize) -> Result<PolicyTable> {
        let mut buf = Vec::with_capacity(n_states * n_states);
        for s in 0..n_states {
            buf.extend(self.normalization.normalize(&one_hot(n_states, s)));
        }
        let p = self.probs_normalized(&buf)?;
        PolicyTable::new((0..n_states).map(|s| p.row(s).to_vec()).collect())
    }

    fn step(&mut self, grads: &Gradients) -> Result<()> {
        self.optimizer.step(&mut self.net, grads, self.trainable.as_deref())
    }
}

impl RowPolicy for ActorModel {
    fn logged_action_probs(&self, data: &PreparedData, rows: &[usize]) -> Result<Vec<f64>> {
        let mut buf = Vec::with_capacity(rows.len() * data.state_dim);
        data.gather_states(rows, &mut buf);
        let p = self.probs_normalized(&buf)?;
        Ok(rows.iter().enumerate().map(|(i, &r)| p.row(i)[data.actions[r]]).collect())
    }
}

impl StatePolicy for ActorModel {
    fn action_probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let x = self.normalization.normalize(state);
        Ok(self.probs_normalized(&x)?.into_vec())
    }
}

/// Tabular actor over one-hot inputs whose states are tied in groups.
///
/// A frozen first layer turns the normalized one-hot input back into group
/// indicators; the output layer holds one logit column per group. Groups
/// given fixed logits are frozen, the rest start at zero and are trainable.
pub fn grouped_tabular_actor(
    n_states: usize,
    n_actions: usize,
    groups: &[Vec<usize>],
    fixed_logits: &[Option<Vec<f64>>],
    learning_rate: f64,
    normalization: NormalizationStats,
) -> Result<ActorModel> {
    if groups.len() != fixed_logits.len() {
        return Err(Error::InvalidInput("one fixed-logit entry per group is required".into()));
    }
    if normalization.dim() != n_states {
        return Err(Error::DimensionMismatch {
            context: "grouped actor normalization",
            expected: n_states,
            found: normalization.dim(),
        });
    }
    let g = groups.len();
    let mut w1 = DenseMatrix::zeros(g, n_states);
    let mut b1 = DenseMatrix::zeros(1, g);
    for (k, members) in groups.iter().enumerate() {
        for &s in members {
            if s >= n_states {
                return Err(Error::InvalidInput(format!("group member {s} out of range")));
            }
            w1.row_mut(k)[s] = normalization.std[s];
            b1.row_mut(0)[k] += normalization.mean[s];
        }
    }
    let mut w2 = DenseMatrix::zeros(n_actions, g);
    for (k, fixed) in fixed_logits.iter().enumerate() {
        if let Some(l) = fixed {
            if l.len() != n_actions {
                return Err(Error::DimensionMismatch {
                    context: "fixed logits",
                    expected: n_actions,
                    found: l.len(),
                });
            }
            for a in 0..n_actions {
                w2.row_mut(a)[k] = l[a];
            }
        }
    }
    let net = MlpParams::from_layers(
        vec![
            Layer { weight: w1, bias: b1 },
            Layer {
                weight: w2,
                bias: DenseMatrix::zeros(1, n_actions),
            },
        ],
        Head::Softmax,
    )?;
    let mut mask = vec![false; g * n_states + g];
    for _ in 0..n_actions {
        mask.extend(fixed_logits.iter().map(|f| f.is_none()));
    }
    mask.extend(core::iter::repeat(false).take(n_actions));
    ActorModel::from_net(net, learning_rate, normalization, Some(mask))
}

/// Actor for the aliased example: `s0` pinned to LEFT, `{s1, s2}` and
/// `{s3, s4}` each sharing one trainable distribution.
pub fn hard_example_actor(learning_rate: f64, normalization: NormalizationStats) -> Result<ActorModel> {
    use crate::mdp::hard_example::{S0, S1, S2, S3, S4, TERMINAL};
    grouped_tabular_actor(
        TERMINAL + 1,
        2,
        &[vec![S0], vec![S1, S2], vec![S3, S4]],
        &[Some(vec![10.0, -10.0]), None, None],
        learning_rate,
        normalization,
    )
}

/// Negative log-likelihood of the logged actions on `Logged` rows, one Adam
/// step per iteration. Returns the last batch loss.
pub fn behavior_clone(
    actor: &mut ActorModel,
    data: &PreparedData,
    iterations: usize,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let logged: Vec<usize> = (0..data.len()).filter(|&r| data.in_support[r]).collect();
    if logged.is_empty() {
        return Err(Error::Empty("logged transitions"));
    }
    if batch_size == 0 {
        return Err(Error::Empty("behavior-cloning batch"));
    }
    let mut last = 0.0;
    let mut buf = Vec::with_capacity(batch_size * data.state_dim);
    for _ in 0..iterations {
        let rows: Vec<usize> = (0..batch_size).map(|_| logged[rng.gen_range(0..logged.len())]).collect();
        buf.clear();
        data.gather_states(&rows, &mut buf);
        let x = DenseMatrix::from_vec(rows.len(), data.state_dim, core::mem::take(&mut buf))?;
        let fwd = actor.net.forward(&x)?;
        let n = rows.len() as f64;
        let mut dz = fwd.output.clone();
        let mut loss = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let a = data.actions[r];
            loss -= math::ln(fwd.output.row(i)[a].max(f64::MIN_POSITIVE));
            let row = dz.row_mut(i);
            row[a] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n);
        }
        last = loss / n;
        if !last.is_finite() {
            return Err(Error::NonFinite { context: "behavior-cloning loss" });
        }
        let grads = actor.net.backward_logits(&x, &fwd, dz)?;
        actor.step(&grads)?;
        buf = x.into_vec();
    }
    Ok(last)
}

/// Result of one actor gradient evaluation.
#[derive(Debug, Clone)]
pub struct ActorGradient {
    /// Gradient of the negated surrogate, ready for descent; masked.
    pub grads: Gradients,
    pub mean_entropy: f64,
    pub z_w: f64,
    pub norm: f64,
}

/// `-(1/B) sum_i [ (w_i / z_w) rho_i Q_i grad log pi(a_i|s_i) + beta grad H_i ]`
/// with `z_w` the batch mean of `w`. `w`, `rho` and `Q` are constants.
pub fn actor_gradient(
    actor: &ActorModel,
    data: &PreparedData,
    rows: &[usize],
    w: &[f64],
    q: &[f64],
    entropy_coefficient: f64,
) -> Result<ActorGradient> {
    let b = rows.len();
    if b == 0 {
        return Err(Error::Empty("actor batch"));
    }
    if w.len() != b || q.len() != b {
        return Err(Error::InvalidInput("actor batch arrays disagree in length".into()));
    }
    ensure_finite(w, "state ratio")?;
    ensure_finite(q, "action value")?;
    let z_w = w.iter().sum::<f64>() / b as f64;
    if !(z_w > 0.0) || !z_w.is_finite() {
        return Err(Error::DegenerateNormalizer { value: z_w });
    }
    let mut buf = Vec::with_capacity(b * data.state_dim);
    data.gather_states(rows, &mut buf);
    let x = DenseMatrix::from_vec(b, data.state_dim, buf)?;
    let fwd = actor.net.forward(&x)?;
    let p = &fwd.output;
    let logged: Vec<f64> = rows.iter().enumerate().map(|(i, &r)| p.row(i)[data.actions[r]]).collect();
    let rho = importance_ratios(data, rows, &logged)?;
    let (h, dh) = entropy_of_policy(p);
    let mut dz = DenseMatrix::zeros(b, p.cols());
    for (i, &r) in rows.iter().enumerate() {
        let c = (w[i] / z_w) * rho[i] * q[i];
        let a = data.actions[r];
        let (pi, dhi) = (p.row(i), dh.row(i));
        for (k, g) in dz.row_mut(i).iter_mut().enumerate() {
            let dlog = if k == a { 1.0 - pi[k] } else { -pi[k] };
            *g = -(c * dlog + entropy_coefficient * dhi[k]) / b as f64;
        }
    }
    let mut grads = actor.net.backward_logits(&x, &fwd, dz)?;
    if let Some(mask) = &actor.trainable {
        grads.apply_mask(mask);
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite { context: "actor gradient" });
    }
    let norm = grads.norm();
    Ok(ActorGradient {
        grads,
        mean_entropy: h.iter().sum::<f64>() / b as f64,
        z_w,
        norm,
    })
}

/// The same estimator with every state ratio fixed to 1.
pub fn offpac_actor_gradient(
    actor: &ActorModel,
    data: &PreparedData,
    rows: &[usize],
    q: &[f64],
    entropy_coefficient: f64,
) -> Result<ActorGradient> {
    actor_gradient(actor, data, rows, &vec![1.0; rows.len()], q, entropy_coefficient)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Algorithm {
    Opposd,
    OffPac,
}

/// Which objective the ratio and the actor sampling follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DiscountVariant {
    /// Average-visitation ratio loss, uniform timesteps everywhere.
    Average,
    /// Discounted ratio loss and `d_gamma` ratio batches; uniform actor batches.
    DiscountedWOnly,
    /// `d_gamma` for both the ratio and the actor batches.
    DiscountedFull,
}

/// Hyper-parameters of a training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub discount_variant: DiscountVariant,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coefficient: f64,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub ratio_learning_rate: f64,
    pub ratio_weight_decay: f64,
    pub actor_batch_size: usize,
    pub critic_batch_size: usize,
    pub ratio_batch_size: usize,
    /// Critic steps per actor update.
    pub critic_steps: usize,
    /// Ratio steps per actor update.
    pub ratio_steps: usize,
    pub bc_iterations: usize,
    pub warm_critic_iterations: usize,
    pub warm_ratio_iterations: usize,
    pub total_actor_updates: usize,
    pub checkpoint_interval: usize,
    /// Smoothing applied to a dataset before training; 0 leaves it as is.
    pub epsilon_smoothing: f64,
    /// Hidden widths shared by the actor, critic and ratio networks.
    pub hidden_layers: Vec<usize>,
    /// `None` selects the median heuristic.
    pub kernel_bandwidth: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Opposd,
            discount_variant: DiscountVariant::Average,
            gamma: 1.0,
            lambda: 0.0,
            entropy_coefficient: 0.01,
            actor_learning_rate: 1e-3,
            critic_learning_rate: 1e-3,
            ratio_learning_rate: 1e-3,
            ratio_weight_decay: 1e-5,
            actor_batch_size: 5000,
            critic_batch_size: 5000,
            ratio_batch_size: 200,
            critic_steps: 10,
            ratio_steps: 50,
            bc_iterations: 2000,
            warm_critic_iterations: 500,
            warm_ratio_iterations: 500,
            total_actor_updates: 10_000,
            checkpoint_interval: 1000,
            epsilon_smoothing: 0.0,
            hidden_layers: vec![32],
            kernel_bandwidth: None,
            seed: 0,
        }
    }
}

fn bad(field: &'static str, reason: &str) -> Error {
    Error::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

impl TrainConfig {
    /// Settings for the five-state aliased example.
    pub fn hard_example() -> Self {
        TrainConfig {
            entropy_coefficient: 0.1,
            actor_learning_rate: 1e-2,
            critic_learning_rate: 1e-2,
            ratio_learning_rate: 1e-2,
            actor_batch_size: 500,
            critic_batch_size: 500,
            ratio_batch_size: 200,
            critic_steps: 5,
            ratio_steps: 10,
            bc_iterations: 500,
            warm_critic_iterations: 500,
            warm_ratio_iterations: 500,
            total_actor_updates: 600,
            checkpoint_interval: 100,
            hidden_layers: vec![16],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(bad("gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(bad("lambda", "must lie in [0, 1]"));
        }
        if !(self.entropy_coefficient >= 0.0) || !self.entropy_coefficient.is_finite() {
            return Err(bad("entropy_coefficient", "must be a non-negative number"));
        }
        for (field, v) in [
            ("actor_learning_rate", self.actor_learning_rate),
            ("critic_learning_rate", self.critic_learning_rate),
            ("ratio_learning_rate", self.ratio_learning_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.epsilon_smoothing) {
            return Err(bad("epsilon_smoothing", "must lie in [0, 1)"));
        }
        if !(self.ratio_weight_decay >= 0.0) {
            return Err(bad("ratio_weight_decay", "must be non-negative"));
        }
        for (field, v) in [
            ("actor_batch_size", self.actor_batch_size),
            ("critic_batch_size", self.critic_batch_size),
            ("ratio_batch_size", self.ratio_batch_size),
            ("checkpoint_interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                return Err(bad(field, "must be at least 1"));
            }
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(bad("hidden_layers", "widths must be at least 1"));
        }
        if let Some(h) = self.kernel_bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(bad("kernel_bandwidth", "must be positive"));
            }
        }
        if self.discount_variant != DiscountVariant::Average && self.gamma >= 1.0 {
            return Err(bad("discount_variant", "discounted variants need gamma < 1"));
        }
        Ok(())
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden_layers.len() + 2);
        s.push(input);
        s.extend_from_slice(&self.hidden_layers);
        s.push(output);
        s
    }
}

/// Ratio loss and mini-batch samplers chosen by a variant.
#[derive(Debug, Clone)]
pub struct VariantPlan {
    pub ratio_loss: RatioLossKind,
    pub ratio_sampler: DiscountedSampler,
    pub actor_sampler: DiscountedSampler,
}

pub fn discount_variant_dispatch(config: &TrainConfig, horizon: usize) -> Result<VariantPlan> {
    config.validate()?;
    let uniform = DiscountedSampler::uniform(horizon)?;
    Ok(match config.discount_variant {
        DiscountVariant::Average => {
            if config.gamma < 1.0 {
                log::warn!("average variant ignores gamma = {} in the ratio loss", config.gamma);
            }
            VariantPlan {
                ratio_loss: RatioLossKind::Average,
                ratio_sampler: uniform.clone(),
                actor_sampler: uniform,
            }
        }
        DiscountVariant::DiscountedWOnly => VariantPlan {
            ratio_loss: RatioLossKind::Discounted { gamma: config.gamma },
            ratio_sampler: DiscountedSampler::new(config.gamma, horizon)?,
            actor_sampler: uniform,
        },
        DiscountVariant::DiscountedFull => {
            let d = DiscountedSampler::new(config.gamma, horizon)?;
            VariantPlan {
                ratio_loss: RatioLossKind::Discounted { gamma: config.gamma },
                ratio_sampler: d.clone(),
                actor_sampler: d,
            }
        }
    })
}

/// Everything a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub actor: ActorModel,
    pub critic: CriticModel,
    pub ratio: RatioModel,
    pub completed_updates: usize,
}

/// One line of the metrics log. Row 0 describes the warm start.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRow {
    pub actor_update: usize,
    pub ratio_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub grad_norm: Option<f64>,
    pub z_w: Option<f64>,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
}

/// Receives metrics as they are produced and the state at each checkpoint.
pub trait CheckpointSink {
    fn record_metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn save(&mut self, state: &TrainState, metrics: &MetricsRow) -> Result<()>;
}

/// Scores a policy at a checkpoint, returning `(mean, std)`.
pub trait CheckpointEvaluator {
    fn evaluate(&mut self, actor: &ActorModel, update: usize) -> Result<(f64, f64)>;
}

/// Keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    pub checkpoints: Vec<(TrainState, MetricsRow)>,
    pub metrics: Vec<MetricsRow>,
}

impl CheckpointSink for MemoryStore {
    fn record_metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.push(row.clone());
        Ok(())
    }

    fn save(&mut self, state: &TrainState, metrics: &MetricsRow) -> Result<()> {
        if let Some((last, _)) = self.checkpoints.last() {
            if last.completed_updates >= state.completed_updates {
                return Err(Error::Sink(format!(
                    "checkpoint {} is not after {}",
                    state.completed_updates, last.completed_updates
                )));
            }
        }
        self.checkpoints.push((state.clone(), metrics.clone()));
        Ok(())
    }
}

/// Builds the three models and runs the warm starts: behavior cloning, then
/// on-policy critic regression, then the ratio against the cloned policy.
///
/// The actor's optimizer is reset after cloning; the critic's and the
/// ratio's carry over into training. `actor` overrides the default network.
pub fn initialize(data: &PreparedData, config: &TrainConfig, actor: Option<ActorModel>) -> Result<TrainState> {
    let plan = discount_variant_dispatch(config, data.horizon)?;
    let stats = data.normalization.clone();
    let (dim, k) = (data.state_dim, data.n_actions);
    let mut init = derive(config.seed, tags::INIT, 0);
    let mut actor = match actor {
        Some(a) => {
            if a.net.input_dim() != dim || a.n_actions() != k {
                return Err(Error::InvalidInput("supplied actor does not match the dataset".into()));
            }
            a
        }
        None => ActorModel::new(&config.sizes(dim, k), config.actor_learning_rate, stats.clone(), &mut init)?,
    };
    let mut critic = CriticModel::new(&config.sizes(dim, 1), config.critic_learning_rate, stats.clone(), &mut init)?;
    let kernel = match config.kernel_bandwidth {
        Some(h) => KernelConfig::fixed(h)?,
        None => KernelConfig::median(data, &mut derive(config.seed, tags::BANDWIDTH, 0)),
    };
    let mut ratio = RatioModel::new(
        &config.sizes(dim, 1),
        config.ratio_learning_rate,
        config.ratio_weight_decay,
        kernel,
        plan.ratio_loss,
        stats,
        &mut init,
    )?;

    behavior_clone(
        &mut actor,
        data,
        config.bc_iterations,
        config.actor_batch_size,
        &mut derive(config.seed, tags::BEHAVIOR_CLONE, 0),
    )
    .map_err(|e| e.at_stage("behavior_clone", 0))?;
    actor.reset_optimizer();

    warm_start_critic(
        &mut critic,
        data,
        config.lambda,
        config.gamma,
        config.warm_critic_iterations,
        config.critic_steps,
        config.critic_batch_size,
        &mut derive(config.seed, tags::WARM_CRITIC, 0),
    )
    .map_err(|e| e.at_stage("warm_critic", 0))?;

    if config.algorithm == Algorithm::Opposd {
        let mut rng = derive(config.seed, tags::WARM_RATIO, 0);
        for _ in 0..config.warm_ratio_iterations {
            ratio_update_step(&mut ratio, data, &actor, &plan.ratio_sampler, config.ratio_batch_size, &mut rng)
                .map_err(|e| e.at_stage("warm_ratio", 0))?;
        }
    }
    Ok(TrainState {
        actor,
        critic,
        ratio,
        completed_updates: 0,
    })
}

fn checkpoint(
    state: &TrainState,
    mut row: MetricsRow,
    sink: &mut dyn CheckpointSink,
    evaluator: Option<&mut (dyn CheckpointEvaluator + '_)>,
) -> Result<()> {
    let u = state.completed_updates;
    if let Some(ev) = evaluator {
        let (m, s) = ev.evaluate(&state.actor, u).map_err(|e| e.at_stage("evaluate", u))?;
        row.eval_mean = Some(m);
        row.eval_std = Some(s);
    }
    sink.record_metrics(&row).map_err(|e| e.at_stage("metrics", u))?;
    sink.save(state, &row).map_err(|e| e.at_stage("checkpoint", u))
}

/// One actor update: `ratio_steps` ratio steps, a critic round, then one
/// actor step. All randomness comes from the update's own stream.
pub fn actor_update(state: &mut TrainState, data: &PreparedData, config: &TrainConfig, plan: &VariantPlan) -> Result<MetricsRow> {
    let u = state.completed_updates + 1;
    let mut rng = derive(config.seed, tags::UPDATE, u as u64);
    let corrected = config.algorithm == Algorithm::Opposd;

    let mut ratio_loss = None;
    if corrected && config.ratio_steps > 0 {
        let mut total = 0.0;
        for _ in 0..config.ratio_steps {
            total += ratio_update_step(
                &mut state.ratio,
                data,
                &state.actor,
                &plan.ratio_sampler,
                config.ratio_batch_size,
                &mut rng,
            )
            .map_err(|e| e.at_stage("ratio", u))?;
        }
        ratio_loss = Some(total / config.ratio_steps as f64);
    }

    let cfg = ReturnConfig {
        lambda: config.lambda,
        gamma: config.gamma,
        importance: true,
    };
    let critic_loss = critic_update_round(
        &mut state.critic,
        data,
        Some(&state.actor),
        cfg,
        config.critic_steps,
        config.critic_batch_size,
        &mut rng,
    )
    .map_err(|e| e.at_stage("critic", u))?;

    let step = (|| {
        let rows = plan.actor_sampler.sample_rows(data.n_trajectories, config.actor_batch_size, &mut rng);
        let returns = lambda_returns_for_rows(&state.critic.net, data, &rows, Some(&state.actor), cfg)?;
        let q: Vec<f64> = rows.iter().zip(returns).map(|(&r, ret)| masked_q(data.in_support[r], ret)).collect();
        let g = if corrected {
            let w = state.ratio.predict_rows(data, &rows)?;
            actor_gradient(&state.actor, data, &rows, &w, &q, config.entropy_coefficient)?
        } else {
            offpac_actor_gradient(&state.actor, data, &rows, &q, config.entropy_coefficient)?
        };
        state.actor.step(&g.grads)?;
        Ok::<_, Error>(g)
    })()
    .map_err(|e| e.at_stage("actor", u))?;

    state.completed_updates = u;
    Ok(MetricsRow {
        actor_update: u,
        ratio_loss,
        critic_loss: (config.critic_steps > 0).then_some(critic_loss),
        entropy: Some(step.mean_entropy),
        grad_norm: Some(step.norm),
        z_w: Some(step.z_w),
        eval_mean: None,
        eval_std: None,
    })
}

/// Runs actor updates until `config.total_actor_updates`, checkpointing every
/// `checkpoint_interval` updates and at the end.
pub fn continue_training(
    state: &mut TrainState,
    data: &PreparedData,
    config: &TrainConfig,
    sink: &mut dyn CheckpointSink,
    mut evaluator: Option<&mut (dyn CheckpointEvaluator + '_)>,
) -> Result<()> {
    let plan = discount_variant_dispatch(config, data.horizon)?;
    while state.completed_updates < config.total_actor_updates {
        let row = actor_update(state, data, config, &plan)?;
        let u = row.actor_update;
        if u % config.checkpoint_interval == 0 || u == config.total_actor_updates {
            checkpoint(state, row, sink, evaluator.as_deref_mut())?;
        } else {
            sink.record_metrics(&row).map_err(|e| e.at_stage("metrics", u))?;
        }
    }
    Ok(())
}

/// Warm start, checkpoint 0, then the full update loop.
pub fn train(
    data: &PreparedData,
    config: &TrainConfig,
    actor: Option<ActorModel>,
    sink: &mut dyn CheckpointSink,
    mut evaluator: Option<&mut (dyn CheckpointEvaluator + '_)>,
) -> Result<TrainState> {
    let mut state = initialize(data, config, actor)?;
    checkpoint(&state, MetricsRow::default(), sink, evaluator.as_deref_mut())?;
    continue_training(&mut state, data, config, sink, evaluator)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collect_dataset;
    use crate::env::{TabularEnv, TabularPolicy, UniformPolicy};
    use crate::mdp::hard_example::{hard_example_mdp, LEFT, S0, S1, S2, TERMINAL};
    use crate::mdp::TabularMdp;
    use crate::nn::gradcheck::{central_differences, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_data(seed: u64) -> PreparedData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(4, 3, 0.9, 2, None, &mut rng).unwrap();
        let mut env = TabularEnv::new(mdp);
        let ds = collect_dataset(&mut env, &UniformPolicy { n_actions: 3 }, 12, 5, &mut rng).unwrap();
        PreparedData::new(&ds, &ds.normalization).unwrap()
    }

    fn toy_actor(seed: u64, data: &PreparedData) -> ActorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActorModel::new(&[data.state_dim, 6, data.n_actions], 1e-2, data.normalization.clone(), &mut rng).unwrap()
    }

    fn surrogate(actor: &ActorModel, data: &PreparedData, rows: &[usize], c: &[f64], beta: f64) -> f64 {
        let mut buf = Vec::new();
        data.gather_states(rows, &mut buf);
        let p = actor.probs_normalized(&buf).unwrap();
        let (h, _) = entropy_of_policy(&p);
        let mut total = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            total += c[i] * math::ln(p.row(i)[data.actions[r]]) + beta * h[i];
        }
        -total / rows.len() as f64
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = toy_data(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..5 {
            let actor = toy_actor(10 + trial, &data);
            let rows: Vec<usize> = (0..16).map(|_| rng.gen_range(0..data.len())).collect();
            let w: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..3.0)).collect();
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = actor_gradient(&actor, &data, &rows, &w, &q, 0.3).unwrap();
            let z = w.iter().sum::<f64>() / 16.0;
            let probs = actor.logged_action_probs(&data, &rows).unwrap();
            let rho = importance_ratios(&data, &rows, &probs).unwrap();
            let c: Vec<f64> = (0..16).map(|i| w[i] / z * rho[i] * q[i]).collect();
            let theta = actor.net.flatten();
            let mut probe = actor.clone();
            let numeric = central_differences(
                &theta,
                &mut |t: &[f64]| {
                    probe.net.set_flat(t).unwrap();
                    surrogate(&probe, &data, &rows, &c, 0.3)
                },
                1e-6,
            );
            for (a, n) in g.grads.flatten().iter().zip(&numeric) {
                assert!(relative_error(*a, *n) < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn ratio_scale_leaves_direction_unchanged() {
        let data = toy_data(3);
        let actor = toy_actor(4, &data);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<usize> = (0..32).map(|_| rng.gen_range(0..data.len())).collect();
        let w: Vec<f64> = (0..32).map(|_| rng.gen_range(0.1..3.0)).collect();
        let q: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = actor_gradient(&actor, &data, &rows, &w, &q, 0.01).unwrap().grads.flatten();
        for c in [4.0, 0.125] {
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            let g = actor_gradient(&actor, &data, &rows, &scaled, &q, 0.01).unwrap().grads.flatten();
            assert_eq!(g, base);
        }
        let scaled: Vec<f64> = w.iter().map(|v| v * 3.7).collect();
        let g = actor_gradient(&actor, &data, &rows, &scaled, &q, 0.01).unwrap().grads.flatten();
        for (a, b) in g.iter().zip(&base) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn unit_ratio_matches_offpac_bit_for_bit() {
        let data = toy_data(6);
        let actor = toy_actor(7, &data);
        let rows: Vec<usize> = (0..data.len()).step_by(3).collect();
        let q: Vec<f64> = rows.iter().map(|&r| data.rewards[r] - 0.5).collect();
        let a = actor_gradient(&actor, &data, &rows, &vec![1.0; rows.len()], &q, 0.01).unwrap();
        let b = offpac_actor_gradient(&actor, &data, &rows, &q, 0.01).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.z_w, 1.0);
    }

    #[test]
    fn zero_q_is_pure_entropy_ascent() {
        let data = toy_data(8);
        let mut actor = toy_actor(9, &data);
        let rows: Vec<usize> = (0..data.len()).collect();
        let entropy = |a: &ActorModel| {
            let mut buf = Vec::new();
            data.gather_states(&rows, &mut buf);
            let (h, _) = entropy_of_policy(&a.probs_normalized(&buf).unwrap());
            h.iter().sum::<f64>()
        };
        let before = entropy(&actor);
        for _ in 0..20 {
            let g = actor_gradient(&actor, &data, &rows, &vec![1.0; rows.len()], &vec![0.0; rows.len()], 0.5).unwrap();
            actor.step(&g.grads).unwrap();
        }
        assert!(entropy(&actor) > before);
    }

    #[test]
    fn non_finite_inputs_fail_fast() {
        let data = toy_data(10);
        let actor = toy_actor(11, &data);
        let rows = [0, 1];
        assert!(matches!(
            actor_gradient(&actor, &data, &rows, &[1.0, 1.0], &[f64::NAN, 0.0], 0.0),
            Err(Error::NonFinite { .. })
        ));
        assert!(actor_gradient(&actor, &data, &[], &[], &[], 0.0).is_err());
    }

    #[test]
    fn behavior_cloning_cases() {
        let data = toy_data(12);
        let mut actor = toy_actor(13, &data);
        let before = actor.clone();
        behavior_clone(&mut actor, &data, 0, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(actor, before);

        // a behavior that always plays action 1
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mdp = TabularMdp::random(4, 2, 0.9, 2, None, &mut rng).unwrap();
        let fixed = TabularPolicy {
            table: PolicyTable::new(vec![vec![0.0, 1.0]; 4]).unwrap(),
        };
        let ds = collect_dataset(&mut TabularEnv::new(mdp), &fixed, 10, 4, &mut rng).unwrap();
        let data = PreparedData::new(&ds, &ds.normalization).unwrap();
        let mut actor = toy_actor(15, &data);
        behavior_clone(&mut actor, &data, 500, 32, &mut rng).unwrap();
        let probs = actor.logged_action_probs(&data, &(0..data.len()).collect::<Vec<_>>()).unwrap();
        assert!(probs.iter().all(|&p| p >= 0.99));
    }

    #[test]
    fn hard_example_actor_ties_and_freezes() {
        let he = hard_example_mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ds = collect_dataset(&mut TabularEnv::new(he.mdp.clone()), &UniformPolicy { n_actions: 2 }, 200, 3, &mut rng)
            .unwrap();
        let data = PreparedData::new(&ds, &ds.normalization).unwrap();
        let mut actor = hard_example_actor(0.05, ds.normalization.clone()).unwrap();
        let q: Vec<f64> = (0..data.len()).map(|r| if data.actions[r] == LEFT { 1.0 } else { -1.0 }).collect();
        let rows: Vec<usize> = (0..data.len()).collect();
        for _ in 0..50 {
            let g = offpac_actor_gradient(&actor, &data, &rows, &q, 0.0).unwrap();
            actor.step(&g.grads).unwrap();
        }
        let table = actor.policy_table(TERMINAL + 1).unwrap();
        assert!(table.prob(S0, LEFT) > 1.0 - 1e-8);
        assert!((table.prob(S1, LEFT) - table.prob(S2, LEFT)).abs() < 1e-12);
        assert!(table.prob(S1, LEFT) > 0.6);
        assert_eq!(table.row(TERMINAL), &[0.5, 0.5]);
        let mask = actor.trainable.clone().unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 4);
    }

    #[test]
    fn variant_dispatch() {
        let avg = discount_variant_dispatch(&TrainConfig::default(), 10).unwrap();
        assert_eq!(avg.ratio_loss, RatioLossKind::Average);
        assert_eq!(avg.actor_sampler.gamma(), 1.0);
        for v in [DiscountVariant::DiscountedWOnly, DiscountVariant::DiscountedFull] {
            let cfg = TrainConfig {
                discount_variant: v,
                ..TrainConfig::default()
            };
            assert!(matches!(discount_variant_dispatch(&cfg, 10), Err(Error::InvalidConfig { field: "discount_variant", .. })));
        }
        let full = TrainConfig {
            discount_variant: DiscountVariant::DiscountedFull,
            gamma: 0.98,
            ..TrainConfig::default()
        };
        let plan = discount_variant_dispatch(&full, 10).unwrap();
        assert_eq!(plan.ratio_loss, RatioLossKind::Discounted { gamma: 0.98 });
        assert_eq!((plan.ratio_sampler.gamma(), plan.actor_sampler.gamma()), (0.98, 0.98));
        let w_only = TrainConfig {
            discount_variant: DiscountVariant::DiscountedWOnly,
            ..full
        };
        let plan = discount_variant_dispatch(&w_only, 10).unwrap();
        assert_eq!((plan.ratio_sampler.gamma(), plan.actor_sampler.gamma()), (0.98, 1.0));
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            actor_batch_size: 16,
            critic_batch_size: 16,
            ratio_batch_size: 8,
            critic_steps: 2,
            ratio_steps: 2,
            bc_iterations: 5,
            warm_critic_iterations: 5,
            warm_ratio_iterations: 5,
            total_actor_updates: 7,
            checkpoint_interval: 3,
            hidden_layers: vec![5],
            seed: 21,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn checkpoint_schedule_and_determinism() {
        let data = toy_data(20);
        let cfg = small_config();
        let mut a = MemoryStore::default();
        let mut b = MemoryStore::default();
        train(&data, &cfg, None, &mut a, None).unwrap();
        train(&data, &cfg, None, &mut b, None).unwrap();
        let ids: Vec<usize> = a.checkpoints.iter().map(|c| c.0.completed_updates).collect();
        assert_eq!(ids, [0, 3, 6, 7]);
        assert_eq!(a.metrics.len(), 8);
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.metrics, b.metrics);

        let zero = TrainConfig { total_actor_updates: 0, ..cfg };
        let mut c = MemoryStore::default();
        let st = train(&data, &zero, None, &mut c, None).unwrap();
        assert_eq!(c.checkpoints.len(), 1);
        assert_eq!(st, a.checkpoints[0].0);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = toy_data(22);
        let cfg = small_config();
        let mut full = MemoryStore::default();
        train(&data, &cfg, None, &mut full, None).unwrap();
        let mut head = MemoryStore::default();
        train(&data, &TrainConfig { total_actor_updates: 3, ..cfg.clone() }, None, &mut head, None).unwrap();
        let mut state = head.checkpoints.last().unwrap().0.clone();
        let mut tail = MemoryStore::default();
        continue_training(&mut state, &data, &cfg, &mut tail, None).unwrap();
        assert_eq!(&full.metrics[4..], &tail.metrics[..]);
        assert_eq!(full.checkpoints.last().unwrap().0, state);
    }

    struct Failing;
    impl CheckpointEvaluator for Failing {
        fn evaluate(&mut self, _: &ActorModel, update: usize) -> Result<(f64, f64)> {
            if update == 3 {
                Err(Error::NonFinite { context: "rollout" })
            } else {
                Ok((0.0, 0.0))
            }
        }
    }

    #[test]
    fn stage_failures_carry_stage_and_update() {
        let data = toy_data(23);
        let err = train(&data, &small_config(), None, &mut MemoryStore::default(), Some(&mut Failing)).unwrap_err();
        match &err {
            Error::Stage { stage, update, .. } => assert_eq!((*stage, *update), ("evaluate", 3)),
            e => panic!("unexpected {e:?}"),
        }
        assert!(err.is_numeric());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: [(TrainConfig, &str); 4] = [
            (TrainConfig { gamma: 0.0, ..TrainConfig::default() }, "gamma"),
            (TrainConfig { lambda: 1.5, ..TrainConfig::default() }, "lambda"),
            (TrainConfig { actor_batch_size: 0, ..TrainConfig::default() }, "actor_batch_size"),
            (TrainConfig { ratio_learning_rate: -1.0, ..TrainConfig::default() }, "ratio_learning_rate"),
        ];
        for (cfg, name) in cases {
            match cfg.validate() {
                Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, name),
                other => panic!("{name}: {other:?}"),
            }
        }
    }
}
