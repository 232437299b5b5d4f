//! Finite-difference checks of every analytic gradient in the core: the
//! actor surrogate, the critic loss, both ratio losses and the entropy
//! regularizer.

use opposd_core::actor::{actor_gradient, ActorModel};
use opposd_core::critic::critic_loss;
use opposd_core::data::{collect_dataset, PreparedData};
use opposd_core::env::{CartPole, UniformPolicy};
use opposd_core::nn::gradcheck::{central_differences, relative_error};
use opposd_core::nn::{entropy_of_policy, softmax_rows, DenseMatrix, Head, MlpParams};
use opposd_core::ratio::{importance_ratios, KernelConfig, RatioLossKind, RatioModel, RowPolicy};
use opposd_core::rng::derive;
use rand::{Rng, RngCore};

const GRADCHECK_TAG: u64 = 100;
pub const DEFAULT_POINTS: usize = 100;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn max_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, |m: f64, e| if e.is_nan() { f64::INFINITY } else { m.max(e) })
}

struct Fixture {
    data: PreparedData,
}

impl Fixture {
    fn new(seed: u64) -> opposd_core::Result<Self> {
        let mut rng = derive(seed, GRADCHECK_TAG, u64::MAX);
        let ds = collect_dataset(&mut CartPole::new(), &UniformPolicy { n_actions: 2 }, 6, 25, &mut rng)?;
        let data = PreparedData::new(&ds, &ds.normalization)?;
        Ok(Fixture { data })
    }

    fn rows(&self, rng: &mut dyn RngCore, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..self.data.len())).collect()
    }
}

fn actor_point(fx: &Fixture, rng: &mut dyn RngCore) -> opposd_core::Result<f64> {
    let data = &fx.data;
    let actor = ActorModel::new(&[data.state_dim, 8, data.n_actions], 1e-3, data.normalization.clone(), rng)?;
    let rows = fx.rows(rng, 12);
    let w: Vec<f64> = rows.iter().map(|_| rng.gen_range(0.1..3.0)).collect();
    let q: Vec<f64> = rows.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
    let beta = rng.gen_range(0.0..0.5);
    let g = actor_gradient(&actor, data, &rows, &w, &q, beta)?;
    let z = w.iter().sum::<f64>() / w.len() as f64;
    let rho = importance_ratios(data, &rows, &actor.logged_action_probs(data, &rows)?)?;
    let c: Vec<f64> = (0..rows.len()).map(|i| w[i] / z * rho[i] * q[i]).collect();
    let mut states = Vec::new();
    data.gather_states(&rows, &mut states);
    let mut probe = actor.clone();
    let numeric = central_differences(
        &actor.net.flatten(),
        &mut |t: &[f64]| {
            probe.net.set_flat(t).expect("same shape");
            let p = probe.probs_normalized(&states).expect("finite");
            let (h, _) = entropy_of_policy(&p);
            let total: f64 = rows
                .iter()
                .enumerate()
                .map(|(i, &r)| c[i] * p.row(i)[data.actions[r]].ln() + beta * h[i])
                .sum();
            -total / rows.len() as f64
        },
        STEP,
    );
    Ok(max_error(&g.grads.flatten(), &numeric))
}

fn critic_point(fx: &Fixture, rng: &mut dyn RngCore) -> opposd_core::Result<f64> {
    let data = &fx.data;
    let net = MlpParams::random(&[data.state_dim, 8, 1], Head::Linear, rng)?;
    let rows = fx.rows(rng, 12);
    let mut states = Vec::new();
    data.gather_states(&rows, &mut states);
    let returns: Vec<f64> = rows.iter().map(|_| rng.gen_range(-1.0..5.0)).collect();
    let rho: Vec<f64> = rows.iter().map(|_| rng.gen_range(0.0..3.0)).collect();
    let (_, g) = critic_loss(&net, &states, &returns, &rho)?;
    let mut probe = net.clone();
    let numeric = central_differences(
        &net.flatten(),
        &mut |t: &[f64]| {
            probe.set_flat(t).expect("same shape");
            critic_loss(&probe, &states, &returns, &rho).expect("finite").0
        },
        STEP,
    );
    Ok(max_error(&g.flatten(), &numeric))
}

fn ratio_point(fx: &Fixture, rng: &mut dyn RngCore, loss: RatioLossKind) -> opposd_core::Result<f64> {
    let data = &fx.data;
    let kernel = KernelConfig::fixed(rng.gen_range(0.5..2.0))?;
    let model = RatioModel::new(&[data.state_dim, 8, 1], 1e-3, 0.0, kernel, loss, data.normalization.clone(), rng)?;
    let target = ActorModel::new(&[data.state_dim, 4, data.n_actions], 1e-3, data.normalization.clone(), rng)?;
    let (a, b) = (fx.rows(rng, 10), fx.rows(rng, 10));
    let (_, g) = model.loss_and_gradient(data, &a, &b, &target)?;
    let mut probe = model.clone();
    let numeric = central_differences(
        &model.net.flatten(),
        &mut |t: &[f64]| {
            probe.net.set_flat(t).expect("same shape");
            probe.loss_and_gradient(data, &a, &b, &target).expect("finite").0
        },
        STEP,
    );
    Ok(max_error(&g.flatten(), &numeric))
}

fn entropy_point(rng: &mut dyn RngCore) -> opposd_core::Result<f64> {
    let (b, k) = (5, rng.gen_range(2..6));
    let z: Vec<f64> = (0..b * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let logits = DenseMatrix::from_vec(b, k, z.clone())?;
    let (_, grad) = entropy_of_policy(&softmax_rows(&logits));
    let numeric = central_differences(
        &z,
        &mut |t: &[f64]| {
            let m = DenseMatrix::from_vec(b, k, t.to_vec()).expect("shape");
            entropy_of_policy(&softmax_rows(&m)).0.iter().sum()
        },
        STEP,
    );
    Ok(max_error(grad.as_slice(), &numeric))
}

/// Runs every check at `points` random parameter settings.
pub fn run_gradcheck(seed: u64, points: usize) -> opposd_core::Result<Vec<CheckResult>> {
    let fx = Fixture::new(seed)?;
    let names = ["actor", "critic", "ratio_average", "ratio_discounted", "entropy"];
    let mut out = Vec::new();
    for (c, name) in names.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..points {
            let mut rng = derive(seed, GRADCHECK_TAG, (c * points + i) as u64);
            let e = match c {
                0 => actor_point(&fx, &mut rng)?,
                1 => critic_point(&fx, &mut rng)?,
                2 => ratio_point(&fx, &mut rng, RatioLossKind::Average)?,
                3 => ratio_point(&fx, &mut rng, RatioLossKind::Discounted { gamma: 0.95 })?,
                _ => entropy_point(&mut rng)?,
            };
            worst = worst.max(e);
        }
        out.push(CheckResult {
            name,
            points,
            max_rel_error: worst,
            passed: worst <= TOLERANCE,
        });
    }
    Ok(out)
}
