//! Kernel estimation of the state distribution ratio `w(s) = d^pi(s) / d^mu(s)`.
//!
//! The loss is the squared RKHS norm of the stationarity residual, estimated
//! as a U-statistic over two independent mini-batches `A` and `B`. Each batch
//! contributes a weighted point set; the loss is `c_A^T K_AB c_B / Z` with
//! `Z` the sum of the `s'_A x s'_B` kernel block.
//!
//! - discounted: points `s'` with weight `gamma * Delta` and `s0` with weight
//!   `(1 - gamma) * (1 - w(s0))`;
//! - average: points `s'` with weight `Delta / mean_batch(w(s))`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::data::{DiscountedSampler, NormalizationStats, PreparedData};
use crate::error::{ensure_finite, Error, Result};
use crate::math;
use crate::mdp::{exact_occupancy, PolicyTable, TabularMdp};
use crate::nn::{AdamState, DenseMatrix, Head, MlpParams};

/// Number of states used by the median heuristic.
pub const BANDWIDTH_SUBSAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BandwidthMode {
    MedianHeuristic,
    Fixed,
}

/// RBF kernel settings. With `MedianHeuristic` the bandwidth is filled in
/// from the training data.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelConfig {
    pub bandwidth: f64,
    pub mode: BandwidthMode,
}

impl KernelConfig {
    pub fn fixed(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidInput(format!("bandwidth {bandwidth} must be positive")));
        }
        Ok(KernelConfig {
            bandwidth,
            mode: BandwidthMode::Fixed,
        })
    }

    /// Median pairwise distance over a random subsample of non-sentinel
    /// states.
    pub fn median(data: &PreparedData, rng: &mut dyn RngCore) -> Self {
        let candidates: Vec<usize> = (0..data.len()).filter(|&r| !data.state_absorbing[r]).collect();
        let mut points = Vec::new();
        if candidates.len() <= BANDWIDTH_SUBSAMPLE {
            data.gather_states(&candidates, &mut points);
        } else {
            let picks: Vec<usize> = (0..BANDWIDTH_SUBSAMPLE)
                .map(|_| candidates[rng.gen_range(0..candidates.len())])
                .collect();
            data.gather_states(&picks, &mut points);
        }
        KernelConfig {
            bandwidth: median_bandwidth(&points, data.state_dim),
            mode: BandwidthMode::MedianHeuristic,
        }
    }
}

/// Which stationarity equation the ratio solves.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RatioLossKind {
    /// `gamma = 1`, with in-batch self-normalization of `w`.
    Average,
    Discounted { gamma: f64 },
}

pub fn rbf_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    math::exp(-d2 / (2.0 * bandwidth * bandwidth))
}

/// Median pairwise Euclidean distance of row-major `points`; 1 when every
/// point coincides or there are fewer than two.
pub fn median_bandwidth(points: &[f64], dim: usize) -> f64 {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        let a = &points[i * dim..(i + 1) * dim];
        for j in i + 1..n {
            let b = &points[j * dim..(j + 1) * dim];
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(math::sqrt(d2));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

/// `Delta = w(s) rho - w(s')`, elementwise.
pub fn delta(w: &[f64], rho: &[f64], w_next: &[f64]) -> Result<Vec<f64>> {
    if w.len() != rho.len() || w.len() != w_next.len() {
        return Err(Error::DimensionMismatch {
            context: "delta inputs",
            expected: w.len(),
            found: if rho.len() != w.len() { rho.len() } else { w_next.len() },
        });
    }
    Ok(w.iter().zip(rho).zip(w_next).map(|((w, r), wn)| w * r - wn).collect())
}

/// One mini-batch worth of inputs to the kernel loss. States are row-major
/// and already normalized.
#[derive(Debug, Clone, Copy)]
pub struct RatioSide<'a> {
    pub next_states: &'a [f64],
    pub initial_states: &'a [f64],
    pub rho: &'a [f64],
    pub w: &'a [f64],
    pub w_next: &'a [f64],
    /// Unused by the average loss.
    pub w_initial: &'a [f64],
}

/// Gradients of the loss with respect to each `w` value of one side.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSideGrad {
    pub w: Vec<f64>,
    pub w_next: Vec<f64>,
    pub w_initial: Vec<f64>,
}

struct Points {
    xs: Vec<f64>,
    sq: Vec<f64>,
    n: usize,
}

impl Points {
    fn new(parts: &[&[f64]], dim: usize) -> Points {
        let mut xs = Vec::new();
        for p in parts {
            xs.extend_from_slice(p);
        }
        let n = xs.len() / dim;
        let sq = (0..n)
            .map(|i| xs[i * dim..(i + 1) * dim].iter().map(|v| v * v).sum())
            .collect();
        Points { xs, sq, n }
    }
}

/// `K[i][j]` for the two point sets, row-major.
fn kernel_matrix(a: &Points, b: &Points, dim: usize, bandwidth: f64) -> Vec<f64> {
    let scale = -1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = vec![0.0; a.n * b.n];
    if dim == 0 {
        k.iter_mut().for_each(|v| *v = 1.0);
        return k;
    }
    for (i, (xa, row)) in a.xs.chunks_exact(dim).zip(k.chunks_exact_mut(b.n)).enumerate() {
        let sa = a.sq[i];
        for ((out, xb), &sb) in row.iter_mut().zip(b.xs.chunks_exact(dim)).zip(&b.sq) {
            let mut dot = 0.0;
            for (u, v) in xa.iter().zip(xb) {
                dot += u * v;
            }
            let d2 = (sa + sb - 2.0 * dot).max(0.0);
            *out = math::exp(d2 * scale);
        }
    }
    k
}

/// Loss `c_A^T K c_B / Z` and its gradients with respect to `c_A`, `c_B`.
/// `Z` sums the leading `n_a x n_b` block.
fn quadratic_form(k: &[f64], ca: &[f64], cb: &[f64], n_a: usize, n_b: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (ra, rb) = (ca.len(), cb.len());
    let mut z = 0.0;
    for i in 0..n_a {
        z += k[i * rb..i * rb + n_b].iter().sum::<f64>();
    }
    if !(z > 0.0) {
        return Err(Error::DegenerateNormalizer { value: z });
    }
    let mut ga = vec![0.0; ra];
    let mut gb = vec![0.0; rb];
    let mut loss = 0.0;
    for i in 0..ra {
        let row = &k[i * rb..(i + 1) * rb];
        let kc: f64 = row.iter().zip(cb).map(|(x, c)| x * c).sum();
        ga[i] = kc / z;
        loss += ca[i] * kc;
        if ca[i] != 0.0 {
            for (g, x) in gb.iter_mut().zip(row) {
                *g += ca[i] * x;
            }
        }
    }
    for g in &mut gb {
        *g /= z;
    }
    let loss = loss / z;
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "ratio loss" });
    }
    Ok((loss, ga, gb))
}

fn check_side(side: &RatioSide, dim: usize, need_initial: bool) -> Result<usize> {
    let n = side.w.len();
    if n == 0 {
        return Err(Error::Empty("ratio batch"));
    }
    let ok = side.rho.len() == n
        && side.w_next.len() == n
        && side.next_states.len() == n * dim
        && (!need_initial || (side.w_initial.len() == n && side.initial_states.len() == n * dim));
    if !ok {
        return Err(Error::InvalidInput("ratio batch arrays disagree in length".into()));
    }
    Ok(n)
}

/// Discounted kernel loss and gradients for both sides.
pub fn kernel_loss_discounted(
    a: &RatioSide,
    b: &RatioSide,
    dim: usize,
    bandwidth: f64,
    gamma: f64,
) -> Result<(f64, RatioSideGrad, RatioSideGrad)> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("discounted ratio loss needs 0 < gamma < 1, got {gamma}")));
    }
    let na = check_side(a, dim, true)?;
    let nb = check_side(b, dim, true)?;
    let coef = |s: &RatioSide| -> Vec<f64> {
        let mut c: Vec<f64> = (0..s.w.len()).map(|i| gamma * (s.w[i] * s.rho[i] - s.w_next[i])).collect();
        c.extend(s.w_initial.iter().map(|w0| (1.0 - gamma) * (1.0 - w0)));
        c
    };
    let pa = Points::new(&[a.next_states, a.initial_states], dim);
    let pb = Points::new(&[b.next_states, b.initial_states], dim);
    let k = kernel_matrix(&pa, &pb, dim, bandwidth);
    let (ca, cb) = (coef(a), coef(b));
    let (loss, gca, gcb) = quadratic_form(&k, &ca, &cb, na, nb)?;
    let back = |s: &RatioSide, g: &[f64], n: usize| RatioSideGrad {
        w: (0..n).map(|i| g[i] * gamma * s.rho[i]).collect(),
        w_next: (0..n).map(|i| -g[i] * gamma).collect(),
        w_initial: (0..n).map(|i| -g[n + i] * (1.0 - gamma)).collect(),
    };
    Ok((loss, back(a, &gca, na), back(b, &gcb, nb)))
}

/// Average-reward kernel loss with `w` divided by its in-batch mean.
pub fn kernel_loss_average(
    a: &RatioSide,
    b: &RatioSide,
    dim: usize,
    bandwidth: f64,
) -> Result<(f64, RatioSideGrad, RatioSideGrad)> {
    let na = check_side(a, dim, false)?;
    let nb = check_side(b, dim, false)?;
    let prep = |s: &RatioSide, n: usize| -> Result<(f64, Vec<f64>)> {
        let m = s.w.iter().sum::<f64>() / n as f64;
        if !(m > 0.0) {
            return Err(Error::DegenerateNormalizer { value: m });
        }
        let u: Vec<f64> = (0..n).map(|i| s.w[i] * s.rho[i] - s.w_next[i]).collect();
        Ok((m, u))
    };
    let (ma, ua) = prep(a, na)?;
    let (mb, ub) = prep(b, nb)?;
    let ca: Vec<f64> = ua.iter().map(|u| u / ma).collect();
    let cb: Vec<f64> = ub.iter().map(|u| u / mb).collect();
    let pa = Points::new(&[a.next_states], dim);
    let pb = Points::new(&[b.next_states], dim);
    let k = kernel_matrix(&pa, &pb, dim, bandwidth);
    let (loss, gca, gcb) = quadratic_form(&k, &ca, &cb, na, nb)?;
    let back = |s: &RatioSide, g: &[f64], u: &[f64], m: f64, n: usize| {
        let gu: f64 = g.iter().zip(u).map(|(g, u)| g * u).sum::<f64>() / (m * m * n as f64);
        RatioSideGrad {
            w: (0..n).map(|i| g[i] * s.rho[i] / m - gu).collect(),
            w_next: (0..n).map(|i| -g[i] / m).collect(),
            w_initial: Vec::new(),
        }
    };
    Ok((loss, back(a, &gca, &ua, ma, na), back(b, &gcb, &ub, mb, nb)))
}

/// Target-policy probability of the logged action on given dataset rows.
pub trait RowPolicy {
    fn logged_action_probs(&self, data: &PreparedData, rows: &[usize]) -> Result<Vec<f64>>;
}

/// Precomputed per-row probabilities.
#[derive(Debug, Clone)]
pub struct FixedRowProbs(pub Vec<f64>);

impl RowPolicy for FixedRowProbs {
    fn logged_action_probs(&self, data: &PreparedData, rows: &[usize]) -> Result<Vec<f64>> {
        if self.0.len() != data.len() {
            return Err(Error::DimensionMismatch {
                context: "per-row probabilities",
                expected: data.len(),
                found: self.0.len(),
            });
        }
        Ok(rows.iter().map(|&r| self.0[r]).collect())
    }
}

/// `pi(a|s) / mu~(a|s)` on the given rows; 1 at the absorbing sentinel.
pub fn importance_ratios(data: &PreparedData, rows: &[usize], target: &[f64]) -> Result<Vec<f64>> {
    let rho: Vec<f64> = rows
        .iter()
        .zip(target)
        .map(|(&r, &p)| if data.state_absorbing[r] { 1.0 } else { p / data.behavior_probs[r] })
        .collect();
    ensure_finite(&rho, "importance ratio")?;
    Ok(rho)
}

/// Softplus network `w(s)` with its optimizer and kernel settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioModel {
    pub net: MlpParams,
    pub optimizer: AdamState,
    pub normalization: NormalizationStats,
    pub kernel: KernelConfig,
    pub loss: RatioLossKind,
}

impl RatioModel {
    pub fn new(
        layer_sizes: &[usize],
        learning_rate: f64,
        weight_decay: f64,
        kernel: KernelConfig,
        loss: RatioLossKind,
        normalization: NormalizationStats,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if layer_sizes.last() != Some(&1) {
            return Err(Error::InvalidInput("ratio network must have one output".into()));
        }
        let net = MlpParams::random(layer_sizes, Head::Softplus, rng)?;
        let optimizer = AdamState::for_params(&net, learning_rate, weight_decay);
        Ok(RatioModel {
            net,
            optimizer,
            normalization,
            kernel,
            loss,
        })
    }

    /// `w` at normalized, row-major states.
    pub fn predict(&self, states: &[f64]) -> Result<Vec<f64>> {
        let dim = self.net.input_dim();
        let x = DenseMatrix::from_vec(states.len() / dim.max(1), dim, states.to_vec())?;
        Ok(self.net.predict(&x)?.into_vec())
    }

    pub fn predict_rows(&self, data: &PreparedData, rows: &[usize]) -> Result<Vec<f64>> {
        let mut buf = Vec::with_capacity(rows.len() * data.state_dim);
        data.gather_states(rows, &mut buf);
        self.predict(&buf)
    }

    /// Loss value and flat parameter gradient for two fixed batches of rows.
    pub fn loss_and_gradient(
        &self,
        data: &PreparedData,
        rows_a: &[usize],
        rows_b: &[usize],
        target: &dyn RowPolicy,
    ) -> Result<(f64, crate::nn::Gradients)> {
        let dim = data.state_dim;
        let with_initial = matches!(self.loss, RatioLossKind::Discounted { .. });
        let mut inputs = Vec::new();
        let mut counts = Vec::new();
        let mut rhos = Vec::new();
        for rows in [rows_a, rows_b] {
            let probs = target.logged_action_probs(data, rows)?;
            rhos.push(importance_ratios(data, rows, &probs)?);
            data.gather_states(rows, &mut inputs);
            data.gather_next_states(rows, &mut inputs);
            if with_initial {
                data.gather_initial_states(rows, &mut inputs);
            }
            counts.push(rows.len());
        }
        let per = if with_initial { 3 } else { 2 };
        let total = inputs.len() / dim;
        let x = DenseMatrix::from_vec(total, dim, inputs)?;
        let fwd = self.net.forward(&x)?;
        let w_all = fwd.output.as_slice();
        let (na, nb) = (counts[0], counts[1]);
        let off_b = per * na;
        let slice = |off: usize, k: usize, n: usize| &w_all[off + k * n..off + (k + 1) * n];
        let xs = x.as_slice();
        let st = |off: usize, k: usize, n: usize| &xs[(off + k * n) * dim..(off + (k + 1) * n) * dim];
        let empty: &[f64] = &[];
        let side_a = RatioSide {
            next_states: st(0, 1, na),
            initial_states: if with_initial { st(0, 2, na) } else { empty },
            rho: &rhos[0],
            w: slice(0, 0, na),
            w_next: slice(0, 1, na),
            w_initial: if with_initial { slice(0, 2, na) } else { empty },
        };
        let side_b = RatioSide {
            next_states: st(off_b, 1, nb),
            initial_states: if with_initial { st(off_b, 2, nb) } else { empty },
            rho: &rhos[1],
            w: slice(off_b, 0, nb),
            w_next: slice(off_b, 1, nb),
            w_initial: if with_initial { slice(off_b, 2, nb) } else { empty },
        };
        let (loss, ga, gb) = match self.loss {
            RatioLossKind::Average => kernel_loss_average(&side_a, &side_b, dim, self.kernel.bandwidth)?,
            RatioLossKind::Discounted { gamma } => {
                kernel_loss_discounted(&side_a, &side_b, dim, self.kernel.bandwidth, gamma)?
            }
        };
        let mut upstream = Vec::with_capacity(total);
        for g in [&ga, &gb] {
            upstream.extend_from_slice(&g.w);
            upstream.extend_from_slice(&g.w_next);
            if with_initial {
                upstream.extend_from_slice(&g.w_initial);
            }
        }
        let up = DenseMatrix::from_vec(total, 1, upstream)?;
        let grads = self.net.param_gradients(&x, &fwd, &up)?;
        Ok((loss, grads))
    }
}

/// One Adam step on the model's loss with two independent batches drawn by
/// `sampler`. Returns the loss before the step.
pub fn ratio_update_step(
    model: &mut RatioModel,
    data: &PreparedData,
    target: &dyn RowPolicy,
    sampler: &DiscountedSampler,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Empty("ratio batch"));
    }
    let rows_a = sampler.sample_rows(data.n_trajectories, batch_size, rng);
    let rows_b = sampler.sample_rows(data.n_trajectories, batch_size, rng);
    let (loss, grads) = model.loss_and_gradient(data, &rows_a, &rows_b, target)?;
    model.optimizer.step(&mut model.net, &grads, None)?;
    Ok(loss)
}

/// `d^pi(s) / d^mu(s)` from exact occupancies; states unvisited by both map
/// to 0.
pub fn exact_ratio_tabular(mdp: &TabularMdp, target: &PolicyTable, behavior: &PolicyTable) -> Result<Vec<f64>> {
    let d_pi = exact_occupancy(mdp, target)?;
    let d_mu = exact_occupancy(mdp, behavior)?;
    d_pi.iter()
        .zip(&d_mu)
        .enumerate()
        .map(|(s, (&p, &m))| {
            if m > 0.0 {
                Ok(p / m)
            } else if p > 0.0 {
                Err(Error::CoverageViolation { state: s })
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_differences, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_values() {
        assert_eq!(rbf_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7), 1.0);
        assert_eq!(rbf_kernel(&[0.0], &[1e6], 1.0), 0.0);
        let k = rbf_kernel(&[0.0, 0.0], &[0.6, 0.8], 1.0);
        assert!((k - math::exp(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn median_heuristic_cases() {
        assert!((median_bandwidth(&[0.0, 0.0, 3.0, 4.0], 2) - 5.0).abs() < 1e-15);
        assert_eq!(median_bandwidth(&[0.0, 1.0, 2.0], 1), 1.0);
        assert_eq!(median_bandwidth(&[0.5, 0.5, 0.5, 0.5], 1), 1.0);
    }

    #[test]
    fn delta_cases() {
        assert_eq!(delta(&[1.0; 3], &[1.0; 3], &[1.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(delta(&[1.0], &[2.0], &[1.0]).unwrap(), vec![1.0]);
        assert!(delta(&[1.0], &[2.0, 1.0], &[1.0]).is_err());
    }

    fn random_side(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> [Vec<f64>; 6] {
        let mut v = |len: usize, lo: f64, hi: f64| (0..len).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        [v(n * dim, -1.0, 1.0), v(n * dim, -1.0, 1.0), v(n, 0.2, 3.0), v(n, 0.1, 2.0), v(n, 0.1, 2.0), v(n, 0.1, 2.0)]
    }

    fn side(v: &[Vec<f64>; 6]) -> RatioSide<'_> {
        RatioSide {
            next_states: &v[0],
            initial_states: &v[1],
            rho: &v[2],
            w: &v[3],
            w_next: &v[4],
            w_initial: &v[5],
        }
    }

    #[test]
    fn kernel_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, dim) = (7, 3);
        let a = random_side(&mut rng, n, dim);
        let b = random_side(&mut rng, n, dim);
        for variant in 0..2 {
            let eval = |wa: &[f64]| -> (f64, RatioSideGrad, RatioSideGrad) {
                let (w, wn, w0) = (&wa[..n], &wa[n..2 * n], &wa[2 * n..]);
                let sa = RatioSide { w, w_next: wn, w_initial: w0, ..side(&a) };
                if variant == 0 {
                    kernel_loss_discounted(&sa, &side(&b), dim, 0.8, 0.9).unwrap()
                } else {
                    kernel_loss_average(&sa, &side(&b), dim, 0.8).unwrap()
                }
            };
            let mut point = a[3].clone();
            point.extend_from_slice(&a[4]);
            point.extend_from_slice(&a[5]);
            let (_, ga, _) = eval(&point);
            let mut analytic = ga.w.clone();
            analytic.extend_from_slice(&ga.w_next);
            if variant == 0 {
                analytic.extend_from_slice(&ga.w_initial);
            } else {
                analytic.extend(core::iter::repeat(0.0).take(n));
            }
            let mut f = |p: &[f64]| eval(p).0;
            let num = central_differences(&point, &mut f, 1e-5);
            for (x, y) in analytic.iter().zip(&num) {
                assert!(relative_error(*x, *y) < 1e-6, "variant {variant}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn average_loss_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_side(&mut rng, 9, 2);
        let b = random_side(&mut rng, 9, 2);
        let base = kernel_loss_average(&side(&a), &side(&b), 2, 1.0).unwrap().0;
        for c in [4.0, 0.125, 3.7] {
            let scale = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<f64>>();
            let (wa, wna, wb, wnb) = (scale(&a[3]), scale(&a[4]), scale(&b[3]), scale(&b[4]));
            let sa = RatioSide { w: &wa, w_next: &wna, ..side(&a) };
            let sb = RatioSide { w: &wb, w_next: &wnb, ..side(&b) };
            let scaled = kernel_loss_average(&sa, &sb, 2, 1.0).unwrap().0;
            if c == 4.0 || c == 0.125 {
                assert_eq!(scaled, base);
            } else {
                assert!((scaled - base).abs() <= 1e-12 * base.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn zero_residual_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = random_side(&mut rng, 5, 2);
        let mut b = random_side(&mut rng, 5, 2);
        for v in [&mut a, &mut b] {
            v[2] = vec![1.0; 5];
            v[3] = vec![1.0; 5];
            v[4] = vec![1.0; 5];
            v[5] = vec![1.0; 5];
        }
        assert_eq!(kernel_loss_discounted(&side(&a), &side(&b), 2, 1.0, 0.9).unwrap().0, 0.0);
        assert_eq!(kernel_loss_average(&side(&a), &side(&b), 2, 1.0).unwrap().0, 0.0);
    }

    #[test]
    fn exact_ratio_two_state_chain() {
        // action 0 stays put, action 1 jumps to the other state
        let mdp = TabularMdp::new(
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            ],
            vec![vec![0.0; 2]; 2],
            0.5,
            vec![1.0, 0.0],
            None,
        )
        .unwrap();
        let stay = PolicyTable::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let mu = PolicyTable::uniform(2, 2);
        let w = exact_ratio_tabular(&mdp, &stay, &mu).unwrap();
        // mu: the state is a fair coin after t = 0, so d(A) = (1 - g) + g/2 = 3/4
        assert!((w[0] - 1.0 / 0.75).abs() < 1e-9);
        assert_eq!(w[1], 0.0);
        let ident = exact_ratio_tabular(&mdp, &mu, &mu).unwrap();
        assert!(ident.iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert!(matches!(
            exact_ratio_tabular(&mdp, &mu, &stay),
            Err(Error::CoverageViolation { state: 1 })
        ));
    }

    #[test]
    fn exact_ratio_has_unit_mean_under_behavior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mdp = TabularMdp::random(5, 3, 0.9, 5, None, &mut rng).unwrap();
            let mu = PolicyTable::random(5, 3, 0.0, &mut rng);
            let pi = PolicyTable::random(5, 3, 0.4, &mut rng);
            let w = exact_ratio_tabular(&mdp, &pi, &mu).unwrap();
            let d_mu = exact_occupancy(&mdp, &mu).unwrap();
            let m: f64 = w.iter().zip(&d_mu).map(|(a, b)| a * b).sum();
            assert!((m - 1.0).abs() < 1e-12);
        }
    }
}
