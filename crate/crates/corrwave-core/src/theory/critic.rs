//! Bilinear critics for the contrastive bound check.
//!
//! The critic scores a candidate future against a context as
//! `phi_c(context)^T W phi_x(x)` with quadratic feature maps, which spans
//! the optimal Gaussian log density ratio (it needs `x*c` and `x^2`
//! terms), so the softmax cross-entropy objective is convex in `W` and
//! plain Adam reaches the optimum. Negatives are fresh draws from the
//! channel-marginal mixture, which is standard normal here by
//! construction.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::theory::GaussianChannelSpec;

const X_FEATURES: usize = 3;

fn future_features(x: f64) -> [f64; X_FEATURES] {
    [x, x * x, 1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    SelfOnly,
    WithNeighbors,
}

impl ContextMode {
    fn dim(&self) -> usize {
        match self {
            ContextMode::SelfOnly => 3,
            ContextMode::WithNeighbors => 6,
        }
    }

    /// Feature map over (own context, mean of the other contexts).
    fn features(&self, own: f64, neighbor_mean: f64) -> Vec<f64> {
        match self {
            ContextMode::SelfOnly => vec![own, own * own, 1.0],
            ContextMode::WithNeighbors => vec![
                own,
                neighbor_mean,
                own * own,
                neighbor_mean * neighbor_mean,
                own * neighbor_mean,
                1.0,
            ],
        }
    }
}

/// Bilinear critic with inline Adam state.
struct Critic {
    mode: ContextMode,
    w: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Critic {
    fn new(mode: ContextMode) -> Self {
        let dim = mode.dim();
        Self {
            mode,
            w: Array2::zeros((dim, X_FEATURES)),
            m: Array2::zeros((dim, X_FEATURES)),
            v: Array2::zeros((dim, X_FEATURES)),
            t: 0,
        }
    }

    /// Cross-entropy of candidate set `(positive first)` and, optionally,
    /// the gradient accumulated into `grad`.
    fn row_loss(
        &self,
        own: f64,
        neighbor_mean: f64,
        candidates: &[f64],
        mut grad: Option<&mut Array2<f64>>,
    ) -> f64 {
        let fc = self.mode.features(own, neighbor_mean);
        let logits: Vec<f64> = candidates
            .iter()
            .map(|&x| {
                let fx = future_features(x);
                let mut s = 0.0;
                for (a, &fca) in fc.iter().enumerate() {
                    for (b, &fxb) in fx.iter().enumerate() {
                        s += fca * self.w[[a, b]] * fxb;
                    }
                }
                s
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - logits[0];
        if let Some(grad) = grad.as_deref_mut() {
            for (n, &x) in candidates.iter().enumerate() {
                let p = exps[n] / sum;
                let coeff = p - f64::from(u8::from(n == 0));
                let fx = future_features(x);
                for (a, &fca) in fc.iter().enumerate() {
                    for (b, &fxb) in fx.iter().enumerate() {
                        grad[[a, b]] += coeff * fca * fxb;
                    }
                }
            }
        }
        loss
    }

    fn adam_step(&mut self, grad: &Array2<f64>, lr: f64) {
        self.t += 1;
        let b1: f64 = 0.9;
        let b2: f64 = 0.999;
        let bias1 = 1.0 - b1.powi(self.t);
        let bias2 = 1.0 - b2.powi(self.t);
        ndarray::Zip::from(&mut self.w)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + 1e-8);
            });
    }
}

/// One joint draw of all contexts and futures.
struct JointSample {
    contexts: Vec<f64>,
    futures: Vec<f64>,
}

fn draw_joint(spec: &GaussianChannelSpec, rng: &mut ChaCha12Rng) -> JointSample {
    let k = spec.rho_cross;
    let g = spec.shared_gain;
    let shared: f64 = StandardNormal.sample(rng);
    let contexts: Vec<f64> = (0..spec.n_channels)
        .map(|_| {
            let u: f64 = StandardNormal.sample(rng);
            k.sqrt() * shared + (1.0 - k).sqrt() * u
        })
        .collect();
    let futures: Vec<f64> = (0..spec.n_channels)
        .map(|i| {
            let eps: f64 = StandardNormal.sample(rng);
            spec.rho_temporal[i] * contexts[i] + g * shared
                + spec.noise_variance(i).sqrt() * eps
        })
        .collect();
    JointSample { contexts, futures }
}

fn neighbor_mean(contexts: &[f64], i: usize) -> f64 {
    let n = contexts.len();
    if n <= 1 {
        return 0.0;
    }
    let total: f64 = contexts.iter().sum();
    (total - contexts[i]) / (n - 1) as f64
}

/// Result of one trained-and-evaluated bound check.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundReport {
    pub per_channel_true_mi: Vec<f64>,
    /// `ln N - mean per-channel loss`.
    pub per_channel_mi_estimate: Vec<f64>,
    /// Sum over channels of the mean contrastive loss.
    pub estimated_loss: f64,
    /// `sum_i (-MI_i + ln N)`.
    pub bound_rhs: f64,
    pub satisfied: bool,
    pub monte_carlo_stderr: f64,
    pub n_candidates: usize,
    pub diverged: bool,
}

const EVAL_ROWS_PER_CHANNEL: usize = 4000;

struct EvalStats {
    /// Per channel, per eval row.
    row_losses: Vec<Vec<f64>>,
}

impl EvalStats {
    fn channel_means(&self) -> Vec<f64> {
        self.row_losses
            .iter()
            .map(|rows| rows.iter().sum::<f64>() / rows.len() as f64)
            .collect()
    }

    fn sum_stderr(&self) -> f64 {
        let mut var_sum = 0.0;
        for rows in &self.row_losses {
            let n = rows.len() as f64;
            let mean = rows.iter().sum::<f64>() / n;
            let var = rows.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0);
            var_sum += var / n;
        }
        var_sum.sqrt()
    }
}

fn train_critics(
    spec: &GaussianChannelSpec,
    modes: &[ContextMode],
    n_candidates: usize,
    train_steps: usize,
    lr: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<Critic> {
    let mut critics: Vec<Critic> = modes.iter().map(|&m| Critic::new(m)).collect();
    for _ in 0..train_steps {
        let mut grads: Vec<Array2<f64>> = critics
            .iter()
            .map(|c| Array2::zeros(c.w.raw_dim()))
            .collect();
        let rows = spec.samples_per_batch * spec.n_channels;
        for _ in 0..spec.samples_per_batch {
            let joint = draw_joint(spec, rng);
            for i in 0..spec.n_channels {
                let mut candidates = Vec::with_capacity(n_candidates);
                candidates.push(joint.futures[i]);
                for _ in 1..n_candidates {
                    // Mixture of marginals: every channel's future is
                    // marginally standard normal.
                    candidates.push(StandardNormal.sample(rng));
                }
                let nb = neighbor_mean(&joint.contexts, i);
                for (critic, grad) in critics.iter().zip(grads.iter_mut()) {
                    critic.row_loss(joint.contexts[i], nb, &candidates, Some(grad));
                }
            }
        }
        for (critic, mut grad) in critics.iter_mut().zip(grads) {
            grad /= rows as f64;
            critic.adam_step(&grad, lr);
        }
    }
    critics
}

fn evaluate_critics(
    spec: &GaussianChannelSpec,
    critics: &[Critic],
    n_candidates: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<EvalStats> {
    let mut stats: Vec<EvalStats> = critics
        .iter()
        .map(|_| EvalStats {
            row_losses: vec![Vec::with_capacity(EVAL_ROWS_PER_CHANNEL); spec.n_channels],
        })
        .collect();
    for _ in 0..EVAL_ROWS_PER_CHANNEL {
        let joint = draw_joint(spec, rng);
        for i in 0..spec.n_channels {
            let mut candidates = Vec::with_capacity(n_candidates);
            candidates.push(joint.futures[i]);
            for _ in 1..n_candidates {
                candidates.push(StandardNormal.sample(rng));
            }
            let nb = neighbor_mean(&joint.contexts, i);
            for (critic, stat) in critics.iter().zip(stats.iter_mut()) {
                let loss = critic.row_loss(joint.contexts[i], nb, &candidates, None);
                stat.row_losses[i].push(loss);
            }
        }
    }
    stats
}

fn report_from(
    spec: &GaussianChannelSpec,
    stats: &EvalStats,
    true_mi: Vec<f64>,
    n_candidates: usize,
) -> BoundReport {
    let ln_n = (n_candidates as f64).ln();
    let means = stats.channel_means();
    let estimated_loss: f64 = means.iter().sum();
    let stderr = stats.sum_stderr();
    let bound_rhs: f64 = true_mi.iter().map(|mi| ln_n - mi).sum();
    let diverged = means.iter().any(|&m| m > ln_n + 1.0);
    BoundReport {
        per_channel_mi_estimate: means.iter().map(|&m| ln_n - m).collect(),
        per_channel_true_mi: true_mi,
        estimated_loss,
        bound_rhs,
        satisfied: estimated_loss >= bound_rhs - 3.0 * stderr,
        monte_carlo_stderr: stderr,
        n_candidates,
        diverged,
    }
}

const CRITIC_LR: f64 = 0.02;

/// Train a single-channel critic and check `L >= -MI + ln N`.
pub fn single_channel_cpc_bound(
    spec: &GaussianChannelSpec,
    n_candidates: usize,
    train_steps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<BoundReport> {
    spec.validate()?;
    if n_candidates < 2 {
        return Err(crate::error::Error::InvalidArgument(
            "bound check needs at least 2 candidates".into(),
        ));
    }
    let critics = train_critics(
        spec,
        &[ContextMode::SelfOnly],
        n_candidates,
        train_steps,
        CRITIC_LR,
        rng,
    );
    let stats = evaluate_critics(spec, &critics, n_candidates, rng);
    let true_mi: Vec<f64> = (0..spec.n_channels).map(|i| spec.channel_self_mi(i)).collect();
    Ok(report_from(spec, &stats[0], true_mi, n_candidates))
}

/// Both aggregation modes trained on identical draws.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundPair {
    pub self_only: BoundReport,
    pub with_neighbors: BoundReport,
    /// Mean over channels of the paired MI-estimate gain
    /// (with-neighbors minus self-only).
    pub mi_gain: f64,
    pub mi_gain_stderr: f64,
}

/// Train self-only and with-neighbors critics on the same data and verify
/// the bound for both; the paired gain realizes the aggregation advantage.
pub fn multi_channel_cpc_bound(
    spec: &GaussianChannelSpec,
    n_candidates: usize,
    train_steps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<BoundPair> {
    spec.validate()?;
    if spec.n_channels < 2 {
        return Err(crate::error::Error::InvalidArgument(
            "multi-channel bound needs at least 2 channels".into(),
        ));
    }
    let critics = train_critics(
        spec,
        &[ContextMode::SelfOnly, ContextMode::WithNeighbors],
        n_candidates,
        train_steps,
        CRITIC_LR,
        rng,
    );
    let stats = evaluate_critics(spec, &critics, n_candidates, rng);
    let self_mi: Vec<f64> = (0..spec.n_channels).map(|i| spec.channel_self_mi(i)).collect();
    let full_mi: Vec<f64> = (0..spec.n_channels).map(|i| spec.channel_full_mi(i)).collect();

    // Paired per-row loss differences (self minus neighbors): positive
    // differences mean the neighbor-aware critic extracts more.
    let n = spec.n_channels as f64;
    let mut gain = 0.0;
    let mut var_sum = 0.0;
    for i in 0..spec.n_channels {
        let rows_a = &stats[0].row_losses[i];
        let rows_b = &stats[1].row_losses[i];
        let count = rows_a.len() as f64;
        let diffs: Vec<f64> = rows_a.iter().zip(rows_b).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / count;
        let var =
            diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (count - 1.0);
        gain += mean / n;
        var_sum += var / count / (n * n);
    }

    Ok(BoundPair {
        self_only: report_from(spec, &stats[0], self_mi, n_candidates),
        with_neighbors: report_from(spec, &stats[1], full_mi, n_candidates),
        mi_gain: gain,
        mi_gain_stderr: var_sum.sqrt(),
    })
}
