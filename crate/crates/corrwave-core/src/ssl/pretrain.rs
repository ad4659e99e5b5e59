//! Joint pretraining over batches of clips.
//!
//! A batch is a set of clips (equal-length runs of consecutive segments).
//! Each step encodes every segment, summarizes per channel, and evaluates
//! whichever pretext tasks are active. Every stochastic choice draws from
//! its own `(seed, domain, step)` stream, so runs replay exactly and
//! disabling one task never shifts another task's randomness.

use ndarray::{Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::fine::{draw_noise, sample_fine_graphs_batch, FineGraphVars};
use crate::graph::CoarsePrior;
use crate::nn::{
    mean_vars, Adam, AggregationMode, GroupSettings, ParamStore, SslModel, Tape, Var, VarMap,
};
use crate::rng;
use crate::signal::{normalize_channels, segment_recording, Recording};
use crate::ssl::losses::{
    corrupt_replace_plan, delayed_loss, delayed_pseudo_labels, instantaneous_loss,
    joint_loss_var, replace_loss, validate_lambdas,
};

/// SSL hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SslHyper {
    pub theta1: f64,
    pub theta2: f64,
    pub k2: usize,
    pub n_negatives: usize,
    pub r_percent: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for SslHyper {
    fn default() -> Self {
        Self {
            theta1: 0.5,
            theta2: 0.5,
            k2: 7,
            n_negatives: 64,
            r_percent: 15.0,
            lambda1: 0.5,
            lambda2: 0.3,
        }
    }
}

/// Which pretext tasks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TaskSet {
    pub instant: bool,
    pub delay: bool,
    pub replace: bool,
}

impl TaskSet {
    pub const ALL: TaskSet = TaskSet {
        instant: true,
        delay: true,
        replace: true,
    };
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_clips: usize,
    pub hyper: SslHyper,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// One training-log record, serialized as a JSON line per batch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l3: Option<f64>,
    pub l_joint: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
}

/// Normalize each recording over its full length, then segment it.
pub fn prepare_clips(recordings: &[Recording], window: usize) -> Result<Vec<Array3<f32>>> {
    recordings
        .iter()
        .map(|rec| {
            let (normalized, _) = normalize_channels(rec)?;
            Ok(segment_recording(&normalized, window)?.segments)
        })
        .collect()
}

/// Tape handles for one batch's losses.
pub struct BatchLossVars {
    pub l1: Option<Var>,
    pub l2: Option<Var>,
    pub l3: Option<Var>,
    pub joint: Var,
    pub tau: usize,
    pub graphs: Option<Vec<FineGraphVars>>,
}

/// Draw the shared context position for a step:
/// uniform over `[k2, t_len - k1_max - 1]` (0-based).
pub fn draw_tau(t_len: usize, k2: usize, k1_max: usize, seed: u64, step: u64) -> Result<usize> {
    if t_len < k2 + k1_max + 1 {
        return Err(Error::Config {
            key: "window_len".into(),
            message: format!(
                "encoded length {t_len} is too short: need K2 + k1_max + 1 = {}",
                k2 + k1_max + 1
            ),
        });
    }
    let mut tau_rng = rng::stream(seed, "ssl-tau", step);
    Ok(tau_rng.random_range(k2..=t_len - k1_max - 1))
}

/// Build every active loss for one batch of clips on the given tape.
///
/// Noise, negatives, pseudo-label masks and corruption draws all come from
/// per-task streams keyed by `(seed, step)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_losses(
    tape: &mut Tape,
    vars: &VarMap,
    model: &SslModel,
    clips: &[&Array3<f32>],
    prior: Option<&CoarsePrior>,
    hyper: &SslHyper,
    tasks: &TaskSet,
    seed: u64,
    step: u64,
) -> Result<BatchLossVars> {
    validate_lambdas(hyper.lambda1, hyper.lambda2)?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n_seg_per_clip = clips[0].dim().0;
    for c in clips {
        if c.dim() != clips[0].dim() {
            return Err(Error::Shape {
                what: "batch clips".into(),
                expected: format!("{:?}", clips[0].dim()),
                actual: format!("{:?}", c.dim()),
            });
        }
    }
    let views: Vec<_> = clips.iter().map(|c| c.view()).collect();
    let segments = ndarray::concatenate(Axis(0), &views).expect("clip concat");

    let fwd = model.forward_context(tape, vars, &segments);
    let tau = draw_tau(fwd.t_len, hyper.k2, model.dims.k1_max, seed, step)?;

    let mut graphs = None;
    let l1 = if tasks.instant {
        if model.aggregation == AggregationMode::Graph {
            let prior = prior.ok_or_else(|| {
                Error::InvalidArgument("graph aggregation requires a coarse prior".into())
            })?;
            let mut noise_rng = rng::stream(seed, "ssl-graph-noise", step);
            let noise = draw_noise(fwd.n_seg, fwd.channels, &mut noise_rng);
            graphs = Some(sample_fine_graphs_batch(
                tape,
                vars,
                model,
                fwd.c_self_steps[tau],
                prior,
                hyper.theta1,
                &noise,
            )?);
        }
        let mut neg_rng = rng::stream(seed, "ssl-negatives", step);
        Some(instantaneous_loss(
            tape,
            vars,
            model,
            &fwd,
            graphs.as_deref(),
            tau,
            hyper.n_negatives,
            &mut neg_rng,
        )?)
    } else {
        None
    };

    let l2 = if tasks.delay {
        let mut mask_rng = rng::stream(seed, "ssl-delay-mask", step);
        let mut pairs = Vec::new();
        for (q, clip) in clips.iter().enumerate() {
            pairs.extend(delayed_pseudo_labels(
                &clip.view(),
                q * n_seg_per_clip,
                hyper.theta2,
                hyper.k2,
                &mut mask_rng,
            )?);
        }
        let pooled = mean_vars(tape, &fwd.c_self_steps);
        Some(delayed_loss(tape, vars, model, pooled, &pairs)?)
    } else {
        None
    };

    let l3 = if tasks.replace {
        let mut corrupt_rng = rng::stream(seed, "ssl-corrupt", step);
        let plan = corrupt_replace_plan(
            fwd.n_seg,
            fwd.channels,
            fwd.t_len,
            hyper.r_percent,
            &mut corrupt_rng,
        )?;
        Some(replace_loss(tape, vars, model, &fwd, &plan)?)
    } else {
        None
    };

    let joint = joint_loss_var(tape, l1, l2, l3, hyper.lambda1, hyper.lambda2)?;
    Ok(BatchLossVars {
        l1,
        l2,
        l3,
        joint,
        tau,
        graphs,
    })
}

/// Run the full pretraining loop, emitting one [`LossRecord`] per batch.
pub fn pretrain(
    store: &mut ParamStore,
    model: &SslModel,
    adam: &mut Adam,
    clips: &[Array3<f32>],
    prior: Option<&CoarsePrior>,
    cfg: &PretrainConfig,
    tasks: &TaskSet,
    mut on_batch: impl FnMut(&LossRecord),
) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no clips to pretrain on".into()));
    }
    let settings = GroupSettings::uniform(cfg.learning_rate, cfg.weight_decay);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, "ssl-shuffle", epoch as u64);
        for pick in 0..order.len() {
            let swap = shuffle_rng.random_range(pick..order.len());
            order.swap(pick, swap);
        }
        for batch_ids in order.chunks(cfg.batch_clips.max(1)) {
            let batch: Vec<&Array3<f32>> = batch_ids.iter().map(|&i| &clips[i]).collect();
            let mut tape = Tape::new();
            let vars = store.inject(&mut tape);
            let losses = batch_losses(
                &mut tape, &vars, model, &batch, prior, &cfg.hyper, tasks, cfg.seed, step,
            )?;
            let record = LossRecord {
                step,
                l1: losses.l1.map(|v| tape.scalar(v)),
                l2: losses.l2.map(|v| tape.scalar(v)),
                l3: losses.l3.map(|v| tape.scalar(v)),
                l_joint: tape.scalar(losses.joint),
                lambda1: cfg.hyper.lambda1,
                lambda2: cfg.hyper.lambda2,
                seed: cfg.seed,
            };
            if !record.l_joint.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "joint loss at step {step}; restore the last saved checkpoint"
                    ),
                });
            }
            let grads = tape.backward(losses.joint);
            adam.step(store, &vars, &grads, &settings);
            on_batch(&record);
            step += 1;
        }
    }
    Ok(())
}
