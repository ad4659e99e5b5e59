//! Loss builders for the three pretext tasks.

use ndarray::{Array1, Array2, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::delayed_cosine;
use crate::graph::fine::FineGraphVars;
use crate::nn::layers::aggregate_neighbors;
use crate::nn::{ensure_finite, AggregationMode, ContextForward, SslModel, Tape, Var, VarMap};
use crate::ssl::negatives::sample_candidate_slots;

/// Fraction of delayed pseudo-labels kept per `(t, i)` anchor.
pub const DELAYED_KEEP_FRACTION: f64 = 0.5;

/// Build the full context rows `c = Concat(c_self, c_other)` (or just
/// `c_self` for self-only aggregation) at position `tau`.
pub fn build_context_rows(
    tape: &mut Tape,
    vars: &VarMap,
    model: &SslModel,
    fwd: &ContextForward,
    graphs: Option<&[FineGraphVars]>,
    tau: usize,
) -> Result<Var> {
    let c_self_tau = fwd.c_self_steps[tau];
    let channels = fwd.channels;
    let n_seg = fwd.n_seg;
    match model.aggregation {
        AggregationMode::SelfOnly => Ok(c_self_tau),
        AggregationMode::Graph => {
            let graphs = graphs.ok_or_else(|| {
                Error::InvalidArgument("graph aggregation requires sampled fine graphs".into())
            })?;
            if graphs.len() != n_seg {
                return Err(Error::Shape {
                    what: "fine graphs".into(),
                    expected: format!("{n_seg} segments"),
                    actual: format!("{}", graphs.len()),
                });
            }
            let theta = vars.get(
                &model
                    .theta
                    .as_ref()
                    .expect("graph aggregation requires theta")
                    .weight,
            );
            let mut parts = Vec::with_capacity(n_seg);
            for (seg, graph) in graphs.iter().enumerate() {
                let cs_seg = tape.slice_rows(c_self_tau, seg * channels, channels);
                parts.push(aggregate_neighbors(tape, cs_seg, graph.a_t, theta));
            }
            let c_other = tape.concat_rows(&parts);
            Ok(tape.concat_cols(c_self_tau, c_other))
        }
        AggregationMode::MlpAgg => {
            let rows = n_seg * channels;
            let d_ar = model.dims.d_ar;
            let mut feat: Option<Var> = None;
            for j in 0..channels {
                let idx: Vec<usize> =
                    (0..rows).map(|row| (row / channels) * channels + j).collect();
                let gathered = tape.gather_rows(c_self_tau, idx);
                let mut mask = Array2::ones((rows, d_ar));
                for seg in 0..n_seg {
                    mask.row_mut(seg * channels + j).fill(0.0);
                }
                let block = tape.mul_mask(gathered, mask.into_dyn());
                feat = Some(match feat {
                    Some(f) => tape.concat_cols(f, block),
                    None => block,
                });
            }
            let mlp = model.agg_mlp.as_ref().expect("mlp aggregation weights");
            let pre = mlp.forward(tape, vars, feat.expect("at least one channel"));
            let c_other = tape.relu(pre);
            Ok(tape.concat_cols(c_self_tau, c_other))
        }
    }
}

/// Contrastive future prediction over the candidate pool.
///
/// For every `(segment, channel, k1)` the positive is the channel's own
/// local code `k1` steps past `tau`; negatives come uniformly from all
/// slots in the batch. Returns the mean cross-entropy.
pub fn instantaneous_loss(
    tape: &mut Tape,
    vars: &VarMap,
    model: &SslModel,
    fwd: &ContextForward,
    graphs: Option<&[FineGraphVars]>,
    tau: usize,
    n_candidates: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Var> {
    let k1_max = model.dims.k1_max;
    if tau + k1_max >= fwd.t_len {
        return Err(Error::InvalidArgument(format!(
            "tau = {tau} with k1_max = {k1_max} exceeds encoded length {}",
            fwd.t_len
        )));
    }
    let context = build_context_rows(tape, vars, model, fwd, graphs, tau)?;
    let rows = fwd.n_seg * fwd.channels;
    let pool = rows * fwd.t_len;
    let mut per_step = Vec::with_capacity(k1_max);
    for k1 in 1..=k1_max {
        let w_k = vars.get(&model.w_steps[k1 - 1]);
        let u = tape.matmul(context, w_k);
        let mut idx = Vec::with_capacity(rows * n_candidates);
        for row in 0..rows {
            let positive = row * fwd.t_len + tau + k1;
            let slots = sample_candidate_slots(pool, positive, n_candidates, rng)?;
            idx.extend(slots);
        }
        let logits = tape.gathered_dot(u, fwd.z_rows, idx, n_candidates);
        ensure_finite(tape, logits, "contrastive logits")?;
        let losses = tape.softmax_xent_rows(logits, vec![0; rows]);
        per_step.push(tape.mean_all(losses));
    }
    Ok(crate::nn::mean_vars(tape, &per_step))
}

/// One kept delayed-task pair: global `(segment, channel)` rows into the
/// pooled representations plus its pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayedPair {
    pub anchor_row: usize,
    pub future_row: usize,
    pub label: u8,
}

/// Pseudo-labels for one clip's delayed time-shift task.
///
/// For each anchor `(t, i)` with full `K2` lookahead, every `(k2, j)` pair
/// is labeled by thresholding the raw-data cosine at `theta2`; exactly
/// `floor(0.5 * K2 * C)` labels are kept per anchor, uniformly at random.
/// `seg_offset` positions the clip inside the batch's global segment index.
pub fn delayed_pseudo_labels(
    segments: &ArrayView3<f32>,
    seg_offset: usize,
    theta2: f64,
    k2_steps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<DelayedPair>> {
    let (n_seg, _, channels) = segments.dim();
    if n_seg <= k2_steps {
        return Err(Error::InvalidArgument(format!(
            "clip has {n_seg} segments; delayed task needs at least {}",
            k2_steps + 1
        )));
    }
    let keep = ((DELAYED_KEEP_FRACTION * (k2_steps * channels) as f64).floor()) as usize;
    let mut out = Vec::new();
    for t in 0..n_seg - k2_steps {
        for i in 0..channels {
            let b = delayed_cosine(segments, t, i, k2_steps)?;
            // Partial Fisher-Yates selection of the kept (k2, j) entries.
            let mut slots: Vec<usize> = (0..k2_steps * channels).collect();
            for pick in 0..keep {
                let swap = rng.random_range(pick..slots.len());
                slots.swap(pick, swap);
            }
            let mut kept: Vec<usize> = slots[..keep].to_vec();
            kept.sort_unstable();
            for slot in kept {
                let k2 = slot / channels + 1;
                let j = slot % channels;
                let label = u8::from(b[[k2 - 1, j]] >= theta2);
                out.push(DelayedPair {
                    anchor_row: (seg_offset + t) * channels + i,
                    future_row: (seg_offset + t + k2) * channels + j,
                    label,
                });
            }
        }
    }
    Ok(out)
}

/// Binary cross-entropy of the two-logit pair classifier over kept pairs.
pub fn delayed_loss(
    tape: &mut Tape,
    vars: &VarMap,
    model: &SslModel,
    pooled: Var,
    pairs: &[DelayedPair],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "delayed loss needs at least one kept pair".into(),
        ));
    }
    let anchors: Vec<usize> = pairs.iter().map(|p| p.anchor_row).collect();
    let futures: Vec<usize> = pairs.iter().map(|p| p.future_row).collect();
    let a = tape.gather_rows(pooled, anchors);
    let b = tape.gather_rows(pooled, futures);
    let feats = tape.concat_cols(a, b);
    let logits = model.delay_head.forward(tape, vars, feats);
    ensure_finite(tape, logits, "delayed-task logits")?;
    let targets: Vec<usize> = pairs.iter().map(|p| p.label as usize).collect();
    let losses = tape.softmax_xent_rows(logits, targets);
    Ok(tape.mean_all(losses))
}

/// Replacement plan for one batch: where each slot reads its local code
/// from, and the per-slot labels.
#[derive(Debug, Clone)]
pub struct ReplacePlan {
    /// Source row per slot, in slot order `(segment, channel, time)`.
    pub gather_idx: Vec<usize>,
    /// Label per slot (same order): 1 when the source channel differs.
    pub slot_labels: Vec<u8>,
    /// `(slot, source_slot)` for every replaced position.
    pub replaced: Vec<(usize, usize)>,
}

/// Plan the replace-discriminative corruption: per segment, exactly
/// `floor(r% * T * C)` slots are overwritten by codes copied from uniform
/// `(channel, time)` slots of the same segment.
pub fn corrupt_replace_plan(
    n_seg: usize,
    channels: usize,
    t_len: usize,
    r_percent: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ReplacePlan> {
    if !(0.0..100.0).contains(&r_percent) {
        return Err(Error::InvalidArgument(format!(
            "replace ratio must lie in [0, 100), got {r_percent}"
        )));
    }
    let per_seg = t_len * channels;
    let replace_count = (r_percent / 100.0 * per_seg as f64).floor() as usize;
    let mut gather_idx: Vec<usize> = (0..n_seg * per_seg).collect();
    let mut slot_labels = vec![0u8; n_seg * per_seg];
    let mut replaced = Vec::with_capacity(n_seg * replace_count);
    for seg in 0..n_seg {
        let base = seg * per_seg;
        let mut local: Vec<usize> = (0..per_seg).collect();
        for pick in 0..replace_count {
            let swap = rng.random_range(pick..local.len());
            local.swap(pick, swap);
        }
        let mut chosen: Vec<usize> = local[..replace_count].to_vec();
        chosen.sort_unstable();
        for slot_local in chosen {
            let src_local = rng.random_range(0..per_seg);
            let slot = base + slot_local;
            let src = base + src_local;
            gather_idx[slot] = src;
            let target_channel = slot_local / t_len;
            let source_channel = src_local / t_len;
            slot_labels[slot] = u8::from(source_channel != target_channel);
            replaced.push((slot, src));
        }
    }
    Ok(ReplacePlan {
        gather_idx,
        slot_labels,
        replaced,
    })
}

/// Re-contextualize the corrupted codes and classify each position.
pub fn replace_loss(
    tape: &mut Tape,
    vars: &VarMap,
    model: &SslModel,
    fwd: &ContextForward,
    plan: &ReplacePlan,
) -> Result<Var> {
    let rows = fwd.n_seg * fwd.channels;
    let corrupted_rows = tape.gather_rows(fwd.z_rows, plan.gather_idx.clone());
    let by_time = tape.reshape(corrupted_rows, vec![rows, fwd.t_len, model.dims.d]);
    let corrupted = tape.permute3(by_time, [0, 2, 1]);
    let c_hat_steps = model.contextualize(tape, vars, corrupted);
    let stacked = tape.concat_rows(&c_hat_steps);
    let logits2 = model.replace_head.forward(tape, vars, stacked);
    ensure_finite(tape, logits2, "replace-task logits")?;
    let total = fwd.t_len * rows;
    let logits = tape.reshape(logits2, vec![total]);
    // Stacked rows are ordered (time, segment, channel); map back to slots.
    let mut labels = Array1::zeros(total);
    for r in 0..total {
        let t = r / rows;
        let rem = r % rows;
        let slot = rem * fwd.t_len + t;
        labels[r] = plan.slot_labels[slot] as f64;
    }
    let losses = tape.bce_with_logits(logits, labels);
    Ok(tape.mean_all(losses))
}

/// Per-batch loss summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l3: Option<f64>,
    pub l_joint: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn validate_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    if lambda1 < 0.0 || lambda2 < 0.0 || lambda1 + lambda2 >= 1.0 {
        return Err(Error::Config {
            key: "lambda1/lambda2".into(),
            message: format!(
                "weights must satisfy lambda1 >= 0, lambda2 >= 0, lambda1 + lambda2 < 1; \
                 got lambda1 = {lambda1}, lambda2 = {lambda2}"
            ),
        });
    }
    Ok(())
}

/// Tape-level joint loss over whichever tasks are active:
/// `(1 - lambda1 - lambda2) L1 + lambda1 L2 + lambda2 L3`, with absent
/// tasks contributing zero.
pub fn joint_loss_var(
    tape: &mut Tape,
    l1: Option<Var>,
    l2: Option<Var>,
    l3: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    validate_lambdas(lambda1, lambda2)?;
    let weighted: Vec<Var> = [
        l1.map(|v| (v, 1.0 - lambda1 - lambda2)),
        l2.map(|v| (v, lambda1)),
        l3.map(|v| (v, lambda2)),
    ]
    .into_iter()
    .flatten()
    .map(|(v, w)| tape.scale(v, w))
    .collect();
    if weighted.is_empty() {
        return Err(Error::InvalidArgument("no active tasks".into()));
    }
    let mut acc = weighted[0];
    for &v in &weighted[1..] {
        acc = tape.add(acc, v);
    }
    Ok(acc)
}

/// Value-level joint combination.
pub fn joint_loss(
    l1: f64,
    l2: f64,
    l3: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossReport> {
    validate_lambdas(lambda1, lambda2)?;
    Ok(LossReport {
        l1: Some(l1),
        l2: Some(l2),
        l3: Some(l3),
        l_joint: (1.0 - lambda1 - lambda2) * l1 + lambda1 * l2 + lambda2 * l3,
        lambda1,
        lambda2,
    })
}
