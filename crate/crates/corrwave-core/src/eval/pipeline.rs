//! End-to-end pretrain + fine-tune + test runner shared by the protocol,
//! ablation, and sweep drivers.

use ndarray::Array3;

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::head::{
    detection_forward, finetune, prepare_labeled_clips, DetectionHead, FinetuneConfig,
    LabeledClip,
};
use crate::eval::metrics::{compute_metrics, MetricsReport};
use crate::graph::{cosine_matrix, CoarsePrior};
use crate::nn::{Adam, AggregationMode, EncoderMode, ParamStore, SslModel};
use crate::signal::Recording;
use crate::ssl::{prepare_clips, pretrain, LossRecord, TaskSet};

/// Model-and-training shape of one run (the full model or a variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineSpec {
    pub aggregation: AggregationMode,
    pub encoder_mode: EncoderMode,
    pub tasks: TaskSet,
    /// When false the trunk stays at its random initialization (the
    /// no-pretraining control); the head budget is unchanged.
    pub pretrain: bool,
}

impl PipelineSpec {
    pub fn full() -> Self {
        Self {
            aggregation: AggregationMode::Graph,
            encoder_mode: EncoderMode::PerChannel,
            tasks: TaskSet::ALL,
            pretrain: true,
        }
    }
}

pub struct TrainedPipeline {
    pub store: ParamStore,
    pub model: SslModel,
    pub head: DetectionHead,
    pub prior: Option<CoarsePrior>,
    pub ssl_log: Vec<LossRecord>,
    pub finetune_losses: Vec<f64>,
    /// L2 parameter movement during fine-tuning, per group of interest.
    pub trunk_drift: f64,
    pub head_drift: f64,
}

/// Mean cosine matrix over every segment of every clip.
pub fn prior_from_clips(clips: &[Array3<f32>]) -> Result<CoarsePrior> {
    let mut sum: Option<ndarray::Array2<f64>> = None;
    let mut count = 0usize;
    for clip in clips {
        for t in 0..clip.dim().0 {
            let m = cosine_matrix(&clip.index_axis(ndarray::Axis(0), t));
            match &mut sum {
                Some(acc) => *acc += &m,
                None => sum = Some(m),
            }
            count += 1;
        }
    }
    let sum = sum.ok_or_else(|| {
        crate::error::Error::InvalidArgument("prior needs at least one segment".into())
    })?;
    Ok(CoarsePrior {
        a_coarse: sum / count as f64,
    })
}

/// Build, pretrain, and fine-tune one model.
pub fn train_pipeline(
    cfg: &RunConfig,
    spec: &PipelineSpec,
    ssl_clips: &[Array3<f32>],
    labeled: &[LabeledClip],
    seed: u64,
) -> Result<TrainedPipeline> {
    let channels = cfg.synth.channels;
    let mut store = ParamStore::new();
    let dims = cfg.model_dims();
    let model = SslModel::new(
        &mut store,
        dims,
        channels,
        spec.aggregation,
        spec.encoder_mode,
        seed,
    );
    let head = DetectionHead::new(&mut store, &dims, seed);

    let prior = if spec.aggregation == AggregationMode::Graph {
        Some(prior_from_clips(ssl_clips)?)
    } else {
        None
    };

    let mut adam = Adam::new(&store);
    let mut ssl_log = Vec::new();
    if spec.pretrain {
        let mut pre_cfg = cfg.pretrain_config();
        pre_cfg.seed = seed;
        pretrain(
            &mut store,
            &model,
            &mut adam,
            ssl_clips,
            prior.as_ref(),
            &pre_cfg,
            &spec.tasks,
            |record| ssl_log.push(record.clone()),
        )?;
    }

    let before_finetune = store.clone();
    let ft_cfg = FinetuneConfig {
        epochs: cfg.downstream.epochs,
        batch_clips: cfg.downstream.batch_clips,
        trunk_lr: cfg.downstream.trunk_lr,
        head_lr: cfg.downstream.head_lr,
        weight_decay: cfg.downstream.weight_decay,
        seed,
    };
    let mut ft_adam = Adam::new(&store);
    let finetune_losses = finetune(&mut store, &model, &head, &mut ft_adam, labeled, &ft_cfg)?;
    let trunk_drift = store.group_delta_l2(&before_finetune, crate::nn::ParamGroup::Trunk);
    let head_drift = store.group_delta_l2(&before_finetune, crate::nn::ParamGroup::DetectHead);

    Ok(TrainedPipeline {
        store,
        model,
        head,
        prior,
        ssl_log,
        finetune_losses,
        trunk_drift,
        head_drift,
    })
}

/// Score labeled clips and compute channel-wise detection metrics over all
/// `(segment, channel)` cells.
pub fn evaluate_clips(
    trained: &TrainedPipeline,
    clips: &[LabeledClip],
    threshold: f64,
) -> Result<MetricsReport> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for clip in clips {
        let probs = detection_forward(
            &trained.store,
            &trained.model,
            &trained.head,
            &clip.segments,
        )?;
        for (p, &y) in probs.iter().zip(clip.labels.iter()) {
            scores.push(*p);
            labels.push(y);
        }
    }
    compute_metrics(&scores, &labels, threshold)
}

/// Convenience: prepare SSL and labeled clips from raw recordings.
pub fn prepare_all(
    ssl: &[Recording],
    labeled: &[Recording],
    window: usize,
) -> Result<(Vec<Array3<f32>>, Vec<LabeledClip>)> {
    Ok((
        prepare_clips(ssl, window)?,
        prepare_labeled_clips(labeled, window)?,
    ))
}
