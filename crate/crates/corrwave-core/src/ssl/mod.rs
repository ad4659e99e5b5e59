//! The three self-supervised objectives and their joint optimization:
//! graph-aggregated contrastive future prediction (instantaneous time
//! shift), delayed-correlation pair classification (delayed time shift),
//! and replace discrimination.

pub mod losses;
pub mod negatives;
pub mod pretrain;

pub use losses::{
    corrupt_replace_plan, delayed_loss, delayed_pseudo_labels, instantaneous_loss, joint_loss,
    joint_loss_var, replace_loss, DelayedPair, LossReport, ReplacePlan,
};
pub use negatives::{sample_candidate_slots, NegativePool, NegativeSampleSpec};
pub use pretrain::{
    prepare_clips, pretrain, LossRecord, PretrainConfig, SslHyper, TaskSet,
};
