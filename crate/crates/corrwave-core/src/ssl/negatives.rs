//! Negative sampling for the contrastive task.
//!
//! Candidates are local-code slots `(segment, channel, time)` of the
//! current batch. Negatives are drawn uniformly without replacement from
//! the whole pool (all channels, all times) minus the positive slot.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePool {
    AllChannelsAllTimes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NegativeSampleSpec {
    /// Total samples per contrast: 1 positive + `n - 1` negatives.
    pub n: usize,
    pub pool: NegativePool,
}

impl NegativeSampleSpec {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            pool: NegativePool::AllChannelsAllTimes,
        }
    }
}

/// Sample the candidate set for one contrast: the positive slot first, then
/// `n - 1` distinct negatives drawn uniformly from `0..pool_size` minus the
/// positive.
pub fn sample_candidate_slots(
    pool_size: usize,
    positive: usize,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("candidate count must be >= 1".into()));
    }
    if pool_size < n {
        return Err(Error::InvalidArgument(format!(
            "negative pool has {pool_size} slots but {n} candidates were requested; \
             use a larger batch or a smaller N"
        )));
    }
    let mut out = Vec::with_capacity(n);
    out.push(positive);
    let mut seen: HashSet<usize> = HashSet::with_capacity(n);
    seen.insert(positive);
    while out.len() < n {
        let cand = rng.random_range(0..pool_size);
        if seen.insert(cand) {
            out.push(cand);
        }
    }
    Ok(out)
}
