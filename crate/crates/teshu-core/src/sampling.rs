//! Partition-aware sampling and the EFF/COST estimate that drives the
//! adaptive hierarchical shuffle.
//!
//! The destination space is split into `S = max(1, round(1/rate))` groups by
//! a secondary hash of the partition index, so messages for the same
//! destination (and therefore the same key) always share a group on every
//! worker. One random group is gathered at a sampling server and combined to
//! estimate the reduction ratio the combiner would achieve.

use crate::error::{Error, Result};
use crate::hash::{mix64, mix_seed, SplitMix64};
use crate::message::{Message, MessageBuffer};
use crate::registry::{combine_buffer, Combiner, Partitioner};
use crate::topology::{CostModel, Level, Topology};

/// Size of the virtual destination-index space used for grouping. Grouping
/// hashes `part(key, SAMPLING_DOMAIN)` rather than the (often tiny) real
/// destination count, so fine rates still produce non-degenerate groups;
/// key-purity keeps equal keys in one group either way.
pub const SAMPLING_DOMAIN: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Sampled fraction in (0, 1].
    pub rate: f64,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidArgument("sampling rate must be in (0, 1]".into()));
        }
        Ok(Self { rate, seed })
    }

    /// Number of destination groups, `max(1, round(1/rate))`.
    pub fn group_count(&self) -> u64 {
        let s = 1.0 / self.rate + 0.5;
        (s as u64).max(1)
    }
}

/// The group a message belongs to. Depends only on the destination index, so
/// equal-key messages share a group on every worker.
pub fn group_of(msg: &Message, n_dsts: usize, part: &Partitioner, groups: u64) -> u64 {
    debug_assert!(groups >= 1);
    mix64(part.eval(msg.key(), n_dsts) as u64) % groups
}

/// The group index every scope worker agrees on for one SAMP, derived from a
/// shared seed without communication. `stage` distinguishes successive SAMPs
/// of the same shuffle.
pub fn sample_group_index(cfg: &SamplingConfig, shuffle_id: u64, stage: u64, groups: u64) -> u64 {
    mix_seed(&[cfg.seed, shuffle_id, stage]) % groups
}

/// Messages of `buf` that fall into `group`.
pub fn extract_group(
    buf: &MessageBuffer,
    n_dsts: usize,
    part: &Partitioner,
    groups: u64,
    group: u64,
) -> MessageBuffer {
    buf.iter()
        .filter(|m| group_of(m, n_dsts, part, groups) == group)
        .cloned()
        .collect()
}

/// The uniform-random baseline: each message kept independently with
/// probability `rate`.
pub fn samp_random(buf: &MessageBuffer, rate: f64, seed: u64) -> Result<MessageBuffer> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument("sampling rate must be in (0, 1]".into()));
    }
    let mut rng = SplitMix64::new(mix_seed(&[seed, 0x72616e64]));
    Ok(buf.iter().filter(|_| rng.next_f64() < rate).cloned().collect())
}

/// Estimated reduction ratio: bytes after combining over bytes before,
/// 1.0 for an empty sample.
pub fn estimate_reduction(sample: &MessageBuffer, comb: &Combiner) -> f64 {
    if sample.is_empty() {
        return 1.0;
    }
    combine_buffer(sample, comb).total_bytes() as f64 / sample.total_bytes() as f64
}

/// The estimated benefit and cost of executing one hierarchy level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffCost {
    /// Seconds saved downstream by the reduced data.
    pub eff: f64,
    /// Seconds the level itself would take.
    pub cost: f64,
}

impl EffCost {
    pub fn worth_it(&self) -> bool {
        self.eff > self.cost
    }
}

/// The level whose bandwidth prices the bytes a local combine avoids: the
/// next hop the data will traverse after shuffling at `level`.
pub fn next_level(level: Level) -> Level {
    match level {
        Level::Worker | Level::Server => Level::Rack,
        Level::Rack | Level::Global => Level::Global,
    }
}

/// EFF/COST for shuffling `total_scope_bytes` among `scope_size` workers at
/// `level`, given the sampled reduction ratio:
///
/// * cost: move the (1 - 1/k) remote share of the data at this level, plus
///   combining every byte once;
/// * eff: the bytes the combine removes, priced at the next level's
///   bandwidth.
pub fn compute_eff_cost(
    total_scope_bytes: u64,
    scope_size: usize,
    r_hat: f64,
    level: Level,
    topo: &Topology,
    cm: &CostModel,
) -> EffCost {
    debug_assert!(scope_size >= 1);
    let b = total_scope_bytes as f64;
    let k = scope_size as f64;
    let cost = cm.transfer_time(b * (k - 1.0) / k, level, topo) + cm.combine_time(b);
    let eff = (1.0 - r_hat) * b / cm.bandwidth(next_level(level), topo);
    EffCost { eff, cost }
}
