//! Entropy-history drafting control.
//!
//! A two-level adaptive predictor in the style of a branch predictor. The
//! speculative history holds the entropy buckets of recent draft batches, the
//! committed history holds those of verified batches, and a table of 2-bit
//! saturating counters indexed by the history and the look-ahead depth decides
//! whether drafting further ahead is worthwhile.

use serde::{Deserialize, Serialize};

use crate::error::EdcError;
use crate::queues::{DraftBatch, FeedbackRecord};

pub const HISTORY_LEN: usize = 8;
pub const BUCKETS: u8 = 8;
pub const LLR_MAX: u8 = 7;
pub const PHT_SIZE: usize = 512;
pub const COUNTER_MAX: u8 = 3;
/// Counters at or above this value predict "continue".
pub const COUNTER_TAKEN: u8 = 2;

pub type History = [u8; HISTORY_LEN];

/// Map a batch's mean entropy onto one of eight equal intervals of `[0, h_max]`.
pub fn bucketize(avg_entropy: f64, h_max: f64) -> Result<u8, EdcError> {
    if h_max.is_nan() || h_max <= 0.0 {
        return Err(EdcError::NonPositiveHmax(h_max));
    }
    let b = (f64::from(BUCKETS) * avg_entropy.max(0.0) / h_max).floor();
    Ok((b as u64).min(u64::from(BUCKETS - 1)) as u8)
}

fn group_mean(group: &[u8]) -> u16 {
    group.iter().map(|&b| u16::from(b)).sum::<u16>() / group.len() as u16
}

/// Nine-bit table index: old-group mean, recent-group mean, look-ahead depth.
pub fn pht_index(history: &History, llr: u8) -> u16 {
    let recent = group_mean(&history[..4]);
    let old = group_mean(&history[4..]);
    (old << 6) | (recent << 3) | u16::from(llr.min(LLR_MAX))
}

fn shift_in(history: &mut History, bucket: u8) {
    history.rotate_right(1);
    history[0] = bucket;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdcState {
    /// Speculative history, index 0 most recent.
    pub leht: History,
    /// Committed history.
    pub lceht: History,
    /// Unverified batches ahead of the verifier. The 3-bit register reads this
    /// count saturated at 7.
    lead: u32,
    pub pht: Vec<u8>,
    #[serde(skip)]
    h_max: f64,
}

impl EdcState {
    pub fn new(h_max: f64, pht_init: u8) -> Result<Self, EdcError> {
        bucketize(0.0, h_max)?;
        Ok(Self {
            leht: [0; HISTORY_LEN],
            lceht: [0; HISTORY_LEN],
            lead: 0,
            pht: vec![pht_init.min(COUNTER_MAX); PHT_SIZE],
            h_max,
        })
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn llr(&self) -> u8 {
        self.lead.min(u32::from(LLR_MAX)) as u8
    }

    pub fn lead(&self) -> u32 {
        self.lead
    }

    pub fn index(&self) -> u16 {
        pht_index(&self.leht, self.llr())
    }

    pub fn counter(&self) -> u8 {
        self.pht[self.index() as usize]
    }

    /// Drafting on a fully verified prefix is always allowed.
    pub fn should_continue_drafting(&self) -> bool {
        self.llr() == 0 || self.counter() >= COUNTER_TAKEN
    }

    /// Register a freshly drafted batch: fills its bucket and index snapshot,
    /// then updates the speculative history.
    pub fn on_draft(&mut self, batch: &mut DraftBatch) -> Result<(), EdcError> {
        batch.entropy_bucket = bucketize(batch.avg_entropy, self.h_max)?;
        batch.pht_index_snapshot = self.index();
        shift_in(&mut self.leht, batch.entropy_bucket);
        self.lead += 1;
        Ok(())
    }

    /// Learn from a verification result. `surviving` is the number of
    /// unverified batches left after the queues applied the result.
    pub fn on_verify(&mut self, batch: &DraftBatch, record: &FeedbackRecord, surviving: usize) {
        let slot = &mut self.pht[batch.pht_index_snapshot as usize];
        self.lead = self.lead.saturating_sub(1);
        if record.fully_accepted {
            *slot = (*slot + 1).min(COUNTER_MAX);
            shift_in(&mut self.lceht, batch.entropy_bucket);
        } else {
            *slot = slot.saturating_sub(1);
            self.leht = self.lceht;
            self.lead = surviving as u32;
        }
    }

    /// A batch discarded because an older one was rejected counts as a
    /// rejection of its own pattern.
    pub fn on_purge(&mut self, batch: &DraftBatch) {
        let slot = &mut self.pht[batch.pht_index_snapshot as usize];
        *slot = slot.saturating_sub(1);
    }

    /// Forget every speculative batch (used when drafts are abandoned).
    pub fn reset_lead(&mut self, outstanding: usize) {
        self.lead = outstanding as u32;
    }
}
