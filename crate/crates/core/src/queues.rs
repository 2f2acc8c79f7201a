//! Cross-device queues between the drafter, the verifier and the scheduler.
//!
//! Three FIFOs: unverified draft batches, verification feedback and
//! pre-verification marks. Batches popped by the NPU move to an in-flight list
//! until their feedback arrives. Tokens reach the committed sequence strictly in
//! batch order, so a batch that was confirmed early by pre-verification waits in
//! place until every older batch has been resolved.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::QueueError;
use crate::workload::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    Unverified,
    PreverifiedAccepted,
    Committed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftBatch {
    pub batch_id: u64,
    /// Tokens still awaiting verification.
    pub tokens: Vec<TokenId>,
    pub entropies: Vec<f64>,
    pub avg_entropy: f64,
    pub entropy_bucket: u8,
    /// Unverified batches ahead of this one when it was drafted.
    pub lookahead_depth: usize,
    pub pht_index_snapshot: u16,
    /// Context length in front of `tokens`.
    pub base_kv_len: u64,
    pub status: BatchStatus,
    /// Leading tokens already confirmed by pre-verification. They sit in front
    /// of `base_kv_len` and are committed together with the batch.
    pub confirmed: Vec<TokenId>,
    /// Correction from a pre-verification rejection, committed after `tokens`.
    pub correction: Option<TokenId>,
    /// Bandit arm used when drafting, if any.
    pub arm: Option<usize>,
    /// Earliest time the batch is visible to the NPU.
    pub ready_at_ps: u64,
    /// PIM time spent drafting this batch.
    pub draft_ps: u64,
}

impl DraftBatch {
    pub fn new(batch_id: u64, tokens: Vec<TokenId>, entropies: Vec<f64>, base_kv_len: u64) -> Self {
        let avg_entropy = if entropies.is_empty() {
            0.0
        } else {
            entropies.iter().sum::<f64>() / entropies.len() as f64
        };
        Self {
            batch_id,
            tokens,
            entropies,
            avg_entropy,
            entropy_bucket: 0,
            lookahead_depth: 0,
            pht_index_snapshot: 0,
            base_kv_len,
            status: BatchStatus::Unverified,
            confirmed: Vec::new(),
            correction: None,
            arm: None,
            ready_at_ps: 0,
            draft_ps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Draft tokens this batch still holds (confirmed plus pending).
    pub fn draft_tokens(&self) -> usize {
        self.confirmed.len() + self.tokens.len()
    }

    /// Sequence length once this batch commits as currently projected.
    pub fn projected_end(&self) -> u64 {
        self.base_kv_len + self.tokens.len() as u64 + self.correction.is_some() as u64
    }

    fn start(&self) -> u64 {
        self.base_kv_len - self.confirmed.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub batch_id: u64,
    pub accepted_prefix_len: usize,
    pub fully_accepted: bool,
    pub correction_token: Option<TokenId>,
}

impl FeedbackRecord {
    pub fn accepted(batch_id: u64, len: usize) -> Self {
        Self {
            batch_id,
            accepted_prefix_len: len,
            fully_accepted: true,
            correction_token: None,
        }
    }

    pub fn rejected(batch_id: u64, prefix: usize, correction: TokenId) -> Self {
        Self {
            batch_id,
            accepted_prefix_len: prefix,
            fully_accepted: false,
            correction_token: Some(correction),
        }
    }
}

/// What a feedback or pre-verification result did to the queues.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RollbackInfo {
    pub purged: Vec<DraftBatch>,
    pub purged_tokens: usize,
    /// Tokens appended to the committed sequence by this call.
    pub committed: usize,
}

impl RollbackInfo {
    pub fn purged_batches(&self) -> usize {
        self.purged.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounters {
    pub drafted: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub purged: u64,
    pub corrections: u64,
    pub bonus: u64,
}

#[derive(Debug, Clone, Default)]
pub struct QueueSet {
    unverified: VecDeque<DraftBatch>,
    feedback: VecDeque<FeedbackRecord>,
    preverify: VecDeque<u64>,
    in_flight: VecDeque<DraftBatch>,
    committed: Vec<TokenId>,
    newest_id: Option<u64>,
    counters: TokenCounters,
}

impl QueueSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start from an already committed context.
    pub fn with_prompt(prompt: Vec<TokenId>) -> Self {
        Self {
            committed: prompt,
            ..Self::default()
        }
    }

    pub fn unverified(&self) -> impl Iterator<Item = &DraftBatch> {
        self.unverified.iter()
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &DraftBatch> {
        self.in_flight.iter()
    }

    pub fn unverified_len(&self) -> usize {
        self.unverified.len()
    }

    pub fn head(&self) -> Option<&DraftBatch> {
        self.unverified.front()
    }

    pub fn get(&self, batch_id: u64) -> Option<&DraftBatch> {
        self.unverified
            .iter()
            .chain(self.in_flight.iter())
            .find(|b| b.batch_id == batch_id)
    }

    pub fn committed(&self) -> &[TokenId] {
        &self.committed
    }

    pub fn committed_len(&self) -> u64 {
        self.committed.len() as u64
    }

    pub fn counters(&self) -> &TokenCounters {
        &self.counters
    }

    pub fn preverify_marks(&self) -> impl Iterator<Item = &u64> {
        self.preverify.iter()
    }

    /// Batches whose tokens have not been resolved by any verification.
    pub fn outstanding(&self) -> usize {
        self.in_flight
            .iter()
            .chain(self.unverified.iter())
            .filter(|b| b.status == BatchStatus::Unverified)
            .count()
    }

    /// Draft tokens currently held in live batches.
    pub fn live_draft_tokens(&self) -> u64 {
        self.in_flight
            .iter()
            .chain(self.unverified.iter())
            .map(|b| b.draft_tokens() as u64)
            .sum()
    }

    /// Length of the speculative sequence the next draft builds on.
    pub fn tip(&self) -> u64 {
        self.unverified
            .back()
            .or(self.in_flight.back())
            .map_or(self.committed_len(), DraftBatch::projected_end)
    }

    pub fn next_batch_id(&self) -> u64 {
        self.newest_id.map_or(1, |id| id + 1)
    }

    pub fn push_draft(&mut self, mut batch: DraftBatch) -> Result<(), QueueError> {
        if let Some(newest) = self.newest_id {
            if batch.batch_id <= newest {
                return Err(QueueError::IdOrder {
                    id: batch.batch_id,
                    newest,
                });
            }
        }
        if batch.tokens.is_empty() || batch.tokens.len() != batch.entropies.len() {
            return Err(QueueError::EmptyBatch(batch.batch_id));
        }
        batch.status = BatchStatus::Unverified;
        self.newest_id = Some(batch.batch_id);
        self.counters.drafted += batch.tokens.len() as u64;
        self.unverified.push_back(batch);
        Ok(())
    }

    /// Commit resolved batches at the head, then hand up to `max_batches`
    /// unverified batches to the verifier.
    pub fn pop_for_verify(&mut self, max_batches: usize) -> Result<Vec<DraftBatch>, QueueError> {
        self.pop_ready(max_batches, u64::MAX)
    }

    /// [`QueueSet::pop_for_verify`] restricted to batches visible at `now_ps`.
    pub fn pop_ready(&mut self, max_batches: usize, now_ps: u64) -> Result<Vec<DraftBatch>, QueueError> {
        self.settle()?;
        let mut out = Vec::new();
        while out.len() < max_batches.max(1) {
            match self.unverified.front() {
                Some(b) if b.status == BatchStatus::Unverified && b.ready_at_ps <= now_ps => {
                    let b = self.unverified.pop_front().expect("front exists");
                    self.preverify.retain(|&id| id != b.batch_id);
                    self.in_flight.push_back(b.clone());
                    out.push(b);
                }
                _ => break,
            }
        }
        Ok(out)
    }

    /// Whether the head batch is visible to the verifier at `now_ps`.
    pub fn head_ready(&self, now_ps: u64) -> bool {
        self.unverified
            .front()
            .is_some_and(|b| b.status == BatchStatus::Unverified && b.ready_at_ps <= now_ps)
    }

    pub fn push_feedback(&mut self, record: FeedbackRecord) {
        self.feedback.push_back(record);
    }

    pub fn pending_feedback(&self) -> usize {
        self.feedback.len()
    }

    pub fn pop_feedback(&mut self) -> Option<FeedbackRecord> {
        self.feedback.pop_front()
    }

    /// Resolve the oldest in-flight batch.
    pub fn apply_feedback(&mut self, record: &FeedbackRecord) -> Result<RollbackInfo, QueueError> {
        let pos = self
            .in_flight
            .iter()
            .position(|b| b.batch_id == record.batch_id)
            .ok_or(QueueError::UnknownBatch(record.batch_id))?;
        if pos != 0 {
            return Err(QueueError::UnknownBatch(record.batch_id));
        }
        let mut batch = self.in_flight.pop_front().expect("position found");
        let len = batch.tokens.len();
        let prefix = record.accepted_prefix_len.min(len);
        let mut info = RollbackInfo::default();
        if record.fully_accepted && prefix == len {
            batch.status = BatchStatus::Committed;
            info.committed += self.commit(&batch, len, None)?;
        } else {
            batch.status = BatchStatus::Rejected;
            info.committed += self.commit(&batch, prefix, record.correction_token)?;
            self.counters.rejected += (len - prefix) as u64;
            self.purge_all(&mut info);
        }
        info.committed += self.settle()?;
        Ok(info)
    }

    /// Append a bonus token after a fully accepted batch when nothing
    /// speculative follows it.
    pub fn commit_bonus(&mut self, token: TokenId) -> Result<(), QueueError> {
        if !self.unverified.is_empty() || !self.in_flight.is_empty() {
            return Err(QueueError::LiveBatches);
        }
        self.committed.push(token);
        self.counters.bonus += 1;
        Ok(())
    }

    /// Oldest batch in the queue that no verification has resolved.
    pub fn preverify_target(&self) -> Option<&DraftBatch> {
        self.unverified.iter().find(|b| b.status == BatchStatus::Unverified)
    }

    /// Reserve the oldest unresolved queued batch for pre-verification.
    pub fn mark_preverify(&mut self, batch_id: u64) -> Result<(), QueueError> {
        match self.preverify_target() {
            Some(b) if b.batch_id == batch_id => {
                if !self.preverify.contains(&batch_id) {
                    self.preverify.push_back(batch_id);
                }
                Ok(())
            }
            _ => Err(QueueError::NotPreverifiable(batch_id)),
        }
    }

    pub fn is_marked(&self, batch_id: u64) -> bool {
        self.preverify.contains(&batch_id)
    }

    /// Apply a pre-verification over the first `checked_len` pending tokens of
    /// a marked batch. `accepted_len` of them matched; on a mismatch the batch
    /// is cut after the accepted tokens, ends with `correction`, and every
    /// younger batch is purged. Returns `None` when the batch was taken by the
    /// verifier in the meantime.
    pub fn apply_preverify(
        &mut self,
        batch_id: u64,
        checked_len: usize,
        accepted_len: usize,
        correction: Option<TokenId>,
    ) -> Result<Option<RollbackInfo>, QueueError> {
        if !self.preverify.contains(&batch_id) {
            return Ok(None);
        }
        self.preverify.retain(|&id| id != batch_id);
        let pos = self
            .unverified
            .iter()
            .position(|b| b.batch_id == batch_id)
            .ok_or(QueueError::UnknownBatch(batch_id))?;
        let mut info = RollbackInfo::default();
        let batch = &mut self.unverified[pos];
        let len = batch.tokens.len();
        let checked = checked_len.min(len);
        if checked == 0 {
            return Err(QueueError::NotPreverifiable(batch_id));
        }
        if accepted_len >= checked {
            if checked == len {
                batch.status = BatchStatus::PreverifiedAccepted;
            } else {
                let head: Vec<TokenId> = batch.tokens.drain(..checked).collect();
                batch.entropies.drain(..checked);
                batch.confirmed.extend(head);
                batch.base_kv_len += checked as u64;
            }
        } else {
            let cut = accepted_len;
            self.counters.rejected += (len - cut) as u64;
            batch.tokens.truncate(cut);
            batch.entropies.truncate(cut);
            batch.correction = correction;
            batch.status = BatchStatus::Rejected;
            let younger = self.unverified.split_off(pos + 1);
            self.purge_batches(younger, &mut info);
        }
        info.committed += self.settle()?;
        Ok(Some(info))
    }

    fn commit(&mut self, batch: &DraftBatch, prefix: usize, correction: Option<TokenId>) -> Result<usize, QueueError> {
        if batch.start() != self.committed_len() {
            return Err(QueueError::BaseMismatch {
                id: batch.batch_id,
                base: batch.start(),
                committed: self.committed_len(),
            });
        }
        self.committed.extend_from_slice(&batch.confirmed);
        self.committed.extend_from_slice(&batch.tokens[..prefix]);
        let mut n = batch.confirmed.len() + prefix;
        self.counters.accepted += n as u64;
        if let Some(c) = correction {
            self.committed.push(c);
            self.counters.corrections += 1;
            n += 1;
        }
        Ok(n)
    }

    /// Commit head batches that were fully resolved by pre-verification once
    /// nothing older is still in flight.
    fn settle(&mut self) -> Result<usize, QueueError> {
        let mut n = 0;
        while self.in_flight.is_empty() {
            match self.unverified.front().map(|b| b.status) {
                Some(BatchStatus::PreverifiedAccepted) => {
                    let mut b = self.unverified.pop_front().expect("front exists");
                    let len = b.tokens.len();
                    n += self.commit(&b, len, None)?;
                    b.status = BatchStatus::Committed;
                }
                Some(BatchStatus::Rejected) => {
                    let b = self.unverified.pop_front().expect("front exists");
                    let len = b.tokens.len();
                    n += self.commit(&b, len, b.correction)?;
                }
                _ => break,
            }
        }
        Ok(n)
    }

    fn purge_all(&mut self, info: &mut RollbackInfo) {
        let in_flight: Vec<DraftBatch> = self.in_flight.drain(..).collect();
        let queued: Vec<DraftBatch> = self.unverified.drain(..).collect();
        self.purge_batches(in_flight.into_iter().chain(queued), info);
    }

    fn purge_batches(&mut self, batches: impl IntoIterator<Item = DraftBatch>, info: &mut RollbackInfo) {
        for mut b in batches {
            self.preverify.retain(|&id| id != b.batch_id);
            let n = b.draft_tokens();
            self.counters.purged += n as u64;
            info.purged_tokens += n;
            b.status = BatchStatus::Rejected;
            info.purged.push(b);
        }
    }
}
