//! Time-aware pre-verification control.
//!
//! Three small history tables track cycles per unit of work: NPU verification
//! cycles per context token, PIM drafting cycles per draft token and PIM
//! pre-verification cycles per checked token. Everything is kept in the PIM
//! clock domain. Ratios are fixed point with 16 fractional bits and every
//! division truncates.

use serde::{Deserialize, Serialize};

use crate::error::TvcError;

pub const FRAC_BITS: u32 = 16;
pub const TABLE_SLOTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableRole {
    Nvct,
    Pdct,
    Pvct,
}

/// Ring of the four most recent cycles-per-unit ratios.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleHistoryTable {
    pub role: TableRole,
    /// Raw fixed-point ratios.
    pub entries: [u64; TABLE_SLOTS],
    next: usize,
}

pub fn to_fixed(x: f64) -> u64 {
    (x * (1u64 << FRAC_BITS) as f64) as u64
}

pub fn from_fixed(raw: u64) -> f64 {
    raw as f64 / (1u64 << FRAC_BITS) as f64
}

impl CycleHistoryTable {
    pub fn new(role: TableRole) -> Self {
        Self {
            role,
            entries: [0; TABLE_SLOTS],
            next: 0,
        }
    }

    pub fn filled(role: TableRole, ratios: [f64; TABLE_SLOTS]) -> Self {
        Self {
            role,
            entries: ratios.map(to_fixed),
            next: 0,
        }
    }

    /// Store `cycles / length`, replacing the oldest slot.
    pub fn record(&mut self, pim_cycles: u64, length: u64) -> Result<(), TvcError> {
        self.record_rational(pim_cycles as u128, 1, 1, length)
    }

    /// Store `cycles * num / (den * length)` without intermediate rounding.
    fn record_rational(&mut self, cycles: u128, num: u128, den: u128, length: u64) -> Result<(), TvcError> {
        if length == 0 {
            return Err(TvcError::ZeroLength);
        }
        let raw = ((cycles * num) << FRAC_BITS) / (den * length as u128);
        self.entries[self.next] = raw.min(u64::MAX as u128) as u64;
        self.next = (self.next + 1) % TABLE_SLOTS;
        Ok(())
    }

    pub fn mean_ratio(&self) -> f64 {
        from_fixed(self.entries.iter().sum::<u64>()) / TABLE_SLOTS as f64
    }

    /// Mean ratio times `length`, truncated to whole cycles.
    pub fn predict(&self, length: u64) -> u64 {
        let sum: u128 = self.entries.iter().map(|&e| e as u128).sum();
        ((sum * length as u128) / ((TABLE_SLOTS as u128) << FRAC_BITS)) as u64
    }

    /// Whole units of work that fit in `budget` cycles.
    pub fn fit(&self, budget: u64) -> u64 {
        let sum: u128 = self.entries.iter().map(|&e| e as u128).sum();
        if sum == 0 {
            return u64::MAX;
        }
        (((budget as u128) << FRAC_BITS) * TABLE_SLOTS as u128 / sum).min(u64::MAX as u128) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvcState {
    pub nvct: CycleHistoryTable,
    pub pdct: CycleHistoryTable,
    pub pvct: CycleHistoryTable,
    /// PIM cycles elapsed in the verification currently running on the NPU.
    pub ncr: u64,
    pim_freq_hz: u64,
    npu_freq_hz: u64,
}

impl TvcState {
    pub fn new(pim_freq_hz: f64, npu_freq_hz: f64) -> Self {
        Self {
            nvct: CycleHistoryTable::new(TableRole::Nvct),
            pdct: CycleHistoryTable::new(TableRole::Pdct),
            pvct: CycleHistoryTable::new(TableRole::Pvct),
            ncr: 0,
            pim_freq_hz: pim_freq_hz.round().max(1.0) as u64,
            npu_freq_hz: npu_freq_hz.round().max(1.0) as u64,
        }
    }

    pub fn freq_ratio(&self) -> f64 {
        self.pim_freq_hz as f64 / self.npu_freq_hz as f64
    }

    pub fn predict_npu_cycles(&self, kv_len: u64) -> u64 {
        self.nvct.predict(kv_len)
    }

    pub fn predict_pim_draft_cycles(&self, draft_len: u64) -> u64 {
        self.pdct.predict(draft_len)
    }

    pub fn predict_pim_verify_cycles(&self, len: u64) -> u64 {
        self.pvct.predict(len)
    }

    /// Budget left for pre-verification once the next draft is accounted for.
    pub fn remaining_cycles(&self, c_npu_pred: u64, next_draft_len: u64) -> i64 {
        c_npu_pred as i64 - (self.ncr as i64 + self.predict_pim_draft_cycles(next_draft_len) as i64)
    }

    /// Pre-verification length that fits in the remaining budget, capped by the
    /// tokens left in the oldest unverified batch.
    pub fn preverify_decision(&self, kv_len: u64, next_draft_len: u64, oldest_batch_tokens: usize) -> Option<usize> {
        let left = self.remaining_cycles(self.predict_npu_cycles(kv_len), next_draft_len);
        if left <= 0 {
            return None;
        }
        let len = self.pvct.fit(left as u64).min(oldest_batch_tokens as u64) as usize;
        (len >= 1).then_some(len)
    }

    /// Record a verification that took `npu_cycles` NPU cycles over a
    /// `kv_len` context.
    pub fn record_npu(&mut self, npu_cycles: u64, kv_len: u64) -> Result<(), TvcError> {
        self.nvct.record_rational(
            npu_cycles as u128,
            self.pim_freq_hz as u128,
            self.npu_freq_hz as u128,
            kv_len,
        )
    }

    pub fn record_draft(&mut self, pim_cycles: u64, draft_len: u64) -> Result<(), TvcError> {
        self.pdct.record(pim_cycles, draft_len)
    }

    pub fn record_preverify(&mut self, pim_cycles: u64, len: u64) -> Result<(), TvcError> {
        self.pvct.record(pim_cycles, len)
    }

    pub fn npu_to_pim_cycles(&self, npu_cycles: u64) -> u64 {
        (npu_cycles as u128 * self.pim_freq_hz as u128 / self.npu_freq_hz as u128) as u64
    }
}
