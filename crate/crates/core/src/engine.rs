//! Discrete-event simulation of asynchronous drafting on the PIM and
//! verification on the NPU.
//!
//! Global time is in picoseconds. Events at the same instant are ordered by
//! kind and then by creation order, so a run is a pure function of its config.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::config::{ExperimentConfig, Variant};
use crate::edc::EdcState;
use crate::error::SimError;
use crate::metrics::{finalize, MetricsReport, Platform, RawCounters};
use crate::queues::{BatchStatus, DraftBatch, FeedbackRecord, QueueSet, RollbackInfo};
use crate::timing::{
    attention_comm_cycles, cycles_to_ps, dlm_draft_cycles, energy_of, pim_preverify_cycles, tlm_on_pim_cycles,
    tlm_verify_cycles, OpCost,
};
use crate::tvc::TvcState;
use crate::workload::{Drafter, StopRule, TokenId, Workload};

/// Job tag of a queue delivery that carries verification feedback.
const FEEDBACK_DELIVERY: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DraftDone,
    VerifyDone,
    PreverifyDone,
    SwitchDone,
    QueueDelivery,
    SchedulerTick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SimEvent {
    pub time_ps: u64,
    pub kind: EventKind,
    pub seq: u64,
    /// Activity the event belongs to; stale events are ignored.
    job: u64,
}

/// One processed event, for the optional JSONL trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub t_ps: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub batch_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ps: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub purged_ids: Vec<u64>,
    #[serde(default)]
    pub stale: bool,
    pub committed: u64,
}

/// Budget check made when a pre-verification was inserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub t_ps: u64,
    pub len: usize,
    /// Predicted PIM cycles left before the NPU finishes, after one draft.
    pub remaining_cycles: i64,
    /// Predicted PIM cycles of the pre-verification.
    pub predicted_cycles: u64,
    /// When the concurrent NPU verification ends.
    pub npu_end_ps: u64,
    /// Pre-verification end plus one reserved draft, at actual cost.
    pub actual_end_ps: u64,
}

/// Predicted versus observed verification cost, PIM cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpuPrediction {
    pub kv_len: u64,
    pub predicted: u64,
    pub actual: u64,
    /// Smallest and largest context length behind the prediction.
    pub table_kv_min: u64,
    pub table_kv_max: u64,
}

/// One iteration of a synchronous baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub draft_len: usize,
    pub draft_ps: u64,
    pub npu_ps: u64,
    pub pim_attention_ps: u64,
    pub iteration_ps: u64,
    /// PIM busy time over iteration time.
    pub pim_share: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub event_trace: bool,
    /// Dump predictor state every this many events.
    pub debug_every: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: MetricsReport,
    /// Committed sequence truncated to the generation length.
    pub committed: Vec<TokenId>,
    pub events: Vec<EventRecord>,
    pub debug: Vec<serde_json::Value>,
    pub budget_log: Vec<BudgetEntry>,
    pub npu_predictions: Vec<NpuPrediction>,
    pub iterations: Vec<IterationRecord>,
}

/// Context length as the verification cycle table counts it. An empty context
/// counts as one token so the per-token ratio stays defined.
fn table_len(kv_len: u64) -> u64 {
    kv_len.max(1)
}

/// Simulate one configuration and return its report.
pub fn run(cfg: &ExperimentConfig) -> Result<MetricsReport, SimError> {
    simulate(cfg, &SimOptions::default()).map(|o| o.report)
}

/// Simulate one configuration with diagnostics.
pub fn simulate(cfg: &ExperimentConfig, opts: &SimOptions) -> Result<SimOutcome, SimError> {
    cfg.validate()?;
    match cfg.variant {
        Variant::GpuOnly => baselines::run_gpu_only_detailed(cfg),
        Variant::OpSync => baselines::run_operator_sync_detailed(cfg),
        _ => Engine::new(cfg, opts)?.run(),
    }
}

#[derive(Debug, Clone)]
enum Npu {
    Idle,
    Verifying {
        batch_ids: Vec<u64>,
        start: u64,
        end: u64,
        kv_len: u64,
        cost: OpCost,
    },
}

#[derive(Debug, Clone)]
enum Pim {
    Idle,
    Drafting {
        batch: Box<DraftBatch>,
        start: u64,
        end: u64,
        cycles: u64,
        energy: f64,
    },
    SwitchingIn {
        batch_id: u64,
        len: usize,
        start: u64,
    },
    Preverifying {
        batch_id: u64,
        len: usize,
        start: u64,
        forward: OpCost,
    },
    SwitchingOut {
        start: u64,
    },
}

struct Engine<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a SimOptions,
    workload: Workload,
    drafter: Drafter,
    queues: QueueSet,
    edc: Option<EdcState>,
    tvc: Option<TvcState>,
    heap: BinaryHeap<Reverse<SimEvent>>,
    seq: u64,
    now: u64,
    npu: Npu,
    pim: Pim,
    pim_job: u64,
    /// Feedback records on their way to the scheduler.
    in_transit: usize,
    tick_pending: bool,
    next_id: u64,
    raw: RawCounters,
    processed: u64,
    checked_commits: usize,
    events: Vec<EventRecord>,
    debug: Vec<serde_json::Value>,
    budget_log: Vec<BudgetEntry>,
    npu_predictions: Vec<NpuPrediction>,
    nvct_kv: [u64; 4],
    nvct_slot: usize,
    current: EventRecord,
    done_at: Option<u64>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ExperimentConfig, opts: &'a SimOptions) -> Result<Self, SimError> {
        let workload = Workload::from_config(cfg)?;
        let edc = if cfg.variant.has_edc() {
            Some(EdcState::new(workload.h_max(), cfg.policy.pht_init)?)
        } else {
            None
        };
        let mut engine = Self {
            cfg,
            opts,
            drafter: Drafter::new(StopRule::from_config(cfg)),
            workload,
            queues: QueueSet::new(),
            edc,
            tvc: None,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            npu: Npu::Idle,
            pim: Pim::Idle,
            pim_job: 0,
            in_transit: 0,
            tick_pending: false,
            next_id: 1,
            raw: RawCounters::default(),
            processed: 0,
            checked_commits: 0,
            events: Vec::new(),
            debug: Vec::new(),
            budget_log: Vec::new(),
            npu_predictions: Vec::new(),
            nvct_kv: [0; 4],
            nvct_slot: 0,
            current: EventRecord::default(),
            done_at: None,
        };
        if cfg.variant.has_tvc() {
            engine.tvc = Some(engine.profile_tvc()?);
        }
        Ok(engine)
    }

    fn hw_aau(&self) -> bool {
        self.cfg.variant.has_aau()
    }

    fn prompt(&self) -> u64 {
        self.cfg.workload.prompt_len
    }

    fn pim_ps(&self, cycles: u64) -> u64 {
        cycles_to_ps(cycles, self.cfg.hardware.pim_freq_hz)
    }

    fn npu_ps(&self, cycles: u64) -> u64 {
        cycles_to_ps(cycles, self.cfg.hardware.npu_freq_hz)
    }

    fn ps_to_pim_cycles(&self, ps: u64) -> u64 {
        (ps as u128 * self.cfg.hardware.pim_freq_hz.round() as u128 / 1_000_000_000_000) as u64
    }

    fn transfer_ps(&self) -> u64 {
        self.npu_ps(self.cfg.hardware.queue_transfer_cycles)
    }

    fn switch_ps(&self) -> u64 {
        self.pim_ps(self.cfg.hardware.gtsu_switch_cycles)
    }

    /// Duration and energy of drafting `len` tokens over a `kv_len` context.
    fn draft_cost(&self, len: usize, kv_len: u64) -> Result<(u64, u64, f64), SimError> {
        let cost = dlm_draft_cycles(&self.cfg.hardware, &self.cfg.model, len as u64, kv_len)?;
        let mut ps = self.pim_ps(cost.cycles);
        let mut energy = energy_of(&cost, &self.cfg.energy);
        let mut hw = self.cfg.hardware.clone();
        hw.aau_enabled = self.hw_aau();
        let comm = attention_comm_cycles(&hw, self.cfg.model.dlm(), len as u64)?;
        ps += self.npu_ps(comm.cycles);
        energy += energy_of(&comm, &self.cfg.energy);
        Ok((ps, cost.cycles, energy))
    }

    fn preverify_ps(&self, len: usize, kv_len: u64) -> Result<u64, SimError> {
        let c = pim_preverify_cycles(&self.cfg.hardware, &self.cfg.model, len as u64, kv_len)?;
        Ok(self.pim_ps(c.cycles))
    }

    /// Offline profiling pass that presets the cycle tables.
    fn profile_tvc(&mut self) -> Result<TvcState, SimError> {
        let hw = &self.cfg.hardware;
        let model = &self.cfg.model;
        let mut t = TvcState::new(hw.pim_freq_hz, hw.npu_freq_hz);
        let prompt = self.prompt();
        let typical = (self.cfg.workload.max_draft_len as u64 / 2).max(1);
        for j in 0..4u64 {
            let kv = prompt + j * typical;
            let v = tlm_verify_cycles(hw, model, typical, kv)?;
            t.record_npu(v.cycles, table_len(kv))?;
            self.nvct_kv[j as usize] = table_len(kv);
            let len = j + 1;
            t.record_draft(dlm_draft_cycles(hw, model, len, prompt)?.cycles, len)?;
            t.record_preverify(pim_preverify_cycles(hw, model, len, prompt)?.cycles, len)?;
        }
        Ok(t)
    }

    fn schedule(&mut self, time_ps: u64, kind: EventKind, job: u64) {
        self.seq += 1;
        self.heap.push(Reverse(SimEvent {
            time_ps,
            kind,
            seq: self.seq,
            job,
        }));
    }

    fn request_tick(&mut self) {
        if !self.tick_pending {
            self.tick_pending = true;
            self.schedule(self.now, EventKind::SchedulerTick, 0);
        }
    }

    fn run(mut self) -> Result<SimOutcome, SimError> {
        self.request_tick();
        while let Some(Reverse(ev)) = self.heap.pop() {
            self.processed += 1;
            if self.processed > self.cfg.policy.event_cap {
                return Err(SimError::EventCap(self.cfg.policy.event_cap));
            }
            if ev.time_ps < self.now {
                return Err(SimError::Invariant(format!(
                    "event at {} ps processed after {} ps",
                    ev.time_ps, self.now
                )));
            }
            self.advance(ev.time_ps);
            self.current = EventRecord {
                seq: ev.seq,
                t_ps: ev.time_ps,
                kind: serde_json::to_value(ev.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                ..EventRecord::default()
            };
            match ev.kind {
                EventKind::DraftDone => self.on_draft_done(ev.job)?,
                EventKind::VerifyDone => self.on_verify_done()?,
                EventKind::PreverifyDone => self.on_preverify_done(ev.job)?,
                EventKind::SwitchDone => self.on_switch_done(ev.job)?,
                EventKind::QueueDelivery => self.on_delivery(ev.job)?,
                EventKind::SchedulerTick => {
                    self.tick_pending = false;
                    self.on_tick()?;
                }
            }
            self.check_invariants()?;
            self.current.committed = self.queues.committed_len();
            if self.opts.event_trace {
                self.events.push(std::mem::take(&mut self.current));
            }
            if let Some(n) = self.opts.debug_every {
                if n > 0 && self.processed.is_multiple_of(n) {
                    self.debug.push(serde_json::json!({
                        "t_ps": self.now,
                        "event": self.processed,
                        "edc": self.edc,
                        "tvc": self.tvc,
                    }));
                }
            }
            if self.done_at.is_some() {
                break;
            }
        }
        let end = self
            .done_at
            .ok_or_else(|| SimError::Invariant("event queue drained before completion".into()))?;
        self.finish(end)
    }

    /// Accrue time-based counters up to `t`.
    fn advance(&mut self, t: u64) {
        let dt = t - self.now;
        if matches!(self.npu, Npu::Idle) && !self.queues.unverified().any(|b| b.status == BatchStatus::Unverified) {
            self.raw.npu_starved_ps += dt;
        }
        self.now = t;
    }

    fn finish(mut self, end: u64) -> Result<SimOutcome, SimError> {
        // Close open activities at the completion instant.
        if let Npu::Verifying { start, .. } = self.npu {
            self.raw.npu_busy_ps += end - start;
        }
        match &self.pim {
            Pim::Idle => {}
            Pim::Drafting { start, .. }
            | Pim::SwitchingIn { start, .. }
            | Pim::Preverifying { start, .. }
            | Pim::SwitchingOut { start } => self.raw.pim_busy_ps += end - *start,
        }
        let gen = self.cfg.generation_length as usize;
        let c = self.queues.counters().clone();
        self.raw.committed_tokens = gen as u64;
        self.raw.drafted_tokens = c.drafted;
        self.raw.accepted_draft_tokens = c.accepted;
        self.raw.rejected_tokens = c.rejected;
        self.raw.purged_tokens = c.purged;
        self.raw.end_ps = end;
        let report = finalize(&self.raw, self.cfg, Platform::NpuPim);
        let mut committed = self.queues.committed().to_vec();
        committed.truncate(gen);
        Ok(SimOutcome {
            report,
            committed,
            events: self.events,
            debug: self.debug,
            budget_log: self.budget_log,
            npu_predictions: self.npu_predictions,
            iterations: Vec::new(),
        })
    }

    fn check_invariants(&mut self) -> Result<(), SimError> {
        let committed = self.queues.committed();
        for (p, &tok) in committed.iter().enumerate().skip(self.checked_commits) {
            if tok != self.workload.oracle_token(p as u64) {
                return Err(SimError::Invariant(format!(
                    "committed token {p} differs from the oracle"
                )));
            }
        }
        self.checked_commits = committed.len();
        if let Some(edc) = &self.edc {
            let outstanding = self.queues.outstanding();
            if edc.lead() as usize != outstanding {
                return Err(SimError::Invariant(format!(
                    "look-ahead register {} but {} unverified batches",
                    edc.lead(),
                    outstanding
                )));
            }
        }
        if self.done_at.is_none() && self.queues.committed_len() >= self.cfg.generation_length {
            self.done_at = Some(self.now);
        }
        Ok(())
    }

    fn pim_idle(&self) -> bool {
        matches!(self.pim, Pim::Idle)
    }

    fn on_tick(&mut self) -> Result<(), SimError> {
        if !self.pim_idle() || self.done_at.is_some() {
            return Ok(());
        }
        self.drain_feedback()?;
        if self.queues.committed_len() >= self.cfg.generation_length {
            return Ok(());
        }
        if let Some(cap) = self.cfg.policy.queue_capacity {
            if self.queues.unverified_len() >= cap {
                return Ok(());
            }
        }
        let keep_drafting = self.edc.as_ref().is_none_or(EdcState::should_continue_drafting);
        if keep_drafting {
            return self.start_draft();
        }
        if self.tvc.is_none() {
            // Wait for the next verification result.
            return Ok(());
        }
        match self.decide_preverify()? {
            Some(len) => self.start_preverify(len),
            None => self.start_draft(),
        }
    }

    fn start_draft(&mut self) -> Result<(), SimError> {
        let base = self.queues.tip();
        let arm = self.drafter.begin_batch();
        let entropies = self.drafter.draft(&mut self.workload, base, arm);
        let tokens: Vec<TokenId> = (0..entropies.len() as u64)
            .map(|i| self.workload.oracle_token(base + i))
            .collect();
        let len = tokens.len();
        let (ps, cycles, energy) = self.draft_cost(len, self.prompt() + base)?;
        let mut batch = DraftBatch::new(self.next_id, tokens, entropies, base);
        self.next_id += 1;
        batch.arm = arm;
        self.pim_job += 1;
        self.pim = Pim::Drafting {
            batch: Box::new(batch),
            start: self.now,
            end: self.now + ps,
            cycles,
            energy,
        };
        self.schedule(self.now + ps, EventKind::DraftDone, self.pim_job);
        Ok(())
    }

    fn on_draft_done(&mut self, job: u64) -> Result<(), SimError> {
        if job != self.pim_job || !matches!(self.pim, Pim::Drafting { .. }) {
            self.current.stale = true;
            return Ok(());
        }
        let Pim::Drafting {
            mut batch,
            start,
            end,
            cycles,
            energy,
        } = std::mem::replace(&mut self.pim, Pim::Idle)
        else {
            unreachable!("checked above");
        };
        let dur = end - start;
        self.raw.pim_busy_ps += dur;
        self.raw.busy_energy_pj += energy;
        self.raw.draft_batches += 1;
        batch.lookahead_depth = self.queues.outstanding();
        if let Some(edc) = self.edc.as_mut() {
            edc.on_draft(&mut batch)?;
        }
        if let Some(tvc) = self.tvc.as_mut() {
            tvc.record_draft(cycles, batch.len() as u64)?;
        }
        batch.draft_ps = dur;
        batch.ready_at_ps = self.now + self.transfer_ps();
        let ready = batch.ready_at_ps;
        self.current.batch_ids = vec![batch.batch_id];
        self.current.len = Some(batch.len());
        self.current.duration_ps = Some(dur);
        self.queues.push_draft(*batch)?;
        self.schedule(ready, EventKind::QueueDelivery, 0);
        self.request_tick();
        Ok(())
    }

    fn try_start_npu(&mut self) -> Result<(), SimError> {
        if !matches!(self.npu, Npu::Idle) || self.done_at.is_some() {
            return Ok(());
        }
        let batches = self
            .queues
            .pop_ready(self.cfg.policy.max_batches_per_verify, self.now)?;
        if batches.is_empty() {
            return Ok(());
        }
        if self.pim_idle() {
            // A full queue may have been holding the drafter back.
            self.request_tick();
        }
        let total: usize = batches.iter().map(DraftBatch::len).sum();
        let kv_len = self.prompt() + batches[0].base_kv_len;
        let cost = tlm_verify_cycles(&self.cfg.hardware, &self.cfg.model, total as u64, kv_len)?;
        let end = self.now + self.npu_ps(cost.cycles);
        if let Some(tvc) = self.tvc.as_mut() {
            tvc.ncr = 0;
        }
        self.npu = Npu::Verifying {
            batch_ids: batches.iter().map(|b| b.batch_id).collect(),
            start: self.now,
            end,
            kv_len,
            cost,
        };
        self.schedule(end, EventKind::VerifyDone, 0);
        Ok(())
    }

    fn on_verify_done(&mut self) -> Result<(), SimError> {
        let Npu::Verifying {
            batch_ids,
            start,
            end,
            kv_len,
            cost,
        } = std::mem::replace(&mut self.npu, Npu::Idle)
        else {
            return Err(SimError::Invariant("verification finished on an idle NPU".into()));
        };
        self.raw.npu_busy_ps += end - start;
        self.raw.busy_energy_pj += energy_of(&cost, &self.cfg.energy);
        self.raw.verify_count += 1;
        if let Some(tvc) = self.tvc.as_mut() {
            let actual = tvc.npu_to_pim_cycles(cost.cycles);
            let predicted = tvc.predict_npu_cycles(table_len(kv_len));
            self.npu_predictions.push(NpuPrediction {
                kv_len,
                predicted,
                actual,
                table_kv_min: *self.nvct_kv.iter().min().expect("four slots"),
                table_kv_max: *self.nvct_kv.iter().max().expect("four slots"),
            });
            tvc.record_npu(cost.cycles, table_len(kv_len))?;
            self.nvct_kv[self.nvct_slot] = table_len(kv_len);
            self.nvct_slot = (self.nvct_slot + 1) % 4;
        }
        let mut records = Vec::new();
        for id in &batch_ids {
            // Rolled back while the verifier was busy: the work is lost.
            let Some(b) = self.queues.get(*id).cloned() else {
                self.current.stale = true;
                break;
            };
            let rec = self.sample(&b, b.len());
            let stop = !rec.fully_accepted;
            records.push(rec);
            if stop {
                break;
            }
        }
        self.current.batch_ids = batch_ids;
        self.current.accepted = Some(records.iter().map(|r| r.accepted_prefix_len).sum());
        for r in records {
            self.queues.push_feedback(r);
        }
        self.in_transit += 1;
        let at = self.now + self.transfer_ps();
        self.schedule(at, EventKind::QueueDelivery, FEEDBACK_DELIVERY);
        Ok(())
    }

    /// Draw outcomes for the first `len` pending tokens of `batch`.
    fn sample(&mut self, batch: &DraftBatch, len: usize) -> FeedbackRecord {
        let depth = batch.lookahead_depth as u32;
        for i in 0..len {
            let pos = batch.base_kv_len + i as u64;
            let outcome = self.workload.verify(pos, depth);
            if !outcome.accepted {
                return FeedbackRecord::rejected(batch.batch_id, i, outcome.oracle_token);
            }
        }
        FeedbackRecord::accepted(batch.batch_id, len)
    }

    fn on_delivery(&mut self, job: u64) -> Result<(), SimError> {
        if job == FEEDBACK_DELIVERY {
            self.in_transit = self.in_transit.saturating_sub(1);
        }
        self.try_start_npu()?;
        if self.pim_idle() {
            self.request_tick();
        }
        Ok(())
    }

    /// The scheduler only sees feedback between PIM tasks; a draft already
    /// running on a rejected prefix finishes before it is rolled back.
    fn drain_feedback(&mut self) -> Result<(), SimError> {
        if self.in_transit > 0 {
            return Ok(());
        }
        while let Some(rec) = self.queues.pop_feedback() {
            if self.queues.in_flight().any(|b| b.batch_id == rec.batch_id) {
                self.apply_feedback(&rec)?;
            }
        }
        self.try_start_npu()
    }

    fn apply_feedback(&mut self, rec: &FeedbackRecord) -> Result<(), SimError> {
        let batch = self
            .queues
            .get(rec.batch_id)
            .ok_or_else(|| SimError::Invariant(format!("feedback for unknown batch {}", rec.batch_id)))?
            .clone();
        let info = self.queues.apply_feedback(rec)?;
        let surviving = self.queues.outstanding();
        if let Some(edc) = self.edc.as_mut() {
            edc.on_verify(&batch, rec, surviving);
        }
        self.drafter
            .reward(batch.arm, batch.confirmed.len() + rec.accepted_prefix_len);
        self.current.batch_ids.push(rec.batch_id);
        self.current.accepted = Some(rec.accepted_prefix_len);
        if rec.fully_accepted {
            let quiet = self.pim_idle() || matches!(self.pim, Pim::SwitchingOut { .. });
            if quiet && self.queues.unverified_len() == 0 && self.queues.in_flight().next().is_none() {
                let pos = self.queues.committed_len();
                self.queues.commit_bonus(self.workload.oracle_token(pos))?;
            }
        } else {
            self.note_purge(&info);
        }
        Ok(())
    }

    fn note_purge(&mut self, info: &RollbackInfo) {
        for b in &info.purged {
            if self.cfg.policy.learn_from_purges {
                if let Some(edc) = self.edc.as_mut() {
                    edc.on_purge(b);
                }
            }
            self.raw.pim_wasted_ps += b.draft_ps;
            self.current.purged_ids.push(b.batch_id);
        }
    }

    fn begin_switch_out(&mut self) {
        self.pim = Pim::SwitchingOut { start: self.now };
        let at = self.now + self.switch_ps();
        self.schedule(at, EventKind::SwitchDone, self.pim_job);
    }

    /// Pre-verification length for the oldest unverified batch, if any fits.
    fn decide_preverify(&mut self) -> Result<Option<usize>, SimError> {
        let Npu::Verifying { start, end, kv_len, .. } = self.npu else {
            return Ok(None);
        };
        let Some(target) = self.queues.preverify_target() else {
            return Ok(None);
        };
        let target_len = target.len();
        let target_kv = self.prompt() + target.base_kv_len;
        let reserve = self.cfg.policy.preverify_reserve_draft_len;
        let tip_kv = self.prompt() + self.queues.tip();
        let (reserve_ps, _, _) = self.draft_cost(reserve, tip_kv)?;
        let ncr = self.ps_to_pim_cycles(self.now - start);
        let (len, remaining, predicted) = if self.cfg.policy.exact_tvc {
            let left_ps = end as i64 - (self.now as i64 + reserve_ps as i64);
            let remaining = if left_ps > 0 {
                self.ps_to_pim_cycles(left_ps as u64) as i64
            } else {
                left_ps.signum()
            };
            let mut best = None;
            for l in 1..=target_len {
                if left_ps > 0 && self.preverify_ps(l, target_kv)? <= left_ps as u64 {
                    best = Some(l);
                } else {
                    break;
                }
            }
            let predicted = match best {
                Some(l) => self.ps_to_pim_cycles(self.preverify_ps(l, target_kv)?),
                None => 0,
            };
            (best, remaining, predicted)
        } else {
            let tvc = self.tvc.as_mut().expect("caller checked");
            tvc.ncr = ncr;
            let c_npu = tvc.predict_npu_cycles(table_len(kv_len));
            let remaining = tvc.remaining_cycles(c_npu, reserve as u64);
            let len = tvc.preverify_decision(table_len(kv_len), reserve as u64, target_len);
            let predicted = len.map_or(0, |l| tvc.predict_pim_verify_cycles(l as u64));
            (len, remaining, predicted)
        };
        if let Some(l) = len {
            let actual_end = self.now + self.preverify_ps(l, target_kv)? + reserve_ps;
            self.budget_log.push(BudgetEntry {
                t_ps: self.now,
                len: l,
                remaining_cycles: remaining,
                predicted_cycles: predicted,
                npu_end_ps: end,
                actual_end_ps: actual_end,
            });
        }
        Ok(len)
    }

    fn start_preverify(&mut self, len: usize) -> Result<(), SimError> {
        let id = self
            .queues
            .preverify_target()
            .map(|b| b.batch_id)
            .ok_or_else(|| SimError::Invariant("no pre-verification target".into()))?;
        self.queues.mark_preverify(id)?;
        self.pim_job += 1;
        self.pim = Pim::SwitchingIn {
            batch_id: id,
            len,
            start: self.now,
        };
        let at = self.now + self.switch_ps();
        self.schedule(at, EventKind::SwitchDone, self.pim_job);
        Ok(())
    }

    fn on_switch_done(&mut self, job: u64) -> Result<(), SimError> {
        if job != self.pim_job {
            self.current.stale = true;
            return Ok(());
        }
        match std::mem::replace(&mut self.pim, Pim::Idle) {
            Pim::SwitchingIn { batch_id, len, start } => {
                let Some(b) = self.queues.get(batch_id).filter(|_| self.queues.is_marked(batch_id)) else {
                    self.raw.pim_busy_ps += self.now - start;
                    self.begin_switch_out();
                    return Ok(());
                };
                let kv = self.prompt() + b.base_kv_len;
                let forward = tlm_on_pim_cycles(&self.cfg.hardware, &self.cfg.model, len as u64, kv)?;
                let at = self.now + self.pim_ps(forward.cycles);
                self.pim = Pim::Preverifying {
                    batch_id,
                    len,
                    start,
                    forward,
                };
                self.schedule(at, EventKind::PreverifyDone, self.pim_job);
                self.current.batch_ids = vec![batch_id];
            }
            Pim::SwitchingOut { start } => {
                self.raw.pim_busy_ps += self.now - start;
                self.request_tick();
            }
            other => {
                self.pim = other;
                return Err(SimError::Invariant(
                    "switch finished while PIM was not switching".into(),
                ));
            }
        }
        Ok(())
    }

    fn on_preverify_done(&mut self, job: u64) -> Result<(), SimError> {
        if job != self.pim_job {
            self.current.stale = true;
            return Ok(());
        }
        let Pim::Preverifying {
            batch_id,
            len,
            start,
            forward,
        } = std::mem::replace(&mut self.pim, Pim::Idle)
        else {
            return Err(SimError::Invariant("pre-verification finished on an idle PIM".into()));
        };
        self.raw.pim_busy_ps += self.now - start;
        let switch_cycles = 2 * self.cfg.hardware.gtsu_switch_cycles;
        self.raw.busy_energy_pj +=
            energy_of(&forward, &self.cfg.energy) + switch_cycles as f64 * self.cfg.energy.pim_background_pj_per_cycle;
        if let Some(tvc) = self.tvc.as_mut() {
            tvc.record_preverify(forward.cycles + switch_cycles, len as u64)?;
        }
        self.current.batch_ids = vec![batch_id];
        self.current.len = Some(len);
        if let Some(b) = self
            .queues
            .get(batch_id)
            .filter(|_| self.queues.is_marked(batch_id))
            .cloned()
        {
            let checked = len.min(b.len());
            let rec = self.sample(&b, checked);
            let correction = rec.correction_token;
            let accepted = rec.accepted_prefix_len;
            self.current.accepted = Some(accepted);
            let info = self
                .queues
                .apply_preverify(batch_id, checked, accepted, correction)?
                .expect("batch was marked");
            self.raw.preverify_count += 1;
            self.raw.preverified_tokens += checked as u64;
            let whole = FeedbackRecord::accepted(batch_id, b.len());
            let resolution = if !rec.fully_accepted {
                Some((rec.clone(), b.confirmed.len() + accepted))
            } else if checked == b.len() {
                Some((whole, b.draft_tokens()))
            } else {
                None
            };
            if let Some((r, credited)) = resolution {
                let surviving = self.queues.outstanding();
                if let Some(edc) = self.edc.as_mut() {
                    edc.on_verify(&b, &r, surviving);
                }
                self.drafter.reward(b.arm, credited);
            }
            self.note_purge(&info);
        } else {
            self.current.stale = true;
        }
        self.begin_switch_out();
        self.try_start_npu()
    }
}
