//! Synchronous reference executions.
//!
//! `gpu_only` drafts and verifies alternately on one device. `op_sync` drafts
//! on the PIM, then splits each verification at operator granularity:
//! projections and FFN on the NPU, attention on the PIM next to the KV cache,
//! joined by a barrier. Its operator placement is a fixed approximation of
//! published operator-level NPU+PIM schedulers, so comparisons against it are
//! trend-level only.

use crate::config::{ExperimentConfig, LayerDims};
use crate::engine::{IterationRecord, SimOutcome};
use crate::error::SimError;
use crate::metrics::{finalize, MetricsReport, Platform, RawCounters};
use crate::timing::{
    attention_comm_cycles, cycles_to_ps, dlm_draft_cycles, energy_of, gemm_cycles, gpu_forward_cycles, OpCost,
    Roofline, SOFTMAX_OPS_PER_ELEMENT,
};
use crate::workload::{Drafter, StopRule, TokenId, Workload};

pub fn run_gpu_only(cfg: &ExperimentConfig) -> Result<MetricsReport, SimError> {
    run_gpu_only_detailed(cfg).map(|o| o.report)
}

pub fn run_operator_sync(cfg: &ExperimentConfig) -> Result<MetricsReport, SimError> {
    run_operator_sync_detailed(cfg).map(|o| o.report)
}

/// Outcome of verifying one draft: accepted prefix and the committed tokens.
struct Round {
    accepted: usize,
    committed: Vec<TokenId>,
}

/// Verify a draft at depth zero; a fully accepted draft also yields the
/// target model's next token.
fn verify_round(workload: &mut Workload, base: u64, len: usize) -> Round {
    let mut committed = Vec::with_capacity(len + 1);
    for i in 0..len as u64 {
        let o = workload.verify(base + i, 0);
        if !o.accepted {
            committed.push(o.oracle_token);
            return Round {
                accepted: i as usize,
                committed,
            };
        }
        committed.push(workload.oracle_token(base + i));
    }
    committed.push(workload.oracle_token(base + len as u64));
    Round {
        accepted: len,
        committed,
    }
}

struct Loop<'a> {
    cfg: &'a ExperimentConfig,
    workload: Workload,
    drafter: Drafter,
    committed: Vec<TokenId>,
    raw: RawCounters,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            workload: Workload::from_config(cfg)?,
            drafter: Drafter::new(StopRule::from_config(cfg)),
            committed: Vec::new(),
            raw: RawCounters::default(),
        })
    }

    fn done(&self) -> bool {
        self.committed.len() as u64 >= self.cfg.generation_length
    }

    /// Draft one batch at the current end of the sequence.
    fn draft(&mut self) -> (u64, usize, Option<usize>) {
        let base = self.committed.len() as u64;
        let arm = self.drafter.begin_batch();
        let len = self.drafter.draft(&mut self.workload, base, arm).len();
        (base, len, arm)
    }

    fn settle(&mut self, base: u64, len: usize, arm: Option<usize>) -> Result<(), SimError> {
        let round = verify_round(&mut self.workload, base, len);
        self.drafter.reward(arm, round.accepted);
        self.raw.drafted_tokens += len as u64;
        self.raw.accepted_draft_tokens += round.accepted as u64;
        self.raw.rejected_tokens += (len - round.accepted) as u64;
        self.raw.draft_batches += 1;
        self.raw.verify_count += 1;
        for t in round.committed {
            let p = self.committed.len() as u64;
            if t != self.workload.oracle_token(p) {
                return Err(SimError::Invariant(format!(
                    "committed token {p} differs from the oracle"
                )));
            }
            self.committed.push(t);
        }
        Ok(())
    }

    fn finish(mut self, platform: Platform, iterations: Vec<IterationRecord>) -> SimOutcome {
        let gen = self.cfg.generation_length as usize;
        self.committed.truncate(gen);
        self.raw.committed_tokens = gen as u64;
        SimOutcome {
            report: finalize(&self.raw, self.cfg, platform),
            committed: self.committed,
            events: Vec::new(),
            debug: Vec::new(),
            budget_log: Vec::new(),
            npu_predictions: Vec::new(),
            iterations,
        }
    }
}

pub fn run_gpu_only_detailed(cfg: &ExperimentConfig) -> Result<SimOutcome, SimError> {
    let mut lp = Loop::new(cfg)?;
    let b = &cfg.baseline;
    let prompt = cfg.workload.prompt_len;
    let mut iterations = Vec::new();
    let mut guard = 0u64;
    while !lp.done() {
        guard += 1;
        if guard > cfg.policy.event_cap {
            return Err(SimError::EventCap(cfg.policy.event_cap));
        }
        let (base, len, arm) = lp.draft();
        let kv = prompt + base;
        let draft = (0..len as u64).fold(OpCost::zero(crate::timing::Device::Gpu), |acc, t| {
            acc.then(gpu_forward_cycles(b, cfg.model.dlm(), 1, kv + t))
        });
        let verify = gpu_forward_cycles(b, cfg.model.tlm(), len as u64, kv + len as u64);
        let draft_ps = cycles_to_ps(draft.cycles, b.gpu_freq_hz);
        let verify_ps = cycles_to_ps(verify.cycles, b.gpu_freq_hz);
        lp.raw.end_ps += draft_ps + verify_ps;
        lp.raw.npu_busy_ps += draft_ps + verify_ps;
        lp.raw.busy_energy_pj += energy_of(&draft, &cfg.energy) + energy_of(&verify, &cfg.energy);
        iterations.push(IterationRecord {
            draft_len: len,
            draft_ps,
            npu_ps: verify_ps,
            pim_attention_ps: 0,
            iteration_ps: draft_ps + verify_ps,
            pim_share: 0.0,
        });
        lp.settle(base, len, arm)?;
    }
    Ok(lp.finish(Platform::Gpu, iterations))
}

/// NPU share of an operator-split verification: projections and FFN.
pub fn opsync_npu_cost(cfg: &ExperimentConfig, dims: LayerDims, m: u64) -> Result<OpCost, SimError> {
    let rf = Roofline::npu_matrix(&cfg.hardware);
    let h = dims.hidden;
    if dims.layers == 0 || h == 0 {
        return Ok(OpCost::zero(rf.device));
    }
    let layer = gemm_cycles(&rf, m, h, 3 * h, false)?
        .then(gemm_cycles(&rf, m, h, h, false)?)
        .then(gemm_cycles(&rf, m, h, 4 * h, false)?)
        .then(gemm_cycles(&rf, m, 4 * h, h, false)?);
    Ok(layer.repeat(dims.layers))
}

/// PIM share of an operator-split verification: attention over a resident KV
/// cache, including the softmax.
pub fn opsync_pim_cost(cfg: &ExperimentConfig, dims: LayerDims, m: u64, ctx: u64) -> Result<OpCost, SimError> {
    let rf = Roofline::pim(&cfg.hardware);
    if dims.layers == 0 || dims.hidden == 0 || ctx == 0 {
        return Ok(OpCost::zero(rf.device));
    }
    let h = dims.hidden;
    let softmax_ops = SOFTMAX_OPS_PER_ELEMENT * m * ctx * dims.heads();
    let softmax_cycles = rf.compute_cycles(softmax_ops);
    let softmax = OpCost {
        cycles: softmax_cycles,
        compute_cycles: softmax_cycles,
        ops: softmax_ops,
        ..OpCost::zero(rf.device)
    };
    let layer = gemm_cycles(&rf, m, h, ctx, true)?
        .then(gemm_cycles(&rf, m, ctx, h, true)?)
        .then(softmax);
    Ok(layer.repeat(dims.layers))
}

pub fn run_operator_sync_detailed(cfg: &ExperimentConfig) -> Result<SimOutcome, SimError> {
    let mut lp = Loop::new(cfg)?;
    let hw = &cfg.hardware;
    let mut no_aau = hw.clone();
    no_aau.aau_enabled = false;
    let prompt = cfg.workload.prompt_len;
    let mut iterations = Vec::new();
    let mut guard = 0u64;
    while !lp.done() {
        guard += 1;
        if guard > cfg.policy.event_cap {
            return Err(SimError::EventCap(cfg.policy.event_cap));
        }
        let (base, len, arm) = lp.draft();
        let m = len as u64;
        let kv = prompt + base;
        let draft = dlm_draft_cycles(hw, &cfg.model, m, kv)?;
        let draft_comm = attention_comm_cycles(&no_aau, cfg.model.dlm(), m)?;
        let draft_ps = cycles_to_ps(draft.cycles, hw.pim_freq_hz) + cycles_to_ps(draft_comm.cycles, hw.npu_freq_hz);

        let npu = opsync_npu_cost(cfg, cfg.model.tlm(), m)?;
        let npu_ps = cycles_to_ps(npu.cycles, hw.npu_freq_hz);
        let (pim_ps, pim, comm) = if cfg.baseline.opsync_attention_on_pim {
            let pim = opsync_pim_cost(cfg, cfg.model.tlm(), m, kv + m)?;
            let comm = attention_comm_cycles(&no_aau, cfg.model.tlm(), m)?;
            let ps = cycles_to_ps(pim.cycles, hw.pim_freq_hz) + cycles_to_ps(comm.cycles, hw.npu_freq_hz);
            (ps, pim, comm)
        } else {
            (
                0,
                OpCost::zero(crate::timing::Device::Pim),
                OpCost::zero(crate::timing::Device::Npu),
            )
        };
        let verify_ps = npu_ps.max(pim_ps);
        let iteration_ps = draft_ps + verify_ps;
        lp.raw.end_ps += iteration_ps;
        lp.raw.npu_busy_ps += npu_ps;
        lp.raw.pim_busy_ps += draft_ps + pim_ps;
        lp.raw.sync_idle_ps += draft_ps + (npu_ps.max(pim_ps) - npu_ps.min(pim_ps));
        lp.raw.busy_energy_pj += [draft, draft_comm, npu, pim, comm]
            .iter()
            .map(|c| energy_of(c, &cfg.energy))
            .sum::<f64>();
        iterations.push(IterationRecord {
            draft_len: len,
            draft_ps,
            npu_ps,
            pim_attention_ps: pim_ps,
            iteration_ps,
            pim_share: (draft_ps + pim_ps) as f64 / iteration_ps as f64,
        });
        lp.settle(base, len, arm)?;
    }
    Ok(lp.finish(Platform::NpuPim, iterations))
}
