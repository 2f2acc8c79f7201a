//! Roofline cycle and energy model.
//!
//! Every operator costs `max(compute_cycles, memory_cycles)` on the device
//! that runs it. Elements are one byte (INT8) and a MAC counts as two ops.
//! Cycle counts are computed in exact integer arithmetic and rounded up:
//!
//! - `compute_cycles = ceil(ops / ops_per_cycle)`, with `ops_per_cycle`
//!   taken to three decimal places;
//! - `memory_cycles = ceil(bytes * freq_hz / link_bytes_per_sec)`.
//!
//! The NPU streams operands over the off-chip LPDDR5 link; the PIM reads them
//! over its internal (on-chip) bandwidth.

use serde::{Deserialize, Serialize};

use crate::config::{BaselineConfig, EnergyCoefficients, HardwareConfig, LayerDims, ModelConfig};
use crate::error::TimingError;

/// Vector-unit ops charged per softmax element.
pub const SOFTMAX_OPS_PER_ELEMENT: u64 = 5;

/// Activation transfers per layer when attention nonlinearities leave the PIM.
pub const ATTENTION_TRANSFERS_PER_LAYER: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Npu,
    Pim,
    Gpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Link {
    OffChip,
    OnChip,
}

/// Throughput and bandwidth of one execution unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roofline {
    pub device: Device,
    ops_milli_per_cycle: u128,
    freq_hz: u128,
    link_bytes_per_sec: u128,
    link: Link,
}

fn milli(x: f64) -> u128 {
    ((x * 1000.0).round() as u128).max(1)
}

fn whole(x: f64) -> u128 {
    (x.round() as u128).max(1)
}

fn div_ceil(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

impl Roofline {
    pub fn npu_matrix(hw: &HardwareConfig) -> Self {
        Self {
            device: Device::Npu,
            ops_milli_per_cycle: milli(hw.npu_matrix_ops_per_cycle),
            freq_hz: whole(hw.npu_freq_hz),
            link_bytes_per_sec: whole(hw.offchip_bw_bytes_per_sec),
            link: Link::OffChip,
        }
    }

    pub fn npu_vector(hw: &HardwareConfig) -> Self {
        Self {
            ops_milli_per_cycle: milli(hw.npu_vector_ops_per_cycle),
            ..Self::npu_matrix(hw)
        }
    }

    pub fn pim(hw: &HardwareConfig) -> Self {
        Self {
            device: Device::Pim,
            ops_milli_per_cycle: milli(hw.pim_ops_per_cycle_per_unit * hw.pim_units as f64),
            freq_hz: whole(hw.pim_freq_hz),
            link_bytes_per_sec: whole(hw.pim_onchip_bw_bytes_per_sec),
            link: Link::OnChip,
        }
    }

    pub fn gpu(b: &BaselineConfig) -> Self {
        Self {
            device: Device::Gpu,
            ops_milli_per_cycle: milli(b.gpu_ops_per_cycle),
            freq_hz: whole(b.gpu_freq_hz),
            link_bytes_per_sec: whole(b.gpu_mem_bw_bytes_per_sec),
            link: Link::OffChip,
        }
    }

    pub fn freq_hz(&self) -> u64 {
        self.freq_hz as u64
    }

    pub fn compute_cycles(&self, ops: u64) -> u64 {
        div_ceil(ops as u128 * 1000, self.ops_milli_per_cycle) as u64
    }

    pub fn memory_cycles(&self, bytes: u64) -> u64 {
        div_ceil(bytes as u128 * self.freq_hz, self.link_bytes_per_sec) as u64
    }

    /// A compute-only operator (operands already on chip).
    fn compute_only(&self, ops: u64) -> OpCost {
        let c = self.compute_cycles(ops);
        OpCost {
            device: self.device,
            cycles: c,
            compute_cycles: c,
            ops,
            ..OpCost::zero(self.device)
        }
    }
}

/// Cost of one operator or a sequence of operators on one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub device: Device,
    /// Device cycles.
    pub cycles: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub ops: u64,
    /// Ops executed by the in-PIM attention unit.
    pub aau_ops: u64,
    /// Bytes moved inside the DRAM (PIM internal reads).
    pub dram_bytes_moved: u64,
    pub offchip_bytes_moved: u64,
    pub energy_pj: f64,
}

impl OpCost {
    pub fn zero(device: Device) -> Self {
        Self {
            device,
            cycles: 0,
            compute_cycles: 0,
            memory_cycles: 0,
            ops: 0,
            aau_ops: 0,
            dram_bytes_moved: 0,
            offchip_bytes_moved: 0,
            energy_pj: 0.0,
        }
    }

    /// Sequential composition on the same device.
    pub fn then(self, other: OpCost) -> OpCost {
        debug_assert_eq!(self.device, other.device);
        OpCost {
            device: self.device,
            cycles: self.cycles + other.cycles,
            compute_cycles: self.compute_cycles + other.compute_cycles,
            memory_cycles: self.memory_cycles + other.memory_cycles,
            ops: self.ops + other.ops,
            aau_ops: self.aau_ops + other.aau_ops,
            dram_bytes_moved: self.dram_bytes_moved + other.dram_bytes_moved,
            offchip_bytes_moved: self.offchip_bytes_moved + other.offchip_bytes_moved,
            energy_pj: self.energy_pj + other.energy_pj,
        }
    }

    /// `n` back-to-back repetitions.
    pub fn repeat(self, n: u64) -> OpCost {
        OpCost {
            device: self.device,
            cycles: self.cycles * n,
            compute_cycles: self.compute_cycles * n,
            memory_cycles: self.memory_cycles * n,
            ops: self.ops * n,
            aau_ops: self.aau_ops * n,
            dram_bytes_moved: self.dram_bytes_moved * n,
            offchip_bytes_moved: self.offchip_bytes_moved * n,
            energy_pj: self.energy_pj * n as f64,
        }
    }

    pub fn with_energy(mut self, coeffs: &EnergyCoefficients) -> Self {
        self.energy_pj = energy_of(&self, coeffs);
        self
    }
}

/// Roofline cost of an `M x K` by `K x N` product.
pub fn gemm_cycles(rf: &Roofline, m: u64, k: u64, n: u64, weight_resident: bool) -> Result<OpCost, TimingError> {
    for (name, v) in [("M", m), ("K", k), ("N", n)] {
        if v == 0 {
            return Err(TimingError::ZeroDimension(name));
        }
    }
    let ops = 2 * m * k * n;
    let weights = if weight_resident { 0 } else { k * n };
    let bytes = weights + m * k + m * n;
    let compute = rf.compute_cycles(ops);
    let memory = rf.memory_cycles(bytes);
    let (dram, offchip) = match rf.link {
        Link::OnChip => (bytes, 0),
        Link::OffChip => (0, bytes),
    };
    Ok(OpCost {
        device: rf.device,
        cycles: compute.max(memory),
        compute_cycles: compute,
        memory_cycles: memory,
        ops,
        aau_ops: 0,
        dram_bytes_moved: dram,
        offchip_bytes_moved: offchip,
        energy_pj: 0.0,
    })
}

fn gemm(rf: &Roofline, m: u64, k: u64, n: u64) -> OpCost {
    gemm_cycles(rf, m, k, n, false).expect("dimensions checked by caller")
}

/// One forward pass through a decoder stack for `m` tokens attending over a
/// context of `ctx` positions.
pub fn stack_forward(matrix: &Roofline, vector: &Roofline, dims: LayerDims, m: u64, ctx: u64) -> OpCost {
    if dims.layers == 0 || dims.hidden == 0 || m == 0 {
        return OpCost::zero(matrix.device);
    }
    let h = dims.hidden;
    let mut layer = gemm(matrix, m, h, 3 * h)
        .then(gemm(matrix, m, h, h))
        .then(gemm(matrix, m, h, 4 * h))
        .then(gemm(matrix, m, 4 * h, h));
    if ctx > 0 {
        layer = layer
            .then(gemm(matrix, m, h, ctx))
            .then(gemm(matrix, m, ctx, h))
            .then(vector.compute_only(SOFTMAX_OPS_PER_ELEMENT * m * ctx * dims.heads()));
    }
    layer.repeat(dims.layers)
}

/// Drafting `draft_len` tokens one at a time on the PIM, starting from a
/// context of `kv_len`.
pub fn dlm_draft_cycles(
    hw: &HardwareConfig,
    model: &ModelConfig,
    draft_len: u64,
    kv_len: u64,
) -> Result<OpCost, TimingError> {
    if draft_len == 0 {
        return Err(TimingError::ZeroDimension("draft_len"));
    }
    let pim = Roofline::pim(hw);
    Ok((0..draft_len).fold(OpCost::zero(Device::Pim), |acc, t| {
        acc.then(stack_forward(&pim, &pim, model.dlm(), 1, kv_len + t))
    }))
}

/// Target-model verification of `batch_len` tokens on the NPU. Weights and the
/// KV cache stream over the off-chip link.
pub fn tlm_verify_cycles(
    hw: &HardwareConfig,
    model: &ModelConfig,
    batch_len: u64,
    kv_len: u64,
) -> Result<OpCost, TimingError> {
    if batch_len == 0 {
        return Err(TimingError::ZeroDimension("batch_len"));
    }
    Ok(stack_forward(
        &Roofline::npu_matrix(hw),
        &Roofline::npu_vector(hw),
        model.tlm(),
        batch_len,
        kv_len + batch_len,
    ))
}

/// Target-model forward pass on the PIM without rank switching.
pub fn tlm_on_pim_cycles(
    hw: &HardwareConfig,
    model: &ModelConfig,
    len: u64,
    kv_len: u64,
) -> Result<OpCost, TimingError> {
    if len == 0 {
        return Err(TimingError::ZeroDimension("preverify_len"));
    }
    let pim = Roofline::pim(hw);
    Ok(stack_forward(&pim, &pim, model.tlm(), len, kv_len + len))
}

/// Pre-verification on the PIM: switch to the target-model ranks, run the
/// forward pass, switch back.
pub fn pim_preverify_cycles(
    hw: &HardwareConfig,
    model: &ModelConfig,
    preverify_len: u64,
    kv_len: u64,
) -> Result<OpCost, TimingError> {
    let mut cost = tlm_on_pim_cycles(hw, model, preverify_len, kv_len)?;
    cost.cycles += 2 * hw.gtsu_switch_cycles;
    Ok(cost)
}

/// Moving attention intermediates between PIM and NPU, NPU cycles. Zero cycles
/// when the in-PIM attention unit handles them.
pub fn attention_comm_cycles(hw: &HardwareConfig, dims: LayerDims, tokens: u64) -> Result<OpCost, TimingError> {
    if tokens == 0 {
        return Err(TimingError::ZeroDimension("tokens"));
    }
    let elements = tokens * dims.hidden * ATTENTION_TRANSFERS_PER_LAYER * dims.layers;
    if hw.aau_enabled {
        return Ok(OpCost {
            aau_ops: elements,
            ..OpCost::zero(Device::Pim)
        });
    }
    let rf = Roofline::npu_matrix(hw);
    let cycles = rf.memory_cycles(elements);
    Ok(OpCost {
        device: Device::Npu,
        cycles,
        memory_cycles: cycles,
        offchip_bytes_moved: elements,
        ..OpCost::zero(Device::Npu)
    })
}

/// Baseline forward pass on the GPU.
pub fn gpu_forward_cycles(b: &BaselineConfig, dims: LayerDims, m: u64, ctx: u64) -> OpCost {
    let rf = Roofline::gpu(b);
    stack_forward(&rf, &rf, dims, m, ctx)
}

/// Linear energy: per-op and per-byte dynamic terms plus per-cycle background
/// of the executing device.
pub fn energy_of(cost: &OpCost, c: &EnergyCoefficients) -> f64 {
    let (per_op, background) = match cost.device {
        Device::Npu => (c.npu_dynamic_pj_per_op, c.npu_background_pj_per_cycle),
        Device::Pim => (c.pim_dynamic_pj_per_op, c.pim_background_pj_per_cycle),
        Device::Gpu => (c.gpu_dynamic_pj_per_op, c.gpu_background_pj_per_cycle),
    };
    cost.ops as f64 * per_op
        + cost.aau_ops as f64 * c.aau_pj_per_op
        + cost.dram_bytes_moved as f64 * c.dram_pj_per_byte
        + cost.offchip_bytes_moved as f64 * c.offchip_pj_per_byte
        + cost.cycles as f64 * background
}

/// Convert device cycles to picoseconds, rounding up.
pub fn cycles_to_ps(cycles: u64, freq_hz: f64) -> u64 {
    div_ceil(cycles as u128 * 1_000_000_000_000, whole(freq_hz)) as u64
}

/// Convert picoseconds to (fractional) device cycles.
pub fn ps_to_cycles(ps: u64, freq_hz: f64) -> f64 {
    ps as f64 * freq_hz / 1e12
}
