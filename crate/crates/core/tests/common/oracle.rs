//! A separately written roofline summation, one operator at a time, for
//! checking the cost-dump output.

use std::process::Command;

use specsim::cli::CostPoint;
use specsim::config::{load_config_with_overrides, ExperimentConfig};

/// Device parameters as the oracle sees them: ops per cycle in thousandths,
/// clock and link bandwidth as integers.
#[derive(Clone, Copy)]
struct Dev {
    milli_ops: u128,
    freq: u128,
    bw: u128,
}

fn dev(ops_per_cycle: f64, freq: f64, bw: f64) -> Dev {
    Dev {
        milli_ops: ((ops_per_cycle * 1000.0).round() as u128).max(1),
        freq: (freq.round() as u128).max(1),
        bw: (bw.round() as u128).max(1),
    }
}

fn ceil_div(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

fn op(d: Dev, ops: u128, bytes: u128) -> u128 {
    let compute = ceil_div(ops * 1000, d.milli_ops);
    let memory = if bytes == 0 { 0 } else { ceil_div(bytes * d.freq, d.bw) };
    compute.max(memory)
}

fn matmul(d: Dev, m: u128, k: u128, n: u128, streamed: bool) -> u128 {
    let weight = if streamed { k * n } else { 0 };
    op(d, 2 * m * k * n, weight + m * k + m * n)
}

/// Walk every layer and every operator of a decoder stack.
fn stack(mat: Dev, vec: Dev, hidden: u64, layers: u64, m: u64, ctx: u64) -> u128 {
    let (h, m, ctx) = (hidden as u128, m as u128, ctx as u128);
    let heads = (h / 128).max(1);
    let mut total = 0;
    for _layer in 0..layers {
        for (k, n) in [(h, 3 * h), (h, h), (h, 4 * h), (4 * h, h)] {
            total += matmul(mat, m, k, n, true);
        }
        if ctx > 0 {
            total += matmul(mat, m, h, ctx, true);
            total += matmul(mat, m, ctx, h, true);
            total += op(vec, 5 * m * ctx * heads, 0);
        }
    }
    total
}

fn devices(cfg: &ExperimentConfig) -> (Dev, Dev, Dev) {
    let hw = &cfg.hardware;
    let npu = dev(hw.npu_matrix_ops_per_cycle, hw.npu_freq_hz, hw.offchip_bw_bytes_per_sec);
    let npu_vec = dev(hw.npu_vector_ops_per_cycle, hw.npu_freq_hz, hw.offchip_bw_bytes_per_sec);
    let pim = dev(
        hw.pim_ops_per_cycle_per_unit * hw.pim_units as f64,
        hw.pim_freq_hz,
        hw.pim_onchip_bw_bytes_per_sec,
    );
    (npu, npu_vec, pim)
}

fn expected(cfg: &ExperimentConfig, p: &CostPoint) -> CostPoint {
    let (npu, npu_vec, pim) = devices(cfg);
    let md = &cfg.model;
    let draft: u128 = (0..p.draft)
        .map(|t| stack(pim, pim, md.dlm_hidden, md.dlm_layers, 1, p.kv + t))
        .sum();
    let on_pim = stack(pim, pim, md.tlm_hidden, md.tlm_layers, p.draft, p.kv + p.draft);
    CostPoint {
        npu_gemm_cycles: matmul(npu, p.m as u128, p.k as u128, p.n as u128, true) as u64,
        pim_gemm_cycles: matmul(pim, p.m as u128, p.k as u128, p.n as u128, false) as u64,
        dlm_draft_cycles: draft as u64,
        tlm_verify_cycles: stack(npu, npu_vec, md.tlm_hidden, md.tlm_layers, p.m, p.kv + p.m) as u64,
        tlm_on_pim_cycles: on_pim as u64,
        pim_preverify_cycles: (on_pim + 2 * cfg.hardware.gtsu_switch_cycles as u128) as u64,
        ..p.clone()
    }
}

fn dump(args: &[&str]) -> Vec<CostPoint> {
    let out = Command::new(env!("CARGO_BIN_EXE_specsim"))
        .arg("cost-dump")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    csv::Reader::from_reader(out.stdout.as_slice())
        .deserialize()
        .collect::<Result<_, _>>()
        .expect("cost-dump emits CSV rows")
}

/// Run cost-dump under `overrides` and compare every row with the oracle.
/// Returns the number of matching rows or the first mismatch.
pub fn check(overrides: &[&str], seed: u64) -> Result<usize, String> {
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = load_config_with_overrides("", &owned).map_err(|e| e.to_string())?;
    let seed_arg = seed.to_string();
    let mut args = vec!["--seed", seed_arg.as_str()];
    for o in overrides {
        args.push("--override");
        args.push(o);
    }
    let rows = dump(&args);
    if rows.len() != 50 {
        return Err(format!("{} rows", rows.len()));
    }
    for row in &rows {
        let want = expected(&cfg, row);
        if *row != want {
            return Err(format!("got {row:?}, oracle {want:?}"));
        }
    }
    Ok(rows.len())
}
