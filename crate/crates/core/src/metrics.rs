//! Run statistics and report serialization.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Variant};

/// Bumped whenever report fields change.
pub const SCHEMA_VERSION: u32 = 1;

/// Which devices a run used, for background-energy attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Platform {
    /// NPU verifies, PIM drafts.
    NpuPim,
    /// One GPU does everything; its figures are reported in the `npu_*` fields.
    Gpu,
}

/// Counters accumulated during a simulation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawCounters {
    pub committed_tokens: u64,
    pub drafted_tokens: u64,
    pub accepted_draft_tokens: u64,
    pub rejected_tokens: u64,
    pub purged_tokens: u64,
    pub draft_batches: u64,
    pub verify_count: u64,
    pub preverify_count: u64,
    pub preverified_tokens: u64,
    pub end_ps: u64,
    pub npu_busy_ps: u64,
    pub npu_starved_ps: u64,
    pub pim_busy_ps: u64,
    pub pim_wasted_ps: u64,
    /// Barrier idle time of the operator-synchronous baseline, both devices.
    pub sync_idle_ps: u64,
    /// Energy of executed operations, including busy-cycle background.
    pub busy_energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub variant: String,
    pub seed: u64,
    pub committed_tokens: u64,
    pub wall_time_sec: f64,
    pub throughput_tokens_per_sec: f64,
    pub drafted_tokens: u64,
    pub accepted_draft_tokens: u64,
    pub acceptance_rate: f64,
    pub rejected_tokens: u64,
    pub purged_tokens: u64,
    pub mean_draft_len: f64,
    pub verify_count: u64,
    pub npu_busy_frac: f64,
    pub npu_idle_frac: f64,
    pub npu_starved_frac: f64,
    pub pim_busy_frac: f64,
    pub pim_idle_frac: f64,
    pub pim_wasted_frac: f64,
    pub sync_idle_frac: f64,
    pub preverify_count: u64,
    pub preverified_tokens: u64,
    pub energy_pj_total: f64,
    pub energy_pj_per_token: f64,
    pub tokens_per_joule: f64,
    /// Config overrides applied to this run, `;`-separated.
    pub overrides: String,
}

fn frac(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

/// Derive the report from raw counters.
pub fn finalize(raw: &RawCounters, cfg: &ExperimentConfig, platform: Platform) -> MetricsReport {
    let wall = raw.end_ps as f64 * 1e-12;
    let idle_ps = |busy: u64| raw.end_ps.saturating_sub(busy);
    let e = &cfg.energy;
    let idle_energy = match platform {
        Platform::NpuPim => {
            idle_ps(raw.npu_busy_ps) as f64 * 1e-12 * cfg.hardware.npu_freq_hz * e.npu_background_pj_per_cycle
                + idle_ps(raw.pim_busy_ps) as f64 * 1e-12 * cfg.hardware.pim_freq_hz * e.pim_background_pj_per_cycle
        }
        Platform::Gpu => {
            idle_ps(raw.npu_busy_ps) as f64 * 1e-12 * cfg.baseline.gpu_freq_hz * e.gpu_background_pj_per_cycle
        }
    };
    let energy = raw.busy_energy_pj + idle_energy;
    let npu_busy = frac(raw.npu_busy_ps, raw.end_ps);
    let pim_busy = frac(raw.pim_busy_ps, raw.end_ps);
    MetricsReport {
        schema_version: SCHEMA_VERSION,
        variant: cfg.variant.label().to_string(),
        seed: cfg.seed,
        committed_tokens: raw.committed_tokens,
        wall_time_sec: wall,
        throughput_tokens_per_sec: if wall > 0.0 {
            raw.committed_tokens as f64 / wall
        } else {
            0.0
        },
        drafted_tokens: raw.drafted_tokens,
        accepted_draft_tokens: raw.accepted_draft_tokens,
        acceptance_rate: raw.accepted_draft_tokens as f64 / raw.drafted_tokens.max(1) as f64,
        rejected_tokens: raw.rejected_tokens,
        purged_tokens: raw.purged_tokens,
        mean_draft_len: frac(raw.drafted_tokens, raw.draft_batches),
        verify_count: raw.verify_count,
        npu_busy_frac: npu_busy,
        npu_idle_frac: if raw.end_ps == 0 { 1.0 } else { 1.0 - npu_busy },
        npu_starved_frac: frac(raw.npu_starved_ps, raw.end_ps),
        pim_busy_frac: pim_busy,
        pim_idle_frac: if raw.end_ps == 0 { 1.0 } else { 1.0 - pim_busy },
        pim_wasted_frac: frac(raw.pim_wasted_ps, raw.end_ps),
        sync_idle_frac: frac(raw.sync_idle_ps, raw.end_ps),
        preverify_count: raw.preverify_count,
        preverified_tokens: raw.preverified_tokens,
        energy_pj_total: energy,
        energy_pj_per_token: if raw.committed_tokens == 0 {
            0.0
        } else {
            energy / raw.committed_tokens as f64
        },
        tokens_per_joule: if energy > 0.0 {
            raw.committed_tokens as f64 / (energy * 1e-12)
        } else {
            0.0
        },
        overrides: String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Serialize reports. JSON gives an object for a single report and an array
/// otherwise; CSV gives a header and one row per report.
pub fn emit(reports: &[MetricsReport], format: Format) -> Result<String, std::io::Error> {
    match format {
        Format::Json => {
            let mut s = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])
            } else {
                serde_json::to_string_pretty(reports)
            }
            .map_err(std::io::Error::other)?;
            s.push('\n');
            Ok(s)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in reports {
                w.serialize(r).map_err(std::io::Error::other)?;
            }
            let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
            String::from_utf8(bytes).map_err(std::io::Error::other)
        }
    }
}

pub fn parse(text: &str, format: Format) -> Result<Vec<MetricsReport>, std::io::Error> {
    match format {
        Format::Json => {
            let v: serde_json::Value = serde_json::from_str(text).map_err(std::io::Error::other)?;
            if v.is_array() {
                serde_json::from_value(v).map_err(std::io::Error::other)
            } else {
                Ok(vec![serde_json::from_value(v).map_err(std::io::Error::other)?])
            }
        }
        Format::Csv => csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<Vec<_>, _>>()
            .map_err(std::io::Error::other),
    }
}

/// Order-independent aggregate over runs of one variant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub runs: u64,
    pub throughput_sum: f64,
    pub acceptance_sum: f64,
    pub energy_per_token_sum: f64,
    pub starved_sum: f64,
}

impl Summary {
    pub fn of(r: &MetricsReport) -> Self {
        Self {
            runs: 1,
            throughput_sum: r.throughput_tokens_per_sec,
            acceptance_sum: r.acceptance_rate,
            energy_per_token_sum: r.energy_pj_per_token,
            starved_sum: r.npu_starved_frac,
        }
    }

    pub fn merge(&self, other: &Summary) -> Summary {
        Summary {
            runs: self.runs + other.runs,
            throughput_sum: self.throughput_sum + other.throughput_sum,
            acceptance_sum: self.acceptance_sum + other.acceptance_sum,
            energy_per_token_sum: self.energy_per_token_sum + other.energy_per_token_sum,
            starved_sum: self.starved_sum + other.starved_sum,
        }
    }

    fn mean(&self, sum: f64) -> f64 {
        if self.runs == 0 {
            0.0
        } else {
            sum / self.runs as f64
        }
    }

    pub fn throughput(&self) -> f64 {
        self.mean(self.throughput_sum)
    }

    pub fn acceptance(&self) -> f64 {
        self.mean(self.acceptance_sum)
    }

    pub fn energy_per_token(&self) -> f64 {
        self.mean(self.energy_per_token_sum)
    }

    pub fn starved(&self) -> f64 {
        self.mean(self.starved_sum)
    }
}

/// Mean per variant, in the order variants first appear.
pub fn summarize(reports: &[MetricsReport]) -> Vec<(String, Summary)> {
    let mut out: Vec<(String, Summary)> = Vec::new();
    for r in reports {
        match out.iter_mut().find(|(v, _)| *v == r.variant) {
            Some((_, s)) => *s = s.merge(&Summary::of(r)),
            None => out.push((r.variant.clone(), Summary::of(r))),
        }
    }
    out
}

/// Sort key used for report sets: variant ladder position, then seed.
pub fn sort_reports(reports: &mut [MetricsReport]) {
    let rank = |label: &str| {
        Variant::ALL
            .iter()
            .position(|v| v.label() == label)
            .unwrap_or(usize::MAX)
    };
    reports.sort_by_key(|a| (rank(&a.variant), a.seed));
}
