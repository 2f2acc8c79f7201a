//! Experiment configuration.
//!
//! A configuration is a single TOML document. Every section and every key is
//! optional; missing values fall back to the mobile NPU + LPDDR5-PIM platform
//! defaults and the "medium" model scale. See `docs/config.md` for the grammar.
//!
//! ```toml
//! variant = "full"
//! seed = 42
//! generation_length = 1024
//!
//! [model]
//! scale = "small"
//!
//! [hardware]
//! pim_freq_hz = 1.0e9
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::workload::DraftAlgorithm;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "SPECSIM_SEED";

/// Head dimension used to derive the number of attention heads.
pub const HEAD_DIM: u64 = 128;

mod defaults {
    pub const NPU_MATRIX_OPS_PER_CYCLE: f64 = 16_000.0;
    pub const NPU_VECTOR_OPS_PER_CYCLE: f64 = 8_200.0;
    pub const NPU_FREQ_HZ: f64 = 1.0e9;
    pub const NPU_SPM_BYTES: u64 = 8 * 1024 * 1024;
    pub const PIM_UNITS: u32 = 16;
    /// Per-unit INT8 throughput in ops/s.
    pub const PIM_UNIT_OPS_PER_SEC: f64 = 102.4e9;
    pub const PIM_FREQ_HZ: f64 = 800.0e6;
    pub const PIM_ONCHIP_BW: f64 = 256.0e9;
    pub const OFFCHIP_BW: f64 = 51.2e9;
    /// 0.5 us at 800 MHz.
    pub const GTSU_SWITCH_CYCLES: u64 = 400;
    pub const QUEUE_TRANSFER_CYCLES: u64 = 200;

    pub const GENERATION_LENGTH: u64 = 1024;
    pub const SEED: u64 = 0;
}

/// Which execution model a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GpuOnly,
    OpSync,
    Async,
    AsyncAau,
    AsyncAauEdc,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::GpuOnly,
        Variant::OpSync,
        Variant::Async,
        Variant::AsyncAau,
        Variant::AsyncAauEdc,
        Variant::Full,
    ];

    /// The ablation ladder, from the synchronous baseline to the full design.
    pub const LADDER: [Variant; 5] = [
        Variant::OpSync,
        Variant::Async,
        Variant::AsyncAau,
        Variant::AsyncAauEdc,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::GpuOnly => "gpu_only",
            Variant::OpSync => "op_sync",
            Variant::Async => "async",
            Variant::AsyncAau => "async_aau",
            Variant::AsyncAauEdc => "async_aau_edc",
            Variant::Full => "full",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::GpuOnly | Variant::OpSync)
    }

    pub fn has_aau(self) -> bool {
        matches!(self, Variant::AsyncAau | Variant::AsyncAauEdc | Variant::Full)
    }

    pub fn has_edc(self) -> bool {
        matches!(self, Variant::AsyncAauEdc | Variant::Full)
    }

    pub fn has_tvc(self) -> bool {
        matches!(self, Variant::Full)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown variant \"{s}\"")))
    }
}

/// LPDDR5 timing parameters. Recorded for documentation only; the simulator
/// models bandwidth, not DRAM commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramTiming {
    pub t_rp: u32,
    pub t_rcd: u32,
    pub t_ras: u32,
    pub t_rrd_l: u32,
    pub t_wr: u32,
    pub t_ccd_s: u32,
    pub t_ccd_l: u32,
    pub t_refi: u32,
    pub t_faw: u32,
    pub t_rfc: u32,
}

impl Default for DramTiming {
    fn default() -> Self {
        Self {
            t_rp: 32,
            t_rcd: 32,
            t_ras: 64,
            t_rrd_l: 8,
            t_wr: 24,
            t_ccd_s: 4,
            t_ccd_l: 6,
            t_refi: 6240,
            t_faw: 64,
            t_rfc: 560,
        }
    }
}

/// Roofline parameters of the NPU and the PIM module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub npu_matrix_ops_per_cycle: f64,
    pub npu_vector_ops_per_cycle: f64,
    pub npu_freq_hz: f64,
    pub npu_spm_bytes: u64,
    pub pim_units: u32,
    pub pim_ops_per_cycle_per_unit: f64,
    pub pim_freq_hz: f64,
    pub pim_onchip_bw_bytes_per_sec: f64,
    pub offchip_bw_bytes_per_sec: f64,
    /// Rank switch latency, PIM cycles.
    pub gtsu_switch_cycles: u64,
    pub aau_enabled: bool,
    /// Cost of one queue message, NPU cycles.
    pub queue_transfer_cycles: u64,
    pub dram_timing: DramTiming,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            npu_matrix_ops_per_cycle: defaults::NPU_MATRIX_OPS_PER_CYCLE,
            npu_vector_ops_per_cycle: defaults::NPU_VECTOR_OPS_PER_CYCLE,
            npu_freq_hz: defaults::NPU_FREQ_HZ,
            npu_spm_bytes: defaults::NPU_SPM_BYTES,
            pim_units: defaults::PIM_UNITS,
            pim_ops_per_cycle_per_unit: defaults::PIM_UNIT_OPS_PER_SEC / defaults::PIM_FREQ_HZ,
            pim_freq_hz: defaults::PIM_FREQ_HZ,
            pim_onchip_bw_bytes_per_sec: defaults::PIM_ONCHIP_BW,
            offchip_bw_bytes_per_sec: defaults::OFFCHIP_BW,
            gtsu_switch_cycles: defaults::GTSU_SWITCH_CYCLES,
            aau_enabled: true,
            queue_transfer_cycles: defaults::QUEUE_TRANSFER_CYCLES,
            dram_timing: DramTiming::default(),
        }
    }
}

impl HardwareConfig {
    /// Aggregate PIM throughput in ops/s.
    pub fn pim_ops_per_sec(&self) -> f64 {
        self.pim_units as f64 * self.pim_ops_per_cycle_per_unit * self.pim_freq_hz
    }

    /// PIM clock over NPU clock.
    pub fn freq_ratio(&self) -> f64 {
        self.pim_freq_hz / self.npu_freq_hz
    }

    fn validate(&self) -> Result<(), ConfigError> {
        positive("npu_matrix_ops_per_cycle", self.npu_matrix_ops_per_cycle)?;
        positive("npu_vector_ops_per_cycle", self.npu_vector_ops_per_cycle)?;
        positive("npu_freq_hz", self.npu_freq_hz)?;
        positive("npu_spm_bytes", self.npu_spm_bytes as f64)?;
        positive("pim_units", self.pim_units as f64)?;
        positive("pim_ops_per_cycle_per_unit", self.pim_ops_per_cycle_per_unit)?;
        positive("pim_freq_hz", self.pim_freq_hz)?;
        positive("pim_onchip_bw_bytes_per_sec", self.pim_onchip_bw_bytes_per_sec)?;
        positive("offchip_bw_bytes_per_sec", self.offchip_bw_bytes_per_sec)?;
        Ok(())
    }
}

/// Named model pairings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Small,
    #[default]
    Medium,
    Large,
}

struct ScalePreset {
    name: &'static str,
    dlm_hidden: u64,
    tlm_hidden: u64,
    dlm_layers: u64,
    tlm_layers: u64,
    vocab_size: u64,
}

impl Scale {
    fn preset(self) -> ScalePreset {
        match self {
            Scale::Small => ScalePreset {
                name: "OPT-1.3B/OPT-6.7B",
                dlm_hidden: 2048,
                tlm_hidden: 4096,
                dlm_layers: 24,
                tlm_layers: 32,
                vocab_size: 50272,
            },
            Scale::Medium => ScalePreset {
                name: "LLaMA2-7B/LLaMA2-13B",
                dlm_hidden: 4096,
                tlm_hidden: 5120,
                dlm_layers: 32,
                tlm_layers: 40,
                vocab_size: 32000,
            },
            Scale::Large => ScalePreset {
                name: "PaLM-like-8B/PaLM-like-30B",
                dlm_hidden: 4096,
                tlm_hidden: 8192,
                dlm_layers: 32,
                tlm_layers: 48,
                vocab_size: 256000,
            },
        }
    }
}

/// INT8 parameter bytes of a decoder stack: 12 * layers * hidden^2.
pub fn default_params_bytes(layers: u64, hidden: u64) -> u64 {
    12 * layers * hidden * hidden
}

/// Draft (DLM) and target (TLM) model shapes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub scale: Scale,
    pub name: String,
    pub dlm_hidden: u64,
    pub tlm_hidden: u64,
    pub dlm_layers: u64,
    pub tlm_layers: u64,
    pub dlm_params_bytes: u64,
    pub tlm_params_bytes: u64,
    pub vocab_size: u64,
    /// Upper bound of softmax entropy, nats.
    pub h_max: f64,
}

/// Shape of one decoder stack as seen by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub hidden: u64,
    pub layers: u64,
    pub params_bytes: u64,
}

impl LayerDims {
    pub fn heads(&self) -> u64 {
        (self.hidden / HEAD_DIM).max(1)
    }
}

impl ModelConfig {
    pub fn for_scale(scale: Scale) -> Self {
        RawModel {
            scale: Some(scale),
            ..RawModel::default()
        }
        .resolve()
    }

    pub fn dlm(&self) -> LayerDims {
        LayerDims {
            hidden: self.dlm_hidden,
            layers: self.dlm_layers,
            params_bytes: self.dlm_params_bytes,
        }
    }

    pub fn tlm(&self) -> LayerDims {
        LayerDims {
            hidden: self.tlm_hidden,
            layers: self.tlm_layers,
            params_bytes: self.tlm_params_bytes,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.h_max.is_nan() || self.h_max <= 0.0 {
            return Err(ConfigError::Invalid("h_max must be positive".into()));
        }
        positive("vocab_size", self.vocab_size as f64)?;
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_scale(Scale::Medium)
    }
}

/// Model section as written in a document: a scale plus optional overrides.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    scale: Option<Scale>,
    name: Option<String>,
    dlm_hidden: Option<u64>,
    tlm_hidden: Option<u64>,
    dlm_layers: Option<u64>,
    tlm_layers: Option<u64>,
    dlm_params_bytes: Option<u64>,
    tlm_params_bytes: Option<u64>,
    vocab_size: Option<u64>,
    h_max: Option<f64>,
}

impl RawModel {
    fn resolve(self) -> ModelConfig {
        let scale = self.scale.unwrap_or_default();
        let p = scale.preset();
        let dlm_hidden = self.dlm_hidden.unwrap_or(p.dlm_hidden);
        let tlm_hidden = self.tlm_hidden.unwrap_or(p.tlm_hidden);
        let dlm_layers = self.dlm_layers.unwrap_or(p.dlm_layers);
        let tlm_layers = self.tlm_layers.unwrap_or(p.tlm_layers);
        let vocab_size = self.vocab_size.unwrap_or(p.vocab_size);
        ModelConfig {
            scale,
            name: self.name.unwrap_or_else(|| p.name.to_string()),
            dlm_hidden,
            tlm_hidden,
            dlm_layers,
            tlm_layers,
            dlm_params_bytes: self
                .dlm_params_bytes
                .unwrap_or_else(|| default_params_bytes(dlm_layers, dlm_hidden)),
            tlm_params_bytes: self
                .tlm_params_bytes
                .unwrap_or_else(|| default_params_bytes(tlm_layers, tlm_hidden)),
            vocab_size,
            h_max: self.h_max.unwrap_or((vocab_size as f64).ln()),
        }
    }
}

impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        RawModel::deserialize(d).map(RawModel::resolve)
    }
}

/// Parameters of the synthetic token process and the drafting stop rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub difficulty_walk_step: f64,
    pub initial_difficulty: f64,
    pub entropy_noise_sd: f64,
    pub accept_slope: f64,
    pub accept_floor: f64,
    pub accept_ceiling: f64,
    pub lookahead_decay: f64,
    pub max_draft_len: usize,
    pub algorithm: DraftAlgorithm,
    /// Stop threshold; `None` selects the calibrated default of `algorithm`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm_threshold: Option<f64>,
    /// Context length already present before generation starts.
    pub prompt_len: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            difficulty_walk_step: 0.08,
            initial_difficulty: 0.3,
            entropy_noise_sd: 0.5,
            accept_slope: 0.9,
            accept_floor: 0.05,
            accept_ceiling: 0.95,
            lookahead_decay: 0.8,
            max_draft_len: 8,
            algorithm: DraftAlgorithm::AdaEdl,
            algorithm_threshold: None,
            prompt_len: 128,
            trace_path: None,
        }
    }
}

impl WorkloadConfig {
    pub fn threshold(&self) -> f64 {
        self.algorithm_threshold
            .unwrap_or_else(|| self.algorithm.default_threshold())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{name} must be in [0, 1]")))
            }
        };
        unit("difficulty_walk_step", self.difficulty_walk_step)?;
        unit("initial_difficulty", self.initial_difficulty)?;
        unit("accept_floor", self.accept_floor)?;
        unit("accept_ceiling", self.accept_ceiling)?;
        if self.accept_floor > self.accept_ceiling {
            return Err(ConfigError::Invalid(
                "accept_floor must not exceed accept_ceiling".into(),
            ));
        }
        if !(self.lookahead_decay > 0.0 && self.lookahead_decay <= 1.0) {
            return Err(ConfigError::Invalid("lookahead_decay must be in (0, 1]".into()));
        }
        if !non_negative(self.entropy_noise_sd) {
            return Err(ConfigError::Invalid("entropy_noise_sd must be non-negative".into()));
        }
        if !non_negative(self.accept_slope) {
            return Err(ConfigError::Invalid("accept_slope must be non-negative".into()));
        }
        if self.max_draft_len == 0 {
            return Err(ConfigError::Invalid("max_draft_len must be at least 1".into()));
        }
        if !self.threshold().is_finite() {
            return Err(ConfigError::Invalid("algorithm_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Scheduling knobs the hardware description leaves open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub max_batches_per_verify: usize,
    /// Back-pressure limit on outstanding draft batches; `None` is unbounded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<usize>,
    /// Aborts a run that processes more events than this.
    pub event_cap: u64,
    /// Initial value of every PHT counter.
    pub pht_init: u8,
    /// Draft length reserved by the pre-verification budget.
    pub preverify_reserve_draft_len: usize,
    /// Feed the pre-verification controller exact costs from the timing model
    /// instead of its history tables.
    pub exact_tvc: bool,
    /// Decrement the pattern counter of every batch discarded by a rollback,
    /// not only of the batch that was rejected.
    pub learn_from_purges: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            max_batches_per_verify: 1,
            queue_capacity: None,
            event_cap: 5_000_000,
            pht_init: 2,
            preverify_reserve_draft_len: 1,
            exact_tvc: false,
            learn_from_purges: false,
        }
    }
}

impl PolicyConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.max_batches_per_verify == 0 {
            return Err(ConfigError::Invalid("max_batches_per_verify must be at least 1".into()));
        }
        if self.queue_capacity == Some(0) {
            return Err(ConfigError::Invalid("queue_capacity must be at least 1".into()));
        }
        if self.pht_init > 3 {
            return Err(ConfigError::Invalid("pht_init must be in 0..=3".into()));
        }
        if self.preverify_reserve_draft_len == 0 {
            return Err(ConfigError::Invalid(
                "preverify_reserve_draft_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Abstract energy coefficients. Trend-level only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyCoefficients {
    pub npu_dynamic_pj_per_op: f64,
    pub pim_dynamic_pj_per_op: f64,
    pub gpu_dynamic_pj_per_op: f64,
    /// In-memory (PIM internal) access energy.
    pub dram_pj_per_byte: f64,
    /// Off-chip LPDDR5 transfer energy.
    pub offchip_pj_per_byte: f64,
    pub npu_background_pj_per_cycle: f64,
    pub pim_background_pj_per_cycle: f64,
    pub gpu_background_pj_per_cycle: f64,
    pub aau_pj_per_op: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        Self {
            npu_dynamic_pj_per_op: 0.25,
            pim_dynamic_pj_per_op: 0.4,
            gpu_dynamic_pj_per_op: 0.8,
            dram_pj_per_byte: 4.0,
            offchip_pj_per_byte: 20.0,
            npu_background_pj_per_cycle: 300.0,
            pim_background_pj_per_cycle: 250.0,
            gpu_background_pj_per_cycle: 3000.0,
            aau_pj_per_op: 1.0,
        }
    }
}

impl EnergyCoefficients {
    pub fn zero() -> Self {
        Self {
            npu_dynamic_pj_per_op: 0.0,
            pim_dynamic_pj_per_op: 0.0,
            gpu_dynamic_pj_per_op: 0.0,
            dram_pj_per_byte: 0.0,
            offchip_pj_per_byte: 0.0,
            npu_background_pj_per_cycle: 0.0,
            pim_background_pj_per_cycle: 0.0,
            gpu_background_pj_per_cycle: 0.0,
            aau_pj_per_op: 0.0,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let all = [
            ("npu_dynamic_pj_per_op", self.npu_dynamic_pj_per_op),
            ("pim_dynamic_pj_per_op", self.pim_dynamic_pj_per_op),
            ("gpu_dynamic_pj_per_op", self.gpu_dynamic_pj_per_op),
            ("dram_pj_per_byte", self.dram_pj_per_byte),
            ("offchip_pj_per_byte", self.offchip_pj_per_byte),
            ("npu_background_pj_per_cycle", self.npu_background_pj_per_cycle),
            ("pim_background_pj_per_cycle", self.pim_background_pj_per_cycle),
            ("gpu_background_pj_per_cycle", self.gpu_background_pj_per_cycle),
            ("aau_pj_per_op", self.aau_pj_per_op),
        ];
        for (name, v) in all {
            if !non_negative(v) {
                return Err(ConfigError::Invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Devices used only by the reference baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub gpu_ops_per_cycle: f64,
    pub gpu_freq_hz: f64,
    pub gpu_mem_bw_bytes_per_sec: f64,
    pub opsync_attention_on_pim: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        // Mobile-class GPU sharing the LPDDR5 interface with the rest of the SoC.
        Self {
            gpu_ops_per_cycle: 3_000.0,
            gpu_freq_hz: 1.335e9,
            gpu_mem_bw_bytes_per_sec: 51.2e9,
            opsync_attention_on_pim: true,
        }
    }
}

impl BaselineConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        positive("gpu_ops_per_cycle", self.gpu_ops_per_cycle)?;
        positive("gpu_freq_hz", self.gpu_freq_hz)?;
        positive("gpu_mem_bw_bytes_per_sec", self.gpu_mem_bw_bytes_per_sec)
    }
}

/// A complete, validated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub seed: u64,
    pub generation_length: u64,
    pub hardware: HardwareConfig,
    pub model: ModelConfig,
    pub workload: WorkloadConfig,
    pub policy: PolicyConfig,
    pub energy: EnergyCoefficients,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            seed: defaults::SEED,
            generation_length: defaults::GENERATION_LENGTH,
            hardware: HardwareConfig::default(),
            model: ModelConfig::default(),
            workload: WorkloadConfig::default(),
            policy: PolicyConfig::default(),
            energy: EnergyCoefficients::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.generation_length == 0 {
            return Err(ConfigError::Invalid("generation_length must be at least 1".into()));
        }
        self.hardware.validate()?;
        self.model.validate()?;
        self.workload.validate()?;
        self.policy.validate()?;
        self.energy.validate()?;
        self.baseline.validate()
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Serialize to the documented TOML form. Parsing the result with
    /// [`load_config`] yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive")))
    }
}

/// Parse and validate a configuration document.
pub fn load_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    load_config_with_overrides(text, &[])
}

/// Parse a document, apply `key=value` overrides (dotted keys, values in TOML
/// syntax with bare strings accepted), then validate.
pub fn load_config_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let cfg: ExperimentConfig = doc
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read a config file; an empty path string means all defaults.
pub fn load_config_file(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = load_config_with_overrides(&text, overrides)?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV} must be an unsigned integer")))?;
    }
    Ok(cfg)
}

fn apply_override(doc: &mut toml::Table, ov: &str) -> Result<(), ConfigError> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override \"{ov}\" is not key=value")))?;
    let key = key.trim();
    let value = parse_override_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ConfigError::Invalid(format!("override \"{ov}\" has an empty key")))?;
    let mut table = doc;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("override key \"{key}\" is not a table path")))?;
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// False for negative values and NaN.
fn non_negative(v: f64) -> bool {
    v.partial_cmp(&0.0).is_some_and(|o| o.is_ge())
}
