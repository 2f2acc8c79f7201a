//! Synthetic token process, adaptive drafting stop rules and trace replay.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with the experiment
//! seed. The difficulty/entropy process is drawn sequentially by position from
//! stream [`STREAM_PROCESS`]; acceptance coins and oracle token ids are drawn by
//! random access, keyed by `(position, attempt)` on their own streams, so two
//! schedulers that verify the same position the same number of times observe
//! the same outcomes.

use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, WorkloadConfig};
use crate::error::WorkloadError;

pub type TokenId = u32;

pub const STREAM_PROCESS: u64 = 1;
pub const STREAM_ACCEPT: u64 = 2;
pub const STREAM_ORACLE: u64 = 3;
pub const STREAM_DECAY: u64 = 4;

/// Candidate draft lengths explored by the bandit stop rule.
pub const BANDIT_ARMS: [usize; 4] = [2, 4, 6, 8];

/// Reflect `x` into `[0, 1]`.
fn reflect_unit(x: f64) -> f64 {
    let y = if x < 0.0 {
        -x
    } else if x > 1.0 {
        2.0 - x
    } else {
        x
    };
    y.clamp(0.0, 1.0)
}

/// One step of the bounded difficulty random walk.
pub fn next_difficulty<R: RngCore + ?Sized>(state: f64, step: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    reflect_unit(state + step * (2.0 * u - 1.0))
}

/// Softmax entropy of a drafted token at the given difficulty.
pub fn draft_entropy<R: RngCore + ?Sized>(difficulty: f64, h_max: f64, noise_sd: f64, rng: &mut R) -> f64 {
    let noise = if noise_sd > 0.0 {
        Normal::new(0.0, noise_sd).expect("finite non-negative sd").sample(rng)
    } else {
        0.0
    };
    (difficulty * h_max + noise).clamp(0.0, h_max)
}

/// Linear-clamp acceptance model with geometric look-ahead decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceModel {
    pub slope: f64,
    pub floor: f64,
    pub ceiling: f64,
    pub decay: f64,
}

impl AcceptanceModel {
    pub fn from_config(w: &WorkloadConfig) -> Self {
        Self {
            slope: w.accept_slope,
            floor: w.accept_floor,
            ceiling: w.accept_ceiling,
            decay: w.lookahead_decay,
        }
    }

    /// Acceptance probability ignoring look-ahead depth.
    pub fn base_probability(&self, entropy: f64, h_max: f64) -> f64 {
        (1.0 - self.slope * entropy / h_max).clamp(self.floor, self.ceiling)
    }

    pub fn probability(&self, entropy: f64, h_max: f64, lookahead_depth: u32) -> f64 {
        self.base_probability(entropy, h_max) * self.decay.powi(lookahead_depth as i32)
    }
}

pub fn acceptance_outcome<R: RngCore + ?Sized>(
    model: &AcceptanceModel,
    entropy: f64,
    h_max: f64,
    lookahead_depth: u32,
    rng: &mut R,
) -> bool {
    let u: f64 = rng.random();
    u < model.probability(entropy, h_max, lookahead_depth)
}

/// Adaptive drafting algorithms, reconstructed on an entropy proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DraftAlgorithm {
    #[serde(rename = "specdecpp")]
    SpecDecPp,
    #[serde(rename = "svip")]
    Svip,
    #[serde(rename = "adaedl")]
    AdaEdl,
    #[serde(rename = "banditspec")]
    BanditSpec,
}

impl DraftAlgorithm {
    pub const ALL: [DraftAlgorithm; 4] = [
        DraftAlgorithm::SpecDecPp,
        DraftAlgorithm::Svip,
        DraftAlgorithm::AdaEdl,
        DraftAlgorithm::BanditSpec,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            DraftAlgorithm::SpecDecPp => "specdecpp",
            DraftAlgorithm::Svip => "svip",
            DraftAlgorithm::AdaEdl => "adaedl",
            DraftAlgorithm::BanditSpec => "banditspec",
        }
    }

    /// Thresholds calibrated for a mean draft length near 4 on the default
    /// workload (see `examples/calibrate.rs`).
    pub fn default_threshold(self) -> f64 {
        match self {
            DraftAlgorithm::SpecDecPp => 0.861,
            DraftAlgorithm::Svip => 0.584,
            DraftAlgorithm::AdaEdl => 0.236,
            DraftAlgorithm::BanditSpec => 0.0,
        }
    }
}

impl FromStr for DraftAlgorithm {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DraftAlgorithm::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| WorkloadError::UnknownAlgorithm(s.to_string()))
    }
}

/// Everything the stop decision needs besides the entropies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub algorithm: DraftAlgorithm,
    pub threshold: f64,
    /// Slope of the rejection estimate used by SpecDec++.
    pub slope: f64,
    pub h_max: f64,
    pub max_draft_len: usize,
}

impl StopRule {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            algorithm: cfg.workload.algorithm,
            threshold: cfg.workload.threshold(),
            slope: cfg.workload.accept_slope,
            h_max: cfg.model.h_max,
            max_draft_len: cfg.workload.max_draft_len,
        }
    }
}

/// Decide whether to stop drafting after the tokens drafted so far.
///
/// `arm_len` is the draft length chosen by the bandit for this batch and is
/// only consulted by [`DraftAlgorithm::BanditSpec`].
pub fn adaptive_stop(rule: &StopRule, entropies_so_far: &[f64], arm_len: Option<usize>) -> bool {
    let n = entropies_so_far.len();
    if n >= rule.max_draft_len {
        return true;
    }
    let Some(&last) = entropies_so_far.last() else {
        return false;
    };
    let theta = rule.threshold;
    match rule.algorithm {
        DraftAlgorithm::AdaEdl => 1.0 - (last / rule.h_max).max(0.0).sqrt() < theta,
        DraftAlgorithm::Svip => last > theta * rule.h_max,
        DraftAlgorithm::SpecDecPp => {
            let keep: f64 = entropies_so_far
                .iter()
                .map(|h| (1.0 - rule.slope * h / rule.h_max).clamp(0.0, 1.0))
                .product();
            1.0 - keep > theta
        }
        DraftAlgorithm::BanditSpec => n >= arm_len.unwrap_or(rule.max_draft_len),
    }
}

/// UCB1 over a fixed set of arms.
#[derive(Debug, Clone, PartialEq)]
pub struct Ucb1 {
    counts: Vec<u64>,
    values: Vec<f64>,
}

impl Ucb1 {
    pub fn new(arms: usize) -> Self {
        assert!(arms > 0, "need at least one arm");
        Self {
            counts: vec![0; arms],
            values: vec![0.0; arms],
        }
    }

    pub fn select(&self) -> usize {
        if let Some(i) = self.counts.iter().position(|&c| c == 0) {
            return i;
        }
        let ln_t = (self.counts.iter().sum::<u64>() as f64).ln();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, (&n, &v)) in self.counts.iter().zip(&self.values).enumerate() {
            let score = v + (2.0 * ln_t / n as f64).sqrt();
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        best
    }

    pub fn update(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1;
        let n = self.counts[arm] as f64;
        self.values[arm] += (reward - self.values[arm]) / n;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Stop rule plus the bandit state it may carry across batches.
#[derive(Debug, Clone)]
pub struct Drafter {
    pub rule: StopRule,
    bandit: Option<Ucb1>,
}

impl Drafter {
    pub fn new(rule: StopRule) -> Self {
        let bandit = (rule.algorithm == DraftAlgorithm::BanditSpec).then(|| Ucb1::new(BANDIT_ARMS.len()));
        Self { rule, bandit }
    }

    /// Pick the bandit arm for a new batch, if the algorithm uses one.
    pub fn begin_batch(&self) -> Option<usize> {
        self.bandit.as_ref().map(Ucb1::select)
    }

    /// Draft tokens from `base` until the stop rule fires. Returns the
    /// entropies of the drafted tokens.
    pub fn draft(&self, workload: &mut Workload, base: u64, arm: Option<usize>) -> Vec<f64> {
        let arm_len = arm.map(|a| BANDIT_ARMS[a]);
        let mut entropies = Vec::with_capacity(self.rule.max_draft_len);
        loop {
            entropies.push(workload.entropy_at(base + entropies.len() as u64));
            if adaptive_stop(&self.rule, &entropies, arm_len) {
                return entropies;
            }
        }
    }

    /// Credit the arm with the accepted tokens of one of its drafts.
    pub fn reward(&mut self, arm: Option<usize>, accepted: usize) {
        if let (Some(b), Some(a)) = (self.bandit.as_mut(), arm) {
            let max = *BANDIT_ARMS.last().unwrap() as f64;
            b.update(a, accepted as f64 / max);
        }
    }

    pub fn bandit(&self) -> Option<&Ucb1> {
        self.bandit.as_ref()
    }
}

/// Entropy and acceptance of one drafted token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub entropy: f64,
    pub accepted: bool,
    pub oracle_token: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step_index: u64,
    pub entropy: f64,
    pub accepted: bool,
}

/// A replayable, ingested trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Parse a `step_index,entropy,accepted` CSV trace.
pub fn ingest_trace<R: Read>(reader: R) -> Result<Trace, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| WorkloadError::Io(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["step_index", "entropy", "accepted"] {
        return Err(WorkloadError::BadHeader);
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| WorkloadError::Malformed {
            row: row_no,
            msg: e.to_string(),
        })?;
        if row.len() != 3 {
            return Err(WorkloadError::Malformed {
                row: row_no,
                msg: format!("expected 3 fields, found {}", row.len()),
            });
        }
        let bad = |msg: String| WorkloadError::Malformed { row: row_no, msg };
        let step_index = row[0].parse::<u64>().map_err(|e| bad(format!("step_index: {e}")))?;
        let entropy = row[1].parse::<f64>().map_err(|e| bad(format!("entropy: {e}")))?;
        if !entropy.is_finite() {
            return Err(bad("entropy is not finite".into()));
        }
        if entropy < 0.0 {
            return Err(WorkloadError::NegativeEntropy { row: row_no, entropy });
        }
        let accepted = match &row[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("accepted must be 0 or 1, found \"{other}\""))),
        };
        records.push(TraceRecord {
            step_index,
            entropy,
            accepted,
        });
    }
    Ok(Trace { records })
}

pub fn write_trace<W: Write>(records: &[TraceRecord], writer: W) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| WorkloadError::Io(e.to_string());
    w.write_record(["step_index", "entropy", "accepted"]).map_err(io)?;
    for r in records {
        w.write_record([
            r.step_index.to_string(),
            r.entropy.to_string(),
            if r.accepted { "1" } else { "0" }.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| WorkloadError::Io(e.to_string()))
}

/// A ChaCha8 generator positioned at `index` on `stream`.
pub fn keyed_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 4);
    rng
}

fn attempt_key(position: u64, attempt: u32) -> u64 {
    (position << 20) | u64::from(attempt.min((1 << 20) - 1))
}

// One per simulation, so the inline generator state is not worth boxing.
#[allow(clippy::large_enum_variant)]
enum Source {
    Synthetic {
        rng: ChaCha8Rng,
        difficulty: f64,
        step: f64,
        noise_sd: f64,
    },
    Replay(Trace),
}

/// Per-simulation token process. Positions are absolute indices into the
/// generated sequence (0 = first generated token).
pub struct Workload {
    seed: u64,
    h_max: f64,
    pub acceptance: AcceptanceModel,
    source: Source,
    entropies: Vec<f64>,
    attempts: Vec<u32>,
}

impl Workload {
    pub fn synthetic(cfg: &ExperimentConfig) -> Self {
        let w = &cfg.workload;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_PROCESS);
        Self {
            seed: cfg.seed,
            h_max: cfg.model.h_max,
            acceptance: AcceptanceModel::from_config(w),
            source: Source::Synthetic {
                rng,
                difficulty: w.initial_difficulty,
                step: w.difficulty_walk_step,
                noise_sd: w.entropy_noise_sd,
            },
            entropies: Vec::new(),
            attempts: Vec::new(),
        }
    }

    /// Replay a trace. Positions past the end wrap around.
    pub fn replay(cfg: &ExperimentConfig, trace: Trace) -> Result<Self, WorkloadError> {
        if trace.is_empty() {
            return Err(WorkloadError::Malformed {
                row: 0,
                msg: "cannot replay an empty trace".into(),
            });
        }
        Ok(Self {
            seed: cfg.seed,
            h_max: cfg.model.h_max,
            acceptance: AcceptanceModel::from_config(&cfg.workload),
            source: Source::Replay(trace),
            entropies: Vec::new(),
            attempts: Vec::new(),
        })
    }

    /// Build the workload a config asks for (trace replay when `trace_path` is set).
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, WorkloadError> {
        match &cfg.workload.trace_path {
            Some(path) => {
                let f = std::fs::File::open(path).map_err(|e| WorkloadError::Io(format!("{}: {e}", path.display())))?;
                Self::replay(cfg, ingest_trace(f)?)
            }
            None => Ok(Self::synthetic(cfg)),
        }
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    fn extend_to(&mut self, position: u64) {
        let Source::Synthetic {
            rng,
            difficulty,
            step,
            noise_sd,
        } = &mut self.source
        else {
            return;
        };
        while self.entropies.len() as u64 <= position {
            *difficulty = next_difficulty(*difficulty, *step, rng);
            let h = draft_entropy(*difficulty, self.h_max, *noise_sd, rng);
            self.entropies.push(h);
        }
    }

    pub fn entropy_at(&mut self, position: u64) -> f64 {
        match &self.source {
            Source::Replay(t) => t.records[(position % t.len() as u64) as usize].entropy,
            Source::Synthetic { .. } => {
                self.extend_to(position);
                self.entropies[position as usize]
            }
        }
    }

    /// The target model's token at `position`.
    pub fn oracle_token(&self, position: u64) -> TokenId {
        keyed_rng(self.seed, STREAM_ORACLE, position).next_u32()
    }

    /// Verification outcome of the draft token at `position`, drafted with the
    /// given look-ahead depth. Each call consumes one attempt at `position`.
    pub fn verify(&mut self, position: u64, lookahead_depth: u32) -> StepOutcome {
        let idx = position as usize;
        if self.attempts.len() <= idx {
            self.attempts.resize(idx + 1, 0);
        }
        let attempt = self.attempts[idx];
        self.attempts[idx] += 1;
        let entropy = self.entropy_at(position);
        let key = attempt_key(position, attempt);
        let accepted = match &self.source {
            Source::Synthetic { .. } => {
                let mut rng = keyed_rng(self.seed, STREAM_ACCEPT, key);
                acceptance_outcome(&self.acceptance, entropy, self.h_max, lookahead_depth, &mut rng)
            }
            Source::Replay(t) => {
                let rec = t.records[(position % t.len() as u64) as usize];
                let decay = self.acceptance.decay.powi(lookahead_depth as i32);
                let u: f64 = keyed_rng(self.seed, STREAM_DECAY, key).random();
                rec.accepted && u < decay
            }
        };
        StepOutcome {
            entropy,
            accepted,
            oracle_token: self.oracle_token(position),
        }
    }

    /// First-attempt, zero-depth outcomes for positions `0..len`, in trace form.
    pub fn export_trace(&mut self, len: u64) -> Vec<TraceRecord> {
        (0..len)
            .map(|p| {
                let entropy = self.entropy_at(p);
                let accepted = match &self.source {
                    Source::Synthetic { .. } => {
                        let mut rng = keyed_rng(self.seed, STREAM_ACCEPT, attempt_key(p, 0));
                        acceptance_outcome(&self.acceptance, entropy, self.h_max, 0, &mut rng)
                    }
                    Source::Replay(t) => t.records[(p % t.len() as u64) as usize].accepted,
                };
                TraceRecord {
                    step_index: p,
                    entropy,
                    accepted,
                }
            })
            .collect()
    }
}
