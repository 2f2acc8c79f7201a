//! Shared checks for the integration tests and the acceptance report.
#![allow(dead_code)]

pub mod edc_driver;
pub mod fuzz;
pub mod oracle;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specsim::baselines::run_operator_sync_detailed;
use specsim::config::{load_config_file, load_config_with_overrides, ExperimentConfig, Variant};
use specsim::edc::{bucketize, pht_index, EdcState};
use specsim::engine::{run, simulate, SimOptions, SimOutcome};
use specsim::metrics::{emit, Format, MetricsReport};
use specsim::queues::{DraftBatch, FeedbackRecord};
use specsim::timing::tlm_verify_cycles;
use specsim::tvc::{CycleHistoryTable, TableRole, TvcState};
use specsim::workload::Workload;

/// Outcome of one check with the numbers behind it.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn config(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_config_file(Some(&config_path(name)), &owned).expect("shipped config loads")
}

pub fn defaults(overrides: &[&str]) -> ExperimentConfig {
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_config_with_overrides("", &owned).expect("overrides are valid")
}

fn sim(cfg: &ExperimentConfig) -> SimOutcome {
    simulate(cfg, &SimOptions::default()).expect("simulation completes")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-seed mean of one report field for one variant.
pub fn seed_mean(base: &ExperimentConfig, v: Variant, field: fn(&MetricsReport) -> f64) -> f64 {
    mean((1..=5).map(|s| field(&run(&base.with_variant(v).with_seed(s)).expect("run completes"))))
}

/// A random but valid configuration for the lossless check.
pub fn random_config(rng: &mut ChaCha8Rng, variant: Variant) -> (ExperimentConfig, Vec<String>) {
    let algorithms = ["adaedl", "svip", "specdecpp", "banditspec"];
    let mut o = vec![
        format!("workload.accept_slope={}", rng.random_range(0.0..1.2)),
        format!("workload.difficulty_walk_step={}", rng.random_range(0.0..0.2)),
        format!("workload.entropy_noise_sd={}", rng.random_range(0.0..1.0)),
        format!("workload.lookahead_decay={}", rng.random_range(0.6..1.0)),
        format!("workload.max_draft_len={}", rng.random_range(1..=8)),
        format!("workload.prompt_len={}", [0, 128, 512][rng.random_range(0..3)]),
        format!("workload.algorithm=\"{}\"", algorithms[rng.random_range(0..4)]),
        format!("policy.max_batches_per_verify={}", rng.random_range(1..=4)),
        format!("policy.learn_from_purges={}", rng.random_bool(0.5)),
        format!("policy.exact_tvc={}", rng.random_bool(0.3)),
        format!("model.scale=\"{}\"", ["small", "medium"][rng.random_range(0..2)]),
    ];
    if rng.random_bool(0.3) {
        o.push(format!("policy.queue_capacity={}", rng.random_range(1..=6)));
    }
    let cfg = load_config_with_overrides("", &o)
        .expect("generated overrides are valid")
        .with_variant(variant)
        .with_seed(rng.random());
    (cfg, o)
}

/// Every variant commits exactly the oracle sequence.
pub fn lossless(pairs: usize) -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for i in 0..pairs {
        let variant = Variant::ALL[i % Variant::ALL.len()];
        let (cfg, overrides) = random_config(&mut rng, variant);
        let out = match simulate(&cfg, &SimOptions::default()) {
            Ok(o) => o,
            Err(e) => return Verdict::new(false, format!("pair {i} ({variant:?}, {overrides:?}): {e}")),
        };
        let workload = Workload::from_config(&cfg).expect("workload builds");
        let oracle: Vec<_> = (0..cfg.generation_length).map(|p| workload.oracle_token(p)).collect();
        if out.committed != oracle {
            let at = out.committed.iter().zip(&oracle).position(|(a, b)| a != b);
            return Verdict::new(
                false,
                format!(
                    "pair {i} ({variant:?}): {} tokens, first mismatch {at:?}",
                    out.committed.len()
                ),
            );
        }
    }
    let took = start.elapsed();
    Verdict::new(
        took < Duration::from_secs(120),
        format!("{pairs} pairs match the oracle prefix in {:.1}s", took.as_secs_f64()),
    )
}

/// Repeated runs of one configuration give byte-identical JSON.
pub fn determinism(trials: usize) -> Verdict {
    let mut distinct = 0;
    for v in Variant::ALL {
        let cfg = config("reference.toml", &[]).with_variant(v).with_seed(7);
        let first = emit(&[run(&cfg).expect("run completes")], Format::Json).unwrap();
        for _ in 1..trials {
            if emit(&[run(&cfg).expect("run completes")], Format::Json).unwrap() != first {
                distinct += 1;
            }
        }
    }
    Verdict::new(
        distinct == 0,
        format!("{trials} trials per variant, {distinct} differing reports"),
    )
}

pub fn edc_convergence() -> Verdict {
    let mut worst = 1.0f64;
    let mut fewest = u64::MAX;
    for (_, rule) in edc_driver::RULES {
        for seed in 1..=5 {
            let o = edc_driver::trained(rule, seed);
            worst = worst.min(o.accuracy());
            fewest = fewest.min(o.decisions);
        }
    }
    Verdict::new(
        worst > 0.9 && fewest > 500,
        format!("worst accuracy {worst:.3} over 2 rules x 5 seeds, at least {fewest} decisions each"),
    )
}

/// Hand-enumerated micro-examples of the drafting controller.
pub fn edc_semantics() -> Vec<(&'static str, bool)> {
    let batch = |avg: f64| DraftBatch::new(1, vec![0], vec![avg], 0);
    let mut checks = vec![
        ("bucket of zero entropy", bucketize(0.0, 3.2) == Ok(0)),
        ("bucket at h_max clamps", bucketize(3.2, 3.2) == Ok(7)),
        ("bucket 1.6 of 3.2", bucketize(1.6, 3.2) == Ok(4)),
        ("bucket rejects h_max 0", bucketize(1.0, 0.0).is_err()),
        ("index of empty history", pht_index(&[0; 8], 0) == 0),
        ("index layout", pht_index(&[1, 1, 1, 1, 3, 3, 3, 3], 2) == 202),
        ("truncating group mean", pht_index(&[0, 1, 2, 3, 0, 0, 0, 0], 0) == 8),
    ];

    let mut s = EdcState::new(8.0, 2).unwrap();
    s.reset_lead(1);
    let i = s.index() as usize;
    s.pht[i] = 3;
    checks.push(("counter 3 continues", s.should_continue_drafting()));
    s.pht[i] = 1;
    checks.push(("counter 1 stops ahead", !s.should_continue_drafting()));
    s.reset_lead(0);
    let i = s.index() as usize;
    s.pht[i] = 0;
    checks.push(("verified prefix always drafts", s.should_continue_drafting()));

    let mut s = EdcState::new(8.0, 2).unwrap();
    let mut b = batch(5.5);
    s.on_draft(&mut b).unwrap();
    checks.push(("draft shifts bucket in", s.leht[0] == 5 && s.llr() == 1));
    checks.push(("snapshot precedes the shift", b.pht_index_snapshot == 0));
    s.reset_lead(7);
    s.on_draft(&mut batch(0.0)).unwrap();
    checks.push(("llr saturates at 7", s.llr() == 7));

    let mut s = EdcState::new(8.0, 2).unwrap();
    let mut b = batch(1.0);
    s.on_draft(&mut b).unwrap();
    let snap = b.pht_index_snapshot as usize;
    s.on_verify(&b, &FeedbackRecord::accepted(1, 1), 0);
    checks.push(("accept increments", s.pht[snap] == 3 && s.lceht[0] == 1));
    s.on_draft(&mut b).unwrap();
    s.on_draft(&mut batch(7.0)).unwrap();
    let snap = b.pht_index_snapshot as usize;
    s.pht[snap] = 0;
    s.on_verify(&b, &FeedbackRecord::rejected(1, 0, 9), 0);
    checks.push(("reject saturates at 0", s.pht[snap] == 0));
    checks.push(("reject copies committed history", s.leht == s.lceht && s.llr() == 0));
    checks
}

/// Forced-arithmetic examples of the four cycle formulas.
pub fn tvc_examples() -> Vec<(&'static str, bool)> {
    let filled = |role, r: [f64; 4]| CycleHistoryTable::filled(role, r);
    let mut s = TvcState::new(800e6, 1e9);
    let mut checks = Vec::new();
    s.nvct = filled(TableRole::Nvct, [2.0; 4]);
    checks.push(("npu 2x500", s.predict_npu_cycles(500) == 1000));
    s.nvct = filled(TableRole::Nvct, [1.0, 2.0, 3.0, 4.0]);
    checks.push(("npu mean 2.5x10", s.predict_npu_cycles(10) == 25));
    s.pdct = filled(TableRole::Pdct, [100.0; 4]);
    s.pvct = filled(TableRole::Pvct, [120.0; 4]);
    checks.push(("draft 100x3", s.predict_pim_draft_cycles(3) == 300));
    checks.push(("preverify 120x1", s.predict_pim_verify_cycles(1) == 120));
    s.pdct = filled(TableRole::Pdct, [200.0; 4]);
    s.ncr = 300;
    checks.push(("left 1000-(300+200)", s.remaining_cycles(1000, 1) == 500));
    s.pdct = filled(TableRole::Pdct, [1.0; 4]);
    s.ncr = 700;
    checks.push(("left may go negative", s.remaining_cycles(700, 1) == -1));
    checks.push(("left of zeros", TvcState::new(800e6, 1e9).remaining_cycles(0, 1) == 0));

    let budget = |remaining: f64, ncr: u64| {
        let mut t = TvcState::new(800e6, 1e9);
        t.nvct = filled(TableRole::Nvct, [remaining; 4]);
        t.pvct = filled(TableRole::Pvct, [120.0; 4]);
        t.ncr = ncr;
        t
    };
    checks.push((
        "500 / 120 gives 4",
        budget(500.0, 0).preverify_decision(1, 1, 8) == Some(4),
    ));
    checks.push((
        "capped by the batch",
        budget(500.0, 0).preverify_decision(1, 1, 3) == Some(3),
    ));
    checks.push((
        "100 / 120 gives none",
        budget(100.0, 0).preverify_decision(1, 1, 8).is_none(),
    ));
    checks.push((
        "negative gives none",
        budget(100.0, 200).preverify_decision(1, 1, 8).is_none(),
    ));

    let mut t = TvcState::new(800e6, 1e9);
    t.record_npu(1000, 100).unwrap();
    checks.push((
        "npu ratio rescaled to 8",
        t.nvct.entries[0] == CycleHistoryTable::filled(TableRole::Nvct, [8.0; 4]).entries[0],
    ));
    checks
}

/// Largest relative error of every table after four observations of a
/// strictly linear cost.
pub fn tvc_linear_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        // Multiples of 5 keep the 0.8 clock ratio exact in fixed point.
        let r = 5 * rng.random_range(1..=4000u64);
        let mut t = TvcState::new(800e6, 1e9);
        for _ in 0..4 {
            let len = rng.random_range(1..=4096u64);
            t.record_npu(r * len, len).unwrap();
            t.record_draft(r * len, len).unwrap();
            t.record_preverify(r * len, len).unwrap();
        }
        for _ in 0..20 {
            let len = rng.random_range(1..=4096u64);
            let rel = |pred: u64, actual: u64| (pred as f64 - actual as f64).abs() / actual as f64;
            worst = worst
                .max(rel(t.predict_npu_cycles(len), r * len * 4 / 5))
                .max(rel(t.predict_pim_draft_cycles(len), r * len))
                .max(rel(t.predict_pim_verify_cycles(len), r * len));
        }
    }
    worst
}

/// Worst relative error of the verification-cost table on the full timing
/// model: a table profiled around `kv0` predicting every context length from
/// 75% to 125% of the profiled ones.
pub fn tvc_profile_error(cfg: &ExperimentConfig, kv0: u64) -> f64 {
    let (hw, model) = (&cfg.hardware, &cfg.model);
    let batch = 4;
    let mut t = TvcState::new(hw.pim_freq_hz, hw.npu_freq_hz);
    for j in 0..4 {
        let kv = kv0 + j * batch;
        t.record_npu(tlm_verify_cycles(hw, model, batch, kv).unwrap().cycles, kv)
            .unwrap();
    }
    let lo = kv0 * 3 / 4;
    let hi = (kv0 + 3 * batch) * 5 / 4;
    (lo.max(1)..=hi)
        .map(|kv| {
            let actual = t.npu_to_pim_cycles(tlm_verify_cycles(hw, model, batch, kv).unwrap().cycles);
            (t.predict_npu_cycles(kv) as f64 - actual as f64).abs() / actual as f64
        })
        .fold(0.0, f64::max)
}

/// Worst and mean relative error of verification-cost predictions made
/// during runs, restricted to context lengths within 25% of the table's.
pub fn tvc_runtime_error(base: &ExperimentConfig) -> (f64, f64, usize) {
    let mut errs = Vec::new();
    for seed in 1..=5 {
        let out = sim(&base.with_variant(Variant::Full).with_seed(seed));
        for p in out.npu_predictions {
            let lo = p.table_kv_min as f64 * 0.75;
            let hi = p.table_kv_max as f64 * 1.25;
            if (lo..=hi).contains(&(p.kv_len as f64)) {
                errs.push((p.predicted as f64 - p.actual as f64).abs() / p.actual as f64);
            }
        }
    }
    let worst = errs.iter().copied().fold(0.0, f64::max);
    (worst, mean(errs.iter().copied()), errs.len())
}

pub fn tvc_equations() -> Verdict {
    let examples = tvc_examples();
    let failed: Vec<_> = examples.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let linear = tvc_linear_error();
    let cfg = ExperimentConfig::default();
    let profiled = [128, 512, 1024]
        .map(|kv0| tvc_profile_error(&cfg, kv0))
        .into_iter()
        .fold(0.0, f64::max);
    let (runtime_worst, runtime_mean, n) = tvc_runtime_error(&config("reference.toml", &[]));
    Verdict::new(
        failed.is_empty() && linear == 0.0 && profiled < 0.1 && runtime_worst < 0.1,
        format!(
            "{} examples ({} failing {failed:?}); linear error {linear}; full model: profiled sweep worst {:.1}%, \
             in-run worst {:.1}% mean {:.2}% over {n} predictions",
            examples.len(),
            failed.len(),
            profiled * 100.0,
            runtime_worst * 100.0,
            runtime_mean * 100.0
        ),
    )
}

/// Draft-starvation time with and without pre-verification under exact cost
/// predictions, plus the insertion budget of every pre-verification.
pub struct Starvation {
    pub with_tvc_sec: Vec<f64>,
    pub without_tvc_sec: Vec<f64>,
    pub insertions: usize,
    pub over_budget: usize,
    pub late: usize,
}

pub fn starvation() -> Starvation {
    let base = defaults(&["policy.exact_tvc=true", "workload.difficulty_walk_step=0.0"]);
    let starved = |o: &SimOutcome| o.report.npu_starved_frac * o.report.wall_time_sec;
    let mut s = Starvation {
        with_tvc_sec: vec![],
        without_tvc_sec: vec![],
        insertions: 0,
        over_budget: 0,
        late: 0,
    };
    for seed in 1..=5 {
        let full = sim(&base.with_variant(Variant::Full).with_seed(seed));
        let edc = sim(&base.with_variant(Variant::AsyncAauEdc).with_seed(seed));
        s.with_tvc_sec.push(starved(&full));
        s.without_tvc_sec.push(starved(&edc));
        for b in &full.budget_log {
            s.insertions += 1;
            s.over_budget += usize::from(b.predicted_cycles as i64 > b.remaining_cycles);
            s.late += usize::from(b.actual_end_ps > b.npu_end_ps);
        }
    }
    s
}

pub fn starvation_verdict() -> Verdict {
    let s = starvation();
    let never_worse = s.with_tvc_sec.iter().zip(&s.without_tvc_sec).all(|(a, b)| a <= b);
    Verdict::new(
        never_worse && s.over_budget == 0 && s.late == 0 && s.insertions > 0,
        format!(
            "starved s with/without: {:?} / {:?}; {} insertions, {} over budget, {} late",
            s.with_tvc_sec.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>(),
            s.without_tvc_sec.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>(),
            s.insertions,
            s.over_budget,
            s.late
        ),
    )
}

pub const LADDER: [Variant; 5] = [
    Variant::OpSync,
    Variant::Async,
    Variant::AsyncAau,
    Variant::AsyncAauEdc,
    Variant::Full,
];

/// Five-seed mean throughput of every rung on the reference config.
pub fn ablation_means() -> Vec<(Variant, f64)> {
    let base = config("reference.toml", &[]);
    LADDER
        .iter()
        .map(|&v| (v, seed_mean(&base, v, |r| r.throughput_tokens_per_sec)))
        .collect()
}

/// Adjacent rungs must not fall more than 2% below the previous one.
pub fn ablation_verdict() -> Verdict {
    let start = Instant::now();
    let means = ablation_means();
    let op_sync = means[0].1;
    let mut broken = Vec::new();
    for w in means.windows(2) {
        if w[1].1 < w[0].1 * 0.98 {
            broken.push(format!("{:?} < {:?}", w[1].0, w[0].0));
        }
    }
    let full = means[4].1 / op_sync;
    let ratios: Vec<String> = means
        .iter()
        .map(|(v, m)| format!("{}={:.3}", v.label(), m / op_sync))
        .collect();
    Verdict::new(
        broken.is_empty() && full >= 1.5 && start.elapsed() < Duration::from_secs(300),
        format!("throughput vs op_sync: {}; broken steps {broken:?}", ratios.join(" ")),
    )
}

pub fn acceptance_gap() -> (f64, f64) {
    let base = config("reference.toml", &[]);
    (
        seed_mean(&base, Variant::Async, |r| r.acceptance_rate),
        seed_mean(&base, Variant::AsyncAauEdc, |r| r.acceptance_rate),
    )
}

pub fn acceptance_gap_verdict() -> Verdict {
    let (asy, edc) = acceptance_gap();
    Verdict::new(
        edc - asy >= 0.10,
        format!(
            "acceptance async {asy:.3}, async_aau_edc {edc:.3}, gap {:.1} points",
            (edc - asy) * 100.0
        ),
    )
}

/// Coefficient of variation of the operator-sync PIM share, per seed.
pub fn fluctuation() -> Vec<(f64, f64, f64)> {
    let base = config("volatile.toml", &[]).with_variant(Variant::OpSync);
    (1..=5)
        .map(|seed| {
            let it = run_operator_sync_detailed(&base.with_seed(seed))
                .expect("baseline runs")
                .iterations;
            let share: Vec<f64> = it.iter().map(|i| i.pim_share).collect();
            let m = mean(share.iter().copied());
            let sd = mean(share.iter().map(|x| (x - m) * (x - m))).sqrt();
            let lo = share.iter().copied().fold(f64::MAX, f64::min);
            let hi = share.iter().copied().fold(0.0, f64::max);
            (sd / m, lo, hi)
        })
        .collect()
}

pub fn fluctuation_verdict() -> Verdict {
    let f = fluctuation();
    let cv = mean(f.iter().map(|x| x.0));
    let lo = f.iter().map(|x| x.1).fold(f64::MAX, f64::min);
    let hi = f.iter().map(|x| x.2).fold(0.0, f64::max);
    Verdict::new(
        cv > 0.3,
        format!(
            "PIM share CV {cv:.3} (5-seed mean), share range {:.1}%..{:.1}%",
            lo * 100.0,
            hi * 100.0
        ),
    )
}

pub fn timing_oracle_verdict() -> Verdict {
    let runs = [
        (&[][..], 11),
        (
            &[
                "hardware.pim_units=4",
                "hardware.npu_matrix_ops_per_cycle=1536.5",
                "model.scale=\"small\"",
            ][..],
            29,
        ),
    ];
    for (overrides, seed) in runs {
        if let Err(e) = oracle::check(overrides, seed) {
            return Verdict::new(false, e);
        }
    }
    Verdict::new(true, "2 x 50 points match to the cycle")
}

pub fn queue_verdict(cases: u32) -> Verdict {
    match fuzz::fuzz(cases) {
        Ok(()) => Verdict::new(
            true,
            format!("{cases} sequences conserve tokens, chains and look-ahead count"),
        ),
        Err(e) => Verdict::new(false, e),
    }
}
