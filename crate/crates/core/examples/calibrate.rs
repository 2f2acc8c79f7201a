//! Find the stop threshold of each drafting algorithm that gives a mean draft
//! length of 4 under operator-synchronous execution (no look-ahead), averaged
//! over seeds 1..=5.
//!
//! Usage: `cargo run --release --example calibrate -- [key=value ...]`

use specsim::config::{load_config_with_overrides, ExperimentConfig, Variant};
use specsim::engine::{simulate, SimOptions};
use specsim::workload::DraftAlgorithm;

const TARGET: f64 = 4.0;

fn mean_draft_len(base: &ExperimentConfig, algorithm: DraftAlgorithm, theta: f64) -> f64 {
    let mut cfg = base.with_variant(Variant::OpSync);
    cfg.workload.algorithm = algorithm;
    cfg.workload.algorithm_threshold = Some(theta);
    let runs: Vec<f64> = (1..=5)
        .map(|s| {
            simulate(&cfg.with_seed(s), &SimOptions::default())
                .expect("calibration run")
                .report
                .mean_draft_len
        })
        .collect();
    runs.iter().sum::<f64>() / runs.len() as f64
}

fn main() {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let base = load_config_with_overrides("", &overrides).expect("valid overrides");
    println!("algorithm,threshold,mean_draft_len");
    for algorithm in DraftAlgorithm::ALL {
        if algorithm == DraftAlgorithm::BanditSpec {
            continue;
        }
        // Draft length is monotone in the threshold; AdaEDL stops earlier as
        // it grows, the others later.
        let rising = algorithm != DraftAlgorithm::AdaEdl;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            let too_long = mean_draft_len(&base, algorithm, mid) > TARGET;
            if too_long == rising {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let theta = (0.5 * (lo + hi) * 1000.0).round() / 1000.0;
        println!(
            "{},{theta},{:.3}",
            algorithm.tag(),
            mean_draft_len(&base, algorithm, theta)
        );
    }
}
