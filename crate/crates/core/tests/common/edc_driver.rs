//! Drives the pattern table on a workload whose verification outcome is a
//! fixed function of (old-group mean, recent-group mean, look-ahead depth).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specsim::edc::{EdcState, PHT_SIZE};
use specsim::queues::{DraftBatch, FeedbackRecord};

const H_MAX: f64 = 8.0;

/// Expected outcome for every table index, by decoding all 512 of them.
pub fn ground_truth(rule: fn(u16, u16, u16) -> bool) -> Vec<bool> {
    (0..PHT_SIZE as u16)
        .map(|i| rule(i >> 6, (i >> 3) & 7, i & 7))
        .collect()
}

pub fn modular(old: u16, recent: u16, llr: u16) -> bool {
    !(old + 2 * recent + llr).is_multiple_of(3)
}

/// Calm history and shallow look-ahead verify cleanly.
pub fn monotone(old: u16, recent: u16, llr: u16) -> bool {
    old + 2 * recent + 2 * llr < 12
}

#[derive(Clone, Copy)]
pub enum Rollback {
    /// Every batch receives its own verification result.
    None,
    /// A rejection discards every younger batch unverified.
    Purge,
    /// As `Purge`, and discarded batches count against their own pattern.
    PurgeAndLearn,
}

pub struct Outcome {
    pub decisions: u64,
    pub agree: u64,
}

impl Outcome {
    pub fn accuracy(&self) -> f64 {
        self.agree as f64 / self.decisions as f64
    }
}

pub fn drive(truth: &[bool], rollback: Rollback, seed: u64, warmup: u64, measured: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edc = EdcState::new(H_MAX, 2).unwrap();
    let mut pending: Vec<DraftBatch> = Vec::new();
    let mut drafts = 0u64;
    let mut next_id = 1u64;
    let mut out = Outcome { decisions: 0, agree: 0 };
    // Look-ahead room the verifier leaves before it takes the next batch.
    let mut room = 1usize;

    while drafts < warmup + measured {
        let predicted = edc.should_continue_drafting();
        let free = pending.len() < room;
        if free && edc.llr() > 0 && drafts >= warmup {
            out.decisions += 1;
            out.agree += u64::from(predicted == truth[edc.index() as usize]);
        }
        if free && predicted {
            let entropy = rng.random_range(0.0..H_MAX);
            let mut b = DraftBatch::new(next_id, vec![0; 4], vec![entropy; 4], 0);
            next_id += 1;
            edc.on_draft(&mut b).unwrap();
            pending.push(b);
            drafts += 1;
            continue;
        }
        let b = pending.remove(0);
        let rec = if truth[b.pht_index_snapshot as usize] {
            FeedbackRecord::accepted(b.batch_id, 4)
        } else {
            match rollback {
                Rollback::None => {}
                Rollback::Purge => pending.clear(),
                Rollback::PurgeAndLearn => pending.drain(..).for_each(|p| edc.on_purge(&p)),
            }
            FeedbackRecord::rejected(b.batch_id, 0, 0)
        };
        edc.on_verify(&b, &rec, pending.len());
        room = rng.random_range(1..=7);
    }
    out
}

pub type Rule = fn(u16, u16, u16) -> bool;

pub const RULES: [(&str, Rule); 2] = [("modular", modular), ("monotone", monotone)];

/// Accuracy over 2000 drafts after a 500-draft warmup, every batch verified.
pub fn trained(rule: Rule, seed: u64) -> Outcome {
    drive(&ground_truth(rule), Rollback::None, seed, 500, 2000)
}

/// Five-seed mean accuracy on the monotone rule under a rollback policy.
pub fn mean_accuracy(rollback: Rollback) -> f64 {
    let truth = ground_truth(monotone);
    (1..=5)
        .map(|s| drive(&truth, rollback, s, 500, 2000).accuracy())
        .sum::<f64>()
        / 5.0
}
