//! Random operation sequences against the queues and the look-ahead register,
//! driven the way the scheduler drives them.

use std::collections::HashSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use specsim::edc::EdcState;
use specsim::queues::{DraftBatch, FeedbackRecord, QueueSet};
use specsim::workload::TokenId;

/// Corrections and bonus tokens come from a range drafts never use.
const EXTERNAL: TokenId = 1 << 31;

#[derive(Debug, Clone)]
pub enum Op {
    Draft { len: usize, entropy: f64 },
    Pop { max: usize },
    Feedback { prefix: usize },
    Preverify { checked: usize, accepted: usize },
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (1usize..=8, 0.0f64..10.0).prop_map(|(len, entropy)| Op::Draft { len, entropy }),
        2 => (1usize..=3).prop_map(|max| Op::Pop { max }),
        3 => (0usize..=9).prop_map(|prefix| Op::Feedback { prefix }),
        2 => (1usize..=8, 0usize..=8).prop_map(|(checked, accepted)| Op::Preverify { checked, accepted }),
    ]
}

#[derive(Default)]
struct Ledger {
    drafted: HashSet<TokenId>,
    rejected: HashSet<TokenId>,
    purged: HashSet<TokenId>,
    next_token: TokenId,
    next_external: TokenId,
}

impl Ledger {
    fn external(&mut self) -> TokenId {
        self.next_external += 1;
        EXTERNAL + self.next_external
    }

    fn purge(&mut self, batches: &[DraftBatch]) {
        for b in batches {
            self.purged.extend(b.confirmed.iter().chain(b.tokens.iter()));
        }
    }
}

fn live_batches(q: &QueueSet) -> Vec<DraftBatch> {
    q.in_flight().chain(q.unverified()).cloned().collect()
}

/// Live batches must form one contiguous speculative chain starting at the
/// committed sequence: nothing still builds on a discarded prefix.
fn assert_chain(q: &QueueSet) {
    let mut expected = q.committed_len();
    for b in live_batches(q) {
        assert_eq!(
            b.base_kv_len - b.confirmed.len() as u64,
            expected,
            "batch {} is detached",
            b.batch_id
        );
        expected = b.projected_end();
    }
}

fn assert_conservation(q: &QueueSet) {
    let c = q.counters();
    assert_eq!(c.drafted, c.accepted + c.rejected + c.purged + q.live_draft_tokens());
}

pub fn run(ops: &[Op]) {
    let mut q = QueueSet::with_prompt(vec![EXTERNAL; 4]);
    let mut edc = EdcState::new(10.0, 2).unwrap();
    let mut ledger = Ledger::default();

    for op in ops {
        let mut rejection = false;
        match *op {
            Op::Draft { len, entropy } => {
                let tokens: Vec<TokenId> = (0..len as TokenId).map(|i| ledger.next_token + i).collect();
                ledger.next_token += len as TokenId;
                ledger.drafted.extend(&tokens);
                let mut b = DraftBatch::new(q.next_batch_id(), tokens, vec![entropy; len], q.tip());
                b.lookahead_depth = q.outstanding();
                edc.on_draft(&mut b).unwrap();
                q.push_draft(b).unwrap();
            }
            Op::Pop { max } => {
                q.pop_for_verify(max).unwrap();
            }
            Op::Feedback { prefix } => {
                let Some(b) = q.in_flight().next().cloned() else {
                    continue;
                };
                let rec = if prefix >= b.len() {
                    FeedbackRecord::accepted(b.batch_id, b.len())
                } else {
                    ledger.rejected.extend(&b.tokens[prefix..]);
                    FeedbackRecord::rejected(b.batch_id, prefix, ledger.external())
                };
                let info = q.apply_feedback(&rec).unwrap();
                ledger.purge(&info.purged);
                edc.on_verify(&b, &rec, q.outstanding());
                if rec.fully_accepted && q.unverified_len() == 0 && q.in_flight().next().is_none() {
                    q.commit_bonus(ledger.external()).unwrap();
                }
                rejection = !rec.fully_accepted;
            }
            Op::Preverify { checked, accepted } => {
                let Some(b) = q.preverify_target().cloned() else {
                    continue;
                };
                q.mark_preverify(b.batch_id).unwrap();
                let checked = checked.min(b.len());
                let accepted = accepted.min(checked);
                let correction = (accepted < checked).then(|| ledger.external());
                if accepted < checked {
                    ledger.rejected.extend(&b.tokens[accepted..]);
                }
                let info = q
                    .apply_preverify(b.batch_id, checked, accepted, correction)
                    .unwrap()
                    .expect("batch was marked");
                ledger.purge(&info.purged);
                if accepted < checked {
                    let rec = FeedbackRecord::rejected(b.batch_id, accepted, correction.unwrap());
                    edc.on_verify(&b, &rec, q.outstanding());
                    rejection = true;
                } else if checked == b.len() {
                    edc.on_verify(&b, &FeedbackRecord::accepted(b.batch_id, b.len()), q.outstanding());
                }
            }
        }
        assert_conservation(&q);
        assert_eq!(
            edc.lead() as usize,
            q.outstanding(),
            "look-ahead register drifted after {op:?}"
        );
        assert!(edc.pht.iter().all(|&c| c <= 3));
        if rejection {
            assert_chain(&q);
        }
    }

    // Every drafted token is in exactly one terminal or live state.
    let committed: HashSet<TokenId> = q.committed().iter().copied().filter(|&t| t < EXTERNAL).collect();
    let drafted_committed = q.committed().iter().filter(|&&t| t < EXTERNAL).count();
    assert_eq!(committed.len(), drafted_committed, "a token was committed twice");
    let live: HashSet<TokenId> = live_batches(&q)
        .iter()
        .flat_map(|b| b.confirmed.iter().chain(b.tokens.iter()).copied())
        .collect();
    let sets = [&committed, &ledger.rejected, &ledger.purged, &live];
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let union: HashSet<TokenId> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    assert_eq!(total, union.len(), "a token reached two states");
    assert_eq!(union, ledger.drafted);
}

/// Check `cases` random sequences of up to 80 operations.
pub fn fuzz(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&prop::collection::vec(op(), 1..80), |ops| {
            std::panic::catch_unwind(|| run(&ops)).map_err(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                TestCaseError::fail(msg)
            })
        })
        .map_err(|e| e.to_string())
}
