mod common;

use common::memory::{op, run};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_sequences_keep_invariants(ops in proptest::collection::vec(op(), 1..200)) {
        run(&ops)?;
    }
}

#[test]
fn thousand_step_sequence() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::deterministic();
    for _ in 0..4 {
        let ops = proptest::collection::vec(op(), 1000).new_tree(&mut runner).unwrap().current();
        run(&ops).unwrap();
    }
}
