mod common;

use std::collections::BTreeSet;

use common::{random_turn_tree, rng, tree, FIG1_E2E, FIG1_GOLD, FIG1_PIPELINE};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use turnparse::eval::{
    boundaries_from_tree, bootstrap_significance, conditioned_precision, evaluate, evaluate_turn, exact_bootstrap_p,
    parse_f1, seg_f1, Counts, EvalReport, Metric, TurnEval,
};
use turnparse::treebank::{wrap_turn, Tree};
use turnparse::Error;

fn set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

fn record(id: &str, parse: (usize, usize, usize), seg: (usize, usize, usize), seg_correct: bool) -> TurnEval {
    TurnEval {
        id: id.into(),
        parse: Counts::new(parse.0, parse.1, parse.2),
        seg: Counts::new(seg.0, seg.1, seg.2),
        seg_correct,
    }
}

#[test]
fn figure_boundaries() {
    assert_eq!(boundaries_from_tree(&tree(FIG1_GOLD)).unwrap(), set(&[1, 11]));
    assert_eq!(boundaries_from_tree(&tree(FIG1_E2E)).unwrap(), set(&[1, 2, 11, 12, 13]));
    assert_eq!(boundaries_from_tree(&tree(FIG1_PIPELINE)).unwrap(), set(&[1]));
    assert_eq!(boundaries_from_tree(&tree("(TURN (S (NP a) (VP b)))")).unwrap(), set(&[]));
    assert!(boundaries_from_tree(&tree("(S (NP a) (VP b))")).is_err());
}

#[test]
fn figure_segmentation_scores() {
    let pipe = seg_f1(&set(&[1]), &set(&[1, 11]), 14).unwrap();
    assert_eq!((pipe.precision(), pipe.recall()), (100.0, 50.0));
    assert!((pipe.f1() - 66.7).abs() < 0.05);
    let e2e = seg_f1(&set(&[1, 2, 11, 12, 13]), &set(&[1, 11]), 14).unwrap();
    assert_eq!((e2e.precision(), e2e.recall()), (40.0, 100.0));
    assert!((e2e.f1() - 57.1).abs() < 0.05);
}

#[test]
fn seg_f1_rejects_edge_boundaries() {
    assert!(matches!(seg_f1(&set(&[0]), &set(&[]), 5), Err(Error::Mismatch(_))));
    assert!(matches!(seg_f1(&set(&[]), &set(&[5]), 5), Err(Error::Mismatch(_))));
    let empty = seg_f1(&set(&[]), &set(&[]), 5).unwrap();
    assert_eq!(empty, Counts::default());
    assert_eq!(empty.f1(), 0.0);
}

#[test]
fn e2e_figure_tree_loses_exactly_three_brackets() {
    let c = parse_f1(&tree(FIG1_E2E), &tree(FIG1_GOLD)).unwrap();
    assert_eq!(c.gold - c.matched, 3);
    assert_eq!(c.precision(), 100.0);
    assert_eq!(c.matched, c.predicted);
}

#[test]
fn parse_f1_of_a_tree_with_itself_is_100() {
    let t = tree(FIG1_GOLD);
    assert_eq!(parse_f1(&t, &t).unwrap().f1(), 100.0);
}

#[test]
fn parse_f1_rejects_token_mismatch() {
    let err = parse_f1(&tree("(TURN (NP a b))"), &tree("(TURN (NP a))")).unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)));
}

#[test]
fn disjoint_bracketings_score_zero() {
    let a = tree("(TURN (NP (X a) (X b)) (VP (X c) (X d)))");
    let b = tree("(TURN (S (X a) (ADVP (X b) (X c)) (X d)))");
    let c = parse_f1(&a, &b).unwrap();
    assert_eq!(c.matched, 0);
    assert_eq!(c.f1(), 0.0);
}

#[test]
fn wrap_turn_boundaries_are_internal_su_edges() {
    let sus: Vec<Tree> = vec![tree("(INTJ a)"), tree("(NP b c)").shifted(1), tree("(VP d)").shifted(3)];
    assert_eq!(boundaries_from_tree(&wrap_turn(sus).unwrap()).unwrap(), set(&[1, 3]));
}

/// Per-turn records whose parse precision is `overall` on all turns and
/// `incorrect` on the mis-segmented ones; 100 turns of 100 brackets each.
fn fixture(overall_matched: usize, incorrect_matched: usize) -> Vec<TurnEval> {
    let correct_matched = overall_matched - incorrect_matched;
    let mut out = Vec::new();
    for (k, (total, ok)) in [(incorrect_matched, false), (correct_matched, true)].into_iter().enumerate() {
        let (base, extra) = (total / 100, total % 100);
        for i in 0..100 {
            let m = base + usize::from(i < extra);
            out.push(record(&format!("{k}-{i}"), (m, 100, 100), (0, 0, 0), ok));
        }
    }
    out
}

#[test]
fn conditioned_precision_reproduces_reported_declines() {
    // Pipeline: 85.72 over all turns, 80.50 on mis-segmented ones.
    let pipe = conditioned_precision(&fixture(17144, 8050));
    assert!((pipe.overall - 85.72).abs() < 1e-9);
    assert!((pipe.seg_incorrect.unwrap() - 80.50).abs() < 1e-9);
    assert!((pipe.delta.unwrap() - 5.22).abs() < 0.01);
    // End to end: 86.20 against 82.24.
    let e2e = conditioned_precision(&fixture(17240, 8224));
    assert!((e2e.delta.unwrap() - 3.96).abs() < 0.01);
}

#[test]
fn conditioned_precision_marks_an_empty_subset() {
    let all_ok = vec![record("a", (3, 4, 5), (1, 1, 1), true)];
    let c = conditioned_precision(&all_ok);
    assert_eq!(c.overall, 75.0);
    assert_eq!(c.seg_incorrect, None);
    assert_eq!(c.delta, None);
    assert!(c.to_string().contains("undefined"));
}

#[test]
fn evaluate_turn_flags_segmentation_correctness() {
    let gold = tree(FIG1_GOLD);
    assert!(evaluate_turn("x", &gold, &gold).unwrap().seg_correct);
    assert!(!evaluate_turn("x", &tree(FIG1_PIPELINE), &gold).unwrap().seg_correct);
}

#[test]
fn report_lists_keys_and_table() {
    let gold = vec![tree(FIG1_GOLD)];
    let r = evaluate(&["t".into()], &[tree(FIG1_E2E)], &gold).unwrap();
    let kv = r.to_kv();
    assert!(kv.contains("parse_precision=100.00"));
    assert!(kv.contains("seg_f1=57.14"));
    assert!(r.to_string().contains("segmentation"));
    assert!(evaluate(&["t".into()], &[], &gold).is_err());
}

#[test]
fn bootstrap_self_comparison_is_null() {
    let turns: Vec<TurnEval> = (0..40).map(|i| record(&i.to_string(), (i % 7, 8, 9), (i % 2, 1, 1), true)).collect();
    let s = bootstrap_significance(&turns, &turns, Metric::ParseF1, 2000, 1).unwrap();
    assert_eq!(s.delta, 0.0);
    assert!(s.p_value >= 0.5);
}

#[test]
fn bootstrap_dominance_gives_small_p() {
    let a: Vec<TurnEval> = (0..30).map(|i| record(&i.to_string(), (9, 10, 10), (0, 0, 0), true)).collect();
    let b: Vec<TurnEval> = (0..30).map(|i| record(&i.to_string(), (5, 10, 10), (0, 0, 0), true)).collect();
    let s = bootstrap_significance(&a, &b, Metric::ParseF1, 5000, 2).unwrap();
    assert!(s.delta > 0.0);
    assert_eq!(s.p_value, 0.0);
}

#[test]
fn bootstrap_rejects_unpaired_inputs() {
    let a = vec![record("a", (1, 1, 1), (0, 0, 0), true)];
    let b = vec![record("b", (1, 1, 1), (0, 0, 0), true)];
    assert!(bootstrap_significance(&a, &b, Metric::SegF1, 10, 0).is_err());
    assert!(bootstrap_significance(&a, &a[..0], Metric::SegF1, 10, 0).is_err());
}

/// Three turns on which neither system dominates.
fn three_turns() -> (Vec<TurnEval>, Vec<TurnEval>) {
    let a = vec![
        record("t1", (8, 10, 10), (0, 0, 0), true),
        record("t2", (3, 10, 10), (0, 0, 0), true),
        record("t3", (6, 10, 10), (0, 0, 0), true),
    ];
    let b = vec![
        record("t1", (5, 10, 10), (0, 0, 0), true),
        record("t2", (5, 10, 10), (0, 0, 0), true),
        record("t3", (5, 10, 10), (0, 0, 0), true),
    ];
    (a, b)
}

#[test]
fn exhaustive_bootstrap_matches_hand_enumeration() {
    let (a, b) = three_turns();
    let f1 = |ts: &[TurnEval], idx: &[usize]| idx.iter().map(|&i| ts[i].parse).sum::<Counts>().f1();
    let observed = f1(&a, &[0, 1, 2]) - f1(&b, &[0, 1, 2]);
    assert!(observed > 0.0);
    let mut hits = 0;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                if f1(&a, &[i, j, k]) - f1(&b, &[i, j, k]) <= 1e-9 {
                    hits += 1;
                }
            }
        }
    }
    let expected = hits as f64 / 27.0;
    assert_eq!(exact_bootstrap_p(&a, &b, Metric::ParseF1).unwrap(), expected);
    let sampled = bootstrap_significance(&a, &b, Metric::ParseF1, 20_000, 3).unwrap();
    assert!((sampled.p_value - expected).abs() < 0.02, "{} vs {expected}", sampled.p_value);
}

#[test]
fn bootstrap_is_reproducible_given_seed() {
    let (a, b) = three_turns();
    let x = bootstrap_significance(&a, &b, Metric::ParseF1, 3000, 11).unwrap();
    let y = bootstrap_significance(&a, &b, Metric::ParseF1, 3000, 11).unwrap();
    assert_eq!(x, y);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn swapping_pred_and_gold_swaps_precision_and_recall(seed in any::<u64>(), n in 2usize..12) {
        let mut r = rng(seed);
        let a = random_turn_tree(&mut r, n);
        let b = random_turn_tree(&mut r, n).with_words(&a.words().iter().map(|w| w.to_string()).collect::<Vec<_>>());
        let ab = parse_f1(&a, &b).unwrap();
        let ba = parse_f1(&b, &a).unwrap();
        prop_assert_eq!(ab.precision(), ba.recall());
        prop_assert_eq!(ab.recall(), ba.precision());
        let (sa, sb) = (boundaries_from_tree(&a).unwrap(), boundaries_from_tree(&b).unwrap());
        let s1 = seg_f1(&sa, &sb, n).unwrap();
        let s2 = seg_f1(&sb, &sa, n).unwrap();
        prop_assert_eq!(s1.precision(), s2.recall());
    }

    #[test]
    fn micro_scores_ignore_turn_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut turns: Vec<TurnEval> = (0..20)
            .map(|i| record(&i.to_string(), (i % 5, 5 + i % 3, 6), (i % 2, 1, 1 + i % 2), i % 3 == 0))
            .collect();
        let before = EvalReport::from_turns(turns.clone());
        turns.shuffle(&mut r);
        let after = EvalReport::from_turns(turns);
        prop_assert_eq!(before.parse, after.parse);
        prop_assert_eq!(before.seg, after.seg);
    }
}
