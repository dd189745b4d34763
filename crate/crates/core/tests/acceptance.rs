//! One line per acceptance criterion, printed straight to stdout so it shows
//! without `--nocapture`, followed by the assertion.

mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use common::{
    brute_force_best, random_chart, random_gold, random_tree, random_turn_tree, rng, tiny_corpus, tree, turns_of_len,
    FIG1_E2E, FIG1_GOLD,
};
use turnparse::corpus::{generate_synthetic, Corpus, SynthConfig, Turn};
use turnparse::eval::{
    bootstrap_significance, conditioned_precision, exact_bootstrap_p, parse_f1, seg_f1, Counts, Metric, TurnEval,
};
use turnparse::model::chart::spans_score;
use turnparse::model::{
    cky_decode, count_dummy, hinge, loss_augmented_decode, tree_spans, LabelSet, ModelConfig, Parser, Vocab, NO_LABEL,
};
use turnparse::numerics::{grad_check, Graph, NodeId, NumericsError, ParamId, ParamStore};
use turnparse::pipeline::{
    evaluate_parser, summarize, train_e2e, train_pipeline_parser, train_segmenter, SeedSummary, TrainConfig,
};
use turnparse::treebank::{binarize, debinarize, parse_ptb, render_ptb};

fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!("criterion {criterion} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_1_cky_matches_exhaustive_search() {
    let start = Instant::now();
    let mut r = rng(101);
    let mut failures = 0;
    for k in 0..200 {
        let n = 2 + k % 7;
        let chart = random_chart(&mut r, n, 4);
        let d = cky_decode(&chart);
        let best = brute_force_best(n, &|i, j, l| chart.score(i, j, l), 4, n <= 4);
        if d.score != best || spans_score(&d.spans, &chart).unwrap() != best {
            failures += 1;
        }
    }
    for k in 0..200 {
        let n = 2 + k % 4;
        let chart = random_chart(&mut r, n, 4);
        let gold = random_gold(&mut r, n, 4);
        let p = [0.0, 0.5, 1.0][k % 3];
        let aug = |i, j, l| {
            let miss = if gold.contains(&(i, j, l)) { 0.0 } else { 1.0 };
            chart.score(i, j, l) + miss - if l == NO_LABEL { p } else { 0.0 }
        };
        if loss_augmented_decode(&chart, &gold, p).unwrap().score != brute_force_best(n, &aug, 4, n <= 4) {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        failures == 0 && secs < 60.0,
        &format!("{failures} mismatches over 200 CKY and 200 loss-augmented charts in {secs:.1}s"),
    );
}

const STEP: f64 = 1e-5;

fn central_difference(
    params: &mut ParamStore,
    id: ParamId,
    flat: usize,
    step: f64,
    build: &impl Fn(&mut Graph) -> Result<NodeId, NumericsError>,
) -> f64 {
    let orig = params.value(id).as_slice().unwrap()[flat];
    let mut at = |x: f64| {
        params.value_mut(id).as_slice_mut().unwrap()[flat] = x;
        let mut g = Graph::new(params);
        let loss = build(&mut g).unwrap();
        g.scalar(loss)
    };
    let slope = (at(orig + step) - at(orig - step)) / (2.0 * step);
    at(orig);
    slope
}

#[test]
fn criterion_2_full_model_gradient_checks() {
    let start = Instant::now();
    let corpus = tiny_corpus(120, 21);
    let vocab = Vocab::build(corpus.turns.iter().flat_map(|t| t.words.iter().map(String::as_str)));
    let labels = LabelSet::from_trees(corpus.turns.iter().map(|t| t.gold.as_ref().unwrap()));
    let turns = turns_of_len(&corpus, 5);
    assert!(!turns.is_empty());
    let mut worst: f64 = 0.0;
    let (mut draws, mut at_ties) = (0, 0);
    for seed in 0..100u64 {
        if draws == 20 {
            break;
        }
        let prosody = seed % 4 != 0;
        let mut parser = Parser::new(&ModelConfig::tiny(prosody), vocab.clone(), labels.clone(), 1000 + seed).unwrap();
        let turn: &Turn = turns[seed as usize % turns.len()];
        let gold = tree_spans(turn.gold.as_ref().unwrap(), &parser.net.labels).unwrap();
        let net = parser.net.clone();
        // The hinge is only differentiable where the augmented argmax stays put.
        let argmaxes = RefCell::new(BTreeSet::new());
        let build = |g: &mut Graph| {
            let invalid = |e: turnparse::Error| NumericsError::Invalid(e.to_string());
            let (_, chart) = net.chart(g, turn).map_err(invalid)?;
            let (_, aug) = hinge(&chart, &gold, net.config.dummy_penalty).map_err(invalid)?;
            argmaxes.borrow_mut().insert(aug.spans);
            let (_, node) = net.hinge_node(g, turn, &gold).map_err(invalid)?;
            node.ok_or_else(|| NumericsError::Invalid("hinge is zero".into()))
        };
        let r = grad_check(&mut parser.params, STEP, 6, build).unwrap();
        // So is a ReLU; a kink inside the step shows as a numeric slope that
        // moves when the step shrinks.
        let at_kink = r.max_rel_error > 1e-4 && {
            let (name, flat) = r.worst.clone().unwrap();
            let id = parser.params.ids().find(|&i| parser.params.name(i) == name).unwrap();
            let wide = central_difference(&mut parser.params, id, flat, STEP, &build);
            let narrow = central_difference(&mut parser.params, id, flat, STEP / 10.0, &build);
            (wide - narrow).abs() > 1e-4 * wide.abs().max(narrow.abs())
        };
        if argmaxes.borrow().len() > 1 || at_kink {
            at_ties += 1;
            continue;
        }
        worst = worst.max(r.max_rel_error);
        draws += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        draws == 20 && worst <= 1e-4 && secs < 300.0,
        &format!("max relative error {worst:.2e} over {draws} parameter draws ({at_ties} skipped at argmax ties or ReLU kinks) in {secs:.1}s"),
    );
}

#[test]
fn criterion_3_tree_round_trips() {
    let mut r = rng(303);
    let mut render_fail = 0;
    let mut binarize_fail = 0;
    for k in 0..1000 {
        let n = 1 + k % 15;
        let t = random_tree(&mut r, n);
        if parse_ptb(&render_ptb(&t)).ok().as_ref() != Some(&t) {
            render_fail += 1;
        }
        let u = random_turn_tree(&mut r, n);
        if debinarize(&binarize(&u)).ok().as_ref() != Some(&u) {
            binarize_fail += 1;
        }
    }
    report(
        3,
        render_fail + binarize_fail == 0,
        &format!("{render_fail} render/parse and {binarize_fail} binarize/debinarize failures over 1000 trees each"),
    );
}

/// 200 turns of 100 brackets: the first 100 mis-segmented.
fn precision_fixture(overall_matched: usize, incorrect_matched: usize) -> Vec<TurnEval> {
    let mut out = Vec::new();
    for (total, ok) in [(incorrect_matched, false), (overall_matched - incorrect_matched, true)] {
        for i in 0..100 {
            let m = total / 100 + usize::from(i < total % 100);
            out.push(TurnEval {
                id: format!("{ok}{i}"),
                parse: Counts::new(m, 100, 100),
                seg: Counts::default(),
                seg_correct: ok,
            });
        }
    }
    out
}

#[test]
fn criterion_4_metric_fixtures() {
    let set = |xs: &[usize]| xs.iter().copied().collect::<BTreeSet<usize>>();
    let pipe = seg_f1(&set(&[1]), &set(&[1, 11]), 14).unwrap().f1();
    let e2e = seg_f1(&set(&[1, 2, 11, 12, 13]), &set(&[1, 11]), 14).unwrap().f1();
    let gold = tree(FIG1_GOLD);
    let same = parse_f1(&gold, &gold).unwrap().f1();
    let pred = tree(FIG1_E2E);
    let same_pred = parse_f1(&pred, &pred).unwrap().f1();
    let d_pipe = conditioned_precision(&precision_fixture(17144, 8050)).delta.unwrap();
    let d_e2e = conditioned_precision(&precision_fixture(17240, 8224)).delta.unwrap();
    let pass = (pipe - 66.7).abs() <= 0.05
        && (e2e - 57.1).abs() <= 0.05
        && same == 100.0
        && same_pred == 100.0
        && (d_pipe - 5.22).abs() <= 0.01
        && (d_e2e - 3.96).abs() <= 0.01;
    report(
        4,
        pass,
        &format!(
            "seg F1 {pipe:.2} and {e2e:.2}, self parse F1 {same} and {same_pred}, precision deltas {d_pipe:.2} and {d_e2e:.2}"
        ),
    );
}

#[test]
fn criterion_5_overfits_fifty_turns() {
    let start = Instant::now();
    let corpus = generate_synthetic(&SynthConfig {
        turns: 50,
        vocab_size: 100,
        max_turn_len: 20,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let train: Vec<&Turn> = corpus.turns.iter().collect();
    let config = TrainConfig {
        epochs: 200,
        batch_size: 10,
        seed: 5,
        eval_every: 10,
        ..TrainConfig::default()
    };
    // Checkpoints are picked on the training turns themselves.
    let (parser, run) = train_e2e(&train, &train, &ModelConfig::desk(true), &config).unwrap();
    let f1 = evaluate_parser(&parser, &train).unwrap().parse.f1;
    let secs = start.elapsed().as_secs_f64();
    report(
        5,
        f1 >= 99.0 && secs < 1800.0,
        &format!("training parse F1 {f1:.2} after {} epochs in {secs:.0}s", run.epoch_loss.len()),
    );
}

// ---------------------------------------------------------------------------
// Directional experiments on 2,000 synthetic turns

const SEEDS: [u64; 3] = [1, 2, 3];
const E2E_EPOCHS: usize = 60;
const PIPELINE_EPOCHS: usize = 30;

/// 1,500 training and 500 dev turns.
fn directional_corpus(correlation: f64) -> Corpus {
    generate_synthetic(&SynthConfig {
        turns: 2000,
        correlation,
        seed: 17,
        ..SynthConfig::default()
    })
    .unwrap()
    .resplit(17, (0.75, 0.25))
    .unwrap()
}

fn train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

fn e2e_summary(corpus: &Corpus, model: &ModelConfig) -> SeedSummary {
    let (train, dev) = (corpus.train(), corpus.dev());
    let runs: Vec<_> = SEEDS
        .iter()
        .map(|&s| train_e2e(&train, &dev, model, &train_config(E2E_EPOCHS, s)).unwrap().1)
        .collect();
    summarize(&runs)
}

fn pipeline_summary(corpus: &Corpus, model: &ModelConfig) -> SeedSummary {
    let (train, dev) = (corpus.train(), corpus.dev());
    let runs: Vec<_> = SEEDS
        .iter()
        .map(|&s| {
            let config = train_config(PIPELINE_EPOCHS, s);
            let (seg, _) = train_segmenter(&train, &dev, model, &config).unwrap();
            train_pipeline_parser(&train, &dev, &seg, model, &config).unwrap().1
        })
        .collect();
    summarize(&runs)
}

fn log_summary(name: &str, s: &SeedSummary) {
    let _ = writeln!(std::io::stdout().lock(), "  {name}: {s}");
}

#[test]
fn criterion_6_prosody_helps_only_when_correlated() {
    let mut gaps = Vec::new();
    for correlation in [0.9, 0.0] {
        let corpus = directional_corpus(correlation);
        let text = e2e_summary(&corpus, &ModelConfig::desk(false));
        let prosody = e2e_summary(&corpus, &ModelConfig::desk(true));
        log_summary(&format!("corr {correlation} text"), &text);
        log_summary(&format!("corr {correlation} text+prosody"), &prosody);
        gaps.push((
            prosody.seg_f1.mean - text.seg_f1.mean,
            prosody.parse_f1.mean - text.parse_f1.mean,
        ));
    }
    let (seg9, parse9) = gaps[0];
    let (seg0, parse0) = gaps[1];
    let pass = seg9 >= 5.0 && parse9 >= 1.0 && seg0.abs() <= 1.0 && parse0.abs() <= 1.0;
    report(
        6,
        pass,
        &format!(
            "prosody gain at corr 0.9: seg F1 {seg9:+.2}, parse F1 {parse9:+.2}; at corr 0.0: seg F1 {seg0:+.2}, parse F1 {parse0:+.2}"
        ),
    );
}

#[test]
fn criterion_7_e2e_oversegments_and_pipeline_does_not() {
    let corpus = directional_corpus(0.9);
    let model = ModelConfig {
        dummy_penalty: E2E_DIRECTION_PENALTY,
        ..ModelConfig::desk(true)
    };
    let e2e = e2e_summary(&corpus, &model);
    let pipe = pipeline_summary(&corpus, &ModelConfig::desk(true));
    log_summary("e2e", &e2e);
    log_summary("pipeline", &pipe);
    let (ep, er) = (e2e.seg_precision.mean, e2e.seg_recall.mean);
    let (pp, pr) = (pipe.seg_precision.mean, pipe.seg_recall.mean);
    report(
        7,
        ep < er && pp >= pr,
        &format!("e2e seg P {ep:.2} vs R {er:.2}; pipeline seg P {pp:.2} vs R {pr:.2}"),
    );
}

/// The dummy penalty used for the e2e side of criterion 7.
const E2E_DIRECTION_PENALTY: f64 = 1.0;

#[test]
fn criterion_8_dummy_count_is_monotone_in_penalty() {
    let mut r = rng(808);
    let mut violations = 0;
    for k in 0..100 {
        let n = 2 + k % 7;
        let chart = random_chart(&mut r, n, 4);
        let gold = random_gold(&mut r, n, 4);
        let counts: Vec<usize> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&p| count_dummy(&loss_augmented_decode(&chart, &gold, p).unwrap()))
            .collect();
        if counts.windows(2).any(|w| w[1] > w[0]) {
            violations += 1;
        }
    }
    report(8, violations == 0, &format!("{violations} of 100 charts gain DUMMY spans as the penalty rises"));
}

fn eval_record(id: usize, matched: usize) -> TurnEval {
    TurnEval {
        id: id.to_string(),
        parse: Counts::new(matched, 10, 10),
        seg: Counts::default(),
        seg_correct: true,
    }
}

#[test]
fn criterion_9_bootstrap_sanity() {
    let mut r = rng(909);
    use rand::Rng;
    let base: Vec<TurnEval> = (0..50).map(|i| eval_record(i, r.random_range(3..=10))).collect();
    let same = bootstrap_significance(&base, &base, Metric::ParseF1, 100_000, 1).unwrap();
    let worse: Vec<TurnEval> = base.iter().enumerate().map(|(i, t)| eval_record(i, t.parse.matched - 3)).collect();
    let dominant = bootstrap_significance(&base, &worse, Metric::ParseF1, 100_000, 2).unwrap();

    let a: Vec<TurnEval> = [8, 3, 6].iter().enumerate().map(|(i, &m)| eval_record(i, m)).collect();
    let b: Vec<TurnEval> = [5, 5, 5].iter().enumerate().map(|(i, &m)| eval_record(i, m)).collect();
    let f1 = |ts: &[TurnEval], idx: [usize; 3]| idx.iter().map(|&i| ts[i].parse).sum::<Counts>().f1();
    let mut hits = 0;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                if f1(&a, [i, j, k]) - f1(&b, [i, j, k]) <= 1e-9 {
                    hits += 1;
                }
            }
        }
    }
    let oracle = hits as f64 / 27.0;
    let sampled = bootstrap_significance(&a, &b, Metric::ParseF1, 100_000, 3).unwrap().p_value;
    let exact = exact_bootstrap_p(&a, &b, Metric::ParseF1).unwrap();
    let pass = same.p_value >= 0.5 && dominant.p_value <= 0.001 && (sampled - oracle).abs() <= 0.01 && exact == oracle;
    report(
        9,
        pass,
        &format!(
            "self p {:.3}, dominance p {:.5}, 3-turn p {sampled:.4} against exhaustive {oracle:.4}",
            same.p_value, dominant.p_value
        ),
    );
}
