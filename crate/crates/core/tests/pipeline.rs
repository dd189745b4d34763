mod common;

use std::collections::BTreeSet;

use common::{tiny_corpus, tree, FIG1_GOLD};
use turnparse::corpus::Turn;
use turnparse::model::{LabelSet, ModelConfig, Parser, Vocab};
use turnparse::numerics::OptimizerConfig;
use turnparse::pipeline::{
    evaluate_pipeline, multi_seed, pipeline_examples, pipeline_parse, split_by_boundaries, summarize, train_e2e,
    train_segmenter, BoundaryLabels, MeanStd, Segmenter, Tag, TrainConfig,
};
use turnparse::treebank::{wrap_turn, Tree, BLANK, TURN};
use turnparse::Error;

/// A turn with words and a gold tree but no timing or prosody.
fn bare_turn(gold: &str) -> Turn {
    let gold = tree(gold);
    let words: Vec<String> = gold.words().iter().map(|w| w.to_string()).collect();
    let n = words.len();
    Turn {
        id: "t".into(),
        dialogue: "d".into(),
        speaker: "A".into(),
        words,
        times: vec![None; n],
        pauses: vec![None; n],
        frames: Vec::new(),
        prosody: Vec::new(),
        gold: Some(gold),
    }
}

fn set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

#[test]
fn single_token_turn_is_su_final() {
    assert_eq!(BoundaryLabels::new(vec![Tag::SuInternal]).tags(), &[Tag::SuFinal]);
    assert!(BoundaryLabels::new(Vec::new()).is_empty());
}

#[test]
fn gold_labels_follow_turn_children() {
    let labels = BoundaryLabels::from_tree(&tree(FIG1_GOLD)).unwrap();
    assert_eq!(labels.len(), 14);
    assert_eq!(labels.boundaries(), set(&[1, 11]));
    let spans: Vec<(usize, usize)> = labels.spans().iter().map(|s| (s.start, s.end)).collect();
    assert_eq!(spans, vec![(0, 1), (1, 11), (11, 14)]);
}

#[test]
fn splitting_by_boundaries() {
    let turn = bare_turn(FIG1_GOLD);
    let whole = split_by_boundaries(&turn, &BoundaryLabels::from_boundaries(14, &set(&[]))).unwrap();
    assert_eq!(whole.len(), 1);
    assert_eq!(whole[0].1.words, turn.words);

    let parts = split_by_boundaries(&turn, &BoundaryLabels::from_boundaries(14, &set(&[1]))).unwrap();
    let spans: Vec<(usize, usize)> = parts.iter().map(|(s, _)| (s.start, s.end)).collect();
    assert_eq!(spans, vec![(0, 1), (1, 14)]);
    assert_eq!(parts[1].1.words[0], "it");

    let many = split_by_boundaries(&turn, &BoundaryLabels::from_boundaries(14, &set(&[2, 5, 9]))).unwrap();
    assert_eq!(many.len(), 4);

    let short = BoundaryLabels::from_boundaries(3, &set(&[]));
    assert!(matches!(split_by_boundaries(&turn, &short), Err(Error::Mismatch(_))));
}

#[test]
fn sub_turns_rescale_durations_within_the_unit() {
    let c = tiny_corpus(20, 1);
    let turn = c.turns.iter().find(|t| t.len() >= 4).unwrap();
    let labels = BoundaryLabels::from_boundaries(turn.len(), &set(&[2]));
    for (_, sub) in split_by_boundaries(turn, &labels).unwrap() {
        let max = sub.prosody.iter().map(|p| p.duration.by_unit_max).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12, "{max}");
        assert_eq!(sub.prosody.len(), sub.len());
    }
}

#[test]
fn perfect_segmentation_keeps_gold_sus() {
    let turn = bare_turn(FIG1_GOLD);
    let gold = turn.gold.clone().unwrap();
    let labels = BoundaryLabels::from_tree(&gold).unwrap();
    let examples = pipeline_examples(&turn, &labels).unwrap();
    assert_eq!(examples.len(), 3);
    for ((sub, target), su) in examples.iter().zip(gold.children()) {
        assert_eq!(target, &su.shifted(-(su.span().start as isize)));
        assert_eq!(sub.gold.as_ref(), Some(target));
    }
}

#[test]
fn undersegmentation_gives_a_blank_pair() {
    let turn = bare_turn("(TURN (INTJ (UH uh)) (S (NP (N it)) (VP (V goes))))");
    let labels = BoundaryLabels::from_boundaries(3, &set(&[]));
    let examples = pipeline_examples(&turn, &labels).unwrap();
    assert_eq!(examples.len(), 1);
    let target = &examples[0].1;
    assert_eq!(target.label(), Some(BLANK));
    assert_eq!(target.children().len(), 2);
}

#[test]
fn oversegmentation_clips_a_vp_under_blank() {
    let turn = bare_turn("(TURN (S (NP (D the) (N dog)) (VP (V saw) (NP (D a) (N cat)) (ADVP (RB today)))))");
    // The cut after "a" splits both the VP and its object.
    let labels = BoundaryLabels::from_boundaries(6, &set(&[4]));
    let examples = pipeline_examples(&turn, &labels).unwrap();
    assert_eq!(examples.len(), 2);
    let (first, second) = (&examples[0].1, &examples[1].1);
    assert_eq!(first.label(), Some(BLANK));
    assert_eq!(first.words(), vec!["the", "dog", "saw", "a"]);
    assert_eq!(second.label(), Some(BLANK));
    assert_eq!(second.span().start, 0);
    assert_eq!(second.words(), vec!["cat", "today"]);
}

fn small_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 10,
        optimizer: OptimizerConfig {
            learning_rate: 1e-2,
            ..OptimizerConfig::default()
        },
        seed,
        eval_every: 0,
    }
}

#[test]
fn segmenter_overfits_ten_turns() {
    let c = tiny_corpus(40, 2);
    let train: Vec<&Turn> = c.turns.iter().filter(|t| t.len() >= 3).take(10).collect();
    let mut config = small_train_config(400, 3);
    config.optimizer.learning_rate = 3e-3;
    let (seg, run) = train_segmenter(&train, &[], &ModelConfig::tiny(true), &config).unwrap();
    let loss = &run.epoch_loss;
    assert!(loss.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{loss:?}");
    assert!(*loss.last().unwrap() < 0.02 * loss[0], "{} -> {}", loss[0], loss.last().unwrap());
    for t in &train {
        let gold = BoundaryLabels::from_tree(t.gold.as_ref().unwrap()).unwrap();
        assert_eq!(seg.segment_turn(t).unwrap(), gold, "turn {}", t.id);
    }
}

#[test]
fn segmenter_checkpoint_round_trip() {
    let c = tiny_corpus(10, 4);
    let vocab = Vocab::build(c.turns.iter().flat_map(|t| t.words.iter().map(String::as_str)));
    let seg = Segmenter::new(&ModelConfig::tiny(true), vocab, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.ckpt");
    seg.save(&path).unwrap();
    let loaded = Segmenter::load(&path).unwrap();
    for t in &c.turns {
        assert_eq!(loaded.segment_turn(t).unwrap(), seg.segment_turn(t).unwrap());
    }
    // A segmenter checkpoint is not a parser.
    assert!(Parser::load(&path).is_err());
}

fn untrained(c: &turnparse::corpus::Corpus, seed: u64) -> (Segmenter, Parser) {
    let vocab = Vocab::build(c.turns.iter().flat_map(|t| t.words.iter().map(String::as_str)));
    let labels = LabelSet::from_trees(c.turns.iter().map(|t| t.gold.as_ref().unwrap()));
    let config = ModelConfig::tiny(true);
    (
        Segmenter::new(&config, vocab.clone(), seed).unwrap(),
        Parser::new(&config, vocab, labels, seed).unwrap(),
    )
}

#[test]
fn pipeline_parse_keeps_words_under_turn() {
    let c = tiny_corpus(30, 6);
    let (seg, parser) = untrained(&c, 7);
    for t in &c.turns {
        let out = pipeline_parse(t, &seg, &parser).unwrap();
        assert_eq!(out.label(), Some(TURN));
        assert_eq!(out.words(), t.words.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(out.children().iter().all(|su| su.label() != Some(BLANK)));
        // Every predicted boundary survives into the tree.
        let predicted = seg.segment_turn(t).unwrap().boundaries();
        let su_starts: BTreeSet<usize> = out.children().iter().map(|su| su.span().start).filter(|&s| s > 0).collect();
        assert!(predicted.is_subset(&su_starts));
    }
    let report = evaluate_pipeline(&seg, &parser, &c.turns.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(report.turns.len(), 30);
}

#[test]
fn single_predicted_su_parses_the_whole_turn() {
    let c = tiny_corpus(30, 8);
    let (seg, parser) = untrained(&c, 9);
    for t in c.turns.iter().filter(|t| seg.segment_turn(t).unwrap().boundaries().is_empty()).take(5) {
        let direct: Vec<Tree> = turnparse::treebank::strip_blank(&parser.parse_unit(t, BLANK).unwrap());
        assert_eq!(pipeline_parse(t, &seg, &parser).unwrap(), wrap_turn(direct).unwrap());
    }
}

#[test]
fn training_is_deterministic_given_seed() {
    let c = tiny_corpus(40, 10);
    let (train, dev): (Vec<&Turn>, Vec<&Turn>) = (c.turns[..30].iter().collect(), c.turns[30..].iter().collect());
    let config = TrainConfig {
        eval_every: 2,
        ..small_train_config(4, 11)
    };
    let model = ModelConfig::tiny(true);
    let (p1, r1) = train_e2e(&train, &dev, &model, &config).unwrap();
    let (p2, r2) = train_e2e(&train, &dev, &model, &config).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(p1.params, p2.params);
    assert!(r1.dev.is_some());
}

#[test]
fn empty_training_set_is_an_error() {
    let err = train_e2e(&[], &[], &ModelConfig::tiny(false), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    let err = train_segmenter(&[], &[], &ModelConfig::tiny(false), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn seed_summaries_average_dev_scores() {
    let c = tiny_corpus(30, 12);
    let (train, dev): (Vec<&Turn>, Vec<&Turn>) = (c.turns[..24].iter().collect(), c.turns[24..].iter().collect());
    let model = ModelConfig::tiny(false);
    let runs = multi_seed(&[1, 2], &small_train_config(2, 0), |cfg| Ok(train_e2e(&train, &dev, &model, cfg)?.1)).unwrap();
    assert_eq!(runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2]);
    let s = summarize(&runs);
    assert_eq!(s.runs, 2);
    let f1s: Vec<f64> = runs.iter().map(|r| r.dev.unwrap().parse.unwrap().f1).collect();
    assert_eq!(s.parse_f1, MeanStd::of(&f1s));
}

#[test]
fn mean_std_uses_sample_deviation() {
    let m = MeanStd::of(&[1.0, 2.0, 3.0]);
    assert_eq!(m.mean, 2.0);
    assert_eq!(m.std, 1.0);
    assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    assert_eq!(m.to_string(), "2.00 ± 1.00");
}
