//! The two-stage system (SU segmenter, then a parser over predicted SUs),
//! shared training loops and multi-seed runs.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Turn;
use crate::eval::{boundaries_from_tree, evaluate_turn, seg_f1, Counts, EvalReport, Prf};
use crate::model::{tree_spans, LabelSet, ModelConfig, Parser, TurnEncoder, Vocab};
use crate::numerics::{Gradients, Graph, Linear, NodeId, Optimizer, OptimizerConfig, ParamStore};
use crate::treebank::{clip_to_span, extract_sus, insert_blank, strip_blank, wrap_turn, Span, Tree, BLANK};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    SuInternal,
    SuFinal,
}

/// One tag per token. The last token always closes an SU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryLabels {
    tags: Vec<Tag>,
}

impl BoundaryLabels {
    pub fn new(mut tags: Vec<Tag>) -> Self {
        if let Some(last) = tags.last_mut() {
            *last = Tag::SuFinal;
        }
        BoundaryLabels { tags }
    }

    /// Tags with SU-final marks after each token offset in `boundaries`.
    pub fn from_boundaries(n: usize, boundaries: &BTreeSet<usize>) -> Self {
        let tags = (0..n)
            .map(|k| if boundaries.contains(&(k + 1)) { Tag::SuFinal } else { Tag::SuInternal })
            .collect();
        BoundaryLabels::new(tags)
    }

    /// Gold tags from the SUs of a TURN-rooted tree.
    pub fn from_tree(tree: &Tree) -> Result<Self> {
        Ok(Self::from_boundaries(tree.num_words(), &boundaries_from_tree(tree)?))
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Turn-medial boundary offsets.
    pub fn boundaries(&self) -> BTreeSet<usize> {
        let n = self.tags.len();
        (0..n.saturating_sub(1)).filter(|&k| self.tags[k] == Tag::SuFinal).map(|k| k + 1).collect()
    }

    /// Maximal runs of tokens ending at an SU-final tag.
    pub fn spans(&self) -> Vec<Span> {
        let mut out = Vec::new();
        let mut start = 0;
        for (k, t) in self.tags.iter().enumerate() {
            if *t == Tag::SuFinal {
                out.push(Span::new(start, k + 1));
                start = k + 1;
            }
        }
        out
    }
}

/// Cuts a turn into the predicted SUs.
pub fn split_by_boundaries(turn: &Turn, labels: &BoundaryLabels) -> Result<Vec<(Span, Turn)>> {
    if labels.len() != turn.len() {
        return Err(Error::Mismatch(format!(
            "{} boundary tags for a turn of {} tokens",
            labels.len(),
            turn.len()
        )));
    }
    Ok(labels.spans().into_iter().map(|s| (s, turn.sub_turn(s.start, s.end))).collect())
}

// ---------------------------------------------------------------------------
// Segmenter

/// Encoder plus a two-way linear classifier per token.
#[derive(Debug, Clone)]
pub struct SegmenterNet {
    pub config: ModelConfig,
    pub vocab: Vocab,
    enc: TurnEncoder,
    out: Linear,
}

impl SegmenterNet {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Self {
        let enc = TurnEncoder::new(store, "seg", config, vocab.len(), rng);
        let out = Linear::new(store, "seg.out", config.encoder.d_model, 2, true, rng);
        SegmenterNet {
            config: config.clone(),
            vocab,
            enc,
            out,
        }
    }

    /// `n x 2` logits, column 1 being SU-final.
    pub fn logits(&self, g: &mut Graph, turn: &Turn) -> Result<NodeId> {
        let states = self.enc.encode(g, turn, &self.vocab)?;
        let tokens = g.gather(states, &(1..=turn.len()).collect::<Vec<_>>())?;
        Ok(self.out.forward(g, tokens)?)
    }

    /// Summed cross-entropy over every token but the last, whose tag is fixed.
    pub fn loss(&self, g: &mut Graph, turn: &Turn, gold: &BoundaryLabels) -> Result<Option<NodeId>> {
        let n = turn.len();
        if n < 2 {
            return Ok(None);
        }
        let logits = self.logits(g, turn)?;
        let rows = g.gather(logits, &(0..n - 1).collect::<Vec<_>>())?;
        let targets: Vec<usize> = gold.tags()[..n - 1].iter().map(|t| usize::from(*t == Tag::SuFinal)).collect();
        Ok(Some(g.cross_entropy(rows, &targets)?))
    }
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    pub params: ParamStore,
    pub net: SegmenterNet,
}

#[derive(Serialize, Deserialize)]
struct SegmenterMeta {
    kind: String,
    config: ModelConfig,
    vocab: Vocab,
}

impl Segmenter {
    pub fn new(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SegmenterNet::new(&mut params, config, vocab, &mut rng);
        Ok(Segmenter { params, net })
    }

    pub fn segment_turn(&self, turn: &Turn) -> Result<BoundaryLabels> {
        let mut g = Graph::new(&self.params);
        let logits = self.net.logits(&mut g, turn)?;
        let tags = g
            .value(logits)
            .rows()
            .into_iter()
            .map(|r| if r[1] > r[0] { Tag::SuFinal } else { Tag::SuInternal })
            .collect();
        Ok(BoundaryLabels::new(tags))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = SegmenterMeta {
            kind: "segmenter".into(),
            config: self.net.config.clone(),
            vocab: self.net.vocab.clone(),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.params.write_checkpoint(&mut out, &serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let (mut params, meta) = ParamStore::read_checkpoint(&mut input)?;
        let meta: SegmenterMeta = serde_json::from_str(&meta)?;
        if meta.kind != "segmenter" {
            return Err(Error::Config(format!("{} holds a {} checkpoint, not a segmenter", path.display(), meta.kind)));
        }
        let before = params.len();
        let net = SegmenterNet::new(&mut params, &meta.config, meta.vocab, &mut ChaCha8Rng::seed_from_u64(0));
        if params.len() != before {
            return Err(Error::Config(format!("{} is missing parameters for its configuration", path.display())));
        }
        Ok(Segmenter { params, net })
    }
}

// ---------------------------------------------------------------------------
// Pipeline data and inference

/// Parser training pairs for one turn under the given segmentation: each
/// predicted SU with the gold constituents inside it, joined under BLANK
/// when they do not form one tree. Trees are shifted to start at 0.
pub fn pipeline_examples(turn: &Turn, labels: &BoundaryLabels) -> Result<Vec<(Turn, Tree)>> {
    let gold = turn
        .gold
        .as_ref()
        .ok_or_else(|| Error::Data(format!("turn {} has no gold tree", turn.id)))?;
    extract_sus(gold)?;
    let mut out = Vec::new();
    for (span, sub) in split_by_boundaries(turn, labels)? {
        let fragments: Vec<Tree> = gold.children().iter().flat_map(|c| clip_to_span(c, span)).collect();
        let target = insert_blank(fragments)?.shifted(-(span.start as isize));
        let mut sub = sub;
        sub.gold = Some(target.clone());
        out.push((sub, target));
    }
    Ok(out)
}

/// The pipeline parser's training set: gold fragments over the SUs the
/// segmenter predicts on `turns`.
pub fn make_pipeline_train_set(turns: &[&Turn], segmenter: &Segmenter) -> Result<Vec<(Turn, Tree)>> {
    let per_turn = turns
        .par_iter()
        .map(|t| pipeline_examples(t, &segmenter.segment_turn(t)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_turn.into_iter().flatten().collect())
}

/// Segments, parses each predicted SU and joins the results under TURN.
/// A predicted SU parsed with a BLANK root contributes its children as
/// separate SUs.
pub fn pipeline_parse(turn: &Turn, segmenter: &Segmenter, parser: &Parser) -> Result<Tree> {
    let labels = segmenter.segment_turn(turn)?;
    let mut sus = Vec::new();
    for (span, sub) in split_by_boundaries(turn, &labels)? {
        let tree = parser.parse_unit(&sub, BLANK)?.shifted(span.start as isize);
        sus.extend(strip_blank(&tree));
    }
    Ok(wrap_turn(sus)?)
}

fn gold_of(turn: &Turn) -> Result<&Tree> {
    turn.gold
        .as_ref()
        .ok_or_else(|| Error::Data(format!("turn {} has no gold tree", turn.id)))
}

pub fn evaluate_parser(parser: &Parser, turns: &[&Turn]) -> Result<EvalReport> {
    let evals = turns
        .par_iter()
        .map(|t| evaluate_turn(&t.id, &parser.parse_turn(t)?, gold_of(t)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_turns(evals))
}

pub fn evaluate_pipeline(segmenter: &Segmenter, parser: &Parser, turns: &[&Turn]) -> Result<EvalReport> {
    let evals = turns
        .par_iter()
        .map(|t| evaluate_turn(&t.id, &pipeline_parse(t, segmenter, parser)?, gold_of(t)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_turns(evals))
}

pub fn evaluate_segmenter(segmenter: &Segmenter, turns: &[&Turn]) -> Result<Counts> {
    let counts = turns
        .par_iter()
        .map(|t| {
            let pred = segmenter.segment_turn(t)?.boundaries();
            let gold = boundaries_from_tree(gold_of(t)?)?;
            seg_f1(&pred, &gold, t.len())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(counts.into_iter().sum())
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    E2e,
    Segmenter,
    PipelineParser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Score the dev set every this many epochs and keep the best
    /// parameters; 0 keeps the final ones.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

/// Dev scores of a trained model. The segmenter has no parse score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevScores {
    pub parse: Option<Prf>,
    pub seg: Prf,
}

impl From<&EvalReport> for DevScores {
    fn from(r: &EvalReport) -> Self {
        DevScores {
            parse: Some(r.parse),
            seg: r.seg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub mode: Mode,
    pub use_prosody: bool,
    /// Mean loss per turn (parsers) or per token (segmenter), by epoch.
    pub epoch_loss: Vec<f64>,
    pub best_epoch: usize,
    pub dev: Option<DevScores>,
}

/// Per-example loss: value, optional graph node and the number of units it
/// is averaged over.
type LossFn<'a> = dyn Fn(&mut Graph, usize) -> Result<(f64, Option<NodeId>, usize)> + Sync + 'a;

/// Minibatch training over `count` examples. `evaluate` scores the current
/// parameters on held-out data (higher is better) when `eval_every` is set;
/// the best-scoring parameters are restored at the end.
fn train_loop(
    store: &mut ParamStore,
    count: usize,
    config: &TrainConfig,
    loss: &LossFn<'_>,
    describe: &(dyn Fn(usize) -> String + Sync),
    evaluate: &mut dyn FnMut(&ParamStore) -> Result<f64>,
) -> Result<(Vec<f64>, usize)> {
    if count == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut optimizer = Optimizer::new(config.optimizer, store);
    let mut order: Vec<usize> = (0..count).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let (mut total, mut units) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let shared: &ParamStore = store;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream((epoch * count + i) as u64 + 1);
                    let mut g = Graph::training(shared, rng);
                    let (value, node, n) = loss(&mut g, i)?;
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("loss {value} on {} in epoch {}", describe(i), epoch + 1)));
                    }
                    let grads = node.map(|node| g.backward(node)).transpose()?;
                    Ok((value, n, grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Gradients::zeros_like(store);
            let mut batch_units = 0;
            for (value, n, g) in results {
                total += value;
                units += n;
                batch_units += n;
                if let Some(g) = g {
                    grads.merge(&g);
                }
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("gradient in epoch {}", epoch + 1)));
            }
            grads.scale(1.0 / batch_units.max(1) as f64);
            optimizer.apply(store, &grads);
        }
        let mean = total / units.max(1) as f64;
        log::info!("epoch {} loss {mean:.4}", epoch + 1);
        history.push(mean);
        let last = epoch + 1 == config.epochs;
        if config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last) {
            let score = evaluate(store)?;
            log::info!("epoch {} dev {score:.2}", epoch + 1);
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch + 1, store.clone()));
            }
        }
    }
    match best {
        Some((_, epoch, params)) => {
            *store = params;
            Ok((history, epoch))
        }
        None => Ok((history, config.epochs)),
    }
}

fn train_vocab(turns: &[&Turn]) -> Vocab {
    Vocab::build(turns.iter().flat_map(|t| t.words.iter().map(String::as_str)))
}

/// Trains a parser on `(input, target tree)` pairs; `dev_score` picks the
/// checkpoint when `eval_every` is set.
pub fn train_parser(
    examples: &[(&Turn, &Tree)],
    labels: LabelSet,
    vocab: Vocab,
    model: &ModelConfig,
    config: &TrainConfig,
    dev_score: &mut dyn FnMut(&Parser) -> Result<f64>,
) -> Result<(Parser, Vec<f64>, usize)> {
    if examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut parser = Parser::new(model, vocab, labels, config.seed)?;
    let golds = examples
        .iter()
        .map(|(_, tree)| tree_spans(tree, &parser.net.labels))
        .collect::<Result<Vec<_>>>()?;
    let net = parser.net.clone();
    let loss = |g: &mut Graph, i: usize| -> Result<(f64, Option<NodeId>, usize)> {
        let (value, node) = net.hinge_node(g, examples[i].0, &golds[i])?;
        Ok((value, node, 1))
    };
    let describe = |i: usize| format!("turn {}", examples[i].0.id);
    let mut evaluate = |store: &ParamStore| {
        let p = Parser {
            params: store.clone(),
            net: net.clone(),
        };
        dev_score(&p)
    };
    let (history, best) = train_loop(&mut parser.params, examples.len(), config, &loss, &describe, &mut evaluate)?;
    Ok((parser, history, best))
}

/// The end-to-end parser over whole turns.
pub fn train_e2e(train: &[&Turn], dev: &[&Turn], model: &ModelConfig, config: &TrainConfig) -> Result<(Parser, TrainRun)> {
    let golds = train.iter().map(|t| gold_of(t)).collect::<Result<Vec<_>>>()?;
    let examples: Vec<(&Turn, &Tree)> = train.iter().copied().zip(golds.iter().copied()).collect();
    let labels = LabelSet::from_trees(golds.iter().copied());
    let mut dev_score = |p: &Parser| Ok(evaluate_parser(p, dev)?.parse.f1);
    let (parser, epoch_loss, best_epoch) = train_parser(&examples, labels, train_vocab(train), model, config, &mut dev_score)?;
    let dev_scores = if dev.is_empty() {
        None
    } else {
        Some(DevScores::from(&evaluate_parser(&parser, dev)?))
    };
    Ok((
        parser,
        TrainRun {
            seed: config.seed,
            mode: Mode::E2e,
            use_prosody: model.use_prosody,
            epoch_loss,
            best_epoch,
            dev: dev_scores,
        },
    ))
}

pub fn train_segmenter(train: &[&Turn], dev: &[&Turn], model: &ModelConfig, config: &TrainConfig) -> Result<(Segmenter, TrainRun)> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let golds = train
        .iter()
        .map(|t| BoundaryLabels::from_tree(gold_of(t)?))
        .collect::<Result<Vec<_>>>()?;
    let mut seg = Segmenter::new(model, train_vocab(train), config.seed)?;
    let net = seg.net.clone();
    let loss = |g: &mut Graph, i: usize| -> Result<(f64, Option<NodeId>, usize)> {
        let units = train[i].len().saturating_sub(1);
        match net.loss(g, train[i], &golds[i])? {
            Some(node) => Ok((g.scalar(node), Some(node), units)),
            None => Ok((0.0, None, 0)),
        }
    };
    let describe = |i: usize| format!("turn {}", train[i].id);
    let mut evaluate = |store: &ParamStore| {
        let s = Segmenter {
            params: store.clone(),
            net: net.clone(),
        };
        Ok(evaluate_segmenter(&s, dev)?.f1())
    };
    let (epoch_loss, best_epoch) = train_loop(&mut seg.params, train.len(), config, &loss, &describe, &mut evaluate)?;
    let dev_scores = if dev.is_empty() {
        None
    } else {
        Some(DevScores {
            parse: None,
            seg: evaluate_segmenter(&seg, dev)?.scores(),
        })
    };
    Ok((
        seg,
        TrainRun {
            seed: config.seed,
            mode: Mode::Segmenter,
            use_prosody: model.use_prosody,
            epoch_loss,
            best_epoch,
            dev: dev_scores,
        },
    ))
}

/// The second pipeline stage, trained on the segmenter's output for the
/// training turns and scored through the whole pipeline on dev.
pub fn train_pipeline_parser(
    train: &[&Turn],
    dev: &[&Turn],
    segmenter: &Segmenter,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(Parser, TrainRun)> {
    let pairs = make_pipeline_train_set(train, segmenter)?;
    let examples: Vec<(&Turn, &Tree)> = pairs.iter().map(|(t, tree)| (t, tree)).collect();
    let labels = LabelSet::from_trees(pairs.iter().map(|p| &p.1));
    let mut dev_score = |p: &Parser| Ok(evaluate_pipeline(segmenter, p, dev)?.parse.f1);
    let (parser, epoch_loss, best_epoch) = train_parser(&examples, labels, train_vocab(train), model, config, &mut dev_score)?;
    let dev_scores = if dev.is_empty() {
        None
    } else {
        Some(DevScores::from(&evaluate_pipeline(segmenter, &parser, dev)?))
    };
    Ok((
        parser,
        TrainRun {
            seed: config.seed,
            mode: Mode::PipelineParser,
            use_prosody: model.use_prosody,
            epoch_loss,
            best_epoch,
            dev: dev_scores,
        },
    ))
}

/// Both pipeline stages in order; the run records the parser stage with
/// whole-pipeline dev scores.
pub fn train_pipeline(
    train: &[&Turn],
    dev: &[&Turn],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(Segmenter, Parser, TrainRun)> {
    let (seg, _) = train_segmenter(train, dev, model, config)?;
    let (parser, run) = train_pipeline_parser(train, dev, &seg, model, config)?;
    Ok((seg, parser, run))
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Dev metrics averaged over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub parse_f1: MeanStd,
    pub seg_precision: MeanStd,
    pub seg_recall: MeanStd,
    pub seg_f1: MeanStd,
}

pub fn summarize(runs: &[TrainRun]) -> SeedSummary {
    let devs: Vec<DevScores> = runs.iter().filter_map(|r| r.dev).collect();
    let pick = |f: &dyn Fn(&DevScores) -> f64| MeanStd::of(&devs.iter().map(f).collect::<Vec<_>>());
    SeedSummary {
        runs: devs.len(),
        parse_f1: pick(&|d| d.parse.map_or(0.0, |p| p.f1)),
        seg_precision: pick(&|d| d.seg.precision),
        seg_recall: pick(&|d| d.seg.recall),
        seg_f1: pick(&|d| d.seg.f1),
    }
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} seeds: parse F1 {}, seg P {}, seg R {}, seg F1 {}",
            self.runs, self.parse_f1, self.seg_precision, self.seg_recall, self.seg_f1
        )
    }
}

/// Runs `train` once per seed.
pub fn multi_seed<F>(seeds: &[u64], config: &TrainConfig, mut train: F) -> Result<Vec<TrainRun>>
where
    F: FnMut(&TrainConfig) -> Result<TrainRun>,
{
    seeds
        .iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.seed = seed;
            train(&c)
        })
        .collect()
}
