//! The span-based turn parser: token embeddings with optional prosody, a
//! self-attention encoder, span label scores and chart decoding.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Turn;
use crate::numerics::layers::{flatten_windows, uniform_param, SENTINELS};
use crate::numerics::{ConvBank, Encoder, EncoderConfig, Graph, Linear, NodeId, NumericsError, ParamId, ParamStore};
use crate::prosody::{PauseBin, FRAME_ROWS};
use crate::treebank::{binarize, debinarize, Tree, DUMMY, TURN};
use crate::{Error, Result};

pub mod chart;

pub use chart::{
    cky_decode, count_dummy, hinge, hinge_loss, loss_augmented_decode, span_index, spans, tree_score, tree_spans, Decoded,
    ScoreChart, NO_LABEL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub pause_dim: usize,
    pub cnn_widths: Vec<usize>,
    pub cnn_filters: usize,
    /// Frames per token window.
    pub window: usize,
    /// Frames of neighboring speech a short token may borrow on each side.
    pub context: usize,
    pub encoder: EncoderConfig,
    pub label_hidden: usize,
    pub use_prosody: bool,
    pub dummy_penalty: f64,
}

impl ModelConfig {
    /// Full-size settings.
    pub fn full(use_prosody: bool) -> Self {
        ModelConfig {
            word_dim: 300,
            pause_dim: 32,
            cnn_widths: vec![5, 10, 25, 50],
            cnn_filters: 32,
            window: 50,
            context: 5,
            encoder: EncoderConfig::default(),
            label_hidden: 250,
            use_prosody,
            dummy_penalty: 0.5,
        }
    }

    /// Small enough to train on a laptop CPU in minutes.
    pub fn desk(use_prosody: bool) -> Self {
        ModelConfig {
            word_dim: 32,
            pause_dim: 8,
            cnn_widths: vec![3, 5, 10],
            cnn_filters: 8,
            window: 20,
            context: 3,
            encoder: EncoderConfig {
                layers: 2,
                heads: 4,
                d_model: 64,
                d_kv: 16,
                d_ff: 128,
                dropout: 0.2,
                max_len: 270,
                positional: true,
            },
            label_hidden: 64,
            use_prosody,
            dummy_penalty: 0.5,
        }
    }

    /// For gradient checks.
    pub fn tiny(use_prosody: bool) -> Self {
        ModelConfig {
            word_dim: 6,
            pause_dim: 3,
            cnn_widths: vec![2, 3],
            cnn_filters: 2,
            window: 4,
            context: 1,
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                d_model: 8,
                d_kv: 3,
                d_ff: 10,
                dropout: 0.0,
                max_len: 20,
                positional: true,
            },
            label_hidden: 7,
            use_prosody,
            dummy_penalty: 0.5,
        }
    }

    pub fn cnn_dim(&self) -> usize {
        self.cnn_widths.len() * self.cnn_filters
    }

    /// Width of one token's input vector before projection.
    pub fn input_dim(&self) -> usize {
        if self.use_prosody {
            self.word_dim + self.pause_dim + 2 + self.cnn_dim()
        } else {
            self.word_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if !e.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("model dimension {} must be even", e.d_model)));
        }
        if e.heads == 0 || e.d_kv == 0 || e.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer, head and key dimension".into()));
        }
        if self.dummy_penalty < 0.0 || !self.dummy_penalty.is_finite() {
            return Err(Error::Config(format!("dummy penalty {} must be non-negative", self.dummy_penalty)));
        }
        if self.use_prosody && (self.window == 0 || self.cnn_widths.is_empty() || self.cnn_filters == 0) {
            return Err(Error::Config("prosody needs a positive window and at least one filter".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

pub const UNK: usize = 0;
pub const START: usize = 1;
pub const STOP: usize = 2;

/// Word types seen in training, plus the unknown-word and sentinel entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(words: I) -> Self {
        let seen: BTreeSet<&str> = words.into_iter().collect();
        let mut all = vec!["<unk>".to_string(), "<s>".to_string(), "</s>".to_string()];
        all.extend(seen.into_iter().filter(|w| !["<unk>", "<s>", "</s>"].contains(w)).map(str::to_string));
        Vocab::from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }
}

/// Span labels; index 0 is the no-label entry, which also stands for DUMMY.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelSet {
    fn from(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        LabelSet { labels, index }
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(v: LabelSet) -> Self {
        v.labels
    }
}

impl LabelSet {
    /// Every label of the binarized trees, joined unary labels included.
    pub fn from_trees<'a, I: IntoIterator<Item = &'a Tree>>(trees: I) -> Self {
        let mut seen = BTreeSet::new();
        for t in trees {
            binarize(t).for_each_labeled(&mut |_, l, _| {
                if l != DUMMY {
                    seen.insert(l.to_string());
                }
            });
        }
        let mut labels = vec![DUMMY.to_string()];
        labels.extend(seen);
        LabelSet::from(labels)
    }

    /// Number of entries including the no-label one.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.len() <= 1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

// ---------------------------------------------------------------------------

/// Pause-table row used for the two sentinel positions.
const SENTINEL_PAUSE: usize = 6;

/// Embeddings, prosody CNN, input projection and encoder.
#[derive(Debug, Clone)]
pub struct TurnEncoder {
    pub config: ModelConfig,
    words: ParamId,
    pause: Option<ParamId>,
    cnn: Option<ConvBank>,
    proj: Linear,
    encoder: Encoder,
}

impl TurnEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &ModelConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let words = uniform_param(store, &format!("{prefix}.words"), vocab_size, config.word_dim, 0.1, rng);
        let (pause, cnn) = if config.use_prosody {
            let pause = uniform_param(store, &format!("{prefix}.pause"), PauseBin::ALL.len() + 1, config.pause_dim, 0.1, rng);
            let cnn = ConvBank::new(store, &format!("{prefix}.cnn"), FRAME_ROWS, &config.cnn_widths, config.cnn_filters, rng);
            (Some(pause), Some(cnn))
        } else {
            (None, None)
        };
        let proj = Linear::new(store, &format!("{prefix}.proj"), config.input_dim(), config.encoder.d_model, true, rng);
        let encoder = Encoder::new(store, &format!("{prefix}.enc"), &config.encoder, rng);
        TurnEncoder {
            config: config.clone(),
            words,
            pause,
            cnn,
            proj,
            encoder,
        }
    }

    /// Token vectors for `<s> w_1 .. w_n </s>`, one row each.
    pub fn embed(&self, g: &mut Graph, turn: &Turn, vocab: &Vocab) -> Result<NodeId> {
        let n = turn.words.len();
        if n > self.config.encoder.max_len {
            return Err(NumericsError::TooLong {
                len: n,
                max: self.config.encoder.max_len,
            }
            .into());
        }
        let mut ids = Vec::with_capacity(n + SENTINELS);
        ids.push(START);
        ids.extend(turn.words.iter().map(|w| vocab.id(w)));
        ids.push(STOP);
        let table = g.param(self.words);
        let word_vecs = g.gather(table, &ids)?;
        let (Some(pause), Some(cnn)) = (self.pause, &self.cnn) else {
            return Ok(word_vecs);
        };
        if turn.prosody.len() != n {
            return Err(Error::Mismatch(format!(
                "turn {} has {} prosody records for {n} tokens",
                turn.id,
                turn.prosody.len()
            )));
        }
        let w = self.config.window;
        let mut bins = vec![SENTINEL_PAUSE];
        bins.extend(turn.prosody.iter().map(|p| p.pause.index()));
        bins.push(SENTINEL_PAUSE);
        let mut durations = Array2::zeros((n + SENTINELS, 2));
        let mut windows = vec![Array2::zeros((FRAME_ROWS, w))];
        for (k, p) in turn.prosody.iter().enumerate() {
            durations[[k + 1, 0]] = p.duration.by_type_mean;
            durations[[k + 1, 1]] = p.duration.by_unit_max;
            if p.window.dim() != (FRAME_ROWS, w) {
                return Err(Error::Mismatch(format!(
                    "turn {} token {k}: window is {:?}, model expects ({FRAME_ROWS}, {w})",
                    turn.id,
                    p.window.dim()
                )));
            }
            windows.push(p.window.clone());
        }
        windows.push(Array2::zeros((FRAME_ROWS, w)));
        let ptable = g.param(pause);
        let pause_vecs = g.gather(ptable, &bins)?;
        let dur = g.input(durations)?;
        let frames = g.input(flatten_windows(&windows))?;
        let conv = cnn.forward(g, frames, w)?;
        Ok(g.concat_cols(&[word_vecs, pause_vecs, dur, conv])?)
    }

    /// Encoder states, one row per position including the sentinels.
    pub fn encode(&self, g: &mut Graph, turn: &Turn, vocab: &Vocab) -> Result<NodeId> {
        let x = self.embed(g, turn, vocab)?;
        let x = self.proj.forward(g, x)?;
        Ok(self.encoder.forward(g, x)?)
    }
}

/// Fencepost vectors `[fwd_k ; bwd_{k+1}]` for `k = 0..=n`, where the first
/// half of each encoder state reads as forward context and the second half
/// as backward context.
pub fn fenceposts(g: &mut Graph, states: NodeId) -> Result<NodeId> {
    let (rows, d) = g.value(states).dim();
    let n = rows - SENTINELS;
    let half = d / 2;
    let fwd = g.slice_cols(states, 0, half)?;
    let bwd = g.slice_cols(states, half, d)?;
    let f = g.gather(fwd, &(0..=n).collect::<Vec<_>>())?;
    let b = g.gather(bwd, &(1..=n + 1).collect::<Vec<_>>())?;
    Ok(g.concat_cols(&[f, b])?)
}

/// `v(i, j)` for every span in chart order.
pub fn span_vectors(g: &mut Graph, fence: NodeId) -> Result<NodeId> {
    let n = g.value(fence).nrows() - 1;
    Ok(g.row_diff(fence, &spans(n))?)
}

#[derive(Debug, Clone)]
pub struct ParserNet {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub labels: LabelSet,
    enc: TurnEncoder,
    m1: Linear,
    c1: ParamId,
    m2: Linear,
}

impl ParserNet {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, vocab: Vocab, labels: LabelSet, rng: &mut ChaCha8Rng) -> Self {
        let enc = TurnEncoder::new(store, "parser", config, vocab.len(), rng);
        let d = config.encoder.d_model;
        let h = config.label_hidden;
        let m1 = Linear::new(store, "parser.m1", d, h, false, rng);
        let c1 = crate::numerics::layers::const_param(store, "parser.c1", 1, h, 0.0);
        let m2 = Linear::new(store, "parser.m2", h, labels.len() - 1, true, rng);
        ParserNet {
            config: config.clone(),
            vocab,
            labels,
            enc,
            m1,
            c1,
            m2,
        }
    }

    pub fn encoder(&self) -> &TurnEncoder {
        &self.enc
    }

    /// Scores for every span and real label: `M2 relu(LN(M1 v) + c1) + c2`.
    pub fn label_scores(&self, g: &mut Graph, turn: &Turn) -> Result<NodeId> {
        let states = self.enc.encode(g, turn, &self.vocab)?;
        let fence = fenceposts(g, states)?;
        let v = span_vectors(g, fence)?;
        let h = self.m1.forward(g, v)?;
        let h = g.normalize_rows(h)?;
        let c1 = g.param(self.c1);
        let h = g.add_row(h, c1)?;
        let h = g.relu(h)?;
        Ok(self.m2.forward(g, h)?)
    }

    pub fn chart(&self, g: &mut Graph, turn: &Turn) -> Result<(NodeId, ScoreChart)> {
        let scores = self.label_scores(g, turn)?;
        let chart = ScoreChart::from_label_scores(turn.words.len(), g.value(scores))?;
        Ok((scores, chart))
    }

    /// Hinge loss against `gold` as a graph node, or `None` when the margin
    /// already holds.
    pub fn hinge_node(&self, g: &mut Graph, turn: &Turn, gold: &[(usize, usize, usize)]) -> Result<(f64, Option<NodeId>)> {
        let (scores, chart) = self.chart(g, turn)?;
        let (loss, aug) = hinge(&chart, gold, self.config.dummy_penalty)?;
        if loss <= 0.0 {
            return Ok((0.0, None));
        }
        let n = turn.words.len();
        let mut entries = Vec::with_capacity(aug.spans.len() + gold.len());
        for &(i, j, l) in &aug.spans {
            if l != NO_LABEL {
                entries.push((span_index(n, i, j), l - 1, 1.0));
            }
        }
        for &(i, j, l) in gold {
            if l != NO_LABEL {
                entries.push((span_index(n, i, j), l - 1, -1.0));
            }
        }
        let sel = g.select_sum(scores, entries)?;
        let offset = loss - g.scalar(sel);
        let node = g.add_const(sel, offset)?;
        Ok((loss, Some(node)))
    }
}

/// Relabels an unlabeled decoded root, then removes binarization.
pub fn finish_tree(binarized: Tree, root_label: &str) -> Result<Tree> {
    let root = match binarized {
        Tree::Leaf { label, word, index } if label.is_none() || label.as_deref() == Some(DUMMY) => Tree::Leaf {
            label: Some(root_label.to_string()),
            word,
            index,
        },
        Tree::Node { label, span, children } if label == DUMMY => Tree::Node {
            label: root_label.to_string(),
            span,
            children,
        },
        other => other,
    };
    Ok(debinarize(&root)?)
}

/// Trained parameters plus everything needed to use them.
#[derive(Debug, Clone)]
pub struct Parser {
    pub params: ParamStore,
    pub net: ParserNet,
}

#[derive(Serialize, Deserialize)]
struct ParserMeta {
    kind: String,
    config: ModelConfig,
    vocab: Vocab,
    labels: LabelSet,
}

impl Parser {
    pub fn new(config: &ModelConfig, vocab: Vocab, labels: LabelSet, seed: u64) -> Result<Self> {
        config.validate()?;
        if labels.is_empty() {
            return Err(Error::Config("label set has no labels".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ParserNet::new(&mut params, config, vocab, labels, &mut rng);
        Ok(Parser { params, net })
    }

    pub fn chart(&self, turn: &Turn) -> Result<ScoreChart> {
        let mut g = Graph::new(&self.params);
        Ok(self.net.chart(&mut g, turn)?.1)
    }

    /// Best tree with DUMMY nodes removed; an unlabeled root becomes
    /// `root_label`.
    pub fn parse_unit(&self, turn: &Turn, root_label: &str) -> Result<Tree> {
        let chart = self.chart(turn)?;
        let decoded = cky_decode(&chart);
        let bin = decoded.to_tree(&self.net.labels, &turn.words)?;
        finish_tree(bin, root_label)
    }

    /// Parses a whole turn; the result always has a TURN root.
    pub fn parse_turn(&self, turn: &Turn) -> Result<Tree> {
        let tree = self.parse_unit(turn, TURN)?;
        if tree.label() == Some(TURN) {
            Ok(tree)
        } else {
            Ok(Tree::node(TURN, vec![tree])?)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ParserMeta {
            kind: "parser".into(),
            config: self.net.config.clone(),
            vocab: self.net.vocab.clone(),
            labels: self.net.labels.clone(),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.params.write_checkpoint(&mut out, &serde_json::to_string(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let (mut params, meta) = ParamStore::read_checkpoint(&mut input)?;
        let meta: ParserMeta = serde_json::from_str(&meta)?;
        if meta.kind != "parser" {
            return Err(Error::Config(format!("{} holds a {} checkpoint, not a parser", path.display(), meta.kind)));
        }
        let before = params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ParserNet::new(&mut params, &meta.config, meta.vocab, meta.labels, &mut rng);
        if params.len() != before {
            return Err(Error::Config(format!("{} is missing parameters for its configuration", path.display())));
        }
        Ok(Parser { params, net })
    }
}
