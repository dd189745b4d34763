//! Turns with their prosody, corpus files, splits and a synthetic corpus
//! generator whose pauses and pitch track SU boundaries to a chosen degree.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::prosody::{
    bin_pause, features_for_turn, load_frame_features, read_transcript, token_windows, transcript_pauses,
    unit_durations, write_frame_features, write_transcript, DurationStats, FeatureKey, FrameFeatures, ProsodyError,
    TimedWord, TokenProsody, TranscriptRow, DEFAULT_CONTEXT, DEFAULT_WINDOW, FRAME_ROWS, FRAME_STEP_S,
};
use crate::treebank::{parse_tree_file, render_tree_file, wrap_turn, Tree, TreeRecord};
use crate::{Error, Result};

/// One speaker turn: tokens, alignment, prosody and the gold tree if known.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub id: String,
    pub dialogue: String,
    pub speaker: String,
    pub words: Vec<String>,
    pub times: Vec<Option<(f64, f64)>>,
    pub pauses: Vec<Option<f64>>,
    pub frames: Vec<FrameFeatures>,
    pub prosody: Vec<TokenProsody>,
    pub gold: Option<Tree>,
}

impl Turn {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn raw_durations(&self) -> Vec<Option<f64>> {
        self.times.iter().map(|t| t.map(|(s, e)| e - s)).collect()
    }

    /// Fills `prosody` from the alignment and frames.
    pub fn featurize(&mut self, stats: &DurationStats, window: usize, context: usize) {
        let words: Vec<&str> = self.words.iter().map(String::as_str).collect();
        let durations = unit_durations(&words, &self.raw_durations(), stats);
        let windows = token_windows(&self.frames, window, context);
        self.prosody = self
            .pauses
            .iter()
            .zip(durations)
            .zip(windows)
            .map(|((p, d), w)| TokenProsody {
                pause: bin_pause(*p),
                duration: d,
                window: w,
            })
            .collect();
    }

    /// Tokens `start..end` as a turn of their own. Duration ratios against
    /// the longest token are recomputed over the new unit; the gold tree is
    /// not carried over.
    pub fn sub_turn(&self, start: usize, end: usize) -> Turn {
        let raw: Vec<Option<f64>> = self.raw_durations()[start..end].to_vec();
        let unit_max = raw.iter().flatten().copied().fold(0.0_f64, f64::max);
        let prosody = self.prosody[start.min(self.prosody.len())..end.min(self.prosody.len())]
            .iter()
            .zip(&raw)
            .map(|(p, d)| {
                let mut p = p.clone();
                p.duration.by_unit_max = match d {
                    Some(d) if unit_max > 0.0 => d.max(0.0) / unit_max,
                    _ => 0.0,
                };
                p
            })
            .collect();
        Turn {
            id: format!("{}:{start}-{end}", self.id),
            dialogue: self.dialogue.clone(),
            speaker: self.speaker.clone(),
            words: self.words[start..end].to_vec(),
            times: self.times[start..end].to_vec(),
            pauses: self.pauses[start..end].to_vec(),
            frames: self.frames[start.min(self.frames.len())..end.min(self.frames.len())].to_vec(),
            prosody,
            gold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Seeded shuffle of `n` items cut into train/dev/test by `fractions`
/// (train and dev; test takes the rest).
pub fn seeded_split(n: usize, seed: u64, fractions: (f64, f64)) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * fractions.0).round() as usize;
    let n_dev = ((n as f64 * fractions.1).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    out
}

pub const DEFAULT_FRACTIONS: (f64, f64) = (0.90, 0.05);
pub const DEFAULT_MAX_LEN: usize = 270;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub turns: Vec<Turn>,
    pub splits: Vec<Split>,
    /// Computed on the training turns only.
    pub durations: DurationStats,
    pub window: usize,
    pub context: usize,
}

impl Corpus {
    /// Computes duration statistics on the training portion and featurizes
    /// every turn.
    pub fn assemble(mut turns: Vec<Turn>, splits: Vec<Split>, window: usize, context: usize) -> Result<Corpus> {
        if turns.len() != splits.len() {
            return Err(Error::Mismatch(format!("{} turns but {} split labels", turns.len(), splits.len())));
        }
        let durations = DurationStats::from_words(
            turns
                .iter()
                .zip(&splits)
                .filter(|(_, s)| **s == Split::Train)
                .flat_map(|(t, _)| t.words.iter().zip(t.raw_durations()))
                .filter_map(|(w, d)| d.map(|d| (w.as_str(), d))),
        );
        for t in &mut turns {
            t.featurize(&durations, window, context);
        }
        Ok(Corpus {
            turns,
            splits,
            durations,
            window,
            context,
        })
    }

    pub fn part(&self, split: Split) -> Vec<&Turn> {
        self.turns.iter().zip(&self.splits).filter(|(_, s)| **s == split).map(|(t, _)| t).collect()
    }

    pub fn train(&self) -> Vec<&Turn> {
        self.part(Split::Train)
    }

    pub fn dev(&self) -> Vec<&Turn> {
        self.part(Split::Dev)
    }

    pub fn test(&self) -> Vec<&Turn> {
        self.part(Split::Test)
    }

    /// Re-splits with a seeded shuffle and refreshes the duration statistics.
    pub fn resplit(self, seed: u64, fractions: (f64, f64)) -> Result<Corpus> {
        let splits = seeded_split(self.turns.len(), seed, fractions);
        Corpus::assemble(self.turns, splits, self.window, self.context)
    }
}

// ---------------------------------------------------------------------------
// Files

#[derive(Debug, Clone)]
pub struct LoadConfig {
    pub max_len: usize,
    pub window: usize,
    pub context: usize,
    /// `turn_id \t train|dev|test` lines; a seeded split is used without one.
    pub manifest: Option<PathBuf>,
    pub seed: u64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            max_len: DEFAULT_MAX_LEN,
            window: DEFAULT_WINDOW,
            context: DEFAULT_CONTEXT,
            manifest: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub dropped_long: Vec<String>,
    pub dropped_missing_features: Vec<String>,
}

/// File names used by `write_corpus` inside its directory.
pub const TREE_FILE: &str = "trees.txt";
pub const TRANSCRIPT_FILE: &str = "transcript.tsv";
pub const FEATURE_FILE: &str = "features.bin";
pub const MANIFEST_FILE: &str = "split.tsv";

pub fn read_manifest(path: &Path) -> Result<HashMap<String, Split>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = HashMap::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}:{}: expected turn_id and split", path.display(), n + 1)))?;
        let split = Split::parse(split.trim())
            .ok_or_else(|| Error::Data(format!("{}:{}: unknown split {split:?}", path.display(), n + 1)))?;
        out.insert(id.to_string(), split);
    }
    Ok(out)
}

/// Joins trees, transcript and features by turn id. Over-length turns and
/// turns with missing frame features are dropped and reported.
pub fn load_corpus(trees: &Path, transcript: &Path, features: &Path, config: &LoadConfig) -> Result<(Corpus, LoadReport)> {
    let records = parse_tree_file(&std::fs::read_to_string(trees)?)?;
    let rows = read_transcript(BufReader::new(std::fs::File::open(transcript)?))?;
    let table = load_frame_features(features)?;
    let pauses = transcript_pauses(&rows)?;

    let mut by_turn: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_turn.entry(&r.turn_id).or_default().push(i);
    }
    let tree_ids: BTreeSet<&str> = records.iter().map(|r| r.turn_id.as_str()).collect();
    let tx_ids: BTreeSet<&str> = by_turn.keys().copied().collect();
    let only_trees: Vec<&str> = tree_ids.difference(&tx_ids).copied().collect();
    let only_tx: Vec<&str> = tx_ids.difference(&tree_ids).copied().collect();
    if !only_trees.is_empty() || !only_tx.is_empty() {
        return Err(Error::Data(format!(
            "turn ids differ between files: only in trees {only_trees:?}, only in transcript {only_tx:?}"
        )));
    }

    let mut report = LoadReport::default();
    let mut turns = Vec::new();
    for rec in records {
        let idx = &by_turn[rec.turn_id.as_str()];
        let words: Vec<String> = idx.iter().map(|&i| rows[i].word.word.clone()).collect();
        let tree_words = rec.tree.words();
        if tree_words != words {
            return Err(Error::Data(format!("turn {}: transcript words differ from tree leaves", rec.turn_id)));
        }
        if words.len() > config.max_len {
            report.dropped_long.push(rec.turn_id);
            continue;
        }
        let frames = match features_for_turn(&table, &rec.turn_id, words.len()) {
            Ok(f) => f,
            Err(ProsodyError::MissingFeatures(_)) => {
                report.dropped_missing_features.push(rec.turn_id);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        turns.push(Turn {
            id: rec.turn_id,
            dialogue: rows[idx[0]].dialogue.clone(),
            speaker: rec.speaker,
            words,
            times: idx.iter().map(|&i| rows[i].word.aligned()).collect(),
            pauses: idx.iter().map(|&i| pauses[i]).collect(),
            frames,
            prosody: Vec::new(),
            gold: Some(rec.tree),
        });
    }
    if !report.dropped_long.is_empty() {
        log::info!("dropped {} turns longer than {} tokens", report.dropped_long.len(), config.max_len);
    }
    if !report.dropped_missing_features.is_empty() {
        log::info!("dropped {} turns with missing frame features", report.dropped_missing_features.len());
    }
    report.loaded = turns.len();

    let splits = match &config.manifest {
        Some(path) => {
            let manifest = read_manifest(path)?;
            turns
                .iter()
                .map(|t| {
                    manifest
                        .get(&t.id)
                        .copied()
                        .ok_or_else(|| Error::Data(format!("turn {} is not in the split manifest", t.id)))
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => seeded_split(turns.len(), config.seed, DEFAULT_FRACTIONS),
    };
    Ok((Corpus::assemble(turns, splits, config.window, config.context)?, report))
}

/// Writes the tree file, transcript, feature file and split manifest into
/// `dir`, returning their paths in that order.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<[PathBuf; 4]> {
    std::fs::create_dir_all(dir)?;
    let paths = [
        dir.join(TREE_FILE),
        dir.join(TRANSCRIPT_FILE),
        dir.join(FEATURE_FILE),
        dir.join(MANIFEST_FILE),
    ];
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut table: BTreeMap<FeatureKey, FrameFeatures> = BTreeMap::new();
    for t in &corpus.turns {
        let tree = t
            .gold
            .clone()
            .ok_or_else(|| Error::Data(format!("turn {} has no tree to write", t.id)))?;
        records.push(TreeRecord {
            turn_id: t.id.clone(),
            speaker: t.speaker.clone(),
            tree,
        });
        for (k, w) in t.words.iter().enumerate() {
            rows.push(TranscriptRow {
                dialogue: t.dialogue.clone(),
                turn_id: t.id.clone(),
                word: TimedWord {
                    speaker: t.speaker.clone(),
                    word: w.clone(),
                    start: t.times[k].map(|x| x.0),
                    end: t.times[k].map(|x| x.1),
                },
            });
        }
        for (k, f) in t.frames.iter().enumerate() {
            table.insert((t.id.clone(), k), f.clone());
        }
    }
    std::fs::write(&paths[0], render_tree_file(&records))?;
    let mut tx = BufWriter::new(std::fs::File::create(&paths[1])?);
    write_transcript(&mut tx, &rows)?;
    tx.flush()?;
    let mut ff = BufWriter::new(std::fs::File::create(&paths[2])?);
    write_frame_features(&mut ff, &table)?;
    ff.flush()?;
    let mut manifest = String::new();
    for (t, s) in corpus.turns.iter().zip(&corpus.splits) {
        manifest.push_str(&format!("{}\t{}\n", t.id, s.name()));
    }
    std::fs::write(&paths[3], manifest)?;
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Synthetic corpora

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub turns: usize,
    pub vocab_size: usize,
    /// Mean SUs per turn; counts are 1 + Binomial(3, p), so 1..=4.
    pub mean_sus: f64,
    /// 0 gives pauses, lengthening and pitch independent of SU boundaries;
    /// 1 ties them to boundaries completely.
    pub correlation: f64,
    pub max_turn_len: usize,
    pub turns_per_dialogue: usize,
    pub window: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            turns: 2000,
            vocab_size: 100,
            mean_sus: 1.82,
            correlation: 0.9,
            max_turn_len: 20,
            turns_per_dialogue: 10,
            window: 20,
            context: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pos {
    Uh,
    Cc,
    Rb,
    D,
    P,
    N,
    V,
}

impl Pos {
    const ALL: [Pos; 7] = [Pos::Uh, Pos::Cc, Pos::Rb, Pos::D, Pos::P, Pos::N, Pos::V];

    fn tag(self) -> &'static str {
        match self {
            Pos::Uh => "UH",
            Pos::Cc => "CC",
            Pos::Rb => "RB",
            Pos::D => "D",
            Pos::P => "P",
            Pos::N => "N",
            Pos::V => "V",
        }
    }
}

/// Words of each part of speech with a typical duration per word.
struct Lexicon {
    words: Vec<Vec<(String, f64)>>,
}

impl Lexicon {
    fn new(size: usize, rng: &mut ChaCha8Rng) -> Result<Lexicon> {
        if size < Pos::ALL.len() {
            return Err(Error::Config(format!(
                "vocabulary of {size} cannot give each of the {} preterminals a word",
                Pos::ALL.len()
            )));
        }
        let small = [20, 30, 20, 15, 12].map(|d| (size / d).max(1));
        let rest = size - small.iter().sum::<usize>();
        let v = (rest * 2 / 5).max(1);
        let counts = [small[0], small[1], small[2], small[3], small[4], rest - v, v];
        let words = Pos::ALL
            .iter()
            .zip(counts)
            .map(|(pos, count)| {
                let stem = pos.tag().to_lowercase();
                (0..count).map(|i| (format!("{stem}{i}"), rng.random_range(0.12..0.35))).collect()
            })
            .collect();
        Ok(Lexicon { words })
    }

    fn pick(&self, pos: Pos, rng: &mut ChaCha8Rng) -> (String, f64) {
        let list = &self.words[pos as usize];
        list[rng.random_range(0..list.len())].clone()
    }
}

/// A token of a generated SU, before indices are known.
struct Draft {
    tag: &'static str,
    word: String,
    base_duration: f64,
}

enum Shape {
    Leaf(usize),
    Node(&'static str, Vec<Shape>),
}

/// A toy conversational grammar. SUs are statements, statements opened by
/// an interjection, flat fragment sequences labeled S (as transcribers do
/// for incomplete sentences), and bare INTJ, NP, VP or ADVP fragments.
struct Grammar<'a> {
    lex: &'a Lexicon,
    tokens: Vec<Draft>,
}

impl Grammar<'_> {
    fn emit(&mut self, pos: Pos, rng: &mut ChaCha8Rng) -> Shape {
        let (word, base_duration) = self.lex.pick(pos, rng);
        self.tokens.push(Draft {
            tag: pos.tag(),
            word,
            base_duration,
        });
        Shape::Leaf(self.tokens.len() - 1)
    }

    fn unary(&mut self, label: &'static str, pos: Pos, rng: &mut ChaCha8Rng) -> Shape {
        let leaf = self.emit(pos, rng);
        Shape::Node(label, vec![leaf])
    }

    fn np(&mut self, depth: usize, rng: &mut ChaCha8Rng) -> Shape {
        let r: f64 = rng.random();
        if depth == 0 && r < 0.15 {
            let inner = self.np(depth + 1, rng);
            let pp = self.pp(depth + 1, rng);
            return Shape::Node("NP", vec![inner, pp]);
        }
        if r < 0.55 {
            let d = self.emit(Pos::D, rng);
            let n = self.emit(Pos::N, rng);
            Shape::Node("NP", vec![d, n])
        } else {
            self.unary("NP", Pos::N, rng)
        }
    }

    fn pp(&mut self, depth: usize, rng: &mut ChaCha8Rng) -> Shape {
        let p = self.emit(Pos::P, rng);
        let np = self.np(depth + 1, rng);
        Shape::Node("PP", vec![p, np])
    }

    fn vp(&mut self, rng: &mut ChaCha8Rng) -> Shape {
        let r: f64 = rng.random();
        let v = self.emit(Pos::V, rng);
        if r < 0.3 {
            Shape::Node("VP", vec![v])
        } else if r < 0.85 {
            let np = self.np(0, rng);
            Shape::Node("VP", vec![v, np])
        } else {
            let np = self.np(1, rng);
            let pp = self.pp(1, rng);
            Shape::Node("VP", vec![v, np, pp])
        }
    }

    fn fragment(&mut self, rng: &mut ChaCha8Rng) -> Shape {
        match rng.random_range(0..3) {
            0 => self.np(1, rng),
            1 => self.unary("ADVP", Pos::Rb, rng),
            _ => self.unary("INTJ", Pos::Uh, rng),
        }
    }

    fn su(&mut self, rng: &mut ChaCha8Rng) -> Shape {
        let r: f64 = rng.random();
        if r < 0.35 {
            let np = self.np(0, rng);
            let vp = self.vp(rng);
            Shape::Node("S", vec![np, vp])
        } else if r < 0.43 {
            let cc = self.emit(Pos::Cc, rng);
            let np = self.np(0, rng);
            let vp = self.vp(rng);
            Shape::Node("S", vec![cc, np, vp])
        } else if r < 0.50 {
            let intj = self.unary("INTJ", Pos::Uh, rng);
            let np = self.np(0, rng);
            let vp = self.vp(rng);
            Shape::Node("S", vec![intj, np, vp])
        } else if r < 0.60 {
            let mut kids = Vec::with_capacity(3);
            if rng.random_bool(0.5) {
                kids.push(self.emit(Pos::Cc, rng));
            }
            kids.push(self.fragment(rng));
            kids.push(self.fragment(rng));
            Shape::Node("S", kids)
        } else if r < 0.75 {
            self.unary("INTJ", Pos::Uh, rng)
        } else if r < 0.85 {
            self.np(0, rng)
        } else if r < 0.95 {
            self.vp(rng)
        } else {
            self.unary("ADVP", Pos::Rb, rng)
        }
    }
}

fn realize(shape: &Shape, tokens: &[Draft], offset: usize) -> Tree {
    match shape {
        Shape::Leaf(i) => Tree::leaf(Some(tokens[*i].tag), &tokens[*i].word, offset + i).expect("generated tokens are valid"),
        Shape::Node(label, kids) => {
            Tree::node(label, kids.iter().map(|k| realize(k, tokens, offset)).collect()).expect("generated trees are valid")
        }
    }
}

/// Share of tokens carrying a final-like cue when cues ignore boundaries.
const CUE_RATE: f64 = 0.25;

/// A faithful token's cue marks exactly the SU-final tokens; otherwise it
/// fires at the boundary-blind rate.
fn sample_cue(boundary: bool, faithful: bool, rng: &mut ChaCha8Rng) -> bool {
    if faithful {
        boundary
    } else {
        rng.random::<f64>() < CUE_RATE
    }
}

/// Pause drawn for a token: long at boundaries and short elsewhere for a
/// faithful token, otherwise from a boundary-blind distribution.
fn sample_pause(boundary: bool, faithful: bool, rng: &mut ChaCha8Rng) -> f64 {
    // Bin ranges stay clear of the bin edges so float error cannot move them.
    let draw = |bin: usize, rng: &mut ChaCha8Rng| match bin {
        0 => rng.random_range(1.05..1.6),
        1 => rng.random_range(0.25..0.95),
        2 => rng.random_range(0.06..0.19),
        3 => rng.random_range(0.005..0.045),
        _ => rng.random_range(-0.05..-0.005),
    };
    if faithful {
        let bin = if boundary { rng.random_range(0..2) } else { rng.random_range(3..5) };
        return draw(bin, rng);
    }
    // Long pauses inside SUs are the exception in conversation.
    const MARGINAL: [f64; 5] = [0.04, 0.08, 0.28, 0.36, 0.24];
    let mut u: f64 = rng.random();
    for (bin, p) in MARGINAL.iter().enumerate() {
        if u < *p {
            return draw(bin, rng);
        }
        u -= p;
    }
    draw(4, rng)
}

fn sample_frames(frames: usize, falling: bool, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> FrameFeatures {
    let shift = if falling { 1.0 } else { 0.0 };
    let mut m = Array2::<f32>::zeros((FRAME_ROWS, frames));
    let mut pitch = 0.3 * noise.sample(rng);
    for k in 0..frames {
        let ramp = (k + 1) as f64 / frames as f64;
        let prev = pitch;
        pitch = 0.8 * pitch + 0.2 * noise.sample(rng);
        let values = [
            0.5 + 0.1 * noise.sample(rng),
            pitch - shift * ramp,
            pitch - prev,
            0.6 + 0.2 * noise.sample(rng) - 0.5 * shift * ramp,
            0.2 * noise.sample(rng),
            0.2 * noise.sample(rng),
        ];
        for (r, v) in values.iter().enumerate() {
            m[[r, k]] = *v as f32;
        }
    }
    FrameFeatures::new(m).expect("six rows")
}

/// Samples a corpus from a small grammar of statements, interjections and
/// NP/VP fragments. Turns alternate between two speakers within dialogues.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&config.correlation) {
        return Err(Error::Config(format!("correlation {} is outside [0, 1]", config.correlation)));
    }
    if !(1.0..=4.0).contains(&config.mean_sus) {
        return Err(Error::Config(format!("mean SU count {} is outside [1, 4]", config.mean_sus)));
    }
    if config.turns_per_dialogue == 0 {
        return Err(Error::Config("turns per dialogue must be positive".into()));
    }
    if config.max_turn_len < 4 {
        // Four one-token SUs must fit.
        return Err(Error::Config(format!("maximum turn length {} is below 4", config.max_turn_len)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lex = Lexicon::new(config.vocab_size, &mut rng)?;
    let su_count = Binomial::new(3, (config.mean_sus - 1.0) / 3.0).map_err(|e| Error::Config(e.to_string()))?;
    let noise: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");

    let mut turns = Vec::with_capacity(config.turns);
    let mut rows: Vec<TranscriptRow> = Vec::new();
    let mut clock = 0.0;
    for t in 0..config.turns {
        let dialogue = format!("d{:04}", t / config.turns_per_dialogue);
        if t % config.turns_per_dialogue == 0 {
            clock = 0.0;
        }
        let speaker = if (t % config.turns_per_dialogue).is_multiple_of(2) { "A" } else { "B" };
        // Only the SUs are redrawn when a turn is too long, so the count
        // distribution is exactly the configured one.
        let count = 1 + su_count.sample(&mut rng) as usize;
        let (tokens, sus) = loop {
            let mut g = Grammar { lex: &lex, tokens: Vec::new() };
            let mut shapes = Vec::with_capacity(count);
            let mut ends = Vec::with_capacity(count);
            for _ in 0..count {
                shapes.push(g.su(&mut rng));
                ends.push(g.tokens.len());
            }
            if g.tokens.len() <= config.max_turn_len {
                break (g.tokens, (shapes, ends));
            }
        };
        let (shapes, ends) = sus;
        let su_trees: Vec<Tree> = shapes.iter().map(|s| realize(s, &tokens, 0)).collect();
        let gold = wrap_turn(su_trees)?;
        let id = format!("{dialogue}_t{:03}", t % config.turns_per_dialogue);

        let mut times = Vec::with_capacity(tokens.len());
        let mut frames = Vec::with_capacity(tokens.len());
        for (k, tok) in tokens.iter().enumerate() {
            let boundary = ends.contains(&(k + 1));
            // One draw per token, so a token's cues agree or are all blind.
            let faithful = rng.random::<f64>() < config.correlation;
            let lengthen = if sample_cue(boundary, faithful, &mut rng) { 1.5 } else { 1.0 };
            let jitter: f64 = (1.0 + 0.15 * noise.sample(&mut rng)).clamp(0.6, 1.4);
            let dur = (tok.base_duration * lengthen * jitter).max(0.08);
            let start = clock;
            let end = start + dur;
            times.push(Some((start, end)));
            let f = ((dur / FRAME_STEP_S).round() as usize).max(1);
            let falling = sample_cue(boundary, faithful, &mut rng);
            frames.push(sample_frames(f, falling, &noise, &mut rng));
            clock = end + sample_pause(boundary, faithful, &mut rng);
            rows.push(TranscriptRow {
                dialogue: dialogue.clone(),
                turn_id: id.clone(),
                word: TimedWord {
                    speaker: speaker.to_string(),
                    word: tok.word.clone(),
                    start: Some(start),
                    end: Some(end),
                },
            });
        }
        turns.push(Turn {
            id,
            dialogue,
            speaker: speaker.to_string(),
            words: tokens.iter().map(|d| d.word.clone()).collect(),
            times,
            pauses: Vec::new(),
            frames,
            prosody: Vec::new(),
            gold: Some(gold),
        });
    }
    // Pauses come from the merged transcript, exactly as when loading files.
    let pauses = transcript_pauses(&rows)?;
    let mut next = 0;
    for t in &mut turns {
        t.pauses = pauses[next..next + t.len()].to_vec();
        next += t.len();
    }
    let splits = seeded_split(turns.len(), config.seed ^ 0x5eed, DEFAULT_FRACTIONS);
    Corpus::assemble(turns, splits, config.window, config.context)
}
