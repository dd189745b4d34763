//! Token-level prosodic inputs: pause bins, normalized durations and
//! fixed-width pitch/intensity frame windows.
//!
//! Frame features arrive precomputed (25 ms frames every 10 ms). Each frame
//! carries six values: warped NCCF, POV-weighted mean-subtracted log-pitch,
//! log-pitch derivative, speaker-normalized log total energy, and the
//! lower/upper mel-band log energy ratios.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows per frame: three pitch and three intensity features.
pub const FRAME_ROWS: usize = 6;
pub const FRAME_STEP_S: f64 = 0.010;
pub const FRAME_WIDTH_S: f64 = 0.025;
pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_CONTEXT: usize = 5;

const FEATURE_MAGIC: &[u8; 4] = b"PRFF";
const FEATURE_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ProsodyError {
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing frame features for {0:?}")]
    MissingFeatures(Vec<(String, usize)>),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ProsodyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PauseBin {
    /// p > 1 s
    Gt1,
    /// 0.2 < p <= 1
    P02To1,
    /// 0.05 < p <= 0.2
    P005To02,
    /// 0 < p <= 0.05
    P0To005,
    /// p <= 0, including overlaps
    Leq0,
    /// no time alignment
    Missing,
}

impl PauseBin {
    pub const ALL: [PauseBin; 6] = [
        PauseBin::Gt1,
        PauseBin::P02To1,
        PauseBin::P005To02,
        PauseBin::P0To005,
        PauseBin::Leq0,
        PauseBin::Missing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Long pauses, the kind expected at SU boundaries.
    pub fn is_long(self) -> bool {
        matches!(self, PauseBin::Gt1 | PauseBin::P02To1)
    }
}

pub fn bin_pause(pause: Option<f64>) -> PauseBin {
    match pause {
        None => PauseBin::Missing,
        Some(p) if p.is_nan() => PauseBin::Missing,
        Some(p) if p > 1.0 => PauseBin::Gt1,
        Some(p) if p > 0.2 => PauseBin::P02To1,
        Some(p) if p > 0.05 => PauseBin::P005To02,
        Some(p) if p > 0.0 => PauseBin::P0To005,
        Some(_) => PauseBin::Leq0,
    }
}

/// One word of a time-aligned transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedWord {
    pub speaker: String,
    pub word: String,
    pub start: Option<f64>,
    pub end: Option<f64>,
}

impl TimedWord {
    pub fn aligned(&self) -> Option<(f64, f64)> {
        self.start.zip(self.end)
    }

    pub fn duration(&self) -> Option<f64> {
        self.aligned().map(|(s, e)| e - s)
    }
}

/// Pause after each word: the gap to the next word of either speaker.
/// Overlapping speech gives negative pauses; unaligned words and the last
/// word of the dialogue get `None`.
pub fn compute_pauses(dialogue: &[TimedWord]) -> Result<Vec<Option<f64>>> {
    for w in dialogue {
        if let Some((s, e)) = w.aligned() {
            if e < s || !s.is_finite() || !e.is_finite() {
                return Err(ProsodyError::Data(format!(
                    "word {:?} of speaker {} ends at {e} before it starts at {s}",
                    w.word, w.speaker
                )));
            }
        }
    }
    let mut order: Vec<usize> = (0..dialogue.len()).filter(|&i| dialogue[i].aligned().is_some()).collect();
    order.sort_by(|&a, &b| dialogue[a].start.unwrap().total_cmp(&dialogue[b].start.unwrap()).then(a.cmp(&b)));
    let mut pauses = vec![None; dialogue.len()];
    for pair in order.windows(2) {
        let (cur, next) = (pair[0], pair[1]);
        pauses[cur] = Some(dialogue[next].start.unwrap() - dialogue[cur].end.unwrap());
    }
    Ok(pauses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationPair {
    pub by_type_mean: f64,
    pub by_unit_max: f64,
}

/// Mean token duration per word type, with a global fallback for unseen types.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub type_means: BTreeMap<String, f64>,
    pub global_mean: f64,
}

impl DurationStats {
    pub fn from_words<'a, I>(words: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let (mut total, mut count) = (0.0, 0usize);
        for (w, d) in words {
            let e = acc.entry(w.to_string()).or_insert((0.0, 0));
            e.0 += d;
            e.1 += 1;
            total += d;
            count += 1;
        }
        let type_means = acc
            .into_iter()
            .filter(|(_, (sum, _))| *sum > 0.0)
            .map(|(w, (sum, n))| (w, sum / n as f64))
            .collect();
        DurationStats {
            type_means,
            global_mean: if count > 0 && total > 0.0 { total / count as f64 } else { 1.0 },
        }
    }

    pub fn mean_for(&self, word: &str) -> f64 {
        self.type_means.get(word).copied().unwrap_or(self.global_mean)
    }
}

/// Raw duration divided by the word type's mean and by the longest token in
/// the input unit.
pub fn normalize_duration(raw: f64, type_mean: f64, unit_max: f64) -> DurationPair {
    let ratio = |d: f64| if d > 0.0 { raw.max(0.0) / d } else { 0.0 };
    DurationPair {
        by_type_mean: ratio(type_mean),
        by_unit_max: ratio(unit_max),
    }
}

/// Duration pairs for every token of one input unit (turn or SU).
pub fn unit_durations(words: &[&str], raw: &[Option<f64>], stats: &DurationStats) -> Vec<DurationPair> {
    let unit_max = raw.iter().flatten().copied().fold(0.0_f64, f64::max);
    words
        .iter()
        .zip(raw)
        .map(|(w, d)| match d {
            Some(d) => normalize_duration(*d, stats.mean_for(w), unit_max),
            None => DurationPair {
                by_type_mean: 0.0,
                by_unit_max: 0.0,
            },
        })
        .collect()
}

/// Frame-level features of one token: a 6 x f matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures(Array2<f32>);

impl FrameFeatures {
    pub fn new(matrix: Array2<f32>) -> Result<Self> {
        if matrix.nrows() != FRAME_ROWS {
            return Err(ProsodyError::Format(format!(
                "frame features need {FRAME_ROWS} rows, got {}",
                matrix.nrows()
            )));
        }
        Ok(FrameFeatures(matrix))
    }

    pub fn empty() -> Self {
        FrameFeatures(Array2::zeros((FRAME_ROWS, 0)))
    }

    pub fn frames(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }
}

/// Fits a token's frames into exactly `width` columns. Short tokens borrow
/// frames from the neighboring context, then get zero padding split evenly;
/// long tokens are subsampled at evenly spaced indices that keep the first
/// and last frame.
pub fn frame_window(
    frames: ArrayView2<'_, f32>,
    left_context: ArrayView2<'_, f32>,
    right_context: ArrayView2<'_, f32>,
    width: usize,
) -> Array2<f64> {
    assert!(width > 0, "window width must be positive");
    let rows = frames.nrows();
    let f = frames.ncols();
    let mut out = Array2::<f64>::zeros((rows, width));
    if f >= width {
        for (k, idx) in subsample_indices(f, width).into_iter().enumerate() {
            out.column_mut(k).assign(&frames.column(idx).mapv(f64::from));
        }
        return out;
    }
    let need = width - f;
    let mut take_left = (need / 2).min(left_context.ncols());
    let take_right = (need - take_left).min(right_context.ncols());
    take_left = (need - take_right).min(left_context.ncols());
    let filled = take_left + f + take_right;
    let pad_left = (width - filled) / 2;
    let mut col = pad_left;
    let lc = left_context.ncols();
    for c in (lc - take_left)..lc {
        out.column_mut(col).assign(&left_context.column(c).mapv(f64::from));
        col += 1;
    }
    for c in 0..f {
        out.column_mut(col).assign(&frames.column(c).mapv(f64::from));
        col += 1;
    }
    for c in 0..take_right {
        out.column_mut(col).assign(&right_context.column(c).mapv(f64::from));
        col += 1;
    }
    out
}

/// `width` evenly spaced indices into `0..frames`, first and last included.
pub fn subsample_indices(frames: usize, width: usize) -> Vec<usize> {
    debug_assert!(frames >= width && width > 0);
    if width == 1 {
        return vec![0];
    }
    (0..width)
        .map(|k| ((k * (frames - 1)) as f64 / (width - 1) as f64).round() as usize)
        .collect()
}

/// Windows for every token in a unit, each with up to `context` frames of
/// neighboring speech on either side.
pub fn token_windows(frames: &[FrameFeatures], width: usize, context: usize) -> Vec<Array2<f64>> {
    (0..frames.len())
        .map(|i| {
            let empty = Array2::<f32>::zeros((FRAME_ROWS, 0));
            let left = if i > 0 {
                let p = frames[i - 1].view();
                let n = p.ncols();
                p.slice(s![.., n - context.min(n)..]).to_owned()
            } else {
                empty.clone()
            };
            let right = if i + 1 < frames.len() {
                let p = frames[i + 1].view();
                p.slice(s![.., ..context.min(p.ncols())]).to_owned()
            } else {
                empty
            };
            frame_window(frames[i].view(), left.view(), right.view(), width)
        })
        .collect()
}

/// Per-token model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProsody {
    pub pause: PauseBin,
    pub duration: DurationPair,
    /// 6 x W window, W fixed per corpus.
    pub window: Array2<f64>,
}

// ---------------------------------------------------------------------------
// Frame-feature files
//
// Layout: the 4-byte magic `PRFF`, a version byte and `\n`, then one record
// per token: `turn_id \t token_index \t f \t` in ASCII, 6*f little-endian
// f32 values in row-major order, and a closing `\n`.

pub type FeatureKey = (String, usize);

pub fn write_frame_features<W: Write>(out: &mut W, table: &BTreeMap<FeatureKey, FrameFeatures>) -> Result<()> {
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&[FEATURE_VERSION, b'\n'])?;
    for ((turn, idx), feats) in table {
        if turn.contains(['\t', '\n']) {
            return Err(ProsodyError::Format(format!("turn id {turn:?} contains a tab or newline")));
        }
        write!(out, "{turn}\t{idx}\t{}\t", feats.frames())?;
        for v in feats.0.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_frame_features<R: BufRead>(input: &mut R) -> Result<BTreeMap<FeatureKey, FrameFeatures>> {
    let mut header = [0u8; 6];
    input
        .read_exact(&mut header)
        .map_err(|_| ProsodyError::Format("truncated header".into()))?;
    if &header[..4] != FEATURE_MAGIC || header[5] != b'\n' {
        return Err(ProsodyError::Format("bad magic header".into()));
    }
    if header[4] != FEATURE_VERSION {
        return Err(ProsodyError::Format(format!("unsupported version {}", header[4])));
    }
    let mut table = BTreeMap::new();
    let mut record = 0usize;
    loop {
        let mut fields = Vec::with_capacity(3);
        for k in 0..3 {
            let mut buf = Vec::new();
            let n = input.read_until(b'\t', &mut buf)?;
            if n == 0 && k == 0 {
                return Ok(table);
            }
            if buf.last() != Some(&b'\t') {
                return Err(ProsodyError::Format(format!("record {record}: truncated prefix")));
            }
            buf.pop();
            let text = String::from_utf8(buf).map_err(|_| ProsodyError::Format(format!("record {record}: not UTF-8")))?;
            fields.push(text);
        }
        let idx: usize = fields[1]
            .parse()
            .map_err(|_| ProsodyError::Format(format!("record {record}: bad token index {:?}", fields[1])))?;
        let f: usize = fields[2]
            .parse()
            .map_err(|_| ProsodyError::Format(format!("record {record}: bad frame count {:?}", fields[2])))?;
        let mut payload = vec![0u8; FRAME_ROWS * f * 4];
        input
            .read_exact(&mut payload)
            .map_err(|_| ProsodyError::Format(format!("record {record}: truncated payload")))?;
        let mut nl = [0u8; 1];
        input.read_exact(&mut nl)?;
        if nl[0] != b'\n' {
            return Err(ProsodyError::Format(format!(
                "record {record}: payload size does not match {FRAME_ROWS} rows x {f} frames"
            )));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProsodyError::Data(format!("record {record}: non-finite frame value")));
        }
        let matrix = Array2::from_shape_vec((FRAME_ROWS, f), values).expect("payload length checked");
        table.insert((fields.remove(0), idx), FrameFeatures(matrix));
        record += 1;
    }
}

/// Loads a frame-feature file into a map keyed by (turn_id, token_index).
pub fn load_frame_features(path: &std::path::Path) -> Result<BTreeMap<FeatureKey, FrameFeatures>> {
    let file = std::fs::File::open(path)?;
    read_frame_features(&mut io::BufReader::new(file))
}

/// Looks up the features of `count` tokens of `turn`, reporting every
/// missing key at once.
pub fn features_for_turn(
    table: &BTreeMap<FeatureKey, FrameFeatures>,
    turn: &str,
    count: usize,
) -> Result<Vec<FrameFeatures>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        match table.get(&(turn.to_string(), i)) {
            Some(f) => out.push(f.clone()),
            None => missing.push((turn.to_string(), i)),
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(ProsodyError::MissingFeatures(missing))
    }
}

// ---------------------------------------------------------------------------
// Transcript files: `dialogue \t turn_id \t speaker \t word \t start_s \t end_s`
// in temporal order, `NA` for a missing time.

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptRow {
    pub dialogue: String,
    pub turn_id: String,
    pub word: TimedWord,
}

fn parse_time(field: &str, line: usize) -> Result<Option<f64>> {
    if field == "NA" {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| ProsodyError::Format(format!("line {line}: bad time {field:?}")))
}

pub fn read_transcript<R: BufRead>(input: R) -> Result<Vec<TranscriptRow>> {
    let mut rows = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(ProsodyError::Format(format!("line {}: expected 6 tab-separated columns", n + 1)));
        }
        rows.push(TranscriptRow {
            dialogue: cols[0].to_string(),
            turn_id: cols[1].to_string(),
            word: TimedWord {
                speaker: cols[2].to_string(),
                word: cols[3].to_string(),
                start: parse_time(cols[4], n + 1)?,
                end: parse_time(cols[5], n + 1)?,
            },
        });
    }
    Ok(rows)
}

pub fn write_transcript<W: Write>(out: &mut W, rows: &[TranscriptRow]) -> Result<()> {
    let time = |t: Option<f64>| t.map_or_else(|| "NA".to_string(), |v| v.to_string());
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.dialogue,
            r.turn_id,
            r.word.speaker,
            r.word.word,
            time(r.word.start),
            time(r.word.end)
        )?;
    }
    Ok(())
}

/// Pauses for every row, computed per dialogue over both speakers.
pub fn transcript_pauses(rows: &[TranscriptRow]) -> Result<Vec<Option<f64>>> {
    let mut by_dialogue: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_dialogue.entry(&r.dialogue).or_default().push(i);
    }
    let mut pauses = vec![None; rows.len()];
    for idx in by_dialogue.values() {
        let words: Vec<TimedWord> = idx.iter().map(|&i| rows[i].word.clone()).collect();
        for (i, p) in idx.iter().zip(compute_pauses(&words)?) {
            pauses[*i] = p;
        }
    }
    Ok(pauses)
}
