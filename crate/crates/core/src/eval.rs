//! Labeled-bracket and SU segmentation scores, the segmentation-conditioned
//! precision analysis and paired bootstrap significance.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::treebank::{extract_sus, labeled_spans, SpanFilter, Tree};
use crate::{Error, Result};

/// Matched, predicted and gold item counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn new(matched: usize, predicted: usize, gold: usize) -> Self {
        Counts { matched, predicted, gold }
    }

    /// Percent; 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn scores(&self) -> Prf {
        Prf {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts::new(self.matched + o.matched, self.predicted + o.predicted, self.gold + o.gold)
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

/// Precision, recall and F1 in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Bracket counts for one turn. TURN, DUMMY, BLANK and preterminals are not
/// counted; EDITED is.
pub fn parse_f1(pred: &Tree, gold: &Tree) -> Result<Counts> {
    if pred.words() != gold.words() {
        return Err(Error::Mismatch(format!(
            "predicted tree has {} tokens, gold has {}; token sequences must match",
            pred.num_words(),
            gold.num_words()
        )));
    }
    let p = labeled_spans(pred, SpanFilter::default());
    let g = labeled_spans(gold, SpanFilter::default());
    Ok(Counts::new(p.matched(&g), p.len(), g.len()))
}

/// Boundary counts for one turn of `n` tokens. Boundaries are token offsets
/// strictly inside the turn.
pub fn seg_f1(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>, n: usize) -> Result<Counts> {
    for b in pred.iter().chain(gold) {
        if *b == 0 || *b >= n {
            return Err(Error::Mismatch(format!("boundary {b} is not turn-medial in a turn of {n} tokens")));
        }
    }
    Ok(Counts::new(pred.intersection(gold).count(), pred.len(), gold.len()))
}

/// Right edges of every SU except the last.
pub fn boundaries_from_tree(tree: &Tree) -> Result<BTreeSet<usize>> {
    let sus = extract_sus(tree)?;
    Ok(sus[..sus.len() - 1].iter().map(|s| s.end).collect())
}

/// Scores of one predicted turn against its gold tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEval {
    pub id: String,
    pub parse: Counts,
    pub seg: Counts,
    /// The predicted boundary set equals the gold one.
    pub seg_correct: bool,
}

pub fn evaluate_turn(id: &str, pred: &Tree, gold: &Tree) -> Result<TurnEval> {
    let parse = parse_f1(pred, gold)?;
    let pb = boundaries_from_tree(pred)?;
    let gb = boundaries_from_tree(gold)?;
    let seg = seg_f1(&pb, &gb, gold.num_words())?;
    Ok(TurnEval {
        id: id.to_string(),
        parse,
        seg,
        seg_correct: pb == gb,
    })
}

/// Micro-averaged scores over a set of turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub parse: Prf,
    pub seg: Prf,
    pub parse_counts: Counts,
    pub seg_counts: Counts,
    pub turns: Vec<TurnEval>,
}

impl EvalReport {
    pub fn from_turns(turns: Vec<TurnEval>) -> Self {
        let parse_counts: Counts = turns.iter().map(|t| t.parse).sum();
        let seg_counts: Counts = turns.iter().map(|t| t.seg).sum();
        EvalReport {
            parse: parse_counts.scores(),
            seg: seg_counts.scores(),
            parse_counts,
            seg_counts,
            turns,
        }
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("turns={}\n", self.turns.len()));
        for (name, p, c) in [("parse", self.parse, self.parse_counts), ("seg", self.seg, self.seg_counts)] {
            out.push_str(&format!("{name}_precision={:.2}\n", p.precision));
            out.push_str(&format!("{name}_recall={:.2}\n", p.recall));
            out.push_str(&format!("{name}_f1={:.2}\n", p.f1));
            out.push_str(&format!("{name}_matched={}\n{name}_predicted={}\n{name}_gold={}\n", c.matched, c.predicted, c.gold));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>10}{:>10}{:>10}", "", "precision", "recall", "F1")?;
        writeln!(f, "{:<14}{:>10.2}{:>10.2}{:>10.2}", "parse", self.parse.precision, self.parse.recall, self.parse.f1)?;
        write!(f, "{:<14}{:>10.2}{:>10.2}{:>10.2}", "segmentation", self.seg.precision, self.seg.recall, self.seg.f1)
    }
}

/// Scores aligned predicted and gold trees.
pub fn evaluate(ids: &[String], preds: &[Tree], golds: &[Tree]) -> Result<EvalReport> {
    if preds.len() != golds.len() || ids.len() != golds.len() {
        return Err(Error::Mismatch(format!(
            "{} predicted trees for {} gold trees",
            preds.len(),
            golds.len()
        )));
    }
    let turns = ids
        .iter()
        .zip(preds.iter().zip(golds))
        .map(|(id, (p, g))| evaluate_turn(id, p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_turns(turns))
}

/// Parse precision over all turns against the turns whose segmentation was
/// wrong. Subset figures are `None` when every turn was segmented correctly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionedPrecision {
    pub overall: f64,
    pub seg_incorrect: Option<f64>,
    pub delta: Option<f64>,
    pub seg_incorrect_turns: usize,
}

pub fn conditioned_precision(turns: &[TurnEval]) -> ConditionedPrecision {
    let overall = turns.iter().map(|t| t.parse).sum::<Counts>().precision();
    let wrong: Vec<&TurnEval> = turns.iter().filter(|t| !t.seg_correct).collect();
    let seg_incorrect = (!wrong.is_empty()).then(|| wrong.iter().map(|t| t.parse).sum::<Counts>().precision());
    ConditionedPrecision {
        overall,
        seg_incorrect,
        delta: seg_incorrect.map(|s| overall - s),
        seg_incorrect_turns: wrong.len(),
    }
}

impl fmt::Display for ConditionedPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.seg_incorrect, self.delta) {
            (Some(s), Some(d)) => write!(
                f,
                "precision all={:.2} seg_incorrect={s:.2} delta={d:.2} ({} turns)",
                self.overall, self.seg_incorrect_turns
            ),
            _ => write!(f, "precision all={:.2} seg_incorrect=undefined (no mis-segmented turns)", self.overall),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    ParseF1,
    SegF1,
}

impl Metric {
    fn counts(self, t: &TurnEval) -> Counts {
        match self {
            Metric::ParseF1 => t.parse,
            Metric::SegF1 => t.seg,
        }
    }
}

pub const DEFAULT_RESAMPLES: usize = 100_000;

/// Observed difference `a - b` and the one-sided p-value: the fraction of
/// resamples whose difference has the opposite sign or is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub delta: f64,
    pub p_value: f64,
    pub resamples: usize,
}

fn check_paired(a: &[TurnEval], b: &[TurnEval]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.id != y.id) {
        return Err(Error::Mismatch("bootstrap needs both systems scored on the same turns, in the same order".into()));
    }
    if a.is_empty() {
        return Err(Error::Data("bootstrap over zero turns".into()));
    }
    Ok(())
}

fn resample_delta(a: &[TurnEval], b: &[TurnEval], metric: Metric, idx: impl Iterator<Item = usize>) -> f64 {
    let (mut ca, mut cb) = (Counts::default(), Counts::default());
    for i in idx {
        ca = ca + metric.counts(&a[i]);
        cb = cb + metric.counts(&b[i]);
    }
    ca.f1() - cb.f1()
}

fn reverses(observed: f64, delta: f64) -> bool {
    // Float noise from summing in a different order must not flip a tie.
    const TIE: f64 = 1e-9;
    if observed > TIE {
        delta <= TIE
    } else if observed < -TIE {
        delta >= -TIE
    } else {
        true
    }
}

/// Paired bootstrap over turns. Resample `r` draws from its own stream of a
/// generator seeded with `seed`, so the result does not depend on threading.
pub fn bootstrap_significance(a: &[TurnEval], b: &[TurnEval], metric: Metric, resamples: usize, seed: u64) -> Result<Significance> {
    check_paired(a, b)?;
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let n = a.len();
    let observed = resample_delta(a, b, metric, 0..n);
    let hits: usize = (0..resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            let d = resample_delta(a, b, metric, (0..n).map(|_| rng.random_range(0..n)));
            usize::from(reverses(observed, d))
        })
        .sum();
    Ok(Significance {
        delta: observed,
        p_value: hits as f64 / resamples as f64,
        resamples,
    })
}

/// The bootstrap p-value computed exactly by enumerating all `n^n` ordered
/// resamples. Only feasible for a handful of turns.
pub fn exact_bootstrap_p(a: &[TurnEval], b: &[TurnEval], metric: Metric) -> Result<f64> {
    check_paired(a, b)?;
    let n = a.len();
    if n > 7 {
        return Err(Error::Config(format!("exhaustive bootstrap over {n} turns is too large")));
    }
    let observed = resample_delta(a, b, metric, 0..n);
    let total = n.pow(n as u32);
    let mut hits = 0usize;
    let mut idx = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for slot in idx.iter_mut() {
            *slot = c % n;
            c /= n;
        }
        if reverses(observed, resample_delta(a, b, metric, idx.iter().copied())) {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
