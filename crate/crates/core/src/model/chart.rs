//! Span score charts, CKY decoding and the loss-augmented variant.

use std::collections::HashSet;

use ndarray::Array2;

use super::LabelSet;
use crate::treebank::{binarize, Span, Tree, DUMMY};
use crate::{Error, Result};

/// Index of the reserved no-label entry, which doubles as DUMMY.
pub const NO_LABEL: usize = 0;

/// Row of span `(i, j)` in a chart over `n` tokens; spans are ordered by
/// start, then end.
pub fn span_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j <= n);
    i * n - i * i.saturating_sub(1) / 2 + (j - i - 1)
}

/// All spans `(i, j)` with `0 <= i < j <= n`, in chart row order.
pub fn spans(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..=n).map(move |j| (i, j))).collect()
}

pub fn num_spans(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Label scores for every span; column 0 is the no-label entry and is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreChart {
    n: usize,
    scores: Array2<f64>,
}

impl ScoreChart {
    /// `scores` holds one row per span and one column per real label; the
    /// fixed no-label column is prepended here.
    pub fn from_label_scores(n: usize, scores: &Array2<f64>) -> Result<Self> {
        if scores.nrows() != num_spans(n) {
            return Err(Error::Mismatch(format!(
                "{} score rows for {} spans over {n} tokens",
                scores.nrows(),
                num_spans(n)
            )));
        }
        let mut full = Array2::zeros((scores.nrows(), scores.ncols() + 1));
        full.slice_mut(ndarray::s![.., 1..]).assign(scores);
        Ok(ScoreChart { n, scores: full })
    }

    /// A chart whose columns already include the no-label entry.
    pub fn from_full(n: usize, scores: Array2<f64>) -> Result<Self> {
        if scores.nrows() != num_spans(n) || scores.ncols() == 0 {
            return Err(Error::Mismatch(format!("chart of shape {:?} for {n} tokens", scores.dim())));
        }
        Ok(ScoreChart { n, scores })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Label-set size plus the no-label entry.
    pub fn num_labels(&self) -> usize {
        self.scores.ncols()
    }

    pub fn score(&self, i: usize, j: usize, label: usize) -> f64 {
        self.scores[[span_index(self.n, i, j), label]]
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    fn row_mut(&mut self, i: usize, j: usize) -> ndarray::ArrayViewMut1<'_, f64> {
        let r = span_index(self.n, i, j);
        self.scores.row_mut(r)
    }
}

/// A binarized bracketing as `(i, j, label)` triples in pre-order.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub score: f64,
    pub spans: Vec<(usize, usize, usize)>,
}

impl Decoded {
    /// Builds the binarized tree, naming labels through `labels`.
    pub fn to_tree(&self, labels: &LabelSet, words: &[String]) -> Result<Tree> {
        let mut it = self.spans.iter().copied();
        let tree = build(&mut it, labels, words)?;
        Ok(tree)
    }
}

fn build(it: &mut impl Iterator<Item = (usize, usize, usize)>, labels: &LabelSet, words: &[String]) -> Result<Tree> {
    let (i, j, l) = it.next().ok_or_else(|| Error::Mismatch("truncated bracketing".into()))?;
    let name = labels.name(l);
    if j - i == 1 {
        let label = (l != NO_LABEL).then_some(name);
        return Ok(Tree::leaf(label, &words[i], i)?);
    }
    let left = build(it, labels, words)?;
    let right = build(it, labels, words)?;
    let span = Span::new(i, j);
    Ok(Tree::Node {
        label: name.to_string(),
        span,
        children: vec![left, right],
    })
}

/// Highest-scoring binary tree: each span takes its best label, and the
/// best split of its interior. Ties go to the smallest split point, then
/// the lowest label index.
pub fn cky_decode(chart: &ScoreChart) -> Decoded {
    let n = chart.n;
    let m = num_spans(n);
    let mut best = vec![0.0; m];
    let mut label = vec![0usize; m];
    let mut split = vec![0usize; m];
    for len in 1..=n {
        for i in 0..=n - len {
            let j = i + len;
            let r = span_index(n, i, j);
            let row = chart.scores.row(r);
            let mut bl = 0;
            for l in 1..row.len() {
                if row[l] > row[bl] {
                    bl = l;
                }
            }
            let mut total = row[bl];
            if len > 1 {
                let mut bk = i + 1;
                let mut bs = f64::NEG_INFINITY;
                for k in i + 1..j {
                    let s = best[span_index(n, i, k)] + best[span_index(n, k, j)];
                    if s > bs {
                        bs = s;
                        bk = k;
                    }
                }
                split[r] = bk;
                total += bs;
            }
            best[r] = total;
            label[r] = bl;
        }
    }
    let mut spans_out = Vec::with_capacity(2 * n);
    let mut stack = vec![(0, n)];
    while let Some((i, j)) = stack.pop() {
        let r = span_index(n, i, j);
        spans_out.push((i, j, label[r]));
        if j - i > 1 {
            stack.push((split[r], j));
            stack.push((i, split[r]));
        }
    }
    Decoded {
        score: if n == 0 { 0.0 } else { best[span_index(n, 0, n)] },
        spans: spans_out,
    }
}

/// The `(i, j, label)` triples of `tree` after binarization. Bare tokens
/// and DUMMY nodes take the no-label index.
pub fn tree_spans(tree: &Tree, labels: &LabelSet) -> Result<Vec<(usize, usize, usize)>> {
    let bin = binarize(tree);
    let mut out = Vec::new();
    collect(&bin, labels, &mut out)?;
    Ok(out)
}

fn collect(tree: &Tree, labels: &LabelSet, out: &mut Vec<(usize, usize, usize)>) -> Result<()> {
    let s = tree.span();
    let l = match tree.label() {
        None => NO_LABEL,
        Some(name) => labels
            .index(name)
            .ok_or_else(|| Error::Mismatch(format!("label {name} is not in the label set")))?,
    };
    out.push((s.start, s.end, l));
    for c in tree.children() {
        collect(c, labels, out)?;
    }
    Ok(())
}

/// Sum of the chart's label scores over the tree's constituents.
pub fn tree_score(tree: &Tree, chart: &ScoreChart, labels: &LabelSet) -> Result<f64> {
    let spans = tree_spans(tree, labels)?;
    spans_score(&spans, chart)
}

pub fn spans_score(spans: &[(usize, usize, usize)], chart: &ScoreChart) -> Result<f64> {
    let mut total = 0.0;
    for &(i, j, l) in spans {
        if j > chart.n || i >= j || l >= chart.num_labels() {
            return Err(Error::Mismatch(format!("span ({i},{j}) label {l} outside a chart over {} tokens", chart.n)));
        }
        total += chart.score(i, j, l);
    }
    Ok(total)
}

/// Adds 1 to every labeled span absent from `gold` and subtracts
/// `dummy_penalty` from every no-label entry, then decodes.
pub fn loss_augmented_decode(chart: &ScoreChart, gold: &[(usize, usize, usize)], dummy_penalty: f64) -> Result<Decoded> {
    let gold_n = gold.first().map_or(0, |g| g.1);
    if gold_n != chart.n || gold.iter().any(|g| g.1 > chart.n) {
        return Err(Error::Mismatch(format!(
            "gold tree covers {gold_n} tokens but the chart has {}",
            chart.n
        )));
    }
    let gold_set: HashSet<(usize, usize, usize)> = gold.iter().copied().collect();
    let mut aug = chart.clone();
    for (i, j) in spans(chart.n) {
        let mut row = aug.row_mut(i, j);
        for l in 0..row.len() {
            if !gold_set.contains(&(i, j, l)) {
                row[l] += 1.0;
            }
        }
        row[NO_LABEL] -= dummy_penalty;
    }
    Ok(cky_decode(&aug))
}

/// Structured hinge loss and the augmented argmax it was computed from.
pub fn hinge(chart: &ScoreChart, gold: &[(usize, usize, usize)], dummy_penalty: f64) -> Result<(f64, Decoded)> {
    let aug = loss_augmented_decode(chart, gold, dummy_penalty)?;
    let gold_score = spans_score(gold, chart)?;
    Ok(((aug.score - gold_score).max(0.0), aug))
}

pub fn hinge_loss(chart: &ScoreChart, gold: &Tree, labels: &LabelSet, dummy_penalty: f64) -> Result<f64> {
    let spans = tree_spans(gold, labels)?;
    Ok(hinge(chart, &spans, dummy_penalty)?.0)
}

/// Number of no-label spans in a bracketing.
pub fn count_dummy(decoded: &Decoded) -> usize {
    decoded.spans.iter().filter(|s| s.2 == NO_LABEL).count()
}

/// Name used for the no-label entry when it has to be written out.
pub const NO_LABEL_NAME: &str = DUMMY;
