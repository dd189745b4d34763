#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turnparse::corpus::{generate_synthetic, Corpus, SynthConfig, Turn};
use turnparse::treebank::{parse_ptb, Tree};

pub const FIG1_GOLD: &str = "(TURN (INTJ right) (S (NP it) (VP wouldn't (VP make (NP (NP that big a bulge) (PP in the population))))) (S (CC but) (EDITED po-) (ADVP politically)))";
pub const FIG1_E2E: &str = "(TURN (INTJ right) (NP it) (VP wouldn't (VP make (NP that big a bulge) (PP in the population))) (CC but) (EDITED po-) (ADVP politically))";
pub const FIG1_PIPELINE: &str = "(TURN (INTJ right) (S (NP it) (VP wouldn't (VP make (NP that big a bulge) (PP in the population) (CC but) (EDITED po-) (ADVP politically)))))";

pub fn tree(s: &str) -> Tree {
    parse_ptb(s).unwrap()
}

const LABELS: [&str; 8] = ["S", "NP", "VP", "PP", "ADVP", "INTJ", "EDITED", "SBAR"];
const TAGS: [&str; 5] = ["N", "V", "D", "UH", "CC"];

/// A random tree over `n` tokens with n-ary nodes, unary chains, bare
/// tokens and preterminals.
pub fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Tree {
    let t = build(rng, 0, n, 0);
    // A bare word is not a tree on its own.
    if t.is_leaf() && t.label().is_none() {
        return Tree::leaf(Some("N"), "w0", 0).unwrap();
    }
    t
}

fn build(rng: &mut ChaCha8Rng, start: usize, end: usize, depth: usize) -> Tree {
    let t = if end - start == 1 {
        let word = format!("w{start}");
        if rng.random_bool(0.4) {
            Tree::leaf(None, &word, start).unwrap()
        } else {
            Tree::leaf(Some(TAGS[rng.random_range(0..TAGS.len())]), &word, start).unwrap()
        }
    } else {
        let len = end - start;
        let parts = rng.random_range(2..=len.min(4));
        let mut cuts: Vec<usize> = rand::seq::index::sample(rng, len - 1, parts - 1).into_iter().map(|c| start + c + 1).collect();
        cuts.sort_unstable();
        let mut bounds = vec![start];
        bounds.extend(cuts);
        bounds.push(end);
        let kids = bounds.windows(2).map(|w| build(rng, w[0], w[1], depth + 1)).collect();
        Tree::node(LABELS[rng.random_range(0..LABELS.len())], kids).unwrap()
    };
    if (!t.is_leaf() || t.label().is_some()) && depth > 0 && rng.random_bool(0.15) {
        return Tree::node(LABELS[rng.random_range(0..LABELS.len())], vec![t]).unwrap();
    }
    t
}

/// A TURN over one to three random SUs.
pub fn random_turn_tree(rng: &mut ChaCha8Rng, n: usize) -> Tree {
    let sus = rng.random_range(1..=n.min(3));
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, n.max(2) - 1, sus - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n);
    let kids = bounds
        .windows(2)
        .map(|w| {
            let t = build(rng, w[0], w[1], 1);
            if t.is_leaf() && t.label().is_none() {
                Tree::node("INTJ", vec![t]).unwrap()
            } else {
                t
            }
        })
        .collect();
    Tree::node("TURN", kids).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small synthetic corpus whose prosody windows fit `ModelConfig::tiny`.
pub fn tiny_corpus(turns: usize, seed: u64) -> Corpus {
    generate_synthetic(&SynthConfig {
        turns,
        vocab_size: 30,
        window: 4,
        context: 1,
        max_turn_len: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Generated turns of exactly `n` tokens.
pub fn turns_of_len(corpus: &Corpus, n: usize) -> Vec<&Turn> {
    corpus.turns.iter().filter(|t| t.len() == n).collect()
}

/// Every binary bracketing of `[i, j)` as span lists in pre-order.
pub fn bracketings(i: usize, j: usize) -> Vec<Vec<(usize, usize)>> {
    if j - i == 1 {
        return vec![vec![(i, j)]];
    }
    let mut out = Vec::new();
    for k in i + 1..j {
        for left in bracketings(i, k) {
            for right in bracketings(k, j) {
                let mut t = vec![(i, j)];
                t.extend(&left);
                t.extend(&right);
                out.push(t);
            }
        }
    }
    out
}

/// Best total over all trees and all labelings, by brute force over every
/// label assignment when `full` is set and by the per-span maximum
/// otherwise (the score is additive, so both give the same optimum).
pub fn brute_force_best(n: usize, score: &dyn Fn(usize, usize, usize) -> f64, labels: usize, full: bool) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for spans in bracketings(0, n) {
        let total = if full {
            let m = spans.len();
            let mut best_lab = f64::NEG_INFINITY;
            for code in 0..labels.pow(m as u32) {
                let mut c = code;
                let mut s = 0.0;
                for &(i, j) in &spans {
                    s += score(i, j, c % labels);
                    c /= labels;
                }
                best_lab = best_lab.max(s);
            }
            best_lab
        } else {
            spans
                .iter()
                .map(|&(i, j)| (0..labels).map(|l| score(i, j, l)).fold(f64::NEG_INFINITY, f64::max))
                .sum()
        };
        best = best.max(total);
    }
    best
}

/// Scores are multiples of 1/16 so every sum is exact whatever the order
/// of addition.
pub fn random_chart(r: &mut ChaCha8Rng, n: usize, labels: usize) -> turnparse::model::ScoreChart {
    let rows = n * (n + 1) / 2;
    let mut m = ndarray::Array2::zeros((rows, labels));
    for x in m.iter_mut() {
        *x = r.random_range(-32i32..=32) as f64 / 16.0;
    }
    m.column_mut(0).fill(0.0);
    turnparse::model::ScoreChart::from_full(n, m).unwrap()
}

/// A random binarized gold bracketing with labels, as chart triples.
pub fn random_gold(r: &mut ChaCha8Rng, n: usize, labels: usize) -> Vec<(usize, usize, usize)> {
    let all = bracketings(0, n);
    let pick = &all[r.random_range(0..all.len())];
    pick.iter().map(|&(i, j)| (i, j, r.random_range(0..labels))).collect()
}
