//! PTB-style constituency trees and the transforms the parsers rely on.
//!
//! A [`Tree`] is either a token ([`Tree::Leaf`]), optionally under a
//! preterminal label, or a labeled constituent ([`Tree::Node`]) whose
//! children partition its span. `(NP it)` is a labeled leaf; the words in
//! `(NP that big a bulge)` are bare leaves under an `NP` node.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub const TURN: &str = "TURN";
pub const DUMMY: &str = "DUMMY";
pub const BLANK: &str = "BLANK";
pub const EDITED: &str = "EDITED";

/// Separator for collapsed unary chains (`S+VP`). Not allowed in corpus labels.
pub const UNARY_SEP: char = '+';

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("format error at offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("children are not contiguous: {0} followed by {1}")]
    NonContiguous(Span, Span),
    #[error("a constituent needs at least one child")]
    EmptyConstituent,
    #[error("empty list of trees")]
    EmptyList,
    #[error("root must be labeled TURN, found {0:?}")]
    NotTurn(String),
    #[error("DUMMY node at the root")]
    DummyRoot,
}

pub type Result<T> = std::result::Result<T, TreeError>;

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, other: Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tree {
    Leaf {
        label: Option<String>,
        word: String,
        index: usize,
    },
    Node {
        label: String,
        span: Span,
        children: Vec<Tree>,
    },
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.chars().any(|c| c.is_whitespace() || c == '(' || c == ')') {
        return Err(TreeError::InvalidLabel(label.to_string()));
    }
    Ok(())
}

fn check_token(word: &str) -> Result<()> {
    if word.is_empty() || word.chars().any(|c| c.is_whitespace() || c == '(' || c == ')') {
        return Err(TreeError::InvalidToken(word.to_string()));
    }
    Ok(())
}

impl Tree {
    pub fn leaf(label: Option<&str>, word: &str, index: usize) -> Result<Tree> {
        if let Some(l) = label {
            check_label(l)?;
        }
        check_token(word)?;
        Ok(Tree::Leaf {
            label: label.map(str::to_string),
            word: word.to_string(),
            index,
        })
    }

    /// Builds a constituent over `children`. A label over a single bare token
    /// is a preterminal, so that case yields a labeled leaf.
    pub fn node(label: &str, mut children: Vec<Tree>) -> Result<Tree> {
        check_label(label)?;
        if children.is_empty() {
            return Err(TreeError::EmptyConstituent);
        }
        if children.len() == 1 {
            if let Tree::Leaf { label: None, .. } = &children[0] {
                let Some(Tree::Leaf { word, index, .. }) = children.pop() else {
                    unreachable!()
                };
                return Ok(Tree::Leaf {
                    label: Some(label.to_string()),
                    word,
                    index,
                });
            }
        }
        for pair in children.windows(2) {
            let (a, b) = (pair[0].span(), pair[1].span());
            if a.end != b.start {
                return Err(TreeError::NonContiguous(a, b));
            }
        }
        let span = Span::new(children[0].span().start, children[children.len() - 1].span().end);
        Ok(Tree::Node {
            label: label.to_string(),
            span,
            children,
        })
    }

    pub fn span(&self) -> Span {
        match self {
            Tree::Leaf { index, .. } => Span::new(*index, index + 1),
            Tree::Node { span, .. } => *span,
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Tree::Leaf { label, .. } => label.as_deref(),
            Tree::Node { label, .. } => Some(label),
        }
    }

    pub fn children(&self) -> &[Tree] {
        match self {
            Tree::Leaf { .. } => &[],
            Tree::Node { children, .. } => children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Tree::Leaf { .. })
    }

    pub fn words(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.span().len());
        self.collect_words(&mut out);
        out
    }

    fn collect_words<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Tree::Leaf { word, .. } => out.push(word),
            Tree::Node { children, .. } => children.iter().for_each(|c| c.collect_words(out)),
        }
    }

    pub fn num_words(&self) -> usize {
        self.span().len()
    }

    /// Same tree with every index moved by `delta` (may be negative).
    pub fn shifted(&self, delta: isize) -> Tree {
        let mv = |i: usize| (i as isize + delta) as usize;
        match self {
            Tree::Leaf { label, word, index } => Tree::Leaf {
                label: label.clone(),
                word: word.clone(),
                index: mv(*index),
            },
            Tree::Node { label, span, children } => Tree::Node {
                label: label.clone(),
                span: Span::new(mv(span.start), mv(span.end)),
                children: children.iter().map(|c| c.shifted(delta)).collect(),
            },
        }
    }

    /// Same shape and labels with the words replaced, in order.
    pub fn with_words(&self, words: &[String]) -> Tree {
        match self {
            Tree::Leaf { label, index, .. } => Tree::Leaf {
                label: label.clone(),
                word: words[*index].clone(),
                index: *index,
            },
            Tree::Node { label, span, children } => Tree::Node {
                label: label.clone(),
                span: *span,
                children: children.iter().map(|c| c.with_words(words)).collect(),
            },
        }
    }

    /// Pre-order visit of every labeled span (nodes and labeled leaves).
    pub fn for_each_labeled<F: FnMut(Span, &str, bool)>(&self, f: &mut F) {
        match self {
            Tree::Leaf { label: Some(l), index, .. } => f(Span::new(*index, index + 1), l, true),
            Tree::Leaf { label: None, .. } => {}
            Tree::Node { label, span, children } => {
                f(*span, label, false);
                children.iter().for_each(|c| c.for_each_labeled(f));
            }
        }
    }

    /// True when no label in the tree uses a reserved name or separator.
    pub fn has_corpus_labels(&self) -> bool {
        let mut ok = true;
        self.for_each_labeled(&mut |_, l, _| {
            ok &= !l.contains(UNARY_SEP) && l != DUMMY && l != BLANK;
        });
        ok
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_ptb(self))
    }
}

impl std::str::FromStr for Tree {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Tree> {
        parse_ptb(s)
    }
}

// ---------------------------------------------------------------------------
// Reading and writing

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Open(usize),
    Close(usize),
    Atom(usize, &'a str),
}

fn tokenize(text: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let mut atom_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c == '(' || c == ')' || c.is_whitespace() {
            if let Some(s) = atom_start.take() {
                toks.push(Tok::Atom(s, &text[s..i]));
            }
            match c {
                '(' => toks.push(Tok::Open(i)),
                ')' => toks.push(Tok::Close(i)),
                _ => {}
            }
        } else if atom_start.is_none() {
            atom_start = Some(i);
        }
    }
    if let Some(s) = atom_start {
        toks.push(Tok::Atom(s, &text[s..]));
    }
    toks
}

struct Reader<'a> {
    toks: Vec<Tok<'a>>,
    pos: usize,
    len: usize,
    next_index: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: &str) -> TreeError {
        TreeError::Format {
            offset,
            message: message.to_string(),
        }
    }

    fn offset(&self) -> usize {
        match self.toks.get(self.pos) {
            Some(Tok::Open(o)) | Some(Tok::Close(o)) | Some(Tok::Atom(o, _)) => *o,
            None => self.len,
        }
    }

    /// Parses `( LABEL child+ )` with the cursor on the open paren.
    fn constituent(&mut self) -> Result<Tree> {
        let open = match self.toks.get(self.pos) {
            Some(Tok::Open(o)) => *o,
            _ => return Err(self.err(self.offset(), "expected '('")),
        };
        self.pos += 1;
        let label = match self.toks.get(self.pos) {
            Some(Tok::Atom(_, l)) => *l,
            Some(Tok::Close(o)) => return Err(self.err(*o, "empty constituent")),
            Some(Tok::Open(o)) => return Err(self.err(*o, "missing label")),
            None => return Err(self.err(self.len, "unbalanced parentheses")),
        };
        self.pos += 1;
        let mut children = Vec::new();
        loop {
            match self.toks.get(self.pos) {
                Some(Tok::Close(_)) => {
                    self.pos += 1;
                    break;
                }
                Some(Tok::Open(_)) => children.push(self.constituent()?),
                Some(Tok::Atom(o, w)) => {
                    let leaf = Tree::leaf(None, w, self.next_index).map_err(|e| self.err(*o, &e.to_string()))?;
                    self.next_index += 1;
                    self.pos += 1;
                    children.push(leaf);
                }
                None => return Err(self.err(self.len, "unbalanced parentheses")),
            }
        }
        if children.is_empty() {
            return Err(self.err(open, "empty constituent"));
        }
        Tree::node(label, children).map_err(|e| self.err(open, &e.to_string()))
    }
}

/// Reads one bracketed tree. Token indices are assigned left to right from 0.
pub fn parse_ptb(text: &str) -> Result<Tree> {
    let mut reader = Reader {
        toks: tokenize(text),
        pos: 0,
        len: text.len(),
        next_index: 0,
    };
    // PTB files often wrap trees in an unlabeled outer pair: `( (S ...) )`.
    if reader.toks.len() >= 2
        && matches!(reader.toks[0], Tok::Open(_))
        && matches!(reader.toks[1], Tok::Open(_))
        && matches!(reader.toks.last(), Some(Tok::Close(_)))
    {
        reader.pos = 1;
        let tree = reader.constituent()?;
        if reader.pos != reader.toks.len() - 1 {
            return Err(reader.err(reader.offset(), "trailing input after tree"));
        }
        return Ok(tree);
    }
    let tree = reader.constituent()?;
    if reader.pos != reader.toks.len() {
        return Err(reader.err(reader.offset(), "trailing input after tree"));
    }
    Ok(tree)
}

/// Canonical single-space rendering, e.g. `(TURN (INTJ right))`.
pub fn render_ptb(tree: &Tree) -> String {
    let mut out = String::new();
    render_into(tree, &mut out);
    out
}

fn render_into(tree: &Tree, out: &mut String) {
    match tree {
        Tree::Leaf { label: None, word, .. } => out.push_str(word),
        Tree::Leaf { label: Some(l), word, .. } => {
            out.push('(');
            out.push_str(l);
            out.push(' ');
            out.push_str(word);
            out.push(')');
        }
        Tree::Node { label, children, .. } => {
            out.push('(');
            out.push_str(label);
            for c in children {
                out.push(' ');
                render_into(c, out);
            }
            out.push(')');
        }
    }
}

// ---------------------------------------------------------------------------
// Turn structure

/// Wraps consecutive SU trees under a single TURN constituent.
pub fn wrap_turn(sus: Vec<Tree>) -> Result<Tree> {
    if sus.is_empty() {
        return Err(TreeError::EmptyList);
    }
    Tree::node(TURN, sus)
}

fn is_turn_label(label: Option<&str>) -> bool {
    label == Some(TURN)
}

/// Spans of the root's children: the SUs of the turn.
pub fn extract_sus(tree: &Tree) -> Result<Vec<Span>> {
    if !is_turn_label(tree.label()) {
        return Err(TreeError::NotTurn(tree.label().unwrap_or("").to_string()));
    }
    Ok(match tree {
        Tree::Leaf { .. } => vec![tree.span()],
        Tree::Node { children, .. } => children.iter().map(Tree::span).collect(),
    })
}

// ---------------------------------------------------------------------------
// Chomsky-normal-form conversion

/// Collapses unary chains into `A+B` labels and right-factors n-ary nodes
/// with DUMMY intermediates. Every node of the result has two children.
pub fn binarize(tree: &Tree) -> Tree {
    match tree {
        Tree::Leaf { .. } => tree.clone(),
        Tree::Node { label, children, .. } => {
            if children.len() == 1 {
                let child = binarize(&children[0]);
                return match child {
                    Tree::Leaf { label: l, word, index } => Tree::Leaf {
                        label: Some(join_label(label, l.as_deref())),
                        word,
                        index,
                    },
                    Tree::Node { label: l, span, children } => Tree::Node {
                        label: join_label(label, Some(&l)),
                        span,
                        children,
                    },
                };
            }
            let kids: Vec<Tree> = children.iter().map(binarize).collect();
            right_factor(label, kids)
        }
    }
}

fn join_label(outer: &str, inner: Option<&str>) -> String {
    match inner {
        Some(i) => format!("{outer}{UNARY_SEP}{i}"),
        None => outer.to_string(),
    }
}

fn right_factor(label: &str, mut kids: Vec<Tree>) -> Tree {
    debug_assert!(kids.len() >= 2);
    let rest = if kids.len() == 2 {
        kids.pop().unwrap()
    } else {
        let tail = kids.split_off(1);
        right_factor(DUMMY, tail)
    };
    let first = kids.pop().unwrap();
    let span = Span::new(first.span().start, rest.span().end);
    Tree::Node {
        label: label.to_string(),
        span,
        children: vec![first, rest],
    }
}

/// Splices out DUMMY nodes and re-expands joined unary labels.
pub fn debinarize(tree: &Tree) -> Result<Tree> {
    if tree.label() == Some(DUMMY) {
        return Err(TreeError::DummyRoot);
    }
    let mut out = debinarize_inner(tree);
    debug_assert_eq!(out.len(), 1);
    Ok(out.pop().unwrap())
}

fn debinarize_inner(tree: &Tree) -> Vec<Tree> {
    match tree {
        Tree::Leaf { label: None, .. } => vec![tree.clone()],
        Tree::Leaf { label: Some(l), word, index } => {
            if l == DUMMY {
                return vec![Tree::Leaf {
                    label: None,
                    word: word.clone(),
                    index: *index,
                }];
            }
            let parts: Vec<&str> = l.split(UNARY_SEP).collect();
            let (last, outer) = parts.split_last().unwrap();
            let mut t = Tree::Leaf {
                label: Some(last.to_string()),
                word: word.clone(),
                index: *index,
            };
            for p in outer.iter().rev() {
                t = Tree::Node {
                    label: p.to_string(),
                    span: t.span(),
                    children: vec![t],
                };
            }
            vec![t]
        }
        Tree::Node { label, span, children } => {
            let kids: Vec<Tree> = children.iter().flat_map(debinarize_inner).collect();
            if label == DUMMY {
                return kids;
            }
            let parts: Vec<&str> = label.split(UNARY_SEP).collect();
            let (last, outer) = parts.split_last().unwrap();
            let mut t = node_or_preterminal(last, *span, kids);
            for p in outer.iter().rev() {
                t = Tree::Node {
                    label: p.to_string(),
                    span: *span,
                    children: vec![t],
                };
            }
            vec![t]
        }
    }
}

fn node_or_preterminal(label: &str, span: Span, mut kids: Vec<Tree>) -> Tree {
    if kids.len() == 1 {
        if let Tree::Leaf { label: None, .. } = kids[0] {
            let Some(Tree::Leaf { word, index, .. }) = kids.pop() else {
                unreachable!()
            };
            return Tree::Leaf {
                label: Some(label.to_string()),
                word,
                index,
            };
        }
    }
    Tree::Node {
        label: label.to_string(),
        span,
        children: kids,
    }
}

// ---------------------------------------------------------------------------
// Labeled brackets

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpanFilter {
    /// Drop EDITED brackets and everything they dominate.
    pub exclude_edited: bool,
}

/// Multiset of labeled brackets, as EVALB counts them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledSpanSet {
    counts: BTreeMap<(usize, usize, String), usize>,
}

impl LabeledSpanSet {
    pub fn len(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize, label: &str) -> bool {
        self.counts.contains_key(&(i, j, label.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &str)> + '_ {
        self.counts
            .iter()
            .flat_map(|((i, j, l), n)| std::iter::repeat_n((*i, *j, l.as_str()), *n))
    }

    /// Size of the multiset intersection.
    pub fn matched(&self, other: &LabeledSpanSet) -> usize {
        self.counts
            .iter()
            .map(|(k, n)| (*n).min(other.counts.get(k).copied().unwrap_or(0)))
            .sum()
    }

    fn insert(&mut self, i: usize, j: usize, label: &str) {
        *self.counts.entry((i, j, label.to_string())).or_insert(0) += 1;
    }
}

/// Brackets counted by evaluation: every labeled node except the TURN root,
/// DUMMY/BLANK nodes and preterminals.
pub fn labeled_spans(tree: &Tree, filter: SpanFilter) -> LabeledSpanSet {
    let mut set = LabeledSpanSet::default();
    let root_is_turn = is_turn_label(tree.label());
    collect_spans(tree, filter, root_is_turn, &mut set);
    set
}

fn collect_spans(tree: &Tree, filter: SpanFilter, skip_self: bool, set: &mut LabeledSpanSet) {
    let Tree::Node { label, span, children } = tree else {
        return;
    };
    if filter.exclude_edited && label == EDITED {
        return;
    }
    if !skip_self && label != TURN && label != DUMMY && label != BLANK {
        set.insert(span.start, span.end, label);
    }
    for c in children {
        collect_spans(c, filter, false, set);
    }
}

// ---------------------------------------------------------------------------
// BLANK handling for the pipeline parser

/// Joins fragments that do not form a single tree under a BLANK root.
/// A single fragment is returned as is.
pub fn insert_blank(mut fragments: Vec<Tree>) -> Result<Tree> {
    match fragments.len() {
        0 => Err(TreeError::EmptyList),
        1 => Ok(fragments.pop().unwrap()),
        _ => Tree::node(BLANK, fragments),
    }
}

/// Removes every BLANK node, promoting its children.
pub fn strip_blank(tree: &Tree) -> Vec<Tree> {
    match tree {
        Tree::Leaf { label: Some(l), word, index } if l == BLANK => vec![Tree::Leaf {
            label: None,
            word: word.clone(),
            index: *index,
        }],
        Tree::Leaf { .. } => vec![tree.clone()],
        Tree::Node { label, span, children } => {
            let kids: Vec<Tree> = children.iter().flat_map(strip_blank).collect();
            if label == BLANK {
                kids
            } else {
                vec![node_or_preterminal(label, *span, kids)]
            }
        }
    }
}

/// Gold constituents of `tree` that lie inside `span`; constituents that
/// cross the span edges are dropped and their children considered instead.
pub fn clip_to_span(tree: &Tree, span: Span) -> Vec<Tree> {
    let s = tree.span();
    if !s.overlaps(span) {
        return Vec::new();
    }
    if span.contains(s) {
        return vec![tree.clone()];
    }
    tree.children().iter().flat_map(|c| clip_to_span(c, span)).collect()
}

// ---------------------------------------------------------------------------
// Corpus tree files

/// One record of a tree file: `turn_id<TAB>speaker<TAB>(TURN ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeRecord {
    pub turn_id: String,
    pub speaker: String,
    pub tree: Tree,
}

pub fn parse_tree_file(text: &str) -> Result<Vec<TreeRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let mut cols = body.splitn(3, '\t');
            let (Some(id), Some(spk), Some(tree)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(TreeError::Format {
                    offset,
                    message: "expected turn_id, speaker and tree separated by tabs".into(),
                });
            };
            let tree = parse_ptb(tree).map_err(|e| match e {
                TreeError::Format { offset: o, message } => TreeError::Format {
                    offset: offset + id.len() + spk.len() + 2 + o,
                    message,
                },
                other => other,
            })?;
            out.push(TreeRecord {
                turn_id: id.to_string(),
                speaker: spk.to_string(),
                tree,
            });
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn render_tree_file(records: &[TreeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.turn_id);
        out.push('\t');
        out.push_str(&r.speaker);
        out.push('\t');
        out.push_str(&render_ptb(&r.tree));
        out.push('\n');
    }
    out
}
