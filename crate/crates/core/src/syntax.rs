//! Deterministic dependency and constituency parsing of grammar commands, and
//! the token-level self-attention masks derived from the parses.
//!
//! The parser does not search: the AST already fixes the structure, so each
//! token's attachment follows from its role in the rendered command.
//!
//! Dependency attachment rules:
//!
//! 1. the verb ("walk" of "walk to") is the root;
//! 2. "to" attaches to the verb (`fixed`);
//! 3. the head noun of the target phrase attaches to the verb (`obj`);
//! 4. every determiner "the" of a noun phrase attaches to its noun (`det`);
//! 5. size and color words attach to their noun (`amod`);
//! 6. the first relation's content word ("row", "column", "color", "inside")
//!    attaches to the target noun (`acl`); the relation's other words attach to
//!    the content word ("in" and "of" as `case`, "the", "same", "as" as
//!    `fixed`) and the embedded noun attaches to it as `nmod`;
//! 7. "that" and "is" attach to the first relation's content word (`mark`);
//! 8. a second relation's content word attaches to the first one (`conj`) and
//!    "and" attaches to the second (`cc`);
//! 9. the adverb attaches to the verb (`advmod`) and "while" to the adverb (`mark`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::grammar::{render, CommandAst, GrammarError, NounPhrase, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepLabel {
    Root,
    Det,
    Amod,
    Case,
    Obj,
    Obl,
    Acl,
    Nmod,
    Cc,
    Conj,
    Mark,
    Advmod,
    Fixed,
}

/// Head-index representation of a dependency tree. `heads[i] == None` marks the root.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DependencyTree {
    heads: Vec<Option<usize>>,
    labels: Vec<DepLabel>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("heads and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("expected exactly one root, found {0}")]
    RootCount(usize),
    #[error("head {head} of token {token} is out of range")]
    HeadOutOfRange { token: usize, head: usize },
    #[error("dependency cycle through token {0}")]
    Cycle(usize),
}

impl DependencyTree {
    /// Builds a tree, checking for a single root, in-range heads and acyclicity.
    pub fn new(heads: Vec<Option<usize>>, labels: Vec<DepLabel>) -> Result<Self, TreeError> {
        if heads.len() != labels.len() {
            return Err(TreeError::LengthMismatch(heads.len(), labels.len()));
        }
        let roots = heads.iter().filter(|h| h.is_none()).count();
        if roots != 1 {
            return Err(TreeError::RootCount(roots));
        }
        let n = heads.len();
        for (token, h) in heads.iter().enumerate() {
            if let Some(head) = *h {
                if head >= n || head == token {
                    return Err(TreeError::HeadOutOfRange { token, head });
                }
            }
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = heads[cur] {
                cur = h;
                steps += 1;
                if steps > n {
                    return Err(TreeError::Cycle(start));
                }
            }
        }
        Ok(Self { heads, labels })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn heads(&self) -> &[Option<usize>] {
        &self.heads
    }

    pub fn labels(&self) -> &[DepLabel] {
        &self.labels
    }

    pub fn root(&self) -> usize {
        self.heads.iter().position(Option::is_none).expect("validated tree has a root")
    }

    /// Heads with the root encoded as `-1`, as written to JSON.
    pub fn heads_as_i64(&self) -> Vec<i64> {
        self.heads.iter().map(|h| h.map_or(-1, |x| x as i64)).collect()
    }

    /// Tokens ordered so that every head precedes its dependents.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.len();
        let mut children = vec![Vec::new(); n];
        for (i, h) in self.heads.iter().enumerate() {
            if let Some(h) = h {
                children[*h].push(i);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![self.root()];
        while let Some(t) = stack.pop() {
            order.push(t);
            stack.extend(children[t].iter().rev());
        }
        order
    }
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    heads: Vec<i64>,
    labels: Vec<DepLabel>,
}

impl Serialize for DependencyTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TreeRepr { heads: self.heads_as_i64(), labels: self.labels.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DependencyTree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TreeRepr::deserialize(d)?;
        let heads = repr
            .heads
            .iter()
            .map(|&h| match h {
                -1 => Ok(None),
                h if h >= 0 => Ok(Some(h as usize)),
                h => Err(serde::de::Error::custom(format!("invalid head {h}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        DependencyTree::new(heads, repr.labels).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhraseLabel {
    VP,
    NP,
    RELP,
    ADVP,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConstituencyNode {
    Leaf(usize),
    Phrase { label: PhraseLabel, children: Vec<ConstituencyNode> },
}

impl ConstituencyNode {
    fn phrase(label: PhraseLabel, children: Vec<ConstituencyNode>) -> Self {
        ConstituencyNode::Phrase { label, children }
    }

    fn leaves(range: std::ops::Range<usize>) -> impl Iterator<Item = ConstituencyNode> {
        range.map(ConstituencyNode::Leaf)
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            ConstituencyNode::Leaf(i) => out.push(*i),
            ConstituencyNode::Phrase { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }
}

/// A labelled, ordered phrase-structure tree whose leaves are token indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstituencyTree {
    pub root: ConstituencyNode,
    pub tokens: Vec<String>,
}

impl ConstituencyTree {
    pub fn leaf_order(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.root.collect_leaves(&mut out);
        out
    }

    /// For every leaf, the token span `[start, end)` of its immediate parent phrase.
    pub fn parent_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = vec![(0, 0); self.tokens.len()];
        fn walk(node: &ConstituencyNode, spans: &mut [(usize, usize)]) -> (usize, usize) {
            match node {
                ConstituencyNode::Leaf(i) => (*i, *i + 1),
                ConstituencyNode::Phrase { children, .. } => {
                    let mut lo = usize::MAX;
                    let mut hi = 0;
                    let mut leaf_children = Vec::new();
                    for c in children {
                        let (a, b) = walk(c, spans);
                        lo = lo.min(a);
                        hi = hi.max(b);
                        if let ConstituencyNode::Leaf(i) = c {
                            leaf_children.push(*i);
                        }
                    }
                    for i in leaf_children {
                        spans[i] = (lo, hi);
                    }
                    (lo, hi)
                }
            }
        }
        walk(&self.root, &mut spans);
        spans
    }
}

impl fmt::Display for ConstituencyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn go(node: &ConstituencyNode, tokens: &[String], f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match node {
                ConstituencyNode::Leaf(i) => f.write_str(&tokens[*i]),
                ConstituencyNode::Phrase { label, children } => {
                    write!(f, "({label:?}")?;
                    for c in children {
                        f.write_str(" ")?;
                        go(c, tokens, f)?;
                    }
                    f.write_str(")")
                }
            }
        }
        go(&self.root, &self.tokens, f)
    }
}

/// Boolean token-to-token attention permissions, row-major `n x n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttentionMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn all_true(n: usize) -> Self {
        Self { n, allow: vec![true; n * n] }
    }

    /// Lower-triangular mask used for causal decoding.
    pub fn causal(n: usize) -> Self {
        let allow = (0..n * n).map(|k| k % n <= k / n).collect();
        Self { n, allow }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Option<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return None;
        }
        Some(Self { n, allow: rows.into_iter().flatten().collect() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn diagonal_all_true(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i))
    }

    pub fn off_diagonal_count(&self) -> usize {
        (0..self.n).map(|i| (0..self.n).filter(|&j| j != i && self.get(i, j)).count()).sum()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n).map(|i| self.row(i).iter().map(|&b| u8::from(b)).collect()).collect()
    }
}

impl Serialize for AttentionMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AttentionMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<u8>>::deserialize(d)?;
        let rows = rows
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|x| match x {
                        0 => Ok(false),
                        1 => Ok(true),
                        _ => Err(serde::de::Error::custom("mask entries must be 0 or 1")),
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        AttentionMask::from_rows(rows).ok_or_else(|| serde::de::Error::custom("mask is not square"))
    }
}

/// Token positions of one rendered noun phrase head.
struct NpLayout {
    det: usize,
    attrs: Vec<usize>,
    noun: usize,
}

impl NpLayout {
    fn at(start: usize, np: &NounPhrase) -> Self {
        let len = np.head_len();
        Self { det: start, attrs: (start + 1..start + len - 1).collect(), noun: start + len - 1 }
    }

    fn end(&self) -> usize {
        self.noun + 1
    }
}

struct RelLayout {
    start: usize,
    /// "that is" for the first relation, "and" for the second.
    connectives: Vec<usize>,
    phrase: Vec<usize>,
    content: usize,
    np: NpLayout,
}

struct Layout {
    verb: Vec<usize>,
    target: NpLayout,
    relations: Vec<RelLayout>,
    adverb: Option<(usize, usize)>,
    len: usize,
}

fn layout(ast: &CommandAst) -> Layout {
    let verb: Vec<usize> = (0..ast.verb.words().len()).collect();
    let mut pos = verb.len();
    let target = NpLayout::at(pos, &ast.target);
    pos = target.end();
    let mut relations = Vec::new();
    for (k, (rel, np)) in ast.target.relations.iter().enumerate() {
        let start = pos;
        let n_conn = if k == 0 { 2 } else { 1 };
        let connectives: Vec<usize> = (pos..pos + n_conn).collect();
        pos += n_conn;
        let phrase: Vec<usize> = (pos..pos + rel.phrase().len()).collect();
        let content = pos + rel.content_offset();
        pos += phrase.len();
        let np_layout = NpLayout::at(pos, np);
        pos = np_layout.end();
        relations.push(RelLayout { start, connectives, phrase, content, np: np_layout });
    }
    let adverb = ast.adverb.map(|_| {
        pos += 2;
        (pos - 2, pos - 1)
    });
    Layout { verb, target, relations, adverb, len: pos }
}

fn check_tokens(ast: &CommandAst, tokens: &TokenSeq) -> Result<(), GrammarError> {
    let expected = render(ast);
    if &expected != tokens {
        let position = expected
            .tokens()
            .iter()
            .zip(tokens.tokens())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| expected.len().min(tokens.len()));
        return Err(GrammarError::MalformedCommand {
            position,
            reason: format!("tokens do not realize the AST (expected {expected:?})"),
        });
    }
    Ok(())
}

pub fn parse_dependency(ast: &CommandAst, tokens: &TokenSeq) -> Result<DependencyTree, GrammarError> {
    check_tokens(ast, tokens)?;
    let lay = layout(ast);
    let mut heads = vec![None; lay.len];
    let mut labels = vec![DepLabel::Root; lay.len];
    let mut attach = |tok: usize, head: usize, label: DepLabel| {
        heads[tok] = Some(head);
        labels[tok] = label;
    };

    let verb = lay.verb[0];
    for &t in &lay.verb[1..] {
        attach(t, verb, DepLabel::Fixed);
    }
    let attach_np = |np: &NpLayout, attach: &mut dyn FnMut(usize, usize, DepLabel)| {
        attach(np.det, np.noun, DepLabel::Det);
        for &a in &np.attrs {
            attach(a, np.noun, DepLabel::Amod);
        }
    };
    attach_np(&lay.target, &mut attach);
    attach(lay.target.noun, verb, DepLabel::Obj);

    let first_content = lay.relations.first().map(|r| r.content);
    for (k, rel) in lay.relations.iter().enumerate() {
        if k == 0 {
            attach(rel.content, lay.target.noun, DepLabel::Acl);
            for &c in &rel.connectives {
                attach(c, rel.content, DepLabel::Mark);
            }
        } else {
            attach(rel.content, first_content.expect("k > 0"), DepLabel::Conj);
            for &c in &rel.connectives {
                attach(c, rel.content, DepLabel::Cc);
            }
        }
        for &w in &rel.phrase {
            if w == rel.content {
                continue;
            }
            let label = match tokens.tokens()[w] {
                "in" | "of" => DepLabel::Case,
                _ => DepLabel::Fixed,
            };
            attach(w, rel.content, label);
        }
        attach_np(&rel.np, &mut attach);
        attach(rel.np.noun, rel.content, DepLabel::Nmod);
    }
    if let Some((while_tok, adv)) = lay.adverb {
        attach(adv, verb, DepLabel::Advmod);
        attach(while_tok, adv, DepLabel::Mark);
    }
    Ok(DependencyTree::new(heads, labels).expect("rule table always yields a tree"))
}

pub fn parse_constituency(ast: &CommandAst, tokens: &TokenSeq) -> Result<ConstituencyTree, GrammarError> {
    use ConstituencyNode as N;
    check_tokens(ast, tokens)?;
    let lay = layout(ast);
    let np_node = |np: &NpLayout| N::phrase(PhraseLabel::NP, N::leaves(np.det..np.end()).collect());

    let mut vp: Vec<N> = lay.verb.iter().map(|&i| N::Leaf(i)).collect();
    let target = np_node(&lay.target);
    if lay.relations.is_empty() {
        vp.push(target);
    } else {
        let mut children = vec![target];
        for rel in &lay.relations {
            let mut relp: Vec<N> = N::leaves(rel.start..rel.np.det).collect();
            relp.push(np_node(&rel.np));
            children.push(N::phrase(PhraseLabel::RELP, relp));
        }
        vp.push(N::phrase(PhraseLabel::NP, children));
    }
    if let Some((w, a)) = lay.adverb {
        vp.push(N::phrase(PhraseLabel::ADVP, vec![N::Leaf(w), N::Leaf(a)]));
    }
    Ok(ConstituencyTree {
        root: N::phrase(PhraseLabel::VP, vp),
        tokens: tokens.tokens().iter().map(|s| s.to_string()).collect(),
    })
}

/// Each token may attend to itself and to the tokens it shares a dependency edge with.
pub fn mask_from_dependency(tree: &DependencyTree) -> AttentionMask {
    let n = tree.len();
    let mut mask = AttentionMask { n, allow: vec![false; n * n] };
    for i in 0..n {
        mask.allow[i * n + i] = true;
        if let Some(h) = tree.heads[i] {
            mask.allow[i * n + h] = true;
            mask.allow[h * n + i] = true;
        }
    }
    mask
}

/// Token `i` may attend to `j` when either one's immediate parent phrase spans the other.
pub fn mask_from_constituency(tree: &ConstituencyTree) -> AttentionMask {
    let spans = tree.parent_spans();
    let n = spans.len();
    let inside = |span: (usize, usize), j: usize| span.0 <= j && j < span.1;
    let allow = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            i == j || inside(spans[i], j) || inside(spans[j], i)
        })
        .collect();
    AttentionMask { n, allow }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_command;

    fn dep(text: &str) -> DependencyTree {
        let (ast, tokens) = parse_command(text).unwrap();
        parse_dependency(&ast, &tokens).unwrap()
    }

    fn cons(text: &str) -> ConstituencyTree {
        let (ast, tokens) = parse_command(text).unwrap();
        parse_constituency(&ast, &tokens).unwrap()
    }

    #[test]
    fn walk_to_red_circle() {
        let t = dep("walk to the red circle");
        assert_eq!(t.heads(), &[None, Some(0), Some(4), Some(4), Some(0)]);
        assert_eq!(t.labels(), &[DepLabel::Root, DepLabel::Fixed, DepLabel::Det, DepLabel::Amod, DepLabel::Obj]);
    }

    #[test]
    fn push_the_box_mask() {
        let m = mask_from_dependency(&dep("push the box"));
        assert_eq!(m.to_rows(), vec![vec![1, 0, 1], vec![0, 1, 1], vec![1, 1, 1]]);
    }

    #[test]
    fn two_token_tree_is_complete() {
        let t = DependencyTree::new(vec![None, Some(0)], vec![DepLabel::Root, DepLabel::Obj]).unwrap();
        assert_eq!(mask_from_dependency(&t), AttentionMask::all_true(2));
    }

    #[test]
    fn mismatched_tokens_rejected() {
        let (ast, _) = parse_command("push the box").unwrap();
        let (_, other) = parse_command("pull the box").unwrap();
        assert!(parse_dependency(&ast, &other).is_err());
        assert!(parse_constituency(&ast, &other).is_err());
    }

    #[test]
    fn invalid_trees_rejected() {
        use DepLabel::*;
        assert_eq!(DependencyTree::new(vec![Some(1), Some(0)], vec![Obj, Obj]), Err(TreeError::RootCount(0)));
        assert_eq!(
            DependencyTree::new(vec![None, Some(2), Some(1)], vec![Root, Obj, Obj]),
            Err(TreeError::Cycle(1))
        );
        assert!(DependencyTree::new(vec![None, Some(5)], vec![Root, Obj]).is_err());
    }

    #[test]
    fn constituency_brackets() {
        assert_eq!(cons("walk to the red circle").to_string(), "(VP walk to (NP the red circle))");
        assert_eq!(cons("push the box while spinning").to_string(), "(VP push (NP the box) (ADVP while spinning))");
        assert_eq!(
            cons("push the circle that is inside of the box").to_string(),
            "(VP push (NP (NP the circle) (RELP that is inside of (NP the box))))"
        );
    }

    #[test]
    fn constituency_mask_push_the_box() {
        let m = mask_from_constituency(&cons("push the box"));
        assert_eq!(m.to_rows(), vec![vec![1, 1, 1], vec![1, 1, 1], vec![1, 1, 1]]);
        let m = mask_from_constituency(&cons("push the box while spinning"));
        // "while" sits in ADVP, whose span excludes "the".
        assert!(!m.get(3, 1));
        assert!(m.get(3, 0), "push's parent VP spans everything");
        assert!(m.is_symmetric() && m.diagonal_all_true());
    }

    #[test]
    fn flat_constituent_mask_all_true() {
        let tree = ConstituencyTree {
            root: ConstituencyNode::Phrase {
                label: PhraseLabel::VP,
                children: (0..4).map(ConstituencyNode::Leaf).collect(),
            },
            tokens: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        };
        assert_eq!(mask_from_constituency(&tree), AttentionMask::all_true(4));
    }

    #[test]
    fn tree_json_roundtrip() {
        let t = dep("walk to the red circle");
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(json["heads"], serde_json::json!([-1, 0, 4, 4, 0]));
        assert_eq!(json["labels"][4], "obj");
        let back: DependencyTree = serde_json::from_value(json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn causal_mask_shape() {
        let m = AttentionMask::causal(3);
        assert_eq!(m.to_rows(), vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]);
    }
}
