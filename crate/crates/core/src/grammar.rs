//! The command language: a closed vocabulary, the command AST, surface
//! realization and its inverse, and a seeded command sampler.
//!
//! Surface template:
//!
//! ```text
//! VERB the [SIZE] [COLOR] SHAPE [that is REL the NP [and REL the NP]] [while ADVERB]
//! ```

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Color, Shape};

/// Every word the grammar can emit. A token's id is its index here.
pub const VOCABULARY: [&str; 30] = [
    "walk", "to", "push", "pull", "the", "small", "big", "red", "blue", "green", "yellow", "circle",
    "square", "cylinder", "box", "object", "that", "is", "in", "same", "row", "column", "color",
    "as", "inside", "of", "and", "while", "zigzagging", "spinning",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCABULARY.iter().position(|w| *w == word)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("malformed command at token {position}: {reason}")]
    MalformedCommand { position: usize, reason: String },
}

fn malformed(position: usize, reason: impl Into<String>) -> GrammarError {
    GrammarError::MalformedCommand { position, reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeWord {
    Small,
    Big,
}

impl SizeWord {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeWord::Small => "small",
            SizeWord::Big => "big",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeWord {
    Circle,
    Square,
    Cylinder,
    Box,
    Object,
}

impl ShapeWord {
    pub const ALL: [ShapeWord; 5] = [
        ShapeWord::Circle,
        ShapeWord::Square,
        ShapeWord::Cylinder,
        ShapeWord::Box,
        ShapeWord::Object,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeWord::Circle => "circle",
            ShapeWord::Square => "square",
            ShapeWord::Cylinder => "cylinder",
            ShapeWord::Box => "box",
            ShapeWord::Object => "object",
        }
    }

    /// "object" matches every shape.
    pub fn matches(self, shape: Shape) -> bool {
        match self {
            ShapeWord::Circle => shape == Shape::Circle,
            ShapeWord::Square => shape == Shape::Square,
            ShapeWord::Cylinder => shape == Shape::Cylinder,
            ShapeWord::Box => shape == Shape::Box,
            ShapeWord::Object => true,
        }
    }

    pub fn shape(self) -> Option<Shape> {
        match self {
            ShapeWord::Circle => Some(Shape::Circle),
            ShapeWord::Square => Some(Shape::Square),
            ShapeWord::Cylinder => Some(Shape::Cylinder),
            ShapeWord::Box => Some(Shape::Box),
            ShapeWord::Object => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    SameRow,
    SameColumn,
    SameColor,
    InsideOf,
}

impl Relation {
    pub const ALL: [Relation; 4] =
        [Relation::SameRow, Relation::SameColumn, Relation::SameColor, Relation::InsideOf];

    /// Words of the relation phrase, not counting the embedded noun phrase.
    pub fn phrase(self) -> &'static [&'static str] {
        match self {
            Relation::SameRow => &["in", "the", "same", "row", "as"],
            Relation::SameColumn => &["in", "the", "same", "column", "as"],
            Relation::SameColor => &["in", "the", "same", "color", "as"],
            Relation::InsideOf => &["inside", "of"],
        }
    }

    /// Offset of the content word ("row", "column", "color", "inside") within [`Relation::phrase`].
    pub fn content_offset(self) -> usize {
        match self {
            Relation::InsideOf => 0,
            _ => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NounPhrase {
    pub size: Option<SizeWord>,
    pub color: Option<Color>,
    pub shape: ShapeWord,
    /// At most two; the embedded phrases never carry relations of their own.
    pub relations: Vec<(Relation, NounPhrase)>,
}

impl NounPhrase {
    pub fn simple(size: Option<SizeWord>, color: Option<Color>, shape: ShapeWord) -> Self {
        Self { size, color, shape, relations: Vec::new() }
    }

    pub fn with_relation(mut self, relation: Relation, np: NounPhrase) -> Self {
        self.relations.push((relation, np));
        self
    }

    /// Number of tokens "the [SIZE] [COLOR] SHAPE" takes.
    pub(crate) fn head_len(&self) -> usize {
        2 + usize::from(self.size.is_some()) + usize::from(self.color.is_some())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    WalkTo,
    Push,
    Pull,
}

impl Verb {
    pub const ALL: [Verb; 3] = [Verb::WalkTo, Verb::Push, Verb::Pull];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Verb::WalkTo => &["walk", "to"],
            Verb::Push => &["push"],
            Verb::Pull => &["pull"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adverb {
    Zigzagging,
    Spinning,
}

impl Adverb {
    pub const ALL: [Adverb; 2] = [Adverb::Zigzagging, Adverb::Spinning];

    pub fn as_str(self) -> &'static str {
        match self {
            Adverb::Zigzagging => "zigzagging",
            Adverb::Spinning => "spinning",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommandAst {
    pub verb: Verb,
    pub target: NounPhrase,
    pub adverb: Option<Adverb>,
}

impl CommandAst {
    pub fn new(verb: Verb, target: NounPhrase, adverb: Option<Adverb>) -> Self {
        Self { verb, target, adverb }
    }

    pub fn num_relations(&self) -> usize {
        self.target.relations.len()
    }

    /// Every noun phrase in the command, head first.
    pub fn noun_phrases(&self) -> impl Iterator<Item = &NounPhrase> {
        std::iter::once(&self.target).chain(self.target.relations.iter().map(|(_, np)| np))
    }
}

/// A tokenized command. Tokens always come from [`VOCABULARY`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<&'static str>);

impl TokenSeq {
    /// Tokenizes on whitespace, rejecting out-of-vocabulary words.
    pub fn from_text(text: &str) -> Result<Self, GrammarError> {
        text.split_whitespace()
            .enumerate()
            .map(|(i, w)| {
                token_id(w)
                    .map(|id| VOCABULARY[id])
                    .ok_or_else(|| malformed(i, format!("unknown word {w:?}")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSeq)
    }

    pub fn from_ids(ids: &[usize]) -> Option<Self> {
        ids.iter().map(|&i| VOCABULARY.get(i).copied()).collect::<Option<Vec<_>>>().map(TokenSeq)
    }

    pub fn tokens(&self) -> &[&'static str] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|w| token_id(w).expect("tokens are in vocabulary")).collect()
    }

    fn push(&mut self, w: &'static str) {
        debug_assert!(token_id(w).is_some(), "{w} not in vocabulary");
        self.0.push(w);
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

fn render_np_head(np: &NounPhrase, out: &mut TokenSeq) {
    out.push("the");
    if let Some(s) = np.size {
        out.push(s.as_str());
    }
    if let Some(c) = np.color {
        out.push(c.as_str());
    }
    out.push(np.shape.as_str());
}

pub fn render(ast: &CommandAst) -> TokenSeq {
    let mut out = TokenSeq::default();
    for w in ast.verb.words() {
        out.push(*w);
    }
    render_np_head(&ast.target, &mut out);
    for (i, (rel, np)) in ast.target.relations.iter().enumerate() {
        if i == 0 {
            out.push("that");
            out.push("is");
        } else {
            out.push("and");
        }
        for w in rel.phrase() {
            out.push(*w);
        }
        render_np_head(np, &mut out);
    }
    if let Some(adv) = ast.adverb {
        out.push("while");
        out.push(adv.as_str());
    }
    out
}

struct Cursor<'a> {
    tokens: &'a [&'static str],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<&'static str> {
        self.tokens.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<&'static str> {
        let t = self.peek();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, word: &str) -> Result<(), GrammarError> {
        match self.next() {
            Some(t) if t == word => Ok(()),
            Some(t) => Err(malformed(self.pos - 1, format!("expected {word:?}, found {t:?}"))),
            None => Err(malformed(self.pos, format!("expected {word:?}, found end of command"))),
        }
    }

    fn np_head(&mut self) -> Result<NounPhrase, GrammarError> {
        self.expect("the")?;
        let mut size = None;
        let mut color = None;
        if let Some(w) = self.peek() {
            size = match w {
                "small" => Some(SizeWord::Small),
                "big" => Some(SizeWord::Big),
                _ => None,
            };
            if size.is_some() {
                self.pos += 1;
            }
        }
        if let Some(c) = self.peek().and_then(Color::from_word) {
            color = Some(c);
            self.pos += 1;
        }
        let pos = self.pos;
        let shape = match self.next() {
            Some(w) => ShapeWord::ALL
                .into_iter()
                .find(|s| s.as_str() == w)
                .ok_or_else(|| malformed(pos, format!("expected a shape word, found {w:?}")))?,
            None => return Err(malformed(pos, "expected a shape word, found end of command")),
        };
        Ok(NounPhrase::simple(size, color, shape))
    }

    fn relation(&mut self) -> Result<Relation, GrammarError> {
        let pos = self.pos;
        let rel = match self.peek() {
            Some("inside") => Relation::InsideOf,
            Some("in") => match self.tokens.get(self.pos + 3).copied() {
                Some("row") => Relation::SameRow,
                Some("column") => Relation::SameColumn,
                Some("color") => Relation::SameColor,
                _ => return Err(malformed(pos + 3, "expected row, column or color")),
            },
            other => return Err(malformed(pos, format!("expected a relation, found {other:?}"))),
        };
        for w in rel.phrase() {
            self.expect(*w)?;
        }
        Ok(rel)
    }
}

pub fn parse_ast(tokens: &TokenSeq) -> Result<CommandAst, GrammarError> {
    let mut cur = Cursor { tokens: tokens.tokens(), pos: 0 };
    let verb = match cur.next() {
        Some("walk") => {
            cur.expect("to")?;
            Verb::WalkTo
        }
        Some("push") => Verb::Push,
        Some("pull") => Verb::Pull,
        Some(w) => return Err(malformed(0, format!("expected a verb, found {w:?}"))),
        None => return Err(malformed(0, "empty command")),
    };
    let mut target = cur.np_head()?;
    if cur.peek() == Some("that") {
        cur.pos += 1;
        cur.expect("is")?;
        let rel = cur.relation()?;
        let np = cur.np_head()?;
        target.relations.push((rel, np));
        if cur.peek() == Some("and") {
            cur.pos += 1;
            let rel = cur.relation()?;
            let np = cur.np_head()?;
            target.relations.push((rel, np));
        }
    }
    let mut adverb = None;
    if cur.peek() == Some("while") {
        cur.pos += 1;
        let pos = cur.pos;
        adverb = Some(match cur.next() {
            Some("zigzagging") => Adverb::Zigzagging,
            Some("spinning") => Adverb::Spinning,
            other => return Err(malformed(pos, format!("expected an adverb, found {other:?}"))),
        });
    }
    if let Some(w) = cur.peek() {
        return Err(malformed(cur.pos, format!("unexpected trailing {w:?}")));
    }
    Ok(CommandAst { verb, target, adverb })
}

/// Parses whitespace-separated command text.
pub fn parse_command(text: &str) -> Result<(CommandAst, TokenSeq), GrammarError> {
    let tokens = TokenSeq::from_text(text)?;
    let ast = parse_ast(&tokens)?;
    Ok((ast, tokens))
}

/// Sampling probabilities for [`sample_command`].
#[derive(Clone, Copy, Debug)]
pub struct SamplingTable {
    pub adverb: f64,
    pub size: f64,
    pub color: f64,
}

pub const SAMPLING: SamplingTable = SamplingTable { adverb: 0.3, size: 0.5, color: 0.5 };

/// Draws a command from the grammar.
///
/// Verb, shape word, relation count (in `0..=max_relations`) and relation
/// kinds are uniform; kinds within one command are distinct. Size and color
/// words each appear with probability 0.5 and an adverb with probability 0.3.
/// An "inside of" phrase always names a box, and a "same color as" phrase
/// never names a color.
pub fn sample_command(rng_seed: u64, max_relations: usize) -> CommandAst {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_command_with(&mut rng, max_relations)
}

pub fn sample_command_with<R: Rng>(rng: &mut R, max_relations: usize) -> CommandAst {
    let max_relations = max_relations.min(2);
    let verb = *Verb::ALL.choose(rng).expect("non-empty");
    let mut target = {
        let shape = *ShapeWord::ALL.choose(rng).expect("non-empty");
        sample_np(rng, true, shape)
    };
    let n_rel = rng.random_range(0..=max_relations);
    let mut kinds = Relation::ALL.to_vec();
    for _ in 0..n_rel {
        let rel = kinds.remove(rng.random_range(0..kinds.len()));
        let np = match rel {
            Relation::InsideOf => sample_np(rng, true, ShapeWord::Box),
            Relation::SameColor => {
                let shape = *ShapeWord::ALL.choose(rng).expect("non-empty");
                sample_np(rng, false, shape)
            },
            _ => {
        let shape = *ShapeWord::ALL.choose(rng).expect("non-empty");
        sample_np(rng, true, shape)
    },
        };
        target.relations.push((rel, np));
    }
    let adverb = rng.random_bool(SAMPLING.adverb).then(|| *Adverb::ALL.choose(rng).expect("non-empty"));
    CommandAst { verb, target, adverb }
}

fn sample_np<R: Rng>(rng: &mut R, allow_color: bool, shape: ShapeWord) -> NounPhrase {
    let size = rng
        .random_bool(SAMPLING.size)
        .then(|| if rng.random_bool(0.5) { SizeWord::Small } else { SizeWord::Big });
    let color = if allow_color && rng.random_bool(SAMPLING.color) {
        Some(*Color::ALL.choose(rng).expect("non-empty"))
    } else {
        None
    };
    NounPhrase::simple(size, color, shape)
}
