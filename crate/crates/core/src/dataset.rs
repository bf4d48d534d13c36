//! Episode generation and compositional train/test splits.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, AgentState, Color, ObjectSpec, Orientation, Shape, World, GRID_SIZE};
use crate::grammar::{parse_ast, render, sample_command_with, CommandAst, GrammarError, NounPhrase, Relation, SizeWord, TokenSeq};
use crate::oracle::{box_contains, plan, resolve, Plan, Referent, ResolveError};
use crate::syntax::{mask_from_dependency, parse_dependency, AttentionMask, DependencyTree};

/// Bumped whenever the grammar or sampler changes what a seed produces.
pub const GRAMMAR_VERSION: &str = "2";

/// Attempts per episode before generation gives up.
pub const RETRY_BUDGET: usize = 64;

/// Commands drawn per attempt while looking for one that `accept`s.
pub const COMMAND_BUDGET: usize = 1024;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("generation exhausted: {0}")]
    GenerationExhausted(String),
    #[error("split {split} left the {side} side empty")]
    EmptySplit { split: SplitName, side: &'static str },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub world: World,
    pub tokens: TokenSeq,
    pub ast: CommandAst,
    pub dep_tree: DependencyTree,
    pub mask: AttentionMask,
    pub referent: Referent,
    pub actions: Plan,
    pub split_tag: String,
}

impl Episode {
    /// Derives every field from a world and command, failing when the
    /// command has no unique referent.
    pub fn build(world: World, ast: CommandAst, split_tag: impl Into<String>) -> Result<Self, ResolveError> {
        let referent = resolve(&world, &ast)?;
        let actions = plan(world.agent(), &referent, ast.verb, ast.adverb);
        let tokens = render(&ast);
        let dep_tree = parse_dependency(&ast, &tokens).expect("rendered tokens realize the AST");
        let mask = mask_from_dependency(&dep_tree);
        Ok(Self { world, tokens, ast, dep_tree, mask, referent, actions, split_tag: split_tag.into() })
    }

    pub fn command(&self) -> String {
        self.tokens.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Random,
    A1ColorShape,
    B2RelationCooccur,
    C1ClauseDepth,
}

impl SplitName {
    pub const ALL: [SplitName; 4] =
        [SplitName::Random, SplitName::A1ColorShape, SplitName::B2RelationCooccur, SplitName::C1ClauseDepth];

    pub fn short(self) -> &'static str {
        match self {
            SplitName::Random => "random",
            SplitName::A1ColorShape => "a1",
            SplitName::B2RelationCooccur => "b2",
            SplitName::C1ClauseDepth => "c1",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.short() == s)
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

/// A train/test partition defined by a held-out predicate on commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub name: SplitName,
}

impl SplitSpec {
    pub fn new(name: SplitName) -> Self {
        Self { name }
    }

    /// Whether a command belongs to the held-out (test) side.
    pub fn held_out(&self, ast: &CommandAst) -> bool {
        match self.name {
            SplitName::Random => false,
            SplitName::A1ColorShape => ast
                .noun_phrases()
                .any(|np| np.color == Some(Color::Yellow) && np.shape == crate::grammar::ShapeWord::Square),
            SplitName::B2RelationCooccur => {
                let has = |r: Relation| ast.target.relations.iter().any(|(k, _)| *k == r);
                has(Relation::SameRow) && has(Relation::InsideOf)
            }
            SplitName::C1ClauseDepth => ast.num_relations() == 2,
        }
    }

    /// The same predicate, evaluated on the rendered command string only.
    pub fn held_out_text(&self, command: &str) -> bool {
        let words: Vec<&str> = command.split_whitespace().collect();
        match self.name {
            SplitName::Random => false,
            SplitName::A1ColorShape => words.windows(2).any(|w| w == ["yellow", "square"]),
            SplitName::B2RelationCooccur => words.contains(&"row") && words.contains(&"inside"),
            SplitName::C1ClauseDepth => words.contains(&"and"),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-episode seeds.
pub fn mix_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_object<R: Rng>(rng: &mut R) -> ObjectSpec {
    let color = *Color::ALL.choose(rng).expect("non-empty");
    let shape = *Shape::ALL.choose(rng).expect("non-empty");
    ObjectSpec::new(color, shape, rng.random_range(1..=4)).expect("size in range")
}

/// An object matching a relation-free noun phrase, with `size` left to the caller.
fn object_for<R: Rng>(rng: &mut R, np: &NounPhrase, size: u8) -> ObjectSpec {
    let color = np.color.unwrap_or_else(|| *Color::ALL.choose(rng).expect("non-empty"));
    let shape = np.shape.shape().unwrap_or_else(|| *Shape::ALL.choose(rng).expect("non-empty"));
    ObjectSpec::new(color, shape, size).expect("size in range")
}

fn empty_cells(world: &World) -> Vec<(usize, usize)> {
    (0..GRID_SIZE * GRID_SIZE)
        .map(|k| (k / GRID_SIZE, k % GRID_SIZE))
        .filter(|&(r, c)| world.is_empty_cell(r, c))
        .collect()
}

fn place_random<R: Rng>(rng: &mut R, world: &mut World, cells: &[(usize, usize)], obj: ObjectSpec) -> Option<(usize, usize)> {
    let free: Vec<_> = cells.iter().copied().filter(|&(r, c)| world.is_empty_cell(r, c)).collect();
    let &(r, c) = free.choose(rng)?;
    world.place(r, c, obj).ok()?;
    Some((r, c))
}

/// Samples a world in which `ast` denotes exactly one object. Returns `None`
/// when this attempt could not satisfy the command.
fn sample_world<R: Rng>(rng: &mut R, ast: &CommandAst) -> Option<World> {
    let placeholder = AgentState::new(0, 0, Orientation::North).expect("in bounds");
    let mut world = World::new(placeholder);
    let target_np = &ast.target;

    let target_size = match target_np.size {
        Some(SizeWord::Small) => rng.random_range(1..=3),
        Some(SizeWord::Big) => rng.random_range(2..=4),
        None => rng.random_range(1..=4),
    };
    let target = object_for(rng, target_np, target_size);
    let all_cells: Vec<_> = empty_cells(&world);
    let (tr, tc) = place_random(rng, &mut world, &all_cells, target)?;

    for (rel, nested) in &target_np.relations {
        let size = rng.random_range(1..=4);
        match rel {
            Relation::SameRow => {
                let cells: Vec<_> = (0..GRID_SIZE).map(|c| (tr, c)).collect();
                let o = object_for(rng, nested, size);
                place_random(rng, &mut world, &cells, o)?;
            }
            Relation::SameColumn => {
                let cells: Vec<_> = (0..GRID_SIZE).map(|r| (r, tc)).collect();
                let o = object_for(rng, nested, size);
                place_random(rng, &mut world, &cells, o)?;
            }
            Relation::SameColor => {
                let mut o = object_for(rng, nested, size);
                o.color = target.color;
                place_random(rng, &mut world, &all_cells, o)?;
            }
            Relation::InsideOf => {
                let size = rng.random_range(2..=4);
                let cells: Vec<_> = empty_cells(&world)
                    .into_iter()
                    .filter(|&(r, c)| box_contains(r, c, size, tr, tc))
                    .collect();
                let mut o = object_for(rng, nested, size);
                o.shape = Shape::Box;
                place_random(rng, &mut world, &cells, o)?;
            }
        }
    }
    // A same-size distractor makes the size word informative.
    if let Some(word) = target_np.size {
        if rng.random_bool(0.5) {
            let other = match word {
                SizeWord::Small => rng.random_range(target_size + 1..=4),
                SizeWord::Big => rng.random_range(1..target_size),
            };
            let d = ObjectSpec::new(target.color, target.shape, other).expect("size in range");
            place_random(rng, &mut world, &all_cells, d);
        }
    }

    let wanted = rng.random_range(3..=8);
    let mut attempts = 0;
    while world.num_objects() < wanted + target_np.relations.len() && attempts < 40 {
        attempts += 1;
        let mut trial = world.clone();
        let o = random_object(rng);
        if place_random(rng, &mut trial, &all_cells, o).is_none() {
            break;
        }
        if let Ok(r) = resolve(&trial, ast) {
            if (r.row, r.col) == (tr, tc) {
                world = trial;
            }
        }
    }
    if world.num_objects() < 3 {
        return None;
    }
    let r = resolve(&world, ast).ok()?;
    if (r.row, r.col) != (tr, tc) {
        return None;
    }

    let agent_cells: Vec<_> = (0..GRID_SIZE * GRID_SIZE)
        .map(|k| (k / GRID_SIZE, k % GRID_SIZE))
        .filter(|&p| p != (tr, tc))
        .collect();
    let &(ar, ac) = agent_cells.choose(rng)?;
    let orientation = *Orientation::ALL.choose(rng).expect("non-empty");
    world.set_agent(AgentState::new(ar, ac, orientation).expect("in bounds"));
    Some(world)
}

/// Generates the episode for one seed index, retrying with fresh sub-seeds
/// until the command has a unique referent (and, if given, satisfies `accept`).
pub fn generate_episode(
    seed: u64,
    index: u64,
    max_relations: usize,
    split_tag: &str,
    accept: &dyn Fn(&CommandAst) -> bool,
) -> Result<Episode, DatasetError> {
    for attempt in 0..RETRY_BUDGET as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index, attempt));
        let Some(ast) = (0..COMMAND_BUDGET).map(|_| sample_command_with(&mut rng, max_relations)).find(|a| accept(a)) else {
            continue;
        };
        if let Some(world) = sample_world(&mut rng, &ast) {
            if let Ok(ep) = Episode::build(world, ast, split_tag) {
                return Ok(ep);
            }
        }
    }
    Err(DatasetError::GenerationExhausted(format!(
        "episode {index} of seed {seed} failed after {RETRY_BUDGET} attempts"
    )))
}

/// `size` episodes drawn from consecutive seed indices.
pub fn generate_corpus(seed: u64, size: usize, max_relations: usize) -> Result<Vec<Episode>, DatasetError> {
    if size == 0 {
        return Err(DatasetError::InvalidSize("corpus size must be at least 1".into()));
    }
    (0..size as u64)
        .map(|i| generate_episode(seed, i, max_relations, "pool", &|_| true))
        .collect()
}

/// Partitions an existing corpus. Compositional splits send held-out commands
/// to the test side; the random split holds out every fifth episode.
pub fn apply_split(corpus: &[Episode], spec: SplitSpec) -> Result<(Vec<Episode>, Vec<Episode>), DatasetError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, ep) in corpus.iter().enumerate() {
        let held = match spec.name {
            SplitName::Random => i % 5 == 4,
            SplitName::C1ClauseDepth => {
                if ep.ast.num_relations() == 2 {
                    true
                } else if ep.ast.num_relations() <= 1 {
                    false
                } else {
                    continue;
                }
            }
            _ => spec.held_out(&ep.ast),
        };
        let mut ep = ep.clone();
        ep.split_tag = if held { "test" } else { "train" }.into();
        if held { test.push(ep) } else { train.push(ep) }
    }
    if train.is_empty() {
        return Err(DatasetError::EmptySplit { split: spec.name, side: "train" });
    }
    if test.is_empty() {
        return Err(DatasetError::EmptySplit { split: spec.name, side: "test" });
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seed: u64,
    pub split: SplitName,
    pub train_size: usize,
    pub test_size: usize,
    pub val_size: usize,
    pub max_relations: usize,
}

#[derive(Clone, Debug)]
pub struct SplitCorpus {
    pub train: Vec<Episode>,
    pub test: Vec<Episode>,
    pub val: Vec<Episode>,
}

const TRAIN_STREAM: u64 = 1;
const HELD_OUT_STREAM: u64 = 2;

/// Builds train/test/val sets for a split. Train episodes come from one seed
/// stream and held-out episodes from another, so the two sides never share a
/// seed. Validation episodes follow the test distribution.
pub fn build_split(cfg: &SplitConfig) -> Result<SplitCorpus, DatasetError> {
    if cfg.train_size == 0 || cfg.test_size == 0 {
        return Err(DatasetError::InvalidSize("train and test sizes must be at least 1".into()));
    }
    let spec = SplitSpec::new(cfg.split);
    if cfg.split == SplitName::C1ClauseDepth && cfg.max_relations < 2 {
        return Err(DatasetError::EmptySplit { split: cfg.split, side: "test" });
    }
    let train_seed = mix_seed(cfg.seed, TRAIN_STREAM, 0);
    let held_seed = mix_seed(cfg.seed, HELD_OUT_STREAM, 0);
    let (train_accept, held_accept): (Box<dyn Fn(&CommandAst) -> bool>, Box<dyn Fn(&CommandAst) -> bool>) =
        match cfg.split {
            SplitName::Random => (Box::new(|_| true), Box::new(|_| true)),
            _ => (Box::new(move |a| !spec.held_out(a)), Box::new(move |a| spec.held_out(a))),
        };
    let held_max_relations = cfg.max_relations;

    let train = (0..cfg.train_size as u64)
        .map(|i| generate_episode(train_seed, i, cfg.max_relations, "train", &*train_accept))
        .collect::<Result<Vec<_>, _>>()?;
    let n_held = cfg.test_size + cfg.val_size;
    let mut held = Vec::with_capacity(n_held);
    for i in 0..n_held as u64 {
        let tag = if (i as usize) < cfg.test_size { "test" } else { "val" };
        held.push(generate_episode(held_seed, i, held_max_relations, tag, &*held_accept)?);
    }
    let val = held.split_off(cfg.test_size);
    Ok(SplitCorpus { train, test: held, val })
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub world: World,
    pub command: String,
    pub dep_heads: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<AttentionMask>,
    pub actions: Vec<Action>,
    pub split: String,
}

impl EpisodeRecord {
    pub fn from_episode(ep: &Episode, include_mask: bool) -> Self {
        Self {
            world: ep.world.clone(),
            command: ep.command(),
            dep_heads: ep.dep_tree.heads_as_i64(),
            mask: include_mask.then(|| ep.mask.clone()),
            actions: ep.actions.actions.clone(),
            split: ep.split_tag.clone(),
        }
    }

    /// Rebuilds the episode, checking that stored derived fields agree with
    /// what the parser and oracle produce.
    pub fn into_episode(self) -> Result<Episode, String> {
        let tokens = TokenSeq::from_text(&self.command).map_err(|e: GrammarError| e.to_string())?;
        let ast = parse_ast(&tokens).map_err(|e| e.to_string())?;
        let ep = Episode::build(self.world, ast, self.split).map_err(|e| e.to_string())?;
        if ep.dep_tree.heads_as_i64() != self.dep_heads {
            return Err("dep_heads disagree with the parser".into());
        }
        if ep.actions.actions != self.actions {
            return Err("actions disagree with the oracle".into());
        }
        if let Some(mask) = self.mask {
            if mask != ep.mask {
                return Err("mask disagrees with the parse".into());
            }
        }
        Ok(ep)
    }
}

pub fn write_jsonl(path: &Path, episodes: &[Episode], include_mask: bool) -> Result<(), DatasetError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut out, &EpisodeRecord::from_episode(ep, include_mask))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Corrupt { line: i + 1, message: e.to_string() })?;
        out.push(rec.into_episode().map_err(|message| DatasetError::Corrupt { line: i + 1, message })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub split: SplitName,
    pub train_size: usize,
    pub test_size: usize,
    pub val_size: usize,
    pub max_relations: usize,
    pub grammar_version: String,
    pub masks_included: bool,
}

/// Writes `train.jsonl`, `test.jsonl`, `val.jsonl` and `manifest.json` into `dir`.
pub fn write_split(dir: &Path, cfg: &SplitConfig, corpus: &SplitCorpus, include_mask: bool) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &corpus.train, include_mask)?;
    write_jsonl(&dir.join("test.jsonl"), &corpus.test, include_mask)?;
    write_jsonl(&dir.join("val.jsonl"), &corpus.val, include_mask)?;
    let manifest = CorpusManifest {
        seed: cfg.seed,
        split: cfg.split,
        train_size: corpus.train.len(),
        test_size: corpus.test.len(),
        val_size: corpus.val.len(),
        max_relations: cfg.max_relations,
        grammar_version: GRAMMAR_VERSION.into(),
        masks_included: include_mask,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<(CorpusManifest, SplitCorpus), DatasetError> {
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let corpus = SplitCorpus {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
        val: read_jsonl(&dir.join("val.jsonl"))?,
    };
    Ok((manifest, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Simulator;

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(7, 30, 2).unwrap();
        let b = generate_corpus(7, 30, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn episodes_resolve_and_replay() {
        for ep in generate_corpus(11, 100, 2).unwrap() {
            let r = resolve(&ep.world, &ep.ast).unwrap();
            assert_eq!(r, ep.referent);
            let end = Simulator::new(ep.world.clone()).run(&ep.actions.actions);
            assert_eq!((end.world().agent().row, end.world().agent().col), (r.row, r.col));
            assert!(!ep.actions.is_empty());
            assert!(ep.world.num_objects() >= 3);
        }
    }

    #[test]
    fn zero_size_rejected() {
        assert!(matches!(generate_corpus(1, 0, 2), Err(DatasetError::InvalidSize(_))));
        let cfg = SplitConfig { seed: 1, split: SplitName::Random, train_size: 0, test_size: 5, val_size: 0, max_relations: 2 };
        assert!(build_split(&cfg).is_err());
    }

    #[test]
    fn c1_needs_two_relations() {
        let cfg = SplitConfig { seed: 1, split: SplitName::C1ClauseDepth, train_size: 5, test_size: 5, val_size: 0, max_relations: 1 };
        assert!(matches!(build_split(&cfg), Err(DatasetError::EmptySplit { .. })));
        let corpus = generate_corpus(3, 20, 1).unwrap();
        assert!(matches!(
            apply_split(&corpus, SplitSpec::new(SplitName::C1ClauseDepth)),
            Err(DatasetError::EmptySplit { side: "test", .. })
        ));
    }

    #[test]
    fn record_roundtrip_detects_tampering() {
        let ep = generate_corpus(5, 1, 2).unwrap().remove(0);
        let rec = EpisodeRecord::from_episode(&ep, true);
        assert_eq!(rec.clone().into_episode().unwrap(), ep);
        let mut bad = rec.clone();
        bad.actions.push(Action::Walk);
        assert!(bad.into_episode().is_err());
        let json = serde_json::to_value(EpisodeRecord::from_episode(&ep, false)).unwrap();
        assert!(json.get("mask").is_none());
        for key in ["world", "command", "dep_heads", "actions", "split"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn text_and_ast_predicates_agree() {
        for ep in generate_corpus(9, 400, 2).unwrap() {
            for name in SplitName::ALL {
                let spec = SplitSpec::new(name);
                assert_eq!(spec.held_out(&ep.ast), spec.held_out_text(&ep.command()), "{name} {}", ep.command());
            }
        }
    }
}
