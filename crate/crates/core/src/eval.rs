//! Exact-match evaluation, multi-seed aggregation and attention analytics.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Episode;
use crate::gridworld::Action;
use crate::model::{AttentionMap, AttnKind, Forward, Model, ModelError, ModelInput, EOS, PAD, SOS};
use crate::oracle::oracle;
use crate::tensor::Real;

fn strip(ids: &[usize]) -> impl Iterator<Item = usize> + '_ {
    ids.iter().copied().filter(|&t| t != SOS && t != EOS && t != PAD)
}

/// Equality of action-id sequences once SOS, EOS and PAD are dropped.
pub fn exact_match_ids(pred: &[usize], gold: &[usize]) -> bool {
    strip(pred).eq(strip(gold))
}

pub fn exact_match(pred: &[Action], gold: &[Action]) -> bool {
    pred == gold
}

/// Anything that maps an episode to an action sequence.
pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<Action>, ModelError>;
}

impl<T: Real> Predictor for Model<T> {
    fn predict(&self, episode: &Episode) -> Result<Vec<Action>, ModelError> {
        let input = ModelInput::from_episode(episode, self.config().mask_source)?;
        self.greedy_decode(&input, self.config().max_decode_len)
    }
}

/// Upper-bound harness: answers with the oracle plan.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<Action>, ModelError> {
        Ok(oracle(&episode.world, &episode.ast).map(|p| p.actions).unwrap_or_default())
    }
}

/// Lower-bound harness: emits EOS immediately.
pub struct ConstantEos;

impl Predictor for ConstantEos {
    fn predict(&self, _: &Episode) -> Result<Vec<Action>, ModelError> {
        Ok(Vec::new())
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Unrounded exact-match percentage.
pub fn exact_match_rate<P: Predictor + ?Sized>(predictor: &P, episodes: &[Episode]) -> Result<f64, ModelError> {
    if episodes.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for ep in episodes {
        if exact_match(&predictor.predict(ep)?, &ep.actions.actions) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / episodes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: String,
    pub exact_match: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitResult>,
    pub seed: u64,
    pub config_hash: String,
}

/// Per-episode outcome, kept for audits of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub split: String,
    pub command: String,
    pub predicted: Vec<Action>,
    pub gold: Vec<Action>,
    pub correct: bool,
}

pub fn config_hash(json: &str) -> String {
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    splits: &[(&str, &[Episode])],
    seed: u64,
    config_hash: &str,
) -> Result<(EvalReport, Vec<PredictionRecord>), ModelError> {
    let mut results = Vec::new();
    let mut records = Vec::new();
    for (name, episodes) in splits {
        let mut correct = 0;
        for ep in *episodes {
            let predicted = predictor.predict(ep)?;
            let ok = exact_match(&predicted, &ep.actions.actions);
            correct += usize::from(ok);
            records.push(PredictionRecord {
                split: name.to_string(),
                command: ep.command(),
                predicted,
                gold: ep.actions.actions.clone(),
                correct: ok,
            });
        }
        let pct = if episodes.is_empty() { 0.0 } else { 100.0 * correct as f64 / episodes.len() as f64 };
        results.push(SplitResult { split: name.to_string(), exact_match: round2(pct), correct, count: episodes.len() });
    }
    Ok((EvalReport { splits: results, seed, config_hash: config_hash.to_string() }, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSplit {
    pub split: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub splits: Vec<AggregateSplit>,
    pub seeds: Vec<u64>,
}

/// Mean and sample standard deviation per split across runs.
pub fn aggregate(reports: &[EvalReport]) -> AggregateReport {
    let mut splits = Vec::new();
    if let Some(first) = reports.first() {
        for s in &first.splits {
            let vals: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.splits.iter().find(|x| x.split == s.split).map(|x| x.exact_match))
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            splits.push(AggregateSplit { split: s.split.clone(), mean: round2(mean), std: round2(std), runs: vals.len() });
        }
    }
    AggregateReport { splits, seeds: reports.iter().map(|r| r.seed).collect() }
}

/// Attention matrices of one kind averaged over layers and heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedAttention {
    pub kind: AttnKind,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub command: String,
    pub maps: Vec<AttentionMap>,
    pub averaged: Vec<AveragedAttention>,
    /// Cell receiving the most text-to-grid attention, averaged over tokens.
    pub focus_cell: usize,
    pub referent_cell: usize,
}

fn average(maps: &[&AttentionMap]) -> Vec<Vec<f64>> {
    let mut acc = maps[0].matrix.clone();
    for m in &maps[1..] {
        for (row, other) in acc.iter_mut().zip(&m.matrix) {
            row.iter_mut().zip(other).for_each(|(a, b)| *a += b);
        }
    }
    let k = maps.len() as f64;
    acc.iter_mut().for_each(|row| row.iter_mut().for_each(|a| *a /= k));
    acc
}

/// Records the encoder attention of one episode and averages it per kind.
pub fn export_attention<T: Real>(model: &Model<T>, episode: &Episode) -> Result<AttentionExport, ModelError> {
    let input = ModelInput::from_episode(episode, model.config().mask_source)?;
    let mut fwd = Forward::new(model, false, 0);
    fwd.record_attention();
    fwd.encode_input(&input)?;
    let maps = fwd.take_attention();
    let mut averaged = Vec::new();
    for kind in [AttnKind::TextSelf, AttnKind::T2vCross, AttnKind::V2tCross, AttnKind::VisSelf] {
        let of_kind: Vec<&AttentionMap> = maps.iter().filter(|m| m.kind == kind).collect();
        if !of_kind.is_empty() {
            averaged.push(AveragedAttention { kind, matrix: average(&of_kind) });
        }
    }
    let t2v = &averaged.iter().find(|a| a.kind == AttnKind::T2vCross).expect("encoder records cross attention").matrix;
    let mut per_cell = vec![0.0; t2v[0].len()];
    for row in t2v {
        per_cell.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let mut focus_cell = 0;
    for (i, &v) in per_cell.iter().enumerate() {
        if v > per_cell[focus_cell] {
            focus_cell = i;
        }
    }
    Ok(AttentionExport { command: episode.command(), maps, averaged, focus_cell, referent_cell: episode.referent.cell_index() })
}

/// Fraction of episodes whose averaged text-to-grid attention peaks on the referent.
pub fn referent_focus<T: Real>(model: &Model<T>, episodes: &[Episode]) -> Result<f64, ModelError> {
    if episodes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for ep in episodes {
        let e = export_attention(model, ep)?;
        hits += usize::from(e.focus_cell == e.referent_cell);
    }
    Ok(hits as f64 / episodes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::Action::*;

    #[test]
    fn exact_match_rules() {
        assert!(exact_match(&[Walk, TurnLeft], &[Walk, TurnLeft]));
        assert!(!exact_match(&[Walk], &[Walk, Walk]));
        assert!(exact_match(&[], &[]));
        assert!(exact_match_ids(&[SOS, 2, 2, EOS, PAD], &[2, 2]));
    }

    #[test]
    fn rounding_and_aggregation() {
        assert_eq!(round2(92.554_9), 92.55);
        let rep = |seed, em| EvalReport {
            splits: vec![SplitResult { split: "c1".into(), exact_match: em, correct: 0, count: 0 }],
            seed,
            config_hash: String::new(),
        };
        let agg = aggregate(&[rep(0, 80.0), rep(1, 82.0), rep(2, 84.0)]);
        assert_eq!(agg.splits[0].mean, 82.0);
        assert_eq!(agg.splits[0].std, 2.0);
        assert_eq!(agg.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("{}"), config_hash("{}"));
        assert_ne!(config_hash("{}"), config_hash("{ }"));
        assert_eq!(config_hash("{}").len(), 16);
    }
}
