//! Command-line front end. `main` forwards to [`run`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::{build_split, read_split, write_split, CorpusManifest, Episode, SplitConfig, SplitCorpus, SplitName};
use crate::eval::{aggregate, config_hash, evaluate, export_attention, referent_focus, EvalReport, OraclePredictor, ConstantEos, Predictor};
use crate::grammar::parse_command;
use crate::model::{MaskSource, Model, ModelConfig, ModelError};
use crate::presets::{self, Preset};
use crate::syntax::{mask_from_constituency, mask_from_dependency, parse_constituency, parse_dependency};
use crate::tensor::checkpoint::CheckpointError;
use crate::train::{train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "syngrid", version, about = "Grid-world command grounding with syntax-masked attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a train/test/val corpus for one split.
    Generate(GenerateArgs),
    /// Parse a command and print its tree and attention mask.
    Parse(ParseArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the oracle/constant-EOS harness) on test sets.
    Eval(EvalArgs),
    /// Dump attention maps and the referent-focus statistic.
    Inspect(InspectArgs),
    /// Train and evaluate the weight-sharing by text-mask grid.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Random,
    A1,
    B2,
    C1,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Random => SplitName::Random,
            SplitArg::A1 => SplitName::A1ColorShape,
            SplitArg::B2 => SplitName::B2RelationCooccur,
            SplitArg::C1 => SplitName::C1ClauseDepth,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    train_size: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    test_size: u64,
    #[arg(long, default_value_t = 500)]
    val_size: u64,
    #[arg(long, value_enum)]
    split: SplitArg,
    #[arg(long, default_value_t = 2)]
    max_relations: usize,
    /// Store each episode's dependency mask in the corpus files.
    #[arg(long)]
    include_mask: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ParseArgs {
    #[arg(long)]
    command: String,
    /// Print the bracketed constituency tree and its mask instead.
    #[arg(long)]
    constituency: bool,
    /// Directory for a run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Clone)]
struct ModelOverrides {
    /// Preset name or path to a preset JSON file.
    #[arg(long, default_value = "mini")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
    /// Use only the first N training episodes.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long, value_enum)]
    mask_source: Option<MaskSourceArg>,
    /// Train in 64-bit floats.
    #[arg(long)]
    f64: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MaskSourceArg {
    Dependency,
    Constituency,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    opts: ModelOverrides,
    /// Apply one encoder parameter set per layer.
    #[arg(long)]
    no_share: bool,
    /// Let text self-attention see every token.
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Checkpoint file, or `oracle` / `constant-eos` for the reference harnesses.
    #[arg(long)]
    checkpoint: String,
    /// Corpus directories; the test set of each is one report row.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Seed recorded in the report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Validation episode whose attention maps are dumped.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Validation episodes used for the referent-focus statistic.
    #[arg(long, default_value_t = 200)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    opts: ModelOverrides,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn help_footer() -> String {
    let mut s = String::from("Presets (use with --config):\n");
    for p in presets::builtin() {
        s.push_str(&format!("  {:<14} {}\n", p.name, p.description));
    }
    s
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let footer = help_footer();
    let mut cmd = Cli::command().after_help(footer.clone());
    for name in ["train", "ablate"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(footer.clone()));
    }
    let matches = cmd.try_get_matches_from(args)?;
    let cli = Cli::from_arg_matches(&matches)?;
    match cli.command {
        Command::Generate(a) => generate(a, out),
        Command::Parse(a) => parse(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Inspect(a) => inspect(a, out),
        Command::Ablate(a) => ablate(a, out),
    }
}

fn write_manifest(dir: &Path, subcommand: &str, resolved: Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "subcommand": subcommand,
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": resolved,
        "created_unix": created,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SplitConfig {
        seed: a.seed,
        split: a.split.into(),
        train_size: a.train_size as usize,
        test_size: a.test_size as usize,
        val_size: a.val_size as usize,
        max_relations: a.max_relations,
    };
    let corpus = build_split(&cfg)?;
    write_split(&a.out, &cfg, &corpus, a.include_mask)?;
    writeln!(
        out,
        "wrote {} train, {} test, {} val episodes to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.val.len(),
        a.out.display()
    )?;
    Ok(())
}

fn parse(a: ParseArgs, out: &mut dyn Write) -> Result<()> {
    let (ast, tokens) = parse_command(&a.command)?;
    if a.constituency {
        let tree = parse_constituency(&ast, &tokens)?;
        writeln!(out, "{tree}")?;
        writeln!(out, "{}", serde_json::to_string(&mask_from_constituency(&tree))?)?;
    } else {
        let tree = parse_dependency(&ast, &tokens)?;
        let body = json!({ "tokens": tokens.tokens(), "heads": tree.heads_as_i64(), "labels": tree.labels() });
        writeln!(out, "{}", serde_json::to_string(&body)?)?;
        writeln!(out, "{}", serde_json::to_string(&mask_from_dependency(&tree))?)?;
    }
    if let Some(dir) = &a.out {
        write_manifest(dir, "parse", serde_json::to_value(&a)?)?;
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<(CorpusManifest, SplitCorpus)> {
    read_split(dir).with_context(|| format!("reading corpus in {}", dir.display()))
}

fn resolve_configs(opts: &ModelOverrides) -> Result<(Preset, ModelConfig, TrainConfig)> {
    let preset = presets::resolve(&opts.config)?;
    let mut model = preset.model.clone();
    let mut tc = preset.train.clone();
    if let Some(v) = opts.seed {
        tc.seed = v;
    }
    if let Some(v) = opts.epochs {
        tc.epochs = v;
    }
    if let Some(v) = opts.lr {
        tc.lr = v;
    }
    if let Some(v) = opts.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = opts.eval_every {
        tc.eval_every = v;
    }
    if opts.val_limit.is_some() {
        tc.val_limit = opts.val_limit;
    }
    if let Some(src) = opts.mask_source {
        model.mask_source = match src {
            MaskSourceArg::Dependency => MaskSource::Dependency,
            MaskSourceArg::Constituency => MaskSource::Constituency,
        };
    }
    tc.f64_mode |= opts.f64;
    model.validate()?;
    tc.validate()?;
    Ok((preset, model, tc))
}

fn limit(episodes: &[Episode], n: Option<usize>) -> &[Episode] {
    &episodes[..n.map_or(episodes.len(), |n| n.min(episodes.len()))]
}

/// Trains one model and returns its best-checkpoint evaluation on the test set.
fn train_and_report(
    corpus: &SplitCorpus,
    split: &str,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    train_limit: Option<usize>,
) -> Result<(EvalReport, f64, usize)> {
    let hash = config_hash(&serde_json::to_string(&(model_cfg, tc))?);
    let train_set = limit(&corpus.train, train_limit);
    let splits = [(split, corpus.test.as_slice())];
    if tc.f64_mode {
        let o = train::<f64>(train_set, &corpus.val, model_cfg, tc)?;
        let (r, _) = evaluate(&o.best, &splits, tc.seed, &hash)?;
        Ok((r, o.best_val_exact_match, o.best_step))
    } else {
        let o = train::<f32>(train_set, &corpus.val, model_cfg, tc)?;
        let (r, _) = evaluate(&o.best, &splits, tc.seed, &hash)?;
        Ok((r, o.best_val_exact_match, o.best_step))
    }
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (preset, mut model_cfg, mut tc) = resolve_configs(&a.opts)?;
    model_cfg.share_encoder_weights &= !a.no_share;
    model_cfg.use_text_mask &= !a.no_mask;
    tc.checkpoint_dir = Some(a.out.clone());
    let (data_manifest, corpus) = load_corpus(&a.data)?;
    write_manifest(
        &a.out,
        "train",
        json!({ "preset": preset.name, "model": model_cfg, "train": tc, "data": a.data, "data_manifest": data_manifest, "train_limit": a.opts.train_limit }),
    )?;
    let split = data_manifest.split.short();
    let (report, val, step) = train_and_report(&corpus, split, &model_cfg, &tc, a.opts.train_limit)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    writeln!(out, "best validation exact match {val:.2} at step {step}")?;
    for s in &report.splits {
        writeln!(out, "{}\t{}\t{:.2}", s.split, s.count, s.exact_match)?;
    }
    Ok(())
}

/// A checkpoint loaded at whichever precision it was saved in.
pub enum LoadedModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        match Model::<f32>::load(path) {
            Ok(m) => Ok(Self::F32(m)),
            Err(ModelError::Checkpoint(CheckpointError::DtypeMismatch { .. })) => Ok(Self::F64(Model::<f64>::load(path)?)),
            Err(e) => Err(e).with_context(|| format!("loading {}", path.display())),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::F32(m) => m.config(),
            Self::F64(m) => m.config(),
        }
    }

    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            Self::F32(m) => m,
            Self::F64(m) => m,
        }
    }
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let loaded;
    let (predictor, hash): (&dyn Predictor, String) = match a.checkpoint.as_str() {
        "oracle" => (&OraclePredictor, config_hash("oracle")),
        "constant-eos" => (&ConstantEos, config_hash("constant-eos")),
        path => {
            loaded = LoadedModel::load(Path::new(path))?;
            (loaded.predictor(), config_hash(&serde_json::to_string(loaded.config())?))
        }
    };
    let mut corpora = Vec::new();
    for dir in &a.data {
        let (m, c) = load_corpus(dir)?;
        corpora.push((m.split.short(), c.test));
    }
    let splits: Vec<(&str, &[Episode])> = corpora.iter().map(|(n, t)| (*n, t.as_slice())).collect();
    let (report, records) = evaluate(predictor, &splits, a.seed, &hash)?;
    for s in &report.splits {
        writeln!(out, "{}\t{}\t{:.2}", s.split, s.count, s.exact_match)?;
    }
    if let Some(dir) = &a.out {
        write_manifest(dir, "eval", serde_json::to_value(&a)?)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        fs::write(dir.join("predictions.jsonl"), lines)?;
    }
    Ok(())
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let (_, corpus) = load_corpus(&a.data)?;
    let episode = corpus.val.get(a.index).context("--index beyond the validation set")?;
    let sample = limit(&corpus.val, Some(a.limit));
    let (export, focus) = match LoadedModel::load(&a.checkpoint)? {
        LoadedModel::F32(m) => (export_attention(&m, episode)?, referent_focus(&m, sample)?),
        LoadedModel::F64(m) => (export_attention(&m, episode)?, referent_focus(&m, sample)?),
    };
    write_manifest(&a.out, "inspect", serde_json::to_value(&a)?)?;
    fs::write(a.out.join("attention.json"), serde_json::to_string(&export.maps)? + "\n")?;
    fs::write(a.out.join("averaged.json"), serde_json::to_string_pretty(&export.averaged)? + "\n")?;
    let max_dev = export
        .averaged
        .iter()
        .flat_map(|a| a.matrix.iter())
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let summary = json!({
        "command": export.command,
        "focus_cell": export.focus_cell,
        "referent_cell": export.referent_cell,
        "referent_focus": focus,
        "episodes": sample.len(),
        "max_row_sum_deviation": max_dev,
    });
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    writeln!(out, "command: {}", export.command)?;
    writeln!(out, "referent focus over {} validation episodes: {:.4}", sample.len(), focus)?;
    writeln!(out, "max averaged row-sum deviation: {max_dev:.2e}")?;
    Ok(())
}

/// Ablation rows in table order: (weight sharing, text mask).
pub const ABLATION_GRID: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

fn ablate(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    if a.seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let (preset, base_model, base_train) = resolve_configs(&a.opts)?;
    let (data_manifest, corpus) = load_corpus(&a.data)?;
    write_manifest(
        &a.out,
        "ablate",
        json!({ "preset": preset.name, "model": base_model, "train": base_train, "seeds": a.seeds, "data": a.data, "data_manifest": data_manifest, "train_limit": a.opts.train_limit }),
    )?;
    let split = data_manifest.split.short();
    let mut rows = Vec::new();
    writeln!(out, "W/S\tMask\t{split}")?;
    for (share, mask) in ABLATION_GRID {
        let model_cfg = ModelConfig { share_encoder_weights: share, use_text_mask: mask, ..base_model.clone() };
        let mut reports = Vec::new();
        for &seed in &a.seeds {
            let tc = TrainConfig { seed, ..base_train.clone() };
            reports.push(train_and_report(&corpus, split, &model_cfg, &tc, a.opts.train_limit)?.0);
        }
        let agg = aggregate(&reports);
        let cell = &agg.splits[0];
        let mark = |b: bool| if b { "yes" } else { "-" };
        writeln!(out, "{}\t{}\t{:.2} ± {:.2}", mark(share), mark(mask), cell.mean, cell.std)?;
        rows.push(json!({
            "share_encoder_weights": share,
            "use_text_mask": mask,
            "mean": cell.mean,
            "std": cell.std,
            "runs": reports,
        }));
    }
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(())
}
