//! The `dtain` command line: prepare, synth, train, eval, explain.
//!
//! Every command reads an optional TOML file (`--config`), applies
//! `--set section.key=value` overrides, and echoes the effective
//! configuration and seed into a `manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::data::{
    parse_recsys, prepare, read_trails_file, split_train_test, synth_dataset, write_recsys_surrogate,
    write_trails_file, PrepareConfig, SurrogateSpec, SynthSpec, UserTrail, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{
    multitask_report, report_row, select_threshold, write_report_csv, ReportRow, ScoredSet,
};
use crate::model::{predict, Checkpoint, DtainConfig, ModelConfig, ModelKind, Prediction, SequenceModel};
use crate::training::{train_with_callback, TrainConfig};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "dtain",
    version,
    about = "Time-aware conversion prediction over user event trails"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random choice; overrides `seed` in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build train/test trails and a vocabulary from click and buy logs.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Click log: session, timestamp, item, category.
        #[arg(long)]
        clicks: PathBuf,
        /// Buy log: session, timestamp, item, price, quantity.
        #[arg(long)]
        buys: PathBuf,
    },
    /// Generate a synthetic dataset with planted time-decaying signals, or
    /// (with `--recsys`) click/buy logs in the RecSys layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recsys: bool,
    },
    /// Train a model on a prepared dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// dtain, cnn, gru, gru_attn or gru_self_attn.
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Score the test split and write per-task metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export attention, gate, theta and mu matrices for sampled converters.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of converters to sample (default from config: 100).
        #[arg(long)]
        num: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare { common, .. }
            | Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Explain { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Explain { .. } => "explain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    pub conv_filters: usize,
    pub kernel_sizes: Vec<usize>,
    pub self_attn_heads: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        let b = BaselineConfig::default();
        Self {
            conv_filters: b.conv_filters,
            kernel_sizes: b.kernel_sizes,
            self_attn_heads: b.self_attn_heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainOptions {
    pub num_converters: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { num_converters: 100 }
    }
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model_kind: ModelKind,
    /// Scoring batch size for eval and explain.
    pub eval_batch_size: usize,
    pub prepare: PrepareConfig,
    pub synth: SynthSpec,
    pub surrogate: SurrogateSpec,
    pub model: DtainConfig,
    pub baseline: BaselineOptions,
    pub train: TrainConfig,
    pub explain: ExplainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_kind: ModelKind::Dtain,
            eval_batch_size: 512,
            prepare: PrepareConfig::default(),
            synth: SynthSpec::default(),
            surrogate: SurrogateSpec::default(),
            model: DtainConfig::default(),
            baseline: BaselineOptions::default(),
            train: TrainConfig::default(),
            explain: ExplainOptions::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(
        parts[parts.len() - 1].to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

impl RunConfig {
    /// Reads the optional file, applies overrides and the seed flag.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    fn model_config(&self, kind: ModelKind, vocab_size: usize) -> ModelConfig {
        let base = DtainConfig {
            vocab_size,
            ..self.model.clone()
        };
        match kind {
            ModelKind::Dtain => ModelConfig::Dtain(base),
            _ => ModelConfig::Baseline(BaselineConfig {
                kind,
                base,
                conv_filters: self.baseline.conv_filters,
                kernel_sizes: self.baseline.kernel_sizes.clone(),
                self_attn_heads: self.baseline.self_attn_heads,
            }),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Parse(e.to_string()))
}

/// Collects output files and writes the manifest last.
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record(name)
    }

    /// Registers a file written by other means.
    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(self, command: &str, config: &RunConfig) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            seed: u64,
            config: &'a RunConfig,
            files: &'a BTreeMap<String, String>,
        }
        let text = to_json(&Manifest {
            command,
            seed: config.seed,
            config,
            files: &self.files,
        })?;
        let path = self.path(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn write_dataset(
    out: &mut Outputs,
    train: &[UserTrail],
    test: &[UserTrail],
    vocab: &Vocabulary,
) -> Result<()> {
    write_trails_file(out.path(TRAIN_FILE), train)?;
    out.record(TRAIN_FILE)?;
    write_trails_file(out.path(TEST_FILE), test)?;
    out.record(TEST_FILE)?;
    out.write(VOCAB_FILE, vocab.to_csv()?.as_bytes())
}

/// A prepared dataset directory.
pub struct Dataset {
    pub vocab: Vocabulary,
    pub fingerprint: String,
    dir: PathBuf,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(VOCAB_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            vocab: Vocabulary::from_csv(&text)?,
            fingerprint: sha256_hex(text.as_bytes()),
            dir: dir.to_path_buf(),
        })
    }

    pub fn train(&self) -> Result<Vec<UserTrail>> {
        read_trails_file(self.dir.join(TRAIN_FILE))
    }

    pub fn test(&self) -> Result<Vec<UserTrail>> {
        read_trails_file(self.dir.join(TEST_FILE))
    }

    fn check(&self, ckpt: &Checkpoint) -> Result<()> {
        match &ckpt.vocab_fingerprint {
            Some(f) if *f != self.fingerprint => Err(Error::Compatibility(format!(
                "checkpoint was trained on vocabulary {f}, dataset has {}",
                self.fingerprint
            ))),
            _ if ckpt.model.base().vocab_size != self.vocab.len() => Err(Error::Compatibility(format!(
                "checkpoint vocabulary size {} differs from dataset's {}",
                ckpt.model.base().vocab_size,
                self.vocab.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// Binary rows use the conversion probability; multi-task rows one column per
/// outcome.
fn score_rows(
    model_name: &str,
    preds: &[Prediction],
    labels: &[usize],
    thresholds: Option<&[f64]>,
) -> Result<Vec<ReportRow>> {
    if preds.first().is_some_and(|p| p.probs.len() > 1) {
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        return multitask_report(model_name, &probs, labels, thresholds);
    }
    let set = ScoredSet::from_binary(preds.iter().map(Prediction::pcvr).collect(), labels)?;
    let threshold = match thresholds {
        Some(t) => *t
            .first()
            .ok_or_else(|| Error::Contract("checkpoint has no threshold".into()))?,
        None => select_threshold(&set).unwrap_or(0.5),
    };
    Ok(vec![report_row(model_name, "conversion", &set, threshold)])
}

fn cmd_prepare(cfg: &RunConfig, out: &mut Outputs, clicks: &Path, buys: &Path) -> Result<()> {
    let log = parse_recsys(clicks, buys)?;
    let data = prepare(&log, &cfg.prepare, cfg.seed)?;
    write_dataset(out, &data.train, &data.test, &data.vocab)?;
    out.write("summary.json", to_json(&data.summary)?.as_bytes())
}

fn cmd_synth(cfg: &RunConfig, out: &mut Outputs, recsys: bool) -> Result<()> {
    if recsys {
        let buyers = write_recsys_surrogate(
            &cfg.surrogate,
            cfg.seed,
            out.path("clicks.dat"),
            out.path("buys.dat"),
        )?;
        out.record("clicks.dat")?;
        out.record("buys.dat")?;
        let summary = serde_json::json!({ "sessions": cfg.surrogate.sessions, "buying_sessions": buyers });
        return out.write("summary.json", to_json(&summary)?.as_bytes());
    }
    let (data, truth) = synth_dataset(&cfg.synth, cfg.seed, cfg.model.max_len)?;
    write_dataset(out, &data.train, &data.test, &data.vocab)?;
    out.write("ground_truth.json", to_json(&truth)?.as_bytes())?;
    out.write("summary.json", to_json(&data.summary)?.as_bytes())
}

#[derive(Debug, Serialize)]
struct TrainReport {
    model: ModelKind,
    seed: u64,
    config: RunConfig,
    decay_schedule: String,
    threshold_rule: &'static str,
    train_trails: usize,
    validation_trails: usize,
    epoch_losses: Vec<f64>,
    learning_rates: Vec<f64>,
    thresholds: Vec<f64>,
    validation_metrics: Vec<ReportRow>,
    wall_time_seconds: f64,
}

const THRESHOLD_RULE: &str = "F1-maximizing score threshold on the validation holdout";

fn cmd_train(cfg: &RunConfig, out: &mut Outputs, data: &Path, kind: ModelKind) -> Result<()> {
    let start = Instant::now();
    let ds = Dataset::open(data)?;
    let all = ds.train()?;
    let (fit, validation) = if cfg.train.validation_fraction > 0.0 {
        split_train_test(all, cfg.train.validation_fraction, cfg.seed ^ 0x5eed)?
    } else {
        (all, Vec::new())
    };
    let spec = cfg.model_config(kind, ds.vocab.len());
    let mut model = spec.build(cfg.seed)?;
    let history = train_with_callback(model.as_mut(), &fit, &cfg.train, |epoch, loss| {
        eprintln!("epoch {epoch}: loss {loss:.6}");
    })?;
    let held = if validation.is_empty() { &fit } else { &validation };
    let preds = predict(model.as_ref(), held, cfg.eval_batch_size, false)?;
    let labels: Vec<usize> = held.iter().map(|t| t.label).collect();
    let rows = score_rows(kind.as_str(), &preds, &labels, None)?;
    let thresholds: Vec<f64> = rows.iter().map(|r| r.threshold).collect();

    let mut ckpt = Checkpoint::from_model(model.as_ref(), cfg.seed);
    ckpt.vocab_fingerprint = Some(ds.fingerprint.clone());
    ckpt.thresholds = thresholds.clone();
    ckpt.run_config = Some(serde_json::to_value(cfg).map_err(|e| Error::Parse(e.to_string()))?);
    ckpt.save(out.path(CHECKPOINT_FILE))?;
    out.record(CHECKPOINT_FILE)?;

    let report = TrainReport {
        model: kind,
        seed: cfg.seed,
        config: cfg.clone(),
        decay_schedule: format!("learning_rate * {}^epoch, applied per epoch", cfg.train.decay),
        threshold_rule: THRESHOLD_RULE,
        train_trails: fit.len(),
        validation_trails: validation.len(),
        epoch_losses: history.epoch_losses,
        learning_rates: history.learning_rates,
        thresholds,
        validation_metrics: rows,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    out.write("run_report.json", to_json(&report)?.as_bytes())
}

fn load_pair(data: &Path, checkpoint: &Path) -> Result<(Dataset, Checkpoint, Box<dyn SequenceModel>)> {
    let ds = Dataset::open(data)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ds.check(&ckpt)?;
    let model = ckpt.into_model()?;
    Ok((ds, ckpt, model))
}

fn cmd_eval(cfg: &RunConfig, out: &mut Outputs, data: &Path, checkpoint: &Path) -> Result<()> {
    let start = Instant::now();
    let (ds, ckpt, model) = load_pair(data, checkpoint)?;
    let test = ds.test()?;
    let preds = predict(model.as_ref(), &test, cfg.eval_batch_size, false)?;
    let labels: Vec<usize> = test.iter().map(|t| t.label).collect();
    let thresholds = (!ckpt.thresholds.is_empty()).then_some(ckpt.thresholds.as_slice());
    let rows = score_rows(model.kind().as_str(), &preds, &labels, thresholds)?;
    let mut csv = Vec::new();
    write_report_csv(&mut csv, &rows)?;
    out.write("metrics.csv", &csv)?;
    let report = serde_json::json!({
        "model": model.kind(),
        "seed": cfg.seed,
        "checkpoint_seed": ckpt.seed,
        "config": cfg,
        "threshold_rule": THRESHOLD_RULE,
        "test_trails": test.len(),
        "metrics": rows,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
    });
    out.write("eval_report.json", to_json(&report)?.as_bytes())
}

/// Right-aligned matrix CSV: one row per trail, `width` position columns with
/// the most recent event last; missing cells are empty.
pub fn explanation_csv(
    name: &str,
    ids: &[String],
    rows: &[Vec<Option<f64>>],
    width: usize,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![name.to_string()];
    header.extend((0..width).rev().map(|k| format!("pos_-{k}")));
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for (id, row) in ids.iter().zip(rows) {
        let mut rec = vec![id.clone()];
        rec.extend(std::iter::repeat_n(
            String::new(),
            width.saturating_sub(row.len()),
        ));
        rec.extend(row.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
        w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn cmd_explain(
    cfg: &RunConfig,
    out: &mut Outputs,
    data: &Path,
    checkpoint: &Path,
    num: Option<usize>,
) -> Result<()> {
    let (ds, _ckpt, model) = load_pair(data, checkpoint)?;
    if !matches!(
        model.kind(),
        ModelKind::Dtain | ModelKind::GruAttn | ModelKind::GruSelfAttn
    ) {
        return Err(Error::Config(format!(
            "{} has no attention to explain; use dtain or gru_attn",
            model.kind()
        )));
    }
    let wanted = num.unwrap_or(cfg.explain.num_converters);
    let converters: Vec<UserTrail> = ds.test()?.into_iter().filter(|t| t.label != 0).collect();
    if converters.len() < wanted {
        eprintln!(
            "warning: {} converters requested, only {} available",
            wanted,
            converters.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked = sample(&mut rng, converters.len(), wanted.min(converters.len())).into_vec();
    picked.sort_unstable();
    let chosen: Vec<UserTrail> = picked.into_iter().map(|i| converters[i].clone()).collect();
    let preds = predict(model.as_ref(), &chosen, cfg.eval_batch_size, true)?;
    let ids: Vec<String> = chosen.iter().map(|t| t.id.clone()).collect();
    let width = model.config().max_len;
    type Field = fn(&crate::model::EventExplanation) -> Option<f64>;
    let matrices: [(&str, Field); 4] = [
        ("attention", |e| e.attention),
        ("gate", |e| e.gate),
        ("theta", |e| e.theta),
        ("mu", |e| e.mu),
    ];
    for (name, field) in matrices {
        let rows: Vec<Vec<Option<f64>>> = preds
            .iter()
            .map(|p| {
                p.explanation
                    .as_ref()
                    .map(|x| x.events.iter().map(field).collect())
                    .unwrap_or_default()
            })
            .collect();
        if rows.iter().flatten().all(Option::is_none) {
            continue;
        }
        out.write(
            &format!("{name}.csv"),
            explanation_csv(name, &ids, &rows, width)?.as_bytes(),
        )?;
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed)?;
    if let Command::Train {
        model: Some(kind), ..
    } = &cli.command
    {
        cfg.model_kind = *kind;
    }
    let mut out = Outputs::new(&common.out)?;
    match &cli.command {
        Command::Prepare { clicks, buys, .. } => cmd_prepare(&cfg, &mut out, clicks, buys)?,
        Command::Synth { recsys, .. } => cmd_synth(&cfg, &mut out, *recsys)?,
        Command::Train { data, .. } => cmd_train(&cfg, &mut out, data, cfg.model_kind)?,
        Command::Eval { data, checkpoint, .. } => cmd_eval(&cfg, &mut out, data, checkpoint)?,
        Command::Explain {
            data,
            checkpoint,
            num,
            ..
        } => cmd_explain(&cfg, &mut out, data, checkpoint, *num)?,
    }
    out.finish(cli.command.name(), &cfg)
}

#[cfg(test)]
mod tests;
