//! Command-line front end: `synth`, `train`, `eval`, `analyze` and
//! `gradcheck`. Every command reports failures through [`exit_code`]:
//! 0 success, 1 config or usage, 2 data, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, StdReduction};
use crate::blocks::{BlockKind, DEFAULT_ALPHA};
use crate::data::{
    self, export_dataset, load_manifest, read_manifest, select_vocabulary, synth_generate, AudioFormat, Dataset,
    Split, SynthConfig, TagVocabulary,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::gradcheck::{self, GradCheckReport};
use crate::model::{input_len_for_depth, load_checkpoint, save_checkpoint, ModelConfig, Network, DEFAULT_SCHEDULE};
use crate::train::{self, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";
pub const LAST_CHECKPOINT_FILE: &str = "last.ckpt";
pub const TEST_REPORT_FILE: &str = "test_report.csv";
pub const RUN_LOCK_FILE: &str = "run.lock";

#[derive(Debug, Parser)]
#[command(name = "wavetag", version, about = "Sample-level CNN auto-tagging on raw waveforms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic tagged dataset (audio files plus manifest.csv).
    Synth(SynthArgs),
    /// Train a network from a TOML config plus `--key value` overrides.
    Train(TrainArgs),
    /// Per-tag and macro ROC-AUC of a checkpoint on one split.
    Eval(EvalArgs),
    /// Excitation statistics of every SE block of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient checks for primitives, a block kind and a
    /// whole network.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub songs: usize,
    #[arg(long, default_value_t = 8)]
    pub tags: usize,
    #[arg(long = "input-len", default_value_t = 2187)]
    pub input_len: usize,
    #[arg(long, default_value_t = 2)]
    pub segments: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "snr-db", default_value_t = 10.0)]
    pub snr_db: f64,
    #[arg(long, default_value = "wav")]
    pub format: AudioFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` pairs; keys are dotted config paths or short aliases
    /// such as `--block`, `--lr` or `--weight-decay`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Report file; defaults to `eval_<split>.csv` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated tags for the co-occurrence matrix.
    #[arg(long, value_delimiter = ',')]
    pub tags: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to one split; all splits when omitted.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, default_value = "across-tags")]
    pub reduction: StdReduction,
    /// Pin every gate at 0.5 before capturing.
    #[arg(long = "zero-gates")]
    pub zero_gates: bool,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub block: BlockKind,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add this offset to every analytic gradient (negative control).
    #[arg(long, default_value_t = 0.0)]
    pub corrupt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    /// Vocabulary size: the most frequent training tags.
    pub num_tags: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            num_tags: 50,
        }
    }
}

/// Model settings before the vocabulary is known. Unset fields are derived
/// from `depth` and `channels` by [`ModelSection::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub block: BlockKind,
    pub depth: usize,
    pub input_len: Option<usize>,
    /// Uniform block width, used when `channel_schedule` is unset.
    pub channels: Option<usize>,
    pub channel_schedule: Option<Vec<usize>>,
    pub strided_channels: Option<usize>,
    pub alpha: f64,
    pub multi_level: Option<bool>,
    pub head_hidden: usize,
    pub dropout_head: f64,
    pub weight_decay: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let full = ModelConfig::default();
        ModelSection {
            block: full.block_kind,
            depth: full.depth,
            input_len: None,
            channels: None,
            channel_schedule: None,
            strided_channels: None,
            alpha: DEFAULT_ALPHA,
            multi_level: None,
            head_hidden: full.head_hidden,
            dropout_head: full.dropout_head,
            weight_decay: full.weight_decay,
        }
    }
}

impl ModelSection {
    fn schedule(&self) -> Result<Vec<usize>> {
        if let Some(s) = &self.channel_schedule {
            return Ok(s.clone());
        }
        if let Some(c) = self.channels {
            return Ok(vec![c; self.depth]);
        }
        if self.depth > DEFAULT_SCHEDULE.len() {
            return Err(Error::Config(format!(
                "depth {} exceeds the default schedule; set model.channels or model.channel_schedule",
                self.depth
            )));
        }
        Ok(DEFAULT_SCHEDULE[..self.depth].to_vec())
    }

    /// Fills every derived field so the section round-trips unchanged.
    pub fn resolved(&self) -> Result<ModelSection> {
        let schedule = self.schedule()?;
        Ok(ModelSection {
            input_len: Some(self.input_len.unwrap_or_else(|| input_len_for_depth(self.depth))),
            strided_channels: Some(
                self.strided_channels
                    .or(self.channels)
                    .unwrap_or_else(|| schedule.first().copied().unwrap_or(1)),
            ),
            multi_level: Some(self.multi_level.unwrap_or(self.depth >= 3)),
            channel_schedule: Some(schedule),
            ..self.clone()
        })
    }

    pub fn resolve(&self, vocab: &TagVocabulary) -> Result<ModelConfig> {
        let r = self.resolved()?;
        let cfg = ModelConfig {
            block_kind: r.block,
            depth: r.depth,
            input_len: r.input_len.expect("resolved"),
            strided_channels: r.strided_channels.expect("resolved"),
            channel_schedule: r.channel_schedule.expect("resolved"),
            alpha: r.alpha,
            multi_level: r.multi_level.expect("resolved"),
            head_hidden: r.head_hidden,
            num_tags: vocab.len(),
            dropout_head: r.dropout_head,
            weight_decay: r.weight_decay,
            tags: vocab.names().to_vec(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

const ALIASES: [(&str, &str); 16] = [
    ("block", "model.block"),
    ("depth", "model.depth"),
    ("channels", "model.channels"),
    ("alpha", "model.alpha"),
    ("multi-level", "model.multi_level"),
    ("weight-decay", "model.weight_decay"),
    ("dropout", "model.dropout_head"),
    ("lr", "train.lr"),
    ("momentum", "train.momentum"),
    ("batch-size", "train.batch_size"),
    ("epochs", "train.max_epochs"),
    ("seed", "train.seed"),
    ("manifest", "data.manifest"),
    ("tags", "data.num_tags"),
    ("out", "out_dir"),
    ("out-dir", "out_dir"),
];

fn override_path(key: &str) -> String {
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map_or_else(|| key.replace('-', "_"), |(_, path)| path.to_string())
}

/// TOML scalar if `raw` parses as one, otherwise a string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `--key value` / `--key=value` arguments into `(path, raw)` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key value, got {arg:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override --{key} has no value")))?;
                (key, v.clone())
            }
        };
        if key.is_empty() {
            return Err(Error::Config("empty override key".into()));
        }
        out.push((override_path(key), value));
    }
    Ok(out)
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text` (possibly empty), applies overrides in order (the last
    /// writer wins) and validates the result.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        for (path, raw) in overrides {
            set_path(&mut table, path, override_value(raw))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        cfg.train.validate()?;
        cfg.model.resolved()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// The config with every derived model field made explicit.
    pub fn resolved(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            model: self.model.resolved()?,
            ..self.clone()
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }
}

/// 0 success, 1 config or usage, 2 data, 3 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_)
        | Error::Format(_)
        | Error::Parse(_)
        | Error::CorruptCheckpoint(_)
        | Error::Dimension(_)
        | Error::Io { .. } => 2,
        Error::Numeric(_) | Error::Oracle(_) | Error::State(_) => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SynthConfig {
        num_songs: args.songs,
        num_tags: args.tags,
        input_len: args.input_len,
        segments_per_song: args.segments,
        seed: args.seed,
        snr_db: args.snr_db,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg)?;
    export_dataset(&data, &args.out, args.format)?;
    emit(
        out,
        &format!(
            "wrote {} songs with {} tags to {}\n",
            data.clips.len(),
            data.vocab.len(),
            args.out.join("manifest.csv").display()
        ),
    )
}

/// Manifest rows restricted to `vocab`, with audio loaded.
fn load_with_vocab(manifest: &Path, vocab: &TagVocabulary) -> Result<Dataset> {
    let m = read_manifest(manifest)?.restrict(vocab);
    Dataset::load(&m, vocab)
}

/// The checkpoint's tag names, or the top training tags of `manifest` for
/// checkpoints saved without names.
fn checkpoint_vocab(net: &Network<f32>, manifest: &Path) -> Result<TagVocabulary> {
    if net.config.tags.is_empty() {
        select_vocabulary(&read_manifest(manifest)?, net.config.num_tags)
    } else {
        TagVocabulary::new(net.config.tags.clone())
    }
}

#[derive(Serialize)]
struct LockEntry {
    file: String,
    bytes: u64,
    crc32: String,
}

#[derive(Serialize)]
struct RunLock {
    command: String,
    seed: u64,
    epochs_run: usize,
    best_epoch: usize,
    best_val_loss: f64,
    artifacts: Vec<LockEntry>,
}

fn lock_entry(dir: &Path, name: &str) -> Result<LockEntry> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(LockEntry {
        file: name.to_string(),
        bytes: bytes.len() as u64,
        crc32: format!("{:08x}", crc32fast::hash(&bytes)),
    })
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let overrides = parse_overrides(&args.overrides)?;
    let cfg = RunConfig::load(args.config.as_deref(), &overrides)?.resolved()?;
    let manifest = cfg
        .data
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    let (m, vocab) = load_manifest(manifest, cfg.data.num_tags)?;
    let model_cfg = cfg.model.resolve(&vocab)?;
    let dataset = Dataset::load(&m, &vocab)?;
    let train_view = dataset.view(Some(Split::Train), model_cfg.input_len);
    let val_view = dataset.view(Some(Split::Valid), model_cfg.input_len);
    if train_view.is_empty() || val_view.is_empty() {
        return Err(Error::Data(format!(
            "{}: train and valid splits need segments of {} samples (got {} and {})",
            manifest.display(),
            model_cfg.input_len,
            train_view.len(),
            val_view.len()
        )));
    }

    let dir = &cfg.out_dir;
    create_dir(dir)?;
    write_file(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    info!(
        "{} model, depth {}, {} parameters, {} train / {} valid segments",
        model_cfg.block_kind,
        model_cfg.depth,
        model_cfg.param_count(),
        train_view.len(),
        val_view.len()
    );
    let mut net = Network::<f32>::build(model_cfg, cfg.train.seed)?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train::fit(&mut net, &train_view, &val_view, &cfg.train, Some(&mut log))?;
    drop(log);
    save_checkpoint(&outcome.best, dir.join(BEST_CHECKPOINT_FILE))?;
    save_checkpoint(&net, dir.join(LAST_CHECKPOINT_FILE))?;

    let mut files = vec![RESOLVED_CONFIG_FILE, TRAIN_LOG_FILE, BEST_CHECKPOINT_FILE, LAST_CHECKPOINT_FILE];
    let mut best = outcome.best;
    let test_view = dataset.view(Some(Split::Test), best.config.input_len);
    let mut summary = format!(
        "epochs={} best_epoch={} best_val_loss={:.6}\n",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_loss
    );
    if !test_view.is_empty() {
        match eval::evaluate(&mut best, &test_view) {
            Ok(report) => {
                report.write_csv(dir.join(TEST_REPORT_FILE))?;
                files.push(TEST_REPORT_FILE);
                summary.push_str(&format!("test_macro_auc={:.6}\n", report.macro_auc));
            }
            Err(Error::Data(msg)) => log::warn!("test split not evaluated: {msg}"),
            Err(e) => return Err(e),
        }
    }
    let lock = RunLock {
        command: "train".into(),
        seed: cfg.train.seed,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        artifacts: files
            .iter()
            .map(|f| lock_entry(dir, f))
            .collect::<Result<_>>()?,
    };
    let lock = toml::to_string(&lock).map_err(|e| Error::Config(format!("serializing run lock: {e}")))?;
    write_file(&dir.join(RUN_LOCK_FILE), lock)?;
    emit(out, &summary)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut net = load_checkpoint(&args.checkpoint)?;
    let vocab = checkpoint_vocab(&net, &args.manifest)?;
    let dataset = load_with_vocab(&args.manifest, &vocab)?;
    let view = dataset.view(Some(args.split), net.config.input_len);
    if view.is_empty() {
        return Err(Error::Data(format!(
            "{}: no {} segments of {} samples",
            args.manifest.display(),
            args.split,
            net.config.input_len
        )));
    }
    let report = eval::evaluate(&mut net, &view)?;
    let path = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}.csv", args.split))
    });
    report.write_csv(&path)?;
    info!("wrote {}", path.display());
    emit(out, &report.to_csv())
}

pub fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let mut net = load_checkpoint(&args.checkpoint)?;
    if net.se_block_indices().is_empty() {
        return Err(Error::Config(format!(
            "{}: {} network has no SE units",
            args.checkpoint.display(),
            net.config.block_kind
        )));
    }
    if args.zero_gates {
        net.zero_se_gates();
    }
    let vocab = checkpoint_vocab(&net, &args.manifest)?;
    let dataset = load_with_vocab(&args.manifest, &vocab)?;
    let view = dataset.view(args.split, net.config.input_len);
    let mut report = analysis::analyze(&mut net, &view, args.reduction)?;
    if !args.tags.is_empty() {
        let songs: Vec<(String, Vec<String>)> = view
            .clips()
            .into_iter()
            .map(|c| {
                let clip = &dataset.clips[c];
                let tags = vocab
                    .names()
                    .iter()
                    .zip(&clip.tags)
                    .filter(|(_, &on)| on)
                    .map(|(t, _)| t.clone())
                    .collect();
                (clip.song_id.clone(), tags)
            })
            .collect();
        report.cooccurrence = Some(data::cooccurrence(&songs, &vocab, &args.tags)?);
    }
    let written = analysis::emit_report(&report, &args.out)?;
    let mut text = String::from("block,std\n");
    for b in &report.blocks {
        text.push_str(&format!("{},{:.6}\n", b.means.block + 1, b.std));
    }
    for p in written {
        text.push_str(&format!("wrote {}\n", p.display()));
    }
    emit(out, &text)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut reports: Vec<GradCheckReport> = gradcheck::primitive_suite(args.seed, args.corrupt)?;
    reports.extend(gradcheck::block_suite(args.block, args.seed, args.corrupt)?);
    reports.push(gradcheck::model_check(args.block, args.depth, args.seed, args.corrupt)?);
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!("{r}\n"));
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    text.push_str(&format!(
        "max_rel_err={:.3e} worst_op={} failed={failed}/{}\n",
        worst.max_rel_error,
        worst.label,
        reports.len()
    ));
    emit(out, &text)?;
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to `err`.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = err.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(args: &[&str]) -> Vec<(String, String)> {
        parse_overrides(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn aliases_map_to_dotted_paths() {
        let o = pairs(&["--block", "se", "--multi-level", "true", "--train.plateau.factor=4"]);
        assert_eq!(
            o,
            [
                ("model.block".to_string(), "se".to_string()),
                ("model.multi_level".to_string(), "true".to_string()),
                ("train.plateau.factor".to_string(), "4".to_string())
            ]
        );
        assert!(parse_overrides(&["--lr".to_string()]).is_err());
        assert!(parse_overrides(&["lr".to_string(), "1".to_string()]).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let text = "[model]\nblock = \"basic\"\ndepth = 3\nchannels = 4\n[train]\nlr = 0.1\n";
        let cfg = RunConfig::from_toml_with_overrides(
            text,
            &pairs(&["--block", "rese2", "--weight-decay", "1e-4", "--lr", "0.5", "--lr", "0.02"]),
        )
        .unwrap();
        assert_eq!(cfg.model.block, BlockKind::Rese2);
        assert_eq!(cfg.model.weight_decay, 1e-4);
        assert_eq!(cfg.train.lr, 0.02);
        assert_eq!(cfg.model.depth, 3);
    }

    #[test]
    fn integer_values_fill_float_fields() {
        let cfg = RunConfig::from_toml_with_overrides("", &pairs(&["--weight-decay", "0", "--lr", "1"])).unwrap();
        assert_eq!(cfg.model.weight_decay, 0.0);
        assert_eq!(cfg.train.lr, 1.0);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = RunConfig::from_toml_with_overrides("", &pairs(&["--model.colour", "red"])).unwrap_err();
        assert_eq!(exit_code(&e), 1);
        let e = RunConfig::from_toml_with_overrides("[train\n", &[]).unwrap_err();
        assert_eq!(exit_code(&e), 1);
        let e = RunConfig::from_toml_with_overrides("", &pairs(&["--block", "dense"])).unwrap_err();
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn resolution_is_explicit_and_stable() {
        let cfg = RunConfig::from_toml_with_overrides("", &pairs(&["--depth", "6", "--channels", "16"]))
            .unwrap()
            .resolved()
            .unwrap();
        assert_eq!(cfg.model.input_len, Some(2187));
        assert_eq!(cfg.model.channel_schedule, Some(vec![16; 6]));
        assert_eq!(cfg.model.strided_channels, Some(16));
        assert_eq!(cfg.model.multi_level, Some(true));
        let again = RunConfig::from_toml_with_overrides(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.resolved().unwrap(), cfg);
    }

    #[test]
    fn default_model_is_the_full_network() {
        let vocab = TagVocabulary::new((0..50).map(|i| format!("t{i}")).collect()).unwrap();
        let m = ModelSection::default().resolve(&vocab).unwrap();
        let full = ModelConfig {
            tags: vocab.names().to_vec(),
            ..ModelConfig::default()
        };
        assert_eq!(m, full);
    }

    #[test]
    fn se_multi_and_weight_decay_variants() {
        let vocab = TagVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let cfg = RunConfig::from_toml_with_overrides("", &pairs(&["--block", "se", "--multi-level", "true"])).unwrap();
        let m = cfg.model.resolve(&vocab).unwrap();
        assert_eq!((m.block_kind, m.multi_level), (BlockKind::Se, true));
        assert_eq!(m.head_input_dim(), 256 + 512 + 512);
        let cfg =
            RunConfig::from_toml_with_overrides("", &pairs(&["--block", "rese2", "--weight-decay", "1e-4"])).unwrap();
        let m = cfg.model.resolve(&vocab).unwrap();
        assert_eq!((m.block_kind, m.weight_decay), (BlockKind::Rese2, 1e-4));
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Config(String::new())), 1);
        assert_eq!(exit_code(&Error::Data(String::new())), 2);
        assert_eq!(exit_code(&Error::io("x", std::io::ErrorKind::NotFound.into())), 2);
        assert_eq!(exit_code(&Error::Numeric(String::new())), 3);
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(main_with_args(["wavetag", "frobnicate"], &mut out, &mut err), 1);
        assert_eq!(main_with_args(["wavetag", "--help"], &mut out, &mut err), 0);
        assert_eq!(main_with_args(["wavetag", "gradcheck", "--block", "dense"], &mut out, &mut err), 1);
    }

    #[test]
    fn train_accepts_trailing_overrides() {
        let cli = Cli::try_parse_from(["wavetag", "train", "--config", "c.toml", "--block", "se", "--lr", "0.1"]).unwrap();
        let Command::Train(a) = cli.command else { panic!("not train") };
        assert_eq!(a.config.as_deref(), Some(Path::new("c.toml")));
        assert_eq!(a.overrides, ["--block", "se", "--lr", "0.1"]);
    }
}
