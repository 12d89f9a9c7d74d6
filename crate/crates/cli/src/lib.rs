//! Batch command surface: one JSON run config, one command per pipeline stage.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use table2vec::eval::{
    baseline_linear, synth_generate, AccuracyWeighting, BaselineConfig, EvalError, MetricSet, SynthConfig,
};
use table2vec::interpret::{genome_report, GenomeReport, InterpretConfig, InterpretError};
use table2vec::model::{train, write_log, EpochLog, ModelConfig, ModelError, Table2VecModel, TrainConfig};
use table2vec::prep::{build_schema, FeatureSchema, PrepError, RecognizerConfig, SchemaOverrides};
use table2vec::table::{compute_stats, load_table, save_table, BigTable, TableError, TableFormat, TableStats};

pub const SCHEMA_FILE: &str = "schema.json";
pub const STATS_FILE: &str = "stats.json";
pub const TABLE_FILE: &str = "table.csv";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const GENOME_FILE: &str = "genome.json";
pub const GENOME_BARS_FILE: &str = "genome.txt";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub table: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Directory receiving every output file; created on demand.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    /// Defaults to the first configured task.
    pub task: Option<String>,
    pub weighting: AccuracyWeighting,
    /// Used when evaluating embeddings through the linear baseline.
    pub baseline: BaselineConfig,
}

/// Everything a run needs. Sub-config `seed` fields are overwritten by the
/// top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub table: TableFormat,
    /// Label columns trained as tasks.
    pub tasks: Vec<String>,
    pub prep: RecognizerConfig,
    pub overrides: SchemaOverrides,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub interpret: InterpretConfig,
    pub synth: SynthConfig,
    pub evaluate: EvaluateConfig,
    /// Batch size for embedding and prediction.
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths {
                output_dir: PathBuf::from("."),
                ..Paths::default()
            },
            table: TableFormat::default(),
            tasks: vec!["churn".into()],
            prep: RecognizerConfig::default(),
            overrides: SchemaOverrides::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            interpret: InterpretConfig::default(),
            synth: SynthConfig::default(),
            evaluate: EvaluateConfig::default(),
            batch_size: 64,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Copies the top-level seed into every seeded sub-config.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.interpret.seed = self.seed;
        self.synth.seed = self.seed;
        self.evaluate.baseline.seed = self.seed;
    }

    fn output(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.paths.output_dir)?;
        Ok(self.paths.output_dir.join(name))
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn table_kind(e: &TableError) -> &'static str {
    match e {
        TableError::Io(_) => "io",
        TableError::Parse(_) => "parse",
        TableError::Schema(_) => "table_schema",
        TableError::MissingDateIndex => "missing_date_index",
        TableError::EmptyTable => "empty_table",
        TableError::SchemaMismatch(_) => "schema_mismatch",
    }
}

fn model_kind(e: &ModelError) -> &'static str {
    match e {
        ModelError::SchemaMismatch(_) => "schema_mismatch",
        ModelError::UnknownTask(_) => "unknown_task",
        ModelError::NoLabeledCustomers => "no_labeled_customers",
        ModelError::AllTermsDisabled => "all_terms_disabled",
        ModelError::InvalidConfig(_) => "invalid_config",
        ModelError::Checkpoint(_) => "checkpoint",
        ModelError::Dynamics(_) | ModelError::Numeric(_) => "numeric",
        ModelError::Table(t) => table_kind(t),
        ModelError::Io(_) => "io",
        ModelError::Json(_) => "json",
    }
}

impl CliError {
    /// Stable machine-readable error category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "parse",
            CliError::Table(e) => table_kind(e),
            CliError::Prep(e) => match e {
                PrepError::MixedKindFeature(_) => "mixed_kind_feature",
                PrepError::InvalidConfig(_) => "invalid_config",
                PrepError::EmptyTable => "empty_table",
                PrepError::UnknownFeature(_) => "unknown_feature",
                PrepError::Table(t) => table_kind(t),
            },
            CliError::Model(e) => model_kind(e),
            CliError::Interpret(e) => match e {
                InterpretError::InvalidConfig(_) => "invalid_config",
                InterpretError::PositionOutOfRange { .. } => "position_out_of_range",
                InterpretError::UnknownClass { .. } => "unknown_class",
                InterpretError::InvalidCell(_) => "invalid_cell",
                InterpretError::EmptyTable => "empty_table",
                InterpretError::Model(m) => model_kind(m),
                InterpretError::Table(t) => table_kind(t),
            },
            CliError::Eval(e) => match e {
                EvalError::SingleClass => "single_class",
                EvalError::LengthMismatch(..) => "length_mismatch",
                EvalError::NonFinite => "non_finite",
                EvalError::InfeasibleConfig(_) => "infeasible_config",
                EvalError::Numeric(_) => "numeric",
                EvalError::Table(t) => table_kind(t),
            },
        }
    }

    /// `{"error": {"command", "kind", "message"}}`.
    pub fn to_json(&self, command: &str) -> String {
        serde_json::json!({
            "error": { "command": command, "kind": self.kind(), "message": self.to_string() }
        })
        .to_string()
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "table2vec",
    version,
    about = "Customer representations from heterogeneous tables"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run config; absent fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recognize feature kinds and report table statistics.
    Profile {
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Generate a synthetic table.
    Synth,
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Write one representation row per customer.
    Embed {
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write per-customer class probabilities.
    Predict {
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Write a genome report.
    Interpret {
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write a text bar chart.
        #[arg(long)]
        bars: bool,
    },
    /// Score predictions, or embeddings through the linear baseline.
    Evaluate {
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, conflicts_with = "embeddings")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Profile { .. } => "profile",
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Embed { .. } => "embed",
            Command::Predict { .. } => "predict",
            Command::Interpret { .. } => "interpret",
            Command::Evaluate { .. } => "evaluate",
        }
    }

    /// Process exit code on failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Command::Profile { .. } => 10,
            Command::Synth => 11,
            Command::Train { .. } => 12,
            Command::Embed { .. } => 13,
            Command::Predict { .. } => 14,
            Command::Interpret { .. } => 15,
            Command::Evaluate { .. } => 16,
        }
    }
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

/// Loads the config named by `--config` and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.common.out {
        cfg.paths.output_dir.clone_from(o);
    }
    let p = &mut cfg.paths;
    match &cli.command {
        Command::Profile { table } => set(&mut p.table, table),
        Command::Synth => {}
        Command::Train { table, schema } => {
            set(&mut p.table, table);
            set(&mut p.schema, schema);
        }
        Command::Embed { table, checkpoint }
        | Command::Predict { table, checkpoint, .. }
        | Command::Interpret { table, checkpoint, .. } => {
            set(&mut p.table, table);
            set(&mut p.checkpoint, checkpoint);
        }
        Command::Evaluate {
            table,
            predictions,
            embeddings,
            ..
        } => {
            set(&mut p.table, table);
            set(&mut p.predictions, predictions);
            set(&mut p.embeddings, embeddings);
        }
    }
    cfg.propagate_seed();
    Ok(cfg)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Profile { .. } => cmd_profile(&cfg).map(drop),
        Command::Synth => cmd_synth(&cfg).map(drop),
        Command::Train { .. } => cmd_train(&cfg).map(drop),
        Command::Embed { .. } => cmd_embed(&cfg).map(drop),
        Command::Predict { task, .. } => cmd_predict(&cfg, task.as_deref()).map(drop),
        Command::Interpret { bars, .. } => cmd_interpret(&cfg, *bars).map(drop),
        Command::Evaluate { task, .. } => cmd_evaluate(&cfg, task.as_deref()).map(drop),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("no {what} path given")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Loads the input table. Configured label columns and task columns are
/// read as labels when the file has them.
pub fn load_input(cfg: &RunConfig) -> Result<BigTable, CliError> {
    let path = required(&cfg.paths.table, "table")?;
    let delimiter = u8::try_from(cfg.table.delimiter)
        .map_err(|_| CliError::Input("delimiter must be a single-byte character".into()))?;
    let file = fs::File::open(path)?;
    let headers: Vec<String> = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_reader(file)
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut format = cfg.table.clone();
    for t in &cfg.tasks {
        if !format.label_columns.contains(t) {
            format.label_columns.push(t.clone());
        }
    }
    format.label_columns.retain(|l| headers.contains(l));
    // Without a date column the table still loads; stages that need the
    // date index report it missing.
    if format.date_column.as_ref().is_some_and(|d| !headers.contains(d)) {
        format.date_column = None;
    }
    Ok(load_table(path, &format)?)
}

pub fn cmd_profile(cfg: &RunConfig) -> Result<(FeatureSchema, TableStats), CliError> {
    let table = load_input(cfg)?;
    let schema = build_schema(&table, &cfg.prep, &cfg.overrides)?;
    let stats = compute_stats(&table, &schema)?;
    write_json(&cfg.output(SCHEMA_FILE)?, &schema)?;
    write_json(&cfg.output(STATS_FILE)?, &stats)?;
    Ok((schema, stats))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let table = synth_generate(&cfg.synth)?;
    let path = cfg.output(TABLE_FILE)?;
    save_table(&table, &path)?;
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(Table2VecModel, Vec<EpochLog>), CliError> {
    let table = load_input(cfg)?;
    let schema: FeatureSchema = serde_json::from_str(&fs::read_to_string(required(&cfg.paths.schema, "schema")?)?)?;
    let (model, log) = train(&table, &schema, &cfg.tasks, &cfg.model, &cfg.train)?;
    model.save(cfg.output(CHECKPOINT_FILE)?)?;
    let mut w = std::io::BufWriter::new(fs::File::create(cfg.output(LOG_FILE)?)?);
    write_log(&log, &mut w)?;
    w.flush()?;
    Ok((model, log))
}

fn load_model(cfg: &RunConfig) -> Result<Table2VecModel, CliError> {
    Ok(Table2VecModel::load(required(&cfg.paths.checkpoint, "checkpoint")?)?)
}

fn write_rows(path: &Path, header: Vec<String>, ids: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(rows) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Customer ids and float columns of a file written by embed or predict.
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut fields = rec.iter();
        ids.push(fields.next().unwrap_or_default().to_string());
        rows.push(
            fields
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Input(format!("not a number: {f}")))
                })
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok((ids, rows))
}

pub fn cmd_embed(cfg: &RunConfig) -> Result<Vec<Vec<f64>>, CliError> {
    let model = load_model(cfg)?;
    let table = load_input(cfg)?;
    let reps = model.represent(&model.encode_table(&table)?, cfg.batch_size)?;
    let mut header = vec![table.id_column().to_string()];
    header.extend((0..model.representation_width()).map(|i| format!("r{i}")));
    write_rows(&cfg.output(EMBEDDINGS_FILE)?, header, table.customers(), &reps)?;
    Ok(reps)
}

pub fn cmd_predict(cfg: &RunConfig, task: Option<&str>) -> Result<Vec<Vec<f64>>, CliError> {
    let model = load_model(cfg)?;
    let task = match task {
        Some(t) => t.to_string(),
        None => model
            .tasks()
            .first()
            .map(|t| t.name.clone())
            .ok_or_else(|| CliError::Usage("model has no tasks".into()))?,
    };
    let table = load_input(cfg)?;
    let probs = model.predict(&model.encode_table(&table)?, &task, cfg.batch_size)?;
    let classes = probs.first().map_or(0, Vec::len);
    let mut header = vec![table.id_column().to_string()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    write_rows(&cfg.output(PREDICTIONS_FILE)?, header, table.customers(), &probs)?;
    Ok(probs)
}

pub fn cmd_interpret(cfg: &RunConfig, bars: bool) -> Result<GenomeReport, CliError> {
    let model = load_model(cfg)?;
    let table = load_input(cfg)?;
    let report = genome_report(&model, &table, &cfg.interpret)?;
    write_json(&cfg.output(GENOME_FILE)?, &report)?;
    if bars {
        fs::write(cfg.output(GENOME_BARS_FILE)?, report.render_bars(40))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOutput {
    pub task: String,
    /// `predictions` or `embeddings`.
    pub source: String,
    pub customers: usize,
    pub metrics: MetricSet,
}

pub fn cmd_evaluate(cfg: &RunConfig, task: Option<&str>) -> Result<EvaluateOutput, CliError> {
    let task = task
        .map(String::from)
        .or_else(|| cfg.evaluate.task.clone())
        .or_else(|| cfg.tasks.first().cloned())
        .ok_or_else(|| CliError::Usage("no task given".into()))?;
    let table = load_input(cfg)?;
    let labels = table
        .labels(&task)
        .ok_or_else(|| CliError::Input(format!("table has no label column {task}")))?;
    let (source, path) = match (&cfg.paths.predictions, &cfg.paths.embeddings) {
        (Some(p), _) => ("predictions", p),
        (None, Some(e)) => ("embeddings", e),
        (None, None) => return Err(CliError::Usage("evaluate needs predictions or embeddings".into())),
    };
    let (ids, rows) = read_rows(path)?;
    let by_id: BTreeMap<&str, &Vec<f64>> = ids.iter().map(String::as_str).zip(&rows).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (c, id) in table.customers().iter().enumerate() {
        let Some(label) = labels[c] else { continue };
        let row = by_id
            .get(id.as_str())
            .ok_or_else(|| CliError::Input(format!("no row for customer {id}")))?;
        x.push((*row).clone());
        y.push(label != 0);
    }
    let metrics = if source == "predictions" {
        // Positive score is one minus the probability of class 0.
        let scores: Vec<f64> = x.iter().map(|r| 1.0 - r.first().copied().unwrap_or(1.0)).collect();
        MetricSet::from_probabilities(&scores, &y, cfg.evaluate.weighting)?
    } else {
        let baseline = BaselineConfig {
            weighting: cfg.evaluate.weighting,
            ..cfg.evaluate.baseline.clone()
        };
        baseline_linear(&x, &y, &baseline)?.1
    };
    let out = EvaluateOutput {
        task,
        source: source.into(),
        customers: y.len(),
        metrics,
    };
    write_json(&cfg.output(METRICS_FILE)?, &out)?;
    Ok(out)
}
