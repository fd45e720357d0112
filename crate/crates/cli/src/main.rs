//! Command-line pipeline around the `graphdx` library: synthesize a
//! planted-cluster dataset, ingest event tables into stay files, train
//! the joint embedding, ablate schema choices, rank diagnoses for new
//! stays, and score held-out stays.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 a
//! prediction input contained treatment events.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use graphdx::ehr::{MapOptions, ALL_EVENT_TYPES};
use graphdx::embedding::EmbeddingModel;
use graphdx::hin::{build_graph, EventMapper, NetworkSchema, PathSchema};
use graphdx::ingest::{
    load_stays, load_tables, save_stays, split, CohortTable, IngestError, PatientStay, TableSpec,
};
use graphdx::metrics::{paired_sign_flip, ApDenominator};
use graphdx::predict::{compose_patient, diagnosis_aurocs, evaluate, rank_diagnoses, PredictError};
use graphdx::synth::{generate, write_dataset, SynthError, SynthSpec};
use graphdx::trainer::{active_schemas, train, TrainConfig, TrainError, TreatmentSubset};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_LEAKAGE: u8 = 4;

#[derive(Parser)]
#[command(name = "graphdx", version, about = "Clinical diagnosis ranking over a typed event graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted diagnosis clusters.
    Synth(SynthArgs),
    /// Load event tables, split stays, and write train/test stay files.
    Ingest(IngestArgs),
    /// Train embeddings on a stay file and save the model.
    Train(TrainArgs),
    /// Train one model per schema choice and report ranking quality.
    Ablate(AblateArgs),
    /// Rank diagnosis codes for each stay in an evidence file.
    Predict(PredictArgs),
    /// Score a model against held-out stays with recorded diagnoses.
    Evaluate(EvaluateArgs),
}

/// A failed command, tagged with the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Leakage(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Data(_) => EXIT_DATA,
            Failure::Leakage(_) => EXIT_LEAKAGE,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Leakage(e) => e,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn config_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn data_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn ingest_failure(e: IngestError) -> Failure {
    match e {
        IngestError::SpecSyntax(_)
        | IngestError::BadSpec { .. }
        | IngestError::SplitInfeasible { .. }
        | IngestError::CohortParse { .. }
        | IngestError::CohortOverlap { .. } => config_failure(e),
        _ => data_failure(e),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config { .. } => config_failure(e),
        _ => data_failure(e),
    }
}

fn predict_failure(e: PredictError) -> Failure {
    match e {
        PredictError::Leakage { .. } => Failure::Leakage(e.into()),
        _ => data_failure(e),
    }
}

fn synth_failure(e: SynthError) -> Failure {
    match e {
        SynthError::Infeasible { .. } => config_failure(e),
        _ => data_failure(e),
    }
}

/// Writes command output to stdout. A reader that closes the pipe early
/// (`graphdx predict ... | head`) ends the run normally instead of
/// aborting it.
fn emit(text: impl std::fmt::Display) -> CmdResult {
    let mut out = io::stdout().lock();
    match write!(out, "{text}").and_then(|()| out.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(data_failure(
            anyhow::Error::new(e).context("writing to stdout"),
        )),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::Train(args) => cmd_train(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}

// ---------------------------------------------------------------------------
// run manifests

/// Key-value record of one command run: arguments, input and output
/// digests, wall time. Written next to the artifacts it describes.
struct Manifest {
    started: Instant,
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &str) -> Manifest {
        let mut m = Manifest {
            started: Instant::now(),
            lines: Vec::new(),
        };
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m
    }

    fn push(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<(), Failure> {
        let digest = sha256_hex(path)?;
        self.push(&format!("input.{name}"), path.display());
        self.push(&format!("input.{name}.sha256"), digest);
        Ok(())
    }

    fn output(&mut self, name: &str, path: &Path) -> Result<(), Failure> {
        let digest = sha256_hex(path)?;
        self.push(&format!("output.{name}"), path.display());
        self.push(&format!("output.{name}.sha256"), digest);
        Ok(())
    }

    fn write(mut self, path: &Path) -> Result<(), Failure> {
        self.push("wall_ms", self.started.elapsed().as_millis());
        let mut text = String::new();
        for (key, value) in &self.lines {
            writeln!(text, "{key} = {value}").unwrap();
        }
        fs::write(path, text)
            .with_context(|| format!("writing manifest {}", path.display()))
            .map_err(Failure::Data)
    }
}

fn sha256_hex(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path)
        .with_context(|| format!("digesting {}", path.display()))
        .map_err(Failure::Data)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").unwrap();
    }
    Ok(hex)
}

fn manifest_path(artifact: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest", artifact.display()))
}

// ---------------------------------------------------------------------------
// shared argument handling

/// Training knobs shared by `train` and `ablate`. A config file is
/// applied first, then any individual flags on top of it.
#[derive(Args)]
struct TrainKnobs {
    /// `key = value` file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Items per batch step.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate; decays linearly to one hundredth.
    #[arg(long)]
    lr0: Option<f64>,
    /// Probability a batch step runs the unsupervised objective.
    #[arg(long)]
    omega: Option<f64>,
    /// Ranking margin for the supervised objective.
    #[arg(long)]
    margin: Option<f64>,
    /// L2 weight decay.
    #[arg(long)]
    lambda: Option<f64>,
    /// Negatives per supervised item.
    #[arg(long)]
    sup_negatives: Option<usize>,
    /// Negatives per unsupervised pair.
    #[arg(long)]
    unsup_negatives: Option<usize>,
    /// Exponent on degree in the negative distribution.
    #[arg(long)]
    negative_exponent: Option<f64>,
    /// `uniform` or `counts` schema choice while sampling pairs.
    #[arg(long)]
    schema_weighting: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print running losses every this many batch steps.
    #[arg(long)]
    log_every: Option<usize>,
    /// Single-threaded reproducible mode. The only mode built in;
    /// passing `false` is rejected rather than silently ignored.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,
    /// Metapath list: `default`, `none`, or comma-separated labels.
    #[arg(long, default_value = "default")]
    schemas: String,
    /// Treatment types embedded alongside diagnostic ones: `all`,
    /// `none`, or a comma-separated subset of pres,proc,diag.
    #[arg(long, default_value = "all")]
    treatment: String,
    /// Collapse diagnosis codes to their cohort group labels.
    #[arg(long)]
    cohorts: bool,
}

impl TrainKnobs {
    fn resolve_config(&self) -> Result<TrainConfig, Failure> {
        if !self.deterministic {
            return Err(config_failure(anyhow!(
                "only the deterministic single-threaded mode is built in"
            )));
        }
        let mut config = match &self.config {
            Some(path) => TrainConfig::from_file(path).map_err(train_failure)?,
            None => TrainConfig::default(),
        };
        let overrides = [
            ("dim", self.dim.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("lr0", self.lr0.map(|v| v.to_string())),
            ("omega", self.omega.map(|v| v.to_string())),
            ("margin", self.margin.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("sup_negatives", self.sup_negatives.map(|v| v.to_string())),
            ("unsup_negatives", self.unsup_negatives.map(|v| v.to_string())),
            (
                "negative_exponent",
                self.negative_exponent.map(|v| v.to_string()),
            ),
            ("schema_weighting", self.schema_weighting.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("log_every", self.log_every.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                config.apply_kv(key, &value).map_err(train_failure)?;
            }
        }
        config.validate().map_err(train_failure)?;
        Ok(config)
    }

    fn resolve_treatment(&self) -> Result<TreatmentSubset, Failure> {
        TreatmentSubset::parse(&self.treatment).map_err(train_failure)
    }

    fn resolve_metapaths(&self) -> Result<Vec<PathSchema>, Failure> {
        parse_schemas(&self.schemas)
    }
}

fn parse_schemas(text: &str) -> Result<Vec<PathSchema>, Failure> {
    match text.trim() {
        "default" => Ok(PathSchema::default_metapaths()),
        "none" => Ok(Vec::new()),
        rest => rest
            .split(',')
            .map(str::trim)
            .filter(|part| !part.is_empty())
            .map(|part| {
                PathSchema::parse(part)
                    .map_err(|e| config_failure(anyhow!("{e}; valid labels: {}", schema_menu())))
            })
            .collect(),
    }
}

fn schema_menu() -> String {
    let mut labels: Vec<String> = ALL_EVENT_TYPES
        .into_iter()
        .map(|t| PathSchema::simple(t).label())
        .collect();
    labels.extend(PathSchema::metapath_menu().iter().map(PathSchema::label));
    labels.join(", ")
}

fn read_stays(path: &Path) -> Result<Vec<PatientStay>, Failure> {
    load_stays(path).map_err(ingest_failure)
}

fn load_model(path: &Path) -> Result<EmbeddingModel, Failure> {
    EmbeddingModel::load(path).map_err(data_failure)
}

fn parse_cutoffs(text: &str) -> Result<Vec<usize>, Failure> {
    let mut ks = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let k: usize = part
            .parse()
            .map_err(|_| config_failure(anyhow!("bad cutoff {part:?}")))?;
        if k == 0 {
            return Err(config_failure(anyhow!("cutoffs must be at least 1")));
        }
        ks.push(k);
    }
    if ks.is_empty() {
        return Err(config_failure(anyhow!("no cutoffs given")));
    }
    Ok(ks)
}

fn parse_denominator(text: &str) -> Result<ApDenominator, Failure> {
    match text {
        "hits" => Ok(ApDenominator::HitsInTopK),
        "truth" => Ok(ApDenominator::TruthCapped),
        other => Err(config_failure(anyhow!(
            "denominator must be hits or truth, got {other:?}"
        ))),
    }
}

fn write_artifact(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(Failure::Data)?;
        }
    }
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Data)
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args)]
struct SynthArgs {
    /// Directory for the generated event tables.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    patients: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    /// Probability an evidence event comes from the patient's own
    /// clusters instead of the background vocabulary.
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    #[arg(long, default_value_t = 1)]
    diagnoses_per_patient: usize,
    #[arg(long, default_value_t = 1)]
    codes_per_cluster: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let mut manifest = Manifest::new("synth");
    let spec = SynthSpec {
        patients: args.patients,
        clusters: args.clusters,
        beta: args.beta,
        diagnoses_per_patient: args.diagnoses_per_patient,
        codes_per_cluster: args.codes_per_cluster,
        seed: args.seed,
        ..SynthSpec::default()
    };
    let output = generate(&spec).map_err(synth_failure)?;
    write_dataset(&output, &args.out).map_err(synth_failure)?;
    manifest.push("patients", spec.patients);
    manifest.push("clusters", spec.clusters);
    manifest.push("beta", spec.beta);
    manifest.push("diagnoses_per_patient", spec.diagnoses_per_patient);
    manifest.push("codes_per_cluster", spec.codes_per_cluster);
    manifest.push("seed", spec.seed);
    for name in [
        "demo.csv",
        "lab.csv",
        "micro.csv",
        "symptoms.csv",
        "prescriptions.csv",
        "procedures.csv",
        "diagnoses.csv",
        "tables.conf",
        "truth.tsv",
        "clusters.tsv",
    ] {
        manifest.output(name, &args.out.join(name))?;
    }
    manifest.write(&args.out.join("manifest.txt"))?;
    emit(format!(
        "wrote {} stays across {} clusters to {}\n",
        output.stays.len(),
        output.clusters.len(),
        args.out.display()
    ))
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Args)]
struct IngestArgs {
    /// Directory holding the event tables.
    #[arg(long)]
    data: PathBuf,
    /// Table layout file; defaults to tables.conf inside --data.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Directory for train.tsv, test.tsv and the load report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 13)]
    split_seed: u64,
}

fn cmd_ingest(args: IngestArgs) -> CmdResult {
    let mut manifest = Manifest::new("ingest");
    let tables_path = args
        .tables
        .clone()
        .unwrap_or_else(|| args.data.join("tables.conf"));
    let spec = TableSpec::from_file(&tables_path).map_err(ingest_failure)?;
    manifest.input("tables", &tables_path)?;
    let report = load_tables(&args.data, &spec).map_err(ingest_failure)?;
    let total_stays = report.stays.len();
    let (train_stays, test_stays) =
        split(report.stays.clone(), args.test_fraction, args.split_seed).map_err(ingest_failure)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::Data)?;
    let train_path = args.out.join("train.tsv");
    let test_path = args.out.join("test.tsv");
    save_stays(&train_path, &train_stays).map_err(ingest_failure)?;
    save_stays(&test_path, &test_stays).map_err(ingest_failure)?;

    let mut counts = String::new();
    let mut line = |key: &str, value: u64| {
        writeln!(counts, "{key} = {value}").unwrap();
    };
    line("stays", total_stays as u64);
    line("rows_read", report.rows_read);
    line("rows_rejected", report.rows_rejected);
    line("rows_excluded", report.rows_excluded);
    line("rows_deduplicated", report.rows_deduplicated);
    line("stays_excluded", report.stays_excluded);
    line("accepted_rows", report.accepted_rows());
    line("train_stays", train_stays.len() as u64);
    line("test_stays", test_stays.len() as u64);
    for (table, rejects) in &report.rejects_by_table {
        line(&format!("rejects.{table}"), *rejects);
    }
    let counts_path = args.out.join("counts.txt");
    write_artifact(&counts_path, &counts)?;

    manifest.push("data", args.data.display());
    manifest.push("test_fraction", args.test_fraction);
    manifest.push("split_seed", args.split_seed);
    manifest.output("train", &train_path)?;
    manifest.output("test", &test_path)?;
    manifest.output("counts", &counts_path)?;
    manifest.write(&args.out.join("manifest.txt"))?;
    emit(&counts)
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    /// Stay file produced by `ingest` (or any file in that format).
    #[arg(long)]
    train: PathBuf,
    /// Where the model is written.
    #[arg(long)]
    out: PathBuf,
    /// Save the model in the binary format instead of text.
    #[arg(long)]
    binary: bool,
    #[command(flatten)]
    knobs: TrainKnobs,
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut manifest = Manifest::new("train");
    let config = args.knobs.resolve_config()?;
    let treatment = args.knobs.resolve_treatment()?;
    let metapaths = args.knobs.resolve_metapaths()?;
    let schemas = active_schemas(treatment, &metapaths).map_err(train_failure)?;

    manifest.input("train", &args.train)?;
    let stays = read_stays(&args.train)?;
    let cohort_table = CohortTable::default_groups();
    let mapper = if args.knobs.cohorts {
        EventMapper::with_cohorts(MapOptions::default(), &cohort_table)
    } else {
        EventMapper::new(MapOptions::default())
    };
    let built = build_graph(&stays, &NetworkSchema::patient_centric(), &mapper)
        .map_err(data_failure)?;
    if built.skipped_events > 0 {
        log::warn!("{} events had no mappable node", built.skipped_events);
    }

    let outcome = train(&built.graph, &schemas, &config).map_err(train_failure)?;
    if args.binary {
        outcome.model.save_binary(&args.out).map_err(data_failure)?;
    } else {
        outcome.model.save_text(&args.out).map_err(data_failure)?;
    }

    for (key, value) in config.to_pairs() {
        manifest.push(&format!("config.{key}"), value);
    }
    manifest.push("treatment", treatment.label());
    let labels: Vec<String> = schemas.iter().map(PathSchema::label).collect();
    manifest.push("schemas", labels.join(","));
    manifest.push("cohorts", args.knobs.cohorts);
    manifest.push("stays", stays.len());
    manifest.push("nodes", built.graph.node_count());
    manifest.push("skipped_events", built.skipped_events);
    let stats = &outcome.stats;
    manifest.push("batches", stats.total_batches);
    manifest.push("unsup_items", stats.unsup_items);
    manifest.push("sup_items", stats.sup_items);
    manifest.push("violations", stats.violations);
    manifest.push("mean_unsup_loss", stats.mean_unsup_loss());
    manifest.push("mean_sup_loss", stats.mean_sup_loss());
    for label in &stats.dropped_schemas {
        manifest.push("dropped_schema", label);
    }
    manifest.output("model", &args.out)?;
    manifest.write(&manifest_path(&args.out))?;

    emit(format!(
        "trained {} nodes at dim {} over {} batches; model at {}\n",
        built.graph.node_count(),
        config.dim,
        stats.total_batches,
        args.out.display()
    ))
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Args)]
struct AblateArgs {
    /// Training stay file.
    #[arg(long)]
    train: PathBuf,
    /// Held-out stay file the rows are scored on.
    #[arg(long)]
    test: PathBuf,
    /// Where the report is written.
    #[arg(long)]
    out: PathBuf,
    /// Sign-flip iterations for the p-value column.
    #[arg(long, default_value_t = 2000)]
    permutations: u32,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Clone)]
struct AblateRow {
    section: &'static str,
    label: String,
    map_at: BTreeMap<usize, f64>,
    ap3: Vec<f64>,
    stay_ids: Vec<String>,
}

const ABLATE_CUTOFFS: [usize; 3] = [3, 5, 10];

fn ablate_run(
    section: &'static str,
    label: String,
    train_stays: &[PatientStay],
    test_stays: &[PatientStay],
    mapper: &EventMapper,
    schemas: &[PathSchema],
    config: &TrainConfig,
) -> Result<AblateRow, Failure> {
    let built = build_graph(train_stays, &NetworkSchema::patient_centric(), mapper)
        .map_err(data_failure)?;
    let outcome = train(&built.graph, schemas, config).map_err(train_failure)?;
    let report = evaluate(
        &outcome.model,
        test_stays,
        mapper,
        &ABLATE_CUTOFFS,
        ApDenominator::HitsInTopK,
    )
    .map_err(predict_failure)?;
    log::info!("{section} {label}: map@3 {:.4}", report.map_at[&3]);
    Ok(AblateRow {
        section,
        label,
        map_at: report.map_at,
        ap3: report.per_patient[&3].clone(),
        stay_ids: report.stay_ids,
    })
}

/// P-value of the paired AP@3 difference against the section's
/// baseline, or None when the evaluated stays do not line up.
fn row_p_value(
    row: &AblateRow,
    base: &AblateRow,
    iterations: u32,
    seed: u64,
) -> Option<f64> {
    if row.stay_ids != base.stay_ids {
        return None;
    }
    let diffs: Vec<f64> = row
        .ap3
        .iter()
        .zip(&base.ap3)
        .map(|(a, b)| a - b)
        .collect();
    paired_sign_flip(&diffs, iterations, seed)
        .ok()
        .map(|t| t.p_value)
}

fn cmd_ablate(args: AblateArgs) -> CmdResult {
    let mut manifest = Manifest::new("ablate");
    let config = args.knobs.resolve_config()?;
    let treatment = args.knobs.resolve_treatment()?;
    let metapaths = args.knobs.resolve_metapaths()?;

    manifest.input("train", &args.train)?;
    manifest.input("test", &args.test)?;
    let train_stays = read_stays(&args.train)?;
    let test_stays = read_stays(&args.test)?;
    let cohort_table = CohortTable::default_groups();
    let mapper = if args.knobs.cohorts {
        EventMapper::with_cohorts(MapOptions::default(), &cohort_table)
    } else {
        EventMapper::new(MapOptions::default())
    };

    // Treatment subset sweep: same metapath menu, restricted to paths
    // the subset still allows.
    let subset_labels = [
        "none", "pres", "proc", "diag", "pres,proc", "pres,diag", "proc,diag", "all",
    ];
    let mut subset_rows = Vec::new();
    for label in subset_labels {
        let subset = TreatmentSubset::parse(label).map_err(train_failure)?;
        let allowed: Vec<PathSchema> = metapaths
            .iter()
            .filter(|schema| schema_allowed(schema, subset))
            .cloned()
            .collect();
        let schemas = active_schemas(subset, &allowed).map_err(train_failure)?;
        subset_rows.push(ablate_run(
            "subset",
            label.to_string(),
            &train_stays,
            &test_stays,
            &mapper,
            &schemas,
            &config,
        )?);
    }

    // Metapath sweep over the full menu the treatment flag allows:
    // no-metapath base, each path alone, then cumulative additions in
    // descending single-path order.
    let base_schemas = active_schemas(treatment, &[]).map_err(train_failure)?;
    let base_row = ablate_run(
        "base",
        "simple-only".to_string(),
        &train_stays,
        &test_stays,
        &mapper,
        &base_schemas,
        &config,
    )?;
    let menu: Vec<PathSchema> = PathSchema::metapath_menu()
        .into_iter()
        .filter(|schema| schema_allowed(schema, treatment))
        .collect();
    let mut single_rows = Vec::new();
    for path in &menu {
        let schemas = active_schemas(treatment, std::slice::from_ref(path)).map_err(train_failure)?;
        single_rows.push(ablate_run(
            "single",
            path.label(),
            &train_stays,
            &test_stays,
            &mapper,
            &schemas,
            &config,
        )?);
    }
    let mut order: Vec<usize> = (0..single_rows.len()).collect();
    order.sort_by(|&a, &b| {
        single_rows[b].map_at[&3]
            .total_cmp(&single_rows[a].map_at[&3])
            .then(single_rows[a].label.cmp(&single_rows[b].label))
    });
    let mut cumulative_rows = Vec::new();
    let mut accumulated: Vec<PathSchema> = Vec::new();
    for &i in &order {
        accumulated.push(menu[i].clone());
        let schemas = active_schemas(treatment, &accumulated).map_err(train_failure)?;
        let label = accumulated
            .iter()
            .map(PathSchema::label)
            .collect::<Vec<_>>()
            .join("+");
        cumulative_rows.push(ablate_run(
            "cumulative",
            label,
            &train_stays,
            &test_stays,
            &mapper,
            &schemas,
            &config,
        )?);
    }

    let mut text = String::new();
    writeln!(text, "# columns: section\tlabel\tmap@3\tmap@5\tmap@10\tp_vs_base").unwrap();
    writeln!(text, "# subset rows compare against subset none; metapath rows against simple-only")
        .unwrap();
    {
        let mut emit = |row: &AblateRow, base: Option<&AblateRow>| {
            let p = match base {
                Some(base) => match row_p_value(row, base, args.permutations, config.seed) {
                    Some(p) => format!("{p:.4}"),
                    None => "n/a".to_string(),
                },
                None => "-".to_string(),
            };
            writeln!(
                text,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                row.section, row.label, row.map_at[&3], row.map_at[&5], row.map_at[&10], p
            )
            .unwrap();
        };
        let subset_base = subset_rows[0].clone();
        for (i, row) in subset_rows.iter().enumerate() {
            emit(row, (i > 0).then_some(&subset_base));
        }
        emit(&base_row, None);
        for &i in &order {
            emit(&single_rows[i], Some(&base_row));
        }
        for row in &cumulative_rows {
            emit(row, Some(&base_row));
        }
    }
    write_artifact(&args.out, &text)?;

    for (key, value) in config.to_pairs() {
        manifest.push(&format!("config.{key}"), value);
    }
    manifest.push("treatment", treatment.label());
    manifest.push("permutations", args.permutations);
    manifest.push("cohorts", args.knobs.cohorts);
    manifest.output("report", &args.out)?;
    manifest.write(&manifest_path(&args.out))?;
    emit(format!(
        "wrote {} ablation rows to {}\n",
        subset_rows.len() + 1 + single_rows.len() + cumulative_rows.len(),
        args.out.display()
    ))
}

fn schema_allowed(schema: &PathSchema, subset: TreatmentSubset) -> bool {
    match schema {
        PathSchema::Simple(t) => subset.includes(*t),
        PathSchema::Meta(a, b) => subset.includes(*a) && subset.includes(*b),
    }
}

// ---------------------------------------------------------------------------
// predict

#[derive(Args)]
struct PredictArgs {
    /// Model file saved by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Stay file holding diagnostic evidence only. Any prescription,
    /// procedure or diagnosis event aborts the run.
    #[arg(long)]
    events: PathBuf,
    /// Ranked codes printed per stay.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_predict(args: PredictArgs) -> CmdResult {
    if args.k == 0 {
        return Err(config_failure(anyhow!("k must be at least 1")));
    }
    let mut manifest = Manifest::new("predict");
    manifest.input("model", &args.model)?;
    manifest.input("events", &args.events)?;
    let model = load_model(&args.model)?;
    let stays = read_stays(&args.events)?;
    // Evidence never contains diagnosis events, so cohort collapse has
    // nothing to act on here and the plain mapper always suffices.
    let mapper = EventMapper::new(MapOptions::default());

    let mut text = String::new();
    let mut unknown_events = 0;
    for stay in &stays {
        let composed =
            compose_patient(&model, &stay.stay_id, &stay.events, &mapper).map_err(predict_failure)?;
        unknown_events += composed.unknown_events;
        let ranked =
            rank_diagnoses(&model, &composed.vector, Some(args.k)).map_err(predict_failure)?;
        for (rank, (code, score)) in ranked.iter().enumerate() {
            writeln!(text, "{}\t{}\t{}\t{:.6}", stay.stay_id, rank + 1, code, score).unwrap();
        }
    }
    if unknown_events > 0 {
        log::warn!("{unknown_events} evidence events were not in the model vocabulary");
    }

    match &args.out {
        Some(path) => {
            write_artifact(path, &text)?;
            manifest.push("k", args.k);
            manifest.push("stays", stays.len());
            manifest.output("ranking", path)?;
            manifest.write(&manifest_path(path))?;
            emit(format!("ranked {} stays into {}\n", stays.len(), path.display()))?;
        }
        None => emit(&text)?,
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// Model file saved by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Held-out stay file; recorded diagnoses become the truth set.
    #[arg(long)]
    events: PathBuf,
    /// Precision cutoffs, comma separated.
    #[arg(long, default_value = "3,5,10")]
    k: String,
    /// Average-precision denominator: `hits` or `truth`.
    #[arg(long, default_value = "hits")]
    denominator: String,
    /// Map diagnosis truth codes to cohort labels. Use with a model
    /// trained with --cohorts.
    #[arg(long)]
    cohorts: bool,
    /// Also report one-vs-rest AUROC per diagnosis identity.
    #[arg(long)]
    auroc: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let ks = parse_cutoffs(&args.k)?;
    let denom = parse_denominator(&args.denominator)?;
    let mut manifest = Manifest::new("evaluate");
    manifest.input("model", &args.model)?;
    manifest.input("events", &args.events)?;
    let model = load_model(&args.model)?;
    let stays = read_stays(&args.events)?;
    let cohort_table = CohortTable::default_groups();
    let mapper = if args.cohorts {
        EventMapper::with_cohorts(MapOptions::default(), &cohort_table)
    } else {
        EventMapper::new(MapOptions::default())
    };

    let report = evaluate(&model, &stays, &mapper, &ks, denom).map_err(predict_failure)?;
    let mut text = String::new();
    let mut line = |key: &str, value: String| {
        writeln!(text, "{key} = {value}").unwrap();
    };
    line("evaluated", report.evaluated.to_string());
    line("skipped_cold", report.skipped_cold.to_string());
    line("skipped_no_truth", report.skipped_no_truth.to_string());
    line("unknown_events", report.unknown_events.to_string());
    line("unknown_truth_codes", report.unknown_truth_codes.to_string());
    for (k, value) in &report.map_at {
        line(&format!("map@{k}"), format!("{value:.6}"));
    }
    if args.auroc {
        let disc = diagnosis_aurocs(&model, &stays, &mapper).map_err(predict_failure)?;
        for (label, value) in &disc.auroc {
            let rendered = match value {
                Some(v) => format!("{v:.6}"),
                None => "undefined".to_string(),
            };
            line(&format!("auroc.{label}"), rendered);
        }
        let rendered = match disc.macro_auroc {
            Some(v) => format!("{v:.6}"),
            None => "undefined".to_string(),
        };
        line("macro_auroc", rendered);
    }

    match &args.out {
        Some(path) => {
            write_artifact(path, &text)?;
            manifest.push("denominator", &args.denominator);
            manifest.push("cohorts", args.cohorts);
            manifest.output("report", path)?;
            manifest.write(&manifest_path(path))?;
            emit(format!(
                "evaluated {} stays into {}\n",
                report.evaluated,
                path.display()
            ))?;
        }
        None => emit(&text)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_flag_accepts_keywords_and_labels() {
        assert_eq!(parse_schemas("default").unwrap().len(), 4);
        assert!(parse_schemas("none").unwrap().is_empty());
        let picked = parse_schemas("lab-diag, symp-diag").unwrap();
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].label(), "lab-diag");
        let err = parse_schemas("lab-banana").unwrap_err();
        assert_eq!(err.code(), EXIT_CONFIG);
        assert!(format!("{:#}", err.error()).contains("valid labels"));
    }

    #[test]
    fn cutoff_and_denominator_parsing() {
        assert_eq!(parse_cutoffs("3,5,10").unwrap(), vec![3, 5, 10]);
        assert!(parse_cutoffs("0").is_err());
        assert!(parse_cutoffs("").is_err());
        assert!(parse_cutoffs("three").is_err());
        assert!(matches!(
            parse_denominator("hits").unwrap(),
            ApDenominator::HitsInTopK
        ));
        assert!(matches!(
            parse_denominator("truth").unwrap(),
            ApDenominator::TruthCapped
        ));
        assert!(parse_denominator("both").is_err());
    }

    #[test]
    fn subset_filter_keeps_only_allowed_paths() {
        let none = TreatmentSubset::none();
        let menu = PathSchema::metapath_menu();
        let kept: Vec<&PathSchema> = menu.iter().filter(|s| schema_allowed(s, none)).collect();
        assert!(kept.iter().all(|s| !s.label().contains("diag")
            && !s.label().contains("pres")
            && !s.label().contains("proc")));
    }

    #[test]
    fn failure_codes_match_error_kinds() {
        let config = config_failure(anyhow!("x"));
        let data = data_failure(anyhow!("x"));
        assert_eq!(config.code(), EXIT_CONFIG);
        assert_eq!(data.code(), EXIT_DATA);
        let leak = predict_failure(PredictError::Leakage {
            event_type: graphdx::ehr::EventType::Prescription,
            stay_id: "s1".into(),
        });
        assert_eq!(leak.code(), EXIT_LEAKAGE);
    }
}
