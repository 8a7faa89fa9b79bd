//! Command implementations behind the `inquest` binary.

pub mod repl;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use inquest::consult_env::{ConsultEnv, EnvConfig, UnmentionedAnswer};
use inquest::diagnosis::{DiagnosisModel, SlTrainConfig, SlTrainer};
use inquest::evalharness::{
    self, baseline_policy, build_report, emit_report, hits_at_k, paired_bootstrap, read_report, read_traces,
    run_consultations, write_traces, BaselineKind, EvalConfig, EvalReport, InquiryAgent, ReportFormat,
};
use inquest::inquiry::{
    write_iteration_log, InquiryPolicy, InquiryTrainer, PpoConfig, RewardParams, RolloutContext, ValueNet,
};
use inquest::nncore::NetCheckpoint;
use inquest::ontology::{load_ontology, HpiOntology};
use inquest::patientgen::{
    filter_rare, generate_cohort, load_dataset, random_model, save_dataset, split_dataset, synthetic_ontology,
    BenchmarkConfig, HistoryEncoding, OntologyShape, PatientDataset,
};
use inquest::seed::mix;

pub const THREADS_ENV: &str = "INQUEST_THREADS";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_patients: usize,
    pub split: (f64, f64, f64),
    /// Labels with fewer records are dropped before splitting.
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_patients: 20_000,
            split: (0.6, 0.1, 0.3),
            min_count: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosisConfig {
    pub hidden: Vec<usize>,
    pub history: HistoryEncoding,
    pub train: SlTrainConfig,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig {
            hidden: vec![256, 256],
            history: HistoryEncoding::default(),
            train: SlTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InquiryConfig {
    pub hidden: Vec<usize>,
    pub ppo: PpoConfig,
    pub reward: RewardParams,
}

impl Default for InquiryConfig {
    fn default() -> Self {
        InquiryConfig {
            hidden: vec![128, 128],
            ppo: PpoConfig::default(),
            reward: RewardParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    /// Evaluate only the first `limit` records.
    pub limit: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: vec![1, 3, 5],
            limit: None,
        }
    }
}

/// Everything a run can be configured with. Loaded from TOML; command-line
/// flags override individual fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub ontology: OntologyShape,
    pub benchmark: BenchmarkConfig,
    pub data: DataConfig,
    pub diagnosis: DiagnosisConfig,
    pub inquiry: InquiryConfig,
    pub env: EnvConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn digest(&self) -> String {
        inquest::digest_bytes(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.diagnosis.train.validate()?;
        self.inquiry.ppo.validate()?;
        self.inquiry.reward.validate()?;
        self.env.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            bail!("evaluation cutoffs must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "inquest", version, about = "Train and evaluate an interactive history-taking agent")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to INQUEST_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random two-level HPI ontology.
    GenOntology(GenOntologyArgs),
    /// Generate a disease model, a patient cohort and its splits.
    GenData(GenDataArgs),
    /// Train the disease-ranking model.
    TrainDiag(TrainDiagArgs),
    /// Train the inquiry policy against simulated patients.
    TrainInquiry(TrainInquiryArgs),
    /// Run simulated consultations and score them.
    Eval(EvalArgs),
    /// Interactive consultation with a human answering the questions.
    Consult(ConsultArgs),
    /// Compare evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Desk,
    Clinical,
}

#[derive(Debug, Args)]
pub struct GenOntologyArgs {
    /// Output directory for hpi.csv and questions.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Preset size; the config's `[ontology]` table is used when omitted.
    #[arg(long, value_enum)]
    pub shape: Option<ShapeArg>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of patients before rare-label filtering.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainDiagArgs {
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log (defaults to `<out>.log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Disable masking augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    /// Question budget L.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Response-noise probability.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum)]
    pub unmentioned_answer: Option<UnmentionedArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnmentionedArg {
    Denied,
    Unknown,
}

#[derive(Debug, Args)]
pub struct TrainInquiryArgs {
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(long)]
    pub diag: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// Output directory for policy.json, value.json and train_log.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(long)]
    pub diag: PathBuf,
    /// Policy checkpoint, or `random-legal` / `fixed-order`.
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    /// Recall cutoffs, e.g. `1,3,5`.
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Evaluate only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Dump one dialogue trace per line.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ConsultArgs {
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(long)]
    pub diag: PathBuf,
    /// Policy checkpoint, or `random-legal` / `fixed-order`.
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 45.0)]
    pub age: f64,
    #[arg(long, value_enum, default_value = "female")]
    pub sex: SexArg,
    /// Save the session as a JSON dialogue trace.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SexArg {
    Male,
    Female,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation reports (JSON) to compare.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Trace files matching the first two inputs, for a paired bootstrap
    /// of their top-K hit rates.
    #[arg(long = "traces")]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub bootstrap_k: usize,
    /// Write the comparison table as CSV instead of printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse, configure the thread pool and run one command.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a count"))?),
            Err(_) => None,
        },
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            bail!("thread count must be positive");
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    pool.install(|| dispatch(cli.command, cfg))
}

fn dispatch(command: Command, mut cfg: RunConfig) -> anyhow::Result<()> {
    match command {
        Command::GenOntology(args) => {
            if let Some(shape) = args.shape {
                cfg.ontology = match shape {
                    ShapeArg::Desk => OntologyShape::desk(),
                    ShapeArg::Clinical => OntologyShape::clinical(),
                };
            }
            gen_ontology(&cfg, &args.out).map(|_| ())
        }
        Command::GenData(args) => {
            if let Some(n) = args.n {
                cfg.data.n_patients = n;
            }
            if let Some(c) = args.min_count {
                cfg.data.min_count = c;
            }
            gen_data(&cfg, &args.ontology, &args.out).map(|_| ())
        }
        Command::TrainDiag(args) => {
            if let Some(e) = args.epochs {
                cfg.diagnosis.train.epochs = e;
            }
            if args.no_augment {
                cfg.diagnosis.train.masking = None;
            }
            let log = args.log.clone().unwrap_or_else(|| suffixed(&args.out, ".log.csv"));
            train_diag(&cfg, &args.ontology, &args.train, args.val.as_deref(), &args.out, &log).map(|_| ())
        }
        Command::TrainInquiry(args) => {
            if let Some(i) = args.iterations {
                cfg.inquiry.ppo.iterations = i;
            }
            if let Some(e) = args.episodes {
                cfg.inquiry.ppo.episodes_per_iter = e;
            }
            apply_env_args(&mut cfg, &args.env);
            train_inquiry(&cfg, &args.ontology, &args.diag, &args.train, &args.out).map(|_| ())
        }
        Command::Eval(args) => {
            if let Some(ks) = &args.ks {
                cfg.eval.ks = ks.clone();
            }
            if args.limit.is_some() {
                cfg.eval.limit = args.limit;
            }
            apply_env_args(&mut cfg, &args.env);
            let format = match args.format {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Csv => ReportFormat::Csv,
            };
            eval(&cfg, &args, format).map(|_| ())
        }
        Command::Consult(args) => {
            if let Some(h) = args.horizon {
                cfg.env.horizon = h;
            }
            consult(&cfg, &args)
        }
        Command::Report(args) => report(&args),
    }
}

fn apply_env_args(cfg: &mut RunConfig, args: &EnvArgs) {
    if let Some(h) = args.horizon {
        cfg.env.horizon = h;
    }
    if let Some(n) = args.noise {
        cfg.env.noise = n;
    }
    if let Some(u) = args.unmentioned_answer {
        cfg.env.unmentioned = match u {
            UnmentionedArg::Denied => UnmentionedAnswer::Denied,
            UnmentionedArg::Unknown => UnmentionedAnswer::Unknown,
        };
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

// ---------------------------------------------------------------------------
// Seeds: one derived stream per stage so stages can be re-run independently.
// ---------------------------------------------------------------------------

const TAG_ONTOLOGY: u64 = 1;
const TAG_GENMODEL: u64 = 2;
const TAG_COHORT: u64 = 3;
const TAG_SPLIT: u64 = 4;
const TAG_DIAG_INIT: u64 = 5;
const TAG_DIAG_TRAIN: u64 = 6;
const TAG_POLICY_INIT: u64 = 7;
const TAG_VALUE_INIT: u64 = 8;
const TAG_PPO: u64 = 9;
const TAG_EVAL: u64 = 10;

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn gen_ontology(cfg: &RunConfig, out: &Path) -> anyhow::Result<HpiOntology> {
    let ontology = synthetic_ontology(cfg.ontology, mix(cfg.seed, TAG_ONTOLOGY))?;
    create_dir(out)?;
    ontology.save(out)?;
    Ok(ontology)
}

/// File names written by `gen-data`.
pub const GENMODEL_FILE: &str = "genmodel.json";
pub const COHORT_FILE: &str = "dataset.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_digest: String,
    pub seed: u64,
    pub ontology_digest: String,
    pub genmodel_digest: String,
    pub kept_labels: Vec<usize>,
    pub sizes: (usize, usize, usize),
}

pub fn gen_data(cfg: &RunConfig, ontology_dir: &Path, out: &Path) -> anyhow::Result<DataManifest> {
    let ontology = load_ontology(ontology_dir)?;
    let model = random_model(&ontology, &cfg.benchmark, mix(cfg.seed, TAG_GENMODEL))?;
    let cohort = generate_cohort(&model, cfg.data.n_patients, mix(cfg.seed, TAG_COHORT))?;
    let filtered = filter_rare(&cohort, cfg.data.min_count)?;
    let (train, val, test) = split_dataset(&filtered.dataset, cfg.data.split, mix(cfg.seed, TAG_SPLIT))?;

    create_dir(out)?;
    model.save(&out.join(GENMODEL_FILE))?;
    save_dataset(&filtered.dataset, &out.join(COHORT_FILE))?;
    save_dataset(&train, &out.join(TRAIN_FILE))?;
    save_dataset(&val, &out.join(VAL_FILE))?;
    save_dataset(&test, &out.join(TEST_FILE))?;
    let manifest = DataManifest {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        ontology_digest: ontology.digest().to_string(),
        genmodel_digest: model.digest(),
        kept_labels: filtered.kept,
        sizes: (train.len(), val.len(), test.len()),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_checkpoint(mut ckpt: NetCheckpoint, cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    ckpt.meta.insert("config_digest".into(), cfg.digest().into());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ckpt.save(path)?;
    Ok(())
}

pub fn train_diag(
    cfg: &RunConfig,
    ontology_dir: &Path,
    train_path: &Path,
    val_path: Option<&Path>,
    out: &Path,
    log_path: &Path,
) -> anyhow::Result<DiagnosisModel> {
    cfg.validate()?;
    let ontology = load_ontology(ontology_dir)?;
    let train = load_dataset(train_path, &ontology)?;
    let val = val_path.map(|p| load_dataset(p, &ontology)).transpose()?;
    let mut model = DiagnosisModel::new(
        &ontology,
        cfg.diagnosis.history,
        train.disease_names.clone(),
        &cfg.diagnosis.hidden,
        mix(cfg.seed, TAG_DIAG_INIT),
    )?;
    let sl_cfg = SlTrainConfig {
        seed: mix(cfg.seed, TAG_DIAG_TRAIN),
        ..cfg.diagnosis.train
    };
    let mut trainer = SlTrainer::new(sl_cfg, &model, &ontology)?;
    let mut log = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for epoch in 0..sl_cfg.epochs {
        let m = trainer.train_epoch(&mut model, &train)?;
        let (vl, va) = match &val {
            Some(v) => {
                let e = model.evaluate(v)?;
                (e.mean_loss.to_string(), e.accuracy.to_string())
            }
            None => (String::new(), String::new()),
        };
        log.push_str(&format!("{epoch},{},{},{vl},{va}\n", m.mean_loss, m.accuracy));
    }
    save_checkpoint(model.to_checkpoint(cfg.seed), cfg, out)?;
    fs::write(log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    Ok(model)
}

pub const POLICY_FILE: &str = "policy.json";
pub const VALUE_FILE: &str = "value.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

pub fn train_inquiry(
    cfg: &RunConfig,
    ontology_dir: &Path,
    diag_path: &Path,
    train_path: &Path,
    out: &Path,
) -> anyhow::Result<InquiryPolicy> {
    cfg.validate()?;
    let ontology = load_ontology(ontology_dir)?;
    let diag = DiagnosisModel::load(diag_path)?;
    diag.check_ontology(&ontology)?;
    let train = load_dataset(train_path, &ontology)?;
    let e_width = diag.history().width;
    let hidden = &cfg.inquiry.hidden;
    let policy = InquiryPolicy::new(&ontology, e_width, hidden, mix(cfg.seed, TAG_POLICY_INIT))?;
    let value = ValueNet::new(&ontology, e_width, hidden, mix(cfg.seed, TAG_VALUE_INIT))?;
    let ppo = PpoConfig {
        seed: mix(cfg.seed, TAG_PPO),
        ..cfg.inquiry.ppo
    };
    let ctx = RolloutContext {
        env: ConsultEnv::new(&ontology, cfg.env)?,
        diag: &diag,
        dataset: &train,
        reward: cfg.inquiry.reward,
    };
    let mut trainer = InquiryTrainer::new(policy, value, ppo)?;
    let logs = trainer.train(&ctx)?;

    create_dir(out)?;
    let reward = &cfg.inquiry.reward;
    let disclosure = &cfg.env.disclosure;
    save_checkpoint(trainer.policy.to_checkpoint(cfg.seed, reward, disclosure), cfg, &out.join(POLICY_FILE))?;
    save_checkpoint(trainer.value.to_checkpoint(cfg.seed), cfg, &out.join(VALUE_FILE))?;
    write_iteration_log(&logs, &out.join(TRAIN_LOG_FILE))?;
    Ok(trainer.policy)
}

/// A question-selection strategy named on the command line.
pub enum AgentChoice {
    Trained(InquiryPolicy),
    Baseline(evalharness::BaselinePolicy),
}

impl AgentChoice {
    pub fn resolve(spec: &str) -> anyhow::Result<Self> {
        Ok(match spec {
            "random-legal" => AgentChoice::Baseline(baseline_policy(BaselineKind::RandomLegal)),
            "fixed-order" => AgentChoice::Baseline(baseline_policy(BaselineKind::FixedOrder)),
            path => {
                let ckpt = NetCheckpoint::load(Path::new(path))?;
                AgentChoice::Trained(InquiryPolicy::from_checkpoint(&ckpt)?)
            }
        })
    }

    pub fn agent(&self) -> &dyn InquiryAgent {
        match self {
            AgentChoice::Trained(p) => p,
            AgentChoice::Baseline(b) => b,
        }
    }

    fn check_diag(&self, diag: &DiagnosisModel) -> anyhow::Result<()> {
        if let AgentChoice::Trained(p) = self {
            if p.e_width() != diag.history().width {
                bail!(
                    "policy expects history width {}, diagnosis model uses {}",
                    p.e_width(),
                    diag.history().width
                );
            }
        }
        Ok(())
    }
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs, format: ReportFormat) -> anyhow::Result<EvalReport> {
    cfg.validate()?;
    let ontology = load_ontology(&args.ontology)?;
    let diag = DiagnosisModel::load(&args.diag)?;
    let mut data = load_dataset(&args.data, &ontology)?;
    if let Some(limit) = cfg.eval.limit {
        data.records.truncate(limit);
    }
    let choice = AgentChoice::resolve(&args.policy)?;
    choice.check_diag(&diag)?;
    let report = evaluate(cfg, &ontology, &diag, &data, choice.agent(), args.traces.as_deref())?;
    emit_report(&report, &args.out, format)?;
    Ok(report)
}

/// Consult every record of `data` with `agent` and score the traces.
pub fn evaluate(
    cfg: &RunConfig,
    ontology: &HpiOntology,
    diag: &DiagnosisModel,
    data: &PatientDataset,
    agent: &dyn InquiryAgent,
    traces_out: Option<&Path>,
) -> anyhow::Result<EvalReport> {
    let env = ConsultEnv::new(ontology, cfg.env)?;
    let seed = mix(cfg.seed, TAG_EVAL);
    let traces = run_consultations(agent, diag, data, &env, seed)?;
    if let Some(path) = traces_out {
        write_traces(&traces, path)?;
    }
    let eval_cfg = EvalConfig {
        agent: agent.name(),
        ks: cfg.eval.ks.clone(),
        seed,
        env: cfg.env,
    };
    Ok(build_report(&eval_cfg, &traces, data, None)?)
}

fn consult(cfg: &RunConfig, args: &ConsultArgs) -> anyhow::Result<()> {
    let ontology = load_ontology(&args.ontology)?;
    let diag = DiagnosisModel::load(&args.diag)?;
    let choice = AgentChoice::resolve(&args.policy)?;
    choice.check_diag(&diag)?;
    let session = repl::Session {
        ontology: &ontology,
        diag: &diag,
        agent: choice.agent(),
        env: ConsultEnv::new(&ontology, cfg.env)?,
        age: args.age,
        sex: match args.sex {
            SexArg::Male => inquest::patientgen::Sex::Male,
            SexArg::Female => inquest::patientgen::Sex::Female,
        },
        seed: cfg.seed,
    };
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    let trace = session.run(stdin.lock(), &mut stdout)?;
    if let Some(path) = &args.transcript {
        write_json(path, &trace)?;
    }
    Ok(())
}

/// Comparison table of several reports, one column per report.
pub fn compare_reports(reports: &[EvalReport]) -> anyhow::Result<Vec<Vec<String>>> {
    let first = reports.first().context("no reports to compare")?;
    for r in &reports[1..] {
        if r.ontology_digest != first.ontology_digest {
            bail!(
                "reports use different ontologies ({} vs {})",
                first.ontology_digest,
                r.ontology_digest
            );
        }
        if r.dataset_digest != first.dataset_digest {
            bail!(
                "reports were computed on different datasets ({} vs {})",
                first.dataset_digest,
                r.dataset_digest
            );
        }
    }
    let rows: Vec<Vec<(String, String)>> = reports.iter().map(|r| r.rows()).collect();
    let mut metrics: Vec<String> = Vec::new();
    for row in &rows {
        for (m, _) in row {
            if !metrics.contains(m) {
                metrics.push(m.clone());
            }
        }
    }
    Ok(metrics
        .into_iter()
        .map(|m| {
            let mut line = vec![m.clone()];
            for row in &rows {
                line.push(row.iter().find(|(k, _)| *k == m).map(|(_, v)| v.clone()).unwrap_or_default());
            }
            line
        })
        .collect())
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let reports = args
        .inputs
        .iter()
        .map(|p| read_report(p).with_context(|| format!("reading report {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let table = compare_reports(&reports)?;
    let mut text = String::new();
    for line in &table {
        text.push_str(&line.join(","));
        text.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }

    if !args.traces.is_empty() {
        if args.traces.len() != 2 {
            bail!("a paired bootstrap needs exactly two trace files");
        }
        let a = read_traces(&args.traces[0])?;
        let b = read_traces(&args.traces[1])?;
        let ids = |ts: &[evalharness::DialogueTrace]| ts.iter().map(|t| t.patient_id.clone()).collect::<Vec<_>>();
        if ids(&a) != ids(&b) {
            bail!("trace files cover different patients");
        }
        let k = args.bootstrap_k;
        let res = paired_bootstrap(
            &hits_at_k(&a, k)?,
            &hits_at_k(&b, k)?,
            evalharness::BOOTSTRAP_RESAMPLES,
            0.05,
            0,
        )?;
        writeln!(
            std::io::stdout().lock(),
            "recall@{k} difference {:.4} (95% CI {:.4} to {:.4}){}",
            res.mean_diff,
            res.lower,
            res.upper,
            if res.significant { ", significant" } else { "" }
        )?;
    }
    Ok(())
}
