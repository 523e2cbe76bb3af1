//! `simrec` command line: argument parsing, dispatch and exit codes.

mod repl;

use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use simrec_core::backend::{BackendRef, ChatBackend, ChatRequest};
use simrec_core::config::{apply_override, validate_config};
use simrec_core::datastore::{import_file, load_seed_dataset, sample_subset, DatasetManifest, ImportFormat, Split};
use simrec_core::dialogue::run_simulation;
use simrec_core::error::{BackendError, ConfigError};
use simrec_core::eval::{ieval_run_detailed, recall_at_1, summary_table};
use simrec_core::manifest::RunManifest;
use simrec_core::podcs::{build_dataset, convert_to_flat, BuildOptions};
use simrec_core::prompt::PromptSet;
use simrec_core::{jsonl, Agents, Error, RunConfig, RunContext, SeedSample};
use simrec_service::{AppState, ServiceConfig};

pub use repl::{chat_repl, ChatOutcome};

#[derive(Debug, Parser)]
#[command(name = "simrec", version, about = "Simulated-user preference data and search-based replies for conversational recommenders")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (flat TOML keys).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config field; repeatable.
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `runs/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write search traces and simulation transcripts next to the outputs.
    #[arg(long, global = true)]
    pub trace: bool,
    /// User simulator backend: `scripted:<path>` or `http:<model>@<url>`.
    /// Defaults to the recommender backend.
    #[arg(long, global = true, value_name = "REF", value_parser = parse_backend)]
    pub backend_user: Option<BackendRef>,
    /// Recommender backend: `scripted:<path>` or `http:<model>@<url>`.
    #[arg(long, global = true, value_name = "REF", value_parser = parse_backend)]
    pub backend_rec: Option<BackendRef>,
    /// Run seed; same as `--set rng_seed=N`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory of `<role>.txt` prompt templates replacing the bundled ones.
    #[arg(long, global = true, value_name = "DIR")]
    pub prompts: Option<PathBuf>,
}

fn parse_backend(s: &str) -> Result<BackendRef, String> {
    BackendRef::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw dataset into canonical seed records.
    Import(ImportArgs),
    /// Run one simulated dialogue per seed sample and dump the transcripts.
    Simulate(DataArgs),
    /// Build the preference-pair dataset.
    BuildPrefs(DataArgs),
    /// Score a recommender with the simulated-user protocol or Recall@1.
    Evaluate(EvalArgs),
    /// Talk to the recommender yourself.
    Chat(ChatArgs),
    /// Run the session HTTP service.
    Serve(ServeArgs),
    /// Reshape a pair file into flat `{prompt, chosen, rejected}` records.
    Convert(ConvertArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Import(_) => "import",
            Command::Simulate(_) => "simulate",
            Command::BuildPrefs(_) => "build-prefs",
            Command::Evaluate(_) => "evaluate",
            Command::Chat(_) => "chat",
            Command::Serve(_) => "serve",
            Command::Convert(_) => "convert",
        }
    }
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// redial, turns (also opendialkg) or canonical.
    #[arg(long)]
    pub format: ImportFormat,
    #[arg(long)]
    pub input: PathBuf,
    /// Dataset name recorded in the manifest and used in the file name.
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Canonical seed dataset (JSONL).
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Seeded random subset of this many samples.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Ieval,
    Recall,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Metric::Ieval)]
    pub metric: Metric,
    /// Let search produce the recommender turns of the trailing rounds.
    #[arg(long)]
    pub ses: bool,
    /// Dataset name for the report. Defaults to the dataset manifest's name
    /// or the file stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// Answer every turn with search.
    #[arg(long)]
    pub ses: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Built web UI to serve at `/`.
    #[arg(long, value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
    /// Session event log; sessions are restored from it on start.
    #[arg(long, value_name = "PATH")]
    pub event_log: Option<PathBuf>,
    /// Idle seconds before a session is dropped.
    #[arg(long, default_value_t = 3600)]
    pub ttl_secs: u64,
    /// Allowed CORS origin; any when unset.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

/// Failure class, reported as `error[<class>]` and mapped to the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Pipeline,
    Usage,
    Config,
    Data,
    Backend,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Pipeline => 1,
            Category::Usage => 2,
            Category::Config => 3,
            Category::Data => 4,
            Category::Backend => 5,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Pipeline => "pipeline",
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Data => "data",
            Category::Backend => "backend",
        })
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match &e {
            Error::Config(_) | Error::Prompt(_) => Category::Config,
            Error::Transcript(_)
            | Error::EmptyDataset
            | Error::SubsetOutOfRange { .. }
            | Error::Dataset { .. }
            | Error::Io { .. }
            | Error::Serde(_) => Category::Data,
            Error::Backend { .. }
            | Error::NoScoreFound
            | Error::EmptyVotes
            | Error::EmptyProfile
            | Error::AllCandidatesFailed(_)
            | Error::AllSimulationsFailed(..) => Category::Backend,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(Category::Config, e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(Category::Data, format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                Category::Usage.exit_code()
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(&cli, input, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.category.exit_code()
        }
    }
}

/// Config file, then `--set` assignments in order, then `--seed`.
/// Returns the config and the assignments as recorded in the run manifest.
pub fn resolve_config(g: &GlobalArgs) -> CliResult<(RunConfig, Vec<String>)> {
    let mut raw = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::new(Category::Config, format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::new(Category::Config, format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("rng_seed={seed}"));
    }
    for assignment in &overrides {
        apply_override(&mut raw, assignment)?;
    }
    Ok((validate_config(raw)?, overrides))
}

/// Stand-in for commands that never call a model.
struct Unbound;

impl ChatBackend for Unbound {
    fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
        Err(BackendError::InvalidRequest("no backend configured (use --backend-rec)".into()))
    }

    fn default_temperature(&self) -> f64 {
        0.7
    }

    fn describe(&self) -> String {
        "unbound".into()
    }
}

fn open_backend(r: &BackendRef) -> CliResult<Arc<dyn ChatBackend>> {
    r.open().map_err(|e| CliError::new(Category::Backend, format!("cannot open backend {r}: {e}")))
}

fn agents(g: &GlobalArgs, command: &str, needs_model: bool) -> CliResult<Agents> {
    let Some(rec_ref) = &g.backend_rec else {
        if needs_model {
            return Err(CliError::new(Category::Usage, format!("`{command}` needs --backend-rec")));
        }
        return Ok(Agents::single(Arc::new(Unbound)));
    };
    let rec = open_backend(rec_ref)?;
    let user = match &g.backend_user {
        Some(r) => open_backend(r)?,
        None => rec.clone(),
    };
    Ok(Agents::new(user, rec))
}

fn context(g: &GlobalArgs, command: &Command) -> CliResult<(RunContext, Vec<String>)> {
    let (config, overrides) = resolve_config(g)?;
    let prompts = match &g.prompts {
        Some(dir) => PromptSet::from_dir(dir)?,
        None => PromptSet::default(),
    };
    let needs_model = !matches!(command, Command::Import(_) | Command::Convert(_));
    let agents = agents(g, command.name(), needs_model)?;
    Ok((RunContext::new(config, prompts, agents), overrides))
}

fn out_dir(g: &GlobalArgs, command: &Command) -> CliResult<PathBuf> {
    let dir = g.out.clone().unwrap_or_else(|| Path::new("runs").join(command.name()));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(Category::Pipeline, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn load_data(args: &DataArgs, seed: u64, err: &mut dyn Write) -> CliResult<Vec<SeedSample>> {
    let loaded = load_seed_dataset(&args.data)?;
    if !loaded.rejected.is_empty() {
        let _ = writeln!(
            err,
            "warning: {} malformed record(s) skipped, see {}",
            loaded.rejected.len(),
            loaded.sidecar.as_deref().unwrap_or(Path::new("?")).display()
        );
    }
    match args.samples {
        Some(n) => Ok(sample_subset(&loaded.samples, n as usize, seed)?),
        None if loaded.samples.is_empty() => Err(Error::EmptyDataset.into()),
        None => Ok(loaded.samples),
    }
}

fn finish(
    command: &Command,
    overrides: &[String],
    ctx: &RunContext,
    inputs: &[&Path],
    out: &Path,
) -> CliResult<()> {
    let mut manifest = RunManifest::new(command.name(), overrides, ctx);
    for p in inputs {
        manifest = manifest.input(p)?;
    }
    manifest.collect_outputs(out)?.write(out)?;
    Ok(())
}

pub fn dispatch(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let g = &cli.global;
    let command = &cli.command;
    let (ctx, overrides) = context(g, command)?;
    let dir = out_dir(g, command)?;
    let say = |out: &mut dyn Write, text: String| {
        let _ = writeln!(out, "{text}");
    };

    match command {
        Command::Import(a) => {
            let split = format!("{:?}", a.split).to_lowercase();
            let target = dir.join(format!("{}-{split}.jsonl", a.name));
            let report = import_file(a.format, &a.input, &target, &a.name, a.split)?;
            if !report.skipped.is_empty() {
                let rejects = dir.join(format!("{}-{split}.skipped.jsonl", a.name));
                jsonl::write(&rejects, &report.skipped)?;
                say(err, format!("warning: {} record(s) skipped, see {}", report.skipped.len(), rejects.display()));
            }
            say(out, format!("imported {} samples into {}", report.manifest.count, target.display()));
            finish(command, &overrides, &ctx, &[&a.input], &dir)
        }
        Command::Simulate(a) => {
            let data = load_data(a, ctx.config.rng_seed, err)?;
            let t = ctx.config.first_sample_temperature;
            let results = ctx.exec.map(data.iter().collect(), |s| run_simulation(&ctx, s, t, 0));
            let mut dumps = Vec::new();
            let mut failed = Vec::new();
            let mut counts = [0usize; 3];
            for (s, r) in data.iter().zip(results) {
                match r {
                    Ok(o) => {
                        counts[o.score.value() as usize] += 1;
                        dumps.push(o.dump(&s.id));
                    }
                    Err(e) => failed.push(json!({"id": s.id, "error": e.to_string()})),
                }
            }
            jsonl::write(&dir.join("transcripts.jsonl"), &dumps)?;
            write_json(
                &dir.join("report.json"),
                &json!({
                    "total": data.len(),
                    "simulated": dumps.len(),
                    "score_counts": {"0": counts[0], "1": counts[1], "2": counts[2]},
                    "failures": failed,
                    "ledger": ctx.ledger_snapshot(),
                }),
            )?;
            say(out, format!("simulated {}/{} dialogues (scores 0/1/2: {}/{}/{})", dumps.len(), data.len(), counts[0], counts[1], counts[2]));
            finish(command, &overrides, &ctx, &[&a.data], &dir)
        }
        Command::BuildPrefs(a) => {
            let data = load_data(a, ctx.config.rng_seed, err)?;
            let mut opts = BuildOptions::new(dir.join("pairs.jsonl"));
            if g.trace {
                opts.transcripts = Some(dir.join("transcripts.jsonl"));
            }
            let report = build_dataset(&ctx, &data, &opts)?;
            write_json(&dir.join("report.json"), &report)?;
            say(
                out,
                format!(
                    "{} pairs from {} samples ({} identical, {} undefined, {} failed) -> {}",
                    report.emitted,
                    report.total,
                    report.skipped_identical,
                    report.skipped_undefined,
                    report.failures,
                    opts.output.display()
                ),
            );
            finish(command, &overrides, &ctx, &[&a.data], &dir)
        }
        Command::Evaluate(a) => {
            let data = load_data(&a.data, ctx.config.rng_seed, err)?;
            let name = a.name.clone().unwrap_or_else(|| dataset_name(&a.data.data));
            match a.metric {
                Metric::Ieval => {
                    let (report, details) = ieval_run_detailed(&ctx, &name, &data, a.ses)?;
                    write_json(&dir.join("report.json"), &report)?;
                    if g.trace {
                        jsonl::write(&dir.join("traces.jsonl"), &details)?;
                    }
                    let _ = write!(out, "{}", summary_table(std::slice::from_ref(&report)));
                    if !report.excluded.is_empty() {
                        say(err, format!("warning: {} sample(s) excluded after failures", report.excluded.len()));
                    }
                }
                Metric::Recall => {
                    if a.ses {
                        return Err(CliError::new(Category::Usage, "--ses applies to --metric ieval only"));
                    }
                    let report = recall_at_1(&ctx, &data)?;
                    write_json(&dir.join("recall.json"), &report)?;
                    say(out, format!("recall@1 {}/{} = {:.4} ({})", report.hits, report.n, report.recall_at_1, report.extraction_rule));
                }
            }
            finish(command, &overrides, &ctx, &[&a.data.data], &dir)
        }
        Command::Chat(a) => {
            let outcome = chat_repl(&ctx, a.ses, input, out).map_err(|e| CliError::new(Category::Pipeline, e.to_string()))?;
            write_json(&dir.join("chat.json"), &outcome)?;
            finish(command, &overrides, &ctx, &[], &dir)
        }
        Command::Serve(a) => {
            let mut cfg = ServiceConfig::new(ctx.config.clone(), ctx.prompts.clone(), ctx.agents.clone());
            cfg.ttl = Duration::from_secs(a.ttl_secs);
            cfg.event_log = a.event_log.clone();
            cfg.static_dir = a.static_dir.clone();
            cfg.cors_origin = a.cors_origin.clone();
            let addr: SocketAddr = format!("{}:{}", a.host, a.port)
                .parse()
                .map_err(|e| CliError::new(Category::Usage, format!("bad listen address: {e}")))?;
            let state = AppState::new(cfg).map_err(|e| CliError::new(Category::Data, format!("event log: {e}")))?;
            finish(command, &overrides, &ctx, &[], &dir)?;
            say(out, format!("listening on http://{addr}"));
            let _ = out.flush();
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new(Category::Pipeline, e.to_string()))?;
            rt.block_on(simrec_service::serve(state, addr))
                .map_err(|e| CliError::new(Category::Pipeline, format!("server: {e}")))
        }
        Command::Convert(a) => {
            let n = convert_to_flat(&a.input, &a.output)?;
            say(out, format!("converted {n} pairs into {}", a.output.display()));
            finish(command, &overrides, &ctx, &[&a.input], &dir)
        }
    }
}

fn dataset_name(data: &Path) -> String {
    DatasetManifest::load(&DatasetManifest::path_for(data))
        .map(|m| m.name)
        .unwrap_or_else(|_| data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()))
}
