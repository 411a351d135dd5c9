//! Command-line driver: every run gets a timestamped directory and a
//! manifest recording its configuration, input hashes and output hashes.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod run;
pub mod settings;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Args, Parser, Subcommand};

pub use error::CliError;
use manifest::{hash_file, Manifest};
use run::{clean_failed, create_run_dir, list_outputs, RunContext, MANIFEST};
use settings::{Settings, PATH_KEYS};

#[derive(Debug, Parser)]
#[command(
    name = "termembed",
    version,
    about = "Medical term embeddings with knowledge-graph guidance"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every run command. Precedence, lowest first:
/// defaults, `--config`, `--set`, dedicated flags.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// File of key=value settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long)]
    pub triples: Option<PathBuf>,
    #[arg(long)]
    pub eval_triples: Option<PathBuf>,
    #[arg(long)]
    pub known_triples: Option<PathBuf>,
    #[arg(long)]
    pub kge: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub types: Option<PathBuf>,
    #[arg(long)]
    pub relatedness: Option<PathBuf>,
}

impl RunArgs {
    pub fn settings(&self) -> Result<Settings, CliError> {
        let mut s = Settings::default();
        if let Some(p) = &self.config {
            s.load_file(p)?;
        }
        for kv in &self.set {
            s.assign(kv)?;
        }
        if let Some(seed) = self.seed {
            s.set("seed", &seed.to_string())?;
        }
        let paths = [
            ("out", &self.out),
            ("corpus", &self.corpus),
            ("dictionary", &self.dictionary),
            ("vocab", &self.vocab),
            ("contexts", &self.contexts),
            ("triples", &self.triples),
            ("eval_triples", &self.eval_triples),
            ("known_triples", &self.known_triples),
            ("kge", &self.kge),
            ("encoder", &self.encoder),
            ("types", &self.types),
            ("relatedness", &self.relatedness),
        ];
        for (k, v) in paths {
            if let Some(p) = v {
                s.set(k, &p.to_string_lossy())?;
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, dictionary, graph and benchmarks.
    Synth(RunArgs),
    /// Match dictionary terms in a corpus and extract mention contexts.
    BuildCorpus(RunArgs),
    /// Split triples into train/test/valid with seen entities only.
    SplitKg(RunArgs),
    /// Train a knowledge graph embedding model.
    TrainKge(RunArgs),
    /// Filtered link prediction for a trained KGE model.
    EvalKge(RunArgs),
    /// Contrastive fine-tuning with hard-pair sampling.
    TrainContrastive(RunArgs),
    /// Joint masked-language-model and entity-linking training.
    TrainInjected(RunArgs),
    /// Injection training followed by contrastive fine-tuning.
    TrainPipelined(RunArgs),
    /// Semantic-type coherence of concept embeddings.
    EvalMscm(RunArgs),
    /// Synonym clustering F1 over a similarity threshold grid.
    EvalClustering(RunArgs),
    /// Spearman correlation with human relatedness scores.
    EvalRelatedness(RunArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(RunArgs),
    /// Repeat a run from its manifest and compare output hashes.
    Rerun {
        manifest: PathBuf,
        /// Root directory for the new run (defaults to the original).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Synth,
    BuildCorpus,
    SplitKg,
    TrainKge,
    EvalKge,
    TrainContrastive,
    TrainInjected,
    TrainPipelined,
    EvalMscm,
    EvalClustering,
    EvalRelatedness,
    Gradcheck,
}

impl Task {
    pub const ALL: [Task; 12] = [
        Task::Synth,
        Task::BuildCorpus,
        Task::SplitKg,
        Task::TrainKge,
        Task::EvalKge,
        Task::TrainContrastive,
        Task::TrainInjected,
        Task::TrainPipelined,
        Task::EvalMscm,
        Task::EvalClustering,
        Task::EvalRelatedness,
        Task::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Synth => "synth",
            Task::BuildCorpus => "build-corpus",
            Task::SplitKg => "split-kg",
            Task::TrainKge => "train-kge",
            Task::EvalKge => "eval-kge",
            Task::TrainContrastive => "train-contrastive",
            Task::TrainInjected => "train-injected",
            Task::TrainPipelined => "train-pipelined",
            Task::EvalMscm => "eval-mscm",
            Task::EvalClustering => "eval-clustering",
            Task::EvalRelatedness => "eval-relatedness",
            Task::Gradcheck => "gradcheck",
        }
    }

    pub fn from_name(name: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == name)
    }

    fn execute(self, s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
        match self {
            Task::Synth => commands::synth(s, ctx),
            Task::BuildCorpus => commands::build_corpus(s, ctx),
            Task::SplitKg => commands::split_kg(s, ctx),
            Task::TrainKge => commands::train_kge(s, ctx),
            Task::EvalKge => commands::eval_kge(s, ctx),
            Task::TrainContrastive => commands::train_contrastive_cmd(s, ctx),
            Task::TrainInjected => commands::train_injected_cmd(s, ctx),
            Task::TrainPipelined => commands::train_pipelined(s, ctx),
            Task::EvalMscm => commands::eval_mscm(s, ctx),
            Task::EvalClustering => commands::eval_clustering(s, ctx),
            Task::EvalRelatedness => commands::eval_relatedness(s, ctx),
            Task::Gradcheck => commands::gradcheck_cmd(s, ctx),
        }
    }
}

/// Where a finished run left its files.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
}

impl RunSummary {
    pub fn file(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

fn write_manifest(
    task: Task,
    s: &Settings,
    inputs: &[(String, String)],
    ctx: &RunContext,
    status: &str,
) -> Result<PathBuf, CliError> {
    let mut m = Manifest::default();
    m.push("command", task.name());
    m.push("status", status);
    m.push("timestamp", Utc::now().to_rfc3339());
    m.push("seed", s.get("seed"));
    m.push("run_dir", ctx.dir.to_string_lossy());
    for (k, v) in s.iter() {
        m.push(format!("config.{k}"), v);
    }
    for (k, h) in inputs {
        m.push(format!("input.{k}"), h.clone());
    }
    for name in list_outputs(&ctx.dir)? {
        m.push(format!("output.{name}"), hash_file(&ctx.dir.join(&name))?);
    }
    for (name, h) in &ctx.parents {
        m.push(format!("parent.{name}"), h.clone());
    }
    let path = ctx.dir.join(MANIFEST);
    m.write(&path)?;
    Ok(path)
}

/// Runs `task` in a fresh run directory.
pub fn execute(task: Task, settings: &Settings) -> Result<RunSummary, CliError> {
    let seed = settings.seed()?;
    let mut inputs = Vec::new();
    for key in PATH_KEYS {
        if let Some(p) = settings.path(key)? {
            inputs.push((key.to_string(), hash_file(&p)?));
        }
    }
    let dir = create_run_dir(Path::new(settings.get("out")), seed)?;
    let mut ctx = RunContext::new(dir);
    log::info!("{} -> {}", task.name(), ctx.dir.display());
    match task.execute(settings, &mut ctx) {
        Ok(()) => match write_manifest(task, settings, &inputs, &ctx, "ok") {
            Ok(manifest) => Ok(RunSummary {
                run_dir: ctx.dir,
                manifest,
            }),
            Err(e) => {
                clean_failed(&ctx, &e);
                Err(e)
            }
        },
        Err(e) => {
            clean_failed(&ctx, &e);
            if ctx.dir.exists() {
                let _ = write_manifest(task, settings, &inputs, &ctx, "numerical-failure");
            }
            Err(e)
        }
    }
}

/// Repeats the run described by `manifest` and checks that every output
/// hash matches.
pub fn rerun(manifest: &Path, out: Option<&Path>) -> Result<RunSummary, CliError> {
    let old = Manifest::read(manifest)?;
    let name = old
        .get("command")
        .ok_or_else(|| CliError::Config("manifest has no command".into()))?;
    let task = Task::from_name(name)
        .ok_or_else(|| CliError::Config(format!("unknown command {name:?} in manifest")))?;
    let mut s = Settings::default();
    for (k, v) in old.with_prefix("config.") {
        s.set(k, v)?;
    }
    if let Some(o) = out {
        s.set("out", &o.to_string_lossy())?;
    }
    for (k, h) in old.with_prefix("input.") {
        let p = s.require(k)?;
        if hash_file(&p)? != h {
            return Err(CliError::Config(format!(
                "input {k} ({}) changed since the original run",
                p.display()
            )));
        }
    }
    let summary = execute(task, &s)?;
    let new = Manifest::read(&summary.manifest)?;
    let old_out: Vec<(&str, &str)> = old.with_prefix("output.").collect();
    let new_out: Vec<(&str, &str)> = new.with_prefix("output.").collect();
    let mut differing: Vec<String> = old_out
        .iter()
        .filter(|o| !new_out.contains(o))
        .map(|(f, _)| f.to_string())
        .collect();
    differing.extend(
        new_out
            .iter()
            .filter(|(f, _)| !old_out.iter().any(|(g, _)| g == f))
            .map(|(f, _)| f.to_string()),
    );
    if differing.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::Mismatch(format!(
            "outputs differ: {}",
            differing.join(", ")
        )))
    }
}

/// Parses `args` and runs the selected command.
pub fn run_cli(cli: Cli) -> Result<RunSummary, CliError> {
    let (task, args) = match cli.command {
        Command::Rerun { manifest, out } => return rerun(&manifest, out.as_deref()),
        Command::Synth(a) => (Task::Synth, a),
        Command::BuildCorpus(a) => (Task::BuildCorpus, a),
        Command::SplitKg(a) => (Task::SplitKg, a),
        Command::TrainKge(a) => (Task::TrainKge, a),
        Command::EvalKge(a) => (Task::EvalKge, a),
        Command::TrainContrastive(a) => (Task::TrainContrastive, a),
        Command::TrainInjected(a) => (Task::TrainInjected, a),
        Command::TrainPipelined(a) => (Task::TrainPipelined, a),
        Command::EvalMscm(a) => (Task::EvalMscm, a),
        Command::EvalClustering(a) => (Task::EvalClustering, a),
        Command::EvalRelatedness(a) => (Task::EvalRelatedness, a),
        Command::Gradcheck(a) => (Task::Gradcheck, a),
    };
    execute(task, &args.settings()?)
}

/// Entry point taking raw arguments; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run_cli(cli) {
        Ok(summary) => {
            println!("{}", summary.run_dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// [`run_cli`] on raw arguments, for callers that want the summary.
pub fn run_args<I, T>(args: I) -> Result<RunSummary, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run_cli(cli)
}
