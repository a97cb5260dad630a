//! The `mimir` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mimir_core::pipeline::{
    run_dialogues, run_trajectories, run_verification, GenerateConfig, RunControl, DEFAULT_DOMAIN,
    DEFAULT_MAX_TRIALS,
};
use mimir_core::tuning::{
    emit_finetune_script, export_dialogues, export_trajectories, launch_finetune, read_dialogues,
    read_finetune_config, write_atomic, LaunchOptions, DEFAULT_TAIL_LINES,
};
use mimir_core::types::{Framework, GenerationConfig, Topic, TopicKind, DEFAULT_MAX_STEPS};
use mimir_core::verify::TurnSelection;
use mimir_core::ingest::parse_topics;

use crate::app::{build_pipeline, App, AppConfig, DEFAULT_MAX_JOBS};
use crate::scheduler::Scheduler;
use crate::topics::TopicStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mimir", version, about = "Personalized agent-tuning data generation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Directory holding jobs/ and topics.json.
    #[arg(long, global = true, default_value = "mimir-data")]
    pub data_dir: PathBuf,
    /// Dataset registry directory.
    #[arg(long, global = true, default_value = "registry")]
    pub registry: PathBuf,
    /// Directory of `<domain>.json` role catalogues.
    #[arg(long, global = true)]
    pub roles_dir: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long, global = true)]
    pub prompts_dir: Option<PathBuf>,
    /// `tools.json` adding or replacing search tools.
    #[arg(long, global = true)]
    pub tools_config: Option<PathBuf>,
    /// JSON script answering completions instead of the HTTP provider.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Model for the verifier, if different from generation.
    #[arg(long, global = true)]
    pub verify_model: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP job service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_MAX_JOBS)]
        max_jobs: usize,
        #[arg(long, default_value_t = DEFAULT_TAIL_LINES)]
        tail_lines: usize,
    },
    /// Dataset registry commands.
    Datasets {
        #[command(subcommand)]
        command: DatasetsCommand,
    },
    /// Topic ingestion.
    Ingest {
        #[command(subcommand)]
        command: IngestCommand,
    },
    /// Generate dialogues or trajectories.
    Generate {
        #[command(subcommand)]
        command: GenerateCommand,
    },
    /// Verify a dialogue file and write a hallucination report.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `all` or comma-separated assistant turn indices.
        #[arg(long, default_value = "all")]
        turns: TurnSelection,
        /// Also write per-pair verdicts as JSON Lines.
        #[arg(long)]
        verdicts: Option<PathBuf>,
    },
    /// Fine-tune script emission and launch.
    Finetune {
        #[command(subcommand)]
        command: FinetuneCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetsCommand {
    List {
        #[arg(long, default_value = "")]
        query: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Keyword,
    Sentence,
}

impl From<KindArg> for TopicKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Keyword => TopicKind::Keyword,
            KindArg::Sentence => TopicKind::Sentence,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum IngestCommand {
    /// Add one topic per line to the topic store.
    Topics {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
    },
}

#[derive(Debug, Args)]
pub struct SelectionArgs {
    #[arg(long, value_delimiter = ',')]
    pub datasets: Vec<String>,
    /// Stored topics to include: `none`, `all` or comma-separated ids.
    #[arg(long, default_value = "none")]
    pub topics: String,
    /// Extra topics read from a file, one per line.
    #[arg(long)]
    pub topic_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "keyword")]
    pub topic_kind: KindArg,
    #[arg(long)]
    pub per_dataset_cap: Option<usize>,
    #[arg(long)]
    pub max_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = mimir_core::types::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = mimir_core::types::DEFAULT_MAX_TOKENS)]
    pub max_tokens: u32,
    #[arg(long, default_value = DEFAULT_DOMAIN)]
    pub domain: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FrameworkArg {
    React,
    Cot,
    Reflexion,
}

impl From<FrameworkArg> for Framework {
    fn from(f: FrameworkArg) -> Self {
        match f {
            FrameworkArg::React => Framework::React,
            FrameworkArg::Cot => Framework::Cot,
            FrameworkArg::Reflexion => Framework::Reflexion,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum GenerateCommand {
    Dialogue {
        #[arg(long, default_value_t = 1)]
        rounds: u32,
        #[arg(long, value_delimiter = ',')]
        roles: Vec<String>,
        /// Run the idea and memory-rating loop and write it next to the output.
        #[arg(long)]
        chat_room: bool,
        #[command(flatten)]
        selection: SelectionArgs,
    },
    Trajectory {
        #[arg(long, value_enum, default_value = "react")]
        framework: FrameworkArg,
        #[arg(long, value_delimiter = ',')]
        tools: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_TRIALS)]
        max_trials: u32,
        /// Chain-of-thought template file with a `{question}` placeholder.
        #[arg(long)]
        cot_template: Option<PathBuf>,
        #[arg(long)]
        include_incomplete: bool,
        #[command(flatten)]
        selection: SelectionArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum FinetuneCommand {
    /// Write train_config.json and train.sh.
    Emit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an emitted script and report its outcome.
    Launch {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAIL_LINES)]
        tail_lines: usize,
    },
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub async fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli).await {
        Ok(()) => EXIT_OK,
        Err(message) => {
            eprintln!("error: {message}");
            EXIT_RUNTIME
        }
    }
}

fn app_config(global: &GlobalArgs) -> AppConfig {
    let mut config = AppConfig::new(&global.data_dir, &global.registry);
    config.roles_dir = global.roles_dir.clone();
    config.prompts_dir = global.prompts_dir.clone();
    config.tools_config = global.tools_config.clone();
    config.mock_script = global.mock_script.clone();
    config.verify_model = global.verify_model.clone();
    config
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

async fn execute(cli: Cli) -> Result<(), String> {
    let config = app_config(&cli.global);
    match cli.command {
        Command::Serve {
            port,
            host,
            max_jobs,
            tail_lines,
        } => {
            let mut config = config;
            config.max_jobs = max_jobs;
            config.tail_lines = tail_lines;
            serve(config, &host, port).await
        }
        Command::Datasets {
            command: DatasetsCommand::List { query },
        } => {
            let registry = mimir_core::ingest::Registry::open(&config.registry_dir).map_err(err)?;
            let mut stdout = std::io::stdout().lock();
            for d in registry.search_datasets(&query) {
                let _ = writeln!(
                    stdout,
                    "{}\t{}\t{}\t{}\t{}",
                    d.id,
                    d.name,
                    d.domain,
                    serde_json::to_value(d.format).expect("format serializes").as_str().unwrap_or(""),
                    d.record_count
                );
            }
            Ok(())
        }
        Command::Ingest {
            command: IngestCommand::Topics { file, kind },
        } => {
            let bytes = fs::read(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let topics = parse_topics(&bytes, kind.into()).map_err(err)?;
            let store = TopicStore::open(config.topics_path()).map_err(err)?;
            let parsed = topics.len();
            let added = store.add(topics).map_err(err)?;
            println!("added {added} of {parsed} topics");
            Ok(())
        }
        Command::Generate { command } => generate(config, command).await,
        Command::Verify {
            input,
            out,
            turns,
            verdicts,
        } => {
            let (_, verifier) = build_pipeline(&config).map_err(err)?;
            let samples = read_dialogues(&input).map_err(err)?;
            let run = run_verification(
                &samples,
                &turns,
                &*verifier,
                &GenerationConfig::default(),
                &RunControl::none(),
            )
            .await
            .map_err(err)?;
            let mut json = serde_json::to_string_pretty(&run.report).expect("report serializes");
            json.push('\n');
            write_atomic(&out, json.as_bytes()).map_err(err)?;
            if let Some(path) = verdicts {
                let mut body = String::new();
                for v in &run.verdicts {
                    body.push_str(&serde_json::to_string(v).expect("verdict serializes"));
                    body.push('\n');
                }
                write_atomic(&path, body.as_bytes()).map_err(err)?;
            }
            println!("{}", serde_json::to_string(&run.report).expect("report serializes"));
            Ok(())
        }
        Command::Finetune {
            command: FinetuneCommand::Emit { config: path, out },
        } => {
            let ft = read_finetune_config(&path).map_err(err)?;
            let script = emit_finetune_script(&ft, &out).map_err(err)?;
            println!("{}", script.display());
            Ok(())
        }
        Command::Finetune {
            command: FinetuneCommand::Launch { script, tail_lines },
        } => {
            let process = launch_finetune(
                &script,
                &LaunchOptions {
                    tail_lines,
                    ..LaunchOptions::default()
                },
            )
            .map_err(err)?;
            let outcome = process
                .wait_or_cancel(async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
                .map_err(err)?;
            for line in &outcome.tail {
                println!("{line}");
            }
            if outcome.canceled {
                return Err("interrupted".into());
            }
            outcome.into_result().map(|_| ()).map_err(err)
        }
    }
}

fn topics_for(selection: &SelectionArgs, store: &TopicStore) -> Result<Vec<Topic>, String> {
    let mut topics = match selection.topics.trim() {
        "none" | "" => Vec::new(),
        "all" => store.all(),
        list => {
            let ids: Vec<String> = list.split(',').map(|s| s.trim().to_owned()).collect();
            store.select(Some(&ids)).map_err(err)?
        }
    };
    if let Some(path) = &selection.topic_file {
        let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        topics.extend(parse_topics(&bytes, selection.topic_kind.into()).map_err(err)?);
    }
    Ok(topics)
}

fn generate_config(selection: &SelectionArgs) -> GenerateConfig {
    GenerateConfig {
        generation: GenerationConfig {
            temperature: selection.temperature,
            max_tokens: selection.max_tokens,
            rng_seed: selection.seed,
            ..GenerationConfig::default()
        },
        datasets: selection.datasets.clone(),
        per_dataset_cap: selection.per_dataset_cap,
        max_samples: selection.max_samples,
        domain: selection.domain.clone(),
        ..GenerateConfig::default()
    }
}

async fn generate(config: AppConfig, command: GenerateCommand) -> Result<(), String> {
    let (pipeline, _) = build_pipeline(&config).map_err(err)?;
    let store = TopicStore::open(config.topics_path()).map_err(err)?;
    match command {
        GenerateCommand::Dialogue {
            rounds,
            roles,
            chat_room,
            selection,
        } => {
            let topics = topics_for(&selection, &store)?;
            let mut gen = generate_config(&selection);
            gen.generation.rounds = rounds;
            gen.generation.picked_roles = roles;
            gen.chat_room = chat_room;
            let run = run_dialogues(&pipeline, &gen, &topics, &RunControl::none())
                .await
                .map_err(err)?;
            let summary = export_dialogues(&run.samples, &selection.out).map_err(err)?;
            if !run.chat_rooms.is_empty() {
                let path = selection.out.with_extension("chat_rooms.jsonl");
                let mut body = String::new();
                for record in &run.chat_rooms {
                    body.push_str(&serde_json::to_string(record).expect("record serializes"));
                    body.push('\n');
                }
                write_atomic(&path, body.as_bytes()).map_err(err)?;
            }
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            Ok(())
        }
        GenerateCommand::Trajectory {
            framework,
            tools,
            max_steps,
            max_trials,
            cot_template,
            include_incomplete,
            selection,
        } => {
            let topics = topics_for(&selection, &store)?;
            let mut gen = generate_config(&selection);
            gen.generation.framework = framework.into();
            gen.generation.tools = tools;
            gen.generation.max_steps = max_steps;
            gen.max_trials = max_trials;
            gen.include_incomplete = include_incomplete;
            if let Some(path) = cot_template {
                gen.cot_template = Some(fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?);
            }
            let trajectories = run_trajectories(&pipeline, &gen, &topics, &RunControl::none())
                .await
                .map_err(err)?;
            let summary = export_trajectories(&trajectories, &selection.out, include_incomplete).map_err(err)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            Ok(())
        }
    }
}

async fn serve(config: AppConfig, host: &str, port: u16) -> Result<(), String> {
    let (app, recovery) = App::build(config).map_err(err)?;
    for id in &recovery.interrupted {
        tracing::warn!(job = %id, "marked interrupted after restart");
    }
    let scheduler = Scheduler::new(Arc::new(app));
    scheduler.resume(&recovery.queued);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| format!("bad address {host}:{port}: {e}"))?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(err)?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, crate::api::router(scheduler))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(err)
}
