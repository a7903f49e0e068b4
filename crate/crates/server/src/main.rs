use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use transittalk::config::Config;
use transittalk::gtfs::GtfsFeed;
use transittalk::hub::CallerRole;
use transittalk::policy::ingest_policies;
use transittalk::tweet::{compose_tweet, FormatMode, TweetError};
use transittalk::vector::{HashingEmbedder, VectorStore};
use transittalk_server::{build_hub, load_alerts, load_policies, router, AppState};

#[derive(Parser)]
#[command(name = "transittalk", version, about = "Transit rider assistant")]
struct Cli {
    /// TOML config; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        /// Overrides `server.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Load and validate a GTFS directory, then print a summary.
    IngestGtfs { dir: PathBuf },
    /// Index a directory of policy documents into the saved vector index.
    IngestPolicies { dir: Option<PathBuf> },
    /// Draft tweets for the alerts in a JSON-lines file.
    Tweet {
        #[arg(long)]
        alert_file: PathBuf,
        /// Only this alert.
        #[arg(long)]
        alert_id: Option<String>,
        #[arg(long, value_enum, default_value = "preset")]
        format: Mode,
    },
    /// Ask one policy question.
    Ask {
        query: String,
        #[arg(long)]
        sources: bool,
    },
    /// Chat on stdin, one message per line.
    Chat {
        /// Act as transit staff (enables the tweet writer).
        #[arg(long)]
        staff: bool,
        #[arg(long)]
        session: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Preset,
    Open,
}

impl From<Mode> for FormatMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Preset => FormatMode::Preset,
            Mode::Open => FormatMode::Open,
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => {
            let mut config = Config::default();
            config.apply_env(|k| std::env::var(k).ok());
            config.validate()?;
            Ok(config)
        }
    }
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = load_config(cli.config.as_deref())?;

    match cli.command {
        Command::Serve { bind } => serve(config, bind),
        Command::IngestGtfs { dir } => {
            let feed = GtfsFeed::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
            println!(
                "stops: {}\nroutes: {}\ntrips: {}\nstop_times: {}",
                feed.stops().count(),
                feed.routes().count(),
                feed.trips().count(),
                feed.stop_time_count()
            );
            Ok(())
        }
        Command::IngestPolicies { dir } => {
            let dir = dir.unwrap_or_else(|| config.paths.policies.clone());
            let index = &config.paths.vector_index;
            let mut store = if index.exists() {
                load_policies(&config)?
            } else {
                VectorStore::new(Arc::new(HashingEmbedder::new(config.retrieval.dim)))
            };
            let report = ingest_policies(&dir, &mut store, config.chunking())?;
            if let Some(parent) = index.parent() {
                std::fs::create_dir_all(parent)?;
            }
            store.save(index).with_context(|| format!("saving {}", index.display()))?;
            println!("indexed {} documents, {} chunks -> {}", report.docs, report.chunks, index.display());
            Ok(())
        }
        Command::Tweet { alert_file, alert_id, format } => {
            let feed = Arc::new(GtfsFeed::load(&config.paths.gtfs)?);
            let gateway = config.build_gateway()?;
            let options = config.tweet_options();
            let alerts = load_alerts(&alert_file)?;
            let mut selected = alerts
                .iter()
                .filter(|a| alert_id.as_deref().is_none_or(|id| a.alert_id == id))
                .peekable();
            if selected.peek().is_none() {
                bail!("no matching alerts in {}", alert_file.display());
            }
            for alert in selected {
                match compose_tweet(alert, format.into(), &feed, &gateway, &options) {
                    Ok(draft) => print_draft(&draft),
                    Err(TweetError::AgentFailed(draft)) => {
                        eprintln!("{}: the model gave no usable text", alert.alert_id);
                        print_draft(&draft);
                    }
                    Err(e) => eprintln!("{}: {e}", alert.alert_id),
                }
            }
            Ok(())
        }
        Command::Ask { query, sources } => {
            let hub = build_hub(&config)?;
            let answer = hub.ask_policy(&query, sources)?;
            println!("{}", answer.display_text());
            if let Some(segments) = answer.raw_segments {
                for (c, s) in answer.citations.iter().zip(segments) {
                    println!("\n[{}] {}\n{}", c.chunk_id, c.title, s);
                }
            }
            Ok(())
        }
        Command::Chat { staff, session } => {
            let hub = build_hub(&config)?;
            let role = if staff { CallerRole::Staff } else { CallerRole::Rider };
            let mut session = session;
            let stdin = std::io::stdin();
            let mut out = std::io::stdout();
            for line in stdin.lock().lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match hub.handle_message(session.as_deref(), &line, role) {
                    Ok(reply) => {
                        writeln!(out, "[{}] {}", reply.app.display_name(), reply.reply)?;
                        session = Some(reply.session_id);
                    }
                    Err(e) => writeln!(out, "error: {e}")?,
                }
                out.flush()?;
            }
            if let Some(id) = session {
                eprintln!("session {id}");
            }
            Ok(())
        }
    }
}

fn print_draft(draft: &transittalk::tweet::TweetDraft) {
    println!("{} ({} chars)\n{}", draft.draft_id, draft.text.chars().count(), draft.text);
    for v in &draft.violations {
        println!("  ! {v}");
    }
    println!();
}

fn serve(config: Config, bind: Option<String>) -> anyhow::Result<()> {
    let bind = bind.unwrap_or_else(|| config.server.bind.clone());
    if config.server.staff_token.is_none() {
        tracing::warn!("no staff token configured; staff endpoints are closed");
    }
    let state = AppState {
        hub: Arc::new(build_hub(&config)?),
        staff_token: config.server.staff_token.clone(),
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
