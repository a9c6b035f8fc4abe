use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use adtriage_core::pipeline::{PipelineConfig, PipelineStage, Runner};
use adtriage_core::report::report;
use adtriage_core::synth::{generate, SynthConfig};
use adtriage_service::{router, AppState};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adtriage", version, about = "Semi-supervised triage of classified-ad corpora")]
struct Cli {
    /// Pipeline configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read and normalize the corpus.
    Ingest,
    /// Extract the fifteen feature bits.
    Features,
    /// Drop all-zero listings, draw the review sample, run the projection check.
    Filter,
    /// Fit the topic model on the filtered listings.
    Topics,
    /// Run label spreading from the journal's seeds.
    Spread,
    /// Run everything and print the dataset and results tables.
    Report,
    /// Serve the review API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Write a synthetic corpus with known ground truth.
    Generate {
        /// Destination JSONL file.
        output: PathBuf,
        #[arg(long, default_value_t = 2_000)]
        total: usize,
        #[arg(long, default_value_t = 200)]
        trafficking: usize,
        #[arg(long, default_value_t = 600)]
        incidental: usize,
        /// Also write `<output>.truth.json` mapping ids to their kind.
        #[arg(long)]
        truth: bool,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, String> {
    let path = cli
        .config
        .as_ref()
        .ok_or("--config is required for this command")?;
    let mut cfg = PipelineConfig::from_path(path).map_err(|e| e.to_string())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), String> {
    let stage = match &cli.command {
        Command::Ingest => PipelineStage::Ingest,
        Command::Features => PipelineStage::Features,
        Command::Filter => PipelineStage::Filter,
        Command::Topics => PipelineStage::Topics,
        Command::Spread => PipelineStage::Spread,
        Command::Report => PipelineStage::Report,
        Command::Serve { host, port } => {
            let cfg = load_config(&cli)?;
            return serve(cfg, host, *port);
        }
        Command::Generate {
            output,
            total,
            trafficking,
            incidental,
            truth,
        } => {
            let corpus = generate(&SynthConfig {
                total: *total,
                trafficking: *trafficking,
                incidental: *incidental,
                seed: cli.seed.unwrap_or(SynthConfig::default().seed),
            });
            std::fs::write(output, corpus.to_jsonl()).map_err(|e| format!("{}: {e}", output.display()))?;
            if *truth {
                let mut p = output.clone().into_os_string();
                p.push(".truth.json");
                let body = serde_json::to_string_pretty(&corpus.truth).map_err(|e| e.to_string())?;
                std::fs::write(&p, body).map_err(|e| e.to_string())?;
            }
            println!("wrote {} listings to {}", corpus.listings.len(), output.display());
            return Ok(());
        }
    };

    let cfg = load_config(&cli)?;
    let mut runner = Runner::new(&cfg).map_err(|e| e.to_string())?;
    let manifest = runner.run_through(stage).map_err(|e| e.to_string())?;
    for t in runner.timings() {
        let note = if t.cached { " (cached)" } else { "" };
        eprintln!("{:<9} {:>7} ms{note}", t.stage.as_str(), t.millis);
    }
    if let Some(m) = manifest {
        let bundle = report(&m);
        print!("{}\n{}", bundle.dataset_txt, bundle.results_txt);
    }
    Ok(())
}

fn serve(cfg: PipelineConfig, host: &str, port: u16) -> Result<(), String> {
    let state = AppState::load(cfg).map_err(|e| format!("cannot start service (run the pipeline through `filter` first): {e}"))?;
    let app = router(Arc::new(state));
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| format!("cannot bind {host}:{port}: {e}"))?;
        log::info!("listening on {host}:{port}");
        axum::serve(listener, app).await.map_err(|e| e.to_string())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
