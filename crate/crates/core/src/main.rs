use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use galaxyedit::clients::config::{ClientConfig, ClientsConfig, ProvidersConfig};
use galaxyedit::clients::http::HttpClient;
use galaxyedit::clients::mock::MockDepth;
use galaxyedit::clients::{ClientKind, Clients, DepthEstimator};
use galaxyedit::config::RunConfig;
use galaxyedit::diffusion::experiment::{run_experiment, ExperimentConfig};
use galaxyedit::diffusion::runs::{sample_manifest, train_on_manifest, TrainConfig};
use galaxyedit::instructions::{generate, GenConfig};
use galaxyedit::metrics::report::{evaluate_manifest, Providers};
use galaxyedit::pipeline::filters::FilterPolicy;
use galaxyedit::pipeline::run::run_pipeline;
use galaxyedit::pipeline::types::parse_strategies;
use galaxyedit::pipeline::validate::validate_manifest;
use galaxyedit::rating::http::serve;
use galaxyedit::rating::report::report_from_log;
use galaxyedit::rating::service::LOG_FILE;
use galaxyedit::rating::{RatingService, SampleSet};
use galaxyedit::synth::{synth_corpus, SynthConfig};
use galaxyedit::{e2e, Error, Result};

/// Instruction-based add/remove editing toolkit.
#[derive(Parser)]
#[command(name = "galaxyedit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene corpus with ground-truth sidecars.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with synth settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    #[command(subcommand)]
    Instructions(InstructionsCmd),
    /// Train base and adapter on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sample one prediction per manifest record from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Linear vs Volterra conditioning comparison on the micro-dataset.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    #[command(subcommand)]
    Rating(RatingCmd),
    /// Run or resume every stage of an end-to-end run.
    E2e {
        /// Run config; defaults to the 8-image smoke run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Build remove/add pairs from a directory of images.
    Run {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        clients: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a manifest against the schema and its files.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Subcommand)]
enum InstructionsCmd {
    /// Append instructions to a manifest in place.
    Gen {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "simple,attribute,spatial,multi")]
        strategies: String,
        /// `mock` or an http(s) endpoint.
        #[arg(long, default_value = "mock")]
        depth_client: String,
        /// Client file for the label extractor.
        #[arg(long)]
        clients: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Score predictions against a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        providers: Option<PathBuf>,
        /// Directory for report.json and samples.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RatingStore {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value = "rating_state")]
    state: PathBuf,
}

#[derive(Subcommand)]
enum RatingCmd {
    /// Serve the blind rating API.
    Serve {
        #[command(flatten)]
        store: RatingStore,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Print the aggregated table from the rating log.
    Report {
        #[command(flatten)]
        store: RatingStore,
        #[arg(long)]
        json: bool,
    },
    /// Rewrite the rating log without duplicates or torn lines.
    Compact {
        #[command(flatten)]
        store: RatingStore,
    },
}

/// Any failure while reading a config file is a config error.
fn config<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(_) => e,
        e => Error::config(e.to_string()),
    })
}

fn toml_file<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn depth_client(name: &str) -> Result<Box<dyn DepthEstimator>> {
    if name == "mock" {
        return Ok(Box::new(MockDepth::default()));
    }
    let cfg = ClientConfig::new(name);
    config(cfg.validate())?;
    Ok(Box::new(HttpClient::new(ClientKind::Depth, cfg)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, seed, out, config: c } => {
            if n == 0 {
                return Err(Error::config("--n must be at least 1"));
            }
            let cfg: SynthConfig = toml_file(c.as_deref())?;
            config(cfg.validate())?;
            let written = synth_corpus(n, seed, &out, &cfg)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Pipeline(PipelineCmd::Run {
            images,
            out,
            policy,
            clients,
            seed,
        }) => {
            let policy = match policy {
                Some(p) => config(FilterPolicy::load(&p))?,
                None => FilterPolicy::default(),
            };
            config(policy.blocklist())?;
            let clients = match clients {
                Some(p) => config(ClientsConfig::load(&p))?,
                None => ClientsConfig::default(),
            };
            let clients = Clients::from_config(&clients, seed)?;
            print_json(&run_pipeline(&images, &out, &policy, &clients, seed)?)?;
        }
        Command::Pipeline(PipelineCmd::Validate { manifest }) => {
            let report = validate_manifest(&manifest)?;
            print_json(&report)?;
            if !report.ok() {
                return Err(Error::Stage {
                    stage: "validate".into(),
                    message: format!("{} violations", report.errors.len()),
                });
            }
        }
        Command::Instructions(InstructionsCmd::Gen {
            manifest,
            strategies,
            depth_client: depth,
            clients,
            seed,
        }) => {
            let strategies = parse_strategies(&strategies)?;
            let depth = depth_client(&depth)?;
            let clients = match clients {
                Some(p) => config(ClientsConfig::load(&p))?,
                None => ClientsConfig::default(),
            };
            let clients = Clients::from_config(&clients, seed)?;
            let summary = generate(&manifest, &GenConfig::new(strategies), depth.as_ref(), clients.llm.as_ref())?;
            print_json(&summary)?;
        }
        Command::Train { manifest, out, config: c } => {
            let cfg = match c {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            print_json(&train_on_manifest(&manifest, &cfg, &out)?)?;
        }
        Command::Sample {
            checkpoint,
            manifest,
            out,
            steps,
            batch,
            seed,
        } => {
            let n = sample_manifest(&checkpoint, &manifest, &out, steps, batch, seed)?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Command::Eval(EvalCmd::Run {
            manifest,
            pred,
            providers,
            out,
            seed,
        }) => {
            let providers = match providers {
                Some(p) => config(ProvidersConfig::load(&p))?,
                None => ProvidersConfig::default(),
            };
            let report = evaluate_manifest(&manifest, &pred, &Providers::from_config(&providers, seed)?)?;
            if let Some(dir) = out {
                report.write(&dir)?;
            }
            print_json(&report)?;
        }
        Command::Experiment { config: c } => {
            let cfg: ExperimentConfig = toml_file(c.as_deref())?;
            let report = run_experiment(&cfg, |line| log::info!("{line}"))?;
            print_json(&report)?;
        }
        Command::Rating(cmd) => rating(cmd)?,
        Command::E2e { config: c, run_dir } => {
            let cfg = match c {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            print_json(&e2e::run_e2e(&cfg, &run_dir)?)?;
        }
    }
    Ok(())
}

fn rating(cmd: RatingCmd) -> Result<()> {
    let open_samples = |s: &RatingStore| config(SampleSet::load(&s.samples));
    match cmd {
        RatingCmd::Serve { store, port, host } => {
            let svc = std::sync::Arc::new(RatingService::open(open_samples(&store)?, &store.state)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Stage {
                stage: "rating".into(),
                message: e.to_string(),
            })?;
            rt.block_on(async {
                let addr = format!("{host}:{port}");
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Error::config(format!("bind {addr}: {e}")))?;
                log::info!("rating service on http://{}", listener.local_addr().map_err(|e| Error::config(e.to_string()))?);
                serve(svc, listener, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
            })?;
        }
        RatingCmd::Report { store, json } => {
            let samples = open_samples(&store)?;
            let log_path = store.state.join(LOG_FILE);
            let report = if log_path.exists() {
                report_from_log(&samples, &log_path)?
            } else {
                galaxyedit::rating::aggregate(&[])
            };
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.table());
            }
        }
        RatingCmd::Compact { store } => {
            let svc = RatingService::open(open_samples(&store)?, &store.state)?;
            let n = svc.compact()?;
            println!("{n} entries kept, {} torn bytes dropped", svc.recovery().truncated_bytes);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
