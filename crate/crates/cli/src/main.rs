//! `arreid`: aspect-ratio aware vehicle re-identification pipeline.
//!
//! Each subcommand reads files, writes artifacts stamped with the run config
//! hash and seed, and prints the written paths as JSON on stdout. Failures
//! exit nonzero with a JSON error object on stderr.

mod commands;
mod images;
mod plot;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "arreid", version, about = "Aspect-ratio aware vehicle re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run config JSON; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic labeled corpus with train/query/gallery manifests
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Training identities
        #[arg(long, default_value_t = 8)]
        ids: usize,
        /// Held-out identities split into query and gallery
        #[arg(long, default_value_t = 8)]
        test_ids: usize,
        #[arg(long, default_value_t = 8)]
        instances: usize,
        #[arg(long, default_value_t = 2)]
        queries_per_id: usize,
    },
    /// Aspect-ratio statistics, histogram and 1-D k-means centers
    Stats {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Number of aspect-ratio clusters
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Resize plan (one input size per cluster) from a stats file
    Plan {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = 224)]
        base_height: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Intra-image patch mixup over a manifest
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one toy encoder per resize target
    TrainToy {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Feature store for a manifest from a trained model file
    Extract {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aspect-ratio weighted fusion of per-model feature stores
    Fuse {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One store per model, all over the same manifest
        #[arg(long, required = true)]
        stores: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// FusionPolicy JSON overriding the config's
        #[arg(long)]
        policy: Option<PathBuf>,
        /// L2-normalize each fused vector
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// mAP and CMC of a query store against a gallery store
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// EvalProtocol JSON overriding the config's
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Loss values and finite-difference gradient checks on a random batch
    LossesDemo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cmd: Command) -> Result<Vec<PathBuf>> {
    let load = |c: &ConfigArgs| commands::load_config(c.config.as_deref(), c.seed, None, None);
    match cmd {
        Command::Synth {
            cfg,
            out_dir,
            ids,
            test_ids,
            instances,
            queries_per_id,
        } => {
            let args = commands::SynthArgs {
                ids,
                test_ids,
                instances,
                queries_per_id,
            };
            commands::synth(&load(&cfg)?, &args, &out_dir)
        }
        Command::Stats {
            cfg,
            manifest,
            k,
            bins,
            out_dir,
        } => commands::stats(&load(&cfg)?, &manifest, k, bins, &out_dir),
        Command::Plan {
            cfg,
            stats,
            base_height,
            out_dir,
        } => commands::plan(&load(&cfg)?, &stats, base_height, &out_dir),
        Command::Augment { cfg, manifest, out_dir } => commands::augment(&load(&cfg)?, &manifest, &out_dir),
        Command::TrainToy { cfg, manifest, out_dir } => commands::train_toy(&load(&cfg)?, &manifest, &out_dir),
        Command::Extract { params, manifest, out } => commands::extract(&params, &manifest, &out),
        Command::Fuse {
            cfg,
            stores,
            manifest,
            policy,
            normalize,
            out,
        } => {
            let cfg = commands::load_config(cfg.config.as_deref(), cfg.seed, policy.as_deref(), None)?;
            commands::fuse(&cfg, &stores, &manifest, &out, normalize)
        }
        Command::Eval {
            cfg,
            query,
            gallery,
            protocol,
            out_dir,
        } => {
            let cfg = commands::load_config(cfg.config.as_deref(), cfg.seed, None, protocol.as_deref())?;
            commands::eval(&cfg, &query, &gallery, &out_dir)
        }
        Command::LossesDemo { cfg, out_dir } => commands::losses_demo(&load(&cfg)?, &out_dir),
    }
}

/// Stable error kind and exit status.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<arreid_core::Error>() {
            let code = match e {
                arreid_core::Error::Shape(_) => 3,
                arreid_core::Error::Format(_) | arreid_core::Error::Manifest { .. } | arreid_core::Error::Json(_) => 4,
                arreid_core::Error::Io(_) => 5,
                arreid_core::Error::EmptyDataset
                | arreid_core::Error::EmptyInput(_)
                | arreid_core::Error::EmptyEvaluation
                | arreid_core::Error::DegenerateBatch(_) => 7,
                _ => 6,
            };
            return (e.kind(), code);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 5);
        }
        if cause.downcast_ref::<image::ImageError>().is_some() || cause.downcast_ref::<png::EncodingError>().is_some() {
            return ("image", 4);
        }
    }
    ("error", 1)
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message, "exit_code": code } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim_end().to_string(), 2),
    };
    match run(cli.command) {
        Ok(written) => {
            let paths: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
            println!("{}", json!({ "written": paths }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = classify(&e);
            fail(kind, format!("{e:#}"), code)
        }
    }
}
