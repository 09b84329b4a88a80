use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cbhir_cli::commands::{self, SynthArgs, TrainArgs, DEFAULT_TRAIN_FRACTION};

#[derive(Parser)]
#[command(name = "cbhir", version, about = "Content-based histopathology image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a twin network on a class-directory dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Square input size replacing the preset's.
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
        train_fraction: f64,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        /// Also write `<out>.epoch<N>` every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Embed the training split into a store file.
    Index {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve the K nearest stored patches for one image.
    Query {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Score the test split at several K.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "1,3,5")]
        k_list: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label split among the neighbors of uncertain patches.
    Stump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        uncertain_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset as PNGs.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Evaluation report served at /api/report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory of static UI assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            data,
            preset,
            epochs,
            seed,
            out,
            input_size,
            train_fraction,
            batch_size,
            margin,
            checkpoint_every,
            quiet,
        } => {
            let res = commands::train(&TrainArgs {
                data,
                preset,
                epochs,
                seed,
                out: out.clone(),
                input_size,
                train_fraction,
                batch_size,
                margin,
                checkpoint_every,
                quiet,
            })?;
            eprintln!(
                "wrote {} ({} steps, final lr {:.6}), {}, {}",
                out.display(),
                res.report.steps,
                res.report.final_lr,
                res.loss_csv.display(),
                res.manifest.display()
            );
        }
        Command::Index { ckpt, data, out } => {
            let store = commands::index(&ckpt, &data, &out)?;
            eprintln!("wrote {} ({} records, dimension {})", out.display(), store.len(), store.dimension());
        }
        Command::Query { ckpt, store, image, k } => print_json(&commands::query(&ckpt, &store, &image, k)?)?,
        Command::Eval {
            ckpt,
            store,
            data,
            k_list,
            out,
        } => {
            let res = commands::eval(&ckpt, &store, &data, &commands::parse_k_list(&k_list)?, &out)?;
            print!("{}", res.table);
            for p in &res.written {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Stump {
            ckpt,
            store,
            uncertain_dir,
            k,
            out,
        } => {
            let report = commands::stump(&ckpt, &store, &uncertain_dir, k)?;
            match out {
                Some(p) => std::fs::write(&p, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => print_json(&report)?,
            }
        }
        Command::Synth { n, size, seed, out } => {
            let manifest = commands::synth(&SynthArgs {
                n_per_class: n,
                size,
                seed,
                out: out.clone(),
            })?;
            eprintln!("wrote {} classes plus uncertain to {}", manifest.classes.len(), out.display());
        }
        Command::Serve {
            ckpt,
            store,
            port,
            host,
            report,
            static_dir,
        } => {
            let mut service = commands::open_service(&ckpt, &store)?;
            if let Some(p) = report {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                service = service.with_report(serde_json::from_str(&text)?);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cbhir_cli::server::serve(service, SocketAddr::new(host, port), static_dir))?;
        }
    }
    Ok(())
}
