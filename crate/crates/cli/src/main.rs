use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use icre::dataset::{Manifest, Split, SyntheticConfig};
use icre::harness::{
    ablate, distance_report, evaluate, synthetic_benchmark, train, write_ablation_csv,
    AblationGrid, Checkpoint, TrainConfig,
};
use icre::metrics::{Metric, ProtocolConfig};
use icre::{Error, Result};

#[derive(Parser)]
#[command(
    name = "icre",
    version,
    about = "Cross-modal person re-identification at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-modality benchmark: train/, test/, query.csv, gallery.csv.
    GenSynthetic {
        #[arg(long, default_value_t = 10)]
        ids: usize,
        /// Images per identity and modality.
        #[arg(long, default_value_t = 20)]
        per_id: usize,
        /// HEIGHTxWIDTH.
        #[arg(long, default_value = "64x32", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its log and checkpoints to the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// Seed for the gallery draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every row of an ablation grid over its seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        /// Receives ablation.csv, ablation.json and, when the grid names no
        /// data, the synthetic benchmark it trains on.
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Histogram of cross-modal distances between same- and different-identity pairs.
    PlotDist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
        metric: MetricArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::CosineDistance,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn protocol_config(path: Option<&Path>) -> Result<ProtocolConfig> {
    match path {
        Some(p) => ProtocolConfig::load(p),
        None => Ok(ProtocolConfig::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn print(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("JSON values serialize")
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic {
            ids,
            per_id,
            size,
            seed,
            out,
        } => {
            let cfg = SyntheticConfig {
                num_ids: ids,
                per_id,
                height: size.0,
                width: size.1,
                seed,
            };
            let b = synthetic_benchmark(&cfg, &out)?;
            print(&json!({
                "train": out.join("train").join("manifest.csv"),
                "test": out.join("test").join("manifest.csv"),
                "query": out.join("query.csv"),
                "gallery": out.join("gallery.csv"),
                "identities": b.train.num_identities(),
                "train_images": b.train.len(),
                "query_images": b.query.len(),
                "gallery_images": b.gallery.len(),
            }));
        }
        Command::Train {
            config,
            manifest,
            out,
        } => {
            let cfg = train_config(config.as_deref())?;
            let manifest = Manifest::load(&manifest, Split::Train)?;
            let outcome = train(&cfg, &manifest, Some(&out))?;
            let last = outcome.log.last();
            print(&json!({
                "checkpoint": out.join("final.safetensors"),
                "log": out.join("train_log.jsonl"),
                "epochs": outcome.checkpoint.epoch,
                "param_hash": outcome.checkpoint.param_hash(),
                "final_loss": last.map(|l| l.total),
            }));
        }
        Command::Eval {
            checkpoint,
            query,
            gallery,
            protocol,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let protocol = protocol_config(protocol.as_deref())?;
            let query = Manifest::load(&query, Split::Query)?;
            let gallery = Manifest::load(&gallery, Split::Gallery)?;
            let model = ck.build_model()?;
            let size = (ck.config.height, ck.config.width);
            let report = evaluate(
                &model,
                &query,
                &gallery,
                &protocol,
                size,
                ck.config.eval_batch,
                seed,
            )?;
            let text = report.to_json()?;
            if let Some(path) = out {
                std::fs::write(&path, &text).map_err(|e| io_error(&path, e))?;
            }
            println!("{text}");
        }
        Command::Ablate { config, grid, out } => {
            let base = train_config(config.as_deref())?;
            let grid = AblationGrid::load(&grid)?;
            let protocol = protocol_config(grid.protocol.as_deref())?;
            let (train_set, query, gallery) =
                match (
                    &grid.train_manifest,
                    &grid.query_manifest,
                    &grid.gallery_manifest,
                ) {
                    (Some(t), Some(q), Some(g)) => (
                        Manifest::load(t, Split::Train)?,
                        Manifest::load(q, Split::Query)?,
                        Manifest::load(g, Split::Gallery)?,
                    ),
                    (None, None, None) => {
                        let b = synthetic_benchmark(
                            &SyntheticConfig {
                                num_ids: 10,
                                per_id: 20,
                                height: base.height,
                                width: base.width,
                                seed: 0,
                            },
                            out.join("data"),
                        )?;
                        (b.train, b.query, b.gallery)
                    }
                    _ => return Err(Error::Config(
                        "give all of train_manifest, query_manifest and gallery_manifest, or none"
                            .into(),
                    )),
                };
            let results = ablate(
                &base,
                &grid,
                &train_set,
                &query,
                &gallery,
                &protocol,
                |row, s| {
                    eprintln!(
                        "{}",
                        json!({"row": row.label(), "seed": s.seed, "rank1": s.rank1, "map": s.map})
                    );
                },
            )?;
            let csv_path = out.join("ablation.csv");
            write_ablation_csv(&results, create(&csv_path)?).map_err(|e| io_error(&csv_path, e))?;
            let json_path = out.join("ablation.json");
            serde_json::to_writer_pretty(create(&json_path)?, &results)?;
            write_ablation_csv(&results, std::io::stdout().lock())
                .map_err(|e| io_error(Path::new("<stdout>"), e))?;
        }
        Command::PlotDist {
            checkpoint,
            manifest,
            out,
            bins,
            metric,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let manifest = Manifest::load(&manifest, Split::Train)?;
            let model = ck.build_model()?;
            let size = (ck.config.height, ck.config.width);
            let hist = distance_report(
                &model,
                &manifest,
                bins,
                metric.into(),
                size,
                ck.config.eval_batch,
            )?;
            hist.write_csv(create(&out)?)?;
            print(&json!({
                "histogram": out,
                "metric": hist.metric,
                "intra_mean": hist.intra_mean,
                "inter_mean": hist.inter_mean,
                "gap": hist.inter_mean - hist.intra_mean,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": "usage", "message": e.to_string().trim_end()}})
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": e.kind(), "message": e.to_string()}})
            );
            ExitCode::FAILURE
        }
    }
}
