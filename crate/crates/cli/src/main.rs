use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "lanemap", version, about = "Vectorized lane mapping pipelines")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every subcommand. Flags given on the subcommand
/// itself win over `--set`, which wins over the file.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file with [heatmap], [match], [train], [eval] and [synth] tables.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set match.k=40`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Oracle,
    Geometric,
    Tiny,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Lane, vertex and length totals per image.
    Stats {
        /// Annotation document or directory of documents.
        input: PathBuf,
        #[arg(long)]
        csv: bool,
    },
    /// Write one PNG lane mask per image.
    Rasterize {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stroke width in pixels.
        #[arg(long, default_value_t = lanemap::dataset_io::DEFAULT_STROKE_WIDTH)]
        stroke: f64,
    },
    /// Assign images to train/val/test at 7:2:1.
    Split {
        /// Annotation document or directory; ignored when --ids is given.
        input: Option<PathBuf>,
        /// Text file with one image id per line.
        #[arg(long, value_name = "FILE")]
        ids: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vertex heatmaps and offset maps for every image.
    Encode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Peaks of a heatmap tensor as CSV.
    Decode {
        heatmap: PathBuf,
        #[arg(long, value_name = "FILE")]
        offsets: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score every vertex of a synthetic dataset and store the decisions.
    Match {
        /// Directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ScorerKind::Geometric)]
        scorer: ScorerKind,
        /// Trained scorer for `--scorer tiny`.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Only scenes of this split (train, val, test).
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Assemble polylines from stored decisions.
    Build {
        #[arg(long)]
        decisions: PathBuf,
        /// Annotation document for the predicted lanes.
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision, recall and F1 of predicted against ground-truth lanes.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Read thresholds as metres and convert them per image.
        #[arg(long)]
        meters: bool,
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the tiny scorer on the training split.
    TrainScorer {
        /// Directory written by `synth`; scenes are generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scenes to generate when --data is absent.
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Matcher metrics for several candidate counts.
    AblateK {
        #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20, 40])]
        k: Vec<usize>,
        #[arg(long, value_enum, default_value_t = ScorerKind::Geometric)]
        scorer: ScorerKind,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        /// Also write the rows as CSV.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Synthesize, encode, decode, match, build and evaluate in one go.
    E2eOracle {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, value_enum, default_value_t = ScorerKind::Oracle)]
        scorer: ScorerKind,
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        /// Directory for predictions.json and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("LANEMAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        commands::invalid(format!(
            "LANEMAP_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::invalid(e.to_string()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    use commands::*;
    match cli.command {
        Command::Stats { input, csv } => stats(&input, csv),
        Command::Rasterize { input, out, stroke } => rasterize(&input, &out, stroke),
        Command::Split {
            input,
            ids,
            seed,
            out,
        } => split(input.as_deref(), ids.as_deref(), seed, out.as_deref()),
        Command::Encode { input, out, cfg } => encode(&input, &out, &cfg),
        Command::Decode {
            heatmap,
            offsets,
            out,
            cfg,
        } => decode(&heatmap, offsets.as_deref(), out.as_deref(), &cfg),
        Command::Match {
            data,
            scorer,
            model,
            split,
            out,
            cfg,
        } => match_scenes(
            &data,
            scorer,
            model.as_deref(),
            split.as_deref(),
            &out,
            &cfg,
        ),
        Command::Build { decisions, out } => build(&decisions, &out),
        Command::Eval {
            pred,
            gt,
            meters,
            csv,
            cfg,
        } => eval(&pred, &gt, meters, csv, &cfg),
        Command::Synth {
            out,
            scenes,
            seed,
            cfg,
        } => synth(&out, scenes, seed, &cfg),
        Command::TrainScorer {
            data,
            scenes,
            out,
            log,
            cfg,
        } => train_scorer(data.as_deref(), scenes, &out, log.as_deref(), &cfg),
        Command::AblateK {
            k,
            scorer,
            data,
            scenes,
            csv,
            cfg,
        } => ablate(&k, scorer, data.as_deref(), scenes, csv.as_deref(), &cfg),
        Command::E2eOracle {
            seed,
            scenes,
            scorer,
            model,
            out,
            cfg,
        } => e2e(seed, scenes, scorer, model.as_deref(), out.as_deref(), &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
