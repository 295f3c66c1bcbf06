mod commands;
mod dump;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mlc_core::NmsMode;

#[derive(Parser)]
#[command(name = "mlc", version, about = "Mutual labeling and IoU rescoring on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and write them as JSON lines.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Number of scenes; defaults to the split size in the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the detection head and dump validation predictions.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a detection dump against ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        /// Take NMS and evaluation settings from this config's `train` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        nms_mode: Option<NmsMode>,
        #[arg(long)]
        iou_threshold: Option<f64>,
        #[arg(long)]
        max_out: Option<usize>,
        /// Evaluate the dump as given, without NMS.
        #[arg(long, conflicts_with_all = ["nms_mode", "iou_threshold", "max_out"])]
        no_nms: bool,
    },
    /// Rank correlation between confidence and IoU of a detection dump.
    Divergence {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        /// Confidence is the ranking key of this mode.
        #[arg(long, value_parser = parse_mode, default_value = "standard")]
        nms_mode: NmsMode,
    },
    /// Run the ablation grid and write the report.
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<NmsMode, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed, split, count } => {
            commands::simulate(config.as_deref(), &out, seed, split, count)
        }
        Command::Train { config, out, seed } => commands::train(config.as_deref(), &out, seed),
        Command::Eval { dets, gts, config, nms_mode, iou_threshold, max_out, no_nms } => {
            let nms = commands::NmsOverrides { mode: nms_mode, iou_threshold, max_out, disabled: no_nms };
            commands::eval(&dets, &gts, config.as_deref(), nms)
        }
        Command::Divergence { dets, gts, nms_mode } => commands::divergence(&dets, &gts, nms_mode),
        Command::Benchmark { config, out } => commands::benchmark(config.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mlc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
