use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nnmpc_cli::commands::{
    cmd_build_osd, cmd_evaluate, cmd_simulate, cmd_train, cmd_verify, Ctx,
};
use nnmpc_cli::{exit_code, CliResult};
use nnmpc_core::config::GridCell;

/// Closed-loop dataset pipeline: simulate a controller cohort, distill the
/// logs into minimum-separation datasets, verify them, and train/evaluate
/// compact surrogates.
#[derive(Parser)]
#[command(name = "nnmpc", version, arg_required_else_help = true)]
struct Cli {
    /// Pipeline configuration file (single source of truth for seeds,
    /// grids, and artifact paths).
    #[arg(long, global = true, default_value = "nnmpc.toml")]
    config: PathBuf,

    /// Replace every stage seed in the config for this run (campaign
    /// master seed, index level seed, training seed).
    #[arg(long, global = true, value_name = "u64")]
    seed_override: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the closed-loop campaign and write the raw state/action dataset.
    Simulate {
        /// Raw dataset destination (default: paths.raw_dataset).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Distill the raw dataset into one file per (J*, S_u) grid cell.
    BuildOsd {
        /// Raw dataset to read (default: paths.raw_dataset).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory for the distilled files (default: paths.osd_dir).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Build only this cell, given as "J*,S_u"; repeatable.
        #[arg(long = "grid-cell", value_parser = parse_cell)]
        grid_cell: Vec<GridCell>,
    },
    /// Check the separation and coverage conditions of built cells.
    Verify {
        /// Raw dataset to check coverage against (default: paths.raw_dataset).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Verify only this cell, given as "J*,S_u"; repeatable.
        #[arg(long = "grid-cell", value_parser = parse_cell)]
        grid_cell: Vec<GridCell>,
        /// Use exhaustive scans for both conditions instead of the
        /// sorted-axis index (slow: quadratic in the dataset sizes).
        #[arg(long)]
        verify_exact: bool,
    },
    /// Train one surrogate per configured dataset under a common step budget.
    Train {
        /// Raw dataset for the baseline net (default: paths.raw_dataset).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory for weight files (default: paths.weights_dir).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Train only this cell, given as "J*,S_u"; repeatable. Skips the
        /// raw baseline.
        #[arg(long = "grid-cell", value_parser = parse_cell)]
        grid_cell: Vec<GridCell>,
    },
    /// Score trained surrogates on the held-out test set and account for
    /// the deployment footprint.
    Evaluate {
        /// Raw dataset, read only when the test cell is not part of the
        /// build grid (default: paths.raw_dataset).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory for the report files (default: paths.reports_dir).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Evaluate only this cell's net, given as "J*,S_u"; repeatable.
        /// Skips the raw baseline.
        #[arg(long = "grid-cell", value_parser = parse_cell)]
        grid_cell: Vec<GridCell>,
    },
}

fn parse_cell(s: &str) -> Result<GridCell, String> {
    let (j, su) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"J*,S_u\", got {s:?}"))?;
    let j_star: f64 = j.trim().parse().map_err(|e| format!("J* {:?}: {e}", j.trim()))?;
    let s_u: f64 = su.trim().parse().map_err(|e| format!("S_u {:?}: {e}", su.trim()))?;
    let cell = GridCell::new(j_star, s_u);
    cell.validate().map_err(|e| e.to_string())?;
    Ok(cell)
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx::load(&cli.config, cli.seed_override)?;
    ctx.config.validate().map_err(nnmpc_cli::CliError::Core)?;
    match cli.cmd {
        Cmd::Simulate { output } => cmd_simulate(&ctx, output),
        Cmd::BuildOsd {
            input,
            output,
            grid_cell,
        } => cmd_build_osd(&ctx, input, output, &grid_cell),
        Cmd::Verify {
            input,
            grid_cell,
            verify_exact,
        } => cmd_verify(&ctx, input, &grid_cell, verify_exact),
        Cmd::Train {
            input,
            output,
            grid_cell,
        } => cmd_train(&ctx, input, output, &grid_cell),
        Cmd::Evaluate {
            input,
            output,
            grid_cell,
        } => cmd_evaluate(&ctx, input, output, &grid_cell),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
