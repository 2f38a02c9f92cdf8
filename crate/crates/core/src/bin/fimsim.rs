use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fim_core::bench::{self, Command, Overrides, Preset};
use fim_core::mc::with_threads;
use fim_core::FimError;

#[derive(Parser)]
#[command(name = "fimsim", version, about = "FIM received-power and channel-estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Interference fringe slices of the single-element objective.
    Fringe(Common),
    /// Received power of the three modes against the number of paths.
    Power(Common),
    /// Monte Carlo check of the PBF-only and upper-bound expectations.
    Bounds(Common),
    /// One estimation trial with full recovery results (JSON).
    Estimate(Common),
    /// NMSE sweep over Q or SNR.
    Nmse(Common),
    /// Recovery wall time against the virtual array size.
    Runtime(Common),
}

#[derive(Args)]
struct Common {
    /// JSON file mirroring the experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: fig2, fig3, fig4a, fig4b, fig5, fig6 or fig7.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Root seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent. Timings go to `<out>.timing.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Trial count (overrides the config).
    #[arg(long)]
    trials: Option<usize>,
    /// Timed repetitions per runtime point (overrides the config).
    #[arg(long)]
    repetitions: Option<usize>,
    /// Overwrite outputs written by a different config.
    #[arg(long)]
    force: bool,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: FimError| e.to_string())
}

fn execute(command: Command, args: Common) -> Result<(), FimError> {
    let text = match &args.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| FimError::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let overrides = Overrides { seed: args.seed, trials: args.trials, repetitions: args.repetitions };
    let cfg = bench::resolve_config(command, args.preset, text.as_deref(), &overrides)?;
    let out = args.out.clone().or_else(|| cfg.output_path.as_ref().map(PathBuf::from));
    let hash = cfg.hash();
    if let Some(path) = &out {
        // fail before the (possibly long) run
        bench::check_overwrite(path, &hash, args.force)?;
    }
    let output = with_threads(args.threads, || bench::run(command, &cfg))?;
    let body = output.artifact.render();
    match &out {
        Some(path) => {
            bench::write_checked(path, &body, &hash, args.force)?;
            std::fs::write(bench::timing_path(path), output.timing.to_csv())?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Fringe(a) => (Command::Fringe, a),
        Cmd::Power(a) => (Command::Power, a),
        Cmd::Bounds(a) => (Command::Bounds, a),
        Cmd::Estimate(a) => (Command::Estimate, a),
        Cmd::Nmse(a) => (Command::Nmse, a),
        Cmd::Runtime(a) => (Command::Runtime, a),
    };
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fimsim: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
