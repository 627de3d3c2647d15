use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qubit_char::clifford::InterleavedGate;
use qubit_char::pipeline::{self, Overrides, PipelineError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "qchar", version, about = "Single-qubit characterization pipeline")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, default_value = "qchar.json")]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Caps the worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides shots per circuit for RB and GST.
    #[arg(long, global = true)]
    shots: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-loop pulse calibration and scan data.
    Calibrate,
    /// Standard randomized benchmarking.
    Rb,
    /// Interleaved randomized benchmarking of one gate.
    Irb {
        #[arg(long, value_parser = parse_gate)]
        gate: InterleavedGate,
    },
    /// Purity benchmarking with leakage extraction.
    Pb,
    /// Gate set tomography.
    Gst,
    /// Error budget from previous stage outputs.
    Budget,
    /// RB under an injected drift schedule and fluctuation contributions.
    Drift,
}

fn parse_gate(s: &str) -> Result<InterleavedGate, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = InterleavedGate::ALL.iter().map(|g| g.name()).collect();
        format!("unknown gate `{s}`, expected one of {}", names.join(", "))
    })
}

fn run(cli: &Cli) -> Result<String, PipelineError> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| PipelineError::Other(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    cfg.apply(&Overrides { seed: cli.seed, output_dir: cli.out.clone(), shots: cli.shots })?;
    let json = |v: serde_json::Result<String>| v.unwrap_or_default();
    Ok(match &cli.command {
        Command::Calibrate => {
            let s = pipeline::cmd_calibrate(&cfg)?;
            json(serde_json::to_string_pretty(&s.result.pulse))
        }
        Command::Rb => json(serde_json::to_string_pretty(&pipeline::cmd_rb(&cfg)?)),
        Command::Irb { gate } => json(serde_json::to_string_pretty(&pipeline::cmd_irb(&cfg, *gate)?)),
        Command::Pb => json(serde_json::to_string_pretty(&pipeline::cmd_pb(&cfg)?)),
        Command::Gst => {
            let s = pipeline::cmd_gst(&cfg)?;
            format!(
                "circuits {}  distance to source {:.3e}  N_sigma {:.2}  r_sim {:.3e} ± {:.1e}  converged {}",
                s.n_circuits, s.distance_to_source, s.n_sigma, s.r_sim.value, s.r_sim.err, s.converged
            )
        }
        Command::Budget => {
            let r = pipeline::cmd_budget(&cfg)?;
            let mut text = r.budget.to_table();
            for m in &r.missing_outputs {
                text.push_str(&format!("missing stage output: {m}\n"));
            }
            text
        }
        Command::Drift => json(serde_json::to_string_pretty(&pipeline::cmd_drift(&cfg)?)),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            println!("{}", text.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qchar: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
