use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use harvest_cli::{cmd_check, cmd_profile, cmd_run, cmd_sweep, resolve_out_dir, CliError, TableFormat};

#[derive(Debug, Parser)]
#[command(
    name = "harvest",
    version,
    about = "Simulate side tasks served inside pipeline-training bubbles"
)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Profile bubbles and tasks of an experiment and print the result.
    Profile {
        /// Experiment JSON file or `preset:<name>`.
        config: String,
        /// Also write profile.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run baseline and treatment, writing traces, report and breakdown.
    Run {
        config: String,
        /// Output directory; defaults to $HARVEST_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = TableFormat::Csv)]
        format: TableFormat,
    },
    /// Run every point of the experiment's sweep grid.
    Sweep {
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Points simulated in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Replay a trace file and report invariant violations.
    Check { trace: PathBuf },
}

fn main() -> ExitCode {
    let args = Args::parse();
    match dispatch(args.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Violations(v) = &e {
                for violation in v.iter().skip(1).take(20) {
                    eprintln!("  {violation}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Profile { config, out } => {
            let doc = cmd_profile(&config, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&doc).expect("profile serializes"));
        }
        Cmd::Run {
            config,
            out,
            seed,
            format,
        } => {
            let dir = resolve_out_dir(out);
            let report = cmd_run(&config, &dir, seed, format)?;
            let m = &report.metrics;
            println!("out_dir={}", dir.display());
            println!(
                "t_no={} t_with={} time_increase={:.6}",
                m.t_no, m.t_with, m.time_increase
            );
            match &m.cost {
                Some(c) => println!("cost_savings={:.6}", c.savings),
                None => println!("cost_savings=<no reference throughput>"),
            }
            for t in &m.tasks {
                let worker = t.worker.map_or("-".to_string(), |w| w.to_string());
                println!(
                    "task {} worker={} work={} {:?}",
                    t.id, worker, t.work_done, t.disposition
                );
            }
        }
        Cmd::Sweep { config, out, jobs } => {
            let dir = resolve_out_dir(out);
            let summary = cmd_sweep(&config, &dir, jobs)?;
            println!("out_dir={}", dir.display());
            for r in &summary.rows {
                println!(
                    "{} bubble_rate={:.4} time_increase={:.6}",
                    r.label, r.bubble_rate, r.time_increase
                );
            }
            if let Some(trend) = summary.model_size_trend {
                println!("model_size_trend={trend}");
            }
        }
        Cmd::Check { trace } => {
            let n = cmd_check(&trace)?;
            println!("ok: {n} events replayed without violations");
        }
    }
    Ok(())
}
