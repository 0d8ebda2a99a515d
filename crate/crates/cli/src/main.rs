use std::path::PathBuf;
use std::process::ExitCode;

use andft_cli::commands;
use andft_cli::config::{RunConfig, TrainerKind};
use andft_cli::{thread_cap, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "andft", version, about = "Nuisance-disentangled feature training: baseline vs NDFT vs A-NDFT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `dataset_dir`.
    GenData { config: PathBuf },
    /// Train the configured trainer; writes metrics.csv, report.csv and checkpoint/.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the test split; prints the per-nuisance report as CSV.
    Eval { config: PathBuf, checkpoint: PathBuf },
    /// Train all three trainers from the same seed and compare them.
    Compare { config: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = RunConfig::load(&config)?;
            let s = commands::gen_data(&cfg)?;
            println!("wrote {} (M_train = {}, M_test = {})", cfg.dataset_dir.display(), s.m_train, s.m_test);
            for (name, m) in &s.train_marginals {
                let m: Vec<String> = m.iter().map(|p| format!("{p:.4}")).collect();
                println!("train marginal {name}: [{}]", m.join(", "));
            }
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let s = commands::train(&cfg)?;
            eprintln!(
                "{} finished {} iterations: {} nuisance steps, {} reinits, {} full passes, {} capped monitor loops",
                cfg.trainer.name(),
                s.iterations,
                s.counters.nuisance_sgd_steps,
                s.counters.reinit_count,
                s.counters.full_pass_count,
                s.counters.inner_cap_hits
            );
            println!(
                "test_accuracy={:.4} backbone_forwards={}",
                s.report.overall_accuracy, s.counters.backbone_forwards
            );
        }
        Command::Eval { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            print!("{}", commands::eval(&cfg, &checkpoint)?.to_csv());
        }
        Command::Compare { config } => {
            let cfg = RunConfig::load(&config)?;
            let s = commands::compare(&cfg)?;
            for kind in TrainerKind::ALL {
                if let Some(r) = s.run(kind) {
                    let acc = r.report.as_ref().map_or(f64::NAN, |rep| rep.overall_accuracy);
                    let secs = r.log.last().map_or(0.0, |m| m.elapsed_seconds);
                    let probe: Vec<String> = r.probe.iter().map(|p| format!("{p:.3}")).collect();
                    println!(
                        "{:<8} test_accuracy={:.4} backbone_forwards={} train_seconds={:.1} probe=[{}]",
                        kind.name(),
                        acc,
                        r.counters.backbone_forwards,
                        secs,
                        probe.join(", ")
                    );
                }
            }
            if let Some(ratio) = s.forwards_ratio() {
                println!("forwards_ratio_ndft_over_andft={ratio:.3}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    // ignore: the global pool may already be initialized in-process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(thread_cap()).build_global();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
