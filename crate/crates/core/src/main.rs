use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use uedpo_lab::harness::{
    self, checkpoint, dump_token_heatmap, emit_report, load_checkpoint, read_report,
    save_checkpoint, RunConfig, RunReport,
};
use uedpo_lab::synth_world::{read_jsonl, write_jsonl};
use uedpo_lab::theory_lab::verification_sweep;

#[derive(Parser)]
#[command(
    name = "uedpo-lab",
    version,
    about = "Desk-scale uncertainty-aware exploratory DPO lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default run configuration as JSON.
    DefaultConfig,
    /// Generate a preference dataset for the configured world.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy and write report.json, steps.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: UEDPO_THREADS, else all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check the closed-form optimum on seeded problem families.
    Theory {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export per-token sensitivity, uncertainty, masks and factors of a pair.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config supplying seed, noise and exploration settings.
        #[arg(long)]
        config: PathBuf,
        /// Dataset holding the pair.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pair_id: u64,
        /// Training step keying the corruption noise.
        #[arg(long, default_value_t = 0)]
        step: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print metric deltas (B minus A) between two runs.
    Compare {
        /// Run directory; give exactly two, as `--run A --run B`.
        #[arg(long = "run", required = true, action = clap::ArgAction::Append)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::DefaultConfig => println!("{}", RunConfig::default().to_json()),
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let pairs = harness::generate_data(&cfg)?;
            write_jsonl(&out, &pairs)?;
            println!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            threads,
        } => train(&config, &data, &out, threads)?,
        Command::Theory { out, seed } => theory(&out, seed)?,
        Command::Heatmap {
            checkpoint,
            config,
            data,
            pair_id,
            step,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let theta = load_checkpoint(&checkpoint)?;
            let pairs = read_jsonl(&data)?;
            let Some(pair) = pairs.iter().find(|p| p.pair_id == pair_id) else {
                bail!("pair {pair_id} not found in {}", data.display());
            };
            dump_token_heatmap(&theta, pair, &cfg, step, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Compare { runs } => {
            if runs.len() != 2 {
                bail!(
                    "compare needs exactly two --run directories, got {}",
                    runs.len()
                );
            }
            let a =
                read_report(&runs[0]).with_context(|| format!("reading {}", runs[0].display()))?;
            let b =
                read_report(&runs[1]).with_context(|| format!("reading {}", runs[1].display()))?;
            print!("{}", compare(&a, &b));
        }
    }
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, threads: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let pairs = read_jsonl(data)?;
    let prepared = harness::prepare(&cfg)?;
    let threads = threads.unwrap_or_else(harness::worker_threads);
    let outcome = harness::train_prepared(&cfg, &prepared, &pairs, threads)?;
    emit_report(&outcome.report, out)?;
    save_checkpoint(&outcome.theta, &out.join("theta.ckpt"))?;
    save_checkpoint(&prepared.reference, &out.join("reference.ckpt"))?;
    let s = &outcome.report.summary;
    println!(
        "{}: {} steps, hallucination {:.4} (reference {:.4}), under-represented accuracy {:.4} (reference {:.4})",
        cfg.method.name(),
        s.steps,
        s.hallucination_rate,
        outcome.report.reference.eval.hallucination_rate,
        s.underrep_accuracy,
        outcome.report.reference.eval.underrep_accuracy
    );
    println!(
        "wrote {} (checkpoint format v{})",
        out.display(),
        checkpoint::FORMAT_VERSION
    );
    Ok(())
}

fn theory(out: &Path, seed: u64) -> Result<()> {
    let rows = verification_sweep(seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut csv = String::from("check,instances,worst,mean,threshold,passed\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{:e},{:e},{:e},{}",
            r.check, r.instances, r.worst, r.mean, r.threshold, r.passed
        )?;
    }
    let path = out.join("theory_sweep.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{:<34} {:>9} {:>12} {:>10}  result",
        "check", "instances", "worst", "threshold"
    );
    for r in &rows {
        println!(
            "{:<34} {:>9} {:>12.3e} {:>10.1e}  {}",
            r.check,
            r.instances,
            r.worst,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    println!("wrote {}", path.display());
    if rows.iter().any(|r| !r.passed) {
        bail!("theory sweep has failing checks");
    }
    Ok(())
}

fn compare(a: &RunReport, b: &RunReport) -> String {
    let mut out = String::new();
    let (sa, sb) = (&a.summary, &b.summary);
    let _ = writeln!(
        out,
        "A = {} (seed {}), B = {} (seed {})",
        a.config.method.name(),
        a.config.seed,
        b.config.method.name(),
        b.config.seed
    );
    let _ = writeln!(
        out,
        "{:<22} {:>10} {:>10} {:>10}",
        "metric", "A", "B", "B - A"
    );
    for (name, x, y) in [
        (
            "hallucination_rate",
            sa.hallucination_rate,
            sb.hallucination_rate,
        ),
        (
            "underrep_accuracy",
            sa.underrep_accuracy,
            sb.underrep_accuracy,
        ),
        ("regular_accuracy", sa.regular_accuracy, sb.regular_accuracy),
        ("final_loss", sa.final_loss, sb.final_loss),
    ] {
        let _ = writeln!(out, "{name:<22} {x:>10.4} {y:>10.4} {:>+10.4}", y - x);
    }
    for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
        let _ = writeln!(
            out,
            "epoch {:<16} {:>10.4} {:>10.4} {:>+10.4}",
            format!("{} halluc.", ea.epoch),
            ea.eval.hallucination_rate,
            eb.eval.hallucination_rate,
            eb.eval.hallucination_rate - ea.eval.hallucination_rate
        );
    }
    out
}
