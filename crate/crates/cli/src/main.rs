use std::env;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gfom_cli::config::{ConfigDraft, ExperimentConfig};
use gfom_cli::experiment::{run_experiment, run_sweep, RunManifest};
use gfom_cli::verify::{all_passed, render, run_checks, CheckSizes};

#[derive(Parser)]
#[command(
    name = "gfom",
    version,
    about = "Couples matrix-driven iterations to Gaussian comparison processes \
             and measures the gap against its predicted bounds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write CSV/JSON artifacts
    Run(RunArgs),
    /// Run the experiment once per dimension, each into its own subdirectory
    Sweep(RunArgs),
    /// Run the reduced checker battery; exits nonzero on any failure
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Named preset supplying defaults (matched-amp-tanh, mismatch-sweep,
    /// linear-ar, tail-check, oracle-suite)
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Base seed for every generator stream (mandatory here or in the config)
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads, 0 = runtime default [env: GFOM_THREADS]
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Output directory [env: GFOM_OUT]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed for the battery
    #[arg(long, value_name = "U64", default_value_t = 0)]
    seed: u64,
    /// Worker threads, 0 = runtime default [env: GFOM_THREADS]
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Corrupt the auxiliary driver block of one run before checking the
    /// coupling identity; the battery must then report a failure
    #[arg(long)]
    fault_inject: bool,
}

fn env_setting(name: &str) -> Option<String> {
    env::var(name).ok().filter(|v| !v.trim().is_empty())
}

/// Layered resolution: built-in defaults < preset < config file < GFOM_*
/// environment (threads and out only) < explicit flags.
fn assemble_config(args: &RunArgs) -> Result<ExperimentConfig, String> {
    let mut draft = ConfigDraft::new();
    if let Some(preset) = &args.preset {
        draft.apply_preset(preset).map_err(|e| e.to_string())?;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        draft.apply_text(&text).map_err(|e| e.to_string())?;
    }
    if let Some(v) = env_setting("GFOM_THREADS") {
        draft.set("threads", v);
    }
    if let Some(v) = env_setting("GFOM_OUT") {
        draft.set("out", v);
    }
    if let Some(seed) = args.seed {
        draft.set("seed", seed.to_string());
    }
    if let Some(threads) = args.threads {
        draft.set("threads", threads.to_string());
    }
    if let Some(out) = &args.out {
        draft.set("out", out.display().to_string());
    }
    draft.finalize().map_err(|e| e.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4e}"))
}

fn print_manifest(manifest: &RunManifest) {
    if let Some(oracle) = &manifest.oracle {
        for check in &oracle.checks {
            println!(
                "{} {:<28} statistic {:>13.6e}  threshold {:>13.6e}",
                if check.passed { "PASS" } else { "FAIL" },
                check.name,
                check.statistic,
                check.threshold
            );
        }
        println!("{}/{} checks passed", oracle.passed, oracle.passed + oracle.failed);
    }
    for b in &manifest.blocks {
        println!(
            "block {:>2}  n={:<5} scale={:<6} trials={}  median ||X-Y||={}  median ||X||/sqrt(n)={}  psi1={:.3e} psi2={:.3e}  failed={}",
            b.block,
            b.n,
            b.sigma_scale,
            b.trials,
            opt(b.median_total_error),
            opt(b.median_x_norm_over_sqrt_n),
            b.psi1,
            b.psi2,
            b.failed
        );
    }
    println!(
        "wrote {} in {:.1}s",
        manifest.out_files.join(", "),
        manifest.wall_time_secs
    );
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode, String> {
    let config = assemble_config(args)?;
    let manifest = run_experiment(&config).map_err(|e| e.to_string())?;
    print_manifest(&manifest);
    if manifest.all_ok() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "{} trial(s) failed; see manifest.json",
            manifest.failures.len().max(1)
        );
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_sweep(args: &RunArgs) -> Result<ExitCode, String> {
    let config = assemble_config(args)?;
    let manifests = run_sweep(&config).map_err(|e| e.to_string())?;
    let mut ok = true;
    for manifest in &manifests {
        print_manifest(manifest);
        ok &= manifest.all_ok();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode, String> {
    let threads = match args.threads {
        Some(t) => t,
        None => match env_setting("GFOM_THREADS") {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("GFOM_THREADS: expected a nonnegative integer, got `{v}`"))?,
            None => 0,
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| format!("worker pool: {e}"))?;
    let results = pool.install(|| run_checks(args.seed, args.fault_inject, &CheckSizes::reduced()));
    print!("{}", render(&results));
    Ok(if all_passed(&results) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match run {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
