use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use groundloc_core::learn::{grad_check, grad_check_instance, DeskGeometry};
use groundloc_core::planner::PlannerConfig;
use groundloc_core::world::{ScenarioConfig, SensorModel};
use groundloc_harness::experiments::{
    bench_matcher, gen_corpus, identity_localizer, learned_localizer, run_jitter_sweep, run_localizer_eval,
    summary_path, train_nets, write_csv, write_loc_eval, Axis, FrameOffsets, LocEvalConfig,
};
use groundloc_harness::formats::{bundle_to_nets, nets_to_bundle, read_corpus, read_weights, write_scenario, write_weights};
use groundloc_harness::metrics::JitterSpec;

#[derive(Parser)]
#[command(name = "groundloc", version, about = "Ground-intensity LiDAR localization experiments")]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded scenario corpus.
    GenWorld {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Localize jittered frames and report recall.
    EvalLoc(EvalLocArgs),
    /// Side-tune embeddings and write an LPW1 checkpoint.
    Train {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Planning metrics under translational or rotational pose noise.
    JitterSweep {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        axis: Axis,
        /// Metres for trans, degrees for rot.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time embedding plus matching on the FFT and direct paths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "big,tiny")]
        configs: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "240,480")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    GradCheck,
}

impl Command {
    fn out_file(&self) -> Option<&Path> {
        match self {
            Command::EvalLoc(a) => Some(&a.out),
            Command::Train { out, .. } | Command::JitterSweep { out, .. } | Command::Bench { out, .. } => Some(out),
            Command::GenWorld { .. } | Command::GradCheck => None,
        }
    }
}

#[derive(Args)]
struct EvalLocArgs {
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long, conflicts_with = "identity", required_unless_present = "identity")]
    weights: Option<PathBuf>,
    #[arg(long)]
    identity: bool,
    /// Metres.
    #[arg(long, default_value_t = 0.5)]
    trans_noise: f64,
    /// Degrees.
    #[arg(long, default_value_t = 1.5)]
    rot_noise: f64,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Render sweeps without dropout or intensity noise.
    #[arg(long)]
    noise_free: bool,
    #[arg(long)]
    out: PathBuf,
}

fn eval_loc(a: EvalLocArgs, seed: u64) -> anyhow::Result<()> {
    let corpus = read_corpus(&a.scenarios)?;
    let (localizer, mut sensor) = match &a.weights {
        Some(path) => {
            let geometry = DeskGeometry::default();
            let nets = bundle_to_nets(&read_weights(path)?, &geometry)
                .map_err(|m| anyhow::anyhow!("{}: {m}", path.display()))?;
            (learned_localizer(nets)?, geometry.sensor())
        }
        None => (
            identity_localizer(),
            SensorModel {
                dropout_prob: 0.5,
                intensity_noise_sigma: 0.1,
                ..SensorModel::default()
            },
        ),
    };
    if a.noise_free {
        sensor.dropout_prob = 0.0;
        sensor.intensity_noise_sigma = 0.0;
    }
    let cfg = LocEvalConfig {
        frames_per_scenario: a.frames,
        sensor,
        offsets: FrameOffsets::Jitter(JitterSpec::new(a.trans_noise, a.rot_noise.to_radians(), seed)?),
    };
    let eval = run_localizer_eval(&corpus, &localizer, &cfg)?;
    write_loc_eval(&a.out, &eval)?;
    println!(
        "r@1 {:.4} r@2 {:.4} over {} frames; summary in {}",
        eval.report.r1,
        eval.report.r2,
        eval.report.n_frames,
        summary_path(&a.out).display()
    );
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).with_context(|| format!("{}", p.display()))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    if let Some(out) = cli.command.out_file() {
        ensure_parent(out)?;
    }
    match cli.command {
        Command::GenWorld { out, count } => {
            fs::create_dir_all(&out).with_context(|| format!("{}", out.display()))?;
            let corpus = gen_corpus(seed, count, &ScenarioConfig::default())?;
            for (i, sc) in corpus.iter().enumerate() {
                write_scenario(&out, i, sc)?;
            }
            println!("wrote {count} scenarios to {}", out.display());
        }
        Command::EvalLoc(a) => eval_loc(a, seed)?,
        Command::Train {
            scenarios,
            steps,
            lr,
            out,
        } => {
            let corpus = read_corpus(&scenarios)?;
            let outcome = train_nets(&corpus, steps, lr, seed)?;
            write_weights(&out, &nets_to_bundle(&outcome.nets))?;
            let curve = out.with_extension("curve.csv");
            write_csv(&curve, &outcome.curve)?;
            if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
                println!("loss {:.4} -> {:.4}; checkpoint {}", first.loss, last.loss, out.display());
            }
        }
        Command::JitterSweep {
            scenarios,
            axis,
            levels,
            out,
        } => {
            let corpus = read_corpus(&scenarios)?;
            let rows = run_jitter_sweep(&corpus, axis, &levels, seed, &PlannerConfig::default())?;
            write_csv(&out, &rows)?;
            for r in &rows {
                println!("{:?} {} collision {:.1}%", r.axis, r.level, r.collision_rate);
            }
        }
        Command::Bench {
            configs,
            sizes,
            reps,
            out,
        } => {
            let rows = bench_matcher(&configs, &sizes, reps, seed)?;
            write_csv(&out, &rows)?;
            for r in &rows {
                println!("{} {:?} {} median {:.2} ms", r.config, r.path, r.size, r.median_ms);
            }
        }
        Command::GradCheck => {
            let (pipeline, sample) = grad_check_instance(seed)?;
            let rep = grad_check(&pipeline, &sample, 1e-3, 1e-6)?;
            println!(
                "{} params, max relative error {:.3e}, max absolute error {:.3e}",
                rep.n_params, rep.max_rel_err, rep.max_abs_err
            );
            if rep.max_rel_err > 1e-3 {
                bail!("gradient check failed: relative error {:.3e} > 1e-3", rep.max_rel_err);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
