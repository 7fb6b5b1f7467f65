use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use tnnpde::config::{parse_archs, Config, Overrides};
use tnnpde::experiments::{
    aggregate, emit_csv, emit_series_csv, emit_summary_csv, enumerate_dnn_matches, experiment_bond_sweep,
    experiment_match_dnn, experiment_width_sweep, run_plan, write_comparisons, RunResult, Summary,
};
use tnnpde::nn::{ArchKind, ArchitectureSpec};
use tnnpde::problems::{accuracy_loss_level, THRESHOLD_BATCHES};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Deep-BSDE experiments with dense and tensor-network layers.
#[derive(Parser)]
#[command(name = "tnnpde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        self.overrides.apply(&mut c);
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every architecture in `network.archs` for every seed.
    Train(Common),
    /// TNN(sweep.width, chi) for each chi in sweep.chis, against same-size DNNs.
    SweepBond(Common),
    /// TNN(x, sweep.chi) for each x in sweep.widths, against same-size DNNs.
    SweepWidth(Common),
    /// Find the smallest network in match.ladder that keeps up with match.tnn.
    MatchDnn(Common),
    /// List the two-layer DNNs with a given parameter count.
    Enumerate {
        /// Target parameter count.
        #[arg(long, conflicts_with = "arch")]
        params: Option<usize>,
        /// Use the parameter count of this architecture instead.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, default_value_t = 11)]
        input_dim: usize,
    },
    /// Print the reference value u(0, x0) and the convergence threshold.
    Reference(Common),
}

fn write_outputs(config: &Config, runs: &[RunResult], summaries: &[Summary], alpha: f64) -> Result<()> {
    emit_csv(runs, &config.output)?;
    eprintln!("wrote {}", config.output.display());
    if let Some(p) = &config.summary {
        emit_summary_csv(summaries, p)?;
        eprintln!("wrote {}", p.display());
    }
    if let Some(p) = &config.full_series {
        emit_series_csv(runs, alpha, p)?;
        eprintln!("wrote {}", p.display());
    }
    for r in runs.iter().filter(|r| r.error.is_some()) {
        eprintln!("{}: {}", r.run_id(), r.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

fn print_summaries(summaries: &[Summary]) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    let threshold = summaries.first().map_or(f64::NAN, |s| s.threshold);
    println!("convergence threshold h = {threshold:.6}");
    for s in summaries {
        println!(
            "{:<12} params {:>6}  converged {:>2}/{:<2}  epoch median {:>7} mean {:>7} sd {:>7}  rel err median {}  reached {:.0}%",
            s.arch,
            s.param_count,
            s.converged,
            s.runs,
            fmt(s.epoch_median),
            fmt(s.epoch_mean),
            fmt(s.epoch_std),
            s.rel_error_median.map_or("-".into(), |v| format!("{v:.4}")),
            100.0 * s.reached_fraction,
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let config = common.load()?;
            let plan = config.plan()?;
            let convergence = plan.resolved_convergence()?;
            let plan = tnnpde::experiments::ExperimentPlan {
                auto_threshold: false,
                convergence,
                ..plan
            };
            let runs = run_plan(&plan)?;
            let summaries = aggregate(&runs, &convergence);
            print_summaries(&summaries);
            write_outputs(&config, &runs, &summaries, convergence.alpha)
        }
        Command::SweepBond(common) => {
            let config = common.load()?;
            let out = experiment_bond_sweep(&config.plan()?, config.sweep.width, &config.sweep.chis)?;
            print_summaries(&out.summaries);
            write_comparisons(&mut std::io::stdout(), &out.comparisons)?;
            write_outputs(&config, &out.runs, &out.summaries, out.convergence.alpha)
        }
        Command::SweepWidth(common) => {
            let config = common.load()?;
            let out = experiment_width_sweep(&config.plan()?, &config.sweep.widths, config.sweep.chi)?;
            print_summaries(&out.summaries);
            write_comparisons(&mut std::io::stdout(), &out.comparisons)?;
            write_outputs(&config, &out.runs, &out.summaries, out.convergence.alpha)
        }
        Command::MatchDnn(common) => {
            let config = common.load()?;
            let tnn: ArchKind = config.match_dnn.tnn.parse()?;
            let ladder = parse_archs(&config.match_dnn.ladder)?;
            let out = experiment_match_dnn(&config.plan()?, tnn, &ladder, config.match_tolerance())?;
            print_summaries(&out.summaries);
            match out.matched {
                Some((a, n)) => println!("smallest match for {tnn}: {a} with {n} parameters"),
                None => println!("no network in the ladder matches {tnn}"),
            }
            write_outputs(&config, &out.runs, &out.summaries, out.convergence.alpha)
        }
        Command::Enumerate {
            params,
            arch,
            input_dim,
        } => {
            let target = match (params, arch) {
                (Some(p), _) => p,
                (None, Some(a)) => ArchitectureSpec::new(a.parse()?, input_dim).param_count()?,
                (None, None) => anyhow::bail!("give --params or --arch"),
            };
            let mut out = std::io::stdout().lock();
            writeln!(out, "x,y,param_count")?;
            for (x, y) in enumerate_dnn_matches(target, input_dim) {
                writeln!(out, "{x},{y},{target}")?;
            }
            Ok(())
        }
        Command::Reference(common) => {
            let config = common.load()?;
            let id = config.problem_id()?;
            let r = id.reference_y0()?;
            println!("problem {}", id.name());
            println!("u(0, x0) = {:.6}  (standard error {:.2e})", r.value, r.std_error);
            let plan = config.plan()?;
            let h = accuracy_loss_level(
                &id,
                plan.train.loss,
                plan.accuracy,
                plan.train.batch_size,
                THRESHOLD_BATCHES,
            )?;
            println!(
                "loss level at {:.1}% accuracy (threshold h) = {h:.6}",
                100.0 * plan.accuracy
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()).context("tnnpde") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
