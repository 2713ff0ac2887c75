use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use probf::episodic::{train_episodic, write_logs};
use probf::experiments::{
    emit_report, emit_trajectories, evaluate, run_experiment, test_points, ExperimentConfig, NamedTrajectory,
};
use probf::gp::{Checkpoint, GPResidualModel};
use probf::system::SystemKind;
use probf::validation::{
    barrier_gradient_suite, chance_suite, delta_zero_suite, fit_monotone_suite, gp_posterior_suite, mll_suite,
    posterior_psd_suite, rk4_order, socp_grid_suite, socp_interval_suite, SuiteReport,
};
use probf::Error;

#[derive(Parser)]
#[command(name = "probf", version, about = "Probabilistic safety filters with GP residual barrier dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a residual model episodically and save a checkpoint.
    Train(Common),
    /// Roll out a trained model from fresh initial states at one confidence level.
    Test {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to test; defaults to <out>/checkpoint.json, training first if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Multi-seed comparison against the same model at delta = 0.
    Experiment(Common),
    /// Run the oracle suites and print pass counts.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Requested confidence level (posterior standard deviations).
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    system: Option<SystemKind>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::for_system(self.system.unwrap_or(SystemKind::Segway)),
        };
        if let Some(s) = self.system {
            if self.config.is_some() && s != cfg.system {
                return Err(Error::Config(format!(
                    "--system {s} conflicts with config system {}",
                    cfg.system
                )));
            }
            cfg.system = s;
        }
        if let Some(seed) = self.seed {
            cfg.base_seed = seed;
            cfg.seeds = None;
        }
        if let Some(d) = self.delta {
            cfg.delta_request = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        if self.out == Path::new("out") {
            cfg.output_dir.clone().unwrap_or_else(|| self.out.clone())
        } else {
            self.out.clone()
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<GPResidualModel, Error> {
    let setup = cfg.setup()?;
    let seed = cfg.run_seeds()[0];
    let outcome = train_episodic(&setup, &cfg.episode_config(&setup, seed)).map_err(|f| {
        for l in &f.logs {
            eprintln!("episode {}: n={} min_h={:.4}", l.episode, l.n_points, l.min_h);
        }
        f.source
    })?;
    create_dir(out)?;
    for l in &outcome.logs {
        println!(
            "episode {}: points {} mll {:.3} min_h {:.4}{}",
            l.episode,
            l.n_points,
            l.mll,
            l.min_h,
            if l.violated { " (violated)" } else { "" }
        );
    }
    write_logs(&outcome.logs, &out.join("episodes.jsonl"))?;
    Checkpoint::from_model(&outcome.model).save(&out.join("checkpoint.json"))?;
    let named: Vec<_> = outcome
        .trajectories
        .into_iter()
        .enumerate()
        .map(|(e, t)| NamedTrajectory::new(format!("train{e}"), t))
        .collect();
    emit_trajectories(&named, &setup.barrier.shape, out)?;
    println!("checkpoint written to {}", out.join("checkpoint.json").display());
    Ok(outcome.model)
}

fn test(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), Error> {
    let setup = cfg.setup()?;
    let default_cp = out.join("checkpoint.json");
    let gp = match checkpoint {
        Some(p) => Checkpoint::load(p)?.restore()?,
        None if default_cp.exists() => Checkpoint::load(&default_cp)?.restore()?,
        None => train(cfg, out)?,
    };
    let seed = cfg.run_seeds()[0];
    let mut points = vec![setup.region.center()];
    points.extend(test_points(&setup.region, seed, cfg.n_test_points));
    let (run, trajs) = evaluate(&setup, &gp, &points, cfg.delta_request, &cfg.backoff, cfg.violation_threshold)?;
    let tag = format!("delta{}", cfg.delta_request);
    let named: Vec<_> = trajs
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let name = if i == 0 { format!("{tag}_center") } else { format!("{tag}_test{}", i - 1) };
            NamedTrajectory::new(name, t)
        })
        .collect();
    let dir = out.join(&tag);
    emit_trajectories(&named, &setup.barrier.shape, &dir)?;
    std::fs::write(dir.join("tests.json"), serde_json::to_string_pretty(&run)?).map_err(|e| Error::Io {
        path: dir.join("tests.json"),
        source: e,
    })?;
    for (n, t) in named.iter().zip(&run.tests) {
        println!(
            "{}: min_h {:.4}{}",
            n.name,
            t.min_h,
            if t.violated { " (violation)" } else { "" }
        );
    }
    println!(
        "delta {}: {}/{} violations, {} with early warnings",
        cfg.delta_request,
        run.violations,
        run.tests.len(),
        run.early_warnings
    );
    Ok(())
}

fn experiment(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let result = run_experiment(cfg)?;
    let r = &result.report;
    emit_report(r, out)?;
    emit_trajectories(&result.trajectories, &cfg.setup()?.barrier.shape, out)?;
    println!(
        "{}: {} runs ({} excluded), violation % at delta {}: {:.1} ± {:.1}; at delta 0: {:.1} ± {:.1}",
        r.system,
        r.n_runs,
        r.excluded,
        r.delta_request,
        r.probf.mean_pct,
        r.probf.std_pct,
        r.mean.mean_pct,
        r.mean.std_pct
    );
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

fn validate(seed: u64) -> bool {
    let suites: Vec<SuiteReport> = vec![
        gp_posterior_suite(25, seed, 1e-8),
        mll_suite(25, seed + 1, 1e-9),
        socp_interval_suite(200, seed + 2, 1e-6),
        socp_grid_suite(200, seed + 3, 400),
        delta_zero_suite(100, seed + 4, 1e-8),
        chance_suite(20, seed + 5, 100_000),
        fit_monotone_suite(10, seed + 6),
        barrier_gradient_suite(100, seed + 7, 1e-6),
        posterior_psd_suite(100, seed + 8, 1e-9),
    ];
    for s in &suites {
        println!(
            "{:<46} {:>4}/{:<4} max error {:.2e} {}",
            s.name,
            s.passed,
            s.total,
            s.max_error,
            if s.all_passed() { "ok" } else { "FAILED" }
        );
        for n in &s.notes {
            println!("    {n}");
        }
    }
    let (errs, slope) = rk4_order(&[1e-2, 5e-3, 2.5e-3]);
    let rk4_ok = (slope - 4.0).abs() <= 0.3;
    println!("{:<46} slope {slope:.3} {}", "rk4 global error order", if rk4_ok { "ok" } else { "FAILED" });
    for (dt, e) in errs {
        println!("    dt {dt:.1e}: error {e:.2e}");
    }
    rk4_ok && suites.iter().all(SuiteReport::all_passed)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Contract(_) | Error::Probability(_) | Error::Dimension { .. } => 2,
        Error::Conditioning { .. } | Error::SolverStall { .. } | Error::Infeasible(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => c.config().and_then(|cfg| train(&cfg, &c.out_dir(&cfg)).map(|_| ())),
        Command::Test { common, checkpoint } => common
            .config()
            .and_then(|cfg| test(&cfg, &common.out_dir(&cfg), checkpoint.as_deref())),
        Command::Experiment(c) => c.config().and_then(|cfg| experiment(&cfg, &c.out_dir(&cfg))),
        Command::Validate { seed } => {
            return if validate(*seed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
