//! `parampriv`: train, evaluate and verify parameter-privacy data-sharing
//! policies on the mixed-autonomy platoon.
//!
//! Exit codes: 0 on success, 2 when a config, flag or checkpoint fails
//! validation, 3 when an oracle suite or gradient check fails, 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use parampriv::experiment::{
    evaluate, write_curve_csv, write_eval_outputs, Checkpoint, ExperimentConfig, PolicyChoice,
};
use parampriv::policy::SharingPolicy;
use parampriv::train::{gradient_check, train};
use parampriv::verify::{run_suite, Suite};
use parampriv::Error;

#[derive(Parser)]
#[command(name = "parampriv", version, about = "Parameter-privacy data sharing for vehicle platoons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for every output file.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sharing policy and write a checkpoint plus training curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Provider particles during training.
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Evaluate a trained policy or the true-data baseline against the
    /// Bayesian adversary.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "trained")]
        policy: PolicyArg,
        /// Checkpoint from `train`; required for the trained policy. Its
        /// config is used when `--config` is absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episodes per θ value.
        #[arg(long)]
        episodes: Option<usize>,
        /// Adversary particles.
        #[arg(long)]
        particles: Option<usize>,
        /// Worker threads; 0 uses every core.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run oracle suites that certify the closed-form bounds and the filter.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Suite name, or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Monte-Carlo samples per case, overriding the suite default.
        #[arg(long)]
        samples: Option<usize>,
        /// Fraction of each suite's default case count to run.
        #[arg(long, default_value_t = 1.0)]
        cases: f64,
    },
    /// Compare analytic and finite-difference gradients of the actor,
    /// critic and encoder on random batches.
    CheckGradients {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Trained,
    TrueData,
}

enum Failure {
    Core(Error),
    Oracle(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common, fallback: Option<&ExperimentConfig>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn prepare_out_dir(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)
}

fn cmd_train(common: Common, episodes: Option<usize>, particles: Option<usize>) -> CmdResult {
    let mut cfg = load_config(&common, None)?;
    if let Some(e) = episodes {
        cfg.trainer.episodes = e;
    }
    if let Some(n) = particles {
        cfg.trainer.filter.n_particles = n;
    }
    cfg.validate()?;
    prepare_out_dir(&common.out_dir)?;
    let hash = cfg.hash();
    eprintln!("training {} episodes, seed {}, config {}", cfg.trainer.episodes, cfg.seed, &hash[..12]);
    let outcome = train(&cfg.env, &cfg.cost, &cfg.trainer, cfg.init_networks(), cfg.seed, |row| {
        if row.episode % 10 == 0 || row.episode + 1 == cfg.trainer.episodes {
            eprintln!(
                "episode {:>5}  θ{}  lagrangian {:>9.3}  mi {:>7.4}  distortion {:>8.2}  fuel {:.4}",
                row.episode,
                row.theta_index + 1,
                row.lagrangian,
                row.mi_bound_sum,
                row.distortion,
                row.fuel
            );
        }
    })?;
    fs::write(common.out_dir.join("config.toml"), cfg.to_toml_string()?)?;
    write_curve_csv(&common.out_dir.join("curve.csv"), &outcome.curve, &hash)?;
    Checkpoint::new(cfg, outcome.networks).save(&common.out_dir.join("checkpoint.json"))?;
    println!("wrote {}", common.out_dir.display());
    Ok(())
}

fn cmd_eval(
    common: Common,
    policy: PolicyArg,
    checkpoint: Option<PathBuf>,
    episodes: Option<usize>,
    particles: Option<usize>,
    workers: Option<usize>,
) -> CmdResult {
    let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = load_config(&common, ck.as_ref().map(|c| &c.config))?;
    if let Some(e) = episodes {
        cfg.eval.episodes_per_theta = e;
    }
    if let Some(n) = particles {
        cfg.eval.adversary_particles = n;
    }
    if let Some(w) = workers {
        cfg.eval.workers = w;
    }
    cfg.validate()?;
    let (choice, outcome) = match policy {
        PolicyArg::Trained => {
            let ck = ck.ok_or_else(|| Error::config("checkpoint", "--checkpoint is required for the trained policy"))?;
            ck.check_compatible(&cfg)?;
            let p = SharingPolicy::Trained(&ck.networks);
            (PolicyChoice::Trained, evaluate(&cfg, &p, PolicyChoice::Trained)?)
        }
        PolicyArg::TrueData => {
            let p = SharingPolicy::TrueData {
                sigma_min: cfg.trainer.sigma_min,
            };
            (PolicyChoice::TrueData, evaluate(&cfg, &p, PolicyChoice::TrueData)?)
        }
    };
    prepare_out_dir(&common.out_dir)?;
    write_eval_outputs(&common.out_dir, &outcome, cfg.env.theta_support.len())?;
    println!("{} policy, {} episodes per θ", choice.label(), cfg.eval.episodes_per_theta);
    println!("θ   fuel (mL/s)       distortion        final P(θ*)   rmse v   rmse s");
    for s in &outcome.summary.per_theta {
        println!(
            "θ{}  {:.4} ± {:.4}   {:>7.2} ± {:<6.2}  {:.3}         {:.3}    {:.3}",
            s.theta_index + 1,
            s.fuel_mean,
            s.fuel_ci95,
            s.distortion_mean,
            s.distortion_ci95,
            s.final_posterior_mean,
            s.usability_rmse[0],
            s.usability_rmse[1]
        );
    }
    Ok(())
}

fn cmd_verify(seed: u64, out_dir: PathBuf, suite: String, samples: Option<usize>, cases: f64) -> CmdResult {
    if !(cases > 0.0 && cases <= 1.0) {
        return Err(Error::config("cases", "fraction must lie in (0, 1]").into());
    }
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    prepare_out_dir(&out_dir)?;
    let mut failed = Vec::new();
    for s in suites {
        let report = run_suite(s, samples, cases, seed)?;
        let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        fs::write(out_dir.join(format!("verify_{}.json", s.name())), &json)?;
        println!(
            "{:<20} {}  cases {:>5}  violations {:>3}  worst margin {:.3e}  {:.1}s",
            s.name(),
            if report.passed { "PASS" } else { "FAIL" },
            report.cases,
            report.violations,
            report.worst_margin,
            report.elapsed_secs
        );
        for c in &report.summary {
            println!("    {:<40} {:.4e} <= {:.4e}  {}", c.name, c.value, c.limit, if c.passed { "ok" } else { "FAIL" });
        }
        if !report.passed {
            failed.push(s.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Oracle(format!("suites failed: {}", failed.join(", "))))
    }
}

fn cmd_check_gradients(common: Common, batches: usize, batch_size: usize) -> CmdResult {
    let cfg = load_config(&common, None)?;
    cfg.validate()?;
    if batches == 0 || batch_size == 0 {
        return Err(Error::config("batches", "need at least one non-empty batch").into());
    }
    let reports = gradient_check(&cfg.env, &cfg.trainer, batches, batch_size, cfg.seed)?;
    let mut ok = true;
    for (b, r) in reports.iter().enumerate() {
        let pass = r.pass_fraction() >= 0.99;
        ok &= pass;
        println!(
            "batch {b:>2}: {} of {} parameters agree ({:.2}%)  {}",
            r.checked() - r.failed(),
            r.checked(),
            100.0 * r.pass_fraction(),
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Oracle("gradient check failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            common,
            episodes,
            particles,
        } => cmd_train(common, episodes, particles),
        Command::Eval {
            common,
            policy,
            checkpoint,
            episodes,
            particles,
            workers,
        } => cmd_eval(common, policy, checkpoint, episodes, particles, workers),
        Command::Verify {
            seed,
            out_dir,
            suite,
            samples,
            cases,
        } => cmd_verify(seed, out_dir, suite, samples, cases),
        Command::CheckGradients {
            common,
            batches,
            batch_size,
        } => cmd_check_gradients(common, batches, batch_size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Oracle(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::ConfigParse(_) | Error::Checkpoint(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
