//! Experiment configuration, checkpoints, evaluation and result export.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{attack_step, privacy_report};
use crate::belief::ParticleBelief;
use crate::cost::CostConfig;
use crate::error::{Error, Result};
use crate::platoon::{distortion, EnvConfig};
use crate::policy::{PolicyNetworks, SharingPolicy, ACTION_DIM};
use crate::rollout::{assimilate, derive_seed, domain, provider_act, state_prior};
use crate::train::{episode_start, CurveRow, TrainerConfig};

/// Version of every file layout written by this module.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_theta: usize,
    pub provider_particles: usize,
    pub adversary_particles: usize,
    /// Steps excluded from the usability error.
    pub burn_in: usize,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_theta: 100,
            provider_particles: 512,
            adversary_particles: 5184,
            burn_in: 5,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub cost: CostConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

fn scoped(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field, message } if !field.contains('.') => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        e => e,
    })
}

impl ExperimentConfig {
    /// Parses and validates a TOML document. The θ-support has no implicit
    /// value in a file and must be listed under `[env]`.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        let has_support = table
            .get("env")
            .and_then(|env| env.as_table())
            .is_some_and(|env| env.contains_key("theta_support"));
        if !has_support {
            return Err(Error::config(
                "env.theta_support",
                "missing; list the (θ₁, θ₂) support values",
            ));
        }
        let cfg: Self = toml::from_str(s).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        scoped("env", self.env.validate())?;
        scoped("cost", self.cost.validate())?;
        scoped("trainer", self.trainer.validate())?;
        if self.eval.provider_particles == 0 || self.eval.adversary_particles == 0 {
            return Err(Error::config("eval.adversary_particles", "particle counts must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the worker count.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.eval.workers = 0;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn init_networks(&self) -> PolicyNetworks {
        self.trainer.init_networks(&self.env, self.seed)
    }
}

/// Trained parameters with the configuration and seed that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub networks: PolicyNetworks,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, networks: PolicyNetworks) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            config,
            networks,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        if ck.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("unsupported schema version {}", ck.schema_version)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Checkpoint("config hash does not match the embedded config".into()));
        }
        if !ck.networks.is_finite() {
            return Err(Error::ModelCorrupt("checkpoint holds non-finite parameters".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks that the networks fit the environment of `cfg`.
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<()> {
        let nets = &self.networks;
        let k = cfg.env.theta_support.len();
        if nets.spec.n_thetas != k {
            return Err(Error::Checkpoint(format!(
                "networks expect {} θ values, config lists {k}",
                nets.spec.n_thetas
            )));
        }
        let e = nets.encoder.output_dim();
        let expected_actor = k + 2 + e;
        if nets.actor.input_dim() != expected_actor || nets.actor.output_dim() != ACTION_DIM {
            return Err(Error::Checkpoint("actor shape does not match".into()));
        }
        if nets.critic.input_dim() != expected_actor + ACTION_DIM || nets.critic.output_dim() != 1 {
            return Err(Error::Checkpoint("critic shape does not match".into()));
        }
        if nets.encoder.dim != 4 || nets.spec.joint_normalizer.dim() != 4 {
            return Err(Error::Checkpoint("encoder input must be (θ₁, θ₂, v, s)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Trained,
    TrueData,
}

impl PolicyChoice {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyChoice::Trained => "trained",
            PolicyChoice::TrueData => "true_data",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub episode: usize,
    pub theta_index: usize,
    pub theta: [f64; 2],
    pub policy: PolicyChoice,
    /// The provider's belief degenerated and the episode was cut short.
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t: usize,
    pub v_true: f64,
    pub s_true: f64,
    pub v_shared: f64,
    pub s_shared: f64,
    pub cav_accel: f64,
    pub hdv_accel: f64,
    pub hdv_model_accel: f64,
    pub fuel_rate: f64,
    /// Distortion of the released sample.
    pub distortion: f64,
    /// Expected distortion under the release distribution.
    pub expected_distortion: f64,
    pub mi_bound: f64,
    pub lagrangian: f64,
    pub posterior: Vec<f64>,
    pub detection: usize,
    pub correct: bool,
    pub v_est: f64,
    pub s_est: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub header: EpisodeHeader,
    pub rows: Vec<StepRow>,
}

/// Runs one evaluation episode: the provider acts on its own belief and a
/// separate adversary filter attacks the released data.
pub fn run_eval_episode(
    cfg: &ExperimentConfig,
    policy: &SharingPolicy<'_>,
    choice: PolicyChoice,
    theta_index: usize,
    episode: usize,
    config_hash: &str,
) -> Result<EpisodeRecord> {
    let env = &cfg.env;
    let seed = derive_seed(cfg.seed, domain::EVAL_EPISODE, ((theta_index as u64) << 32) | episode as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filter = &cfg.trainer.filter;
    let (mut belief, mut state) =
        episode_start(env, filter, cfg.eval.provider_particles, rng.random(), &mut rng)?;
    let prior = state_prior(env, filter.state_prior_std)?;
    let mut adversary = ParticleBelief::init(
        env.theta_vectors(),
        &env.prior(),
        &prior,
        cfg.eval.adversary_particles,
        rng.random(),
    )?;
    let mut header = EpisodeHeader {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        episode,
        theta_index,
        theta: env.theta_support[theta_index],
        policy: choice,
        aborted: false,
    };
    let mut rows = Vec::with_capacity(cfg.cost.horizon);
    for t in 0..cfg.cost.horizon {
        let cost_seed = rng.random();
        let act = provider_act(policy, &belief, &state, theta_index, env, &cfg.cost, cost_seed, &mut rng)?;
        let attack = attack_step(
            &adversary,
            act.y,
            act.log.exogenous,
            policy,
            &act.encoded,
            env,
            filter.resample_threshold,
        )?;
        rows.push(StepRow {
            t,
            v_true: act.x[0],
            s_true: act.x[1],
            v_shared: act.y[0],
            s_shared: act.y[1],
            cav_accel: act.log.cav_accel,
            hdv_accel: act.log.hdv_accel,
            hdv_model_accel: act.log.hdv_model_accel,
            fuel_rate: act.log.fuel_rate,
            distortion: distortion(act.x, act.y, env),
            expected_distortion: act.cost.distortion_term,
            mi_bound: act.mi.mi_upper_regime_adaptive,
            lagrangian: act.cost.lagrangian,
            correct: attack.detection == theta_index,
            detection: attack.detection,
            posterior: attack.posterior,
            v_est: attack.state_estimate[0],
            s_est: attack.state_estimate[1],
        });
        match assimilate(
            &belief,
            &act.outputs,
            act.y,
            act.log.exogenous,
            env,
            filter.resample_threshold,
        ) {
            Ok((b, _)) => belief = b,
            Err(Error::DegenerateUpdate { .. }) => {
                header.aborted = true;
                break;
            }
            Err(e) => return Err(e),
        }
        adversary = attack.belief;
        state = act.next_state;
    }
    Ok(EpisodeRecord { header, rows })
}

/// Per-episode aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub fuel_mean: f64,
    pub distortion_total: f64,
    pub realized_distortion_total: f64,
    pub mi_bound_total: f64,
    pub lagrangian_total: f64,
    pub final_posterior_on_truth: f64,
    pub misdetection_rate: f64,
    /// Sums of squared tracking errors after burn-in, and their count.
    pub usability_sq_err: [f64; 2],
    pub usability_count: usize,
    pub hdv_a2: f64,
    pub hdv_da2: f64,
    pub cav_a2: f64,
    pub cav_da2: f64,
}

fn squares(a: &[f64]) -> (f64, f64) {
    let a2 = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
    let da2 = if a.len() > 1 {
        a.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (a.len() - 1) as f64
    } else {
        0.0
    };
    (a2, da2)
}

pub fn episode_metrics(record: &EpisodeRecord, burn_in: usize) -> Result<EpisodeMetrics> {
    let rows = &record.rows;
    let posteriors: Vec<Vec<f64>> = rows.iter().map(|r| r.posterior.clone()).collect();
    let detections: Vec<usize> = rows.iter().map(|r| r.detection).collect();
    let privacy = privacy_report(&posteriors, &detections, record.header.theta_index)?;
    let n = rows.len() as f64;
    let sum = |f: fn(&StepRow) -> f64| rows.iter().map(f).sum::<f64>();
    let mut sq = [0.0; 2];
    let mut count = 0;
    for r in rows.iter().filter(|r| r.t >= burn_in) {
        sq[0] += (r.v_est - r.v_true).powi(2);
        sq[1] += (r.s_est - r.s_true).powi(2);
        count += 1;
    }
    let (hdv_a2, hdv_da2) = squares(&rows.iter().map(|r| r.hdv_model_accel).collect::<Vec<_>>());
    let (cav_a2, cav_da2) = squares(&rows.iter().map(|r| r.cav_accel).collect::<Vec<_>>());
    Ok(EpisodeMetrics {
        fuel_mean: sum(|r| r.fuel_rate) / n,
        distortion_total: sum(|r| r.expected_distortion),
        realized_distortion_total: sum(|r| r.distortion),
        mi_bound_total: sum(|r| r.mi_bound),
        lagrangian_total: sum(|r| r.lagrangian),
        final_posterior_on_truth: *privacy.posterior_on_truth.last().unwrap(),
        misdetection_rate: privacy.misdetection_rate,
        usability_sq_err: sq,
        usability_count: count,
        hdv_a2,
        hdv_da2,
        cav_a2,
        cav_da2,
    })
}

/// Mean and half-width of a normal 95% confidence interval.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSummary {
    pub theta_index: usize,
    pub theta: [f64; 2],
    pub episodes: usize,
    pub aborted: usize,
    pub fuel_mean: f64,
    pub fuel_ci95: f64,
    pub distortion_mean: f64,
    pub distortion_ci95: f64,
    pub distortion_max: f64,
    pub within_budget_fraction: f64,
    pub final_posterior_mean: f64,
    pub final_posterior_ci95: f64,
    pub misdetection_rate_mean: f64,
    pub usability_rmse: [f64; 2],
    pub hdv_a2: f64,
    pub hdv_da2: f64,
    pub cav_a2: f64,
    pub cav_da2: f64,
    pub mi_bound_mean: f64,
    pub lagrangian_mean: f64,
    /// Mean posterior mass on θ* at each step.
    pub posterior_series: Vec<f64>,
    /// Fraction of episodes with a wrong detection at each step.
    pub misdetection_series: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub policy: PolicyChoice,
    pub d_hat: f64,
    pub per_theta: Vec<ThetaSummary>,
}

pub struct EvalOutcome {
    pub summary: EvalSummary,
    pub records: Vec<EpisodeRecord>,
}

fn summarize_theta(
    cfg: &ExperimentConfig,
    theta_index: usize,
    records: &[&EpisodeRecord],
) -> Result<ThetaSummary> {
    let metrics: Vec<EpisodeMetrics> = records
        .iter()
        .map(|r| episode_metrics(r, cfg.eval.burn_in))
        .collect::<Result<_>>()?;
    let col = |f: fn(&EpisodeMetrics) -> f64| metrics.iter().map(f).collect::<Vec<f64>>();
    let mean = |f: fn(&EpisodeMetrics) -> f64| mean_ci95(&col(f)).0;
    let (fuel_mean, fuel_ci95) = mean_ci95(&col(|m| m.fuel_mean));
    let distortions = col(|m| m.distortion_total);
    let (distortion_mean, distortion_ci95) = mean_ci95(&distortions);
    let (final_posterior_mean, final_posterior_ci95) = mean_ci95(&col(|m| m.final_posterior_on_truth));
    let count: usize = metrics.iter().map(|m| m.usability_count).sum();
    let rmse = |k: usize| (metrics.iter().map(|m| m.usability_sq_err[k]).sum::<f64>() / count.max(1) as f64).sqrt();
    let horizon = cfg.cost.horizon;
    let mut posterior_series = vec![0.0; horizon];
    let mut misdetection_series = vec![0.0; horizon];
    let mut counts = vec![0usize; horizon];
    for r in records {
        for row in &r.rows {
            posterior_series[row.t] += row.posterior[theta_index];
            misdetection_series[row.t] += if row.correct { 0.0 } else { 1.0 };
            counts[row.t] += 1;
        }
    }
    for t in 0..horizon {
        let c = counts[t].max(1) as f64;
        posterior_series[t] /= c;
        misdetection_series[t] /= c;
    }
    Ok(ThetaSummary {
        theta_index,
        theta: cfg.env.theta_support[theta_index],
        episodes: records.len(),
        aborted: records.iter().filter(|r| r.header.aborted).count(),
        fuel_mean,
        fuel_ci95,
        distortion_mean,
        distortion_ci95,
        distortion_max: distortions.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        within_budget_fraction: distortions.iter().filter(|d| **d <= cfg.cost.d_hat).count() as f64
            / distortions.len() as f64,
        final_posterior_mean,
        final_posterior_ci95,
        misdetection_rate_mean: mean(|m| m.misdetection_rate),
        usability_rmse: [rmse(0), rmse(1)],
        hdv_a2: mean(|m| m.hdv_a2),
        hdv_da2: mean(|m| m.hdv_da2),
        cav_a2: mean(|m| m.cav_a2),
        cav_da2: mean(|m| m.cav_da2),
        mi_bound_mean: mean(|m| m.mi_bound_total),
        lagrangian_mean: mean(|m| m.lagrangian_total),
        posterior_series,
        misdetection_series,
    })
}

/// Evaluates a policy for `episodes_per_theta` episodes at every θ* on a
/// pool of `eval.workers` threads. Results do not depend on the pool size.
pub fn evaluate(
    cfg: &ExperimentConfig,
    policy: &SharingPolicy<'_>,
    choice: PolicyChoice,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    let hash = cfg.hash();
    let k = cfg.env.theta_support.len();
    let n = cfg.eval.episodes_per_theta;
    if n == 0 {
        return Err(Error::config("eval.episodes_per_theta", "must be positive"));
    }
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|t| (0..n).map(move |e| (t, e))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.eval.workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    let records: Vec<EpisodeRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(t, e)| run_eval_episode(cfg, policy, choice, t, e, &hash))
            .collect::<Result<_>>()
    })?;
    let per_theta = (0..k)
        .map(|t| {
            let rs: Vec<&EpisodeRecord> = records.iter().filter(|r| r.header.theta_index == t).collect();
            summarize_theta(cfg, t, &rs)
        })
        .collect::<Result<_>>()?;
    Ok(EvalOutcome {
        summary: EvalSummary {
            schema_version: SCHEMA_VERSION,
            config_hash: hash,
            seed: cfg.seed,
            policy: choice,
            d_hat: cfg.cost.d_hat,
            per_theta,
        },
        records,
    })
}

fn theta_label(i: usize) -> String {
    format!("theta{}", i + 1)
}

/// Per-episode training curve.
pub fn write_curve_csv(path: &Path, curve: &[CurveRow], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "schema_version",
        "config_hash",
        "episode",
        "theta_index",
        "steps",
        "lagrangian",
        "mi_bound_sum",
        "fuel",
        "distortion",
        "critic_loss",
        "actor_loss",
        "updates",
        "aborted",
    ])?;
    for r in curve {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            config_hash.to_string(),
            r.episode.to_string(),
            r.theta_index.to_string(),
            r.steps.to_string(),
            r.lagrangian.to_string(),
            r.mi_bound_sum.to_string(),
            r.fuel.to_string(),
            r.distortion.to_string(),
            r.critic_loss.to_string(),
            r.actor_loss.to_string(),
            r.updates.to_string(),
            r.aborted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per step of every episode, with the adversary's posterior.
pub fn write_records_csv(path: &Path, records: &[EpisodeRecord], k: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "schema_version",
        "config_hash",
        "policy",
        "theta_index",
        "episode",
        "episode_seed",
        "aborted",
        "t",
        "v_true",
        "s_true",
        "v_shared",
        "s_shared",
        "cav_accel",
        "hdv_accel",
        "hdv_model_accel",
        "fuel_rate",
        "distortion",
        "expected_distortion",
        "mi_bound",
        "lagrangian",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=k).map(|i| format!("posterior_{i}")));
    header.extend(["detection", "correct", "v_est", "s_est", "state_est_error"].map(String::from));
    w.write_record(&header)?;
    for rec in records {
        let h = &rec.header;
        for r in &rec.rows {
            let mut row = vec![
                SCHEMA_VERSION.to_string(),
                h.config_hash.clone(),
                h.policy.label().to_string(),
                h.theta_index.to_string(),
                h.episode.to_string(),
                h.seed.to_string(),
                h.aborted.to_string(),
                r.t.to_string(),
            ];
            row.extend(
                [
                    r.v_true,
                    r.s_true,
                    r.v_shared,
                    r.s_shared,
                    r.cav_accel,
                    r.hdv_accel,
                    r.hdv_model_accel,
                    r.fuel_rate,
                    r.distortion,
                    r.expected_distortion,
                    r.mi_bound,
                    r.lagrangian,
                ]
                .iter()
                .map(f64::to_string),
            );
            row.extend(r.posterior.iter().map(f64::to_string));
            let err = ((r.v_est - r.v_true).powi(2) + (r.s_est - r.s_true).powi(2)).sqrt();
            row.extend([
                r.detection.to_string(),
                r.correct.to_string(),
                r.v_est.to_string(),
                r.s_est.to_string(),
                err.to_string(),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fuel table: one row per θ*.
pub fn write_fuel_table(path: &Path, s: &EvalSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "schema_version",
        "config_hash",
        "policy",
        "theta",
        "theta_1",
        "theta_2",
        "fuel_ml_per_s",
        "fuel_ci95",
        "episodes",
    ])?;
    for t in &s.per_theta {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            s.config_hash.clone(),
            s.policy.label().to_string(),
            theta_label(t.theta_index),
            t.theta[0].to_string(),
            t.theta[1].to_string(),
            t.fuel_mean.to_string(),
            t.fuel_ci95.to_string(),
            t.episodes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Acceleration table: `E[a²]` and `E[(Δa)²]` for the HDV model
/// acceleration and for the CAV control.
pub fn write_accel_table(path: &Path, s: &EvalSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "schema_version",
        "config_hash",
        "policy",
        "theta",
        "hdv_e_a2",
        "hdv_e_da2",
        "cav_e_a2",
        "cav_e_da2",
    ])?;
    for t in &s.per_theta {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            s.config_hash.clone(),
            s.policy.label().to_string(),
            theta_label(t.theta_index),
            t.hdv_a2.to_string(),
            t.hdv_da2.to_string(),
            t.cav_a2.to_string(),
            t.cav_da2.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean posterior mass on θ* and misdetection fraction per step.
pub fn write_privacy_series(path: &Path, s: &EvalSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "schema_version",
        "config_hash",
        "policy",
        "theta",
        "t",
        "posterior_on_truth",
        "misdetection_fraction",
    ])?;
    for th in &s.per_theta {
        for (t, (p, m)) in th.posterior_series.iter().zip(&th.misdetection_series).enumerate() {
            w.write_record([
                SCHEMA_VERSION.to_string(),
                s.config_hash.clone(),
                s.policy.label().to_string(),
                theta_label(th.theta_index),
                t.to_string(),
                p.to_string(),
                m.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the full evaluation bundle into `dir` with a policy prefix.
pub fn write_eval_outputs(dir: &Path, outcome: &EvalOutcome, k: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = outcome.summary.policy.label();
    write_records_csv(&dir.join(format!("{p}_episodes.csv")), &outcome.records, k)?;
    write_fuel_table(&dir.join(format!("{p}_fuel.csv")), &outcome.summary)?;
    write_accel_table(&dir.join(format!("{p}_accel.csv")), &outcome.summary)?;
    write_privacy_series(&dir.join(format!("{p}_privacy.csv")), &outcome.summary)?;
    fs::write(
        dir.join(format!("{p}_summary.json")),
        serde_json::to_string_pretty(&outcome.summary)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 5;
        cfg.cost.horizon = 8;
        cfg.eval.episodes_per_theta = 2;
        cfg.eval.provider_particles = 64;
        cfg.eval.adversary_particles = 256;
        cfg.eval.workers = 2;
        cfg
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn missing_support_names_the_field() {
        let err = ExperimentConfig::from_toml_str("seed = 3\n[env]\ndt = 0.2\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "env.theta_support"), "{err}");
        let err = ExperimentConfig::from_toml_str("[env]\ntheta_support = [[0.4, 0.5]]\ndt = -1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "env.dt"), "{err}");
        let err = ExperimentConfig::from_toml_str("[env]\ntheta_support = [[0.4, 0.5]]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse(ref m) if m.contains("bogus")), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_compatibility() {
        let cfg = tiny();
        let ck = Checkpoint::new(cfg.clone(), cfg.init_networks());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        back.check_compatible(&cfg).unwrap();
        let mut other = cfg.clone();
        other.env.theta_support.pop();
        assert!(matches!(back.check_compatible(&other), Err(Error::Checkpoint(_))));
        let mut tampered = ck.clone();
        tampered.config.seed += 1;
        assert!(Checkpoint::from_json(&tampered.to_json().unwrap()).is_err());
    }

    #[test]
    fn true_data_has_zero_distortion_and_is_reproducible() {
        let cfg = tiny();
        let policy = SharingPolicy::TrueData {
            sigma_min: cfg.trainer.sigma_min,
        };
        let a = evaluate(&cfg, &policy, PolicyChoice::TrueData).unwrap();
        assert_eq!(a.records.len(), 8);
        for r in &a.records {
            assert_eq!(r.rows.len(), 8);
            assert!(r.rows.iter().all(|row| row.distortion == 0.0 && row.expected_distortion == 0.0));
        }
        let mut one_worker = cfg.clone();
        one_worker.eval.workers = 1;
        let b = evaluate(&one_worker, &policy, PolicyChoice::TrueData).unwrap();
        assert_eq!(a.records.iter().map(|r| &r.rows).collect::<Vec<_>>(), b.records.iter().map(|r| &r.rows).collect::<Vec<_>>());
    }

    #[test]
    fn outputs_are_written() {
        let cfg = tiny();
        let nets = cfg.init_networks();
        let policy = SharingPolicy::Trained(&nets);
        let out = evaluate(&cfg, &policy, PolicyChoice::Trained).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_eval_outputs(dir.path(), &out, 4).unwrap();
        let text = fs::read_to_string(dir.path().join("trained_episodes.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 8 * 8);
        assert!(text.lines().next().unwrap().contains("posterior_4"));
        for s in &out.summary.per_theta {
            assert_eq!(s.posterior_series.len(), 8);
            assert!(s.usability_rmse.iter().all(|e| e.is_finite()));
        }
    }

    #[test]
    fn ci_of_constant_is_zero() {
        assert_eq!(mean_ci95(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }
}
