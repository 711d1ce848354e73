use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::build::{build_agent, build_federation, fedformer_spec, EnvAssignment};
use super::config::RunConfig;
use crate::coordinator::{latest_checkpoint, load_checkpoint, load_encoders, save_checkpoint};
use crate::envs::sample_env_set_excluding;
use crate::error::{FedError, Result};
use crate::federation::{onboard_agent, FederatedQNet, Strategy};
use crate::nets::TensorBundle;
use crate::sac::{EpochStats, QNet, SacAgent};
use crate::seeding::{derive_seed, stream_rng, Stream};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const ONBOARDING_FILE: &str = "onboarding.csv";
pub const METRICS_HEADER: [&str; 13] = [
    "run_id",
    "strategy",
    "agent_id",
    "seed",
    "epoch",
    "avg_train_return",
    "avg_test_return",
    "critic_loss",
    "policy_loss",
    "alpha",
    "upload_bytes",
    "download_bytes",
    "wall_time_s",
];

/// One CSV row: a single agent after a single epoch of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub run_id: String,
    pub strategy: String,
    pub agent_id: usize,
    pub seed: u64,
    /// 1-based: epoch `e` is the state after `e` epochs of training.
    pub epoch: u64,
    pub avg_train_return: f64,
    pub avg_test_return: f64,
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub wall_time_s: Option<f64>,
}

impl EpochMetrics {
    fn from_stats(run_id: &str, strategy: &str, agent_id: usize, seed: u64, epoch: u64, s: &EpochStats) -> Self {
        EpochMetrics {
            run_id: run_id.to_string(),
            strategy: strategy.to_string(),
            agent_id,
            seed,
            epoch,
            avg_train_return: s.avg_train_return,
            avg_test_return: s.avg_test_return,
            critic_loss: s.critic_loss,
            policy_loss: s.policy_loss,
            alpha: s.alpha,
            upload_bytes: 0,
            download_bytes: 0,
            wall_time_s: None,
        }
    }
}

/// Single writer for a metrics file; every row is flushed as soon as it is written.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, row: &EpochMetrics) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Read a metrics file, rejecting any header other than the expected one.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(FedError::Format(format!(
            "{}: unexpected metrics header `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| FedError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn run_dir(config: &RunConfig) -> PathBuf {
    config.out_dir.join(config.run_id())
}

fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

fn envs_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("envs.json")
}

/// Run every seed of `config` and return the path of the metrics CSV.
///
/// With `resume`, each seed restarts from its newest checkpoint and rows past
/// that checkpoint are dropped and recomputed, which reproduces the file an
/// uninterrupted run would have written.
pub fn run_experiment(config: &RunConfig, resume: bool) -> Result<PathBuf> {
    config.validate()?;
    let dir = run_dir(config);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml_string())?;
    let metrics = dir.join(METRICS_FILE);
    let run_id = config.run_id();
    let hash = config.config_hash();

    let restart: BTreeMap<u64, u64> = config
        .seeds
        .iter()
        .map(|&s| (s, if resume { latest_checkpoint(&seed_dir(&dir, s)).unwrap_or(0) } else { 0 }))
        .collect();
    let kept: Vec<EpochMetrics> = if resume && metrics.exists() {
        read_metrics(&metrics)?
            .into_iter()
            .filter(|r| r.run_id == run_id && restart.get(&r.seed).is_some_and(|&e| r.epoch <= e))
            .collect()
    } else {
        Vec::new()
    };

    let mut out = MetricsWriter::create(&metrics)?;
    for &seed in &config.seeds {
        for row in kept.iter().filter(|r| r.seed == seed) {
            out.write(row)?;
        }
        let sdir = seed_dir(&dir, seed);
        fs::create_dir_all(&sdir)?;
        let (mut fed, sets) = build_federation(config, seed)?;
        let envs_json = serde_json::to_string_pretty(&sets).expect("env sets serialise");
        fs::write(envs_path(&dir, seed), envs_json)?;
        if restart[&seed] > 0 {
            load_checkpoint(&sdir, restart[&seed], &mut fed)?;
        }
        while fed.epoch() < config.epochs {
            let started = Instant::now();
            let report = fed.run_epoch()?;
            let elapsed = started.elapsed().as_secs_f64();
            let epoch = report.epoch + 1;
            for (agent, stats) in fed.agents.iter().zip(&report.stats) {
                let id = agent.agent_id;
                let mut row = EpochMetrics::from_stats(&run_id, config.strategy.name(), id, seed, epoch, stats);
                row.upload_bytes = report.ledger.upload_bytes.get(&id).copied().unwrap_or(0);
                row.download_bytes = report.ledger.download_bytes.get(&id).copied().unwrap_or(0);
                row.wall_time_s = config.record_wall_time.then_some(elapsed);
                out.write(&row)?;
            }
            let periodic = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
            if periodic || epoch == config.epochs {
                save_checkpoint(&sdir, &fed, &run_id, seed, &hash)?;
            }
        }
    }
    Ok(metrics)
}

/// Per-seed outcome of an onboarding comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnboardingOutcome {
    pub seed: u64,
    pub threshold: f64,
    pub onboarded_epochs: Option<u64>,
    pub scratch_epochs: Option<u64>,
    /// `scratch_epochs / onboarded_epochs`; absent unless both reached the threshold.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct OnboardingReport {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub outcomes: Vec<OnboardingOutcome>,
}

/// Mean of `avg_test_return` over agents, per epoch, for one seed.
pub fn mean_curve(rows: &[EpochMetrics], seed: u64) -> Vec<f64> {
    let mut by_epoch: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.seed == seed) {
        let e = by_epoch.entry(r.epoch).or_default();
        e.0 += r.avg_test_return;
        e.1 += 1;
    }
    by_epoch.values().map(|(s, n)| s / *n as f64).collect()
}

/// Returns only improve upward from a negative start, so "80% of the final
/// return" is taken as 80% of the way from the first epoch to the last.
pub fn onboarding_threshold(base_curve: &[f64], fraction: f64) -> Option<f64> {
    let (first, last) = (base_curve.first()?, base_curve.last()?);
    Some(first + fraction * (last - first))
}

/// 1-based epoch at which `curve` first reaches `threshold`.
pub fn epochs_to_threshold(curve: &[f64], threshold: f64) -> Option<u64> {
    curve.iter().position(|&v| v >= threshold).map(|i| i as u64 + 1)
}

/// Reject environment cells the base run has already seen.
pub fn ensure_unseen(new_cells: &[u64], base_cells: &[u64]) -> Result<()> {
    let seen: Vec<u64> = new_cells.iter().copied().filter(|c| base_cells.contains(c)).collect();
    if seen.is_empty() {
        Ok(())
    } else {
        Err(FedError::Validation(vec![format!(
            "onboarding environments {seen:?} were already used by the base run"
        )]))
    }
}

fn frozen_externals(q: &QNet) -> BTreeMap<usize, TensorBundle> {
    q.externals().iter().map(|e| (e.agent_id, e.params.clone())).collect()
}

fn train_solo(agent: &mut SacAgent, epochs: u64, run_id: &str, label: &str, out: &mut MetricsWriter) -> Result<Vec<f64>> {
    let mut curve = Vec::new();
    for _ in 0..epochs {
        let stats = agent.train_epoch()?;
        let row = EpochMetrics::from_stats(run_id, label, agent.agent_id, agent.seed, agent.epochs_done, &stats);
        out.write(&row)?;
        curve.push(stats.avg_test_return);
    }
    Ok(curve)
}

/// Train a new agent on never-seen environments next to the frozen encoders of
/// a finished FedFormer run, and a from-scratch agent on the same
/// environments, then compare how fast each reaches the base run's level.
pub fn run_onboarding(base_run_dir: &Path, new_env_seed: u64, config: &RunConfig) -> Result<OnboardingReport> {
    config.validate()?;
    let base_cfg_path = base_run_dir.join(CONFIG_FILE);
    let base_cfg = RunConfig::load(&base_cfg_path).map_err(|e| FedError::checkpoint(&base_cfg_path, e))?;
    if base_cfg.strategy != Strategy::FedFormer {
        return Err(FedError::InvalidArgument(format!(
            "onboarding needs a FedFormer base run, found {}",
            base_cfg.strategy
        )));
    }
    let base_rows = read_metrics(&base_run_dir.join(METRICS_FILE))?;

    let mut digest = Sha256::new();
    digest.update(config.config_hash());
    digest.update(base_cfg.config_hash());
    digest.update(new_env_seed.to_le_bytes());
    let run_id: String = digest.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    let dir = base_run_dir.join(format!("onboard_{run_id}"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml_string())?;
    let metrics = dir.join(METRICS_FILE);
    let mut out = MetricsWriter::create(&metrics)?;

    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let sdir = seed_dir(base_run_dir, seed);
        let last = latest_checkpoint(&sdir)
            .ok_or_else(|| FedError::checkpoint(&sdir, "no checkpoint for this seed"))?;
        let pretrained = load_encoders(&sdir, last)?;
        let envs_file = envs_path(base_run_dir, seed);
        let text = fs::read_to_string(&envs_file).map_err(|e| FedError::checkpoint(&envs_file, e))?;
        let base_sets: Vec<EnvAssignment> =
            serde_json::from_str(&text).map_err(|e| FedError::checkpoint(&envs_file, e))?;
        let base_cells: Vec<u64> = base_sets.iter().flat_map(|a| a.cells()).collect();

        let (ntr, nte) = (config.envs_per_agent_train, config.envs_per_agent_test);
        let sample_seed = derive_seed(new_env_seed, &[seed]);
        let mut envs = sample_env_set_excluding(config.task_id, ntr + nte, sample_seed, config.path_length, &base_cells)?;
        let test = envs.split_off(ntr);
        let mine = EnvAssignment {
            agent_id: pretrained.keys().next_back().map_or(0, |m| m + 1),
            train: envs,
            test,
        };
        ensure_unseen(&mine.cells().collect::<Vec<_>>(), &base_cells)?;
        let id = mine.agent_id;

        let spec = fedformer_spec(config, id + 1)?;
        let mut rng = stream_rng(seed, id, Stream::Init, 1);
        let q1 = QNet::FedFormer(onboard_agent(&pretrained, spec.clone(), &mut rng)?);
        let q2 = QNet::FedFormer(onboard_agent(&pretrained, spec.clone(), &mut rng)?);
        let loaded = frozen_externals(&q1);
        let mut onboarded = build_agent(config, seed, id, q1, q2, &mine)?;

        let mut rng = stream_rng(seed, id, Stream::Init, 1);
        let s1 = QNet::FedFormer(FederatedQNet::new(id, spec.clone(), &[], &mut rng)?);
        let s2 = QNet::FedFormer(FederatedQNet::new(id, spec, &[], &mut rng)?);
        let mut scratch = build_agent(config, seed, id, s1, s2, &mine)?;

        let on_curve = train_solo(&mut onboarded, config.epochs, &run_id, "Onboarded", &mut out)?;
        let sc_curve = train_solo(&mut scratch, config.epochs, &run_id, "Scratch", &mut out)?;
        for q in [&onboarded.state.q1, &onboarded.state.q2] {
            if frozen_externals(q) != loaded {
                return Err(FedError::Protocol("external encoders changed during onboarding".into()));
            }
        }

        let threshold = onboarding_threshold(&mean_curve(&base_rows, seed), 0.8)
            .ok_or_else(|| FedError::Format(format!("base run has no metrics for seed {seed}")))?;
        let onboarded_epochs = epochs_to_threshold(&on_curve, threshold);
        let scratch_epochs = epochs_to_threshold(&sc_curve, threshold);
        let speedup = match (onboarded_epochs, scratch_epochs) {
            (Some(o), Some(s)) => Some(s as f64 / o as f64),
            _ => None,
        };
        outcomes.push(OnboardingOutcome {
            seed,
            threshold,
            onboarded_epochs,
            scratch_epochs,
            speedup,
        });
    }

    let summary = dir.join(ONBOARDING_FILE);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&summary)?;
    for o in &outcomes {
        w.serialize(o)?;
    }
    w.flush()?;
    Ok(OnboardingReport {
        metrics,
        summary,
        outcomes,
    })
}
