//! Training loop: sampled rollouts on a periodically resampled instance
//! batch, PPO updates, greedy validation and resumable state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fjsp_autodiff::checkpoint as tensor_file;
use fjsp_autodiff::{Adam, Tensor};
use fjsp_core::{FjspInstance, Generator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{save_policy, LoadError};
use crate::model::{ModelConfig, Policy, Strategy};
use crate::ppo::{ppo_update, prepare_samples, PpoError, PpoParams};
use crate::rollout::run_episodes;

/// Every field is required; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Parallel training environments per episode.
    pub envs: usize,
    pub resample_every: usize,
    pub validate_every: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub policy_coef: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub seed: u64,
    pub jobs: usize,
    pub machines: usize,
    pub generator: Generator,
    pub validation_size: usize,
    pub validation_seed: u64,
    pub normalize_advantages: bool,
    pub scale_rewards: bool,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Default hyperparameters for an `n x m` training size.
    pub fn standard(generator: Generator, jobs: usize, machines: usize) -> Self {
        TrainConfig {
            episodes: 1000,
            envs: 20,
            resample_every: 20,
            validate_every: 10,
            epochs: 4,
            gamma: 1.0,
            gae_lambda: 0.98,
            clip: 0.2,
            policy_coef: 1.0,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
            seed: 0,
            jobs,
            machines,
            generator,
            validation_size: 100,
            validation_seed: 1,
            normalize_advantages: true,
            scale_rewards: true,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("episodes", self.episodes),
            ("envs", self.envs),
            ("resample_every", self.resample_every),
            ("validate_every", self.validate_every),
            ("epochs", self.epochs),
            ("jobs", self.jobs),
            ("machines", self.machines),
            ("validation_size", self.validation_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err("gamma must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gae_lambda must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("clip", self.clip),
            ("lr", self.lr),
            ("policy_coef", self.policy_coef),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("value_coef", self.value_coef), ("entropy_coef", self.entropy_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be non-negative"));
            }
        }
        if self.generator == Generator::Sd1 && self.machines < 2 {
            return Err("sd1 needs at least 2 machines".into());
        }
        self.model.validate()
    }

    pub fn ppo(&self) -> PpoParams {
        PpoParams {
            epochs: self.epochs,
            clip: self.clip,
            policy_coef: self.policy_coef,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: TrainConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| e.to_string())?
        } else {
            toml::from_str(text).map_err(|e| e.to_string())?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The fixed validation set.
    pub fn validation_instances(&self) -> Vec<FjspInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.validation_seed);
        (0..self.validation_size)
            .map(|_| self.generator.generate(self.jobs, self.machines, &mut rng))
            .collect()
    }

    /// Training batch number `index` (one per `resample_every` episodes).
    pub fn training_batch(&self, index: usize) -> Vec<FjspInstance> {
        let mut rng = derived_rng(self.seed, 2, index as u64);
        (0..self.envs)
            .map(|_| self.generator.generate(self.jobs, self.machines, &mut rng))
            .collect()
    }
}

fn derived_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub mean_return: f64,
    pub val_makespan: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    episode: usize,
    adam_steps: u64,
    best_val: Option<f64>,
    best_episode: Option<usize>,
    seconds: f64,
    config: TrainConfig,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensors(#[from] fjsp_autodiff::CheckpointError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("log file: {0}")]
    Log(#[from] csv::Error),
    #[error("episode {episode}: {source}")]
    NonFinite { episode: usize, source: PpoError },
    #[error("cannot resume: {0}")]
    Resume(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const BEST_CHECKPOINT: &str = "best.danl";
pub const FINAL_CHECKPOINT: &str = "final.danl";
pub const STATE_FILE: &str = "train_state.danl";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub best_val: Option<f64>,
    pub best_episode: Option<usize>,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Mean greedy makespan over `instances`.
pub fn validate(policy: &Policy, instances: &[FjspInstance]) -> f64 {
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let trajs = run_episodes(policy, instances, Strategy::Greedy, &mut unused, false);
    trajs.iter().map(|t| t.makespan() as f64).sum::<f64>() / trajs.len() as f64
}

fn save_state(
    dir: &Path,
    policy: &Policy,
    adam: &Adam,
    state: &ResumeState,
) -> Result<(), TrainError> {
    let mut tensors = policy.tensors();
    let (m, v) = adam.moments();
    for ((name, _), (mt, vt)) in policy.store.iter().zip(m.iter().zip(v)) {
        tensors.push((format!("adam.m/{name}"), mt.clone()));
        tensors.push((format!("adam.v/{name}"), vt.clone()));
    }
    let path = dir.join(STATE_FILE);
    tensor_file::save(&path, &tensors)?;
    let sp = path.with_extension("json");
    std::fs::write(&sp, serde_json::to_string_pretty(state).expect("state serializes")).map_err(io_err(&sp))
}

fn load_state(dir: &Path, cfg: &TrainConfig) -> Result<(Policy, Adam, ResumeState), TrainError> {
    let path = dir.join(STATE_FILE);
    let sp = path.with_extension("json");
    let text = std::fs::read_to_string(&sp).map_err(io_err(&sp))?;
    let state: ResumeState = serde_json::from_str(&text).map_err(|e| TrainError::Resume(e.to_string()))?;
    let mut saved = state.config.clone();
    saved.episodes = cfg.episodes;
    if saved != *cfg {
        return Err(TrainError::Resume(
            "config differs from the interrupted run (only `episodes` may change)".into(),
        ));
    }
    let mut tensors = tensor_file::load(&path)?;
    let mut moments: Vec<(String, Tensor)> = Vec::new();
    tensors.retain(|(n, t)| {
        if n.starts_with("adam.") {
            moments.push((n.clone(), t.clone()));
            false
        } else {
            true
        }
    });
    let policy = Policy::from_tensors(cfg.model.clone(), tensors).map_err(TrainError::Resume)?;
    let mut adam = Adam::new(&policy.store, cfg.lr);
    let find = |prefix: &str, name: &str| {
        moments
            .iter()
            .find(|(n, _)| n.strip_prefix(prefix) == Some(name))
            .map(|(_, t)| t.clone())
            .ok_or_else(|| TrainError::Resume(format!("missing optimizer moment for `{name}`")))
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, _) in policy.store.iter() {
        m.push(find("adam.m/", name)?);
        v.push(find("adam.v/", name)?);
    }
    adam.restore(state.adam_steps, m, v);
    Ok((policy, adam, state))
}

fn read_log(path: &Path, upto: usize) -> Result<Vec<LogRow>, TrainError> {
    let mut rows = Vec::new();
    let mut reader = csv::Reader::from_path(path)?;
    for row in reader.deserialize() {
        let row: LogRow = row?;
        if row.episode <= upto {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

/// Runs (or resumes) training, writing checkpoints and the log to `dir`.
/// `progress` sees each log row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    dir: &Path,
    resume: bool,
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let log_path = dir.join(LOG_FILE);

    let (mut policy, mut adam, mut state, mut log) = if resume {
        let (p, a, s) = load_state(dir, cfg)?;
        let log = read_log(&log_path, s.episode)?;
        (p, a, s, log)
    } else {
        let p = Policy::new(cfg.model.clone(), cfg.seed);
        let a = Adam::new(&p.store, cfg.lr);
        let s = ResumeState {
            episode: 0,
            adam_steps: 0,
            best_val: None,
            best_episode: None,
            seconds: 0.0,
            config: cfg.clone(),
        };
        (p, a, s, Vec::new())
    };
    state.config = cfg.clone();

    let validation = cfg.validation_instances();
    let best_path = dir.join(BEST_CHECKPOINT);
    let final_path = dir.join(FINAL_CHECKPOINT);
    let started = Instant::now();
    let base_seconds = state.seconds;
    let mut batch_index = usize::MAX;
    let mut instances = Vec::new();

    for episode in state.episode + 1..=cfg.episodes {
        let b = (episode - 1) / cfg.resample_every;
        if b != batch_index {
            instances = cfg.training_batch(b);
            batch_index = b;
        }
        let mut rng = derived_rng(cfg.seed, 1, episode as u64);
        let trajs = run_episodes(&policy, &instances, Strategy::Sample, &mut rng, true);
        let samples = prepare_samples(
            &trajs,
            cfg.gamma,
            cfg.gae_lambda,
            cfg.scale_rewards,
            cfg.normalize_advantages,
        );
        let stats = ppo_update(&mut policy, &mut adam, &samples, &cfg.ppo())
            .map_err(|source| TrainError::NonFinite { episode, source })?;
        let mean_return = trajs.iter().map(|t| t.total_reward() as f64).sum::<f64>() / trajs.len() as f64;

        let val = (episode % cfg.validate_every == 0 || episode == cfg.episodes).then(|| validate(&policy, &validation));
        if let Some(v) = val {
            if state.best_val.is_none_or(|b| v < b) {
                state.best_val = Some(v);
                state.best_episode = Some(episode);
                save_policy(&best_path, &policy, metadata(cfg, episode, v))?;
            }
        }

        state.episode = episode;
        state.adam_steps = adam.steps();
        state.seconds = base_seconds + started.elapsed().as_secs_f64();
        let row = LogRow {
            episode,
            mean_return,
            val_makespan: val,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            seconds: state.seconds,
        };
        progress(&row);
        log.push(row);
        write_log(&log_path, &log)?;
        save_state(dir, &policy, &adam, &state)?;
    }

    let final_val = log.iter().rev().find_map(|r| r.val_makespan);
    save_policy(
        &final_path,
        &policy,
        metadata(cfg, state.episode, final_val.unwrap_or(f64::NAN)),
    )?;
    Ok(TrainOutcome {
        log,
        best_val: state.best_val,
        best_episode: state.best_episode,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

fn metadata(cfg: &TrainConfig, episode: usize, val: f64) -> serde_json::Value {
    serde_json::json!({
        "episode": episode,
        "validation_makespan": if val.is_finite() { serde_json::json!(val) } else { serde_json::Value::Null },
        "train_config": cfg,
    })
}
