//! Teacher-forced training: configuration, the optimisation loop and the
//! metrics log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Rollout;
use crate::diff::{Adam, Grads, Tape};
use crate::error::{invalid, Error, Result};
use crate::eval::evaluate;
use crate::model::{run_rollout, LossBreakdown, Mode, ModelConfig, ModelKind, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 2,000 iterations over 1,000 rollouts.
    Desk,
    /// 20,000 iterations over 10,000 rollouts.
    Paper,
}

impl Profile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(invalid!("unknown profile {s:?} (expected desk or paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub model: ModelKind,
    pub model_config: ModelConfig,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Gradients with a larger global norm are rescaled to it; 0 disables.
    pub clip_norm: f64,
    /// Rollouts used from the front of the training file.
    pub train_rollouts: usize,
    pub log_every: usize,
    /// 0 disables evaluation during training.
    pub eval_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Free-mode evaluation set for the metrics log.
    pub eval_data: Option<PathBuf>,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (iterations, train_rollouts) = match profile {
            Profile::Desk => (2_000, 1_000),
            Profile::Paper => (20_000, 10_000),
        };
        TrainConfig {
            profile,
            model: ModelKind::Pmp,
            model_config: ModelConfig::default(),
            seed: 0,
            iterations,
            batch_size: 16,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            train_rollouts,
            log_every: 100,
            eval_every: 500,
            checkpoint_every: 500,
            eval_data: None,
        }
    }

    /// Parses a flat `key = value` file. `#` starts a comment. A `profile`
    /// key sets the defaults, wherever it appears; other keys override them.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let profile = match pairs.iter().rev().find(|(_, k, _)| k == "profile") {
            Some((_, _, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = TrainConfig::profile(profile);
        for (line, k, v) in &pairs {
            cfg.set(k, v).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets one key; the error is a message for the caller to place.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "profile" => self.profile = value.parse().map_err(|e: Error| e.to_string())?,
            "model" => self.model = value.parse().map_err(|e: Error| e.to_string())?,
            "hidden" => self.model_config.hidden = num(key, value)?,
            "rounds" => self.model_config.rounds = num(key, value)?,
            "t_max" => self.model_config.t_max = num(key, value)?,
            "shared_processor" => self.model_config.shared_processor = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "train_rollouts" => self.train_rollouts = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "eval_data" => {
                self.eval_data = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// The effective configuration in the same format [`TrainConfig::parse`]
    /// reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.model_config;
        let eval = self
            .eval_data
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        for (k, v) in [
            ("profile", self.profile.as_str().to_string()),
            ("model", self.model.to_string()),
            ("hidden", c.hidden.to_string()),
            ("rounds", c.rounds.to_string()),
            ("t_max", c.t_max.to_string()),
            ("shared_processor", c.shared_processor.to_string()),
            ("seed", self.seed.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("train_rollouts", self.train_rollouts.to_string()),
            ("log_every", self.log_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_data", eval),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(invalid!("batch_size and log_every must be positive"));
        }
        if self.model_config.hidden == 0 || self.model_config.rounds == 0 {
            return Err(invalid!("hidden and rounds must be positive"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(invalid!("learning_rate must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(invalid!("clip_norm must be zero or positive"));
        }
        Ok(())
    }
}

/// One row of the metrics log. Losses are averaged over the iterations since
/// the previous row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub eval_query_accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "iteration,loss_total,answer_bce,relevance_bce,persistency_bce,node_value_bce,eval_query_accuracy";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        let eval = self.eval_query_accuracy.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            l.total(),
            l.answer_bce,
            l.relevance_bce,
            l.persistency_bce,
            l.node_value_bce,
            eval
        )
    }
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Hooks called from inside [`train_with`].
pub trait TrainObserver {
    fn on_log(&mut self, _row: &MetricsRow) {}
    fn on_checkpoint(&mut self, _iteration: usize, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
    /// Called with the parameters as they were when the loss went bad.
    fn on_abort(&mut self, _params: &ModelParams, _error: &Error) {}
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<MetricsRow>,
    /// Mean batch loss of every iteration.
    pub losses: Vec<f64>,
}

/// Loss and gradient of one teacher-forced rollout.
pub fn rollout_gradient(params: &ModelParams, rollout: &Rollout) -> Result<(LossBreakdown, Grads)> {
    let mut tape = Tape::new(&params.set);
    let run = run_rollout(params, &mut tape, rollout, Mode::TeacherForced)?;
    let grads = match run.loss {
        Some(loss) => tape.backward(loss),
        None => params.set.zero_grads(),
    };
    Ok((run.trace.loss, grads))
}

pub fn train(config: &TrainConfig, data: &[Rollout], eval: Option<&[Rollout]>) -> Result<TrainOutcome> {
    train_with(config, data, eval, &mut ())
}

/// Trains from a fresh initialisation seeded by `config.seed`.
///
/// Every iteration draws `batch_size` rollouts uniformly with replacement,
/// averages their teacher-forced losses and takes one Adam step. Batch
/// gradients are computed in parallel and summed in batch order, so the
/// result does not depend on the thread count.
pub fn train_with(
    config: &TrainConfig,
    data: &[Rollout],
    eval: Option<&[Rollout]>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if data.len() < config.train_rollouts {
        return Err(invalid!(
            "config asks for {} training rollouts but the dataset has {}",
            config.train_rollouts,
            data.len()
        ));
    }
    let data = &data[..config.train_rollouts.max(1)];
    let mut params = ModelParams::new(config.model, config.model_config, config.seed);
    let mut adam = Adam::new(&params.set, config.learning_rate);
    // separate stream from the initialisation
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut window = LossBreakdown::default();
    let mut window_len = 0usize;
    let scale = 1.0 / config.batch_size as f64;

    for it in 1..=config.iterations {
        let batch: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
        let results: Vec<Result<(LossBreakdown, Grads)>> = batch
            .par_iter()
            .map(|&i| rollout_gradient(&params, &data[i]))
            .collect();
        let mut total = params.set.zero_grads();
        let mut batch_loss = LossBreakdown::default();
        for (&i, r) in batch.iter().zip(results) {
            let (loss, grads) = r?;
            if !loss.is_finite() || !grads.is_finite() {
                let err = Error::NonFiniteLoss {
                    iteration: it,
                    detail: format!("rollout {i}: {loss:?}"),
                };
                observer.on_abort(&params, &err);
                return Err(err);
            }
            total.add_assign(&grads);
            batch_loss.add_scaled(&loss, scale);
        }
        total.scale(scale);
        let norm = total.norm();
        if config.clip_norm > 0.0 && norm > config.clip_norm {
            total.scale(config.clip_norm / norm);
        }
        adam.step(&mut params.set, &total)?;
        losses.push(batch_loss.total());
        window.add_scaled(&batch_loss, 1.0);
        window_len += 1;

        let eval_now = config.eval_every > 0 && it % config.eval_every == 0;
        if it % config.log_every == 0 || eval_now || it == config.iterations {
            let eval_query_accuracy = match eval {
                Some(set) if eval_now || it == config.iterations => {
                    Some(evaluate(&params, set, Mode::Free)?.query_accuracy)
                }
                _ => None,
            };
            let mut mean = LossBreakdown::default();
            mean.add_scaled(&window, 1.0 / window_len as f64);
            let row = MetricsRow {
                iteration: it,
                loss: mean,
                eval_query_accuracy,
            };
            observer.on_log(&row);
            log.push(row);
            window = LossBreakdown::default();
            window_len = 0;
        }
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
            observer.on_checkpoint(it, &params)?;
        }
    }
    Ok(TrainOutcome { params, log, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, DatasetSpec};

    #[test]
    fn config_round_trip() {
        let text = "# comment\nprofile = paper\nmodel = selective\nhidden = 16 # inline\nlearning_rate = 0.002\n";
        let cfg = TrainConfig::parse(text, Path::new("c.txt")).unwrap();
        assert_eq!(cfg.iterations, 20_000);
        assert_eq!(cfg.model, ModelKind::Selective);
        assert_eq!(cfg.model_config.hidden, 16);
        let again = TrainConfig::parse(&cfg.to_text(), Path::new("c.txt")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_config_lines() {
        let err = TrainConfig::parse("iterations = 5\nbogus = 1\n", Path::new("c.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(TrainConfig::parse("iterations five", Path::new("c.txt")).is_err());
        assert!(TrainConfig::parse("iterations = x", Path::new("c.txt")).is_err());
    }

    fn tiny(model: ModelKind) -> TrainConfig {
        let mut cfg = TrainConfig::profile(Profile::Desk);
        cfg.model = model;
        cfg.model_config.hidden = 8;
        cfg.model_config.rounds = 2;
        cfg.iterations = 6;
        cfg.batch_size = 3;
        cfg.train_rollouts = 4;
        cfg.log_every = 3;
        cfg
    }

    #[test]
    fn deterministic_and_logged() {
        let data = generate(&DatasetSpec::in_distribution(5, 4)).unwrap();
        let cfg = tiny(ModelKind::Pmp);
        let a = train(&cfg, &data, Some(&data)).unwrap();
        let b = train(&cfg, &data, Some(&data)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.log.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![3, 6]);
        assert!(a.log[1].eval_query_accuracy.is_some());
    }

    #[test]
    fn too_few_rollouts_rejected() {
        let data = generate(&DatasetSpec::in_distribution(5, 2)).unwrap();
        assert!(train(&tiny(ModelKind::Overwrite), &data, None).is_err());
    }
}
