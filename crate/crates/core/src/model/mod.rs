//! Persistent message passing and the baselines that share its parts.
//!
//! All models read operation features through the same encoder and share one
//! max-aggregation processor. They differ in what they remember between
//! steps: PMP appends copies of persisted states and keeps every old state
//! reachable, the overwriting baselines keep exactly one state per tree
//! position, and the oracle keeps nothing and is handed the correct snapshot.

mod rollout;
mod store;
mod trace;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{FEATURE_DIM, VALUE_BITS};
use crate::diff::{Adjacency, Matrix, MessageMap, ParamId, ParamSet, Tape, Var};
use crate::error::{invalid, Error, Result};

pub use rollout::{run_rollout, RolloutRun, RolloutSession, RolloutState, StepTruth};
pub use store::{AdjacencyPair, HiddenStateStore, StateId};
pub use trace::{LossBreakdown, MaskCounts, RolloutTrace, StepRecord};

/// Scalar time features fed to the relevance encoder.
pub const TIME_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Pmp,
    Overwrite,
    Selective,
    Oracle,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Pmp,
        ModelKind::Overwrite,
        ModelKind::Selective,
        ModelKind::Oracle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Pmp => "pmp",
            ModelKind::Overwrite => "overwrite",
            ModelKind::Selective => "selective",
            ModelKind::Oracle => "oracle",
        }
    }

    /// Whether the model owns the relevance (version-link) path.
    pub fn has_relevance_path(&self) -> bool {
        matches!(self, ModelKind::Pmp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid!("unknown model {s:?} (expected pmp, overwrite, selective or oracle)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Ground-truth masks drive structure, readout and gating.
    TeacherForced,
    /// The model's own masks drive everything.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub rounds: usize,
    /// Normaliser for time features (the training horizon).
    pub t_max: f64,
    /// One processor for both the connectivity and the relevance pass.
    pub shared_processor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            rounds: 10,
            t_max: 10.0,
            shared_processor: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

/// Message map `M` and update map `U`, iterated for `rounds` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Processor {
    pub msg: MessageMap,
    pub update: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamIds {
    pub enc_operation: Affine,
    pub enc_relevance: Option<Affine>,
    pub proc_connectivity: Processor,
    pub proc_relevance: Option<Processor>,
    pub head_relevance: Affine,
    pub head_persistency: Affine,
    pub readout: Affine,
    pub node_decoder: Affine,
}

/// Learnable weights of one model plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub config: ModelConfig,
    /// Initialisation seed, kept so reports can name the run.
    pub seed: u64,
    pub set: ParamSet,
    pub(crate) ids: ParamIds,
}

fn affine(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) -> Affine {
    Affine {
        w: set.add_uniform(&format!("{name}.weight"), out, inp, inp, rng),
        b: set.add(&format!("{name}.bias"), Matrix::zeros(1, out)),
    }
}

fn processor(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Processor {
    // M acts on [z_src | z_dst], so both blocks share fan-in 2d.
    let msg = MessageMap {
        src: set.add_uniform(&format!("{name}.message.src"), d, d, 2 * d, rng),
        dst: set.add_uniform(&format!("{name}.message.dst"), d, d, 2 * d, rng),
        bias: set.add(&format!("{name}.message.bias"), Matrix::zeros(1, d)),
    };
    let update = affine(set, rng, &format!("{name}.update"), d, 2 * d);
    Processor { msg, update }
}

impl ModelParams {
    pub fn new(kind: ModelKind, config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let mut set = ParamSet::new();
        let relevance = kind.has_relevance_path();

        let enc_operation = affine(&mut set, &mut rng, "encoder.operation", d, FEATURE_DIM + d);
        let enc_relevance =
            relevance.then(|| affine(&mut set, &mut rng, "encoder.relevance", d, TIME_FEATURES + d));
        let proc_connectivity = processor(&mut set, &mut rng, "processor", d);
        let proc_relevance = relevance.then(|| {
            if config.shared_processor {
                proc_connectivity
            } else {
                processor(&mut set, &mut rng, "processor.relevance", d)
            }
        });
        let rel_in = if relevance { 2 * d } else { d };
        let head_relevance = affine(&mut set, &mut rng, "head.relevance", 1, rel_in);
        let head_persistency = affine(&mut set, &mut rng, "head.persistency", 1, d);
        let readout = affine(&mut set, &mut rng, "decoder.answer", VALUE_BITS, 2 * d);
        let node_decoder = affine(&mut set, &mut rng, "decoder.node_value", VALUE_BITS, d);

        ModelParams {
            kind,
            config,
            seed,
            set,
            ids: ParamIds {
                enc_operation,
                enc_relevance,
                proc_connectivity,
                proc_relevance,
                head_relevance,
                head_persistency,
                readout,
                node_decoder,
            },
        }
    }

    /// The processor over connectivity edges, applied to encoded inputs.
    pub fn process(&self, tape: &mut Tape<'_>, x: Var, adj: &Adjacency) -> Result<Var> {
        rollout::process(tape, x, adj, &self.ids.proc_connectivity, self.config.rounds)
    }

    pub fn scalar_count(&self) -> usize {
        self.set.scalar_count()
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("model".into(), self.kind.to_string());
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("hidden".into(), self.config.hidden.to_string());
        meta.insert("rounds".into(), self.config.rounds.to_string());
        meta.insert("t_max".into(), self.config.t_max.to_string());
        meta.insert("shared_processor".into(), self.config.shared_processor.to_string());
        meta
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.set.save(path, &self.meta())
    }

    /// Loads a checkpoint, rebuilding the parameter layout from its metadata
    /// and checking that every stored tensor matches it.
    pub fn load(path: &Path) -> Result<Self> {
        let (set, meta) = ParamSet::load(path)?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| invalid!("checkpoint {} lacks metadata {k:?}", path.display()))
        };
        let parse_err = |k: &str| invalid!("checkpoint {}: bad value for {k:?}", path.display());
        let kind: ModelKind = get("model")?.parse()?;
        let config = ModelConfig {
            hidden: get("hidden")?.parse().map_err(|_| parse_err("hidden"))?,
            rounds: get("rounds")?.parse().map_err(|_| parse_err("rounds"))?,
            t_max: get("t_max")?.parse().map_err(|_| parse_err("t_max"))?,
            shared_processor: get("shared_processor")?
                .parse()
                .map_err(|_| parse_err("shared_processor"))?,
        };
        let seed = get("seed")?.parse().map_err(|_| parse_err("seed"))?;
        let mut model = ModelParams::new(kind, config, seed);
        if model.set.len() != set.len() {
            return Err(invalid!(
                "checkpoint {} has {} tensors, model layout expects {}",
                path.display(),
                set.len(),
                model.set.len()
            ));
        }
        for id in model.set.ids().collect::<Vec<_>>() {
            let name = model.set.name(id).to_string();
            let stored = set
                .id(&name)
                .ok_or_else(|| invalid!("checkpoint {} lacks tensor {name}", path.display()))?;
            if set.get(stored).shape() != model.set.get(id).shape() {
                return Err(invalid!("checkpoint tensor {name} has the wrong shape"));
            }
            *model.set.get_mut(id) = set.get(stored).clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_params_not_larger_than_pmp() {
        let cfg = ModelConfig::default();
        let pmp = ModelParams::new(ModelKind::Pmp, cfg, 0).scalar_count();
        for kind in [ModelKind::Overwrite, ModelKind::Selective, ModelKind::Oracle] {
            assert!(ModelParams::new(kind, cfg, 0).scalar_count() <= pmp);
        }
    }

    #[test]
    fn encoder_widths() {
        let p = ModelParams::new(ModelKind::Pmp, ModelConfig::default(), 0);
        let rel = p.ids.enc_relevance.unwrap();
        assert_eq!(p.set.get(rel.w).shape(), (64, 4 + 64));
        assert_eq!(p.set.get(p.ids.enc_operation.w).shape(), (64, 10 + 64));
        assert_eq!(p.ids.proc_relevance, Some(p.ids.proc_connectivity));

        let unshared = ModelConfig {
            shared_processor: false,
            ..ModelConfig::default()
        };
        let q = ModelParams::new(ModelKind::Pmp, unshared, 0);
        assert_ne!(q.ids.proc_relevance, Some(q.ids.proc_connectivity));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        let cfg = ModelConfig {
            hidden: 8,
            rounds: 3,
            t_max: 10.0,
            shared_processor: false,
        };
        let p = ModelParams::new(ModelKind::Selective, cfg, 11);
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn kind_parsing() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!("gnn".parse::<ModelKind>().is_err());
    }
}
