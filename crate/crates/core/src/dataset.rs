//! Rollout generation, operation featurisation and the JSONL dataset format.
//!
//! A rollout is `U` point updates followed by `Q` historical range-minimum
//! queries on a freshly sampled array. Ground truth comes from replaying the
//! operations on a [`VersionedTree`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::Matrix;
use crate::error::{invalid, Error, Result};
use crate::pst::{EntityId, NodeId, Side, TreeShape, VersionedTree, MAX_VALUE, MIN_VALUE};

pub const SCHEMA_VERSION: u32 = 1;

/// Width of the per-state operation feature vector.
pub const FEATURE_DIM: usize = 10;
pub const VALUE_BITS: usize = 4;

pub const CH_IS_LEAF: usize = 0;
pub const CH_UPDATE_TARGET: usize = 1;
pub const CH_VALUE: usize = 2;
pub const CH_QUERY_LO: usize = 6;
pub const CH_QUERY_HI: usize = 7;
pub const CH_LEFT_CHILD: usize = 8;
pub const CH_RIGHT_CHILD: usize = 9;

/// MSB-first 4-bit encoding.
pub fn value_bits(value: u8) -> [f64; VALUE_BITS] {
    let mut out = [0.0; VALUE_BITS];
    for (i, bit) in out.iter_mut().enumerate() {
        *bit = f64::from((value >> (VALUE_BITS - 1 - i)) & 1);
    }
    out
}

pub fn bits_to_value(bits: &[bool]) -> u8 {
    bits.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Operation {
    Update { k: usize, x: u8 },
    Query { a: usize, b: usize, s: usize },
}

impl Operation {
    pub fn is_update(&self) -> bool {
        matches!(self, Operation::Update { .. })
    }
}

/// Ground truth for one step.
///
/// Update steps: `relevance` is the latest-version root-to-leaf path
/// (root first), `persist` the entities on it and `node_values` the values
/// of their copies after the update. Query steps: `relevance` is the
/// canonical cover at snapshot `s` and `answer` the range minimum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSupervision {
    pub relevance: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub persist: Vec<EntityId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub node_values: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    pub schema_version: u32,
    pub initial_array: Vec<u8>,
    pub ops: Vec<Operation>,
    pub supervision: Vec<StepSupervision>,
}

impl Rollout {
    /// Builds a rollout from explicit operations, validating them and
    /// recording all ground truth.
    pub fn from_ops(initial_array: Vec<u8>, ops: Vec<Operation>) -> Result<Self> {
        let mut tree = VersionedTree::build(&initial_array)?;
        let mut supervision = Vec::with_capacity(ops.len());
        for op in &ops {
            supervision.push(apply_op(&mut tree, op)?);
        }
        Ok(Rollout {
            schema_version: SCHEMA_VERSION,
            initial_array,
            ops,
            supervision,
        })
    }

    pub fn array_len(&self) -> usize {
        self.initial_array.len()
    }

    pub fn update_count(&self) -> usize {
        self.ops.iter().filter(|op| op.is_update()).count()
    }

    /// Replays all operations and returns the final tree.
    pub fn replay(&self) -> Result<VersionedTree> {
        let mut tree = VersionedTree::build(&self.initial_array)?;
        for op in &self.ops {
            if let Operation::Update { k, x } = *op {
                tree.update(k, x)?;
            }
        }
        Ok(tree)
    }
}

fn apply_op(tree: &mut VersionedTree, op: &Operation) -> Result<StepSupervision> {
    match *op {
        Operation::Update { k, x } => {
            let relevance = tree.update_path(k)?;
            let persist = relevance.iter().map(|&id| tree.node(id).entity).collect();
            tree.update(k, x)?;
            let node_values = tree
                .update_path(k)?
                .iter()
                .map(|&id| tree.node(id).value)
                .collect();
            Ok(StepSupervision {
                relevance,
                persist,
                node_values,
                answer: None,
            })
        }
        Operation::Query { a, b, s } => {
            let relevance = tree.canonical_cover(s, a, b)?;
            let answer = relevance.iter().map(|&id| tree.node(id).value).min();
            Ok(StepSupervision {
                relevance,
                persist: Vec::new(),
                node_values: Vec::new(),
                answer,
            })
        }
    }
}

/// Two-stage value sampler: a lower bound uniform in `[1, 15]`, then a value
/// uniform between it and 15.
pub fn sample_value<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    let lo = rng.gen_range(MIN_VALUE..=MAX_VALUE);
    rng.gen_range(lo..=MAX_VALUE)
}

/// Samples one lower bound for the whole array, then every element uniformly
/// in `[lower, 15]`.
pub fn sample_array<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<u8> {
    let lo = rng.gen_range(MIN_VALUE..=MAX_VALUE);
    (0..len).map(|_| rng.gen_range(lo..=MAX_VALUE)).collect()
}

/// Uniform over all pairs `0 <= a <= b < len`.
fn sample_range<R: Rng + ?Sized>(len: usize, rng: &mut R) -> (usize, usize) {
    let pairs = len * (len + 1) / 2;
    let mut idx = rng.gen_range(0..pairs);
    for a in 0..len {
        let span = len - a;
        if idx < span {
            return (a, a + idx);
        }
        idx -= span;
    }
    unreachable!()
}

pub fn sample_rollout<R: Rng + ?Sized>(
    len: usize,
    updates: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if len == 0 {
        return Err(invalid!("array size must be at least 1"));
    }
    let initial_array = sample_array(len, rng);
    let mut ops = Vec::with_capacity(updates + queries);
    for _ in 0..updates {
        let k = rng.gen_range(0..len);
        let x = sample_value(rng);
        ops.push(Operation::Update { k, x });
    }
    for _ in 0..queries {
        let (a, b) = sample_range(len, rng);
        let s = rng.gen_range(0..=updates);
        ops.push(Operation::Query { a, b, s });
    }
    Rollout::from_ops(initial_array, ops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub array_len: usize,
    pub updates: usize,
    pub queries: usize,
    pub count: usize,
}

impl DatasetSpec {
    /// The training regime: K=5, 5 updates, 5 queries.
    pub fn in_distribution(seed: u64, count: usize) -> Self {
        DatasetSpec { seed, array_len: 5, updates: 5, queries: 5, count }
    }

    /// Twice the array size and twice the updates.
    pub fn out_of_distribution(seed: u64, count: usize) -> Self {
        DatasetSpec { seed, array_len: 10, updates: 10, queries: 5, count }
    }
}

/// Rollout `i` draws from its own ChaCha stream, so any subset can be
/// regenerated independently.
pub fn rollout_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<Rollout>> {
    (0..spec.count)
        .map(|i| {
            let mut rng = rollout_rng(spec.seed, i);
            sample_rollout(spec.array_len, spec.updates, spec.queries, &mut rng)
        })
        .collect()
}

fn to_line(r: &Rollout) -> Result<String> {
    serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))
}

pub fn write_dataset(rollouts: &[Rollout], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rollouts {
        writeln!(w, "{}", to_line(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// SHA-256 of the dataset as [`write_dataset`] would write it, in hex.
pub fn fingerprint(rollouts: &[Rollout]) -> Result<String> {
    let mut hasher = Sha256::new();
    for r in rollouts {
        hasher.update(to_line(r)?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Short description like `K5-U5-Q5`, taken from the first rollout.
pub fn describe(rollouts: &[Rollout]) -> String {
    match rollouts.first() {
        Some(r) => format!(
            "K{}-U{}-Q{}",
            r.array_len(),
            r.update_count(),
            r.ops.len() - r.update_count()
        ),
        None => "empty".to_string(),
    }
}

#[derive(Deserialize)]
struct SchemaProbe {
    schema_version: u32,
}

pub fn read_dataset(path: &Path) -> Result<Vec<Rollout>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let probe: SchemaProbe =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if probe.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION,
                found: probe.schema_version,
            });
        }
        let rollout: Rollout = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(rollout);
    }
    Ok(out)
}

/// Per-entity operation features (`n x 10`), before expansion to states.
pub fn entity_features(shape: &TreeShape, op: &Operation) -> Matrix {
    let mut feats = structural_features(shape);
    match *op {
        Operation::Update { k, x } => {
            feats[(shape.leaf_of_index[k], CH_UPDATE_TARGET)] = 1.0;
            let bits = value_bits(x);
            for e in 0..shape.len() {
                feats.row_mut(e)[CH_VALUE..CH_VALUE + VALUE_BITS].copy_from_slice(&bits);
            }
        }
        Operation::Query { a, b, .. } => {
            feats[(shape.leaf_of_index[a], CH_QUERY_LO)] = 1.0;
            feats[(shape.leaf_of_index[b], CH_QUERY_HI)] = 1.0;
        }
    }
    feats
}

/// Channels that are present on every step: leaf and left/right-child flags.
pub fn structural_features(shape: &TreeShape) -> Matrix {
    let mut feats = Matrix::zeros(shape.len(), FEATURE_DIM);
    for e in 0..shape.len() {
        let row = feats.row_mut(e);
        if shape.is_leaf(e) {
            row[CH_IS_LEAF] = 1.0;
        }
        match shape.side[e] {
            Side::Left => row[CH_LEFT_CHILD] = 1.0,
            Side::Right => row[CH_RIGHT_CHILD] = 1.0,
            Side::Root => {}
        }
    }
    feats
}

/// Structural channels plus each entity's own value in the value channels.
/// Describes a whole snapshot rather than an operation.
pub fn snapshot_features(shape: &TreeShape, values: &[u8]) -> Matrix {
    let mut feats = structural_features(shape);
    for (e, &v) in values.iter().enumerate() {
        feats.row_mut(e)[CH_VALUE..CH_VALUE + VALUE_BITS].copy_from_slice(&value_bits(v));
    }
    feats
}

/// Broadcasts entity rows to hidden states: row `j` of the output is the
/// feature row of `lineage[j]`.
pub fn expand(features: &Matrix, lineage: &[EntityId]) -> Result<Matrix> {
    let mut out = Matrix::zeros(lineage.len(), features.cols());
    for (j, &e) in lineage.iter().enumerate() {
        if e >= features.rows() {
            return Err(Error::Internal(format!(
                "state {j} maps to unknown entity {e} ({} entities)",
                features.rows()
            )));
        }
        out.row_mut(j).copy_from_slice(features.row(e));
    }
    Ok(out)
}

/// Operation features for every hidden state.
pub fn encode_operation(shape: &TreeShape, op: &Operation, lineage: &[EntityId]) -> Result<Matrix> {
    expand(&entity_features(shape, op), lineage)
}
