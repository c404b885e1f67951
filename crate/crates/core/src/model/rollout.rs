//! One rollout of a model over a rollout's operations.
//!
//! Every step runs encode, process, the relevance and persistency heads,
//! the readout or node-value decoder and finally the memory update. The
//! whole rollout is recorded on one [`Tape`] so gradients flow through the
//! stored states into earlier steps.

use std::collections::HashMap;

use super::store::{persist, AdjacencyPair, HiddenStateStore, StateId};
use super::trace::{LossBreakdown, RolloutTrace, StepRecord};
use super::{Affine, Mode, ModelKind, ModelParams, Processor, TIME_FEATURES};
use crate::dataset::{
    bits_to_value, encode_operation, snapshot_features, value_bits, Operation, Rollout,
    StepSupervision, CH_QUERY_HI, CH_QUERY_LO, VALUE_BITS,
};
use crate::diff::{masked_neighbor_max, Adjacency, Matrix, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::pst::{EntityId, TreeShape, VersionedTree};

/// Entity-level ground truth for one step.
///
/// Relevant states are the copies of `entities` that are current at
/// `version_step`; on update steps those same states persist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTruth {
    pub is_update: bool,
    pub entities: Vec<EntityId>,
    pub version_step: usize,
    pub answer: Option<u8>,
    pub node_values: HashMap<EntityId, u8>,
}

impl StepTruth {
    pub fn new(
        shape: &TreeShape,
        op: &Operation,
        sup: &StepSupervision,
        version_steps: &[usize],
        step: usize,
    ) -> Result<Self> {
        match *op {
            Operation::Update { k, .. } => {
                let entities = shape.path_to_index(k);
                if sup.node_values.len() != entities.len() {
                    return Err(invalid!(
                        "step {step}: {} node values for a path of {}",
                        sup.node_values.len(),
                        entities.len()
                    ));
                }
                let node_values = entities.iter().copied().zip(sup.node_values.iter().copied()).collect();
                Ok(StepTruth {
                    is_update: true,
                    entities,
                    version_step: step - 1,
                    answer: None,
                    node_values,
                })
            }
            Operation::Query { a, b, s } => {
                let version_step = *version_steps
                    .get(s)
                    .ok_or_else(|| invalid!("step {step}: snapshot {s} does not exist yet"))?;
                Ok(StepTruth {
                    is_update: false,
                    entities: shape.cover_entities(a, b),
                    version_step,
                    answer: Some(sup.answer.ok_or_else(|| invalid!("query step {step} lacks an answer"))?),
                    node_values: HashMap::new(),
                })
            }
        }
    }

    /// Per-state ground-truth relevance over the given store.
    pub fn relevance_mask(&self, store: &HiddenStateStore, entities: usize) -> Vec<bool> {
        let current = store.current_states(entities, self.version_step);
        let mut mask = vec![false; store.len()];
        for &e in &self.entities {
            if let Some(j) = current[e] {
                mask[j] = true;
            }
        }
        mask
    }
}

#[derive(Default)]
struct LossAcc {
    answer: (Vec<Var>, usize),
    relevance: (Vec<Var>, usize),
    persistency: (Vec<Var>, usize),
    node_value: (Vec<Var>, usize),
}

impl LossAcc {
    fn finish(&self, tape: &mut Tape<'_>) -> Result<(Option<Var>, LossBreakdown)> {
        let mut terms = Vec::new();
        let mut parts = [0.0; 4];
        for (i, (vars, count)) in [&self.answer, &self.relevance, &self.persistency, &self.node_value]
            .into_iter()
            .enumerate()
        {
            if *count == 0 {
                continue;
            }
            let w = 1.0 / *count as f64;
            for &v in vars {
                terms.push((v, w));
                parts[i] += w * tape.scalar(v);
            }
        }
        let breakdown = LossBreakdown {
            answer_bce: parts[0],
            relevance_bce: parts[1],
            persistency_bce: parts[2],
            node_value_bce: parts[3],
        };
        if terms.is_empty() {
            return Ok((None, breakdown));
        }
        Ok((Some(tape.weighted_sum(&terms)?), breakdown))
    }
}

fn affine(tape: &mut Tape<'_>, x: Var, a: Affine) -> Result<Var> {
    tape.affine(x, a.w, Some(a.b))
}

/// `rounds` rounds of `x <- U(x, max_k M(x_k, x))` over `adj`.
pub(crate) fn process(
    tape: &mut Tape<'_>,
    x: Var,
    adj: &Adjacency,
    proc: &Processor,
    rounds: usize,
) -> Result<Var> {
    let mut x = x;
    for _ in 0..rounds {
        let m = masked_neighbor_max(tape, x, adj, &proc.msg)?;
        let joined = tape.concat_cols(x, m)?;
        let pre = affine(tape, joined, proc.update)?;
        x = tape.relu(pre);
    }
    Ok(x)
}

pub(crate) fn process_with(
    model: &ModelParams,
    tape: &mut Tape<'_>,
    x: Var,
    adj: &Adjacency,
    proc: Processor,
) -> Result<Var> {
    process(tape, x, adj, &proc, model.config.rounds)
}

fn bits_targets(value: u8) -> [f64; VALUE_BITS] {
    value_bits(value)
}

fn decode_bits(logits: &[f64]) -> u8 {
    let bits: Vec<bool> = logits.iter().map(|&l| l > 0.0).collect();
    bits_to_value(&bits)
}

fn set_of(mask: &[bool]) -> Vec<StateId> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect()
}

/// The model's memory during one rollout.
pub struct RolloutState {
    pub shape: TreeShape,
    pub store: HiddenStateStore,
    pub adjacency: AdjacencyPair,
    /// Tape mirror of `store.h`.
    h: Option<Var>,
    /// Steps taken so far.
    pub t: usize,
    /// `version_steps[v]` is the step that created version `v`.
    pub version_steps: Vec<usize>,
    failure: Option<String>,
}

impl RolloutState {
    /// Encodes the initial snapshot into the starting states. The oracle
    /// carries no memory and skips the encoding.
    pub(crate) fn new(model: &ModelParams, tape: &mut Tape<'_>, tree: &VersionedTree, acc: &mut LossSink) -> Result<Self> {
        let shape = tree.shape();
        let n = shape.len();
        let mut state = RolloutState {
            store: HiddenStateStore::new(n, model.config.hidden),
            adjacency: AdjacencyPair::from_shape(&shape),
            shape,
            h: None,
            t: 0,
            version_steps: vec![0],
            failure: None,
        };
        if model.kind == ModelKind::Oracle {
            return Ok(state);
        }
        let values: Vec<u8> = tree
            .entity_nodes(0)?
            .iter()
            .map(|&id| tree.node(id).value)
            .collect();
        let x = tape.constant(snapshot_features(&state.shape, &values));
        let h0 = tape.constant(state.store.h.clone());
        let joined = tape.concat_cols(x, h0)?;
        let z = affine(tape, joined, model.ids.enc_operation)?;
        let h_hat = process_with(model, tape, z, &state.adjacency.connectivity(), model.ids.proc_connectivity)?;
        let logits = affine(tape, h_hat, model.ids.node_decoder)?;
        let targets: Vec<f64> = values.iter().flat_map(|&v| bits_targets(v)).collect();
        let l = tape.bce_sum(logits, &targets)?;
        acc.0.node_value.0.push(l);
        acc.0.node_value.1 += targets.len();
        state.store.h = tape.value(h_hat).clone();
        state.h = Some(h_hat);
        Ok(state)
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    fn time_features(&self, model: &ModelParams, t: usize, s_step: usize) -> Matrix {
        let n = self.store.len();
        let norm = model.config.t_max;
        let mut m = Matrix::zeros(n, TIME_FEATURES);
        for j in 0..n {
            let ts = self.store.time_stamp[j];
            let row = m.row_mut(j);
            row[0] = ts as f64 / norm;
            row[1] = t as f64 / norm;
            row[2] = s_step as f64 / norm;
            row[3] = f64::from(u8::from(ts <= s_step));
        }
        m
    }

    /// Runs one operation. `truth` drives structure in teacher-forced mode
    /// and is only used for scoring in free mode.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step(
        &mut self,
        model: &ModelParams,
        tape: &mut Tape<'_>,
        op: &Operation,
        truth: &StepTruth,
        mode: Mode,
        acc: &mut LossSink,
        trace: &mut RolloutTrace,
    ) -> Result<StepRecord> {
        self.t += 1;
        let t = self.t;
        if truth.is_update {
            self.version_steps.push(t);
        }
        let n_before = self.store.len();
        let mut record = StepRecord {
            step: t,
            kind: if truth.is_update { "update" } else { "query" }.to_string(),
            states_before: n_before,
            states_after: n_before,
            relevance_pred: Vec::new(),
            relevance_truth: Vec::new(),
            persist_pred: Vec::new(),
            persist_truth: Vec::new(),
            answer_pred: None,
            answer_truth: truth.answer,
            bits_correct: None,
            error: None,
        };
        if let Some(f) = &self.failure {
            record.error = Some(format!("rollout aborted earlier: {f}"));
            if !truth.is_update {
                record.bits_correct = Some(0);
            }
            return Ok(record);
        }
        let result = if model.kind == ModelKind::Oracle {
            self.oracle_step(model, tape, op, truth, acc, &mut record)
        } else {
            self.memory_step(model, tape, op, truth, mode, acc, trace, &mut record)
        };
        if let Err(e) = result {
            if mode == Mode::TeacherForced {
                return Err(e);
            }
            record.error = Some(e.to_string());
            if !truth.is_update && record.answer_pred.is_none() {
                record.bits_correct = Some(0);
            }
            if !matches!(e, Error::NoRelevantState) {
                self.failure = Some(e.to_string());
            }
        }
        record.states_after = self.store.len();
        Ok(record)
    }

    #[allow(clippy::too_many_arguments)]
    fn memory_step(
        &mut self,
        model: &ModelParams,
        tape: &mut Tape<'_>,
        op: &Operation,
        truth: &StepTruth,
        mode: Mode,
        acc: &mut LossSink,
        trace: &mut RolloutTrace,
        record: &mut StepRecord,
    ) -> Result<()> {
        let acc = &mut acc.0;
        let n = self.store.len();
        let entities = self.shape.len();
        let ids = &model.ids;
        let h = self.h.expect("memory models encode the initial snapshot");

        // encode
        let x = tape.constant(encode_operation(&self.shape, op, &self.store.entity)?);
        let joined = tape.concat_cols(x, h)?;
        let z = affine(tape, joined, ids.enc_operation)?;

        // process
        let h_hat = process_with(model, tape, z, &self.adjacency.connectivity(), ids.proc_connectivity)?;
        let rel_in = match (ids.enc_relevance, ids.proc_relevance) {
            (Some(enc), Some(proc)) => {
                let time = tape.constant(self.time_features(model, self.t, truth.version_step));
                let joined = tape.concat_cols(time, h)?;
                let v = affine(tape, joined, enc)?;
                let g = process_with(model, tape, v, &self.adjacency.relevance(), proc)?;
                tape.concat_cols(g, h_hat)?
            }
            _ => h_hat,
        };

        // relevance
        let rel_logits = affine(tape, rel_in, ids.head_relevance)?;
        let mu_truth = truth.relevance_mask(&self.store, entities);
        let mu_pred: Vec<bool> = tape.value(rel_logits).as_slice().iter().map(|&l| l > 0.0).collect();
        let targets: Vec<f64> = mu_truth.iter().map(|&m| f64::from(u8::from(m))).collect();
        let l = tape.bce_sum(rel_logits, &targets)?;
        acc.relevance.0.push(l);
        acc.relevance.1 += n;
        for j in 0..n {
            trace.relevance.record(mu_pred[j], mu_truth[j]);
        }
        record.relevance_pred = set_of(&mu_pred);
        record.relevance_truth = set_of(&mu_truth);
        let mu = match mode {
            Mode::TeacherForced => mu_truth.clone(),
            Mode::Free => mu_pred,
        };

        // persistency (only models that gate their memory)
        let phi_truth: Vec<bool> = mu_truth.iter().map(|&m| m && truth.is_update).collect();
        let phi = if model.kind == ModelKind::Overwrite {
            vec![true; n]
        } else {
            let scale: Vec<f64> = mu.iter().map(|&m| f64::from(u8::from(m))).collect();
            let gated = tape.scale_rows(h_hat, &scale)?;
            let logits = affine(tape, gated, ids.head_persistency)?;
            let relevant = set_of(&mu_truth);
            if !relevant.is_empty() {
                let sel = tape.gather_rows(logits, &relevant);
                let tgt = vec![f64::from(u8::from(truth.is_update)); relevant.len()];
                let l = tape.bce_sum(sel, &tgt)?;
                acc.persistency.0.push(l);
                acc.persistency.1 += relevant.len();
            }
            let phi_pred: Vec<bool> = tape
                .value(logits)
                .as_slice()
                .iter()
                .zip(&mu)
                .map(|(&l, &m)| m && l > 0.0)
                .collect();
            for j in 0..n {
                if mu_truth[j] {
                    trace.persistency.record(phi_pred[j], phi_truth[j]);
                }
                trace.persistency_all.record(phi_pred[j], phi_truth[j]);
            }
            record.persist_pred = set_of(&phi_pred);
            record.persist_truth = set_of(&phi_truth);
            match mode {
                Mode::TeacherForced => phi_truth.clone(),
                Mode::Free => phi_pred,
            }
        };

        // readout or node values
        if let Some(answer) = truth.answer {
            let relevant = set_of(&mu);
            if relevant.is_empty() {
                return Err(Error::NoRelevantState);
            }
            let zmax = tape.rows_max(z, &relevant)?;
            let hmax = tape.rows_max(h_hat, &relevant)?;
            let joined = tape.concat_cols(zmax, hmax)?;
            let y = affine(tape, joined, ids.readout)?;
            let l = tape.bce_sum(y, &bits_targets(answer))?;
            acc.answer.0.push(l);
            acc.answer.1 += VALUE_BITS;
            score_answer(record, tape.value(y).as_slice(), answer);
        } else if mode == Mode::TeacherForced {
            // the copies being made carry the new node values
            let written: Vec<StateId> = if model.kind == ModelKind::Overwrite {
                set_of(&mu_truth)
            } else {
                set_of(&phi)
            };
            if !written.is_empty() {
                let rows = tape.gather_rows(h_hat, &written);
                let logits = affine(tape, rows, ids.node_decoder)?;
                let mut targets = Vec::with_capacity(written.len() * VALUE_BITS);
                for &j in &written {
                    let e = self.store.entity[j];
                    let v = truth.node_values.get(&e).ok_or_else(|| {
                        Error::Internal(format!("no node value for entity {e} at step {}", record.step))
                    })?;
                    targets.extend_from_slice(&bits_targets(*v));
                }
                let l = tape.bce_sum(logits, &targets)?;
                acc.node_value.0.push(l);
                acc.node_value.1 += targets.len();
            }
        }

        // memory update
        let h_hat_value = tape.value(h_hat).clone();
        match model.kind {
            ModelKind::Pmp => {
                let added = persist(&mut self.store, &mut self.adjacency, &h_hat_value, &phi, self.t)?;
                if !added.is_empty() {
                    let chosen = set_of(&phi);
                    let rows = tape.gather_rows(h_hat, &chosen);
                    self.h = Some(tape.vstack(h, rows)?);
                }
            }
            ModelKind::Overwrite => {
                self.store.h = h_hat_value;
                self.h = Some(h_hat);
            }
            ModelKind::Selective => {
                if phi.iter().any(|&p| p) {
                    let both = tape.vstack(h, h_hat)?;
                    let idx: Vec<usize> = (0..n).map(|j| if phi[j] { n + j } else { j }).collect();
                    let merged = tape.gather_rows(both, &idx);
                    self.store.h = tape.value(merged).clone();
                    self.h = Some(merged);
                }
            }
            ModelKind::Oracle => unreachable!(),
        }
        Ok(())
    }

    fn oracle_step(
        &mut self,
        model: &ModelParams,
        tape: &mut Tape<'_>,
        op: &Operation,
        truth: &StepTruth,
        acc: &mut LossSink,
        record: &mut StepRecord,
    ) -> Result<()> {
        let Operation::Query { a, b, .. } = *op else {
            return Ok(());
        };
        let answer = truth.answer.expect("query truth carries an answer");
        let values = acc
            .1
            .as_ref()
            .and_then(|snaps| snaps.get(truth.version_step))
            .ok_or_else(|| Error::Internal("oracle needs the snapshot values".into()))?
            .clone();
        let mut feats = snapshot_features(&self.shape, &values);
        feats[(self.shape.leaf_of_index[a], CH_QUERY_LO)] = 1.0;
        feats[(self.shape.leaf_of_index[b], CH_QUERY_HI)] = 1.0;
        let x = tape.constant(feats);
        let h0 = tape.constant(Matrix::zeros(self.shape.len(), model.config.hidden));
        let joined = tape.concat_cols(x, h0)?;
        let z = affine(tape, joined, model.ids.enc_operation)?;
        let h_hat = process_with(model, tape, z, &self.adjacency.connectivity(), model.ids.proc_connectivity)?;
        let cover = &truth.entities;
        let zmax = tape.rows_max(z, cover)?;
        let hmax = tape.rows_max(h_hat, cover)?;
        let joined = tape.concat_cols(zmax, hmax)?;
        let y = affine(tape, joined, model.ids.readout)?;
        let l = tape.bce_sum(y, &bits_targets(answer))?;
        acc.0.answer.0.push(l);
        acc.0.answer.1 += VALUE_BITS;
        record.relevance_pred = cover.clone();
        record.relevance_truth = cover.clone();
        score_answer(record, tape.value(y).as_slice(), answer);
        Ok(())
    }
}

fn score_answer(record: &mut StepRecord, logits: &[f64], answer: u8) {
    let pred = decode_bits(logits);
    let want = value_bits(answer);
    let correct = logits
        .iter()
        .zip(want)
        .filter(|(&l, w)| (l > 0.0) == (*w > 0.5))
        .count();
    record.answer_pred = Some(pred);
    record.bits_correct = Some(correct as u8);
}

/// Loss terms collected during a rollout, plus the per-step snapshot values
/// the oracle reads (indexed by step).
pub(crate) struct LossSink(LossAcc, Option<Vec<Vec<u8>>>);

/// Result of running a model over one rollout.
pub struct RolloutRun {
    pub trace: RolloutTrace,
    pub loss: Option<Var>,
    pub state: RolloutState,
}

/// Entity values after every step, so a query can read the version it
/// targets without replaying.
fn snapshot_values(rollout: &Rollout) -> Result<Vec<Vec<u8>>> {
    let mut tree = VersionedTree::build(&rollout.initial_array)?;
    let values = |t: &VersionedTree| -> Result<Vec<u8>> {
        Ok(t.entity_nodes(t.latest_version())?
            .iter()
            .map(|&id| t.node(id).value)
            .collect())
    };
    let mut snaps = Vec::with_capacity(rollout.ops.len() + 1);
    snaps.push(values(&tree)?);
    for op in &rollout.ops {
        if let Operation::Update { k, x } = *op {
            tree.update(k, x)?;
        }
        snaps.push(values(&tree)?);
    }
    Ok(snaps)
}

/// A rollout driven one operation at a time, for inspecting the memory
/// between steps. [`run_rollout`] is this loop run to the end.
pub struct RolloutSession<'r> {
    model: &'r ModelParams,
    rollout: &'r Rollout,
    mode: Mode,
    state: RolloutState,
    sink: LossSink,
    trace: RolloutTrace,
}

impl<'r> RolloutSession<'r> {
    pub fn start(model: &'r ModelParams, tape: &mut Tape<'_>, rollout: &'r Rollout, mode: Mode) -> Result<Self> {
        if rollout.ops.len() != rollout.supervision.len() {
            return Err(invalid!(
                "rollout has {} ops but {} supervision records",
                rollout.ops.len(),
                rollout.supervision.len()
            ));
        }
        let tree = VersionedTree::build(&rollout.initial_array)?;
        let snapshots = match model.kind {
            ModelKind::Oracle => Some(snapshot_values(rollout)?),
            _ => None,
        };
        let mut sink = LossSink(LossAcc::default(), snapshots);
        let state = RolloutState::new(model, tape, &tree, &mut sink)?;
        Ok(RolloutSession {
            model,
            rollout,
            mode,
            state,
            sink,
            trace: RolloutTrace::default(),
        })
    }

    pub fn state(&self) -> &RolloutState {
        &self.state
    }

    pub fn trace(&self) -> &RolloutTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.state.t == self.rollout.ops.len()
    }

    /// Runs the next operation; `None` once every operation has run.
    pub fn step(&mut self, tape: &mut Tape<'_>) -> Result<Option<&StepRecord>> {
        let i = self.state.t;
        let (Some(op), Some(sup)) = (self.rollout.ops.get(i), self.rollout.supervision.get(i)) else {
            return Ok(None);
        };
        let truth = StepTruth::new(&self.state.shape, op, sup, &self.state.version_steps, i + 1)?;
        let record = self
            .state
            .step(self.model, tape, op, &truth, self.mode, &mut self.sink, &mut self.trace)?;
        self.trace.steps.push(record);
        Ok(self.trace.steps.last())
    }

    /// Runs any remaining operations and sums the loss.
    pub fn finish(mut self, tape: &mut Tape<'_>) -> Result<RolloutRun> {
        while self.step(tape)?.is_some() {}
        let (loss, breakdown) = self.sink.0.finish(tape)?;
        self.trace.loss = breakdown;
        self.trace.final_states = self.state.store.len();
        Ok(RolloutRun {
            trace: self.trace,
            loss,
            state: self.state,
        })
    }
}

/// Runs `model` over every operation of `rollout` on `tape`.
pub fn run_rollout(
    model: &ModelParams,
    tape: &mut Tape<'_>,
    rollout: &Rollout,
    mode: Mode,
) -> Result<RolloutRun> {
    RolloutSession::start(model, tape, rollout, mode)?.finish(tape)
}
