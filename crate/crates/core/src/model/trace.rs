use serde::{Deserialize, Serialize};

use super::StateId;

/// Confusion counts for a binary mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl MaskCounts {
    pub fn record(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &MaskCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

/// `num / den`, or 1 when there is nothing to score.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean binary cross-entropy per supervised bit, per component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub answer_bce: f64,
    pub relevance_bce: f64,
    pub persistency_bce: f64,
    pub node_value_bce: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.answer_bce + self.relevance_bce + self.persistency_bce + self.node_value_bce
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.answer_bce += s * other.answer_bce;
        self.relevance_bce += s * other.relevance_bce;
        self.persistency_bce += s * other.persistency_bce;
        self.node_value_bce += s * other.node_value_bce;
    }
}

/// What happened at one step: masks predicted against ground truth, state
/// counts and the answer on query steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: String,
    pub states_before: usize,
    pub states_after: usize,
    pub relevance_pred: Vec<StateId>,
    pub relevance_truth: Vec<StateId>,
    pub persist_pred: Vec<StateId>,
    pub persist_truth: Vec<StateId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_pred: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_truth: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits_correct: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StepRecord {
    pub fn answer_correct(&self) -> bool {
        self.answer_truth.is_some() && self.answer_pred == self.answer_truth
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub steps: Vec<StepRecord>,
    pub final_states: usize,
    /// Connectivity/relevance confusion, scored per state; persistency is
    /// scored on the ground-truth-relevant states.
    pub relevance: MaskCounts,
    pub persistency: MaskCounts,
    pub persistency_all: MaskCounts,
    pub loss: LossBreakdown,
}

impl RolloutTrace {
    pub fn queries(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.answer_truth.is_some())
    }
}
