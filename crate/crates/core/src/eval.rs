//! Rollout evaluation, the JSONL report format and the cross-model
//! comparison table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{describe, fingerprint, Rollout, VALUE_BITS};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::model::{run_rollout, MaskCounts, Mode, ModelKind, ModelParams, RolloutTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub query_accuracy: f64,
}

/// Aggregate metrics of one model over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub mode: String,
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub rollouts: usize,
    pub queries: usize,
    /// Fraction of queries with all four bits right.
    pub query_accuracy: f64,
    pub bit_accuracy: f64,
    pub relevance_precision: Option<f64>,
    pub relevance_recall: Option<f64>,
    pub persistency_precision: Option<f64>,
    pub persistency_recall: Option<f64>,
    pub mean_final_states: f64,
    pub per_seed: Vec<SeedAccuracy>,
}

fn precision_recall(c: &MaskCounts) -> (Option<f64>, Option<f64>) {
    if c.total() == 0 {
        (None, None)
    } else {
        (Some(c.precision()), Some(c.recall()))
    }
}

/// Runs `params` over every rollout of `data`. Rollouts run in parallel;
/// traces come back in dataset order.
pub fn rollout_traces(params: &ModelParams, data: &[Rollout], mode: Mode) -> Result<Vec<RolloutTrace>> {
    data.par_iter()
        .map(|r| {
            let mut tape = Tape::new(&params.set);
            Ok(run_rollout(params, &mut tape, r, mode)?.trace)
        })
        .collect()
}

/// Scores a model. The oracle has no memory, so `mode` does not change its
/// results.
pub fn evaluate(params: &ModelParams, data: &[Rollout], mode: Mode) -> Result<EvalReport> {
    let traces = rollout_traces(params, data, mode)?;
    report_from_traces(params, data, mode, &traces)
}

pub fn report_from_traces(
    params: &ModelParams,
    data: &[Rollout],
    mode: Mode,
    traces: &[RolloutTrace],
) -> Result<EvalReport> {
    let mut queries = 0usize;
    let mut correct = 0usize;
    let mut bits = 0usize;
    let mut relevance = MaskCounts::default();
    let mut persistency = MaskCounts::default();
    let mut final_states = 0usize;
    for t in traces {
        for q in t.queries() {
            queries += 1;
            correct += usize::from(q.answer_correct());
            bits += usize::from(q.bits_correct.unwrap_or(0));
        }
        relevance.merge(&t.relevance);
        persistency.merge(&t.persistency_all);
        final_states += t.final_states;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let query_accuracy = ratio(correct, queries);
    let (relevance_precision, relevance_recall) = precision_recall(&relevance);
    let (persistency_precision, persistency_recall) = precision_recall(&persistency);
    Ok(EvalReport {
        model: params.kind.to_string(),
        seed: params.seed,
        mode: match mode {
            Mode::Free => "free",
            Mode::TeacherForced => "teacher_forced",
        }
        .to_string(),
        dataset: describe(data),
        dataset_fingerprint: fingerprint(data)?,
        rollouts: data.len(),
        queries,
        query_accuracy,
        bit_accuracy: ratio(bits, queries * VALUE_BITS),
        relevance_precision,
        relevance_recall,
        persistency_precision,
        persistency_recall,
        mean_final_states: ratio(final_states, traces.len()),
        per_seed: vec![SeedAccuracy {
            seed: params.seed,
            query_accuracy,
        }],
    })
}

/// Teacher-forced mask accuracies: relevance pooled over every state of
/// every step, persistency over the states that are truly relevant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskAccuracy {
    pub relevance: f64,
    pub persistency: Option<f64>,
}

pub fn mask_accuracy(params: &ModelParams, data: &[Rollout]) -> Result<MaskAccuracy> {
    let traces = rollout_traces(params, data, Mode::TeacherForced)?;
    let mut rel = MaskCounts::default();
    let mut per = MaskCounts::default();
    for t in &traces {
        rel.merge(&t.relevance);
        per.merge(&t.persistency);
    }
    Ok(MaskAccuracy {
        relevance: rel.accuracy(),
        persistency: (per.total() > 0).then(|| per.accuracy()),
    })
}

/// Appends reports as one JSON object per line.
pub fn write_reports(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub dataset: String,
    pub fingerprint: String,
    pub model: String,
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

/// Whether `pmp >= selective >= overwrite` holds on one dataset, among the
/// models present.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub dataset: String,
    pub fingerprint: String,
    pub order: Vec<String>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub ordering: Vec<OrderingCheck>,
}

impl Comparison {
    pub fn row(&self, fingerprint: &str, model: &str) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.fingerprint == fingerprint && r.model == model)
    }

    /// Mean accuracy of `a` minus that of `b` on one dataset.
    pub fn gap(&self, fingerprint: &str, a: &str, b: &str) -> Option<f64> {
        Some(self.row(fingerprint, a)?.mean - self.row(fingerprint, b)?.mean)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups reports by dataset and model and averages over seeds.
///
/// Every model must be evaluated on every dataset with the same seeds,
/// and no (model, dataset, seed) may repeat.
pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::InvalidComparison("no reports".into()));
    }
    // fingerprint -> model -> seed -> accuracy
    let mut groups: BTreeMap<&str, BTreeMap<&str, BTreeMap<u64, f64>>> = BTreeMap::new();
    let mut labels: BTreeMap<&str, &str> = BTreeMap::new();
    for r in reports {
        labels.insert(&r.dataset_fingerprint, &r.dataset);
        for s in &r.per_seed {
            let prev = groups
                .entry(&r.dataset_fingerprint)
                .or_default()
                .entry(&r.model)
                .or_default()
                .insert(s.seed, s.query_accuracy);
            if prev.is_some() {
                return Err(Error::InvalidComparison(format!(
                    "{} seed {} on {} reported twice",
                    r.model, s.seed, r.dataset
                )));
            }
        }
    }
    let models: BTreeSet<&str> = groups.values().flat_map(|m| m.keys().copied()).collect();
    let mut rows = Vec::new();
    let mut ordering = Vec::new();
    for (fp, by_model) in &groups {
        let label = labels[fp];
        if let Some(missing) = models.iter().find(|m| !by_model.contains_key(*m)) {
            return Err(Error::InvalidComparison(format!(
                "{missing} has no report on dataset {label} ({})",
                &fp[..12.min(fp.len())]
            )));
        }
        let mut seed_sets = by_model.values().map(|s| s.keys().copied().collect::<Vec<_>>());
        let first = seed_sets.next().unwrap_or_default();
        if seed_sets.any(|s| s != first) {
            return Err(Error::InvalidComparison(format!(
                "models on dataset {label} were evaluated with different seeds"
            )));
        }
        for (model, seeds) in by_model {
            let accs: Vec<f64> = seeds.values().copied().collect();
            let (mean, std) = mean_std(&accs);
            rows.push(ComparisonRow {
                dataset: label.to_string(),
                fingerprint: fp.to_string(),
                model: model.to_string(),
                seeds: seeds.keys().copied().collect(),
                mean,
                std,
            });
        }
        let order: Vec<String> = [ModelKind::Pmp, ModelKind::Selective, ModelKind::Overwrite]
            .iter()
            .map(|k| k.to_string())
            .filter(|k| by_model.contains_key(k.as_str()))
            .collect();
        let means: Vec<f64> = order
            .iter()
            .map(|m| mean_std(&by_model[m.as_str()].values().copied().collect::<Vec<_>>()).0)
            .collect();
        ordering.push(OrderingCheck {
            dataset: label.to_string(),
            fingerprint: fp.to_string(),
            holds: means.windows(2).all(|w| w[0] >= w[1]),
            order,
        });
    }
    Ok(Comparison { rows, ordering })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:<10} {:>6} {:>18}", "dataset", "model", "seeds", "query accuracy")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:<10} {:>6} {:>10.4} ± {:.4}",
                r.dataset,
                r.model,
                r.seeds.len(),
                r.mean,
                r.std
            )?;
        }
        for o in &self.ordering {
            if o.order.len() > 1 {
                let verdict = if o.holds { "holds" } else { "violated" };
                writeln!(f, "ordering {} on {}: {verdict}", o.order.join(" >= "), o.dataset)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(model: &str, fp: &str, seed: u64, acc: f64) -> EvalReport {
        EvalReport {
            model: model.into(),
            seed,
            mode: "free".into(),
            dataset: "K5-U5-Q5".into(),
            dataset_fingerprint: fp.into(),
            rollouts: 1,
            queries: 5,
            query_accuracy: acc,
            bit_accuracy: acc,
            relevance_precision: None,
            relevance_recall: None,
            persistency_precision: None,
            persistency_recall: None,
            mean_final_states: 9.0,
            per_seed: vec![SeedAccuracy { seed, query_accuracy: acc }],
        }
    }

    #[test]
    fn mean_and_ordering() {
        let reps = vec![
            report("pmp", "aa", 0, 0.9),
            report("pmp", "aa", 1, 0.7),
            report("overwrite", "aa", 0, 0.5),
            report("overwrite", "aa", 1, 0.5),
        ];
        let c = compare(&reps).unwrap();
        let pmp = c.row("aa", "pmp").unwrap();
        assert!((pmp.mean - 0.8).abs() < 1e-12);
        assert!((pmp.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(c.ordering[0].holds);
        assert!((c.gap("aa", "pmp", "overwrite").unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(c.gap("aa", "pmp", "pmp"), Some(0.0));
        assert!(c.to_string().contains("pmp >= overwrite on K5-U5-Q5: holds"));
    }

    #[test]
    fn mismatches_rejected() {
        let seeds = vec![report("pmp", "aa", 0, 0.9), report("overwrite", "aa", 1, 0.5)];
        assert!(matches!(compare(&seeds), Err(Error::InvalidComparison(_))));
        let datasets = vec![report("pmp", "aa", 0, 0.9), report("overwrite", "bb", 0, 0.5)];
        assert!(matches!(compare(&datasets), Err(Error::InvalidComparison(_))));
        let dup = vec![report("pmp", "aa", 0, 0.9), report("pmp", "aa", 0, 0.9)];
        assert!(matches!(compare(&dup), Err(Error::InvalidComparison(_))));
    }

    #[test]
    fn reports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let reps = vec![report("pmp", "aa", 0, 0.25), report("oracle", "aa", 0, 1.0)];
        write_reports(&reps, &path).unwrap();
        assert_eq!(read_reports(&path).unwrap(), reps);
    }
}
