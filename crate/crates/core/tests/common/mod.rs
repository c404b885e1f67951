#![allow(dead_code)]

use std::collections::BTreeSet;

use pmp::dataset::{generate, DatasetSpec, Operation, Rollout};
use pmp::diff::Tape;
use pmp::model::{run_rollout, Mode, ModelConfig, ModelKind, ModelParams, RolloutSession};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        rounds: 2,
        t_max: 10.0,
        shared_processor: true,
    }
}

/// The rollout with every query asked a second time at the end.
pub fn with_repeated_queries(r: &Rollout) -> Rollout {
    let mut ops = r.ops.clone();
    ops.extend(r.ops.iter().filter(|op| !op.is_update()).copied());
    Rollout::from_ops(r.initial_array.clone(), ops).unwrap()
}

/// Runs PMP teacher-forced over `rollout` and lists every way the memory
/// fails to mirror the oracle's versioned tree.
pub fn structural_violations(params: &ModelParams, rollout: &Rollout) -> Vec<String> {
    assert_eq!(params.kind, ModelKind::Pmp);
    let mut bad = Vec::new();
    let tree = rollout.replay().unwrap();
    let n = tree.initial_node_count();
    let mut tape = Tape::new(&params.set);
    let mut session = RolloutSession::start(params, &mut tape, rollout, Mode::TeacherForced).unwrap();

    // append-only
    let mut prev = session.state().store.clone();
    while session.step(&mut tape).unwrap().is_some() {
        let store = &session.state().store;
        let m = prev.len();
        if store.len() < m
            || store.h.as_slice()[..prev.h.as_slice().len()] != *prev.h.as_slice()
            || store.time_stamp[..m] != prev.time_stamp[..]
            || store.entity[..m] != prev.entity[..]
            || store.parent_version[..m] != prev.parent_version[..]
        {
            bad.push(format!("step {}: existing states changed", session.state().t));
        }
        prev = store.clone();
    }

    // every version's tree is recoverable from the connectivity edges
    let state = session.state();
    let store = &state.store;
    for v in 0..tree.version_count() {
        let step = state.version_steps[v];
        let nodes = tree.entity_nodes(v).unwrap();
        let current: Vec<usize> = match store.current_states(n, step).into_iter().collect() {
            Some(c) => c,
            None => {
                bad.push(format!("version {v}: an entity has no current state"));
                continue;
            }
        };
        for e in 0..n {
            let created = state.version_steps[tree.node(nodes[e]).version];
            if store.time_stamp[current[e]] != created {
                bad.push(format!("version {v}: entity {e} maps to a state from step {}", store.time_stamp[current[e]]));
            }
        }
        let tree = &tree;
        let want: BTreeSet<(usize, usize)> = nodes
            .iter()
            .flat_map(|&id| {
                let node = tree.node(id);
                [node.left, node.right]
                    .into_iter()
                    .flatten()
                    .map(move |c| ordered(node.entity, tree.node(c).entity))
            })
            .collect();
        let got: BTreeSet<(usize, usize)> = state
            .adjacency
            .induced_edges(&current)
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| ordered(store.entity[a], store.entity[b]))
            .collect();
        if got != want {
            bad.push(format!("version {v}: edges {got:?}, tree has {want:?}"));
        }
    }

    // identical queries select identical states, which hold the cover
    let trace = session.trace();
    for (i, (op, rec)) in rollout.ops.iter().zip(&trace.steps).enumerate() {
        let Operation::Query { a, b, s } = *op else { continue };
        if !rec.persist_truth.is_empty() {
            bad.push(format!("step {}: a query persisted states", i + 1));
        }
        let cover: Vec<usize> = tree.canonical_cover(s, a, b).unwrap();
        let mut expect: Vec<usize> = cover
            .iter()
            .map(|&id| {
                let node = tree.node(id);
                (0..store.len())
                    .find(|&j| store.entity[j] == node.entity && store.time_stamp[j] == state.version_steps[node.version])
                    .unwrap()
            })
            .collect();
        expect.sort_unstable();
        if rec.relevance_truth != expect {
            bad.push(format!("step {}: relevant {:?}, cover states {expect:?}", i + 1, rec.relevance_truth));
        }
        for (later_op, later) in rollout.ops.iter().zip(&trace.steps).skip(i + 1) {
            if later_op == op && later.relevance_truth != rec.relevance_truth {
                bad.push(format!("query {op:?} selected different states at steps {} and {}", rec.step, later.step));
            }
        }
    }
    bad
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Mean node count after each update, over `rollouts`.
pub fn mean_growth(rollouts: &[Rollout]) -> Vec<f64> {
    let updates = rollouts[0].update_count();
    let mut sums = vec![0.0; updates];
    for r in rollouts {
        let mut tree = pmp::pst::VersionedTree::build(&r.initial_array).unwrap();
        let mut u = 0;
        for op in &r.ops {
            if let Operation::Update { k, x } = *op {
                tree.update(k, x).unwrap();
                sums[u] += tree.node_count() as f64;
                u += 1;
            }
        }
    }
    sums.iter().map(|s| s / rollouts.len() as f64).collect()
}

pub fn micro() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        rounds: 3,
        t_max: 10.0,
        shared_processor: true,
    }
}

pub fn loss(params: &ModelParams, rollout: &Rollout) -> f64 {
    let mut tape = Tape::new(&params.set);
    let run = run_rollout(params, &mut tape, rollout, Mode::TeacherForced).unwrap();
    tape.scalar(run.loss.unwrap())
}

/// Central differences on sampled coordinates. A coordinate whose two
/// one-sided slopes disagree sits on a relu or max switch and is skipped.
pub fn finite_difference_check(kind: ModelKind, seed: u64) -> (usize, usize, f64) {
    let rollout = &generate(&DatasetSpec::in_distribution(seed, 1)).unwrap()[0];
    let mut params = ModelParams::new(kind, micro(), seed);
    let grads = {
        let mut tape = Tape::new(&params.set);
        let run = run_rollout(&params, &mut tape, rollout, Mode::TeacherForced).unwrap();
        tape.backward(run.loss.unwrap())
    };
    let base = loss(&params, rollout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.set.ids().collect();
    let h = 1e-6;
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for &id in &ids {
        let len = params.set.get(id).as_slice().len();
        for _ in 0..len.min(6) {
            let k = rng.gen_range(0..len);
            let orig = params.set.get(id).as_slice()[k];
            params.set.get_mut(id).as_mut_slice()[k] = orig + h;
            let up = loss(&params, rollout);
            params.set.get_mut(id).as_mut_slice()[k] = orig - h;
            let down = loss(&params, rollout);
            params.set.get_mut(id).as_mut_slice()[k] = orig;
            let (right, left) = ((up - base) / h, (base - down) / h);
            if (right - left).abs() > 1e-5 * (1.0 + right.abs()) {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).as_slice()[k];
            let scale = analytic.abs().max(numeric.abs());
            // below 1e-5 the difference quotient is dominated by rounding
            let err = (analytic - numeric).abs() / scale.max(1e-5);
            if err > 1e-4 {
                eprintln!("{} [{k}]: analytic {analytic:e} numeric {numeric:e}", params.set.name(id));
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    (checked, skipped, worst)
}

