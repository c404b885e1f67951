use crate::diff::{Adjacency, Matrix};
use crate::error::{contract, Result};
use crate::pst::{EntityId, TreeShape};

pub type StateId = usize;

/// Append-only set of hidden states with their lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateStore {
    pub h: Matrix,
    pub time_stamp: Vec<usize>,
    pub entity: Vec<EntityId>,
    /// The state each copy was made from; `None` for the initial states.
    pub parent_version: Vec<Option<StateId>>,
}

impl HiddenStateStore {
    /// One zero state per entity, all stamped at time 0.
    pub fn new(entities: usize, hidden: usize) -> Self {
        HiddenStateStore {
            h: Matrix::zeros(entities, hidden),
            time_stamp: vec![0; entities],
            entity: (0..entities).collect(),
            parent_version: vec![None; entities],
        }
    }

    pub fn len(&self) -> usize {
        self.entity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity.is_empty()
    }

    /// For every entity, its latest state stamped at or before `step`.
    pub fn current_states(&self, entities: usize, step: usize) -> Vec<Option<StateId>> {
        let mut out = vec![None; entities];
        for j in 0..self.len() {
            if self.time_stamp[j] <= step {
                out[self.entity[j]] = Some(j);
            }
        }
        out
    }

    /// Per-state flag: `j` is its entity's latest state at or before `step`.
    pub fn current_mask(&self, entities: usize, step: usize) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for j in self.current_states(entities, step).into_iter().flatten() {
            mask[j] = true;
        }
        mask
    }
}

/// Connectivity (`pi`) and relevance (`lambda`) neighbour lists over states.
/// Both are symmetric and every state has a self-loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyPair {
    pub pi: Vec<Vec<StateId>>,
    pub lambda: Vec<Vec<StateId>>,
}

impl AdjacencyPair {
    /// Tree edges in both directions plus self-loops; relevance links start
    /// as self-loops only.
    pub fn from_shape(shape: &TreeShape) -> Self {
        let n = shape.len();
        let mut pi: Vec<Vec<StateId>> = (0..n).map(|j| vec![j]).collect();
        for (p, c) in shape.edges() {
            pi[p].push(c);
            pi[c].push(p);
        }
        for row in &mut pi {
            row.sort_unstable();
        }
        AdjacencyPair {
            pi,
            lambda: (0..n).map(|j| vec![j]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn connectivity(&self) -> Adjacency {
        Adjacency::from_rows(&self.pi)
    }

    pub fn relevance(&self) -> Adjacency {
        Adjacency::from_rows(&self.lambda)
    }

    /// Induced connectivity edges `(u, v)` with `u < v` among `states`.
    pub fn induced_edges(&self, states: &[StateId]) -> Vec<(StateId, StateId)> {
        let mut inside = vec![false; self.len()];
        for &s in states {
            inside[s] = true;
        }
        let mut out = Vec::new();
        for &u in states {
            for &v in &self.pi[u] {
                if u < v && inside[v] {
                    out.push((u, v));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Appends a copy of every state with `phi[j]` set, in ascending id order.
///
/// Each copy takes the candidate latent `h_hat[j]`, time stamp `step`, the
/// entity of `j` and `j` as its predecessor. Its connectivity row is `j`'s,
/// with edges toward other states copied in the same step redirected to
/// their copies; every neighbour gains the reverse edge. Its relevance row
/// links it to itself and to `j` (in both directions).
///
/// Returns the ids of the new states.
pub fn persist(
    store: &mut HiddenStateStore,
    adj: &mut AdjacencyPair,
    h_hat: &Matrix,
    phi: &[bool],
    step: usize,
) -> Result<Vec<StateId>> {
    let n = store.len();
    if phi.len() != n || h_hat.rows() != n || adj.len() != n {
        return Err(contract!(
            "persist: {} mask entries, {} candidates, {} adjacency rows for {n} states",
            phi.len(),
            h_hat.rows(),
            adj.len()
        ));
    }
    let chosen: Vec<StateId> = (0..n).filter(|&j| phi[j]).collect();
    let mut seen = std::collections::HashSet::new();
    for &j in &chosen {
        if !seen.insert(store.entity[j]) {
            return Err(contract!(
                "entity {} persisted twice in one step",
                store.entity[j]
            ));
        }
    }
    let mut copy_of = vec![None; n];
    for (i, &j) in chosen.iter().enumerate() {
        copy_of[j] = Some(n + i);
    }

    let new_rows = h_hat.select_rows(&chosen);
    store.h.append_rows(&new_rows);
    for &j in &chosen {
        store.time_stamp.push(step);
        store.entity.push(store.entity[j]);
        store.parent_version.push(Some(j));
    }

    for &j in &chosen {
        let new = copy_of[j].unwrap();
        let mut row: Vec<StateId> = adj.pi[j]
            .iter()
            .filter(|&&k| k != j)
            .map(|&k| copy_of[k].unwrap_or(k))
            .collect();
        row.push(new);
        row.sort_unstable();
        adj.pi.push(row);
        adj.lambda.push(vec![j, new]);
    }
    for &j in &chosen {
        let new = copy_of[j].unwrap();
        let nbrs: Vec<StateId> = adj.pi[new].iter().copied().filter(|&k| k < n).collect();
        for k in nbrs {
            adj.pi[k].push(new);
        }
        adj.lambda[j].push(new);
    }
    Ok((n..n + chosen.len()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pst::VersionedTree;

    fn setup() -> (VersionedTree, HiddenStateStore, AdjacencyPair) {
        let tree = VersionedTree::build(&[5, 2, 8, 1, 7]).unwrap();
        let store = HiddenStateStore::new(9, 3);
        let adj = AdjacencyPair::from_shape(&tree.shape());
        (tree, store, adj)
    }

    #[test]
    fn no_persistence_changes_nothing() {
        let (_, mut store, mut adj) = setup();
        let before = (store.clone(), adj.clone());
        let added = persist(&mut store, &mut adj, &Matrix::zeros(9, 3), &[false; 9], 1).unwrap();
        assert!(added.is_empty());
        assert_eq!((store, adj), before);
    }

    #[test]
    fn path_copy_rewires_root() {
        let (tree, mut store, mut adj) = setup();
        let path = tree.update_path(0).unwrap(); // [8, 4, 2, 0]
        let mut phi = vec![false; 9];
        for &j in &path {
            phi[j] = true;
        }
        let h_hat = Matrix::from_vec(9, 3, (0..27).map(f64::from).collect());
        let added = persist(&mut store, &mut adj, &h_hat, &phi, 1).unwrap();
        assert_eq!(added, vec![9, 10, 11, 12]);
        assert_eq!(store.len(), 13);
        // ascending id order: 0 -> 9, 2 -> 10, 4 -> 11, 8 -> 12
        assert_eq!(store.parent_version[12], Some(8));
        assert_eq!(store.entity[12], 8);
        assert_eq!(store.h.row(12), h_hat.row(8));
        // new root links to new [0,2] copy and the shared [3,4] node
        assert_eq!(adj.pi[12], vec![7, 11, 12]);
        assert!(adj.pi[7].contains(&12) && adj.pi[7].contains(&8));
        assert_eq!(adj.lambda[12], vec![8, 12]);
        assert!(adj.lambda[8].contains(&12));
    }

    #[test]
    fn duplicate_entity_rejected() {
        let (_, mut store, mut adj) = setup();
        let mut phi = vec![false; 9];
        phi[0] = true;
        persist(&mut store, &mut adj, &Matrix::zeros(9, 3), &phi, 1).unwrap();
        let mut phi = vec![false; 10];
        phi[0] = true;
        phi[9] = true;
        assert!(matches!(
            persist(&mut store, &mut adj, &Matrix::zeros(10, 3), &phi, 2),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn current_states_follow_time() {
        let (_, mut store, mut adj) = setup();
        let mut phi = vec![false; 9];
        phi[0] = true;
        persist(&mut store, &mut adj, &Matrix::zeros(9, 3), &phi, 3).unwrap();
        assert_eq!(store.current_states(9, 2)[0], Some(0));
        assert_eq!(store.current_states(9, 3)[0], Some(9));
        assert!(store.current_mask(9, 3)[9]);
        assert!(!store.current_mask(9, 3)[0]);
    }
}
