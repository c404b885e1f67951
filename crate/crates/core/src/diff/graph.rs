use super::params::ParamId;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Sparse adjacency in compressed-row form. Row `j` lists the nodes `j`
/// receives messages from, sorted ascending and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for row in rows {
            let mut r = row.clone();
            r.sort_unstable();
            r.dedup();
            neighbors.extend_from_slice(&r);
            offsets.push(neighbors.len());
        }
        Adjacency { offsets, neighbors }
    }

    /// Self-loops only.
    pub fn identity(n: usize) -> Self {
        Adjacency {
            offsets: (0..=n).collect(),
            neighbors: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn contains(&self, j: usize, k: usize) -> bool {
        self.neighbors(j).binary_search(&k).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Relabels nodes: node `j` becomes `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Adjacency {
        let mut rows = vec![Vec::new(); self.len()];
        for j in 0..self.len() {
            rows[perm[j]] = self.neighbors(j).iter().map(|&k| perm[k]).collect();
        }
        Adjacency::from_rows(&rows)
    }
}

/// Message function `M(z_src, z_dst) = relu(W_src z_src + W_dst z_dst + b)`,
/// i.e. one affine layer over the concatenated pair, stored as two blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageMap {
    pub src: ParamId,
    pub dst: ParamId,
    pub bias: ParamId,
}

/// For every node `j`, the elementwise max of `M(z_k, z_j)` over neighbours
/// `k` of `j`.
///
/// `relu` is monotone, so this equals `relu(max_k W_src z_k + W_dst z_j + b)`
/// and the per-edge messages never need to be materialised. Each output
/// channel's gradient flows to its argmax neighbour, lowest id on ties.
pub fn masked_neighbor_max(
    tape: &mut Tape<'_>,
    z: Var,
    adj: &Adjacency,
    msg: &MessageMap,
) -> Result<Var> {
    let src = tape.affine(z, msg.src, None)?;
    let pooled = tape.neighbor_max(src, adj)?;
    let dst = tape.affine(z, msg.dst, Some(msg.bias))?;
    let pre = tape.add(pooled, dst)?;
    Ok(tape.relu(pre))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Matrix, ParamSet};

    fn identity_map(params: &mut ParamSet, d: usize) -> MessageMap {
        let mut eye = Matrix::zeros(d, d);
        for i in 0..d {
            eye[(i, i)] = 1.0;
        }
        MessageMap {
            src: params.add("src", eye),
            dst: params.add("dst", Matrix::zeros(d, d)),
            bias: params.add("b", Matrix::zeros(1, d)),
        }
    }

    #[test]
    fn self_loop_only() {
        let mut params = ParamSet::new();
        let m = identity_map(&mut params, 2);
        let mut tape = Tape::new(&params);
        let z = tape.constant(Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let out = masked_neighbor_max(&mut tape, z, &Adjacency::identity(2), &m).unwrap();
        assert_eq!(tape.value(out), tape.value(z));
    }

    #[test]
    fn two_neighbours_elementwise_max() {
        let mut params = ParamSet::new();
        let m = identity_map(&mut params, 2);
        let mut tape = Tape::new(&params);
        let z = tape.constant(Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let adj = Adjacency::from_rows(&[vec![0, 1], vec![1]]);
        let out = masked_neighbor_max(&mut tape, z, &adj, &m).unwrap();
        assert_eq!(tape.value(out).row(0), &[3.0, 5.0]);
        assert_eq!(tape.value(out).row(1), &[3.0, 2.0]);
    }

    #[test]
    fn empty_neighbourhood_is_contract_error() {
        let mut params = ParamSet::new();
        let m = identity_map(&mut params, 2);
        let mut tape = Tape::new(&params);
        let z = tape.constant(Matrix::zeros(2, 2));
        let adj = Adjacency::from_rows(&[vec![0], vec![]]);
        assert!(matches!(
            masked_neighbor_max(&mut tape, z, &adj, &m),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn rows_are_sorted_and_deduplicated() {
        let adj = Adjacency::from_rows(&[vec![2, 0, 2], vec![1], vec![0, 2]]);
        assert_eq!(adj.neighbors(0), &[0, 2]);
        assert!(adj.contains(2, 0));
        assert!(!adj.contains(1, 0));
        let p = adj.permuted(&[2, 0, 1]);
        assert_eq!(p.neighbors(2), &[1, 2]);
    }
}
