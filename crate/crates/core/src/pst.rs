//! Persistent segment tree over a small integer array.
//!
//! Every update copies the root-to-leaf path and shares every other subtree
//! with the previous version, so all historical versions stay queryable.
//! Node ids are dense and allocated in creation order: post-order during
//! [`VersionedTree::build`], leaf-first during [`VersionedTree::update`].
//!
//! Each node also records the *entity* it is a copy of: the id of the
//! version-0 node occupying the same tree position. The tree shape never
//! changes, so entity-level facts (ranges, parents, update paths, cover
//! membership) hold for every version.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const MIN_VALUE: u8 = 1;
pub const MAX_VALUE: u8 = 15;

pub type NodeId = usize;
pub type EntityId = usize;
pub type Version = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub left: Option<NodeId>,
    pub right: Option<NodeId>,
    pub value: u8,
    pub range_lo: usize,
    pub range_hi: usize,
    pub version: Version,
    pub entity: EntityId,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.left.is_none()
    }

    pub fn midpoint(&self) -> usize {
        (self.range_lo + self.range_hi) / 2
    }
}

/// Position of an entity relative to its parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Root,
    Left,
    Right,
}

/// Version-independent layout of the tree: one record per entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeShape {
    pub ranges: Vec<(usize, usize)>,
    pub parent: Vec<Option<EntityId>>,
    pub children: Vec<Option<(EntityId, EntityId)>>,
    pub side: Vec<Side>,
    /// Entity id of the leaf holding each array index.
    pub leaf_of_index: Vec<EntityId>,
    pub root: EntityId,
}

impl TreeShape {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn is_leaf(&self, entity: EntityId) -> bool {
        self.children[entity].is_none()
    }

    /// Root-first entity path to the leaf holding `index`.
    pub fn path_to_index(&self, index: usize) -> Vec<EntityId> {
        let mut path = vec![self.root];
        let mut cur = self.root;
        while let Some((l, r)) = self.children[cur] {
            cur = if index <= self.ranges[l].1 { l } else { r };
            path.push(cur);
        }
        path
    }

    /// Entities of the canonical cover of `[a, b]`, left to right.
    pub fn cover_entities(&self, a: usize, b: usize) -> Vec<EntityId> {
        let mut out = Vec::new();
        self.cover_rec(self.root, a, b, &mut out);
        out
    }

    fn cover_rec(&self, e: EntityId, a: usize, b: usize, out: &mut Vec<EntityId>) {
        let (lo, hi) = self.ranges[e];
        if hi < a || lo > b {
            return;
        }
        if a <= lo && hi <= b {
            out.push(e);
            return;
        }
        if let Some((l, r)) = self.children[e] {
            self.cover_rec(l, a, b, out);
            self.cover_rec(r, a, b, out);
        }
    }

    /// Tree edges (parent, child) between entities.
    pub fn edges(&self) -> Vec<(EntityId, EntityId)> {
        let mut out = Vec::new();
        for (e, c) in self.children.iter().enumerate() {
            if let Some((l, r)) = c {
                out.push((e, *l));
                out.push((e, *r));
            }
        }
        out
    }
}

/// Append-only node pool plus one root per version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedTree {
    nodes: Vec<TreeNode>,
    roots: Vec<NodeId>,
    len: usize,
}

fn check_value(value: u8) -> Result<()> {
    if !(MIN_VALUE..=MAX_VALUE).contains(&value) {
        return Err(invalid!(
            "value {value} outside [{MIN_VALUE}, {MAX_VALUE}]"
        ));
    }
    Ok(())
}

impl VersionedTree {
    pub fn build(array: &[u8]) -> Result<Self> {
        if array.is_empty() {
            return Err(invalid!("cannot build a segment tree over an empty array"));
        }
        for &v in array {
            check_value(v)?;
        }
        let mut tree = VersionedTree {
            nodes: Vec::with_capacity(2 * array.len() - 1),
            roots: Vec::new(),
            len: array.len(),
        };
        let root = tree.build_rec(array, 0, array.len() - 1);
        tree.roots.push(root);
        Ok(tree)
    }

    fn build_rec(&mut self, array: &[u8], lo: usize, hi: usize) -> NodeId {
        if lo == hi {
            return self.push(None, array[lo], lo, hi, 0, None);
        }
        let mid = (lo + hi) / 2;
        let l = self.build_rec(array, lo, mid);
        let r = self.build_rec(array, mid + 1, hi);
        let value = self.nodes[l].value.min(self.nodes[r].value);
        self.push(Some((l, r)), value, lo, hi, 0, None)
    }

    fn push(
        &mut self,
        children: Option<(NodeId, NodeId)>,
        value: u8,
        range_lo: usize,
        range_hi: usize,
        version: Version,
        entity: Option<EntityId>,
    ) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            left: children.map(|c| c.0),
            right: children.map(|c| c.1),
            value,
            range_lo,
            range_hi,
            version,
            entity: entity.unwrap_or(id),
        });
        id
    }

    /// Sets `array[index] = value` on the latest version and returns the new
    /// version id. The whole root-to-leaf path is copied even when the value
    /// does not change.
    pub fn update(&mut self, index: usize, value: u8) -> Result<Version> {
        self.check_index(index)?;
        check_value(value)?;
        let version = self.roots.len();
        let root = self.update_rec(self.latest_root(), index, value, version);
        self.roots.push(root);
        Ok(version)
    }

    fn update_rec(&mut self, node: NodeId, index: usize, value: u8, version: Version) -> NodeId {
        let old = self.nodes[node];
        if old.is_leaf() {
            return self.push(None, value, old.range_lo, old.range_hi, version, Some(old.entity));
        }
        let (mut l, mut r) = (old.left.unwrap(), old.right.unwrap());
        if index <= old.midpoint() {
            l = self.update_rec(l, index, value, version);
        } else {
            r = self.update_rec(r, index, value, version);
        }
        let v = self.nodes[l].value.min(self.nodes[r].value);
        self.push(Some((l, r)), v, old.range_lo, old.range_hi, version, Some(old.entity))
    }

    pub fn query_min(&self, version: Version, a: usize, b: usize) -> Result<u8> {
        let cover = self.canonical_cover(version, a, b)?;
        Ok(cover.iter().map(|&id| self.nodes[id].value).min().unwrap())
    }

    /// Minimal set of version-reachable nodes whose ranges partition `[a, b]`,
    /// in left-to-right order.
    pub fn canonical_cover(&self, version: Version, a: usize, b: usize) -> Result<Vec<NodeId>> {
        self.check_version(version)?;
        self.check_range(a, b)?;
        let mut out = Vec::new();
        self.cover_rec(self.roots[version], a, b, &mut out);
        Ok(out)
    }

    fn cover_rec(&self, id: NodeId, a: usize, b: usize, out: &mut Vec<NodeId>) {
        let node = &self.nodes[id];
        if node.range_hi < a || node.range_lo > b {
            return;
        }
        if a <= node.range_lo && node.range_hi <= b {
            out.push(id);
            return;
        }
        self.cover_rec(node.left.unwrap(), a, b, out);
        self.cover_rec(node.right.unwrap(), a, b, out);
    }

    /// Root-first node ids on the latest version's path to leaf `index`:
    /// exactly the nodes an update at `index` would copy.
    pub fn update_path(&self, index: usize) -> Result<Vec<NodeId>> {
        self.check_index(index)?;
        let mut path = Vec::new();
        let mut cur = self.latest_root();
        loop {
            path.push(cur);
            let node = &self.nodes[cur];
            match (node.left, node.right) {
                (Some(l), Some(r)) => cur = if index <= node.midpoint() { l } else { r },
                _ => break,
            }
        }
        Ok(path)
    }

    pub fn snapshot_array(&self, version: Version) -> Result<Vec<u8>> {
        self.check_version(version)?;
        let mut out = Vec::with_capacity(self.len);
        let mut stack = vec![self.roots[version]];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            match (node.left, node.right) {
                (Some(l), Some(r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                _ => out.push(node.value),
            }
        }
        Ok(out)
    }

    /// Node id representing each entity in `version`, indexed by entity.
    pub fn entity_nodes(&self, version: Version) -> Result<Vec<NodeId>> {
        self.check_version(version)?;
        let mut out = vec![usize::MAX; self.initial_node_count()];
        let mut stack = vec![self.roots[version]];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            out[node.entity] = id;
            if let (Some(l), Some(r)) = (node.left, node.right) {
                stack.push(l);
                stack.push(r);
            }
        }
        Ok(out)
    }

    pub fn shape(&self) -> TreeShape {
        let n = self.initial_node_count();
        let mut shape = TreeShape {
            ranges: Vec::with_capacity(n),
            parent: vec![None; n],
            children: Vec::with_capacity(n),
            side: vec![Side::Root; n],
            leaf_of_index: vec![0; self.len],
            root: self.roots[0],
        };
        for node in &self.nodes[..n] {
            shape.ranges.push((node.range_lo, node.range_hi));
            shape.children.push(node.left.zip(node.right));
            if let (Some(l), Some(r)) = (node.left, node.right) {
                shape.parent[l] = Some(node.id);
                shape.parent[r] = Some(node.id);
                shape.side[l] = Side::Left;
                shape.side[r] = Side::Right;
            } else {
                shape.leaf_of_index[node.range_lo] = node.id;
            }
        }
        shape
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn root(&self, version: Version) -> NodeId {
        self.roots[version]
    }

    pub fn latest_root(&self) -> NodeId {
        *self.roots.last().unwrap()
    }

    pub fn latest_version(&self) -> Version {
        self.roots.len() - 1
    }

    pub fn version_count(&self) -> usize {
        self.roots.len()
    }

    /// Array size K.
    pub fn array_len(&self) -> usize {
        self.len
    }

    /// n = 2K - 1.
    pub fn initial_node_count(&self) -> usize {
        2 * self.len - 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len {
            return Err(invalid!("index {index} out of range for array of size {}", self.len));
        }
        Ok(())
    }

    fn check_version(&self, version: Version) -> Result<()> {
        if version >= self.roots.len() {
            return Err(invalid!(
                "version {version} does not exist ({} versions)",
                self.roots.len()
            ));
        }
        Ok(())
    }

    fn check_range(&self, a: usize, b: usize) -> Result<()> {
        if a > b || b >= self.len {
            return Err(invalid!("range [{a}, {b}] invalid for array of size {}", self.len));
        }
        Ok(())
    }
}

/// Applies `updates` to a tree over `array` and compares every
/// `(version, a, b)` query against the minimum of a plain copy of that
/// version's array. Returns the number of queries checked.
pub fn check_against_brute_force(array: &[u8], updates: &[(usize, u8)]) -> Result<usize> {
    let mut tree = VersionedTree::build(array)?;
    let mut snapshots = vec![array.to_vec()];
    for &(k, x) in updates {
        tree.update(k, x)?;
        let mut next = snapshots.last().unwrap().clone();
        next[k] = x;
        snapshots.push(next);
    }
    let mut checked = 0;
    for (v, snap) in snapshots.iter().enumerate() {
        for a in 0..snap.len() {
            for b in a..snap.len() {
                let want = *snap[a..=b].iter().min().unwrap();
                let got = tree.query_min(v, a, b)?;
                if got != want {
                    return Err(crate::Error::Internal(format!(
                        "version {v} range [{a}, {b}] of {array:?} after {updates:?}: tree says {got}, brute force {want}"
                    )));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k5() -> VersionedTree {
        VersionedTree::build(&[5, 2, 8, 1, 7]).unwrap()
    }

    fn find(tree: &VersionedTree, version: Version, lo: usize, hi: usize) -> NodeId {
        tree.entity_nodes(version)
            .unwrap()
            .into_iter()
            .find(|&id| tree.node(id).range_lo == lo && tree.node(id).range_hi == hi)
            .unwrap()
    }

    #[test]
    fn single_leaf() {
        let tree = VersionedTree::build(&[3]).unwrap();
        assert_eq!(tree.node_count(), 1);
        assert_eq!(tree.roots(), &[0]);
        assert_eq!(tree.node(0).value, 3);
        assert_eq!(tree.update_path(0).unwrap(), vec![0]);
    }

    #[test]
    fn build_k5_layout() {
        let tree = k5();
        assert_eq!(tree.node_count(), 9);
        assert_eq!(tree.latest_root(), 8);
        assert_eq!(tree.node(8).value, 1);
        assert_eq!(tree.node(find(&tree, 0, 0, 2)).value, 2);
        assert_eq!(tree.node(find(&tree, 0, 3, 4)).value, 1);
        // post-order ids: leaf0, leaf1, [0,1], leaf2, [0,2], leaf3, leaf4, [3,4], root
        let ranges: Vec<_> = tree.nodes().iter().map(|n| (n.range_lo, n.range_hi)).collect();
        assert_eq!(
            ranges,
            vec![(0, 0), (1, 1), (0, 1), (2, 2), (0, 2), (3, 3), (4, 4), (3, 4), (0, 4)]
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(VersionedTree::build(&[]), Err(crate::Error::InvalidInput(_))));
        assert!(VersionedTree::build(&[0]).is_err());
        assert!(VersionedTree::build(&[16]).is_err());
        let mut tree = k5();
        assert!(tree.update(5, 3).is_err());
        assert!(tree.update(0, 0).is_err());
        assert!(tree.query_min(0, 3, 2).is_err());
        assert!(tree.query_min(0, 0, 5).is_err());
        assert!(tree.query_min(1, 0, 0).is_err());
        assert!(tree.snapshot_array(1).is_err());
        assert!(tree.update_path(5).is_err());
    }

    #[test]
    fn update_copies_path() {
        let mut tree = k5();
        assert_eq!(tree.update(0, 9).unwrap(), 1);
        assert_eq!(tree.node_count(), 13);
        assert_eq!(tree.node(tree.root(1)).value, 1);
        assert!(tree.nodes()[9..].iter().all(|n| n.version == 1));
        // leaf-first allocation
        assert_eq!(tree.node(9).range_lo, 0);
        assert_eq!(tree.node(9).range_hi, 0);
        assert_eq!(tree.root(1), 12);

        tree.update(2, 4).unwrap();
        assert_eq!(tree.node_count(), 16);
    }

    #[test]
    fn update_with_same_value_still_copies() {
        let mut tree = k5();
        tree.update(1, 2).unwrap();
        assert_eq!(tree.node_count(), 13);
        assert_eq!(tree.snapshot_array(1).unwrap(), vec![5, 2, 8, 1, 7]);
    }

    #[test]
    fn historical_queries() {
        let mut tree = k5();
        assert_eq!(tree.query_min(0, 1, 3).unwrap(), 1);
        for k in 0..5 {
            assert_eq!(tree.query_min(0, k, k).unwrap(), [5, 2, 8, 1, 7][k]);
        }
        tree.update(0, 9).unwrap();
        assert_eq!(tree.query_min(0, 0, 0).unwrap(), 5);
        assert_eq!(tree.query_min(1, 0, 0).unwrap(), 9);
    }

    #[test]
    fn covers() {
        let tree = k5();
        let cover = tree.canonical_cover(0, 1, 3).unwrap();
        let ranges: Vec<_> = cover
            .iter()
            .map(|&id| (tree.node(id).range_lo, tree.node(id).range_hi))
            .collect();
        assert_eq!(ranges, vec![(1, 1), (2, 2), (3, 3)]);
        assert_eq!(tree.canonical_cover(0, 0, 4).unwrap(), vec![tree.root(0)]);
    }

    #[test]
    fn update_paths() {
        let tree = k5();
        let path = tree.update_path(0).unwrap();
        assert_eq!(path, vec![8, 4, 2, 0]);
        assert_eq!(tree.update_path(4).unwrap().len(), 3);
        assert_eq!(tree.shape().path_to_index(0), path);
    }

    #[test]
    fn snapshot_after_update() {
        let mut tree = k5();
        tree.update(2, 4).unwrap();
        let before = tree.snapshot_array(0).unwrap();
        let after = tree.snapshot_array(1).unwrap();
        assert_eq!(before, vec![5, 2, 8, 1, 7]);
        let diff: Vec<_> = (0..5).filter(|&i| before[i] != after[i]).collect();
        assert_eq!(diff, vec![2]);
    }

    #[test]
    fn shape_sides() {
        let shape = k5().shape();
        assert_eq!(shape.root, 8);
        assert_eq!(shape.side[8], Side::Root);
        assert_eq!(shape.side[4], Side::Left);
        assert_eq!(shape.side[7], Side::Right);
        assert_eq!(shape.leaf_of_index, vec![0, 1, 3, 5, 6]);
        assert_eq!(shape.edges().len(), 8);
    }
}
