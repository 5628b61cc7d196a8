//! Geometric cluster tree and the admissible/inadmissible block partition.
//!
//! The tree is binary: a node is split along the longest axis of its bounding
//! box at the coordinate median until its range holds at most `leaf_size`
//! indices. Node ranges refer to the permuted ordering, in which every node's
//! indices are contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const DEFAULT_LEAF_SIZE: usize = 32;
pub const DEFAULT_ETA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    fn of<'a>(points: impl IntoIterator<Item = &'a [f64; 3]>) -> Self {
        let mut bbox = BoundingBox {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        };
        for p in points {
            for (a, &x) in p.iter().enumerate() {
                bbox.min[a] = bbox.min[a].min(x);
                bbox.max[a] = bbox.max[a].max(x);
            }
        }
        bbox
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn diameter(&self) -> f64 {
        (0..3).map(|a| self.extent(a).powi(2)).sum::<f64>().sqrt()
    }

    /// Euclidean distance between the two boxes; zero if they touch or overlap.
    pub fn distance(&self, other: &BoundingBox) -> f64 {
        (0..3)
            .map(|a| {
                let gap = (other.min[a] - self.max[a]).max(self.min[a] - other.max[a]).max(0.0);
                gap * gap
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    fn longest_axis(&self) -> usize {
        let mut best = 0;
        for a in 1..3 {
            if self.extent(a) > self.extent(best) {
                best = a;
            }
        }
        best
    }
}

/// η-admissibility: `min(diam t, diam s) ≤ η·dist(t, s)` with a strictly
/// positive distance, so touching clusters are never compressed.
pub fn is_admissible(t: &BoundingBox, s: &BoundingBox, eta: f64) -> bool {
    let dist = t.distance(s);
    dist > 0.0 && t.diameter().min(s.diameter()) <= eta * dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub start: usize,
    pub end: usize,
    pub bbox: BoundingBox,
    pub children: Option<[usize; 2]>,
    pub level: usize,
}

impl ClusterNode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    nodes: Vec<ClusterNode>,
    /// `perm[k]` is the original index of the point at permuted position `k`.
    perm: Vec<usize>,
    /// `inverse_perm[i]` is the permuted position of original index `i`.
    inverse_perm: Vec<usize>,
    leaf_size: usize,
}

impl ClusterTree {
    pub fn build(cloud: &PointCloud, leaf_size: usize) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if leaf_size == 0 {
            return Err(Error::invalid("leaf_size", "must be at least 1"));
        }
        let n = cloud.len();
        let mut tree = ClusterTree {
            nodes: Vec::new(),
            perm: (0..n).collect(),
            inverse_perm: Vec::new(),
            leaf_size,
        };
        tree.split(cloud, 0, n, 0);
        tree.inverse_perm = vec![0; n];
        for (k, &i) in tree.perm.iter().enumerate() {
            tree.inverse_perm[i] = k;
        }
        Ok(tree)
    }

    fn split(&mut self, cloud: &PointCloud, start: usize, end: usize, level: usize) -> usize {
        let pts = cloud.points();
        let bbox = BoundingBox::of(self.perm[start..end].iter().map(|&i| &pts[i]));
        let id = self.nodes.len();
        self.nodes.push(ClusterNode {
            start,
            end,
            bbox,
            children: None,
            level,
        });
        let len = end - start;
        if len <= self.leaf_size {
            return id;
        }
        let axis = bbox.longest_axis();
        // Coincident points have a zero-extent box; splitting by position
        // keeps the tree balanced and terminating.
        if bbox.extent(axis) > 0.0 {
            self.perm[start..end].sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        }
        let mid = start + len / 2;
        let left = self.split(cloud, start, mid, level + 1);
        let right = self.split(cloud, mid, end, level + 1);
        self.nodes[id].children = Some([left, right]);
        id
    }

    pub const ROOT: usize = 0;

    pub fn root(&self) -> &ClusterNode {
        &self.nodes[Self::ROOT]
    }

    pub fn node(&self, id: usize) -> &ClusterNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[ClusterNode] {
        &self.nodes
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_perm(&self) -> &[usize] {
        &self.inverse_perm
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&ClusterNode> {
        let mut out = Vec::new();
        let mut stack = vec![Self::ROOT];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            match node.children {
                Some([l, r]) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => out.push(node),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub row_cluster: usize,
    pub col_cluster: usize,
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
    pub admissible: bool,
}

impl Block {
    pub fn rows(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn cols(&self) -> usize {
        self.col_end - self.col_start
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.row_start..self.row_end).contains(&i) && (self.col_start..self.col_end).contains(&j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    blocks: Vec<Block>,
    n: usize,
    eta: f64,
}

impl BlockPartition {
    /// Descends from `(root, root)`: admissible pairs become low-rank blocks,
    /// inadmissible leaf pairs become dense blocks, everything else is split.
    pub fn build(tree: &ClusterTree, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid("eta", format!("must be positive and finite, got {eta}")));
        }
        let mut blocks = Vec::new();
        let mut stack = vec![(ClusterTree::ROOT, ClusterTree::ROOT)];
        while let Some((t, s)) = stack.pop() {
            let (tn, sn) = (tree.node(t), tree.node(s));
            let admissible = is_admissible(&tn.bbox, &sn.bbox, eta);
            if admissible || (tn.is_leaf() && sn.is_leaf()) {
                blocks.push(Block {
                    row_cluster: t,
                    col_cluster: s,
                    row_start: tn.start,
                    row_end: tn.end,
                    col_start: sn.start,
                    col_end: sn.end,
                    admissible,
                });
                continue;
            }
            let rows: &[usize] = match &tn.children {
                Some(c) => c,
                None => std::slice::from_ref(&t),
            };
            let cols: &[usize] = match &sn.children {
                Some(c) => c,
                None => std::slice::from_ref(&s),
            };
            // Reverse push so blocks come out in row-major child order.
            for &r in rows.iter().rev() {
                for &c in cols.iter().rev() {
                    stack.push((r, c));
                }
            }
        }
        Ok(BlockPartition {
            blocks,
            n: tree.dim(),
            eta,
        })
    }

    /// Reassembles a partition from stored blocks, checking that the areas
    /// add up to `n²`.
    pub fn from_blocks(blocks: Vec<Block>, n: usize, eta: f64) -> Result<Self> {
        let part = BlockPartition { blocks, n, eta };
        for b in &part.blocks {
            if b.rows() == 0 || b.cols() == 0 || b.row_end > n || b.col_end > n {
                return Err(Error::invalid("block", format!("{b:?} does not fit a {n}x{n} matrix")));
            }
        }
        let expected = (n as u128).pow(2);
        let covered = part.covered_entries();
        if covered != expected {
            return Err(Error::TilingMismatch { covered, expected });
        }
        Ok(part)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn admissible_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.admissible).count()
    }

    /// `Σ m_i n_i` over all blocks; equals `N²` for a valid tiling.
    pub fn covered_entries(&self) -> u128 {
        self.blocks.iter().map(|b| b.area() as u128).sum()
    }

    pub fn admissible_entries(&self) -> u128 {
        self.blocks
            .iter()
            .filter(|b| b.admissible)
            .map(|b| b.area() as u128)
            .sum()
    }
}
