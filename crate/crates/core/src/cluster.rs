//! Cluster trees, the admissibility condition and block-cluster trees.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{HmError, Result};
use crate::geometry::{PanelSet, Point3};

pub const DEFAULT_ETA: f64 = 1.0;
pub const DEFAULT_N_MIN: usize = 16;

/// Axis-aligned box in three dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point3,
    pub max: Point3,
}

impl BoundingBox {
    pub fn new(min: Point3, max: Point3) -> Self {
        BoundingBox { min, max }
    }

    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for d in 0..3 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        BoundingBox { min, max }
    }

    /// Length of the diagonal.
    pub fn diameter(&self) -> f64 {
        (0..3)
            .map(|d| (self.max[d] - self.min[d]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance between the two boxes, zero if they intersect.
    pub fn distance(&self, other: &BoundingBox) -> f64 {
        (0..3)
            .map(|d| {
                let gap = (other.min[d] - self.max[d]).max(self.min[d] - other.max[d]);
                gap.max(0.0).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    fn longest_axis(&self) -> usize {
        let ext: Vec<f64> = (0..3).map(|d| self.max[d] - self.min[d]).collect();
        let mut best = 0;
        for d in 1..3 {
            if ext[d] > ext[best] {
                best = d;
            }
        }
        best
    }
}

/// One node of a cluster tree; owns the tree-order index range `start..end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub start: usize,
    pub end: usize,
    pub bbox: BoundingBox,
    pub children: Option<[usize; 2]>,
    pub parent: Option<usize>,
    pub level: usize,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.end - self.start
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Binary cluster tree over the panel indices.
///
/// `permutation[t]` is the original panel index stored at tree position `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub nodes: Vec<Cluster>,
    pub permutation: Vec<usize>,
    pub inverse_permutation: Vec<usize>,
    pub depth: usize,
    pub n_min: usize,
}

impl ClusterTree {
    pub const ROOT: usize = 0;

    pub fn root(&self) -> &Cluster {
        &self.nodes[Self::ROOT]
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn children(&self, c: usize) -> &[usize] {
        match &self.nodes[c].children {
            Some(ch) => ch,
            None => &[],
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        // Nodes are created depth-first, left before right, so this is
        // left-to-right order.
        (0..self.nodes.len()).filter(|&c| self.nodes[c].is_leaf())
    }

    /// Clusters in the subtree rooted at `c` (including `c`).
    pub fn descendants(&self, c: usize) -> Vec<usize> {
        let mut out = vec![c];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(self.children(out[i]));
            i += 1;
        }
        out
    }

    /// Reorders a vector given in panel order into tree order.
    pub fn to_tree_order<T: Copy>(&self, x: &[T]) -> Vec<T> {
        self.permutation.iter().map(|&p| x[p]).collect()
    }

    /// Reorders a vector given in tree order back into panel order.
    pub fn to_panel_order<T: Copy>(&self, x: &[T]) -> Vec<T> {
        self.inverse_permutation.iter().map(|&t| x[t]).collect()
    }
}

/// Cardinality-balanced bisection along the longest box axis.
pub fn build_cluster_tree(panels: &PanelSet, n_min: usize) -> Result<ClusterTree> {
    build_cluster_tree_from_points(&panels.centers, n_min)
}

pub fn build_cluster_tree_from_points(points: &[Point3], n_min: usize) -> Result<ClusterTree> {
    if points.is_empty() {
        return Err(HmError::Empty("panel set"));
    }
    if n_min == 0 {
        return Err(HmError::InvalidArgument("n_min must be at least 1".into()));
    }
    let mut permutation: Vec<usize> = (0..points.len()).collect();
    let mut nodes = Vec::new();
    split(points, &mut permutation, &mut nodes, 0, points.len(), None, 0, n_min);
    let depth = nodes.iter().map(|c| c.level).max().unwrap_or(0);
    let mut inverse_permutation = vec![0; permutation.len()];
    for (t, &p) in permutation.iter().enumerate() {
        inverse_permutation[p] = t;
    }
    Ok(ClusterTree {
        nodes,
        permutation,
        inverse_permutation,
        depth,
        n_min,
    })
}

#[allow(clippy::too_many_arguments)]
fn split(
    points: &[Point3],
    perm: &mut [usize],
    nodes: &mut Vec<Cluster>,
    start: usize,
    end: usize,
    parent: Option<usize>,
    level: usize,
    n_min: usize,
) -> usize {
    let bbox = BoundingBox::of_points(perm[start..end].iter().map(|&i| &points[i]));
    let id = nodes.len();
    nodes.push(Cluster {
        start,
        end,
        bbox,
        children: None,
        parent,
        level,
    });
    if end - start > n_min {
        let axis = bbox.longest_axis();
        perm[start..end].sort_by(|&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let mid = start + (end - start) / 2;
        let left = split(points, perm, nodes, start, mid, Some(id), level + 1, n_min);
        let right = split(points, perm, nodes, mid, end, Some(id), level + 1, n_min);
        nodes[id].children = Some([left, right]);
    }
    id
}

/// `min(diam(tau), diam(sigma)) <= eta * dist(tau, sigma)`.
pub fn admissible(tau: &Cluster, sigma: &Cluster, eta: f64) -> bool {
    admissible_boxes(&tau.bbox, &sigma.bbox, eta)
}

pub fn admissible_boxes(tau: &BoundingBox, sigma: &BoundingBox, eta: f64) -> bool {
    let dist = tau.distance(sigma);
    dist > 0.0 && tau.diameter().min(sigma.diameter()) <= eta * dist
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Inner,
    FarLeaf,
    NearLeaf,
}

impl BlockKind {
    pub fn is_leaf(self) -> bool {
        !matches!(self, BlockKind::Inner)
    }

    pub fn label(self) -> &'static str {
        match self {
            BlockKind::Inner => "inner",
            BlockKind::FarLeaf => "far",
            BlockKind::NearLeaf => "near",
        }
    }
}

/// Node `row x col` of a block-cluster tree; `row` and `col` are cluster ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub kind: BlockKind,
    /// Row-child-major: `children[i * ncol + j]` pairs row child `i` with column child `j`.
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub level: usize,
}

#[derive(Debug, Clone)]
pub struct BlockClusterTree {
    pub clusters: Arc<ClusterTree>,
    pub blocks: Vec<Block>,
    pub eta: f64,
    pub depth: usize,
    lookup: HashMap<(usize, usize), usize>,
    row_blocks: Vec<Vec<usize>>,
}

impl PartialEq for BlockClusterTree {
    fn eq(&self, other: &Self) -> bool {
        self.eta == other.eta && self.blocks == other.blocks && self.clusters == other.clusters
    }
}

impl BlockClusterTree {
    pub const ROOT: usize = 0;

    pub fn block(&self, b: usize) -> &Block {
        &self.blocks[b]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Number of indices, `#I`.
    pub fn size(&self) -> usize {
        self.clusters.len()
    }

    pub fn lookup(&self, row: usize, col: usize) -> Option<usize> {
        self.lookup.get(&(row, col)).copied()
    }

    /// Blocks `row x sigma` of the tree for a fixed row cluster.
    pub fn blocks_in_row(&self, row: usize) -> &[usize] {
        &self.row_blocks[row]
    }

    pub fn row_range(&self, b: usize) -> std::ops::Range<usize> {
        self.clusters.nodes[self.blocks[b].row].range()
    }

    pub fn col_range(&self, b: usize) -> std::ops::Range<usize> {
        self.clusters.nodes[self.blocks[b].col].range()
    }

    pub fn shape(&self, b: usize) -> (usize, usize) {
        let blk = &self.blocks[b];
        (
            self.clusters.nodes[blk.row].size(),
            self.clusters.nodes[blk.col].size(),
        )
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.blocks.len()).filter(|&b| self.blocks[b].kind.is_leaf())
    }

    pub fn far_leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.blocks.len()).filter(|&b| self.blocks[b].kind == BlockKind::FarLeaf)
    }

    pub fn near_leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.blocks.len()).filter(|&b| self.blocks[b].kind == BlockKind::NearLeaf)
    }

    /// Stable 64-bit FNV-1a fingerprint of the block structure.
    pub fn structure_hash(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for byte in x.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        feed(self.size() as u64);
        feed(self.blocks.len() as u64);
        for b in 0..self.blocks.len() {
            let (r, c) = (self.row_range(b), self.col_range(b));
            feed(r.start as u64);
            feed(r.end as u64);
            feed(c.start as u64);
            feed(c.end as u64);
            feed(self.blocks[b].kind as u64);
        }
        h
    }

    /// Textual listing, one block per line in depth-first order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![Self::ROOT];
        while let Some(b) = stack.pop() {
            let blk = &self.blocks[b];
            let (r, c) = (self.row_range(b), self.col_range(b));
            let _ = writeln!(
                out,
                "{:indent$}level={} rows={}..{} cols={}..{} kind={}",
                "",
                blk.level,
                r.start,
                r.end,
                c.start,
                c.end,
                blk.kind.label(),
                indent = 2 * blk.level
            );
            stack.extend(blk.children.iter().rev());
        }
        out
    }
}

/// Recursive construction starting at `I x I`; children pair same-level clusters.
pub fn build_block_cluster_tree(tree: Arc<ClusterTree>, eta: f64) -> Result<BlockClusterTree> {
    if !(eta > 0.0) {
        return Err(HmError::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut lookup = HashMap::new();
    let mut stack: Vec<(usize, usize, Option<usize>, usize)> =
        vec![(ClusterTree::ROOT, ClusterTree::ROOT, None, 0)];
    // Children get their ids when the parent is expanded so that the
    // row-child-major order is fixed regardless of traversal order.
    let mut pending: Vec<usize> = Vec::new();
    blocks.push(Block {
        row: ClusterTree::ROOT,
        col: ClusterTree::ROOT,
        kind: BlockKind::NearLeaf,
        children: Vec::new(),
        parent: None,
        level: 0,
    });
    lookup.insert((ClusterTree::ROOT, ClusterTree::ROOT), 0);
    pending.push(0);
    stack.clear();
    while let Some(b) = pending.pop() {
        let (row, col, level) = (blocks[b].row, blocks[b].col, blocks[b].level);
        let (tau, sigma) = (&tree.nodes[row], &tree.nodes[col]);
        if admissible(tau, sigma, eta) {
            blocks[b].kind = BlockKind::FarLeaf;
            continue;
        }
        match (tau.children, sigma.children) {
            (Some(rc), Some(cc)) => {
                blocks[b].kind = BlockKind::Inner;
                let mut kids = Vec::with_capacity(4);
                for &r in &rc {
                    for &c in &cc {
                        let id = blocks.len();
                        blocks.push(Block {
                            row: r,
                            col: c,
                            kind: BlockKind::NearLeaf,
                            children: Vec::new(),
                            parent: Some(b),
                            level: level + 1,
                        });
                        lookup.insert((r, c), id);
                        kids.push(id);
                    }
                }
                pending.extend(kids.iter().rev());
                blocks[b].children = kids;
            }
            _ => blocks[b].kind = BlockKind::NearLeaf,
        }
    }
    let depth = blocks.iter().map(|b| b.level).max().unwrap_or(0);
    let mut row_blocks = vec![Vec::new(); tree.nodes.len()];
    for (id, blk) in blocks.iter().enumerate() {
        row_blocks[blk.row].push(id);
    }
    Ok(BlockClusterTree {
        clusters: tree,
        blocks,
        eta,
        depth,
        lookup,
        row_blocks,
    })
}

/// `C_sp`: the largest number of blocks sharing one row cluster.
pub fn sparsity_constant(bct: &BlockClusterTree) -> usize {
    bct.row_blocks.iter().map(Vec::len).max().unwrap_or(0)
}

/// `C_id`: over all leaves `tau x sigma`, the number of pairs of successors
/// `tau' x sigma'` connected through some `rho'` with both `tau' x rho'` and
/// `rho' x sigma'` in the tree.
pub fn identity_constant(bct: &BlockClusterTree) -> usize {
    let ct = &bct.clusters;
    let mut best = 0;
    for b in bct.leaves() {
        let blk = bct.block(b);
        let sigma_desc = ct.descendants(blk.col);
        let mut count = 0;
        for tau_p in ct.descendants(blk.row) {
            for &sigma_p in &sigma_desc {
                let linked = bct.blocks_in_row(tau_p).iter().any(|&tr| {
                    let rho = bct.block(tr).col;
                    bct.lookup(rho, sigma_p).is_some()
                });
                if linked {
                    count += 1;
                }
            }
        }
        best = best.max(count);
    }
    best
}
