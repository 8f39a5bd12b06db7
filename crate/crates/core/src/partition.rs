//! Subset construction for the expert schemes: random disjoint partitions,
//! sampling with replacement across experts, ball-tree levels, and random
//! kernel assignment.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{BaseKernel, KernelSpec};
use crate::seeding::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "ds")]
    Ds,
    #[serde(rename = "sod-shared-hyp")]
    SodSharedHyp,
    #[serde(rename = "sod")]
    Sod,
    #[serde(rename = "tree")]
    Tree,
    #[serde(rename = "tree-rand-kern")]
    TreeRandKern,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Ds,
        Scheme::SodSharedHyp,
        Scheme::Sod,
        Scheme::Tree,
        Scheme::TreeRandKern,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ds => "ds",
            Scheme::SodSharedHyp => "sod-shared-hyp",
            Scheme::Sod => "sod",
            Scheme::Tree => "tree",
            Scheme::TreeRandKern => "tree-rand-kern",
        }
    }

    /// Whether every expert uses one set of hyperparameters.
    pub fn shares_hypers(self) -> bool {
        matches!(self, Scheme::Ds | Scheme::SodSharedHyp)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::input(format!("unknown scheme `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub subset_size: usize,
    pub n_experts: usize,
    pub seed: u64,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, seed: u64) -> Self {
        Self {
            scheme,
            subset_size: 512,
            n_experts: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subset_size < 2 {
            return Err(Error::input("subset_size must be at least 2"));
        }
        if self.n_experts == 0 {
            return Err(Error::input("n_experts must be at least 1"));
        }
        Ok(())
    }
}

/// Random partition of `0..n` into chunks of `subset_size`; only the last
/// chunk may be smaller.
pub fn partition_disjoint(n: usize, subset_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(seed, 0));
    perm.chunks(subset_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `n_experts` subsets of `subset_size` distinct indices each, drawn
/// independently (so subsets may overlap).
pub fn sample_subsets(
    n: usize,
    n_experts: usize,
    subset_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if subset_size > n {
        return Err(Error::input(format!(
            "cannot draw subsets of {subset_size} from {n} points"
        )));
    }
    let mut rng = stream_rng(seed, 1);
    Ok((0..n_experts)
        .map(|_| index::sample(&mut rng, n, subset_size).into_vec())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BallNode {
    pub center: Vec<f64>,
    pub radius: f64,
    pub indices: Vec<usize>,
    pub children: Option<[usize; 2]>,
    pub depth: usize,
}

impl BallNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Binary ball tree stored in breadth-first order: node 0 is the root and
/// every level appears contiguously after the previous one.
#[derive(Clone, Debug, PartialEq)]
pub struct BallTree {
    nodes: Vec<BallNode>,
}

impl BallTree {
    pub fn nodes(&self) -> &[BallNode] {
        &self.nodes
    }

    pub fn root(&self) -> &BallNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_ids(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf()).collect()
    }
}

fn row_dist2(x: &DMatrix<f64>, i: usize, p: &[f64]) -> f64 {
    p.iter()
        .enumerate()
        .map(|(d, v)| {
            let diff = x[(i, d)] - v;
            diff * diff
        })
        .sum()
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

fn farthest(x: &DMatrix<f64>, idx: &[usize], from: &[f64]) -> usize {
    let mut best = (idx[0], -1.0);
    for &i in idx {
        let d = row_dist2(x, i, from);
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn make_node(x: &DMatrix<f64>, indices: Vec<usize>, depth: usize) -> BallNode {
    let d = x.ncols();
    let mut center = vec![0.0; d];
    for &i in &indices {
        for (k, c) in center.iter_mut().enumerate() {
            *c += x[(i, k)];
        }
    }
    for c in &mut center {
        *c /= indices.len() as f64;
    }
    let radius = indices
        .iter()
        .map(|&i| row_dist2(x, i, &center))
        .fold(0.0, f64::max)
        .sqrt();
    BallNode {
        center,
        radius,
        indices,
        children: None,
        depth,
    }
}

/// Builds a ball tree over the rows of `x`.
///
/// A node with more than `leaf_size` points is split by picking a random
/// member, taking the member farthest from it as the first pivot and the
/// member farthest from that as the second, then sending every point to the
/// nearer pivot. Nodes whose points cannot be separated stay leaves.
pub fn build_ball_tree(x: &DMatrix<f64>, leaf_size: usize, seed: u64) -> Result<BallTree> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::input("cannot build a ball tree over zero points"));
    }
    let leaf_size = leaf_size.max(1);
    let mut rng = stream_rng(seed, 2);
    let mut nodes = vec![make_node(x, (0..n).collect(), 0)];
    let mut queue = VecDeque::from([0usize]);

    while let Some(id) = queue.pop_front() {
        let node = &nodes[id];
        if node.indices.len() <= leaf_size {
            continue;
        }
        let idx = &node.indices;
        let start = idx[rng.random_range(0..idx.len())];
        let p1 = farthest(x, idx, &row(x, start));
        let p1_row = row(x, p1);
        let p2_row = row(x, farthest(x, idx, &p1_row));

        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| row_dist2(x, i, &p1_row) <= row_dist2(x, i, &p2_row));
        if left.is_empty() || right.is_empty() {
            continue;
        }
        let depth = node.depth + 1;
        let l = nodes.len();
        nodes.push(make_node(x, left, depth));
        nodes.push(make_node(x, right, depth));
        nodes[id].children = Some([l, l + 1]);
        queue.push_back(l);
        queue.push_back(l + 1);
    }
    Ok(BallTree { nodes })
}

/// Node visited for each expert: every node in level order, then leaves in
/// level order repeated until `n_experts` is reached.
pub fn expert_node_sequence(tree: &BallTree, n_experts: usize) -> Vec<usize> {
    let leaves = tree.leaf_ids();
    (0..tree.len())
        .chain(leaves.iter().copied().cycle())
        .take(n_experts)
        .collect()
}

/// One random subset of at most `subset_size` points per visited node.
pub fn tree_expert_subsets(
    tree: &BallTree,
    n_experts: usize,
    subset_size: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, 3);
    expert_node_sequence(tree, n_experts)
        .into_iter()
        .map(|id| {
            let pts = &tree.nodes[id].indices;
            let k = subset_size.min(pts.len());
            index::sample(&mut rng, pts.len(), k)
                .into_iter()
                .map(|j| pts[j])
                .collect()
        })
        .collect()
}

/// The seven non-empty combinations of the three base families.
pub fn kernel_combinations(input_dim: usize) -> Vec<KernelSpec> {
    (1u8..8)
        .map(|mask| {
            let members: Vec<BaseKernel> = BaseKernel::ALL
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, &k)| k)
                .collect();
            if members.len() == 1 {
                KernelSpec::new(members[0], input_dim)
            } else {
                KernelSpec::sum(members, input_dim)
            }
            .expect("input_dim validated by caller")
        })
        .collect()
}

pub fn assign_random_kernels(n_experts: usize, input_dim: usize, seed: u64) -> Result<Vec<KernelSpec>> {
    if input_dim == 0 {
        return Err(Error::input("kernel input_dim must be positive"));
    }
    let combos = kernel_combinations(input_dim);
    let mut rng = stream_rng(seed, 4);
    Ok((0..n_experts)
        .map(|_| combos[rng.random_range(0..combos.len())].clone())
        .collect())
}
