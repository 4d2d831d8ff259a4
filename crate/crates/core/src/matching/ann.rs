//! Random-projection forest for approximate k-NN over unit covariates.
//!
//! Each tree splits its point set by the perpendicular bisector of two
//! randomly chosen points until leaves hold at most `leaf_size` points.
//! Queries walk all trees best-first (priority = smallest margin seen on the
//! path), pool leaf candidates until `search_k` are collected, then re-rank
//! the pooled candidates by exact distance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::CovariateTable;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    /// `1 - cos(a, b)`, computed on standardized covariates.
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Parse(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnParams {
    pub tree_count: usize,
    pub leaf_size: usize,
    pub metric: Metric,
    pub seed: u64,
    /// Candidates pooled per query before exact re-ranking; `None` means
    /// `8 * tree_count * k`.
    pub search_k: Option<usize>,
    /// Skip the forest and answer queries by brute force.
    pub exact: bool,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            tree_count: 32,
            leaf_size: 16,
            metric: Metric::Euclidean,
            seed: 0,
            search_k: None,
            exact: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        normal: Vec<f64>,
        offset: f64,
        left: usize,
        right: usize,
    },
    Leaf(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

/// Forest over the donor rows of a covariate table.
#[derive(Debug, Clone)]
pub struct AnnIndex {
    params: AnnParams,
    donor_rows: Vec<usize>,
    dim: usize,
    means: Vec<f64>,
    scales: Vec<f64>,
    /// Transformed points, row-major, one row per donor.
    points: Vec<f64>,
    trees: Vec<Tree>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Builds the index over `donor_rows`. Covariates are z-scored with the
/// donor-pool mean and standard deviation (constant columns keep scale 1).
pub fn build_index(cov: &CovariateTable, donor_rows: &[usize], params: AnnParams) -> Result<AnnIndex> {
    if donor_rows.is_empty() {
        return Err(Error::EmptyDonorSet);
    }
    if params.tree_count == 0 || params.leaf_size == 0 {
        return Err(Error::InvalidSpec("tree_count and leaf_size must be >= 1".into()));
    }
    let x = cov.matrix();
    let dim = x.ncols();
    let m = donor_rows.len() as f64;
    let mut means = vec![0.0; dim];
    let mut scales = vec![1.0; dim];
    for j in 0..dim {
        let mean = donor_rows.iter().map(|&r| x[(r, j)]).sum::<f64>() / m;
        let var = donor_rows.iter().map(|&r| (x[(r, j)] - mean).powi(2)).sum::<f64>() / m;
        means[j] = mean;
        if var > 0.0 {
            scales[j] = var.sqrt();
        }
    }
    let mut index = AnnIndex {
        params,
        donor_rows: donor_rows.to_vec(),
        dim,
        means,
        scales,
        points: Vec::with_capacity(donor_rows.len() * dim),
        trees: Vec::new(),
    };
    for &r in donor_rows {
        let raw: Vec<f64> = x.row(r).iter().copied().collect();
        let p = index.transform(&raw);
        index.points.extend_from_slice(&p);
    }
    if !index.params.exact {
        let trees = (0..index.params.tree_count)
            .into_par_iter()
            .map(|t| index.build_tree(derive_seed(index.params.seed, t as u64)))
            .collect();
        index.trees = trees;
    }
    Ok(index)
}

impl AnnIndex {
    pub fn params(&self) -> &AnnParams {
        &self.params
    }

    pub fn donor_rows(&self) -> &[usize] {
        &self.donor_rows
    }

    pub fn len(&self) -> usize {
        self.donor_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.donor_rows.is_empty()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn transform(&self, raw: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = raw
            .iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        if self.params.metric == Metric::Cosine {
            normalize(&mut v);
        }
        v
    }

    fn distance(&self, q: &[f64], i: usize) -> f64 {
        let d2 = sq_dist(q, self.point(i));
        match self.params.metric {
            Metric::Euclidean => d2.sqrt(),
            // both sides are unit vectors (or zero), so |a-b|^2 / 2 = 1 - cos
            Metric::Cosine => 0.5 * d2,
        }
    }

    fn build_tree(&self, seed: u64) -> Tree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = Vec::new();
        let all: Vec<u32> = (0..self.len() as u32).collect();
        self.split_node(all, &mut nodes, &mut rng);
        Tree { nodes }
    }

    fn split_node(&self, items: Vec<u32>, nodes: &mut Vec<Node>, rng: &mut ChaCha8Rng) -> usize {
        let id = nodes.len();
        if items.len() <= self.params.leaf_size {
            nodes.push(Node::Leaf(items));
            return id;
        }
        nodes.push(Node::Leaf(Vec::new()));
        let (normal, offset, left, right) = self.choose_split(&items, rng);
        let l = self.split_node(left, nodes, rng);
        let r = self.split_node(right, nodes, rng);
        nodes[id] = Node::Split {
            normal,
            offset,
            left: l,
            right: r,
        };
        id
    }

    fn choose_split(&self, items: &[u32], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, Vec<u32>, Vec<u32>) {
        for _ in 0..3 {
            let i = rng.random_range(0..items.len());
            let mut j = rng.random_range(0..items.len() - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (items[i] as usize, items[j] as usize);
            let (pa, pb) = (self.point(a), self.point(b));
            let mut normal: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x - y).collect();
            if dot(&normal, &normal) == 0.0 {
                continue;
            }
            normalize(&mut normal);
            let mid: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| 0.5 * (x + y)).collect();
            let offset = dot(&normal, &mid);
            let (left, right): (Vec<u32>, Vec<u32>) = items
                .iter()
                .partition(|&&i| dot(&normal, self.point(i as usize)) - offset <= 0.0);
            if !left.is_empty() && !right.is_empty() {
                return (normal, offset, left, right);
            }
        }
        // Degenerate point set (duplicates): split in half along a random
        // direction that every point ties on, so queries visit both sides.
        let half = items.len() / 2;
        let normal = vec![0.0; self.dim];
        (normal, 0.0, items[..half].to_vec(), items[half..].to_vec())
    }

    /// Returns up to `k` `(donor_row, distance)` pairs sorted by distance
    /// then row.
    pub fn query(&self, raw: &[f64], k: usize) -> Vec<(usize, f64)> {
        let q = self.transform(raw);
        let candidates: Vec<usize> = if self.params.exact {
            (0..self.len()).collect()
        } else {
            self.collect_candidates(&q, k)
        };
        let mut scored: Vec<(usize, f64)> = candidates
            .into_iter()
            .map(|i| (i, self.distance(&q, i)))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(self.donor_rows[a.0].cmp(&self.donor_rows[b.0])));
        scored.truncate(k);
        scored
            .into_iter()
            .map(|(i, d)| (self.donor_rows[i], d))
            .collect()
    }

    fn collect_candidates(&self, q: &[f64], k: usize) -> Vec<usize> {
        let search_k = self
            .params
            .search_k
            .unwrap_or(8 * self.params.tree_count * k)
            .max(k);
        let mut heap = BinaryHeap::new();
        for t in 0..self.trees.len() {
            heap.push(Frontier {
                priority: f64::INFINITY,
                tree: t,
                node: 0,
            });
        }
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        let mut pooled = 0usize;
        while let Some(f) = heap.pop() {
            if pooled >= search_k {
                break;
            }
            match &self.trees[f.tree].nodes[f.node] {
                Node::Leaf(items) => {
                    pooled += items.len();
                    for &i in items {
                        if !seen[i as usize] {
                            seen[i as usize] = true;
                            out.push(i as usize);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let margin = dot(normal, q) - offset;
                    heap.push(Frontier {
                        priority: f.priority.min(-margin),
                        tree: f.tree,
                        node: *left,
                    });
                    heap.push(Frontier {
                        priority: f.priority.min(margin),
                        tree: f.tree,
                        node: *right,
                    });
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Donor positions (indices into `donor_rows`) per leaf, for each tree.
    /// Used to check that trees cover every donor exactly once.
    pub fn leaf_contents(&self) -> Vec<Vec<u32>> {
        self.trees
            .iter()
            .map(|t| {
                let mut all: Vec<u32> = t
                    .nodes
                    .iter()
                    .filter_map(|n| match n {
                        Node::Leaf(items) => Some(items.clone()),
                        Node::Split { .. } => None,
                    })
                    .flatten()
                    .collect();
                all.sort_unstable();
                all
            })
            .collect()
    }

    pub fn same_trees(&self, other: &AnnIndex) -> bool {
        self.trees == other.trees
    }
}

#[derive(Debug)]
struct Frontier {
    priority: f64,
    tree: usize,
    node: usize,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}
