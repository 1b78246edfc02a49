use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Hyperparameters, LearnerError, MemberModel, MemberParams, TrainingSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub m_features: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
}

fn default_bootstrap() -> bool {
    true
}

impl ForestParams {
    pub fn default_for(dims: usize) -> Self {
        Self { n_trees: 100, max_depth: None, min_leaf: 1, m_features: (dims as f64).sqrt().ceil().max(1.0) as usize, bootstrap: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    /// `x[dim] <= threshold` goes left.
    Split { dim: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub dims: usize,
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.dims {
            return Err(LearnerError::DimensionMismatch { expected: self.dims, got: x.len() });
        }
        let mut i = 0;
        loop {
            match self.nodes.get(i) {
                Some(Node::Leaf { value }) => return Ok(*value),
                Some(Node::Split { dim, threshold, left, right }) => i = if x[*dim] <= *threshold { *left } else { *right },
                None => return Err(LearnerError::InvalidTrainingSet(format!("tree node {i} out of range"))),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

pub fn gini(n_pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = n_pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    set: &'a TrainingSet,
    params: &'a ForestParams,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct BestSplit {
    gain: f64,
    dim: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.set.labels[i]).count();
        self.nodes.push(Node::Leaf { value: pos as f64 / idx.len() as f64 });
        self.nodes.len() - 1
    }

    fn best_in_dim(&self, idx: &[usize], dim: usize, parent: f64, best: &mut Option<BestSplit>) {
        let mut vals: Vec<(f64, bool)> = idx.iter().map(|&i| (self.set.row(i)[dim], self.set.labels[i])).collect();
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = vals.len();
        let total_pos = vals.iter().filter(|v| v.1).count();
        let min_leaf = self.params.min_leaf.max(1);
        let mut left_pos = 0;
        for k in 1..n {
            left_pos += vals[k - 1].1 as usize;
            if vals[k - 1].0 == vals[k].0 || k < min_leaf || n - k < min_leaf {
                continue;
            }
            let child = (k as f64 * gini(left_pos, k) + (n - k) as f64 * gini(total_pos - left_pos, n - k)) / n as f64;
            let gain = parent - child;
            // Candidates arrive in ascending (dim, threshold) order, so a strict
            // improvement keeps the earliest of tied splits.
            if best.as_ref().map_or(true, |b| gain > b.gain + 1e-12) {
                let threshold = 0.5 * (vals[k - 1].0 + vals[k].0);
                *best = Some(BestSplit { gain, dim, threshold });
            }
        }
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.set.labels[i]).count();
        let depth_capped = self.params.max_depth.is_some_and(|d| depth >= d);
        if pos == 0 || pos == n || depth_capped || n < 2 * self.params.min_leaf.max(1) {
            return self.leaf(&idx);
        }
        let parent = gini(pos, n);
        let d = self.set.dims;
        let m = self.params.m_features.clamp(1, d);
        let mut order: Vec<usize> = index::sample(&mut self.rng, d, d).into_vec();
        let (first, rest) = order.split_at_mut(m);
        first.sort_unstable();
        rest.shuffle(&mut self.rng);

        let mut best = None;
        for &dim in first.iter() {
            self.best_in_dim(&idx, dim, parent, &mut best);
        }
        // The sampled dims may all be constant on this node; keep drawing.
        if best.is_none() {
            for &dim in rest.iter() {
                self.best_in_dim(&idx, dim, parent, &mut best);
                if best.is_some() {
                    break;
                }
            }
        }
        let Some(split) = best else {
            return self.leaf(&idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| self.set.row(i)[split.dim] <= split.threshold);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[me] = Node::Split { dim: split.dim, threshold: split.threshold, left, right };
        me
    }
}

fn grow_tree(set: &TrainingSet, params: &ForestParams, seed: u64) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = set.len();
    let idx: Vec<usize> = if params.bootstrap { (0..n).map(|_| rng.gen_range(0..n)).collect() } else { (0..n).collect() };
    let mut b = Builder { set, params, rng, nodes: Vec::new() };
    b.grow(idx, 0);
    Tree { dims: set.dims, nodes: b.nodes }
}

pub fn train_random_forest(set: &TrainingSet, params: &ForestParams, seed: u64) -> Result<MemberModel, LearnerError> {
    set.require_both_classes()?;
    if params.n_trees == 0 || params.m_features == 0 || params.m_features > set.dims {
        return Err(LearnerError::InvalidTrainingSet(format!("n_trees = {}, m_features = {} for d = {}", params.n_trees, params.m_features, set.dims)));
    }
    let trees = (0..params.n_trees as u64).map(|t| grow_tree(set, params, seed.wrapping_mul(0x9E37_79B9).wrapping_add(t))).collect();
    Ok(MemberModel { params: MemberParams::RandomForest { trees }, hyperparameters: Hyperparameters::Forest(params.clone()), seed })
}
