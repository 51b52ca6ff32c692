//! Multiscale binary tree of low-rank Gaussian components.
//!
//! Leaves are the active mixture components. Every leaf carries two
//! *virtual* children, candidate components that are tracked alongside it
//! and promoted when growing the tree pays for its complexity penalty.
//! Internal nodes summarize their subtree and are what a sibling pair
//! collapses into when pruned.

mod doc;
mod init;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, ThinError};
use crate::model::{orthonormality_error, LowRankGaussian, SampleMask};
use crate::tracking::{apply_coefficients, masked_coefficients, TrackerState};

pub use doc::{MatrixDoc, NodeDoc, TreeDocument, TREE_FORMAT_VERSION};
pub use init::{InitReport, TreeInit};

pub type NodeId = usize;

/// Tolerance for the weight bookkeeping invariants.
pub const WEIGHT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Internal,
    Leaf,
    Virtual,
}

#[derive(Clone, Debug)]
pub struct TreeNode {
    pub id: NodeId,
    pub gaussian: LowRankGaussian,
    /// Mixture weight `q`.
    pub weight: f64,
    /// Forgetting-weighted cumulative negative log-likelihood `e`.
    pub cum_score: f64,
    pub tracker: TrackerState,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Option<[NodeId; 2]>,
}

/// Parameters governing updates and model-order changes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Forgetting factor in (0, 1).
    pub alpha: f64,
    /// Error tolerance gating splits (below) and merges (above).
    pub tol: f64,
    /// Complexity penalty per leaf.
    pub gamma: f64,
    /// Upper bound on the number of leaves.
    pub k_max: usize,
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ThinError::InvalidArgument(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(ThinError::InvalidArgument("gamma must be positive".into()));
        }
        if self.tol.is_nan() {
            return Err(ThinError::InvalidArgument("tol must not be NaN".into()));
        }
        if self.k_max == 0 {
            return Err(ThinError::InvalidArgument("k_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Structural change applied to the tree during a time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructureEvent {
    Split { leaf: NodeId },
    Merge { parent: NodeId },
}

#[derive(Clone, Debug)]
pub struct MixtureTree {
    nodes: BTreeMap<NodeId, TreeNode>,
    root: NodeId,
    next_id: NodeId,
    cum_error: f64,
    params: TreeParams,
    rank: usize,
    noise_var: f64,
    rank_deficient: bool,
}

/// Virtual-child initialization for a leaf: means at `μ ± √λ₁ v₁ / 2`,
/// the same basis, `λ₁` halved, remaining eigenvalues copied, and half of
/// the leaf's weight each.
pub fn virtual_children_init(g: &LowRankGaussian, weight: f64) -> [(LowRankGaussian, f64); 2] {
    let make = |sign: f64| {
        let mut mean = g.mean().clone();
        let mut eigs = g.eigs().clone();
        if g.rank() > 0 {
            let shift = g.eigs()[0].sqrt() / 2.0;
            mean.axpy(sign * shift, &g.basis().column(0), 1.0);
            eigs[0] /= 2.0;
        }
        (
            LowRankGaussian::from_parts(mean, g.basis().clone(), eigs, g.noise_var()),
            weight / 2.0,
        )
    };
    [make(1.0), make(-1.0)]
}

impl MixtureTree {
    /// A tree with one leaf (weight 1) and its two virtual children.
    pub fn single_leaf(gaussian: LowRankGaussian, params: TreeParams, init_scale: f64) -> Result<Self> {
        params.validate()?;
        let rank = gaussian.rank();
        let noise_var = gaussian.noise_var();
        let mut tree = Self {
            nodes: BTreeMap::new(),
            root: 0,
            next_id: 0,
            cum_error: 0.0,
            params,
            rank,
            noise_var,
            rank_deficient: false,
        };
        let root = tree.insert(
            gaussian,
            1.0,
            0.0,
            TrackerState::new(rank, init_scale),
            NodeKind::Leaf,
            None,
        );
        tree.root = root;
        tree.attach_virtual_children(root);
        Ok(tree)
    }

    fn insert(
        &mut self,
        gaussian: LowRankGaussian,
        weight: f64,
        cum_score: f64,
        tracker: TrackerState,
        kind: NodeKind,
        parent: Option<NodeId>,
    ) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(
            id,
            TreeNode {
                id,
                gaussian,
                weight,
                cum_score,
                tracker,
                kind,
                parent,
                children: None,
            },
        );
        id
    }

    /// Creates fresh virtual children under `leaf`. They inherit the leaf's
    /// tracker state and cumulative score.
    fn attach_virtual_children(&mut self, leaf: NodeId) {
        let node = &self.nodes[&leaf];
        let inits = virtual_children_init(&node.gaussian, node.weight);
        let tracker = node.tracker.clone();
        let cum_score = node.cum_score;
        let [(g1, w1), (g2, w2)] = inits;
        let a = self.insert(g1, w1, cum_score, tracker.clone(), NodeKind::Virtual, Some(leaf));
        let b = self.insert(g2, w2, cum_score, tracker, NodeKind::Virtual, Some(leaf));
        self.nodes.get_mut(&leaf).unwrap().children = Some([a, b]);
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(&id)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut TreeNode> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Leaf ids in ascending order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.kind == NodeKind::Leaf)
            .map(|n| n.id)
            .collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.values().filter(|n| n.kind == NodeKind::Leaf).count()
    }

    pub fn dim(&self) -> usize {
        self.nodes[&self.root].gaussian.dim()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// True when the training data had fewer than `rank` informative
    /// directions and the rank was reduced.
    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// Cumulative anomalousness `ε`.
    pub fn cum_error(&self) -> f64 {
        self.cum_error
    }

    #[cfg(test)]
    pub(crate) fn set_cum_error(&mut self, value: f64) {
        self.cum_error = value;
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn set_params(&mut self, params: TreeParams) -> Result<()> {
        params.validate()?;
        self.params = params;
        Ok(())
    }

    /// Replaces the shared isotropic noise variance on every node.
    pub fn set_noise_var(&mut self, noise_var: f64) -> Result<()> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(ThinError::InvalidArgument(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        self.noise_var = noise_var;
        for node in self.nodes.values_mut() {
            node.gaussian.set_noise_var(noise_var);
        }
        Ok(())
    }

    /// Leaf with the highest (optionally subsampled) likelihood of `x`,
    /// ignoring the mixture weights. Ties go to the smallest id.
    pub fn assign(&self, x: &DVector<f64>, mask: Option<&SampleMask>) -> Result<NodeId> {
        check_dim(self.dim(), x.len(), "observation length")?;
        let mut best: Option<(NodeId, f64)> = None;
        for id in self.leaves() {
            let g = &self.nodes[&id].gaussian;
            let ll = match mask {
                None => g.log_likelihood(x)?,
                Some(m) => g.masked_log_likelihood(&m.gather(x), m)?,
            };
            if best.is_none_or(|(_, b)| ll > b) {
                best = Some((id, ll));
            }
        }
        best.map(|(id, _)| id)
            .ok_or_else(|| ThinError::InvalidModel("tree has no leaves".into()))
    }

    /// `ε ← α ε + mean(scores)` and, for every node with a non-empty
    /// assignment set, `e ← α e + mean(−log p)`. Nodes absent from
    /// `node_neg_log_lik` (or with empty lists) keep their `e`.
    pub fn update_cumulative_scores(
        &mut self,
        batch_scores: &[f64],
        node_neg_log_lik: &BTreeMap<NodeId, Vec<f64>>,
    ) {
        let alpha = self.params.alpha;
        if !batch_scores.is_empty() {
            let mean = batch_scores.iter().sum::<f64>() / batch_scores.len() as f64;
            self.cum_error = alpha * self.cum_error + mean;
        }
        for (id, values) in node_neg_log_lik {
            if values.is_empty() {
                continue;
            }
            if let Some(node) = self.nodes.get_mut(id) {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                node.cum_score = alpha * node.cum_score + mean;
            }
        }
    }

    /// Weighted average of two nodes' cumulative scores.
    fn weighted_score(&self, a: NodeId, b: NodeId) -> f64 {
        let (na, nb) = (&self.nodes[&a], &self.nodes[&b]);
        let total = na.weight + nb.weight;
        if total > 0.0 {
            (na.weight * na.cum_score + nb.weight * nb.cum_score) / total
        } else {
            0.5 * (na.cum_score + nb.cum_score)
        }
    }

    /// Promotes `leaf`'s virtual children when the error is below
    /// tolerance, the tree has room, and the penalized score improves.
    pub fn maybe_split(&mut self, leaf: NodeId) -> bool {
        let Some(node) = self.nodes.get(&leaf) else {
            return false;
        };
        if node.kind != NodeKind::Leaf || !(self.cum_error < self.params.tol) {
            return false;
        }
        let k = self.leaf_count();
        if k >= self.params.k_max {
            return false;
        }
        let [a, b] = node.children.expect("leaf has virtual children");
        let gamma = self.params.gamma;
        let k = k as f64;
        let lhs = node.cum_score + gamma * k;
        let rhs = self.weighted_score(a, b) + gamma * (k + 1.0);
        if lhs > rhs {
            self.grow(leaf);
            true
        } else {
            false
        }
    }

    /// Collapses `leaf` and its sibling into their parent when the error is
    /// above tolerance and the parent's penalized score is lower. Both
    /// children must be leaves.
    pub fn maybe_merge(&mut self, leaf: NodeId) -> bool {
        let Some(node) = self.nodes.get(&leaf) else {
            return false;
        };
        if node.kind != NodeKind::Leaf || !(self.cum_error > self.params.tol) {
            return false;
        }
        let k = self.leaf_count();
        if k <= 1 {
            return false;
        }
        let Some(parent) = node.parent else {
            return false;
        };
        let [c1, c2] = self.nodes[&parent].children.expect("parent has children");
        let sibling = if c1 == leaf { c2 } else { c1 };
        if self.nodes[&sibling].kind != NodeKind::Leaf {
            return false;
        }
        let gamma = self.params.gamma;
        let k = k as f64;
        let lhs = self.nodes[&parent].cum_score + gamma * (k - 1.0);
        let rhs = self.weighted_score(c1, c2) + gamma * k;
        if lhs < rhs {
            self.prune(parent);
            true
        } else {
            false
        }
    }

    /// Turns `leaf` into an internal node whose (formerly virtual) children
    /// become leaves, each with fresh virtual children.
    pub fn grow(&mut self, leaf: NodeId) {
        let [a, b] = {
            let node = self.nodes.get_mut(&leaf).expect("leaf exists");
            assert_eq!(node.kind, NodeKind::Leaf, "only leaves can grow");
            node.kind = NodeKind::Internal;
            node.children.expect("leaf has virtual children")
        };
        for child in [a, b] {
            self.nodes.get_mut(&child).unwrap().kind = NodeKind::Leaf;
            self.attach_virtual_children(child);
        }
    }

    /// Deletes the four virtual grandchildren of `parent`, demotes its two
    /// leaf children to virtual, and makes `parent` a leaf.
    pub fn prune(&mut self, parent: NodeId) {
        let [c1, c2] = self.nodes[&parent].children.expect("parent has children");
        for child in [c1, c2] {
            let node = self.nodes.get_mut(&child).unwrap();
            assert_eq!(node.kind, NodeKind::Leaf, "only leaf pairs can merge");
            let grandchildren = node.children.take();
            node.kind = NodeKind::Virtual;
            if let Some(gc) = grandchildren {
                for id in gc {
                    self.nodes.remove(&id);
                }
            }
        }
        self.nodes.get_mut(&parent).unwrap().kind = NodeKind::Leaf;
    }

    /// Ids of `id` and all of its non-virtual ancestors, leaf first.
    pub fn branch(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut cur = self.nodes[&id].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[&p].parent;
        }
        out
    }

    /// Verifies the structural and numerical invariants of the tree.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let leaves = self.leaves();
        if leaves.is_empty() {
            return Err("no leaves".into());
        }
        if leaves.len() > self.params.k_max {
            return Err(format!("{} leaves exceed k_max {}", leaves.len(), self.params.k_max));
        }
        let total: f64 = leaves.iter().map(|id| self.nodes[id].weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(format!("leaf weights sum to {total}"));
        }
        for node in self.nodes.values() {
            let err = orthonormality_error(node.gaussian.basis());
            if err > 1e-8 {
                return Err(format!("node {} basis off orthonormal by {err:e}", node.id));
            }
            match node.kind {
                NodeKind::Virtual => {
                    if node.children.is_some() {
                        return Err(format!("virtual node {} has children", node.id));
                    }
                }
                NodeKind::Leaf | NodeKind::Internal => {
                    let Some([a, b]) = node.children else {
                        return Err(format!("node {} lacks children", node.id));
                    };
                    let want = if node.kind == NodeKind::Leaf {
                        NodeKind::Virtual
                    } else {
                        NodeKind::Internal
                    };
                    for c in [a, b] {
                        let Some(child) = self.nodes.get(&c) else {
                            return Err(format!("node {} references missing child {c}", node.id));
                        };
                        let ok = if want == NodeKind::Virtual {
                            child.kind == NodeKind::Virtual
                        } else {
                            child.kind != NodeKind::Virtual
                        };
                        if !ok || child.parent != Some(node.id) {
                            return Err(format!("node {} has malformed child {c}", node.id));
                        }
                    }
                    if node.kind == NodeKind::Internal {
                        let sum = self.nodes[&a].weight + self.nodes[&b].weight;
                        if (sum - node.weight).abs() > WEIGHT_TOL {
                            return Err(format!(
                                "internal node {} weight {} != children sum {sum}",
                                node.id, node.weight
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exponentially-forgotten update of one node from the observations
/// assigned to it at this step.
///
/// `x_obs` holds the observed coordinates (all of them when `mask` is
/// `None`). The weight, mean, eigenvalues, and subspace are updated in that
/// order; the subspace coefficients are taken against the mean from before
/// this step.
pub(crate) fn update_node_statistics(
    node: &mut TreeNode,
    x_obs: &DMatrix<f64>,
    mask: Option<&SampleMask>,
    n_total: usize,
    alpha: f64,
) -> Result<()> {
    let n = x_obs.ncols();
    if n == 0 {
        return Err(ThinError::InvalidArgument("empty node batch".into()));
    }
    if n_total < n {
        return Err(ThinError::InvalidArgument(format!(
            "node batch {n} larger than total batch {n_total}"
        )));
    }
    node.weight = alpha * node.weight + (1.0 - alpha) * n as f64 / n_total as f64;

    let g = &node.gaussian;
    let old_mean = match mask {
        None => g.mean().clone(),
        Some(m) => m.gather(g.mean()),
    };
    check_dim(old_mean.len(), x_obs.nrows(), "node batch rows")?;
    let mut centered = x_obs.clone();
    for mut col in centered.column_iter_mut() {
        col -= &old_mean;
    }
    let batch_mean = x_obs.column_mean();

    {
        let mean = node.gaussian.mean_mut();
        match mask {
            None => {
                *mean *= alpha;
                mean.axpy(1.0 - alpha, &batch_mean, 1.0);
            }
            Some(m) => {
                for (k, &i) in m.indices().iter().enumerate() {
                    mean[i] = alpha * mean[i] + (1.0 - alpha) * batch_mean[k];
                }
            }
        }
    }

    let g = &node.gaussian;
    let r = g.rank();
    if r == 0 {
        return Ok(());
    }
    let b = match mask {
        None => g.basis().tr_mul(&centered),
        Some(m) => {
            if m.len() < r {
                // Underdetermined projection: weight and mean only.
                return Ok(());
            }
            masked_coefficients(&m.gather_rows(g.basis()), &centered)?
        }
    };

    let mut eigs = g.eigs().clone();
    for (m, row) in b.row_iter().enumerate() {
        eigs[m] = alpha * eigs[m] + (1.0 - alpha) * row.norm_squared() / n as f64;
    }

    match apply_coefficients(g.basis(), &node.tracker, &centered, &b, mask, alpha) {
        Ok((basis, tracker)) => {
            node.gaussian.set_basis(basis);
            node.tracker = tracker;
        }
        Err(err) => {
            log::warn!("node {}: subspace update skipped: {err}", node.id);
        }
    }
    node.gaussian.set_eigs(eigs);
    Ok(())
}

/// Updates a node from a full-coordinate batch `x_assigned` (`p × n`).
pub fn update_leaf_statistics(
    node: &mut TreeNode,
    x_assigned: &DMatrix<f64>,
    n_total: usize,
    alpha: f64,
) -> Result<()> {
    update_node_statistics(node, x_assigned, None, n_total, alpha)
}

/// Weight decay for a node that received nothing at this step.
pub fn decay_idle_leaf(node: &mut TreeNode, alpha: f64) {
    node.weight *= alpha;
}
