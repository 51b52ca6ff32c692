//! Versioned JSON form of a [`MixtureTree`] for checkpoint and resume.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{MixtureTree, NodeId, NodeKind, TreeNode, TreeParams};
use crate::error::{Result, ThinError};
use crate::model::LowRankGaussian;
use crate::tracking::TrackerState;

pub const TREE_FORMAT_VERSION: u32 = 1;

/// Dense matrix flattened in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDoc {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for row in m.row_iter() {
            data.extend(row.iter());
        }
        Self { rows, cols, data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(ThinError::InvalidArgument(format!(
                "matrix payload has {} entries for shape {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: NodeId,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub weight: f64,
    pub cum_score: f64,
    pub mean: Vec<f64>,
    pub basis: MatrixDoc,
    pub eigs: Vec<f64>,
    pub tracker: MatrixDoc,
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub version: u32,
    pub dim: usize,
    pub rank: usize,
    pub noise_var: f64,
    pub rank_deficient: bool,
    pub cum_error: f64,
    pub root: NodeId,
    pub next_id: NodeId,
    pub params: TreeParams,
    pub nodes: Vec<NodeDoc>,
}

impl MixtureTree {
    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            version: TREE_FORMAT_VERSION,
            dim: self.dim(),
            rank: self.rank,
            noise_var: self.noise_var,
            rank_deficient: self.rank_deficient,
            cum_error: self.cum_error,
            root: self.root,
            next_id: self.next_id,
            params: self.params,
            nodes: self
                .nodes
                .values()
                .map(|n| NodeDoc {
                    id: n.id,
                    kind: n.kind,
                    parent: n.parent,
                    children: n.children.map(|c| c.to_vec()).unwrap_or_default(),
                    weight: n.weight,
                    cum_score: n.cum_score,
                    mean: n.gaussian.mean().iter().copied().collect(),
                    basis: MatrixDoc::from_matrix(n.gaussian.basis()),
                    eigs: n.gaussian.eigs().iter().copied().collect(),
                    tracker: MatrixDoc::from_matrix(n.tracker.r_matrix()),
                    init_scale: n.tracker.init_scale(),
                })
                .collect(),
        }
    }

    /// Rebuilds a tree, validating every component and the structural
    /// invariants.
    pub fn from_document(doc: &TreeDocument) -> Result<Self> {
        if doc.version != TREE_FORMAT_VERSION {
            return Err(ThinError::InvalidArgument(format!(
                "unsupported tree format version {}",
                doc.version
            )));
        }
        doc.params.validate()?;
        let mut nodes = BTreeMap::new();
        for nd in &doc.nodes {
            if nd.mean.len() != doc.dim {
                return Err(ThinError::DimensionMismatch {
                    expected: doc.dim,
                    actual: nd.mean.len(),
                    context: "checkpoint node mean",
                });
            }
            let gaussian = LowRankGaussian::new(
                DVector::from_vec(nd.mean.clone()),
                nd.basis.to_matrix()?,
                DVector::from_vec(nd.eigs.clone()),
                doc.noise_var,
            )?;
            if gaussian.rank() != doc.rank {
                return Err(ThinError::InvalidArgument(format!(
                    "node {} has rank {} but tree rank is {}",
                    nd.id,
                    gaussian.rank(),
                    doc.rank
                )));
            }
            let tracker = TrackerState::from_matrix(nd.tracker.to_matrix()?, nd.init_scale)?;
            let children = match nd.children.as_slice() {
                [] => None,
                [a, b] => Some([*a, *b]),
                _ => {
                    return Err(ThinError::InvalidArgument(format!(
                        "node {} must have 0 or 2 children",
                        nd.id
                    )))
                }
            };
            if nd.id >= doc.next_id {
                return Err(ThinError::InvalidArgument(format!(
                    "node id {} not below next_id {}",
                    nd.id, doc.next_id
                )));
            }
            nodes.insert(
                nd.id,
                TreeNode {
                    id: nd.id,
                    gaussian,
                    weight: nd.weight,
                    cum_score: nd.cum_score,
                    tracker,
                    kind: nd.kind,
                    parent: nd.parent,
                    children,
                },
            );
        }
        if !nodes.contains_key(&doc.root) {
            return Err(ThinError::InvalidArgument("checkpoint root node missing".into()));
        }
        let tree = MixtureTree {
            nodes,
            root: doc.root,
            next_id: doc.next_id,
            cum_error: doc.cum_error,
            params: doc.params,
            rank: doc.rank,
            noise_var: doc.noise_var,
            rank_deficient: doc.rank_deficient,
        };
        tree.check_invariants().map_err(ThinError::InvalidModel)?;
        Ok(tree)
    }
}
