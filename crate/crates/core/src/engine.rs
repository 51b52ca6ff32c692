//! The streaming loop: score each mini-batch against a frozen snapshot,
//! update node statistics and cumulative scores, adapt the tree, and flag
//! observations whose score exceeds the threshold.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, ThinError};
use crate::model::{MaskedGaussian, SampleMask};
use crate::tracking::DEFAULT_INIT_SCALE;
use crate::tree::{
    update_node_statistics, InitReport, MixtureTree, NodeId, NodeKind, StructureEvent, TreeDocument,
    TreeInit, TreeParams,
};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Work per batch (columns × leaves × p) above which scoring fans out.
const PARALLEL_WORK: usize = 1 << 18;

/// Engine configuration. Fields left as `None` are derived from the
/// training block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub alpha: f64,
    /// Score threshold. Defaults to the 95th percentile of training scores.
    pub tau: Option<f64>,
    /// Error tolerance. Defaults to the 90th percentile of training scores
    /// expressed on the scale of the forgetting-weighted sum, `q90 / (1 − α)`.
    pub tol: Option<f64>,
    /// Complexity penalty per leaf. Defaults to `0.1 · tol`.
    pub gamma: Option<f64>,
    pub rank: usize,
    /// Shared noise variance. Estimated from the training residuals by default.
    pub noise_var: Option<f64>,
    pub k_max: usize,
    pub subsample_rate: f64,
    pub seed: u64,
    pub init_depth: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            tau: None,
            tol: None,
            gamma: None,
            rank: 10,
            noise_var: None,
            k_max: 32,
            subsample_rate: 1.0,
            seed: 0,
            init_depth: 1,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ThinError::InvalidArgument(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if self.tau.is_some_and(f64::is_nan) {
            return bad("tau must not be NaN".into());
        }
        if let Some(tol) = self.tol {
            if !(tol > 0.0 && tol.is_finite()) {
                return bad(format!("tol must be positive and finite, got {tol}"));
            }
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("gamma must be positive and finite, got {g}"));
            }
        }
        if let Some(s2) = self.noise_var {
            if !(s2 > 0.0 && s2.is_finite()) {
                return bad(format!("noise_var must be positive and finite, got {s2}"));
            }
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        if !(self.subsample_rate > 0.0 && self.subsample_rate <= 1.0) {
            return bad(format!("subsample_rate must lie in (0,1], got {}", self.subsample_rate));
        }
        if self.init_depth >= usize::BITS as usize || (1usize << self.init_depth) > self.k_max {
            return bad(format!(
                "init_depth {} yields more than k_max = {} leaves",
                self.init_depth, self.k_max
            ));
        }
        Ok(())
    }
}

/// Observations arriving together at one time step, one per column.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationBatch {
    pub time_index: u64,
    pub data: DMatrix<f64>,
}

impl ObservationBatch {
    pub fn new(time_index: u64, data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return Err(ThinError::InvalidArgument("batch must be non-empty".into()));
        }
        Ok(Self { time_index, data })
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredObservation {
    pub time_index: u64,
    pub column_index: usize,
    pub score: f64,
    /// `None` for quarantined (non-finite) columns.
    pub assigned_leaf: Option<NodeId>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub scored: Vec<ScoredObservation>,
    /// Column indices of the flagged observations.
    pub thinned: Vec<usize>,
    pub events: Vec<StructureEvent>,
}

/// Values derived while fitting the initial model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSummary {
    pub init: InitReport,
    pub noise_var: f64,
    pub tol: f64,
    pub gamma: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub batches: u64,
    pub observations: u64,
    pub flagged: u64,
    pub quarantined: u64,
    /// Mean over finite scores.
    pub mean_score: f64,
    pub final_leaves: usize,
    pub splits: u64,
    pub merges: u64,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineCheckpoint {
    pub version: u32,
    pub config: EngineConfig,
    pub steps: u64,
    pub tree: TreeDocument,
}

/// `s = −log Σ_j q_j p_j(x)` over the leaves with positive weight.
pub fn score(tree: &MixtureTree, x: &DVector<f64>, mask: Option<&SampleMask>) -> Result<f64> {
    check_dim(tree.dim(), x.len(), "observation length")?;
    let x_obs = mask.map(|m| m.gather(x));
    let mut terms = Vec::new();
    for id in tree.leaves() {
        let node = tree.node(id).expect("leaf exists");
        if node.weight <= 0.0 {
            continue;
        }
        let ll = match (mask, &x_obs) {
            (Some(m), Some(xo)) => node.gaussian.masked_log_likelihood(xo, m)?,
            _ => node.gaussian.log_likelihood(x)?,
        };
        terms.push(node.weight.ln() + ll);
    }
    if terms.is_empty() {
        return Err(ThinError::InvalidModel("all leaf weights are zero".into()));
    }
    Ok(-log_sum_exp(&terms))
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Uniform random coordinate subset of size `max(r + 1, round(rate · p))`,
/// capped at `p`.
pub fn subsample_mask(p: usize, rate: f64, rank: usize, rng: &mut impl rand::Rng) -> Result<SampleMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(ThinError::InvalidArgument(format!("rate must lie in (0,1], got {rate}")));
    }
    if p == 0 {
        return Err(ThinError::InvalidArgument("dimension must be positive".into()));
    }
    let k = ((rate * p as f64).round() as usize).max(rank + 1).min(p);
    if k == p {
        return Ok(SampleMask::full(p));
    }
    let mut idx = index::sample(rng, p, k).into_vec();
    idx.sort_unstable();
    SampleMask::new(idx, p)
}

/// Linear-interpolation sample quantile of finite values.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Snapshot evaluator for one node at one step.
enum Evaluator {
    Full { log_det: f64 },
    Masked(MaskedGaussian),
}

/// Per-column results of the scoring phase.
struct ColumnEval {
    score: f64,
    leaf: NodeId,
    /// `(node, −log p)` for the leaf, its chosen virtual child, and ancestors.
    nll: Vec<(NodeId, f64)>,
}

pub struct ThinningEngine {
    config: EngineConfig,
    tree: MixtureTree,
    steps: u64,
    updates_enabled: bool,
}

impl ThinningEngine {
    /// Fits the initial tree to `training` (`p × N₀`) and resolves every
    /// data-derived setting.
    pub fn train(config: &EngineConfig, training: &DMatrix<f64>) -> Result<(Self, TrainingSummary)> {
        config.validate()?;
        let provisional = TreeParams {
            alpha: config.alpha,
            tol: config.tol.unwrap_or(1.0),
            gamma: config.gamma.unwrap_or(1.0),
            k_max: config.k_max,
        };
        let (mut tree, report) = MixtureTree::init(
            training,
            &TreeInit {
                rank: config.rank,
                init_depth: config.init_depth,
                noise_var: config.noise_var,
                init_scale: DEFAULT_INIT_SCALE,
                params: provisional,
            },
        )?;
        let scores = training
            .column_iter()
            .map(|c| score(&tree, &c.into_owned(), None))
            .collect::<Result<Vec<_>>>()?;
        let tol = match config.tol {
            Some(t) => t,
            None => quantile(&scores, 0.9).expect("training is non-empty") / (1.0 - config.alpha),
        };
        let gamma = config.gamma.unwrap_or(0.1 * tol.abs());
        if !(gamma > 0.0) {
            return Err(ThinError::InvalidArgument(
                "derived gamma is zero; set gamma explicitly".into(),
            ));
        }
        let tau = config.tau.unwrap_or_else(|| quantile(&scores, 0.95).expect("non-empty"));
        tree.set_params(TreeParams {
            alpha: config.alpha,
            tol,
            gamma,
            k_max: config.k_max,
        })?;
        let noise_var = tree.noise_var();
        let resolved = EngineConfig {
            tau: Some(tau),
            tol: Some(tol),
            gamma: Some(gamma),
            noise_var: Some(noise_var),
            rank: tree.rank(),
            ..config.clone()
        };
        if report.rank_deficient {
            log::warn!(
                "training data supports rank {} only; requested {}",
                report.effective_rank,
                config.rank
            );
        }
        let summary = TrainingSummary {
            init: report,
            noise_var,
            tol,
            gamma,
            tau,
        };
        Ok((
            Self {
                config: resolved,
                tree,
                steps: 0,
                updates_enabled: true,
            },
            summary,
        ))
    }

    /// Wraps an existing tree. Data-derived settings must be present in
    /// `config` except `noise_var`, which is read from the tree.
    pub fn from_tree(config: &EngineConfig, mut tree: MixtureTree) -> Result<Self> {
        config.validate()?;
        let (Some(tau), Some(tol), Some(gamma)) = (config.tau, config.tol, config.gamma) else {
            return Err(ThinError::InvalidArgument(
                "tau, tol and gamma are required without training data".into(),
            ));
        };
        tree.set_params(TreeParams {
            alpha: config.alpha,
            tol,
            gamma,
            k_max: config.k_max,
        })?;
        if let Some(s2) = config.noise_var {
            tree.set_noise_var(s2)?;
        }
        let config = EngineConfig {
            tau: Some(tau),
            noise_var: Some(tree.noise_var()),
            rank: tree.rank(),
            ..config.clone()
        };
        Ok(Self {
            config,
            tree,
            steps: 0,
            updates_enabled: true,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn tree(&self) -> &MixtureTree {
        &self.tree
    }

    pub fn dim(&self) -> usize {
        self.tree.dim()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.config.tau.expect("resolved at construction")
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if tau.is_nan() {
            return Err(ThinError::InvalidArgument("tau must not be NaN".into()));
        }
        self.config.tau = Some(tau);
        Ok(())
    }

    /// With updates disabled the model stays frozen and batches are only
    /// scored and thresholded.
    pub fn set_updates_enabled(&mut self, enabled: bool) {
        self.updates_enabled = enabled;
    }

    /// Mask used at time step `t`, or `None` when every coordinate is used.
    pub fn mask_for_step(&self, t: u64) -> Result<Option<SampleMask>> {
        if self.config.subsample_rate >= 1.0 {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(t);
        let mask = subsample_mask(self.dim(), self.config.subsample_rate, self.tree.rank(), &mut rng)?;
        Ok((!mask.is_full()).then_some(mask))
    }

    fn evaluators(&self, mask: Option<&SampleMask>) -> Result<BTreeMap<NodeId, Evaluator>> {
        self.tree
            .nodes()
            .map(|n| {
                let ev = match mask {
                    None => Evaluator::Full {
                        log_det: n.gaussian.log_det(),
                    },
                    Some(m) => Evaluator::Masked(n.gaussian.restrict(m)?),
                };
                Ok((n.id, ev))
            })
            .collect()
    }

    fn evaluate_column(
        &self,
        evals: &BTreeMap<NodeId, Evaluator>,
        leaves: &[(NodeId, f64)],
        x: &DVector<f64>,
        x_obs: Option<&DVector<f64>>,
    ) -> Result<ColumnEval> {
        let ll = |id: NodeId| -> f64 {
            match (&evals[&id], x_obs) {
                (Evaluator::Masked(mg), Some(xo)) => mg.log_likelihood_unchecked(xo),
                (Evaluator::Full { log_det }, _) => {
                    self.tree.node(id).unwrap().gaussian.log_likelihood_with(*log_det, x)
                }
                (Evaluator::Masked(_), None) => unreachable!("masked evaluator without observed vector"),
            }
        };
        let mut best: Option<(NodeId, f64)> = None;
        let mut terms = Vec::with_capacity(leaves.len());
        for &(id, weight) in leaves {
            let l = ll(id);
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((id, l));
            }
            if weight > 0.0 {
                terms.push(weight.ln() + l);
            }
        }
        if terms.is_empty() {
            return Err(ThinError::InvalidModel("all leaf weights are zero".into()));
        }
        let (leaf, leaf_ll) = best.expect("tree has leaves");
        let mut nll = vec![(leaf, -leaf_ll)];
        let [a, b] = self.tree.node(leaf).unwrap().children.expect("leaf has virtual children");
        let (la, lb) = (ll(a), ll(b));
        nll.push(if lb > la { (b, -lb) } else { (a, -la) });
        let mut cur = self.tree.node(leaf).unwrap().parent;
        while let Some(p) = cur {
            nll.push((p, -ll(p)));
            cur = self.tree.node(p).unwrap().parent;
        }
        Ok(ColumnEval {
            score: -log_sum_exp(&terms),
            leaf,
            nll,
        })
    }

    /// Runs one time step on `batch`.
    pub fn process_batch(&mut self, batch: &ObservationBatch) -> Result<BatchOutput> {
        check_dim(self.dim(), batch.dim(), "batch dimension")?;
        let tau = self.tau();
        let mask = self.mask_for_step(batch.time_index)?;
        let evals = self.evaluators(mask.as_ref())?;
        let leaves: Vec<(NodeId, f64)> = self
            .tree
            .leaves()
            .into_iter()
            .map(|id| (id, self.tree.node(id).unwrap().weight))
            .collect();

        let n = batch.len();
        let eval_col = |i: usize| -> Result<Option<ColumnEval>> {
            let col = batch.data.column(i);
            if col.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            let x = col.into_owned();
            let x_obs = mask.as_ref().map(|m| m.gather(&x));
            self.evaluate_column(&evals, &leaves, &x, x_obs.as_ref()).map(Some)
        };
        let work = n * leaves.len() * self.dim();
        let cols: Vec<Option<ColumnEval>> = if work >= PARALLEL_WORK {
            (0..n).into_par_iter().map(eval_col).collect::<Result<_>>()?
        } else {
            (0..n).map(eval_col).collect::<Result<_>>()?
        };

        let mut scored = Vec::with_capacity(n);
        let mut thinned = Vec::new();
        for (i, c) in cols.iter().enumerate() {
            let (score, leaf) = match c {
                Some(c) => (c.score, Some(c.leaf)),
                None => (f64::INFINITY, None),
            };
            let flagged = score > tau;
            if flagged {
                thinned.push(i);
            }
            scored.push(ScoredObservation {
                time_index: batch.time_index,
                column_index: i,
                score,
                assigned_leaf: leaf,
                flagged,
            });
        }

        let events = if self.updates_enabled {
            self.update_model(batch, mask.as_ref(), &cols)?
        } else {
            Vec::new()
        };
        self.steps += 1;
        Ok(BatchOutput {
            scored,
            thinned,
            events,
        })
    }

    fn update_model(
        &mut self,
        batch: &ObservationBatch,
        mask: Option<&SampleMask>,
        cols: &[Option<ColumnEval>],
    ) -> Result<Vec<StructureEvent>> {
        let valid: Vec<(usize, &ColumnEval)> = cols
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i, c)))
            .collect();
        if valid.is_empty() {
            return Ok(Vec::new());
        }
        let n_valid = valid.len();
        let batch_scores: Vec<f64> = valid.iter().map(|(_, c)| c.score).collect();
        let mut node_cols: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        let mut node_nll: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        for &(i, c) in &valid {
            for &(id, v) in &c.nll {
                node_cols.entry(id).or_default().push(i);
                node_nll.entry(id).or_default().push(v);
            }
        }
        self.tree.update_cumulative_scores(&batch_scores, &node_nll);

        let alpha = self.config.alpha;
        let ids: Vec<NodeId> = self.tree.nodes().map(|n| n.id).collect();
        for id in ids {
            let node = self.tree.node_mut(id).expect("node exists");
            match node_cols.get(&id) {
                Some(idx) => {
                    let x_obs = gather(&batch.data, mask, idx);
                    update_node_statistics(node, &x_obs, mask, n_valid, alpha)?;
                }
                None => node.weight *= alpha,
            }
        }

        let mut events = Vec::new();
        let mut changed: Vec<NodeId> = Vec::new();
        for leaf in self.tree.leaves() {
            if !node_cols.contains_key(&leaf) || changed.contains(&leaf) {
                continue;
            }
            let node = self.tree.node(leaf).unwrap();
            if node.kind != NodeKind::Leaf {
                continue;
            }
            let parent = node.parent;
            if self.tree.maybe_split(leaf) {
                events.push(StructureEvent::Split { leaf });
                changed.push(leaf);
                changed.extend(self.tree.node(leaf).unwrap().children.unwrap());
            } else if self.tree.maybe_merge(leaf) {
                let p = parent.expect("merged leaf has a parent");
                events.push(StructureEvent::Merge { parent: p });
                changed.push(p);
                changed.extend(self.tree.node(p).unwrap().children.unwrap());
            }
        }
        Ok(events)
    }

    /// Feeds every batch from `source` through [`Self::process_batch`] and
    /// hands each batch's flagged records to `sink`.
    pub fn run_stream<I, F>(&mut self, source: I, mut sink: F) -> Result<RunSummary>
    where
        I: IntoIterator<Item = Result<ObservationBatch>>,
        F: FnMut(&[ScoredObservation]) -> Result<()>,
    {
        let start = Instant::now();
        let mut s = RunSummary::default();
        let mut score_sum = 0.0;
        let mut finite = 0u64;
        for (k, item) in source.into_iter().enumerate() {
            let wrap = |e: ThinError| ThinError::Batch {
                batch: k,
                source: Box::new(e),
            };
            let batch = item.map_err(wrap)?;
            let out = self.process_batch(&batch).map_err(wrap)?;
            s.batches += 1;
            s.observations += out.scored.len() as u64;
            for o in &out.scored {
                if o.score.is_finite() {
                    score_sum += o.score;
                    finite += 1;
                } else if o.assigned_leaf.is_none() {
                    s.quarantined += 1;
                }
            }
            for e in &out.events {
                match e {
                    StructureEvent::Split { .. } => s.splits += 1,
                    StructureEvent::Merge { .. } => s.merges += 1,
                }
            }
            let flagged: Vec<ScoredObservation> =
                out.scored.into_iter().filter(|o| o.flagged).collect();
            s.flagged += flagged.len() as u64;
            if !flagged.is_empty() {
                sink(&flagged).map_err(wrap)?;
            }
        }
        s.mean_score = if finite > 0 { score_sum / finite as f64 } else { 0.0 };
        s.final_leaves = self.tree.leaf_count();
        s.elapsed_secs = start.elapsed().as_secs_f64();
        Ok(s)
    }

    pub fn checkpoint(&self) -> EngineCheckpoint {
        EngineCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            steps: self.steps,
            tree: self.tree.to_document(),
        }
    }

    pub fn from_checkpoint(cp: &EngineCheckpoint) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(ThinError::InvalidArgument(format!(
                "unsupported checkpoint version {}",
                cp.version
            )));
        }
        let tree = MixtureTree::from_document(&cp.tree)?;
        let mut engine = Self::from_tree(&cp.config, tree)?;
        engine.steps = cp.steps;
        Ok(engine)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.checkpoint())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let cp: EngineCheckpoint = serde_json::from_reader(file)?;
        Self::from_checkpoint(&cp)
    }
}

/// Columns `idx` of `data`, restricted to the mask rows when present.
fn gather(data: &DMatrix<f64>, mask: Option<&SampleMask>, idx: &[usize]) -> DMatrix<f64> {
    match mask {
        None => DMatrix::from_fn(data.nrows(), idx.len(), |r, c| data[(r, idx[c])]),
        Some(m) => {
            let rows = m.indices();
            DMatrix::from_fn(rows.len(), idx.len(), |r, c| data[(rows[r], idx[c])])
        }
    }
}
