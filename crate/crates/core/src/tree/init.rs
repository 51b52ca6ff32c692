//! Building an initial tree from a block of training observations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{virtual_children_init, MixtureTree, NodeId, NodeKind, TreeParams};
use crate::error::{Result, ThinError};
use crate::model::LowRankGaussian;
use crate::tracking::TrackerState;

const COLD_ITERS: usize = 40;
const WARM_ITERS: usize = 6;
const LLOYD_ITERS: usize = 15;

/// Settings for [`MixtureTree::init`].
#[derive(Clone, Copy, Debug)]
pub struct TreeInit {
    pub rank: usize,
    /// Number of bisection levels below the root.
    pub init_depth: usize,
    /// Shared noise variance; estimated from the leaf residuals when `None`.
    pub noise_var: Option<f64>,
    /// `c` in the initial tracker state `c · 1 1ᵀ`.
    pub init_scale: f64,
    pub params: TreeParams,
}

/// What initialization found out about the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    /// Rank actually used (smaller than requested for degenerate data).
    pub effective_rank: usize,
    pub rank_deficient: bool,
    /// Noise variance estimated from the leaves' residual spectra.
    pub estimated_noise_var: f64,
    pub leaf_sizes: Vec<usize>,
}

/// Principal-subspace fit of a subset of training columns.
#[derive(Clone, Debug)]
struct Fit {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    eigs: DVector<f64>,
    residual_var: f64,
}

/// Minimum training sample size for a rank-`r` model.
pub fn min_training_size(rank: usize) -> usize {
    (2 * rank).max(20)
}

fn gather_centered(data: &DMatrix<f64>, idx: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let p = data.nrows();
    let mut mean = DVector::zeros(p);
    for &i in idx {
        mean += data.column(i);
    }
    mean /= idx.len() as f64;
    let mut c = data.select_columns(idx.iter());
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    (mean, c)
}

fn orthonormal_columns(m: DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    m.qr().q().columns(0, k).into_owned()
}

/// Top-`rank` eigenpairs of the centered second moment `C Cᵀ / n`,
/// computed by block subspace iteration in `O(p n r)` per sweep.
fn fit_subset(data: &DMatrix<f64>, idx: &[usize], rank: usize, warm: Option<&DMatrix<f64>>) -> Fit {
    let p = data.nrows();
    let n = idx.len() as f64;
    let (mean, c) = gather_centered(data, idx);
    let total = c.norm_squared() / n;
    if rank == 0 {
        return Fit {
            mean,
            basis: DMatrix::zeros(p, 0),
            eigs: DVector::zeros(0),
            residual_var: total / p as f64,
        };
    }
    let (mut q, iters) = match warm {
        Some(w) => (w.clone(), WARM_ITERS),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ (p as u64) << 8 ^ rank as u64);
            let g = DMatrix::from_fn(p, rank, |_, _| StandardNormal.sample(&mut rng));
            (orthonormal_columns(g), COLD_ITERS)
        }
    };
    for _ in 0..iters {
        let z = c.tr_mul(&q);
        q = orthonormal_columns(&c * z);
    }
    // Rayleigh–Ritz on the converged block.
    let z = c.tr_mul(&q);
    let t = z.tr_mul(&z) / n;
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rot = eig.eigenvectors.select_columns(order.iter());
    let eigs = DVector::from_iterator(rank, order.iter().map(|&k| eig.eigenvalues[k].max(0.0)));
    let basis = orthonormal_columns(q * rot);
    // QR may flip column signs; the span and eigenvalue order are what matter.
    let residual_var = ((total - eigs.sum()) / (p - rank) as f64).max(0.0);
    Fit {
        mean,
        basis,
        eigs,
        residual_var,
    }
}

fn fit_to_gaussian(fit: &Fit, noise_var: f64) -> LowRankGaussian {
    LowRankGaussian::from_parts(fit.mean.clone(), fit.basis.clone(), fit.eigs.clone(), noise_var)
}

fn log_liks(g: &LowRankGaussian, data: &DMatrix<f64>, idx: &[usize]) -> Vec<f64> {
    let ld = g.log_det();
    idx.iter()
        .map(|&i| g.log_likelihood_with(ld, &data.column(i)))
        .collect()
}

struct Split {
    left: (Vec<usize>, Fit),
    right: (Vec<usize>, Fit),
    total_ll: f64,
}

/// Alternating likelihood assignment and refit, starting from two seed
/// components. Returns `None` when a side becomes too small to fit.
fn lloyd(
    data: &DMatrix<f64>,
    idx: &[usize],
    seeds: [LowRankGaussian; 2],
    rank: usize,
    noise_var: f64,
    min_size: usize,
) -> Option<Split> {
    let mut comps = seeds;
    let mut fits: Option<[Fit; 2]> = None;
    let mut labels: Vec<bool> = Vec::new();
    let mut total_ll = f64::NEG_INFINITY;
    for _ in 0..LLOYD_ITERS {
        let la = log_liks(&comps[0], data, idx);
        let lb = log_liks(&comps[1], data, idx);
        let new_labels: Vec<bool> = la.iter().zip(&lb).map(|(a, b)| b > a).collect();
        total_ll = la.iter().zip(&lb).map(|(a, b)| a.max(*b)).sum();
        let converged = new_labels == labels;
        labels = new_labels;
        if converged && fits.is_some() {
            break;
        }
        let left: Vec<usize> = idx.iter().zip(&labels).filter(|(_, &l)| !l).map(|(&i, _)| i).collect();
        let right: Vec<usize> = idx.iter().zip(&labels).filter(|(_, &l)| l).map(|(&i, _)| i).collect();
        if left.len() < min_size || right.len() < min_size {
            return None;
        }
        let warm = fits.as_ref().map(|f| [f[0].basis.clone(), f[1].basis.clone()]);
        let fa = fit_subset(data, &left, rank, warm.as_ref().map(|w| &w[0]));
        let fb = fit_subset(data, &right, rank, warm.as_ref().map(|w| &w[1]));
        comps = [fit_to_gaussian(&fa, noise_var), fit_to_gaussian(&fb, noise_var)];
        fits = Some([fa, fb]);
    }
    let [fa, fb] = fits?;
    let left: Vec<usize> = idx.iter().zip(&labels).filter(|(_, &l)| !l).map(|(&i, _)| i).collect();
    let right: Vec<usize> = idx.iter().zip(&labels).filter(|(_, &l)| l).map(|(&i, _)| i).collect();
    if left.len() < min_size || right.len() < min_size {
        return None;
    }
    // Refit on the final partition so fits and labels agree.
    let fa = fit_subset(data, &left, rank, Some(&fa.basis));
    let fb = fit_subset(data, &right, rank, Some(&fb.basis));
    Some(Split {
        left: (left, fa),
        right: (right, fb),
        total_ll,
    })
}

/// Seeds a split from the direction of the most extreme point: its
/// closest neighbours in absolute cosine seed one side, the points worst
/// explained by that side seed the other.
fn residual_seeds(
    data: &DMatrix<f64>,
    idx: &[usize],
    parent: &Fit,
    rank: usize,
    noise_var: f64,
    min_size: usize,
) -> [LowRankGaussian; 2] {
    let centered: Vec<DVector<f64>> = idx.iter().map(|&i| data.column(i) - &parent.mean).collect();
    let norms: Vec<f64> = centered.iter().map(|d| d.norm()).collect();
    let anchor = (0..idx.len())
        .max_by(|&a, &b| norms[a].total_cmp(&norms[b]))
        .unwrap();
    let mut by_cos: Vec<(f64, usize)> = (0..idx.len())
        .map(|k| {
            let denom = norms[k] * norms[anchor];
            let cos = if denom > 0.0 {
                (centered[k].dot(&centered[anchor]) / denom).abs()
            } else {
                0.0
            };
            (cos, idx[k])
        })
        .collect();
    by_cos.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let take = (idx.len() / 4).max(min_size).min(idx.len());
    let seed_a: Vec<usize> = by_cos.iter().take(take).map(|&(_, i)| i).collect();
    let fa = fit_subset(data, &seed_a, rank, None);

    let mut by_resid: Vec<(f64, usize)> = idx
        .iter()
        .map(|&i| {
            let d = data.column(i) - &fa.mean;
            let c = fa.basis.tr_mul(&d);
            (d.norm_squared() - c.norm_squared(), i)
        })
        .collect();
    by_resid.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let take = (idx.len() / 2).max(min_size).min(idx.len());
    let seed_b: Vec<usize> = by_resid.iter().take(take).map(|&(_, i)| i).collect();
    let fb = fit_subset(data, &seed_b, rank, None);
    [fit_to_gaussian(&fa, noise_var), fit_to_gaussian(&fb, noise_var)]
}

fn bisect(
    data: &DMatrix<f64>,
    idx: &[usize],
    parent: &Fit,
    rank: usize,
    noise_var: f64,
    min_size: usize,
) -> Option<Split> {
    if idx.len() < 2 * min_size {
        return None;
    }
    let parent_g = fit_to_gaussian(parent, noise_var);
    let [(a, _), (b, _)] = virtual_children_init(&parent_g, 1.0);
    let candidates = [
        lloyd(data, idx, [a, b], rank, noise_var, min_size),
        lloyd(
            data,
            idx,
            residual_seeds(data, idx, parent, rank, noise_var, min_size),
            rank,
            noise_var,
            min_size,
        ),
    ];
    candidates
        .into_iter()
        .flatten()
        .max_by(|x, y| x.total_ll.total_cmp(&y.total_ll))
}

struct Pending {
    id: NodeId,
    idx: Vec<usize>,
    fit: Fit,
    depth: usize,
}

impl MixtureTree {
    /// Fits a root component to `training` (`p × N₀`, one observation per
    /// column) and bisects it `init_depth` levels by alternating likelihood
    /// assignment and principal-subspace refits. Leaf weights are the
    /// empirical fractions; all cumulative scores start at zero.
    pub fn init(training: &DMatrix<f64>, init: &TreeInit) -> Result<(Self, InitReport)> {
        init.params.validate()?;
        let (p, n0) = training.shape();
        let need = min_training_size(init.rank);
        if n0 < need {
            return Err(ThinError::InsufficientTraining { got: n0, need });
        }
        if init.rank >= p {
            return Err(ThinError::InvalidArgument(format!(
                "rank {} must be smaller than dimension {p}",
                init.rank
            )));
        }
        if training.iter().any(|v| !v.is_finite()) {
            return Err(ThinError::NonFinite("training data"));
        }
        if let Some(s2) = init.noise_var {
            if !(s2 > 0.0 && s2.is_finite()) {
                return Err(ThinError::InvalidArgument(format!(
                    "noise variance must be positive, got {s2}"
                )));
            }
        }

        let all: Vec<usize> = (0..n0).collect();
        let mut root_fit = fit_subset(training, &all, init.rank, None);
        let top = root_fit.eigs.iter().copied().fold(0.0, f64::max);
        let informative = root_fit.eigs.iter().filter(|&&l| l > 1e-10 * top && top > 0.0).count();
        let mut rank = init.rank;
        let mut rank_deficient = false;
        if informative < rank {
            log::warn!(
                "training data has only {informative} informative directions; reducing rank from {rank}"
            );
            rank = informative;
            rank_deficient = true;
            root_fit = fit_subset(training, &all, rank, None);
        }
        let floor = 1e-6 * top.max(1e-12);
        let working_var = init.noise_var.unwrap_or(root_fit.residual_var.max(floor));
        let min_size = min_training_size(rank) / 2;

        let mut tree = MixtureTree {
            nodes: Default::default(),
            root: 0,
            next_id: 0,
            cum_error: 0.0,
            params: init.params,
            rank,
            noise_var: working_var,
            rank_deficient,
        };
        let tracker = TrackerState::new(rank, init.init_scale);
        let root = tree.insert(
            fit_to_gaussian(&root_fit, working_var),
            1.0,
            0.0,
            tracker.clone(),
            NodeKind::Leaf,
            None,
        );
        tree.root = root;

        let mut leaf_info: Vec<(NodeId, usize, f64)> = Vec::new();
        let mut stack = vec![Pending {
            id: root,
            idx: all,
            fit: root_fit,
            depth: 0,
        }];
        while let Some(job) = stack.pop() {
            let split = if job.depth < init.init_depth {
                bisect(training, &job.idx, &job.fit, rank, working_var, min_size)
            } else {
                None
            };
            match split {
                None => leaf_info.push((job.id, job.idx.len(), job.fit.residual_var)),
                Some(split) => {
                    tree.nodes.get_mut(&job.id).unwrap().kind = NodeKind::Internal;
                    let mut ids = [0; 2];
                    let mut next = Vec::new();
                    for (slot, (idx, fit)) in [split.left, split.right].into_iter().enumerate() {
                        let id = tree.insert(
                            fit_to_gaussian(&fit, working_var),
                            idx.len() as f64 / n0 as f64,
                            0.0,
                            tracker.clone(),
                            NodeKind::Leaf,
                            Some(job.id),
                        );
                        ids[slot] = id;
                        next.push(Pending {
                            id,
                            idx,
                            fit,
                            depth: job.depth + 1,
                        });
                    }
                    tree.nodes.get_mut(&job.id).unwrap().children = Some(ids);
                    // Right first on the stack so the left subtree is numbered first.
                    stack.extend(next.into_iter().rev());
                }
            }
        }

        let estimated = leaf_info
            .iter()
            .map(|&(_, size, var)| size as f64 * var)
            .sum::<f64>()
            / n0 as f64;
        let estimated = estimated.max(floor);
        tree.set_noise_var(init.noise_var.unwrap_or(estimated))?;

        leaf_info.sort_by_key(|&(id, _, _)| id);
        for &(id, _, _) in &leaf_info {
            tree.attach_virtual_children(id);
        }
        let report = InitReport {
            effective_rank: rank,
            rank_deficient,
            estimated_noise_var: estimated,
            leaf_sizes: leaf_info.iter().map(|&(_, size, _)| size).collect(),
        };
        Ok((tree, report))
    }
}
