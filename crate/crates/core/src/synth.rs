//! Synthetic streams from a slowly rotating union of shifted subspaces.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ThinError};
use crate::tracking::orthonormalize;

const SKEW_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub ambient_dim: usize,
    pub subspace_rank: usize,
    /// Total subspaces; the last one holds the anomalies.
    pub n_subspaces: usize,
    pub inlier_fraction: f64,
    pub noise_var: f64,
    /// Rotation step `δ` applied to every inlier subspace after each draw.
    pub rotation_speed: f64,
    pub total: usize,
    /// Leading observations meant for fitting the initial model.
    pub train_count: usize,
    /// Norm of each subspace's offset from the origin.
    pub shift_norm: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 100,
            subspace_rank: 10,
            n_subspaces: 3,
            inlier_fraction: 0.95,
            noise_var: 0.1,
            rotation_speed: 0.0,
            total: 4000,
            train_count: 1000,
            shift_norm: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ThinError::InvalidArgument(m));
        let (p, r, k) = (self.ambient_dim, self.subspace_rank, self.n_subspaces);
        if r == 0 || r >= p {
            return bad(format!("subspace rank {r} must lie in [1, {p})"));
        }
        if k < 2 {
            return bad("need at least one inlier and one anomaly subspace".into());
        }
        if p < k * r {
            return bad(format!(
                "dimension {p} too small for {k} mutually orthogonal rank-{r} subspaces"
            ));
        }
        if !(self.inlier_fraction > 0.0 && self.inlier_fraction < 1.0) {
            return bad(format!("inlier fraction must lie in (0,1), got {}", self.inlier_fraction));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return bad(format!("noise variance must be non-negative, got {}", self.noise_var));
        }
        if !(self.rotation_speed >= 0.0 && self.rotation_speed.is_finite()) {
            return bad(format!("rotation speed must be non-negative, got {}", self.rotation_speed));
        }
        if !(self.shift_norm >= 0.0 && self.shift_norm.is_finite()) {
            return bad("shift norm must be non-negative".into());
        }
        if self.train_count > self.total {
            return bad(format!(
                "train count {} exceeds total {}",
                self.train_count, self.total
            ));
        }
        Ok(())
    }
}

/// A generated stream, one observation per column.
#[derive(Clone, Debug)]
pub struct SyntheticStream {
    pub data: DMatrix<f64>,
    /// `true` for anomalies.
    pub labels: Vec<bool>,
    /// Source subspace of each observation.
    pub sources: Vec<usize>,
    pub initial_bases: Vec<DMatrix<f64>>,
    pub final_bases: Vec<DMatrix<f64>>,
    pub shifts: Vec<DVector<f64>>,
    pub train_count: usize,
}

impl SyntheticStream {
    pub fn training(&self) -> DMatrix<f64> {
        self.data.columns(0, self.train_count).into_owned()
    }

    pub fn test_data(&self) -> DMatrix<f64> {
        self.data.columns(self.train_count, self.data.ncols() - self.train_count).into_owned()
    }

    pub fn test_labels(&self) -> &[bool] {
        &self.labels[self.train_count..]
    }
}

/// `V + δ (B / ‖B‖_F) V`, symmetrically re-orthonormalized.
pub fn rotate_subspace(v: &DMatrix<f64>, b: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    let p = v.nrows();
    if b.shape() != (p, p) {
        return Err(ThinError::DimensionMismatch {
            expected: p,
            actual: b.nrows(),
            context: "rotation generator size",
        });
    }
    if !(delta >= 0.0) {
        return Err(ThinError::InvalidArgument(format!("delta must be non-negative, got {delta}")));
    }
    let asym = (b + b.transpose()).amax();
    if asym > SKEW_TOL {
        return Err(ThinError::InvalidArgument(format!(
            "rotation generator is not skew-symmetric (|B + Bᵀ| = {asym:e})"
        )));
    }
    if delta == 0.0 {
        return Ok(v.clone());
    }
    let norm = b.norm();
    if norm == 0.0 {
        return Ok(v.clone());
    }
    let step = b * v * (delta / norm);
    orthonormalize(&(v + step))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Draws a stream: inliers from the first `n_subspaces − 1` subspaces
/// (chosen uniformly, each rotating by `δ` after every draw) and anomalies
/// from a static last subspace orthogonal to all others.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticStream> {
    cfg.validate()?;
    let (p, r, k) = (cfg.ambient_dim, cfg.subspace_rank, cfg.n_subspaces);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let raw = DMatrix::from_fn(p, k * r, |_, _| normal(&mut rng));
    let q = raw.qr().q();
    let mut bases: Vec<DMatrix<f64>> = (0..k).map(|j| q.columns(j * r, r).into_owned()).collect();
    let initial_bases = bases.clone();

    let shifts: Vec<DVector<f64>> = (0..k)
        .map(|_| {
            let s = DVector::from_fn(p, |_, _| rng.random_range(-0.1..=0.1));
            let n = s.norm();
            if n > 0.0 {
                s * (cfg.shift_norm / n)
            } else {
                s
            }
        })
        .collect();

    // Generators pre-scaled by δ/‖B‖_F.
    let generators: Vec<DMatrix<f64>> = (0..k - 1)
        .map(|_| {
            let a = DMatrix::from_fn(p, p, |_, _| normal(&mut rng));
            let b = (&a - a.transpose()) * 0.5;
            let norm = b.norm();
            b * (cfg.rotation_speed / norm)
        })
        .collect();

    let sigma = cfg.noise_var.sqrt();
    let mut data = DMatrix::zeros(p, cfg.total);
    let mut labels = Vec::with_capacity(cfg.total);
    let mut sources = Vec::with_capacity(cfg.total);
    let mut step = DMatrix::zeros(p, r);
    for t in 0..cfg.total {
        let anomaly = rng.random::<f64>() >= cfg.inlier_fraction;
        let src = if anomaly { k - 1 } else { rng.random_range(0..k - 1) };
        let coef = DVector::from_fn(r, |_, _| normal(&mut rng));
        let mut col = data.column_mut(t);
        col.gemv(1.0, &bases[src], &coef, 0.0);
        col += &shifts[src];
        for v in col.iter_mut() {
            *v += sigma * normal(&mut rng);
        }
        labels.push(anomaly);
        sources.push(src);
        if cfg.rotation_speed > 0.0 {
            for (v, g) in bases.iter_mut().zip(&generators) {
                step.gemm(1.0, g, v, 0.0);
                *v += &step;
                *v = orthonormalize(v)?;
            }
        }
    }
    Ok(SyntheticStream {
        data,
        labels,
        sources,
        initial_bases,
        final_bases: bases,
        shifts,
        train_count: cfg.train_count,
    })
}
