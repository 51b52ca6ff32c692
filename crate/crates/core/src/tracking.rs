//! Mini-batch PETRELS subspace tracking, with and without coordinate
//! subsampling.
//!
//! One update step for centered data `D = X − M` (`p × n`):
//!
//! ```text
//! B  = V# D
//! R' = α R + B Bᵀ
//! Ṽ  = V + (D Bᵀ − V B Bᵀ) R'#
//! V' = Ṽ (ṼᵀṼ)^(-1/2)
//! ```
//!
//! The subsampled variant replaces `V`, `D` by their rows in `Ω` when
//! forming `B` and only corrects those rows of `Ṽ`.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{check_dim, Result, ThinError};
use crate::model::SampleMask;

/// Default `c` in `R₀ = c · 1 1ᵀ`.
pub const DEFAULT_INIT_SCALE: f64 = 1e-6;

/// Ridge added to `P_Ω(V)ᵀ P_Ω(V)` when that Gram matrix is near singular.
pub const MASKED_RIDGE: f64 = 1e-10;

/// Relative cutoff below which eigenvalues are treated as zero in [`pinv_psd`].
pub const PINV_RCOND: f64 = 1e-12;

/// Recursive-least-squares state `R` carried by each tracked subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    r_matrix: DMatrix<f64>,
    init_scale: f64,
}

impl TrackerState {
    /// `R = c · 1_{r×r}` (rank one, as in the original initialization).
    pub fn new(rank: usize, init_scale: f64) -> Self {
        Self {
            r_matrix: DMatrix::from_element(rank, rank, init_scale),
            init_scale,
        }
    }

    pub fn from_matrix(r_matrix: DMatrix<f64>, init_scale: f64) -> Result<Self> {
        if !r_matrix.is_square() {
            return Err(ThinError::InvalidArgument("tracker matrix must be square".into()));
        }
        let asym = max_asymmetry(&r_matrix);
        if asym > 1e-10 * r_matrix.amax().max(1.0) {
            return Err(ThinError::Asymmetric(asym));
        }
        Ok(Self {
            r_matrix,
            init_scale,
        })
    }

    pub fn r_matrix(&self) -> &DMatrix<f64> {
        &self.r_matrix
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale
    }

    pub fn rank(&self) -> usize {
        self.r_matrix.nrows()
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Projection coefficients `B = Vᵀ (X − M)` for an orthonormal basis.
pub fn compute_residual(
    basis: &DMatrix<f64>,
    x: &DMatrix<f64>,
    m: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dim(x.ncols(), m.ncols(), "data vs means columns")?;
    check_dim(basis.nrows(), x.nrows(), "data rows vs basis rows")?;
    check_dim(basis.nrows(), m.nrows(), "means rows vs basis rows")?;
    Ok(basis.tr_mul(&(x - m)))
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix.
pub fn pinv_psd(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !r.is_square() {
        return Err(ThinError::InvalidArgument("pinv_psd needs a square matrix".into()));
    }
    let asym = max_asymmetry(r);
    if asym > 1e-10 * r.amax().max(1.0) {
        return Err(ThinError::Asymmetric(asym));
    }
    let n = r.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut sym = r.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.max();
    let mut out = DMatrix::zeros(n, n);
    if top <= 0.0 {
        return Ok(out);
    }
    let cutoff = PINV_RCOND * top;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    Ok(out)
}

/// Symmetric orthonormalization `Ṽ (ṼᵀṼ)^(-1/2)`; keeps the column span and
/// stays as close to `Ṽ` as possible (unlike a QR basis change).
pub fn orthonormalize(vt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = vt.ncols();
    if r == 0 {
        return Ok(vt.clone());
    }
    if vt.iter().any(|v| !v.is_finite()) {
        return Err(ThinError::NonFinite("basis to orthonormalize"));
    }
    let mut gram = vt.tr_mul(vt);
    symmetrize(&mut gram);
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.max();
    let low = eig.eigenvalues.min();
    if !(top > 0.0) || low <= 1e-14 * top {
        return Err(ThinError::SingularOrthonormalization(low));
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let q = &eig.eigenvectors;
    let w = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    Ok(vt * w)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ThinError::InvalidArgument(format!(
            "forgetting factor must lie in (0,1), got {alpha}"
        )))
    }
}

/// One full-coordinate mini-batch update.
pub fn petrels_update(
    basis: &DMatrix<f64>,
    state: &TrackerState,
    x: &DMatrix<f64>,
    m: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DMatrix<f64>, TrackerState)> {
    check_dim(x.nrows(), m.nrows(), "data vs means rows")?;
    check_dim(x.ncols(), m.ncols(), "data vs means columns")?;
    petrels_step(basis, state, &(x - m), alpha)
}

/// [`petrels_update`] on already-centered data `D = X − M`.
pub(crate) fn petrels_step(
    basis: &DMatrix<f64>,
    state: &TrackerState,
    centered: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DMatrix<f64>, TrackerState)> {
    check_alpha(alpha)?;
    check_dim(basis.nrows(), centered.nrows(), "data rows vs basis rows")?;
    check_dim(basis.ncols(), state.rank(), "tracker rank vs basis columns")?;
    if centered.ncols() == 0 {
        return Err(ThinError::InvalidArgument("empty mini-batch".into()));
    }
    if centered.iter().any(|v| !v.is_finite()) {
        return Err(ThinError::NonFinite("mini-batch"));
    }
    let b = basis.tr_mul(centered);
    apply_coefficients(basis, state, centered, &b, None, alpha)
}

/// Shared tail of both updates: given coefficients `B`, advance `R` and
/// correct the basis rows selected by `mask` (all rows when `None`).
pub(crate) fn apply_coefficients(
    basis: &DMatrix<f64>,
    state: &TrackerState,
    centered: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mask: Option<&SampleMask>,
    alpha: f64,
) -> Result<(DMatrix<f64>, TrackerState)> {
    let (r_next, r_pinv) = next_r(state, b, alpha)?;
    let bbt = b * b.transpose();
    let vt = match mask {
        None => {
            // (D Bᵀ − V B Bᵀ) R'#
            let correction = (centered * b.transpose() - basis * bbt) * r_pinv;
            basis + correction
        }
        Some(mask) => {
            let u = mask.gather_rows(basis);
            let correction = (centered * b.transpose() - &u * bbt) * r_pinv;
            let mut vt = basis.clone();
            for (row, &i) in mask.indices().iter().enumerate() {
                let mut target = vt.row_mut(i);
                target += correction.row(row);
            }
            vt
        }
    };
    let v_next = orthonormalize(&vt)?;
    Ok((
        v_next,
        TrackerState {
            r_matrix: r_next,
            init_scale: state.init_scale,
        },
    ))
}

fn next_r(state: &TrackerState, b: &DMatrix<f64>, alpha: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut r_next = &state.r_matrix * alpha + b * b.transpose();
    symmetrize(&mut r_next);
    let pinv = pinv_psd(&r_next)?;
    Ok((r_next, pinv))
}

/// One mini-batch update from the coordinates in `mask` only.
pub fn petrels_update_masked(
    basis: &DMatrix<f64>,
    state: &TrackerState,
    x_obs: &DMatrix<f64>,
    m_obs: &DMatrix<f64>,
    mask: &SampleMask,
    alpha: f64,
) -> Result<(DMatrix<f64>, TrackerState)> {
    check_dim(x_obs.nrows(), m_obs.nrows(), "data vs means rows")?;
    check_dim(x_obs.ncols(), m_obs.ncols(), "data vs means columns")?;
    petrels_step_masked(basis, state, &(x_obs - m_obs), mask, alpha)
}

/// Least-squares coefficients `B = P_Ω(V)# D_obs`.
pub(crate) fn masked_coefficients(u: &DMatrix<f64>, centered_obs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = u.ncols();
    if u.nrows() < r {
        return Err(ThinError::IllPosedUpdate {
            observed: u.nrows(),
            rank: r,
        });
    }
    let gram = u.tr_mul(u);
    let rhs = u.tr_mul(centered_obs);
    let well_posed = Cholesky::new(gram.clone()).filter(|c| {
        let d = c.l_dirty().diagonal();
        let (lo, hi) = (d.min(), d.max());
        lo * lo > 1e-12 * hi * hi
    });
    let chol: Cholesky<f64, Dyn> = match well_posed {
        Some(c) => c,
        None => {
            let scale = (gram.trace() / r as f64).max(f64::MIN_POSITIVE);
            let ridged = gram + DMatrix::identity(r, r) * (MASKED_RIDGE * scale);
            Cholesky::new(ridged).ok_or(ThinError::IllPosedUpdate {
                observed: u.nrows(),
                rank: r,
            })?
        }
    };
    Ok(chol.solve(&rhs))
}

pub(crate) fn petrels_step_masked(
    basis: &DMatrix<f64>,
    state: &TrackerState,
    centered_obs: &DMatrix<f64>,
    mask: &SampleMask,
    alpha: f64,
) -> Result<(DMatrix<f64>, TrackerState)> {
    check_alpha(alpha)?;
    check_dim(basis.nrows(), mask.dim(), "mask dimension vs basis rows")?;
    check_dim(mask.len(), centered_obs.nrows(), "observed rows vs mask size")?;
    check_dim(basis.ncols(), state.rank(), "tracker rank vs basis columns")?;
    if centered_obs.ncols() == 0 {
        return Err(ThinError::InvalidArgument("empty mini-batch".into()));
    }
    if centered_obs.iter().any(|v| !v.is_finite()) {
        return Err(ThinError::NonFinite("mini-batch"));
    }
    let u = mask.gather_rows(basis);
    let b = masked_coefficients(&u, centered_obs)?;
    apply_coefficients(basis, state, centered_obs, &b, Some(mask), alpha)
}

/// Principal angles (radians, ascending) between the spans of two
/// orthonormal bases with the same ambient dimension.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dim(a.nrows(), b.nrows(), "ambient dimension of bases")?;
    let k = a.ncols().min(b.ncols());
    if k == 0 {
        return Ok(Vec::new());
    }
    let svd = a.tr_mul(b).svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .take(k)
        .map(|s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// Largest principal angle between two subspaces.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    Ok(principal_angles(a, b)?.last().copied().unwrap_or(0.0))
}
