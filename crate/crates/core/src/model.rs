//! Low-rank-plus-isotropic Gaussian components.
//!
//! A component has covariance `V diag(λ) Vᵀ + σ² I` with `V` a `p × r`
//! orthonormal basis. Every quantity here is computed in `O(p r)` (or
//! `O(|Ω| r² + r³)` for subsampled coordinates) and never forms a `p × p`
//! matrix: inverses go through the Woodbury identity and determinants
//! through the matrix determinant lemma.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix, Storage, U1};

use crate::error::{check_dim, Result, ThinError};

/// Smallest admissible subspace eigenvalue; keeps `λ⁻¹` finite.
pub const EIG_FLOOR: f64 = 1e-12;

/// Tolerance used when validating orthonormality of a basis.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A column vector of any storage (owned vector or a matrix column view).
pub type VecRef<'a, S> = &'a Matrix<f64, Dyn, U1, S>;

/// One mixture component `N(μ, V Λ Vᵀ + σ² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankGaussian {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    eigs: DVector<f64>,
    noise_var: f64,
}

impl LowRankGaussian {
    /// Builds a validated component. Eigenvalues below [`EIG_FLOOR`] are
    /// raised to the floor; negative or non-finite ones are rejected.
    pub fn new(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        eigs: DVector<f64>,
        noise_var: f64,
    ) -> Result<Self> {
        let p = mean.len();
        check_dim(p, basis.nrows(), "basis rows vs mean length")?;
        check_dim(basis.ncols(), eigs.len(), "basis columns vs eigenvalue count")?;
        if basis.ncols() >= p {
            return Err(ThinError::InvalidArgument(format!(
                "rank {} must be smaller than dimension {p}",
                basis.ncols()
            )));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(ThinError::InvalidArgument(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        if eigs.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(ThinError::InvalidArgument(
                "eigenvalues must be finite and non-negative".into(),
            ));
        }
        if mean.iter().chain(basis.iter()).any(|v| !v.is_finite()) {
            return Err(ThinError::NonFinite("component mean or basis"));
        }
        let gram_err = orthonormality_error(&basis);
        if gram_err > ORTHONORMAL_TOL {
            return Err(ThinError::InvalidArgument(format!(
                "basis columns are not orthonormal (max |VᵀV - I| = {gram_err:e})"
            )));
        }
        Ok(Self::from_parts(mean, basis, eigs, noise_var))
    }

    /// Assembles a component without the orthonormality check. Callers in
    /// this crate only pass bases produced by symmetric orthonormalization.
    pub(crate) fn from_parts(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        mut eigs: DVector<f64>,
        noise_var: f64,
    ) -> Self {
        eigs.apply(|l| *l = l.max(EIG_FLOOR));
        Self {
            mean,
            basis,
            eigs,
            noise_var,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigs(&self) -> &DVector<f64> {
        &self.eigs
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    #[cfg(test)]
    pub(crate) fn set_mean(&mut self, mean: DVector<f64>) {
        self.mean = mean;
    }

    pub(crate) fn mean_mut(&mut self) -> &mut DVector<f64> {
        &mut self.mean
    }

    pub(crate) fn set_basis(&mut self, basis: DMatrix<f64>) {
        debug_assert_eq!(basis.shape(), self.basis.shape());
        self.basis = basis;
    }

    pub(crate) fn set_eigs(&mut self, mut eigs: DVector<f64>) {
        eigs.apply(|l| *l = l.max(EIG_FLOOR));
        self.eigs = eigs;
    }

    pub(crate) fn set_noise_var(&mut self, noise_var: f64) {
        self.noise_var = noise_var;
    }

    /// `(x − μ)ᵀ Σ⁻¹ (x − μ)` via the Woodbury identity.
    ///
    /// With orthonormal `V`, `Σ⁻¹ = σ⁻² I − σ⁻⁴ V (Λ⁻¹ + σ⁻² I)⁻¹ Vᵀ`, so with
    /// `d = x − μ` and `c = Vᵀ d` the form is
    /// `(‖d‖² − ‖c‖²)/σ² + Σ c_m² / (λ_m + σ²)`.
    pub fn quad_form<S: Storage<f64, Dyn, U1>>(&self, x: VecRef<'_, S>) -> Result<f64> {
        check_dim(self.dim(), x.len(), "observation length")?;
        Ok(self.quad_form_unchecked(x))
    }

    pub(crate) fn quad_form_unchecked<S: Storage<f64, Dyn, U1>>(&self, x: VecRef<'_, S>) -> f64 {
        let s2 = self.noise_var;
        let mut dd = 0.0;
        for (xi, mi) in x.iter().zip(self.mean.iter()) {
            let d = xi - mi;
            dd += d * d;
        }
        let mut cc = 0.0;
        let mut weighted = 0.0;
        for (m, col) in self.basis.column_iter().enumerate() {
            let mut c = 0.0;
            for ((v, xi), mi) in col.iter().zip(x.iter()).zip(self.mean.iter()) {
                c += v * (xi - mi);
            }
            cc += c * c;
            weighted += c * c / (self.eigs[m] + s2);
        }
        (dd - cc).max(0.0) / s2 + weighted
    }

    /// `log |Σ|` via the matrix determinant lemma:
    /// `(p − r) log σ² + Σ log(λ_m + σ²)`.
    pub fn log_det(&self) -> f64 {
        let s2 = self.noise_var;
        let p = self.dim() as f64;
        let r = self.rank() as f64;
        (p - r) * s2.ln() + self.eigs.iter().map(|l| (l + s2).ln()).sum::<f64>()
    }

    /// Gaussian log-density of `x`.
    pub fn log_likelihood<S: Storage<f64, Dyn, U1>>(&self, x: VecRef<'_, S>) -> Result<f64> {
        check_dim(self.dim(), x.len(), "observation length")?;
        Ok(self.log_likelihood_with(self.log_det(), x))
    }

    pub(crate) fn log_likelihood_with<S: Storage<f64, Dyn, U1>>(
        &self,
        log_det: f64,
        x: VecRef<'_, S>,
    ) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + log_det + self.quad_form_unchecked(x))
    }

    /// Log-density of the observed coordinates `x_obs = P_Ω(x)` under the
    /// marginal `N(P_Ω(μ), P_Ω(V) Λ P_Ω(V)ᵀ + σ² I)`.
    pub fn masked_log_likelihood<S: Storage<f64, Dyn, U1>>(
        &self,
        x_obs: VecRef<'_, S>,
        mask: &SampleMask,
    ) -> Result<f64> {
        check_dim(mask.len(), x_obs.len(), "observed vector vs mask size")?;
        let view = self.restrict(mask)?;
        Ok(view.log_likelihood_unchecked(x_obs))
    }

    /// Factorizes the marginal over `mask` once so that many observations
    /// sharing the mask can be evaluated in `O(|Ω| r)` each.
    pub fn restrict(&self, mask: &SampleMask) -> Result<MaskedGaussian> {
        if mask.dim() != self.dim() {
            return Err(ThinError::DimensionMismatch {
                expected: self.dim(),
                actual: mask.dim(),
                context: "mask ambient dimension",
            });
        }
        let s2 = self.noise_var;
        let u = mask.gather_rows(&self.basis);
        let mean = mask.gather(&self.mean);
        let r = self.rank();
        // H = σ² Λ⁻¹ + UᵀU, so that Σ_Ω⁻¹ = σ⁻² (I − U H⁻¹ Uᵀ).
        let mut h = u.tr_mul(&u);
        for m in 0..r {
            h[(m, m)] += s2 / self.eigs[m];
        }
        let chol = Cholesky::new(h).ok_or_else(|| {
            ThinError::InvalidModel("restricted inner matrix is not positive definite".into())
        })?;
        let log_det_h: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let m = mask.len() as f64;
        let log_det = (m - r as f64) * s2.ln()
            + self.eigs.iter().map(|l| l.ln()).sum::<f64>()
            + log_det_h;
        Ok(MaskedGaussian {
            mean,
            u,
            chol,
            noise_var: s2,
            log_det,
        })
    }
}

/// A component restricted to a fixed coordinate subset, with its inner
/// `r × r` system already factorized.
#[derive(Clone, Debug)]
pub struct MaskedGaussian {
    mean: DVector<f64>,
    u: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    noise_var: f64,
    log_det: f64,
}

impl MaskedGaussian {
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn quad_form<S: Storage<f64, Dyn, U1>>(&self, x_obs: VecRef<'_, S>) -> Result<f64> {
        check_dim(self.mean.len(), x_obs.len(), "observed vector vs mask size")?;
        Ok(self.quad_form_unchecked(x_obs))
    }

    fn quad_form_unchecked<S: Storage<f64, Dyn, U1>>(&self, x_obs: VecRef<'_, S>) -> f64 {
        let d = x_obs - &self.mean;
        let c = self.u.tr_mul(&d);
        let hc = self.chol.solve(&c);
        (d.norm_squared() - c.dot(&hc)).max(0.0) / self.noise_var
    }

    pub fn log_likelihood<S: Storage<f64, Dyn, U1>>(&self, x_obs: VecRef<'_, S>) -> Result<f64> {
        check_dim(self.mean.len(), x_obs.len(), "observed vector vs mask size")?;
        Ok(self.log_likelihood_unchecked(x_obs))
    }

    pub(crate) fn log_likelihood_unchecked<S: Storage<f64, Dyn, U1>>(
        &self,
        x_obs: VecRef<'_, S>,
    ) -> f64 {
        -0.5 * (self.mean.len() as f64 * LN_2PI + self.log_det + self.quad_form_unchecked(x_obs))
    }
}

/// Sorted subset `Ω ⊆ {0, …, p−1}` of observed coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMask {
    indices: Vec<usize>,
    dim: usize,
}

impl SampleMask {
    pub fn new(indices: Vec<usize>, dim: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(ThinError::InvalidArgument("mask must be non-empty".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ThinError::InvalidArgument(
                "mask indices must be strictly increasing".into(),
            ));
        }
        if *indices.last().unwrap() >= dim {
            return Err(ThinError::InvalidArgument(format!(
                "mask index {} out of range for dimension {dim}",
                indices.last().unwrap()
            )));
        }
        Ok(Self { indices, dim })
    }

    pub fn full(dim: usize) -> Self {
        Self {
            indices: (0..dim).collect(),
            dim,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Ambient dimension `p`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.dim
    }

    pub fn gather<S: Storage<f64, Dyn, U1>>(&self, x: VecRef<'_, S>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.indices.iter().map(|&i| x[i]))
    }

    pub fn gather_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.select_rows(self.indices.iter())
    }
}

/// Largest entry of `|VᵀV − I|`.
pub fn orthonormality_error(basis: &DMatrix<f64>) -> f64 {
    let g = basis.tr_mul(basis);
    let r = g.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Dense `p × p` reference computations used only by tests.
    use super::*;

    pub fn dense_cov(g: &LowRankGaussian) -> DMatrix<f64> {
        let lam = DMatrix::from_diagonal(g.eigs());
        g.basis() * lam * g.basis().transpose()
            + DMatrix::identity(g.dim(), g.dim()) * g.noise_var()
    }

    pub fn dense_log_density(cov: &DMatrix<f64>, mean: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let lu = cov.clone().lu();
        let det = lu.determinant();
        let d = x - mean;
        let q = d.dot(&lu.solve(&d).unwrap());
        -0.5 * (x.len() as f64 * LN_2PI + det.ln() + q)
    }

    pub fn dense_quad(g: &LowRankGaussian, x: &DVector<f64>) -> f64 {
        let cov = dense_cov(g);
        let d = x - g.mean();
        d.dot(&cov.lu().solve(&d).unwrap())
    }

    pub fn dense_log_det(g: &LowRankGaussian) -> f64 {
        dense_cov(g).lu().determinant().ln()
    }

    pub fn dense_masked(g: &LowRankGaussian, x_obs: &DVector<f64>, mask: &SampleMask) -> f64 {
        let cov = dense_cov(g);
        let idx = mask.indices();
        let sub = cov.select_rows(idx.iter()).select_columns(idx.iter());
        dense_log_density(&sub, &mask.gather(g.mean()), x_obs)
    }
}
