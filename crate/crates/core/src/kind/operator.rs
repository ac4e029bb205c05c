use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Lifted representation `Ξ` of one window: column `j` is slice `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEmbedding {
    pub xi: DMatrix<f64>,
}

impl LatentEmbedding {
    pub fn new(xi: DMatrix<f64>) -> Result<Self> {
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("latent embedding has non-finite entries"));
        }
        Ok(Self { xi })
    }

    pub fn dim(&self) -> usize {
        self.xi.nrows()
    }

    pub fn slices(&self) -> usize {
        self.xi.ncols()
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.xi.column(j).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Stationary,
    Transient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanOperator {
    pub k: DMatrix<f64>,
    pub kind: OperatorKind,
}

impl KoopmanOperator {
    pub fn new(k: DMatrix<f64>, kind: OperatorKind) -> Result<Self> {
        if !k.is_square() {
            return Err(Error::contract(format!("operator must be square, got {}×{}", k.nrows(), k.ncols())));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("operator has non-finite entries"));
        }
        Ok(Self { k, kind })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn advance(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.k * xi
    }
}

/// Ridge-regularized least squares over all consecutive column pairs:
/// `K = argmin Σ‖Ξ_{j+1} − KΞ_j‖² + λ‖K‖²`.
pub fn fit_stationary_operator(embeddings: &[LatentEmbedding], ridge: f64) -> Result<KoopmanOperator> {
    if !(ridge >= 0.0) {
        return Err(Error::config("ridge must be non-negative"));
    }
    let n = embeddings
        .first()
        .map(LatentEmbedding::dim)
        .ok_or_else(|| Error::contract("no embeddings to fit"))?;
    if embeddings.iter().any(|e| e.dim() != n) {
        return Err(Error::contract("embeddings differ in latent dimension"));
    }
    let pairs: usize = embeddings.iter().map(|e| e.slices().saturating_sub(1)).sum();
    if pairs < n {
        return Err(Error::contract(format!("{pairs} column pairs cannot determine a {n}×{n} operator")));
    }
    // Normal equations: K (X Xᵀ + λI) = Y Xᵀ.
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut cross = DMatrix::<f64>::zeros(n, n);
    for e in embeddings {
        for j in 0..e.slices().saturating_sub(1) {
            let x = e.xi.column(j);
            let y = e.xi.column(j + 1);
            gram.ger(1.0, &x, &x, 1.0);
            cross.ger(1.0, &y, &x, 1.0);
        }
    }
    for i in 0..n {
        gram[(i, i)] += ridge;
    }
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if !(min > 1e-12 * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular(format!(
            "latent Gram matrix is rank deficient (λ_min = {min:e}); use ridge > 0"
        )));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("latent Gram matrix is not positive definite; use ridge > 0".into()))?;
    // Kᵀ = G⁻¹ (Y Xᵀ)ᵀ
    let kt = chol.solve(&cross.transpose());
    KoopmanOperator::new(kt.transpose(), OperatorKind::Stationary)
}
