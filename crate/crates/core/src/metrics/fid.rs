//! Fréchet distance between Gaussians fitted to two embedding sets:
//! `‖μx − μy‖² + Tr(Σx + Σy − 2(Σx Σy)^½)`.
//!
//! `Tr((Σx Σy)^½)` is computed as `Σ √λ` over the eigenvalues of the
//! symmetric matrix `Σx^½ Σy Σx^½`, which shares its spectrum with
//! `Σx Σy`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues above `-NEG_TOL · max(1, λ_max)` are treated as zero when
/// negative; anything below is an error.
pub const NEG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub provider_id: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>, provider_id: impl Into<String>) -> Self {
        Self {
            vectors,
            provider_id: provider_id.into(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(Vec::len)
    }
}

/// Single-pass mean and scatter accumulator (Welford), mergeable across
/// workers (Chan et al.).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAccumulator {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl GaussianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape("fid accumulator", "embedding dimension", self.dim(), x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector".into()));
        }
        let x = DVector::from_column_slice(x);
        self.n += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
        Ok(())
    }

    pub fn merge(&mut self, other: &GaussianAccumulator) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::shape("fid accumulator", "embedding dimension", self.dim(), other.dim()));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.m2 += &other.m2 + &delta * delta.transpose() * (na * nb / n);
        self.mean += &delta * (nb / n);
        self.n += other.n;
        Ok(())
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased covariance, symmetrized.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.n < 2 {
            return Err(Error::invalid(format!("covariance needs at least 2 vectors, got {}", self.n)));
        }
        let c = &self.m2 / (self.n - 1) as f64;
        Ok((&c + c.transpose()) * 0.5)
    }
}

fn checked_eigenvalues(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -NEG_TOL * scale {
                return Err(Error::NonFinite(format!(
                    "{what} has eigenvalue {v:e}; the matrix square root would be complex"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = checked_eigenvalues(m.clone(), "covariance")?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// `Tr((Σx Σy)^½)`.
pub fn trace_sqrt_product(sx: &DMatrix<f64>, sy: &DMatrix<f64>) -> Result<f64> {
    let a = sym_sqrt(sx)?;
    let m = &a * sy * &a;
    let m = (&m + m.transpose()) * 0.5;
    let eig = checked_eigenvalues(m, "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

pub fn frechet_from_moments(mx: &DVector<f64>, sx: &DMatrix<f64>, my: &DVector<f64>, sy: &DMatrix<f64>) -> Result<f64> {
    if mx.len() != my.len() {
        return Err(Error::shape("frechet_distance", "embedding dimension", mx.len(), my.len()));
    }
    if sx.shape() != (mx.len(), mx.len()) || sy.shape() != (my.len(), my.len()) {
        return Err(Error::invalid("covariance shape does not match mean"));
    }
    let diff = (mx - my).norm_squared();
    let tr = sx.trace() + sy.trace() - 2.0 * trace_sqrt_product(sx, sy)?;
    let d = diff + tr;
    let scale = 1.0f64.max(sx.trace() + sy.trace() + diff);
    if d < -1e-6 * scale {
        return Err(Error::NonFinite(format!("Fréchet distance {d:e} is negative beyond tolerance")));
    }
    Ok(d.max(0.0))
}

pub fn frechet_from_accumulators(x: &GaussianAccumulator, y: &GaussianAccumulator) -> Result<f64> {
    frechet_from_moments(x.mean(), &x.covariance()?, y.mean(), &y.covariance()?)
}

pub fn frechet_distance(x: &EmbeddingSet, y: &EmbeddingSet) -> Result<f64> {
    for (name, s) in [("x", x), ("y", y)] {
        if s.vectors.len() < 2 {
            return Err(Error::invalid(format!("set {name} has {} vectors, need >= 2", s.vectors.len())));
        }
    }
    let (dx, dy) = (x.dim().unwrap_or(0), y.dim().unwrap_or(0));
    if dx != dy {
        return Err(Error::shape("frechet_distance", "embedding dimension", dx, dy));
    }
    let acc = |s: &EmbeddingSet| -> Result<GaussianAccumulator> {
        let mut a = GaussianAccumulator::new(dx);
        for v in &s.vectors {
            a.push(v)?;
        }
        Ok(a)
    };
    frechet_from_accumulators(&acc(x)?, &acc(y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: &[f64], scale: f64, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        shift[j] + scale * z
                    })
                    .collect()
            })
            .collect();
        EmbeddingSet::new(v, "test")
    }

    #[test]
    fn identical_sets() {
        let x = gaussian(50, 8, &[0.0; 8], 1.0, 1);
        assert!(frechet_distance(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn closed_form_scalar() {
        let mx = DVector::from_vec(vec![0.0]);
        let sx = DMatrix::from_vec(1, 1, vec![1.0]);
        let sy = DMatrix::from_vec(1, 1, vec![4.0]);
        let d = frechet_from_moments(&mx, &sx, &mx, &sy).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn closed_form_shift() {
        let i = DMatrix::identity(2, 2);
        let d = frechet_from_moments(&DVector::from_vec(vec![0.0, 0.0]), &i, &DVector::from_vec(vec![3.0, 4.0]), &i).unwrap();
        assert!((d - 25.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_shift_approaches_25() {
        let x = gaussian(10_000, 2, &[0.0, 0.0], 1.0, 2);
        let y = gaussian(10_000, 2, &[3.0, 4.0], 1.0, 3);
        let d = frechet_distance(&x, &y).unwrap();
        assert!((d - 25.0).abs() < 0.3, "{d}");
    }

    #[test]
    fn symmetric() {
        let x = gaussian(40, 5, &[0.0; 5], 1.0, 4);
        let y = gaussian(30, 5, &[0.5; 5], 2.0, 5);
        let a = frechet_distance(&x, &y).unwrap();
        let b = frechet_distance(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} {b}");
    }

    #[test]
    fn merge_matches_single_pass() {
        let x = gaussian(37, 4, &[1.0; 4], 1.5, 6);
        let mut whole = GaussianAccumulator::new(4);
        let mut a = GaussianAccumulator::new(4);
        let mut b = GaussianAccumulator::new(4);
        for (i, v) in x.vectors.iter().enumerate() {
            whole.push(v).unwrap();
            if i % 3 == 0 { a.push(v).unwrap() } else { b.push(v).unwrap() }
        }
        a.merge(&b).unwrap();
        assert_eq!(a.count(), 37);
        assert!((a.mean() - whole.mean()).amax() < 1e-12);
        assert!((a.covariance().unwrap() - whole.covariance().unwrap()).amax() < 1e-12);
    }

    #[test]
    fn rejects_small_and_mismatched() {
        let x = gaussian(1, 3, &[0.0; 3], 1.0, 7);
        let y = gaussian(5, 3, &[0.0; 3], 1.0, 8);
        assert!(frechet_distance(&x, &y).is_err());
        let z = gaussian(5, 2, &[0.0; 2], 1.0, 9);
        assert!(frechet_distance(&y, &z).is_err());
    }

    #[test]
    fn indefinite_covariance_is_an_error() {
        let m = DVector::from_vec(vec![0.0, 0.0]);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let i = DMatrix::identity(2, 2);
        assert!(frechet_from_moments(&m, &bad, &m, &i).is_err());
    }

    #[test]
    fn rank_deficient_sets_work() {
        // Fewer vectors than dimensions: singular covariances.
        let x = gaussian(3, 6, &[0.0; 6], 1.0, 10);
        let y = gaussian(4, 6, &[0.2; 6], 1.0, 11);
        let d = frechet_distance(&x, &y).unwrap();
        assert!(d.is_finite() && d >= 0.0);
    }
}
