use nalgebra::{DMatrix, DVector};

use super::GeometryError;

/// Sublevel set `{x : (x − c)ᵀ P (x − c) ≤ level}` with `P` positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    shape_inv: DMatrix<f64>,
    level: f64,
}

impl Ellipsoid {
    pub fn new(
        center: DVector<f64>,
        shape: DMatrix<f64>,
        level: f64,
    ) -> Result<Self, GeometryError> {
        let n = center.len();
        if shape.nrows() != n || shape.ncols() != n {
            return Err(GeometryError::DimensionMismatch {
                expected: n,
                found: shape.nrows(),
            });
        }
        if !(level >= 0.0) {
            return Err(GeometryError::NegativeRadius);
        }
        let sym = (&shape + shape.transpose()) * 0.5;
        let chol = sym.clone().cholesky().ok_or(GeometryError::Empty)?;
        let shape_inv = chol.inverse();
        Ok(Self {
            center,
            shape: sym,
            shape_inv,
            level,
        })
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn shape_inverse(&self) -> &DMatrix<f64> {
        &self.shape_inv
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    /// `(x − c)ᵀ P (x − c)`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.center;
        e.dot(&(&self.shape * &e))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.value(x) <= self.level + tol
    }

    /// Same ellipsoid with level multiplied by `factor²`, i.e. the set scaled
    /// by `factor` about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            level: self.level * factor * factor,
            ..self.clone()
        }
    }

    pub fn with_level(&self, level: f64) -> Self {
        Self {
            level,
            ..self.clone()
        }
    }

    /// `sup { dᵀx : x ∈ E } = dᵀc + sqrt(level · dᵀ P⁻¹ d)`.
    pub fn support(&self, d: &DVector<f64>) -> f64 {
        d.dot(&self.center) + (self.level * d.dot(&(&self.shape_inv * d))).max(0.0).sqrt()
    }

    /// Boundary point in direction `dir` from the center.
    pub fn boundary_point(&self, dir: &DVector<f64>) -> DVector<f64> {
        let q = dir.dot(&(&self.shape * dir));
        if q <= 0.0 {
            return self.center.clone();
        }
        &self.center + dir * (self.level / q).sqrt()
    }

    /// Largest Euclidean norm of `(x − c)` restricted to `coords`.
    pub fn max_offset_norm_on(&self, coords: &[usize]) -> f64 {
        let sub = self.shape_inv.select_rows(coords).select_columns(coords);
        let sym = (&sub + sub.transpose()) * 0.5;
        let lmax = sym
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        (self.level * lmax).sqrt()
    }

    /// Shape matrix of the projection onto `coords`: `((P⁻¹)_SS)⁻¹`.
    pub fn projected_shape(&self, coords: &[usize]) -> DMatrix<f64> {
        let sub = self.shape_inv.select_rows(coords).select_columns(coords);
        let sym = (&sub + sub.transpose()) * 0.5;
        sym.clone()
            .cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| {
                sym.try_inverse()
                    .expect("principal submatrix of a positive definite matrix is invertible")
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn support_and_boundary() {
        let e = Ellipsoid::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])),
            1.0,
        )
        .unwrap();
        let d = DVector::from_vec(vec![1.0, 0.0]);
        assert!((e.support(&d) - 1.5).abs() < 1e-12);
        let b = e.boundary_point(&DVector::from_vec(vec![0.0, 1.0]));
        assert!((e.value(&b) - 1.0).abs() < 1e-12);
        assert!((e.max_offset_norm_on(&[0, 1]) - 1.0).abs() < 1e-12);
        assert!((e.scaled(2.0).level() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn projection_of_correlated_shape() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = Ellipsoid::new(DVector::zeros(2), p, 1.0).unwrap();
        // max x0 over the ellipse equals the projected half-width
        let w = e.support(&DVector::from_vec(vec![1.0, 0.0]));
        let proj = e.projected_shape(&[0]);
        assert!((1.0 / proj[(0, 0)] - w * w).abs() < 1e-12);
    }
}
