use super::lp::{maximize, LpOutcome};
use super::vertex::enumerate_vertices;
use super::{check_dim, ConvexSet, GeometryError};
use crate::scalar::Real;

/// Polyhedron `{x : A x ≤ b}` stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope<T = f64> {
    a: Vec<Vec<T>>,
    b: Vec<T>,
    dim: usize,
}

impl<T: Real> HPolytope<T> {
    pub fn new(a: Vec<Vec<T>>, b: Vec<T>) -> Result<Self, GeometryError> {
        check_dim(a.len(), b.len())?;
        let dim = a.first().map_or(0, Vec::len);
        for (row, r) in a.iter().enumerate() {
            check_dim(dim, r.len())?;
            if r.iter().all(|v| *v == T::zero()) {
                return Err(GeometryError::ZeroRow { row });
            }
            if r.iter().any(|v| !v.is_finite()) || b[row].is_nan() {
                return Err(GeometryError::InvalidBounds { coord: row });
            }
        }
        Ok(Self { a, b, dim })
    }

    /// Builds a polytope with an explicit dimension; rows are trusted.
    pub(crate) fn new_unchecked(a: Vec<Vec<T>>, b: Vec<T>, dim: usize) -> Self {
        Self { a, b, dim }
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.a
    }

    pub fn rhs(&self) -> &[T] {
        &self.b
    }

    pub fn num_facets(&self) -> usize {
        self.a.len()
    }

    /// `{x + t : x ∈ self}`: b ← b + A t.
    pub fn translate(&self, offset: &[T]) -> Result<Self, GeometryError> {
        check_dim(self.dim, offset.len())?;
        let b = self
            .a
            .iter()
            .zip(&self.b)
            .map(|(row, bi)| *bi + dot(row, offset))
            .collect();
        Ok(Self {
            a: self.a.clone(),
            b,
            dim: self.dim,
        })
    }

    /// `{factor·x : x ∈ self}`: b ← factor·b.
    pub fn scale(&self, factor: T) -> Result<Self, GeometryError> {
        if !(factor > T::zero()) || !factor.is_finite() {
            return Err(GeometryError::InvalidFactor);
        }
        if !self.contains_origin() {
            log::warn!("scaling a polytope that does not contain the origin");
        }
        Ok(Self {
            a: self.a.clone(),
            b: self.b.iter().map(|v| *v * factor).collect(),
            dim: self.dim,
        })
    }

    pub fn contains_origin(&self) -> bool {
        self.b.iter().all(|v| *v >= T::zero())
    }

    /// Vertices of a bounded polytope (small dimensions only).
    pub fn vertices(&self) -> Result<Vec<Vec<T>>, GeometryError> {
        for d in 0..self.dim {
            let mut e = vec![T::zero(); self.dim];
            e[d] = T::one();
            if !self.support(&e)?.is_finite() {
                return Err(GeometryError::Unbounded);
            }
            e[d] = -T::one();
            if !self.support(&e)?.is_finite() {
                return Err(GeometryError::Unbounded);
            }
        }
        Ok(enumerate_vertices(&self.a, &self.b))
    }
}

impl<T: Real> ConvexSet<T> for HPolytope<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn contains_point(&self, x: &[T], tol: T) -> Result<bool, GeometryError> {
        check_dim(self.dim, x.len())?;
        Ok(self
            .a
            .iter()
            .zip(&self.b)
            .all(|(row, bi)| dot(row, x) <= *bi + tol))
    }

    /// Maximizes `direction·x` with the simplex; `+∞` when unbounded.
    fn support(&self, direction: &[T]) -> Result<T, GeometryError> {
        check_dim(self.dim, direction.len())?;
        match maximize(direction, &self.a, &self.b) {
            LpOutcome::Optimal { value, .. } => Ok(value),
            LpOutcome::Unbounded => Ok(T::infinity()),
            LpOutcome::Infeasible => Err(GeometryError::Empty),
        }
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}
