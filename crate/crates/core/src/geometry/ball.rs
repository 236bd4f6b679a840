use super::{check_dim, ConvexSet, GeometryError};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Two,
    Infinity,
}

/// Norm ball `{x : ‖(x − center)_S‖ ≤ radius}` where `S` is a subset of the
/// coordinates; the remaining coordinates are unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBall<T = f64> {
    center: Vec<T>,
    radius: T,
    kind: NormKind,
    coords: Vec<usize>,
}

impl<T: Real> NormBall<T> {
    /// Ball over all coordinates of `center`.
    pub fn new(center: Vec<T>, radius: T, kind: NormKind) -> Result<Self, GeometryError> {
        let coords = (0..center.len()).collect();
        Self::on_coords(center, radius, kind, coords)
    }

    /// Ball measuring only the listed coordinates.
    pub fn on_coords(
        center: Vec<T>,
        radius: T,
        kind: NormKind,
        coords: Vec<usize>,
    ) -> Result<Self, GeometryError> {
        if !(radius >= T::zero()) {
            return Err(GeometryError::NegativeRadius);
        }
        if let Some(&bad) = coords.iter().find(|&&c| c >= center.len()) {
            return Err(GeometryError::DimensionMismatch {
                expected: center.len(),
                found: bad + 1,
            });
        }
        Ok(Self {
            center,
            radius,
            kind,
            coords,
        })
    }

    pub fn center(&self) -> &[T] {
        &self.center
    }

    pub fn radius(&self) -> T {
        self.radius
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn translate(&self, offset: &[T]) -> Result<Self, GeometryError> {
        check_dim(self.center.len(), offset.len())?;
        Ok(Self {
            center: self
                .center
                .iter()
                .zip(offset)
                .map(|(c, t)| *c + *t)
                .collect(),
            ..self.clone()
        })
    }

    fn norm_of(&self, v: impl Iterator<Item = T>) -> T {
        match self.kind {
            NormKind::Two => v.fold(T::zero(), |s, x| s + x * x).sqrt(),
            NormKind::Infinity => v.fold(T::zero(), |s, x| s.max(x.abs())),
        }
    }
}

impl<T: Real> ConvexSet<T> for NormBall<T> {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn contains_point(&self, x: &[T], tol: T) -> Result<bool, GeometryError> {
        check_dim(self.dim(), x.len())?;
        let n = self.norm_of(self.coords.iter().map(|&d| x[d] - self.center[d]));
        Ok(n <= self.radius + tol)
    }

    fn support(&self, direction: &[T]) -> Result<T, GeometryError> {
        check_dim(self.dim(), direction.len())?;
        let free = (0..self.dim()).any(|d| !self.coords.contains(&d) && direction[d] != T::zero());
        if free {
            return Ok(T::infinity());
        }
        let base = self
            .center
            .iter()
            .zip(direction)
            .fold(T::zero(), |s, (c, d)| s + *c * *d);
        // dual norm: 2 ↔ 2, ∞ ↔ 1
        let dual = match self.kind {
            NormKind::Two => self
                .coords
                .iter()
                .fold(T::zero(), |s, &d| s + direction[d] * direction[d])
                .sqrt(),
            NormKind::Infinity => self
                .coords
                .iter()
                .fold(T::zero(), |s, &d| s + direction[d].abs()),
        };
        Ok(base + self.radius * dual)
    }
}
