use super::{check_dim, ConvexSet, GeometryError, HPolytope};
use crate::scalar::Real;

/// Axis-aligned box `{x : lower ≤ x ≤ upper}`. Bounds may be infinite, which
/// leaves the coordinate unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet<T = f64> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Real> BoxSet<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self, GeometryError> {
        check_dim(lower.len(), upper.len())?;
        for (coord, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u || *l == T::infinity() || *u == T::neg_infinity() {
                return Err(GeometryError::InvalidBounds { coord });
            }
        }
        Ok(Self { lower, upper })
    }

    /// Box `[-h, h]` per coordinate; infinite half-widths are allowed.
    pub fn symmetric(half_widths: &[T]) -> Result<Self, GeometryError> {
        Self::new(
            half_widths.iter().map(|h| -*h).collect(),
            half_widths.to_vec(),
        )
    }

    /// The single point `x` as a degenerate box.
    pub fn point(x: &[T]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded_coords().len() == self.dim()
    }

    /// Coordinates with both bounds finite.
    pub fn bounded_coords(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&d| self.lower[d].is_finite() && self.upper[d].is_finite())
            .collect()
    }

    pub fn translate(&self, offset: &[T]) -> Result<Self, GeometryError> {
        check_dim(self.dim(), offset.len())?;
        Ok(Self {
            lower: self
                .lower
                .iter()
                .zip(offset)
                .map(|(l, t)| *l + *t)
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(offset)
                .map(|(u, t)| *u + *t)
                .collect(),
        })
    }

    /// `{factor·x : x ∈ self}`.
    pub fn scale(&self, factor: T) -> Result<Self, GeometryError> {
        if !(factor > T::zero()) || !factor.is_finite() {
            return Err(GeometryError::InvalidFactor);
        }
        if !self.contains_point(&vec![T::zero(); self.dim()], T::zero())? {
            log::warn!("scaling a box that does not contain the origin");
        }
        Ok(Self {
            lower: self.lower.iter().map(|l| *l * factor).collect(),
            upper: self.upper.iter().map(|u| *u * factor).collect(),
        })
    }

    /// Corners of the box. Unbounded coordinates make this an error.
    pub fn vertices(&self) -> Result<Vec<Vec<T>>, GeometryError> {
        if !self.is_bounded() {
            return Err(GeometryError::Unbounded);
        }
        Ok(self.corners_on(&(0..self.dim()).collect::<Vec<_>>()))
    }

    /// Corners of the box restricted to `coords`; other coordinates are set
    /// to the box midpoint (zero when unbounded on both sides).
    pub fn corners_on(&self, coords: &[usize]) -> Vec<Vec<T>> {
        let base: Vec<T> = (0..self.dim())
            .map(|d| {
                let mid = (self.lower[d] + self.upper[d]) / T::lit(2.0);
                if mid.is_finite() {
                    mid
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut out = Vec::with_capacity(1 << coords.len());
        for mask in 0..(1usize << coords.len()) {
            let mut v = base.clone();
            for (bit, &d) in coords.iter().enumerate() {
                v[d] = if mask & (1 << bit) != 0 {
                    self.upper[d]
                } else {
                    self.lower[d]
                };
            }
            out.push(v);
        }
        out
    }

    /// H-representation with one facet per finite bound.
    pub fn to_hpolytope(&self) -> HPolytope<T> {
        let n = self.dim();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for d in 0..n {
            if self.upper[d].is_finite() {
                let mut row = vec![T::zero(); n];
                row[d] = T::one();
                a.push(row);
                b.push(self.upper[d]);
            }
            if self.lower[d].is_finite() {
                let mut row = vec![T::zero(); n];
                row[d] = -T::one();
                a.push(row);
                b.push(-self.lower[d]);
            }
        }
        HPolytope::new_unchecked(a, b, n)
    }
}

impl<T: Real> ConvexSet<T> for BoxSet<T> {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn contains_point(&self, x: &[T], tol: T) -> Result<bool, GeometryError> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l - tol && *v <= *u + tol))
    }

    fn support(&self, direction: &[T]) -> Result<T, GeometryError> {
        check_dim(self.dim(), direction.len())?;
        let mut s = T::zero();
        for (d, dir) in direction.iter().enumerate() {
            if *dir > T::zero() {
                s = s + *dir * self.upper[d];
            } else if *dir < T::zero() {
                s = s + *dir * self.lower[d];
            }
        }
        Ok(s)
    }
}

/// Interval sum of two boxes; infinite bounds absorb.
pub fn minkowski_sum_box<T: Real>(
    a: &BoxSet<T>,
    b: &BoxSet<T>,
) -> Result<BoxSet<T>, GeometryError> {
    check_dim(a.dim(), b.dim())?;
    Ok(BoxSet {
        lower: a.lower.iter().zip(&b.lower).map(|(x, y)| *x + *y).collect(),
        upper: a.upper.iter().zip(&b.upper).map(|(x, y)| *x + *y).collect(),
    })
}
