//! Polyhedral sets and the set operations needed by the consistency-set
//! machinery: translation, scaling, membership, containment, Minkowski sums
//! of boxes, the geometric sizing search and outer norm balls.
//!
//! Everything here is generic over [`Real`] so the same code runs in `f32`
//! and `f64`.

mod ball;
mod boxset;
pub mod ellipsoid;
pub mod lp;
mod polytope;
pub mod vertex;

pub use ball::{NormBall, NormKind};
pub use boxset::{minkowski_sum_box, BoxSet};
pub use ellipsoid::Ellipsoid;
pub use polytope::HPolytope;

use thiserror::Error;

use crate::scalar::Real;

/// Default absolute membership tolerance.
pub const EPS_SET: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid bounds at coordinate {coord}")]
    InvalidBounds { coord: usize },
    #[error("row {row} of the constraint matrix is all zero")]
    ZeroRow { row: usize },
    #[error("inner set is unbounded along facet {facet} of the outer set")]
    UnboundedInner { facet: usize },
    #[error("set does not contain the origin")]
    OriginNotContained,
    #[error("no scale in [{lo}, {hi}] satisfies the predicate")]
    NoFeasibleScale { lo: i32, hi: i32 },
    #[error("coordinate {coord} of the box is not centered at zero")]
    UncenteredSet { coord: usize },
    #[error("scale factor must be positive and finite")]
    InvalidFactor,
    #[error("radius must be nonnegative")]
    NegativeRadius,
    #[error("set is unbounded")]
    Unbounded,
    #[error("set is empty")]
    Empty,
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<(), GeometryError> {
    if expected == found {
        Ok(())
    } else {
        Err(GeometryError::DimensionMismatch { expected, found })
    }
}

/// Closed convex set queried through membership and its support function.
pub trait ConvexSet<T: Real> {
    fn dim(&self) -> usize;

    /// Membership with absolute tolerance `tol` on every defining inequality.
    fn contains_point(&self, x: &[T], tol: T) -> Result<bool, GeometryError>;

    /// `sup { d·x : x ∈ self }`, possibly `+∞`.
    fn support(&self, direction: &[T]) -> Result<T, GeometryError>;
}

/// Consistency sets are boxes or H-polytopes around the origin.
#[derive(Debug, Clone, PartialEq)]
pub enum ConsistencySet<T = f64> {
    Box(BoxSet<T>),
    Poly(HPolytope<T>),
}

impl<T: Real> ConsistencySet<T> {
    pub fn translate(&self, offset: &[T]) -> Result<Self, GeometryError> {
        Ok(match self {
            Self::Box(b) => Self::Box(b.translate(offset)?),
            Self::Poly(p) => Self::Poly(p.translate(offset)?),
        })
    }

    pub fn scale(&self, factor: T) -> Result<Self, GeometryError> {
        Ok(match self {
            Self::Box(b) => Self::Box(b.scale(factor)?),
            Self::Poly(p) => Self::Poly(p.scale(factor)?),
        })
    }

    pub fn contains_origin(&self) -> bool {
        match self {
            Self::Box(b) => b
                .lower()
                .iter()
                .zip(b.upper())
                .all(|(l, u)| *l <= T::zero() && *u >= T::zero()),
            Self::Poly(p) => p.contains_origin(),
        }
    }

    /// Coordinates along which the set is bounded in both directions.
    pub fn bounded_coords(&self) -> Result<Vec<usize>, GeometryError> {
        match self {
            Self::Box(b) => Ok(b.bounded_coords()),
            Self::Poly(p) => {
                let n = p.dim();
                let mut out = Vec::new();
                for d in 0..n {
                    let mut e = vec![T::zero(); n];
                    e[d] = T::one();
                    let hi = p.support(&e)?;
                    e[d] = -T::one();
                    let lo = p.support(&e)?;
                    if hi.is_finite() && lo.is_finite() {
                        out.push(d);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Points whose convex hull covers the set's extent along `coords`; other
    /// coordinates are zero. Exact vertices for boxes and bounded polytopes,
    /// bounding-box corners otherwise.
    pub fn extreme_offsets(&self, coords: &[usize]) -> Result<Vec<Vec<T>>, GeometryError> {
        match self {
            Self::Box(b) => {
                let mut pts = b.corners_on(coords);
                for p in &mut pts {
                    for (d, v) in p.iter_mut().enumerate() {
                        if !coords.contains(&d) {
                            *v = T::zero();
                        }
                    }
                }
                Ok(pts)
            }
            Self::Poly(p) => {
                if coords.len() == p.dim() {
                    if let Ok(v) = p.vertices() {
                        return Ok(v);
                    }
                }
                Ok(self
                    .bounding_box()?
                    .corners_on(coords)
                    .into_iter()
                    .map(|mut v| {
                        for (d, x) in v.iter_mut().enumerate() {
                            if !coords.contains(&d) {
                                *x = T::zero();
                            }
                        }
                        v
                    })
                    .collect())
            }
        }
    }

    /// Smallest axis-aligned box containing the set.
    pub fn bounding_box(&self) -> Result<BoxSet<T>, GeometryError> {
        match self {
            Self::Box(b) => Ok(b.clone()),
            Self::Poly(p) => {
                let n = p.dim();
                let mut lo = Vec::with_capacity(n);
                let mut hi = Vec::with_capacity(n);
                for d in 0..n {
                    let mut e = vec![T::zero(); n];
                    e[d] = T::one();
                    hi.push(p.support(&e)?);
                    e[d] = -T::one();
                    lo.push(-p.support(&e)?);
                }
                BoxSet::new(lo, hi)
            }
        }
    }

    /// Largest Euclidean norm of `x_S` over the set, where `S = coords`.
    /// Exact for boxes and bounded polytopes, an upper bound otherwise.
    pub fn max_norm_on(&self, coords: &[usize]) -> Result<T, GeometryError> {
        let pts = match self {
            Self::Box(b) => b.corners_on(coords),
            Self::Poly(p) => match p.vertices() {
                Ok(v) => v,
                Err(_) => self.bounding_box()?.corners_on(coords),
            },
        };
        Ok(pts
            .iter()
            .map(|v| {
                coords
                    .iter()
                    .fold(T::zero(), |s, &d| s + v[d] * v[d])
                    .sqrt()
            })
            .fold(T::zero(), |a, b| a.max(b)))
    }
}

impl<T: Real> ConvexSet<T> for ConsistencySet<T> {
    fn dim(&self) -> usize {
        match self {
            Self::Box(b) => b.dim(),
            Self::Poly(p) => p.dim(),
        }
    }

    fn contains_point(&self, x: &[T], tol: T) -> Result<bool, GeometryError> {
        match self {
            Self::Box(b) => b.contains_point(x, tol),
            Self::Poly(p) => p.contains_point(x, tol),
        }
    }

    fn support(&self, direction: &[T]) -> Result<T, GeometryError> {
        match self {
            Self::Box(b) => b.support(direction),
            Self::Poly(p) => p.support(direction),
        }
    }
}

/// Decides `inner ⊆ outer` facet by facet: the support of `inner` along each
/// facet normal must not exceed the facet offset (plus `tol`).
pub fn contains_set<T: Real, S: ConvexSet<T> + ?Sized>(
    outer: &HPolytope<T>,
    inner: &S,
    tol: T,
) -> Result<bool, GeometryError> {
    check_dim(outer.dim(), inner.dim())?;
    for (facet, (row, b)) in outer.rows().iter().zip(outer.rhs()).enumerate() {
        let s = inner.support(row)?;
        if !s.is_finite() {
            return Err(GeometryError::UnboundedInner { facet });
        }
        if s > *b + tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Finds the largest `ι` in `iota_bounds` with `predicate(ρ^ι · initial)`.
///
/// The walk starts at `ι = 0` (clamped into the bounds), grows while the
/// predicate holds and shrinks until it does. Assumes the predicate is
/// monotone, i.e. true for a set implies true for every smaller scale.
pub fn sizing_search<T: Real, F>(
    initial: &ConsistencySet<T>,
    mut predicate: F,
    rho: T,
    iota_bounds: (i32, i32),
) -> Result<(ConsistencySet<T>, i32), GeometryError>
where
    F: FnMut(&ConsistencySet<T>) -> bool,
{
    let (lo, hi) = iota_bounds;
    if lo > hi {
        return Err(GeometryError::NoFeasibleScale { lo, hi });
    }
    if !(rho > T::one()) || !rho.is_finite() {
        return Err(GeometryError::InvalidFactor);
    }
    if !initial.contains_origin() {
        return Err(GeometryError::OriginNotContained);
    }
    let at = |iota: i32| initial.scale(rho.powi(iota));
    let mut iota = 0.clamp(lo, hi);
    let mut set = at(iota)?;
    if predicate(&set) {
        while iota < hi {
            let next = at(iota + 1)?;
            if !predicate(&next) {
                break;
            }
            iota += 1;
            set = next;
        }
        Ok((set, iota))
    } else {
        while iota > lo {
            iota -= 1;
            set = at(iota)?;
            if predicate(&set) {
                return Ok((set, iota));
            }
        }
        Err(GeometryError::NoFeasibleScale { lo, hi })
    }
}

/// Smallest norm ball around the origin containing the bounded coordinates
/// of a centered box. Unbounded coordinates are left out of the ball.
pub fn outer_ball<T: Real>(set: &BoxSet<T>, kind: NormKind) -> Result<NormBall<T>, GeometryError> {
    let coords = set.bounded_coords();
    let mut half = Vec::with_capacity(coords.len());
    for &d in &coords {
        let (l, u) = (set.lower()[d], set.upper()[d]);
        let scale = T::one().max(l.abs()).max(u.abs());
        if (l + u).abs() > T::epsilon() * T::lit(16.0) * scale {
            return Err(GeometryError::UncenteredSet { coord: d });
        }
        half.push(u);
    }
    let radius = match kind {
        NormKind::Two => half.iter().fold(T::zero(), |s, h| s + *h * *h).sqrt(),
        NormKind::Infinity => half.iter().fold(T::zero(), |s, h| s.max(*h)),
    };
    NormBall::on_coords(vec![T::zero(); set.dim()], radius, kind, coords)
}
