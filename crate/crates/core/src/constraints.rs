//! State constraints `h(x) ≤ 0`, coupled constraints `c(x_i, x_j) ≤ 0`,
//! input sets and the set-valued robust checks used when references are
//! updated.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{BoxSet, ConsistencySet, ConvexSet, Ellipsoid, GeometryError, HPolytope};

/// Slack on every `≤ 0` constraint check.
pub const EPS_CON: f64 = 1e-8;

/// Inflation of sampled sets for nonlinear constraints without an exact
/// reduction.
pub const SAMPLED_INFLATION: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("agent {0} is coupled to itself")]
    SelfLoop(usize),
    #[error("edge references unknown agent {0}")]
    UnknownAgent(usize),
    #[error("duplicate agent id {0}")]
    DuplicateAgent(usize),
    #[error("invalid constraint: {0}")]
    Invalid(String),
}

fn check_len(expected: usize, found: usize) -> Result<(), ConstraintError> {
    if expected == found {
        Ok(())
    } else {
        Err(ConstraintError::DimensionMismatch { expected, found })
    }
}

/// A set of states the robust checks quantify over.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    Point(&'a DVector<f64>),
    /// `center ⊕ set`.
    Translated {
        center: &'a DVector<f64>,
        set: &'a ConsistencySet<f64>,
    },
    Ellipsoid(&'a Ellipsoid),
}

impl Region<'_> {
    pub fn center(&self) -> DVector<f64> {
        match self {
            Region::Point(x) => (*x).clone(),
            Region::Translated { center, .. } => (*center).clone(),
            Region::Ellipsoid(e) => e.center().clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Point(x) => x.len(),
            Region::Translated { center, .. } => center.len(),
            Region::Ellipsoid(e) => e.center().len(),
        }
    }

    /// `sup { dᵀx : x ∈ region }`.
    pub fn support(&self, d: &DVector<f64>) -> Result<f64, ConstraintError> {
        Ok(match self {
            Region::Point(x) => d.dot(x),
            Region::Translated { center, set } => d.dot(center) + set.support(d.as_slice())?,
            Region::Ellipsoid(e) => e.support(d),
        })
    }

    /// Largest Euclidean distance from the center over `coords`.
    pub fn radius_on(&self, coords: &[usize]) -> Result<f64, ConstraintError> {
        Ok(match self {
            Region::Point(_) => 0.0,
            Region::Translated { set, .. } => set.max_norm_on(coords)?,
            Region::Ellipsoid(e) => e.max_offset_norm_on(coords),
        })
    }

    /// Finite set of points spanning the region (extreme points with the
    /// sampled inflation applied), for constraints without an exact bound.
    pub fn sample_points(&self) -> Result<Vec<DVector<f64>>, ConstraintError> {
        let c = self.center();
        let mut out = vec![c.clone()];
        match self {
            Region::Point(_) => {}
            Region::Translated { set, .. } => {
                let coords = set.bounded_coords()?;
                for off in set.extreme_offsets(&coords)? {
                    out.push(&c + DVector::from_vec(off) * SAMPLED_INFLATION);
                }
            }
            Region::Ellipsoid(e) => {
                let n = c.len();
                for i in 0..n {
                    for s in [1.0, -1.0] {
                        let mut d = DVector::zeros(n);
                        d[i] = s;
                        let p = e.boundary_point(&d);
                        out.push(&c + (p - &c) * SAMPLED_INFLATION);
                    }
                }
            }
        }
        Ok(out)
    }
}

type StateFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type PairFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// `h(x) ≤ 0`.
#[derive(Clone)]
pub enum StateConstraint {
    /// `H x − g ≤ 0`; robust margins are exact for polytopic sets.
    Linear { h: DMatrix<f64>, g: DVector<f64> },
    /// Arbitrary function; robust margins are sampled and therefore heuristic.
    Nonlinear {
        name: String,
        state_dim: usize,
        eval: StateFn,
    },
}

impl fmt::Debug for StateConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { h, g } => f
                .debug_struct("Linear")
                .field("h", h)
                .field("g", g)
                .finish(),
            Self::Nonlinear { name, .. } => {
                f.debug_struct("Nonlinear").field("name", name).finish()
            }
        }
    }
}

impl StateConstraint {
    pub fn linear(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self, ConstraintError> {
        check_len(h.nrows(), g.len())?;
        Ok(Self::Linear { h, g })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Linear { h, .. } => h.ncols(),
            Self::Nonlinear { state_dim, .. } => *state_dim,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        check_len(self.state_dim(), x.len())?;
        Ok(match self {
            Self::Linear { h, g } => h * x - g,
            Self::Nonlinear { eval, .. } => eval(x),
        })
    }

    pub fn is_satisfied(&self, x: &DVector<f64>) -> Result<bool, ConstraintError> {
        Ok(self.eval(x)?.iter().all(|v| *v <= EPS_CON))
    }

    /// Jacobian of `eval`; exact for linear constraints, central differences
    /// otherwise.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ConstraintError> {
        match self {
            Self::Linear { h, .. } => Ok(h.clone()),
            Self::Nonlinear { .. } => {
                let base = self.eval(x)?;
                let mut jac = DMatrix::zeros(base.len(), x.len());
                for j in 0..x.len() {
                    let h = 1e-6f64.max(1e-6 * x[j].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    jac.set_column(j, &((self.eval(&xp)? - self.eval(&xm)?) / (2.0 * h)));
                }
                Ok(jac)
            }
        }
    }

    /// Upper bound on `eval` over the region, componentwise.
    pub fn robust_margin(&self, region: Region<'_>) -> Result<DVector<f64>, ConstraintError> {
        check_len(self.state_dim(), region.dim())?;
        match self {
            Self::Linear { h, g } => {
                let mut out = DVector::zeros(h.nrows());
                for i in 0..h.nrows() {
                    let row = h.row(i).transpose();
                    out[i] = region.support(&row)? - g[i];
                }
                Ok(out)
            }
            Self::Nonlinear { name, eval, .. } => {
                log::warn!(
                    "robust margin of nonlinear state constraint `{name}` is sampled (heuristic)"
                );
                let pts = region.sample_points()?;
                let mut out = eval(&pts[0]);
                for p in &pts[1..] {
                    out = out.sup(&eval(p));
                }
                Ok(out)
            }
        }
    }
}

/// `c(x_i, x_j) ≤ 0` between neighbors.
#[derive(Clone)]
pub enum CoupledConstraint {
    /// `‖p_i − p_j‖₂ − d_max ≤ 0` on the coordinates in `slice`.
    Distance { d_max: f64, slice: Vec<usize> },
    Nonlinear {
        name: String,
        state_dim: usize,
        symmetric: bool,
        eval: PairFn,
    },
}

impl fmt::Debug for CoupledConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Distance { d_max, slice } => f
                .debug_struct("Distance")
                .field("d_max", d_max)
                .field("slice", slice)
                .finish(),
            Self::Nonlinear { name, .. } => {
                f.debug_struct("Nonlinear").field("name", name).finish()
            }
        }
    }
}

/// Maximum-distance constraint on the coordinates in `slice`.
pub fn distance_constraint(
    d_max: f64,
    slice: Vec<usize>,
) -> Result<CoupledConstraint, ConstraintError> {
    if !(d_max > 0.0) || !d_max.is_finite() {
        return Err(ConstraintError::Invalid(format!(
            "d_max must be positive, got {d_max}"
        )));
    }
    if slice.is_empty() {
        return Err(ConstraintError::Invalid("distance slice is empty".into()));
    }
    Ok(CoupledConstraint::Distance { d_max, slice })
}

fn slice_distance(slice: &[usize], xi: &DVector<f64>, xj: &DVector<f64>) -> f64 {
    slice
        .iter()
        .map(|&d| (xi[d] - xj[d]) * (xi[d] - xj[d]))
        .sum::<f64>()
        .sqrt()
}

impl CoupledConstraint {
    pub fn is_symmetric(&self) -> bool {
        match self {
            Self::Distance { .. } => true,
            Self::Nonlinear { symmetric, .. } => *symmetric,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Distance { .. } => 1,
            Self::Nonlinear {
                eval, state_dim, ..
            } => {
                let z = DVector::zeros(*state_dim);
                eval(&z, &z).len()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_dims(&self, xi: &DVector<f64>, xj: &DVector<f64>) -> Result<(), ConstraintError> {
        match self {
            Self::Distance { slice, .. } => {
                let need = slice.iter().max().map_or(0, |m| m + 1);
                for x in [xi, xj] {
                    if x.len() < need {
                        return Err(ConstraintError::DimensionMismatch {
                            expected: need,
                            found: x.len(),
                        });
                    }
                }
                Ok(())
            }
            Self::Nonlinear { state_dim, .. } => {
                check_len(*state_dim, xi.len())?;
                check_len(*state_dim, xj.len())
            }
        }
    }

    pub fn eval(
        &self,
        xi: &DVector<f64>,
        xj: &DVector<f64>,
    ) -> Result<DVector<f64>, ConstraintError> {
        self.check_dims(xi, xj)?;
        Ok(match self {
            Self::Distance { d_max, slice } => {
                DVector::from_element(1, slice_distance(slice, xi, xj) - d_max)
            }
            Self::Nonlinear { eval, .. } => eval(xi, xj),
        })
    }

    pub fn is_satisfied(
        &self,
        xi: &DVector<f64>,
        xj: &DVector<f64>,
    ) -> Result<bool, ConstraintError> {
        Ok(self.eval(xi, xj)?.iter().all(|v| *v <= EPS_CON))
    }

    /// Jacobian with respect to the first argument. The distance gradient at
    /// coincident points is taken as zero.
    pub fn jacobian_first(
        &self,
        xi: &DVector<f64>,
        xj: &DVector<f64>,
    ) -> Result<DMatrix<f64>, ConstraintError> {
        self.check_dims(xi, xj)?;
        match self {
            Self::Distance { slice, .. } => {
                let mut jac = DMatrix::zeros(1, xi.len());
                let d = slice_distance(slice, xi, xj);
                if d > 1e-12 {
                    for &k in slice {
                        jac[(0, k)] = (xi[k] - xj[k]) / d;
                    }
                }
                Ok(jac)
            }
            Self::Nonlinear { eval, .. } => {
                let base = eval(xi, xj);
                let mut jac = DMatrix::zeros(base.len(), xi.len());
                for k in 0..xi.len() {
                    let h = 1e-6f64.max(1e-6 * xi[k].abs());
                    let mut xp = xi.clone();
                    let mut xm = xi.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    jac.set_column(k, &((eval(&xp, xj) - eval(&xm, xj)) / (2.0 * h)));
                }
                Ok(jac)
            }
        }
    }

    /// Upper bound on `c` over `region_i × region_j`. For the distance
    /// constraint: `‖p_i − p_j‖ − d_max + ρ_i + ρ_j` with `ρ` the largest
    /// offset norm of each region on the position slice.
    pub fn robust_margin(
        &self,
        region_i: Region<'_>,
        region_j: Region<'_>,
    ) -> Result<DVector<f64>, ConstraintError> {
        let (ci, cj) = (region_i.center(), region_j.center());
        let base = self.eval(&ci, &cj)?;
        match self {
            Self::Distance { slice, .. } => {
                let r = region_i.radius_on(slice)? + region_j.radius_on(slice)?;
                Ok(base.add_scalar(r))
            }
            Self::Nonlinear { name, eval, .. } => {
                log::warn!(
                    "robust margin of nonlinear coupled constraint `{name}` is sampled (heuristic)"
                );
                let pi = region_i.sample_points()?;
                let pj = region_j.sample_points()?;
                let mut out = base;
                for a in &pi {
                    for b in &pj {
                        out = out.sup(&eval(a, b));
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Exact worst case of the distance constraint when both regions are boxes
/// around their centers: the maximum of a convex function over the box
/// difference is attained at one of its corners.
pub fn distance_exact_box_margin(
    d_max: f64,
    slice: &[usize],
    center_i: &DVector<f64>,
    box_i: &BoxSet<f64>,
    center_j: &DVector<f64>,
    box_j: &BoxSet<f64>,
) -> f64 {
    let k = slice.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0..(1usize << k) {
        let mut sq = 0.0;
        for (bit, &d) in slice.iter().enumerate() {
            // corner of box_i − box_j
            let off = if mask & (1 << bit) != 0 {
                box_i.upper()[d] - box_j.lower()[d]
            } else {
                box_i.lower()[d] - box_j.upper()[d]
            };
            let v = center_i[d] - center_j[d] + off;
            sq += v * v;
        }
        best = best.max(sq.sqrt());
    }
    best - d_max
}

/// Componentwise `margin ≤ ε_con`.
fn nonpositive(v: &DVector<f64>) -> bool {
    v.iter().all(|m| *m <= EPS_CON)
}

/// `h(x) ≤ 0` for every `x` in the region.
pub fn check_robust_state(
    h: &StateConstraint,
    region: Region<'_>,
) -> Result<bool, ConstraintError> {
    Ok(nonpositive(&h.robust_margin(region)?))
}

/// `c(x_i, x_j) ≤ 0` for every pair from the two regions.
pub fn check_robust_coupled(
    c: &CoupledConstraint,
    region_i: Region<'_>,
    region_j: Region<'_>,
) -> Result<bool, ConstraintError> {
    Ok(nonpositive(&c.robust_margin(region_i, region_j)?))
}

/// Admissible inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSet {
    Box(BoxSet<f64>),
    Poly(HPolytope<f64>),
}

impl InputSet {
    pub fn dim(&self) -> usize {
        match self {
            Self::Box(b) => b.dim(),
            Self::Poly(p) => p.dim(),
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> Result<bool, ConstraintError> {
        Ok(match self {
            Self::Box(b) => b.contains_point(u.as_slice(), tol)?,
            Self::Poly(p) => p.contains_point(u.as_slice(), tol)?,
        })
    }

    /// Half-space form `A u ≤ b` (finite bounds only).
    pub fn halfspaces(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let p = match self {
            Self::Box(b) => b.to_hpolytope(),
            Self::Poly(p) => p.clone(),
        };
        (p.rows().to_vec(), p.rhs().to_vec())
    }

    /// Largest `aᵀu − b` over the half-spaces (negative inside).
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        let (a, b) = self.halfspaces();
        a.iter()
            .zip(&b)
            .map(|(row, bi)| row.iter().zip(u.iter()).map(|(p, q)| p * q).sum::<f64>() - bi)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Undirected coupling graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    vertices: Vec<usize>,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    pub fn new(vertices: Vec<usize>, edges: &[(usize, usize)]) -> Result<Self, ConstraintError> {
        let mut seen = BTreeSet::new();
        for &v in &vertices {
            if !seen.insert(v) {
                return Err(ConstraintError::DuplicateAgent(v));
            }
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i == j {
                return Err(ConstraintError::SelfLoop(i));
            }
            for v in [i, j] {
                if !seen.contains(&v) {
                    return Err(ConstraintError::UnknownAgent(v));
                }
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self {
            vertices,
            edges: set,
        })
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    /// Edges as `(min, max)` pairs in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }
}
