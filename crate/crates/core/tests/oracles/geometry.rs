//! Set operations in dimensions 1 to 3 against box corners by bit
//! patterns, polytope vertices by solving every n-subset of facets, and
//! sizing by scanning all exponents.

use dmpc_core::geometry::{
    contains_set, minkowski_sum_box, sizing_search, BoxSet, ConsistencySet, ConvexSet, HPolytope,
    EPS_SET,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tally;

pub const CASES: usize = 600;

pub fn random_box(rng: &mut ChaCha8Rng, dim: usize) -> BoxSet<f64> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for _ in 0..dim {
        let a: f64 = rng.random_range(-2.0..2.0);
        let w: f64 = rng.random_range(0.0..2.0);
        lo.push(a);
        hi.push(a + w);
    }
    BoxSet::new(lo, hi).unwrap()
}

pub fn corners(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let n = lo.len();
    (0..1usize << n)
        .map(|bits| {
            (0..n)
                .map(|d| if bits >> d & 1 == 1 { hi[d] } else { lo[d] })
                .collect()
        })
        .collect()
}

/// Random bounded polytope containing the origin: a box's facets plus a few
/// random cuts with positive offsets.
pub fn random_polytope(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for d in 0..dim {
        for s in [1.0, -1.0] {
            let mut row = vec![0.0; dim];
            row[d] = s;
            a.push(row);
            b.push(rng.random_range(0.5..3.0));
        }
    }
    for _ in 0..rng.random_range(0..4) {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if row.iter().map(|v| v * v).sum::<f64>() < 1e-2 {
            continue;
        }
        a.push(row);
        b.push(rng.random_range(0.3..2.5));
    }
    (a, b)
}

pub fn inside(a: &[Vec<f64>], b: &[f64], x: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(row, bi)| row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() <= bi + tol)
}

/// Vertices by brute force over all `dim`-subsets of facets.
pub fn vertices_oracle(a: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    let dim = a[0].len();
    let m = a.len();
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..dim).collect();
    loop {
        let mat = DMatrix::from_fn(dim, dim, |r, c| a[idx[r]][c]);
        let rhs = DVector::from_fn(dim, |r, _| b[idx[r]]);
        if let Some(x) = mat.lu().solve(&rhs) {
            let x: Vec<f64> = x.iter().copied().collect();
            if x.iter().all(|v| v.is_finite()) && inside(a, b, &x, 1e-9) {
                out.push(x);
            }
        }
        // next combination
        let mut i = dim;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < m - dim + i {
                idx[i] += 1;
                for j in i + 1..dim {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Box sums: every pairwise corner sum is inside and the bounds are the
/// extreme corner sums.
pub fn minkowski(seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::default();
    for case in 0..CASES {
        let dim = 1 + case % 3;
        let a = random_box(&mut rng, dim);
        let b = random_box(&mut rng, dim);
        let sum = minkowski_sum_box(&a, &b).unwrap();
        let ca = corners(a.lower(), a.upper());
        let cb = corners(b.lower(), b.upper());
        let mut ok = true;
        for p in &ca {
            for q in &cb {
                let s: Vec<f64> = p.iter().zip(q).map(|(x, y)| x + y).collect();
                ok &= sum.contains_point(&s, 1e-12).unwrap();
            }
        }
        for d in 0..dim {
            let min = |c: &[Vec<f64>]| c.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let max = |c: &[Vec<f64>]| c.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            ok &= (sum.lower()[d] - (min(&ca) + min(&cb))).abs() <= 1e-12;
            ok &= (sum.upper()[d] - (max(&ca) + max(&cb))).abs() <= 1e-12;
        }
        t.add(ok);
    }
    t
}

/// Membership of polytopes and of their translates on a grid.
pub fn membership(seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::default();
    for case in 0..CASES {
        let dim = 1 + case % 3;
        let (a, b) = random_polytope(&mut rng, dim);
        let poly = HPolytope::new(a.clone(), b.clone()).unwrap();
        let offset: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let moved = poly.translate(&offset).unwrap();
        // a 5^dim grid over [-3.5, 3.5]^dim
        let steps = 5usize;
        let mut ok = true;
        for flat in 0..steps.pow(dim as u32) {
            let x: Vec<f64> = (0..dim)
                .map(|d| {
                    -3.5 + 7.0 * ((flat / steps.pow(d as u32)) % steps) as f64 / (steps - 1) as f64
                })
                .collect();
            ok &= poly.contains_point(&x, 0.0).unwrap() == inside(&a, &b, &x, 0.0);
            let shifted: Vec<f64> = x.iter().zip(&offset).map(|(p, q)| p + q).collect();
            ok &= moved.contains_point(&shifted, 1e-12).unwrap() == inside(&a, &b, &x, 1e-12);
        }
        t.add(ok);
    }
    t
}

pub fn support(seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::default();
    for case in 0..CASES {
        let dim = 1 + case % 3;
        let (a, b) = random_polytope(&mut rng, dim);
        let poly = HPolytope::new(a.clone(), b.clone()).unwrap();
        let verts = vertices_oracle(&a, &b);
        let d: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let oracle = verts
            .iter()
            .map(|v| v.iter().zip(&d).map(|(p, q)| p * q).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let s = poly.support(&d).unwrap();
        t.add(!verts.is_empty() && (s - oracle).abs() <= 1e-8 * (1.0 + oracle.abs()));
    }
    t
}

/// Containment of boxes and polytopes; also returns how many fixtures were
/// contained so callers can check both outcomes occur.
pub fn containment(seed: u64) -> (Tally, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::default();
    let mut contained = 0;
    for case in 0..CASES {
        let dim = 1 + case % 3;
        let (a, b) = random_polytope(&mut rng, dim);
        let outer = HPolytope::new(a.clone(), b.clone()).unwrap();
        let (got, want) = if case % 2 == 0 {
            let inner = random_box(&mut rng, dim);
            let want = corners(inner.lower(), inner.upper())
                .iter()
                .all(|c| inside(&a, &b, c, 1e-9));
            (contains_set(&outer, &inner, 1e-9).unwrap(), want)
        } else {
            let (ia, ib) = random_polytope(&mut rng, dim);
            let scale: f64 = rng.random_range(0.2..1.5);
            let ib: Vec<f64> = ib.iter().map(|v| v * scale).collect();
            let inner = HPolytope::new(ia.clone(), ib.clone()).unwrap();
            let want = vertices_oracle(&ia, &ib)
                .iter()
                .all(|v| inside(&a, &b, v, 1e-9));
            (contains_set(&outer, &inner, 1e-9).unwrap(), want)
        };
        contained += usize::from(want);
        t.add(got == want);
    }
    (t, contained)
}

/// Sizing search against a scan of every exponent from the top down.
pub fn sizing(seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::default();
    for case in 0..CASES {
        let dim = 1 + case % 3;
        let (a, b) = random_polytope(&mut rng, dim);
        let outer = HPolytope::new(a.clone(), b.clone()).unwrap();
        let half: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..4.0)).collect();
        let guess = ConsistencySet::Box(BoxSet::symmetric(&half).unwrap());
        let rho: f64 = rng.random_range(1.1..2.0);
        let bounds = (-12, rng.random_range(-3..4));
        let fits = |h: &[f64]| {
            let lo: Vec<f64> = h.iter().map(|v| -v).collect();
            corners(&lo, h).iter().all(|c| inside(&a, &b, c, EPS_SET))
        };
        let oracle = (bounds.0..=bounds.1)
            .rev()
            .find(|&i| fits(&half.iter().map(|v| v * rho.powi(i)).collect::<Vec<_>>()));
        let found = sizing_search(
            &guess,
            |s| match s {
                ConsistencySet::Box(bx) => contains_set(&outer, bx, EPS_SET).unwrap(),
                ConsistencySet::Poly(p) => contains_set(&outer, p, EPS_SET).unwrap(),
            },
            rho,
            bounds,
        )
        .ok()
        .map(|(_, i)| i);
        t.add(found == oracle);
    }
    t
}
