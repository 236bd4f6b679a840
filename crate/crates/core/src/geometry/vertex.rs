//! Vertex enumeration for small H-polytopes by trying every set of `d`
//! facets. Exponential in the facet count, fine for the low-dimensional
//! sets used here.

use crate::scalar::Real;

/// Solves the square system `m x = r` by Gaussian elimination with partial
/// pivoting. Returns `None` for (numerically) singular systems.
pub fn solve_square<T: Real>(mut m: Vec<Vec<T>>, mut r: Vec<T>) -> Option<Vec<T>> {
    let n = r.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            m[i][col]
                .abs()
                .partial_cmp(&m[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[piv][col].abs() <= T::pivot_eps() {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f != T::zero() {
                for k in col..n {
                    let v = m[col][k];
                    m[row][k] = m[row][k] - f * v;
                }
                r[row] = r[row] - f * r[col];
            }
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut s = r[row];
        for k in row + 1..n {
            s = s - m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    Some(x)
}

/// All vertices of `{x : a x ≤ b}`, deduplicated. For an unbounded set this
/// returns only its extreme points.
pub fn enumerate_vertices<T: Real>(a: &[Vec<T>], b: &[T]) -> Vec<Vec<T>> {
    let m = a.len();
    let Some(d) = a.first().map(Vec::len) else {
        return Vec::new();
    };
    let tol = T::pivot_eps() * T::lit(100.0);
    let mut out: Vec<Vec<T>> = Vec::new();
    let mut idx: Vec<usize> = (0..d).collect();
    if d == 0 || d > m {
        return out;
    }
    loop {
        let sys: Vec<Vec<T>> = idx.iter().map(|&i| a[i].clone()).collect();
        let rhs: Vec<T> = idx.iter().map(|&i| b[i]).collect();
        if let Some(x) = solve_square(sys, rhs) {
            let feasible = a.iter().zip(b).all(|(row, bi)| {
                let lhs = row.iter().zip(&x).fold(T::zero(), |s, (p, q)| s + *p * *q);
                lhs <= *bi + tol * (T::one() + bi.abs())
            });
            let dup = out.iter().any(|v| {
                v.iter()
                    .zip(&x)
                    .all(|(p, q)| (*p - *q).abs() <= tol * (T::one() + p.abs()))
            });
            if feasible && !dup {
                out.push(x);
            }
        }
        // next d-combination of 0..m
        let mut i = d;
        while i > 0 && idx[i - 1] == i - 1 + m - d {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..d {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_has_eight_vertices() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for d in 0..3 {
            for s in [1.0, -1.0] {
                let mut row = vec![0.0; 3];
                row[d] = s;
                a.push(row);
                b.push(1.0);
            }
        }
        let v: Vec<Vec<f64>> = enumerate_vertices(&a, &b);
        assert_eq!(v.len(), 8);
        assert!(v
            .iter()
            .all(|x| x.iter().all(|c| (c.abs() - 1.0f64).abs() < 1e-12)));
    }

    #[test]
    fn solves_small_system() {
        let x = solve_square(vec![vec![2.0f64, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8f64).abs() < 1e-12 && (x[1] - 1.4f64).abs() < 1e-12);
        assert!(solve_square(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![1.0, 2.0]).is_none());
    }
}
