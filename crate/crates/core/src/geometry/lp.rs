//! Dense two-phase simplex for the small support-function programs of the
//! set algebra: `maximize cᵀx subject to A x ≤ b`, `x` free.
//!
//! Free variables are split as `x = x⁺ − x⁻`; rows with a negative right hand
//! side get an artificial variable for phase one. Bland's rule is used for
//! both the entering and the leaving variable so the method cannot cycle.

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome<T> {
    Optimal { value: T, x: Vec<T> },
    Unbounded,
    Infeasible,
}

struct Tableau<T> {
    rows: Vec<Vec<T>>,
    rhs: Vec<T>,
    basis: Vec<usize>,
    width: usize,
}

impl<T: Real> Tableau<T> {
    fn pivot(&mut self, row: usize, col: usize, objective: &mut [T], obj_rhs: &mut T) {
        let p = self.rows[row][col];
        for v in self.rows[row].iter_mut() {
            *v = *v / p;
        }
        self.rhs[row] = self.rhs[row] / p;
        let pivot_row = self.rows[row].clone();
        let pivot_rhs = self.rhs[row];
        for (i, r) in self.rows.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f != T::zero() {
                for (v, pv) in r.iter_mut().zip(&pivot_row) {
                    *v = *v - f * *pv;
                }
                self.rhs[i] = self.rhs[i] - f * pivot_rhs;
            }
        }
        let f = objective[col];
        if f != T::zero() {
            for (v, pv) in objective.iter_mut().zip(&pivot_row) {
                *v = *v - f * *pv;
            }
            *obj_rhs = *obj_rhs - f * pivot_rhs;
        }
        self.basis[row] = col;
    }

    /// Runs simplex iterations on a reduced-cost row where a negative entry
    /// means the objective can still grow. Columns `>= allowed` never enter.
    fn optimize(&mut self, objective: &mut [T], obj_rhs: &mut T, allowed: usize) -> bool {
        let eps = T::pivot_eps();
        let max_iter = 50 * (self.rows.len() + self.width) + 100;
        for _ in 0..max_iter {
            let Some(col) = (0..allowed).find(|&j| objective[j] < -eps) else {
                return true;
            };
            let mut best: Option<(usize, T)> = None;
            for (i, r) in self.rows.iter().enumerate() {
                if r[col] > eps {
                    let ratio = self.rhs[i] / r[col];
                    best = match best {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - eps
                                || ((ratio - br).abs() <= eps && self.basis[i] < self.basis[bi])
                            {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            match best {
                Some((row, _)) => self.pivot(row, col, objective, obj_rhs),
                None => return false,
            }
        }
        // Bland's rule terminates; reaching here means numerical trouble.
        true
    }
}

/// Maximizes `c·x` over `{x : a x ≤ b}`.
pub fn maximize<T: Real>(c: &[T], a: &[Vec<T>], b: &[T]) -> LpOutcome<T> {
    let n = c.len();
    let m = a.len();
    debug_assert_eq!(b.len(), m);
    if m == 0 {
        return if c.iter().all(|v| *v == T::zero()) {
            LpOutcome::Optimal {
                value: T::zero(),
                x: vec![T::zero(); n],
            }
        } else {
            LpOutcome::Unbounded
        };
    }
    let negative: Vec<usize> = (0..m).filter(|&i| b[i] < T::zero()).collect();
    let n_art = negative.len();
    // columns: x+ (n), x- (n), slack (m), artificial (n_art)
    let width = 2 * n + m + n_art;
    let mut rows = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut art_col = 2 * n + m;
    for i in 0..m {
        let sign = if b[i] < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        let mut row = vec![T::zero(); width];
        for j in 0..n {
            row[j] = sign * a[i][j];
            row[n + j] = -sign * a[i][j];
        }
        row[2 * n + i] = sign;
        if sign < T::zero() {
            row[art_col] = T::one();
            basis.push(art_col);
            art_col += 1;
        } else {
            basis.push(2 * n + i);
        }
        rows.push(row);
        rhs.push(sign * b[i]);
    }
    let mut tab = Tableau {
        rows,
        rhs,
        basis,
        width,
    };

    if n_art > 0 {
        // Phase one: maximize -Σ artificials.
        let mut obj = vec![T::zero(); width];
        let mut obj_rhs = T::zero();
        for j in 2 * n + m..width {
            obj[j] = T::one();
        }
        for (i, &bi) in tab.basis.iter().enumerate() {
            if bi >= 2 * n + m {
                for j in 0..width {
                    obj[j] = obj[j] - tab.rows[i][j];
                }
                obj_rhs = obj_rhs - tab.rhs[i];
            }
        }
        tab.optimize(&mut obj, &mut obj_rhs, width);
        let scale = b.iter().fold(T::one(), |acc, v| acc.max(v.abs()));
        if -obj_rhs > T::pivot_eps() * scale {
            return LpOutcome::Infeasible;
        }
        // Drive artificials still basic (at zero) out of the basis.
        for i in 0..m {
            if tab.basis[i] >= 2 * n + m {
                if let Some(col) = (0..2 * n + m).find(|&j| tab.rows[i][j].abs() > T::pivot_eps()) {
                    let mut dummy = vec![T::zero(); width];
                    let mut dummy_rhs = T::zero();
                    tab.pivot(i, col, &mut dummy, &mut dummy_rhs);
                }
            }
        }
    }

    let mut obj = vec![T::zero(); width];
    let mut obj_rhs = T::zero();
    for j in 0..n {
        obj[j] = -c[j];
        obj[n + j] = c[j];
    }
    for i in 0..m {
        let bi = tab.basis[i];
        let f = obj[bi];
        if f != T::zero() {
            for j in 0..width {
                obj[j] = obj[j] - f * tab.rows[i][j];
            }
            obj_rhs = obj_rhs - f * tab.rhs[i];
        }
    }
    if !tab.optimize(&mut obj, &mut obj_rhs, 2 * n + m) {
        return LpOutcome::Unbounded;
    }
    let mut x = vec![T::zero(); n];
    for (i, &bi) in tab.basis.iter().enumerate() {
        if bi < n {
            x[bi] = x[bi] + tab.rhs[i];
        } else if bi < 2 * n {
            x[bi - n] = x[bi - n] - tab.rhs[i];
        }
    }
    let value = c
        .iter()
        .zip(&x)
        .fold(T::zero(), |acc, (ci, xi)| acc + *ci * *xi);
    LpOutcome::Optimal { value, x }
}
