//! Primal active-set solver for small convex quadratic programs
//!
//! ```text
//! minimise   1/2 x'Hx + g'x
//! subject to sum_{j in group k} x_j = 0   for every group k
//!            x_j >= lower_j
//! ```
//!
//! started from the feasible point `x = 0` (so `lower <= 0`). The equality
//! groups are disjoint, which keeps the KKT matrix nonsingular whenever `H`
//! is positive definite on the free variables.

use crate::linalg::DenseMatrix;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    /// Variables held at their lower bound.
    pub at_bound: Vec<bool>,
    pub iterations: usize,
    pub optimal: bool,
}

/// `h` must be symmetric positive definite.
pub fn solve_group_qp<T: Real>(
    h: &DenseMatrix<T>,
    g: &[T],
    groups: &[Vec<usize>],
    lower: &[T],
) -> QpSolution<T> {
    let n = g.len();
    let mut x = vec![T::zero(); n];
    let mut fixed: Vec<bool> = lower.iter().map(|l| *l >= T::zero()).collect();
    let gscale = g
        .iter()
        .fold(T::zero(), |m, v| m.max(v.abs()))
        .max(T::min_positive_value());
    let tiny = T::lit(1e-12) * gscale;
    let max_iter = 10 * n + 20;

    for iteration in 0..max_iter {
        let grad: Vec<T> = h.mul_vec(&x).iter().zip(g).map(|(a, b)| *a + *b).collect();
        let free: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
        let live_groups: Vec<usize> = (0..groups.len())
            .filter(|&k| groups[k].iter().any(|&j| !fixed[j]))
            .collect();
        let nf = free.len();
        let size = nf + live_groups.len();
        let mut step = vec![T::zero(); n];
        let mut lambda = vec![T::zero(); groups.len()];

        if size > 0 {
            let pos = |j: usize| free.iter().position(|&f| f == j);
            let mut kkt = DenseMatrix::zeros(size, size);
            let mut rhs = vec![T::zero(); size];
            for (r, &j) in free.iter().enumerate() {
                for (c, &k) in free.iter().enumerate() {
                    kkt.set(r, c, h.get(j, k));
                }
                rhs[r] = -grad[j];
            }
            for (q, &k) in live_groups.iter().enumerate() {
                for &j in &groups[k] {
                    if let Some(r) = pos(j) {
                        kkt.set(r, nf + q, T::one());
                        kkt.set(nf + q, r, T::one());
                    }
                }
            }
            let Some(sol) = kkt.solve(&rhs) else {
                return QpSolution {
                    x,
                    at_bound: fixed,
                    iterations: iteration,
                    optimal: false,
                };
            };
            for (r, &j) in free.iter().enumerate() {
                step[j] = sol[r];
            }
            for (q, &k) in live_groups.iter().enumerate() {
                lambda[k] = sol[nf + q];
            }
        }

        let step_norm = step.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let xscale = x.iter().chain(lower).fold(T::one(), |m, v| m.max(v.abs()));
        if step_norm <= T::lit(1e-14) * xscale {
            // multipliers of the bounds: mu_j = grad_j + lambda_group(j)
            let mut worst: Option<(usize, T)> = None;
            for (k, grp) in groups.iter().enumerate() {
                if grp.iter().all(|&j| fixed[j]) {
                    continue;
                }
                for &j in grp {
                    if fixed[j] {
                        let mu = grad[j] + lambda[k];
                        if mu < -tiny && worst.is_none_or(|w| mu < w.1) {
                            worst = Some((j, mu));
                        }
                    }
                }
            }
            match worst {
                Some((j, _)) => fixed[j] = false,
                None => {
                    return QpSolution {
                        x,
                        at_bound: fixed,
                        iterations: iteration,
                        optimal: true,
                    }
                }
            }
            continue;
        }

        let mut alpha = T::one();
        let mut blocking = None;
        for j in 0..n {
            if !fixed[j] && step[j] < T::zero() {
                let a = (lower[j] - x[j]) / step[j];
                if a < alpha {
                    alpha = a.max(T::zero());
                    blocking = Some(j);
                }
            }
        }
        for j in 0..n {
            x[j] = x[j] + alpha * step[j];
        }
        if let Some(j) = blocking {
            x[j] = lower[j];
            fixed[j] = true;
        }
    }
    QpSolution {
        x,
        at_bound: fixed,
        iterations: max_iter,
        optimal: false,
    }
}
