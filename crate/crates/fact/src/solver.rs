//! Dense constrained solver for small convex quadratics over a box with
//! optional linear equalities and inequalities, plus a multistart
//! projected-gradient path for nonconvex squared-quadratic penalties.
//!
//! Problems here are tiny (four free variables after eliminating the
//! marginal equalities), so the convex path enumerates candidate active
//! sets and checks the KKT conditions exactly instead of pivoting. Every
//! Lagrange multiplier is recovered, so solutions come with a KKT residual
//! certificate. Enumeration order (by active-set size, then index) makes
//! the returned solution deterministic; on a face of optima the first,
//! lexicographically smallest active set wins.

use crate::error::{FactError, Result};
use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub max_iterations: usize,
    pub multistart_count: usize,
    pub rng_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-9,
            optimality_tol: 1e-8,
            max_iterations: 10_000,
            multistart_count: 16,
            rng_seed: 0,
        }
    }
}

/// A nonconvex penalty term `w * s(x)^2` with `s(x) = 1/2 x^T H x + h^T x + e`.
#[derive(Debug, Clone)]
pub struct QuadraticPenalty {
    pub h: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
    pub weight: f64,
}

impl QuadraticPenalty {
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.h * x)[(0, 0)] + self.lin.dot(x) + self.constant
    }

    fn gradient_of_square(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = self.value(x);
        (&self.h * x + &self.lin) * (2.0 * self.weight * s)
    }
}

/// `min 1/2 x^T Q x + q^T x + c0  s.t.  E x = d, l <= x <= u, A x <= b`,
/// optionally plus nonconvex penalty terms.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub q: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
    pub eq: Option<(DMatrix<f64>, DVector<f64>)>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub ineq: Option<(DMatrix<f64>, DVector<f64>)>,
    pub penalties: Vec<QuadraticPenalty>,
}

impl QuadraticProgram {
    pub fn box_only(n: usize, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        Self {
            q: DMatrix::zeros(n, n),
            lin: DVector::zeros(n),
            constant: 0.0,
            eq: None,
            lower,
            upper,
            ineq: None,
            penalties: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let base = 0.5 * (x.transpose() * &self.q * x)[(0, 0)] + self.lin.dot(x) + self.constant;
        let pen: f64 = self
            .penalties
            .iter()
            .map(|p| p.weight * p.value(x).powi(2))
            .sum();
        base + pen
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.q * x + &self.lin;
        for p in &self.penalties {
            g += p.gradient_of_square(x);
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub active_set: Vec<usize>,
    pub converged: bool,
}

/// One-sided linear constraint `normal . x <= bound`.
struct Constraint {
    normal: DVector<f64>,
    bound: f64,
}

fn constraint_list(qp: &QuadraticProgram) -> Vec<Constraint> {
    let n = qp.dim();
    let mut list = Vec::new();
    for i in 0..n {
        let mut lo = DVector::zeros(n);
        lo[i] = -1.0;
        list.push(Constraint {
            normal: lo,
            bound: -qp.lower[i],
        });
        let mut hi = DVector::zeros(n);
        hi[i] = 1.0;
        list.push(Constraint {
            normal: hi,
            bound: qp.upper[i],
        });
    }
    if let Some((a, b)) = &qp.ineq {
        for r in 0..a.nrows() {
            list.push(Constraint {
                normal: a.row(r).transpose(),
                bound: b[r],
            });
        }
    }
    list
}

fn subsets_up_to(n_items: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for size in 1..=max_size.min(n_items) {
        out.extend((0..n_items).combinations(size));
    }
    out
}

/// Solve the convex part of `qp` (penalties must be empty).
pub fn solve_convex(qp: &QuadraticProgram, cfg: &SolverConfig) -> Result<Solution> {
    assert!(
        qp.penalties.is_empty(),
        "solve_convex does not accept nonconvex penalties"
    );
    let n = qp.dim();
    let constraints = constraint_list(qp);
    let (eq_a, eq_b) = match &qp.eq {
        Some((a, b)) => (a.clone(), b.clone()),
        None => (DMatrix::zeros(0, n), DVector::zeros(0)),
    };
    let n_eq = eq_a.nrows();
    // gradient-space magnitudes govern KKT residual tolerances; primal
    // feasibility is judged on the variables' own scale
    let scale = 1.0 + qp.q.amax() + qp.lin.amax();
    let xscale = 1.0 + qp.upper.amax().max(qp.lower.amax());

    let mut best: Option<Solution> = None;
    for subset in subsets_up_to(constraints.len(), n) {
        let k = n_eq + subset.len();
        // active rows C x = d; the constraint matrix is well-scaled even
        // when the objective carries a huge fairness weight, so the face
        // is resolved first and the objective reduced onto it
        let mut c_mat = DMatrix::zeros(k, n);
        let mut d = DVector::zeros(k);
        c_mat.view_mut((0, 0), (n_eq, n)).copy_from(&eq_a);
        d.rows_mut(0, n_eq).copy_from(&eq_b);
        for (j, &ci) in subset.iter().enumerate() {
            c_mat
                .row_mut(n_eq + j)
                .copy_from(&constraints[ci].normal.transpose());
            d[n_eq + j] = constraints[ci].bound;
        }

        let x_p = if k == 0 {
            DVector::zeros(n)
        } else {
            let svd = c_mat.clone().svd(true, true);
            let thresh = svd.singular_values.max() * 1e-12;
            match svd.solve(&d, thresh) {
                Ok(s) => s,
                Err(_) => continue,
            }
        };
        if k > 0 && (&c_mat * &x_p - &d).amax() > cfg.feasibility_tol * xscale {
            // active set rows are mutually inconsistent
            continue;
        }

        // orthonormal nullspace basis of C from the spectrum of C'C
        let z_basis = {
            let gram = c_mat.transpose() * &c_mat;
            let eig = gram.symmetric_eigen();
            let cutoff = eig.eigenvalues.max().max(1.0) * 1e-20;
            let cols: Vec<usize> = (0..n)
                .filter(|&i| eig.eigenvalues[i] <= cutoff)
                .collect();
            let mut z = DMatrix::zeros(n, cols.len());
            for (j, &i) in cols.iter().enumerate() {
                z.column_mut(j).copy_from(&eig.eigenvectors.column(i));
            }
            z
        };

        let x = if z_basis.ncols() == 0 {
            x_p
        } else {
            // stationary point of the reduced objective on the face
            let h = z_basis.transpose() * &qp.q * &z_basis;
            let g = z_basis.transpose() * (&qp.q * &x_p + &qp.lin);
            let svd = h.clone().svd(true, true);
            let thresh = svd.singular_values.max().max(1e-300) * 1e-12;
            let y = match svd.solve(&(-&g), thresh) {
                Ok(y) => y,
                Err(_) => continue,
            };
            if (&h * &y + &g).amax() > cfg.optimality_tol * scale {
                // flat direction with nonzero slope: no stationary point
                // on this face (the optimum lives on a subface)
                continue;
            }
            x_p + z_basis * y
        };

        // primal feasibility over every constraint
        let mut feasible = n_eq == 0 || (&eq_a * &x - &eq_b).amax() <= cfg.feasibility_tol * xscale;
        if feasible {
            for c in &constraints {
                if c.normal.dot(&x) - c.bound > cfg.feasibility_tol * xscale {
                    feasible = false;
                    break;
                }
            }
        }
        if !feasible {
            continue;
        }

        // multipliers: grad f + C' mu = 0
        let grad = &qp.q * &x + &qp.lin;
        let mu = if k == 0 {
            DVector::zeros(0)
        } else {
            let ct = c_mat.transpose();
            let svd = ct.clone().svd(true, true);
            let thresh = svd.singular_values.max() * 1e-12;
            match svd.solve(&(-&grad), thresh) {
                Ok(m) => m,
                Err(_) => continue,
            }
        };
        let kkt_residual = if k == 0 {
            grad.amax()
        } else {
            (c_mat.transpose() * &mu + &grad).amax()
        };
        if kkt_residual > cfg.optimality_tol * scale {
            continue;
        }
        // dual feasibility: active inequality multipliers nonnegative
        if (0..subset.len()).any(|j| mu[n_eq + j] < -cfg.optimality_tol * scale) {
            continue;
        }
        let objective = qp.objective(&x);
        let candidate = Solution {
            x,
            objective,
            kkt_residual,
            active_set: subset.clone(),
            converged: true,
        };
        match &best {
            Some(b) if b.objective <= candidate.objective + 1e-12 * scale => {}
            _ => best = Some(candidate),
        }
    }
    best.ok_or_else(|| FactError::Infeasible("no KKT point found over the constraint set".into()))
}

/// Multistart projected gradient for problems carrying nonconvex penalties.
/// Box constraints only; approximate by construction.
pub fn solve_nonconvex(qp: &QuadraticProgram, cfg: &SolverConfig) -> Result<Solution> {
    if qp.eq.is_some() || qp.ineq.is_some() {
        return Err(FactError::InvalidParameter(
            "nonconvex penalties are supported with box constraints only".into(),
        ));
    }
    let n = qp.dim();
    let clamp = |x: &mut DVector<f64>| {
        for i in 0..n {
            x[i] = x[i].clamp(qp.lower[i], qp.upper[i]);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let starts = latin_hypercube(&mut rng, cfg.multistart_count.max(1), &qp.lower, &qp.upper);

    let mut best: Option<Solution> = None;
    let mut all_converged = true;
    for (seed_index, start) in starts.into_iter().enumerate() {
        let mut x = start;
        clamp(&mut x);
        let mut step = 1.0;
        let mut converged = false;
        for _ in 0..cfg.max_iterations {
            let g = qp.gradient(&x);
            let f0 = qp.objective(&x);
            // backtracking on the projected step
            let mut accepted = false;
            for _ in 0..60 {
                let mut trial = &x - &g * step;
                clamp(&mut trial);
                let delta = (&trial - &x).amax();
                if qp.objective(&trial) <= f0 - 1e-4 * step * g.dot(&(&x - &trial)).max(0.0) {
                    let moved = delta;
                    x = trial;
                    accepted = true;
                    if moved <= 1e-13 {
                        converged = true;
                    }
                    break;
                }
                step *= 0.5;
                if step < 1e-18 {
                    break;
                }
            }
            if !accepted || converged {
                converged = converged || !accepted && qp.gradient(&x).amax() <= cfg.optimality_tol;
                break;
            }
            step = (step * 2.0).min(1.0e6);
        }
        if !converged {
            // accept the point but flag the run
            all_converged = false;
        }
        let objective = qp.objective(&x);
        let replace = match &best {
            Some(b) => objective < b.objective - 0.0 || (objective == b.objective && false),
            None => true,
        };
        if replace {
            best = Some(Solution {
                kkt_residual: projected_gradient_norm(qp, &x),
                x,
                objective,
                active_set: vec![seed_index],
                converged,
            });
        }
    }
    let mut sol =
        best.ok_or_else(|| FactError::Infeasible("no multistart produced a point".into()))?;
    sol.converged = all_converged;
    Ok(sol)
}

fn projected_gradient_norm(qp: &QuadraticProgram, x: &DVector<f64>) -> f64 {
    let g = qp.gradient(x);
    let mut worst = 0.0f64;
    for i in 0..qp.dim() {
        let at_lower = (x[i] - qp.lower[i]).abs() <= 1e-12;
        let at_upper = (qp.upper[i] - x[i]).abs() <= 1e-12;
        let gi = g[i];
        let blocked = (at_lower && gi > 0.0) || (at_upper && gi < 0.0);
        if !blocked {
            worst = worst.max(gi.abs());
        }
    }
    worst
}

fn latin_hypercube(
    rng: &mut ChaCha8Rng,
    count: usize,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let n = lower.len();
    let mut cells: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut perm: Vec<usize> = (0..count).collect();
            for i in (1..count).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            perm
        })
        .collect();
    (0..count)
        .map(|k| {
            DVector::from_iterator(
                n,
                (0..n).map(|d| {
                    let u: f64 = rng.gen();
                    let frac = (cells[d].pop().unwrap_or(k) as f64 + u) / count as f64;
                    lower[d] + frac * (upper[d] - lower[d])
                }),
            )
        })
        .collect()
}

/// Main entry point: routes to the exact convex path or the multistart
/// approximate path depending on the presence of nonconvex penalties.
pub fn solve(qp: &QuadraticProgram, cfg: &SolverConfig) -> Result<Solution> {
    if qp.penalties.is_empty() {
        solve_convex(qp, cfg)
    } else {
        solve_nonconvex(qp, cfg)
    }
}

/// Phase-1 feasibility: is there a point of the box (and inequalities)
/// with `E x = d` within tolerance? Returns the witness when feasible.
pub fn feasible(
    eq: Option<(DMatrix<f64>, DVector<f64>)>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    ineq: Option<(DMatrix<f64>, DVector<f64>)>,
    cfg: &SolverConfig,
) -> Result<(bool, Option<DVector<f64>>, f64)> {
    let n = lower.len();
    let (q, lin, constant) = match &eq {
        Some((a, b)) => {
            // minimize ||E x - d||^2
            (
                a.transpose() * a * 2.0,
                a.transpose() * b * -2.0,
                b.dot(b),
            )
        }
        None => (DMatrix::zeros(n, n), DVector::zeros(n), 0.0),
    };
    let qp = QuadraticProgram {
        q,
        lin,
        constant,
        eq: None,
        lower,
        upper,
        ineq,
        penalties: Vec::new(),
    };
    match solve_convex(&qp, cfg) {
        Ok(sol) => {
            let ok = sol.objective.abs() <= cfg.feasibility_tol;
            let witness = ok.then(|| sol.x.clone());
            Ok((ok, witness, sol.objective.max(0.0)))
        }
        Err(FactError::Infeasible(_)) => Ok((false, None, f64::INFINITY)),
        Err(e) => Err(e),
    }
}
