//! The accuracy-fairness optimization problems over the tensor polytope:
//! regularized, hard-constrained, per-definition-weighted, and
//! model-specific variants.
//!
//! All solves run in the four-dimensional reduced coordinates (group
//! true-positive and false-positive masses); the marginal equalities are
//! eliminated analytically, so the solver only ever sees a box plus any
//! extra linear inequalities.

use crate::defs::{FairnessSystem, Mat8};
use crate::error::{FactError, Result};
use crate::postprocess::{hull_constraints, HullConstraints};
use crate::solver::{self, QuadraticPenalty, QuadraticProgram, SolverConfig};
use crate::tensor::{error_rate, FairnessConfusionTensor, Marginals, Vec8, ERROR_COSTS};
use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

/// Fairness weight; `Infinite` means fairness is enforced exactly
/// (feasibility first, then error-minimal point on the fair set).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Lambda {
    pub fn finite(self) -> Option<f64> {
        match self {
            Lambda::Finite(v) => Some(v),
            Lambda::Infinite => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsDeltaSolution {
    pub z_star: Vec8,
    /// Aggregate fairness deviation: sum of squared constraint residuals.
    pub epsilon: f64,
    /// Performance deviation: squared error rate.
    pub delta: f64,
    pub error_rate: f64,
    pub lambda_used: Lambda,
    pub converged: bool,
    /// Per-system aggregate gaps (populated by the multi-weight solve).
    pub system_residuals: Vec<f64>,
}

/// Affine change of variables from the 4 free coordinates
/// x = (tp1, fp1, tp0, fp0)/N to the 8-cell normalized tensor.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub m: Marginals,
    s: SMatrix<f64, 8, 4>,
    z_base: Vec8,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Reduction {
    pub fn new(m: &Marginals) -> Self {
        let mut s = SMatrix::<f64, 8, 4>::zeros();
        for (i, col) in [(0usize, 0usize), (2, 1), (4, 2), (6, 3)] {
            s[(i, col)] = 1.0;
            s[(i + 1, col)] = -1.0;
        }
        let z_base = Vec8::from_column_slice(&[
            0.0,
            m.m1 / m.n,
            0.0,
            (m.n1 - m.m1) / m.n,
            0.0,
            m.m0 / m.n,
            0.0,
            (m.n0 - m.m0) / m.n,
        ]);
        let upper = DVector::from_column_slice(&[
            m.m1 / m.n,
            (m.n1 - m.m1) / m.n,
            m.m0 / m.n,
            (m.n0 - m.m0) / m.n,
        ]);
        Self {
            m: *m,
            s,
            z_base,
            lower: DVector::zeros(4),
            upper,
        }
    }

    pub fn lift(&self, x: &DVector<f64>) -> Vec8 {
        let xs = nalgebra::SVector::<f64, 4>::from_column_slice(x.as_slice());
        self.s * xs + self.z_base
    }

    /// A linear row over z as (gradient over x, offset): `a . z = g . x + o`.
    pub fn reduce_row(&self, row: &Vec8) -> (DVector<f64>, f64) {
        let g = self.s.transpose() * row;
        (DVector::from_column_slice(g.as_slice()), row.dot(&self.z_base))
    }

    /// A symmetric quadratic form `s(z) = z' B z / 2` as
    /// `s(x) = x' H x / 2 + h . x + e`.
    pub fn reduce_form(&self, b: &Mat8) -> (DMatrix<f64>, DVector<f64>, f64) {
        let h4 = self.s.transpose() * b * self.s;
        let lin = self.s.transpose() * (b * self.z_base);
        let e = 0.5 * (self.z_base.transpose() * b * self.z_base)[(0, 0)];
        (
            DMatrix::from_fn(4, 4, |r, c| h4[(r, c)]),
            DVector::from_column_slice(lin.as_slice()),
            e,
        )
    }

    pub fn error_row(&self) -> (DVector<f64>, f64) {
        self.reduce_row(&Vec8::from_column_slice(&ERROR_COSTS))
    }
}

/// Extra linear inequalities `A x <= b` in reduced coordinates.
type Ineq = Option<(DMatrix<f64>, DVector<f64>)>;

fn add_squared_row(qp: &mut QuadraticProgram, g: &DVector<f64>, o: f64, w: f64) {
    qp.q += g * g.transpose() * (2.0 * w);
    qp.lin += g * (2.0 * w * o);
    qp.constant += w * o * o;
}

fn base_qp(red: &Reduction, ineq: &Ineq) -> QuadraticProgram {
    let mut qp = QuadraticProgram::box_only(4, red.lower.clone(), red.upper.clone());
    qp.ineq = ineq.clone();
    qp
}

fn finish(
    red: &Reduction,
    sys: &FairnessSystem,
    sol: solver::Solution,
    lambda: Lambda,
) -> EpsDeltaSolution {
    let z = red.lift(&sol.x);
    let err = error_rate(&z);
    EpsDeltaSolution {
        z_star: z,
        epsilon: sys.aggregate_gap(&z),
        delta: err * err,
        error_rate: err,
        lambda_used: lambda,
        converged: sol.converged,
        system_residuals: Vec::new(),
    }
}

fn solve_finite(
    red: &Reduction,
    weighted: &[(&FairnessSystem, f64)],
    ineq: &Ineq,
    cfg: &SolverConfig,
) -> Result<solver::Solution> {
    let mut qp = base_qp(red, ineq);
    let (gc, oc) = red.error_row();
    add_squared_row(&mut qp, &gc, oc, 1.0);
    for (sys, w) in weighted {
        for row in &sys.rows {
            let (g, o) = red.reduce_row(row);
            add_squared_row(&mut qp, &g, o, *w);
        }
        for form in &sys.forms {
            let (h, lin, e) = red.reduce_form(&form.form);
            qp.penalties.push(QuadraticPenalty {
                h,
                lin,
                constant: e,
                weight: *w,
            });
        }
    }
    if !qp.penalties.is_empty() && qp.ineq.is_some() {
        return Err(FactError::InvalidParameter(
            "quadratic fairness definitions cannot be combined with \
             model-specific constraints"
                .into(),
        ));
    }
    solver::solve(&qp, cfg)
}

/// Minimum aggregate fairness gap reachable over the (possibly further
/// constrained) polytope, with its witness in reduced coordinates.
fn fairness_floor_reduced(
    red: &Reduction,
    sys: &FairnessSystem,
    ineq: &Ineq,
    cfg: &SolverConfig,
) -> Result<solver::Solution> {
    let mut qp = base_qp(red, ineq);
    for row in &sys.rows {
        let (g, o) = red.reduce_row(row);
        add_squared_row(&mut qp, &g, o, 1.0);
    }
    for form in &sys.forms {
        let (h, lin, e) = red.reduce_form(&form.form);
        qp.penalties.push(QuadraticPenalty {
            h,
            lin,
            constant: e,
            weight: 1.0,
        });
    }
    if !qp.penalties.is_empty() && qp.ineq.is_some() {
        return Err(FactError::InvalidParameter(
            "quadratic fairness definitions cannot be combined with \
             model-specific constraints"
                .into(),
        ));
    }
    solver::solve(&qp, cfg)
}

/// Smallest aggregate fairness gap reachable on the polytope, with the
/// achieving tensor. Zero (within tolerance) iff the system is satisfiable.
pub fn fairness_floor(
    m: &Marginals,
    sys: &FairnessSystem,
    cfg: &SolverConfig,
) -> Result<(f64, Vec8)> {
    let red = Reduction::new(m);
    let sol = fairness_floor_reduced(&red, sys, &None, cfg)?;
    let z = red.lift(&sol.x);
    Ok((sys.aggregate_gap(&z), z))
}

/// Smallest aggregate fairness gap reachable from `base` by randomized
/// post-processing, with the achieving tensor.
pub fn ms_fairness_floor(
    base: &FairnessConfusionTensor,
    sys: &FairnessSystem,
    cfg: &SolverConfig,
) -> Result<(f64, Vec8)> {
    let m = base.marginals();
    let red = Reduction::new(m);
    let ineq = hull_ineq(&hull_constraints(base)?, m);
    let sol = fairness_floor_reduced(&red, sys, &ineq, cfg)?;
    let z = red.lift(&sol.x);
    Ok((sys.aggregate_gap(&z), z))
}

/// Exact-fairness solve: minimize error on the fairness-optimal face.
/// Errors with `Infeasible` when the system's floor is above tolerance.
fn solve_infinite(
    red: &Reduction,
    sys: &FairnessSystem,
    ineq: &Ineq,
    cfg: &SolverConfig,
) -> Result<EpsDeltaSolution> {
    if sys.has_quadratic() {
        // nonconvex at exact enforcement: approximate with a huge weight
        let sol = solve_finite(red, &[(sys, 1e12)], ineq, cfg)?;
        let mut out = finish(red, sys, sol, Lambda::Infinite);
        out.converged = false;
        if out.epsilon > cfg.feasibility_tol.sqrt() {
            return Err(FactError::Infeasible(format!(
                "exact fairness unreachable; best aggregate gap {:.3e}",
                out.epsilon
            )));
        }
        return Ok(out);
    }
    let phase1 = fairness_floor_reduced(red, sys, ineq, cfg)?;
    let floor = sys.aggregate_gap(&red.lift(&phase1.x));
    if floor > cfg.feasibility_tol {
        return Err(FactError::Infeasible(format!(
            "exact fairness unreachable; smallest aggregate gap is {floor:.6e}"
        )));
    }
    // the minimizer set of ||G x + o||^2 over a convex set is the slice
    // where G x equals its phase-1 value; pin it and minimize error there
    let k = sys.rows.len();
    let mut g_mat = DMatrix::zeros(k, 4);
    let mut d = DVector::zeros(k);
    for (i, row) in sys.rows.iter().enumerate() {
        let (g, _) = red.reduce_row(row);
        g_mat.row_mut(i).copy_from(&g.transpose());
        d[i] = g.dot(&phase1.x);
    }
    let mut qp = base_qp(red, ineq);
    let (gc, oc) = red.error_row();
    add_squared_row(&mut qp, &gc, oc, 1.0);
    if k > 0 {
        qp.eq = Some((g_mat, d));
    }
    let phase2 = solver::solve(&qp, cfg)?;
    Ok(finish(red, sys, phase2, Lambda::Infinite))
}

fn solve_with_ineq(
    m: &Marginals,
    sys: &FairnessSystem,
    lambda: Lambda,
    ineq: &Ineq,
    cfg: &SolverConfig,
) -> Result<EpsDeltaSolution> {
    let red = Reduction::new(m);
    match lambda {
        Lambda::Finite(l) => {
            if l < 0.0 || !l.is_finite() {
                return Err(FactError::InvalidParameter(format!(
                    "fairness weight must be finite and nonnegative, got {l}"
                )));
            }
            let sol = solve_finite(&red, &[(sys, l)], ineq, cfg)?;
            Ok(finish(&red, sys, sol, lambda))
        }
        Lambda::Infinite => solve_infinite(&red, sys, ineq, cfg),
    }
}

/// Minimize squared error plus `lambda` times the aggregate fairness gap.
pub fn solve_lafop(
    m: &Marginals,
    sys: &FairnessSystem,
    lambda: Lambda,
    cfg: &SolverConfig,
) -> Result<EpsDeltaSolution> {
    solve_with_ineq(m, sys, lambda, &None, cfg)
}

fn hard_with_ineq(
    m: &Marginals,
    sys: &FairnessSystem,
    eps: f64,
    ineq: &Ineq,
    cfg: &SolverConfig,
) -> Result<EpsDeltaSolution> {
    if eps < 0.0 {
        return Err(FactError::InvalidParameter(format!(
            "fairness budget must be nonnegative, got {eps}"
        )));
    }
    const LOG_LO: f64 = -6.0;
    const LOG_HI: f64 = 9.0;
    let at = |log_l: f64| solve_with_ineq(m, sys, Lambda::Finite(10f64.powf(log_l)), ineq, cfg);

    let lo = at(LOG_LO)?;
    if lo.epsilon <= eps {
        return Ok(lo);
    }
    let hi = at(LOG_HI)?;
    if hi.epsilon > eps {
        // even a huge weight is not enough; fall back to exact enforcement
        return match solve_infinite(&Reduction::new(m), sys, ineq, cfg) {
            Ok(sol) if sol.epsilon <= eps.max(cfg.feasibility_tol) => Ok(sol),
            Ok(sol) => Err(FactError::Infeasible(format!(
                "fairness budget {eps:.3e} below the reachable floor {:.3e}",
                sol.epsilon
            ))),
            Err(e) => Err(e),
        };
    }
    // bisect on log lambda: epsilon is nonincreasing in lambda
    let (mut log_lo, mut log_hi) = (LOG_LO, LOG_HI);
    let mut best = hi;
    for _ in 0..60 {
        let mid = 0.5 * (log_lo + log_hi);
        let sol = at(mid)?;
        if sol.epsilon <= eps {
            best = sol;
            log_hi = mid;
        } else {
            log_lo = mid;
        }
    }
    Ok(best)
}

/// Minimize error subject to an explicit fairness budget:
/// aggregate gap at the solution is at most `eps`.
pub fn solve_hard(
    m: &Marginals,
    sys: &FairnessSystem,
    eps: f64,
    cfg: &SolverConfig,
) -> Result<EpsDeltaSolution> {
    hard_with_ineq(m, sys, eps, &None, cfg)
}

/// Per-system fairness weights: minimize squared error plus
/// `sum_i lambda_i * gap_i`. Residuals are reported per system.
pub fn solve_mlafop(
    m: &Marginals,
    systems: &[&FairnessSystem],
    lambdas: &[f64],
    cfg: &SolverConfig,
) -> Result<EpsDeltaSolution> {
    if systems.len() != lambdas.len() {
        return Err(FactError::InvalidParameter(format!(
            "{} systems but {} weights",
            systems.len(),
            lambdas.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| **l < 0.0 || !l.is_finite()) {
        return Err(FactError::InvalidParameter(format!(
            "fairness weights must be finite and nonnegative, got {l}"
        )));
    }
    let red = Reduction::new(m);
    let weighted: Vec<(&FairnessSystem, f64)> = systems
        .iter()
        .copied()
        .zip(lambdas.iter().copied())
        .collect();
    let sol = solve_finite(&red, &weighted, &None, cfg)?;
    let z = red.lift(&sol.x);
    let err = error_rate(&z);
    let system_residuals: Vec<f64> = systems.iter().map(|s| s.aggregate_gap(&z)).collect();
    Ok(EpsDeltaSolution {
        z_star: z,
        epsilon: system_residuals.iter().sum(),
        delta: err * err,
        error_rate: err,
        lambda_used: Lambda::Finite(lambdas.iter().copied().fold(0.0, f64::max)),
        converged: sol.converged,
        system_residuals,
    })
}

/// Control mode for the model-specific solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MsMode {
    Lambda(Lambda),
    Epsilon(f64),
}

fn hull_ineq(hulls: &HullConstraints, m: &Marginals) -> Ineq {
    // per-group ROC coordinates are linear in the reduced variables:
    // tpr_a = x_tp * N / M_a, fpr_a = x_fp * N / (N_a - M_a)
    let mut rows: Vec<[f64; 4]> = Vec::new();
    let mut bounds: Vec<f64> = Vec::new();
    for (a, tp_col, fp_col) in [(1u8, 0usize, 1usize), (0, 2, 3)] {
        let pos = m.m_group(a);
        let neg = m.n_group(a) - pos;
        for hp in &hulls.group(a).planes {
            let mut row = [0.0; 4];
            row[tp_col] = hp.b * m.n / pos;
            row[fp_col] = hp.a * m.n / neg;
            rows.push(row);
            bounds.push(hp.c);
        }
    }
    if rows.is_empty() {
        return None;
    }
    let a = DMatrix::from_fn(rows.len(), 4, |r, c| rows[r][c]);
    Some((a, DVector::from_vec(bounds)))
}

/// Model-specific solve: the solution's per-group ROC points are
/// constrained to the region realizable from `base` by randomized
/// post-processing.
pub fn solve_ms_lafop(
    base: &FairnessConfusionTensor,
    sys: &FairnessSystem,
    mode: MsMode,
    cfg: &SolverConfig,
) -> Result<EpsDeltaSolution> {
    let m = base.marginals();
    let hulls = hull_constraints(base)?;
    let ineq = hull_ineq(&hulls, m);
    match mode {
        MsMode::Lambda(l) => solve_with_ineq(m, sys, l, &ineq, cfg),
        MsMode::Epsilon(e) => hard_with_ineq(m, sys, e, &ineq, cfg),
    }
}
