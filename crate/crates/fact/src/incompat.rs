//! Compatibility analysis for sets of fairness definitions: when does a
//! tensor exist that satisfies all of them at once, and under which data
//! conditions.
//!
//! Linear sets are decided by feasibility of the stacked linear system
//! over the polytope. Sets containing two-bin calibration have closed
//! forms: calibration alone pins a unique candidate tensor, so every other
//! definition's residual at that point decides the verdict.

use crate::defs::{self, FairnessDef};
use crate::error::{FactError, Result};
use crate::lafop::Reduction;
use crate::solver::{self, QuadraticProgram, SolverConfig};
use crate::tensor::{error_rate, Marginals, Vec8};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionCountClass {
    Zero,
    Unique,
    Infinite,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub solution_count_class: SolutionCountClass,
    pub witness: Option<Vec8>,
    pub violated_condition: Option<String>,
}

/// Decide compatibility of a set of linear fairness definitions on the
/// given marginals. Quadratic definitions are rejected; their analysis
/// goes through the closed-form routines below.
pub fn check_compat(
    set: &[FairnessDef],
    m: &Marginals,
    cfg: &SolverConfig,
) -> Result<CompatReport> {
    if set.iter().any(|d| d.is_quadratic()) {
        return Err(FactError::InvalidParameter(
            "compatibility of quadratic definitions is decided by their \
             dedicated closed-form checks"
                .into(),
        ));
    }
    let sys = defs::stack(set, m)?;
    let (floor, witness) = crate::lafop::fairness_floor(m, &sys, cfg)?;
    if floor > cfg.feasibility_tol {
        return Ok(CompatReport {
            compatible: false,
            solution_count_class: SolutionCountClass::Zero,
            witness: None,
            violated_condition: violated_condition(set, m),
        });
    }
    let class = classify_face(&sys.rows, m, &witness, cfg)?;
    Ok(CompatReport {
        compatible: true,
        solution_count_class: class,
        witness: Some(witness),
        violated_condition: None,
    })
}

/// Dimension class of the solution face: does any direction stay feasible?
fn classify_face(
    rows: &[Vec8],
    m: &Marginals,
    witness: &Vec8,
    cfg: &SolverConfig,
) -> Result<SolutionCountClass> {
    let red = Reduction::new(m);
    let k = rows.len();
    let x_star =
        DVector::from_column_slice(&[witness[0], witness[2], witness[4], witness[6]]);
    // reduced fairness rows
    let mut g = DMatrix::zeros(k, 4);
    for (i, row) in rows.iter().enumerate() {
        let (gr, _) = red.reduce_row(row);
        g.row_mut(i).copy_from(&gr.transpose());
    }
    // nullspace of the reduced system
    let gram = g.transpose() * &g;
    let eig = gram.symmetric_eigen();
    let cutoff = eig.eigenvalues.max().max(1.0) * 1e-18;
    let null_dirs: Vec<DVector<f64>> = (0..4)
        .filter(|&i| eig.eigenvalues[i] <= cutoff)
        .map(|i| DVector::from_column_slice(eig.eigenvectors.column(i).as_slice()))
        .collect();
    if null_dirs.is_empty() {
        return Ok(SolutionCountClass::Unique);
    }
    // extent of the face along each flat direction
    let d = &g * &x_star;
    for v in null_dirs {
        let mut extent = 0.0;
        for sign in [1.0, -1.0] {
            let mut qp = QuadraticProgram::box_only(4, red.lower.clone(), red.upper.clone());
            qp.lin = &v * sign;
            if k > 0 {
                qp.eq = Some((g.clone(), d.clone()));
            }
            let sol = solver::solve(&qp, cfg)?;
            extent += (sol.x.dot(&v) - x_star.dot(&v)) * sign;
        }
        if extent.abs() > 1e-9 {
            return Ok(SolutionCountClass::Infinite);
        }
    }
    Ok(SolutionCountClass::Unique)
}

/// Closed-form candidate tensor pinned by two-bin calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CgClosedForm {
    pub z0: Vec8,
    pub admissible: bool,
}

/// The unique tensor satisfying two-bin calibration with scores
/// `v0 < v1`, and whether it lies on the polytope (all cells nonnegative).
pub fn cg_closed_form(m: &Marginals, v0: f64, v1: f64) -> Result<CgClosedForm> {
    defs::validate_scores(v0, v1)?;
    let (n, n1, m1, n0, m0) = (m.n, m.n1, m.m1, m.n0, m.m0);
    let s = 1.0 / (n * (v1 - v0));
    let z0 = Vec8::from_column_slice(&[
        s * v1 * (m1 - n1 * v0),
        s * v0 * (n1 * v1 - m1),
        s * (1.0 - v1) * (m1 - n1 * v0),
        s * (1.0 - v0) * (n1 * v1 - m1),
        s * v1 * (m0 - n0 * v0),
        s * v0 * (n0 * v1 - m0),
        s * (1.0 - v1) * (m0 - n0 * v0),
        s * (1.0 - v0) * (n0 * v1 - m0),
    ]);
    let br1 = m1 / n1;
    let br0 = m0 / n0;
    let admissible = v0 >= 0.0 && v0 <= br1.min(br0) && v1 >= br1.max(br0) && v1 <= 1.0;
    Ok(CgClosedForm { z0, admissible })
}

/// The two-parameter solution family at a common score `v0 = v1 = v`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegenerateFamily {
    pub v: f64,
    pub alpha_max: f64,
    pub beta_max: f64,
    /// The family only touches the polytope when `v` equals the base rate
    /// of both groups.
    pub consistent: bool,
    marginals: Marginals,
}

impl DegenerateFamily {
    pub fn z(&self, alpha: f64, beta: f64) -> Vec8 {
        let m = &self.marginals;
        let v = self.v;
        let s = 1.0 / (m.n * (1.0 - v));
        Vec8::from_column_slice(&[
            s * v * (m.n1 * (1.0 - v) - alpha),
            s * v * alpha,
            s * (1.0 - v) * (m.n1 * (1.0 - v) - alpha),
            s * (1.0 - v) * alpha,
            s * v * (m.n0 * (1.0 - v) - beta),
            s * v * beta,
            s * (1.0 - v) * (m.n0 * (1.0 - v) - beta),
            s * (1.0 - v) * beta,
        ])
    }
}

pub fn cg_degenerate_family(m: &Marginals, v: f64) -> Result<DegenerateFamily> {
    if !(0.0..1.0).contains(&v) {
        return Err(FactError::InvalidParameter(format!(
            "common calibration score must lie in [0, 1), got {v}"
        )));
    }
    let tol = 1e-12;
    let consistent = (v - m.m1 / m.n1).abs() <= tol && (v - m.m0 / m.n0).abs() <= tol;
    Ok(DegenerateFamily {
        v,
        alpha_max: (1.0 - v) * m.n1,
        beta_max: (1.0 - v) * m.n0,
        consistent,
        marginals: *m,
    })
}

/// A named data-side condition under which a calibration-containing set
/// becomes compatible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    EqualBaseRates,
    V0Zero,
    V1One,
    V0ZeroAndV1One,
}

impl Condition {
    pub fn describe(self) -> &'static str {
        match self {
            Condition::EqualBaseRates => "equal base rates",
            Condition::V0Zero => "v0 = 0",
            Condition::V1One => "v1 = 1",
            Condition::V0ZeroAndV1One => "v0 = 0 and v1 = 1",
        }
    }

    pub fn holds(self, m: &Marginals, v0: f64, v1: f64, tol: f64) -> bool {
        match self {
            Condition::EqualBaseRates => m.equal_base_rates(tol),
            Condition::V0Zero => v0.abs() <= tol,
            Condition::V1One => (v1 - 1.0).abs() <= tol,
            Condition::V0ZeroAndV1One => v0.abs() <= tol && (v1 - 1.0).abs() <= tol,
        }
    }
}

/// One row of the curated incompatibility table: sets of definition tags
/// sharing the same compatibility conditions (any one suffices).
#[derive(Debug, Clone)]
pub struct TableRow {
    pub sets: &'static [&'static [&'static str]],
    pub conditions: &'static [Condition],
}

/// The curated calibration-incompatibility table, with two corrections
/// derived from the residuals at the closed-form tensor:
///
/// * two-bin calibration forces both groups' positive predictive value to
///   the upper score, so adding predictive parity to a calibrated set
///   never tightens it; the sets pairing it with demographic parity need
///   only equal base rates, not equal group counts;
/// * in the "v1 = 1" family, the balance-of-positives entries belong with
///   the "v0 = 0 and v1 = 1" family instead.
pub fn table_rows() -> Vec<TableRow> {
    vec![
        TableRow {
            sets: &[
                &["CG", "DP"],
                &["CG", "DP", "EOp"],
                &["CG", "DP", "PE"],
                &["CG", "DP", "PCB"],
                &["CG", "DP", "NCB"],
                &["CG", "DP", "EFOR"],
                &["CG", "PP", "DP", "EOp"],
                &["CG", "PP", "DP", "PE"],
                &["CG", "PP", "DP", "PCB"],
                &["CG", "PP", "DP", "NCB"],
                &["CG", "PP", "DP", "EFOR"],
            ],
            conditions: &[Condition::EqualBaseRates],
        },
        TableRow {
            sets: &[
                &["CG", "EOp"],
                &["CG", "PCB"],
                &["CG", "EOp", "PCB"],
                &["CG", "EFOR", "EOp"],
                &["CG", "EFOR", "PCB"],
                &["CG", "EFOR", "EOp", "PCB"],
            ],
            conditions: &[Condition::V0Zero, Condition::EqualBaseRates],
        },
        TableRow {
            sets: &[
                &["CG", "PE"],
                &["CG", "NCB"],
                &["CG", "PE", "NCB"],
                &["CG", "EFOR", "PE"],
                &["CG", "EFOR", "NCB"],
                &["CG", "EFOR", "PE", "NCB"],
            ],
            conditions: &[Condition::V1One, Condition::EqualBaseRates],
        },
        TableRow {
            sets: &[
                &["CG", "EOd"],
                &["CG", "PCB", "NCB"],
                &["CG", "EOd", "PCB", "NCB"],
                &["CG", "EFOR", "EOd"],
                &["CG", "EFOR", "PCB", "NCB"],
                &["CG", "EFOR", "EOd", "PCB", "NCB"],
                &["CG", "EOp", "NCB"],
                &["CG", "EFOR", "EOp", "NCB"],
            ],
            conditions: &[Condition::V0ZeroAndV1One, Condition::EqualBaseRates],
        },
    ]
}

fn sorted_tags(set: &[FairnessDef]) -> Vec<&'static str> {
    let mut tags: Vec<&'static str> = set.iter().map(|d| d.tag()).collect();
    tags.sort_unstable();
    tags.dedup();
    tags
}

fn find_row(tags: &[&str]) -> Option<&'static [Condition]> {
    for row in table_rows() {
        for s in row.sets {
            let mut sorted: Vec<&str> = s.to_vec();
            sorted.sort_unstable();
            if sorted == tags {
                return Some(row.conditions);
            }
        }
    }
    None
}

fn scores_of(set: &[FairnessDef]) -> Option<(f64, f64)> {
    set.iter().find_map(|d| match *d {
        FairnessDef::Cg { v0, v1 }
        | FairnessDef::Pcb { v0, v1 }
        | FairnessDef::Ncb { v0, v1 } => Some((v0, v1)),
        _ => None,
    })
}

fn violated_condition(set: &[FairnessDef], m: &Marginals) -> Option<String> {
    let tags = sorted_tags(set);
    let conditions = find_row(&tags)?;
    let (v0, v1) = scores_of(set)?;
    let failing: Vec<&str> = conditions
        .iter()
        .filter(|c| !c.holds(m, v0, v1, 1e-9))
        .map(|c| c.describe())
        .collect();
    if failing.is_empty() {
        None
    } else {
        Some(failing.join(" / "))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub set_label: String,
    /// Each named condition with its truth value on this instance.
    pub conditions: Vec<(String, bool)>,
    /// Compatible iff some named condition holds (plus score admissibility).
    pub predicted_compatible: bool,
    /// Ground truth from residuals at the calibration closed form.
    pub residual_compatible: bool,
}

const RESIDUAL_TOL: f64 = 1e-9;

/// Evaluate every non-calibration member's residual at the closed-form
/// tensor. The set is satisfiable iff the scores are admissible and all
/// residuals vanish.
pub fn verdict_at_closed_form(set: &[FairnessDef], m: &Marginals) -> Result<bool> {
    let (v0, v1) = scores_of(set).ok_or_else(|| {
        FactError::InvalidParameter("set carries no scored definition".into())
    })?;
    let cf = cg_closed_form(m, v0, v1)?;
    if !cf.admissible {
        return Ok(false);
    }
    let mut ok = true;
    for def in set {
        if matches!(def, FairnessDef::Cg { .. }) {
            continue;
        }
        let built = defs::build(def, m)?;
        for (row, _) in &built.linear {
            ok &= row.dot(&cf.z0).abs() <= RESIDUAL_TOL;
        }
        for q in &built.quadratic {
            ok &= q.residual(&cf.z0).abs() <= RESIDUAL_TOL;
        }
    }
    Ok(ok)
}

/// Evaluate a curated table row's named conditions on an instance and
/// cross-check them against the closed-form ground truth.
pub fn calibration_set_conditions(set: &[FairnessDef], m: &Marginals) -> Result<ConditionReport> {
    let tags = sorted_tags(set);
    let (v0, v1) = scores_of(set).ok_or_else(|| {
        FactError::InvalidParameter("set carries no scored definition".into())
    })?;
    let mut conditions: Vec<(String, bool)> = Vec::new();
    let named: Vec<Condition> = match find_row(&tags) {
        Some(c) => c.to_vec(),
        // calibration pins the positive predictive value to v1 and the
        // false omission rate to v0 in both groups, so these residuals
        // vanish identically whenever the closed form is admissible
        None if tags == ["CG", "EFOR"]
            || tags == ["CG", "PP"]
            || tags == ["CG", "EFOR", "PP"]
            || tags == ["CA", "CG"] =>
        {
            conditions.push(("implied by two-bin calibration".into(), true));
            Vec::new()
        }
        None => {
            return Err(FactError::UnknownDefinition(format!(
                "no curated conditions for the set {{{}}}",
                tags.join(", ")
            )))
        }
    };
    for c in &named {
        conditions.push((c.describe().to_string(), c.holds(m, v0, v1, 1e-9)));
    }
    let cf = cg_closed_form(m, v0, v1)?;
    let predicted = cf.admissible
        && (conditions.is_empty() || conditions.iter().any(|(_, holds)| *holds));
    let residual = verdict_at_closed_form(set, m)?;
    Ok(ConditionReport {
        set_label: format!("{{{}}}", tags.join(", ")),
        conditions,
        predicted_compatible: predicted,
        residual_compatible: residual,
    })
}

/// Which escape hatches a tensor satisfying
/// {parity of FPR, parity of FNR, predictive parity} must use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffWitness {
    pub satisfies_set: bool,
    pub no_true_positives: bool,
    pub no_false_positives: bool,
    pub equal_base_rates: bool,
}

pub fn tradeoff_check(z: &Vec8, m: &Marginals, tol: f64) -> Result<TradeoffWitness> {
    let sys = defs::stack(
        &[FairnessDef::Pe, FairnessDef::Efnr, FairnessDef::Pp],
        m,
    )?;
    let mut worst: f64 = 0.0;
    for row in &sys.rows {
        worst = worst.max(row.dot(z).abs());
    }
    for q in &sys.forms {
        worst = worst.max(q.residual(z).abs());
    }
    let satisfies_set = worst <= tol;
    Ok(TradeoffWitness {
        satisfies_set,
        no_true_positives: z[0] + z[4] <= tol,
        no_false_positives: z[2] + z[6] <= tol,
        equal_base_rates: m.equal_base_rates(tol),
    })
}

/// Accuracy at the calibration closed form: scores admit a zero-error
/// calibrated tensor iff `v0 (1 - 2 v1) = alpha (1 - v0 - v1)` with
/// `alpha` the overall base rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub alpha: f64,
    pub error_at_closed_form: f64,
    pub equality_residual: f64,
    pub admissible: bool,
    pub perfect_accuracy: bool,
}

pub fn cg_accuracy_condition(m: &Marginals, v0: f64, v1: f64) -> Result<AccuracyReport> {
    let cf = cg_closed_form(m, v0, v1)?;
    let alpha = m.overall_base_rate();
    let err = error_rate(&cf.z0);
    let equality_residual = v0 * (1.0 - 2.0 * v1) - alpha * (1.0 - v0 - v1);
    Ok(AccuracyReport {
        alpha,
        error_at_closed_form: err,
        equality_residual,
        admissible: cf.admissible,
        perfect_accuracy: err.abs() <= 1e-9,
    })
}

/// Exact-arithmetic consistency checks for the stacked linear systems,
/// used to cross-validate floating-point feasibility verdicts on
/// integer-marginal instances.
pub mod exact {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::Zero;

    pub type Q = BigRational;

    fn q(f: f64) -> Q {
        BigRational::from_float(f).expect("finite value")
    }

    fn qi(i: i64) -> Q {
        BigRational::from(BigInt::from(i))
    }

    /// Rank by fraction-free Gaussian elimination.
    pub fn rank(mat: &[Vec<Q>]) -> usize {
        let mut m: Vec<Vec<Q>> = mat.to_vec();
        let rows = m.len();
        if rows == 0 {
            return 0;
        }
        let cols = m[0].len();
        let mut r = 0;
        for c in 0..cols {
            let Some(pivot) = (r..rows).find(|&i| !m[i][c].is_zero()) else {
                continue;
            };
            m.swap(r, pivot);
            let p = m[r][c].clone();
            for i in r + 1..rows {
                let f = &m[i][c] / &p;
                for j in c..cols {
                    let sub = &f * &m[r][j];
                    m[i][j] -= sub;
                }
            }
            r += 1;
            if r == rows {
                break;
            }
        }
        r
    }

    /// Does `A x = b` admit any (sign-unconstrained) solution?
    pub fn consistent(a: &[Vec<Q>], b: &[Q]) -> bool {
        let aug: Vec<Vec<Q>> = a
            .iter()
            .zip(b)
            .map(|(row, rhs)| {
                let mut r = row.clone();
                r.push(rhs.clone());
                r
            })
            .collect();
        rank(a) == rank(&aug)
    }

    /// The stacked system of a linear definition set over integer
    /// marginals, in exact arithmetic: fairness rows with zero right-hand
    /// sides plus the marginal rows. Scores must be exactly representable
    /// (dyadic), which every `f64` is.
    pub fn exact_system(
        set: &[FairnessDef],
        m: &Marginals,
    ) -> Result<(Vec<Vec<Q>>, Vec<Q>)> {
        let (n1, m1, n0, m0) = (
            qi(m.n1 as i64),
            qi(m.m1 as i64),
            qi(m.n0 as i64),
            qi(m.m0 as i64),
        );
        let n = &n1 + &n0;
        let zero = Q::zero();
        let mut rows: Vec<Vec<Q>> = Vec::new();
        let mut rhs: Vec<Q> = Vec::new();
        let mut push = |row: Vec<Q>| {
            rows.push(row);
            rhs.push(Q::zero());
        };
        for def in set {
            match *def {
                FairnessDef::Dp => push(vec![
                    n0.clone(), zero.clone(), n0.clone(), zero.clone(),
                    -n1.clone(), zero.clone(), -n1.clone(), zero.clone(),
                ]),
                FairnessDef::EOp => push(vec![
                    m0.clone(), zero.clone(), zero.clone(), zero.clone(),
                    -m1.clone(), zero.clone(), zero.clone(), zero.clone(),
                ]),
                FairnessDef::Pe => push(vec![
                    zero.clone(), zero.clone(), &n0 - &m0, zero.clone(),
                    zero.clone(), zero.clone(), -(&n1 - &m1), zero.clone(),
                ]),
                FairnessDef::Efnr => push(vec![
                    zero.clone(), m0.clone(), zero.clone(), zero.clone(),
                    zero.clone(), -m1.clone(), zero.clone(), zero.clone(),
                ]),
                FairnessDef::EOd => {
                    push(vec![
                        m0.clone(), zero.clone(), zero.clone(), zero.clone(),
                        -m1.clone(), zero.clone(), zero.clone(), zero.clone(),
                    ]);
                    push(vec![
                        zero.clone(), zero.clone(), &n0 - &m0, zero.clone(),
                        zero.clone(), zero.clone(), -(&n1 - &m1), zero.clone(),
                    ]);
                }
                FairnessDef::Cg { v0, v1 } => {
                    let (v0, v1) = (q(v0), q(v1));
                    let one = qi(1);
                    push(vec![
                        &one - &v1, zero.clone(), -v1.clone(), zero.clone(),
                        zero.clone(), zero.clone(), zero.clone(), zero.clone(),
                    ]);
                    push(vec![
                        zero.clone(), &one - &v0, zero.clone(), -v0.clone(),
                        zero.clone(), zero.clone(), zero.clone(), zero.clone(),
                    ]);
                    push(vec![
                        zero.clone(), zero.clone(), zero.clone(), zero.clone(),
                        &one - &v1, zero.clone(), -v1.clone(), zero.clone(),
                    ]);
                    push(vec![
                        zero.clone(), zero.clone(), zero.clone(), zero.clone(),
                        zero.clone(), &one - &v0, zero.clone(), -v0.clone(),
                    ]);
                }
                FairnessDef::Pcb { v0, v1 } => {
                    let (v0, v1) = (q(v0), q(v1));
                    push(vec![
                        &v1 / &m1, &v0 / &m1, zero.clone(), zero.clone(),
                        -(&v1 / &m0), -(&v0 / &m0), zero.clone(), zero.clone(),
                    ]);
                }
                FairnessDef::Ncb { v0, v1 } => {
                    let (v0, v1) = (q(v0), q(v1));
                    let (neg1, neg0) = (&n1 - &m1, &n0 - &m0);
                    push(vec![
                        zero.clone(), zero.clone(), &v1 / &neg1, &v0 / &neg1,
                        zero.clone(), zero.clone(), -(&v1 / &neg0), -(&v0 / &neg0),
                    ]);
                }
                FairnessDef::REOd { alpha0, beta0, alpha1, beta1 } => {
                    let (a0, b0, a1, b1) = (q(alpha0), q(beta0), q(alpha1), q(beta1));
                    let (neg1, neg0) = (&n1 - &m1, &n0 - &m0);
                    push(vec![
                        zero.clone(), &b1 / &m1, &a1 / &neg1, zero.clone(),
                        zero.clone(), -(&b0 / &m0), -(&a0 / &neg0), zero.clone(),
                    ]);
                }
                FairnessDef::Pp | FairnessDef::Efor | FairnessDef::Ca => {
                    return Err(FactError::InvalidParameter(
                        "quadratic definitions have no exact linear rows".into(),
                    ))
                }
            }
        }
        // marginal rows: group size and group positives, both groups
        let patterns: [( [i64; 8], &Q ); 4] = [
            ([1, 1, 1, 1, 0, 0, 0, 0], &n1),
            ([1, 1, 0, 0, 0, 0, 0, 0], &m1),
            ([0, 0, 0, 0, 1, 1, 1, 1], &n0),
            ([0, 0, 0, 0, 1, 1, 0, 0], &m0),
        ];
        for (pat, total) in patterns {
            rows.push(pat.iter().map(|&v| qi(v)).collect());
            rhs.push(total / &n);
        }
        Ok((rows, rhs))
    }
}
