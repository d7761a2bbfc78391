//! (epsilon, delta) frontier sweeps: how much accuracy a fairness budget
//! costs, traced either by varying the fairness weight or by varying the
//! budget directly, in model-agnostic or model-specific form.

use crate::defs::FairnessSystem;
use crate::error::{FactError, Result};
use crate::lafop::{self, Lambda, MsMode};
use crate::solver::SolverConfig;
use crate::tensor::{FairnessConfusionTensor, Marginals, Vec8};
use serde::{Deserialize, Serialize};

/// Which control variable the grid ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    /// Fairness weight in the regularized objective.
    LambdaLog,
    /// Explicit fairness budget in the hard-constrained problem.
    EpsilonLog,
}

/// Model-agnostic sweeps range over the whole polytope; model-specific
/// sweeps restrict to tensors realizable from a base classifier by
/// randomized post-processing.
#[derive(Debug, Clone)]
pub enum SweepMode {
    ModelAgnostic,
    ModelSpecific(FairnessConfusionTensor),
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub grid_kind: GridKind,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mode: SweepMode,
}

impl SweepSpec {
    fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(FactError::InvalidParameter(format!(
                "sweep needs at least 2 grid points, got {}",
                self.count
            )));
        }
        if !(self.lo > 0.0 && self.hi > self.lo && self.hi.is_finite()) {
            return Err(FactError::InvalidParameter(format!(
                "log grid bounds must satisfy 0 < lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn grid(&self) -> Vec<f64> {
        let ratio = self.hi / self.lo;
        (0..self.count)
            .map(|i| self.lo * ratio.powf(i as f64 / (self.count - 1) as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierPoint {
    /// Aggregate fairness deviation at the solution (sum of squared
    /// constraint residuals).
    pub epsilon: f64,
    /// Square root of `epsilon`: the residual vector's Euclidean norm.
    pub gap_norm: f64,
    /// Performance deviation (squared error rate).
    pub delta: f64,
    pub error_rate: f64,
    /// The grid value that produced this point (a weight or a budget).
    pub control_value: f64,
    /// "ok", or the per-point failure recorded instead of aborting.
    pub status: String,
}

impl FrontierPoint {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierCurve {
    pub points: Vec<FrontierPoint>,
    /// Smallest reachable aggregate deviation: positive when the
    /// definitions are jointly unsatisfiable on these marginals, in which
    /// case the curve halts before reaching small budgets.
    pub truncated_at: f64,
}

fn thread_count(points: usize) -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("FACT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(hw);
    cap.min(points).max(1)
}

fn solve_point(
    m: &Marginals,
    sys: &FairnessSystem,
    spec: &SweepSpec,
    control: f64,
    cfg: &SolverConfig,
) -> FrontierPoint {
    let sol = match (&spec.mode, spec.grid_kind) {
        (SweepMode::ModelAgnostic, GridKind::LambdaLog) => {
            lafop::solve_lafop(m, sys, Lambda::Finite(control), cfg)
        }
        (SweepMode::ModelAgnostic, GridKind::EpsilonLog) => {
            lafop::solve_hard(m, sys, control, cfg)
        }
        (SweepMode::ModelSpecific(base), GridKind::LambdaLog) => {
            lafop::solve_ms_lafop(base, sys, MsMode::Lambda(Lambda::Finite(control)), cfg)
        }
        (SweepMode::ModelSpecific(base), GridKind::EpsilonLog) => {
            lafop::solve_ms_lafop(base, sys, MsMode::Epsilon(control), cfg)
        }
    };
    match sol {
        Ok(s) => FrontierPoint {
            epsilon: s.epsilon,
            gap_norm: s.epsilon.max(0.0).sqrt(),
            delta: s.delta,
            error_rate: s.error_rate,
            control_value: control,
            status: "ok".into(),
        },
        Err(e) => FrontierPoint {
            epsilon: f64::NAN,
            gap_norm: f64::NAN,
            delta: f64::NAN,
            error_rate: f64::NAN,
            control_value: control,
            status: e.to_string(),
        },
    }
}

/// One solve per grid point. Failed points are recorded with their error
/// in `status` rather than aborting the sweep. `FACT_THREADS` caps the
/// number of worker threads; output order is by grid index regardless.
pub fn sweep(
    m: &Marginals,
    sys: &FairnessSystem,
    spec: &SweepSpec,
    cfg: &SolverConfig,
) -> Result<FrontierCurve> {
    sweep_with_threads(m, sys, spec, cfg, thread_count(spec.count))
}

pub fn sweep_with_threads(
    m: &Marginals,
    sys: &FairnessSystem,
    spec: &SweepSpec,
    cfg: &SolverConfig,
    threads: usize,
) -> Result<FrontierCurve> {
    spec.validate()?;
    let grid = spec.grid();
    let threads = threads.clamp(1, grid.len());
    let mut points: Vec<Option<FrontierPoint>> = vec![None; grid.len()];
    if threads == 1 {
        for (i, &control) in grid.iter().enumerate() {
            points[i] = Some(solve_point(m, sys, spec, control, cfg));
        }
    } else {
        let slots = std::sync::Mutex::new(&mut points);
        std::thread::scope(|scope| {
            for t in 0..threads {
                let grid = &grid;
                let slots = &slots;
                scope.spawn(move || {
                    for i in (t..grid.len()).step_by(threads) {
                        let p = solve_point(m, sys, spec, grid[i], cfg);
                        slots.lock().unwrap()[i] = Some(p);
                    }
                });
            }
        });
    }
    let (floor, _) = match &spec.mode {
        SweepMode::ModelAgnostic => lafop::fairness_floor(m, sys, cfg)?,
        SweepMode::ModelSpecific(base) => lafop::ms_fairness_floor(base, sys, cfg)?,
    };
    Ok(FrontierCurve {
        points: points.into_iter().map(|p| p.expect("every slot filled")).collect(),
        truncated_at: floor.max(0.0),
    })
}

/// A standalone (epsilon, delta) marker for an externally trained model's
/// predictions, for overlay on a sweep's curve.
pub fn marker_point(sys: &FairnessSystem, z: &Vec8) -> FrontierPoint {
    let eps = sys.aggregate_gap(z);
    let err = crate::tensor::error_rate(z);
    FrontierPoint {
        epsilon: eps,
        gap_norm: eps.max(0.0).sqrt(),
        delta: err * err,
        error_rate: err,
        control_value: f64::NAN,
        status: "ok".into(),
    }
}

/// Keep only points not dominated in (epsilon, delta), sorted by epsilon
/// descending; delta is then nondecreasing as epsilon shrinks.
pub fn pareto_cleanup(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let ok: Vec<&FrontierPoint> = points.iter().filter(|p| p.is_ok()).collect();
    let mut kept: Vec<FrontierPoint> = ok
        .iter()
        .filter(|p| {
            !ok.iter().any(|q| {
                q.epsilon <= p.epsilon
                    && q.delta <= p.delta
                    && (q.epsilon < p.epsilon || q.delta < p.delta)
            })
        })
        .map(|p| (*p).clone())
        .collect();
    kept.sort_by(|a, b| b.epsilon.partial_cmp(&a.epsilon).unwrap());
    kept.dedup_by(|a, b| a.epsilon == b.epsilon && a.delta == b.delta);
    kept
}

impl FrontierCurve {
    pub fn cleaned(&self) -> FrontierCurve {
        FrontierCurve {
            points: pareto_cleanup(&self.points),
            truncated_at: self.truncated_at,
        }
    }

    /// Delta at the given epsilon, linearly interpolated in
    /// (log epsilon, delta) between cleaned points. Presentation only;
    /// `None` outside the curve's reached range.
    pub fn delta_at(&self, epsilon: f64) -> Option<f64> {
        let pts = pareto_cleanup(&self.points);
        if pts.is_empty() || epsilon <= 0.0 {
            return None;
        }
        // ascending in epsilon
        let mut xy: Vec<(f64, f64)> = pts
            .iter()
            .rev()
            .map(|p| (p.epsilon.max(1e-300).ln(), p.delta))
            .collect();
        xy.dedup_by(|a, b| a.0 == b.0);
        let x = epsilon.ln();
        if x < xy[0].0 || x > xy[xy.len() - 1].0 {
            return None;
        }
        for w in xy.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x <= x1 {
                let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
                return Some(y0 + t * (y1 - y0));
            }
        }
        Some(xy[xy.len() - 1].1)
    }
}

/// Default comparison anchors: the decades 1e-1 down to 1e-6.
pub const DEFAULT_ANCHORS: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub anchors: Vec<f64>,
    /// One row per labeled curve; `None` marks anchors outside the
    /// curve's reached range.
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

/// Align labeled curves on shared epsilon anchors.
pub fn compare(curves: &[(String, &FrontierCurve)], anchors: &[f64]) -> Result<CompareReport> {
    if curves.is_empty() {
        return Err(FactError::InvalidParameter(
            "comparison needs at least one curve".into(),
        ));
    }
    let rows = curves
        .iter()
        .map(|(label, curve)| {
            let vals = anchors.iter().map(|&e| curve.delta_at(e)).collect();
            (label.clone(), vals)
        })
        .collect();
    Ok(CompareReport {
        anchors: anchors.to_vec(),
        rows,
    })
}
