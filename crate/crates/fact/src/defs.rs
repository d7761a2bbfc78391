//! Group-fairness definitions as linear rows or quadratic forms over the
//! normalized confusion tensor.
//!
//! Each definition holds exactly at a feasible `z` iff its rows satisfy
//! `A z = 0` (linear) or `1/2 z^T B z = 0` (quadratic). Stacking multiple
//! definitions yields the conjunction.

use crate::error::{FactError, Result};
use crate::tensor::{Marginals, Vec8};
use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

pub type Mat8 = SMatrix<f64, 8, 8>;

/// A group-fairness definition, with its parameters where applicable.
///
/// `Cg`, `Pcb` and `Ncb` carry the two calibrated bin scores `0 <= v0 < v1 <= 1`;
/// `REOd` carries nonnegative mixture weights for false positive/negative rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FairnessDef {
    Dp,
    EOp,
    Pe,
    EOd,
    Efnr,
    Cg { v0: f64, v1: f64 },
    Pcb { v0: f64, v1: f64 },
    Ncb { v0: f64, v1: f64 },
    REOd { alpha0: f64, beta0: f64, alpha1: f64, beta1: f64 },
    Pp,
    Efor,
    Ca,
}

impl FairnessDef {
    pub fn tag(&self) -> &'static str {
        match self {
            FairnessDef::Dp => "DP",
            FairnessDef::EOp => "EOp",
            FairnessDef::Pe => "PE",
            FairnessDef::EOd => "EOd",
            FairnessDef::Efnr => "EFNR",
            FairnessDef::Cg { .. } => "CG",
            FairnessDef::Pcb { .. } => "PCB",
            FairnessDef::Ncb { .. } => "NCB",
            FairnessDef::REOd { .. } => "REOd",
            FairnessDef::Pp => "PP",
            FairnessDef::Efor => "EFOR",
            FairnessDef::Ca => "CA",
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, FairnessDef::Pp | FairnessDef::Efor | FairnessDef::Ca)
    }

    /// Parse one definition like `DP` or `CG(v0=0.3,v1=0.8)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                if !s.ends_with(')') {
                    return Err(FactError::UnknownDefinition(s.into()));
                }
                (&s[..open], Some(&s[open + 1..s.len() - 1]))
            }
            None => (s, None),
        };
        let parse_params = |args: Option<&str>| -> Result<std::collections::HashMap<String, f64>> {
            let mut map = std::collections::HashMap::new();
            if let Some(args) = args {
                for piece in args.split(',').filter(|p| !p.trim().is_empty()) {
                    let (k, v) = piece
                        .split_once('=')
                        .ok_or_else(|| FactError::UnknownDefinition(s.into()))?;
                    let value: f64 = v
                        .trim()
                        .parse()
                        .map_err(|_| FactError::UnknownDefinition(s.into()))?;
                    map.insert(k.trim().to_ascii_lowercase(), value);
                }
            }
            Ok(map)
        };
        let params = parse_params(args)?;
        let scores = |params: &std::collections::HashMap<String, f64>| -> Result<(f64, f64)> {
            match (params.get("v0"), params.get("v1")) {
                (Some(&v0), Some(&v1)) => Ok((v0, v1)),
                _ => Err(FactError::UnknownDefinition(format!(
                    "{s} (requires v0 and v1)"
                ))),
            }
        };
        match name.to_ascii_uppercase().as_str() {
            "DP" => Ok(FairnessDef::Dp),
            "EOP" => Ok(FairnessDef::EOp),
            "PE" => Ok(FairnessDef::Pe),
            "EOD" => Ok(FairnessDef::EOd),
            "EFNR" => Ok(FairnessDef::Efnr),
            "CG" => {
                let (v0, v1) = scores(&params)?;
                Ok(FairnessDef::Cg { v0, v1 })
            }
            "PCB" => {
                let (v0, v1) = scores(&params)?;
                Ok(FairnessDef::Pcb { v0, v1 })
            }
            "NCB" => {
                let (v0, v1) = scores(&params)?;
                Ok(FairnessDef::Ncb { v0, v1 })
            }
            "REOD" => {
                let get = |k: &str| params.get(k).copied().unwrap_or(1.0);
                Ok(FairnessDef::REOd {
                    alpha0: get("a0"),
                    beta0: get("b0"),
                    alpha1: get("a1"),
                    beta1: get("b1"),
                })
            }
            "PP" => Ok(FairnessDef::Pp),
            "EFOR" => Ok(FairnessDef::Efor),
            "CA" => Ok(FairnessDef::Ca),
            _ => Err(FactError::UnknownDefinition(s.into())),
        }
    }

    /// Parse a comma-separated definition list, e.g. `CG(v0=.3,v1=.8),EOd,DP`.
    /// Commas inside parentheses belong to parameters.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut defs = Vec::new();
        let mut depth = 0usize;
        let mut start = 0usize;
        for (i, ch) in s.char_indices() {
            match ch {
                '(' => depth += 1,
                ')' => depth = depth.saturating_sub(1),
                ',' if depth == 0 => {
                    if !s[start..i].trim().is_empty() {
                        defs.push(Self::parse(&s[start..i])?);
                    }
                    start = i + 1;
                }
                _ => {}
            }
        }
        if !s[start..].trim().is_empty() {
            defs.push(Self::parse(&s[start..])?);
        }
        if defs.is_empty() {
            return Err(FactError::UnknownDefinition(s.into()));
        }
        Ok(defs)
    }
}

pub(crate) fn validate_scores(v0: f64, v1: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v0) || !(0.0..=1.0).contains(&v1) || v0 >= v1 {
        return Err(FactError::InvalidScores { v0, v1 });
    }
    Ok(())
}

fn require_positives(m: &Marginals, tag: &str) -> Result<()> {
    for a in [0u8, 1] {
        if m.m_group(a) <= 0.0 {
            return Err(FactError::DegenerateMarginal(format!(
                "{tag} requires M_{a} > 0"
            )));
        }
    }
    Ok(())
}

fn require_negatives(m: &Marginals, tag: &str) -> Result<()> {
    for a in [0u8, 1] {
        if m.n_group(a) - m.m_group(a) <= 0.0 {
            return Err(FactError::DegenerateMarginal(format!(
                "{tag} requires N_{a} > M_{a}"
            )));
        }
    }
    Ok(())
}

/// Rows of a built linear definition with per-row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFairness {
    pub rows: Vec<Vec8>,
    pub labels: Vec<String>,
}

/// A built quadratic definition.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFairness {
    pub form: Mat8,
    pub label: String,
}

impl QuadraticFairness {
    /// `1/2 z^T B z`.
    pub fn residual(&self, z: &Vec8) -> f64 {
        0.5 * (z.transpose() * self.form * z)[(0, 0)]
    }
}

/// The output of building one definition: linear rows and/or quadratic forms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuiltFairness {
    pub linear: Vec<(Vec8, String)>,
    pub quadratic: Vec<QuadraticFairness>,
}

fn row(values: [f64; 8]) -> Vec8 {
    Vec8::from_column_slice(&values)
}

fn dp_row(m: &Marginals) -> Vec8 {
    let n = m.n;
    row([
        m.n0 / n,
        0.0,
        m.n0 / n,
        0.0,
        -m.n1 / n,
        0.0,
        -m.n1 / n,
        0.0,
    ])
}

fn eop_row(m: &Marginals) -> Vec8 {
    let n = m.n;
    row([m.m0 / n, 0.0, 0.0, 0.0, -m.m1 / n, 0.0, 0.0, 0.0])
}

fn pe_row(m: &Marginals) -> Vec8 {
    let n = m.n;
    row([
        0.0,
        0.0,
        (m.n0 - m.m0) / n,
        0.0,
        0.0,
        0.0,
        -(m.n1 - m.m1) / n,
        0.0,
    ])
}

fn efnr_row(m: &Marginals) -> Vec8 {
    let n = m.n;
    row([0.0, m.m0 / n, 0.0, 0.0, 0.0, -m.m1 / n, 0.0, 0.0])
}

/// Per-group two-bin calibration: `TP_a = v1 (TP_a + FP_a)` and
/// `FN_a = v0 (FN_a + TN_a)` for each group.
fn cg_rows(v0: f64, v1: f64) -> Vec<Vec8> {
    vec![
        row([1.0 - v1, 0.0, -v1, 0.0, 0.0, 0.0, 0.0, 0.0]),
        row([0.0, 1.0 - v0, 0.0, -v0, 0.0, 0.0, 0.0, 0.0]),
        row([0.0, 0.0, 0.0, 0.0, 1.0 - v1, 0.0, -v1, 0.0]),
        row([0.0, 0.0, 0.0, 0.0, 0.0, 1.0 - v0, 0.0, -v0]),
    ]
}

fn pcb_row(m: &Marginals, v0: f64, v1: f64) -> Vec8 {
    let scale = m.m1.min(m.m0);
    row([
        scale * v1 / m.m1,
        scale * v0 / m.m1,
        0.0,
        0.0,
        -scale * v1 / m.m0,
        -scale * v0 / m.m0,
        0.0,
        0.0,
    ])
}

fn ncb_row(m: &Marginals, v0: f64, v1: f64) -> Vec8 {
    let k1 = m.n1 - m.m1;
    let k0 = m.n0 - m.m0;
    let scale = k1.min(k0);
    row([
        0.0,
        0.0,
        scale * v1 / k1,
        scale * v0 / k1,
        0.0,
        0.0,
        -scale * v1 / k0,
        -scale * v0 / k0,
    ])
}

/// `alpha_1 FPR_1 + beta_1 FNR_1 = alpha_0 FPR_0 + beta_0 FNR_0`.
fn reod_row(m: &Marginals, alpha0: f64, beta0: f64, alpha1: f64, beta1: f64) -> Vec8 {
    let n = m.n;
    row([
        0.0,
        beta1 / m.m1 / n,
        alpha1 / (m.n1 - m.m1) / n,
        0.0,
        0.0,
        -beta0 / m.m0 / n,
        -alpha0 / (m.n0 - m.m0) / n,
        0.0,
    ])
}

/// Quadratic form with `1/2 z^T B z = (TP0 FP1 - TP1 FP0) / N^2`.
pub fn pp_form() -> Mat8 {
    let mut b = Mat8::zeros();
    b[(0, 6)] = -1.0;
    b[(6, 0)] = -1.0;
    b[(2, 4)] = 1.0;
    b[(4, 2)] = 1.0;
    b
}

/// Quadratic form with `1/2 z^T B z = (TN1 FN0 - TN0 FN1) / N^2`.
pub fn efor_form() -> Mat8 {
    let mut b = Mat8::zeros();
    b[(3, 5)] = 1.0;
    b[(5, 3)] = 1.0;
    b[(1, 7)] = -1.0;
    b[(7, 1)] = -1.0;
    b
}

/// Build the rows/forms of one definition for the given marginals.
pub fn build(def: &FairnessDef, m: &Marginals) -> Result<BuiltFairness> {
    let mut out = BuiltFairness::default();
    let push_linear = |rows: Vec<Vec8>, tag: &str, out: &mut BuiltFairness| {
        let multi = rows.len() > 1;
        for (i, r) in rows.into_iter().enumerate() {
            let label = if multi { format!("{tag}[{i}]") } else { tag.to_string() };
            out.linear.push((r, label));
        }
    };
    match *def {
        FairnessDef::Dp => {
            if m.n1 <= 0.0 || m.n0 <= 0.0 {
                return Err(FactError::DegenerateMarginal("DP requires N_a > 0".into()));
            }
            push_linear(vec![dp_row(m)], "DP", &mut out);
        }
        FairnessDef::EOp => {
            require_positives(m, "EOp")?;
            push_linear(vec![eop_row(m)], "EOp", &mut out);
        }
        FairnessDef::Pe => {
            require_negatives(m, "PE")?;
            push_linear(vec![pe_row(m)], "PE", &mut out);
        }
        FairnessDef::EOd => {
            require_positives(m, "EOd")?;
            require_negatives(m, "EOd")?;
            out.linear.push((eop_row(m), "EOd:EOp".into()));
            out.linear.push((pe_row(m), "EOd:PE".into()));
        }
        FairnessDef::Efnr => {
            require_positives(m, "EFNR")?;
            push_linear(vec![efnr_row(m)], "EFNR", &mut out);
        }
        FairnessDef::Cg { v0, v1 } => {
            validate_scores(v0, v1)?;
            push_linear(cg_rows(v0, v1), "CG", &mut out);
        }
        FairnessDef::Pcb { v0, v1 } => {
            validate_scores(v0, v1)?;
            require_positives(m, "PCB")?;
            push_linear(vec![pcb_row(m, v0, v1)], "PCB", &mut out);
        }
        FairnessDef::Ncb { v0, v1 } => {
            validate_scores(v0, v1)?;
            require_negatives(m, "NCB")?;
            push_linear(vec![ncb_row(m, v0, v1)], "NCB", &mut out);
        }
        FairnessDef::REOd {
            alpha0,
            beta0,
            alpha1,
            beta1,
        } => {
            for (name, w) in [
                ("alpha0", alpha0),
                ("beta0", beta0),
                ("alpha1", alpha1),
                ("beta1", beta1),
            ] {
                if !w.is_finite() || w < 0.0 {
                    return Err(FactError::InvalidParameter(format!(
                        "REOd weight {name} must be nonnegative, got {w}"
                    )));
                }
            }
            require_positives(m, "REOd")?;
            require_negatives(m, "REOd")?;
            push_linear(vec![reod_row(m, alpha0, beta0, alpha1, beta1)], "REOd", &mut out);
        }
        FairnessDef::Pp => out.quadratic.push(QuadraticFairness {
            form: pp_form(),
            label: "PP".into(),
        }),
        FairnessDef::Efor => out.quadratic.push(QuadraticFairness {
            form: efor_form(),
            label: "EFOR".into(),
        }),
        FairnessDef::Ca => {
            out.quadratic.push(QuadraticFairness {
                form: pp_form(),
                label: "CA:PP".into(),
            });
            out.quadratic.push(QuadraticFairness {
                form: efor_form(),
                label: "CA:EFOR".into(),
            });
        }
    }
    Ok(out)
}

/// Conjunction of built definitions: stacked linear rows plus the list of
/// quadratic forms, in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FairnessSystem {
    pub rows: Vec<Vec8>,
    pub row_labels: Vec<String>,
    pub forms: Vec<QuadraticFairness>,
}

impl FairnessSystem {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.forms.is_empty()
    }

    pub fn has_quadratic(&self) -> bool {
        !self.forms.is_empty()
    }

    pub fn linear_residuals(&self, z: &Vec8) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(z)).collect()
    }

    /// Aggregate fairness deviation: squared linear residuals plus squared
    /// quadratic residuals, unit weights.
    pub fn aggregate_gap(&self, z: &Vec8) -> f64 {
        let lin: f64 = self.rows.iter().map(|r| r.dot(z).powi(2)).sum();
        let quad: f64 = self.forms.iter().map(|f| f.residual(z).powi(2)).sum();
        lin + quad
    }
}

/// Stack several definitions into one system.
pub fn stack(defs: &[FairnessDef], m: &Marginals) -> Result<FairnessSystem> {
    let mut sys = FairnessSystem::default();
    for def in defs {
        let built = build(def, m)?;
        for (r, label) in built.linear {
            sys.rows.push(r);
            sys.row_labels.push(label);
        }
        sys.forms.extend(built.quadratic);
    }
    Ok(sys)
}

/// Labeled residuals of every row and form of a system at `z`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub linear: Vec<(String, f64)>,
    pub quadratic: Vec<(String, f64)>,
    pub aggregate: f64,
}

pub fn gap(sys: &FairnessSystem, z: &Vec8) -> GapReport {
    let linear: Vec<(String, f64)> = sys
        .row_labels
        .iter()
        .cloned()
        .zip(sys.linear_residuals(z))
        .collect();
    let quadratic: Vec<(String, f64)> = sys
        .forms
        .iter()
        .map(|f| (f.label.clone(), f.residual(z)))
        .collect();
    GapReport {
        aggregate: sys.aggregate_gap(z),
        linear,
        quadratic,
    }
}
