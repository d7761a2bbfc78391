//! The per-group confusion tensor, its normalized vector form and the
//! polytope of valid normalized tensors.
//!
//! The eight cells are stored in the fixed order
//! `(TP1, FN1, FP1, TN1, TP0, FN0, FP0, TN0)`; all serialization uses the
//! same order. The normalized vector `z = counts / N` lives on the polytope
//! `K = { z >= 0 : A_const z = b_const }` where the four equality rows pin
//! the group sizes and the per-group positive counts.

use crate::error::{FactError, Result};
use nalgebra::SVector;
use serde::{Deserialize, Serialize};

pub type Vec8 = SVector<f64, 8>;

/// Number of tensor cells.
pub const Z_LEN: usize = 8;

/// Classification-error cost vector: FN and FP cells cost 1, the rest 0.
pub const ERROR_COSTS: [f64; 8] = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];

/// Index of each cell in the fixed ordering.
pub mod cell {
    pub const TP1: usize = 0;
    pub const FN1: usize = 1;
    pub const FP1: usize = 2;
    pub const TN1: usize = 3;
    pub const TP0: usize = 4;
    pub const FN0: usize = 5;
    pub const FP0: usize = 6;
    pub const TN0: usize = 7;
}

/// The known constants of a dataset: total count `N`, per-group counts
/// `N_a` and per-group positive counts `M_a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub n: f64,
    pub n1: f64,
    pub n0: f64,
    pub m1: f64,
    pub m0: f64,
}

impl Marginals {
    pub fn new(n1: f64, m1: f64, n0: f64, m0: f64) -> Result<Self> {
        for (name, v) in [("N1", n1), ("M1", m1), ("N0", n0), ("M0", m0)] {
            if !v.is_finite() || v < 0.0 {
                return Err(FactError::InvalidParameter(format!(
                    "marginal {name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        if m1 > n1 || m0 > n0 {
            return Err(FactError::InvalidParameter(format!(
                "require M_a <= N_a, got M1={m1}, N1={n1}, M0={m0}, N0={n0}"
            )));
        }
        let n = n1 + n0;
        if n <= 0.0 {
            return Err(FactError::InvalidParameter("N must be positive".into()));
        }
        Ok(Self { n, n1, n0, m1, m0 })
    }

    pub fn n_group(&self, a: u8) -> f64 {
        if a == 1 {
            self.n1
        } else {
            self.n0
        }
    }

    pub fn m_group(&self, a: u8) -> f64 {
        if a == 1 {
            self.m1
        } else {
            self.m0
        }
    }

    /// `M_a / N_a`, or `None` when the group is empty.
    pub fn base_rate(&self, a: u8) -> Option<f64> {
        let n_a = self.n_group(a);
        (n_a > 0.0).then(|| self.m_group(a) / n_a)
    }

    pub fn equal_base_rates(&self, tol: f64) -> bool {
        // M1 N0 = M0 N1, stated without divisions so empty groups compare sanely
        (self.m1 * self.n0 - self.m0 * self.n1).abs() <= tol * self.n * self.n
    }

    /// Overall base rate `(M0 + M1) / N`.
    pub fn overall_base_rate(&self) -> f64 {
        (self.m0 + self.m1) / self.n
    }

    /// True when some downstream coefficient would divide by zero:
    /// an empty group, a group with no positives, or no negatives.
    pub fn degenerate_group(&self, a: u8) -> bool {
        let (n_a, m_a) = (self.n_group(a), self.m_group(a));
        n_a <= 0.0 || m_a <= 0.0 || m_a >= n_a
    }

    /// Marginal-sum equality rows: rows pair (group size, group positives)
    /// for a = 1 then a = 0.
    pub fn a_const() -> [[f64; 8]; 4] {
        [
            [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        ]
    }

    pub fn b_const(&self) -> [f64; 4] {
        [
            self.n1 / self.n,
            self.m1 / self.n,
            self.n0 / self.n,
            self.m0 / self.n,
        ]
    }
}

/// One labeled prediction: true label, predicted label, protected attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub y: u8,
    pub yhat: u8,
    pub a: u8,
}

/// The per-group confusion tensor with its marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessConfusionTensor {
    counts: [f64; 8],
    marginals: Marginals,
}

impl FairnessConfusionTensor {
    /// Build from the 8 cell counts in the fixed order; marginals are
    /// computed from the counts.
    pub fn from_counts(counts: [f64; 8]) -> Result<Self> {
        for (index, &value) in counts.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(FactError::InvalidCount { index, value });
            }
        }
        let n1 = counts[0] + counts[1] + counts[2] + counts[3];
        let m1 = counts[0] + counts[1];
        let n0 = counts[4] + counts[5] + counts[6] + counts[7];
        let m0 = counts[4] + counts[5];
        let marginals = Marginals::new(n1, m1, n0, m0)?;
        Ok(Self { counts, marginals })
    }

    /// Tally a sequence of (y, yhat, a) records into the tensor.
    pub fn from_predictions<I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = PredictionRecord>,
    {
        let mut counts = [0.0f64; 8];
        let mut seen = 0usize;
        for (index, r) in records.into_iter().enumerate() {
            for (field, value) in [("y", r.y), ("yhat", r.yhat), ("a", r.a)] {
                if value > 1 {
                    return Err(FactError::InvalidLabel {
                        index,
                        field,
                        value: value as i64,
                    });
                }
            }
            counts[Self::cell_index(r)] += 1.0;
            seen += 1;
        }
        if seen == 0 {
            return Err(FactError::EmptyDataset);
        }
        Self::from_counts(counts)
    }

    pub fn cell_index(r: PredictionRecord) -> usize {
        let base = if r.a == 1 { 0 } else { 4 };
        base + match (r.y, r.yhat) {
            (1, 1) => 0, // TP
            (1, 0) => 1, // FN
            (0, 1) => 2, // FP
            _ => 3,      // TN
        }
    }

    pub fn counts(&self) -> &[f64; 8] {
        &self.counts
    }

    pub fn marginals(&self) -> &Marginals {
        &self.marginals
    }

    /// Normalized vector `z = counts / N`.
    pub fn z(&self) -> Vec8 {
        Vec8::from_iterator(self.counts.iter().map(|c| c / self.marginals.n))
    }

    /// Componentwise residual of the marginal equality rows at `z`.
    pub fn constraint_residual(&self) -> f64 {
        constraint_residual(&self.z(), &self.marginals)
    }
}

/// Componentwise max residual of `A_const z - b_const`.
pub fn constraint_residual(z: &Vec8, m: &Marginals) -> f64 {
    let a = Marginals::a_const();
    let b = m.b_const();
    let mut worst = 0.0f64;
    for (row, rhs) in a.iter().zip(b.iter()) {
        let lhs: f64 = row.iter().zip(z.iter()).map(|(c, zi)| c * zi).sum();
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// The four degrees of freedom of `K`, in count units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeCoordinates {
    pub tp1: f64,
    pub fp1: f64,
    pub tp0: f64,
    pub fp0: f64,
}

impl FreeCoordinates {
    /// Map free coordinates to the normalized vector on `K`, filling in
    /// `FN_a = M_a - TP_a` and `TN_a = (N_a - M_a) - FP_a`.
    pub fn embed(&self, m: &Marginals) -> Result<Vec8> {
        let tol = 1e-9 * m.n.max(1.0);
        let checks = [
            ("TP1", self.tp1, m.m1),
            ("FP1", self.fp1, m.n1 - m.m1),
            ("TP0", self.tp0, m.m0),
            ("FP0", self.fp0, m.n0 - m.m0),
        ];
        for (name, v, hi) in checks {
            if v < -tol || v > hi + tol {
                return Err(FactError::InfeasibleCoordinates(format!(
                    "{name}={v} outside [0, {hi}]"
                )));
            }
        }
        Ok(Vec8::from_column_slice(&[
            self.tp1 / m.n,
            (m.m1 - self.tp1) / m.n,
            self.fp1 / m.n,
            (m.n1 - m.m1 - self.fp1) / m.n,
            self.tp0 / m.n,
            (m.m0 - self.tp0) / m.n,
            self.fp0 / m.n,
            (m.n0 - m.m0 - self.fp0) / m.n,
        ]))
    }

    /// Inverse of [`FreeCoordinates::embed`].
    pub fn extract(z: &Vec8, m: &Marginals) -> Self {
        Self {
            tp1: z[cell::TP1] * m.n,
            fp1: z[cell::FP1] * m.n,
            tp0: z[cell::TP0] * m.n,
            fp0: z[cell::FP0] * m.n,
        }
    }

    /// The perfect-prediction point (FN = FP = 0).
    pub fn perfect(m: &Marginals) -> Self {
        Self {
            tp1: m.m1,
            fp1: 0.0,
            tp0: m.m0,
            fp0: 0.0,
        }
    }
}

/// `c . z`, the classification error rate of a normalized tensor.
pub fn error_rate(z: &Vec8) -> f64 {
    ERROR_COSTS.iter().zip(z.iter()).map(|(c, zi)| c * zi).sum()
}

/// Per-group rates; `None` marks a rate whose denominator vanished.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub tnr: Option<f64>,
    pub positive_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub group1: RateSet,
    pub group0: RateSet,
}

impl GroupRates {
    pub fn group(&self, a: u8) -> &RateSet {
        if a == 1 {
            &self.group1
        } else {
            &self.group0
        }
    }
}

/// Rates of each group computed from a normalized tensor.
pub fn group_rates(z: &Vec8, m: &Marginals) -> GroupRates {
    let rates = |tp: f64, fn_: f64, fp: f64, tn: f64, n_a: f64, m_a: f64| {
        let pos = m_a / m.n;
        let neg = (n_a - m_a) / m.n;
        let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
        RateSet {
            tpr: ratio(tp, pos),
            fnr: ratio(fn_, pos),
            fpr: ratio(fp, neg),
            tnr: ratio(tn, neg),
            positive_rate: ratio(tp + fp, n_a / m.n),
        }
    };
    GroupRates {
        group1: rates(
            z[cell::TP1],
            z[cell::FN1],
            z[cell::FP1],
            z[cell::TN1],
            m.n1,
            m.m1,
        ),
        group0: rates(
            z[cell::TP0],
            z[cell::FN0],
            z[cell::FP0],
            z[cell::TN0],
            m.n0,
            m.m0,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn from_counts_symmetric() {
        let t = FairnessConfusionTensor::from_counts([1.0; 8]).unwrap();
        let m = t.marginals();
        assert_eq!(m.n, 8.0);
        assert_eq!(m.n1, 4.0);
        assert_eq!(m.n0, 4.0);
        assert_eq!(m.m1, 2.0);
        assert_eq!(m.m0, 2.0);
        assert!(t.constraint_residual() <= 1e-12);
    }

    #[test]
    fn from_counts_zero_error() {
        let t =
            FairnessConfusionTensor::from_counts([2.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(t.marginals().m1, 2.0);
        assert_eq!(t.marginals().m0, 1.0);
        assert_eq!(error_rate(&t.z()), 0.0);
    }

    #[test]
    fn from_counts_rejects_negative() {
        let err =
            FairnessConfusionTensor::from_counts([-1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
                .unwrap_err();
        assert!(matches!(err, FactError::InvalidCount { index: 0, .. }));
    }

    #[test]
    fn from_predictions_single_record() {
        let t = FairnessConfusionTensor::from_predictions([PredictionRecord {
            y: 1,
            yhat: 1,
            a: 1,
        }])
        .unwrap();
        assert_eq!(t.counts()[cell::TP1], 1.0);
        assert_eq!(t.counts().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn from_predictions_group0_cells() {
        let t = FairnessConfusionTensor::from_predictions([
            PredictionRecord { y: 1, yhat: 0, a: 0 },
            PredictionRecord { y: 0, yhat: 1, a: 0 },
        ])
        .unwrap();
        assert_eq!(t.counts()[cell::FN0], 1.0);
        assert_eq!(t.counts()[cell::FP0], 1.0);
    }

    #[test]
    fn from_predictions_empty() {
        let err = FairnessConfusionTensor::from_predictions([]).unwrap_err();
        assert!(matches!(err, FactError::EmptyDataset));
    }

    #[test]
    fn from_predictions_recount_matches_independent_tally() {
        // oracle: recount by an independent per-cell scan
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 33) & 1) as u8
        };
        let records: Vec<PredictionRecord> = (0..1000)
            .map(|_| PredictionRecord {
                y: next(),
                yhat: next(),
                a: next(),
            })
            .collect();
        let t = FairnessConfusionTensor::from_predictions(records.iter().copied()).unwrap();
        assert_eq!(t.counts().iter().sum::<f64>(), 1000.0);
        for idx in 0..8 {
            let tally = records
                .iter()
                .filter(|r| FairnessConfusionTensor::cell_index(**r) == idx)
                .count() as f64;
            assert_eq!(t.counts()[idx], tally);
        }
    }

    #[test]
    fn embed_perfect_and_all_wrong() {
        let m = Marginals::new(6.0, 2.0, 4.0, 3.0).unwrap();
        let z = FreeCoordinates::perfect(&m).embed(&m).unwrap();
        assert_eq!(error_rate(&z), 0.0);
        let wrong = FreeCoordinates {
            tp1: 0.0,
            fp1: m.n1 - m.m1,
            tp0: 0.0,
            fp0: m.n0 - m.m0,
        };
        let zw = wrong.embed(&m).unwrap();
        assert_abs_diff_eq!(error_rate(&zw), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn embed_rejects_out_of_box() {
        let m = Marginals::new(6.0, 2.0, 4.0, 3.0).unwrap();
        let f = FreeCoordinates {
            tp1: 2.5,
            fp1: 0.0,
            tp0: 0.0,
            fp0: 0.0,
        };
        assert!(matches!(
            f.embed(&m),
            Err(FactError::InfeasibleCoordinates(_))
        ));
    }

    #[test]
    fn error_rate_hand_tally() {
        let t =
            FairnessConfusionTensor::from_counts([2.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(error_rate(&t.z()), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn group_rates_basic() {
        let t = FairnessConfusionTensor::from_counts([1.0; 8]).unwrap();
        let r = group_rates(&t.z(), t.marginals());
        assert_abs_diff_eq!(r.group1.tpr.unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.group1.fpr.unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn group_rates_degenerate_sentinel() {
        // M1 = 0: TPR for group 1 undefined
        let t =
            FairnessConfusionTensor::from_counts([0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let r = group_rates(&t.z(), t.marginals());
        assert!(r.group1.tpr.is_none());
        assert!(r.group1.fpr.is_some());
    }

    #[test]
    fn group_rates_perfect() {
        let m = Marginals::new(6.0, 2.0, 4.0, 3.0).unwrap();
        let z = FreeCoordinates::perfect(&m).embed(&m).unwrap();
        let r = group_rates(&z, &m);
        for a in [0u8, 1] {
            assert_abs_diff_eq!(r.group(a).tpr.unwrap(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(r.group(a).fpr.unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    fn arbitrary_marginals() -> impl Strategy<Value = Marginals> {
        (1u32..40, 1u32..40).prop_flat_map(|(n1, n0)| {
            (Just(n1), 0..=n1, Just(n0), 0..=n0).prop_map(|(n1, m1, n0, m0)| {
                Marginals::new(n1 as f64, m1 as f64, n0 as f64, m0 as f64).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn embed_lands_on_k_and_round_trips(
            m in arbitrary_marginals(),
            u in [0.0f64..=1.0, 0.0..=1.0, 0.0..=1.0, 0.0..=1.0],
        ) {
            let f = FreeCoordinates {
                tp1: u[0] * m.m1,
                fp1: u[1] * (m.n1 - m.m1),
                tp0: u[2] * m.m0,
                fp0: u[3] * (m.n0 - m.m0),
            };
            let z = f.embed(&m).unwrap();
            prop_assert!(z.iter().all(|&v| v >= -1e-15));
            prop_assert!(constraint_residual(&z, &m) <= 1e-12);
            prop_assert!(((z.iter().sum::<f64>()) - 1.0).abs() <= 1e-12);
            let back = FreeCoordinates::extract(&z, &m);
            prop_assert!((back.tp1 - f.tp1).abs() <= 1e-9 * m.n);
            prop_assert!((back.fp1 - f.fp1).abs() <= 1e-9 * m.n);
            prop_assert!((back.tp0 - f.tp0).abs() <= 1e-9 * m.n);
            prop_assert!((back.fp0 - f.fp0).abs() <= 1e-9 * m.n);
        }

        #[test]
        fn error_rate_affine_along_segments(
            m in arbitrary_marginals(),
            u in [0.0f64..=1.0, 0.0..=1.0, 0.0..=1.0, 0.0..=1.0],
            v in [0.0f64..=1.0, 0.0..=1.0, 0.0..=1.0, 0.0..=1.0],
            t in 0.0f64..=1.0,
        ) {
            let mk = |w: &[f64; 4]| FreeCoordinates {
                tp1: w[0] * m.m1,
                fp1: w[1] * (m.n1 - m.m1),
                tp0: w[2] * m.m0,
                fp0: w[3] * (m.n0 - m.m0),
            };
            let za = mk(&u).embed(&m).unwrap();
            let zb = mk(&v).embed(&m).unwrap();
            let zm = za * (1.0 - t) + zb * t;
            let blended = (1.0 - t) * error_rate(&za) + t * error_rate(&zb);
            prop_assert!((error_rate(&zm) - blended).abs() <= 1e-12);
        }
    }
}
