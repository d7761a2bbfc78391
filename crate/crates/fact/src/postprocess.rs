//! Classifier repair by randomized label mixing.
//!
//! A base classifier occupies one ROC point per group. Any tensor whose
//! per-group ROC points lie in the convex hull of {(0,0), base point,
//! flipped base point, (1,1)} is realizable from the base classifier by
//! flipping labels with group-conditional probabilities. This module
//! derives the hull, solves for the mixing rates, and applies them.

use crate::error::{FactError, Result};
use crate::tensor::{cell, FairnessConfusionTensor, Marginals, PredictionRecord, Vec8};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// `a * fpr + b * tpr <= c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl HalfPlane {
    pub fn contains(&self, p: RocPoint, tol: f64) -> bool {
        self.a * p.fpr + self.b * p.tpr <= self.c + tol
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupHull {
    pub base: RocPoint,
    pub planes: Vec<HalfPlane>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HullConstraints {
    pub group1: GroupHull,
    pub group0: GroupHull,
}

impl HullConstraints {
    pub fn group(&self, a: u8) -> &GroupHull {
        if a == 1 {
            &self.group1
        } else {
            &self.group0
        }
    }
}

/// Per-group (FPR, TPR) of a tensor. Errors when a group has no positives
/// or no negatives, since the corresponding rate is undefined.
pub fn roc_points(t: &FairnessConfusionTensor) -> Result<[RocPoint; 2]> {
    let m = t.marginals();
    let z = t.z();
    roc_points_z(&z, m)
}

pub fn roc_points_z(z: &Vec8, m: &Marginals) -> Result<[RocPoint; 2]> {
    let mut out = [RocPoint { fpr: 0.0, tpr: 0.0 }; 2];
    for (slot, (a, tp, fp)) in [(1u8, cell::TP1, cell::FP1), (0u8, cell::TP0, cell::FP0)]
        .into_iter()
        .enumerate()
    {
        let pos = m.m_group(a);
        let neg = m.n_group(a) - pos;
        if pos <= 0.0 || neg <= 0.0 {
            return Err(FactError::DegenerateMarginal(format!(
                "group {a} needs both positives and negatives for ROC rates"
            )));
        }
        out[slot] = RocPoint {
            tpr: z[tp] * m.n / pos,
            fpr: z[fp] * m.n / neg,
        };
    }
    Ok(out)
}

fn hull_of(base: RocPoint) -> GroupHull {
    let corners = [
        RocPoint { fpr: 0.0, tpr: 0.0 },
        base,
        RocPoint {
            fpr: 1.0 - base.fpr,
            tpr: 1.0 - base.tpr,
        },
        RocPoint { fpr: 1.0, tpr: 1.0 },
    ];
    if (base.tpr - base.fpr).abs() <= 1e-12 {
        // random-classifier base: the hull collapses to the diagonal
        return GroupHull {
            base,
            planes: vec![
                HalfPlane { a: -1.0, b: 1.0, c: 0.0 },
                HalfPlane { a: 1.0, b: -1.0, c: 0.0 },
            ],
        };
    }
    let cx = corners.iter().map(|p| p.fpr).sum::<f64>() / 4.0;
    let cy = corners.iter().map(|p| p.tpr).sum::<f64>() / 4.0;
    let mut ordered = corners;
    ordered.sort_by(|p, q| {
        let ap = (p.tpr - cy).atan2(p.fpr - cx);
        let aq = (q.tpr - cy).atan2(q.fpr - cx);
        ap.partial_cmp(&aq).unwrap()
    });
    let mut planes = Vec::with_capacity(4);
    for i in 0..4 {
        let u = ordered[i];
        let w = ordered[(i + 1) % 4];
        let (dx, dy) = (w.fpr - u.fpr, w.tpr - u.tpr);
        if dx.abs() + dy.abs() <= 1e-12 {
            continue;
        }
        let (mut a, mut b) = (dy, -dx);
        let mut c = a * u.fpr + b * u.tpr;
        if a * cx + b * cy > c {
            a = -a;
            b = -b;
            c = -c;
        }
        let norm = a.hypot(b);
        planes.push(HalfPlane {
            a: a / norm,
            b: b / norm,
            c: c / norm,
        });
    }
    GroupHull { base, planes }
}

/// The per-group realizable ROC regions of a base classifier.
pub fn hull_constraints(t: &FairnessConfusionTensor) -> Result<HullConstraints> {
    let [p1, p0] = roc_points(t)?;
    Ok(HullConstraints {
        group1: hull_of(p1),
        group0: hull_of(p0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMix {
    /// Pr(post-processed label = 1 | predicted 1)
    pub p11: f64,
    /// Pr(post-processed label = 1 | predicted 0)
    pub p10: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingRates {
    pub group1: GroupMix,
    pub group0: GroupMix,
}

impl MixingRates {
    pub fn group(&self, a: u8) -> GroupMix {
        if a == 1 {
            self.group1
        } else {
            self.group0
        }
    }
}

const RATE_CLAMP_TOL: f64 = 1e-9;

fn solve_group(a: u8, base: RocPoint, target: RocPoint) -> Result<GroupMix> {
    let det = base.tpr - base.fpr;
    if det.abs() <= 1e-12 {
        return Err(FactError::DegenerateBaseClassifier { group: a });
    }
    // tpr_target = p11 tpr + p10 (1 - tpr), same for fpr
    let p11 = (target.tpr * (1.0 - base.fpr) - target.fpr * (1.0 - base.tpr)) / det;
    let p10 = (target.fpr * base.tpr - target.tpr * base.fpr) / det;
    let clamp = |name: &str, v: f64| -> Result<f64> {
        if !(-RATE_CLAMP_TOL..=1.0 + RATE_CLAMP_TOL).contains(&v) {
            return Err(FactError::NotRealizable(format!(
                "group {a} mixing rate {name} = {v} outside [0, 1]; target ROC point \
                 lies outside the base classifier's hull"
            )));
        }
        Ok(v.clamp(0.0, 1.0))
    };
    Ok(GroupMix {
        p11: clamp("p11", p11)?,
        p10: clamp("p10", p10)?,
    })
}

/// Per-group flip probabilities turning the base tensor into the target.
pub fn mixing_rates(base: &FairnessConfusionTensor, target_z: &Vec8) -> Result<MixingRates> {
    let [b1, b0] = roc_points(base)?;
    let [t1, t0] = roc_points_z(target_z, base.marginals())?;
    Ok(MixingRates {
        group1: solve_group(1, b1, t1)?,
        group0: solve_group(0, b0, t0)?,
    })
}

/// Randomly re-label predictions per the mixing rates. Each record draws
/// from its own RNG stream, so the output is independent of record order.
pub fn apply_mixing(
    records: &[PredictionRecord],
    rates: &MixingRates,
    seed: u64,
) -> Vec<PredictionRecord> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mix = rates.group(r.a);
            let p = if r.yhat == 1 { mix.p11 } else { mix.p10 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            PredictionRecord {
                y: r.y,
                yhat: u8::from(rng.gen::<f64>() < p),
                a: r.a,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tensor(counts: [f64; 8]) -> FairnessConfusionTensor {
        FairnessConfusionTensor::from_counts(counts).unwrap()
    }

    // group 1: TPR 0.8, FPR 0.2; group 0: TPR 0.6, FPR 0.4
    fn base() -> FairnessConfusionTensor {
        tensor([40.0, 10.0, 10.0, 40.0, 30.0, 20.0, 20.0, 30.0])
    }

    #[test]
    fn roc_points_basic() {
        let [p1, p0] = roc_points(&base()).unwrap();
        assert_abs_diff_eq!(p1.tpr, 0.8);
        assert_abs_diff_eq!(p1.fpr, 0.2);
        assert_abs_diff_eq!(p0.tpr, 0.6);
        assert_abs_diff_eq!(p0.fpr, 0.4);
    }

    #[test]
    fn hull_contains_expected_quadrilateral() {
        let hull = hull_of(RocPoint { fpr: 0.2, tpr: 0.8 });
        assert_eq!(hull.planes.len(), 4);
        let inside = [
            RocPoint { fpr: 0.0, tpr: 0.0 },
            RocPoint { fpr: 0.2, tpr: 0.8 },
            RocPoint { fpr: 0.8, tpr: 0.2 },
            RocPoint { fpr: 1.0, tpr: 1.0 },
            RocPoint { fpr: 0.5, tpr: 0.5 },
            RocPoint { fpr: 0.3, tpr: 0.6 },
        ];
        let outside = [
            RocPoint { fpr: 0.0, tpr: 1.0 },
            RocPoint { fpr: 1.0, tpr: 0.0 },
            RocPoint { fpr: 0.1, tpr: 0.95 },
        ];
        for p in inside {
            assert!(hull.planes.iter().all(|h| h.contains(p, 1e-9)), "{p:?}");
        }
        for p in outside {
            assert!(!hull.planes.iter().all(|h| h.contains(p, 1e-9)), "{p:?}");
        }
    }

    #[test]
    fn hull_vertex_membership_cross_check() {
        // every hull vertex satisfies every halfplane with near-equality on two
        for base in [
            RocPoint { fpr: 0.2, tpr: 0.8 },
            RocPoint { fpr: 0.7, tpr: 0.3 },
            RocPoint { fpr: 0.05, tpr: 0.1 },
        ] {
            let hull = hull_of(base);
            let verts = [
                RocPoint { fpr: 0.0, tpr: 0.0 },
                base,
                RocPoint {
                    fpr: 1.0 - base.fpr,
                    tpr: 1.0 - base.tpr,
                },
                RocPoint { fpr: 1.0, tpr: 1.0 },
            ];
            for v in verts {
                assert!(hull.planes.iter().all(|h| h.contains(v, 1e-9)));
                let tight = hull
                    .planes
                    .iter()
                    .filter(|h| (h.a * v.fpr + h.b * v.tpr - h.c).abs() <= 1e-9)
                    .count();
                assert!(tight >= 2, "vertex {v:?} tight on {tight} planes");
            }
        }
    }

    #[test]
    fn diagonal_base_degenerates_to_segment() {
        let hull = hull_of(RocPoint { fpr: 0.3, tpr: 0.3 });
        assert_eq!(hull.planes.len(), 2);
        assert!(hull
            .planes
            .iter()
            .all(|h| h.contains(RocPoint { fpr: 0.5, tpr: 0.5 }, 1e-12)));
        assert!(!hull
            .planes
            .iter()
            .all(|h| h.contains(RocPoint { fpr: 0.4, tpr: 0.6 }, 1e-9)));
    }

    #[test]
    fn perfect_base_spans_square() {
        let hull = hull_of(RocPoint { fpr: 0.0, tpr: 1.0 });
        for p in [
            RocPoint { fpr: 0.0, tpr: 1.0 },
            RocPoint { fpr: 1.0, tpr: 0.0 },
            RocPoint { fpr: 0.9, tpr: 0.1 },
        ] {
            assert!(hull.planes.iter().all(|h| h.contains(p, 1e-9)));
        }
    }

    #[test]
    fn identity_mixing() {
        let b = base();
        let rates = mixing_rates(&b, &b.z()).unwrap();
        for a in [0u8, 1] {
            assert_abs_diff_eq!(rates.group(a).p11, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(rates.group(a).p10, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn full_flip_mixing() {
        let b = base();
        let mut flipped = *b.counts();
        flipped.swap(0, 1);
        flipped.swap(2, 3);
        flipped.swap(4, 5);
        flipped.swap(6, 7);
        let target = tensor(flipped);
        let rates = mixing_rates(&b, &target.z()).unwrap();
        for a in [0u8, 1] {
            assert_abs_diff_eq!(rates.group(a).p11, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(rates.group(a).p10, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rates_reconstruct_target_rates() {
        let b = base();
        let [b1, b0] = roc_points(&b).unwrap();
        // aim for an interior point of each hull
        let t1 = RocPoint { fpr: 0.3, tpr: 0.6 };
        let t0 = RocPoint { fpr: 0.45, tpr: 0.55 };
        let m = b.marginals();
        let mut z = b.z();
        z[cell::TP1] = t1.tpr * m.m1 / m.n;
        z[cell::FN1] = (1.0 - t1.tpr) * m.m1 / m.n;
        z[cell::FP1] = t1.fpr * (m.n1 - m.m1) / m.n;
        z[cell::TN1] = (1.0 - t1.fpr) * (m.n1 - m.m1) / m.n;
        z[cell::TP0] = t0.tpr * m.m0 / m.n;
        z[cell::FN0] = (1.0 - t0.tpr) * m.m0 / m.n;
        z[cell::FP0] = t0.fpr * (m.n0 - m.m0) / m.n;
        z[cell::TN0] = (1.0 - t0.fpr) * (m.n0 - m.m0) / m.n;
        let rates = mixing_rates(&b, &z).unwrap();
        for (bp, tp, mix) in [
            (b1, t1, rates.group1),
            (b0, t0, rates.group0),
        ] {
            assert_abs_diff_eq!(
                mix.p11 * bp.tpr + mix.p10 * (1.0 - bp.tpr),
                tp.tpr,
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(
                mix.p11 * bp.fpr + mix.p10 * (1.0 - bp.fpr),
                tp.fpr,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn out_of_hull_target_rejected() {
        let b = base();
        let m = b.marginals();
        // (fpr, tpr) = (0, 1) for group 1 is outside the hull of (0.2, 0.8)
        let mut z = b.z();
        z[cell::TP1] = m.m1 / m.n;
        z[cell::FN1] = 0.0;
        z[cell::FP1] = 0.0;
        z[cell::TN1] = (m.n1 - m.m1) / m.n;
        let err = mixing_rates(&b, &z).unwrap_err();
        assert!(matches!(err, FactError::NotRealizable(_)));
    }

    #[test]
    fn diagonal_base_classifier_rejected() {
        let t = tensor([25.0, 25.0, 25.0, 25.0, 30.0, 20.0, 20.0, 30.0]);
        let err = mixing_rates(&t, &t.z()).unwrap_err();
        assert!(matches!(
            err,
            FactError::DegenerateBaseClassifier { group: 1 }
        ));
    }

    #[test]
    fn apply_identity_and_flip() {
        let records: Vec<PredictionRecord> = (0..200)
            .map(|i| PredictionRecord {
                y: (i % 2) as u8,
                yhat: ((i / 2) % 2) as u8,
                a: ((i / 4) % 2) as u8,
            })
            .collect();
        let keep = MixingRates {
            group1: GroupMix { p11: 1.0, p10: 0.0 },
            group0: GroupMix { p11: 1.0, p10: 0.0 },
        };
        assert_eq!(apply_mixing(&records, &keep, 7), records);
        let flip = MixingRates {
            group1: GroupMix { p11: 0.0, p10: 1.0 },
            group0: GroupMix { p11: 0.0, p10: 1.0 },
        };
        let flipped = apply_mixing(&records, &flip, 7);
        assert!(flipped
            .iter()
            .zip(&records)
            .all(|(f, r)| f.yhat == 1 - r.yhat));
    }

    #[test]
    fn apply_mixing_deterministic_and_order_independent() {
        let records: Vec<PredictionRecord> = (0..500)
            .map(|i| PredictionRecord {
                y: (i % 2) as u8,
                yhat: ((i / 3) % 2) as u8,
                a: ((i / 7) % 2) as u8,
            })
            .collect();
        let rates = MixingRates {
            group1: GroupMix { p11: 0.9, p10: 0.2 },
            group0: GroupMix { p11: 0.7, p10: 0.4 },
        };
        let once = apply_mixing(&records, &rates, 42);
        let twice = apply_mixing(&records, &rates, 42);
        assert_eq!(once, twice);
        let differently_seeded = apply_mixing(&records, &rates, 43);
        assert_ne!(once, differently_seeded);
    }

    #[test]
    fn empirical_rates_match_targets() {
        let n = 100_000usize;
        let records: Vec<PredictionRecord> = (0..n)
            .map(|i| PredictionRecord {
                y: (i & 1) as u8,
                yhat: ((i >> 1) & 1) as u8,
                a: ((i >> 2) & 1) as u8,
            })
            .collect();
        let rates = MixingRates {
            group1: GroupMix { p11: 0.85, p10: 0.15 },
            group0: GroupMix { p11: 0.6, p10: 0.3 },
        };
        let out = apply_mixing(&records, &rates, 11);
        for a in [0u8, 1] {
            for yhat in [0u8, 1] {
                let bucket: Vec<_> = records
                    .iter()
                    .zip(&out)
                    .filter(|(r, _)| r.a == a && r.yhat == yhat)
                    .collect();
                let k = bucket.iter().filter(|(_, o)| o.yhat == 1).count() as f64;
                let nb = bucket.len() as f64;
                let mix = rates.group(a);
                let p = if yhat == 1 { mix.p11 } else { mix.p10 };
                let sigma = (p * (1.0 - p) / nb).sqrt();
                assert!(
                    (k / nb - p).abs() <= 4.0 * sigma,
                    "group {a} yhat {yhat}: {} vs {p}",
                    k / nb
                );
            }
        }
    }
}
