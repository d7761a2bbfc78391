//! Dataset generation, CSV ingestion, and a small logistic baseline so
//! end-to-end runs need no external ML stack.

use crate::error::{FactError, Result};
use crate::tensor::PredictionRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Protected attribute drawn independently of features and label.
    Unbiased,
    /// Protected attribute encoded in the first feature's sign.
    Biased,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub variant: Variant,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub x: Vec<f64>,
    pub y: u8,
    pub a: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub feature_names: Vec<String>,
    pub records: Vec<LabeledRecord>,
}

// lower Cholesky factor of a symmetric 2x2 [[a, b], [b, c]]
fn chol2(a: f64, b: f64, c: f64) -> [f64; 3] {
    let l11 = a.sqrt();
    let l21 = b / l11;
    [l11, l21, (c - l21 * l21).sqrt()]
}

/// Two overlapping Gaussian classes with a binary protected attribute.
/// Standard normals come from the ziggurat sampler of `rand_distr`
/// driven by ChaCha8, so output is stable across runs and platforms.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.n == 0 {
        return Err(FactError::EmptyDataset);
    }
    let pos = (chol2(5.0, 1.0, 5.0), [2.0, 2.0]);
    let neg = (chol2(10.0, 1.0, 3.0), [-2.0, -2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let y = u8::from(rng.gen_bool(0.5));
        let (l, mu) = if y == 1 { &pos } else { &neg };
        let (u0, u1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let x0 = mu[0] + l[0] * u0;
        let x1 = mu[1] + l[1] * u0 + l[2] * u1;
        let a = match spec.variant {
            Variant::Unbiased => u8::from(rng.gen_bool(0.5)),
            Variant::Biased => u8::from(x0 > 0.0),
        };
        records.push(LabeledRecord { x: vec![x0, x1], y, a });
    }
    Ok(LabeledDataset {
        feature_names: vec!["x0".into(), "x1".into()],
        records,
    })
}

fn parse_bit(field: &str, row: usize, col: &str) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(FactError::Schema {
            row,
            message: format!("column `{col}` must be 0 or 1, got `{other}`"),
        }),
    }
}

/// Read a prediction file with header `y,yhat,a`.
pub fn load_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let idx = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| FactError::Schema {
            row: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (iy, iyhat, ia) = (idx("y")?, idx("yhat")?, idx("a")?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let rec = rec?;
        out.push(PredictionRecord {
            y: parse_bit(&rec[iy], row, "y")?,
            yhat: parse_bit(&rec[iyhat], row, "yhat")?,
            a: parse_bit(&rec[ia], row, "a")?,
        });
    }
    Ok(out)
}

pub fn write_predictions_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["y", "yhat", "a"])?;
    for r in records {
        w.write_record([r.y.to_string(), r.yhat.to_string(), r.a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// How to read a labeled feature file: which columns hold the label and
/// the protected attribute, and how to binarize the latter. Every other
/// column is taken as a numeric feature.
#[derive(Debug, Clone)]
pub struct LabeledSchema {
    pub label: String,
    pub protected: String,
    /// Category-to-bit mapping, e.g. [("Male", 1), ("Female", 0)].
    /// Literal `0`/`1` values are accepted without a mapping.
    pub mapping: Vec<(String, u8)>,
}

impl LabeledSchema {
    fn binarize(&self, field: &str, row: usize) -> Result<u8> {
        let field = field.trim();
        if let Some((_, bit)) = self.mapping.iter().find(|(k, _)| k == field) {
            return Ok(*bit);
        }
        parse_bit(field, row, &self.protected)
    }
}

pub fn load_labeled_csv(path: &Path, schema: &LabeledSchema) -> Result<LabeledDataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| FactError::Schema {
            row: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let iy = find(&schema.label)?;
    let ia = find(&schema.protected)?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != iy && i != ia).collect();
    let feature_names: Vec<String> =
        feature_cols.iter().map(|&i| headers[i].to_string()).collect();
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let mut x = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            x.push(rec[c].trim().parse::<f64>().map_err(|_| FactError::Schema {
                row,
                message: format!("column `{}` must be numeric, got `{}`", &headers[c], &rec[c]),
            })?);
        }
        records.push(LabeledRecord {
            x,
            y: parse_bit(&rec[iy], row, &schema.label)?,
            a: schema.binarize(&rec[ia], row)?,
        });
    }
    Ok(LabeledDataset { feature_names, records })
}

pub fn write_labeled_csv(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ds.feature_names.clone();
    header.push("y".into());
    header.push("a".into());
    w.write_record(&header)?;
    for r in &ds.records {
        let mut rec: Vec<String> = r.x.iter().map(|v| format!("{v}")).collect();
        rec.push(r.y.to_string());
        rec.push(r.a.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// Logistic model over the features only; the protected column is never
/// read, so predictions are oblivious to group membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Baseline {
    /// Pr(y = 1 | x).
    pub fn score(&self, x: &[f64]) -> f64 {
        let t = self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        1.0 / (1.0 + (-t).exp())
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.score(x) >= 0.5)
    }
}

/// Full-batch gradient descent on the logistic loss; single-threaded and
/// deterministic given the seed.
pub fn train_baseline(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<Baseline> {
    if ds.records.is_empty() {
        return Err(FactError::EmptyDataset);
    }
    let dim = ds.records[0].x.len();
    let n = ds.records.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for r in &ds.records {
            let t = b + w.iter().zip(&r.x).map(|(wi, xi)| wi * xi).sum::<f64>();
            let p = 1.0 / (1.0 + (-t).exp());
            let e = p - f64::from(r.y);
            for (g, xi) in gw.iter_mut().zip(&r.x) {
                *g += e * xi;
            }
            gb += e;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g / n;
        }
        b -= cfg.lr * gb / n;
    }
    Ok(Baseline { weights: w, bias: b })
}

/// Score the dataset with a trained model, pairing each record's label
/// and group with the thresholded prediction.
pub fn predictions(ds: &LabeledDataset, model: &Baseline) -> Vec<PredictionRecord> {
    ds.records
        .iter()
        .map(|r| PredictionRecord {
            y: r.y,
            yhat: model.predict(&r.x),
            a: r.a,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(n: usize, variant: Variant, seed: u64) -> SyntheticSpec {
        SyntheticSpec { n, variant, seed }
    }

    #[test]
    fn unbiased_attribute_uncorrelated_with_label() {
        let ds = gen_synthetic(&spec(20000, Variant::Unbiased, 3)).unwrap();
        let n = ds.records.len() as f64;
        let (ma, my): (f64, f64) = (
            ds.records.iter().map(|r| f64::from(r.a)).sum::<f64>() / n,
            ds.records.iter().map(|r| f64::from(r.y)).sum::<f64>() / n,
        );
        let cov = ds
            .records
            .iter()
            .map(|r| (f64::from(r.a) - ma) * (f64::from(r.y) - my))
            .sum::<f64>()
            / n;
        let corr = cov / (ma * (1.0 - ma) * my * (1.0 - my)).sqrt();
        assert!(corr.abs() <= 3.0 / n.sqrt(), "corr {corr}");
    }

    #[test]
    fn biased_attribute_separates_base_rates() {
        let ds = gen_synthetic(&spec(20000, Variant::Biased, 3)).unwrap();
        let rate = |group: u8| {
            let rows: Vec<_> = ds.records.iter().filter(|r| r.a == group).collect();
            rows.iter().map(|r| f64::from(r.y)).sum::<f64>() / rows.len() as f64
        };
        let (b1, b0) = (rate(1), rate(0));
        assert!(b1 - b0 > 0.3, "base rates too close: {b1} vs {b0}");
        // positives concentrate around (2, 2), so group 1 is the larger one
        assert!(ds.records.iter().filter(|r| r.a == 1).count() > ds.records.len() / 2);
    }

    #[test]
    fn sample_moments_match_generating_parameters() {
        let ds = gen_synthetic(&spec(40000, Variant::Unbiased, 5)).unwrap();
        for (label, mean, var) in [(1u8, 2.0, 5.0f64), (0, -2.0, 10.0)] {
            let xs: Vec<f64> =
                ds.records.iter().filter(|r| r.y == label).map(|r| r.x[0]).collect();
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            assert!((m - mean).abs() <= 4.0 * var.sqrt() / n.sqrt(), "mean {m} vs {mean}");
            assert!((v - var).abs() <= 0.5, "var {v} vs {var}");
        }
    }

    #[test]
    fn generation_deterministic_given_seed() {
        let a = gen_synthetic(&spec(500, Variant::Biased, 11)).unwrap();
        let b = gen_synthetic(&spec(500, Variant::Biased, 11)).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&spec(500, Variant::Biased, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn predictions_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let records = vec![
            PredictionRecord { y: 1, yhat: 0, a: 1 },
            PredictionRecord { y: 0, yhat: 0, a: 0 },
            PredictionRecord { y: 1, yhat: 1, a: 0 },
        ];
        write_predictions_csv(&path, &records).unwrap();
        assert_eq!(load_predictions_csv(&path).unwrap(), records);
    }

    #[test]
    fn labeled_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = gen_synthetic(&spec(100, Variant::Biased, 2)).unwrap();
        write_labeled_csv(&path, &ds).unwrap();
        let schema = LabeledSchema {
            label: "y".into(),
            protected: "a".into(),
            mapping: vec![],
        };
        let back = load_labeled_csv(&path, &schema).unwrap();
        assert_eq!(back.feature_names, ds.feature_names);
        assert_eq!(back.records.len(), ds.records.len());
        for (r1, r2) in ds.records.iter().zip(&back.records) {
            assert_eq!((r1.y, r1.a), (r2.y, r2.a));
            for (x1, x2) in r1.x.iter().zip(&r2.x) {
                assert_abs_diff_eq!(x1, x2, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn categorical_protected_column_mapped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adult.csv");
        std::fs::write(
            &path,
            "age,hours,sex,income\n39,40,Male,0\n28,38,Female,1\n45,50,Female,0\n",
        )
        .unwrap();
        let schema = LabeledSchema {
            label: "income".into(),
            protected: "sex".into(),
            mapping: vec![("Male".into(), 1), ("Female".into(), 0)],
        };
        let ds = load_labeled_csv(&path, &schema).unwrap();
        assert_eq!(ds.feature_names, vec!["age", "hours"]);
        assert_eq!(
            ds.records.iter().map(|r| r.a).collect::<Vec<_>>(),
            vec![1, 0, 0]
        );
        assert_eq!(ds.records[1].y, 1);
        assert_eq!(ds.records[2].x, vec![45.0, 50.0]);
    }

    #[test]
    fn malformed_row_cited_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "y,yhat,a\n1,0,1\n1,maybe,0\n").unwrap();
        match load_predictions_csv(&path) {
            Err(FactError::Schema { row, message }) => {
                assert_eq!(row, 3);
                assert!(message.contains("yhat"));
            }
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cols.csv");
        std::fs::write(&path, "y,pred,a\n1,0,1\n").unwrap();
        assert!(matches!(
            load_predictions_csv(&path),
            Err(FactError::Schema { row: 1, .. })
        ));
    }

    #[test]
    fn baseline_separates_a_linear_toy_set() {
        let records: Vec<LabeledRecord> = (0..40)
            .map(|i| {
                let v = if i % 2 == 0 { 3.0 } else { -3.0 };
                LabeledRecord {
                    x: vec![v, v * 0.5],
                    y: u8::from(v > 0.0),
                    a: u8::from(i % 4 < 2),
                }
            })
            .collect();
        let ds = LabeledDataset {
            feature_names: vec!["x0".into(), "x1".into()],
            records,
        };
        let model = train_baseline(&ds, &TrainConfig { epochs: 2000, lr: 0.5, seed: 0 }).unwrap();
        let preds = predictions(&ds, &model);
        assert!(preds.iter().all(|p| p.y == p.yhat));
    }

    #[test]
    fn baseline_accuracy_on_synthetic_data() {
        let ds = gen_synthetic(&spec(10000, Variant::Biased, 7)).unwrap();
        let model = train_baseline(&ds, &TrainConfig::default()).unwrap();
        let preds = predictions(&ds, &model);
        let acc =
            preds.iter().filter(|p| p.y == p.yhat).count() as f64 / preds.len() as f64;
        assert!((0.85..=0.99).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn baseline_deterministic_and_oblivious_to_protected_column() {
        let ds = gen_synthetic(&spec(2000, Variant::Biased, 7)).unwrap();
        let cfg = TrainConfig::default();
        let m1 = train_baseline(&ds, &cfg).unwrap();
        let m2 = train_baseline(&ds, &cfg).unwrap();
        assert_eq!(m1, m2);
        // flipping every group tag must not move a single weight
        let mut flipped = ds.clone();
        for r in &mut flipped.records {
            r.a = 1 - r.a;
        }
        let m3 = train_baseline(&flipped, &cfg).unwrap();
        assert_eq!(m1, m3);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(
            gen_synthetic(&spec(0, Variant::Unbiased, 0)),
            Err(FactError::EmptyDataset)
        ));
        let ds = LabeledDataset {
            feature_names: vec![],
            records: vec![],
        };
        assert!(matches!(
            train_baseline(&ds, &TrainConfig::default()),
            Err(FactError::EmptyDataset)
        ));
    }
}
