//! Command-line surface: reproducible runs over prediction files and
//! marginal specifications, with a manifest accompanying every output.

use clap::{Args, Parser, Subcommand, ValueEnum};
use fact::data::{self, SyntheticSpec, TrainConfig, Variant};
use fact::defs::{self, FairnessDef};
use fact::error::FactError;
use fact::frontier::{self, GridKind, SweepMode, SweepSpec};
use fact::incompat;
use fact::lafop::{self, Lambda, MsMode};
use fact::postprocess;
use fact::solver::SolverConfig;
use fact::tensor::{group_rates, FairnessConfusionTensor, Marginals};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fact", version, about = "Fairness analysis on confusion tensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct MarginalArgs {
    /// Inline marginals as `N,N1,M1,M0`; wins over --pred on conflict.
    #[arg(long)]
    marginals: Option<String>,
    /// Prediction CSV with header `y,yhat,a`.
    #[arg(long)]
    pred: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Tally a prediction file into the per-group confusion tensor.
    Tensor {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-definition fairness residuals of a prediction file.
    Gaps {
        #[arg(long)]
        defs: String,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decide whether a definition set is jointly satisfiable.
    Check {
        #[arg(long)]
        defs: String,
        #[command(flatten)]
        marginals: MarginalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the (epsilon, delta) frontier.
    Frontier {
        #[arg(long)]
        defs: String,
        #[command(flatten)]
        marginals: MarginalArgs,
        /// Grid as `eps:LO:HI:COUNT` or `lambda:LO:HI:COUNT`.
        #[arg(long, default_value = "lambda:1e-4:1e4:40")]
        grid: String,
        /// Restrict to tensors reachable from --pred by post-processing.
        #[arg(long)]
        ms: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single solve with one fairness weight per definition.
    Mlafop {
        #[arg(long)]
        defs: String,
        /// Comma-separated weights, one per definition.
        #[arg(long)]
        lambdas: String,
        #[command(flatten)]
        marginals: MarginalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repair a classifier's predictions by randomized label mixing.
    Postprocess {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "EOd")]
        defs: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the two-Gaussian synthetic dataset.
    Synth {
        /// U for an independent protected attribute, B for feature-linked.
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 20000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    args: Vec<String>,
    seeds: Vec<u64>,
    version: String,
    inputs: Vec<InputDigest>,
}

impl RunManifest {
    fn new(subcommand: &str) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            args: std::env::args().collect(),
            seeds: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: Vec::new(),
        }
    }

    fn add_input(&mut self, path: &Path) -> Result<(), FactError> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        });
        Ok(())
    }

    /// Next to the output file when there is one, otherwise on stderr so
    /// stdout stays machine-readable.
    fn emit(&self, out: Option<&Path>) -> Result<(), FactError> {
        let body = serde_json::to_string_pretty(self)?;
        match out {
            Some(p) => {
                let mut mp = p.as_os_str().to_owned();
                mp.push(".manifest.json");
                std::fs::write(PathBuf::from(mp), body)?;
            }
            None => eprintln!("{body}"),
        }
        Ok(())
    }
}

fn write_output(out: Option<&Path>, body: &str) -> Result<(), FactError> {
    match out {
        Some(p) => std::fs::write(p, body)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body.as_bytes())?;
            if !body.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn parse_inline_marginals(s: &str) -> Result<Marginals, FactError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| FactError::InvalidParameter(format!("marginals must be `N,N1,M1,M0`, got `{s}`")))?;
    let [n, n1, m1, m0] = parts[..] else {
        return Err(FactError::InvalidParameter(format!(
            "marginals must have 4 fields `N,N1,M1,M0`, got {} in `{s}`",
            parts.len()
        )));
    };
    if n1 >= n {
        return Err(FactError::InvalidParameter(format!(
            "group 1 size {n1} must be smaller than the total {n}"
        )));
    }
    Marginals::new(n1, m1, n - n1, m0)
}

/// Inline marginals win over a prediction file, with a warning.
fn resolve_marginals(
    args: &MarginalArgs,
    manifest: &mut RunManifest,
) -> Result<(Marginals, Option<FairnessConfusionTensor>), FactError> {
    let tensor = match &args.pred {
        Some(p) => {
            manifest.add_input(p)?;
            let records = data::load_predictions_csv(p)?;
            Some(FairnessConfusionTensor::from_predictions(records)?)
        }
        None => None,
    };
    match (&args.marginals, &tensor) {
        (Some(s), t) => {
            let m = parse_inline_marginals(s)?;
            if let Some(t) = t {
                if (t.marginals().n - m.n).abs() > 0.5
                    || (t.marginals().n1 - m.n1).abs() > 0.5
                    || (t.marginals().m1 - m.m1).abs() > 0.5
                    || (t.marginals().m0 - m.m0).abs() > 0.5
                {
                    eprintln!(
                        "warning: inline marginals differ from {}; using the inline values",
                        args.pred.as_ref().unwrap().display()
                    );
                }
            }
            Ok((m, tensor))
        }
        (None, Some(t)) => Ok((*t.marginals(), tensor.clone())),
        (None, None) => Err(FactError::InvalidParameter(
            "provide --marginals N,N1,M1,M0 or --pred file.csv".into(),
        )),
    }
}

fn parse_grid(s: &str) -> Result<(GridKind, f64, f64, usize), FactError> {
    let bad = || FactError::InvalidParameter(format!("grid must be `eps:LO:HI:COUNT` or `lambda:LO:HI:COUNT`, got `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    let [kind, lo, hi, count] = parts[..] else { return Err(bad()) };
    let kind = match kind {
        "eps" | "epsilon" => GridKind::EpsilonLog,
        "lambda" => GridKind::LambdaLog,
        _ => return Err(bad()),
    };
    Ok((
        kind,
        lo.parse().map_err(|_| bad())?,
        hi.parse().map_err(|_| bad())?,
        count.parse().map_err(|_| bad())?,
    ))
}

fn frontier_csv(curve: &frontier::FrontierCurve) -> String {
    let mut s = String::from("epsilon,delta,error_rate,control_value,status,gap_norm\n");
    for p in &curve.points {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.epsilon, p.delta, p.error_rate, p.control_value, p.status, p.gap_norm
        ));
    }
    s
}

fn run(cli: Cli) -> Result<(), FactError> {
    let cfg = SolverConfig::default();
    match cli.command {
        Command::Tensor { pred, format, out } => {
            let mut manifest = RunManifest::new("tensor");
            manifest.add_input(&pred)?;
            let records = data::load_predictions_csv(&pred)?;
            let t = FairnessConfusionTensor::from_predictions(records)?;
            let body = match format {
                Format::Json => {
                    #[derive(Serialize)]
                    struct TensorOut<'a> {
                        counts: &'a [f64; 8],
                        marginals: &'a Marginals,
                        rates: fact::tensor::GroupRates,
                    }
                    serde_json::to_string_pretty(&TensorOut {
                        counts: t.counts(),
                        marginals: t.marginals(),
                        rates: group_rates(&t.z(), t.marginals()),
                    })?
                }
                Format::Csv => {
                    let names = ["tp1", "fn1", "fp1", "tn1", "tp0", "fn0", "fp0", "tn0"];
                    let mut s = String::from("cell,count\n");
                    for (name, c) in names.iter().zip(t.counts()) {
                        s.push_str(&format!("{name},{c}\n"));
                    }
                    s
                }
            };
            write_output(out.as_deref(), &body)?;
            manifest.emit(out.as_deref())?;
            eprintln!(
                "tallied {} records into the confusion tensor",
                t.marginals().n
            );
            Ok(())
        }
        Command::Gaps { defs: defs_s, pred, format, out } => {
            let mut manifest = RunManifest::new("gaps");
            manifest.add_input(&pred)?;
            let set = FairnessDef::parse_list(&defs_s)?;
            let records = data::load_predictions_csv(&pred)?;
            let t = FairnessConfusionTensor::from_predictions(records)?;
            let sys = defs::stack(&set, t.marginals())?;
            let report = defs::gap(&sys, &t.z());
            let body = match format {
                Format::Json => serde_json::to_string_pretty(&report)?,
                Format::Csv => {
                    let mut s = String::from("constraint,residual\n");
                    for (label, r) in report.linear.iter().chain(&report.quadratic) {
                        s.push_str(&format!("{label},{r}\n"));
                    }
                    s.push_str(&format!("aggregate,{}\n", report.aggregate));
                    s
                }
            };
            write_output(out.as_deref(), &body)?;
            manifest.emit(out.as_deref())?;
            eprintln!("aggregate fairness gap: {:.6e}", report.aggregate);
            Ok(())
        }
        Command::Check { defs: defs_s, marginals, out } => {
            let mut manifest = RunManifest::new("check");
            let set = FairnessDef::parse_list(&defs_s)?;
            let (m, _) = resolve_marginals(&marginals, &mut manifest)?;
            let body = if set.iter().any(FairnessDef::is_quadratic) {
                // quadratic members are decided at the calibration closed
                // form, which needs a scored definition in the set
                let report = incompat::calibration_set_conditions(&set, &m)?;
                eprintln!(
                    "{}: {}",
                    report.set_label,
                    if report.residual_compatible { "compatible" } else { "incompatible" }
                );
                serde_json::to_string_pretty(&report)?
            } else {
                let report = incompat::check_compat(&set, &m, &cfg)?;
                eprintln!(
                    "set is {}{}",
                    if report.compatible { "compatible" } else { "incompatible" },
                    report
                        .violated_condition
                        .as_deref()
                        .map(|c| format!(" (violated: {c})"))
                        .unwrap_or_default()
                );
                serde_json::to_string_pretty(&report)?
            };
            write_output(out.as_deref(), &body)?;
            manifest.emit(out.as_deref())?;
            Ok(())
        }
        Command::Frontier { defs: defs_s, marginals, grid, ms, format, out } => {
            let mut manifest = RunManifest::new("frontier");
            let set = FairnessDef::parse_list(&defs_s)?;
            let (m, tensor) = resolve_marginals(&marginals, &mut manifest)?;
            let (grid_kind, lo, hi, count) = parse_grid(&grid)?;
            let mode = if ms {
                let t = tensor.ok_or_else(|| {
                    FactError::InvalidParameter("--ms needs --pred for the base classifier".into())
                })?;
                SweepMode::ModelSpecific(t)
            } else {
                SweepMode::ModelAgnostic
            };
            let sys = defs::stack(&set, &m)?;
            let spec = SweepSpec { grid_kind, lo, hi, count, mode };
            let curve = frontier::sweep(&m, &sys, &spec, &cfg)?;
            let body = match format {
                Format::Json => serde_json::to_string_pretty(&curve)?,
                Format::Csv => frontier_csv(&curve),
            };
            write_output(out.as_deref(), &body)?;
            manifest.emit(out.as_deref())?;
            eprintln!(
                "{} grid points; smallest reachable gap {:.3e}",
                curve.points.len(),
                curve.truncated_at
            );
            Ok(())
        }
        Command::Mlafop { defs: defs_s, lambdas, marginals, out } => {
            let mut manifest = RunManifest::new("mlafop");
            let set = FairnessDef::parse_list(&defs_s)?;
            let weights: Vec<f64> = lambdas
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| {
                    FactError::InvalidParameter(format!("weights must be numeric, got `{lambdas}`"))
                })?;
            let (m, _) = resolve_marginals(&marginals, &mut manifest)?;
            let systems: Vec<_> = set
                .iter()
                .map(|d| defs::stack(std::slice::from_ref(d), &m))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&_> = systems.iter().collect();
            let sol = lafop::solve_mlafop(&m, &refs, &weights, &cfg)?;
            write_output(out.as_deref(), &serde_json::to_string_pretty(&sol)?)?;
            manifest.emit(out.as_deref())?;
            eprintln!(
                "error rate {:.6}, per-definition gaps {:?}",
                sol.error_rate, sol.system_residuals
            );
            Ok(())
        }
        Command::Postprocess { pred, defs: defs_s, out, seed } => {
            let mut manifest = RunManifest::new("postprocess");
            manifest.add_input(&pred)?;
            manifest.seeds.push(seed);
            let set = FairnessDef::parse_list(&defs_s)?;
            let records = data::load_predictions_csv(&pred)?;
            let base = FairnessConfusionTensor::from_predictions(records.clone())?;
            let sys = defs::stack(&set, base.marginals())?;
            let sol = lafop::solve_ms_lafop(&base, &sys, MsMode::Lambda(Lambda::Infinite), &cfg)?;
            let rates = postprocess::mixing_rates(&base, &sol.z_star)?;
            let repaired = postprocess::apply_mixing(&records, &rates, seed);
            let mut s = String::from("y,yhat,a,yhat_post\n");
            for (orig, new) in records.iter().zip(&repaired) {
                s.push_str(&format!("{},{},{},{}\n", orig.y, orig.yhat, orig.a, new.yhat));
            }
            write_output(Some(&out), &s)?;
            manifest.emit(Some(&out))?;
            eprintln!(
                "mixing rates: group1 (p11={:.4}, p10={:.4}), group0 (p11={:.4}, p10={:.4}); \
                 target error rate {:.6}",
                rates.group1.p11, rates.group1.p10, rates.group0.p11, rates.group0.p10,
                sol.error_rate
            );
            Ok(())
        }
        Command::Synth { variant, n, seed, out } => {
            let mut manifest = RunManifest::new("synth");
            manifest.seeds.push(seed);
            let variant = match variant.as_str() {
                "U" | "u" | "unbiased" => Variant::Unbiased,
                "B" | "b" | "biased" => Variant::Biased,
                other => {
                    return Err(FactError::InvalidParameter(format!(
                        "variant must be U or B, got `{other}`"
                    )))
                }
            };
            let ds = data::gen_synthetic(&SyntheticSpec { n, variant, seed })?;
            data::write_labeled_csv(&out, &ds)?;
            manifest.emit(Some(&out))?;
            // also report the baseline's behavior so a demo is one command
            let model = data::train_baseline(&ds, &TrainConfig::default())?;
            let preds = data::predictions(&ds, &model);
            let acc = preds.iter().filter(|p| p.y == p.yhat).count() as f64 / n as f64;
            eprintln!("wrote {n} rows to {}; baseline accuracy {acc:.4}", out.display());
            Ok(())
        }
    }
}

/// Bad arguments exit 2 like a parse failure; runtime domain failures
/// (infeasible systems, degenerate inputs, bad files) exit 1.
fn classify(e: &FactError) -> u8 {
    match e {
        FactError::UnknownDefinition(_)
        | FactError::InvalidParameter(_)
        | FactError::InvalidScores { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}
