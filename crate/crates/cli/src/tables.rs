use std::fmt::Write as _;

use gridcascade::metrics::EvalReport;
use gridcascade_model::{RoundReport, Variant};

type Metric = (&'static str, fn(&EvalReport) -> f64);

/// Metric columns in table order: name and accessor.
pub const METRICS: [Metric; 7] = [
    ("edge_pr_auc", |r| r.edge_pr_auc),
    ("node_pr_auc", |r| r.node_pr_auc),
    ("edge_f1", |r| r.edge_f1),
    ("node_f1", |r| r.node_f1),
    ("severity_f1", |r| r.severity_f1),
    ("dns_r2", |r| r.dns_r2),
    ("severity_balanced_accuracy", |r| r.severity_balanced_accuracy),
];

pub fn report_header() -> String {
    let names: Vec<&str> = METRICS.iter().map(|m| m.0).collect();
    format!("{},edge_threshold,node_threshold,n_samples", names.join(","))
}

pub fn report_row(r: &EvalReport) -> String {
    let values: Vec<String> = METRICS.iter().map(|m| m.1(r).to_string()).collect();
    format!("{},{},{},{}", values.join(","), r.thresholds[0], r.thresholds[1], r.n_samples)
}

pub fn per_round_csv(rows: &[RoundReport]) -> String {
    let mut out = String::from("round,active_samples,edge_positives,node_positives,edge_pr_auc,node_pr_auc,edge_f1,node_f1\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round, r.active_samples, r.edge_positives, r.node_positives, r.edge_pr_auc, r.node_pr_auc, r.edge_f1, r.node_f1
        )
        .expect("string write");
    }
    out
}

/// One trained model in an ablation sweep.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub report: EvalReport,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Seed-averaged metric of one variant; `None` when the variant did not run.
pub fn variant_mean(runs: &[RunResult], variant: Variant, metric: fn(&EvalReport) -> f64) -> Option<f64> {
    let values: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(|r| metric(&r.report)).collect();
    (!values.is_empty()).then(|| mean_std(&values).0)
}

fn variants_in(runs: &[RunResult]) -> Vec<Variant> {
    Variant::ALL.into_iter().filter(|v| runs.iter().any(|r| r.variant == *v)).collect()
}

pub fn runs_csv(runs: &[RunResult]) -> String {
    let mut out = format!("variant,seed,best_epoch,epochs,{}\n", report_header());
    for r in runs {
        writeln!(out, "{},{},{},{},{}", r.variant.label(), r.seed, r.best_epoch, r.epochs, report_row(&r.report)).expect("string write");
    }
    out
}

/// Seed mean and population standard deviation per variant and metric.
pub fn summary_csv(runs: &[RunResult]) -> String {
    let mut out = String::from("variant,seeds");
    for (name, _) in METRICS {
        write!(out, ",{name}_mean,{name}_std").expect("string write");
    }
    out.push('\n');
    for v in variants_in(runs) {
        let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
        write!(out, "{},{}", v.label(), mine.len()).expect("string write");
        for (_, f) in METRICS {
            let values: Vec<f64> = mine.iter().map(|r| f(&r.report)).collect();
            let (m, s) = mean_std(&values);
            write!(out, ",{m},{s}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Seed-mean difference `variant − full` per metric.
pub fn deltas_csv(runs: &[RunResult]) -> String {
    let mut out = String::from("variant");
    for (name, _) in METRICS {
        write!(out, ",delta_{name}").expect("string write");
    }
    out.push('\n');
    for v in variants_in(runs).into_iter().filter(|&v| v != Variant::Full) {
        write!(out, "{}", v.label()).expect("string write");
        for (_, f) in METRICS {
            let d = match (variant_mean(runs, v, f), variant_mean(runs, Variant::Full, f)) {
                (Some(a), Some(b)) => a - b,
                _ => f64::NAN,
            };
            write!(out, ",{d}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Cumulative component build-up from the MLP baseline to the full model.
pub const BUILDUP: [(&str, Variant); 4] = [
    ("mlp-baseline", Variant::MlpBaseline),
    ("+gnn-encoder", Variant::GnnOnly),
    ("+ode+jump", Variant::NoPhysics),
    ("+physics", Variant::Full),
];

pub fn buildup_csv(runs: &[RunResult]) -> String {
    let mut out = String::from("stage,variant,edge_pr_auc,dns_r2,delta_edge_pr_auc,delta_dns_r2\n");
    let mut prev: Option<(f64, f64)> = None;
    for (stage, v) in BUILDUP {
        let (Some(e), Some(d)) = (variant_mean(runs, v, |r| r.edge_pr_auc), variant_mean(runs, v, |r| r.dns_r2)) else {
            continue;
        };
        let (de, dd) = prev.map(|(pe, pd)| (e - pe, d - pd)).unwrap_or((0.0, 0.0));
        writeln!(out, "{stage},{},{e},{d},{de},{dd}", v.label()).expect("string write");
        prev = Some((e, d));
    }
    out
}
