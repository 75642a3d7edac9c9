//! Metrics, task-level folds, paired bootstrap contrasts with Holm control,
//! the per-read cost model, the runtime/cost frontier and KernelSHAP.

mod cost;
mod folds;
mod metrics;
mod shap;
mod stats;

pub use cost::{cost_per_read, pareto_frontier, CostModelParams, CostPoint, GPT41_METERED_COST};
pub use folds::{make_folds, FoldAssignment};
pub use metrics::{accuracy, auc, macro_auc, multilabel_metrics, p_at_r, recall_at_k, MultilabelMetrics};
pub use shap::{kernel_shap, ShapConfig, ShapResult};
pub use stats::{holm_bonferroni, mark_ceiling, paired_bootstrap_bca, BootstrapConfig, ContrastResult};

use crate::ranking::Ranking;
use crate::trace::LabeledTask;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("input is empty")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{tasks} tasks is too few for {folds}")]
    TooFewTasks { tasks: usize, folds: usize },
    #[error("p-value {0} outside [0, 1]")]
    PValue(f64),
    #[error("runtime must be non-negative, got {0}")]
    NegativeRuntime(f64),
    #[error("{0}")]
    Config(String),
    #[error("coalition system stayed singular after retries")]
    SingularShap,
    #[error("method `{method}` has no output for task {task_id} (fold {fold})")]
    MissingOutputs { method: String, task_id: String, fold: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-task rankings of one method, one map per sampling seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub name: String,
    pub seeds: Vec<BTreeMap<String, Ranking>>,
    /// Wall-clock seconds per decision, if measured.
    pub runtime_seconds: Option<f64>,
    /// Charge per decision when billed by a provider instead of modeled.
    pub metered_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub bootstrap: BootstrapConfig,
    pub holm_alpha: f64,
    pub ceiling: f64,
    pub cost: CostModelParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 3, 5],
            bootstrap: BootstrapConfig::default(),
            holm_alpha: 0.05,
            ceiling: 0.995,
            cost: CostModelParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    /// An app, or `ALL`.
    pub app: String,
    pub metric: String,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub metric: String,
    pub app: String,
    pub method_a: String,
    pub method_b: String,
    pub result: ContrastResult,
    /// Holm rejection within the metric and the interval excludes zero.
    pub significant: bool,
    pub ceiling: bool,
}

impl ContrastRow {
    /// Significant and not a ceiling artifact.
    pub fn dagger(&self) -> bool {
        self.significant && !self.ceiling
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub runtime_seconds: f64,
    pub cost: f64,
    pub metered: bool,
    /// Overall P@R.
    pub quality: f64,
    pub on_frontier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<String>,
    pub apps: Vec<String>,
    pub n_tasks: usize,
    pub n_folds: usize,
    pub metrics: Vec<MetricRow>,
    pub contrasts: Vec<ContrastRow>,
    pub costs: Vec<CostRow>,
}

pub const ALL: &str = "ALL";
pub const P_AT_R: &str = "P@R";

pub fn metric_names(ks: &[usize]) -> Vec<String> {
    std::iter::once(P_AT_R.to_string())
        .chain(ks.iter().map(|k| format!("Recall@{k}")))
        .collect()
}

/// Per-task metric values averaged over seeds, in `metric_names` order.
fn task_metrics(run: &MethodRun, task: &LabeledTask, ks: &[usize]) -> Option<Vec<f64>> {
    let g: BTreeSet<String> = task.relevant_tools.iter().cloned().collect();
    let mut sums = vec![0.0; ks.len() + 1];
    for seed in &run.seeds {
        let r = seed.get(&task.task_id)?;
        sums[0] += p_at_r(&g, r).ok()?;
        for (i, &k) in ks.iter().enumerate() {
            sums[i + 1] += recall_at_k(&g, r, k).ok()?;
        }
    }
    let n = run.seeds.len().max(1) as f64;
    Some(sums.into_iter().map(|s| s / n).collect())
}

/// Macro-averages every method's metrics over the test tasks of all folds,
/// attaches bootstrap intervals, contrasts the first method with each other
/// one per app (Holm within each metric), and adds cost rows.
pub fn run_evaluation(
    methods: &[MethodRun],
    tasks: &[LabeledTask],
    folds: &FoldAssignment,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if methods.is_empty() {
        return Err(EvalError::Empty);
    }
    let tasks: Vec<&LabeledTask> = tasks
        .iter()
        .filter(|t| folds.fold_of.contains_key(&t.task_id) && !t.relevant_tools.is_empty())
        .collect();
    if tasks.is_empty() {
        return Err(EvalError::Empty);
    }
    let names = metric_names(&config.ks);
    // values[method][task][metric]
    let mut values: Vec<Vec<Vec<f64>>> = Vec::new();
    for m in methods {
        let mut per = Vec::with_capacity(tasks.len());
        for t in &tasks {
            per.push(task_metrics(m, t, &config.ks).ok_or_else(|| EvalError::MissingOutputs {
                method: m.name.clone(),
                task_id: t.task_id.clone(),
                fold: folds.fold(&t.task_id).unwrap_or(0),
            })?);
        }
        values.push(per);
    }
    let apps: Vec<String> = tasks
        .iter()
        .map(|t| t.app.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let groups: Vec<(String, Vec<usize>)> = apps
        .iter()
        .map(|a| (a.clone(), (0..tasks.len()).filter(|&i| &tasks[i].app == a).collect()))
        .chain(std::iter::once((ALL.to_string(), (0..tasks.len()).collect())))
        .collect();

    let mut stream = config.bootstrap.stream;
    let mut next_config = || {
        let mut c = config.bootstrap.clone();
        c.stream = stream;
        stream += 1;
        c
    };
    let mut metrics = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        for (app, idx) in &groups {
            for (k, name) in names.iter().enumerate() {
                let xs: Vec<f64> = idx.iter().map(|&i| values[mi][i][k]).collect();
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                let (lo, hi) = if xs.len() >= 2 {
                    let r = paired_bootstrap_bca(&xs, &vec![0.0; xs.len()], &next_config())?;
                    (r.ci_lo, r.ci_hi)
                } else {
                    (mean, mean)
                };
                metrics.push(MetricRow {
                    method: m.name.clone(),
                    app: app.clone(),
                    metric: name.clone(),
                    mean,
                    ci_lo: lo,
                    ci_hi: hi,
                    n_tasks: xs.len(),
                });
            }
        }
    }

    let mut contrasts = Vec::new();
    for b in 1..methods.len() {
        for (k, name) in names.iter().enumerate() {
            let mut rows = Vec::new();
            for (app, idx) in groups.iter().filter(|g| g.0 != ALL) {
                let xa: Vec<f64> = idx.iter().map(|&i| values[0][i][k]).collect();
                let xb: Vec<f64> = idx.iter().map(|&i| values[b][i][k]).collect();
                if xa.len() < 2 {
                    continue;
                }
                let result = paired_bootstrap_bca(&xa, &xb, &next_config())?;
                let ma = xa.iter().sum::<f64>() / xa.len() as f64;
                let mb = xb.iter().sum::<f64>() / xb.len() as f64;
                rows.push(ContrastRow {
                    metric: name.clone(),
                    app: app.clone(),
                    method_a: methods[0].name.clone(),
                    method_b: methods[b].name.clone(),
                    result,
                    significant: false,
                    ceiling: mark_ceiling(ma, mb, config.ceiling),
                });
            }
            let ps: Vec<f64> = rows.iter().map(|r| r.result.p_value).collect();
            let reject = holm_bonferroni(&ps, config.holm_alpha)?;
            for (r, rej) in rows.iter_mut().zip(reject) {
                r.significant = rej && r.result.excludes_zero();
            }
            contrasts.extend(rows);
        }
    }

    let mut costs = Vec::new();
    for m in methods {
        let quality = metrics
            .iter()
            .find(|r| r.method == m.name && r.app == ALL && r.metric == P_AT_R)
            .map(|r| r.mean)
            .unwrap_or(0.0);
        match (m.runtime_seconds, m.metered_cost) {
            (Some(t), Some(c)) => costs.push(CostRow {
                method: m.name.clone(),
                runtime_seconds: t,
                cost: c,
                metered: true,
                quality,
                on_frontier: false,
            }),
            (Some(t), None) => costs.push(CostRow {
                method: m.name.clone(),
                runtime_seconds: t,
                cost: cost_per_read(t, &config.cost)?,
                metered: false,
                quality,
                on_frontier: false,
            }),
            _ => {}
        }
    }
    let points: Vec<CostPoint> = costs
        .iter()
        .map(|c| CostPoint {
            method: c.method.clone(),
            runtime_seconds: c.runtime_seconds,
            cost: c.cost,
            quality: c.quality,
        })
        .collect();
    for i in pareto_frontier(&points) {
        costs[i].on_frontier = true;
    }
    Ok(EvalReport {
        methods: methods.iter().map(|m| m.name.clone()).collect(),
        apps,
        n_tasks: tasks.len(),
        n_folds: folds.n_folds,
        metrics,
        contrasts,
        costs,
    })
}

/// Violations of the report's structural invariants; empty when sound.
pub fn check_invariants(report: &EvalReport) -> Vec<String> {
    let mut out = Vec::new();
    for m in &report.metrics {
        if !(0.0..=1.0).contains(&m.mean) {
            out.push(format!("{} {} {}: mean {} outside [0, 1]", m.method, m.app, m.metric, m.mean));
        }
        if !(m.ci_lo <= m.mean && m.mean <= m.ci_hi) {
            out.push(format!("{} {} {}: mean outside its interval", m.method, m.app, m.metric));
        }
    }
    for c in &report.contrasts {
        let r = &c.result;
        if !(r.ci_lo <= r.mean_diff && r.mean_diff <= r.ci_hi) {
            out.push(format!("{} {}: contrast mean outside its interval", c.metric, c.app));
        }
        if c.significant && !r.excludes_zero() {
            out.push(format!("{} {}: significant contrast whose interval covers 0", c.metric, c.app));
        }
    }
    let frontier: Vec<&CostRow> = report.costs.iter().filter(|c| c.on_frontier).collect();
    for a in &frontier {
        for b in &frontier {
            let dominates = b.runtime_seconds <= a.runtime_seconds
                && b.cost <= a.cost
                && (b.runtime_seconds < a.runtime_seconds || b.cost < a.cost);
            if dominates {
                out.push(format!("frontier member {} is dominated by {}", a.method, b.method));
            }
        }
    }
    out
}

/// Markdown tables: one per metric with methods as rows and apps as columns,
/// `†` on significant contrasts and `‡` on ceiling contrasts.
pub fn render_markdown(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation\n");
    let _ = writeln!(s, "{} test tasks over {} folds.\n", report.n_tasks, report.n_folds);
    let metric_order: Vec<&str> = {
        let mut seen = Vec::new();
        for m in &report.metrics {
            if !seen.contains(&m.metric.as_str()) {
                seen.push(m.metric.as_str());
            }
        }
        seen
    };
    let cols: Vec<&str> = report.apps.iter().map(String::as_str).chain([ALL]).collect();
    for metric in metric_order {
        let _ = writeln!(s, "## {metric}\n");
        let _ = writeln!(s, "| method | {} |", cols.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(cols.len()));
        for method in &report.methods {
            let cells: Vec<String> = cols
                .iter()
                .map(|app| {
                    let Some(r) = report
                        .metrics
                        .iter()
                        .find(|r| &r.method == method && r.app == *app && r.metric == metric)
                    else {
                        return "n/a".into();
                    };
                    let mark = report
                        .contrasts
                        .iter()
                        .find(|c| &c.method_b == method && c.app == *app && c.metric == metric)
                        .map(|c| {
                            if c.ceiling {
                                "‡"
                            } else if c.significant {
                                "†"
                            } else {
                                ""
                            }
                        })
                        .unwrap_or("");
                    format!("{:.3} [{:.3}, {:.3}]{mark}", r.mean, r.ci_lo, r.ci_hi)
                })
                .collect();
            let _ = writeln!(s, "| {method} | {} |", cells.join(" | "));
        }
        let _ = writeln!(s);
    }
    if let Some(first) = report.methods.first() {
        let _ = writeln!(
            s,
            "† {first} differs significantly (BCa 95% interval excludes 0 after Holm correction across apps). \
             ‡ both methods at ceiling; not a superiority claim.\n"
        );
    }
    if !report.costs.is_empty() {
        let _ = writeln!(s, "## Cost per read\n");
        let _ = writeln!(s, "| method | runtime (s) | cost ($) | P@R | frontier |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for c in &report.costs {
            let _ = writeln!(
                s,
                "| {} | {:.6} | {:.3e}{} | {:.3} | {} |",
                c.method,
                c.runtime_seconds,
                c.cost,
                if c.metered { " (metered)" } else { "" },
                c.quality,
                if c.on_frontier { "yes" } else { "" }
            );
        }
    }
    s
}

pub fn write_frontier_csv(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "runtime_seconds", "cost", "metered", "quality", "on_frontier"])?;
    for c in &report.costs {
        w.write_record([
            c.method.clone(),
            format!("{}", c.runtime_seconds),
            format!("{:e}", c.cost),
            c.metered.to_string(),
            format!("{}", c.quality),
            c.on_frontier.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub feature: String,
    pub mean_abs: f64,
    /// Share of the total mean absolute attribution, in percent.
    pub percent: f64,
}

/// Mean absolute attribution per feature over explained instances, sorted
/// descending (ties by name).
pub fn summarize_shap(names: &[String], results: &[ShapResult]) -> Vec<ShapSummary> {
    let n = results.len().max(1) as f64;
    let means: Vec<f64> = (0..names.len())
        .map(|j| results.iter().map(|r| r.attributions[j].abs()).sum::<f64>() / n)
        .collect();
    let total: f64 = means.iter().sum();
    let mut out: Vec<ShapSummary> = names
        .iter()
        .zip(&means)
        .map(|(f, &m)| ShapSummary {
            feature: f.clone(),
            mean_abs: m,
            percent: if total > 0.0 { 100.0 * m / total } else { 0.0 },
        })
        .collect();
    out.sort_by(|a, b| b.mean_abs.total_cmp(&a.mean_abs).then(a.feature.cmp(&b.feature)));
    out
}

pub fn write_shap_csv(path: &Path, rows: &[ShapSummary]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "mean_abs_attribution", "percent"])?;
    for r in rows {
        w.write_record([r.feature.clone(), format!("{}", r.mean_abs), format!("{:.2}", r.percent)])?;
    }
    w.flush()?;
    Ok(())
}
