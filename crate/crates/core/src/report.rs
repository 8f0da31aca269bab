//! CSV training logs, per-run metrics, and results-tree summaries.
//!
//! Every run directory gets fixed-name artifacts (`wm_train.csv`,
//! `policy_train.csv`, `metrics.csv`); [`write_report`] folds a tree of
//! finished runs into `report.csv`, `report.txt`, and `pca.csv` at the
//! results root. Regenerating a report over unchanged runs yields identical
//! bytes: directories are visited in sorted order and every float is
//! printed in shortest round-trip form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::dataset::{self, make_batch, Transition};
use crate::oracle::pca_project;
use crate::policy::PolicyLog;
use crate::stats;
use crate::world::{self, WorldLog};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "resolved.cfg";
pub const DATASET_FILE: &str = "dataset.logo";
pub const WM_FILE: &str = "wm.logo";
pub const SYNTHETIC_FILE: &str = "synthetic.logo";
pub const POLICY_FILE: &str = "policy.logo";
pub const WM_LOG_FILE: &str = "wm_train.csv";
pub const POLICY_LOG_FILE: &str = "policy_train.csv";

/// Rows in `pca.csv` are capped at this many validation transitions per
/// experiment so the file stays plot-sized.
pub const PCA_POINT_CAP: usize = 256;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset: {0}")]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("world model: {0}")]
    World(#[from] crate::world::WorldError),
    #[error("{0}")]
    Data(String),
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// World-model training curve: one row per step with the loss terms, plus
/// the validation state MSE joined on the steps where it was measured
/// (including a trailing validation-only row after the last update).
pub fn write_world_log(path: &Path, log: &WorldLog) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "predictive",
        "deductive",
        "deduce_reg",
        "uncertainty",
        "total",
        "val_mse",
    ])?;
    let val: BTreeMap<usize, f64> = log.val.iter().copied().collect();
    let mut last = None;
    for row in &log.steps {
        let v = val.get(&row.step).map(|m| fmt(*m)).unwrap_or_default();
        w.write_record([
            row.step.to_string(),
            fmt(row.predictive),
            fmt(row.deductive),
            fmt(row.deduce_reg),
            fmt(row.uncertainty),
            fmt(row.total),
            v,
        ])?;
        last = Some(row.step);
    }
    for (step, mse) in &log.val {
        if last.is_none_or(|s| *step > s) {
            w.write_record([
                step.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                fmt(*mse),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Policy training curve: one row per step, with the mean evaluation
/// return and the synthetic buffer size joined on the steps where they
/// were recorded (plus a trailing evaluation-only row).
pub fn write_policy_log(path: &Path, log: &PolicyLog) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "q_loss",
        "pi_loss",
        "bc_coef",
        "mean_abs_q",
        "eval_return",
        "buffer_size",
    ])?;
    let evals: BTreeMap<usize, f64> = log.evals.iter().copied().collect();
    let refreshes: BTreeMap<usize, usize> = log.refreshes.iter().copied().collect();
    let mut last = None;
    for row in &log.steps {
        w.write_record([
            row.step.to_string(),
            fmt(row.q_loss),
            fmt(row.pi_loss),
            fmt(row.bc_coef),
            fmt(row.mean_abs_q),
            evals.get(&row.step).map(|m| fmt(*m)).unwrap_or_default(),
            refreshes.get(&row.step).map(usize::to_string).unwrap_or_default(),
        ])?;
        last = Some(row.step);
    }
    for (step, mean) in &log.evals {
        if last.is_none_or(|s| *step > s) {
            w.write_record([
                step.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                fmt(*mean),
                String::new(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One scalar in a run's `metrics.csv`: `metric` names the quantity and
/// `index` distinguishes repeats (evaluation episodes, ensemble members).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub index: u64,
    pub value: f64,
}

pub fn eval_return_rows(returns: &[f64]) -> Vec<MetricRow> {
    returns
        .iter()
        .enumerate()
        .map(|(i, r)| MetricRow { metric: "eval_return".into(), index: i as u64, value: *r })
        .collect()
}

/// Writes rows sorted by (metric, index) so the file bytes do not depend
/// on insertion order.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<(), ReportError> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| (&a.metric, a.index).cmp(&(&b.metric, b.index)));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "index", "value"])?;
    for r in &rows {
        w.write_record([r.metric.clone(), r.index.to_string(), fmt(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, ReportError> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str, ReportError> {
            rec.get(i).ok_or_else(|| {
                ReportError::Data(format!("{}: short row `{}`", path.display(), rec.as_slice()))
            })
        };
        let bad = |what: &str| ReportError::Data(format!("{}: bad {what}", path.display()));
        rows.push(MetricRow {
            metric: field(0)?.to_string(),
            index: field(1)?.parse().map_err(|_| bad("index"))?,
            value: field(2)?.parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}

/// Replaces every existing row whose metric name appears in `rows`, keeps
/// the rest, and rewrites the file in canonical order.
pub fn merge_metrics(path: &Path, rows: &[MetricRow]) -> Result<(), ReportError> {
    let mut kept = if path.exists() { read_metrics(path)? } else { Vec::new() };
    kept.retain(|r| !rows.iter().any(|n| n.metric == r.metric));
    kept.extend_from_slice(rows);
    write_metrics(path, &kept)
}

/// One seed directory of an experiment; `returns` is None when
/// `metrics.csv` is absent or holds no evaluation rows.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub returns: Option<Vec<f64>>,
    /// `timing.csv` contents (metric name, seconds), when present.
    pub timing: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct ExperimentRuns {
    pub name: String,
    /// Resolved config of the first seed that has one.
    pub cfg: Option<ExperimentConfig>,
    pub seeds: Vec<SeedRun>,
}

/// The ablation arm a config describes, as it appears in report tables.
pub fn method_name(cfg: &ExperimentConfig) -> &'static str {
    if cfg.ablate.disable_buffer {
        "macql"
    } else if cfg.ablate.reward_penalty {
        "penalty"
    } else if cfg.ablate.mpc {
        "mpc"
    } else {
        "logo"
    }
}

fn sorted_dirs(root: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Walks `<root>/<experiment>/<seed>/` collecting whatever finished.
pub fn scan_results(root: &Path) -> Result<Vec<ExperimentRuns>, ReportError> {
    let mut out = Vec::new();
    for exp_dir in sorted_dirs(root)? {
        let name = exp_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut seed_dirs: Vec<(u64, PathBuf)> = sorted_dirs(&exp_dir)?
            .into_iter()
            .filter_map(|p| {
                let seed = p.file_name()?.to_string_lossy().parse().ok()?;
                Some((seed, p))
            })
            .collect();
        seed_dirs.sort_by_key(|(seed, _)| *seed);
        let mut cfg = None;
        let mut seeds = Vec::new();
        for (seed, dir) in seed_dirs {
            if cfg.is_none() {
                let path = dir.join(CONFIG_FILE);
                if path.exists() {
                    cfg = Some(ExperimentConfig::load(&path)?);
                }
            }
            let metrics = dir.join(METRICS_FILE);
            let returns = if metrics.exists() {
                let rows: Vec<f64> = read_metrics(&metrics)?
                    .into_iter()
                    .filter(|r| r.metric == "eval_return")
                    .map(|r| r.value)
                    .collect();
                (!rows.is_empty()).then_some(rows)
            } else {
                None
            };
            let timing_path = dir.join(TIMING_FILE);
            let timing = if timing_path.exists() {
                read_metrics(&timing_path)?.into_iter().map(|r| (r.metric, r.value)).collect()
            } else {
                Vec::new()
            };
            seeds.push(SeedRun { seed, dir, returns, timing });
        }
        out.push(ExperimentRuns { name, cfg, seeds });
    }
    Ok(out)
}

struct ReportRow {
    experiment: String,
    env: String,
    tier: String,
    method: String,
    horizon: String,
    n_seeds: usize,
    mean_return: Option<f64>,
    ci95: Option<f64>,
}

fn summarize(exp: &ExperimentRuns) -> ReportRow {
    let seed_means: Vec<f64> = exp
        .seeds
        .iter()
        .filter_map(|s| s.returns.as_ref().map(|r| stats::mean(r)))
        .collect();
    let (env, tier, method, horizon) = match &exp.cfg {
        Some(cfg) => (
            format!("particle{}", cfg.env.n_agents),
            cfg.data.tier.name().to_string(),
            method_name(cfg).to_string(),
            cfg.rollout.horizon.to_string(),
        ),
        None => Default::default(),
    };
    ReportRow {
        experiment: exp.name.clone(),
        env,
        tier,
        method,
        horizon,
        n_seeds: seed_means.len(),
        mean_return: (!seed_means.is_empty()).then(|| stats::mean(&seed_means)),
        ci95: (!seed_means.is_empty()).then(|| stats::ci95(&seed_means)),
    }
}

fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "experiment",
        "env",
        "tier",
        "method",
        "horizon",
        "n_seeds",
        "mean_return",
        "ci95",
    ])?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.env.clone(),
            r.tier.clone(),
            r.method.clone(),
            r.horizon.clone(),
            r.n_seeds.to_string(),
            r.mean_return.map(fmt).unwrap_or_default(),
            r.ci95.map(fmt).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn render_text(rows: &[ReportRow], runs: &[ExperimentRuns]) -> String {
    let mut txt = String::new();
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_else(|| "-".into());
    txt.push_str("returns (mean over seeds, 95% CI = 1.96*std/sqrt(n))\n");
    writeln!(
        txt,
        "{:<24} {:<10} {:<7} {:<8} {:>7} {:>7} {:>14} {:>14}",
        "experiment", "env", "tier", "method", "horizon", "seeds", "mean", "ci95"
    )
    .unwrap();
    for r in rows {
        writeln!(
            txt,
            "{:<24} {:<10} {:<7} {:<8} {:>7} {:>7} {:>14} {:>14}",
            r.experiment,
            if r.env.is_empty() { "-" } else { &r.env },
            if r.tier.is_empty() { "-" } else { &r.tier },
            if r.method.is_empty() { "-" } else { &r.method },
            if r.horizon.is_empty() { "-" } else { &r.horizon },
            r.n_seeds,
            opt(r.mean_return),
            opt(r.ci95),
        )
        .unwrap();
    }

    txt.push_str("\nhorizon sweep (same data ordered by rollout horizon)\n");
    let mut by_h: Vec<&ReportRow> = rows.iter().filter(|r| !r.horizon.is_empty()).collect();
    by_h.sort_by_key(|r| (r.horizon.parse::<usize>().unwrap_or(0), r.experiment.clone()));
    for r in &by_h {
        writeln!(
            txt,
            "H={:<4} {:<24} mean {:>14} ci95 {:>14}",
            r.horizon,
            r.experiment,
            opt(r.mean_return),
            opt(r.ci95)
        )
        .unwrap();
    }

    txt.push_str("\ninference timing (wall-clock seconds from timing.csv)\n");
    let mut any = false;
    for exp in runs {
        for seed in &exp.seeds {
            for (metric, secs) in &seed.timing {
                writeln!(txt, "{}/{} {metric} {}", exp.name, seed.seed, fmt(*secs)).unwrap();
                any = true;
            }
        }
    }
    if !any {
        txt.push_str("none recorded\n");
    }

    txt.push_str("\ngaps\n");
    let mut gaps = false;
    for exp in runs {
        if exp.cfg.is_none() {
            writeln!(txt, "{}: no resolved.cfg in any seed directory", exp.name).unwrap();
            gaps = true;
        }
        for seed in &exp.seeds {
            if seed.returns.is_none() {
                writeln!(txt, "{}/{}: missing evaluation metrics", exp.name, seed.seed).unwrap();
                gaps = true;
            }
        }
    }
    if !gaps {
        txt.push_str("none\n");
    }
    txt
}

/// True and model-predicted validation next states projected onto the top
/// two principal components, for the first seed of each experiment that
/// has both a dataset and a world model on disk. Both clouds are projected
/// in one shared basis fitted to their union.
fn write_pca_csv(path: &Path, runs: &[ExperimentRuns]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["experiment", "kind", "c1", "c2"])?;
    for exp in runs {
        let Some(cfg) = &exp.cfg else { continue };
        let Some(seed) = exp
            .seeds
            .iter()
            .find(|s| s.dir.join(DATASET_FILE).exists() && s.dir.join(WM_FILE).exists())
        else {
            continue;
        };
        let ds = dataset::load_for(&seed.dir.join(DATASET_FILE), &cfg.spec())?;
        let bundle = world::load(&seed.dir.join(WM_FILE))?;
        let (_, val) = dataset::split(&ds, cfg.data.val_fraction, seed.seed);
        let take = val.len().min(PCA_POINT_CAP);
        let refs: Vec<&Transition> = val.transitions[..take].iter().collect();
        let batch = make_batch(&cfg.spec(), &refs);
        let out = bundle.predict_from_batch(&batch);
        let sd = cfg.spec().state_dim;
        let mut points: Vec<Vec<f64>> = refs
            .iter()
            .map(|t| t.next_state.iter().map(|v| *v as f64).collect())
            .collect();
        for r in 0..take {
            points.push(out.next_state.data()[r * sd..][..sd].to_vec());
        }
        if points.len() < 3 {
            continue;
        }
        let pca = pca_project(&points, 2);
        for (i, p) in pca.projected.iter().enumerate() {
            let kind = if i < take { "true" } else { "predicted" };
            w.write_record([
                exp.name.clone(),
                kind.to_string(),
                p.first().map(|c| fmt(*c)).unwrap_or_default(),
                p.get(1).map(|c| fmt(*c)).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.csv`, `report.txt`, and `pca.csv` at the results root.
pub fn write_report(root: &Path) -> Result<(), ReportError> {
    let runs = scan_results(root)?;
    let rows: Vec<ReportRow> = runs.iter().map(summarize).collect();
    write_report_csv(&root.join("report.csv"), &rows)?;
    std::fs::write(root.join("report.txt"), render_text(&rows, &runs))?;
    write_pca_csv(&root.join("pca.csv"), &runs)?;
    Ok(())
}
