use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::{read_metrics, EpochMetrics};
use crate::error::{FedError, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RATIO_FILE: &str = "ratios.csv";

/// Mean and standard error across seeds of one curve point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub strategy: String,
    pub epoch: u64,
    pub seeds: usize,
    pub mean_test_return: f64,
    pub se_test_return: f64,
    pub mean_train_return: f64,
    pub se_train_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioRow {
    pub strategy: String,
    pub run_id: String,
    pub reference: String,
    pub reference_run_id: String,
    pub epoch: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub ratios: Vec<RatioRow>,
}

/// Sample mean and `sd / sqrt(n)`; a single sample has zero error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

type Curve = BTreeMap<u64, Vec<(f64, f64)>>;

/// Agents are averaged within each seed first; seeds then give mean and error.
/// Rows are grouped by run id as well as strategy so different configurations
/// never merge.
pub fn summarize_rows(rows: &[EpochMetrics]) -> Summary {
    let mut per_seed: BTreeMap<(String, String, u64, u64), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = per_seed
            .entry((r.run_id.clone(), r.strategy.clone(), r.epoch, r.seed))
            .or_default();
        e.0 += r.avg_test_return;
        e.1 += r.avg_train_return;
        e.2 += 1;
    }
    let mut groups: BTreeMap<(String, String), Curve> = BTreeMap::new();
    for ((run, strat, epoch, _), (test, train, n)) in per_seed {
        groups
            .entry((run, strat))
            .or_default()
            .entry(epoch)
            .or_default()
            .push((test / n as f64, train / n as f64));
    }

    let mut out = Vec::new();
    for ((run_id, strategy), curve) in &groups {
        for (&epoch, points) in curve {
            let test: Vec<f64> = points.iter().map(|p| p.0).collect();
            let train: Vec<f64> = points.iter().map(|p| p.1).collect();
            let (mean_test_return, se_test_return) = mean_and_se(&test);
            let (mean_train_return, se_train_return) = mean_and_se(&train);
            out.push(SummaryRow {
                run_id: run_id.clone(),
                strategy: strategy.clone(),
                epoch,
                seeds: points.len(),
                mean_test_return,
                se_test_return,
                mean_train_return,
                se_train_return,
            });
        }
    }

    let mut ratios = Vec::new();
    for a in groups.keys() {
        for b in groups.keys().filter(|b| *b != a) {
            let mean_of = |key: &(String, String), epoch: u64| {
                out.iter()
                    .find(|r| (r.run_id.as_str(), r.strategy.as_str()) == (key.0.as_str(), key.1.as_str()) && r.epoch == epoch)
                    .map(|r| r.mean_test_return)
            };
            for &epoch in groups[a].keys() {
                if let (Some(x), Some(y)) = (mean_of(a, epoch), mean_of(b, epoch)) {
                    ratios.push(RatioRow {
                        strategy: a.1.clone(),
                        run_id: a.0.clone(),
                        reference: b.1.clone(),
                        reference_run_id: b.0.clone(),
                        epoch,
                        ratio: x / y,
                    });
                }
            }
        }
    }
    Summary { rows: out, ratios }
}

/// Final-epoch ratio of each pair of curves.
pub fn final_ratios(summary: &Summary) -> Vec<&RatioRow> {
    let mut last: BTreeMap<(&str, &str, &str, &str), &RatioRow> = BTreeMap::new();
    for r in &summary.ratios {
        let key = (r.strategy.as_str(), r.run_id.as_str(), r.reference.as_str(), r.reference_run_id.as_str());
        if last.get(&key).is_none_or(|prev| prev.epoch < r.epoch) {
            last.insert(key, r);
        }
    }
    last.into_values().collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Summarise metrics files (or run directories containing `metrics.csv`) and
/// write `summary.csv` and `ratios.csv` into `out_dir`.
pub fn summarize(inputs: &[PathBuf], out_dir: &Path) -> Result<Summary> {
    if inputs.is_empty() {
        return Err(FedError::InvalidArgument("summarize needs at least one metrics file".into()));
    }
    let mut rows = Vec::new();
    for p in inputs {
        let file = if p.is_dir() { p.join(super::run::METRICS_FILE) } else { p.clone() };
        rows.extend(read_metrics(&file)?);
    }
    let summary = summarize_rows(&rows);
    fs::create_dir_all(out_dir)?;
    write_csv(&out_dir.join(SUMMARY_FILE), &summary.rows)?;
    write_csv(&out_dir.join(RATIO_FILE), &summary.ratios)?;
    Ok(summary)
}
