use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_dir_name, RunConfig, RunRecord, RUNS_FILE};
use crate::diagnostics::{center_mass_ratio, CENTER_MASS_RADIUS};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, OperatorKind};
use crate::io::{load_scene, read_json, write_json, Manifest};
use crate::metrics::{evaluate, MetricsReport};
use crate::physics::{FrequencyGrid, LorentzianParams};
use crate::result::{load_result, Method};
use crate::scene::SceneClass;

/// Metric columns in every table, in order.
pub const COLUMNS: [&str; 7] = ["gmsd", "hungarian_f1", "swd", "density_mse", "masked_ssim", "noise_mse", "center_mass"];

pub const CENTER_MASS_NOTE: &str = "center_mass = density mass within an 8 px disk around the grid center / total mass";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Ok,
    Missing,
    Failed,
}

impl SampleStatus {
    fn as_str(&self) -> &'static str {
        match self {
            SampleStatus::Ok => "ok",
            SampleStatus::Missing => "missing",
            SampleStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub scene: String,
    pub class: SceneClass,
    pub method: Method,
    pub operator: OperatorKind,
    pub seed: u64,
    pub status: SampleStatus,
    pub error: Option<String>,
    /// Values in `COLUMNS` order; empty unless the status is ok.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub operator: OperatorKind,
    /// A scene class, or `all`.
    pub class: String,
    pub n: usize,
    pub n_excluded: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub operator: OperatorKind,
    pub n_seeds: usize,
    pub n_samples: usize,
    pub n_failed: usize,
    pub mean: Vec<f64>,
    /// Half-width `1.96 sd / sqrt(n_seeds)` over seed-level means.
    pub ci: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub samples: Vec<SampleRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn score(dir: &Path, scene_dir: &Path, model: &ForwardModel) -> Result<(MetricsReport, f64)> {
    let r = load_result(dir)?;
    let (scene, _) = load_scene(scene_dir)?;
    let obs_map = scene.observed()?.noise_map();
    let pred_map = model.noise_map(r.operator, &r.rho_hat, &r.omega_hat)?;
    let report = evaluate(&r.rho_hat, &scene.rho_true, &pred_map, &obs_map)?;
    let cm = center_mass_ratio(&r.rho_hat, CENTER_MASS_RADIUS).unwrap_or(f64::NAN);
    Ok((report, cm))
}

/// Pairs each expected result with its ground truth and scores it.
/// Writes `metrics.json` next to each result plus `per_sample.csv` and `aggregate.csv`.
pub fn evaluate_results(dataset: &Path, results: &Path) -> Result<Evaluation> {
    let cfg = RunConfig::load(results)?;
    let manifest = Manifest::load(dataset)?;
    let model = ForwardModel::build(
        &manifest.geometry,
        FrequencyGrid::new(manifest.freqs.clone())?,
        LorentzianParams::new(manifest.gamma)?,
    )?;
    let runs: Vec<RunRecord> = read_json(&results.join(RUNS_FILE)).unwrap_or_default();
    let failures: HashMap<(String, Method, OperatorKind, u64), String> = runs
        .into_iter()
        .filter(|r| !r.ok)
        .map(|r| ((r.scene, r.method, r.operator, r.seed), r.error.unwrap_or_default()))
        .collect();
    let mut samples = Vec::new();
    for &method in &cfg.methods {
        for &op in &cfg.operators {
            for &seed in &cfg.seeds {
                for entry in &manifest.scenes {
                    let dir = results.join(run_dir_name(method, op, seed)).join(&entry.id);
                    let mut row = SampleRow {
                        scene: entry.id.clone(),
                        class: entry.class,
                        method,
                        operator: op,
                        seed,
                        status: SampleStatus::Missing,
                        error: failures.get(&(entry.id.clone(), method, op, seed)).cloned(),
                        values: Vec::new(),
                    };
                    if row.error.is_some() {
                        row.status = SampleStatus::Failed;
                    } else if dir.join("result.json").exists() {
                        match score(&dir, &dataset.join(&entry.dir), &model) {
                            Ok((report, cm)) => {
                                let mut values = report.values().to_vec();
                                values.push(cm);
                                write_json(
                                    &dir.join("metrics.json"),
                                    &serde_json::json!({ "metrics": report, "center_mass": cm, "center_mass_definition": CENTER_MASS_NOTE }),
                                )?;
                                row.status = SampleStatus::Ok;
                                row.values = values;
                            }
                            Err(e) => {
                                row.status = SampleStatus::Failed;
                                row.error = Some(format!("{}: {e}", e.code()));
                            }
                        }
                    }
                    samples.push(row);
                }
            }
        }
    }
    let aggregates = aggregate(&samples);
    write_samples_csv(&results.join("per_sample.csv"), &samples)?;
    write_aggregate_csv(&results.join("aggregate.csv"), &aggregates)?;
    Ok(Evaluation { samples, aggregates })
}

/// Mean and sample standard deviation over finite values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    (mean, sd)
}

fn column_stats(rows: &[&SampleRow]) -> (Vec<f64>, Vec<f64>) {
    (0..COLUMNS.len())
        .map(|c| mean_std(&rows.iter().map(|r| r.values[c]).collect::<Vec<_>>()))
        .unzip()
}

/// Mean and sample std per (method, operator, class), plus an `all` row per pair.
pub fn aggregate(samples: &[SampleRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(Method, OperatorKind)> = Vec::new();
    for s in samples {
        if !keys.contains(&(s.method, s.operator)) {
            keys.push((s.method, s.operator));
        }
    }
    let mut out = Vec::new();
    for (method, op) in keys {
        let group: Vec<&SampleRow> = samples.iter().filter(|s| s.method == method && s.operator == op).collect();
        let classes: Vec<Option<SceneClass>> = SceneClass::ALL
            .iter()
            .filter(|c| group.iter().any(|s| s.class == **c))
            .map(|c| Some(*c))
            .chain(std::iter::once(None))
            .collect();
        for class in classes {
            let members: Vec<&SampleRow> = group.iter().copied().filter(|s| class.is_none_or(|c| s.class == c)).collect();
            let ok: Vec<&SampleRow> = members.iter().copied().filter(|s| s.status == SampleStatus::Ok).collect();
            let (mean, std) = column_stats(&ok);
            out.push(AggregateRow {
                method,
                operator: op,
                class: class.map_or("all".to_string(), |c| c.to_string()),
                n: ok.len(),
                n_excluded: members.len() - ok.len(),
                mean,
                std,
            });
        }
    }
    out
}

/// Seed-level means per (method, operator), then mean and 95% CI across seeds.
pub fn summarize(samples: &[SampleRow], methods: &[Method], operators: &[OperatorKind], seeds: &[u64]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &method in methods {
        for &op in operators {
            let group: Vec<&SampleRow> = samples.iter().filter(|s| s.method == method && s.operator == op).collect();
            let per_seed: Vec<Vec<f64>> = seeds
                .iter()
                .map(|&seed| {
                    let ok: Vec<&SampleRow> =
                        group.iter().copied().filter(|s| s.seed == seed && s.status == SampleStatus::Ok).collect();
                    column_stats(&ok).0
                })
                .collect();
            let mut mean = Vec::new();
            let mut ci = Vec::new();
            for c in 0..COLUMNS.len() {
                let (m, sd) = mean_std(&per_seed.iter().map(|v| v[c]).collect::<Vec<_>>());
                let k = per_seed.iter().filter(|v| v[c].is_finite()).count() as f64;
                mean.push(m);
                ci.push(1.96 * sd / k.sqrt());
            }
            out.push(SummaryRow {
                method,
                operator: op,
                n_seeds: seeds.len(),
                n_samples: group.iter().filter(|s| s.status == SampleStatus::Ok).count(),
                n_failed: group.iter().filter(|s| s.status != SampleStatus::Ok).count(),
                mean,
                ci,
            });
        }
    }
    out
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6e}")
    } else {
        "nan".into()
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv output failed: {e}"))
}

fn write_samples_csv(path: &Path, rows: &[SampleRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["scene", "class", "method", "operator", "seed", "status"];
    header.extend(COLUMNS);
    header.push("error");
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.scene.clone(),
            r.class.to_string(),
            r.method.to_string(),
            r.operator.to_string(),
            r.seed.to_string(),
            r.status.as_str().to_string(),
        ];
        if r.values.is_empty() {
            rec.extend(COLUMNS.iter().map(|_| String::new()));
        } else {
            rec.extend(r.values.iter().map(|v| fmt(*v)));
        }
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["method", "operator", "class", "n", "n_excluded"].iter().map(|s| s.to_string()).collect();
    for c in COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.method.to_string(), r.operator.to_string(), r.class.clone(), r.n.to_string(), r.n_excluded.to_string()];
        for c in 0..COLUMNS.len() {
            rec.push(fmt(r.mean[c]));
            rec.push(fmt(r.std[c]));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `summary.csv` and an aligned `summary.txt` table.
pub fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    let path = dir.join("summary.csv");
    let mut w = csv_writer(&path)?;
    let mut header: Vec<String> = ["method", "operator", "n_seeds", "n_samples", "n_failed"].iter().map(|s| s.to_string()).collect();
    for c in COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_ci95"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.method.to_string(),
            r.operator.to_string(),
            r.n_seeds.to_string(),
            r.n_samples.to_string(),
            r.n_failed.to_string(),
        ];
        for c in 0..COLUMNS.len() {
            rec.push(fmt(r.mean[c]));
            rec.push(fmt(r.ci[c]));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut text = format!("{:<10} {:<4} {:>5} {:>6}", "method", "op", "ok", "failed");
    for c in COLUMNS {
        let _ = write!(text, " {c:>24}");
    }
    text.push('\n');
    for r in rows {
        let _ = write!(text, "{:<10} {:<4} {:>5} {:>6}", r.method.as_str(), r.operator.as_str(), r.n_samples, r.n_failed);
        for c in 0..COLUMNS.len() {
            let cell = format!("{:.4} ± {:.4}", r.mean[c], r.ci[c]);
            let _ = write!(text, " {cell:>24}");
        }
        text.push('\n');
    }
    let _ = writeln!(text, "\n{CENTER_MASS_NOTE}");
    std::fs::write(dir.join("summary.txt"), text).map_err(|e| Error::io(dir.join("summary.txt"), e))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::super::*;
    use super::*;

    fn row(seed: u64, class: &str, status: SampleStatus, v: f64) -> SampleRow {
        SampleRow {
            scene: "s".into(),
            class: class.parse().unwrap(),
            method: Method::Admm,
            operator: OperatorKind::F2,
            seed,
            values: if status == SampleStatus::Ok { vec![v; COLUMNS.len()] } else { Vec::new() },
            status,
            error: None,
        }
    }

    #[test]
    fn aggregate_recomputes_from_rows_and_counts_exclusions() {
        let rows = vec![
            row(0, "few/far", SampleStatus::Ok, 1.0),
            row(0, "few/far", SampleStatus::Ok, 3.0),
            row(0, "many/far", SampleStatus::Missing, 0.0),
            row(0, "many/far", SampleStatus::Ok, 5.0),
        ];
        let agg = aggregate(&rows);
        let all = agg.iter().find(|a| a.class == "all").unwrap();
        assert_eq!((all.n, all.n_excluded), (3, 1));
        assert!((all.mean[0] - 3.0).abs() < 1e-15);
        assert!((all.std[0] - 2.0).abs() < 1e-15);
        let few = agg.iter().find(|a| a.class == "few/far").unwrap();
        assert_eq!(few.mean[1], 2.0);
    }

    #[test]
    fn summary_uses_seed_level_means() {
        let rows = vec![
            row(0, "few/far", SampleStatus::Ok, 1.0),
            row(0, "few/far", SampleStatus::Ok, 3.0),
            row(1, "few/far", SampleStatus::Ok, 4.0),
        ];
        let s = summarize(&rows, &[Method::Admm], &[OperatorKind::F2], &[0, 1]);
        assert_eq!(s[0].mean[0], 3.0);
        // seed means 2 and 4: sample sd sqrt(2), so the half-width is 1.96
        assert!((s[0].ci[0] - 1.96).abs() < 1e-12);
    }

    #[test]
    fn missing_result_is_flagged_and_excluded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        generate(&cfg, &dir.path().join("d")).unwrap();
        solve_dataset(&cfg, &dir.path().join("d"), &dir.path().join("r"), 1, &|_| {}).unwrap();
        let victim = dir.path().join("r").join(run_dir_name(Method::Admm, OperatorKind::F1, 0)).join("scene_0001");
        std::fs::remove_dir_all(&victim).unwrap();
        std::fs::write(dir.path().join("r").join(RUNS_FILE), "[]").unwrap();
        let ev = evaluate_results(&dir.path().join("d"), &dir.path().join("r")).unwrap();
        assert_eq!(ev.samples.len(), 8);
        assert_eq!(ev.samples.iter().filter(|s| s.status == SampleStatus::Missing).count(), 1);
        let all = ev
            .aggregates
            .iter()
            .find(|a| a.method == Method::Admm && a.operator == OperatorKind::F1 && a.class == "all")
            .unwrap();
        assert_eq!((all.n, all.n_excluded), (1, 1));
        assert!(dir.path().join("r/per_sample.csv").exists());
    }
}
