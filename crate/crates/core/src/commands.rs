//! The experiment driver behind the CLI subcommands: scenario generation,
//! strategy runs, report aggregation, and the built-in verification oracles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, LayerSpec, Network};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gwr::{GammaGwrConfig, GammaGwrNet};
use crate::metrics::{average_accuracy, first_task_retention, RunRecord};
use crate::oracle;
use crate::reg::SIState;
use crate::runner::{metrics_csv, run_scenario};
use crate::stream::{build_scenario, Scenario};

fn scenario_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("scenario_{seed}.json"))
}

fn manifest_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("manifest_{seed}.json"))
}

/// Build and persist one scenario per seed: a full scenario file (examples
/// included) and the manifest view. Byte-deterministic per (config, seed).
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for &seed in &cfg.scenario.seeds {
        let dataset = cfg.build_dataset(seed)?;
        let scenario = build_scenario(
            &dataset,
            cfg.scenario.kind,
            cfg.scenario.content,
            cfg.scenario.n_batches,
            seed,
            cfg.scenario.test_fraction,
        )?;
        let sp = scenario_path(&dir, seed);
        std::fs::write(&sp, serde_json::to_string(&scenario)?)?;
        let mp = manifest_path(&dir, seed);
        std::fs::write(&mp, serde_json::to_string_pretty(&scenario.manifest())?)?;
        written.push(sp);
        written.push(mp);
    }
    Ok(written)
}

/// Artifacts of one completed run seed.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub record_path: PathBuf,
    pub csv_path: PathBuf,
    pub record: RunRecord,
}

/// Run the configured strategy over every generated seed scenario. Requires
/// `cmd_generate` outputs in the config's output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<RunArtifacts>> {
    cfg.validate()?;
    let kind = cfg.strategy.kind()?;
    let dir = cfg.resolved_output_dir();
    let mut artifacts = Vec::new();
    for &seed in &cfg.scenario.seeds {
        let sp = scenario_path(&dir, seed);
        if !sp.exists() {
            return Err(Error::config(format!(
                "scenario file {} not found; run `generate` first",
                sp.display()
            )));
        }
        let scenario: Scenario = serde_json::from_str(&std::fs::read_to_string(&sp)?)?;
        let record = run_scenario(&scenario, &cfg.strategy, seed)?;
        let stem = kind.file_stem();
        let record_path = dir.join(format!("run_{stem}_{seed}.json"));
        std::fs::write(&record_path, serde_json::to_string(&record)?)?;
        let csv_path = dir.join(format!("metrics_{stem}_{seed}.csv"));
        std::fs::write(&csv_path, metrics_csv(&record))?;
        artifacts.push(RunArtifacts {
            record_path,
            csv_path,
            record,
        });
    }
    Ok(artifacts)
}

/// Per-strategy aggregate series across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    pub avg_accuracy_mean: Vec<f64>,
    pub avg_accuracy_std: Vec<f64>,
    pub first_retention_mean: Vec<f64>,
    pub first_retention_std: Vec<f64>,
    pub final_average_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub scenario_signature: String,
    pub strategies: BTreeMap<String, StrategySummary>,
}

fn series_stats(series: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = series[0].len();
    let count = series.len() as f64;
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for i in 0..n {
        let values: Vec<f64> = series.iter().map(|s| s[i]).collect();
        let m = values.iter().sum::<f64>() / count;
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean.push(m);
        std.push(var.sqrt());
    }
    (mean, std)
}

/// Load every run record found in the given directories.
pub fn load_run_records(dirs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for dir in dirs {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"))
            })
            .collect();
        entries.sort();
        for path in entries {
            let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            records.push(record);
        }
    }
    if records.is_empty() {
        return Err(Error::config("no run records found in the given directories"));
    }
    Ok(records)
}

/// Aggregate run records into a summary JSON and a plot-ready CSV. Refuses
/// mixed scenario shapes.
pub fn cmd_report(dirs: &[PathBuf], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let records = load_run_records(dirs)?;
    let signatures: BTreeMap<String, Vec<String>> = {
        let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in &records {
            m.entry(r.scenario.signature())
                .or_default()
                .push(format!("{} seed {}", r.strategy, r.seed));
        }
        m
    };
    if signatures.len() > 1 {
        let diff: Vec<String> = signatures
            .iter()
            .map(|(sig, runs)| format!("  {sig}: {}", runs.join(", ")))
            .collect();
        return Err(Error::config(format!(
            "refusing to aggregate mixed scenarios:\n{}",
            diff.join("\n")
        )));
    }
    let signature = signatures.keys().next().expect("non-empty").clone();

    let mut by_strategy: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        by_strategy.entry(r.strategy.clone()).or_default().push(r);
    }

    let mut strategies = BTreeMap::new();
    for (name, runs) in &by_strategy {
        let n_batches = runs[0].matrix.n_batches();
        for r in runs {
            if r.matrix.n_batches() != n_batches {
                return Err(Error::config(format!(
                    "strategy {name}: runs disagree on batch count"
                )));
            }
        }
        let avg_series: Vec<Vec<f64>> = runs
            .iter()
            .map(|r| {
                (0..n_batches)
                    .map(|i| average_accuracy(&r.matrix, i))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let retention_series: Vec<Vec<f64>> = runs
            .iter()
            .map(|r| first_task_retention(&r.matrix))
            .collect::<Result<_>>()?;
        let (avg_mean, avg_std) = series_stats(&avg_series);
        let (ret_mean, ret_std) = series_stats(&retention_series);
        strategies.insert(
            name.clone(),
            StrategySummary {
                n_runs: runs.len(),
                seeds: runs.iter().map(|r| r.seed).collect(),
                final_average_accuracy: *avg_mean.last().expect("at least one batch"),
                avg_accuracy_mean: avg_mean,
                avg_accuracy_std: avg_std,
                first_retention_mean: ret_mean,
                first_retention_std: ret_std,
            },
        );
    }

    let summary = ReportSummary {
        scenario_signature: signature,
        strategies,
    };
    std::fs::create_dir_all(out_dir)?;
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;

    let mut csv = String::from(
        "strategy,batch_i,avg_accuracy_mean,avg_accuracy_std,first_retention_mean,first_retention_std\n",
    );
    for (name, s) in &summary.strategies {
        for i in 0..s.avg_accuracy_mean.len() {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                name,
                i + 1,
                s.avg_accuracy_mean[i],
                s.avg_accuracy_std[i],
                s.first_retention_mean[i],
                s.first_retention_std[i]
            ));
        }
    }
    let csv_path = out_dir.join("report.csv");
    std::fs::write(&csv_path, csv)?;
    Ok((summary_path, csv_path))
}

/// One selftest check: name plus outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelftestCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<SelftestCheck>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Execute the built-in verification oracles: exhaustive BMU scans against
/// `find_bmu`, finite-difference gradient checks for the backbone and the
/// SI penalty, and the closed-form quadratic probe for the SI path integral.
pub fn cmd_selftest() -> Result<SelftestReport> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1BE);

    // BMU oracle
    let mut bmu_ok = true;
    let mut bmu_trials = 0;
    'bmu: for _ in 0..200 {
        let k = rng.random_range(0..4);
        let dim = rng.random_range(1..9);
        let mut net = GammaGwrNet::new(dim, GammaGwrConfig::with_context_depth(k))?;
        for _ in 0..rng.random_range(2..30) {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            net.train_step(&x, None)?;
        }
        for _ in 0..5 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = net.find_bmu(&x)?;
            let expect = oracle::gwr_bmu_scan(&net, &x)?;
            bmu_trials += 1;
            if (got.0, got.1) != expect {
                bmu_ok = false;
                break 'bmu;
            }
        }
    }
    checks.push(SelftestCheck {
        name: "bmu-exhaustive-scan".into(),
        passed: bmu_ok,
        detail: format!("{bmu_trials} randomized lookups"),
    });

    // backbone gradient oracle
    let mut grad_worst: f64 = 0.0;
    let mut grad_checked = 0;
    while grad_checked < 25 {
        let dims: Vec<usize> = (0..3).map(|_| rng.random_range(2..8)).collect();
        let net = Network::new(
            vec![
                LayerSpec::new(dims[0], dims[1], Activation::Rectifier),
                LayerSpec::new(dims[1], dims[2], Activation::Identity),
            ],
            rng.random(),
        )?;
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        if oracle::rectifier_margin(&net, &x)? < 1e-3 {
            continue;
        }
        let y = rng.random_range(0..dims[2]);
        grad_worst = grad_worst.max(oracle::max_network_gradient_error(&net, &x, y, 1e-5)?);
        grad_checked += 1;
    }
    checks.push(SelftestCheck {
        name: "backbone-gradient-check".into(),
        passed: grad_worst < 1e-4,
        detail: format!("max rel err {grad_worst:.2e} over {grad_checked} instances"),
    });

    // SI penalty gradient oracle
    let mut pen_worst: f64 = 0.0;
    for _ in 0..10 {
        let net = Network::new(
            vec![
                LayerSpec::new(3, 4, Activation::Rectifier),
                LayerSpec::new(4, 2, Activation::Identity),
            ],
            rng.random(),
        )?;
        let mut si = SIState::new(&net, 0.1, rng.random_range(0.1..2.0))?;
        for l in &mut si.omega.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = rng.random_range(0.0..2.0);
            }
        }
        let mut theta = net.params();
        for l in &mut theta.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        pen_worst = pen_worst.max(oracle::max_si_penalty_gradient_error(&si, &theta, 1e-5)?);
    }
    checks.push(SelftestCheck {
        name: "si-penalty-gradient-check".into(),
        passed: pen_worst < 1e-6,
        detail: format!("max rel err {pen_worst:.2e} over 10 instances"),
    });

    // SI quadratic path-integral probe
    let (path, decrease) = oracle::si_quadratic_probe(2.0, 0.5, 0.05, 40)?;
    let rel = (path - decrease).abs() / decrease;
    checks.push(SelftestCheck {
        name: "si-quadratic-path-integral".into(),
        passed: rel < 0.10,
        detail: format!("path {path:.6} vs loss decrease {decrease:.6} (rel {rel:.3})"),
    });

    Ok(SelftestReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn test_config(dir: &Path, strategy: &str) -> ExperimentConfig {
        let toml = format!(
            r#"
[scenario]
kind = "SIT"
content = "NC"
n_batches = 3
seeds = [0, 1]

[scenario.dataset]
source = "synthetic"
n_classes = 6
dim = 8
per_class = 20
spread = 0.4

[strategy]
name = "{strategy}"
hidden = [12, 8]
rm_size = 60

[output]
dir = "{}"
"#,
            dir.display()
        );
        ExperimentConfig::from_toml_str(&toml).unwrap()
    }

    #[test]
    fn generate_is_byte_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = test_config(&tmp.path().join("a"), "cwr+");
        cmd_generate(&cfg).unwrap();
        let first = std::fs::read(tmp.path().join("a/manifest_0.json")).unwrap();
        let scenario_first = std::fs::read(tmp.path().join("a/scenario_0.json")).unwrap();
        cmd_generate(&cfg).unwrap();
        let second = std::fs::read(tmp.path().join("a/manifest_0.json")).unwrap();
        let scenario_second = std::fs::read(tmp.path().join("a/scenario_0.json")).unwrap();
        assert_eq!(first, second);
        assert_eq!(scenario_first, scenario_second);
    }

    #[test]
    fn run_requires_generated_scenarios() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = test_config(&tmp.path().join("b"), "cwr+");
        let err = cmd_run(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("generate"));
    }

    #[test]
    fn run_emits_record_and_csv_per_seed() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = test_config(&tmp.path().join("c"), "cwr+");
        cmd_generate(&cfg).unwrap();
        let artifacts = cmd_run(&cfg).unwrap();
        assert_eq!(artifacts.len(), 2);
        for a in &artifacts {
            assert!(a.record_path.exists());
            assert!(a.csv_path.exists());
            let csv = std::fs::read_to_string(&a.csv_path).unwrap();
            assert!(csv.starts_with("strategy,seed,batch_i,test_batch_j,accuracy\n"));
            assert_eq!(csv.lines().count(), 1 + 6);
        }
    }

    #[test]
    fn report_aggregates_and_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let run_dir = tmp.path().join("d");
        let cfg = test_config(&run_dir, "cwr+");
        cmd_generate(&cfg).unwrap();
        cmd_run(&cfg).unwrap();
        let cfg2 = test_config(&run_dir, "naive");
        cmd_run(&cfg2).unwrap();

        let out = tmp.path().join("report");
        let (summary_path, csv_path) = cmd_report(std::slice::from_ref(&run_dir), &out).unwrap();
        let summary: ReportSummary =
            serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).unwrap();
        assert_eq!(summary.strategies.len(), 2);
        assert!(summary.strategies.contains_key("cwr+"));
        assert!(summary.strategies.contains_key("naive"));
        assert_eq!(summary.strategies["cwr+"].n_runs, 2);
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 3);

        let first = std::fs::read(&summary_path).unwrap();
        cmd_report(&[run_dir], &out).unwrap();
        let second = std::fs::read(&summary_path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn report_refuses_mixed_scenarios() {
        let tmp = tempfile::tempdir().unwrap();
        let dir_a = tmp.path().join("e1");
        let cfg_a = test_config(&dir_a, "cwr+");
        cmd_generate(&cfg_a).unwrap();
        cmd_run(&cfg_a).unwrap();

        let dir_b = tmp.path().join("e2");
        let mut cfg_b = test_config(&dir_b, "cwr+");
        cfg_b.scenario.n_batches = 2;
        cmd_generate(&cfg_b).unwrap();
        cmd_run(&cfg_b).unwrap();

        let err = cmd_report(&[dir_a, dir_b], &tmp.path().join("out")).unwrap_err();
        assert!(err.to_string().contains("mixed scenarios"), "{err}");
        let msg = err.to_string();
        assert!(msg.contains("batches=3") && msg.contains("batches=2"));
    }

    #[test]
    fn selftest_oracles_pass() {
        let report = cmd_selftest().unwrap();
        assert_eq!(report.checks.len(), 4);
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
