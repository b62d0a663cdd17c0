//! Experiment execution: builds datasets, runs every configured run,
//! and emits CSV time series, JSON summaries, a sweep-level speedup
//! table, and plot-ready exports.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::config::{DataSource, ExperimentConfig, NamedRun, RunSpec};
use crate::data::{gen_gaussian_mixture, gen_teacher_regression, load_csv, Dataset};
use crate::error::{Error, Result};
use crate::model::Sample;
use crate::schedule::ScheduleKind;
use crate::train::{run, RunMetrics};

/// Closed-form throughput speedup of a strategy over the no-pipeline
/// baseline at the same M and B: 1, MB/(M+B-1), or M.
pub fn throughput_speedup(kind: ScheduleKind, m: usize, b: usize) -> f64 {
    match kind {
        ScheduleKind::NoPipeline => 1.0,
        ScheduleKind::Synchronous => (m * b) as f64 / (m + b - 1) as f64,
        ScheduleKind::Asynchronous => m as f64,
    }
}

/// Cycles with the pipeline fill/drain removed, for throughput ratios.
pub fn effective_cycles(kind: ScheduleKind, m: usize, total_cycles: u64) -> u64 {
    match kind {
        ScheduleKind::Asynchronous => total_cycles.saturating_sub(2 * m as u64 - 2),
        _ => total_cycles,
    }
}

/// One finished (or failed) run.
pub struct RunReport {
    pub name: String,
    pub spec: RunSpec,
    pub from_sweep: Option<String>,
    pub metrics: RunMetrics,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Value,
}

/// Everything an experiment produced.
pub struct ResultBundle {
    pub out_dir: PathBuf,
    pub reports: Vec<RunReport>,
    pub failures: Vec<(String, String)>,
    pub speedup_table: Vec<SpeedupRow>,
    /// Training-set size per run, for the epoch axis of plot exports.
    train_sizes: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SpeedupRow {
    pub run_name: String,
    pub baseline: String,
    pub schedule: String,
    pub stages: usize,
    pub micro_per_mini: usize,
    /// Closed-form density ratio vs the no-pipeline baseline.
    pub throughput_speedup: f64,
    /// Ledger-derived ratio (fill/drain subtracted for async).
    pub measured_speedup: f64,
    /// cycles_to_target(baseline) / cycles_to_target(run), when both
    /// runs reached the target.
    pub time_to_target_speedup: Option<f64>,
}

/// Build the run's dataset and held-out eval batch. Synthetic sources
/// draw `n + eval_batch` samples and split; CSV files must contain at
/// least `b_mini + eval_batch` rows.
pub fn build_data(spec: &RunSpec) -> Result<(Dataset, Vec<Sample>)> {
    let eval_n = spec.run.eval_batch;
    let full = match &spec.data {
        DataSource::Teacher { n, d, stages } => {
            gen_teacher_regression(spec.run.seed, n + eval_n, *d, *stages)
        }
        DataSource::Mixture { n, d, classes } => {
            gen_gaussian_mixture(spec.run.seed, n + eval_n, *d, *classes)?
        }
        DataSource::Csv { path, normalize } => load_csv(path, *normalize)?,
    };
    let (train, eval) = full.split_holdout(eval_n)?;
    Ok((train, eval.samples))
}

fn execute_run(named: &NamedRun) -> Result<RunMetrics> {
    let (train, eval) = build_data(&named.spec)?;
    named.spec.run.validate(&train)?;
    run(&named.spec.run, &train, &eval)
}

fn summary_json(named: &NamedRun, metrics: &RunMetrics) -> Value {
    let spec = &named.spec;
    let s = &metrics.summary;
    let cycles_to_target = target_cycles(spec, metrics);
    json!({
        "run_name": named.name,
        "schedule": spec.run.schedule.name(),
        "M": spec.run.num_stages(),
        "B": spec.run.micro_per_mini(),
        "tau": if spec.run.device.is_digital() { Value::Null } else { json!(spec.run.device.tau()) },
        "inv_tau": spec.run.device.inv_tau(),
        "alpha": spec.run.alpha,
        "seed": spec.run.seed,
        "b_mini": spec.run.b_mini,
        "b_micro": spec.run.b_micro,
        "noise_sigma": spec.run.noise_sigma,
        "updates_total": s.updates_total,
        "cycles_total": s.cycles_total,
        "samples_total": s.samples_total,
        "measured_density": s.measured_density,
        "cycles_to_target": cycles_to_target,
        "target_loss": spec.target_loss,
        "target_accuracy": spec.target_accuracy,
        "final_loss": s.final_loss,
        "final_accuracy": s.final_accuracy,
        "max_saturation_degree": s.max_saturation_degree,
        "saturation_events": s.saturation_events,
        "staleness_checks": metrics.staleness_checks,
        "amplification_S": s.amplification_s,
        "amplification_Sprime_u": s.amplification_s_prime_u,
        "amplification_S_linear": s.amplification_s_linear,
        "amp_u": s.amp_u,
    })
}

fn target_cycles(spec: &RunSpec, metrics: &RunMetrics) -> Option<u64> {
    if let Some(acc) = spec.target_accuracy {
        return metrics.cycles_to_target_accuracy(acc);
    }
    spec.target_loss.and_then(|t| metrics.cycles_to_target_loss(t))
}

fn write_series_csv(path: &Path, metrics: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))?;
    w.write_record([
        "update_k",
        "clock_cycle",
        "train_loss",
        "eval_loss",
        "grad_norm_sq",
        "accuracy",
        "max_weight_inf",
        "samples_done",
    ])
    .map_err(|e| Error::run(e.to_string()))?;
    for r in &metrics.records {
        w.write_record([
            r.update_k.to_string(),
            r.clock_cycle.to_string(),
            format!("{}", r.train_loss),
            format!("{}", r.eval_loss),
            format!("{}", r.grad_norm_sq),
            r.accuracy.map(|a| format!("{a}")).unwrap_or_default(),
            format!("{}", r.max_weight_inf),
            r.samples_done.to_string(),
        ])
        .map_err(|e| Error::run(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Run every configured run sequentially, writing `<name>.csv` and
/// `<name>.json` into `out_dir`, then the speedup table and bundle
/// summary. Per-run failures are recorded; the bundle reports partial
/// success.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, quiet: bool) -> Result<ResultBundle> {
    std::fs::create_dir_all(out_dir)?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut train_sizes = Vec::new();

    for named in &cfg.runs {
        match execute_run(named) {
            Ok(metrics) => {
                let csv_path = out_dir.join(format!("{}.csv", named.name));
                let summary_path = out_dir.join(format!("{}.json", named.name));
                write_series_csv(&csv_path, &metrics)?;
                let summary = summary_json(named, &metrics);
                std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
                if !quiet {
                    println!(
                        "run {}: {} updates, {} cycles, density {:.4}, final loss {:.6}{}",
                        named.name,
                        metrics.summary.updates_total,
                        metrics.summary.cycles_total,
                        metrics.summary.measured_density,
                        metrics.summary.final_loss,
                        metrics
                            .summary
                            .final_accuracy
                            .map(|a| format!(", accuracy {a:.4}"))
                            .unwrap_or_default()
                    );
                    if metrics.summary.saturation_events > 0 {
                        println!(
                            "  warning: {} saturation events (max degree {:.4})",
                            metrics.summary.saturation_events, metrics.summary.max_saturation_degree
                        );
                    }
                }
                let train_n = match &named.spec.data {
                    DataSource::Teacher { n, .. } | DataSource::Mixture { n, .. } => *n,
                    DataSource::Csv { .. } => metrics
                        .records
                        .last()
                        .map(|r| r.samples_done as usize)
                        .unwrap_or(0)
                        .max(1),
                };
                train_sizes.push(train_n);
                reports.push(RunReport {
                    name: named.name.clone(),
                    spec: named.spec.clone(),
                    from_sweep: named.from_sweep.clone(),
                    metrics,
                    csv_path,
                    summary_path,
                    summary,
                });
            }
            Err(e) => {
                if !quiet {
                    eprintln!("run {} FAILED: {e}", named.name);
                }
                failures.push((named.name.clone(), e.to_string()));
            }
        }
    }

    let speedup_table = build_speedup_table(&reports);
    let bundle = ResultBundle {
        out_dir: out_dir.to_path_buf(),
        reports,
        failures,
        speedup_table,
        train_sizes,
    };
    write_bundle_files(&bundle)?;
    Ok(bundle)
}

/// Group runs that differ only in schedule; within each group that has a
/// no-pipeline baseline, compute speedups.
fn build_speedup_table(reports: &[RunReport]) -> Vec<SpeedupRow> {
    let group_key = |r: &RunReport| -> String {
        let run = &r.spec.run;
        format!(
            "{:?}|{:?}|{:?}|tau={}|a={}|seed={}|len={:?}|b={}x{}|sigma={}|sweep={:?}",
            r.spec.data,
            run.stage_dims,
            run.loss,
            run.device.inv_tau(),
            run.alpha,
            run.seed,
            run.length,
            run.b_mini,
            run.b_micro,
            run.noise_sigma,
            r.from_sweep,
        )
    };
    let mut rows = Vec::new();
    let mut groups: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, r) in reports.iter().enumerate() {
        groups.entry(group_key(r)).or_default().push(i);
    }
    for idxs in groups.values() {
        let Some(&base_idx) = idxs
            .iter()
            .find(|&&i| reports[i].spec.run.schedule == ScheduleKind::NoPipeline)
        else {
            continue;
        };
        let base = &reports[base_idx];
        let m = base.spec.run.num_stages();
        let base_eff = effective_cycles(
            ScheduleKind::NoPipeline,
            m,
            base.metrics.summary.cycles_total,
        ) as f64;
        let base_samples = base.metrics.summary.samples_total as f64;
        let base_target = target_cycles(&base.spec, &base.metrics);
        for &i in idxs {
            let r = &reports[i];
            let run = &r.spec.run;
            let eff = effective_cycles(run.schedule, m, r.metrics.summary.cycles_total) as f64;
            let samples = r.metrics.summary.samples_total as f64;
            // samples/cycle ratio; equals the density ratio when both
            // runs process the same sample count.
            let measured = (samples / eff) / (base_samples / base_eff);
            let tt = match (base_target, target_cycles(&r.spec, &r.metrics)) {
                (Some(b), Some(t)) if t > 0 => Some(b as f64 / t as f64),
                _ => None,
            };
            rows.push(SpeedupRow {
                run_name: r.name.clone(),
                baseline: base.name.clone(),
                schedule: run.schedule.name().to_string(),
                stages: m,
                micro_per_mini: run.micro_per_mini(),
                throughput_speedup: throughput_speedup(run.schedule, m, run.micro_per_mini()),
                measured_speedup: measured,
                time_to_target_speedup: tt,
            });
        }
    }
    rows
}

fn write_bundle_files(bundle: &ResultBundle) -> Result<()> {
    let table_path = bundle.out_dir.join("speedup_table.csv");
    let mut w = csv::Writer::from_path(&table_path)
        .map_err(|e| Error::run(format!("cannot write {}: {e}", table_path.display())))?;
    w.write_record([
        "run_name",
        "baseline",
        "schedule",
        "stages",
        "micro_per_mini",
        "throughput_speedup",
        "measured_speedup",
        "time_to_target_speedup",
    ])
    .map_err(|e| Error::run(e.to_string()))?;
    for row in &bundle.speedup_table {
        w.write_record([
            row.run_name.clone(),
            row.baseline.clone(),
            row.schedule.clone(),
            row.stages.to_string(),
            row.micro_per_mini.to_string(),
            format!("{}", row.throughput_speedup),
            format!("{}", row.measured_speedup),
            row.time_to_target_speedup
                .map(|v| format!("{v}"))
                .unwrap_or_default(),
        ])
        .map_err(|e| Error::run(e.to_string()))?;
    }
    w.flush()?;

    let bundle_json = json!({
        "runs": bundle.reports.iter().map(|r| r.summary.clone()).collect::<Vec<_>>(),
        "failures": bundle.failures.iter().map(|(n, e)| json!({"run_name": n, "error": e})).collect::<Vec<_>>(),
        "speedup_table": bundle.speedup_table,
    });
    std::fs::write(
        bundle.out_dir.join("bundle.json"),
        serde_json::to_string_pretty(&bundle_json)? + "\n",
    )?;
    Ok(())
}

/// Plot-ready exports: `accuracy_vs_epoch.csv`, `accuracy_vs_cycle.csv`,
/// `speedup_vs_stages.csv`.
pub fn emit_plotdata(bundle: &ResultBundle) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let epoch_path = bundle.out_dir.join("accuracy_vs_epoch.csv");
    {
        let mut w = csv::Writer::from_path(&epoch_path)
            .map_err(|e| Error::run(format!("cannot write {}: {e}", epoch_path.display())))?;
        w.write_record(["run_name", "epoch", "accuracy", "eval_loss"])
            .map_err(|e| Error::run(e.to_string()))?;
        for (r, &n) in bundle.reports.iter().zip(&bundle.train_sizes) {
            for rec in &r.metrics.records {
                w.write_record([
                    r.name.clone(),
                    format!("{}", rec.samples_done as f64 / n as f64),
                    rec.accuracy.map(|a| format!("{a}")).unwrap_or_default(),
                    format!("{}", rec.eval_loss),
                ])
                .map_err(|e| Error::run(e.to_string()))?;
            }
        }
        w.flush()?;
    }
    written.push(epoch_path);

    let cycle_path = bundle.out_dir.join("accuracy_vs_cycle.csv");
    {
        let mut w = csv::Writer::from_path(&cycle_path)
            .map_err(|e| Error::run(format!("cannot write {}: {e}", cycle_path.display())))?;
        w.write_record(["run_name", "clock_cycle", "accuracy", "eval_loss"])
            .map_err(|e| Error::run(e.to_string()))?;
        for r in &bundle.reports {
            for rec in &r.metrics.records {
                w.write_record([
                    r.name.clone(),
                    rec.clock_cycle.to_string(),
                    rec.accuracy.map(|a| format!("{a}")).unwrap_or_default(),
                    format!("{}", rec.eval_loss),
                ])
                .map_err(|e| Error::run(e.to_string()))?;
            }
        }
        w.flush()?;
    }
    written.push(cycle_path);

    let stages_path = bundle.out_dir.join("speedup_vs_stages.csv");
    {
        let mut w = csv::Writer::from_path(&stages_path)
            .map_err(|e| Error::run(format!("cannot write {}: {e}", stages_path.display())))?;
        w.write_record([
            "run_name",
            "schedule",
            "stages",
            "throughput_speedup",
            "measured_speedup",
        ])
        .map_err(|e| Error::run(e.to_string()))?;
        let mut rows: Vec<&SpeedupRow> = bundle.speedup_table.iter().collect();
        rows.sort_by_key(|r| (r.stages, r.schedule.clone(), r.run_name.clone()));
        for row in rows {
            w.write_record([
                row.run_name.clone(),
                row.schedule.clone(),
                row.stages.to_string(),
                format!("{}", row.throughput_speedup),
                format!("{}", row.measured_speedup),
            ])
            .map_err(|e| Error::run(e.to_string()))?;
        }
        w.flush()?;
    }
    written.push(stages_path);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    #[test]
    fn throughput_speedup_values() {
        assert_eq!(throughput_speedup(ScheduleKind::NoPipeline, 6, 8), 1.0);
        assert_eq!(throughput_speedup(ScheduleKind::Synchronous, 6, 8), 48.0 / 13.0);
        assert_eq!(throughput_speedup(ScheduleKind::Asynchronous, 6, 8), 6.0);
    }

    #[test]
    fn small_experiment_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config_str(
            "[sweep mini]\n\
             schedule = nopipe,sync,async\n\
             stages = 2\n\
             hidden_dim = 6\n\
             data = mixture\n\
             data_n = 96\n\
             data_d = 6\n\
             b_mini = 32\n\
             b_micro = 8\n\
             updates = 6\n\
             eval_every = 3\n\
             eval_batch = 32\n\
             target_loss = 10\n",
        )
        .unwrap();
        let bundle = run_experiment(&cfg, dir.path(), true).unwrap();
        assert_eq!(bundle.reports.len(), 3);
        assert!(bundle.failures.is_empty());
        for r in &bundle.reports {
            assert!(r.csv_path.exists());
            assert!(r.summary_path.exists());
            let text = std::fs::read_to_string(&r.csv_path).unwrap();
            // header + one row per record, no NaN cells
            assert!(!text.contains("NaN"));
            assert_eq!(text.lines().count(), 1 + r.metrics.records.len());
        }
        // nopipe and sync recorded identical eval losses per update.
        let by_name = |suffix: &str| {
            bundle
                .reports
                .iter()
                .find(|r| r.name.ends_with(suffix))
                .unwrap()
        };
        let np = by_name("nopipe");
        let sy = by_name("sync");
        for (a, b) in np.metrics.records.iter().zip(&sy.metrics.records) {
            assert_eq!(a.eval_loss.to_bits(), b.eval_loss.to_bits());
            assert_eq!(a.update_k, b.update_k);
        }
        assert_ne!(
            np.metrics.records.last().unwrap().clock_cycle,
            sy.metrics.records.last().unwrap().clock_cycle
        );

        // Speedup table: M=2, B=4 → sync 8/5, async 2.
        assert_eq!(bundle.speedup_table.len(), 3);
        let sync_row = bundle
            .speedup_table
            .iter()
            .find(|r| r.schedule == "sync")
            .unwrap();
        assert_eq!(sync_row.throughput_speedup, 8.0 / 5.0);
        let async_row = bundle
            .speedup_table
            .iter()
            .find(|r| r.schedule == "async")
            .unwrap();
        assert_eq!(async_row.throughput_speedup, 2.0);
        // Ledger-derived ratio matches the closed form exactly: the async
        // runs the same micro-batch count with fill/drain subtracted.
        assert_eq!(async_row.measured_speedup, 2.0);
        assert_eq!(sync_row.measured_speedup, 8.0 / 5.0);

        let files = emit_plotdata(&bundle).unwrap();
        for f in files {
            assert!(f.exists());
        }
        assert!(dir.path().join("bundle.json").exists());
        assert!(dir.path().join("speedup_table.csv").exists());
    }

    #[test]
    fn failures_are_partial() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config_str(
            "[run ok]\nstages = 1\ndata = teacher\ndata_n = 64\ndata_d = 4\nb_mini = 16\nb_micro = 16\nupdates = 2\neval_batch = 16\n\
             [run missing]\ndata = csv:/nonexistent/file.csv\nstage_dims = 4,1\n",
        )
        .unwrap();
        let bundle = run_experiment(&cfg, dir.path(), true).unwrap();
        assert_eq!(bundle.reports.len(), 1);
        assert_eq!(bundle.failures.len(), 1);
        assert_eq!(bundle.failures[0].0, "missing");
    }
}
