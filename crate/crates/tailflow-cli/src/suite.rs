//! The experiment suite: generate → estimate → train → evaluate for every
//! (variant × trial), with resumable trials, optional worker processes,
//! per-run provenance manifests, and Table-shaped aggregate CSVs.

use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Instant;

use tailflow::error::{Error, Result};
use tailflow::model::Variant;
use tailflow::synth::{load_spec, CopulaDensity, DatasetPaths};
use tailflow::tail::TailReport;

use crate::commands::{
    cmd_estimate, cmd_generate, cmd_train, evaluate_model, MaskSource, SAMPLE_SEED_OFFSET,
};
use crate::config::ExperimentConfig;
use crate::docs::{
    bytes_sha256, file_sha256, load_tail_report, MetricsDoc, RunManifest, MANIFEST_SCHEMA,
};

/// How the suite executes its trials.
pub struct SuiteOptions {
    /// Maximum concurrent trials. `1` runs everything in-process.
    pub jobs: usize,
    /// Binary to spawn for worker trials (the `run-trial` subcommand).
    /// `None` forces in-process execution regardless of `jobs`.
    pub worker_exe: Option<PathBuf>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            jobs: 1,
            worker_exe: None,
        }
    }
}

/// Counts reported after a suite run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteOutcome {
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// The resolved-config file name inside a suite directory; workers read it.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

fn run_dir(suite_dir: &Path, variant: Variant, trial: usize) -> PathBuf {
    suite_dir.join("runs").join(format!("{variant}-t{trial}"))
}

/// A trial's outputs are trusted iff its metrics document parses and its
/// checkpoint loads; anything else is re-run.
fn trial_is_complete(dir: &Path) -> bool {
    MetricsDoc::load(&dir.join("metrics.json")).is_ok()
        && tailflow::model::load_checkpoint(&dir.join("checkpoint.json")).is_ok()
}

/// Runs the full suite into `out_dir`. Re-running skips data, report, and
/// trials whose documents already validate, so an interrupted suite picks
/// up where it stopped.
pub fn cmd_suite(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    opts: &SuiteOptions,
) -> Result<SuiteOutcome> {
    cfg.validate()?;
    if opts.jobs == 0 {
        return Err(Error::validation("jobs must be at least 1"));
    }
    std::fs::create_dir_all(out_dir)?;
    let suite_start = Instant::now();

    // Freeze the resolved configuration for workers and provenance.
    let mut resolved = cfg.clone();
    resolved.out_dir = out_dir.to_path_buf();
    resolved.save(&out_dir.join(RESOLVED_CONFIG))?;

    // Data: reuse when the spec document and all three splits are present.
    let data_dir = out_dir.join("data");
    let paths = DatasetPaths::in_dir(&data_dir);
    let data_ready = load_spec(&paths.spec).is_ok()
        && paths.train.is_file()
        && paths.val.is_file()
        && paths.test.is_file();
    if !data_ready {
        eprintln!("suite: generating data into {}", data_dir.display());
        cmd_generate(&resolved, &data_dir)?;
    } else {
        eprintln!("suite: reusing data in {}", data_dir.display());
    }

    // Tail report: reuse when it parses and covers the right columns.
    let report_path = out_dir.join("tails").join("report.json");
    let report = match load_tail_report(&report_path) {
        Ok(r) if r.marginals.len() == resolved.dim => {
            eprintln!("suite: reusing tail report");
            r
        }
        _ => {
            eprintln!("suite: estimating tails");
            cmd_estimate(&paths.train, &report_path)?
        }
    };

    // Trials.
    let mut pending: Vec<(Variant, usize)> = Vec::new();
    let mut skipped = 0usize;
    for &variant in &resolved.variants {
        for trial in 0..resolved.n_trials {
            if trial_is_complete(&run_dir(out_dir, variant, trial)) {
                skipped += 1;
            } else {
                pending.push((variant, trial));
            }
        }
    }

    let failures = if opts.jobs > 1 && opts.worker_exe.is_some() {
        run_pending_in_workers(
            opts.worker_exe.as_deref().unwrap(),
            out_dir,
            &pending,
            opts.jobs,
        )?
    } else {
        run_pending_in_process(&resolved, out_dir, &report, &pending)
    };

    let total = resolved.variants.len() * resolved.n_trials;
    let failed = failures.len();
    let completed = total - skipped - failed;
    for (variant, trial, msg) in &failures {
        eprintln!("suite: trial {variant}-t{trial} failed: {msg}");
    }

    aggregate(&resolved, out_dir)?;
    write_suite_manifest(&resolved, out_dir, &paths, &report_path, suite_start)?;

    if failed * 5 > total {
        return Err(Error::Io(std::io::Error::other(format!(
            "{failed} of {total} trials failed (more than 20%)"
        ))));
    }
    eprintln!(
        "suite: {completed} trials run, {skipped} reused, {failed} failed; aggregates in {}",
        out_dir.display()
    );
    Ok(SuiteOutcome {
        completed,
        skipped,
        failed,
    })
}

fn run_pending_in_process(
    cfg: &ExperimentConfig,
    suite_dir: &Path,
    report: &TailReport,
    pending: &[(Variant, usize)],
) -> Vec<(Variant, usize, String)> {
    let mut failures = Vec::new();
    for &(variant, trial) in pending {
        eprintln!("suite: running {variant}-t{trial}");
        if let Err(e) = run_trial(cfg, suite_dir, Some(report), variant, trial) {
            failures.push((variant, trial, e.to_string()));
        }
    }
    failures
}

fn run_pending_in_workers(
    exe: &Path,
    suite_dir: &Path,
    pending: &[(Variant, usize)],
    jobs: usize,
) -> Result<Vec<(Variant, usize, String)>> {
    let mut failures = Vec::new();
    let mut queue = pending.iter().copied();
    let mut active: Vec<(Variant, usize, Child)> = Vec::new();
    loop {
        while active.len() < jobs {
            let Some((variant, trial)) = queue.next() else {
                break;
            };
            eprintln!("suite: spawning {variant}-t{trial}");
            let child = Command::new(exe)
                .arg("run-trial")
                .arg("--dir")
                .arg(suite_dir)
                .arg("--variant")
                .arg(variant.to_string())
                .arg("--trial")
                .arg(trial.to_string())
                .spawn()?;
            active.push((variant, trial, child));
        }
        if active.is_empty() {
            break;
        }
        // Poll for any finished worker.
        let mut reaped = false;
        for i in 0..active.len() {
            if let Some(status) = active[i].2.try_wait()? {
                let (variant, trial, _) = active.remove(i);
                if !status.success() {
                    failures.push((
                        variant,
                        trial,
                        format!("worker exited with {status}"),
                    ));
                }
                reaped = true;
                break;
            }
        }
        if !reaped {
            std::thread::sleep(std::time::Duration::from_millis(100));
        }
    }
    Ok(failures)
}

/// Runs one (variant, trial) pair inside an existing suite directory:
/// train on the suite's data, evaluate against the suite's test split with
/// the generating spec as ground truth, and write the run manifest.
/// `report` may be preloaded by the caller; workers load it from disk.
pub fn run_trial(
    cfg: &ExperimentConfig,
    suite_dir: &Path,
    report: Option<&TailReport>,
    variant: Variant,
    trial: usize,
) -> Result<MetricsDoc> {
    let start = Instant::now();
    let data_dir = suite_dir.join("data");
    let paths = DatasetPaths::in_dir(&data_dir);
    let report_path = suite_dir.join("tails").join("report.json");
    let loaded;
    let report = match report {
        Some(r) => r,
        None => {
            loaded = load_tail_report(&report_path)?;
            &loaded
        }
    };

    let train_seed = cfg.seed + trial as u64;
    let sample_seed = train_seed + SAMPLE_SEED_OFFSET;
    let dir = run_dir(suite_dir, variant, trial);
    std::fs::create_dir_all(&dir)?;

    let outcome = cmd_train(cfg, variant, &data_dir, Some(report), &dir, train_seed)?;

    let spec = load_spec(&paths.spec)?;
    let test = tailflow::synth::read_csv(&paths.test)?;
    let oracle = CopulaDensity::new(&spec)?;
    let metrics = evaluate_model(
        &outcome.model,
        &test,
        &MaskSource::Spec(&spec),
        Some(&oracle),
        cfg.sizes.test,
        sample_seed,
        &dir,
    )?;

    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        variant: variant.to_string(),
        trial,
        config_sha256: bytes_sha256(serde_json::to_string(cfg)?.as_bytes()),
        inputs: vec![
            ("train.csv".to_string(), file_sha256(&paths.train)?),
            ("val.csv".to_string(), file_sha256(&paths.val)?),
            ("test.csv".to_string(), file_sha256(&paths.test)?),
            ("spec.json".to_string(), file_sha256(&paths.spec)?),
            ("report.json".to_string(), file_sha256(&report_path)?),
        ],
        train_seed,
        sample_seed,
        wall_seconds: start.elapsed().as_secs_f64(),
        best_val_nll: outcome.history.best_val_nll,
        metrics: metrics.clone(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(metrics)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("nan".to_string(), |x| x.to_string())
}

/// Rebuilds `trials.csv`, `aggregate_mean.csv`, and `aggregate_std.csv`
/// from whatever trial documents currently validate. Row order follows the
/// config, so two identical runs emit byte-identical files.
pub fn aggregate(cfg: &ExperimentConfig, suite_dir: &Path) -> Result<()> {
    let columns = ["L", "Area_l", "Area_h", "tVaR_l", "tVaR_h"];
    let pick = |m: &MetricsDoc| -> [Option<f64>; 5] {
        [
            Some(m.nll),
            m.area_light,
            m.area_heavy,
            m.tvar_light,
            m.tvar_heavy,
        ]
    };

    let mut trials = csv::Writer::from_path(suite_dir.join("trials.csv"))?;
    trials.write_record(
        ["variant", "trial", "status"]
            .into_iter()
            .chain(columns)
            .chain(["oracle_L"]),
    )?;

    let mut mean_w = csv::Writer::from_path(suite_dir.join("aggregate_mean.csv"))?;
    let mut std_w = csv::Writer::from_path(suite_dir.join("aggregate_std.csv"))?;
    for w in [&mut mean_w, &mut std_w] {
        w.write_record(["variant"].into_iter().chain(columns))?;
    }

    for &variant in &cfg.variants {
        let mut rows: Vec<[Option<f64>; 5]> = Vec::new();
        for trial in 0..cfg.n_trials {
            let dir = run_dir(suite_dir, variant, trial);
            match MetricsDoc::load(&dir.join("metrics.json")) {
                Ok(m) => {
                    let vals = pick(&m);
                    let mut record = vec![
                        variant.to_string(),
                        trial.to_string(),
                        "ok".to_string(),
                    ];
                    record.extend(vals.iter().map(|v| fmt_opt(*v)));
                    record.push(fmt_opt(m.oracle_nll));
                    trials.write_record(&record)?;
                    rows.push(vals);
                }
                Err(_) => {
                    let mut record = vec![
                        variant.to_string(),
                        trial.to_string(),
                        "failed".to_string(),
                    ];
                    record.extend((0..6).map(|_| String::new()));
                    trials.write_record(&record)?;
                }
            }
        }

        let mut mean_rec = vec![variant.to_string()];
        let mut std_rec = vec![variant.to_string()];
        for c in 0..columns.len() {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
            if vals.is_empty() {
                mean_rec.push("nan".to_string());
                std_rec.push("nan".to_string());
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            mean_rec.push(mean.to_string());
            if vals.len() < 2 {
                std_rec.push("nan".to_string());
            } else {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                std_rec.push(var.sqrt().to_string());
            }
        }
        mean_w.write_record(&mean_rec)?;
        std_w.write_record(&std_rec)?;
    }
    trials.flush()?;
    mean_w.flush()?;
    std_w.flush()?;
    Ok(())
}

fn write_suite_manifest(
    cfg: &ExperimentConfig,
    suite_dir: &Path,
    paths: &DatasetPaths,
    report_path: &Path,
    start: Instant,
) -> Result<()> {
    let doc = serde_json::json!({
        "schema": MANIFEST_SCHEMA,
        "config_sha256": bytes_sha256(serde_json::to_string(cfg)?.as_bytes()),
        "inputs": {
            "train.csv": file_sha256(&paths.train)?,
            "val.csv": file_sha256(&paths.val)?,
            "test.csv": file_sha256(&paths.test)?,
            "spec.json": file_sha256(&paths.spec)?,
            "report.json": file_sha256(report_path)?,
        },
        "wall_seconds": start.elapsed().as_secs_f64(),
    });
    let file = std::fs::File::create(suite_dir.join("suite_manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &doc)?;
    Ok(())
}
