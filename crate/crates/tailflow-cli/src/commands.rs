//! The single-shot subcommands: data generation, tail estimation, training,
//! evaluation, projection statistics, and QQ data. Each command is a plain
//! function over paths so it can be driven in-process by tests and by the
//! suite orchestrator.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use tailflow::error::{Error, Result};
use tailflow::metrics::{
    area_loglog, projection_stats, qq_pairs, summarize, tvar_diff, TVAR_ALPHA,
};
use tailflow::model::{build_model, load_checkpoint, FlowModel, Variant};
use tailflow::synth::{
    emit_datasets, load_spec, make_spec, read_csv, CopulaDensity, DatasetPaths, MarginalFamily,
    SynthSpec,
};
use tailflow::tail::{build_tail_report, ClassifyConfig, TailClass, TailReport};
use tailflow::tensor::Tensor;
use tailflow::train::{fit, TrainHistory};

use crate::config::ExperimentConfig;
use crate::docs::{load_tail_report, save_tail_report, MetricsDoc};

/// Offset between a trial's training seed and its evaluation sampling
/// seed, so the two streams never coincide.
pub const SAMPLE_SEED_OFFSET: u64 = 1_000_003;

/// Generates the synthetic target named by the config and emits the three
/// dataset splits plus the spec document into `out_dir`.
pub fn cmd_generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DatasetPaths> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let spec = make_spec(cfg.dim, cfg.d_h, cfg.nu, cfg.data_seed)?;
    let paths = DatasetPaths::in_dir(out_dir);
    emit_datasets(&spec, &cfg.sizes, &paths, cfg.header)?;
    Ok(paths)
}

/// Classifies every column of a dataset and writes the tail report.
pub fn cmd_estimate(data_path: &Path, out_path: &Path) -> Result<TailReport> {
    let data = read_csv(data_path)?;
    let report = build_tail_report(&data, &ClassifyConfig::default())?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_tail_report(&report, out_path)?;
    Ok(report)
}

/// Everything a finished training run leaves on disk.
pub struct TrainOutcome {
    pub model: FlowModel,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
    pub history_csv: PathBuf,
}

/// Trains one variant on `data_dir/{train,val}.csv` and writes
/// `checkpoint.json` plus `history.csv` into `out_dir`. The training seed
/// is taken from `cfg.train` with `train_seed` substituted.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    variant: Variant,
    data_dir: &Path,
    report: Option<&TailReport>,
    out_dir: &Path,
    train_seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_data = read_csv(&data_dir.join("train.csv"))?;
    let val_data = read_csv(&data_dir.join("val.csv"))?;
    let (_, dim) = train_data.dims2("training data")?;

    let model = build_model(
        variant,
        cfg.transform,
        dim,
        cfg.n_layers,
        report,
        &cfg.arch,
        train_seed,
    )?;
    let mut tc = cfg.train.clone();
    tc.seed = train_seed;
    let history = fit(&model, &train_data, &val_data, &tc)?;

    std::fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join("checkpoint.json");
    model.save_checkpoint(&checkpoint)?;
    let history_csv = out_dir.join("history.csv");
    write_history(&history, &history_csv)?;
    Ok(TrainOutcome {
        model,
        history,
        checkpoint,
        history_csv,
    })
}

fn write_history(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "train_nll", "val_nll"])?;
    for e in &history.entries {
        w.write_record([
            e.step.to_string(),
            e.train_nll.to_string(),
            e.val_nll.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Where the evaluation heavy/light column classes come from: the
/// generating spec (ground truth) or an estimated tail report.
pub enum MaskSource<'a> {
    Spec(&'a SynthSpec),
    Report(&'a TailReport),
}

impl MaskSource<'_> {
    pub fn heavy_mask(&self) -> Vec<bool> {
        match self {
            MaskSource::Spec(spec) => spec
                .marginals
                .iter()
                .map(|m| m.kind == MarginalFamily::TMixture)
                .collect(),
            MaskSource::Report(report) => report
                .marginals
                .iter()
                .map(|m| m.class == TailClass::Heavy)
                .collect(),
        }
    }
}

/// Scores a model in memory: samples it, computes the metric summary
/// against the test data, optionally evaluates the oracle density, and
/// writes `metrics.json` plus `per_column.csv` into `out_dir`.
pub fn evaluate_model(
    model: &FlowModel,
    test: &Tensor,
    mask: &MaskSource<'_>,
    oracle: Option<&CopulaDensity<'_>>,
    n_samples: usize,
    sample_seed: u64,
    out_dir: &Path,
) -> Result<MetricsDoc> {
    if n_samples == 0 {
        return Err(Error::validation("evaluation needs at least one sample"));
    }
    let heavy_mask = mask.heavy_mask();
    let (n_test, dim) = test.dims2("test data")?;
    if heavy_mask.len() != dim {
        return Err(Error::validation(format!(
            "class source covers {} columns, test data has {dim}",
            heavy_mask.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);
    let flow = model.sample(&mut rng, n_samples)?;
    let summary = summarize(model, &flow, test, &heavy_mask)?;
    let oracle_nll = match oracle {
        Some(density) => {
            let lps = density.logpdf_batch(test)?;
            Some(-lps.iter().sum::<f64>() / n_test as f64)
        }
        None => None,
    };

    std::fs::create_dir_all(out_dir)?;
    let doc = MetricsDoc::new(&summary, oracle_nll, n_samples, sample_seed);
    doc.save(&out_dir.join("metrics.json"))?;
    write_per_column(test, &flow, &heavy_mask, &out_dir.join("per_column.csv"))?;
    Ok(doc)
}

fn write_per_column(
    test: &Tensor,
    flow: &Tensor,
    heavy_mask: &[bool],
    path: &Path,
) -> Result<()> {
    let (n_test, _) = test.dims2("per-column test")?;
    let (n_flow, _) = flow.dims2("per-column flow")?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["column", "class", "tvar_diff", "area", "area_skipped"])?;
    for (j, &is_heavy) in heavy_mask.iter().enumerate() {
        let data_col: Vec<f64> = (0..n_test).map(|i| test.at(i, j)).collect();
        let flow_col: Vec<f64> = (0..n_flow).map(|i| flow.at(i, j)).collect();
        let tv = tvar_diff(&data_col, &flow_col, TVAR_ALPHA)?;
        let area = area_loglog(&data_col, &flow_col, None)?;
        w.write_record([
            j.to_string(),
            if is_heavy { "heavy" } else { "light" }.to_string(),
            tv.to_string(),
            area.area.to_string(),
            area.skipped.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Path-level wrapper over [`evaluate_model`]: loads the checkpoint, test
/// data, and mask source (generating spec preferred, tail report otherwise).
#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    checkpoint: &Path,
    test_path: &Path,
    spec_path: Option<&Path>,
    report_path: Option<&Path>,
    out_dir: &Path,
    n_samples: Option<usize>,
    sample_seed: u64,
) -> Result<MetricsDoc> {
    let model = load_checkpoint(checkpoint)?;
    let test = read_csv(test_path)?;
    let (n_test, _) = test.dims2("test data")?;
    let n_samples = n_samples.unwrap_or(n_test);

    let spec = spec_path.map(load_spec).transpose()?;
    let report = report_path.map(load_tail_report).transpose()?;
    let (mask, oracle) = match (&spec, &report) {
        (Some(s), _) => (MaskSource::Spec(s), Some(CopulaDensity::new(s)?)),
        (None, Some(r)) => (MaskSource::Report(r), None),
        (None, None) => {
            return Err(Error::validation(
                "evaluation needs a generating spec or a tail report to know the column classes",
            ));
        }
    };
    evaluate_model(
        &model,
        &test,
        &mask,
        oracle.as_ref(),
        n_samples,
        sample_seed,
        out_dir,
    )
}

/// Samples the model and writes the three-section projection CSV
/// (`section,index,data,flow` with sections mean, std, q01).
pub fn cmd_project_stats(
    checkpoint: &Path,
    data_path: &Path,
    out_path: &Path,
    n_proj: usize,
    n_samples: Option<usize>,
    seed: u64,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let data = read_csv(data_path)?;
    let (n_data, _) = data.dims2("projection data")?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let flow = model.sample(&mut rng, n_samples.unwrap_or(n_data))?;
    let pairs = projection_stats(&data, &flow, n_proj, &mut rng)?;

    let mut w = csv::Writer::from_path(out_path)?;
    w.write_record(["section", "index", "data", "flow"])?;
    for (section, pick) in [
        ("mean", 0usize),
        ("std", 1),
        ("q01", 2),
    ] {
        for (i, p) in pairs.iter().enumerate() {
            let (d, f) = match pick {
                0 => (p.mean_data, p.mean_flow),
                1 => (p.std_data, p.std_flow),
                _ => (p.q01_data, p.q01_flow),
            };
            w.write_record([
                section.to_string(),
                i.to_string(),
                d.to_string(),
                f.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Samples the model and writes per-column QQ quantile pairs
/// (`column,index,data,flow`).
pub fn cmd_qq_data(
    checkpoint: &Path,
    data_path: &Path,
    out_path: &Path,
    points: usize,
    n_samples: Option<usize>,
    seed: u64,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let data = read_csv(data_path)?;
    let (n_data, dim) = data.dims2("qq data")?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let flow = model.sample(&mut rng, n_samples.unwrap_or(n_data))?;
    let (n_flow, _) = flow.dims2("qq flow")?;

    let mut w = csv::Writer::from_path(out_path)?;
    w.write_record(["column", "index", "data", "flow"])?;
    for j in 0..dim {
        let data_col: Vec<f64> = (0..n_data).map(|i| data.at(i, j)).collect();
        let flow_col: Vec<f64> = (0..n_flow).map(|i| flow.at(i, j)).collect();
        let pairs = qq_pairs(&data_col, &flow_col, points)?;
        for (i, (d, f)) in pairs.iter().enumerate() {
            w.write_record([
                j.to_string(),
                i.to_string(),
                d.to_string(),
                f.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a default desk-scale config document (used by `--emit-config`).
pub fn write_default_config(path: &Path) -> Result<()> {
    ExperimentConfig::default().save(path)
}

/// Renders a metrics document as the flat key-value text shown on stdout.
pub fn format_metrics(doc: &MetricsDoc) -> String {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    let mut s = format!(
        "nll {:.6}\narea_light {}\narea_heavy {}\ntvar_light {}\ntvar_heavy {}\nconfusion [[{} {}] [{} {}]]\narea_skipped {}\n",
        doc.nll,
        opt(doc.area_light),
        opt(doc.area_heavy),
        opt(doc.tvar_light),
        opt(doc.tvar_heavy),
        doc.confusion[0][0],
        doc.confusion[0][1],
        doc.confusion[1][0],
        doc.confusion[1][1],
        doc.area_skipped,
    );
    if let Some(o) = doc.oracle_nll {
        s.push_str(&format!("oracle_nll {o:.6}\n"));
    }
    s
}

/// Ensures a file exists before a command consumes it, turning a late I/O
/// failure into an early validation error with a clear message.
pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::validation(format!(
            "{what} not found at {}",
            path.display()
        )));
    }
    Ok(())
}
