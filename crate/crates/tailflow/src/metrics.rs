//! Tail-quality metrics: tail value-at-risk, log-log survival-curve area,
//! per-class summaries, random-projection statistics, and QQ pairs.
//!
//! Everything here is a pure function of order statistics, so all metrics
//! are invariant under row shuffling of their inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::FlowModel;
use crate::tail::{synthetic_tail_confusion, ClassifyConfig, TailClass};
use crate::tensor::Tensor;

/// Tail value-at-risk level used across all experiments.
pub const TVAR_ALPHA: f64 = 0.95;

/// Hard cap on the number of log-log area terms; the term weights decay
/// like 1/i, so everything beyond contributes negligibly.
pub const AREA_MAX_TERMS: usize = 100_000;

/// Tail value-at-risk at level `alpha`: the mean of the upper
/// `⌈(1−α)·n⌉` order statistics (the plug-in estimate of
/// `(1/(1−α)) ∫_α^1 F⁻¹(u) du`).
pub fn tvar(samples: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!(
            "tail level must lie strictly inside (0,1), got {alpha}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::validation("tail value-at-risk of an empty sample"));
    }
    let n = samples.len();
    // ⌈(1−α)·n⌉, guarded against the ceiling overshooting when (1−α)·n
    // lands a rounding error above an integer (1−0.95 is not exactly 0.05).
    let raw = (1.0 - alpha) * n as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    let k = k.clamp(1, n);
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sorted[n - k..].iter().sum::<f64>() / k as f64)
}

/// Absolute difference of the tail values-at-risk of two columns.
pub fn tvar_diff(data_col: &[f64], flow_col: &[f64], alpha: f64) -> Result<f64> {
    Ok((tvar(data_col, alpha)? - tvar(flow_col, alpha)?).abs())
}

/// Result of [`area_loglog`]: the accumulated area plus the number of
/// terms skipped because a nonpositive quantile has no logarithm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaOutcome {
    pub area: f64,
    pub skipped: usize,
}

/// Area between the two empirical complementary quantile curves on
/// log-log axes:
///
/// `Σ_{i=1..n} |ln F̄⁻¹_data(i/n) − ln F̄⁻¹_flow(i/n)| · ln((i+1)/i)`
///
/// where `F̄⁻¹(p)` is the empirical `(1−p)`-quantile of the *absolute*
/// values (the survival curve of magnitudes; the sign convention of the
/// raw values is deliberately ignored). `n` defaults to the smaller
/// column length and is always capped at [`AREA_MAX_TERMS`]. Terms whose
/// quantile is zero or negative are skipped and counted in `skipped`.
pub fn area_loglog(data_col: &[f64], flow_col: &[f64], n: Option<usize>) -> Result<AreaOutcome> {
    let min_len = data_col.len().min(flow_col.len());
    if min_len == 0 {
        return Err(Error::validation("log-log area of an empty column"));
    }
    let n = match n {
        Some(requested) => {
            if requested == 0 || requested > min_len {
                return Err(Error::validation(format!(
                    "log-log area needs 1..={min_len} terms, got {requested}"
                )));
            }
            requested.min(AREA_MAX_TERMS)
        }
        None => min_len.min(AREA_MAX_TERMS),
    };

    let sort_abs_desc = |col: &[f64]| -> Vec<f64> {
        let mut v: Vec<f64> = col.iter().map(|x| x.abs()).collect();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        v
    };
    let data = sort_abs_desc(data_col);
    let flow = sort_abs_desc(flow_col);

    // Empirical (1−p)-quantile of magnitudes at p = i/n: the ⌈i·m/n⌉-th
    // largest of the m values (the i-th largest when m = n).
    let quantile = |sorted: &[f64], i: usize| -> f64 {
        let m = sorted.len();
        let idx = (i * m).div_ceil(n).clamp(1, m);
        sorted[idx - 1]
    };

    let mut area = 0.0;
    let mut skipped = 0usize;
    for i in 1..=n {
        let qd = quantile(&data, i);
        let qf = quantile(&flow, i);
        if qd <= 0.0 || qf <= 0.0 {
            skipped += 1;
            continue;
        }
        area += (qd.ln() - qf.ln()).abs() * ((i + 1) as f64 / i as f64).ln();
    }
    Ok(AreaOutcome { area, skipped })
}

/// Per-class aggregate metrics of a fitted model against held-out data.
///
/// The class aggregates are `None` when the mask selects no column of
/// that class (for example `tvar_heavy` on an all-light target).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    /// Mean negative log-likelihood of the test data under the model.
    pub nll: f64,
    /// Mean log-log area over the light (resp. heavy) columns.
    pub area_light: Option<f64>,
    pub area_heavy: Option<f64>,
    /// Mean tail value-at-risk difference over the light (resp. heavy)
    /// columns.
    pub tvar_light: Option<f64>,
    pub tvar_heavy: Option<f64>,
    /// `confusion[truth][predicted]` counts with 0 = light, 1 = heavy:
    /// the declared classes against a classification of the model samples.
    pub confusion: [[usize; 2]; 2],
    /// Total log-log area terms skipped across all columns.
    pub area_skipped: usize,
}

/// Computes every tail metric in one pass: per-column tail value-at-risk
/// differences and log-log areas between the model samples and the test
/// data (averaged within the two tail classes of `heavy_mask`), the
/// tail-class confusion of the model samples against `heavy_mask`, and
/// the mean negative log-likelihood of the test data under the model.
pub fn summarize(
    model: &FlowModel,
    flow_samples: &Tensor,
    test_data: &Tensor,
    heavy_mask: &[bool],
) -> Result<MetricSummary> {
    let (n_flow, dim) = flow_samples.dims2("summarize flow samples")?;
    let (n_test, test_dim) = test_data.dims2("summarize test data")?;
    if dim != test_dim {
        return Err(Error::validation(format!(
            "flow samples have {dim} columns, test data {test_dim}"
        )));
    }
    if heavy_mask.len() != dim {
        return Err(Error::validation(format!(
            "heavy mask has {} entries for {dim} columns",
            heavy_mask.len()
        )));
    }

    let lps = model.log_prob_values(test_data)?;
    let nll = -lps.iter().sum::<f64>() / n_test as f64;

    let mut sums = [(0.0, 0.0, 0usize); 2]; // (area, tvar, count) per class
    let mut area_skipped = 0usize;
    let mut data_col = vec![0.0; n_test];
    let mut flow_col = vec![0.0; n_flow];
    for (j, &is_heavy) in heavy_mask.iter().enumerate() {
        for (i, v) in data_col.iter_mut().enumerate() {
            *v = test_data.at(i, j);
        }
        for (i, v) in flow_col.iter_mut().enumerate() {
            *v = flow_samples.at(i, j);
        }
        let area = area_loglog(&data_col, &flow_col, None)?;
        let tv = tvar_diff(&data_col, &flow_col, TVAR_ALPHA)?;
        area_skipped += area.skipped;
        let class = usize::from(is_heavy);
        sums[class].0 += area.area;
        sums[class].1 += tv;
        sums[class].2 += 1;
    }
    let aggregate = |s: (f64, f64, usize)| -> (Option<f64>, Option<f64>) {
        if s.2 == 0 {
            (None, None)
        } else {
            (Some(s.0 / s.2 as f64), Some(s.1 / s.2 as f64))
        }
    };
    let (area_light, tvar_light) = aggregate(sums[0]);
    let (area_heavy, tvar_heavy) = aggregate(sums[1]);

    let true_classes: Vec<TailClass> = heavy_mask
        .iter()
        .map(|&h| if h { TailClass::Heavy } else { TailClass::Light })
        .collect();
    let confusion =
        synthetic_tail_confusion(&true_classes, flow_samples, &ClassifyConfig::default())?;

    Ok(MetricSummary {
        nll,
        area_light,
        area_heavy,
        tvar_light,
        tvar_heavy,
        confusion,
        area_skipped,
    })
}

/// Mean, standard deviation, and 1%-quantile of one random projection,
/// evaluated on both datasets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionPair {
    pub mean_data: f64,
    pub mean_flow: f64,
    pub std_data: f64,
    pub std_flow: f64,
    pub q01_data: f64,
    pub q01_flow: f64,
}

/// Projects both matrices onto `n_proj` random directions
/// `w ~ U([0,1]^D)` and reports (mean, sample standard deviation,
/// 1%-quantile) of each projection for each dataset, paired for plotting.
pub fn projection_stats(
    data: &Tensor,
    flow: &Tensor,
    n_proj: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ProjectionPair>> {
    let (_, dim) = data.dims2("projection data")?;
    let (_, flow_dim) = flow.dims2("projection flow samples")?;
    if dim != flow_dim {
        return Err(Error::validation(format!(
            "projection inputs disagree on dimension: {dim} vs {flow_dim}"
        )));
    }
    if n_proj == 0 {
        return Err(Error::validation("projection count must be at least 1"));
    }
    let mut pairs = Vec::with_capacity(n_proj);
    for _ in 0..n_proj {
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let (mean_data, std_data, q01_data) = projection_summary(data, &w)?;
        let (mean_flow, std_flow, q01_flow) = projection_summary(flow, &w)?;
        pairs.push(ProjectionPair {
            mean_data,
            mean_flow,
            std_data,
            std_flow,
            q01_data,
            q01_flow,
        });
    }
    Ok(pairs)
}

fn projection_summary(m: &Tensor, w: &[f64]) -> Result<(f64, f64, f64)> {
    let (n, _) = m.dims2("projection")?;
    if n == 0 {
        return Err(Error::validation("projection of an empty matrix"));
    }
    let mut proj = vec![0.0; n];
    for (i, p) in proj.iter_mut().enumerate() {
        *p = m.row(i).iter().zip(w).map(|(x, wj)| x * wj).sum();
    }
    let mean = proj.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    proj.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = (0.01 * n as f64).ceil() as usize;
    let q01 = proj[k.clamp(1, n) - 1];
    Ok((mean, var.sqrt(), q01))
}

/// Per-column sorted quantile pairs (data vs flow) for QQ plotting: both
/// columns are reduced to `n_points` common empirical quantiles.
pub fn qq_pairs(data_col: &[f64], flow_col: &[f64], n_points: usize) -> Result<Vec<(f64, f64)>> {
    if data_col.is_empty() || flow_col.is_empty() {
        return Err(Error::validation("QQ pairs of an empty column"));
    }
    if n_points == 0 {
        return Err(Error::validation("QQ pairs need at least one point"));
    }
    let mut a = data_col.to_vec();
    let mut b = flow_col.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    b.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    let quantile = |sorted: &[f64], p: f64| -> f64 {
        let idx = (p * sorted.len() as f64).floor() as usize;
        sorted[idx.min(sorted.len() - 1)]
    };
    Ok((0..n_points)
        .map(|k| {
            let p = (k as f64 + 0.5) / n_points as f64;
            (quantile(&a, p), quantile(&b, p))
        })
        .collect())
}
