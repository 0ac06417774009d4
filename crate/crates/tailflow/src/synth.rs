//! Gaussian-copula synthetic targets with mixed-tail marginals: spec
//! construction, sampling, an exact density oracle, and reproducible
//! dataset emission.
//!
//! A target is a vector of one-dimensional mixture marginals coupled by a
//! Gaussian copula with correlation matrix `R`. Sampling draws correlated
//! normals, maps them to uniforms with Φ, and pushes each through its
//! marginal inverse CDF; the density of a point is the copula log density
//! at the normal scores plus the marginal log densities.
//!
//! Reproducibility: a spec's `seed` drives three independent RNG streams —
//! stream 0 for the marginal parameters, streams 1+ for the correlation
//! pairs (one per positive-definiteness retry), and stream 1000 for the
//! emitted datasets (train, validation, test drawn in that order).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::dist::student_t_logpdf;
use crate::error::{Error, Result};
use crate::math::{norm_cdf, norm_icdf, norm_logpdf};
use crate::tensor::Tensor;

/// Schema tag of the serialized spec document.
pub const SYNTH_SPEC_SCHEMA: &str = "tailflow-synthspec-v1";

/// RNG stream used for dataset emission (marginals use stream 0,
/// correlation pairs streams 1..=10).
const DATA_STREAM: u64 = 1000;

/// Absolute tolerance of the inverse-CDF bisection on the CDF residual.
const ICDF_F_TOL: f64 = 1e-12;

/// CDF values are clamped into `[F_CLAMP, 1 − F_CLAMP]` before the normal
/// quantile inside the density oracle, so scores stay finite in the extreme
/// tails where the CDF rounds to 0 or 1 in floating point.
const F_CLAMP: f64 = 1e-15;

/// Marginal family of one coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalFamily {
    Gaussian,
    GaussianMixture,
    TMixture,
}

/// One mixture component: `weight · f((x − location)/scale)/scale` with `f`
/// standard normal or Student-t (`dof` set iff the family is `TMixture`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub location: f64,
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dof: Option<f64>,
}

/// A one-dimensional mixture marginal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub kind: MarginalFamily,
    pub components: Vec<MixtureComponent>,
}

impl MarginalModel {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::validation("marginal has no components"));
        }
        if self.kind == MarginalFamily::Gaussian && self.components.len() != 1 {
            return Err(Error::validation(format!(
                "a plain Gaussian marginal has exactly one component, found {}",
                self.components.len()
            )));
        }
        let w0 = self.components[0].weight;
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if !(c.scale.is_finite() && c.scale > 0.0) {
                return Err(Error::validation(format!(
                    "component {k}: scale must be positive, got {}",
                    c.scale
                )));
            }
            if !c.location.is_finite() || !c.weight.is_finite() || c.weight <= 0.0 {
                return Err(Error::validation(format!(
                    "component {k}: bad weight or location"
                )));
            }
            if (c.weight - w0).abs() > 1e-12 {
                return Err(Error::validation(
                    "mixture weights must be equal across components",
                ));
            }
            match (self.kind, c.dof) {
                (MarginalFamily::TMixture, Some(nu)) if nu.is_finite() && nu > 0.0 => {}
                (MarginalFamily::TMixture, _) => {
                    return Err(Error::validation(format!(
                        "component {k}: a t-mixture needs a positive dof"
                    )));
                }
                (_, None) => {}
                (_, Some(_)) => {
                    return Err(Error::validation(format!(
                        "component {k}: dof is only valid in a t-mixture"
                    )));
                }
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// CDF: the weighted sum of component CDFs (normal via the error
    /// function, Student-t via the regularized incomplete beta function).
    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let z = (x - c.location) / c.scale;
                let f = match c.dof {
                    None => norm_cdf(z),
                    Some(nu) => student_t_cdf(z, nu),
                };
                c.weight * f
            })
            .sum()
    }

    /// Log density via log-sum-exp over the components.
    pub fn logpdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let z = (x - c.location) / c.scale;
                let lp = match c.dof {
                    None => norm_logpdf(z),
                    // A dof rejected by `validate` surfaces as NaN here.
                    Some(nu) => student_t_logpdf(z, nu).unwrap_or(f64::NAN),
                };
                c.weight.ln() + lp - c.scale.ln()
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    /// Inverse CDF by monotone bisection: the bracket starts at ±64 and
    /// doubles until it contains the quantile (heavy-tailed quantiles reach
    /// far beyond any fixed window), then bisection runs until the CDF
    /// residual is below 1e-12 *and* the bracket is narrower than
    /// `1e-12 · (1 + |x|)`.
    pub fn icdf(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::validation(format!(
                "inverse CDF needs u strictly inside (0,1), got {u}"
            )));
        }
        let mut lo = -64.0_f64;
        let mut hi = 64.0_f64;
        let mut guard = 0;
        while self.cdf(lo) > u {
            lo *= 2.0;
            guard += 1;
            if guard > 1100 {
                return Err(Error::validation(format!(
                    "inverse CDF bracket failed to expand below for u={u}"
                )));
            }
        }
        guard = 0;
        while self.cdf(hi) < u {
            hi *= 2.0;
            guard += 1;
            if guard > 1100 {
                return Err(Error::validation(format!(
                    "inverse CDF bracket failed to expand above for u={u}"
                )));
            }
        }
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..400 {
            mid = 0.5 * (lo + hi);
            let f = self.cdf(mid);
            if f < u {
                lo = mid;
            } else {
                hi = mid;
            }
            let resolved = (f - u).abs() < ICDF_F_TOL && (hi - lo) < 1e-12 * (1.0 + mid.abs());
            if resolved || hi - lo < f64::EPSILON * mid.abs() {
                break;
            }
        }
        Ok(mid)
    }
}

/// Student-t CDF at `z` with `nu` degrees of freedom, via the regularized
/// incomplete beta function.
fn student_t_cdf(z: f64, nu: f64) -> f64 {
    if z == 0.0 {
        return 0.5;
    }
    let x = nu / (nu + z * z);
    let half_tail = 0.5 * beta_reg(0.5 * nu, 0.5, x);
    if z > 0.0 {
        1.0 - half_tail
    } else {
        half_tail
    }
}

/// A full synthetic target: marginals plus copula correlation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub marginals: Vec<MarginalModel>,
    /// Row-major correlation matrix, `dim × dim`.
    pub correlation: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("spec dimension must be at least 1"));
        }
        if self.marginals.len() != self.dim {
            return Err(Error::validation(format!(
                "spec has {} marginals for dimension {}",
                self.marginals.len(),
                self.dim
            )));
        }
        for m in &self.marginals {
            m.validate()?;
        }
        if self.correlation.len() != self.dim
            || self.correlation.iter().any(|r| r.len() != self.dim)
        {
            return Err(Error::validation("correlation matrix shape mismatch"));
        }
        for i in 0..self.dim {
            if (self.correlation[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::validation(format!(
                    "correlation diagonal entry {i} is {}, expected 1",
                    self.correlation[i][i]
                )));
            }
            for j in 0..self.dim {
                let v = self.correlation[i][j];
                if !v.is_finite() || (v - self.correlation[j][i]).abs() > 1e-12 {
                    return Err(Error::validation(format!(
                        "correlation matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        if Cholesky::new(self.correlation_matrix()).is_none() {
            return Err(Error::validation(
                "correlation matrix is not positive definite",
            ));
        }
        Ok(())
    }

    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.correlation[i][j])
    }
}

/// Builds the standard synthetic target of dimension `dim` with the last
/// `d_h` marginals heavy-tailed (two-component Student-t mixtures with the
/// given `nu`), deterministic in `seed`.
///
/// Light marginals for `dim = 50` are all two-component Gaussian mixtures
/// with 200 correlated pairs; other dimensions use the small recipe — the
/// first two light marginals are plain Gaussians, the next two are two-
/// and three-component Gaussian mixtures, the rest two-component mixtures,
/// with `2·dim` correlated pairs. Mixture locations are drawn uniformly
/// from [−4,4] and scales from [1,2]; each selected unordered pair of the
/// correlation matrix is set to 0.25. Pairs are sampled distinct and
/// without replacement. If the resulting matrix is not positive definite
/// it is projected (eigenvalues clipped at 1e-3, then rescaled to unit
/// diagonal); if even that fails, the pairs are redrawn from the next RNG
/// stream, at most ten times.
pub fn make_spec(dim: usize, d_h: usize, nu: f64, seed: u64) -> Result<SynthSpec> {
    if dim == 0 {
        return Err(Error::validation("spec dimension must be at least 1"));
    }
    if d_h > dim {
        return Err(Error::validation(format!(
            "heavy count {d_h} exceeds dimension {dim}"
        )));
    }
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::validation(format!(
            "tail dof must be positive, got {nu}"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut marginals = Vec::with_capacity(dim);
    for j in 0..dim {
        let heavy = j >= dim - d_h;
        let (kind, n_comp) = if heavy {
            (MarginalFamily::TMixture, 2)
        } else if dim == 50 {
            (MarginalFamily::GaussianMixture, 2)
        } else {
            match j {
                0 | 1 => (MarginalFamily::Gaussian, 1),
                2 => (MarginalFamily::GaussianMixture, 2),
                3 => (MarginalFamily::GaussianMixture, 3),
                _ => (MarginalFamily::GaussianMixture, 2),
            }
        };
        let weight = 1.0 / n_comp as f64;
        let components = (0..n_comp)
            .map(|_| MixtureComponent {
                weight,
                location: rng.random_range(-4.0..4.0),
                scale: rng.random_range(1.0..2.0),
                dof: heavy.then_some(nu),
            })
            .collect();
        marginals.push(MarginalModel { kind, components });
    }

    let max_pairs = dim * (dim - 1) / 2;
    let n_pairs = if dim == 50 { 200 } else { 2 * dim }.min(max_pairs);

    let mut all_pairs: Vec<(usize, usize)> = Vec::with_capacity(max_pairs);
    for i in 0..dim {
        for j in i + 1..dim {
            all_pairs.push((i, j));
        }
    }

    for attempt in 0..10u64 {
        let mut pair_rng = ChaCha12Rng::seed_from_u64(seed);
        pair_rng.set_stream(1 + attempt);
        let mut pairs = all_pairs.clone();
        pairs.shuffle(&mut pair_rng);
        pairs.truncate(n_pairs);

        let mut r = vec![vec![0.0; dim]; dim];
        for (i, row) in r.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for &(i, j) in &pairs {
            r[i][j] = 0.25;
            r[j][i] = 0.25;
        }

        let mut spec = SynthSpec {
            dim,
            marginals: marginals.clone(),
            correlation: r,
            seed,
        };
        if Cholesky::new(spec.correlation_matrix()).is_some() {
            return Ok(spec);
        }
        if let Some(projected) = project_to_correlation(&spec.correlation_matrix()) {
            spec.correlation = (0..dim)
                .map(|i| (0..dim).map(|j| projected[(i, j)]).collect())
                .collect();
            if Cholesky::new(spec.correlation_matrix()).is_some() {
                return Ok(spec);
            }
        }
    }
    Err(Error::validation(
        "could not build a positive-definite correlation matrix in 10 attempts",
    ))
}

/// Nearest-correlation-style projection: clip the eigenvalues at 1e-3,
/// reconstruct, rescale to a unit diagonal, and re-symmetrize.
fn project_to_correlation(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let dim = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let clipped = DVector::from_iterator(dim, eig.eigenvalues.iter().map(|&l| l.max(1e-3)));
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    let scale: Vec<f64> = (0..dim).map(|i| out[(i, i)].sqrt()).collect();
    for i in 0..dim {
        for j in 0..dim {
            out[(i, j)] /= scale[i] * scale[j];
        }
    }
    for i in 0..dim {
        out[(i, i)] = 1.0;
        for j in 0..i {
            let s = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Draws `n` rows from the target: correlated normal scores via the
/// Cholesky factor, Φ to uniforms, then the marginal inverse CDFs.
pub fn sample_spec(spec: &SynthSpec, rng: &mut impl Rng, n: usize) -> Result<Tensor> {
    spec.validate()?;
    let dim = spec.dim;
    let chol = Cholesky::new(spec.correlation_matrix())
        .ok_or_else(|| Error::validation("correlation matrix is not positive definite"))?;
    let l = chol.l();
    let mut data = vec![0.0; n * dim];
    let mut g = vec![0.0; dim];
    for row in 0..n {
        for gj in g.iter_mut() {
            *gj = StandardNormal.sample(rng);
        }
        for j in 0..dim {
            let mut w = 0.0;
            for (k, &gk) in g.iter().enumerate().take(j + 1) {
                w += l[(j, k)] * gk;
            }
            // Φ rounds to 0/1 beyond |w| ≈ 38 / 8.3; keep u strictly inside
            // (0,1) for the inverse CDF.
            let u = norm_cdf(w).clamp(1e-300, 1.0 - 1e-16);
            data[row * dim + j] = spec.marginals[j].icdf(u)?;
        }
    }
    Tensor::matrix(n, dim, data)
}

/// Prepared exact-density evaluator: factors the correlation matrix once.
pub struct CopulaDensity<'a> {
    spec: &'a SynthSpec,
    chol: Cholesky<f64, Dyn>,
    ln_det: f64,
}

impl<'a> CopulaDensity<'a> {
    pub fn new(spec: &'a SynthSpec) -> Result<Self> {
        spec.validate()?;
        let chol = Cholesky::new(spec.correlation_matrix())
            .ok_or_else(|| Error::validation("correlation matrix is not positive definite"))?;
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(CopulaDensity { spec, chol, ln_det })
    }

    /// Exact log density at one point: copula log density at the normal
    /// scores plus the marginal log densities. CDF values are clamped to
    /// `[1e-15, 1 − 1e-15]` before the normal quantile (see [`F_CLAMP`]).
    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        let dim = self.spec.dim;
        if x.len() != dim {
            return Err(Error::validation(format!(
                "point has {} coordinates, spec has {dim}",
                x.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(
                "density evaluation needs finite coordinates".to_string(),
            ));
        }
        let mut w = DVector::zeros(dim);
        let mut sum_marginal = 0.0;
        for j in 0..dim {
            let m = &self.spec.marginals[j];
            let f = m.cdf(x[j]).clamp(F_CLAMP, 1.0 - F_CLAMP);
            w[j] = norm_icdf(f);
            sum_marginal += m.logpdf(x[j]);
        }
        let solved = self.chol.solve(&w);
        let quad = w.dot(&solved) - w.dot(&w);
        Ok(-0.5 * self.ln_det - 0.5 * quad + sum_marginal)
    }

    /// [`logpdf`](Self::logpdf) over every row of a matrix.
    pub fn logpdf_batch(&self, data: &Tensor) -> Result<Vec<f64>> {
        let (n, dim) = data.dims2("copula density batch")?;
        if dim != self.spec.dim {
            return Err(Error::validation(format!(
                "data has {dim} columns, spec has {}",
                self.spec.dim
            )));
        }
        (0..n).map(|i| self.logpdf(data.row(i))).collect()
    }
}

/// One-shot exact log density (factors the matrix per call; use
/// [`CopulaDensity`] for batches).
pub fn exact_logpdf(spec: &SynthSpec, x: &[f64]) -> Result<f64> {
    CopulaDensity::new(spec)?.logpdf(x)
}

/// Row counts of the emitted splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        DatasetSizes {
            train: 15_000,
            val: 10_000,
            test: 75_000,
        }
    }
}

/// Output locations for [`emit_datasets`].
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub spec: PathBuf,
}

impl DatasetPaths {
    /// The conventional layout inside a directory.
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            train: dir.join("train.csv"),
            val: dir.join("val.csv"),
            test: dir.join("test.csv"),
            spec: dir.join("spec.json"),
        }
    }
}

/// Writes the train/validation/test splits as CSV plus the spec document
/// (for later oracle evaluation). Deterministic in `spec.seed`: the three
/// splits are drawn in order from one dedicated RNG stream.
pub fn emit_datasets(
    spec: &SynthSpec,
    sizes: &DatasetSizes,
    paths: &DatasetPaths,
    header: bool,
) -> Result<()> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    rng.set_stream(DATA_STREAM);
    for (n, path) in [
        (sizes.train, &paths.train),
        (sizes.val, &paths.val),
        (sizes.test, &paths.test),
    ] {
        let data = sample_spec(spec, &mut rng, n)?;
        write_csv(path, &data, header)?;
    }
    save_spec(spec, &paths.spec)
}

/// Writes one matrix as CSV with 17-significant-digit decimals (enough to
/// reconstruct every f64 exactly). `header` adds column names c0..c{D−1}.
pub fn write_csv(path: &Path, data: &Tensor, header: bool) -> Result<()> {
    let (n, dim) = data.dims2("csv emission")?;
    let mut w = csv::Writer::from_path(path)?;
    if header {
        w.write_record((0..dim).map(|j| format!("c{j}")))?;
    }
    for i in 0..n {
        w.write_record(data.row(i).iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix back from CSV, tolerating an optional `c0..` header row.
pub fn read_csv(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)?;
    let mut data: Vec<f64> = Vec::new();
    let mut dim = 0usize;
    let mut n = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if i == 0 {
            dim = record.len();
            if record.iter().all(|f| f.starts_with('c') && f[1..].parse::<usize>().is_ok()) {
                continue; // header row
            }
        }
        if record.len() != dim {
            return Err(Error::validation(format!(
                "csv row {i} has {} fields, expected {dim}",
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::validation(format!("csv row {i}: {field:?} is not a number"))
            })?;
            data.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::validation(format!(
            "csv file {} holds no data rows",
            path.display()
        )));
    }
    Tensor::matrix(n, dim, data)
}

#[derive(Serialize, Deserialize)]
struct SpecDoc {
    schema: String,
    #[serde(flatten)]
    spec: SynthSpec,
}

/// Writes the spec as a versioned JSON document.
pub fn save_spec(spec: &SynthSpec, path: &Path) -> Result<()> {
    let doc = SpecDoc {
        schema: SYNTH_SPEC_SCHEMA.to_string(),
        spec: spec.clone(),
    };
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &doc)?;
    Ok(())
}

/// Reads a spec document back, checking the schema tag and invariants.
pub fn load_spec(path: &Path) -> Result<SynthSpec> {
    let file = File::open(path)?;
    let doc: SpecDoc = serde_json::from_reader(BufReader::new(file))?;
    if doc.schema != SYNTH_SPEC_SCHEMA {
        return Err(Error::Schema {
            expected: SYNTH_SPEC_SCHEMA.to_string(),
            found: doc.schema,
        });
    }
    doc.spec.validate()?;
    Ok(doc.spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_gaussian_marginal() -> MarginalModel {
        MarginalModel {
            kind: MarginalFamily::Gaussian,
            components: vec![MixtureComponent {
                weight: 1.0,
                location: 0.0,
                scale: 1.0,
                dof: None,
            }],
        }
    }

    #[test]
    fn make_spec_is_deterministic_and_valid() {
        let a = make_spec(8, 4, 2.0, 77).unwrap();
        let b = make_spec(8, 4, 2.0, 77).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.marginals[0].kind, MarginalFamily::Gaussian);
        assert_eq!(a.marginals[2].components.len(), 2);
        assert_eq!(a.marginals[3].components.len(), 3);
        for j in 4..8 {
            assert_eq!(a.marginals[j].kind, MarginalFamily::TMixture);
            for c in &a.marginals[j].components {
                assert_eq!(c.dof, Some(2.0));
            }
        }
        for m in &a.marginals {
            for c in &m.components {
                assert!((-4.0..4.0).contains(&c.location));
                assert!((1.0..2.0).contains(&c.scale));
            }
        }
        // 16 pairs on 8 coordinates stay positive definite without
        // projection, so the raw {0, 0.25} structure survives exactly.
        let seeded: usize = (0..8)
            .flat_map(|i| (i + 1..8).map(move |j| (i, j)))
            .filter(|&(i, j)| {
                let v = a.correlation[i][j];
                assert!(v == 0.0 || v == 0.25, "unexpected entry {v}");
                v == 0.25
            })
            .count();
        assert_eq!(seeded, 16);
    }

    #[test]
    fn make_spec_without_heavy_marginals_has_no_t_components() {
        let spec = make_spec(8, 0, 2.0, 3).unwrap();
        for m in &spec.marginals {
            assert_ne!(m.kind, MarginalFamily::TMixture);
            assert!(m.components.iter().all(|c| c.dof.is_none()));
        }
    }

    #[test]
    fn fifty_dimensional_recipe_layout() {
        // 200 seeded pairs at dimension 50 produce an indefinite raw matrix,
        // so this path exercises the projection: the seeded entries survive
        // near 0.25, the rest stay small, and the result is PD.
        let spec = make_spec(50, 10, 2.0, 5).unwrap();
        spec.validate().unwrap();
        for j in 0..40 {
            assert_eq!(spec.marginals[j].kind, MarginalFamily::GaussianMixture);
            assert_eq!(spec.marginals[j].components.len(), 2);
        }
        for j in 40..50 {
            assert_eq!(spec.marginals[j].kind, MarginalFamily::TMixture);
        }
        let strong: usize = (0..50)
            .flat_map(|i| (i + 1..50).map(move |j| (i, j)))
            .filter(|&(i, j)| spec.correlation[i][j].abs() > 0.1)
            .count();
        assert_eq!(strong, 200, "expected the 200 seeded pairs to dominate");
        let max_off = (0..50)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| spec.correlation[i][j].abs())
            .fold(0.0, f64::max);
        assert!(max_off <= 0.30, "off-diagonal grew to {max_off}");
        let min_eig = spec
            .correlation_matrix()
            .symmetric_eigen()
            .eigenvalues
            .min();
        assert!(min_eig > 0.0, "min eigenvalue {min_eig}");
    }

    #[test]
    fn symmetric_two_mix_centre_and_median() {
        let m = MarginalModel {
            kind: MarginalFamily::GaussianMixture,
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    location: -2.5,
                    scale: 1.3,
                    dof: None,
                },
                MixtureComponent {
                    weight: 0.5,
                    location: 2.5,
                    scale: 1.3,
                    dof: None,
                },
            ],
        };
        assert!((m.cdf(0.0) - 0.5).abs() < 1e-14);
        assert!(m.icdf(0.5).unwrap().abs() < 1e-9);
    }

    #[test]
    fn gaussian_quantile_against_reference_value() {
        let m = std_gaussian_marginal();
        let q = m.icdf(0.975).unwrap();
        assert!(
            (q - 1.959_963_984_540_054).abs() < 1e-7,
            "Φ⁻¹(0.975) = {q}"
        );
    }

    #[test]
    fn icdf_rejects_u_outside_the_open_interval() {
        let m = std_gaussian_marginal();
        for u in [0.0, 1.0, -0.1, 1.1, f64::NAN] {
            assert!(m.icdf(u).is_err(), "u={u} must be rejected");
        }
    }

    #[test]
    fn exact_logpdf_at_the_origin_of_a_correlated_pair() {
        // Standard normal marginals: the scores are the point itself, the
        // quadratic form dies at the origin, and only −½ ln det R remains
        // of the copula term.
        let spec = SynthSpec {
            dim: 2,
            marginals: vec![std_gaussian_marginal(), std_gaussian_marginal()],
            correlation: vec![vec![1.0, 0.7], vec![0.7, 1.0]],
            seed: 0,
        };
        let lp = exact_logpdf(&spec, &[0.0, 0.0]).unwrap();
        let expected = -0.5 * (1.0 - 0.49f64).ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-10, "{lp} vs {expected}");
    }

    #[test]
    fn identity_copula_reduces_to_marginal_sums() {
        let spec = make_spec(3, 1, 2.5, 11).unwrap();
        let independent = SynthSpec {
            correlation: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            ..spec
        };
        let x = [0.7, -1.3, 4.2];
        let lp = exact_logpdf(&independent, &x).unwrap();
        let sum: f64 = (0..3).map(|j| independent.marginals[j].logpdf(x[j])).sum();
        assert!((lp - sum).abs() < 1e-12, "{lp} vs {sum}");
    }

    #[test]
    fn spec_documents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let spec = make_spec(8, 4, 2.0, 9).unwrap();
        save_spec(&spec, &path).unwrap();
        let loaded = load_spec(&path).unwrap();
        assert_eq!(spec, loaded);

        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace(SYNTH_SPEC_SCHEMA, "tailflow-synthspec-v0");
        std::fs::write(&path, text).unwrap();
        match load_spec(&path) {
            Err(Error::Schema { expected, .. }) => assert_eq!(expected, SYNTH_SPEC_SCHEMA),
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn validation_catches_malformed_marginals() {
        let mut m = std_gaussian_marginal();
        m.components[0].scale = 0.0;
        assert!(m.validate().is_err());

        let unequal = MarginalModel {
            kind: MarginalFamily::GaussianMixture,
            components: vec![
                MixtureComponent {
                    weight: 0.7,
                    location: 0.0,
                    scale: 1.0,
                    dof: None,
                },
                MixtureComponent {
                    weight: 0.3,
                    location: 1.0,
                    scale: 1.0,
                    dof: None,
                },
            ],
        };
        assert!(unequal.validate().is_err(), "unequal weights must fail");

        let stray_dof = MarginalModel {
            kind: MarginalFamily::Gaussian,
            components: vec![MixtureComponent {
                weight: 1.0,
                location: 0.0,
                scale: 1.0,
                dof: Some(2.0),
            }],
        };
        assert!(stray_dof.validate().is_err(), "dof outside a t-mixture");
    }
}
