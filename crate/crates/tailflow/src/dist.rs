//! Univariate Normal and Student-t densities with a differentiable degree of
//! freedom, their samplers, and the mean-field product base distribution.
//!
//! The degree of freedom is parameterized as `ν = 1 + softplus(raw)` so that
//! `ν > 1` always holds: the mean of the marginal exists and the gamma-function
//! arguments stay away from their poles while `raw` ranges over all reals.
//! Requested initial values at or below `1 + 1e-3` are floored there.
//!
//! Normal sampling uses the ziggurat algorithm (via `rand_distr`'s
//! `StandardNormal`); Student-t sampling composes it with a Gamma sampler
//! through the classical representation `t = N(0,1) / √(χ²_ν / ν)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::ad::{Node, Parameter};
use crate::error::{Error, Result};
use crate::math::{self, LN_2PI};
use crate::tensor::Tensor;

/// Floor applied to `softplus(raw)` at initialization, i.e. `ν ≥ 1.001`.
const NU_EXCESS_FLOOR: f64 = 1e-3;

/// A degree-of-freedom parameter, `ν = 1 + softplus(raw)`.
///
/// Cloning shares the underlying raw parameter, which is how several marginals
/// can train a single common degree of freedom.
#[derive(Clone, Debug)]
pub struct DofParam {
    raw: Parameter,
    trainable: bool,
}

impl DofParam {
    /// Creates a parameter whose initial value of `1 + softplus(raw)` equals
    /// `nu_init` (floored to `1 + 1e-3` when `nu_init` is at or below that).
    pub fn new(name: &str, nu_init: f64, trainable: bool) -> Result<Self> {
        if !nu_init.is_finite() || nu_init <= 0.0 {
            return Err(Error::validation(format!(
                "degree of freedom init must be finite and positive, got {nu_init}"
            )));
        }
        let excess = (nu_init - 1.0).max(NU_EXCESS_FLOOR);
        let raw = math::softplus_inv(excess);
        Ok(Self {
            raw: Parameter::new(name, Tensor::scalar(raw)),
            trainable,
        })
    }

    /// The degree of freedom as a graph node (differentiable in `raw`).
    pub fn nu_node(&self) -> Node {
        self.raw.node().softplus().add_const(1.0)
    }

    /// Current value of the degree of freedom.
    pub fn nu(&self) -> f64 {
        1.0 + math::softplus(self.raw_value())
    }

    /// Current raw (pre-softplus) value.
    pub fn raw_value(&self) -> f64 {
        self.raw
            .value()
            .scalar_value()
            .expect("dof raw parameter is scalar")
    }

    /// Overwrites the raw value (used when restoring a checkpoint).
    pub fn set_raw_value(&self, raw: f64) {
        self.raw.set_value(Tensor::scalar(raw));
    }

    /// The underlying raw parameter.
    pub fn raw_parameter(&self) -> &Parameter {
        &self.raw
    }

    /// Whether the optimizer should update this parameter.
    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// One coordinate of the base distribution.
#[derive(Clone, Debug)]
pub enum MarginalKind {
    Normal,
    StudentT { dof: DofParam },
}

impl MarginalKind {
    pub fn is_normal(&self) -> bool {
        matches!(self, MarginalKind::Normal)
    }
}

/// The mean-field product base distribution: `d_l` leading Normal marginals
/// followed by Student-t marginals, together with the permutation that maps
/// base coordinates back to original data coordinates.
#[derive(Clone, Debug)]
pub struct BaseSpec {
    marginals: Vec<MarginalKind>,
    d_l: usize,
    reorder: Vec<usize>,
}

impl BaseSpec {
    /// Validates the light-first layout and that `reorder` is a permutation.
    ///
    /// `reorder[j]` is the original data coordinate shown at base coordinate
    /// `j`, so light-tailed coordinates come first in base ordering.
    pub fn new(marginals: Vec<MarginalKind>, d_l: usize, reorder: Vec<usize>) -> Result<Self> {
        let dim = marginals.len();
        if dim == 0 {
            return Err(Error::validation("base distribution needs at least one marginal"));
        }
        if d_l > dim {
            return Err(Error::validation(format!(
                "light count {d_l} exceeds dimension {dim}"
            )));
        }
        for (j, m) in marginals.iter().enumerate() {
            let want_normal = j < d_l;
            if m.is_normal() != want_normal {
                return Err(Error::validation(format!(
                    "marginal {j} must be {} (light count {d_l})",
                    if want_normal { "Normal" } else { "StudentT" }
                )));
            }
        }
        if reorder.len() != dim {
            return Err(Error::validation(format!(
                "reorder length {} does not match dimension {dim}",
                reorder.len()
            )));
        }
        let mut seen = vec![false; dim];
        for &idx in &reorder {
            if idx >= dim || seen[idx] {
                return Err(Error::validation(format!(
                    "reorder {reorder:?} is not a permutation of 0..{dim}"
                )));
            }
            seen[idx] = true;
        }
        Ok(Self {
            marginals,
            d_l,
            reorder,
        })
    }

    /// All-Normal base in natural order (the plain-flow configuration).
    pub fn all_normal(dim: usize) -> Result<Self> {
        Self::new(
            vec![MarginalKind::Normal; dim],
            dim,
            (0..dim).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn d_l(&self) -> usize {
        self.d_l
    }

    pub fn marginals(&self) -> &[MarginalKind] {
        &self.marginals
    }

    pub fn reorder(&self) -> &[usize] {
        &self.reorder
    }

    /// Raw dof parameters the optimizer should update, deduplicated so a
    /// shared degree of freedom appears once.
    pub fn trainable_dofs(&self) -> Vec<Parameter> {
        let mut out: Vec<Parameter> = Vec::new();
        for m in &self.marginals {
            if let MarginalKind::StudentT { dof } = m {
                if dof.trainable()
                    && !out.iter().any(|p| p.node().id() == dof.raw_parameter().node().id())
                {
                    out.push(dof.raw_parameter().clone());
                }
            }
        }
        out
    }

    /// Every distinct raw dof parameter, trainable or fixed, in base
    /// order of first appearance (a checkpoint must restore fixed degrees
    /// of freedom too).
    pub fn all_dof_params(&self) -> Vec<Parameter> {
        let mut out: Vec<Parameter> = Vec::new();
        for m in &self.marginals {
            if let MarginalKind::StudentT { dof } = m {
                if !out
                    .iter()
                    .any(|p| p.node().id() == dof.raw_parameter().node().id())
                {
                    out.push(dof.raw_parameter().clone());
                }
            }
        }
        out
    }

    /// Current degrees of freedom for the Student-t block (base order).
    pub fn dof_values(&self) -> Vec<f64> {
        self.marginals
            .iter()
            .filter_map(|m| match m {
                MarginalKind::Normal => None,
                MarginalKind::StudentT { dof } => Some(dof.nu()),
            })
            .collect()
    }

    /// Log-density of each row of `z` (shape `[n, D]`) under the product
    /// base, differentiable through `z` and any trainable degrees of freedom.
    pub fn base_logpdf(&self, z: &Node) -> Result<Node> {
        let (_, cols) = z.value().dims2("base_logpdf")?;
        let dim = self.dim();
        if cols != dim {
            return Err(Error::Shape {
                op: "base_logpdf",
                lhs: z.shape(),
                rhs: vec![dim],
            });
        }
        let mut total: Option<Node> = None;
        if self.d_l > 0 {
            let block = z.narrow_cols(0, self.d_l)?;
            let light = block
                .mul(&block)?
                .sum_axis(1)?
                .scale(-0.5)
                .add_const(-0.5 * LN_2PI * self.d_l as f64);
            total = Some(light);
        }
        for j in self.d_l..dim {
            let MarginalKind::StudentT { dof } = &self.marginals[j] else {
                unreachable!("constructor guarantees StudentT after the light block");
            };
            let col = z.col(j)?;
            let term = student_t_logpdf_node(&col, &dof.nu_node())?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(total.expect("dimension is positive"))
    }

    /// Log-density of a single point, without building a graph.
    pub fn base_logpdf_scalar(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::Shape {
                op: "base_logpdf",
                lhs: vec![z.len()],
                rhs: vec![self.dim()],
            });
        }
        let mut total = 0.0;
        for (j, m) in self.marginals.iter().enumerate() {
            total += match m {
                MarginalKind::Normal => math::norm_logpdf(z[j]),
                MarginalKind::StudentT { dof } => student_t_logpdf(z[j], dof.nu())?,
            };
        }
        Ok(total)
    }

    /// Draws `n` rows, each column from its marginal independently.
    pub fn base_sample(&self, rng: &mut impl Rng, n: usize) -> Result<Tensor> {
        let dim = self.dim();
        let mut data = vec![0.0; n * dim];
        for (j, m) in self.marginals.iter().enumerate() {
            let col = match m {
                MarginalKind::Normal => sample_normal(rng, n),
                MarginalKind::StudentT { dof } => sample_student_t(rng, dof.nu(), n)?,
            };
            for (i, v) in col.into_iter().enumerate() {
                data[i * dim + j] = v;
            }
        }
        Tensor::matrix(n, dim, data)
    }
}

/// `ln N(x | 0, 1) = −x²/2 − ln(2π)/2`.
pub fn normal_logpdf(x: f64) -> f64 {
    math::norm_logpdf(x)
}

/// Elementwise standard-normal log-density of a node of any shape.
pub fn normal_logpdf_node(x: &Node) -> Result<Node> {
    Ok(x.mul(x)?.scale(-0.5).add_const(-0.5 * LN_2PI))
}

/// Log-density of the standard (unit-scale) Student-t distribution:
/// `ln Γ((ν+1)/2) − ln Γ(ν/2) − ln(νπ)/2 − ((ν+1)/2)·ln(1 + x²/ν)`.
pub fn student_t_logpdf(x: f64, nu: f64) -> Result<f64> {
    if !nu.is_finite() || nu <= 0.0 {
        return Err(Error::validation(format!(
            "degree of freedom must be positive, got {nu}"
        )));
    }
    let c = math::ln_gamma(0.5 * (nu + 1.0))
        - math::ln_gamma(0.5 * nu)
        - 0.5 * (nu.ln() + std::f64::consts::PI.ln());
    Ok(c - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p())
}

/// Node version of [`student_t_logpdf`]: `x` may have any shape, `nu` must be
/// a scalar node. Differentiable through both.
pub fn student_t_logpdf_node(x: &Node, nu: &Node) -> Result<Node> {
    let nu_val = nu.scalar_value()?;
    if !nu_val.is_finite() || nu_val <= 0.0 {
        return Err(Error::validation(format!(
            "degree of freedom must be positive, got {nu_val}"
        )));
    }
    let half = nu.scale(0.5);
    let c = half
        .add_const(0.5)
        .ln_gamma()
        .sub(&half.ln_gamma())?
        .sub(&nu.ln().scale(0.5))?
        .add_const(-0.5 * std::f64::consts::PI.ln());
    let ratio = x.mul(x)?.div(nu)?;
    let tail = ratio.add_const(1.0).ln().mul(&nu.add_const(1.0).scale(-0.5))?;
    tail.add(&c)
}

/// `n` i.i.d. standard-normal draws (ziggurat).
pub fn sample_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `n` i.i.d. Student-t draws via `N(0,1) / √(χ²_ν / ν)`, with the
/// chi-squared variate drawn as `Gamma(ν/2, scale 2)`.
pub fn sample_student_t(rng: &mut impl Rng, nu: f64, n: usize) -> Result<Vec<f64>> {
    if !nu.is_finite() || nu <= 0.0 {
        return Err(Error::validation(format!(
            "degree of freedom must be positive, got {nu}"
        )));
    }
    let gamma = Gamma::new(0.5 * nu, 2.0)
        .map_err(|e| Error::validation(format!("chi-squared sampler setup failed: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let mut chi2: f64 = gamma.sample(rng);
            while chi2 <= 0.0 {
                chi2 = gamma.sample(rng);
            }
            z / (chi2 / nu).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Node;

    #[test]
    fn normal_logpdf_reference_points() {
        assert!((normal_logpdf(0.0) - -0.9189385332046727).abs() < 1e-12);
        assert!((normal_logpdf(1.0) - -1.4189385332046727).abs() < 1e-12);
        assert!((normal_logpdf(10.0) - -50.918938533204674).abs() < 1e-12);
    }

    #[test]
    fn student_t_logpdf_cauchy_points() {
        // ν=1 is the Cauchy density 1/(π(1+x²)).
        assert!((student_t_logpdf(0.0, 1.0).unwrap() - -1.1447298858494002).abs() < 1e-12);
        assert!((student_t_logpdf(1.0, 1.0).unwrap() - -1.8378770664093453).abs() < 1e-12);
        // ν=2 at the mode: −(3/2)·ln 2.
        assert!((student_t_logpdf(0.0, 2.0).unwrap() - -1.0397207708399179).abs() < 1e-12);
    }

    #[test]
    fn student_t_rejects_bad_dof() {
        assert!(student_t_logpdf(0.0, 0.0).is_err());
        assert!(student_t_logpdf(0.0, -3.0).is_err());
        assert!(sample_student_t(&mut rand::rng(), f64::NAN, 1).is_err());
    }

    #[test]
    fn node_version_matches_scalar_version() {
        for &nu in &[0.7, 1.0, 2.5, 30.0] {
            for &x in &[-3.0, -0.5, 0.0, 1.7] {
                let xn = Node::constant(Tensor::vector(vec![x]));
                let nun = Node::constant(Tensor::scalar(nu));
                let got = student_t_logpdf_node(&xn, &nun).unwrap().value().data()[0];
                let want = student_t_logpdf(x, nu).unwrap();
                assert!(
                    (got - want).abs() < 1e-12,
                    "x={x} nu={nu}: node {got} vs scalar {want}"
                );
            }
        }
    }

    #[test]
    fn dof_param_roundtrips_init_value() {
        let dof = DofParam::new("nu", 2.0, true).unwrap();
        assert!((dof.nu() - 2.0).abs() < 1e-12);
        // ln(e − 1): softplus_inv(1).
        assert!((dof.raw_value() - (std::f64::consts::E - 1.0).ln()).abs() < 1e-12);
        // Values at/below the floor are clamped to 1.001.
        let low = DofParam::new("nu", 0.5, false).unwrap();
        assert!((low.nu() - 1.001).abs() < 1e-12);
        assert!(DofParam::new("nu", 0.0, true).is_err());
    }

    #[test]
    fn base_spec_enforces_light_first_layout() {
        let t = || MarginalKind::StudentT {
            dof: DofParam::new("nu", 3.0, false).unwrap(),
        };
        assert!(BaseSpec::new(vec![MarginalKind::Normal, t()], 1, vec![0, 1]).is_ok());
        // Heavy marginal inside the light block.
        assert!(BaseSpec::new(vec![t(), MarginalKind::Normal], 1, vec![0, 1]).is_err());
        // Normal marginal inside the heavy block.
        assert!(BaseSpec::new(vec![MarginalKind::Normal; 2], 1, vec![0, 1]).is_err());
        // Non-permutation reorder.
        assert!(BaseSpec::new(vec![MarginalKind::Normal; 2], 2, vec![0, 0]).is_err());
        assert!(BaseSpec::new(vec![MarginalKind::Normal; 2], 2, vec![1, 2]).is_err());
    }

    #[test]
    fn base_logpdf_reference_points() {
        // Two standard normals at the origin: −ln(2π).
        let spec = BaseSpec::all_normal(2).unwrap();
        let z = Node::constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let got = spec.base_logpdf(&z).unwrap().value().data()[0];
        assert!((got - -1.8378770664093453).abs() < 1e-12);

        // Normal + Cauchy at the origin: sum of the marginal constants.
        let spec = BaseSpec::new(
            vec![
                MarginalKind::Normal,
                MarginalKind::StudentT {
                    dof: DofParam::new("nu", 1.0, false).unwrap(),
                },
            ],
            1,
            vec![0, 1],
        )
        .unwrap();
        // The dof floor moves ν=1 to 1.001; evaluate with the scalar formula
        // at the same (floored) value rather than the Cauchy constant.
        let nu = spec.dof_values()[0];
        let want = normal_logpdf(0.0) + student_t_logpdf(0.0, nu).unwrap();
        let z = Node::constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let got = spec.base_logpdf(&z).unwrap().value().data()[0];
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn shared_dof_lists_once() {
        let shared = DofParam::new("nu_shared", 3.0, true).unwrap();
        let marginals = (0..4)
            .map(|_| MarginalKind::StudentT { dof: shared.clone() })
            .collect();
        let spec = BaseSpec::new(marginals, 0, (0..4).collect()).unwrap();
        assert_eq!(spec.trainable_dofs().len(), 1);
        assert_eq!(spec.dof_values(), vec![3.0; 4]);
    }
}
