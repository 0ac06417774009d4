//! Flow layers: autoregressive transforms (affine and rational-quadratic
//! spline), group-restricted permutations, and block-triangular linear maps
//! in LU form.
//!
//! Every layer implements [`FlowLayer`]: a differentiable forward map
//! `z → x` with a per-row log-determinant, an exact inverse `x → z`
//! carrying the inverse map's log-determinant, and a deterministic named
//! parameter list. For any layer and any batch,
//! `logdet_forward(z) + logdet_inverse(forward(z)) = 0` up to roundoff.

mod affine;
mod conditioner;
mod lu;
mod spline;

pub use affine::AffineARLayer;
pub use conditioner::MaskedConditioner;
pub use lu::TailLULayer;
pub use spline::RQSplineARLayer;

use rand::Rng;

use crate::ad::{Node, Parameter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A model parameter together with its optimizer grouping: `weight_decay`
/// marks multiplicative weight matrices, which are the only parameters the
/// trainer decays. Biases, log-scales, and distribution parameters opt out.
#[derive(Clone)]
pub struct ParamSpec {
    pub param: Parameter,
    pub weight_decay: bool,
}

impl ParamSpec {
    pub fn decayed(param: Parameter) -> Self {
        ParamSpec {
            param,
            weight_decay: true,
        }
    }

    pub fn plain(param: Parameter) -> Self {
        ParamSpec {
            param,
            weight_decay: false,
        }
    }
}

/// One invertible block of a flow.
///
/// `forward` maps base-side `z` (shape `[n, D]`) to data-side `x`;
/// `inverse` maps `x` back to `z`. Both return the log-determinant of the
/// *map that was applied*, as a length-`n` vector, so a density evaluation
/// simply adds the `inverse` log-determinants of every layer it passes
/// through.
pub trait FlowLayer {
    /// Dimensionality `D` of the vectors this layer transforms.
    fn dim(&self) -> usize;

    /// Short, unique, human-readable name used in error messages and
    /// checkpoints.
    fn name(&self) -> &str;

    /// Maps `z` (`[n, D]`) to `(x, logdet)` with
    /// `logdet[i] = ln |det ∂x[i]/∂z[i]|`.
    fn forward(&self, z: &Node) -> Result<(Node, Node)>;

    /// Maps `x` (`[n, D]`) to `(z, logdet_inv)` with
    /// `logdet_inv[i] = ln |det ∂z[i]/∂x[i]|`.
    fn inverse(&self, x: &Node) -> Result<(Node, Node)>;

    /// Parameters in a stable, deterministic order.
    fn parameters(&self) -> Vec<ParamSpec>;
}

/// Validates that a layer input is a finite `[n, dim]` matrix and returns
/// `n`. Non-finite entries report the offending coordinate.
pub(crate) fn check_layer_input(x: &Node, dim: usize, layer: &str, role: &str) -> Result<usize> {
    x.with_value(|t| {
        let (rows, cols) = t.dims2("layer input")?;
        if cols != dim {
            return Err(Error::validation(format!(
                "{layer}: expected {role} with {dim} columns, got {cols}"
            )));
        }
        if !t.all_finite() {
            for r in 0..rows {
                for c in 0..cols {
                    let v = t.at(r, c);
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "{layer}: {role} coordinate {c} (row {r}) is {v}"
                        )));
                    }
                }
            }
        }
        Ok(rows)
    })
}

/// Errors when a conditioner output holds a non-finite entry, reporting the
/// coordinate whose parameter block is affected (output columns are laid
/// out parameter-major, so column `c` parameterizes coordinate `c % dim`).
pub(crate) fn check_conditioner_finite(out: &Node, dim: usize, layer: &str) -> Result<()> {
    out.with_value(|t| {
        if t.all_finite() {
            return Ok(());
        }
        let (rows, cols) = t.dims2("conditioner output")?;
        for r in 0..rows {
            for c in 0..cols {
                let v = t.at(r, c);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{layer}: conditioner output for coordinate {} (row {r}) is {v}",
                        c % dim
                    )));
                }
            }
        }
        Err(Error::NonFinite(format!(
            "{layer}: conditioner output is not finite"
        )))
    })
}

/// A constant all-zero vector node of length `n` (the log-determinant of
/// every volume-preserving layer).
pub(crate) fn zeros_logdet(n: usize) -> Node {
    Node::constant(Tensor::zeros(&[n]))
}

/// Permutation acting separately on the light block `0..d_l` and the heavy
/// block `d_l..D`, so marginal tail classes never migrate across the block
/// boundary. Volume-preserving: the log-determinant is identically zero.
#[derive(Debug)]
pub struct GroupPermutation {
    name: String,
    perm: Vec<usize>,
    inv: Vec<usize>,
    d_l: usize,
}

impl GroupPermutation {
    /// Builds from an explicit permutation; rejects any `perm` that is not
    /// a bijection or that moves an index across the `d_l` boundary.
    pub fn new(name: &str, perm: Vec<usize>, d_l: usize) -> Result<Self> {
        let dim = perm.len();
        if d_l > dim {
            return Err(Error::validation(format!(
                "{name}: light block size {d_l} exceeds dimension {dim}"
            )));
        }
        let mut seen = vec![false; dim];
        for (j, &p) in perm.iter().enumerate() {
            if p >= dim {
                return Err(Error::validation(format!(
                    "{name}: permutation entry {p} out of range for dimension {dim}"
                )));
            }
            if seen[p] {
                return Err(Error::validation(format!(
                    "{name}: permutation repeats index {p}"
                )));
            }
            seen[p] = true;
            let crosses = (j < d_l) != (p < d_l);
            if crosses {
                return Err(Error::validation(format!(
                    "{name}: permutation sends position {j} to {p}, crossing the \
                     light/heavy boundary at {d_l}"
                )));
            }
        }
        let mut inv = vec![0usize; dim];
        for (j, &p) in perm.iter().enumerate() {
            inv[p] = j;
        }
        Ok(GroupPermutation {
            name: name.to_string(),
            perm,
            inv,
            d_l,
        })
    }

    /// Draws a uniformly random within-group permutation.
    pub fn random(name: &str, dim: usize, d_l: usize, rng: &mut impl Rng) -> Result<Self> {
        if d_l > dim {
            return Err(Error::validation(format!(
                "{name}: light block size {d_l} exceeds dimension {dim}"
            )));
        }
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..dim).collect();
        perm[..d_l].shuffle(rng);
        perm[d_l..].shuffle(rng);
        GroupPermutation::new(name, perm, d_l)
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn light_block(&self) -> usize {
        self.d_l
    }
}

impl FlowLayer for GroupPermutation {
    fn dim(&self) -> usize {
        self.perm.len()
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, z: &Node) -> Result<(Node, Node)> {
        let n = check_layer_input(z, self.perm.len(), &self.name, "input")?;
        Ok((z.permute_cols(&self.perm)?, zeros_logdet(n)))
    }

    fn inverse(&self, x: &Node) -> Result<(Node, Node)> {
        let n = check_layer_input(x, self.perm.len(), &self.name, "input")?;
        Ok((x.permute_cols(&self.inv)?, zeros_logdet(n)))
    }

    fn parameters(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn group_permutation_rejects_crossing_and_non_bijective_perms() {
        // 2 ↔ 1 crosses the boundary at d_l = 2.
        let err = GroupPermutation::new("p", vec![0, 2, 1, 3], 2).unwrap_err();
        assert!(err.is_validation(), "crossing perm must be a validation error");
        let err = GroupPermutation::new("p", vec![0, 0, 2, 3], 2).unwrap_err();
        assert!(err.is_validation());
        let err = GroupPermutation::new("p", vec![0, 1, 2, 7], 2).unwrap_err();
        assert!(err.is_validation());
        assert!(GroupPermutation::new("p", vec![1, 0, 3, 2], 2).is_ok());
    }

    #[test]
    fn random_group_permutations_respect_the_boundary() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = GroupPermutation::random("p", 9, 4, &mut rng).unwrap();
            for (j, &t) in p.perm().iter().enumerate() {
                assert_eq!(j < 4, t < 4, "perm {:?} crosses at {j}", p.perm());
            }
        }
    }

    #[test]
    fn group_permutation_round_trips_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let layer = GroupPermutation::random("p", 6, 3, &mut rng).unwrap();
        let z = Node::constant(Tensor::matrix(4, 6, (0..24).map(|v| v as f64).collect()).unwrap());
        let (x, ld) = layer.forward(&z).unwrap();
        let (z2, ld_inv) = layer.inverse(&x).unwrap();
        assert_eq!(z.value().data(), z2.value().data());
        assert!(ld.value().data().iter().all(|&v| v == 0.0));
        assert!(ld_inv.value().data().iter().all(|&v| v == 0.0));
    }
}
