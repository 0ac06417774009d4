//! Affine autoregressive transform.
//!
//! Coordinate-wise `x_j = μ_j(z_{<j}) + exp(s_j(z_{<j})) · z_j`, with both
//! conditioner outputs produced by one [`MaskedConditioner`] pass. The log
//! scale is soft-clamped to `5·tanh(s/5)`, keeping `exp(s)` within
//! `[e⁻⁵, e⁵]` so a light-tailed input cannot be inflated into a
//! heavy-tailed output. The forward map needs a single conditioner pass;
//! the inverse reconstructs coordinates sequentially in `D` passes, and
//! gradients flow through that recursion.

use rand::Rng;

use crate::ad::{stack_cols, Node};
use crate::error::Result;
use crate::layers::{
    check_conditioner_finite, check_layer_input, FlowLayer, MaskedConditioner, ParamSpec,
};
use crate::tensor::Tensor;

/// Bound of the soft clamp on the log scale.
const LOG_SCALE_BOUND: f64 = 5.0;

pub struct AffineARLayer {
    name: String,
    dim: usize,
    cond: MaskedConditioner,
}

fn soft_clamp(s: &Node) -> Node {
    s.scale(1.0 / LOG_SCALE_BOUND).tanh().scale(LOG_SCALE_BOUND)
}

impl AffineARLayer {
    pub fn new(name: &str, dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let cond = MaskedConditioner::new(&format!("{name}.cond"), dim, 2, hidden, rng)?;
        Ok(AffineARLayer {
            name: name.to_string(),
            dim,
            cond,
        })
    }

    /// The conditioner, exposed for structure tests.
    pub fn conditioner(&self) -> &MaskedConditioner {
        &self.cond
    }

    /// Splits a conditioner output into `(μ, s)` with the log scale
    /// already soft-clamped.
    fn shift_and_logscale(&self, out: &Node) -> Result<(Node, Node)> {
        let mu = out.narrow_cols(0, self.dim)?;
        let s = soft_clamp(&out.narrow_cols(self.dim, self.dim)?);
        Ok((mu, s))
    }
}

impl FlowLayer for AffineARLayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, z: &Node) -> Result<(Node, Node)> {
        check_layer_input(z, self.dim, &self.name, "input")?;
        let out = self.cond.forward(z)?;
        check_conditioner_finite(&out, self.dim, &self.name)?;
        let (mu, s) = self.shift_and_logscale(&out)?;
        let x = z.mul(&s.exp())?.add(&mu)?;
        let logdet = s.sum_axis(1)?;
        Ok((x, logdet))
    }

    fn inverse(&self, x: &Node) -> Result<(Node, Node)> {
        let n = check_layer_input(x, self.dim, &self.name, "input")?;
        let mut z_cols: Vec<Node> = (0..self.dim)
            .map(|_| Node::constant(Tensor::zeros(&[n])))
            .collect();
        let mut neg_logdet: Option<Node> = None;
        for j in 0..self.dim {
            let z_cur = stack_cols(&z_cols)?;
            let out = self.cond.forward(&z_cur)?;
            check_conditioner_finite(&out, self.dim, &self.name)?;
            let mu_j = out.col(j)?;
            let s_j = soft_clamp(&out.col(self.dim + j)?);
            // z_j = (x_j − μ_j) · exp(−s_j); block j of the conditioner
            // output depends only on columns < j, which are already final.
            let z_j = x.col(j)?.sub(&mu_j)?.mul(&s_j.neg().exp())?;
            z_cols[j] = z_j;
            neg_logdet = Some(match neg_logdet {
                Some(acc) => acc.add(&s_j)?,
                None => s_j,
            });
        }
        let z = stack_cols(&z_cols)?;
        let logdet_inv = neg_logdet.expect("dim ≥ 1").neg();
        Ok((z, logdet_inv))
    }

    fn parameters(&self) -> Vec<ParamSpec> {
        self.cond.parameters()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn fresh_layer_is_the_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let layer = AffineARLayer::new("a0", 4, &[16], &mut rng).unwrap();
        let z = Node::constant(
            Tensor::matrix(3, 4, (0..12).map(|v| 0.3 * v as f64 - 1.0).collect()).unwrap(),
        );
        let (x, ld) = layer.forward(&z).unwrap();
        assert_eq!(x.value().data(), z.value().data());
        assert!(ld.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_dimensional_shift_and_scale_matches_hand_computation() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let layer = AffineARLayer::new("a0", 1, &[], &mut rng).unwrap();
        // The conditioner is a bias: [μ, s_raw]. Pick s_raw so the
        // soft-clamped log scale is exactly ln 3.
        let target_s = 3.0_f64.ln();
        let raw = LOG_SCALE_BOUND * (target_s / LOG_SCALE_BOUND).atanh();
        let bias = &layer.parameters()[0].param;
        bias.set_value(Tensor::vector(vec![2.0, raw]));
        let z = Node::constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let (x, ld) = layer.forward(&z).unwrap();
        assert!((x.value().data()[0] - 5.0).abs() < 1e-12);
        assert!((ld.value().data()[0] - target_s).abs() < 1e-12);
        let (z2, ld_inv) = layer.inverse(&x).unwrap();
        assert!((z2.value().data()[0] - 1.0).abs() < 1e-12);
        assert!((ld_inv.value().data()[0] + target_s).abs() < 1e-12);
    }

    #[test]
    fn non_finite_conditioner_output_names_the_coordinate() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let layer = AffineARLayer::new("a0", 3, &[8], &mut rng).unwrap();
        // Poison the final bias entry for coordinate 1's shift.
        let params = layer.parameters();
        let bias = params
            .iter()
            .map(|s| &s.param)
            .find(|p| p.name() == "a0.cond.b1")
            .unwrap();
        let mut v = bias.value();
        v.data_mut()[1] = f64::NAN;
        bias.set_value(v);
        let z = Node::constant(Tensor::zeros(&[2, 3]));
        let err = layer.forward(&z).unwrap_err();
        match err {
            Error::NonFinite(msg) => {
                assert!(msg.contains("coordinate 1"), "message was: {msg}")
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
