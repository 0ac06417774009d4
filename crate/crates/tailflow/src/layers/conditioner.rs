//! Masked autoregressive conditioner.
//!
//! A feed-forward network whose binary weight masks enforce the exact
//! autoregressive property: the parameter block for coordinate `j` depends
//! on input coordinates `0..j` only — never on coordinate `j` itself or on
//! later ones. Masks follow the MADE construction: inputs carry degrees
//! `1..=D`, hidden units cycle through degrees `1..=D−1`, a connection into
//! a hidden unit requires the receiving degree to be ≥ the sending degree,
//! and a connection into the output requires strict inequality.

use rand::Rng;

use crate::ad::{Node, Parameter};
use crate::error::{Error, Result};
use crate::layers::ParamSpec;
use crate::tensor::Tensor;

pub struct MaskedConditioner {
    dim: usize,
    params_per_coord: usize,
    /// Weight matrices, stored `[fan_in, fan_out]` for `h · W` products.
    weights: Vec<Parameter>,
    /// One bias vector per affine stage (always one more stage than
    /// activations; for `dim == 1` the network is the output bias alone).
    biases: Vec<Parameter>,
    /// Constant 0/1 masks, one per weight matrix.
    masks: Vec<Node>,
}

fn masked_matrix(
    in_degs: &[usize],
    out_degs: &[usize],
    strict_output: bool,
) -> Tensor {
    let (rows, cols) = (in_degs.len(), out_degs.len());
    let mut m = Tensor::zeros(&[rows, cols]);
    for (i, &deg_in) in in_degs.iter().enumerate() {
        for (o, &deg_out) in out_degs.iter().enumerate() {
            let connected = if strict_output {
                deg_out > deg_in
            } else {
                deg_out >= deg_in
            };
            if connected {
                m.data_mut()[i * cols + o] = 1.0;
            }
        }
    }
    m
}

impl MaskedConditioner {
    /// Builds a conditioner mapping `[n, dim]` inputs to `[n,
    /// params_per_coord · dim]` outputs, laid out parameter-major: output
    /// column `p · dim + j` is parameter `p` of coordinate `j`.
    ///
    /// Hidden weights are initialized uniform in `±1/√fan_in`; the final
    /// stage starts at exactly zero so a freshly built conditioner outputs
    /// the zero vector (making enclosing transforms start at the
    /// identity). Hidden widths of at least `dim − 1` are needed for every
    /// coordinate to receive full conditioning context.
    pub fn new(
        name: &str,
        dim: usize,
        params_per_coord: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 || params_per_coord == 0 {
            return Err(Error::validation(format!(
                "{name}: conditioner needs dim ≥ 1 and params_per_coord ≥ 1, \
                 got dim={dim}, params_per_coord={params_per_coord}"
            )));
        }
        if let Some(&w) = hidden.iter().find(|&&w| w == 0) {
            return Err(Error::validation(format!(
                "{name}: hidden width must be positive, got {w}"
            )));
        }
        let out_dim = dim * params_per_coord;
        if dim == 1 {
            // The single coordinate has no predecessors, so the whole
            // network degenerates to one trainable constant block.
            let bias = Parameter::new(format!("{name}.b0"), Tensor::zeros(&[out_dim]));
            return Ok(MaskedConditioner {
                dim,
                params_per_coord,
                weights: Vec::new(),
                biases: vec![bias],
                masks: Vec::new(),
            });
        }

        let in_degs: Vec<usize> = (1..=dim).collect();
        let out_degs: Vec<usize> = (0..out_dim).map(|o| (o % dim) + 1).collect();
        let mut stage_degs: Vec<Vec<usize>> = vec![in_degs];
        for &width in hidden {
            stage_degs.push((0..width).map(|u| 1 + u % (dim - 1)).collect());
        }

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut masks = Vec::new();
        for s in 0..stage_degs.len() {
            let prev = &stage_degs[s];
            let last = s + 1 == stage_degs.len();
            let (next, strict): (&[usize], bool) = if last {
                (&out_degs, true)
            } else {
                (&stage_degs[s + 1], false)
            };
            let (fan_in, fan_out) = (prev.len(), next.len());
            let mut w = Tensor::zeros(&[fan_in, fan_out]);
            if !last {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in w.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            weights.push(Parameter::new(format!("{name}.w{s}"), w));
            biases.push(Parameter::new(
                format!("{name}.b{s}"),
                Tensor::zeros(&[fan_out]),
            ));
            masks.push(Node::constant(masked_matrix(prev, next, strict)));
        }

        Ok(MaskedConditioner {
            dim,
            params_per_coord,
            weights,
            biases,
            masks,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params_per_coord(&self) -> usize {
        self.params_per_coord
    }

    pub fn out_dim(&self) -> usize {
        self.dim * self.params_per_coord
    }

    /// Runs the network on a `[n, dim]` batch, returning `[n, out_dim]`.
    pub fn forward(&self, x: &Node) -> Result<Node> {
        let n = x.with_value(|t| {
            let (rows, cols) = t.dims2("conditioner input")?;
            if cols != self.dim {
                return Err(Error::validation(format!(
                    "conditioner expects {} columns, got {cols}",
                    self.dim
                )));
            }
            Ok(rows)
        })?;
        if self.weights.is_empty() {
            return self.biases[0].node().expand_rows(n);
        }
        let mut h = x.clone();
        for s in 0..self.weights.len() {
            let w = self.weights[s].node().mul(&self.masks[s])?;
            h = h.matmul(&w)?.add(&self.biases[s].node().expand_rows(n)?)?;
            if s + 1 < self.weights.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn parameters(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(ParamSpec::decayed(w.clone()));
            out.push(ParamSpec::plain(b.clone()));
        }
        if self.weights.is_empty() {
            out.push(ParamSpec::plain(self.biases[0].clone()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    fn jitter(cond: &MaskedConditioner, rng: &mut ChaCha12Rng) {
        let noise = Normal::new(0.0, 0.5).unwrap();
        for spec in cond.parameters() {
            let mut v = spec.param.value();
            for d in v.data_mut() {
                *d += noise.sample(rng);
            }
            spec.param.set_value(v);
        }
    }

    #[test]
    fn fresh_conditioner_outputs_exactly_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let cond = MaskedConditioner::new("c", 4, 2, &[16, 16], &mut rng).unwrap();
        let x = Node::constant(Tensor::matrix(3, 4, vec![0.3; 12]).unwrap());
        let out = cond.forward(&x).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), vec![3, 8]);
    }

    #[test]
    fn output_block_j_ignores_inputs_at_and_after_j() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let dim = 5;
        let cond = MaskedConditioner::new("c", dim, 3, &[16, 16], &mut rng).unwrap();
        jitter(&cond, &mut rng);
        let base: Vec<f64> = (0..dim).map(|i| 0.1 + 0.2 * i as f64).collect();
        let out0 = cond
            .forward(&Node::constant(Tensor::matrix(1, dim, base.clone()).unwrap()))
            .unwrap()
            .value();
        for j in 0..dim {
            let mut moved = base.clone();
            for (i, v) in moved.iter_mut().enumerate() {
                if i >= j {
                    *v += 1.7;
                }
            }
            let out1 = cond
                .forward(&Node::constant(Tensor::matrix(1, dim, moved).unwrap()))
                .unwrap()
                .value();
            for p in 0..3 {
                let c = p * dim + j;
                assert_eq!(
                    out0.at(0, c),
                    out1.at(0, c),
                    "block {j} param {p} moved when inputs ≥ {j} changed"
                );
            }
            // Conversely, perturbing an earlier coordinate must reach
            // block j (full conditioning context, jittered weights).
            if j >= 1 {
                let mut upstream = base.clone();
                upstream[j - 1] += 1.7;
                let out2 = cond
                    .forward(&Node::constant(Tensor::matrix(1, dim, upstream).unwrap()))
                    .unwrap()
                    .value();
                let touched = (0..3).any(|p| out2.at(0, p * dim + j) != out0.at(0, p * dim + j));
                assert!(touched, "block {j} is blind to coordinate {}", j - 1);
            }
        }
    }

    #[test]
    fn one_dimensional_conditioner_is_bias_only() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let cond = MaskedConditioner::new("c", 1, 2, &[8], &mut rng).unwrap();
        assert_eq!(cond.parameters().len(), 1);
        let x = Node::constant(Tensor::matrix(4, 1, vec![1.0, -2.0, 3.0, 9.0]).unwrap());
        let out = cond.forward(&x).unwrap().value();
        // Same output row regardless of input.
        for r in 0..4 {
            assert_eq!(out.at(r, 0), out.at(0, 0));
            assert_eq!(out.at(r, 1), out.at(0, 1));
        }
    }

    #[test]
    fn rejects_degenerate_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        assert!(MaskedConditioner::new("c", 0, 2, &[8], &mut rng).is_err());
        assert!(MaskedConditioner::new("c", 3, 0, &[8], &mut rng).is_err());
        assert!(MaskedConditioner::new("c", 3, 2, &[0], &mut rng).is_err());
    }
}
