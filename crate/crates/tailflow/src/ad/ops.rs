//! Differentiable operations on [`Node`]s.
//!
//! Each operation computes its value through [`Tensor`] primitives and
//! records one vector–Jacobian closure per differentiable input. Elementwise
//! binaries follow the crate broadcasting rule (scalar↔tensor or exact shape
//! match); structural ops (`narrow_cols`, `expand_rows`, …) exist precisely so
//! callers never need silent broadcasting.

use crate::error::Result;
use crate::math;
use crate::tensor::{broadcast_zip, Tensor};

use super::{Edge, Node};

/// Elementwise unary op from a value map and its pointwise derivative.
fn unary(
    x: &Node,
    fwd: impl Fn(f64) -> f64,
    deriv: impl Fn(f64) -> f64 + 'static,
) -> Node {
    let value = x.inner.value.borrow().map(&fwd);
    let xn = x.clone();
    Node::from_op(
        value,
        vec![Edge {
            parent: x.clone(),
            vjp: Box::new(move |g| {
                let partial = xn.inner.value.borrow().map(&deriv);
                broadcast_zip("unary-vjp", &partial, g, |p, gg| p * gg)
            }),
        }],
    )
}

/// Elementwise binary op from a value map and both pointwise partials
/// (each receives the broadcast element pair `(a, b)`).
fn binary(
    op: &'static str,
    a: &Node,
    b: &Node,
    f: fn(f64, f64) -> f64,
    dfa: fn(f64, f64) -> f64,
    dfb: fn(f64, f64) -> f64,
) -> Result<Node> {
    let value = {
        let av = a.inner.value.borrow();
        let bv = b.inner.value.borrow();
        broadcast_zip(op, &av, &bv, f)?
    };

    fn side_vjp(
        op: &'static str,
        this: &Node,
        other: &Node,
        df: fn(f64, f64) -> f64,
        this_is_lhs: bool,
    ) -> Edge {
        let this_n = this.clone();
        let other_n = other.clone();
        Edge {
            parent: this.clone(),
            vjp: Box::new(move |g| {
                let tv = this_n.inner.value.borrow();
                let ov = other_n.inner.value.borrow();
                // Partial in output shape, then reduce onto a scalar input.
                let partial = if this_is_lhs {
                    broadcast_zip(op, &tv, &ov, df)?
                } else {
                    broadcast_zip(op, &ov, &tv, df)?
                };
                let contrib = broadcast_zip(op, &partial, g, |p, gg| p * gg)?;
                if tv.is_scalar() && !contrib.is_scalar() {
                    Ok(Tensor::scalar(contrib.sum_all()))
                } else {
                    Ok(contrib)
                }
            }),
        }
    }

    Ok(Node::from_op(
        value,
        vec![
            side_vjp(op, a, b, dfa, true),
            side_vjp(op, b, a, dfb, false),
        ],
    ))
}

impl Node {
    // ---- elementwise binaries -------------------------------------------

    pub fn add(&self, other: &Node) -> Result<Node> {
        binary("add", self, other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Node) -> Result<Node> {
        binary("sub", self, other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Node) -> Result<Node> {
        binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Node) -> Result<Node> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    // ---- elementwise unaries --------------------------------------------

    pub fn neg(&self) -> Node {
        unary(self, |x| -x, |_| -1.0)
    }

    pub fn add_const(&self, c: f64) -> Node {
        unary(self, move |x| x + c, |_| 1.0)
    }

    pub fn scale(&self, c: f64) -> Node {
        unary(self, move |x| x * c, move |_| c)
    }

    pub fn exp(&self) -> Node {
        unary(self, f64::exp, f64::exp)
    }

    /// Natural log; nonpositive inputs yield NaN/−∞ per IEEE semantics.
    pub fn ln(&self) -> Node {
        unary(self, f64::ln, |x| 1.0 / x)
    }

    /// Square root; negative inputs yield NaN per IEEE semantics.
    pub fn sqrt(&self) -> Node {
        unary(self, f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn abs(&self) -> Node {
        unary(self, f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Node {
        unary(self, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Node {
        unary(self, f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    /// Numerically stable softplus `ln(1 + eˣ)`.
    pub fn softplus(&self) -> Node {
        unary(self, math::softplus, math::sigmoid)
    }

    pub fn sigmoid(&self) -> Node {
        unary(self, math::sigmoid, |x| {
            let s = math::sigmoid(x);
            s * (1.0 - s)
        })
    }

    /// `x^p` for a constant exponent.
    pub fn pow_const(&self, p: f64) -> Node {
        unary(self, move |x| x.powf(p), move |x| p * x.powf(p - 1.0))
    }

    /// Log-gamma, differentiable through the digamma function.
    pub fn ln_gamma(&self) -> Node {
        unary(self, math::ln_gamma, math::digamma)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp_const(&self, lo: f64, hi: f64) -> Node {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Arbitrary elementwise op with caller-supplied forward and derivative.
    /// The escape hatch for externally defined scalar functions.
    pub fn custom_unary(
        &self,
        fwd: impl Fn(f64) -> f64 + 'static,
        deriv: impl Fn(f64) -> f64 + 'static,
    ) -> Node {
        unary(self, fwd, deriv)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, other: &Node) -> Result<Node> {
        let value = {
            let av = self.inner.value.borrow();
            let bv = other.inner.value.borrow();
            av.matmul(&bv)?
        };
        let b = other.clone();
        let a = self.clone();
        Ok(Node::from_op(
            value,
            vec![
                Edge {
                    parent: self.clone(),
                    vjp: Box::new(move |g| {
                        let bt = b.inner.value.borrow().transpose2d()?;
                        g.matmul(&bt)
                    }),
                },
                Edge {
                    parent: other.clone(),
                    vjp: Box::new(move |g| {
                        let at = a.inner.value.borrow().transpose2d()?;
                        at.matmul(g)
                    }),
                },
            ],
        ))
    }

    pub fn transpose(&self) -> Result<Node> {
        let value = self.inner.value.borrow().transpose2d()?;
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(|g| g.transpose2d()),
            }],
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&self) -> Node {
        let v = self.inner.value.borrow();
        let shape = v.shape().to_vec();
        let value = Tensor::scalar(v.sum_all());
        drop(v);
        Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(move |g| {
                    let g0 = g.scalar_value()?;
                    Ok(Tensor::full(&shape, g0))
                }),
            }],
        )
    }

    pub fn mean_all(&self) -> Node {
        let v = self.inner.value.borrow();
        let shape = v.shape().to_vec();
        let n = v.numel() as f64;
        let value = Tensor::scalar(v.mean_all());
        drop(v);
        Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(move |g| {
                    let g0 = g.scalar_value()?;
                    Ok(Tensor::full(&shape, g0 / n))
                }),
            }],
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Node> {
        let v = self.inner.value.borrow();
        let value = v.sum_axis(axis)?;
        let shape = v.shape().to_vec();
        drop(v);
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(move |g| match shape.as_slice() {
                    [n] => Ok(Tensor::full(&[*n], g.scalar_value()?)),
                    [n, m] => {
                        if axis == 0 {
                            g.expand_rows(*n)
                        } else {
                            g.expand_cols(*m)
                        }
                    }
                    _ => unreachable!("sum_axis validated rank"),
                }),
            }],
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Node> {
        let v = self.inner.value.borrow();
        let denom = match (v.shape(), axis) {
            ([n], 0) => *n,
            ([n, _], 0) => *n,
            ([_, m], 1) => *m,
            _ => v.sum_axis(axis).map(|_| 0)?, // surface the same axis error
        } as f64;
        drop(v);
        Ok(self.sum_axis(axis)?.scale(1.0 / denom))
    }

    // ---- structure --------------------------------------------------------

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Node> {
        let v = self.inner.value.borrow();
        let old_shape = v.shape().to_vec();
        let value = v.reshape(shape)?;
        drop(v);
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(move |g| g.reshape(old_shape.clone())),
            }],
        ))
    }

    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Node> {
        let v = self.inner.value.borrow();
        let (_, cols) = v.dims2("narrow_cols")?;
        let value = v.narrow_cols(start, len)?;
        drop(v);
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(move |g| g.pad_cols(cols, start)),
            }],
        ))
    }

    /// Column `j` of a matrix node, as a rank-1 node.
    pub fn col(&self, j: usize) -> Result<Node> {
        let rows = {
            let v = self.inner.value.borrow();
            v.dims2("col")?.0
        };
        self.narrow_cols(j, 1)?.reshape(vec![rows])
    }

    pub fn gather_cols(&self, idx: &[usize]) -> Result<Node> {
        let v = self.inner.value.borrow();
        let (_, cols) = v.dims2("gather_cols")?;
        let value = v.gather_cols(idx)?;
        drop(v);
        let idx = idx.to_vec();
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(move |g| g.scatter_cols(&idx, cols)),
            }],
        ))
    }

    /// Reorders matrix columns: `out[:, j] = self[:, perm[j]]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Result<Node> {
        let value = self.inner.value.borrow().permute_cols(perm)?;
        // out[:, j] = in[:, perm[j]]  ⇒  grad_in[:, p] = g[:, inv[p]]
        // where inv[perm[j]] = j.
        let mut inv = vec![0usize; perm.len()];
        for (j, &p) in perm.iter().enumerate() {
            inv[p] = j;
        }
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(move |g| g.permute_cols(&inv)),
            }],
        ))
    }

    /// Embeds this matrix into a wider zero matrix starting at column `start`.
    pub fn pad_cols(&self, cols: usize, start: usize) -> Result<Node> {
        let own_cols = {
            let v = self.inner.value.borrow();
            v.dims2("pad_cols")?.1
        };
        let value = self.inner.value.borrow().pad_cols(cols, start)?;
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(move |g| g.narrow_cols(start, own_cols)),
            }],
        ))
    }

    pub fn expand_rows(&self, n: usize) -> Result<Node> {
        let value = self.inner.value.borrow().expand_rows(n)?;
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(|g| g.sum_axis(0)),
            }],
        ))
    }

    pub fn expand_cols(&self, m: usize) -> Result<Node> {
        let value = self.inner.value.borrow().expand_cols(m)?;
        Ok(Node::from_op(
            value,
            vec![Edge {
                parent: self.clone(),
                vjp: Box::new(|g| g.sum_axis(1)),
            }],
        ))
    }
}

/// Stacks rank-1 nodes of equal length as matrix columns.
pub fn stack_cols(cols: &[Node]) -> Result<Node> {
    let values: Vec<Tensor> = cols.iter().map(|c| c.value()).collect();
    let refs: Vec<&Tensor> = values.iter().collect();
    let value = Tensor::stack_cols(&refs)?;
    let edges = cols
        .iter()
        .enumerate()
        .map(|(j, c)| Edge {
            parent: c.clone(),
            vjp: Box::new(move |g| g.col(j)),
        })
        .collect();
    Ok(Node::from_op(value, edges))
}

/// Solves `X · Tᵀ = rhs` for `X`, with `T` triangular (each row of `rhs` is
/// back-substituted against `T`). Differentiable in both `T` and `rhs`.
pub fn solve_tri(t: &Node, rhs: &Node, lower: bool, unit_diag: bool) -> Result<Node> {
    let x_val = {
        let tv = t.inner.value.borrow();
        let rv = rhs.inner.value.borrow();
        tv.solve_tri_rows(&rv, lower, unit_diag)?
    };

    // For X = B·T⁻ᵀ: dL/dB = G·T⁻¹ (a transposed-triangle solve), and
    // dL/dT = −(G·T⁻¹)ᵀ·X.
    let t_for_rhs = t.clone();
    let rhs_edge = Edge {
        parent: rhs.clone(),
        vjp: Box::new(move |g| {
            let tt = t_for_rhs.inner.value.borrow().transpose2d()?;
            tt.solve_tri_rows(g, !lower, unit_diag)
        }),
    };
    let t_for_t = t.clone();
    let x_cap = x_val.clone();
    let t_edge = Edge {
        parent: t.clone(),
        vjp: Box::new(move |g| {
            let tt = t_for_t.inner.value.borrow().transpose2d()?;
            let y = tt.solve_tri_rows(g, !lower, unit_diag)?;
            let yt = y.transpose2d()?;
            let mut dt = yt.matmul(&x_cap)?.scale(-1.0);
            // The solver reads only one triangle of T (and skips the diagonal
            // when it is implicitly unit); entries it never reads have zero
            // derivative, so mask the dense product accordingly.
            let (n, _) = dt.dims2("solve_tri")?;
            for i in 0..n {
                for j in 0..n {
                    let strict = if lower { j < i } else { j > i };
                    let read = strict || (!unit_diag && i == j);
                    if !read {
                        dt.data_mut()[i * n + j] = 0.0;
                    }
                }
            }
            Ok(dt)
        }),
    };

    Ok(Node::from_op(x_val, vec![rhs_edge, t_edge]))
}
