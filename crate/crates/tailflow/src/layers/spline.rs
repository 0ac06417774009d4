//! Rational-quadratic spline autoregressive transform.
//!
//! Inside `[−b, b]` each coordinate passes through a strictly monotone
//! rational-quadratic spline with `K` bins whose widths, heights, and
//! interior knot derivatives come from a [`MaskedConditioner`]; outside it
//! is exactly the identity, so every coordinate map has linear tails of
//! slope one and the layer can never turn a light tail heavy (or vice
//! versa). The spline maps `[−b, b]` onto `[−b, b]` and meets the identity
//! continuously at the boundary knots, whose derivatives are pinned to 1.
//!
//! Bin widths and heights are softmax-normalized with a minimum bin
//! fraction, and knot derivatives use a shifted softplus with a positive
//! floor, so degenerate parameter values are clamped rather than rejected.

use rand::Rng;

use crate::ad::{stack_cols, Node};
use crate::error::{Error, Result};
use crate::layers::{
    check_conditioner_finite, check_layer_input, FlowLayer, MaskedConditioner, ParamSpec,
};
use crate::math::softplus_inv;
use crate::tensor::Tensor;

/// Minimum fraction of the box any single bin may occupy.
const MIN_BIN_FRACTION: f64 = 1e-3;
/// Floor for knot derivatives.
const MIN_DERIVATIVE: f64 = 1e-3;

pub struct RQSplineARLayer {
    name: String,
    dim: usize,
    bins: usize,
    bound: f64,
    cond: MaskedConditioner,
}

/// Spline parameters for one coordinate on one batch: everything is a
/// length-`n` node. `x_knots`/`y_knots` hold the *lower* edge of each bin
/// (running sums starting at `−b`); `derivs` holds the `K+1` knot
/// derivatives with the boundary entries pinned to 1.
struct CoordSpline {
    widths: Vec<Node>,
    heights: Vec<Node>,
    derivs: Vec<Node>,
    x_knots: Vec<Node>,
    y_knots: Vec<Node>,
}

/// Softmax across `K` column nodes, row-wise. The row maximum is treated
/// as a constant shift, which leaves both the value and the gradient of
/// the softmax exact while preventing overflow.
fn softmax_columns(raws: &[Node]) -> Result<Vec<Node>> {
    let mut row_max = raws[0].value();
    for r in &raws[1..] {
        r.with_value(|t| {
            for (m, &v) in row_max.data_mut().iter_mut().zip(t.data()) {
                if v > *m {
                    *m = v;
                }
            }
        });
    }
    let shift = Node::constant(row_max);
    let exps: Vec<Node> = raws
        .iter()
        .map(|r| Ok(r.sub(&shift)?.exp()))
        .collect::<Result<Vec<_>>>()?;
    let mut denom = exps[0].clone();
    for e in &exps[1..] {
        denom = denom.add(e)?;
    }
    exps.iter().map(|e| e.div(&denom)).collect()
}

/// Largest bin index `k` (clamped to `0..K−1`) whose lower knot lies at or
/// below each value; `knots` are the lower-edge nodes built by the same
/// running sum, so selection is consistent with the node arithmetic.
fn bin_indices(knots: &[Node], values: &Tensor) -> Vec<usize> {
    let edges: Vec<Tensor> = knots.iter().map(|k| k.value()).collect();
    values
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut bin = 0;
            for (k, e) in edges.iter().enumerate().skip(1) {
                if e.data()[i] <= v {
                    bin = k;
                }
            }
            bin
        })
        .collect()
}

/// Per-bin 0/1 indicator masks as constant nodes.
fn bin_masks(n: usize, bins: usize, idx: &[usize]) -> Vec<Node> {
    (0..bins)
        .map(|k| {
            let mut m = Tensor::zeros(&[n]);
            for (i, &b) in idx.iter().enumerate() {
                if b == k {
                    m.data_mut()[i] = 1.0;
                }
            }
            Node::constant(m)
        })
        .collect()
}

/// `Σ_k nodes[k] ⊙ masks[k]` — a per-row gather expressed with constant
/// masks so gradients flow only through the selected bin.
fn select(nodes: &[Node], masks: &[Node]) -> Result<Node> {
    let mut acc = nodes[0].mul(&masks[0])?;
    for (nd, m) in nodes.iter().zip(masks).skip(1) {
        acc = acc.add(&nd.mul(m)?)?;
    }
    Ok(acc)
}

/// 0/1 indicator of `|v| ≤ bound` and its complement, as constant tensors.
fn inside_masks(values: &Tensor, bound: f64) -> (Tensor, Tensor) {
    let inside = values.map(|v| if v.abs() <= bound { 1.0 } else { 0.0 });
    let outside = inside.map(|m| 1.0 - m);
    (inside, outside)
}

/// The monotone rational-quadratic piece on one bin, evaluated at the
/// normalized position `ξ ∈ [0, 1]`: returns `(y, dy/dz)` where `s = h/w`
/// is the bin slope and `d_lo`, `d_hi` are the knot derivatives.
struct BinGeometry {
    w: Node,
    h: Node,
    x_lo: Node,
    y_lo: Node,
    d_lo: Node,
    d_hi: Node,
}

impl BinGeometry {
    fn gather(p: &CoordSpline, masks: &[Node]) -> Result<Self> {
        let k = p.widths.len();
        Ok(BinGeometry {
            w: select(&p.widths, masks)?,
            h: select(&p.heights, masks)?,
            x_lo: select(&p.x_knots, masks)?,
            y_lo: select(&p.y_knots, masks)?,
            d_lo: select(&p.derivs[..k], masks)?,
            d_hi: select(&p.derivs[1..], masks)?,
        })
    }

    fn slope(&self) -> Result<Node> {
        self.h.div(&self.w)
    }

    /// `(y, dy/dz)` at normalized position `ξ`.
    fn evaluate(&self, xi: &Node) -> Result<(Node, Node)> {
        let s = self.slope()?;
        let one_m_xi = xi.neg().add_const(1.0);
        let xi1 = xi.mul(&one_m_xi)?;
        let delta = self.d_hi.add(&self.d_lo)?.sub(&s.scale(2.0))?;
        let denom = s.add(&delta.mul(&xi1)?)?;
        let num = s.mul(&xi.mul(xi)?)?.add(&self.d_lo.mul(&xi1)?)?;
        let y = self.y_lo.add(&self.h.mul(&num)?.div(&denom)?)?;
        let dnum = self
            .d_hi
            .mul(&xi.mul(xi)?)?
            .add(&s.scale(2.0).mul(&xi1)?)?
            .add(&self.d_lo.mul(&one_m_xi.mul(&one_m_xi)?)?)?;
        let deriv = s.mul(&s)?.mul(&dnum)?.div(&denom.mul(&denom)?)?;
        Ok((y, deriv))
    }

    /// Recovers `ξ` from a target height `y` via the numerically stable
    /// root `ξ = 2c / (−b − √(b² − 4ac))` of the bin's quadratic.
    fn invert(&self, y: &Node) -> Result<Node> {
        let s = self.slope()?;
        let term = y.sub(&self.y_lo)?;
        let delta = self.d_hi.add(&self.d_lo)?.sub(&s.scale(2.0))?;
        let a = self.h.mul(&s.sub(&self.d_lo)?)?.add(&term.mul(&delta)?)?;
        let b = self.h.mul(&self.d_lo)?.sub(&term.mul(&delta)?)?;
        let c = s.mul(&term)?.neg();
        // Monotonicity keeps the discriminant positive; relu only guards
        // roundoff at the exact knot.
        let disc = b.mul(&b)?.sub(&a.mul(&c)?.scale(4.0))?;
        c.scale(2.0).div(&b.neg().sub(&disc.relu().sqrt())?)
    }
}

impl RQSplineARLayer {
    pub fn new(
        name: &str,
        dim: usize,
        bins: usize,
        bound: f64,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if bins == 0 {
            return Err(Error::validation(format!("{name}: needs at least one bin")));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::validation(format!(
                "{name}: tail bound must be positive and finite, got {bound}"
            )));
        }
        if bins as f64 * MIN_BIN_FRACTION >= 1.0 {
            return Err(Error::validation(format!(
                "{name}: {bins} bins cannot each hold the minimum fraction {MIN_BIN_FRACTION}"
            )));
        }
        let params_per_coord = 3 * bins - 1;
        let cond = MaskedConditioner::new(
            &format!("{name}.cond"),
            dim,
            params_per_coord,
            hidden,
            rng,
        )?;
        Ok(RQSplineARLayer {
            name: name.to_string(),
            dim,
            bins,
            bound,
            cond,
        })
    }

    pub fn conditioner(&self) -> &MaskedConditioner {
        &self.cond
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Extracts and normalizes the spline parameters of coordinate `j`
    /// from a conditioner output. Conditioner columns are parameter-major:
    /// widths occupy parameter slots `0..K`, heights `K..2K`, interior
    /// derivatives `2K..3K−1`.
    fn coord_spline(&self, out: &Node, j: usize) -> Result<CoordSpline> {
        let (k, d, b) = (self.bins, self.dim, self.bound);
        let raw_w: Vec<Node> = (0..k)
            .map(|p| out.col(p * d + j))
            .collect::<Result<Vec<_>>>()?;
        let raw_h: Vec<Node> = (0..k)
            .map(|p| out.col((k + p) * d + j))
            .collect::<Result<Vec<_>>>()?;
        let raw_d: Vec<Node> = (0..k.saturating_sub(1))
            .map(|p| out.col((2 * k + p) * d + j))
            .collect::<Result<Vec<_>>>()?;

        let normalize = |raws: &[Node]| -> Result<Vec<Node>> {
            let probs = softmax_columns(raws)?;
            Ok(probs
                .iter()
                .map(|p| {
                    p.scale(2.0 * b * (1.0 - k as f64 * MIN_BIN_FRACTION))
                        .add_const(2.0 * b * MIN_BIN_FRACTION)
                })
                .collect())
        };
        let widths = normalize(&raw_w)?;
        let heights = normalize(&raw_h)?;

        let n = widths[0].shape()[0];
        let one = Node::constant(Tensor::full(&[n], 1.0));
        // Shifted softplus: raw 0 ⇒ derivative exactly 1 (identity init).
        let shift = softplus_inv(1.0 - MIN_DERIVATIVE);
        let mut derivs = Vec::with_capacity(k + 1);
        derivs.push(one.clone());
        for r in &raw_d {
            derivs.push(r.add_const(shift).softplus().add_const(MIN_DERIVATIVE));
        }
        derivs.push(one);

        let lower_edges = |sizes: &[Node]| -> Result<Vec<Node>> {
            let mut knots = Vec::with_capacity(k);
            knots.push(Node::constant(Tensor::full(&[n], -b)));
            for w in &sizes[..k - 1] {
                let prev = knots.last().expect("nonempty").clone();
                knots.push(prev.add(w)?);
            }
            Ok(knots)
        };
        let x_knots = lower_edges(&widths)?;
        let y_knots = lower_edges(&heights)?;

        Ok(CoordSpline {
            widths,
            heights,
            derivs,
            x_knots,
            y_knots,
        })
    }

    /// Forward map of one coordinate: `(x_j, ln dx_j/dz_j)`.
    fn forward_coord(&self, p: &CoordSpline, z_j: &Node) -> Result<(Node, Node)> {
        let (inside_t, outside_t) = z_j.with_value(|t| inside_masks(t, self.bound));
        let inside = Node::constant(inside_t);
        let outside = Node::constant(outside_t);
        // Out-of-box rows are evaluated at the (discarded) safe point 0 so
        // the spline arithmetic never sees them.
        let z_safe = z_j.mul(&inside)?;
        let masks = z_safe.with_value(|t| bin_masks(t.numel(), self.bins, &bin_indices(&p.x_knots, t)));
        let geo = BinGeometry::gather(p, &masks)?;
        let xi = z_safe.sub(&geo.x_lo)?.div(&geo.w)?;
        let (y, deriv) = geo.evaluate(&xi)?;
        let x = inside.mul(&y)?.add(&outside.mul(z_j)?)?;
        let logdet = inside.mul(&deriv.ln())?;
        Ok((x, logdet))
    }

    /// Inverse map of one coordinate: `(z_j, ln dz_j/dx_j)`.
    fn inverse_coord(&self, p: &CoordSpline, x_j: &Node) -> Result<(Node, Node)> {
        let (inside_t, outside_t) = x_j.with_value(|t| inside_masks(t, self.bound));
        let inside = Node::constant(inside_t);
        let outside = Node::constant(outside_t);
        let x_safe = x_j.mul(&inside)?;
        let masks = x_safe.with_value(|t| bin_masks(t.numel(), self.bins, &bin_indices(&p.y_knots, t)));
        let geo = BinGeometry::gather(p, &masks)?;
        let xi = geo.invert(&x_safe)?;
        let z = xi.mul(&geo.w)?.add(&geo.x_lo)?;
        let (_, deriv) = geo.evaluate(&xi)?;
        let z_out = inside.mul(&z)?.add(&outside.mul(x_j)?)?;
        let logdet_inv = inside.mul(&deriv.ln())?.neg();
        Ok((z_out, logdet_inv))
    }
}

impl FlowLayer for RQSplineARLayer {
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
        let mut x_cols = Vec::with_capacity(self.dim);
        let mut logdet: Option<Node> = None;
        for j in 0..self.dim {
            let p = self.coord_spline(&out, j)?;
            let (x_j, ld_j) = self.forward_coord(&p, &z.col(j)?)?;
            x_cols.push(x_j);
            logdet = Some(match logdet {
                Some(acc) => acc.add(&ld_j)?,
                None => ld_j,
            });
        }
        Ok((stack_cols(&x_cols)?, logdet.expect("dim ≥ 1")))
    }

    fn inverse(&self, x: &Node) -> Result<(Node, Node)> {
        let n = check_layer_input(x, self.dim, &self.name, "input")?;
        let mut z_cols: Vec<Node> = (0..self.dim)
            .map(|_| Node::constant(Tensor::zeros(&[n])))
            .collect();
        let mut logdet: Option<Node> = None;
        for j in 0..self.dim {
            let z_cur = stack_cols(&z_cols)?;
            let out = self.cond.forward(&z_cur)?;
            check_conditioner_finite(&out, self.dim, &self.name)?;
            let p = self.coord_spline(&out, j)?;
            let (z_j, ld_j) = self.inverse_coord(&p, &x.col(j)?)?;
            z_cols[j] = z_j;
            logdet = Some(match logdet {
                Some(acc) => acc.add(&ld_j)?,
                None => ld_j,
            });
        }
        Ok((stack_cols(&z_cols)?, logdet.expect("dim ≥ 1")))
    }

    fn parameters(&self) -> Vec<ParamSpec> {
        self.cond.parameters()
    }
}
