//! Block lower-triangular linear layer in LU form.
//!
//! The weight matrix is
//!
//! ```text
//!     W = [ A  0 ]         A: d_l × d_l   (light block)
//!         [ B  C ]         C: d_h × d_h   (heavy block)
//! ```
//!
//! with `A` and `C` each stored as `L · U` (unit lower-triangular `L`,
//! upper-triangular `U` with diagonal `exp(raw)`), so the determinant is
//! available in closed form: `ln |det W| = Σ raw_A + Σ raw_C`. The zero
//! block keeps heavy-tailed coordinates out of the light outputs, so the
//! map preserves each coordinate's tail class; `B` lets heavy outputs mix
//! in light inputs freely. Degenerate splits (`d_l = 0` or `d_l = D`)
//! collapse to one unconstrained full-LU matrix, which is exactly the
//! linear layer the unconstrained flow variants use.
//!
//! All raw parameters start at zero, so a fresh layer is the identity.

use crate::ad::{solve_tri, Node, Parameter};
use crate::error::{Error, Result};
use crate::layers::{check_layer_input, FlowLayer, ParamSpec};
use crate::tensor::Tensor;

/// One square factor pair `L · U` with its constant structure masks.
struct LuBlock {
    l: Parameter,
    u: Parameter,
    logdiag: Parameter,
    lmask: Node,
    umask: Node,
    eye: Node,
}

impl LuBlock {
    fn new(name: &str, size: usize) -> LuBlock {
        let mut lmask = Tensor::zeros(&[size, size]);
        let mut umask = Tensor::zeros(&[size, size]);
        let mut eye = Tensor::zeros(&[size, size]);
        for i in 0..size {
            for j in 0..size {
                let v = match i.cmp(&j) {
                    std::cmp::Ordering::Greater => &mut lmask,
                    std::cmp::Ordering::Less => &mut umask,
                    std::cmp::Ordering::Equal => &mut eye,
                };
                v.data_mut()[i * size + j] = 1.0;
            }
        }
        LuBlock {
            l: Parameter::new(format!("{name}.l"), Tensor::zeros(&[size, size])),
            u: Parameter::new(format!("{name}.u"), Tensor::zeros(&[size, size])),
            logdiag: Parameter::new(format!("{name}.logdiag"), Tensor::zeros(&[size])),
            lmask: Node::constant(lmask),
            umask: Node::constant(umask),
            eye: Node::constant(eye),
        }
    }

    fn size(&self) -> usize {
        self.logdiag.numel()
    }

    /// `L = I + strict_lower(l)`.
    fn lower(&self) -> Result<Node> {
        self.eye.add(&self.l.node().mul(&self.lmask)?)
    }

    /// `U = diag(exp(logdiag)) + strict_upper(u)`.
    fn upper(&self) -> Result<Node> {
        let diag = self
            .logdiag
            .node()
            .exp()
            .expand_rows(self.size())?
            .mul(&self.eye)?;
        diag.add(&self.u.node().mul(&self.umask)?)
    }

    fn matrix(&self) -> Result<Node> {
        self.lower()?.matmul(&self.upper()?)
    }

    /// Row-wise solve of `M · z_rowᵀ = rhs_rowᵀ` via the two triangular
    /// factors; differentiable in the factors and the right-hand side.
    fn solve(&self, rhs: &Node) -> Result<Node> {
        let y = solve_tri(&self.lower()?, rhs, true, true)?;
        solve_tri(&self.upper()?, &y, false, false)
    }

    fn logdet(&self) -> Node {
        self.logdiag.node().sum_all()
    }

    fn push_params(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::decayed(self.l.clone()));
        out.push(ParamSpec::decayed(self.u.clone()));
        out.push(ParamSpec::plain(self.logdiag.clone()));
    }
}

pub struct TailLULayer {
    name: String,
    dim: usize,
    d_l: usize,
    light: Option<LuBlock>,
    heavy: Option<LuBlock>,
    /// The free mixing block `B` (`d_h × d_l`), present only for a proper
    /// two-block split.
    mix: Option<Parameter>,
}

impl TailLULayer {
    pub fn new(name: &str, dim: usize, d_l: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation(format!("{name}: dimension must be ≥ 1")));
        }
        if d_l > dim {
            return Err(Error::validation(format!(
                "{name}: light block size {d_l} exceeds dimension {dim}"
            )));
        }
        let light = (d_l > 0).then(|| LuBlock::new(&format!("{name}.a"), d_l));
        let heavy = (d_l < dim).then(|| LuBlock::new(&format!("{name}.c"), dim - d_l));
        let mix = (d_l > 0 && d_l < dim).then(|| {
            Parameter::new(
                format!("{name}.b"),
                Tensor::zeros(&[dim - d_l, d_l]),
            )
        });
        Ok(TailLULayer {
            name: name.to_string(),
            dim,
            d_l,
            light,
            heavy,
            mix,
        })
    }

    pub fn light_block(&self) -> usize {
        self.d_l
    }

    /// Sum of the two log-diagonals: `ln |det W|` as a scalar node.
    fn logdet_scalar(&self) -> Node {
        match (&self.light, &self.heavy) {
            (Some(a), Some(c)) => a.logdet().add(&c.logdet()).expect("scalar add"),
            (Some(a), None) => a.logdet(),
            (None, Some(c)) => c.logdet(),
            (None, None) => unreachable!("dim ≥ 1 implies at least one block"),
        }
    }

    /// Broadcasts the scalar log-determinant to a per-row vector.
    fn logdet_rows(&self, n: usize) -> Result<Node> {
        Node::constant(Tensor::full(&[n], 1.0)).mul(&self.logdet_scalar())
    }
}

impl FlowLayer for TailLULayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, z: &Node) -> Result<(Node, Node)> {
        let n = check_layer_input(z, self.dim, &self.name, "input")?;
        let x = match (&self.light, &self.heavy) {
            (Some(a), None) => z.matmul(&a.matrix()?.transpose()?)?,
            (None, Some(c)) => z.matmul(&c.matrix()?.transpose()?)?,
            (Some(a), Some(c)) => {
                let d_h = self.dim - self.d_l;
                let z_l = z.narrow_cols(0, self.d_l)?;
                let z_h = z.narrow_cols(self.d_l, d_h)?;
                let x_l = z_l.matmul(&a.matrix()?.transpose()?)?;
                let b_t = self.mix.as_ref().expect("mix with both blocks").node().transpose()?;
                let x_h = z_l.matmul(&b_t)?.add(&z_h.matmul(&c.matrix()?.transpose()?)?)?;
                x_l.pad_cols(self.dim, 0)?
                    .add(&x_h.pad_cols(self.dim, self.d_l)?)?
            }
            (None, None) => unreachable!("dim ≥ 1 implies at least one block"),
        };
        Ok((x, self.logdet_rows(n)?))
    }

    fn inverse(&self, x: &Node) -> Result<(Node, Node)> {
        let n = check_layer_input(x, self.dim, &self.name, "input")?;
        let z = match (&self.light, &self.heavy) {
            (Some(a), None) => a.solve(x)?,
            (None, Some(c)) => c.solve(x)?,
            (Some(a), Some(c)) => {
                let d_h = self.dim - self.d_l;
                let x_l = x.narrow_cols(0, self.d_l)?;
                let x_h = x.narrow_cols(self.d_l, d_h)?;
                let z_l = a.solve(&x_l)?;
                let b_t = self.mix.as_ref().expect("mix with both blocks").node().transpose()?;
                let z_h = c.solve(&x_h.sub(&z_l.matmul(&b_t)?)?)?;
                z_l.pad_cols(self.dim, 0)?
                    .add(&z_h.pad_cols(self.dim, self.d_l)?)?
            }
            (None, None) => unreachable!("dim ≥ 1 implies at least one block"),
        };
        Ok((z, self.logdet_rows(n)?.neg()))
    }

    fn parameters(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        if let Some(a) = &self.light {
            a.push_params(&mut out);
        }
        if let Some(c) = &self.heavy {
            c.push_params(&mut out);
        }
        if let Some(b) = &self.mix {
            out.push(ParamSpec::decayed(b.clone()));
        }
        out
    }
}
