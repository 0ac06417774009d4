//! Dense row-major `f64` tensors.
//!
//! This is deliberately small: rank 0–2 is all the flow stack needs, and the
//! autodiff layer (`crate::ad`) builds every differentiable operation out of
//! the raw manipulations defined here. Scalars are rank-0 tensors (`shape []`,
//! one element); a one-element rank-1 tensor is also accepted as a scalar
//! wherever scalars are expected.

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::validation(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Rank-1 tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True if this tensor holds exactly one element (rank 0 or `[1]`).
    /// True only for rank-0 tensors: a one-element vector or 1×1 matrix is
    /// not a scalar (a batch of one must keep behaving like a batch).
    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single element of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::validation(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows/cols of a rank-2 tensor; `op` names the caller in errors.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::validation(format!(
                "`{op}` needs a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    /// Contiguous row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Applies `f` elementwise, keeping the shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// In-place elementwise accumulation; shapes must match exactly.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "accumulate",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    /// Sum over one axis of a rank-2 tensor (axis 0 → per-column sums of
    /// shape `[cols]`, axis 1 → per-row sums of shape `[rows]`), or over
    /// axis 0 of a rank-1 tensor (→ scalar).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        match self.shape.as_slice() {
            [_n] => {
                if axis != 0 {
                    return Err(Error::InvalidAxis { axis, rank: 1 });
                }
                Ok(Tensor::scalar(self.sum_all()))
            }
            [rows, cols] => match axis {
                0 => {
                    let mut out = vec![0.0; *cols];
                    for i in 0..*rows {
                        for (o, &x) in out.iter_mut().zip(self.row(i)) {
                            *o += x;
                        }
                    }
                    Ok(Tensor::vector(out))
                }
                1 => {
                    let out = (0..*rows)
                        .map(|i| self.row(i).iter().sum())
                        .collect();
                    Ok(Tensor::vector(out))
                }
                _ => Err(Error::InvalidAxis { axis, rank: 2 }),
            },
            _ => Err(Error::InvalidAxis { axis, rank: self.rank() }),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        // i-k-j loop order: the inner axpy runs over contiguous rows of
        // `other` and `out`, which the optimizer vectorizes well.
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &a) in arow.iter().enumerate() {
                let brow = &other.data[l * n..(l + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for (j, &x) in self.row(i).iter().enumerate() {
                out[j * m + i] = x;
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2("narrow_cols")?;
        if start + len > cols {
            return Err(Error::validation(format!(
                "narrow_cols [{start}, {}) out of range for {cols} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Tensor::new(vec![rows, len], out)
    }

    /// Embeds a `[rows, len]` tensor as columns `[start, start+len)` of an
    /// otherwise-zero `[rows, cols]` tensor (adjoint of `narrow_cols`).
    pub fn pad_cols(&self, cols: usize, start: usize) -> Result<Tensor> {
        let (rows, len) = self.dims2("pad_cols")?;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            out[i * cols + start..i * cols + start + len].copy_from_slice(self.row(i));
        }
        Tensor::new(vec![rows, cols], out)
    }

    /// Column `j` of a rank-2 tensor, as a rank-1 tensor.
    pub fn col(&self, j: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2("col")?;
        if j >= cols {
            return Err(Error::validation(format!(
                "column {j} out of range for {cols} columns"
            )));
        }
        Ok(Tensor::vector((0..rows).map(|i| self.at(i, j)).collect()))
    }

    /// Stacks rank-1 tensors of equal length as the columns of a matrix.
    pub fn stack_cols(cols: &[&Tensor]) -> Result<Tensor> {
        if cols.is_empty() {
            return Err(Error::validation("stack_cols needs at least one column"));
        }
        let n = cols[0].numel();
        for c in cols {
            if c.rank() > 1 || c.numel() != n {
                return Err(Error::Shape {
                    op: "stack_cols",
                    lhs: vec![n],
                    rhs: c.shape.clone(),
                });
            }
        }
        let m = cols.len();
        let mut out = vec![0.0; n * m];
        for (j, c) in cols.iter().enumerate() {
            for (i, &x) in c.data.iter().enumerate() {
                out[i * m + j] = x;
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Repeats a length-`m` vector as each of `n` rows (→ `[n, m]`).
    pub fn expand_rows(&self, n: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::validation(format!(
                "expand_rows needs a rank-1 tensor, got shape {:?}",
                self.shape
            )));
        }
        let m = self.numel();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&self.data);
        }
        Tensor::new(vec![n, m], out)
    }

    /// Repeats a length-`n` vector as each of `m` columns (→ `[n, m]`).
    pub fn expand_cols(&self, m: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::validation(format!(
                "expand_cols needs a rank-1 tensor, got shape {:?}",
                self.shape
            )));
        }
        let n = self.numel();
        let mut out = Vec::with_capacity(n * m);
        for &x in &self.data {
            out.extend(std::iter::repeat(x).take(m));
        }
        Tensor::new(vec![n, m], out)
    }

    /// Per-row element selection: `out[i] = self[i, idx[i]]`.
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2("gather_cols")?;
        if idx.len() != rows {
            return Err(Error::validation(format!(
                "gather_cols needs one index per row ({rows}), got {}",
                idx.len()
            )));
        }
        let mut out = Vec::with_capacity(rows);
        for (i, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(Error::validation(format!(
                    "gather_cols index {j} out of range for {cols} columns"
                )));
            }
            out.push(self.at(i, j));
        }
        Ok(Tensor::vector(out))
    }

    /// Adjoint of `gather_cols`: scatters a length-`rows` vector back into a
    /// zero `[rows, cols]` tensor at the gathered positions.
    pub fn scatter_cols(&self, idx: &[usize], cols: usize) -> Result<Tensor> {
        if self.rank() != 1 || self.numel() != idx.len() {
            return Err(Error::validation(format!(
                "scatter_cols needs a rank-1 tensor of length {}, got shape {:?}",
                idx.len(),
                self.shape
            )));
        }
        let rows = idx.len();
        let mut out = vec![0.0; rows * cols];
        for (i, (&j, &v)) in idx.iter().zip(&self.data).enumerate() {
            out[i * cols + j] = v;
        }
        Tensor::new(vec![rows, cols], out)
    }

    /// Column permutation: `out[:, j] = self[:, perm[j]]`. `perm` must be a
    /// bijection on the column indices.
    pub fn permute_cols(&self, perm: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2("permute_cols")?;
        if perm.len() != cols {
            return Err(Error::Shape {
                op: "permute_cols",
                lhs: self.shape.clone(),
                rhs: vec![perm.len()],
            });
        }
        let mut seen = vec![false; cols];
        for &j in perm {
            if j >= cols || seen[j] {
                return Err(Error::validation(format!(
                    "permute_cols {perm:?} is not a permutation of 0..{cols}"
                )));
            }
            seen[j] = true;
        }
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for (j, &src) in perm.iter().enumerate() {
                out[i * cols + j] = self.data[i * cols + src];
            }
        }
        Tensor::new(vec![rows, cols], out)
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::validation(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({numel} elements)",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Solves `T y = r` for every row `r` of `rhs` (so the result satisfies
    /// `result · Tᵀ = rhs`), with `T` triangular. `unit_diag` treats the
    /// diagonal as ones regardless of the stored values.
    pub fn solve_tri_rows(&self, rhs: &Tensor, lower: bool, unit_diag: bool) -> Result<Tensor> {
        let (d, d2) = self.dims2("solve_tri")?;
        if d != d2 {
            return Err(Error::validation(format!(
                "solve_tri needs a square matrix, got {:?}",
                self.shape
            )));
        }
        let (n, cols) = rhs.dims2("solve_tri")?;
        if cols != d {
            return Err(Error::Shape {
                op: "solve_tri",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = rhs.data.clone();
        for r in 0..n {
            let y = &mut out[r * d..(r + 1) * d];
            if lower {
                for i in 0..d {
                    let mut acc = y[i];
                    for (j, &yj) in y.iter().enumerate().take(i) {
                        acc -= self.at(i, j) * yj;
                    }
                    y[i] = if unit_diag { acc } else { acc / self.at(i, i) };
                }
            } else {
                for i in (0..d).rev() {
                    let mut acc = y[i];
                    for (j, &yj) in y.iter().enumerate().skip(i + 1) {
                        acc -= self.at(i, j) * yj;
                    }
                    y[i] = if unit_diag { acc } else { acc / self.at(i, i) };
                }
            }
        }
        Tensor::new(vec![n, d], out)
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Elementwise combination with the crate's broadcasting rule: shapes must
/// match exactly, or one side must be a scalar (any further broadcasting is
/// done through explicit `expand_rows`/`expand_cols` calls).
pub fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape.clone(), data)
    } else if a.is_scalar() {
        let x = a.data[0];
        Ok(b.map(|y| f(x, y)))
    } else if b.is_scalar() {
        let y = b.data[0];
        Ok(a.map(|x| f(x, y)))
    } else {
        Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}
