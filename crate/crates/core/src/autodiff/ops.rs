use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Tensor};

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Masked, max-subtracted softmax along `axis`. Masked entries come out as
/// exactly zero.
pub(crate) fn softmax_values(
    x: &Tensor,
    axis: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let (outer, len, inner) = axis_strides(x.shape(), axis);
    if let Some(m) = mask {
        if !m.iter().any(|&keep| keep) {
            return Err(Error::DegenerateMask);
        }
    }
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in (0..len).filter(|&j| keep(j)) {
                max = max.max(src[at(j)]);
            }
            let mut total = 0.0;
            for j in (0..len).filter(|&j| keep(j)) {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in (0..len).filter(|&j| keep(j)) {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Unfolds `x` (`d_in x t`) into `(d_in * k) x t` zero-padded windows.
pub(crate) fn im2col(x: &[f64], d_in: usize, t: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let mut cols = vec![0.0; d_in * k * t];
    for c in 0..d_in {
        let src = &x[c * t..(c + 1) * t];
        for j in 0..k {
            let dst = &mut cols[(c * k + j) * t..(c * k + j + 1) * t];
            // output position s reads input s + j - pad
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            for s in lo..hi {
                dst[s] = src[s + j - pad];
            }
        }
    }
    cols
}

/// Folds window gradients back onto the input positions.
pub(crate) fn col2im(cols: &[f64], d_in: usize, t: usize, k: usize, dx: &mut [f64]) {
    let pad = (k - 1) / 2;
    for c in 0..d_in {
        let dst = &mut dx[c * t..(c + 1) * t];
        for j in 0..k {
            let src = &cols[(c * k + j) * t..(c * k + j + 1) * t];
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            for s in lo..hi {
                dst[s + j - pad] += src[s];
            }
        }
    }
}

pub(crate) fn smooth_l1_value(z: f64) -> f64 {
    if z.abs() < 1.0 {
        0.5 * z * z
    } else {
        z.abs() - 0.5
    }
}

pub(crate) fn smooth_l1_derivative(z: f64) -> f64 {
    if z.abs() < 1.0 {
        z
    } else {
        z.signum()
    }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&u, &v)| f(u, v))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    /// `m x k` times `k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            Layout::normal(m, k),
            self.value(b).data(),
            Layout::normal(k, n),
            0.0,
            &mut out,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |u, v| u + v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |u, v| u - v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |u, v| u * v)
    }

    fn col_broadcast(&self, op: &'static str, m: Var, v: Var) -> Result<(usize, usize)> {
        let (rows, cols) = self.value(m).dims2()?;
        if self.value(v).len() != rows || self.value(v).dims2().map_or(true, |(_, c)| c != 1) {
            return Err(Error::shape(op, self.shape(m), self.shape(v)));
        }
        Ok((rows, cols))
    }

    /// Adds column vector `v` (`r x 1`) to every column of `m` (`r x c`).
    pub fn add_col(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.col_broadcast("add_col", m, v)?;
        let (x, y) = (self.value(m).data(), self.value(v).data());
        let mut out = x.to_vec();
        for r in 0..rows {
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|e| *e += y[r]);
        }
        let needs = self.needs(&[m, v]);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::AddCol(m, v), needs))
    }

    /// Hadamard product of every column of `m` with column vector `v`.
    pub fn mul_col(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.col_broadcast("mul_col", m, v)?;
        let (x, y) = (self.value(m).data(), self.value(v).data());
        let mut out = x.to_vec();
        for r in 0..rows {
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|e| *e *= y[r]);
        }
        let needs = self.needs(&[m, v]);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::MulCol(m, v), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("add_const", self.shape(a), c.shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(u, v)| u + v)
            .collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::AddConst(a), needs))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(a, axis, None)
    }

    /// Softmax along `axis`; entries whose `mask` flag is false are excluded
    /// from normalization and come out as exactly 0.
    pub fn masked_softmax(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if let Some(m) = mask {
            if m.len() != shape[axis] {
                return Err(Error::shape("masked_softmax", &shape, &[m.len()]));
            }
        }
        let value = softmax_values(self.value(a), axis, mask)?;
        let needs = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::Softmax { input: a, axis },
            needs,
        ))
    }

    /// Same-padded temporal convolution: `x` is `d_in x t`, `kernels` is
    /// `d_out x d_in x k` with odd `k`.
    pub fn conv1d_same(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (d_in, t) = self.value(x).dims2()?;
        let &[d_out, kd_in, k] = self.shape(kernels) else {
            return Err(Error::shape("conv1d_same", self.shape(x), self.shape(kernels)));
        };
        if kd_in != d_in {
            return Err(Error::shape("conv1d_same", self.shape(x), self.shape(kernels)));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("kernel width must be odd, got {k}")));
        }
        let cols = im2col(self.value(x).data(), d_in, t, k);
        let mut out = vec![0.0; d_out * t];
        gemm(
            self.value(kernels).data(),
            Layout::normal(d_out, d_in * k),
            &cols,
            Layout::normal(d_in * k, t),
            0.0,
            &mut out,
        );
        let needs = self.needs(&[x, kernels]);
        Ok(self.push(
            Tensor::matrix(d_out, t, out)?,
            Op::Conv1d { x, kernels },
            needs,
        ))
    }

    /// Sum of all entries, as a shape-`[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), needs))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::matrix(len, c, data)?,
            Op::SliceRows { input: a, start },
            needs,
        ))
    }

    /// Column `col` of a matrix as an `r x 1` vector.
    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if col >= c {
            return Err(Error::shape("select_col", &[r, c], &[col]));
        }
        let data = self.value(a).col(col);
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::column(data)?,
            Op::SelectCol { input: a, col },
            needs,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, c) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(*first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::matrix(rows, c, data)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(pc);
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; r * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * cols + offset..i * cols + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::matrix(r, cols, data)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Columns `indices` of `table` (`d x vocab`), i.e. an embedding lookup.
    pub fn gather_cols(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (d, v) = self.value(table).dims2()?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_cols needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather_cols", &[d, v], &[bad]));
        }
        let n = indices.len();
        let src = self.value(table).data();
        let mut data = vec![0.0; d * n];
        for i in 0..d {
            for (j, &idx) in indices.iter().enumerate() {
                data[i * n + j] = src[i * v + idx];
            }
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::matrix(d, n, data)?,
            Op::GatherCols {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Zeroes every column whose mask flag is false.
    pub fn mask_cols(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if mask.len() != c {
            return Err(Error::shape("mask_cols", &[r, c], &[mask.len()]));
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for (j, &keep) in mask.iter().enumerate() {
                if !keep {
                    data[i * c + j] = 0.0;
                }
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::matrix(r, c, data)?,
            Op::MaskCols {
                input: a,
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    /// Elementwise smooth-L1: `0.5 z^2` inside the unit band, `|z| - 0.5`
    /// outside.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(a, Op::SmoothL1(a), smooth_l1_value)
    }

    /// `ln(max(x, floor))`.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::LogFloor { input: a, floor }, move |v| v.max(floor).ln())
    }

    /// Scalar `sum_i w_i x_i` against constant weights.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        if self.value(a).len() != weights.len() {
            return Err(Error::shape("dot_const", self.shape(a), &[weights.len()]));
        }
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(weights)
            .map(|(x, w)| x * w)
            .sum();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Dot {
                input: a,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }
}
