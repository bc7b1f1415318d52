//! Forward definitions of every primitive. Each records its backward rule on
//! the graph and never mutates its inputs.

use crate::graph::Op;
use crate::kernels::{im2col, matmul_acc};
use crate::{gelu_scalar, GradError, Graph, Result, Tensor, Var};

fn mismatch(op: &'static str, detail: String) -> GradError {
    GradError::ShapeMismatch { op, detail }
}

impl Graph {
    fn dims2_of(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v)?;
        t.dims2()
            .ok_or_else(|| mismatch(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, rule: Op) -> Result<Var> {
        let t = self.value(a)?;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(op, out, rule, &[a])
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        rule: Op,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, out, rule, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a.index(), b.index()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a.index(), b.index()))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a.index(), b.index()))
    }

    /// Adds vector `b` to every row of `a` (`b` length = last extent of `a`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let m = *ta.shape().last().unwrap_or(&1);
        if tb.rank() != 1 || tb.len() != m {
            return Err(mismatch(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(a.index(), b.index()), &[a, b])
    }

    /// Multiplies row `i` of matrix `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2_of("scale_rows", x)?;
        let ts = self.value(s)?;
        if ts.rank() != 1 || ts.len() != r {
            return Err(mismatch("scale_rows", format!("{r} rows vs scale {:?}", ts.shape())));
        }
        let mut data = self.value(x)?.data().to_vec();
        for (row, &f) in data.chunks_mut(c).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::matrix(r, c, data)?;
        self.push("scale_rows", out, Op::ScaleRows(x.index(), s.index()), &[x, s])
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Result<Var> {
        self.map("scale", a, |x| x * f, Op::Scale(a.index(), f))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a.index()))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `(n x m) * (m x p)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims2_of("matmul", a)?;
        let (m2, p) = self.dims2_of("matmul", b)?;
        if m != m2 {
            return Err(mismatch("matmul", format!("{n}x{m} * {m2}x{p}")));
        }
        let mut data = vec![0.0; n * p];
        matmul_acc(self.value(a)?.data(), self.value(b)?.data(), &mut data, n, m, p);
        let out = Tensor::matrix(n, p, data)?;
        self.push("matmul", out, Op::MatMul(a.index(), b.index()), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2_of("transpose", a)?;
        let out = self.value(a)?.transpose2().expect("checked 2-d");
        self.push("transpose", out, Op::Transpose(a.index()), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a.index()))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a)?.data().iter().find(|&&x| x <= 0.0) {
            return Err(GradError::InvalidOperand {
                op: "log",
                detail: format!("non-positive value {bad}"),
            });
        }
        self.map("log", a, f64::ln, Op::Log(a.index()))
    }

    /// Elementwise `x^p`. Negative bases need an integer exponent; zero bases
    /// need `p >= 1` so the derivative exists.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        for &x in self.value(a)?.data() {
            let bad = (x < 0.0 && p.fract() != 0.0) || (x == 0.0 && p < 1.0);
            if bad {
                return Err(GradError::InvalidOperand {
                    op: "pow",
                    detail: format!("{x}^{p}"),
                });
            }
        }
        self.map("pow", a, |x| x.powf(p), Op::Pow(a.index(), p))
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a)?;
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(mismatch("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let src = t.data();
        for o in 0..outer {
            for k in 0..axis_len {
                let base = (o * axis_len + k) * inner;
                for n in 0..inner {
                    data[o * inner + n] += src[base + n];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, data)?;
        let rule = Op::Sum {
            x: a.index(),
            outer,
            axis_len,
            inner,
        };
        self.push("sum_axis", out, rule, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)?
            .get(axis)
            .ok_or_else(|| mismatch("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len();
        let flat = self.reshape(a, vec![n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a)?.clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a.index()), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a)?;
        let m = *t.shape().last().ok_or_else(|| mismatch("softmax_rows", "scalar".into()))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a.index()), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a)?;
        let m = *t.shape().last().ok_or_else(|| mismatch("log_softmax_rows", "scalar".into()))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a.index()), &[a])
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2_of("gather_rows", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather_rows", format!("row {bad} of {r}")));
        }
        let t = self.value(table)?;
        let data: Vec<f64> = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Tensor::matrix(idx.len(), c, data)?;
        self.push("gather_rows", out, Op::GatherRows(table.index(), idx.to_vec()), &[table])
    }

    /// `out[i][j] = x[i][idx[i][j]]`; every row of `idx` has the same length.
    pub fn gather_per_row(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.dims2_of("gather_per_row", x)?;
        let k = idx.first().map_or(0, Vec::len);
        if idx.len() != r || idx.iter().any(|row| row.len() != k) {
            return Err(mismatch("gather_per_row", format!("index rows vs {r} rows")));
        }
        if idx.iter().flatten().any(|&j| j >= c) {
            return Err(mismatch("gather_per_row", format!("column out of range {c}")));
        }
        let t = self.value(x)?;
        let data = idx
            .iter()
            .enumerate()
            .flat_map(|(i, cols)| cols.iter().map(move |&j| t.data()[i * c + j]))
            .collect();
        let out = Tensor::matrix(r, k, data)?;
        let rule = Op::GatherPerRow {
            x: x.index(),
            idx: idx.to_vec(),
        };
        self.push("gather_per_row", out, rule, &[x])
    }

    /// Exact erf-based GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, gelu_scalar, Op::Gelu(a.index()))
    }

    /// Normalizes each row over the last axis (population variance), then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x)?;
        let m = *t.shape().last().ok_or_else(|| mismatch("layer_norm", "scalar".into()))?;
        let (gv, bv) = (self.value(gamma)?, self.value(beta)?);
        if gv.shape() != [m] || bv.shape() != [m] {
            return Err(mismatch(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs last axis {m}", gv.shape(), bv.shape()),
            ));
        }
        let rows = t.len() / m;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat[r * m + c] = h;
                data[r * m + c] = gv.data()[c] * h + bv.data()[c];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rule = Op::LayerNorm {
            x: x.index(),
            gamma: gamma.index(),
            beta: beta.index(),
            xhat,
            inv_std,
        };
        self.push("layer_norm", out, rule, &[x, gamma, beta])
    }

    /// Ungrouped [`Graph::conv1d_grouped`].
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
        self.conv1d_grouped(x, w, bias, stride, 1)
    }

    /// Valid (unpadded) strided 1-d convolution.
    ///
    /// `x` is `C_in x L`, `w` is `C_out x (C_in / groups) x k`, `bias` has
    /// length `C_out`. Output is `C_out x L'` with `L' = (L - k) / stride + 1`.
    pub fn conv1d_grouped(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let (c_in, len) = self.dims2_of("conv1d", x)?;
        let ws = self.shape(w)?.to_vec();
        let [c_out, cin_g, k] = ws[..] else {
            return Err(mismatch("conv1d", format!("weight shape {ws:?}")));
        };
        if stride == 0 || groups == 0 {
            return Err(GradError::InvalidOperand {
                op: "conv1d",
                detail: format!("stride {stride}, groups {groups}"),
            });
        }
        if c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups {
            return Err(mismatch(
                "conv1d",
                format!("input channels {c_in}, weight {ws:?}, groups {groups}"),
            ));
        }
        if self.shape(bias)? != [c_out] {
            return Err(mismatch("conv1d", format!("bias {:?}", self.shape(bias)?)));
        }
        if len < k {
            return Err(mismatch("conv1d", format!("input length {len} < kernel {k}")));
        }
        let out_len = (len - k) / stride + 1;
        let cout_g = c_out / groups;
        let (xv, wv, bv) = (self.value(x)?.data(), self.value(w)?.data(), self.value(bias)?.data());
        let mut data = vec![0.0; c_out * out_len];
        for (o, row) in data.chunks_mut(out_len).enumerate() {
            row.fill(bv[o]);
        }
        for grp in 0..groups {
            let col = im2col(xv, len, grp * cin_g, cin_g, k, stride, out_len);
            let w_grp = &wv[grp * cout_g * cin_g * k..(grp + 1) * cout_g * cin_g * k];
            let out_grp = &mut data[grp * cout_g * out_len..(grp + 1) * cout_g * out_len];
            matmul_acc(w_grp, &col, out_grp, cout_g, cin_g * k, out_len);
        }
        let out = Tensor::matrix(c_out, out_len, data)?;
        let rule = Op::Conv1d {
            x: x.index(),
            w: w.index(),
            b: bias.index(),
            stride,
            groups,
        };
        self.push("conv1d", out, rule, &[x, w, bias])
    }

    /// Zero-pads a `C x L` tensor along time.
    pub fn pad_time(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let (c, len) = self.dims2_of("pad_time", x)?;
        let out_len = len + left + right;
        let xv = self.value(x)?.data();
        let mut data = vec![0.0; c * out_len];
        for ch in 0..c {
            data[ch * out_len + left..ch * out_len + left + len]
                .copy_from_slice(&xv[ch * len..(ch + 1) * len]);
        }
        let out = Tensor::matrix(c, out_len, data)?;
        self.push("pad_time", out, Op::PadTime { x: x.index(), left }, &[x])
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2_of("slice_cols", x)?;
        if width == 0 || start + width > c {
            return Err(mismatch("slice_cols", format!("{start}+{width} of {c}")));
        }
        let t = self.value(x)?;
        let data = (0..r)
            .flat_map(|i| t.row(i)[start..start + width].iter().copied())
            .collect();
        let out = Tensor::matrix(r, width, data)?;
        self.push("slice_cols", out, Op::SliceCols { x: x.index(), start }, &[x])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| self.dims2_of("concat_cols", p))
            .collect::<Result<Vec<_>>>()?;
        let Some(&(rows, _)) = dims.first() else {
            return Err(mismatch("concat_cols", "no inputs".into()));
        };
        if dims.iter().any(|&(r, _)| r != rows) {
            return Err(mismatch("concat_cols", format!("row counts {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p)?.row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rule = Op::ConcatCols(parts.iter().map(|p| p.index()).collect());
        self.push("concat_cols", out, rule, parts)
    }

    /// Replaces the rows of `x` flagged in `rows` with the vector `e`.
    pub fn replace_rows(&mut self, x: Var, rows: &[bool], e: Var) -> Result<Var> {
        let (r, c) = self.dims2_of("replace_rows", x)?;
        if rows.len() != r || self.shape(e)? != [c] {
            return Err(mismatch(
                "replace_rows",
                format!("{r}x{c} with {} flags and row {:?}", rows.len(), self.shape(e)?),
            ));
        }
        let mut data = self.value(x)?.data().to_vec();
        let ev = self.value(e)?.data();
        for (i, &m) in rows.iter().enumerate() {
            if m {
                data[i * c..(i + 1) * c].copy_from_slice(ev);
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        let rule = Op::ReplaceRows {
            x: x.index(),
            e: e.index(),
            rows: rows.to_vec(),
        };
        self.push("replace_rows", out, rule, &[x, e])
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// elsewhere (used for losses with closed-form gradients).
    pub fn custom_scalar(
        &mut self,
        op: &'static str,
        x: Var,
        value: f64,
        grad: Vec<f64>,
    ) -> Result<Var> {
        if grad.len() != self.value(x)?.len() {
            return Err(mismatch(op, "gradient length differs from input".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(GradError::NonFinite { op });
        }
        let rule = Op::Precomputed { x: x.index(), grad };
        self.push(op, Tensor::scalar(value), rule, &[x])
    }
}
