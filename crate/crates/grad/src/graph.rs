use std::sync::atomic::{AtomicU32, Ordering};

use crate::kernels::{col2im_acc, im2col, matmul_at_acc, matmul_bt_acc};
use crate::{gelu_grad_scalar, GradError, Result, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    graph: u32,
    index: usize,
}

impl Var {
    pub(crate) fn index(self) -> usize {
        self.index
    }
}

/// Local backward rule of a recorded primitive. Indices refer to earlier nodes.
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Pow(usize, f64),
    Sum {
        x: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    GatherRows(usize, Vec<usize>),
    GatherPerRow {
        x: usize,
        idx: Vec<Vec<usize>>,
    },
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        groups: usize,
    },
    PadTime {
        x: usize,
        left: usize,
    },
    Reshape(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ReplaceRows {
        x: usize,
        e: usize,
        rows: Vec<bool>,
    },
    /// Gradient of the CTC negative log-likelihood is computed during the
    /// forward pass and stored here.
    Precomputed {
        x: usize,
        grad: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Single-threaded evaluation context recording primitives in execution
/// order. Inputs always precede the nodes that consume them.
pub struct Graph {
    id: u32,
    pub(crate) nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `x` with no gradient path back to it.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x)?.clone();
        Ok(self.constant(t))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes[v.index].requires_grad)
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(GradError::ForeignVar);
        }
        Ok(())
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.index]
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a primitive output after the non-finite check.
    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(GradError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let node = &self.nodes[loss.index];
        if node.value.len() != 1 {
            return Err(GradError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(GradError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.wants(i) {
            return;
        }
        let slot = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()]);
        f(slot);
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                self.acc(grads, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                let m = self.val(*b).len();
                self.acc(grads, *b, |d| {
                    for row in g.chunks(m) {
                        add_into(d, row);
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let xv = self.val(*x).data();
                let sv = self.val(*s).data();
                let m = xv.len() / sv.len();
                self.acc(grads, *x, |d| {
                    for (r, &sr) in sv.iter().enumerate() {
                        for c in 0..m {
                            d[r * m + c] += g[r * m + c] * sr;
                        }
                    }
                });
                self.acc(grads, *s, |d| {
                    for r in 0..sv.len() {
                        d[r] += crate::kernels::dot(&g[r * m..(r + 1) * m], &xv[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::Scale(a, f) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g));
            }
            Op::AddScalar(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::MatMul(a, b) => {
                let (n, m) = self.val(*a).dims2().expect("matmul lhs is 2-d");
                let p = self.val(*b).dims2().expect("matmul rhs is 2-d").1;
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |d| matmul_bt_acc(g, bv, d, n, p, m));
                self.acc(grads, *b, |d| matmul_at_acc(av, g, d, n, m, p));
            }
            Op::Transpose(a) => {
                let (r, c) = self.val(*a).dims2().expect("transpose input is 2-d");
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.val(*a).data();
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / x[k];
                    }
                });
            }
            Op::Pow(a, p) => {
                let x = self.val(*a).data();
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * p * x[k].powf(p - 1.0);
                    }
                });
            }
            Op::Sum {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for a in 0..axis_len {
                            for n in 0..inner {
                                d[(o * axis_len + a) * inner + n] += g[o * inner + n];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = out.data();
                let m = *out.shape().last().expect("softmax input has rank >= 1");
                self.acc(grads, *a, |d| {
                    for r in 0..y.len() / m {
                        let (yr, gr) = (&y[r * m..(r + 1) * m], &g[r * m..(r + 1) * m]);
                        let s = crate::kernels::dot(yr, gr);
                        for c in 0..m {
                            d[r * m + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = out.data();
                let m = *out.shape().last().expect("log_softmax input has rank >= 1");
                self.acc(grads, *a, |d| {
                    for r in 0..y.len() / m {
                        let gr = &g[r * m..(r + 1) * m];
                        let s: f64 = gr.iter().sum();
                        for c in 0..m {
                            d[r * m + c] += gr[c] - y[r * m + c].exp() * s;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let m = *self.val(*a).shape().last().expect("gather source has rank >= 1");
                self.acc(grads, *a, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * m..(src + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::GatherPerRow { x, idx } => {
                let m = self.val(*x).dims2().expect("gather_per_row source is 2-d").1;
                let k = idx.first().map_or(0, Vec::len);
                self.acc(grads, *x, |d| {
                    for (r, cols) in idx.iter().enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            d[r * m + c] += g[r * k + j];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.val(*a).data();
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * gelu_grad_scalar(x[k]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.val(*gamma).data();
                let m = gv.len();
                let rows = xhat.len() / m;
                self.acc(grads, *x, |d| {
                    let mut dxhat = vec![0.0; m];
                    for r in 0..rows {
                        let xh = &xhat[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        for c in 0..m {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let mean_d: f64 = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx: f64 = crate::kernels::dot(&dxhat, xh) / m as f64;
                        for c in 0..m {
                            d[r * m + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for r in 0..rows {
                        for c in 0..m {
                            d[c] += g[r * m + c] * xhat[r * m + c];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for row in g.chunks(m) {
                        add_into(d, row);
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                groups,
            } => {
                let (c_in, len) = self.val(*x).dims2().expect("conv input is 2-d");
                let ws = self.val(*w).shape();
                let (c_out, cin_g, k) = (ws[0], ws[1], ws[2]);
                let cout_g = c_out / groups;
                let out_len = out.shape()[1];
                let (xv, wv) = (self.val(*x).data(), self.val(*w).data());
                let need_x = self.wants(*x);
                let need_w = self.wants(*w);
                let mut dx = need_x.then(|| vec![0.0; c_in * len]);
                let mut dw = need_w.then(|| vec![0.0; wv.len()]);
                for grp in 0..*groups {
                    let g_grp = &g[grp * cout_g * out_len..(grp + 1) * cout_g * out_len];
                    let w_grp = &wv[grp * cout_g * cin_g * k..(grp + 1) * cout_g * cin_g * k];
                    if let Some(dw) = dw.as_mut() {
                        let col = im2col(xv, len, grp * cin_g, cin_g, k, *stride, out_len);
                        let dw_grp =
                            &mut dw[grp * cout_g * cin_g * k..(grp + 1) * cout_g * cin_g * k];
                        matmul_bt_acc(g_grp, &col, dw_grp, cout_g, out_len, cin_g * k);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dcol = vec![0.0; cin_g * k * out_len];
                        matmul_at_acc(w_grp, g_grp, &mut dcol, cout_g, cin_g * k, out_len);
                        col2im_acc(&dcol, dx, len, grp * cin_g, cin_g, k, *stride, out_len);
                    }
                }
                if let Some(dx) = dx {
                    self.acc(grads, *x, |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, |d| add_into(d, &dw));
                }
                self.acc(grads, *b, |d| {
                    for (o, row) in g.chunks(out_len).enumerate() {
                        d[o] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::PadTime { x, left } => {
                let (c, len) = self.val(*x).dims2().expect("pad input is 2-d");
                let out_len = out.shape()[1];
                self.acc(grads, *x, |d| {
                    for ch in 0..c {
                        add_into(
                            &mut d[ch * len..(ch + 1) * len],
                            &g[ch * out_len + left..ch * out_len + left + len],
                        );
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::SliceCols { x, start } => {
                let (rows, m) = self.val(*x).dims2().expect("slice input is 2-d");
                let w = out.shape()[1];
                self.acc(grads, *x, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * m + start..r * m + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (rows, w) = self.val(p).dims2().expect("concat part is 2-d");
                    self.acc(grads, p, |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ReplaceRows { x, e, rows } => {
                let m = self.val(*e).len();
                self.acc(grads, *x, |d| {
                    for (r, &masked) in rows.iter().enumerate() {
                        if !masked {
                            add_into(&mut d[r * m..(r + 1) * m], &g[r * m..(r + 1) * m]);
                        }
                    }
                });
                self.acc(grads, *e, |d| {
                    for (r, &masked) in rows.iter().enumerate() {
                        if masked {
                            add_into(d, &g[r * m..(r + 1) * m]);
                        }
                    }
                });
            }
            Op::Precomputed { x, grad } => {
                let s = g[0];
                self.acc(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += s * grad[k];
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn get(&self, g: &Graph, v: Var) -> Result<Tensor> {
        if v.graph != self.graph {
            return Err(GradError::ForeignVar);
        }
        g.check(v)?;
        let shape = g.node(v).value.shape().to_vec();
        let data = self
            .grads
            .get(v.index)
            .and_then(|o| o.clone())
            .unwrap_or_else(|| vec![0.0; g.node(v).value.len()]);
        Tensor::new(shape, data)
    }
}
