use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    StopGradient,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Row {
        x: Var,
        i: usize,
    },
    Index {
        x: Var,
        i: usize,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Tape of recorded tensor operations.
///
/// Nodes are appended in creation order, which is always a valid topological
/// order. Leaves keep their gradients across [`Graph::backward`] calls until
/// [`Graph::zero_grad`]; intermediate adjoints live only for one pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `out[n, m] += a[n, k] * b[k, m]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node created at or after `len`. Handles to dropped nodes
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` when the leaf does not require
    /// gradients or no backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a vector `b[d]` to every trailing-axis row of `a[..., d]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let d = ta.last_dim();
        if tb.shape() != [d] || ta.shape().is_empty() {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (x, &y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `a[..., n, k] x b[k, m] -> [..., n, m]`. A 1-D `a[k]` yields `[m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let k = ta.last_dim();
        if ta.shape().is_empty() || tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let m = tb.shape()[1];
        let n = ta.rows();
        let mut data = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut data, n, k, m);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let value = Tensor { shape, data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor {
            shape: vec![c, r],
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    /// Softmax over the trailing axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: softmax_rows(t.data(), t.last_dim()),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let d = t.last_dim();
        let mut data = vec![0.0; t.numel()];
        for (row, orow) in t.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::LogSoftmax(x)))
    }

    /// Layer normalisation over the trailing axis with biased variance,
    /// followed by the affine map `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (t, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = t.last_dim();
        if t.shape().is_empty() || tg.shape() != [d] || tb.shape() != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::Domain {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[x.0].value.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[x.0].value.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Value-identical copy through which no gradient flows.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, false, Op::StopGradient)
    }

    /// Rows `table[ids[i]]` stacked into `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(TensorError::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = &self.nodes[parts[0].0].value;
        let cols = first.last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 2 || t.shape()[1] != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = &self.nodes[parts[0].0].value;
        let rows = first.shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.shape()[1]);
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 || len == 0 || start + len > t.shape()[1] {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = t.shape()[0];
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor {
            shape: vec![rows, len],
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    /// Row `i` of a 2-D tensor as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "row",
                lhs: t.shape().to_vec(),
                rhs: vec![i],
            });
        }
        if i >= t.shape()[0] {
            return Err(TensorError::Index {
                op: "row",
                index: i,
                len: t.shape()[0],
            });
        }
        let value = Tensor {
            shape: vec![t.shape()[1]],
            data: t.row(i).to_vec(),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Row { x, i }))
    }

    /// Element `i` of the flattened buffer as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if i >= t.numel() {
            return Err(TensorError::Index {
                op: "index",
                index: i,
                len: t.numel(),
            });
        }
        let value = Tensor::scalar(t.data()[i]);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Index { x, i }))
    }

    /// Clamp into `[lo, hi]`; the gradient is passed through inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Reverse pass from a one-element `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalar(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            // Adds `f(buffer)` into the adjoint of `v`, allocating zeros on first touch.
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[v.0].requires_grad {
                    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                    f(slot);
                }
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s -= g));
                }
                Op::AddRow(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    let d = val(*b).numel();
                    acc(*b, &mut |s| {
                        for row in g.chunks_exact(d) {
                            s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    acc(*a, &mut |s| {
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(vb) {
                            *s += g * y;
                        }
                    });
                    acc(*b, &mut |s| {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(va) {
                            *s += g * x;
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    acc(*a, &mut |s| {
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(vb) {
                            *s += g / y;
                        }
                    });
                    acc(*b, &mut |s| {
                        for (((s, g), x), y) in s.iter_mut().zip(&g).zip(va).zip(vb) {
                            *s -= g * x / (y * y);
                        }
                    });
                }
                Op::Scale(x, c) => {
                    acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g * c));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let k = ta.last_dim();
                    let m = tb.shape()[1];
                    let n = ta.rows();
                    if rg(*a) {
                        acc(*a, &mut |s| {
                            for i in 0..n {
                                let grow = &g[i * m..(i + 1) * m];
                                for p in 0..k {
                                    let brow = &tb.data()[p * m..(p + 1) * m];
                                    s[i * k + p] +=
                                        grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        });
                    }
                    if rg(*b) {
                        acc(*b, &mut |s| {
                            for i in 0..n {
                                let grow = &g[i * m..(i + 1) * m];
                                for p in 0..k {
                                    let av = ta.data()[i * k + p];
                                    for (s, gv) in s[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                        *s += av * gv;
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                    acc(*x, &mut |s| {
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    acc(*x, &mut |s| {
                        for ((srow, grow), yrow) in
                            s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((s, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                                *s += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    acc(*x, &mut |s| {
                        for ((srow, grow), yrow) in
                            s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d))
                        {
                            let total: f64 = grow.iter().sum();
                            for ((s, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                                *s += gv - yv.exp() * total;
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = node.value.last_dim();
                    let gv = val(*gain).data();
                    acc(*x, &mut |s| {
                        let mut dxhat = vec![0.0; d];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let grow = &g[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = grow[j] * gv[j];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 =
                                dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                s[r * d + j] += rs * (dxhat[j] - m1 - hrow[j] * m2);
                            }
                        }
                    });
                    acc(*gain, &mut |s| {
                        for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((s, gv), h) in s.iter_mut().zip(grow).zip(hrow) {
                                *s += gv * h;
                            }
                        }
                    });
                    acc(*bias, &mut |s| {
                        for grow in g.chunks_exact(d) {
                            s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |s| {
                        for ((s, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *s += gv * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |s| {
                        for ((s, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *s += gv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = val(*x).data();
                    acc(*x, &mut |s| {
                        for ((s, gv), &v) in s.iter_mut().zip(&g).zip(xv) {
                            *s += gv * gelu_grad(v);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = val(*x).data();
                    acc(*x, &mut |s| {
                        for ((s, gv), &v) in s.iter_mut().zip(&g).zip(xv) {
                            if v > 0.0 {
                                *s += gv;
                            }
                        }
                    });
                }
                Op::Log(x) => {
                    let xv = val(*x).data();
                    acc(*x, &mut |s| {
                        for ((s, gv), v) in s.iter_mut().zip(&g).zip(xv) {
                            *s += gv / v;
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |s| {
                        for ((s, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *s += gv * yv;
                        }
                    });
                }
                Op::Sqrt(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |s| {
                        for ((s, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *s += gv * 0.5 / yv;
                        }
                    });
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += gv));
                }
                Op::Mean(x) => {
                    let gv = g[0] / val(*x).numel() as f64;
                    acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += gv));
                }
                Op::StopGradient => {}
                Op::Gather { table, ids } => {
                    let d = node.value.last_dim();
                    acc(*table, &mut |s| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (s, gv) in s[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..]) {
                                *s += gv;
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        let slice = &g[offset..offset + n];
                        acc(p, &mut |s| s.iter_mut().zip(slice).for_each(|(s, g)| *s += g));
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, w) = (val(p).shape()[0], val(p).shape()[1]);
                        acc(p, &mut |s| {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + w];
                                s[r * w..(r + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(s, g)| *s += g);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let cols = val(*x).shape()[1];
                    let w = node.value.shape()[1];
                    acc(*x, &mut |s| {
                        for (r, grow) in g.chunks_exact(w).enumerate() {
                            s[r * cols + start..r * cols + start + w]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                }
                Op::Row { x, i } => {
                    let d = g.len();
                    acc(*x, &mut |s| {
                        s[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(s, g)| *s += g)
                    });
                }
                Op::Index { x, i } => {
                    acc(*x, &mut |s| s[*i] += g[0]);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = val(*x).data();
                    acc(*x, &mut |s| {
                        for ((s, gv), &v) in s.iter_mut().zip(&g).zip(xv) {
                            if v >= *lo && v <= *hi {
                                *s += gv;
                            }
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(s, g)| *s += g),
                None => {
                    node.grad = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }
}
