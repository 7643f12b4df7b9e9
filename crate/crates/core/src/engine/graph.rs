//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and the backward pass is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::array::Array;
use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom`]: receives the output gradient and the
/// parent values and returns one optional gradient per parent.
pub type CustomBackward =
    Box<dyn Fn(&Array, &[&Array]) -> Vec<Option<Array>> + Send + Sync + 'static>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv1dGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        step: usize,
    },
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    PairConcat(Var, Var),
    Sum(Var),
    Mean(Var),
    Custom {
        parents: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b)
            | MatMulT(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddRow(a, b)
            | MulRow(a, b)
            | PairConcat(a, b) => vec![*a, *b],
            Scale(a, _) | Relu(a) | Softmax(a) | LogSoftmax(a) | Reshape(a) | Sum(a) | Mean(a) => {
                vec![*a]
            }
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                ..
            } => vec![*x, *mean, *var, *gamma, *beta],
            Conv1d { x, w, b, .. } | Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            SliceCols { x, .. } | SliceRows { x, .. } | Gather { x, .. } => vec![*x],
            Embedding { table, .. } => vec![*table],
            Custom { parents, .. } => parents.clone(),
        }
    }
}

struct Node {
    value: Arc<Array>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    check_nan: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dims2(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    match a.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, format!("expected 2-D operand, got {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects NaN outputs op by op. Off by default; `-inf` stays legal for
    /// attention masks.
    pub fn with_nan_checks(mut self, on: bool) -> Self {
        self.check_nan = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op) -> Result<Var> {
        if self.check_nan && value.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite(format!(
                "output of node {}",
                self.nodes.len()
            )));
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn variable(&mut self, value: Array) -> Var {
        self.leaf(Arc::new(value), true)
    }

    pub fn leaf(&mut self, value: Arc<Array>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf, created once per graph and reused afterwards.
    pub fn param(&mut self, name: &str, value: &Arc<Array>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(Arc::clone(value), trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Array::new([m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_t", self.value(a))?;
        let (n, k2) = dims2("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("[{m},{k}] x [{n},{k2}]^T"),
            ));
        }
        let out = kernels::matmul_t(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Array::new([m, n], out)?, Op::MatMulT(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        self.push(Array::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let cols = *self.shape(a).last().unwrap_or(&1);
        if self.value(b).len() != cols {
            return Err(Error::shape(
                op,
                format!("{:?} with row vector {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(cols)
    }

    /// Adds a vector to every row (last axis).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = self.row_broadcast("add_row", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &x) in row.iter_mut().zip(bv) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// Multiplies every row (last axis) elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = self.row_broadcast("mul_row", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &x) in row.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        self.push(out, Op::MulRow(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = kernels::softmax_rows(x.data(), *x.shape().last().unwrap_or(&1));
        let shape = x.shape().to_vec();
        self.push(Array::new(shape, out)?, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = kernels::log_softmax_rows(x.data(), *x.shape().last().unwrap_or(&1));
        let shape = x.shape().to_vec();
        self.push(Array::new(shape, out)?, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.row_broadcast("layer_norm", x, gamma)?;
        self.row_broadcast("layer_norm", x, beta)?;
        let ln = kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        debug_assert_eq!(ln.y.len() % cols, 0);
        let shape = self.shape(x).to_vec();
        self.push(
            Array::new(shape, ln.y)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: ln.xhat,
                inv_std: ln.inv_std,
            },
        )
    }

    /// Batch normalization from running statistics over the last (channel) axis.
    pub fn batch_norm_inference(
        &mut self,
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let cols = self.row_broadcast("batch_norm", x, mean)?;
        for p in [var, gamma, beta] {
            self.row_broadcast("batch_norm", x, p)?;
        }
        let (m, v, g, b) = (
            self.value(mean).data(),
            self.value(var).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for c in 0..cols {
                row[c] = (row[c] - m[c]) / (v[c] + eps).sqrt() * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            },
        )
    }

    /// 1-D convolution over time. x: [T, Cin], w: [K, Cin, Cout], b: [Cout].
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_l: usize,
        pad_r: usize,
    ) -> Result<Var> {
        let (len, cin) = dims2("conv1d", self.value(x))?;
        let (kernel, wcin, cout) = match self.shape(w) {
            [k, ci, co] => (*k, *ci, *co),
            s => {
                return Err(Error::shape(
                    "conv1d",
                    format!("weight must be 3-D, got {s:?}"),
                ))
            }
        };
        if wcin != cin || self.value(b).len() != cout {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let out_len =
            kernels::conv_out_len(len, kernel, stride, pad_l, pad_r).ok_or_else(|| {
                Error::shape(
                    "conv1d",
                    format!("length {len} with pads {pad_l}/{pad_r} shorter than kernel {kernel}"),
                )
            })?;
        let geom = Conv1dGeom {
            len,
            cin,
            cout,
            kernel,
            stride,
            pad_l,
            pad_r,
            out_len,
        };
        let out = kernels::conv1d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        self.push(
            Array::new([out_len, cout], out)?,
            Op::Conv1d { x, w, b, geom },
        )
    }

    /// 2-D convolution over (time, frequency). x: [T, F, Cin],
    /// w: [Kt, Kf, Cin, Cout]. Time pads are explicit; frequency padding is
    /// symmetric.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        time_pads: (usize, usize),
        freq_pad: usize,
    ) -> Result<Var> {
        let (len, freq, cin) = match self.shape(x) {
            [t, f, c] => (*t, *f, *c),
            s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be 3-D, got {s:?}"),
                ))
            }
        };
        let (kt, kf, wcin, cout) = match self.shape(w) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be 4-D, got {s:?}"),
                ))
            }
        };
        if wcin != cin || self.value(b).len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let out_len = kernels::conv_out_len(len, kt, stride.0, time_pads.0, time_pads.1)
            .ok_or_else(|| Error::shape("conv2d", format!("time length {len} < kernel {kt}")))?;
        let out_freq = kernels::conv_out_len(freq, kf, stride.1, freq_pad, freq_pad)
            .ok_or_else(|| Error::shape("conv2d", format!("freq length {freq} < kernel {kf}")))?;
        let geom = Conv2dGeom {
            time: Conv1dGeom {
                len,
                cin,
                cout,
                kernel: kt,
                stride: stride.0,
                pad_l: time_pads.0,
                pad_r: time_pads.1,
                out_len,
            },
            freq,
            kernel_f: kf,
            stride_f: stride.1,
            pad_f: freq_pad,
            out_freq,
        };
        let out = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        self.push(
            Array::new([out_len, out_freq, cout], out)?,
            Op::Conv2d { x, w, b, geom },
        )
    }

    /// Concatenates 2-D operands along columns.
    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        let rows = match vs.first() {
            Some(&v) => dims2("concat_cols", self.value(v))?.0,
            None => return Err(Error::shape("concat_cols", "no operands")),
        };
        let mut widths = Vec::with_capacity(vs.len());
        for &v in vs {
            let (r, c) = dims2("concat_cols", self.value(v))?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in vs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        self.push(Array::new([rows, total], out)?, Op::ConcatCols(vs.to_vec()))
    }

    /// Concatenates operands along the leading axis.
    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let first = vs
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no operands"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in vs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{tail:?} vs {s:?}")));
            }
            rows += s[0];
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Array::new(shape, out)?, Op::ConcatRows(vs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2("slice_cols", self.value(x))?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {cols} columns", start + len),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(Array::new([rows, len], out)?, Op::SliceCols { x, start })
    }

    /// Rows `start, start+step, ...` below `end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize, step: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if step == 0 || start > end || end > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} step {step} of {rows} rows"),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::new();
        let mut n = 0;
        for r in (start..end).step_by(step) {
            out.extend_from_slice(xv.row(r));
            n += 1;
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = n;
        self.push(Array::new(shape, out)?, Op::SliceRows { x, start, step })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x))
    }

    /// Row lookup; ids are not differentiable.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = dims2("embedding", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of {n} rows"),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            Array::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Per-row column gather: `out[i, j] = x[i, index[i*cols + j]]`, or
    /// `-inf` where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, cols: usize) -> Result<Var> {
        let (rows, xc) = dims2("gather", self.value(x))?;
        if index.len() != rows * cols || index.iter().flatten().any(|&c| c >= xc) {
            return Err(Error::shape(
                "gather",
                format!(
                    "index of {} for {rows}x{cols} from {xc} columns",
                    index.len()
                ),
            ));
        }
        let xv = self.value(x);
        let out = index
            .iter()
            .enumerate()
            .map(|(k, c)| match c {
                Some(c) => xv.row(k / cols)[*c],
                None => f64::NEG_INFINITY,
            })
            .collect();
        self.push(Array::new([rows, cols], out)?, Op::Gather { x, index })
    }

    /// All pairs: row `t * rows(g) + u` is `concat(h[t], g[u])`.
    pub fn pair_concat(&mut self, h: Var, g: Var) -> Result<Var> {
        let (th, dh) = dims2("pair_concat", self.value(h))?;
        let (ug, dg) = dims2("pair_concat", self.value(g))?;
        let (hv, gv) = (self.value(h), self.value(g));
        let mut out = Vec::with_capacity(th * ug * (dh + dg));
        for t in 0..th {
            for u in 0..ug {
                out.extend_from_slice(hv.row(t));
                out.extend_from_slice(gv.row(u));
            }
        }
        self.push(Array::new([th * ug, dh + dg], out)?, Op::PairConcat(h, g))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / v.len().max(1) as f64;
        self.push(Array::scalar(s), Op::Mean(x))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Array,
        backward: CustomBackward,
    ) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                parents: parents.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array::full(self.shape(output).to_vec(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            let parents = node.op.parents();
            let pgrads = self.op_backward(node, &gout)?;
            for (p, g) in parents.into_iter().zip(pgrads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every trainable named parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(self.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    fn op_backward(&self, node: &Node, g: &Array) -> Result<Vec<Option<Array>>> {
        let val = |v: Var| self.value(v);
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let like = |v: Var, data: Vec<f64>| Array::new(val(v).shape().to_vec(), data);
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", val(*a))?;
                let n = val(*b).shape()[1];
                let da = wants(*a)
                    .then(|| like(*a, kernels::matmul_t(g.data(), val(*b).data(), m, n, k)))
                    .transpose()?;
                let db = wants(*b)
                    .then(|| like(*b, kernels::matmul_tn(val(*a).data(), g.data(), m, k, n)))
                    .transpose()?;
                vec![da, db]
            }
            Op::MatMulT(a, b) => {
                // y[m,n] = a[m,k] b[n,k]^T
                let (m, k) = dims2("matmul_t", val(*a))?;
                let n = val(*b).shape()[0];
                let da = wants(*a)
                    .then(|| like(*a, kernels::matmul(g.data(), val(*b).data(), m, n, k)))
                    .transpose()?;
                let db = wants(*b)
                    .then(|| like(*b, kernels::matmul_tn(g.data(), val(*a).data(), m, n, k)))
                    .transpose()?;
                vec![da, db]
            }
            Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub(_, _) => vec![Some(g.clone()), Some(g.map(|x| -x))],
            Op::Mul(a, b) => {
                let prod = |o: &Array| {
                    Array::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(o.data()).map(|(x, y)| x * y).collect(),
                    )
                };
                vec![Some(prod(val(*b))?), Some(prod(val(*a))?)]
            }
            Op::Scale(_, c) => vec![Some(g.map(|x| x * c))],
            Op::AddRow(_, b) => {
                let cols = val(*b).len();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                vec![Some(g.clone()), Some(like(*b, db)?)]
            }
            Op::MulRow(a, b) => {
                let bv = val(*b).data();
                let cols = bv.len();
                let mut da = g.clone();
                let mut db = vec![0.0; cols];
                for (grow, arow) in da
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(val(*a).data().chunks(cols))
                {
                    for c in 0..cols {
                        db[c] += grow[c] * arow[c];
                        grow[c] *= bv[c];
                    }
                }
                vec![Some(da), Some(like(*b, db)?)]
            }
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![Some(like(*a, d)?)]
            }
            Op::Softmax(a) => {
                let cols = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        drow[c] = yrow[c] * (grow[c] - dot);
                    }
                }
                vec![Some(like(*a, d)?)]
            }
            Op::LogSoftmax(a) => {
                let cols = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let gsum: f64 = grow.iter().sum();
                    for c in 0..cols {
                        drow[c] = grow[c] - yrow[c].exp() * gsum;
                    }
                }
                vec![Some(like(*a, d)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta: _,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma).data();
                let cols = gm.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for (r, is) in inv_std.iter().enumerate() {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let hrow = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = grow[c] * gm[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[c];
                        dgamma[c] += grow[c] * hrow[c];
                        dbeta[c] += grow[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for c in 0..cols {
                        let dh = grow[c] * gm[c];
                        dx[r * cols + c] = is * (dh - mean_dh - hrow[c] * mean_dh_h);
                    }
                }
                vec![
                    Some(like(*x, dx)?),
                    Some(like(*gamma, dgamma)?),
                    Some(Array::new(val(*gamma).shape().to_vec(), dbeta)?),
                ]
            }
            Op::BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            } => {
                let (m, v, gm) = (val(*mean).data(), val(*var).data(), val(*gamma).data());
                let cols = m.len();
                let mut dx = vec![0.0; g.len()];
                let mut dmean = vec![0.0; cols];
                let mut dvar = vec![0.0; cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for (r, grow) in g.data().chunks(cols).enumerate() {
                    let xrow = val(*x).row_slice(r, cols);
                    for c in 0..cols {
                        let is = 1.0 / (v[c] + eps).sqrt();
                        let centered = xrow[c] - m[c];
                        dx[r * cols + c] = grow[c] * gm[c] * is;
                        dmean[c] -= grow[c] * gm[c] * is;
                        dvar[c] -= 0.5 * grow[c] * gm[c] * centered * is * is * is;
                        dgamma[c] += grow[c] * centered * is;
                        dbeta[c] += grow[c];
                    }
                }
                vec![
                    Some(like(*x, dx)?),
                    Some(like(*mean, dmean)?),
                    Some(like(*var, dvar)?),
                    Some(like(*gamma, dgamma)?),
                    Some(like(*beta, dbeta)?),
                ]
            }
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv1d_backward(val(*x).data(), val(*w).data(), g.data(), geom);
                vec![
                    Some(like(*x, dx)?),
                    Some(like(*w, dw)?),
                    Some(like(*b, db)?),
                ]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x).data(), val(*w).data(), g.data(), geom);
                vec![
                    Some(like(*x, dx)?),
                    Some(like(*w, dw)?),
                    Some(like(*b, db)?),
                ]
            }
            Op::ConcatCols(vs) => {
                let total = g.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(vs.len());
                for &v in vs {
                    let (rows, c) = dims2("concat_cols", val(v))?;
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    out.push(Some(like(v, d)?));
                }
                out
            }
            Op::ConcatRows(vs) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(vs.len());
                for &v in vs {
                    let n = val(v).len();
                    out.push(Some(like(v, g.data()[offset..offset + n].to_vec())?));
                    offset += n;
                }
                out
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = dims2("slice_cols", val(*x))?;
                let w = g.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                vec![Some(like(*x, d)?)]
            }
            Op::SliceRows { x, start, step } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (k, grow) in g.data().chunks(cols.max(1)).enumerate() {
                    let r = start + k * step;
                    d[r * cols..(r + 1) * cols].copy_from_slice(grow);
                }
                vec![Some(like(*x, d)?)]
            }
            Op::Reshape(x) => vec![Some(like(*x, g.data().to_vec())?)],
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (k, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] += g.data()[k * d + c];
                    }
                }
                vec![Some(like(*table, dt)?)]
            }
            Op::Gather { x, index } => {
                let xv = val(*x);
                let (xc, cols) = (xv.cols(), g.cols());
                let mut d = vec![0.0; xv.len()];
                for (k, c) in index.iter().enumerate() {
                    if let Some(c) = c {
                        d[(k / cols) * xc + c] += g.data()[k];
                    }
                }
                vec![Some(like(*x, d)?)]
            }
            Op::PairConcat(h, gg) => {
                let (th, dh) = dims2("pair_concat", val(*h))?;
                let (ug, dg) = dims2("pair_concat", val(*gg))?;
                let mut d_h = vec![0.0; th * dh];
                let mut d_g = vec![0.0; ug * dg];
                for t in 0..th {
                    for u in 0..ug {
                        let row = g.row(t * ug + u);
                        for c in 0..dh {
                            d_h[t * dh + c] += row[c];
                        }
                        for c in 0..dg {
                            d_g[u * dg + c] += row[dh + c];
                        }
                    }
                }
                vec![Some(like(*h, d_h)?), Some(like(*gg, d_g)?)]
            }
            Op::Sum(x) => vec![Some(Array::full(val(*x).shape().to_vec(), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                vec![Some(Array::full(val(*x).shape().to_vec(), g.item() / n))]
            }
            Op::Custom { parents, backward } => {
                let pv: Vec<&Array> = parents.iter().map(|&p| val(p)).collect();
                backward(g, &pv)
            }
        };
        Ok(out)
    }
}

impl Array {
    fn row_slice(&self, r: usize, cols: usize) -> &[f64] {
        &self.data()[r * cols..(r + 1) * cols]
    }
}
