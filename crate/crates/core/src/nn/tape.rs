//! Reverse-mode differentiation tape.
//!
//! Every forward op appends a node holding its value and enough context to
//! run the backward pass. Nodes are stored in creation order, so walking the
//! tape backwards is a valid topological order. A tape is single-threaded;
//! build a new one per forward pass.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

/// How the right operand of a binary op is broadcast over the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Unary {
        kind: UnKind,
        a: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Focal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of leaf `v`, or `None` if `v` does not influence the loss
    /// (or is an intermediate node).
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0]
            .value
            .dims2()
            .map_err(|_| Error::dim(op, format!("operand #{} has shape {:?}", v.0, self.shape(v))))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Validation(format!("{name} produced a non-finite value")));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Load a named parameter. Repeated loads on one tape return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))?;
        let v = if store.is_frozen(name) {
            self.constant(p.clone())
        } else {
            self.leaf(p.clone())
        };
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters loaded on this tape, by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    // ----------------------------------------------------------------------
    // elementwise

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (n, m) = self.dims(a, name)?;
        let (bn, bm) = self.dims(b, name)?;
        let bcast = if (bn, bm) == (n, m) {
            Bcast::Same
        } else if (bn, bm) == (1, 1) {
            Bcast::Scalar
        } else if bn == 1 && bm == m {
            Bcast::Row
        } else if bm == 1 && bn == n {
            Bcast::Col
        } else {
            return Err(Error::dim(
                name,
                format!("#{} is {n}x{m}, #{} is {bn}x{bm}", a.0, b.0),
            ));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = match kind {
            BinKind::Add => binary_values(av, bv, bcast, m, |x, y| x + y),
            BinKind::Sub => binary_values(av, bv, bcast, m, |x, y| x - y),
            BinKind::Mul => binary_values(av, bv, bcast, m, |x, y| x * y),
            BinKind::Div => binary_values(av, bv, bcast, m, |x, y| x / y),
            BinKind::Min => binary_values(av, bv, bcast, m, f64::min),
            BinKind::Max => binary_values(av, bv, bcast, m, f64::max),
        };
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::Binary { kind, a, b, bcast },
            needs,
            name,
        )
    }

    /// `a + b`; `b` may be the same shape, a row `1×m`, a column `n×1` or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Min, a, b, "minimum")
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Max, a, b, "maximum")
    }

    fn unary(&mut self, kind: UnKind, a: Var, name: &'static str) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            UnKind::Relu => |x| x.max(0.0),
            UnKind::Sigmoid => sigmoid,
            UnKind::Exp => f64::exp,
            UnKind::Log => f64::ln,
            UnKind::Sqrt => f64::sqrt,
            UnKind::Abs => f64::abs,
        };
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())?;
        let needs = self.needs(a);
        self.push(out, Op::Unary { kind, a }, needs, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Relu, a, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, a, "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Exp, a, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Log, a, "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Sqrt, a, "sqrt")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Abs, a, "abs")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| x * c).collect())?;
        let needs = self.needs(a);
        self.push(out, Op::Scale { a, c }, needs, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| x + c).collect())?;
        let needs = self.needs(a);
        self.push(out, Op::AddScalar { a }, needs, "add_scalar")
    }

    // ----------------------------------------------------------------------
    // structural

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a, "matmul")?;
        let (k2, m) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("#{} is {n}x{k}, #{} is {k2}x{m}", a.0, b.0),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(&[n, m], out)?,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            needs,
            "matmul",
        )
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a, "matmul_t")?;
        let (m, k2) = self.dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_t",
                format!("#{} is {n}x{k}, #{} is {m}x{k2} (transposed)", a.0, b.0),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(&[n, m], out)?,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            needs,
            "matmul_t",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(&[m, n], out)?, Op::Transpose { a }, needs, "transpose")
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::dim("concat", "need at least one part and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims(p, "concat"))
            .collect::<Result<_>>()?;
        let (n0, m0) = dims[0];
        let (n, m, data) = if axis == 0 {
            if let Some((i, d)) = dims.iter().enumerate().find(|(_, d)| d.1 != m0) {
                return Err(Error::dim(
                    "concat",
                    format!("part {i} has {} columns, expected {m0}", d.1),
                ));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            (dims.iter().map(|d| d.0).sum(), m0, data)
        } else {
            if let Some((i, d)) = dims.iter().enumerate().find(|(_, d)| d.0 != n0) {
                return Err(Error::dim(
                    "concat",
                    format!("part {i} has {} rows, expected {n0}", d.0),
                ));
            }
            let m: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(n0 * m);
            for i in 0..n0 {
                for (&p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[i * d.1..(i + 1) * d.1]);
                }
            }
            (n0, m, data)
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(&[n, m], data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
            "concat",
        )
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..start + len`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims(a, "slice")?;
        let extent = if axis == 0 { n } else { m };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} on axis {axis} of {n}x{m}", start + len),
            ));
        }
        let src = self.value(a).data();
        let (shape, data) = if axis == 0 {
            ([len, m], src[start * m..(start + len) * m].to_vec())
        } else {
            let mut d = Vec::with_capacity(n * len);
            for i in 0..n {
                d.extend_from_slice(&src[i * m + start..i * m + start + len]);
            }
            ([n, len], d)
        };
        let needs = self.needs(a);
        self.push(
            Tensor::new(&shape, data)?,
            Op::Slice { a, axis, start },
            needs,
            "slice",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        self.push(t, Op::Reshape { a }, needs, "reshape")
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(table, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::dim(
                "embedding_lookup",
                format!("id {bad} out of range for table with {n} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * m);
        for &i in ids {
            data.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let needs = self.needs(table);
        self.push(
            Tensor::new(&[ids.len(), m], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
            "embedding_lookup",
        )
    }

    // ----------------------------------------------------------------------
    // reductions

    /// Sum of all elements, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`: 0 gives a `1×m` row, 1 gives an `n×1` column.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (n, m) = self.dims(a, "sum_axis")?;
        let src = self.value(a).data();
        let t = match axis {
            0 => {
                let mut out = vec![0.0; m];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(&src[i * m..(i + 1) * m]) {
                        *o += v;
                    }
                }
                Tensor::new(&[1, m], out)?
            }
            1 => Tensor::new(
                &[n, 1],
                (0..n).map(|i| src[i * m..(i + 1) * m].iter().sum()).collect(),
            )?,
            _ => return Err(Error::dim("sum_axis", format!("axis {axis} on rank 2"))),
        };
        let needs = self.needs(a);
        self.push(t, Op::SumAxis { a, axis }, needs, "sum_axis")
    }

    // ----------------------------------------------------------------------
    // neural-network primitives

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` with no affine part.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.dims(a, "layernorm")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                out[i * m + j] = (row[j] - mu) * is;
            }
            inv_std.push(is);
        }
        let needs = self.needs(a);
        self.push(
            Tensor::new(&[n, m], out)?,
            Op::LayerNorm { a, inv_std },
            needs,
            "layernorm",
        )
    }

    /// Softmax along `axis` (1 = within each row, 0 = within each column),
    /// max-subtracted for overflow safety.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (n, m) = self.dims(a, "softmax")?;
        if axis > 1 {
            return Err(Error::dim("softmax", format!("axis {axis} on rank 2")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        let (outer, inner, so, si) = if axis == 1 { (n, m, m, 1) } else { (m, n, 1, m) };
        for o in 0..outer {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..inner {
                mx = mx.max(src[o * so + k * si]);
            }
            let mut z = 0.0;
            for k in 0..inner {
                let e = (src[o * so + k * si] - mx).exp();
                out[o * so + k * si] = e;
                z += e;
            }
            for k in 0..inner {
                out[o * so + k * si] /= z;
            }
        }
        let needs = self.needs(a);
        self.push(
            Tensor::new(&[n, m], out)?,
            Op::Softmax { a, axis },
            needs,
            "softmax",
        )
    }

    /// Elementwise sigmoid focal loss `−α (1 − p_t)^γ log p_t` against fixed
    /// targets in `[0, 1]`. Returns per-element losses.
    pub fn focal(&mut self, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(Error::dim(
                "focal_loss",
                format!("logits {:?} vs targets {:?}", t.shape(), targets.shape()),
            ));
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| focal_value(x, y, alpha, gamma))
            .collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(logits);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Focal {
                logits,
                targets: targets.data().to_vec(),
                alpha,
                gamma,
            },
            needs,
            "focal_loss",
        )
    }

    // ----------------------------------------------------------------------
    // backward

    /// Back-propagate from a `1×1` output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            // only leaf gradients are kept; intermediates are released as we go
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let (n, m) = node.value.dims2().expect("rank 2");
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let want_a = self.needs(*a);
                let want_b = self.needs(*b);
                let mut ga = if want_a { vec![0.0; n * m] } else { Vec::new() };
                let mut gb = if want_b {
                    vec![0.0; self.value(*b).len()]
                } else {
                    Vec::new()
                };
                for i in 0..n {
                    for j in 0..m {
                        let k = i * m + j;
                        let bi = bidx(*bcast, i, j, m);
                        let (x, y) = (av[k], bv[bi]);
                        let (da, db) = match kind {
                            BinKind::Add => (1.0, 1.0),
                            BinKind::Sub => (1.0, -1.0),
                            BinKind::Mul => (y, x),
                            BinKind::Div => (1.0 / y, -x / (y * y)),
                            BinKind::Min => {
                                if x <= y {
                                    (1.0, 0.0)
                                } else {
                                    (0.0, 1.0)
                                }
                            }
                            BinKind::Max => {
                                if x >= y {
                                    (1.0, 0.0)
                                } else {
                                    (0.0, 1.0)
                                }
                            }
                        };
                        if want_a {
                            ga[k] += g[k] * da;
                        }
                        if want_b {
                            gb[bi] += g[k] * db;
                        }
                    }
                }
                if want_a {
                    accumulate(grads, *a, &ga);
                }
                if want_b {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = (0..g.len())
                    .map(|k| {
                        let d = match kind {
                            UnKind::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Sigmoid => out[k] * (1.0 - out[k]),
                            UnKind::Exp => out[k],
                            UnKind::Log => 1.0 / x[k],
                            UnKind::Sqrt => 0.5 / out[k],
                            UnKind::Abs => {
                                if x[k] > 0.0 {
                                    1.0
                                } else if x[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        g[k] * d
                    })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Scale { a, c } => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddScalar { a } | Op::Reshape { a } => accumulate(grads, *a, g),
            Op::MatMul { a, b, trans_b } => {
                let (n, k) = self.value(*a).dims2().expect("rank 2");
                let m = node.value.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let mut ga = vec![0.0; n * k];
                    if *trans_b {
                        // C = A Bᵀ, B is m×k: dA = G B
                        gemm_nn(g, bv, &mut ga, n, m, k);
                    } else {
                        // dA = G Bᵀ, B is k×m
                        gemm_nt(g, bv, &mut ga, n, m, k);
                    }
                    accumulate(grads, *a, &ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * m];
                    if *trans_b {
                        // dB = Gᵀ A, shape m×k
                        gemm_tn(g, av, &mut gb, n, m, k);
                    } else {
                        // dB = Aᵀ G, shape k×m
                        gemm_tn(av, g, &mut gb, n, k, m);
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose { a } => {
                let (n, m) = self.value(*a).dims2().expect("rank 2");
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        ga[i * m + j] = g[j * n + i];
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Concat { parts, axis } => {
                let (_, m) = node.value.dims2().expect("rank 2");
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            accumulate(grads, p, &g[off..off + len]);
                        }
                        off += len;
                    }
                } else {
                    let n = node.value.rows();
                    let mut col = 0;
                    for &p in parts {
                        let pm = self.value(p).cols();
                        if self.needs(p) {
                            let mut gp = Vec::with_capacity(n * pm);
                            for i in 0..n {
                                gp.extend_from_slice(&g[i * m + col..i * m + col + pm]);
                            }
                            accumulate(grads, p, &gp);
                        }
                        col += pm;
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                let (n, m) = self.value(*a).dims2().expect("rank 2");
                let mut ga = vec![0.0; n * m];
                if *axis == 0 {
                    ga[start * m..start * m + g.len()].copy_from_slice(g);
                } else {
                    let len = node.value.cols();
                    for i in 0..n {
                        ga[i * m + start..i * m + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Sum { a } => {
                let ga = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &ga);
            }
            Op::SumAxis { a, axis } => {
                let (n, m) = self.value(*a).dims2().expect("rank 2");
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        ga[i * m + j] = if *axis == 0 { g[j] } else { g[i] };
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNorm { a, inv_std } => {
                let (n, m) = node.value.dims2().expect("rank 2");
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    let y = &out[i * m..(i + 1) * m];
                    let gy = &g[i * m..(i + 1) * m];
                    let mg = gy.iter().sum::<f64>() / m as f64;
                    let mgy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        ga[i * m + j] = inv_std[i] * (gy[j] - mg - y[j] * mgy);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Softmax { a, axis } => {
                let (n, m) = node.value.dims2().expect("rank 2");
                let mut ga = vec![0.0; n * m];
                let (outer, inner, so, si) = if *axis == 1 { (n, m, m, 1) } else { (m, n, 1, m) };
                for o in 0..outer {
                    let mut dot = 0.0;
                    for k in 0..inner {
                        let p = o * so + k * si;
                        dot += g[p] * out[p];
                    }
                    for k in 0..inner {
                        let p = o * so + k * si;
                        ga[p] = out[p] * (g[p] - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Gather { table, ids } => {
                let (n, m) = self.value(*table).dims2().expect("rank 2");
                let mut gt = vec![0.0; n * m];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..m {
                        gt[i * m + j] += g[r * m + j];
                    }
                }
                accumulate(grads, *table, &gt);
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let x = self.value(*logits).data();
                let ga: Vec<f64> = (0..g.len())
                    .map(|k| g[k] * focal_grad(x[k], targets[k], *alpha, *gamma))
                    .collect();
                accumulate(grads, *logits, &ga);
            }
        }
    }
}

/// Apply `f` elementwise with `b` broadcast as described by `bcast`.
#[inline(always)]
fn binary_values(av: &[f64], bv: &[f64], bcast: Bcast, m: usize, f: impl Fn(f64, f64) -> f64 + Copy) -> Vec<f64> {
    match bcast {
        Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
        Bcast::Row => av
            .chunks(m.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect(),
        Bcast::Col => av
            .chunks(m.max(1))
            .zip(bv)
            .flat_map(|(row, &y)| row.iter().map(move |&x| f(x, y)))
            .collect(),
    }
}

fn bidx(bcast: Bcast, i: usize, j: usize, m: usize) -> usize {
    match bcast {
        Bcast::Same => i * m + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Positive and negative parts of the focal loss for one logit.
fn focal_parts(x: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let pos = -alpha * (1.0 - p).powf(gamma) * log_p;
    let neg = -alpha * p.powf(gamma) * log_q;
    (pos, neg)
}

pub(crate) fn focal_value(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (pos, neg) = focal_parts(x, alpha, gamma);
    y * pos + (1.0 - y) * neg
}

fn focal_grad(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let q = 1.0 - p;
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let d_pos = alpha * (gamma * q.powf(gamma) * p * log_p - q.powf(gamma + 1.0));
    let d_neg = alpha * (-gamma * p.powf(gamma) * q * log_q + p.powf(gamma + 1.0));
    y * d_pos + (1.0 - y) * d_neg
}

/// Matching cost of assigning a positive to a logit: positive focal term
/// minus the negative one.
pub fn focal_match_cost(x: f64, alpha: f64, gamma: f64) -> f64 {
    let (pos, neg) = focal_parts(x, alpha, gamma);
    pos - neg
}
