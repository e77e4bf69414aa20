//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Tape` records primitive operations in topological order during the
//! forward pass; `backward` replays the adjoint of each op in reverse.
//! Tape tensors are rank 0, 1, or 2; higher-rank host data lives outside
//! the tape as plain `Tensor`s.

use super::tensor::{NumericsError, Result, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    ReduceSum(Var, Option<usize>),
    ReduceMean(Var, Option<usize>),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    CausalConv1d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reverse(Var, usize),
    AddBias(Var, Var),
    RowMul(Var, Var),
    SelectiveScan {
        input: Var,
        delta: Var,
        a_diag: Var,
        b_seq: Var,
        c_seq: Var,
        d_skip: Var,
        states: Vec<f64>,
    },
    Huber {
        pred: Var,
        target: Var,
        delta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass, replayable for adjoints.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-10;

/// C += A(m x k) * B(k x n), row-major, optional transposes expressed by strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
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

    /// Gradient of the last `backward` loss w.r.t. `v`, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.value(v).shape.clone(), g.to_vec()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (an input or constant).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn unary_map(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(input);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| f(x)).collect());
        let rq = self.req(input);
        self.push(out, op, rq)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape.clone(), data);
        let rq = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add(a, b), rq))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape.clone(), data);
        let rq = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Sub(a, b), rq))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape.clone(), data);
        let rq = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Mul(a, b), rq))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            &self.value(a).data,
            k as isize,
            1,
            &self.value(b).data,
            n as isize,
            1,
            &mut data,
        );
        let out = Tensor::new(vec![m, n], data);
        let rq = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Matmul(a, b), rq))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.value(a).shape;
        if s.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "transpose",
                shape: s.clone(),
                reason: "rank-2 only".into(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.value(a).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data);
        let rq = self.req(a);
        Ok(self.push(out, Op::Transpose(a), rq))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = self.value(parts[0]).shape.clone();
        if first.is_empty() || axis >= first.len() {
            return Err(NumericsError::BadShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} invalid"),
            });
        }
        let mut cat_extent = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            cat_extent += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = cat_extent;
        let mut data = Vec::with_capacity(shape.iter().product());
        if first.len() == 1 || axis == 0 {
            for &p in parts {
                data.extend_from_slice(&self.value(p).data);
            }
        } else {
            // axis == 1 on rank-2: interleave rows
            let rows = first[0];
            for r in 0..rows {
                for &p in parts {
                    let t = self.value(p);
                    let c = t.shape[1];
                    data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
                }
            }
        }
        let out = Tensor::new(shape, data);
        let rq = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            out,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            rq,
        ))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.value(input).shape.clone();
        if axis >= s.len() || start + len > s[axis] {
            return Err(NumericsError::BadShape {
                op: "slice",
                shape: s,
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let src = &self.value(input).data;
        let mut shape = s.clone();
        shape[axis] = len;
        let data = if s.len() == 1 || axis == 0 {
            let row: usize = s[1..].iter().product::<usize>().max(1);
            src[start * row..(start + len) * row].to_vec()
        } else {
            let (rows, cols) = (s[0], s[1]);
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
            }
            d
        };
        let out = Tensor::new(shape, data);
        let rq = self.req(input);
        Ok(self.push(
            out,
            Op::Slice {
                input,
                axis,
                start,
                len,
            },
            rq,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(NumericsError::BadShape {
                op: "reshape",
                shape: t.shape.clone(),
                reason: format!("cannot view as {shape:?}"),
            });
        }
        let out = Tensor::new(shape.to_vec(), t.data.clone());
        let rq = self.req(input);
        Ok(self.push(out, Op::Reshape(input), rq))
    }

    fn reduce(&mut self, input: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let t = self.value(input);
        let out = match axis {
            None => {
                let s: f64 = t.data.iter().sum();
                Tensor::scalar(if mean { s / t.numel() as f64 } else { s })
            }
            Some(ax) => {
                if t.rank() != 2 || ax > 1 {
                    return Err(NumericsError::BadShape {
                        op: if mean { "reduce_mean" } else { "reduce_sum" },
                        shape: t.shape.clone(),
                        reason: format!("axis {ax} on rank {}", t.rank()),
                    });
                }
                let (m, n) = (t.shape[0], t.shape[1]);
                if ax == 0 {
                    let mut d = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += t.data[r * n + c];
                        }
                    }
                    if mean {
                        d.iter_mut().for_each(|v| *v /= m as f64);
                    }
                    Tensor::from_vec(d)
                } else {
                    let mut d = vec![0.0; m];
                    for r in 0..m {
                        d[r] = t.data[r * n..(r + 1) * n].iter().sum();
                    }
                    if mean {
                        d.iter_mut().for_each(|v| *v /= n as f64);
                    }
                    Tensor::from_vec(d)
                }
            }
        };
        let rq = self.req(input);
        let op = if mean {
            Op::ReduceMean(input, axis)
        } else {
            Op::ReduceSum(input, axis)
        };
        Ok(self.push(out, op, rq))
    }

    pub fn reduce_sum(&mut self, input: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(input, axis, false)
    }

    pub fn reduce_mean(&mut self, input: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(input, axis, true)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary_map(a, softplus, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_extent();
        let rows = t.leading_rows();
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                let e = (row[c] - mx).exp();
                out[r * d + c] = e;
                z += e;
            }
            for c in 0..d {
                out[r * d + c] /= z;
            }
        }
        let shape = t.shape.clone();
        let rq = self.req(a);
        self.push(Tensor::new(shape, out), Op::Softmax(a), rq)
    }

    /// Normalize the last axis to zero mean, unit variance. No affine part;
    /// compose with `row_mul`/`add_bias` for gamma/beta.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_extent();
        let rows = t.leading_rows();
        let mut out = vec![0.0; t.numel()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mu) * inv;
            }
            means[r] = mu;
            inv_stds[r] = inv;
        }
        let shape = t.shape.clone();
        let rq = self.req(a);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                input: a,
                mean: means,
                inv_std: inv_stds,
            },
            rq,
        )
    }

    /// Train-mode inverted dropout with an explicit mask source. Inference
    /// callers simply skip the call.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl rand::Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        let keep = 1.0 - p;
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = t.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape.clone();
        let rq = self.req(a);
        self.push(Tensor::new(shape, data), Op::Dropout { input: a, mask }, rq)
    }

    /// Row lookup into a rank-2 table: out[i] = table[indices[i]].
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(NumericsError::BadShape {
                op: "gather",
                shape: t.shape.clone(),
                reason: "rank-2 table required".into(),
            });
        }
        let (n, d) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    extent: n,
                });
            }
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data);
        let rq = self.req(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rq,
        ))
    }

    /// Depthwise causal 1-d convolution over a (L x C) sequence.
    /// weight is (C x width), bias is (C); left zero padding.
    pub fn causal_conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape.clone(),
            self.value(weight).shape.clone(),
            self.value(bias).shape.clone(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != vec![xs[1]] {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (l, c, w) = (xs[0], xs[1], ws[1]);
        let x = &self.value(input).data;
        let wv = &self.value(weight).data;
        let bv = &self.value(bias).data;
        let mut out = vec![0.0; l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut acc = bv[ch];
                for j in 0..w.min(t + 1) {
                    acc += wv[ch * w + j] * x[(t - j) * c + ch];
                }
                out[t * c + ch] = acc;
            }
        }
        let rq = self.req(input) || self.req(weight) || self.req(bias);
        Ok(self.push(
            Tensor::new(vec![l, c], out),
            Op::CausalConv1d {
                input,
                weight,
                bias,
            },
            rq,
        ))
    }

    pub fn reverse(&mut self, input: Var, axis: usize) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape.clone();
        if axis >= s.len().max(1) || s.len() > 2 {
            return Err(NumericsError::BadShape {
                op: "reverse",
                shape: s,
                reason: format!("axis {axis}"),
            });
        }
        let data = if s.len() <= 1 {
            t.data.iter().rev().cloned().collect()
        } else {
            let (m, n) = (s[0], s[1]);
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    let (rr, cc) = if axis == 0 {
                        (m - 1 - r, c)
                    } else {
                        (r, n - 1 - c)
                    };
                    d[r * n + c] = t.data[rr * n + cc];
                }
            }
            d
        };
        let rq = self.req(input);
        Ok(self.push(Tensor::new(s, data), Op::Reverse(input, axis), rq))
    }

    /// (rows x d) + (d), broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(bias).shape.clone());
        let d = *sa.last().unwrap_or(&1);
        if sb != vec![d] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let rows = self.value(a).leading_rows();
        let av = &self.value(a).data;
        let bv = &self.value(bias).data;
        let mut data = Vec::with_capacity(av.len());
        for r in 0..rows {
            for c in 0..d {
                data.push(av[r * d + c] + bv[c]);
            }
        }
        let rq = self.req(a) || self.req(bias);
        Ok(self.push(Tensor::new(sa, data), Op::AddBias(a, bias), rq))
    }

    /// (rows x d) * (d), broadcast over rows.
    pub fn row_mul(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (sa, sb) = (
            self.value(a).shape.clone(),
            self.value(scale).shape.clone(),
        );
        let d = *sa.last().unwrap_or(&1);
        if sb != vec![d] {
            return Err(NumericsError::ShapeMismatch {
                op: "row_mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let rows = self.value(a).leading_rows();
        let av = &self.value(a).data;
        let sv = &self.value(scale).data;
        let mut data = Vec::with_capacity(av.len());
        for r in 0..rows {
            for c in 0..d {
                data.push(av[r * d + c] * sv[c]);
            }
        }
        let rq = self.req(a) || self.req(scale);
        Ok(self.push(Tensor::new(sa, data), Op::RowMul(a, scale), rq))
    }

    /// Input-dependent (selective) state-space scan, fused.
    ///
    /// input, delta: (L x d_inner); a_diag: (d_inner x d_state);
    /// b_seq, c_seq: (L x d_state); d_skip: (d_inner). Output (L x d_inner):
    ///   abar_t = exp(delta_t[ch] * a[ch,s])
    ///   h_t    = abar_t . h_{t-1} + delta_t[ch] * b_t[s] * u_t[ch]
    ///   y_t    = sum_s c_t[s] * h_t[ch,s] + d_skip[ch] * u_t[ch]
    pub fn selective_scan(
        &mut self,
        input: Var,
        delta: Var,
        a_diag: Var,
        b_seq: Var,
        c_seq: Var,
        d_skip: Var,
    ) -> Result<Var> {
        let xs = self.value(input).shape.clone();
        if xs.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "selective_scan",
                shape: xs,
                reason: "input must be (L, d_inner)".into(),
            });
        }
        let (l, di) = (xs[0], xs[1]);
        let ds = {
            let a = self.value(a_diag);
            if a.rank() != 2 || a.shape[0] != di {
                return Err(NumericsError::ShapeMismatch {
                    op: "selective_scan",
                    lhs: xs,
                    rhs: a.shape.clone(),
                });
            }
            a.shape[1]
        };
        for (v, want) in [
            (delta, vec![l, di]),
            (b_seq, vec![l, ds]),
            (c_seq, vec![l, ds]),
            (d_skip, vec![di]),
        ] {
            if self.value(v).shape != want {
                return Err(NumericsError::ShapeMismatch {
                    op: "selective_scan",
                    lhs: self.value(v).shape.clone(),
                    rhs: want,
                });
            }
        }
        let u = &self.value(input).data;
        let dt = &self.value(delta).data;
        let a = &self.value(a_diag).data;
        let b = &self.value(b_seq).data;
        let c = &self.value(c_seq).data;
        let dsk = &self.value(d_skip).data;

        // states keeps h_0..h_L for the backward pass
        let mut states = vec![0.0; (l + 1) * di * ds];
        let mut out = vec![0.0; l * di];
        for t in 0..l {
            let (prev, cur) = states.split_at_mut((t + 1) * di * ds);
            let hprev = &prev[t * di * ds..];
            let hcur = &mut cur[..di * ds];
            for ch in 0..di {
                let d_t = dt[t * di + ch];
                let u_t = u[t * di + ch];
                let mut acc = 0.0;
                for s in 0..ds {
                    let abar = (d_t * a[ch * ds + s]).exp();
                    let h = abar * hprev[ch * ds + s] + d_t * b[t * ds + s] * u_t;
                    hcur[ch * ds + s] = h;
                    acc += c[t * ds + s] * h;
                }
                out[t * di + ch] = acc + dsk[ch] * u_t;
            }
        }
        let rq = self.req(input)
            || self.req(delta)
            || self.req(a_diag)
            || self.req(b_seq)
            || self.req(c_seq)
            || self.req(d_skip);
        Ok(self.push(
            Tensor::new(vec![l, di], out),
            Op::SelectiveScan {
                input,
                delta,
                a_diag,
                b_seq,
                c_seq,
                d_skip,
                states,
            },
            rq,
        ))
    }

    /// Mean Huber loss between pred and target (scalar output).
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        assert!(delta > 0.0, "huber delta must be positive");
        self.check_same_shape("huber", pred, target)?;
        let p = &self.value(pred).data;
        let t = &self.value(target).data;
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(t)
            .map(|(a, b)| {
                let e = (a - b).abs();
                if e <= delta {
                    0.5 * e * e
                } else {
                    delta * (e - 0.5 * delta)
                }
            })
            .sum::<f64>()
            / n;
        let rq = self.req(pred) || self.req(target);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Huber {
                pred,
                target,
                delta,
            },
            rq,
        ))
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; contribution.len()]);
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }

    /// Populate gradients of `loss` w.r.t. every requires_grad node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss(self.value(loss).shape.clone()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = self.grads[idx].take().unwrap();
            self.backward_step(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backward_step(&mut self, idx: usize, g: &[f64]) {
        // the op is moved out and restored so inputs can be borrowed freely
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.value(*b).data)
                    .map(|(x, y)| x * y)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(x, y)| x * y)
                    .collect();
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.accumulate(*a, &ga);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                if self.req(*a) {
                    // gA = gY . B^T
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(
                        m,
                        n,
                        k,
                        g,
                        n as isize,
                        1,
                        &self.value(*b).data,
                        1,
                        n as isize,
                        &mut ga,
                    );
                    self.accumulate(*a, &ga);
                }
                if self.req(*b) {
                    // gB = A^T . gY
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(
                        k,
                        m,
                        n,
                        &self.value(*a).data,
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        &mut gb,
                    );
                    self.accumulate(*b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = g[i * m + j];
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Concat { axis, parts } => {
                let out_shape = self.nodes[idx].value.shape.clone();
                if out_shape.len() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.accumulate(p, &g[offset..offset + n]);
                        offset += n;
                    }
                } else {
                    let rows = out_shape[0];
                    let total_c = out_shape[1];
                    let mut col0 = 0;
                    for &p in parts {
                        let c = self.value(p).shape[1];
                        let mut gp = vec![0.0; rows * c];
                        for r in 0..rows {
                            gp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total_c + col0..r * total_c + col0 + c]);
                        }
                        self.accumulate(p, &gp);
                        col0 += c;
                    }
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let s = self.value(*input).shape.clone();
                let mut gi = vec![0.0; self.value(*input).numel()];
                if s.len() == 1 || *axis == 0 {
                    let row: usize = s[1..].iter().product::<usize>().max(1);
                    gi[start * row..(start + len) * row].copy_from_slice(g);
                } else {
                    let (rows, cols) = (s[0], s[1]);
                    for r in 0..rows {
                        gi[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                }
                self.accumulate(*input, &gi);
            }
            Op::Reshape(a) => {
                self.accumulate(*a, g);
            }
            Op::ReduceSum(a, axis) | Op::ReduceMean(a, axis) => {
                let mean = matches!(op, Op::ReduceMean(..));
                let s = self.value(*a).shape.clone();
                let n = self.value(*a).numel();
                let mut ga = vec![0.0; n];
                match axis {
                    None => {
                        let w = if mean { 1.0 / n as f64 } else { 1.0 };
                        ga.iter_mut().for_each(|v| *v = g[0] * w);
                    }
                    Some(0) => {
                        let (m, d) = (s[0], s[1]);
                        let w = if mean { 1.0 / m as f64 } else { 1.0 };
                        for r in 0..m {
                            for c in 0..d {
                                ga[r * d + c] = g[c] * w;
                            }
                        }
                    }
                    Some(_) => {
                        let (m, d) = (s[0], s[1]);
                        let w = if mean { 1.0 / d as f64 } else { 1.0 };
                        for r in 0..m {
                            for c in 0..d {
                                ga[r * d + c] = g[r] * w;
                            }
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value.data;
                let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                self.accumulate(*a, &ga);
            }
            Op::Log(a) => {
                let x = &self.value(*a).data;
                let ga: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                self.accumulate(*a, &ga);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value.data;
                let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi / (2.0 * yi)).collect();
                self.accumulate(*a, &ga);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value.data;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::Silu(a) => {
                let x = &self.value(*a).data;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::Softplus(a) => {
                let x = &self.value(*a).data;
                let ga: Vec<f64> = g.iter().zip(x).map(|(gi, &xi)| gi * sigmoid(xi)).collect();
                self.accumulate(*a, &ga);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value.data;
                let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                self.accumulate(*a, &ga);
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let d = y.last_extent();
                let rows = y.leading_rows();
                let mut ga = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..d {
                        ga[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::LayerNorm {
                input,
                mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let d = x.last_extent();
                let rows = x.leading_rows();
                let mut ga = vec![0.0; x.numel()];
                for r in 0..rows {
                    let xr = &x.data[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let inv = inv_std[r];
                    let mu = mean[r];
                    let g_mean = gr.iter().sum::<f64>() / d as f64;
                    let gx_dot = xr
                        .iter()
                        .zip(gr)
                        .map(|(xi, gi)| gi * (xi - mu) * inv)
                        .sum::<f64>()
                        / d as f64;
                    for c in 0..d {
                        let xhat = (xr[c] - mu) * inv;
                        ga[r * d + c] = inv * (gr[c] - g_mean - xhat * gx_dot);
                    }
                }
                self.accumulate(*input, &ga);
            }
            Op::Dropout { input, mask } => {
                let ga: Vec<f64> = g.iter().zip(mask).map(|(gi, mi)| gi * mi).collect();
                self.accumulate(*input, &ga);
            }
            Op::Gather { table, indices } => {
                let (n, d) = (self.value(*table).shape[0], self.value(*table).shape[1]);
                let mut gt = vec![0.0; n * d];
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += g[row * d + c];
                    }
                }
                self.accumulate(*table, &gt);
            }
            Op::CausalConv1d {
                input,
                weight,
                bias,
            } => {
                let (l, c) = (self.value(*input).shape[0], self.value(*input).shape[1]);
                let w = self.value(*weight).shape[1];
                let x = &self.value(*input).data;
                let wv = &self.value(*weight).data;
                let mut gx = vec![0.0; l * c];
                let mut gw = vec![0.0; c * w];
                let mut gb = vec![0.0; c];
                for t in 0..l {
                    for ch in 0..c {
                        let go = g[t * c + ch];
                        gb[ch] += go;
                        for j in 0..w.min(t + 1) {
                            gx[(t - j) * c + ch] += wv[ch * w + j] * go;
                            gw[ch * w + j] += x[(t - j) * c + ch] * go;
                        }
                    }
                }
                self.accumulate(*input, &gx);
                self.accumulate(*weight, &gw);
                self.accumulate(*bias, &gb);
            }
            Op::Reverse(a, axis) => {
                let s = self.value(*a).shape.clone();
                let ga = if s.len() <= 1 {
                    g.iter().rev().cloned().collect::<Vec<f64>>()
                } else {
                    let (m, n) = (s[0], s[1]);
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            let (rr, cc) = if *axis == 0 {
                                (m - 1 - r, c)
                            } else {
                                (r, n - 1 - c)
                            };
                            d[rr * n + cc] = g[r * n + c];
                        }
                    }
                    d
                };
                self.accumulate(*a, &ga);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(*a, g);
                let d = self.value(*bias).numel();
                let rows = self.value(*a).leading_rows();
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for c in 0..d {
                        gb[c] += g[r * d + c];
                    }
                }
                self.accumulate(*bias, &gb);
            }
            Op::RowMul(a, scale) => {
                let d = self.value(*scale).numel();
                let rows = self.value(*a).leading_rows();
                let sv = &self.value(*scale).data;
                let av = &self.value(*a).data;
                let mut ga = vec![0.0; rows * d];
                let mut gs = vec![0.0; d];
                for r in 0..rows {
                    for c in 0..d {
                        ga[r * d + c] = g[r * d + c] * sv[c];
                        gs[c] += g[r * d + c] * av[r * d + c];
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*scale, &gs);
            }
            Op::SelectiveScan {
                input,
                delta,
                a_diag,
                b_seq,
                c_seq,
                d_skip,
                states,
            } => {
                let (l, di) = (self.value(*input).shape[0], self.value(*input).shape[1]);
                let ds = self.value(*a_diag).shape[1];
                let u = &self.value(*input).data;
                let dt = &self.value(*delta).data;
                let a = &self.value(*a_diag).data;
                let b = &self.value(*b_seq).data;
                let c = &self.value(*c_seq).data;
                let dsk = &self.value(*d_skip).data;

                let mut gu = vec![0.0; l * di];
                let mut gdt = vec![0.0; l * di];
                let mut ga = vec![0.0; di * ds];
                let mut gb = vec![0.0; l * ds];
                let mut gc = vec![0.0; l * ds];
                let mut gdsk = vec![0.0; di];
                // gh holds dL/dh_t for the step currently being processed
                let mut gh = vec![0.0; di * ds];
                for t in (0..l).rev() {
                    let h_t = &states[(t + 1) * di * ds..(t + 2) * di * ds];
                    let h_prev = &states[t * di * ds..(t + 1) * di * ds];
                    for ch in 0..di {
                        let go = g[t * di + ch];
                        let d_t = dt[t * di + ch];
                        let u_t = u[t * di + ch];
                        gdsk[ch] += go * u_t;
                        gu[t * di + ch] += go * dsk[ch];
                        let mut gu_scan = 0.0;
                        let mut gdt_acc = 0.0;
                        for s in 0..ds {
                            let hs = h_t[ch * ds + s];
                            gc[t * ds + s] += go * hs;
                            let ghs = gh[ch * ds + s] + go * c[t * ds + s];
                            let a_cs = a[ch * ds + s];
                            let abar = (d_t * a_cs).exp();
                            let hp = h_prev[ch * ds + s];
                            // h = abar*hp + d_t*b*u
                            gdt_acc += ghs * (hp * a_cs * abar + b[t * ds + s] * u_t);
                            ga[ch * ds + s] += ghs * hp * d_t * abar;
                            gb[t * ds + s] += ghs * d_t * u_t;
                            gu_scan += ghs * d_t * b[t * ds + s];
                            // carry into h_{t-1}
                            gh[ch * ds + s] = ghs * abar;
                        }
                        gu[t * di + ch] += gu_scan;
                        gdt[t * di + ch] += gdt_acc;
                    }
                }
                self.accumulate(*input, &gu);
                self.accumulate(*delta, &gdt);
                self.accumulate(*a_diag, &ga);
                self.accumulate(*b_seq, &gb);
                self.accumulate(*c_seq, &gc);
                self.accumulate(*d_skip, &gdsk);
            }
            Op::Huber {
                pred,
                target,
                delta,
            } => {
                let p = &self.value(*pred).data;
                let t = &self.value(*target).data;
                let n = p.len() as f64;
                let gp: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| g[0] * (a - b).clamp(-delta, *delta) / n)
                    .collect();
                if self.req(*target) {
                    let gt: Vec<f64> = gp.iter().map(|x| -x).collect();
                    self.accumulate(*target, &gt);
                }
                self.accumulate(*pred, &gp);
            }
        }
        self.nodes[idx].op = op;
    }

    /// Convenience: linear layer y = x.W + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
