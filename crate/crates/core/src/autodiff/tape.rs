use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    Max(Var),
    Norm2(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Pow { x: Var, exponent: f64 },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LogSumExp(_) => "logsumexp",
            Op::Max(_) => "max",
            Op::Norm2(_) => "norm2",
            Op::Clamp { .. } => "clamp",
            Op::Pow { .. } => "pow",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Every operation appends a node. Nodes whose inputs all lack gradients are
/// stored as plain constants, so the reverse sweep never visits them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient data for `var`, panicking if the node was not differentiated.
    pub fn wrt(&self, var: Var) -> &[f64] {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", var.0))
            .data()
    }
}

fn is_scalar_like(t: &Tensor) -> bool {
    t.numel() == 1 && t.rank() <= 1
}

/// c += op(a) * op(b), with strides expressing optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n views; c is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Adds a leaf that gradients are computed for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Adds a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y));
            Tensor::new(ta.shape().to_vec(), data.collect())?
        } else if is_scalar_like(ta) {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else if is_scalar_like(tb) {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else {
            return Err(AutodiffError::Shape {
                op: op.name(),
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        self.push(out, op, &[a, b])
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    fn reduce(&mut self, op: Op, x: Var, f: impl Fn(&[f64]) -> f64) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(AutodiffError::Shape {
                op: op.name(),
                lhs: t.shape().to_vec(),
                rhs: Vec::new(),
            });
        }
        let out = Tensor::scalar(f(t.data()));
        self.push(out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(b).data().contains(&0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let c = self.scalar(c);
        self.add(a, c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let c = self.scalar(c);
        self.mul(a, c)
    }

    /// `c - a`
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var, AutodiffError> {
        let c = self.scalar(c);
        self.sub(c, a)
    }

    /// Matrix product of `[m, k] x [k, n]` or `[m, k] x [k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || AutodiffError::Shape {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() != 2 || tb.rank() == 0 || tb.rank() > 2 {
            return Err(mismatch());
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        if tb.shape()[0] != k {
            return Err(mismatch());
        }
        let n = if tb.rank() == 2 { tb.shape()[1] } else { 1 };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            &mut out,
        );
        let shape = if tb.rank() == 2 { vec![m, n] } else { vec![m] };
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `[c]` bias vector to every row of an `[r, c]` matrix.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (tm, tb) = (self.value(m), self.value(bias));
        if tm.rank() != 2 || tb.rank() != 1 || tm.shape()[1] != tb.shape()[0] {
            return Err(AutodiffError::Shape {
                op: "add_bias",
                lhs: tm.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let c = tb.numel();
        let mut out = tm.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tm.shape().to_vec(), out)?;
        self.push(out, Op::AddBias(m, bias), &[m, bias])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Op::Neg(x), x, |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Op::Exp(x), x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive operand {bad}"),
            });
        }
        self.unary(Op::Log(x), x, f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Op::Abs(x), x, f64::abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, AutodiffError> {
        self.unary(Op::Clamp { x, lo, hi }, x, |v| v.max(lo).min(hi))
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var, AutodiffError> {
        if exponent.fract() != 0.0 && self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(AutodiffError::Domain {
                op: "pow",
                detail: format!("negative base with fractional exponent {exponent}"),
            });
        }
        self.unary(Op::Pow { x, exponent }, x, |v| v.powf(exponent))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let t = self.value(x).reshaped(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(Op::Sum(x), x, |d| d.iter().sum())
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(Op::Mean(x), x, |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(Op::LogSumExp(x), x, |d| {
            let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
    }

    /// Maximum element; ties resolve to the first index.
    pub fn max(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(Op::Max(x), x, |d| d[argmax(d)])
    }

    /// Euclidean norm with subgradient 0 at the origin.
    pub fn norm2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(Op::Norm2(x), x, |d| {
            d.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let root_value = &self
            .nodes
            .get(root.0)
            .ok_or(AutodiffError::UnknownNode(root.0))?
            .value;
        if root_value.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    op: node.op.name(),
                    node: i,
                });
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if !node.requires_grad {
                    return Ok(None);
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Tensor::new(node.value.shape().to_vec(), data).map(Some)
            })
            .collect::<Result<_, _>>()?;
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contribution: Vec<f64>) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        // Broadcast operands receive the summed gradient.
        let contribution = if node.value.numel() == 1 && contribution.len() != 1 {
            vec![contribution.iter().sum()]
        } else {
            contribution
        };
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), AutodiffError> {
        let val = |v: Var| self.value(v).data();
        // Element i of a possibly-broadcast operand.
        let at = |v: Var, i: usize| {
            let d = val(v);
            if d.len() == 1 {
                d[0]
            } else {
                d[i]
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ga = chain(g, |i| at(b, i));
                let gb = chain(g, |i| at(a, i));
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Div(a, b) => {
                let ga = chain(g, |i| 1.0 / at(b, i));
                let gb = chain(g, |i| -at(a, i) / (at(b, i) * at(b, i)));
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = if tb.rank() == 2 { tb.shape()[1] } else { 1 };
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        tb.data(),
                        (1, n as isize),
                        &mut ga,
                    );
                    self.accumulate(grads, a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        &mut gb,
                    );
                    self.accumulate(grads, b, gb);
                }
            }
            Op::AddBias(m, bias) => {
                let c = self.value(bias).numel();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, m, g.to_vec());
                self.accumulate(grads, bias, gb);
            }
            Op::Neg(x) => self.accumulate(grads, x, g.iter().map(|v| -v).collect()),
            Op::Exp(x) => {
                let out = node.value.data();
                let gx = chain(g, |i| out[i]);
                self.accumulate(grads, x, gx);
            }
            Op::Log(x) => {
                let gx = chain(g, |i| 1.0 / val(x)[i]);
                self.accumulate(grads, x, gx);
            }
            Op::Abs(x) => {
                let gx = chain(g, |i| {
                    let v = val(x)[i];
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, x, gx);
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                let gx = chain(g, |i| out[i] * (1.0 - out[i]));
                self.accumulate(grads, x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = chain(g, |i| {
                    let v = val(x)[i];
                    if v > lo && v < hi {
                        1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, x, gx);
            }
            Op::Pow { x, exponent } => {
                let gx = chain(g, |i| exponent * val(x)[i].powf(exponent - 1.0));
                self.accumulate(grads, x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            Op::Sum(x) => {
                let n = val(x).len();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = val(x).len();
                self.accumulate(grads, x, vec![g[0] / n as f64; n]);
            }
            Op::LogSumExp(x) => {
                let lse = node.value.data()[0];
                let gx = val(x).iter().map(|v| g[0] * (v - lse).exp()).collect();
                self.accumulate(grads, x, gx);
            }
            Op::Max(x) => {
                let d = val(x);
                let mut gx = vec![0.0; d.len()];
                gx[argmax(d)] = g[0];
                self.accumulate(grads, x, gx);
            }
            Op::Norm2(x) => {
                let norm = node.value.data()[0];
                let gx = if norm > 0.0 {
                    val(x).iter().map(|v| g[0] * v / norm).collect()
                } else {
                    vec![0.0; val(x).len()]
                };
                self.accumulate(grads, x, gx);
            }
        }
        Ok(())
    }
}

/// Upstream gradient times the local derivative at each output element.
fn chain(g: &[f64], d: impl Fn(usize) -> f64) -> Vec<f64> {
    g.iter().enumerate().map(|(i, gi)| gi * d(i)).collect()
}

fn argmax(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    best
}
