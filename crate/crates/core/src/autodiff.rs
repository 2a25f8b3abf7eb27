//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order on a [`Tape`]; each call
//! returns a [`Var`] handle to the new node. [`Tape::backward`] walks the
//! tape once in reverse from a scalar root and returns the gradient of
//! that root with respect to every node that requires one.
//!
//! Nodes store their forward values, so backward never recomputes. Memory
//! held by live tapes is tracked per thread (see [`tape_memory`]) so the
//! unrolled trainer can prove that checkpointing bounds it.

use std::cell::Cell;
use std::str::FromStr;

use crate::conv::{self, ConvDims};
use crate::error::{Result, SpenError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Mean over the two trailing (spatial) axes.
    SpatialAveragePool,
}

impl FromStr for ReduceKind {
    type Err = SpenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ReduceKind::Sum),
            "mean" => Ok(ReduceKind::Mean),
            "spatial-average-pool" => Ok(ReduceKind::SpatialAveragePool),
            other => Err(SpenError::Config(format!("unknown reduction `{other}`"))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    SubConst(Var),
    DotConst(Var, Tensor),
    Square(Var),
    XLogX(Var),
    Softplus(Var, f64),
    SoftAbs(Var, f64),
    Softmax(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
    },
    Sum(Var),
    Mean(Var),
    SpatialAvgPool(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat(Var, Var),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

thread_local! {
    static LIVE_VALUES: Cell<usize> = const { Cell::new(0) };
    static PEAK_VALUES: Cell<usize> = const { Cell::new(0) };
}

/// Number of `f64` values held by tapes alive on this thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeMemory {
    pub live: usize,
    pub peak: usize,
}

pub fn tape_memory() -> TapeMemory {
    TapeMemory {
        live: LIVE_VALUES.with(Cell::get),
        peak: PEAK_VALUES.with(Cell::get),
    }
}

/// Reset the peak counter to the current live count.
pub fn reset_tape_peak() {
    let live = LIVE_VALUES.with(Cell::get);
    PEAK_VALUES.with(|p| p.set(live));
}

fn track_alloc(n: usize) {
    LIVE_VALUES.with(|l| {
        let v = l.get() + n;
        l.set(v);
        PEAK_VALUES.with(|p| p.set(p.get().max(v)));
    });
}

fn track_free(n: usize) {
    LIVE_VALUES.with(|l| l.set(l.get().saturating_sub(n)));
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    held: usize,
}

impl Drop for Tape {
    fn drop(&mut self) {
        track_free(self.held);
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not
    /// influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    /// Number of `f64` values stored on this tape.
    pub fn held_values(&self) -> usize {
        self.held
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let n = value.len();
        self.held += n;
        track_alloc(n);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is wanted.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).check_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).mul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    /// Multiply every entry of `a` by the single-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(SpenError::dim(
                "mul_scalar",
                format!("scale operand has shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).item();
        let v = self.value(a).scale(sv);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(Op::MulScalar(a, s), v, ng))
    }

    /// `a − c` for a constant tensor `c`.
    pub fn sub_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        self.value(a).check_same_shape(c, "sub_const")?;
        let v = self.value(a).sub(c);
        let ng = self.needs(a);
        Ok(self.push(Op::SubConst(a), v, ng))
    }

    /// Scalar `Σ a ⊙ c` for a constant tensor `c`.
    pub fn dot_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        self.value(a).check_same_shape(c, "dot_const")?;
        let v = Tensor::scalar(self.value(a).dot(c));
        let ng = self.needs(a);
        Ok(self.push(Op::DotConst(a, c.clone()), v, ng))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(Op::Square(a), v, ng)
    }

    /// Elementwise `x ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let v = self.value(a).map(xlogx);
        let ng = self.needs(a);
        self.push(Op::XLogX(a), v, ng)
    }

    /// Elementwise `(1/β) ln(1 + exp(β z))`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Result<Var> {
        check_temperature(beta)?;
        let v = self.value(a).map(|z| softplus(z, beta));
        let ng = self.needs(a);
        Ok(self.push(Op::Softplus(a, beta), v, ng))
    }

    /// Elementwise `0.5 softplus(z) + 0.5 softplus(−z)`.
    pub fn softabs(&mut self, a: Var, beta: f64) -> Result<Var> {
        check_temperature(beta)?;
        let v = self.value(a).map(|z| softabs(z, beta));
        let ng = self.needs(a);
        Ok(self.push(Op::SoftAbs(a, beta), v, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(Op::Softmax(a), v, ng)
    }

    /// `weight · input + bias` for `input` of shape `[n]` or `[batch, n]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || *xs.last().unwrap() != ws[1] {
            return Err(SpenError::dim(
                "linear",
                format!("input {xs:?} does not conform to weight {ws:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let batch = if xs.len() == 2 { xs[0] } else { 1 };
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(SpenError::dim(
                    "linear",
                    format!("bias {:?} does not match weight {ws:?}", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0.0; batch * m];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        // out[batch×m] += x[batch×n] · Wᵀ
        conv::gemm(
            batch,
            n,
            m,
            self.value(input).data(),
            n,
            1,
            self.value(weight).data(),
            1,
            n,
            1.0,
            &mut out,
            m,
            1,
        );
        let shape = if xs.len() == 2 {
            vec![batch, m]
        } else {
            vec![m]
        };
        let ng = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            Tensor::from_parts(shape, out),
            ng,
        ))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SpenError::dim(
                "matmul",
                format!("operands {sa:?} and {sb:?} do not conform"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        conv::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            0.0,
            &mut out,
            n,
            1,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), ng))
    }

    /// Same-size zero-padded cross-correlation of `[c_in, h, w]` with
    /// `[c_out, c_in, k, k]` kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let d = self.conv_dims(input, kernels)?;
        if let Some(b) = bias {
            if self.shape(b) != [d.c_out] {
                return Err(SpenError::dim(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), d.c_out),
                ));
            }
        }
        let out = conv::forward(
            self.value(input).data(),
            self.value(kernels).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let ng = self.needs(input) || self.needs(kernels) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
            },
            Tensor::from_parts(vec![d.c_out, d.h, d.w], out),
            ng,
        ))
    }

    fn conv_dims(&self, input: Var, kernels: Var) -> Result<ConvDims> {
        let (xs, ks) = (self.shape(input), self.shape(kernels));
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(SpenError::dim(
                "conv2d",
                format!("kernels must be [c_out, c_in, k, k], got {ks:?}"),
            ));
        }
        if ks[2] % 2 == 0 {
            return Err(SpenError::Config(format!(
                "conv2d kernel size must be odd, got {}",
                ks[2]
            )));
        }
        if xs.len() != 3 || xs[0] != ks[1] {
            return Err(SpenError::dim(
                "conv2d",
                format!("input {xs:?} does not match kernel channels {ks:?}"),
            ));
        }
        Ok(ConvDims {
            c_in: xs[0],
            c_out: ks[0],
            h: xs[1],
            w: xs[2],
            k: ks[2],
        })
    }

    pub fn reduce(&mut self, a: Var, kind: ReduceKind) -> Result<Var> {
        match kind {
            ReduceKind::Sum => Ok(self.sum(a)),
            ReduceKind::Mean => Ok(self.mean(a)),
            ReduceKind::SpatialAveragePool => self.spatial_avg_pool(a),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), v, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(Op::Mean(a), v, ng)
    }

    /// Mean over the last two axes; `[.., h, w] → [..]` (or `[1]`).
    pub fn spatial_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(SpenError::dim(
                "spatial_avg_pool",
                format!("needs two trailing spatial axes, got {s:?}"),
            ));
        }
        let hw = s[s.len() - 2] * s[s.len() - 1];
        let lead: Vec<usize> = s[..s.len() - 2].to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let shape = if lead.is_empty() { vec![1] } else { lead };
        let ng = self.needs(a);
        Ok(self.push(Op::SpatialAvgPool(a), Tensor::from_parts(shape, out), ng))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(SpenError::dim(
                "sum_axis",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let (pre, ax, post) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            for i in 0..ax {
                let base = (p * ax + i) * post;
                for q in 0..post {
                    out[p * post + q] += src[base + q];
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(a);
        Ok(self.push(
            Op::SumAxis { input: a, axis },
            Tensor::from_parts(shape, out),
            ng,
        ))
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(SpenError::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (pre, ax, post) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let base = (p * ax + start) * post;
            out.extend_from_slice(&src[base..base + len * post]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let ng = self.needs(a);
        Ok(self.push(
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            Tensor::from_parts(shape, out),
            ng,
        ))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(SpenError::dim(
                "concat",
                format!("leading axes of {sa:?} and {sb:?} differ"),
            ));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for (ra, rb) in va.chunks(da).zip(vb.chunks(db)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat(a, b), Tensor::from_parts(shape, out), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), v, ng))
    }

    /// Reverse sweep from a scalar `root`. Gradients are returned for leaf
    /// nodes that require them; interior gradients are released as soon as
    /// they have been propagated.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(SpenError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::from_parts(rv.shape().to_vec(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a)));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::MulScalar(a, s) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.scale(self.value(*s).item()));
                }
                if self.needs(*s) {
                    let ds = g.dot(self.value(*a));
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::SubConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::DotConst(a, c) => self.accumulate(grads, *a, c.scale(g.item())),
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x);
                self.accumulate(grads, *a, d);
            }
            Op::XLogX(a) => {
                let d = g.zip_map(self.value(*a), |gi, x| gi * (x.max(1e-300).ln() + 1.0));
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a, beta) => {
                let d = g.zip_map(self.value(*a), |gi, z| gi * sigmoid(beta * z));
                self.accumulate(grads, *a, d);
            }
            Op::SoftAbs(a, beta) => {
                let d = g.zip_map(self.value(*a), |gi, z| gi * softabs_grad(z, *beta));
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let d = softmax_vjp(&node.value, g);
                self.accumulate(grads, *a, d);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => self.linear_backward(*input, *weight, *bias, g, grads),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    conv::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n,
                        1,
                        self.value(*b).data(),
                        1,
                        n,
                        0.0,
                        &mut da,
                        k,
                        1,
                    );
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    conv::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        1,
                        k,
                        g.data(),
                        n,
                        1,
                        0.0,
                        &mut db,
                        n,
                        1,
                    );
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
            } => {
                let d = self.conv_dims(*input, *kernels)?;
                let (di, dk) = conv::backward(
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    g.data(),
                    &d,
                    self.needs(*input),
                    self.needs(*kernels),
                );
                if let Some(di) = di {
                    let shape = self.shape(*input).to_vec();
                    self.accumulate(grads, *input, Tensor::from_parts(shape, di));
                }
                if let Some(dk) = dk {
                    let shape = self.shape(*kernels).to_vec();
                    self.accumulate(grads, *kernels, Tensor::from_parts(shape, dk));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let hw = d.h * d.w;
                        let db = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                        self.accumulate(grads, *b, Tensor::from_parts(vec![d.c_out], db));
                    }
                }
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.shape(), g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let c = g.item() / x.len() as f64;
                self.accumulate(grads, *a, Tensor::full(x.shape(), c));
            }
            Op::SpatialAvgPool(a) => {
                let x = self.value(*a);
                let s = x.shape();
                let hw = s[s.len() - 2] * s[s.len() - 1];
                let mut d = Vec::with_capacity(x.len());
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi / hw as f64, hw));
                }
                self.accumulate(grads, *a, Tensor::from_parts(s.to_vec(), d));
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input).to_vec();
                let (pre, ax, post) = split_axis(&s, *axis);
                let mut d = vec![0.0; pre * ax * post];
                for p in 0..pre {
                    for i in 0..ax {
                        let base = (p * ax + i) * post;
                        d[base..base + post].copy_from_slice(&g.data()[p * post..(p + 1) * post]);
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(s, d));
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let (pre, ax, post) = split_axis(&s, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; pre * ax * post];
                for p in 0..pre {
                    let base = (p * ax + start) * post;
                    let src = &g.data()[p * len * post..(p + 1) * len * post];
                    d[base..base + len * post].copy_from_slice(src);
                }
                self.accumulate(grads, *input, Tensor::from_parts(s, d));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.data().chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa, ga));
                self.accumulate(grads, *b, Tensor::from_parts(sb, gb));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
        }
        Ok(())
    }

    fn linear_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let ws = self.shape(weight);
        let (m, n) = (ws[0], ws[1]);
        let batch = g.len() / m;
        if self.needs(input) {
            // dX = dOut · W
            let mut dx = vec![0.0; batch * n];
            conv::gemm(
                batch,
                m,
                n,
                g.data(),
                m,
                1,
                self.value(weight).data(),
                n,
                1,
                0.0,
                &mut dx,
                n,
                1,
            );
            let shape = self.shape(input).to_vec();
            self.accumulate(grads, input, Tensor::from_parts(shape, dx));
        }
        if self.needs(weight) {
            // dW = dOutᵀ · X
            let mut dw = vec![0.0; m * n];
            conv::gemm(
                m,
                batch,
                n,
                g.data(),
                1,
                m,
                self.value(input).data(),
                n,
                1,
                0.0,
                &mut dw,
                n,
                1,
            );
            self.accumulate(grads, weight, Tensor::from_parts(vec![m, n], dw));
        }
        if let Some(b) = bias {
            if self.needs(b) {
                let mut db = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                self.accumulate(grads, b, Tensor::from_parts(vec![m], db));
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

fn check_temperature(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(SpenError::Config(format!(
            "softplus temperature must be positive, got {beta}"
        )));
    }
    Ok(())
}

/// Above this value of `β z` softplus switches to its linear asymptote.
const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

pub fn softplus(z: f64, beta: f64) -> f64 {
    let a = beta * z;
    if a > SOFTPLUS_LINEAR_THRESHOLD {
        z + (-a).exp() / beta
    } else {
        a.exp().ln_1p() / beta
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub fn softabs(z: f64, beta: f64) -> f64 {
    0.5 * softplus(z, beta) + 0.5 * softplus(-z, beta)
}

fn softabs_grad(z: f64, beta: f64) -> f64 {
    0.5 * (sigmoid(beta * z) - sigmoid(-beta * z))
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Vector–Jacobian product of softmax given its output `y`:
/// `y ⊙ (g − ⟨g, y⟩)` per row.
pub fn softmax_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let d = y.last_dim();
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - inner)));
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&Tensor) -> f64, y: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = y.clone();
    let mut out = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Dense Hessian of `f` at `y` by double central differences, as an
/// `[n, n]` tensor with `n = y.len()`.
pub fn fd_hessian(mut f: impl FnMut(&Tensor) -> f64, y: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite-difference step must be positive");
    let n = y.len();
    let mut probe = y.clone();
    let mut h = vec![0.0; n * n];
    let mut at = |probe: &mut Tensor, i: usize, si: f64, j: usize, sj: f64| {
        let (oi, oj) = (probe.data()[i], probe.data()[j]);
        probe.data_mut()[i] += si;
        probe.data_mut()[j] += sj;
        let v = f(probe);
        probe.data_mut()[i] = oi;
        probe.data_mut()[j] = oj;
        v
    };
    for i in 0..n {
        for j in i..n {
            let v = (at(&mut probe, i, step, j, step)
                - at(&mut probe, i, step, j, -step)
                - at(&mut probe, i, -step, j, step)
                + at(&mut probe, i, -step, j, -step))
                / (4.0 * step * step);
            h[i * n + j] = v;
            h[j * n + i] = v;
        }
    }
    Tensor::from_parts(vec![n, n], h)
}

/// `H v` for a dense `[n, n]` Hessian and a tensor `v` of `n` entries,
/// shaped like `v`.
pub fn hessian_times(h: &Tensor, v: &Tensor) -> Tensor {
    let n = v.len();
    assert_eq!(h.shape(), &[n, n], "hessian_times shape mismatch");
    let out = h
        .rows()
        .map(|row| row.iter().zip(v.data()).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::from_parts(v.shape().to_vec(), out)
}
