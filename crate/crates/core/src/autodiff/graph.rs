//! The recording tape and its differentiable operations.

use super::conv::{ConvGeometry, Padding};
use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    RowDot(Var, Var),
    Grl(Var, T),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    BroadcastChannels(Var),
    Reshape(Var),
    BceWithLogits { logits: Var, targets: Vec<T>, clamp: T },
    NormalizeRows(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape for reverse-mode differentiation.
///
/// Nodes are recorded in evaluation order, so the append order is already a
/// topological order and [`Graph::backward`] walks it in reverse. Gradients
/// are retained for leaves only; intermediate gradients are freed once
/// propagated.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>, AutodiffError> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Gradients are kept for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so that [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ----- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), (k, 1), bv.data(), (n, 1), T::zero(), &mut out, (n, 1));
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// NCHW convolution with an `[out, in, kh, kw]` kernel and optional
    /// per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, AutodiffError> {
        let (xv, wv) = (&self.node(input)?.value, &self.node(weight)?.value);
        let geometry = ConvGeometry::new(xv.shape(), wv.shape(), stride, padding)?;
        let bias_data = match bias {
            Some(b) => {
                let bv = &self.node(b)?.value;
                if bv.shape() != [geometry.out_channels] {
                    return Err(mismatch("conv2d bias", bv.shape(), &[geometry.out_channels]));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = geometry.forward(xv.data(), wv.data(), bias_data);
        let value = Tensor::new(geometry.out_shape(), out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.node(x)?.value.map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// `max(0, x)` elementwise; the hinge used by the ranking loss.
    pub fn max_with_zero(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.relu(x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.node(x)?.value.map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.node(x)?.value.map(|v| v.ln());
        self.push("log", value, Op::Log(x), &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, AutodiffError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, AutodiffError> {
        let value = self.node(x)?.value.map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var, AutodiffError> {
        let value = self.node(x)?.value.map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// Adds a `[F]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(bias)?.value);
        let f = bv.len();
        if bv.rank() != 1 || xv.shape().last() != Some(&f) {
            return Err(mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(f) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v = *v + b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let total = self.node(x)?.value.data().iter().fold(T::zero(), |a, &v| a + v);
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = &self.node(x)?.value;
        if xv.is_empty() {
            return Err(AutodiffError::InvalidParameter {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let n = T::from_usize(xv.len()).expect("length fits");
        let total = xv.data().iter().fold(T::zero(), |a, &v| a + v);
        self.push("mean", Tensor::scalar(total / n), Op::Mean(x), &[x])
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<(Vec<usize>, usize), AutodiffError> {
        let shape = self.node(x)?.value.shape();
        match shape.split_last() {
            Some((&d, lead)) if d > 0 => Ok((lead.to_vec(), d)),
            _ => Err(mismatch(op, shape, &[])),
        }
    }

    /// Euclidean norm over the last axis: `[.., D] -> [..]`.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (lead, d) = self.last_axis("l2_norm", x)?;
        let data = self.node(x)?
            .value
            .data()
            .chunks_exact(d)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect();
        let value = Tensor::new(lead, data)?;
        self.push("l2_norm", value, Op::L2Norm(x), &[x])
    }

    /// Inner product over the last axis: `[.., D] x [.., D] -> [..]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(mismatch("row_dot", av.shape(), bv.shape()));
        }
        let (lead, d) = self.last_axis("row_dot", a)?;
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let data = av
            .data()
            .chunks_exact(d)
            .zip(bv.data().chunks_exact(d))
            .map(|(r, s)| r.iter().zip(s).fold(T::zero(), |acc, (&p, &q)| acc + p * q))
            .collect();
        let value = Tensor::new(lead, data)?;
        self.push("row_dot", value, Op::RowDot(a, b), &[a, b])
    }

    /// Gradient reversal: identity forward, `-lambda * upstream` backward.
    pub fn grl(&mut self, x: Var, lambda: T) -> Result<Var, AutodiffError> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(AutodiffError::InvalidParameter {
                op: "grl",
                msg: format!("lambda must be finite and non-negative, got {lambda:?}"),
            });
        }
        let value = self.node(x)?.value.clone();
        self.push("grl", value, Op::Grl(x, lambda), &[x])
    }

    /// 2×2 max pooling with stride 2 over NCHW input with even H and W.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = &self.node(x)?.value;
        let s = xv.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(mismatch("maxpool2", s, &[2, 2]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("maxpool2", value, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = &self.node(x)?.value;
        let s = xv.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(mismatch("global_avg_pool", s, &[]));
        }
        let spatial = s[2] * s[3];
        let denom = T::from_usize(spatial).expect("fits");
        let data = xv
            .data()
            .chunks_exact(spatial)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// Repeats a single-channel `[N, 1, H, W]` map across `channels`.
    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Result<Var, AutodiffError> {
        let xv = &self.node(x)?.value;
        let s = xv.shape();
        if s.len() != 4 || s[1] != 1 || channels == 0 {
            return Err(mismatch("broadcast_channels", s, &[channels]));
        }
        let spatial = s[2] * s[3];
        let mut data = Vec::with_capacity(s[0] * channels * spatial);
        for plane in xv.data().chunks_exact(spatial) {
            for _ in 0..channels {
                data.extend_from_slice(plane);
            }
        }
        let value = Tensor::new(vec![s[0], channels, s[2], s[3]], data)?;
        self.push("broadcast_channels", value, Op::BroadcastChannels(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.node(x)?.value.clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Per-element binary cross-entropy `-[t log σ(z) + (1-t) log(1-σ(z))]`
    /// evaluated from logits clamped to `[-clamp, clamp]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], clamp: T) -> Result<Var, AutodiffError> {
        let zv = &self.node(logits)?.value;
        if zv.len() != targets.len() {
            return Err(mismatch("bce_with_logits", zv.shape(), &[targets.len()]));
        }
        if !(clamp > T::zero()) {
            return Err(AutodiffError::InvalidParameter {
                op: "bce_with_logits",
                msg: "clamp must be positive".into(),
            });
        }
        let data = zv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| {
                let z = z.max(-clamp).min(clamp);
                softplus(z) - t * z
            })
            .collect();
        let value = Tensor::new(zv.shape().to_vec(), data)?;
        self.push(
            "bce_with_logits",
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                clamp,
            },
            &[logits],
        )
    }

    /// Scales each row over the last axis to unit length: `x / (|x| + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var, AutodiffError> {
        let (_, d) = self.last_axis("normalize_rows", x)?;
        let xv = &self.node(x)?.value;
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt() + eps;
            data.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("normalize_rows", value, Op::NormalizeRows(x, eps), &[x])
    }

    // ----- backward ----------------------------------------------------

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = &self.node(loss)?.value;
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in self.input_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, AutodiffError> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data);
        let gd = g.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, (n, 1), bv.data(), (1, n), T::zero(), &mut da, (k, 1));
                    out.push((*a, like(*a, da)?));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av.data(), (1, k), gd, (n, 1), T::zero(), &mut db, (n, 1));
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let (dx, dw, db) = geometry.backward(
                    val(*input).data(),
                    val(*weight).data(),
                    gd,
                    needs(*input),
                    needs(*weight),
                );
                if let Some(dx) = dx {
                    out.push((*input, like(*input, dx)?));
                }
                if let Some(dw) = dw {
                    out.push((*weight, like(*weight, dw)?));
                }
                if let Some(b) = bias {
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Log(x) => {
                let d = val(*x).data().iter().zip(gd).map(|(&v, &g)| g / v).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    out.push((*a, like(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect())?));
                }
                if needs(*b) {
                    out.push((*b, like(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect())?));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    out.push((*a, like(*a, gd.iter().zip(bv).map(|(&g, &y)| g / y).collect())?));
                }
                if needs(*b) {
                    let d = gd
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    out.push((*b, like(*b, d)?));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.map(|v| v * *f))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                if needs(*b) {
                    let f = val(*b).len();
                    let mut db = vec![T::zero(); f];
                    for row in gd.chunks_exact(f) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                out.push((*x, Tensor::full(val(*x).shape(), s)));
            }
            Op::Mean(x) => {
                let n = T::from_usize(val(*x).len()).expect("fits");
                out.push((*x, Tensor::full(val(*x).shape(), gd[0] / n)));
            }
            Op::L2Norm(x) => {
                let xv = val(*x);
                let d = *xv.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(xv.len());
                for ((row, &norm), &g) in xv.data().chunks_exact(d).zip(node.value.data()).zip(gd) {
                    if norm > T::zero() {
                        dx.extend(row.iter().map(|&v| g * v / norm));
                    } else {
                        // subgradient at the origin
                        dx.extend(std::iter::repeat_n(T::zero(), d));
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let d = *av.shape().last().expect("rank >= 1");
                let scaled = |other: &Tensor<T>| -> Vec<T> {
                    other
                        .data()
                        .chunks_exact(d)
                        .zip(gd)
                        .flat_map(|(row, &g)| row.iter().map(move |&v| g * v))
                        .collect()
                };
                if needs(*a) {
                    out.push((*a, like(*a, scaled(bv))?));
                }
                if needs(*b) {
                    out.push((*b, like(*b, scaled(av))?));
                }
            }
            Op::Grl(x, lambda) => {
                let neg = -*lambda;
                out.push((*x, g.map(|v| v * neg)));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&idx, &g) in argmax.iter().zip(gd) {
                    dx[idx] = dx[idx] + g;
                }
                out.push((*input, like(*input, dx)?));
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let spatial = s[2] * s[3];
                let denom = T::from_usize(spatial).expect("fits");
                let dx = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / denom, spatial))
                    .collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::BroadcastChannels(x) => {
                let s = node.value.shape();
                let spatial = s[2] * s[3];
                let channels = s[1];
                let mut dx = Vec::with_capacity(s[0] * spatial);
                for sample in gd.chunks_exact(channels * spatial) {
                    let mut acc = vec![T::zero(); spatial];
                    for plane in sample.chunks_exact(spatial) {
                        for (a, &v) in acc.iter_mut().zip(plane) {
                            *a = *a + v;
                        }
                    }
                    dx.extend(acc);
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Reshape(x) => out.push((*x, like(*x, gd.to_vec())?)),
            Op::BceWithLogits {
                logits,
                targets,
                clamp,
            } => {
                let d = val(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(gd)
                    .map(|((&z, &t), &g)| {
                        if z.abs() < *clamp {
                            g * (sigmoid(z) - t)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*logits, like(*logits, d)?));
            }
            Op::NormalizeRows(x, eps) => {
                let xv = val(*x);
                let d = *xv.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(xv.len());
                for (row, grow) in xv.data().chunks_exact(d).zip(gd.chunks_exact(d)) {
                    let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                    let n = norm + *eps;
                    if norm > T::zero() {
                        let gx = row.iter().zip(grow).fold(T::zero(), |a, (&v, &g)| a + v * g);
                        let k = gx / (n * n * norm);
                        dx.extend(row.iter().zip(grow).map(|(&v, &g)| g / n - v * k));
                    } else {
                        dx.extend(grow.iter().map(|&g| g / n));
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
        }
        Ok(out)
    }
}
