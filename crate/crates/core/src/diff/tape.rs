//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward pass. Node indices are the topological order, so
//! the backward pass is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::par;

use super::params::ParameterStore;
use super::tensor::{broadcast_map, broadcast_shape, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Var, padding: usize },
    AvgPool2(Var),
    ChannelPool { input: Var, argmax: Vec<usize> },
    Sigmoid(Var),
    Relu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    Sum(Var),
    Reshape(Var),
    Narrow { input: Var, axis: usize, start: usize },
    Permute { input: Var, map: Vec<usize> },
    GatherRows { input: Var, indices: Vec<Vec<usize>> },
    Softmax { input: Var, mask: Option<Vec<bool>> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients from one backward pass, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A free variable whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Records the current value of a named parameter.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .clone();
        Ok(self.push_leaf(value, true, Some(name.to_string())))
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    /// Broadcasting add; shapes must have equal rank.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape()))
        })?;
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(shape, data);
        }
        let ma = broadcast_map(&shape, ta.shape());
        let mb = broadcast_map(&shape, tb.shape());
        let data = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| sigmoid(x)).collect())?;
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.push("relu", out, Op::Relu(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    /// (M,K) x (K,N) -> (M,N)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// (B,M,K) x (B,K,N) -> (B,M,N)
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[bs, m, k], &[bs2, k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(shape_err("bmm", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        };
        if bs != bs2 || k != k2 {
            return Err(shape_err("bmm", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; bs * m * n];
        for ((o, x), y) in out
            .chunks_mut(m * n)
            .zip(ta.data().chunks(m * k))
            .zip(tb.data().chunks(k * n))
        {
            gemm(x, y, o, m, k, n);
        }
        let out = Tensor::new(vec![bs, m, n], out)?;
        self.push("bmm", out, Op::BatchMatMul(a, b), &[a, b])
    }

    // ---- convolution and pooling ------------------------------------------

    /// Zero-padded stride-1 cross-correlation. Kernel (Cout,Cin,k,k) with odd
    /// `k` and `padding == (k-1)/2`, so the spatial size is preserved.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(kernel), self.value(bias));
        let &[bs, cin, h, wd] = x.shape() else {
            return Err(shape_err("conv2d", format!("input {:?}", x.shape())));
        };
        let &[cout, cin2, kh, kw] = w.shape() else {
            return Err(shape_err("conv2d", format!("kernel {:?}", w.shape())));
        };
        if cin != cin2 || kh != kw || kh % 2 == 0 || padding * 2 + 1 != kh || b.shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} kernel {:?} bias {:?} padding {padding}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let geo = ConvGeom { cin, cout, h, w: wd, k: kh, p: padding };
        let mut out = vec![0.0; bs * cout * h * wd];
        let (xd, wdat, bd) = (x.data(), w.data(), b.data());
        par::for_each_chunk_mut(&mut out, cout * h * wd, |i, o| {
            conv_forward(&geo, &xd[i * cin * h * wd..(i + 1) * cin * h * wd], wdat, bd, o)
        });
        let out = Tensor::new(vec![bs, cout, h, wd], out)?;
        self.push("conv2d", out, Op::Conv2d { input, kernel, bias, padding }, &[input, kernel, bias])
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[bs, c, h, w] = x.shape() else {
            return Err(shape_err("avg_pool2", format!("{:?}", x.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = vec![0.0; bs * c * ho * wo];
        for (plane, o) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let r0 = 2 * y * w + 2 * xx;
                    o[y * wo + xx] = 0.25 * (src[r0] + src[r0 + 1] + src[r0 + w] + src[r0 + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![bs, c, ho, wo], out)?;
        self.push("avg_pool2", out, Op::AvgPool2(input), &[input])
    }

    /// (B,C,H,W) -> (B,2,H,W): channel 0 is the mean over C, channel 1 the max.
    /// The max gradient goes to the first maximal channel.
    pub fn channel_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[bs, c, h, w] = x.shape() else {
            return Err(shape_err("channel_pool", format!("{:?}", x.shape())));
        };
        if c == 0 {
            return Err(shape_err("channel_pool", "zero channels"));
        }
        let hw = h * w;
        let xd = x.data();
        let mut out = vec![0.0; bs * 2 * hw];
        let mut argmax = vec![0usize; bs * hw];
        for b in 0..bs {
            for cell in 0..hw {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut best_c = 0;
                for ch in 0..c {
                    let v = xd[(b * c + ch) * hw + cell];
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = ch;
                    }
                }
                out[b * 2 * hw + cell] = sum / c as f64;
                out[b * 2 * hw + hw + cell] = best;
                argmax[b * hw + cell] = best_c;
            }
        }
        let out = Tensor::new(vec![bs, 2, h, w], out)?;
        self.push("channel_pool", out, Op::ChannelPool { input, argmax }, &[input])
    }

    // ---- shape -------------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(Error::Empty("concat"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !ok {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis("sum_axis", input, axis, 1.0)?;
        self.push("sum_axis", out, Op::SumAxis { input, axis }, &[input])
    }

    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(input)
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis}")))?;
        if len == 0 {
            return Err(Error::Empty("mean_axis"));
        }
        let out = self.reduce_axis("mean_axis", input, axis, 1.0 / len as f64)?;
        self.push("mean_axis", out, Op::MeanAxis { input, axis }, &[input])
    }

    fn reduce_axis(&self, op: &'static str, input: Var, axis: usize, factor: f64) -> Result<Tensor> {
        let x = self.value(input);
        let s = x.shape();
        if axis >= s.len() {
            return Err(shape_err(op, format!("axis {axis} for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= factor);
        let mut shape = s.to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push("sum", out, Op::Sum(input), &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(input), &[input])
    }

    /// Elements `start..start + len` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("narrow", format!("{start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push("narrow", out, Op::Narrow { input, axis, start }, &[input])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let map = permute_map(s, axes);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        self.push("permute", out, Op::Permute { input, map }, &[input])
    }

    /// (B,N,C) -> (B,k,C), copying rows `indices[b]` of batch element `b` in
    /// order. Backward scatter-adds into the source rows.
    pub fn gather_rows(&mut self, input: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let x = self.value(input);
        let &[bs, rows, c] = x.shape() else {
            return Err(shape_err("gather_rows", format!("{:?}", x.shape())));
        };
        if indices.len() != bs {
            return Err(shape_err("gather_rows", format!("{} index lists for batch {bs}", indices.len())));
        }
        let k = indices.first().map_or(0, Vec::len);
        if indices.iter().any(|ix| ix.len() != k) {
            return Err(shape_err("gather_rows", "ragged index lists"));
        }
        let mut out = Vec::with_capacity(bs * k * c);
        for (b, ix) in indices.iter().enumerate() {
            for &r in ix {
                if r >= rows {
                    return Err(Error::IndexOutOfRange { index: r, rows });
                }
                let start = (b * rows + r) * c;
                out.extend_from_slice(&x.data()[start..start + c]);
            }
        }
        let out = Tensor::new(vec![bs, k, c], out)?;
        self.push("gather_rows", out, Op::GatherRows { input, indices: indices.to_vec() }, &[input])
    }

    // ---- normalisation and loss -------------------------------------------

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = softmax_rows(self.value(input), None)?;
        self.push("softmax", out, Op::Softmax { input, mask: None }, &[input])
    }

    /// Softmax over the last axis restricted to `mask == true`; masked
    /// entries are 0, and a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(shape_err("masked_softmax", format!("mask {} for {:?}", mask.len(), x.shape())));
        }
        let out = softmax_rows(x, Some(mask))?;
        self.push("masked_softmax", out, Op::Softmax { input, mask: Some(mask.to_vec()) }, &[input])
    }

    /// Mean softmax cross-entropy of (B,K) logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let &[bs, k] = x.shape() else {
            return Err(shape_err("cross_entropy", format!("{:?}", x.shape())));
        };
        if labels.len() != bs {
            return Err(shape_err("cross_entropy", format!("{} labels for batch {bs}", labels.len())));
        }
        if bs == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        let mut total = 0.0;
        for (row, &y) in x.data().chunks(k).zip(labels) {
            if y >= k {
                return Err(Error::Label { label: y, num_classes: k });
            }
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / bs as f64);
        self.push("cross_entropy", out, Op::CrossEntropy { logits, labels: labels.to_vec() }, &[logits])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. A tape may be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("no forward pass recorded".into()));
        }
        if self.differentiated {
            return Err(Error::Backward("tape already differentiated".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (v, gi) in self.input_grads(i, &g)? {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Backward, then adds every parameter's gradient into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(name), Some(g)) = (&node.param, g) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(grads)
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())?),
                (*b, reduce_to(g, val(*b).shape())?),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ma = broadcast_map(out.shape(), ta.shape());
                let mb = broadcast_map(out.shape(), tb.shape());
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for (o, gv) in g.data().iter().enumerate() {
                    ga[ma[o]] += gv * tb.data()[mb[o]];
                    gb[mb[o]] += gv * ta.data()[ma[o]];
                }
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Scale(a, c) => vec![(*a, like(*a, g.data().iter().map(|x| x * c).collect())?)],
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                gemm_nt(g.data(), tb.data(), &mut ga, m, n, k);
                gemm_tn(ta.data(), g.data(), &mut gb, m, k, n);
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    gemm_nt(gi, &tb.data()[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    gemm_tn(&ta.data()[i * m * k..(i + 1) * m * k], gi, &mut gb[i * k * n..(i + 1) * k * n], m, k, n);
                }
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Conv2d { input, kernel, bias, padding } => {
                let (x, w) = (val(*input), val(*kernel));
                let &[bs, cin, h, wd] = x.shape() else { unreachable!() };
                let (cout, k) = (w.shape()[0], w.shape()[2]);
                let geo = ConvGeom { cin, cout, h, w: wd, k, p: *padding };
                let (xs, os) = (cin * h * wd, cout * h * wd);
                let parts = par::map_range(bs, |b| {
                    conv_backward(&geo, &x.data()[b * xs..(b + 1) * xs], w.data(), &g.data()[b * os..(b + 1) * os])
                });
                let mut gx = Vec::with_capacity(bs * xs);
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; cout];
                for (px, pw, pb) in parts {
                    gx.extend_from_slice(&px);
                    gw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
                    gb.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
                }
                vec![(*input, like(*input, gx)?), (*kernel, like(*kernel, gw)?), (*bias, like(*bias, gb)?)]
            }
            Op::AvgPool2(a) => {
                let s = val(*a).shape();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0; val(*a).len()];
                for (plane, gp) in g.data().chunks(ho * wo).enumerate() {
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ho {
                        for x in 0..wo {
                            let v = 0.25 * gp[y * wo + x];
                            let r0 = 2 * y * w + 2 * x;
                            dst[r0] += v;
                            dst[r0 + 1] += v;
                            dst[r0 + w] += v;
                            dst[r0 + w + 1] += v;
                        }
                    }
                }
                vec![(*a, like(*a, gx)?)]
            }
            Op::ChannelPool { input, argmax } => {
                let s = val(*input).shape();
                let (bs, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut gx = vec![0.0; bs * c * hw];
                let inv = 1.0 / c as f64;
                for b in 0..bs {
                    for cell in 0..hw {
                        let gm = g.data()[b * 2 * hw + cell] * inv;
                        for ch in 0..c {
                            gx[(b * c + ch) * hw + cell] += gm;
                        }
                        let am = argmax[b * hw + cell];
                        gx[(b * c + am) * hw + cell] += g.data()[b * 2 * hw + hw + cell];
                    }
                }
                vec![(*input, like(*input, gx)?)]
            }
            Op::Concat { inputs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs.iter().map(|v| Vec::with_capacity(val(*v).len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (v, p) in inputs.iter().zip(parts.iter_mut()) {
                        let chunk = val(*v).shape()[*axis] * inner;
                        p.extend_from_slice(&g.data()[off..off + chunk]);
                        off += chunk;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(v, p)| Ok((*v, like(*v, p)?)))
                    .collect::<Result<_>>()?
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let s = val(*input).shape();
                let outer: usize = s[..*axis].iter().product();
                let len = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let factor = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / len as f64 } else { 1.0 };
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(src.iter().map(|v| v * factor));
                    }
                }
                vec![(*input, like(*input, gx)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
            Op::Narrow { input, axis, start } => {
                let s = val(*input).shape();
                let len = out.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = vec![0.0; val(*input).len()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, like(*input, gx)?)]
            }
            Op::Permute { input, map } => {
                let mut gx = vec![0.0; val(*input).len()];
                for (o, &src) in map.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                vec![(*input, like(*input, gx)?)]
            }
            Op::GatherRows { input, indices } => {
                let s = val(*input).shape();
                let (rows, c) = (s[1], s[2]);
                let mut gx = vec![0.0; val(*input).len()];
                let k = indices.first().map_or(0, Vec::len);
                for (b, ix) in indices.iter().enumerate() {
                    for (j, &r) in ix.iter().enumerate() {
                        let src = &g.data()[(b * k + j) * c..(b * k + j + 1) * c];
                        let dst = &mut gx[(b * rows + r) * c..(b * rows + r + 1) * c];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
                vec![(*input, like(*input, gx)?)]
            }
            Op::Softmax { input, mask } => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; out.len()];
                for (r, (y, gy)) in out.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        let live = mask.as_ref().map_or(true, |m| m[r * n + j]);
                        if live {
                            gx[r * n + j] = y[j] * (gy[j] - dot);
                        }
                    }
                }
                vec![(*input, like(*input, gx)?)]
            }
            Op::CrossEntropy { logits, labels } => {
                let x = val(*logits);
                let k = x.shape()[1];
                let scale = g.item() / labels.len() as f64;
                let mut gx = Vec::with_capacity(x.len());
                for (row, &y) in x.data().chunks(k).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        gx.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                vec![(*logits, like(*logits, gx)?)]
            }
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let n = *x.shape().last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
    if n == 0 {
        return Err(Error::Empty("softmax"));
    }
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.data().chunks(n).enumerate() {
        let live = |j: usize| mask.map_or(true, |m| m[r * n + j]);
        let m = (0..n).filter(|&j| live(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for j in (0..n).filter(|&j| live(j)) {
            let e = (row[j] - m).exp();
            out[r * n + j] = e;
            z += e;
        }
        out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let map = broadcast_map(g.shape(), shape);
    let mut out = vec![0.0; shape.iter().product()];
    for (o, v) in g.data().iter().enumerate() {
        out[map[o]] += v;
    }
    Tensor::new(shape.to_vec(), out)
}

fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// out(M,N) += a(M,K) b(K,N)
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// out(M,K) += g(M,N) b(K,N)^T
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out(K,N) += a(M,K)^T g(M,N)
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    p: usize,
}

impl ConvGeom {
    /// Output rows `y` for which `y + dy - p` lands inside the input; empty
    /// ranges come back as `(0, 0)`.
    fn valid(&self, d: usize, len: usize) -> (usize, usize) {
        let (lo, hi) = (self.p.saturating_sub(d), (len + self.p).saturating_sub(d).min(len));
        if lo < hi {
            (lo, hi)
        } else {
            (0, 0)
        }
    }

    /// Rows of the unfolded input: one per (input channel, dy, dx).
    fn taps(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Unfolds one batch element into a (taps, h*w) matrix; padding reads as zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (hw, k) = (self.h * self.w, self.k);
        let mut cols = vec![0.0; self.taps() * hw];
        for c in 0..self.cin {
            let iplane = &x[c * hw..(c + 1) * hw];
            for dy in 0..k {
                let (y0, y1) = self.valid(dy, self.h);
                for dx in 0..k {
                    let (x0, x1) = self.valid(dx, self.w);
                    if x0 == x1 {
                        continue;
                    }
                    let row = &mut cols[((c * k + dy) * k + dx) * hw..][..hw];
                    for y in y0..y1 {
                        let src = (y + dy - self.p) * self.w + x0 + dx - self.p;
                        row[y * self.w + x0..y * self.w + x1].copy_from_slice(&iplane[src..src + x1 - x0]);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatters a (taps, h*w) matrix back onto the input.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (hw, k) = (self.h * self.w, self.k);
        let mut x = vec![0.0; self.cin * hw];
        for c in 0..self.cin {
            let iplane = &mut x[c * hw..(c + 1) * hw];
            for dy in 0..k {
                let (y0, y1) = self.valid(dy, self.h);
                for dx in 0..k {
                    let (x0, x1) = self.valid(dx, self.w);
                    if x0 == x1 {
                        continue;
                    }
                    let row = &cols[((c * k + dy) * k + dx) * hw..][..hw];
                    for y in y0..y1 {
                        let dst = (y + dy - self.p) * self.w + x0 + dx - self.p;
                        for (a, b) in iplane[dst..dst + x1 - x0].iter_mut().zip(&row[y * self.w + x0..y * self.w + x1]) {
                            *a += b;
                        }
                    }
                }
            }
        }
        x
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    let (hw, taps) = (g.h * g.w, g.taps());
    let cols = g.im2col(x);
    for o in 0..g.cout {
        let oplane = &mut out[o * hw..(o + 1) * hw];
        oplane.iter_mut().for_each(|v| *v = bias[o]);
        for (r, &wv) in w[o * taps..(o + 1) * taps].iter().enumerate() {
            axpy(oplane, wv, &cols[r * hw..(r + 1) * hw]);
        }
    }
}

/// Returns (d input, d kernel, d bias) for one batch element.
fn conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (hw, taps) = (g.h * g.w, g.taps());
    let cols = g.im2col(x);
    let mut gcols = vec![0.0; taps * hw];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.cout];
    for o in 0..g.cout {
        let gplane = &grad[o * hw..(o + 1) * hw];
        gb[o] = gplane.iter().sum();
        for r in 0..taps {
            let row = &cols[r * hw..(r + 1) * hw];
            gw[o * taps + r] = dot(gplane, row);
            axpy(&mut gcols[r * hw..(r + 1) * hw], w[o * taps + r], gplane);
        }
    }
    (g.col2im(&gcols), gw, gb)
}
