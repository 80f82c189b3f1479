//! Primitive operations: forward builders on [`Graph`] and the reverse-mode
//! rules that mirror them.

use crate::graph::{accumulate, Graph, NodeId, Op};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::{AdError, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AdError {
    AdError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> AdError {
    AdError::InvalidShape { op, shape: shape.to_vec(), reason: reason.into() }
}

// ---------------------------------------------------------------------------
// Forward builders
// ---------------------------------------------------------------------------

impl Graph {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| {
            shape_err("add", self.shape(a), self.shape(b))
        })?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape; `b` is repeated
    /// over the leading axes (the usual bias-add pattern).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || !sa.ends_with(sb) {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let chunk = self.value(b).numel().max(1);
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[i % chunk];
        }
        Ok(self.push(out, Op::AddBroadcast(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y).map_err(|_| {
            shape_err("sub", self.shape(a), self.shape(b))
        })?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).map_err(|_| {
            shape_err("mul", self.shape(a), self.shape(b))
        })?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * s);
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    /// Matrix product in two forms:
    ///
    /// * `[..., k] x [k, n] -> [..., n]` — the right operand is 2-D and the
    ///   left operand's leading axes are treated as one flat row axis;
    /// * `[d.., m, k] x [d.., k, n] -> [d.., m, n]` — batched, with identical
    ///   leading axes on both sides.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = if sb.len() == 2 {
            if sa.is_empty() || *sa.last().unwrap() != sb[0] {
                return Err(shape_err("matmul", &sa, &sb));
            }
            let k = sb[0];
            let n = sb[1];
            let rows = self.value(a).numel() / k;
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            let mut out = Tensor::zeros(&out_shape);
            gemm_acc(rows, k, n, 1.0, self.value(a).data(), self.value(b).data(), 0.0, out.data_mut());
            out
        } else {
            let nd = sa.len();
            if nd < 3
                || sb.len() != nd
                || sa[..nd - 2] != sb[..nd - 2]
                || sa[nd - 1] != sb[nd - 2]
            {
                return Err(shape_err("matmul", &sa, &sb));
            }
            let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
            let batches: usize = sa[..nd - 2].iter().product();
            let mut out_shape = sa[..nd - 2].to_vec();
            out_shape.push(m);
            out_shape.push(n);
            let mut out = Tensor::zeros(&out_shape);
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batches {
                gemm_acc(
                    m,
                    k,
                    n,
                    1.0,
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    0.0,
                    &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                );
            }
            out
        };
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: NodeId, ax1: usize, ax2: usize) -> Result<NodeId> {
        let sa = self.shape(a);
        if ax1 >= sa.len() || ax2 >= sa.len() {
            return Err(invalid("transpose", sa, format!("axes ({ax1},{ax2}) out of range")));
        }
        let out = transpose_tensor(self.value(a), ax1, ax2);
        Ok(self.push(out, Op::Transpose(a, ax1, ax2)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Concatenate along `axis`; all other axes must match.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", &[], "needs at least one input"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", &base, format!("axis {axis} out of range")));
        }
        let mut cat_dim = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", &base, s));
            }
            cat_dim += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = cat_dim;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        let out_block = cat_dim * inner;
        let mut offset = 0;
        for &id in inputs {
            let dim = self.shape(id)[axis];
            let block = dim * inner;
            let data = self.value(id).data();
            for o in 0..outer {
                let dst = o * out_block + offset;
                out.data_mut()[dst..dst + block].copy_from_slice(&data[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        Ok(self.push(out, Op::Concat(inputs.to_vec(), axis)))
    }

    /// Contiguous window `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(invalid(
                "slice",
                &sa,
                format!("window [{start}, {}) out of range on axis {axis}", start + len),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        let in_block = sa[axis] * inner;
        let out_block = len * inner;
        let data = self.value(a).data();
        for o in 0..outer {
            let src = o * in_block + start * inner;
            out.data_mut()[o * out_block..(o + 1) * out_block]
                .copy_from_slice(&data[src..src + out_block]);
        }
        Ok(self.push(out, Op::Slice { x: a, axis, start }))
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(invalid("sum_axis", &sa, format!("axis {axis} out of range")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let dim = sa[axis];
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let mut out = Tensor::zeros(&out_shape);
        let data = self.value(a).data();
        for o in 0..outer {
            for d in 0..dim {
                let src = (o * dim + d) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out.data_mut()[dst + i] += data[src + i];
                }
            }
        }
        Ok(self.push(out, Op::SumAxis(a, axis)))
    }

    /// Mean over every element, yielding a scalar.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(invalid("mean_all", v.shape(), "empty tensor"));
        }
        let mean = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(mean), Op::MeanAll(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(out, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::exp);
        Ok(self.push(out, Op::Exp(a)))
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(AdError::NonFinite { op: "sqrt" });
        }
        let out = self.value(a).map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a)))
    }

    /// Softmax along the last axis, numerically stabilised per row.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let n = *sa
            .last()
            .ok_or_else(|| invalid("softmax", sa, "needs at least one axis"))?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Layer normalisation over the last axis with learnable `gamma`/`beta`
    /// (both shaped like that axis).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let n = *sx
            .last()
            .ok_or_else(|| invalid("layer_norm", &sx, "needs at least one axis"))?;
        if self.shape(gamma) != [n] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        if self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", &sx, self.shape(beta)));
        }
        let rows = self.value(x).numel() / n;
        let mut mean = Tensor::zeros(&[rows]);
        let mut invstd = Tensor::zeros(&[rows]);
        let mut out = self.value(x).clone();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean.data_mut()[r] = mu;
            invstd.data_mut()[r] = is;
            for (j, v) in row.iter_mut().enumerate() {
                *v = gd[j] * ((*v - mu) * is) + bd[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean, invstd }))
    }

    /// Dilated causal 1-D convolution.
    ///
    /// `x` is `[batch, in_channels, time]`, `w` is
    /// `[out_channels, in_channels, kernel]`, `bias` is `[out_channels]`.
    /// Output keeps the time length: `out[t] = bias + sum_j w[.., j] *
    /// x[.., t - j*dilation]`, with out-of-range taps reading zero, so tap 0
    /// sees the current step and no tap sees the future.
    pub fn causal_conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        dilation: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(shape_err("causal_conv1d", &sx, &sw));
        }
        if self.shape(bias) != [sw[0]] {
            return Err(shape_err("causal_conv1d", &sw, self.shape(bias)));
        }
        if dilation == 0 {
            return Err(invalid("causal_conv1d", &sw, "dilation must be >= 1"));
        }
        let (bsz, cin, t_len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let ck = cin * k;
        let mut cols = vec![0.0; ck * t_len];
        let mut out = Tensor::zeros(&[bsz, cout, t_len]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(bias).data().to_vec();
        for b in 0..bsz {
            im2col(&xd[b * cin * t_len..(b + 1) * cin * t_len], cin, t_len, k, dilation, &mut cols);
            let out_b = &mut out.data_mut()[b * cout * t_len..(b + 1) * cout * t_len];
            gemm_acc(cout, ck, t_len, 1.0, wd, &cols, 0.0, out_b);
            for (o, row) in out_b.chunks_mut(t_len).enumerate() {
                for v in row.iter_mut() {
                    *v += bd[o];
                }
            }
        }
        Ok(self.push(out, Op::CausalConv1d { x, w, bias, dilation }))
    }

    /// Affine map `x @ w + b` (bias broadcast over leading axes).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_broadcast(xw, b)
    }

    /// Mean squared error between same-shaped tensors, as a scalar node.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by forward and backward
// ---------------------------------------------------------------------------

fn transpose_tensor(t: &Tensor, ax1: usize, ax2: usize) -> Tensor {
    if ax1 == ax2 {
        return t.clone();
    }
    let ish = t.shape();
    let mut osh = ish.to_vec();
    osh.swap(ax1, ax2);
    let istr = strides(ish);
    let ostr = strides(&osh);
    let mut out = Tensor::zeros(&osh);
    let (src, n) = (t.data(), t.numel());
    let dst = out.data_mut();
    for of in 0..n {
        let mut rem = of;
        let mut src_off = 0;
        for (ax, &s) in ostr.iter().enumerate() {
            let ix = rem / s;
            rem %= s;
            let in_ax = if ax == ax1 {
                ax2
            } else if ax == ax2 {
                ax1
            } else {
                ax
            };
            src_off += ix * istr[in_ax];
        }
        dst[of] = src[src_off];
    }
    out
}

/// Lay out `[cin, t]` input as a `[cin*k, t]` patch matrix for the causal
/// convolution: row `i*k + j` holds channel `i` delayed by `j*dilation`.
fn im2col(x: &[f64], cin: usize, t_len: usize, k: usize, dilation: usize, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), cin * k * t_len);
    for i in 0..cin {
        for j in 0..k {
            let shift = j * dilation;
            let row = &mut cols[(i * k + j) * t_len..(i * k + j + 1) * t_len];
            let src = &x[i * t_len..(i + 1) * t_len];
            for t in 0..t_len {
                row[t] = if t >= shift { src[t - shift] } else { 0.0 };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

/// Distribute `grad` of node `i` onto that node's inputs (or its parameter).
pub(crate) fn backprop(graph: &mut Graph, i: usize, grad: &Tensor) -> Result<()> {
    let Graph { ref nodes, ref mut grads } = *graph;
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::ParamLeaf(p) => p.accumulate_grad(grad),
        Op::Add(a, b) => {
            accumulate(grads, *a, grad.clone());
            accumulate(grads, *b, grad.clone());
        }
        Op::AddBroadcast(a, b) => {
            accumulate(grads, *a, grad.clone());
            let shape_b = nodes[b.0].value.shape().to_vec();
            let chunk = nodes[b.0].value.numel().max(1);
            let mut gb = Tensor::zeros(&shape_b);
            for (i, &v) in grad.data().iter().enumerate() {
                gb.data_mut()[i % chunk] += v;
            }
            accumulate(grads, *b, gb);
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, grad.clone());
            accumulate(grads, *b, grad.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let ga = grad.zip_map(&nodes[b.0].value, |g, y| g * y).expect("mul shapes");
            let gb = grad.zip_map(&nodes[a.0].value, |g, x| g * x).expect("mul shapes");
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::MulScalar(a, s) => {
            let s = *s;
            accumulate(grads, *a, grad.map(|v| v * s));
        }
        Op::Matmul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sb.len() == 2 {
                let (k, n) = (sb[0], sb[1]);
                let rows = ta.numel() / k;
                let mut ga = Tensor::zeros(sa);
                gemm_bt_acc(rows, n, k, 1.0, grad.data(), tb.data(), 0.0, ga.data_mut());
                let mut gb = Tensor::zeros(sb);
                gemm_at_acc(k, rows, n, 1.0, ta.data(), grad.data(), 0.0, gb.data_mut());
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            } else {
                let nd = sa.len();
                let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
                let batches: usize = sa[..nd - 2].iter().product();
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                for i in 0..batches {
                    let g_i = &grad.data()[i * m * n..(i + 1) * m * n];
                    gemm_bt_acc(
                        m,
                        n,
                        k,
                        1.0,
                        g_i,
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        0.0,
                        &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                    );
                    gemm_at_acc(
                        k,
                        m,
                        n,
                        1.0,
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        g_i,
                        0.0,
                        &mut gb.data_mut()[i * k * n..(i + 1) * k * n],
                    );
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
        }
        Op::Transpose(a, ax1, ax2) => {
            accumulate(grads, *a, transpose_tensor(grad, *ax1, *ax2));
        }
        Op::Reshape(a) => {
            let shape = nodes[a.0].value.shape().to_vec();
            accumulate(grads, *a, grad.reshaped(&shape).expect("reshape grad"));
        }
        Op::Concat(inputs, axis) => {
            let axis = *axis;
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let out_block = out_shape[axis] * inner;
            let mut offset = 0;
            for &id in inputs {
                let s = nodes[id.0].value.shape().to_vec();
                let block = s[axis] * inner;
                let mut gi = Tensor::zeros(&s);
                for o in 0..outer {
                    let src = o * out_block + offset;
                    gi.data_mut()[o * block..(o + 1) * block]
                        .copy_from_slice(&grad.data()[src..src + block]);
                }
                offset += block;
                accumulate(grads, id, gi);
            }
        }
        Op::Slice { x, axis, start } => {
            let (axis, start) = (*axis, *start);
            let in_shape = nodes[x.0].value.shape().to_vec();
            let len = node.value.shape()[axis];
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let in_block = in_shape[axis] * inner;
            let out_block = len * inner;
            let mut gx = Tensor::zeros(&in_shape);
            for o in 0..outer {
                let dst = o * in_block + start * inner;
                gx.data_mut()[dst..dst + out_block]
                    .copy_from_slice(&grad.data()[o * out_block..(o + 1) * out_block]);
            }
            accumulate(grads, *x, gx);
        }
        Op::SumAxis(a, axis) => {
            let axis = *axis;
            let in_shape = nodes[a.0].value.shape().to_vec();
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let dim = in_shape[axis];
            let mut ga = Tensor::zeros(&in_shape);
            for o in 0..outer {
                for d in 0..dim {
                    let dst = (o * dim + d) * inner;
                    let src = o * inner;
                    for i in 0..inner {
                        ga.data_mut()[dst + i] = grad.data()[src + i];
                    }
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::MeanAll(a) => {
            let shape = nodes[a.0].value.shape().to_vec();
            let n = nodes[a.0].value.numel();
            let g = grad.item() / n as f64;
            accumulate(grads, *a, Tensor::filled(&shape, g));
        }
        Op::Relu(a) => {
            let ga = grad
                .zip_map(&nodes[a.0].value, |g, x| if x > 0.0 { g } else { 0.0 })
                .expect("relu shapes");
            accumulate(grads, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = grad.zip_map(&node.value, |g, s| g * s * (1.0 - s)).expect("sigmoid shapes");
            accumulate(grads, *a, ga);
        }
        Op::Tanh(a) => {
            let ga = grad.zip_map(&node.value, |g, t| g * (1.0 - t * t)).expect("tanh shapes");
            accumulate(grads, *a, ga);
        }
        Op::Exp(a) => {
            let ga = grad.zip_map(&node.value, |g, e| g * e).expect("exp shapes");
            accumulate(grads, *a, ga);
        }
        Op::Sqrt(a) => {
            let ga = grad.zip_map(&node.value, |g, r| g * 0.5 / r).expect("sqrt shapes");
            accumulate(grads, *a, ga);
        }
        Op::Softmax(a) => {
            let n = *node.value.shape().last().unwrap();
            let mut ga = grad.zip_map(&node.value, |g, o| g * o).expect("softmax shapes");
            for (g_row, o_row) in ga.data_mut().chunks_mut(n).zip(node.value.data().chunks(n)) {
                let dot: f64 = g_row.iter().sum();
                for (gv, &ov) in g_row.iter_mut().zip(o_row.iter()) {
                    *gv -= dot * ov;
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::LayerNorm { x, gamma, beta, mean, invstd } => {
            let xv = &nodes[x.0].value;
            let n = *xv.shape().last().unwrap();
            let rows = xv.numel() / n;
            let gammad = nodes[gamma.0].value.data();
            let mut gx = Tensor::zeros(xv.shape());
            let mut ggamma = Tensor::zeros(&[n]);
            let mut gbeta = Tensor::zeros(&[n]);
            for r in 0..rows {
                let g_row = &grad.data()[r * n..(r + 1) * n];
                let x_row = &xv.data()[r * n..(r + 1) * n];
                let (mu, is) = (mean.data()[r], invstd.data()[r]);
                let mut sum_gd = 0.0;
                let mut sum_gd_xhat = 0.0;
                for j in 0..n {
                    let xhat = (x_row[j] - mu) * is;
                    let gd = g_row[j] * gammad[j];
                    sum_gd += gd;
                    sum_gd_xhat += gd * xhat;
                    ggamma.data_mut()[j] += g_row[j] * xhat;
                    gbeta.data_mut()[j] += g_row[j];
                }
                let (m1, m2) = (sum_gd / n as f64, sum_gd_xhat / n as f64);
                let gx_row = &mut gx.data_mut()[r * n..(r + 1) * n];
                for j in 0..n {
                    let xhat = (x_row[j] - mu) * is;
                    let gd = g_row[j] * gammad[j];
                    gx_row[j] = is * (gd - m1 - xhat * m2);
                }
            }
            accumulate(grads, *x, gx);
            accumulate(grads, *gamma, ggamma);
            accumulate(grads, *beta, gbeta);
        }
        Op::CausalConv1d { x, w, bias, dilation } => {
            let d = *dilation;
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let (bsz, cin, t_len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (cout, k) = (wv.shape()[0], wv.shape()[2]);
            let ck = cin * k;
            let mut gx = Tensor::zeros(xv.shape());
            let mut gw = Tensor::zeros(wv.shape());
            let mut gbias = Tensor::zeros(&[cout]);
            let mut cols = vec![0.0; ck * t_len];
            let mut dcols = vec![0.0; ck * t_len];
            for b in 0..bsz {
                let g_b = &grad.data()[b * cout * t_len..(b + 1) * cout * t_len];
                for (o, row) in g_b.chunks(t_len).enumerate() {
                    gbias.data_mut()[o] += row.iter().sum::<f64>();
                }
                im2col(
                    &xv.data()[b * cin * t_len..(b + 1) * cin * t_len],
                    cin,
                    t_len,
                    k,
                    d,
                    &mut cols,
                );
                gemm_bt_acc(cout, t_len, ck, 1.0, g_b, &cols, 1.0, gw.data_mut());
                gemm_at_acc(ck, cout, t_len, 1.0, wv.data(), g_b, 0.0, &mut dcols);
                let gx_b = &mut gx.data_mut()[b * cin * t_len..(b + 1) * cin * t_len];
                for i in 0..cin {
                    for j in 0..k {
                        let shift = j * d;
                        let row = &dcols[(i * k + j) * t_len..(i * k + j + 1) * t_len];
                        for t in shift..t_len {
                            gx_b[i * t_len + t - shift] += row[t];
                        }
                    }
                }
            }
            accumulate(grads, *x, gx);
            accumulate(grads, *w, gw);
            accumulate(grads, *bias, gbias);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Param, ParamSet};
    use crate::testing::{check_gradients, values};

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(tensor(&[3, 2], &[7., 8., 9., 10., 11., 12.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_flattens_leading_axes() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[2, 2, 2], &[1., 0., 0., 1., 2., 0., 0., 2.]));
        let w = g.constant(tensor(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let c = g.matmul(a, w).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        assert_eq!(
            g.value(c).data(),
            &[1., 2., 3., 4., 5., 6., 2., 4., 6., 8., 10., 12.]
        );
    }

    #[test]
    fn matmul_batched_matches_per_batch_products() {
        let mut g = Graph::new();
        let a_data = values(11, 2 * 2 * 3);
        let b_data = values(12, 2 * 3 * 2);
        let a = g.constant(tensor(&[2, 2, 3], &a_data));
        let b = g.constant(tensor(&[2, 3, 2], &b_data));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2]);
        for batch in 0..2 {
            let a_b = tensor(&[2, 3], &a_data[batch * 6..(batch + 1) * 6]);
            let b_b = tensor(&[3, 2], &b_data[batch * 6..(batch + 1) * 6]);
            let expect = a_b.matmul2(&b_b).unwrap();
            assert_eq!(&g.value(c).data()[batch * 4..(batch + 1) * 4], expect.data());
        }
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let t = g.transpose(a, 0, 1).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[1., 4., 2., 5., 3., 6.]);

        let b = g.constant(Tensor::new(&[2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let tb = g.transpose(b, 0, 2).unwrap();
        assert_eq!(g.value(tb).data(), &[0., 4., 2., 6., 1., 5., 3., 7.]);
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(tensor(&[2, 3], &[5., 6., 7., 8., 9., 10.]));
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(cat).data(), &[1., 2., 5., 6., 7., 3., 4., 8., 9., 10.]);
        let back = g.slice(cat, 1, 2, 3).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
    }

    #[test]
    fn sum_axis_and_mean_all() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s0 = g.sum_axis(a, 0).unwrap();
        assert_eq!(g.value(s0).data(), &[5., 7., 9.]);
        let s1 = g.sum_axis(a, 1).unwrap();
        assert_eq!(g.value(s1).data(), &[6., 15.]);
        let m = g.mean_all(a).unwrap();
        assert_eq!(g.value(m).item(), 3.5);
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[4], &[-1.0, 0.0, 0.5, 2.0]));
        let r = g.relu(a).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 0.5, 2.0]);
        let s = g.sigmoid(a).unwrap();
        assert!((g.value(s).data()[1] - 0.5).abs() < 1e-15);
        assert!((g.value(s).data()[3] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        let t = g.tanh(a).unwrap();
        assert!((g.value(t).data()[3] - 2.0f64.tanh()).abs() < 1e-15);
        let e = g.exp(a).unwrap();
        assert!((g.value(e).data()[0] - (-1.0f64).exp()).abs() < 1e-15);
        let b = g.constant(tensor(&[2], &[4.0, 9.0]));
        let q = g.sqrt(b).unwrap();
        assert_eq!(g.value(q).data(), &[2.0, 3.0]);
        let neg = g.constant(tensor(&[1], &[-1.0]));
        assert!(g.sqrt(neg).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[2, 4], &[0.1, -0.4, 2.0, 1.3, 5.0, 5.0, 5.0, 5.0]));
        let s = g.softmax(a).unwrap();
        for row in g.value(s).data().chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
        // Uniform logits give the uniform distribution.
        for &v in &g.value(s).data()[4..] {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_large_negative_mask_values() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[1, 3], &[1.0, -1e30, 2.0]));
        let s = g.softmax(a).unwrap();
        let out = g.value(s).data();
        assert_eq!(out[1], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-12);
        assert!(out[2] > out[0]);
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let mut g = Graph::new();
        // Row variance well above eps, so the eps bias on the output variance
        // stays below the 1e-6 tolerance.
        let data: Vec<f64> = values(5, 12).iter().map(|v| v * 10.0).collect();
        let x = g.constant(tensor(&[3, 4], &data));
        let gamma = g.constant(Tensor::filled(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-8).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn causal_conv_impulse_response_is_the_kernel() {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[1, 1, 4], &[1.0, 0.0, 0.0, 0.0]));
        let w = g.constant(tensor(&[1, 1, 2], &[0.7, -0.3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.causal_conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.7, -0.3, 0.0, 0.0]);
        // Dilation spreads the taps apart.
        let y2 = g.causal_conv1d(x, w, b, 2).unwrap();
        assert_eq!(g.value(y2).data(), &[0.7, 0.0, -0.3, 0.0]);
    }

    #[test]
    fn causal_conv_mixes_channels_and_applies_bias() {
        let mut g = Graph::new();
        // Two input channels, constant over time.
        let x = g.constant(tensor(&[1, 2, 3], &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]));
        // One output channel, kernel 1: out = 3*ch0 + 4*ch1 + bias.
        let w = g.constant(tensor(&[1, 2, 1], &[3.0, 4.0]));
        let b = g.constant(tensor(&[1], &[0.5]));
        let y = g.causal_conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[11.5, 11.5, 11.5]);
    }

    #[test]
    fn causal_conv_never_reads_the_future() {
        // Gradient of an early output w.r.t. late inputs must be exactly zero.
        let mut g = Graph::new();
        let p = Param::new("x", tensor(&[1, 1, 6], &values(3, 6)));
        let x = g.param(&p);
        let w = g.constant(tensor(&[1, 1, 3], &[0.2, 0.3, 0.4]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.causal_conv1d(x, w, b, 2).unwrap();
        // Loss = output at t=2 only.
        let at2 = g.slice(y, 2, 2, 1).unwrap();
        let loss = g.mean_all(at2).unwrap();
        g.backward(loss).unwrap();
        let gx = p.grad();
        // Receptive field of t=2 with k=3, d=2 is {2, 0}; everything else zero.
        assert_eq!(gx.data()[1], 0.0);
        for &v in &gx.data()[3..] {
            assert_eq!(v, 0.0);
        }
        assert!(gx.data()[0] != 0.0 && gx.data()[2] != 0.0);
    }

    // ---- finite-difference checks for every primitive ----

    fn fd_unary(name: &str, build: impl Fn(&mut Graph, NodeId) -> NodeId, seed: u64) {
        let mut set = ParamSet::new();
        let p = set.add(name, tensor(&[2, 3], &values(seed, 6)));
        check_gradients(&set, 1e-5, 1e-4, || {
            let mut g = Graph::new();
            let x = g.param(&p);
            let y = build(&mut g, x);
            let loss = g.mean_all(y).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).item()
        });
    }

    #[test]
    fn fd_elementwise_ops() {
        fd_unary("relu", |g, x| g.relu(x).unwrap(), 21);
        fd_unary("sigmoid", |g, x| g.sigmoid(x).unwrap(), 22);
        fd_unary("tanh", |g, x| g.tanh(x).unwrap(), 23);
        fd_unary("exp", |g, x| g.exp(x).unwrap(), 24);
        fd_unary("softmax", |g, x| {
            let s = g.softmax(x).unwrap();
            let sq = g.mul(s, s).unwrap();
            g.mul_scalar(sq, 3.0).unwrap()
        }, 25);
        fd_unary("transpose", |g, x| g.transpose(x, 0, 1).unwrap(), 26);
        fd_unary("reshape", |g, x| g.reshape(x, &[3, 2]).unwrap(), 27);
        fd_unary("sum0", |g, x| g.sum_axis(x, 0).unwrap(), 28);
        fd_unary("sum1", |g, x| g.sum_axis(x, 1).unwrap(), 29);
        fd_unary("slice", |g, x| g.slice(x, 1, 1, 2).unwrap(), 30);
        fd_unary("scalar", |g, x| g.mul_scalar(x, -1.7).unwrap(), 31);
    }

    #[test]
    fn fd_sqrt() {
        let mut set = ParamSet::new();
        // Keep inputs well away from zero where the derivative blows up.
        let p = set.add("x", tensor(&[4], &[0.5, 1.5, 2.5, 4.0]));
        check_gradients(&set, 1e-5, 1e-4, || {
            let mut g = Graph::new();
            let x = g.param(&p);
            let y = g.sqrt(x).unwrap();
            let loss = g.mean_all(y).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).item()
        });
    }

    #[test]
    fn fd_binary_ops() {
        let mut set = ParamSet::new();
        let a = set.add("a", tensor(&[2, 3], &values(41, 6)));
        let b = set.add("b", tensor(&[2, 3], &values(42, 6)));
        let bias = set.add("bias", tensor(&[3], &values(43, 3)));
        check_gradients(&set, 1e-5, 1e-4, || {
            let mut g = Graph::new();
            let (na, nb, nbias) = (g.param(&a), g.param(&b), g.param(&bias));
            let sum = g.add(na, nb).unwrap();
            let diff = g.sub(sum, nb).unwrap();
            let prod = g.mul(diff, nb).unwrap();
            let biased = g.add_broadcast(prod, nbias).unwrap();
            let loss = g.mean_all(biased).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).item()
        });
    }

    #[test]
    fn fd_matmul_flat_and_batched() {
        let mut set = ParamSet::new();
        let a = set.add("a", tensor(&[2, 2, 3], &values(51, 12)));
        let w = set.add("w", tensor(&[3, 2], &values(52, 6)));
        check_gradients(&set, 1e-5, 1e-4, || {
            let mut g = Graph::new();
            let (na, nw) = (g.param(&a), g.param(&w));
            let y = g.matmul(na, nw).unwrap();
            let loss = g.mean_all(y).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).item()
        });

        let mut set = ParamSet::new();
        let a = set.add("a", tensor(&[2, 2, 3], &values(53, 12)));
        let b = set.add("b", tensor(&[2, 3, 2], &values(54, 12)));
        check_gradients(&set, 1e-5, 1e-4, || {
            let mut g = Graph::new();
            let (na, nb) = (g.param(&a), g.param(&b));
            let y = g.matmul(na, nb).unwrap();
            let sq = g.mul(y, y).unwrap();
            let loss = g.mean_all(sq).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).item()
        });
    }

    #[test]
    fn fd_concat() {
        let mut set = ParamSet::new();
        let a = set.add("a", tensor(&[2, 2], &values(61, 4)));
        let b = set.add("b", tensor(&[2, 3], &values(62, 6)));
        check_gradients(&set, 1e-5, 1e-4, || {
            let mut g = Graph::new();
            let (na, nb) = (g.param(&a), g.param(&b));
            let cat = g.concat(&[na, nb], 1).unwrap();
            let sq = g.mul(cat, cat).unwrap();
            let loss = g.mean_all(sq).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).item()
        });
    }

    #[test]
    fn fd_layer_norm() {
        let mut set = ParamSet::new();
        let x = set.add("x", tensor(&[3, 4], &values(71, 12)));
        let gamma = set.add("gamma", tensor(&[4], &[1.0, 1.1, 0.9, 1.2]));
        let beta = set.add("beta", tensor(&[4], &[0.0, -0.1, 0.1, 0.2]));
        check_gradients(&set, 1e-5, 1e-4, || {
            let mut g = Graph::new();
            let (nx, ng, nb) = (g.param(&x), g.param(&gamma), g.param(&beta));
            let y = g.layer_norm(nx, ng, nb, 1e-5).unwrap();
            let sq = g.mul(y, y).unwrap();
            let loss = g.mean_all(sq).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).item()
        });
    }

    #[test]
    fn fd_causal_conv() {
        for dilation in [1, 2] {
            let mut set = ParamSet::new();
            let x = set.add("x", tensor(&[2, 2, 5], &values(81, 20)));
            let w = set.add("w", tensor(&[3, 2, 2], &values(82, 12)));
            let b = set.add("b", tensor(&[3], &values(83, 3)));
            check_gradients(&set, 1e-5, 1e-4, || {
                let mut g = Graph::new();
                let (nx, nw, nb) = (g.param(&x), g.param(&w), g.param(&b));
                let y = g.causal_conv1d(nx, nw, nb, dilation).unwrap();
                let sq = g.mul(y, y).unwrap();
                let loss = g.mean_all(sq).unwrap();
                g.backward(loss).unwrap();
                g.value(loss).item()
            });
        }
    }

    #[test]
    fn fd_linear_and_mse() {
        let mut set = ParamSet::new();
        let x = set.add("x", tensor(&[4, 3], &values(91, 12)));
        let w = set.add("w", tensor(&[3, 2], &values(92, 6)));
        let b = set.add("b", tensor(&[2], &values(93, 2)));
        let target = tensor(&[4, 2], &values(94, 8));
        check_gradients(&set, 1e-5, 1e-4, || {
            let mut g = Graph::new();
            let (nx, nw, nb) = (g.param(&x), g.param(&w), g.param(&b));
            let t = g.constant(target.clone());
            let y = g.linear(nx, nw, nb).unwrap();
            let loss = g.mse_loss(y, t).unwrap();
            g.backward(loss).unwrap();
            g.value(loss).item()
        });
    }

    #[test]
    fn mse_loss_matches_hand_value() {
        let mut g = Graph::new();
        let a = g.constant(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(tensor(&[2, 2], &[1.0, 0.0, 0.0, 4.0]));
        let loss = g.mse_loss(a, b).unwrap();
        // Squared diffs: 0, 4, 9, 0 -> mean 13/4.
        assert_eq!(g.value(loss).item(), 3.25);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.add_broadcast(a, b).is_err());
        assert!(g.matmul(b, b).is_err());
        assert!(g.slice(a, 1, 2, 2).is_err());
        assert!(g.sum_axis(a, 2).is_err());
        assert!(g.transpose(a, 0, 2).is_err());
        assert!(g.concat(&[a, b], 0).is_err());
    }
}
