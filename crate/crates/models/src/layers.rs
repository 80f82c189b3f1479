//! Reusable building blocks: affine layers, GRU cells, attention, feed
//! forward blocks, layer norm, positional encodings, and dropout. Each
//! block registers its parameters in a shared [`ParamSet`] under a
//! hierarchical name prefix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use threetank_autodiff::{Graph, NodeId, Param, ParamSet, Tensor};

use crate::init;
use crate::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Keep-or-drop mask applied during training. `p` is the drop
/// probability; surviving activations are scaled by 1/(1-p) so the
/// expected value is unchanged and inference needs no correction.
pub fn dropout(
    g: &mut Graph,
    x: NodeId,
    p: f64,
    active: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if !active || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let data: Vec<f64> =
        (0..n).map(|_| if rng.gen_bool(keep) { scale } else { 0.0 }).collect();
    let mask = g.constant(Tensor::new(&shape, data).expect("mask sized to x"));
    Ok(g.mul(x, mask)?)
}

/// Affine layer `x @ w + b` with fan-in uniform weight init and zero bias.
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = params.add(format!("{prefix}.w"), init::uniform_fan_in(rng, &[fan_in, fan_out], fan_in));
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        Ok(g.linear(x, w, b)?)
    }
}

/// One GRU layer with fused gates. The input projection weight stacks the
/// update (z), reset (r), and candidate (n) columns in that order:
/// `wx: [in, 3h]`, `un: [h, 3h]`, biases `bx`, `bh: [3h]`.
///
/// Gate equations (h' is the new state):
///   z = sigmoid(x Wz + h Uz + bz_x + bz_h)
///   r = sigmoid(x Wr + h Ur + br_x + br_h)
///   n = tanh(x Wn + bn_x + r * (h Un + bn_h))
///   h' = h + z * (n - h)
pub struct GruLayer {
    pub wx: Param,
    pub un: Param,
    pub bx: Param,
    pub bh: Param,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let wx =
            params.add(format!("{prefix}.wx"), init::uniform_fan_in(rng, &[input, 3 * hidden], input));
        // Recurrent weight: three orthogonal h x h blocks packed column-wise.
        let mut un = Tensor::zeros(&[hidden, 3 * hidden]);
        for gate in 0..3 {
            let block = init::orthogonal(rng, hidden);
            for i in 0..hidden {
                for j in 0..hidden {
                    un.data_mut()[i * 3 * hidden + gate * hidden + j] =
                        block.data()[i * hidden + j];
                }
            }
        }
        let un = params.add(format!("{prefix}.un"), un);
        let bx = params.add(format!("{prefix}.bx"), Tensor::zeros(&[3 * hidden]));
        let bh = params.add(format!("{prefix}.bh"), Tensor::zeros(&[3 * hidden]));
        Self { wx, un, bx, bh, hidden }
    }

    /// Project a whole input sequence `[B, T, in] -> [B, T, 3h]` in one
    /// matmul so the per-step loop only does hidden-state work.
    pub fn project_sequence(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let wx = g.param(&self.wx);
        let bx = g.param(&self.bx);
        Ok(g.linear(x, wx, bx)?)
    }

    /// Project a single step `[B, in] -> [B, 3h]`.
    pub fn project_step(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.project_sequence(g, x)
    }

    /// One recurrence step. `x_proj` is `[B, 3h]` (already projected),
    /// `h` is `[B, h]`; returns the new `[B, h]` state.
    pub fn step(&self, g: &mut Graph, x_proj: NodeId, h: NodeId) -> Result<NodeId> {
        let hd = self.hidden;
        let un = g.param(&self.un);
        let bh = g.param(&self.bh);
        let h_proj = g.linear(h, un, bh)?;

        let xz = g.slice(x_proj, 1, 0, hd)?;
        let xr = g.slice(x_proj, 1, hd, hd)?;
        let xn = g.slice(x_proj, 1, 2 * hd, hd)?;
        let hz = g.slice(h_proj, 1, 0, hd)?;
        let hr = g.slice(h_proj, 1, hd, hd)?;
        let hn = g.slice(h_proj, 1, 2 * hd, hd)?;

        let z_pre = g.add(xz, hz)?;
        let z = g.sigmoid(z_pre)?;
        let r_pre = g.add(xr, hr)?;
        let r = g.sigmoid(r_pre)?;
        let gated = g.mul(r, hn)?;
        let n_pre = g.add(xn, gated)?;
        let n = g.tanh(n_pre)?;

        // h' = h + z * (n - h)  ==  (1 - z) * h + z * n
        let diff = g.sub(n, h)?;
        let delta = g.mul(z, diff)?;
        Ok(g.add(h, delta)?)
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/O
/// projections.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        assert!(d_model % heads == 0, "heads must divide d_model");
        Self {
            wq: Linear::new(params, rng, &format!("{prefix}.wq"), d_model, d_model),
            wk: Linear::new(params, rng, &format!("{prefix}.wk"), d_model, d_model),
            wv: Linear::new(params, rng, &format!("{prefix}.wv"), d_model, d_model),
            wo: Linear::new(params, rng, &format!("{prefix}.wo"), d_model, d_model),
            heads,
            d_model,
        }
    }

    /// `query: [B, Tq, d]`, `keyval: [B, Tk, d]`, optional additive mask
    /// `[Tq, Tk]` applied to the pre-softmax scores. Returns `[B, Tq, d]`
    /// plus the attention-weight node `[B, H, Tq, Tk]` for inspection.
    pub fn forward_with_attn(
        &self,
        g: &mut Graph,
        query: NodeId,
        keyval: NodeId,
        mask: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let (b, tq) = (g.shape(query)[0], g.shape(query)[1]);
        let tk = g.shape(keyval)[1];
        let h = self.heads;
        let dh = self.d_model / h;

        let q = self.wq.forward(g, query)?;
        let k = self.wk.forward(g, keyval)?;
        let v = self.wv.forward(g, keyval)?;

        // [B, T, d] -> [B, H, T, dh]
        let q = g.reshape(q, &[b, tq, h, dh])?;
        let q = g.transpose(q, 1, 2)?;
        let k = g.reshape(k, &[b, tk, h, dh])?;
        let k = g.transpose(k, 1, 2)?;
        let v = g.reshape(v, &[b, tk, h, dh])?;
        let v = g.transpose(v, 1, 2)?;

        let k_t = g.transpose(k, 2, 3)?; // [B, H, dh, Tk]
        let scores = g.matmul(q, k_t)?; // [B, H, Tq, Tk]
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = match mask {
            Some(m) => g.add_broadcast(scores, m)?,
            None => scores,
        };
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?; // [B, H, Tq, dh]
        let ctx = g.transpose(ctx, 1, 2)?; // [B, Tq, H, dh]
        let ctx = g.reshape(ctx, &[b, tq, self.d_model])?;
        let out = self.wo.forward(g, ctx)?;
        Ok((out, attn))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        query: NodeId,
        keyval: NodeId,
        mask: Option<NodeId>,
    ) -> Result<NodeId> {
        Ok(self.forward_with_attn(g, query, keyval, mask)?.0)
    }
}

/// Two-layer position-wise feed-forward block with ReLU.
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        ff: usize,
    ) -> Self {
        Self {
            l1: Linear::new(params, rng, &format!("{prefix}.l1"), d_model, ff),
            l2: Linear::new(params, rng, &format!("{prefix}.l2"), ff, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.l1.forward(g, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, h)
    }
}

/// Layer normalization over the last axis with learnable gain and bias.
pub struct LayerNormLayer {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNormLayer {
    pub fn new(params: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{prefix}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: params.add(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        Ok(g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?)
    }
}

/// Sinusoidal positional encoding table `[max_len, d]`:
/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d.div_ceil(2) {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + 2 * i] = angle.sin();
            if 2 * i + 1 < d {
                data[pos * d + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(&[max_len, d], data).expect("sized by construction")
}

/// Additive causal mask `[len, len]`: 0 at or before the diagonal, a large
/// negative value strictly above it, so position i never attends to j > i.
pub fn causal_mask(len: usize) -> Tensor {
    const NEG: f64 = -1e30;
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = NEG;
        }
    }
    Tensor::new(&[len, len], data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let lin = Linear::new(&mut params, &mut r, "t", 2, 2);
        lin.w.set_value(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        lin.b.set_value(Tensor::new(&[2], vec![10.0, 20.0]).unwrap());
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0 + 3.0 + 10.0, 2.0 + 4.0 + 20.0]);
    }

    #[test]
    fn linear_bias_starts_at_zero() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let lin = Linear::new(&mut params, &mut r, "t", 5, 4);
        assert!(lin.b.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(lin.w.shape(), vec![5, 4]);
    }

    #[test]
    fn dropout_zero_rate_or_inactive_is_identity_node() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let mut r = rng();
        let same = dropout(&mut g, x, 0.0, true, &mut r).unwrap();
        assert_eq!(same, x);
        let same = dropout(&mut g, x, 0.5, false, &mut r).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn dropout_scales_survivors_and_zeroes_the_rest() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[100, 10], 1.0));
        let mut r = rng();
        let y = dropout(&mut g, x, 0.25, true, &mut r).unwrap();
        let scale = 1.0 / 0.75;
        let mut kept = 0usize;
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - scale).abs() < 1e-12, "unexpected value {v}");
            if v != 0.0 {
                kept += 1;
            }
        }
        let frac = kept as f64 / 1000.0;
        assert!((frac - 0.75).abs() < 0.05, "kept fraction {frac}");
    }

    #[test]
    fn positional_encoding_matches_definition() {
        let pe = positional_encoding(4, 6);
        assert_eq!(pe.shape(), &[4, 6]);
        for pos in 0..4 {
            for i in 0..3 {
                let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / 6.0);
                let want_sin = (pos as f64 * rate).sin();
                let want_cos = (pos as f64 * rate).cos();
                assert!((pe.data()[pos * 6 + 2 * i] - want_sin).abs() < 1e-15);
                assert!((pe.data()[pos * 6 + 2 * i + 1] - want_cos).abs() < 1e-15);
            }
        }
        // Position 0 is [0, 1, 0, 1, ...].
        assert_eq!(pe.data()[0], 0.0);
        assert_eq!(pe.data()[1], 1.0);
    }

    #[test]
    fn causal_mask_blocks_strict_future_only() {
        let m = causal_mask(3);
        for i in 0..3 {
            for j in 0..3 {
                let v = m.data()[i * 3 + j];
                if j > i {
                    assert!(v < -1e29);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let mha = MultiHeadAttention::new(&mut params, &mut r, "a", 4, 2);
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(&[2, 3, 4], (0..24).map(|i| (i as f64).sin()).collect()).unwrap());
        let kv = g.constant(Tensor::new(&[2, 5, 4], (0..40).map(|i| (i as f64).cos()).collect()).unwrap());
        let (_, attn) = mha.forward_with_attn(&mut g, q, kv, None).unwrap();
        assert_eq!(g.shape(attn), &[2, 2, 3, 5]);
        for row in g.value(attn).data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn attention_with_causal_mask_keeps_rows_normalized_over_past() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let mha = MultiHeadAttention::new(&mut params, &mut r, "a", 4, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 4, 4], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap());
        let mask = g.constant(causal_mask(4));
        let (_, attn) = mha.forward_with_attn(&mut g, x, x, Some(mask)).unwrap();
        let a = g.value(attn).data();
        for i in 0..4 {
            for j in 0..4 {
                let w = a[i * 4 + j];
                if j > i {
                    assert!(w.abs() < 1e-300, "future weight {w} at ({i},{j})");
                }
            }
            let s: f64 = (0..4).map(|j| a[i * 4 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    /// Hand-checked two-step single-head attention at d=2: identity
    /// projections, so attention reduces to softmax(q k^T / sqrt(2)) @ v.
    #[test]
    fn single_head_attention_matches_hand_computation() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let mha = MultiHeadAttention::new(&mut params, &mut r, "a", 2, 1);
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        mha.wq.w.set_value(eye.clone());
        mha.wk.w.set_value(eye.clone());
        mha.wv.w.set_value(eye.clone());
        mha.wo.w.set_value(eye);
        let mut g = Graph::new();
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let xn = g.constant(x);
        let (out, attn) = mha.forward_with_attn(&mut g, xn, xn, None).unwrap();

        let s = 1.0 / 2f64.sqrt();
        // Row 0: scores [1, 0] * s; row 1: scores [0, 4] * s.
        let w00 = (s).exp() / ((s).exp() + 1.0);
        let w01 = 1.0 - w00;
        let w11 = (4.0 * s).exp() / ((4.0 * s).exp() + 1.0);
        let w10 = 1.0 - w11;
        let a = g.value(attn).data();
        assert!((a[0] - w00).abs() < 1e-10);
        assert!((a[1] - w01).abs() < 1e-10);
        assert!((a[2] - w10).abs() < 1e-10);
        assert!((a[3] - w11).abs() < 1e-10);

        let o = g.value(out).data();
        // out row = attn row @ [[1,0],[0,2]]
        assert!((o[0] - w00).abs() < 1e-10);
        assert!((o[1] - 2.0 * w01).abs() < 1e-10);
        assert!((o[2] - w10).abs() < 1e-10);
        assert!((o[3] - 2.0 * w11).abs() < 1e-10);
    }

    /// One GRU step with all-zero parameters leaves the state at zero.
    #[test]
    fn gru_step_zero_params_keeps_zero_state() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let cell = GruLayer::new(&mut params, &mut r, "g", 3, 4);
        cell.wx.set_value(Tensor::zeros(&[3, 12]));
        cell.un.set_value(Tensor::zeros(&[4, 12]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 3], 5.0));
        let xp = cell.project_step(&mut g, x).unwrap();
        let h0 = g.constant(Tensor::zeros(&[2, 4]));
        let h1 = cell.step(&mut g, xp, h0).unwrap();
        // z = sigmoid(0) = 0.5, n = tanh(0) = 0, h' = 0 + 0.5 * (0 - 0) = 0.
        assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
    }

    /// Scalar GRU (in=1, h=1) stepped three times against a hand-rolled
    /// reference implementation of the same equations.
    #[test]
    fn scalar_gru_three_steps_match_reference() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let cell = GruLayer::new(&mut params, &mut r, "g", 1, 1);
        // wz, wr, wn; uz, ur, un; bxz, bxr, bxn; bhz, bhr, bhn
        cell.wx.set_value(Tensor::new(&[1, 3], vec![0.5, -0.3, 0.8]).unwrap());
        cell.un.set_value(Tensor::new(&[1, 3], vec![0.2, 0.4, -0.6]).unwrap());
        cell.bx.set_value(Tensor::new(&[3], vec![0.1, -0.2, 0.05]).unwrap());
        cell.bh.set_value(Tensor::new(&[3], vec![0.0, 0.3, -0.1]).unwrap());

        let xs = [1.0, -0.5, 0.25];
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_ref = 0.0f64;
        for &x in &xs {
            let z = sigmoid(0.5 * x + 0.2 * h_ref + 0.1 + 0.0);
            let rr = sigmoid(-0.3 * x + 0.4 * h_ref - 0.2 + 0.3);
            let n = (0.8 * x + 0.05 + rr * (-0.6 * h_ref - 0.1)).tanh();
            h_ref = h_ref + z * (n - h_ref);
        }

        let mut g = Graph::new();
        let mut h = g.constant(Tensor::zeros(&[1, 1]));
        for &x in &xs {
            let xn = g.constant(Tensor::new(&[1, 1], vec![x]).unwrap());
            let xp = cell.project_step(&mut g, xn).unwrap();
            h = cell.step(&mut g, xp, h).unwrap();
        }
        let got = g.value(h).item();
        assert!(
            (got - h_ref).abs() < 1e-12,
            "graph GRU {got} vs reference {h_ref}"
        );
    }

    /// Sequence projection equals per-step projection.
    #[test]
    fn sequence_projection_matches_per_step() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let cell = GruLayer::new(&mut params, &mut r, "g", 2, 3);
        let x = Tensor::new(&[2, 4, 2], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let seq = cell.project_sequence(&mut g, xn).unwrap();
        assert_eq!(g.shape(seq), &[2, 4, 9]);
        for t in 0..4 {
            let step_in = g.slice(xn, 1, t, 1).unwrap();
            let step_in = g.reshape(step_in, &[2, 2]).unwrap();
            let proj = cell.project_step(&mut g, step_in).unwrap();
            let from_seq = g.slice(seq, 1, t, 1).unwrap();
            let from_seq = g.reshape(from_seq, &[2, 9]).unwrap();
            assert_eq!(g.value(proj).data(), g.value(from_seq).data(), "step {t}");
        }
    }

    #[test]
    fn layer_norm_layer_normalizes_rows() {
        let mut params = ParamSet::new();
        let ln = LayerNormLayer::new(&mut params, "ln", 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 4], vec![1., 2., 3., 4., -1., 0., 1., 2.]).unwrap());
        let y = ln.forward(&mut g, x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "variance {var}");
        }
    }
}
