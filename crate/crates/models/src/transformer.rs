//! Encoder-decoder Transformers. The encoder embeds the input window
//! (linearly, or through a causal convolution stack in the CE variant),
//! adds sinusoidal positions, and self-attends. The decoder starts from
//! the last observed row, applies masked self-attention and
//! cross-attention over the encoder memory, and reads out one row per
//! forecast step. Training teacher-forces the shifted target sequence;
//! evaluation re-decodes the growing prefix one step at a time.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threetank_autodiff::{Graph, NodeId, Param, ParamSet, Tensor};
use threetank_sim::{INPUT_STEPS, TARGET_STEPS};

use crate::layers::{
    causal_mask, dropout, positional_encoding, FeedForward, Linear, LayerNormLayer,
    MultiHeadAttention,
};
use crate::{
    check_input_shape, check_target_shape, init, ArchKind, ForwardMode, Net, NetOutput, Result,
    TransformerCeConfig, TransformerConfig,
};

struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNormLayer,
    ff: FeedForward,
    ln2: LayerNormLayer,
}

impl EncoderLayer {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: &TransformerConfig,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(params, rng, &format!("{prefix}.attn"), c.d_model, c.heads),
            ln1: LayerNormLayer::new(params, &format!("{prefix}.ln1"), c.d_model),
            ff: FeedForward::new(params, rng, &format!("{prefix}.ff"), c.d_model, c.ff),
            ln2: LayerNormLayer::new(params, &format!("{prefix}.ln2"), c.d_model),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        p: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let a = self.attn.forward(g, x, x, None)?;
        let a = dropout(g, a, p, train, rng)?;
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, x)?;
        let f = self.ff.forward(g, x)?;
        let f = dropout(g, f, p, train, rng)?;
        let x2 = g.add(x, f)?;
        self.ln2.forward(g, x2)
    }
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNormLayer,
    cross_attn: MultiHeadAttention,
    ln2: LayerNormLayer,
    ff: FeedForward,
    ln3: LayerNormLayer,
}

impl DecoderLayer {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: &TransformerConfig,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(params, rng, &format!("{prefix}.self"), c.d_model, c.heads),
            ln1: LayerNormLayer::new(params, &format!("{prefix}.ln1"), c.d_model),
            cross_attn: MultiHeadAttention::new(params, rng, &format!("{prefix}.cross"), c.d_model, c.heads),
            ln2: LayerNormLayer::new(params, &format!("{prefix}.ln2"), c.d_model),
            ff: FeedForward::new(params, rng, &format!("{prefix}.ff"), c.d_model, c.ff),
            ln3: LayerNormLayer::new(params, &format!("{prefix}.ln3"), c.d_model),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        y: NodeId,
        memory: NodeId,
        mask: NodeId,
        p: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let a = self.self_attn.forward(g, y, y, Some(mask))?;
        let a = dropout(g, a, p, train, rng)?;
        let y = g.add(y, a)?;
        let y = self.ln1.forward(g, y)?;
        let c = self.cross_attn.forward(g, y, memory, None)?;
        let c = dropout(g, c, p, train, rng)?;
        let y2 = g.add(y, c)?;
        let y2 = self.ln2.forward(g, y2)?;
        let f = self.ff.forward(g, y2)?;
        let f = dropout(g, f, p, train, rng)?;
        let y3 = g.add(y2, f)?;
        self.ln3.forward(g, y3)
    }
}

/// Encoder-side embedding: either a per-step linear map or a stack of
/// dilated causal convolutions (layer i uses dilation 2^i, with ReLU
/// between layers but not after the last).
enum Embed {
    Linear(Linear),
    Conv(Vec<(Param, Param, usize)>),
}

impl Embed {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Embed::Linear(lin) => lin.forward(g, x),
            Embed::Conv(layers) => {
                let mut h = g.transpose(x, 1, 2)?; // [B, C, T]
                for (i, (w, b, dilation)) in layers.iter().enumerate() {
                    if i > 0 {
                        h = g.relu(h)?;
                    }
                    let w = g.param(w);
                    let b = g.param(b);
                    h = g.causal_conv1d(h, w, b, *dilation)?;
                }
                g.transpose(h, 1, 2).map_err(Into::into) // [B, T, d]
            }
        }
    }
}

/// Shared implementation behind both Transformer variants.
struct TransformerCore {
    enc_embed: Embed,
    dec_embed: Linear,
    pe: Tensor,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
    head: Linear,
    d_model: usize,
    dropout_p: f64,
    dropout_rng: RefCell<ChaCha8Rng>,
    params: ParamSet,
}

impl TransformerCore {
    fn new(c: &TransformerConfig, enc_embed_from: EncEmbedSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let enc_embed = match enc_embed_from {
            EncEmbedSpec::Linear => {
                Embed::Linear(Linear::new(&mut params, rng, "tf.enc.embed", 3, c.d_model))
            }
            EncEmbedSpec::Conv { layers, kernel } => {
                let convs = (0..layers)
                    .map(|i| {
                        let c_in = if i == 0 { 3 } else { c.d_model };
                        let w = params.add(
                            format!("tf.enc.embed.c{i}.w"),
                            init::uniform_fan_in(rng, &[c.d_model, c_in, kernel], c_in * kernel),
                        );
                        let b = params.add(
                            format!("tf.enc.embed.c{i}.b"),
                            Tensor::zeros(&[c.d_model]),
                        );
                        (w, b, 1usize << i)
                    })
                    .collect();
                Embed::Conv(convs)
            }
        };
        let dec_embed = Linear::new(&mut params, rng, "tf.dec.embed", 3, c.d_model);
        let enc_layers = (0..c.enc_layers)
            .map(|i| EncoderLayer::new(&mut params, rng, &format!("tf.enc.l{i}"), c))
            .collect();
        let dec_layers = (0..c.dec_layers)
            .map(|i| DecoderLayer::new(&mut params, rng, &format!("tf.dec.l{i}"), c))
            .collect();
        let head = Linear::new(&mut params, rng, "tf.head", c.d_model, 3);
        let pe = positional_encoding(INPUT_STEPS.max(TARGET_STEPS + 1), c.d_model);
        let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
        Self {
            enc_embed,
            dec_embed,
            pe,
            enc_layers,
            dec_layers,
            head,
            d_model: c.d_model,
            dropout_p: c.dropout,
            dropout_rng,
            params,
        }
    }

    fn pe_slice(&self, g: &mut Graph, len: usize) -> NodeId {
        let d = self.d_model;
        let data = self.pe.data()[..len * d].to_vec();
        g.constant(Tensor::new(&[len, d], data).expect("PE table is long enough"))
    }

    fn encode(
        &self,
        g: &mut Graph,
        x: NodeId,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let mut h = self.enc_embed.forward(g, x)?;
        let pe = self.pe_slice(g, INPUT_STEPS);
        h = g.add_broadcast(h, pe)?;
        h = dropout(g, h, self.dropout_p, train, rng)?;
        for layer in &self.enc_layers {
            h = layer.forward(g, h, self.dropout_p, train, rng)?;
        }
        Ok(h)
    }

    /// Run the decoder stack over `rows` `[B, L, 3]` against the encoder
    /// memory; returns per-position readouts `[B, L, 3]`.
    fn decode(
        &self,
        g: &mut Graph,
        rows: NodeId,
        memory: NodeId,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let len = g.shape(rows)[1];
        let mut y = self.dec_embed.forward(g, rows)?;
        let pe = self.pe_slice(g, len);
        y = g.add_broadcast(y, pe)?;
        y = dropout(g, y, self.dropout_p, train, rng)?;
        let mask = g.constant(causal_mask(len));
        for layer in &self.dec_layers {
            y = layer.forward(g, y, memory, mask, self.dropout_p, train, rng)?;
        }
        self.head.forward(g, y)
    }

    fn forward(&self, g: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput> {
        let b = check_input_shape("transformer", input.shape())?;
        let x = g.constant(input.clone());
        let rng = &mut *self.dropout_rng.borrow_mut();
        let train = mode.is_train();
        let memory = self.encode(g, x, train, rng)?;
        let seed_row = g.slice(x, 1, INPUT_STEPS - 1, 1)?; // [B, 1, 3]

        let forecast = match mode.teacher_target() {
            Some(t) => {
                check_target_shape("transformer target", b, t.shape())?;
                let tgt = g.constant((*t).clone());
                let shifted = g.slice(tgt, 1, 0, TARGET_STEPS - 1)?;
                let dec_in = g.concat(&[seed_row, shifted], 1)?; // [B, 50, 3]
                self.decode(g, dec_in, memory, train, rng)?
            }
            None => {
                let mut rows = seed_row;
                let mut preds = Vec::with_capacity(TARGET_STEPS);
                for k in 0..TARGET_STEPS {
                    let out = self.decode(g, rows, memory, train, rng)?;
                    let next = g.slice(out, 1, k, 1)?; // [B, 1, 3]
                    preds.push(next);
                    if k + 1 < TARGET_STEPS {
                        rows = g.concat(&[rows, next], 1)?;
                    }
                }
                g.concat(&preds, 1)?
            }
        };
        Ok(NetOutput { forecast, aux_loss: None })
    }
}

enum EncEmbedSpec {
    Linear,
    Conv { layers: usize, kernel: usize },
}

pub struct Transformer {
    core: TransformerCore,
}

impl Transformer {
    pub fn new(config: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self { core: TransformerCore::new(config, EncEmbedSpec::Linear, rng) })
    }
}

impl Net for Transformer {
    fn kind(&self) -> ArchKind {
        ArchKind::Transformer
    }

    fn params(&self) -> &ParamSet {
        &self.core.params
    }

    fn forward(&self, g: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput> {
        self.core.forward(g, input, mode)
    }
}

pub struct TransformerCe {
    core: TransformerCore,
}

impl TransformerCe {
    pub fn new(config: &TransformerCeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let spec = EncEmbedSpec::Conv { layers: config.embed_layers, kernel: config.embed_kernel };
        Ok(Self { core: TransformerCore::new(&config.base(), spec, rng) })
    }

    /// Embedding output `[B, 250, d]` before positions are added; exposed
    /// for causality probing.
    pub fn embed_only(&self, g: &mut Graph, input: &Tensor) -> Result<NodeId> {
        check_input_shape("transformer_ce", input.shape())?;
        let x = g.constant(input.clone());
        self.core.enc_embed.forward(g, x)
    }
}

impl Net for TransformerCe {
    fn kind(&self) -> ArchKind {
        ArchKind::TransformerCe
    }

    fn params(&self) -> &ParamSet {
        &self.core.params
    }

    fn forward(&self, g: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput> {
        self.core.forward(g, input, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{build_model, ArchConfig, Model, Standardizer};

    fn tf_config(d: usize, heads: usize) -> TransformerConfig {
        TransformerConfig { d_model: d, heads, enc_layers: 1, dec_layers: 1, ff: 2 * d, dropout: 0.0 }
    }

    fn tf_model(seed: u64) -> Model {
        build_model(&ArchConfig::Transformer(tf_config(8, 2)), Standardizer::identity(), seed)
            .unwrap()
    }

    fn wave_input(b: usize) -> Tensor {
        let data: Vec<f64> =
            (0..b * INPUT_STEPS * 3).map(|i| (i as f64 * 0.017).sin() * 0.6).collect();
        Tensor::new(&[b, INPUT_STEPS, 3], data).unwrap()
    }

    fn wave_target(b: usize) -> Tensor {
        let data: Vec<f64> =
            (0..b * TARGET_STEPS * 3).map(|i| (i as f64 * 0.05).cos() * 0.4).collect();
        Tensor::new(&[b, TARGET_STEPS, 3], data).unwrap()
    }

    #[test]
    fn forward_shapes_both_variants() {
        for b in [1usize, 7] {
            let x = wave_input(b);
            let t = wave_target(b);
            let mut g = Graph::new();
            let out = tf_model(0).forward(&mut g, &x, &ForwardMode::Val { target: &t }).unwrap();
            assert_eq!(g.shape(out.forecast), &[b, TARGET_STEPS, 3]);

            let ce = build_model(
                &ArchConfig::TransformerCe(TransformerCeConfig {
                    d_model: 8,
                    heads: 2,
                    enc_layers: 1,
                    dec_layers: 1,
                    ff: 16,
                    dropout: 0.0,
                    embed_layers: 2,
                    embed_kernel: 3,
                }),
                Standardizer::identity(),
                0,
            )
            .unwrap();
            let mut g = Graph::new();
            let out = ce.forward(&mut g, &x, &ForwardMode::Eval).unwrap();
            assert_eq!(g.shape(out.forecast), &[b, TARGET_STEPS, 3]);
        }
    }

    #[test]
    fn eval_is_deterministic_and_differs_from_teacher_forcing() {
        let model = tf_model(3);
        let x = wave_input(2);
        let t = wave_target(2);
        let run_eval = || {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &x, &ForwardMode::Eval).unwrap();
            g.value(out.forecast).data().to_vec()
        };
        let e1 = run_eval();
        let e2 = run_eval();
        assert_eq!(e1, e2);

        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Val { target: &t }).unwrap();
        assert_ne!(g.value(out.forecast).data(), &e1[..]);
    }

    /// Changing teacher-forced target row j must leave forecast rows
    /// 0..=j bit-identical (row i only sees decoder inputs up to i, and
    /// input i+1 is target row i) and must change some later row.
    #[test]
    fn decoder_mask_blocks_future_targets() {
        let model = tf_model(1);
        let x = wave_input(1);
        let t = wave_target(1);
        let j = 20;

        let run = |target: &Tensor| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &x, &ForwardMode::Val { target }).unwrap();
            g.value(out.forecast).data().to_vec()
        };
        let base = run(&t);
        let mut bumped = t.data().to_vec();
        bumped[j * 3 + 1] += 5.0;
        let t2 = Tensor::new(&[1, TARGET_STEPS, 3], bumped).unwrap();
        let changed = run(&t2);

        for row in 0..=j {
            for c in 0..3 {
                assert_eq!(
                    base[row * 3 + c].to_bits(),
                    changed[row * 3 + c].to_bits(),
                    "forecast row {row} saw future target row {j}"
                );
            }
        }
        let later_diff: f64 = ((j + 1)..TARGET_STEPS)
            .flat_map(|r| (0..3).map(move |c| r * 3 + c))
            .map(|i| (base[i] - changed[i]).abs())
            .fold(0.0, f64::max);
        assert!(later_diff > 1e-9, "future rows should react to their teacher input");
    }

    /// With cross-attention values silenced, the decoder sees nothing of
    /// the input except its seed row: forecast row 0 is invariant to every
    /// input row but the last, and reacts to the last.
    #[test]
    fn decoder_is_seeded_with_last_input_row() {
        let model = tf_model(5);
        for li in 0..1 {
            // Zero the value path of cross-attention (weights and bias).
            let p = model.params();
            p.find(&format!("tf.dec.l{li}.cross.wv.w")).unwrap().set_value(Tensor::zeros(&[8, 8]));
            p.find(&format!("tf.dec.l{li}.cross.wv.b")).unwrap().set_value(Tensor::zeros(&[8]));
            p.find(&format!("tf.dec.l{li}.cross.wo.b")).unwrap().set_value(Tensor::zeros(&[8]));
        }
        let x = wave_input(1);
        let t = wave_target(1);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, x, &ForwardMode::Val { target: &t }).unwrap();
            g.value(out.forecast).data()[..3].to_vec()
        };
        let base = run(&x);

        let mut inner = x.data().to_vec();
        for step in 0..INPUT_STEPS - 1 {
            inner[step * 3] += 0.5;
        }
        let x_inner = Tensor::new(&[1, INPUT_STEPS, 3], inner).unwrap();
        assert_eq!(base, run(&x_inner), "row 0 must depend on the seed row only");

        let mut last = x.data().to_vec();
        last[(INPUT_STEPS - 1) * 3] += 0.5;
        let x_last = Tensor::new(&[1, INPUT_STEPS, 3], last).unwrap();
        assert_ne!(base, run(&x_last), "row 0 must react to the seed row");
    }

    /// A k=1 single-layer convolutional embedding is the same function as
    /// the linear embedding; with copied weights the two variants agree.
    #[test]
    fn k1_conv_embedding_equals_linear_embedding() {
        let tf = tf_model(7);
        let ce = build_model(
            &ArchConfig::TransformerCe(TransformerCeConfig {
                d_model: 8,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                ff: 16,
                dropout: 0.0,
                embed_layers: 1,
                embed_kernel: 1,
            }),
            Standardizer::identity(),
            7,
        )
        .unwrap();

        // Copy every shared parameter, then derive the conv kernel from
        // the linear embedding: w_conv[o][i][0] = w_lin[i][o].
        for p in ce.params().iter() {
            let name = p.name();
            if let Some(src) = tf.params().find(&name) {
                p.set_value(src.value());
            }
        }
        let lin_w = tf.params().find("tf.enc.embed.w").unwrap().value();
        let mut conv_w = Tensor::zeros(&[8, 3, 1]);
        for i in 0..3 {
            for o in 0..8 {
                conv_w.data_mut()[o * 3 + i] = lin_w.data()[i * 8 + o];
            }
        }
        ce.params().find("tf.enc.embed.c0.w").unwrap().set_value(conv_w);
        let lin_b = tf.params().find("tf.enc.embed.b").unwrap().value();
        ce.params().find("tf.enc.embed.c0.b").unwrap().set_value(lin_b);

        let x = wave_input(2);
        let t = wave_target(2);
        let run = |m: &Model| {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &x, &ForwardMode::Val { target: &t }).unwrap();
            g.value(out.forecast).data().to_vec()
        };
        let (a, b) = (run(&tf), run(&ce));
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "max deviation {diff}");
    }

    /// The convolutional embedding is causal: bumping input step t leaves
    /// embedding positions before t bit-identical and changes position t.
    #[test]
    fn conv_embedding_does_not_leak_future_steps() {
        let config = TransformerCeConfig {
            d_model: 6,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff: 12,
            dropout: 0.0,
            embed_layers: 2,
            embed_kernel: 3,
        };
        let mut rng = threetank_sim::rng::stream_rng(11, threetank_sim::rng::INIT_STREAM);
        let net = TransformerCe::new(&config, &mut rng).unwrap();
        let x = wave_input(1);
        let t = 100;
        let mut bumped = x.data().to_vec();
        bumped[t * 3 + 2] += 1.0;
        let x2 = Tensor::new(&[1, INPUT_STEPS, 3], bumped).unwrap();

        let embed = |x: &Tensor| {
            let mut g = Graph::new();
            let e = net.embed_only(&mut g, x).unwrap();
            g.value(e).data().to_vec()
        };
        let (a, b) = (embed(&x), embed(&x2));
        let d = 6;
        for pos in 0..t {
            for ch in 0..d {
                assert_eq!(
                    a[pos * d + ch].to_bits(),
                    b[pos * d + ch].to_bits(),
                    "embedding position {pos} saw input step {t}"
                );
            }
        }
        let at_t: f64 =
            (0..d).map(|ch| (a[t * d + ch] - b[t * d + ch]).abs()).fold(0.0, f64::max);
        assert!(at_t > 1e-12, "position {t} must react to its own input");
    }

    /// Zeroing the readout head forces a zero forecast in both modes, so
    /// the plumbing after the head has no hidden bias.
    #[test]
    fn zero_head_gives_zero_forecast() {
        let model = tf_model(9);
        model.params().find("tf.head.w").unwrap().set_value(Tensor::zeros(&[8, 3]));
        model.params().find("tf.head.b").unwrap().set_value(Tensor::zeros(&[3]));
        let x = wave_input(1);
        let t = wave_target(1);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Val { target: &t }).unwrap();
        assert!(g.value(out.forecast).data().iter().all(|&v| v == 0.0));
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Eval).unwrap();
        assert!(g.value(out.forecast).data().iter().all(|&v| v == 0.0));
    }
}
