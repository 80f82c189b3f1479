//! Recurrent forecasters. [`Gru`] encodes the window and emits the whole
//! forecast from the final hidden state in one linear readout. [`GruAr`]
//! shares the encoder but decodes autoregressively, one step at a time,
//! with teacher forcing during training and its own predictions at test
//! time.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threetank_autodiff::{Graph, NodeId, ParamSet, Tensor};
use threetank_sim::{INPUT_STEPS, TARGET_STEPS};

use crate::layers::{dropout, GruLayer, Linear};
use crate::{
    check_input_shape, check_target_shape, ArchKind, ForwardMode, GruArConfig, GruConfig, Net,
    NetOutput, Result,
};

/// Stacked GRU layers run over a full sequence. Returns the final hidden
/// state of every layer; when `keep_top_sequence` is set, also the top
/// layer's full output sequence `[B, T, h]`.
struct Encoded {
    finals: Vec<NodeId>,
}

fn encode_sequence(
    g: &mut Graph,
    layers: &[GruLayer],
    input: NodeId,
    batch: usize,
    steps: usize,
    dropout_p: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Encoded> {
    let mut seq = input;
    let mut finals = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let hd = layer.hidden;
        let proj = layer.project_sequence(g, seq)?; // [B, T, 3h]
        let mut h = g.constant(Tensor::zeros(&[batch, hd]));
        let last_layer = li + 1 == layers.len();
        let mut outs = Vec::new();
        for t in 0..steps {
            let xp = g.slice(proj, 1, t, 1)?;
            let xp = g.reshape(xp, &[batch, 3 * hd])?;
            h = layer.step(g, xp, h)?;
            if !last_layer {
                outs.push(g.reshape(h, &[batch, 1, hd])?);
            }
        }
        finals.push(h);
        if !last_layer {
            seq = g.concat(&outs, 1)?;
            seq = dropout(g, seq, dropout_p, train, rng)?;
        }
    }
    Ok(Encoded { finals })
}

fn make_layers(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    layers: usize,
) -> Vec<GruLayer> {
    (0..layers)
        .map(|i| {
            let in_dim = if i == 0 { input_dim } else { hidden };
            GruLayer::new(params, rng, &format!("{prefix}.l{i}"), in_dim, hidden)
        })
        .collect()
}

pub struct Gru {
    layers: Vec<GruLayer>,
    head: Linear,
    dropout_p: f64,
    dropout_rng: RefCell<ChaCha8Rng>,
    params: ParamSet,
}

impl Gru {
    pub fn new(config: &GruConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layers = make_layers(&mut params, rng, "gru", 3, config.hidden, config.layers);
        let head = Linear::new(&mut params, rng, "gru.head", config.hidden, TARGET_STEPS * 3);
        let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
        Ok(Self { layers, head, dropout_p: config.dropout, dropout_rng, params })
    }
}

impl Net for Gru {
    fn kind(&self) -> ArchKind {
        ArchKind::Gru
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, g: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput> {
        let b = check_input_shape("gru", input.shape())?;
        let x = g.constant(input.clone());
        let rng = &mut *self.dropout_rng.borrow_mut();
        let enc = encode_sequence(
            g,
            &self.layers,
            x,
            b,
            INPUT_STEPS,
            self.dropout_p,
            mode.is_train(),
            rng,
        )?;
        let top = *enc.finals.last().expect("at least one layer");
        let y = self.head.forward(g, top)?;
        let forecast = g.reshape(y, &[b, TARGET_STEPS, 3])?;
        Ok(NetOutput { forecast, aux_loss: None })
    }
}

pub struct GruAr {
    layers: Vec<GruLayer>,
    head: Linear,
    dropout_p: f64,
    dropout_rng: RefCell<ChaCha8Rng>,
    params: ParamSet,
}

impl GruAr {
    pub fn new(config: &GruArConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layers = make_layers(&mut params, rng, "gru_ar", 3, config.hidden, config.layers);
        let head = Linear::new(&mut params, rng, "gru_ar.head", config.hidden, 3);
        let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
        Ok(Self { layers, head, dropout_p: config.dropout, dropout_rng, params })
    }
}

impl Net for GruAr {
    fn kind(&self) -> ArchKind {
        ArchKind::GruAr
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, g: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput> {
        let b = check_input_shape("gru_ar", input.shape())?;
        let x = g.constant(input.clone());
        let rng = &mut *self.dropout_rng.borrow_mut();
        let train = mode.is_train();

        let enc =
            encode_sequence(g, &self.layers, x, b, INPUT_STEPS, self.dropout_p, train, rng)?;
        let mut states = enc.finals;

        let teacher = match mode.teacher_target() {
            Some(t) => {
                check_target_shape("gru_ar target", b, t.shape())?;
                Some(g.constant((*t).clone()))
            }
            None => None,
        };

        // First decoder input: the last observed row.
        let last_row = g.slice(x, 1, INPUT_STEPS - 1, 1)?;
        let mut step_in = g.reshape(last_row, &[b, 3])?;

        let mut rows = Vec::with_capacity(TARGET_STEPS);
        for k in 0..TARGET_STEPS {
            let mut below = step_in;
            for (li, layer) in self.layers.iter().enumerate() {
                let xp = layer.project_step(g, below)?;
                let h = layer.step(g, xp, states[li])?;
                states[li] = h;
                below = h;
                if li + 1 < self.layers.len() {
                    below = dropout(g, below, self.dropout_p, train, rng)?;
                }
            }
            let pred = self.head.forward(g, below)?; // [B, 3]
            rows.push(g.reshape(pred, &[b, 1, 3])?);

            if k + 1 < TARGET_STEPS {
                step_in = match teacher {
                    Some(t) => {
                        let row = g.slice(t, 1, k, 1)?;
                        g.reshape(row, &[b, 3])?
                    }
                    None => pred,
                };
            }
        }
        let forecast = g.concat(&rows, 1)?;
        Ok(NetOutput { forecast, aux_loss: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{build_model, ArchConfig, Model, Standardizer};

    fn gru_model(hidden: usize, layers: usize, seed: u64) -> Model {
        build_model(
            &ArchConfig::Gru(GruConfig { hidden, layers, dropout: 0.0 }),
            Standardizer::identity(),
            seed,
        )
        .unwrap()
    }

    fn gru_ar_model(hidden: usize, layers: usize, seed: u64) -> Model {
        build_model(
            &ArchConfig::GruAr(GruArConfig { hidden, layers, dropout: 0.0 }),
            Standardizer::identity(),
            seed,
        )
        .unwrap()
    }

    fn wave_input(b: usize) -> Tensor {
        let data: Vec<f64> =
            (0..b * INPUT_STEPS * 3).map(|i| (i as f64 * 0.013).sin() * 0.5).collect();
        Tensor::new(&[b, INPUT_STEPS, 3], data).unwrap()
    }

    #[test]
    fn forward_shapes_for_both_variants() {
        for b in [1usize, 7] {
            let x = wave_input(b);
            let mut g = Graph::new();
            let out = gru_model(6, 2, 0).forward(&mut g, &x, &ForwardMode::Eval).unwrap();
            assert_eq!(g.shape(out.forecast), &[b, TARGET_STEPS, 3]);

            let mut g = Graph::new();
            let out = gru_ar_model(6, 2, 0).forward(&mut g, &x, &ForwardMode::Eval).unwrap();
            assert_eq!(g.shape(out.forecast), &[b, TARGET_STEPS, 3]);
        }
    }

    /// Zero input weights and zero biases gate the state shut: the hidden
    /// state never leaves zero, so the forecast is exactly the head bias.
    #[test]
    fn degenerate_gating_keeps_state_at_zero() {
        let model = gru_model(5, 1, 2);
        let p = model.params();
        p.find("gru.l0.wx").unwrap().set_value(Tensor::zeros(&[3, 15]));
        p.find("gru.l0.bx").unwrap().set_value(Tensor::zeros(&[15]));
        p.find("gru.l0.bh").unwrap().set_value(Tensor::zeros(&[15]));
        // Recurrent weights stay random: with h = 0 they contribute nothing.
        let bias: Vec<f64> = (0..TARGET_STEPS * 3).map(|i| i as f64 * 0.01).collect();
        p.find("gru.head.b").unwrap().set_value(Tensor::new(&[TARGET_STEPS * 3], bias.clone()).unwrap());
        p.find("gru.head.w").unwrap().set_value(Tensor::filled(&[5, TARGET_STEPS * 3], 3.0));

        let mut g = Graph::new();
        let out = model.forward(&mut g, &wave_input(2), &ForwardMode::Eval).unwrap();
        let got = g.value(out.forecast).data();
        for bi in 0..2 {
            for (i, &want) in bias.iter().enumerate() {
                assert_eq!(got[bi * bias.len() + i], want);
            }
        }
    }

    /// The encoder is order-sensitive: swapping two input rows changes
    /// the forecast, whereas any pooling-style summary would be exactly
    /// invariant. (Rows from the distant past decay below measurement of
    /// the final state, so probe rows the recurrence still remembers.)
    #[test]
    fn input_order_matters() {
        let model = gru_model(8, 1, 4);
        let mut base = wave_input(1).data().to_vec();
        for c in 0..3 {
            base[240 * 3 + c] = 1.0;
            base[248 * 3 + c] = -1.0;
        }
        let mut swapped = base.clone();
        for c in 0..3 {
            swapped.swap(240 * 3 + c, 248 * 3 + c);
        }
        let x = Tensor::new(&[1, INPUT_STEPS, 3], base).unwrap();
        let x2 = Tensor::new(&[1, INPUT_STEPS, 3], swapped).unwrap();

        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let out = model.forward(&mut g, x, &ForwardMode::Eval).unwrap();
            g.value(out.forecast).data().to_vec()
        };
        let (a, b) = (run(&x), run(&x2));
        let diff =
            a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "swapping early rows changed nothing (max diff {diff})");
    }

    /// Pass-through construction: with the update gate forced open, no
    /// recurrence, and an identity head, the decoder output at step k is
    /// tanh(0.1 * input_k). That pins both teacher forcing (inputs are
    /// target rows) and self-feeding (inputs are previous predictions).
    #[test]
    fn decoder_feeding_rules_hold_exactly() {
        let model = gru_ar_model(3, 1, 0);
        let p = model.params();
        let mut wx = Tensor::zeros(&[3, 9]);
        for c in 0..3 {
            wx.data_mut()[c * 9 + 6 + c] = 0.1; // candidate block = 0.1 * I
        }
        p.find("gru_ar.l0.wx").unwrap().set_value(wx);
        p.find("gru_ar.l0.un").unwrap().set_value(Tensor::zeros(&[3, 9]));
        let mut bx = Tensor::zeros(&[9]);
        for i in 0..3 {
            bx.data_mut()[i] = 50.0; // update gate saturated at 1
        }
        p.find("gru_ar.l0.bx").unwrap().set_value(bx);
        p.find("gru_ar.l0.bh").unwrap().set_value(Tensor::zeros(&[9]));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        p.find("gru_ar.head.w").unwrap().set_value(eye);
        p.find("gru_ar.head.b").unwrap().set_value(Tensor::zeros(&[3]));

        let x = wave_input(1);
        let last_row: Vec<f64> = (0..3).map(|c| x.data()[(INPUT_STEPS - 1) * 3 + c]).collect();
        let tgt_data: Vec<f64> =
            (0..TARGET_STEPS * 3).map(|i| ((i as f64) * 0.07).cos() * 0.3).collect();
        let target = Tensor::new(&[1, TARGET_STEPS, 3], tgt_data.clone()).unwrap();

        // Teacher-forced: pred_0 = tanh(.1 * last input row), pred_k =
        // tanh(.1 * target_{k-1}).
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Val { target: &target }).unwrap();
        let pred = g.value(out.forecast).data().to_vec();
        for c in 0..3 {
            let want = (0.1 * last_row[c]).tanh();
            assert!((pred[c] - want).abs() < 1e-12, "step 0 ch {c}");
        }
        for k in 1..TARGET_STEPS {
            for c in 0..3 {
                let want = (0.1 * tgt_data[(k - 1) * 3 + c]).tanh();
                assert!(
                    (pred[k * 3 + c] - want).abs() < 1e-12,
                    "teacher step {k} ch {c}: {} vs {want}",
                    pred[k * 3 + c]
                );
            }
        }

        // Self-fed: pred_k = tanh(.1 * pred_{k-1}).
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Eval).unwrap();
        let pred = g.value(out.forecast).data().to_vec();
        let mut prev = last_row.clone();
        for k in 0..TARGET_STEPS {
            let cur: Vec<f64> = prev.iter().map(|&v| (0.1 * v).tanh()).collect();
            for c in 0..3 {
                assert!(
                    (pred[k * 3 + c] - cur[c]).abs() < 1e-12,
                    "eval step {k} ch {c}"
                );
            }
            prev = cur;
        }
    }

    /// Teacher-forced and self-fed decoding genuinely differ on an
    /// untrained model.
    #[test]
    fn teacher_forcing_changes_the_forecast() {
        let model = gru_ar_model(8, 2, 5);
        let x = wave_input(2);
        let target = Tensor::filled(&[2, TARGET_STEPS, 3], 0.9);
        let mut g1 = Graph::new();
        let o1 = model.forward(&mut g1, &x, &ForwardMode::Val { target: &target }).unwrap();
        let mut g2 = Graph::new();
        let o2 = model.forward(&mut g2, &x, &ForwardMode::Eval).unwrap();
        assert_ne!(g1.value(o1.forecast).data(), g2.value(o2.forecast).data());
    }

    /// With teacher forcing, a loss that reads only decode step k gets no
    /// gradient from later decode steps: their parameters' gradient equals
    /// the gradient computed when later steps are never built.
    #[test]
    fn loss_on_step_k_ignores_later_steps() {
        let model = gru_ar_model(4, 1, 6);
        let x = wave_input(1);
        let target = Tensor::filled(&[1, TARGET_STEPS, 3], 0.2);
        let k = 10;

        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Val { target: &target }).unwrap();
        let step_k = g.slice(out.forecast, 1, k, 1).unwrap();
        let loss = g.mean_all(step_k).unwrap();
        model.params().zero_grads();
        g.backward(loss).unwrap();

        // The forecast node mixes all steps via concat; the gradient
        // reaching rows other than k must be exactly zero.
        let fg = g.grad(out.forecast).unwrap();
        for step in 0..TARGET_STEPS {
            for c in 0..3 {
                let v = fg.data()[step * 3 + c];
                if step == k {
                    assert!(v != 0.0, "loss must read step {k}");
                } else {
                    assert_eq!(v, 0.0, "unexpected gradient at step {step}");
                }
            }
        }
        // Parameter-level witness: the head bias feeds every decode step
        // with coefficient 1, so its gradient is exactly the forecast
        // gradient summed over steps: 1/3 per channel from step k alone.
        // Any leakage from later steps would inflate it.
        let bias_grad = model.params().find("gru_ar.head.b").unwrap().grad();
        for c in 0..3 {
            assert!(
                (bias_grad.data()[c] - 1.0 / 3.0).abs() < 1e-15,
                "head bias grad {} != 1/3",
                bias_grad.data()[c]
            );
        }
    }
}
