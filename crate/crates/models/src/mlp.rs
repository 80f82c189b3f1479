//! Fully connected baseline: the input window is flattened to 750
//! features and mapped through 1-3 ReLU hidden layers to the 150 forecast
//! values.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threetank_autodiff::{Graph, ParamSet, Tensor};
use threetank_sim::{INPUT_STEPS, TARGET_STEPS};

use crate::layers::{dropout, Linear};
use crate::{check_input_shape, ArchKind, ForwardMode, MlpConfig, Net, NetOutput, Result};

const IN_DIM: usize = INPUT_STEPS * 3;
const OUT_DIM: usize = TARGET_STEPS * 3;

pub struct Mlp {
    layers: Vec<Linear>,
    out: Linear,
    dropout_p: f64,
    dropout_rng: RefCell<ChaCha8Rng>,
    params: ParamSet,
}

impl Mlp {
    pub fn new(config: &MlpConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut fan_in = IN_DIM;
        for (i, &h) in config.hidden.iter().enumerate() {
            layers.push(Linear::new(&mut params, rng, &format!("mlp.h{i}"), fan_in, h));
            fan_in = h;
        }
        let out = Linear::new(&mut params, rng, "mlp.out", fan_in, OUT_DIM);
        let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
        Ok(Self { layers, out, dropout_p: config.dropout, dropout_rng, params })
    }
}

impl Net for Mlp {
    fn kind(&self) -> ArchKind {
        ArchKind::Mlp
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, g: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput> {
        let b = check_input_shape("mlp", input.shape())?;
        let x = g.constant(input.clone());
        let mut h = g.reshape(x, &[b, IN_DIM])?;
        let rng = &mut *self.dropout_rng.borrow_mut();
        for layer in &self.layers {
            h = layer.forward(g, h)?;
            h = g.relu(h)?;
            h = dropout(g, h, self.dropout_p, mode.is_train(), rng)?;
        }
        let y = self.out.forward(g, h)?;
        let forecast = g.reshape(y, &[b, TARGET_STEPS, 3])?;
        Ok(NetOutput { forecast, aux_loss: None })
    }
}
