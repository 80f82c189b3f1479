//! Temporal convolutional forecasters. [`Tcn`] stacks residual blocks of
//! dilated causal convolutions (block i uses dilation 2^i, so the last
//! step of the output sees exactly 1 + (k-1) * (2^blocks - 1) input
//! steps). [`TcnFae`] reuses the same encoder, squeezes the final step
//! through a small bottleneck, and decodes both a forecast and a
//! reconstruction of the input; the reconstruction error joins the
//! training loss as a weighted auxiliary term.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threetank_autodiff::{Graph, NodeId, Param, ParamSet, Tensor};
use threetank_sim::{INPUT_STEPS, TARGET_STEPS};

use crate::layers::{dropout, Linear};
use crate::{
    check_input_shape, check_target_shape, init, ArchKind, ForwardMode, Net, NetOutput, Result,
    TcnConfig, TcnFaeConfig,
};

const IN_DIM: usize = INPUT_STEPS * 3;
const OUT_DIM: usize = TARGET_STEPS * 3;

/// One residual block: dilated causal conv -> ReLU -> dropout, added to a
/// skip path (1x1 conv when the channel count changes).
struct TcnBlock {
    w: Param,
    b: Param,
    skip: Option<(Param, Param)>,
    dilation: usize,
}

impl TcnBlock {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let w = params.add(
            format!("{prefix}.w"),
            init::uniform_fan_in(rng, &[c_out, c_in, kernel], c_in * kernel),
        );
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
        let skip = (c_in != c_out).then(|| {
            let sw = params.add(
                format!("{prefix}.skip.w"),
                init::uniform_fan_in(rng, &[c_out, c_in, 1], c_in),
            );
            let sb = params.add(format!("{prefix}.skip.b"), Tensor::zeros(&[c_out]));
            (sw, sb)
        });
        Self { w, b, skip, dilation }
    }

    fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        dropout_p: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = g.causal_conv1d(x, w, b, self.dilation)?;
        let y = g.relu(y)?;
        let y = dropout(g, y, dropout_p, train, rng)?;
        let s = match &self.skip {
            Some((sw, sb)) => {
                let sw = g.param(sw);
                let sb = g.param(sb);
                g.causal_conv1d(x, sw, sb, 1)?
            }
            None => x,
        };
        Ok(g.add(y, s)?)
    }
}

/// Shared encoder: `[B, 250, 3]` input to `[B, C]` features of the final
/// time step.
struct TcnEncoder {
    blocks: Vec<TcnBlock>,
    channels: usize,
}

impl TcnEncoder {
    fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        config: &TcnConfig,
    ) -> Self {
        let blocks = (0..config.blocks)
            .map(|i| {
                let c_in = if i == 0 { 3 } else { config.channels };
                TcnBlock::new(
                    params,
                    rng,
                    &format!("{prefix}.b{i}"),
                    c_in,
                    config.channels,
                    config.kernel,
                    1 << i,
                )
            })
            .collect();
        Self { blocks, channels: config.channels }
    }

    fn last_step_features(
        &self,
        g: &mut Graph,
        input: NodeId,
        batch: usize,
        dropout_p: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let mut x = g.transpose(input, 1, 2)?; // [B, 3, T]
        for block in &self.blocks {
            x = block.forward(g, x, dropout_p, train, rng)?;
        }
        let last = g.slice(x, 2, INPUT_STEPS - 1, 1)?; // [B, C, 1]
        Ok(g.reshape(last, &[batch, self.channels])?)
    }
}

pub struct Tcn {
    encoder: TcnEncoder,
    head: Linear,
    dropout_p: f64,
    dropout_rng: RefCell<ChaCha8Rng>,
    params: ParamSet,
}

impl Tcn {
    pub fn new(config: &TcnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let encoder = TcnEncoder::new(&mut params, rng, "tcn", config);
        let head = Linear::new(&mut params, rng, "tcn.head", config.channels, OUT_DIM);
        let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
        Ok(Self { encoder, head, dropout_p: config.dropout, dropout_rng, params })
    }
}

impl Net for Tcn {
    fn kind(&self) -> ArchKind {
        ArchKind::Tcn
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, g: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput> {
        let b = check_input_shape("tcn", input.shape())?;
        let x = g.constant(input.clone());
        let rng = &mut *self.dropout_rng.borrow_mut();
        let feat = self.encoder.last_step_features(
            g,
            x,
            b,
            self.dropout_p,
            mode.is_train(),
            rng,
        )?;
        let y = self.head.forward(g, feat)?;
        let forecast = g.reshape(y, &[b, TARGET_STEPS, 3])?;
        Ok(NetOutput { forecast, aux_loss: None })
    }
}

pub struct TcnFae {
    encoder: TcnEncoder,
    to_latent: Linear,
    forecast_l1: Linear,
    forecast_l2: Linear,
    recon_l1: Linear,
    recon_l2: Linear,
    recon_weight: f64,
    dropout_p: f64,
    dropout_rng: RefCell<ChaCha8Rng>,
    params: ParamSet,
}

impl TcnFae {
    pub fn new(config: &TcnFaeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let encoder = TcnEncoder::new(&mut params, rng, "tcn_fae.enc", &config.encoder());
        let to_latent =
            Linear::new(&mut params, rng, "tcn_fae.latent", config.channels, config.latent);
        let dh = config.decoder_hidden;
        let forecast_l1 = Linear::new(&mut params, rng, "tcn_fae.fdec.l1", config.latent, dh);
        let forecast_l2 = Linear::new(&mut params, rng, "tcn_fae.fdec.l2", dh, OUT_DIM);
        let recon_l1 = Linear::new(&mut params, rng, "tcn_fae.rdec.l1", config.latent, dh);
        let recon_l2 = Linear::new(&mut params, rng, "tcn_fae.rdec.l2", dh, IN_DIM);
        let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
        Ok(Self {
            encoder,
            to_latent,
            forecast_l1,
            forecast_l2,
            recon_l1,
            recon_l2,
            recon_weight: config.recon_weight,
            dropout_p: config.dropout,
            dropout_rng,
            params,
        })
    }

    fn latent(
        &self,
        g: &mut Graph,
        input: NodeId,
        batch: usize,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let feat =
            self.encoder.last_step_features(g, input, batch, self.dropout_p, train, rng)?;
        self.to_latent.forward(g, feat)
    }

    /// Reconstruction branch: `[B, 250, 3]` -> flat `[B, 750]`, in the
    /// same standardized units as the input.
    pub fn reconstruct(&self, g: &mut Graph, input: &Tensor) -> Result<NodeId> {
        let b = check_input_shape("tcn_fae", input.shape())?;
        let x = g.constant(input.clone());
        let rng = &mut *self.dropout_rng.borrow_mut();
        let z = self.latent(g, x, b, false, rng)?;
        let h = self.recon_l1.forward(g, z)?;
        let h = g.relu(h)?;
        self.recon_l2.forward(g, h)
    }
}

impl Net for TcnFae {
    fn kind(&self) -> ArchKind {
        ArchKind::TcnFae
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, g: &mut Graph, input: &Tensor, mode: &ForwardMode) -> Result<NetOutput> {
        let b = check_input_shape("tcn_fae", input.shape())?;
        if let Some(t) = mode.teacher_target() {
            check_target_shape("tcn_fae target", b, t.shape())?;
        }
        let x = g.constant(input.clone());
        let rng = &mut *self.dropout_rng.borrow_mut();
        let z = self.latent(g, x, b, mode.is_train(), rng)?;

        let h = self.forecast_l1.forward(g, z)?;
        let h = g.relu(h)?;
        let y = self.forecast_l2.forward(g, h)?;
        let forecast = g.reshape(y, &[b, TARGET_STEPS, 3])?;

        // The reconstruction term only matters for the training loss; skip
        // the whole branch otherwise (and when its weight is zero, so the
        // branch provably contributes no gradient).
        let aux_loss = if mode.is_train() && self.recon_weight != 0.0 {
            let h = self.recon_l1.forward(g, z)?;
            let h = g.relu(h)?;
            let recon = self.recon_l2.forward(g, h)?;
            let flat_in = g.reshape(x, &[b, IN_DIM])?;
            let mse = g.mse_loss(recon, flat_in)?;
            Some(g.mul_scalar(mse, self.recon_weight)?)
        } else {
            None
        };
        Ok(NetOutput { forecast, aux_loss })
    }
}
