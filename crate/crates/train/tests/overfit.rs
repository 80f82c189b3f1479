//! Plumbing sanity: every architecture can drive the forecast error on a
//! single small batch below 1e-3 within 2000 optimizer steps at the default
//! learning rate. Failures here point at broken gradients or update wiring,
//! not at capacity.

mod common;

use common::wave_sample;
use threetank_autodiff::{Graph, Tensor};
use threetank_models::tcn::TcnFae;
use threetank_models::{
    build_model, ArchConfig, ForwardMode, GruArConfig, GruConfig, MlpConfig, Net, Standardizer,
    TcnConfig, TcnFaeConfig, TransformerCeConfig, TransformerConfig,
};
use threetank_sim::rng::{stream_rng, INIT_STREAM};
use threetank_train::Adam;

fn overfit_single_batch(arch: ArchConfig) {
    let samples = vec![wave_sample(0.0, 0.4), wave_sample(1.3, 0.4), wave_sample(2.6, 0.4)];
    let idx = [0usize, 1, 2];
    let norm = Standardizer::fit(&samples).unwrap();
    let x = norm.batch_input(&samples, &idx);
    let y = norm.batch_target(&samples, &idx);
    let model = build_model(&arch, norm, 42).unwrap();
    let mut adam = Adam::new(model.params());
    let mut last = f64::INFINITY;
    for _step in 0..2000 {
        model.params().zero_grads();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Train { target: &y }).unwrap();
        let target = g.constant(y.clone());
        let mse = g.mse_loss(out.forecast, target).unwrap();
        let objective = match out.aux_loss {
            Some(aux) => g.add(mse, aux).unwrap(),
            None => mse,
        };
        last = g.value(mse).item();
        if last < 1e-3 {
            return;
        }
        g.backward(objective).unwrap();
        adam.step(model.params(), 1e-3).unwrap();
    }
    panic!("{:?}: single-batch forecast MSE still {last:.3e} after 2000 steps", model.kind());
}

#[test]
fn mlp_overfits_one_batch() {
    overfit_single_batch(ArchConfig::Mlp(MlpConfig { hidden: vec![32], dropout: 0.0 }));
}

#[test]
fn gru_overfits_one_batch() {
    overfit_single_batch(ArchConfig::Gru(GruConfig { hidden: 8, layers: 1, dropout: 0.0 }));
}

#[test]
fn gru_ar_overfits_one_batch() {
    overfit_single_batch(ArchConfig::GruAr(GruArConfig { hidden: 8, layers: 1, dropout: 0.0 }));
}

#[test]
fn tcn_overfits_one_batch() {
    overfit_single_batch(ArchConfig::Tcn(TcnConfig {
        channels: 8,
        kernel: 3,
        blocks: 3,
        dropout: 0.0,
    }));
}

#[test]
fn tcn_fae_overfits_one_batch() {
    overfit_single_batch(ArchConfig::TcnFae(TcnFaeConfig {
        channels: 8,
        kernel: 3,
        blocks: 3,
        latent: 4,
        decoder_hidden: 16,
        recon_weight: 0.5,
        dropout: 0.0,
    }));
}

#[test]
fn transformer_overfits_one_batch() {
    overfit_single_batch(ArchConfig::Transformer(TransformerConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff: 16,
        dropout: 0.0,
    }));
}

#[test]
fn transformer_ce_overfits_one_batch() {
    overfit_single_batch(ArchConfig::TransformerCe(TransformerCeConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff: 16,
        dropout: 0.0,
        embed_layers: 2,
        embed_kernel: 3,
    }));
}

#[test]
fn reconstruction_path_alone_overfits_a_simple_batch() {
    let cfg = TcnFaeConfig {
        channels: 4,
        kernel: 3,
        blocks: 2,
        latent: 4,
        decoder_hidden: 16,
        recon_weight: 0.5,
        dropout: 0.0,
    };
    let mut rng = stream_rng(42, INIT_STREAM);
    let fae = TcnFae::new(&cfg, &mut rng).unwrap();

    // Two near-constant series with distinct per-sample offsets, so the
    // latent code has to carry real information.
    let mut data = Vec::with_capacity(2 * 250 * 3);
    for s in 0..2 {
        for _t in 0..250 {
            for c in 0..3 {
                data.push(0.3 + 0.2 * c as f64 + 0.1 * s as f64);
            }
        }
    }
    let x = Tensor::new(&[2, 250, 3], data.clone()).unwrap();
    let flat = Tensor::new(&[2, 750], data).unwrap();

    let mut adam = Adam::new(fae.params());
    let mut last = f64::INFINITY;
    for _step in 0..500 {
        fae.params().zero_grads();
        let mut g = Graph::new();
        let recon = fae.reconstruct(&mut g, &x).unwrap();
        let target = g.constant(flat.clone());
        let mse = g.mse_loss(recon, target).unwrap();
        last = g.value(mse).item();
        if last < 1e-3 {
            return;
        }
        g.backward(mse).unwrap();
        adam.step(fae.params(), 1e-2).unwrap();
    }
    panic!("reconstruction MSE still {last:.3e} after 500 steps");
}
