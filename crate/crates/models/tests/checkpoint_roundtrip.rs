//! Save/load fidelity: a checkpoint restores parameters and
//! normalization bit-for-bit, reproduces forecasts exactly, and refuses
//! mismatched or incomplete files.

use threetank_autodiff::testing::values;
use threetank_autodiff::{read_checkpoint, write_checkpoint, Graph, Tensor};
use threetank_models::{
    build_model, load_model, save_model, ArchConfig, ArchKind, ForwardMode, Model, Standardizer,
};
use threetank_sim::{INPUT_STEPS, TARGET_STEPS};

fn tmp_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("threetank-models-ckpt-tests");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn toy_config(kind: ArchKind) -> ArchConfig {
    use threetank_models::*;
    match kind {
        ArchKind::Mlp => ArchConfig::Mlp(MlpConfig { hidden: vec![5, 4], dropout: 0.1 }),
        ArchKind::Gru => ArchConfig::Gru(GruConfig { hidden: 4, layers: 2, dropout: 0.0 }),
        ArchKind::GruAr => ArchConfig::GruAr(GruArConfig { hidden: 4, layers: 1, dropout: 0.0 }),
        ArchKind::Tcn => {
            ArchConfig::Tcn(TcnConfig { channels: 4, kernel: 3, blocks: 2, dropout: 0.0 })
        }
        ArchKind::TcnFae => ArchConfig::TcnFae(TcnFaeConfig {
            channels: 4,
            kernel: 3,
            blocks: 2,
            latent: 3,
            decoder_hidden: 5,
            recon_weight: 0.25,
            dropout: 0.0,
        }),
        ArchKind::Transformer => ArchConfig::Transformer(TransformerConfig {
            d_model: 6,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff: 8,
            dropout: 0.0,
        }),
        ArchKind::TransformerCe => ArchConfig::TransformerCe(TransformerCeConfig {
            d_model: 6,
            heads: 3,
            enc_layers: 1,
            dec_layers: 1,
            ff: 8,
            dropout: 0.0,
            embed_layers: 1,
            embed_kernel: 3,
        }),
    }
}

fn eval_forecast(model: &Model, x: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, x, &ForwardMode::Eval).unwrap();
    g.value(out.forecast).data().to_vec()
}

#[test]
fn every_architecture_roundtrips_bit_exactly() {
    let x = Tensor::new(
        &[2, INPUT_STEPS, 3],
        values(11, 2 * INPUT_STEPS * 3).iter().map(|v| v * 0.7).collect(),
    )
    .unwrap();
    for (i, kind) in ArchKind::ALL.into_iter().enumerate() {
        let config = toy_config(kind);
        let norm = Standardizer { mean: [0.5, -1.25, 3.0], std: [2.0, 0.75, 1.5] };
        let model = build_model(&config, norm.clone(), 40 + i as u64).unwrap();
        let path = tmp_dir().join(format!("{}.ckpt", kind.cli_name()));
        save_model(&model, &path).unwrap();

        let back = load_model(&path).unwrap();
        assert_eq!(back.kind(), kind);
        assert_eq!(back.config, config);
        assert_eq!(back.seed, 40 + i as u64);
        assert_eq!(back.norm, norm);
        assert_eq!(back.parameter_count(), model.parameter_count());
        for p in model.params().iter() {
            let q = back.params().find(&p.name()).unwrap();
            let (a, b) = (p.value(), q.value());
            assert_eq!(a.shape(), b.shape(), "{}", p.name());
            for (va, vb) in a.data().iter().zip(b.data()) {
                assert_eq!(va.to_bits(), vb.to_bits(), "{}", p.name());
            }
        }
        let (fa, fb) = (eval_forecast(&model, &x), eval_forecast(&back, &x));
        assert_eq!(fa.len(), fb.len());
        for (va, vb) in fa.iter().zip(&fb) {
            assert_eq!(va.to_bits(), vb.to_bits(), "{} forecast drifted", kind.cli_name());
        }
    }
}

#[test]
fn mutated_parameters_survive_the_roundtrip() {
    let config = toy_config(ArchKind::Mlp);
    let model = build_model(&config, Standardizer::identity(), 1).unwrap();
    // Simulate training: overwrite a weight with awkward values.
    let w = model.params().find("mlp.h0.w").unwrap();
    let mut t = w.value();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = (0.1 + 0.2) * (i as f64) - 1.0 / 3.0;
    }
    w.set_value(t.clone());
    let path = tmp_dir().join("mutated.ckpt");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let tb = back.params().find("mlp.h0.w").unwrap().value();
    for (a, b) in t.data().iter().zip(tb.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn missing_parameter_entry_is_rejected() {
    let model = build_model(&toy_config(ArchKind::Gru), Standardizer::identity(), 2).unwrap();
    let path = tmp_dir().join("full.ckpt");
    save_model(&model, &path).unwrap();
    let ckpt = read_checkpoint(&path).unwrap();

    let dropped: Vec<(String, Tensor)> = ckpt
        .entries
        .iter()
        .filter(|(n, _)| n != "gru.l0.wx")
        .cloned()
        .collect();
    let bad = tmp_dir().join("dropped.ckpt");
    write_checkpoint(&bad, &ckpt.manifest, &dropped).unwrap();
    let err = load_model(&bad).unwrap_err().to_string();
    assert!(err.contains("gru.l0.wx"), "unhelpful error: {err}");
}

#[test]
fn unknown_entry_and_shape_mismatch_are_rejected() {
    let model = build_model(&toy_config(ArchKind::Gru), Standardizer::identity(), 3).unwrap();
    let path = tmp_dir().join("base.ckpt");
    save_model(&model, &path).unwrap();
    let ckpt = read_checkpoint(&path).unwrap();

    let mut extra = ckpt.entries.clone();
    extra.push(("intruder.w".to_string(), Tensor::zeros(&[2, 2])));
    let bad = tmp_dir().join("extra.ckpt");
    write_checkpoint(&bad, &ckpt.manifest, &extra).unwrap();
    let err = load_model(&bad).unwrap_err().to_string();
    assert!(err.contains("intruder.w"), "unhelpful error: {err}");

    let mut reshaped = ckpt.entries.clone();
    for (n, t) in reshaped.iter_mut() {
        if n == "gru.head.b" {
            *t = Tensor::zeros(&[7]);
        }
    }
    let bad = tmp_dir().join("reshaped.ckpt");
    write_checkpoint(&bad, &ckpt.manifest, &reshaped).unwrap();
    let err = load_model(&bad).unwrap_err().to_string();
    assert!(err.contains("gru.head.b"), "unhelpful error: {err}");
}

#[test]
fn missing_norm_entries_are_rejected() {
    let model = build_model(&toy_config(ArchKind::Mlp), Standardizer::identity(), 4).unwrap();
    let path = tmp_dir().join("norm.ckpt");
    save_model(&model, &path).unwrap();
    let ckpt = read_checkpoint(&path).unwrap();
    let without: Vec<(String, Tensor)> =
        ckpt.entries.iter().filter(|(n, _)| n != "norm.mean").cloned().collect();
    let bad = tmp_dir().join("no-norm.ckpt");
    write_checkpoint(&bad, &ckpt.manifest, &without).unwrap();
    let err = load_model(&bad).unwrap_err().to_string();
    assert!(err.contains("norm.mean"), "unhelpful error: {err}");
}

#[test]
fn garbage_manifest_is_rejected() {
    let model = build_model(&toy_config(ArchKind::Mlp), Standardizer::identity(), 5).unwrap();
    let path = tmp_dir().join("manifest.ckpt");
    save_model(&model, &path).unwrap();
    let ckpt = read_checkpoint(&path).unwrap();
    let bad = tmp_dir().join("bad-manifest.ckpt");
    write_checkpoint(&bad, "kind = \"weather-balloon\"", &ckpt.entries).unwrap();
    assert!(load_model(&bad).is_err());
}

#[test]
fn truncated_file_is_rejected() {
    let model = build_model(&toy_config(ArchKind::Mlp), Standardizer::identity(), 6).unwrap();
    let path = tmp_dir().join("whole.ckpt");
    save_model(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = tmp_dir().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
    assert!(load_model(&cut).is_err());
}

/// The teacher-forced forecast also reproduces exactly after a roundtrip
/// (exercises the decoder paths that Eval skips).
#[test]
fn teacher_forced_forecast_survives_roundtrip() {
    let x = Tensor::new(
        &[1, INPUT_STEPS, 3],
        values(21, INPUT_STEPS * 3).iter().map(|v| v * 0.5).collect(),
    )
    .unwrap();
    let t = Tensor::new(
        &[1, TARGET_STEPS, 3],
        values(22, TARGET_STEPS * 3).iter().map(|v| v * 0.5).collect(),
    )
    .unwrap();
    for kind in [ArchKind::GruAr, ArchKind::Transformer] {
        let model = build_model(&toy_config(kind), Standardizer::identity(), 77).unwrap();
        let path = tmp_dir().join(format!("tf-{}.ckpt", kind.cli_name()));
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        let run = |m: &Model| {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &x, &ForwardMode::Val { target: &t }).unwrap();
            g.value(out.forecast).data().to_vec()
        };
        let (a, b) = (run(&model), run(&back));
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }
}
