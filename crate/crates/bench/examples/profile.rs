//! Temporary: locate the hot path in recurrent-model training steps.

use std::time::Instant;

use threetank_autodiff::{Graph, Tensor};
use threetank_bench::{scenario_dataset, Profile};
use threetank_models::{build_model, ForwardMode, Standardizer};
use threetank_sim::ScenarioKind;
use threetank_train::Adam;

fn main() -> anyhow::Result<()> {
    let profile = Profile::Desk;
    let (data, _) = scenario_dataset(ScenarioKind::Standard, profile.counts(), 1)?;
    let norm = Standardizer::fit(&data.train.samples)?;

    for kind in ["gru", "gru_ar", "transformer"] {
        let arch = profile.arch_config(kind.parse()?);
        let model = build_model(&arch, norm.clone(), 3)?;
        let idx: Vec<usize> = (0..32).collect();
        let x = model.norm.batch_input(&data.train.samples, &idx);
        let y = model.norm.batch_target(&data.train.samples, &idx);
        let mut opt = Adam::new(1e-3);

        // Warm up once.
        run_step(&model, &x, &y, &mut opt)?;

        let reps = 5;
        let (mut t_fwd, mut t_loss, mut t_bwd, mut t_adam) = (0.0, 0.0, 0.0, 0.0);
        let mut nodes = 0;
        for _ in 0..reps {
            let t0 = Instant::now();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &x, &ForwardMode::Train { target: &y })?;
            t_fwd += t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            let target = g.constant(y.clone());
            let mut loss = g.mse_loss(out.forecast, target)?;
            if let Some(aux) = out.aux_loss {
                loss = g.add(loss, aux)?;
            }
            t_loss += t1.elapsed().as_secs_f64();

            let t2 = Instant::now();
            g.backward(loss)?;
            t_bwd += t2.elapsed().as_secs_f64();

            let t3 = Instant::now();
            opt.step(model.params())?;
            model.params().zero_grad();
            t_adam += t3.elapsed().as_secs_f64();
            nodes = g.len();
        }
        let r = reps as f64;
        println!(
            "{kind:>12}: fwd {:6.1}ms  loss {:5.2}ms  bwd {:6.1}ms  adam {:5.2}ms  ({} nodes)",
            t_fwd / r * 1e3,
            t_loss / r * 1e3,
            t_bwd / r * 1e3,
            t_adam / r * 1e3,
            nodes
        );
    }

    // Raw dgemm cost at the GRU step shape, via the public matmul path.
    let a = Tensor::new(&[32, 32], (0..32 * 32).map(|i| (i as f64 * 0.01).sin()).collect())?;
    let b = Tensor::new(&[32, 96], (0..32 * 96).map(|i| (i as f64 * 0.02).cos()).collect())?;
    let t0 = Instant::now();
    let reps = 750 * 5;
    let mut sink = 0.0;
    for _ in 0..reps {
        let mut g = Graph::new();
        let na = g.constant(a.clone());
        let nb = g.constant(b.clone());
        let c = g.matmul(na, nb)?;
        sink += g.value(c).data()[0];
    }
    println!(
        "matmul [32,32]x[32,96] via graph: {:.1}us/call (sink {sink:.3})",
        t0.elapsed().as_secs_f64() / reps as f64 * 1e6
    );

    // Elementwise chain cost at the gate shape.
    let h = Tensor::new(&[32, 32], (0..1024).map(|i| (i as f64 * 0.03).sin()).collect())?;
    let t0 = Instant::now();
    let reps = 250 * 6 * 5;
    let mut sink = 0.0;
    for _ in 0..reps {
        let mut g = Graph::new();
        let nh = g.constant(h.clone());
        let s = g.sigmoid(nh)?;
        sink += g.value(s).data()[0];
    }
    println!(
        "sigmoid [32,32] via graph: {:.2}us/call (sink {sink:.3})",
        t0.elapsed().as_secs_f64() / reps as f64 * 1e6
    );
    Ok(())
}

fn run_step(
    model: &threetank_models::Model,
    x: &Tensor,
    y: &Tensor,
    opt: &mut Adam,
) -> anyhow::Result<()> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, x, &ForwardMode::Train { target: y })?;
    let target = g.constant(y.clone());
    let mut loss = g.mse_loss(out.forecast, target)?;
    if let Some(aux) = out.aux_loss {
        loss = g.add(loss, aux)?;
    }
    g.backward(loss)?;
    opt.step(model.params())?;
    model.params().zero_grad();
    Ok(())
}
