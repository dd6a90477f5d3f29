//! Overfit stage 1 on a single synthetic sequence and report training-frame
//! metrics.
//!
//! `cargo run --release --example train_overfit -- [steps] [lr]`

use edge_depth::data::{generate_synthetic_sequence, SceneSpec};
use edge_depth::metrics::MetricOptions;
use edge_depth::trainer::{evaluate, train_stage1, DepthModel, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(400);
    let lr: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1e-3);

    let seq = generate_synthetic_sequence(&SceneSpec::corner_with_box(64, 64, 20, 7))?;
    let data = seq.triplets();
    let cfg = ExperimentConfig {
        learning_rate: lr,
        max_steps: Some(steps),
        validation_fraction: 0.0,
        eval_every: steps,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let out = train_stage1(&cfg, &data)?;
    println!("trained {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());

    let model = DepthModel::with_weights(&cfg, &out.last.weights, candle_core::DType::F32)?;
    let report = evaluate(&model, &data, &MetricOptions::default())?;
    println!(
        "training frames: abs_rel {:.4}  rmse {:.4}  delta1 {:.3}  dbe_acc {:?}",
        report.mean.abs_rel, report.mean.rmse, report.mean.delta1, report.mean.dbe_acc
    );
    Ok(())
}
