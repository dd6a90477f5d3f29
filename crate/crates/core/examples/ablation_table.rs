//! Train the four decoder ablations briefly on one synthetic scene and print a
//! metric row per configuration.
//!
//! `cargo run --release --example ablation_table -- [steps] [size]`

use candle_core::DType;
use edge_depth::data::{generate_synthetic_sequence, SceneSpec};
use edge_depth::decoder::DecoderVariant;
use edge_depth::metrics::MetricOptions;
use edge_depth::trainer::{evaluate, train_stage1, DepthModel, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(32);

    let data = generate_synthetic_sequence(&SceneSpec::corner_with_box(size, size, 8, 3))?.triplets();
    println!(
        "{:<18} {:>9} {:>9} {:>8} {:>8} {:>7} {:>8}",
        "config", "params", "decoder", "abs_rel", "rmse", "delta1", "dbe_acc"
    );
    for v in DecoderVariant::ALL {
        let base = ExperimentConfig::default();
        let cfg = ExperimentConfig {
            decoder: base.decoder.variant(v),
            learning_rate: 1e-3,
            batch_size: 2,
            max_steps: Some(steps),
            validation_fraction: 0.0,
            eval_every: steps.max(1),
            ..base
        };
        let out = train_stage1(&cfg, &data)?;
        let model = DepthModel::with_weights(&cfg, &out.last.weights, DType::F32)?;
        let m = evaluate(&model, &data, &MetricOptions::default())?.mean;
        let p = model.param_table();
        let dbe = m.dbe_acc.map(|d| format!("{d:.3}")).unwrap_or_else(|| "n/a".into());
        println!(
            "{:<18} {:>9} {:>9} {:>8.4} {:>8.4} {:>7.3} {:>8}",
            v.label(),
            p.total,
            p.decoder,
            m.abs_rel,
            m.rmse,
            m.delta1,
            dbe
        );
    }
    Ok(())
}
