//! Parameter counts per module for the four decoder ablations and for the
//! wider encoder configuration.

use candle_core::DType;
use edge_depth::backbone::EncoderConfig;
use edge_depth::decoder::DecoderVariant;
use edge_depth::trainer::{DepthModel, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let base = ExperimentConfig::default();
    println!("{:<24} {:>10} {:>10} {:>10} {:>10}", "config", "backbone", "decoder", "posenet", "total");
    for v in DecoderVariant::ALL {
        let cfg = ExperimentConfig { decoder: base.decoder.variant(v), ..base.clone() };
        let t = DepthModel::new(&cfg, DType::F32)?.param_table();
        println!("{:<24} {:>10} {:>10} {:>10} {:>10}", v.label(), t.backbone, t.decoder, t.posenet, t.total);
    }
    let wide = ExperimentConfig { encoder: EncoderConfig::wide(), ..base };
    let t = DepthModel::new(&wide, DType::F32)?.param_table();
    println!("{:<24} {:>10} {:>10} {:>10} {:>10}", "wide encoder", t.backbone, t.decoder, t.posenet, t.total);
    Ok(())
}
