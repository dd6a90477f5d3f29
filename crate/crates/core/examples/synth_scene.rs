//! Render a synthetic sequence (images, depth, object ids) and write it as a
//! dataset directory with a JSON-lines manifest.
//!
//! `cargo run --example synth_scene -- [out_dir] [frames]`

use std::path::PathBuf;

use edge_depth::data::{generate_synthetic_sequence, write_synthetic_dataset, SceneSpec, SequenceDataset};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("edge-depth-synth"));
    let frames: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);

    let spec = SceneSpec::corner_with_box(64, 64, frames, 0);
    let seq = generate_synthetic_sequence(&spec)?;
    let manifest = write_synthetic_dataset(&seq, &out)?;

    let first = &seq.frames[0];
    println!("{} frames of {}x{}, {} object classes", seq.frames.len(), spec.width, spec.height, seq.num_classes);
    println!(
        "frame 0 depth: median {:.3} m, {} valid pixels",
        first.depth.median().unwrap_or(f32::NAN),
        first.depth.n_valid()
    );
    let rel = seq.relative_pose(1, 0);
    println!("pose 1 -> 0: rotation {:?}, translation {:?}", rel.rotation, rel.translation);

    let ds = SequenceDataset::open(&manifest)?;
    println!("manifest {} lists {} triplets", manifest.display(), ds.len());
    Ok(())
}
