//! Warp one synthetic frame onto its neighbour with ground-truth depth and
//! pose, and report how closely the synthesized view matches.

use candle_core::DType;
use edge_depth::data::{generate_synthetic_sequence, SceneSpec};
use edge_depth::geometry::{warp_depth, warp_image};
use edge_depth::losses::geometric_consistency_loss;
use edge_depth::nn::scalar;

fn main() -> anyhow::Result<()> {
    let seq = generate_synthetic_sequence(&SceneSpec::corner(64, 64, 2, 7))?;
    let (t, s) = (&seq.frames[1], &seq.frames[0]);
    let pose = seq.relative_pose(1, 0).to_tensor(DType::F32)?;
    let target_depth = t.depth.to_tensor(DType::F32)?;

    let start = std::time::Instant::now();
    let warped = warp_image(&s.image.to_tensor(DType::F32)?, &target_depth, &pose, &seq.intrinsics)?;
    let target = t.image.to_tensor(DType::F32)?;
    let mask = warped.valid.broadcast_as(target.shape())?;
    let err = ((&warped.synthesized - &target)?.abs()? * &mask)?.sum_all()?;
    let photo = scalar(&err)? / scalar(&mask.sum_all()?)?;

    let wd = warp_depth(&s.depth.to_tensor(DType::F32)?, &target_depth, &pose, &seq.intrinsics)?;
    let geo = scalar(&geometric_consistency_loss(&target_depth, &wd.synthesized, &wd.valid)?)?;

    println!("valid fraction      {:.3}", warped.valid_fraction()?);
    println!("photometric error   {:.5} ({:.2}/255)", photo, photo * 255.0);
    println!("geometric mismatch  {geo:.2e}");
    println!("elapsed             {:?}", start.elapsed());
    Ok(())
}
