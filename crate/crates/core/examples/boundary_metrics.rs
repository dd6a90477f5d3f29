//! Depth and boundary metrics on hand-made maps: a perfect prediction, a
//! globally scaled one, and one whose depth edge is displaced.

use edge_depth::maps::DepthMap;
use edge_depth::metrics::{dbe_accuracy, evaluate_frame, extract_boundaries, MetricOptions};

fn step(width: usize, height: usize, edge: usize) -> DepthMap {
    let values = (0..width * height).map(|i| if i % width < edge { 1.0 } else { 3.0 }).collect();
    DepthMap::from_values(width, height, values).expect("sized")
}

fn main() -> anyhow::Result<()> {
    let gt = step(32, 24, 12);
    let opts = MetricOptions { median_scaling: false, ..Default::default() };

    let b = extract_boundaries(&gt, opts.boundary_threshold);
    println!("ground truth: {} boundary pixels", b.count());

    for (name, pred) in [("exact", gt.clone()), ("scaled x1.2", gt.scaled(1.2)), ("edge +3 px", step(32, 24, 15))] {
        let r = evaluate_frame(&pred, &gt, &opts)?;
        println!(
            "{name:<12} abs_rel {:.3}  rmse {:.3}  delta1 {:.3}  dbe_acc {}",
            r.abs_rel,
            r.rmse,
            r.delta1,
            r.dbe_acc.map(|v| format!("{v:.2} px")).unwrap_or_else(|| "n/a".into())
        );
    }
    println!("flat prediction dbe: {:?}", dbe_accuracy(&DepthMap::constant(32, 24, 2.0), &gt, 0.1)?);
    Ok(())
}
