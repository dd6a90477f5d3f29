//! Depth visualization and point-cloud export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{backproject_map, Intrinsics};
use crate::maps::DepthMap;
use crate::metrics::{extract_boundaries, BoolMap};

/// Overlay color of predicted boundary pixels (absent from viridis).
pub const BOUNDARY_COLOR: [u8; 3] = [255, 0, 0];
/// Overlay color of ground-truth boundary pixels not matched by a prediction.
pub const GT_BOUNDARY_COLOR: [u8; 3] = [255, 255, 255];
pub const INVALID_COLOR: [u8; 3] = [0, 0, 0];

/// Facts about a rendered depth map, written next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSummary {
    pub width: usize,
    pub height: usize,
    pub colormap: String,
    /// Depth range of the valid pixels (`None` when no pixel is valid).
    pub min_depth: Option<f32>,
    pub max_depth: Option<f32>,
    pub boundary_threshold: f64,
    pub boundary_pixels: usize,
    pub gt_boundary_pixels: Option<usize>,
}

/// Range of the valid depths.
pub fn depth_range(depth: &DepthMap) -> Option<(f32, f32)> {
    let v = depth.masked_values();
    if v.is_empty() {
        return None;
    }
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    Some((lo, hi))
}

/// Viridis rendering, near = dark. A constant map renders in a single color.
pub fn colorize_depth(depth: &DepthMap) -> image::RgbImage {
    let range = depth_range(depth);
    image::RgbImage::from_fn(depth.width as u32, depth.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        match range {
            Some((lo, hi)) if depth.is_valid(x, y) => {
                let t = if hi > lo { ((depth.at(x, y) - lo) / (hi - lo)) as f64 } else { 0.5 };
                let c = colorous::VIRIDIS.eval_continuous(t.clamp(0.0, 1.0));
                image::Rgb([c.r, c.g, c.b])
            }
            _ => image::Rgb(INVALID_COLOR),
        }
    })
}

/// The colorized map with boundary pixels painted over it. Ground-truth
/// boundaries are drawn first so predicted ones stay visible.
pub fn boundary_overlay(base: &image::RgbImage, pred: &BoolMap, gt: Option<&BoolMap>) -> image::RgbImage {
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        if pred.get(x, y) {
            *px = image::Rgb(BOUNDARY_COLOR);
        } else if gt.is_some_and(|g| g.get(x, y)) {
            *px = image::Rgb(GT_BOUNDARY_COLOR);
        }
    }
    out
}

pub struct Plot {
    pub depth: image::RgbImage,
    pub overlay: image::RgbImage,
    pub summary: PlotSummary,
}

/// Render a prediction (and optionally its ground truth) with boundaries.
pub fn plot(pred: &DepthMap, gt: Option<&DepthMap>, threshold: f64) -> Result<Plot> {
    if let Some(g) = gt {
        pred.check_same_shape(g)?;
    }
    let depth = colorize_depth(pred);
    let pb = extract_boundaries(pred, threshold);
    let gb = gt.map(|g| extract_boundaries(g, threshold));
    let overlay = boundary_overlay(&depth, &pb, gb.as_ref());
    let range = depth_range(pred);
    let summary = PlotSummary {
        width: pred.width,
        height: pred.height,
        colormap: "viridis".into(),
        min_depth: range.map(|r| r.0),
        max_depth: range.map(|r| r.1),
        boundary_threshold: threshold,
        boundary_pixels: pb.count(),
        gt_boundary_pixels: gb.as_ref().map(BoolMap::count),
    };
    Ok(Plot { depth, overlay, summary })
}

/// ASCII PLY with one vertex per valid pixel.
pub fn point_cloud_ply(depth: &DepthMap, k: &Intrinsics) -> String {
    let pts = backproject_map(depth, k);
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        pts.len()
    );
    for p in pts {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_depth_is_one_color() {
        let img = colorize_depth(&DepthMap::constant(5, 4, 2.0));
        let first = *img.get_pixel(0, 0);
        assert!(img.pixels().all(|p| *p == first));
    }

    #[test]
    fn ply_has_a_vertex_per_valid_pixel() {
        let mut d = DepthMap::constant(4, 3, 1.0);
        d.valid[5] = false;
        let ply = point_cloud_ply(&d, &Intrinsics::new(2.0, 2.0, 1.5, 1.0));
        assert!(ply.contains("element vertex 11\n"));
        assert_eq!(ply.lines().count(), 7 + 11);
    }
}
