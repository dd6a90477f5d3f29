//! Differentiable view synthesis: backproject target depth, move the points
//! into the source camera, project, and bilinearly sample.
//!
//! Pixel centers sit at integer coordinates with the origin at the top-left;
//! the camera looks down +z. A sample is valid when its projection lands in
//! `[0, W-1] x [0, H-1]` with positive depth; invalid samples are masked,
//! never clamped into the loss.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::maps::DepthMap;
use crate::posenet::{invert_rt, pose_vec_to_rt};

/// Slack (pixels) on the in-frame test, absorbing float round-off on the border.
const BOUNDS_SLACK: f64 = 1e-3;
const MIN_Z: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("intrinsics must be finite".into()));
        }
        Ok(())
    }

    /// Intrinsics after resizing the image by `(sx, sy)`. Pixel centers sit at
    /// integer coordinates, so the principal point maps as `(c + 0.5) s - 0.5`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
        }
    }

    /// Ray direction (z = 1) through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        Some((
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ))
    }
}

/// Homogeneous pixel grid `(3, H*W)` with rows `u`, `v`, `1`.
pub fn pixel_grid(height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let n = height * width;
    let mut data = Vec::with_capacity(3 * n);
    data.extend((0..n).map(|i| (i % width) as f64));
    data.extend((0..n).map(|i| (i / width) as f64));
    data.extend(std::iter::repeat_n(1.0, n));
    Ok(Tensor::from_vec(data, (3, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Normalized ray directions `(3, H*W)`.
fn ray_grid(height: usize, width: usize, k: &Intrinsics, dtype: DType) -> Result<Tensor> {
    let n = height * width;
    let mut data = Vec::with_capacity(3 * n);
    data.extend((0..n).map(|i| ((i % width) as f64 - k.cx) / k.fx));
    data.extend((0..n).map(|i| ((i / width) as f64 - k.cy) / k.fy));
    data.extend(std::iter::repeat_n(1.0, n));
    Ok(Tensor::from_vec(data, (3, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// 3D points `(B, 3, H*W)` in the camera frame of a `(B, 1, H, W)` depth map.
pub fn backproject(depth: &Tensor, k: &Intrinsics) -> Result<Tensor> {
    let (b, c, h, w) = depth.dims4()?;
    if c != 1 {
        return shape_err(format!("depth must have one channel, got {c}"));
    }
    let rays = ray_grid(h, w, k, depth.dtype())?.unsqueeze(0)?;
    Ok(rays.broadcast_mul(&depth.reshape((b, 1, h * w))?)?)
}

/// Project `(B, 3, N)` points; returns `(u, v, z)` each `(B, N)`. Depth is
/// floored at a small positive value before division; callers mask `z`.
pub fn project(points: &Tensor, k: &Intrinsics) -> Result<(Tensor, Tensor, Tensor)> {
    let x = points.narrow(1, 0, 1)?.squeeze(1)?;
    let y = points.narrow(1, 1, 1)?.squeeze(1)?;
    let z = points.narrow(1, 2, 1)?.squeeze(1)?;
    let zs = z.maximum(MIN_Z)?;
    let u = x.div(&zs)?.affine(k.fx, k.cx)?;
    let v = y.div(&zs)?.affine(k.fy, k.cy)?;
    Ok((u, v, z))
}

/// Bilinear sampling of `(B, C, H, W)` at continuous coordinates `(B, N)`.
///
/// Returns the samples `(B, C, N)` and an in-frame mask `(B, N)` (1 inside,
/// 0 outside). Out-of-frame coordinates are clamped only to form a finite
/// value; the mask flags them. Gradients reach both the map and the
/// coordinates.
pub fn bilinear_sample(map: &Tensor, u: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = map.dims4()?;
    let (bu, n) = u.dims2()?;
    if bu != b || v.dims() != u.dims() {
        return shape_err(format!(
            "sample coordinates {:?}/{:?} do not match map batch {b}",
            u.dims(),
            v.dims()
        ));
    }
    if h < 2 || w < 2 {
        return shape_err("bilinear sampling needs at least 2x2 maps");
    }
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let inside = u
        .ge(-BOUNDS_SLACK)?
        .mul(&u.le(wm + BOUNDS_SLACK)?)?
        .mul(&v.ge(-BOUNDS_SLACK)?)?
        .mul(&v.le(hm + BOUNDS_SLACK)?)?;
    let uc = u.clamp(0.0, wm)?;
    let vc = v.clamp(0.0, hm)?;
    let x0 = uc.detach().floor()?.clamp(0.0, wm - 1.0)?;
    let y0 = vc.detach().floor()?.clamp(0.0, hm - 1.0)?;
    let wx = (&uc - &x0)?.unsqueeze(1)?;
    let wy = (&vc - &y0)?.unsqueeze(1)?;
    let base = ((&y0 * w as f64)? + &x0)?;
    let flat = map.reshape((b, c, h * w))?;
    let gather = |offset: f64| -> Result<Tensor> {
        let idx = (&base + offset)?
            .to_dtype(DType::U32)?
            .unsqueeze(1)?
            .broadcast_as((b, c, n))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?)
    };
    let v00 = gather(0.0)?;
    let v01 = gather(1.0)?;
    let v10 = gather(w as f64)?;
    let v11 = gather(w as f64 + 1.0)?;
    let one_wx = wx.affine(-1.0, 1.0)?;
    let one_wy = wy.affine(-1.0, 1.0)?;
    let top = (v00.broadcast_mul(&one_wx)? + v01.broadcast_mul(&wx)?)?;
    let bottom = (v10.broadcast_mul(&one_wx)? + v11.broadcast_mul(&wx)?)?;
    let out = (top.broadcast_mul(&one_wy)? + bottom.broadcast_mul(&wy)?)?;
    Ok((out, inside.to_dtype(map.dtype())?))
}

/// Synthesized map plus validity mask, both `(B, *, H, W)`; the mask holds 1
/// for valid pixels and 0 otherwise.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub synthesized: Tensor,
    pub valid: Tensor,
}

impl WarpResult {
    pub fn valid_fraction(&self) -> Result<f64> {
        crate::nn::scalar(&self.valid.mean_all()?)
    }
}

struct Reprojection {
    u: Tensor,
    v: Tensor,
    z_ok: Tensor,
}

fn reproject(target_depth: &Tensor, pose: &Tensor, k: &Intrinsics) -> Result<Reprojection> {
    let (b, _, _, _) = target_depth.dims4()?;
    if pose.dims() != [b, 6] {
        return shape_err(format!("pose must be ({b}, 6), got {:?}", pose.dims()));
    }
    let pts = backproject(target_depth, k)?;
    let (rot, t) = pose_vec_to_rt(pose)?;
    let moved = rot.matmul(&pts)?.broadcast_add(&t)?;
    let (u, v, z) = project(&moved, k)?;
    let z_ok = z.gt(MIN_Z)?.to_dtype(target_depth.dtype())?;
    Ok(Reprojection { u, v, z_ok })
}

/// Synthesize the target view from `source` (`(B, C, H, W)`) using the target
/// depth and the target-to-source pose `(B, 6)`.
pub fn warp_image(
    source: &Tensor,
    target_depth: &Tensor,
    pose: &Tensor,
    k: &Intrinsics,
) -> Result<WarpResult> {
    let (b, c, h, w) = source.dims4()?;
    let (_, _, dh, dw) = target_depth.dims4()?;
    if (dh, dw) != (h, w) {
        return shape_err(format!("source {h}x{w} vs depth {dh}x{dw}"));
    }
    let rp = reproject(target_depth, pose, k)?;
    let (sampled, inside) = bilinear_sample(source, &rp.u, &rp.v)?;
    let valid = (inside * rp.z_ok)?.reshape((b, 1, h, w))?;
    Ok(WarpResult {
        synthesized: sampled.reshape((b, c, h, w))?,
        valid,
    })
}

/// Depth of the target view synthesized from the source depth: the source
/// depth is sampled at the reprojected coordinates, lifted to 3D in the source
/// frame and moved back into the target frame, so the result is directly
/// comparable with the target depth.
pub fn warp_depth(
    source_depth: &Tensor,
    target_depth: &Tensor,
    pose: &Tensor,
    k: &Intrinsics,
) -> Result<WarpResult> {
    let (b, _, h, w) = target_depth.dims4()?;
    if source_depth.dims() != target_depth.dims() {
        return shape_err(format!(
            "source depth {:?} vs target depth {:?}",
            source_depth.dims(),
            target_depth.dims()
        ));
    }
    let rp = reproject(target_depth, pose, k)?;
    let (sampled, inside) = bilinear_sample(source_depth, &rp.u, &rp.v)?;
    let sampled = sampled.squeeze(1)?; // (B, N)
    let rx = rp.u.affine(1.0 / k.fx, -k.cx / k.fx)?;
    let ry = rp.v.affine(1.0 / k.fy, -k.cy / k.fy)?;
    let src_pts = Tensor::stack(&[(&rx * &sampled)?, (&ry * &sampled)?, sampled.clone()], 1)?;
    let (rot, t) = pose_vec_to_rt(pose)?;
    let (rinv, tinv) = invert_rt(&rot, &t)?;
    let back = rinv.matmul(&src_pts)?.broadcast_add(&tinv)?;
    let z = back.narrow(1, 2, 1)?.squeeze(1)?;
    let ok = sampled
        .gt(0.0)?
        .to_dtype(z.dtype())?
        .mul(&z.gt(MIN_Z)?.to_dtype(z.dtype())?)?;
    let valid = inside.mul(&rp.z_ok)?.mul(&ok)?.reshape((b, 1, h, w))?;
    Ok(WarpResult {
        synthesized: z.reshape((b, 1, h, w))?,
        valid,
    })
}

/// Host-side backprojection of the valid pixels of a depth map, in row-major
/// order.
pub fn backproject_map(depth: &DepthMap, k: &Intrinsics) -> Vec<[f32; 3]> {
    let mut out = Vec::with_capacity(depth.n_valid());
    for y in 0..depth.height {
        for x in 0..depth.width {
            if !depth.is_valid(x, y) {
                continue;
            }
            let d = depth.at(x, y) as f64;
            let r = k.unproject(x as f64, y as f64);
            out.push([(r[0] * d) as f32, (r[1] * d) as f32, d as f32]);
        }
    }
    out
}
