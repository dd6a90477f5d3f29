//! Ray-cast synthetic scenes with exact depth, poses and object masks.
//!
//! Surfaces carry band-limited value-noise textures defined in world space,
//! so every view of a surface point has the same color and warping between
//! frames with the true depth and pose reproduces the target up to bilinear
//! interpolation error.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{ManifestEntry, SampleTriplet};
use super::io::{encode_depth_png, save_labels_png, save_rgb_png, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::maps::{DepthMap, LabelMap, RgbImage};
use crate::posenet::CameraPose;

/// Infinite plane through `point` with normal `normal`, optionally limited to
/// a disc of radius `radius` around `point`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    #[serde(default)]
    pub radius: Option<f64>,
}

/// Axis-aligned box between corners `min` and `max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

fn default_texture_scale() -> f64 {
    4.0
}

fn default_min_depth() -> f64 {
    0.1
}

fn default_max_depth() -> f64 {
    10.0
}

/// Scene description. Object ids are assigned in order, planes first,
/// starting at 1; 0 marks pixels that see nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    /// Camera-to-world pose of every frame.
    pub trajectory: Vec<CameraPose>,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
    /// Texture lattice cells per meter.
    #[serde(default = "default_texture_scale")]
    pub texture_scale: f64,
    #[serde(default = "default_min_depth")]
    pub min_depth: f64,
    #[serde(default = "default_max_depth")]
    pub max_depth: f64,
}

impl SceneSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn num_objects(&self) -> usize {
        self.planes.len() + self.boxes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.width < 2 || self.height < 2 {
            return Err(Error::Scene(format!("image {}x{} too small", self.width, self.height)));
        }
        if self.trajectory.is_empty() {
            return Err(Error::Scene("trajectory has no frames".into()));
        }
        if self.num_objects() == 0 {
            return Err(Error::Scene("scene has no geometry".into()));
        }
        if self.num_objects() > 254 {
            return Err(Error::Scene("at most 254 objects are supported".into()));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::Scene(format!(
                "invalid depth range [{}, {}]",
                self.min_depth, self.max_depth
            )));
        }
        if !(self.noise >= 0.0 && self.texture_scale > 0.0) {
            return Err(Error::Scene("noise must be >= 0 and texture_scale > 0".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            if norm(p.normal) < 1e-12 {
                return Err(Error::Scene(format!("plane {i} has a zero normal")));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|k| b.max[k] <= b.min[k]) {
                return Err(Error::Scene(format!("box {i} has non-positive extent")));
            }
        }
        for (f, pose) in self.trajectory.iter().enumerate() {
            if !pose.is_finite() {
                return Err(Error::Scene(format!("frame {f} pose is not finite")));
            }
            let c = pose.translation;
            for (i, b) in self.boxes.iter().enumerate() {
                if (0..3).all(|k| c[k] > b.min[k] && c[k] < b.max[k]) {
                    return Err(Error::Scene(format!("camera of frame {f} is inside box {i}")));
                }
            }
        }
        Ok(())
    }

    /// A fronto-parallel floor-and-wall corner seen by a camera sliding
    /// sideways; continuous depth, so no disocclusions between frames.
    pub fn corner(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        let f = 0.9 * width as f64;
        let trajectory = (0..frames)
            .map(|i| {
                let s = i as f64;
                CameraPose::new([0.0, 0.01 * s, 0.0], [0.03 * s, -0.01 * s, 0.02 * s])
            })
            .collect();
        Self {
            width,
            height,
            intrinsics: Intrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            planes: vec![
                PlaneSpec { point: [0.0, 0.0, 3.0], normal: [0.0, 0.0, -1.0], radius: None },
                PlaneSpec { point: [0.0, 0.6, 0.0], normal: [0.0, -1.0, 0.0], radius: None },
            ],
            boxes: vec![],
            trajectory,
            noise: 0.0,
            seed,
            texture_scale: default_texture_scale(),
            min_depth: 0.1,
            max_depth: 10.0,
        }
    }

    /// Corner scene plus a box standing on the floor, giving depth
    /// discontinuities for boundary experiments.
    pub fn corner_with_box(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        let mut s = Self::corner(width, height, frames, seed);
        s.boxes.push(BoxSpec { min: [-0.5, 0.0, 1.8], max: [0.1, 0.6, 2.3] });
        s
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn ray_plane(o: [f64; 3], d: [f64; 3], p: &PlaneSpec) -> Option<f64> {
    let denom = dot(p.normal, d);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = dot(p.normal, sub(p.point, o)) / denom;
    if t <= 0.0 {
        return None;
    }
    if let Some(r) = p.radius {
        let hit = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        if norm(sub(hit, p.point)) > r {
            return None;
        }
    }
    Some(t)
}

fn ray_box(o: [f64; 3], d: [f64; 3], b: &BoxSpec) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < b.min[k] || o[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let (a, c) = ((b.min[k] - o[k]) / d[k], (b.max[k] - o[k]) / d[k]);
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    (t1 >= t0 && t0 > 0.0).then_some(t0)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, obj: u64, i: i64, j: i64, k: i64) -> f64 {
    let mut h = splitmix(seed ^ obj.wrapping_mul(0x100_0000_01b3));
    for c in [i, j, k] {
        h = splitmix(h ^ c as u64);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]`: trilinear interpolation of lattice values
/// with smoothstep weights.
fn value_noise(seed: u64, obj: u64, p: [f64; 3]) -> f64 {
    let base = p.map(|c| c.floor());
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]].map(|t| t * t * (3.0 - 2.0 * t));
    let (bi, bj, bk) = (base[0] as i64, base[1] as i64, base[2] as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = [(di, 0), (dj, 1), (dk, 2)]
            .iter()
            .map(|&(d, a)| if d == 1 { frac[a] } else { 1.0 - frac[a] })
            .product::<f64>();
        acc += w * lattice(seed, obj, bi + di as i64, bj + dj as i64, bk + dk as i64);
    }
    acc
}

fn base_color(seed: u64, obj: u64) -> [f64; 3] {
    let h = splitmix(seed.wrapping_add(0x51ed) ^ obj.wrapping_mul(0x2545_f491_4f6c_dd1d));
    [0, 21, 42].map(|s| 0.25 + 0.6 * ((h >> s) & 0x1f_ffff) as f64 / 0x1f_ffff as f64)
}

fn shade(seed: u64, obj: u64, p: [f64; 3], scale: f64) -> [f64; 3] {
    let s = [p[0] * scale, p[1] * scale, p[2] * scale];
    let s2 = s.map(|c| 2.0 * c + 17.0);
    let n = (value_noise(seed, obj, s) + 0.5 * value_noise(seed, obj + 1000, s2)) / 1.5;
    let c = base_color(seed, obj);
    c.map(|ch| (ch * (0.45 + 0.9 * n)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub labels: LabelMap,
    /// Camera-to-world pose.
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<SyntheticFrame>,
    pub intrinsics: Intrinsics,
    pub num_classes: usize,
}

/// Source frame used with each target: the previous frame, or the next one
/// for the first frame.
pub fn default_source(t: usize, len: usize) -> Option<usize> {
    match (t, len) {
        (_, 0 | 1) => None,
        (0, _) => Some(1),
        _ => Some(t - 1),
    }
}

impl SyntheticSequence {
    /// Pose mapping target-camera points into the source camera.
    pub fn relative_pose(&self, target: usize, source: usize) -> CameraPose {
        self.frames[source].pose.inverse().compose(&self.frames[target].pose)
    }

    /// One triplet per frame, with the default source frame, GT depth used as
    /// both ground truth and pseudo-depth, object masks and GT poses.
    pub fn triplets(&self) -> Vec<SampleTriplet> {
        let n = self.frames.len();
        (0..n)
            .filter_map(|t| {
                let s = default_source(t, n)?;
                let f = &self.frames[t];
                Some(SampleTriplet {
                    name: format!("frame_{t:04}"),
                    target: f.image.clone(),
                    sources: vec![self.frames[s].image.clone()],
                    intrinsics: self.intrinsics,
                    pseudo_depth: Some(f.depth.clone()),
                    gt_depth: Some(f.depth.clone()),
                    seg: Some(f.labels.clone()),
                    source_poses: Some(vec![self.relative_pose(t, s)]),
                })
            })
            .collect()
    }
}

/// Render every frame of the scene. Deterministic given the spec.
pub fn generate_synthetic_sequence(spec: &SceneSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let k = spec.intrinsics;
    let mut frames = Vec::with_capacity(spec.trajectory.len());
    for (fi, pose) in spec.trajectory.iter().enumerate() {
        let rot = pose.rotation_matrix();
        let o = pose.translation;
        let mut depth = vec![0f32; w * h];
        let mut labels = vec![0u8; w * h];
        let mut image = RgbImage::new(w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ (fi as u64).wrapping_mul(0x9e37)));
        let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
        let mut hits = 0usize;
        for y in 0..h {
            for x in 0..w {
                let dc = k.unproject(x as f64, y as f64);
                let dw = rot * nalgebra::Vector3::from(dc);
                let d = [dw.x, dw.y, dw.z];
                let mut best: Option<(f64, u64)> = None;
                let planes = spec.planes.iter().map(|p| ray_plane(o, d, p));
                let boxes = spec.boxes.iter().map(|b| ray_box(o, d, b));
                for (id, t) in planes.chain(boxes).enumerate() {
                    if let Some(t) = t {
                        if best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, id as u64 + 1));
                        }
                    }
                }
                let i = y * w + x;
                let mut color = [0.0; 3];
                if let Some((t, id)) = best {
                    if t < spec.min_depth || t > spec.max_depth {
                        return Err(Error::Scene(format!(
                            "frame {fi} pixel ({x}, {y}) has depth {t:.3} outside [{}, {}]",
                            spec.min_depth, spec.max_depth
                        )));
                    }
                    hits += 1;
                    depth[i] = t as f32;
                    labels[i] = id as u8;
                    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                    color = shade(spec.seed, id, p, spec.texture_scale);
                }
                for (c, v) in color.iter().enumerate() {
                    let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    image.set(c, x, y, (v + n).clamp(0.0, 1.0) as f32);
                }
            }
        }
        if hits == 0 {
            return Err(Error::Scene(format!("camera of frame {fi} sees no surface")));
        }
        frames.push(SyntheticFrame {
            image,
            depth: DepthMap::from_values(w, h, depth)?,
            labels: LabelMap { width: w, height: h, labels },
            pose: *pose,
        });
    }
    Ok(SyntheticSequence { frames, intrinsics: k, num_classes: spec.num_objects() + 1 })
}

/// Write a rendered sequence as PNG frames, 16-bit depth PNGs, label PNGs and
/// a `manifest.jsonl`. The ground-truth depth also serves as pseudo-depth.
/// Returns the manifest path.
pub fn write_synthetic_dataset(seq: &SyntheticSequence, out_dir: &Path) -> Result<PathBuf> {
    for sub in ["rgb", "depth", "seg"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let n = seq.frames.len();
    for (i, f) in seq.frames.iter().enumerate() {
        save_rgb_png(&out_dir.join(format!("rgb/{i:04}.png")), &f.image)?;
        write_atomic(&out_dir.join(format!("depth/{i:04}.png")), &encode_depth_png(&f.depth)?)?;
        save_labels_png(&out_dir.join(format!("seg/{i:04}.png")), &f.labels)?;
    }
    let mut manifest = String::new();
    for t in 0..n {
        let Some(s) = default_source(t, n) else { continue };
        let depth = format!("depth/{t:04}.png");
        let entry = ManifestEntry {
            target: format!("rgb/{t:04}.png").into(),
            sources: vec![format!("rgb/{s:04}.png").into()],
            intrinsics: seq.intrinsics,
            pseudo_depth: Some(depth.clone().into()),
            gt_depth: Some(depth.into()),
            seg: Some(format!("seg/{t:04}.png").into()),
            source_poses: Some(vec![seq.relative_pose(t, s)]),
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    let path = out_dir.join("manifest.jsonl");
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}
