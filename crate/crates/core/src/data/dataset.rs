//! Frame triplets and the JSON-lines manifest that lists them.
//!
//! Each manifest line is one object:
//!
//! ```json
//! {"target": "rgb/0001.png", "sources": ["rgb/0000.png"],
//!  "intrinsics": {"fx": 57.6, "fy": 57.6, "cx": 31.5, "cy": 31.5},
//!  "pseudo_depth": "depth/0001.png", "gt_depth": "depth/0001.png"}
//! ```
//!
//! Paths are relative to the manifest's directory. `pseudo_depth`, `gt_depth`,
//! `seg` (8-bit object ids) and `source_poses` (target-to-source, one per
//! source) are optional. Unknown fields are rejected.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use super::io::{load_depth_png, load_labels_png, load_rgb_png};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::maps::{DepthMap, LabelMap, RgbImage};
use crate::posenet::CameraPose;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub target: PathBuf,
    pub sources: Vec<PathBuf>,
    pub intrinsics: Intrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_poses: Option<Vec<CameraPose>>,
}

/// A target frame with its source frames and optional supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriplet {
    pub name: String,
    pub target: RgbImage,
    pub sources: Vec<RgbImage>,
    pub intrinsics: Intrinsics,
    pub pseudo_depth: Option<DepthMap>,
    pub gt_depth: Option<DepthMap>,
    pub seg: Option<LabelMap>,
    /// Target-to-source poses, one per source frame.
    pub source_poses: Option<Vec<CameraPose>>,
}

impl SampleTriplet {
    pub fn size(&self) -> (usize, usize) {
        (self.target.width, self.target.height)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.size();
        let bad = |msg: String| Err(Error::Data { entry: self.name.clone(), msg });
        if self.sources.is_empty() {
            return bad("no source frames".into());
        }
        for s in &self.sources {
            if (s.width, s.height) != (w, h) {
                return bad(format!("source {}x{} differs from target {w}x{h}", s.width, s.height));
            }
        }
        for (what, d) in [("pseudo depth", &self.pseudo_depth), ("gt depth", &self.gt_depth)] {
            if let Some(d) = d {
                if (d.width, d.height) != (w, h) {
                    return bad(format!("{what} {}x{} differs from target {w}x{h}", d.width, d.height));
                }
            }
        }
        if let Some(s) = &self.seg {
            if (s.width, s.height) != (w, h) {
                return bad(format!("seg {}x{} differs from target {w}x{h}", s.width, s.height));
            }
        }
        if let Some(p) = &self.source_poses {
            if p.len() != self.sources.len() {
                return bad(format!("{} poses for {} sources", p.len(), self.sources.len()));
            }
        }
        Ok(())
    }

    /// Resize every map to `width x height` and rescale the intrinsics.
    /// Images use bilinear filtering; depth and labels use nearest neighbour.
    pub fn resized(&self, width: usize, height: usize) -> SampleTriplet {
        let (w, h) = self.size();
        if (w, h) == (width, height) {
            return self.clone();
        }
        let (sx, sy) = (width as f64 / w as f64, height as f64 / h as f64);
        let img = |i: &RgbImage| {
            RgbImage::from_rgb8(&imageops::resize(&i.to_rgb8(), width as u32, height as u32, FilterType::Triangle))
        };
        let depth = |d: &DepthMap| {
            let values = nearest(&d.masked_values(), d.width, d.height, width, height);
            DepthMap::from_values(width, height, values).expect("sized")
        };
        SampleTriplet {
            name: self.name.clone(),
            target: img(&self.target),
            sources: self.sources.iter().map(img).collect(),
            intrinsics: self.intrinsics.scaled(sx, sy),
            pseudo_depth: self.pseudo_depth.as_ref().map(depth),
            gt_depth: self.gt_depth.as_ref().map(depth),
            seg: self.seg.as_ref().map(|s| LabelMap {
                width,
                height,
                labels: nearest(&s.labels, s.width, s.height, width, height),
            }),
            source_poses: self.source_poses.clone(),
        }
    }
}

fn nearest<T: Copy>(v: &[T], w: usize, h: usize, nw: usize, nh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let sy = ((y as f64 + 0.5) * h as f64 / nh as f64) as usize;
        for x in 0..nw {
            let sx = ((x as f64 + 0.5) * w as f64 / nw as f64) as usize;
            out.push(v[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}

/// Manifest-backed dataset. Entries are parsed and validated when opened;
/// frames load lazily, in manifest order.
#[derive(Debug, Clone)]
pub struct SequenceDataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    resize: Option<(usize, usize)>,
}

impl SequenceDataset {
    pub fn open(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::Manifest {
            path: manifest.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
                path: manifest.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let invalid = |msg: &str| Error::Manifest {
                path: manifest.to_path_buf(),
                line: i + 1,
                msg: msg.into(),
            };
            if entry.sources.is_empty() {
                return Err(invalid("entry lists no source frames"));
            }
            if entry.source_poses.as_ref().is_some_and(|p| p.len() != entry.sources.len()) {
                return Err(invalid("source_poses must have one pose per source"));
            }
            entry.intrinsics.validate().map_err(|e| invalid(&e.to_string()))?;
            entries.push(entry);
        }
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries, resize: None })
    }

    /// Resize every loaded triplet to `width x height`.
    pub fn with_resize(mut self, width: usize, height: usize) -> Self {
        self.resize = Some((width, height));
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Result<SampleTriplet> {
        let e = self.entries.get(index).ok_or_else(|| Error::Data {
            entry: index.to_string(),
            msg: format!("index out of range for {} entries", self.entries.len()),
        })?;
        let name = e.target.display().to_string();
        let named = |err: Error| Error::Data { entry: name.clone(), msg: err.to_string() };
        let path = |p: &Path| self.root.join(p);
        let t = SampleTriplet {
            name: name.clone(),
            target: load_rgb_png(&path(&e.target)).map_err(named)?,
            sources: e
                .sources
                .iter()
                .map(|s| load_rgb_png(&path(s)).map_err(named))
                .collect::<Result<_>>()?,
            intrinsics: e.intrinsics,
            pseudo_depth: e.pseudo_depth.as_ref().map(|p| load_depth_png(&path(p)).map_err(named)).transpose()?,
            gt_depth: e.gt_depth.as_ref().map(|p| load_depth_png(&path(p)).map_err(named)).transpose()?,
            seg: e.seg.as_ref().map(|p| load_labels_png(&path(p)).map_err(named)).transpose()?,
            source_poses: e.source_poses.clone(),
        };
        t.validate()?;
        Ok(match self.resize {
            Some((w, h)) => t.resized(w, h),
            None => t,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SampleTriplet>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Vec<SampleTriplet>> {
        self.iter().collect()
    }
}
