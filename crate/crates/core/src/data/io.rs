//! PNG readers and writers. Depth is stored as 16-bit grayscale in
//! millimeters with zero marking invalid pixels.

use std::io::{Cursor, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::maps::{DepthMap, LabelMap, RgbImage};

pub const DEPTH_SCALE_MM: f32 = 1000.0;

/// Write `bytes` to `path` through a temporary file in the same directory and
/// an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(format_err(path, "file not found"));
    }
    image::open(path).map_err(|e| format_err(path, e.to_string()))
}

/// Encode a depth map as 16-bit millimeter PNG bytes. Invalid pixels become 0;
/// depths beyond 65.535 m saturate.
pub fn encode_depth_png(depth: &DepthMap) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let mm = if depth.is_valid(x, y) {
                (depth.at(x, y) * DEPTH_SCALE_MM).round().clamp(1.0, u16::MAX as f32) as u16
            } else {
                0
            };
            Luma([mm])
        });
    encode_png(&DynamicImage::ImageLuma16(buf))
}

pub fn save_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    write_atomic(path, &encode_depth_png(depth)?)
}

/// Read a 16-bit millimeter depth PNG into meters.
pub fn load_depth_png(path: &Path) -> Result<DepthMap> {
    let img = open(path)?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(format_err(path, format!("expected 16-bit grayscale depth, got {:?}", img.color())));
    };
    let values = buf.pixels().map(|p| p[0] as f32 / DEPTH_SCALE_MM).collect();
    DepthMap::from_values(buf.width() as usize, buf.height() as usize, values)
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_png(&DynamicImage::ImageRgb8(img.to_rgb8()))?)
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    Ok(RgbImage::from_rgb8(&open(path)?.to_rgb8()))
}

pub fn save_labels_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(labels.width as u32, labels.height as u32, labels.labels.clone())
            .ok_or_else(|| Error::Shape("label buffer does not match its size".into()))?;
    write_atomic(path, &encode_png(&DynamicImage::ImageLuma8(buf))?)
}

pub fn load_labels_png(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    let DynamicImage::ImageLuma8(buf) = img else {
        return Err(format_err(path, format!("expected 8-bit label map, got {:?}", img.color())));
    };
    Ok(LabelMap {
        width: buf.width() as usize,
        height: buf.height() as usize,
        labels: buf.into_raw(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn millimeter_scale_and_invalid_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = DepthMap::from_values(3, 1, vec![1.0, 0.0, 2.3456]).unwrap();
        save_depth_png(&p, &d).unwrap();
        let back = load_depth_png(&p).unwrap();
        assert_eq!(back.at(0, 0), 1.0);
        assert!(!back.is_valid(1, 0));
        assert!((back.at(2, 0) - 2.3456).abs() <= 0.0005 + 1e-6);
    }

    #[test]
    fn eight_bit_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d8.png");
        save_labels_png(&p, &LabelMap { width: 2, height: 2, labels: vec![1; 4] }).unwrap();
        assert!(matches!(load_depth_png(&p), Err(Error::Format { .. })));
    }
}
