//! Depth evaluation: Abs.Rel, RMSE, δ-threshold accuracies, and the
//! depth-boundary-error accuracy (mean ground-truth boundary distance sampled
//! at predicted boundary pixels).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{median_in_place, DepthMap};

pub const DEFAULT_BOUNDARY_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Scale predictions so their median matches the ground truth first.
    pub median_scaling: bool,
    /// Sobel magnitude on log-depth above which a pixel is a boundary.
    pub boundary_threshold: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            median_scaling: true,
            boundary_threshold: DEFAULT_BOUNDARY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// `None` when either boundary set is empty.
    pub dbe_acc: Option<f64>,
    pub n_valid: usize,
}

impl MetricReport {
    /// Mean of per-frame reports. `dbe_acc` averages over the frames where it
    /// is defined; `n_valid` is summed.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Data { entry: "evaluation".into(), msg: "no frames to aggregate".into() });
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let dbe: Vec<f64> = reports.iter().filter_map(|r| r.dbe_acc).collect();
        Ok(MetricReport {
            abs_rel: avg(|r| r.abs_rel),
            rmse: avg(|r| r.rmse),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            dbe_acc: (!dbe.is_empty()).then(|| dbe.iter().sum::<f64>() / dbe.len() as f64),
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }

    pub const CSV_HEADER: &'static str = "frame,abs_rel,rmse,delta1,delta2,delta3,dbe_acc,n_valid";

    pub fn csv_row(&self, frame: &str) -> String {
        let dbe = self.dbe_acc.map(|v| v.to_string()).unwrap_or_else(|| "nan".into());
        format!(
            "{frame},{},{},{},{},{},{dbe},{}",
            self.abs_rel, self.rmse, self.delta1, self.delta2, self.delta3, self.n_valid
        )
    }
}

/// Pixels valid in both maps, as `(pred, gt)` pairs.
fn valid_pairs(pred: &DepthMap, gt: &DepthMap) -> Vec<(f64, f64)> {
    pred.values
        .iter()
        .zip(&gt.values)
        .zip(pred.valid.iter().zip(&gt.valid))
        .filter(|(_, (a, b))| **a && **b)
        .map(|((p, g), _)| (*p as f64, *g as f64))
        .collect()
}

/// Factor mapping the prediction's median onto the ground truth's, over the
/// jointly valid pixels.
pub fn median_scale_factor(pred: &DepthMap, gt: &DepthMap) -> Option<f64> {
    let pairs = valid_pairs(pred, gt);
    let mut p: Vec<f32> = pairs.iter().map(|x| x.0 as f32).collect();
    let mut g: Vec<f32> = pairs.iter().map(|x| x.1 as f32).collect();
    let (mp, mg) = (median_in_place(&mut p)?, median_in_place(&mut g)?);
    (mp > 0.0).then(|| mg as f64 / mp as f64)
}

/// Abs.Rel, RMSE and δ accuracies over pixels valid in both maps.
pub fn standard_metrics(pred: &DepthMap, gt: &DepthMap, median_scaling: bool) -> Result<MetricReport> {
    pred.check_same_shape(gt)?;
    let mut pairs = valid_pairs(pred, gt);
    if pairs.is_empty() {
        return Err(Error::NoValidPixels(format!("of size {}x{}", gt.width, gt.height)));
    }
    if median_scaling {
        if let Some(s) = median_scale_factor(pred, gt) {
            pairs.iter_mut().for_each(|p| p.0 *= s);
        }
    }
    let n = pairs.len() as f64;
    let (mut abs_rel, mut sq, mut d) = (0.0, 0.0, [0usize; 3]);
    for (p, g) in &pairs {
        abs_rel += (g - p).abs() / g;
        sq += (g - p) * (g - p);
        let ratio = (p / g).max(g / p);
        for (k, dk) in d.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *dk += 1;
            }
        }
    }
    Ok(MetricReport {
        abs_rel: abs_rel / n,
        rmse: (sq / n).sqrt(),
        delta1: d[0] as f64 / n,
        delta2: d[1] as f64 / n,
        delta3: d[2] as f64 / n,
        dbe_acc: None,
        n_valid: pairs.len(),
    })
}

/// Boolean per-pixel map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BoolMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}

/// Thresholded Sobel magnitude (normalized by 1/8) of log-depth. Pixels with
/// an invalid 3x3 neighbour are never boundaries; the image border replicates.
pub fn extract_boundaries(depth: &DepthMap, threshold: f64) -> BoolMap {
    let (w, h) = (depth.width, depth.height);
    let mut out = BoolMap::new(w, h);
    if w == 0 || h == 0 {
        return out;
    }
    let idx = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        yc * w + xc
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut win = [[0f64; 3]; 3];
            let mut ok = true;
            for (dy, row) in win.iter_mut().enumerate() {
                for (dx, v) in row.iter_mut().enumerate() {
                    let i = idx(x + dx as isize - 1, y + dy as isize - 1);
                    ok &= depth.valid[i];
                    *v = (depth.values[i] as f64).ln();
                }
            }
            if !ok {
                continue;
            }
            let gx = ((win[0][2] - win[0][0]) + 2.0 * (win[1][2] - win[1][0]) + (win[2][2] - win[2][0])) / 8.0;
            let gy = ((win[2][0] - win[0][0]) + 2.0 * (win[2][1] - win[0][1]) + (win[2][2] - win[0][2])) / 8.0;
            if (gx * gx + gy * gy).sqrt() > threshold {
                out.set(x as usize, y as usize, true);
            }
        }
    }
    out
}

/// Exact 1D squared distance transform of sampled function `f` (lower
/// envelope of parabolas). Infinite entries are not sites.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().expect("one boundary per site") {
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            z.push(s);
            break;
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance (pixels) from every pixel to the nearest set
/// pixel of `mask`, via separable squared-distance passes.
pub fn euclidean_distance_transform(mask: &BoolMap) -> Result<Vec<f64>> {
    let (w, h) = (mask.width, mask.height);
    if !mask.data.iter().any(|b| *b) {
        return Err(Error::EmptyMask);
    }
    let mut grid: Vec<f64> = mask.data.iter().map(|b| if *b { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    Ok(grid.into_iter().map(f64::sqrt).collect())
}

/// Boundary accuracy between explicit boundary maps: mean of the ground-truth
/// distance transform over predicted boundary pixels. `None` when either set
/// is empty.
pub fn dbe_from_boundaries(pred: &BoolMap, gt: &BoolMap) -> Result<Option<f64>> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Shape(format!(
            "boundary maps differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (np, ng) = (pred.count(), gt.count());
    if np == 0 || ng == 0 {
        log::info!("boundary accuracy undefined: {np} predicted, {ng} ground-truth boundary pixels");
        return Ok(None);
    }
    let e = euclidean_distance_transform(gt)?;
    let sum: f64 = e.iter().zip(&pred.data).filter(|(_, b)| **b).map(|(d, _)| *d).sum();
    Ok(Some(sum / np as f64))
}

/// Depth-boundary-error accuracy of `pred` against `gt`, in pixels.
pub fn dbe_accuracy(pred: &DepthMap, gt: &DepthMap, threshold: f64) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    dbe_from_boundaries(&extract_boundaries(pred, threshold), &extract_boundaries(gt, threshold))
}

/// All metrics for one frame.
pub fn evaluate_frame(pred: &DepthMap, gt: &DepthMap, opts: &MetricOptions) -> Result<MetricReport> {
    let mut report = standard_metrics(pred, gt, opts.median_scaling)?;
    report.dbe_acc = dbe_accuracy(pred, gt, opts.boundary_threshold)?;
    Ok(report)
}
