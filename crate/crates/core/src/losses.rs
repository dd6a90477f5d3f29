//! Training losses: photometric view reconstruction, geometric consistency,
//! boundary alignment against pseudo-depth, and semantic feature distillation,
//! plus the weighted stage totals.
//!
//! Every masked loss averages over valid pixels only and is exactly zero (with
//! a warning) when the mask is empty.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{shape_err, Error, Result};
use crate::maps::median_in_place;
use crate::nn::{self, box_filter3, sobel, stencil3};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const EDGE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// SSIM share of the photometric term.
    pub lambda: f64,
    /// Normal-map term of the boundary loss.
    pub theta: f64,
    /// Edge-map term of the boundary loss.
    pub vartheta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the semantic term in stage 2.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.85,
            theta: 0.1,
            vartheta: 0.1,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            epsilon: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda", self.lambda),
            ("theta", self.theta),
            ("vartheta", self.vartheta),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        if self.lambda > 1.0 {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }

    /// Weighted total as a tensor, for backpropagation. Absent terms count as zero.
    pub fn combine(
        &self,
        view: &Tensor,
        geo: &Tensor,
        bnd: Option<&Tensor>,
        sem: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut total = ((view * self.alpha)? + (geo * self.beta)?)?;
        if let Some(b) = bnd {
            total = (total + (b * self.gamma)?)?;
        }
        if let Some(s) = sem {
            total = (total + (s * self.epsilon)?)?;
        }
        Ok(total)
    }
}

/// Dissimilarity used to compare normal and edge maps in the boundary loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundarySimilarity {
    #[default]
    AbsDiff,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    pub boundary_similarity: BoundarySimilarity,
    /// Rescale pseudo-depth to the prediction's median before comparing.
    pub median_scale_pseudo: bool,
    /// Divide the prediction and the pseudo-depth by their own mean over the
    /// valid pixels (the prediction's mean stays in the graph), so the
    /// boundary term cannot be lowered by shrinking the global depth scale.
    pub scale_invariant_boundary: bool,
    /// Cosine per pixel over channels instead of over the flattened level.
    pub per_pixel_semantic: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            boundary_similarity: BoundarySimilarity::AbsDiff,
            median_scale_pseudo: true,
            scale_invariant_boundary: true,
            per_pixel_semantic: false,
        }
    }
}

/// Named loss terms of one step. `total` is the weighted recombination of the
/// other fields; skipped terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub stage: u8,
    pub view: f64,
    pub geo: f64,
    pub bnd: Option<f64>,
    pub sem: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn stage1(view: f64, geo: f64, bnd: Option<f64>, w: &LossWeights) -> Self {
        let mut b = Self { stage: 1, view, geo, bnd, sem: None, total: 0.0 };
        b.total = b.recombine(w);
        b
    }

    pub fn stage2(view: f64, geo: f64, bnd: Option<f64>, sem: f64, w: &LossWeights) -> Self {
        let mut b = Self { stage: 2, view, geo, bnd, sem: Some(sem), total: 0.0 };
        b.total = b.recombine(w);
        b
    }

    /// Stage-1 part of the total.
    pub fn stage1_total(&self, w: &LossWeights) -> f64 {
        w.alpha * self.view + w.beta * self.geo + w.gamma * self.bnd.unwrap_or(0.0)
    }

    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.stage1_total(w) + w.epsilon * self.sem.unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.view.is_finite()
            && self.geo.is_finite()
            && self.bnd.is_none_or(f64::is_finite)
            && self.sem.is_none_or(f64::is_finite)
            && self.total.is_finite()
    }

    /// Names of the non-finite terms.
    pub fn non_finite_terms(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, v: Option<f64>| {
            if v.is_some_and(|v| !v.is_finite()) {
                out.push(format!("{name}={}", v.unwrap_or_default()));
            }
        };
        check("view", Some(self.view));
        check("geo", Some(self.geo));
        check("bnd", self.bnd);
        check("sem", self.sem);
        check("total", Some(self.total));
        out
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

/// Boolean (u8) version of a 0/1 or boolean mask broadcast to `like`.
fn mask_u8(mask: &Tensor, like: &Tensor) -> Result<Tensor> {
    let m = if mask.dtype() == DType::U8 { mask.clone() } else { mask.ne(0.0)? };
    Ok(m.broadcast_as(like.shape())?.contiguous()?)
}

/// Mean of `values` over the pixels where `mask` is set; zero with a warning
/// when the mask is empty. Unselected values never reach the result.
fn masked_mean(values: &Tensor, mask: &Tensor, what: &str) -> Result<Tensor> {
    let m = mask_u8(mask, values)?;
    let count = nn::scalar(&m.to_dtype(DType::F64)?.sum_all()?)?;
    if count == 0.0 {
        log::warn!("{what}: empty valid mask, loss set to zero");
        return Ok(Tensor::zeros((), values.dtype(), values.device())?);
    }
    let zeros = values.zeros_like()?;
    let picked = m.where_cond(values, &zeros)?;
    Ok((picked.sum_all()? / count)?)
}

/// Per-pixel SSIM over 3x3 windows (replicate padding), same shape as the inputs.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "ssim")?;
    let mu_a = box_filter3(a)?;
    let mu_b = box_filter3(b)?;
    let mu_ab = (&mu_a * &mu_b)?;
    let mu_a2 = mu_a.sqr()?;
    let mu_b2 = mu_b.sqr()?;
    let sig_a = (box_filter3(&a.sqr()?)? - &mu_a2)?;
    let sig_b = (box_filter3(&b.sqr()?)? - &mu_b2)?;
    let sig_ab = (box_filter3(&(a * b)?)? - &mu_ab)?;
    let num = ((mu_ab * 2.0)? + SSIM_C1)?.mul(&((sig_ab * 2.0)? + SSIM_C2)?)?;
    let den = ((mu_a2 + mu_b2)? + SSIM_C1)?.mul(&((sig_a + sig_b)? + SSIM_C2)?)?;
    Ok(num.div(&den)?)
}

/// `(1-λ)|I - I'| + λ(1 - SSIM)/2`, channel-averaged and then averaged over
/// valid pixels. Both images are masked before the SSIM windows so pixels
/// outside the mask cannot influence the result.
pub fn view_reconstruction_loss(
    target: &Tensor,
    synthesized: &Tensor,
    valid: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    check_same(target, synthesized, "view reconstruction")?;
    let m = mask_u8(valid, target)?;
    let zeros = target.zeros_like()?;
    let a = m.where_cond(target, &zeros)?;
    let b = m.where_cond(synthesized, &zeros)?;
    let l1 = (&a - &b)?.abs()?;
    let dssim = ssim(&a, &b)?.affine(-0.5, 0.5)?.clamp(0.0, 1.0)?;
    let per_pixel = ((l1 * (1.0 - lambda))? + (dssim * lambda)?)?.mean_keepdim(1)?;
    masked_mean(&per_pixel, valid, "view reconstruction loss")
}

/// Mean over valid pixels of `|a - b| / (a + b)`.
pub fn geometric_consistency_loss(pred: &Tensor, warped: &Tensor, valid: &Tensor) -> Result<Tensor> {
    check_same(pred, warped, "geometric consistency")?;
    let m = mask_u8(valid, pred)?;
    let ones = pred.ones_like()?;
    let den = m.where_cond(&(pred + warped)?, &ones)?;
    let diff = (pred - warped)?.abs()?.div(&den)?;
    masked_mean(&diff, &m, "geometric consistency loss")
}

/// Central-difference derivatives with replicate padding.
fn central_diff(x: &Tensor) -> Result<(Tensor, Tensor)> {
    const DX: [[f64; 3]; 3] = [[0.0, 0.0, 0.0], [-0.5, 0.0, 0.5], [0.0, 0.0, 0.0]];
    const DY: [[f64; 3]; 3] = [[0.0, -0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.5, 0.0]];
    Ok((stencil3(x, DX)?, stencil3(x, DY)?))
}

/// Unit surface normals `(B, 3, H, W)` of a depth map, from `(-dx, -dy, 1)`.
pub fn depth_normals(depth: &Tensor) -> Result<Tensor> {
    let (gx, gy) = central_diff(depth)?;
    let n = Tensor::cat(&[gx.neg()?, gy.neg()?, depth.ones_like()?], 1)?;
    let norm = n.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(n.broadcast_div(&norm)?)
}

/// Sobel gradient magnitude `(B, 1, H, W)`.
pub fn edge_magnitude(depth: &Tensor) -> Result<Tensor> {
    let (gx, gy) = sobel(depth)?;
    Ok(((gx.sqr()? + gy.sqr()?)? + EDGE_EPS)?.sqrt()?)
}

/// Pixels whose whole 3x3 neighbourhood is valid (borders replicate).
fn erode3(mask: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = mask.dims4()?;
    let m = mask.to_dtype(DType::F32)?;
    let p = nn::pad_replicate1(&m)?;
    let mut acc = m.clone();
    for dy in 0..3 {
        for dx in 0..3 {
            acc = acc.minimum(&p.narrow(2, dy, h)?.narrow(3, dx, w)?)?;
        }
    }
    Ok(acc.ne(0.0)?)
}

/// Per-sample factor bringing the pseudo-depth median onto the prediction's.
fn median_ratio(pred: &Tensor, pseudo: &Tensor, valid: &Tensor) -> Result<Vec<f64>> {
    let b = pred.dim(0)?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let p = nn::to_vec_f64(&pred.get(i)?)?;
        let q = nn::to_vec_f64(&pseudo.get(i)?)?;
        let m = nn::to_vec_f64(&valid.get(i)?)?;
        let mut pv = Vec::new();
        let mut qv = Vec::new();
        for ((p, q), m) in p.iter().zip(&q).zip(&m) {
            if *m != 0.0 {
                pv.push(*p as f32);
                qv.push(*q as f32);
            }
        }
        let s = match (median_in_place(&mut pv), median_in_place(&mut qv)) {
            (Some(a), Some(b)) if b > 0.0 => a as f64 / b as f64,
            _ => 1.0,
        };
        out.push(s);
    }
    Ok(out)
}

/// Mean over the masked pixels of every sample, `(B, 1, 1, 1)`; samples with
/// an empty mask get 1.
fn per_sample_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask_u8(mask, x)?;
    let picked = m.where_cond(x, &x.zeros_like()?)?;
    let count = m.to_dtype(x.dtype())?.sum_keepdim((1, 2, 3))?;
    let empty = count.eq(0.0)?;
    let sum = empty.where_cond(&count.ones_like()?, &picked.sum_keepdim((1, 2, 3))?)?;
    let count = empty.where_cond(&count.ones_like()?, &count)?;
    Ok(sum.div(&count)?)
}

/// Normal-map and Sobel-edge agreement between the predicted depth and the
/// pseudo-depth, each `(B, 1, H, W)`. Pixels where the pseudo-depth is not
/// positive, and their 3x3 neighbours, are excluded.
pub fn boundary_alignment_loss(
    pred: &Tensor,
    pseudo: &Tensor,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<Tensor> {
    check_same(pred, pseudo, "boundary alignment")?;
    let (b, c, _, _) = pred.dims4()?;
    if c != 1 {
        return shape_err(format!("boundary alignment expects 1-channel depth, got {c}"));
    }
    let pd_valid = pseudo.gt(0.0)?;
    let valid = erode3(&pd_valid)?;
    let (pred, pseudo) = if opts.scale_invariant_boundary {
        (
            pred.broadcast_div(&per_sample_mean(pred, &pd_valid)?)?,
            pseudo.broadcast_div(&per_sample_mean(pseudo, &pd_valid)?)?,
        )
    } else {
        (pred.clone(), pseudo.clone())
    };
    let pseudo = if opts.median_scale_pseudo && !opts.scale_invariant_boundary {
        let s = median_ratio(&pred.detach(), &pseudo, &pd_valid)?;
        let s = Tensor::from_vec(s, (b, 1, 1, 1), pred.device())?.to_dtype(pred.dtype())?;
        pseudo.broadcast_mul(&s)?
    } else {
        pseudo.clone()
    };
    let pseudo = pseudo.detach();
    let n_pred = depth_normals(&pred)?;
    let n_pd = depth_normals(&pseudo)?;
    let e_pred = edge_magnitude(&pred)?;
    let e_pd = edge_magnitude(&pseudo)?;
    let (f_n, f_b) = match opts.boundary_similarity {
        BoundarySimilarity::AbsDiff => (
            masked_mean(&(n_pred - n_pd)?.abs()?, &valid, "boundary loss (normals)")?,
            masked_mean(&(e_pred - e_pd)?.abs()?, &valid, "boundary loss (edges)")?,
        ),
        BoundarySimilarity::Cosine => {
            let cos_n = (n_pred * n_pd)?.sum_keepdim(1)?;
            let f_n = masked_mean(&cos_n.affine(-1.0, 1.0)?, &valid, "boundary loss (normals)")?;
            (f_n, masked_cosine_dissimilarity(&e_pred, &e_pd, &valid)?)
        }
    };
    Ok(((f_n * weights.theta)? + (f_b * weights.vartheta)?)?)
}

/// `1 - cos` between two maps restricted to the mask, averaged over the batch.
fn masked_cosine_dissimilarity(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask_u8(mask, a)?;
    let zeros = a.zeros_like()?;
    let a = m.where_cond(a, &zeros)?.flatten_from(1)?;
    let b = m.where_cond(b, &zeros)?.flatten_from(1)?;
    let cos = cosine_rows(&a, &b, "edge map")?;
    Ok(cos.mean_all()?.affine(-1.0, 1.0)?)
}

/// Row-wise cosine similarity of `(B, N)` matrices; zero-norm rows give 0.
fn cosine_rows(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    let dot = (a * b)?.sum(1)?;
    let den = (a.sqr()?.sum(1)?.sqrt()? * b.sqr()?.sum(1)?.sqrt()?)?;
    let ok = den.gt(0.0)?;
    if nn::to_vec_f64(&ok.to_dtype(DType::F32)?)?.contains(&0.0) {
        log::warn!("{what}: zero-norm features, cosine similarity set to 0");
    }
    let safe = ok.where_cond(&den, &den.ones_like()?)?;
    Ok(ok.where_cond(&dot.div(&safe)?, &dot.zeros_like()?)?)
}

/// `1 - mean over levels of cos(student, teacher)`, each level's features
/// flattened per sample; the batch mean is taken last. The teacher is
/// detached, so no gradient ever reaches it.
pub fn semantic_information_loss(
    student: &FeaturePyramid,
    teacher: &FeaturePyramid,
    per_pixel: bool,
) -> Result<Tensor> {
    student.check_compatible(teacher)?;
    let n = student.levels.len();
    let mut sims = Vec::with_capacity(n);
    for (i, (s, t)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        let t = t.detach();
        let what = format!("semantic loss level {}", i + 1);
        let cos = if per_pixel {
            let (b, c, h, w) = s.dims4()?;
            let s = s.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
            let t = t.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
            cosine_rows(&s, &t, &what)?
        } else {
            cosine_rows(&s.flatten_from(1)?, &t.flatten_from(1)?, &what)?
        };
        sims.push(cos.mean_all()?);
    }
    let mean = (Tensor::stack(&sims, 0)?.sum_all()? / n as f64)?;
    Ok(mean.affine(-1.0, 1.0)?)
}
