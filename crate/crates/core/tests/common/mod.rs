//! Oracles and checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use edge_depth::backbone::{EncoderConfig, FeaturePyramid};
use edge_depth::data::{generate_synthetic_sequence, SceneSpec};
use edge_depth::decoder::{zero_projection, SceBlock};
use edge_depth::geometry::{warp_depth, warp_image, Intrinsics};
use edge_depth::losses::{
    boundary_alignment_loss, geometric_consistency_loss, semantic_information_loss, view_reconstruction_loss,
    BoundarySimilarity, LossOptions, LossWeights,
};
use edge_depth::maps::DepthMap;
use edge_depth::metrics::{
    dbe_accuracy, dbe_from_boundaries, euclidean_distance_transform, extract_boundaries, standard_metrics, BoolMap,
    DEFAULT_BOUNDARY_THRESHOLD,
};
use edge_depth::nn::{scalar, to_vec_f64};
use edge_depth::params::ParamStore;
use edge_depth::trainer::{DepthModel, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn random_mask(shape: &[usize], p_valid: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| if rng.random_bool(p_valid) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_PROBES: usize = 10;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub probes: usize,
}

fn set_element(var: &Var, i: usize, value: f64) {
    let mut v = to_vec_f64(var.as_tensor()).unwrap();
    v[i] = value;
    var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
}

/// Centered finite differences at `probes` random coordinates of `vars`.
/// Probes are drawn among coordinates whose analytic gradient is at least
/// 1e-3 of the largest one, so the relative error is meaningful.
pub fn finite_difference_check(
    name: &'static str,
    vars: &[Var],
    f: &dyn Fn() -> Tensor,
    probes: usize,
    seed: u64,
) -> GradCheck {
    let grads = f().backward().unwrap();
    let mut coords = Vec::new();
    for (vi, v) in vars.iter().enumerate() {
        let g = grads.get(v).map(|g| to_vec_f64(g).unwrap()).unwrap_or_else(|| vec![0.0; v.elem_count()]);
        coords.extend(g.into_iter().enumerate().map(|(i, a)| (vi, i, a)));
    }
    let gmax = coords.iter().map(|c| c.2.abs()).fold(0.0, f64::max);
    assert!(gmax > 0.0, "{name}: gradient is identically zero");
    coords.retain(|c| c.2.abs() >= 1e-3 * gmax);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let (vi, i, analytic) = coords[rng.random_range(0..coords.len())];
        let var = &vars[vi];
        let x0 = to_vec_f64(var.as_tensor()).unwrap()[i];
        let h = FD_STEP * x0.abs().max(1.0);
        set_element(var, i, x0 + h);
        let fp = scalar(&f()).unwrap();
        set_element(var, i, x0 - h);
        let fm = scalar(&f()).unwrap();
        set_element(var, i, x0);
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
    }
    GradCheck { name, max_rel_err: worst, probes }
}

fn var(t: Tensor) -> Var {
    Var::from_tensor(&t).unwrap()
}

fn toy_pyramid(rng: &mut ChaCha8Rng, channels: usize) -> Vec<Tensor> {
    (0..5).map(|i| uniform(&[2, channels, 16 >> i, 16 >> i], -1.0, 1.0, rng)).collect()
}

/// Every loss term, the warping chain, the depth network and PoseNet, in f64.
pub fn gradient_suite() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let w = LossWeights::default();

    let target = uniform(&[2, 3, 12, 12], 0.0, 1.0, &mut rng);
    let synth = var(uniform(&[2, 3, 12, 12], 0.0, 1.0, &mut rng));
    let valid = random_mask(&[2, 1, 12, 12], 0.8, &mut rng);
    out.push(finite_difference_check(
        "view reconstruction",
        &[synth.clone()],
        &|| view_reconstruction_loss(&target, synth.as_tensor(), &valid, w.lambda).unwrap(),
        GRAD_PROBES,
        1,
    ));

    let pred = var(uniform(&[2, 1, 12, 12], 0.5, 3.0, &mut rng));
    let warped = var(uniform(&[2, 1, 12, 12], 0.5, 3.0, &mut rng));
    out.push(finite_difference_check(
        "geometric consistency",
        &[pred.clone(), warped.clone()],
        &|| geometric_consistency_loss(pred.as_tensor(), warped.as_tensor(), &valid).unwrap(),
        GRAD_PROBES,
        2,
    ));

    let pseudo = (uniform(&[2, 1, 12, 12], 0.5, 3.0, &mut rng) * random_mask(&[2, 1, 12, 12], 0.95, &mut rng)).unwrap();
    let variants = [
        ("boundary alignment", LossOptions::default()),
        (
            "boundary alignment (median-scaled)",
            LossOptions { scale_invariant_boundary: false, ..Default::default() },
        ),
        (
            "boundary alignment (cosine)",
            LossOptions { boundary_similarity: BoundarySimilarity::Cosine, ..Default::default() },
        ),
    ];
    for (k, (name, opts)) in variants.into_iter().enumerate() {
        out.push(finite_difference_check(
            name,
            &[pred.clone()],
            &|| boundary_alignment_loss(pred.as_tensor(), &pseudo, &w, &opts).unwrap(),
            GRAD_PROBES,
            3 + k as u64,
        ));
    }

    let strides = vec![2, 4, 8, 16, 32];
    let student: Vec<Var> = toy_pyramid(&mut rng, 4).into_iter().map(var).collect();
    let teacher = FeaturePyramid { levels: toy_pyramid(&mut rng, 4), strides: strides.clone() };
    for (name, per_pixel) in [("semantic information", false), ("semantic information (per pixel)", true)] {
        out.push(finite_difference_check(
            name,
            &student,
            &|| {
                let s = FeaturePyramid {
                    levels: student.iter().map(|v| v.as_tensor().clone()).collect(),
                    strides: strides.clone(),
                };
                semantic_information_loss(&s, &teacher, per_pixel).unwrap()
            },
            GRAD_PROBES,
            7,
        ));
    }

    let k = Intrinsics::new(14.0, 14.0, 7.5, 7.5);
    let source = uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let tgt = uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let depth = var(uniform(&[1, 1, 16, 16], 2.0, 4.0, &mut rng));
    let src_depth = uniform(&[1, 1, 16, 16], 2.0, 4.0, &mut rng);
    let pose = var(Tensor::new(&[[0.01f64, -0.02, 0.015, 0.05, -0.03, 0.02]], &Device::Cpu).unwrap());
    out.push(finite_difference_check(
        "warped view reconstruction (depth, pose)",
        &[depth.clone(), pose.clone()],
        &|| {
            let wr = warp_image(&source, depth.as_tensor(), pose.as_tensor(), &k).unwrap();
            view_reconstruction_loss(&tgt, &wr.synthesized, &wr.valid, w.lambda).unwrap()
        },
        GRAD_PROBES,
        8,
    ));
    out.push(finite_difference_check(
        "warped geometric consistency (depth, pose)",
        &[depth.clone(), pose.clone()],
        &|| {
            let wr = warp_depth(&src_depth, depth.as_tensor(), pose.as_tensor(), &k).unwrap();
            geometric_consistency_loss(depth.as_tensor(), &wr.synthesized, &wr.valid).unwrap()
        },
        GRAD_PROBES,
        9,
    ));

    let cfg = ExperimentConfig::default();
    let model = DepthModel::new(&cfg, DType::F64).unwrap();
    let img = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let img2 = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let probe_d = uniform(&[1, 1, 32, 32], -1.0, 1.0, &mut rng);
    let probe_p = uniform(&[1, 6], -1.0, 1.0, &mut rng);
    let vars_with = |prefixes: &[&str]| -> Vec<Var> {
        model
            .store()
            .vars()
            .into_iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v)
            .collect()
    };
    out.push(finite_difference_check(
        "depth network",
        &vars_with(&["encoder.", "decoder."]),
        &|| (model.depth(&img).unwrap().0 * &probe_d).unwrap().sum_all().unwrap(),
        GRAD_PROBES,
        10,
    ));
    out.push(finite_difference_check(
        "pose network",
        &vars_with(&["posenet."]),
        &|| (model.pose(&img, &img2).unwrap() * &probe_p).unwrap().sum_all().unwrap(),
        GRAD_PROBES,
        11,
    ));
    out
}

// ----------------------------------------------------------- loss identities

pub fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = LossWeights::default();
    let img = uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let depth = uniform(&[2, 1, 16, 16], 0.5, 5.0, &mut rng);
    let ones = Tensor::ones((2, 1, 16, 16), DType::F64, &Device::Cpu).map_err(e)?;

    let view = scalar(&view_reconstruction_loss(&img, &img, &ones, w.lambda).map_err(e)?).map_err(e)?;
    let geo = scalar(&geometric_consistency_loss(&depth, &depth, &ones).map_err(e)?).map_err(e)?;
    let bnd = scalar(&boundary_alignment_loss(&depth, &depth, &w, &LossOptions::default()).map_err(e)?).map_err(e)?;
    ensure!(view.abs() < 1e-12, "L_view on identical images = {view}");
    ensure!(geo.abs() < 1e-12, "L_geo on identical depths = {geo}");
    ensure!(bnd.abs() < 1e-12, "L_bnd on identical depths = {bnd}");

    let strides = vec![2, 4, 8, 16, 32];
    let feats = FeaturePyramid { levels: toy_pyramid(&mut rng, 4), strides: strides.clone() };
    let neg = FeaturePyramid {
        levels: feats.levels.iter().map(|t| t.neg().unwrap()).collect(),
        strides: strides.clone(),
    };
    let scaled = FeaturePyramid {
        levels: feats.levels.iter().map(|t| (t * 3.5).unwrap()).collect(),
        strides: strides.clone(),
    };
    let sem = |a: &FeaturePyramid, b: &FeaturePyramid| scalar(&semantic_information_loss(a, b, false).unwrap()).unwrap();
    let (same, par, anti) = (sem(&feats, &feats), sem(&feats, &scaled), sem(&feats, &neg));
    ensure!(same.abs() < 1e-12, "L_sem(F, F) = {same}");
    ensure!(par.abs() < 1e-12, "L_sem on parallel features = {par}");
    ensure!((anti - 2.0).abs() < 1e-12, "L_sem on anti-parallel features = {anti}");
    for _ in 0..50 {
        let other = FeaturePyramid { levels: toy_pyramid(&mut rng, 4), strides: strides.clone() };
        let v = sem(&feats, &other);
        ensure!((0.0..=2.0).contains(&v), "L_sem out of [0, 2]: {v}");
    }

    let mut geo_max = 0.0f64;
    for _ in 0..50 {
        let a = uniform(&[1, 1, 8, 8], 1e-3, 100.0, &mut rng);
        let b = uniform(&[1, 1, 8, 8], 1e-3, 100.0, &mut rng);
        let mask = Tensor::ones((1, 1, 8, 8), DType::F64, &Device::Cpu).map_err(e)?;
        geo_max = geo_max.max(scalar(&geometric_consistency_loss(&a, &b, &mask).map_err(e)?).map_err(e)?);
    }
    ensure!(geo_max < 1.0, "L_geo reached {geo_max}");

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (v, g, b, s) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>(), 2.0 * rng.random::<f64>());
        let w = LossWeights {
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            gamma: rng.random_range(0.0..2.0),
            epsilon: rng.random_range(0.0..0.1),
            ..Default::default()
        };
        let t = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        let total1 = scalar(&w.combine(&t(v), &t(g), Some(&t(b)), None).map_err(e)?).map_err(e)?;
        let total2 = scalar(&w.combine(&t(v), &t(g), Some(&t(b)), Some(&t(s))).map_err(e)?).map_err(e)?;
        worst = worst.max((total1 - (w.alpha * v + w.beta * g + w.gamma * b)).abs());
        worst = worst.max((total2 - (w.alpha * v + w.beta * g + w.gamma * b + w.epsilon * s)).abs());
    }
    ensure!(worst < 1e-7, "stage totals deviate from recombination by {worst}");
    Ok(format!("identities exact, max L_geo {geo_max:.3}, recombination error {worst:.1e}"))
}

// --------------------------------------------------------------- warp oracle

/// Photometric and geometric errors of warping with GT depth and pose.
pub fn warp_errors(spec: &SceneSpec, target: usize, source: usize) -> (f64, f64, f64) {
    let seq = generate_synthetic_sequence(spec).unwrap();
    let pose = seq.relative_pose(target, source).to_tensor(DType::F64).unwrap();
    let t = &seq.frames[target];
    let s = &seq.frames[source];
    let td = t.depth.to_tensor(DType::F64).unwrap();
    let sd = s.depth.to_tensor(DType::F64).unwrap();
    let w = warp_image(&s.image.to_tensor(DType::F64).unwrap(), &td, &pose, &seq.intrinsics).unwrap();
    let diff = (&w.synthesized - t.image.to_tensor(DType::F64).unwrap()).unwrap().abs().unwrap();
    let mask = w.valid.broadcast_as(diff.shape()).unwrap();
    let n = scalar(&mask.sum_all().unwrap()).unwrap();
    let photo = scalar(&(diff * &mask).unwrap().sum_all().unwrap()).unwrap() / n;
    let wd = warp_depth(&sd, &td, &pose, &seq.intrinsics).unwrap();
    let geo = scalar(&geometric_consistency_loss(&td, &wd.synthesized, &wd.valid).unwrap()).unwrap();
    (photo, geo, w.valid_fraction().unwrap())
}

pub fn warp_oracle() -> Check {
    let t0 = std::time::Instant::now();
    let spec = SceneSpec::corner(64, 64, 4, 7);
    let mut worst = (0.0f64, 0.0f64);
    for (t, s) in [(1, 0), (0, 1), (2, 3)] {
        let (photo, geo, frac) = warp_errors(&spec, t, s);
        ensure!(frac > 0.5, "only {frac:.2} of the pixels are valid for {t}<-{s}");
        worst = (worst.0.max(photo), worst.1.max(geo));
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(worst.0 < 2.0 / 255.0, "photometric error {:.5} >= 2/255", worst.0);
    ensure!(worst.1 < 1e-3, "Diff_geo {:.2e} >= 1e-3", worst.1);
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("photometric {:.2e}, Diff_geo {:.2e}, {secs:.2}s", worst.0, worst.1))
}

// ------------------------------------------------------------ metric oracles

pub fn edt_brute_force(mask: &BoolMap) -> Vec<f64> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut best = i64::MAX;
            for gy in 0..h {
                for gx in 0..w {
                    if mask.get(gx as usize, gy as usize) {
                        best = best.min((x - gx).pow(2) + (y - gy).pow(2));
                    }
                }
            }
            out.push((best as f64).sqrt());
        }
    }
    out
}

/// Mean over predicted boundary pixels of the distance to the closest
/// ground-truth boundary pixel, summed in row-major order.
pub fn dbe_double_sum(pred: &BoolMap, gt: &BoolMap) -> Option<f64> {
    let (w, h) = (pred.width, pred.height);
    let (mut sum, mut n) = (0.0, 0usize);
    let mut any_gt = false;
    for y in 0..h {
        for x in 0..w {
            if !pred.get(x, y) {
                continue;
            }
            let mut best = f64::INFINITY;
            for gy in 0..h {
                for gx in 0..w {
                    if gt.get(gx, gy) {
                        any_gt = true;
                        let d = (((x as i64 - gx as i64).pow(2) + (y as i64 - gy as i64).pow(2)) as f64).sqrt();
                        best = best.min(d);
                    }
                }
            }
            sum += best;
            n += 1;
        }
    }
    (n > 0 && any_gt).then(|| sum / n as f64)
}

pub fn random_bool_map(rng: &mut ChaCha8Rng) -> BoolMap {
    let w = rng.random_range(8..=16);
    let h = rng.random_range(8..=16);
    let p = rng.random_range(0.02..0.5);
    let mut m = BoolMap::new(w, h);
    for v in m.data.iter_mut() {
        *v = rng.random_bool(p);
    }
    if m.count() == 0 {
        let i = rng.random_range(0..m.data.len());
        m.data[i] = true;
    }
    m
}

/// A random piecewise-constant depth map: background plane plus rectangles.
pub fn random_boundary_scene(rng: &mut ChaCha8Rng, w: usize, h: usize) -> DepthMap {
    let mut v = vec![rng.random_range(3.0f32..6.0); w * h];
    for _ in 0..rng.random_range(1..4) {
        let (x0, y0) = (rng.random_range(0..w - 3), rng.random_range(0..h - 3));
        let (x1, y1) = (rng.random_range(x0 + 2..w), rng.random_range(y0 + 2..h));
        let d = rng.random_range(0.8f32..2.5);
        for y in y0..y1 {
            for x in x0..x1 {
                v[y * w + x] = d;
            }
        }
    }
    DepthMap::from_values(w, h, v).unwrap()
}

pub fn edt_dbe_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..100 {
        let m = random_bool_map(&mut rng);
        let fast = euclidean_distance_transform(&m).map_err(e)?;
        ensure!(fast == edt_brute_force(&m), "EDT differs from brute force on mask {case}");
    }
    for case in 0..20 {
        let gt = random_boundary_scene(&mut rng, 24, 20);
        let pred = random_boundary_scene(&mut rng, 24, 20);
        let got = dbe_accuracy(&pred, &gt, DEFAULT_BOUNDARY_THRESHOLD).map_err(e)?;
        let want = dbe_double_sum(
            &extract_boundaries(&pred, DEFAULT_BOUNDARY_THRESHOLD),
            &extract_boundaries(&gt, DEFAULT_BOUNDARY_THRESHOLD),
        );
        ensure!(got == want, "DBE case {case}: {got:?} vs double sum {want:?}");
        ensure!(got.is_some(), "DBE case {case} has no boundaries");
    }
    for shift in 1..6 {
        let (mut p, mut g) = (BoolMap::new(16, 12), BoolMap::new(16, 12));
        for y in 0..12 {
            p.set(4, y, true);
            g.set(4 + shift, y, true);
        }
        let d = dbe_from_boundaries(&p, &g).map_err(e)?;
        ensure!(d == Some(shift as f64), "line shifted by {shift} gives {d:?}");
    }
    Ok("100 EDT masks, 20 DBE cases and 5 line shifts exact".into())
}

pub fn metric_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..10 {
        let gt = random_boundary_scene(&mut rng, 20, 16);
        let same = standard_metrics(&gt, &gt, false).map_err(e)?;
        let dbe = dbe_accuracy(&gt, &gt, DEFAULT_BOUNDARY_THRESHOLD).map_err(e)?;
        ensure!(
            same.abs_rel == 0.0 && same.rmse == 0.0 && same.delta1 == 1.0 && dbe == Some(0.0),
            "pred = gt case {case}: {same:?} dbe {dbe:?}"
        );
        let up = standard_metrics(&gt.scaled(1.2), &gt, false).map_err(e)?;
        ensure!((up.abs_rel - 0.2).abs() < 1e-6, "pred = 1.2 gt: abs_rel {}", up.abs_rel);
        ensure!(up.delta1 == 1.0, "pred = 1.2 gt: delta1 {}", up.delta1);
        let noisy: Vec<f32> = gt.values.iter().map(|v| v * rng.random_range(0.5f32..2.0)).collect();
        let noisy = DepthMap::from_values(gt.width, gt.height, noisy).map_err(e)?;
        for scaling in [false, true] {
            let r = standard_metrics(&noisy, &gt, scaling).map_err(e)?;
            ensure!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3, "delta not monotone: {r:?}");
        }
    }
    Ok("exact on 10 scenes".into())
}

// ---------------------------------------------------------------- SCE contract

pub fn sce_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut n = 0;
    let widths = [EncoderConfig::toy().stage_channels, EncoderConfig::wide().stage_channels];
    for (i, &c) in widths.iter().flatten().enumerate() {
        let i = i % 5;
        let level = i + 1;
        let side = 32 >> level;
        for ratio in [2.0, 4.0, 8.0] {
            let store = ParamStore::new(DType::F64);
            let mut block = SceBlock::new(&store.root().pp("sce"), level, c, ratio).map_err(e)?;
            let x = uniform(&[2, c, side.max(1), side.max(1)], -1.0, 1.0, &mut rng);
            let y = block.forward(&x).map_err(e)?;
            ensure!(y.dims() == x.dims(), "level {level} ratio {ratio}: {:?} -> {:?}", x.dims(), y.dims());
            ensure!(
                block.pw.out_channels() == (c as f64 * ratio) as usize,
                "level {level} ratio {ratio}: hidden width {}",
                block.pw.out_channels()
            );
            zero_projection(&mut block).map_err(e)?;
            let id = block.forward(&x).map_err(e)?;
            let diff = scalar(&(id - &x).map_err(e)?.abs().map_err(e)?.max_all().map_err(e)?).map_err(e)?;
            ensure!(diff == 0.0, "level {level} ratio {ratio}: zero residual is not the identity ({diff})");
            n += 1;
        }
    }
    Ok(format!("{n} level/ratio combinations"))
}
