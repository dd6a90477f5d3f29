mod common;

use candle_core::{DType, Device, Tensor};
use edge_depth::backbone::FeaturePyramid;
use edge_depth::losses::{
    boundary_alignment_loss, geometric_consistency_loss, semantic_information_loss, view_reconstruction_loss,
    LossBundle, LossOptions, LossWeights,
};
use edge_depth::nn::scalar;
use proptest::prelude::*;

fn map(w: usize, h: usize, v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, 1, h, w), &Device::Cpu).unwrap()
}

/// Boundary loss by explicit loops: central-difference normals, Sobel/8
/// magnitudes, replicate borders, and a 3x3-eroded pseudo-depth mask.
fn boundary_oracle(pred: &[f64], pd: &[f64], w: usize, h: usize, scale_invariant: bool) -> f64 {
    let valid: Vec<bool> = pd.iter().map(|v| *v > 0.0).collect();
    let mean = |x: &[f64]| {
        let s: Vec<f64> = x.iter().zip(&valid).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let (sp, sq) = if scale_invariant { (mean(pred), mean(pd)) } else { (1.0, 1.0) };
    let p: Vec<f64> = pred.iter().map(|v| v / sp).collect();
    let q: Vec<f64> = pd.iter().map(|v| v / sq).collect();
    let at = |m: &[f64], x: isize, y: isize| {
        m[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    let normal = |m: &[f64], x: isize, y: isize| {
        let gx = (at(m, x + 1, y) - at(m, x - 1, y)) / 2.0;
        let gy = (at(m, x, y + 1) - at(m, x, y - 1)) / 2.0;
        let n = (gx * gx + gy * gy + 1.0).sqrt();
        [-gx / n, -gy / n, 1.0 / n]
    };
    let edge = |m: &[f64], x: isize, y: isize| {
        let gx = ((at(m, x + 1, y - 1) - at(m, x - 1, y - 1))
            + 2.0 * (at(m, x + 1, y) - at(m, x - 1, y))
            + (at(m, x + 1, y + 1) - at(m, x - 1, y + 1)))
            / 8.0;
        let gy = ((at(m, x - 1, y + 1) - at(m, x - 1, y - 1))
            + 2.0 * (at(m, x, y + 1) - at(m, x, y - 1))
            + (at(m, x + 1, y + 1) - at(m, x + 1, y - 1)))
            / 8.0;
        (gx * gx + gy * gy + 1e-12).sqrt()
    };
    let (mut fn_sum, mut fb_sum, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let eroded = (-1..=1).all(|dy| {
                (-1..=1).all(|dx| {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    valid[yy * w + xx]
                })
            });
            if !eroded {
                continue;
            }
            let (a, b) = (normal(&p, x, y), normal(&q, x, y));
            fn_sum += (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>();
            fb_sum += (edge(&p, x, y) - edge(&q, x, y)).abs();
            n += 1;
        }
    }
    let w8 = LossWeights::default();
    w8.theta * fn_sum / (3 * n) as f64 + w8.vartheta * fb_sum / n as f64
}

#[test]
fn identities_and_ranges() {
    common::loss_identities().unwrap();
}

#[test]
fn boundary_loss_matches_hand_computation_on_a_step_edge() {
    let (w, h) = (8, 8);
    let pd: Vec<f64> = (0..w * h).map(|i| if i % w < 4 { 2.0 } else { 4.0 }).collect();
    let mut pred: Vec<f64> = (0..w * h).map(|i| if i % w < 5 { 2.2 } else { 3.5 }).collect();
    pred[10] = 2.7;
    let mut pd_holed = pd.clone();
    pd_holed[63] = 0.0;
    for pd in [pd, pd_holed] {
        for si in [false, true] {
            let opts = LossOptions { scale_invariant_boundary: si, median_scale_pseudo: false, ..Default::default() };
            let got = scalar(
                &boundary_alignment_loss(&map(w, h, &pred), &map(w, h, &pd), &LossWeights::default(), &opts).unwrap(),
            )
            .unwrap();
            let want = boundary_oracle(&pred, &pd, w, h, si);
            assert!((got - want).abs() < 1e-12, "scale-invariant {si}: {got} vs {want}");
        }
    }
}

#[test]
fn missing_terms_recombine_as_zero() {
    let w = LossWeights::default();
    let b = LossBundle::stage1(0.3, 0.2, None, &w);
    assert_eq!(b.total, 0.5);
    let b = LossBundle::stage2(0.3, 0.2, Some(0.1), 1.5, &w);
    assert!((b.total - (0.3 + 0.2 + 0.1 + 0.015)).abs() < 1e-12);
    assert!((b.recombine(&w) - b.total).abs() < 1e-12);
}

#[test]
fn empty_mask_gives_zero_loss() {
    let a = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
    let b = (&a * 2.0).unwrap();
    let none = a.zeros_like().unwrap();
    assert_eq!(scalar(&geometric_consistency_loss(&a, &b, &none).unwrap()).unwrap(), 0.0);
    let pd = a.zeros_like().unwrap();
    let bnd = boundary_alignment_loss(&a, &pd, &LossWeights::default(), &LossOptions::default()).unwrap();
    assert_eq!(scalar(&bnd).unwrap(), 0.0);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
    let b = Tensor::ones((1, 1, 4, 5), DType::F64, &Device::Cpu).unwrap();
    assert!(geometric_consistency_loss(&a, &b, &a).is_err());
    assert!(boundary_alignment_loss(&a, &b, &LossWeights::default(), &LossOptions::default()).is_err());
}

fn tensor(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn pyramid(v: &[f64]) -> FeaturePyramid {
    FeaturePyramid {
        levels: (0..5).map(|i| tensor(v[i * 8..(i + 1) * 8].to_vec(), (1, 2, 2, 2))).collect(),
        strides: vec![2, 4, 8, 16, 32],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn semantic_loss_is_within_zero_and_two(
        a in prop::collection::vec(-5.0f64..5.0, 40),
        b in prop::collection::vec(-5.0f64..5.0, 40),
        per_pixel in any::<bool>(),
    ) {
        let v = scalar(&semantic_information_loss(&pyramid(&a), &pyramid(&b), per_pixel).unwrap()).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v));
    }

    #[test]
    fn geometric_loss_is_below_one(
        a in prop::collection::vec(1e-4f64..1e3, 16),
        b in prop::collection::vec(1e-4f64..1e3, 16),
    ) {
        let m = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let v = scalar(&geometric_consistency_loss(&tensor(a, (1, 1, 4, 4)), &tensor(b, (1, 1, 4, 4)), &m).unwrap()).unwrap();
        prop_assert!((0.0..1.0).contains(&v));
    }

    #[test]
    fn view_loss_vanishes_on_identical_images(img in prop::collection::vec(0.0f64..1.0, 48), lambda in 0.0f64..1.0) {
        let t = tensor(img, (1, 3, 4, 4));
        let m = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let v = scalar(&view_reconstruction_loss(&t, &t, &m, lambda).unwrap()).unwrap();
        prop_assert!(v.abs() < 1e-12);
    }

    #[test]
    fn boundary_loss_ignores_global_depth_scale(
        pred in prop::collection::vec(0.5f64..5.0, 36),
        pd in prop::collection::vec(0.5f64..5.0, 36),
        s in 0.05f64..20.0,
    ) {
        let w = LossWeights::default();
        let o = LossOptions::default();
        let p = tensor(pred, (1, 1, 6, 6));
        let q = tensor(pd, (1, 1, 6, 6));
        let a = scalar(&boundary_alignment_loss(&p, &q, &w, &o).unwrap()).unwrap();
        let b = scalar(&boundary_alignment_loss(&(&p * s).unwrap(), &q, &w, &o).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn stage_totals_recombine(
        v in 0.0f64..1.0, g in 0.0f64..1.0, b in 0.0f64..1.0, s in 0.0f64..2.0, eps in 0.0f64..1.0,
    ) {
        let w = LossWeights { epsilon: eps, ..Default::default() };
        let one = LossBundle::stage1(v, g, Some(b), &w);
        let two = LossBundle::stage2(v, g, Some(b), s, &w);
        prop_assert!((two.total - one.total - eps * s).abs() < 1e-7);
        prop_assert!((two.recombine(&w) - two.total).abs() < 1e-7);
    }
}
