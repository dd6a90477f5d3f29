//! Relative camera pose: the 6-DoF type, its matrix forms and the PoseNet
//! regressor.
//!
//! Convention: a pose maps points from the target camera frame into the
//! source camera frame, `p_src = R * p_tgt + t`.

use candle_core::{DType, Device, Tensor};
use nalgebra::{Isometry3, Matrix3, Matrix4, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Conv2d, ConvSpec};
use crate::params::{Init, Scope};

/// Axis-angle rotation (radians) plus translation (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        let r = Vector3::from(self.rotation);
        Isometry3::from_parts(
            Translation3::from(Vector3::from(self.translation)),
            UnitQuaternion::from_scaled_axis(r),
        )
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let r = iso.rotation.scaled_axis();
        let t = iso.translation.vector;
        Self {
            rotation: [r.x, r.y, r.z],
            translation: [t.x, t.y, t.z],
        }
    }

    /// Rotation matrix via Rodrigues' formula, with a series expansion near
    /// zero angle.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = Vector3::from(self.rotation);
        let theta2 = r.norm_squared();
        let k = r.cross_matrix();
        let (a, b) = if theta2 < 1e-8 {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let theta = theta2.sqrt();
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Matrix3::identity() + k * a + k * k * b
    }

    /// 4x4 homogeneous rigid transform.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m[(0, 3)] = self.translation[0];
        m[(1, 3)] = self.translation[1];
        m[(2, 3)] = self.translation[2];
        m
    }

    /// Axis-angle pose of a rigid 4x4 matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let rot = Rotation3::from_matrix_unchecked(r);
        let a = rot.scaled_axis();
        Self {
            rotation: [a.x, a.y, a.z],
            translation: [m[(0, 3)], m[(1, 3)], m[(2, 3)]],
        }
    }

    pub fn inverse(&self) -> Self {
        Self::from_isometry(&self.to_isometry().inverse())
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self::from_isometry(&(self.to_isometry() * other.to_isometry()))
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation_matrix() * Vector3::from(p) + Vector3::from(self.translation);
        [q.x, q.y, q.z]
    }

    pub fn angle(&self) -> f64 {
        Vector3::from(self.rotation).norm()
    }

    pub fn translation_norm(&self) -> f64 {
        Vector3::from(self.translation).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(&self.translation).all(|v| v.is_finite())
    }

    /// `(1, 6)` tensor `[rx, ry, rz, tx, ty, tz]`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let v: Vec<f64> = self.rotation.iter().chain(&self.translation).copied().collect();
        Ok(Tensor::from_vec(v, (1, 6), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Read row `i` of a `(B, 6)` pose tensor.
    pub fn from_tensor_row(t: &Tensor, i: usize) -> Result<Self> {
        let v = nn::to_vec_f64(&t.get(i)?)?;
        if v.len() != 6 {
            return shape_err(format!("pose row has {} values", v.len()));
        }
        Ok(Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))
    }
}

/// Differentiable batched Rodrigues: `(B, 6)` pose vectors to rotation
/// `(B, 3, 3)` and translation `(B, 3, 1)`.
pub fn pose_vec_to_rt(pose: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, six) = pose.dims2()?;
    if six != 6 {
        return shape_err(format!("pose tensor must be (B, 6), got (B, {six})"));
    }
    let r = pose.narrow(1, 0, 3)?;
    let t = pose.narrow(1, 3, 3)?.reshape((b, 3, 1))?;
    let theta2 = r.sqr()?.sum_keepdim(1)?; // (B,1)
    let theta = (&theta2 + 1e-12)?.sqrt()?;
    // sin(theta)/theta and (1 - cos theta)/theta^2, both smooth at 0 in value.
    let a = theta.sin()?.div(&theta)?;
    let b_coef = {
        // (1 - cos θ) / θ² = 2 sin²(θ/2) / θ², numerically stable form.
        let half = (&theta * 0.5)?;
        let s = half.sin()?.div(&theta)?;
        (s.sqr()? * 2.0)?
    };
    let rx = r.narrow(1, 0, 1)?;
    let ry = r.narrow(1, 1, 1)?;
    let rz = r.narrow(1, 2, 1)?;
    let zero = rx.zeros_like()?;
    let k = Tensor::cat(
        &[
            &zero,
            &rz.neg()?,
            &ry,
            &rz,
            &zero,
            &rx.neg()?,
            &ry.neg()?,
            &rx,
            &zero,
        ],
        1,
    )?
    .reshape((b, 3, 3))?;
    let k2 = k.matmul(&k)?;
    let eye = Tensor::eye(3, pose.dtype(), pose.device())?
        .unsqueeze(0)?
        .broadcast_as((b, 3, 3))?;
    let rot = eye
        .add(&k.broadcast_mul(&a.reshape((b, 1, 1))?)?)?
        .add(&k2.broadcast_mul(&b_coef.reshape((b, 1, 1))?)?)?;
    Ok((rot, t))
}

/// Inverse of a batched rigid transform.
pub fn invert_rt(rot: &Tensor, t: &Tensor) -> Result<(Tensor, Tensor)> {
    let rt = rot.transpose(1, 2)?.contiguous()?;
    let ti = rt.matmul(t)?.neg()?;
    Ok((rt, ti))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNetConfig {
    /// Output widths of the seven stride-2 conv layers.
    pub channels: [usize; 7],
    /// Kernel sizes of the seven conv layers.
    pub kernels: [usize; 7],
    pub output_scale: f64,
    /// Initialize the final 1x1 layer with zeros (identity pose output).
    pub zero_init_head: bool,
    pub seed: u64,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 64, 128, 128, 128],
            kernels: [7, 5, 3, 3, 3, 3, 3],
            output_scale: 0.01,
            zero_init_head: false,
            seed: 2,
        }
    }
}

/// Compact ego-motion regressor on channel-concatenated frame pairs.
pub struct PoseNet {
    config: PoseNetConfig,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PoseNet {
    pub fn new(scope: &Scope, config: &PoseNetConfig) -> Result<Self> {
        if config.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("PoseNet kernels must be odd".into()));
        }
        let scope = scope.with_seed(config.seed);
        let mut in_ch = 6;
        let mut convs = vec![];
        for (i, (&c, &k)) in config.channels.iter().zip(&config.kernels).enumerate() {
            convs.push(Conv2d::new(
                &scope.pp(format!("conv{}", i + 1)),
                ConvSpec::new(in_ch, c, k).stride(2),
            )?);
            in_ch = c;
        }
        let mut spec = ConvSpec::new(in_ch, 6, 1);
        if config.zero_init_head {
            spec = spec.init(Init::Zeros);
        }
        let head = Conv2d::new(&scope.pp("head"), spec)?;
        Ok(Self {
            config: config.clone(),
            convs,
            head,
        })
    }

    /// `(B, 6)` pose vectors mapping target-frame points into the source frame.
    pub fn forward(&self, target: &Tensor, source: &Tensor) -> Result<Tensor> {
        if target.dims() != source.dims() {
            return shape_err(format!(
                "pose frames differ in shape: {:?} vs {:?}",
                target.dims(),
                source.dims()
            ));
        }
        let x = Tensor::cat(&[target, source], 1)?;
        let mut x = ((x - 0.45)? / 0.225)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        let pooled = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let out = self.head.forward(&pooled)?;
        let b = out.dim(0)?;
        Ok((out.reshape((b, 6))? * self.config.output_scale)?)
    }

    /// Host-side pose of a single pair.
    pub fn estimate_pose(&self, target: &Tensor, source: &Tensor) -> Result<CameraPose> {
        CameraPose::from_tensor_row(&self.forward(target, source)?, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zero_pose_is_identity() {
        assert_eq!(CameraPose::identity().to_matrix(), Matrix4::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = CameraPose::new([0.0, 0.0, FRAC_PI_2], [0.0; 3]);
        let q = p.transform_point([1.0, 0.0, 0.0]);
        assert!((q[0]).abs() < 1e-6 && (q[1] - 1.0).abs() < 1e-6 && q[2].abs() < 1e-6);
    }

    #[test]
    fn inverse_matrix_matches_matrix_inverse() {
        let p = CameraPose::new([0.1, -0.3, 0.2], [0.5, -1.0, 2.0]);
        let a = p.inverse().to_matrix();
        let b = p.to_matrix().try_inverse().unwrap();
        assert!((a - b).abs().max() < 1e-6);
    }

    #[test]
    fn rodrigues_agrees_with_quaternion_route() {
        let p = CameraPose::new([0.3, 0.4, -1.2], [0.0; 3]);
        let a = p.rotation_matrix();
        let b = p.to_isometry().rotation.to_rotation_matrix().into_inner();
        assert!((a - b).abs().max() < 1e-12);
    }

    #[test]
    fn tensor_rodrigues_matches_host() {
        let poses = [
            CameraPose::new([0.3, 0.4, -1.2], [1.0, 2.0, 3.0]),
            CameraPose::new([0.0, 0.0, 0.0], [0.0, 0.0, 0.1]),
            CameraPose::new([1e-5, 0.0, -2e-5], [0.0, 0.0, 0.0]),
        ];
        let rows: Vec<Tensor> = poses.iter().map(|p| p.to_tensor(DType::F64).unwrap()).collect();
        let batch = Tensor::cat(&rows, 0).unwrap();
        let (rot, t) = pose_vec_to_rt(&batch).unwrap();
        for (i, p) in poses.iter().enumerate() {
            let r = rot.get(i).unwrap().to_vec2::<f64>().unwrap();
            let host = p.rotation_matrix();
            for y in 0..3 {
                for x in 0..3 {
                    assert!((r[y][x] - host[(y, x)]).abs() < 1e-9, "pose {i}");
                }
            }
            let tv = nn::to_vec_f64(&t.get(i).unwrap()).unwrap();
            assert_eq!(tv, p.translation.to_vec());
        }
    }

    #[test]
    fn zero_head_gives_identity_pose() {
        let store = ParamStore::new(DType::F32);
        let cfg = PoseNetConfig {
            zero_init_head: true,
            ..Default::default()
        };
        let net = PoseNet::new(&store.root(), &cfg).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let p = net.estimate_pose(&x, &x).unwrap();
        assert_eq!(p, CameraPose::identity());
    }

    #[test]
    fn mismatched_frames_rejected() {
        let store = ParamStore::new(DType::F32);
        let net = PoseNet::new(&store.root(), &PoseNetConfig::default()).unwrap();
        let a = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 3, 32, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(net.forward(&a, &b).is_err());
    }
}
