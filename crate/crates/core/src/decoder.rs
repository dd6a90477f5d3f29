//! Hierarchical coarse-to-fine depth decoder with adaptive feature fusion.
//!
//! Every pyramid level owns a spatial-channel enhancement (SCE) block:
//!
//! ```text
//! F_d  = GELU(PW_1x1(DW_3x3(F)))        (PW expands to round(C * ratio) channels)
//! F_ce = F + Proj_1x1(F_d)
//! ```
//!
//! Adjacent levels are fused top-down, finest last:
//!
//! ```text
//! F_fusion^4 = Conv(F_ce^4 ++ up(F_ce^5))
//! F_fusion^i = Conv(F_ce^i ++ up(SCE_{i+1}(F_fusion^{i+1})))   i = 3, 2, 1
//! ```
//!
//! The coarse operand passes through its own level's SCE block before the
//! concat, so each fusion stage enhances both operands. `F_fusion^1` is
//! upsampled to the input resolution and mapped to depth by a 3x3 head and a
//! bounded inverse-depth activation.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, FeaturePyramid, NUM_LEVELS};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, DepthwiseConv3x3};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Width multiplier of the SCE hidden layer.
    pub expansion_ratio: f64,
    /// SCE enabled per level (disabled levels use the identity).
    pub sce_levels: [bool; NUM_LEVELS],
    /// Levels with a 1-based index at or above this count as high-level.
    pub high_level_start: usize,
    /// Kernel size of the fusion convolution.
    pub fusion_kernel: usize,
    /// GELU after each fusion convolution.
    pub fusion_activation: bool,
    pub min_depth: f64,
    pub max_depth: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            expansion_ratio: 4.0,
            sce_levels: [true; NUM_LEVELS],
            high_level_start: 4,
            fusion_kernel: 3,
            fusion_activation: true,
            min_depth: 0.1,
            max_depth: 10.0,
            seed: 1,
        }
    }
}

/// Named decoder variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    /// Concat + fusion conv only, no SCE anywhere.
    Baseline,
    WithoutHighLevelSce,
    WithoutLowLevelSce,
    Full,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 4] = [
        DecoderVariant::Baseline,
        DecoderVariant::WithoutHighLevelSce,
        DecoderVariant::WithoutLowLevelSce,
        DecoderVariant::Full,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            DecoderVariant::Baseline => "baseline",
            DecoderVariant::WithoutHighLevelSce => "wo-high-level-sce",
            DecoderVariant::WithoutLowLevelSce => "wo-low-level-sce",
            DecoderVariant::Full => "full",
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.expansion_ratio > 0.0 && self.expansion_ratio.is_finite()) {
            return Err(Error::Config("expansion_ratio must be positive".into()));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::Config(format!(
                "need 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            )));
        }
        if self.fusion_kernel % 2 == 0 {
            return Err(Error::Config("fusion_kernel must be odd".into()));
        }
        if !(1..=NUM_LEVELS + 1).contains(&self.high_level_start) {
            return Err(Error::Config("high_level_start must be in 1..=6".into()));
        }
        Ok(())
    }

    pub fn is_high_level(&self, level: usize) -> bool {
        level >= self.high_level_start
    }

    /// Disable SCE on the high-level and/or low-level groups.
    pub fn with_ablation(&self, disable_high: bool, disable_low: bool) -> Self {
        let mut out = self.clone();
        for level in 1..=NUM_LEVELS {
            let high = self.is_high_level(level);
            if (high && disable_high) || (!high && disable_low) {
                out.sce_levels[level - 1] = false;
            }
        }
        out
    }

    pub fn variant(&self, v: DecoderVariant) -> Self {
        let base = DecoderConfig {
            sce_levels: [true; NUM_LEVELS],
            ..self.clone()
        };
        match v {
            DecoderVariant::Baseline => base.with_ablation(true, true),
            DecoderVariant::WithoutHighLevelSce => base.with_ablation(true, false),
            DecoderVariant::WithoutLowLevelSce => base.with_ablation(false, true),
            DecoderVariant::Full => base,
        }
    }

    pub fn hidden_width(&self, channels: usize) -> usize {
        ((channels as f64 * self.expansion_ratio).round() as usize).max(1)
    }
}

/// Spatial-channel enhancement block of one pyramid level.
#[derive(Debug, Clone)]
pub struct SceBlock {
    pub level: usize,
    pub dw: DepthwiseConv3x3,
    pub pw: Conv2d,
    pub proj: Conv2d,
}

impl SceBlock {
    pub fn new(scope: &Scope, level: usize, channels: usize, expansion_ratio: f64) -> Result<Self> {
        let hidden = ((channels as f64 * expansion_ratio).round() as usize).max(1);
        Ok(Self {
            level,
            dw: DepthwiseConv3x3::new(&scope.pp("dw"), channels, 1)?,
            pw: Conv2d::new(&scope.pp("pw"), ConvSpec::new(channels, hidden, 1))?,
            proj: Conv2d::new(&scope.pp("proj"), ConvSpec::new(hidden, channels, 1))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.dw.channels()
    }

    /// Channel-adaptive features `F_d`.
    pub fn adaptive_features(&self, x: &Tensor) -> Result<Tensor> {
        nn::gelu(&self.pw.forward(&self.dw.forward(x)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.channels() {
            return shape_err(format!(
                "SCE block of level {} expects {} channels, got {c}",
                self.level,
                self.channels()
            ));
        }
        let fd = self.adaptive_features(x)?;
        Ok((x + self.proj.forward(&fd)?)?)
    }
}

/// Concatenation + fusion convolution of two adjacent levels.
#[derive(Debug, Clone)]
pub struct FusionStage {
    pub level: usize,
    pub conv: Conv2d,
    pub upsample: usize,
    pub activation: bool,
}

impl FusionStage {
    pub fn new(
        scope: &Scope,
        level: usize,
        fine_ch: usize,
        coarse_ch: usize,
        upsample: usize,
        kernel: usize,
        activation: bool,
    ) -> Result<Self> {
        Ok(Self {
            level,
            conv: Conv2d::new(&scope.pp("conv"), ConvSpec::new(fine_ch + coarse_ch, fine_ch, kernel))?,
            upsample,
            activation,
        })
    }

    /// Fuse a fine operand with a coarser one; output at the fine resolution.
    pub fn fuse(&self, fine: &Tensor, coarse: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = fine.dims4()?;
        let up = nn::upsample_nearest(coarse, self.upsample)?;
        let (_, _, uh, uw) = up.dims4()?;
        if (uh, uw) != (h, w) {
            return shape_err(format!(
                "fusion stage {}: coarse operand upsampled to {uh}x{uw}, fine operand is {h}x{w}",
                self.level
            ));
        }
        let y = self.conv.forward(&Tensor::cat(&[fine, &up], 1)?)?;
        if self.activation {
            nn::gelu(&y)
        } else {
            Ok(y)
        }
    }
}

/// Decoder outputs.
pub struct DecodeOutput {
    /// `(B, 1, H, W)` depth in meters.
    pub depth: Tensor,
    /// Fused features per stage, finest first (`F_fusion^1 .. F_fusion^4`).
    pub fusion: Vec<Tensor>,
}

pub struct EfafDecoder {
    config: DecoderConfig,
    sce: Vec<Option<SceBlock>>,
    stages: Vec<FusionStage>,
    head: Conv2d,
    head_upsample: usize,
    channels: [usize; NUM_LEVELS],
}

impl EfafDecoder {
    pub fn new(scope: &Scope, config: &DecoderConfig, encoder: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        let scope = scope.with_seed(config.seed);
        let ch = encoder.stage_channels;
        let sce = (0..NUM_LEVELS)
            .map(|i| {
                if config.sce_levels[i] {
                    SceBlock::new(&scope.pp(format!("sce{}", i + 1)), i + 1, ch[i], config.expansion_ratio)
                        .map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let stages = (0..NUM_LEVELS - 1)
            .map(|i| {
                FusionStage::new(
                    &scope.pp(format!("fusion{}", i + 1)),
                    i + 1,
                    ch[i],
                    ch[i + 1],
                    encoder.stage_downsample[i + 1],
                    config.fusion_kernel,
                    config.fusion_activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // Start at the geometric mean of the depth range, away from both bounds.
        let mid = (config.min_depth * config.max_depth).sqrt();
        let head_bias = initial_logit(mid, config.min_depth, config.max_depth);
        let head = Conv2d::new(&scope.pp("head"), ConvSpec::new(ch[0], 1, 3).bias_init(Init::Constant(head_bias)))?;
        Ok(Self {
            config: config.clone(),
            sce,
            stages,
            head,
            head_upsample: encoder.strides()[0],
            channels: ch,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn sce_block(&self, level: usize) -> Option<&SceBlock> {
        self.sce.get(level - 1).and_then(|s| s.as_ref())
    }

    pub fn sce_block_mut(&mut self, level: usize) -> Option<&mut SceBlock> {
        self.sce.get_mut(level.checked_sub(1)?)?.as_mut()
    }

    pub fn fusion_stage(&self, level: usize) -> &FusionStage {
        &self.stages[level - 1]
    }

    fn enhance(&self, level: usize, x: &Tensor) -> Result<Tensor> {
        match &self.sce[level - 1] {
            Some(b) => b.forward(x),
            None => Ok(x.clone()),
        }
    }

    pub fn decode(&self, pyramid: &FeaturePyramid) -> Result<DecodeOutput> {
        pyramid.validate()?;
        let got = pyramid.channels()?;
        if got != self.channels {
            return shape_err(format!(
                "decoder configured for channels {:?}, pyramid has {got:?}",
                self.channels
            ));
        }
        let enhanced: Vec<Tensor> = (1..=NUM_LEVELS)
            .map(|l| self.enhance(l, &pyramid.levels[l - 1]))
            .collect::<Result<_>>()?;
        let mut coarse = enhanced[NUM_LEVELS - 1].clone();
        let mut fusion = vec![];
        for level in (1..NUM_LEVELS).rev() {
            let fused = self.stages[level - 1].fuse(&enhanced[level - 1], &coarse)?;
            coarse = if level > 1 {
                self.enhance(level, &fused)?
            } else {
                fused.clone()
            };
            fusion.push(fused);
        }
        fusion.reverse();
        let up = nn::upsample_nearest(&fusion[0], self.head_upsample)?;
        let logits = self.head.forward(&up)?;
        let depth = depth_activation(&logits, self.config.min_depth, self.config.max_depth)?;
        Ok(DecodeOutput { depth, fusion })
    }
}

/// Map logits to depth in `(min_depth, max_depth)` through a sigmoid on
/// inverse depth: `1 / (sigmoid(l) * (1/min - 1/max) + 1/max)`.
pub fn depth_activation(logits: &Tensor, min_depth: f64, max_depth: f64) -> Result<Tensor> {
    check_depth_range(min_depth, max_depth)?;
    let min_disp = 1.0 / max_depth;
    let max_disp = 1.0 / min_depth;
    let disp = nn::sigmoid(logits)?.affine(max_disp - min_disp, min_disp)?;
    Ok(disp.recip()?)
}

/// Logit at which [`depth_activation`] yields `depth`.
pub fn initial_logit(depth: f64, min_depth: f64, max_depth: f64) -> f64 {
    let s = (1.0 / depth - 1.0 / max_depth) / (1.0 / min_depth - 1.0 / max_depth);
    (s / (1.0 - s)).ln()
}

/// Scalar form of [`depth_activation`].
pub fn depth_activation_scalar(logit: f64, min_depth: f64, max_depth: f64) -> Result<f64> {
    check_depth_range(min_depth, max_depth)?;
    let s = 1.0 / (1.0 + (-logit).exp());
    Ok(1.0 / (s * (1.0 / min_depth - 1.0 / max_depth) + 1.0 / max_depth))
}

fn check_depth_range(min_depth: f64, max_depth: f64) -> Result<()> {
    if !(min_depth > 0.0 && max_depth > min_depth) {
        return Err(Error::Config(format!(
            "need 0 < min_depth < max_depth, got {min_depth} and {max_depth}"
        )));
    }
    Ok(())
}

/// Zero the residual projection of an SCE block (turns it into the identity).
pub fn zero_projection(block: &mut SceBlock) -> Result<()> {
    block.proj.weight = block.proj.weight.zeros_like()?;
    if let Some(b) = &block.proj.bias {
        block.proj.bias = Some(b.zeros_like()?);
    }
    Ok(())
}
