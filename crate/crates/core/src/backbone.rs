//! Multi-path pyramid encoder producing a five-level feature pyramid.
//!
//! Each stage downsamples (or keeps) the resolution with a strided 3x3 conv,
//! then runs several parallel depthwise paths with growing receptive fields
//! (path `p` stacks `p + 1` depthwise 3x3 convs) and aggregates them with a
//! 1x1 projection on a residual connection. The `AttentionHybrid` block type
//! appends a single-head self-attention block to every stage.

use std::path::PathBuf;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, DepthwiseConv3x3, LayerNorm2d};
use crate::params::{Init, ParamStore, Scope};

pub const NUM_LEVELS: usize = 5;

const PIXEL_MEAN: f64 = 0.45;
const PIXEL_STD: f64 = 0.225;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockType {
    Conv,
    AttentionHybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub stage_channels: [usize; NUM_LEVELS],
    pub stage_downsample: [usize; NUM_LEVELS],
    pub paths_per_stage: usize,
    pub block_type: BlockType,
    pub seed: u64,
    /// Optional safetensors file with encoder weights to start from.
    #[serde(default)]
    pub pretrained_init: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used by the tests and examples.
    pub fn toy() -> Self {
        Self {
            input_channels: 3,
            stage_channels: [32; NUM_LEVELS],
            stage_downsample: [2; NUM_LEVELS],
            paths_per_stage: 2,
            block_type: BlockType::Conv,
            seed: 0,
            pretrained_init: None,
        }
    }

    /// Widths in the range of a tiny multi-path vision transformer.
    pub fn wide() -> Self {
        Self {
            input_channels: 3,
            stage_channels: [64, 96, 176, 216, 216],
            stage_downsample: [2; NUM_LEVELS],
            paths_per_stage: 3,
            block_type: BlockType::AttentionHybrid,
            seed: 0,
            pretrained_init: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.paths_per_stage == 0 {
            return Err(Error::Config("paths_per_stage must be >= 1".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage_channels must be positive".into()));
        }
        if self.stage_downsample.iter().any(|&d| d != 1 && d != 2) {
            return Err(Error::Config(format!(
                "stage_downsample entries must be 1 or 2, got {:?}",
                self.stage_downsample
            )));
        }
        let strides = self.strides();
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "level strides must be strictly increasing, got {strides:?}"
            )));
        }
        Ok(())
    }

    /// Cumulative stride of every level.
    pub fn strides(&self) -> [usize; NUM_LEVELS] {
        let mut s = [1; NUM_LEVELS];
        let mut acc = 1;
        for (i, d) in self.stage_downsample.iter().enumerate() {
            acc *= d;
            s[i] = acc;
        }
        s
    }

    pub fn total_stride(&self) -> usize {
        self.strides()[NUM_LEVELS - 1]
    }

    /// Check an input resolution, suggesting the nearest valid size on failure.
    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let s = self.total_stride();
        if height % s == 0 && width % s == 0 && height > 0 && width > 0 {
            return Ok(());
        }
        let nearest = |v: usize| ((v as f64 / s as f64).round().max(1.0) as usize) * s;
        Err(Error::NotDivisible {
            height,
            width,
            stride: s,
            suggest_h: nearest(height),
            suggest_w: nearest(width),
        })
    }
}

/// Five feature maps with strictly increasing stride.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != NUM_LEVELS || self.strides.len() != NUM_LEVELS {
            return shape_err(format!(
                "pyramid must have {NUM_LEVELS} levels, got {}",
                self.levels.len()
            ));
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return shape_err(format!("pyramid strides not increasing: {:?}", self.strides));
        }
        Ok(())
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.iter().map(|t| t.detach()).collect(),
            strides: self.strides.clone(),
        }
    }

    /// Channel widths per level.
    pub fn channels(&self) -> Result<Vec<usize>> {
        self.levels.iter().map(|t| Ok(t.dim(1)?)).collect()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for l in &self.levels {
            if nn::to_vec_f64(l)?.iter().any(|v| !v.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Check that another pyramid has identical per-level shapes.
    pub fn check_compatible(&self, other: &FeaturePyramid) -> Result<()> {
        if self.levels.len() != other.levels.len() {
            return shape_err("pyramids have different level counts");
        }
        for (i, (a, b)) in self.levels.iter().zip(&other.levels).enumerate() {
            if a.dims() != b.dims() {
                return shape_err(format!(
                    "level {}: {:?} vs {:?}",
                    i + 1,
                    a.dims(),
                    b.dims()
                ));
            }
        }
        Ok(())
    }
}

struct Attention {
    norm: LayerNorm2d,
    qkv: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl Attention {
    fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm2d::new(&scope.pp("norm"), channels)?,
            qkv: Conv2d::new(&scope.pp("qkv"), ConvSpec::new(channels, 3 * channels, 1))?,
            proj: Conv2d::new(&scope.pp("proj"), ConvSpec::new(channels, channels, 1))?,
            channels,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let q = qkv.narrow(1, 0, c)?.reshape((b, c, h * w))?;
        let k = qkv.narrow(1, c, c)?.reshape((b, c, h * w))?;
        let v = qkv.narrow(1, 2 * c, c)?.reshape((b, c, h * w))?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        // (b, hw, hw)
        let logits = (q.transpose(1, 2)?.contiguous()?.matmul(&k)? * scale)?;
        let attn = nn::softmax_last(&logits)?;
        // (b, c, hw) = v (b, c, hw) x attn^T (b, hw, hw)
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
        let out = out.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

struct Stage {
    down: Conv2d,
    down_norm: LayerNorm2d,
    path_norm: LayerNorm2d,
    paths: Vec<Vec<DepthwiseConv3x3>>,
    aggregate: Conv2d,
    attention: Option<Attention>,
}

impl Stage {
    fn new(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        paths: usize,
        block: BlockType,
    ) -> Result<Self> {
        let down = Conv2d::new(&scope.pp("down"), ConvSpec::new(in_ch, out_ch, 3).stride(stride))?;
        let paths = (0..paths)
            .map(|p| {
                (0..=p)
                    .map(|j| DepthwiseConv3x3::new(&scope.pp(format!("path{p}.dw{j}")), out_ch, 1))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregate = Conv2d::new(
            &scope.pp("aggregate"),
            ConvSpec::new(out_ch * paths.len(), out_ch, 1),
        )?;
        let attention = match block {
            BlockType::Conv => None,
            BlockType::AttentionHybrid => Some(Attention::new(&scope.pp("attn"), out_ch)?),
        };
        Ok(Self {
            down,
            down_norm: LayerNorm2d::new(&scope.pp("down_norm"), out_ch)?,
            path_norm: LayerNorm2d::new(&scope.pp("path_norm"), out_ch)?,
            paths,
            aggregate,
            attention,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = nn::gelu(&self.down_norm.forward(&self.down.forward(x)?)?)?;
        let n = self.path_norm.forward(&x)?;
        let mut outs = Vec::with_capacity(self.paths.len());
        for path in &self.paths {
            let mut y = n.clone();
            for conv in path {
                y = conv.forward(&y)?;
            }
            outs.push(y);
        }
        let cat = Tensor::cat(&outs, 1)?;
        let x = (&x + self.aggregate.forward(&nn::gelu(&cat)?)?)?;
        match &self.attention {
            Some(a) => a.forward(&x),
            None => Ok(x),
        }
    }
}

pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    /// Build (or fetch from the store) an encoder below `scope`.
    pub fn new(scope: &Scope, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        if let Some(path) = &config.pretrained_init {
            let loaded = candle_core::safetensors::load(path, scope.store().device())?;
            scope.store().load(&loaded.into_iter().collect(), scope.prefix())?;
        }
        let scope = scope.with_seed(config.seed);
        let mut in_ch = config.input_channels;
        let mut stages = Vec::with_capacity(NUM_LEVELS);
        for i in 0..NUM_LEVELS {
            let out_ch = config.stage_channels[i];
            stages.push(Stage::new(
                &scope.pp(format!("stage{}", i + 1)),
                in_ch,
                out_ch,
                config.stage_downsample[i],
                config.paths_per_stage,
                config.block_type,
            )?);
            in_ch = out_ch;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encode a batch of RGB images `(B, 3, H, W)` with values in `[0, 1]`.
    pub fn encode(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.config.input_channels {
            return shape_err(format!(
                "encoder expects {} input channels, got {c}",
                self.config.input_channels
            ));
        }
        self.config.check_input_size(h, w)?;
        let mut x = ((image - PIXEL_MEAN)? / PIXEL_STD)?;
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for stage in &self.stages {
            x = stage.forward(&x)?;
            levels.push(x.clone());
        }
        let pyramid = FeaturePyramid {
            levels,
            strides: self.config.strides().to_vec(),
        };
        pyramid.validate()?;
        Ok(pyramid)
    }
}

/// Total trainable scalar count of every network registered in `store`.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.num_trainable()
}

/// Lightweight segmentation head: per-level 1x1 class logits, upsampled to the
/// input resolution and summed.
pub struct SegHead {
    heads: Vec<Conv2d>,
    strides: Vec<usize>,
}

impl SegHead {
    pub fn new(scope: &Scope, config: &EncoderConfig, num_classes: usize) -> Result<Self> {
        let heads = config
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Conv2d::new(
                    &scope.pp(format!("level{}", i + 1)),
                    ConvSpec::new(c, num_classes, 1).init(Init::TruncNormal { std: 0.1 }),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            strides: config.strides().to_vec(),
        })
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for ((head, level), s) in self.heads.iter().zip(&pyramid.levels).zip(&self.strides) {
            let y = nn::upsample_nearest(&head.forward(level)?, *s)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
        acc.ok_or_else(|| Error::Shape("empty pyramid".into()))
    }

    /// Pixel-wise cross-entropy against integer labels `(B, H, W)` (u32).
    pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let logp = nn::log_softmax_channels(logits)?;
        let idx = labels.unsqueeze(1)?;
        let picked = logp.gather(&idx.contiguous()?, 1)?;
        Ok(picked.mean_all()?.neg()?)
    }

    /// Argmax class per pixel `(B, H, W)`.
    pub fn predict(logits: &Tensor) -> Result<Tensor> {
        Ok(logits.argmax(1)?)
    }
}
