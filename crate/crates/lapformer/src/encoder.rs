//! Hierarchical mix-transformer encoder.
//!
//! Four stages, each an overlapping patch embedding followed by transformer
//! blocks with spatially-reduced self-attention and a feed-forward network
//! carrying a 3x3 depthwise convolution (the convolutional position signal —
//! there is no positional encoding, so the encoder is resolution-agnostic).
//! Stage `i` emits a `(B, C_i, H/2^{i+1}, W/2^{i+1})` feature map.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, DropPath, LayerNorm, Linear, Mode, ParamStore, Probe};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratios: [usize; 4],
    pub patch_sizes: [usize; 4],
    pub patch_strides: [usize; 4],
    pub drop_path_rate: f64,
}

impl EncoderConfig {
    fn mit(depths: [usize; 4]) -> Self {
        Self {
            stage_depths: depths,
            stage_channels: [64, 128, 320, 512],
            heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratios: [4, 4, 4, 4],
            patch_sizes: [7, 3, 3, 3],
            patch_strides: [4, 2, 2, 2],
            drop_path_rate: 0.1,
        }
    }

    pub fn mit_b1() -> Self {
        Self::mit([2, 2, 2, 2])
    }

    pub fn mit_b2() -> Self {
        Self::mit([3, 4, 6, 3])
    }

    pub fn mit_b3() -> Self {
        Self::mit([3, 4, 18, 3])
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if self.stage_channels[i] >= self.stage_channels[i + 1] {
                return Err(Error::Config(format!(
                    "stage_channels must be strictly increasing, got {:?}",
                    self.stage_channels
                )));
            }
            if self.sr_ratios[i] < self.sr_ratios[i + 1] {
                return Err(Error::Config(format!(
                    "sr_ratios must be non-increasing, got {:?}",
                    self.sr_ratios
                )));
            }
        }
        if self.patch_strides != [4, 2, 2, 2] {
            return Err(Error::Config(format!(
                "patch_strides must be [4, 2, 2, 2] so stage i halves resolution, got {:?}",
                self.patch_strides
            )));
        }
        for i in 0..4 {
            if self.sr_ratios[i] < 1 {
                return Err(Error::Config("sr_ratios must be >= 1".into()));
            }
            if self.stage_channels[i] % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} not divisible by {} heads",
                    i + 1,
                    self.stage_channels[i],
                    self.heads[i]
                )));
            }
            if self.patch_strides[i] > self.patch_sizes[i] {
                return Err(Error::Config(format!(
                    "stage {} stride {} exceeds patch size {} (embeddings must overlap)",
                    i + 1,
                    self.patch_strides[i],
                    self.patch_sizes[i]
                )));
            }
            if self.stage_depths[i] == 0 {
                return Err(Error::Config(format!("stage {} has zero blocks", i + 1)));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate must be in [0, 1), got {}",
                self.drop_path_rate
            )));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }
}

/// Ordered four-level feature set; level `i` holds `(B, C_i, H/2^{i+1}, W/2^{i+1})`.
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub input_size: (usize, usize),
}

impl FeaturePyramid {
    pub fn channels(&self) -> Result<Vec<usize>> {
        self.levels.iter().map(|t| Ok(t.dims4()?.1)).collect()
    }
}

/// Overlapping patch embedding: strided convolution + channel layer norm.
pub struct OverlapPatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl OverlapPatchEmbed {
    pub fn new(ps: &mut ParamStore, path: &str, in_ch: usize, out_ch: usize, patch: usize, stride: usize) -> Result<Self> {
        let proj = Conv2d::new(
            ps,
            &format!("{path}.proj"),
            in_ch,
            out_ch,
            patch,
            stride,
            patch / 2,
            1,
            true,
        )?;
        let norm = LayerNorm::new(ps, &format!("{path}.norm"), out_ch)?;
        Ok(Self { proj, norm })
    }

    /// (B, C, H, W) -> tokens (B, N, out_ch) plus the token-map size.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (_, _, h, w) = x.dims4()?;
        if h < self.proj.kernel || w < self.proj.kernel {
            return Err(Error::Dim(format!(
                "input {h}x{w} is smaller than the {}x{} patch",
                self.proj.kernel, self.proj.kernel
            )));
        }
        let y = self.proj.forward(x)?;
        let (b, c, oh, ow) = y.dims4()?;
        let tokens = y.reshape((b, c, oh * ow))?.transpose(1, 2)?;
        Ok((self.norm.forward(&tokens)?, oh, ow))
    }
}

/// Self-attention with strided-convolution key/value reduction.
pub struct Attention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub sr: Option<(Conv2d, LayerNorm)>,
    pub dim: usize,
    pub heads: usize,
    pub sr_ratio: usize,
    scale: f64,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, path: &str, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("attention dim {dim} not divisible by {heads} heads")));
        }
        let q = Linear::new(ps, &format!("{path}.q"), dim, dim, true)?;
        let kv = Linear::new(ps, &format!("{path}.kv"), dim, 2 * dim, true)?;
        let proj = Linear::new(ps, &format!("{path}.proj"), dim, dim, true)?;
        let sr = if sr_ratio > 1 {
            let conv = Conv2d::new(ps, &format!("{path}.sr"), dim, dim, sr_ratio, sr_ratio, 0, 1, true)?;
            let norm = LayerNorm::new(ps, &format!("{path}.sr_norm"), dim)?;
            Some((conv, norm))
        } else {
            None
        };
        let scale = (dim as f64 / heads as f64).powf(-0.5);
        Ok(Self { q, kv, proj, sr, dim, heads, sr_ratio, scale })
    }

    /// tokens (B, N, C) with token-map size (h, w) -> (B, N, C)
    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok(self.attend(x, h, w)?.0)
    }

    /// Also returns the attention probabilities (B, heads, N, N_reduced).
    pub fn attend(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        let dh = c / self.heads;

        let q = self
            .q
            .forward(x)?
            .reshape((b, n, self.heads, dh))?
            .transpose(1, 2)?
            .contiguous()?;

        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                let spatial = x.transpose(1, 2)?.reshape((b, c, h, w))?;
                let red = conv.forward(&spatial)?;
                let (_, _, rh, rw) = red.dims4()?;
                let tokens = red.reshape((b, c, rh * rw))?.transpose(1, 2)?;
                norm.forward(&tokens)?
            }
            None => x.clone(),
        };
        let nr = kv_src.dims3()?.1;
        let kv = self.kv.forward(&kv_src)?;
        let split = |off: usize| -> Result<Tensor> {
            Ok(kv
                .narrow(2, off, c)?
                .reshape((b, nr, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let k = split(0)?;
        let v = split(c)?;

        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * self.scale)?;
        let m = scores.max_keepdim(3)?;
        let e = scores.broadcast_sub(&m)?.exp()?;
        let probs = e.broadcast_div(&e.sum_keepdim(3)?)?;

        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, c))?;
        Ok((self.proj.forward(&ctx)?, probs))
    }
}

/// Feed-forward with a 3x3 depthwise convolution between the projections.
pub struct MixFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
    pub hidden: usize,
}

impl MixFfn {
    pub fn new(ps: &mut ParamStore, path: &str, dim: usize, mlp_ratio: usize) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        let fc1 = Linear::new(ps, &format!("{path}.fc1"), dim, hidden, true)?;
        let dwconv = Conv2d::new(ps, &format!("{path}.dwconv"), hidden, hidden, 3, 1, 1, hidden, true)?;
        let fc2 = Linear::new(ps, &format!("{path}.fc2"), hidden, dim, true)?;
        Ok(Self { fc1, dwconv, fc2, hidden })
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let t = self.fc1.forward(x)?;
        let spatial = t.transpose(1, 2)?.reshape((b, self.hidden, h, w))?;
        let t = self.dwconv.forward(&spatial)?;
        let t = t.reshape((b, self.hidden, n))?.transpose(1, 2)?;
        let t = t.gelu_erf()?;
        self.fc2.forward(&t)
    }
}

/// Pre-norm transformer block; shape preserving.
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
    pub drop_path: DropPath,
}

impl Block {
    pub fn new(
        ps: &mut ParamStore,
        path: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
        drop_path: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{path}.norm1"), dim)?,
            attn: Attention::new(ps, &format!("{path}.attn"), dim, heads, sr_ratio)?,
            norm2: LayerNorm::new(ps, &format!("{path}.norm2"), dim)?,
            ffn: MixFfn::new(ps, &format!("{path}.ffn"), dim, mlp_ratio)?,
            drop_path: DropPath { rate: drop_path },
        })
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize, mode: &mut Mode) -> Result<Tensor> {
        let branch = self.attn.forward(&self.norm1.forward(x)?, h, w)?;
        let x = (x + self.drop_path.forward(&branch, mode)?)?;
        let branch = self.ffn.forward(&self.norm2.forward(&x)?, h, w)?;
        Ok((&x + self.drop_path.forward(&branch, mode)?)?)
    }
}

pub struct Stage {
    pub patch_embed: OverlapPatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl Stage {
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (tokens, h, w) = self.patch_embed.forward(x)?;
        let mut t = tokens;
        for block in &self.blocks {
            t = block.forward(&t, h, w, mode)?;
        }
        let t = self.norm.forward(&t)?;
        let b = t.dims3()?.0;
        Ok(t.transpose(1, 2)?.reshape((b, self.dim, h, w))?)
    }
}

pub struct MitEncoder {
    pub stages: Vec<Stage>,
    pub config: EncoderConfig,
}

impl MitEncoder {
    pub fn new(ps: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let total = config.total_blocks();
        let mut stages = Vec::with_capacity(4);
        let mut block_idx = 0usize;
        for i in 0..4 {
            let in_ch = if i == 0 { 3 } else { config.stage_channels[i - 1] };
            let dim = config.stage_channels[i];
            let path = format!("encoder.stages.{i}");
            let patch_embed = OverlapPatchEmbed::new(
                ps,
                &format!("{path}.patch_embed"),
                in_ch,
                dim,
                config.patch_sizes[i],
                config.patch_strides[i],
            )?;
            let mut blocks = Vec::with_capacity(config.stage_depths[i]);
            for j in 0..config.stage_depths[i] {
                // stochastic depth ramps linearly over the whole block stack
                let rate = if total > 1 {
                    config.drop_path_rate * block_idx as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                blocks.push(Block::new(
                    ps,
                    &format!("{path}.blocks.{j}"),
                    dim,
                    config.heads[i],
                    config.sr_ratios[i],
                    config.mlp_ratios[i],
                    rate,
                )?);
                block_idx += 1;
            }
            let norm = LayerNorm::new(ps, &format!("{path}.norm"), dim)?;
            stages.push(Stage { patch_embed, blocks, norm, dim });
        }
        Ok(Self { stages, config })
    }

    /// (B, 3, H, W) -> four-level pyramid. H and W must be divisible by 32.
    pub fn encode(&self, image: &Tensor, mode: &mut Mode, probe: &mut Probe) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Precondition(format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Precondition(format!(
                "input size {h}x{w} must be divisible by 32 so every pyramid level has integer size"
            )));
        }
        let mut levels = Vec::with_capacity(4);
        let mut x = image.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x, mode)?;
            x = probe.tap(&format!("encoder.stage{}", i + 1), x)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels, input_size: (h, w) })
    }
}
