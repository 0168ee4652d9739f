//! Parameter registry and the small layer zoo the model is built from.
//!
//! Layers wrap candle tensors; every parameter is registered in a
//! [`ParamStore`] under a dotted path. The path is the identity used by
//! checkpoints, weight import, the optimizer's decay partition and the
//! profiler, so it is part of the public contract (see README for the table).

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Forward-pass mode. Training mode threads the portable RNG for stochastic
/// depth and lets BatchNorm use (and update) batch statistics.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut SplitMix64 },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Captures one intermediate activation as a leaf variable so Grad-CAM can
/// read its gradient back out of the tape.
pub struct Probe {
    target: Option<String>,
    captured: Option<Var>,
}

impl Probe {
    pub fn none() -> Self {
        Self { target: None, captured: None }
    }

    pub fn at(layer: &str) -> Self {
        Self { target: Some(layer.to_string()), captured: None }
    }

    /// Passes `t` through, splicing in a gradient-tracking leaf when `name`
    /// matches the probe target. The splice detaches upstream history, which
    /// is fine: only the signal-to-activation segment is needed.
    pub fn tap(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.target.as_deref() == Some(name) {
            let v = Var::from_tensor(&t.detach())?;
            let out = v.as_tensor().clone();
            self.captured = Some(v);
            Ok(out)
        } else {
            Ok(t)
        }
    }

    pub fn captured(&self) -> Option<&Var> {
        self.captured.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMeta {
    /// Buffers (BatchNorm running stats) are not trainable.
    pub trainable: bool,
    /// Whether AdamW applies decoupled weight decay to this parameter.
    pub decay: bool,
}

impl ParamMeta {
    pub const WEIGHT: ParamMeta = ParamMeta { trainable: true, decay: true };
    pub const BIAS: ParamMeta = ParamMeta { trainable: true, decay: false };
    pub const NORM: ParamMeta = ParamMeta { trainable: true, decay: false };
    pub const BUFFER: ParamMeta = ParamMeta { trainable: false, decay: false };
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Ordered parameter registry. Insertion order is the canonical checkpoint
/// order; initialization draws come from a per-path fork of the seed stream,
/// so values do not depend on construction order.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    root: SplitMix64,
    entries: Vec<(String, Var, ParamMeta)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            root: SplitMix64::new(seed),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn var(&mut self, path: &str, dims: &[usize], init: Init, meta: ParamMeta) -> Result<Var> {
        if self.index.contains_key(path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        let numel: usize = dims.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::TruncNormal(std) => {
                let mut rng = self.root.fork_path(path);
                (0..numel).map(|_| rng.trunc_normal(std)).collect()
            }
        };
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.index.insert(path.to_string(), self.entries.len());
        self.entries.push((path.to_string(), var.clone(), meta));
        Ok(var)
    }

    pub fn get(&self, path: &str) -> Option<&Var> {
        self.index.get(path).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, ParamMeta)> {
        self.entries.iter().map(|(p, v, m)| (p.as_str(), v, *m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element count over trainable parameters only.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, _, m)| m.trainable)
            .map(|(_, v, _)| v.as_tensor().elem_count())
            .sum()
    }
}

fn bias_reshape(b: &Var, channels: usize) -> Result<Tensor> {
    Ok(b.as_tensor().reshape((1, channels, 1, 1))?)
}

/// Fully-connected layer over the last dimension. Weight is `(out, in)`.
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, path: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = ps.var(&format!("{path}.weight"), &[out_dim, in_dim], Init::TruncNormal(0.02), ParamMeta::WEIGHT)?;
        let b = if bias {
            Some(ps.var(&format!("{path}.bias"), &[out_dim], Init::Zeros, ParamMeta::BIAS)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// x: (..., in) -> (..., out)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((lead, self.in_dim))?;
        let mut y = flat.matmul(&self.w.as_tensor().t()?)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// 2-D convolution. Weight is `(out, in/groups, k, k)`.
pub struct Conv2d {
    pub w: Var,
    pub b: Option<Var>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = ps.var(
            &format!("{path}.weight"),
            &[out_ch, in_ch / groups, kernel, kernel],
            Init::TruncNormal(0.02),
            ParamMeta::WEIGHT,
        )?;
        let b = if bias {
            Some(ps.var(&format!("{path}.bias"), &[out_ch], Init::Zeros, ParamMeta::BIAS)?)
        } else {
            None
        };
        Ok(Self { w, b, in_ch, out_ch, kernel, stride, padding, groups })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Dim(format!(
                "conv expects {} input channels, got {} (input {}x{})",
                self.in_ch, c, h, w
            )));
        }
        let mut y = x.conv2d(self.w.as_tensor(), self.padding, self.stride, 1, self.groups)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(&bias_reshape(b, self.out_ch)?)?;
        }
        Ok(y)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    pub g: Var,
    pub b: Var,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, path: &str, dim: usize) -> Result<Self> {
        let g = ps.var(&format!("{path}.weight"), &[dim], Init::Ones, ParamMeta::NORM)?;
        let b = ps.var(&format!("{path}.bias"), &[dim], Init::Zeros, ParamMeta::NORM)?;
        Ok(Self { g, b, dim, eps: 1e-6 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.g.as_tensor())?
            .broadcast_add(self.b.as_tensor())?)
    }
}

/// Batch normalization over (B, C, H, W) with running statistics.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running buffers through `Var::set` (single-writer, detached from the
/// tape). Eval mode reads the buffers only, so concurrent eval forwards on
/// shared weights stay safe.
pub struct BatchNorm2d {
    pub g: Var,
    pub b: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub ch: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, path: &str, ch: usize) -> Result<Self> {
        let g = ps.var(&format!("{path}.weight"), &[ch], Init::Ones, ParamMeta::NORM)?;
        let b = ps.var(&format!("{path}.bias"), &[ch], Init::Zeros, ParamMeta::NORM)?;
        let running_mean = ps.var(&format!("{path}.running_mean"), &[ch], Init::Zeros, ParamMeta::BUFFER)?;
        let running_var = ps.var(&format!("{path}.running_var"), &[ch], Init::Ones, ParamMeta::BUFFER)?;
        Ok(Self { g, b, running_mean, running_var, ch, eps: 1e-5, momentum: 0.1 })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.ch {
            return Err(Error::Dim(format!("batchnorm expects {} channels, got {c}", self.ch)));
        }
        let (mean, var) = if mode.is_train() {
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(1)?.reshape(c)?;
            let var = flat
                .broadcast_sub(&mean.reshape((c, 1))?)?
                .sqr()?
                .mean_keepdim(1)?
                .reshape(c)?;
            self.update_running(&mean, &var, (n * h * w) as f64)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        let shape = (1, c, 1, 1);
        let normed = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_div(&(var.reshape(shape)? + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&bias_reshape(&self.g, c)?)?
            .broadcast_add(&bias_reshape(&self.b, c)?)?)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, count: f64) -> Result<()> {
        let m = self.momentum;
        // unbiased variance goes into the running buffer
        let scale = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
        let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach() * (m * scale))?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        Ok(())
    }
}

/// Stochastic depth on the residual branch: per-sample drop with rescaling.
pub struct DropPath {
    pub rate: f64,
}

impl DropPath {
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let rng = match mode {
            Mode::Train { rng } if self.rate > 0.0 => rng,
            _ => return Ok(x.clone()),
        };
        let b = x.dims()[0];
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..b)
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut shape = vec![1usize; x.rank()];
        shape[0] = b;
        let mask = Tensor::from_vec(mask, shape, x.device())?.to_dtype(x.dtype())?;
        Ok(x.broadcast_mul(&mask)?)
    }
}

/// `clamp((x + 3) / 6, 0, 1)`.
pub fn hard_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(1.0 / 6.0, 0.5)?.clamp(0f64, 1f64)?)
}

/// Interpolation matrix for separable bilinear resizing, half-pixel centers
/// (`align_corners = false`).
fn interp_matrix(out_n: usize, in_n: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out_n * in_n];
    let scale = in_n as f64 / out_n as f64;
    for o in 0..out_n {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_n - 1);
        let i1 = (i0 + 1).min(in_n - 1);
        let w1 = src - src.floor();
        m[o * in_n + i0] += 1.0 - w1;
        m[o * in_n + i1] += w1;
    }
    Ok(Tensor::from_vec(m, (out_n, in_n), dev)?.to_dtype(dtype)?)
}

/// Bilinear resize of a (B, C, H, W) map, differentiable (built from two
/// matrix products so the tape handles the backward pass).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let mut y = x.clone();
    if h != out_h {
        let a = interp_matrix(out_h, h, x.dtype(), dev)?;
        let flat = y.permute((2, 0, 1, 3))?.reshape((h, b * c * w))?;
        y = a
            .matmul(&flat)?
            .reshape((out_h, b, c, w))?
            .permute((1, 2, 0, 3))?;
    }
    if w != out_w {
        let a = interp_matrix(out_w, w, x.dtype(), dev)?;
        let flat = y.permute((3, 0, 1, 2))?.reshape((w, b * c * out_h))?;
        y = a
            .matmul(&flat)?
            .reshape((out_w, b, c, out_h))?
            .permute((1, 2, 3, 0))?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(DType::F32, 1234)
    }

    #[test]
    fn param_paths_unique_and_ordered() {
        let mut ps = store();
        let _ = Linear::new(&mut ps, "a.fc", 4, 8, true).unwrap();
        let _ = Conv2d::new(&mut ps, "a.conv", 2, 4, 3, 1, 1, 1, true).unwrap();
        let paths: Vec<_> = ps.iter().map(|(p, _, _)| p.to_string()).collect();
        assert_eq!(paths, vec!["a.fc.weight", "a.fc.bias", "a.conv.weight", "a.conv.bias"]);
        assert!(Linear::new(&mut ps, "a.fc", 4, 8, true).is_err());
    }

    #[test]
    fn init_is_seed_deterministic_and_order_free() {
        let mut p1 = ParamStore::new(DType::F32, 7);
        let _ = Linear::new(&mut p1, "x", 3, 3, false).unwrap();
        let a = Linear::new(&mut p1, "y", 3, 3, false).unwrap();

        let mut p2 = ParamStore::new(DType::F32, 7);
        let b = Linear::new(&mut p2, "y", 3, 3, false).unwrap();
        assert_eq!(
            a.w.as_tensor().to_vec2::<f32>().unwrap(),
            b.w.as_tensor().to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn conv_param_count_hand_example() {
        // 3x3 conv, 2 -> 4 channels, with bias: 3*3*2*4 + 4 = 76
        let mut ps = store();
        let _ = Conv2d::new(&mut ps, "c", 2, 4, 3, 1, 1, 1, true).unwrap();
        assert_eq!(ps.count_trainable(), 76);
    }

    #[test]
    fn hard_sigmoid_saturation() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(vec![-4.0f32, -3.0, 0.0, 3.0, 9.0], 5, &dev).unwrap();
        let y = hard_sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![0.0, 0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec((0..16).map(|v| v as f32).collect::<Vec<_>>(), (1, 1, 4, 4), &dev).unwrap();
        let same = resize_bilinear(&x, 4, 4).unwrap();
        assert_eq!(same.to_vec4::<f32>().unwrap(), x.to_vec4::<f32>().unwrap());

        let c = Tensor::ones((1, 2, 3, 3), DType::F32, &dev).unwrap();
        let up = resize_bilinear(&c, 9, 6).unwrap();
        let v = up.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&e| (e - 1.0).abs() < 1e-6));
    }

    #[test]
    fn bilinear_resize_matches_pointwise_oracle() {
        // brute-force per-pixel bilinear with half-pixel centers
        let dev = Device::Cpu;
        let (h, w, oh, ow) = (5, 7, 11, 4);
        let data: Vec<f32> = (0..h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = Tensor::from_vec(data.clone(), (1, 1, h, w), &dev).unwrap();
        let y = resize_bilinear(&x, oh, ow).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let at = |r: usize, c: usize| data[r * w + c];
        for or in 0..oh {
            for oc in 0..ow {
                let sy = ((or as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0);
                let sx = ((oc as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - sy.floor(), sx - sx.floor());
                let expect = at(y0, x0) as f64 * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) as f64 * (1.0 - fy) * fx
                    + at(y1, x0) as f64 * fy * (1.0 - fx)
                    + at(y1, x1) as f64 * fy * fx;
                let got = y[or * ow + oc] as f64;
                assert!((got - expect).abs() < 1e-5, "({or},{oc}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn batchnorm_eval_uses_buffers() {
        let mut ps = store();
        let bn = BatchNorm2d::new(&mut ps, "bn", 2).unwrap();
        let x = Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let y = bn.forward(&x, &Mode::Eval).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn droppath_zero_rate_is_identity() {
        let dp = DropPath { rate: 0.0 };
        let x = Tensor::from_vec(vec![1f32, 2., 3., 4.], (2, 2), &Device::Cpu).unwrap();
        let mut rng = SplitMix64::new(0);
        let mut mode = Mode::Train { rng: &mut rng };
        let y = dp.forward(&x, &mut mode).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
    }
}
