//! Segmentation head: per-level feature refinement, progressive top-down
//! fusion at 1/4 resolution, branch aggregation, channel selection, a
//! low-level skip connection and the prediction projection.
//!
//! Every block is individually switchable so the head can be built in each
//! ablation configuration, from the flat fuse-all baseline to the full head.

use candle_core::{Tensor, D};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{hard_sigmoid, resize_bilinear, BatchNorm2d, Conv2d, Linear, Mode, ParamStore, Probe};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Bilinear,
}

/// Head configurations matching the ablation table, weakest to full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadVariant {
    SegformerHead,
    Pff,
    PffA,
    PffAFsm,
    PffAFsmSkip,
    LapformerHead,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 6] = [
        HeadVariant::SegformerHead,
        HeadVariant::Pff,
        HeadVariant::PffA,
        HeadVariant::PffAFsm,
        HeadVariant::PffAFsmSkip,
        HeadVariant::LapformerHead,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            HeadVariant::SegformerHead => "SegFormer Head",
            HeadVariant::Pff => "PFF",
            HeadVariant::PffA => "PFF + A",
            HeadVariant::PffAFsm => "PFF + A + FSM",
            HeadVariant::PffAFsmSkip => "PFF + A + FSM + Skip",
            HeadVariant::LapformerHead => "LAPFormer Head",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Channel widths of the incoming pyramid levels, strictly increasing.
    pub in_channels: Vec<usize>,
    /// Uniform decoder width: output of every refinement and fusion layer.
    pub embed_dim: usize,
    pub num_classes: usize,
    pub upsample: UpsampleMode,
    /// Squeeze ratio of the selection module's bottleneck.
    pub fsm_reduction: usize,
    pub use_pff: bool,
    pub use_aggregation: bool,
    pub use_fsm: bool,
    pub use_skip: bool,
    pub use_frm: bool,
}

impl DecoderConfig {
    /// Full head over the given pyramid widths.
    pub fn lapformer(in_channels: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            in_channels,
            embed_dim,
            num_classes: 1,
            upsample: UpsampleMode::Bilinear,
            fsm_reduction: 16,
            use_pff: true,
            use_aggregation: true,
            use_fsm: true,
            use_skip: true,
            use_frm: true,
        }
    }

    pub fn ablation(row: HeadVariant, in_channels: Vec<usize>, embed_dim: usize) -> Self {
        let mut c = Self::lapformer(in_channels, embed_dim);
        let (pff, agg, fsm, skip, frm) = match row {
            HeadVariant::SegformerHead => (false, false, false, false, false),
            HeadVariant::Pff => (true, false, false, false, false),
            HeadVariant::PffA => (true, true, false, false, false),
            HeadVariant::PffAFsm => (true, true, true, false, false),
            HeadVariant::PffAFsmSkip => (true, true, true, true, false),
            HeadVariant::LapformerHead => (true, true, true, true, true),
        };
        c.use_pff = pff;
        c.use_aggregation = agg;
        c.use_fsm = fsm;
        c.use_skip = skip;
        c.use_frm = frm;
        c
    }

    pub fn num_levels(&self) -> usize {
        self.in_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("decoder embed_dim must be > 0".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("decoder num_classes must be >= 1".into()));
        }
        if self.in_channels.len() < 2 {
            return Err(Error::Config("decoder needs at least two pyramid levels".into()));
        }
        if !self.in_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "decoder in_channels must be strictly increasing, got {:?}",
                self.in_channels
            )));
        }
        if self.fsm_reduction == 0 || (self.num_levels() * self.embed_dim) % self.fsm_reduction != 0 {
            return Err(Error::Config(format!(
                "fsm_reduction {} must divide the aggregated width {}",
                self.fsm_reduction,
                self.num_levels() * self.embed_dim
            )));
        }
        if self.use_aggregation && !self.use_pff {
            return Err(Error::Config("aggregation requires progressive fusion".into()));
        }
        if self.use_fsm && !self.use_aggregation {
            return Err(Error::Config("the selection module requires aggregation".into()));
        }
        if self.use_skip && !self.use_fsm {
            return Err(Error::Config("the low-level skip requires the selection module".into()));
        }
        Ok(())
    }
}

/// 3x3 convolution + batch norm + rectification, one per pyramid level.
pub struct Frm {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Frm {
    pub fn new(ps: &mut ParamStore, path: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{path}.conv"), in_ch, out_ch, 3, 1, 1, 1, true)?,
            bn: BatchNorm2d::new(ps, &format!("{path}.bn"), out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// Per-level projection into the decoder width.
enum LevelProject {
    Frm(Frm),
    Linear(Conv2d),
}

/// Channel attention gate: squeeze, two fully-connected layers, hard
/// sigmoid, per-channel scaling, then channel reduction.
pub struct Fsm {
    pub fc1: Linear,
    pub fc2: Linear,
    pub conv: Conv2d,
}

impl Fsm {
    pub fn new(ps: &mut ParamStore, path: &str, in_ch: usize, out_ch: usize, reduction: usize) -> Result<Self> {
        let mid = in_ch / reduction;
        Ok(Self {
            fc1: Linear::new(ps, &format!("{path}.fc1"), in_ch, mid, true)?,
            fc2: Linear::new(ps, &format!("{path}.fc2"), mid, in_ch, true)?,
            conv: Conv2d::new(ps, &format!("{path}.conv"), in_ch, out_ch, 1, 1, 0, 1, true)?,
        })
    }

    /// Returns the reduced map and the per-channel weighting vector.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = x.flatten_from(2)?.mean(D::Minus1)?; // (B, C)
        let z = self.fc2.forward(&self.fc1.forward(&pooled)?.relu()?)?;
        let w = hard_sigmoid(&z)?;
        let gated = x.broadcast_mul(&w.reshape((b, c, 1, 1))?)?;
        Ok((self.conv.forward(&gated)?, w))
    }
}

/// Every intermediate the head produces for one input.
pub struct DecoderState {
    /// Per-level maps after refinement/projection, native resolutions.
    pub refined: Vec<Tensor>,
    /// Fused maps y1..yL (low to high semantic), all at 1/4 resolution.
    pub fused: Vec<Tensor>,
    pub aggregated: Option<Tensor>,
    /// FSM channel weights, `(B, L*embed_dim)`, each in [0, 1].
    pub selection_weights: Option<Tensor>,
    pub selected: Option<Tensor>,
    pub logits: Tensor,
}

pub struct Decoder {
    pub config: DecoderConfig,
    project: Vec<LevelProject>,
    pff_fuse: Vec<Conv2d>,
    baseline_fuse: Option<(Conv2d, BatchNorm2d)>,
    reduce: Option<Conv2d>,
    pub fsm: Option<Fsm>,
    pred: Conv2d,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let levels = config.num_levels();

        let mut project = Vec::with_capacity(levels);
        for (i, &c) in config.in_channels.iter().enumerate() {
            project.push(if config.use_frm {
                LevelProject::Frm(Frm::new(ps, &format!("decoder.frm.{i}"), c, e)?)
            } else {
                LevelProject::Linear(Conv2d::new(ps, &format!("decoder.linear.{i}"), c, e, 1, 1, 0, 1, true)?)
            });
        }

        let mut pff_fuse = Vec::new();
        if config.use_pff {
            for i in 0..levels - 1 {
                pff_fuse.push(Conv2d::new(ps, &format!("decoder.pff.fuse.{i}"), 2 * e, e, 1, 1, 0, 1, true)?);
            }
        }

        let baseline_fuse = if !config.use_pff {
            let conv = Conv2d::new(ps, "decoder.fuse.conv", levels * e, e, 1, 1, 0, 1, false)?;
            let bn = BatchNorm2d::new(ps, "decoder.fuse.bn", e)?;
            Some((conv, bn))
        } else {
            None
        };

        let fsm = if config.use_fsm {
            Some(Fsm::new(ps, "decoder.fsm", levels * e, e, config.fsm_reduction)?)
        } else {
            None
        };

        let reduce = if config.use_aggregation && !config.use_fsm {
            Some(Conv2d::new(ps, "decoder.reduce", levels * e, e, 1, 1, 0, 1, true)?)
        } else {
            None
        };

        let pred = Conv2d::new(ps, "decoder.pred", e, config.num_classes, 1, 1, 0, 1, true)?;

        Ok(Self { config, project, pff_fuse, baseline_fuse, reduce, fsm, pred })
    }

    /// Refine pyramid level `i` (0-based) into the decoder width.
    pub fn feature_refine(&self, i: usize, f: &Tensor, mode: &Mode) -> Result<Tensor> {
        let c = f.dims4()?.1;
        if c != self.config.in_channels[i] {
            return Err(Error::Config(format!(
                "level {} expects {} channels, got {c}",
                i,
                self.config.in_channels[i]
            )));
        }
        match &self.project[i] {
            LevelProject::Frm(frm) => frm.forward(f, mode),
            LevelProject::Linear(lin) => lin.forward(f),
        }
    }

    /// Top-down pairwise fusion. Takes the refined maps at native
    /// resolutions, upsamples everything to the lowest level's (1/4)
    /// resolution and concatenate-fuses adjacent scales. Returns y1..yL.
    pub fn progressive_fuse(&self, refined: &[Tensor]) -> Result<Vec<Tensor>> {
        if !self.config.use_pff {
            return Err(Error::Config("progressive fusion disabled in this head".into()));
        }
        let e = self.config.embed_dim;
        for (i, r) in refined.iter().enumerate() {
            let c = r.dims4()?.1;
            if c != e {
                return Err(Error::Config(format!(
                    "fusion input {i} has width {c}, expected embed_dim {e}"
                )));
            }
        }
        let (_, _, th, tw) = refined[0].dims4()?;
        let ups: Vec<Tensor> = refined
            .iter()
            .map(|r| resize_bilinear(r, th, tw))
            .collect::<Result<_>>()?;
        let levels = ups.len();
        let mut ys = vec![Tensor::zeros(1, refined[0].dtype(), refined[0].device())?; levels];
        ys[levels - 1] = ups[levels - 1].clone();
        for i in (0..levels - 1).rev() {
            let cat = Tensor::cat(&[&ys[i + 1], &ups[i]], 1)?;
            ys[i] = self.pff_fuse[i].forward(&cat)?;
        }
        Ok(ys)
    }

    /// Channel concatenation of all fused branches in fixed y1..yL order.
    pub fn aggregate(&self, fused: &[Tensor]) -> Result<Tensor> {
        let levels = self.config.num_levels();
        if fused.len() != levels {
            return Err(Error::Dim(format!(
                "aggregation expects {levels} maps, got {}",
                fused.len()
            )));
        }
        let (_, _, h0, w0) = fused[0].dims4()?;
        for (i, f) in fused.iter().enumerate() {
            let (_, c, h, w) = f.dims4()?;
            if (h, w) != (h0, w0) {
                return Err(Error::Dim(format!(
                    "aggregation input {i} is {h}x{w}, expected {h0}x{w0}"
                )));
            }
            if c != self.config.embed_dim {
                return Err(Error::Dim(format!(
                    "aggregation input {i} has width {c}, expected {}",
                    self.config.embed_dim
                )));
            }
        }
        let refs: Vec<&Tensor> = fused.iter().collect();
        Ok(Tensor::cat(&refs, 1)?)
    }

    /// Channel attention + reduction; also returns the weighting vector.
    pub fn feature_select(&self, aggregated: &Tensor) -> Result<(Tensor, Tensor)> {
        let fsm = self
            .fsm
            .as_ref()
            .ok_or_else(|| Error::Config("selection module disabled in this head".into()))?;
        let c = aggregated.dims4()?.1;
        let want = self.config.num_levels() * self.config.embed_dim;
        if c != want {
            return Err(Error::Dim(format!("selection expects {want} channels, got {c}")));
        }
        fsm.forward(aggregated)
    }

    /// Elementwise addition of the selection output and the most-fused
    /// highest-resolution branch.
    pub fn fuse_low_level(&self, selected: &Tensor, lowest: &Tensor) -> Result<Tensor> {
        if selected.dims() != lowest.dims() {
            return Err(Error::Dim(format!(
                "skip addition shape mismatch: {:?} vs {:?}",
                selected.dims(),
                lowest.dims()
            )));
        }
        Ok((selected + lowest)?)
    }

    /// 1x1 projection to class logits and 4x upsampling.
    pub fn predict_mask(&self, x: &Tensor, out_size: (usize, usize)) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if out_size != (4 * h, 4 * w) {
            return Err(Error::Dim(format!(
                "output size {:?} must be 4x the {h}x{w} input",
                out_size
            )));
        }
        let logits = self.pred.forward(x)?;
        resize_bilinear(&logits, out_size.0, out_size.1)
    }

    /// Full head composition.
    pub fn decode(&self, pyramid: &FeaturePyramid, mode: &mut Mode, probe: &mut Probe) -> Result<DecoderState> {
        let cfg = &self.config;
        if pyramid.levels.len() != cfg.num_levels() {
            return Err(Error::Config(format!(
                "pyramid has {} levels, decoder configured for {}",
                pyramid.levels.len(),
                cfg.num_levels()
            )));
        }
        let mut refined = Vec::with_capacity(cfg.num_levels());
        for (i, f) in pyramid.levels.iter().enumerate() {
            let r = self.feature_refine(i, f, mode)?;
            refined.push(probe.tap(&format!("decoder.refined.{}", i + 1), r)?);
        }
        let out_size = pyramid.input_size;

        if !cfg.use_pff {
            // flat baseline: upsample every projection to 1/4, concat, fuse
            let (_, _, th, tw) = refined[0].dims4()?;
            let ups: Vec<Tensor> = refined
                .iter()
                .map(|r| resize_bilinear(r, th, tw))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = ups.iter().collect();
            let cat = Tensor::cat(&refs, 1)?;
            let (conv, bn) = self.baseline_fuse.as_ref().expect("baseline head has fuse block");
            let fusedmap = bn.forward(&conv.forward(&cat)?, mode)?.relu()?;
            let logits = self.predict_mask(&fusedmap, out_size)?;
            return Ok(DecoderState {
                refined,
                fused: vec![fusedmap],
                aggregated: None,
                selection_weights: None,
                selected: None,
                logits,
            });
        }

        let mut fused = self.progressive_fuse(&refined)?;
        for (i, y) in fused.iter_mut().enumerate() {
            *y = probe.tap(&format!("decoder.pff.y{}", i + 1), y.clone())?;
        }

        if !cfg.use_aggregation {
            let logits = self.predict_mask(&fused[0], out_size)?;
            return Ok(DecoderState {
                refined,
                fused,
                aggregated: None,
                selection_weights: None,
                selected: None,
                logits,
            });
        }

        let aggregated = probe.tap("decoder.aggregated", self.aggregate(&fused)?)?;

        let (selected, weights) = if cfg.use_fsm {
            let (sel, w) = self.feature_select(&aggregated)?;
            (probe.tap("decoder.fsm", sel)?, Some(w))
        } else {
            let reduce = self.reduce.as_ref().expect("aggregation-only head has reduce conv");
            (reduce.forward(&aggregated)?, None)
        };

        let pre = if cfg.use_skip {
            probe.tap("decoder.skip", self.fuse_low_level(&selected, &fused[0])?)?
        } else {
            selected.clone()
        };

        let logits = self.predict_mask(&pre, out_size)?;
        Ok(DecoderState {
            refined,
            fused,
            aggregated: Some(aggregated),
            selection_weights: weights,
            selected: Some(selected),
            logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use candle_core::{DType, Device, Tensor};

    fn rand_map(dims: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let data: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        Tensor::from_vec(data, dims, &Device::Cpu).unwrap()
    }

    fn toy_decoder(cfg: DecoderConfig, seed: u64) -> (Decoder, ParamStore) {
        let mut ps = ParamStore::new(DType::F32, seed);
        let dec = Decoder::new(&mut ps, cfg).unwrap();
        (dec, ps)
    }

    fn identity_slice(e: usize, first_half: bool) -> Tensor {
        // (e, 2e, 1, 1) selecting one half of the concatenated input
        let mut w = vec![0f32; e * 2 * e];
        for o in 0..e {
            let i = if first_half { o } else { e + o };
            w[o * 2 * e + i] = 1.0;
        }
        Tensor::from_vec(w, (e, 2 * e, 1, 1), &Device::Cpu).unwrap()
    }

    #[test]
    fn frm_shape_and_nonnegativity() {
        let cfg = DecoderConfig::lapformer(vec![64, 128, 320, 512], 128);
        let (dec, _ps) = toy_decoder(cfg, 1);
        let f3 = rand_map((1, 320, 22, 22), 2);
        let r = dec.feature_refine(2, &f3, &Mode::Eval).unwrap();
        assert_eq!(r.dims4().unwrap(), (1, 128, 22, 22));
        let min = r.flatten_all().unwrap().min(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(min >= 0.0);

        let f1 = rand_map((1, 64, 88, 88), 3);
        let r1 = dec.feature_refine(0, &f1, &Mode::Eval).unwrap();
        assert_eq!(r1.dims4().unwrap(), (1, 128, 88, 88));
    }

    #[test]
    fn frm_zero_passthrough() {
        // zero input with bias=0 and batch-norm shift 0 stays exactly zero
        let cfg = DecoderConfig::lapformer(vec![4, 8], 4);
        let (dec, _ps) = toy_decoder(cfg, 4);
        let zeros = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let r = dec.feature_refine(0, &zeros, &Mode::Eval).unwrap();
        let v = r.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frm_channel_mismatch_names_level() {
        let cfg = DecoderConfig::lapformer(vec![4, 8], 4);
        let (dec, _ps) = toy_decoder(cfg, 4);
        let bad = rand_map((1, 6, 8, 8), 5);
        let err = dec.feature_refine(1, &bad, &Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("level 1"), "{err}");
    }

    #[test]
    fn pff_all_outputs_at_quarter_resolution() {
        let cfg = DecoderConfig::lapformer(vec![8, 16, 24, 32], 16);
        let (dec, _ps) = toy_decoder(cfg, 6);
        let refined: Vec<Tensor> = [(16, 24, 24), (16, 12, 12), (16, 6, 6), (16, 3, 3)]
            .iter()
            .enumerate()
            .map(|(i, &(c, h, w))| rand_map((1, c, h, w), 10 + i as u64))
            .collect();
        let ys = dec.progressive_fuse(&refined).unwrap();
        assert_eq!(ys.len(), 4);
        for y in &ys {
            assert_eq!(y.dims4().unwrap(), (1, 16, 24, 24));
        }
    }

    #[test]
    fn pff_identity_weight_oracles() {
        let e = 4;
        let cfg = DecoderConfig::lapformer(vec![2, 6], e);
        let (dec, ps) = toy_decoder(cfg, 7);
        let x1 = rand_map((1, e, 8, 8), 20);
        let x2 = rand_map((1, e, 4, 4), 21);
        let y2_up = resize_bilinear(&x2, 8, 8).unwrap();

        let w = ps.get("decoder.pff.fuse.0.weight").unwrap();
        let b = ps.get("decoder.pff.fuse.0.bias").unwrap();
        b.set(&Tensor::zeros(e, DType::F32, &Device::Cpu).unwrap()).unwrap();

        // [I | 0] selects the upper branch: y1 == upsampled y2
        w.set(&identity_slice(e, true)).unwrap();
        let ys = dec.progressive_fuse(&[x1.clone(), x2.clone()]).unwrap();
        assert_eq!(
            ys[0].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y2_up.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );

        // [0 | I] selects the lower branch: y1 == x1
        w.set(&identity_slice(e, false)).unwrap();
        let ys = dec.progressive_fuse(&[x1.clone(), x2]).unwrap();
        assert_eq!(
            ys[0].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x1.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn aggregate_concat_semantics() {
        let cfg = DecoderConfig::lapformer(vec![8, 16, 24, 32], 16);
        let (dec, _ps) = toy_decoder(cfg, 8);
        let maps: Vec<Tensor> = (0..4).map(|i| rand_map((1, 16, 6, 6), 30 + i)).collect();
        let agg = dec.aggregate(&maps).unwrap();
        assert_eq!(agg.dims4().unwrap(), (1, 64, 6, 6));
        // channel slice k of the output equals input ⌊k/16⌋, channel k mod 16
        for k in [0usize, 15, 16, 40, 63] {
            let slice = agg.narrow(1, k, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let src = maps[k / 16].narrow(1, k % 16, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(slice, src);
        }

        let err = dec.aggregate(&maps[..3]).unwrap_err();
        assert!(err.to_string().contains("expects 4"), "{err}");

        let mut bad = maps.clone();
        bad[2] = rand_map((1, 16, 5, 6), 50);
        assert!(dec.aggregate(&bad).is_err());
    }

    #[test]
    fn fsm_shape_and_weight_range() {
        let cfg = DecoderConfig::lapformer(vec![8, 16, 24, 32], 16);
        let (dec, _ps) = toy_decoder(cfg, 9);
        let x = rand_map((2, 64, 8, 8), 60);
        let (sel, w) = dec.feature_select(&x).unwrap();
        assert_eq!(sel.dims4().unwrap(), (2, 16, 8, 8));
        let wv = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(wv.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fsm_hard_sigmoid_saturation() {
        let cfg = DecoderConfig::lapformer(vec![2, 6], 4);
        let (dec, ps) = toy_decoder(cfg, 10);
        let x = rand_map((1, 8, 4, 4), 61);
        let dev = Device::Cpu;

        // force the pre-activation far into saturation via the fc2 bias
        for (bias, expect_gate) in [(10f32, 1.0f32), (-10f32, 0.0f32)] {
            ps.get("decoder.fsm.fc2.weight")
                .unwrap()
                .set(&Tensor::zeros((8, 2), DType::F32, &dev).unwrap())
                .unwrap();
            ps.get("decoder.fsm.fc2.bias")
                .unwrap()
                .set(&(Tensor::ones(8, DType::F32, &dev).unwrap() * bias as f64).unwrap())
                .unwrap();
            let (_, w) = dec.feature_select(&x).unwrap();
            let wv = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(wv.iter().all(|&v| v == expect_gate), "gate {wv:?}");

            // and the gated map is exactly X or exactly zero
            let fsm = dec.fsm.as_ref().unwrap();
            let pooled = x.flatten_from(2).unwrap().mean(D::Minus1).unwrap();
            let z = fsm.fc2.forward(&fsm.fc1.forward(&pooled).unwrap().relu().unwrap()).unwrap();
            let gate = hard_sigmoid(&z).unwrap();
            let inter = x.broadcast_mul(&gate.reshape((1, 8, 1, 1)).unwrap()).unwrap();
            let iv = inter.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let xv = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            if expect_gate == 1.0 {
                assert_eq!(iv, xv);
            } else {
                assert!(iv.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn skip_addition_identities() {
        let cfg = DecoderConfig::lapformer(vec![2, 6], 4);
        let (dec, _ps) = toy_decoder(cfg, 11);
        let a = rand_map((1, 4, 8, 8), 70);
        let z = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let s = dec.fuse_low_level(&a, &z).unwrap();
        assert_eq!(
            s.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let b = rand_map((1, 4, 8, 8), 71);
        let ab = dec.fuse_low_level(&a, &b).unwrap();
        let ba = dec.fuse_low_level(&b, &a).unwrap();
        assert_eq!(
            ab.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            ba.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let bad = rand_map((1, 4, 8, 4), 72);
        assert!(dec.fuse_low_level(&a, &bad).is_err());
    }

    #[test]
    fn predict_mask_contract() {
        let cfg = DecoderConfig::lapformer(vec![2, 6], 4);
        let (dec, ps) = toy_decoder(cfg, 12);
        let x = rand_map((1, 4, 8, 8), 80);
        let logits = dec.predict_mask(&x, (32, 32)).unwrap();
        assert_eq!(logits.dims4().unwrap(), (1, 1, 32, 32));
        assert!(dec.predict_mask(&x, (31, 32)).is_err());

        // zero weights/bias -> zero logits -> probability one half
        let dev = Device::Cpu;
        ps.get("decoder.pred.weight").unwrap().set(&Tensor::zeros((1, 4, 1, 1), DType::F32, &dev).unwrap()).unwrap();
        ps.get("decoder.pred.bias").unwrap().set(&Tensor::zeros(1, DType::F32, &dev).unwrap()).unwrap();
        let z = dec.predict_mask(&x, (32, 32)).unwrap();
        let v = z.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn batch_items_process_independently() {
        let cfg = DecoderConfig::lapformer(vec![2, 6], 4);
        let (dec, _ps) = toy_decoder(cfg, 13);
        let a1 = rand_map((1, 2, 8, 8), 90);
        let a2 = rand_map((1, 2, 8, 8), 91);
        let b1 = rand_map((1, 6, 4, 4), 92);
        let b2 = rand_map((1, 6, 4, 4), 93);
        let batched = FeaturePyramid {
            levels: vec![Tensor::cat(&[&a1, &a2], 0).unwrap(), Tensor::cat(&[&b1, &b2], 0).unwrap()],
            input_size: (32, 32),
        };
        let single1 = FeaturePyramid { levels: vec![a1, b1], input_size: (32, 32) };
        let single2 = FeaturePyramid { levels: vec![a2, b2], input_size: (32, 32) };
        let full = dec.decode(&batched, &mut Mode::Eval, &mut Probe::none()).unwrap().logits;
        let s1 = dec.decode(&single1, &mut Mode::Eval, &mut Probe::none()).unwrap().logits;
        let s2 = dec.decode(&single2, &mut Mode::Eval, &mut Probe::none()).unwrap().logits;
        let f1 = full.narrow(0, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let f2 = full.narrow(0, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(f1, s1.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(f2, s2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn ablation_rows_all_construct_and_run() {
        for row in HeadVariant::ALL {
            let cfg = DecoderConfig::ablation(row, vec![4, 8, 12, 16], 8);
            let (dec, _ps) = toy_decoder(cfg, 14);
            let pyr = FeaturePyramid {
                levels: vec![
                    rand_map((1, 4, 16, 16), 100),
                    rand_map((1, 8, 8, 8), 101),
                    rand_map((1, 12, 4, 4), 102),
                    rand_map((1, 16, 2, 2), 103),
                ],
                input_size: (64, 64),
            };
            let state = dec.decode(&pyr, &mut Mode::Eval, &mut Probe::none()).unwrap();
            assert_eq!(state.logits.dims4().unwrap(), (1, 1, 64, 64), "{}", row.label());
        }
    }

    #[test]
    fn invalid_flag_chains_rejected() {
        let mut cfg = DecoderConfig::lapformer(vec![2, 6], 4);
        cfg.use_pff = false;
        assert!(cfg.validate().is_err()); // aggregation without fusion
        let mut cfg2 = DecoderConfig::lapformer(vec![2, 6], 4);
        cfg2.use_fsm = false;
        assert!(cfg2.validate().is_err()); // skip without selection
    }
}
