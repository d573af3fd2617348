//! The pretraining network.
//!
//! ```text
//! component image ─ embed (per modality) ─ stage 1 ─ down ─ stage 2 ─ down ─ stage 3 ─ down ─ stage 4
//!                                                                               │              │
//!                       spatial decoder (both levels of stage 3 and 4) ◄────────┴──────────────┤
//!                       frequency decoder (stage 4 of one level) ◄─────────────────────────────┘
//! ```
//!
//! Four streams (optical/SAR × low/high) run through one shared trunk; only
//! the embeddings and the decoders are modality specific. Stage fields
//! (diffusivity and spatial correction) are shared by every block of a stage.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::heat::{Activation, HcoBlock, Linear, MLP_EXPANSION};
use crate::masking::PairComponents;
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::spectral::{SpectralPlan, TransformPath};
use crate::tensor::{DType, Gradients, Tape, Tensor, Var};

/// Upscale factor of the final pixel shuffle in every decoder.
pub const DECODER_SHUFFLE: usize = 16;
/// Width of the frequency decoder after its first pixel shuffle.
const FREQ_DECODER_SHUFFLE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Optical,
    Sar,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Optical, Modality::Sar];

    pub fn channels(self) -> usize {
        match self {
            Modality::Optical => 3,
            Modality::Sar => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Optical => "optical",
            Modality::Sar => "sar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Low,
    High,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Low, Level::High];

    pub fn name(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::High => "high",
        }
    }
}

/// Which loss terms drive training. Disabled terms are still computed and
/// logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    /// Spatial reconstruction.
    pub sdr: bool,
    /// Frequency reconstruction.
    pub fdr: bool,
    /// Contrastive alignment of the two frequency views.
    pub cl: bool,
}

impl LossToggles {
    pub const ALL: LossToggles = LossToggles {
        sdr: true,
        fdr: true,
        cl: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.sdr || self.fdr || self.cl)
    }

    /// Parses a comma separated list such as `sdr,fdr`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = LossToggles {
            sdr: false,
            fdr: false,
            cl: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "sdr" => t.sdr = true,
                "fdr" => t.fdr = true,
                "cl" => t.cl = true,
                other => return Err(Error::Config(format!("unknown loss term `{other}`"))),
            }
        }
        Ok(t)
    }
}

impl fmt::Display for LossToggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.sdr, "sdr"), (self.fdr, "fdr"), (self.cl, "cl")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(H, W)` of input images.
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub toggles: LossToggles,
    pub transform: TransformPath,
    pub activation: Activation,
    /// Diffusion time of every block.
    pub diffusion_time: f64,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-sized four-stage ladder on 64×64 inputs.
    pub fn desk() -> Self {
        Self {
            image_size: (64, 64),
            patch_size: 4,
            stage_depths: vec![1, 1, 2, 1],
            stage_widths: vec![16, 32, 64, 128],
            toggles: LossToggles::ALL,
            transform: TransformPath::Matmul,
            activation: Activation::Gelu,
            diffusion_time: 1.0,
            dtype: DType::F32,
        }
    }

    /// The base-sized ladder (2, 2, 18, 2) with widths (128, 256, 512, 1024).
    pub fn base(image: usize) -> Self {
        Self {
            image_size: (image, image),
            stage_depths: vec![2, 2, 18, 2],
            stage_widths: vec![128, 256, 512, 1024],
            ..Self::desk()
        }
    }

    pub fn with_image(mut self, side: usize) -> Self {
        self.image_size = (side, side);
        self
    }

    /// Total downsampling from pixels to the last stage grid.
    pub fn total_stride(&self) -> usize {
        self.patch_size << (self.stage_depths.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.len() != 4 || self.stage_widths.len() != 4 {
            return Err(Error::Config(format!(
                "need 4 stage depths and widths, got {:?} and {:?}",
                self.stage_depths, self.stage_widths
            )));
        }
        if self.stage_depths.iter().any(|&d| d == 0) || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(
                "stage depths and widths must be positive".into(),
            ));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        let s = self.total_stride();
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} must be a positive multiple of {s} (patch {} and three 2x downsamplings)",
                self.patch_size
            )));
        }
        // The decoders restore the image with fixed shuffle factors.
        if s != DECODER_SHUFFLE * FREQ_DECODER_SHUFFLE {
            return Err(Error::Config(format!(
                "decoders assume a total stride of {}, got {s}",
                DECODER_SHUFFLE * FREQ_DECODER_SHUFFLE
            )));
        }
        if self.stage_widths[3] % (FREQ_DECODER_SHUFFLE * FREQ_DECODER_SHUFFLE) != 0 {
            return Err(Error::Config(
                "last stage width must be divisible by 4".into(),
            ));
        }
        if !(self.diffusion_time >= 0.0 && self.diffusion_time.is_finite()) {
            return Err(Error::Config("diffusion_time must be >= 0".into()));
        }
        Ok(())
    }

    /// Token grid `(rows, cols)` of stage `s`.
    pub fn stage_grid(&self, s: usize) -> (usize, usize) {
        let f = self.patch_size << s;
        (self.image_size.0 / f, self.image_size.1 / f)
    }
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn to_dtype(&self, dtype: DType) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.to_dtype(dtype)))
                .collect(),
        }
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }

    /// Gradient of every parameter, zeros for unreachable ones.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get(*v)))
            .collect()
    }

    fn linear(&self, prefix: &str) -> Result<Linear<'t>> {
        Ok(Linear {
            weight: self.get(&format!("{prefix}.weight"))?,
            bias: self.get(&format!("{prefix}.bias"))?,
        })
    }

    fn conv(&self, prefix: &str, x: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        x.conv2d(w, Some(b), stride, padding)
    }
}

/// Per-stage outputs of one stream.
#[derive(Debug, Clone)]
pub struct EncoderOutput<'t> {
    pub stages: Vec<Var<'t>>,
}

impl<'t> EncoderOutput<'t> {
    pub fn stage3(&self) -> Var<'t> {
        self.stages[2]
    }

    pub fn stage4(&self) -> Var<'t> {
        self.stages[3]
    }
}

/// A configured network with its spectral plans.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    stage_plans: Vec<Arc<SpectralPlan>>,
    image_plan: Arc<SpectralPlan>,
}

fn weight(shape: &[usize], fan_in: usize, rng: &mut Xoshiro256pp) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stage_plans = (0..4)
            .map(|s| {
                let (m, n) = cfg.stage_grid(s);
                SpectralPlan::new(m, n, cfg.transform).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        let image_plan = Arc::new(SpectralPlan::new(
            cfg.image_size.0,
            cfg.image_size.1,
            cfg.transform,
        )?);
        Ok(Self {
            cfg,
            stage_plans,
            image_plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn image_plan(&self) -> &Arc<SpectralPlan> {
        &self.image_plan
    }

    pub fn stage_plan(&self, s: usize) -> &Arc<SpectralPlan> {
        &self.stage_plans[s]
    }

    /// Fresh parameters, deterministic in `seed`, stored at the config dtype.
    pub fn init_params(&self, seed: u64) -> Params {
        let cfg = &self.cfg;
        let mut rng = Xoshiro256pp::seed_from(derive_seed(seed, &[0x1417]));
        let mut p = Params::new();
        let w = &cfg.stage_widths;
        let ps = cfg.patch_size;
        for m in Modality::ALL {
            let c = m.channels();
            p.insert(
                format!("embed.{}.weight", m.name()),
                weight(&[w[0], c, ps, ps], c * ps * ps, &mut rng),
            );
            p.insert(format!("embed.{}.bias", m.name()), Tensor::zeros(&[w[0]]));
        }
        for s in 0..4 {
            let c = w[s];
            let (gm, gn) = cfg.stage_grid(s);
            p.insert(
                format!("stage{s}.fve_raw"),
                Tensor::randn(&[gm, gn, c], 0.02, &mut rng),
            );
            p.insert(
                format!("stage{s}.sce"),
                Tensor::randn(&[gm, gn, c], 0.02, &mut rng),
            );
            for b in 0..cfg.stage_depths[s] {
                let h = MLP_EXPANSION * c;
                for (name, co, ci) in [
                    ("proj_in", c, c),
                    ("proj_out", c, c),
                    ("fc1", h, c),
                    ("fc2", c, h),
                ] {
                    p.insert(
                        format!("stage{s}.block{b}.{name}.weight"),
                        weight(&[co, ci], ci, &mut rng),
                    );
                    p.insert(
                        format!("stage{s}.block{b}.{name}.bias"),
                        Tensor::zeros(&[co]),
                    );
                }
            }
            if s > 0 {
                p.insert(
                    format!("down{s}.weight"),
                    weight(&[c, w[s - 1], 2, 2], 4 * w[s - 1], &mut rng),
                );
                p.insert(format!("down{s}.bias"), Tensor::zeros(&[c]));
            }
        }
        let (c3, c4) = (w[2], w[3]);
        let r2 = DECODER_SHUFFLE * DECODER_SHUFFLE;
        for m in Modality::ALL {
            let n = m.name();
            let cm = m.channels();
            let q = c4 / (FREQ_DECODER_SHUFFLE * FREQ_DECODER_SHUFFLE);
            p.insert(
                format!("dec_freq.{n}.conv.weight"),
                weight(&[c4, c4, 3, 3], 9 * c4, &mut rng),
            );
            p.insert(format!("dec_freq.{n}.conv.bias"), Tensor::zeros(&[c4]));
            p.insert(
                format!("dec_freq.{n}.head.weight"),
                weight(&[cm * r2, q, 1, 1], q, &mut rng),
            );
            p.insert(format!("dec_freq.{n}.head.bias"), Tensor::zeros(&[cm * r2]));
            for lvl in Level::ALL {
                let l = lvl.name();
                p.insert(
                    format!("dec_spa.{n}.{l}3.weight"),
                    weight(&[c3 / 2, c3, 1, 1], c3, &mut rng),
                );
                p.insert(format!("dec_spa.{n}.{l}3.bias"), Tensor::zeros(&[c3 / 2]));
                p.insert(
                    format!("dec_spa.{n}.{l}4.weight"),
                    weight(&[c4 / 2, c4, 1, 1], c4, &mut rng),
                );
                p.insert(format!("dec_spa.{n}.{l}4.bias"), Tensor::zeros(&[c4 / 2]));
            }
            p.insert(
                format!("dec_spa.{n}.g3.weight"),
                weight(&[c3, c3, 3, 3], 9 * c3, &mut rng),
            );
            p.insert(format!("dec_spa.{n}.g3.bias"), Tensor::zeros(&[c3]));
            p.insert(
                format!("dec_spa.{n}.g4.weight"),
                weight(&[c3, c4, 1, 1], c4, &mut rng),
            );
            p.insert(format!("dec_spa.{n}.g4.bias"), Tensor::zeros(&[c3]));
            p.insert(
                format!("dec_spa.{n}.head.weight"),
                weight(&[cm * r2, c3, 1, 1], c3, &mut rng),
            );
            p.insert(format!("dec_spa.{n}.head.bias"), Tensor::zeros(&[cm * r2]));
        }
        p.to_dtype(cfg.dtype)
    }

    /// Closed-form parameter count of [`Model::init_params`].
    pub fn param_count_formula(&self) -> usize {
        let cfg = &self.cfg;
        let w = &cfg.stage_widths;
        let ps2 = cfg.patch_size * cfg.patch_size;
        let r2 = DECODER_SHUFFLE * DECODER_SHUFFLE;
        let mut total = 0;
        for m in Modality::ALL {
            total += w[0] * m.channels() * ps2 + w[0];
        }
        for s in 0..4 {
            let c = w[s];
            let (gm, gn) = cfg.stage_grid(s);
            total += 2 * gm * gn * c;
            // proj_in, proj_out, fc1, fc2 with biases.
            let block = 2 * (c * c + c)
                + (MLP_EXPANSION * c * c + MLP_EXPANSION * c)
                + (MLP_EXPANSION * c * c + c);
            total += cfg.stage_depths[s] * block;
            if s > 0 {
                total += c * w[s - 1] * 4 + c;
            }
        }
        let (c3, c4) = (w[2], w[3]);
        for m in Modality::ALL {
            let cm = m.channels();
            total += c4 * c4 * 9 + c4;
            total += cm * r2 * (c4 / 4) + cm * r2;
            total += 2 * ((c3 / 2) * c3 + c3 / 2 + (c4 / 2) * c4 + c4 / 2);
            total += c3 * c3 * 9 + c3 + c3 * c4 + c3;
            total += cm * r2 * c3 + cm * r2;
        }
        total
    }

    /// Strided patchification `[C_mod, H, W] → [C₀, H/ps, W/ps]`.
    pub fn embed<'t>(&self, p: &Bound<'t>, x: Var<'t>, modality: Modality) -> Result<Var<'t>> {
        let s = x.shape();
        let ps = self.cfg.patch_size;
        if s.len() != 3 || s[0] != modality.channels() || s[1] % ps != 0 || s[2] % ps != 0 {
            return Err(Error::shape(
                "embed",
                format!("{} image {s:?} with patch size {ps}", modality.name()),
            ));
        }
        p.conv(&format!("embed.{}", modality.name()), x, ps, 0)
    }

    fn block<'t>(&self, p: &Bound<'t>, s: usize, b: usize) -> Result<HcoBlock<'t>> {
        let pre = format!("stage{s}.block{b}");
        Ok(HcoBlock {
            fve_raw: p.get(&format!("stage{s}.fve_raw"))?,
            sce: p.get(&format!("stage{s}.sce"))?,
            t: self.cfg.diffusion_time,
            activation: self.cfg.activation,
            proj_in: p.linear(&format!("{pre}.proj_in"))?,
            proj_out: p.linear(&format!("{pre}.proj_out"))?,
            fc1: p.linear(&format!("{pre}.fc1"))?,
            fc2: p.linear(&format!("{pre}.fc2"))?,
        })
    }

    /// Runs one component image through the shared trunk.
    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        modality: Modality,
    ) -> Result<EncoderOutput<'t>> {
        let (h, w) = self.cfg.image_size;
        if x.shape()[1..] != [h, w] {
            return Err(Error::shape(
                "encode",
                format!("image {:?} for a {h}x{w} model", x.shape()),
            ));
        }
        let mut z = self.embed(p, x, modality)?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            if s > 0 {
                z = p.conv(&format!("down{s}"), z, 2, 0)?;
            }
            for b in 0..self.cfg.stage_depths[s] {
                let blk = self.block(p, s, b)?;
                z = crate::heat::hco_block(&blk, &self.stage_plans[s], z)?;
            }
            stages.push(z);
        }
        Ok(EncoderOutput { stages })
    }

    /// Reconstructs one component image from the last stage of its stream.
    pub fn decode_frequency<'t>(
        &self,
        p: &Bound<'t>,
        feats: &EncoderOutput<'t>,
        modality: Modality,
    ) -> Result<Var<'t>> {
        let pre = format!("dec_freq.{}", modality.name());
        let x = p.conv(&format!("{pre}.conv"), feats.stage4(), 1, 1)?;
        let x = x.pixel_shuffle(FREQ_DECODER_SHUFFLE)?.gelu()?;
        p.conv(&format!("{pre}.head"), x, 1, 0)?
            .pixel_shuffle(DECODER_SHUFFLE)
    }

    /// Fuses both frequency levels of stages 3 and 4 and decodes the full image.
    pub fn fuse_and_decode_spatial<'t>(
        &self,
        p: &Bound<'t>,
        low: &EncoderOutput<'t>,
        high: &EncoderOutput<'t>,
        modality: Modality,
    ) -> Result<Var<'t>> {
        let pre = format!("dec_spa.{}", modality.name());
        let f3 = Var::concat(&[
            p.conv(&format!("{pre}.low3"), low.stage3(), 1, 0)?,
            p.conv(&format!("{pre}.high3"), high.stage3(), 1, 0)?,
        ])?;
        let f4 = Var::concat(&[
            p.conv(&format!("{pre}.low4"), low.stage4(), 1, 0)?,
            p.conv(&format!("{pre}.high4"), high.stage4(), 1, 0)?,
        ])?;
        let a = p.conv(&format!("{pre}.g3"), f3, 1, 1)?.relu()?;
        let b = p
            .conv(&format!("{pre}.g4"), f4, 1, 0)?
            .relu()?
            .upsample2x()?;
        let g = a.add(b)?;
        p.conv(&format!("{pre}.head"), g, 1, 0)?
            .pixel_shuffle(DECODER_SHUFFLE)
    }

    /// Runs all four streams of one training item.
    pub fn forward<'t>(&self, p: &Bound<'t>, item: &TrainItem) -> Result<Outputs<'t>> {
        let tape = p
            .iter()
            .next()
            .map(|(_, v)| v.tape())
            .ok_or_else(|| Error::Contract("empty parameter set".into()))?;
        let mut per = BTreeMap::new();
        for m in Modality::ALL {
            let comps = item.components_of(m);
            let low = self.encode(p, tape.constant(comps.low.clone()), m)?;
            let high = self.encode(p, tape.constant(comps.high.clone()), m)?;
            let recon_low = self.decode_frequency(p, &low, m)?;
            let recon_high = self.decode_frequency(p, &high, m)?;
            let spatial = self.fuse_and_decode_spatial(p, &low, &high, m)?;
            let pooled_low = low.stage4().channel_mean()?;
            let pooled_high = high.stage4().channel_mean()?;
            per.insert(
                m,
                ModalityOutputs {
                    recon_low,
                    recon_high,
                    spatial,
                    pooled_low,
                    pooled_high,
                },
            );
        }
        Ok(Outputs { per })
    }

    /// Forward plus loss for one item.
    pub fn loss<'t>(&self, p: &Bound<'t>, item: &TrainItem) -> Result<LossTerms<'t>> {
        let out = self.forward(p, item)?;
        loss_total(&self.image_plan, &out, item, self.cfg.toggles)
    }
}

/// Decoder outputs and pooled embeddings of one modality.
#[derive(Debug, Clone, Copy)]
pub struct ModalityOutputs<'t> {
    pub recon_low: Var<'t>,
    pub recon_high: Var<'t>,
    pub spatial: Var<'t>,
    pub pooled_low: Var<'t>,
    pub pooled_high: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct Outputs<'t> {
    pub per: BTreeMap<Modality, ModalityOutputs<'t>>,
}

/// One optical/SAR pair with its frequency components.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub optical: Tensor,
    pub sar: Tensor,
    pub components: PairComponents,
}

impl TrainItem {
    pub fn original(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Optical => &self.optical,
            Modality::Sar => &self.sar,
        }
    }

    pub fn components_of(&self, m: Modality) -> &crate::masking::Components {
        match m {
            Modality::Optical => &self.components.optical,
            Modality::Sar => &self.components.sar,
        }
    }
}

/// Scalar loss terms on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub con: Var<'t>,
    pub spa: Var<'t>,
    pub fre: Var<'t>,
}

/// Plain values of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub con: f64,
    pub spa: f64,
    pub fre: f64,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.value().item(),
            con: self.con.value().item(),
            spa: self.spa.value().item(),
            fre: self.fre.value().item(),
        }
    }
}

fn l1_mean<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.sub(b)?.abs()?.mean()
}

fn sum_vars<'t>(vars: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = acc.add(*v)?;
    }
    Ok(acc)
}

/// `total = [cl]·L_con + [sdr]·L_spa + [fdr]·L_fre`.
///
/// * `L_fre`: mean absolute DCT-coefficient error of each frequency
///   reconstruction against its component, summed over levels and modalities.
/// * `L_spa`: mean absolute pixel error of each spatial reconstruction
///   against the original image, summed over modalities.
/// * `L_con`: `1 - cos` between the pooled last-stage embeddings of the low
///   and high views, averaged over modalities.
pub fn loss_total<'t>(
    image_plan: &Arc<SpectralPlan>,
    out: &Outputs<'t>,
    item: &TrainItem,
    toggles: LossToggles,
) -> Result<LossTerms<'t>> {
    if toggles.is_empty() {
        return Err(Error::Config("no loss term enabled".into()));
    }
    let mut fre = Vec::new();
    let mut spa = Vec::new();
    let mut con = Vec::new();
    for (&m, o) in &out.per {
        let tape = o.spatial.tape();
        let comps = item.components_of(m);
        for (recon, target) in [(o.recon_low, &comps.low), (o.recon_high, &comps.high)] {
            let target_f = tape.constant(image_plan.dct2(target)?);
            fre.push(l1_mean(recon.dct2(image_plan)?, target_f)?);
        }
        spa.push(l1_mean(o.spatial, tape.constant(item.original(m).clone()))?);
        con.push(
            o.pooled_low
                .cosine(o.pooled_high)?
                .scale(-1.0)?
                .add_scalar(1.0)?,
        );
    }
    if con.is_empty() {
        return Err(Error::Contract("no modality outputs".into()));
    }
    let fre = sum_vars(&fre)?;
    let spa = sum_vars(&spa)?;
    let con = sum_vars(&con)?.scale(1.0 / out.per.len() as f64)?;
    let enabled: Vec<Var<'t>> = [(toggles.cl, con), (toggles.sdr, spa), (toggles.fdr, fre)]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, v)| *v)
        .collect();
    let total = sum_vars(&enabled)?;
    Ok(LossTerms {
        total,
        con,
        spa,
        fre,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::mask_batch;

    fn item(cfg: &ModelConfig, seed: u64) -> TrainItem {
        let (h, w) = cfg.image_size;
        let mut rng = Xoshiro256pp::seed_from(seed);
        let optical = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let sar = Tensor::uniform(&[1, h, w], 0.0, 1.0, &mut rng);
        let plan = SpectralPlan::new(h, w, TransformPath::Matmul).unwrap();
        let components = mask_batch(&plan, &[(optical.clone(), sar.clone())], seed)
            .unwrap()
            .remove(0);
        TrainItem {
            optical,
            sar,
            components,
        }
    }

    fn f64_desk(side: usize) -> ModelConfig {
        ModelConfig {
            dtype: DType::F64,
            ..ModelConfig::desk().with_image(side)
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::desk().with_image(48).validate().is_err());
        let mut c = ModelConfig::desk();
        c.stage_depths.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_formula() {
        for side in [32, 64, 96] {
            let model = Model::new(f64_desk(side)).unwrap();
            let p = model.init_params(1);
            assert_eq!(p.numel(), model.param_count_formula());
        }
    }

    #[test]
    fn embed_shapes_and_bias() {
        let model = Model::new(f64_desk(32)).unwrap();
        let params = model.init_params(2);
        let tape = Tape::new(DType::F64);
        let p = params.bind(&tape);
        let y = model
            .embed(
                &p,
                tape.constant(Tensor::zeros(&[3, 32, 32])),
                Modality::Optical,
            )
            .unwrap();
        assert_eq!(y.shape(), vec![16, 8, 8]);
        assert!(y.value().max_abs() == 0.0);
        assert!(model
            .embed(
                &p,
                tape.constant(Tensor::zeros(&[1, 30, 32])),
                Modality::Sar
            )
            .is_err());
    }

    #[test]
    fn reconstructions_match_target_shapes() {
        for side in [32, 64, 96] {
            let cfg = f64_desk(side);
            let model = Model::new(cfg.clone()).unwrap();
            let params = model.init_params(3);
            let it = item(&cfg, 4);
            let tape = Tape::inference(DType::F64);
            let p = params.bind(&tape);
            let out = model.forward(&p, &it).unwrap();
            for m in Modality::ALL {
                let o = &out.per[&m];
                let want = vec![m.channels(), side, side];
                assert_eq!(o.recon_low.shape(), want);
                assert_eq!(o.recon_high.shape(), want);
                assert_eq!(o.spatial.shape(), want);
            }
        }
    }

    #[test]
    fn total_is_sum_of_enabled_terms() {
        let cfg = f64_desk(32);
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init_params(5);
        let it = item(&cfg, 6);
        let tape = Tape::inference(DType::F64);
        let p = params.bind(&tape);
        let out = model.forward(&p, &it).unwrap();
        let all = loss_total(model.image_plan(), &out, &it, LossToggles::ALL)
            .unwrap()
            .breakdown();
        assert_eq!(all.total, all.con + all.spa + all.fre);
        let sdr = LossToggles::parse("sdr").unwrap();
        let only = loss_total(model.image_plan(), &out, &it, sdr)
            .unwrap()
            .breakdown();
        assert_eq!(only.total, only.spa);
        let none = LossToggles::parse("").unwrap();
        assert!(loss_total(model.image_plan(), &out, &it, none).is_err());
    }

    #[test]
    fn swapping_levels_changes_spatial_output() {
        let cfg = f64_desk(32);
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init_params(7);
        let it = item(&cfg, 8);
        let tape = Tape::inference(DType::F64);
        let p = params.bind(&tape);
        let c = &it.components.optical;
        let lo = model
            .encode(&p, tape.constant(c.low.clone()), Modality::Optical)
            .unwrap();
        let hi = model
            .encode(&p, tape.constant(c.high.clone()), Modality::Optical)
            .unwrap();
        let a = model
            .fuse_and_decode_spatial(&p, &lo, &hi, Modality::Optical)
            .unwrap();
        let b = model
            .fuse_and_decode_spatial(&p, &hi, &lo, Modality::Optical)
            .unwrap();
        assert!(a.value().max_abs_diff(&b.value()) > 1e-6);
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        // At 32 pixels the last grid is 1x1 and only carries DC, where the
        // filter does not depend on the diffusivity.
        let cfg = f64_desk(64);
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init_params(9);
        let it = item(&cfg, 10);
        let tape = Tape::new(DType::F64);
        let p = params.bind(&tape);
        let loss = model.loss(&p, &it).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        for (name, v) in p.iter() {
            assert!(grads.contains(*v), "{name} unreachable");
            let g = grads.get(*v);
            assert!(g.is_finite(), "{name}");
            assert!(g.max_abs() > 0.0, "{name} has zero gradient");
        }
    }

    #[test]
    fn forward_is_pure() {
        let cfg = f64_desk(32);
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init_params(11);
        let it = item(&cfg, 12);
        let run = || {
            let tape = Tape::inference(DType::F64);
            let p = params.bind(&tape);
            model.loss(&p, &it).unwrap().breakdown()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn toggles_round_trip() {
        let t = LossToggles::parse("sdr, cl").unwrap();
        assert_eq!(t.to_string(), "sdr,cl");
        assert!(LossToggles::parse("foo").is_err());
    }
}
