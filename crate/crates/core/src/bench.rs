//! Complexity measurements and the finite-difference heat oracle.
//!
//! Flop counts use 2 flops per multiply-add. Sides are token-grid sides, so
//! a stage on an `s×s` grid has `N = s²` tokens.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::heat::{hco_block, Linear, MLP_EXPANSION};
use crate::model::{Bound, Modality, Model, ModelConfig, Params};
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::tensor::{DType, Tape, Tensor, Var};

/// Flop convention printed with every report.
pub const FLOP_CONVENTION: &str = "1 multiply + 1 add = 2 flops";
/// Flops per coefficient of the heat filter (`k·ω²`, `·t`, `exp`, `·x`).
pub const FILTER_FLOPS: u64 = 4;

/// Component breakdown of an analytic flop count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub model: &'static str,
    pub side: usize,
    pub tokens: usize,
    pub channels: usize,
    pub depth: usize,
    pub components: Vec<(&'static str, u64)>,
    pub total: u64,
}

impl FlopsReport {
    fn new(
        model: &'static str,
        side: usize,
        channels: usize,
        depth: usize,
        components: Vec<(&'static str, u64)>,
    ) -> Self {
        let total = components.iter().map(|c| c.1).sum();
        Self {
            model,
            side,
            tokens: side * side,
            channels,
            depth,
            components,
            total,
        }
    }

    pub fn component(&self, name: &str) -> u64 {
        self.components
            .iter()
            .filter(|c| c.0 == name)
            .map(|c| c.1)
            .sum()
    }

    /// Flops of the token mixer alone (everything but the pointwise MLP).
    pub fn mixer(&self) -> u64 {
        self.total - self.component("mlp")
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# {} side={} N={} C={} depth={} ({FLOP_CONVENTION})",
            self.model, self.side, self.tokens, self.channels, self.depth
        )?;
        for (name, v) in &self.components {
            writeln!(f, "{name:>14} {v}")?;
        }
        write!(f, "{:>14} {}", "total", self.total)
    }
}

fn pointwise(c_out: usize, c_in: usize, n: usize) -> u64 {
    2 * (c_out * c_in * n) as u64
}

/// One stage of `depth` heat-conduction blocks on an `s×s` grid, dense DCT.
pub fn flops_hco_stage(side: usize, channels: usize, depth: usize) -> FlopsReport {
    let (s, c, d) = (side as u64, channels as u64, depth as u64);
    let n = side * side;
    let transform = 4 * c * s * s * s;
    FlopsReport::new(
        "hco",
        side,
        channels,
        depth,
        vec![
            ("dct", d * transform),
            ("filter", d * FILTER_FLOPS * c * s * s),
            ("idct", d * transform),
            ("proj", d * 2 * pointwise(channels, channels, n)),
            (
                "mlp",
                d * 2 * pointwise(MLP_EXPANSION * channels, channels, n),
            ),
        ],
    )
}

/// One stage of `depth` global single-head attention blocks on `s×s` tokens.
pub fn flops_attention_stage(side: usize, channels: usize, depth: usize) -> FlopsReport {
    let n = side * side;
    let (nn, c, d) = (n as u64, channels as u64, depth as u64);
    FlopsReport::new(
        "attention",
        side,
        channels,
        depth,
        vec![
            ("qkv", d * 3 * pointwise(channels, channels, n)),
            ("scores", d * 2 * nn * nn * c),
            ("weighted_sum", d * 2 * nn * nn * c),
            ("out_proj", d * pointwise(channels, channels, n)),
            (
                "mlp",
                d * 2 * pointwise(MLP_EXPANSION * channels, channels, n),
            ),
        ],
    )
}

/// Whole encoder (embedding, stages, downsampling) at `image` pixels.
pub fn flops_encoder(cfg: &ModelConfig, image: usize, attention: bool) -> u64 {
    let ps = cfg.patch_size;
    let w = &cfg.stage_widths;
    let g0 = image / ps;
    let mut total = 2 * (w[0] * 3 * ps * ps * g0 * g0) as u64;
    for s in 0..4 {
        let g = image / (ps << s);
        if s > 0 {
            total += 2 * (w[s] * w[s - 1] * 4 * g * g) as u64;
        }
        let r = if attention {
            flops_attention_stage(g, w[s], cfg.stage_depths[s])
        } else {
            flops_hco_stage(g, w[s], cfg.stage_depths[s])
        };
        total += r.total;
    }
    total
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Contract(
            "log-log fit needs >= 2 positive pairs".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Fitted exponents of mixer flops against token count.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub sides: Vec<usize>,
    pub channels: usize,
    pub hco_exponent: f64,
    pub attention_exponent: f64,
    /// Same fit on full blocks (mixer plus MLP), for reference.
    pub hco_block_exponent: f64,
    pub attention_block_exponent: f64,
    pub crossover_side: Option<usize>,
}

pub fn scaling_fit(sides: &[usize], channels: usize) -> Result<ScalingFit> {
    let n: Vec<f64> = sides.iter().map(|&s| (s * s) as f64).collect();
    let hco: Vec<FlopsReport> = sides
        .iter()
        .map(|&s| flops_hco_stage(s, channels, 1))
        .collect();
    let att: Vec<FlopsReport> = sides
        .iter()
        .map(|&s| flops_attention_stage(s, channels, 1))
        .collect();
    let col = |r: &[FlopsReport], mixer: bool| -> Vec<f64> {
        r.iter()
            .map(|x| if mixer { x.mixer() } else { x.total } as f64)
            .collect()
    };
    Ok(ScalingFit {
        sides: sides.to_vec(),
        channels,
        hco_exponent: fit_loglog(&n, &col(&hco, true))?,
        attention_exponent: fit_loglog(&n, &col(&att, true))?,
        hco_block_exponent: fit_loglog(&n, &col(&hco, false))?,
        attention_block_exponent: fit_loglog(&n, &col(&att, false))?,
        crossover_side: crossover_side(channels, 1),
    })
}

/// Smallest grid side from which the heat block is cheaper than attention
/// for every larger side up to 4096.
pub fn crossover_side(channels: usize, depth: usize) -> Option<usize> {
    let cheaper = |s: usize| {
        flops_hco_stage(s, channels, depth).total < flops_attention_stage(s, channels, depth).total
    };
    let max = 4096;
    if !cheaper(max) {
        return None;
    }
    let mut s = max;
    while s > 1 && cheaper(s - 1) {
        s -= 1;
    }
    Some(s)
}

/// CSV of the flop model over `sides`.
pub fn flops_csv(sides: &[usize], channels: usize, depth: usize) -> String {
    let mut out = format!(
        "# {FLOP_CONVENTION}\nside,tokens,hco_total,hco_mixer,attention_total,attention_mixer\n"
    );
    for &s in sides {
        let h = flops_hco_stage(s, channels, depth);
        let a = flops_attention_stage(s, channels, depth);
        out += &format!(
            "{s},{},{},{},{},{}\n",
            s * s,
            h.total,
            h.mixer(),
            a.total,
            a.mixer()
        );
    }
    out
}

/// Global-attention encoder with the same ladder as the heat encoder.
#[derive(Debug, Clone)]
pub struct AttentionEncoder {
    cfg: ModelConfig,
}

impl AttentionEncoder {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = Xoshiro256pp::seed_from(derive_seed(seed, &[0xA77]));
        let w = &self.cfg.stage_widths;
        let ps = self.cfg.patch_size;
        let mut p = Params::new();
        let lin = |p: &mut Params, name: String, co: usize, ci: usize, rng: &mut Xoshiro256pp| {
            p.insert(
                format!("{name}.weight"),
                Tensor::randn(&[co, ci], (1.0 / ci as f64).sqrt(), rng),
            );
            p.insert(format!("{name}.bias"), Tensor::zeros(&[co]));
        };
        p.insert(
            "embed.weight",
            Tensor::randn(
                &[w[0], 3, ps, ps],
                (1.0 / (3 * ps * ps) as f64).sqrt(),
                &mut rng,
            ),
        );
        p.insert("embed.bias", Tensor::zeros(&[w[0]]));
        for s in 0..4 {
            let c = w[s];
            for b in 0..self.cfg.stage_depths[s] {
                let pre = format!("stage{s}.block{b}");
                for name in ["q", "k", "v", "out"] {
                    lin(&mut p, format!("{pre}.{name}"), c, c, &mut rng);
                }
                lin(&mut p, format!("{pre}.fc1"), MLP_EXPANSION * c, c, &mut rng);
                lin(&mut p, format!("{pre}.fc2"), c, MLP_EXPANSION * c, &mut rng);
            }
            if s > 0 {
                p.insert(
                    format!("down{s}.weight"),
                    Tensor::randn(
                        &[c, w[s - 1], 2, 2],
                        (1.0 / (4 * w[s - 1]) as f64).sqrt(),
                        &mut rng,
                    ),
                );
                p.insert(format!("down{s}.bias"), Tensor::zeros(&[c]));
            }
        }
        p.to_dtype(self.cfg.dtype)
    }

    /// Optical image `[3, H, W]` to the last stage map.
    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let lin = |name: String| -> Result<Linear<'t>> {
            Ok(Linear {
                weight: p.get(&format!("{name}.weight"))?,
                bias: p.get(&format!("{name}.bias"))?,
            })
        };
        let mut z = x.conv2d(
            p.get("embed.weight")?,
            Some(p.get("embed.bias")?),
            self.cfg.patch_size,
            0,
        )?;
        for s in 0..4 {
            if s > 0 {
                z = z.conv2d(
                    p.get(&format!("down{s}.weight"))?,
                    Some(p.get(&format!("down{s}.bias"))?),
                    2,
                    0,
                )?;
            }
            for b in 0..self.cfg.stage_depths[s] {
                let pre = format!("stage{s}.block{b}");
                let shape = z.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let tokens = |v: Var<'t>| -> Result<Var<'t>> { v.reshape(&[c, h * w])?.t() };
                let q = tokens(lin(format!("{pre}.q"))?.apply(z)?)?;
                let k = tokens(lin(format!("{pre}.k"))?.apply(z)?)?;
                let v = tokens(lin(format!("{pre}.v"))?.apply(z)?)?;
                let a = q.attention(k, v)?.t()?.reshape(&[c, h, w])?;
                let u = z.add(lin(format!("{pre}.out"))?.apply(a)?)?;
                let mlp = lin(format!("{pre}.fc2"))?
                    .apply(lin(format!("{pre}.fc1"))?.apply(u)?.gelu()?)?;
                z = u.add(mlp)?;
            }
        }
        Ok(z)
    }
}

/// Heat encoder forward pass for an optical image (last stage map).
pub fn hco_encode<'t>(model: &Model, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    Ok(model.encode(p, x, Modality::Optical)?.stage4())
}

/// Rough peak activation bytes of one inference pass.
pub fn activation_bytes(cfg: &ModelConfig, image: usize, attention: bool) -> u64 {
    let mut total = 0u64;
    for s in 0..4 {
        let g = (image / (cfg.patch_size << s)) as u64;
        let per_block = 16 * cfg.stage_widths[s] as u64 * g * g * 8;
        total += cfg.stage_depths[s] as u64 * per_block;
        if attention {
            // One streamed score row per query.
            total += g * g * 8;
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanConfig {
    pub runs: usize,
    pub warmup: usize,
    pub memory_budget: u64,
    pub dtype: DType,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            warmup: 1,
            memory_budget: 2 << 30,
            dtype: DType::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub side: usize,
    pub model: &'static str,
    /// `None` when the size exceeds the memory budget.
    pub images_per_sec: Option<f64>,
    pub flops: u64,
}

pub const THROUGHPUT_HEADER: &str = "side,model,images_per_sec,flops";

impl ThroughputRow {
    pub fn csv(&self) -> String {
        match self.images_per_sec {
            Some(v) => format!("{},{},{v:.4},{}", self.side, self.model, self.flops),
            None => format!("{},{},unmeasurable,{}", self.side, self.model, self.flops),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median seconds of `runs` timed calls after `warmup` discarded ones.
pub fn time_median(runs: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Forward-pass throughput of the heat and attention encoders at each image
/// side, measured one after the other on the calling thread.
pub fn throughput_scan(
    sides: &[usize],
    base: &ModelConfig,
    scan: &ScanConfig,
    seed: u64,
) -> Result<Vec<ThroughputRow>> {
    let mut rows = Vec::new();
    for &side in sides {
        let cfg = ModelConfig {
            dtype: scan.dtype,
            ..base.clone().with_image(side)
        };
        cfg.validate()?;
        let mut rng = Xoshiro256pp::seed_from(derive_seed(seed, &[side as u64]));
        let img = Tensor::uniform(&[3, side, side], 0.0, 1.0, &mut rng).to_dtype(scan.dtype);
        for attention in [false, true] {
            let name = if attention { "attention" } else { "hco" };
            let flops = flops_encoder(&cfg, side, attention);
            if activation_bytes(&cfg, side, attention) > scan.memory_budget {
                rows.push(ThroughputRow {
                    side,
                    model: name,
                    images_per_sec: None,
                    flops,
                });
                continue;
            }
            let secs = if attention {
                let enc = AttentionEncoder::new(cfg.clone())?;
                let params = enc.init_params(seed);
                time_median(scan.runs, scan.warmup, || {
                    let tape = Tape::inference(scan.dtype);
                    let p = params.bind(&tape);
                    enc.encode(&p, tape.constant(img.clone())).map(|_| ())
                })?
            } else {
                let model = Model::new(cfg.clone())?;
                let params = model.init_params(seed);
                time_median(scan.runs, scan.warmup, || {
                    let tape = Tape::inference(scan.dtype);
                    let p = params.bind(&tape);
                    hco_encode(&model, &p, tape.constant(img.clone())).map(|_| ())
                })?
            };
            rows.push(ThroughputRow {
                side,
                model: name,
                images_per_sec: Some(1.0 / secs),
                flops,
            });
        }
    }
    Ok(rows)
}

/// Explicit Euler integration of `u_t = k·Δu` with the 5-point Laplacian
/// and mirror boundaries, on `[m, n]` or per channel of `[c, m, n]`.
///
/// Takes `ceil(t_total / dt)` equal steps of `t_total / steps ≤ dt`.
pub fn heat_fd_oracle(u0: &Tensor, k: f64, t_total: f64, dt: f64) -> Result<Tensor> {
    let s = u0.shape();
    let (c, m, n) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::shape("heat_fd_oracle", format!("{s:?}"))),
    };
    if !(k >= 0.0 && t_total >= 0.0 && dt > 0.0) {
        return Err(Error::Contract(format!(
            "need k >= 0, t >= 0, dt > 0; got {k}, {t_total}, {dt}"
        )));
    }
    if k * dt > 0.25 {
        return Err(Error::Contract(format!(
            "dt = {dt} is unstable for k = {k}; need dt <= {}",
            0.25 / k
        )));
    }
    let steps = (t_total / dt - 1e-9).ceil().max(0.0) as usize;
    let mut u = u0.data().to_vec();
    if steps == 0 || k == 0.0 {
        return Ok(u0.clone());
    }
    let h = t_total / steps as f64;
    let plane = m * n;
    let mut next = vec![0.0; u.len()];
    for _ in 0..steps {
        for ch in 0..c {
            let src = &u[ch * plane..(ch + 1) * plane];
            let dst = &mut next[ch * plane..(ch + 1) * plane];
            for i in 0..m {
                let up = if i == 0 { 0 } else { i - 1 };
                let down = if i + 1 == m { i } else { i + 1 };
                for j in 0..n {
                    let left = if j == 0 { 0 } else { j - 1 };
                    let right = if j + 1 == n { j } else { j + 1 };
                    let centre = src[i * n + j];
                    let lap = src[up * n + j]
                        + src[down * n + j]
                        + src[i * n + left]
                        + src[i * n + right]
                        - 4.0 * centre;
                    dst[i * n + j] = centre + k * h * lap;
                }
            }
        }
        std::mem::swap(&mut u, &mut next);
    }
    Tensor::with_dtype(s, u, u0.dtype())
}

/// Relative L2 distance of the spectral solution from the Euler oracle.
pub fn oracle_discrepancy(u0: &Tensor, k: f64, t: f64, dt: f64) -> Result<f64> {
    let s = u0.shape();
    let x = if s.len() == 2 {
        u0.reshape(&[1, s[0], s[1]])?
    } else {
        u0.clone()
    };
    let (m, n) = (x.shape()[1], x.shape()[2]);
    let plan = Arc::new(crate::spectral::SpectralPlan::new(
        m,
        n,
        crate::spectral::TransformPath::Matmul,
    )?);
    let spectral = crate::heat::hco_apply_tensor(&plan, &x, k, t)?;
    let fd = heat_fd_oracle(&x, k, t, dt)?;
    let diff: f64 = spectral.zip_map(&fd, |a, b| a - b)?.norm_l2();
    Ok(diff / fd.norm_l2())
}

/// Same as [`hco_block`] but for reference timing of a single block.
pub fn time_hco_block(channels: usize, side: usize, runs: usize, seed: u64) -> Result<f64> {
    let mut rng = Xoshiro256pp::seed_from(seed);
    let params = crate::heat::HcoParams::init(channels, side, side, &mut rng);
    let plan = Arc::new(crate::spectral::SpectralPlan::new(
        side,
        side,
        crate::spectral::TransformPath::Matmul,
    )?);
    let x = Tensor::randn(&[channels, side, side], 1.0, &mut rng);
    time_median(runs, 1, || {
        let tape = Tape::inference(DType::F64);
        let b = params.bind(&tape, crate::heat::Activation::Gelu);
        hco_block(&b, &plan, tape.constant(x.clone())).map(|_| ())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{flops_dct2, SpectralPlan, TransformPath};

    #[test]
    fn transform_flops_by_hand() {
        let r = flops_hco_stage(16, 1, 1);
        assert_eq!(r.component("dct") + r.component("idct"), 32768);
        let plan = SpectralPlan::new(16, 16, TransformPath::Matmul).unwrap();
        assert_eq!(r.component("dct"), flops_dct2(&plan, 1));
    }

    #[test]
    fn cubic_and_quartic_laws() {
        let (a, b) = (flops_hco_stage(16, 8, 2), flops_hco_stage(32, 8, 2));
        assert_eq!(b.component("dct"), 8 * a.component("dct"));
        let (a, b) = (
            flops_attention_stage(16, 8, 2),
            flops_attention_stage(32, 8, 2),
        );
        assert_eq!(b.component("scores"), 16 * a.component("scores"));
    }

    #[test]
    fn totals_are_sums() {
        let r = flops_attention_stage(7, 3, 2);
        assert_eq!(r.total, r.components.iter().map(|c| c.1).sum::<u64>());
        assert_eq!(r, flops_attention_stage(7, 3, 2));
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((fit_loglog(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
        assert!(fit_loglog(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn oracle_basics() {
        let mut rng = Xoshiro256pp::seed_from(3);
        let u = Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng);
        assert_eq!(heat_fd_oracle(&u, 0.0, 1.0, 0.1).unwrap(), u);
        assert!(heat_fd_oracle(&u, 1.0, 1.0, 0.3).is_err());
        let v = heat_fd_oracle(&u, 1.0, 1.0, 1e-2).unwrap();
        assert!((v.mean() - u.mean()).abs() < 1e-13);
    }

    #[test]
    fn attention_encoder_shapes() {
        let cfg = ModelConfig {
            dtype: DType::F64,
            ..ModelConfig::desk().with_image(32)
        };
        let enc = AttentionEncoder::new(cfg).unwrap();
        let params = enc.init_params(1);
        let tape = Tape::inference(DType::F64);
        let p = params.bind(&tape);
        let y = enc
            .encode(&p, tape.constant(Tensor::zeros(&[3, 32, 32])))
            .unwrap();
        assert_eq!(y.shape(), vec![128, 1, 1]);
    }
}
