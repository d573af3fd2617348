//! The heat conduction operator and the residual block built around it.
//!
//! `hco_apply` solves `∂u/∂t = k·Δu` with mirror boundaries in closed form:
//! transform with the DCT, damp each coefficient by `exp(-k(ω_x²+ω_y²)t)`,
//! transform back. The DC coefficient has `ω = 0`, so channel means are
//! untouched.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Xoshiro256pp;
use crate::spectral::SpectralPlan;
use crate::tensor::{DType, Tape, Tensor, Var};

/// Thermal diffusivity: one value everywhere, or a learned `[m, n, c]`
/// field indexed by frequency and channel.
#[derive(Debug, Clone, Copy)]
pub enum Diffusivity<'t> {
    Scalar(f64),
    Field(Var<'t>),
}

/// Heat diffusion of `u0: [c, m, n]` for time `t`.
pub fn hco_apply<'t>(
    plan: &Arc<SpectralPlan>,
    u0: Var<'t>,
    k: Diffusivity<'t>,
    t: f64,
) -> Result<Var<'t>> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Contract(format!(
            "diffusion time must be >= 0, got {t}"
        )));
    }
    let shape = u0.shape();
    let c = plan.check_shape(&shape)?;
    let tape = u0.tape();
    let freq = u0.dct2(plan)?;
    let omega_sq = plan.omega_sq();
    let damped = match k {
        Diffusivity::Scalar(k) => {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::Contract(format!(
                    "diffusivity must be >= 0, got {k}"
                )));
            }
            let decay = omega_sq.map(|w| (-k * w * t).exp());
            freq.mul(tape.constant(decay))?
        }
        Diffusivity::Field(field) => {
            let fs = field.shape();
            if fs != [plan.rows(), plan.cols(), c] {
                return Err(Error::shape(
                    "hco_apply",
                    format!("diffusivity field {fs:?} for signal {shape:?}"),
                ));
            }
            if field.value().data().iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(
                    "diffusivity field has negative entries".into(),
                ));
            }
            let k_cmn = field.permute(&[2, 0, 1])?;
            let decay = k_cmn.mul(tape.constant(omega_sq))?.scale(-t)?.exp()?;
            freq.mul(decay)?
        }
    };
    damped.idct2(plan)
}

/// Tape-free convenience wrapper around [`hco_apply`] with scalar `k`.
pub fn hco_apply_tensor(plan: &Arc<SpectralPlan>, u0: &Tensor, k: f64, t: f64) -> Result<Tensor> {
    let tape = Tape::inference(DType::F64);
    let x = tape.constant(u0.clone());
    let y = hco_apply(plan, x, Diffusivity::Scalar(k), t)?;
    let v = y.value();
    Ok(v.to_dtype(u0.dtype()))
}

/// Diffusivity from raw embedding weights: `softplus(raw) > 0`.
pub fn derive_k<'t>(fve_raw: Var<'t>) -> Result<Var<'t>> {
    fve_raw.softplus()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Identity => Ok(x),
        }
    }
}

/// Additive spatial correction followed by an activation.
/// `z: [c, m, n]`, `sce: [m, n, c]`.
pub fn correction_learn<'t>(z: Var<'t>, sce: Var<'t>, activation: Activation) -> Result<Var<'t>> {
    let (zs, ss) = (z.shape(), sce.shape());
    if zs.len() != 3 || ss != [zs[1], zs[2], zs[0]] {
        return Err(Error::shape(
            "correction_learn",
            format!("signal {zs:?} with correction field {ss:?}"),
        ));
    }
    activation.apply(z.add(sce.permute(&[2, 0, 1])?)?)
}

/// Pointwise linear layer applied at every spatial position of `[C, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> Linear<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape(
                "linear",
                format!("expected [C,H,W], got {s:?}"),
            ));
        }
        let flat = x.reshape(&[s[0], s[1] * s[2]])?;
        let y = self.weight.matmul(flat)?.channel_bias(self.bias)?;
        let c_out = y.shape()[0];
        y.reshape(&[c_out, s[1], s[2]])
    }
}

/// Learnable state of one heat-conduction block, as plain tensors.
#[derive(Debug, Clone)]
pub struct HcoParams {
    /// Raw frequency value embeddings `[m, n, c]`; `k = softplus(fve_raw)`.
    pub fve_raw: Tensor,
    /// Spatial correction embeddings `[m, n, c]`.
    pub sce: Tensor,
    pub t: f64,
    pub proj_in: (Tensor, Tensor),
    pub proj_out: (Tensor, Tensor),
    pub fc1: (Tensor, Tensor),
    pub fc2: (Tensor, Tensor),
}

/// Hidden width multiplier of the pointwise MLP.
pub const MLP_EXPANSION: usize = 4;

fn linear_init(c_out: usize, c_in: usize, rng: &mut Xoshiro256pp) -> (Tensor, Tensor) {
    let std = (1.0 / c_in as f64).sqrt();
    (
        Tensor::randn(&[c_out, c_in], std, rng),
        Tensor::zeros(&[c_out]),
    )
}

impl HcoParams {
    pub fn init(channels: usize, m: usize, n: usize, rng: &mut Xoshiro256pp) -> Self {
        let c = channels;
        Self {
            fve_raw: Tensor::randn(&[m, n, c], 0.02, rng),
            sce: Tensor::randn(&[m, n, c], 0.02, rng),
            t: 1.0,
            proj_in: linear_init(c, c, rng),
            proj_out: linear_init(c, c, rng),
            fc1: linear_init(MLP_EXPANSION * c, c, rng),
            fc2: linear_init(c, MLP_EXPANSION * c, rng),
        }
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, activation: Activation) -> HcoBlock<'t> {
        let lin = |p: &(Tensor, Tensor)| Linear {
            weight: tape.leaf(p.0.clone()),
            bias: tape.leaf(p.1.clone()),
        };
        HcoBlock {
            fve_raw: tape.leaf(self.fve_raw.clone()),
            sce: tape.leaf(self.sce.clone()),
            t: self.t,
            activation,
            proj_in: lin(&self.proj_in),
            proj_out: lin(&self.proj_out),
            fc1: lin(&self.fc1),
            fc2: lin(&self.fc2),
        }
    }
}

/// A heat-conduction block bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct HcoBlock<'t> {
    pub fve_raw: Var<'t>,
    pub sce: Var<'t>,
    pub t: f64,
    pub activation: Activation,
    pub proj_in: Linear<'t>,
    pub proj_out: Linear<'t>,
    pub fc1: Linear<'t>,
    pub fc2: Linear<'t>,
}

/// `z → correction → proj_in → heat → proj_out`, residual, then a residual
/// pointwise MLP: `u = z + mix(z)`, `out = u + fc2(gelu(fc1(u)))`.
pub fn hco_block<'t>(
    block: &HcoBlock<'t>,
    plan: &Arc<SpectralPlan>,
    z: Var<'t>,
) -> Result<Var<'t>> {
    let corrected = correction_learn(z, block.sce, block.activation)?;
    let h = block.proj_in.apply(corrected)?;
    let k = derive_k(block.fve_raw)?;
    let h = hco_apply(plan, h, Diffusivity::Field(k), block.t)?;
    let h = block.proj_out.apply(h)?;
    let u = z.add(h)?;
    let mlp = block.fc2.apply(block.fc1.apply(u)?.gelu()?)?;
    u.add(mlp)
}

/// Bilinear resize of an `[m, n, c]` field (half-pixel centres, edge
/// clamping), used when the token grid differs from the trained one.
pub fn resize_field(field: &Tensor, new_m: usize, new_n: usize) -> Result<Tensor> {
    let s = field.shape();
    if s.len() != 3 || new_m == 0 || new_n == 0 {
        return Err(Error::shape(
            "resize_field",
            format!("{s:?} → {new_m}x{new_n}"),
        ));
    }
    let (m, n, c) = (s[0], s[1], s[2]);
    let src = field.data();
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(new_m * new_n * c);
    for i in 0..new_m {
        let (y0, y1, fy) = coord(i, new_m, m);
        for j in 0..new_n {
            let (x0, x1, fx) = coord(j, new_n, n);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * n + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::with_dtype(&[new_m, new_n, c], out, field.dtype())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::TransformPath;

    fn plan(m: usize, n: usize) -> Arc<SpectralPlan> {
        Arc::new(SpectralPlan::new(m, n, TransformPath::Matmul).unwrap())
    }

    #[test]
    fn zero_diffusivity_is_identity() {
        let mut rng = Xoshiro256pp::seed_from(1);
        let x = Tensor::uniform(&[2, 8, 6], -1.0, 1.0, &mut rng);
        let y = hco_apply_tensor(&plan(8, 6), &x, 0.0, 3.0).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn long_time_converges_to_mean() {
        let mut rng = Xoshiro256pp::seed_from(2);
        let x = Tensor::uniform(&[1, 16, 16], -1.0, 1.0, &mut rng);
        let y = hco_apply_tensor(&plan(16, 16), &x, 1.0, 1e6).unwrap();
        let mean = x.mean();
        assert!(y.data().iter().all(|v| (v - mean).abs() < 1e-8));
    }

    #[test]
    fn negative_parameters_rejected() {
        let p = plan(4, 4);
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(
            hco_apply_tensor(&p, &x, -0.1, 1.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            hco_apply_tensor(&p, &x, 0.1, -1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softplus_diffusivity() {
        let tape = Tape::new(DType::F64);
        let raw = tape.leaf(Tensor::zeros(&[2, 2, 3]));
        let k = derive_k(raw).unwrap().value();
        assert!(k.data().iter().all(|v| (v - 2f64.ln()).abs() < 1e-15));

        let raw = tape.leaf(Tensor::new(&[4], vec![-40.0, -20.0, -5.0, 0.0]).unwrap());
        let k = derive_k(raw).unwrap().value();
        assert!(k.data().iter().all(|&v| v > 0.0));
        assert!(k.data().windows(2).all(|w| w[1] > w[0]));
        assert!(k.data()[0] < 1e-17);
    }

    #[test]
    fn correction_with_zero_field_and_identity() {
        let mut rng = Xoshiro256pp::seed_from(3);
        let z0 = Tensor::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let tape = Tape::new(DType::F64);
        let z = tape.leaf(z0.clone());
        let sce = tape.leaf(Tensor::zeros(&[4, 5, 3]));
        let out = correction_learn(z, sce, Activation::Identity).unwrap();
        assert_eq!(*out.value(), z0);

        let s0 = Tensor::uniform(&[4, 5, 3], -1.0, 1.0, &mut rng);
        let z = tape.leaf(Tensor::zeros(&[3, 4, 5]));
        let sce = tape.leaf(s0.clone());
        let out = correction_learn(z, sce, Activation::Gelu).unwrap().value();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let expect = crate::tensor::gelu(s0.data()[(i * 5 + j) * 3 + c]);
                    assert_eq!(out.data()[(c * 4 + i) * 5 + j], expect);
                }
            }
        }
        let bad = tape.leaf(Tensor::zeros(&[5, 4, 3]));
        assert!(correction_learn(z, bad, Activation::Gelu).is_err());
    }

    #[test]
    fn correction_gradient_reaches_both_inputs() {
        let mut rng = Xoshiro256pp::seed_from(4);
        let tape = Tape::new(DType::F64);
        let z = tape.leaf(Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng));
        let sce = tape.leaf(Tensor::uniform(&[3, 3, 2], -1.0, 1.0, &mut rng));
        let y = correction_learn(z, sce, Activation::Gelu).unwrap();
        let loss = y.mul(y).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(z).max_abs() > 0.0);
        assert!(g.get(sce).max_abs() > 0.0);
    }

    #[test]
    fn block_composition_audit() {
        // Identity projections, zero MLP, zero correction, identity
        // activation: the block reduces to z + heat(z).
        let (c, m, n) = (2, 6, 6);
        let mut rng = Xoshiro256pp::seed_from(5);
        let mut p = HcoParams::init(c, m, n, &mut rng);
        p.sce = Tensor::zeros(&[m, n, c]);
        p.fve_raw = Tensor::full(&[m, n, c], 0.3);
        p.proj_in = (Tensor::eye(c), Tensor::zeros(&[c]));
        p.proj_out = (Tensor::eye(c), Tensor::zeros(&[c]));
        p.fc1 = (Tensor::zeros(&[4 * c, c]), Tensor::zeros(&[4 * c]));
        p.fc2 = (Tensor::zeros(&[c, 4 * c]), Tensor::zeros(&[c]));
        let z0 = Tensor::uniform(&[c, m, n], -1.0, 1.0, &mut rng);
        let pl = plan(m, n);
        let tape = Tape::new(DType::F64);
        let block = p.bind(&tape, Activation::Identity);
        let out = hco_block(&block, &pl, tape.leaf(z0.clone()))
            .unwrap()
            .value();
        let k = (1.0f64 + 0.3f64.exp()).ln();
        let heat = hco_apply_tensor(&pl, &z0, k, 1.0).unwrap();
        let expect = z0.zip_map(&heat, |a, b| a + b).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn block_preserves_shape() {
        for s in [8, 16, 56] {
            let mut rng = Xoshiro256pp::seed_from(s as u64);
            let p = HcoParams::init(4, s, s, &mut rng);
            let tape = Tape::new(DType::F64);
            let block = p.bind(&tape, Activation::Gelu);
            let z = tape.leaf(Tensor::uniform(&[4, s, s], -1.0, 1.0, &mut rng));
            let out = hco_block(&block, &plan(s, s), z).unwrap();
            assert_eq!(out.shape(), vec![4, s, s]);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = Xoshiro256pp::seed_from(6);
        let f = Tensor::uniform(&[5, 7, 2], -1.0, 1.0, &mut rng);
        assert!(resize_field(&f, 5, 7).unwrap().max_abs_diff(&f) < 1e-15);
        let c = Tensor::full(&[4, 4, 3], 0.25);
        let r = resize_field(&c, 9, 6).unwrap();
        assert_eq!(r.shape(), &[9, 6, 3]);
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }
}
