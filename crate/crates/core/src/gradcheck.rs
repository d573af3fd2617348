//! Central-difference verification of tape gradients.
//!
//! A case is a function from input tensors to a tape value. Non-scalar
//! outputs are reduced with a fixed random weighting so that every output
//! element contributes. For each checked entry the loss is re-evaluated at
//! `x ± h`; samples whose perturbed evaluations take a different branch of a
//! ReLU or absolute value than the base point are rejected and redrawn,
//! since the derivative is not defined across a kink.
//!
//! Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::heat::{
    correction_learn, derive_k, hco_apply, hco_block, Activation, Diffusivity, HcoParams, Linear,
};
use crate::masking::mask_batch;
use crate::model::{Model, ModelConfig, TrainItem};
use crate::rng::{derive_seed, Xoshiro256pp};
use crate::spectral::{SpectralPlan, TransformPath};
use crate::tensor::{DType, Tape, Tensor, Var};
use crate::train::synth_pair;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Step for individual operations.
pub const OP_STEP: f64 = 1e-3;
/// Step for the full model, small enough that few samples straddle a kink.
pub const MODEL_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Block,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown gradcheck scope `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries checked per input tensor (all of them if the tensor is smaller).
    pub samples: usize,
    /// Redraws allowed per sample when it lands on a kink.
    pub max_redraws: usize,
    pub seed: u64,
    /// Scales the analytic gradient of the named case (self-test hook).
    pub fault: Option<String>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: OP_STEP,
            tolerance: TOLERANCE,
            samples: 12,
            max_redraws: 20,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub checked: usize,
    /// Samples discarded because they straddled a kink.
    pub rejected: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub cases: Vec<CaseReport>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.worst_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>12} {:>8} {:>9}  status",
            "case", "worst_rel", "checked", "rejected"
        )?;
        for c in &self.cases {
            writeln!(
                f,
                "{:<28} {:>12.3e} {:>8} {:>9}  {}",
                c.name,
                c.worst_rel_err,
                c.checked,
                c.rejected,
                if c.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{} cases, worst {:.3e}, {}",
            self.cases.len(),
            self.worst(),
            if self.passed() {
                "all passed"
            } else {
                "FAILED"
            }
        )
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

type CaseFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn reduce<'t>(tape: &'t Tape, y: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    if y.value().numel() == 1 {
        return y.reshape(&[]);
    }
    y.mul(tape.constant(weights.reshape(&y.shape())?))?.sum()
}

fn evaluate(
    f: &CaseFn,
    inputs: &[Tensor],
    weights: &Tensor,
) -> Result<(f64, crate::tensor::KinkSignature)> {
    let tape = Tape::inference(DType::F64).with_kink_tracking();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&tape, &vars)?;
    let loss = reduce(&tape, y, weights)?;
    Ok((loss.value().item(), tape.kink_signature()))
}

/// Checks one case. `inputs` are all differentiated.
pub fn check_case(
    name: &str,
    inputs: &[Tensor],
    f: &CaseFn,
    cfg: &CheckConfig,
) -> Result<CaseReport> {
    let mut rng = Xoshiro256pp::seed_from(derive_seed(
        cfg.seed,
        &[name.len() as u64, name.bytes().map(u64::from).sum()],
    ));
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.to_dtype(DType::F64)).collect();

    let tape = Tape::new(DType::F64).with_kink_tracking();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&tape, &vars)?;
    let weights = Tensor::uniform(&y.shape(), -1.0, 1.0, &mut rng);
    let loss = reduce(&tape, y, &weights)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
    if cfg.fault.as_deref() == Some(name) {
        analytic = analytic.iter().map(|g| g.map(|v| 1.5 * v + 1e-3)).collect();
    }

    let mut worst = 0.0f64;
    let (mut checked, mut rejected) = (0, 0);
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let picks: Vec<usize> = if n <= cfg.samples {
            (0..n).collect()
        } else {
            (0..cfg.samples).map(|_| rng.int_in(0, n - 1)).collect()
        };
        for mut idx in picks {
            let mut redraws = 0;
            loop {
                let mut probe = inputs.clone();
                let orig = x.data()[idx];
                probe[i].data_mut()[idx] = orig + cfg.step;
                let (fp, sp) = evaluate(f, &probe, &weights)?;
                probe[i].data_mut()[idx] = orig - cfg.step;
                let (fm, sm) = evaluate(f, &probe, &weights)?;
                if sp != base_sig || sm != base_sig {
                    rejected += 1;
                    redraws += 1;
                    if redraws > cfg.max_redraws {
                        break;
                    }
                    idx = rng.int_in(0, n - 1);
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * cfg.step);
                worst = worst.max(rel_err(analytic[i].data()[idx], numeric));
                checked += 1;
                break;
            }
        }
    }
    Ok(CaseReport {
        name: name.to_string(),
        worst_rel_err: worst,
        checked,
        rejected,
        passed: checked > 0 && worst < cfg.tolerance,
    })
}

fn u(shape: &[usize], rng: &mut Xoshiro256pp) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Every differentiable tape operation plus the heat-operator building blocks.
pub fn check_ops(cfg: &CheckConfig) -> Result<Report> {
    let mut rng = Xoshiro256pp::seed_from(derive_seed(cfg.seed, &[1]));
    let p44 = Arc::new(SpectralPlan::new(4, 4, TransformPath::Matmul)?);
    let p46 = Arc::new(SpectralPlan::new(4, 6, TransformPath::Matmul)?);
    let pfft = Arc::new(SpectralPlan::new(8, 4, TransformPath::Fft)?);
    let mut cases: Vec<(&str, Vec<Tensor>, Box<CaseFn>)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($shape:expr),*], $f:expr) => {
            cases.push(($name, vec![$(u(&$shape, &mut rng)),*], Box::new($f)));
        };
    }
    case!("add", [[2, 3], [2, 3]], |_, v| v[0].add(v[1]));
    case!("add_trailing", [[2, 3, 4], [3, 4]], |_, v| v[0].add(v[1]));
    case!("sub_scalar", [[3, 2], [1]], |_, v| v[0].sub(v[1]));
    case!("mul", [[2, 3], [2, 3]], |_, v| v[0].mul(v[1]));
    case!("mul_trailing", [[2, 5], [5]], |_, v| v[0].mul(v[1]));
    case!("exp", [[2, 3]], |_, v| v[0].exp());
    case!("relu", [[3, 4]], |_, v| v[0].relu());
    case!("gelu", [[3, 4]], |_, v| v[0].gelu());
    case!("softplus", [[3, 4]], |_, v| v[0].softplus());
    case!("abs", [[3, 4]], |_, v| v[0].abs());
    case!("scale", [[2, 2]], |_, v| v[0].scale(-1.7));
    case!("add_scalar", [[2, 2]], |_, v| v[0].add_scalar(0.3));
    case!("sum", [[2, 3]], |_, v| v[0].sum());
    case!("mean", [[2, 3]], |_, v| v[0].mean());
    case!("matmul", [[3, 4], [4, 2]], |_, v| v[0].matmul(v[1]));
    case!("conv2d_same", [[2, 5, 5], [3, 2, 3, 3], [3]], |_, v| v[0]
        .conv2d(v[1], Some(v[2]), 1, 1));
    case!("conv2d_strided", [[2, 6, 6], [3, 2, 2, 2], [3]], |_, v| v
        [0]
    .conv2d(v[1], Some(v[2]), 2, 0));
    case!("conv2d_pointwise", [[3, 4, 4], [2, 3, 1, 1]], |_, v| v[0]
        .conv2d(v[1], None, 1, 0));
    case!("pixel_shuffle", [[8, 2, 3]], |_, v| v[0].pixel_shuffle(2));
    case!("upsample2x", [[2, 2, 3]], |_, v| v[0].upsample2x());
    case!("reshape", [[2, 6]], |_, v| v[0].reshape(&[3, 4]));
    case!("permute", [[2, 3, 4]], |_, v| v[0].permute(&[2, 0, 1]));
    case!("concat", [[2, 3], [1, 3]], |_, v| Var::concat(&[
        v[0], v[1]
    ]));
    case!("channel_bias", [[3, 2, 2], [3]], |_, v| v[0]
        .channel_bias(v[1]));
    case!("channel_mean", [[3, 2, 2]], |_, v| v[0].channel_mean());
    case!("cosine", [[6], [6]], |_, v| v[0].cosine(v[1]));
    case!("attention", [[5, 3], [4, 3], [4, 2]], |_, v| v[0]
        .attention(v[1], v[2]));
    {
        let p = Arc::clone(&p46);
        case!("dct2", [[2, 4, 6]], move |_, v| v[0].dct2(&p));
    }
    {
        let p = Arc::clone(&p46);
        case!("idct2", [[2, 4, 6]], move |_, v| v[0].idct2(&p));
    }
    {
        let p = Arc::clone(&pfft);
        case!("dct2_fft", [[1, 8, 4]], move |_, v| v[0].dct2(&p));
    }
    {
        let p = Arc::clone(&pfft);
        case!("idct2_fft", [[1, 8, 4]], move |_, v| v[0].idct2(&p));
    }
    {
        let p = Arc::clone(&p44);
        case!("hco_apply_scalar", [[2, 4, 4]], move |_, v| hco_apply(
            &p,
            v[0],
            Diffusivity::Scalar(0.7),
            0.5
        ));
    }
    {
        let p = Arc::clone(&p44);
        case!("hco_apply_field", [[2, 4, 4], [4, 4, 2]], move |_, v| {
            let k = derive_k(v[1])?;
            hco_apply(&p, v[0], Diffusivity::Field(k), 0.8)
        });
    }
    case!("derive_k", [[3, 3, 2]], |_, v| derive_k(v[0]));
    case!("correction_learn", [[2, 3, 3], [3, 3, 2]], |_, v| {
        correction_learn(v[0], v[1], Activation::Gelu)
    });
    case!("linear", [[2, 3, 3], [4, 2], [4]], |_, v| Linear {
        weight: v[1],
        bias: v[2]
    }
    .apply(v[0]));

    let mut report = Report { cases: Vec::new() };
    for (name, inputs, f) in &cases {
        report
            .cases
            .push(check_case(name, inputs, f.as_ref(), cfg)?);
    }
    Ok(report)
}

/// A full heat-conduction block on a random `[2, 4, 4]` input.
pub fn check_block(cfg: &CheckConfig) -> Result<Report> {
    let mut rng = Xoshiro256pp::seed_from(derive_seed(cfg.seed, &[2]));
    let params = HcoParams::init(2, 4, 4, &mut rng);
    let plan = Arc::new(SpectralPlan::new(4, 4, TransformPath::Matmul)?);
    let mut inputs = vec![
        u(&[2, 4, 4], &mut rng),
        params.fve_raw.clone(),
        params.sce.clone(),
    ];
    for (w, b) in [&params.proj_in, &params.proj_out, &params.fc1, &params.fc2] {
        inputs.push(w.clone());
        inputs.push(Tensor::randn(b.shape(), 0.1, &mut rng));
    }
    let t = params.t;
    let f: Box<CaseFn> = Box::new(move |_, v| {
        let lin = |i: usize| Linear {
            weight: v[i],
            bias: v[i + 1],
        };
        let block = crate::heat::HcoBlock {
            fve_raw: v[1],
            sce: v[2],
            t,
            activation: Activation::Gelu,
            proj_in: lin(3),
            proj_out: lin(5),
            fc1: lin(7),
            fc2: lin(9),
        };
        hco_block(&block, &plan, v[0])
    });
    Ok(Report {
        cases: vec![check_case("hco_block", &inputs, f.as_ref(), cfg)?],
    })
}

/// A synthetic training item for `cfg`, masked with `seed`.
pub fn sample_item(cfg: &ModelConfig, seed: u64) -> Result<TrainItem> {
    let (h, w) = cfg.image_size;
    if h != w {
        return Err(Error::Config("synthetic pairs are square".into()));
    }
    let (optical, sar) = synth_pair(seed, h);
    let plan = SpectralPlan::new(h, w, cfg.transform)?;
    let components = mask_batch(&plan, &[(optical.clone(), sar.clone())], seed)?.remove(0);
    Ok(TrainItem {
        optical,
        sar,
        components,
    })
}

/// Loss gradient of the full model against central differences on
/// `samples` randomly chosen scalar parameters.
pub fn check_model(model_cfg: &ModelConfig, samples: usize, cfg: &CheckConfig) -> Result<Report> {
    let mcfg = ModelConfig {
        dtype: DType::F64,
        ..model_cfg.clone()
    };
    let model = Model::new(mcfg.clone())?;
    let params = model.init_params(cfg.seed);
    let item = sample_item(&mcfg, derive_seed(cfg.seed, &[3]))?;
    let mut rng = Xoshiro256pp::seed_from(derive_seed(cfg.seed, &[4]));

    let tape = Tape::new(DType::F64).with_kink_tracking();
    let bound = params.bind(&tape);
    let loss = model.loss(&bound, &item)?.total;
    let base_sig = tape.kink_signature();
    let grads = bound.gradients(&tape.backward(loss)?);

    let eval = |p: &crate::model::Params| -> Result<(f64, crate::tensor::KinkSignature)> {
        let tape = Tape::inference(DType::F64).with_kink_tracking();
        let b = p.bind(&tape);
        let l = model.loss(&b, &item)?.total.value().item();
        Ok((l, tape.kink_signature()))
    };

    let names: Vec<String> = params.names().cloned().collect();
    let mut worst = 0.0f64;
    let (mut checked, mut rejected) = (0, 0);
    let mut attempts = 0;
    while checked < samples && attempts < samples * (cfg.max_redraws + 1) {
        attempts += 1;
        let name = &names[rng.int_in(0, names.len() - 1)];
        let n = params.get(name).expect("listed").numel();
        let idx = rng.int_in(0, n - 1);
        let mut probe = params.clone();
        let orig = params.get(name).expect("listed").data()[idx];
        probe.get_mut(name).expect("listed").data_mut()[idx] = orig + cfg.step;
        let (fp, sp) = eval(&probe)?;
        probe.get_mut(name).expect("listed").data_mut()[idx] = orig - cfg.step;
        let (fm, sm) = eval(&probe)?;
        if sp != base_sig || sm != base_sig {
            rejected += 1;
            continue;
        }
        let mut a = grads[name].data()[idx];
        if cfg.fault.as_deref() == Some("model") {
            a = 1.5 * a + 1e-3;
        }
        worst = worst.max(rel_err(a, (fp - fm) / (2.0 * cfg.step)));
        checked += 1;
    }
    Ok(Report {
        cases: vec![CaseReport {
            name: "model".into(),
            worst_rel_err: worst,
            checked,
            rejected,
            passed: checked == samples && worst < cfg.tolerance,
        }],
    })
}

/// Runs the suite for `scope` with the standard steps.
pub fn run_scope(scope: Scope, seed: u64, fault: Option<String>) -> Result<Report> {
    let base = CheckConfig {
        seed,
        fault,
        ..CheckConfig::default()
    };
    match scope {
        Scope::Ops => check_ops(&base),
        Scope::Block => check_block(&base),
        Scope::Model => check_model(
            &ModelConfig::desk(),
            10,
            &CheckConfig {
                step: MODEL_STEP,
                ..base
            },
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_is_detected_and_named() {
        let cfg = CheckConfig {
            fault: Some("mul".into()),
            ..Default::default()
        };
        let mut rng = Xoshiro256pp::seed_from(0);
        let inputs = [u(&[2, 2], &mut rng), u(&[2, 2], &mut rng)];
        let r = check_case("mul", &inputs, &|_, v| v[0].mul(v[1]), &cfg).unwrap();
        assert!(!r.passed);
        let ok = check_case(
            "mul",
            &inputs,
            &|_, v| v[0].mul(v[1]),
            &CheckConfig::default(),
        )
        .unwrap();
        assert!(ok.passed, "{ok:?}");
    }

    #[test]
    fn kinks_are_rejected() {
        let x = Tensor::new(&[3], vec![0.0004, -0.5, 0.7]).unwrap();
        let cfg = CheckConfig {
            max_redraws: 0,
            ..Default::default()
        };
        let r = check_case("abs", &[x], &|_, v| v[0].abs(), &cfg).unwrap();
        assert!(r.rejected >= 1);
        assert!(r.passed);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
