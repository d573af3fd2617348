//! AdamW with decoupled weight decay.
//!
//! Decay applies to tensors named `*.weight` only; biases and the stage
//! fields are never decayed. Moments are kept in f64; parameters are
//! rounded back to their own dtype after every update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// First and second moments, keyed like the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Params,
    pub v: Params,
}

impl Moments {
    pub fn zeros_like(params: &Params) -> Self {
        let mut m = Params::new();
        let mut v = Params::new();
        for (k, t) in params.iter() {
            m.insert(k.clone(), Tensor::zeros(t.shape()));
            v.insert(k.clone(), Tensor::zeros(t.shape()));
        }
        Self { m, v }
    }
}

/// One AdamW update with step number `t` (1-based). Every gradient is
/// checked before anything is modified.
pub fn adamw_step(
    params: &mut Params,
    moments: &mut Moments,
    grads: &BTreeMap<String, Tensor>,
    t: usize,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("AdamW step numbers start at 1".into()));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("`{name}`: {:?} vs {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = moments.m.get_mut(name).expect("moment for every parameter");
        let v = moments.v.get_mut(name).expect("moment for every parameter");
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        let dtype = p.dtype();
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            let mut x = pd[i] * (1.0 - lr * wd);
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            x -= lr * mhat / (vhat.sqrt() + cfg.eps);
            pd[i] = x;
        }
        dtype.round_slice(pd);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, value: f64) -> Params {
        let mut p = Params::new();
        p.insert(name, Tensor::scalar(value));
        p
    }

    fn grad(name: &str, g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = single("w.bias", 1.5);
        let mut m = Moments::zeros_like(&p);
        adamw_step(
            &mut p,
            &mut m,
            &grad("w.bias", 0.0),
            1,
            0.1,
            &AdamWConfig::default(),
        )
        .unwrap();
        assert_eq!(p.get("w.bias").unwrap().item(), 1.5);
    }

    #[test]
    fn first_steps_match_hand_trace() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (lr, g) = (0.01, 0.3);
        let mut p = single("x.weight", 2.0);
        let mut m = Moments::zeros_like(&p);
        adamw_step(&mut p, &mut m, &grad("x.weight", g), 1, lr, &cfg).unwrap();
        // Bias correction makes the first step lr·g/(|g| + eps).
        let want1 = 2.0 - lr * g / (g.abs() + 1e-8);
        assert!((p.get("x.weight").unwrap().item() - want1).abs() < 1e-15);
        adamw_step(&mut p, &mut m, &grad("x.weight", g), 2, lr, &cfg).unwrap();
        let m2 = 0.9 * 0.1 * g + 0.1 * g;
        let v2 = 0.999 * 0.001 * g * g + 0.001 * g * g;
        let want2 =
            want1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p.get("x.weight").unwrap().item() - want2).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks() {
        let mut p = Params::new();
        p.insert("a.weight", Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let before = p.get("a.weight").unwrap().norm_l2();
        let mut m = Moments::zeros_like(&p);
        let g = BTreeMap::from([("a.weight".to_string(), Tensor::zeros(&[3]))]);
        adamw_step(&mut p, &mut m, &g, 1, 0.1, &AdamWConfig::default()).unwrap();
        assert!(p.get("a.weight").unwrap().norm_l2() < before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single("bad.weight", 1.0);
        let mut m = Moments::zeros_like(&p);
        let err = adamw_step(
            &mut p,
            &mut m,
            &grad("bad.weight", f64::NAN),
            1,
            0.1,
            &AdamWConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad.weight"));
        assert_eq!(p.get("bad.weight").unwrap().item(), 1.0);
    }
}
