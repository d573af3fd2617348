//! Self-supervised pretraining on synthetic optical/SAR pairs.
//!
//! Each step draws a fresh batch from `derive_seed(seed, [step])`, so a run
//! is fully described by its config, seed and step counter. Resuming from a
//! checkpoint therefore needs no generator state.

mod checkpoint;
mod optim;
mod schedule;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{adamw_step, decays, AdamWConfig, Moments};
pub use schedule::{lr_at, ScheduleConfig};
pub use synth::{box_blur, iou, structure_masks, synth_pair, synth_scene, Scene, SPECKLE_LOOKS};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::heat::Activation;
use crate::masking::mask_batch;
use crate::model::{LossBreakdown, LossToggles, Model, ModelConfig, Params, TrainItem};
use crate::rng::derive_seed;
use crate::spectral::TransformPath;
use crate::tensor::{DType, Tape, Tensor};

/// Header of the metrics CSV.
pub const METRICS_HEADER: &str = "step,lr,l_total,l_con,l_spa,l_fre";

/// Everything that defines a pretraining run besides seed and length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    /// Save a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            schedule: ScheduleConfig::default(),
            optim: AdamWConfig::default(),
            batch_size: 8,
            checkpoint_every: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "stage_depths",
    "stage_widths",
    "loss_terms",
    "transform",
    "activation",
    "diffusion_time",
    "dtype",
    "base_lr",
    "warmup_start_lr",
    "warmup_epochs",
    "min_lr",
    "total_epochs",
    "steps_per_epoch",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "batch_size",
    "checkpoint_every",
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.model.toggles.is_empty() {
            return Err(Error::Config("loss_terms enables nothing".into()));
        }
        Ok(())
    }

    /// Applies the keys present in `kv` over the defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(KEYS)?;
        let mut c = Self::default();
        let m = &mut c.model;
        if let Some(s) = kv.get_str("image_size") {
            m.image_size = match s.split_once('x') {
                Some((h, w)) => (
                    h.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad image_size `{s}`")))?,
                    w.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad image_size `{s}`")))?,
                ),
                None => {
                    let v = s
                        .parse()
                        .map_err(|_| Error::Config(format!("bad image_size `{s}`")))?;
                    (v, v)
                }
            };
        }
        if let Some(v) = kv.get("patch_size")? {
            m.patch_size = v;
        }
        if let Some(v) = kv.get_list("stage_depths")? {
            m.stage_depths = v;
        }
        if let Some(v) = kv.get_list("stage_widths")? {
            m.stage_widths = v;
        }
        if let Some(s) = kv.get_str("loss_terms") {
            m.toggles = LossToggles::parse(s)?;
        }
        if let Some(s) = kv.get_str("transform") {
            m.transform = match s {
                "matmul" => TransformPath::Matmul,
                "fft" => TransformPath::Fft,
                _ => return Err(Error::Config(format!("unknown transform `{s}`"))),
            };
        }
        if let Some(s) = kv.get_str("activation") {
            m.activation = match s {
                "gelu" => Activation::Gelu,
                "identity" => Activation::Identity,
                _ => return Err(Error::Config(format!("unknown activation `{s}`"))),
            };
        }
        if let Some(v) = kv.get("diffusion_time")? {
            m.diffusion_time = v;
        }
        if let Some(v) = kv.get::<DType>("dtype")? {
            m.dtype = v;
        }
        let s = &mut c.schedule;
        for (key, slot) in [
            ("base_lr", &mut s.base_lr),
            ("warmup_start_lr", &mut s.warmup_start_lr),
            ("warmup_epochs", &mut s.warmup_epochs),
            ("min_lr", &mut s.min_lr),
            ("total_epochs", &mut s.total_epochs),
        ] {
            if let Some(v) = kv.get(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.get("steps_per_epoch")? {
            s.steps_per_epoch = v;
        }
        let o = &mut c.optim;
        for (key, slot) in [
            ("beta1", &mut o.beta1),
            ("beta2", &mut o.beta2),
            ("eps", &mut o.eps),
            ("weight_decay", &mut o.weight_decay),
        ] {
            if let Some(v) = kv.get(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.get("batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = kv.get("checkpoint_every")? {
            c.checkpoint_every = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// Every key with its value; floats use Rust's shortest round-trip form.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let m = &self.model;
        kv.set(
            "image_size",
            format!("{}x{}", m.image_size.0, m.image_size.1),
        );
        kv.set("patch_size", m.patch_size);
        kv.set("stage_depths", join(&m.stage_depths));
        kv.set("stage_widths", join(&m.stage_widths));
        kv.set("loss_terms", m.toggles);
        kv.set(
            "transform",
            match m.transform {
                TransformPath::Matmul => "matmul",
                TransformPath::Fft => "fft",
            },
        );
        kv.set(
            "activation",
            match m.activation {
                Activation::Gelu => "gelu",
                Activation::Identity => "identity",
            },
        );
        kv.set("diffusion_time", m.diffusion_time);
        kv.set("dtype", m.dtype);
        let s = &self.schedule;
        kv.set("base_lr", s.base_lr);
        kv.set("warmup_start_lr", s.warmup_start_lr);
        kv.set("warmup_epochs", s.warmup_epochs);
        kv.set("min_lr", s.min_lr);
        kv.set("total_epochs", s.total_epochs);
        kv.set("steps_per_epoch", s.steps_per_epoch);
        let o = &self.optim;
        kv.set("beta1", o.beta1);
        kv.set("beta2", o.beta2);
        kv.set("eps", o.eps);
        kv.set("weight_decay", o.weight_decay);
        kv.set("batch_size", self.batch_size);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv
    }
}

/// One logged optimizer step. `loss` is the batch mean before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl HistoryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{},{},{},{}",
            self.step, self.lr, self.loss.total, self.loss.con, self.loss.spa, self.loss.fre
        )
    }
}

/// Mutable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub moments: Moments,
    /// Completed optimizer steps.
    pub step: usize,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn epoch(&self, schedule: &ScheduleConfig) -> usize {
        self.step / schedule.steps_per_epoch
    }
}

/// A pretraining run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    seed: u64,
    model: Model,
    state: TrainState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let params = model.init_params(seed);
        let moments = Moments::zeros_like(&params);
        Ok(Self {
            cfg,
            seed,
            model,
            state: TrainState {
                params,
                moments,
                step: 0,
                history: Vec::new(),
            },
        })
    }

    /// Rebuilds a run from its parts (as restored from a checkpoint).
    pub fn from_state(cfg: TrainConfig, seed: u64, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let fresh = model.init_params(0);
        for (name, t) in fresh.iter() {
            let p = state
                .params
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            let mm = state.moments.m.get(name);
            let mv = state.moments.v.get(name);
            if p.shape() != t.shape()
                || mm.map(Tensor::shape) != Some(t.shape())
                || mv.map(Tensor::shape) != Some(t.shape())
            {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` has the wrong shape"
                )));
            }
        }
        if state.params.len() != fresh.len() {
            return Err(Error::Format("checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            cfg,
            seed,
            model,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// The batch consumed by step `step`.
    pub fn batch(&self, step: usize) -> Result<Vec<TrainItem>> {
        let bseed = derive_seed(self.seed, &[0xBA7C, step as u64]);
        let (h, w) = self.cfg.model.image_size;
        if h != w {
            return Err(Error::Config("synthetic pairs are square".into()));
        }
        let dtype = self.cfg.model.dtype;
        let pairs: Vec<(Tensor, Tensor)> = (0..self.cfg.batch_size)
            .map(|i| {
                let (o, s) = synth_pair(derive_seed(bseed, &[i as u64]), h);
                (o.to_dtype(dtype), s.to_dtype(dtype))
            })
            .collect();
        let comps = mask_batch(self.model.image_plan(), &pairs, bseed)?;
        Ok(pairs
            .into_iter()
            .zip(comps)
            .map(|((optical, sar), mut components)| {
                for c in [&mut components.optical, &mut components.sar] {
                    c.low = c.low.to_dtype(dtype);
                    c.high = c.high.to_dtype(dtype);
                }
                TrainItem {
                    optical,
                    sar,
                    components,
                }
            })
            .collect())
    }

    /// Mean loss and mean gradient over `batch` at the current parameters.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainItem],
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
        let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut acc = LossBreakdown {
            total: 0.0,
            con: 0.0,
            spa: 0.0,
            fre: 0.0,
        };
        for item in batch {
            let tape = Tape::new(self.cfg.model.dtype);
            let p = self.state.params.bind(&tape);
            let terms = self.model.loss(&p, item)?;
            let b = terms.breakdown();
            acc.total += b.total;
            acc.con += b.con;
            acc.spa += b.spa;
            acc.fre += b.fre;
            let grads = tape.backward(terms.total)?;
            for (name, g) in p.gradients(&grads) {
                let slot = sum.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
                slot.iter_mut().zip(g.data()).for_each(|(s, v)| *s += v);
            }
        }
        let n = batch.len() as f64;
        let mean = LossBreakdown {
            total: acc.total / n,
            con: acc.con / n,
            spa: acc.spa / n,
            fre: acc.fre / n,
        };
        let grads = sum
            .into_iter()
            .map(|(name, v)| {
                let shape = self
                    .state
                    .params
                    .get(&name)
                    .expect("bound from params")
                    .shape()
                    .to_vec();
                let t = Tensor::new(&shape, v.into_iter().map(|x| x / n).collect())
                    .expect("gradient shape");
                (name, t)
            })
            .collect();
        Ok((mean, grads))
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<HistoryRow> {
        let step = self.state.step;
        let lr = lr_at(&self.cfg.schedule, self.cfg.schedule.epoch_of(step))?;
        let batch = self.batch(step)?;
        let (loss, grads) = match self.loss_and_grads(&batch) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    value: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                value: loss.total,
            });
        }
        adamw_step(
            &mut self.state.params,
            &mut self.state.moments,
            &grads,
            step + 1,
            lr,
            &self.cfg.optim,
        )?;
        let row = HistoryRow { step, lr, loss };
        self.state.history.push(row);
        self.state.step += 1;
        Ok(row)
    }

    /// Loss of the current parameters on an arbitrary batch, without update.
    pub fn evaluate(&self, batch: &[TrainItem]) -> Result<LossBreakdown> {
        let mut acc = LossBreakdown {
            total: 0.0,
            con: 0.0,
            spa: 0.0,
            fre: 0.0,
        };
        for item in batch {
            let tape = Tape::inference(self.cfg.model.dtype);
            let p = self.state.params.bind(&tape);
            let b = self.model.loss(&p, item)?.breakdown();
            acc.total += b.total;
            acc.con += b.con;
            acc.spa += b.spa;
            acc.fre += b.fre;
        }
        let n = batch.len() as f64;
        Ok(LossBreakdown {
            total: acc.total / n,
            con: acc.con / n,
            spa: acc.spa / n,
            fre: acc.fre / n,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.cfg, self.seed, &self.state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, seed, state) = load_checkpoint(path)?;
        Self::from_state(cfg, seed, state)
    }

    /// Runs until `total_steps` steps are complete. With `out`, appends
    /// metrics to `out/metrics.csv`, writes periodic checkpoints and a final
    /// `out/final.ckpt`.
    pub fn run(&mut self, total_steps: usize, out: Option<&Path>) -> Result<()> {
        let mut csv = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.csv");
                let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = BufWriter::new(f);
                writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
                for row in &self.state.history {
                    writeln!(w, "{}", row.csv()).map_err(|e| Error::io(&path, e))?;
                }
                Some((w, path))
            }
            None => None,
        };
        while self.state.step < total_steps {
            let row = self.step()?;
            if let Some((w, path)) = csv.as_mut() {
                writeln!(w, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
                w.flush().map_err(|e| Error::io(&*path, e))?;
            }
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.state.step % every == 0 {
                    self.save(&checkpoint_path(dir, self.state.step))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Fresh run of `steps` steps.
pub fn pretrain(
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainState> {
    let mut t = Trainer::new(cfg.clone(), seed)?;
    t.run(steps, out)?;
    Ok(t.into_state())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                image_size: (32, 32),
                stage_widths: vec![4, 8, 8, 8],
                dtype: DType::F64,
                ..ModelConfig::desk()
            },
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trip() {
        let c = tiny();
        let kv = KeyValues::parse(&c.to_kv().to_canonical()).unwrap();
        assert_eq!(TrainConfig::from_kv(&kv).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let kv = KeyValues::parse("learning_rate = 1").unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err());
        let kv = KeyValues::parse("loss_terms = ").unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut t = Trainer::new(tiny(), 5).unwrap();
            t.run(3, None).unwrap();
            t.into_state()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::new(tiny(), 9).unwrap();
        full.run(4, None).unwrap();

        let mut first = Trainer::new(tiny(), 9).unwrap();
        first.run(2, None).unwrap();
        let path = dir.path().join("mid.ckpt");
        first.save(&path).unwrap();
        let mut resumed = Trainer::load(&path).unwrap();
        assert_eq!(resumed.state(), first.state());
        resumed.run(4, None).unwrap();
        assert_eq!(resumed.state(), full.state());
    }
}
