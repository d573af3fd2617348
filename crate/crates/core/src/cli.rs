//! The `heatlens` command line.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{
    flops_csv, oracle_discrepancy, scaling_fit, throughput_scan, ScanConfig, THROUGHPUT_HEADER,
};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::gradcheck::{run_scope, Scope};
use crate::heat::hco_apply_tensor;
use crate::masking::{split_frequency, MaskSpec, RateSide};
use crate::netpbm;
use crate::rng::Xoshiro256pp;
use crate::spectral::{SpectralPlan, TransformPath};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};
use crate::train::{synth_pair, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "heatlens",
    version,
    about = "Heat-conduction operators on the DCT"
)]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Compute precision.
    #[arg(long, global = true)]
    pub dtype: Option<DType>,
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic optical/SAR pairs.
    Synth(SynthArgs),
    /// Split an image into low and high frequency components.
    Mask(MaskArgs),
    /// Diffuse an image with the heat operator.
    Hco(HcoArgs),
    /// Verify gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Run self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Flop model, throughput scan or oracle comparison.
    Bench(BenchArgs),
    /// Convert an image to an RSVH tensor dump.
    Dump(DumpArgs),
    /// Inspect an RSVH tensor dump, optionally writing it as an image.
    Load(LoadArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Fixed masking rate instead of a seeded draw.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Count the rate on the low band instead of the high band.
    #[arg(long)]
    pub rate_low: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write exact components as RSVH dumps.
    #[arg(long)]
    pub dump_tensors: bool,
}

#[derive(Debug, Args)]
pub struct HcoArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k: f64,
    #[arg(long)]
    pub t: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Block,
    Model,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "ops")]
    pub scope: ScopeArg,
    /// Corrupt the analytic gradient of this case (self-test).
    #[arg(long)]
    pub fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BenchMode {
    Flops,
    Throughput,
    Oracle,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "flops")]
    pub mode: BenchMode,
    /// Token-grid sides (flops), image sides (throughput) or grid sides (oracle).
    #[arg(long, value_delimiter = ',')]
    pub sides: Option<Vec<usize>>,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LoadArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Result of a command: text for standard output and whether every
/// internal check held.
pub struct Outcome {
    pub stdout: String,
    pub ok: bool,
}

fn ok(stdout: String) -> Outcome {
    Outcome { stdout, ok: true }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn image_name(stem: &str, suffix: &str, channels: usize) -> String {
    format!(
        "{stem}_{suffix}.{}",
        if channels == 1 { "pgm" } else { "ppm" }
    )
}

fn dump(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(seed: u64, a: &SynthArgs) -> Result<Outcome> {
    create_dir(&a.out)?;
    let mut lines = String::new();
    for i in 0..a.count {
        let (opt, sar) = synth_pair(crate::rng::derive_seed(seed, &[i as u64]), a.size);
        let po = a.out.join(format!("pair_{i}_opt.ppm"));
        let ps = a.out.join(format!("pair_{i}_sar.pgm"));
        netpbm::save(&po, &opt)?;
        netpbm::save(&ps, &sar)?;
        lines += &format!("{}\n{}\n", po.display(), ps.display());
    }
    Ok(ok(lines))
}

pub fn cmd_mask(seed: u64, dtype: DType, a: &MaskArgs) -> Result<Outcome> {
    let x = netpbm::load(&a.input)?.to_dtype(dtype);
    let (c, m, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let side = if a.rate_low {
        RateSide::Low
    } else {
        RateSide::High
    };
    let spec = match a.rate {
        Some(r) => MaskSpec::for_rate(m, n, r, side, seed)?,
        None if a.rate_low => {
            let drawn = MaskSpec::sample(m, n, seed)?;
            MaskSpec::for_rate(m, n, 1.0 - drawn.target_rate, side, seed)?
        }
        None => MaskSpec::sample(m, n, seed)?,
    };
    let plan = SpectralPlan::new(m, n, TransformPath::Matmul)?;
    let (low, high) = split_frequency(&plan, &x, &spec)?;
    let recombination = low.zip_map(&high, |a, b| a + b)?.max_abs_diff(&x);
    create_dir(&a.out)?;
    let stem = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let low_clamped = netpbm::save(&a.out.join(image_name(&stem, "low", c)), &low)?;
    let high_clamped = netpbm::save(&a.out.join(image_name(&stem, "high", c)), &high)?;
    if a.dump_tensors {
        dump(&a.out.join(format!("{stem}_low.rsvh")), &low)?;
        dump(&a.out.join(format!("{stem}_high.rsvh")), &high)?;
    }
    let tol = match dtype {
        DType::F64 => 1e-10,
        DType::F32 => 1e-5,
    };
    let sidecar = format!(
        "{}low_clamped = {low_clamped}\nhigh_clamped = {high_clamped}\nrecombination_max_abs_err = {recombination:e}\n",
        spec.to_sidecar()
    );
    let path = a.out.join(format!("{stem}_mask.txt"));
    fs::write(&path, &sidecar).map_err(|e| Error::io(&path, e))?;
    Ok(Outcome {
        stdout: sidecar,
        ok: recombination < tol,
    })
}

pub fn cmd_hco(dtype: DType, a: &HcoArgs) -> Result<Outcome> {
    let x = netpbm::load(&a.input)?.to_dtype(dtype);
    let plan = Arc::new(SpectralPlan::new(
        x.shape()[1],
        x.shape()[2],
        TransformPath::Matmul,
    )?);
    let y = hco_apply_tensor(&plan, &x, a.k, a.t)?;
    netpbm::save(&a.out, &y)?;
    Ok(ok(format!(
        "input_mean = {}\noutput_mean = {}\n",
        x.mean(),
        y.mean()
    )))
}

pub fn cmd_gradcheck(seed: u64, a: &GradcheckArgs) -> Result<Outcome> {
    let scope = match a.scope {
        ScopeArg::Ops => Scope::Ops,
        ScopeArg::Block => Scope::Block,
        ScopeArg::Model => Scope::Model,
    };
    let report = run_scope(scope, seed, a.fault.clone())?;
    let ok = report.passed();
    let mut text = format!("{report}\n");
    if !ok {
        text += &format!("failed: {}\n", report.failures().join(", "));
    }
    Ok(Outcome { stdout: text, ok })
}

pub fn train_config(path: Option<&Path>, dtype: Option<DType>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_kv(&KeyValues::load(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = dtype {
        cfg.model.dtype = d;
    }
    Ok(cfg)
}

pub fn cmd_pretrain(seed: u64, cfg: TrainConfig, a: &PretrainArgs) -> Result<Outcome> {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::load(p)?,
        None => Trainer::new(cfg, seed)?,
    };
    trainer.run(a.steps, Some(&a.out))?;
    let h = &trainer.state().history;
    let text = match (h.first(), h.last()) {
        (Some(f), Some(l)) => format!(
            "steps = {}\ninitial_loss = {}\nfinal_loss = {}\nmetrics = {}\n",
            h.len(),
            f.loss.total,
            l.loss.total,
            a.out.join("metrics.csv").display()
        ),
        _ => "steps = 0\n".into(),
    };
    Ok(ok(text))
}

pub fn cmd_bench(
    seed: u64,
    dtype: Option<DType>,
    cfg: &TrainConfig,
    a: &BenchArgs,
) -> Result<Outcome> {
    let text = match a.mode {
        BenchMode::Flops => {
            let sides = a
                .sides
                .clone()
                .unwrap_or_else(|| vec![32, 64, 128, 256, 512, 1024]);
            let fit = scaling_fit(&sides, a.channels)?;
            let mut s = flops_csv(&sides, a.channels, 1);
            s += &format!(
                "# fitted exponent in N (mixer): hco {:.4}, attention {:.4}\n# fitted exponent in N (block with MLP): hco {:.4}, attention {:.4}\n# crossover side: {}\n",
                fit.hco_exponent,
                fit.attention_exponent,
                fit.hco_block_exponent,
                fit.attention_block_exponent,
                fit.crossover_side.map_or("none".to_string(), |v| v.to_string())
            );
            s
        }
        BenchMode::Throughput => {
            let sides = a.sides.clone().unwrap_or_else(|| vec![64, 128, 256]);
            let scan = ScanConfig {
                runs: a.runs,
                dtype: dtype.unwrap_or(DType::F32),
                ..ScanConfig::default()
            };
            let rows = throughput_scan(&sides, &cfg.model, &scan, seed)?;
            let mut s = format!("{THROUGHPUT_HEADER}\n");
            for r in rows {
                s += &r.csv();
                s.push('\n');
            }
            s
        }
        BenchMode::Oracle => {
            let sides = a.sides.clone().unwrap_or_else(|| vec![16]);
            let mut rng = Xoshiro256pp::seed_from(seed);
            let mut s = "side,k,t,dt,rel_l2\n".to_string();
            for side in sides {
                let u = Tensor::uniform(&[side, side], -1.0, 1.0, &mut rng);
                for dt in [2e-4, 1e-4, 5e-5] {
                    let e = oracle_discrepancy(&u, 0.5, 0.1, dt)?;
                    s += &format!("{side},0.5,0.1,{dt:e},{e:e}\n");
                }
            }
            s
        }
    };
    match &a.out {
        Some(p) => {
            fs::write(p, &text).map_err(|e| Error::io(p, e))?;
            Ok(ok(String::new()))
        }
        None => Ok(ok(text)),
    }
}

pub fn cmd_dump(a: &DumpArgs) -> Result<Outcome> {
    let t = netpbm::load(&a.input)?;
    dump(&a.out, &t)?;
    Ok(ok(format!("{:?} {}\n", t.shape(), t.dtype())))
}

pub fn cmd_load(a: &LoadArgs) -> Result<Outcome> {
    let f = File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let t = read_tensor(&mut BufReader::new(f))?;
    let mut text = format!(
        "shape = {:?}\ndtype = {}\nmean = {}\nmax_abs = {}\n",
        t.shape(),
        t.dtype(),
        t.mean(),
        t.max_abs()
    );
    if let Some(out) = &a.out {
        let clamped = netpbm::save(out, &t)?;
        text += &format!("clamped = {clamped}\n");
    }
    Ok(ok(text))
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let dtype = cli.dtype.unwrap_or(DType::F64);
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli.seed, a),
        Command::Mask(a) => cmd_mask(cli.seed, dtype, a),
        Command::Hco(a) => cmd_hco(dtype, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli.seed, a),
        Command::Pretrain(a) => {
            let cfg = train_config(cli.config.as_deref(), cli.dtype)?;
            cmd_pretrain(cli.seed, cfg, a)
        }
        Command::Bench(a) => {
            let cfg = train_config(cli.config.as_deref(), None)?;
            cmd_bench(cli.seed, cli.dtype, &cfg, a)
        }
        Command::Dump(a) => cmd_dump(a),
        Command::Load(a) => cmd_load(a),
    }
}

/// Entry point used by the binary: parse, run, report. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{}", out.stdout);
            if out.ok {
                0
            } else {
                eprintln!("heatlens: internal check failed");
                1
            }
        }
        Err(e) => {
            eprintln!("heatlens: {e}");
            1
        }
    }
}
