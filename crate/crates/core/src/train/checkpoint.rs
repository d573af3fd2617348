//! Checkpoint files.
//!
//! ```text
//! u64          length of the config block
//! bytes        canonical `key = value` text (run config plus seed and step)
//! u64          tensor count
//! per tensor:  u32 name length, name bytes, RSVH tensor
//! ```
//!
//! Tensors are `param/<name>`, `adam_m/<name>`, `adam_v/<name>` and
//! `history` (`[steps, 6]`: step, lr, total, con, spa, fre).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{HistoryRow, Moments, TrainConfig, TrainState};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, Params};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("checkpoint stream: {e}"))
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    seed: u64,
    state: &TrainState,
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_to(&mut w, cfg, seed, state)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_to<W: Write>(w: &mut W, cfg: &TrainConfig, seed: u64, state: &TrainState) -> Result<()> {
    let mut kv = cfg.to_kv();
    kv.set("seed", seed);
    kv.set("step", state.step);
    kv.set("epoch", state.epoch(&cfg.schedule));
    let text = kv.to_canonical();
    w.write_all(&(text.len() as u64).to_le_bytes())
        .map_err(fmt_err)?;
    w.write_all(text.as_bytes()).map_err(fmt_err)?;

    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for (prefix, p) in [
        ("param", &state.params),
        ("adam_m", &state.moments.m),
        ("adam_v", &state.moments.v),
    ] {
        entries.extend(p.iter().map(|(k, t)| (format!("{prefix}/{k}"), t)));
    }
    let rows: Vec<f64> = state
        .history
        .iter()
        .flat_map(|r| {
            [
                r.step as f64,
                r.lr,
                r.loss.total,
                r.loss.con,
                r.loss.spa,
                r.loss.fre,
            ]
        })
        .collect();
    let history = Tensor::new(&[state.history.len(), 6], rows)?;
    entries.push(("history".into(), &history));

    w.write_all(&(entries.len() as u64).to_le_bytes())
        .map_err(fmt_err)?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(fmt_err)?;
        w.write_all(name.as_bytes()).map_err(fmt_err)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, u64, TrainState)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(f))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(fmt_err)?;
    Ok(u64::from_le_bytes(b))
}

fn read_from<R: Read>(r: &mut R) -> Result<(TrainConfig, u64, TrainState)> {
    let len = read_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("config block of {len} bytes")));
    }
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(fmt_err)?;
    let text =
        String::from_utf8(text).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let mut kv = KeyValues::parse(&text)?;
    let seed: u64 = kv
        .get("seed")?
        .ok_or_else(|| Error::Format("checkpoint lacks seed".into()))?;
    let step: usize = kv
        .get("step")?
        .ok_or_else(|| Error::Format("checkpoint lacks step".into()))?;
    let run_keys: Vec<String> = kv
        .keys()
        .filter(|k| !matches!(k.as_str(), "seed" | "step" | "epoch"))
        .cloned()
        .collect();
    let mut run = KeyValues::default();
    for k in run_keys {
        run.set(&k, kv.get_str(&k).unwrap_or_default());
    }
    kv = run;
    let cfg = TrainConfig::from_kv(&kv)?;

    let count = read_u64(r)? as usize;
    let mut params = Params::new();
    let mut m = Params::new();
    let mut v = Params::new();
    let mut history = None;
    for _ in 0..count {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(fmt_err)?;
        let n = u32::from_le_bytes(b) as usize;
        if n > 4096 {
            return Err(Error::Format(format!("tensor name of {n} bytes")));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(fmt_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let t = read_tensor(r)?;
        match name.split_once('/') {
            Some(("param", k)) => params.insert(k, t),
            Some(("adam_m", k)) => m.insert(k, t),
            Some(("adam_v", k)) => v.insert(k, t),
            None if name == "history" => history = Some(t),
            _ => return Err(Error::Format(format!("unexpected tensor `{name}`"))),
        }
    }
    let history = history.ok_or_else(|| Error::Format("checkpoint lacks history".into()))?;
    if history.rank() != 2 || history.shape()[1] != 6 || history.dtype() != DType::F64 {
        return Err(Error::Format(format!(
            "history tensor {:?}",
            history.shape()
        )));
    }
    let history: Vec<HistoryRow> = history
        .data()
        .chunks(6)
        .map(|c| HistoryRow {
            step: c[0] as usize,
            lr: c[1],
            loss: LossBreakdown {
                total: c[2],
                con: c[3],
                spa: c[4],
                fre: c[5],
            },
        })
        .collect();
    if history.len() != step || history.iter().enumerate().any(|(i, r)| r.step != i) {
        return Err(Error::Format("history does not match step counter".into()));
    }
    Ok((
        cfg,
        seed,
        TrainState {
            params,
            moments: Moments { m, v },
            step,
            history,
        },
    ))
}
