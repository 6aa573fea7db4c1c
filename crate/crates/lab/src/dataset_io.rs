//! The `SCQD` binary dataset format and a lossless CSV export.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCQD" | u32 version | u32 len, JSON header | 5 × (u64 count, values)
//! ```
//!
//! The header is `{"meta": DatasetMeta, "state_dim", "action_dim"}`. The
//! columns follow in the order states, actions, rewards, next_states, dones;
//! the first four hold `f32` values, `dones` one byte (0 or 1) per row.

use std::fmt::Write as _;
use std::path::Path;

use scq_core::env::{Dataset, DatasetMeta};
use serde::{Deserialize, Serialize};

use crate::{fsutil, LabError, Result};

pub const MAGIC: &[u8; 4] = b"SCQD";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: DatasetMeta,
    state_dim: usize,
    action_dim: usize,
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header { meta: ds.meta.clone(), state_dim: ds.state_dim, action_dim: ds.action_dim })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * (ds.states.len() * 2 + ds.actions.len() + ds.len() * 2));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    put_f32s(&mut out, &ds.states);
    put_f32s(&mut out, &ds.actions);
    put_f32s(&mut out, &ds.rewards);
    put_f32s(&mut out, &ds.next_states);
    out.extend_from_slice(&(ds.dones.len() as u64).to_le_bytes());
    out.extend(ds.dones.iter().map(|&d| d as u8));
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| LabError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn count(&mut self, expect: usize, what: &str) -> Result<usize> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        if n != expect {
            return Err(LabError::Format(format!("{what}: {n} values, expected {expect}")));
        }
        Ok(n)
    }

    fn f32s(&mut self, expect: usize, what: &str) -> Result<Vec<f32>> {
        let n = self.count(expect, what)?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| LabError::Format(format!("{what}: length overflow")))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(LabError::Format("not an SCQD file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LabError::Format(format!("unsupported SCQD version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let n = header.meta.size;
    let (sd, ad) = (header.state_dim, header.action_dim);
    let mut ds = Dataset::empty(header.meta, sd, ad);
    ds.states = r.f32s(n * sd, "states")?;
    ds.actions = r.f32s(n * ad, "actions")?;
    ds.rewards = r.f32s(n, "rewards")?;
    ds.next_states = r.f32s(n * sd, "next_states")?;
    let m = r.count(n, "dones")?;
    ds.dones = r
        .take(m)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(LabError::Format(format!("done flag {b} is not 0 or 1"))),
        })
        .collect::<Result<_>>()?;
    if r.pos != bytes.len() {
        return Err(LabError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ds.validate()?;
    Ok(ds)
}

pub fn write(path: &Path, ds: &Dataset) -> Result<()> {
    fsutil::atomic_write(path, &encode(ds)?)
}

pub fn read(path: &Path) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}

/// One row per transition. `f32` values print as their shortest round-trip
/// decimal, so [`from_csv`] recovers the columns bit for bit.
pub fn to_csv(ds: &Dataset) -> String {
    let mut out = String::new();
    let mut cols: Vec<String> = (0..ds.state_dim).map(|i| format!("state_{i}")).collect();
    cols.extend((0..ds.action_dim).map(|i| format!("action_{i}")));
    cols.push("reward".into());
    cols.extend((0..ds.state_dim).map(|i| format!("next_state_{i}")));
    cols.push("done".into());
    out.push_str(&cols.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.state(i).iter().map(f32::to_string).collect();
        fields.extend(ds.action(i).iter().map(f32::to_string));
        fields.push(ds.rewards[i].to_string());
        fields.extend(ds.next_state(i).iter().map(f32::to_string));
        fields.push(if ds.dones[i] { "1" } else { "0" }.into());
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

pub fn from_csv(text: &str, meta: DatasetMeta) -> Result<Dataset> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| LabError::Format("empty CSV".into()))?.split(',').collect();
    let sd = header.iter().filter(|c| c.starts_with("state_")).count();
    let ad = header.iter().filter(|c| c.starts_with("action_")).count();
    if header.len() != 2 * sd + ad + 2 {
        return Err(LabError::Format(format!("unexpected CSV header {header:?}")));
    }
    let mut ds = Dataset::empty(meta, sd, ad);
    let num = |s: &str| s.parse::<f32>().map_err(|e| LabError::Format(format!("{s:?}: {e}")));
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(LabError::Format(format!("row {}: {} fields", ln + 1, f.len())));
        }
        for x in &f[..sd] {
            ds.states.push(num(x)?);
        }
        for x in &f[sd..sd + ad] {
            ds.actions.push(num(x)?);
        }
        ds.rewards.push(num(f[sd + ad])?);
        for x in &f[sd + ad + 1..2 * sd + ad + 1] {
            ds.next_states.push(num(x)?);
        }
        ds.dones.push(match f[2 * sd + ad + 1] {
            "0" => false,
            "1" => true,
            other => return Err(LabError::Format(format!("done flag {other:?}"))),
        });
    }
    ds.meta.size = ds.len();
    ds.validate()?;
    Ok(ds)
}
