//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "MTDM1" | version u32 | config_len u32 | config JSON bytes |
//!   param_count u64 | params… | sha-256 digest of the config JSON
//!
//! Each param: name_len u32 | name bytes | rank u32 | dims u64… | values
//! f64 LE. Params are written in lexicographic name order, so saving the
//! same state twice is byte-identical. The optimizer sidecar reuses the
//! container with moments stored under `adam.m.*` / `adam.v.*` names.

use crate::error::{Error, Result};
use crate::tensor::{AdamHyper, AdamState, ParamSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"MTDM1";
const VERSION: u32 = 1;

fn write_param(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(params: &ParamSet, config_json: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(params.params.len() as u64).to_le_bytes());
    for (name, p) in &params.params {
        write_param(&mut out, name, &p.shape, &p.values);
    }
    let digest = Sha256::digest(config_json.as_bytes());
    out.extend_from_slice(&digest);
    out
}

pub fn save(path: &Path, params: &ParamSet, config_json: &str) -> Result<()> {
    let bytes = encode(params, config_json);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
    path: String,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Validation(format!(
                "{}: truncated checkpoint at offset {}",
                self.path, self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<(ParamSet, String)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader {
        data,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(5)? != MAGIC {
        return Err(Error::Validation(format!("{}: bad magic", r.path)));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported checkpoint version {version}",
            r.path
        )));
    }
    let config_len = r.u32()? as usize;
    let config_json = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|e| Error::Validation(format!("{}: config not utf-8: {e}", r.path)))?;
    let count = r.u64()? as usize;
    let mut params = ParamSet::default();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Validation(format!("{}: param name not utf-8: {e}", r.path)))?;
        if let Some(p) = &prev_name {
            if *p >= name {
                return Err(Error::Validation(format!(
                    "{}: params not in lexicographic order ({p} before {name})",
                    r.path
                )));
            }
        }
        prev_name = Some(name.clone());
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        params.insert(&name, values, shape);
    }
    let digest = r.take(32)?.to_vec();
    if r.pos != r.data.len() {
        return Err(Error::Validation(format!(
            "{}: {} trailing bytes",
            r.path,
            r.data.len() - r.pos
        )));
    }
    let expect = Sha256::digest(config_json.as_bytes());
    if digest != expect.as_slice() {
        return Err(Error::Validation(format!(
            "{}: config digest mismatch",
            r.path
        )));
    }
    Ok((params, config_json))
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    kind: String,
    step: u64,
    hyper: AdamHyper,
}

/// Saves optimizer moments and step counter in the checkpoint container.
pub fn save_optimizer(path: &Path, state: &AdamState) -> Result<()> {
    let mut params = ParamSet::default();
    for (name, m) in &state.first_moment {
        params.insert(&format!("adam.m.{name}"), m.clone(), vec![m.len()]);
    }
    for (name, v) in &state.second_moment {
        params.insert(&format!("adam.v.{name}"), v.clone(), vec![v.len()]);
    }
    let meta = OptimizerMeta {
        kind: "adam".into(),
        step: state.step_count,
        hyper: state.hyper,
    };
    save(path, &params, &serde_json::to_string(&meta)?)
}

pub fn load_optimizer(path: &Path) -> Result<AdamState> {
    let (params, config_json) = load(path)?;
    let meta: OptimizerMeta = serde_json::from_str(&config_json)?;
    if meta.kind != "adam" {
        return Err(Error::Validation(format!(
            "{}: unknown optimizer kind {}",
            path.display(),
            meta.kind
        )));
    }
    let mut state = AdamState::new(meta.hyper);
    state.step_count = meta.step;
    for (name, p) in &params.params {
        if let Some(base) = name.strip_prefix("adam.m.") {
            state.first_moment.insert(base.to_string(), p.values.clone());
        } else if let Some(base) = name.strip_prefix("adam.v.") {
            state.second_moment.insert(base.to_string(), p.values.clone());
        } else {
            return Err(Error::Validation(format!(
                "{}: unexpected entry {name}",
                path.display()
            )));
        }
    }
    Ok(state)
}
