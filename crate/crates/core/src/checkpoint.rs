//! NFCK checkpoints. Little-endian throughout:
//!
//! ```text
//! "NFCK" | version u32 | header_len u32 | header JSON (UTF-8)
//!        | tensor_count u32
//!        | per tensor: name_len u16 | name | rank u8 | extents u32×rank | f32 payload
//! ```
//!
//! The JSON header carries the model configuration, the step and whether
//! optimizer moments follow the parameters (as `optim.m.*` / `optim.v.*`).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::OptimState;

pub const MAGIC: &[u8; 4] = b"NFCK";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: u64,
    pub has_optimizer: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub optim: Option<OptimState>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Validation(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Validation(format!("rank of '{name}' exceeds 255")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Validation(format!("extent of '{name}' exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(model: &Model, step: u64, optim: Option<&OptimState>) -> Result<Vec<u8>> {
    if let Some(o) = optim {
        o.check(&model.params)?;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.cfg.clone(),
        step,
        has_optimizer: optim.is_some(),
    })?;
    let count = model.params.len() * if optim.is_some() { 3 } else { 1 };
    let mut out = Vec::with_capacity(16 + header.len() + 4 * model.params.count() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (n, t) in model.params.iter() {
        push_tensor(&mut out, n, t)?;
    }
    if let Some(o) = optim {
        for (n, t) in o.m.iter() {
            push_tensor(&mut out, &format!("{M_PREFIX}{n}"), t)?;
        }
        for (n, t) in o.v.iter() {
            push_tensor(&mut out, &format!("{V_PREFIX}{n}"), t)?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "NFCK: truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parsed file contents before they are matched against a model.
pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode_raw(buf: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "NFCK: bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("NFCK: bad header JSON: {e}")))?;
    let count = r.u32()? as usize;
    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("NFCK: tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("NFCK: duplicate tensor name '{name}'")));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("NFCK: '{name}' size overflows")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("NFCK: {} trailing bytes", buf.len() - r.pos)));
    }
    Ok(RawCheckpoint { header, tensors })
}

/// Rebuild the model described by the file. If `expected` is given and
/// differs from the stored configuration, loading fails unless `force`, in
/// which case the stored configuration wins. Tensor names and shapes must
/// match the architecture exactly; no partially loaded model is returned.
pub fn decode_checkpoint(buf: &[u8], expected: Option<&ModelConfig>, force: bool) -> Result<Checkpoint> {
    let raw = decode_raw(buf)?;
    let cfg = raw.header.model;
    if let Some(exp) = expected {
        if exp != &cfg {
            if !force {
                return Err(Error::Validation(
                    "checkpoint configuration differs from the requested one (use --force-config to load anyway)"
                        .into(),
                ));
            }
            warn!("checkpoint configuration differs from the requested one; using the stored configuration");
        }
    }
    let template = Model::build(cfg.clone()).map_err(|e| Error::Format(format!("NFCK: stored config invalid: {e}")))?;
    let mut params = ParamStore::new();
    let (mut m, mut v) = (ParamStore::new(), ParamStore::new());
    for (name, t) in raw.tensors {
        let (store, base) = if let Some(b) = name.strip_prefix(M_PREFIX) {
            (&mut m, b.to_string())
        } else if let Some(b) = name.strip_prefix(V_PREFIX) {
            (&mut v, b.to_string())
        } else {
            (&mut params, name.clone())
        };
        let want = template
            .params
            .get(&base)
            .ok_or_else(|| Error::Format(format!("NFCK: unexpected tensor '{name}'")))?;
        if want.shape() != t.shape() {
            return Err(Error::Format(format!(
                "NFCK: '{name}' has shape {:?}, architecture needs {:?}",
                t.shape(),
                want.shape()
            )));
        }
        store.insert(base, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    // Re-insert in the architecture's order so stores compare equal.
    let reorder = |src: &ParamStore, what: &str| -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for name in template.params.names() {
            let t = src
                .get(name)
                .ok_or_else(|| Error::Format(format!("NFCK: missing {what} tensor '{name}'")))?;
            out.insert(name, t.clone())?;
        }
        Ok(out)
    };
    let params = reorder(&params, "parameter")?;
    let optim = if raw.header.has_optimizer {
        Some(OptimState {
            step: raw.header.step,
            m: reorder(&m, "first-moment")?,
            v: reorder(&v, "second-moment")?,
        })
    } else {
        if !m.is_empty() || !v.is_empty() {
            return Err(Error::Format(
                "NFCK: optimizer tensors present but header says none".into(),
            ));
        }
        None
    };
    Ok(Checkpoint {
        model: Model { cfg, params },
        step: raw.header.step,
        optim,
    })
}

/// Write atomically: a crash mid-write never clobbers an existing checkpoint.
pub fn save_checkpoint(path: &Path, model: &Model, step: u64, optim: Option<&OptimState>) -> Result<()> {
    let bytes = encode_checkpoint(model, step, optim)?;
    let tmp = path.with_extension("nfck.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>, force: bool) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, expected, force)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::build(ModelConfig::toy(2, 3, [16; 3])).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let opt = OptimState::new(&m.params);
        let ck = decode_checkpoint(&encode_checkpoint(&m, 7, Some(&opt)).unwrap(), None, false).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.step, 7);
        assert_eq!(ck.optim.unwrap().m, opt.m);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut b = encode_checkpoint(&tiny(), 0, None).unwrap();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&b, None, false),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn config_mismatch_needs_force() {
        let m = tiny();
        let b = encode_checkpoint(&m, 0, None).unwrap();
        let other = ModelConfig {
            seed: 9,
            ..m.cfg.clone()
        };
        assert!(decode_checkpoint(&b, Some(&other), false).is_err());
        assert_eq!(decode_checkpoint(&b, Some(&other), true).unwrap().model, m);
    }

    #[test]
    fn truncation_is_format_error() {
        let b = encode_checkpoint(&tiny(), 0, None).unwrap();
        assert!(matches!(
            decode_checkpoint(&b[..b.len() - 1], None, false),
            Err(Error::Format(_))
        ));
    }
}
