//! Checkpoint files (little-endian).
//!
//! ```text
//! "SFCK" u8 version=1
//! u32 config_len, config_len bytes of `key=value` model config text
//! u32 param_count
//! per param: u16 name_len, name, u8 rank, rank × u32 dims, prod(dims) × f64
//! ```
//!
//! Projector parameters and batch-norm running statistics are stored under
//! the `sf/` prefix when present.

use std::fs;
use std::path::Path;

use sf_autograd::{BatchNormState, ParamStore};

use crate::alignment::{Projector, BN_MOMENTUM, PROJECTOR_PREFIX};
use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::model::VlaParams;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u8 = 1;
const RUNNING_MEAN: &str = "sf/bn.running_mean";
const RUNNING_VAR: &str = "sf/bn.running_var";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: VlaParams,
    pub projector: Option<Projector>,
}

fn put_param(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        let cfg = self.params.config.to_text();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());
        let extra = self.projector.as_ref().map_or(0, |p| p.store.len() + 2);
        buf.extend_from_slice(&((self.params.store.len() + extra) as u32).to_le_bytes());
        for p in self.params.store.iter() {
            put_param(&mut buf, &p.name, &p.shape, &p.data);
        }
        if let Some(proj) = &self.projector {
            for p in proj.store.iter() {
                put_param(&mut buf, &p.name, &p.shape, &p.data);
            }
            let f = proj.bn.features();
            put_param(&mut buf, RUNNING_MEAN, &[f], &proj.bn.running_mean);
            put_param(&mut buf, RUNNING_VAR, &[f], &proj.bn.running_var);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("version {version}, expected {VERSION}")));
        }
        let len = r.u32()? as usize;
        let text =
            std::str::from_utf8(r.take(len)?).map_err(|_| ModelError::Checkpoint("config is not UTF-8".into()))?;
        let config = ModelConfig::from_text(text)?;
        let count = r.u32()? as usize;
        let mut backbone = ParamStore::new();
        let mut projector = ParamStore::new();
        let mut running: [Option<Vec<f64>>; 2] = [None, None];
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.take(n.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("size overflow".into()))?)?;
            let data: Vec<f64> =
                data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            match name.as_str() {
                RUNNING_MEAN => running[0] = Some(data),
                RUNNING_VAR => running[1] = Some(data),
                _ if name.starts_with(PROJECTOR_PREFIX) => {
                    projector.add(name, &shape, data)?;
                }
                _ => {
                    backbone.add(name, &shape, data)?;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = VlaParams::from_store(config.clone(), backbone)?;
        let projector = match (projector.is_empty(), running) {
            (true, [None, None]) => None,
            (false, [Some(mean), Some(var)]) => {
                let mut bn = BatchNormState::new(config.d_model, BN_MOMENTUM);
                if mean.len() != bn.features() || var.len() != bn.features() {
                    return Err(ModelError::Checkpoint("running statistics have the wrong length".into()));
                }
                bn.running_mean = mean;
                bn.running_var = var;
                Some(Projector::from_parts(&config, projector, bn)?)
            }
            _ => return Err(ModelError::Checkpoint("incomplete projector".into())),
        };
        Ok(Self { params, projector })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
