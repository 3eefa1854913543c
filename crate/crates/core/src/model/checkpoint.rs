//! Checkpoint file: `SMPW`, u32 version, u32-length JSON config block, u32
//! tensor count, then per tensor a u32-length UTF-8 name, u32 rank, u32
//! extents and little-endian f64 values. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::binio::{put_len, put_u32, Reader};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMPW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub frontend: FrontendConfig,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    frontend: FrontendConfig,
    model: ModelConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        let block = serde_json::to_vec(&ConfigBlock {
            frontend: self.frontend.clone(),
            model: self.params.config().clone(),
        })?;
        put_len(w, block.len(), "config block")?;
        w.write_all(&block)?;
        let tensors = self.params.named_tensors();
        put_len(w, tensors.len(), "tensor count")?;
        for (name, _, t) in tensors {
            put_len(w, name.len(), "name length")?;
            w.write_all(name.as_bytes())?;
            put_len(w, t.shape().len(), "rank")?;
            for d in t.shape() {
                put_len(w, *d, "extent")?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r);
        if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let at = r.offset();
        let block: ConfigBlock = serde_json::from_slice(&r.bytes(len, "config block")?)
            .map_err(|e| Error::format(at, format!("config block: {e}")))?;
        let mut params = ModelParams::zeros(&block.model)
            .map_err(|e| Error::format(at, format!("config block: {e}")))?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32("tensor count")? as usize;
        if count != expected.len() {
            return r.fail(format!("{count} tensors, model needs {}", expected.len()));
        }
        for ((name, shape), t) in expected.iter().zip(params.tensors_mut()) {
            let at = r.offset();
            let n = r.u32("name length")? as usize;
            let got = String::from_utf8(r.bytes(n, "tensor name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
            if &got != name {
                return Err(Error::format(at, format!("expected tensor {name}, found {got}")));
            }
            let at = r.offset();
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32("extent")? as usize);
            }
            if &dims != shape {
                return Err(Error::format(at, format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
            }
            for v in t.data_mut() {
                *v = r.f64("tensor value")?;
            }
        }
        r.expect_end()?;
        Ok(Checkpoint {
            frontend: block.frontend,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
