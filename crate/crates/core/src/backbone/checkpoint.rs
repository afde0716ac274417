//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `GEOCKPT\0`, a little-endian `u32` format version,
//! a `u32` header length, a JSON header, then every tensor as little-endian
//! `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Denoiser, DenoiserConfig, NoiseSchedule};

pub const MAGIC: &[u8; 8] = b"GEOCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub tensors: Vec<TensorEntry>,
    /// Free-form training metadata (steps, final loss, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint(net: &Denoiser, meta: serde_json::Value, out: &mut impl Write) -> Result<()> {
    let mut offset = 0;
    let tensors = net
        .params()
        .params()
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
                len: p.data.len(),
            };
            offset += p.data.len();
            e
        })
        .collect();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        config: net.config().clone(),
        schedule: net.schedule().clone(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)?;
    for p in net.params().params() {
        for v in &p.data {
            out.write_f32::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<(Denoiser, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = input.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let mut header: CheckpointHeader = serde_json::from_slice(&json)?;
    header.schedule.rebuild();
    let mut net = Denoiser::new(header.config.clone(), header.schedule.clone())?;
    let params = net.params_mut().params_mut();
    if params.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, network expects {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for (p, e) in params.iter_mut().zip(&header.tensors) {
        if p.name != e.name || p.shape != e.shape {
            return Err(Error::Checkpoint(format!("tensor {} {:?} does not match {} {:?}", e.name, e.shape, p.name, p.shape)));
        }
        for v in p.data.iter_mut() {
            *v = input.read_f32::<LittleEndian>()?;
        }
    }
    Ok((net, header))
}

pub fn save(net: &Denoiser, meta: serde_json::Value, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_checkpoint(net, meta, &mut f)?;
        f.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Denoiser, CheckpointHeader)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

/// Path of the checkpoint shipped with the repository.
pub fn default_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("toy.ckpt")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_weight() {
        let net = Denoiser::new(DenoiserConfig::tiny(), NoiseSchedule::default()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, serde_json::json!({"steps": 3}), &mut buf).unwrap();
        let (back, header) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(header.meta["steps"], 3);
        assert_eq!(back.config(), net.config());
        for (a, b) in back.params().params().iter().zip(net.params().params()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn rejects_corruption() {
        let net = Denoiser::new(DenoiserConfig::tiny(), NoiseSchedule::default()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, serde_json::Value::Null, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 4];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());
    }
}
