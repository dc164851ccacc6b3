//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "FSDETCKP"
//! version  u32      1
//! width    u32      4 (f32 payload) or 8 (f64 payload)
//! meta     u32 length + UTF-8 JSON of CheckpointMeta
//! count    u32      number of parameters
//! per parameter:
//!   name   u32 length + UTF-8
//!   ndim   u32, then ndim x u64 extents
//!   data   prod(extents) values of the payload width
//! ```

use std::io::{Read, Write};
use std::path::Path;

use fsdet_core::detector::{Detector, DetectorConfig};
use fsdet_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"FSDETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: DetectorConfig,
    /// "meta_train" or "fine_tune".
    pub phase: String,
    pub dataset_seed: u64,
    pub split: usize,
    pub k: Option<usize>,
    pub run_index: Option<u64>,
    pub steps: usize,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn write_to<T: Scalar>(w: &mut impl Write, model: &Detector<T>, meta: &CheckpointMeta) -> Result<()> {
    let io = |e| CliError::Io { path: "<checkpoint>".into(), source: e };
    let width = std::mem::size_of::<T>() as u32;
    w.write_all(MAGIC).map_err(io)?;
    put_u32(w, VERSION).map_err(io)?;
    put_u32(w, width).map_err(io)?;
    put_str(w, &serde_json::to_string(meta)?).map_err(io)?;
    put_u32(w, model.store.len() as u32).map_err(io)?;
    let mut buf = Vec::new();
    for (_, p) in model.store.iter() {
        put_str(&mut buf, &p.name).map_err(io)?;
        put_u32(&mut buf, p.tensor.shape().len() as u32).map_err(io)?;
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            if width == 4 {
                buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(io)?;
        buf.clear();
    }
    Ok(())
}

pub fn save<T: Scalar>(path: &Path, model: &Detector<T>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let f = std::fs::File::create(path).map_err(CliError::io(path))?;
    let mut w = std::io::BufWriter::new(f);
    write_to(&mut w, model, meta)?;
    w.flush().map_err(CliError::io(path))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or("truncated file")?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "non UTF-8 string".into())
    }
}

/// Parses a checkpoint into a model of precision `T` (either payload width
/// is accepted).
pub fn read_from<T: Scalar>(bytes: &[u8]) -> std::result::Result<(Detector<T>, CheckpointMeta), String> {
    let mut c = Cursor { data: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let width = c.u32()?;
    if width != 4 && width != 8 {
        return Err(format!("unsupported value width {width}"));
    }
    let meta: CheckpointMeta = serde_json::from_str(&c.string()?).map_err(|e| format!("metadata: {e}"))?;
    let mut model = Detector::<T>::new(meta.model.clone(), 0).map_err(|e| e.to_string())?;
    let count = c.u32()? as usize;
    if count != model.store.len() {
        return Err(format!("{} parameters stored, model has {}", count, model.store.len()));
    }
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
        let id = model.store.id(&name).ok_or_else(|| format!("unknown parameter {name}"))?;
        if model.store.get(id).tensor.shape() != shape.as_slice() {
            return Err(format!("parameter {name}: shape {:?} does not match {:?}", shape, model.store.get(id).tensor.shape()));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * width as usize)?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes")))).collect()
        };
        model.store.set_data(id, &data).map_err(|e| e.to_string())?;
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok((model, meta))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Detector<T>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(CliError::io(path))?;
    read_from(&bytes).map_err(|reason| CliError::Checkpoint { path: path.into(), reason })
}

/// Parameter values as f64 tensors, by name; used to compare models.
pub fn snapshot<T: Scalar>(model: &Detector<T>) -> Vec<(String, Tensor<f64>)> {
    model.store.iter().map(|(_, p)| (p.name.clone(), p.tensor.cast())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            model: DetectorConfig::tiny(8),
            phase: "meta_train".into(),
            dataset_seed: 1,
            split: 0,
            k: None,
            run_index: None,
            steps: 3,
        }
    }

    #[test]
    fn roundtrip_f64_is_exact() {
        let m = Detector::<f64>::new(meta().model, 5).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &m, &meta()).unwrap();
        let (back, mb) = read_from::<f64>(&buf).unwrap();
        assert_eq!(mb, meta());
        assert_eq!(snapshot(&back), snapshot(&m));
    }

    #[test]
    fn f32_payload_loads_into_f64() {
        let m = Detector::<f32>::new(meta().model, 5).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &m, &meta()).unwrap();
        let (back, _) = read_from::<f64>(&buf).unwrap();
        assert_eq!(snapshot(&back), snapshot(&m));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Detector::<f32>::new(meta().model, 5).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &m, &meta()).unwrap();
        assert!(read_from::<f32>(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_from::<f32>(&bad).is_err());
        bad = buf.clone();
        bad.push(0);
        assert!(read_from::<f32>(&bad).is_err());
    }
}
