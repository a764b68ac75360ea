//! Binary checkpoint format.
//!
//! Layout: magic "PNDM", version u32 LE, stage tag byte (1 = proposal
//! network, 2 = false-positive classifier), tensor count u32 LE, then per
//! tensor: name length u32 LE, name bytes, rank u32 LE, dims u32 LE each,
//! f32 LE values. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::stage1::RpnModel;
use crate::stage2::DualPathModel;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PNDM";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const STAGE_TAG_RPN: u8 = 1;
pub const STAGE_TAG_FPR: u8 = 2;

pub fn save_checkpoint(named: &[(String, Tensor)], stage_tag: u8, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(stage_tag);
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(u8, BTreeMap<String, Tensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a PNDM checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let stage_tag = r.take(1)?[0];
    if stage_tag != STAGE_TAG_RPN && stage_tag != STAGE_TAG_FPR {
        return Err(Error::Checkpoint(format!("unknown stage tag {stage_tag}")));
    }
    let count = r.u32()? as usize;
    let mut named = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n = 1usize;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            n = n.saturating_mul(d);
            shape.push(d);
        }
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        named.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((stage_tag, named))
}

pub fn save_rpn(model: &RpnModel, path: &Path) -> Result<()> {
    save_checkpoint(&model.to_named(), STAGE_TAG_RPN, path)
}

pub fn load_rpn(path: &Path) -> Result<RpnModel> {
    let (tag, named) = load_checkpoint(path)?;
    if tag != STAGE_TAG_RPN {
        return Err(Error::Checkpoint(format!(
            "expected a stage-1 checkpoint (tag {STAGE_TAG_RPN}), found tag {tag}"
        )));
    }
    RpnModel::from_named(&named)
}

pub fn save_fpr(model: &DualPathModel, path: &Path) -> Result<()> {
    save_checkpoint(&model.to_named(), STAGE_TAG_FPR, path)
}

pub fn load_fpr(path: &Path) -> Result<DualPathModel> {
    let (tag, named) = load_checkpoint(path)?;
    if tag != STAGE_TAG_FPR {
        return Err(Error::Checkpoint(format!(
            "expected a stage-2 checkpoint (tag {STAGE_TAG_FPR}), found tag {tag}"
        )));
    }
    DualPathModel::from_named(&named)
}
