//! Dataset file format.
//!
//! Layout (little-endian): magic "SPS1" | u32 version = 1 | u32 J | u32 T |
//! u64 sample count | per-sample blocks | u64 FNV-1a checksum of everything
//! before it.
//!
//! Per sample: input2d as T*J*2 f32, target3d sequence as T*J*3 f32, then the
//! meta record (u32 sequence id, u32 frame index, u16 action-tag length, tag
//! bytes). The center target is the sequence frame at T/2 and is rebuilt on
//! read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::hash::fnv1a64;

use super::{PoseSequenceSample, SampleMeta};

const MAGIC: &[u8; 4] = b"SPS1";
const VERSION: u32 = 1;

pub fn dataset_bytes(samples: &[PoseSequenceSample]) -> Result<Vec<u8>> {
    let first = samples.first().ok_or_else(|| Error::config("dataset has no samples"))?;
    let (frames, joints) = (first.frames(), first.joints());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(joints as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        if s.frames() != frames || s.joints() != joints {
            return Err(Error::dimension(format!(
                "dataset samples disagree on shape: [{},{}] vs [{frames},{joints}]",
                s.frames(),
                s.joints()
            )));
        }
        if s.meta.action.len() > u16::MAX as usize {
            return Err(Error::config("action tag too long"));
        }
        for v in s.input2d.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in s.target_seq.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&s.meta.sequence_id.to_le_bytes());
        out.extend_from_slice(&s.meta.frame_index.to_le_bytes());
        out.extend_from_slice(&(s.meta.action.len() as u16).to_le_bytes());
        out.extend_from_slice(s.meta.action.as_bytes());
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn write_dataset(samples: &[PoseSequenceSample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_bytes(samples)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("dataset truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_grid(&mut self, shape: Vec<usize>) -> Result<ValueGrid> {
        let len: usize = shape.iter().product();
        let raw = self.take(len * 4)?;
        let mut data = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        ValueGrid::new(shape, data)
    }
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<PoseSequenceSample>> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::format("dataset truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored_checksum = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored_checksum {
        return Err(Error::format("dataset checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("not a dataset file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let joints = r.u32()? as usize;
    let frames = r.u32()? as usize;
    if joints == 0 || frames == 0 || frames % 2 == 0 {
        return Err(Error::format(format!("invalid dataset header: J={joints} T={frames}")));
    }
    let count = r.u64()? as usize;
    let mut samples = Vec::with_capacity(count);
    let mid = frames / 2;
    for _ in 0..count {
        let input2d = r.f32_grid(vec![frames, joints, 2])?;
        let target_seq = r.f32_grid(vec![frames, joints, 3])?;
        let sequence_id = r.u32()?;
        let frame_index = r.u32()?;
        let tag_len = r.u16()? as usize;
        let action = std::str::from_utf8(r.take(tag_len)?)
            .map_err(|_| Error::format("action tag is not UTF-8"))?
            .to_string();
        let target_center = ValueGrid::new(
            vec![joints, 3],
            target_seq.data()[mid * joints * 3..(mid + 1) * joints * 3].to_vec(),
        )?;
        samples.push(PoseSequenceSample {
            input2d,
            target_seq,
            target_center,
            meta: SampleMeta { sequence_id, frame_index, action },
        });
    }
    if r.pos != body.len() {
        return Err(Error::format("dataset has trailing bytes"));
    }
    Ok(samples)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PoseSequenceSample>> {
    let bytes = fs::read(path)?;
    dataset_from_bytes(&bytes)
}
