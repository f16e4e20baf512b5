//! MMV1 volume and MSK1 mask files. All integers and floats little-endian.
//!
//! ```text
//! MMV1: "MMV1" | M u32 | D u32 | H u32 | W u32 | spacing f32×3 | M·D·H·W f32
//! MSK1: "MSK1" | N_c u32 | D u32 | H u32 | W u32 | D·H·W u8
//! ```

use std::fs;
use std::path::Path;

use super::MultiModalVolume;
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;

const MMV_MAGIC: &[u8; 4] = b"MMV1";
const MSK_MAGIC: &[u8; 4] = b"MSK1";

/// Cursor over a fully-read file; every short read is a format error.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: truncated at byte {} (needed {n} more, {} available)",
                    self.what,
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn extent_u32(e: usize) -> Result<u32> {
    u32::try_from(e).map_err(|_| Error::Validation(format!("extent {e} exceeds u32")))
}

pub fn encode_mmv(v: &MultiModalVolume) -> Result<Vec<u8>> {
    if v.modalities() == 0 {
        return Err(Error::Validation("cannot write a volume with zero modalities".into()));
    }
    let mut out = Vec::with_capacity(32 + 4 * v.data().len());
    out.extend_from_slice(MMV_MAGIC);
    out.extend_from_slice(&extent_u32(v.modalities())?.to_le_bytes());
    for e in v.extents() {
        out.extend_from_slice(&extent_u32(e)?.to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mmv(buf: &[u8]) -> Result<MultiModalVolume> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "MMV1",
    };
    r.magic(MMV_MAGIC)?;
    let m = r.u32()? as usize;
    let ext = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    if m == 0 || ext.contains(&0) {
        return Err(Error::Format(format!("MMV1: invalid header M={m} extents={ext:?}")));
    }
    let n = m
        .checked_mul(ext.iter().product())
        .ok_or_else(|| Error::Format("MMV1: header sizes overflow".into()))?;
    let payload = r.take(
        n.checked_mul(4)
            .ok_or_else(|| Error::Format("MMV1: size overflow".into()))?,
    )?;
    r.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MultiModalVolume::new(m, ext, spacing, data).map_err(|e| Error::Format(format!("MMV1: {e}")))
}

pub fn write_mmv(path: &Path, v: &MultiModalVolume) -> Result<()> {
    fs::write(path, encode_mmv(v)?)?;
    Ok(())
}

pub fn read_mmv(path: &Path) -> Result<MultiModalVolume> {
    decode_mmv(&fs::read(path)?)
}

pub fn encode_mask(m: &SegmentationMask) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + m.labels().len());
    out.extend_from_slice(MSK_MAGIC);
    out.extend_from_slice(&extent_u32(m.classes())?.to_le_bytes());
    for e in m.extents() {
        out.extend_from_slice(&extent_u32(e)?.to_le_bytes());
    }
    out.extend_from_slice(m.labels());
    Ok(out)
}

pub fn decode_mask(buf: &[u8]) -> Result<SegmentationMask> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "MSK1",
    };
    r.magic(MSK_MAGIC)?;
    let classes = r.u32()? as usize;
    let ext = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    if ext.contains(&0) || classes == 0 || classes > 256 {
        return Err(Error::Format(format!(
            "MSK1: invalid header N_c={classes} extents={ext:?}"
        )));
    }
    let n = ext
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Format("MSK1: header sizes overflow".into()))?;
    let labels = r.take(n)?.to_vec();
    r.finish()?;
    if let Some(idx) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(Error::Validation(format!(
            "MSK1: label {} at voxel index {idx} is not below N_c={classes}",
            labels[idx]
        )));
    }
    SegmentationMask::new(labels, ext, classes)
}

pub fn write_mask(path: &Path, m: &SegmentationMask) -> Result<()> {
    fs::write(path, encode_mask(m)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<SegmentationMask> {
    decode_mask(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_mmv_is_truncated() {
        let v = MultiModalVolume::new(1, [1, 1, 2], [1.0; 3], vec![0.5, 1.5]).unwrap();
        let bytes = encode_mmv(&v).unwrap();
        assert!(matches!(decode_mmv(&bytes[..32]), Err(Error::Format(_))));
        assert_eq!(decode_mmv(&bytes).unwrap(), v);
    }

    #[test]
    fn mmv_bad_magic() {
        let v = MultiModalVolume::new(1, [1, 1, 1], [1.0; 3], vec![0.0]).unwrap();
        let mut bytes = encode_mmv(&v).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_mmv(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn mmv_layout_is_bit_exact() {
        let v = MultiModalVolume::new(2, [1, 1, 1], [1.0, 2.0, 0.5], vec![1.0, -2.0]).unwrap();
        let bytes = encode_mmv(&v).unwrap();
        let mut expect = b"MMV1".to_vec();
        for x in [2u32, 1, 1, 1] {
            expect.extend_from_slice(&x.to_le_bytes());
        }
        for x in [1.0f32, 2.0, 0.5, 1.0, -2.0] {
            expect.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(bytes, expect);
    }

    #[test]
    fn mask_label_out_of_range_names_voxel() {
        let m = SegmentationMask::new(vec![0, 1, 2], [1, 1, 3], 3).unwrap();
        let mut bytes = encode_mask(&m).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = decode_mask(&bytes).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("voxel index 2"));
    }

    #[test]
    fn all_zero_mask_is_valid() {
        let m = SegmentationMask::new(vec![0; 8], [2, 2, 2], 2).unwrap();
        assert_eq!(decode_mask(&encode_mask(&m).unwrap()).unwrap(), m);
    }
}
