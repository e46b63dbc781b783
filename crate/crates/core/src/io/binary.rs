//! Little-endian tensor checkpoints (`PGCK`) and map sets (`PGMS`).

use crate::error::{Error, Result};
use crate::labels::{MapSet, HEAD_CHANNELS};
use crate::numerics::Dense;
use std::collections::HashSet;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MAPSET_MAGIC: [u8; 4] = *b"PGMS";
pub const MAPSET_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(Error::Version {
                found: v,
                expected: version,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Serialises named `f64` tensors; names must be unique.
pub fn encode_checkpoint(tensors: &[(String, Dense)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Dense)>> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let count = r.u32("tensor count")?;
    let mut out: Vec<(String, Dense)> = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateName(name));
        }
        let ndims = r.u32("rank")? as usize;
        let dims = (0..ndims)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Malformed(format!("{name}: dims {dims:?} overflow")))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Malformed("size overflow".into()))?,
            &name,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Dense::new(dims, data)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Dense)]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Dense)>> {
    decode_checkpoint(&std::fs::read(path)?)
}

fn channel_blocks(maps: &MapSet) -> [&Dense; 4] {
    [&maps.tcl, &maps.tdo, &maps.tbo, &maps.tcc]
}

/// Serialises a map set as `f32`, channel blocks in head order
/// (centre line, direction, border, character logits).
pub fn encode_mapset(maps: &MapSet) -> Result<Vec<u8>> {
    maps.validate()?;
    let (h, w) = (maps.height(), maps.width());
    let mut out = Vec::with_capacity(16 + h * w * 44 * 4 + 16);
    out.extend_from_slice(&MAPSET_MAGIC);
    out.extend_from_slice(&MAPSET_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for (block, c) in channel_blocks(maps).into_iter().zip(HEAD_CHANNELS) {
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for &v in block.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_mapset(bytes: &[u8]) -> Result<MapSet> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(MAPSET_MAGIC, MAPSET_VERSION)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let mut blocks = Vec::with_capacity(4);
    for want in HEAD_CHANNELS {
        let c = r.u32("channel count")? as usize;
        if c != want {
            return Err(Error::Malformed(format!(
                "channel block of {c}, expected {want}"
            )));
        }
        let raw = r.take(h * w * c * 4, "map data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        blocks.push(Dense::new(vec![h, w, c], data)?);
    }
    r.finish()?;
    let mut it = blocks.into_iter();
    let (tcl, tdo, tbo, tcc) = (it.next(), it.next(), it.next(), it.next());
    let maps = MapSet {
        tcl: tcl.expect("four blocks"),
        tdo: tdo.expect("four blocks"),
        tbo: tbo.expect("four blocks"),
        tcc: tcc.expect("four blocks"),
    };
    maps.validate()?;
    Ok(maps)
}

pub fn save_mapset(path: &Path, maps: &MapSet) -> Result<()> {
    std::fs::write(path, encode_mapset(maps)?)?;
    Ok(())
}

pub fn load_mapset(path: &Path) -> Result<MapSet> {
    decode_mapset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, SynthConfig};

    fn tensors() -> Vec<(String, Dense)> {
        vec![
            (
                "a".into(),
                Dense::from_rows(&[vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 1e300]]).unwrap(),
            ),
            ("b".into(), Dense::scalar(std::f64::consts::PI)),
            ("empty".into(), Dense::zeros(&[0, 3])),
        ]
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let t = tensors();
        let bytes = encode_checkpoint(&t).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgck");
        save_checkpoint(&path, &t).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), t);
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let mut t = tensors();
        t.push(("a".into(), Dense::scalar(0.0)));
        assert!(matches!(
            encode_checkpoint(&t),
            Err(Error::DuplicateName(_))
        ));

        let mut bytes = encode_checkpoint(&tensors()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::BadMagic { .. })
        ));

        let bytes = encode_checkpoint(&tensors()).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));

        let mut bytes = encode_checkpoint(&tensors()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn mapset_round_trip() {
        let scene = render_scene(4, &SynthConfig::default()).unwrap();
        let maps = scene.oracle_maps().unwrap();
        let bytes = encode_mapset(&maps).unwrap();
        let (h, w) = scene.map_dims();
        assert_eq!(bytes.len(), 16 + 16 + 4 * h * w * 44);
        let back = decode_mapset(&bytes).unwrap();
        for (a, b) in channel_blocks(&maps).iter().zip(channel_blocks(&back)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        // once in single precision, the round trip is bit-identical
        assert_eq!(decode_mapset(&encode_mapset(&back).unwrap()).unwrap(), back);
        assert_eq!(encode_mapset(&back).unwrap(), bytes);
    }

    #[test]
    fn mapset_rejects_bad_input() {
        let maps = MapSet::zeros(3, 4);
        let mut bytes = encode_mapset(&maps).unwrap();
        bytes[3] = b'K';
        assert!(matches!(decode_mapset(&bytes), Err(Error::BadMagic { .. })));
        let bytes = encode_mapset(&maps).unwrap();
        assert!(matches!(
            decode_mapset(&bytes[..20]),
            Err(Error::Truncated(_))
        ));
        let mut bytes = encode_mapset(&maps).unwrap();
        bytes.push(0);
        assert!(decode_mapset(&bytes).is_err());
        let mut bytes = encode_mapset(&maps).unwrap();
        bytes[16] = 3;
        assert!(matches!(decode_mapset(&bytes), Err(Error::Malformed(_))));
    }
}
