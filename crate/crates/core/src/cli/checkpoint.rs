//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RCFD"                      magic, 4 bytes
//! u32                         format version
//! u8                          model kind (1 = denoiser, 2 = classifier)
//! u32                         tensor count
//! per tensor:
//!   u16 + utf8                name
//!   u8                        rank
//!   u32 * rank                dims
//! u64                         payload byte length
//! f32 * sum(prod(dims))       payload, tensors in table order
//! u32                         CRC-32 of the payload
//! ```

use std::path::Path;

use crate::diffnet::{Classifier, Denoiser, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RCFD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Denoiser,
    Classifier,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Denoiser => 1,
            ModelKind::Classifier => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(ModelKind::Denoiser),
            2 => Ok(ModelKind::Classifier),
            other => Err(Error::Format(format!("unknown model kind code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Denoiser => "denoiser",
            ModelKind::Classifier => "classifier",
        }
    }
}

pub fn encode(kind: ModelKind, params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind.code());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut payload = Vec::with_capacity(params.scalar_count() * 4);
    for t in params.tensors() {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.value.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    let crc = crc32fast::hash(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint image, validating magic, version, expected kind,
/// table/payload consistency, and the payload checksum.
pub fn decode(bytes: &[u8], expected: ModelKind) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("file too short for magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic, not an RCFD checkpoint".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = ModelKind::from_code(r.u8()?)?;
    if kind != expected {
        return Err(Error::ModelKind(format!(
            "checkpoint holds a {}, expected a {}",
            kind.name(),
            expected.name()
        )));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1024));
    let mut scalars: u64 = 0;
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        scalars += shape.iter().product::<usize>() as u64;
        table.push((name, shape));
    }
    let declared = r.u64()?;
    if declared != scalars * 4 {
        return Err(Error::Shape(format!(
            "shape table describes {} payload bytes, header declares {declared}",
            scalars * 4
        )));
    }
    let remaining = (bytes.len() - r.pos) as u64;
    if remaining != declared + 4 {
        return Err(Error::Format(format!(
            "expected {} bytes after header, found {remaining}",
            declared + 4
        )));
    }
    let payload = r.take(declared as usize)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut store = ParamStore::new();
    let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        store.add_shaped(&name, shape, data)?;
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, kind: ModelKind, params: &ParamStore) -> Result<Vec<u8>> {
    let bytes = encode(kind, params)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path, expected: ModelKind) -> Result<ParamStore> {
    decode(&std::fs::read(path)?, expected)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    Denoiser::from_params(load_checkpoint(path, ModelKind::Denoiser)?)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    Classifier::from_params(load_checkpoint(path, ModelKind::Classifier)?)
}

/// Rounds every entry to the nearest f32, i.e. what a save/load cycle keeps.
pub fn quantize(params: &ParamStore) -> ParamStore {
    let mut q = params.clone();
    let flat: Vec<f64> = params.flatten().iter().map(|&v| v as f32 as f64).collect();
    q.assign_flat(&flat).expect("same layout");
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::DenoiserSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        Denoiser::new(DenoiserSpec::default(), &mut rng).unwrap().params
    }

    #[test]
    fn roundtrip_preserves_f32_values() {
        let p = store();
        let back = decode(&encode(ModelKind::Denoiser, &p).unwrap(), ModelKind::Denoiser).unwrap();
        assert_eq!(back, quantize(&p));
    }

    #[test]
    fn distinct_failures() {
        let p = store();
        let bytes = encode(ModelKind::Denoiser, &p).unwrap();

        let mut flipped = bytes.clone();
        let mid = bytes.len() - 40;
        flipped[mid] ^= 0x01;
        assert!(matches!(decode(&flipped, ModelKind::Denoiser), Err(Error::Checksum { .. })));

        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert!(matches!(decode(&versioned, ModelKind::Denoiser), Err(Error::Version { found: 9, .. })));

        assert!(matches!(decode(&bytes, ModelKind::Classifier), Err(Error::ModelKind(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1], ModelKind::Denoiser), Err(Error::Format(_))));
        assert!(matches!(decode(b"NOPE", ModelKind::Denoiser), Err(Error::Format(_))));
    }
}
