//! "PYRD" named-tensor container.
//!
//! ```text
//! magic  "PYRD"            4 bytes
//! version u16 LE           currently 1
//! ---- payload (covered by the CRC) ----
//! step    u64 LE
//! count   u32 LE
//! count × { name_len u32, name UTF-8, ndim u8, dims u64[ndim], f32[numel] }
//! ---- end payload ----
//! crc32   u32 LE
//! ```

use std::collections::HashSet;
use std::path::Path;

use pyrad_tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PYRD";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn check_names<'a>(names: impl Iterator<Item = &'a str>) -> std::result::Result<(), String> {
    let mut seen = HashSet::new();
    for n in names {
        if n.is_empty() {
            return Err("empty tensor name".into());
        }
        if !seen.insert(n) {
            return Err(format!("duplicate tensor name `{n}`"));
        }
    }
    Ok(())
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    check_names(ckpt.tensors.iter().map(|(n, _)| n.as_str())).map_err(Error::Config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        if t.ndim() > usize::from(u8::MAX) {
            return Err(Error::Config(format!("tensor `{name}` has too many dimensions")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[6..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated while reading {what} at byte {}", self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err("bad magic (not a PYRD checkpoint)".into());
    }
    if bytes.len() < 6 + 4 {
        return Err("truncated header".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format!("unsupported version {version} (expected {VERSION})"));
    }
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { bytes: body, pos: 6 };
    let step = r.u64("step")?;
    let count = r.u32("entry count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("entry {i}: name is not UTF-8"))?
            .to_string();
        let ndim = r.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64("dims")?).map_err(|_| format!("`{name}`: dimension overflow"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format!("`{name}`: shape {shape:?} overflows"))?;
        let raw = r.take(numel, &format!("payload of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != body.len() {
        return Err(format!("{} unexpected bytes after the last entry", body.len() - r.pos));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if stored != crc32fast::hash(&body[6..]) {
        return Err("CRC mismatch (corrupt payload)".into());
    }
    check_names(tensors.iter().map(|(n, _)| n.as_str()))?;
    Ok(Checkpoint { step, tensors })
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    parse(bytes).map_err(|m| Error::Load(format!("{}: {m}", path.display())))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Write via a temporary sibling and rename, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn write(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let tmp = path.with_extension("pyrd.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            step: 42,
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn([2, 3], |i| i as f32 * 0.5 - 1.0)),
                ("scalar".into(), Tensor::scalar(f32::MIN_POSITIVE)),
                ("empty".into(), Tensor::zeros([0, 4])),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = from_bytes(&to_bytes(&c).unwrap(), Path::new("m")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_set_is_valid() {
        let c = Checkpoint::default();
        let bytes = to_bytes(&c).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 8 + 4 + 4);
        assert_eq!(from_bytes(&bytes, Path::new("m")).unwrap(), c);
    }

    #[test]
    fn corruption_detected() {
        let bytes = to_bytes(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(from_bytes(&bad, Path::new("m")).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(from_bytes(&bad, Path::new("m")).unwrap_err().to_string().contains("version"));
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(from_bytes(&bad, Path::new("m")).is_err());
        for cut in [5, 12, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut], Path::new("m")).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let c = Checkpoint {
            step: 0,
            tensors: vec![("x".into(), Tensor::zeros([1])), ("x".into(), Tensor::zeros([1]))],
        };
        assert!(to_bytes(&c).is_err());
        let mut ok = to_bytes(&Checkpoint { step: 0, tensors: vec![("x".into(), Tensor::zeros([1])), ("y".into(), Tensor::zeros([1]))] }).unwrap();
        // rename y → x and fix the CRC
        let pos = ok.windows(1).rposition(|w| w == b"y").unwrap();
        ok[pos] = b'x';
        let n = ok.len();
        let crc = crc32fast::hash(&ok[6..n - 4]);
        ok[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(from_bytes(&ok, Path::new("m")).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pyrd");
        write(&path, &sample()).unwrap();
        assert_eq!(read(&path).unwrap(), sample());
    }
}
