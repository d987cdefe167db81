//! Single-file binary checkpoints.
//!
//! Layout (little endian): 8-byte magic, `u32` format version, 32-byte
//! SHA-256 of the config text, the config text, the epoch and step
//! counters, then named tensor records `(name, rows, cols, values)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffkit::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSNGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps over the whole run.
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn format_id(version: u32) -> String {
    format!("checkpoint-v{version}")
}

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&config_digest(&self.config_text));
        put_bytes(&mut out, self.config_text.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: format_id(version),
                expected: format_id(FORMAT_VERSION),
            });
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let config_text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        if config_digest(&config_text) != digest {
            return Err(Error::Checkpoint("config digest does not match config text".into()));
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has an impossible shape")))?;
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            config_text,
            epoch,
            step,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves half a
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_text: "lr = 0.001\nseed = 3\n".into(),
            epoch: 4,
            step: 32,
            tensors: vec![
                ("a".into(), Tensor::row(vec![1.0, -0.0, f64::MIN_POSITIVE])),
                ("b.weight".into(), Tensor::new(2, 2, vec![0.1, 0.2, 0.3, 1e300]).unwrap()),
            ],
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.tensor("b.weight").unwrap().get(1, 1), 1e300);
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = sample().to_bytes();
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        match Checkpoint::from_bytes(&wrong_version) {
            Err(Error::VersionMismatch { found, expected }) => {
                assert_eq!(found, "checkpoint-v9");
                assert_eq!(expected, "checkpoint-v1");
            }
            other => panic!("{other:?}"),
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let mut tampered = bytes.clone();
        let at = 8 + 4 + 32 + 8;
        tampered[at] = b'x';
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Checkpoint(_))));
    }
}
