//! Binary checkpoint container shared by model, dataset and filter snapshots.
//!
//! Layout: 8-byte magic `SFLCKPT1`, u32 LE section count, then per section a
//! u16 LE name length, the UTF-8 name, a u64 LE payload length and the raw
//! payload. Float payloads are little-endian f64. Writes go through a temp
//! file plus rename so interrupted runs never leave truncated artifacts.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 8] = b"SFLCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("missing section {0:?}")]
    MissingSection(String),
}

/// An ordered set of named binary sections.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn put_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.push((name.to_string(), bytes));
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        self.put_bytes(name, text.as_bytes().to_vec());
    }

    pub fn put_f64s(&mut self, name: &str, values: &[f64]) {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.put_bytes(name, bytes);
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn text(&self, name: &str) -> Result<&str, CheckpointError> {
        std::str::from_utf8(self.bytes(name)?)
            .map_err(|_| CheckpointError::Malformed(format!("section {name} is not UTF-8")))
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.bytes(name)?;
        if bytes.len() % 8 != 0 {
            return Err(CheckpointError::Malformed(format!(
                "section {name} length {} not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn section_len(&self, name: &str) -> Option<usize> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, b)| b.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = read_u32(&mut cur)? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u16(&mut cur)? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(|_| CheckpointError::Truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Malformed("section name not UTF-8".into()))?;
            let payload_len = read_u64(&mut cur)? as usize;
            let mut payload = vec![0u8; payload_len];
            cur.read_exact(&mut payload).map_err(|_| CheckpointError::Truncated)?;
            sections.push((name, payload));
        }
        Ok(Checkpoint { sections })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn read_u16(cur: &mut io::Cursor<&[u8]>) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    cur.read_exact(&mut b).map_err(|_| CheckpointError::Truncated)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(cur: &mut io::Cursor<&[u8]>) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).map_err(|_| CheckpointError::Truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut io::Cursor<&[u8]>) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b).map_err(|_| CheckpointError::Truncated)?;
    Ok(u64::from_le_bytes(b))
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_sections() {
        let mut ck = Checkpoint::new();
        ck.put_text("meta", "kind = model\nseed = 7\n");
        ck.put_f64s("params", &[1.5, -2.25, 0.0, f64::MAX]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.text("meta").unwrap(), "kind = model\nseed = 7\n");
        assert_eq!(back.f64s("params").unwrap(), vec![1.5, -2.25, 0.0, f64::MAX]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = Checkpoint::from_bytes(b"NOTCKPT0\x00\x00\x00\x00").unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
    }

    #[test]
    fn truncation_is_detected() {
        let mut ck = Checkpoint::new();
        ck.put_f64s("params", &[1.0, 2.0, 3.0]);
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated));
    }

    #[test]
    fn atomic_write_then_read() {
        let dir = std::env::temp_dir().join("shadowfl_ckpt_test");
        let path = dir.join("model.ckpt");
        let mut ck = Checkpoint::new();
        ck.put_text("meta", "x = 1\n");
        ck.write_to(&path).unwrap();
        let back = Checkpoint::read_from(&path).unwrap();
        assert_eq!(back.text("meta").unwrap(), "x = 1\n");
        std::fs::remove_dir_all(&dir).ok();
    }
}
