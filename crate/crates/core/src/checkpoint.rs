//! Named-tensor checkpoint files.
//!
//! Layout (all integers unsigned 64-bit little-endian):
//!
//! ```text
//! "KARAT1" | version: u8 | entry count
//! per entry: name length | UTF-8 name | rank | extents[rank] | f64 LE data
//! ```

use crate::error::{KaratError, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"KARAT1";
pub const VERSION: u8 = 1;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader { inner: r, offset: 0 };
        let magic = r.bytes(6)?;
        if magic != MAGIC {
            return Err(KaratError::format(0, "bad magic, not a KARAT1 checkpoint"));
        }
        let version = r.bytes(1)?[0];
        if version != VERSION {
            return Err(KaratError::format(6, format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let at = r.offset;
            let len = r.len_field("name length", 1 << 16)?;
            let name = String::from_utf8(r.bytes(len)?)
                .map_err(|_| KaratError::format(at, "entry name is not UTF-8"))?;
            let rank = r.len_field("rank", 16)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_field("extent", 1 << 40)?);
            }
            let numel: usize = shape.iter().product();
            let raw = r.bytes(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| KaratError::format(self.offset, format!("truncated file, wanted {n} bytes")))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn len_field(&mut self, what: &str, max: u64) -> Result<usize> {
        let at = self.offset;
        let v = self.u64()?;
        if v > max {
            return Err(KaratError::format(at, format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }
}
