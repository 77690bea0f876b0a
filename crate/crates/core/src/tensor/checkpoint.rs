//! Flat binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic [8]u8 | version u32 | count u32
//! count × ( name_len u32 | name [name_len]u8 | rows u32 | cols u32 | rows*cols × f64 )
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{Matrix, TensorError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Full parameter set.
    Tensors,
    /// Low-rank adapter matrices plus their metadata.
    Adapter,
}

impl CheckpointKind {
    pub fn magic(self) -> &'static [u8; 8] {
        match self {
            CheckpointKind::Tensors => b"LGSMTENS",
            CheckpointKind::Adapter => b"LGSMLORA",
        }
    }

    fn from_magic(magic: &[u8; 8]) -> Option<Self> {
        [CheckpointKind::Tensors, CheckpointKind::Adapter]
            .into_iter()
            .find(|k| k.magic() == magic)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind) -> Self {
        Self {
            kind,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.kind.magic());
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self, TensorError> {
        let r = &mut bytes;
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        let kind = CheckpointKind::from_magic(&magic).ok_or(TensorError::BadCheckpoint("unknown magic"))?;
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(TensorError::BadCheckpoint("unsupported version"));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > r.len() {
                return Err(TensorError::BadCheckpoint("truncated name"));
            }
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| TensorError::BadCheckpoint("name is not utf-8"))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.saturating_mul(8) <= r.len())
                .ok_or(TensorError::BadCheckpoint("truncated tensor data"))?;
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                read_exact(r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if !r.is_empty() {
            return Err(TensorError::BadCheckpoint("trailing bytes"));
        }
        Ok(Self { kind, tensors })
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        f.sync_all()
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let bytes = fs::read(path).map_err(|e| TensorError::Io(e.to_string()))?;
        Self::decode(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), TensorError> {
    r.read_exact(buf)
        .map_err(|_| TensorError::BadCheckpoint("unexpected end of file"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
