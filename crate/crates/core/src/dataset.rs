//! Binary dataset interchange: state→action records and their on-disk form.
//!
//! Layout (all little-endian):
//!
//! ```text
//!   offset  size  field
//!   0       4     magic  "OSD1"
//!   4       4     version (u32, currently 1)
//!   8       4     state dimension (u32, currently 8)
//!   12      8     record count (u64)
//!   20      12    reserved (zero)
//!   32      72*k  records: 9 f64 per record (augmented state, then action)
//! ```
//!
//! The header is exactly 32 bytes so `file length = 32 + 72*count` is an
//! auditable invariant. Records are written and read bitwise — files are
//! deterministic artifacts, compared by hash in run manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mpc::AugmentedState;

pub const MAGIC: &[u8; 4] = b"OSD1";
pub const VERSION: u32 = 1;
pub const STATE_DIM: usize = 8;
pub const HEADER_LEN: u64 = 32;
pub const RECORD_LEN: u64 = (STATE_DIM as u64 + 1) * 8;

/// One state→action sample: the controller input and the action it chose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataPair {
    /// Augmented state `[x_0..x_4, d, y_dot, iob]`.
    pub x: [f64; STATE_DIM],
    /// Action in deviation coordinates, mU/min.
    pub u: f64,
}

impl DataPair {
    pub fn new(x: [f64; STATE_DIM], u: f64) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) || !u.is_finite() {
            return Err(Error::NonFinite("data pair"));
        }
        Ok(Self { x, u })
    }

    pub fn from_state(state: &AugmentedState<f64>, u: f64) -> Result<Self> {
        Self::new(state.to_array(), u)
    }

    pub fn state(&self) -> AugmentedState<f64> {
        AugmentedState::from_array(self.x)
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for v in &self.x {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.u.to_le_bytes())
    }

    fn read_from(buf: &[u8; RECORD_LEN as usize]) -> Result<Self> {
        let mut x = [0.0; STATE_DIM];
        for (i, slot) in x.iter_mut().enumerate() {
            *slot = f64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap());
        }
        let u = f64::from_le_bytes(buf[STATE_DIM * 8..].try_into().unwrap());
        if x.iter().any(|v| !v.is_finite()) || !u.is_finite() {
            return Err(Error::Format("non-finite record".into()));
        }
        Ok(Self { x, u })
    }
}

/// Streaming writer. Records are appended as they arrive; the header's count
/// field is back-patched by [`DatasetWriter::finish`], which must be called
/// for the file to be valid.
pub struct DatasetWriter {
    file: BufWriter<File>,
    count: u64,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(STATE_DIM as u32).to_le_bytes())?;
        file.write_all(&0u64.to_le_bytes())?;
        file.write_all(&[0u8; 12])?;
        Ok(Self { file, count: 0 })
    }

    pub fn push(&mut self, pair: &DataPair) -> Result<()> {
        pair.write_to(&mut self.file)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Patch the record count into the header and flush. Returns the count.
    pub fn finish(mut self) -> Result<u64> {
        self.file.flush()?;
        let mut inner = self
            .file
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        inner.seek(SeekFrom::Start(12))?;
        inner.write_all(&self.count.to_le_bytes())?;
        inner.sync_all()?;
        Ok(self.count)
    }
}

/// Streaming reader; yields records in file order.
pub struct DatasetReader {
    file: BufReader<File>,
    remaining: u64,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut file = BufReader::new(file);
        let mut header = [0u8; HEADER_LEN as usize];
        if len < HEADER_LEN {
            return Err(Error::Format(format!(
                "{}: file shorter than header",
                path.display()
            )));
        }
        file.read_exact(&mut header)?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format(format!("{}: bad magic", path.display())));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if dim as usize != STATE_DIM {
            return Err(Error::Format(format!(
                "{}: state dimension {dim}, expected {STATE_DIM}",
                path.display()
            )));
        }
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
        if len != HEADER_LEN + count * RECORD_LEN {
            return Err(Error::Format(format!(
                "{}: length {len} does not match {count} records",
                path.display()
            )));
        }
        Ok(Self { file, remaining: count })
    }

    /// Records still to be read.
    pub fn remaining(&self) -> u64 {
        self.remaining
    }
}

impl Iterator for DatasetReader {
    type Item = Result<DataPair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let mut buf = [0u8; RECORD_LEN as usize];
        Some(match self.file.read_exact(&mut buf) {
            Ok(()) => DataPair::read_from(&buf),
            Err(e) => Err(Error::Io(e)),
        })
    }
}

/// Read a whole dataset into memory.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DataPair>> {
    let reader = DatasetReader::open(&path)?;
    let mut out = Vec::with_capacity(reader.remaining() as usize);
    for rec in reader {
        out.push(rec?);
    }
    Ok(out)
}

/// Write a whole dataset in one call.
pub fn write_dataset(path: impl AsRef<Path>, records: &[DataPair]) -> Result<u64> {
    let mut w = DatasetWriter::create(path)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hex SHA-256 of a file's contents, streamed.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}
