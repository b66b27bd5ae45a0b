//! Little-endian binary framing shared by the dataset, model, and
//! perturbation file formats.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u16, found: u16 },
    #[error("truncated file while reading {context}")]
    Truncated { context: &'static str },
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub struct BinWriter<W: Write> {
    inner: W,
}

impl BinWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, CodecError> {
        Ok(BinWriter {
            inner: BufWriter::new(File::create(path)?),
        })
    }
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        BinWriter { inner }
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<(), CodecError> {
        Ok(self.inner.write_all(magic)?)
    }

    pub fn u8(&mut self, v: u8) -> Result<(), CodecError> {
        Ok(self.inner.write_all(&[v])?)
    }

    pub fn u16(&mut self, v: u16) -> Result<(), CodecError> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u32(&mut self, v: u32) -> Result<(), CodecError> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f32(&mut self, v: f32) -> Result<(), CodecError> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f32_slice(&mut self, vs: &[f32]) -> Result<(), CodecError> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(self.inner.write_all(&buf)?)
    }

    pub fn finish(mut self) -> Result<(), CodecError> {
        Ok(self.inner.flush()?)
    }
}

pub struct BinReader<R: Read> {
    inner: R,
}

impl BinReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, CodecError> {
        Ok(BinReader {
            inner: BufReader::new(File::open(path)?),
        })
    }
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R) -> Self {
        BinReader { inner }
    }

    fn fill(&mut self, buf: &mut [u8], context: &'static str) -> Result<(), CodecError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                CodecError::Truncated { context }
            } else {
                CodecError::Io(e)
            }
        })
    }

    /// Reads and checks the 4-byte magic.
    pub fn expect_magic(&mut self, expected: &[u8; 4]) -> Result<(), CodecError> {
        let mut found = [0u8; 4];
        self.fill(&mut found, "magic")?;
        if &found != expected {
            return Err(CodecError::BadMagic {
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    /// Reads the version field and checks it.
    pub fn expect_version(&mut self, expected: u16) -> Result<(), CodecError> {
        let found = self.u16("version")?;
        if found != expected {
            return Err(CodecError::UnsupportedVersion { expected, found });
        }
        Ok(())
    }

    pub fn u8(&mut self, context: &'static str) -> Result<u8, CodecError> {
        let mut b = [0u8; 1];
        self.fill(&mut b, context)?;
        Ok(b[0])
    }

    pub fn u16(&mut self, context: &'static str) -> Result<u16, CodecError> {
        let mut b = [0u8; 2];
        self.fill(&mut b, context)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, context: &'static str) -> Result<u32, CodecError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, context)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn f32(&mut self, context: &'static str) -> Result<f32, CodecError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, context)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn f32_vec(&mut self, len: usize, context: &'static str) -> Result<Vec<f32>, CodecError> {
        let mut buf = vec![0u8; len * 4];
        self.fill(&mut buf, context)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Checks that the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<(), CodecError> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(CodecError::TrailingBytes),
        }
    }
}
