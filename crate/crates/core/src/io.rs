//! Atomic file writes and the raw FK sample stream.
//!
//! Raw stream layout (all integers little-endian):
//!
//! ```text
//! magic   b"FKRW"
//! version u32 (= 1)
//! hlen    u32, then hlen bytes of JSON header
//! records, each:
//!   run_id      u32
//!   sample_idx  u64
//!   bond bytes  ceil(n_bonds / 8)   bit i = bond i open
//!   ghost bytes ceil(n_ghost / 8)   bit s = ghost bond of site s open
//! ```
//!
//! Record sizes follow from `n_bonds` and `n_ghost` in the header.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bits::BitVec;
use crate::error::{invalid, Result};
use crate::sampler::BondConfiguration;

/// Writes `contents` to a sibling temporary file, syncs it and renames it
/// over `path`, so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = temp_sibling(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub const RAW_MAGIC: &[u8; 4] = b"FKRW";
pub const RAW_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub n_bonds: usize,
    /// Number of ghost bits per record; zero without a field.
    pub n_ghost: usize,
    /// Geometry, model parameters, seeds: anything the producer records.
    pub description: serde_json::Value,
}

impl RawHeader {
    fn record_len(&self) -> usize {
        4 + 8 + self.n_bonds.div_ceil(8) + self.n_ghost.div_ceil(8)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub run_id: u32,
    pub sample_idx: u64,
    pub open: BitVec,
    pub ghost_open: BitVec,
}

pub struct RawWriter<W: Write> {
    out: W,
    header: RawHeader,
}

impl RawWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: RawHeader) -> Result<Self> {
        RawWriter::new(BufWriter::new(File::create(path)?), header)
    }
}

impl RawWriter<BufWriter<File>> {
    /// Reopens a stream written by an interrupted run, keeping its header
    /// and first `n_records` records and appending after them.
    pub fn resume(path: &Path, header: RawHeader, n_records: usize) -> Result<Self> {
        let mut reader = RawReader::open(path)?;
        if reader.header() != &header {
            return Err(invalid(format!("raw stream {} has a different header", path.display())));
        }
        let json_len = serde_json::to_vec(reader.header())?.len();
        let keep = (12 + json_len + n_records * header.record_len()) as u64;
        for _ in 0..n_records {
            if reader.read()?.is_none() {
                return Err(invalid(format!("raw stream {} holds fewer than {n_records} records", path.display())));
            }
        }
        let file = fs::OpenOptions::new().write(true).open(path)?;
        file.set_len(keep)?;
        let mut out = BufWriter::new(file);
        out.seek(SeekFrom::End(0))?;
        Ok(Self { out, header })
    }
}

impl<W: Write> RawWriter<W> {
    pub fn new(mut out: W, header: RawHeader) -> Result<Self> {
        let json = serde_json::to_vec(&header)?;
        out.write_all(RAW_MAGIC)?;
        out.write_all(&RAW_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        Ok(Self { out, header })
    }

    pub fn write(&mut self, run_id: u32, sample_idx: u64, bonds: &BondConfiguration) -> Result<()> {
        if bonds.open.len() != self.header.n_bonds || bonds.ghost_open.len() != self.header.n_ghost {
            return Err(invalid("bond configuration does not match the stream header"));
        }
        self.out.write_all(&run_id.to_le_bytes())?;
        self.out.write_all(&sample_idx.to_le_bytes())?;
        self.out.write_all(&bonds.open.to_le_bytes())?;
        self.out.write_all(&bonds.ghost_open.to_le_bytes())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub struct RawReader<R: Read> {
    input: R,
    header: RawHeader,
    buf: Vec<u8>,
}

impl RawReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        RawReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> RawReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != RAW_MAGIC {
            return Err(invalid("not a raw FK sample stream"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != RAW_VERSION {
            return Err(invalid(format!("unsupported raw stream version {version}")));
        }
        input.read_exact(&mut word)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut json)?;
        let header: RawHeader = serde_json::from_slice(&json)?;
        let buf = vec![0u8; header.record_len()];
        Ok(Self { input, header, buf })
    }

    pub fn header(&self) -> &RawHeader {
        &self.header
    }

    /// The next record, `None` at a clean end of stream.
    pub fn read(&mut self) -> Result<Option<RawRecord>> {
        let mut got = 0;
        while got < self.buf.len() {
            match self.input.read(&mut self.buf[got..])? {
                0 if got == 0 => return Ok(None),
                0 => return Err(invalid("truncated raw record")),
                n => got += n,
            }
        }
        let b = &self.buf;
        let run_id = u32::from_le_bytes(b[0..4].try_into().expect("4 bytes"));
        let sample_idx = u64::from_le_bytes(b[4..12].try_into().expect("8 bytes"));
        let nb = self.header.n_bonds.div_ceil(8);
        let open = BitVec::from_le_bytes(&b[12..12 + nb], self.header.n_bonds)
            .ok_or_else(|| invalid("stray bits in bond record"))?;
        let ghost_open = BitVec::from_le_bytes(&b[12 + nb..], self.header.n_ghost)
            .ok_or_else(|| invalid("stray bits in ghost record"))?;
        Ok(Some(RawRecord { run_id, sample_idx, open, ghost_open }))
    }
}
