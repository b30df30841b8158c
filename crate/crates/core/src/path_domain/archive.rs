use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Grid, Path};
use crate::error::{Error, Result};

pub const PATH_MAGIC: [u8; 8] = *b"ACPATH1\0";
pub const ARCHIVE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8 + 8 + 8 + 32 + 32;

/// Fixed-width little-endian header of a path archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub version: u32,
    pub n: u64,
    pub x_minus_bits: u64,
    pub x_plus_bits: u64,
    pub count: u64,
    /// Hash of the configuration that produced the ensemble, zero if none.
    pub config_hash: [u8; 32],
    pub payload_sha256: [u8; 32],
}

impl ArchiveHeader {
    pub fn grid(&self) -> Result<Grid> {
        if self.n > 1 << 40 {
            return Err(Error::Integrity(format!("implausible grid size {}", self.n)));
        }
        let n = self.n as usize;
        Grid::new(
            f64::from_bits(self.x_minus_bits),
            f64::from_bits(self.x_plus_bits),
            n,
        )
        .map_err(|e| Error::Integrity(format!("bad grid in header: {e}")))
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        let mut o = 0;
        let mut put = |bytes: &[u8]| {
            b[o..o + bytes.len()].copy_from_slice(bytes);
            o += bytes.len();
        };
        put(&PATH_MAGIC);
        put(&self.version.to_le_bytes());
        put(&0u32.to_le_bytes());
        put(&self.n.to_le_bytes());
        put(&self.x_minus_bits.to_le_bytes());
        put(&self.x_plus_bits.to_le_bytes());
        put(&self.count.to_le_bytes());
        put(&self.config_hash);
        put(&self.payload_sha256);
        b
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(Error::Integrity(format!(
                "archive header truncated ({} of {HEADER_LEN} bytes)",
                b.len()
            )));
        }
        if b[..8] != PATH_MAGIC {
            return Err(Error::Integrity("not a path archive (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != ARCHIVE_VERSION {
            return Err(Error::Migration {
                found: version,
                expected: ARCHIVE_VERSION,
            });
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(&b[48..80]);
        let mut payload_sha256 = [0u8; 32];
        payload_sha256.copy_from_slice(&b[80..112]);
        Ok(Self {
            version,
            n: u64_at(16),
            x_minus_bits: u64_at(24),
            x_plus_bits: u64_at(32),
            count: u64_at(40),
            config_hash,
            payload_sha256,
        })
    }
}

/// Serializes an ensemble sharing one grid into archive bytes.
pub fn encode_archive(paths: &[Path], config_hash: [u8; 32]) -> Result<Vec<u8>> {
    let grid = match paths.first() {
        Some(p) => p.grid,
        None => return Err(Error::Contract("cannot archive an empty ensemble".into())),
    };
    let mut payload = Vec::with_capacity(paths.len() * grid.points() * 8);
    for p in paths {
        if p.grid != grid {
            return Err(Error::Contract("all archived paths must share one grid".into()));
        }
        for v in &p.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = ArchiveHeader {
        version: ARCHIVE_VERSION,
        n: grid.n as u64,
        x_minus_bits: grid.x_minus.to_bits(),
        x_plus_bits: grid.x_plus.to_bits(),
        count: paths.len() as u64,
        config_hash,
        payload_sha256: sha256(&payload),
    };
    let mut out = header.encode().to_vec();
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses archive bytes. Never panics on malformed input.
pub fn decode_archive(bytes: &[u8]) -> Result<(ArchiveHeader, Vec<Path>)> {
    let header = ArchiveHeader::decode(bytes)?;
    let grid = header.grid()?;
    let per = grid.points();
    let expected = (header.count as u128) * (per as u128) * 8;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u128 != expected {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    if sha256(payload) != header.payload_sha256 {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    let mut paths = Vec::with_capacity(header.count as usize);
    for chunk in payload.chunks_exact(per * 8) {
        let values: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        paths.push(
            Path::new(grid, values).map_err(|e| Error::Integrity(format!("bad path: {e}")))?,
        );
    }
    Ok((header, paths))
}

pub fn write_archive(file: &std::path::Path, paths: &[Path], config_hash: [u8; 32]) -> Result<()> {
    let bytes = encode_archive(paths, config_hash)?;
    let mut w = BufWriter::new(File::create(file)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_archive(file: &std::path::Path) -> Result<(ArchiveHeader, Vec<Path>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(file)?).read_to_end(&mut bytes)?;
    decode_archive(&bytes)
}

/// Writes one path as `x,u` rows.
pub fn export_csv(path: &Path, file: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    w.write_record(["x", "u"])?;
    for i in 0..path.len() {
        w.write_record([path.x(i).to_string(), path.values[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn sha256(bytes: &[u8]) -> [u8; 32] {
    let d = Sha256::digest(bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&d);
    out
}
