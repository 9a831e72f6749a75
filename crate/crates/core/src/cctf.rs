//! CCTF: a little-endian binary container for named f32 tensors and 8-bit
//! mask grids. Round trips are bit-exact and the format is host-order
//! independent.
//!
//! Layout:
//! ```text
//! magic "CCTF" | version u16 | entry count u16
//! per entry: name_len u16, name bytes (<= 64), dtype u8 (0 = f32, 1 = u8),
//!            rank u8, extents rank x u32, payload offset u64
//! payload blobs (f32 little-endian bit patterns, or raw bytes for masks)
//! ```

use crate::error::{Error, Result};
use crate::maskex::ForegroundMask;
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CCTF";
pub const VERSION: u16 = 1;
pub const MAX_NAME_LEN: usize = 64;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum DumpEntry {
    Tensor(Tensor),
    /// Binary grid stored as one byte per cell, shape `[h, w]`.
    MaskGrid { h: usize, w: usize, bits: Vec<u8> },
}

impl DumpEntry {
    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            DumpEntry::Tensor(t) => Some(t),
            DumpEntry::MaskGrid { .. } => None,
        }
    }

    pub fn as_mask(&self) -> Option<ForegroundMask> {
        match self {
            DumpEntry::MaskGrid { h, w, bits } => {
                ForegroundMask::from_bits(*h, *w, bits.clone()).ok()
            }
            DumpEntry::Tensor(_) => None,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            DumpEntry::Tensor(t) => t.shape().to_vec(),
            DumpEntry::MaskGrid { h, w, .. } => vec![*h, *w],
        }
    }

    fn payload_len(&self) -> usize {
        match self {
            DumpEntry::Tensor(t) => t.len() * 4,
            DumpEntry::MaskGrid { bits, .. } => bits.len(),
        }
    }
}

/// Serialize named entries. Names must be unique, non-empty, and at most 64
/// bytes; entries land in the payload in the given order.
pub fn dump_tensors(entries: &[(String, DumpEntry)]) -> Result<Vec<u8>> {
    if entries.len() > u16::MAX as usize {
        return Err(Error::Format(format!("too many entries: {}", entries.len())));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut header_len = 8usize;
    for (name, entry) in entries {
        if name.is_empty() || name.len() > MAX_NAME_LEN {
            return Err(Error::Format(format!(
                "entry name must be 1..={MAX_NAME_LEN} bytes: {name:?}"
            )));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate entry name {name:?}")));
        }
        header_len += 2 + name.len() + 1 + 1 + 4 * entry.shape().len() + 8;
    }
    let mut out = Vec::with_capacity(header_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    let mut offset = header_len as u64;
    for (name, entry) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match entry {
            DumpEntry::Tensor(_) => DTYPE_F32,
            DumpEntry::MaskGrid { .. } => DTYPE_U8,
        });
        let shape = entry.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank too large: {}", shape.len())));
        }
        out.push(shape.len() as u8);
        for extent in &shape {
            if *extent > u32::MAX as usize {
                return Err(Error::Format(format!("extent too large: {extent}")));
            }
            out.extend_from_slice(&(*extent as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += entry.payload_len() as u64;
    }
    debug_assert_eq!(out.len(), header_len);
    for (_, entry) in entries {
        match entry {
            DumpEntry::Tensor(t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            DumpEntry::MaskGrid { bits, .. } => out.extend_from_slice(bits),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated while reading {what}: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a CCTF byte buffer back into named entries.
pub fn load_tensors(bytes: &[u8]) -> Result<Vec<(String, DumpEntry)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u16("entry count")? as usize;
    struct RawEntry {
        name: String,
        dtype: u8,
        shape: Vec<usize>,
        offset: u64,
    }
    let mut raw = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("entry {i}: bad name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate entry name {name:?}")));
        }
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
            return Err(Error::Format(format!("entry {name:?}: unknown dtype {dtype}")));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let offset = r.u64("offset")?;
        raw.push(RawEntry {
            name,
            dtype,
            shape,
            offset,
        });
    }
    let header_end = r.pos as u64;
    // payloads must live past the header, inside the file, and not overlap
    let mut spans: Vec<(u64, u64, usize)> = Vec::with_capacity(raw.len());
    for (i, e) in raw.iter().enumerate() {
        let elems: usize = e.shape.iter().product();
        let len = match e.dtype {
            DTYPE_F32 => elems as u64 * 4,
            _ => elems as u64,
        };
        if e.offset < header_end || e.offset + len > bytes.len() as u64 {
            return Err(Error::Format(format!(
                "entry {:?}: payload [{}, {}) outside file of {} bytes",
                e.name,
                e.offset,
                e.offset + len,
                bytes.len()
            )));
        }
        spans.push((e.offset, e.offset + len, i));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[0].1 > pair[1].0 {
            return Err(Error::Format(format!(
                "overlapping payloads for entries {:?} and {:?}",
                raw[pair[0].2].name, raw[pair[1].2].name
            )));
        }
    }
    let mut out = Vec::with_capacity(count);
    for e in raw {
        let elems: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let entry = match e.dtype {
            DTYPE_F32 => {
                let mut data = Vec::with_capacity(elems);
                for c in 0..elems {
                    let b: [u8; 4] = bytes[start + 4 * c..start + 4 * c + 4].try_into().unwrap();
                    data.push(f32::from_bits(u32::from_le_bytes(b)));
                }
                DumpEntry::Tensor(Tensor::new(e.shape, data)?)
            }
            _ => {
                if e.shape.len() != 2 {
                    return Err(Error::Format(format!(
                        "mask entry {:?} must be rank 2, got {:?}",
                        e.name, e.shape
                    )));
                }
                DumpEntry::MaskGrid {
                    h: e.shape[0],
                    w: e.shape[1],
                    bits: bytes[start..start + elems].to_vec(),
                }
            }
        };
        out.push((e.name, entry));
    }
    Ok(out)
}

pub fn write_dump(path: &Path, entries: &[(String, DumpEntry)]) -> Result<()> {
    std::fs::write(path, dump_tensors(entries)?)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<(String, DumpEntry)>> {
    load_tensors(&std::fs::read(path)?)
}

/// Look up one entry by name.
pub fn find<'a>(
    entries: &'a [(String, DumpEntry)],
    name: &str,
) -> Result<&'a DumpEntry> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, e)| e)
        .ok_or_else(|| Error::Format(format!("missing entry {name:?}")))
}
