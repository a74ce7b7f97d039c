//! Versioned binary container ("HSCT") for volumes, factor sets, and
//! checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  [4]  = "HSCT"
//! version u32 = major << 16 | minor
//! hlen    u32
//! header  [hlen]   JSON: section table + free-form metadata
//! plen    u64
//! payload [plen]   concatenated section bytes
//! crc     u32      CRC-32 (IEEE) of the payload
//! ```
//!
//! Readers accept any minor version of a known major and reject unknown
//! majors. Round-trips are bit-exact; a corrupted payload byte fails the
//! checksum on read.

use std::fs;
use std::path::Path;

use hscat_core::tensor::DenseGrid;
use serde::{Deserialize, Serialize};

use crate::error::{HscatError, Result};

pub const MAGIC: [u8; 4] = *b"HSCT";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 0;

/// What a section stores, so tools can interpret containers generically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sigma,
    Alpha,
    Mask,
    Vm,
    Sh,
    Param,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionDesc {
    pub name: String,
    pub role: Role,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub sections: Vec<SectionDesc>,
    /// Free-form provenance: seeds, noise parameters, configs.
    pub meta: serde_json::Value,
}

// -- CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320) -------------------

const CRC_TABLE: [u32; 256] = {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
};

pub fn crc32(data: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// -- Writing -----------------------------------------------------------------

/// Staged container under construction: sections appended in order.
#[derive(Debug, Clone)]
pub struct ContainerWriter {
    sections: Vec<SectionDesc>,
    payload: Vec<u8>,
    meta: serde_json::Value,
}

impl ContainerWriter {
    pub fn new(meta: serde_json::Value) -> Self {
        ContainerWriter {
            sections: Vec::new(),
            payload: Vec::new(),
            meta,
        }
    }

    fn push(&mut self, name: &str, role: Role, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) {
        self.sections.push(SectionDesc {
            name: name.to_string(),
            role,
            dtype,
            shape: shape.to_vec(),
            offset: self.payload.len() as u64,
            byte_len: bytes.len() as u64,
        });
        self.payload.extend_from_slice(&bytes);
    }

    /// Append an f32 section (volume data); values are narrowed from f64.
    pub fn add_f32(&mut self, name: &str, role: Role, shape: &[usize], data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &v in data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.push(name, role, Dtype::F32, shape, bytes);
    }

    /// Append an f64 section (checkpoint data); values are stored exactly.
    pub fn add_f64(&mut self, name: &str, role: Role, shape: &[usize], data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for &v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.push(name, role, Dtype::F64, shape, bytes);
    }

    pub fn add_grid(&mut self, name: &str, role: Role, grid: &DenseGrid) {
        self.add_f32(name, role, &grid.shape, &grid.data);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            sections: self.sections.clone(),
            meta: self.meta.clone(),
        };
        let hjson = serde_json::to_vec(&header)
            .map_err(|e| HscatError::Format(format!("header encode: {e}")))?;
        let mut out = Vec::with_capacity(16 + hjson.len() + self.payload.len() + 12);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(((MAJOR as u32) << 16) | MINOR as u32).to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc32(&self.payload).to_le_bytes());
        Ok(out)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| HscatError::io(path, e))
    }
}

// -- Reading -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Container {
    pub major: u16,
    pub minor: u16,
    pub header: Header,
    payload: Vec<u8>,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *at + n {
        return Err(HscatError::Format(format!("truncated before {what}")));
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

impl Container {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(bytes, &mut at, 4, "magic")? != MAGIC {
            return Err(HscatError::Format("bad magic (not an HSCT file)".into()));
        }
        let ver = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
        let (major, minor) = ((ver >> 16) as u16, (ver & 0xFFFF) as u16);
        if major != MAJOR {
            return Err(HscatError::Version {
                major,
                supported: MAJOR,
            });
        }
        let hlen = u32::from_le_bytes(take(bytes, &mut at, 4, "header length")?.try_into().unwrap());
        let hjson = take(bytes, &mut at, hlen as usize, "header")?;
        let header: Header = serde_json::from_slice(hjson)
            .map_err(|e| HscatError::Format(format!("header decode: {e}")))?;
        let plen = u64::from_le_bytes(take(bytes, &mut at, 8, "payload length")?.try_into().unwrap());
        let payload = take(bytes, &mut at, plen as usize, "payload")?.to_vec();
        let stored = u32::from_le_bytes(take(bytes, &mut at, 4, "checksum")?.try_into().unwrap());
        let computed = crc32(&payload);
        if stored != computed {
            return Err(HscatError::Checksum { stored, computed });
        }
        for s in &header.sections {
            let end = s.offset + s.byte_len;
            let expect = s.shape.iter().product::<usize>() * s.dtype.byte_width();
            if end > plen || s.byte_len as usize != expect {
                return Err(HscatError::Format(format!("section {} out of bounds", s.name)));
            }
        }
        Ok(Container {
            major,
            minor,
            header,
            payload,
        })
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HscatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn section(&self, name: &str) -> Result<&SectionDesc> {
        self.header
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| HscatError::Format(format!("missing section {name}")))
    }

    /// Decode a section to f64 values (f32 sections widen exactly).
    pub fn values(&self, sec: &SectionDesc) -> Vec<f64> {
        let bytes = &self.payload[sec.offset as usize..(sec.offset + sec.byte_len) as usize];
        match sec.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }

    /// Load a named 3-D section as a grid.
    pub fn grid(&self, name: &str) -> Result<DenseGrid> {
        let sec = self.section(name)?;
        if sec.shape.len() != 3 {
            return Err(HscatError::Format(format!(
                "section {name} is not a volume (shape {:?})",
                sec.shape
            )));
        }
        let shape = [sec.shape[0], sec.shape[1], sec.shape[2]];
        Ok(DenseGrid {
            shape,
            data: self.values(sec),
        })
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }
}
