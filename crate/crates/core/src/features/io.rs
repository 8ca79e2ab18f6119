//! The `.frtm` feature file: a 24-byte little-endian header followed by planar `f32` data.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FRTM"
//!      4     4  version (1)
//!      8     4  height
//!     12     4  width
//!     16     4  channels
//!     20     4  stride
//!     24   4*n  values, channel-major, n = height * width * channels
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{FrtmError, Result};
use crate::tensor::FeatureMap;

pub const MAGIC: [u8; 4] = *b"FRTM";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub stride: u32,
}

impl FeatureFileHeader {
    pub fn payload_len(&self) -> usize {
        (self.height as usize)
            .saturating_mul(self.width as usize)
            .saturating_mul(self.channels as usize)
            .saturating_mul(4)
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        let fields = [FORMAT_VERSION, self.height, self.width, self.channels, self.stride];
        for (i, f) in fields.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(FrtmError::TruncatedHeader { field: "magic" });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if magic != MAGIC {
            return Err(FrtmError::BadMagic { found: magic });
        }
        let field = |i: usize, name: &'static str| -> Result<u32> {
            let at = 4 + 4 * i;
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
                .ok_or(FrtmError::TruncatedHeader { field: name })
        };
        let version = field(0, "version")?;
        if version != FORMAT_VERSION {
            return Err(FrtmError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header = Self {
            height: field(1, "height")?,
            width: field(2, "width")?,
            channels: field(3, "channels")?,
            stride: field(4, "stride")?,
        };
        if header.stride == 0 {
            return Err(FrtmError::InvalidHeader { field: "stride", reason: "must be >= 1".into() });
        }
        Ok(header)
    }
}

fn header_of(fm: &FeatureMap) -> Result<FeatureFileHeader> {
    let narrow = |v: usize, field: &'static str| {
        u32::try_from(v).map_err(|_| FrtmError::InvalidHeader { field, reason: format!("{v} exceeds u32") })
    };
    Ok(FeatureFileHeader {
        height: narrow(fm.height(), "height")?,
        width: narrow(fm.width(), "width")?,
        channels: narrow(fm.channels(), "channels")?,
        stride: narrow(fm.stride(), "stride")?,
    })
}

pub fn encode_feature_map(fm: &FeatureMap) -> Result<Vec<u8>> {
    let header = header_of(fm)?;
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    out.extend_from_slice(&header.encode());
    for v in fm.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let header = FeatureFileHeader::decode(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(FrtmError::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(FrtmError::InvalidHeader {
            field: "payload",
            reason: format!("{} trailing bytes after {expected}", payload.len() - expected),
        });
    }
    let data: Vec<f32> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    FeatureMap::new(
        header.height as usize,
        header.width as usize,
        header.channels as usize,
        header.stride as usize,
        data,
    )
}

pub fn write_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    let header = header_of(fm)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&header.encode())?;
    for v in fm.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    if !path.exists() {
        return Err(FrtmError::MissingInput(path.to_path_buf()));
    }
    decode_feature_map(&fs::read(path)?)
}

/// `00042.frtm` for frame 42.
pub fn feature_file_name(frame_index: usize) -> String {
    format!("{frame_index:05}.frtm")
}
