//! Bitstream container.
//!
//! Layout, all integers big-endian:
//!
//! ```text
//! "ANFC" | version u16 | flags u16 | H u32 | W u32 | lambda index u8 | reserved u8
//! | config hash [8] | len u32, h payload | len u32, z payload | [len u32, x payload]
//! ```

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ANFC";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;

const FLAG_GMM: u16 = 1;
const FLAG_RESIDUAL: u16 = 1 << 1;
const FLAG_VARIABLE_RATE: u16 = 1 << 2;
const KNOWN_FLAGS: u16 = FLAG_GMM | FLAG_RESIDUAL | FLAG_VARIABLE_RATE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub gmm: bool,
    pub residual: bool,
    pub variable_rate: bool,
}

impl Flags {
    pub fn bits(self) -> u16 {
        let mut b = 0;
        if self.gmm {
            b |= FLAG_GMM;
        }
        if self.residual {
            b |= FLAG_RESIDUAL;
        }
        if self.variable_rate {
            b |= FLAG_VARIABLE_RATE;
        }
        b
    }

    pub fn from_bits(bits: u16) -> Result<Self> {
        if bits & !KNOWN_FLAGS != 0 {
            return Err(Error::Bitstream(format!("unknown mode flags {bits:#06x}")));
        }
        Ok(Flags {
            gmm: bits & FLAG_GMM != 0,
            residual: bits & FLAG_RESIDUAL != 0,
            variable_rate: bits & FLAG_VARIABLE_RATE != 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub flags: Flags,
    /// Original image height.
    pub height: u32,
    /// Original image width.
    pub width: u32,
    pub lambda_index: u8,
    pub config_hash: [u8; 8],
    pub h_payload: Vec<u8>,
    pub z_payload: Vec<u8>,
    /// Present exactly when `flags.residual` is set.
    pub x_payload: Option<Vec<u8>>,
}

impl Container {
    pub fn padded_dims(&self) -> (usize, usize) {
        super::padded_dims(self.height as usize, self.width as usize)
    }

    pub fn payload_bytes(&self) -> usize {
        self.h_payload.len() + self.z_payload.len() + self.x_payload.as_ref().map_or(0, Vec::len)
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + 8 + self.payload_bytes() + if self.x_payload.is_some() { 4 } else { 0 }
    }

    /// Bits per pixel of the whole container against the original size.
    pub fn bpp(&self) -> f64 {
        8.0 * self.total_bytes() as f64 / (self.height as f64 * self.width as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.flags.residual != self.x_payload.is_some() {
            return Err(Error::Bitstream(
                "residual flag and x payload disagree".into(),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Bitstream("empty image".into()));
        }
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_be_bytes());
        out.extend_from_slice(&self.flags.bits().to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.push(self.lambda_index);
        out.push(0);
        out.extend_from_slice(&self.config_hash);
        let payloads = [
            Some(&self.h_payload),
            Some(&self.z_payload),
            self.x_payload.as_ref(),
        ];
        for p in payloads.into_iter().flatten() {
            let len = u32::try_from(p.len())
                .map_err(|_| Error::Bitstream("payload exceeds 4 GiB".into()))?;
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Bitstream(format!(
                "version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        let flags = Flags::from_bits(r.u16()?)?;
        let height = r.u32()?;
        let width = r.u32()?;
        if height == 0 || width == 0 {
            return Err(Error::Bitstream("empty image".into()));
        }
        let lambda_index = r.take(1)?[0];
        let _reserved = r.take(1)?;
        let mut config_hash = [0u8; 8];
        config_hash.copy_from_slice(r.take(8)?);
        let h_payload = r.payload()?;
        let z_payload = r.payload()?;
        let x_payload = if flags.residual {
            Some(r.payload()?)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Bitstream(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Container {
            flags,
            height,
            width,
            lambda_index,
            config_hash,
            h_payload,
            z_payload,
            x_payload,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Bitstream(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn payload(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}
