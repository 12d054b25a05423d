//! The CFRV volume file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CFRV"
//! 4       1     version = 1
//! 5       1     dtype: 0 = f32 LE intensities, 1 = u8 labels
//! 6       2     reserved (zero)
//! 8       4     H   (u32 LE)
//! 12      4     W
//! 16      4     D
//! 20      4     K   (0 for images)
//! 24      ...   payload, (h, w, d) row-major, d innermost
//! ```

use std::path::Path;

use super::{check_dims, Dims, LabelVolume, Volume3D};
use crate::error::{FormatError, Result};

const MAGIC: &[u8; 4] = b"CFRV";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 24;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Either kind of volume a CFRV file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredVolume {
    Image(Volume3D),
    Labels(LabelVolume),
}

impl StoredVolume {
    pub fn into_image(self) -> Option<Volume3D> {
        match self {
            Self::Image(v) => Some(v),
            Self::Labels(_) => None,
        }
    }

    pub fn into_labels(self) -> Option<LabelVolume> {
        match self {
            Self::Labels(v) => Some(v),
            Self::Image(_) => None,
        }
    }
}

impl From<Volume3D> for StoredVolume {
    fn from(v: Volume3D) -> Self {
        Self::Image(v)
    }
}

impl From<LabelVolume> for StoredVolume {
    fn from(v: LabelVolume) -> Self {
        Self::Labels(v)
    }
}

fn header(dtype: u8, dims: Dims, k: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype, 0, 0]);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&k.to_le_bytes());
    out
}

pub fn encode_volume(vol: &StoredVolume) -> Vec<u8> {
    match vol {
        StoredVolume::Image(v) => {
            let mut out = header(DTYPE_F32, v.dims(), 0);
            out.reserve(v.data().len() * 4);
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
        StoredVolume::Labels(v) => {
            let mut out = header(DTYPE_U8, v.dims(), v.num_classes() as u32);
            out.extend_from_slice(v.data());
            out
        }
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<StoredVolume> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader.into());
    }
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]).into());
    }
    let dtype = bytes[5];
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims: Dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let k = u32_at(20);
    let n = check_dims(dims)?;
    let payload = &bytes[HEADER_LEN..];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(FormatError::UnknownDtype(other).into()),
    };
    let expected = n.checked_mul(elem).ok_or(FormatError::DimsOverflow)?;
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload { expected, found: payload.len() }.into());
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes.into());
    }
    match dtype {
        DTYPE_F32 => {
            if k != 0 {
                return Err(FormatError::ImageWithClasses(k).into());
            }
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(StoredVolume::Image(Volume3D::new(dims, data)?))
        }
        _ => {
            if !(2..=256).contains(&k) {
                return Err(FormatError::BadClassCount(k).into());
            }
            if let Some(&value) = payload.iter().find(|&&v| u32::from(v) >= k) {
                return Err(FormatError::LabelOutOfRange { value, num_classes: k }.into());
            }
            Ok(StoredVolume::Labels(LabelVolume::new(dims, payload.to_vec(), k as usize)?))
        }
    }
}

pub fn write_volume(path: impl AsRef<Path>, vol: &StoredVolume) -> Result<()> {
    std::fs::write(path, encode_volume(vol))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<StoredVolume> {
    decode_volume(&std::fs::read(path)?)
}
