//! The `VSEG` volume container.
//!
//! Layout, all little-endian: magic `VSEG` | version u16 | dtype u8 |
//! ndim u8 | dims u32 × ndim | spacing f32 × 3 | C-order payload.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, IxDyn};

use super::VolumePair;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"VSEG";
pub const VERSION: u16 = 1;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    U8 = 2,
    I32 = 3,
}

impl Dtype {
    fn from_code(code: u8) -> std::result::Result<Self, FormatError> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U8),
            3 => Ok(Dtype::I32),
            c => Err(FormatError::UnknownDtype(c)),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 | Dtype::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    I32(ArrayD<i32>),
}

impl VolumeData {
    pub fn dtype(&self) -> Dtype {
        match self {
            VolumeData::F32(_) => Dtype::F32,
            VolumeData::U8(_) => Dtype::U8,
            VolumeData::I32(_) => Dtype::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            VolumeData::F32(a) => a.shape(),
            VolumeData::U8(a) => a.shape(),
            VolumeData::I32(a) => a.shape(),
        }
    }
}

/// One array plus voxel spacing, as stored in a single file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub data: VolumeData,
    pub spacing: [f32; 3],
}

pub fn encode(vol: &RawVolume) -> Result<Vec<u8>> {
    let shape = vol.data.shape();
    if shape.is_empty() || shape.len() > MAX_NDIM || shape.contains(&0) {
        return Err(Error::contract(format!("cannot encode array of shape {shape:?}")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(vol.data.dtype() as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::contract(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in vol.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match &vol.data {
        VolumeData::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        VolumeData::U8(a) => out.extend(a.iter()),
        VolumeData::I32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::InvalidHeader(format!(
                "header ends at byte {} of a {}-byte file",
                self.pos + n,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<RawVolume, FormatError> {
    if bytes.len() < 4 {
        let mut m = [0u8; 4];
        m[..bytes.len()].copy_from_slice(bytes);
        return Err(FormatError::BadMagic(m));
    }
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(c.take(1)?[0])?;
    let ndim = c.take(1)?[0] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(FormatError::InvalidHeader(format!("ndim {ndim} outside [1, {MAX_NDIM}]")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(FormatError::InvalidHeader("zero-length dimension".into()));
        }
        shape.push(d);
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = f32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
        if !(s.is_finite() && *s > 0.0) {
            return Err(FormatError::InvalidHeader(format!("non-positive spacing {s}")));
        }
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| FormatError::InvalidHeader(format!("dims {shape:?} overflow")))?;
    let payload = &bytes[c.pos..];
    if payload.len() < count {
        return Err(FormatError::Truncated {
            expected: count,
            found: payload.len(),
        });
    }
    if payload.len() > count {
        return Err(FormatError::TrailingBytes(payload.len() - count));
    }
    let dim = IxDyn(&shape);
    let data = match dtype {
        Dtype::U8 => VolumeData::U8(ArrayD::from_shape_vec(dim, payload.to_vec()).expect("sized")),
        Dtype::F32 => VolumeData::F32(
            ArrayD::from_shape_vec(
                dim,
                payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect(),
            )
            .expect("sized"),
        ),
        Dtype::I32 => VolumeData::I32(
            ArrayD::from_shape_vec(
                dim,
                payload.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().expect("4"))).collect(),
            )
            .expect("sized"),
        ),
    };
    Ok(RawVolume { data, spacing })
}

pub fn read_raw(path: &Path) -> Result<RawVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

pub fn write_raw(vol: &RawVolume, path: &Path) -> Result<()> {
    let bytes = encode(vol)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, msg: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        kind: FormatError::InvalidHeader(msg),
    }
}

/// Reads a `(C, H, W, D)` f32 image.
pub fn read_image(path: &Path) -> Result<(Array4<f32>, [f32; 3])> {
    let raw = read_raw(path)?;
    match raw.data {
        VolumeData::F32(a) if a.ndim() == 4 => {
            Ok((a.into_dimensionality().expect("ndim checked"), raw.spacing))
        }
        other => Err(format_err(
            path,
            format!("expected 4-d f32 image, found {:?} {:?}", other.dtype(), other.shape()),
        )),
    }
}

/// Reads an `(H, W, D)` label volume stored as u8 or i32.
pub fn read_label(path: &Path) -> Result<(Array3<u8>, [f32; 3])> {
    let raw = read_raw(path)?;
    let labels = match raw.data {
        VolumeData::U8(a) if a.ndim() == 3 => a,
        VolumeData::I32(a) if a.ndim() == 3 => {
            if let Some(bad) = a.iter().find(|&&v| !(0..=u8::MAX as i32).contains(&v)) {
                return Err(format_err(path, format!("label value {bad} out of range")));
            }
            a.mapv(|v| v as u8)
        }
        other => {
            return Err(format_err(
                path,
                format!("expected 3-d integer labels, found {:?} {:?}", other.dtype(), other.shape()),
            ))
        }
    };
    Ok((labels.into_dimensionality().expect("ndim checked"), raw.spacing))
}

pub fn read_pair(image_path: &Path, label_path: &Path) -> Result<VolumePair> {
    let (image, spacing) = read_image(image_path)?;
    let (label, label_spacing) = read_label(label_path)?;
    if spacing != label_spacing {
        return Err(format_err(
            label_path,
            format!("spacing {label_spacing:?} differs from image spacing {spacing:?}"),
        ));
    }
    VolumePair::new(image, label, spacing)
}

pub fn write_pair(pair: &VolumePair, image_path: &Path, label_path: &Path) -> Result<()> {
    write_raw(
        &RawVolume {
            data: VolumeData::F32(pair.image.clone().into_dyn()),
            spacing: pair.spacing,
        },
        image_path,
    )?;
    write_raw(
        &RawVolume {
            data: VolumeData::U8(pair.label.clone().into_dyn()),
            spacing: pair.spacing,
        },
        label_path,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RawVolume {
        RawVolume {
            data: VolumeData::I32(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| i[0] as i32 - i[2] as i32)),
            spacing: [1.0, 0.5, 2.0],
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = sample();
        assert_eq!(decode(&encode(&v).unwrap()).unwrap(), v);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"VSEG");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 3);
        assert_eq!(bytes[7], 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 8 + 3 * 4 + 3 * 4 + 24 * 4);
    }

    #[test]
    fn each_corruption_has_its_own_error() {
        let good = encode(&sample()).unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(FormatError::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(decode(&b), Err(FormatError::UnsupportedVersion(9))));
        let mut b = good.clone();
        b[6] = 7;
        assert_eq!(decode(&b), Err(FormatError::UnknownDtype(7)));
        let mut b = good.clone();
        b[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&b), Err(FormatError::InvalidHeader(_))));
        assert!(matches!(
            decode(&good[..good.len() - 3]),
            Err(FormatError::Truncated { found, .. }) if found == 93
        ));
        let mut b = good.clone();
        b.push(0);
        assert_eq!(decode(&b), Err(FormatError::TrailingBytes(1)));
        assert!(matches!(decode(&good[..10]), Err(FormatError::InvalidHeader(_))));
        assert!(matches!(decode(b"VS"), Err(FormatError::BadMagic(_))));
    }
}
