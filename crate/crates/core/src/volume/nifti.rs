//! Read-only NIfTI-1 single-file (`.nii`, `.nii.gz`) support.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::grid::Dims;
use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;

/// Decoded NIfTI voxel data in `(D, H, W) = (nz, ny, nx)` order, with the
/// intensity scaling already applied.
#[derive(Clone, Debug)]
pub struct NiftiData {
    pub dims: Dims,
    /// Millimetres per voxel along `(D, H, W)`.
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
    pub datatype: i16,
}

impl NiftiData {
    pub fn is_integer(&self) -> bool {
        !matches!(self.datatype, 16 | 64)
    }
}

pub fn read(path: &Path) -> Result<NiftiData> {
    let mut bytes = Vec::new();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    if gz {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        file.read_to_end(&mut bytes)
    }
    .map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| match reason {
        ParseError::Malformed(r) => Error::malformed(path, r),
        ParseError::Dtype(code) => Error::UnsupportedDtype(format!("NIfTI datatype {code}")),
        ParseError::Spacing(s) => Error::InvalidSpacing(s),
    })
}

enum ParseError {
    Malformed(String),
    Dtype(i16),
    Spacing([f64; 3]),
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().expect("length checked");
        if !self.little {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.take(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.take(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.take(at))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<NiftiData, ParseError> {
    let bad = |s: &str| ParseError::Malformed(s.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(bad("file shorter than the 348-byte header"));
    }
    let le = Reader {
        bytes,
        little: true,
    };
    let little = match le.i32(0) {
        348 => true,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => false,
        _ => return Err(bad("sizeof_hdr is not 348")),
    };
    let r = Reader { bytes, little };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(bad("two-file NIfTI (.hdr/.img) is not supported")),
        _ => return Err(bad("missing NIfTI-1 magic")),
    }

    let ndim = r.i16(40);
    let dim: Vec<i64> = (0..7).map(|i| r.i16(42 + 2 * i) as i64).collect();
    if !(3..=7).contains(&ndim) {
        return Err(bad("only 3-D volumes are supported"));
    }
    if dim[3..ndim as usize].iter().any(|&d| d != 1) {
        return Err(bad("volumes with more than one frame are not supported"));
    }
    if dim[..3].iter().any(|&d| d < 1) {
        return Err(bad("non-positive dimension"));
    }
    let (nx, ny, nz) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);

    let pix: Vec<f64> = (1..4).map(|i| r.f32(76 + 4 * i) as f64).collect();
    let spacing = [pix[2], pix[1], pix[0]];
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(ParseError::Spacing(spacing));
    }

    let datatype = r.i16(70);
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(ParseError::Dtype(other)),
    };
    let offset = r.f32(108);
    if !(offset >= HEADER_LEN as f32) || offset.fract() != 0.0 {
        return Err(bad("invalid vox_offset"));
    }
    let offset = offset as usize;
    let n = nx * ny * nz;
    let body = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| bad("voxel data truncated"))?;
    let vr = Reader {
        bytes: body,
        little,
    };
    let mut values: Vec<f64> = (0..n)
        .map(|i| {
            let at = i * width;
            match datatype {
                2 => body[at] as f64,
                256 => body[at] as i8 as f64,
                4 => vr.i16(at) as f64,
                512 => vr.i16(at) as u16 as f64,
                8 => vr.i32(at) as f64,
                768 => vr.i32(at) as u32 as f64,
                16 => vr.f32(at) as f64,
                _ => f64::from_le_bytes(vr.take(at)),
            }
        })
        .collect();

    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let scaled = slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0);
    if scaled {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiData {
        dims: [nz, ny, nx],
        spacing,
        values,
        datatype: if scaled { 64 } else { datatype },
    })
}
