//! Import of uncompressed single-file NIfTI-1 (`.nii`) volumes.
//!
//! Only the fields needed to place voxels on the grid are honoured: `dim`,
//! `datatype`, `pixdim` and `vox_offset`. NIfTI stores x fastest, so the
//! imported grid is `(z, y, x)` with x as the left-right axis.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{AxisOrder, Volume, VolumeMeta};

const HEADER_SIZE: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug)]
pub struct NiftiImport {
    pub volume: Volume<f32>,
    /// Header content that was present but not applied.
    pub notices: Vec<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().expect("4 bytes");
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

pub fn import_nifti(path: impl AsRef<Path>) -> Result<NiftiImport> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes, path)
}

pub fn parse_nifti(bytes: &[u8], path: &Path) -> Result<NiftiImport> {
    let malformed = |detail: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::Compressed {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_SIZE as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic = &bytes[344..348];
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(magic).trim_end_matches('\0').to_string(),
            expected: "n+1",
        });
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let big_endian = match size_le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) == 348 => true,
        other => return Err(malformed(format!("sizeof_hdr is {other}, expected 348"))),
    };
    let r = Reader { bytes, big_endian };

    let mut notices = Vec::new();
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(malformed(format!("dim[0] = {ndim} outside 1..=7")));
    }
    let mut extent = [1usize; 3];
    for (i, e) in extent.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let d = r.i16(42 + 2 * i);
        if d <= 0 {
            return Err(malformed(format!("dim[{}] = {d} is not positive", i + 1)));
        }
        *e = d as usize;
    }
    for i in 4..=ndim as usize {
        let d = r.i16(40 + 2 * i);
        if d > 1 {
            return Err(Error::Unsupported(format!(
                "{}: dim[{i}] = {d}; only single 3-D volumes can be imported",
                path.display()
            )));
        }
    }

    let datatype = r.i16(70);
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        code => {
            return Err(Error::UnsupportedDatatype {
                path: path.to_path_buf(),
                code,
            })
        }
    };

    let mut spacing = [1.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * i).abs();
        if p.is_finite() && p > 0.0 {
            *s = p;
        }
    }
    let (slope, inter) = (r.f32(112), r.f32(116));
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        notices.push(format!("scl_slope={slope} scl_inter={inter} not applied"));
    }
    let (qform, sform) = (r.i16(252), r.i16(254));
    if qform > 0 || sform > 0 {
        notices.push("qform/sform orientation ignored; axes assumed x=LR, y=AP, z=IS".into());
    }

    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(malformed(format!("vox_offset {vox_offset} precedes the header end")));
    }
    let start = vox_offset as usize;
    if start > HEADER_SIZE + 4 {
        notices.push(format!("{} bytes of header extensions skipped", start - HEADER_SIZE - 4));
    }
    let [nx, ny, nz] = extent;
    let count = nx * ny * nz;
    let expected = (count * elem) as u64;
    let available = bytes.len().saturating_sub(start) as u64;
    if available < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: available,
        });
    }
    let payload = &bytes[start..start + count * elem];
    let data: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&v| f32::from(v)).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                f32::from(if big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) })
            })
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().expect("4 bytes");
                if big_endian {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            })
            .collect(),
    };
    let volume = Volume::new(
        [nz, ny, nx],
        data,
        VolumeMeta {
            spacing: [spacing[2], spacing[1], spacing[0]],
            modality: "nifti".into(),
            axes: Some(AxisOrder::DEFAULT),
        },
    )?;
    Ok(NiftiImport { volume, notices })
}
