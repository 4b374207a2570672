//! Native volume files: a line-oriented text header followed by a raw
//! little-endian payload.
//!
//! ```text
//! CASCADE-VOLUME 1
//! dims 32 32 32
//! dtype f32
//! spacing 1 1 1
//! modality FLAIR
//! axes IS AP LR
//! end
//! <D*H*W little-endian elements, row-major, width fastest>
//! ```
//!
//! `axes` is optional; every other key is required and appears in this order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{AxisOrder, Dims, Volume, VolumeMeta};

pub const MAGIC: &str = "CASCADE-VOLUME";
pub const FORMAT_VERSION: u32 = 1;

/// Element types that can be stored in a volume file.
pub trait VoxelType: Copy + PartialEq + Default {
    const TAG: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl VoxelType for f32 {
    const TAG: &'static str = "f32";
    const SIZE: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl VoxelType for u8 {
    const TAG: &'static str = "u8";
    const SIZE: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

pub fn encode_volume<T: VoxelType>(vol: &Volume<T>) -> Result<Vec<u8>> {
    let m = &vol.meta;
    if m.modality.is_empty() || m.modality.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!(
            "modality tag {:?} must be a non-empty word",
            m.modality
        )));
    }
    let [d, h, w] = vol.dims();
    let mut header = format!(
        "{MAGIC} {FORMAT_VERSION}\ndims {d} {h} {w}\ndtype {}\nspacing {} {} {}\nmodality {}\n",
        T::TAG,
        m.spacing[0],
        m.spacing[1],
        m.spacing[2],
        m.modality
    );
    if let Some(axes) = m.axes {
        header.push_str(&format!("axes {axes}\n"));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(vol.data().len() * T::SIZE);
    for &v in vol.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode_volume<T: VoxelType>(bytes: &[u8], path: &Path) -> Result<Volume<T>> {
    let malformed = |detail: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        detail,
    };
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("header is not terminated by an `end` line".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| malformed("header is not UTF-8".into()))
    };

    let first = next_line()?;
    let mut magic = first.split_whitespace();
    let tag = magic.next().unwrap_or_default();
    if tag != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: tag.to_string(),
            expected: MAGIC,
        });
    }
    let version: u32 = magic
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| malformed("missing format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(malformed(format!("unsupported format version {version}")));
    }

    let mut dims: Option<[u64; 3]> = None;
    let mut dtype = None;
    let mut spacing = None;
    let mut modality = None;
    let mut axes = None;
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "dims" => {
                let parts: Vec<u64> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| malformed(format!("bad dimension {t:?}"))))
                    .collect::<Result<_>>()?;
                let parts: [u64; 3] = parts
                    .try_into()
                    .map_err(|_| malformed("dims needs three values".into()))?;
                if parts.contains(&0) {
                    return Err(malformed(format!("zero dimension in {parts:?}")));
                }
                dims = Some(parts);
            }
            "dtype" => dtype = Some(value.to_string()),
            "spacing" => {
                let parts: Vec<f32> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| malformed(format!("bad spacing {t:?}"))))
                    .collect::<Result<_>>()?;
                let parts: [f32; 3] = parts
                    .try_into()
                    .map_err(|_| malformed("spacing needs three values".into()))?;
                if parts.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(malformed(format!("spacing must be positive, got {parts:?}")));
                }
                spacing = Some(parts);
            }
            "modality" => modality = Some(value.to_string()),
            "axes" => axes = Some(value.parse::<AxisOrder>().map_err(|e| malformed(e.to_string()))?),
            other => return Err(malformed(format!("unknown header key {other:?}"))),
        }
    }
    let dims = dims.ok_or_else(|| malformed("missing dims".into()))?;
    let dtype = dtype.ok_or_else(|| malformed("missing dtype".into()))?;
    if dtype != T::TAG {
        return Err(malformed(format!("dtype {dtype} where {} was expected", T::TAG)));
    }
    let spacing = spacing.ok_or_else(|| malformed("missing spacing".into()))?;
    let modality = modality
        .filter(|m| !m.is_empty())
        .ok_or_else(|| malformed("missing modality".into()))?;

    let expected = dims
        .iter()
        .try_fold(T::SIZE as u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or_else(|| Error::DimensionOverflow {
            path: path.to_path_buf(),
            dims: dims.to_vec(),
        })?;
    let payload = &bytes[pos..];
    let actual = payload.len() as u64;
    if actual < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(malformed(format!(
            "{} trailing bytes after a {expected}-byte payload",
            actual - expected
        )));
    }
    let data = payload.chunks_exact(T::SIZE).map(T::read_le).collect();
    let dims: Dims = dims.map(|d| d as usize);
    Volume::new(dims, data, VolumeMeta { spacing, modality, axes })
}

pub fn save_volume<T: VoxelType>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(vol)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume<T: VoxelType>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

/// Debug dump: one f32 volume per leading index of `t`, the last three axes
/// taken as (D, H, W). Lower-rank tensors are padded with leading unit axes.
/// Files are `<stem>_<i>.vol` in `dir`, `i` the flattened leading index
/// (for activations, `batch * channels + channel`).
pub fn dump_tensor<T: Scalar>(t: &Tensor<T>, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let shape = t.shape();
    let mut dims = [1usize; 3];
    for (slot, &d) in dims.iter_mut().rev().zip(shape.iter().rev()) {
        *slot = d;
    }
    let vol: usize = dims.iter().product();
    if vol == 0 {
        return Err(Error::invalid(format!("cannot dump an empty tensor of shape {shape:?}")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    t.data()
        .chunks(vol)
        .enumerate()
        .map(|(i, chunk)| {
            let data = chunk.iter().map(|v| v.f64() as f32).collect();
            let meta = VolumeMeta {
                modality: format!("{stem}[{i}]"),
                ..VolumeMeta::default()
            };
            let path = dir.join(format!("{stem}_{i}.vol"));
            save_volume(&Volume::new(dims, data, meta)?, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume<f32> {
        Volume::new(
            [2, 3, 4],
            (0..24).map(|i| i as f32 * 0.37 - 3.0).collect(),
            VolumeMeta {
                spacing: [1.0, 0.9375, 2.5],
                modality: "T1c".into(),
                axes: Some(AxisOrder::DEFAULT),
            },
        )
        .unwrap()
    }

    #[test]
    fn encode_decode_round_trip_is_bit_exact() {
        let v = sample();
        let bytes = encode_volume(&v).unwrap();
        let back: Volume<f32> = decode_volume(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_volume(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let mut bytes = encode_volume(&sample()).unwrap();
        bytes.truncate(bytes.len() - 5);
        match decode_volume::<f32>(&bytes, Path::new("mem")).unwrap_err() {
            Error::Truncated { expected, actual, .. } => {
                assert_eq!(expected, 96);
                assert_eq!(actual, 91);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let text = "CASCADE-VOLUME 1\ndims 0 2 2\ndtype u8\nspacing 1 1 1\nmodality labels\nend\n";
        let err = decode_volume::<u8>(text.as_bytes(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::MalformedHeader { .. }), "{err}");
    }

    #[test]
    fn huge_dimensions_overflow() {
        let text = format!(
            "CASCADE-VOLUME 1\ndims {} {} 8\ndtype f32\nspacing 1 1 1\nmodality T1\nend\n",
            u64::MAX / 2,
            u64::MAX / 2
        );
        let err = decode_volume::<f32>(text.as_bytes(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::DimensionOverflow { .. }), "{err}");
    }

    #[test]
    fn wrong_magic_and_dtype_are_distinct_errors() {
        let err = decode_volume::<u8>(b"NIFTI 1\nend\n", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        let bytes = encode_volume(&sample()).unwrap();
        let err = decode_volume::<u8>(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("dtype f32"), "{err}");
    }
}
