//! Scalar volumes, label volumes and binary masks on a `[D, H, W]` grid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::flat3;

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

/// Anatomical direction spanned by one array axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnatomicalAxis {
    /// left-right; reflecting it is a reflection about the sagittal plane
    LeftRight,
    AnteriorPosterior,
    InferiorSuperior,
}

impl AnatomicalAxis {
    fn token(self) -> &'static str {
        match self {
            AnatomicalAxis::LeftRight => "LR",
            AnatomicalAxis::AnteriorPosterior => "AP",
            AnatomicalAxis::InferiorSuperior => "IS",
        }
    }
}

/// Which anatomical axis each array axis `(D, H, W)` runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AxisOrder(pub [AnatomicalAxis; 3]);

impl AxisOrder {
    /// Depth inferior-superior, height anterior-posterior, width left-right.
    pub const DEFAULT: AxisOrder = AxisOrder([
        AnatomicalAxis::InferiorSuperior,
        AnatomicalAxis::AnteriorPosterior,
        AnatomicalAxis::LeftRight,
    ]);

    pub fn left_right_axis(&self) -> usize {
        self.0
            .iter()
            .position(|&a| a == AnatomicalAxis::LeftRight)
            .expect("validated axis order has a left-right axis")
    }
}

impl fmt::Display for AxisOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.0[0].token(), self.0[1].token(), self.0[2].token())
    }
}

impl FromStr for AxisOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parsed: Vec<AnatomicalAxis> = s
            .split_whitespace()
            .map(|t| match t {
                "LR" => Ok(AnatomicalAxis::LeftRight),
                "AP" => Ok(AnatomicalAxis::AnteriorPosterior),
                "IS" => Ok(AnatomicalAxis::InferiorSuperior),
                other => Err(Error::invalid(format!("unknown axis token {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let axes: [AnatomicalAxis; 3] = parsed
            .try_into()
            .map_err(|_| Error::invalid(format!("axis order needs three tokens, got {s:?}")))?;
        if axes[0] == axes[1] || axes[1] == axes[2] || axes[0] == axes[2] {
            return Err(Error::invalid(format!("axis order repeats an axis: {s:?}")));
        }
        Ok(AxisOrder(axes))
    }
}

/// Header-level description shared by every volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMeta {
    /// millimetres per voxel along (D, H, W)
    pub spacing: [f32; 3],
    pub modality: String,
    pub axes: Option<AxisOrder>,
}

impl Default for VolumeMeta {
    fn default() -> Self {
        Self {
            spacing: [1.0; 3],
            modality: "none".into(),
            axes: Some(AxisOrder::DEFAULT),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    data: Vec<T>,
    pub meta: VolumeMeta,
}

impl<T: Copy> Volume<T> {
    pub fn new(dims: Dims, data: Vec<T>, meta: VolumeMeta) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        if voxel_count(dims) != data.len() {
            return Err(Error::shape(
                "volume",
                format!("dims {dims:?} need {} voxels, got {}", voxel_count(dims), data.len()),
            ));
        }
        Ok(Self { dims, data, meta })
    }

    pub fn filled(dims: Dims, value: T, meta: VolumeMeta) -> Self {
        Self {
            dims,
            data: vec![value; voxel_count(dims)],
            meta,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> T {
        self.data[flat3(self.dims, d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, v: T) {
        let i = flat3(self.dims, d, h, w);
        self.data[i] = v;
    }

    /// Reverses array axis `axis` in place.
    pub fn flip_axis(&mut self, axis: usize) {
        let [d, h, w] = self.dims;
        let src = self.data.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (mut sz, mut sy, mut sx) = (z, y, x);
                    match axis {
                        0 => sz = d - 1 - z,
                        1 => sy = h - 1 - y,
                        _ => sx = w - 1 - x,
                    }
                    self.data[flat3(self.dims, z, y, x)] = src[flat3(self.dims, sz, sy, sx)];
                }
            }
        }
    }
}

/// BraTS label values.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NECROTIC: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 4;

pub fn is_valid_label(v: u8) -> bool {
    matches!(v, 0 | 1 | 2 | 4)
}

/// Voxel labels restricted to `{0, 1, 2, 4}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume(Volume<u8>);

impl LabelVolume {
    pub fn new(vol: Volume<u8>) -> Result<Self> {
        if let Some(bad) = vol.data().iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::invalid(format!("label value {bad} is not one of 0, 1, 2, 4")));
        }
        Ok(Self(vol))
    }

    pub fn from_vec(dims: Dims, data: Vec<u8>) -> Result<Self> {
        Self::new(Volume::new(dims, data, VolumeMeta { modality: "labels".into(), ..Default::default() })?)
    }

    pub fn background(dims: Dims, meta: VolumeMeta) -> Self {
        Self(Volume::filled(dims, LABEL_BACKGROUND, meta))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    pub fn data(&self) -> &[u8] {
        self.0.data()
    }

    pub fn volume(&self) -> &Volume<u8> {
        &self.0
    }

    pub fn into_volume(self) -> Volume<u8> {
        self.0
    }

    pub fn meta(&self) -> &VolumeMeta {
        &self.0.meta
    }

    /// Indicator of `label ∈ set`.
    pub fn indicator(&self, set: &[u8]) -> Mask {
        Mask {
            dims: self.dims(),
            bits: self.data().iter().map(|v| set.contains(v)).collect(),
        }
    }
}

/// Binary voxel mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if voxel_count(dims) != bits.len() {
            return Err(Error::shape(
                "mask",
                format!("dims {dims:?} need {} voxels, got {}", voxel_count(dims), bits.len()),
            ));
        }
        Ok(Self { dims, bits })
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![false; voxel_count(dims)],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![true; voxel_count(dims)],
        }
    }

    /// From a `{0, 1}` byte volume; any other value is rejected.
    pub fn from_binary(dims: Dims, values: &[u8]) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not binary")));
        }
        Self::new(dims, values.iter().map(|&v| v == 1).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.bits[flat3(self.dims, d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, v: bool) {
        let i = flat3(self.dims, d, h, w);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims, other.dims);
        Mask {
            dims: self.dims,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn not(&self) -> Mask {
        Mask {
            dims: self.dims,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_volume(&self, meta: VolumeMeta) -> Volume<u8> {
        Volume {
            dims: self.dims,
            data: self.bits.iter().map(|&b| u8::from(b)).collect(),
            meta,
        }
    }

    /// Coordinates of set voxels in scan order.
    pub fn points(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [_, h, w] = self.dims;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| [i / (h * w), (i / w) % h, i % w])
    }
}

/// The four MRI modalities in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    T1c,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1c, Modality::T2, Modality::Flair];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

/// Four co-registered modalities plus optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalScan {
    pub subject_id: String,
    modalities: [Volume<f32>; 4],
    pub labels: Option<LabelVolume>,
}

impl MultiModalScan {
    pub fn new(
        subject_id: impl Into<String>,
        modalities: [Volume<f32>; 4],
        labels: Option<LabelVolume>,
    ) -> Result<Self> {
        let dims = modalities[0].dims();
        let spacing = modalities[0].meta.spacing;
        for (m, vol) in Modality::ALL.iter().zip(&modalities) {
            if vol.dims() != dims || vol.meta.spacing != spacing {
                return Err(Error::shape(
                    "scan",
                    format!(
                        "{} has dims {:?} spacing {:?}, T1 has {dims:?} {spacing:?}",
                        m.tag(),
                        vol.dims(),
                        vol.meta.spacing
                    ),
                ));
            }
        }
        if let Some(l) = &labels {
            if l.dims() != dims {
                return Err(Error::shape(
                    "scan",
                    format!("labels have dims {:?}, modalities {dims:?}", l.dims()),
                ));
            }
        }
        Ok(Self {
            subject_id: subject_id.into(),
            modalities,
            labels,
        })
    }

    pub fn dims(&self) -> Dims {
        self.modalities[0].dims()
    }

    pub fn modality(&self, m: Modality) -> &Volume<f32> {
        &self.modalities[m.channel()]
    }

    pub fn modalities(&self) -> &[Volume<f32>; 4] {
        &self.modalities
    }

    pub(crate) fn modalities_mut(&mut self) -> &mut [Volume<f32>; 4] {
        &mut self.modalities
    }

    /// The scan as a `[1, 4, D, H, W]` network input.
    pub fn to_tensor<T: crate::tensor::Scalar>(&self) -> crate::tensor::Tensor<T> {
        let [d, h, w] = self.dims();
        let data = self
            .modalities
            .iter()
            .flat_map(|v| v.data().iter().map(|&x| T::of(f64::from(x))))
            .collect();
        crate::tensor::Tensor::from_vec(&[1, 4, d, h, w], data).expect("four aligned volumes")
    }
}
