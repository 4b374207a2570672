//! Non-learned volumetric operators between the two cascade stages.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::flat3;
use crate::volume::{Dims, LabelVolume, Mask, MultiModalScan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets: 6 shares a face, 18 also an edge, 26 also a corner.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dz, dy, dx].iter().filter(|&&v| v != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Component ids per voxel (0 = background, ids contiguous from 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    dims: Dims,
    labels: Vec<u32>,
    sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Voxel count of component `id` (1-based).
    pub fn size(&self, id: u32) -> usize {
        self.sizes[id as usize - 1]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

/// Breadth-first labelling; ids follow the scan order of each component's
/// first voxel.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> ComponentLabeling {
    let dims = mask.dims();
    let [d, h, w] = dims.map(|v| v as isize);
    let offsets = connectivity.offsets();
    let bits = mask.bits();
    let mut labels = vec![0u32; bits.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = ((i / (dims[1] * dims[2])) as isize, ((i / dims[2]) % dims[1]) as isize, (i % dims[2]) as isize);
            for [dz, dy, dx] in &offsets {
                let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d || ny >= h || nx >= w {
                    continue;
                }
                let j = flat3(dims, nz as usize, ny as usize, nx as usize);
                if bits[j] && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    ComponentLabeling { dims, labels, sizes }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    /// keep components with at least this many voxels
    MinVoxels(usize),
    /// keep only the largest component (lowest id on ties)
    KeepLargest,
}

pub fn filter_small_components(labeling: &ComponentLabeling, policy: FilterPolicy) -> Mask {
    let keep: Vec<bool> = match policy {
        FilterPolicy::MinVoxels(k) => labeling.sizes.iter().map(|&s| s >= k).collect(),
        FilterPolicy::KeepLargest => {
            let mut keep = vec![false; labeling.sizes.len()];
            let mut best: Option<usize> = None;
            for (i, &s) in labeling.sizes.iter().enumerate() {
                if best.is_none_or(|b| s > labeling.sizes[b]) {
                    best = Some(i);
                }
            }
            if let Some(b) = best {
                keep[b] = true;
            }
            keep
        }
    };
    let bits = labeling
        .labels
        .iter()
        .map(|&id| id != 0 && keep[id as usize - 1])
        .collect();
    Mask::new(labeling.dims, bits).expect("labeling dims")
}

/// Axis-aligned box with inclusive corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box3D {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl Box3D {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }

    pub fn rasterize(&self, dims: Dims) -> Mask {
        let mut m = Mask::empty(dims);
        for z in self.min[0]..=self.max[0] {
            for y in self.min[1]..=self.max[1] {
                for x in self.min[2]..=self.max[2] {
                    m.set(z, y, x, true);
                }
            }
        }
        m
    }
}

/// Tightest box around the set voxels, grown by `margin` per side and clipped
/// to the grid. `None` when the mask is empty.
pub fn bounding_box(mask: &Mask, margin: usize) -> Option<Box3D> {
    let mut points = mask.points();
    let first = points.next()?;
    let (mut lo, mut hi) = (first, first);
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let dims = mask.dims();
    Some(Box3D {
        min: [0, 1, 2].map(|a| lo[a].saturating_sub(margin)),
        max: [0, 1, 2].map(|a| (hi[a] + margin).min(dims[a] - 1)),
    })
}

/// Rasterised box around the ground-truth whole tumor (labels 1, 2, 4).
pub fn gt_tumor_box(labels: &LabelVolume, margin: usize) -> Result<(Box3D, Mask)> {
    let wt = labels.indicator(&[1, 2, 4]);
    let b = bounding_box(&wt, margin).ok_or(Error::NoTumor)?;
    Ok((b, b.rasterize(labels.dims())))
}

/// Brain support of a skull-stripped scan: voxels where any modality is nonzero.
pub fn brain_mask(scan: &MultiModalScan) -> Mask {
    let n = scan.modalities()[0].data().len();
    let bits = (0..n)
        .map(|i| scan.modalities().iter().any(|v| v.data()[i] != 0.0))
        .collect();
    Mask::new(scan.dims(), bits).expect("scan dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Volume, VolumeMeta};

    #[test]
    fn offsets_have_expected_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn solid_cube_is_one_component() {
        let mut m = Mask::empty([6, 6, 6]);
        for z in 1..4 {
            for y in 2..5 {
                for x in 0..3 {
                    m.set(z, y, x, true);
                }
            }
        }
        for c in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            let l = connected_components(&m, c);
            assert_eq!(l.sizes(), &[27]);
        }
    }

    #[test]
    fn corner_contact_depends_on_connectivity() {
        let mut m = Mask::empty([3, 3, 3]);
        m.set(0, 0, 0, true);
        m.set(1, 1, 1, true);
        assert_eq!(connected_components(&m, Connectivity::Six).count(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).count(), 2);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count(), 1);

        let mut e = Mask::empty([3, 3, 3]);
        e.set(0, 0, 0, true);
        e.set(0, 1, 1, true);
        assert_eq!(connected_components(&e, Connectivity::Six).count(), 2);
        assert_eq!(connected_components(&e, Connectivity::Eighteen).count(), 1);
    }

    fn two_blobs() -> Mask {
        let mut m = Mask::empty([10, 10, 10]);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..4 {
                    m.set(z, y, x, true);
                }
            }
        }
        m.set(9, 9, 7, true);
        m.set(9, 9, 8, true);
        m.set(9, 9, 9, true);
        m
    }

    #[test]
    fn min_voxels_drops_small_components() {
        let m = two_blobs();
        let l = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(l.sizes(), &[100, 3]);
        let kept = filter_small_components(&l, FilterPolicy::MinVoxels(10));
        assert_eq!(kept.count(), 100);
        assert!(!kept.get(9, 9, 9));
        assert_eq!(filter_small_components(&l, FilterPolicy::MinVoxels(1)), m);
        assert_eq!(filter_small_components(&l, FilterPolicy::KeepLargest).count(), 100);
    }

    #[test]
    fn keep_largest_is_identity_on_single_component_and_breaks_ties_low() {
        let mut m = Mask::empty([4, 4, 4]);
        m.set(1, 1, 1, true);
        m.set(1, 1, 2, true);
        let l = connected_components(&m, Connectivity::Six);
        assert_eq!(filter_small_components(&l, FilterPolicy::KeepLargest), m);

        let mut t = Mask::empty([4, 4, 4]);
        t.set(0, 0, 0, true);
        t.set(3, 3, 3, true);
        let l = connected_components(&t, Connectivity::Six);
        let kept = filter_small_components(&l, FilterPolicy::KeepLargest);
        assert!(kept.get(0, 0, 0) && !kept.get(3, 3, 3));

        let empty = connected_components(&Mask::empty([2, 2, 2]), Connectivity::Six);
        assert!(filter_small_components(&empty, FilterPolicy::KeepLargest).is_empty());
    }

    #[test]
    fn bounding_box_examples() {
        let mut m = Mask::empty([10, 10, 10]);
        m.set(2, 3, 4, true);
        assert_eq!(bounding_box(&m, 0), Some(Box3D { min: [2, 3, 4], max: [2, 3, 4] }));

        let mut m = Mask::empty([10, 10, 10]);
        m.set(0, 0, 0, true);
        m.set(5, 2, 7, true);
        assert_eq!(bounding_box(&m, 0), Some(Box3D { min: [0, 0, 0], max: [5, 2, 7] }));

        let mut m = Mask::empty([10, 10, 10]);
        m.set(0, 0, 0, true);
        assert_eq!(bounding_box(&m, 2), Some(Box3D { min: [0, 0, 0], max: [2, 2, 2] }));

        assert_eq!(bounding_box(&Mask::empty([3, 3, 3]), 1), None);

        let b = Box3D { min: [1, 0, 2], max: [2, 1, 2] };
        let r = b.rasterize([4, 4, 4]);
        assert_eq!(r.count(), 4);
        assert!(r.get(2, 1, 2) && !r.get(0, 0, 2));
    }

    #[test]
    fn gt_box_examples() {
        let mut data = vec![0u8; 1000];
        data[flat3([10, 10, 10], 4, 4, 4)] = 2;
        let l = LabelVolume::from_vec([10, 10, 10], data.clone()).unwrap();
        let (b, m) = gt_tumor_box(&l, 0).unwrap();
        assert_eq!(b, Box3D { min: [4, 4, 4], max: [4, 4, 4] });
        assert_eq!(m.count(), 1);

        data[flat3([10, 10, 10], 1, 6, 5)] = 1;
        data[flat3([10, 10, 10], 7, 2, 8)] = 4;
        let l = LabelVolume::from_vec([10, 10, 10], data).unwrap();
        let (b, _) = gt_tumor_box(&l, 0).unwrap();
        assert_eq!(b, Box3D { min: [1, 2, 4], max: [7, 6, 8] });

        let bg = LabelVolume::from_vec([2, 2, 2], vec![0; 8]).unwrap();
        assert!(matches!(gt_tumor_box(&bg, 0), Err(Error::NoTumor)));
    }

    #[test]
    fn brain_mask_examples() {
        let zero = Volume::filled([2, 2, 2], 0.0f32, VolumeMeta::default());
        let scan = MultiModalScan::new("z", [zero.clone(), zero.clone(), zero.clone(), zero.clone()], None).unwrap();
        assert!(brain_mask(&scan).is_empty());

        let mut t2 = zero.clone();
        t2.set(1, 0, 1, -0.5);
        let scan2 = MultiModalScan::new("z", [zero.clone(), zero.clone(), t2.clone(), zero.clone()], None).unwrap();
        let mut flair = zero.clone();
        flair.set(0, 0, 0, 2.0);
        let scan3 = MultiModalScan::new("z", [zero.clone(), zero.clone(), t2, flair], None).unwrap();
        let (m2, m3) = (brain_mask(&scan2), brain_mask(&scan3));
        assert_eq!(m2.count(), 1);
        assert!(m2.is_subset_of(&m3));
        assert_eq!(m3.count(), 2);
    }
}
