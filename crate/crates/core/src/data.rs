//! Scan preprocessing and cohort handling: per-scan standardisation,
//! sagittal reflection and the seeded train/development hold-out split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::morphology::brain_mask;
use crate::volume::{LabelVolume, Modality, MultiModalScan, Volume};

/// Standard deviations below this are treated as zero.
pub const MIN_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizeReport {
    pub mean: [f64; 4],
    pub std: [f64; 4],
    /// modalities whose brain-voxel spread was degenerate, divided by 1
    pub unit_divisor: [bool; 4],
}

/// Per modality: subtract the brain-voxel mean and divide by the brain-voxel
/// standard deviation. Voxels outside the brain mask are left untouched.
pub fn normalize_scan(scan: &MultiModalScan) -> (MultiModalScan, NormalizeReport) {
    let brain = brain_mask(scan);
    let mut out = scan.clone();
    let mut report = NormalizeReport {
        mean: [0.0; 4],
        std: [1.0; 4],
        unit_divisor: [false; 4],
    };
    let n = brain.count();
    if n == 0 {
        return (out, report);
    }
    for (m, vol) in out.modalities_mut().iter_mut().enumerate() {
        let inside = || vol_brain_values(vol, brain.bits());
        let mean = inside().sum::<f64>() / n as f64;
        let var = inside().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let mut std = var.sqrt();
        if std < MIN_STD {
            std = 1.0;
            report.unit_divisor[m] = true;
        }
        for (v, &b) in vol.data_mut().iter_mut().zip(brain.bits()) {
            if b {
                *v = ((f64::from(*v) - mean) / std) as f32;
            }
        }
        report.mean[m] = mean;
        report.std[m] = std;
    }
    (out, report)
}

fn vol_brain_values<'a>(vol: &'a Volume<f32>, brain: &'a [bool]) -> impl Iterator<Item = f64> + 'a {
    vol.data()
        .iter()
        .zip(brain)
        .filter(|(_, &b)| b)
        .map(|(&v, _)| f64::from(v))
}

/// Mirror a volume about the sagittal plane (reverse its left-right axis).
pub fn reflect_volume<T: Copy>(vol: &Volume<T>) -> Result<Volume<T>> {
    let axes = vol.meta.axes.ok_or_else(|| {
        Error::invalid(format!(
            "{} volume declares no axis order; cannot locate the left-right axis",
            vol.meta.modality
        ))
    })?;
    let mut out = vol.clone();
    out.flip_axis(axes.left_right_axis());
    Ok(out)
}

pub fn reflect_labels(labels: &LabelVolume) -> Result<LabelVolume> {
    LabelVolume::new(reflect_volume(labels.volume())?)
}

/// Reflect every modality and the labels jointly.
pub fn reflect_scan(scan: &MultiModalScan) -> Result<MultiModalScan> {
    let reflected = [
        reflect_volume(scan.modality(Modality::T1))?,
        reflect_volume(scan.modality(Modality::T1c))?,
        reflect_volume(scan.modality(Modality::T2))?,
        reflect_volume(scan.modality(Modality::Flair))?,
    ];
    let axes = reflected[0].meta.axes;
    if reflected.iter().any(|v| v.meta.axes != axes) {
        return Err(Error::invalid("modalities declare different axis orders"));
    }
    let labels = scan.labels.as_ref().map(reflect_labels).transpose()?;
    if let Some(l) = &labels {
        if l.meta().axes != axes {
            return Err(Error::invalid("labels and modalities declare different axis orders"));
        }
    }
    MultiModalScan::new(scan.subject_id.clone(), reflected, labels)
}

/// Seeded shuffle, then the first `round(fraction * n)` items train and the
/// rest form the development set. Both sides must be non-empty.
pub fn split_cohort<T: Clone>(subjects: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if subjects.is_empty() {
        return Err(Error::invalid("cannot split an empty cohort"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let n = subjects.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {n} subjects leaves one side of the split empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| subjects[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::merge_labels;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::volume::{VolumeMeta, LABEL_EDEMA};

    fn phantom() -> MultiModalScan {
        generate_phantom(&PhantomSpec::with_seed(5)).unwrap()
    }

    #[test]
    fn normalized_brain_voxels_are_standardized() {
        let scan = phantom();
        let brain = brain_mask(&scan);
        let (norm, report) = normalize_scan(&scan);
        assert!(!report.unit_divisor.contains(&true));
        for vol in norm.modalities() {
            let vals: Vec<f64> = vol_brain_values(vol, brain.bits()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-4, "std {}", var.sqrt());
            for (v, &b) in vol.data().iter().zip(brain.bits()) {
                if !b {
                    assert_eq!(v.to_bits(), 0);
                }
            }
        }
    }

    #[test]
    fn constant_brain_flags_unit_divisor() {
        let dims = [2, 2, 2];
        let mut data = vec![0.0f32; 8];
        data[..4].fill(3.0);
        let vol = Volume::new(dims, data, VolumeMeta::default()).unwrap();
        let scan = MultiModalScan::new("c", [vol.clone(), vol.clone(), vol.clone(), vol], None).unwrap();
        let (norm, report) = normalize_scan(&scan);
        assert_eq!(report.unit_divisor, [true; 4]);
        assert_eq!(&norm.modality(Modality::T2).data()[..4], &[0.0; 4]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let (once, _) = normalize_scan(&phantom());
        let (twice, _) = normalize_scan(&once);
        for (a, b) in once.modalities().iter().zip(twice.modalities()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn reflection_is_an_involution_and_moves_labels_with_modalities() {
        let scan = phantom();
        let r = reflect_scan(&scan).unwrap();
        assert_ne!(r, scan);
        assert_eq!(reflect_scan(&r).unwrap(), scan);

        let [d, h, w] = scan.dims();
        let flair = scan.modality(Modality::Flair);
        let rf = r.modality(Modality::Flair);
        for (z, y, x) in [(3, 4, 0), (d - 1, h - 1, 5), (10, 11, w - 1)] {
            assert_eq!(rf.get(z, y, x), flair.get(z, y, w - 1 - x));
        }

        let labels = scan.labels.as_ref().unwrap();
        let lhs = merge_labels(&reflect_labels(labels).unwrap()).unwrap();
        let rhs = merge_labels(labels).unwrap();
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            let mut mirrored = b.1.to_volume(labels.meta().clone());
            mirrored.flip_axis(2);
            assert_eq!(a.1.to_volume(labels.meta().clone()), mirrored);
        }
    }

    #[test]
    fn reflection_requires_axis_declaration() {
        let mut vol = Volume::filled([2, 2, 2], LABEL_EDEMA, VolumeMeta::default());
        vol.meta.axes = None;
        let err = reflect_volume(&vol).unwrap_err();
        assert!(err.to_string().contains("axis order"));
    }

    #[test]
    fn split_examples() {
        let ids: Vec<u32> = (0..10).collect();
        let (train, dev) = split_cohort(&ids, 0.7, 3).unwrap();
        assert_eq!((train.len(), dev.len()), (7, 3));
        let mut all: Vec<u32> = train.iter().chain(&dev).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);

        assert!(split_cohort(&[1], 0.7, 0).is_err());
        assert!(split_cohort::<u32>(&[], 0.7, 0).is_err());
        assert!(split_cohort(&ids, 1.0, 0).is_err());

        assert_eq!(split_cohort(&ids, 0.7, 3).unwrap(), (train.clone(), dev));
        let differs = (4..20).any(|s| split_cohort(&ids, 0.7, s).unwrap().0 != train);
        assert!(differs);

        let (t8, d8) = split_cohort(&(0..8).collect::<Vec<_>>(), 0.7, 1).unwrap();
        assert_eq!((t8.len(), d8.len()), (6, 2));
    }
}
