//! Browser-independent state behind the demo page.

use cascade_core::metrics::{evaluate_case, merge_labels, CasePair, Region};
use cascade_core::morphology::{bounding_box, connected_components, filter_small_components, Box3D, Connectivity, FilterPolicy};
use cascade_core::phantom::{generate_phantom, PhantomSpec};
use cascade_core::volume::{LabelVolume, Mask, Modality, MultiModalScan};
use cascade_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYER_LABELS: u32 = 1;
pub const LAYER_DETECTION: u32 = 2;
pub const LAYER_ROI: u32 = 4;
pub const LAYER_PREDICTION: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RoiSummary {
    pub detected: usize,
    pub components: usize,
    pub kept: usize,
    /// kept tumor voxels over all tumor voxels
    pub tumor_recall: f64,
    pub roi: Option<Box3D>,
}

pub struct Demo {
    pub scan: MultiModalScan,
    labels: LabelVolume,
    detection: Mask,
    kept: Mask,
    roi: Option<Box3D>,
    prediction: LabelVolume,
}

impl Demo {
    pub fn new(seed: u64) -> Result<Self> {
        let scan = generate_phantom(&PhantomSpec::with_seed(seed))?;
        let labels = scan.labels.clone().expect("phantoms carry labels");
        let empty = Mask::empty(scan.dims());
        Ok(Self {
            detection: empty.clone(),
            kept: empty,
            roi: None,
            prediction: labels.clone(),
            labels,
            scan,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.scan.dims()
    }

    /// Fake detector output (ground-truth whole tumor, each voxel dropped with
    /// probability `miss`, plus background speckle at density `speckle`), then
    /// the cascade's component filter and box.
    pub fn roi_preview(&mut self, seed: u64, speckle: f64, miss: f64, min_voxels: usize, margin: usize) -> RoiSummary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wt = self.labels.indicator(&[1, 2, 4]);
        let bits = wt
            .bits()
            .iter()
            .map(|&t| if t { !rng.random_bool(miss.clamp(0.0, 1.0)) } else { rng.random_bool(speckle.clamp(0.0, 1.0)) })
            .collect();
        self.detection = Mask::new(self.dims(), bits).expect("same dims");
        let cc = connected_components(&self.detection, Connectivity::TwentySix);
        let policy = if min_voxels == 0 { FilterPolicy::KeepLargest } else { FilterPolicy::MinVoxels(min_voxels) };
        self.kept = filter_small_components(&cc, policy);
        self.roi = bounding_box(&self.kept, margin);
        let total = wt.count().max(1);
        RoiSummary {
            detected: self.detection.count(),
            components: cc.count(),
            kept: self.kept.count(),
            tumor_recall: self.kept.and(&wt).count() as f64 / total as f64,
            roi: self.roi,
        }
    }

    /// Score the ground truth moved by `shift` voxels (zero fill) against itself:
    /// dice ET, WT, TC then hausdorff ET, WT, TC (NaN when undefined).
    pub fn shifted_metrics(&mut self, shift: [i32; 3]) -> Result<Vec<f64>> {
        self.prediction = shift_labels(&self.labels, shift)?;
        let records = evaluate_case(
            &CasePair {
                subject_id: "demo",
                pred: &self.prediction,
                gt: &self.labels,
            },
            None,
        )?;
        let get = |r: Region| records.iter().find(|x| x.region == r).expect("all regions scored");
        let mut out: Vec<f64> = Region::ALL.iter().map(|&r| get(r).dice).collect();
        out.extend(Region::ALL.iter().map(|&r| get(r).hausdorff.unwrap_or(f64::NAN)));
        Ok(out)
    }

    /// RGBA pixels (row-major, `h * w * 4`) of axial slice `z`.
    pub fn render(&self, modality: Modality, z: usize, layers: u32) -> Vec<u8> {
        let [d, h, w] = self.dims();
        let z = z.min(d - 1);
        let vol = self.scan.modality(modality);
        let (lo, hi) = vol.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let pred_wt = merge_labels(&self.prediction).map(|m| m.wt).ok();
        let mut px = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let g = ((vol.get(z, y, x) - lo) * scale) as u8;
                let mut rgb = [g as f32; 3];
                let mut tint = |c: [f32; 3], a: f32| {
                    for (v, c) in rgb.iter_mut().zip(c) {
                        *v = *v * (1.0 - a) + c * a;
                    }
                };
                if layers & LAYER_LABELS != 0 {
                    match self.labels.volume().get(z, y, x) {
                        1 => tint([220.0, 40.0, 40.0], 0.55),
                        2 => tint([40.0, 200.0, 60.0], 0.45),
                        4 => tint([250.0, 220.0, 30.0], 0.6),
                        _ => {}
                    }
                }
                if layers & LAYER_DETECTION != 0 && self.detection.get(z, y, x) {
                    if self.kept.get(z, y, x) {
                        tint([60.0, 120.0, 255.0], 0.6);
                    } else {
                        tint([230.0, 60.0, 230.0], 0.8);
                    }
                }
                if layers & LAYER_ROI != 0 {
                    if let Some(b) = self.roi {
                        if !b.contains([z, y, x]) {
                            tint([0.0; 3], 0.5);
                        } else if on_box_edge(&b, [z, y, x]) {
                            tint([0.0, 230.0, 230.0], 1.0);
                        }
                    }
                }
                if layers & LAYER_PREDICTION != 0 {
                    if let Some(m) = &pred_wt {
                        if m.get(z, y, x) && is_edge(m, [z, y, x]) {
                            tint([255.0; 3], 1.0);
                        }
                    }
                }
                px.extend(rgb.map(|v| v.round() as u8));
                px.push(255);
            }
        }
        px
    }
}

fn on_box_edge(b: &Box3D, [_, y, x]: [usize; 3]) -> bool {
    y == b.min[1] || y == b.max[1] || x == b.min[2] || x == b.max[2]
}

/// In-plane boundary of a mask.
fn is_edge(m: &Mask, [z, y, x]: [usize; 3]) -> bool {
    let [_, h, w] = m.dims();
    y == 0 || x == 0 || y + 1 == h || x + 1 == w || !m.get(z, y - 1, x) || !m.get(z, y + 1, x) || !m.get(z, y, x - 1) || !m.get(z, y, x + 1)
}

pub fn shift_labels(labels: &LabelVolume, shift: [i32; 3]) -> Result<LabelVolume> {
    let dims = labels.dims();
    let mut out = vec![0u8; labels.data().len()];
    let src = labels.volume();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let to = [z as i64 + shift[0] as i64, y as i64 + shift[1] as i64, x as i64 + shift[2] as i64];
                if to.iter().zip(dims).all(|(&t, n)| t >= 0 && (t as usize) < n) {
                    let [tz, ty, tx] = to.map(|t| t as usize);
                    out[(tz * dims[1] + ty) * dims[2] + tx] = src.get(z, y, x);
                }
            }
        }
    }
    LabelVolume::from_vec(dims, out)
}
