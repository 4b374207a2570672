//! Two-stage inference: whole-tumor detection under the brain mask, then
//! four-class segmentation inside the box around the detection.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::data::normalize_scan;
use crate::error::{Error, Result};
use crate::loss::{apply_roi_mask, mask_input, LABEL_OF_CHANNEL};
use crate::metrics::{evaluate_cohort, CasePair, MetricsReport};
use crate::morphology::{bounding_box, brain_mask, connected_components, filter_small_components, Box3D, Connectivity, FilterPolicy};
use crate::tensor::Tensor;
use crate::vnet::{forward, BoundParams, ModelParams, NetworkConfig};
use crate::volume::{LabelVolume, Mask, MultiModalScan};

/// A scan ready for the networks: normalised input tensor, brain support of
/// the raw scan, and labels when present.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub input: Tensor<f32>,
    pub brain: Mask,
    pub labels: Option<LabelVolume>,
}

impl Prepared {
    pub fn new(scan: &MultiModalScan) -> Result<Self> {
        let brain = brain_mask(scan);
        let (norm, _) = normalize_scan(scan);
        Ok(Self {
            id: scan.subject_id.clone(),
            input: norm.to_tensor(),
            brain,
            labels: scan.labels.clone(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.brain.dims()
    }

    /// Inference-mode probabilities with the input and output restricted to `roi`.
    pub fn masked_probs(&self, cfg: &NetworkConfig, params: &ModelParams<f32>, roi: &Mask) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params, false);
        let x = g.constant(mask_input(&self.input, roi)?);
        let out = forward(&mut g, cfg, params, &bound, x, Mode::Infer)?;
        let masked = apply_roi_mask(&mut g, out.probs, roi)?;
        Ok(g.value(masked).clone())
    }
}

/// `probs[channel] > threshold` per voxel.
pub fn threshold_channel(probs: &Tensor<f32>, channel: usize, threshold: f32) -> Result<Mask> {
    let [_, c, d, h, w] = probs.dims5("threshold_channel")?;
    if channel >= c {
        return Err(Error::shape("threshold_channel", format!("channel {channel} outside 0..{c}")));
    }
    let vol = d * h * w;
    let bits = probs.data()[channel * vol..(channel + 1) * vol].iter().map(|&p| p > threshold).collect();
    Mask::new([d, h, w], bits)
}

/// Per-voxel argmax over four class channels (ties go to the lower channel),
/// mapped to label values.
pub fn argmax_labels(probs: &Tensor<f32>) -> Result<LabelVolume> {
    let [_, c, d, h, w] = probs.dims5("argmax_labels")?;
    if c != LABEL_OF_CHANNEL.len() {
        return Err(Error::shape("argmax_labels", format!("expected 4 class channels, got {c}")));
    }
    let vol = d * h * w;
    let p = probs.data();
    let labels = (0..vol)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if p[ch * vol + i] > p[best * vol + i] {
                    best = ch;
                }
            }
            LABEL_OF_CHANNEL[best]
        })
        .collect();
    LabelVolume::from_vec([d, h, w], labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// tumor-probability cut for the detector
    pub threshold: f32,
    pub filter: FilterPolicy,
    pub connectivity: Connectivity,
    /// voxels added on every side of the detection box
    pub bbox_margin: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            filter: FilterPolicy::KeepLargest,
            connectivity: Connectivity::TwentySix,
            bbox_margin: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ModelParams<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub net1: Network,
    pub net2: Network,
    pub cascade: CascadeConfig,
}

pub const NET1_FILE: &str = "net1.ckpt";
pub const NET2_FILE: &str = "net2.ckpt";
pub const CASCADE_FILE: &str = "cascade.json";

#[derive(Serialize, Deserialize)]
struct CascadeRecord {
    format_version: u32,
    /// stage-2 output channel to label value
    label_map: Vec<u8>,
    #[serde(flatten)]
    cascade: CascadeConfig,
}

impl CascadeModel {
    pub fn new(net1: Network, net2: Network, cascade: CascadeConfig) -> Result<Self> {
        if net1.config.out_classes != 2 {
            return Err(Error::Config(format!("net-1 must have 2 outputs, has {}", net1.config.out_classes)));
        }
        if net2.config.out_classes != 4 {
            return Err(Error::Config(format!("net-2 must have 4 outputs, has {}", net2.config.out_classes)));
        }
        Ok(Self { net1, net2, cascade })
    }

    /// Model directory: both checkpoints plus `cascade.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let net = |file: &str| -> Result<Network> {
            let ck = Checkpoint::load(dir.join(file))?;
            Ok(Network {
                params: ck.params()?,
                config: ck.header.network,
            })
        };
        let (net1, net2) = (net(NET1_FILE)?, net(NET2_FILE)?);
        let path = dir.join(CASCADE_FILE);
        let cascade = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let rec: CascadeRecord = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if rec.label_map != LABEL_OF_CHANNEL {
                return Err(Error::Config(format!("{}: unsupported label map {:?}", path.display(), rec.label_map)));
            }
            rec.cascade
        } else {
            CascadeConfig::default()
        };
        Self::new(net1, net2, cascade)
    }

    pub fn write_cascade_config(dir: &Path, cascade: &CascadeConfig) -> Result<()> {
        let rec = CascadeRecord {
            format_version: FORMAT_VERSION,
            label_map: LABEL_OF_CHANNEL.to_vec(),
            cascade: cascade.clone(),
        };
        let path = dir.join(CASCADE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&rec).expect("config serialises")).map_err(|e| Error::io(&path, e))
    }

    /// Stage 1: thresholded tumor probability under the brain mask.
    pub fn detect(&self, p: &Prepared) -> Result<Mask> {
        let probs = p
            .masked_probs(&self.net1.config, &self.net1.params, &p.brain)
            .map_err(|e| in_net("net-1", e))?;
        threshold_channel(&probs, 1, self.cascade.threshold)
    }

    /// Stages 2-4 from a given detection map.
    pub fn segment_from_detection(&self, p: &Prepared, detection: &Mask) -> Result<CascadeOutput> {
        let cc = connected_components(detection, self.cascade.connectivity);
        let kept = filter_small_components(&cc, self.cascade.filter);
        let Some(roi_box) = bounding_box(&kept, self.cascade.bbox_margin) else {
            return Ok(CascadeOutput {
                labels: LabelVolume::background(p.dims(), Default::default()),
                detection: detection.clone(),
                roi: None,
            });
        };
        let roi = roi_box.rasterize(p.dims());
        let probs = p
            .masked_probs(&self.net2.config, &self.net2.params, &roi)
            .map_err(|e| in_net("net-2", e))?;
        Ok(CascadeOutput {
            labels: argmax_labels(&probs)?,
            detection: detection.clone(),
            roi: Some(roi_box),
        })
    }
}

fn in_net(net: &str, e: Error) -> Error {
    match e {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("{net}: {detail}"),
        },
        Error::NonFinite { location } => Error::NonFinite {
            location: format!("{net} {location}"),
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub labels: LabelVolume,
    /// raw thresholded detector output
    pub detection: Mask,
    /// `None` when nothing survived filtering
    pub roi: Option<Box3D>,
}

pub fn infer_cascade(model: &CascadeModel, scan: &MultiModalScan) -> Result<CascadeOutput> {
    let p = Prepared::new(scan)?;
    let detection = model.detect(&p)?;
    let mut out = model.segment_from_detection(&p, &detection)?;
    out.labels = LabelVolume::new({
        let mut v = out.labels.into_volume();
        v.meta = scan.modalities()[0].meta.clone();
        v.meta.modality = "labels".into();
        v
    })?;
    Ok(out)
}

/// Anything that maps a scan to a label volume.
pub trait Predictor {
    fn predict(&self, scan: &MultiModalScan) -> Result<LabelVolume>;
}

impl Predictor for CascadeModel {
    fn predict(&self, scan: &MultiModalScan) -> Result<LabelVolume> {
        Ok(infer_cascade(self, scan)?.labels)
    }
}

/// Returns each scan's own ground truth.
pub struct OracleStub;

impl Predictor for OracleStub {
    fn predict(&self, scan: &MultiModalScan) -> Result<LabelVolume> {
        scan.labels
            .clone()
            .ok_or_else(|| Error::invalid(format!("{} has no ground truth for the oracle", scan.subject_id)))
    }
}

/// Predict every subject and build the cohort report.
pub fn run_evaluation(model: &dyn Predictor, cohort: &[MultiModalScan], spacing: Option<[f64; 3]>) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(cohort.len());
    for s in cohort {
        let gt = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} has no ground truth", s.subject_id)))?;
        let pred = model.predict(s).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", s.subject_id)),
            other => other,
        })?;
        preds.push((s.subject_id.as_str(), pred, gt));
    }
    let cases: Vec<CasePair<'_>> = preds
        .iter()
        .map(|(id, pred, gt)| CasePair {
            subject_id: id,
            pred,
            gt,
        })
        .collect();
    evaluate_cohort(&cases, spacing)
}
