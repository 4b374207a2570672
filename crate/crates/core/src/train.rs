//! Training loops for the two cascade stages.
//!
//! One step is one whole subject. Subject order within epoch `e` and the
//! reflection decision at step `s` are drawn from streams keyed by `(seed, e)`
//! and `(seed, s)`, so a run resumed from a checkpoint at step `k` continues
//! exactly as the uninterrupted run would.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::cascade::{argmax_labels, threshold_channel, Prepared};
use crate::checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::loss::{apply_roi_mask, combined_loss, dice_loss_binary, mask_input, LossConfig, LABEL_OF_CHANNEL};
use crate::metrics::{dice, merge_labels, Region};
use crate::morphology::gt_tumor_box;
use crate::tensor::Tensor;
use crate::vnet::{build_network, forward, BoundParams, ModelParams, NetworkConfig};
use crate::volume::{Mask, MultiModalScan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// binary whole-tumor detector under the brain mask
    #[serde(rename = "1")]
    Detect,
    /// four-class segmenter under the tumor box
    #[serde(rename = "2")]
    Segment,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Detect => 1,
            Stage::Segment => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Detect),
            2 => Ok(Stage::Segment),
            other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }

    pub fn label_map(self) -> Vec<u8> {
        match self {
            Stage::Detect => vec![0, 1],
            Stage::Segment => LABEL_OF_CHANNEL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub optimizer: AdamConfig,
    /// optimizer steps, one subject each
    pub steps: u64,
    pub seed: u64,
    pub loss: LossConfig,
    /// reflect each step's subject about the sagittal plane with probability 0.5
    pub augment: bool,
    /// stop after this many epochs without development improvement (0 = never)
    pub patience: u64,
    /// write a checkpoint every this many steps (0 = only at the end)
    pub checkpoint_every: u64,
    /// margin of the ground-truth tumor box used as the stage-2 ROI
    pub bbox_margin: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::net1(),
            optimizer: AdamConfig::default(),
            steps: 500,
            seed: 0,
            loss: LossConfig::default(),
            augment: true,
            patience: 0,
            checkpoint_every: 0,
            bbox_margin: 2,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Detect => Self::default(),
            Stage::Segment => Self {
                network: NetworkConfig::net2(),
                steps: 800,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        self.network.validate()?;
        let want = if stage == Stage::Detect { 2 } else { 4 };
        if self.network.out_classes != want {
            return Err(Error::Config(format!(
                "stage {} needs out_classes = {want}, config has {}",
                stage.number(),
                self.network.out_classes
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1), epsilon > 0".into()));
        }
        if self.loss.dice_weight < 0.0 || !(self.loss.epsilon >= 0.0) {
            return Err(Error::Config("loss weights and epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.trainable().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update; `t` is the 1-based step number.
    pub fn step(&mut self, cfg: &AdamConfig, t: u64, params: &mut ModelParams<f32>, grads: &[Option<Tensor<f32>>]) {
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let step = (cfg.lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        let eps = cfg.epsilon as f32;
        for (((p, g), m), v) in params.trainable_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= step * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    pub step: u64,
    pub best_dev: Option<f64>,
    pub stale_epochs: u64,
}

impl TrainState {
    pub fn fresh(stage: Stage, config: &TrainConfig) -> Result<Self> {
        config.validate(stage)?;
        let params = build_network(&config.network, config.seed)?;
        Ok(Self {
            stage,
            config: config.clone(),
            adam: AdamState::new(&params),
            params,
            step: 0,
            best_dev: None,
            stale_epochs: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            network: self.config.network.clone(),
            seed: self.config.seed,
            step: self.step,
            label_map: self.stage.label_map(),
            extra: serde_json::json!({
                "stage": self.stage.number(),
                "train": self.config,
                "best_dev": self.best_dev,
                "stale_epochs": self.stale_epochs,
            }),
        };
        let mut ck = Checkpoint::new(header, &self.params);
        for (i, (name, _)) in self.params.trainable().iter().enumerate() {
            ck.records.insert(format!("adam.m.{name}"), self.adam.m[i].clone());
            ck.records.insert(format!("adam.v.{name}"), self.adam.v[i].clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("checkpoint is not a training checkpoint: {what}"));
        let extra = &ck.header.extra;
        let stage = extra
            .get("stage")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("no stage"))
            .and_then(|n| Stage::from_number(n as u8))?;
        let config: TrainConfig = serde_json::from_value(extra.get("train").cloned().ok_or_else(|| bad("no config"))?)
            .map_err(|e| bad(&e.to_string()))?;
        let params = ck.params()?;
        let mut adam = AdamState::new(&params);
        for (i, (name, _)) in params.trainable().iter().enumerate() {
            for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let key = format!("adam.{kind}.{name}");
                let t = ck.records.get(&key).ok_or_else(|| bad(&format!("missing {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(bad(&format!("{key} has the wrong shape")));
                }
                *slot = t.clone();
            }
        }
        Ok(Self {
            stage,
            config,
            params,
            adam,
            step: ck.header.step,
            best_dev: extra.get("best_dev").and_then(|v| v.as_f64()),
            stale_epochs: extra.get("stale_epochs").and_then(|v| v.as_u64()).unwrap_or(0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: u64,
        subject: String,
        reflected: bool,
        loss: f64,
    },
    Epoch {
        epoch: u64,
        step: u64,
        /// mean training loss over the epoch's steps
        train_loss: f64,
        /// stage 1: whole-tumor dice; stage 2: ET, WT, TC dice
        dev_dice: Vec<f64>,
    },
}

/// Receives log records and periodic checkpoints while training runs.
pub trait TrainSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()>;
    fn checkpoint(&mut self, state: &TrainState) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Default)]
pub struct MemorySink {
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<u64>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        self.log.push(rec.clone());
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.checkpoints.push(state.step);
        Ok(())
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub stopped_early: bool,
}

fn keyed_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((domain << 56) ^ index);
    r
}

const ORDER_STREAM: u64 = 1;
const FLIP_STREAM: u64 = 2;

/// Subject index trained at `step` (0-based) for a cohort of `n`.
pub fn subject_at(seed: u64, n: usize, step: u64) -> usize {
    let epoch = step / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, ORDER_STREAM, epoch));
    order[(step % n as u64) as usize]
}

pub fn reflect_at(seed: u64, step: u64) -> bool {
    keyed_rng(seed, FLIP_STREAM, step).random_bool(0.5)
}

struct TrainSubject {
    id: String,
    /// index 1 is the reflected copy when augmentation is on
    views: Vec<(Prepared, Mask)>,
}

fn stage_roi(stage: Stage, p: &Prepared, margin: usize) -> Result<Mask> {
    match stage {
        Stage::Detect => Ok(p.brain.clone()),
        Stage::Segment => {
            let labels = p.labels.as_ref().ok_or_else(|| Error::invalid(format!("{} has no labels", p.id)))?;
            gt_tumor_box(labels, margin)
                .map(|(_, m)| m)
                .map_err(|_| Error::invalid(format!("{}: stage-2 training needs a tumor in every subject", p.id)))
        }
    }
}

fn prepare_subjects(stage: Stage, scans: &[MultiModalScan], cfg: &TrainConfig, reflect: bool) -> Result<Vec<TrainSubject>> {
    scans
        .iter()
        .map(|s| {
            if s.labels.is_none() {
                return Err(Error::invalid(format!("training subject {} has no labels", s.subject_id)));
            }
            let mut views = Vec::new();
            let base = Prepared::new(s)?;
            let roi = stage_roi(stage, &base, cfg.bbox_margin)?;
            views.push((base, roi));
            if reflect {
                let r = Prepared::new(&crate::data::reflect_scan(s)?)?;
                let roi = stage_roi(stage, &r, cfg.bbox_margin)?;
                views.push((r, roi));
            }
            Ok(TrainSubject {
                id: s.subject_id.clone(),
                views,
            })
        })
        .collect()
}

/// Loss value and parameter gradients for one subject in training mode.
/// Batch statistics are folded into the running averages of `params`.
fn loss_and_grads(
    stage: Stage,
    cfg: &TrainConfig,
    params: &mut ModelParams<f32>,
    p: &Prepared,
    roi: &Mask,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let labels = p.labels.as_ref().expect("training subjects carry labels");
    let mut g = Graph::<f32>::new();
    let bound = BoundParams::bind(&mut g, params, true);
    let x = g.constant(mask_input(&p.input, roi)?);
    let out = forward(&mut g, &cfg.network, params, &bound, x, Mode::Train)?;
    let masked = apply_roi_mask(&mut g, out.probs, roi)?;
    let loss = match stage {
        Stage::Detect => {
            let tumor = g.slice_channels(masked, 1, 2)?;
            dice_loss_binary(&mut g, tumor, &labels.indicator(&[1, 2, 4]), roi, cfg.loss.epsilon)?
        }
        Stage::Segment => combined_loss(&mut g, masked, labels, roi, &cfg.loss)?.total,
    };
    let value = f64::from(g.value(loss).item());
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = bound.vars(params).into_iter().map(|v| g.grad(v).cloned()).collect();
    params.update_running_stats(&out.bn_stats)?;
    Ok((value, grads))
}

/// Development dice: stage 1 whole tumor; stage 2 per region in ET, WT, TC order.
pub fn dev_dice(stage: Stage, cfg: &TrainConfig, params: &ModelParams<f32>, dev: &[Prepared]) -> Result<Vec<f64>> {
    let width = if stage == Stage::Detect { 1 } else { 3 };
    let mut sums = vec![0.0; width];
    for p in dev {
        let labels = p.labels.as_ref().ok_or_else(|| Error::invalid(format!("dev subject {} has no labels", p.id)))?;
        let roi = stage_roi(stage, p, cfg.bbox_margin)?;
        let probs = p.masked_probs(&cfg.network, params, &roi)?;
        match stage {
            Stage::Detect => {
                let pred = threshold_channel(&probs, 1, 0.5)?;
                sums[0] += dice(&pred, &labels.indicator(&[1, 2, 4]))?;
            }
            Stage::Segment => {
                let pred = merge_labels(&argmax_labels(&probs)?)?;
                let gt = merge_labels(labels)?;
                for (s, r) in sums.iter_mut().zip(Region::ALL) {
                    *s += dice(pred.get(r), gt.get(r))?;
                }
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / dev.len().max(1) as f64).collect())
}

/// Train from `state` until `state.config.steps` or early stopping.
pub fn train(
    mut state: TrainState,
    train_set: &[MultiModalScan],
    dev_set: &[MultiModalScan],
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    let stage = state.stage;
    let cfg = state.config.clone();
    cfg.validate(stage)?;
    if train_set.is_empty() {
        return Err(Error::invalid("training cohort is empty"));
    }
    let subjects = prepare_subjects(stage, train_set, &cfg, cfg.augment)?;
    let dev: Vec<Prepared> = dev_set.iter().map(Prepared::new).collect::<Result<_>>()?;
    for p in &dev {
        stage_roi(stage, p, cfg.bbox_margin)?;
    }
    let n = subjects.len() as u64;
    let mut epoch_losses: Vec<f64> = Vec::new();
    let mut stopped_early = false;
    while state.step < cfg.steps {
        let step = state.step;
        let epoch = step / n;
        let subject = &subjects[subject_at(cfg.seed, subjects.len(), step)];
        let reflected = cfg.augment && reflect_at(cfg.seed, step);
        let (prep, roi) = &subject.views[usize::from(reflected)];
        // running statistics are only folded in for a finite loss
        let (loss, grads) = match loss_and_grads(stage, &cfg, &mut state.params, prep, roi) {
            Err(Error::NonFinite { location }) => {
                sink.checkpoint(&state)?;
                return Err(Error::NonFinite {
                    location: format!("{location} at step {step} (subject {})", subject.id),
                });
            }
            other => other?,
        };
        if !loss.is_finite() {
            sink.checkpoint(&state)?;
            return Err(Error::NonFinite {
                location: format!("training loss at step {step} (subject {})", subject.id),
            });
        }
        state.adam.step(&cfg.optimizer, step + 1, &mut state.params, &grads);
        state.step += 1;
        sink.record(&LogRecord::Step {
            step,
            epoch,
            subject: subject.id.clone(),
            reflected,
            loss,
        })?;
        epoch_losses.push(loss);

        let epoch_end = state.step.is_multiple_of(n) || state.step == cfg.steps;
        if epoch_end {
            let dev_dice = if dev.is_empty() { Vec::new() } else { dev_dice(stage, &cfg, &state.params, &dev)? };
            let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            epoch_losses.clear();
            sink.record(&LogRecord::Epoch {
                epoch,
                step: state.step,
                train_loss,
                dev_dice: dev_dice.clone(),
            })?;
            if !dev_dice.is_empty() {
                let score = dev_dice.iter().sum::<f64>() / dev_dice.len() as f64;
                if state.best_dev.is_none_or(|b| score > b) {
                    state.best_dev = Some(score);
                    state.stale_epochs = 0;
                } else {
                    state.stale_epochs += 1;
                }
            }
        }
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) && state.step < cfg.steps {
            sink.checkpoint(&state)?;
        }
        if epoch_end && cfg.patience > 0 && state.stale_epochs >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    sink.checkpoint(&state)?;
    Ok(TrainOutcome { state, stopped_early })
}
