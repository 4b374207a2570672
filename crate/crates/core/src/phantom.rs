//! Synthetic multimodal brain phantoms with nested ellipsoidal tumors.
//!
//! A phantom is an ellipsoidal "brain" on an exactly-zero background with a
//! tumor made of three nested ellipsoids sharing one centre: the enhancing
//! core (label 4) inside a necrotic shell (label 1) inside an edema shell
//! (label 2). Each tissue class draws its intensity per modality from a
//! Gaussian profile, plus global acquisition noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    voxel_count, Dims, LabelVolume, Modality, MultiModalScan, Volume, VolumeMeta, LABEL_BACKGROUND,
    LABEL_EDEMA, LABEL_ENHANCING, LABEL_NECROTIC,
};

/// Smallest intensity a brain voxel may take, keeping it distinguishable
/// from skull-stripped background.
pub const MIN_TISSUE_INTENSITY: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub mean: f64,
    pub std: f64,
}

const fn p(mean: f64, std: f64) -> Profile {
    Profile { mean, std }
}

/// Per-modality intensity profile of each tissue class, indexed
/// `[T1, T1c, T2, FLAIR]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityTable {
    pub brain: [Profile; 4],
    pub edema: [Profile; 4],
    pub necrotic: [Profile; 4],
    pub enhancing: [Profile; 4],
}

impl Default for IntensityTable {
    fn default() -> Self {
        Self {
            brain: [p(1.0, 0.08), p(1.0, 0.08), p(1.0, 0.08), p(1.0, 0.08)],
            edema: [p(0.8, 0.08), p(0.85, 0.08), p(1.7, 0.1), p(2.0, 0.1)],
            necrotic: [p(0.5, 0.08), p(0.6, 0.08), p(1.9, 0.1), p(1.3, 0.1)],
            enhancing: [p(0.9, 0.08), p(1.8, 0.1), p(1.4, 0.1), p(1.6, 0.1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TumorSpec {
    /// centre in voxel coordinates; drawn at random inside the brain when absent
    pub center: Option<[f64; 3]>,
    pub edema_radii: [f64; 3],
    pub necrotic_radii: [f64; 3],
    pub enhancing_radii: [f64; 3],
    /// relative jitter applied to all radii jointly, drawn uniformly in ±jitter
    pub radius_jitter: f64,
}

impl Default for TumorSpec {
    fn default() -> Self {
        Self {
            center: None,
            edema_radii: [7.0, 6.5, 6.5],
            necrotic_radii: [5.2, 4.8, 4.8],
            enhancing_radii: [3.5, 3.2, 3.2],
            radius_jitter: 0.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub seed: u64,
    pub spacing: [f32; 3],
    /// brain centre; the grid centre when absent
    pub brain_center: Option<[f64; 3]>,
    pub brain_radii: [f64; 3],
    pub tumor: TumorSpec,
    pub intensity: IntensityTable,
    /// standard deviation of additive noise on tissue voxels
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            seed: 0,
            spacing: [1.0; 3],
            brain_center: None,
            brain_radii: [13.0, 14.0, 12.5],
            tumor: TumorSpec::default(),
            intensity: IntensityTable::default(),
            noise: 0.1,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("phantom dims {:?} must be positive", self.dims)));
        }
        if self.brain_radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("brain radii must be positive".into()));
        }
        let t = &self.tumor;
        for axis in 0..3 {
            if !(t.enhancing_radii[axis] > 0.0
                && t.enhancing_radii[axis] < t.necrotic_radii[axis]
                && t.necrotic_radii[axis] < t.edema_radii[axis])
            {
                return Err(Error::Config(format!(
                    "tumor radii must strictly decrease inward (edema > necrotic > enhancing > 0) on axis {axis}"
                )));
            }
        }
        if !(0.0..1.0).contains(&t.radius_jitter) {
            return Err(Error::Config("radius_jitter must lie in [0, 1)".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

fn inside(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    (0..3)
        .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
        .sum::<f64>()
        <= 1.0
}

/// Whether the tumor ellipsoid lies inside the brain ellipsoid, tested on a
/// dense sampling of the tumor surface.
fn tumor_fits(brain_c: [f64; 3], brain_r: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    const STEPS: usize = 24;
    for i in 0..=STEPS {
        let theta = std::f64::consts::PI * i as f64 / STEPS as f64;
        for j in 0..2 * STEPS {
            let phi = std::f64::consts::PI * j as f64 / STEPS as f64;
            let q = [
                c[0] + r[0] * theta.cos(),
                c[1] + r[1] * theta.sin() * phi.cos(),
                c[2] + r[2] * theta.sin() * phi.sin(),
            ];
            if !inside(q, brain_c, brain_r) {
                return false;
            }
        }
    }
    true
}

/// Deterministic phantom for `spec`: identical specs give bitwise-identical scans.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<MultiModalScan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.dims;
    let brain_c = spec
        .brain_center
        .unwrap_or_else(|| dims.map(|d| (d as f64 - 1.0) / 2.0));

    let t = &spec.tumor;
    let scale = 1.0 + rng.random_range(-1.0..=1.0) * t.radius_jitter;
    let edema = t.edema_radii.map(|r| r * scale);
    let necrotic = t.necrotic_radii.map(|r| r * scale);
    let enhancing = t.enhancing_radii.map(|r| r * scale);
    let center = match t.center {
        Some(c) => c,
        None => {
            let mut found = None;
            for _ in 0..1000 {
                let c = [0, 1, 2].map(|a| brain_c[a] + rng.random_range(-1.0..1.0) * spec.brain_radii[a]);
                if tumor_fits(brain_c, spec.brain_radii, c, edema) {
                    found = Some(c);
                    break;
                }
            }
            found.ok_or_else(|| Error::Config("tumor does not fit inside the brain".into()))?
        }
    };
    if !tumor_fits(brain_c, spec.brain_radii, center, edema) {
        return Err(Error::Config("tumor extends outside the brain".into()));
    }

    let n = voxel_count(dims);
    let mut labels = vec![LABEL_BACKGROUND; n];
    let mut tissue = vec![Tissue::Background; n];
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let q = [z as f64, y as f64, x as f64];
                let (tis, lab) = if inside(q, center, enhancing) {
                    (Tissue::Enhancing, LABEL_ENHANCING)
                } else if inside(q, center, necrotic) {
                    (Tissue::Necrotic, LABEL_NECROTIC)
                } else if inside(q, center, edema) {
                    (Tissue::Edema, LABEL_EDEMA)
                } else if inside(q, brain_c, spec.brain_radii) {
                    (Tissue::Brain, LABEL_BACKGROUND)
                } else {
                    (Tissue::Background, LABEL_BACKGROUND)
                };
                tissue[i] = tis;
                labels[i] = lab;
                i += 1;
            }
        }
    }
    if tissue.iter().zip(&labels).any(|(t, &l)| *t == Tissue::Background && l != 0) {
        return Err(Error::Config("tumor voxel outside the brain".into()));
    }

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let meta = |m: Modality| VolumeMeta {
        spacing: spec.spacing,
        modality: m.tag().into(),
        axes: Some(crate::volume::AxisOrder::DEFAULT),
    };
    let mut vols = Vec::with_capacity(4);
    for m in Modality::ALL {
        let c = m.channel();
        let mut data = vec![0.0f32; n];
        for (v, tis) in data.iter_mut().zip(&tissue) {
            let profile = match tis {
                Tissue::Background => continue,
                Tissue::Brain => spec.intensity.brain[c],
                Tissue::Edema => spec.intensity.edema[c],
                Tissue::Necrotic => spec.intensity.necrotic[c],
                Tissue::Enhancing => spec.intensity.enhancing[c],
            };
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let value = profile.mean + profile.std * z + noise.sample(&mut rng);
            *v = (value as f32).max(MIN_TISSUE_INTENSITY);
        }
        vols.push(Volume::new(dims, data, meta(m))?);
    }
    let modalities: [Volume<f32>; 4] = vols.try_into().expect("four modalities");
    let labels = LabelVolume::new(Volume::new(
        dims,
        labels,
        VolumeMeta {
            modality: "labels".into(),
            ..meta(Modality::T1)
        },
    )?)?;
    MultiModalScan::new(format!("phantom-{:04}", spec.seed), modalities, Some(labels))
}

/// `count` phantoms from `base`, subject `i` seeded with `base.seed + i`.
pub fn generate_cohort(base: &PhantomSpec, count: usize) -> Result<Vec<MultiModalScan>> {
    (0..count as u64)
        .map(|i| {
            generate_phantom(&PhantomSpec {
                seed: base.seed + i,
                ..base.clone()
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Background,
    Brain,
    Edema,
    Necrotic,
    Enhancing,
}
