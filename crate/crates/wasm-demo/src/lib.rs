//! WebAssembly bindings for the static demo page in `www/`.

use cascade_core::volume::Modality;
use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: cascade_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Result of the detection → filter → box preview.
#[wasm_bindgen]
#[derive(Clone, Copy, Debug)]
pub struct RoiPreview {
    pub detected: usize,
    pub components: usize,
    pub kept: usize,
    pub tumor_recall: f64,
    pub has_box: bool,
    pub z0: usize,
    pub z1: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

#[wasm_bindgen]
pub struct PhantomDemo {
    inner: demo::Demo,
}

#[wasm_bindgen]
impl PhantomDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<PhantomDemo, JsError> {
        Ok(Self {
            inner: demo::Demo::new(seed).map_err(js)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.inner.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.inner.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.inner.dims()[2]
    }

    /// RGBA bytes of axial slice `z`; `modality` 0..4 is T1, T1c, T2, FLAIR;
    /// `layers` is a bit set: 1 labels, 2 detection, 4 box, 8 shifted prediction.
    pub fn render(&self, modality: usize, z: usize, layers: u32) -> Vec<u8> {
        self.inner.render(Modality::ALL[modality.min(3)], z, layers)
    }

    pub fn roi_preview(&mut self, seed: u64, speckle: f64, miss: f64, min_voxels: usize, margin: usize) -> RoiPreview {
        let s = self.inner.roi_preview(seed, speckle, miss, min_voxels, margin);
        let b = s.roi;
        RoiPreview {
            detected: s.detected,
            components: s.components,
            kept: s.kept,
            tumor_recall: s.tumor_recall,
            has_box: b.is_some(),
            z0: b.map_or(0, |b| b.min[0]),
            z1: b.map_or(0, |b| b.max[0]),
            y0: b.map_or(0, |b| b.min[1]),
            y1: b.map_or(0, |b| b.max[1]),
            x0: b.map_or(0, |b| b.min[2]),
            x1: b.map_or(0, |b| b.max[2]),
        }
    }

    /// Dice ET, WT, TC then Hausdorff ET, WT, TC of the ground truth shifted by
    /// (dz, dy, dx) voxels.
    pub fn shifted_metrics(&mut self, dz: i32, dy: i32, dx: i32) -> Result<Vec<f64>, JsError> {
        self.inner.shifted_metrics([dz, dy, dx]).map_err(js)
    }
}
