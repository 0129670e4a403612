//! Browser demo: simulate a small light field, refocus it at any object
//! depth, reconstruct its depth map, and plot the depth-to-disparity curve.
//!
//! Images are returned as RGBA bytes, row-major, for `ImageData`.

use lfdepth::fusion::reconstruct_view;
use lfdepth::geometry::disparity_from_virtual_depth;
use lfdepth::pipeline::{depth_map, PipelineSettings};
use lfdepth::simulator::{
    object_to_virtual, render_lightfield, RawLightFieldImage, RenderSettings, Scene, Texture,
    TiltedPlane,
};
use lfdepth::{CameraModel, Image, Mask};
use wasm_bindgen::prelude::*;

/// Light-field sensor of the demo camera, px.
const DEMO_SENSOR: (usize, usize) = (320, 240);

fn demo_camera() -> CameraModel {
    let mut cam = CameraModel::default();
    cam.sensor.width_px = DEMO_SENSOR.0;
    cam.sensor.height_px = DEMO_SENSOR.1;
    cam
}

fn js_err(e: lfdepth::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Grey image to RGBA; pixels outside `mask` are transparent.
fn grey_rgba(img: &Image, mask: Option<&Mask>) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.data().len() * 4);
    for (i, &v) in img.data().iter().enumerate() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let a = match mask {
            Some(m) if !m.data()[i] => 0,
            _ => 255,
        };
        out.extend_from_slice(&[g, g, g, a]);
    }
    out
}

/// Blue (near) to red (far) ramp over `[lo, hi]`.
fn depth_rgba(depth: &Image, mask: &Mask, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(depth.data().len() * 4);
    for (i, &v) in depth.data().iter().enumerate() {
        if !mask.data()[i] {
            out.extend_from_slice(&[0, 0, 0, 0]);
            continue;
        }
        let t = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
        let r = (255.0 * t) as u8;
        let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
        let b = (255.0 * (1.0 - t)) as u8;
        out.extend_from_slice(&[r, g, b, 255]);
    }
    out
}

/// A simulated textured plane and its light field.
#[wasm_bindgen]
pub struct Demo {
    lf: RawLightFieldImage,
    view_dims: (usize, usize),
    depth_dims: (usize, usize),
    depth_range: (f64, f64),
}

impl Demo {
    pub fn try_new(depth_mm: f64, tilt_deg: f64, seed: u64) -> lfdepth::Result<Demo> {
        let scene = Scene::TiltedPlane(TiltedPlane {
            center_depth_mm: depth_mm,
            tilt_deg,
            azimuth_deg: 0.0,
            half_extent_mm: 4.0,
            texture: Texture::Noise {
                seed,
                feature_mm: 0.1,
                contrast: 1.0,
            },
        });
        let lf = render_lightfield(&scene, &demo_camera(), &RenderSettings::default())?;
        Ok(Demo {
            lf,
            view_dims: (0, 0),
            depth_dims: (0, 0),
            depth_range: (0.0, 0.0),
        })
    }

    pub fn try_refocus(&mut self, w_mm: f64) -> lfdepth::Result<Vec<u8>> {
        let a = object_to_virtual(w_mm, &self.lf.camera.optics)?;
        let view = reconstruct_view(&self.lf, a)?;
        self.view_dims = view.image.dims();
        Ok(grey_rgba(&view.image, Some(&view.coverage)))
    }

    pub fn try_depth(&mut self) -> lfdepth::Result<Vec<u8>> {
        let cam = self.lf.camera;
        let a = object_to_virtual(cam.optics.nominal_working_distance_um * 1e-3, &cam.optics)?;
        let (_, _, dense) = depth_map(&self.lf, &PipelineSettings::default(), a)?;
        let (lo, hi) = (cam.depth_range.min_mm, cam.depth_range.max_mm);
        self.depth_dims = dense.dims();
        let valid: Vec<f64> = dense
            .depth
            .data()
            .iter()
            .zip(dense.mask.data())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v as f64)
            .collect();
        self.depth_range = valid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        Ok(depth_rgba(&dense.depth, &dense.mask, lo, hi))
    }
}

#[wasm_bindgen]
impl Demo {
    /// Renders a plane at `depth_mm` tilted by `tilt_deg` about the y axis.
    #[wasm_bindgen(constructor)]
    pub fn new(depth_mm: f64, tilt_deg: f64, seed: u32) -> Result<Demo, JsValue> {
        Demo::try_new(depth_mm, tilt_deg, seed as u64).map_err(js_err)
    }

    pub fn sensor_width(&self) -> usize {
        self.lf.pixels.width()
    }

    pub fn sensor_height(&self) -> usize {
        self.lf.pixels.height()
    }

    /// The raw sensor frame.
    pub fn lightfield_rgba(&self) -> Vec<u8> {
        grey_rgba(&self.lf.pixels, None)
    }

    /// Total-focus view on the virtual plane conjugate to `w_mm`.
    pub fn refocus(&mut self, w_mm: f64) -> Result<Vec<u8>, JsValue> {
        self.try_refocus(w_mm).map_err(js_err)
    }

    pub fn view_width(&self) -> usize {
        self.view_dims.0
    }

    pub fn view_height(&self) -> usize {
        self.view_dims.1
    }

    /// Dense depth map, colour-coded over the camera depth range.
    pub fn depth(&mut self) -> Result<Vec<u8>, JsValue> {
        self.try_depth().map_err(js_err)
    }

    pub fn depth_width(&self) -> usize {
        self.depth_dims.0
    }

    pub fn depth_height(&self) -> usize {
        self.depth_dims.1
    }

    pub fn depth_min_mm(&self) -> f64 {
        self.depth_range.0
    }

    pub fn depth_max_mm(&self) -> f64 {
        self.depth_range.1
    }
}

/// Disparity (px) between adjacent elemental images for `n` object depths
/// spread over `[lo_mm, hi_mm]`, interleaved as `w0, D0, w1, D1, ...`.
/// Depths whose virtual image falls in front of the sensor are skipped.
#[wasm_bindgen]
pub fn disparity_curve(lo_mm: f64, hi_mm: f64, n: usize) -> Vec<f64> {
    let cam = CameraModel::default();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let w = lo_mm + (hi_mm - lo_mm) * i as f64 / (n.max(2) - 1) as f64;
        let Ok(a) = object_to_virtual(w, &cam.optics) else {
            continue;
        };
        if a <= cam.mla.spacing_um {
            continue;
        }
        if let Ok(d) = disparity_from_virtual_depth(a, &cam) {
            out.push(w);
            out.push(d / cam.sensor.pixel_pitch_um);
        }
    }
    out
}
