//! Forward model of the two-channel instrument.
//!
//! The main optics are an effective thin lens; microlenses are pinholes at
//! their centres, so a scene point whose virtual image lies at lateral
//! position `S` and distance `a` behind the MLA lands behind lens `m` at
//! `u_m = c_m + (S - c_m) B / a`. Each elemental image only receives light
//! through its own lens, and visibility is limited by the elemental tile
//! alone (no main-lens vignetting). The HR channel is a pinhole camera at
//! the main lens with its detector at the nominal image distance.

mod scene;

pub use scene::{Heightfield, PointSource, Scene, Texture, TiltedPlane};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{config, domain, Result};
use crate::geometry::{elemental_grid, CameraModel, DepthRange, ElementalRect, MainOpticsSpec};
use crate::image::Image;

/// HR-channel frame.
pub type HrImage = Image;

/// Virtual image distance `a` (um, from the MLA away from the main lens)
/// of an object at depth `w_mm`, from the thin-lens equation.
pub fn object_to_virtual(w_mm: f64, optics: &MainOpticsSpec) -> Result<f64> {
    let f = optics.effective_focal_length_um;
    let w = w_mm * 1e3;
    if !(w > f) {
        return domain(format!(
            "object depth {w_mm} mm is inside the focal length {} mm",
            f * 1e-3
        ));
    }
    let v = f * w / (w - f);
    Ok(v - optics.lens_to_mla_um)
}

/// Inverse of [`object_to_virtual`]: object depth (mm) for a virtual image
/// distance (um).
pub fn virtual_to_object(a_um: f64, optics: &MainOpticsSpec) -> Result<f64> {
    let f = optics.effective_focal_length_um;
    let v = a_um + optics.lens_to_mla_um;
    if !(v > f) {
        return domain(format!(
            "virtual distance {a_um} um has no real object conjugate"
        ));
    }
    Ok(f * v / (v - f) * 1e-3)
}

/// [`object_to_virtual`] restricted to the plenoptic 2.0 regime: the virtual
/// image must lie beyond the sensor (`a > B`).
pub fn virtual_distance_in_range(w_mm: f64, camera: &CameraModel) -> Result<f64> {
    let a = object_to_virtual(w_mm, &camera.optics)?;
    if a <= camera.mla.spacing_um {
        return config(format!(
            "depth {w_mm} mm images at a = {a:.1} um, not beyond the sensor (B = {} um)",
            camera.mla.spacing_um
        ));
    }
    Ok(a)
}

/// Lateral magnification `v / w` of the main optics for an object at `w_mm`.
pub fn lateral_magnification(w_mm: f64, optics: &MainOpticsSpec) -> f64 {
    let f = optics.effective_focal_length_um;
    f / (w_mm * 1e3 - f)
}

/// Virtual-plane position in sensor pixels (edge coordinates) and virtual
/// distance (um) of an object point.
pub fn virtual_point(camera: &CameraModel, p_mm: [f64; 3]) -> Result<([f64; 2], f64)> {
    let a = object_to_virtual(p_mm[2], &camera.optics)?;
    let m = lateral_magnification(p_mm[2], &camera.optics);
    let c = camera.sensor.center_px();
    let k = 1e3 * m / camera.sensor.pixel_pitch_um;
    Ok(([c[0] + p_mm[0] * k, c[1] + p_mm[1] * k], a))
}

/// Object lateral position (mm) of a virtual-plane point `x_px` at object depth `w_mm`.
pub fn virtual_to_object_lateral(camera: &CameraModel, x_px: [f64; 2], w_mm: f64) -> [f64; 2] {
    let c = camera.sensor.center_px();
    let k = camera.sensor.pixel_pitch_um * 1e-3 / lateral_magnification(w_mm, &camera.optics);
    [(x_px[0] - c[0]) * k, (x_px[1] - c[1]) * k]
}

/// HR pixel position (edge coordinates) of an object point.
pub fn hr_projection(camera: &CameraModel, p_mm: [f64; 3]) -> [f64; 2] {
    let c = camera.hr_sensor.center_px();
    let k = camera.hr_focal_px() / p_mm[2];
    [c[0] + p_mm[0] * k, c[1] + p_mm[1] * k]
}

/// Surface depth seen at virtual-plane position `x_px`, i.e. the object
/// depth whose virtual image projects laterally onto `x_px`.
pub fn surface_depth_at_virtual(
    scene: &Scene,
    camera: &CameraModel,
    x_px: [f64; 2],
) -> Option<f64> {
    let mut w = scene.reference_depth();
    for _ in 0..40 {
        let [x, y] = virtual_to_object_lateral(camera, x_px, w);
        let next = scene.depth_at(x, y)?;
        if (next - w).abs() < 1e-10 {
            return Some(next);
        }
        w = next;
    }
    Some(w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Additive Gaussian noise, as a fraction of full scale.
    pub noise_sigma: f64,
    /// Exposure gain applied before noise and clipping.
    pub photon_scale: f64,
    pub rng_seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            photon_scale: 1.0,
            rng_seed: 0,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return config("noise_sigma must be non-negative");
        }
        if !(self.photon_scale > 0.0) {
            return config("photon_scale must be positive");
        }
        Ok(())
    }
}

/// Raw light-field sensor frame, values in `[0, 1]` full scale.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLightFieldImage {
    pub pixels: Image,
    pub camera: CameraModel,
}

impl RawLightFieldImage {
    pub fn new(pixels: Image, camera: CameraModel) -> Result<Self> {
        if pixels.dims() != (camera.sensor.width_px, camera.sensor.height_px) {
            return config(format!(
                "light-field image is {}x{}, camera sensor is {}x{}",
                pixels.width(),
                pixels.height(),
                camera.sensor.width_px,
                camera.sensor.height_px
            ));
        }
        Ok(Self { pixels, camera })
    }
}

const STREAM_LF: u64 = 0x4c46;
const STREAM_HR: u64 = 0x4852;

fn frame_rng(seed: u64, stream: u64, frame: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x1_0000_0000).wrapping_add(frame));
    rng
}

fn finish(mut img: Image, settings: &RenderSettings, stream: u64, frame: u64) -> Image {
    if settings.noise_sigma > 0.0 {
        let mut rng = frame_rng(settings.rng_seed, stream, frame);
        let normal = Normal::new(0.0f64, settings.noise_sigma).expect("validated sigma");
        for v in img.data_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

fn check_depths(scene: &Scene, range: &DepthRange) -> Result<()> {
    let bad: Vec<f64> = scene
        .depth_samples()
        .into_iter()
        .filter(|w| !range.contains(*w))
        .collect();
    if !bad.is_empty() {
        let listed: Vec<String> = bad.iter().take(12).map(|w| format!("{w:.3}")).collect();
        return config(format!(
            "{} scene depth(s) outside [{}, {}] mm: {}{}",
            bad.len(),
            range.min_mm,
            range.max_mm,
            listed.join(", "),
            if bad.len() > 12 { ", ..." } else { "" }
        ));
    }
    Ok(())
}

/// Sub-pixel sample offsets per axis (uniform 4 x 4 grid).
const SUBSAMPLES: [f64; 4] = [0.125, 0.375, 0.625, 0.875];
const SUBSAMPLE_COUNT: f64 = (SUBSAMPLES.len() * SUBSAMPLES.len()) as f64;

/// Renders the raw light-field frame of `scene`.
pub fn render_lightfield(
    scene: &Scene,
    camera: &CameraModel,
    settings: &RenderSettings,
) -> Result<RawLightFieldImage> {
    render_lightfield_frame(scene, camera, settings, 0)
}

/// As [`render_lightfield`], drawing noise from the stream of frame `frame`.
pub fn render_lightfield_frame(
    scene: &Scene,
    camera: &CameraModel,
    settings: &RenderSettings,
    frame: u64,
) -> Result<RawLightFieldImage> {
    camera.validate()?;
    settings.validate()?;
    scene.validate()?;
    check_depths(scene, &camera.depth_range)?;
    let grid = elemental_grid(camera)?;
    let (w, h) = (camera.sensor.width_px, camera.sensor.height_px);
    let mut img = Image::new(w, h);
    match scene {
        Scene::PointSources(sources) => {
            for s in sources {
                splat_point_lf(&mut img, camera, &grid, s, settings.photon_scale)?;
            }
        }
        _ => {
            let rects: Vec<&ElementalRect> = grid.rects().collect();
            let tiles: Vec<Vec<f32>> = rects
                .par_iter()
                .map(|r| render_surface_tile(scene, camera, r, settings.photon_scale))
                .collect();
            for (r, tile) in rects.iter().zip(tiles) {
                for y in 0..r.size {
                    for x in 0..r.size {
                        img.set(r.x0 + x, r.y0 + y, tile[y * r.size + x]);
                    }
                }
            }
        }
    }
    RawLightFieldImage::new(finish(img, settings, STREAM_LF, frame), *camera)
}

fn render_surface_tile(
    scene: &Scene,
    camera: &CameraModel,
    r: &ElementalRect,
    gain: f64,
) -> Vec<f32> {
    let b = camera.mla.spacing_um;
    let a_ref = object_to_virtual(scene.reference_depth(), &camera.optics).unwrap_or(b * 3.0);
    let mut out = vec![0.0f32; r.size * r.size];
    for y in 0..r.size {
        for x in 0..r.size {
            let mut acc = 0.0f64;
            for sy in SUBSAMPLES {
                for sx in SUBSAMPLES {
                    let u = [(r.x0 + x) as f64 + sx, (r.y0 + y) as f64 + sy];
                    acc += trace_lf(scene, camera, r.center, u, a_ref).unwrap_or(0.0) as f64;
                }
            }
            out[y * r.size + x] = (gain * acc / SUBSAMPLE_COUNT) as f32;
        }
    }
    out
}

/// Albedo seen by the chief ray from sensor point `u` through lens centre `c`.
fn trace_lf(
    scene: &Scene,
    camera: &CameraModel,
    c: [f64; 2],
    u: [f64; 2],
    a_start: f64,
) -> Option<f32> {
    let b = camera.mla.spacing_um;
    let mut a = a_start;
    let mut lateral = [0.0; 2];
    for _ in 0..30 {
        let s = [c[0] + (u[0] - c[0]) * a / b, c[1] + (u[1] - c[1]) * a / b];
        let w = virtual_to_object(a, &camera.optics).ok()?;
        lateral = virtual_to_object_lateral(camera, s, w);
        let depth = scene.depth_at(lateral[0], lateral[1])?;
        let next = object_to_virtual(depth, &camera.optics).ok()?;
        let done = (next - a).abs() < 1e-6;
        a = next;
        if done {
            break;
        }
    }
    Some(scene.albedo_at(lateral[0], lateral[1]))
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Adds a Gaussian spot (peak `peak`, std `sigma` px, centre `mu` in edge
/// coordinates) integrated over each pixel of the rectangle.
fn splat_gaussian(
    img: &mut Image,
    mu: [f64; 2],
    sigma: f64,
    peak: f64,
    rect: (usize, usize, usize, usize),
) {
    let (x0, y0, x1, y1) = rect;
    if sigma <= 1e-9 {
        let (px, py) = (mu[0].floor(), mu[1].floor());
        if px >= x0 as f64 && py >= y0 as f64 && px < x1 as f64 && py < y1 as f64 {
            let v = img.get(px as usize, py as usize);
            img.set(px as usize, py as usize, v + peak as f32);
        }
        return;
    }
    let reach = 5.0 * sigma + 1.0;
    let lo_x = ((mu[0] - reach).floor().max(x0 as f64)) as usize;
    let hi_x = ((mu[0] + reach).ceil().min(x1 as f64)) as usize;
    let lo_y = ((mu[1] - reach).floor().max(y0 as f64)) as usize;
    let hi_y = ((mu[1] + reach).ceil().min(y1 as f64)) as usize;
    if lo_x >= hi_x || lo_y >= hi_y {
        return;
    }
    let norm = 2.0 * std::f64::consts::PI * sigma * sigma * peak;
    let mass = |lo: f64, c: f64| normal_cdf((lo + 1.0 - c) / sigma) - normal_cdf((lo - c) / sigma);
    let wx: Vec<f64> = (lo_x..hi_x).map(|x| mass(x as f64, mu[0])).collect();
    for y in lo_y..hi_y {
        let wy = mass(y as f64, mu[1]) * norm;
        for (i, x) in (lo_x..hi_x).enumerate() {
            let v = img.get(x, y);
            img.set(x, y, v + (wx[i] * wy) as f32);
        }
    }
}

fn splat_point_lf(
    img: &mut Image,
    camera: &CameraModel,
    grid: &crate::geometry::ElementalGrid,
    s: &PointSource,
    gain: f64,
) -> Result<()> {
    let (sv, a) = virtual_point(camera, s.position_mm)?;
    let b = camera.mla.spacing_um;
    let m = lateral_magnification(s.position_mm[2], &camera.optics);
    let sigma = s.sigma_mm * 1e3 * m * (b / a) / camera.sensor.pixel_pitch_um;
    // Lenses whose tile can contain the projection: |S - c| B / a <= tile half-width.
    let radius = (grid.pitch_px() / 2.0 + 5.0 * sigma + 2.0) * a / b;
    let (c0, c1) = grid.lens_span(sv[0], radius, 0);
    let (r0, r1) = grid.lens_span(sv[1], radius, 1);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let Some(r) = grid.get(row, col) else {
                continue;
            };
            let c = r.center;
            let u = [c[0] + (sv[0] - c[0]) * b / a, c[1] + (sv[1] - c[1]) * b / a];
            splat_gaussian(
                img,
                u,
                sigma,
                gain * s.intensity,
                (r.x0, r.y0, r.x0 + r.size, r.y0 + r.size),
            );
        }
    }
    Ok(())
}

/// Renders the HR-channel frame of `scene`.
pub fn render_hr(
    scene: &Scene,
    camera: &CameraModel,
    settings: &RenderSettings,
) -> Result<HrImage> {
    camera.validate()?;
    settings.validate()?;
    scene.validate()?;
    check_depths(scene, &camera.depth_range)?;
    let (w, h) = (camera.hr_sensor.width_px, camera.hr_sensor.height_px);
    let mut img = Image::new(w, h);
    let center = camera.hr_sensor.center_px();
    let focal = camera.hr_focal_px();
    match scene {
        Scene::PointSources(sources) => {
            for s in sources {
                let mu = hr_projection(camera, s.position_mm);
                let sigma = s.sigma_mm * focal / s.position_mm[2];
                splat_gaussian(
                    &mut img,
                    mu,
                    sigma,
                    settings.photon_scale * s.intensity,
                    (0, 0, w, h),
                );
            }
        }
        _ => {
            let w_ref = scene.reference_depth();
            let gain = settings.photon_scale;
            img.data_mut()
                .par_chunks_mut(w)
                .enumerate()
                .for_each(|(y, row)| {
                    for (x, px) in row.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for sy in SUBSAMPLES {
                            for sx in SUBSAMPLES {
                                let q = [x as f64 + sx - center[0], y as f64 + sy - center[1]];
                                acc += trace_hr(scene, q, focal, w_ref).unwrap_or(0.0) as f64;
                            }
                        }
                        *px = (gain * acc / SUBSAMPLE_COUNT) as f32;
                    }
                });
        }
    }
    Ok(finish(img, settings, STREAM_HR, 0))
}

fn trace_hr(scene: &Scene, q: [f64; 2], focal: f64, w_start: f64) -> Option<f32> {
    let mut w = w_start;
    let mut lateral = [0.0; 2];
    for _ in 0..30 {
        lateral = [q[0] * w / focal, q[1] * w / focal];
        let next = scene.depth_at(lateral[0], lateral[1])?;
        let done = (next - w).abs() < 1e-9;
        w = next;
        if done {
            break;
        }
    }
    Some(scene.albedo_at(lateral[0], lateral[1]))
}

/// Point-source scan: `x_steps` lateral positions by `z_steps` depths, both
/// centred on the optical axis / `center_depth_mm`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepProtocol {
    pub x_steps: usize,
    pub x_step_mm: f64,
    pub z_steps: usize,
    pub z_step_mm: f64,
    pub center_depth_mm: f64,
    /// Tolerated excess of the scan over the camera depth range, per side.
    pub range_margin_mm: f64,
    pub intensity: f64,
    pub sigma_mm: f64,
}

impl Default for SweepProtocol {
    fn default() -> Self {
        Self {
            x_steps: 12,
            x_step_mm: 0.8,
            z_steps: 9,
            z_step_mm: 0.64,
            center_depth_mm: 65.0,
            range_margin_mm: 0.2,
            intensity: 0.8,
            sigma_mm: 0.04,
        }
    }
}

impl SweepProtocol {
    pub fn x_positions(&self) -> Vec<f64> {
        let mid = (self.x_steps as f64 - 1.0) / 2.0;
        (0..self.x_steps)
            .map(|i| (i as f64 - mid) * self.x_step_mm)
            .collect()
    }

    pub fn z_positions(&self) -> Vec<f64> {
        let mid = (self.z_steps as f64 - 1.0) / 2.0;
        (0..self.z_steps)
            .map(|i| self.center_depth_mm + (i as f64 - mid) * self.z_step_mm)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepFrameTruth {
    pub index: usize,
    pub position_mm: [f64; 3],
}

/// Frames of a point-source scan. Images are rendered on demand, since the
/// full scan of sensor frames would not fit comfortably in memory.
#[derive(Clone, Debug)]
pub struct SweepDataset {
    /// Camera with the depth range widened to cover the scan.
    pub camera: CameraModel,
    pub settings: RenderSettings,
    pub protocol: SweepProtocol,
    pub frames: Vec<SweepFrameTruth>,
}

impl SweepDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn scene(&self, i: usize) -> Scene {
        Scene::point(
            self.frames[i].position_mm,
            self.protocol.intensity,
            self.protocol.sigma_mm,
        )
    }

    pub fn render(&self, i: usize) -> Result<RawLightFieldImage> {
        render_lightfield_frame(&self.scene(i), &self.camera, &self.settings, i as u64)
    }
}

/// Builds the point-source scan. The camera depth range is widened by at
/// most `range_margin_mm` per side to admit the scan; a scan beyond that is
/// rejected.
pub fn point_source_sweep(
    camera: &CameraModel,
    protocol: &SweepProtocol,
    settings: &RenderSettings,
) -> Result<SweepDataset> {
    if protocol.x_steps == 0 || protocol.z_steps == 0 {
        return config("sweep needs at least one step per axis");
    }
    let zs = protocol.z_positions();
    let (zmin, zmax) = (zs[0].min(zs[zs.len() - 1]), zs[0].max(zs[zs.len() - 1]));
    let base = camera.depth_range;
    let margin = protocol.range_margin_mm;
    let widened = DepthRange::new(base.min_mm - margin, base.max_mm + margin);
    if zmin < widened.min_mm - 1e-9 || zmax > widened.max_mm + 1e-9 {
        return config(format!(
            "sweep depths [{zmin:.3}, {zmax:.3}] mm leave the depth range [{}, {}] mm by more than {margin} mm",
            base.min_mm, base.max_mm
        ));
    }
    let cam = camera.with_depth_range(widened);
    cam.validate()?;
    let mut frames = Vec::with_capacity(zs.len() * protocol.x_steps);
    for &z in &zs {
        for x in protocol.x_positions() {
            frames.push(SweepFrameTruth {
                index: frames.len(),
                position_mm: [x, 0.0, z],
            });
        }
    }
    Ok(SweepDataset {
        camera: cam,
        settings: *settings,
        protocol: *protocol,
        frames,
    })
}
