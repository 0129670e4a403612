//! TOML run configuration shared by the command-line tool and the tests.
//!
//! Lengths are given in millimetres and converted to the micrometre units
//! of [`crate::geometry`]. Every table rejects unknown keys, and
//! `schema_version` must be present and equal to [`SCHEMA_VERSION`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::depth::{DepthCalibration, GridSolverSettings, InterpolationParams};
use crate::disparity::{DisparityParams, SubpixelMethod};
use crate::error::{config, Error, Result};
use crate::fusion::RegistrationParams;
use crate::geometry::{CameraModel, DepthRange, MainOpticsSpec, MlaSpec, SensorSpec};
use crate::pipeline::{OutlierFilter, PipelineSettings, SrStage};
use crate::simulator::{Heightfield, RenderSettings, Scene, SweepProtocol, Texture, TiltedPlane};
use crate::superres::SrParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Seeds sensor noise and procedural textures.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub camera: CameraSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub sr: SrSection,
    #[serde(default)]
    pub disparity: DisparitySection,
    #[serde(default)]
    pub depth: DepthSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            camera: CameraSection::default(),
            simulate: SimulateSection::default(),
            sweep: SweepSection::default(),
            sr: SrSection::default(),
            disparity: DisparitySection::default(),
            depth: DepthSection::default(),
            fusion: FusionSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub sensor_width_px: usize,
    pub sensor_height_px: usize,
    pub pixel_pitch_mm: f64,
    pub mla_pitch_mm: f64,
    /// MLA-to-sensor spacing `B`.
    pub mla_spacing_mm: f64,
    pub mla_focal_length_mm: f64,
    /// Centre of lens (0, 0) in sensor px; half a pitch when absent.
    pub grid_origin_px: Option<[f64; 2]>,
    pub focal_length_mm: f64,
    pub lens_to_mla_mm: f64,
    pub numerical_aperture: f64,
    pub wavelength_mm: f64,
    pub working_distance_mm: f64,
    pub hr_width_px: usize,
    pub hr_height_px: usize,
    pub hr_pixel_pitch_mm: f64,
    pub depth_min_mm: f64,
    pub depth_max_mm: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        let mut s = Self::from_camera(&CameraModel::default());
        s.grid_origin_px = None;
        s
    }
}

impl CameraSection {
    pub fn from_camera(c: &CameraModel) -> Self {
        Self {
            sensor_width_px: c.sensor.width_px,
            sensor_height_px: c.sensor.height_px,
            pixel_pitch_mm: c.sensor.pixel_pitch_um / 1e3,
            mla_pitch_mm: c.mla.pitch_um / 1e3,
            mla_spacing_mm: c.mla.spacing_um / 1e3,
            mla_focal_length_mm: c.mla.focal_length_um / 1e3,
            grid_origin_px: Some(c.mla.grid_origin_px),
            focal_length_mm: c.optics.effective_focal_length_um / 1e3,
            lens_to_mla_mm: c.optics.lens_to_mla_um / 1e3,
            numerical_aperture: c.optics.numerical_aperture,
            wavelength_mm: c.optics.wavelength_um / 1e3,
            working_distance_mm: c.optics.nominal_working_distance_um / 1e3,
            hr_width_px: c.hr_sensor.width_px,
            hr_height_px: c.hr_sensor.height_px,
            hr_pixel_pitch_mm: c.hr_sensor.pixel_pitch_um / 1e3,
            depth_min_mm: c.depth_range.min_mm,
            depth_max_mm: c.depth_range.max_mm,
        }
    }

    /// Validated camera model in micrometre units.
    pub fn to_camera(&self) -> Result<CameraModel> {
        let pixel_pitch_um = self.pixel_pitch_mm * 1e3;
        let pitch_um = self.mla_pitch_mm * 1e3;
        let half = 0.5 * pitch_um / pixel_pitch_um;
        let camera = CameraModel {
            sensor: SensorSpec {
                width_px: self.sensor_width_px,
                height_px: self.sensor_height_px,
                pixel_pitch_um,
            },
            mla: MlaSpec {
                pitch_um,
                spacing_um: self.mla_spacing_mm * 1e3,
                focal_length_um: self.mla_focal_length_mm * 1e3,
                grid_origin_px: self.grid_origin_px.unwrap_or([half, half]),
            },
            optics: MainOpticsSpec {
                effective_focal_length_um: self.focal_length_mm * 1e3,
                lens_to_mla_um: self.lens_to_mla_mm * 1e3,
                numerical_aperture: self.numerical_aperture,
                wavelength_um: self.wavelength_mm * 1e3,
                nominal_working_distance_um: self.working_distance_mm * 1e3,
            },
            hr_sensor: SensorSpec {
                width_px: self.hr_width_px,
                height_px: self.hr_height_px,
                pixel_pitch_um: self.hr_pixel_pitch_mm * 1e3,
            },
            depth_range: DepthRange::new(self.depth_min_mm, self.depth_max_mm),
        };
        if camera.pitch_px() < 3.0 {
            return config(format!(
                "camera: MLA pitch is {:.3} px, at least 3 px needed",
                camera.pitch_px()
            ));
        }
        camera.validate()?;
        Ok(camera)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Plane,
    TiltedPlane,
    Bump,
    Point,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Plane => "plane",
            SceneKind::TiltedPlane => "tilted_plane",
            SceneKind::Bump => "bump",
            SceneKind::Point => "point",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Noise,
    Checker,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSection {
    pub kind: TextureKind,
    pub feature_mm: f64,
    pub contrast: f32,
    pub period_mm: f64,
    pub low: f32,
    pub high: f32,
    pub value: f32,
}

impl Default for TextureSection {
    fn default() -> Self {
        Self {
            kind: TextureKind::Noise,
            feature_mm: 0.1,
            contrast: 1.0,
            period_mm: 0.5,
            low: 0.2,
            high: 0.8,
            value: 0.5,
        }
    }
}

impl TextureSection {
    pub fn to_texture(&self, seed: u64) -> Result<Texture> {
        Ok(match self.kind {
            TextureKind::Noise => {
                if !(self.feature_mm > 0.0) {
                    return config("simulate.texture.feature_mm must be positive");
                }
                Texture::Noise {
                    seed,
                    feature_mm: self.feature_mm,
                    contrast: self.contrast,
                }
            }
            TextureKind::Checker => {
                if !(self.period_mm > 0.0) {
                    return config("simulate.texture.period_mm must be positive");
                }
                Texture::Checker {
                    period_mm: self.period_mm,
                    low: self.low,
                    high: self.high,
                }
            }
            TextureKind::Uniform => Texture::Uniform(self.value),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub scene: SceneKind,
    /// Plane depth, tilted-plane centre or bump base depth.
    pub depth_mm: f64,
    pub tilt_deg: f64,
    pub azimuth_deg: f64,
    pub half_extent_mm: f64,
    /// Bump peak height above the base, towards the far end of the range.
    pub bump_height_mm: f64,
    pub bump_sigma_mm: f64,
    pub point_position_mm: [f64; 3],
    pub point_intensity: f64,
    pub point_sigma_mm: f64,
    pub texture: TextureSection,
    pub noise_sigma: f64,
    pub photon_scale: f64,
    /// Write the HR frame as 16-bit PNG instead of 8-bit.
    pub hr_16bit: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            scene: SceneKind::TiltedPlane,
            depth_mm: 65.0,
            tilt_deg: 20.0,
            azimuth_deg: 0.0,
            half_extent_mm: 6.5,
            bump_height_mm: 2.0,
            bump_sigma_mm: 2.0,
            point_position_mm: [0.0, 0.0, 65.0],
            point_intensity: 0.8,
            point_sigma_mm: 0.04,
            texture: TextureSection::default(),
            noise_sigma: 0.0,
            photon_scale: 1.0,
            hr_16bit: false,
        }
    }
}

impl SimulateSection {
    pub fn scene(&self, seed: u64) -> Result<Scene> {
        let scene = match self.scene {
            SceneKind::Plane => Scene::plane(
                self.depth_mm,
                self.half_extent_mm,
                self.texture.to_texture(seed)?,
            ),
            SceneKind::TiltedPlane => Scene::TiltedPlane(TiltedPlane {
                center_depth_mm: self.depth_mm,
                tilt_deg: self.tilt_deg,
                azimuth_deg: self.azimuth_deg,
                half_extent_mm: self.half_extent_mm,
                texture: self.texture.to_texture(seed)?,
            }),
            SceneKind::Bump => {
                if !(self.bump_sigma_mm > 0.0 && self.half_extent_mm > 0.0) {
                    return config("simulate: bump_sigma_mm and half_extent_mm must be positive");
                }
                let e = self.half_extent_mm;
                let n = ((2.0 * e / 0.1).round() as usize + 1).clamp(2, 1001);
                let (base, h, s) = (self.depth_mm, self.bump_height_mm, self.bump_sigma_mm);
                Scene::Heightfield(Heightfield::from_fn(
                    [-e, -e, e, e],
                    (n, n),
                    self.texture.to_texture(seed)?,
                    |x, y| base + h * (-(x * x + y * y) / (2.0 * s * s)).exp(),
                ))
            }
            SceneKind::Point => Scene::point(
                self.point_position_mm,
                self.point_intensity,
                self.point_sigma_mm,
            ),
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn render_settings(&self, seed: u64) -> Result<RenderSettings> {
        let s = RenderSettings {
            noise_sigma: self.noise_sigma,
            photon_scale: self.photon_scale,
            rng_seed: seed,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Point-source scan used by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub x_steps: usize,
    pub x_step_mm: f64,
    pub z_steps: usize,
    pub z_step_mm: f64,
    pub center_depth_mm: f64,
    pub range_margin_mm: f64,
    pub intensity: f64,
    pub sigma_mm: f64,
    pub noise_sigma: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        let p = SweepProtocol::default();
        Self {
            x_steps: p.x_steps,
            x_step_mm: p.x_step_mm,
            z_steps: p.z_steps,
            z_step_mm: p.z_step_mm,
            center_depth_mm: p.center_depth_mm,
            range_margin_mm: p.range_margin_mm,
            intensity: p.intensity,
            sigma_mm: p.sigma_mm,
            noise_sigma: 0.0,
        }
    }
}

impl SweepSection {
    pub fn protocol(&self) -> SweepProtocol {
        SweepProtocol {
            x_steps: self.x_steps,
            x_step_mm: self.x_step_mm,
            z_steps: self.z_steps,
            z_step_mm: self.z_step_mm,
            center_depth_mm: self.center_depth_mm,
            range_margin_mm: self.range_margin_mm,
            intensity: self.intensity,
            sigma_mm: self.sigma_mm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrSection {
    pub enabled: bool,
    pub sigma: Option<f64>,
    pub k_neighbors: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub mean_removal: bool,
    /// HR-to-elemental resolution ratio; taken from the camera model when absent.
    pub ratio: Option<f64>,
}

impl Default for SrSection {
    fn default() -> Self {
        let p = SrParams::default();
        Self {
            enabled: false,
            sigma: p.sigma,
            k_neighbors: p.k_neighbors,
            patch_size: p.patch_size,
            stride: p.stride,
            mean_removal: p.mean_removal,
            ratio: None,
        }
    }
}

impl SrSection {
    pub fn params(&self) -> Result<SrParams> {
        let p = SrParams {
            sigma: self.sigma,
            k_neighbors: self.k_neighbors,
            patch_size: self.patch_size,
            stride: self.stride,
            mean_removal: self.mean_removal,
        };
        p.validate()?;
        if self.ratio.is_some_and(|r| !(r >= 1.0 && r.is_finite())) {
            return config("sr.ratio must be at least 1");
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubpixelKind {
    InterpolatedNcc,
    Parabola,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisparitySection {
    pub threshold: f32,
    pub descriptor_size: usize,
    pub nms_radius: usize,
    pub max_correlation_distance: f64,
    /// `[min, max]` disparity in px; derived from the depth range when absent.
    pub search_window_px: Option<[f64; 2]>,
    pub perpendicular_tolerance: f64,
    pub merge_radius_px: f64,
    pub subpixel: SubpixelKind,
}

impl Default for DisparitySection {
    fn default() -> Self {
        let p = DisparityParams::default();
        Self {
            threshold: p.threshold,
            descriptor_size: p.descriptor_size,
            nms_radius: p.nms_radius,
            max_correlation_distance: p.max_correlation_distance,
            search_window_px: p.search_window_px.map(|(a, b)| [a, b]),
            perpendicular_tolerance: p.perpendicular_tolerance,
            merge_radius_px: p.merge_radius_px,
            subpixel: SubpixelKind::InterpolatedNcc,
        }
    }
}

impl DisparitySection {
    pub fn params(&self) -> DisparityParams {
        DisparityParams {
            threshold: self.threshold,
            descriptor_size: self.descriptor_size,
            nms_radius: self.nms_radius,
            max_correlation_distance: self.max_correlation_distance,
            search_window_px: self.search_window_px.map(|[a, b]| (a, b)),
            perpendicular_tolerance: self.perpendicular_tolerance,
            merge_radius_px: self.merge_radius_px,
            subpixel: match self.subpixel {
                SubpixelKind::InterpolatedNcc => SubpixelMethod::InterpolatedNcc,
                SubpixelKind::Parabola => SubpixelMethod::Parabola,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthSection {
    pub calibration_step_mm: f64,
    pub outlier_filter: bool,
    pub outlier_radius_px: f64,
    pub outlier_threshold_mm: f64,
    pub tps_max_samples: usize,
    pub solver_tolerance_mm: f64,
    pub solver_max_iterations: usize,
}

impl Default for DepthSection {
    fn default() -> Self {
        let o = OutlierFilter::default();
        let i = InterpolationParams::default();
        Self {
            calibration_step_mm: 0.1,
            outlier_filter: true,
            outlier_radius_px: o.radius_px,
            outlier_threshold_mm: o.threshold_mm,
            tps_max_samples: i.tps_max_samples,
            solver_tolerance_mm: i.solver.tolerance,
            solver_max_iterations: i.solver.max_iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Object depth of the virtual plane used for the view and the dense
    /// map; the working distance when absent.
    pub registration_depth_mm: Option<f64>,
    pub min_scale: f64,
    pub max_scale: f64,
    pub scale_steps: usize,
    pub max_rotation_deg: f64,
    pub rotation_step_deg: f64,
    pub min_score: f64,
    pub max_points: usize,
    pub write_ply: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        let r = RegistrationParams::default();
        Self {
            registration_depth_mm: None,
            min_scale: r.min_scale,
            max_scale: r.max_scale,
            scale_steps: r.scale_steps,
            max_rotation_deg: r.max_rotation_deg,
            rotation_step_deg: r.rotation_step_deg,
            min_score: r.min_score,
            max_points: r.max_points,
            write_ply: true,
        }
    }
}

impl FusionSection {
    pub fn registration(&self) -> Result<RegistrationParams> {
        if !(self.min_scale > 0.0 && self.max_scale >= self.min_scale) || self.scale_steps == 0 {
            return config("fusion: need 0 < min_scale <= max_scale and scale_steps >= 1");
        }
        if !(self.max_rotation_deg >= 0.0 && self.rotation_step_deg > 0.0) {
            return config("fusion: rotation range must be non-negative and its step positive");
        }
        if self.max_points < 16 {
            return config("fusion.max_points must be at least 16");
        }
        Ok(RegistrationParams {
            min_scale: self.min_scale,
            max_scale: self.max_scale,
            scale_steps: self.scale_steps,
            max_rotation_deg: self.max_rotation_deg,
            rotation_step_deg: self.rotation_step_deg,
            min_score: self.min_score,
            max_points: self.max_points,
        })
    }
}

/// Input and output locations. Relative paths resolve against the
/// directory of the configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Raw light-field frame (16-bit PNG).
    pub lightfield: Option<PathBuf>,
    /// HR frame (PNG).
    pub hr: Option<PathBuf>,
    /// Disparity samples CSV, input to `depth`.
    pub disparity: Option<PathBuf>,
    /// Calibration knots CSV (`a_mm,w_mm`); derived from the camera when absent.
    pub calibration: Option<PathBuf>,
    /// Dense depth PFM, input to `fuse`.
    pub depth: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl PathsSection {
    /// Makes relative paths absolute with respect to `base`.
    pub fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.lightfield,
            &mut self.hr,
            &mut self.disparity,
            &mut self.calibration,
            &mut self.depth,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

impl PipelineConfig {
    /// Parses and checks the schema version. Unknown keys are errors.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            ));
        }
        Ok(cfg)
    }

    /// Reads a file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.resolve(dir);
        }
        Ok(cfg)
    }

    /// Canonical serialization; identical configurations give identical text.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks every section that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        let camera = self.camera.to_camera()?;
        self.sr.params()?;
        self.disparity
            .params()
            .validate(camera.elemental_size_px())?;
        self.fusion.registration()?;
        self.simulate.scene(self.seed)?;
        self.simulate.render_settings(self.seed)?;
        if !(self.depth.calibration_step_mm > 0.0) {
            return config("depth.calibration_step_mm must be positive");
        }
        if !(self.depth.solver_tolerance_mm > 0.0) || self.depth.solver_max_iterations == 0 {
            return config("depth: solver tolerance and iteration limit must be positive");
        }
        if !(self.sweep.noise_sigma >= 0.0) {
            return config("sweep.noise_sigma must be non-negative");
        }
        Ok(())
    }

    /// Library settings for the processing chain. `calibration` overrides
    /// the knots derived from the camera model.
    pub fn pipeline_settings(
        &self,
        calibration: Option<DepthCalibration>,
    ) -> Result<PipelineSettings> {
        let sr = if self.sr.enabled {
            Some(SrStage {
                params: self.sr.params()?,
                ratio: self.sr.ratio,
            })
        } else {
            None
        };
        let d = &self.depth;
        Ok(PipelineSettings {
            sr,
            disparity: self.disparity.params(),
            calibration,
            calibration_step_mm: d.calibration_step_mm,
            outliers: d.outlier_filter.then_some(OutlierFilter {
                radius_px: d.outlier_radius_px,
                threshold_mm: d.outlier_threshold_mm,
            }),
            interpolation: InterpolationParams {
                tps_max_samples: d.tps_max_samples,
                solver: GridSolverSettings {
                    tolerance: d.solver_tolerance_mm,
                    max_iterations: d.solver_max_iterations,
                    parallel: true,
                },
            },
            registration: self.fusion.registration()?,
            registration_depth_mm: self.fusion.registration_depth_mm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml_str("schema_version = 1\n").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
        let cam = cfg.camera.to_camera().unwrap();
        let def = CameraModel::default();
        assert_eq!(cam.sensor, def.sensor);
        assert!((cam.mla.pitch_um - def.mla.pitch_um).abs() < 1e-9);
        assert!((cam.optics.wavelength_um - 0.6).abs() < 1e-12);
    }

    #[test]
    fn missing_schema_version_rejected() {
        assert!(matches!(
            PipelineConfig::from_toml_str("seed = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("schema_version = 2\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_keys_rejected_in_every_table() {
        for (table, key) in [
            ("", "sead = 1"),
            ("[camera]", "pixel_pich_mm = 0.0045"),
            ("[simulate]", "sceen = \"plane\""),
            ("[simulate.texture]", "contrst = 1.0"),
            ("[sweep]", "x_step = 2"),
            ("[sr]", "enable = true"),
            ("[disparity]", "treshold = 0.1"),
            ("[depth]", "calibration_step = 0.1"),
            ("[fusion]", "min_scal = 1.0"),
            ("[paths]", "output = \"x\""),
            ("[extra]", "a = 1"),
        ] {
            let text = format!("schema_version = 1\n{table}\n{key}\n");
            match PipelineConfig::from_toml_str(&text) {
                Err(Error::Config(msg)) => assert!(msg.contains("unknown"), "{msg}"),
                other => panic!("{table} {key}: {other:?}"),
            }
        }
    }

    #[test]
    fn serialization_round_trips() {
        let mut cfg = PipelineConfig {
            seed: 77,
            ..PipelineConfig::default()
        };
        cfg.sr.enabled = true;
        cfg.sr.sigma = Some(0.3);
        cfg.simulate.scene = SceneKind::Bump;
        cfg.disparity.subpixel = SubpixelKind::Parabola;
        cfg.disparity.search_window_px = Some([8.0, 14.0]);
        cfg.fusion.registration_depth_mm = Some(64.0);
        cfg.paths.output_dir = Some("out".into());
        let text = cfg.to_toml_string();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = PipelineConfig::default();
        cfg.camera.mla_spacing_mm = 2.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = PipelineConfig::default();
        cfg.camera.mla_pitch_mm = 0.01;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = PipelineConfig::default();
        cfg.disparity.descriptor_size = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn settings_follow_sections() {
        let mut cfg = PipelineConfig::default();
        cfg.depth.outlier_filter = false;
        cfg.sr.enabled = true;
        let s = cfg.pipeline_settings(None).unwrap();
        assert!(s.outliers.is_none());
        assert_eq!(s.sr.unwrap().params, SrParams::default());
        assert_eq!(s.registration, RegistrationParams::default());
        let d = PipelineConfig::default().pipeline_settings(None).unwrap();
        assert_eq!(d, PipelineSettings::default());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut p = PathsSection {
            lightfield: Some("lf.png".into()),
            hr: Some("/abs/hr.png".into()),
            ..Default::default()
        };
        p.resolve(Path::new("/runs/a"));
        assert_eq!(p.lightfield.unwrap(), PathBuf::from("/runs/a/lf.png"));
        assert_eq!(p.hr.unwrap(), PathBuf::from("/abs/hr.png"));
    }
}
