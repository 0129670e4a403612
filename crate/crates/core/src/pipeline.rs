//! Steps I-IV in order: optional super-resolution of the light field,
//! disparity, depth (calibration, outlier removal, interpolation) and
//! fusion with the HR image.

use crate::depth::{
    depth_from_disparity, interpolate_depth, reject_outliers, DenseDepthMap, DepthCalibration,
    InterpolationParams, SparseDepth,
};
use crate::disparity::{disparity_field, DisparityField, DisparityParams};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, reconstruct_view, register, warp_depth, FusedRgbd, HrIntrinsics, ReconstructedView,
    Registration, RegistrationParams,
};
use crate::geometry::{CameraModel, ViewLattice};
use crate::image::Image;
use crate::simulator::{object_to_virtual, RawLightFieldImage};
use crate::superres::{
    build_dictionary, model_resolution_ratio, superresolve_lightfield, SrParams,
};

/// Neighbourhood median filter applied to sparse depth before interpolation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutlierFilter {
    pub radius_px: f64,
    pub threshold_mm: f64,
}

impl Default for OutlierFilter {
    fn default() -> Self {
        Self {
            radius_px: 12.0,
            threshold_mm: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrStage {
    pub params: SrParams,
    /// HR-to-elemental resolution ratio; the camera-model ratio at the
    /// registration depth when `None`.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSettings {
    pub sr: Option<SrStage>,
    pub disparity: DisparityParams,
    /// Calibration knots; derived from the camera model when `None`.
    pub calibration: Option<DepthCalibration>,
    pub calibration_step_mm: f64,
    pub outliers: Option<OutlierFilter>,
    pub interpolation: InterpolationParams,
    pub registration: RegistrationParams,
    /// Object depth whose virtual plane is used for the view and the dense
    /// map; the nominal working distance when `None`.
    pub registration_depth_mm: Option<f64>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            sr: None,
            disparity: DisparityParams::default(),
            calibration: None,
            calibration_step_mm: 0.1,
            outliers: Some(OutlierFilter::default()),
            interpolation: InterpolationParams::default(),
            registration: RegistrationParams::default(),
            registration_depth_mm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Light field that entered disparity estimation (super-resolved or not).
    pub lightfield: RawLightFieldImage,
    pub field: DisparityField,
    pub sparse: SparseDepth,
    pub dense: DenseDepthMap,
    pub view: ReconstructedView,
    pub registration: Registration,
    pub fused: FusedRgbd,
}

/// Error wrapper naming the stage that failed.
fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        Error::Domain(m) => Error::Domain(format!("{name}: {m}")),
        Error::Processing(m) => Error::Processing(format!("{name}: {m}")),
        Error::Format(m) => Error::Format(format!("{name}: {m}")),
        other => other,
    })
}

/// Virtual distance (um) used for the view and the dense map.
pub fn registration_distance_um(camera: &CameraModel, settings: &PipelineSettings) -> Result<f64> {
    let w = settings
        .registration_depth_mm
        .unwrap_or(camera.optics.nominal_working_distance_um * 1e-3);
    object_to_virtual(w, &camera.optics)
}

/// Step I: super-resolves the light field with a dictionary learned from
/// the HR image.
pub fn super_resolve(
    lf: &RawLightFieldImage,
    hr: &Image,
    stage_cfg: &SrStage,
    w_mm: f64,
) -> Result<RawLightFieldImage> {
    let ratio = match stage_cfg.ratio {
        Some(r) => r,
        None => model_resolution_ratio(&lf.camera, w_mm)?,
    };
    let dict = build_dictionary(hr, ratio, &stage_cfg.params)?;
    superresolve_lightfield(lf, &dict, &stage_cfg.params)
}

/// Step III from an existing disparity field: calibrated sparse depth,
/// outlier removal and the dense map on the lattice of the virtual plane
/// at `a_um`.
pub fn depth_from_field(
    field: &DisparityField,
    camera: &CameraModel,
    settings: &PipelineSettings,
    a_um: f64,
) -> Result<(SparseDepth, DenseDepthMap)> {
    let cal = match &settings.calibration {
        Some(c) => c.clone(),
        None => stage(
            "calibration",
            DepthCalibration::from_camera(camera, camera.depth_range, settings.calibration_step_mm),
        )?,
    };
    let mut sparse = stage("depth", depth_from_disparity(field, camera, &cal))?;
    if let Some(f) = settings.outliers {
        sparse = reject_outliers(&sparse, f.radius_px, f.threshold_mm);
    }
    let lattice = stage("depth", ViewLattice::for_camera(camera, a_um))?;
    let dense = stage(
        "interpolation",
        interpolate_depth(&sparse, &lattice, &settings.interpolation),
    )?;
    Ok((sparse, dense))
}

/// Steps II-III: sparse disparity, calibrated depth and the dense map.
pub fn depth_map(
    lf: &RawLightFieldImage,
    settings: &PipelineSettings,
    a_um: f64,
) -> Result<(DisparityField, SparseDepth, DenseDepthMap)> {
    let field = stage("disparity", disparity_field(lf, &settings.disparity))?;
    let (sparse, dense) = depth_from_field(&field, &lf.camera, settings, a_um)?;
    Ok((field, sparse, dense))
}

/// Runs the full chain on a light-field / HR pair.
pub fn run_pipeline(
    lf: &RawLightFieldImage,
    hr: &Image,
    settings: &PipelineSettings,
) -> Result<PipelineOutput> {
    let w_reg = settings
        .registration_depth_mm
        .unwrap_or(lf.camera.optics.nominal_working_distance_um * 1e-3);
    let lightfield = match &settings.sr {
        Some(s) => stage("superres", super_resolve(lf, hr, s, w_reg))?,
        None => lf.clone(),
    };
    let a = stage(
        "fusion",
        registration_distance_um(&lightfield.camera, settings),
    )?;
    let (field, sparse, dense) = depth_map(&lightfield, settings, a)?;
    let view = stage("reconstruct", reconstruct_view(&lightfield, a))?;
    let registration = stage("registration", register(&view, hr, &settings.registration))?;
    let warped = stage(
        "warp",
        warp_depth(&dense, &registration.transform, hr.dims()),
    )?;
    let fused = stage(
        "fusion",
        fuse(hr, &warped, HrIntrinsics::from_camera(&lightfield.camera)),
    )?;
    Ok(PipelineOutput {
        lightfield,
        field,
        sparse,
        dense,
        view,
        registration,
        fused,
    })
}
