//! Evaluation harnesses: point-source depth precision, Rayleigh
//! resolvability and surface tilt.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::depth::{depth_from_disparity, DenseDepthMap, DepthCalibration};
use crate::disparity::{disparity_field, DisparityParams};
use crate::error::{domain, processing, Result};
use crate::fusion::FusedRgbd;
use crate::geometry::{disparity_from_virtual_depth, virtual_depth_from_disparity, CameraModel};
use crate::image::{Image, Mask};
use crate::io::csv_err;
use crate::simulator::{
    object_to_virtual, surface_depth_at_virtual, virtual_to_object, virtual_to_object_lateral,
    Scene, SweepDataset,
};

/// Median of finite values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Arithmetic mean and sample standard deviation (n - 1; zero for one value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((m, 0.0));
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    Some((m, var.sqrt()))
}

/// Published hardware figures, kept alongside simulated results for context.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HardwareReference {
    pub rmse_of_means_mm: f64,
    pub precision_mm: f64,
    pub reproducible_in_simulation: bool,
    pub note: &'static str,
}

impl Default for HardwareReference {
    fn default() -> Self {
        Self {
            rmse_of_means_mm: 0.07,
            precision_mm: 0.37,
            reproducible_in_simulation: false,
            note:
                "measured on the physical prototype; the simulator has no comparable error sources",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrecisionRow {
    pub z_true_mm: f64,
    pub mean_w_mm: f64,
    pub std_w_mm: f64,
    /// Frames contributing to the row.
    pub n_samples: usize,
    /// Depth samples across those frames.
    pub n_depth_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExcludedFrame {
    pub index: usize,
    pub position_mm: [f64; 3],
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrecisionReport {
    pub per_z: Vec<PrecisionRow>,
    pub rmse_of_means: f64,
    pub mean_std: f64,
    /// Worst-case depth error of a 0.5 px disparity error over the scan.
    pub quantization_bound_mm: f64,
    pub excluded_frames: Vec<ExcludedFrame>,
    pub hardware_reference: HardwareReference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionConfig {
    pub disparity: DisparityParams,
    pub calibration_step_mm: f64,
}

impl Default for PrecisionConfig {
    fn default() -> Self {
        Self {
            disparity: DisparityParams::default(),
            calibration_step_mm: 0.1,
        }
    }
}

/// Per-frame estimate: the median depth of the frame's samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameEstimate {
    pub index: usize,
    pub w_mm: f64,
    pub samples: usize,
}

/// Runs disparity and depth on every sweep frame and summarises the
/// recovered depth per scan depth.
pub fn depth_precision_experiment(
    sweep: &SweepDataset,
    config: &PrecisionConfig,
) -> Result<PrecisionReport> {
    if sweep.is_empty() {
        return domain("sweep has no frames");
    }
    let camera = &sweep.camera;
    let cal =
        DepthCalibration::from_camera(camera, camera.depth_range, config.calibration_step_mm)?;
    let results: Vec<Result<Option<FrameEstimate>>> = (0..sweep.len())
        .into_par_iter()
        .map(|i| {
            let lf = sweep.render(i)?;
            let field = disparity_field(&lf, &config.disparity)?;
            let sparse = depth_from_disparity(&field, camera, &cal)?;
            Ok(sparse.median_depth_mm().map(|w| FrameEstimate {
                index: i,
                w_mm: w,
                samples: sparse.len(),
            }))
        })
        .collect();
    let mut estimates = Vec::new();
    let mut excluded = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some(e) => estimates.push(e),
            None => {
                let f = sweep.frames[i];
                log::warn!(
                    "sweep frame {i} at {:?} mm produced no depth samples",
                    f.position_mm
                );
                excluded.push(ExcludedFrame {
                    index: i,
                    position_mm: f.position_mm,
                    reason: "no depth samples".into(),
                });
            }
        }
    }
    let zs: Vec<f64> = sweep.protocol.z_positions();
    summarise(
        sweep,
        &zs,
        &estimates,
        excluded,
        quantization_bound(camera, &cal, &zs)?,
    )
}

fn summarise(
    sweep: &SweepDataset,
    zs: &[f64],
    estimates: &[FrameEstimate],
    excluded: Vec<ExcludedFrame>,
    bound: f64,
) -> Result<PrecisionReport> {
    let mut per_z = Vec::new();
    for &z in zs {
        let rows: Vec<&FrameEstimate> = estimates
            .iter()
            .filter(|e| (sweep.frames[e.index].position_mm[2] - z).abs() < 1e-9)
            .collect();
        let ws: Vec<f64> = rows.iter().map(|e| e.w_mm).collect();
        if let Some((m, s)) = mean_std(&ws) {
            per_z.push(PrecisionRow {
                z_true_mm: z,
                mean_w_mm: m,
                std_w_mm: s,
                n_samples: ws.len(),
                n_depth_samples: rows.iter().map(|e| e.samples).sum(),
            });
        } else {
            log::warn!("no usable frames at z = {z:.3} mm");
        }
    }
    if per_z.is_empty() {
        return processing("no sweep frame produced depth samples");
    }
    let n = per_z.len() as f64;
    let rmse_of_means = (per_z
        .iter()
        .map(|r| (r.mean_w_mm - r.z_true_mm).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let mean_std = per_z.iter().map(|r| r.std_w_mm).sum::<f64>() / n;
    Ok(PrecisionReport {
        per_z,
        rmse_of_means,
        mean_std,
        quantization_bound_mm: bound,
        excluded_frames: excluded,
        hardware_reference: HardwareReference::default(),
    })
}

/// Largest `|w(D +- 0.5 px) - z|` over the given depths, where `D` is the
/// exact disparity of depth `z` and `w` maps disparity back through the
/// virtual-depth relation and the calibration (thin-lens extrapolation
/// outside the calibrated interval).
pub fn quantization_bound(camera: &CameraModel, cal: &DepthCalibration, zs: &[f64]) -> Result<f64> {
    let half_px = 0.5 * camera.sensor.pixel_pitch_um;
    let (lo, hi) = cal.valid_range();
    let mut worst = 0.0f64;
    for &z in zs {
        let d = disparity_from_virtual_depth(object_to_virtual(z, &camera.optics)?, camera)?;
        for dd in [d - half_px, d + half_px] {
            let a = virtual_depth_from_disparity(dd, camera)?;
            let a_mm = a * 1e-3;
            let w = if a_mm >= lo && a_mm <= hi {
                cal.eval(a_mm).w_mm
            } else {
                virtual_to_object(a, &camera.optics)?
            };
            worst = worst.max((w - z).abs());
        }
    }
    Ok(worst)
}

/// Writes the per-depth rows: `z_true_mm,mean_w_mm,std_w_mm,n_frames,n_depth_samples`.
pub fn write_precision_csv(path: &Path, report: &PrecisionReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "z_true_mm",
        "mean_w_mm",
        "std_w_mm",
        "n_frames",
        "n_depth_samples",
    ])
    .map_err(csv_err)?;
    for r in &report.per_z {
        w.write_record([
            format!("{:.6}", r.z_true_mm),
            format!("{:.6}", r.mean_w_mm),
            format!("{:.6}", r.std_w_mm),
            r.n_samples.to_string(),
            r.n_depth_samples.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Structured-text summary of a report.
pub fn precision_summary_toml(report: &PrecisionReport) -> Result<String> {
    toml::to_string(report).map_err(|e| crate::Error::Format(e.to_string()))
}

/// Errorbar chart of recovered mean +- std against true depth, with the
/// identity line in grey. Intensities: background 1, axes 0.
pub fn errorbar_plot(report: &PrecisionReport, width: usize, height: usize) -> Image {
    let mut img = Image::filled(width, height, 1.0);
    let lo = report
        .per_z
        .iter()
        .map(|r| r.z_true_mm.min(r.mean_w_mm - r.std_w_mm))
        .fold(f64::INFINITY, f64::min);
    let hi = report
        .per_z
        .iter()
        .map(|r| r.z_true_mm.max(r.mean_w_mm + r.std_w_mm))
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.08).max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let margin = 0.1;
    let px = |z: f64| (margin + (1.0 - 2.0 * margin) * (z - lo) / (hi - lo)) * (width as f64 - 1.0);
    let py = |w: f64| {
        (1.0 - margin - (1.0 - 2.0 * margin) * (w - lo) / (hi - lo)) * (height as f64 - 1.0)
    };
    let dot = |img: &mut Image, x: f64, y: f64, v: f32| {
        let (x, y) = (x.round(), y.round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height {
            img.set(x as usize, y as usize, v);
        }
    };
    let steps = 4 * width.max(height);
    for k in 0..=steps {
        let t = lo + (hi - lo) * k as f64 / steps as f64;
        dot(&mut img, px(t), py(t), 0.7);
        dot(&mut img, px(t), py(lo), 0.0);
        dot(&mut img, px(lo), py(t), 0.0);
    }
    for r in &report.per_z {
        let x = px(r.z_true_mm);
        let (y0, y1) = (py(r.mean_w_mm + r.std_w_mm), py(r.mean_w_mm - r.std_w_mm));
        let mut y = y0.floor();
        while y <= y1.ceil() {
            dot(&mut img, x, y, 0.0);
            y += 1.0;
        }
        for d in -3i32..=3 {
            dot(&mut img, x + d as f64, y0, 0.0);
            dot(&mut img, x + d as f64, y1, 0.0);
            for e in -2..=2 {
                if d.abs() <= 2 {
                    dot(&mut img, x + d as f64, py(r.mean_w_mm) + e as f64, 0.0);
                }
            }
        }
    }
    img
}

/// Saddle-to-peak threshold of the Rayleigh criterion.
pub fn rayleigh_threshold() -> f64 {
    8.0 / (PI * PI)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResolvabilityResult {
    pub resolvable: bool,
    pub saddle_to_peak_ratio: f64,
    pub threshold: f64,
    /// Indices of the two highest local maxima, in profile order.
    pub peaks: Option<[usize; 2]>,
    pub saddle: Option<usize>,
}

/// Rayleigh test on a 1-D irradiance profile: the saddle between the two
/// highest local maxima, divided by the mean of those maxima, must be
/// strictly below `8 / pi^2`. Plateaus count as one maximum.
pub fn rayleigh_resolvable(profile: &[f64]) -> Result<ResolvabilityResult> {
    if profile.len() < 5 {
        return domain(format!(
            "profile needs at least 5 samples, got {}",
            profile.len()
        ));
    }
    if profile.iter().any(|v| !v.is_finite()) {
        return domain("profile contains non-finite values");
    }
    if profile.iter().any(|&v| v < 0.0) {
        return domain("irradiance profile must be non-negative");
    }
    let threshold = rayleigh_threshold();
    let mut maxima = Vec::new();
    let mut i = 0;
    while i < profile.len() {
        let mut j = i;
        while j + 1 < profile.len() && profile[j + 1] == profile[i] {
            j += 1;
        }
        let left = i > 0 && profile[i - 1] < profile[i];
        let right = j + 1 < profile.len() && profile[j + 1] < profile[i];
        if left && right {
            maxima.push((i + j) / 2);
        }
        i = j + 1;
    }
    if maxima.len() < 2 {
        return Ok(ResolvabilityResult {
            resolvable: false,
            saddle_to_peak_ratio: 1.0,
            threshold,
            peaks: None,
            saddle: None,
        });
    }
    let mut order = maxima.clone();
    order.sort_by(|&a, &b| profile[b].total_cmp(&profile[a]).then(a.cmp(&b)));
    let (p, q) = (order[0].min(order[1]), order[0].max(order[1]));
    let saddle = (p..=q)
        .min_by(|&a, &b| profile[a].total_cmp(&profile[b]))
        .unwrap();
    let ratio = profile[saddle] / (0.5 * (profile[p] + profile[q]));
    Ok(ResolvabilityResult {
        resolvable: ratio < threshold,
        saddle_to_peak_ratio: ratio,
        threshold,
        peaks: Some([p, q]),
        saddle: Some(saddle),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TiltReport {
    pub fitted_tilt_deg: f64,
    pub error_deg: f64,
    /// Unit plane normal with non-negative z.
    pub normal: [f64; 3],
    pub points: usize,
}

/// Total-least-squares plane through 3-D points; tilt is the angle between
/// the plane normal and the optical axis.
pub fn fit_tilt(points: &[[f64; 3]], ground_truth_deg: f64) -> Result<TiltReport> {
    if points.len() < 3 {
        return processing("tilt fit needs at least 3 points");
    }
    let n = points.len() as f64;
    let c = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
        / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l1, l2) = (eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    if !(l2 > 0.0) || l1 <= 1e-12 * l2 {
        return processing("degenerate tilt fit: points are (nearly) collinear");
    }
    let mut normal = eig.eigenvectors.column(idx[0]).into_owned();
    if normal[2] < 0.0 {
        normal = -normal;
    }
    let tilt = normal[2].clamp(-1.0, 1.0).acos().to_degrees();
    Ok(TiltReport {
        fitted_tilt_deg: tilt,
        error_deg: (tilt - ground_truth_deg).abs(),
        normal: [normal[0], normal[1], normal[2]],
        points: points.len(),
    })
}

/// Tilt of the fused depth, back-projected through the HR pinhole model.
/// Requires the depth mask to cover at least half the frame.
pub fn tilt_report(fused: &FusedRgbd, ground_truth_deg: f64) -> Result<TiltReport> {
    if fused.mask.fraction() < 0.5 {
        return processing(format!(
            "depth mask covers {:.1}% of the frame; at least 50% is required",
            100.0 * fused.mask.fraction()
        ));
    }
    let points: Vec<[f64; 3]> = fused.point_cloud().into_iter().map(|(p, _)| p).collect();
    fit_tilt(&points, ground_truth_deg)
}

/// Object points (mm) of a dense map, back-projected through the light-field geometry.
pub fn dense_points(dense: &DenseDepthMap, camera: &CameraModel) -> Vec<[f64; 3]> {
    let (w, h) = dense.depth.dims();
    let mut out = Vec::new();
    for j in 0..h {
        for i in 0..w {
            if dense.mask.get(i, j) {
                let z = dense.depth.get(i, j) as f64;
                let p = virtual_to_object_lateral(
                    camera,
                    dense.lattice.position(i as f64, j as f64),
                    z,
                );
                out.push([p[0], p[1], z]);
            }
        }
    }
    out
}

/// Tilt of a dense map in object space.
pub fn dense_tilt(
    dense: &DenseDepthMap,
    camera: &CameraModel,
    ground_truth_deg: f64,
) -> Result<TiltReport> {
    fit_tilt(&dense_points(dense, camera), ground_truth_deg)
}

/// RMS of `dense - truth` over masked lattice pixels where the scene has a
/// surface, with the surface depth found along each pixel's line of sight.
pub fn dense_rms_error(dense: &DenseDepthMap, camera: &CameraModel, scene: &Scene) -> Result<f64> {
    let (w, h) = dense.depth.dims();
    let mut acc = 0.0;
    let mut n = 0usize;
    for j in 0..h {
        for i in 0..w {
            if !dense.mask.get(i, j) {
                continue;
            }
            if let Some(t) =
                surface_depth_at_virtual(scene, camera, dense.lattice.position(i as f64, j as f64))
            {
                let e = dense.depth.get(i, j) as f64 - t;
                acc += e * e;
                n += 1;
            }
        }
    }
    if n == 0 {
        return processing("no masked pixel overlaps the scene surface");
    }
    Ok((acc / n as f64).sqrt())
}

/// NCC of two images over a mask.
pub fn masked_ncc(a: &Image, b: &Image, mask: &Mask) -> f64 {
    let (w, h) = a.dims();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for j in 0..h {
        for i in 0..w {
            if mask.get(i, j) {
                x.push(a.get(i, j));
                y.push(b.get(i, j));
            }
        }
    }
    crate::image::ncc(&x, &y)
}
