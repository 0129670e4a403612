//! Step III: disparities to virtual depths, virtual depths to object depths,
//! and densification of the sparse result.
//!
//! Interpolation runs in the reconstructed-view frame: positions on the
//! virtual image plane, measured in sensor pixels and sampled by a
//! [`ViewLattice`].

pub mod calibration;
mod interpolate;

use std::collections::HashMap;

use log::warn;
use nalgebra::{Matrix2, SymmetricEigen};
use rayon::prelude::*;

pub use calibration::{CalibratedDepth, DepthCalibration};
pub use interpolate::{
    convex_hull, grid_thin_plate, hull_mask, GridSolverSettings, ThinPlateSpline,
};

use crate::analysis::median;
use crate::disparity::DisparityField;
use crate::error::{processing, Result};
use crate::geometry::{virtual_depth_from_disparity, CameraModel, ViewLattice};
use crate::image::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthSample {
    /// Position on the virtual image plane (px).
    pub position: [f64; 2],
    pub a_um: f64,
    pub w_mm: f64,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DepthDiagnostics {
    pub input: usize,
    pub dropped_out_of_range: usize,
    /// Samples whose `a` fell outside the calibrated interval.
    pub clamped: usize,
    pub dropped_outliers: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseDepth {
    pub samples: Vec<DepthSample>,
    pub diagnostics: DepthDiagnostics,
}

impl SparseDepth {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn median_depth_mm(&self) -> Option<f64> {
        let w: Vec<f64> = self.samples.iter().map(|s| s.w_mm).collect();
        median(&w)
    }
}

/// Converts each disparity sample with `a = B d / D` and the calibration.
/// Samples whose depth falls outside the camera depth range are dropped.
pub fn depth_from_disparity(
    field: &DisparityField,
    camera: &CameraModel,
    cal: &DepthCalibration,
) -> Result<SparseDepth> {
    let b = camera.mla.spacing_um;
    let converted: Vec<Option<(DepthSample, bool)>> = field
        .samples
        .par_iter()
        .map(|s| {
            let a_um = virtual_depth_from_disparity(s.disparity_um, camera).ok()?;
            let cd = cal.eval(a_um * 1e-3);
            if !camera.depth_range.contains(cd.w_mm) {
                return None;
            }
            let k = a_um / b;
            let position = [
                s.lens_center[0] + (s.position[0] - s.lens_center[0]) * k,
                s.lens_center[1] + (s.position[1] - s.lens_center[1]) * k,
            ];
            Some((
                DepthSample {
                    position,
                    a_um,
                    w_mm: cd.w_mm,
                    confidence: s.confidence,
                },
                cd.clamped,
            ))
        })
        .collect();
    let mut out = SparseDepth {
        samples: Vec::with_capacity(converted.len()),
        diagnostics: DepthDiagnostics {
            input: field.samples.len(),
            ..Default::default()
        },
    };
    for c in converted {
        match c {
            Some((s, clamped)) => {
                out.diagnostics.clamped += clamped as usize;
                out.samples.push(s);
            }
            None => out.diagnostics.dropped_out_of_range += 1,
        }
    }
    Ok(out)
}

/// Drops samples that differ from the median of their neighbours within
/// `radius_px` by more than `threshold_mm`. Samples with fewer than three
/// neighbours are kept.
pub fn reject_outliers(sparse: &SparseDepth, radius_px: f64, threshold_mm: f64) -> SparseDepth {
    let cell = radius_px.max(1e-6);
    let key = |p: [f64; 2]| ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, s) in sparse.samples.iter().enumerate() {
        buckets.entry(key(s.position)).or_default().push(i);
    }
    let r2 = radius_px * radius_px;
    let keep: Vec<bool> = sparse
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (kx, ky) = key(s.position);
            let mut neigh = Vec::new();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(list) = buckets.get(&(kx + dx, ky + dy)) {
                        for &j in list {
                            let o = &sparse.samples[j];
                            let (ex, ey) =
                                (o.position[0] - s.position[0], o.position[1] - s.position[1]);
                            if j != i && ex * ex + ey * ey <= r2 {
                                neigh.push(o.w_mm);
                            }
                        }
                    }
                }
            }
            if neigh.len() < 3 {
                return true;
            }
            let m = median(&neigh).unwrap_or(s.w_mm);
            (s.w_mm - m).abs() <= threshold_mm
        })
        .collect();
    let samples: Vec<DepthSample> = sparse
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| *s)
        .collect();
    let mut diagnostics = sparse.diagnostics;
    diagnostics.dropped_outliers += sparse.samples.len() - samples.len();
    SparseDepth {
        samples,
        diagnostics,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolationParams {
    /// Largest sample count solved with the exact thin-plate spline.
    pub tps_max_samples: usize,
    pub solver: GridSolverSettings,
}

impl Default for InterpolationParams {
    fn default() -> Self {
        Self {
            tps_max_samples: 2000,
            solver: GridSolverSettings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpolationMethod {
    ThinPlateSpline,
    GridBiharmonic,
    /// Collinear input: plane through the line, zero slope across it.
    DegenerateLine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseDepthMap {
    /// Object depth (mm) per lattice pixel.
    pub depth: Image,
    pub mask: Mask,
    pub lattice: ViewLattice,
    pub method: InterpolationMethod,
    pub warnings: Vec<String>,
}

impl DenseDepthMap {
    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }
}

/// Fills the lattice from the sparse samples with a surface continuous in
/// slope and curvature. The mask is the convex hull of the samples.
pub fn interpolate_depth(
    sparse: &SparseDepth,
    lattice: &ViewLattice,
    params: &InterpolationParams,
) -> Result<DenseDepthMap> {
    let (width, height) = lattice.dims();
    // Exact duplicates would make the spline system singular; average them.
    let mut merged: Vec<([f64; 2], f64, usize)> = Vec::new();
    {
        let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
        for s in &sparse.samples {
            let p = lattice.to_index(s.position);
            let k = (p[0].to_bits(), p[1].to_bits());
            match seen.get(&k) {
                Some(&i) => {
                    merged[i].1 += s.w_mm;
                    merged[i].2 += 1;
                }
                None => {
                    seen.insert(k, merged.len());
                    merged.push((p, s.w_mm, 1));
                }
            }
        }
    }
    if merged.len() < 3 {
        return processing(format!(
            "depth interpolation needs at least 3 distinct samples, got {}",
            merged.len()
        ));
    }
    let points: Vec<[f64; 2]> = merged.iter().map(|m| m.0).collect();
    let values: Vec<f64> = merged.iter().map(|m| m.1 / m.2 as f64).collect();

    if let Some((origin, dir)) = collinear_axis(&points) {
        let msg = format!(
            "{} depth samples are collinear; fitting a plane along the line",
            points.len()
        );
        warn!("{msg}");
        let s: Vec<f64> = points
            .iter()
            .map(|p| (p[0] - origin[0]) * dir[0] + (p[1] - origin[1]) * dir[1])
            .collect();
        let n = s.len() as f64;
        let (ms, mw) = (s.iter().sum::<f64>() / n, values.iter().sum::<f64>() / n);
        let sxx: f64 = s.iter().map(|v| (v - ms) * (v - ms)).sum();
        let sxy: f64 = s
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - ms) * (b - mw))
            .sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let depth = Image::from_fn(width, height, |x, y| {
            let t = (x as f64 - origin[0]) * dir[0] + (y as f64 - origin[1]) * dir[1];
            (mw + slope * (t - ms)) as f32
        });
        return Ok(DenseDepthMap {
            depth,
            mask: Mask::new(width, height, true),
            lattice: *lattice,
            method: InterpolationMethod::DegenerateLine,
            warnings: vec![msg],
        });
    }

    let mask = hull_mask(&convex_hull(&points), width, height);
    let mut warnings = Vec::new();
    let (depth, method) = if points.len() <= params.tps_max_samples {
        let tps = ThinPlateSpline::fit(&points, &values)?;
        (
            tps.rasterize(width, height),
            InterpolationMethod::ThinPlateSpline,
        )
    } else {
        let mut acc: HashMap<(usize, usize), (f64, usize)> = HashMap::new();
        let mut outside = 0;
        for (p, v) in points.iter().zip(&values) {
            let (x, y) = (p[0].round(), p[1].round());
            if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
                outside += 1;
                continue;
            }
            let e = acc.entry((x as usize, y as usize)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        if outside > 0 {
            warnings.push(format!(
                "{outside} samples fall outside the depth lattice and were ignored"
            ));
        }
        let mut cells: Vec<(usize, usize, f64)> = acc
            .into_iter()
            .map(|((x, y), (s, c))| (x, y, s / c as f64))
            .collect();
        cells.sort_by_key(|c| (c.1, c.0));
        (
            grid_thin_plate(width, height, &cells, &params.solver)?,
            InterpolationMethod::GridBiharmonic,
        )
    };
    if depth.data().iter().any(|v| !v.is_finite()) {
        return processing("interpolated depth contains non-finite values");
    }
    Ok(DenseDepthMap {
        depth,
        mask,
        lattice: *lattice,
        method,
        warnings,
    })
}

/// Returns the principal axis `(origin, unit direction)` when the points lie
/// on a line (minor spread below 1e-6 of the major spread, or below 1e-9 px).
fn collinear_axis(points: &[[f64; 2]]) -> Option<([f64; 2], [f64; 2])> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut c = Matrix2::<f64>::zeros();
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        c[(0, 0)] += dx * dx;
        c[(0, 1)] += dx * dy;
        c[(1, 1)] += dy * dy;
    }
    c[(1, 0)] = c[(0, 1)];
    let eig = SymmetricEigen::new(c);
    let (imax, imin) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let (lmax, lmin) = (eig.eigenvalues[imax], eig.eigenvalues[imin].max(0.0));
    if lmin <= 1e-12 * lmax || lmin.sqrt() < 1e-9 {
        let v = eig.eigenvectors.column(imax);
        Some(([mx, my], [v[0], v[1]]))
    } else {
        None
    }
}

/// Least-squares plane `w = c0 + c1 x + c2 y` over the masked pixels of an
/// image, with pixel-index coordinates.
pub fn fit_plane(depth: &Image, mask: &Mask) -> Option<[f64; 3]> {
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if mask.get(x, y) {
                let r = nalgebra::Vector3::new(1.0, x as f64, y as f64);
                ata += r * r.transpose();
                atb += r * depth.get(x, y) as f64;
            }
        }
    }
    let c = ata.try_inverse()? * atb;
    Some([c[0], c[1], c[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::calibration::DepthCalibration;
    use crate::disparity::{DisparityDiagnostics, DisparitySample, SampleAxis};
    use crate::geometry::{disparity_from_virtual_depth, DepthRange};
    use crate::simulator::object_to_virtual;
    use proptest::prelude::*;

    fn lattice(w: usize, h: usize) -> ViewLattice {
        ViewLattice {
            a_um: 2400.0,
            spacing_px: 1.0,
            width: w,
            height: h,
        }
    }

    fn sparse_from(points: &[[f64; 2]], f: impl Fn(f64, f64) -> f64) -> SparseDepth {
        // Lattice spacing 1: index = position - 0.5.
        SparseDepth {
            samples: points
                .iter()
                .map(|p| DepthSample {
                    position: [p[0] + 0.5, p[1] + 0.5],
                    a_um: 0.0,
                    w_mm: f(p[0], p[1]),
                    confidence: 1.0,
                })
                .collect(),
            diagnostics: Default::default(),
        }
    }

    fn scatter(n: usize, w: f64, h: f64) -> Vec<[f64; 2]> {
        // Additive recurrence with the plastic-number constants: well spread, deterministic.
        let (g1, g2) = (0.754_877_666_246_692_7, 0.569_840_290_998_053_2);
        (0..n)
            .map(|i| {
                let t = i as f64 + 0.5;
                [
                    ((t * g1).fract()) * (w - 1.0),
                    ((t * g2).fract()) * (h - 1.0),
                ]
            })
            .collect()
    }

    fn field(disparities_um: &[f64]) -> DisparityField {
        DisparityField {
            samples: disparities_um
                .iter()
                .map(|&d| DisparitySample {
                    position: [110.0, 60.0],
                    lens_center: [100.0, 50.0],
                    disparity_um: d,
                    confidence: 1.0,
                    axis: SampleAxis::Horizontal,
                })
                .collect(),
            diagnostics: DisparityDiagnostics::default(),
        }
    }

    #[test]
    fn knot_round_trip_and_range_drop() {
        let cam = CameraModel::default();
        let cal = DepthCalibration::from_camera(&cam, DepthRange::new(60.0, 70.0), 0.5).unwrap();
        let (a_knot, w_knot) = cal.knots()[10];
        let d = disparity_from_virtual_depth(a_knot * 1e3, &cam).unwrap();
        // Out of range: depths 61 mm and 69 mm are inside the calibration but outside [62.5, 67.5].
        let d_near =
            disparity_from_virtual_depth(object_to_virtual(61.0, &cam.optics).unwrap(), &cam)
                .unwrap();
        let d_far =
            disparity_from_virtual_depth(object_to_virtual(69.0, &cam.optics).unwrap(), &cam)
                .unwrap();
        let sd = depth_from_disparity(&field(&[d, d_near, d_far]), &cam, &cal).unwrap();
        assert_eq!(sd.len(), 1);
        assert_eq!(sd.diagnostics.dropped_out_of_range, 2);
        assert!((sd.samples[0].w_mm - w_knot).abs() < 1e-9);
        // Virtual position scales the lens-relative offset by a/B.
        let k = a_knot * 1e3 / cam.mla.spacing_um;
        assert!((sd.samples[0].position[0] - (100.0 + 10.0 * k)).abs() < 1e-9);
        assert!((sd.samples[0].position[1] - (50.0 + 10.0 * k)).abs() < 1e-9);
    }

    #[test]
    fn empty_field_gives_empty_depth() {
        let cam = CameraModel::default();
        let cal = DepthCalibration::from_camera(&cam, cam.depth_range, 0.5).unwrap();
        let sd = depth_from_disparity(&field(&[]), &cam, &cal).unwrap();
        assert!(sd.is_empty());
        assert_eq!(sd.diagnostics, DepthDiagnostics::default());
    }

    #[test]
    fn constant_and_plane_samples() {
        let pts = scatter(60, 40.0, 30.0);
        let lat = lattice(40, 30);
        let dm =
            interpolate_depth(&sparse_from(&pts, |_, _| 65.0), &lat, &Default::default()).unwrap();
        assert_eq!(dm.method, InterpolationMethod::ThinPlateSpline);
        assert!(dm.depth.data().iter().all(|v| (v - 65.0).abs() < 1e-3));

        let plane = |x: f64, y: f64| 64.0 + 0.05 * x - 0.03 * y;
        let dm = interpolate_depth(&sparse_from(&pts, plane), &lat, &Default::default()).unwrap();
        for y in 0..30 {
            for x in 0..40 {
                assert!((dm.depth.get(x, y) as f64 - plane(x as f64, y as f64)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn fewer_than_three_samples_is_an_error() {
        let lat = lattice(10, 10);
        let sd = sparse_from(&[[1.0, 1.0], [5.0, 5.0]], |_, _| 65.0);
        assert!(interpolate_depth(&sd, &lat, &Default::default()).is_err());
        // Duplicates do not count as distinct samples.
        let sd = sparse_from(&[[1.0, 1.0], [1.0, 1.0], [5.0, 5.0]], |_, _| 65.0);
        assert!(interpolate_depth(&sd, &lat, &Default::default()).is_err());
    }

    #[test]
    fn collinear_samples_give_plane_along_line() {
        let lat = lattice(20, 20);
        let pts: Vec<[f64; 2]> = (0..8)
            .map(|i| [2.0 + 2.0 * i as f64, 2.0 + 2.0 * i as f64])
            .collect();
        let sd = sparse_from(&pts, |x, _| 63.0 + 0.1 * x);
        let dm = interpolate_depth(&sd, &lat, &Default::default()).unwrap();
        assert_eq!(dm.method, InterpolationMethod::DegenerateLine);
        assert_eq!(dm.warnings.len(), 1);
        for p in &pts {
            assert!(
                (dm.depth.get(p[0] as usize, p[1] as usize) as f64 - (63.0 + 0.1 * p[0])).abs()
                    < 1e-4
            );
        }
        // Zero slope across the line: (x, y) and (y, x) project to the same point on it.
        assert!((dm.depth.get(3, 15) - dm.depth.get(15, 3)).abs() < 1e-5);
    }

    #[test]
    fn sample_site_residuals_tps() {
        let pts = scatter(300, 80.0, 60.0);
        let f = |x: f64, y: f64| 65.0 + 0.8 * (x * 0.08).sin() * (y * 0.11).cos();
        let sd = sparse_from(&pts, f);
        let lat = lattice(80, 60);
        let points: Vec<[f64; 2]> = sd
            .samples
            .iter()
            .map(|s| lat.to_index(s.position))
            .collect();
        let values: Vec<f64> = sd.samples.iter().map(|s| s.w_mm).collect();
        let tps = ThinPlateSpline::fit(&points, &values).unwrap();
        for (p, v) in points.iter().zip(&values) {
            assert!((tps.eval(p[0], p[1]) - v).abs() < 1e-3);
        }
    }

    #[test]
    fn tps_and_grid_paths_agree() {
        // 500 samples on distinct lattice cells of a smooth surface.
        let (w, h) = (96usize, 72usize);
        let mut cells = std::collections::BTreeSet::new();
        let pts: Vec<[f64; 2]> = scatter(2000, w as f64, h as f64)
            .into_iter()
            .map(|p| [p[0].round(), p[1].round()])
            .filter(|p| cells.insert((p[0] as usize, p[1] as usize)))
            .take(500)
            .collect();
        assert_eq!(pts.len(), 500);
        let f = |x: f64, y: f64| {
            65.0 + 1.5 * ((x - 48.0).powi(2) + (y - 36.0).powi(2)) / 3000.0 + 0.01 * x
        };
        let sd = sparse_from(&pts, f);
        let lat = lattice(w, h);
        let tps = interpolate_depth(&sd, &lat, &Default::default()).unwrap();
        let grid = interpolate_depth(
            &sd,
            &lat,
            &InterpolationParams {
                tps_max_samples: 100,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(grid.method, InterpolationMethod::GridBiharmonic);
        let mut se = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if tps.mask.get(x, y) {
                    let d = (tps.depth.get(x, y) - grid.depth.get(x, y)) as f64;
                    se += d * d;
                    n += 1;
                }
            }
        }
        let rms = (se / n as f64).sqrt();
        assert!(rms < 0.05, "rms {rms}");
        for p in &pts {
            let (x, y) = (p[0] as usize, p[1] as usize);
            assert!((grid.depth.get(x, y) as f64 - f(p[0], p[1])).abs() < 1e-3);
        }
    }

    #[test]
    fn outlier_rejection_drops_isolated_spike() {
        let pts = scatter(200, 50.0, 50.0);
        let mut sd = sparse_from(&pts, |_, _| 65.0);
        sd.samples[17].w_mm = 67.0;
        let out = reject_outliers(&sd, 8.0, 0.5);
        assert_eq!(out.len(), 199);
        assert_eq!(out.diagnostics.dropped_outliers, 1);
        assert!(out.samples.iter().all(|s| s.w_mm == 65.0));
    }

    #[test]
    fn plane_fit_recovers_coefficients() {
        let img = Image::from_fn(30, 20, |x, y| {
            (2.0 + 0.5 * x as f64 - 0.25 * y as f64) as f32
        });
        let c = fit_plane(&img, &Mask::new(30, 20, true)).unwrap();
        assert!(
            (c[0] - 2.0).abs() < 1e-4 && (c[1] - 0.5).abs() < 1e-5 && (c[2] + 0.25).abs() < 1e-5
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn larger_disparity_orders_depth(d_um in proptest::collection::vec(25.0f64..75.0, 1000)) {
            let cam = CameraModel::default();
            let cal = DepthCalibration::from_camera(&cam, DepthRange::new(60.0, 70.0), 0.5).unwrap();
            let mut pairs: Vec<(f64, f64, f64)> = d_um
                .iter()
                .map(|&d| {
                    let a = virtual_depth_from_disparity(d, &cam).unwrap();
                    (d, a, cal.eval(a * 1e-3).w_mm)
                })
                .collect();
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
            for w in pairs.windows(2) {
                if w[1].0 > w[0].0 {
                    prop_assert!(w[1].1 < w[0].1);
                    if cal.w_increasing() {
                        prop_assert!(w[1].2 <= w[0].2);
                    } else {
                        prop_assert!(w[1].2 >= w[0].2);
                    }
                }
            }
        }
    }
}
