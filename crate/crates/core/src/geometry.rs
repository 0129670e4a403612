//! Camera geometry of the two-channel instrument: sensor, microlens array,
//! main optics, the elemental-image tiling and the closed-form relations
//! between disparity and virtual image distance.
//!
//! Every length held by these types is in micrometres. Object depths and
//! the depth range are the exception and are kept in millimetres because
//! that is how every depth product downstream reports them.

use crate::error::{config, domain, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorSpec {
    pub width_px: usize,
    pub height_px: usize,
    pub pixel_pitch_um: f64,
}

impl SensorSpec {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return config(format!("{name}: sensor dimensions must be at least 1x1"));
        }
        if !(self.pixel_pitch_um > 0.0) {
            return config(format!("{name}: pixel pitch must be positive"));
        }
        Ok(())
    }

    /// Sensor centre in edge coordinates (px).
    pub fn center_px(&self) -> [f64; 2] {
        [self.width_px as f64 / 2.0, self.height_px as f64 / 2.0]
    }
}

/// Square, axis-aligned microlens lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlaSpec {
    /// Lens pitch `d`.
    pub pitch_um: f64,
    /// MLA-to-sensor spacing `B`.
    pub spacing_um: f64,
    pub focal_length_um: f64,
    /// Centre of lens (0, 0) on the sensor, edge coordinates in px.
    pub grid_origin_px: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MainOpticsSpec {
    pub effective_focal_length_um: f64,
    pub lens_to_mla_um: f64,
    pub numerical_aperture: f64,
    pub wavelength_um: f64,
    pub nominal_working_distance_um: f64,
}

/// Closed object-depth interval in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRange {
    pub min_mm: f64,
    pub max_mm: f64,
}

impl DepthRange {
    pub fn new(min_mm: f64, max_mm: f64) -> Self {
        Self { min_mm, max_mm }
    }

    pub fn contains(&self, w_mm: f64) -> bool {
        w_mm >= self.min_mm && w_mm <= self.max_mm
    }

    pub fn span(&self) -> f64 {
        self.max_mm - self.min_mm
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.min_mm + self.max_mm)
    }
}

impl Default for DepthRange {
    fn default() -> Self {
        Self::new(62.5, 67.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub sensor: SensorSpec,
    pub mla: MlaSpec,
    pub optics: MainOpticsSpec,
    pub hr_sensor: SensorSpec,
    pub depth_range: DepthRange,
}

impl Default for CameraModel {
    /// A 1600x1200 light-field detector with 4.5 um pixels behind a 148 um
    /// pitch MLA (B = 1.2 mm, f = 1.6 mm), and a 1920x1080 HR detector
    /// covering the same image width. The effective main lens places the
    /// virtual image of the 65 mm working plane 3.5 B behind the MLA.
    fn default() -> Self {
        let pitch_um = 148.0;
        let pixel_pitch_um = 4.5;
        let half_pitch_px = 0.5 * pitch_um / pixel_pitch_um;
        Self {
            sensor: SensorSpec {
                width_px: 1600,
                height_px: 1200,
                pixel_pitch_um,
            },
            mla: MlaSpec {
                pitch_um,
                spacing_um: 1200.0,
                focal_length_um: 1600.0,
                grid_origin_px: [half_pitch_px, half_pitch_px],
            },
            optics: MainOpticsSpec {
                effective_focal_length_um: 24_000.0,
                lens_to_mla_um: 33_850.0,
                numerical_aperture: 0.02,
                wavelength_um: 0.6,
                nominal_working_distance_um: 65_000.0,
            },
            hr_sensor: SensorSpec {
                width_px: 1920,
                height_px: 1080,
                pixel_pitch_um: 3.75,
            },
            depth_range: DepthRange::default(),
        }
    }
}

impl CameraModel {
    /// MLA pitch expressed in sensor pixels.
    pub fn pitch_px(&self) -> f64 {
        self.mla.pitch_um / self.sensor.pixel_pitch_um
    }

    /// Side of an elemental image in pixels.
    pub fn elemental_size_px(&self) -> usize {
        self.pitch_px().floor() as usize
    }

    /// Checks every structural invariant of the model, including that the
    /// whole depth range images behind the sensor (plenoptic 2.0 regime).
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate("sensor")?;
        self.hr_sensor.validate("hr_sensor")?;
        let m = &self.mla;
        if !(m.pitch_um > 0.0) {
            return config("mla: pitch must be positive");
        }
        if !(m.spacing_um > 0.0 && m.spacing_um < m.focal_length_um) {
            return config(format!(
                "mla: spacing B = {} um must satisfy 0 < B < focal length {} um",
                m.spacing_um, m.focal_length_um
            ));
        }
        let p = self.pitch_px();
        for o in m.grid_origin_px {
            if !(0.0..p).contains(&o) {
                return config(format!("mla: grid origin {o} px outside [0, {p:.3})"));
            }
        }
        let o = &self.optics;
        for (name, v) in [
            ("effective_focal_length", o.effective_focal_length_um),
            ("lens_to_mla", o.lens_to_mla_um),
            ("wavelength", o.wavelength_um),
            ("nominal_working_distance", o.nominal_working_distance_um),
        ] {
            if !(v > 0.0) {
                return config(format!("optics: {name} must be positive"));
            }
        }
        if !(o.numerical_aperture > 0.0 && o.numerical_aperture < 1.0) {
            return config("optics: numerical aperture must lie in (0, 1)");
        }
        if !(self.depth_range.min_mm < self.depth_range.max_mm) {
            return config("depth_range: min must be below max");
        }
        for w in [self.depth_range.min_mm, self.depth_range.max_mm] {
            crate::simulator::virtual_distance_in_range(w, self)?;
        }
        Ok(())
    }

    /// Image distance of the main optics for the nominal working plane; the
    /// HR channel's detector sits at this distance.
    pub fn hr_image_distance_um(&self) -> f64 {
        let f = self.optics.effective_focal_length_um;
        let w = self.optics.nominal_working_distance_um;
        f * w / (w - f)
    }

    /// HR pinhole focal length in HR pixels.
    pub fn hr_focal_px(&self) -> f64 {
        self.hr_image_distance_um() / self.hr_sensor.pixel_pitch_um
    }

    /// Disparity interval (sensor px) spanned by the configured depth range.
    pub fn disparity_range_px(&self) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for w in [self.depth_range.min_mm, self.depth_range.max_mm] {
            let a = crate::simulator::object_to_virtual(w, &self.optics)?;
            let d = disparity_from_virtual_depth(a, self)? / self.sensor.pixel_pitch_um;
            lo = lo.min(d);
            hi = hi.max(d);
        }
        Ok((lo, hi))
    }

    /// Same camera with a different depth validity interval.
    pub fn with_depth_range(mut self, range: DepthRange) -> Self {
        self.depth_range = range;
        self
    }
}

/// Regular sampling lattice on a virtual image plane at distance `a` behind
/// the MLA. Positions on the plane are measured in sensor pixels (edge
/// coordinates); the lattice spacing is one sensor pixel scaled to the plane,
/// `a / B`. Reconstructed views and dense depth maps share this frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewLattice {
    pub a_um: f64,
    pub spacing_px: f64,
    pub width: usize,
    pub height: usize,
}

impl ViewLattice {
    pub fn for_camera(camera: &CameraModel, a_um: f64) -> Result<Self> {
        if !(a_um > camera.mla.spacing_um) {
            return domain(format!(
                "view distance a = {a_um} um must exceed B = {} um",
                camera.mla.spacing_um
            ));
        }
        let spacing_px = a_um / camera.mla.spacing_um;
        Ok(Self {
            a_um,
            spacing_px,
            width: (camera.sensor.width_px as f64 / spacing_px)
                .floor()
                .max(1.0) as usize,
            height: (camera.sensor.height_px as f64 / spacing_px)
                .floor()
                .max(1.0) as usize,
        })
    }

    /// Virtual-plane position (px) of the centre of lattice pixel `(i, j)`.
    pub fn position(&self, i: f64, j: f64) -> [f64; 2] {
        [(i + 0.5) * self.spacing_px, (j + 0.5) * self.spacing_px]
    }

    /// Lattice index coordinates of a virtual-plane position.
    pub fn to_index(&self, x: [f64; 2]) -> [f64; 2] {
        [x[0] / self.spacing_px - 0.5, x[1] / self.spacing_px - 0.5]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Pixel rectangle behind one microlens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementalRect {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    /// Lens centre, edge coordinates (px).
    pub center: [f64; 2],
}

impl ElementalRect {
    pub fn contains(&self, u: [f64; 2]) -> bool {
        u[0] >= self.x0 as f64
            && u[0] < (self.x0 + self.size) as f64
            && u[1] >= self.y0 as f64
            && u[1] < (self.y0 + self.size) as f64
    }
}

/// Full elemental tiling with row/column lookup.
#[derive(Clone, Debug)]
pub struct ElementalGrid {
    pub rows: usize,
    pub cols: usize,
    rects: Vec<Option<ElementalRect>>,
    pitch_px: f64,
    origin: [f64; 2],
}

impl ElementalGrid {
    pub fn rects(&self) -> impl Iterator<Item = &ElementalRect> {
        self.rects.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.rects().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&ElementalRect> {
        if row >= self.rows || col >= self.cols {
            return None;
        }
        self.rects[row * self.cols + col].as_ref()
    }

    pub fn pitch_px(&self) -> f64 {
        self.pitch_px
    }

    /// Lens whose centre is nearest to `u` (edge coordinates).
    pub fn nearest_lens(&self, u: [f64; 2]) -> Option<&ElementalRect> {
        let col = ((u[0] - self.origin[0]) / self.pitch_px).round();
        let row = ((u[1] - self.origin[1]) / self.pitch_px).round();
        if col < 0.0 || row < 0.0 {
            return None;
        }
        self.get(row as usize, col as usize)
    }

    /// Lens index range `[lo, hi]` (inclusive, clamped) whose centres lie within
    /// `radius` px of `x` along one axis.
    pub fn lens_span(&self, x: f64, radius: f64, axis: usize) -> (usize, usize) {
        let n = if axis == 0 { self.cols } else { self.rows };
        let lo = ((x - radius - self.origin[axis]) / self.pitch_px)
            .ceil()
            .max(0.0) as usize;
        let hi = ((x + radius - self.origin[axis]) / self.pitch_px).floor();
        let hi = if hi < 0.0 {
            0
        } else {
            (hi as usize).min(n.saturating_sub(1))
        };
        (lo, hi)
    }
}

/// Tiles the sensor into elemental images, one square rectangle of
/// `floor(pitch_px)` pixels centred on each lens. Rectangles that would
/// cross the sensor border are left out.
pub fn elemental_grid(camera: &CameraModel) -> Result<ElementalGrid> {
    let pitch = camera.pitch_px();
    if !(pitch >= 3.0) {
        return config(format!(
            "MLA pitch of {pitch:.3} px is below the 3 px minimum"
        ));
    }
    let size = pitch.floor() as usize;
    let [ox, oy] = camera.mla.grid_origin_px;
    let (w, h) = (camera.sensor.width_px, camera.sensor.height_px);
    // Lens index range whose centres lie on the sensor.
    let cols = (((w as f64 - ox) / pitch).ceil().max(0.0)) as usize;
    let rows = (((h as f64 - oy) / pitch).ceil().max(0.0)) as usize;
    let mut rects = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let cx = ox + col as f64 * pitch;
            let cy = oy + row as f64 * pitch;
            let x0 = (cx - size as f64 / 2.0).round();
            let y0 = (cy - size as f64 / 2.0).round();
            let inside =
                x0 >= 0.0 && y0 >= 0.0 && x0 as usize + size <= w && y0 as usize + size <= h;
            rects.push(inside.then_some(ElementalRect {
                row,
                col,
                x0: x0 as usize,
                y0: y0 as usize,
                size,
                center: [cx, cy],
            }));
        }
    }
    Ok(ElementalGrid {
        rows,
        cols,
        rects,
        pitch_px: pitch,
        origin: [ox, oy],
    })
}

/// Virtual image distance `a = B d / D` (um) for a disparity `D` (um).
pub fn virtual_depth_from_disparity(disparity_um: f64, camera: &CameraModel) -> Result<f64> {
    if !(disparity_um > 0.0) || !disparity_um.is_finite() {
        return domain(format!(
            "disparity {disparity_um} um is not positive: feature at or beyond the infinity-conjugate plane"
        ));
    }
    Ok(camera.mla.spacing_um * camera.mla.pitch_um / disparity_um)
}

/// Disparity `D = B d / a` (um) for a virtual image distance `a` (um).
pub fn disparity_from_virtual_depth(a_um: f64, camera: &CameraModel) -> Result<f64> {
    if !(a_um > 0.0) || !a_um.is_finite() {
        return domain(format!("virtual image distance {a_um} um must be positive"));
    }
    Ok(camera.mla.spacing_um * camera.mla.pitch_um / a_um)
}

/// Spatial frequency (lp/mm) of a 1951 USAF target group/element.
pub fn usaf_frequency(group: i32, element: i32) -> Result<f64> {
    if !(1..=6).contains(&element) {
        return domain(format!("USAF element {element} outside 1..=6"));
    }
    Ok(2f64.powf(group as f64 + (element - 1) as f64 / 6.0))
}

/// Diffraction-limited resolution `NA / (1.22 lambda)` in lp/mm.
pub fn diffraction_limit(numerical_aperture: f64, wavelength_um: f64) -> Result<f64> {
    if !(numerical_aperture > 0.0) || !(wavelength_um > 0.0) {
        return domain("numerical aperture and wavelength must be positive");
    }
    Ok(numerical_aperture / (1.22 * wavelength_um * 1e-3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_camera(w: usize, h: usize, pitch_px: f64, origin: f64) -> CameraModel {
        let mut cam = CameraModel::default();
        cam.sensor.width_px = w;
        cam.sensor.height_px = h;
        cam.sensor.pixel_pitch_um = 1.0;
        cam.mla.pitch_um = pitch_px;
        cam.mla.grid_origin_px = [origin, origin];
        cam
    }

    #[test]
    fn exact_tiling_of_small_sensor() {
        let grid = elemental_grid(&grid_camera(30, 30, 10.0, 5.0)).unwrap();
        assert_eq!(grid.len(), 9);
        for r in grid.rects() {
            assert_eq!(r.size, 10);
            assert_eq!(r.x0, r.col * 10);
            assert_eq!(r.y0, r.row * 10);
        }
    }

    #[test]
    fn partial_border_column_excluded() {
        let grid = elemental_grid(&grid_camera(32, 30, 10.0, 5.0)).unwrap();
        assert_eq!(grid.len(), 9);
        assert!(grid.rects().all(|r| r.x0 + r.size <= 32));
    }

    #[test]
    fn tiny_pitch_rejected() {
        assert!(matches!(
            elemental_grid(&grid_camera(30, 30, 2.5, 1.0)),
            Err(crate::Error::Config(_))
        ));
    }

    /// Brute-force enumeration of lens centres for the default camera.
    #[test]
    fn default_grid_matches_enumeration() {
        let cam = CameraModel::default();
        let grid = elemental_grid(&cam).unwrap();
        let pitch = 148.0 / 4.5;
        let size = 32usize;
        let mut expected = 0;
        for i in 0..200 {
            for j in 0..200 {
                let cx = pitch / 2.0 + i as f64 * pitch;
                let cy = pitch / 2.0 + j as f64 * pitch;
                let x0 = (cx - 16.0).round();
                let y0 = (cy - 16.0).round();
                if x0 >= 0.0
                    && y0 >= 0.0
                    && x0 + size as f64 <= 1600.0
                    && y0 + size as f64 <= 1200.0
                {
                    expected += 1;
                }
            }
        }
        assert_eq!(grid.len(), expected);
        assert_eq!(expected, 48 * 36);
    }

    #[test]
    fn default_camera_is_valid() {
        CameraModel::default().validate().unwrap();
    }

    #[test]
    fn disparity_depth_examples() {
        let mut cam = CameraModel::default();
        cam.mla.pitch_um = 148.0;
        cam.mla.spacing_um = 1200.0;
        let b = cam.mla.spacing_um;
        let d = cam.mla.pitch_um;
        assert!((virtual_depth_from_disparity(d, &cam).unwrap() - b).abs() < 1e-9);
        assert!((virtual_depth_from_disparity(d / 2.0, &cam).unwrap() - 2.0 * b).abs() < 1e-9);
        assert!((virtual_depth_from_disparity(14.8, &cam).unwrap() - 12_000.0).abs() < 1e-9);
        assert!((disparity_from_virtual_depth(b, &cam).unwrap() - d).abs() < 1e-12);
        assert!(disparity_from_virtual_depth(1e6 * b, &cam).unwrap() < 1e-5 * d);
        assert!((disparity_from_virtual_depth(12_000.0, &cam).unwrap() - 14.8).abs() < 1e-12);
        assert!(virtual_depth_from_disparity(0.0, &cam).is_err());
        assert!(virtual_depth_from_disparity(-1.0, &cam).is_err());
        assert!(disparity_from_virtual_depth(0.0, &cam).is_err());
    }

    #[test]
    fn usaf_and_diffraction_values() {
        assert!((usaf_frequency(4, 4).unwrap() - 22.6).abs() < 0.1);
        assert_eq!(usaf_frequency(0, 1).unwrap(), 1.0);
        assert_eq!(usaf_frequency(3, 1).unwrap(), 8.0);
        assert!(usaf_frequency(1, 7).is_err());
        assert!(usaf_frequency(1, 0).is_err());
        assert!((diffraction_limit(0.02, 0.6).unwrap() - 27.3).abs() < 0.1);
        assert!((diffraction_limit(0.0244, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let r = diffraction_limit(0.03, 0.55).unwrap();
        assert!((diffraction_limit(0.06, 0.55).unwrap() - 2.0 * r).abs() < 1e-9);
        assert!(diffraction_limit(0.0, 0.6).is_err());
        assert!(diffraction_limit(0.02, -0.6).is_err());
    }

    proptest! {
        #[test]
        fn depth_disparity_round_trip(d in 50.0f64..300.0, b in 100.0f64..3000.0, frac in 1e-3f64..1.0) {
            let mut cam = CameraModel::default();
            cam.mla.pitch_um = d;
            cam.mla.spacing_um = b;
            let disp = frac * d;
            let a = virtual_depth_from_disparity(disp, &cam).unwrap();
            let back = disparity_from_virtual_depth(a, &cam).unwrap();
            prop_assert!(((back - disp) / disp).abs() < 1e-12);
            // (a - B) / a = t / d with t = d - D
            let t = d - disp;
            prop_assert!((((a - b) / a) - t / d).abs() < 1e-12);
            let a2 = virtual_depth_from_disparity(disp * 1.001, &cam).unwrap();
            prop_assert!(a2 < a);
        }

        #[test]
        fn grid_rects_disjoint_and_inside(w in 20usize..120, h in 20usize..120,
                                          pitch in 3.0f64..17.0, ox in 0.0f64..1.0, oy in 0.0f64..1.0) {
            let mut cam = grid_camera(w, h, pitch, 0.0);
            cam.mla.grid_origin_px = [ox * pitch * 0.999, oy * pitch * 0.999];
            let grid = elemental_grid(&cam).unwrap();
            let rects: Vec<_> = grid.rects().copied().collect();
            for (i, a) in rects.iter().enumerate() {
                prop_assert!(a.x0 + a.size <= w && a.y0 + a.size <= h);
                prop_assert!((a.x0 as f64 + a.size as f64 / 2.0 - a.center[0]).abs() <= 0.5 + 1e-9);
                for b in &rects[i + 1..] {
                    let overlap_x = a.x0 < b.x0 + b.size && b.x0 < a.x0 + a.size;
                    let overlap_y = a.y0 < b.y0 + b.size && b.y0 < a.y0 + a.size;
                    prop_assert!(!(overlap_x && overlap_y));
                }
            }
        }
    }
}
