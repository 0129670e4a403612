//! Scene descriptions for the forward model. Lateral coordinates are in
//! object space (mm, optical axis at the origin), depth is the distance
//! from the main lens along the optical axis (mm).

use crate::error::{config, Result};
use crate::image::Image;

/// Procedural albedo in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Uniform(f32),
    Checker {
        period_mm: f64,
        low: f32,
        high: f32,
    },
    /// Smooth two-octave value noise.
    Noise {
        seed: u64,
        feature_mm: f64,
        contrast: f32,
    },
}

impl Texture {
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        match *self {
            Texture::Uniform(v) => v,
            Texture::Checker {
                period_mm,
                low,
                high,
            } => {
                let half = period_mm / 2.0;
                let cx = (x / half).floor() as i64;
                let cy = (y / half).floor() as i64;
                if (cx + cy).rem_euclid(2) == 0 {
                    high
                } else {
                    low
                }
            }
            Texture::Noise {
                seed,
                feature_mm,
                contrast,
            } => {
                let n = 0.65 * value_noise(x / feature_mm, y / feature_mm, seed)
                    + 0.35 * value_noise(2.1 * x / feature_mm, 2.1 * y / feature_mm, seed ^ 0x9e37);
                (0.5 + contrast as f64 * (n - 0.5) * 2.0).clamp(0.0, 1.0) as f32
            }
        }
    }
}

fn hash01(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut z = (ix as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(seed.wrapping_mul(0x1656_67B1_9E37_79F9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (ix, iy) = (x0 as i64, y0 as i64);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let u = fade(x - x0);
    let v = fade(y - y0);
    let a = hash01(ix, iy, seed);
    let b = hash01(ix + 1, iy, seed);
    let c = hash01(ix, iy + 1, seed);
    let d = hash01(ix + 1, iy + 1, seed);
    let top = a + (b - a) * u;
    let bottom = c + (d - c) * u;
    top + (bottom - top) * v
}

/// Depth grid over a rectangular lateral extent, sampled bilinearly.
#[derive(Clone, Debug, PartialEq)]
pub struct Heightfield {
    /// Depth values in mm, row-major, `depth.width() x depth.height()` nodes.
    pub depth: Image,
    /// `[x_min, y_min, x_max, y_max]` in mm covered by the node grid.
    pub extent_mm: [f64; 4],
    pub texture: Texture,
}

impl Heightfield {
    pub fn from_fn(
        extent_mm: [f64; 4],
        nodes: (usize, usize),
        texture: Texture,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let (nx, ny) = nodes;
        let depth = Image::from_fn(nx, ny, |i, j| {
            let x = extent_mm[0] + (extent_mm[2] - extent_mm[0]) * i as f64 / (nx - 1) as f64;
            let y = extent_mm[1] + (extent_mm[3] - extent_mm[1]) * j as f64 / (ny - 1) as f64;
            f(x, y) as f32
        });
        Self {
            depth,
            extent_mm,
            texture,
        }
    }

    fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        let [x0, y0, x1, y1] = self.extent_mm;
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return None;
        }
        let fx = (x - x0) / (x1 - x0) * (self.depth.width() - 1) as f64;
        let fy = (y - y0) / (y1 - y0) * (self.depth.height() - 1) as f64;
        self.depth.sample(fx, fy).map(|v| v as f64)
    }
}

/// Plane through `(0, 0, center_depth_mm)` whose normal is tilted by
/// `tilt_deg` from the optical axis, about an in-plane axis at `azimuth_deg`
/// (0 = depth increases along +x).
#[derive(Clone, Debug, PartialEq)]
pub struct TiltedPlane {
    pub center_depth_mm: f64,
    pub tilt_deg: f64,
    pub azimuth_deg: f64,
    /// Half-width of the square lateral patch (mm); outside it the scene is empty.
    pub half_extent_mm: f64,
    pub texture: Texture,
}

impl TiltedPlane {
    fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        if x.abs() > self.half_extent_mm || y.abs() > self.half_extent_mm {
            return None;
        }
        let (s, c) = self.azimuth_deg.to_radians().sin_cos();
        Some(self.center_depth_mm + (c * x + s * y) * self.tilt_deg.to_radians().tan())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointSource {
    pub position_mm: [f64; 3],
    /// Peak pixel value produced by the emitter.
    pub intensity: f64,
    /// Gaussian radius of the emitter in object space (mm).
    pub sigma_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scene {
    Heightfield(Heightfield),
    PointSources(Vec<PointSource>),
    TiltedPlane(TiltedPlane),
}

impl Scene {
    /// Fronto-parallel textured plane.
    pub fn plane(depth_mm: f64, half_extent_mm: f64, texture: Texture) -> Self {
        Scene::TiltedPlane(TiltedPlane {
            center_depth_mm: depth_mm,
            tilt_deg: 0.0,
            azimuth_deg: 0.0,
            half_extent_mm,
            texture,
        })
    }

    pub fn point(position_mm: [f64; 3], intensity: f64, sigma_mm: f64) -> Self {
        Scene::PointSources(vec![PointSource {
            position_mm,
            intensity,
            sigma_mm,
        }])
    }

    /// Surface depth at a lateral object position; `None` off the surface
    /// and for point-source scenes.
    pub fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        match self {
            Scene::Heightfield(h) => h.depth_at(x, y),
            Scene::TiltedPlane(p) => p.depth_at(x, y),
            Scene::PointSources(_) => None,
        }
    }

    pub fn albedo_at(&self, x: f64, y: f64) -> f32 {
        match self {
            Scene::Heightfield(h) => h.texture.sample(x, y),
            Scene::TiltedPlane(p) => p.texture.sample(x, y),
            Scene::PointSources(_) => 0.0,
        }
    }

    /// Depth values that bound the scene: grid nodes, plane patch corners or
    /// source positions.
    pub fn depth_samples(&self) -> Vec<f64> {
        match self {
            Scene::Heightfield(h) => h.depth.data().iter().map(|&v| v as f64).collect(),
            Scene::TiltedPlane(p) => {
                let e = p.half_extent_mm;
                [(-e, -e), (e, -e), (-e, e), (e, e)]
                    .iter()
                    .filter_map(|&(x, y)| p.depth_at(x, y))
                    .collect()
            }
            Scene::PointSources(s) => s.iter().map(|p| p.position_mm[2]).collect(),
        }
    }

    pub fn depth_bounds(&self) -> Option<(f64, f64)> {
        let d = self.depth_samples();
        if d.is_empty() {
            return None;
        }
        Some(
            d.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                }),
        )
    }

    /// Representative depth used to seed ray/surface intersection.
    pub fn reference_depth(&self) -> f64 {
        match self.depth_bounds() {
            Some((lo, hi)) => 0.5 * (lo + hi),
            None => 65.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scene::Heightfield(h) => {
                if h.depth.width() < 2 || h.depth.height() < 2 {
                    return config("heightfield needs at least 2x2 depth nodes");
                }
                let [x0, y0, x1, y1] = h.extent_mm;
                if !(x1 > x0 && y1 > y0) {
                    return config("heightfield extent is empty");
                }
            }
            Scene::TiltedPlane(p) => {
                if !(p.half_extent_mm > 0.0) || !(p.tilt_deg.abs() < 80.0) {
                    return config("tilted plane needs a positive extent and |tilt| < 80 deg");
                }
            }
            Scene::PointSources(s) => {
                if s.iter()
                    .any(|p| !(p.intensity >= 0.0) || !(p.sigma_mm >= 0.0))
                {
                    return config("point sources need non-negative intensity and radius");
                }
            }
        }
        Ok(())
    }
}
