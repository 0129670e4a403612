//! Step I: patch-based super-resolution of elemental images.
//!
//! The HR image is downsampled by the resolution ratio and cut into pairs of
//! 5x5 low-resolution patches `l_i` and co-located high-resolution patches
//! `h_i`. Each 5x5 patch `p` of an elemental image is replaced by a weighted
//! average of the `h` patches of its nine nearest `l` patches, with weights
//! `exp(-|p - l|^2 / 2 sigma^2)`.

use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::error::{config, processing, Error, Result};
use crate::geometry::{elemental_grid, CameraModel};
use crate::image::{psnr, Image};
use crate::simulator::RawLightFieldImage;

/// Ratio used when no calibration images are available (1920 / 640).
pub const DEFAULT_RESOLUTION_RATIO: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrParams {
    /// Weight width; `None` selects `0.05 * dynamic range * sqrt(patch elements)`.
    pub sigma: Option<f64>,
    pub k_neighbors: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Subtract each patch's mean before comparing.
    pub mean_removal: bool,
}

impl Default for SrParams {
    fn default() -> Self {
        Self {
            sigma: None,
            k_neighbors: 9,
            patch_size: 5,
            stride: 2,
            mean_removal: false,
        }
    }
}

impl SrParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return config("sr.sigma must be positive");
        }
        if self.k_neighbors == 0 || self.patch_size == 0 || self.stride == 0 {
            return config("sr.k_neighbors, sr.patch_size and sr.stride must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDictionary {
    ratio: f64,
    patch_size: usize,
    high_size: usize,
    low: Vec<f32>,
    high: Vec<f32>,
    mean_removed: bool,
    low_diversity: bool,
    dynamic_range: f32,
}

impl PatchDictionary {
    pub fn len(&self) -> usize {
        self.low.len() / (self.patch_size * self.patch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn high_size(&self) -> usize {
        self.high_size
    }

    pub fn low_patch(&self, i: usize) -> &[f32] {
        let n = self.patch_size * self.patch_size;
        &self.low[i * n..(i + 1) * n]
    }

    pub fn high_patch(&self, i: usize) -> &[f32] {
        let n = self.high_size * self.high_size;
        &self.high[i * n..(i + 1) * n]
    }

    pub fn mean_removed(&self) -> bool {
        self.mean_removed
    }

    /// Set when the source HR image was constant.
    pub fn low_diversity(&self) -> bool {
        self.low_diversity
    }

    pub fn dynamic_range(&self) -> f32 {
        self.dynamic_range
    }

    /// The sigma used for this dictionary under `params`.
    pub fn sigma(&self, params: &SrParams) -> f64 {
        params.sigma.unwrap_or_else(|| {
            let n = (self.patch_size * self.patch_size) as f64;
            (0.05 * self.dynamic_range as f64 * n.sqrt()).max(1e-6)
        })
    }

    /// Builds a dictionary from explicit patch pairs.
    pub fn from_pairs(
        ratio: f64,
        patch_size: usize,
        pairs: &[(Vec<f32>, Vec<f32>)],
    ) -> Result<Self> {
        if pairs.is_empty() {
            return processing("patch dictionary needs at least one entry");
        }
        let high_size = high_patch_size(ratio, patch_size);
        let mut low = Vec::new();
        let mut high = Vec::new();
        for (l, h) in pairs {
            if l.len() != patch_size * patch_size || h.len() != high_size * high_size {
                return processing("patch pair dimensions do not match the ratio");
            }
            low.extend_from_slice(l);
            high.extend_from_slice(h);
        }
        let (lo, hi) = high
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        Ok(Self {
            ratio,
            patch_size,
            high_size,
            low,
            high,
            mean_removed: false,
            low_diversity: hi - lo <= 1e-6,
            dynamic_range: hi - lo,
        })
    }

    const MAGIC: &'static [u8; 8] = b"LFSRDICT";
    const VERSION: u32 = 1;

    /// Binary sidecar: magic, version, entry count, ratio, patch sizes,
    /// flags, dynamic range, then low and high patch data as little-endian f32.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.ratio.to_le_bytes())?;
        w.write_all(&(self.patch_size as u32).to_le_bytes())?;
        w.write_all(&(self.high_size as u32).to_le_bytes())?;
        let flags = self.mean_removed as u32 | (self.low_diversity as u32) << 1;
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&self.dynamic_range.to_le_bytes())?;
        for v in self.low.iter().chain(&self.high) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not a patch dictionary file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != Self::VERSION {
            return Err(Error::Format(format!(
                "unsupported dictionary version {version}"
            )));
        }
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let ratio = f64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let patch_size = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let high_size = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let flags = u32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let dynamic_range = f32::from_le_bytes(b4);
        if count == 0 || patch_size == 0 || high_size != high_patch_size(ratio, patch_size) {
            return Err(Error::Format("inconsistent dictionary header".into()));
        }
        let mut read_f32s = |n: usize| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let low = read_f32s(count * patch_size * patch_size)?;
        let high = read_f32s(count * high_size * high_size)?;
        Ok(Self {
            ratio,
            patch_size,
            high_size,
            low,
            high,
            mean_removed: flags & 1 != 0,
            low_diversity: flags & 2 != 0,
            dynamic_range,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn high_patch_size(ratio: f64, patch_size: usize) -> usize {
    (ratio * patch_size as f64).round().max(1.0) as usize
}

fn is_integer_ratio(ratio: f64) -> bool {
    (ratio - ratio.round()).abs() < 1e-9
}

/// Downsamples by the ratio: block average for integer ratios, area average
/// over fractional footprints otherwise.
pub fn downsample(img: &Image, ratio: f64) -> Image {
    if is_integer_ratio(ratio) {
        img.box_downsample(ratio.round() as usize)
    } else {
        img.area_downsample(ratio)
    }
}

/// Patch origins along one axis: the stride grid, plus the last valid origin
/// so the whole extent is covered.
fn patch_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len < patch {
        return Vec::new();
    }
    let mut v: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if *v.last().unwrap() != len - patch {
        v.push(len - patch);
    }
    v
}

fn remove_mean(p: &mut [f32]) -> f32 {
    let m = p.iter().sum::<f32>() / p.len() as f32;
    p.iter_mut().for_each(|v| *v -= m);
    m
}

/// High patch whose pixel `(i, j)` covers `[hx + i, hx + i + 1) x [hy + j, hy + j + 1)`
/// in HR edge coordinates, bilinearly resampled at the fractional offset.
fn high_patch_at(hr: &Image, hx: f64, hy: f64, hs: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(hs * hs);
    for j in 0..hs {
        for i in 0..hs {
            out.push(hr.sample_clamped(hx + i as f64, hy + j as f64));
        }
    }
    out
}

/// Adds a high patch whose top-left edge sits at `(hx, hy)` in output edge
/// coordinates: every output pixel centre inside the patch's pixel-centre
/// hull receives the bilinear interpolate with weight one.
#[allow(clippy::too_many_arguments)]
fn splat_patch(
    hp: &[f32],
    hs: usize,
    hx: f64,
    hy: f64,
    ow: usize,
    oh: usize,
    acc: &mut [f64],
    cnt: &mut [f64],
) {
    let last = (hs - 1) as f64;
    let x0 = hx.ceil() as usize;
    let y0 = hy.ceil() as usize;
    for oy in y0..oh {
        let ty = oy as f64 - hy;
        if ty > last + 1e-9 {
            break;
        }
        let (jy, fy) = split(ty, hs);
        for ox in x0..ow {
            let tx = ox as f64 - hx;
            if tx > last + 1e-9 {
                break;
            }
            let (ix, fx) = split(tx, hs);
            let at = |i: usize, j: usize| hp[j * hs + i] as f64;
            let (ix1, jy1) = ((ix + 1).min(hs - 1), (jy + 1).min(hs - 1));
            let top = at(ix, jy) * (1.0 - fx) + at(ix1, jy) * fx;
            let bot = at(ix, jy1) * (1.0 - fx) + at(ix1, jy1) * fx;
            acc[oy * ow + ox] += top * (1.0 - fy) + bot * fy;
            cnt[oy * ow + ox] += 1.0;
        }
    }
}

fn split(t: f64, n: usize) -> (usize, f64) {
    let i = (t.floor().max(0.0) as usize).min(n - 1);
    (i, (t - i as f64).clamp(0.0, 1.0))
}

/// Cuts the HR image into low/high patch pairs. Low patches lie on the
/// stride grid of the downsampled image (without the coverage extension).
pub fn build_dictionary(hr: &Image, ratio: f64, params: &SrParams) -> Result<PatchDictionary> {
    params.validate()?;
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return config(format!("resolution ratio must be at least 1, got {ratio}"));
    }
    let ps = params.patch_size;
    let min_side = ratio * ps as f64;
    if (hr.width() as f64) < min_side || (hr.height() as f64) < min_side {
        return processing(format!(
            "HR image {}x{} is smaller than ratio x patch size ({min_side:.1} px)",
            hr.width(),
            hr.height()
        ));
    }
    let low_img = downsample(hr, ratio);
    let hs = high_patch_size(ratio, ps);
    let (lo, hi) = hr.min_max();
    let low_diversity = hi - lo <= 1e-6;
    if low_diversity {
        warn!("HR reference image is constant; dictionary has no diversity");
    }
    let xs: Vec<usize> = (0..=low_img.width() - ps).step_by(params.stride).collect();
    let ys: Vec<usize> = (0..=low_img.height() - ps).step_by(params.stride).collect();
    let entries: Vec<(Vec<f32>, Vec<f32>)> = ys
        .par_iter()
        .flat_map_iter(|&y| {
            let low_img = &low_img;
            xs.iter().filter_map(move |&x| {
                let (hx, hy) = (x as f64 * ratio, y as f64 * ratio);
                if hx + hs as f64 > hr.width() as f64 || hy + hs as f64 > hr.height() as f64 {
                    return None;
                }
                let mut l = low_img.crop(x, y, ps, ps).into_vec();
                let mut h = high_patch_at(hr, hx, hy, hs);
                if params.mean_removal {
                    let m = remove_mean(&mut l);
                    h.iter_mut().for_each(|v| *v -= m);
                }
                Some((l, h))
            })
        })
        .collect();
    let mut dict = PatchDictionary::from_pairs(ratio, ps, &entries)?;
    dict.mean_removed = params.mean_removal;
    dict.low_diversity = low_diversity;
    dict.dynamic_range = hi - lo;
    Ok(dict)
}

/// Indices and squared distances of the `k` nearest low patches, nearest
/// first; ties go to the lower index.
pub fn nearest_entries(p: &[f32], dict: &PatchDictionary, k: usize) -> Vec<(usize, f64)> {
    let n = p.len();
    let k = k.min(dict.len());
    let mut best: Vec<(f32, usize)> = Vec::with_capacity(k + 1);
    let mut bound = f32::INFINITY;
    for (i, l) in dict.low.chunks_exact(n).enumerate() {
        let mut d = 0.0f32;
        let mut pruned = false;
        for (pc, lc) in p.chunks(8).zip(l.chunks(8)) {
            d += pc
                .iter()
                .zip(lc)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>();
            if d > bound {
                pruned = true;
                break;
            }
        }
        if pruned || (best.len() == k && d >= bound) {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, i));
        best.truncate(k);
        if best.len() == k {
            bound = best[k - 1].0;
        }
    }
    // Exact distances in f64 for the weights.
    best.into_iter()
        .map(|(_, i)| {
            let d: f64 = p
                .iter()
                .zip(dict.low_patch(i))
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            (i, d)
        })
        .collect()
}

/// Gaussian weights `exp(-d^2 / 2 sigma^2)` for squared distances `d^2`.
pub fn patch_weights(sq_distances: &[f64], sigma: f64) -> Vec<f64> {
    sq_distances
        .iter()
        .map(|d2| (-d2 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Super-resolves one patch (row-major, `patch_size^2` values).
pub fn superresolve_patch(
    p: &[f32],
    dict: &PatchDictionary,
    params: &SrParams,
) -> Result<Vec<f32>> {
    if dict.is_empty() {
        return processing("patch dictionary is empty");
    }
    if p.len() != dict.patch_size * dict.patch_size {
        return processing("query patch size does not match the dictionary");
    }
    if dict.len() < params.k_neighbors {
        warn!(
            "dictionary has {} entries, fewer than k = {}; using all",
            dict.len(),
            params.k_neighbors
        );
    }
    let mut query = p.to_vec();
    let mean = if dict.mean_removed {
        remove_mean(&mut query)
    } else {
        0.0
    };
    let nn = nearest_entries(&query, dict, params.k_neighbors);
    let sigma = dict.sigma(params);
    // Shift exponents by the nearest distance so weights never all underflow.
    let d_min = nn[0].1;
    let shifted: Vec<f64> = nn.iter().map(|(_, d)| d - d_min).collect();
    let w = patch_weights(&shifted, sigma);
    let total: f64 = w.iter().sum();
    let hn = dict.high_size * dict.high_size;
    let mut out = vec![0.0f64; hn];
    for ((i, _), wk) in nn.iter().zip(&w) {
        for (o, h) in out.iter_mut().zip(dict.high_patch(*i)) {
            *o += wk * *h as f64;
        }
    }
    Ok(out.into_iter().map(|v| (v / total) as f32 + mean).collect())
}

/// Super-resolves an elemental image to `round(ratio * size)` pixels per side.
pub fn superresolve_elemental(
    elemental: &Image,
    dict: &PatchDictionary,
    params: &SrParams,
) -> Result<Image> {
    let ps = dict.patch_size;
    let (w, h) = elemental.dims();
    if w < ps || h < ps {
        return processing(format!(
            "elemental image {w}x{h} is smaller than the {ps}x{ps} patch"
        ));
    }
    let ratio = dict.ratio;
    let (ow, oh) = (
        (ratio * w as f64).round() as usize,
        (ratio * h as f64).round() as usize,
    );
    let hs = dict.high_size;
    let mut acc = vec![0.0f64; ow * oh];
    let mut cnt = vec![0.0f64; ow * oh];
    let xs = patch_origins(w, ps, params.stride);
    let ys = patch_origins(h, ps, params.stride);
    for &y in &ys {
        for &x in &xs {
            let patch = elemental.crop(x, y, ps, ps).into_vec();
            let hp = superresolve_patch(&patch, dict, params)?;
            splat_patch(
                &hp,
                hs,
                x as f64 * ratio,
                y as f64 * ratio,
                ow,
                oh,
                &mut acc,
                &mut cnt,
            );
        }
    }
    let mut fallback: Option<Image> = None;
    let mut out = Image::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let i = y * ow + x;
            let v = if cnt[i] > 1e-9 {
                (acc[i] / cnt[i]) as f32
            } else {
                fallback
                    .get_or_insert_with(|| elemental.resize_bilinear(ow, oh))
                    .get(x, y)
            };
            out.set(x, y, v);
        }
    }
    Ok(out)
}

/// Super-resolves every elemental image and reassembles them into a light
/// field whose camera has the pixel pitch divided by the ratio.
pub fn superresolve_lightfield(
    lf: &RawLightFieldImage,
    dict: &PatchDictionary,
    params: &SrParams,
) -> Result<RawLightFieldImage> {
    let camera = &lf.camera;
    let grid = elemental_grid(camera)?;
    let ratio = dict.ratio;
    let mut cam = *camera;
    cam.sensor.pixel_pitch_um /= ratio;
    cam.sensor.width_px = (camera.sensor.width_px as f64 * ratio).floor() as usize;
    cam.sensor.height_px = (camera.sensor.height_px as f64 * ratio).floor() as usize;
    cam.mla.grid_origin_px = [
        camera.mla.grid_origin_px[0] * ratio,
        camera.mla.grid_origin_px[1] * ratio,
    ];
    let new_grid = elemental_grid(&cam)?;

    let rects: Vec<_> = grid.rects().collect();
    let sr: Vec<Image> = rects
        .par_iter()
        .map(|r| superresolve_elemental(&lf.pixels.crop(r.x0, r.y0, r.size, r.size), dict, params))
        .collect::<Result<_>>()?;
    let mut by_lens = vec![None; grid.rows * grid.cols];
    for (r, img) in rects.iter().zip(&sr) {
        by_lens[r.row * grid.cols + r.col] = Some((*r, img));
    }
    let mut pixels = Image::new(cam.sensor.width_px, cam.sensor.height_px);
    let width = pixels.width();
    let targets: Vec<_> = new_grid
        .rects()
        .filter_map(|nr| {
            let (old, img) = (*by_lens.get(nr.row * grid.cols + nr.col)?)?;
            (nr.col < grid.cols).then_some((nr, old, img))
        })
        .collect();
    // Each target rect is written by exactly one lens; rows are filled in parallel.
    pixels
        .data_mut()
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, row)| {
            for (nr, old, img) in &targets {
                if y < nr.y0 || y >= nr.y0 + nr.size {
                    continue;
                }
                let s = img.width() as f64 / old.size as f64;
                let sy = ((y as f64 + 0.5) / ratio - old.y0 as f64) * s - 0.5;
                for (x, px) in row.iter_mut().enumerate().skip(nr.x0).take(nr.size) {
                    let sx = ((x as f64 + 0.5) / ratio - old.x0 as f64) * s - 0.5;
                    *px = img.sample_clamped(sx, sy);
                }
            }
        });
    RawLightFieldImage::new(pixels, cam)
}

/// Checkerboard X-junctions: strict local minima of the Hessian determinant
/// below a fraction of its global minimum, refined to sub-pixel by a
/// quadratic fit.
pub fn detect_checker_corners(img: &Image) -> Vec<[f64; 2]> {
    let (w, h) = img.dims();
    if w < 7 || h < 7 {
        return Vec::new();
    }
    let s = img.gaussian_blur(1.0);
    let det = Image::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        let g = |dx: isize, dy: isize| s.get_clamped(xi + dx, yi + dy);
        let ixx = g(1, 0) - 2.0 * g(0, 0) + g(-1, 0);
        let iyy = g(0, 1) - 2.0 * g(0, 0) + g(0, -1);
        let ixy = 0.25 * (g(1, 1) - g(1, -1) - g(-1, 1) + g(-1, -1));
        ixx * iyy - ixy * ixy
    });
    let (dmin, _) = det.min_max();
    if !(dmin < 0.0) {
        return Vec::new();
    }
    let thresh = 0.2 * dmin;
    let r = 2isize;
    let mut out = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let v = det.get(x, y);
            if v > thresh {
                continue;
            }
            let mut is_min = true;
            'n: for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let o = det.get_clamped(x as isize + dx, y as isize + dy);
                    // Raster tie-break: earlier pixels win equal values.
                    if o < v || (o == v && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_min = false;
                        break 'n;
                    }
                }
            }
            if is_min {
                let off = |a: f32, c: f32, b: f32| {
                    let den = a - 2.0 * c + b;
                    if den.abs() > 1e-12 {
                        (0.5 * (a - b) / den).clamp(-0.5, 0.5) as f64
                    } else {
                        0.0
                    }
                };
                let ox = off(det.get(x - 1, y), v, det.get(x + 1, y));
                let oy = off(det.get(x, y - 1), v, det.get(x, y + 1));
                out.push([x as f64 + ox, y as f64 + oy]);
            }
        }
    }
    out
}

fn median_nn_spacing(corners: &[[f64; 2]]) -> Option<f64> {
    let d: Vec<f64> = corners
        .iter()
        .enumerate()
        .map(|(i, p)| {
            corners
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    crate::analysis::median(&d)
}

/// Resolution ratio between an HR view and an elemental view of the same
/// checkerboard, from the median corner spacing in each.
pub fn estimate_resolution_ratio(hr: &Image, elemental: &Image) -> Result<f64> {
    let ch = detect_checker_corners(hr);
    let ce = detect_checker_corners(elemental);
    if ch.len() < 9 || ce.len() < 9 {
        return processing(format!(
            "checkerboard corner detection failed ({} HR, {} elemental corners; need 9 each); \
             set the resolution ratio manually",
            ch.len(),
            ce.len()
        ));
    }
    let (Some(sh), Some(se)) = (median_nn_spacing(&ch), median_nn_spacing(&ce)) else {
        return processing("corner spacing undefined; set the resolution ratio manually");
    };
    let ratio = sh / se;
    if ratio < 1.0 - 1e-6 {
        return processing(format!(
            "estimated ratio {ratio:.3} < 1: HR image resolves less than the elemental image"
        ));
    }
    Ok(ratio.max(1.0))
}

/// Grid search over candidate sigmas, scoring PSNR of super-resolved
/// low-resolution inputs against their high-resolution truths.
pub fn cross_validate_sigma(
    dict: &PatchDictionary,
    pairs: &[(Image, Image)],
    candidates: &[f64],
    params: &SrParams,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if candidates.is_empty() || pairs.is_empty() {
        return config("sigma cross-validation needs candidates and validation pairs");
    }
    let (_, peak) = dict_range(dict);
    let scores: Vec<(f64, f64)> = candidates
        .iter()
        .map(|&sigma| {
            let p = SrParams {
                sigma: Some(sigma),
                ..*params
            };
            let mut total = 0.0;
            for (low, truth) in pairs {
                let sr = superresolve_elemental(low, dict, &p)?;
                if sr.dims() != truth.dims() {
                    return processing(
                        "validation truth dimensions differ from the super-resolved output",
                    );
                }
                total += psnr(&sr, truth, peak);
            }
            Ok((sigma, total / pairs.len() as f64))
        })
        .collect::<Result<_>>()?;
    let best = scores
        .iter()
        .fold((candidates[0], f64::NEG_INFINITY), |b, &(s, v)| {
            if v > b.1 {
                (s, v)
            } else {
                b
            }
        });
    Ok((best.0, scores))
}

fn dict_range(dict: &PatchDictionary) -> (f64, f64) {
    (0.0, (dict.dynamic_range as f64).max(1.0))
}

/// Ratio between HR-channel and elemental-image sampling of an object plane
/// at depth `w_mm` under the camera model.
pub fn model_resolution_ratio(camera: &CameraModel, w_mm: f64) -> Result<f64> {
    let a_um = crate::simulator::object_to_virtual(w_mm, &camera.optics)?;
    let m = crate::simulator::lateral_magnification(w_mm, &camera.optics);
    let hr_px_per_mm = camera.hr_focal_px() / w_mm;
    let el_px_per_mm = m * 1000.0 / camera.sensor.pixel_pitch_um * camera.mla.spacing_um / a_um;
    Ok(hr_px_per_mm / el_px_per_mm)
}
