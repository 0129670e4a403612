//! Sparse disparity estimation between adjacent elemental images.
//!
//! The microlens array is treated as a grid of stereo cameras with baseline
//! `d`. Features are gradient-magnitude maxima; they are paired across
//! horizontally and vertically adjacent lenses by correlation distance
//! `1 - NCC` with a reciprocal best-match check, and refined to sub-pixel
//! precision with a three-point parabola over the NCC scores.

use rayon::prelude::*;

use crate::error::{config, Result};
use crate::geometry::{elemental_grid, CameraModel, ElementalRect};
use crate::image::{ncc, Image};
use crate::simulator::RawLightFieldImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl Axis {
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Axis::Horizontal => 0,
            Axis::Vertical => 1,
        }
    }
}

/// Sub-pixel localisation of the correlation peak.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubpixelMethod {
    /// Three-point parabola through the integer NCC scores.
    Parabola,
    /// Continuous NCC maximum over bilinearly shifted descriptors.
    InterpolatedNcc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityParams {
    /// Minimum gradient magnitude (intensity units per px) of a feature.
    pub threshold: f32,
    /// Odd side length of the square descriptor.
    pub descriptor_size: usize,
    pub nms_radius: usize,
    /// Largest accepted `1 - NCC`.
    pub max_correlation_distance: f64,
    /// Admissible disparity interval in px; derived from the camera depth
    /// range (padded by 2 px) when `None`.
    pub search_window_px: Option<(f64, f64)>,
    /// Allowed offset across the epipolar line, in px.
    pub perpendicular_tolerance: f64,
    pub merge_radius_px: f64,
    pub subpixel: SubpixelMethod,
}

impl Default for DisparityParams {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            descriptor_size: 7,
            nms_radius: 2,
            max_correlation_distance: 0.2,
            search_window_px: None,
            perpendicular_tolerance: 1.0,
            merge_radius_px: 1.0,
            subpixel: SubpixelMethod::InterpolatedNcc,
        }
    }
}

impl DisparityParams {
    fn radius(&self) -> usize {
        self.descriptor_size / 2
    }

    /// Features keep two extra pixels so descriptors shifted during peak
    /// refinement stay inside the elemental image.
    fn margin(&self) -> usize {
        self.radius() + 2
    }

    pub fn validate(&self, elemental_size: usize) -> Result<()> {
        if self.descriptor_size < 3 || self.descriptor_size.is_multiple_of(2) {
            return config("descriptor size must be odd and at least 3");
        }
        if self.descriptor_size + 4 > elemental_size {
            return config(format!(
                "descriptor size {} exceeds elemental size {} - 4",
                self.descriptor_size, elemental_size
            ));
        }
        if !(self.max_correlation_distance >= 0.0 && self.max_correlation_distance <= 2.0) {
            return config("max_correlation_distance must lie in [0, 2]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub lens: (usize, usize),
    /// Pixel index inside the elemental image.
    pub pixel: [usize; 2],
    /// Position relative to the lens centre (px).
    pub position: [f64; 2],
    pub descriptor: Vec<f32>,
    pub strength: f32,
}

/// Gradient-magnitude maxima of an elemental image.
///
/// `center` is the lens centre in the elemental image's edge coordinates;
/// feature positions are reported relative to it.
pub fn extract_features(
    elemental: &Image,
    lens: (usize, usize),
    center: [f64; 2],
    params: &DisparityParams,
) -> Vec<Feature> {
    let (w, h) = elemental.dims();
    let margin = params.margin();
    if w < 2 * margin + 1 || h < 2 * margin + 1 {
        return Vec::new();
    }
    let mut mag = vec![0.0f32; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = 0.5 * (elemental.get(x + 1, y) - elemental.get(x - 1, y));
            let gy = 0.5 * (elemental.get(x, y + 1) - elemental.get(x, y - 1));
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    let nms = params.nms_radius as isize;
    let mut out = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let v = mag[y * w + x];
            if v < params.threshold || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'window: for dy in -nms..=nms {
                for dx in -nms..=nms {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let n = mag[ny as usize * w + nx as usize];
                    // Plateaus resolve to the first pixel in raster order.
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > v || (earlier && n == v) {
                        is_max = false;
                        break 'window;
                    }
                }
            }
            if is_max {
                out.push(Feature {
                    lens,
                    pixel: [x, y],
                    position: [x as f64 + 0.5 - center[0], y as f64 + 0.5 - center[1]],
                    descriptor: patch(elemental, x as isize, y as isize, params.radius()),
                    strength: v,
                });
            }
        }
    }
    out
}

fn patch(img: &Image, cx: isize, cy: isize, r: usize) -> Vec<f32> {
    let r = r as isize;
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            out.push(img.get_clamped(x, y));
        }
    }
    out
}

/// Bilinearly sampled descriptor centred at index coordinates `(cx, cy)`.
fn patch_bilinear(img: &Image, cx: f64, cy: f64, r: usize) -> Vec<f32> {
    let r = r as isize;
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            out.push(img.sample_clamped(cx + dx as f64, cy + dy as f64));
        }
    }
    out
}

/// Maximiser of a unimodal function on `[lo, hi]` by golden-section search.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Match {
    /// Index into the first feature list.
    pub a: usize,
    /// Index into the second feature list.
    pub b: usize,
    pub correlation_distance: f64,
    /// Sub-pixel offset `position_a - position_b` along the axis.
    pub disparity_px: f64,
    /// Sub-pixel correction applied to feature b's position.
    pub refinement_px: f64,
    pub refined: bool,
    pub axis: Axis,
}

/// Pairs features of two adjacent elemental images. `image_b` is the
/// elemental image the second list was extracted from; it supplies the
/// shifted descriptors for sub-pixel refinement. `window` bounds the
/// disparity `position_a - position_b` along `axis`.
pub fn match_features(
    features_a: &[Feature],
    features_b: &[Feature],
    image_b: &Image,
    axis: Axis,
    window: (f64, f64),
    params: &DisparityParams,
) -> Vec<Match> {
    let k = axis.index();
    let p = 1 - k;
    let admissible = |fa: &Feature, fb: &Feature| {
        let disp = fa.position[k] - fb.position[k];
        disp >= window.0
            && disp <= window.1
            && (fa.position[p] - fb.position[p]).abs() <= params.perpendicular_tolerance + 1e-9
    };
    let mut scores = vec![f64::NEG_INFINITY; features_a.len() * features_b.len()];
    let nb = features_b.len();
    for (i, fa) in features_a.iter().enumerate() {
        for (j, fb) in features_b.iter().enumerate() {
            if admissible(fa, fb) {
                scores[i * nb + j] = ncc(&fa.descriptor, &fb.descriptor);
            }
        }
    }
    let best_b: Vec<Option<usize>> = (0..features_a.len())
        .map(|i| argmax((0..nb).map(|j| scores[i * nb + j])))
        .collect();
    let best_a: Vec<Option<usize>> = (0..nb)
        .map(|j| argmax((0..features_a.len()).map(|i| scores[i * nb + j])))
        .collect();

    let mut out = Vec::new();
    for (i, bj) in best_b.iter().enumerate() {
        let Some(j) = *bj else { continue };
        if best_a[j] != Some(i) {
            continue;
        }
        let score = scores[i * nb + j];
        let distance = 1.0 - score;
        if distance > params.max_correlation_distance {
            continue;
        }
        let fa = &features_a[i];
        let fb = &features_b[j];
        let r = params.radius();
        let (bx, by) = (fb.pixel[0] as isize, fb.pixel[1] as isize);
        let probe = |ds: isize, dp: isize| {
            let (x, y) = if k == 0 {
                (bx + ds, by + dp)
            } else {
                (bx + dp, by + ds)
            };
            ncc(&fa.descriptor, &patch(image_b, x, y, r))
        };
        // Integer NCC peak near the matched feature: detected positions of the
        // two features need not coincide with the correlation maximum.
        let mut peak = (0isize, 0isize, score);
        if score < 1.0 - 1e-9 {
            for dp in -1..=1 {
                for ds in -2..=2 {
                    if (ds, dp) != (0, 0) {
                        let v = probe(ds, dp);
                        if v > peak.2 {
                            peak = (ds, dp, v);
                        }
                    }
                }
            }
        }
        let (c, dp, s0) = peak;
        let (refinement, refined) = if s0 >= 1.0 - 1e-9 {
            // NCC is bounded by 1: an exact match is already the maximum.
            (c as f64, true)
        } else if c.abs() == 2 {
            (c as f64, false)
        } else {
            let (sm, sp) = (probe(c - 1, dp), probe(c + 1, dp));
            let denom = sm - 2.0 * s0 + sp;
            if denom < 0.0 {
                let parabola = c as f64 + (0.5 * (sm - sp) / denom).clamp(-0.5, 0.5);
                match params.subpixel {
                    SubpixelMethod::Parabola => (parabola, true),
                    SubpixelMethod::InterpolatedNcc => {
                        let f = |t: f64| {
                            let (x, y) = if k == 0 {
                                (bx as f64 + t, (by + dp) as f64)
                            } else {
                                ((bx + dp) as f64, by as f64 + t)
                            };
                            ncc(&fa.descriptor, &patch_bilinear(image_b, x, y, r))
                        };
                        (golden_max(f, c as f64 - 0.5, c as f64 + 0.5, 1e-4), true)
                    }
                }
            } else {
                (c as f64, false)
            }
        };
        out.push(Match {
            a: i,
            b: j,
            correlation_distance: distance,
            disparity_px: fa.position[k] - (fb.position[k] + refinement),
            refinement_px: refinement,
            refined,
            axis,
        });
    }
    out
}

/// Index of the largest finite value; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleAxis {
    Horizontal,
    Vertical,
    Both,
}

impl SampleAxis {
    pub fn label(self) -> &'static str {
        match self {
            SampleAxis::Horizontal => "h",
            SampleAxis::Vertical => "v",
            SampleAxis::Both => "hv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "h" => Some(SampleAxis::Horizontal),
            "v" => Some(SampleAxis::Vertical),
            "hv" => Some(SampleAxis::Both),
            _ => None,
        }
    }

    fn union(self, other: SampleAxis) -> SampleAxis {
        if self == other {
            self
        } else {
            SampleAxis::Both
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparitySample {
    /// Feature position on the sensor, edge coordinates (px).
    pub position: [f64; 2],
    /// Centre of the lens the feature was observed through (px).
    pub lens_center: [f64; 2],
    pub disparity_um: f64,
    pub confidence: f64,
    pub axis: SampleAxis,
}

/// Per-stage counts of a disparity run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DisparityDiagnostics {
    pub lenses: usize,
    pub features: usize,
    pub lens_pairs: usize,
    pub matches: usize,
    pub rejected_out_of_range: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityField {
    pub samples: Vec<DisparitySample>,
    pub diagnostics: DisparityDiagnostics,
}

impl DisparityField {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn median_disparity_um(&self) -> Option<f64> {
        let v: Vec<f64> = self.samples.iter().map(|s| s.disparity_um).collect();
        crate::analysis::median(&v)
    }
}

/// Search window used when none is configured: the disparity interval of the
/// camera depth range, padded by 2 px.
pub fn default_search_window(camera: &CameraModel) -> Result<(f64, f64)> {
    let (lo, hi) = camera.disparity_range_px()?;
    Ok((lo - 2.0, hi + 2.0))
}

/// Sparse disparities from all horizontally and vertically adjacent lens pairs.
pub fn disparity_field(
    lf: &RawLightFieldImage,
    params: &DisparityParams,
) -> Result<DisparityField> {
    let camera = &lf.camera;
    let grid = elemental_grid(camera)?;
    let size = camera.elemental_size_px();
    params.validate(size)?;
    let window = match params.search_window_px {
        Some(w) => w,
        None => default_search_window(camera)?,
    };
    let pitch_px = camera.pitch_px();
    let pp = camera.sensor.pixel_pitch_um;

    let rects: Vec<&ElementalRect> = grid.rects().collect();
    let per_lens: Vec<(Image, Vec<Feature>)> = rects
        .par_iter()
        .map(|r| {
            let img = lf.pixels.crop(r.x0, r.y0, r.size, r.size);
            let center = [r.center[0] - r.x0 as f64, r.center[1] - r.y0 as f64];
            let feats = extract_features(&img, (r.row, r.col), center, params);
            (img, feats)
        })
        .collect();
    let mut index = vec![None; grid.rows * grid.cols];
    for (i, r) in rects.iter().enumerate() {
        index[r.row * grid.cols + r.col] = Some(i);
    }

    let mut pairs = Vec::new();
    for (i, r) in rects.iter().enumerate() {
        for axis in [Axis::Horizontal, Axis::Vertical] {
            let (nr, nc) = match axis {
                Axis::Horizontal => (r.row, r.col + 1),
                Axis::Vertical => (r.row + 1, r.col),
            };
            if nr < grid.rows && nc < grid.cols {
                if let Some(j) = index[nr * grid.cols + nc] {
                    pairs.push((i, j, axis));
                }
            }
        }
    }

    let results: Vec<(usize, Vec<DisparitySample>, usize)> = pairs
        .par_iter()
        .map(|&(i, j, axis)| {
            let (ra, rb) = (rects[i], rects[j]);
            let (fa, fb) = (&per_lens[i].1, &per_lens[j].1);
            let matches = match_features(fa, fb, &per_lens[j].0, axis, window, params);
            let k = axis.index();
            let mut samples = Vec::with_capacity(matches.len());
            let mut rejected = 0;
            for m in &matches {
                let a = &fa[m.a];
                let b = &fb[m.b];
                let ua = ra.center[k] + a.position[k];
                let ub = rb.center[k] + b.position[k] + m.refinement_px;
                // t: absolute sensor distance between the matched pixels, D = d - t.
                let t = (ub - ua).abs();
                let disparity_px = pitch_px - t;
                let disparity_um = disparity_px * pp;
                if !(disparity_um > 0.0 && disparity_um <= camera.mla.pitch_um) {
                    rejected += 1;
                    continue;
                }
                let conf = (1.0 - m.correlation_distance).clamp(0.0, 1.0);
                samples.push(DisparitySample {
                    position: [ra.center[0] + a.position[0], ra.center[1] + a.position[1]],
                    lens_center: ra.center,
                    disparity_um,
                    confidence: if m.refined { conf } else { 0.5 * conf },
                    axis: match axis {
                        Axis::Horizontal => SampleAxis::Horizontal,
                        Axis::Vertical => SampleAxis::Vertical,
                    },
                });
            }
            (matches.len(), samples, rejected)
        })
        .collect();

    let mut diag = DisparityDiagnostics {
        lenses: rects.len(),
        features: per_lens.iter().map(|(_, f)| f.len()).sum(),
        lens_pairs: pairs.len(),
        ..Default::default()
    };
    // Group samples by the lens they were observed through, in lens order.
    let mut by_lens: Vec<Vec<DisparitySample>> = vec![Vec::new(); rects.len()];
    for (&(i, _, _), (n, samples, rejected)) in pairs.iter().zip(results) {
        diag.matches += n;
        diag.rejected_out_of_range += rejected;
        by_lens[i].extend(samples);
    }
    let samples: Vec<DisparitySample> = by_lens
        .into_iter()
        .flat_map(|s| merge_samples(s, params.merge_radius_px))
        .collect();
    diag.samples = samples.len();
    if samples.is_empty() {
        log::warn!("disparity field is empty: {diag:?}");
    }
    Ok(DisparityField {
        samples,
        diagnostics: diag,
    })
}

/// Confidence-weighted merge of samples closer than `radius` px.
fn merge_samples(samples: Vec<DisparitySample>, radius: f64) -> Vec<DisparitySample> {
    let mut used = vec![false; samples.len()];
    let mut out = Vec::new();
    for i in 0..samples.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let mut group = vec![samples[i]];
        for j in i + 1..samples.len() {
            if used[j] {
                continue;
            }
            let dx = samples[j].position[0] - samples[i].position[0];
            let dy = samples[j].position[1] - samples[i].position[1];
            if (dx * dx + dy * dy).sqrt() < radius {
                used[j] = true;
                group.push(samples[j]);
            }
        }
        if group.len() == 1 {
            out.push(group[0]);
            continue;
        }
        let wsum: f64 = group.iter().map(|s| s.confidence.max(1e-9)).sum();
        let avg = |f: &dyn Fn(&DisparitySample) -> f64| {
            group
                .iter()
                .map(|s| s.confidence.max(1e-9) * f(s))
                .sum::<f64>()
                / wsum
        };
        out.push(DisparitySample {
            position: [avg(&|s| s.position[0]), avg(&|s| s.position[1])],
            lens_center: group[0].lens_center,
            disparity_um: avg(&|s| s.disparity_um),
            confidence: group.iter().map(|s| s.confidence).sum::<f64>() / group.len() as f64,
            axis: group
                .iter()
                .skip(1)
                .fold(group[0].axis, |acc, s| acc.union(s.axis)),
        });
    }
    out
}
