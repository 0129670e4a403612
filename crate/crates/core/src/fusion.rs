//! Step IV: reconstruct a 2D view from the light field, register it to the
//! HR image, warp the dense depth map into the HR frame and pair the two.
//!
//! Image coordinates in this module are index coordinates (pixel centres at
//! integers) unless stated otherwise.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::depth::DenseDepthMap;
use crate::error::{domain, processing, Result};
use crate::geometry::{elemental_grid, CameraModel, ViewLattice};
use crate::image::{edge_to_index, Image, Mask};
use crate::simulator::RawLightFieldImage;

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructedView {
    pub image: Image,
    /// Pixels that gathered at least one sensor sample.
    pub coverage: Mask,
    pub lattice: ViewLattice,
}

/// Renders the virtual image plane at distance `a_um` behind the MLA. Each
/// lattice pixel averages the bilinear sensor samples `u = c + (X - c) B / a`
/// of every lens whose elemental image contains `u`.
pub fn reconstruct_view(lf: &RawLightFieldImage, a_um: f64) -> Result<ReconstructedView> {
    let camera = &lf.camera;
    let lattice = ViewLattice::for_camera(camera, a_um)?;
    let grid = elemental_grid(camera)?;
    let k = camera.mla.spacing_um / a_um;
    let (w, h) = lattice.dims();
    let reach = grid.pitch_px().floor() / 2.0 / k;
    let mut image = Image::new(w, h);
    let mut cov = vec![false; w * h];
    image
        .data_mut()
        .par_chunks_mut(w)
        .zip(cov.par_chunks_mut(w))
        .enumerate()
        .for_each(|(j, (row, crow))| {
            for i in 0..w {
                let x = lattice.position(i as f64, j as f64);
                let (c0, c1) = grid.lens_span(x[0], reach, 0);
                let (r0, r1) = grid.lens_span(x[1], reach, 1);
                let mut acc = 0.0f64;
                let mut n = 0usize;
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let Some(rect) = grid.get(r, c) else { continue };
                        let u = [
                            rect.center[0] + (x[0] - rect.center[0]) * k,
                            rect.center[1] + (x[1] - rect.center[1]) * k,
                        ];
                        // Keep all bilinear taps inside this elemental image.
                        let lo = [rect.x0 as f64 + 0.5, rect.y0 as f64 + 0.5];
                        let hi = [
                            lo[0] + (rect.size - 1) as f64,
                            lo[1] + (rect.size - 1) as f64,
                        ];
                        if u[0] < lo[0] || u[1] < lo[1] || u[0] > hi[0] || u[1] > hi[1] {
                            continue;
                        }
                        if let Some(v) = lf.pixels.sample(edge_to_index(u[0]), edge_to_index(u[1]))
                        {
                            acc += v as f64;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    row[i] = (acc / n as f64) as f32;
                    crow[i] = true;
                }
            }
        });
    let coverage = Mask::from_fn(w, h, |x, y| cov[y * w + x]);
    Ok(ReconstructedView {
        image,
        coverage,
        lattice,
    })
}

/// Variance of the 5-point Laplacian over pixels whose stencil lies in `mask`.
pub fn sharpness(img: &Image, mask: &Mask) -> f64 {
    let (w, h) = img.dims();
    let mut vals = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .all(|&(a, b)| mask.get(a, b))
            {
                let l =
                    img.get(x - 1, y) + img.get(x + 1, y) + img.get(x, y - 1) + img.get(x, y + 1)
                        - 4.0 * img.get(x, y);
                vals.push(l as f64);
            }
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
}

/// Similarity `p_hr = s R(theta) p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform2D {
    pub scale: f64,
    pub rotation_rad: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for Transform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform2D {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation_rad: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn new(scale: f64, rotation_deg: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return domain(format!("transform scale must be positive, got {scale}"));
        }
        Ok(Self {
            scale,
            rotation_rad: rotation_deg.to_radians(),
            tx,
            ty,
        })
    }

    pub fn rotation_deg(&self) -> f64 {
        self.rotation_rad.to_degrees()
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_rad.sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.tx,
            self.scale * (s * p[0] + c * p[1]) + self.ty,
        ]
    }

    pub fn apply_inverse(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_rad.sin_cos();
        let (dx, dy) = (q[0] - self.tx, q[1] - self.ty);
        [
            (c * dx + s * dy) / self.scale,
            (-s * dx + c * dy) / self.scale,
        ]
    }

    /// The same mapping between images box-downsampled by `fv` (source)
    /// and `fh` (target), where index `x` becomes `(x + 0.5) / f - 0.5`.
    fn between_levels(&self, fv: f64, fh: f64) -> Self {
        let c = 0.5 * (fv - 1.0);
        let m = self.apply([c, c]);
        Self {
            scale: self.scale * fv / fh,
            rotation_rad: self.rotation_rad,
            tx: (m[0] + 0.5) / fh - 0.5,
            ty: (m[1] + 0.5) / fh - 0.5,
        }
    }

    /// Inverse of [`Transform2D::between_levels`].
    fn at_levels(&self, fv: f64, fh: f64) -> Self {
        // Full-resolution translation t satisfies between_levels(t) == self.
        let scale = self.scale * fh / fv;
        let c = 0.5 * (fv - 1.0);
        let rot = Self {
            scale,
            rotation_rad: self.rotation_rad,
            tx: 0.0,
            ty: 0.0,
        }
        .apply([c, c]);
        Self {
            scale,
            rotation_rad: self.rotation_rad,
            tx: (self.tx + 0.5) * fh - 0.5 - rot[0],
            ty: (self.ty + 0.5) * fh - 0.5 - rot[1],
        }
    }
}

/// Registration output: the transform and the NCC at the optimum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Registration {
    pub transform: Transform2D,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationParams {
    pub min_scale: f64,
    pub max_scale: f64,
    pub scale_steps: usize,
    pub max_rotation_deg: f64,
    pub rotation_step_deg: f64,
    /// Registration fails below this NCC.
    pub min_score: f64,
    /// Largest number of view pixels used in the NCC objective.
    pub max_points: usize,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            min_scale: 0.5,
            max_scale: 8.0,
            scale_steps: 37,
            max_rotation_deg: 12.0,
            rotation_step_deg: 2.0,
            min_score: 0.3,
            max_points: 8_000,
        }
    }
}

/// View samples used by the objective: positions and values.
struct Points {
    pos: Vec<[f64; 2]>,
    val: Vec<f32>,
}

fn view_points(view: &Image, mask: &Mask, max_points: usize) -> Points {
    let n = mask.count().max(1);
    let stride = ((n as f64 / max_points as f64).sqrt().ceil() as usize).max(1);
    let mut pos = Vec::new();
    let mut val = Vec::new();
    for y in (0..view.height()).step_by(stride) {
        for x in (0..view.width()).step_by(stride) {
            if mask.get(x, y) {
                pos.push([x as f64, y as f64]);
                val.push(view.get(x, y));
            }
        }
    }
    Points { pos, val }
}

/// NCC between view samples and the target sampled at their mapped
/// positions, scaled down when less than half of the points land inside.
fn overlap_ncc(points: &Points, target: &Image, t: &Transform2D) -> f64 {
    let mut a = Vec::with_capacity(points.pos.len());
    let mut b = Vec::with_capacity(points.pos.len());
    for (p, &v) in points.pos.iter().zip(&points.val) {
        let q = t.apply(*p);
        if let Some(s) = target.sample(q[0], q[1]) {
            a.push(v);
            b.push(s);
        }
    }
    if a.len() < 16 {
        return -1.0;
    }
    let frac = a.len() as f64 / points.pos.len() as f64;
    let r = crate::image::ncc(&a, &b);
    if frac >= 0.5 {
        r
    } else {
        r * frac / 0.5
    }
}

/// Smallest `n' >= n` whose only prime factors are 2, 3 and 5.
fn fft_size(n: usize) -> usize {
    let smooth = |mut m: usize| {
        for p in [2, 3, 5] {
            while m.is_multiple_of(p) {
                m /= p;
            }
        }
        m == 1
    };
    (n.max(1)..).find(|&m| smooth(m)).unwrap()
}

/// Row and column FFT plans for one (padded) image size.
struct Fft2 {
    w: usize,
    h: usize,
    fwd: [std::sync::Arc<dyn rustfft::Fft<f64>>; 2],
    inv: [std::sync::Arc<dyn rustfft::Fft<f64>>; 2],
}

impl Fft2 {
    fn new(w: usize, h: usize, planner: &mut FftPlanner<f64>) -> Self {
        Self {
            w,
            h,
            fwd: [planner.plan_fft_forward(w), planner.plan_fft_forward(h)],
            inv: [planner.plan_fft_inverse(w), planner.plan_fft_inverse(h)],
        }
    }

    fn run(&self, data: &mut [Complex<f64>], inverse: bool) {
        let plans = if inverse { &self.inv } else { &self.fwd };
        for r in data.chunks_mut(self.w) {
            plans[0].process(r);
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                buf[y] = data[y * self.w + x];
            }
            plans[1].process(&mut buf);
            for y in 0..self.h {
                data[y * self.w + x] = buf[y];
            }
        }
    }

    fn forward(&self, values: &[f64]) -> Vec<Complex<f64>> {
        let mut a: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.run(&mut a, false);
        a
    }
}

/// Integer shift `d` maximising the phase correlation, such that
/// `moving(p) ~ fixed(p + d)`; `fixed` is given as its spectrum.
fn phase_correlation(moving: &[f64], fixed: &[Complex<f64>], fft: &Fft2) -> [f64; 2] {
    let (w, h) = (fft.w, fft.h);
    let mut a = fft.forward(moving);
    for (x, y) in a.iter_mut().zip(fixed) {
        let c = y * x.conj();
        let m = c.norm();
        *x = if m > 1e-12 {
            c / m
        } else {
            Complex::new(0.0, 0.0)
        };
    }
    fft.run(&mut a, true);
    let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
    for (i, v) in a.iter().enumerate() {
        if v.re > best {
            best = v.re;
            bi = i;
        }
    }
    let (mut dx, mut dy) = ((bi % w) as f64, (bi / w) as f64);
    if dx > w as f64 / 2.0 {
        dx -= w as f64;
    }
    if dy > h as f64 / 2.0 {
        dy -= h as f64;
    }
    [dx, dy]
}

/// Box-downsampled copies of an image at factors 1, 2, 4, ... with masks.
struct Pyramid {
    raw: Vec<Image>,
    masks: Vec<Mask>,
}

impl Pyramid {
    /// Levels continue while the short side stays at or above `min_side`.
    fn new(img: &Image, mask: &Mask, min_side: usize) -> Self {
        let mut raw = vec![img.clone()];
        let mut masks = vec![mask.clone()];
        loop {
            let last = raw.last().unwrap();
            if last.width().min(last.height()) / 2 < min_side {
                break;
            }
            let next = last.box_downsample(2);
            let m = masks.last().unwrap();
            let next_mask = Mask::from_fn(next.width(), next.height(), |x, y| {
                m.get(2 * x, 2 * y)
                    && m.get(2 * x + 1, 2 * y)
                    && m.get(2 * x, 2 * y + 1)
                    && m.get(2 * x + 1, 2 * y + 1)
            });
            raw.push(next);
            masks.push(next_mask);
        }
        Self { raw, masks }
    }

    fn top(&self) -> usize {
        self.raw.len() - 1
    }
}

fn factor(level: usize) -> f64 {
    (1usize << level) as f64
}

/// Footprint (px, long side) of the view on the level used for the coarse search.
const COARSE_FOOTPRINT: f64 = 64.0;

/// View samples used to score a coarse candidate.
const COARSE_POINTS: usize = 1500;

/// Longest side of the images used for coarse phase correlation.
const COARSE_FFT_SIDE: usize = 192;

/// Blur (level pixels) applied to both images during the coarse search.
const COARSE_SMOOTHING: f64 = 1.0;

/// Number of coarse candidates refined before choosing one.
const COARSE_KEEP: usize = 3;

/// Estimates the similarity mapping view coordinates onto HR coordinates.
pub fn register(
    view: &ReconstructedView,
    hr: &Image,
    params: &RegistrationParams,
) -> Result<Registration> {
    register_images(&view.image, &view.coverage, hr, params)
}

/// [`register`] on a bare image and validity mask.
pub fn register_images(
    view: &Image,
    mask: &Mask,
    hr: &Image,
    params: &RegistrationParams,
) -> Result<Registration> {
    if mask.count() < 16 || view.dims() != (mask.width(), mask.height()) {
        return processing("registration: view has too few valid pixels");
    }
    if !(params.min_scale > 0.0
        && params.max_scale >= params.min_scale
        && params.rotation_step_deg > 0.0)
    {
        return domain(
            "registration: scale range must be positive and ordered, rotation step positive",
        );
    }
    let vp = Pyramid::new(view, mask, 8);
    let hp = Pyramid::new(hr, &Mask::new(hr.width(), hr.height(), true), 8);
    let candidates = coarse_search(&vp, &hp, params);

    // Refine every candidate on its own level, then carry the best one down.
    let refined: Vec<(f64, Transform2D, usize)> = candidates
        .par_iter()
        .map(|&(_, c, k)| {
            let t = refine_on_level(view, mask, &hp, c, k, params);
            (final_score(view, mask, hr, &t, params), t, k)
        })
        .collect();
    let (_, mut t, k) =
        refined
            .into_iter()
            .fold((f64::NEG_INFINITY, Transform2D::identity(), 0), |b, c| {
                if c.0 > b.0 {
                    c
                } else {
                    b
                }
            });
    for level in (0..k).rev() {
        t = refine_on_level(view, mask, &hp, t, level, params);
    }
    let score = final_score(view, mask, hr, &t, params);
    if !(score >= params.min_score) {
        return processing(format!(
            "registration failed: peak NCC {score:.3} below {:.2} (scale {:.3}, rotation {:.2} deg, \
             translation ({:.1}, {:.1}) px)",
            params.min_score,
            t.scale,
            t.rotation_deg(),
            t.tx,
            t.ty
        ));
    }
    Ok(Registration {
        transform: t,
        score,
    })
}

/// Residual NCC at full resolution, with the HR image low-passed to the
/// view's sampling when the view is magnified.
fn final_score(
    view: &Image,
    mask: &Mask,
    hr: &Image,
    t: &Transform2D,
    params: &RegistrationParams,
) -> f64 {
    let st = target_blur_sigma(t.scale);
    let points = view_points(view, mask, params.max_points);
    if st > 0.0 {
        overlap_ncc(&points, &hr.gaussian_blur(st), t)
    } else {
        overlap_ncc(&points, hr, t)
    }
}

/// Pattern search with the target at one pyramid level and the view at full resolution.
fn refine_on_level(
    view: &Image,
    mask: &Mask,
    hp: &Pyramid,
    t: Transform2D,
    level: usize,
    params: &RegistrationParams,
) -> Transform2D {
    let f = factor(level);
    let t_level = t.between_levels(1.0, f);
    let st = target_blur_sigma(t_level.scale);
    let target = if st > 0.0 {
        hp.raw[level].gaussian_blur(st)
    } else {
        hp.raw[level].clone()
    };
    let sv = view_blur_sigma(t_level.scale);
    let v = if sv > 0.0 {
        view.gaussian_blur(sv)
    } else {
        view.clone()
    };
    let points = view_points(&v, mask, params.max_points);
    let bounds = [
        (params.min_scale / (2.0 * f)).ln(),
        (params.max_scale * 2.0 / f).ln(),
        (params.max_rotation_deg + params.rotation_step_deg).to_radians(),
    ];
    let min_step = if level == 0 {
        [5e-6, 5e-6, 0.004, 0.004]
    } else {
        [1e-4, 1e-4, 0.05, 0.05]
    };
    pattern_search(&points, &target, t_level, bounds, min_step).at_levels(1.0, f)
}

/// Blur applied to the view when it is minified onto the target grid.
fn view_blur_sigma(scale: f64) -> f64 {
    if scale < 0.8 {
        0.5 / scale
    } else {
        0.0
    }
}

/// Blur applied to the target when the view is magnified onto it, so the
/// target carries no more detail than the view.
fn target_blur_sigma(scale: f64) -> f64 {
    if scale > 1.5 {
        0.4 * scale
    } else {
        0.0
    }
}

/// Scale/rotation grid. For each candidate, the view and HR pyramid levels
/// are picked so the view spans about [`COARSE_FOOTPRINT`] pixels; phase
/// correlation supplies the translation and the level NCC ranks it.
/// Returns `(score, transform, hr_level)`.
fn coarse_search(
    vp: &Pyramid,
    hp: &Pyramid,
    params: &RegistrationParams,
) -> Vec<(f64, Transform2D, usize)> {
    let long = vp.raw[0].width().max(vp.raw[0].height()) as f64;
    let mut j = 0;
    while j < vp.top() && long / factor(j + 1) >= COARSE_FOOTPRINT * 0.75 {
        j += 1;
    }
    let fv = factor(j);
    let view = vp.raw[j].gaussian_blur(COARSE_SMOOTHING);
    let vmask = &vp.masks[j];
    let steps = params.scale_steps.max(1);
    let scales: Vec<f64> = (0..steps)
        .map(|si| {
            let u = if steps > 1 {
                si as f64 / (steps - 1) as f64
            } else {
                0.5
            };
            params.min_scale * (params.max_scale / params.min_scale).powf(u)
        })
        .collect();
    let level_of =
        |s: f64| ((s * long / COARSE_FOOTPRINT).log2().round().max(0.0) as usize).min(hp.top());

    // Phase correlation runs on a level no larger than COARSE_FFT_SIDE.
    let mut k_cap = 0;
    while k_cap < hp.top() && hp.raw[k_cap].width().max(hp.raw[k_cap].height()) > COARSE_FFT_SIDE {
        k_cap += 1;
    }
    let smooth: Vec<Option<Image>> = (0..=hp.top())
        .map(|k| {
            scales
                .iter()
                .any(|&s| level_of(s) == k || level_of(s).max(k_cap) == k)
                .then(|| hp.raw[k].gaussian_blur(COARSE_SMOOTHING))
        })
        .collect();
    let mut planner = FftPlanner::new();
    let spectra: Vec<Option<(Fft2, Vec<Complex<f64>>)>> = (0..=hp.top())
        .map(|k| {
            let img = smooth[k].as_ref()?;
            if !scales.iter().any(|&s| level_of(s).max(k_cap) == k) {
                return None;
            }
            let fft = Fft2::new(fft_size(img.width()), fft_size(img.height()), &mut planner);
            let m = img.mean();
            let mut centred = vec![0.0; fft.w * fft.h];
            for y in 0..img.height() {
                for x in 0..img.width() {
                    centred[y * fft.w + x] = img.get(x, y) as f64 - m;
                }
            }
            let spectrum = fft.forward(&centred);
            Some((fft, spectrum))
        })
        .collect();

    let n_rot = (params.max_rotation_deg / params.rotation_step_deg + 1e-9).floor() as i64;
    let mut scored: Vec<(f64, Transform2D, usize)> = scales
        .par_iter()
        .flat_map_iter(|&s| {
            let k = level_of(s);
            let kp = k.max(k_cap);
            let (fk, fp) = (factor(k), factor(kp));
            let canvas = smooth[k].as_ref().unwrap();
            let pc_canvas = smooth[kp].as_ref().unwrap();
            let (fft, spectrum) = spectra[kp].as_ref().unwrap();
            let (cw, ch) = pc_canvas.dims();
            let pw = fft.w;
            let blurred = |sl: f64| {
                let sv = view_blur_sigma(sl);
                if sv > 0.0 {
                    view.gaussian_blur(sv)
                } else {
                    view.clone()
                }
            };
            let sp = s * fv / fp;
            let vp_img = blurred(sp);
            let vk_img = if kp == k {
                vp_img.clone()
            } else {
                blurred(s * fv / fk)
            };
            let points = view_points(&vk_img, vmask, COARSE_POINTS);
            let radius = (fp / fk) as i64 - 1;
            (-n_rot..=n_rot)
                .map(|ri| {
                    // Level transform that centres the view on the canvas.
                    let mut t = Transform2D {
                        scale: sp,
                        rotation_rad: (ri as f64 * params.rotation_step_deg).to_radians(),
                        tx: 0.0,
                        ty: 0.0,
                    };
                    let v = &vp_img;
                    let vc = t.apply([
                        (v.width() as f64 - 1.0) / 2.0,
                        (v.height() as f64 - 1.0) / 2.0,
                    ]);
                    t.tx = (cw as f64 - 1.0) / 2.0 - vc[0];
                    t.ty = (ch as f64 - 1.0) / 2.0 - vc[1];
                    let mut moving = vec![0.0f64; pw * fft.h];
                    let mut inside = vec![false; pw * fft.h];
                    let mut acc = (0.0, 0usize);
                    for y in 0..ch {
                        for x in 0..cw {
                            let p = t.apply_inverse([x as f64, y as f64]);
                            let (xi, yi) = (p[0].round(), p[1].round());
                            if xi < 0.0
                                || yi < 0.0
                                || xi >= v.width() as f64
                                || yi >= v.height() as f64
                            {
                                continue;
                            }
                            if !vmask.get(xi as usize, yi as usize) {
                                continue;
                            }
                            if let Some(val) = v.sample(p[0], p[1]) {
                                moving[y * pw + x] = val as f64;
                                inside[y * pw + x] = true;
                                acc.0 += val as f64;
                                acc.1 += 1;
                            }
                        }
                    }
                    if acc.1 < 16 {
                        return (f64::NEG_INFINITY, t.at_levels(fv, fp), k);
                    }
                    let mean = acc.0 / acc.1 as f64;
                    for (m, &i) in moving.iter_mut().zip(&inside) {
                        if i {
                            *m -= mean;
                        }
                    }
                    let d = phase_correlation(&moving, spectrum, fft);
                    t.tx += d[0];
                    t.ty += d[1];
                    // Re-centre on the scoring level with a local integer search.
                    let tk = t.at_levels(fv, fp).between_levels(fv, fk);
                    let shifted = |d: [i64; 2]| Transform2D {
                        tx: tk.tx + d[0] as f64,
                        ty: tk.ty + d[1] as f64,
                        ..tk
                    };
                    let mut at = [0i64, 0];
                    let mut best = (overlap_ncc(&points, canvas, &tk), tk);
                    'climb: loop {
                        for d in [[1, 0], [-1, 0], [0, 1], [0, -1]] {
                            let n = [at[0] + d[0], at[1] + d[1]];
                            if n[0].abs() > radius || n[1].abs() > radius {
                                continue;
                            }
                            let c = shifted(n);
                            let v = overlap_ncc(&points, canvas, &c);
                            if v > best.0 {
                                best = (v, c);
                                at = n;
                                continue 'climb;
                            }
                        }
                        break;
                    }
                    (best.0, best.1.at_levels(fv, fk), k)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(COARSE_KEEP);
    scored
}

/// Compass search on `(ln s, theta, tx, ty)` maximising the overlap NCC,
/// with `ln s` in `[bounds[0], bounds[1]]` and `|theta| <= bounds[2]`.
fn pattern_search(
    points: &Points,
    target: &Image,
    start: Transform2D,
    bounds: [f64; 3],
    min_step: [f64; 4],
) -> Transform2D {
    let mut x = [start.scale.ln(), start.rotation_rad, start.tx, start.ty];
    let to_t = |x: &[f64; 4]| Transform2D {
        scale: x[0].exp(),
        rotation_rad: x[1],
        tx: x[2],
        ty: x[3],
    };
    let mut best = overlap_ncc(points, target, &to_t(&x));
    // Initial steps move the view's far corner by about two target pixels.
    let extent = points
        .pos
        .iter()
        .fold(1.0f64, |m, p| m.max(p[0].abs()).max(p[1].abs()))
        * start.scale;
    let mut step = [2.0 / extent, 2.0 / extent, 2.0, 2.0];
    for _ in 0..4000 {
        let mut improved = false;
        for k in 0..4 {
            for sign in [1.0, -1.0] {
                let mut y = x;
                y[k] += sign * step[k];
                if y[0] < bounds[0] || y[0] > bounds[1] || y[1].abs() > bounds[2] {
                    continue;
                }
                let v = overlap_ncc(points, target, &to_t(&y));
                if v > best {
                    best = v;
                    x = y;
                    improved = true;
                }
            }
        }
        if !improved {
            if step.iter().zip(&min_step).all(|(s, m)| s <= m) {
                break;
            }
            for (s, m) in step.iter_mut().zip(&min_step) {
                *s = (*s * 0.5).max(*m);
            }
        }
    }
    to_t(&x)
}

/// Depth map resampled into the HR frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedDepth {
    pub depth: Image,
    pub mask: Mask,
}

/// Inverse-maps every HR pixel into the dense map and samples it
/// bilinearly. A pixel is valid only if every contributing tap is valid.
pub fn warp_depth(
    dense: &DenseDepthMap,
    t: &Transform2D,
    hr_dims: (usize, usize),
) -> Result<WarpedDepth> {
    warp_image(&dense.depth, &dense.mask, t, hr_dims)
}

/// [`warp_depth`] on a bare image and mask.
pub fn warp_image(
    src: &Image,
    src_mask: &Mask,
    t: &Transform2D,
    dims: (usize, usize),
) -> Result<WarpedDepth> {
    let (w, h) = dims;
    let mut depth = Image::new(w, h);
    let mut valid = vec![false; w * h];
    depth
        .data_mut()
        .par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, vrow))| {
            for x in 0..w {
                let p = t.apply_inverse([x as f64, y as f64]);
                if let Some(v) = sample_masked(src, src_mask, p[0], p[1]) {
                    row[x] = v;
                    vrow[x] = true;
                }
            }
        });
    if !valid.iter().any(|&v| v) {
        return processing("warp maps the whole depth map outside the HR frame");
    }
    let mask = Mask::from_fn(w, h, |x, y| valid[y * w + x]);
    Ok(WarpedDepth { depth, mask })
}

fn sample_masked(img: &Image, mask: &Mask, x: f64, y: f64) -> Option<f32> {
    let v = img.sample(x, y)?;
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let taps = [
        (x0, y0, true),
        (x0 + 1, y0, fx > 0.0),
        (x0, y0 + 1, fy > 0.0),
        (x0 + 1, y0 + 1, fx > 0.0 && fy > 0.0),
    ];
    taps.iter()
        .all(|&(tx, ty, used)| !used || mask.get(tx, ty))
        .then_some(v)
}

/// Pinhole intrinsics of the HR channel in index coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HrIntrinsics {
    pub focal_px: f64,
    pub center: [f64; 2],
}

impl HrIntrinsics {
    pub fn from_camera(camera: &CameraModel) -> Self {
        let c = camera.hr_sensor.center_px();
        Self {
            focal_px: camera.hr_focal_px(),
            center: [edge_to_index(c[0]), edge_to_index(c[1])],
        }
    }

    /// Object point (mm) seen at HR pixel `(x, y)` at depth `w_mm`.
    pub fn back_project(&self, x: f64, y: f64, w_mm: f64) -> [f64; 3] {
        [
            (x - self.center[0]) * w_mm / self.focal_px,
            (y - self.center[1]) * w_mm / self.focal_px,
            w_mm,
        ]
    }
}

/// HR image paired with per-pixel depth (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct FusedRgbd {
    pub color: Image,
    pub depth: Image,
    pub mask: Mask,
    pub intrinsics: HrIntrinsics,
}

impl FusedRgbd {
    /// Valid pixels as `(x, y, z)` mm points with their intensity.
    pub fn point_cloud(&self) -> Vec<([f64; 3], f32)> {
        let (w, h) = self.color.dims();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.mask.get(x, y) {
                    let p = self.intrinsics.back_project(
                        x as f64,
                        y as f64,
                        self.depth.get(x, y) as f64,
                    );
                    out.push((p, self.color.get(x, y)));
                }
            }
        }
        out
    }
}

/// Pairs the HR image with the warped depth; values are not modified.
pub fn fuse(hr: &Image, warped: &WarpedDepth, intrinsics: HrIntrinsics) -> Result<FusedRgbd> {
    if hr.dims() != warped.depth.dims() || hr.dims() != (warped.mask.width(), warped.mask.height())
    {
        return processing(format!(
            "fusion: HR image {:?} and depth {:?} differ in size",
            hr.dims(),
            warped.depth.dims()
        ));
    }
    let (w, h) = hr.dims();
    let mask = Mask::from_fn(w, h, |x, y| {
        warped.mask.get(x, y) && warped.depth.get(x, y).is_finite()
    });
    Ok(FusedRgbd {
        color: hr.clone(),
        depth: warped.depth.clone(),
        mask,
        intrinsics,
    })
}
