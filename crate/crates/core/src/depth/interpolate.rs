//! Scattered-data interpolation of sparse depth onto a regular lattice.
//!
//! Small sample sets use an exact thin-plate spline. Large ones use the
//! discrete thin-plate energy on the grid itself,
//! `sum u_xx^2 + 2 u_xy^2 + u_yy^2`, minimised by conjugate gradients with
//! sample cells held fixed and a coarse-to-fine initial guess.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{processing, Result};
use crate::image::{Image, Mask};

/// Thin-plate spline through scattered `(x, y, value)` samples.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    weights: Vec<f64>,
    affine: [f64; 3],
    offset: [f64; 2],
    scale: f64,
}

#[inline]
fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    pub fn fit(points: &[[f64; 2]], values: &[f64]) -> Result<Self> {
        let n = points.len();
        assert_eq!(n, values.len());
        if n < 3 {
            return processing("thin-plate spline needs at least 3 samples");
        }
        // Normalise coordinates for conditioning; the spline is invariant to it.
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let offset = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        let centers: Vec<[f64; 2]> = points
            .iter()
            .map(|p| [(p[0] - offset[0]) / scale, (p[1] - offset[1]) / scale])
            .collect();
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..i {
                let dx = centers[i][0] - centers[j][0];
                let dy = centers[i][1] - centers[j][1];
                let k = tps_kernel(dx * dx + dy * dy);
                a[(i, j)] = k;
                a[(j, i)] = k;
            }
            for (c, v) in [1.0, centers[i][0], centers[i][1]].into_iter().enumerate() {
                a[(i, n + c)] = v;
                a[(n + c, i)] = v;
            }
        }
        let mut rhs = DVector::<f64>::zeros(m);
        for i in 0..n {
            rhs[i] = values[i];
        }
        let Some(sol) = a.lu().solve(&rhs) else {
            return processing("thin-plate system is singular (collinear or duplicate samples)");
        };
        if sol.iter().any(|v| !v.is_finite()) {
            return processing("thin-plate solve produced non-finite coefficients");
        }
        Ok(Self {
            centers,
            weights: sol.rows(0, n).iter().copied().collect(),
            affine: [sol[n], sol[n + 1], sol[n + 2]],
            offset,
            scale,
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.offset[0]) / self.scale;
        let v = (y - self.offset[1]) / self.scale;
        let mut acc = self.affine[0] + self.affine[1] * u + self.affine[2] * v;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let dx = u - c[0];
            let dy = v - c[1];
            acc += w * tps_kernel(dx * dx + dy * dy);
        }
        acc
    }

    /// Evaluates at every pixel centre of a `width x height` lattice.
    pub fn rasterize(&self, width: usize, height: usize) -> Image {
        let mut img = Image::new(width, height);
        img.data_mut()
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, px) in row.iter_mut().enumerate() {
                    *px = self.eval(x as f64, y as f64) as f32;
                }
            });
        img
    }
}

/// Settings of the grid thin-plate solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSolverSettings {
    /// Stop once the largest per-iteration update falls below this (mm).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Parallel stencil evaluation; results are identical to the serial path.
    pub parallel: bool,
}

impl Default for GridSolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_iterations: 20_000,
            parallel: true,
        }
    }
}

/// Discrete thin-plate energy gradient `D^T D u` (up to a factor 2).
fn apply_operator(u: &[f64], w: usize, h: usize, out: &mut [f64], parallel: bool) {
    let at = |x: isize, y: isize| -> f64 { u[y as usize * w + x as usize] };
    let kernel = |y: usize, row: &mut [f64]| {
        let (wi, hi) = (w as isize, h as isize);
        let yi = y as isize;
        for (x, o) in row.iter_mut().enumerate() {
            let xi = x as isize;
            let mut acc = 0.0;
            // u_xx terms centred at x-1, x, x+1.
            for (cx, coef) in [(xi - 1, 1.0), (xi, -2.0), (xi + 1, 1.0)] {
                if cx >= 1 && cx < wi - 1 {
                    let d = at(cx - 1, yi) - 2.0 * at(cx, yi) + at(cx + 1, yi);
                    acc += coef * d;
                }
            }
            for (cy, coef) in [(yi - 1, 1.0), (yi, -2.0), (yi + 1, 1.0)] {
                if cy >= 1 && cy < hi - 1 {
                    let d = at(xi, cy - 1) - 2.0 * at(xi, cy) + at(xi, cy + 1);
                    acc += coef * d;
                }
            }
            // Cross terms over the four 2x2 blocks touching (x, y), weight 2.
            for (bx, by) in [(xi - 1, yi - 1), (xi, yi - 1), (xi - 1, yi), (xi, yi)] {
                if bx >= 0 && by >= 0 && bx < wi - 1 && by < hi - 1 {
                    let d = at(bx + 1, by + 1) - at(bx + 1, by) - at(bx, by + 1) + at(bx, by);
                    let sx = if xi == bx { -1.0 } else { 1.0 };
                    let sy = if yi == by { -1.0 } else { 1.0 };
                    acc += 2.0 * sx * sy * d;
                }
            }
            *o = acc;
        }
    };
    if parallel {
        out.par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| kernel(y, row));
    } else {
        out.chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| kernel(y, row));
    }
}

fn dot(a: &[f64], b: &[f64], w: usize, parallel: bool) -> f64 {
    // Row partials summed in row order keep serial and parallel results identical.
    let partial = |(ra, rb): (&[f64], &[f64])| ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
    let rows: Vec<f64> = if parallel {
        a.par_chunks(w).zip(b.par_chunks(w)).map(partial).collect()
    } else {
        a.chunks(w).zip(b.chunks(w)).map(partial).collect()
    };
    rows.iter().sum()
}

/// Minimises the discrete thin-plate energy with `fixed` cells held at their
/// values, starting from `init`. Returns the iteration count.
fn solve_grid(
    u: &mut [f64],
    fixed: &[bool],
    w: usize,
    h: usize,
    settings: &GridSolverSettings,
) -> usize {
    let n = w * h;
    let par = settings.parallel;
    let mut au = vec![0.0; n];
    apply_operator(u, w, h, &mut au, par);
    let mut r: Vec<f64> = (0..n)
        .map(|i| if fixed[i] { 0.0 } else { -au[i] })
        .collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r, w, par);
    let mut ap = vec![0.0; n];
    for it in 0..settings.max_iterations {
        if rr <= 1e-30 {
            return it;
        }
        apply_operator(&p, w, h, &mut ap, par);
        for i in 0..n {
            if fixed[i] {
                ap[i] = 0.0;
            }
        }
        let pap = dot(&p, &ap, w, par);
        if pap <= 0.0 {
            return it;
        }
        let alpha = rr / pap;
        let mut max_update = 0.0f64;
        for i in 0..n {
            let step = alpha * p[i];
            u[i] += step;
            max_update = max_update.max(step.abs());
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r, w, par);
        // A single small CG step says little on this ill-conditioned system,
        // so the residual must also be small before stopping.
        if max_update < settings.tolerance && rr_new.sqrt() < settings.tolerance * 1e-3 {
            return it + 1;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    settings.max_iterations
}

/// Least-squares plane `c0 + c1 x + c2 y` through weighted cells.
fn plane_fit(points: &[([f64; 2], f64)]) -> [f64; 3] {
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for (p, v) in points {
        let row = nalgebra::Vector3::new(1.0, p[0], p[1]);
        ata += row * row.transpose();
        atb += row * *v;
    }
    match ata.try_inverse() {
        Some(inv) => {
            let c = inv * atb;
            [c[0], c[1], c[2]]
        }
        None => {
            let mean = points.iter().map(|(_, v)| v).sum::<f64>() / points.len().max(1) as f64;
            [mean, 0.0, 0.0]
        }
    }
}

/// Grid thin-plate interpolation. `cells` lists `(x, y, value)` constraints
/// on lattice cells (at most one per cell).
pub fn grid_thin_plate(
    width: usize,
    height: usize,
    cells: &[(usize, usize, f64)],
    settings: &GridSolverSettings,
) -> Result<Image> {
    if cells.len() < 3 {
        return processing("grid interpolation needs at least 3 constrained cells");
    }
    let u = solve_level(width, height, cells, settings);
    Ok(Image::from_vec(
        width,
        height,
        u.into_iter().map(|v| v as f32).collect(),
    ))
}

fn solve_level(
    width: usize,
    height: usize,
    cells: &[(usize, usize, f64)],
    settings: &GridSolverSettings,
) -> Vec<f64> {
    let mut init = if width >= 32 && height >= 32 {
        let (cw, ch) = (width.div_ceil(2), height.div_ceil(2));
        let mut acc = vec![(0.0f64, 0usize); cw * ch];
        for &(x, y, v) in cells {
            let e = &mut acc[(y / 2) * cw + x / 2];
            e.0 += v;
            e.1 += 1;
        }
        let coarse_cells: Vec<(usize, usize, f64)> = acc
            .iter()
            .enumerate()
            .filter(|(_, e)| e.1 > 0)
            .map(|(i, e)| (i % cw, i / cw, e.0 / e.1 as f64))
            .collect();
        if coarse_cells.len() >= 3 {
            let coarse = solve_level(cw, ch, &coarse_cells, settings);
            let img = Image::from_vec(cw, ch, coarse.iter().map(|&v| v as f32).collect());
            let mut out = vec![0.0; width * height];
            for y in 0..height {
                for x in 0..width {
                    out[y * width + x] =
                        img.sample_clamped((x as f64 - 0.5) / 2.0, (y as f64 - 0.5) / 2.0) as f64;
                }
            }
            Some(out)
        } else {
            None
        }
    } else {
        None
    }
    .unwrap_or_else(|| {
        let pts: Vec<([f64; 2], f64)> = cells
            .iter()
            .map(|&(x, y, v)| ([x as f64, y as f64], v))
            .collect();
        let c = plane_fit(&pts);
        (0..width * height)
            .map(|i| c[0] + c[1] * (i % width) as f64 + c[2] * (i / width) as f64)
            .collect()
    });
    let mut fixed = vec![false; width * height];
    for &(x, y, v) in cells {
        fixed[y * width + x] = true;
        init[y * width + x] = v;
    }
    solve_grid(&mut init, &fixed, width, height, settings);
    init
}

/// Convex hull (counter-clockwise, no collinear points) by monotone chain.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Pixels whose centres lie inside (or on) the convex hull.
pub fn hull_mask(hull: &[[f64; 2]], width: usize, height: usize) -> Mask {
    if hull.len() < 3 {
        return Mask::new(width, height, false);
    }
    Mask::from_fn(width, height, |x, y| {
        let p = [x as f64, y as f64];
        hull.iter()
            .zip(hull.iter().cycle().skip(1))
            .all(|(a, b)| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-9)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tps_reproduces_affine_and_samples() {
        let pts: Vec<[f64; 2]> = (0..40)
            .map(|i| [(i * 37 % 50) as f64 * 1.3, (i * 17 % 40) as f64 * 0.9])
            .collect();
        let plane = |p: &[f64; 2]| 65.0 + 0.02 * p[0] - 0.01 * p[1];
        let vals: Vec<f64> = pts.iter().map(plane).collect();
        let tps = ThinPlateSpline::fit(&pts, &vals).unwrap();
        for x in 0..60 {
            for y in 0..40 {
                let p = [x as f64, y as f64];
                assert!((tps.eval(p[0], p[1]) - plane(&p)).abs() < 1e-6);
            }
        }
        let curved: Vec<f64> = pts
            .iter()
            .map(|p| (p[0] * 0.1).sin() + (p[1] * 0.07).cos())
            .collect();
        let tps = ThinPlateSpline::fit(&pts, &curved).unwrap();
        for (p, v) in pts.iter().zip(&curved) {
            assert!((tps.eval(p[0], p[1]) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_solver_reproduces_plane() {
        let cells: Vec<(usize, usize, f64)> = (0..60)
            .map(|i| {
                let (x, y) = ((i * 13) % 64, (i * 29) % 48);
                (x, y, 64.0 + 0.03 * x as f64 + 0.05 * y as f64)
            })
            .collect();
        let mut dedup = std::collections::BTreeMap::new();
        for c in cells {
            dedup.insert((c.0, c.1), c.2);
        }
        let cells: Vec<_> = dedup.into_iter().map(|((x, y), v)| (x, y, v)).collect();
        let img = grid_thin_plate(64, 48, &cells, &GridSolverSettings::default()).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                let want = 64.0 + 0.03 * x as f64 + 0.05 * y as f64;
                assert!(
                    (img.get(x, y) as f64 - want).abs() < 2e-3,
                    "{x},{y} {} {want}",
                    img.get(x, y)
                );
            }
        }
    }

    #[test]
    fn serial_and_parallel_paths_agree() {
        let cells: Vec<(usize, usize, f64)> = (0..50)
            .map(|i| ((i * 7) % 40, (i * 11) % 30, ((i * 3) % 5) as f64))
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        let cells: Vec<_> = cells
            .into_iter()
            .filter(|c| seen.insert((c.0, c.1)))
            .collect();
        let par = grid_thin_plate(40, 30, &cells, &GridSolverSettings::default()).unwrap();
        let ser = grid_thin_plate(
            40,
            30,
            &cells,
            &GridSolverSettings {
                parallel: false,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in par.data().iter().zip(ser.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn hull_and_mask() {
        let pts = [
            [0.0, 0.0],
            [4.0, 0.0],
            [4.0, 4.0],
            [0.0, 4.0],
            [2.0, 2.0],
            [2.0, 0.0],
        ];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        let m = hull_mask(&hull, 6, 6);
        assert!(m.get(0, 0) && m.get(4, 4) && m.get(2, 3));
        assert!(!m.get(5, 2) && !m.get(2, 5));
        assert_eq!(m.count(), 25);
    }
}
