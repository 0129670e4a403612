//! Single-channel floating point raster used by every stage.
//!
//! Pixel `(x, y)` is stored row-major. Sampling functions take *index
//! coordinates*, in which the centre of pixel `(x, y)` sits at `(x, y)`.
//! Sensor geometry uses edge coordinates (pixel `i` spans `[i, i + 1)`);
//! convert with [`edge_to_index`].

/// Convert an edge coordinate (pixel `i` spans `[i, i+1)`) to an index coordinate.
#[inline]
pub fn edge_to_index(x: f64) -> f64 {
    x - 0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            width * height,
            "buffer size does not match dimensions"
        );
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Pixel value with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    /// Bilinear sample at index coordinates. `None` outside the pixel-centre hull.
    pub fn sample(&self, x: f64, y: f64) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if x > max_x || y > max_y {
            return None;
        }
        Some(self.sample_unchecked(x, y))
    }

    /// Bilinear sample at index coordinates with border clamping.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.sample_unchecked(x, y)
    }

    #[inline]
    fn sample_unchecked(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        // Zero-weight taps are skipped so exact lattice positions return the stored value.
        let mut v = self.get(x0, y0) * (1.0 - fx) * (1.0 - fy);
        if fx > 0.0 {
            v += self.get(x1, y0) * fx * (1.0 - fy);
        }
        if fy > 0.0 {
            v += self.get(x0, y1) * (1.0 - fx) * fy;
            if fx > 0.0 {
                v += self.get(x1, y1) * fx * fy;
            }
        }
        v
    }

    /// Copy of the rectangle `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(
            x0 + w <= self.width && y0 + h <= self.height,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Image::from_vec(w, h, data)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image::from_vec(
            self.width,
            self.height,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Bilinear resampling to new dimensions, aligning pixel centres.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(width, height, |x, y| {
            self.sample_clamped((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
        })
    }

    /// Downsample by averaging `factor x factor` blocks; trailing partial blocks are dropped.
    pub fn box_downsample(&self, factor: usize) -> Image {
        assert!(factor >= 1);
        let w = self.width / factor;
        let h = self.height / factor;
        let norm = 1.0 / (factor * factor) as f32;
        Image::from_fn(w, h, |x, y| {
            let mut acc = 0.0f32;
            for dy in 0..factor {
                let row = self.row(y * factor + dy);
                acc += row[x * factor..(x + 1) * factor].iter().sum::<f32>();
            }
            acc * norm
        })
    }

    /// Downsample by a real factor: each output pixel is the area-weighted
    /// mean of the input pixels its footprint `[i f, (i + 1) f)` overlaps.
    pub fn area_downsample(&self, factor: f64) -> Image {
        assert!(factor >= 1.0 && factor.is_finite());
        let w = ((self.width as f64 / factor).floor() as usize).max(1);
        let h = ((self.height as f64 / factor).floor() as usize).max(1);
        let taps = |n: usize, len: usize| -> Vec<Vec<(usize, f32)>> {
            (0..n)
                .map(|i| {
                    let (lo, hi) = (i as f64 * factor, ((i + 1) as f64 * factor).min(len as f64));
                    let mut t = Vec::new();
                    let mut k = lo.floor() as usize;
                    while (k as f64) < hi && k < len {
                        let cover = (hi.min((k + 1) as f64) - lo.max(k as f64)).max(0.0);
                        if cover > 0.0 {
                            t.push((k, (cover / (hi - lo)) as f32));
                        }
                        k += 1;
                    }
                    t
                })
                .collect()
        };
        let tx = taps(w, self.width);
        let ty = taps(h, self.height);
        Image::from_fn(w, h, |x, y| {
            let mut acc = 0.0f32;
            for &(j, wy) in &ty[y] {
                let row = self.row(j);
                acc += wy * tx[x].iter().map(|&(i, wx)| wx * row[i]).sum::<f32>();
            }
            acc
        })
    }

    /// Separable Gaussian blur with clamped borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let norm: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.width, self.height);
        let r = radius as usize;
        // Rows: pad each row with clamped borders, then convolve.
        let mut tmp = vec![0.0f32; w * h];
        let mut padded = vec![0.0f32; w.max(h) + 2 * r];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for (i, p) in padded[..w + 2 * r].iter_mut().enumerate() {
                *p = row[(i as isize - radius).clamp(0, w as isize - 1) as usize];
            }
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .zip(&padded[x..x + 2 * r + 1])
                    .map(|(k, v)| k * v)
                    .sum();
            }
        }
        let mut out = vec![0.0f32; w * h];
        for x in 0..w {
            for (i, p) in padded[..h + 2 * r].iter_mut().enumerate() {
                *p = tmp[(i as isize - radius).clamp(0, h as isize - 1) as usize * w + x];
            }
            for y in 0..h {
                out[y * w + x] = kernel
                    .iter()
                    .zip(&padded[y..y + 2 * r + 1])
                    .map(|(k, v)| k * v)
                    .sum();
            }
        }
        Image {
            width: w,
            height: h,
            data: out,
        }
    }
}

/// Boolean validity mask with the same layout as [`Image`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// Normalized cross-correlation of two equally sized sample sets (mean removed).
/// Returns 0 when either input has no variance.
pub fn ncc(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 1e-20 || sbb <= 1e-20 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Peak signal-to-noise ratio in dB for images with the given peak value.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_matches_box_and_preserves_mass() {
        let img = Image::from_fn(12, 9, |x, y| ((x * 7 + y * 3) % 5) as f32);
        let (a, b) = (img.area_downsample(3.0), img.box_downsample(3));
        assert_eq!(a.dims(), b.dims());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-5));
        let ramp = Image::from_fn(10, 4, |x, _| x as f32);
        let d = ramp.area_downsample(2.5);
        assert_eq!(d.dims(), (4, 1));
        // Partly covered pixels contribute their value times the covered length.
        for (i, want) in [0.8, 3.2, 5.8, 8.2].into_iter().enumerate() {
            assert!((d.get(i, 0) - want).abs() < 1e-5, "{i}: {}", d.get(i, 0));
        }
        let flat = Image::from_fn(17, 13, |_, _| 0.3);
        assert!(flat.area_downsample(2.1).data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn bilinear_hits_lattice_exactly() {
        let img = Image::from_fn(4, 3, |x, y| (x * 10 + y) as f32 + 0.125);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(img.sample(x as f64, y as f64), Some(img.get(x, y)));
            }
        }
        assert_eq!(img.sample(0.5, 0.0), Some(5.125));
        assert!(img.sample(3.01, 0.0).is_none());
        assert!(img.sample(-0.01, 0.0).is_none());
    }

    #[test]
    fn box_downsample_averages_blocks() {
        let img = Image::from_fn(4, 2, |x, _| x as f32);
        let d = img.box_downsample(2);
        assert_eq!(d.dims(), (2, 1));
        assert_eq!(d.data(), &[0.5, 2.5]);
    }

    #[test]
    fn ncc_of_affine_copy_is_one() {
        let a: Vec<f32> = (0..49).map(|i| ((i * 7) % 13) as f32).collect();
        let b: Vec<f32> = a.iter().map(|v| 3.0 * v + 2.0).collect();
        assert!((ncc(&a, &b) - 1.0).abs() < 1e-9);
        let c: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((ncc(&a, &c) + 1.0).abs() < 1e-9);
        assert_eq!(ncc(&a, &[1.0; 49]), 0.0);
    }
}
