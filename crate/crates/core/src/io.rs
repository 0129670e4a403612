//! File formats: PNG (8/16-bit gray), PFM, CSV tables and ASCII PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::depth::{DepthSample, SparseDepth};
use crate::disparity::{DisparityField, DisparitySample, SampleAxis};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::simulator::SweepFrameTruth;

fn format_err<T>(path: &Path, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Format(format!("{}: {msg}", path.display())))
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes intensities in [0, 1] as 16-bit grayscale PNG.
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_vec(
        img.width() as u32,
        img.height() as u32,
        img.data()
            .iter()
            .map(|&v| quantize(v, 65535.0) as u16)
            .collect(),
    )
    .expect("buffer size matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Writes intensities in [0, 1] as 8-bit grayscale PNG.
pub fn write_png8(path: &Path, img: &Image) -> Result<()> {
    let buf = GrayImage::from_vec(
        img.width() as u32,
        img.height() as u32,
        img.data()
            .iter()
            .map(|&v| quantize(v, 255.0) as u8)
            .collect(),
    )
    .expect("buffer size matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Reads a PNG as grayscale intensities in [0, 1]. Colour images are reduced to luma.
pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let data: Vec<f32> = match dynimg {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
    };
    Ok(Image::from_vec(w, h, data))
}

/// Writes a grayscale little-endian PFM. Pixels outside `mask` are stored as NaN.
pub fn write_pfm(path: &Path, img: &Image, mask: Option<&Mask>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{} {}\n-1.0\n", img.width(), img.height())?;
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            let valid = mask.is_none_or(|m| m.get(x, y));
            let v = if valid { img.get(x, y) } else { f32::NAN };
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a grayscale PFM; the mask marks finite pixels.
pub fn read_pfm(path: &Path) -> Result<(Image, Mask)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut tokens = Vec::new();
    // Header: three whitespace-separated tokens after the magic, single byte before data.
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return format_err(path, "truncated PFM header");
        }
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    if tokens[0] != "Pf" {
        return format_err(
            path,
            format!("unsupported PFM type {:?} (only grayscale 'Pf')", tokens[0]),
        );
    }
    let parse_dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
    let (Some(w), Some(h)) = (parse_dim(&tokens[1]), parse_dim(&tokens[2])) else {
        return format_err(path, "bad PFM dimensions");
    };
    let Ok(scale) = tokens[3].parse::<f64>() else {
        return format_err(path, "bad PFM scale");
    };
    let little = scale < 0.0;
    let mut bytes = vec![0u8; w * h * 4];
    if r.read_exact(&mut bytes).is_err() {
        return format_err(path, "truncated PFM data");
    }
    let mut img = Image::new(w, h);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        img.set(i % w, h - 1 - i / w, v);
    }
    let mask = Mask::from_fn(w, h, |x, y| img.get(x, y).is_finite());
    Ok((img, mask))
}

/// Linear depth encoding for 16-bit PNG: `w_mm = offset_mm + (count - 1) * mm_per_count`,
/// with count 0 reserved for invalid pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthPngEncoding {
    pub offset_mm: f64,
    pub mm_per_count: f64,
}

impl DepthPngEncoding {
    /// Encoding spanning `[min_mm, max_mm]` with the full 16-bit range.
    pub fn for_range(min_mm: f64, max_mm: f64) -> Self {
        Self {
            offset_mm: min_mm,
            mm_per_count: ((max_mm - min_mm) / 65534.0).max(f64::MIN_POSITIVE),
        }
    }

    pub fn encode(&self, w_mm: f64) -> u16 {
        (((w_mm - self.offset_mm) / self.mm_per_count)
            .round()
            .clamp(0.0, 65534.0)
            + 1.0) as u16
    }

    pub fn decode(&self, count: u16) -> Option<f64> {
        (count > 0).then(|| self.offset_mm + (count - 1) as f64 * self.mm_per_count)
    }
}

/// Writes depth as 16-bit PNG plus a TOML sidecar (`<path>.toml`) describing the encoding.
pub fn write_depth_png16(
    path: &Path,
    depth: &Image,
    mask: &Mask,
    enc: &DepthPngEncoding,
) -> Result<()> {
    let data = depth
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| {
            if m && v.is_finite() {
                enc.encode(v as f64)
            } else {
                0
            }
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_vec(depth.width() as u32, depth.height() as u32, data).expect("dims");
    buf.save(path)?;
    let sidecar = toml::to_string(enc).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

pub fn read_depth_png16(path: &Path) -> Result<(Image, Mask)> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let enc: DepthPngEncoding = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let buf = image::open(path)?.into_luma16();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let raw = buf.into_raw();
    let img = Image::from_fn(w, h, |x, y| {
        enc.decode(raw[y * w + x]).map_or(f32::NAN, |v| v as f32)
    });
    let mask = Mask::from_fn(w, h, |x, y| raw[y * w + x] > 0);
    Ok((img, mask))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

#[derive(Serialize, Deserialize)]
struct DisparityRow {
    x_px: f64,
    y_px: f64,
    #[serde(rename = "D_um")]
    d_um: f64,
    confidence: f64,
    axis: String,
    lens_cx_px: f64,
    lens_cy_px: f64,
}

/// Columns: `x_px, y_px, D_um, confidence, axis, lens_cx_px, lens_cy_px`.
pub fn write_disparity_csv(path: &Path, field: &DisparityField) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for s in &field.samples {
        w.serialize(DisparityRow {
            x_px: s.position[0],
            y_px: s.position[1],
            d_um: s.disparity_um,
            confidence: s.confidence,
            axis: s.axis.label().to_owned(),
            lens_cx_px: s.lens_center[0],
            lens_cy_px: s.lens_center[1],
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_disparity_csv(path: &Path) -> Result<DisparityField> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut samples = Vec::new();
    for row in r.deserialize() {
        let row: DisparityRow = row.map_err(csv_err)?;
        let Some(axis) = SampleAxis::parse(&row.axis) else {
            return format_err(path, format!("unknown axis label {:?}", row.axis));
        };
        samples.push(DisparitySample {
            position: [row.x_px, row.y_px],
            lens_center: [row.lens_cx_px, row.lens_cy_px],
            disparity_um: row.d_um,
            confidence: row.confidence,
            axis,
        });
    }
    let diagnostics = crate::disparity::DisparityDiagnostics {
        samples: samples.len(),
        ..Default::default()
    };
    Ok(DisparityField {
        samples,
        diagnostics,
    })
}

#[derive(Serialize, Deserialize)]
struct DepthRow {
    x_px: f64,
    y_px: f64,
    a_um: f64,
    w_mm: f64,
    confidence: f64,
}

/// Columns: `x_px, y_px` (virtual-plane position), `a_um, w_mm, confidence`.
pub fn write_sparse_depth_csv(path: &Path, sparse: &SparseDepth) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for s in &sparse.samples {
        w.serialize(DepthRow {
            x_px: s.position[0],
            y_px: s.position[1],
            a_um: s.a_um,
            w_mm: s.w_mm,
            confidence: s.confidence,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sparse_depth_csv(path: &Path) -> Result<SparseDepth> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut samples = Vec::new();
    for row in r.deserialize() {
        let row: DepthRow = row.map_err(csv_err)?;
        samples.push(DepthSample {
            position: [row.x_px, row.y_px],
            a_um: row.a_um,
            w_mm: row.w_mm,
            confidence: row.confidence,
        });
    }
    Ok(SparseDepth {
        diagnostics: crate::depth::DepthDiagnostics {
            input: samples.len(),
            ..Default::default()
        },
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct CalibrationRow {
    a_mm: f64,
    w_mm: f64,
}

/// Calibration pairs, columns `a_mm, w_mm`.
pub fn write_calibration_csv(path: &Path, pairs: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for &(a_mm, w_mm) in pairs {
        w.serialize(CalibrationRow { a_mm, w_mm })
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_calibration_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .map(|row| {
            row.map(|c: CalibrationRow| (c.a_mm, c.w_mm))
                .map_err(csv_err)
        })
        .collect()
}

#[derive(Serialize)]
struct TruthRow {
    frame: usize,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

/// Ground truth, columns `frame, x_mm, y_mm, z_mm`.
pub fn write_ground_truth_csv(path: &Path, frames: &[SweepFrameTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for f in frames {
        w.serialize(TruthRow {
            frame: f.index,
            x_mm: f.position_mm[0],
            y_mm: f.position_mm[1],
            z_mm: f.position_mm[2],
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// ASCII PLY point cloud with `x y z` in mm and an 8-bit gray intensity.
pub fn write_ply(path: &Path, points: &[([f64; 3], f32)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}",
        points.len()
    )?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    writeln!(out, "property uchar intensity\nend_header")?;
    for (p, v) in points {
        writeln!(
            out,
            "{:.5} {:.5} {:.5} {}",
            p[0],
            p[1],
            p[2],
            quantize(*v, 255.0) as u8
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| ((x + 3 * y) as f32) / ((w + 3 * h) as f32))
    }

    #[test]
    fn png16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = gradient(17, 9);
        write_png16(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.dims(), (17, 9));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        write_png8(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pfm_round_trip_is_exact_and_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let img = Image::from_fn(5, 3, |x, y| 60.0 + x as f32 * 0.1 + y as f32);
        let mut mask = Mask::new(5, 3, true);
        mask.set(2, 1, false);
        write_pfm(&p, &img, Some(&mask)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n5 3\n-1.0\n"));
        // First stored row is the bottom image row.
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, img.get(0, 2));
        let (back, m) = read_pfm(&p).unwrap();
        assert_eq!(m, mask);
        for y in 0..3 {
            for x in 0..5 {
                if mask.get(x, y) {
                    assert_eq!(back.get(x, y), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn pfm_rejects_colour_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pfm");
        std::fs::write(&p, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_pfm(&p).is_err());
        std::fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&p).is_err());
    }

    #[test]
    fn depth_png_encoding() {
        let enc = DepthPngEncoding::for_range(62.5, 67.5);
        assert_eq!(enc.encode(62.5), 1);
        assert_eq!(enc.encode(67.5), 65535);
        assert_eq!(enc.decode(0), None);
        for w in [62.5, 63.123, 65.0, 67.5] {
            assert!((enc.decode(enc.encode(w)).unwrap() - w).abs() <= enc.mm_per_count);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let img = Image::from_fn(4, 4, |x, _| 63.0 + x as f32);
        let mut mask = Mask::new(4, 4, true);
        mask.set(0, 0, false);
        write_depth_png16(&p, &img, &mask, &enc).unwrap();
        let (back, m) = read_depth_png16(&p).unwrap();
        assert_eq!(m, mask);
        assert!((back.get(3, 3) - 66.0).abs() < 1e-3);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let field = DisparityField {
            samples: vec![DisparitySample {
                position: [10.5, 20.25],
                lens_center: [16.0, 16.0],
                disparity_um: 38.5,
                confidence: 0.9,
                axis: SampleAxis::Both,
            }],
            diagnostics: Default::default(),
        };
        let p = dir.path().join("d.csv");
        write_disparity_csv(&p, &field).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x_px,y_px,D_um,confidence,axis"));
        assert_eq!(read_disparity_csv(&p).unwrap().samples, field.samples);

        let pairs = vec![(3.1, 66.0), (4.2, 65.0)];
        write_calibration_csv(&p, &pairs).unwrap();
        assert_eq!(read_calibration_csv(&p).unwrap(), pairs);
    }

    #[test]
    fn ply_header_counts_vertices() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        write_ply(&p, &[([0.0, 1.0, 65.0], 0.5), ([1.0, 1.0, 65.5], 1.0)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("element vertex 2"));
        assert_eq!(text.lines().count(), 10);
    }
}
