//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p lfdepth --test acceptance`; pass substrings to
//! select criteria, `--list` to print their names.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lfdepth::analysis::{
    dense_rms_error, depth_precision_experiment, rayleigh_threshold, tilt_report, PrecisionConfig,
    PrecisionReport,
};
use lfdepth::disparity::{disparity_field, DisparityParams};
use lfdepth::geometry::{
    diffraction_limit, usaf_frequency, virtual_depth_from_disparity, CameraModel,
};
use lfdepth::image::Image;
use lfdepth::pipeline::{run_pipeline, PipelineSettings};
use lfdepth::simulator::{
    hr_projection, point_source_sweep, render_hr, render_lightfield, virtual_to_object_lateral,
    Heightfield, RenderSettings, Scene, SweepProtocol, Texture, TiltedPlane,
};
use lfdepth::superres::{
    build_dictionary, model_resolution_ratio, nearest_entries, superresolve_elemental,
    superresolve_patch, PatchDictionary, SrParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "closed_form_virtual_depth",
            budget: Duration::from_secs(1),
            run: closed_form_virtual_depth,
        },
        Criterion {
            name: "disparity_geometry_consistency",
            budget: Duration::from_secs(60),
            run: disparity_geometry_consistency,
        },
        Criterion {
            name: "sweep_precision",
            budget: Duration::from_secs(300),
            run: sweep_precision,
        },
        Criterion {
            name: "end_to_end_surfaces",
            budget: Duration::from_secs(300),
            run: end_to_end_surfaces,
        },
        Criterion {
            name: "superres_properties",
            budget: Duration::from_secs(120),
            run: superres_properties,
        },
        Criterion {
            name: "scalar_constants",
            budget: Duration::from_secs(1),
            run: scalar_constants,
        },
        Criterion {
            name: "determinism",
            budget: Duration::from_secs(300),
            run: determinism,
        },
    ];
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-') || a == "--list")
        .collect();
    if args.iter().any(|a| a == "--list") {
        for c in &criteria {
            println!("{}: test", c.name);
        }
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
    {
        let t = Instant::now();
        let outcome = (c.run)();
        let dt = t.elapsed();
        let outcome = match outcome {
            Ok(d) if dt > c.budget => Err(format!("{d}; over the {:.0?} budget", c.budget)),
            o => o,
        };
        match outcome {
            Ok(d) => println!("PASS {} ({:.2?}): {d}", c.name, dt),
            Err(d) => {
                failed += 1;
                println!("FAIL {} ({:.2?}): {d}", c.name, dt);
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn noise(seed: u64, feature_mm: f64) -> Texture {
    Texture::Noise {
        seed,
        feature_mm,
        contrast: 1.0,
    }
}

fn small_camera() -> CameraModel {
    let mut cam = CameraModel::default();
    cam.sensor.width_px = 480;
    cam.sensor.height_px = 360;
    cam.hr_sensor.width_px = 960;
    cam.hr_sensor.height_px = 540;
    cam.hr_sensor.pixel_pitch_um = 7.5;
    cam
}

/// `a = B d / D` must satisfy `a D = B d` and `(a - B) / a = t / d` with `t = d - D`.
fn closed_form_virtual_depth() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cam = CameraModel::default();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let d = rng.random_range(50.0..500.0);
        let b = rng.random_range(200.0..5000.0);
        let disp = rng.random_range(0.01..0.99) * d;
        cam.mla.pitch_um = d;
        cam.mla.spacing_um = b;
        let a = virtual_depth_from_disparity(disp, &cam).map_err(|e| e.to_string())?;
        let t = d - disp;
        let e1 = (a * disp - b * d).abs() / (b * d);
        let lhs = (a - b) / a;
        let rhs = t / d;
        let e2 = (lhs - rhs).abs() / rhs.abs().max(lhs.abs());
        worst = worst.max(e1).max(e2);
    }
    check(
        worst < 1e-12,
        format!("10000 triples, worst relative error {worst:.2e}"),
    )
}

/// Thin-lens virtual distance (um) of an object at `w_mm`, independent of the library.
fn thin_lens_a(cam: &CameraModel, w_mm: f64) -> f64 {
    let f = cam.optics.effective_focal_length_um;
    let w = w_mm * 1e3;
    1.0 / (1.0 / f - 1.0 / w) - cam.optics.lens_to_mla_um
}

fn disparity_geometry_consistency() -> Outcome {
    let cam = CameraModel::default();
    let params = DisparityParams::default();
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for (i, w) in [62.5, 63.75, 65.0, 66.25, 67.5].into_iter().enumerate() {
        let scene = Scene::plane(w, 10.0, noise(20 + i as u64, 0.1));
        let lf = render_lightfield(&scene, &cam, &RenderSettings::default())
            .map_err(|e| e.to_string())?;
        let field = disparity_field(&lf, &params).map_err(|e| e.to_string())?;
        let measured =
            field.median_disparity_um().ok_or("no disparities")? / cam.sensor.pixel_pitch_um;
        let expected = cam.mla.pitch_um * cam.mla.spacing_um
            / thin_lens_a(&cam, w)
            / cam.sensor.pixel_pitch_um;
        worst = worst.max((measured - expected).abs());
        rows.push(format!("{w}mm {measured:.3}/{expected:.3}px"));
    }
    check(
        worst <= 0.5,
        format!("worst |median - dB/a| {worst:.3} px [{}]", rows.join(", ")),
    )
}

fn precision(noise_sigma: f64) -> Result<PrecisionReport, String> {
    let settings = RenderSettings {
        noise_sigma,
        ..RenderSettings::default()
    };
    let sweep = point_source_sweep(
        &CameraModel::default(),
        &SweepProtocol::default(),
        &settings,
    )
    .map_err(|e| e.to_string())?;
    depth_precision_experiment(&sweep, &PrecisionConfig::default()).map_err(|e| e.to_string())
}

fn sweep_precision() -> Outcome {
    let clean = precision(0.0)?;
    let bound = clean.quantization_bound_mm;
    let worst_std = clean.per_z.iter().map(|r| r.std_w_mm).fold(0.0, f64::max);
    let rows_ok = clean.per_z.len() == 9 && clean.per_z.iter().all(|r| r.n_samples == 12);
    let noisy = precision(0.01)?;
    let worst_mean = noisy
        .per_z
        .iter()
        .map(|r| (r.mean_w_mm - r.z_true_mm).abs())
        .fold(0.0, f64::max);
    let detail = format!(
        "bound {bound:.4} mm; noiseless rmse {:.4}, max std {worst_std:.4}; noisy mean_std {:.4} (clean {:.4}), max |mean - z| {worst_mean:.4}, {} frames excluded",
        clean.rmse_of_means,
        noisy.mean_std,
        clean.mean_std,
        noisy.excluded_frames.len()
    );
    check(
        rows_ok
            && clean.rmse_of_means <= bound
            && worst_std <= 0.1 * bound
            && noisy.mean_std > clean.mean_std
            && noisy.per_z.len() == 9
            && worst_mean <= 2.0 * bound,
        detail,
    )
}

fn end_to_end_surfaces() -> Outcome {
    let cam = CameraModel::default();
    let rs = RenderSettings::default();
    let settings = PipelineSettings::default();

    let tilted = Scene::TiltedPlane(TiltedPlane {
        center_depth_mm: 65.0,
        tilt_deg: 20.0,
        azimuth_deg: 0.0,
        half_extent_mm: 6.5,
        texture: noise(7, 0.1),
    });
    let lf = render_lightfield(&tilted, &cam, &rs).map_err(|e| e.to_string())?;
    let hr = render_hr(&tilted, &cam, &rs).map_err(|e| e.to_string())?;
    let out = run_pipeline(&lf, &hr, &settings).map_err(|e| e.to_string())?;
    let tilt = tilt_report(&out.fused, 20.0).map_err(|e| e.to_string())?;

    let bump = Scene::Heightfield(Heightfield::from_fn(
        [-8.0, -6.0, 8.0, 6.0],
        (161, 121),
        noise(9, 0.1),
        |x, y| 64.0 + 2.0 * (-(x * x + y * y) / 8.0).exp(),
    ));
    let lf = render_lightfield(&bump, &cam, &rs).map_err(|e| e.to_string())?;
    let hr = render_hr(&bump, &cam, &rs).map_err(|e| e.to_string())?;
    let out = run_pipeline(&lf, &hr, &settings).map_err(|e| e.to_string())?;
    let rms = dense_rms_error(&out.dense, &cam, &bump).map_err(|e| e.to_string())?;

    check(
        tilt.error_deg < 1.0 && rms < 0.3,
        format!(
            "tilt {:.2} deg (error {:.2}); bump RMS {rms:.3} mm over {:.0}% of the lattice",
            tilt.fitted_tilt_deg,
            tilt.error_deg,
            100.0 * out.dense.mask.fraction()
        ),
    )
}

fn random_patch(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>()).collect()
}

/// Mean over entries `idx` of the high patches, per pixel.
fn mean_high(dict: &PatchDictionary, idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; dict.high_size() * dict.high_size()];
    for &i in idx {
        for (o, h) in m.iter_mut().zip(dict.high_patch(i)) {
            *o += *h as f64 / idx.len() as f64;
        }
    }
    m
}

/// Convex bounds, equal-distance mean and large-sigma mean of the weighted
/// patch estimate over randomized dictionaries.
fn weighted_estimate_properties() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let err = |e: lfdepth::Error| e.to_string();
    for trial in 0..1000 {
        let ratio = [1.0, 2.0, 3.0][trial % 3];
        let hs = (5.0 * ratio) as usize;
        let n = rng.random_range(12..60);
        let pairs: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
            .map(|_| (random_patch(&mut rng, 25), random_patch(&mut rng, hs * hs)))
            .collect();
        let dict = PatchDictionary::from_pairs(ratio, 5, &pairs).map_err(err)?;
        let k = rng.random_range(1..=n);
        let query = random_patch(&mut rng, 25);
        let params = SrParams {
            k_neighbors: k,
            sigma: Some(rng.random_range(0.05..3.0)),
            ..SrParams::default()
        };
        let out = superresolve_patch(&query, &dict, &params).map_err(err)?;
        let nn: Vec<usize> = nearest_entries(&query, &dict, k)
            .into_iter()
            .map(|(i, _)| i)
            .collect();
        for (p, v) in out.iter().enumerate() {
            let vals = nn.iter().map(|&i| dict.high_patch(i)[p]);
            let lo = vals.clone().fold(f32::INFINITY, f32::min);
            let hi = vals.fold(f32::NEG_INFINITY, f32::max);
            if *v < lo - 1e-6 || *v > hi + 1e-6 {
                return Err(format!(
                    "trial {trial}: pixel {p} = {v} outside [{lo}, {hi}]"
                ));
            }
        }

        let wide = SrParams {
            sigma: Some(1e6),
            ..params
        };
        let out = superresolve_patch(&query, &dict, &wide).map_err(err)?;
        let mean = mean_high(&dict, &nn);
        if let Some((p, d)) = out
            .iter()
            .zip(&mean)
            .map(|(a, b)| (*a as f64 - b).abs())
            .enumerate()
            .find(|x| x.1 > 1e-6)
        {
            return Err(format!(
                "trial {trial}: sigma 1e6 deviates from the mean by {d:.2e} at {p}"
            ));
        }

        // k entries at the same distance from the query, the rest far away.
        let k_eq = rng.random_range(1..=12usize);
        let delta = rng.random_range(0.05f32..0.3);
        let mut eq_pairs = Vec::new();
        for e in 0..k_eq {
            let mut l = query.clone();
            l[e * 2] += if e % 2 == 0 { delta } else { -delta };
            eq_pairs.push((l, random_patch(&mut rng, hs * hs)));
        }
        for _ in 0..8 {
            let l: Vec<f32> = query.iter().map(|v| v + 5.0).collect();
            eq_pairs.push((l, random_patch(&mut rng, hs * hs)));
        }
        let dict = PatchDictionary::from_pairs(ratio, 5, &eq_pairs).map_err(err)?;
        let eq_params = SrParams {
            k_neighbors: k_eq,
            sigma: Some(rng.random_range(0.05..3.0)),
            ..SrParams::default()
        };
        let out = superresolve_patch(&query, &dict, &eq_params).map_err(err)?;
        let idx: Vec<usize> = (0..k_eq).collect();
        let mean = mean_high(&dict, &idx);
        if let Some(d) = out
            .iter()
            .zip(&mean)
            .map(|(a, b)| (*a as f64 - b).abs())
            .find(|d| *d > 1e-5)
        {
            return Err(format!(
                "trial {trial}: equal-distance estimate deviates from the mean by {d:.2e}"
            ));
        }
    }
    Ok("1000 trials".to_string())
}

/// PSNR of super-resolved and bilinearly upsampled central elemental images
/// against the HR frame sampled at each output pixel's projected position.
fn sr_versus_bilinear(w: f64, texture: Texture) -> Result<(f64, f64), String> {
    let err = |e: lfdepth::Error| e.to_string();
    let cam = small_camera();
    let scene = Scene::plane(w, 8.0, texture);
    let rs = RenderSettings::default();
    let lf = render_lightfield(&scene, &cam, &rs).map_err(err)?;
    let hr = render_hr(&scene, &cam, &rs).map_err(err)?;
    let r = model_resolution_ratio(&cam, w).map_err(err)?;
    let params = SrParams::default();
    let dict = build_dictionary(&hr, r, &params).map_err(err)?;
    let grid = lfdepth::geometry::elemental_grid(&cam).map_err(err)?;
    let a = thin_lens_a(&cam, w);
    let k = a / cam.mla.spacing_um;
    let (mut se_sr, mut se_bl, mut n) = (0.0, 0.0, 0usize);
    for rect in grid
        .rects()
        .filter(|q| (4..8).contains(&q.row) && (5..10).contains(&q.col))
    {
        let el = lf.pixels.crop(rect.x0, rect.y0, rect.size, rect.size);
        let sr = superresolve_elemental(&el, &dict, &params).map_err(err)?;
        let (ow, oh) = sr.dims();
        let bl = el.resize_bilinear(ow, oh);
        let s = rect.size as f64 / ow as f64;
        let m = r.ceil() as usize;
        for j in m..oh - m {
            for i in m..ow - m {
                let u = [
                    rect.x0 as f64 + (i as f64 + 0.5) * s,
                    rect.y0 as f64 + (j as f64 + 0.5) * s,
                ];
                let x = [
                    rect.center[0] + (u[0] - rect.center[0]) * k,
                    rect.center[1] + (u[1] - rect.center[1]) * k,
                ];
                let o = virtual_to_object_lateral(&cam, x, w);
                let p = hr_projection(&cam, [o[0], o[1], w]);
                let truth = hr.sample_clamped(p[0] - 0.5, p[1] - 0.5) as f64;
                se_sr += (sr.get(i, j) as f64 - truth).powi(2);
                se_bl += (bl.get(i, j) as f64 - truth).powi(2);
                n += 1;
            }
        }
    }
    let db = |se: f64| 10.0 * (n as f64 / se).log10();
    Ok((db(se_sr), db(se_bl)))
}

fn superres_properties() -> Outcome {
    let props = weighted_estimate_properties()?;
    let mut rows = Vec::new();
    let mut ok = true;
    for (w, period, low, high) in [
        (65.0, 0.4, 0.2, 0.8),
        (63.2, 0.35, 0.1, 0.9),
        (66.8, 0.6, 0.3, 0.7),
        (64.2, 0.3, 0.2, 0.8),
        (65.8, 0.5, 0.1, 0.9),
    ] {
        let (sr, bl) = sr_versus_bilinear(
            w,
            Texture::Checker {
                period_mm: period,
                low,
                high,
            },
        )?;
        ok &= sr >= bl;
        rows.push(format!("{w}mm {sr:.2}/{bl:.2} dB"));
    }
    check(
        ok,
        format!("{props}; SR/bilinear PSNR [{}]", rows.join(", ")),
    )
}

fn scalar_constants() -> Outcome {
    let usaf = usaf_frequency(4, 4).map_err(|e| e.to_string())?;
    let diff = diffraction_limit(0.02, 0.6).map_err(|e| e.to_string())?;
    let ray = rayleigh_threshold();
    let target = 8.0 / std::f64::consts::PI.powi(2);
    check(
        (usaf - 22.6).abs() <= 0.1 && (diff - 27.3).abs() <= 0.1 && (ray - target).abs() < 1e-12,
        format!("USAF 4-4 {usaf:.3} lp/mm; diffraction limit {diff:.3} lp/mm; Rayleigh {ray:.15}"),
    )
}

/// Bit patterns of everything the pipeline produces for the small-camera tilted plane.
fn pipeline_fingerprint() -> Result<Vec<u32>, String> {
    let err = |e: lfdepth::Error| e.to_string();
    let cam = small_camera();
    let scene = Scene::TiltedPlane(TiltedPlane {
        center_depth_mm: 65.0,
        tilt_deg: 20.0,
        azimuth_deg: 0.0,
        half_extent_mm: 6.5,
        texture: noise(5, 0.1),
    });
    let rs = RenderSettings {
        noise_sigma: 0.005,
        ..RenderSettings::default()
    };
    let lf = render_lightfield(&scene, &cam, &rs).map_err(err)?;
    let hr = render_hr(&scene, &cam, &rs).map_err(err)?;
    let out = run_pipeline(&lf, &hr, &PipelineSettings::default()).map_err(err)?;
    let img_bits = |img: &Image| img.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    let mut bits = img_bits(&lf.pixels);
    bits.extend(img_bits(&out.dense.depth));
    bits.extend(img_bits(&out.fused.depth));
    bits.extend(
        out.field
            .samples
            .iter()
            .map(|s| (s.disparity_um as f32).to_bits()),
    );
    bits.extend(out.fused.mask.data().iter().map(|&m| m as u32));
    Ok(bits)
}

fn determinism() -> Outcome {
    let mut prints = Vec::new();
    for threads in [1, 4, 1, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        prints.push(pool.install(pipeline_fingerprint)?);
    }
    let same = prints.iter().all(|p| *p == prints[0]);
    check(
        same,
        format!(
            "4 runs (1, 4, 1, 4 workers), {} values each, identical: {same}",
            prints[0].len()
        ),
    )
}
