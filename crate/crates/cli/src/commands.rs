//! Subcommand bodies. Each reads its inputs through the run context and
//! registers every file it writes.

use std::fs;

use lfdepth::analysis::{
    dense_rms_error, dense_tilt, depth_precision_experiment, errorbar_plot, precision_summary_toml,
    tilt_report, write_precision_csv, PrecisionConfig,
};
use lfdepth::config::{CameraSection, SceneKind};
use lfdepth::depth::{DenseDepthMap, DepthCalibration};
use lfdepth::disparity::disparity_field;
use lfdepth::fusion::{
    fuse, reconstruct_view, register, warp_image, FusedRgbd, HrIntrinsics, Registration,
};
use lfdepth::geometry::{virtual_depth_from_disparity, ViewLattice};
use lfdepth::io::{
    read_calibration_csv, read_disparity_csv, read_pfm, read_png, write_calibration_csv,
    write_depth_png16, write_disparity_csv, write_ground_truth_csv, write_pfm, write_ply,
    write_png16, write_png8, write_sparse_depth_csv, DepthPngEncoding,
};
use lfdepth::pipeline::{
    depth_from_field, registration_distance_um, run_pipeline, super_resolve, SrStage,
};
use lfdepth::simulator::{
    point_source_sweep, render_hr, render_lightfield, render_lightfield_frame, RawLightFieldImage,
    RenderSettings, Scene, SweepFrameTruth,
};
use lfdepth::{CameraModel, Image};
use serde::Serialize;

use crate::run::{CliError, CliResult, ErrorKind, Input, RunContext, Stage};
use crate::{Command, Protocol};

pub fn dispatch(cmd: &Command, ctx: &mut RunContext) -> CliResult<()> {
    match cmd {
        Command::Simulate => simulate(ctx),
        Command::Calibrate { planes } => calibrate(ctx, *planes),
        Command::Superres => superres(ctx),
        Command::Disparity => disparity(ctx),
        Command::Depth => depth(ctx),
        Command::Reconstruct => reconstruct(ctx),
        Command::Fuse => fuse_cmd(ctx),
        Command::Evaluate { protocol } => match protocol {
            Protocol::Sweep => evaluate_sweep(ctx),
            Protocol::Scene => evaluate_scene(ctx),
        },
        Command::Pipeline => pipeline(ctx),
    }
}

fn camera(ctx: &RunContext) -> CliResult<CameraModel> {
    ctx.cfg.camera.to_camera().stage("config")
}

fn load_lightfield(ctx: &mut RunContext, camera: &CameraModel) -> CliResult<RawLightFieldImage> {
    let path = ctx.input(Input::Lightfield)?;
    let img = read_png(&path).stage("load lightfield")?;
    RawLightFieldImage::new(img, *camera).stage("load lightfield")
}

fn load_hr(ctx: &mut RunContext, camera: &CameraModel) -> CliResult<Image> {
    let path = ctx.input(Input::Hr)?;
    let img = read_png(&path).stage("load hr")?;
    let expect = (camera.hr_sensor.width_px, camera.hr_sensor.height_px);
    if img.dims() != expect {
        return Err(CliError::new(
            ErrorKind::Config,
            "load hr",
            format!(
                "HR image is {}x{}, camera.hr_width_px x hr_height_px is {}x{}",
                img.width(),
                img.height(),
                expect.0,
                expect.1
            ),
        ));
    }
    Ok(img)
}

fn load_calibration(ctx: &mut RunContext) -> CliResult<Option<DepthCalibration>> {
    match ctx.optional_input(Input::Calibration)? {
        Some(p) => {
            let pairs = read_calibration_csv(&p).stage("calibration")?;
            Ok(Some(DepthCalibration::fit(&pairs).stage("calibration")?))
        }
        None => Ok(None),
    }
}

fn write_text(ctx: &mut RunContext, name: &str, text: &str) -> CliResult<()> {
    let p = ctx.output(name);
    fs::write(&p, text).map_err(|e| CliError::io(ctx.command, &p, e))
}

fn toml_text<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("report serializes")
}

#[derive(Serialize)]
struct CameraFile {
    camera: CameraSection,
}

fn ground_truth_rows(scene: &Scene, half_extent_mm: f64) -> Vec<SweepFrameTruth> {
    if let Scene::PointSources(s) = scene {
        return s
            .iter()
            .map(|p| SweepFrameTruth {
                index: 0,
                position_mm: p.position_mm,
            })
            .collect();
    }
    let step = 0.5;
    let n = (half_extent_mm / step).floor() as i64;
    let mut rows = Vec::new();
    for j in -n..=n {
        for i in -n..=n {
            let (x, y) = (i as f64 * step, j as f64 * step);
            if let Some(z) = scene.depth_at(x, y) {
                rows.push(SweepFrameTruth {
                    index: 0,
                    position_mm: [x, y, z],
                });
            }
        }
    }
    rows
}

fn simulate(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let sim = ctx.cfg.simulate.clone();
    let seed = ctx.cfg.seed;
    let scene = sim.scene(seed).stage("simulate")?;
    let settings = sim.render_settings(seed).stage("simulate")?;
    let lf = render_lightfield(&scene, &camera, &settings).stage("simulate")?;
    let hr = render_hr(&scene, &camera, &settings).stage("simulate")?;
    write_png16(&ctx.output("lightfield.png"), &lf.pixels).stage("simulate")?;
    let hr_path = ctx.output("hr.png");
    if sim.hr_16bit {
        write_png16(&hr_path, &hr).stage("simulate")?;
    } else {
        write_png8(&hr_path, &hr).stage("simulate")?;
    }
    let rows = ground_truth_rows(&scene, sim.half_extent_mm);
    write_ground_truth_csv(&ctx.output("ground_truth.csv"), &rows).stage("simulate")?;
    let cam = toml_text(&CameraFile {
        camera: CameraSection::from_camera(&camera),
    });
    write_text(ctx, "camera.toml", &cam)
}

fn calibrate(ctx: &mut RunContext, planes: Option<usize>) -> CliResult<()> {
    let camera = camera(ctx)?;
    let cal = match planes {
        None => DepthCalibration::from_camera(
            &camera,
            camera.depth_range,
            ctx.cfg.depth.calibration_step_mm,
        )
        .stage("calibrate")?,
        Some(n) => measured_calibration(ctx, &camera, n)?,
    };
    write_calibration_csv(&ctx.output("calibration.csv"), cal.knots()).stage("calibrate")
}

/// Images fronto-parallel planes across the depth range and pairs each
/// plane depth with the virtual distance recovered from its median disparity.
fn measured_calibration(
    ctx: &RunContext,
    camera: &CameraModel,
    n: usize,
) -> CliResult<DepthCalibration> {
    if n < 2 {
        return Err(CliError::new(
            ErrorKind::Config,
            "calibrate",
            "--planes must be at least 2",
        ));
    }
    let range = camera.depth_range;
    let texture = ctx
        .cfg
        .simulate
        .texture
        .to_texture(ctx.cfg.seed)
        .stage("calibrate")?;
    let settings = ctx
        .cfg
        .simulate
        .render_settings(ctx.cfg.seed)
        .stage("calibrate")?;
    let params = ctx.cfg.disparity.params();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let w = range.min_mm + range.span() * i as f64 / (n - 1) as f64;
        let scene = Scene::plane(
            w,
            ctx.cfg.simulate.half_extent_mm.max(20.0),
            texture.clone(),
        );
        let lf = render_lightfield_frame(&scene, camera, &settings, i as u64).stage("calibrate")?;
        let field = disparity_field(&lf, &params).stage("calibrate")?;
        let d = field.median_disparity_um().ok_or_else(|| {
            CliError::new(
                ErrorKind::Processing,
                "calibrate",
                format!("no disparities found on the plane at {w:.3} mm"),
            )
        })?;
        let a = virtual_depth_from_disparity(d, camera).stage("calibrate")?;
        log::info!(
            "plane {w:.3} mm: median disparity {d:.3} um, a = {:.4} mm",
            a * 1e-3
        );
        pairs.push((a * 1e-3, w));
    }
    DepthCalibration::fit(&pairs).stage("calibrate")
}

fn superres(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let lf = load_lightfield(ctx, &camera)?;
    let hr = load_hr(ctx, &camera)?;
    let stage_cfg = SrStage {
        params: ctx.cfg.sr.params().stage("superres")?,
        ratio: ctx.cfg.sr.ratio,
    };
    let w = ctx
        .cfg
        .fusion
        .registration_depth_mm
        .unwrap_or(camera.optics.nominal_working_distance_um * 1e-3);
    let sr = super_resolve(&lf, &hr, &stage_cfg, w).stage("superres")?;
    let lf_path = ctx.output("lightfield_sr.png");
    write_png16(&lf_path, &sr.pixels).stage("superres")?;
    // Configuration for processing the super-resolved frame downstream.
    let mut next = ctx.cfg.clone();
    next.camera = CameraSection::from_camera(&sr.camera);
    next.sr.enabled = false;
    next.paths.lightfield = Some(lf_path);
    next.paths.output_dir = None;
    let text = next.to_toml_string();
    write_text(ctx, "superres_config.toml", &text)
}

fn disparity(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let lf = load_lightfield(ctx, &camera)?;
    let field = disparity_field(&lf, &ctx.cfg.disparity.params()).stage("disparity")?;
    log::info!(
        "{} disparity samples, median {:?} um",
        field.samples.len(),
        field.median_disparity_um()
    );
    write_disparity_csv(&ctx.output("disparity.csv"), &field).stage("disparity")
}

fn write_dense(ctx: &mut RunContext, dense: &DenseDepthMap) -> CliResult<()> {
    write_pfm(
        &ctx.output("depth_view.pfm"),
        &dense.depth,
        Some(&dense.mask),
    )
    .stage("write")
}

fn depth(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let path = ctx.input(Input::Disparity)?;
    let field = read_disparity_csv(&path).stage("depth")?;
    let calibration = load_calibration(ctx)?;
    let settings = ctx.cfg.pipeline_settings(calibration).stage("config")?;
    let a = registration_distance_um(&camera, &settings).stage("depth")?;
    let (sparse, dense) = depth_from_field(&field, &camera, &settings, a).stage("depth")?;
    for w in &dense.warnings {
        log::warn!("{w}");
    }
    write_sparse_depth_csv(&ctx.output("sparse_depth.csv"), &sparse).stage("depth")?;
    write_dense(ctx, &dense)
}

fn reconstruct(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let lf = load_lightfield(ctx, &camera)?;
    let settings = ctx.cfg.pipeline_settings(None).stage("config")?;
    let a = registration_distance_um(&camera, &settings).stage("reconstruct")?;
    let view = reconstruct_view(&lf, a).stage("reconstruct")?;
    write_png16(&ctx.output("view.png"), &view.image).stage("reconstruct")
}

#[derive(Serialize)]
struct RegistrationFile {
    scale: f64,
    rotation_deg: f64,
    tx_px: f64,
    ty_px: f64,
    score: f64,
    hr_focal_px: f64,
    hr_center_px: [f64; 2],
    valid_fraction: f64,
}

fn write_fused(
    ctx: &mut RunContext,
    fused: &FusedRgbd,
    reg: &Registration,
    camera: &CameraModel,
) -> CliResult<()> {
    write_png8(&ctx.output("color.png"), &fused.color).stage("write")?;
    write_pfm(&ctx.output("depth.pfm"), &fused.depth, Some(&fused.mask)).stage("write")?;
    let enc = DepthPngEncoding::for_range(camera.depth_range.min_mm, camera.depth_range.max_mm);
    write_depth_png16(&ctx.output("depth.png"), &fused.depth, &fused.mask, &enc).stage("write")?;
    ctx.output("depth.png.toml");
    if ctx.cfg.fusion.write_ply {
        write_ply(&ctx.output("cloud.ply"), &fused.point_cloud()).stage("write")?;
    }
    let t = &reg.transform;
    let text = toml_text(&RegistrationFile {
        scale: t.scale,
        rotation_deg: t.rotation_deg(),
        tx_px: t.tx,
        ty_px: t.ty,
        score: reg.score,
        hr_focal_px: fused.intrinsics.focal_px,
        hr_center_px: fused.intrinsics.center,
        valid_fraction: fused.mask.fraction(),
    });
    write_text(ctx, "registration.toml", &text)
}

fn fuse_cmd(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let lf = load_lightfield(ctx, &camera)?;
    let hr = load_hr(ctx, &camera)?;
    let depth_path = ctx.input(Input::Depth)?;
    let (depth, mask) = read_pfm(&depth_path).stage("load depth")?;
    let settings = ctx.cfg.pipeline_settings(None).stage("config")?;
    let a = registration_distance_um(&camera, &settings).stage("fuse")?;
    let lattice = ViewLattice::for_camera(&camera, a).stage("fuse")?;
    if depth.dims() != lattice.dims() {
        return Err(CliError::new(
            ErrorKind::Config,
            "fuse",
            format!(
                "depth map is {}x{}, the view lattice at the registration depth is {}x{}",
                depth.width(),
                depth.height(),
                lattice.width,
                lattice.height
            ),
        ));
    }
    let view = reconstruct_view(&lf, a).stage("reconstruct")?;
    let reg = register(&view, &hr, &settings.registration).stage("registration")?;
    let warped = warp_image(&depth, &mask, &reg.transform, hr.dims()).stage("warp")?;
    let fused = fuse(&hr, &warped, HrIntrinsics::from_camera(&camera)).stage("fusion")?;
    write_fused(ctx, &fused, &reg, &camera)
}

fn evaluate_sweep(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let sweep_cfg = ctx.cfg.sweep.clone();
    let settings = RenderSettings {
        noise_sigma: sweep_cfg.noise_sigma,
        photon_scale: 1.0,
        rng_seed: ctx.cfg.seed,
    };
    let sweep = point_source_sweep(&camera, &sweep_cfg.protocol(), &settings).stage("evaluate")?;
    let config = PrecisionConfig {
        disparity: ctx.cfg.disparity.params(),
        calibration_step_mm: ctx.cfg.depth.calibration_step_mm,
    };
    let report = depth_precision_experiment(&sweep, &config).stage("evaluate")?;
    log::info!(
        "rmse of means {:.4} mm, mean std {:.4} mm, bound {:.4} mm",
        report.rmse_of_means,
        report.mean_std,
        report.quantization_bound_mm
    );
    write_ground_truth_csv(&ctx.output("sweep_ground_truth.csv"), &sweep.frames)
        .stage("evaluate")?;
    write_precision_csv(&ctx.output("precision.csv"), &report).stage("evaluate")?;
    let summary = precision_summary_toml(&report).stage("evaluate")?;
    write_text(ctx, "precision_summary.toml", &summary)?;
    write_png8(
        &ctx.output("precision_errorbar.png"),
        &errorbar_plot(&report, 800, 600),
    )
    .stage("evaluate")
}

#[derive(Serialize)]
struct SceneEvaluation {
    scene: String,
    dense_rms_error_mm: f64,
    dense_valid_fraction: f64,
    sparse_samples: usize,
    registration_scale: f64,
    registration_rotation_deg: f64,
    registration_score: f64,
    fused_valid_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    tilt_truth_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dense_tilt_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fused_tilt_deg: Option<f64>,
}

fn evaluate_scene(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let sim = ctx.cfg.simulate.clone();
    if sim.scene == SceneKind::Point {
        return Err(CliError::new(
            ErrorKind::Config,
            "evaluate",
            "the scene protocol needs a surface scene, not simulate.scene = \"point\"",
        ));
    }
    let scene = sim.scene(ctx.cfg.seed).stage("simulate")?;
    let rs = sim.render_settings(ctx.cfg.seed).stage("simulate")?;
    let lf = render_lightfield(&scene, &camera, &rs).stage("simulate")?;
    let hr = render_hr(&scene, &camera, &rs).stage("simulate")?;
    let calibration = load_calibration(ctx)?;
    let settings = ctx.cfg.pipeline_settings(calibration).stage("config")?;
    let out = run_pipeline(&lf, &hr, &settings).stage("pipeline")?;
    let rms = dense_rms_error(&out.dense, &camera, &scene).stage("evaluate")?;
    let tilted = matches!(sim.scene, SceneKind::Plane | SceneKind::TiltedPlane);
    let truth = match sim.scene {
        SceneKind::TiltedPlane => sim.tilt_deg.abs(),
        _ => 0.0,
    };
    let (dense_t, fused_t) = if tilted {
        let d = dense_tilt(&out.dense, &camera, truth).stage("evaluate")?;
        let f = tilt_report(&out.fused, truth)
            .ok()
            .map(|r| r.fitted_tilt_deg);
        (Some(d.fitted_tilt_deg), f)
    } else {
        (None, None)
    };
    let t = &out.registration.transform;
    let report = SceneEvaluation {
        scene: sim.scene.name().to_string(),
        dense_rms_error_mm: rms,
        dense_valid_fraction: out.dense.mask.fraction(),
        sparse_samples: out.sparse.len(),
        registration_scale: t.scale,
        registration_rotation_deg: t.rotation_deg(),
        registration_score: out.registration.score,
        fused_valid_fraction: out.fused.mask.fraction(),
        tilt_truth_deg: tilted.then_some(truth),
        dense_tilt_deg: dense_t,
        fused_tilt_deg: fused_t,
    };
    write_dense(ctx, &out.dense)?;
    write_text(ctx, "evaluation.toml", &toml_text(&report))
}

fn pipeline(ctx: &mut RunContext) -> CliResult<()> {
    let camera = camera(ctx)?;
    let lf = load_lightfield(ctx, &camera)?;
    let hr = load_hr(ctx, &camera)?;
    let calibration = load_calibration(ctx)?;
    let settings = ctx.cfg.pipeline_settings(calibration).stage("config")?;
    let out = run_pipeline(&lf, &hr, &settings).stage("pipeline")?;
    for w in &out.dense.warnings {
        log::warn!("{w}");
    }
    write_disparity_csv(&ctx.output("disparity.csv"), &out.field).stage("write")?;
    write_sparse_depth_csv(&ctx.output("sparse_depth.csv"), &out.sparse).stage("write")?;
    write_dense(ctx, &out.dense)?;
    write_png16(&ctx.output("view.png"), &out.view.image).stage("write")?;
    write_fused(ctx, &out.fused, &out.registration, &out.lightfield.camera)
}
