//! Run context: configuration loading, output bookkeeping, manifest and
//! error classification.

use std::fs;
use std::path::{Path, PathBuf};

use lfdepth::config::PipelineConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Command, CommonArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Processing,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, stage: &str, message: impl Into<String>) -> Self {
        Self {
            kind,
            stage: stage.to_string(),
            message: message.into(),
        }
    }

    pub fn lib(stage: &str, e: lfdepth::Error) -> Self {
        use lfdepth::Error as E;
        let kind = match e {
            E::Config(_) => ErrorKind::Config,
            E::Io(_) | E::Image(_) | E::Format(_) => ErrorKind::Io,
            E::Domain(_) | E::Processing(_) => ErrorKind::Processing,
        };
        Self::new(kind, stage, e.to_string())
    }

    pub fn io(stage: &str, path: &Path, e: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, stage, format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Io => 3,
            ErrorKind::Processing => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Extension for attaching a stage name to library results.
pub trait Stage<T> {
    fn stage(self, name: &str) -> CliResult<T>;
}

impl<T> Stage<T> for lfdepth::Result<T> {
    fn stage(self, name: &str) -> CliResult<T> {
        self.map_err(|e| CliError::lib(name, e))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Input {
    Lightfield,
    Hr,
    Disparity,
    Calibration,
    Depth,
}

impl Input {
    fn key(self) -> &'static str {
        match self {
            Input::Lightfield => "lightfield",
            Input::Hr => "hr",
            Input::Disparity => "disparity",
            Input::Calibration => "calibration",
            Input::Depth => "depth",
        }
    }
}

pub struct RunContext {
    pub cfg: PipelineConfig,
    pub out_dir: PathBuf,
    pub command: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunContext {
    fn configured(&self, which: Input) -> Option<&PathBuf> {
        let p = &self.cfg.paths;
        match which {
            Input::Lightfield => p.lightfield.as_ref(),
            Input::Hr => p.hr.as_ref(),
            Input::Disparity => p.disparity.as_ref(),
            Input::Calibration => p.calibration.as_ref(),
            Input::Depth => p.depth.as_ref(),
        }
    }

    /// Required input path; a configuration error when unset.
    pub fn input(&mut self, which: Input) -> CliResult<PathBuf> {
        match self.optional_input(which)? {
            Some(p) => Ok(p),
            None => Err(CliError::new(
                ErrorKind::Config,
                self.command,
                format!("paths.{0} (or --{0}) is required", which.key()),
            )),
        }
    }

    pub fn optional_input(&mut self, which: Input) -> CliResult<Option<PathBuf>> {
        let Some(p) = self.configured(which).cloned() else {
            return Ok(None);
        };
        if !p.is_file() {
            return Err(CliError::new(
                ErrorKind::Io,
                self.command,
                format!(
                    "paths.{}: {} is not a readable file",
                    which.key(),
                    p.display()
                ),
            ));
        }
        if !self.inputs.contains(&p) {
            self.inputs.push(p.clone());
        }
        Ok(Some(p))
    }

    /// Registers and returns the path of an output file.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out_dir.join(name);
        if !self.outputs.contains(&p) {
            self.outputs.push(p.clone());
        }
        p
    }

    /// Checks that every configured input exists before any work starts.
    fn check_inputs(&self, needed: &[Input]) -> CliResult<()> {
        for &i in needed {
            if let Some(p) = self.configured(i) {
                if !p.is_file() {
                    return Err(CliError::new(
                        ErrorKind::Io,
                        self.command,
                        format!("paths.{}: {} is not a readable file", i.key(), p.display()),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    library_version: &'static str,
    subcommand: &'static str,
    seed: u64,
    workers: usize,
    config: String,
    config_sha256: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest(path: &Path, shown: String) -> CliResult<FileDigest> {
    let bytes = fs::read(path).map_err(|e| CliError::io("manifest", path, e))?;
    Ok(FileDigest {
        path: shown,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Simulate => "simulate",
        Command::Calibrate { .. } => "calibrate",
        Command::Superres => "superres",
        Command::Disparity => "disparity",
        Command::Depth => "depth",
        Command::Reconstruct => "reconstruct",
        Command::Fuse => "fuse",
        Command::Evaluate { .. } => "evaluate",
        Command::Pipeline => "pipeline",
    }
}

fn needed_inputs(cmd: &Command) -> &'static [Input] {
    match cmd {
        Command::Simulate | Command::Evaluate { .. } => &[],
        Command::Calibrate { .. } => &[],
        Command::Superres => &[Input::Lightfield, Input::Hr],
        Command::Disparity | Command::Reconstruct => &[Input::Lightfield],
        Command::Depth => &[Input::Disparity, Input::Calibration],
        Command::Fuse => &[Input::Lightfield, Input::Hr, Input::Depth],
        Command::Pipeline => &[Input::Lightfield, Input::Hr, Input::Calibration],
    }
}

/// Loads the configuration, applies command-line overrides and validates.
pub fn load_config(args: &CommonArgs) -> CliResult<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| match e {
            lfdepth::Error::Io(io) => CliError::io("config", p, io),
            other => CliError::lib("config", other),
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let paths = &mut cfg.paths;
    for (slot, flag) in [
        (&mut paths.lightfield, &args.lightfield),
        (&mut paths.hr, &args.hr),
        (&mut paths.disparity, &args.disparity),
        (&mut paths.calibration, &args.calibration),
        (&mut paths.depth, &args.depth),
        (&mut paths.output_dir, &args.out),
    ] {
        if let Some(f) = flag {
            *slot = Some(f.clone());
        }
    }
    for p in [
        &mut paths.lightfield,
        &mut paths.hr,
        &mut paths.disparity,
        &mut paths.calibration,
        &mut paths.depth,
        &mut paths.output_dir,
    ]
    .into_iter()
    .flatten()
    {
        *p = absolute(p);
    }
    cfg.validate().stage("config")?;
    Ok(cfg)
}

pub fn execute(args: &CommonArgs, cmd: &Command) -> CliResult<PathBuf> {
    let name = command_name(cmd);
    let cfg = load_config(args)?;
    let workers = match args.workers {
        Some(0) => {
            return Err(CliError::new(
                ErrorKind::Config,
                "workers",
                "--workers must be at least 1",
            ))
        }
        Some(n) => n,
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    };
    let out_dir = cfg
        .paths
        .output_dir
        .clone()
        .unwrap_or_else(|| absolute(Path::new("lfdepth-out")));
    fs::create_dir_all(&out_dir).map_err(|e| CliError::io(name, &out_dir, e))?;

    let mut ctx = RunContext {
        cfg,
        out_dir: out_dir.clone(),
        command: name,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    ctx.check_inputs(needed_inputs(cmd))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::new(ErrorKind::Processing, "workers", e.to_string()))?;
    pool.install(|| crate::commands::dispatch(cmd, &mut ctx))?;

    // The recorded configuration omits the output directory so that it can
    // be replayed into a different one.
    let mut recorded = ctx.cfg.clone();
    recorded.paths.output_dir = None;
    let text = recorded.to_toml_string();
    let cfg_path = out_dir.join("config.toml");
    fs::write(&cfg_path, &text).map_err(|e| CliError::io("manifest", &cfg_path, e))?;

    let inputs = ctx
        .inputs
        .iter()
        .map(|p| digest(p, p.display().to_string()))
        .collect::<CliResult<Vec<_>>>()?;
    let outputs = ctx
        .outputs
        .iter()
        .map(|p| {
            let shown = p.strip_prefix(&out_dir).unwrap_or(p).display().to_string();
            digest(p, shown)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = Manifest {
        tool: "lfdepth",
        version: env!("CARGO_PKG_VERSION"),
        library_version: lfdepth::VERSION,
        subcommand: name,
        seed: recorded.seed,
        workers,
        config: "config.toml".to_string(),
        config_sha256: sha256_hex(text.as_bytes()),
        inputs,
        outputs,
    };
    let man_path = out_dir.join("manifest.toml");
    let man_text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&man_path, man_text).map_err(|e| CliError::io("manifest", &man_path, e))?;
    Ok(out_dir)
}
