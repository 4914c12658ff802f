//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::fixture::{self, FixtureKind};
use crate::ops::{self, EstimateMode, PlyKind};
use crate::project::{write_atomic, Project};

#[derive(Debug, Parser)]
#[command(name = "spheresfm", version, about = "Structure from motion for equirectangular panoramas")]
pub struct Cli {
    /// Project directory.
    #[arg(short = 'C', long, global = true, default_value = ".")]
    pub project: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a project directory with a default config.
    Init { dir: PathBuf },
    /// Copy a panorama into the project.
    AddImage {
        file: PathBuf,
        /// Image id; the file stem by default.
        #[arg(long)]
        id: Option<String>,
    },
    /// Serve the project for the annotation UI and print its address.
    Annotate {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Import a matches file for the pair `a:b`.
    ImportMatches {
        pair: String,
        file: PathBuf,
        /// Store the matches as manual annotations.
        #[arg(long)]
        manual: bool,
    },
    /// Fit the fundamental matrix, epipoles and rotation of a pair.
    EstimatePair {
        a: String,
        b: String,
        #[command(flatten)]
        mode: EstimateFlags,
    },
    /// Admit imported matches that agree with the pair's solution.
    Augment {
        a: String,
        b: String,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Recover yaw angles and positions of every image.
    Register,
    /// Build tracks and triangulate points.
    Triangulate,
    /// Rectify a solved pair.
    Rectify { a: String, b: String },
    /// Block matching on a rectified pair.
    Disparity { a: String, b: String },
    /// Dense point cloud from a pair's disparity.
    Dense { a: String, b: String },
    /// Write the sparse or dense cloud as PLY.
    ExportPly {
        #[arg(long, conflicts_with = "dense")]
        sparse: bool,
        #[arg(long)]
        dense: bool,
        /// Output file; `sparse.ply` or `dense.ply` in the project by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Write a synthetic fixture with ground truth.
    GenFixture {
        kind: FixtureArg,
        dir: PathBuf,
        /// Panorama width in pixels.
        #[arg(long, default_value_t = 1024)]
        width: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct EstimateFlags {
    /// Fit on manual matches only.
    #[arg(long)]
    pub manual_only: bool,
    /// RANSAC over every match of the pair.
    #[arg(long)]
    pub ransac: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FixtureArg {
    TwoView,
    SixView,
    Dense,
}

fn split_pair(pair: &str) -> Result<(&str, &str)> {
    pair.split_once(':')
        .filter(|(a, b)| !a.is_empty() && !b.is_empty())
        .ok_or_else(|| CliError::malformed(format!("pair {pair:?} must look like a:b")))
}

fn open(dir: &Path) -> Result<(Project, Config)> {
    let project = Project::load(dir)?;
    let config = Config::load(dir)?;
    Ok((project, config))
}

/// Runs one command and returns its JSON report.
pub fn run(cli: Cli) -> Result<Value> {
    let dir = cli.project;
    match cli.command {
        Command::Init { dir } => {
            Project::init(&dir, &Config::default())?;
            Ok(json!({ "project": dir }))
        }
        Command::AddImage { file, id } => {
            let (mut p, _) = open(&dir)?;
            let entry = ops::add_image(&mut p, &file, id.as_deref())?;
            Ok(serde_json::to_value(entry).expect("entry serializes"))
        }
        Command::ImportMatches { pair, file, manual } => {
            let (a, b) = split_pair(&pair)?;
            let (mut p, _) = open(&dir)?;
            let text = std::fs::read_to_string(&file).map_err(|e| CliError::io(file.display(), e))?;
            let n = ops::import_pair_matches(&mut p, a, b, &text, manual)?;
            Ok(json!({ "a": a, "b": b, "imported": n, "manual": manual }))
        }
        Command::EstimatePair { a, b, mode } => {
            let (mut p, config) = open(&dir)?;
            let mode = if mode.ransac {
                EstimateMode::Ransac
            } else if mode.manual_only {
                EstimateMode::ManualOnly
            } else {
                EstimateMode::Linear
            };
            ops::estimate_pair(&mut p, &config, &a, &b, mode)
        }
        Command::Augment { a, b, epsilon } => {
            let (mut p, config) = open(&dir)?;
            ops::augment(&mut p, &config, &a, &b, epsilon)
        }
        Command::Register => ops::register(&mut open(&dir)?.0),
        Command::Triangulate => ops::triangulate(&mut open(&dir)?.0),
        Command::Rectify { a, b } => {
            let (mut p, config) = open(&dir)?;
            ops::rectify(&mut p, &config, &a, &b)
        }
        Command::Disparity { a, b } => {
            let (mut p, config) = open(&dir)?;
            ops::disparity(&mut p, &config, &a, &b)
        }
        Command::Dense { a, b } => ops::dense(&mut open(&dir)?.0, &a, &b),
        Command::ExportPly { dense, out, .. } => {
            let (p, _) = open(&dir)?;
            let kind = if dense { PlyKind::Dense } else { PlyKind::Sparse };
            let text = ops::export_ply(&p, kind)?;
            let out = out.unwrap_or_else(|| dir.join(if dense { "dense.ply" } else { "sparse.ply" }));
            write_atomic(&out, text.as_bytes())?;
            let vertices = text.lines().count() - 13;
            Ok(json!({ "out": out, "vertices": vertices }))
        }
        Command::Annotate { port } | Command::Serve { port } => {
            let config = Config::load(&dir)?;
            let port = port.unwrap_or(config.port);
            crate::serve::serve(dir, config, port)?;
            Ok(Value::Null)
        }
        Command::GenFixture { kind, dir, width, seed } => {
            let kind = match kind {
                FixtureArg::TwoView => FixtureKind::TwoView,
                FixtureArg::SixView => FixtureKind::SixView,
                FixtureArg::Dense => FixtureKind::Dense,
            };
            let truth = fixture::generate(&dir, kind, width, seed)?;
            Ok(json!({
                "dir": dir, "kind": truth.kind, "cameras": truth.cameras.len(),
                "points": truth.points.len(), "matches": truth.matches,
            }))
        }
    }
}
