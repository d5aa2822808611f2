//! Flag and config-file merging. Every flag can also be set in a TOML file
//! passed with `--config`; a flag given on the command line wins.

use std::path::{Path, PathBuf};

use afmm::analysis::{Method, Region, Shape};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_BAND_WIDTH: f64 = 9.0;
pub const DEFAULT_OUT: &str = "afmm-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Fmm,
    Afmm,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fmm => Method::Fmm,
            MethodArg::Afmm => Method::Afmm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionArg {
    Whole,
    Band,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Keys accepted in the config file. Names match the long flags with dashes
/// replaced by underscores. Relative paths are taken from the working
/// directory, not the config file's location.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub shape: Option<String>,
    pub input: Option<PathBuf>,
    pub n: Option<OneOrMany<usize>>,
    pub method: Option<MethodArg>,
    pub region: Option<OneOrMany<RegionArg>>,
    pub band_width: Option<f64>,
    pub alpha: Option<f64>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub raw: Option<bool>,
    pub x: Option<Vec<f64>>,
    pub h: Option<Vec<f64>>,
    pub r0: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// TOML file with default values for any flag
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = one per core)
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Named test interface (circle, ellipse, dual-circles, cassini2d, star, sphere, ellipsoid, cassini3d)
    #[arg(long)]
    pub shape: Option<String>,
    /// Initial field as legacy VTK structured points with a `phi` array
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Nodes per axis; a comma-separated list for convergence
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Error regions; comma-separated
    #[arg(long, value_enum, value_delimiter = ',')]
    pub region: Vec<RegionArg>,
    /// Band half-width in grid spacings
    #[arg(long)]
    pub band_width: Option<f64>,
    /// Seeding sub-grid spacing as a fraction of h
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Closest-point projection tolerance, relative to h
    #[arg(long)]
    pub tol: Option<f64>,
    /// Also write the raw little-endian binary dump
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug, Default)]
pub struct StencilArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Diagonal positions; comma-separated
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<f64>,
    /// Grid spacings; comma-separated
    #[arg(long, value_delimiter = ',')]
    pub h: Vec<f64>,
    /// Circle radius
    #[arg(long)]
    pub r0: Option<f64>,
}

/// Resolved settings shared by every verb, echoed into run summaries.
#[derive(Clone, Debug, Serialize)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub workers: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSettings {
    #[serde(flatten)]
    pub common: Common,
    #[serde(serialize_with = "shape_name")]
    pub shape: Option<Shape>,
    pub input: Option<PathBuf>,
    pub n: Vec<usize>,
    pub method: MethodArg,
    pub region: Vec<RegionArg>,
    pub band_width: f64,
    pub alpha: f64,
    pub tol: f64,
    pub raw: bool,
}

fn shape_name<S: serde::Serializer>(shape: &Option<Shape>, s: S) -> Result<S::Ok, S::Error> {
    shape.map(|v| v.name()).serialize(s)
}

impl RunSettings {
    pub fn regions(&self) -> Vec<Region> {
        self.region
            .iter()
            .map(|r| match r {
                RegionArg::Whole => Region::Whole,
                RegionArg::Band => Region::Band(self.band_width),
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StencilSettings {
    #[serde(flatten)]
    pub common: Common,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub r0: f64,
}

fn load(config: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    config
        .as_deref()
        .map(FileConfig::load)
        .transpose()
        .map(Option::unwrap_or_default)
}

fn common(args: CommonArgs, file: &mut FileConfig) -> Common {
    Common {
        out: args
            .out
            .or(file.out.take())
            .unwrap_or_else(|| DEFAULT_OUT.into()),
        workers: args.workers.or(file.workers).unwrap_or(0),
        config: args.config,
    }
}

fn nonempty<T>(flag: Vec<T>, file: Option<OneOrMany<T>>) -> Option<Vec<T>> {
    if flag.is_empty() {
        file.map(OneOrMany::into_vec)
    } else {
        Some(flag)
    }
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Usage(format!(
            "--{name} must be positive, got {v}"
        )))
    }
}

pub fn resolve_run(args: RunArgs) -> Result<RunSettings, CliError> {
    let mut file = load(&args.common.config)?;
    let shape = args.shape.or(file.shape.take());
    let shape = shape
        .map(|s| {
            Shape::from_name(&s).ok_or_else(|| CliError::Usage(format!("unknown shape {s:?}")))
        })
        .transpose()?;
    let input = args.input.or(file.input.take());
    if shape.is_some() && input.is_some() {
        return Err(CliError::Usage(
            "give either --shape or --input, not both".into(),
        ));
    }
    Ok(RunSettings {
        common: common(args.common, &mut file),
        shape,
        input,
        n: nonempty(args.n, file.n).unwrap_or_default(),
        method: args.method.or(file.method).unwrap_or(MethodArg::Afmm),
        region: nonempty(args.region, file.region)
            .unwrap_or_else(|| vec![RegionArg::Whole, RegionArg::Band]),
        band_width: positive(
            "band-width",
            args.band_width
                .or(file.band_width)
                .unwrap_or(DEFAULT_BAND_WIDTH),
        )?,
        alpha: positive(
            "alpha",
            args.alpha
                .or(file.alpha)
                .unwrap_or(afmm::seed::DEFAULT_ALPHA),
        )?,
        tol: positive(
            "tol",
            args.tol.or(file.tol).unwrap_or(afmm::project::DEFAULT_TOL),
        )?,
        raw: args.raw || file.raw.unwrap_or(false),
    })
}

/// Default stencil-study positions: 100 points on (0, 0.5].
pub fn default_x() -> Vec<f64> {
    (1..=100).map(|k| k as f64 / 200.0).collect()
}

pub fn resolve_stencil(args: StencilArgs) -> Result<StencilSettings, CliError> {
    let mut file = load(&args.common.config)?;
    let x = if args.x.is_empty() {
        file.x.take().unwrap_or_else(default_x)
    } else {
        args.x
    };
    let h = if args.h.is_empty() {
        file.h.take().unwrap_or_else(|| vec![0.1, 0.05, 0.025])
    } else {
        args.h
    };
    let r0 = positive("r0", args.r0.or(file.r0).unwrap_or(1.0))?;
    for &v in x.iter() {
        positive("x", v)?;
    }
    for &v in h.iter() {
        positive("h", v)?;
    }
    let x_max = x.iter().copied().fold(0.0, f64::max);
    if x.is_empty() || h.is_empty() {
        return Err(CliError::Usage(
            "--x and --h need at least one value".into(),
        ));
    }
    if r0 <= 2f64.sqrt() * x_max {
        return Err(CliError::Usage(format!(
            "--r0 {r0} must exceed sqrt(2) * max x = {}",
            2f64.sqrt() * x_max
        )));
    }
    Ok(StencilSettings {
        common: common(args.common, &mut file),
        x,
        h,
        r0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_override_file() {
        let f = config("shape = \"ellipse\"\nn = [10, 20, 40]\nalpha = 0.2\nmethod = \"fmm\"\nregion = \"band\"\n");
        let args = RunArgs {
            common: CommonArgs {
                config: Some(f.path().into()),
                ..Default::default()
            },
            n: vec![30],
            alpha: Some(0.05),
            ..Default::default()
        };
        let s = resolve_run(args).unwrap();
        assert_eq!(s.shape, Some(Shape::Ellipse));
        assert_eq!(s.n, vec![30]);
        assert_eq!(s.alpha, 0.05);
        assert_eq!(s.method, MethodArg::Fmm);
        assert_eq!(s.region, vec![RegionArg::Band]);
        assert_eq!(s.band_width, DEFAULT_BAND_WIDTH);
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let f = config("shapee = \"circle\"\n");
        let args = RunArgs {
            common: CommonArgs {
                config: Some(f.path().into()),
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(resolve_run(args), Err(CliError::Usage(_))));
    }

    #[test]
    fn shape_and_input_conflict() {
        let args = RunArgs {
            shape: Some("circle".into()),
            input: Some("a.vtk".into()),
            ..Default::default()
        };
        assert!(matches!(resolve_run(args), Err(CliError::Usage(_))));
    }

    #[test]
    fn stencil_radius_check() {
        let args = StencilArgs {
            x: vec![0.5],
            r0: Some(0.7),
            ..Default::default()
        };
        assert!(matches!(resolve_stencil(args), Err(CliError::Usage(_))));
        let args = StencilArgs {
            x: vec![0.4],
            r0: Some(0.7),
            ..Default::default()
        };
        assert_eq!(resolve_stencil(args).unwrap().h, vec![0.1, 0.05, 0.025]);
    }
}
