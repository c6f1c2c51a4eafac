use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bellthresh::detectors::{ResponseFunction, SCurve};
use bellthresh::optimize::Functional;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "bellthresh", version, about = "Bell violations with threshold detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// CH violation and critical weight versus θ for M = N pairs.
    Fig2(FigArgs),
    /// CH violation and critical weight versus θ for fixed M and each N.
    Fig3(FigArgs),
    /// CH violation and critical weight versus μ for a Poisson source.
    Fig4(FigArgs),
    /// Post-selected CHSH versus θ, fixed M = N and Poisson sources.
    Fig5(FigArgs),
    /// Numerical i.i.d. local bound against the closed form.
    LocalBound(LocalBoundArgs),
    /// Critical white-noise weight by bisection.
    Noise(ScenarioArgs),
    /// CH along the small-angle settings family.
    SmallPhi(SmallPhiArgs),
    /// Post-selected CHSH for smooth thresholds with M > N.
    SmoothCheck(SmoothArgs),
    /// Self-test against the enumeration oracle and closed forms.
    Validate(ValidateArgs),
    /// Generic one-parameter sweep.
    Sweep(SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fig2(_) => "fig2",
            Self::Fig3(_) => "fig3",
            Self::Fig4(_) => "fig4",
            Self::Fig5(_) => "fig5",
            Self::LocalBound(_) => "local-bound",
            Self::Noise(_) => "noise",
            Self::SmallPhi(_) => "small-phi",
            Self::SmoothCheck(_) => "smooth-check",
            Self::Validate(_) => "validate",
            Self::Sweep(_) => "sweep",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Self::Fig2(a) | Self::Fig3(a) | Self::Fig4(a) | Self::Fig5(a) => &a.common,
            Self::LocalBound(a) => &a.common,
            Self::Noise(a) => &a.common,
            Self::SmallPhi(a) => &a.common,
            Self::SmoothCheck(a) => &a.common,
            Self::Validate(a) => &a.common,
            Self::Sweep(a) => &a.scenario.common,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Master seed for every random stream.
    #[arg(long, default_value_t = 0x5eed)]
    pub seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// CSV output path; a `.manifest.json` is written next to it.
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random starts per settings optimization.
    #[arg(long, default_value_t = 32)]
    pub starts: usize,
    /// Absolute tolerance of the critical-weight bisection.
    #[arg(long, default_value_t = 1e-4)]
    pub noise_tol: f64,
    /// Optimize settings over the whole Bloch sphere, not just the x–z plane.
    #[arg(long)]
    pub sphere: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FigArgs {
    /// Thresholds: `INT`, `a..b` or a comma list.
    #[arg(long)]
    pub n: Option<IntList>,
    /// Pairs per round for fig3.
    #[arg(long)]
    pub m: Option<u32>,
    /// Mean pair number (fig4 grid, fig5 Poisson curve).
    #[arg(long)]
    pub mu: Option<FloatList>,
    /// State angles in degrees.
    #[arg(long)]
    pub theta: Option<FloatList>,
    /// Evenly spaced θ points on [0°, 45°] when `--theta` is absent.
    #[arg(long)]
    pub theta_steps: Option<usize>,
    /// Detector response (`step:N`, `smooth:N:ETA`, `scurve:PATH`); fig5 only.
    #[arg(long)]
    pub response: Option<ResponseSpec>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LocalBoundArgs {
    #[arg(long, default_value = "1..4")]
    pub n: IntList,
    /// Random simplex starts for the mixture search.
    #[arg(long, default_value_t = 64)]
    pub local_starts: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum FunctionalArg {
    Ch,
    ChshPs,
}

impl From<FunctionalArg> for Functional {
    fn from(f: FunctionalArg) -> Self {
        match f {
            FunctionalArg::Ch => Functional::Ch,
            FunctionalArg::ChshPs => Functional::PostselectedChsh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum StateArg {
    /// cos θ |00> + sin θ |11>
    Pure,
    Singlet,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScenarioArgs {
    /// Threshold(s); ignored when `--response` fixes one.
    #[arg(long)]
    pub n: Option<IntList>,
    /// Fixed pairs per round (defaults to the threshold).
    #[arg(long, conflicts_with = "mu")]
    pub m: Option<u32>,
    /// Poisson source with this mean.
    #[arg(long)]
    pub mu: Option<f64>,
    /// State angle in degrees.
    #[arg(long, default_value_t = 45.0)]
    pub theta: f64,
    #[arg(long, value_enum, default_value_t = StateArg::Pure)]
    pub state: StateArg,
    #[arg(long)]
    pub response: Option<ResponseSpec>,
    #[arg(long, value_enum, default_value_t = FunctionalArg::ChshPs)]
    pub functional: FunctionalArg,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SmallPhiArgs {
    #[arg(long, default_value = "1..10")]
    pub n: IntList,
    /// Angles in radians: `a:b:steps` or a comma list.
    #[arg(long, default_value = "0.005,0.01,0.02,0.03,0.04,0.05")]
    pub phi: FloatList,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SmoothArgs {
    #[arg(long, default_value_t = 2)]
    pub n: u32,
    #[arg(long, default_value_t = 3)]
    pub m: u32,
    #[arg(long, default_value = "0.1,0.3,0.5,0.8")]
    pub eta: FloatList,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    /// Largest pair number compared against the enumeration oracle (at most 8).
    #[arg(long, default_value_t = 6)]
    pub max_m: u32,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ParamArg {
    Theta,
    N,
    Mu,
    M,
    Eta,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: ParamArg,
    /// Grid values (θ in degrees): `a..b`, `a:b:steps` or a comma list.
    #[arg(long)]
    pub grid: FloatList,
    /// Maximize over θ at every grid point.
    #[arg(long)]
    pub optimize_theta: bool,
    /// Also bisect for the critical weight at every grid point.
    #[arg(long)]
    pub noise: bool,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
}

/// Integers from `INT`, `a..b` (inclusive) or `a,b,c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntList(pub Vec<u32>);

impl std::str::FromStr for IntList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let values = if let Some((a, b)) = s.split_once("..") {
            let a: u32 = parse_num(a)?;
            let b: u32 = parse_num(b)?;
            if b < a {
                return Err(format!("empty range {s}"));
            }
            (a..=b).collect()
        } else {
            s.split(',').map(parse_num).collect::<Result<Vec<u32>, _>>()?
        };
        Ok(Self(values))
    }
}

/// Reals from `x`, `a..b` (inclusive integers), `a:b:steps` (evenly spaced,
/// endpoints included) or `x,y,z`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FloatList(pub Vec<f64>);

impl std::str::FromStr for FloatList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let values = if s.contains("..") {
            IntList::from_str(s)?.0.into_iter().map(f64::from).collect()
        } else if let [a, b, steps] = s.split(':').collect::<Vec<_>>()[..] {
            let a: f64 = parse_num(a)?;
            let b: f64 = parse_num(b)?;
            let steps: usize = parse_num(steps)?;
            match steps {
                0 => return Err(format!("grid {s} has no points")),
                1 => vec![a],
                _ => (0..steps)
                    .map(|k| a + (b - a) * k as f64 / (steps - 1) as f64)
                    .collect(),
            }
        } else {
            s.split(',').map(parse_num).collect::<Result<Vec<f64>, _>>()?
        };
        if values.iter().any(|v: &f64| !v.is_finite()) {
            return Err(format!("non-finite value in {s}"));
        }
        Ok(Self(values))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("cannot parse {:?} as a number", s.trim()))
}

/// `step:N`, `smooth:N:ETA` or `scurve:PATH`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseSpec {
    pub text: String,
    #[serde(skip)]
    pub response: ResponseFunction,
}

impl std::str::FromStr for ResponseSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let response = match s.split_once(':') {
            Some(("step", n)) => ResponseFunction::perfect_step(parse_num(n)?).map_err(|e| e.to_string())?,
            Some(("smooth", rest)) => {
                let (n, eta) = rest
                    .split_once(':')
                    .ok_or_else(|| format!("expected smooth:N:ETA, got {s}"))?;
                ResponseFunction::smooth_step(parse_num(n)?, parse_num(eta)?).map_err(|e| e.to_string())?
            }
            Some(("scurve", path)) => ResponseFunction::SCurve(load_scurve(Path::new(path))?),
            _ => return Err(format!("unknown response {s:?}; use step:N, smooth:N:ETA or scurve:PATH")),
        };
        Ok(Self {
            text: s.to_string(),
            response,
        })
    }
}

/// Reads a CSV with header `x,theta`: ascending integer photon counts and
/// non-decreasing probabilities.
pub fn load_scurve(path: &Path) -> Result<SCurve, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = reader.headers().map_err(|e| format!("{}: {e}", path.display()))?;
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["x", "theta"] {
        return Err(format!("{}: header must be x,theta", path.display()));
    }
    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("{}: {e}", path.display()))?;
        let x: u32 = parse_num(&record[0]).map_err(|e| format!("{} row {}: {e}", path.display(), line + 2))?;
        let v: f64 = parse_num(&record[1]).map_err(|e| format!("{} row {}: {e}", path.display(), line + 2))?;
        points.push((x, v));
    }
    SCurve::from_points(&points).map_err(|e| format!("{}: {e}", path.display()))
}

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut map = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{} line {}: expected key = value", path.display(), k + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("{} line {}: invalid key {key:?}", path.display(), k + 1));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(format!("{} line {}: duplicate key {key}", path.display(), k + 1));
        }
    }
    Ok(map)
}

/// Appends config-file entries to `argv` as long flags unless the flag was
/// given explicitly, so that flags win over the file and the file over
/// built-in defaults. Unknown keys surface as argument errors.
pub fn merge_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let position = argv.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(position) = position else {
        return Ok(argv);
    };
    let path = match argv[position].split_once('=') {
        Some((_, p)) => p.to_string(),
        None => argv
            .get(position + 1)
            .cloned()
            .ok_or("--config needs a path")?,
    };
    let config = read_config(Path::new(&path))?;
    let given = |key: &str| {
        let flag = format!("--{key}");
        argv.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
    };
    let mut merged = argv.clone();
    for (key, value) in config {
        if given(&key) {
            continue;
        }
        match value.as_str() {
            "true" => merged.push(format!("--{key}")),
            "false" => {}
            _ => merged.push(format!("--{key}={value}")),
        }
    }
    Ok(merged)
}
