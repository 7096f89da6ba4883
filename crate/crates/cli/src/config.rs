//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique and
//! unknown keys are rejected. Relative paths resolve against the directory of
//! the configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use regcf::simlab::BuiltinEstimator;
use regcf::FilterKind;

use crate::error::CliError;

pub const KEYS: [&str; 22] = [
    "command",
    "data",
    "outcome",
    "regressors",
    "endogenous",
    "instruments",
    "functional_columns",
    "functional_prefix",
    "grid_file",
    "exogenous_as_instruments",
    "standardize",
    "scheme",
    "alpha",
    "estimator",
    "estimators",
    "scenario",
    "reps",
    "n",
    "seed",
    "points",
    "max_iterations",
    "output",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Simulate,
    SelectAlpha,
    Asf,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Simulate => "simulate",
            Command::SelectAlpha => "select-alpha",
            Command::Asf => "asf",
        }
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "fit" => Ok(Command::Fit),
            "simulate" => Ok(Command::Simulate),
            "select-alpha" => Ok(Command::SelectAlpha),
            "asf" => Ok(Command::Asf),
            other => Err(CliError::Config(format!("unknown command '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSpec {
    Auto,
    Fixed(f64),
}

/// Estimators available to `fit` and the data mode of `asf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitEstimator {
    Rcmle,
    Rnlse,
    Probit,
    TwoScmle,
    Ttsls,
}

impl FitEstimator {
    pub fn label(self) -> &'static str {
        match self {
            FitEstimator::Rcmle => "RCMLE",
            FitEstimator::Rnlse => "RNLSE",
            FitEstimator::Probit => "Probit",
            FitEstimator::TwoScmle => "2SCMLE",
            FitEstimator::Ttsls => "TTSLS",
        }
    }

    /// Uses a regularized first stage and therefore α.
    pub fn is_regularized(self) -> bool {
        matches!(self, FitEstimator::Rcmle | FitEstimator::Rnlse | FitEstimator::Ttsls)
    }
}

impl FromStr for FitEstimator {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.to_ascii_lowercase().as_str() {
            "rcmle" => Ok(FitEstimator::Rcmle),
            "rnlse" => Ok(FitEstimator::Rnlse),
            "probit" => Ok(FitEstimator::Probit),
            "2scmle" => Ok(FitEstimator::TwoScmle),
            "ttsls" => Ok(FitEstimator::Ttsls),
            _ => Err(CliError::Config(format!("unknown estimator '{s}' (rcmle, rnlse, probit, 2scmle, ttsls)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub data: Option<PathBuf>,
    pub outcome: Option<String>,
    pub regressors: Vec<String>,
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub functional_columns: Vec<String>,
    pub functional_prefix: Option<String>,
    pub grid_file: Option<PathBuf>,
    pub exogenous_as_instruments: bool,
    pub standardize: bool,
    pub scheme: FilterKind,
    pub alpha: AlphaSpec,
    pub estimator: FitEstimator,
    pub estimators: Vec<BuiltinEstimator>,
    pub scenario: Option<String>,
    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub points: usize,
    pub max_iterations: Option<usize>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            data: None,
            outcome: None,
            regressors: Vec::new(),
            endogenous: Vec::new(),
            instruments: Vec::new(),
            functional_columns: Vec::new(),
            functional_prefix: None,
            grid_file: None,
            exogenous_as_instruments: true,
            standardize: false,
            scheme: FilterKind::Tikhonov,
            alpha: AlphaSpec::Auto,
            estimator: FitEstimator::Rcmle,
            estimators: BuiltinEstimator::table_suite(),
            scenario: None,
            reps: None,
            n: None,
            seed: None,
            points: 21,
            max_iterations: None,
            output: None,
        }
    }
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse_number<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

/// Split the text into an ordered key/value map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base.join(p) }
        };
        for (key, value) in parse_pairs(text)? {
            let v = value.as_str();
            match key.as_str() {
                "command" => cfg.command = Some(v.parse()?),
                "data" => cfg.data = Some(path(v)),
                "outcome" => cfg.outcome = Some(v.to_string()),
                "regressors" => cfg.regressors = list(v),
                "endogenous" => cfg.endogenous = list(v),
                "instruments" => cfg.instruments = list(v),
                "functional_columns" => cfg.functional_columns = list(v),
                "functional_prefix" => cfg.functional_prefix = Some(v.to_string()),
                "grid_file" => cfg.grid_file = Some(path(v)),
                "exogenous_as_instruments" => cfg.exogenous_as_instruments = parse_bool(&key, v)?,
                "standardize" => cfg.standardize = parse_bool(&key, v)?,
                "scheme" => {
                    cfg.scheme = v.parse().map_err(|e: regcf::Error| CliError::Config(format!("scheme: {e}")))?
                }
                "alpha" => {
                    cfg.alpha = if v.eq_ignore_ascii_case("auto") {
                        AlphaSpec::Auto
                    } else {
                        AlphaSpec::Fixed(parse_number(&key, v)?)
                    }
                }
                "estimator" => cfg.estimator = v.parse()?,
                "estimators" => {
                    cfg.estimators = list(v)
                        .iter()
                        .map(|s| BuiltinEstimator::parse(s).map_err(|e| CliError::Config(e.to_string())))
                        .collect::<Result<_, _>>()?
                }
                "scenario" => cfg.scenario = Some(v.to_string()),
                "reps" => cfg.reps = Some(parse_number(&key, v)?),
                "n" => cfg.n = Some(parse_number(&key, v)?),
                "seed" => cfg.seed = Some(parse_number(&key, v)?),
                "points" => cfg.points = parse_number(&key, v)?,
                "max_iterations" => cfg.max_iterations = Some(parse_number(&key, v)?),
                "output" => cfg.output = Some(path(v)),
                _ => unreachable!("keys are checked against KEYS"),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<(), CliError> {
        if let AlphaSpec::Fixed(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(CliError::Config(format!("alpha must be positive, got {a}")));
            }
        }
        if self.scheme == FilterKind::Ridge && self.alpha == AlphaSpec::Auto {
            return Err(CliError::Config(
                "automatic alpha selection supports tikhonov and spectral_cutoff only; give an explicit alpha for ridge"
                    .into(),
            ));
        }
        if self.points < 2 {
            return Err(CliError::Config("points must be at least 2".into()));
        }
        if self.estimators.is_empty() {
            return Err(CliError::Config("estimators is empty".into()));
        }
        if self.functional_prefix.is_some() && !self.functional_columns.is_empty() {
            return Err(CliError::Config("give functional_columns or functional_prefix, not both".into()));
        }
        let functional = self.functional_prefix.is_some() || !self.functional_columns.is_empty();
        if functional != self.grid_file.is_some() {
            return Err(CliError::Config("functional instruments need a grid_file and vice versa".into()));
        }
        Ok(())
    }

    /// Ridge is accepted with an explicit α but carries no consistency guarantee.
    pub fn ridge_warning(&self) -> Option<String> {
        (self.scheme == FilterKind::Ridge).then(|| {
            "ridge regularization may fail to satisfy the regularity condition the estimators rely on; \
             prefer tikhonov or spectral_cutoff"
                .to_string()
        })
    }
}
