//! Run configuration: flat `key = value` files with `#` comments.
//!
//! Command-line flags are applied through the same [`RunConfig::set`] after
//! the file, so they override it. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::net::Arch;
use crate::potential::PotentialTemplate;
use crate::sampler::{GuidanceConvention, Mode};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub mode: Mode,
    pub lambda: f64,
    pub feature: Option<[f64; 2]>,
    pub potential: PotentialTemplate,
    pub guidance_convention: GuidanceConvention,
    pub n: usize,
    pub pairs: usize,
    pub n_per_condition: usize,
    pub instances: usize,
    pub tolerance: f64,
    pub margin: f64,
    pub metric: String,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train: TrainConfig::default(),
            steps: 250,
            t_start: 1.0,
            t_end: 1e-3,
            mode: Mode::Sde,
            lambda: 2.0,
            feature: None,
            potential: PotentialTemplate::IpaFull,
            guidance_convention: GuidanceConvention::Full,
            n: 2000,
            pairs: 20,
            n_per_condition: 256,
            instances: 100,
            tolerance: 1e-4,
            margin: 0.05,
            metric: "energy".into(),
            out: None,
            ckpt: None,
            a: None,
            b: None,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "dataset_size",
    "learning_rate",
    "beta",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "depth",
    "hidden",
    "tap",
    "head_hidden",
    "steps",
    "t_start",
    "t_end",
    "mode",
    "lambda",
    "feature",
    "potential",
    "guidance_convention",
    "n",
    "pairs",
    "n_per_condition",
    "instances",
    "tolerance",
    "margin",
    "metric",
    "out",
    "ckpt",
    "a",
    "b",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` as the value of `{key}`"))
}

/// Parses `"a,b"` into a 2-vector.
pub fn parse_pair(value: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected two comma-separated numbers, got `{value}`"));
    }
    let a: f64 = parse("feature", parts[0])?;
    let b: f64 = parse("feature", parts[1])?;
    if !a.is_finite() || !b.is_finite() {
        return Err(format!("non-finite component in `{value}`"));
    }
    Ok([a, b])
}

impl RunConfig {
    /// Sets one key; the error string names the problem without location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                t.seed = self.seed;
            }
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "dataset_size" => t.dataset_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "depth" => t.arch.depth = parse(key, value)?,
            "hidden" => t.arch.hidden = parse(key, value)?,
            "tap" => t.arch.tap = parse(key, value)?,
            "head_hidden" => t.arch.head_hidden = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "t_start" => self.t_start = parse(key, value)?,
            "t_end" | "eps" => self.t_end = parse(key, value)?,
            "mode" => self.mode = value.parse().map_err(|e: Error| e.to_string())?,
            "lambda" => self.lambda = parse(key, value)?,
            "feature" => self.feature = Some(parse_pair(value)?),
            "potential" => self.potential = value.parse().map_err(|e: Error| e.to_string())?,
            "guidance_convention" => {
                self.guidance_convention = value.parse().map_err(|e: Error| e.to_string())?
            }
            "n" => self.n = parse(key, value)?,
            "pairs" => self.pairs = parse(key, value)?,
            "n_per_condition" => self.n_per_condition = parse(key, value)?,
            "instances" => self.instances = parse(key, value)?,
            "tolerance" => self.tolerance = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "metric" => match value {
                "energy" | "skl" | "coverage" => self.metric = value.to_string(),
                _ => return Err(format!("unknown metric `{value}` (expected energy, skl or coverage)")),
            },
            "out" => self.out = Some(value.into()),
            "ckpt" => self.ckpt = Some(value.into()),
            "a" => self.a = Some(value.into()),
            "b" => self.b = Some(value.into()),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Some(match key {
            "seed" => self.seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "dataset_size" => t.dataset_size.to_string(),
            "learning_rate" => format!("{:?}", t.learning_rate),
            "beta" => format!("{:?}", t.beta),
            "adam_beta1" => format!("{:?}", t.adam.beta1),
            "adam_beta2" => format!("{:?}", t.adam.beta2),
            "adam_eps" => format!("{:?}", t.adam.eps),
            "depth" => t.arch.depth.to_string(),
            "hidden" => t.arch.hidden.to_string(),
            "tap" => t.arch.tap.to_string(),
            "head_hidden" => t.arch.head_hidden.to_string(),
            "steps" => self.steps.to_string(),
            "t_start" => format!("{:?}", self.t_start),
            "t_end" => format!("{:?}", self.t_end),
            "mode" => self.mode.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "feature" => self.feature.map(|f| format!("{:?},{:?}", f[0], f[1]))?,
            "potential" => self.potential.to_string(),
            "guidance_convention" => self.guidance_convention.to_string(),
            "n" => self.n.to_string(),
            "pairs" => self.pairs.to_string(),
            "n_per_condition" => self.n_per_condition.to_string(),
            "instances" => self.instances.to_string(),
            "tolerance" => format!("{:?}", self.tolerance),
            "margin" => format!("{:?}", self.margin),
            "metric" => self.metric.clone(),
            "out" => path(&self.out)?,
            "ckpt" => path(&self.ckpt)?,
            "a" => path(&self.a)?,
            "b" => path(&self.b)?,
            _ => return None,
        })
    }

    /// Applies a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let err = |reason: String| Error::Config {
                path: origin.display().to_string(),
                line: i + 1,
                reason,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(format!("missing value for `{key}`")));
            }
            self.set(key, value).map_err(err)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// The effective configuration in the file format; unset paths are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }

    /// Writes `<artifact>.cfg` next to an output file.
    pub fn write_sidecar(&self, artifact: &Path) -> Result<PathBuf> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".cfg");
        let path = PathBuf::from(name);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn arch(&self) -> Arch {
        self.train.arch
    }
}
