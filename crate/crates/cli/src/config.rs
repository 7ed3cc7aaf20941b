//! Experiment configuration: a flat TOML file merged with command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use routelens_core::{Error, Result};

/// Keys accepted in the TOML file. Flags with the same names take precedence.
#[derive(Debug, Clone, Default, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Model directory (holding model.toml) or the model.toml path.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Corpus in JSON lines.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Prompt template: qa, toy or geo.
    #[arg(long, global = true)]
    pub template: Option<String>,
    /// Head to analyse, as `L1H2` or `1:2`.
    #[arg(long, global = true)]
    pub head: Option<String>,
    /// Comma-separated component list for localize (default: every head and MLP).
    #[arg(long, global = true)]
    pub components: Option<String>,
    /// Steering strengths: a list `0,1,2` or a grid `lo:hi:n`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub alphas: Option<String>,
    /// Cross-validation folds for qk (default 10).
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Stabilizer in the qk objective denominator (default 1e-8).
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Random restarts for the qk fit (default 8).
    #[arg(long, global = true)]
    pub restarts: Option<usize>,
    /// Iteration cap per qk restart (default 500).
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Layer windows, `all` or `1-2,3` (1-indexed, inclusive).
    #[arg(long, global = true)]
    pub windows: Option<String>,
    /// Also patch the answer slot during window patching.
    #[arg(long, global = true)]
    #[serde(default)]
    pub include_answer_slot: bool,
    /// Patch positions for localize: all or final.
    #[arg(long, global = true)]
    pub positions: Option<String>,
    /// Attention-mass fraction for OV token selection.
    #[arg(long, global = true)]
    pub mass: Option<f64>,
    /// Layer receiving the steering delta (default: the feature's layer).
    #[arg(long, global = true)]
    pub steer_layer: Option<usize>,
    /// Prompt condition to steer: clean or persuasive.
    #[arg(long, global = true)]
    pub steer_condition: Option<String>,
    /// Shuffle answer order with the seed.
    #[arg(long, global = true)]
    #[serde(default)]
    pub permute: bool,
    /// Localize artifact used to pick the head.
    #[arg(long, global = true)]
    pub localize: Option<PathBuf>,
    /// QK artifact holding the routing feature.
    #[arg(long, global = true)]
    pub feature: Option<PathBuf>,
    /// Seed for restarts, folds and permutations (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Table format: json or csv (csv adds CSV tables next to the JSON report).
    #[arg(long, global = true)]
    pub format: Option<String>,
    /// Treat convergence warnings as failures (exit code 4).
    #[arg(long, global = true)]
    #[serde(default)]
    pub strict: bool,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($opt:ident),*; $($flag:ident),*) => {
        $( if $src.$opt.is_some() { $dst.$opt = $src.$opt.clone(); } )*
        $( $dst.$flag |= $src.$flag; )*
    };
}

impl Settings {
    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut s: Settings = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut s.model, &mut s.corpus, &mut s.out, &mut s.localize, &mut s.feature].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    /// `self` with every value set in `flags` replaced.
    pub fn merged(mut self, flags: &Settings) -> Self {
        overlay!(self, flags;
            model, corpus, out, template, head, components, alphas, folds, epsilon, restarts, max_iter,
            windows, positions, mass, steer_layer, steer_condition, localize, feature, seed, jobs, format;
            include_answer_slot, permute, strict);
        self
    }
}

/// Fully resolved configuration, echoed into every output.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub command: String,
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub template: String,
    pub head: Option<String>,
    pub components: Option<String>,
    pub alphas: Vec<f64>,
    pub folds: usize,
    pub epsilon: f64,
    pub restarts: usize,
    pub max_iter: usize,
    pub windows: String,
    pub include_answer_slot: bool,
    pub positions: String,
    pub mass: f64,
    pub steer_layer: Option<usize>,
    pub steer_condition: String,
    pub permute: bool,
    pub localize: Option<PathBuf>,
    pub feature: Option<PathBuf>,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub format: Format,
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Parse `0,1.5,-2` or `lo:hi:n`.
pub fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    let bad = |x: &str| Error::Config(format!("bad alpha value {x:?} in {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad(parts[0]))?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad(parts[1]))?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad(parts[2]))?;
        return Ok(routelens_core::interventions::alpha_grid(lo, hi, n));
    }
    let v = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<f64>().map_err(|_| bad(x)))
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() || v.iter().any(|a| !a.is_finite()) {
        return Err(Error::Config(format!("alphas {s:?} must be a non-empty list of finite numbers")));
    }
    Ok(v)
}

fn existing(p: &Option<PathBuf>, what: &str) -> Result<()> {
    if let Some(p) = p {
        if !p.exists() {
            return Err(Error::Config(format!("{what} {} does not exist", p.display())));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn resolve(command: &str, s: Settings) -> Result<Self> {
        let format = match s.format.as_deref().unwrap_or("json") {
            "json" => Format::Json,
            "csv" => Format::Csv,
            f => return Err(Error::Config(format!("unknown format {f:?} (json, csv)"))),
        };
        let template = s.template.unwrap_or_else(|| "qa".into());
        if !matches!(template.as_str(), "qa" | "toy" | "geo") {
            return Err(Error::Config(format!("unknown template {template:?} (qa, toy, geo)")));
        }
        let positions = s.positions.unwrap_or_else(|| "all".into());
        positions.parse::<routelens_core::interventions::PatchPositions>()?;
        let steer_condition = s.steer_condition.unwrap_or_else(|| "clean".into());
        if !matches!(steer_condition.as_str(), "clean" | "persuasive") {
            return Err(Error::Config(format!("unknown steer condition {steer_condition:?} (clean, persuasive)")));
        }
        let mass = s.mass.unwrap_or(0.9);
        if !(mass > 0.0 && mass <= 1.0) {
            return Err(Error::Config(format!("mass must be in (0, 1], got {mass}")));
        }
        let epsilon = s.epsilon.unwrap_or(1e-8);
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        if s.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        let alphas = match &s.alphas {
            Some(a) => parse_alphas(a)?,
            None => routelens_core::interventions::default_alphas(),
        };
        let cfg = Self {
            command: command.to_string(),
            model: s.model,
            corpus: s.corpus,
            out: s.out.unwrap_or_else(|| PathBuf::from("routelens-out")),
            template,
            head: s.head,
            components: s.components,
            alphas,
            folds: s.folds.unwrap_or(10),
            epsilon,
            restarts: s.restarts.unwrap_or(8),
            max_iter: s.max_iter.unwrap_or(500),
            windows: s.windows.unwrap_or_else(|| "all".into()),
            include_answer_slot: s.include_answer_slot,
            positions,
            mass,
            steer_layer: s.steer_layer,
            steer_condition,
            permute: s.permute,
            localize: s.localize,
            feature: s.feature,
            seed: s.seed.unwrap_or(0),
            jobs: s.jobs,
            format,
            strict: s.strict,
        };
        existing(&cfg.model, "model")?;
        existing(&cfg.corpus, "corpus")?;
        existing(&cfg.localize, "localize artifact")?;
        existing(&cfg.feature, "feature artifact")?;
        Ok(cfg)
    }

    pub fn require_model(&self) -> Result<&Path> {
        self.model.as_deref().ok_or_else(|| Error::Config("--model is required".into()))
    }

    pub fn require_corpus(&self) -> Result<&Path> {
        self.corpus.as_deref().ok_or_else(|| Error::Config("--corpus is required".into()))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_forms() {
        assert_eq!(parse_alphas("0").unwrap(), vec![0.0]);
        assert_eq!(parse_alphas("-1, 2.5").unwrap(), vec![-1.0, 2.5]);
        assert_eq!(parse_alphas("-2:2:5").unwrap(), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert!(parse_alphas("x").is_err());
        assert!(parse_alphas("").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file: Settings = toml::from_str("folds = 3\nseed = 7\ntemplate = \"toy\"").unwrap();
        let flags = Settings { seed: Some(9), ..Default::default() };
        let cfg = ExperimentConfig::resolve("qk", file.merged(&flags)).unwrap();
        assert_eq!((cfg.folds, cfg.seed, cfg.template.as_str()), (3, 9, "toy"));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(toml::from_str::<Settings>("fold = 3").is_err());
    }
}
