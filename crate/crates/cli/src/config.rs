//! Run configuration: one JSON document with defaults for every field,
//! optionally overridden by dotted command-line flags (`--train.epochs 5`).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use scibilic_core::eval::CiConfig;
use scibilic_core::rng::derive_seed;
use scibilic_core::{McConfig, PhantomSpec, TrainConfig, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 16,
            n_val: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Binarization thresholds for the Dice curve, in `[0, 1]`.
    pub thresholds: Vec<f64>,
    /// IoU thresholds for the detection curve.
    pub iou_thresholds: Vec<f64>,
    pub anomalies_per_case: usize,
    /// Side of the inserted square; 0 means a quarter of the image width.
    pub anomaly_side: usize,
    pub bootstrap_resamples: usize,
    pub confidence_level: f64,
}

fn grid(steps: usize, lo: f64, hi: f64) -> Vec<f64> {
    // Rounded so the CSVs print 0.15 rather than 0.15000000000000002.
    (0..=steps)
        .map(|i| ((lo + (hi - lo) * i as f64 / steps as f64) * 1e9).round() / 1e9)
        .collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: grid(20, 0.0, 1.0),
            iou_thresholds: grid(9, 0.0, 0.9),
            anomalies_per_case: 5,
            anomaly_side: 0,
            bootstrap_resamples: 1000,
            confidence_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random stream of a run is derived from this.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub dataset: DatasetConfig,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub mc: McConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            phantom: PhantomSpec::default(),
            dataset: DatasetConfig::default(),
            model: UNetConfig::default(),
            train: TrainConfig::default(),
            mc: McConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document, applies `overrides` and validates the result.
    pub fn from_json(text: &str, overrides: &[(String, Value)]) -> anyhow::Result<Self> {
        let mut tree: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        if !tree.is_object() {
            bail!("config must be a JSON object");
        }
        for (key, value) in overrides {
            set_dotted(&mut tree, key, value.clone())?;
        }
        let config: RunConfig = serde_json::from_value(tree).context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> anyhow::Result<Self> {
        let text = match path {
            Some(p) => {
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => "{}".to_string(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        self.train.validate(self.model.divisor())?;
        if self.dataset.n_train == 0 || self.dataset.n_val == 0 {
            bail!("dataset.n_train and dataset.n_val must both be >= 1");
        }
        if self.mc.samples == 0 {
            bail!("mc.samples must be >= 1");
        }
        let e = &self.eval;
        if e.thresholds.is_empty() || e.iou_thresholds.is_empty() {
            bail!("eval.thresholds and eval.iou_thresholds must be non-empty");
        }
        if let Some(t) = e.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            bail!("eval.thresholds entry {t} outside [0, 1]");
        }
        if e.anomalies_per_case == 0 || e.bootstrap_resamples == 0 {
            bail!("eval.anomalies_per_case and eval.bootstrap_resamples must be >= 1");
        }
        if !(e.confidence_level > 0.0 && e.confidence_level < 1.0) {
            bail!("eval.confidence_level must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn anomaly_side(&self) -> usize {
        match self.eval.anomaly_side {
            0 => (self.phantom.size.1 / 4).max(1),
            s => s,
        }
    }

    /// Training settings with the run-derived seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train", 0),
            ..self.train.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init", 0)
    }

    /// MC settings for the `predict` command.
    pub fn predict_mc_config(&self) -> McConfig {
        McConfig {
            seed: derive_seed(self.seed, "predict", 0),
            ..self.mc.clone()
        }
    }

    /// MC settings for evaluation case `case`.
    pub fn eval_mc_config(&self, case: u64) -> McConfig {
        McConfig {
            seed: derive_seed(self.seed, "eval-mc", case),
            ..self.mc.clone()
        }
    }

    pub fn anomaly_seed(&self, case: u64) -> u64 {
        derive_seed(self.seed, "anomaly", case)
    }

    pub fn ci_config(&self) -> CiConfig {
        CiConfig {
            resamples: self.eval.bootstrap_resamples,
            level: self.eval.confidence_level,
            seed: derive_seed(self.seed, "bootstrap", 0),
        }
    }
}

/// Sets `tree.a.b.c = value` for key `"a.b.c"`, creating objects on the way.
/// Whether the key exists is left to deserialization so that unknown keys
/// are reported the same way as in the file.
pub fn set_dotted(tree: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key `{key}`");
    }
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!(
                "override `{key}`: `{}` is not a section",
                parts[..i].join(".")
            );
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

/// Parses an override value: JSON when it parses (numbers, booleans, arrays),
/// a plain string otherwise.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits dotted overrides out of `args`. Accepts `--a.b value` and
/// `--a.b=value`; any `--name` containing a dot is treated as an override.
pub fn extract_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, Value)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let raw = match inline {
            Some(v) => v,
            None => iter
                .next()
                .with_context(|| format!("override `--{key}` needs a value"))?,
        };
        overrides.push((key, parse_override_value(&raw)));
    }
    Ok((rest, overrides))
}
