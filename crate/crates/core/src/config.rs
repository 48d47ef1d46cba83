//! Run configuration: a flat `key = value` document plus overrides.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored.
//! Lists are comma separated. Overrides (from CLI flags) replace file
//! values key by key before validation. [`RunSpec::to_config_string`]
//! renders the fully resolved configuration in the same format, so a
//! report's embedded configuration can be fed back in unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Activation, Architecture, ModelSpec};
use crate::perturb::{FlipOrder, Strategy};
use crate::train::{DevSplit, Grid, TrainConfig};

/// Environment variable consulted for the base seed when neither the
/// config nor the flags set one.
pub const SEED_ENV: &str = "PERTURB_LAB_SEED";
pub const DEFAULT_SEED: u64 = 42;

/// Every recognised key, in rendering order.
pub const KEYS: &[&str] = &[
    "dataset",
    "labels",
    "min_count",
    "embeddings",
    "embed_dim",
    "init_scale",
    "freeze_embeddings",
    "arch",
    "filters",
    "filter_width",
    "activation",
    "strategies",
    "p",
    "sigma",
    "flip_order",
    "epochs",
    "lr",
    "batch_size",
    "seed",
    "test_fraction",
    "dev_fraction",
    "cv_folds",
    "runs_per_point",
    "runs",
    "fractions",
    "arrow_threshold",
    "out",
];

const REQUIRED: &[&str] = &["dataset", "strategies"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub dataset: PathBuf,
    pub labels: Vec<String>,
    pub min_count: usize,
    pub embeddings: Option<PathBuf>,
    pub embed_dim: usize,
    pub init_scale: f64,
    pub freeze_embeddings: bool,
    pub model: ModelSpec,
    pub strategies: Vec<Strategy>,
    pub grid: Grid,
    pub flip_order: FlipOrder,
    pub train: TrainConfig,
    pub test_fraction: f64,
    pub dev: DevSplit,
    pub runs_per_point: usize,
    pub n_runs: usize,
    pub fractions: Vec<f64>,
    pub arrow_threshold: f64,
    pub out: PathBuf,
}

fn key_err(key: &str, message: impl Into<String>) -> Error {
    Error::ConfigKey {
        key: key.to_owned(),
        message: message.into(),
    }
}

/// Parses `key = value` lines into a map, rejecting unknown keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(key_err(key, "unknown key"));
        }
        out.insert(key.to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

struct Values(BTreeMap<String, String>);

impl Values {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| key_err(key, format!("{v:?}: {e}"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| key_err(key, format!("{s:?}: {e}"))))
                .collect(),
        }
    }
}

fn in_range(key: &str, value: f64, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(key_err(key, format!("{value} out of range, expected {what}")))
    }
}

impl RunSpec {
    /// Merges `file` (config text) with `overrides` and validates.
    /// `env_seed` is used when neither sets `seed`.
    pub fn resolve(
        file: Option<&str>,
        overrides: &BTreeMap<String, String>,
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let mut pairs = match file {
            Some(text) => parse_pairs(text)?,
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            if !KEYS.contains(&k.as_str()) {
                return Err(key_err(k, "unknown key"));
            }
            pairs.insert(k.clone(), v.clone());
        }
        if !pairs.contains_key("seed") {
            if let Some(s) = env_seed.filter(|s| !s.trim().is_empty()) {
                pairs.insert("seed".into(), s.trim().to_owned());
            }
        }
        Self::from_pairs(pairs)
    }

    fn from_pairs(pairs: BTreeMap<String, String>) -> Result<Self> {
        let v = Values(pairs);
        for key in REQUIRED {
            if v.raw(key).is_none() {
                return Err(key_err(key, "missing required key"));
            }
        }

        let strategies: Vec<Strategy> = v.list("strategies", vec![])?;
        if strategies.is_empty() {
            return Err(key_err("strategies", "need at least one strategy"));
        }
        let labels: Vec<String> = v.list("labels", vec!["0".into(), "1".into()])?;
        if labels.len() < 2 {
            return Err(key_err("labels", "need at least two labels"));
        }

        let grid = Grid {
            p_values: v.list("p", Grid::default().p_values)?,
            sigma_values: v.list("sigma", Grid::default().sigma_values)?,
        };
        if grid.p_values.is_empty() {
            return Err(key_err("p", "empty list"));
        }
        for &p in &grid.p_values {
            in_range("p", p, p > 0.0 && p <= 1.0, "(0, 1]")?;
        }
        if grid.sigma_values.is_empty() {
            return Err(key_err("sigma", "empty list"));
        }
        for &s in &grid.sigma_values {
            in_range("sigma", s, s >= 0.0 && s.is_finite(), ">= 0")?;
        }

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            epochs: v.parse("epochs", defaults.epochs)?,
            lr: v.parse("lr", defaults.lr)?,
            batch_size: v.parse("batch_size", defaults.batch_size)?,
            seed: v.parse("seed", DEFAULT_SEED)?,
        };
        if train.epochs == 0 {
            return Err(key_err("epochs", "must be >= 1"));
        }
        in_range("lr", train.lr, train.lr > 0.0 && train.lr.is_finite(), "> 0")?;
        if train.batch_size == 0 {
            return Err(key_err("batch_size", "must be >= 1"));
        }

        let model_default = ModelSpec::default();
        let model = ModelSpec {
            arch: v.parse::<Architecture>("arch", model_default.arch)?,
            filters: v.parse("filters", model_default.filters)?,
            filter_width: v.parse("filter_width", model_default.filter_width)?,
            activation: v.parse::<Activation>("activation", model_default.activation)?,
        };
        if model.filters == 0 {
            return Err(key_err("filters", "must be >= 1"));
        }
        if model.filter_width == 0 {
            return Err(key_err("filter_width", "must be >= 1"));
        }

        let embed_dim: usize = v.parse("embed_dim", 16)?;
        if embed_dim == 0 {
            return Err(key_err("embed_dim", "must be >= 1"));
        }
        let init_scale: f64 = v.parse("init_scale", 0.25)?;
        in_range("init_scale", init_scale, init_scale > 0.0 && init_scale.is_finite(), "> 0")?;

        let test_fraction: f64 = v.parse("test_fraction", 0.2)?;
        in_range("test_fraction", test_fraction, test_fraction > 0.0 && test_fraction < 1.0, "(0, 1)")?;
        let cv_folds: usize = v.parse("cv_folds", 0)?;
        let dev = if cv_folds == 0 {
            let f: f64 = v.parse("dev_fraction", 0.2)?;
            in_range("dev_fraction", f, f > 0.0 && f < 1.0, "(0, 1)")?;
            DevSplit::Holdout(f)
        } else if cv_folds == 1 {
            return Err(key_err("cv_folds", "must be 0 (hold-out) or >= 2"));
        } else {
            DevSplit::CrossValidation(cv_folds)
        };

        let runs_per_point: usize = v.parse("runs_per_point", 2)?;
        if runs_per_point == 0 {
            return Err(key_err("runs_per_point", "must be >= 1"));
        }
        let n_runs: usize = v.parse("runs", 5)?;
        if n_runs == 0 {
            return Err(key_err("runs", "must be >= 1"));
        }
        let fractions: Vec<f64> = v.list("fractions", vec![0.1, 0.3, 1.0])?;
        if fractions.is_empty() {
            return Err(key_err("fractions", "empty list"));
        }
        for &f in &fractions {
            in_range("fractions", f, f > 0.0 && f <= 1.0, "(0, 1]")?;
        }
        let arrow_threshold: f64 = v.parse("arrow_threshold", 0.003)?;
        in_range("arrow_threshold", arrow_threshold, arrow_threshold >= 0.0, ">= 0")?;
        let min_count: usize = v.parse("min_count", 1)?;
        if min_count == 0 {
            return Err(key_err("min_count", "must be >= 1"));
        }

        Ok(Self {
            dataset: PathBuf::from(v.raw("dataset").expect("checked above")),
            labels,
            min_count,
            embeddings: v.raw("embeddings").map(PathBuf::from),
            embed_dim,
            init_scale,
            freeze_embeddings: v.parse("freeze_embeddings", false)?,
            model,
            strategies,
            grid,
            flip_order: v.parse("flip_order", FlipOrder::default())?,
            train,
            test_fraction,
            dev,
            runs_per_point,
            n_runs,
            fractions,
            arrow_threshold,
            out: PathBuf::from(v.raw("out").unwrap_or("report.csv")),
        })
    }

    /// Checks that every input path exists.
    pub fn validate_paths(&self) -> Result<()> {
        let check = |key: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(key_err(key, format!("{} is not a readable file", p.display())))
            }
        };
        check("dataset", &self.dataset)?;
        if let Some(e) = &self.embeddings {
            check("embeddings", e)?;
        }
        Ok(())
    }

    /// Fully resolved configuration in `key = value` form, one key per
    /// line in [`KEYS`] order.
    pub fn to_config_string(&self) -> String {
        fn list<T: std::fmt::Display>(items: &[T]) -> String {
            items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let (dev_fraction, cv_folds) = match self.dev {
            DevSplit::Holdout(f) => (f.to_string(), 0),
            DevSplit::CrossValidation(k) => (String::new(), k),
        };
        let values: BTreeMap<&str, String> = [
            ("dataset", self.dataset.display().to_string()),
            ("labels", self.labels.join(",")),
            ("min_count", self.min_count.to_string()),
            (
                "embeddings",
                self.embeddings
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("embed_dim", self.embed_dim.to_string()),
            ("init_scale", self.init_scale.to_string()),
            ("freeze_embeddings", self.freeze_embeddings.to_string()),
            ("arch", self.model.arch.to_string()),
            ("filters", self.model.filters.to_string()),
            ("filter_width", self.model.filter_width.to_string()),
            ("activation", self.model.activation.to_string()),
            ("strategies", list(&self.strategies)),
            ("p", list(&self.grid.p_values)),
            ("sigma", list(&self.grid.sigma_values)),
            ("flip_order", self.flip_order.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("lr", self.train.lr.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("seed", self.train.seed.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("dev_fraction", dev_fraction),
            ("cv_folds", cv_folds.to_string()),
            ("runs_per_point", self.runs_per_point.to_string()),
            ("runs", self.n_runs.to_string()),
            ("fractions", list(&self.fractions)),
            ("arrow_threshold", self.arrow_threshold.to_string()),
            ("out", self.out.display().to_string()),
        ]
        .into_iter()
        .collect();
        let mut s = String::new();
        for key in KEYS {
            writeln!(s, "{key} = {}", values[key]).expect("writing to a String");
        }
        s
    }

    /// Short SHA-256 of the resolved configuration.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    const MINIMAL: &str = "# minimal\ndataset = data/toy.tsv\nstrategies = adversarial\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let spec = RunSpec::resolve(Some(MINIMAL), &BTreeMap::new(), None).unwrap();
        assert_eq!(spec.strategies, vec![Strategy::Adversarial]);
        assert_eq!(spec.grid, Grid::default());
        assert_eq!(spec.n_runs, 5);
        assert_eq!(spec.train.seed, DEFAULT_SEED);
        assert_eq!(spec.train.epochs, 30);
        assert_eq!(spec.train.batch_size, 16);
        assert_eq!(spec.train.lr, 0.5);
        assert_eq!(spec.model.filters, 8);
        assert_eq!(spec.dev, DevSplit::Holdout(0.2));
    }

    #[test]
    fn out_of_range_p_names_key() {
        let text = format!("{MINIMAL}p = 1.5\n");
        match RunSpec::resolve(Some(&text), &BTreeMap::new(), None) {
            Err(Error::ConfigKey { key, .. }) => assert_eq!(key, "p"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flags_override_file() {
        let text = format!("{MINIMAL}sigma = 0.1\n");
        let spec = RunSpec::resolve(Some(&text), &overrides(&[("sigma", "0.01")]), None).unwrap();
        assert_eq!(spec.grid.sigma_values, vec![0.01]);
    }

    #[test]
    fn unknown_and_missing_keys() {
        let err = RunSpec::resolve(Some("dataset = x\nstrategies = none\nbogus = 1\n"), &BTreeMap::new(), None)
            .unwrap_err();
        assert!(matches!(err, Error::ConfigKey { ref key, .. } if key == "bogus"));
        let err = RunSpec::resolve(Some("dataset = x\n"), &BTreeMap::new(), None).unwrap_err();
        assert!(matches!(err, Error::ConfigKey { ref key, .. } if key == "strategies"));
        let err = RunSpec::resolve(Some(MINIMAL), &overrides(&[("strategies", "dropout")]), None)
            .unwrap_err();
        assert!(matches!(err, Error::ConfigKey { ref key, .. } if key == "strategies"));
    }

    #[test]
    fn seed_precedence() {
        let env = Some("7");
        let spec = RunSpec::resolve(Some(MINIMAL), &BTreeMap::new(), env).unwrap();
        assert_eq!(spec.train.seed, 7);
        let text = format!("{MINIMAL}seed = 9\n");
        let spec = RunSpec::resolve(Some(&text), &BTreeMap::new(), env).unwrap();
        assert_eq!(spec.train.seed, 9);
        let spec = RunSpec::resolve(Some(&text), &overrides(&[("seed", "11")]), env).unwrap();
        assert_eq!(spec.train.seed, 11);
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = format!("{MINIMAL}cv_folds = 5\narch = conv\nsigma = 0.001,0.5\n");
        let spec = RunSpec::resolve(Some(&text), &BTreeMap::new(), None).unwrap();
        let rendered = spec.to_config_string();
        let again = RunSpec::resolve(Some(&rendered), &BTreeMap::new(), None).unwrap();
        assert_eq!(spec, again);
        assert_eq!(spec.config_hash(), again.config_hash());
        assert_eq!(spec.config_hash().len(), 12);
    }
}
