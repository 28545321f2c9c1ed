//! Run specification and the `key=value` config-file format.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! skipped. Later keys override earlier ones, and command-line flags are
//! applied after the file.

use std::path::{Path, PathBuf};

use lpot::autoencoder::TrainConfig;
use lpot::dataset::SynthConfig;
use lpot::pipeline::JointConfig;
use lpot::transport::Regularization;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Seed of the default synthetic cohort.
pub const DEFAULT_COHORT_SEED: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        label_column: String,
        unlabeled_token: String,
    },
    Synth(SynthConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub data: DataSource,
    pub keep_fraction: f64,
    pub test_fraction: f64,
    /// One run per seed. A seed drives the split, the label mask and the
    /// model initialisation.
    pub seeds: Vec<u64>,
    pub quality_threshold: f64,
    pub impute_k: usize,
    /// Neighbour count of the k-NN baseline classifier.
    pub baseline_k: usize,
    pub train: TrainConfig,
    pub joint: JointConfig,
    pub jobs: usize,
    pub out: PathBuf,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            data: DataSource::Synth(SynthConfig::cohort(DEFAULT_COHORT_SEED)),
            keep_fraction: 0.3,
            test_fraction: 0.2,
            seeds: vec![1, 2, 3],
            quality_threshold: 0.5,
            impute_k: 5,
            baseline_k: 5,
            train: TrainConfig::default(),
            joint: JointConfig::default(),
            jobs: 1,
            out: PathBuf::from("out"),
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad("keep must lie in (0, 1]");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        if self.seeds.is_empty() {
            return bad("repeats must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return bad("quality_threshold must lie in [0, 1]");
        }
        if self.impute_k == 0 || self.baseline_k == 0 {
            return bad("neighbour counts must be positive");
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.joint.validate()?;
        Ok(())
    }

    /// Sets `seeds` to `first, first + 1, ..` with `repeats` entries.
    pub fn set_seeds(&mut self, first: u64, repeats: usize) {
        self.seeds = (0..repeats as u64).map(|i| first + i).collect();
    }

    /// Applies one `key=value` setting.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => {
                let (label_column, unlabeled_token) = match &self.data {
                    DataSource::Csv {
                        label_column,
                        unlabeled_token,
                        ..
                    } => (label_column.clone(), unlabeled_token.clone()),
                    DataSource::Synth(_) => ("diagnosis".to_string(), "-1".to_string()),
                };
                self.data = DataSource::Csv {
                    path: PathBuf::from(v),
                    label_column,
                    unlabeled_token,
                };
            }
            "label_col" => match &mut self.data {
                DataSource::Csv { label_column, .. } => *label_column = v.to_string(),
                DataSource::Synth(_) => return Err(HarnessError::Config("label_col needs data".into())),
            },
            "unlabeled_token" => match &mut self.data {
                DataSource::Csv { unlabeled_token, .. } => *unlabeled_token = v.to_string(),
                DataSource::Synth(_) => return Err(HarnessError::Config("unlabeled_token needs data".into())),
            },
            "synth" => self.data = DataSource::Synth(load_synth_file(Path::new(v))?),
            "keep" => self.keep_fraction = parse_fraction(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "alpha" => self.joint.alpha = parse(key, v)?,
            "k" => self.joint.k_neighbors = parse(key, v)?,
            "betas" => {
                let b: Vec<f64> = parse_list(key, v)?;
                if b.len() != 3 {
                    return Err(HarnessError::Config("betas needs three values".into()));
                }
                (self.joint.beta1, self.joint.beta2, self.joint.beta3) = (b[0], b[1], b[2]);
            }
            "lambda_ot" => self.joint.transport.regularization = parse_regularization(v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "hidden" => self.train.hidden_dims = parse_list(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.learning_rate = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "kl_weight" => self.train.kl_weight = parse(key, v)?,
            "t_outer" => self.joint.t_outer = parse(key, v)?,
            "inner_steps" => self.joint.inner_steps = parse(key, v)?,
            "step_size" => self.joint.step_size = parse(key, v)?,
            "eps_y" => self.joint.eps_y = Some(parse(key, v)?),
            "seed" => {
                let repeats = self.seeds.len().max(1);
                self.set_seeds(parse(key, v)?, repeats);
            }
            "repeats" => {
                let first = self.seeds.first().copied().unwrap_or(1);
                self.set_seeds(first, parse(key, v)?);
            }
            "jobs" => self.jobs = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "quality_threshold" => self.quality_threshold = parse(key, v)?,
            "impute_k" => self.impute_k = parse(key, v)?,
            "baseline_k" => self.baseline_k = parse(key, v)?,
            other => return Err(HarnessError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every setting in a `key=value` file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        for (key, value) in parse_pairs(&text, path)? {
            self.apply(&key, &value)?;
        }
        Ok(())
    }
}

fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(HarnessError::Config(format!(
                "{}:{}: expected key=value",
                path.display(),
                line_no + 1
            )));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Reads a synthetic-cohort description in `key=value` form. Unset keys keep
/// the defaults of the standard cohort.
pub fn load_synth_file(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut cfg = SynthConfig::cohort(DEFAULT_COHORT_SEED);
    for (key, v) in parse_pairs(&text, path)? {
        match key.as_str() {
            "n_per_class" => cfg.n_per_class = parse_list(&key, &v)?,
            "ambient_dim" => cfg.ambient_dim = parse(&key, &v)?,
            "manifold_dim" => cfg.manifold_dim = parse(&key, &v)?,
            "separation" | "class_separation" => cfg.class_separation = parse(&key, &v)?,
            "noise" | "noise_sigma" => cfg.noise_sigma = parse(&key, &v)?,
            "missing_rate" => cfg.missing_rate = parse(&key, &v)?,
            "seed" => cfg.seed = parse(&key, &v)?,
            other => return Err(HarnessError::Config(format!("unknown synth key `{other}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("cannot parse `{v}` for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Accepts `0.3` or `30%`.
fn parse_fraction(key: &str, v: &str) -> Result<f64> {
    match v.strip_suffix('%') {
        Some(pct) => Ok(parse::<f64>(key, pct.trim())? / 100.0),
        None => parse(key, v),
    }
}

/// A bare number is an absolute λ; `median:f` scales the median cost by `f`.
pub fn parse_regularization(v: &str) -> Result<Regularization> {
    match v.strip_prefix("median:") {
        Some(f) => Ok(Regularization::MedianScaled(parse("lambda_ot", f)?)),
        None => Ok(Regularization::Absolute(parse("lambda_ot", v)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_apply() {
        let mut spec = RunSpec::default();
        spec.apply("keep", "40%").unwrap();
        spec.apply("betas", "1, 0.5, 0").unwrap();
        spec.apply("lambda_ot", "median:0.2").unwrap();
        spec.apply("repeats", "2").unwrap();
        spec.apply("seed", "10").unwrap();
        assert_eq!(spec.keep_fraction, 0.4);
        assert_eq!((spec.joint.beta1, spec.joint.beta2, spec.joint.beta3), (1.0, 0.5, 0.0));
        assert_eq!(spec.joint.transport.regularization, Regularization::MedianScaled(0.2));
        assert_eq!(spec.seeds, vec![10, 11]);
        assert!(spec.apply("nope", "1").is_err());
        assert!(spec.apply("betas", "1,2").is_err());
        assert!(spec.apply("alpha", "x").is_err());
    }

    #[test]
    fn csv_keys_need_data_first() {
        let mut spec = RunSpec::default();
        assert!(spec.apply("label_col", "dx").is_err());
        spec.apply("data", "a.csv").unwrap();
        spec.apply("label_col", "dx").unwrap();
        assert_eq!(
            spec.data,
            DataSource::Csv {
                path: "a.csv".into(),
                label_column: "dx".into(),
                unlabeled_token: "-1".into()
            }
        );
    }

    #[test]
    fn validation() {
        let mut spec = RunSpec::default();
        assert!(spec.validate().is_ok());
        spec.keep_fraction = 0.0;
        assert!(spec.validate().is_err());
        spec.keep_fraction = 1.0;
        spec.seeds.clear();
        assert!(spec.validate().is_err());
    }
}
