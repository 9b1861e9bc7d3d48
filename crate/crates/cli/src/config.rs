//! Run configuration: one JSON document holding everything a subcommand
//! needs. Every section has defaults, unknown keys are rejected, and the
//! whole document is validated before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hfmca::hierarchy::{generate_synthetic, load_cifar10, AugmentProtocol, LabeledDataset};
use hfmca::knn::DEFAULT_K;
use hfmca::net::{geometry, NetworkSpec};
use hfmca::spectrum::ANALYSIS_RIDGE;
use hfmca::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural shapes; the first `train` samples form the training split.
    Synthetic {
        n: usize,
        classes: usize,
        height: usize,
        width: usize,
        train: usize,
    },
    /// CIFAR-10 binary batches. `limit` keeps the first records of each file.
    Cifar10 {
        train_path: PathBuf,
        test_path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n: 512,
            classes: 4,
            height: 8,
            width: 8,
            train: 384,
        }
    }
}

/// Training and evaluation splits.
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl DataSource {
    pub fn in_channels(&self) -> usize {
        3
    }

    pub fn dims(&self) -> (usize, usize) {
        match *self {
            DataSource::Synthetic { height, width, .. } => (height, width),
            DataSource::Cifar10 { .. } => (32, 32),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            DataSource::Synthetic {
                n,
                classes,
                height,
                width,
                train,
            } => {
                if train == 0 || train >= n {
                    return Err(format!("data.train must lie in 1..{n}"));
                }
                if classes == 0 || height < 8 || width < 8 {
                    return Err("synthetic data needs classes ≥ 1 and images of at least 8x8".into());
                }
                Ok(())
            }
            DataSource::Cifar10 { limit, .. } => match limit {
                Some(0) => Err("data.limit must be positive".into()),
                _ => Ok(()),
            },
        }
    }

    pub fn load(&self, seed: u64) -> Result<Splits, CliError> {
        match self {
            &DataSource::Synthetic {
                n,
                classes,
                height,
                width,
                train,
            } => {
                let all = generate_synthetic(n, classes, (height, width), seed)?;
                let (train, test) = all.split(train)?;
                Ok(Splits { train, test })
            }
            DataSource::Cifar10 {
                train_path,
                test_path,
                limit,
            } => {
                let read = |p: &Path| -> Result<LabeledDataset, CliError> {
                    let d = load_cifar10(p).map_err(|e| CliError::from(e).context(p))?;
                    match limit {
                        Some(l) if *l < d.len() => Ok(d.subset(&(0..*l).collect::<Vec<_>>())?),
                        _ => Ok(d),
                    }
                };
                Ok(Splits {
                    train: read(train_path)?,
                    test: read(test_path)?,
                })
            }
        }
    }
}

/// Files `train` writes besides the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Emit {
    pub costs_csv: bool,
    /// Write `spectrum_step{N}.csv` every this many steps; 0 disables.
    pub spectrum_every: u64,
    /// Write response maps for the first evaluation image after training.
    pub response_maps: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Emit {
            costs_csv: true,
            spectrum_every: 0,
            response_maps: false,
        }
    }
}

/// Post-training analysis settings shared by spectrum, telescope and knn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analysis {
    pub ridge: f64,
    /// Ridge for cross-model alignment. Zero keeps self-alignment exactly 1;
    /// raise it if a model has degenerate features.
    pub align_ridge: f64,
    /// Evaluation images the statistics are taken over.
    pub images: usize,
    pub k: usize,
    /// Images per forward pass.
    pub chunk: usize,
}

impl Default for Analysis {
    fn default() -> Self {
        Analysis {
            ridge: ANALYSIS_RIDGE,
            align_ridge: 0.0,
            images: 128,
            k: DEFAULT_K,
            chunk: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleInput {
    /// `x,y,probability` CSV file.
    JointCsv(PathBuf),
    /// Row-major table given inline.
    Joint(Vec<Vec<f64>>),
    /// Random component chain, bottom alphabet first.
    Chain {
        alphabets: Vec<usize>,
        per_symbol: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    /// Defaults to the desk topology sized for the data and view count.
    pub network: Option<NetworkSpec>,
    pub train: TrainConfig,
    pub augment: AugmentProtocol,
    pub emit: Emit,
    pub analysis: Analysis,
    pub oracle: Option<OracleInput>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSource::default(),
            network: None,
            train: TrainConfig::desk(0),
            augment: AugmentProtocol::default(),
            emit: Emit::default(),
            analysis: Analysis::default(),
            oracle: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the seed override, propagates the seed and checks every part.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        let cfg = |m: String| CliError::Config(m);
        self.data.validate().map_err(cfg)?;
        self.train.validate()?;
        self.augment.validate()?;
        let spec = self.network_spec();
        spec.validate()?;
        if spec.in_channels != self.data.in_channels() {
            return Err(cfg(format!(
                "network takes {} input channels, data has {}",
                spec.in_channels,
                self.data.in_channels()
            )));
        }
        geometry(&spec, self.data.dims())?;
        let a = &self.analysis;
        let ridge_ok = |r: f64| r >= 0.0 && r.is_finite();
        if !ridge_ok(a.ridge) || !ridge_ok(a.align_ridge) || a.images < 2 || a.k == 0 || a.chunk == 0 {
            return Err(cfg(
                "analysis needs ridges ≥ 0, at least 2 images, k ≥ 1 and chunk ≥ 1".into(),
            ));
        }
        if let Some(OracleInput::Chain { alphabets, per_symbol }) = &self.oracle {
            if alphabets.len() < 2 || alphabets.contains(&0) || *per_symbol == 0 {
                return Err(cfg("oracle chain needs two or more non-empty levels".into()));
            }
        }
        Ok(self)
    }

    pub fn network_spec(&self) -> NetworkSpec {
        self.network.clone().unwrap_or_else(|| {
            let views = self.train.use_external.then_some(self.train.views);
            NetworkSpec::desk(self.data.in_channels(), 16, 16, 4, views)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_run() {
        let c = RunConfig::parse("{}").unwrap().resolve(Some(9)).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.data, DataSource::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"emit": {"costs": true}}"#,
            r#"{"data": {"kind": "synthetic", "n": 10, "classes": 2, "height": 8, "width": 8, "train": 5, "x": 1}}"#,
        ] {
            assert!(matches!(RunConfig::parse(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_fail_resolution() {
        let mut c = RunConfig::default();
        c.train.ridge = -1.0;
        assert!(matches!(c.resolve(None), Err(CliError::Config(_))));
        let mut c = RunConfig::default();
        c.data = DataSource::Synthetic {
            n: 10,
            classes: 2,
            height: 8,
            width: 8,
            train: 10,
        };
        assert!(matches!(c.resolve(None), Err(CliError::Config(_))));
    }

    #[test]
    fn oracle_forms_parse() {
        let c = RunConfig::parse(r#"{"oracle": {"joint": [[0.4, 0.1], [0.1, 0.4]]}}"#).unwrap();
        assert!(matches!(c.oracle, Some(OracleInput::Joint(_))));
        let c = RunConfig::parse(r#"{"oracle": {"chain": {"alphabets": [3, 4, 5], "per_symbol": 2}}}"#).unwrap();
        assert!(matches!(c.oracle, Some(OracleInput::Chain { .. })));
    }
}
