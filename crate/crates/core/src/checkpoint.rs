//! JSON model container. Floats are written with shortest round-trip
//! formatting, so a save/load cycle reproduces every weight bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{KMeansModel, MonthlyHourModel};
use crate::lstm::{NetworkParameters, TrainingConfig};
use crate::timeseries::{DarkHourMask, NormalizationParams, WindowSpec};

pub const FORMAT: &str = "gridcast-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (format tag {0:?})")]
    Format(String),
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub feature_names: Vec<String>,
    pub window: WindowSpec,
    pub normalizer: NormalizationParams,
    pub mask: DarkHourMask,
    pub network: NetworkParameters,
    pub training: TrainingConfig,
    pub loss_history: Vec<f64>,
    pub kmeans: Option<KMeansModel>,
    pub monthly: Option<MonthlyHourModel>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        feature_names: Vec<String>,
        window: WindowSpec,
        normalizer: NormalizationParams,
        mask: DarkHourMask,
        network: NetworkParameters,
        training: TrainingConfig,
        loss_history: Vec<f64>,
    ) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            feature_names,
            window,
            normalizer,
            mask,
            network,
            training,
            loss_history,
            kmeans: None,
            monthly: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(CheckpointError::Format(self.format.clone()));
        }
        if self.version != VERSION {
            return Err(CheckpointError::Version { found: self.version });
        }
        let f = self.feature_names.len();
        let bad = |m: String| Err(CheckpointError::Inconsistent(m));
        if self.network.config.input_features != f || self.normalizer.num_features() != f {
            return bad(format!(
                "{f} features, network expects {}, normalizer has {}",
                self.network.config.input_features,
                self.normalizer.num_features()
            ));
        }
        if self.window.target >= f {
            return bad(format!("target index {} out of range", self.window.target));
        }
        self.mask
            .validate()
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
        self.network
            .check_shapes()
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
        if !self.network.all_finite() {
            return bad("non-finite network weight".into());
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let ckpt: Self = serde_json::from_reader(r)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.to_writer(&mut w)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_reader(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{init_params, NetworkConfig};

    fn sample() -> Checkpoint {
        let mut cfg = NetworkConfig::new(2);
        cfg.layer_sizes = vec![5, 3];
        cfg.seed = 11;
        let mut network = init_params(&cfg).unwrap();
        // Values with long binary expansions.
        network.head_b[0] = 0.1 + 0.2;
        network.layers[0].w_ih[0] = std::f64::consts::PI / 3.0;
        network.layers[0].w_ih[1] = 1e-300;
        let mut mask = DarkHourMask::default();
        mask.set(1, 3, true);
        Checkpoint::new(
            vec!["a".into(), "b".into()],
            WindowSpec::new(24, 12, 0),
            NormalizationParams {
                min: vec![0.0, -1.5],
                max: vec![1.0 / 3.0, 7.25],
            },
            mask,
            network,
            TrainingConfig::default(),
            vec![0.5, 0.25, 1.0 / 7.0],
        )
    }

    #[test]
    fn bit_exact_round_trip() {
        let ckpt = sample();
        let mut buf = Vec::new();
        ckpt.to_writer(&mut buf).unwrap();
        let back = Checkpoint::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let bits = |c: &Checkpoint| c.network.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ckpt));
    }

    #[test]
    fn rejects_other_versions_and_shapes() {
        let mut ckpt = sample();
        ckpt.version = 99;
        let mut buf = Vec::new();
        ckpt.to_writer(&mut buf).unwrap();
        assert!(matches!(Checkpoint::from_reader(buf.as_slice()), Err(CheckpointError::Version { found: 99 })));

        let mut ckpt = sample();
        ckpt.network.head_w.pop();
        assert!(matches!(ckpt.validate(), Err(CheckpointError::Inconsistent(_))));
        assert!(Checkpoint::from_reader(&b"{}"[..]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }
}
