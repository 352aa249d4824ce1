//! Model checkpoints: architecture, provenance and training progress in a
//! TOML manifest, then parameters and optional optimizer state.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container};
use crate::control::train::{LossPoint, TrainConfig, TrainState};
use crate::control::LossCurve;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Optimizer, OptimizerKind, ServoNet};

pub const CHECKPOINT_MAGIC: &str = "SERVO-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    init_seed: u64,
    epochs_completed: usize,
    parameters: usize,
    /// Kind of the stored optimizer state, if any.
    optimizer: Option<OptimizerKind>,
    model: ModelConfig,
    train: Option<TrainConfig>,
    #[serde(default)]
    curve: Vec<LossPoint>,
    /// Parameter snapshots that drove the completed on-policy rounds.
    #[serde(default)]
    drivers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ServoNet,
    /// Seed the parameters were initialized from.
    pub init_seed: u64,
    pub train: Option<TrainConfig>,
    /// Present when the optimizer state was stored, so training can resume.
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = Manifest {
            format: "servo-checkpoint".into(),
            init_seed: self.init_seed,
            epochs_completed: self.state.as_ref().map_or(0, |s| s.epochs_completed),
            parameters: self.model.store.scalar_count(),
            optimizer: self.state.as_ref().map(|s| s.optimizer.kind),
            model: self.model.config.clone(),
            train: self.train.clone(),
            curve: self.state.as_ref().map(|s| s.curve.points.clone()).unwrap_or_default(),
            drivers: self.state.as_ref().map_or(0, |s| s.drivers.len()),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut payload = Vec::new();
        let io = |e: std::io::Error| Error::Format(e.to_string());
        self.model.store.write_to(&mut payload).map_err(io)?;
        if let Some(s) = &self.state {
            s.optimizer.write_to(&mut payload).map_err(io)?;
            for d in &s.drivers {
                d.write_to(&mut payload).map_err(io)?;
            }
        }
        write_container(w, CHECKPOINT_MAGIC, &text, &payload).map_err(io)
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let (text, payload) = read_container(r, CHECKPOINT_MAGIC)?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let mut model = ServoNet::new(m.model, m.init_seed)?;
        if model.store.scalar_count() != m.parameters {
            return Err(Error::Format(format!(
                "manifest declares {} parameters, architecture has {}",
                m.parameters,
                model.store.scalar_count()
            )));
        }
        let mut body = payload.as_slice();
        model.store.read_from(&mut body)?;
        let state = match m.optimizer {
            Some(kind) => {
                let train = m.train.as_ref();
                let mut optimizer = Optimizer::new(
                    &model.store,
                    kind,
                    train.map_or(0.0, |t| t.lr),
                    train.map_or(0.9, |t| t.momentum),
                );
                optimizer.read_from(&mut body)?;
                let mut drivers = Vec::with_capacity(m.drivers);
                for _ in 0..m.drivers {
                    let mut d = model.store.clone();
                    d.read_from(&mut body)?;
                    drivers.push(d);
                }
                Some(TrainState {
                    optimizer,
                    epochs_completed: m.epochs_completed,
                    curve: LossCurve { points: m.curve },
                    drivers,
                })
            }
            None => None,
        };
        if !body.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint payload", body.len())));
        }
        Ok(Self {
            model,
            init_seed: m.init_seed,
            train: m.train,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(&mut bytes.as_slice())
    }
}
