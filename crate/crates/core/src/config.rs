//! Run configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluate::{EvalConfig, GroundTruthRule};
use crate::ingest::KeyframeParams;
use crate::posegraph::NoiseSpec;
use crate::rng::RngStream;
use crate::slam::SlamConfig;
use crate::supervision::{KernelParams, LabelThresholds};
use crate::synthworld::WorldConfig;

/// Synthetic session indices used for training and for the held-out test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSplit {
    pub train: Vec<u64>,
    pub test: u64,
}

impl Default for SessionSplit {
    fn default() -> Self {
        Self {
            train: vec![0, 1, 2, 3, 4],
            test: 5,
        }
    }
}

/// How retrieval proposals are generated for the precision-recall sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proposal {
    /// Every pair within a swept embedding distance.
    #[default]
    Epsilon,
    /// Each keyframe's k nearest guarded neighbours, k swept.
    Knn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rule: GroundTruthRule,
    pub sweep_steps: usize,
    pub bins: usize,
    pub proposal: Proposal,
    /// Largest k of the rank sweep.
    pub knn_max: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            rule: e.rule,
            sweep_steps: e.sweep_steps,
            bins: e.bins,
            proposal: Proposal::Epsilon,
            knn_max: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamSection {
    /// Embedding-space acceptance radius; the model margin when null.
    pub accept_radius: Option<f64>,
    pub reoptimize_every: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SlamSection {
    fn default() -> Self {
        let s = SlamConfig::default();
        Self {
            accept_radius: s.accept_radius,
            reoptimize_every: s.reoptimize_every,
            max_iters: s.max_iters,
            tol: s.tol,
        }
    }
}

/// Input and output locations. Relative paths resolve against the
/// directory holding the config file; `out_dir` may be overridden on the
/// command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    /// Session directories to train on instead of generated sessions.
    pub train_sessions: Option<Vec<PathBuf>>,
    /// Held-out session directory instead of the generated one.
    pub test_session: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Minimum keyframe index gap for labeling, evaluation and SLAM.
    pub temporal_guard: usize,
    pub world: WorldConfig,
    pub sessions: SessionSplit,
    pub keyframes: KeyframeParams,
    pub kernel: KernelParams,
    pub labels: LabelThresholds,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub noise: NoiseSpec,
    pub slam: SlamSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            temporal_guard: 10,
            world: WorldConfig::default(),
            sessions: SessionSplit::default(),
            keyframes: KeyframeParams::default(),
            kernel: KernelParams::default(),
            labels: LabelThresholds::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            noise: NoiseSpec::default(),
            slam: SlamSection::default(),
            paths: Paths::default(),
        }
    }
}

/// Stream ids for seeds derived from the master seed.
const MODEL_INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const SLAM_STREAM: u64 = 3;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.paths.out_dir.as_mut() {
            resolve(p);
        }
        if let Some(list) = cfg.paths.train_sessions.as_mut() {
            list.iter_mut().for_each(resolve);
        }
        if let Some(p) = cfg.paths.test_session.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Checks every section; failures are configuration errors.
    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>, section: &str| {
            r.map_err(|e| match e {
                Error::InvalidInput(m) => Error::Config(format!("{section}: {m}")),
                other => other,
            })
        };
        wrap(self.world_for(0).validate(), "world")?;
        wrap(self.kernel.validate(), "kernel")?;
        wrap(self.labels.validate(), "labels")?;
        wrap(self.train.validate(), "train")?;
        wrap(self.eval.rule.validate(), "eval.rule")?;
        wrap(self.slam_config(None).validate(), "slam")?;
        let k = &self.keyframes;
        if !(k.sync_tolerance >= 0.0 && k.trans_thresh > 0.0 && k.rot_thresh > 0.0) {
            return Err(Error::Config(
                "keyframes: thresholds must be positive".into(),
            ));
        }
        if self.model.embedding_dim < 2
            || self.model.hidden.contains(&0)
            || !(self.model.margin > 0.0)
        {
            return Err(Error::Config(
                "model: embedding_dim must be >= 2, hidden widths >= 1 and margin > 0".into(),
            ));
        }
        if self.eval.bins == 0 || self.eval.sweep_steps == 0 || self.eval.knn_max == 0 {
            return Err(Error::Config(
                "eval: bins, sweep_steps and knn_max must be >= 1".into(),
            ));
        }
        if self.sessions.train.is_empty() && self.paths.train_sessions.is_none() {
            return Err(Error::Config("sessions.train is empty".into()));
        }
        if self.sessions.train.contains(&self.sessions.test) {
            return Err(Error::Config(format!(
                "sessions.test ({}) also appears in sessions.train",
                self.sessions.test
            )));
        }
        Ok(())
    }

    /// World config of one synthetic session under the master seed.
    pub fn world_for(&self, session: u64) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            session,
            ..self.world.clone()
        }
    }

    fn derived(&self, stream: u64) -> u64 {
        use rand::RngCore;
        RngStream::new(self.seed).fork(stream).next_u64()
    }

    pub fn model_seed(&self) -> u64 {
        self.derived(MODEL_INIT_STREAM)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.derived(TRAIN_STREAM),
            ..self.train.clone()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            rule: self.eval.rule,
            temporal_guard: self.temporal_guard,
            sweep_steps: self.eval.sweep_steps,
            bins: self.eval.bins,
        }
    }

    pub fn slam_config(&self, accept_radius: Option<f64>) -> SlamConfig {
        SlamConfig {
            accept_radius: accept_radius.or(self.slam.accept_radius),
            temporal_guard: self.temporal_guard,
            reoptimize_every: self.slam.reoptimize_every,
            noise: self.noise,
            max_iters: self.slam.max_iters,
            tol: self.slam.tol,
            seed: self.derived(SLAM_STREAM),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}
