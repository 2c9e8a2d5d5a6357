//! Baseline networks for global state evaluation (GSE) and build order
//! prediction (BOP), and their truncated-BPTT training loop.

mod combined;
mod global;
mod train;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{sigmoid, sigmoid_backward, softmax, softmax_backward, NnError, Params};

pub use combined::{combined_forward, CombinedCache, CombinedNet, CombinedNetConfig};
pub use global::{bop_forward, gse_forward, GlobalCache, GlobalNet, GlobalNetConfig};
pub use train::{
    curves_csv, evaluate, evaluate_manifest, init_network, load_model, predict, segment_inputs,
    segment_loss, tbptt_gradients, train, train_from_manifest, CurveRow, Evaluation, SegmentGrad,
    TrainConfig, TrainError, TrainOutcome, TrainSeq, CURVES_FILE, MODEL_CKPT, MODEL_SPEC,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Win probability per step (sigmoid head, BCE).
    Gse,
    /// Next macro action per step (softmax head, NLL).
    Bop,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Gse => "gse",
            Task::Bop => "bop",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gse" => Ok(Task::Gse),
            "bop" => Ok(Task::Bop),
            other => Err(format!("unknown task {other:?} (expected gse or bop)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Global,
    /// Global vector plus spatial tensor.
    Both,
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::Global => "global",
            FeatureSet::Both => "both",
        })
    }
}

impl FromStr for FeatureSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(FeatureSet::Global),
            "both" | "global+spatial" => Ok(FeatureSet::Both),
            other => Err(format!(
                "unknown feature set {other:?} (expected global or both)"
            )),
        }
    }
}

/// A layer size scaled by the width factor, never below one unit.
pub fn scale(size: usize, width: f64) -> usize {
    ((size as f64 * width).round() as usize).max(1)
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{what}: got {got}, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("combined network needs spatial input")]
    MissingSpatial,
    #[error("width factor must be positive and finite, got {0}")]
    Width(f64),
}

/// One time step of a batch: one row per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub global: Array2<f64>,
    pub spatial: Option<Array2<f64>>,
}

/// Per-step outputs of a forward pass over a segment, the hidden state
/// after its last step, and whatever the backward pass needs.
#[derive(Debug, Clone)]
pub struct SegmentOutput<C> {
    pub probs: Vec<Array2<f64>>,
    pub state: Vec<Array2<f64>>,
    pub cache: C,
}

/// A recurrent network mapping a sequence of inputs to per-step task
/// outputs (win probability or action distribution).
pub trait SeqNet: Params + Clone {
    type Cache;

    fn task(&self) -> Task;
    fn n_out(&self) -> usize;
    /// A gradient accumulator with this network's layout.
    fn zeros_like(&self) -> Self;
    fn init_state(&self, batch: usize) -> Vec<Array2<f64>>;
    /// Runs `steps` starting from hidden `state`.
    fn forward(
        &self,
        steps: &[StepInput],
        state: &[Array2<f64>],
    ) -> Result<SegmentOutput<Self::Cache>, ModelError>;
    /// Gradients of a loss whose derivative with respect to each step's
    /// output is `dprobs`. Gradients do not flow into the initial state.
    fn backward(&self, out: &SegmentOutput<Self::Cache>, dprobs: &[Array2<f64>]) -> Self;
}

pub(crate) fn head(task: Task, logits: &Array2<f64>) -> Array2<f64> {
    match task {
        Task::Gse => sigmoid(logits),
        Task::Bop => softmax(logits),
    }
}

pub(crate) fn head_backward(task: Task, probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    match task {
        Task::Gse => sigmoid_backward(probs, dprobs),
        Task::Bop => softmax_backward(probs, dprobs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetConfig {
    Global(GlobalNetConfig),
    Combined(CombinedNetConfig),
}

impl NetConfig {
    pub fn new(
        task: Task,
        features: FeatureSet,
        global_dim: usize,
        spatial_shape: [usize; 3],
        n_a: usize,
        width: f64,
    ) -> Result<Self, ModelError> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(ModelError::Width(width));
        }
        Ok(match features {
            FeatureSet::Global => {
                NetConfig::Global(GlobalNetConfig::new(task, global_dim, n_a, width))
            }
            FeatureSet::Both => NetConfig::Combined(CombinedNetConfig::new(
                task,
                global_dim,
                spatial_shape,
                n_a,
                width,
            )),
        })
    }
}

/// Everything needed to rebuild a trained network from its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub features: FeatureSet,
    pub net: NetConfig,
}

impl ModelSpec {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        s.push('\n');
        fs::write(path, s)
    }
}

/// Either baseline architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Global(GlobalNet),
    Combined(CombinedNet),
}

#[derive(Debug, Clone)]
pub enum NetworkCache {
    Global(GlobalCache),
    Combined(CombinedCache),
}

impl Network {
    /// Randomly initialized network; the same seed gives the same weights.
    pub fn new(config: &NetConfig, task: Task, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match config {
            NetConfig::Global(c) => Network::Global(GlobalNet::new(c, task, &mut rng)),
            NetConfig::Combined(c) => Network::Combined(CombinedNet::new(c, task, &mut rng)?),
        })
    }

    pub fn zeros(config: &NetConfig, task: Task) -> Result<Self, ModelError> {
        Ok(match config {
            NetConfig::Global(c) => Network::Global(GlobalNet::zeros(c, task)),
            NetConfig::Combined(c) => Network::Combined(CombinedNet::zeros(c, task)?),
        })
    }

    pub fn config(&self) -> NetConfig {
        match self {
            Network::Global(n) => NetConfig::Global(n.config()),
            Network::Combined(n) => NetConfig::Combined(n.config()),
        }
    }
}

impl Params for Network {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            Network::Global(n) => n.visit(f),
            Network::Combined(n) => n.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Network::Global(n) => n.visit_mut(f),
            Network::Combined(n) => n.visit_mut(f),
        }
    }
}

impl SeqNet for Network {
    type Cache = NetworkCache;

    fn task(&self) -> Task {
        match self {
            Network::Global(n) => n.task(),
            Network::Combined(n) => n.task(),
        }
    }

    fn n_out(&self) -> usize {
        match self {
            Network::Global(n) => n.n_out(),
            Network::Combined(n) => n.n_out(),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Network::Global(n) => Network::Global(n.zeros_like()),
            Network::Combined(n) => Network::Combined(n.zeros_like()),
        }
    }

    fn init_state(&self, batch: usize) -> Vec<Array2<f64>> {
        match self {
            Network::Global(n) => n.init_state(batch),
            Network::Combined(n) => n.init_state(batch),
        }
    }

    fn forward(
        &self,
        steps: &[StepInput],
        state: &[Array2<f64>],
    ) -> Result<SegmentOutput<NetworkCache>, ModelError> {
        Ok(match self {
            Network::Global(n) => {
                let o = n.forward(steps, state)?;
                SegmentOutput {
                    probs: o.probs,
                    state: o.state,
                    cache: NetworkCache::Global(o.cache),
                }
            }
            Network::Combined(n) => {
                let o = n.forward(steps, state)?;
                SegmentOutput {
                    probs: o.probs,
                    state: o.state,
                    cache: NetworkCache::Combined(o.cache),
                }
            }
        })
    }

    fn backward(&self, out: &SegmentOutput<NetworkCache>, dprobs: &[Array2<f64>]) -> Self {
        // Re-wrap without cloning the caches' large arrays more than once.
        match (self, &out.cache) {
            (Network::Global(n), NetworkCache::Global(c)) => {
                Network::Global(n.backward_cache(c, &out.probs, dprobs))
            }
            (Network::Combined(n), NetworkCache::Combined(c)) => {
                Network::Combined(n.backward_cache(c, &out.probs, dprobs))
            }
            _ => panic!("cache does not belong to this network"),
        }
    }
}
