use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FeatureSet, ModelError, ModelSpec, NetConfig, Network, SeqNet, StepInput, Task};
use crate::dataset::{read_split, DatasetError, DatasetManifest, Split};
use crate::eval::{argmax, gse_correct, progress_fractions, EvalReport};
use crate::features::{SampleHeader, SampleSequence};
use crate::nn::{
    bce_loss, load_checkpoint, nll_loss, save_checkpoint, Adam, AdamConfig, CheckpointError,
};
use crate::util::mix_seed;

pub const CURVES_FILE: &str = "curves.csv";
pub const MODEL_SPEC: &str = "model.json";
pub const MODEL_CKPT: &str = "model.mscw";

/// RNG stream for weight initialization (shuffles use the epoch number).
const INIT_STREAM: u64 = 0x1u64 << 63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub features: FeatureSet,
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub tbptt_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub width: f64,
    /// Sequences per forward pass when evaluating.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Gse,
            features: FeatureSet::Global,
            lr: 1e-3,
            lr_decay: 0.5,
            batch_size: 256,
            tbptt_len: 20,
            epochs: 10,
            seed: 0,
            width: 1.0,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    /// Learning rate used during epoch `epoch` (0-based): `lr · decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.tbptt_len == 0 {
            return bad("tbptt_len must be at least 1");
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.lr_decay > 0.0 && self.lr_decay.is_finite())
        {
            return bad("lr and lr_decay must be positive");
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return bad("width must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}, segment {segment}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        segment: usize,
        loss: f64,
    },
    #[error("sequence {key}: {message}")]
    Data { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// One sequence in training form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSeq {
    pub key: String,
    pub won: bool,
    pub labels: Vec<usize>,
    /// `T × global_dim`
    pub global: Array2<f64>,
    /// Flattened spatial tensor per step, when the spatial branch is used.
    pub spatial: Option<Vec<Vec<f32>>>,
}

impl TrainSeq {
    pub fn from_sample(seq: &SampleSequence, with_spatial: bool) -> Result<Self, TrainError> {
        let key = seq.key();
        let dim = seq.header.global_dim;
        let mut flat = Vec::with_capacity(seq.steps.len() * dim);
        for s in &seq.steps {
            if s.global.len() != dim {
                return Err(TrainError::Data {
                    key,
                    message: format!("global length {} != {dim}", s.global.len()),
                });
            }
            flat.extend(s.global.iter().map(|v| f64::from(*v)));
        }
        let spatial = if with_spatial {
            let want: usize = seq.header.spatial_shape.iter().product();
            let mut planes = Vec::with_capacity(seq.steps.len());
            for s in &seq.steps {
                match &s.spatial {
                    Some(p) if p.len() == want => planes.push(p.clone()),
                    _ => {
                        return Err(TrainError::Data {
                            key,
                            message: "missing or malformed spatial tensor".into(),
                        })
                    }
                }
            }
            Some(planes)
        } else {
            None
        };
        Ok(TrainSeq {
            key,
            won: seq.won(),
            labels: seq.steps.iter().map(|s| s.label).collect(),
            global: Array2::from_shape_vec((seq.steps.len(), dim), flat).expect("T×dim"),
            spatial,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Batched inputs for steps `t0..t1`; rows past a sequence's end are zero.
pub fn segment_inputs(seqs: &[&TrainSeq], t0: usize, t1: usize) -> Vec<StepInput> {
    let batch = seqs.len();
    let gd = seqs.first().map_or(0, |s| s.global.ncols());
    let sd = seqs
        .first()
        .and_then(|s| s.spatial.as_ref())
        .and_then(|p| p.first())
        .map(Vec::len);
    (t0..t1)
        .map(|t| {
            let mut global = Array2::zeros((batch, gd));
            let mut spatial = sd.map(|sd| Array2::zeros((batch, sd)));
            for (b, s) in seqs.iter().enumerate() {
                if t < s.len() {
                    global.row_mut(b).assign(&s.global.row(t));
                    if let (Some(out), Some(planes)) = (spatial.as_mut(), s.spatial.as_ref()) {
                        for (o, v) in out.row_mut(b).iter_mut().zip(&planes[t]) {
                            *o = f64::from(*v);
                        }
                    }
                }
            }
            StepInput { global, spatial }
        })
        .collect()
}

/// Masked loss over a segment starting at step `t0`.
///
/// Returns the summed loss, the number of real (unpadded) steps, and the
/// derivative of the *mean* loss with respect to every output.
pub fn segment_loss(
    task: Task,
    probs: &[Array2<f64>],
    seqs: &[&TrainSeq],
    t0: usize,
) -> (f64, usize, Vec<Array2<f64>>) {
    let n_valid: usize = seqs
        .iter()
        .map(|s| s.len().saturating_sub(t0).min(probs.len()))
        .sum();
    let scale = if n_valid > 0 {
        1.0 / n_valid as f64
    } else {
        0.0
    };
    let mut total = 0.0;
    let mut dprobs = Vec::with_capacity(probs.len());
    for (i, p) in probs.iter().enumerate() {
        let t = t0 + i;
        let mut d = Array2::zeros(p.raw_dim());
        for (b, s) in seqs.iter().enumerate() {
            if t >= s.len() {
                continue;
            }
            match task {
                Task::Gse => {
                    let (l, g) = bce_loss(p[[b, 0]], if s.won { 1.0 } else { 0.0 });
                    total += l;
                    d[[b, 0]] = g * scale;
                }
                Task::Bop => {
                    let row = p.row(b);
                    let (l, g) = nll_loss(row.as_slice().expect("contiguous row"), s.labels[t]);
                    total += l;
                    d[[b, s.labels[t]]] = g * scale;
                }
            }
        }
        dprobs.push(d);
    }
    (total, n_valid, dprobs)
}

#[derive(Debug, Clone)]
pub struct SegmentGrad<N> {
    /// Mean loss over the segment's real steps.
    pub loss: f64,
    pub n_valid: usize,
    pub grads: N,
}

fn max_len(seqs: &[&TrainSeq]) -> usize {
    seqs.iter().map(|s| s.len()).max().unwrap_or(0)
}

/// Gradients of every truncated segment of one batch, without updating
/// the network. Hidden state is carried across segment boundaries by value.
pub fn tbptt_gradients<N: SeqNet>(
    net: &N,
    seqs: &[&TrainSeq],
    tbptt_len: usize,
) -> Result<Vec<SegmentGrad<N>>, ModelError> {
    let t_max = max_len(seqs);
    let mut state = net.init_state(seqs.len());
    let mut out = Vec::new();
    for t0 in (0..t_max).step_by(tbptt_len.max(1)) {
        let t1 = (t0 + tbptt_len).min(t_max);
        let fwd = net.forward(&segment_inputs(seqs, t0, t1), &state)?;
        let (sum, n, dprobs) = segment_loss(net.task(), &fwd.probs, seqs, t0);
        let grads = net.backward(&fwd, &dprobs);
        out.push(SegmentGrad {
            loss: sum / n.max(1) as f64,
            n_valid: n,
            grads,
        });
        state = fwd.state;
    }
    Ok(out)
}

/// Per-step outputs (`T × n_out`) for every sequence, each from a fresh
/// hidden state.
pub fn predict<N: SeqNet>(
    net: &N,
    seqs: &[TrainSeq],
    batch: usize,
    seg_len: usize,
) -> Result<Vec<Array2<f64>>, ModelError> {
    let mut result = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch.max(1)) {
        let refs: Vec<&TrainSeq> = chunk.iter().collect();
        let mut outs: Vec<Array2<f64>> = refs
            .iter()
            .map(|s| Array2::zeros((s.len(), net.n_out())))
            .collect();
        let t_max = max_len(&refs);
        let mut state = net.init_state(refs.len());
        for t0 in (0..t_max).step_by(seg_len.max(1)) {
            let t1 = (t0 + seg_len).min(t_max);
            let fwd = net.forward(&segment_inputs(&refs, t0, t1), &state)?;
            for (i, p) in fwd.probs.iter().enumerate() {
                for (b, o) in outs.iter_mut().enumerate() {
                    if t0 + i < o.nrows() {
                        o.row_mut(t0 + i).assign(&p.row(b));
                    }
                }
            }
            state = fwd.state;
        }
        result.extend(outs);
    }
    Ok(result)
}

/// Loss and accuracy of a network over a set of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub report: Option<EvalReport>,
}

pub fn evaluate<N: SeqNet>(
    net: &N,
    seqs: &[TrainSeq],
    batch: usize,
) -> Result<Evaluation, ModelError> {
    let preds = predict(net, seqs, batch, 64)?;
    let (mut loss, mut correct, mut progress, mut lengths) =
        (0.0, Vec::new(), Vec::new(), Vec::new());
    for (s, p) in seqs.iter().zip(&preds) {
        for t in 0..s.len() {
            let row = p.row(t);
            let (l, ok) = match net.task() {
                Task::Gse => (
                    bce_loss(row[0], if s.won { 1.0 } else { 0.0 }).0,
                    gse_correct(row[0], s.won),
                ),
                Task::Bop => {
                    let d = row.as_slice().expect("contiguous row");
                    (nll_loss(d, s.labels[t]).0, argmax(d) == s.labels[t])
                }
            };
            loss += l;
            correct.push(ok);
        }
        progress.extend(progress_fractions(s.len()));
        lengths.push(s.len());
    }
    let steps = correct.len();
    let report = EvalReport::from_steps(net.task(), &correct, &progress)
        .ok()
        .map(|r| r.with_per_replay(&correct, &lengths));
    Ok(Evaluation {
        loss: if steps > 0 { loss / steps as f64 } else { 0.0 },
        accuracy: report.as_ref().map_or(0.0, |r| r.overall),
        steps,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("epoch,split,loss,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<N> {
    pub net: N,
    pub adam: Adam,
    pub curves: Vec<CurveRow>,
}

fn record<N: SeqNet>(
    net: &N,
    epoch: usize,
    splits: [(Split, &[TrainSeq]); 2],
    cfg: &TrainConfig,
    curves: &mut Vec<CurveRow>,
) -> Result<(), TrainError> {
    for (split, seqs) in splits {
        if seqs.is_empty() {
            continue;
        }
        let e = evaluate(net, seqs, cfg.eval_batch)?;
        log::info!(
            "epoch {epoch} {split}: loss {:.5} accuracy {:.4}",
            e.loss,
            e.accuracy
        );
        curves.push(CurveRow {
            epoch,
            split,
            loss: e.loss,
            accuracy: e.accuracy,
        });
    }
    Ok(())
}

/// Trains `net` with ADAM and truncated BPTT.
///
/// Each epoch shuffles the training sequences (seeded by `cfg.seed` and the
/// epoch), cuts them into batches, and walks every batch in segments of
/// `tbptt_len` steps with one update per segment. The hidden state carries
/// into the next segment but gradients stop at the boundary. The learning
/// rate is `lr · decay^epoch`. Curves hold one row per split before
/// training (epoch 0) and after every epoch; `on_epoch` runs after each.
pub fn train<N: SeqNet>(
    mut net: N,
    train_set: &[TrainSeq],
    val_set: &[TrainSeq],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &N, &Adam, &[CurveRow]) -> Result<(), TrainError>,
) -> Result<TrainOutcome<N>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if net.task() == Task::Bop {
        for s in train_set.iter().chain(val_set) {
            if let Some(l) = s.labels.iter().find(|l| **l >= net.n_out()) {
                return Err(TrainError::Data {
                    key: s.key.clone(),
                    message: format!("label {l} >= {}", net.n_out()),
                });
            }
        }
    }
    let splits = [(Split::Train, train_set), (Split::Val, val_set)];
    let mut adam = Adam::new(
        &net,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut curves = Vec::new();
    record(&net, 0, splits, cfg, &mut curves)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.config.lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            epoch as u64 + 1,
        )));
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&TrainSeq> = chunk.iter().map(|i| &train_set[*i]).collect();
            let t_max = max_len(&seqs);
            let mut state = net.init_state(seqs.len());
            for (si, t0) in (0..t_max).step_by(cfg.tbptt_len).enumerate() {
                let t1 = (t0 + cfg.tbptt_len).min(t_max);
                let fwd = net.forward(&segment_inputs(&seqs, t0, t1), &state)?;
                let (sum, n, dprobs) = segment_loss(net.task(), &fwd.probs, &seqs, t0);
                let loss = sum / n.max(1) as f64;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch: epoch + 1,
                        batch: bi,
                        segment: si,
                        loss,
                    });
                }
                let grads = net.backward(&fwd, &dprobs);
                adam.step(&mut net, &grads);
                state = fwd.state;
            }
        }
        record(&net, epoch + 1, splits, cfg, &mut curves)?;
        on_epoch(epoch + 1, &net, &adam, &curves)?;
    }
    Ok(TrainOutcome { net, adam, curves })
}

fn load_split(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    split: Split,
    spatial: bool,
) -> Result<(Vec<TrainSeq>, Option<SampleHeader>), TrainError> {
    let mut header = None;
    let mut out = Vec::new();
    for seq in read_split(manifest, dataset_dir, split) {
        let seq = seq?;
        if header.is_none() {
            header = Some(seq.header.clone());
        }
        out.push(TrainSeq::from_sample(&seq, spatial)?);
    }
    Ok((out, header))
}

/// Reads the train/val splits of a manifest, trains a freshly initialized
/// network and writes `model.json`, per-epoch checkpoints, the final
/// `model.mscw` and `curves.csv` into `out_dir`.
pub fn train_from_manifest(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<Network>, TrainError> {
    cfg.validate()?;
    let io_err = |path: PathBuf| move |source| TrainError::Io { path, source };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir.to_path_buf()))?;
    let spatial = cfg.features == FeatureSet::Both;
    let (train_set, header) = load_split(manifest, dataset_dir, Split::Train, spatial)?;
    let header = header.ok_or(TrainError::EmptySplit(Split::Train))?;
    let (val_set, _) = load_split(manifest, dataset_dir, Split::Val, spatial)?;

    let net_cfg = NetConfig::new(
        cfg.task,
        cfg.features,
        header.global_dim,
        header.spatial_shape,
        header.n_a,
        cfg.width,
    )?;
    let net = Network::new(&net_cfg, cfg.task, mix_seed(cfg.seed, INIT_STREAM))?;
    let spec_path = out_dir.join(MODEL_SPEC);
    ModelSpec {
        task: cfg.task,
        features: cfg.features,
        net: net_cfg,
    }
    .save(&spec_path)
    .map_err(io_err(spec_path))?;

    let curves_path = out_dir.join(CURVES_FILE);
    let outcome = train(
        net,
        &train_set,
        &val_set,
        cfg,
        |epoch, net, adam, curves| {
            save_checkpoint(
                &out_dir.join(format!("epoch-{epoch:03}.mscw")),
                net,
                Some(adam),
            )?;
            fs::write(&curves_path, curves_csv(curves)).map_err(io_err(curves_path.clone()))
        },
    )?;
    fs::write(&curves_path, curves_csv(&outcome.curves)).map_err(io_err(curves_path.clone()))?;
    save_checkpoint(&out_dir.join(MODEL_CKPT), &outcome.net, Some(&outcome.adam))?;
    Ok(outcome)
}

/// Loads a trained network. `ckpt` is either a checkpoint directory (read
/// as `model.json` + `model.mscw`) or a `.mscw` file with `model.json`
/// beside it.
pub fn load_model(ckpt: &Path) -> Result<(ModelSpec, Network), TrainError> {
    let (dir, weights) = if ckpt.is_dir() {
        (ckpt.to_path_buf(), ckpt.join(MODEL_CKPT))
    } else {
        (
            ckpt.parent().unwrap_or(Path::new(".")).to_path_buf(),
            ckpt.to_path_buf(),
        )
    };
    let spec_path = dir.join(MODEL_SPEC);
    let spec = ModelSpec::load(&spec_path).map_err(|source| TrainError::Io {
        path: spec_path,
        source,
    })?;
    let mut net = Network::zeros(&spec.net, spec.task)?;
    load_checkpoint(&weights)?.restore(&mut net)?;
    Ok((spec, net))
}

/// Evaluates a network on one split of a dataset.
pub fn evaluate_manifest(
    net: &Network,
    spec: &ModelSpec,
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    split: Split,
    batch: usize,
) -> Result<Evaluation, TrainError> {
    let (seqs, _) = load_split(
        manifest,
        dataset_dir,
        split,
        spec.features == FeatureSet::Both,
    )?;
    if seqs.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    if spec.task == Task::Bop {
        for s in &seqs {
            if let Some(l) = s.labels.iter().find(|l| **l >= net.n_out()) {
                return Err(TrainError::Data {
                    key: s.key.clone(),
                    message: format!("label {l} >= {}", net.n_out()),
                });
            }
        }
    }
    let mut e = evaluate(net, &seqs, batch.max(1))?;
    if let Some(m) = manifest.matchup {
        e.report = e.report.map(|r| r.with_matchup(m));
    }
    Ok(e)
}

/// Network initialization used by [`train_from_manifest`] for a given seed.
pub fn init_network(config: &NetConfig, task: Task, seed: u64) -> Result<Network, ModelError> {
    Network::new(config, task, mix_seed(seed, INIT_STREAM))
}
