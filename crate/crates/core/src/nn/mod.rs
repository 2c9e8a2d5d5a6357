//! Double-precision layers, losses, ADAM and finite-difference gradient
//! checking for the recurrent baselines.
//!
//! Activations are batches: one row per sequence, one column per feature.
//! Layers own their parameters; a gradient is a value of the same type, so
//! `Params` can walk both in lockstep.

mod act;
mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod loss;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

pub use act::{
    relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, softmax, softmax_backward,
};
pub use adam::{adam_update, Adam, AdamConfig};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, NamedTensor, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, relative_error, GradCheckError, GradCheckReport, DEFAULT_H};
pub use layers::{Conv2d, Gru, GruCache, Linear};
pub use loss::{bce_loss, clamp_prob, nll_loss, PROB_CLAMP};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
}

pub(crate) fn check_shape(
    op: &'static str,
    ok: bool,
    left: &[usize],
    right: &[usize],
) -> Result<(), NnError> {
    if ok {
        Ok(())
    } else {
        Err(NnError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        })
    }
}

/// A collection of named parameter tensors, visited in a fixed order.
#[allow(clippy::type_complexity)]
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

/// Visits `layer` with every name prefixed by `prefix.`.
#[allow(clippy::type_complexity)]
pub fn visit_prefixed(prefix: &str, layer: &dyn Params, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    layer.visit(&mut |name, shape, data| f(&format!("{prefix}.{name}"), shape, data));
}

pub fn visit_prefixed_mut(
    prefix: &str,
    layer: &mut dyn Params,
    f: &mut dyn FnMut(&str, &mut [f64]),
) {
    layer.visit_mut(&mut |name, data| f(&format!("{prefix}.{name}"), data));
}

pub fn param_count(p: &dyn Params) -> usize {
    let mut n = 0;
    p.visit(&mut |_, _, d| n += d.len());
    n
}

/// All parameters concatenated in visit order.
pub fn flatten(p: &dyn Params) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |_, _, d| out.extend_from_slice(d));
    out
}

/// `(name, shape)` of every tensor in visit order.
pub fn param_shapes(p: &dyn Params) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    p.visit(&mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
    out
}

/// Sets every parameter to zero.
pub fn zero_params(p: &mut dyn Params) {
    p.visit_mut(&mut |_, d| d.fill(0.0));
}

/// Largest absolute difference between two parameter sets of the same layout.
pub fn max_abs_diff(a: &dyn Params, b: &dyn Params) -> f64 {
    flatten(a)
        .iter()
        .zip(flatten(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}
