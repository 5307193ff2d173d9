//! Encoder/decoder generators, CAM discriminators and the glyph recognizer.

mod discriminator;
mod generator;
mod recognizer;

pub use discriminator::{
    cam_attention, export_attention_heatmap, AttentionMap, DiscOutput, DiscResult, Discriminator, DiscriminatorConfig, Heatmap,
};
pub use generator::{ActivationTrace, Direction, Generator, GeneratorConfig, LatentCode, LatentVars};
pub use recognizer::{Recognizer, RecognizerConfig};

use alloc::format;
use alloc::vec::Vec;
use rand_distr::{Distribution, Normal};

use crate::graph::BnIndices;
use crate::params::{NetId, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const GEN_S: NetId = NetId(0);
pub const GEN_T: NetId = NetId(1);
pub const DISC_S: NetId = NetId(2);
pub const DISC_T: NetId = NetId(3);
pub const DISC_S_LOCAL: NetId = NetId(4);
pub const DISC_T_LOCAL: NetId = NetId(5);
pub const RECOGNIZER: NetId = NetId(6);

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const LEAKY_SLOPE: f32 = 0.2;
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
}

/// One conv or deconv layer of a generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    pub activation: Activation,
    pub dropout_rate: f32,
}

/// Parameter indices of one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerParams {
    pub weight: usize,
    pub bias: Option<usize>,
    pub bn: Option<BnIndices>,
}

pub(crate) fn gaussian(shape: Shape, std: f32, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let data = (0..shape.len()).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

pub(crate) fn channel_vec(c: usize, v: f32) -> Tensor {
    Tensor::full(Shape::new(1, c, 1, 1), v)
}

/// Registers gamma/beta plus running mean/var for a `c`-channel batch norm.
pub(crate) fn push_bn(set: &mut ParamSet, prefix: &str, c: usize, layer: usize) -> BnIndices {
    BnIndices {
        gamma: set.push(format!("{prefix}.bn.gamma"), channel_vec(c, 1.0), ParamKind::Trainable, layer),
        beta: set.push(format!("{prefix}.bn.beta"), channel_vec(c, 0.0), ParamKind::Trainable, layer),
        running_mean: set.push(format!("{prefix}.bn.running_mean"), channel_vec(c, 0.0), ParamKind::Buffer, layer),
        running_var: set.push(format!("{prefix}.bn.running_var"), channel_vec(c, 1.0), ParamKind::Buffer, layer),
    }
}

pub const BN_MOMENTUM: f32 = 0.1;

/// Folds train-mode batch statistics into the running buffers of `set`.
pub fn apply_bn_observations(set: &mut ParamSet, observations: &[crate::graph::BnObservation]) {
    let net = set.net();
    for obs in observations.iter().filter(|o| o.mean.net == net) {
        for (r, b) in set.tensor_mut(obs.mean.index).data_mut().iter_mut().zip(&obs.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in set.tensor_mut(obs.var.index).data_mut().iter_mut().zip(&obs.batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Replaces the running buffers with the average of per-batch statistics,
/// each inner vector holding the observations of one forward pass.
pub fn recalibrate_bn(set: &mut ParamSet, passes: &[Vec<crate::graph::BnObservation>]) {
    let mut acc: alloc::collections::BTreeMap<usize, (Vec<f64>, usize)> = alloc::collections::BTreeMap::new();
    let net = set.net();
    for obs in passes.iter().flatten().filter(|o| o.mean.net == net) {
        for (idx, vals) in [(obs.mean.index, &obs.batch_mean), (obs.var.index, &obs.batch_var)] {
            let e = acc.entry(idx).or_insert_with(|| (alloc::vec![0.0; vals.len()], 0));
            for (a, v) in e.0.iter_mut().zip(vals) {
                *a += *v as f64;
            }
            e.1 += 1;
        }
    }
    for (idx, (sum, n)) in acc {
        for (r, s) in set.tensor_mut(idx).data_mut().iter_mut().zip(sum) {
            *r = (s / n as f64) as f32;
        }
    }
}
