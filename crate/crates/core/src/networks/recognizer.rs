//! 18-layer residual classifier over glyph codepoints.
//!
//! Stem conv, four stages of two basic blocks (16 convs) and a linear head.
//! Its pooled penultimate activations double as the feature extractor for
//! the Fréchet distance.

use alloc::format;
use alloc::vec::Vec;

use super::{channel_vec, gaussian, push_bn, LayerParams, RECOGNIZER};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamKind, ParamSet};
use crate::rng::{self, Domain};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecognizerConfig {
    pub classes: usize,
    pub resolution: usize,
    /// Channels of the first stage; later stages use 2x, 4x, 8x.
    pub base_width: usize,
}

impl RecognizerConfig {
    pub fn feature_dim(&self) -> usize {
        8 * self.base_width
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv1: LayerParams,
    conv2: LayerParams,
    shortcut: Option<LayerParams>,
    stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recognizer {
    config: RecognizerConfig,
    params: ParamSet,
    stem: LayerParams,
    blocks: Vec<Block>,
    fc_w: usize,
    fc_b: usize,
}

fn conv_bn(set: &mut ParamSet, rng: &mut rng::Rng, name: &str, cin: usize, cout: usize, k: usize, layer: usize) -> LayerParams {
    let std = libm::sqrtf(2.0 / (cin * k * k) as f32);
    let weight = set.push(format!("{name}.weight"), gaussian(Shape::new(cout, cin, k, k), std, rng), ParamKind::Trainable, layer);
    LayerParams { weight, bias: None, bn: Some(push_bn(set, name, cout, layer)) }
}

impl Recognizer {
    pub fn init(config: RecognizerConfig, seed: u64) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::EmptyClass(format!("recognizer needs at least 2 classes, got {}", config.classes)));
        }
        if config.base_width == 0 || config.resolution < 16 {
            return Err(Error::InvalidConfig(format!("bad recognizer config {config:?}")));
        }
        let mut rng = rng::derive(seed, Domain::Init, RECOGNIZER.0 as u64);
        let mut params = ParamSet::new(RECOGNIZER);
        let b = config.base_width;
        let stem = conv_bn(&mut params, &mut rng, "stem", 3, b, 3, 1);
        let mut blocks = Vec::with_capacity(8);
        let mut cin = b;
        let mut layer = 2;
        for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
            let cout = b * mult;
            for i in 0..2 {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("s{}.b{}", stage + 1, i + 1);
                let conv1 = conv_bn(&mut params, &mut rng, &format!("{name}.c1"), cin, cout, 3, layer);
                let conv2 = conv_bn(&mut params, &mut rng, &format!("{name}.c2"), cout, cout, 3, layer + 1);
                let shortcut =
                    (stride != 1 || cin != cout).then(|| conv_bn(&mut params, &mut rng, &format!("{name}.down"), cin, cout, 1, layer));
                blocks.push(Block { conv1, conv2, shortcut, stride });
                cin = cout;
                layer += 2;
            }
        }
        let fc_std = libm::sqrtf(1.0 / cin as f32);
        let fc_w = params.push("fc.weight", gaussian(Shape::new(config.classes, cin, 1, 1), fc_std, &mut rng), ParamKind::Trainable, layer);
        let fc_b = params.push("fc.bias", channel_vec(config.classes, 0.0), ParamKind::Trainable, layer);
        Ok(Recognizer { config, params, stem, blocks, fc_w, fc_b })
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Number of weight layers (convs on the main path plus the head).
    pub fn depth(&self) -> usize {
        1 + 2 * self.blocks.len() + 1
    }

    fn conv_bn_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var, l: &LayerParams, stride: usize, mode: Mode) -> Result<Var> {
        let w = g.param(&self.params, l.weight);
        let k = g.shape(w).h;
        let h = g.conv2d(x, w, None, stride, k / 2)?;
        g.batch_norm(h, &self.params, l.bn.expect("conv_bn layer"), mode)
    }

    /// Returns `(logits [n, classes], features [n, 8 * base])`.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let s = g.shape(x);
        let r = self.config.resolution;
        if s.c != 3 || s.h != r || s.w != r {
            return Err(Error::ShapeMismatch(format!("recognizer expects Nx3x{r}x{r}, got {s}")));
        }
        let mut h = self.conv_bn_graph(g, x, &self.stem, 2, mode)?;
        h = g.relu(h);
        for b in &self.blocks {
            let mut y = self.conv_bn_graph(g, h, &b.conv1, b.stride, mode)?;
            y = g.relu(y);
            y = self.conv_bn_graph(g, y, &b.conv2, 1, mode)?;
            let sc = match &b.shortcut {
                Some(l) => self.conv_bn_graph(g, h, l, b.stride, mode)?,
                None => h,
            };
            let sum = g.add(y, sc)?;
            h = g.relu(sum);
        }
        let feats = g.global_avg_pool(h);
        let w = g.param(&self.params, self.fc_w);
        let bias = g.param(&self.params, self.fc_b);
        let logits = g.linear(feats, w, bias)?;
        Ok((logits, feats))
    }

    /// Eval-mode logits and penultimate features.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (l, f) = self.forward_graph(&mut g, xv, Mode::Eval)?;
        Ok((g.value(l).clone(), g.value(f).clone()))
    }

    /// Arg-max class per item.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.infer(x)?;
        Ok(argmax_rows(logits.data(), self.config.classes))
    }
}

pub(crate) fn argmax_rows(data: &[f32], classes: usize) -> Vec<usize> {
    data.chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
