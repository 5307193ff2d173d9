use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{gaussian, push_bn, Activation, LayerParams, LayerSpec, INIT_STD, KERNEL, LEAKY_SLOPE, STRIDE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::{NetId, ParamKind, ParamSet};
use crate::rng::{self, Domain};
use crate::tensor::{Shape, Tensor};

/// Encoder channels at a 256 input, outermost first.
pub const ENCODER_LADDER: [usize; 8] = [64, 128, 256, 512, 512, 512, 512, 512];
pub const DECODER_DROPOUT: f32 = 0.5;
/// Decoder layers 1..=3 use dropout.
pub const DROPOUT_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

impl Direction {
    pub fn tag(&self) -> &'static str {
        match self {
            Direction::SourceToTarget => "s2t",
            Direction::TargetToSource => "t2s",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Divides every channel count of the ladder (1 = full width).
    pub width_divisor: usize,
    pub skip_connections: bool,
}

impl GeneratorConfig {
    pub fn new(resolution: usize) -> Self {
        GeneratorConfig { resolution, width_divisor: 1, skip_connections: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 64 || !self.resolution.is_power_of_two() || self.resolution > 1 << ENCODER_LADDER.len() {
            return Err(Error::BadResolution(self.resolution));
        }
        if self.width_divisor == 0 {
            return Err(Error::InvalidConfig("width divisor must be positive".into()));
        }
        Ok(())
    }

    /// Number of encoder (and decoder) layers: `log2(resolution)`.
    pub fn depth(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        ENCODER_LADDER[..self.depth()].iter().map(|c| (c / self.width_divisor).max(1)).collect()
    }
}

/// Bottleneck plus the encoder activations kept for skip connections, as graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVars {
    pub bottleneck: Var,
    /// Encoder layers 1..depth-1, outermost first.
    pub skips: Vec<Var>,
}

/// Materialized [`LatentVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub bottleneck: Tensor,
    pub skips: Vec<Tensor>,
}

/// Per-layer activation shapes, reported as `(h, w, c)` like the architecture table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationTrace {
    pub encoder: Vec<(usize, usize, usize)>,
    /// Decoder layer outputs after skip concatenation.
    pub decoder: Vec<(usize, usize, usize)>,
    /// Input channel count of each decoder layer.
    pub decoder_inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub direction: Direction,
    config: GeneratorConfig,
    encoder: Vec<LayerSpec>,
    decoder: Vec<LayerSpec>,
    params: ParamSet,
    enc_idx: Vec<LayerParams>,
    dec_idx: Vec<LayerParams>,
}

impl Generator {
    /// Gaussian(0, 0.02) conv weights, zero biases, identity batch norms.
    pub fn init(net: NetId, direction: Direction, config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derive(seed, Domain::Init, net.0 as u64);
        let depth = config.depth();
        let ch = config.encoder_channels();
        let mut params = ParamSet::new(net);

        let mut encoder = Vec::with_capacity(depth);
        let mut enc_idx = Vec::with_capacity(depth);
        for i in 0..depth {
            let spec = LayerSpec {
                in_channels: if i == 0 { 3 } else { ch[i - 1] },
                out_channels: ch[i],
                kernel: KERNEL,
                stride: STRIDE,
                batch_norm: i > 0,
                activation: Activation::LeakyRelu,
                dropout_rate: 0.0,
            };
            let prefix = format!("enc.l{}", i + 1);
            let w = gaussian(Shape::new(spec.out_channels, spec.in_channels, KERNEL, KERNEL), INIT_STD, &mut rng);
            let weight = params.push(format!("{prefix}.weight"), w, ParamKind::Trainable, i + 1);
            let (bias, bn) = if spec.batch_norm {
                (None, Some(push_bn(&mut params, &prefix, spec.out_channels, i + 1)))
            } else {
                let b = params.push(format!("{prefix}.bias"), super::channel_vec(spec.out_channels, 0.0), ParamKind::Trainable, i + 1);
                (Some(b), None)
            };
            encoder.push(spec);
            enc_idx.push(LayerParams { weight, bias, bn });
        }

        let mut decoder = Vec::with_capacity(depth);
        let mut dec_idx = Vec::with_capacity(depth);
        let mut in_ch = ch[depth - 1];
        for i in 0..depth {
            let last = i + 1 == depth;
            let out = if last { 3 } else { ch[depth - 2 - i] };
            let spec = LayerSpec {
                in_channels: in_ch,
                out_channels: out,
                kernel: KERNEL,
                stride: STRIDE,
                batch_norm: !last,
                activation: if last { Activation::Tanh } else { Activation::Relu },
                dropout_rate: if i < DROPOUT_LAYERS && !last { DECODER_DROPOUT } else { 0.0 },
            };
            let prefix = format!("dec.l{}", i + 1);
            // deconv weight layout is [in, out, k, k]
            let w = gaussian(Shape::new(spec.in_channels, spec.out_channels, KERNEL, KERNEL), INIT_STD, &mut rng);
            let weight = params.push(format!("{prefix}.weight"), w, ParamKind::Trainable, i + 1);
            let (bias, bn) = if spec.batch_norm {
                (None, Some(push_bn(&mut params, &prefix, out, i + 1)))
            } else {
                let b = params.push(format!("{prefix}.bias"), super::channel_vec(out, 0.0), ParamKind::Trainable, i + 1);
                (Some(b), None)
            };
            decoder.push(spec);
            dec_idx.push(LayerParams { weight, bias, bn });
            in_ch = if config.skip_connections && !last { 2 * out } else { out };
        }
        Ok(Generator { direction, config, encoder, decoder, params, enc_idx, dec_idx })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn encoder_layers(&self) -> &[LayerSpec] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[LayerSpec] {
        &self.decoder
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn net(&self) -> NetId {
        self.params.net()
    }

    /// Width of the flattened bottleneck.
    pub fn latent_dim(&self) -> usize {
        self.encoder.last().map(|l| l.out_channels).unwrap_or(0)
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let r = self.config.resolution;
        if s.c != 3 || s.h != r || s.w != r || s.n == 0 {
            return Err(Error::ShapeMismatch(format!("generator expects Nx3x{r}x{r}, got {s}")));
        }
        Ok(())
    }

    pub fn encode_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var, mode: Mode) -> Result<LatentVars> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for idx in &self.enc_idx {
            let w = g.param(&self.params, idx.weight);
            let b = idx.bias.map(|b| g.param(&self.params, b));
            h = g.conv2d(h, w, b, STRIDE, KERNEL / 2)?;
            if let Some(bn) = idx.bn {
                h = g.batch_norm(h, &self.params, bn, mode)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
            skips.push(h);
        }
        let bottleneck = skips.pop().expect("at least one layer");
        Ok(LatentVars { bottleneck, skips })
    }

    pub fn decode_graph<'a>(&'a self, g: &mut Graph<'a>, latent: &LatentVars, mode: Mode) -> Result<Var> {
        self.decode_traced(g, latent, mode, None)
    }

    fn decode_traced<'a>(
        &'a self,
        g: &mut Graph<'a>,
        latent: &LatentVars,
        mode: Mode,
        mut trace: Option<&mut ActivationTrace>,
    ) -> Result<Var> {
        let depth = self.decoder.len();
        if latent.skips.len() + 1 != depth {
            return Err(Error::ShapeMismatch(format!("{} skips for a {depth}-layer decoder", latent.skips.len())));
        }
        let bs = g.shape(latent.bottleneck);
        if bs.c != self.latent_dim() || bs.h != 1 || bs.w != 1 {
            return Err(Error::ShapeMismatch(format!("bottleneck {bs} for latent width {}", self.latent_dim())));
        }
        let mut h = latent.bottleneck;
        for (i, (spec, idx)) in self.decoder.iter().zip(&self.dec_idx).enumerate() {
            if let Some(t) = trace.as_deref_mut() {
                t.decoder_inputs.push(g.shape(h).c);
            }
            let w = g.param(&self.params, idx.weight);
            let b = idx.bias.map(|b| g.param(&self.params, b));
            h = g.conv_transpose2d(h, w, b, STRIDE, KERNEL / 2, 1)?;
            if let Some(bn) = idx.bn {
                h = g.batch_norm(h, &self.params, bn, mode)?;
            }
            h = match spec.activation {
                Activation::Relu => g.relu(h),
                Activation::Tanh => g.tanh(h),
                Activation::LeakyRelu => g.leaky_relu(h, LEAKY_SLOPE),
            };
            h = g.dropout(h, spec.dropout_rate, mode);
            if self.config.skip_connections && i + 1 < depth {
                let skip = latent.skips[depth - 2 - i];
                h = g.concat(h, skip)?;
            }
            if let Some(t) = trace.as_deref_mut() {
                let s = g.shape(h);
                t.decoder.push((s.h, s.w, s.c));
            }
        }
        Ok(h)
    }

    /// `decoder(encoder(x))` on the graph.
    pub fn generate_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var, mode: Mode) -> Result<Var> {
        let latent = self.encode_graph(g, x, mode)?;
        self.decode_graph(g, &latent, mode)
    }

    /// Eval-mode encoder pass.
    pub fn encode(&self, x: &Tensor) -> Result<LatentCode> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let lat = self.encode_graph(&mut g, xv, Mode::Eval)?;
        Ok(LatentCode { bottleneck: g.value(lat.bottleneck).clone(), skips: lat.skips.iter().map(|&s| g.value(s).clone()).collect() })
    }

    /// Decoder pass over a materialized latent code. Train mode samples
    /// dropout masks from `dropout_seed`.
    pub fn decode(&self, latent: &LatentCode, mode: Mode, dropout_seed: u64) -> Result<Tensor> {
        let mut g = Graph::new().with_rng(rng::derive(dropout_seed, Domain::Dropout, self.net().0 as u64));
        let lat =
            LatentVars { bottleneck: g.input(latent.bottleneck.clone()), skips: latent.skips.iter().map(|s| g.input(s.clone())).collect() };
        let out = self.decode_graph(&mut g, &lat, mode)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode translation of a batch.
    pub fn generate(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.generate_graph(&mut g, xv, Mode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode pass recording every layer's activation shape.
    pub fn trace(&self, x: &Tensor) -> Result<ActivationTrace> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let lat = self.encode_graph(&mut g, xv, Mode::Eval)?;
        let mut trace = ActivationTrace { encoder: Vec::new(), decoder: Vec::new(), decoder_inputs: Vec::new() };
        for &v in lat.skips.iter().chain(core::iter::once(&lat.bottleneck)) {
            let s = g.shape(v);
            trace.encoder.push((s.h, s.w, s.c));
        }
        self.decode_traced(&mut g, &lat, Mode::Eval, Some(&mut trace))?;
        Ok(trace)
    }

    pub fn describe(&self) -> String {
        format!(
            "{} generator: {} layers, channels {:?}, skips {}",
            self.direction.tag(),
            self.encoder.len(),
            self.config.encoder_channels(),
            self.config.skip_connections
        )
    }
}
