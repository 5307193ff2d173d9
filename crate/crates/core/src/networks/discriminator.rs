use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{gaussian, LayerParams, INIT_STD, KERNEL, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{NetId, ParamKind, ParamSet};
use crate::rng::{self, Domain};
use crate::tensor::{Shape, Tensor};

/// `(channels, stride)` of the global discriminator body.
pub const GLOBAL_BODY: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 2), (512, 1), (512, 1)];
/// Shallower body of the optional local discriminator.
pub const LOCAL_BODY: [(usize, usize); 3] = [(64, 2), (128, 2), (256, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub width_divisor: usize,
    /// Adds a second, shallower discriminator whose losses are summed with the global one.
    pub local_global: bool,
}

impl DiscriminatorConfig {
    pub fn new(resolution: usize) -> Self {
        DiscriminatorConfig { resolution, width_divisor: 1, local_global: false }
    }
}

/// CAM-weighted feature maps of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `w^k * E^k` for every feature map `k`.
    pub per_map: Tensor,
    /// The per-map weights `w^k` used above.
    pub weights: Vec<f32>,
}

/// Graph handles of a discriminator pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    /// Patch scores of every discriminator (global first).
    pub patches: Vec<Var>,
    /// CAM classifier probabilities of every discriminator (global first).
    pub cams: Vec<Var>,
    /// Attention-weighted features of the global discriminator.
    pub per_map: Var,
    /// Encoded features `E` of the global discriminator.
    pub features: Var,
}

/// Materialized global-discriminator outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscResult {
    pub patch_scores: Tensor,
    pub cam_logit: Vec<f32>,
    pub attention: AttentionMap,
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct Body {
    params: ParamSet,
    layers: Vec<(LayerParams, usize)>,
    cam_avg: usize,
    cam_max: usize,
    head: LayerParams,
}

impl Body {
    fn init(net: NetId, layout: &[(usize, usize)], divisor: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, Domain::Init, net.0 as u64);
        let mut params = ParamSet::new(net);
        let mut layers = Vec::with_capacity(layout.len());
        let mut in_ch = 3;
        for (i, &(c, stride)) in layout.iter().enumerate() {
            let c = (c / divisor).max(1);
            let w = gaussian(Shape::new(c, in_ch, KERNEL, KERNEL), INIT_STD, &mut rng);
            let weight = params.push(format!("feat.l{}.weight", i + 1), w, ParamKind::Trainable, i + 1);
            let bias = params.push(format!("feat.l{}.bias", i + 1), super::channel_vec(c, 0.0), ParamKind::Trainable, i + 1);
            layers.push((LayerParams { weight, bias: Some(bias), bn: None }, stride));
            in_ch = c;
        }
        let n = layout.len() + 1;
        let cam_avg = params.push("cam.avg", gaussian(Shape::new(1, in_ch, 1, 1), INIT_STD, &mut rng), ParamKind::Trainable, n);
        let cam_max = params.push("cam.max", gaussian(Shape::new(1, in_ch, 1, 1), INIT_STD, &mut rng), ParamKind::Trainable, n);
        let hw = gaussian(Shape::new(1, in_ch, KERNEL, KERNEL), INIT_STD, &mut rng);
        let weight = params.push("head.weight", hw, ParamKind::Trainable, n + 1);
        let bias = params.push("head.bias", super::channel_vec(1, 0.0), ParamKind::Trainable, n + 1);
        Body { params, layers, cam_avg, cam_max, head: LayerParams { weight, bias: Some(bias), bn: None } }
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<(Var, Var, Var, Var)> {
        let mut h = x;
        for (idx, stride) in &self.layers {
            let w = g.param(&self.params, idx.weight);
            let b = idx.bias.map(|b| g.param(&self.params, b));
            h = g.conv2d(h, w, b, *stride, KERNEL / 2)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let wa = g.param(&self.params, self.cam_avg);
        let wm = g.param(&self.params, self.cam_max);
        let (cam, per_map) = cam_head(g, h, wa, wm)?;
        let hw = g.param(&self.params, self.head.weight);
        let hb = self.head.bias.map(|b| g.param(&self.params, b));
        let patch = g.conv2d(per_map, hw, hb, 1, KERNEL / 2)?;
        Ok((patch, cam, per_map, h))
    }
}

/// CAM auxiliary classifier over encoded features `E`:
/// `sigmoid(sum_k w_avg^k avg(E^k) + sum_k w_max^k max(E^k))`, and the
/// attention maps `w^k * E^k` with `w = (w_avg + w_max) / 2`.
pub(crate) fn cam_head(g: &mut Graph<'_>, feats: Var, w_avg: Var, w_max: Var) -> Result<(Var, Var)> {
    let gap = g.global_avg_pool(feats);
    let gmp = g.global_max_pool(feats);
    let la = g.channel_dot(gap, w_avg)?;
    let lm = g.channel_dot(gmp, w_max)?;
    let logit = g.add(la, lm)?;
    let cam = g.sigmoid(logit);
    let wsum = g.add(w_avg, w_max)?;
    let w = g.scale(wsum, 0.5);
    let per_map = g.channel_scale(feats, w)?;
    Ok((cam, per_map))
}

/// Tensor-level CAM head, for inspecting the classifier on given features.
pub fn cam_attention(features: &Tensor, w_avg: &[f32], w_max: &[f32]) -> Result<(Vec<f32>, AttentionMap)> {
    let c = features.shape().c;
    if w_avg.len() != c || w_max.len() != c {
        return Err(Error::ShapeMismatch(format!("{} / {} CAM weights for {c} feature maps", w_avg.len(), w_max.len())));
    }
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let wa = g.input(Tensor::from_vec(Shape::new(1, c, 1, 1), w_avg.to_vec())?);
    let wm = g.input(Tensor::from_vec(Shape::new(1, c, 1, 1), w_max.to_vec())?);
    let (cam, per_map) = cam_head(&mut g, f, wa, wm)?;
    let weights = w_avg.iter().zip(w_max).map(|(a, m)| (a + m) * 0.5).collect();
    Ok((g.value(cam).data().to_vec(), AttentionMap { per_map: g.value(per_map).clone(), weights }))
}

/// Discriminator `D = C_D(a_D(E_D(x)))` with its CAM classifier. It only sees
/// the image being judged, never the conditioning input.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    global: Body,
    local: Option<Body>,
}

impl Discriminator {
    pub fn init(net: NetId, local_net: NetId, config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.width_divisor == 0 {
            return Err(Error::InvalidConfig("width divisor must be positive".into()));
        }
        if config.resolution < 8 {
            return Err(Error::BadResolution(config.resolution));
        }
        let global = Body::init(net, &GLOBAL_BODY, config.width_divisor, seed);
        let local = config.local_global.then(|| Body::init(local_net, &LOCAL_BODY, config.width_divisor, seed));
        Ok(Discriminator { config, global, local })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Global parameters first, then the local ones if present.
    pub fn param_sets(&self) -> Vec<&ParamSet> {
        let mut v = vec![&self.global.params];
        if let Some(l) = &self.local {
            v.push(&l.params);
        }
        v
    }

    pub fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut v = vec![&mut self.global.params];
        if let Some(l) = &mut self.local {
            v.push(&mut l.params);
        }
        v
    }

    pub fn nets(&self) -> Vec<NetId> {
        self.param_sets().iter().map(|p| p.net()).collect()
    }

    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<DiscOutput> {
        let s = g.shape(x);
        let r = self.config.resolution;
        if s.c != 3 || s.h != r || s.w != r {
            return Err(Error::ShapeMismatch(format!("discriminator expects Nx3x{r}x{r}, got {s}")));
        }
        let (patch, cam, per_map, features) = self.global.forward(g, x)?;
        let mut out = DiscOutput { patches: vec![patch], cams: vec![cam], per_map, features };
        if let Some(local) = &self.local {
            let (p, c, _, _) = local.forward(g, x)?;
            out.patches.push(p);
            out.cams.push(c);
        }
        Ok(out)
    }

    pub fn forward(&self, img: &Tensor) -> Result<DiscResult> {
        let mut g = Graph::new();
        let x = g.input(img.clone());
        let out = self.forward_graph(&mut g, x)?;
        let wa = self.global.params.tensor(self.global.cam_avg).data();
        let wm = self.global.params.tensor(self.global.cam_max).data();
        Ok(DiscResult {
            patch_scores: g.value(out.patches[0]).clone(),
            cam_logit: g.value(out.cams[0]).data().to_vec(),
            attention: AttentionMap {
                per_map: g.value(out.per_map).clone(),
                weights: wa.iter().zip(wm).map(|(a, m)| (a + m) * 0.5).collect(),
            },
            features: g.value(out.features).clone(),
        })
    }

    /// Overwrites the global CAM weights (both pooling paths).
    pub fn set_cam_weights(&mut self, w_avg: &[f32], w_max: &[f32]) -> Result<()> {
        let body = &mut self.global;
        for (idx, src) in [(body.cam_avg, w_avg), (body.cam_max, w_max)] {
            let t = body.params.tensor_mut(idx);
            if t.len() != src.len() {
                return Err(Error::ShapeMismatch(format!("{} CAM weights for {} maps", src.len(), t.len())));
            }
            t.data_mut().copy_from_slice(src);
        }
        Ok(())
    }

    /// Number of encoded feature maps of the global body.
    pub fn feature_maps(&self) -> usize {
        self.global.params.tensor(self.global.cam_avg).len()
    }
}

/// Single-channel attention image in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub size: usize,
    pub values: Vec<f32>,
    /// The map was constant, so the output is all zeros.
    pub degenerate: bool,
}

/// Channel-sum of one item's attention maps, bilinearly upsampled to
/// `resolution x resolution` and min-max normalized.
pub fn export_attention_heatmap(attention: &AttentionMap, item: usize, resolution: usize) -> Result<Heatmap> {
    let s = attention.per_map.shape();
    if item >= s.n {
        return Err(Error::ShapeMismatch(format!("item {item} of batch {}", s.n)));
    }
    let plane = s.plane();
    let data = attention.per_map.item(item);
    let mut sum = vec![0.0f64; plane];
    for c in 0..s.c {
        for (acc, v) in sum.iter_mut().zip(&data[c * plane..(c + 1) * plane]) {
            *acc += *v as f64;
        }
    }
    let up = bilinear(&sum, s.h, s.w, resolution);
    let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi.partial_cmp(&lo) != Some(core::cmp::Ordering::Greater) {
        return Ok(Heatmap { size: resolution, values: vec![0.0; resolution * resolution], degenerate: true });
    }
    let values = up.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect();
    Ok(Heatmap { size: resolution, values, degenerate: false })
}

/// Half-pixel-centred bilinear resize with edge clamping.
fn bilinear(src: &[f64], h: usize, w: usize, out: usize) -> Vec<f64> {
    let mut dst = vec![0.0; out * out];
    let sy = h as f64 / out as f64;
    let sx = w as f64 / out as f64;
    for oy in 0..out {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = libm::floor(fy) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = libm::floor(fx) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            dst[oy * out + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    dst
}
