//! Glyph metrics: ink-mask IOU, recognizer top-1 accuracy and the Fréchet
//! distance between Gaussian fits of recognizer features.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::glyph::{binarize, GlyphImage, Mask, ShotSplit};
use crate::graph::{Graph, Mode};
use crate::losses::Graded;
use crate::networks::{apply_bn_observations, recalibrate_bn, Generator, Recognizer, RecognizerConfig};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

/// Tolerance below which a negative eigenvalue is treated as rounding noise.
pub const PSD_TOLERANCE: f64 = -1e-6;
/// Ridge added to covariances fitted from fewer than `dim + 1` samples.
pub const COV_RIDGE: f64 = 1e-6;

fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.size != b.size {
        return Err(Error::ShapeMismatch(format!("masks {}x{0} and {}x{1}", a.size, b.size)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Intersection over union of the binarized ink masks; 1.0 when both are blank.
pub fn iou(generated: &GlyphImage, truth: &GlyphImage, threshold: f32) -> Result<f64> {
    if generated.size() != truth.size() {
        return Err(Error::ShapeMismatch(format!("glyphs of size {} and {}", generated.size(), truth.size())));
    }
    mask_iou(&binarize(generated, threshold), &binarize(truth, threshold))
}

fn macro_mean(per_style: &BTreeMap<u32, f64>) -> f64 {
    if per_style.is_empty() {
        0.0
    } else {
        per_style.values().sum::<f64>() / per_style.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IouReport {
    pub per_style: BTreeMap<u32, f64>,
    pub mean: f64,
    pub empty: bool,
}

impl IouReport {
    /// Per-style mean of `(style, iou)` observations.
    pub fn from_values(values: &[(u32, f64)]) -> Self {
        let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for &(s, v) in values {
            let e = acc.entry(s).or_default();
            e.0 += v;
            e.1 += 1;
        }
        let per_style: BTreeMap<u32, f64> = acc.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect();
        IouReport { mean: macro_mean(&per_style), empty: per_style.is_empty(), per_style }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyReport {
    pub per_style: BTreeMap<u32, f64>,
    pub mean: f64,
    /// Fingerprint of the recognizer weights that produced the report.
    pub recognizer: String,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FidReport {
    pub per_style: BTreeMap<u32, f64>,
    /// Styles whose covariance needed the ridge.
    pub regularized: BTreeMap<u32, bool>,
    pub extractor: String,
    pub empty: bool,
}

/// Class index of every image, looked up by codepoint.
fn labels(images: &[&GlyphImage], classes: &[char]) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|g| {
            classes
                .iter()
                .position(|&c| c == g.codepoint)
                .ok_or_else(|| Error::EmptyClass(format!("codepoint {} is not a recognizer class", g.codepoint)))
        })
        .collect()
}

fn stack_images(images: &[&GlyphImage]) -> Result<Tensor> {
    let t: Vec<&Tensor> = images.iter().map(|g| g.pixels()).collect();
    Tensor::stack(&t)
}

const EVAL_CHUNK: usize = 32;

/// Fraction of images (per style) whose arg-max class is their own codepoint.
pub fn top1_accuracy(recognizer: &Recognizer, images: &[GlyphImage], classes: &[char]) -> Result<AccuracyReport> {
    if classes.len() != recognizer.config().classes {
        return Err(Error::DimensionMismatch(format!(
            "{} class labels for a {}-way recognizer",
            classes.len(),
            recognizer.config().classes
        )));
    }
    let refs: Vec<&GlyphImage> = images.iter().collect();
    let truth = labels(&refs, classes)?;
    let mut pred = Vec::with_capacity(images.len());
    for chunk in refs.chunks(EVAL_CHUNK) {
        pred.extend(recognizer.predict(&stack_images(chunk)?)?);
    }
    let mut acc: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for ((g, t), p) in images.iter().zip(&truth).zip(&pred) {
        let e = acc.entry(g.style_id).or_default();
        e.0 += (t == p) as usize;
        e.1 += 1;
    }
    let per_style: BTreeMap<u32, f64> = acc.into_iter().map(|(s, (c, n))| (s, c as f64 / n as f64)).collect();
    Ok(AccuracyReport {
        mean: macro_mean(&per_style),
        empty: per_style.is_empty(),
        per_style,
        recognizer: format!("{:016x}", recognizer.params().fingerprint()),
    })
}

fn symmetric(m: &[f64], d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(d, d, m);
    (&a + a.transpose()) * 0.5
}

fn checked_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let e = SymmetricEigen::new(m);
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(&neg) = e.eigenvalues.iter().find(|&&v| v < PSD_TOLERANCE * scale) {
        return Err(Error::NonPsd(neg));
    }
    Ok(e)
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))` for row-major `d x d`
/// covariances. The trace of the square root is taken from the eigenvalues
/// of the symmetric product `S1^(1/2) S2 S1^(1/2)`, which match those of `S1 S2`.
pub fn frechet_distance(mu1: &[f64], cov1: &[f64], mu2: &[f64], cov2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.len() != d * d || cov2.len() != d * d {
        return Err(Error::DimensionMismatch(format!("means {} / {}, covariances {} / {}", d, mu2.len(), cov1.len(), cov2.len())));
    }
    if d == 0 {
        return Ok(0.0);
    }
    let s1 = symmetric(cov1, d);
    let s2 = symmetric(cov2, d);
    let e1 = checked_eigen(s1.clone())?;
    checked_eigen(s2.clone())?;
    let roots = e1.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    let sqrt1 = &e1.eigenvectors * DMatrix::from_diagonal(&roots) * e1.eigenvectors.transpose();
    let inner = &sqrt1 * &s2 * &sqrt1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let e = checked_eigen(inner)?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| libm::sqrt(v.max(0.0))).sum();
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Sample mean and unbiased covariance of `n x dim` row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub regularized: bool,
}

pub fn fit_gaussian(features: &[f64], dim: usize) -> Result<GaussianFit> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch(format!("{} values for dimension {dim}", features.len())));
    }
    let n = features.len() / dim;
    if n == 0 {
        return Err(Error::EmptySet("feature set"));
    }
    let mut mean = vec![0.0; dim];
    for row in features.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    if n > 1 {
        for row in features.chunks(dim) {
            for i in 0..dim {
                let di = row[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1) as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
    }
    let regularized = n < dim + 1;
    if regularized {
        for i in 0..dim {
            cov[i * dim + i] += COV_RIDGE;
        }
    }
    Ok(GaussianFit { mean, cov, regularized })
}

/// Distance between Gaussian fits of two feature sets; the flag reports a ridge.
pub fn fid_from_features(real: &[f64], fake: &[f64], dim: usize) -> Result<(f64, bool)> {
    let a = fit_gaussian(real, dim)?;
    let b = fit_gaussian(fake, dim)?;
    Ok((frechet_distance(&a.mean, &a.cov, &b.mean, &b.cov)?, a.regularized || b.regularized))
}

/// Maps image batches to feature rows.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn id(&self) -> String;
    fn embed(&self, batch: &Tensor) -> Result<Vec<f64>>;
}

impl FeatureExtractor for Recognizer {
    fn dim(&self) -> usize {
        self.config().feature_dim()
    }

    fn id(&self) -> String {
        format!("recognizer-penultimate-{}d-{:016x}", self.dim(), self.params().fingerprint())
    }

    fn embed(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let (_, f) = self.infer(batch)?;
        Ok(f.data().iter().map(|&v| v as f64).collect())
    }
}

fn embed_all<E: FeatureExtractor + ?Sized>(extractor: &E, images: &[&Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * extractor.dim());
    for chunk in images.chunks(EVAL_CHUNK) {
        out.extend(extractor.embed(&Tensor::stack(chunk)?)?);
    }
    Ok(out)
}

/// Embeds both image sets and compares their Gaussian fits.
pub fn fid_over_sets<E: FeatureExtractor + ?Sized>(real: &[&Tensor], fake: &[&Tensor], extractor: &E) -> Result<(f64, bool)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptySet("image set"));
    }
    fid_from_features(&embed_all(extractor, real)?, &embed_all(extractor, fake)?, extractor.dim())
}

/// Weighted mean softmax cross-entropy over rows of `logits`.
pub fn cross_entropy(logits: &[f64], targets: &[usize], weights: &[f64], classes: usize) -> Result<Graded> {
    if classes == 0 || logits.len() != targets.len() * classes || weights.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logits, {} targets, {} weights, {classes} classes",
            logits.len(),
            targets.len(),
            weights.len()
        )));
    }
    let total_w: f64 = weights.iter().sum();
    if targets.is_empty() || total_w <= 0.0 {
        return Err(Error::EmptyBatch);
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, row) in logits.chunks(classes).enumerate() {
        let w = weights[i] / total_w;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
        let lse = max + libm::log(z);
        value += w * (lse - row[targets[i]]);
        for (k, v) in row.iter().enumerate() {
            grad[i * classes + k] = w * (libm::exp(v - lse) - (k == targets[i]) as u8 as f64);
        }
    }
    Ok(Graded { value, grads: vec![grad] })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognizerTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub base_width: usize,
}

impl Default for RecognizerTraining {
    fn default() -> Self {
        RecognizerTraining { epochs: 30, lr: 1e-3, batch_size: 32, base_width: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRecognizer {
    pub recognizer: Recognizer,
    pub classes: Vec<char>,
    /// Eval-mode accuracy on the training images after the final epoch.
    pub train_accuracy: f64,
}

/// Cross-entropy training on ground-truth glyphs of every style. Each style
/// carries equal total weight regardless of how many glyphs it has.
pub fn train_recognizer(images: &[GlyphImage], classes: &[char], recipe: RecognizerTraining, seed: u64) -> Result<TrainedRecognizer> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(Error::EmptyClass(format!("recognizer needs at least 2 classes, got {}", sorted.len())));
    }
    if sorted.len() != classes.len() {
        return Err(Error::InvalidConfig("duplicate recognizer classes".into()));
    }
    let refs: Vec<&GlyphImage> = images.iter().collect();
    let y = labels(&refs, classes)?;
    let mut seen = vec![false; classes.len()];
    for &c in &y {
        seen[c] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyClass(format!("no samples for class {}", classes[missing])));
    }
    if recipe.batch_size < 2 || recipe.epochs == 0 {
        return Err(Error::InvalidConfig(format!("bad recognizer recipe {recipe:?}")));
    }
    let resolution = images[0].size();
    let mut per_style: BTreeMap<u32, usize> = BTreeMap::new();
    for g in images {
        *per_style.entry(g.style_id).or_default() += 1;
    }
    let weight: Vec<f64> = images.iter().map(|g| 1.0 / per_style[&g.style_id] as f64).collect();

    let config = RecognizerConfig { classes: classes.len(), resolution, base_width: recipe.base_width };
    let mut rec = Recognizer::init(config, seed)?;
    let mut opt = OptimizerState::new(AdamConfig { beta1: 0.9, ..AdamConfig::default() }, recipe.lr);
    opt.register(rec.params());
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng::derive(seed, Domain::Recognizer, epoch as u64));
        for chunk in order.chunks(recipe.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&GlyphImage> = chunk.iter().map(|&i| &images[i]).collect();
            let x = stack_images(&batch)?;
            let t: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weight[i]).collect();
            let mut g = Graph::new();
            g.train_net(rec.params().net());
            let xv = g.input(x);
            let (logits, _) = rec.forward_graph(&mut g, xv, Mode::Train)?;
            let vals = g.values_f64(&[logits]);
            let ce = cross_entropy(&vals[0], &t, &w, classes.len())?;
            if !ce.value.is_finite() {
                return Err(Error::NonFiniteLoss { what: "recognizer cross-entropy".into(), step: opt.step });
            }
            let root = g.scalar_fn(&[logits], ce.value, ce.grads)?;
            let grads = g.backward(root).into_params();
            let bn = g.take_bn_observations();
            drop(g);
            opt.step(&mut [rec.params_mut()], &grads)?;
            apply_bn_observations(rec.params_mut(), &bn);
        }
    }
    // Exact population statistics for eval mode.
    let mut passes = Vec::new();
    for chunk in refs.chunks(EVAL_CHUNK) {
        if chunk.len() < 2 {
            continue;
        }
        let mut g = Graph::new();
        let xv = g.input(stack_images(chunk)?);
        rec.forward_graph(&mut g, xv, Mode::Train)?;
        passes.push(g.take_bn_observations());
    }
    recalibrate_bn(rec.params_mut(), &passes);
    let mut hits = 0usize;
    for (chunk, truth) in refs.chunks(EVAL_CHUNK).zip(y.chunks(EVAL_CHUNK)) {
        let p = rec.predict(&stack_images(chunk)?)?;
        hits += p.iter().zip(truth).filter(|(a, b)| a == b).count();
    }
    let train_accuracy = hits as f64 / images.len() as f64;
    Ok(TrainedRecognizer { recognizer: rec, classes: classes.to_vec(), train_accuracy })
}

/// Generated test glyphs of one style, in test-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleOutputs {
    pub style_id: u32,
    pub generated: Vec<GlyphImage>,
}

/// Eval-mode translation of every test source glyph of `split`.
pub fn generate_test_set(generator: &Generator, split: &ShotSplit) -> Result<StyleOutputs> {
    let mut generated = Vec::with_capacity(split.test.len());
    for chunk in split.test.chunks(EVAL_CHUNK) {
        let src: Vec<&Tensor> = chunk.iter().map(|p| p.source.pixels()).collect();
        let out = generator.generate(&Tensor::stack(&src)?)?;
        for (i, p) in chunk.iter().enumerate() {
            generated.push(GlyphImage::new(out.slice_item(i), p.codepoint(), split.style_id)?);
        }
    }
    Ok(StyleOutputs { style_id: split.style_id, generated })
}

/// All metrics for a set of styles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricSuite {
    pub iou: IouReport,
    pub accuracy: Option<AccuracyReport>,
    pub fid: Option<FidReport>,
}

/// IOU against the ground truth and, given a recognizer, top-1 accuracy and
/// Fréchet distance over its features.
pub fn score_outputs(
    splits: &[&ShotSplit],
    outputs: &[StyleOutputs],
    threshold: f32,
    recognizer: Option<(&Recognizer, &[char])>,
) -> Result<MetricSuite> {
    if splits.len() != outputs.len() {
        return Err(Error::DimensionMismatch(format!("{} splits, {} output sets", splits.len(), outputs.len())));
    }
    let mut ious = Vec::new();
    for (split, out) in splits.iter().zip(outputs) {
        if split.test.len() != out.generated.len() {
            return Err(Error::DimensionMismatch(format!("style {}: outputs do not match test set", split.style_id)));
        }
        for (p, g) in split.test.iter().zip(&out.generated) {
            ious.push((split.style_id, iou(g, &p.target, threshold)?));
        }
    }
    let mut suite = MetricSuite { iou: IouReport::from_values(&ious), ..Default::default() };
    if let Some((rec, classes)) = recognizer {
        let all: Vec<GlyphImage> = outputs.iter().flat_map(|o| o.generated.iter().cloned()).collect();
        suite.accuracy = Some(top1_accuracy(rec, &all, classes)?);
        let mut fid = FidReport { extractor: rec.id(), ..Default::default() };
        for (split, out) in splits.iter().zip(outputs) {
            if out.generated.is_empty() {
                continue;
            }
            let real: Vec<&Tensor> = split.test.iter().map(|p| p.target.pixels()).collect();
            let fake: Vec<&Tensor> = out.generated.iter().map(|g| g.pixels()).collect();
            let (d, reg) = fid_over_sets(&real, &fake, rec)?;
            fid.per_style.insert(split.style_id, d);
            fid.regularized.insert(split.style_id, reg);
        }
        fid.empty = fid.per_style.is_empty();
        suite.fid = Some(fid);
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn glyph_with_ink(size: usize, ink: &[usize]) -> GlyphImage {
        let mut t = Tensor::full(Shape::new(1, 3, size, size), 1.0);
        for &i in ink {
            for c in 0..3 {
                t.data_mut()[c * size * size + i] = -1.0;
            }
        }
        GlyphImage::new(t, 'a', 1).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = glyph_with_ink(4, &[0, 1]);
        let b = glyph_with_ink(4, &[1, 2]);
        let c = glyph_with_ink(4, &[5, 6]);
        assert_eq!(iou(&a, &a, 0.0).unwrap(), 1.0);
        assert_eq!(iou(&a, &c, 0.0).unwrap(), 0.0);
        assert!((iou(&a, &b, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let blank = glyph_with_ink(4, &[]);
        assert_eq!(iou(&blank, &blank, 0.0).unwrap(), 1.0);
        assert!(matches!(iou(&a, &glyph_with_ink(8, &[]), 0.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn frechet_cases() {
        assert!((frechet_distance(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap() - 1.0).abs() < 1e-8);
        let d = [1.0, 0.0, 0.0, 4.0];
        assert!(frechet_distance(&[2.0, 3.0], &d, &[2.0, 3.0], &d).unwrap().abs() < 1e-8);
        // 1-d closed form (s1 - s2)^2
        let v = frechet_distance(&[0.0], &[4.0], &[0.0], &[9.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        assert!(matches!(frechet_distance(&[0.0], &[1.0], &[0.0, 1.0], &[1.0; 4]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(frechet_distance(&[0.0], &[-1.0], &[0.0], &[1.0]), Err(Error::NonPsd(_))));
    }

    #[test]
    fn gaussian_fit_and_ridge() {
        let f = fit_gaussian(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2).unwrap();
        assert_eq!(f.mean, vec![3.0, 4.0]);
        assert_eq!(f.cov, vec![4.0, 4.0, 4.0, 4.0]);
        assert!(!f.regularized);
        let f = fit_gaussian(&[1.0, 2.0], 2).unwrap();
        assert!(f.regularized);
        assert_eq!(f.cov, vec![COV_RIDGE, 0.0, 0.0, COV_RIDGE]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let g = cross_entropy(&[0.0, 0.0, 1.0, 1.0], &[0, 1], &[1.0, 1.0], 2).unwrap();
        assert!((g.value - libm::log(2.0)).abs() < 1e-12);
        assert!((g.grads[0][0] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn iou_report_means() {
        let r = IouReport::from_values(&[(1, 1.0), (1, 0.0), (2, 1.0)]);
        assert_eq!(r.per_style[&1], 0.5);
        assert_eq!(r.mean, 0.75);
        assert!(IouReport::from_values(&[]).empty);
    }
}
