//! Training objectives.
//!
//! Every loss is a pure function over flat `f64` slices returning its value
//! together with the analytic gradient for each input ([`Graded`]). The
//! training graph widens network outputs to `f64`, evaluates a loss here and
//! splices the result back in with [`crate::graph::Graph::scalar_fn`].
//!
//! L1/L2 reductions are per-element means, so values do not depend on the
//! image resolution.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A scalar and its gradient with respect to each input slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Graded {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Weights of the full objective and of the L1 term inside alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Adversarial + CAM.
    pub lambda1: f64,
    /// Cycle + identity.
    pub lambda2: f64,
    /// Alignment.
    pub lambda3: f64,
    /// Style.
    pub lambda4: f64,
    /// L1 weight inside alignment.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 5.0, lambda2: 10.0, lambda3: 10.0, lambda4: 10.0, alpha: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.alpha];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("loss weights must be finite and >= 0: {:?}", self)));
        }
        Ok(())
    }
}

/// Gaussian bandwidths of the multi-kernel MMD.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    sigmas: Vec<f64>,
}

impl KernelBank {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::InvalidConfig("kernel bank needs at least one bandwidth".into()));
        }
        if sigmas.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("bandwidths must be positive: {:?}", sigmas)));
        }
        Ok(KernelBank { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// How the bank is chosen at each training step.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelPolicy {
    /// `sigma = median_pairwise_distance * multiplier` over the joint batch.
    MedianHeuristic {
        multipliers: Vec<f64>,
    },
    Fixed(KernelBank),
}

impl Default for KernelPolicy {
    fn default() -> Self {
        KernelPolicy::MedianHeuristic { multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0] }
    }
}

impl KernelPolicy {
    pub fn bank_for(&self, a: &[f64], b: &[f64], dim: usize) -> Result<KernelBank> {
        match self {
            KernelPolicy::Fixed(bank) => Ok(bank.clone()),
            KernelPolicy::MedianHeuristic { multipliers } => {
                let m = median_pairwise_distance(a, b, dim)?;
                let m = if m > 0.0 && m.is_finite() { m } else { 1.0 };
                KernelBank::new(multipliers.iter().map(|k| k * m).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MmdEstimator {
    /// V-statistic, always >= 0.
    #[default]
    Biased,
    /// U-statistic, drops the diagonal within-set terms.
    Unbiased,
}

fn check_same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{what}: {} vs {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptySet("loss input"));
    }
    Ok(())
}

/// `mean((x - target)^2)`.
fn least_squares(x: &[f64], target: f64) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let value = x.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / n;
    let grad = x.iter().map(|v| 2.0 * (v - target) / n).collect();
    (value, grad)
}

/// Discriminator side of the least-squares adversarial loss:
/// `mean((real - 1)^2) + mean(fake^2)`.
pub fn adv_loss_d(real_scores: &[f64], fake_scores: &[f64]) -> Result<Graded> {
    check_same_len(real_scores, fake_scores, "adversarial scores")?;
    let (r, gr) = least_squares(real_scores, 1.0);
    let (f, gf) = least_squares(fake_scores, 0.0);
    Ok(Graded { value: r + f, grads: vec![gr, gf] })
}

/// Generator side: `mean((fake - 1)^2)`.
pub fn adv_loss_g(fake_scores: &[f64]) -> Result<Graded> {
    if fake_scores.is_empty() {
        return Err(Error::EmptySet("adversarial scores"));
    }
    let (value, g) = least_squares(fake_scores, 1.0);
    Ok(Graded { value, grads: vec![g] })
}

/// Least-squares loss on the CAM auxiliary classifier outputs.
pub fn cam_loss_d(real_cam: &[f64], fake_cam: &[f64]) -> Result<Graded> {
    check_same_len(real_cam, fake_cam, "cam logits")?;
    adv_loss_d(real_cam, fake_cam)
}

pub fn cam_loss_g(fake_cam: &[f64]) -> Result<Graded> {
    adv_loss_g(fake_cam)
}

fn mean_abs(a: &[f64], b: &[f64], what: &str) -> Result<Graded> {
    check_same_len(a, b, what)?;
    let n = a.len() as f64;
    let mut value = 0.0;
    let mut ga = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        value += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        ga.push(s / n);
    }
    let gb = ga.iter().map(|g| -g).collect();
    Ok(Graded { value: value / n, grads: vec![ga, gb] })
}

/// `mean |x - x_reconstructed|` after a round trip through both generators.
pub fn cycle_loss(x: &[f64], x_reconstructed: &[f64]) -> Result<Graded> {
    mean_abs(x, x_reconstructed, "cycle")
}

/// `mean |y - G(E(y))|` for an image already in the generator's output style.
pub fn identity_loss(y: &[f64], y_passed_through: &[f64]) -> Result<Graded> {
    mean_abs(y, y_passed_through, "identity")
}

/// `mean |y - y_hat|` over paired generations.
pub fn paired_l1_loss(y: &[f64], y_hat: &[f64]) -> Result<Graded> {
    mean_abs(y, y_hat, "paired l1")
}

/// `mean (feat_y - feat_y_hat)^2` between encoder bottlenecks.
pub fn constancy_loss(feat_y: &[f64], feat_y_hat: &[f64]) -> Result<Graded> {
    check_same_len(feat_y, feat_y_hat, "constancy features")?;
    let n = feat_y.len() as f64;
    let mut value = 0.0;
    let mut ga = Vec::with_capacity(feat_y.len());
    for (a, b) in feat_y.iter().zip(feat_y_hat) {
        let d = a - b;
        value += d * d;
        ga.push(2.0 * d / n);
    }
    let gb = ga.iter().map(|g| -g).collect();
    Ok(Graded { value: value / n, grads: vec![ga, gb] })
}

/// `alpha * paired_l1 + constancy`. Gradients are ordered `y, y_hat, feat_y, feat_y_hat`.
pub fn alignment_loss(y: &[f64], y_hat: &[f64], feat_y: &[f64], feat_y_hat: &[f64], weights: &LossWeights) -> Result<Graded> {
    let l1 = paired_l1_loss(y, y_hat)?;
    let c = constancy_loss(feat_y, feat_y_hat)?;
    let a = weights.alpha;
    let mut grads = Vec::with_capacity(4);
    for g in l1.grads {
        grads.push(g.into_iter().map(|v| a * v).collect());
    }
    grads.extend(c.grads);
    Ok(Graded { value: a * l1.value + c.value, grads })
}

/// `exp(-|a - b|^2 / (2 sigma^2))`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    libm::exp(-d2 / (2.0 * sigma * sigma))
}

fn split_rows(x: &[f64], dim: usize, what: &'static str) -> Result<usize> {
    if dim == 0 {
        return Err(Error::DimensionMismatch("feature dimension must be positive".into()));
    }
    if x.is_empty() {
        return Err(Error::EmptySet(what));
    }
    if !x.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch(alloc::format!("{what}: {} values is not a multiple of dim {dim}", x.len())));
    }
    Ok(x.len() / dim)
}

/// Median of the pairwise Euclidean distances within `a ∪ b`.
pub fn median_pairwise_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    let na = split_rows(a, dim, "set A")?;
    let nb = split_rows(b, dim, "set B")?;
    let row = |i: usize| if i < na { &a[i * dim..(i + 1) * dim] } else { &b[(i - na) * dim..(i - na + 1) * dim] };
    let total = na + nb;
    let mut d = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in i + 1..total {
            let s: f64 = row(i).iter().zip(row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            d.push(libm::sqrt(s));
        }
    }
    if d.is_empty() {
        return Ok(0.0);
    }
    d.sort_by(|x, y| x.total_cmp(y));
    let mid = d.len() / 2;
    Ok(if d.len() % 2 == 1 { d[mid] } else { 0.5 * (d[mid - 1] + d[mid]) })
}

/// Pairwise squared distances through the Gram expansion
/// `|x|^2 + |y|^2 - 2 x.y`, clamped at zero.
fn sq_dists(x: &[f64], nx: usize, y: &[f64], ny: usize, dim: usize) -> Vec<f64> {
    let norm = |v: &[f64], i: usize| v[i * dim..(i + 1) * dim].iter().map(|t| t * t).sum::<f64>();
    let xn: Vec<f64> = (0..nx).map(|i| norm(x, i)).collect();
    let yn: Vec<f64> = (0..ny).map(|j| norm(y, j)).collect();
    let mut out = vec![0.0; nx * ny];
    for i in 0..nx {
        let xi = &x[i * dim..(i + 1) * dim];
        for j in 0..ny {
            let yj = &y[j * dim..(j + 1) * dim];
            let dot: f64 = xi.iter().zip(yj).map(|(p, q)| p * q).sum();
            out[i * ny + j] = (xn[i] + yn[j] - 2.0 * dot).max(0.0);
        }
    }
    out
}

/// Adds `scale * sum_j k_ij (y_j - x_i) / sigma^2` into the gradient rows of `x`.
#[allow(clippy::too_many_arguments)]
fn kernel_pull(grad: &mut [f64], x: &[f64], nx: usize, y: &[f64], ny: usize, dim: usize, k: &[f64], sigma2: f64, scale: f64) {
    for i in 0..nx {
        let xi = &x[i * dim..(i + 1) * dim];
        let gi = &mut grad[i * dim..(i + 1) * dim];
        for j in 0..ny {
            let w = scale * k[i * ny + j] / sigma2;
            if w == 0.0 {
                continue;
            }
            let yj = &y[j * dim..(j + 1) * dim];
            for d in 0..dim {
                gi[d] += w * (yj[d] - xi[d]);
            }
        }
    }
}

/// Multi-kernel squared MMD between two sets of `dim`-vectors stored row-major,
/// averaged over the bank's Gaussian bandwidths.
pub fn mk_mmd_sq(a: &[f64], b: &[f64], dim: usize, bank: &KernelBank) -> Result<Graded> {
    mk_mmd_sq_with(a, b, dim, bank, MmdEstimator::Biased)
}

pub fn mk_mmd_sq_with(a: &[f64], b: &[f64], dim: usize, bank: &KernelBank, estimator: MmdEstimator) -> Result<Graded> {
    let na = split_rows(a, dim, "set A")?;
    let nb = split_rows(b, dim, "set B")?;
    if estimator == MmdEstimator::Unbiased && (na < 2 || nb < 2) {
        return Err(Error::EmptySet("unbiased MMD needs at least two vectors per set"));
    }
    let daa = sq_dists(a, na, a, na, dim);
    let dbb = sq_dists(b, nb, b, nb, dim);
    let dab = sq_dists(a, na, b, nb, dim);
    let (caa, cbb) = match estimator {
        MmdEstimator::Biased => (1.0 / (na * na) as f64, 1.0 / (nb * nb) as f64),
        MmdEstimator::Unbiased => (1.0 / (na * (na - 1)) as f64, 1.0 / (nb * (nb - 1)) as f64),
    };
    let cab = 1.0 / (na * nb) as f64;
    let s = bank.sigmas().len() as f64;
    let mut value = 0.0;
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for &sigma in bank.sigmas() {
        let s2 = sigma * sigma;
        let kern = |d: &[f64]| d.iter().map(|v| libm::exp(-v / (2.0 * s2))).collect::<Vec<f64>>();
        let mut kaa = kern(&daa);
        let mut kbb = kern(&dbb);
        let kab = kern(&dab);
        if estimator == MmdEstimator::Unbiased {
            (0..na).for_each(|i| kaa[i * na + i] = 0.0);
            (0..nb).for_each(|i| kbb[i * nb + i] = 0.0);
        }
        let t_aa: f64 = kaa.iter().sum::<f64>() * caa;
        let t_bb: f64 = kbb.iter().sum::<f64>() * cbb;
        // Sorted so that swapping A and B sums the same values in the same order.
        let mut cross = kab.clone();
        cross.sort_unstable_by(|x, y| x.total_cmp(y));
        let t_ab: f64 = cross.iter().sum::<f64>() * cab;
        value += (t_aa + t_bb - 2.0 * t_ab) / s;

        kernel_pull(&mut ga, a, na, a, na, dim, &kaa, s2, 2.0 * caa / s);
        kernel_pull(&mut ga, a, na, b, nb, dim, &kab, s2, -2.0 * cab / s);
        kernel_pull(&mut gb, b, nb, b, nb, dim, &kbb, s2, 2.0 * cbb / s);
        let kba: Vec<f64> = (0..nb * na).map(|idx| kab[(idx % na) * nb + idx / na]).collect();
        kernel_pull(&mut gb, b, nb, a, na, dim, &kba, s2, -2.0 * cab / s);
    }
    if estimator == MmdEstimator::Biased {
        // Exact arithmetic gives >= 0; clamp the last-ulp cancellation.
        value = value.max(0.0);
    }
    Ok(Graded { value, grads: vec![ga, gb] })
}

/// Squared MMD between flattened bottleneck features of real target glyphs
/// and of generated ones.
pub fn style_loss(feat_real: &[f64], feat_fake: &[f64], dim: usize, bank: &KernelBank, estimator: MmdEstimator) -> Result<Graded> {
    mk_mmd_sq_with(feat_real, feat_fake, dim, bank, estimator)
}

/// Raw loss values of one translation direction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DirectionLosses {
    pub adv: f64,
    pub cam: f64,
    pub cycle: f64,
    pub identity: f64,
    pub l1: f64,
    pub constancy: f64,
    pub style: f64,
}

impl DirectionLosses {
    /// Groups the raw values into the four weighted terms of the objective.
    pub fn terms(&self, weights: &LossWeights) -> ObjectiveTerms {
        ObjectiveTerms {
            gan: self.adv + self.cam,
            consistency: self.cycle + self.identity,
            alignment: weights.alpha * self.l1 + self.constancy,
            style: self.style,
        }
    }
}

/// The four terms weighted by lambda1..lambda4.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub gan: f64,
    pub consistency: f64,
    pub alignment: f64,
    pub style: f64,
}

impl ObjectiveTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.gan + w.lambda2 * self.consistency + w.lambda3 * self.alignment + w.lambda4 * self.style
    }
}

/// Full objective summed over both directions.
pub fn total_losses(s2t: &ObjectiveTerms, t2s: &ObjectiveTerms, weights: &LossWeights) -> f64 {
    s2t.weighted(weights) + t2s.weighted(weights)
}

/// Per-step generator objective, both directions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub s2t: DirectionLosses,
    pub t2s: DirectionLosses,
    pub s2t_total: f64,
    pub t2s_total: f64,
    pub total: f64,
}

impl LossReport {
    pub fn assemble(s2t: DirectionLosses, t2s: DirectionLosses, weights: &LossWeights) -> Self {
        let a = s2t.terms(weights);
        let b = t2s.terms(weights);
        LossReport { s2t, t2s, s2t_total: a.weighted(weights), t2s_total: b.weighted(weights), total: total_losses(&a, &b, weights) }
    }

    pub fn is_finite(&self) -> bool {
        let d = |l: &DirectionLosses| [l.adv, l.cam, l.cycle, l.identity, l.l1, l.constancy, l.style].iter().all(|v| v.is_finite());
        d(&self.s2t) && d(&self.t2s) && self.total.is_finite()
    }
}
