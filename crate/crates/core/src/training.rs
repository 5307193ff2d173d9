//! Alternating adversarial training.
//!
//! Each step first updates both discriminators with the generators frozen,
//! then all four encoder/decoder halves with the discriminators frozen.
//! Steps alternate between paired batches `(x_p, y)` and unpaired batches
//! `(x_r, y)`; the target glyphs `y` of an unpaired batch are drawn from the
//! few-shot training set independently of `x_r`.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::glyph::{ShotSplit, UnpairedPool};
use crate::graph::{Graph, Mode, Var};
use crate::losses::{self, DirectionLosses, Graded, KernelPolicy, LossReport, LossWeights, MmdEstimator};
use crate::networks::{
    apply_bn_observations, Direction, DiscOutput, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, DISC_S, DISC_S_LOCAL,
    DISC_T, DISC_T_LOCAL, GEN_S, GEN_T,
};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::ParamSet;
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub resolution: usize,
    pub shots: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub kernel_policy: KernelPolicy,
    pub estimator: MmdEstimator,
    /// Channel divisor applied to generators and discriminators.
    pub width_divisor: usize,
    pub skip_connections: bool,
    pub local_global: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1500,
            lr0: 3e-4,
            halve_every: 500,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            resolution: 256,
            shots: 100,
            seed: 0,
            weights: LossWeights::default(),
            kernel_policy: KernelPolicy::default(),
            estimator: MmdEstimator::Biased,
            width_divisor: 1,
            skip_connections: true,
            local_global: false,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 && self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.batch_size == 0 || self.resolution == 0 {
            return bad("batch_size and resolution must be positive");
        }
        if self.halve_every == 0 {
            return bad("halve_every must be positive");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        self.weights.validate()?;
        self.generator_config().validate()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig { resolution: self.resolution, width_divisor: self.width_divisor, skip_connections: self.skip_connections }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig { resolution: self.resolution, width_divisor: self.width_divisor, local_global: self.local_global }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    /// FNV-1a of the debug rendering; identifies a configuration in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let s = format!("{self:?}");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in s.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let halvings = epoch / config.halve_every.max(1);
    let mut lr = config.lr0;
    for _ in 0..halvings.min(2048) {
        lr *= 0.5;
    }
    lr
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Paired,
    Unpaired,
}

/// Indices making up one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub kind: BatchKind,
    pub epoch: usize,
    pub index: usize,
    /// Training-set indices for paired batches, pool indices for unpaired ones.
    pub sources: Vec<usize>,
    /// Training-set indices of the target glyphs.
    pub targets: Vec<usize>,
}

/// Strictly alternating paired/unpaired batches, reshuffled every epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchScheduler {
    n_train: usize,
    n_pool: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchScheduler {
    pub fn new(n_train: usize, n_pool: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_train == 0 || batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if n_pool == 0 {
            return Err(Error::EmptyPool);
        }
        Ok(BatchScheduler { n_train, n_pool, batch_size, seed })
    }

    /// Paired batches per epoch; unpaired batches match this count.
    pub fn paired_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.batch_size)
    }

    pub fn steps_per_epoch(&self) -> usize {
        2 * self.paired_per_epoch()
    }

    fn permutation(&self, n: usize, epoch: usize, lane: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        let mut r = rng::derive(self.seed, Domain::Schedule, (epoch as u64) * 4 + lane);
        p.shuffle(&mut r);
        p
    }

    /// Batches of one epoch. Short tails wrap around the shuffled order, so
    /// every batch is full.
    pub fn epoch(&self, epoch: usize) -> Vec<BatchPlan> {
        let train = self.permutation(self.n_train, epoch, 0);
        let pool = self.permutation(self.n_pool, epoch, 1);
        let targets = self.permutation(self.n_train, epoch, 2);
        let b = self.batch_size;
        let take = |perm: &[usize], j: usize| (0..b).map(|t| perm[(j * b + t) % perm.len()]).collect::<Vec<_>>();
        let mut out = Vec::with_capacity(self.steps_per_epoch());
        for j in 0..self.paired_per_epoch() {
            let paired = take(&train, j);
            out.push(BatchPlan { kind: BatchKind::Paired, epoch, index: 2 * j, targets: paired.clone(), sources: paired });
            out.push(BatchPlan { kind: BatchKind::Unpaired, epoch, index: 2 * j + 1, sources: take(&pool, j), targets: take(&targets, j) });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub kind: BatchKind,
    /// Standard-font glyphs (`x_p` or `x_r`).
    pub source: Tensor,
    /// Target-style glyphs `y`; for paired batches row `i` matches `source` row `i`.
    pub target: Tensor,
}

impl Batch {
    pub fn materialize(plan: &BatchPlan, split: &ShotSplit, pool: &UnpairedPool) -> Result<Self> {
        let target: Vec<&Tensor> =
            plan.targets.iter().map(|&i| split.train.get(i).map(|p| p.target.pixels()).ok_or(Error::EmptyBatch)).collect::<Result<_>>()?;
        let source: Vec<&Tensor> = match plan.kind {
            BatchKind::Paired => plan
                .sources
                .iter()
                .map(|&i| split.train.get(i).map(|p| p.source.pixels()).ok_or(Error::EmptyBatch))
                .collect::<Result<_>>()?,
            BatchKind::Unpaired => {
                plan.sources.iter().map(|&i| pool.images.get(i).map(|g| g.pixels()).ok_or(Error::EmptyPool)).collect::<Result<_>>()?
            }
        };
        Ok(Batch { kind: plan.kind, source: Tensor::stack(&source)?, target: Tensor::stack(&target)? })
    }
}

/// Both translation directions: `E_s/G_s` (source to target) with `D_t`,
/// `E_t/G_t` (target to source) with `D_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZiGan {
    pub gen_s: Generator,
    pub gen_t: Generator,
    pub disc_s: Discriminator,
    pub disc_t: Discriminator,
}

impl ZiGan {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let gc = config.generator_config();
        let dc = config.discriminator_config();
        Ok(ZiGan {
            gen_s: Generator::init(GEN_S, Direction::SourceToTarget, gc, config.seed)?,
            gen_t: Generator::init(GEN_T, Direction::TargetToSource, gc, config.seed)?,
            disc_s: Discriminator::init(DISC_S, DISC_S_LOCAL, dc, config.seed)?,
            disc_t: Discriminator::init(DISC_T, DISC_T_LOCAL, dc, config.seed)?,
        })
    }

    pub fn generator_sets(&self) -> Vec<&ParamSet> {
        alloc::vec![self.gen_s.params(), self.gen_t.params()]
    }

    pub fn discriminator_sets(&self) -> Vec<&ParamSet> {
        let mut v = self.disc_s.param_sets();
        v.extend(self.disc_t.param_sets());
        v
    }

    pub fn all_sets(&self) -> Vec<&ParamSet> {
        let mut v = self.generator_sets();
        v.extend(self.discriminator_sets());
        v
    }

    pub fn all_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut v = alloc::vec![self.gen_s.params_mut(), self.gen_t.params_mut()];
        v.extend(self.disc_s.param_sets_mut());
        v.extend(self.disc_t.param_sets_mut());
        v
    }

    pub fn generators_fingerprint(&self) -> u64 {
        self.generator_sets().iter().fold(0, |h, s| h.rotate_left(7) ^ s.fingerprint())
    }

    pub fn discriminators_fingerprint(&self) -> u64 {
        self.discriminator_sets().iter().fold(0, |h, s| h.rotate_left(7) ^ s.fingerprint())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ZiGan,
    pub opt_d: OptimizerState,
    pub opt_g: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ZiGan::init(&config)?;
        let lr = lr_at(&config, 0);
        let mut opt_d = OptimizerState::new(config.adam(), lr);
        for s in model.discriminator_sets() {
            opt_d.register(s);
        }
        let mut opt_g = OptimizerState::new(config.adam(), lr);
        for s in model.generator_sets() {
            opt_g.register(s);
        }
        Ok(TrainState { config, model, opt_d, opt_g, epoch: 0, step: 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub kind: BatchKind,
    pub losses: LossReport,
    pub d_loss: f64,
}

fn splice(g: &mut Graph<'_>, inputs: &[Var], r: Graded) -> Result<(Var, f64)> {
    let v = r.value;
    Ok((g.scalar_fn(inputs, r.value, r.grads)?, v))
}

/// Adds the least-squares real/fake terms of every discriminator head.
fn d_terms(g: &mut Graph<'_>, real: &DiscOutput, fake: &DiscOutput, terms: &mut Vec<(Var, f32)>) -> Result<f64> {
    let mut total = 0.0;
    for (pairs, f) in [
        (real.patches.iter().zip(&fake.patches), losses::adv_loss_d as fn(&[f64], &[f64]) -> Result<Graded>),
        (real.cams.iter().zip(&fake.cams), losses::cam_loss_d),
    ] {
        for (&r, &fk) in pairs {
            let vals = g.values_f64(&[r, fk]);
            let (v, x) = splice(g, &[r, fk], f(&vals[0], &vals[1])?)?;
            terms.push((v, 1.0));
            total += x;
        }
    }
    Ok(total)
}

/// Generator-side adversarial and CAM losses summed over heads.
fn g_terms(g: &mut Graph<'_>, fake: &DiscOutput) -> Result<(Vec<Var>, Vec<Var>, f64, f64)> {
    let (mut adv, mut cam) = (Vec::new(), Vec::new());
    let (mut av, mut cv) = (0.0, 0.0);
    for &p in &fake.patches {
        let vals = g.values_f64(&[p]);
        let (v, x) = splice(g, &[p], losses::adv_loss_g(&vals[0])?)?;
        adv.push(v);
        av += x;
    }
    for &c in &fake.cams {
        let vals = g.values_f64(&[c]);
        let (v, x) = splice(g, &[c], losses::cam_loss_g(&vals[0])?)?;
        cam.push(v);
        cv += x;
    }
    Ok((adv, cam, av, cv))
}

fn check_finite(v: f64, what: &str, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { what: what.into(), step })
    }
}

fn check_batch(batch: &Batch, resolution: usize) -> Result<()> {
    let (s, t) = (batch.source.shape(), batch.target.shape());
    if s.n == 0 || t.n == 0 {
        return Err(Error::EmptyBatch);
    }
    if s.h != resolution || t.h != resolution {
        return Err(Error::ShapeMismatch(format!("batch {s} / {t} at resolution {resolution}")));
    }
    Ok(())
}

/// Phase 1: update `D_s`, `D_t` on adversarial + CAM losses, generators frozen.
/// Returns the discriminator loss.
pub fn discriminator_phase(state: &mut TrainState, batch: &Batch) -> Result<f64> {
    check_batch(batch, state.config.resolution)?;
    let model = &state.model;
    let mut g = Graph::new().with_rng(rng::derive(state.config.seed, Domain::Dropout, state.step * 2));
    for net in model.disc_s.nets().into_iter().chain(model.disc_t.nets()) {
        g.train_net(net);
    }
    let x = g.input(batch.source.clone());
    let y = g.input(batch.target.clone());
    let fake_y = model.gen_s.generate_graph(&mut g, x, Mode::Train)?;
    let fake_x = model.gen_t.generate_graph(&mut g, y, Mode::Train)?;
    let mut terms = Vec::new();
    let real_t = model.disc_t.forward_graph(&mut g, y)?;
    let fake_t = model.disc_t.forward_graph(&mut g, fake_y)?;
    let mut d_loss = d_terms(&mut g, &real_t, &fake_t, &mut terms)?;
    let real_s = model.disc_s.forward_graph(&mut g, x)?;
    let fake_s = model.disc_s.forward_graph(&mut g, fake_x)?;
    d_loss += d_terms(&mut g, &real_s, &fake_s, &mut terms)?;
    check_finite(d_loss, "discriminator loss", state.step)?;
    let root = g.weighted_sum(&terms);
    let grads = g.backward(root).into_params();
    drop(g);
    let mut sets = state.model.disc_s.param_sets_mut();
    sets.extend(state.model.disc_t.param_sets_mut());
    state.opt_d.step(&mut sets, &grads)?;
    Ok(d_loss)
}

/// Phase 2: update `E_s, G_s, E_t, G_t` on the full objective, discriminators frozen.
pub fn generator_phase(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    check_batch(batch, state.config.resolution)?;
    let cfg = &state.config;
    let w = cfg.weights;
    let model = &state.model;
    let mut g = Graph::new().with_rng(rng::derive(cfg.seed, Domain::Dropout, state.step * 2 + 1));
    g.train_net(GEN_S);
    g.train_net(GEN_T);
    let (gs, gt) = (&model.gen_s, &model.gen_t);
    let dim = gs.latent_dim();

    let x = g.input(batch.source.clone());
    let y = g.input(batch.target.clone());
    // x -> y_hat -> x_rec
    let lat_x_s = gs.encode_graph(&mut g, x, Mode::Train)?;
    let fake_y = gs.decode_graph(&mut g, &lat_x_s, Mode::Train)?;
    let lat_fy_t = gt.encode_graph(&mut g, fake_y, Mode::Train)?;
    let rec_x = gt.decode_graph(&mut g, &lat_fy_t, Mode::Train)?;
    // y -> x_hat -> y_rec
    let lat_y_t = gt.encode_graph(&mut g, y, Mode::Train)?;
    let fake_x = gt.decode_graph(&mut g, &lat_y_t, Mode::Train)?;
    let lat_fx_s = gs.encode_graph(&mut g, fake_x, Mode::Train)?;
    let rec_y = gs.decode_graph(&mut g, &lat_fx_s, Mode::Train)?;
    // identity
    let id_y = gs.generate_graph(&mut g, y, Mode::Train)?;
    let id_x = gt.generate_graph(&mut g, x, Mode::Train)?;

    let mut terms: Vec<(Var, f32)> = Vec::new();
    let mut dirs = [DirectionLosses::default(); 2];

    for (i, (disc, fake)) in [(&model.disc_t, fake_y), (&model.disc_s, fake_x)].into_iter().enumerate() {
        let out = disc.forward_graph(&mut g, fake)?;
        let (adv, cam, av, cv) = g_terms(&mut g, &out)?;
        terms.extend(adv.into_iter().chain(cam).map(|v| (v, w.lambda1 as f32)));
        dirs[i].adv = av;
        dirs[i].cam = cv;
    }

    // index 0 = s2t, 1 = t2s
    let cycles = [(x, rec_x), (y, rec_y)];
    let identities = [(y, id_y), (x, id_x)];
    for i in 0..2 {
        let vals = g.values_f64(&[cycles[i].0, cycles[i].1]);
        let (v, c) = splice(&mut g, &[cycles[i].0, cycles[i].1], losses::cycle_loss(&vals[0], &vals[1])?)?;
        terms.push((v, w.lambda2 as f32));
        dirs[i].cycle = c;
        let vals = g.values_f64(&[identities[i].0, identities[i].1]);
        let (v, c) = splice(&mut g, &[identities[i].0, identities[i].1], losses::identity_loss(&vals[0], &vals[1])?)?;
        terms.push((v, w.lambda2 as f32));
        dirs[i].identity = c;
    }

    // (real image, generated, real features, generated features)
    let aligned = [(y, fake_y, lat_y_t.bottleneck, lat_fy_t.bottleneck), (x, fake_x, lat_x_s.bottleneck, lat_fx_s.bottleneck)];
    for (i, &(real, fake, fr, ff)) in aligned.iter().enumerate() {
        match batch.kind {
            BatchKind::Paired => {
                let vals = g.values_f64(&[real, fake]);
                let (v, l1) = splice(&mut g, &[real, fake], losses::paired_l1_loss(&vals[0], &vals[1])?)?;
                terms.push((v, (w.lambda3 * w.alpha) as f32));
                let vals = g.values_f64(&[fr, ff]);
                let (v, c) = splice(&mut g, &[fr, ff], losses::constancy_loss(&vals[0], &vals[1])?)?;
                terms.push((v, w.lambda3 as f32));
                dirs[i].l1 = l1;
                dirs[i].constancy = c;
            }
            BatchKind::Unpaired => {
                let vals = g.values_f64(&[fr, ff]);
                let bank = cfg.kernel_policy.bank_for(&vals[0], &vals[1], dim)?;
                let r = losses::style_loss(&vals[0], &vals[1], dim, &bank, cfg.estimator)?;
                let (v, s) = splice(&mut g, &[fr, ff], r)?;
                terms.push((v, w.lambda4 as f32));
                dirs[i].style = s;
            }
        }
    }

    let report = LossReport::assemble(dirs[0], dirs[1], &w);
    if !report.is_finite() {
        return Err(Error::NonFiniteLoss { what: format!("generator objective {report:?}"), step: state.step });
    }
    let root = g.weighted_sum(&terms);
    let grads = g.backward(root).into_params();
    let bn = g.take_bn_observations();
    drop(g);
    state.opt_g.step(&mut [state.model.gen_s.params_mut(), state.model.gen_t.params_mut()], &grads)?;
    apply_bn_observations(state.model.gen_s.params_mut(), &bn);
    apply_bn_observations(state.model.gen_t.params_mut(), &bn);
    Ok(report)
}

/// One full alternating update.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    let d_loss = discriminator_phase(state, batch)?;
    let losses = generator_phase(state, batch)?;
    let r = StepReport { step: state.step, epoch: state.epoch, kind: batch.kind, losses, d_loss };
    state.step += 1;
    Ok(r)
}

/// Receives progress from [`run_training`].
pub trait TrainObserver {
    type Error: From<Error>;

    fn on_step(&mut self, _report: &StepReport) -> core::result::Result<(), Self::Error> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _state: &TrainState) -> core::result::Result<(), Self::Error> {
        Ok(())
    }
}

impl TrainObserver for () {
    type Error = Error;
}

/// Runs the remaining epochs of `state`. Resuming a state restored from a
/// checkpoint reproduces the uninterrupted run, since every random draw is
/// keyed by `(seed, epoch)` or `(seed, step)`.
pub fn run_training<O: TrainObserver>(
    state: &mut TrainState,
    split: &ShotSplit,
    pool: &UnpairedPool,
    observer: &mut O,
) -> core::result::Result<Vec<StepReport>, O::Error> {
    let sched = BatchScheduler::new(split.train.len(), pool.size(), state.config.batch_size, state.config.seed)?;
    let mut log = Vec::new();
    while state.epoch < state.config.epochs {
        let lr = lr_at(&state.config, state.epoch);
        state.opt_d.lr = lr;
        state.opt_g.lr = lr;
        for plan in sched.epoch(state.epoch) {
            let batch = Batch::materialize(&plan, split, pool)?;
            let report = train_step(state, &batch)?;
            observer.on_step(&report)?;
            log.push(report);
        }
        state.epoch += 1;
        observer.on_epoch_end(state)?;
    }
    Ok(log)
}
