mod common;

use zigan_core::training::*;
use zigan_core::Error;

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig { resolution: 64, width_divisor: 16, batch_size: 2, shots: 4, epochs: 2, seed, lr0: 1e-3, ..TrainConfig::default() }
}

fn first_batch(cfg: &TrainConfig, kind: BatchKind) -> Batch {
    let split = common::split(4, 2, 64);
    let pool = common::pool(8, 64);
    let sched = BatchScheduler::new(4, 8, cfg.batch_size, cfg.seed).unwrap();
    let plan = sched.epoch(0).into_iter().find(|p| p.kind == kind).unwrap();
    Batch::materialize(&plan, &split, &pool).unwrap()
}

#[test]
fn phases_freeze_the_other_networks() {
    for kind in [BatchKind::Paired, BatchKind::Unpaired] {
        let cfg = tiny(1);
        let batch = first_batch(&cfg, kind);
        let mut st = TrainState::new(cfg).unwrap();
        let (g0, d0) = (st.model.generators_fingerprint(), st.model.discriminators_fingerprint());
        discriminator_phase(&mut st, &batch).unwrap();
        let (g1, d1) = (st.model.generators_fingerprint(), st.model.discriminators_fingerprint());
        assert_eq!(g0, g1, "generators (incl. batch-norm buffers) moved in phase 1");
        assert_ne!(d0, d1);
        generator_phase(&mut st, &batch).unwrap();
        let (g2, d2) = (st.model.generators_fingerprint(), st.model.discriminators_fingerprint());
        assert_eq!(d1, d2, "discriminators moved in phase 2");
        assert_ne!(g1, g2);
    }
}

#[test]
fn zero_learning_rate_keeps_trainable_weights() {
    let cfg = TrainConfig { lr0: 0.0, ..tiny(2) };
    let batch = first_batch(&cfg, BatchKind::Paired);
    let mut st = TrainState::new(cfg).unwrap();
    let before = st.model.clone();
    let report = train_step(&mut st, &batch).unwrap();
    assert!(report.losses.is_finite());
    for (a, b) in before.all_sets().iter().zip(st.model.all_sets()) {
        for (pa, pb) in a.iter().zip(b.iter()) {
            if pa.kind == zigan_core::params::ParamKind::Trainable {
                assert_eq!(pa.tensor, pb.tensor, "{} changed", pa.name);
            }
        }
    }
}

#[test]
fn paired_and_unpaired_steps_fill_the_right_terms() {
    let cfg = tiny(3);
    let mut st = TrainState::new(cfg.clone()).unwrap();
    let p = train_step(&mut st, &first_batch(&cfg, BatchKind::Paired)).unwrap();
    assert!(p.losses.s2t.l1 > 0.0 && p.losses.s2t.constancy > 0.0 && p.losses.s2t.style == 0.0);
    let u = train_step(&mut st, &first_batch(&cfg, BatchKind::Unpaired)).unwrap();
    assert!(u.losses.s2t.l1 == 0.0 && u.losses.t2s.style > 0.0);
    assert_eq!(st.step, 2);
    let expect = p.losses.s2t_total + p.losses.t2s_total;
    assert!((p.losses.total - expect).abs() < 1e-9);
}

fn run(seed: u64, epochs: usize) -> (Vec<StepReport>, TrainState) {
    let split = common::split(4, 2, 64);
    let pool = common::pool(8, 64);
    let mut st = TrainState::new(TrainConfig { epochs, ..tiny(seed) }).unwrap();
    let log = run_training(&mut st, &split, &pool, &mut ()).unwrap();
    (log, st)
}

#[test]
fn same_seed_same_loss_log() {
    // 3 epochs of 4 steps covers the required 10 steps
    let (a, sa) = run(5, 3);
    let (b, sb) = run(5, 3);
    assert!(a.len() >= 10);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let (c, _) = run(6, 3);
    assert_ne!(a, c);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let split = common::split(4, 2, 64);
    let pool = common::pool(8, 64);
    let (full_log, full) = run(7, 3);
    let mut st = TrainState::new(TrainConfig { epochs: 1, ..tiny(7) }).unwrap();
    let mut log = run_training(&mut st, &split, &pool, &mut ()).unwrap();
    st.config.epochs = 3;
    log.extend(run_training(&mut st, &split, &pool, &mut ()).unwrap());
    assert_eq!(log, full_log);
    assert_eq!(st, full);
}

struct Recorder {
    steps: usize,
    epochs: Vec<usize>,
}

impl TrainObserver for Recorder {
    type Error = Error;

    fn on_step(&mut self, _r: &StepReport) -> Result<(), Error> {
        self.steps += 1;
        Ok(())
    }

    fn on_epoch_end(&mut self, st: &TrainState) -> Result<(), Error> {
        self.epochs.push(st.epoch);
        Ok(())
    }
}

#[test]
fn observer_sees_every_step_and_epoch() {
    let split = common::split(4, 2, 64);
    let pool = common::pool(8, 64);
    let mut st = TrainState::new(tiny(8)).unwrap();
    let mut rec = Recorder { steps: 0, epochs: Vec::new() };
    run_training(&mut st, &split, &pool, &mut rec).unwrap();
    assert_eq!(rec.steps, 8);
    assert_eq!(rec.epochs, vec![1, 2]);
}

#[test]
fn non_finite_input_is_reported() {
    let cfg = tiny(9);
    let mut batch = first_batch(&cfg, BatchKind::Paired);
    batch.target.data_mut()[0] = f32::NAN;
    let mut st = TrainState::new(cfg).unwrap();
    let before = st.model.clone();
    assert!(matches!(train_step(&mut st, &batch), Err(Error::NonFiniteLoss { .. })));
    assert_eq!(st.model, before);
}

#[test]
fn empty_pool_is_rejected() {
    let split = common::split(4, 2, 64);
    let mut st = TrainState::new(tiny(10)).unwrap();
    let r = run_training(&mut st, &split, &zigan_core::glyph::UnpairedPool::default(), &mut ());
    assert_eq!(r, Err(Error::EmptyPool));
}
