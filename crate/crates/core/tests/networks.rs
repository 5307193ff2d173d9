use std::time::Instant;

use zigan_core::networks::*;
use zigan_core::rng::{self, Domain};
use zigan_core::tensor::{Shape, Tensor};
use zigan_core::Error;

use rand::Rng;

fn noise(shape: Shape, seed: u64) -> Tensor {
    let mut r = rng::derive(seed, Domain::Synthetic, 0);
    Tensor::from_vec(shape, (0..shape.len()).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Rows of the architecture table as `(h, w, c)`.
const TABLE_ENCODER: [(usize, usize, usize); 8] =
    [(128, 128, 64), (64, 64, 128), (32, 32, 256), (16, 16, 512), (8, 8, 512), (4, 4, 512), (2, 2, 512), (1, 1, 512)];
const TABLE_DECODER: [(usize, usize, usize); 8] =
    [(2, 2, 1024), (4, 4, 1024), (8, 8, 1024), (16, 16, 1024), (32, 32, 512), (64, 64, 256), (128, 128, 128), (256, 256, 3)];

/// Trainable element count from the layer arithmetic: 5x5 kernels, bias only
/// on the first encoder and last decoder layer, (gamma, beta) elsewhere.
fn expected_param_count(skip: bool) -> usize {
    let enc = [64, 128, 256, 512, 512, 512, 512, 512];
    let mut total = 0;
    let mut cin = 3;
    for (i, &c) in enc.iter().enumerate() {
        total += cin * c * 25 + if i == 0 { c } else { 2 * c };
        cin = c;
    }
    let dec = [512, 512, 512, 512, 256, 128, 64, 3];
    let mut cin = 512;
    for (i, &c) in dec.iter().enumerate() {
        total += cin * c * 25 + if i == dec.len() - 1 { c } else { 2 * c };
        cin = if skip { 2 * c } else { c };
    }
    total
}

#[test]
fn generator_matches_architecture_table_at_256() {
    let t = Instant::now();
    let gen = Generator::init(GEN_S, Direction::SourceToTarget, GeneratorConfig::new(256), 7).unwrap();
    let trace = gen.trace(&noise(Shape::new(1, 3, 256, 256), 1)).unwrap();
    assert_eq!(trace.encoder, TABLE_ENCODER.to_vec());
    assert_eq!(trace.decoder, TABLE_DECODER.to_vec());
    assert_eq!(&trace.decoder_inputs[1..4], &[1024, 1024, 1024]);
    assert_eq!(gen.encoder_layers().len(), 8);
    assert_eq!(gen.decoder_layers().len(), 8);
    assert!(gen.encoder_layers().iter().chain(gen.decoder_layers()).all(|l| l.kernel == 5 && l.stride == 2));
    assert_eq!(gen.params().trainable_count(), expected_param_count(true));
    assert_eq!(gen.params().trainable_count(), 85_017_347);
    assert!(t.elapsed().as_secs_f64() < 10.0, "took {:?}", t.elapsed());
}

#[test]
fn generator_without_skips_has_fixed_size() {
    let cfg = GeneratorConfig { skip_connections: false, ..GeneratorConfig::new(256) };
    let gen = Generator::init(GEN_S, Direction::SourceToTarget, cfg, 7).unwrap();
    assert_eq!(gen.params().trainable_count(), expected_param_count(false));
}

#[test]
fn generator_at_64_truncates_ladder() {
    let gen = Generator::init(GEN_T, Direction::TargetToSource, GeneratorConfig::new(64), 3).unwrap();
    let x = noise(Shape::new(4, 3, 64, 64), 2);
    let lat = gen.encode(&x).unwrap();
    assert_eq!(lat.bottleneck.shape(), Shape::new(4, 512, 1, 1));
    assert_eq!(lat.skips.len(), 5);
    let trace = gen.trace(&x).unwrap();
    assert_eq!(trace.encoder.len(), 6);
    assert_eq!(trace.encoder[0], (32, 32, 64));
    let y = gen.generate(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
    // eval mode is deterministic and re-encodable
    assert_eq!(gen.generate(&x).unwrap(), y);
    assert_eq!(gen.encode(&y).unwrap().bottleneck.shape(), Shape::new(4, 512, 1, 1));
}

#[test]
fn generator_init_is_seeded() {
    let cfg = GeneratorConfig { width_divisor: 8, ..GeneratorConfig::new(64) };
    let a = Generator::init(GEN_S, Direction::SourceToTarget, cfg, 11).unwrap();
    let b = Generator::init(GEN_S, Direction::SourceToTarget, cfg, 11).unwrap();
    let c = Generator::init(GEN_S, Direction::SourceToTarget, cfg, 12).unwrap();
    assert_eq!(a.params().fingerprint(), b.params().fingerprint());
    assert_ne!(a.params().fingerprint(), c.params().fingerprint());
    // init statistics: std 0.02 weights, identity norms
    let w = a.params().find("enc.l2.weight").unwrap();
    let d = a.params().tensor(w).data();
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    assert!(mean.abs() < 2e-3 && (std - 0.02).abs() < 2e-3, "mean {mean} std {std}");
    let g = a.params().find("enc.l2.bn.gamma").unwrap();
    assert!(a.params().tensor(g).data().iter().all(|&v| v == 1.0));
}

#[test]
fn generator_rejects_bad_input() {
    assert!(matches!(Generator::init(GEN_S, Direction::SourceToTarget, GeneratorConfig::new(100), 0), Err(Error::BadResolution(100))));
    let gen =
        Generator::init(GEN_S, Direction::SourceToTarget, GeneratorConfig { width_divisor: 8, ..GeneratorConfig::new(64) }, 0).unwrap();
    assert!(matches!(gen.generate(&noise(Shape::new(1, 3, 32, 32), 0)), Err(Error::ShapeMismatch(_))));
}

fn small_disc(seed: u64) -> Discriminator {
    Discriminator::init(DISC_T, DISC_T_LOCAL, DiscriminatorConfig { width_divisor: 16, ..DiscriminatorConfig::new(64) }, seed).unwrap()
}

#[test]
fn attention_is_weighted_features_exactly() {
    let mut d = small_disc(4);
    let k = d.feature_maps();
    let wa: Vec<f32> = (0..k).map(|i| 0.1 * i as f32 - 0.7).collect();
    let wm: Vec<f32> = (0..k).map(|i| 0.3 - 0.05 * i as f32).collect();
    d.set_cam_weights(&wa, &wm).unwrap();
    let r = d.forward(&noise(Shape::new(2, 3, 64, 64), 5)).unwrap();
    let e = &r.features;
    assert_eq!(e.shape().c, k);
    let plane = e.shape().plane();
    for n in 0..2 {
        for c in 0..k {
            let w = (wa[c] + wm[c]) * 0.5;
            assert_eq!(r.attention.weights[c], w);
            for i in 0..plane {
                let idx = (n * k + c) * plane + i;
                assert_eq!(r.attention.per_map.data()[idx], w * e.data()[idx]);
            }
        }
    }
    assert!(r.cam_logit.iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(r.patch_scores.shape().c, 1);
}

#[test]
fn zero_cam_weights_give_half_and_zero_maps() {
    let mut d = small_disc(6);
    let k = d.feature_maps();
    d.set_cam_weights(&vec![0.0; k], &vec![0.0; k]).unwrap();
    let r = d.forward(&noise(Shape::new(3, 3, 64, 64), 7)).unwrap();
    assert_eq!(r.cam_logit, vec![0.5; 3]);
    assert!(r.attention.per_map.data().iter().all(|&v| v == 0.0));
    let heat = export_attention_heatmap(&r.attention, 0, 64).unwrap();
    assert!(heat.degenerate);
    assert!(heat.values.iter().all(|&v| v == 0.0));
}

#[test]
fn cam_logit_hand_oracle() {
    // 2 maps of 2x2 ones with per-map weights w on both paths
    let e = Tensor::full(Shape::new(1, 2, 2, 2), 1.0);
    let w = [0.3f32, -0.8];
    let (cam, att) = cam_attention(&e, &w, &w).unwrap();
    let z: f64 = w.iter().map(|&wk| wk as f64 * (1.0 + 1.0)).sum();
    let oracle = 1.0 / (1.0 + (-z).exp());
    assert!((cam[0] as f64 - oracle).abs() < 1e-6);
    // single map with unit weight returns the raw features
    let f = noise(Shape::new(1, 1, 3, 3), 8);
    let (_, att1) = cam_attention(&f, &[1.0], &[1.0]).unwrap();
    assert_eq!(att1.per_map, f);
    assert_eq!(att.weights, w.to_vec());
}

#[test]
fn heatmap_range_and_hot_pixel() {
    let d = small_disc(9);
    let r = d.forward(&noise(Shape::new(1, 3, 64, 64), 10)).unwrap();
    let heat = export_attention_heatmap(&r.attention, 0, 64).unwrap();
    assert_eq!(heat.values.len(), 64 * 64);
    assert!(heat.values.iter().all(|v| (0.0..=1.0).contains(v)));

    let mut per_map = Tensor::zeros(Shape::new(1, 1, 8, 8));
    per_map.data_mut()[3 * 8 + 5] = 1.0;
    let heat = export_attention_heatmap(&AttentionMap { per_map, weights: vec![1.0] }, 0, 64).unwrap();
    let argmax = heat.values.iter().enumerate().fold(0, |b, (i, &v)| if v > heat.values[b] { i } else { b });
    let (row, col) = (argmax / 64, argmax % 64);
    // the source pixel covers rows 24..32 and columns 40..48 after 8x upsampling
    assert!((24..32).contains(&row) && (40..48).contains(&col), "peak at {row},{col}");
    assert_eq!(heat.values[argmax], 1.0);
}

#[test]
fn recognizer_shapes_and_depth() {
    let cfg = RecognizerConfig { classes: 5, resolution: 64, base_width: 8 };
    let rec = Recognizer::init(cfg, 1).unwrap();
    assert_eq!(rec.depth(), 18);
    let (logits, feats) = rec.infer(&noise(Shape::new(3, 3, 64, 64), 11)).unwrap();
    assert_eq!(logits.shape(), Shape::new(3, 5, 1, 1));
    assert_eq!(feats.shape(), Shape::new(3, 64, 1, 1));
    assert!(matches!(Recognizer::init(RecognizerConfig { classes: 1, ..cfg }, 1), Err(Error::EmptyClass(_))));
}
