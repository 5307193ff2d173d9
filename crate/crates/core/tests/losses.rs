use proptest::prelude::*;
use zigan_core::losses::*;

/// Double-loop MMD with the kernel written out directly.
fn naive_mmd(a: &[Vec<f64>], b: &[Vec<f64>], sigmas: &[f64]) -> f64 {
    let k = |x: &[f64], y: &[f64], s: f64| {
        let mut d = 0.0;
        for i in 0..x.len() {
            d += (x[i] - y[i]) * (x[i] - y[i]);
        }
        (-d / (2.0 * s * s)).exp()
    };
    let mut total = 0.0;
    for &s in sigmas {
        let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
        for x in a {
            for y in a {
                aa += k(x, y, s);
            }
        }
        for x in b {
            for y in b {
                bb += k(x, y, s);
            }
        }
        for x in a {
            for y in b {
                ab += k(x, y, s);
            }
        }
        let (na, nb) = (a.len() as f64, b.len() as f64);
        total += aa / (na * na) + bb / (nb * nb) - 2.0 * ab / (na * nb);
    }
    total / sigmas.len() as f64
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Norm-wise relative error between analytic and central-difference gradients.
fn fd_error(inputs: &[Vec<f64>], f: &dyn Fn(&[Vec<f64>]) -> Graded) -> f64 {
    let h = 1e-4;
    let g = f(inputs);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let mut up = inputs.to_vec();
            up[k][i] += h;
            let mut down = inputs.to_vec();
            down[k][i] -= h;
            let num = (f(&up).value - f(&down).value) / (2.0 * h);
            let an = g.grads[k][i];
            diff += (an - num) * (an - num);
            na += an * an;
            nn += num * num;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

fn vec8() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 8)
}

/// Pairs kept away from the kink of `|a - b|`.
fn separated_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (vec8(), prop::collection::vec((0.01f64..1.0, any::<bool>()), 8)).prop_map(|(a, d)| {
        let b = a.iter().zip(&d).map(|(x, (m, s))| if *s { x + m } else { x - m }).collect();
        (a, b)
    })
}

fn rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn least_squares_gradients(a in vec8(), b in vec8()) {
        prop_assert!(fd_error(&[a.clone(), b.clone()], &|x| adv_loss_d(&x[0], &x[1]).unwrap()) < 1e-3);
        prop_assert!(fd_error(std::slice::from_ref(&a), &|x| adv_loss_g(&x[0]).unwrap()) < 1e-3);
        let p: Vec<f64> = a.iter().map(|v| 0.5 + 0.4 * v).collect();
        let q: Vec<f64> = b.iter().map(|v| 0.5 + 0.4 * v).collect();
        prop_assert!(fd_error(&[p.clone(), q], &|x| cam_loss_d(&x[0], &x[1]).unwrap()) < 1e-3);
        prop_assert!(fd_error(&[p], &|x| cam_loss_g(&x[0]).unwrap()) < 1e-3);
    }

    #[test]
    fn reconstruction_gradients((a, b) in separated_pair(), (c, d) in separated_pair()) {
        prop_assert!(fd_error(&[a.clone(), b.clone()], &|x| cycle_loss(&x[0], &x[1]).unwrap()) < 1e-3);
        prop_assert!(fd_error(&[a.clone(), b.clone()], &|x| identity_loss(&x[0], &x[1]).unwrap()) < 1e-3);
        prop_assert!(fd_error(&[a.clone(), b.clone()], &|x| paired_l1_loss(&x[0], &x[1]).unwrap()) < 1e-3);
        prop_assert!(fd_error(&[c.clone(), d.clone()], &|x| constancy_loss(&x[0], &x[1]).unwrap()) < 1e-3);
        let w = LossWeights::default();
        prop_assert!(fd_error(&[a, b, c, d], &|x| alignment_loss(&x[0], &x[1], &x[2], &x[3], &w).unwrap()) < 1e-3);
    }

    #[test]
    fn style_gradients(a in rows(4, 2), b in rows(4, 2), unbiased in any::<bool>()) {
        let bank = KernelBank::new(vec![0.5, 1.0, 2.0]).unwrap();
        let est = if unbiased { MmdEstimator::Unbiased } else { MmdEstimator::Biased };
        let err = fd_error(&[flat(&a), flat(&b)], &|x| style_loss(&x[0], &x[1], 2, &bank, est).unwrap());
        prop_assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn losses_are_nonnegative(a in vec8(), b in vec8()) {
        prop_assert!(adv_loss_d(&a, &b).unwrap().value >= 0.0);
        prop_assert!(adv_loss_g(&a).unwrap().value >= 0.0);
        prop_assert!(cycle_loss(&a, &b).unwrap().value >= 0.0);
        prop_assert!(identity_loss(&a, &b).unwrap().value >= 0.0);
        prop_assert!(constancy_loss(&a, &b).unwrap().value >= 0.0);
        let bank = KernelPolicy::default().bank_for(&a, &b, 2).unwrap();
        prop_assert!(mk_mmd_sq(&a, &b, 2, &bank).unwrap().value >= 0.0);
    }

    #[test]
    fn mmd_matches_naive_oracle(na in 2usize..17, nb in 2usize..17, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect()).collect::<Vec<Vec<f64>>>();
        let (a, b) = (draw(na), draw(nb));
        let sigmas = [0.5, 1.0, 3.0];
        let bank = KernelBank::new(sigmas.to_vec()).unwrap();
        let v = mk_mmd_sq(&flat(&a), &flat(&b), 4, &bank).unwrap().value;
        prop_assert!((v - naive_mmd(&a, &b, &sigmas)).abs() < 1e-6);
    }

    #[test]
    fn mmd_symmetric_and_permutation_invariant(a in rows(6, 3), b in rows(5, 3), rot in 0usize..6) {
        let bank = KernelBank::new(vec![1.0, 2.0]).unwrap();
        let ab = mk_mmd_sq(&flat(&a), &flat(&b), 3, &bank).unwrap().value;
        let ba = mk_mmd_sq(&flat(&b), &flat(&a), 3, &bank).unwrap().value;
        prop_assert_eq!(ab, ba);
        let mut ap = a.clone();
        ap.rotate_left(rot);
        ap.swap(0, 5);
        let mut bp = b.clone();
        bp.reverse();
        let perm = mk_mmd_sq(&flat(&ap), &flat(&bp), 3, &bank).unwrap().value;
        prop_assert!((perm - ab).abs() < 1e-12);
        prop_assert!(mk_mmd_sq(&flat(&a), &flat(&a), 3, &bank).unwrap().value <= 1e-10);
    }

    #[test]
    fn total_is_linear(c in prop::collection::vec(0.0f64..3.0, 8), s in 0.0f64..4.0, which in 0usize..4) {
        let w = LossWeights::default();
        let s2t = ObjectiveTerms { gan: c[0], consistency: c[1], alignment: c[2], style: c[3] };
        let t2s = ObjectiveTerms { gan: c[4], consistency: c[5], alignment: c[6], style: c[7] };
        let base = total_losses(&s2t, &t2s, &w);
        let mut scaled = s2t;
        match which {
            0 => scaled.gan *= s,
            1 => scaled.consistency *= s,
            2 => scaled.alignment *= s,
            _ => scaled.style *= s,
        }
        let lam = [w.lambda1, w.lambda2, w.lambda3, w.lambda4][which];
        let comp = [s2t.gan, s2t.consistency, s2t.alignment, s2t.style][which];
        let expect = base + lam * comp * (s - 1.0);
        prop_assert!((total_losses(&scaled, &t2s, &w) - expect).abs() < 1e-12 * expect.abs().max(1.0));
        // scaling a weight
        let w2 = LossWeights { lambda4: w.lambda4 * s, ..w };
        let expect = base + w.lambda4 * (s - 1.0) * (s2t.style + t2s.style);
        prop_assert!((total_losses(&s2t, &t2s, &w2) - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }
}

#[test]
fn unit_terms_in_one_direction_total_35() {
    let u = ObjectiveTerms { gan: 1.0, consistency: 1.0, alignment: 1.0, style: 1.0 };
    let z = ObjectiveTerms::default();
    let w = LossWeights::default();
    assert_eq!(total_losses(&u, &z, &w), 35.0);
    assert_eq!(total_losses(&z, &u, &w), 35.0);
    assert_eq!(total_losses(&u, &u, &w), 70.0);
    assert_eq!(total_losses(&z, &z, &w), 0.0);
}

#[test]
fn least_squares_minima_at_labels() {
    assert_eq!(adv_loss_d(&[1.0; 5], &[0.0; 5]).unwrap().value, 0.0);
    assert_eq!(adv_loss_g(&[1.0; 5]).unwrap().value, 0.0);
    assert_eq!(cam_loss_d(&[1.0; 2], &[0.0; 2]).unwrap().value, 0.0);
    assert_eq!(cam_loss_g(&[1.0; 2]).unwrap().value, 0.0);
}

#[test]
fn mmd_singleton_and_identical() {
    let bank = KernelBank::new(vec![1.0]).unwrap();
    let v = mk_mmd_sq(&[0.0], &[1.0], 1, &bank).unwrap().value;
    assert!((v - 0.786939).abs() < 1e-6);
    assert!((v - naive_mmd(&[vec![0.0]], &[vec![1.0]], &[1.0])).abs() < 1e-15);
    let a = [0.3, -1.0, 2.0, 0.5];
    assert_eq!(mk_mmd_sq(&a, &a, 2, &bank).unwrap().value, 0.0);
}
