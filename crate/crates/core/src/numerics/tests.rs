use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights so every output
/// coordinate carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..tape.value(x).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = tape.mul_const(x, w.into())?;
    tape.sum(y)
}

fn check(points: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>) {
    let report = grad_check_inputs(f, points, EPS, TOL, 1).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::inference();
    let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = t.masked_softmax(x, &[false, false]).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_with_one_considered_entry_is_one_hot() {
    for (a, b) in [(3.0, -7.0), (-100.0, 50.0), (0.0, 0.0)] {
        let mut t = Tape::inference();
        let x = t.constant(Tensor::vector(vec![a, b]));
        let y = t.masked_softmax(x, &[false, true]).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0]);
    }
}

#[test]
fn softmax_with_everything_ignored_is_rejected() {
    let mut t = Tape::inference();
    let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.masked_softmax(x, &[true, true]), Err(NumericsError::Precondition(_))));
}

#[test]
fn identity_kernel_convolution_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::inference();
    let sig = random(&[2, 7, 1], &mut rng);
    let x = t.constant(sig.clone());
    let w = t.constant(Tensor::new(vec![3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap());
    let b = t.constant(Tensor::vector(vec![0.0]));
    let y = t.conv1d(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), sig.data());
}

#[test]
fn conv_is_shift_invariant_away_from_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let wt = random(&[3, 2, 4], &mut rng);
    let bt = random(&[4], &mut rng);
    let mut sig = vec![0.0; 20];
    for v in sig.iter_mut().skip(6).take(6) {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut shifted = vec![0.0; 20];
    shifted[2..].copy_from_slice(&sig[..18]);
    let run = |s: &[f64]| {
        let mut t = Tape::inference();
        let x = t.constant(Tensor::new(vec![1, 10, 2], s.to_vec()).unwrap());
        let w = t.constant(wt.clone());
        let b = t.constant(bt.clone());
        let y = t.conv1d(x, w, b).unwrap();
        t.value(y).data().to_vec()
    };
    let (a, b) = (run(&sig), run(&shifted));
    for l in 0..9 {
        for c in 0..4 {
            assert!((a[l * 4 + c] - b[(l + 1) * 4 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn square_sum_gradient() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::vector(vec![3.0]));
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get_or_zero(x), vec![6.0]);
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
    let p = t.variable(Tensor::vector(vec![5.0, 5.0, 5.0]));
    let loss = t.sum(x).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get_or_zero(p), vec![0.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn cross_entropy_at_uniform_logits() {
    // Oracle: central differences of -log softmax(z)[target] at z = 0.
    let k = 5;
    let target = 2;
    let loss_at = |z: &[f64]| {
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - z[target]
    };
    let mut numeric = vec![0.0; k];
    for (j, n) in numeric.iter_mut().enumerate() {
        let mut zp = vec![0.0; k];
        let mut zm = vec![0.0; k];
        zp[j] = 1e-6;
        zm[j] = -1e-6;
        *n = (loss_at(&zp) - loss_at(&zm)) / 2e-6;
    }
    let mut t = Tape::new();
    let z = t.variable(Tensor::new(vec![1, k], vec![0.0; k]).unwrap());
    let loss = t.softmax_xent(z, None, &[target], &[1.0]).unwrap();
    let g = t.backward(loss).unwrap().get_or_zero(z);
    for j in 0..k {
        let expected = 1.0 / k as f64 - if j == target { 1.0 } else { 0.0 };
        assert!((g[j] - expected).abs() < 1e-12);
        assert!((g[j] - numeric[j]).abs() < 1e-8);
    }
}

#[test]
fn grad_check_of_square_sum_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random(&[6], &mut rng);
    let r = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        },
        &p,
        EPS,
        1e-6,
    )
    .unwrap();
    assert!(r.passed && r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_rejects_argmax() {
    let p = Tensor::vector(vec![0.1, 0.7, 0.3]);
    let r = grad_check(
        |t, x| {
            let h = t.argmax_one_hot(x)?;
            let y = t.mul(h, x)?;
            t.sum(y)
        },
        &p,
        EPS,
        TOL,
    );
    assert!(matches!(r, Err(NumericsError::Precondition(_))));
}

#[test]
fn non_finite_activation_fails_fast() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::vector(vec![1e300]));
    assert!(matches!(t.scale(x, 1e300), Err(NumericsError::NonFinite { .. })));
}

#[test]
fn layer_norm_standardizes_each_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::inference();
    let x = t.constant(random(&[7, 12], &mut rng));
    let g = t.constant(Tensor::vector(vec![1.0; 12]));
    let b = t.constant(Tensor::vector(vec![0.0; 12]));
    let y = t.layer_norm(x, g, b).unwrap();
    for row in t.value(y).data().chunks(12) {
        let mean = row.iter().sum::<f64>() / 12.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
}

#[test]
fn dropout_is_identity_at_rate_zero_and_seeded_otherwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = random(&[50], &mut rng);
    let run = |seed| {
        let mut t = Tape::inference();
        let x = t.constant(base.clone());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let y = t.dropout(x, 0.1, &mut r).unwrap();
        t.value(y).data().to_vec()
    };
    assert_eq!(run(4), run(4));
    let mut t = Tape::inference();
    let x = t.constant(base.clone());
    let y = t.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(t.value(y).data(), base.data());
}

#[test]
fn additive_scores_symmetrize() {
    // (f(q,k) + f(k,q)) / 2 with f(a,b) = w·tanh(A a + B b) is symmetric.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b, w) = (random(&[4, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4], &mut rng));
    let x = random(&[1, 3, 4], &mut rng);
    let mut t = Tape::inference();
    let (a, b, w, x) = (t.constant(a), t.constant(b), t.constant(w), t.constant(x));
    let (xa, xb) = (t.matmul(x, a).unwrap(), t.matmul(x, b).unwrap());
    let s1 = t.additive_scores(xa, xb, w).unwrap();
    let s2 = t.additive_scores(xb, xa, w).unwrap();
    let s = t.add(s1, s2).unwrap();
    let s = t.value(s).data().to_vec();
    for i in 0..3 {
        for j in 0..3 {
            assert!((s[i * 3 + j] - s[j * 3 + i]).abs() < 1e-14);
        }
    }
}

// ---------------------------------------------------------------------------
// Per-primitive gradient checks over random shapes and values.

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..4, 1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn grad_matmul((m, k, n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = [random(&[2, m, k], &mut rng), random(&[k, n], &mut rng)];
        check(&pts, |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn grad_bmm((m, k, n, seed) in dims(), trans in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bshape = if trans { [2, n, k] } else { [2, k, n] };
        let pts = [random(&[2, m, k], &mut rng), random(&bshape, &mut rng)];
        check(&pts, |t, v| { let y = t.bmm(v[0], v[1], trans)?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn grad_self_bmm((m, k, _n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = [random(&[2, m, k], &mut rng)];
        check(&pts, |t, v| { let y = t.bmm(v[0], v[0], true)?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn grad_elementwise((m, k, _n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = [random(&[m, k], &mut rng), random(&[m, k], &mut rng), random(&[k], &mut rng)];
        check(&pts, |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.mul(a, v[1])?;
            let c = t.scale(b, -1.7)?;
            let d = t.add_bias(c, v[2])?;
            let e = t.mul_const(d, vec![0.5; m * k].into())?;
            weighted_sum(t, e, seed)
        });
    }

    #[test]
    fn grad_concat_tile_gather_reshape((m, k, n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = [random(&[m, k], &mut rng), random(&[m, n], &mut rng)];
        check(&pts, |t, v| {
            let c = t.concat(&[v[0], v[1], v[0]])?;
            let tl = t.tile(c, 2)?;
            let r = t.reshape(tl, vec![2 * m, 2 * k + n])?;
            let rows: Vec<usize> = (0..2 * m).rev().chain([0, 0]).collect();
            let g = t.gather_rows(r, &rows)?;
            weighted_sum(t, g, seed)
        });
    }

    #[test]
    fn grad_masked_softmax((m, k, _n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = k + 1;
        let mut ignored: Vec<bool> = (0..m * k).map(|_| rng.gen_bool(0.3)).collect();
        for r in 0..m { ignored[r * k] = false; }
        let pts = [random(&[m, k], &mut rng)];
        check(&pts, |t, v| { let y = t.masked_softmax(v[0], &ignored)?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn grad_nonlinearities((m, k, _n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep relu inputs away from the kink
        let mut x = random(&[m, k], &mut rng);
        for v in x.data_mut() { if v.abs() < 0.05 { *v += 0.1; } }
        check(&[x], |t, v| {
            let a = t.sigmoid(v[0])?;
            let b = t.tanh(v[0])?;
            let c = t.relu(v[0])?;
            let s = t.add(a, b)?;
            let s = t.add(s, c)?;
            weighted_sum(t, s, seed)
        });
    }

    #[test]
    fn grad_layer_norm((m, k, _n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = k + 1;
        let pts = [random(&[m, k], &mut rng), random(&[k], &mut rng), random(&[k], &mut rng)];
        check(&pts, |t, v| { let y = t.layer_norm(v[0], v[1], v[2])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn grad_conv1d((b, l, c, seed) in dims(), cout in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = [random(&[b, l + 1, c], &mut rng), random(&[3, c, cout], &mut rng), random(&[cout], &mut rng)];
        check(&pts, |t, v| { let y = t.conv1d(v[0], v[1], v[2])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn grad_additive_scores((lq, lk, h, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = [random(&[2, lq, h], &mut rng), random(&[2, lk, h], &mut rng), random(&[h], &mut rng)];
        check(&pts, |t, v| { let y = t.additive_scores(v[0], v[1], v[2])?; weighted_sum(t, y, seed) });
    }

    #[test]
    fn grad_losses((m, k, _n, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = k + 1;
        let targets: Vec<f64> = (0..m * k).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let weights: Vec<f64> = (0..m * k).map(|_| rng.gen_range(0.0..2.0)).collect();
        let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let rw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
        let mut ignored = vec![false; m * k];
        for r in 0..m { for j in 0..k { ignored[r * k + j] = j != idx[r] && rng.gen_bool(0.3); } }
        let (t1, w1): (Rc<[f64]>, Rc<[f64]>) = (targets.into(), weights.into());
        check(&[random(&[m, k], &mut rng)], |t, v| {
            let a = t.bce_with_logits(v[0], t1.clone(), w1.clone())?;
            let b = t.softmax_xent(v[0], Some(&ignored), &idx, &rw)?;
            t.add(a, b)
        });
    }
}
