use std::f64::consts::PI;

use fslab_core::losses::*;
use fslab_core::spectral::circular_shift;
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn rand_mat(seed: u64, b: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_vec((b, d), rand_vec(seed, b * d)).unwrap()
}

fn entropy2(p: f64) -> f64 {
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

#[test]
fn amp_examples() {
    let x = [1.0, 0.0, 0.0, 0.0];
    assert_eq!(l_amp(&x, &x).unwrap(), 0.0);
    assert!((l_amp(&x, &[0.0; 4]).unwrap() - 1.0).abs() < 1e-15);
    let y = rand_vec(1, 16);
    for s in 0..16 {
        assert!(l_amp(&y, &circular_shift(&y, s)).unwrap() < 1e-24);
    }
    assert!(l_amp(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn pha_examples() {
    let a = [1.0, 0.0, 0.0, 0.0];
    let b = [0.0, 1.0, 0.0, 0.0];
    assert_eq!(l_pha(&a, &a, false).unwrap(), 0.0);
    let expect = 3.0 * PI * PI / 8.0;
    assert!((l_pha(&a, &b, false).unwrap() - expect).abs() < 1e-12);
    let y = rand_vec(2, 16);
    let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    assert!(l_pha(&y, &y2, false).unwrap() < 1e-24);
    assert!(l_pha(&a, &[0.0], false).is_err());
}

#[test]
fn fourier_examples() {
    let a = [1.0, 0.0, 0.0, 0.0];
    let b = [0.0, 1.0, 0.0, 0.0];
    let c = [0.0; 4];
    assert_eq!(l_fourier(&a, &a, false).unwrap(), 0.0);
    // delta vs zero gives amp 1; delta vs shifted delta gives pha 3 pi^2 / 8
    assert!((l_fourier(&a, &c, false).unwrap() - 1.0).abs() < 1e-12);
    assert!((l_fourier(&a, &b, false).unwrap() - 3.0 * PI * PI / 8.0).abs() < 1e-12);
    for seed in 0..10 {
        let (x, y) = (rand_vec(seed, 16), rand_vec(seed + 100, 16));
        let f = l_fourier(&x, &y, false).unwrap();
        let s = l_amp(&x, &y).unwrap() + l_pha(&x, &y, false).unwrap();
        assert!((f - s).abs() < 1e-12);
    }
}

#[test]
fn mse_signal_examples() {
    assert_eq!(l_mse_signal(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
    let (x, y) = (rand_vec(3, 33), rand_vec(4, 33));
    let mut oracle = 0.0;
    for i in 0..33 {
        oracle += (x[i] - y[i]) * (x[i] - y[i]);
    }
    assert!((l_mse_signal(&x, &y).unwrap() - oracle / 33.0).abs() < 1e-12);
}

#[test]
fn softclip_closed_form() {
    let e = array![[1.0, 0.0], [0.0, 1.0]];
    let p = std::f64::consts::E / (1.0 + std::f64::consts::E);
    let got = softclip_loss(e.view(), e.view(), 1.0, false).unwrap();
    assert!(
        (got - entropy2(p)).abs() < 1e-12,
        "{got} vs {}",
        entropy2(p)
    );
    assert!((softclip_floor(e.view(), 1.0).unwrap() - entropy2(p)).abs() < 1e-12);
}

#[test]
fn softclip_identical_is_minimum() {
    let ei = rand_mat(7, 5, 6);
    let floor = softclip_loss(ei.view(), ei.view(), 0.1, false).unwrap();
    assert!((floor - softclip_floor(ei.view(), 0.1).unwrap()).abs() < 1e-12);
    for seed in 0..20 {
        let eb = rand_mat(seed, 5, 6);
        assert!(softclip_loss(eb.view(), ei.view(), 0.1, false).unwrap() >= floor - 1e-9);
    }
}

#[test]
fn softclip_cold_limit_is_hard_infonce() {
    let ei = rand_mat(11, 4, 8);
    let eb = rand_mat(12, 4, 8);
    let tau = 1e-3;
    // hard-label cross-entropy oracle over normalized cosines
    let norm = |m: &Array2<f64>| {
        let n = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        m / &n.insert_axis(Axis(1))
    };
    let (u, v) = (norm(&eb), norm(&ei));
    let s = u.dot(&v.t()) / tau;
    let mut hard = 0.0;
    for i in 0..4 {
        let m = s.row(i).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + s.row(i).iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        hard += lse - s[[i, i]];
    }
    hard /= 4.0;
    let got = softclip_loss(eb.view(), ei.view(), tau, false).unwrap();
    assert!(
        (got - hard).abs() <= 1e-6 * hard.abs().max(1.0),
        "{got} vs {hard}"
    );
}

#[test]
fn softclip_errors() {
    let one = array![[1.0, 0.0]];
    assert!(softclip_loss(one.view(), one.view(), 0.1, false).is_err());
    let e = array![[1.0, 0.0], [0.0, 1.0]];
    assert!(softclip_loss(e.view(), e.view(), 0.0, false).is_err());
    let z = array![[1.0, 0.0], [0.0, 0.0]];
    assert!(softclip_loss(z.view(), e.view(), 0.1, false).is_err());
}

#[test]
fn prior_examples() {
    let a = rand_mat(1, 3, 4);
    assert_eq!(prior_loss(a.view(), a.view()).unwrap(), 0.0);
    let ones = Array2::<f64>::ones((1, 4));
    let zeros = Array2::<f64>::zeros((1, 4));
    assert_eq!(prior_loss(ones.view(), zeros.view()).unwrap(), 1.0);
    let b = rand_mat(2, 3, 4);
    let oracle: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / 12.0;
    assert!((prior_loss(a.view(), b.view()).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn semantic_weighting() {
    let (eb, er, ei) = (rand_mat(1, 4, 6), rand_mat(2, 4, 6), rand_mat(3, 4, 6));
    let w = LossWeights::default();
    let r = l_semantic(eb.view(), er.view(), ei.view(), 0.1, &w).unwrap();
    let sc = softclip_loss(eb.view(), ei.view(), 0.1, false).unwrap();
    let pr = prior_loss(er.view(), ei.view()).unwrap();
    assert!((r.total - (sc + 30.0 * pr)).abs() < 1e-10);
    let no_prior = LossWeights { w_prior: 0.0, ..w };
    let r = l_semantic(eb.view(), er.view(), ei.view(), 0.1, &no_prior).unwrap();
    assert_eq!(r.total, sc);
    let zero = LossWeights {
        w_softclip: 0.0,
        w_prior: 0.0,
        w_amp: 0.0,
        w_pha: 0.0,
    };
    assert_eq!(
        l_semantic(eb.view(), er.view(), ei.view(), 0.1, &zero)
            .unwrap()
            .total,
        0.0
    );
}

#[test]
fn total_composition() {
    let (eb, er, ei) = (rand_mat(1, 3, 5), rand_mat(2, 3, 5), rand_mat(3, 3, 5));
    let (xi, xj) = (rand_mat(4, 3, 8), rand_mat(5, 3, 8));
    let w = LossWeights::default();
    let r = l_total(
        eb.view(),
        er.view(),
        ei.view(),
        xi.view(),
        xj.view(),
        0.1,
        &w,
    )
    .unwrap();
    let mut amp = 0.0;
    let mut pha = 0.0;
    for k in 0..3 {
        amp += l_amp(&xi.row(k).to_vec(), &xj.row(k).to_vec()).unwrap() / 3.0;
        pha += l_pha(&xi.row(k).to_vec(), &xj.row(k).to_vec(), false).unwrap() / 3.0;
    }
    let sc = softclip_loss(eb.view(), ei.view(), 0.1, false).unwrap();
    let pr = prior_loss(er.view(), ei.view()).unwrap();
    let expect = sc + 30.0 * pr + 2.0 * amp + 2.0 * pha;
    assert!((r.total - expect).abs() < 1e-10);
    assert!((r.total - r.weighted_sum()).abs() < 1e-10);

    let w0 = LossWeights {
        w_amp: 0.0,
        w_pha: 0.0,
        ..w
    };
    let t = l_total(
        eb.view(),
        er.view(),
        ei.view(),
        xi.view(),
        xj.view(),
        0.1,
        &w0,
    )
    .unwrap();
    let s = l_semantic(eb.view(), er.view(), ei.view(), 0.1, &w0).unwrap();
    assert_eq!(t.total, s.total);
}

#[test]
fn amp_grad_zero_at_match() {
    let x = rand_vec(9, 16);
    let (_, g, _) = l_amp_grad(&x, &x).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-15));
}

fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], g: &[f64]) {
    let h = 1e-6;
    for k in 0..x.len() {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[k] += h;
        m[k] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
        assert!(err < 1e-5, "component {k}: analytic {} fd {fd}", g[k]);
    }
}

#[test]
fn spectral_grads_match_finite_differences() {
    for seed in 0..5 {
        let (x, y) = (rand_vec(seed, 16), rand_vec(seed + 50, 16));
        let (_, gx, gy) = l_amp_grad(&x, &y).unwrap();
        fd_check(|v| l_amp(v, &y).unwrap(), &x, &gx);
        fd_check(|v| l_amp(&x, v).unwrap(), &y, &gy);
        for wrap in [false, true] {
            let (_, gx, gy) = l_pha_grad(&x, &y, wrap).unwrap();
            fd_check(|v| l_pha(v, &y, wrap).unwrap(), &x, &gx);
            fd_check(|v| l_pha(&x, v, wrap).unwrap(), &y, &gy);
        }
        let (_, gx, gy) = l_mse_signal_grad(&x, &y).unwrap();
        fd_check(|v| l_mse_signal(v, &y).unwrap(), &x, &gx);
        fd_check(|v| l_mse_signal(&x, v).unwrap(), &y, &gy);
    }
}

#[test]
fn softclip_grads_match_finite_differences() {
    for bidir in [false, true] {
        for seed in 0..3 {
            let (eb, ei) = (rand_mat(seed, 4, 8), rand_mat(seed + 9, 4, 8));
            let (_, gb, gi) = softclip_grad(eb.view(), ei.view(), 0.1, bidir).unwrap();
            let flat = |m: &Array2<f64>| m.iter().copied().collect::<Vec<_>>();
            let shape = |v: &[f64]| Array2::from_shape_vec((4, 8), v.to_vec()).unwrap();
            fd_check(
                |v| softclip_loss(shape(v).view(), ei.view(), 0.1, bidir).unwrap(),
                &flat(&eb),
                &flat(&gb),
            );
            fd_check(
                |v| softclip_loss(eb.view(), shape(v).view(), 0.1, bidir).unwrap(),
                &flat(&ei),
                &flat(&gi),
            );
        }
    }
}

proptest! {
    #[test]
    fn losses_nonnegative(x in proptest::collection::vec(-3.0f64..3.0, 12), y in proptest::collection::vec(-3.0f64..3.0, 12)) {
        prop_assert!(l_amp(&x, &y).unwrap() >= 0.0);
        prop_assert!(l_pha(&x, &y, false).unwrap() >= 0.0);
        prop_assert!(l_mse_signal(&x, &y).unwrap() >= 0.0);
        prop_assert_eq!(l_amp(&x, &x).unwrap(), 0.0);
        prop_assert_eq!(l_pha(&x, &x, true).unwrap(), 0.0);
    }

    #[test]
    fn phase_scale_invariant(x in proptest::collection::vec(-3.0f64..3.0, 12), c in 0.01f64..100.0) {
        let y: Vec<f64> = x.iter().map(|v| c * v).collect();
        prop_assert!(l_pha(&x, &y, false).unwrap() < 1e-18);
    }
}
