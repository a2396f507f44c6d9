use fslab_core::models::{AdapterParams, Linear};
use fslab_core::train::optim::*;
use ndarray::array;

fn scalar(v: f64) -> AdapterParams {
    AdapterParams {
        layers: vec![Linear {
            weight: array![[v]],
            bias: array![0.0],
        }],
        residual: true,
    }
}

#[test]
fn zero_gradient_no_decay_is_noop() {
    let mut p = scalar(1.25);
    let hyper = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    let mut opt = AdamW::new(&p, hyper);
    for _ in 0..5 {
        opt.step(&mut p, &scalar(0.0), 0.1);
    }
    assert_eq!(p, scalar(1.25));
}

#[test]
fn quadratic_trace_matches_hand_steps() {
    // f(x) = x^2 / 2 from x = 1, grad = x
    let hyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let lr = 0.1;
    let mut p = scalar(1.0);
    let mut opt = AdamW::new(&p, hyper);

    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        let g = x;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x -= lr * 0.01 * x;
        x -= lr * mh / (vh.sqrt() + 1e-8);

        let g_struct = scalar(p.layers[0].weight[[0, 0]]);
        opt.step(&mut p, &g_struct, lr);
        let got = p.layers[0].weight[[0, 0]];
        assert!((got - x).abs() < 1e-14, "step {t}: {got} vs {x}");
    }
}

#[test]
fn first_step_is_lr_sized() {
    let hyper = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    let mut p = scalar(1.0);
    let mut opt = AdamW::new(&p, hyper);
    opt.step(&mut p, &scalar(1.0), 0.1);
    assert!((p.layers[0].weight[[0, 0]] - 0.9).abs() < 1e-7);
}
