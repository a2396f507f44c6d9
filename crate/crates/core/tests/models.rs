use fslab_core::config::{ModelConfig, Supervision};
use fslab_core::losses::{LossSpec, LossWeights};
use fslab_core::models::*;
use fslab_core::synthgen::rng;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_dims() -> ModelDims {
    ModelDims {
        input_len: 16,
        hidden: 12,
        n_blocks: 2,
        embed_dim: 8,
        projector_hidden: 10,
        prior_hidden: 9,
        adapter_depth: 1,
        adapter_residual: true,
    }
}

fn desk_dims() -> ModelDims {
    ModelDims::new(&ModelConfig::default(), 96, 64)
}

fn rand_mat(seed: u64, b: usize, d: usize) -> Array2<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((b, d), || r.random_range(-1.0..1.0))
}

#[test]
fn gelu_derivative_matches_fd() {
    for i in -40..=40 {
        let x = i as f64 * 0.1;
        let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
        assert!((fd - gelu_grad(x)).abs() < 1e-8);
    }
}

#[test]
fn zero_adapter_is_identity() {
    let (a, _) = init_params(3, &desk_dims()).unwrap();
    assert!(a.flat().iter().all(|&v| v == 0.0));
    let x = rand_mat(1, 5, 96);
    assert_eq!(a.forward(x.view()).unwrap(), x);
    for depth in [2, 3] {
        let a = AdapterParams::init(96, depth, true, &mut rng(1, 1)).unwrap();
        assert_eq!(a.forward(x.view()).unwrap(), x);
    }
    let a = AdapterParams::init(96, 1, false, &mut rng(1, 1)).unwrap();
    assert_eq!(a.forward(x.view()).unwrap(), x);
}

#[test]
fn adapter_hand_example() {
    let a = AdapterParams {
        layers: vec![Linear {
            weight: array![[1.0, 0.0], [0.0, 0.0]],
            bias: array![0.0, 1.0],
        }],
        residual: true,
    };
    let x = fslab_core::spectral::PooledVoxels::anonymous(vec![3.0, 4.0]);
    assert_eq!(adapter_forward(&x, &a).unwrap().values, vec![6.0, 5.0]);
    let short = fslab_core::spectral::PooledVoxels::anonymous(vec![3.0]);
    assert!(adapter_forward(&short, &a).is_err());
}

#[test]
fn adapter_param_counts() {
    let a = AdapterParams::init(96, 1, true, &mut rng(0, 0)).unwrap();
    assert_eq!(a.n_params(), 96 * 96 + 96);
    let full = 9600usize * 9600 + 9600;
    assert_eq!(full, 92_169_600);
    let (a, e) = init_params(0, &desk_dims()).unwrap();
    assert_eq!(count_params(&a, &e, Trainable::NONE), 0);
    let total = count_params(&a, &e, Trainable::ALL);
    let frac = count_params(&a, &e, Trainable::ADAPTER) as f64 / total as f64;
    assert!(frac < 0.15, "adapter fraction {frac}");
}

#[test]
fn encoder_shapes_and_zero_heads() {
    let (_, mut e) = init_params(0, &tiny_dims()).unwrap();
    let x = fslab_core::spectral::PooledVoxels::anonymous(vec![0.3; 16]);
    let (b, r) = encoder_forward(&x, &e).unwrap();
    assert_eq!((b.len(), r.len()), (8, 8));
    e.projector[2] = e.projector[2].zeros_like();
    e.prior_head[1] = e.prior_head[1].zeros_like();
    let zero = fslab_core::spectral::PooledVoxels::anonymous(vec![0.0; 16]);
    let (b, r) = encoder_forward(&zero, &e).unwrap();
    assert!(b.iter().chain(&r).all(|&v| v == 0.0));
    assert!(encoder_forward(
        &fslab_core::spectral::PooledVoxels::anonymous(vec![0.0; 3]),
        &e
    )
    .is_err());
}

#[test]
fn init_is_deterministic() {
    let (a1, e1) = init_params(7, &desk_dims()).unwrap();
    let (a2, e2) = init_params(7, &desk_dims()).unwrap();
    assert_eq!(a1.checksum(), a2.checksum());
    assert_eq!(e1.checksum(), e2.checksum());
    let (_, e3) = init_params(8, &desk_dims()).unwrap();
    assert_ne!(e1.checksum(), e3.checksum());
}

#[test]
fn forward_independent_of_batch_composition() {
    let (_, e) = init_params(0, &desk_dims()).unwrap();
    let x = rand_mat(5, 7, 96);
    let full = e.forward(x.view()).unwrap();
    for i in 0..7 {
        let one = e.forward(x.slice(ndarray::s![i..i + 1, ..])).unwrap();
        assert_eq!(one.brain.row(0), full.brain.row(i));
        assert_eq!(one.refined.row(0), full.refined.row(i));
    }
}

#[test]
fn all_frozen_gives_empty_gradients() {
    let (a, e) = init_params(0, &tiny_dims()).unwrap();
    let batch = Batch {
        inputs: rand_mat(1, 4, 16),
        targets: rand_mat(2, 4, 8),
        partners: None,
    };
    let spec = LossSpec::semantic(0.1, LossWeights::default());
    let (_, g) = grad(Some(&a), &e, &batch, &spec, Trainable::NONE).unwrap();
    assert!(g.is_empty());
    let (_, g) = grad(Some(&a), &e, &batch, &spec, Trainable::ADAPTER).unwrap();
    assert!(g.adapter.is_some() && g.encoder.is_none());
}

#[test]
fn amp_gradient_vanishes_at_matching_partners() {
    let (a, e) = init_params(0, &tiny_dims()).unwrap();
    let x = rand_mat(1, 3, 16);
    let batch = Batch {
        inputs: x.clone(),
        targets: rand_mat(2, 3, 8),
        partners: Some(x),
    };
    let zero_sem = LossWeights {
        w_softclip: 0.0,
        w_prior: 0.0,
        w_amp: 1.0,
        w_pha: 0.0,
    };
    let spec = LossSpec::semantic(0.1, zero_sem).with_supervision(Supervision::Amp);
    let (_, g) = grad(Some(&a), &e, &batch, &spec, Trainable::ADAPTER).unwrap();
    assert!(g.adapter.unwrap().flat().iter().all(|v| v.abs() < 1e-14));
}

fn fd_check_params<P: Params + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    stride: usize,
) {
    let h = 1e-6;
    let a = analytic.flat();
    let n = a.len();
    let mut idx = 0;
    let mut k = 0;
    while k < n {
        let perturb = |delta: f64| {
            let mut p = params.clone();
            let mut seen = 0;
            for mut t in p.tensors_mut() {
                if k < seen + t.len() {
                    let flat = t.as_slice_mut().expect("contiguous");
                    flat[k - seen] += delta;
                    break;
                }
                seen += t.len();
            }
            loss(&p)
        };
        let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
        let err = (fd - a[k]).abs() / fd.abs().max(a[k].abs()).max(1e-3);
        assert!(err < 1e-5, "param {k}: analytic {} fd {fd}", a[k]);
        idx += 1;
        k = idx * stride;
    }
}

#[test]
fn adapter_and_encoder_gradients_match_fd() {
    let dims = tiny_dims();
    let (mut a, e) = init_params(4, &dims).unwrap();
    // move away from the zero init so every branch is exercised
    for mut t in a.tensors_mut() {
        let mut r = ChaCha8Rng::seed_from_u64(t.len() as u64);
        t.mapv_inplace(|_| r.random_range(-0.2..0.2));
    }
    let batch = Batch {
        inputs: rand_mat(1, 4, 16),
        targets: rand_mat(2, 4, 8),
        partners: Some(rand_mat(3, 4, 16)),
    };
    let spec =
        LossSpec::semantic(0.1, LossWeights::default()).with_supervision(Supervision::Fourier);
    let (_, g) = grad(Some(&a), &e, &batch, &spec, Trainable::ALL).unwrap();
    let loss_a = |p: &AdapterParams| {
        grad(Some(p), &e, &batch, &spec, Trainable::NONE)
            .unwrap()
            .0
            .total
    };
    fd_check_params(&a, g.adapter.as_ref().unwrap(), loss_a, 7);
    let loss_e = |p: &EncoderParams| {
        grad(Some(&a), p, &batch, &spec, Trainable::NONE)
            .unwrap()
            .0
            .total
    };
    fd_check_params(&e, g.encoder.as_ref().unwrap(), loss_e, 5);
}

#[test]
fn checkpoint_round_trip() {
    let (a, e) = init_params(2, &tiny_dims()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &e, &tiny_dims(), 2, "pretrain", 10, 1.5).unwrap();
    let (back, meta) = load_encoder(dir.path()).unwrap();
    assert_eq!(back, e);
    assert_eq!(meta.step, 10);
    let adir = tempfile::tempdir().unwrap();
    save_checkpoint(adir.path(), &a, &tiny_dims(), 2, "adapt", 3, 0.5).unwrap();
    assert_eq!(load_adapter(adir.path()).unwrap().0, a);
}
