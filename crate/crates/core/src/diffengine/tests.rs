use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arr(shape: &[usize], data: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data.to_vec()).unwrap()
}

/// Check the tape gradient of a scalar-valued builder against central
/// finite differences over a flat parameter vector.
fn check_builder<F>(build: F, theta: &[f64], h: f64) -> f64
where
    F: Fn(&Tape, &Var) -> Var,
{
    let f = |t: &[f64]| {
        let tape = Tape::new();
        let x = tape.vector(t);
        build(&tape, &x).scalar_value()
    };
    let g = |t: &[f64]| {
        let tape = Tape::new();
        let x = tape.vector(t);
        let loss = build(&tape, &x);
        backward(&loss, &[&x]).unwrap()[0].iter().copied().collect()
    };
    finite_difference_check(&f, &g, theta, h)
}

#[test]
fn add_basic() {
    let tape = Tape::new();
    let a = tape.vector(&[2.0]);
    let b = tape.vector(&[3.0]);
    assert_eq!((&a + &b).value(), arr(&[1], &[5.0]));
}

#[test]
fn mul_identity() {
    let tape = Tape::new();
    let x = tape.vector(&[1.5, -2.0, 0.25]);
    let ones = tape.vector(&[1.0, 1.0, 1.0]);
    assert_eq!((&x * &ones).value(), x.value());
}

#[test]
fn softplus_beta100_at_zero() {
    let tape = Tape::new();
    let x = tape.scalar(0.0);
    let y = x.softplus(100.0);
    assert!((y.scalar_value() - 2.0_f64.ln() / 100.0).abs() < 1e-12);
}

#[test]
fn backward_square() {
    let tape = Tape::new();
    let x = tape.scalar(3.0);
    let loss = x.square();
    let g = backward(&loss, &[&x]).unwrap();
    assert!((g[0][[]] - 6.0).abs() < 1e-12);
}

#[test]
fn backward_matmul_identity() {
    let tape = Tape::new();
    let w = tape.input(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let v = tape.input(arr(&[2, 1], &[1.0, 2.0]));
    let loss = w.matmul(&v).sum();
    let g = backward(&loss, &[&v]).unwrap();
    assert_eq!(g[0], arr(&[2, 1], &[1.0, 1.0]));
}

#[test]
fn backward_of_loss_wrt_itself_is_one() {
    let tape = Tape::new();
    let x = tape.scalar(4.0);
    let loss = x.exp();
    let g = grad(&loss, &[&loss]);
    assert_eq!(g[0].scalar_value(), 1.0);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.vector(&[1.0, 2.0]);
    match backward(&x, &[&x]) {
        Err(DiffError::NonScalarLoss(shape)) => assert_eq!(shape, vec![2]),
        other => panic!("expected NonScalarLoss, got {other:?}"),
    }
}

#[test]
fn shape_mismatch_diagnostic() {
    let tape = Tape::new();
    let a = tape.input(arr(&[2, 3], &[0.0; 6]));
    let b = tape.input(arr(&[2, 2], &[0.0; 4]));
    let err = tape.apply(Op::MatMul(a.id(), b.id())).err();
    match err {
        Some(DiffError::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
        }
        other => panic!("expected ShapeMismatch, got {other:?}"),
    }
    // Incompatible elementwise broadcast is also rejected.
    let c = tape.input(arr(&[3], &[0.0; 3]));
    assert!(tape.apply(Op::Add(b.id(), c.id())).is_err());
}

#[test]
fn fd_check_cube() {
    let f = |t: &[f64]| t[0].powi(3);
    let g = |t: &[f64]| vec![3.0 * t[0] * t[0]];
    let err = finite_difference_check(&f, &g, &[2.0], 1e-5);
    assert!(err < 1e-8, "err = {err}");
}

#[test]
fn two_layer_mlp_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (din, dh) = (3, 5);
    let n_params = din * dh + dh + dh + 1;
    let theta: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let x0 = [0.3, -0.4, 0.9];

    let build = move |tape: &Tape, p: &Var| {
        let w1 = p.slice_cols_of_vec(0, din * dh, &[din, dh]);
        let b1 = p.slice_cols_of_vec(din * dh, din * dh + dh, &[dh]);
        let w2 = p.slice_cols_of_vec(din * dh + dh, din * dh + dh + dh, &[dh, 1]);
        let b2 = p.slice_cols_of_vec(n_params - 1, n_params, &[1]);
        let x = tape.input(arr(&[1, din], &x0));
        let h = &(&x.matmul(&w1) + &b1).softplus(2.0);
        let y = &h.matmul(&w2) + &b2;
        y.sum()
    };
    let err = check_builder(build, &theta, 1e-5);
    assert!(err < 1e-5, "max relative error {err}");
}

// Helper used by the MLP test: slice a 1-d parameter vector and reshape.
impl Var {
    fn slice_cols_of_vec(&self, start: usize, end: usize, shape: &[usize]) -> Var {
        let n = self.shape()[0];
        self.reshape(&[1, n]).slice_cols(start, end).reshape(shape)
    }
}

#[test]
fn linearity_of_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let xv: Vec<f64> = (0..4).map(|_| rng.gen_range(0.2..1.5)).collect();
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));

        let grads = |scale_f: f64, scale_g: f64| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.vector(&xv);
            let f = x.square().sum();
            let g = x.exp().sum();
            let loss = &(&f * scale_f) + &(&g * scale_g);
            backward(&loss, &[&x]).unwrap()[0].iter().copied().collect()
        };
        let gf = grads(1.0, 0.0);
        let gg = grads(0.0, 1.0);
        let gc = grads(a, b);
        for i in 0..4 {
            assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() < 1e-10);
        }
    }
}

#[test]
fn max_ties_flow_to_first_argument() {
    let tape = Tape::new();
    let a = tape.scalar(1.0);
    let b = tape.scalar(1.0);
    let loss = a.maxe(&b);
    let g = backward(&loss, &[&a, &b]).unwrap();
    assert_eq!(g[0][[]], 1.0);
    assert_eq!(g[1][[]], 0.0);
}

#[test]
fn second_order_gradient_of_gradient() {
    // f(x) = sum(x^3); n = df/dx = 3x^2; loss = sum(n * c).
    // d loss / d x = 6 x * c — exercised through taped backward twice.
    let tape = Tape::new();
    let x = tape.vector(&[0.5, -1.2]);
    let c = tape.vector(&[2.0, 3.0]);
    let f = x.powc(3.0).sum();
    let n = grad(&f, &[&x]).remove(0);
    let loss = (&n * &c).sum();
    let g = backward(&loss, &[&x]).unwrap();
    assert!((g[0][[0]] - 6.0 * 0.5 * 2.0).abs() < 1e-12);
    assert!((g[0][[1]] - 6.0 * -1.2 * 3.0).abs() < 1e-12);
}

#[test]
fn determinism_same_seed_same_bits() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xv: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let x = tape.vector(&xv);
        let loss = (&x.sin() * &x.exp()).sum();
        let g = backward(&loss, &[&x]).unwrap();
        (vec![loss.scalar_value()], g[0].iter().copied().collect())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1[0].to_bits(), v2[0].to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

/// Every primitive VJP against finite differences on generic inputs.
#[test]
fn primitive_vjps_match_fd() {
    let theta6 = [0.4, -0.7, 1.3, 0.9, -0.2, 0.6];
    let theta_pos = [0.4, 0.7, 1.3, 0.9, 0.2, 0.6];

    type Builder = fn(&Tape, &Var) -> Var;
    let cases: Vec<(&str, Builder, &[f64])> = vec![
        ("add", |_, x| (&x.slice3(0) + &x.slice3(1)).sum(), &theta6),
        ("sub", |_, x| (&x.slice3(0) - &x.slice3(1)).sum(), &theta6),
        ("mul", |_, x| (&x.slice3(0) * &x.slice3(1)).sum(), &theta6),
        ("div", |_, x| (&x.slice3(0) / &x.slice3(1)).sum(), &theta_pos),
        ("neg", |_, x| x.neg().sum(), &theta6),
        ("exp", |_, x| x.exp().sum(), &theta6),
        ("ln", |_, x| x.ln().sum(), &theta_pos),
        ("sqrt", |_, x| x.sqrt().sum(), &theta_pos),
        ("sin", |_, x| x.sin().sum(), &theta6),
        ("cos", |_, x| x.cos().sum(), &theta6),
        ("sigmoid", |_, x| x.sigmoid().sum(), &theta6),
        ("softplus", |_, x| x.softplus(100.0).square().sum(), &theta6),
        ("relu", |_, x| x.relu().square().sum(), &theta6),
        ("max", |_, x| x.slice3(0).maxe(&x.slice3(1)).sum(), &theta6),
        ("min", |_, x| x.slice3(0).mine(&x.slice3(1)).sum(), &theta6),
        ("pow_const", |_, x| x.powc(2.5).sum(), &theta_pos),
        ("matmul", |_, x| {
            let a = x.reshape(&[1, 6]).slice_cols(0, 4).reshape(&[2, 2]);
            let b = x.reshape(&[1, 6]).slice_cols(2, 6).reshape(&[2, 2]);
            a.matmul(&b).square().sum()
        }, &theta6),
        ("transpose", |_, x| {
            x.reshape(&[2, 3]).t().powc(3.0).sum()
        }, &theta6),
        ("sum_to", |_, x| {
            x.reshape(&[2, 3]).sum_to(&[3]).square().sum()
        }, &theta6),
        ("broadcast_to", |_, x| {
            let row = x.reshape(&[1, 6]).slice_cols(0, 3).reshape(&[3]);
            row.broadcast(&[4, 3]).square().sum()
        }, &theta6),
        ("prod_axis", |_, x| x.reshape(&[2, 3]).prod_axis(1).sum(), &theta_pos),
        ("reshape", |_, x| x.reshape(&[3, 2]).square().sum(), &theta6),
        ("slice_pad", |_, x| {
            x.reshape(&[2, 3]).slice_cols(1, 3).square().sum()
        }, &theta6),
        ("concat", |_, x| {
            let a = x.reshape(&[2, 3]).slice_cols(0, 1);
            let b = x.reshape(&[2, 3]).slice_cols(1, 3);
            concat_cols(&[&b, &a]).powc(3.0).sum()
        }, &theta6),
        ("gather", |_, x| {
            x.reshape(&[3, 2]).gather(&[2, 0, 2]).square().sum()
        }, &theta6),
    ];

    for (name, build, theta) in cases {
        let err = check_builder(build, theta, 1e-6);
        assert!(err < 1e-5, "primitive `{name}` VJP error {err}");
    }
}

impl Var {
    /// First or second half of a 6-vector, as a 3-vector.
    fn slice3(&self, half: usize) -> Var {
        self.reshape(&[1, 6]).slice_cols(3 * half, 3 * half + 3).reshape(&[3])
    }
}
