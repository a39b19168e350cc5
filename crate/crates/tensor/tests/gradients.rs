//! Finite-difference checks for every differentiable op, plus tape
//! invariants. All in f64 with inputs drawn from N(0, 1), nudged away from
//! the relu/abs breakpoint.

use ammsm_tensor::{finite_diff_check, Result, Tape, Tensor, Var, DEFAULT_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-3;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() > 1e-3 {
            break v;
        }
    })
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
    let w = y.tape().constant(normal(&y.shape(), &mut rng));
    y.mul(&w)?.sum_all()
}

fn check_unary(name: &str, shape: &[usize], f: impl Fn(&Var<f64>) -> Result<Var<f64>>) {
    check_unary_with(name, shape, |t| t, f)
}

fn check_unary_with(
    name: &str,
    shape: &[usize],
    prep: impl Fn(Tensor<f64>) -> Tensor<f64>,
    f: impl Fn(&Var<f64>) -> Result<Var<f64>>,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = prep(normal(shape, &mut rng));
        let err = finite_diff_check(|v| weighted_sum(&f(v)?, seed), &x, DEFAULT_EPS).unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err}");
    }
}

/// Checks the gradient with respect to the first operand of a binary op
/// whose second operand is a fixed random constant, and vice versa.
fn check_binary(
    name: &str,
    a_shape: &[usize],
    b_shape: &[usize],
    prep_b: impl Fn(Tensor<f64>) -> Tensor<f64>,
    f: impl Fn(&Var<f64>, &Var<f64>) -> Result<Var<f64>>,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal(a_shape, &mut rng);
        let b = prep_b(normal(b_shape, &mut rng));
        let err_a = finite_diff_check(
            |v| {
                let bv = v.tape().constant(b.clone());
                weighted_sum(&f(v, &bv)?, seed)
            },
            &a,
            DEFAULT_EPS,
        )
        .unwrap();
        let err_b = finite_diff_check(
            |v| {
                let av = v.tape().constant(a.clone());
                weighted_sum(&f(&av, v)?, seed)
            },
            &b,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err_a < TOL && err_b < TOL, "{name} seed {seed}: {err_a} / {err_b}");
    }
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.signum() * (v.abs() + 0.5))
}

#[test]
fn elementwise_binary_ops() {
    check_binary("add", &[3, 4], &[3, 4], |t| t, |a, b| a.add(b));
    check_binary("add-bias", &[3, 4], &[4], |t| t, |a, b| a.add(b));
    check_binary("sub", &[2, 3, 2], &[3, 1], |t| t, |a, b| a.sub(b));
    check_binary("mul", &[3, 4], &[3, 4], |t| t, |a, b| a.mul(b));
    check_binary("mul-gate", &[5, 4], &[5, 1], |t| t, |a, b| a.mul(b));
    check_binary("div", &[3, 4], &[3, 4], away_from_zero, |a, b| a.div(b));
    check_binary("div-gate", &[6, 2], &[6, 1], away_from_zero, |a, b| a.div(b));
}

#[test]
fn matrix_products() {
    check_binary("matmul", &[3, 5], &[5, 2], |t| t, |a, b| a.matmul(b));
    check_binary("matmul-shared", &[2, 3, 5], &[5, 4], |t| t, |a, b| a.matmul(b));
    check_binary("bmm", &[2, 3, 4], &[2, 4, 3], |t| t, |a, b| a.matmul(b));
}

#[test]
fn shape_ops() {
    check_unary("transpose", &[3, 4], |v| v.transpose(0, 1));
    check_unary("permute", &[2, 3, 4, 2], |v| v.permute(&[0, 2, 1, 3]));
    check_unary("reshape", &[2, 6], |v| v.reshape(&[3, 4]));
    check_unary("slice", &[3, 5, 2], |v| v.slice(1, 1, 4));
    check_unary("pad_end", &[2, 3], |v| v.pad_end(1, 2));
    check_unary("concat", &[2, 3], |v| {
        let sq = v.square()?;
        Var::concat(&[v, &sq], 0)
    });
    check_unary("gather_rows", &[2, 5, 3], |v| v.gather_rows(&[vec![4, 1], vec![0, 2]]));
    check_unary("scatter_rows", &[2, 2, 3], |v| v.scatter_rows(&[vec![4, 1], vec![0, 2]], 5));
    check_unary("upsample2", &[1, 2, 3, 2], |v| v.upsample2());
    check_binary("select_rows", &[3, 2, 2], &[3, 2, 2], |t| t, |a, b| {
        a.select_rows(b, &[true, false, false, true, true, false])
    });
}

#[test]
fn reductions() {
    check_unary("sum_axes", &[2, 3, 4], |v| v.sum_axes(&[1]));
    check_unary("mean_axes", &[2, 3, 3, 2], |v| v.mean_axes(&[1, 2]));
    check_unary("sum_all", &[4, 2], |v| v.sum_all());
    check_unary("mean_all", &[4, 2], |v| v.mean_all());
    check_unary("l1_norm", &[7], |v| v.l1_norm());
    check_unary("l2_norm", &[7], |v| v.l2_norm());
}

#[test]
fn pointwise_nonlinearities() {
    check_unary("relu", &[10], |v| v.relu());
    check_unary("gelu", &[10], |v| v.gelu());
    check_unary("softplus", &[10], |v| v.softplus());
    check_unary("exp", &[10], |v| v.exp());
    check_unary_with("log", &[10], |t| t.map(|x| x.abs() + 0.1), |v| v.log());
    check_unary("abs", &[10], |v| v.abs());
    check_unary("neg-scale", &[10], |v| v.neg()?.scale(2.5)?.add_scalar(1.0));
}

#[test]
fn normalization_and_losses() {
    check_unary("softmax", &[3, 5], |v| v.softmax());
    check_unary("layernorm", &[4, 6], |v| v.layernorm(1e-5));
    check_unary("cross_entropy", &[4, 3], |v| v.cross_entropy(&[0, 2, 1, 2]));
}

#[test]
fn convolutions() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check_binary("conv2d", &[2, 5, 5, 3], &[3, 3, 3, 2], |t| t, |x, w| x.conv2d(w, None, stride, pad));
    }
    check_binary("conv2d-patch", &[1, 8, 8, 2], &[4, 4, 2, 3], |t| t, |x, w| x.conv2d(w, None, 4, 0));
    check_binary("conv2d-1x1", &[2, 3, 3, 4], &[1, 1, 4, 2], |t| t, |x, w| x.conv2d(w, None, 1, 0));
    check_binary("conv2d-bias", &[1, 4, 4, 2], &[2], |t| t, |x, b| {
        let w = x.tape().constant(Tensor::from_fn(&[3, 3, 2, 2], |i| (i as f64 * 0.37).sin()));
        x.conv2d(&w, Some(b), 1, 1)
    });
    check_binary("depthwise", &[2, 4, 5, 3], &[3, 3, 3], |t| t, |x, w| x.depthwise_conv2d(w, None, 1));
    check_binary("depthwise-bias", &[1, 4, 4, 3], &[3], |t| t, |x, b| {
        let w = x.tape().constant(Tensor::from_fn(&[3, 3, 3], |i| (i as f64 * 0.91).cos()));
        x.depthwise_conv2d(&w, Some(b), 1)
    });
}

#[test]
fn l1_gradient_is_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = normal(&[9], &mut rng);
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let g = xv.l1_norm().unwrap().backward().unwrap().get(&xv);
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert_eq!(*gi, xi.signum());
    }
    let err = finite_diff_check(|v| v.l1_norm(), &x, DEFAULT_EPS).unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn backward_visits_in_reverse_recording_order() {
    let tape = Tape::new();
    let x = tape.param(Tensor::<f64>::from_vec(&[2], vec![0.5, -1.5]).unwrap());
    let y = x.square().unwrap();
    let z = y.exp().unwrap();
    let w = x.mul(&z).unwrap();
    let loss = w.sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let visited = grads.visited().to_vec();
    assert_eq!(visited, vec![loss.id(), w.id(), z.id(), y.id()]);
    assert!(visited.windows(2).all(|p| p[0] > p[1]));
}

#[test]
fn off_path_gradient_is_exactly_zero() {
    let tape = Tape::new();
    let x = tape.param(Tensor::<f64>::ones(&[3]));
    let unused = tape.param(Tensor::<f64>::ones(&[2, 2]));
    let _side = unused.exp().unwrap();
    let loss = x.square().unwrap().sum_all().unwrap();
    let g = loss.backward().unwrap();
    assert_eq!(g.get(&unused), Tensor::zeros(&[2, 2]));
}

#[test]
fn constants_do_not_record_backward_rules() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::<f64>::ones(&[2]));
    let y = c.exp().unwrap().sum_all().unwrap();
    assert!(!y.requires_grad());
    assert!(y.backward().unwrap().visited().is_empty());
}

#[test]
fn mixing_tapes_is_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.constant(Tensor::<f64>::ones(&[2]));
    let b = t2.constant(Tensor::<f64>::ones(&[2]));
    assert!(a.add(&b).is_err());
}

#[test]
fn works_in_single_precision() {
    let tape = Tape::new();
    let x = tape.param(Tensor::<f32>::from_vec(&[3], vec![1., 2., 3.]).unwrap());
    let g = x.square().unwrap().sum_all().unwrap().backward().unwrap().get(&x);
    assert_eq!(g.data(), &[2f32, 4., 6.]);
}
