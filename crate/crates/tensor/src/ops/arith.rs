//! Elementwise arithmetic with one-directional broadcasting, and unary maps.
//!
//! The right operand may broadcast into the left operand's shape: aligned
//! from the trailing end, every right dimension equals the left one or is 1,
//! and missing leading dimensions count as 1. The output keeps the left shape.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{numel, strides, strided_gather, Tensor};

/// Source strides reading `small` as if it had shape `out` (0 on broadcast axes).
fn broadcast_strides(op: &'static str, out: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if small.len() > out.len() {
        return Err(TensorError::mismatch(op, out, small));
    }
    let lead = out.len() - small.len();
    let st = strides(small);
    let mut res = vec![0; out.len()];
    for (i, &d) in small.iter().enumerate() {
        if d == out[lead + i] {
            res[lead + i] = if d == 1 { 0 } else { st[i] };
        } else if d == 1 {
            res[lead + i] = 0;
        } else {
            return Err(TensorError::mismatch(op, out, small));
        }
    }
    Ok(res)
}

/// Materializes `t` broadcast to `shape`.
pub(crate) fn expand<T: Scalar>(op: &'static str, t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let st = broadcast_strides(op, shape, t.shape())?;
    Ok(Tensor::raw(shape.to_vec(), strided_gather(t.data(), shape, &st)))
}

/// Sums `g` (shape `big`) down to `small`, the adjoint of [`expand`].
pub(crate) fn reduce_to<T: Scalar>(g: &Tensor<T>, small: &[usize]) -> Tensor<T> {
    if g.shape() == small {
        return g.clone();
    }
    let big = g.shape();
    let st = broadcast_strides("reduce_to", big, small).expect("validated in forward");
    let mut out = vec![T::zero(); numel(small)];
    let rank = big.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in g.data() {
        out[off] += v;
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < big[ax] {
                break;
            }
            off -= st[ax] * big[ax];
            idx[ax] = 0;
        }
    }
    Tensor::raw(small.to_vec(), out)
}

fn zip_into<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn ensure_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), rhs.value());
        let be = expand("add", &b, a.shape())?;
        let out = zip_into(&a, &be, |x, y| x + y);
        let b_shape = b.shape().to_vec();
        self.tape().record("add", out, &[self, rhs], move |g, _, _| {
            vec![Some(g.clone()), Some(reduce_to(g, &b_shape))]
        })
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), rhs.value());
        let be = expand("sub", &b, a.shape())?;
        let out = zip_into(&a, &be, |x, y| x - y);
        let b_shape = b.shape().to_vec();
        self.tape().record("sub", out, &[self, rhs], move |g, _, _| {
            vec![Some(g.clone()), Some(reduce_to(&g.map(|x| -x), &b_shape))]
        })
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), rhs.value());
        let be = expand("mul", &b, a.shape())?;
        let out = zip_into(&a, &be, |x, y| x * y);
        let b_shape = b.shape().to_vec();
        self.tape().record("mul", out, &[self, rhs], move |g, p, _| {
            let be = expand("mul", p[1], p[0].shape()).expect("validated in forward");
            let ga = zip_into(g, &be, |x, y| x * y);
            let gb = reduce_to(&zip_into(g, p[0], |x, y| x * y), &b_shape);
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn div(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), rhs.value());
        let be = expand("div", &b, a.shape())?;
        let out = zip_into(&a, &be, |x, y| x / y);
        ensure_finite("div", &out)?;
        let b_shape = b.shape().to_vec();
        self.tape().record("div", out, &[self, rhs], move |g, p, out| {
            let be = expand("div", p[1], p[0].shape()).expect("validated in forward");
            let ga = zip_into(g, &be, |x, y| x / y);
            let q = zip_into(out, &be, |o, y| -o / y);
            let gb = reduce_to(&zip_into(g, &q, |x, y| x * y), &b_shape);
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.scale(-T::one())
    }

    pub fn scale(&self, s: T) -> Result<Var<T>> {
        let out = self.value().map(|x| x * s);
        self.tape()
            .record("scale", out, &[self], move |g, _, _| vec![Some(g.map(|x| x * s))])
    }

    pub fn add_scalar(&self, s: T) -> Result<Var<T>> {
        let out = self.value().map(|x| x + s);
        self.tape()
            .record("add_scalar", out, &[self], |g, _, _| vec![Some(g.clone())])
    }

    /// Applies `f` with derivative `df(x, f(x))` elementwise.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        let x = self.value();
        let out = x.map(f);
        ensure_finite(op, &out)?;
        self.tape().record(op, out, &[self], move |g, p, out| {
            let d = Tensor::raw(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(p[0].data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            );
            vec![Some(d)]
        })
    }

    pub fn relu(&self) -> Result<Var<T>> {
        self.unary(
            "relu",
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&self) -> Result<Var<T>> {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let t = (k * (x + c * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
            },
        )
    }

    pub fn softplus(&self) -> Result<Var<T>> {
        self.unary(
            "softplus",
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Var<T>> {
        self.unary("log", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn abs(&self) -> Result<Var<T>> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&self) -> Result<Var<T>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Result<Var<T>> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4., 6.]);
    }

    #[test]
    fn bias_broadcast_and_its_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(t(&[3], &[10., 20., 30.]));
        let y = x.add(&b).unwrap();
        assert_eq!(y.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&b).data(), &[2., 2., 2.]);
    }

    #[test]
    fn trailing_singleton_broadcast() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[2., 4., 6., 8.]));
        let a = tape.param(t(&[2, 1], &[2., 4.]));
        let y = x.div(&a).unwrap();
        assert_eq!(y.value().data(), &[1., 2., 1.5, 2.]);
        let g = y.sum_all().unwrap().backward().unwrap();
        // d/da (x/a) = -x/a^2
        assert_eq!(g.get(&a).data(), &[-(2. + 4.) / 4., -(6. + 8.) / 16.]);
    }

    #[test]
    fn incompatible_broadcast_names_both_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let y = tape.constant(Tensor::<f64>::zeros(&[2]));
        let err = x.add(&y).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn division_by_zero_is_a_numeric_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[2]));
        let y = tape.constant(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(x.div(&y), Err(crate::TensorError::NonFinite { .. })));
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-800., 0., 800.]));
        let y = x.softplus().unwrap().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y.data()[2], 800.0);
    }
}
