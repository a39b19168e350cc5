use crate::error::{Result, TensorError};
use crate::ops::arith::{expand, reduce_to};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

fn keepdim_shape(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut keep = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return Err(TensorError::invalid(
                op,
                format!("axis {a} out of range for shape {shape:?}"),
            ));
        }
        keep[a] = 1;
    }
    Ok(keep)
}

impl<T: Scalar> Var<T> {
    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let keep = keepdim_shape("sum_axes", &in_shape, axes)?;
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let out = reduce_to(&x, &keep).reshape(&out_shape)?;
        self.tape().record("sum_axes", out, &[self], move |g, _, _| {
            let g = g.reshape(&keep).expect("keepdim shape");
            vec![Some(expand("sum_axes", &g, &in_shape).expect("keepdim shape"))]
        })
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        self.sum_axes(axes)?.scale(T::one() / T::lit(count as f64))
    }

    pub fn sum_all(&self) -> Result<Var<T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum_all());
        self.tape().record("sum_all", out, &[self], move |g, _, _| {
            vec![Some(Tensor::full(&in_shape, g.data()[0]))]
        })
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        let n = T::lit(self.value().numel() as f64);
        self.sum_all()?.scale(T::one() / n)
    }

    /// Sum of absolute values.
    pub fn l1_norm(&self) -> Result<Var<T>> {
        self.abs()?.sum_all()
    }

    /// Euclidean norm over all entries.
    pub fn l2_norm(&self) -> Result<Var<T>> {
        self.square()?.sum_all()?.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn sum_over_middle_axis() {
        let tape = Tape::new();
        let x = tape.param(Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64));
        let s = x.sum_axes(&[1]).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        assert_eq!(s.value().data(), &[6., 9., 24., 27.]);
        let g = s.sum_all().unwrap().backward().unwrap();
        assert!(g.get(&x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mean_over_spatial_axes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let m = x.mean_axes(&[1, 2]).unwrap();
        assert_eq!(m.value().data(), &[3., 4.]);
    }

    #[test]
    fn norms() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_vec(&[2], vec![3., -4.]).unwrap());
        assert_eq!(x.l1_norm().unwrap().value().data(), &[7.]);
        assert_eq!(x.l2_norm().unwrap().value().data(), &[5.]);
    }
}
