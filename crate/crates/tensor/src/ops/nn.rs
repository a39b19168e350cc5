use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

fn last_dim<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| TensorError::invalid(op, "needs at least one axis"))
}

fn softmax_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    out
}

impl<T: Scalar> Var<T> {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<T>> {
        let x = self.value();
        let d = last_dim("softmax", &x)?;
        let out = Tensor::raw(x.shape().to_vec(), softmax_rows(x.data(), d));
        self.tape().record("softmax", out, &[self], move |g, _, y| {
            let mut gx = Vec::with_capacity(g.numel());
            for (gr, yr) in g.data().chunks_exact(d).zip(y.data().chunks_exact(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
            }
            vec![Some(Tensor::raw(g.shape().to_vec(), gx))]
        })
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine terms).
    pub fn layernorm(&self, eps: T) -> Result<Var<T>> {
        let x = self.value();
        let d = last_dim("layernorm", &x)?;
        let dn = T::lit(d as f64);
        let mut out = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(x.numel() / d);
        for row in x.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        self.tape().record(
            "layernorm",
            Tensor::raw(x.shape().to_vec(), out),
            &[self],
            move |g, _, y| {
                let mut gx = Vec::with_capacity(g.numel());
                for ((gr, yr), &r) in g
                    .data()
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(&inv_std)
                {
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    gx.extend(gr.iter().zip(yr).map(|(&a, &b)| r * (a - mg - b * mgy)));
                }
                vec![Some(Tensor::raw(g.shape().to_vec(), gx))]
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under softmax of `[batch, classes]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<T>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("logits {s:?} do not match {} labels", labels.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let probs = softmax_rows(x.data(), c);
        let mut loss = T::zero();
        for (row, &l) in x.data().chunks_exact(c).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        let nn = T::lit(n as f64);
        let labels = labels.to_vec();
        self.tape().record(
            "cross_entropy",
            Tensor::scalar(loss / nn),
            &[self],
            move |g, _, _| {
                let scale = g.data()[0] / nn;
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * c + l] -= scale;
                }
                vec![Some(Tensor::raw(vec![n, c], gx))]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[3]));
        let y = x.softmax().unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[2, 4], |i| (i * i) as f64));
        let y = x.layernorm(0.0).unwrap().value();
        for row in y.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_vec(&[1, 3], vec![10., -10., -10.]).unwrap());
        let l0 = x.cross_entropy(&[0]).unwrap().value().data()[0];
        let l1 = x.cross_entropy(&[1]).unwrap().value().data()[0];
        let expect0 = (1.0 + 2.0 * (-20f64).exp()).ln();
        assert!((l0 - expect0).abs() < 1e-15 && (l0 - 4.1e-9).abs() < 1e-10);
        assert!((l1 - (20.0 + expect0)).abs() < 1e-12);
        assert!(x.cross_entropy(&[3]).is_err());
    }
}
