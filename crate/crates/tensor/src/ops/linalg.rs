use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// `[rows, k] x [k, n]`, optionally reading either operand transposed in place.
fn gemm_plain<T: Scalar>(
    rows: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, rows) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(rows, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

impl<T: Scalar> Var<T> {
    /// Matrix product.
    ///
    /// * `[.., m, k] x [k, n]`: leading lhs axes are flattened into rows and
    ///   the rhs is shared.
    /// * `[b, m, k] x [b, k, n]`: batched product.
    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        match sb.len() {
            2 if sb[0] == k => {
                let n = sb[1];
                let rows = a.numel() / k;
                let mut out = vec![T::zero(); rows * n];
                gemm_plain(rows, k, n, a.data(), false, b.data(), false, &mut out, false);
                let mut out_shape = sa.clone();
                *out_shape.last_mut().unwrap() = n;
                self.tape().record(
                    "matmul",
                    Tensor::raw(out_shape, out),
                    &[self, rhs],
                    move |g, p, _| {
                        let mut ga = vec![T::zero(); rows * k];
                        gemm_plain(rows, n, k, g.data(), false, p[1].data(), true, &mut ga, false);
                        let mut gb = vec![T::zero(); k * n];
                        gemm_plain(k, rows, n, p[0].data(), true, g.data(), false, &mut gb, false);
                        vec![
                            Some(Tensor::raw(p[0].shape().to_vec(), ga)),
                            Some(Tensor::raw(p[1].shape().to_vec(), gb)),
                        ]
                    },
                )
            }
            3 if sa.len() == 3 && sb[0] == sa[0] && sb[1] == k => {
                let (batch, m, n) = (sa[0], sa[1], sb[2]);
                let mut out = vec![T::zero(); batch * m * n];
                for i in 0..batch {
                    gemm_plain(
                        m,
                        k,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                self.tape().record(
                    "bmm",
                    Tensor::raw(vec![batch, m, n], out),
                    &[self, rhs],
                    move |g, p, _| {
                        let mut ga = vec![T::zero(); batch * m * k];
                        let mut gb = vec![T::zero(); batch * k * n];
                        for i in 0..batch {
                            let gi = &g.data()[i * m * n..(i + 1) * m * n];
                            gemm_plain(
                                m,
                                n,
                                k,
                                gi,
                                false,
                                &p[1].data()[i * k * n..(i + 1) * k * n],
                                true,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                false,
                            );
                            gemm_plain(
                                k,
                                m,
                                n,
                                &p[0].data()[i * m * k..(i + 1) * m * k],
                                true,
                                gi,
                                false,
                                &mut gb[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                        vec![
                            Some(Tensor::raw(vec![batch, m, k], ga)),
                            Some(Tensor::raw(vec![batch, k, n], gb)),
                        ]
                    },
                )
            }
            _ => Err(TensorError::mismatch("matmul", &sa, &sb)),
        }
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape().record("permute", out, &[self], move |g, _, _| {
            vec![Some(g.permute(&inverse).expect("inverse permutation"))]
        })
    }

    /// Swaps two axes.
    pub fn transpose(&self, a0: usize, a1: usize) -> Result<Var<T>> {
        let rank = self.shape().len();
        if a0 >= rank || a1 >= rank {
            return Err(TensorError::invalid(
                "transpose",
                format!("axes ({a0}, {a1}) out of range for rank {rank}"),
            ));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a0, a1);
        self.permute(&axes)
    }
}
