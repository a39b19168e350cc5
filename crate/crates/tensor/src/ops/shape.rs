use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

/// (outer, axis, inner) extents around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn check_rows_indices(op: &'static str, shape: &[usize], idx: &[Vec<usize>], rows: usize) -> Result<()> {
    if shape.len() != 3 || idx.len() != shape[0] {
        return Err(TensorError::invalid(
            op,
            format!("expected [batch, rows, dim] with {} index lists, got {shape:?}", idx.len()),
        ));
    }
    let k = idx.first().map_or(0, Vec::len);
    if k == 0 || idx.iter().any(|v| v.len() != k || v.iter().any(|&r| r >= rows)) {
        return Err(TensorError::invalid(
            op,
            format!("index lists must share a nonzero length and stay below {rows}"),
        ));
    }
    Ok(())
}

fn gather_rows_raw<T: Scalar>(x: &Tensor<T>, idx: &[Vec<usize>]) -> Tensor<T> {
    let (b, r, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = idx[0].len();
    let mut out = Vec::with_capacity(b * k * d);
    for (n, rows) in idx.iter().enumerate() {
        for &row in rows {
            let off = (n * r + row) * d;
            out.extend_from_slice(&x.data()[off..off + d]);
        }
    }
    Tensor::raw(vec![b, k, d], out)
}

fn scatter_rows_raw<T: Scalar>(x: &Tensor<T>, idx: &[Vec<usize>], rows: usize) -> Tensor<T> {
    let (b, k, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![T::zero(); b * rows * d];
    for (n, list) in idx.iter().enumerate() {
        for (j, &row) in list.iter().enumerate() {
            let src = (n * k + j) * d;
            let dst = (n * rows + row) * d;
            for (o, &v) in out[dst..dst + d].iter_mut().zip(&x.data()[src..src + d]) {
                *o += v;
            }
        }
    }
    Tensor::raw(vec![b, rows, d], out)
}

impl<T: Scalar> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        self.tape().record("reshape", out, &[self], move |g, _, _| {
            vec![Some(g.reshape(&in_shape).expect("same element count"))]
        })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "nothing to concatenate"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        for v in &values[1..] {
            let s = v.shape();
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(TensorError::mismatch("concat", &base, s));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = widths.iter().sum();
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        first.tape().record("concat", Tensor::raw(out_shape, out), parts, move |g, p, _| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gr, &w) in grads.iter_mut().zip(&widths) {
                    gr.extend_from_slice(&g.data()[off..off + w * inner]);
                    off += w * inner;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(gr, v)| Some(Tensor::raw(v.shape().to_vec(), gr)))
                .collect()
        })
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&x.data()[base..base + w * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = w;
        self.tape().record("slice", Tensor::raw(out_shape, out), &[self], move |g, _, _| {
            let mut gx = vec![T::zero(); numel(&shape)];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                gx[base..base + w * inner].copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(Tensor::raw(shape.clone(), gx))]
        })
    }

    /// Appends `extra` zeros at the end of `axis`.
    pub fn pad_end(&self, axis: usize, extra: usize) -> Result<Var<T>> {
        if extra == 0 {
            return Ok(self.clone());
        }
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::invalid("pad_end", format!("axis {axis} out of range")));
        }
        let mut zshape = shape.clone();
        zshape[axis] = extra;
        let zeros = self.tape().constant(Tensor::zeros(&zshape));
        Var::concat(&[self, &zeros], axis)
    }

    /// Selects rows of a `[batch, rows, dim]` tensor; `idx[b]` lists the rows
    /// kept for batch entry `b` and all lists share one length.
    pub fn gather_rows(&self, idx: &[Vec<usize>]) -> Result<Var<T>> {
        let x = self.value();
        let rows = x.shape().get(1).copied().unwrap_or(0);
        check_rows_indices("gather_rows", x.shape(), idx, rows)?;
        let out = gather_rows_raw(&x, idx);
        let idx = idx.to_vec();
        self.tape().record("gather_rows", out, &[self], move |g, _, _| {
            vec![Some(scatter_rows_raw(g, &idx, rows))]
        })
    }

    /// Inverse of [`Var::gather_rows`]: places rows into a zero `[batch, rows, dim]` tensor.
    pub fn scatter_rows(&self, idx: &[Vec<usize>], rows: usize) -> Result<Var<T>> {
        let x = self.value();
        check_rows_indices("scatter_rows", x.shape(), idx, rows)?;
        if idx[0].len() != x.shape()[1] {
            return Err(TensorError::invalid("scatter_rows", "index list length differs from row count"));
        }
        let out = scatter_rows_raw(&x, idx, rows);
        let idx = idx.to_vec();
        self.tape().record("scatter_rows", out, &[self], move |g, _, _| {
            vec![Some(gather_rows_raw(g, &idx))]
        })
    }

    /// Row-wise choice between two equally shaped tensors. The data is viewed
    /// as `pick.len()` equal rows; row `r` comes from `self` when `pick[r]`
    /// and from `other` otherwise. Values are copied, never combined.
    pub fn select_rows(&self, other: &Var<T>, pick: &[bool]) -> Result<Var<T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::mismatch("select_rows", a.shape(), b.shape()));
        }
        if pick.is_empty() || a.numel() % pick.len() != 0 {
            return Err(TensorError::invalid(
                "select_rows",
                format!("{} rows do not divide {} elements", pick.len(), a.numel()),
            ));
        }
        let d = a.numel() / pick.len();
        let mut out = Vec::with_capacity(a.numel());
        for (r, &p) in pick.iter().enumerate() {
            let src = if p { a.data() } else { b.data() };
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let pick = pick.to_vec();
        self.tape().record(
            "select_rows",
            Tensor::raw(a.shape().to_vec(), out),
            &[self, other],
            move |g, _, _| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (r, &p) in pick.iter().enumerate() {
                    let dead = if p { gb.data_mut() } else { ga.data_mut() };
                    dead[r * d..(r + 1) * d].fill(T::zero());
                }
                vec![Some(ga), Some(gb)]
            },
        )
    }

    /// Nearest-neighbour 2x upsampling of an NHWC map.
    pub fn upsample2(&self) -> Result<Var<T>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("upsample2", format!("expected NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(n * 4 * h * w * c);
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let off = ((b * h + y / 2) * w + xx / 2) * c;
                    out.extend_from_slice(&x.data()[off..off + c]);
                }
            }
        }
        self.tape().record(
            "upsample2",
            Tensor::raw(vec![n, 2 * h, 2 * w, c], out),
            &[self],
            move |g, _, _| {
                let mut gx = vec![T::zero(); n * h * w * c];
                for b in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let src = ((b * 2 * h + y) * 2 * w + xx) * c;
                            let dst = ((b * h + y / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                gx[dst + ch] += g.data()[src + ch];
                            }
                        }
                    }
                }
                vec![Some(Tensor::raw(vec![n, h, w, c], gx))]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor, Var};

    #[test]
    fn concat_then_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.param(Tensor::<f64>::from_fn(&[2, 2], |i| i as f64));
        let b = tape.param(Tensor::<f64>::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let c = Var::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.value().data(), &[0., 1., 10., 11., 12., 2., 3., 13., 14., 15.]);
        let back = c.slice(1, 2, 5).unwrap();
        assert_eq!(back.value(), b.value());
        let g = back.sum_all().unwrap().backward().unwrap();
        assert!(g.get(&a).data().iter().all(|&v| v == 0.0));
        assert!(g.get(&b).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let tape = Tape::new();
        let x = tape.param(Tensor::<f64>::from_fn(&[2, 4, 2], |i| i as f64));
        let idx = vec![vec![3, 0], vec![1, 2]];
        let g = x.gather_rows(&idx).unwrap();
        assert_eq!(g.value().data(), &[6., 7., 0., 1., 10., 11., 12., 13.]);
        let s = g.scatter_rows(&idx, 4).unwrap().value();
        assert_eq!(s.data(), &[0., 1., 0., 0., 0., 0., 6., 7., 0., 0., 10., 11., 12., 13., 0., 0.]);
    }

    #[test]
    fn gather_rejects_out_of_range_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 4, 2]));
        assert!(x.gather_rows(&[vec![4]]).is_err());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_vec(&[1, 1, 2, 1], vec![1., 2.]).unwrap());
        let u = x.upsample2().unwrap().value();
        assert_eq!(u.shape(), &[1, 2, 4, 1]);
        assert_eq!(u.data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }

    #[test]
    fn reshape_roundtrip_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64 * 0.5));
        let y = x.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(x.value(), y.value());
    }
}
