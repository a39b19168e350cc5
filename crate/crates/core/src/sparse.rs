//! Window partitioning, importance scoring, top-k masking and copy-back.
//!
//! Feature maps are NHWC. Windows are 4x4 spatial tiles indexed `(m, n)` in
//! row-major order over a `(H/4) x (W/4)` grid.

use ammsm_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};

pub const WINDOW: usize = 4;

/// Logical tiling of an `H x W x C` map into 4x4 windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, c: usize) -> Result<Self> {
        if h == 0 || w == 0 || h % WINDOW != 0 || w % WINDOW != 0 {
            return Err(Error::Contract(format!(
                "window partition needs H and W divisible by {WINDOW}, got {h}x{w}; pad first"
            )));
        }
        Ok(WindowGrid {
            h,
            w,
            c,
            rows: h / WINDOW,
            cols: w / WINDOW,
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Flat offsets into the `H x W x C` data covered by window `(m, n)`.
    pub fn offsets(&self, m: usize, n: usize) -> impl Iterator<Item = usize> + '_ {
        assert!(m < self.rows && n < self.cols, "window ({m}, {n}) outside grid");
        (0..WINDOW).flat_map(move |dy| {
            let row = (m * WINDOW + dy) * self.w + n * WINDOW;
            row * self.c..(row + WINDOW) * self.c
        })
    }

    /// Window containing pixel `(y, x)`.
    pub fn window_of(&self, y: usize, x: usize) -> usize {
        (y / WINDOW) * self.cols + x / WINDOW
    }
}

/// View of an `H x W x C` tensor as a window grid; no data is copied.
pub fn partition_windows<T: Scalar>(x: &Tensor<T>) -> Result<WindowGrid> {
    match *x.shape() {
        [h, w, c] => WindowGrid::new(h, w, c),
        ref s => Err(Error::Contract(format!("expected H x W x C, got {s:?}"))),
    }
}

/// Bottom and right zero padding that makes `h x w` divisible by the window.
pub fn padding_for(h: usize, w: usize) -> (usize, usize) {
    ((WINDOW - h % WINDOW) % WINDOW, (WINDOW - w % WINDOW) % WINDOW)
}

/// Rearranges `[B, H, W, C]` into window rows `[B, windows, 16 C]`.
pub fn to_window_rows<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    let grid = WindowGrid::new(s[1], s[2], s[3])?;
    Ok(x.reshape(&[s[0], grid.rows, WINDOW, grid.cols, WINDOW, s[3]])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[s[0], grid.count(), WINDOW * WINDOW * s[3]])?)
}

/// Inverse of [`to_window_rows`].
pub fn from_window_rows<T: Scalar>(x: &Var<T>, grid: &WindowGrid) -> Result<Var<T>> {
    let b = x.shape()[0];
    Ok(x.reshape(&[b, grid.rows, grid.cols, WINDOW, WINDOW, grid.c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, grid.h, grid.w, grid.c])?)
}

/// Per-window L2 norms, row-major over the window grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> ImportanceMap<T> {
    pub fn get(&self, m: usize, n: usize) -> T {
        self.values[m * self.cols + n]
    }
}

pub fn importance_scores<T: Scalar>(x: &Tensor<T>) -> Result<ImportanceMap<T>> {
    let grid = partition_windows(x)?;
    if !x.is_finite() {
        return Err(Error::Numeric("importance scores of a non-finite feature map".into()));
    }
    let d = x.data();
    let mut values = Vec::with_capacity(grid.count());
    for m in 0..grid.rows {
        for n in 0..grid.cols {
            let ss: T = grid.offsets(m, n).map(|o| d[o] * d[o]).sum();
            values.push(ss.sqrt());
        }
    }
    Ok(ImportanceMap {
        rows: grid.rows,
        cols: grid.cols,
        values,
    })
}

/// Scores for every sample of a window-row tensor `[B, windows, 16 C]`.
pub fn importance_scores_rows<T: Scalar>(xw: &Tensor<T>, grid: &WindowGrid) -> Result<Vec<ImportanceMap<T>>> {
    if !xw.is_finite() {
        return Err(Error::Numeric("importance scores of a non-finite feature map".into()));
    }
    let per_window = xw.shape()[2];
    Ok(xw
        .data()
        .chunks_exact(grid.count() * per_window)
        .map(|sample| ImportanceMap {
            rows: grid.rows,
            cols: grid.cols,
            values: sample
                .chunks_exact(per_window)
                .map(|w| w.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect(),
        })
        .collect())
}

/// Number of windows kept at sparsity `s` out of `n`: `max(1, floor((1 - s) n))`.
///
/// A 1e-9 slack absorbs the representation error of decimal ratios such as
/// 0.3, whose complement times `n` can land just below an integer.
pub fn keep_count(s: f64, n: usize) -> usize {
    (((1.0 - s) * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
}

impl Mask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    /// Windows kept by at least one of `masks`; its complement is the set of
    /// windows masked for a whole stage.
    pub fn union(masks: &[&Mask]) -> Result<Mask> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Contract("union of zero masks".into()))?;
        let mut out = Mask {
            rows: first.rows,
            cols: first.cols,
            keep: vec![false; first.keep.len()],
        };
        for m in masks {
            if (m.rows, m.cols) != (out.rows, out.cols) {
                return Err(Error::Contract("union of masks on different grids".into()));
            }
            out.keep.iter_mut().zip(&m.keep).for_each(|(o, &k)| *o |= k);
        }
        Ok(out)
    }
}

/// Keeps the `keep_count(s, N)` highest-scoring windows; ties go to the
/// lower row-major index.
pub fn topk_mask<T: Scalar>(phi: &ImportanceMap<T>, s: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Config(format!("sparsity ratio must lie in [0, 1), got {s}")));
    }
    let n = phi.values.len();
    let k = keep_count(s, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        phi.values[j]
            .partial_cmp(&phi.values[i])
            .expect("finite scores")
            .then(i.cmp(&j))
    });
    let mut keep = vec![false; n];
    for &i in &order[..k] {
        keep[i] = true;
    }
    Ok(Mask {
        rows: phi.rows,
        cols: phi.cols,
        keep,
    })
}

/// Per-pixel keep flags for a batch of masks over `[B, H, W, C]`.
fn pixel_keep(shape: &[usize], masks: &[Mask]) -> Result<Vec<bool>> {
    let (b, h, w) = match *shape {
        [h, w, _] => (1, h, w),
        [b, h, w, _] => (b, h, w),
        ref s => return Err(Error::Contract(format!("expected [B,] H, W, C, got {s:?}"))),
    };
    let grid = WindowGrid::new(h, w, 1)?;
    if masks.len() != b || masks.iter().any(|m| (m.rows, m.cols) != (grid.rows, grid.cols)) {
        return Err(Error::Contract(format!(
            "need {b} masks on a {}x{} grid for input {shape:?}",
            grid.rows, grid.cols
        )));
    }
    let mut out = Vec::with_capacity(b * h * w);
    for m in masks {
        for y in 0..h {
            for x in 0..w {
                out.push(m.keep[grid.window_of(y, x)]);
            }
        }
    }
    Ok(out)
}

/// Zeroes every masked window; gradients reach kept entries only.
/// Accepts one `H x W x C` map or a batch `[B, H, W, C]` with one mask each.
pub fn apply_mask<T: Scalar>(x: &Var<T>, masks: &[Mask]) -> Result<Var<T>> {
    let shape = x.shape();
    let keep = pixel_keep(&shape, masks)?;
    let mut mshape = shape.clone();
    *mshape.last_mut().expect("rank checked") = 1;
    let m = Tensor::from_vec(
        &mshape,
        keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect(),
    )?;
    Ok(x.mul(&x.tape().constant(m))?)
}

/// Output equals `y_stage` inside kept windows and `x_stage_in` inside
/// masked ones. Values are copied, so restored windows are bit-identical.
pub fn copy_back<T: Scalar>(y_stage: &Var<T>, x_stage_in: &Var<T>, masks: &[Mask]) -> Result<Var<T>> {
    if y_stage.shape() != x_stage_in.shape() {
        return Err(Error::Contract(format!(
            "copy_back shapes differ: {:?} vs {:?}",
            y_stage.shape(),
            x_stage_in.shape()
        )));
    }
    let keep = pixel_keep(&y_stage.shape(), masks)?;
    Ok(y_stage.select_rows(x_stage_in, &keep)?)
}
