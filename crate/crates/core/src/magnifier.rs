//! Motion magnifier: a small U-shaped network mapping (flow, α-map) to a
//! magnified flow, plus the magnification loss and its epoch schedule.

use ammsm_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Init, ParamStore};

pub const ALPHA_MIN: f64 = 1.0;
pub const ALPHA_MAX: f64 = 4.0;

/// `H x W x 1` map filled with `alpha`, which must lie in `[ALPHA_MIN, ALPHA_MAX]`.
pub fn make_alpha_map<T: Scalar>(alpha: f64, h: usize, w: usize) -> Result<Tensor<T>> {
    if !(ALPHA_MIN..=ALPHA_MAX).contains(&alpha) {
        return Err(Error::Config(format!(
            "magnification factor {alpha} outside [{ALPHA_MIN}, {ALPHA_MAX}]"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("alpha map needs positive size, got {h}x{w}")));
    }
    Ok(Tensor::full(&[h, w, 1], T::lit(alpha)))
}

/// Batched α-map `[B, H, W, 1]`.
pub fn alpha_batch<T: Scalar>(alpha: f64, b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    make_alpha_map::<T>(alpha, h, w)?;
    Ok(Tensor::full(&[b, h, w, 1], T::lit(alpha)))
}

/// Depth-2 encoder-decoder: 3 -> 16 at full resolution, 16 -> 32 at half
/// resolution, then upsample, concatenate the full-resolution skip and decode
/// back to 16 and finally to 2 channels with a zero-initialized 1x1 layer.
#[derive(Debug, Clone)]
pub struct Magnifier {
    pub enc1: Conv,
    pub enc2: Conv,
    pub dec1: Conv,
    pub out: Conv,
}

impl Magnifier {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str) -> Self {
        let enc1 = Conv::new(store, init, &format!("{name}.enc1"), 3, 16, 3, 1, 1);
        let enc2 = Conv::new(store, init, &format!("{name}.enc2"), 16, 32, 3, 2, 1);
        let dec1 = Conv::new(store, init, &format!("{name}.dec1"), 48, 16, 3, 1, 1);
        let out = Conv {
            w: store.add(format!("{name}.out.w"), Tensor::zeros(&[1, 1, 16, 2])),
            b: store.add(format!("{name}.out.b"), Tensor::zeros(&[2])),
            k: 1,
            stride: 1,
            pad: 0,
            cin: 16,
            cout: 2,
        };
        Magnifier { enc1, enc2, dec1, out }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, input: &Var<T>) -> Result<Var<T>> {
        let e1 = self.enc1.forward(p, input)?.relu()?;
        let e2 = self.enc2.forward(p, &e1)?.relu()?;
        let up = e2.upsample2()?;
        let d1 = self.dec1.forward(p, &Var::concat(&[&up, &e1], 3)?)?.relu()?;
        self.out.forward(p, &d1)
    }

    /// Multiply-add count of one forward pass on an `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let full = (h * w) as u64;
        let half = full / 4;
        let conv = |c: &Conv, px: u64| px * (2 * c.k * c.k * c.cin * c.cout + c.cout) as u64;
        conv(&self.enc1, full) + conv(&self.enc2, half) + conv(&self.dec1, full) + conv(&self.out, full)
    }
}

/// Runs the magnifier on a batch of flows `[B, H, W, 2]` with α-maps `[B, H, W, 1]`.
pub fn magnify<T: Scalar>(of_ori: &Var<T>, amap: &Var<T>, net: &Magnifier, p: &Bound<T>) -> Result<Var<T>> {
    let (fs, a) = (of_ori.shape(), amap.shape());
    if fs.len() != 4 || fs[3] != 2 || a.len() != 4 || a[3] != 1 || fs[..3] != a[..3] {
        return Err(Error::Contract(format!(
            "magnify needs flow [B,H,W,2] and alpha map [B,H,W,1] with equal B,H,W; got {fs:?} and {a:?}"
        )));
    }
    if fs[1] % 2 != 0 || fs[2] % 2 != 0 {
        return Err(Error::Contract(format!("magnifier needs even H and W, got {}x{}", fs[1], fs[2])));
    }
    net.forward(p, &Var::concat(&[of_ori, amap], 3)?)
}

/// Mean absolute deviation between `alpha * of_ori` and `of_mag`.
pub fn mag_loss<T: Scalar>(of_ori: &Var<T>, of_mag: &Var<T>, alpha: f64) -> Result<Var<T>> {
    if of_ori.shape() != of_mag.shape() {
        return Err(Error::Contract(format!(
            "mag_loss shapes differ: {:?} vs {:?}",
            of_ori.shape(),
            of_mag.shape()
        )));
    }
    Ok(of_ori.scale(T::lit(alpha))?.sub(of_mag)?.abs()?.mean_all()?)
}

/// Position in the combined training schedule: epoch `e` of `e_r` in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSchedule {
    pub e: usize,
    pub e_r: usize,
}

impl LossSchedule {
    pub fn new(e: usize, e_r: usize) -> Result<Self> {
        if e_r == 0 {
            return Err(Error::Config("total epoch count must be positive".into()));
        }
        if e > e_r {
            return Err(Error::Config(format!("epoch {e} beyond total {e_r}")));
        }
        Ok(LossSchedule { e, e_r })
    }
}

/// `(e_r - e) / e_r`.
pub fn loss_weight(s: LossSchedule) -> Result<f64> {
    let s = LossSchedule::new(s.e, s.e_r)?;
    Ok((s.e_r - s.e) as f64 / s.e_r as f64)
}

/// `l_cls + loss_weight(s) * l_mag` on scalars.
pub fn total_loss(l_cls: f64, l_mag: f64, s: LossSchedule) -> Result<f64> {
    if l_cls < 0.0 || l_mag < 0.0 {
        return Err(Error::Contract(format!("losses must be non-negative, got {l_cls} and {l_mag}")));
    }
    Ok(l_cls + loss_weight(s)? * l_mag)
}

/// Differentiable form of [`total_loss`].
pub fn total_loss_var<T: Scalar>(l_cls: &Var<T>, l_mag: &Var<T>, s: LossSchedule) -> Result<Var<T>> {
    let (c, m) = (l_cls.value().item()?, l_mag.value().item()?);
    if c < T::zero() || m < T::zero() {
        return Err(Error::Contract(format!("losses must be non-negative, got {c} and {m}")));
    }
    Ok(l_cls.add(&l_mag.scale(T::lit(loss_weight(s)?))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ammsm_tensor::Tape;

    #[test]
    fn alpha_map_range() {
        let m = make_alpha_map::<f64>(4.0, 16, 16).unwrap();
        assert_eq!(m.shape(), &[16, 16, 1]);
        assert!(m.data().iter().all(|&v| v == 4.0));
        assert!(make_alpha_map::<f64>(4.5, 2, 2).unwrap_err().is_config());
        assert!(make_alpha_map::<f64>(0.5, 2, 2).is_err());
    }

    #[test]
    fn mag_loss_examples() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::<f64>::ones(&[1, 2, 2, 2]));
        let twos = tape.constant(Tensor::<f64>::full(&[1, 2, 2, 2], 2.0));
        assert_eq!(mag_loss(&ones, &twos, 2.0).unwrap().value().item().unwrap(), 0.0);
        assert_eq!(mag_loss(&ones, &ones, 2.0).unwrap().value().item().unwrap(), 1.0);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(loss_weight(LossSchedule { e: 0, e_r: 100 }).unwrap(), 1.0);
        assert_eq!(loss_weight(LossSchedule { e: 100, e_r: 100 }).unwrap(), 0.0);
        assert!((loss_weight(LossSchedule { e: 70, e_r: 100 }).unwrap() - 0.3).abs() < 1e-15);
        assert!(LossSchedule::new(0, 0).is_err());
        assert_eq!(total_loss(1.0, 2.0, LossSchedule { e: 0, e_r: 10 }).unwrap(), 3.0);
        assert_eq!(total_loss(1.0, 2.0, LossSchedule { e: 10, e_r: 10 }).unwrap(), 1.0);
        assert!(total_loss(-1.0, 0.0, LossSchedule { e: 0, e_r: 1 }).is_err());
    }
}
