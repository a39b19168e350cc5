//! Spatial stream, feature fusion, classification head and loss.

use ammsm_tensor::{Scalar, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Init, Linear, ParamStore};

/// Two 3x3 convolutions with a residual shortcut (1x1 projection when the
/// stride or width changes).
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
    pub short: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let short = (stride != 1 || cin != cout)
            .then(|| Conv::new(store, init, &format!("{name}.short"), cin, cout, 1, stride, 0));
        ResBlock {
            c1: Conv::new(store, init, &format!("{name}.c1"), cin, cout, 3, stride, 1),
            c2: Conv::new(store, init, &format!("{name}.c2"), cout, cout, 3, 1, 1),
            short,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.c2.forward(p, &self.c1.forward(p, x)?.relu()?)?;
        let s = match &self.short {
            Some(c) => c.forward(p, x)?,
            None => x.clone(),
        };
        Ok(y.add(&s)?.relu()?)
    }
}

/// Residual CNN on the onset image. Three stride-2 steps bring an `H x W`
/// image to `H/8 x W/8`, the temporal stream's stage-2 resolution.
#[derive(Debug, Clone)]
pub struct SpatialNet {
    pub stem: Conv,
    pub stage1: ResBlock,
    pub stage2: ResBlock,
    pub channels: usize,
}

pub const SPATIAL_STRIDE: usize = 8;

impl SpatialNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str) -> Self {
        SpatialNet {
            stem: Conv::new(store, init, &format!("{name}.stem"), 3, 16, 3, 2, 1),
            stage1: ResBlock::new(store, init, &format!("{name}.res1"), 16, 16, 2),
            stage2: ResBlock::new(store, init, &format!("{name}.res2"), 16, 32, 2),
            channels: 32,
        }
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let px = |s: usize| (h / s) * (w / s);
        let conv = |c: &Conv, s: usize| crate::backbone::conv_flops(c, 1, px(s));
        let res = |r: &ResBlock, s: usize| {
            conv(&r.c1, s) + conv(&r.c2, s) + r.short.as_ref().map_or(0, |c| conv(c, s))
        };
        conv(&self.stem, 2) + res(&self.stage1, 4) + res(&self.stage2, 8)
    }
}

/// Onset image `[B, H, W, 3]` to spatial features `[B, H/8, W/8, 32]`.
pub fn spatial_forward<T: Scalar>(p: &Bound<T>, net: &SpatialNet, img: &Var<T>) -> Result<Var<T>> {
    let s = img.shape();
    if s.len() != 4 || s[3] != 3 || s[1] % SPATIAL_STRIDE != 0 || s[2] % SPATIAL_STRIDE != 0 {
        return Err(Error::Config(format!(
            "onset image must be [B,H,W,3] with H and W divisible by {SPATIAL_STRIDE}, got {s:?}"
        )));
    }
    let x = net.stem.forward(p, img)?.relu()?;
    let x = net.stage1.forward(p, &x)?;
    net.stage2.forward(p, &x)
}

/// Projects spatial features to the temporal width with a 1x1 map and adds them.
pub fn fuse<T: Scalar>(p: &Bound<T>, proj: &Linear, temporal: &Var<T>, spatial: &Var<T>) -> Result<Var<T>> {
    let (t, s) = (temporal.shape(), spatial.shape());
    if t.len() != 4 || s.len() != 4 || t[..3] != s[..3] || s[3] != proj.d_in || t[3] != proj.d_out {
        return Err(Error::Contract(format!(
            "fuse needs equal [B,H,W] and {}->{} channels, got temporal {t:?} and spatial {s:?}",
            proj.d_in, proj.d_out
        )));
    }
    Ok(temporal.add(&proj.forward(p, spatial)?)?)
}

/// Linear head on pooled features `[B, d]`.
pub fn classify<T: Scalar>(p: &Bound<T>, head: &Linear, features: &Var<T>) -> Result<Var<T>> {
    let s = features.shape();
    if s.len() != 2 || s[1] != head.d_in {
        return Err(Error::Contract(format!("head expects [B, {}], got {s:?}", head.d_in)));
    }
    head.forward(p, features)
}

/// Mean of `-log softmax(logits)[label]` over the batch.
pub fn cls_loss<T: Scalar>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Contract(format!("{} labels for logits {s:?}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Contract(format!("label {l} out of range for {} classes", s[1])));
    }
    Ok(logits.cross_entropy(labels)?)
}
