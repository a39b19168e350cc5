//! Temporal-stream backbone: SSD sequence mixing over kept windows, SSSD and
//! MSA blocks, and the four-stage hierarchy with per-stage window selection.

use ammsm_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Registry;
use crate::params::{Bound, Conv, DwConv, Init, LayerNorm, Linear, ParamStore};
use crate::sparse::{
    from_window_rows, importance_scores_rows, padding_for, to_window_rows, topk_mask, ImportanceMap, Mask,
    WindowGrid, WINDOW,
};

/// Added to the softplus gate so that `1 / a` stays bounded in 32-bit runs.
pub const GATE_FLOOR: f64 = 1e-4;
/// Total stride of the stem and the three downsampling steps.
pub const INPUT_MULTIPLE: usize = 32;
const TOKENS_PER_WINDOW: usize = WINDOW * WINDOW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Sssd,
    Msa,
}

/// Layer counts, widths and mixer sizes of the four stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub layers: Vec<usize>,
    pub channels: Vec<usize>,
    pub d_state: usize,
    pub heads: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl StageConfig {
    pub fn desk() -> Self {
        StageConfig {
            layers: vec![1, 2, 4, 2],
            channels: vec![16, 32, 64, 128],
            d_state: 16,
            heads: 2,
        }
    }

    pub fn paper() -> Self {
        StageConfig {
            layers: vec![2, 4, 8, 4],
            channels: vec![64, 128, 256, 512],
            d_state: 16,
            heads: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown stage preset {other:?} (desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 4 || self.channels.len() != 4 {
            return Err(Error::Config("the backbone has exactly four stages".into()));
        }
        if self.layers.iter().any(|&l| l == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage layer counts and channels must be positive".into()));
        }
        if self.heads == 0 || self.d_state == 0 {
            return Err(Error::Config("heads and d_state must be positive".into()));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.heads != 0) {
            return Err(Error::Config(format!("channels {c} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    /// The last layer of stages 3 and 4 is attention; all others are SSSD.
    pub fn kinds(&self, stage: usize) -> Vec<BlockKind> {
        let n = self.layers[stage];
        (0..n)
            .map(|j| {
                if stage >= 2 && j + 1 == n {
                    BlockKind::Msa
                } else {
                    BlockKind::Sssd
                }
            })
            .collect()
    }

    /// Number of sparsity ratios: one per consecutive pair of layers.
    pub fn slots(&self) -> usize {
        self.layers.iter().map(|l| l.div_ceil(2)).sum()
    }

    /// Ratio slot used by `layer` of `stage`.
    pub fn slot(&self, stage: usize, layer: usize) -> usize {
        self.layers[..stage].iter().map(|l| l.div_ceil(2)).sum::<usize>() + layer / 2
    }

    /// Spatial size of each stage's feature map for an `h x w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..4).map(|i| (h / 4 >> i, w / 4 >> i)).collect()
    }
}

/// Flattens `[B, H, W, C]` into tokens `[B, H W, C]`.
pub fn flatten_tokens<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], s[1] * s[2], s[3]])?)
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens<T: Scalar>(x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Contract(format!("{s:?} is not a token grid of {h}x{w}")));
    }
    Ok(x.reshape(&[s[0], h, w, s[2]])?)
}

fn check_core_shapes(x: &[usize], a: &[usize], b: &[usize], c: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let ok = x.len() == 3
        && a.len() == 3
        && b.len() == 3
        && b == c
        && x[..2] == a[..2]
        && x[..2] == b[..2]
        && a[2] > 0
        && x[2] % a[2] == 0;
    if !ok || x[1] == 0 {
        return Err(Error::Contract(format!(
            "ssd core expects x [B,L,C], a [B,L,h], b and c [B,L,N] with h | C; got {x:?} {a:?} {b:?} {c:?}"
        )));
    }
    Ok((x[0], x[1], x[2], a[2], b[2]))
}

/// Linear-cost SSD mixing. Per sample and head,
/// `H = sum_t b_t (x_t / a_t)^T` and `y_t = c_t^T H`, where `x_t` is split
/// into `h` heads that share `b` and `c` and each head has its own gate `a`.
pub fn ssd_core<T: Scalar>(x: &Var<T>, a: &Var<T>, b: &Var<T>, c: &Var<T>) -> Result<Var<T>> {
    let (bs, l, d, h, _) = check_core_shapes(&x.shape(), &a.shape(), &b.shape(), &c.shape())?;
    if a.value().data().iter().any(|&v| v <= T::zero()) {
        return Err(Error::Numeric("ssd gate a_t must be positive".into()));
    }
    let gated = x
        .reshape(&[bs, l, h, d / h])?
        .div(&a.reshape(&[bs, l, h, 1])?)?
        .reshape(&[bs, l, d])?;
    let state = b.transpose(1, 2)?.matmul(&gated)?;
    Ok(c.matmul(&state)?)
}

/// Quadratic-form evaluation of [`ssd_core`]:
/// `y_t = sum_s (c_t . b_s) (x_s / a_s)`, one token pair at a time.
pub fn ssd_core_oracle<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, l, d, h, n) = check_core_shapes(x.shape(), a.shape(), b.shape(), c.shape())?;
    if a.data().iter().any(|&v| v <= T::zero()) {
        return Err(Error::Numeric("ssd gate a_t must be positive".into()));
    }
    let dh = d / h;
    let mut y = vec![T::zero(); bs * l * d];
    for s in 0..bs {
        for t in 0..l {
            for u in 0..l {
                let cb: T = (0..n)
                    .map(|k| c.data()[(s * l + t) * n + k] * b.data()[(s * l + u) * n + k])
                    .sum();
                for ch in 0..d {
                    let gate = a.data()[(s * l + u) * h + ch / dh];
                    y[(s * l + t) * d + ch] += cb * (x.data()[(s * l + u) * d + ch] / gate);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[bs, l, d], y)?)
}

/// Multiply-add count of [`ssd_core`] on `tokens` tokens of width `d`.
pub fn ssd_core_flops(tokens: usize, d: usize, d_state: usize) -> u64 {
    (tokens * d + 4 * tokens * d_state * d) as u64
}

/// Projections around the SSD core: `u -> (x, a, b, c)` and `y -> out`.
#[derive(Debug, Clone)]
pub struct SsdParams {
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub d: usize,
    pub heads: usize,
    pub d_state: usize,
}

impl SsdParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, heads: usize, d_state: usize) -> Self {
        let in_proj = Linear::new(store, init, &format!("{name}.in"), d, d + heads + 2 * d_state);
        // Start every gate near a = 1.
        let bias = store.get_mut(in_proj.b);
        let inv_softplus_one = (1f64.exp() - 1.0).ln();
        for v in &mut bias.data_mut()[d..d + heads] {
            *v = T::lit(inv_softplus_one);
        }
        SsdParams {
            in_proj,
            out_proj: Linear::new(store, init, &format!("{name}.out"), d, d),
            d,
            heads,
            d_state,
        }
    }

    /// Splits the input projection of tokens `[B, L, d]` into `(x, a, b, c)`.
    pub fn project<T: Scalar>(&self, p: &Bound<T>, u: &Var<T>) -> Result<[Var<T>; 4]> {
        let z = self.in_proj.forward(p, u)?;
        let (d, h, n) = (self.d, self.heads, self.d_state);
        let x = z.slice(2, 0, d)?;
        let a = z.slice(2, d, d + h)?.softplus()?.add_scalar(T::lit(GATE_FLOOR))?;
        let b = z.slice(2, d + h, d + h + n)?;
        let c = z.slice(2, d + h + n, d + h + 2 * n)?;
        Ok([x, a, b, c])
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, u: &Var<T>) -> Result<Var<T>> {
        let [x, a, b, c] = self.project(p, u)?;
        self.out_proj.forward(p, &ssd_core(&x, &a, &b, &c)?)
    }

    /// Projections plus core for `tokens` tokens.
    pub fn flops(&self, tokens: usize) -> u64 {
        self.in_proj.flops(tokens) + ssd_core_flops(tokens, self.d, self.d_state) + self.out_proj.flops(tokens)
    }
}

/// Softmax attention `softmax(q k^T / sqrt(d_head)) v` over tokens `[B, L, d]`.
pub fn attention<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize) -> Result<Var<T>> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || v.shape() != s || heads == 0 || s[2] % heads != 0 {
        return Err(Error::Contract(format!("attention expects equal [B,L,d] q/k/v with heads | d, got {s:?}")));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let split = |t: &Var<T>| -> Result<Var<T>> {
        Ok(t.reshape(&[b, l, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * heads, l, dh])?)
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let scores = q
        .matmul(&k.transpose(1, 2)?)?
        .scale(T::lit(1.0 / (dh as f64).sqrt()))?
        .softmax()?;
    Ok(scores
        .matmul(&v)?
        .reshape(&[b, heads, l, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, l, d])?)
}

#[derive(Debug, Clone)]
pub struct MsaParams {
    pub qkv: Linear,
    pub out: Linear,
    pub d: usize,
    pub heads: usize,
}

impl MsaParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        MsaParams {
            qkv: Linear::new(store, init, &format!("{name}.qkv"), d, 3 * d),
            out: Linear::new(store, init, &format!("{name}.out"), d, d),
            d,
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, u: &Var<T>) -> Result<Var<T>> {
        let z = self.qkv.forward(p, u)?;
        let d = self.d;
        let o = attention(&z.slice(2, 0, d)?, &z.slice(2, d, 2 * d)?, &z.slice(2, 2 * d, 3 * d)?, self.heads)?;
        self.out.forward(p, &o)
    }

    /// Per-sample token count `tokens`, `batch` samples.
    pub fn flops(&self, batch: usize, tokens: usize) -> u64 {
        let all = batch * tokens;
        let attn = batch * (4 * tokens * tokens * self.d + 3 * self.heads * tokens * tokens);
        self.qkv.flops(all) + attn as u64 + self.out.flops(all)
    }
}

#[derive(Debug, Clone)]
pub enum Mixer {
    Ssd(SsdParams),
    Msa(MsaParams),
}

/// Pre-norm block over window tokens:
/// `t += mixer(dw(ln(t)))`, then `t += ffn(dw(ln(t)))`.
/// The depthwise convolutions see each 4x4 window on its own, so masked
/// windows never need to be materialized.
#[derive(Debug, Clone)]
pub struct Block {
    pub kind: BlockKind,
    pub d: usize,
    pub ln1: LayerNorm,
    pub dw1: DwConv,
    pub mixer: Mixer,
    pub ln2: LayerNorm,
    pub dw2: DwConv,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

pub const FFN_EXPAND: usize = 4;

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        kind: BlockKind,
        d: usize,
        heads: usize,
        d_state: usize,
    ) -> Self {
        let mixer = match kind {
            BlockKind::Sssd => Mixer::Ssd(SsdParams::new(store, init, &format!("{name}.ssd"), d, heads, d_state)),
            BlockKind::Msa => Mixer::Msa(MsaParams::new(store, init, &format!("{name}.msa"), d, heads)),
        };
        Block {
            kind,
            d,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            dw1: DwConv::new(store, init, &format!("{name}.dw1"), d),
            mixer,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            dw2: DwConv::new(store, init, &format!("{name}.dw2"), d),
            ffn1: Linear::new(store, init, &format!("{name}.ffn1"), d, FFN_EXPAND * d),
            ffn2: Linear::new(store, init, &format!("{name}.ffn2"), FFN_EXPAND * d, d),
        }
    }

    fn local<T: Scalar>(&self, p: &Bound<T>, dw: &DwConv, t: &Var<T>, windows: usize) -> Result<Var<T>> {
        let s = t.shape();
        let x = t.reshape(&[windows, WINDOW, WINDOW, self.d])?;
        Ok(dw.forward(p, &x)?.reshape(&s)?)
    }

    /// Runs the block on window rows `[B, k, 16 d]`.
    pub fn forward_windows<T: Scalar>(&self, p: &Bound<T>, xw: &Var<T>) -> Result<Var<T>> {
        let s = xw.shape();
        let (b, k) = (s[0], s[1]);
        let t = xw.reshape(&[b, k * TOKENS_PER_WINDOW, self.d])?;
        let h = self.local(p, &self.dw1, &self.ln1.forward(p, &t)?, b * k)?;
        let h = match &self.mixer {
            Mixer::Ssd(m) => m.forward(p, &h)?,
            Mixer::Msa(m) => m.forward(p, &h)?,
        };
        let t = t.add(&h)?;
        let h = self.local(p, &self.dw2, &self.ln2.forward(p, &t)?, b * k)?;
        let h = self.ffn2.forward(p, &self.ffn1.forward(p, &h)?.gelu()?)?;
        Ok(t.add(&h)?.reshape(&s)?)
    }

    /// Mixer multiply-adds for `batch` samples of `windows` kept windows.
    pub fn mixer_flops(&self, batch: usize, windows: usize) -> u64 {
        let tokens = windows * TOKENS_PER_WINDOW;
        match &self.mixer {
            Mixer::Ssd(m) => m.flops(batch * tokens),
            Mixer::Msa(m) => m.flops(batch, tokens),
        }
    }

    pub fn flops(&self, batch: usize, windows: usize) -> u64 {
        let tokens = batch * windows * TOKENS_PER_WINDOW;
        let residual = 2 * (tokens * self.d) as u64;
        let gelu = (tokens * FFN_EXPAND * self.d * 8) as u64;
        self.ln1.flops(tokens)
            + self.dw1.flops(tokens)
            + self.mixer_flops(batch, windows)
            + self.ln2.flops(tokens)
            + self.dw2.flops(tokens)
            + self.ffn1.flops(tokens)
            + gelu
            + self.ffn2.flops(tokens)
            + residual
    }
}

fn masks_from<T: Scalar>(phi: &[ImportanceMap<T>], s: f64) -> Result<Vec<Mask>> {
    phi.iter().map(|p| topk_mask(p, s)).collect()
}

/// Runs `block` on the windows kept in `masks` (one per sample) and returns
/// window rows with zeros in the masked windows.
fn sparse_step<T: Scalar>(p: &Bound<T>, block: &Block, xw: &Var<T>, masks: &[Mask]) -> Result<Var<T>> {
    let n = xw.shape()[1];
    if masks.iter().all(|m| m.kept() == n) {
        return block.forward_windows(p, xw);
    }
    let idx: Vec<Vec<usize>> = masks.iter().map(Mask::kept_indices).collect();
    let out = block.forward_windows(p, &xw.gather_rows(&idx)?)?;
    Ok(out.scatter_rows(&idx, n)?)
}

/// One block on an `[B, H, W, C]` map with masks derived from precomputed
/// scores `phi` at ratio `s`. Masked windows are zero in the output.
pub fn sssd_block<T: Scalar>(p: &Bound<T>, block: &Block, x: &Var<T>, s: f64, phi: &[ImportanceMap<T>]) -> Result<Var<T>> {
    let shape = x.shape();
    if shape.len() != 4 || phi.len() != shape[0] {
        return Err(Error::Contract(format!("sssd_block needs [B,H,W,C] and one score map per sample, got {shape:?}")));
    }
    let grid = WindowGrid::new(shape[1], shape[2], shape[3])?;
    let masks = masks_from(phi, s)?;
    let out = sparse_step(p, block, &to_window_rows(x)?, &masks)?;
    from_window_rows(&out, &grid)
}

/// Attention counterpart of [`sssd_block`]; the block must hold an MSA mixer.
pub fn msa_block<T: Scalar>(p: &Bound<T>, block: &Block, x: &Var<T>, s: f64, phi: &[ImportanceMap<T>]) -> Result<Var<T>> {
    if block.kind != BlockKind::Msa {
        return Err(Error::Contract("msa_block called with an SSSD block".into()));
    }
    sssd_block(p, block, x, s, phi)
}

/// Four-stage temporal stream over (magnified) flow.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: StageConfig,
    pub sparse: bool,
    pub stem: Conv,
    pub stages: Vec<Vec<Block>>,
    pub downs: Vec<Conv>,
    pub norm: LayerNorm,
}

impl Backbone {
    /// `sparse = false` builds the dense variant with window selection removed.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &StageConfig, sparse: bool) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let stem = Conv::new(store, init, &format!("{name}.stem"), 2, ch[0], 4, 4, 0);
        let mut stages = Vec::new();
        for (i, kinds) in (0..4).map(|i| (i, cfg.kinds(i))) {
            stages.push(
                kinds
                    .into_iter()
                    .enumerate()
                    .map(|(j, kind)| {
                        Block::new(store, init, &format!("{name}.s{}.l{j}", i + 1), kind, ch[i], cfg.heads, cfg.d_state)
                    })
                    .collect(),
            );
        }
        let downs = (0..3)
            .map(|i| Conv::new(store, init, &format!("{name}.down{}", i + 1), ch[i], ch[i + 1], 2, 2, 0))
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), ch[3]);
        // A fresh magnifier emits all-zero flow. With a zero stem bias the
        // residual stream would then be zero and every pre-norm layer norm
        // would amplify by 1/sqrt(eps); a spread bias keeps them conditioned.
        *store.get_mut(stem.b) = init.uniform(&[ch[0]], (1.0 / (16 * 2) as f64).sqrt());
        Ok(Backbone {
            cfg: cfg.clone(),
            sparse,
            stem,
            stages,
            downs,
            norm,
        })
    }

    pub fn check_ratios(&self, ratios: &[f64]) -> Result<()> {
        if ratios.len() != self.cfg.slots() {
            return Err(Error::Config(format!(
                "expected {} sparsity ratios, got {}",
                self.cfg.slots(),
                ratios.len()
            )));
        }
        if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("sparsity ratio {r} outside [0, 1)")));
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "backbone input must be divisible by {INPUT_MULTIPLE}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Runs stage `i` (0-based): score once, run the layers on kept windows,
    /// restore windows masked in every layer from the stage input.
    pub fn run_stage<T: Scalar>(&self, p: &Bound<T>, i: usize, x: &Var<T>, ratios: &[f64], reg: &Registry) -> Result<Var<T>> {
        let s = x.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ph, pw) = padding_for(h, w);
        let mut xp = x.clone();
        if ph > 0 {
            xp = xp.pad_end(1, ph)?;
        }
        if pw > 0 {
            xp = xp.pad_end(2, pw)?;
        }
        let grid = WindowGrid::new(h + ph, w + pw, c)?;
        let n = grid.count();
        let stage_in = to_window_rows(&xp)?;

        let phi = if self.sparse {
            reg.add(format!("stage{}.scores", i + 1), 1);
            importance_scores_rows(&stage_in.value(), &grid)?
        } else {
            Vec::new()
        };

        let mut cur = stage_in.clone();
        let mut cached: Option<(f64, Vec<Mask>)> = None;
        let mut ever = vec![!self.sparse; b * n];
        for (j, block) in self.stages[i].iter().enumerate() {
            let kept = if self.sparse {
                let ratio = ratios[self.cfg.slot(i, j)];
                if cached.as_ref().is_none_or(|(r, _)| *r != ratio) {
                    reg.add(format!("stage{}.mask_derivations", i + 1), 1);
                    cached = Some((ratio, masks_from(&phi, ratio)?));
                }
                let masks = &cached.as_ref().expect("just filled").1;
                reg.record_masks(i + 1, j, masks);
                for (sample, m) in masks.iter().enumerate() {
                    for (e, &k) in ever[sample * n..(sample + 1) * n].iter_mut().zip(&m.keep) {
                        *e |= k;
                    }
                }
                cur = sparse_step(p, block, &cur, masks)?;
                masks[0].kept()
            } else {
                cur = block.forward_windows(p, &cur)?;
                n
            };
            let key = format!("stage{}.layer{j}", i + 1);
            let mixer_key = match block.kind {
                BlockKind::Sssd => "ssd_flops",
                BlockKind::Msa => "msa_flops",
            };
            reg.add(format!("{key}.{mixer_key}"), block.mixer_flops(b, kept));
            reg.add(format!("{key}.block_flops"), block.flops(b, kept));
        }
        if ever.iter().any(|&e| !e) {
            cur = cur.select_rows(&stage_in, &ever)?;
        }
        let mut out = from_window_rows(&cur, &grid)?;
        if ph > 0 {
            out = out.slice(1, 0, h)?;
        }
        if pw > 0 {
            out = out.slice(2, 0, w)?;
        }
        Ok(out)
    }

    /// Stem plus stages 1 and 2; returns the stage-2 map `[B, H/8, W/8, C2]`.
    pub fn forward_front<T: Scalar>(&self, p: &Bound<T>, flow: &Var<T>, ratios: &[f64], reg: &Registry) -> Result<Var<T>> {
        let s = flow.shape();
        if s.len() != 4 || s[3] != 2 {
            return Err(Error::Contract(format!("backbone expects flow [B,H,W,2], got {s:?}")));
        }
        self.check_input(s[1], s[2])?;
        self.check_ratios(ratios)?;
        let x = self.stem.forward(p, flow)?;
        reg.add("stem_flops", conv_flops(&self.stem, s[0], x.shape()[1] * x.shape()[2]));
        let x = self.run_stage(p, 0, &x, ratios, reg)?;
        let x = self.down(p, 0, &x, reg)?;
        self.run_stage(p, 1, &x, ratios, reg)
    }

    /// Stages 3 and 4 on the (fused) stage-2 map; returns pooled features `[B, C4]`.
    pub fn forward_back<T: Scalar>(&self, p: &Bound<T>, stage2: &Var<T>, ratios: &[f64], reg: &Registry) -> Result<Var<T>> {
        self.check_ratios(ratios)?;
        let x = self.down(p, 1, stage2, reg)?;
        let x = self.run_stage(p, 2, &x, ratios, reg)?;
        let x = self.down(p, 2, &x, reg)?;
        let x = self.run_stage(p, 3, &x, ratios, reg)?;
        let x = self.norm.forward(p, &x)?;
        Ok(x.mean_axes(&[1, 2])?)
    }

    fn down<T: Scalar>(&self, p: &Bound<T>, i: usize, x: &Var<T>, reg: &Registry) -> Result<Var<T>> {
        let y = self.downs[i].forward(p, x)?;
        let s = y.shape();
        reg.add(format!("down{}_flops", i + 1), conv_flops(&self.downs[i], s[0], s[1] * s[2]));
        Ok(y)
    }
}

pub(crate) fn conv_flops(c: &Conv, batch: usize, out_pixels: usize) -> u64 {
    (batch * out_pixels * (2 * c.k * c.k * c.cin * c.cout + c.cout)) as u64
}

/// Stage-2 features (before fusion) and pooled final features.
pub fn backbone_forward<T: Scalar>(
    p: &Bound<T>,
    net: &Backbone,
    of_mag: &Var<T>,
    ratios: &[f64],
    reg: &Registry,
) -> Result<(Var<T>, Var<T>)> {
    let stage2 = net.forward_front(p, of_mag, ratios, reg)?;
    let pooled = net.forward_back(p, &stage2, ratios, reg)?;
    Ok((stage2, pooled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ammsm_tensor::Tape;

    #[test]
    fn desk_layout() {
        let c = StageConfig::desk();
        assert_eq!(c.slots(), 5);
        assert_eq!(c.slot(0, 0), 0);
        assert_eq!(c.slot(1, 1), 1);
        assert_eq!(c.slot(2, 2), 3);
        assert_eq!(c.slot(3, 1), 4);
        let msa: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| c.kinds(i).into_iter().enumerate().map(move |(j, k)| (i, j, k)))
            .filter(|t| t.2 == BlockKind::Msa)
            .map(|t| (t.0, t.1))
            .collect();
        assert_eq!(msa, vec![(2, 3), (3, 1)]);
        assert_eq!(StageConfig::paper().slots(), 9);
        assert_eq!(c.stage_sizes(64, 64), vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn single_token_closed_form() {
        let tape = Tape::new();
        let t = |v: Vec<f64>, s: &[usize]| tape.constant(Tensor::from_vec(s, v).unwrap());
        let x = t(vec![2.0, -4.0], &[1, 1, 2]);
        let a = t(vec![0.5], &[1, 1, 1]);
        let b = t(vec![1.0, 2.0], &[1, 1, 2]);
        let c = t(vec![3.0, -1.0], &[1, 1, 2]);
        let y = ssd_core(&x, &a, &b, &c).unwrap().value();
        assert_eq!(y.data(), &[4.0, -8.0]);
    }

    #[test]
    fn orthogonal_keys_and_queries_annihilate() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64 + 1.0));
        let a = tape.constant(Tensor::<f64>::ones(&[1, 3, 2]));
        let b = tape.constant(Tensor::<f64>::from_fn(&[1, 3, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 }));
        let c = tape.constant(Tensor::<f64>::from_fn(&[1, 3, 2], |i| if i % 2 == 1 { 1.0 } else { 0.0 }));
        let y = ssd_core(&x, &a, &b, &c).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_positive_gate_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 2, 2]));
        let a = tape.constant(Tensor::<f64>::from_vec(&[1, 2, 1], vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::<f64>::ones(&[1, 2, 3]));
        assert!(ssd_core(&x, &a, &b, &b).is_err());
    }

    #[test]
    fn uniform_attention_averages_values() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::<f64>::ones(&[1, 3, 4]));
        let v = tape.constant(Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64));
        let y = attention(&q, &q, &v, 2).unwrap().value();
        for ch in 0..4 {
            let mean = (0..3).map(|t| (t * 4 + ch) as f64).sum::<f64>() / 3.0;
            for t in 0..3 {
                assert!((y.get(&[0, t, ch]) - mean).abs() < 1e-12);
            }
        }
    }
}
