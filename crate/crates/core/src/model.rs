//! The two-stream model: magnifier -> temporal backbone, spatial stream fused
//! after stage 2, pooled head.

use ammsm_tensor::{Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, StageConfig};
use crate::classifier::{classify, cls_loss, fuse, spatial_forward, SpatialNet};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::magnifier::{alpha_batch, mag_loss, magnify, total_loss_var, LossSchedule, Magnifier};
use crate::metrics::Registry;
use crate::params::{Bound, Init, Linear, ParamStore};

/// Which components are present, for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Raw flow goes straight to the backbone; no magnification loss.
    NoAmm,
    /// Dense backbone without window selection.
    NoSa,
}

impl Variant {
    pub fn has_magnifier(self) -> bool {
        self != Variant::NoAmm
    }

    pub fn is_sparse(self) -> bool {
        self != Variant::NoSa
    }
}

#[derive(Debug, Clone)]
pub struct Arch {
    pub variant: Variant,
    pub n_classes: usize,
    pub magnifier: Option<Magnifier>,
    pub spatial: SpatialNet,
    pub fuse_proj: Linear,
    pub backbone: Backbone,
    pub head: Linear,
}

#[derive(Clone)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub arch: Arch,
}

/// A batch of samples converted to the model's scalar type.
#[derive(Clone)]
pub struct Batch<T> {
    pub onset: Tensor<T>,
    pub flow: Tensor<T>,
    pub labels: Vec<usize>,
}

fn stack<T: Scalar>(parts: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let shape = parts[0].shape().to_vec();
    if parts.iter().any(|p| p.shape() != shape.as_slice()) {
        return Err(Error::Contract("samples in a batch differ in shape".into()));
    }
    let mut full = vec![parts.len()];
    full.extend_from_slice(&shape);
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in parts {
        data.extend(p.data().iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::from_vec(&full, data)?)
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        Ok(Batch {
            onset: stack(&samples.iter().map(|s| &s.onset).collect::<Vec<_>>())?,
            flow: stack(&samples.iter().map(|s| &s.flow).collect::<Vec<_>>())?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Output of one forward pass.
pub struct Forward<T> {
    pub logits: Var<T>,
    /// Magnified flow; `None` for the variant without a magnifier.
    pub of_mag: Option<Var<T>>,
}

/// Loss terms of one training step.
pub struct StepLoss<T> {
    pub total: Var<T>,
    pub cls: f64,
    pub mag: f64,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &StageConfig, n_classes: usize, variant: Variant, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least two classes, got {n_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let magnifier = variant
            .has_magnifier()
            .then(|| Magnifier::new(&mut store, &mut init, "mag"));
        let spatial = SpatialNet::new(&mut store, &mut init, "spatial");
        let backbone = Backbone::new(&mut store, &mut init, "temporal", cfg, variant.is_sparse())?;
        let fuse_proj = Linear::new(&mut store, &mut init, "fuse", spatial.channels, cfg.channels[1]);
        let head = Linear::new(&mut store, &mut init, "head", cfg.channels[3], n_classes);
        Ok(Model {
            store,
            arch: Arch {
                variant,
                n_classes,
                magnifier,
                spatial,
                fuse_proj,
                backbone,
                head,
            },
        })
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound<T> {
        self.store.bind(tape, trainable)
    }

    /// Flow handed to the backbone: the magnifier output, or the raw flow.
    pub fn temporal_input(&self, p: &Bound<T>, flow: &Var<T>, alpha: f64) -> Result<Option<Var<T>>> {
        let Some(mag) = &self.arch.magnifier else {
            return Ok(None);
        };
        let s = flow.shape();
        let amap = p.constant(alpha_batch(alpha, s[0], s[1], s[2])?);
        Ok(Some(magnify(flow, &amap, mag, p)?))
    }

    pub fn spatial_features(&self, p: &Bound<T>, onset: &Var<T>) -> Result<Var<T>> {
        spatial_forward(p, &self.arch.spatial, onset)
    }

    /// Temporal stream from the backbone input onwards, with fusion.
    pub fn classify_from(&self, p: &Bound<T>, flow_in: &Var<T>, spatial: &Var<T>, ratios: &[f64], reg: &Registry) -> Result<Var<T>> {
        let a = &self.arch;
        let stage2 = a.backbone.forward_front(p, flow_in, ratios, reg)?;
        let fused = fuse(p, &a.fuse_proj, &stage2, spatial)?;
        let pooled = a.backbone.forward_back(p, &fused, ratios, reg)?;
        classify(p, &a.head, &pooled)
    }

    pub fn forward(&self, p: &Bound<T>, batch: &Batch<T>, alpha: f64, ratios: &[f64], reg: &Registry) -> Result<Forward<T>> {
        let (h, w) = (batch.flow.shape()[1], batch.flow.shape()[2]);
        self.arch.backbone.check_input(h, w)?;
        let flow = p.constant(batch.flow.clone());
        let onset = p.constant(batch.onset.clone());
        let of_mag = self.temporal_input(p, &flow, alpha)?;
        let spatial = self.spatial_features(p, &onset)?;
        let logits = self.classify_from(p, of_mag.as_ref().unwrap_or(&flow), &spatial, ratios, reg)?;
        Ok(Forward { logits, of_mag })
    }

    /// Cross-entropy plus the scheduled magnification loss.
    pub fn loss(&self, p: &Bound<T>, batch: &Batch<T>, alpha: f64, ratios: &[f64], sched: LossSchedule, reg: &Registry) -> Result<StepLoss<T>> {
        let out = self.forward(p, batch, alpha, ratios, reg)?;
        let l_cls = cls_loss(&out.logits, &batch.labels)?;
        let cls = l_cls.value().item()?.as_f64();
        match &out.of_mag {
            Some(of_mag) => {
                let flow = p.constant(batch.flow.clone());
                let l_mag = mag_loss(&flow, of_mag, alpha)?;
                let mag = l_mag.value().item()?.as_f64();
                Ok(StepLoss {
                    total: total_loss_var(&l_cls, &l_mag, sched)?,
                    cls,
                    mag,
                })
            }
            None => Ok(StepLoss {
                total: l_cls,
                cls,
                mag: 0.0,
            }),
        }
    }

    /// Multiply-add count of everything outside the backbone for one sample.
    pub fn fixed_flops(&self, h: usize, w: usize) -> u64 {
        let mag = self.arch.magnifier.as_ref().map_or(0, |m| m.flops(h, w));
        let c2 = (h / 8) * (w / 8);
        mag + self.arch.spatial.flops(h, w) + self.arch.fuse_proj.flops(c2) + self.arch.head.flops(1)
    }
}
