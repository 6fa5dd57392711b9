//! Small CNN used as the downstream classifier.

use serde::{Deserialize, Serialize};

use super::layers::{ConvSpec, GroupNormSpec, LinearSpec};
use super::ParamStore;
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            image_size: 16,
            in_channels: 1,
            num_classes: 4,
            width: 8,
        }
    }
}

/// conv-norm-act, pool, conv-norm-act, pool, conv-norm-act, linear.
#[derive(Clone, Debug)]
pub struct Classifier {
    cfg: ClassifierConfig,
    convs: Vec<ConvSpec>,
    norms: Vec<GroupNormSpec>,
    head: LinearSpec,
    adapters: AdapterSet,
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs >= 2 classes, got {}",
                cfg.num_classes
            )));
        }
        if !cfg.image_size.is_multiple_of(4) || cfg.width == 0 {
            return Err(Error::Config(format!(
                "classifier needs image size divisible by 4 (got {}) and positive width",
                cfg.image_size
            )));
        }
        let w = cfg.width;
        let chans = [(cfg.in_channels, w), (w, 2 * w), (2 * w, 2 * w)];
        let convs = chans
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| ConvSpec::new(format!("cls.conv{i}"), a, b, 3))
            .collect();
        let norms = chans
            .iter()
            .enumerate()
            .map(|(i, &(_, b))| GroupNormSpec::new(format!("cls.norm{i}"), b, 4.min(b)))
            .collect();
        let feat = 2 * w * (cfg.image_size / 4) * (cfg.image_size / 4);
        Ok(Classifier {
            head: LinearSpec::new("cls.head", feat, cfg.num_classes),
            convs,
            norms,
            adapters: AdapterSet::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn conv_specs(&self) -> Vec<&ConvSpec> {
        self.convs.iter().collect()
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut AdapterSet {
        &mut self.adapters
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvSpec::param_count).sum::<usize>()
            + self.norms.iter().map(GroupNormSpec::param_count).sum::<usize>()
            + self.head.param_count()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = rng::substream(seed, domain::CLASSIFIER, 0);
        let mut store = ParamStore::new();
        for c in &self.convs {
            c.init(&mut store, &mut rng)?;
        }
        for n in &self.norms {
            n.init(&mut store)?;
        }
        self.head.init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Logits `[N, num_classes]` for images `[N, C, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut h = x;
        for (i, (c, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = c.forward(g, store, &self.adapters, h)?;
            h = norm.forward(g, store, h)?;
            h = g.silu(h);
            if i < 2 {
                h = g.avg_pool2x(h)?;
            }
        }
        let feat = g.value(h).row_len();
        let h = g.reshape(h, &[n, feat])?;
        self.head.forward(g, store, h)
    }

    /// Argmax predictions, evaluated without a tape in chunks of `batch`.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &crate::Tensor<T>,
        batch: usize,
    ) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(n);
            let mut g = Graph::no_grad();
            let x = g.constant(images.slice_rows(start, end)?);
            let logits = self.forward(&mut g, store, x)?;
            let k = self.cfg.num_classes;
            for row in g.value(logits).data().chunks(k) {
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}
