//! DP-SGD: Poisson subsampling, per-example gradients on separate tapes,
//! L2 clipping, Gaussian noise, and SGD on trainable parameters only.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{Accountant, PrivacySpend};
use crate::error::{Error, Result};
use crate::nn::{ParamLayout, ParamStore};
use crate::rng::{self, domain};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub steps: u64,
    pub lr: f64,
    pub delta: f64,
    /// Budget the run must stay within; checked before and during training.
    pub target_epsilon: Option<f64>,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        DpSgdConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sample_rate: 0.05,
            steps: 100,
            lr: 0.1,
            delta: 1e-5,
            target_epsilon: None,
        }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be > 0", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "noise multiplier {} must be >= 0",
                self.noise_multiplier
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sample rate {} outside (0, 1]",
                self.sample_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("DP-SGD needs at least one step".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1)", self.delta)));
        }
        Ok(())
    }

    pub fn accountant(&self) -> Result<Accountant> {
        Accountant::new(self.sample_rate, self.noise_multiplier, self.delta)
    }

    /// Fails when the planned number of steps would exceed the target budget.
    pub fn check_budget(&self) -> Result<PrivacySpend> {
        self.validate()?;
        let spend = self.accountant()?.spend_after(self.steps)?;
        if let Some(target) = self.target_epsilon {
            if spend.epsilon > target {
                return Err(Error::BudgetExhausted {
                    steps: 0,
                    spent: spend.epsilon,
                    target,
                });
            }
        }
        Ok(spend)
    }
}

/// Each of `0..n` independently with probability `q`, in increasing order.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    (0..n).filter(|_| rng::uniform(rng) < q).collect()
}

/// Flattened per-example gradients over a [`ParamLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGrads<T> {
    pub dim: usize,
    pub rows: Vec<Vec<T>>,
    pub losses: Vec<f64>,
}

impl<T: Scalar> PerSampleGrads<T> {
    pub fn empty(dim: usize) -> Self {
        PerSampleGrads {
            dim,
            rows: Vec::new(),
            losses: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// L2 norm of each example's full gradient, accumulated in f64.
    pub fn norms(&self) -> Vec<f64> {
        self.rows.iter().map(|r| l2(r)).collect()
    }
}

fn l2<T: Scalar>(row: &[T]) -> f64 {
    row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// Gradient of `loss_fn(i)` for each `i` in `batch`, each on a fresh tape.
/// Examples may run in parallel; results keep batch order.
pub fn per_sample_grads<T, F>(layout: &ParamLayout, batch: &[usize], loss_fn: F) -> Result<PerSampleGrads<T>>
where
    T: Scalar,
    F: Fn(usize, &mut Graph<T>) -> Result<Var> + Sync,
{
    let results: Vec<Result<(Vec<T>, f64)>> = batch
        .par_iter()
        .map(|&i| {
            let mut g = Graph::new();
            let loss = loss_fn(i, &mut g)?;
            let value = g.value(loss).item().to_f64_lossy();
            g.backward(loss)?;
            Ok((layout.flatten(&g), value))
        })
        .collect();
    let mut out = PerSampleGrads::empty(layout.len);
    for r in results {
        let (row, loss) = r?;
        out.rows.push(row);
        out.losses.push(loss);
    }
    Ok(out)
}

/// Scales each row by `min(1, C / |row|)`. Rows within the bound are left
/// untouched.
pub fn clip_per_sample<T: Scalar>(grads: &mut PerSampleGrads<T>, clip_norm: f64) -> Result<()> {
    if !(clip_norm > 0.0) {
        return Err(Error::invalid(format!("clip norm {clip_norm} must be > 0")));
    }
    for row in &mut grads.rows {
        let norm = l2(row);
        if norm > clip_norm {
            let f = T::lit(clip_norm / norm);
            row.iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(())
}

/// `(sum_i g_i + N(0, sigma^2 C^2 I)) / expected_batch`. The sum runs in
/// batch order in f64; noise is drawn coordinate by coordinate.
pub fn noisy_aggregate<T: Scalar, R: Rng + ?Sized>(
    grads: &PerSampleGrads<T>,
    clip_norm: f64,
    sigma: f64,
    expected_batch: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(expected_batch > 0.0) {
        return Err(Error::invalid(format!(
            "expected batch size {expected_batch} must be > 0"
        )));
    }
    let mut sum = vec![0.0f64; grads.dim];
    for row in &grads.rows {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v.to_f64_lossy();
        }
    }
    let sd = sigma * clip_norm;
    Ok(sum
        .into_iter()
        .map(|s| {
            let noise = if sd > 0.0 { sd * rng::normal(rng) } else { 0.0 };
            T::lit((s + noise) / expected_batch)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub batch_size: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    pub max_grad_norm: f64,
    pub clipped_fraction: f64,
    pub epsilon: f64,
}

/// One DP-SGD iteration on `store`. Batch membership and noise come from
/// substreams keyed by `(seed, step)`. `loss_fn(step, example, graph)` builds
/// the loss of one example. The accountant ticks exactly once on success.
pub fn dp_sgd_step<T, F>(
    store: &mut ParamStore<T>,
    cfg: &DpSgdConfig,
    dataset_len: usize,
    seed: u64,
    accountant: &mut Accountant,
    loss_fn: F,
) -> Result<StepStats>
where
    T: Scalar,
    F: Fn(u64, usize, &ParamStore<T>, &mut Graph<T>) -> Result<Var> + Sync,
{
    let step = accountant.steps();
    let next = accountant.spend_after(step + 1)?;
    if let Some(target) = cfg.target_epsilon {
        if next.epsilon > target {
            return Err(Error::BudgetExhausted {
                steps: step,
                spent: next.epsilon,
                target,
            });
        }
    }
    let layout = store.trainable_layout();
    if layout.len == 0 {
        return Err(Error::invalid("DP-SGD step with no trainable parameters"));
    }
    let batch = poisson_sample(
        dataset_len,
        cfg.sample_rate,
        &mut rng::substream(seed, domain::DP_SAMPLE, step),
    );
    let mut grads = {
        let store_ref: &ParamStore<T> = store;
        per_sample_grads(&layout, &batch, |i, g| loss_fn(step, i, store_ref, g))?
    };
    let norms = grads.norms();
    if let Some(i) = norms.iter().position(|n| !n.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient of example {} at step {step}", batch[i]),
        });
    }
    clip_per_sample(&mut grads, cfg.clip_norm)?;
    let expected = cfg.sample_rate * dataset_len as f64;
    let update = noisy_aggregate(
        &grads,
        cfg.clip_norm,
        cfg.noise_multiplier,
        expected,
        &mut rng::substream(seed, domain::DP_NOISE, step),
    )?;
    store.sgd_step(&layout, &update, T::lit(cfg.lr))?;
    accountant.tick();
    let n = norms.len().max(1) as f64;
    Ok(StepStats {
        step,
        batch_size: batch.len(),
        mean_loss: grads.losses.iter().sum::<f64>() / n,
        mean_grad_norm: norms.iter().sum::<f64>() / n,
        max_grad_norm: norms.iter().cloned().fold(0.0, f64::max),
        clipped_fraction: norms.iter().filter(|&&x| x > cfg.clip_norm).count() as f64 / n,
        epsilon: next.epsilon,
    })
}
