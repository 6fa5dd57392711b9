//! DDPM noise schedule, classifier-free training loss, and guided ancestral
//! sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, UNet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Linear beta schedule with cumulative products kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(400, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("diffusion schedule needs at least one step"));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("diffusion schedule needs at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid(format!("beta[{i}] = {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        }
    }

    fn check_t(&self, t: &[usize]) -> Result<()> {
        match t.iter().find(|&&ti| ti >= self.len()) {
            Some(bad) => Err(Error::invalid(format!("timestep {bad} outside [0, {})", self.len()))),
            None => Ok(()),
        }
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise` with one `t` per batch entry.
    pub fn q_sample<T: Scalar>(&self, x0: &Tensor<T>, t: &[usize], noise: &Tensor<T>) -> Result<Tensor<T>> {
        if x0.shape() != noise.shape() {
            return Err(Error::shape(
                "q_sample",
                format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape()),
            ));
        }
        let n = x0.shape()[0];
        if t.len() != n {
            return Err(Error::shape(
                "q_sample",
                format!("{n} samples with {} timesteps", t.len()),
            ));
        }
        self.check_t(t)?;
        let row = x0.row_len();
        let mut out = Vec::with_capacity(x0.numel());
        for (i, &ti) in t.iter().enumerate() {
            let a = T::lit(self.alpha_bars[ti].sqrt());
            let s = T::lit((1.0 - self.alpha_bars[ti]).sqrt());
            let xs = &x0.data()[i * row..(i + 1) * row];
            let ns = &noise.data()[i * row..(i + 1) * row];
            out.extend(xs.iter().zip(ns).map(|(&x, &e)| a * x + s * e));
        }
        Tensor::new(x0.shape().to_vec(), out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub p_uncond: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { w: 2.0, p_uncond: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!(
                "guidance weight {} must be finite and >= 0",
                self.w
            )));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        Ok(())
    }
}

/// A noise-prediction network. Label `num_classes()` is the null token.
pub trait EpsModel<T: Scalar> {
    fn num_classes(&self) -> usize;

    fn eps(&self, g: &mut Graph<T>, x: Var, t: &[usize], labels: &[usize]) -> Result<Var>;

    fn null_class(&self) -> usize {
        self.num_classes()
    }
}

/// A U-Net paired with its parameters.
pub struct Denoiser<'a, T: Scalar> {
    pub net: &'a UNet,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Denoiser<'a, T> {
    pub fn new(net: &'a UNet, store: &'a ParamStore<T>) -> Self {
        Denoiser { net, store }
    }
}

impl<T: Scalar> EpsModel<T> for Denoiser<'_, T> {
    fn num_classes(&self) -> usize {
        self.net.config().num_classes
    }

    fn eps(&self, g: &mut Graph<T>, x: Var, t: &[usize], labels: &[usize]) -> Result<Var> {
        self.net.forward(g, self.store, x, t, labels)
    }
}

/// The random inputs of one training-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraws<T> {
    pub t: Vec<usize>,
    pub labels: Vec<usize>,
    pub noise: Tensor<T>,
}

/// Draws timesteps, conditioning dropout, and noise for a batch shaped like
/// `x0`. Per sample: `t`, then the dropout coin; then all noise in order.
pub fn draw_training_inputs<T: Scalar, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    labels: &[usize],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    null_class: usize,
    rng: &mut R,
) -> Result<TrainingDraws<T>> {
    let n = x0.shape()[0];
    if labels.len() != n {
        return Err(Error::shape(
            "training loss",
            format!("{n} samples with {} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= null_class) {
        return Err(Error::invalid(format!("label {bad} outside [0, {null_class})")));
    }
    let mut t = Vec::with_capacity(n);
    let mut out_labels = Vec::with_capacity(n);
    for &l in labels {
        t.push(rng.random_range(0..schedule.len()));
        let drop = rng::uniform(rng) < p_uncond;
        out_labels.push(if drop { null_class } else { l });
    }
    let noise = Tensor::randn(x0.shape().to_vec(), rng);
    Ok(TrainingDraws {
        t,
        labels: out_labels,
        noise,
    })
}

/// `mse(model(x_t, t, label), noise)` for explicit draws.
pub fn cfg_loss_with<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    g: &mut Graph<T>,
    x0: &Tensor<T>,
    schedule: &NoiseSchedule,
    draws: &TrainingDraws<T>,
) -> Result<Var> {
    let xt = schedule.q_sample(x0, &draws.t, &draws.noise)?;
    let x = g.constant(xt);
    let pred = model.eps(g, x, &draws.t, &draws.labels)?;
    let target = g.constant(draws.noise.clone());
    g.mse_loss(pred, target)
}

/// Classifier-free training loss: random `t`, Gaussian noise, and each label
/// replaced by the null token with probability `p_uncond`.
pub fn cfg_training_loss<T: Scalar, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    g: &mut Graph<T>,
    x0: &Tensor<T>,
    labels: &[usize],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<Var> {
    let draws = draw_training_inputs(x0, labels, schedule, p_uncond, model.null_class(), rng)?;
    cfg_loss_with(model, g, x0, schedule, &draws)
}

/// `(1 + w) eps_c - w eps_u`, elementwise.
pub fn guided_eps<T: Scalar>(eps_c: &[T], eps_u: &[T], w: f64) -> Vec<T> {
    let (a, b) = (T::lit(1.0 + w), T::lit(w));
    eps_c.iter().zip(eps_u).map(|(&c, &u)| a * c - b * u).collect()
}

fn predict<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    t: usize,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let ts = vec![t; labels.len()];
    let e = model.eps(&mut g, xv, &ts, labels)?;
    Ok(g.value(e).clone())
}

/// One reverse step: posterior mean from `eps`, plus `sqrt(var) z` when `t > 0`.
fn reverse_step<T: Scalar, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    x: &Tensor<T>,
    eps: &[T],
    rng: &mut R,
) -> Result<Tensor<T>> {
    let beta = schedule.beta(t);
    let c_eps = T::lit(beta / (1.0 - schedule.alpha_bar(t)).sqrt());
    let c_x = T::lit(1.0 / (1.0 - beta).sqrt());
    let mut out: Vec<T> = x
        .data()
        .iter()
        .zip(eps)
        .map(|(&xv, &e)| c_x * (xv - c_eps * e))
        .collect();
    if t > 0 {
        let sd = schedule.posterior_variance(t).sqrt();
        for v in out.iter_mut() {
            *v += T::lit(sd * rng::normal(rng));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn sample_loop<T: Scalar, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    shape: [usize; 4],
    class_id: usize,
    guidance: Option<f64>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if class_id >= model.num_classes() {
        return Err(Error::invalid(format!(
            "class {class_id} outside [0, {})",
            model.num_classes()
        )));
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::invalid("cannot sample zero images"));
    }
    let mut x = Tensor::<T>::randn(shape.to_vec(), rng);
    for t in (0..schedule.len()).rev() {
        let eps = match guidance {
            None => predict(model, &x, t, &vec![class_id; n])?.into_vec(),
            Some(w) => {
                // One batch holds the conditional half then the null half.
                let both = Tensor::cat_rows(&[x.clone(), x.clone()])?;
                let mut labels = vec![class_id; n];
                labels.extend(std::iter::repeat_n(model.null_class(), n));
                let e = predict(model, &both, t, &labels)?;
                let half = e.numel() / 2;
                guided_eps(&e.data()[..half], &e.data()[half..], w)
            }
        };
        x = reverse_step(schedule, t, &x, &eps, rng)?;
    }
    Ok(x.map(|v| v.max(-T::one()).min(T::one())))
}

/// Guided ancestral DDPM sampling of `n` images of class `class_id`, shaped
/// `[n, channels, size, size]`. Outputs are clipped to `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample<T: Scalar, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    class_id: usize,
    n: usize,
    channels: usize,
    size: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    guidance.validate()?;
    sample_loop(
        model,
        schedule,
        [n, channels, size, size],
        class_id,
        Some(guidance.w),
        rng,
    )
}

/// Conditional-only sampling: the same loop using `eps_c` directly.
pub fn ddpm_sample_conditional<T: Scalar, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    class_id: usize,
    n: usize,
    channels: usize,
    size: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    sample_loop(model, schedule, [n, channels, size, size], class_id, None, rng)
}
