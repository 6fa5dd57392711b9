//! Oracles and helpers shared by the integration tests and the acceptance
//! target. Nothing here calls into the code under test for the value it
//! checks.
#![allow(dead_code)]

use dploda::nn::{ParamStore, UNetConfig};
use dploda::rng;
use dploda::{Graph, Result, Tensor, Var};
use rand::Rng;

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is ~0 from dividing rounding noise by rounding noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Error of `analytic` against central differences of `f(delta)`, the
/// function shifted by `delta` along one coordinate. When the one-sided
/// differences at `FD_STEP` disagree, a kink (leaky ReLU at zero) may lie
/// within one step and the central difference is taken again with a step
/// small enough to stay on one side of it. A wrong analytic gradient fails
/// at either step.
pub fn fd_err(analytic: f64, f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (fp, f0, fm) = (f(FD_STEP)?, f(0.0)?, f(-FD_STEP)?);
    let err = rel_err(analytic, (fp - fm) / (2.0 * FD_STEP));
    if err < FD_TOL {
        return Ok(err);
    }
    let (fwd, bwd) = ((fp - f0) / FD_STEP, (f0 - fm) / FD_STEP);
    if (fwd - bwd).abs() > FD_TOL * fwd.abs().max(bwd.abs()) {
        let h = FD_STEP / 64.0;
        return Ok(rel_err(analytic, (f(h)? - f(-h)?) / (2.0 * h)));
    }
    Ok(err)
}

/// Inputs drawn from `N(0, 1)`, nudged away from zero so that kinks at the
/// origin are never within a finite-difference step.
pub fn random_input<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(shape.to_vec(), rng);
    t.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

/// Scalar probe `sum(f(inputs) * r)` for a fixed random `r`.
fn probe<F>(
    inputs: &[Tensor<f64>],
    weights: &Option<Tensor<f64>>,
    f: &F,
    grad: bool,
) -> Result<(f64, Vec<Tensor<f64>>, Tensor<f64>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    let r = match weights {
        Some(w) => w.clone(),
        None => Tensor::from_fn(shape.clone(), |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0),
    };
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    let mut grads = Vec::new();
    if grad {
        g.backward(loss)?;
        for &v in &vars {
            grads.push(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec())));
        }
    }
    Ok((value, grads, r))
}

/// Max relative error between tape gradients and central differences of
/// `sum(f(inputs) * r)` with respect to every input coordinate.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, grads, r) = probe(inputs, &None, &f, true)?;
    let weights = Some(r);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut shifted = |d: f64| {
                let mut x = inputs.to_vec();
                x[k].data_mut()[i] += d;
                Ok(probe(&x, &weights, &f, false)?.0)
            };
            worst = worst.max(fd_err(grads[k].data()[i], &mut shifted)?);
        }
    }
    Ok(worst)
}

/// Same check for named parameters of a store, sampling `per_instance`
/// coordinates (all of them when `None`).
pub fn gradcheck_params<F>(store: &ParamStore<f64>, coords: Option<usize>, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    g.backward(loss)?;
    let grads = g.param_grads();
    let names: Vec<(String, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(n, p)| (0..p.tensor.numel()).map(move |i| (n.to_string(), i)))
        .collect();
    let picked: Vec<(String, usize)> = match coords {
        None => names,
        Some(k) => {
            let mut r = rng::seeded(seed);
            (0..k).map(|_| names[r.random_range(0..names.len())].clone()).collect()
        }
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(s, &mut g)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    for (name, i) in picked {
        let base = store.tensor(&name)?.clone();
        let mut s = store.clone();
        let mut shifted = |d: f64| {
            let mut t = base.clone();
            t.data_mut()[i] += d;
            s.set(&name, t, true);
            eval(&s)
        };
        let analytic = grads.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
        worst = worst.max(fd_err(analytic, &mut shifted)?);
    }
    Ok(worst)
}

/// A U-Net small enough for exhaustive finite differences.
pub fn tiny_unet_config() -> UNetConfig {
    UNetConfig {
        image_size: 8,
        in_channels: 1,
        base_channels: 4,
        channel_mults: vec![1, 2],
        res_blocks: 1,
        attention: true,
        num_classes: 3,
        time_dim: 8,
        norm_groups: 2,
    }
}

// ---------------------------------------------------------- parameter counts

fn conv(ci: usize, co: usize, k: usize) -> usize {
    co * ci * k * k + co
}

/// `(base, loda, lora)` parameter counts from the architecture description:
/// stem; per level `res_blocks` ResNet blocks (attention after each at the
/// lowest level); mid ResNet-attention-ResNet; mirrored up path whose first
/// block takes the level's skip; 3x3 upsample convs between levels; output
/// norm and conv. Adapters go on every conv with `rank < min(in, out)` (LoDA)
/// or `rank < min(in k, out k)` (reshaped LoRA).
pub fn param_count_oracle(cfg: &UNetConfig, rank: usize) -> (usize, usize, usize) {
    let td = cfg.time_dim;
    let ch: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
    let levels = ch.len();
    let mut convs: Vec<(usize, usize, usize)> = vec![(cfg.in_channels, ch[0], 3)];
    let mut other = 2 * (td * td + td) + (cfg.num_classes + 1) * td;
    let mut res = |ci: usize, co: usize, convs: &mut Vec<(usize, usize, usize)>| {
        other += 2 * ci + (td * co + co) + 2 * co;
        convs.push((ci, co, 3));
        convs.push((co, co, 3));
        if ci != co {
            convs.push((ci, co, 1));
        }
    };
    let mut attn_norms = 0;
    let attn = |c: usize, convs: &mut Vec<(usize, usize, usize)>, norms: &mut usize| {
        *norms += 2 * c;
        for _ in 0..4 {
            convs.push((c, c, 1));
        }
    };
    let mut cur = ch[0];
    for (i, &c) in ch.iter().enumerate() {
        for _ in 0..cfg.res_blocks {
            res(cur, c, &mut convs);
            cur = c;
            if cfg.attention && i == levels - 1 {
                attn(c, &mut convs, &mut attn_norms);
            }
        }
    }
    res(cur, cur, &mut convs);
    if cfg.attention {
        attn(cur, &mut convs, &mut attn_norms);
    }
    res(cur, cur, &mut convs);
    for i in (0..levels).rev() {
        cur += ch[i];
        for _ in 0..cfg.res_blocks {
            res(cur, ch[i], &mut convs);
            cur = ch[i];
            if cfg.attention && i == levels - 1 {
                attn(ch[i], &mut convs, &mut attn_norms);
            }
        }
        if i > 0 {
            convs.push((ch[i], ch[i - 1], 3));
            cur = ch[i - 1];
        }
    }
    convs.push((ch[0], cfg.in_channels, 3));
    let base = other + attn_norms + 2 * ch[0] + convs.iter().map(|&(a, b, k)| conv(a, b, k)).sum::<usize>();
    let loda = convs
        .iter()
        .filter(|&&(a, b, _)| rank < a.min(b))
        .map(|&(a, b, k)| rank * a * k * k + b * rank)
        .sum();
    let lora = convs
        .iter()
        .filter(|&&(a, b, k)| rank < (a * k).min(b * k))
        .map(|&(a, b, k)| rank * a * k + b * k * rank)
        .sum();
    (base, loda, lora)
}

// ------------------------------------------------------------- Renyi oracle

/// `log N(x; mu, s^2)`.
fn log_normal(x: f64, mu: f64, s: f64) -> f64 {
    -0.5 * ((x - mu) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Trapezoid rule on `n` uniform panels. For smooth integrands that decay
/// to zero at both ends the error falls exponentially in `n`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

/// `D_alpha(P || Q)` for `P = (1-q) N(0, s^2) + q N(1, s^2)` and
/// `Q = N(0, s^2)`, by numerical integration of `p^alpha q^(1-alpha)` in
/// log-shifted form.
pub fn renyi_mixture_numeric(q: f64, sigma: f64, alpha: f64) -> f64 {
    let log_integrand = |x: f64| {
        let lq = log_normal(x, 0.0, sigma);
        let l1 = log_normal(x, 1.0, sigma);
        let lp = if q >= 1.0 {
            l1
        } else {
            let a = (1.0 - q).ln() + lq;
            let b = q.ln() + l1;
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        };
        alpha * lp + (1.0 - alpha) * lq
    };
    // The integrand is Gaussian-like in x with mean at most alpha and width
    // ~sigma; locate its peak and integrate far into both tails.
    let (mut lo, mut hi) = (-10.0 * sigma - 2.0, 10.0 * sigma + alpha + 2.0);
    let mut peak = f64::NEG_INFINITY;
    let mut at = 0.0;
    let n = 20_000;
    for i in 0..=n {
        let x = lo + (hi - lo) * i as f64 / n as f64;
        let v = log_integrand(x);
        if v > peak {
            peak = v;
            at = x;
        }
    }
    lo = lo.min(at - 40.0 * sigma);
    hi = hi.max(at + 40.0 * sigma);
    let f = |x: f64| (log_integrand(x) - peak).exp();
    let total = integrate(&f, lo, hi, 200_000);
    (total.ln() + peak) / (alpha - 1.0)
}

/// The 27-point `(q, sigma, alpha)` lattice used by the soundness checks.
pub fn rdp_lattice() -> Vec<(f64, f64, u32)> {
    let mut v = Vec::new();
    for &q in &[0.01, 0.1, 0.5] {
        for &s in &[0.8, 1.5, 4.0] {
            for &a in &[2u32, 8, 32] {
                v.push((q, s, a));
            }
        }
    }
    v
}

/// Values computed once with an independent 50-digit binomial expansion
/// (mpmath) and frozen: spend of q=0.05, sigma=2, 1000 steps, delta=1e-5.
pub const ACCOUNT_Q05_S2_T1000_EPS: f64 = 4.5666493781903239;
pub const ACCOUNT_Q05_S2_T1000_ORDER: f64 = 6.0;
/// Calibrated sigma for q=0.05, epsilon=10, delta=1e-5 at 400 and 2000 steps.
pub const CALIBRATED_SIGMA_T400: f64 = 0.908237510002;
pub const CALIBRATED_SIGMA_T2000: f64 = 1.48179452877;
/// `min_a a/2 + ln(1e5)/(a-1)` over real `a > 1`: `sqrt(2 ln 1e5) + 1/2`.
pub fn single_gaussian_eps() -> f64 {
    (2.0 * (1e5f64).ln()).sqrt() + 0.5
}

// ------------------------------------------------------------------- fuzzing

pub enum Mutation {
    Truncate(usize),
    FlipBit(usize, u8),
}

/// `n` seeded truncations and single-bit flips of a file of `len` bytes.
pub fn mutations(len: usize, n: usize, seed: u64) -> Vec<Mutation> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                Mutation::Truncate(r.random_range(0..len))
            } else {
                Mutation::FlipBit(r.random_range(0..len), r.random_range(0..8))
            }
        })
        .collect()
}

pub fn apply(bytes: &[u8], m: &Mutation) -> Vec<u8> {
    match *m {
        Mutation::Truncate(n) => bytes[..n].to_vec(),
        Mutation::FlipBit(i, b) => {
            let mut v = bytes.to_vec();
            v[i] ^= 1 << b;
            v
        }
    }
}

// ------------------------------------------------------------- micro config

/// A run small enough to go end to end in seconds.
pub fn micro_config() -> dploda::pipeline::RunConfig {
    let mut c = dploda::pipeline::RunConfig::default();
    c.data.num_classes = 3;
    c.data.public_per_class = 16;
    c.data.private_per_class = 16;
    c.data.test_per_class = 8;
    c.unet.base_channels = 4;
    c.unet.channel_mults = vec![1, 2];
    c.unet.res_blocks = 1;
    c.unet.attention = true;
    c.unet.time_dim = 8;
    c.unet.norm_groups = 2;
    c.loda.rank = 2;
    c.loda.lora_rank = 2;
    c.diffusion.steps = 10;
    c.diffusion.beta_start = 1e-3;
    c.diffusion.beta_end = 0.2;
    c.dp.sample_rate = 0.25;
    c.dp.epochs = 2;
    c.dp.lr = 0.5;
    let p = &mut c.pipeline;
    p.seed = 7;
    p.pretrain1_epochs = 2;
    p.pretrain2_epochs = 2;
    p.pretrain_batch = 8;
    p.pretrain_lr = 3e-3;
    p.synthetic_per_class = 4;
    p.sample_batch = 3;
    p.classifier_width = 4;
    p.classifier_epochs = 2;
    p.classifier_batch = 8;
    p.baseline_epochs = 2;
    p.grid_per_class = 2;
    c
}
