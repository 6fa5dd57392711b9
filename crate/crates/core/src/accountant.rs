//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! All arithmetic is f64. A noise multiplier of zero yields infinite RDP at
//! every order, which [`rdp_to_eps_delta`] reports as an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound of the noise-multiplier search in [`calibrate_sigma`].
pub const SIGMA_MAX: f64 = 100.0;

/// Integer orders `2..=256` used for the subsampled mechanism.
pub fn integer_orders() -> Vec<u32> {
    (2..=256).collect()
}

/// Fractional orders `1 + step, 1 + 2 step, .. <= max` for the pure Gaussian
/// mechanism.
pub fn dense_orders(max: f64, step: f64) -> Vec<f64> {
    let n = ((max - 1.0) / step).floor() as usize;
    (1..=n).map(|i| 1.0 + i as f64 * step).collect()
}

/// RDP of the Gaussian mechanism with sensitivity 1: `alpha / (2 sigma^2)`.
pub fn rdp_gaussian(sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Privacy(format!("order {alpha} must exceed 1")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Privacy(format!("noise multiplier {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Binomial-expansion bound for the sampled Gaussian mechanism at integer
/// order `alpha >= 2`:
/// `1/(alpha-1) log sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1) / (2 sigma^2))`,
/// summed in log space.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Privacy(format!("sample rate {q} outside (0, 1]")));
    }
    if alpha < 2 {
        return Err(Error::Privacy(format!("integer order {alpha} must be >= 2")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Privacy(format!("noise multiplier {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let a = alpha as f64;
    let log_q = q.ln();
    let log_1mq = if q == 1.0 { f64::NEG_INFINITY } else { (-q).ln_1p() };
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let keep = if k == alpha { 0.0 } else { (a - kf) * log_1mq };
        let take = if k == 0 { 0.0 } else { kf * log_q };
        let term = log_binom + keep + take + kf * (kf - 1.0) * inv_2s2;
        acc = log_add(acc, term);
    }
    Ok((acc / (a - 1.0)).max(0.0))
}

/// RDP values at a list of orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, rdp: Vec<f64>) -> Result<Self> {
        if orders.len() != rdp.len() || orders.is_empty() {
            return Err(Error::Privacy(format!(
                "curve needs matching non-empty orders and values, got {} and {}",
                orders.len(),
                rdp.len()
            )));
        }
        if let Some(o) = orders.iter().find(|&&o| !(o > 1.0)) {
            return Err(Error::Privacy(format!("order {o} must exceed 1")));
        }
        if let Some(r) = rdp.iter().find(|&&r| !(r >= 0.0)) {
            return Err(Error::Privacy(format!("RDP value {r} must be >= 0")));
        }
        Ok(RdpCurve { orders, rdp })
    }

    /// One step of the sampled Gaussian mechanism at integer orders.
    pub fn subsampled_gaussian(q: f64, sigma: f64, orders: &[u32]) -> Result<Self> {
        let rdp = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect::<Result<Vec<_>>>()?;
        Self::new(orders.iter().map(|&a| a as f64).collect(), rdp)
    }

    /// One step of the Gaussian mechanism at arbitrary orders.
    pub fn gaussian(sigma: f64, orders: &[f64]) -> Result<Self> {
        let rdp = orders
            .iter()
            .map(|&a| rdp_gaussian(sigma, a))
            .collect::<Result<Vec<_>>>()?;
        Self::new(orders.to_vec(), rdp)
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// Pointwise sum over matching orders.
    pub fn add(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::Privacy("cannot add curves over different orders".into()));
        }
        let rdp = self.rdp.iter().zip(&other.rdp).map(|(a, b)| a + b).collect();
        Ok(RdpCurve {
            orders: self.orders.clone(),
            rdp,
        })
    }

    /// Value at order `alpha`, if present.
    pub fn at(&self, alpha: f64) -> Option<f64> {
        self.orders.iter().position(|&o| o == alpha).map(|i| self.rdp[i])
    }
}

/// `steps`-fold composition: every value multiplied by `steps`.
pub fn compose(curve: &RdpCurve, steps: u64) -> RdpCurve {
    let s = steps as f64;
    RdpCurve {
        orders: curve.orders.clone(),
        rdp: curve
            .rdp
            .iter()
            .map(|&r| if steps == 0 { 0.0 } else { r * s })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
    pub order: f64,
}

/// `eps = min_alpha rho(alpha) + log(1/delta) / (alpha - 1)`, reporting the
/// first minimizing order.
pub fn rdp_to_eps_delta(curve: &RdpCurve, delta: f64) -> Result<PrivacySpend> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Privacy(format!("delta {delta} outside (0, 1]")));
    }
    if curve.is_empty() {
        return Err(Error::Privacy("empty RDP curve".into()));
    }
    let log_inv_delta = -delta.ln();
    let mut best: Option<(f64, f64)> = None;
    for (&a, &r) in curve.orders.iter().zip(&curve.rdp) {
        let eps = r + log_inv_delta / (a - 1.0);
        if eps.is_finite() && best.is_none_or(|(e, _)| eps < e) {
            best = Some((eps, a));
        }
    }
    match best {
        Some((epsilon, order)) => Ok(PrivacySpend {
            epsilon: epsilon.max(0.0),
            delta,
            order,
        }),
        None => Err(Error::Privacy("epsilon is infinite at every order".into())),
    }
}

/// Spend of `steps` sampled-Gaussian steps over the integer orders.
pub fn dp_sgd_spend(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<PrivacySpend> {
    if steps == 0 {
        return Ok(PrivacySpend {
            epsilon: 0.0,
            delta,
            order: f64::INFINITY,
        });
    }
    let curve = RdpCurve::subsampled_gaussian(q, sigma, &integer_orders())?;
    rdp_to_eps_delta(&compose(&curve, steps), delta)
}

/// Smallest noise multiplier (to bisection precision) whose spend after
/// `steps` stays within `eps_target`. The returned value is re-checked.
pub fn calibrate_sigma(q: f64, steps: u64, eps_target: f64, delta: f64) -> Result<f64> {
    calibrate_sigma_with_max(q, steps, eps_target, delta, SIGMA_MAX)
}

pub fn calibrate_sigma_with_max(q: f64, steps: u64, eps_target: f64, delta: f64, sigma_max: f64) -> Result<f64> {
    if !(eps_target > 0.0) {
        return Err(Error::Privacy(format!("target epsilon {eps_target} must be > 0")));
    }
    if steps == 0 {
        return Err(Error::Privacy("calibration needs at least one step".into()));
    }
    let curve = |sigma: f64| RdpCurve::subsampled_gaussian(q, sigma, &integer_orders());
    let eps_at = |sigma: f64| -> Result<f64> { Ok(rdp_to_eps_delta(&compose(&curve(sigma)?, steps), delta)?.epsilon) };
    if eps_at(sigma_max)? > eps_target {
        return Err(Error::Privacy(format!(
            "no noise multiplier up to {sigma_max} reaches epsilon {eps_target} in {steps} steps"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, sigma_max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        // A zero or tiny sigma can make every order infinite; treat as a miss.
        match eps_at(mid) {
            Ok(e) if e <= eps_target => hi = mid,
            _ => lo = mid,
        }
        if hi - lo <= 1e-9 * hi {
            break;
        }
    }
    debug_assert!(eps_at(hi)? <= eps_target);
    Ok(hi)
}

/// Running step count for one DP-SGD configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Accountant {
    q: f64,
    sigma: f64,
    delta: f64,
    steps: u64,
    curve: Option<RdpCurve>,
}

impl Accountant {
    pub fn new(q: f64, sigma: f64, delta: f64) -> Result<Self> {
        let curve = if sigma > 0.0 {
            Some(RdpCurve::subsampled_gaussian(q, sigma, &integer_orders())?)
        } else {
            rdp_subsampled_gaussian(q, sigma, 2)?;
            None
        };
        Ok(Accountant {
            q,
            sigma,
            delta,
            steps: 0,
            curve,
        })
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn sample_rate(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn tick(&mut self) {
        self.steps += 1;
    }

    /// Spend after `steps` steps; infinite epsilon when sigma is zero.
    pub fn spend_after(&self, steps: u64) -> Result<PrivacySpend> {
        match &self.curve {
            _ if steps == 0 => Ok(PrivacySpend {
                epsilon: 0.0,
                delta: self.delta,
                order: f64::INFINITY,
            }),
            Some(c) => rdp_to_eps_delta(&compose(c, steps), self.delta),
            None => Ok(PrivacySpend {
                epsilon: f64::INFINITY,
                delta: self.delta,
                order: f64::INFINITY,
            }),
        }
    }

    pub fn spend(&self) -> Result<PrivacySpend> {
        self.spend_after(self.steps)
    }
}
