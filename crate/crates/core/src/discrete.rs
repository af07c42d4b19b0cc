//! Discrete relaxations, temperature annealing, priors, and closed-form loss
//! terms.
//!
//! Binary Concrete relaxes a Bernoulli draw: z = sigmoid((l + log u - log(1-u)) / tau).
//! Gumbel-Softmax relaxes a categorical draw: z = softmax((l + G) / tau) with
//! G_k = -log(-log u_k). Both converge to step / argmax as tau -> 0, which is
//! what the determinize_* functions compute directly.
//!
//! Everything here is pure f64 math; callers own the RNG streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Exponential temperature schedule, clamped at `anneal_epochs`:
/// tau(t) = tau_max * (tau_min/tau_max)^(min(t, T)/T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau_max: f64,
    pub tau_min: f64,
    pub anneal_epochs: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { tau_max: 5.0, tau_min: 0.5, anneal_epochs: 1000 }
    }
}

impl AnnealSchedule {
    /// Temperature at a given epoch. Non-increasing; constant `tau_min`
    /// from `anneal_epochs` on.
    pub fn tau(&self, epoch: usize) -> f64 {
        assert!(
            self.tau_max >= self.tau_min && self.tau_min > 0.0,
            "schedule requires tau_max >= tau_min > 0, got {} < {}",
            self.tau_max,
            self.tau_min
        );
        let t = epoch.min(self.anneal_epochs) as f64 / self.anneal_epochs as f64;
        self.tau_max * (self.tau_min / self.tau_max).powf(t)
    }
}

/// Latent-space hyperparameters shared by every model.
///
/// `f_bits` is the number of propositional bits, `actions` the maximum number
/// of action labels, `classes` the Gumbel-Softmax arity (equal to `actions`
/// everywhere in this pipeline). `epsilon` parameterizes the Bern(epsilon)
/// latent prior; values below 0.5 penalize unnecessary true bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub f_bits: usize,
    pub actions: usize,
    pub classes: usize,
    pub epsilon: f64,
    pub sigma_rec: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl LatentConfig {
    pub fn new(f_bits: usize, actions: usize) -> Self {
        assert!(f_bits > 0 && actions > 0, "latent sizes must be positive");
        LatentConfig {
            f_bits,
            actions,
            classes: actions,
            epsilon: 0.1,
            sigma_rec: 0.1,
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.f_bits == 0 || self.actions == 0 || self.classes == 0 {
            return Err("latent sizes must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(format!("epsilon must lie in (0, 0.5], got {}", self.epsilon));
        }
        if self.sigma_rec <= 0.0 {
            return Err("sigma_rec must be positive".into());
        }
        if self.beta1 < 1.0 || self.beta2 < 1.0 || self.beta3 < 1.0 {
            return Err("beta weights must be >= 1".into());
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

fn clamp_unit(u: f64) -> f64 {
    u.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Logistic noise: log u - log(1-u), u ~ Uniform(0,1) clamped away from the
/// endpoints so the sample stays finite.
pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = clamp_unit(rng.gen::<f64>());
    u.ln() - (1.0 - u).ln()
}

/// Gumbel(0,1) noise: -log(-log u).
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = clamp_unit(rng.gen::<f64>());
    -(-u.ln()).ln()
}

/// One relaxed Bernoulli sample in (0,1).
pub fn binary_concrete_sample<R: Rng + ?Sized>(logit: f64, tau: f64, rng: &mut R) -> f64 {
    assert!(tau > 0.0, "temperature must be positive, got {tau}");
    sigmoid((logit + logistic_noise(rng)) / tau)
}

/// One relaxed categorical sample; sums to 1, all entries positive.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive, got {tau}");
    let noisy: Vec<f64> = logits.iter().map(|&l| (l + gumbel_noise(rng)) / tau).collect();
    softmax(&noisy)
}

/// Test-time Bernoulli determinization: step(logit), with the tie at exactly
/// zero resolved to 1.
pub fn determinize_bc(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Test-time categorical determinization: index of the maximum logit, ties to
/// the lowest index.
pub fn determinize_gs(logits: &[f64]) -> usize {
    assert!(!logits.is_empty(), "cannot determinize an empty logit vector");
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    best
}

/// One-hot encoding of a class index.
pub fn one_hot(index: usize, classes: usize) -> Vec<f64> {
    assert!(index < classes, "one-hot index {index} out of range {classes}");
    let mut v = vec![0.0; classes];
    v[index] = 1.0;
    v
}

/// KL(Bern(q) || Bern(eps)) = q log(q/eps) + (1-q) log((1-q)/(1-eps)).
///
/// Equals -H(q) + alpha*q - log(1-eps) with alpha = log(1-eps) - log(eps);
/// for eps < 0.5 the linear term penalizes q near 1.
pub fn kl_bernoulli(q: f64, eps: f64) -> f64 {
    assert!(eps > 0.0 && eps < 1.0, "prior parameter must lie in (0,1), got {eps}");
    let q = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
    q * (q / eps).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - eps)).ln()
}

/// KL(Cat(q) || Cat(1/C)) computed in the discrete limit: sum q_k log q_k + log C,
/// with 0 log 0 = 0.
pub fn kl_categorical_uniform(q: &[f64]) -> f64 {
    let c = q.len();
    assert!(c > 0, "empty probability vector");
    let entropy_neg: f64 =
        q.iter().map(|&p| if p > PROB_EPS { p * p.ln() } else { 0.0 }).sum();
    entropy_neg + (c as f64).ln()
}

/// KL(Cat(q) || Cat(p)); p is clamped away from zero.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> f64 {
    assert_eq!(q.len(), p.len(), "class counts differ");
    q.iter()
        .zip(p)
        .map(|(&qk, &pk)| {
            if qk > PROB_EPS {
                qk * (qk / pk.max(PROB_EPS)).ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Sum over bits of KL(Bern(q_f) || Bern(p_f)); both sides clamped.
pub fn kl_bernoulli_pair(q: &[f64], p: &[f64]) -> f64 {
    assert_eq!(q.len(), p.len(), "bit widths differ");
    q.iter()
        .zip(p)
        .map(|(&qf, &pf)| kl_bernoulli(qf, pf.clamp(PROB_EPS, 1.0 - PROB_EPS)))
        .sum()
}

/// Gaussian negative log likelihood sum_d (x_d - xhat_d)^2 / (2 sigma^2).
///
/// The additive constant D log sqrt(2 pi sigma^2) is only included on request;
/// reported losses leave it out.
pub fn gaussian_nll(x: &[f64], xhat: &[f64], sigma: f64, include_constant: bool) -> f64 {
    assert_eq!(x.len(), xhat.len(), "shapes differ");
    assert!(sigma > 0.0, "sigma must be positive");
    let ss: f64 = x.iter().zip(xhat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let mut nll = ss / (2.0 * sigma * sigma);
    if include_constant {
        nll += x.len() as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).sqrt().ln();
    }
    nll
}
