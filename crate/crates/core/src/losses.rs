//! Loss and regularization mathematics: binary cross-entropy, squared L2
//! distance, Gaussian KL divergence (closed form and by quadrature) and the
//! `base + kl_weight · kl` composition used for single-agent training.

use crate::math::softplus;
use crate::tape::BCE_EPS;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("prediction and target lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("target {0} is not 0 or 1")]
    Target(f64),
    #[error("standard deviations must be positive (got {0}, {1})")]
    Sigma(f64, f64),
    #[error("degenerate quadrature grid: {0}")]
    Grid(&'static str),
    #[error("kl_weight must be non-negative, got {0}")]
    KlWeight(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseLoss {
    Bce,
    Mse,
}

/// How the prior KL is reduced over parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlReduction {
    /// Elementwise sum over every Bayesian parameter.
    #[default]
    Sum,
    /// Sum divided by the number of Bayesian parameters.
    Mean,
}

/// Weighting of the KL term against the base loss, and the Gaussian prior
/// the KL is measured against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kl_weight: f64,
    pub base_loss: BaseLoss,
    pub prior_mu: f64,
    /// Pre-softplus spread of the prior; `softplus(prior_rho)` is its σ.
    pub prior_rho: f64,
    pub kl_reduction: KlReduction,
}

impl Default for LossConfig {
    /// Standard normal prior, BCE base loss, `kl_weight = 5e-3`, summed KL.
    fn default() -> Self {
        Self {
            kl_weight: 5e-3,
            base_loss: BaseLoss::Bce,
            prior_mu: 0.0,
            prior_rho: crate::math::softplus_inv(1.0),
            kl_reduction: KlReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn prior_sigma(&self) -> f64 {
        softplus(self.prior_rho)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.kl_weight >= 0.0) {
            return Err(LossError::KlWeight(self.kl_weight));
        }
        let s = self.prior_sigma();
        if !(s > 0.0) {
            return Err(LossError::Sigma(s, s));
        }
        Ok(())
    }
}

pub(crate) fn bce_value(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p))
        })
        .sum::<f64>()
        / n
}

/// Mean binary cross-entropy; predictions are clamped `1e-7` away from 0 and 1.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::Length(pred.len(), target.len()));
    }
    if let Some(&t) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(LossError::Target(t));
    }
    Ok(bce_value(pred, target))
}

/// `KL(N(mu0, sigma0²) ‖ N(mu1, sigma1²))` in closed form.
pub fn kl_gaussian(mu0: f64, sigma0: f64, mu1: f64, sigma1: f64) -> Result<f64, LossError> {
    if !(sigma0 > 0.0 && sigma1 > 0.0) {
        return Err(LossError::Sigma(sigma0, sigma1));
    }
    let v0 = sigma0 * sigma0;
    let v1 = sigma1 * sigma1;
    let dm = mu0 - mu1;
    Ok(0.5 * (2.0 * libm::log(sigma1 / sigma0) + (v0 + dm * dm) / v1 - 1.0))
}

/// Elementwise closed-form KL summed over parameter vectors. `mu1`/`sigma1`
/// may have length one to broadcast a shared target distribution.
pub fn kl_gaussian_sum(
    mu0: &[f64],
    sigma0: &[f64],
    mu1: &[f64],
    sigma1: &[f64],
) -> Result<f64, LossError> {
    if mu0.len() != sigma0.len() {
        return Err(LossError::Length(mu0.len(), sigma0.len()));
    }
    for c in [mu1, sigma1] {
        if c.len() != 1 && c.len() != mu0.len() {
            return Err(LossError::Length(mu0.len(), c.len()));
        }
    }
    let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    let mut total = 0.0;
    for i in 0..mu0.len() {
        total += kl_gaussian(mu0[i], sigma0[i], pick(mu1, i), pick(sigma1, i))?;
    }
    Ok(total)
}

/// Integration domain and resolution for [`kl_numeric`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadGrid {
    pub lo: f64,
    pub hi: f64,
    /// Number of Simpson intervals; rounded up to an even count.
    pub intervals: usize,
}

impl QuadGrid {
    /// Grid spanning ten standard deviations either side of both means.
    pub fn covering(mu0: f64, sigma0: f64, mu1: f64, sigma1: f64, intervals: usize) -> Self {
        let lo = (mu0 - 10.0 * sigma0).min(mu1 - 10.0 * sigma1);
        let hi = (mu0 + 10.0 * sigma0).max(mu1 + 10.0 * sigma1);
        Self { lo, hi, intervals }
    }
}

fn normal_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - libm::log(sigma) - 0.5 * libm::log(2.0 * core::f64::consts::PI)
}

/// `∫ g(x) log(g(x)/h(x)) dx` by composite Simpson quadrature. The grid must
/// reach eight standard deviations either side of both means.
pub fn kl_numeric(
    mu0: f64,
    sigma0: f64,
    mu1: f64,
    sigma1: f64,
    grid: QuadGrid,
) -> Result<f64, LossError> {
    if !(sigma0 > 0.0 && sigma1 > 0.0) {
        return Err(LossError::Sigma(sigma0, sigma1));
    }
    if !(grid.hi > grid.lo) || !grid.lo.is_finite() || !grid.hi.is_finite() {
        return Err(LossError::Grid("empty or non-finite interval"));
    }
    if grid.intervals < 2 {
        return Err(LossError::Grid("fewer than two intervals"));
    }
    let covers = |mu: f64, s: f64| grid.lo <= mu - 8.0 * s && grid.hi >= mu + 8.0 * s;
    if !covers(mu0, sigma0) || !covers(mu1, sigma1) {
        return Err(LossError::Grid("grid narrower than 8 sigma around a mean"));
    }
    let n = grid.intervals + grid.intervals % 2;
    let h = (grid.hi - grid.lo) / n as f64;
    let f = |x: f64| {
        let lg = normal_log_pdf(x, mu0, sigma0);
        let lh = normal_log_pdf(x, mu1, sigma1);
        libm::exp(lg) * (lg - lh)
    };
    let mut acc = f(grid.lo) + f(grid.hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(grid.lo + i as f64 * h);
    }
    Ok(acc * h / 3.0)
}

/// `base + kl_weight · kl`.
pub fn total_loss(base: f64, kl: f64, cfg: &LossConfig) -> f64 {
    base + cfg.kl_weight * kl
}

pub(crate) fn l2_value(params: &[f64], target: &[f64]) -> f64 {
    params
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// `‖params − target‖²`.
pub fn l2_reg(params: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if params.len() != target.len() {
        return Err(LossError::Length(params.len(), target.len()));
    }
    Ok(l2_value(params, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use std::vec::Vec;

    #[test]
    fn bce_reference_values() {
        let v = bce_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!(v < 1e-6);
        assert_eq!(bce_loss(&[0.5], &[2.0]), Err(LossError::Target(2.0)));
        assert_eq!(bce_loss(&[0.5], &[]), Err(LossError::Length(1, 0)));
    }

    #[test]
    fn bce_matches_per_element_recomputation() {
        let s = SeedStream::new(5);
        let p = s.derive("p").uniforms(64, 0.01, 0.99);
        let t: Vec<f64> = s
            .derive("t")
            .uniforms(64, 0.0, 1.0)
            .into_iter()
            .map(|u| if u < 0.5 { 0.0 } else { 1.0 })
            .collect();
        let mut naive = 0.0;
        for i in 0..p.len() {
            naive += if t[i] == 1.0 { -libm::log(p[i]) } else { -libm::log(1.0 - p[i]) };
        }
        naive /= p.len() as f64;
        assert!((bce_loss(&p, &t).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form_reference_values() {
        assert_eq!(kl_gaussian(0.3, 1.7, 0.3, 1.7).unwrap(), 0.0);
        assert!((kl_gaussian(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let expected = 0.5 * (libm::log(0.25) + 4.0 - 1.0);
        assert!((kl_gaussian(0.0, 2.0, 0.0, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.80685).abs() < 1e-5);
        assert!(kl_gaussian(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(kl_gaussian(0.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn kl_numeric_reference_and_errors() {
        let g = QuadGrid::covering(0.0, 1.0, 0.0, 1.0, 4000);
        assert!(kl_numeric(0.0, 1.0, 0.0, 1.0, g).unwrap().abs() < 1e-9);
        let g = QuadGrid::covering(1.0, 1.0, 0.0, 1.0, 4000);
        assert!((kl_numeric(1.0, 1.0, 0.0, 1.0, g).unwrap() - 0.5).abs() < 1e-6);
        let g = QuadGrid::covering(0.0, 2.0, 0.0, 1.0, 4000);
        assert!((kl_numeric(0.0, 2.0, 0.0, 1.0, g).unwrap() - 0.806853).abs() < 1e-6);
        let narrow = QuadGrid { lo: -1.0, hi: 1.0, intervals: 100 };
        assert!(matches!(kl_numeric(0.0, 1.0, 0.0, 1.0, narrow), Err(LossError::Grid(_))));
        let empty = QuadGrid { lo: 1.0, hi: 1.0, intervals: 100 };
        assert!(kl_numeric(0.0, 1.0, 0.0, 1.0, empty).is_err());
    }

    #[test]
    fn kl_is_asymmetric() {
        let ab = kl_gaussian(0.0, 1.0, 1.0, 2.0).unwrap();
        let ba = kl_gaussian(1.0, 2.0, 0.0, 1.0).unwrap();
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn total_loss_composition() {
        let mut cfg = LossConfig { kl_weight: 0.0, ..LossConfig::default() };
        assert_eq!(total_loss(1.25, 99.0, &cfg), 1.25);
        cfg.kl_weight = 5e-3;
        assert!((total_loss(1.0, 2.0, &cfg) - 1.01).abs() < 1e-15);
        assert!((LossConfig::default().prior_sigma() - 1.0).abs() < 1e-12);
        cfg.kl_weight = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn l2_reference_values() {
        assert_eq!(l2_reg(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_reg(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(l2_reg(&[1.0], &[1.0, 2.0]).is_err());
        let s = SeedStream::new(8);
        let a = s.index(0).normals(50);
        let b = s.index(1).normals(50);
        let mut naive = 0.0;
        for i in 0..50 {
            let d = a[i] - b[i];
            naive += d * d;
        }
        assert!((l2_reg(&a, &b).unwrap() - naive).abs() < 1e-12);
    }
}
