//! Learning rates, compound weights and confidence bonuses.
//!
//! With `η_t = (H+1)/(H+t)` the product `Π_{t=t1}^{t2} (1 - η_t)` telescopes:
//! `(1 - η_t) = (t-1)/(t+H)`, so the product collapses to
//! `Π_{j=0}^{H} (t1-1+j)/(t2+j)`, which costs `O(H)` and cannot underflow
//! spuriously for long ranges.

use serde::{Deserialize, Serialize};

use crate::error::{FedqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub horizon: usize,
    /// `c` in `b_t = c * sqrt(H^3 ι / t)`.
    pub bonus_scale: f64,
    /// `ι`
    pub log_factor: f64,
}

impl RateParams {
    pub fn new(horizon: usize, bonus_scale: f64, log_factor: f64) -> Result<Self> {
        let p = RateParams {
            horizon,
            bonus_scale,
            log_factor,
        };
        p.validate()?;
        Ok(p)
    }

    /// Experiment defaults: `c = 2`, `ι = 1`.
    pub fn experiment_defaults(horizon: usize) -> Self {
        RateParams {
            horizon,
            bonus_scale: 2.0,
            log_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(FedqError::InvalidParameter("horizon must be positive".into()));
        }
        if !(self.bonus_scale > 0.0 && self.bonus_scale.is_finite()) {
            return Err(FedqError::InvalidParameter("bonus scale must be positive".into()));
        }
        if !(self.log_factor > 0.0 && self.log_factor.is_finite()) {
            return Err(FedqError::InvalidParameter("log factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernsteinParams {
    pub horizon: usize,
    /// `c'`
    pub bonus_scale: f64,
    pub log_factor: f64,
    pub num_agents: usize,
    pub num_states: usize,
    pub num_actions: usize,
}

impl BernsteinParams {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.num_agents == 0 || self.num_states == 0 || self.num_actions == 0 {
            return Err(FedqError::InvalidParameter(
                "horizon, agents, states and actions must be positive".into(),
            ));
        }
        if !(self.bonus_scale > 0.0 && self.bonus_scale.is_finite()) {
            return Err(FedqError::InvalidParameter("bonus scale must be positive".into()));
        }
        if !(self.log_factor > 0.0 && self.log_factor.is_finite()) {
            return Err(FedqError::InvalidParameter("log factor must be positive".into()));
        }
        Ok(())
    }
}

/// `η_t = (H+1)/(H+t)` for `t >= 1`.
#[inline]
pub fn eta(t: u64, horizon: usize) -> f64 {
    debug_assert!(t >= 1);
    (horizon as f64 + 1.0) / (horizon as f64 + t as f64)
}

/// `η^c(t1, t2) = Π_{t=t1}^{t2} (1 - η_t)`; requires `1 <= t1 <= t2`.
pub fn eta_c(t1: u64, t2: u64, horizon: usize) -> Result<f64> {
    if t1 == 0 || t1 > t2 {
        return Err(FedqError::InvalidParameter(format!(
            "eta_c needs 1 <= t1 <= t2, got t1={t1}, t2={t2}"
        )));
    }
    Ok(eta_c_unchecked(t1, t2, horizon))
}

#[inline]
pub(crate) fn eta_c_unchecked(t1: u64, t2: u64, horizon: usize) -> f64 {
    let mut prod = 1.0;
    for j in 0..=horizon as u64 {
        prod *= (t1 - 1 + j) as f64 / (t2 + j) as f64;
    }
    prod
}

/// `η_i^t = η_i Π_{i'=i+1}^t (1 - η_{i'})`, with `η_0^0 = 1` and `η_0^t = 0`.
pub fn eta_weight(i: u64, t: u64, horizon: usize) -> Result<f64> {
    if i > t {
        return Err(FedqError::InvalidParameter(format!(
            "eta_weight needs i <= t, got i={i}, t={t}"
        )));
    }
    Ok(match (i, t) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ if i == t => eta(t, horizon),
        _ => eta(i, horizon) * eta_c_unchecked(i + 1, t, horizon),
    })
}

/// `b_t = c * sqrt(H^3 ι / t)`.
#[inline]
pub fn hoeffding_bonus(t: u64, p: &RateParams) -> f64 {
    let h = p.horizon as f64;
    p.bonus_scale * (h * h * h * p.log_factor / t as f64).sqrt()
}

/// `Σ_{t=t_prev+1}^{t_new} η_t^{t_new} b_t`, the batched bonus of one round.
pub fn hoeffding_round_bonus(t_prev: u64, t_new: u64, p: &RateParams) -> Result<f64> {
    if t_prev >= t_new {
        return Err(FedqError::InvalidParameter(format!(
            "round bonus needs t_prev < t_new, got {t_prev} >= {t_new}"
        )));
    }
    let mut tail = 1.0;
    let mut total = 0.0;
    for t in (t_prev + 1..=t_new).rev() {
        let e = eta(t, p.horizon);
        total += e * tail * hoeffding_bonus(t, p);
        tail *= 1.0 - e;
    }
    Ok(total)
}

/// Clamped Bernstein bound `β_t^B` for visit count `t` and variance estimate `w`.
pub fn bernstein_beta(t: u64, w: f64, p: &BernsteinParams) -> f64 {
    let t = t as f64;
    let h = p.horizon as f64;
    let sa = (p.num_states * p.num_actions) as f64;
    let m = p.num_agents as f64;
    let iota = p.log_factor;
    let variance_term = (h * iota / t * (w.max(0.0) + h)).sqrt()
        + iota * ((h.powi(7) * sa).sqrt() + (m * sa * h.powi(6)).sqrt()) / t;
    let hoeffding_term = (h * h * h * iota / t).sqrt();
    p.bonus_scale * variance_term.min(hoeffding_term)
}

/// Per-visit bonus `b_t` solving `β_t^B = 2 Σ_{i<=t} η_i^t b_i`.
pub fn bernstein_per_visit_bonus(t: u64, beta_t: f64, beta_prev: f64, horizon: usize) -> f64 {
    if t <= 1 {
        return beta_t / 2.0;
    }
    let e = eta(t, horizon);
    (beta_t - (1.0 - e) * beta_prev) / (2.0 * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct product definition, independent of the telescoped form.
    fn eta_weight_direct(i: u64, t: u64, h: usize) -> f64 {
        let mut w = eta(i, h);
        for j in i + 1..=t {
            w *= 1.0 - eta(j, h);
        }
        w
    }

    fn eta_c_direct(t1: u64, t2: u64, h: usize) -> f64 {
        (t1..=t2).map(|t| 1.0 - eta(t, h)).product()
    }

    #[test]
    fn eta_values() {
        assert_eq!(eta(1, 5), 1.0);
        assert_eq!(eta(2, 2), 0.75);
        assert_eq!(eta(100, 2), 3.0 / 102.0);
    }

    #[test]
    fn eta_weight_values() {
        assert_eq!(eta_weight(7, 7, 3).unwrap(), eta(7, 3));
        assert!((eta_weight(1, 2, 2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(eta_weight(0, 0, 2).unwrap(), 1.0);
        assert_eq!(eta_weight(0, 4, 2).unwrap(), 0.0);
        assert!(eta_weight(3, 2, 2).is_err());
    }

    #[test]
    fn eta_weights_sum_to_one() {
        for h in 1..=5 {
            for t in 1..=50u64 {
                let s: f64 = (1..=t).map(|i| eta_weight(i, t, h).unwrap()).sum();
                assert!((s - 1.0).abs() < 1e-12, "t={t} h={h} sum={s}");
            }
        }
    }

    #[test]
    fn eta_c_values() {
        assert_eq!(eta_c(1, 9, 2).unwrap(), 0.0);
        assert!((eta_c(2, 3, 1).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!(eta_c(5, 4, 2).is_err());
    }

    #[test]
    fn telescoped_forms_match_direct_products() {
        for h in 1..=5 {
            for t1 in 1..30u64 {
                for t2 in t1..40 {
                    let a = eta_c_unchecked(t1, t2, h);
                    let b = eta_c_direct(t1, t2, h);
                    assert!((a - b).abs() <= 1e-14 * b.max(1e-300) + 1e-300, "{t1} {t2} {h}");
                }
                for t in t1..40 {
                    let a = eta_weight(t1, t, h).unwrap();
                    let b = eta_weight_direct(t1, t, h);
                    assert!((a - b).abs() <= 1e-13 * b + 1e-300);
                }
            }
        }
    }

    #[test]
    fn round_weights_match_eta_c() {
        // Σ_{i=a}^{b} η_i^b = 1 - η^c(a, b)
        for h in 1..=4 {
            for a in 2..20u64 {
                for b in a..30 {
                    let s: f64 = (a..=b).map(|i| eta_weight(i, b, h).unwrap()).sum();
                    assert!((s - (1.0 - eta_c(a, b, h).unwrap())).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hoeffding_bonus_values() {
        let p = RateParams::experiment_defaults(1);
        assert_eq!(hoeffding_bonus(1, &p), 2.0);
        assert_eq!(hoeffding_bonus(4, &p), 1.0);
        assert_eq!(hoeffding_bonus(2, &RateParams::experiment_defaults(2)), 4.0);
    }

    #[test]
    fn round_bonus_single_term_and_base_case() {
        let p = RateParams::experiment_defaults(3);
        let single = hoeffding_round_bonus(6, 7, &p).unwrap();
        assert!((single - eta(7, 3) * hoeffding_bonus(7, &p)).abs() < 1e-15);
        let p1 = RateParams::experiment_defaults(1);
        assert_eq!(hoeffding_round_bonus(0, 1, &p1).unwrap(), 2.0);
        assert!(hoeffding_round_bonus(3, 3, &p).is_err());
    }

    #[test]
    fn round_bonus_matches_term_by_term_sum() {
        let p = RateParams::experiment_defaults(2);
        let oracle: f64 = (3..=5u64)
            .map(|t| eta_weight_direct(t, 5, 2) * 2.0 * (8.0 / t as f64).sqrt())
            .sum();
        let got = hoeffding_round_bonus(2, 5, &p).unwrap();
        assert!((got - oracle).abs() < 1e-14, "{got} vs {oracle}");
    }

    #[test]
    fn full_history_round_bonus() {
        let p = RateParams::experiment_defaults(3);
        for t in 1..60u64 {
            let oracle: f64 = (1..=t)
                .map(|i| eta_weight_direct(i, t, 3) * hoeffding_bonus(i, &p))
                .sum();
            assert!((hoeffding_round_bonus(0, t, &p).unwrap() - oracle).abs() < 1e-12);
        }
    }

    fn unit_bernstein() -> BernsteinParams {
        BernsteinParams {
            horizon: 1,
            bonus_scale: 2.0,
            log_factor: 1.0,
            num_agents: 1,
            num_states: 1,
            num_actions: 1,
        }
    }

    #[test]
    fn bernstein_beta_values() {
        assert_eq!(bernstein_beta(1, 0.0, &unit_bernstein()), 2.0);
        let p = BernsteinParams {
            horizon: 3,
            num_agents: 4,
            num_states: 2,
            num_actions: 2,
            ..unit_bernstein()
        };
        let cap = |t: u64| p.bonus_scale * (27.0 / t as f64).sqrt();
        assert_eq!(bernstein_beta(10, 1e9, &p), cap(10));
        // For very large t the variance branch wins the min.
        let t = 100_000_000;
        assert!(bernstein_beta(t, 0.0, &p) < cap(t));
    }

    #[test]
    fn per_visit_bonus_cases() {
        assert_eq!(bernstein_per_visit_bonus(1, 3.0, 0.0, 2), 1.5);
        for t in 1..20 {
            assert!((bernstein_per_visit_bonus(t, 0.8, 0.8, 3) - 0.4).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn bernstein_beta_never_exceeds_cap(
            t in 1u64..1_000_000,
            w in 0.0f64..100.0,
            h in 1usize..6,
            m in 1usize..10,
            s in 1usize..6,
            a in 1usize..6,
        ) {
            let p = BernsteinParams { horizon: h, bonus_scale: 2.0, log_factor: 1.0, num_agents: m, num_states: s, num_actions: a };
            let cap = 2.0 * ((h * h * h) as f64 / t as f64).sqrt();
            prop_assert!(bernstein_beta(t, w, &p) <= cap);
        }

        #[test]
        fn per_visit_bonus_reconstructs_beta(
            betas in proptest::collection::vec(0.0f64..10.0, 1..20),
            h in 1usize..6,
        ) {
            let b: Vec<f64> = betas.iter().enumerate().map(|(i, beta)| {
                let t = i as u64 + 1;
                let prev = if i == 0 { 0.0 } else { betas[i - 1] };
                bernstein_per_visit_bonus(t, *beta, prev, h)
            }).collect();
            for t in 1..=betas.len() as u64 {
                let recon: f64 = (1..=t).map(|i| 2.0 * eta_weight_direct(i, t, h) * b[i as usize - 1]).sum();
                prop_assert!((recon - betas[t as usize - 1]).abs() < 1e-10);
            }
        }
    }
}
