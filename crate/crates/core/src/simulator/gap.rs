//! Monte-Carlo comparison of the realised conversion rate with the
//! single-session chain-rule estimate.

use serde::{Deserialize, Serialize};

use super::{Event, EventKind, Simulator, SimulatorConfig};
use crate::Result;

/// Below this many positive events a conditional is flagged as unstable.
pub const MIN_POSITIVES: u64 = 30;

/// Raw event counts behind a [`GapReport`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapCounts {
    pub exposures: u64,
    pub clicks: u64,
    pub carts: u64,
    /// Purchases realised in the session of their cart.
    pub same_session_purchases: u64,
    /// Purchases realised in a later session than their cart.
    pub deferred_purchases: u64,
}

impl GapCounts {
    pub fn purchases(&self) -> u64 {
        self.same_session_purchases + self.deferred_purchases
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Purchases realised in a session over its exposures, deferred ones included.
    pub ground_truth_e_r: f64,
    /// `P(click | exposure) · P(cart | click) · P(purchase | cart)`, all
    /// measured within the session.
    pub chain_rule_e_r: f64,
    pub gap: f64,
    /// `P(purchase | cart) · P(cart | click)` with purchases pooled across
    /// sessions: the purchase rate given a cart times the cart rate given a
    /// click in the cart's own exposure space.
    pub upper_bound: f64,
    pub monte_carlo_stderr: f64,
    pub n_samples: u64,
    pub counts: GapCounts,
    pub warnings: Vec<String>,
}

impl GapReport {
    pub fn within_noise(&self, sigmas: f64) -> bool {
        self.gap.abs() <= sigmas * self.monte_carlo_stderr
    }

    pub fn respects_upper_bound(&self, sigmas: f64) -> bool {
        self.gap.abs() <= self.upper_bound + sigmas * self.monte_carlo_stderr
    }

    /// Builds the report from raw counts.
    pub fn from_counts(counts: GapCounts) -> Self {
        let n = counts.exposures;
        let mut warnings = Vec::new();
        // (successes, trials) of the three chain factors and the ground truth
        let factors = [
            ("click|exposure", counts.clicks, n),
            ("cart|click", counts.carts, counts.clicks),
            ("purchase|cart", counts.same_session_purchases, counts.carts),
        ];
        let chain: f64 = factors.iter().map(|&(_, x, t)| ratio(x, t)).product();
        let truth = ratio(counts.purchases(), n);

        // Delta method on log(chain): Var ≈ Σ (1 - p_i) / (t_i p_i). Scarce
        // factors use the add-two estimate (x + 2) / (t + 4), which widens the error.
        let mut scarce = false;
        let mut rel_var = 0.0;
        for &(name, x, t) in &factors {
            if x < MIN_POSITIVES {
                scarce = true;
                warnings.push(format!(
                    "only {x} positive events for {name}; standard error widened"
                ));
            }
            let p = if x < MIN_POSITIVES { (x as f64 + 2.0) / (t as f64 + 4.0) } else { x as f64 / t as f64 };
            rel_var += (1.0 - p) / ((t as f64).max(1.0) * p);
        }
        let chain_level = if scarce { chain.max(adjusted(counts.same_session_purchases, n)) } else { chain };
        let se_chain = chain_level * rel_var.sqrt();

        let p_truth = if counts.purchases() < MIN_POSITIVES {
            if !scarce {
                warnings.push(format!(
                    "only {} purchases; standard error widened",
                    counts.purchases()
                ));
            }
            adjusted(counts.purchases(), n)
        } else {
            truth
        };
        let se_truth = (p_truth * (1.0 - p_truth) / (n as f64).max(1.0)).sqrt();

        Self {
            ground_truth_e_r: truth,
            chain_rule_e_r: chain,
            gap: truth - chain,
            upper_bound: ratio(counts.purchases(), counts.carts) * ratio(counts.carts, counts.clicks),
            monte_carlo_stderr: (se_truth * se_truth + se_chain * se_chain).sqrt(),
            n_samples: n,
            counts,
            warnings,
        }
    }
}

fn ratio(x: u64, t: u64) -> f64 {
    if t == 0 {
        0.0
    } else {
        x as f64 / t as f64
    }
}

fn adjusted(x: u64, t: u64) -> f64 {
    (x as f64 + 2.0) / (t as f64 + 4.0)
}

/// Streams exposures of `config` (with `seed`) until at least `n_samples`
/// exposures are generated and compares the realised and chain-rule rates.
/// The number of users is raised or lowered to cover `n_samples` exactly in
/// whole users.
pub fn gap_oracle(config: &SimulatorConfig, n_samples: u64, seed: u64) -> Result<GapReport> {
    let per_user = (config.n_sessions_per_user * config.exposures_per_session) as u64;
    let mut cfg = config.clone();
    cfg.seed = seed;
    if per_user > 0 {
        cfg.n_users = n_samples.div_ceil(per_user).max(1) as usize;
    }
    let sim = Simulator::new(cfg)?;
    let mut counts = GapCounts::default();
    let mut last_cart: Option<(u32, u32, u32)> = None;
    sim.generate(|e: &Event| match e.kind {
        EventKind::Exposure => counts.exposures += 1,
        EventKind::Click => counts.clicks += 1,
        EventKind::Cart => {
            counts.carts += 1;
            last_cart = Some((e.user, e.item, e.session));
        }
        EventKind::Purchase => {
            if last_cart == Some((e.user, e.item, e.session)) {
                counts.same_session_purchases += 1;
            } else {
                counts.deferred_purchases += 1;
            }
        }
    });
    Ok(GapReport::from_counts(counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_without_deferral_have_zero_gap() {
        let r = GapReport::from_counts(GapCounts {
            exposures: 100_000,
            clicks: 6_000,
            carts: 800,
            same_session_purchases: 640,
            deferred_purchases: 0,
        });
        assert!(r.gap.abs() < 1e-15);
        assert!((r.ground_truth_e_r - 0.0064).abs() < 1e-15);
        assert!(r.warnings.is_empty());
        assert!(r.monte_carlo_stderr > 0.0);
    }

    #[test]
    fn deferred_purchases_open_a_gap() {
        let r = GapReport::from_counts(GapCounts {
            exposures: 100_000,
            clicks: 6_000,
            carts: 800,
            same_session_purchases: 320,
            deferred_purchases: 320,
        });
        assert!((r.gap - 0.0032).abs() < 1e-12);
        assert!(r.respects_upper_bound(0.0));
        assert!(!r.within_noise(3.0));
    }

    #[test]
    fn scarce_positives_warn() {
        let r = GapReport::from_counts(GapCounts {
            exposures: 1000,
            clicks: 5,
            carts: 1,
            same_session_purchases: 1,
            deferred_purchases: 0,
        });
        assert!(!r.warnings.is_empty());
        assert!(r.monte_carlo_stderr.is_finite() && r.monte_carlo_stderr > 0.0);
    }

    #[test]
    fn empty_traffic_is_all_zero() {
        let r = GapReport::from_counts(GapCounts {
            exposures: 10_000,
            ..Default::default()
        });
        assert_eq!((r.ground_truth_e_r, r.chain_rule_e_r, r.gap), (0.0, 0.0, 0.0));
        assert!(r.monte_carlo_stderr.is_finite());
    }
}
