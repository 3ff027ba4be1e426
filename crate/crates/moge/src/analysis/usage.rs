//! Token-to-expert assignment statistics.

use crate::router::RoutingDecision;

#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats {
    pub counts: Vec<usize>,
    /// Shannon entropy of the assignment histogram divided by `ln n`.
    pub normalized_entropy: f64,
}

impl UsageStats {
    pub fn active(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Histogram over every selected slot of every decision.
pub fn expert_usage_stats(decisions: &[RoutingDecision], n_experts: usize) -> UsageStats {
    let mut counts = vec![0usize; n_experts];
    for d in decisions {
        for &i in &d.indices {
            counts[i] += 1;
        }
    }
    UsageStats { normalized_entropy: normalized_entropy(&counts), counts }
}

pub fn normalized_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    if h <= 0.0 {
        return 0.0;
    }
    h / (counts.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{route_logits, RouterConfig, RoutingMode};

    fn decisions_for(winners: &[usize], n: usize) -> Vec<RoutingDecision> {
        let cfg = RouterConfig::new(n, 1, RoutingMode::SoftmaxFirst).unwrap();
        winners
            .iter()
            .map(|&w| {
                let mut logits = vec![0.0; n];
                logits[w] = 5.0;
                route_logits(&cfg, &logits)
            })
            .collect()
    }

    #[test]
    fn collapsed_is_zero() {
        let s = expert_usage_stats(&decisions_for(&[2; 10], 4), 4);
        assert_eq!(s.counts, vec![0, 0, 10, 0]);
        assert_eq!(s.normalized_entropy.to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn uniform_is_one() {
        let s = expert_usage_stats(&decisions_for(&[0, 1, 2, 3, 0, 1, 2, 3], 4), 4);
        assert!((s.normalized_entropy - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_one_one() {
        let s = expert_usage_stats(&decisions_for(&[0, 1, 0, 2], 3), 3);
        assert_eq!(s.counts, vec![2, 1, 1]);
        let h = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((s.normalized_entropy - h / 3f64.ln()).abs() < 1e-15);
        assert_eq!(s.active(), 3);
    }
}
