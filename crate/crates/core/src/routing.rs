//! Routing signals computed from the lite pathway's predictive distribution,
//! and the gate that decides whether a sample escalates to the heavy encoder.
//!
//! Gate comparisons:
//!
//! * score mode: `R > tau_r  ||  R_tab >= tau_risk`
//! * trigger mode: `H~ > tau_h  ||  A > tau_delta  ||  R_tab >= tau_risk`
//!
//! Trigger mode tests the ambiguity `A = 1 - |delta|` rather than the raw gap.
//! A rule written on the gap maps onto it through `A > tau  <=>  |delta| < 1 - tau`.

use crate::model::{ClassTaxonomy, GateMode, PredictiveDistribution, RouteDecision, RoutingConfig, Sample, TriggerSet};
use crate::risk::{self, RiskModel};

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &PredictiveDistribution) -> f64 {
    let h: f64 = p.probs().iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.max(0.0)
}

/// Entropy divided by `ln C`, clamped into `[0, 1]`.
pub fn norm_entropy(p: &PredictiveDistribution) -> f64 {
    let c = p.n_classes();
    if c < 2 {
        return 0.0;
    }
    (entropy(p) / (c as f64).ln()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeDangerGap {
    pub p_safe: f64,
    pub p_danger: f64,
    pub delta: f64,
}

pub fn safe_danger_gap(p: &PredictiveDistribution, t: &ClassTaxonomy) -> SafeDangerGap {
    let probs = p.probs();
    let p_safe: f64 = t.safe_set.iter().map(|&i| probs[i]).sum();
    let p_danger: f64 = t.danger_set.iter().map(|&i| probs[i]).sum();
    SafeDangerGap { p_safe, p_danger, delta: (p_safe - p_danger).clamp(-1.0, 1.0) }
}

pub fn ambiguity(delta: f64) -> f64 {
    (1.0 - delta.abs()).clamp(0.0, 1.0)
}

pub fn routing_score(norm_entropy: f64, ambiguity: f64, cfg: &RoutingConfig) -> f64 {
    cfg.lambda_h * norm_entropy + cfg.lambda_delta * ambiguity
}

/// Inputs to the gate for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signals {
    pub norm_entropy: f64,
    pub ambiguity: f64,
    pub score: f64,
    pub tab_risk: f64,
}

/// Applies the configured gate. Returns the gate bit and every clause that fired.
pub fn gate(signals: &Signals, cfg: &RoutingConfig) -> (bool, TriggerSet) {
    let mut reason =
        TriggerSet { risk_override: risk::risk_override(signals.tab_risk, cfg.tau_risk), ..Default::default() };
    match cfg.gate_mode {
        GateMode::Score => reason.score = signals.score > cfg.tau_r,
        GateMode::Trigger => {
            reason.entropy = signals.norm_entropy > cfg.tau_h;
            reason.ambiguity = signals.ambiguity > cfg.tau_delta;
        }
    }
    (!reason.is_empty(), reason)
}

/// Computes every signal for one sample and applies the gate.
pub fn route_sample(
    sample: &Sample,
    p_lite: &PredictiveDistribution,
    taxonomy: &ClassTaxonomy,
    risk_model: &RiskModel,
    cfg: &RoutingConfig,
) -> RouteDecision {
    let risk = risk::tab_risk_detail(sample, risk_model);
    let h = entropy(p_lite);
    let h_norm = norm_entropy(p_lite);
    let gap = safe_danger_gap(p_lite, taxonomy);
    let amb = ambiguity(gap.delta);
    let score = routing_score(h_norm, amb, cfg);
    let signals = Signals { norm_entropy: h_norm, ambiguity: amb, score, tab_risk: risk.risk };
    let (g, reason) = gate(&signals, cfg);
    RouteDecision {
        sample_id: sample.id.clone(),
        gate: g,
        entropy: h,
        norm_entropy: h_norm,
        delta: gap.delta,
        ambiguity: amb,
        score: (cfg.gate_mode == GateMode::Score).then_some(score),
        tab_risk: risk.risk,
        trigger_reason: reason,
        age_fallback: risk.age_fallback,
        loc_fallback: risk.loc_fallback,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn dist(v: &[f64]) -> PredictiveDistribution {
        PredictiveDistribution::validate(v, v.len()).unwrap()
    }

    fn trigger_cfg() -> RoutingConfig {
        RoutingConfig { tau_h: 0.7, tau_delta: 0.7, tau_risk: 0.7, ..Default::default() }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&dist(&[0.0, 1.0, 0.0])), 0.0);
        let u = PredictiveDistribution::uniform(7);
        assert!((entropy(&u) - 7f64.ln()).abs() < 1e-12);
        assert!((entropy(&u) - 1.945910).abs() < 1e-6);
        // -(0.5 ln 0.5 + 0.3 ln 0.3 + 0.2 ln 0.2), summed independently.
        let expected = 0.5 * 2f64.ln() + 0.3 * (1.0f64 / 0.3).ln() + 0.2 * 5f64.ln();
        assert!((entropy(&dist(&[0.5, 0.3, 0.2])) - expected).abs() < 1e-12);
        assert!((expected - 1.029653).abs() < 1e-6);
    }

    #[test]
    fn norm_entropy_examples() {
        assert!((norm_entropy(&PredictiveDistribution::uniform(5)) - 1.0).abs() < 1e-12);
        assert_eq!(norm_entropy(&dist(&[1.0, 0.0])), 0.0);
        assert_eq!(norm_entropy(&dist(&[0.5, 0.5])), 1.0);
    }

    #[test]
    fn gap_examples() {
        let t = ClassTaxonomy::new(vec!["a".into(), "b".into(), "c".into()], [0, 1].into(), [2].into(), [2].into())
            .unwrap();
        let g = safe_danger_gap(&dist(&[1.0, 0.0, 0.0]), &t);
        assert_eq!((g.p_safe, g.p_danger, g.delta), (1.0, 0.0, 1.0));
        let g = safe_danger_gap(&dist(&[0.25, 0.25, 0.5]), &t);
        assert_eq!(g.delta, 0.0);
        let g = safe_danger_gap(&dist(&[0.6, 0.1, 0.3]), &t);
        assert!((g.p_safe - 0.7).abs() < 1e-12);
        assert!((g.p_danger - 0.3).abs() < 1e-12);
        assert!((g.delta - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ambiguity_examples() {
        assert_eq!(ambiguity(1.0), 0.0);
        assert_eq!(ambiguity(0.0), 1.0);
        assert!((ambiguity(0.4) - 0.6).abs() < 1e-15);
        assert!((ambiguity(-0.4) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        let cfg = RoutingConfig { lambda_h: 0.5, lambda_delta: 0.5, ..Default::default() };
        assert!((routing_score(0.8, 0.6, &cfg) - 0.7).abs() < 1e-15);
        let cfg = RoutingConfig { lambda_h: 1.0, lambda_delta: 0.0, ..Default::default() };
        assert_eq!(routing_score(0.37, 0.9, &cfg), 0.37);
        assert_eq!(routing_score(0.0, 0.0, &cfg), 0.0);
    }

    #[test]
    fn gate_single_clause() {
        let s = Signals { norm_entropy: 0.9, ambiguity: 0.1, score: 0.0, tab_risk: 0.1 };
        let (g, r) = gate(&s, &trigger_cfg());
        assert!(g);
        assert_eq!(r, TriggerSet { entropy: true, ..Default::default() });
    }

    #[test]
    fn gate_boundaries_are_strict_except_risk() {
        let cfg = trigger_cfg();
        let s = Signals { norm_entropy: 0.7, ambiguity: 0.7, score: 0.0, tab_risk: 0.6999 };
        assert_eq!(gate(&s, &cfg), (false, TriggerSet::default()));
        let s = Signals { tab_risk: 0.7, ..s };
        let (g, r) = gate(&s, &cfg);
        assert!(g && r.risk_override && !r.entropy && !r.ambiguity);
    }

    #[test]
    fn gate_score_mode() {
        let cfg = RoutingConfig { gate_mode: GateMode::Score, tau_r: 0.65, tau_risk: 2.0, ..Default::default() };
        let s = Signals { norm_entropy: 0.0, ambiguity: 0.0, score: 0.7, tab_risk: 0.0 };
        assert_eq!(gate(&s, &cfg), (true, TriggerSet { score: true, ..Default::default() }));
        let s = Signals { score: 0.65, ..s };
        assert!(!gate(&s, &cfg).0);
    }

    fn risk_model() -> RiskModel {
        RiskModel {
            a_min: 20.0,
            a_max: 80.0,
            mal_rate: BTreeMap::from([("face".to_string(), 0.5), ("back".to_string(), 0.2)]),
            max_rate: 0.5,
            fallback_rate: 0.3,
            fallback_age_score: 0.5,
        }
    }

    fn sample(age: f64, loc: &str) -> Sample {
        Sample { id: "s1".into(), label: 0, age: Some(age), localisation: Some(loc.into()), subgroup: None, fold: None }
    }

    #[test]
    fn route_sample_cases() {
        let t = ClassTaxonomy::binary();
        let m = risk_model();
        let cfg = trigger_cfg();
        let confident = dist(&[1.0, 0.0]);

        let d = route_sample(&sample(30.0, "back"), &confident, &t, &m, &cfg);
        assert!(!d.gate);
        assert!(d.trigger_reason.is_empty());
        assert_eq!(d.score, None);

        let d = route_sample(&sample(80.0, "face"), &confident, &t, &m, &cfg);
        assert!(d.gate);
        assert_eq!(d.trigger_reason, TriggerSet { risk_override: true, ..Default::default() });

        let d = route_sample(&sample(30.0, "back"), &dist(&[0.5, 0.5]), &t, &m, &cfg);
        assert!(d.gate && d.trigger_reason.entropy);
        assert_eq!(d.norm_entropy, 1.0);

        let score_cfg = RoutingConfig { gate_mode: GateMode::Score, ..cfg };
        let d = route_sample(&sample(30.0, "back"), &confident, &t, &m, &score_cfg);
        assert_eq!(d.score, Some(0.0));
    }

    #[test]
    fn pure_entropy_reduction_in_score_mode() {
        let cfg = RoutingConfig {
            gate_mode: GateMode::Score,
            lambda_h: 0.8,
            lambda_delta: 0.0,
            tau_r: 0.4,
            tau_risk: 1.5,
            ..Default::default()
        };
        for h in [0.0, 0.3, 0.5, 0.50001, 0.9, 1.0] {
            let s = Signals { norm_entropy: h, ambiguity: 0.9, score: routing_score(h, 0.9, &cfg), tab_risk: 1.0 };
            assert_eq!(gate(&s, &cfg).0, 0.8 * h > 0.4, "h={h}");
        }
    }
}
