//! Routing overrides that enhance or inhibit designated experts.
//!
//! Enhanced experts are force-selected and collectively receive
//! `enhance_weight` of the gate mass; inhibited experts are removed from
//! candidacy. The number of active experts per layer never changes.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ceai::ExpertSelection;
use crate::error::{invalid, Error, Result};
use crate::moe::{rank_by_logit, softmax_into, ExpertId, GateVector, ModelConfig};

pub const DEFAULT_ENHANCE_WEIGHT: f64 = 0.8;
pub const ACTIVE_SPAN: &str = "first_generated_token_to_end";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPolicy {
    pub enhance: BTreeSet<ExpertId>,
    pub inhibit: BTreeSet<ExpertId>,
    pub enhance_weight: f64,
    #[serde(default = "default_span")]
    pub active_span: String,
}

fn default_span() -> String {
    ACTIVE_SPAN.to_string()
}

impl Default for SteeringPolicy {
    fn default() -> Self {
        Self {
            enhance: BTreeSet::new(),
            inhibit: BTreeSet::new(),
            enhance_weight: DEFAULT_ENHANCE_WEIGHT,
            active_span: default_span(),
        }
    }
}

impl SteeringPolicy {
    pub fn new(
        enhance: impl IntoIterator<Item = ExpertId>,
        inhibit: impl IntoIterator<Item = ExpertId>,
        enhance_weight: f64,
    ) -> Result<Self> {
        let policy = Self {
            enhance: enhance.into_iter().collect(),
            inhibit: inhibit.into_iter().collect(),
            enhance_weight,
            active_span: default_span(),
        };
        policy.check()?;
        Ok(policy)
    }

    pub fn is_empty(&self) -> bool {
        self.enhance.is_empty() && self.inhibit.is_empty()
    }

    fn check(&self) -> Result<()> {
        if !(self.enhance_weight > 0.0 && self.enhance_weight <= 1.0) {
            return Err(invalid(format!(
                "enhance_weight must lie in (0, 1], got {}",
                self.enhance_weight
            )));
        }
        if let Some(e) = self.enhance.intersection(&self.inhibit).next() {
            return Err(invalid(format!("expert {e} is both enhanced and inhibited")));
        }
        Ok(())
    }

    /// Checks index ranges and that every layer keeps enough candidates.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        self.check()?;
        for e in self.enhance.iter().chain(&self.inhibit) {
            if e.layer >= config.num_layers || e.index >= config.experts_per_layer {
                return Err(invalid(format!("expert {e} outside model shape")));
            }
            if e.index < config.shared_experts {
                return Err(Error::PolicyInfeasible(format!(
                    "expert {e} is a shared expert and cannot be steered"
                )));
            }
        }
        for layer in 0..config.num_layers {
            let inhibited = self.inhibit.iter().filter(|e| e.layer == layer).count();
            if inhibited > config.routed_experts() - config.top_k {
                return Err(Error::PolicyInfeasible(format!(
                    "layer {layer}: {inhibited} inhibited experts leave fewer than top_k={} candidates",
                    config.top_k
                )));
            }
            let enhanced = self.enhance.iter().filter(|e| e.layer == layer).count();
            if enhanced > config.top_k {
                return Err(Error::PolicyInfeasible(format!(
                    "layer {layer}: {enhanced} enhanced experts exceed top_k={}",
                    config.top_k
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read policy {}: {e}", path.display())))?;
        let policy: Self = serde_json::from_str(&text)?;
        policy.check()?;
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serialises")
    }
}

/// Enhance the selection's positive experts and inhibit its negative ones.
pub fn build_enhancement(selection: &ExpertSelection) -> Result<SteeringPolicy> {
    if selection.is_empty() {
        return Err(invalid("cannot build a policy from an empty selection"));
    }
    SteeringPolicy::new(
        selection.positive_experts.iter().copied(),
        selection.negative_experts.iter().copied(),
        DEFAULT_ENHANCE_WEIGHT,
    )
}

/// The reverse mapping: enhance negatives, inhibit positives.
pub fn build_inhibition(selection: &ExpertSelection) -> Result<SteeringPolicy> {
    if selection.is_empty() {
        return Err(invalid("cannot build a policy from an empty selection"));
    }
    SteeringPolicy::new(
        selection.negative_experts.iter().copied(),
        selection.positive_experts.iter().copied(),
        DEFAULT_ENHANCE_WEIGHT,
    )
}

/// Steered gating for a model without shared experts.
pub fn apply_policy(logits: &[f64], layer: usize, policy: &SteeringPolicy, top_k: usize) -> Result<GateVector> {
    apply_policy_with_shared(logits, layer, policy, top_k, 0)
}

pub fn apply_policy_with_shared(
    logits: &[f64],
    layer: usize,
    policy: &SteeringPolicy,
    top_k: usize,
    shared: usize,
) -> Result<GateVector> {
    let n = logits.len();
    let in_layer =
        |set: &BTreeSet<ExpertId>| -> Vec<usize> { set.iter().filter(|e| e.layer == layer).map(|e| e.index).collect() };
    let inhibited = in_layer(&policy.inhibit);
    let forced = in_layer(&policy.enhance);
    if let Some(&i) = inhibited.iter().chain(&forced).find(|&&i| i >= n || i < shared) {
        return Err(Error::PolicyInfeasible(format!(
            "layer {layer}: expert {i} cannot be steered"
        )));
    }
    if forced.len() > top_k {
        return Err(Error::PolicyInfeasible(format!(
            "layer {layer}: {} enhanced experts exceed top_k={top_k}",
            forced.len()
        )));
    }
    let candidates: Vec<usize> = (shared..n).filter(|i| !inhibited.contains(i)).collect();
    if candidates.len() < top_k {
        return Err(Error::PolicyInfeasible(format!(
            "layer {layer}: only {} candidates survive inhibition, top_k={top_k}",
            candidates.len()
        )));
    }

    let fill = rank_by_logit(logits, candidates.into_iter().filter(|i| !forced.contains(i)))
        .into_iter()
        .take(top_k - forced.len());
    let mut rest: Vec<usize> = (0..shared).chain(fill).collect();
    rest.sort_unstable();

    let mut gates = vec![0.0; n];
    if forced.is_empty() {
        softmax_into(&mut gates, logits, &rest, 1.0);
    } else if rest.is_empty() {
        let w = 1.0 / forced.len() as f64;
        for &i in &forced {
            gates[i] = w;
        }
    } else {
        let w = policy.enhance_weight / forced.len() as f64;
        for &i in &forced {
            gates[i] = w;
        }
        softmax_into(&mut gates, logits, &rest, 1.0 - policy.enhance_weight);
    }
    Ok(GateVector { layer, gates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ceai::ScoreMode;
    use crate::moe::top_k_gates;

    fn id(l: usize, i: usize) -> ExpertId {
        ExpertId::new(l, i)
    }

    #[test]
    fn single_enhanced_gets_point_eight() {
        let p = SteeringPolicy::new([id(0, 3)], [], 0.8).unwrap();
        let g = apply_policy(&[2.0, 1.0, 0.5, -3.0], 0, &p, 2).unwrap();
        assert_eq!(g.gates[3], 0.8);
        assert!((g.gates[0] - 0.2).abs() < 1e-12);
        assert_eq!(g.active_count(), 2);
    }

    #[test]
    fn two_enhanced_split_evenly() {
        let p = SteeringPolicy::new([id(0, 2), id(0, 3)], [], 0.8).unwrap();
        let g = apply_policy(&[2.0, 1.0, 0.5, -3.0], 0, &p, 2).unwrap();
        assert_eq!(g.gates, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn empty_policy_is_plain_routing() {
        let logits = [0.3, -0.2, 1.7, 0.9, 0.9, -4.0, 0.0, 1.1];
        let p = SteeringPolicy::default();
        assert_eq!(apply_policy(&logits, 1, &p, 2).unwrap(), top_k_gates(&logits, 1, 2, 0));
    }

    #[test]
    fn other_layers_untouched() {
        let logits = [0.3, -0.2, 1.7, 0.9];
        let p = SteeringPolicy::new([id(1, 0)], [id(1, 2)], 0.8).unwrap();
        assert_eq!(apply_policy(&logits, 0, &p, 2).unwrap(), top_k_gates(&logits, 0, 2, 0));
    }

    #[test]
    fn inhibited_expert_is_zero() {
        let p = SteeringPolicy::new([], [id(0, 2)], 0.8).unwrap();
        let g = apply_policy(&[0.3, -0.2, 1.7, 0.9], 0, &p, 2).unwrap();
        assert_eq!(g.gates[2], 0.0);
        assert_eq!(g.active_count(), 2);
    }

    #[test]
    fn infeasible_policies_error() {
        let p = SteeringPolicy::new([id(0, 0), id(0, 1), id(0, 2)], [], 0.8).unwrap();
        assert!(matches!(
            apply_policy(&[0.0; 4], 0, &p, 2),
            Err(Error::PolicyInfeasible(_))
        ));
        let p = SteeringPolicy::new([], [id(0, 0), id(0, 1), id(0, 2)], 0.8).unwrap();
        assert!(matches!(
            apply_policy(&[0.0; 4], 0, &p, 2),
            Err(Error::PolicyInfeasible(_))
        ));
    }

    #[test]
    fn overlapping_sets_rejected() {
        assert!(SteeringPolicy::new([id(0, 0)], [id(0, 0)], 0.8).is_err());
        assert!(SteeringPolicy::new([id(0, 0)], [], 0.0).is_err());
        assert!(SteeringPolicy::new([id(0, 0)], [], 1.2).is_err());
    }

    #[test]
    fn shared_experts_share_the_residual() {
        let p = SteeringPolicy::new([id(0, 4)], [], 0.8).unwrap();
        let g = apply_policy_with_shared(&[0.0, 0.0, 1.0, 2.0, -1.0], 0, &p, 2, 2).unwrap();
        assert_eq!(g.active_count(), 4);
        assert_eq!(g.gates[4], 0.8);
        assert!((g.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let bad = SteeringPolicy::new([], [id(0, 1)], 0.8).unwrap();
        assert!(apply_policy_with_shared(&[0.0; 5], 0, &bad, 2, 2).is_err());
    }

    #[test]
    fn enhancement_and_inhibition_mapping() {
        let sel = ExpertSelection {
            positive_experts: [id(0, 1)].into_iter().collect(),
            negative_experts: [id(3, 2)].into_iter().collect(),
            mode: ScoreMode::DeltaWeighted,
            threshold: 0.0,
        };
        let enh = build_enhancement(&sel).unwrap();
        assert_eq!(enh.enhance, [id(0, 1)].into_iter().collect());
        assert_eq!(enh.inhibit, [id(3, 2)].into_iter().collect());
        assert_eq!(enh.enhance_weight, 0.8);
        let inh = build_inhibition(&sel).unwrap();
        assert_eq!(inh.enhance, [id(3, 2)].into_iter().collect());
        assert_eq!(inh.inhibit, [id(0, 1)].into_iter().collect());

        let only_pos = ExpertSelection {
            negative_experts: BTreeSet::new(),
            ..sel.clone()
        };
        let enh = build_enhancement(&only_pos).unwrap();
        assert!(enh.inhibit.is_empty());
        let empty = ExpertSelection {
            positive_experts: BTreeSet::new(),
            negative_experts: BTreeSet::new(),
            ..sel
        };
        assert!(build_enhancement(&empty).is_err());
    }

    #[test]
    fn policy_json_shape() {
        let p = SteeringPolicy::new([id(0, 1)], [id(2, 3)], 0.8).unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["enhance"], serde_json::json!([[0, 1]]));
        assert_eq!(v["inhibit"], serde_json::json!([[2, 3]]));
        assert_eq!(v["enhance_weight"], serde_json::json!(0.8));
        let back: SteeringPolicy = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn validate_for_model_shape() {
        let cfg = ModelConfig::mixtral_like(10, 0);
        let p = SteeringPolicy::new([id(9, 0)], [], 0.8).unwrap();
        assert!(p.validate_for(&cfg).is_err());
        let p = SteeringPolicy::new([], (0..7).map(|i| id(0, i)), 0.8).unwrap();
        assert!(matches!(p.validate_for(&cfg), Err(Error::PolicyInfeasible(_))));
        let p = SteeringPolicy::new([id(0, 1)], (2..8).map(|i| id(0, i)), 0.8).unwrap();
        assert!(p.validate_for(&cfg).is_ok());
    }
}
