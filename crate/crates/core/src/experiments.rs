//! End-to-end experiment drivers shared by the CLI and the acceptance suite:
//! planted-expert recovery, classifier fitting, the steering table and the
//! expert-driven retrieval setup.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ceai::{
    activation_probability, default_core_grid, evaluate, few_shot_sample, general_experts, predict, search_selection,
    select_core_experts, Contrast, GridPoint, Metric, ScoreMode, SearchOutcome,
};
use crate::error::{invalid, Error, Result};
use crate::moe::ExpertId;
use crate::ragpipe::{AlwaysRag, ExpertJudge, ExpertRag, NoRag, RandomRag, StrategyRegistry};
use crate::rng::substream;
use crate::steering::{build_enhancement, build_inhibition, SteeringPolicy};
use crate::synthworld::{build_contrastive_sets_for, DocQuality, PlantedModel, Role, Scenario, World};
use crate::trace::TraceSet;

/// Questions reserved for inspection; the rest are held out for evaluation.
pub const DEFAULT_TRAIN_QUESTIONS: usize = 1200;
/// Largest top/bottom count searched for classifier selections.
pub const CORE_GRID_MAX: usize = 20;
pub const GENERAL_FLOOR: f64 = 0.9;
pub const RANDOM_DRAWS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub precision: f64,
    pub recall: f64,
}

impl Recovery {
    pub fn of(found: &BTreeSet<ExpertId>, planted: &BTreeSet<ExpertId>) -> Self {
        let hit = found.intersection(planted).count() as f64;
        let ratio = |d: usize| if d == 0 { 1.0 } else { hit / d as f64 };
        Self {
            precision: ratio(found.len()),
            recall: ratio(planted.len()),
        }
    }

    pub fn is_exact(&self) -> bool {
        self.precision == 1.0 && self.recall == 1.0
    }
}

/// Metric a scenario's classifier is judged by.
pub fn scenario_metric(scenario: Scenario) -> Metric {
    match scenario {
        Scenario::Cognizant => Metric::F1Positive,
        _ => Metric::Accuracy,
    }
}

/// Question ids for one contrast with `per_side` records per side. The
/// cognizant contrast splits on knowledge, so it takes equal numbers of
/// answerable and unanswerable questions; the others pair every question with
/// itself and take the first `per_side`.
pub fn contrast_ids(world: &World, scenario: Scenario, pool: &[usize], per_side: usize) -> Result<Vec<usize>> {
    match scenario {
        Scenario::Cognizant => world.balanced_ids(pool, per_side),
        _ => {
            if pool.len() < per_side {
                return Err(invalid(format!("need {per_side} questions, have {}", pool.len())));
            }
            Ok(pool[..per_side].to_vec())
        }
    }
}

pub fn contrast_traces(
    world: &World,
    model: &PlantedModel,
    scenario: Scenario,
    ids: &[usize],
) -> Result<(TraceSet, TraceSet)> {
    build_contrastive_sets_for(world, model, scenario, ids, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecovery {
    pub scenario: Scenario,
    pub positive: Recovery,
    pub negative: Recovery,
}

/// Selects as many experts as were planted for the scenario and compares.
pub fn planted_recovery(world: &World, scenario: Scenario, pos: &TraceSet, neg: &TraceSet) -> Result<PlantedRecovery> {
    let (pos_role, neg_role) = scenario.roles();
    let (planted_pos, planted_neg) = (world.planted_set(pos_role), world.planted_set(neg_role));
    let profile = Contrast::new(pos, neg).profile()?;
    let sel = select_core_experts(&profile, planted_pos.len(), planted_neg.len(), ScoreMode::DeltaWeighted)?;
    Ok(PlantedRecovery {
        scenario,
        positive: Recovery::of(&sel.positive_experts, &planted_pos),
        negative: Recovery::of(&sel.negative_experts, &planted_neg),
    })
}

/// Fits a classifier on the full training contrast, or on `shots` records
/// drawn from it.
pub fn fit_classifier(train: Contrast<'_>, metric: Metric, shots: Option<(usize, u64)>) -> Result<SearchOutcome> {
    let grid = default_core_grid(CORE_GRID_MAX);
    match shots {
        None => search_selection(train, &grid, metric),
        Some((n, seed)) => {
            let (p, q) = few_shot_sample(train, n, seed)?;
            search_selection(Contrast::new(&p, &q), &grid, metric)
        }
    }
}

pub fn score_classifier(outcome: &SearchOutcome, test: Contrast<'_>, metric: Metric) -> Result<f64> {
    let predictions = predict(test, &outcome.profile, &outcome.selection)?;
    evaluate(&predictions, &test.golds(), metric)
}

/// Fraction of `ids` answered correctly with their gold document under `policy`.
pub fn gold_document_accuracy(
    world: &World,
    model: &PlantedModel,
    ids: &[usize],
    policy: Option<&SteeringPolicy>,
) -> Result<f64> {
    if ids.is_empty() {
        return Err(invalid("no questions to evaluate"));
    }
    let correct: usize = ids
        .par_iter()
        .map(|&id| {
            let q = world.question(id)?;
            let (_, token) = model.answer(&world.with_document_prompt(q, DocQuality::Gold), policy)?;
            Ok(usize::from(token == q.answer))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / ids.len() as f64)
}

/// Steering set sizes searched, scaled to the model: the wide grid only when
/// the model has enough experts for it.
pub fn steering_grid(num_layers: usize, experts_per_layer: usize) -> Vec<usize> {
    if num_layers * experts_per_layer >= 256 {
        vec![10, 20, 30, 40, 50]
    } else {
        vec![1, 2, 3, 4, 5]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub grid: Vec<usize>,
    pub random_draws: usize,
    pub general_floor: f64,
    pub seed: u64,
}

impl SteeringConfig {
    pub fn for_model(model: &PlantedModel, seed: u64) -> Self {
        let c = &model.model.config;
        Self {
            grid: steering_grid(c.num_layers, c.experts_per_layer),
            random_draws: RANDOM_DRAWS,
            general_floor: GENERAL_FLOOR,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringRow {
    /// `none`, `enhance` or `inhibit`.
    pub adjustment: String,
    /// `none`, `random`, `in-context` or `general`.
    pub experts: String,
    pub size: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub rows: Vec<SteeringRow>,
    pub enhancement: SteeringPolicy,
    pub inhibition: SteeringPolicy,
    pub general: BTreeSet<ExpertId>,
}

impl SteeringReport {
    pub fn accuracy(&self, adjustment: &str, experts: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.adjustment == adjustment && r.experts == experts)
            .map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("adjustment,experts,size,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4}\n",
                r.adjustment, r.experts, r.size, r.accuracy
            ));
        }
        out
    }
}

fn policy_size(p: &SteeringPolicy) -> usize {
    p.enhance.len() + p.inhibit.len()
}

/// Best feasible enhancement and inhibition policies over the size grid, by
/// training accuracy (highest for enhancement, lowest for inhibition; ties to
/// the smaller size). Also returns the in-context contrast's general experts.
pub fn fit_incontext_policies(
    world: &World,
    model: &PlantedModel,
    train_ids: &[usize],
    grid: &[usize],
    general_floor: f64,
) -> Result<(SteeringPolicy, SteeringPolicy, BTreeSet<ExpertId>)> {
    let config = &model.model.config;
    let (pos, neg) = contrast_traces(world, model, Scenario::Incontext, train_ids)?;
    let profile = Contrast::new(&pos, &neg).profile()?;
    let general: BTreeSet<ExpertId> = general_experts(
        &activation_probability(&pos)?,
        &activation_probability(&neg)?,
        general_floor,
    )?
    .into_iter()
    .filter(|e| e.index >= config.shared_experts)
    .collect();

    let mut enhance: Option<(f64, SteeringPolicy)> = None;
    let mut inhibit: Option<(f64, SteeringPolicy)> = None;
    for &n in grid {
        let Ok(sel) = select_core_experts(&profile, n, n, ScoreMode::DeltaWeighted) else {
            continue;
        };
        if sel.is_empty() {
            continue;
        }
        let up = build_enhancement(&sel)?;
        if up.validate_for(config).is_ok() {
            let acc = gold_document_accuracy(world, model, train_ids, Some(&up))?;
            if enhance.as_ref().is_none_or(|(best, _)| acc > *best) {
                enhance = Some((acc, up));
            }
        }
        let down = build_inhibition(&sel)?;
        if down.validate_for(config).is_ok() {
            let acc = gold_document_accuracy(world, model, train_ids, Some(&down))?;
            if inhibit.as_ref().is_none_or(|(best, _)| acc < *best) {
                inhibit = Some((acc, down));
            }
        }
    }
    let infeasible = || Error::PolicyInfeasible("no steering set size in the grid fits the model".into());
    Ok((
        enhance.ok_or_else(infeasible)?.1,
        inhibit.ok_or_else(infeasible)?.1,
        general,
    ))
}

/// A feasible policy with the same number of enhanced and inhibited experts as
/// `like`, drawn uniformly from the routed experts.
pub fn random_policy(
    like_enhance: usize,
    like_inhibit: usize,
    model: &PlantedModel,
    seed: u64,
    name: &str,
) -> Result<SteeringPolicy> {
    let c = &model.model.config;
    let routed: Vec<ExpertId> = (0..c.num_layers)
        .flat_map(|l| (c.shared_experts..c.experts_per_layer).map(move |i| ExpertId::new(l, i)))
        .collect();
    if like_enhance + like_inhibit > routed.len() {
        return Err(Error::PolicyInfeasible(format!(
            "cannot draw {} experts from {}",
            like_enhance + like_inhibit,
            routed.len()
        )));
    }
    let mut rng = substream(seed, name);
    for _ in 0..10_000 {
        let picked: Vec<ExpertId> = routed
            .choose_multiple(&mut rng, like_enhance + like_inhibit)
            .copied()
            .collect();
        let policy = SteeringPolicy::new(
            picked[..like_enhance].iter().copied(),
            picked[like_enhance..].iter().copied(),
            crate::steering::DEFAULT_ENHANCE_WEIGHT,
        )?;
        if policy.validate_for(c).is_ok() {
            return Ok(policy);
        }
    }
    Err(Error::PolicyInfeasible(format!(
        "no feasible random policy with {like_enhance} enhanced and {like_inhibit} inhibited experts"
    )))
}

/// The steering table: no adjustment, random and in-context enhancement,
/// random and in-context inhibition, general-expert inhibition and a
/// size-matched random inhibition. Random rows average `random_draws` draws.
pub fn steering_experiment(
    world: &World,
    model: &PlantedModel,
    train_ids: &[usize],
    eval_ids: &[usize],
    cfg: &SteeringConfig,
) -> Result<SteeringReport> {
    let (enhancement, inhibition, general) =
        fit_incontext_policies(world, model, train_ids, &cfg.grid, cfg.general_floor)?;
    let acc = |p: Option<&SteeringPolicy>| gold_document_accuracy(world, model, eval_ids, p);
    let random_mean = |enh: usize, inh: usize, tag: &str| -> Result<f64> {
        let mut total = 0.0;
        for draw in 0..cfg.random_draws {
            let p = random_policy(enh, inh, model, cfg.seed, &format!("steer/random/{tag}/{draw}"))?;
            total += acc(Some(&p))?;
        }
        Ok(total / cfg.random_draws.max(1) as f64)
    };
    let row = |adjustment: &str, experts: &str, size: usize, accuracy: f64| SteeringRow {
        adjustment: adjustment.into(),
        experts: experts.into(),
        size,
        accuracy,
    };

    let mut rows = vec![row("none", "none", 0, acc(None)?)];
    let (e, i) = (enhancement.enhance.len(), enhancement.inhibit.len());
    rows.push(row("enhance", "random", e + i, random_mean(e, i, "enhance")?));
    rows.push(row(
        "enhance",
        "in-context",
        policy_size(&enhancement),
        acc(Some(&enhancement))?,
    ));
    let (e, i) = (inhibition.enhance.len(), inhibition.inhibit.len());
    rows.push(row("inhibit", "random", e + i, random_mean(e, i, "inhibit")?));
    rows.push(row(
        "inhibit",
        "in-context",
        policy_size(&inhibition),
        acc(Some(&inhibition))?,
    ));
    if !general.is_empty() {
        let policy = SteeringPolicy::new([], general.iter().copied(), crate::steering::DEFAULT_ENHANCE_WEIGHT)?;
        match policy.validate_for(&model.model.config) {
            Ok(()) => {
                rows.push(row("inhibit", "general", general.len(), acc(Some(&policy))?));
                rows.push(row(
                    "inhibit",
                    "random-general-size",
                    general.len(),
                    random_mean(0, general.len(), "general")?,
                ));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SteeringReport {
        rows,
        enhancement,
        inhibition,
        general,
    })
}

/// Classifiers and policy the expert-driven pipeline runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct RagExperts {
    pub cognizant: SearchOutcome,
    pub quality: SearchOutcome,
    pub incontext: SteeringPolicy,
}

/// Fits every expert class on `train_ids` only.
pub fn fit_rag_experts(world: &World, model: &PlantedModel, train_ids: &[usize]) -> Result<RagExperts> {
    let (p, n) = contrast_traces(world, model, Scenario::Cognizant, train_ids)?;
    let cognizant = fit_classifier(Contrast::new(&p, &n), Metric::F1Positive, None)?;
    let (p, n) = contrast_traces(world, model, Scenario::QualityDistracting, train_ids)?;
    let quality = fit_classifier(Contrast::new(&p, &n), Metric::Accuracy, None)?;
    let grid = steering_grid(model.model.config.num_layers, model.model.config.experts_per_layer);
    let (incontext, _, _) = fit_incontext_policies(world, model, train_ids, &grid, GENERAL_FLOOR)?;
    Ok(RagExperts {
        cognizant,
        quality,
        incontext,
    })
}

fn judge(outcome: &SearchOutcome) -> Box<ExpertJudge> {
    Box::new(ExpertJudge {
        selection: outcome.selection.clone(),
        profile: outcome.profile.clone(),
    })
}

pub const RAG_METHODS: [&str; 6] = [
    "no_rag",
    "always_rag",
    "random_rag",
    "expert_rag_c",
    "expert_rag_cq",
    "expert_rag_cqr",
];

/// Baselines plus the three pipeline ablations: knowledge judgment only, plus
/// the quality filter, plus in-context steering.
pub fn rag_registry(experts: &RagExperts, seed: u64) -> StrategyRegistry {
    let mut r = StrategyRegistry::new();
    let entries: Vec<Box<dyn crate::ragpipe::RetrievalStrategy>> = vec![
        Box::new(NoRag),
        Box::new(AlwaysRag),
        Box::new(RandomRag { seed }),
        Box::new(ExpertRag {
            name: "expert_rag_c".into(),
            cognizant: judge(&experts.cognizant),
            quality: None,
            incontext: None,
        }),
        Box::new(ExpertRag {
            name: "expert_rag_cq".into(),
            cognizant: judge(&experts.cognizant),
            quality: Some(judge(&experts.quality)),
            incontext: None,
        }),
        Box::new(ExpertRag {
            name: "expert_rag_cqr".into(),
            cognizant: judge(&experts.cognizant),
            quality: Some(judge(&experts.quality)),
            incontext: Some(experts.incontext.clone()),
        }),
    ];
    for s in entries {
        r.register(s).expect("distinct names");
    }
    r
}

/// Grid of every score mode for the given top/bottom counts.
pub fn grid_for(top: usize, bottom: usize) -> Vec<GridPoint> {
    ScoreMode::ALL
        .into_iter()
        .map(|mode| GridPoint {
            top_k_pos: top,
            bottom_k_neg: bottom,
            mode,
        })
        .collect()
}

/// Planted roles paired with the scenario whose contrast should expose them.
pub fn recovery_scenarios() -> [(Scenario, Role, Role); 3] {
    [
        (Scenario::Cognizant, Role::CognizantPos, Role::CognizantNeg),
        (Scenario::QualityDistracting, Role::QualityPos, Role::QualityNeg),
        (Scenario::Incontext, Role::IncontextPos, Role::IncontextNeg),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_ratios() {
        let a: BTreeSet<ExpertId> = [ExpertId::new(0, 1), ExpertId::new(1, 2)].into();
        let b: BTreeSet<ExpertId> = [ExpertId::new(0, 1)].into();
        let r = Recovery::of(&a, &b);
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!(Recovery::of(&b, &b).is_exact());
    }

    #[test]
    fn grid_scales_with_model() {
        assert_eq!(steering_grid(4, 8), vec![1, 2, 3, 4, 5]);
        assert_eq!(steering_grid(32, 8), vec![10, 20, 30, 40, 50]);
    }
}
