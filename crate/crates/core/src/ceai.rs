//! Contrastive expert activation inspection.
//!
//! Activation probabilities per scenario, their contrast, the scenario score
//! built on top of it, and the machinery for picking and evaluating core
//! expert selections.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::moe::ExpertId;
use crate::rng::substream;
use crate::trace::{ActivationRecord, TraceSet};

pub const POS_LABEL: &str = "pos";
pub const NEG_LABEL: &str = "neg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMatrix {
    /// `num_layers x experts_per_layer`.
    pub values: Vec<Vec<f64>>,
    pub sample_count: usize,
    pub source: String,
}

impl ProbMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.values.len(), self.values.first().map_or(0, Vec::len))
    }

    pub fn get(&self, id: ExpertId) -> f64 {
        self.values[id.layer][id.index]
    }
}

/// Fraction of records in which each expert is active.
///
/// Counts are integer partial sums merged by addition, so the result does not
/// depend on how the records are split across threads.
pub fn activation_probability(set: &TraceSet) -> Result<ProbMatrix> {
    if set.is_empty() {
        return Err(invalid("activation probability of an empty trace set"));
    }
    let (layers, experts) = set.model_shape;
    let counts = set
        .records
        .par_iter()
        .fold(
            || vec![0u64; layers * experts],
            |mut acc, record| {
                for (layer, pairs) in record.activations.iter().enumerate() {
                    for &(idx, _) in pairs {
                        acc[layer * experts + idx] += 1;
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; layers * experts],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let n = set.len() as f64;
    let values = counts
        .chunks(experts)
        .map(|row| row.iter().map(|&c| c as f64 / n).collect())
        .collect();
    Ok(ProbMatrix {
        values,
        sample_count: set.len(),
        source: set.source.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub source: String,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveProfile {
    /// `num_layers x experts_per_layer`, each entry in `[-1, 1]`.
    pub delta: Vec<Vec<f64>>,
    pub pos_meta: SourceMeta,
    pub neg_meta: SourceMeta,
}

impl ContrastiveProfile {
    pub fn shape(&self) -> (usize, usize) {
        (self.delta.len(), self.delta.first().map_or(0, Vec::len))
    }

    pub fn get(&self, id: ExpertId) -> f64 {
        self.delta[id.layer][id.index]
    }

    /// Heatmap matrix: one row per layer, six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.delta {
            let cells: Vec<String> = row.iter().map(|v| fmt6(*v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// `{:.6}` without a `-0.000000`.
pub(crate) fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0.000000".to_string()
    } else {
        s
    }
}

pub fn contrastive_profile(pos: &ProbMatrix, neg: &ProbMatrix) -> Result<ContrastiveProfile> {
    if pos.shape() != neg.shape() {
        return Err(invalid(format!(
            "probability matrices differ in shape: {:?} vs {:?}",
            pos.shape(),
            neg.shape()
        )));
    }
    let delta = pos
        .values
        .iter()
        .zip(&neg.values)
        .map(|(p, n)| p.iter().zip(n).map(|(a, b)| a - b).collect())
        .collect();
    Ok(ContrastiveProfile {
        delta,
        pos_meta: SourceMeta {
            source: pos.source.clone(),
            sample_count: pos.sample_count,
        },
        neg_meta: SourceMeta {
            source: neg.source.clone(),
            sample_count: neg.sample_count,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Sum of the contrast over activated selected experts.
    DeltaWeighted,
    /// +1 per activated positive expert, -1 per activated negative expert.
    Unweighted,
    /// As `Unweighted`, with the gate value in place of the unit indicator.
    GateWeighted,
    /// Gate value times contrast.
    GateAndDelta,
}

impl ScoreMode {
    pub const ALL: [ScoreMode; 4] = [
        ScoreMode::DeltaWeighted,
        ScoreMode::Unweighted,
        ScoreMode::GateWeighted,
        ScoreMode::GateAndDelta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::DeltaWeighted => "delta_weighted",
            ScoreMode::Unweighted => "unweighted",
            ScoreMode::GateWeighted => "gate_weighted",
            ScoreMode::GateAndDelta => "gate_and_delta",
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown score mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSelection {
    pub positive_experts: BTreeSet<ExpertId>,
    pub negative_experts: BTreeSet<ExpertId>,
    pub mode: ScoreMode,
    pub threshold: f64,
}

impl ExpertSelection {
    pub fn is_empty(&self) -> bool {
        self.positive_experts.is_empty() && self.negative_experts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positive_experts.len() + self.negative_experts.len()
    }

    /// Score contributions for a record: `(expert, sign, delta)` per selected
    /// expert, ascending by expert.
    fn weighted(&self, profile: &ContrastiveProfile) -> Vec<(ExpertId, f64, f64)> {
        let mut items: Vec<(ExpertId, f64, f64)> = self
            .positive_experts
            .iter()
            .map(|e| (*e, 1.0, profile.get(*e)))
            .chain(self.negative_experts.iter().map(|e| (*e, -1.0, profile.get(*e))))
            .collect();
        items.sort_by_key(|(e, _, _)| *e);
        items
    }
}

fn ranked(profile: &ContrastiveProfile, descending: bool) -> Vec<ExpertId> {
    let (layers, experts) = profile.shape();
    let mut ids: Vec<ExpertId> = (0..layers)
        .flat_map(|l| (0..experts).map(move |i| ExpertId::new(l, i)))
        .collect();
    ids.sort_by(|a, b| {
        // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie.
        let (x, y) = (profile.get(*a) + 0.0, profile.get(*b) + 0.0);
        let by_value = if descending { y.total_cmp(&x) } else { x.total_cmp(&y) };
        by_value.then(a.cmp(b))
    });
    ids
}

/// The `top_k_pos` largest and `bottom_k_neg` smallest contrast entries,
/// ties broken by `(layer, index)` ascending. The two sets are disjoint.
pub fn select_core_experts(
    profile: &ContrastiveProfile,
    top_k_pos: usize,
    bottom_k_neg: usize,
    mode: ScoreMode,
) -> Result<ExpertSelection> {
    let (layers, experts) = profile.shape();
    if top_k_pos + bottom_k_neg > layers * experts {
        return Err(invalid(format!(
            "cannot select {top_k_pos} + {bottom_k_neg} experts from {}",
            layers * experts
        )));
    }
    let positive_experts: BTreeSet<ExpertId> = ranked(profile, true).into_iter().take(top_k_pos).collect();
    let negative_experts = ranked(profile, false)
        .into_iter()
        .filter(|e| !positive_experts.contains(e))
        .take(bottom_k_neg)
        .collect();
    Ok(ExpertSelection {
        positive_experts,
        negative_experts,
        mode,
        threshold: 0.0,
    })
}

fn check_record_shape(record: &ActivationRecord, profile: &ContrastiveProfile) -> Result<()> {
    if (record.layer_count, record.experts_per_layer) != profile.shape() {
        return Err(invalid(format!(
            "record `{}` shape ({}, {}) does not match profile {:?}",
            record.prompt_id,
            record.layer_count,
            record.experts_per_layer,
            profile.shape()
        )));
    }
    Ok(())
}

fn contribution(mode: ScoreMode, sign: f64, delta: f64, gate: f64) -> f64 {
    match mode {
        ScoreMode::DeltaWeighted => delta,
        ScoreMode::Unweighted => sign,
        ScoreMode::GateWeighted => sign * gate,
        ScoreMode::GateAndDelta => gate * delta,
    }
}

pub fn scenario_score(
    record: &ActivationRecord,
    profile: &ContrastiveProfile,
    selection: &ExpertSelection,
) -> Result<f64> {
    check_record_shape(record, profile)?;
    let mut score = 0.0;
    for (e, sign, delta) in selection.weighted(profile) {
        if let Some(gate) = record.gate(e.layer, e.index) {
            score += contribution(selection.mode, sign, delta, gate);
        }
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioLabel {
    Positive,
    Negative,
}

impl ScenarioLabel {
    pub fn from_trace_label(label: Option<&str>) -> Option<Self> {
        match label {
            Some(POS_LABEL) => Some(Self::Positive),
            Some(NEG_LABEL) => Some(Self::Negative),
            _ => None,
        }
    }

    pub fn trace_label(self) -> &'static str {
        match self {
            Self::Positive => POS_LABEL,
            Self::Negative => NEG_LABEL,
        }
    }
}

/// Strictly above the threshold is positive; ties go negative.
pub fn classify(score: f64, threshold: f64) -> ScenarioLabel {
    if score > threshold {
        ScenarioLabel::Positive
    } else {
        ScenarioLabel::Negative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1Positive,
    Accuracy,
    MacroF1,
}

impl std::str::FromStr for Metric {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" | "f1_positive" => Ok(Metric::F1Positive),
            "accuracy" => Ok(Metric::Accuracy),
            "macro_f1" => Ok(Metric::MacroF1),
            other => Err(invalid(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(predictions: &[ScenarioLabel], golds: &[ScenarioLabel]) -> Self {
        let mut c = Confusion::default();
        for (p, g) in predictions.iter().zip(golds) {
            match (p, g) {
                (ScenarioLabel::Positive, ScenarioLabel::Positive) => c.tp += 1,
                (ScenarioLabel::Positive, ScenarioLabel::Negative) => c.fp += 1,
                (ScenarioLabel::Negative, ScenarioLabel::Negative) => c.tn += 1,
                (ScenarioLabel::Negative, ScenarioLabel::Positive) => c.fn_ += 1,
            }
        }
        c
    }

    fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
        // Zero true positives means zero F1, whatever the denominators.
        if tp == 0 {
            return 0.0;
        }
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }

    pub fn f1_positive(&self) -> f64 {
        Self::f1(self.tp, self.fp, self.fn_)
    }

    pub fn f1_negative(&self) -> f64 {
        Self::f1(self.tn, self.fn_, self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.fp + self.tn + self.fn_) as f64
    }
}

pub fn evaluate(predictions: &[ScenarioLabel], golds: &[ScenarioLabel], metric: Metric) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != golds.len() {
        return Err(invalid(format!(
            "evaluation needs equal non-empty inputs (got {} predictions, {} golds)",
            predictions.len(),
            golds.len()
        )));
    }
    let c = Confusion::from_labels(predictions, golds);
    Ok(match metric {
        Metric::F1Positive => c.f1_positive(),
        Metric::Accuracy => c.accuracy(),
        Metric::MacroF1 => 0.5 * (c.f1_positive() + c.f1_negative()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub top_k_pos: usize,
    pub bottom_k_neg: usize,
    pub mode: ScoreMode,
}

/// `1..=max` for both sides, every score mode.
pub fn default_core_grid(max: usize) -> Vec<GridPoint> {
    let mut grid = Vec::new();
    for mode in ScoreMode::ALL {
        for top_k_pos in 1..=max {
            for bottom_k_neg in 1..=max {
                grid.push(GridPoint {
                    top_k_pos,
                    bottom_k_neg,
                    mode,
                });
            }
        }
    }
    grid
}

/// Labelled training data for one contrast: records of `pos` are the positive
/// scenario, records of `neg` the negative one.
#[derive(Debug, Clone, Copy)]
pub struct Contrast<'a> {
    pub pos: &'a TraceSet,
    pub neg: &'a TraceSet,
}

impl<'a> Contrast<'a> {
    pub fn new(pos: &'a TraceSet, neg: &'a TraceSet) -> Self {
        Self { pos, neg }
    }

    pub fn profile(&self) -> Result<ContrastiveProfile> {
        if self.pos.model_shape != self.neg.model_shape {
            return Err(invalid("contrast sides have different model shapes"));
        }
        contrastive_profile(&activation_probability(self.pos)?, &activation_probability(self.neg)?)
    }

    pub fn labelled(&self) -> impl Iterator<Item = (&'a ActivationRecord, ScenarioLabel)> {
        self.pos
            .records
            .iter()
            .map(|r| (r, ScenarioLabel::Positive))
            .chain(self.neg.records.iter().map(|r| (r, ScenarioLabel::Negative)))
    }

    pub fn golds(&self) -> Vec<ScenarioLabel> {
        self.labelled().map(|(_, l)| l).collect()
    }
}

/// Predictions for every record in the contrast, positives first.
pub fn predict(
    contrast: Contrast<'_>,
    profile: &ContrastiveProfile,
    selection: &ExpertSelection,
) -> Result<Vec<ScenarioLabel>> {
    contrast
        .labelled()
        .map(|(r, _)| Ok(classify(scenario_score(r, profile, selection)?, selection.threshold)))
        .collect()
}

pub fn evaluate_selection(
    contrast: Contrast<'_>,
    profile: &ContrastiveProfile,
    selection: &ExpertSelection,
    metric: Metric,
) -> Result<f64> {
    evaluate(&predict(contrast, profile, selection)?, &contrast.golds(), metric)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub selection: ExpertSelection,
    pub profile: ContrastiveProfile,
    pub point: GridPoint,
    pub train_metric: f64,
}

/// Dense `(num_layers * experts_per_layer)` gate vector for fast rescoring.
fn dense_gates(record: &ActivationRecord, experts: usize) -> Vec<f64> {
    let mut dense = vec![0.0; record.layer_count * experts];
    for (layer, pairs) in record.activations.iter().enumerate() {
        for &(idx, g) in pairs {
            dense[layer * experts + idx] = g;
        }
    }
    dense
}

/// Fits the contrast on the training sides and returns the grid point that
/// scores best on them. Ties go to fewer selected experts, then grid order.
/// Grid points asking for more experts than exist are skipped.
pub fn search_selection(train: Contrast<'_>, grid: &[GridPoint], metric: Metric) -> Result<SearchOutcome> {
    if train.pos.is_empty() || train.neg.is_empty() {
        return Err(invalid("selection search needs records from both scenarios"));
    }
    let profile = train.profile()?;
    let (layers, experts) = profile.shape();
    let golds = train.golds();
    let dense: Vec<Vec<f64>> = train.labelled().map(|(r, _)| dense_gates(r, experts)).collect();

    let evaluated: Vec<Option<(f64, ExpertSelection)>> = grid
        .par_iter()
        .map(|p| {
            if p.top_k_pos + p.bottom_k_neg > layers * experts {
                return Ok(None);
            }
            let selection = select_core_experts(&profile, p.top_k_pos, p.bottom_k_neg, p.mode)?;
            let items: Vec<(usize, f64, f64)> = selection
                .weighted(&profile)
                .into_iter()
                .map(|(e, s, d)| (e.layer * experts + e.index, s, d))
                .collect();
            let predictions: Vec<ScenarioLabel> = dense
                .iter()
                .map(|gates| {
                    let mut score = 0.0;
                    for &(flat, sign, delta) in &items {
                        let g = gates[flat];
                        if g > 0.0 {
                            score += contribution(selection.mode, sign, delta, g);
                        }
                    }
                    classify(score, selection.threshold)
                })
                .collect();
            Ok(Some((evaluate(&predictions, &golds, metric)?, selection)))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, f64, ExpertSelection)> = None;
    for (i, entry) in evaluated.into_iter().enumerate() {
        let Some((value, selection)) = entry else { continue };
        let better = match &best {
            None => true,
            Some((_, bv, bs)) => value > *bv || (value == *bv && selection.len() < bs.len()),
        };
        if better {
            best = Some((i, value, selection));
        }
    }
    let (i, train_metric, selection) = best.ok_or_else(|| invalid("no grid point fits the model shape"))?;
    Ok(SearchOutcome {
        selection,
        profile,
        point: grid[i],
        train_metric,
    })
}

/// Experts active with probability at least `floor` in both scenarios.
pub fn general_experts(pos: &ProbMatrix, neg: &ProbMatrix, floor: f64) -> Result<BTreeSet<ExpertId>> {
    if pos.shape() != neg.shape() {
        return Err(invalid("probability matrices differ in shape"));
    }
    let mut out = BTreeSet::new();
    for (l, (p, n)) in pos.values.iter().zip(&neg.values).enumerate() {
        for (i, (a, b)) in p.iter().zip(n).enumerate() {
            if a.min(*b) >= floor {
                out.insert(ExpertId::new(l, i));
            }
        }
    }
    Ok(out)
}

/// Draws `shots` records uniformly from the union of both sides, redrawing
/// until both scenarios are represented.
pub fn few_shot_sample(contrast: Contrast<'_>, shots: usize, seed: u64) -> Result<(TraceSet, TraceSet)> {
    let total = contrast.pos.len() + contrast.neg.len();
    if shots < 2 || shots > total || contrast.pos.is_empty() || contrast.neg.is_empty() {
        return Err(invalid(format!("cannot draw {shots} shots from {total} records")));
    }
    let mut rng = substream(seed, "few_shot");
    let all: Vec<(&ActivationRecord, ScenarioLabel)> = contrast.labelled().collect();
    for _ in 0..1000 {
        let picked: Vec<_> = all.choose_multiple(&mut rng, shots).collect();
        let mut pos = TraceSet::new(contrast.pos.source.clone(), contrast.pos.model_shape);
        let mut neg = TraceSet::new(contrast.neg.source.clone(), contrast.neg.model_shape);
        for (r, l) in picked {
            match l {
                ScenarioLabel::Positive => pos.records.push((*r).clone()),
                ScenarioLabel::Negative => neg.records.push((*r).clone()),
            }
        }
        if !pos.is_empty() && !neg.is_empty() {
            return Ok((pos, neg));
        }
    }
    Err(invalid("few-shot draw kept missing a scenario"))
}

/// Fair-coin predictions.
pub fn random_guess(count: usize, seed: u64) -> Vec<ScenarioLabel> {
    let mut rng = substream(seed, "random_guess");
    (0..count)
        .map(|_| {
            if rng.gen_bool(0.5) {
                ScenarioLabel::Positive
            } else {
                ScenarioLabel::Negative
            }
        })
        .collect()
}

/// Selection export: every selected expert with its contrast value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub model_shape: (usize, usize),
    pub mode: ScoreMode,
    pub threshold: f64,
    pub positive: Vec<(usize, usize, f64)>,
    pub negative: Vec<(usize, usize, f64)>,
}

impl SelectionFile {
    pub fn new(selection: &ExpertSelection, profile: &ContrastiveProfile) -> Self {
        let entry = |e: &ExpertId| (e.layer, e.index, profile.get(*e));
        Self {
            model_shape: profile.shape(),
            mode: selection.mode,
            threshold: selection.threshold,
            positive: selection.positive_experts.iter().map(entry).collect(),
            negative: selection.negative_experts.iter().map(entry).collect(),
        }
    }

    /// The selection plus a profile that is zero outside the selected experts,
    /// which is all the scenario score reads.
    pub fn into_parts(&self) -> Result<(ExpertSelection, ContrastiveProfile)> {
        let (layers, experts) = self.model_shape;
        let mut delta = vec![vec![0.0; experts]; layers];
        let mut take = |items: &[(usize, usize, f64)]| -> Result<BTreeSet<ExpertId>> {
            items
                .iter()
                .map(|&(l, i, d)| {
                    if l >= layers || i >= experts {
                        return Err(invalid(format!("selected expert ({l}, {i}) outside shape")));
                    }
                    delta[l][i] = d;
                    Ok(ExpertId::new(l, i))
                })
                .collect()
        };
        let positive_experts = take(&self.positive)?;
        let negative_experts = take(&self.negative)?;
        if !positive_experts.is_disjoint(&negative_experts) {
            return Err(invalid("selection lists overlap"));
        }
        let meta = SourceMeta {
            source: "selection".into(),
            sample_count: 0,
        };
        Ok((
            ExpertSelection {
                positive_experts,
                negative_experts,
                mode: self.mode,
                threshold: self.threshold,
            },
            ContrastiveProfile {
                delta,
                pos_meta: meta.clone(),
                neg_meta: meta,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::POSITION_TAG;

    fn record(id: &str, layers: Vec<Vec<(usize, f64)>>, n: usize) -> ActivationRecord {
        ActivationRecord {
            prompt_id: id.into(),
            scenario_label: None,
            layer_count: layers.len(),
            experts_per_layer: n,
            activations: layers,
            position_tag: POSITION_TAG.into(),
            shared: vec![],
        }
    }

    fn profile_from(delta: Vec<Vec<f64>>) -> ContrastiveProfile {
        let meta = SourceMeta {
            source: "t".into(),
            sample_count: 1,
        };
        ContrastiveProfile {
            delta,
            pos_meta: meta.clone(),
            neg_meta: meta,
        }
    }

    #[test]
    fn single_record_probability_row() {
        let set = TraceSet::from_records("t", (1, 8), vec![record("a", vec![vec![(1, 0.5), (3, 0.5)]], 8)]).unwrap();
        let p = activation_probability(&set).unwrap();
        assert_eq!(p.values[0], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_in_four() {
        let recs = (0..4)
            .map(|i| {
                let idx = if i == 0 { 2 } else { 0 };
                record(&format!("r{i}"), vec![vec![(idx, 1.0)]], 4)
            })
            .collect();
        let set = TraceSet::from_records("t", (1, 4), recs).unwrap();
        assert_eq!(activation_probability(&set).unwrap().values[0][2], 0.25);
        assert!(activation_probability(&TraceSet::new("e", (1, 4))).is_err());
    }

    #[test]
    fn contrast_arithmetic() {
        let p = ProbMatrix {
            values: vec![vec![0.8, 0.2]],
            sample_count: 5,
            source: "p".into(),
        };
        let n = ProbMatrix {
            values: vec![vec![0.3, 0.7]],
            sample_count: 5,
            source: "n".into(),
        };
        let d = contrastive_profile(&p, &n).unwrap();
        assert!((d.delta[0][0] - 0.5).abs() < 1e-15);
        let same = contrastive_profile(&p, &p).unwrap();
        assert_eq!(same.delta, vec![vec![0.0, 0.0]]);
        let bad = ProbMatrix {
            values: vec![vec![0.8]],
            sample_count: 1,
            source: "b".into(),
        };
        assert!(contrastive_profile(&p, &bad).is_err());
    }

    #[test]
    fn unique_maximum_selected() {
        let mut delta = vec![vec![0.0; 8]; 4];
        delta[2][5] = 0.9;
        let sel = select_core_experts(&profile_from(delta), 1, 0, ScoreMode::DeltaWeighted).unwrap();
        assert_eq!(sel.positive_experts, [ExpertId::new(2, 5)].into_iter().collect());
    }

    #[test]
    fn zero_profile_tie_break() {
        let prof = profile_from(vec![vec![0.0; 8]; 4]);
        let sel = select_core_experts(&prof, 2, 2, ScoreMode::DeltaWeighted).unwrap();
        assert_eq!(
            sel.positive_experts,
            [ExpertId::new(0, 0), ExpertId::new(0, 1)].into_iter().collect()
        );
        assert_eq!(
            sel.negative_experts,
            [ExpertId::new(0, 2), ExpertId::new(0, 3)].into_iter().collect()
        );
        assert!(select_core_experts(&prof, 20, 13, ScoreMode::DeltaWeighted).is_err());
    }

    #[test]
    fn score_modes() {
        let prof = profile_from(vec![vec![0.5, -0.3, 0.1, 0.0]]);
        let sel = ExpertSelection {
            positive_experts: [ExpertId::new(0, 0)].into_iter().collect(),
            negative_experts: [ExpertId::new(0, 1)].into_iter().collect(),
            mode: ScoreMode::DeltaWeighted,
            threshold: 0.0,
        };
        let r = record("a", vec![vec![(0, 0.6), (1, 0.4)]], 4);
        assert!((scenario_score(&r, &prof, &sel).unwrap() - 0.2).abs() < 1e-15);
        let un = ExpertSelection {
            mode: ScoreMode::Unweighted,
            ..sel.clone()
        };
        assert_eq!(scenario_score(&r, &prof, &un).unwrap(), 0.0);
        let gw = ExpertSelection {
            mode: ScoreMode::GateWeighted,
            ..sel.clone()
        };
        assert!((scenario_score(&r, &prof, &gw).unwrap() - 0.2).abs() < 1e-15);
        let gd = ExpertSelection {
            mode: ScoreMode::GateAndDelta,
            ..sel.clone()
        };
        assert!((scenario_score(&r, &prof, &gd).unwrap() - (0.3 - 0.12)).abs() < 1e-15);
        let outside = record("b", vec![vec![(2, 0.5), (3, 0.5)]], 4);
        assert_eq!(scenario_score(&outside, &prof, &sel).unwrap(), 0.0);
        let wrong = record("c", vec![vec![(0, 1.0)]], 5);
        assert!(scenario_score(&wrong, &prof, &sel).is_err());
    }

    #[test]
    fn classify_ties_negative() {
        assert_eq!(classify(0.2, 0.0), ScenarioLabel::Positive);
        assert_eq!(classify(0.0, 0.0), ScenarioLabel::Negative);
        assert_eq!(classify(-0.1, 0.0), ScenarioLabel::Negative);
    }

    #[test]
    fn evaluate_cases() {
        use ScenarioLabel::{Negative as N, Positive as P};
        let g = [P, N, P, N];
        assert_eq!(evaluate(&g, &g, Metric::F1Positive).unwrap(), 1.0);
        assert_eq!(evaluate(&g, &g, Metric::Accuracy).unwrap(), 1.0);
        let all_neg = [N, N, N, N];
        assert_eq!(evaluate(&all_neg, &g, Metric::Accuracy).unwrap(), 0.5);
        assert_eq!(evaluate(&all_neg, &g, Metric::F1Positive).unwrap(), 0.0);
        // Hand-built confusion: tp=3 fp=1 tn=2 fn=2.
        let pred = [P, P, P, P, N, N, N, N];
        let gold = [P, P, P, N, P, P, N, N];
        assert!((evaluate(&pred, &gold, Metric::F1Positive).unwrap() - 6.0 / 9.0).abs() < 1e-15);
        assert!((evaluate(&pred, &gold, Metric::Accuracy).unwrap() - 5.0 / 8.0).abs() < 1e-15);
        // negative class: tp'=2 fp'=2 fn'=1 -> 4/7
        let macro_f1 = 0.5 * (6.0 / 9.0 + 4.0 / 7.0);
        assert!((evaluate(&pred, &gold, Metric::MacroF1).unwrap() - macro_f1).abs() < 1e-15);
        assert!(evaluate(&[], &[], Metric::Accuracy).is_err());
        assert!(evaluate(&[P], &[P, N], Metric::Accuracy).is_err());
    }

    #[test]
    fn general_expert_rule() {
        let p = ProbMatrix {
            values: vec![vec![1.0, 1.0], vec![0.0, 1.0]],
            sample_count: 1,
            source: "p".into(),
        };
        let n = ProbMatrix {
            values: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            sample_count: 1,
            source: "n".into(),
        };
        let g = general_experts(&p, &n, 0.9).unwrap();
        assert_eq!(g, [ExpertId::new(0, 1), ExpertId::new(1, 1)].into_iter().collect());
        let g = general_experts(&p, &n, 0.5).unwrap();
        assert!(!g.contains(&ExpertId::new(0, 0)));
    }

    fn labelled_set(label: &str, recs: Vec<ActivationRecord>) -> TraceSet {
        TraceSet::from_records(
            label,
            (1, 4),
            recs.into_iter()
                .map(|mut r| {
                    r.prompt_id = format!("{label}-{}", r.prompt_id);
                    r
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn search_singleton_and_duplicates() {
        let pos = labelled_set(
            "p",
            (0..4)
                .map(|i| record(&i.to_string(), vec![vec![(0, 0.5), (1, 0.5)]], 4))
                .collect(),
        );
        let neg = labelled_set(
            "n",
            (0..4)
                .map(|i| record(&i.to_string(), vec![vec![(2, 0.5), (3, 0.5)]], 4))
                .collect(),
        );
        let c = Contrast::new(&pos, &neg);
        let point = GridPoint {
            top_k_pos: 2,
            bottom_k_neg: 1,
            mode: ScoreMode::Unweighted,
        };
        let out = search_selection(c, &[point], Metric::F1Positive).unwrap();
        assert_eq!(out.point, point);
        assert_eq!(out.train_metric, 1.0);

        let a = GridPoint {
            top_k_pos: 1,
            bottom_k_neg: 1,
            mode: ScoreMode::DeltaWeighted,
        };
        let b = GridPoint {
            top_k_pos: 1,
            bottom_k_neg: 1,
            mode: ScoreMode::DeltaWeighted,
        };
        let out = search_selection(c, &[point, a, b], Metric::F1Positive).unwrap();
        assert_eq!(out.point, a);

        let empty = TraceSet::new("e", (1, 4));
        assert!(search_selection(Contrast::new(&pos, &empty), &[a], Metric::F1Positive).is_err());
    }

    #[test]
    fn selection_file_roundtrip() {
        let prof = profile_from(vec![vec![0.5, -0.3, 0.1, 0.0]]);
        let sel = select_core_experts(&prof, 1, 1, ScoreMode::GateAndDelta).unwrap();
        let file = SelectionFile::new(&sel, &prof);
        let json = serde_json::to_string(&file).unwrap();
        assert!(json.contains("\"positive\":[[0,0,0.5]]"));
        let back: SelectionFile = serde_json::from_str(&json).unwrap();
        let (s2, p2) = back.into_parts().unwrap();
        assert_eq!(s2, sel);
        let r = record("a", vec![vec![(0, 0.6), (1, 0.4)]], 4);
        assert_eq!(
            scenario_score(&r, &prof, &sel).unwrap(),
            scenario_score(&r, &p2, &s2).unwrap()
        );
    }

    #[test]
    fn csv_six_decimals() {
        let prof = profile_from(vec![vec![0.5, -1e-9], vec![-0.25, 1.0]]);
        assert_eq!(prof.to_csv(), "0.500000,0.000000\n-0.250000,1.000000\n");
    }
}
