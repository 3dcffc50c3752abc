//! Adaptive retrieval: the expert-driven pipeline, fixed baselines, metrics
//! and the balanced evaluation recipe.
//!
//! Every retrieval method implements [`RetrievalStrategy`] and is looked up by
//! name in a [`StrategyRegistry`], so the CLI can pick methods from flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ceai::{classify, scenario_score, ContrastiveProfile, ExpertSelection, ScenarioLabel};
use crate::error::{invalid, Error, Result};
use crate::moe::{self, ForwardResult, MoeModel};
use crate::rng::substream;
use crate::steering::SteeringPolicy;
use crate::synthworld::{DocQuality, PlantedModel, QAInstance, World};
use crate::trace::capture;

/// Anything that maps a prompt to a forward pass plus an emitted answer token.
pub trait AnswerModel: Sync {
    fn respond(&self, prompt: &[u32], policy: Option<&SteeringPolicy>) -> Result<(ForwardResult, u32)>;
}

impl AnswerModel for PlantedModel {
    fn respond(&self, prompt: &[u32], policy: Option<&SteeringPolicy>) -> Result<(ForwardResult, u32)> {
        self.answer(prompt, policy)
    }
}

impl AnswerModel for MoeModel {
    fn respond(&self, prompt: &[u32], policy: Option<&SteeringPolicy>) -> Result<(ForwardResult, u32)> {
        let result = moe::forward(prompt, self, policy)?;
        let token = result.argmax_token();
        Ok((result, token))
    }
}

/// A binary judgment made from one forward pass over an instance.
pub trait Judge: Send + Sync {
    fn judge(&self, instance: &QAInstance, result: &ForwardResult) -> bool;
}

/// Scenario classifier built from core experts: positive iff the scenario
/// score exceeds the selection's threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertJudge {
    pub selection: ExpertSelection,
    pub profile: ContrastiveProfile,
}

impl Judge for ExpertJudge {
    fn judge(&self, _instance: &QAInstance, result: &ForwardResult) -> bool {
        let record = capture(result, "", None);
        // Shapes were checked when the selection was fitted.
        let score = scenario_score(&record, &self.profile, &self.selection).unwrap_or(f64::NEG_INFINITY);
        classify(score, self.selection.threshold) == ScenarioLabel::Positive
    }
}

/// Ground-truth judges, for upper-bound runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleJudge {
    /// Knowledge suffices without retrieval.
    Knowledge,
    /// The retrieved document is gold.
    Quality,
}

impl Judge for OracleJudge {
    fn judge(&self, instance: &QAInstance, _result: &ForwardResult) -> bool {
        match self {
            OracleJudge::Knowledge => instance.answerable_without_retrieval,
            OracleJudge::Quality => instance.document_quality == DocQuality::Gold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityVerdict {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagOutcome {
    pub question_id: usize,
    pub retrieved: bool,
    pub documents_used: bool,
    /// Tokens of retrieved documents present in the answering context.
    pub doc_token_count: usize,
    /// Tokens retrieved and then dropped by the quality filter.
    pub retrieved_but_discarded: usize,
    pub quality_verdict: Option<QualityVerdict>,
    pub steered: bool,
    pub answer: Vec<u32>,
    pub correct: bool,
    /// Retrieval was genuinely needed: the question-only answer is wrong.
    pub requirement_label: bool,
    pub document_quality: DocQuality,
}

impl RagOutcome {
    fn new(instance: &QAInstance, requirement_label: bool) -> Self {
        Self {
            question_id: instance.question_id,
            retrieved: false,
            documents_used: false,
            doc_token_count: 0,
            retrieved_but_discarded: 0,
            quality_verdict: None,
            steered: false,
            answer: Vec::new(),
            correct: false,
            requirement_label,
            document_quality: instance.document_quality,
        }
    }

    fn answered(mut self, token: u32, gold: u32) -> Self {
        self.answer = vec![token];
        self.correct = self.answer.contains(&gold);
        self
    }

    fn use_document(&mut self, doc: &[u32]) {
        self.retrieved = true;
        self.documents_used = true;
        self.doc_token_count = doc.len();
    }

    /// Retrieval needed and the retrieved document can satisfy it.
    pub fn strict_requirement(&self) -> bool {
        self.requirement_label && self.document_quality == DocQuality::Gold
    }
}

fn document(instance: &QAInstance) -> Result<&[u32]> {
    instance
        .document
        .as_deref()
        .ok_or_else(|| Error::Data(format!("question {} has no retrievable document", instance.question_id)))
}

/// Question-only pass, shared by every strategy.
fn question_pass(instance: &QAInstance, model: &dyn AnswerModel) -> Result<(ForwardResult, u32, bool)> {
    let (result, token) = model.respond(&instance.prompt, None)?;
    let requirement = token != instance.gold_answer;
    Ok((result, token, requirement))
}

pub trait RetrievalStrategy: Send + Sync {
    fn name(&self) -> &str;
    fn run(&self, instance: &QAInstance, model: &dyn AnswerModel) -> Result<RagOutcome>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoRag;

impl RetrievalStrategy for NoRag {
    fn name(&self) -> &str {
        "no_rag"
    }

    fn run(&self, instance: &QAInstance, model: &dyn AnswerModel) -> Result<RagOutcome> {
        let (_, token, requirement) = question_pass(instance, model)?;
        Ok(RagOutcome::new(instance, requirement).answered(token, instance.gold_answer))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysRag;

impl RetrievalStrategy for AlwaysRag {
    fn name(&self) -> &str {
        "always_rag"
    }

    fn run(&self, instance: &QAInstance, model: &dyn AnswerModel) -> Result<RagOutcome> {
        let (_, _, requirement) = question_pass(instance, model)?;
        with_document(instance, model, RagOutcome::new(instance, requirement), None)
    }
}

/// Retrieves with probability one half, from a per-instance coin so results
/// do not depend on evaluation order.
#[derive(Debug, Clone, Copy)]
pub struct RandomRag {
    pub seed: u64,
}

impl RandomRag {
    pub fn coin(&self, question_id: usize) -> bool {
        substream(self.seed, &format!("random_rag/{question_id}")).gen_bool(0.5)
    }
}

impl RetrievalStrategy for RandomRag {
    fn name(&self) -> &str {
        "random_rag"
    }

    fn run(&self, instance: &QAInstance, model: &dyn AnswerModel) -> Result<RagOutcome> {
        let (_, token, requirement) = question_pass(instance, model)?;
        let outcome = RagOutcome::new(instance, requirement);
        if self.coin(instance.question_id) {
            with_document(instance, model, outcome, None)
        } else {
            Ok(outcome.answered(token, instance.gold_answer))
        }
    }
}

fn with_document(
    instance: &QAInstance,
    model: &dyn AnswerModel,
    mut outcome: RagOutcome,
    policy: Option<&SteeringPolicy>,
) -> Result<RagOutcome> {
    let doc = document(instance)?;
    let prompt = [doc, instance.question.as_slice()].concat();
    let (_, token) = model.respond(&prompt, policy)?;
    outcome.use_document(doc);
    outcome.steered = policy.is_some();
    Ok(outcome.answered(token, instance.gold_answer))
}

/// Knowledge judgment, then an optional quality filter, then optional
/// in-context steering of the with-document pass.
pub struct ExpertRag {
    pub name: String,
    pub cognizant: Box<dyn Judge>,
    pub quality: Option<Box<dyn Judge>>,
    pub incontext: Option<SteeringPolicy>,
}

impl RetrievalStrategy for ExpertRag {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&self, instance: &QAInstance, model: &dyn AnswerModel) -> Result<RagOutcome> {
        let (result, token, requirement) = question_pass(instance, model)?;
        let mut outcome = RagOutcome::new(instance, requirement);
        if self.cognizant.judge(instance, &result) {
            return Ok(outcome.answered(token, instance.gold_answer));
        }
        let doc = document(instance)?;
        let Some(quality) = &self.quality else {
            return with_document(instance, model, outcome, self.incontext.as_ref());
        };
        let prompt = [doc, instance.question.as_slice()].concat();
        let (doc_result, doc_token) = model.respond(&prompt, None)?;
        if !quality.judge(instance, &doc_result) {
            outcome.retrieved = true;
            outcome.quality_verdict = Some(QualityVerdict::Low);
            outcome.retrieved_but_discarded = doc.len();
            return Ok(outcome.answered(token, instance.gold_answer));
        }
        outcome.quality_verdict = Some(QualityVerdict::High);
        match &self.incontext {
            Some(policy) => with_document(instance, model, outcome, Some(policy)),
            None => {
                outcome.use_document(doc);
                Ok(outcome.answered(doc_token, instance.gold_answer))
            }
        }
    }
}

/// Name-keyed strategy table; iteration follows registration order.
#[derive(Default)]
pub struct StrategyRegistry {
    entries: Vec<Box<dyn RetrievalStrategy>>,
}

impl StrategyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the three fixed baselines.
    pub fn with_baselines(seed: u64) -> Self {
        let mut r = Self::new();
        r.register(Box::new(NoRag)).expect("fresh registry");
        r.register(Box::new(AlwaysRag)).expect("fresh registry");
        r.register(Box::new(RandomRag { seed })).expect("fresh registry");
        r
    }

    pub fn register(&mut self, strategy: Box<dyn RetrievalStrategy>) -> Result<()> {
        if self.get(strategy.name()).is_some() {
            return Err(invalid(format!("strategy `{}` registered twice", strategy.name())));
        }
        self.entries.push(strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn RetrievalStrategy> {
        self.entries.iter().find(|s| s.name() == name).map(|s| s.as_ref())
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|s| s.name()).collect()
    }

    /// Strategies for `names` in the requested order; unknown names are an error.
    pub fn select(&self, names: &[&str]) -> Result<Vec<&dyn RetrievalStrategy>> {
        names
            .iter()
            .map(|n| {
                self.get(n)
                    .ok_or_else(|| invalid(format!("unknown strategy `{n}` (known: {})", self.names().join(", "))))
            })
            .collect()
    }
}

pub fn run_strategy(
    strategy: &dyn RetrievalStrategy,
    instances: &[QAInstance],
    model: &dyn AnswerModel,
) -> Result<Vec<RagOutcome>> {
    instances.par_iter().map(|i| strategy.run(i, model)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy: f64,
    pub r_score: f64,
    pub r_score_strict: f64,
    pub r_token: usize,
    pub retrieved_but_discarded: usize,
}

pub fn compute_metrics(outcomes: &[RagOutcome]) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(invalid("no outcomes to score"));
    }
    let n = outcomes.len() as f64;
    let frac = |f: &dyn Fn(&RagOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    Ok(EvalReport {
        count: outcomes.len(),
        accuracy: frac(&|o| o.correct),
        r_score: frac(&|o| o.retrieved == o.requirement_label),
        r_score_strict: frac(&|o| o.documents_used == o.strict_requirement()),
        r_token: outcomes.iter().filter(|o| o.retrieved).map(|o| o.doc_token_count).sum(),
        retrieved_but_discarded: outcomes.iter().map(|o| o.retrieved_but_discarded).sum(),
    })
}

/// Balanced four-cell set: {answerable, unanswerable} x {gold, distracting}
/// documents, `size / 4` distinct questions per cell. Gold-document cells only
/// take questions the model gets right with the document, distracting cells
/// only ones it gets wrong, so every non-adaptive method scores one half.
/// Answerability is measured on the model, not read from the world.
pub fn build_balanceqa(
    world: &World,
    model: &dyn AnswerModel,
    candidates: &[usize],
    size: usize,
    seed: u64,
) -> Result<Vec<QAInstance>> {
    if size == 0 || !size.is_multiple_of(4) {
        return Err(invalid(format!(
            "balanced set size must be a positive multiple of 4, got {size}"
        )));
    }
    let per_cell = size / 4;
    let mut pool = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    pool.shuffle(&mut substream(seed, "balanceqa"));

    let checked: Vec<(usize, bool, bool)> = pool
        .par_iter()
        .map(|&id| {
            let q = world.question(id)?;
            let (_, bare) = model.respond(&world.question_only_prompt(q), None)?;
            let (_, gold) = model.respond(&world.with_document_prompt(q, DocQuality::Gold), None)?;
            Ok((id, bare == q.answer, gold == q.answer))
        })
        .collect::<Result<_>>()?;

    let mut cells: BTreeMap<(bool, DocQuality), Vec<usize>> = BTreeMap::new();
    for &(id, answerable, gold_ok) in &checked {
        // Fill the gold cell first; a question only ever lands in one cell.
        let gold_cell = cells.entry((answerable, DocQuality::Gold)).or_default();
        if gold_ok && gold_cell.len() < per_cell {
            gold_cell.push(id);
            continue;
        }
        let q = world.question(id)?;
        let (_, distracted) = model.respond(&world.with_document_prompt(q, DocQuality::Distracting), None)?;
        let cell = cells.entry((answerable, DocQuality::Distracting)).or_default();
        if distracted != q.answer && cell.len() < per_cell {
            cell.push(id);
        }
    }

    let mut instances = Vec::with_capacity(size);
    for answerable in [true, false] {
        for quality in [DocQuality::Gold, DocQuality::Distracting] {
            let ids = cells.remove(&(answerable, quality)).unwrap_or_default();
            if ids.len() < per_cell {
                return Err(invalid(format!(
                    "only {} {} questions with a usable {:?} document, need {per_cell}",
                    ids.len(),
                    if answerable { "answerable" } else { "unanswerable" },
                    quality
                )));
            }
            for id in ids {
                let mut inst = world.retrieval_instance(id, quality)?;
                inst.answerable_without_retrieval = answerable;
                instances.push(inst);
            }
        }
    }
    instances.sort_by_key(|i| i.question_id);
    Ok(instances)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub report: EvalReport,
}

pub const RESULTS_HEADER: &str = "dataset,method,acc,r_score,r_token,r_score_strict,retrieved_but_discarded";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{},{:.4},{}",
            r.dataset,
            r.method,
            r.report.accuracy,
            r.report.r_score,
            r.report.r_token,
            r.report.r_score_strict,
            r.report.retrieved_but_discarded
        );
    }
    out
}

/// Outcomes as JSON lines, one per instance.
pub fn outcomes_jsonl(outcomes: &[RagOutcome]) -> Result<String> {
    let mut out = String::new();
    for o in outcomes {
        out.push_str(&serde_json::to_string(o)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_outcomes_jsonl(text: &str) -> Result<Vec<RagOutcome>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::ModelConfig;
    use crate::synthworld::{generate_world, plant_model, WorldConfig};

    fn setup() -> (World, PlantedModel) {
        let cfg = WorldConfig {
            num_topics: 10,
            num_questions: 200,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg, 11).unwrap();
        let m = plant_model(&w, &ModelConfig::mixtral_like(w.vocab.size(), 11)).unwrap();
        (w, m)
    }

    fn outcome(correct: bool, retrieved: bool, requirement: bool) -> RagOutcome {
        RagOutcome {
            question_id: 0,
            retrieved,
            documents_used: retrieved,
            doc_token_count: if retrieved { 12 } else { 0 },
            retrieved_but_discarded: 0,
            quality_verdict: None,
            steered: false,
            answer: vec![7],
            correct,
            requirement_label: requirement,
            document_quality: DocQuality::Gold,
        }
    }

    #[test]
    fn perfect_metrics() {
        let o = vec![outcome(true, true, true), outcome(true, false, false)];
        let r = compute_metrics(&o).unwrap();
        assert_eq!((r.accuracy, r.r_score, r.r_token), (1.0, 1.0, 12));
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn baseline_definitions() {
        let (w, m) = setup();
        let inst = w.retrieval_instance(3, DocQuality::Gold).unwrap();
        let o = NoRag.run(&inst, &m).unwrap();
        assert!(!o.retrieved && o.doc_token_count == 0);
        let o = AlwaysRag.run(&inst, &m).unwrap();
        assert!(o.retrieved && o.doc_token_count == w.config.doc_len);
    }

    #[test]
    fn oracle_expert_rag_branches() {
        let (w, m) = setup();
        let policy = SteeringPolicy::default();
        let rag = ExpertRag {
            name: "oracle".into(),
            cognizant: Box::new(OracleJudge::Knowledge),
            quality: Some(Box::new(OracleJudge::Quality)),
            incontext: Some(policy),
        };
        let known = w.questions.iter().find(|q| q.answerable).unwrap().id;
        let o = rag
            .run(&w.retrieval_instance(known, DocQuality::Gold).unwrap(), &m)
            .unwrap();
        assert!(!o.retrieved && o.doc_token_count == 0 && o.correct);

        let unknown = w.questions.iter().find(|q| !q.answerable).unwrap().id;
        let o = rag
            .run(&w.retrieval_instance(unknown, DocQuality::Gold).unwrap(), &m)
            .unwrap();
        assert!(o.documents_used && o.steered);
        assert_eq!(o.quality_verdict, Some(QualityVerdict::High));

        let o = rag
            .run(&w.retrieval_instance(unknown, DocQuality::Distracting).unwrap(), &m)
            .unwrap();
        assert!(o.retrieved && !o.documents_used && o.doc_token_count == 0);
        assert_eq!(o.retrieved_but_discarded, w.config.doc_len);
    }

    #[test]
    fn missing_document_is_a_data_error() {
        let (w, m) = setup();
        let inst = w.retrieval_instance(0, DocQuality::None).unwrap();
        assert!(matches!(AlwaysRag.run(&inst, &m), Err(Error::Data(_))));
    }

    #[test]
    fn registry_lookup() {
        let mut r = StrategyRegistry::with_baselines(1);
        assert_eq!(r.names(), vec!["no_rag", "always_rag", "random_rag"]);
        assert!(r.register(Box::new(NoRag)).is_err());
        assert!(r.select(&["always_rag", "nope"]).is_err());
        assert_eq!(r.select(&["random_rag"]).unwrap()[0].name(), "random_rag");
    }

    #[test]
    fn balanceqa_sizes() {
        let (w, m) = setup();
        let ids: Vec<usize> = (0..200).collect();
        let set = build_balanceqa(&w, &m, &ids, 40, 0).unwrap();
        assert_eq!(set.len(), 40);
        let gold = set.iter().filter(|i| i.document_quality == DocQuality::Gold).count();
        let answerable = set.iter().filter(|i| i.answerable_without_retrieval).count();
        assert_eq!((gold, answerable), (20, 20));
        assert!(build_balanceqa(&w, &m, &ids, 42, 0).is_err());
        assert!(build_balanceqa(&w, &m, &ids[..8], 400, 0).is_err());
    }

    #[test]
    fn csv_shape() {
        let rows = vec![ResultRow {
            dataset: "synth".into(),
            method: "no_rag".into(),
            report: compute_metrics(&[outcome(true, false, false)]).unwrap(),
        }];
        let csv = results_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), RESULTS_HEADER);
        assert_eq!(csv.lines().nth(1).unwrap(), "synth,no_rag,1.0000,1.0000,0,1.0000,0");
    }
}
