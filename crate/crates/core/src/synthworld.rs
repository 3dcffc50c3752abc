//! Synthetic QA worlds and planted toy models.
//!
//! A world is a set of token-level questions over topics, some of which the
//! model "knows", each with a gold, a distracting and an unrelated document.
//! [`plant_model`] turns a seeded random network into one whose cognizant,
//! quality and in-context experts are known by construction, so inspection
//! results can be checked exactly.
//!
//! Planting reserves the last four hidden channels as feature markers:
//!
//! | channel   | set by                                   | read by                     |
//! |-----------|------------------------------------------|-----------------------------|
//! | `KNOWN`   | embeddings of known-topic tokens         | cognizant experts, layer 0  |
//! | `ANSWER`  | embeddings of answer tokens              | quality experts, layers 1.. |
//! | `DOC`     | embedding of the document-start token    | the general relay expert    |
//! | `RELAY`   | the general expert in layer 0 (copy of `DOC`) | in-context experts, layers 1.. |
//!
//! Experts never write marker channels and routers never read them, so a
//! marker survives the residual stream untouched; only the relay expert moves
//! `DOC` into `RELAY`. Inhibiting that general expert therefore hides document
//! presence from every later layer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ceai::{NEG_LABEL, POS_LABEL};
use crate::config::KvConfig;
use crate::error::{invalid, Error, Result};
use crate::moe::{self, BiasRule, ChannelRelay, ExpertId, ForwardResult, ModelConfig, MoeModel, RoutingOverlay};
use crate::rng::substream;
use crate::steering::SteeringPolicy;
use crate::trace::{capture, TraceSet};

pub const WORLD_VERSION: u32 = 1;

/// Smallest separation bias for which inspection recovers every planted set
/// exactly on the default world and model (seed 0, 500 traces per side).
/// Measured by sweeping β in steps of 0.25: 7.25 still misses an in-context
/// expert, every step from 7.5 up recovers all three roles.
pub const PLANTED_BETA_MIN: f64 = 7.5;

pub const DEFAULT_SEPARATION_BIAS: f64 = 10.0;

pub const PAD: u32 = 0;
pub const CUE: u32 = 1;
pub const DOC_START: u32 = 2;

const RESERVED_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerChannels {
    pub known: usize,
    pub answer: usize,
    pub doc: usize,
    pub relay: usize,
}

impl MarkerChannels {
    pub fn for_hidden_dim(d: usize) -> Self {
        Self {
            known: d - 4,
            answer: d - 3,
            doc: d - 2,
            relay: d - 1,
        }
    }

    pub fn all(&self) -> [usize; 4] {
        [self.known, self.answer, self.doc, self.relay]
    }
}

/// Shape of the model the world's planted experts live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantShape {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub shared_experts: usize,
}

impl From<&ModelConfig> for PlantShape {
    fn from(c: &ModelConfig) -> Self {
        Self {
            num_layers: c.num_layers,
            experts_per_layer: c.experts_per_layer,
            top_k: c.top_k,
            shared_experts: c.shared_experts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_topics: usize,
    pub num_questions: usize,
    pub known_fraction: f64,
    pub doc_len: usize,
    pub answer_vocab: usize,
    pub filler_vocab: usize,
    /// Router-logit bias added to planted experts (β).
    pub separation_bias: f64,
    /// Final-layer in-context gate mass needed to use a gold document (τ).
    pub utilization_threshold: f64,
    pub shape: PlantShape,
}

pub const WORLD_CONFIG_KEYS: &[&str] = &[
    "num_topics",
    "num_questions",
    "known_fraction",
    "doc_len",
    "answer_vocab",
    "filler_vocab",
    "separation_bias",
    "utilization_threshold",
];

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_topics: 40,
            num_questions: 2000,
            known_fraction: 0.5,
            doc_len: 12,
            answer_vocab: 64,
            filler_vocab: 256,
            separation_bias: DEFAULT_SEPARATION_BIAS,
            utilization_threshold: 0.3,
            shape: PlantShape::from(&ModelConfig::mixtral_like(1, 0)),
        }
    }
}

impl WorldConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            shape: PlantShape::from(model),
            ..Self::default()
        }
    }

    pub fn with_overrides(mut self, kv: &KvConfig) -> Result<Self> {
        self.num_topics = kv.get_or("num_topics", self.num_topics)?;
        self.num_questions = kv.get_or("num_questions", self.num_questions)?;
        self.known_fraction = kv.get_or("known_fraction", self.known_fraction)?;
        self.doc_len = kv.get_or("doc_len", self.doc_len)?;
        self.answer_vocab = kv.get_or("answer_vocab", self.answer_vocab)?;
        self.filler_vocab = kv.get_or("filler_vocab", self.filler_vocab)?;
        self.separation_bias = kv.get_or("separation_bias", self.separation_bias)?;
        self.utilization_threshold = kv.get_or("utilization_threshold", self.utilization_threshold)?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(invalid("a world needs at least 2 topics"));
        }
        if self.num_questions == 0 {
            return Err(invalid("a world needs at least one question"));
        }
        if !(self.known_fraction > 0.0 && self.known_fraction < 1.0) {
            return Err(invalid("known_fraction must lie in (0, 1)"));
        }
        if self.answer_vocab == 0 || self.filler_vocab == 0 {
            return Err(invalid("answer and filler vocabularies must be non-empty"));
        }
        if self.doc_len < 4 {
            return Err(invalid("doc_len must be at least 4"));
        }
        if !(self.separation_bias >= 0.0 && self.separation_bias.is_finite()) {
            return Err(invalid("separation_bias must be a non-negative number"));
        }
        Ok(())
    }
}

/// Token id ranges. Order: pad, cue, document start, topics, attributes,
/// answers, per-topic distractors, fillers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_topics: usize,
    pub num_attrs: usize,
    pub num_answers: usize,
    pub num_fillers: usize,
}

impl Vocab {
    pub fn topic(&self, t: usize) -> u32 {
        (3 + t) as u32
    }

    pub fn attr(&self, a: usize) -> u32 {
        (3 + self.num_topics + a) as u32
    }

    pub fn answer(&self, a: usize) -> u32 {
        (3 + self.num_topics + self.num_attrs + a) as u32
    }

    pub fn distractor(&self, t: usize) -> u32 {
        (3 + self.num_topics + self.num_attrs + self.num_answers + t) as u32
    }

    pub fn filler(&self, f: usize) -> u32 {
        (3 + 2 * self.num_topics + self.num_attrs + self.num_answers + f) as u32
    }

    pub fn size(&self) -> usize {
        3 + 2 * self.num_topics + self.num_attrs + self.num_answers + self.num_fillers
    }

    pub fn is_answer(&self, token: u32) -> bool {
        let lo = self.answer(0);
        token >= lo && token < lo + self.num_answers as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocQuality {
    None,
    Gold,
    Distracting,
    Unrelated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Documents {
    pub gold: Vec<u32>,
    pub distracting: Vec<u32>,
    pub unrelated: Vec<u32>,
}

impl Documents {
    pub fn get(&self, quality: DocQuality) -> Option<&[u32]> {
        match quality {
            DocQuality::None => None,
            DocQuality::Gold => Some(&self.gold),
            DocQuality::Distracting => Some(&self.distracting),
            DocQuality::Unrelated => Some(&self.unrelated),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: usize,
    pub topic: usize,
    pub attr: usize,
    pub answer: u32,
    pub distractor: u32,
    pub answerable: bool,
    pub documents: Documents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    CognizantPos,
    CognizantNeg,
    QualityPos,
    QualityNeg,
    IncontextPos,
    IncontextNeg,
    /// Always-active relay expert; not one of the contrastive roles.
    General,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::CognizantPos => "cognizant_pos",
            Role::CognizantNeg => "cognizant_neg",
            Role::QualityPos => "quality_pos",
            Role::QualityNeg => "quality_neg",
            Role::IncontextPos => "incontext_pos",
            Role::IncontextNeg => "incontext_neg",
            Role::General => "general",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub world_version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub known_topics: BTreeSet<usize>,
    pub questions: Vec<Question>,
    pub planted: BTreeMap<Role, BTreeSet<ExpertId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub question_id: usize,
    /// Question tokens followed by the answer cue.
    pub question: Vec<u32>,
    /// The prompt the instance is evaluated on as built.
    pub prompt: Vec<u32>,
    pub gold_answer: u32,
    pub answerable_without_retrieval: bool,
    pub document_quality: DocQuality,
    /// Document a retriever would return for this instance.
    pub document: Option<Vec<u32>>,
}

impl QAInstance {
    pub fn with_document_prompt(&self) -> Option<Vec<u32>> {
        self.document.as_ref().map(|d| [d.as_slice(), &self.question].concat())
    }
}

impl World {
    pub fn question(&self, id: usize) -> Result<&Question> {
        self.questions
            .get(id)
            .ok_or_else(|| invalid(format!("no question with id {id}")))
    }

    pub fn question_tokens(&self, q: &Question) -> Vec<u32> {
        vec![self.vocab.topic(q.topic), self.vocab.attr(q.attr), CUE]
    }

    /// Question padded on the left to the with-document length.
    pub fn question_only_prompt(&self, q: &Question) -> Vec<u32> {
        let mut p = vec![PAD; self.config.doc_len];
        p.extend(self.question_tokens(q));
        p
    }

    pub fn with_document_prompt(&self, q: &Question, quality: DocQuality) -> Vec<u32> {
        match q.documents.get(quality) {
            None => self.question_only_prompt(q),
            Some(doc) => [doc, self.question_tokens(q).as_slice()].concat(),
        }
    }

    /// Instance whose prompt carries the given document (or only padding).
    pub fn instance(&self, id: usize, quality: DocQuality) -> Result<QAInstance> {
        let q = self.question(id)?;
        Ok(QAInstance {
            question_id: id,
            question: self.question_tokens(q),
            prompt: self.with_document_prompt(q, quality),
            gold_answer: q.answer,
            answerable_without_retrieval: q.answerable,
            document_quality: quality,
            document: q.documents.get(quality).map(<[u32]>::to_vec),
        })
    }

    /// Retrieval instance: question-only prompt with `quality` as the
    /// retrievable document.
    pub fn retrieval_instance(&self, id: usize, quality: DocQuality) -> Result<QAInstance> {
        let q = self.question(id)?;
        Ok(QAInstance {
            prompt: self.question_only_prompt(q),
            ..self.instance(id, quality)?
        })
    }

    /// First `n_train` question ids for inspection, the rest for evaluation.
    pub fn split(&self, n_train: usize) -> (Vec<usize>, Vec<usize>) {
        let n = n_train.min(self.questions.len());
        ((0..n).collect(), (n..self.questions.len()).collect())
    }

    /// First `per_class` answerable and first `per_class` unanswerable ids
    /// among `ids`, in id order.
    pub fn balanced_ids(&self, ids: &[usize], per_class: usize) -> Result<Vec<usize>> {
        let pick = |answerable: bool| -> Vec<usize> {
            ids.iter()
                .copied()
                .filter(|&i| self.questions[i].answerable == answerable)
                .take(per_class)
                .collect()
        };
        let (a, u) = (pick(true), pick(false));
        if a.len() < per_class || u.len() < per_class {
            return Err(invalid(format!(
                "need {per_class} questions per class, found {} answerable and {} unanswerable",
                a.len(),
                u.len()
            )));
        }
        let mut out: Vec<usize> = a.into_iter().chain(u).collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn planted_set(&self, role: Role) -> BTreeSet<ExpertId> {
        self.planted.get(&role).cloned().unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read world {}: {e}", path.display())))?;
        let world: World = serde_json::from_str(&text)?;
        if world.world_version != WORLD_VERSION {
            return Err(Error::Data(format!(
                "unsupported world_version {}",
                world.world_version
            )));
        }
        Ok(world)
    }
}

/// Assigns planted roles to experts.
///
/// Layer 0 holds the general relay expert plus `top_k - 1` cognizant pairs;
/// every later layer holds `top_k` pairs alternating in-context and quality.
/// Within a pair exactly one expert is boosted for any input, so at most
/// `top_k` experts per layer are ever boosted. Expert indices are drawn from a
/// seeded permutation of each layer's routed experts.
pub fn plant_layout(shape: &PlantShape, seed: u64) -> Result<BTreeMap<Role, BTreeSet<ExpertId>>> {
    let routed = shape.experts_per_layer.saturating_sub(shape.shared_experts);
    let k = shape.top_k;
    if shape.num_layers < 2 || k < 2 || routed < 2 * k {
        return Err(invalid(format!(
            "planting needs >= 2 layers, top_k >= 2 and >= {} routed experts per layer",
            2 * k
        )));
    }
    let mut planted: BTreeMap<Role, BTreeSet<ExpertId>> = BTreeMap::new();
    let mut rng = substream(seed, "plant/layout");
    for layer in 0..shape.num_layers {
        let mut pool: Vec<usize> = (shape.shared_experts..shape.experts_per_layer).collect();
        pool.shuffle(&mut rng);
        let mut next = pool.into_iter().map(|i| ExpertId::new(layer, i));
        let mut put = |role: Role, id: ExpertId| {
            planted.entry(role).or_default().insert(id);
        };
        if layer == 0 {
            put(Role::General, next.next().unwrap());
            for _ in 1..k {
                put(Role::CognizantPos, next.next().unwrap());
                put(Role::CognizantNeg, next.next().unwrap());
            }
        } else {
            for slot in 0..k {
                let (pos, neg) = if slot % 2 == 0 {
                    (Role::IncontextPos, Role::IncontextNeg)
                } else {
                    (Role::QualityPos, Role::QualityNeg)
                };
                put(pos, next.next().unwrap());
                put(neg, next.next().unwrap());
            }
        }
    }
    Ok(planted)
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let t = config.num_topics;
    let n_known_topics = ((config.known_fraction * t as f64).round() as usize).clamp(1, t - 1);
    let mut topics: Vec<usize> = (0..t).collect();
    topics.shuffle(&mut substream(seed, "world/topics"));
    let known_topics: BTreeSet<usize> = topics[..n_known_topics].iter().copied().collect();
    let unknown_topics: Vec<usize> = topics[n_known_topics..].to_vec();
    let known_list: Vec<usize> = known_topics.iter().copied().collect();

    let n_answerable = (config.known_fraction * config.num_questions as f64).round() as usize;
    let n_unanswerable = config.num_questions - n_answerable;
    let num_attrs = n_answerable
        .div_ceil(known_list.len())
        .max(n_unanswerable.div_ceil(unknown_topics.len()))
        .max(1);
    let vocab = Vocab {
        num_topics: t,
        num_attrs,
        num_answers: config.answer_vocab,
        num_fillers: config.filler_vocab,
    };

    // (topic, attr, answerable) before shuffling.
    let mut slots: Vec<(usize, usize, bool)> = Vec::with_capacity(config.num_questions);
    for j in 0..n_answerable {
        slots.push((known_list[j % known_list.len()], j / known_list.len(), true));
    }
    for j in 0..n_unanswerable {
        slots.push((
            unknown_topics[j % unknown_topics.len()],
            j / unknown_topics.len(),
            false,
        ));
    }
    slots.shuffle(&mut substream(seed, "world/questions"));

    let mut answer_rng = substream(seed, "world/answers");
    let mut doc_rng = substream(seed, "world/documents");
    let filler = |rng: &mut rand_chacha::ChaCha8Rng| vocab.filler(rng.gen_range(0..config.filler_vocab));
    let pad_doc = |mut doc: Vec<u32>, rng: &mut rand_chacha::ChaCha8Rng| {
        while doc.len() < config.doc_len {
            doc.push(filler(rng));
        }
        doc
    };

    let questions = slots
        .into_iter()
        .enumerate()
        .map(|(id, (topic, attr, answerable))| {
            let answer = vocab.answer(answer_rng.gen_range(0..config.answer_vocab));
            let mut other = doc_rng.gen_range(0..t - 1);
            if other >= topic {
                other += 1;
            }
            let other_attr = doc_rng.gen_range(0..num_attrs);
            let gold = pad_doc(
                vec![DOC_START, vocab.topic(topic), vocab.attr(attr), answer],
                &mut doc_rng,
            );
            let distracting = pad_doc(vec![DOC_START, vocab.topic(topic), vocab.attr(attr)], &mut doc_rng);
            let unrelated = pad_doc(
                vec![DOC_START, vocab.topic(other), vocab.attr(other_attr)],
                &mut doc_rng,
            );
            Question {
                id,
                topic,
                attr,
                answer,
                distractor: vocab.distractor(topic),
                answerable,
                documents: Documents {
                    gold,
                    distracting,
                    unrelated,
                },
            }
        })
        .collect();

    Ok(World {
        world_version: WORLD_VERSION,
        seed,
        config: config.clone(),
        vocab,
        known_topics,
        questions,
        planted: plant_layout(&config.shape, seed)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Facts {
    topic: u32,
    answer: u32,
    distractor: u32,
    known: bool,
}

/// Rule-based answer head of a planted model.
///
/// Without a document the model answers iff the topic is known. A gold
/// document yields the answer when the topic is known or the final layer puts
/// at least `threshold` gate mass on its in-context experts. A distracting
/// document misleads the model into the topic distractor. An unrelated
/// document is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerRule {
    facts: HashMap<(u32, u32), Facts>,
    final_incontext: Vec<ExpertId>,
    threshold: f64,
}

impl AnswerRule {
    pub fn answer(&self, prompt: &[u32], result: &ForwardResult) -> Option<u32> {
        let n = prompt.len();
        if n < 3 {
            return None;
        }
        let facts = self.facts.get(&(prompt[n - 3], prompt[n - 2]))?;
        let body = &prompt[..n - 3];
        if !body.contains(&DOC_START) {
            return Some(if facts.known { facts.answer } else { facts.distractor });
        }
        let correct = if body.contains(&facts.answer) {
            facts.known || self.utilization(result) >= self.threshold
        } else if body.contains(&facts.topic) {
            false
        } else {
            facts.known
        };
        Some(if correct { facts.answer } else { facts.distractor })
    }

    /// Final-layer gate mass on the planted in-context experts.
    pub fn utilization(&self, result: &ForwardResult) -> f64 {
        result.gates.last().map_or(0.0, |g| g.mass_on(&self.final_incontext))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    pub model: MoeModel,
    pub rule: AnswerRule,
}

impl PlantedModel {
    /// Forward pass whose readout logits put the rule's answer on top.
    pub fn forward(&self, prompt: &[u32], policy: Option<&SteeringPolicy>) -> Result<ForwardResult> {
        let mut result = moe::forward(prompt, &self.model, policy)?;
        if let Some(token) = self.rule.answer(prompt, &result) {
            let top = result.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            result.logits[token as usize] = top + 1.0;
        }
        Ok(result)
    }

    pub fn answer(&self, prompt: &[u32], policy: Option<&SteeringPolicy>) -> Result<(ForwardResult, u32)> {
        let result = self.forward(prompt, policy)?;
        let token = result.argmax_token();
        Ok((result, token))
    }
}

pub fn plant_model(world: &World, model_config: &ModelConfig) -> Result<PlantedModel> {
    if PlantShape::from(model_config) != world.config.shape {
        return Err(invalid("model shape differs from the world's planted shape"));
    }
    if model_config.vocab_size < world.vocab.size() {
        return Err(invalid(format!(
            "model vocabulary {} smaller than world vocabulary {}",
            model_config.vocab_size,
            world.vocab.size()
        )));
    }
    if model_config.hidden_dim < RESERVED_CHANNELS + 1 {
        return Err(invalid("hidden_dim too small for planting marker channels"));
    }
    let mut seen = BTreeSet::new();
    for set in world.planted.values() {
        for e in set {
            if e.layer >= model_config.num_layers
                || e.index >= model_config.experts_per_layer
                || e.index < model_config.shared_experts
            {
                return Err(invalid(format!("planted expert {e} outside the routed experts")));
            }
            if !seen.insert(*e) {
                return Err(invalid(format!("planted expert {e} assigned to two roles")));
            }
        }
    }

    let mut model = MoeModel::random(*model_config)?;
    let beta = world.config.separation_bias;
    let last_layer = model_config.num_layers - 1;
    let facts = world
        .questions
        .iter()
        .map(|q| {
            (
                (world.vocab.topic(q.topic), world.vocab.attr(q.attr)),
                Facts {
                    topic: world.vocab.topic(q.topic),
                    answer: q.answer,
                    distractor: q.distractor,
                    known: q.answerable,
                },
            )
        })
        .collect();
    let rule = AnswerRule {
        facts,
        final_incontext: world
            .planted_set(Role::IncontextPos)
            .into_iter()
            .filter(|e| e.layer == last_layer)
            .collect(),
        threshold: world.config.utilization_threshold,
    };
    if beta == 0.0 {
        return Ok(PlantedModel { model, rule });
    }

    let ch = MarkerChannels::for_hidden_dim(model_config.hidden_dim);
    let d = model_config.hidden_dim;
    for t in 0..model_config.vocab_size as u32 {
        let row = model.embedding_row_mut(t);
        for c in ch.all() {
            row[c] = 0.0;
        }
    }
    for &topic in &world.known_topics {
        model.embedding_row_mut(world.vocab.topic(topic))[ch.known] = 1.0;
    }
    for a in 0..world.vocab.num_answers {
        model.embedding_row_mut(world.vocab.answer(a))[ch.answer] = 1.0;
    }
    model.embedding_row_mut(DOC_START)[ch.doc] = 1.0;
    for layer in &mut model.layers {
        for row in layer.router.chunks_mut(d) {
            for c in ch.all() {
                row[c] = 0.0;
            }
        }
    }

    let mut overlay = RoutingOverlay {
        protected_channels: ch.all().to_vec(),
        ..RoutingOverlay::default()
    };
    let mut add = |role: Role, channel: Option<usize>, when_present: bool| {
        for e in world.planted_set(role) {
            overlay.bias_rules.push(BiasRule {
                expert: e,
                channel,
                when_present,
                bias: beta,
            });
        }
    };
    add(Role::General, None, true);
    add(Role::CognizantPos, Some(ch.known), true);
    add(Role::CognizantNeg, Some(ch.known), false);
    add(Role::QualityPos, Some(ch.answer), true);
    add(Role::QualityNeg, Some(ch.answer), false);
    add(Role::IncontextPos, Some(ch.relay), true);
    add(Role::IncontextNeg, Some(ch.relay), false);
    for e in world.planted_set(Role::General) {
        overlay.relays.push(ChannelRelay {
            expert: e,
            from: ch.doc,
            to: ch.relay,
            gain: 1.0,
        });
    }
    model.overlay = overlay;
    calibrate_utilization(world, &mut model, &rule, &ch)?;
    Ok(PlantedModel { model, rule })
}

/// Shifts the final-layer in-context bias so that exactly half of the
/// unanswerable questions reach the utilization threshold with their gold
/// document. Without this the share is set by an arbitrary seed-dependent
/// router offset and is often all-or-nothing.
fn calibrate_utilization(world: &World, model: &mut MoeModel, rule: &AnswerRule, ch: &MarkerChannels) -> Result<()> {
    let last = model.config.num_layers - 1;
    let (top_k, shared) = (model.config.top_k, model.config.shared_experts);
    let experts = &rule.final_incontext;
    let prompts: Vec<Vec<u32>> = world
        .questions
        .iter()
        .filter(|q| !q.answerable)
        .map(|q| world.with_document_prompt(q, DocQuality::Gold))
        .collect();
    let frozen = &*model;
    // Offset at which each prompt's utilization crosses the threshold; the
    // final-layer input does not depend on it.
    let mut crossings: Vec<f64> = prompts
        .par_iter()
        .map(|p| {
            let result = moe::forward(p, frozen, None)?;
            let logits = frozen.router_logits(&result.hidden[last - 1], last)?;
            let util = |c: f64| {
                let mut shifted = logits.clone();
                for e in experts {
                    shifted[e.index] += c;
                }
                moe::top_k_gates(&shifted, last, top_k, shared).mass_on(experts)
            };
            let (mut lo, mut hi) = (-64.0, 64.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if util(mid) >= rule.threshold {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi)
        })
        .collect::<Result<_>>()?;
    if crossings.is_empty() || experts.is_empty() {
        return Ok(());
    }
    crossings.sort_by(f64::total_cmp);
    let n = crossings.len();
    // Midway between the two central crossings, so exactly half clear it.
    let offset = if n.is_multiple_of(2) {
        0.5 * (crossings[n / 2 - 1] + crossings[n / 2])
    } else {
        crossings[n / 2]
    };
    for e in experts {
        model.overlay.bias_rules.push(BiasRule {
            expert: *e,
            channel: Some(ch.relay),
            when_present: true,
            bias: offset,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Cognizant,
    QualityDistracting,
    QualityUnrelated,
    Incontext,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Cognizant,
        Scenario::QualityDistracting,
        Scenario::QualityUnrelated,
        Scenario::Incontext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Cognizant => "cognizant",
            Scenario::QualityDistracting => "quality_distracting",
            Scenario::QualityUnrelated => "quality_unrelated",
            Scenario::Incontext => "incontext",
        }
    }

    pub fn roles(self) -> (Role, Role) {
        match self {
            Scenario::Cognizant => (Role::CognizantPos, Role::CognizantNeg),
            Scenario::QualityDistracting | Scenario::QualityUnrelated => (Role::QualityPos, Role::QualityNeg),
            Scenario::Incontext => (Role::IncontextPos, Role::IncontextNeg),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown scenario `{s}`")))
    }
}

/// Document quality used for the `i`-th with-document prompt of the
/// in-context contrast: gold, distracting and unrelated in rotation, so that
/// answer presence does not line up with document presence.
fn incontext_quality(question_id: usize) -> DocQuality {
    match question_id % 3 {
        0 => DocQuality::Gold,
        1 => DocQuality::Distracting,
        _ => DocQuality::Unrelated,
    }
}

/// Contrastive trace sets over every question of the world.
pub fn build_contrastive_sets(world: &World, model: &PlantedModel, scenario: Scenario) -> Result<(TraceSet, TraceSet)> {
    let ids: Vec<usize> = (0..world.questions.len()).collect();
    build_contrastive_sets_for(world, model, scenario, &ids, None)
}

/// Contrastive trace sets over the given questions. Records are labelled
/// `pos` / `neg` and ordered by question id.
pub fn build_contrastive_sets_for(
    world: &World,
    model: &PlantedModel,
    scenario: Scenario,
    ids: &[usize],
    policy: Option<&SteeringPolicy>,
) -> Result<(TraceSet, TraceSet)> {
    // (prompt id, prompt, fixed side); `None` side means decided by correctness.
    let mut jobs: Vec<(String, Vec<u32>, Option<bool>, u32)> = Vec::new();
    for &id in ids {
        let q = world.question(id)?;
        match scenario {
            Scenario::Cognizant => {
                jobs.push((format!("q{id}"), world.question_only_prompt(q), None, q.answer));
            }
            Scenario::QualityDistracting | Scenario::QualityUnrelated => {
                let low = if scenario == Scenario::QualityDistracting {
                    DocQuality::Distracting
                } else {
                    DocQuality::Unrelated
                };
                jobs.push((
                    format!("q{id}:gold"),
                    world.with_document_prompt(q, DocQuality::Gold),
                    Some(true),
                    q.answer,
                ));
                jobs.push((
                    format!("q{id}:{}", quality_name(low)),
                    world.with_document_prompt(q, low),
                    Some(false),
                    q.answer,
                ));
            }
            Scenario::Incontext => {
                let quality = incontext_quality(id);
                jobs.push((
                    format!("q{id}:{}", quality_name(quality)),
                    world.with_document_prompt(q, quality),
                    Some(true),
                    q.answer,
                ));
                jobs.push((
                    format!("q{id}:none"),
                    world.question_only_prompt(q),
                    Some(false),
                    q.answer,
                ));
            }
        }
    }

    let traced: Vec<(bool, crate::trace::ActivationRecord)> = jobs
        .par_iter()
        .map(|(pid, prompt, side, gold)| {
            let (result, answer) = model.answer(prompt, policy)?;
            let positive = side.unwrap_or(answer == *gold);
            let label = if positive { POS_LABEL } else { NEG_LABEL };
            Ok((positive, capture(&result, pid, Some(label))))
        })
        .collect::<Result<_>>()?;

    let shape = (model.model.config.num_layers, model.model.config.experts_per_layer);
    let name = scenario.name();
    let mut pos = TraceSet::new(format!("synth/{name}/{POS_LABEL}"), shape);
    let mut neg = TraceSet::new(format!("synth/{name}/{NEG_LABEL}"), shape);
    for (positive, record) in traced {
        if positive {
            pos.records.push(record);
        } else {
            neg.records.push(record);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid(format!(
            "{name} contrast has an empty side ({} pos, {} neg)",
            pos.len(),
            neg.len()
        )));
    }
    Ok((pos, neg))
}

pub fn quality_name(q: DocQuality) -> &'static str {
    match q {
        DocQuality::None => "none",
        DocQuality::Gold => "gold",
        DocQuality::Distracting => "distracting",
        DocQuality::Unrelated => "unrelated",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> WorldConfig {
        WorldConfig {
            num_topics: 10,
            num_questions: 100,
            ..WorldConfig::default()
        }
    }

    fn model_for(world: &World, seed: u64) -> ModelConfig {
        ModelConfig::mixtral_like(world.vocab.size(), seed)
    }

    #[test]
    fn exact_answerable_count() {
        let w = generate_world(&small_config(), 3).unwrap();
        assert_eq!(w.questions.iter().filter(|q| q.answerable).count(), 50);
        for q in &w.questions {
            assert_eq!(q.answerable, w.known_topics.contains(&q.topic));
        }
    }

    #[test]
    fn deterministic_generation() {
        let a = generate_world(&small_config(), 9).unwrap();
        let b = generate_world(&small_config(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&small_config(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn document_construction() {
        let w = generate_world(&small_config(), 1).unwrap();
        for q in &w.questions {
            let topic = w.vocab.topic(q.topic);
            assert!(q.documents.gold.contains(&q.answer));
            assert!(q.documents.distracting.contains(&topic));
            assert!(!q.documents.distracting.iter().any(|t| w.vocab.is_answer(*t)));
            assert!(!q.documents.unrelated.contains(&topic));
            assert!(!q.documents.unrelated.contains(&q.answer));
            assert_eq!(q.documents.gold.len(), w.config.doc_len);
            assert_eq!(
                w.question_only_prompt(q).len(),
                w.with_document_prompt(q, DocQuality::Gold).len()
            );
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let bad = WorldConfig {
            num_topics: 1,
            ..small_config()
        };
        assert!(generate_world(&bad, 0).is_err());
        let bad = WorldConfig {
            num_topics: 0,
            ..small_config()
        };
        assert!(generate_world(&bad, 0).is_err());
        let bad = WorldConfig {
            known_fraction: 1.0,
            ..small_config()
        };
        assert!(generate_world(&bad, 0).is_err());
        let bad = WorldConfig {
            filler_vocab: 0,
            ..small_config()
        };
        assert!(generate_world(&bad, 0).is_err());
    }

    #[test]
    fn layout_disjoint_and_sized() {
        let w = generate_world(&small_config(), 0).unwrap();
        let mut all = BTreeSet::new();
        for set in w.planted.values() {
            for e in set {
                assert!(all.insert(*e));
            }
        }
        assert_eq!(w.planted_set(Role::General).len(), 1);
        assert_eq!(w.planted_set(Role::CognizantPos).len(), 1);
        assert_eq!(w.planted_set(Role::IncontextPos).len(), 3);
        assert_eq!(w.planted_set(Role::QualityNeg).len(), 3);
    }

    #[test]
    fn zero_bias_is_the_random_model() {
        let cfg = WorldConfig {
            separation_bias: 0.0,
            ..small_config()
        };
        let w = generate_world(&cfg, 2).unwrap();
        let mc = model_for(&w, 5);
        let planted = plant_model(&w, &mc).unwrap();
        assert_eq!(planted.model, MoeModel::random(mc).unwrap());
        let q = &w.questions[0];
        let prompt = w.with_document_prompt(q, DocQuality::Gold);
        let a = planted.forward(&prompt, None).unwrap();
        let b = moe::forward(&prompt, &MoeModel::random(mc).unwrap(), None).unwrap();
        assert_eq!(a.gates, b.gates);
        assert_eq!(a.hidden, b.hidden);
    }

    #[test]
    fn question_only_answers_follow_knowledge() {
        let w = generate_world(&small_config(), 4).unwrap();
        let m = plant_model(&w, &model_for(&w, 4)).unwrap();
        for q in &w.questions {
            let (_, ans) = m.answer(&w.question_only_prompt(q), None).unwrap();
            assert_eq!(ans == q.answer, q.answerable, "question {}", q.id);
        }
    }

    #[test]
    fn documents_drive_answers() {
        let w = generate_world(&small_config(), 4).unwrap();
        let m = plant_model(&w, &model_for(&w, 4)).unwrap();
        for q in &w.questions {
            let (_, ans) = m
                .answer(&w.with_document_prompt(q, DocQuality::Distracting), None)
                .unwrap();
            assert_eq!(ans, q.distractor);
            let (_, ans) = m
                .answer(&w.with_document_prompt(q, DocQuality::Unrelated), None)
                .unwrap();
            assert_eq!(ans == q.answer, q.answerable);
        }
    }

    #[test]
    fn overlapping_plant_rejected() {
        let mut w = generate_world(&small_config(), 0).unwrap();
        let g = w.planted_set(Role::General);
        w.planted.insert(Role::CognizantPos, g);
        assert!(plant_model(&w, &model_for(&w, 0)).is_err());
        let w = generate_world(&small_config(), 0).unwrap();
        let mut mc = model_for(&w, 0);
        mc.vocab_size = 5;
        assert!(plant_model(&w, &mc).is_err());
    }

    #[test]
    fn contrast_sizes() {
        let w = generate_world(&small_config(), 6).unwrap();
        let m = plant_model(&w, &model_for(&w, 6)).unwrap();
        let (p, n) = build_contrastive_sets(&w, &m, Scenario::Cognizant).unwrap();
        assert_eq!(p.len() + n.len(), 100);
        assert_eq!(p.len(), 50);
        let (p, n) = build_contrastive_sets(&w, &m, Scenario::QualityUnrelated).unwrap();
        assert_eq!((p.len(), n.len()), (100, 100));
        let (p, n) = build_contrastive_sets(&w, &m, Scenario::Incontext).unwrap();
        assert_eq!((p.len(), n.len()), (100, 100));
        p.validate().unwrap();
    }

    #[test]
    fn all_known_world_has_no_cognizant_negatives() {
        let w = generate_world(&small_config(), 6).unwrap();
        let m = plant_model(&w, &model_for(&w, 6)).unwrap();
        let answerable: Vec<usize> = w.questions.iter().filter(|q| q.answerable).map(|q| q.id).collect();
        let err = build_contrastive_sets_for(&w, &m, Scenario::Cognizant, &answerable, None);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn world_json_roundtrip() {
        let w = generate_world(&small_config(), 8).unwrap();
        let json = w.to_json().unwrap();
        assert!(json.starts_with("{\"world_version\":1"));
        let back: World = serde_json::from_str(&json).unwrap();
        assert_eq!(back, w);
    }
}
