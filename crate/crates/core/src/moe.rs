//! Deterministic toy mixture-of-experts network.
//!
//! The network mean-pools the prompt's token embeddings into a single
//! last-position state, then runs `num_layers` residual MoE blocks on it. Each
//! block routes the state through a linear router, keeps the top-k experts and
//! mixes their outputs with softmax gates renormalised over the kept set.
//! There is no attention: everything downstream only looks at router behaviour
//! at the last input position.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{invalid, Error, Result};
use crate::rng::{substream, uniform_f32};
use crate::steering::{self, SteeringPolicy};

/// Extra weight given to the final token's embedding in the pooled state.
pub const FINAL_POSITION_GAIN: f64 = 0.5;

/// Half-width of the uniform router weight distribution.
pub const ROUTER_INIT_SCALE: f32 = 1.0;

pub const EXPERT_BIAS_SCALE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// Total experts per layer, shared experts included.
    pub experts_per_layer: usize,
    /// Routed experts activated per layer, on top of any shared experts.
    pub top_k: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Experts `0..shared_experts` of every layer are always active.
    #[serde(default)]
    pub shared_experts: usize,
}

pub const MODEL_CONFIG_KEYS: &[&str] = &[
    "num_layers",
    "experts_per_layer",
    "top_k",
    "hidden_dim",
    "vocab_size",
    "seed",
    "shared_experts",
];

impl ModelConfig {
    /// 8 experts per layer, 2 active: the Mixtral routing shape at toy depth.
    pub fn mixtral_like(vocab_size: usize, seed: u64) -> Self {
        Self {
            num_layers: 4,
            experts_per_layer: 8,
            top_k: 2,
            hidden_dim: 32,
            vocab_size,
            seed,
            shared_experts: 0,
        }
    }

    /// 60 routed experts with 4 active plus 4 always-active shared experts.
    pub fn qwen_like(vocab_size: usize, seed: u64) -> Self {
        Self {
            num_layers: 4,
            experts_per_layer: 64,
            top_k: 4,
            hidden_dim: 32,
            vocab_size,
            seed,
            shared_experts: 4,
        }
    }

    pub fn profile(name: &str, vocab_size: usize, seed: u64) -> Result<Self> {
        match name {
            "mixtral" | "default" => Ok(Self::mixtral_like(vocab_size, seed)),
            "qwen" => Ok(Self::qwen_like(vocab_size, seed)),
            other => Err(invalid(format!("unknown model profile `{other}`"))),
        }
    }

    /// Experts that take part in top-k selection.
    pub fn routed_experts(&self) -> usize {
        self.experts_per_layer - self.shared_experts
    }

    /// Positive gates per layer in an unsteered pass.
    pub fn active_per_layer(&self) -> usize {
        self.top_k + self.shared_experts
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.experts_per_layer == 0 || self.hidden_dim == 0 || self.vocab_size == 0 {
            return Err(invalid("all model dimensions must be at least 1"));
        }
        if self.shared_experts >= self.experts_per_layer {
            return Err(invalid("shared experts must leave at least one routed expert"));
        }
        if self.top_k == 0 || self.top_k > self.routed_experts() {
            return Err(invalid(format!(
                "top_k must lie in 1..={} (got {})",
                self.routed_experts(),
                self.top_k
            )));
        }
        Ok(())
    }

    /// Overrides fields present in `kv`; absent keys keep `self`'s values.
    pub fn with_overrides(mut self, kv: &KvConfig) -> Result<Self> {
        self.num_layers = kv.get_or("num_layers", self.num_layers)?;
        self.experts_per_layer = kv.get_or("experts_per_layer", self.experts_per_layer)?;
        self.top_k = kv.get_or("top_k", self.top_k)?;
        self.hidden_dim = kv.get_or("hidden_dim", self.hidden_dim)?;
        self.vocab_size = kv.get_or("vocab_size", self.vocab_size)?;
        self.seed = kv.get_or("seed", self.seed)?;
        self.shared_experts = kv.get_or("shared_experts", self.shared_experts)?;
        self.validate()?;
        Ok(self)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "num_layers = {}\nexperts_per_layer = {}\ntop_k = {}\nhidden_dim = {}\nvocab_size = {}\nseed = {}\nshared_experts = {}\n",
            self.num_layers,
            self.experts_per_layer,
            self.top_k,
            self.hidden_dim,
            self.vocab_size,
            self.seed,
            self.shared_experts
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct ExpertId {
    pub layer: usize,
    pub index: usize,
}

impl ExpertId {
    pub const fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl From<ExpertId> for [usize; 2] {
    fn from(id: ExpertId) -> Self {
        [id.layer, id.index]
    }
}

impl From<[usize; 2]> for ExpertId {
    fn from([layer, index]: [usize; 2]) -> Self {
        Self { layer, index }
    }
}

impl std::fmt::Display for ExpertId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub layer: usize,
    pub gates: Vec<f64>,
}

impl GateVector {
    /// `(index, gate)` for every positive gate, ascending by index.
    pub fn active(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.gates
            .iter()
            .enumerate()
            .filter(|(_, g)| **g > 0.0)
            .map(|(i, g)| (i, *g))
    }

    pub fn active_count(&self) -> usize {
        self.gates.iter().filter(|g| **g > 0.0).count()
    }

    pub fn mass_on<'a>(&self, experts: impl IntoIterator<Item = &'a ExpertId>) -> f64 {
        experts
            .into_iter()
            .filter(|e| e.layer == self.layer)
            .map(|e| self.gates[e.index])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// State after each layer's residual update, at the last input position.
    pub hidden: Vec<Vec<f64>>,
    pub gates: Vec<GateVector>,
    pub logits: Vec<f64>,
}

impl ForwardResult {
    pub fn argmax_token(&self) -> u32 {
        let mut best = 0;
        for (i, v) in self.logits.iter().enumerate() {
            if *v > self.logits[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// Adds `bias` to one expert's router logit when a hidden channel's activity
/// (strictly positive value) equals `when_present`. Without a channel the bias
/// always applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRule {
    pub expert: ExpertId,
    pub channel: Option<usize>,
    pub when_present: bool,
    pub bias: f64,
}

/// Makes one expert copy `gain * hidden[from]` into output channel `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRelay {
    pub expert: ExpertId,
    pub from: usize,
    pub to: usize,
    pub gain: f64,
}

/// Hand-placed routing structure layered on top of the random weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingOverlay {
    pub bias_rules: Vec<BiasRule>,
    pub relays: Vec<ChannelRelay>,
    /// Channels no expert writes to (apart from relays) and no router reads.
    pub protected_channels: Vec<usize>,
}

impl RoutingOverlay {
    pub fn is_empty(&self) -> bool {
        self.bias_rules.is_empty() && self.relays.is_empty() && self.protected_channels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `hidden_dim x hidden_dim`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `experts_per_layer x hidden_dim`, row-major.
    pub router: Vec<f32>,
    pub experts: Vec<Expert>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub config: ModelConfig,
    /// `vocab_size x hidden_dim`, row-major.
    pub embedding: Vec<f32>,
    pub layers: Vec<Layer>,
    /// `vocab_size x hidden_dim`, row-major.
    pub readout: Vec<f32>,
    pub overlay: RoutingOverlay,
}

impl MoeModel {
    /// Seeded random model. Each weight block draws from its own named
    /// sub-stream of `config.seed` (see [`crate::rng`]).
    pub fn random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let n = config.experts_per_layer;
        let v = config.vocab_size;
        let expert_scale = 1.0 / (d as f32).sqrt();

        let mut rng = substream(config.seed, "embedding");
        let embedding = (0..v * d).map(|_| uniform_f32(&mut rng, 1.0)).collect();

        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut rng = substream(config.seed, &format!("router/{l}"));
            let router = (0..n * d).map(|_| uniform_f32(&mut rng, ROUTER_INIT_SCALE)).collect();
            let mut experts = Vec::with_capacity(n);
            for j in 0..n {
                let mut rng = substream(config.seed, &format!("expert/{l}/{j}"));
                let weight = (0..d * d).map(|_| uniform_f32(&mut rng, expert_scale)).collect();
                let bias = (0..d).map(|_| uniform_f32(&mut rng, EXPERT_BIAS_SCALE)).collect();
                experts.push(Expert { weight, bias });
            }
            layers.push(Layer { router, experts });
        }

        let mut rng = substream(config.seed, "readout");
        let readout = (0..v * d).map(|_| uniform_f32(&mut rng, expert_scale)).collect();

        Ok(Self {
            config,
            embedding,
            layers,
            readout,
            overlay: RoutingOverlay::default(),
        })
    }

    pub fn embedding_row(&self, token: u32) -> &[f32] {
        let d = self.config.hidden_dim;
        let t = token as usize;
        &self.embedding[t * d..(t + 1) * d]
    }

    pub fn embedding_row_mut(&mut self, token: u32) -> &mut [f32] {
        let d = self.config.hidden_dim;
        let t = token as usize;
        &mut self.embedding[t * d..(t + 1) * d]
    }

    fn check_hidden(&self, hidden: &[f64], layer: usize) -> Result<()> {
        if hidden.len() != self.config.hidden_dim {
            return Err(invalid(format!(
                "hidden state has dimension {}, model expects {}",
                hidden.len(),
                self.config.hidden_dim
            )));
        }
        if layer >= self.config.num_layers {
            return Err(invalid(format!(
                "layer {layer} out of range for a {}-layer model",
                self.config.num_layers
            )));
        }
        Ok(())
    }

    /// Router logits including any overlay bias rules.
    pub fn router_logits(&self, hidden: &[f64], layer: usize) -> Result<Vec<f64>> {
        self.check_hidden(hidden, layer)?;
        let d = self.config.hidden_dim;
        let router = &self.layers[layer].router;
        let mut logits: Vec<f64> = (0..self.config.experts_per_layer)
            .map(|j| dot(&router[j * d..(j + 1) * d], hidden))
            .collect();
        for rule in self.overlay.bias_rules.iter().filter(|r| r.expert.layer == layer) {
            let fires = match rule.channel {
                None => true,
                Some(c) => (hidden[c] > 0.0) == rule.when_present,
            };
            if fires {
                logits[rule.expert.index] += rule.bias;
            }
        }
        Ok(logits)
    }

    /// Output of a single expert's feed-forward map.
    pub fn expert_output(&self, hidden: &[f64], layer: usize, index: usize) -> Result<Vec<f64>> {
        self.check_hidden(hidden, layer)?;
        if index >= self.config.experts_per_layer {
            return Err(invalid(format!("expert index {index} out of range")));
        }
        let d = self.config.hidden_dim;
        let expert = &self.layers[layer].experts[index];
        let mut out: Vec<f64> = (0..d)
            .map(|r| (dot(&expert.weight[r * d..(r + 1) * d], hidden) + f64::from(expert.bias[r])).tanh())
            .collect();
        for &c in &self.overlay.protected_channels {
            out[c] = 0.0;
        }
        let id = ExpertId::new(layer, index);
        for relay in self.overlay.relays.iter().filter(|r| r.expert == id) {
            out[relay.to] += relay.gain * hidden[relay.from];
        }
        Ok(out)
    }

    /// Pooled last-position state: mean token embedding plus
    /// [`FINAL_POSITION_GAIN`] times the final token's embedding.
    ///
    /// Embeddings are accumulated per distinct token in ascending token order,
    /// so any reordering of the prompt's non-final tokens yields the same bits.
    pub fn pooled_state(&self, prompt: &[u32]) -> Result<Vec<f64>> {
        let Some(&last) = prompt.last() else {
            return Err(invalid("empty prompt"));
        };
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &t in prompt {
            if t as usize >= self.config.vocab_size {
                return Err(invalid(format!(
                    "token {t} outside vocabulary of size {}",
                    self.config.vocab_size
                )));
            }
            *counts.entry(t).or_default() += 1;
        }
        let d = self.config.hidden_dim;
        let mut sum = vec![0.0f64; d];
        for (&t, &c) in &counts {
            for (s, e) in sum.iter_mut().zip(self.embedding_row(t)) {
                *s += c as f64 * f64::from(*e);
            }
        }
        let n = prompt.len() as f64;
        Ok(sum
            .iter()
            .zip(self.embedding_row(last))
            .map(|(s, e)| s / n + FINAL_POSITION_GAIN * f64::from(*e))
            .collect())
    }

    pub fn readout_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.config.hidden_dim;
        (0..self.config.vocab_size)
            .map(|t| dot(&self.readout[t * d..(t + 1) * d], hidden))
            .collect()
    }
}

fn dot(weights: &[f32], x: &[f64]) -> f64 {
    weights.iter().zip(x).map(|(w, v)| f64::from(*w) * v).sum()
}

/// Indices of `candidates` ordered by descending logit, ties to lower index.
pub(crate) fn rank_by_logit(logits: &[f64], candidates: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.into_iter().collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

/// Softmax over `selected` (ascending indices) scaled to `mass`, zero elsewhere.
pub(crate) fn softmax_into(gates: &mut [f64], logits: &[f64], selected: &[usize], mass: f64) {
    let max = selected.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (&i, e) in selected.iter().zip(&exps) {
        gates[i] = mass * e / total;
    }
}

/// Unsteered gating: shared experts plus the top-k routed experts, softmax
/// renormalised over the selected set.
pub fn top_k_gates(logits: &[f64], layer: usize, top_k: usize, shared: usize) -> GateVector {
    let mut selected: Vec<usize> = (0..shared).collect();
    selected.extend(rank_by_logit(logits, shared..logits.len()).into_iter().take(top_k));
    selected.sort_unstable();
    let mut gates = vec![0.0; logits.len()];
    softmax_into(&mut gates, logits, &selected, 1.0);
    GateVector { layer, gates }
}

pub fn route(hidden: &[f64], layer: usize, model: &MoeModel, policy: Option<&SteeringPolicy>) -> Result<GateVector> {
    let logits = model.router_logits(hidden, layer)?;
    let cfg = &model.config;
    match policy {
        None => Ok(top_k_gates(&logits, layer, cfg.top_k, cfg.shared_experts)),
        Some(p) => steering::apply_policy_with_shared(&logits, layer, p, cfg.top_k, cfg.shared_experts),
    }
}

/// Gate-weighted sum of expert outputs. Zero-gated experts are skipped.
pub fn moe_layer(hidden: &[f64], layer: usize, gates: &GateVector, model: &MoeModel) -> Result<Vec<f64>> {
    model.check_hidden(hidden, layer)?;
    if gates.layer != layer || gates.gates.len() != model.config.experts_per_layer {
        return Err(invalid("gate vector does not match layer"));
    }
    let mut out = vec![0.0; model.config.hidden_dim];
    for (j, g) in gates.active() {
        let e = model.expert_output(hidden, layer, j)?;
        for (o, v) in out.iter_mut().zip(&e) {
            *o += g * v;
        }
    }
    Ok(out)
}

pub fn forward(prompt: &[u32], model: &MoeModel, policy: Option<&SteeringPolicy>) -> Result<ForwardResult> {
    let mut h = model.pooled_state(prompt)?;
    let layers = model.config.num_layers;
    let mut hidden = Vec::with_capacity(layers);
    let mut all_gates = Vec::with_capacity(layers);
    for layer in 0..layers {
        let gates = route(&h, layer, model, policy)?;
        let update = moe_layer(&h, layer, &gates, model)?;
        for (x, u) in h.iter_mut().zip(&update) {
            *x += u;
        }
        hidden.push(h.clone());
        all_gates.push(gates);
    }
    let logits = model.readout_logits(&h);
    Ok(ForwardResult {
        hidden,
        gates: all_gates,
        logits,
    })
}

const MAGIC: &[u8; 4] = b"MOE1";

/// Writes the flat little-endian weight format.
///
/// Layout: `"MOE1"`, then `L, N, k, d, V` as `u32`; the embedding (`V x d`);
/// for each layer the router (`N x d`) followed by each expert's weight
/// (`d x d`) and bias (`d`); the readout (`V x d`). All matrices are row-major
/// `f32`. A trailer carries `shared_experts: u32` and `seed: u64`. The routing
/// overlay is not serialised.
pub fn write_weights<W: Write>(model: &MoeModel, mut out: W) -> Result<()> {
    let c = &model.config;
    out.write_all(MAGIC)?;
    for dim in [c.num_layers, c.experts_per_layer, c.top_k, c.hidden_dim, c.vocab_size] {
        out.write_all(
            &u32::try_from(dim)
                .map_err(|_| invalid("dimension exceeds u32"))?
                .to_le_bytes(),
        )?;
    }
    let mut put = |xs: &[f32]| -> Result<()> {
        for x in xs {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    put(&model.embedding)?;
    for layer in &model.layers {
        put(&layer.router)?;
        for e in &layer.experts {
            put(&e.weight)?;
            put(&e.bias)?;
        }
    }
    put(&model.readout)?;
    out.write_all(&(c.shared_experts as u32).to_le_bytes())?;
    out.write_all(&c.seed.to_le_bytes())?;
    Ok(())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<MoeModel> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("bad magic bytes, expected MOE1".into()));
    }
    let mut u32s = [0usize; 5];
    for slot in &mut u32s {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *slot = u32::from_le_bytes(b) as usize;
    }
    let [num_layers, experts_per_layer, top_k, hidden_dim, vocab_size] = u32s;
    let mut take = |count: usize| -> Result<Vec<f32>> {
        let mut buf = vec![0u8; count * 4];
        input.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let d = hidden_dim;
    let embedding = take(vocab_size * d)?;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let router = take(experts_per_layer * d)?;
        let mut experts = Vec::with_capacity(experts_per_layer);
        for _ in 0..experts_per_layer {
            let weight = take(d * d)?;
            let bias = take(d)?;
            experts.push(Expert { weight, bias });
        }
        layers.push(Layer { router, experts });
    }
    let readout = take(vocab_size * d)?;
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let shared_experts = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    let config = ModelConfig {
        num_layers,
        experts_per_layer,
        top_k,
        hidden_dim,
        vocab_size,
        seed,
        shared_experts,
    };
    config.validate()?;
    Ok(MoeModel {
        config,
        embedding,
        layers,
        readout,
        overlay: RoutingOverlay::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, k: usize) -> MoeModel {
        MoeModel::random(ModelConfig {
            num_layers: 3,
            experts_per_layer: n,
            top_k: k,
            hidden_dim: 6,
            vocab_size: 20,
            seed: 11,
            shared_experts: 0,
        })
        .unwrap()
    }

    /// Sort every expert by logit, keep k, softmax: the textbook formulation.
    fn sort_softmax_oracle(logits: &[f64], k: usize) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
        let keep = &idx[..k];
        let z: f64 = keep.iter().map(|&i| logits[i].exp()).sum();
        let mut g = vec![0.0; logits.len()];
        for &i in keep {
            g[i] = logits[i].exp() / z;
        }
        g
    }

    #[test]
    fn equal_logits_split_evenly() {
        let g = top_k_gates(&[0.3, 0.3], 0, 2, 0);
        assert_eq!(g.gates, vec![0.5, 0.5]);
    }

    #[test]
    fn two_maxima_selected() {
        let logits = [0.0, -1.0, 0.2, 3.0, 0.1, 2.5, -0.4, 0.0];
        let g = top_k_gates(&logits, 0, 2, 0);
        let active: Vec<usize> = g.active().map(|(i, _)| i).collect();
        assert_eq!(active, vec![3, 5]);
        assert!((g.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tie_kept_and_matches_oracle() {
        let logits = [1.0, 1.0, 0.0, -1.0];
        let g = top_k_gates(&logits, 0, 2, 0);
        assert_eq!(g.gates, vec![0.5, 0.5, 0.0, 0.0]);
        let oracle = sort_softmax_oracle(&logits, 2);
        for (a, b) in g.gates.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let g = top_k_gates(&[0.0, 1.0, 1.0, 1.0], 0, 2, 0);
        let active: Vec<usize> = g.active().map(|(i, _)| i).collect();
        assert_eq!(active, vec![1, 2]);
    }

    #[test]
    fn shared_experts_always_on() {
        let g = top_k_gates(&[-9.0, -9.0, 1.0, 2.0, 3.0], 0, 2, 2);
        let active: Vec<usize> = g.active().map(|(i, _)| i).collect();
        assert_eq!(active, vec![0, 1, 3, 4]);
    }

    #[test]
    fn route_rejects_bad_dimension() {
        let m = small(4, 2);
        assert!(matches!(route(&[0.0; 5], 0, &m, None), Err(Error::InvalidInput(_))));
        assert!(matches!(route(&[0.0; 6], 3, &m, None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn one_hot_gate_is_that_expert() {
        let m = small(4, 1);
        let h = vec![0.1, -0.2, 0.3, 0.05, 0.0, 0.7];
        let gates = GateVector {
            layer: 1,
            gates: vec![0.0, 0.0, 1.0, 0.0],
        };
        let out = moe_layer(&h, 1, &gates, &m).unwrap();
        assert_eq!(out, m.expert_output(&h, 1, 2).unwrap());
    }

    #[test]
    fn identical_experts_collapse_to_one() {
        let mut m = small(4, 2);
        let first = m.layers[0].experts[0].clone();
        for e in &mut m.layers[0].experts {
            *e = first.clone();
        }
        let h = vec![0.4, 0.1, -0.3, 0.2, 0.9, -0.5];
        let gates = GateVector {
            layer: 0,
            gates: vec![0.0, 0.3, 0.0, 0.7],
        };
        let out = moe_layer(&h, 0, &gates, &m).unwrap();
        let e0 = m.expert_output(&h, 0, 0).unwrap();
        for (a, b) in out.iter().zip(&e0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn half_half_mixture() {
        let m = small(2, 2);
        let h = vec![0.2, 0.2, -0.1, 0.0, 0.5, 0.3];
        let u = m.expert_output(&h, 2, 0).unwrap();
        let v = m.expert_output(&h, 2, 1).unwrap();
        let gates = GateVector {
            layer: 2,
            gates: vec![0.5, 0.5],
        };
        let out = moe_layer(&h, 2, &gates, &m).unwrap();
        for i in 0..6 {
            assert!((out[i] - (0.5 * u[i] + 0.5 * v[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_structure_and_determinism() {
        let mut cfg = ModelConfig::mixtral_like(50, 3);
        cfg.num_layers = 4;
        let m = MoeModel::random(cfg).unwrap();
        let a = forward(&[1, 2, 3, 4], &m, None).unwrap();
        let b = forward(&[1, 2, 3, 4], &m, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gates.len(), 4);
        assert_eq!(a.hidden.len(), 4);
        assert_eq!(a.logits.len(), 50);
    }

    #[test]
    fn non_final_permutation_is_invisible() {
        let m = MoeModel::random(ModelConfig::mixtral_like(50, 5)).unwrap();
        let a = forward(&[7, 1, 9, 9, 4, 2], &m, None).unwrap();
        let b = forward(&[9, 4, 1, 9, 7, 2], &m, None).unwrap();
        assert_eq!(a, b);
        let c = forward(&[7, 1, 9, 9, 2, 4], &m, None).unwrap();
        assert_ne!(a.hidden[0], c.hidden[0]);
    }

    #[test]
    fn forward_errors() {
        let m = small(4, 2);
        assert!(matches!(forward(&[], &m, None), Err(Error::InvalidInput(_))));
        assert!(matches!(forward(&[25], &m, None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::mixtral_like(10, 0);
        c.top_k = 9;
        assert!(c.validate().is_err());
        c.top_k = 0;
        assert!(c.validate().is_err());
        c.top_k = 2;
        c.hidden_dim = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::qwen_like(10, 0).validate().is_ok());
        assert!(ModelConfig::profile("nope", 10, 0).is_err());
    }

    #[test]
    fn config_kv_roundtrip() {
        let c = ModelConfig::qwen_like(123, 9);
        let kv = KvConfig::parse(&c.to_kv_text()).unwrap();
        let back = ModelConfig::mixtral_like(1, 0).with_overrides(&kv).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn weights_roundtrip() {
        let m = MoeModel::random(ModelConfig::qwen_like(30, 4)).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MOE1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 4);
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(read_weights(&b"MOE2aaaa"[..]).is_err());
    }
}
