//! Synthetic persona-structured flow corpora, the user split, and user
//! action-usage profiles.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flow::{
    validate_flow, ActionId, ActionKind, ActionRef, ActionVocabulary, Flow, FlowError,
    CORE_CONNECTION,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    ConfigInvalid(String),
    #[error("profile flows belong to several users: {0} and {1}")]
    MixedUsers(String, String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub persona_id: String,
    /// Distribution over connection names.
    pub connection_affinity: BTreeMap<String, f64>,
    /// Distribution over template indices (length = `template_count`).
    pub template_affinity: Vec<f64>,
    /// Inclusive range.
    pub flows_per_user: (u32, u32),
}

/// Shape of the synthetic vocabulary: every connection offers the same API
/// and trigger operations; control actions and core triggers live under
/// the `core` connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub connections: Vec<String>,
    pub api_operations: Vec<String>,
    pub trigger_operations: Vec<String>,
    /// The first entry is the branching condition.
    pub control_operations: Vec<String>,
    pub core_triggers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_users: usize,
    pub personas: Vec<Persona>,
    pub vocab_spec: VocabSpec,
    pub template_count: usize,
    /// Inclusive range of action slots per template branch.
    pub template_length: (usize, usize),
    pub branch_probability: f64,
    /// Probability that a template starts with a `core` trigger instead of
    /// a connection trigger.
    #[serde(default = "default_core_trigger_probability")]
    pub core_trigger_probability: f64,
    /// Probability that a non-branching slot is a control action.
    #[serde(default = "default_control_probability")]
    pub control_probability: f64,
    /// Log-normal sigma applied per user to the persona's connection weights.
    #[serde(default)]
    pub user_jitter: f64,
    pub seed: u64,
}

fn default_core_trigger_probability() -> f64 {
    0.5
}

fn default_control_probability() -> f64 {
    0.1
}

const VENDORS: [&str; 20] = [
    "outlook", "gmail", "teams", "slack", "sharepoint", "onedrive", "dropbox", "gdrive", "excel",
    "sheets", "planner", "trello", "jira", "github", "twitter", "salesforce", "dynamics", "forms",
    "approvals", "sql",
];

impl VocabSpec {
    /// 20 connections x (8 API + 2 trigger operations), 5 control actions and
    /// 2 core triggers: 207 actions.
    pub fn standard() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        VocabSpec {
            connections: s(&VENDORS),
            api_operations: s(&[
                "get_item",
                "list_items",
                "create_item",
                "update_item",
                "delete_item",
                "send_message",
                "upload_file",
                "search",
            ]),
            trigger_operations: s(&["when_item_created", "when_item_modified"]),
            control_operations: s(&["condition", "apply_to_each", "compose", "delay", "set_variable"]),
            core_triggers: s(&["manual", "recurrence"]),
        }
    }

    pub fn build(&self) -> Result<ActionVocabulary, CorpusError> {
        let mut actions = Vec::new();
        for op in &self.core_triggers {
            actions.push(ActionRef::new(CORE_CONNECTION, op, ActionKind::Trigger)?);
        }
        for op in &self.control_operations {
            actions.push(ActionRef::new(CORE_CONNECTION, op, ActionKind::Control)?);
        }
        for conn in &self.connections {
            for op in &self.trigger_operations {
                actions.push(ActionRef::new(conn, op, ActionKind::Trigger)?);
            }
            for op in &self.api_operations {
                actions.push(ActionRef::new(conn, op, ActionKind::Api)?);
            }
        }
        Ok(ActionVocabulary::new(actions)?)
    }
}

/// How distinct the reference personas are from each other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaSeparation {
    /// Weights of a persona's favourite connections, most used first.
    pub connection_weights: Vec<f64>,
    /// Weights of a persona's favourite templates, most used first.
    pub template_weights: Vec<f64>,
    pub user_jitter: f64,
    pub core_trigger_probability: f64,
}

impl PersonaSeparation {
    /// Personas dominated by one connection and one template, with most
    /// flows starting from a generic `core` trigger.
    pub fn strong() -> Self {
        PersonaSeparation {
            connection_weights: vec![0.9, 0.07, 0.03],
            template_weights: vec![0.7, 0.15, 0.1, 0.05],
            user_jitter: 0.1,
            core_trigger_probability: 0.8,
        }
    }

    pub fn moderate() -> Self {
        PersonaSeparation {
            connection_weights: vec![0.6, 0.3, 0.1],
            template_weights: vec![0.4, 0.3, 0.2, 0.1],
            user_jitter: 0.5,
            core_trigger_probability: 0.5,
        }
    }
}

impl Default for PersonaSeparation {
    fn default() -> Self {
        Self::strong()
    }
}

impl CorpusConfig {
    /// Desk-scale configuration: 20 personas over 20 connections with
    /// strongly separated personas.
    pub fn reference(n_users: usize, seed: u64) -> Self {
        Self::reference_with(n_users, seed, &PersonaSeparation::strong())
    }

    /// The desk-scale layout with the given persona separation. Each
    /// persona favours a random subset of connections and templates.
    pub fn reference_with(n_users: usize, seed: u64, separation: &PersonaSeparation) -> Self {
        let vocab_spec = VocabSpec::standard();
        let template_count = 40;
        let n_conns = separation.connection_weights.len().min(vocab_spec.connections.len());
        let n_templates = separation.template_weights.len().min(template_count);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9e75);
        let personas = (0..20)
            .map(|p| {
                let mut conns: Vec<usize> = (0..vocab_spec.connections.len()).collect();
                shuffle(&mut conns, &mut rng);
                let connection_affinity = conns[..n_conns]
                    .iter()
                    .zip(&separation.connection_weights)
                    .map(|(&c, &w)| (vocab_spec.connections[c].clone(), w))
                    .collect();
                let mut templates: Vec<usize> = (0..template_count).collect();
                shuffle(&mut templates, &mut rng);
                let mut template_affinity = vec![0.0; template_count];
                for (&t, &w) in templates[..n_templates].iter().zip(&separation.template_weights) {
                    template_affinity[t] = w;
                }
                Persona {
                    persona_id: format!("p{p:02}"),
                    connection_affinity,
                    template_affinity,
                    flows_per_user: (2, 48),
                }
            })
            .collect();
        CorpusConfig {
            n_users,
            personas,
            vocab_spec,
            template_count,
            template_length: (2, 6),
            branch_probability: 0.3,
            core_trigger_probability: separation.core_trigger_probability,
            control_probability: 0.1,
            user_jitter: separation.user_jitter,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::ConfigInvalid(msg));
        if self.n_users == 0 || self.template_count == 0 || self.personas.is_empty() {
            return bad("n_users, template_count and personas must be non-empty".into());
        }
        let (lo, hi) = self.template_length;
        if lo == 0 || lo > hi {
            return bad(format!("template_length range ({lo}, {hi})"));
        }
        for (name, p) in [
            ("branch_probability", self.branch_probability),
            ("core_trigger_probability", self.core_trigger_probability),
            ("control_probability", self.control_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.user_jitter >= 0.0 && self.user_jitter.is_finite()) {
            return bad(format!("user_jitter {}", self.user_jitter));
        }
        let spec = &self.vocab_spec;
        if spec.connections.is_empty() || spec.api_operations.is_empty() {
            return bad("vocabulary needs connections and API operations".into());
        }
        if self.branch_probability > 0.0 && spec.control_operations.is_empty() {
            return bad("branching requires a control operation".into());
        }
        if spec.trigger_operations.is_empty() && spec.core_triggers.is_empty() {
            return bad("vocabulary has no triggers".into());
        }
        for p in &self.personas {
            let total: f64 = p.connection_affinity.values().sum();
            if (total - 1.0).abs() > 1e-9 || p.connection_affinity.values().any(|w| *w < 0.0) {
                return bad(format!("{}: connection affinity sums to {total}", p.persona_id));
            }
            if let Some(c) = p.connection_affinity.keys().find(|c| !spec.connections.contains(c)) {
                return bad(format!("{}: unknown connection {c}", p.persona_id));
            }
            let total: f64 = p.template_affinity.iter().sum();
            if p.template_affinity.len() != self.template_count
                || (total - 1.0).abs() > 1e-9
                || p.template_affinity.iter().any(|w| *w < 0.0)
            {
                return bad(format!("{}: template affinity invalid", p.persona_id));
            }
            if p.flows_per_user.0 > p.flows_per_user.1 {
                return bad(format!("{}: empty flows_per_user range", p.persona_id));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

fn shuffle<T>(xs: &mut [T], rng: &mut impl Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    CoreTrigger(usize),
    ConnectionTrigger(usize),
    Api(usize),
    Control(usize),
}

#[derive(Clone, Debug)]
struct TemplateNode {
    slot: Slot,
    children: Vec<TemplateNode>,
}

fn random_chain(len: usize, cfg: &CorpusConfig, rng: &mut impl Rng) -> Vec<Slot> {
    let spec = &cfg.vocab_spec;
    (0..len)
        .map(|_| {
            // control op 0 is reserved for branching
            if spec.control_operations.len() > 1 && rng.random::<f64>() < cfg.control_probability {
                Slot::Control(rng.random_range(1..spec.control_operations.len()))
            } else {
                Slot::Api(rng.random_range(0..spec.api_operations.len()))
            }
        })
        .collect()
}

fn chain_to_tree(slots: &[Slot], tail: Option<TemplateNode>) -> Option<TemplateNode> {
    slots.iter().rev().fold(tail, |child, &slot| {
        Some(TemplateNode {
            slot,
            children: child.into_iter().collect(),
        })
    })
}

fn generate_templates(cfg: &CorpusConfig, rng: &mut impl Rng) -> Vec<TemplateNode> {
    let spec = &cfg.vocab_spec;
    let (lo, hi) = cfg.template_length;
    (0..cfg.template_count)
        .map(|_| {
            let use_core = spec.trigger_operations.is_empty()
                || (!spec.core_triggers.is_empty() && rng.random::<f64>() < cfg.core_trigger_probability);
            let trigger = if use_core {
                Slot::CoreTrigger(rng.random_range(0..spec.core_triggers.len()))
            } else {
                Slot::ConnectionTrigger(rng.random_range(0..spec.trigger_operations.len()))
            };
            let len = rng.random_range(lo..=hi);
            let chain = random_chain(len, cfg, rng);
            let body = if rng.random::<f64>() < cfg.branch_probability {
                let at = rng.random_range(0..len);
                let other_len = rng.random_range(1..=len - at);
                let other = random_chain(other_len, cfg, rng);
                let condition = TemplateNode {
                    slot: Slot::Control(0),
                    children: [chain_to_tree(&chain[at..], None), chain_to_tree(&other, None)]
                        .into_iter()
                        .flatten()
                        .collect(),
                };
                chain_to_tree(&chain[..at], Some(condition))
            } else {
                chain_to_tree(&chain, None)
            };
            TemplateNode {
                slot: trigger,
                children: body.into_iter().collect(),
            }
        })
        .collect()
}

/// Generated corpus plus the hidden persona assignment of every user.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: ActionVocabulary,
    pub flows: Vec<Flow>,
    pub user_personas: BTreeMap<String, String>,
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    config.validate()?;
    let spec = &config.vocab_spec;
    let vocab = spec.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let templates = generate_templates(config, &mut rng);
    let jitter = Normal::new(0.0, config.user_jitter).expect("validated sigma");

    let conn_index: HashMap<&str, usize> = spec
        .connections
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let id = |conn: &str, op: &str| vocab.lookup(&format!("{conn}/{op}")).expect("generated action");

    let width = config.n_users.to_string().len().max(4);
    let mut flows = Vec::new();
    let mut user_personas = BTreeMap::new();
    for u in 0..config.n_users {
        let user_id = format!("u{u:0width$}");
        let persona = &config.personas[rng.random_range(0..config.personas.len())];
        user_personas.insert(user_id.clone(), persona.persona_id.clone());

        let mut conns = Vec::new();
        let mut weights = Vec::new();
        for (name, &w) in &persona.connection_affinity {
            if w > 0.0 {
                conns.push(conn_index[name.as_str()]);
                weights.push(w * (jitter.sample(&mut rng) as f64).exp());
            }
        }
        let conn_dist = WeightedIndex::new(&weights).expect("positive affinity");
        let template_dist = WeightedIndex::new(&persona.template_affinity).expect("template affinity");
        let (lo, hi) = persona.flows_per_user;

        for f in 0..rng.random_range(lo..=hi) {
            let template = &templates[template_dist.sample(&mut rng)];
            let mut flow = Flow {
                flow_id: format!("{user_id}-f{f:03}"),
                user_id: user_id.clone(),
                nodes: Vec::new(),
                edges: Vec::new(),
            };
            let mut stack = vec![(template, None::<String>)];
            while let Some((node, parent)) = stack.pop() {
                let mut conn = || &spec.connections[conns[conn_dist.sample(&mut rng)]];
                let action = match node.slot {
                    Slot::CoreTrigger(i) => id(CORE_CONNECTION, &spec.core_triggers[i]),
                    Slot::ConnectionTrigger(i) => id(conn(), &spec.trigger_operations[i]),
                    Slot::Api(i) => id(conn(), &spec.api_operations[i]),
                    Slot::Control(i) => id(CORE_CONNECTION, &spec.control_operations[i]),
                };
                let node_id = format!("n{}", flow.nodes.len());
                flow.nodes.push((node_id.clone(), action));
                if let Some(parent) = parent {
                    flow.edges.push((parent, node_id.clone()));
                }
                for child in node.children.iter().rev() {
                    stack.push((child, Some(node_id.clone())));
                }
            }
            debug_assert!(validate_flow(&flow, &vocab).is_ok());
            flows.push(flow);
        }
    }
    Ok(Corpus {
        vocab,
        flows,
        user_personas,
    })
}

/// Uniform draw in [0, 1) determined by `(user_id, seed)` alone.
pub fn user_split_key(user_id: &str, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(user_id.as_bytes());
    let digest = h.finalize();
    let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns whole users to train or test.
pub fn split_by_user(flows: &[Flow], test_fraction: f64, seed: u64) -> (Vec<Flow>, Vec<Flow>) {
    let mut decided: HashMap<&str, bool> = HashMap::new();
    let (train, test): (Vec<&Flow>, Vec<&Flow>) = flows.iter().partition(|f| {
        !*decided
            .entry(f.user_id.as_str())
            .or_insert_with(|| user_split_key(&f.user_id, seed) < test_fraction)
    });
    (train.into_iter().cloned().collect(), test.into_iter().cloned().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: String,
    /// Indexed by token id; reserved ids are always 0.
    pub histogram: Vec<f64>,
}

impl UserProfile {
    pub fn zeros(user_id: impl Into<String>, vocab_size: usize) -> Self {
        UserProfile {
            user_id: user_id.into(),
            histogram: vec![0.0; vocab_size],
        }
    }

    pub fn from_counts(user_id: impl Into<String>, counts: &[u32]) -> Self {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let histogram = if total == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        UserProfile {
            user_id: user_id.into(),
            histogram,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.histogram.iter().all(|&x| x == 0.0)
    }
}

/// Normalized action histogram over `user_flows`, skipping `exclude_flow`.
pub fn user_profile(
    user_flows: &[Flow],
    vocab: &ActionVocabulary,
    exclude_flow: Option<&str>,
) -> Result<UserProfile, CorpusError> {
    let user_id = user_flows.first().map(|f| f.user_id.clone()).unwrap_or_default();
    if let Some(other) = user_flows.iter().find(|f| f.user_id != user_id) {
        return Err(CorpusError::MixedUsers(user_id, other.user_id.clone()));
    }
    let mut counts = vec![0u32; vocab.size()];
    for flow in user_flows.iter().filter(|f| Some(f.flow_id.as_str()) != exclude_flow) {
        for id in flow.actions().filter(|id| !id.is_reserved()) {
            counts[id.index()] += 1;
        }
    }
    Ok(UserProfile::from_counts(user_id, &counts))
}

/// Per-user and per-flow action counts, for building leave-one-flow-out
/// profiles without rescanning a user's flows for every sample.
#[derive(Clone, Debug)]
pub struct HistoryIndex {
    vocab_size: usize,
    user_totals: HashMap<String, Vec<u32>>,
    flow_counts: HashMap<String, (String, Vec<(ActionId, u32)>)>,
}

impl HistoryIndex {
    pub fn new(flows: &[Flow], vocab: &ActionVocabulary) -> Self {
        let vocab_size = vocab.size();
        let mut user_totals: HashMap<String, Vec<u32>> = HashMap::new();
        let mut flow_counts = HashMap::new();
        for flow in flows {
            let mut counts: BTreeMap<ActionId, u32> = BTreeMap::new();
            for id in flow.actions().filter(|id| !id.is_reserved()) {
                *counts.entry(id).or_default() += 1;
            }
            let totals = user_totals
                .entry(flow.user_id.clone())
                .or_insert_with(|| vec![0; vocab_size]);
            for (&id, &c) in &counts {
                totals[id.index()] += c;
            }
            flow_counts.insert(
                flow.flow_id.clone(),
                (flow.user_id.clone(), counts.into_iter().collect()),
            );
        }
        HistoryIndex {
            vocab_size,
            user_totals,
            flow_counts,
        }
    }

    /// Raw action counts for `user_id`, minus `exclude_flow` when it is theirs.
    pub fn counts(&self, user_id: &str, exclude_flow: Option<&str>) -> Vec<u32> {
        let mut counts = self
            .user_totals
            .get(user_id)
            .cloned()
            .unwrap_or_else(|| vec![0; self.vocab_size]);
        if let Some((owner, flow)) = exclude_flow.and_then(|f| self.flow_counts.get(f)) {
            if owner == user_id {
                for &(id, c) in flow {
                    counts[id.index()] -= c;
                }
            }
        }
        counts
    }

    pub fn profile(&self, user_id: &str, exclude_flow: Option<&str>) -> UserProfile {
        UserProfile::from_counts(user_id, &self.counts(user_id, exclude_flow))
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.user_totals.keys().map(String::as_str)
    }
}

/// `user_id -> {"connection/operation": count}`, the service's history source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProfileStore {
    pub users: BTreeMap<String, BTreeMap<String, u32>>,
}

impl ProfileStore {
    pub fn from_flows(flows: &[Flow], vocab: &ActionVocabulary) -> Self {
        let mut users: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for flow in flows {
            let entry = users.entry(flow.user_id.clone()).or_default();
            for id in flow.actions() {
                *entry.entry(vocab.action(id).name()).or_default() += 1;
            }
        }
        ProfileStore { users }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}
