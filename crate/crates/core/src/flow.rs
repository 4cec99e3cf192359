//! Flows, actions and the closed action vocabulary.
//!
//! A flow is a rooted tree of actions whose root is a trigger. Every
//! non-root node yields one [`PrefixSample`]: the chain of its ancestors
//! (root first) as context and the node's own action as the target.
//! Context never crosses into sibling branches.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Dense token id. Ids 0 and 1 are reserved, real actions start at 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u32);

impl ActionId {
    pub const PAD: ActionId = ActionId(0);
    pub const PROFILE: ActionId = ActionId(1);
    /// First id assigned to a real action.
    pub const FIRST: u32 = 2;

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_reserved(self) -> bool {
        self.0 < Self::FIRST
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Trigger,
    Control,
    Api,
}

/// Connection used by every control-flow action.
pub const CORE_CONNECTION: &str = "core";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionRef {
    pub connection: String,
    pub operation: String,
    pub kind: ActionKind,
}

impl ActionRef {
    pub fn new(
        connection: impl Into<String>,
        operation: impl Into<String>,
        kind: ActionKind,
    ) -> Result<Self, FlowError> {
        let action = ActionRef {
            connection: connection.into(),
            operation: operation.into(),
            kind,
        };
        action.check()?;
        Ok(action)
    }

    fn check(&self) -> Result<(), FlowError> {
        let well_formed = |s: &str| {
            !s.is_empty()
                && !s.contains('/')
                && s.chars().all(|c| !c.is_whitespace() && !c.is_uppercase())
        };
        if !well_formed(&self.connection) || !well_formed(&self.operation) {
            return Err(FlowError::MalformedAction(self.name()));
        }
        if self.kind == ActionKind::Control && self.connection != CORE_CONNECTION {
            return Err(FlowError::MalformedAction(format!(
                "{} (control actions belong to \"{CORE_CONNECTION}\")",
                self.name()
            )));
        }
        Ok(())
    }

    /// `connection/operation`, the name used in corpus files and requests.
    pub fn name(&self) -> String {
        format!("{}/{}", self.connection, self.operation)
    }
}

/// Closed, immutable action vocabulary.
#[derive(Clone, Debug)]
pub struct ActionVocabulary {
    actions: Vec<ActionRef>,
    by_name: HashMap<String, ActionId>,
    hash: [u8; 32],
}

impl ActionVocabulary {
    pub fn new(actions: Vec<ActionRef>) -> Result<Self, FlowError> {
        let mut by_name = HashMap::with_capacity(actions.len());
        for (i, action) in actions.iter().enumerate() {
            action.check()?;
            let id = ActionId(ActionId::FIRST + i as u32);
            if by_name.insert(action.name(), id).is_some() {
                return Err(FlowError::DuplicateAction(action.name()));
            }
        }
        let canonical = serde_json::to_vec(&actions).expect("vocabulary serializes");
        let hash = Sha256::digest(&canonical).into();
        Ok(ActionVocabulary {
            actions,
            by_name,
            hash,
        })
    }

    /// Number of token ids, reserved ids included.
    pub fn size(&self) -> usize {
        self.actions.len() + ActionId::FIRST as usize
    }

    /// Number of real actions.
    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn get(&self, id: ActionId) -> Option<&ActionRef> {
        id.0.checked_sub(ActionId::FIRST)
            .and_then(|i| self.actions.get(i as usize))
    }

    pub fn action(&self, id: ActionId) -> &ActionRef {
        self.get(id)
            .unwrap_or_else(|| panic!("action id {id} not in vocabulary"))
    }

    pub fn kind(&self, id: ActionId) -> Option<ActionKind> {
        self.get(id).map(|a| a.kind)
    }

    pub fn lookup(&self, name: &str) -> Option<ActionId> {
        self.by_name.get(name).copied()
    }

    pub fn id_of(&self, action: &ActionRef) -> Option<ActionId> {
        self.lookup(&action.name())
            .filter(|id| self.action(*id).kind == action.kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ActionId, &ActionRef)> {
        self.actions
            .iter()
            .enumerate()
            .map(|(i, a)| (ActionId(ActionId::FIRST + i as u32), a))
    }

    pub fn actions(&self) -> &[ActionRef] {
        &self.actions
    }

    /// SHA-256 of the canonical JSON encoding of the action list.
    pub fn content_hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash)
    }

    /// Sorted, deduplicated connection names of API actions.
    pub fn connections(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .actions
            .iter()
            .filter(|a| a.kind == ActionKind::Api)
            .map(|a| a.connection.clone())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.actions).expect("vocabulary serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, FlowError> {
        let actions: Vec<ActionRef> = serde_json::from_str(json)?;
        Self::new(actions)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FlowError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FlowError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Flow {
    pub flow_id: String,
    pub user_id: String,
    pub nodes: Vec<(String, ActionId)>,
    pub edges: Vec<(String, String)>,
}

/// On-disk shape of a flow: actions are referenced by `connection/operation`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowRecord {
    pub flow_id: String,
    pub user_id: String,
    pub nodes: Vec<(String, String)>,
    pub edges: Vec<(String, String)>,
}

impl Flow {
    pub fn from_record(record: FlowRecord, vocab: &ActionVocabulary) -> Result<Self, FlowError> {
        let nodes = record
            .nodes
            .into_iter()
            .map(|(node, name)| match vocab.lookup(&name) {
                Some(id) => Ok((node, id)),
                None => Err(FlowError::UnknownAction { node, action: name }),
            })
            .collect::<Result<_, _>>()?;
        Ok(Flow {
            flow_id: record.flow_id,
            user_id: record.user_id,
            nodes,
            edges: record.edges,
        })
    }

    pub fn to_record(&self, vocab: &ActionVocabulary) -> FlowRecord {
        FlowRecord {
            flow_id: self.flow_id.clone(),
            user_id: self.user_id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|(node, id)| (node.clone(), vocab.action(*id).name()))
                .collect(),
            edges: self.edges.clone(),
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.nodes.iter().map(|(_, id)| *id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixSample {
    pub user_id: String,
    pub flow_id: String,
    pub prefix: Vec<ActionId>,
    pub target: ActionId,
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("malformed action {0}")]
    MalformedAction(String),
    #[error("duplicate action {0} in vocabulary")]
    DuplicateAction(String),
    #[error("flow has no nodes")]
    EmptyFlow,
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("edge references unknown node {0}")]
    UnknownNode(String),
    #[error("node {node} uses unknown action {action}")]
    UnknownAction { node: String, action: String },
    #[error("cycle through nodes {0:?}")]
    CycleDetected(Vec<String>),
    #[error("multiple roots {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("root {0} is not a trigger")]
    RootNotTrigger(String),
    #[error("trigger at non-root node {0}")]
    NonRootTrigger(String),
    #[error("nodes unreachable from the root: {0:?}")]
    UnreachableNode(Vec<String>),
    #[error("node {0} has more than one parent")]
    AmbiguousAncestry(String),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Adjacency view over a flow, indices into `flow.nodes`.
struct Topology {
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
}

fn topology(flow: &Flow) -> Result<Topology, FlowError> {
    let mut index = HashMap::with_capacity(flow.nodes.len());
    for (i, (node, _)) in flow.nodes.iter().enumerate() {
        if index.insert(node.as_str(), i).is_some() {
            return Err(FlowError::DuplicateNode(node.clone()));
        }
    }
    let n = flow.nodes.len();
    let mut children = vec![Vec::new(); n];
    let mut parents = vec![Vec::new(); n];
    for (parent, child) in &flow.edges {
        let p = *index
            .get(parent.as_str())
            .ok_or_else(|| FlowError::UnknownNode(parent.clone()))?;
        let c = *index
            .get(child.as_str())
            .ok_or_else(|| FlowError::UnknownNode(child.clone()))?;
        children[p].push(c);
        parents[c].push(p);
    }
    Ok(Topology { children, parents })
}

/// Checks that `flow` is a rooted DAG whose only trigger is its root.
pub fn validate_flow(flow: &Flow, vocab: &ActionVocabulary) -> Result<(), FlowError> {
    validated_root(flow, vocab).map(|_| ())
}

fn validated_root(flow: &Flow, vocab: &ActionVocabulary) -> Result<(usize, Topology), FlowError> {
    if flow.nodes.is_empty() {
        return Err(FlowError::EmptyFlow);
    }
    for (node, id) in &flow.nodes {
        if vocab.get(*id).is_none() {
            return Err(FlowError::UnknownAction {
                node: node.clone(),
                action: id.to_string(),
            });
        }
    }
    let topo = topology(flow)?;
    let n = flow.nodes.len();
    let name = |i: usize| flow.nodes[i].0.clone();

    // Kahn's algorithm; whatever is left over sits on or behind a cycle.
    let mut indegree: Vec<usize> = topo.parents.iter().map(Vec::len).collect();
    let roots: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut queue: VecDeque<usize> = roots.iter().copied().collect();
    let mut visited = 0;
    while let Some(i) = queue.pop_front() {
        visited += 1;
        for &c in &topo.children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if visited < n {
        let stuck = (0..n).filter(|&i| indegree[i] > 0).map(name).collect();
        return Err(FlowError::CycleDetected(stuck));
    }
    if roots.len() > 1 {
        return Err(FlowError::MultipleRoots(roots.into_iter().map(name).collect()));
    }
    let root = roots[0];
    if vocab.kind(flow.nodes[root].1) != Some(ActionKind::Trigger) {
        return Err(FlowError::RootNotTrigger(name(root)));
    }
    if let Some(i) = (0..n).find(|&i| i != root && vocab.kind(flow.nodes[i].1) == Some(ActionKind::Trigger)) {
        return Err(FlowError::NonRootTrigger(name(i)));
    }

    let mut seen = vec![false; n];
    let mut stack = vec![root];
    seen[root] = true;
    while let Some(i) = stack.pop() {
        for &c in &topo.children[i] {
            if !seen[c] {
                seen[c] = true;
                stack.push(c);
            }
        }
    }
    let unreachable: Vec<String> = (0..n).filter(|&i| !seen[i]).map(name).collect();
    if !unreachable.is_empty() {
        return Err(FlowError::UnreachableNode(unreachable));
    }
    Ok((root, topo))
}

fn tree_root(flow: &Flow, vocab: &ActionVocabulary) -> Result<(usize, Topology), FlowError> {
    let (root, topo) = validated_root(flow, vocab)?;
    if let Some(i) = topo.parents.iter().position(|p| p.len() > 1) {
        return Err(FlowError::AmbiguousAncestry(flow.nodes[i].0.clone()));
    }
    Ok((root, topo))
}

/// One sample per non-root node, in depth-first order with children
/// visited in edge insertion order.
pub fn enumerate_prefix_samples(
    flow: &Flow,
    vocab: &ActionVocabulary,
) -> Result<Vec<PrefixSample>, FlowError> {
    let (root, topo) = tree_root(flow, vocab)?;
    let mut samples = Vec::with_capacity(flow.nodes.len().saturating_sub(1));
    let mut chain = vec![flow.nodes[root].1];
    walk(flow, &topo, root, &mut chain, &mut |chain, node| {
        samples.push(PrefixSample {
            user_id: flow.user_id.clone(),
            flow_id: flow.flow_id.clone(),
            prefix: chain.to_vec(),
            target: flow.nodes[node].1,
        });
    });
    Ok(samples)
}

fn walk(
    flow: &Flow,
    topo: &Topology,
    node: usize,
    chain: &mut Vec<ActionId>,
    visit: &mut dyn FnMut(&[ActionId], usize),
) {
    for &child in &topo.children[node] {
        visit(chain, child);
        chain.push(flow.nodes[child].1);
        walk(flow, topo, child, chain, visit);
        chain.pop();
    }
}

/// Every root-to-leaf action path, in the same depth-first order.
pub fn root_to_leaf_paths(
    flow: &Flow,
    vocab: &ActionVocabulary,
) -> Result<Vec<Vec<ActionId>>, FlowError> {
    let (root, topo) = tree_root(flow, vocab)?;
    let mut paths = Vec::new();
    let mut chain = vec![flow.nodes[root].1];
    if topo.children[root].is_empty() {
        paths.push(chain.clone());
        return Ok(paths);
    }
    walk(flow, &topo, root, &mut chain, &mut |chain, node| {
        if topo.children[node].is_empty() {
            let mut path = chain.to_vec();
            path.push(flow.nodes[node].1);
            paths.push(path);
        }
    });
    Ok(paths)
}

/// Keeps the most recent `max_len - 1` actions; one slot stays free for
/// the personalization token.
pub fn encode_prefix(prefix: &[ActionId], max_len: usize) -> Vec<ActionId> {
    let keep = max_len.saturating_sub(1);
    prefix[prefix.len().saturating_sub(keep)..].to_vec()
}

pub fn read_flows_jsonl(
    path: impl AsRef<Path>,
    vocab: &ActionVocabulary,
) -> Result<Vec<Flow>, FlowError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut flows = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FlowRecord = serde_json::from_str(&line)
            .map_err(|source| FlowError::Parse { line: i + 1, source })?;
        flows.push(Flow::from_record(record, vocab)?);
    }
    Ok(flows)
}

pub fn write_flows_jsonl(
    path: impl AsRef<Path>,
    flows: &[Flow],
    vocab: &ActionVocabulary,
) -> Result<(), FlowError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for flow in flows {
        serde_json::to_writer(&mut out, &flow.to_record(vocab))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Distinct user ids in first-seen order.
pub fn user_ids(flows: &[Flow]) -> Vec<String> {
    let mut seen = HashSet::new();
    flows
        .iter()
        .filter(|f| seen.insert(f.user_id.as_str()))
        .map(|f| f.user_id.clone())
        .collect()
}
