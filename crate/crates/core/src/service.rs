//! HTTP suggestion service over an immutable, atomically swappable engine.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, ProfileStore};
use crate::decoder::{rank_distribution, DecoderError, PersonalizedDecoder};
use crate::eval::{personalize_distribution, History, Strategy};
use crate::flow::{encode_prefix, ActionId, ActionKind, ActionVocabulary, FlowError};
use crate::personalize::DEFAULT_BETA;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("profile store refers to unknown action {0}")]
    UnknownProfileAction(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    #[default]
    Learned,
    None,
    FilterConnections,
    ReweightActions,
}

fn default_k() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuggestRequest {
    /// `connection/operation` names, trigger first.
    pub prefix: Vec<String>,
    /// Resolved against the profile store; unknown users get an empty history.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    /// Inline action counts, used instead of `user_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<BTreeMap<String, u32>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub strategy: StrategyName,
}

impl SuggestRequest {
    pub fn new(prefix: &[&str]) -> Self {
        SuggestRequest {
            prefix: prefix.iter().map(|s| s.to_string()).collect(),
            user_id: None,
            history: None,
            k: default_k(),
            threshold: None,
            strategy: StrategyName::Learned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub action: String,
    pub connection: String,
    pub operation: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestResponse {
    pub suggestions: Vec<Suggestion>,
    pub suppressed: bool,
    pub model_version: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: 400,
            code: code.into(),
            message: message.into(),
        }
    }

    fn unavailable() -> Self {
        ApiError {
            status: 503,
            code: "NoSnapshot".into(),
            message: "no model snapshot is loaded".into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// A loaded model, its vocabulary and the profile store. Never mutated
/// after construction.
pub struct Engine {
    model: PersonalizedDecoder<f32>,
    vocab: ActionVocabulary,
    profiles: BTreeMap<String, Vec<u32>>,
    model_version: String,
    beta: f64,
}

fn counts_from_names(names: &BTreeMap<String, u32>, vocab: &ActionVocabulary) -> Result<Vec<u32>, String> {
    let mut counts = vec![0u32; vocab.size()];
    for (name, &c) in names {
        let id = vocab.lookup(name).ok_or_else(|| name.clone())?;
        counts[id.index()] += c;
    }
    Ok(counts)
}

impl Engine {
    pub fn new(
        model: PersonalizedDecoder<f32>,
        vocab: ActionVocabulary,
        store: &ProfileStore,
    ) -> Result<Self, ServiceError> {
        let mut bytes = Vec::new();
        model.write_to(&mut bytes, &vocab)?;
        let model_version = format!("pdec-{}", &hex::encode(Sha256::digest(&bytes))[..12]);
        let profiles = store
            .users
            .iter()
            .map(|(user, names)| {
                counts_from_names(names, &vocab)
                    .map(|c| (user.clone(), c))
                    .map_err(ServiceError::UnknownProfileAction)
            })
            .collect::<Result<_, _>>()?;
        Ok(Engine {
            model,
            vocab,
            profiles,
            model_version,
            beta: DEFAULT_BETA,
        })
    }

    /// Loads a checkpoint, its vocabulary and a profile store; the
    /// checkpoint must have been written for this vocabulary.
    pub fn load(
        checkpoint: impl AsRef<Path>,
        vocab: impl AsRef<Path>,
        profiles: impl AsRef<Path>,
    ) -> Result<Self, ServiceError> {
        let vocab = ActionVocabulary::load(vocab)?;
        let model = PersonalizedDecoder::load(checkpoint, &vocab)?;
        let store = ProfileStore::load(profiles)?;
        Self::new(model, vocab, &store)
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn vocab(&self) -> &ActionVocabulary {
        &self.vocab
    }

    pub fn suggest(&self, req: &SuggestRequest) -> Result<SuggestResponse, ApiError> {
        if req.prefix.is_empty() {
            return Err(ApiError::bad_request("EmptyPrefix", "prefix must not be empty"));
        }
        if req.k == 0 {
            return Err(ApiError::bad_request("InvalidRequest", "k must be at least 1"));
        }
        if req.threshold.is_some_and(|t| !t.is_finite()) {
            return Err(ApiError::bad_request("InvalidRequest", "threshold must be finite"));
        }
        if req.user_id.is_some() && req.history.is_some() {
            return Err(ApiError::bad_request("InvalidRequest", "give either user_id or history, not both"));
        }
        let prefix: Vec<ActionId> = req
            .prefix
            .iter()
            .map(|name| {
                self.vocab
                    .lookup(name)
                    .ok_or_else(|| ApiError::bad_request("UnknownAction", format!("unknown action {name}")))
            })
            .collect::<Result<_, _>>()?;
        if self.vocab.kind(prefix[0]) != Some(ActionKind::Trigger) {
            return Err(ApiError::bad_request(
                "NonTriggerRoot",
                format!("{} is not a trigger", req.prefix[0]),
            ));
        }
        let counts = match (&req.user_id, &req.history) {
            (_, Some(names)) => counts_from_names(names, &self.vocab)
                .map_err(|n| ApiError::bad_request("UnknownAction", format!("unknown action {n} in history")))?,
            (Some(user), None) => self
                .profiles
                .get(user)
                .cloned()
                .unwrap_or_else(|| vec![0; self.vocab.size()]),
            (None, None) => vec![0; self.vocab.size()],
        };
        let history = History::from_counts(counts);
        let strategy = match req.strategy {
            StrategyName::Learned => Strategy::Learned,
            StrategyName::None => Strategy::None,
            StrategyName::FilterConnections => Strategy::FilterConnections,
            StrategyName::ReweightActions => Strategy::ReweightActions { beta: self.beta },
        };
        let zeros = vec![0.0; self.vocab.size()];
        let profile = if strategy == Strategy::Learned {
            &history.histogram
        } else {
            &zeros
        };
        let internal = |e: DecoderError| ApiError {
            status: 500,
            code: "Internal".into(),
            message: e.to_string(),
        };
        let dist = self
            .model
            .forward(&encode_prefix(&prefix, self.model.config().max_len), profile)
            .map_err(internal)?;
        let dist: Vec<f64> = dist.iter().map(|&p| p as f64).collect();
        let adjusted = personalize_distribution(&dist, strategy, &history, &self.vocab).map_err(|e| ApiError {
            status: 500,
            code: "Internal".into(),
            message: e.to_string(),
        })?;
        let ranked = rank_distribution(&adjusted, self.model.output_mask(), req.k);
        let top = ranked.first().map_or(0.0, |r| r.1);
        let suppressed = req.threshold.is_some_and(|t| top < t);
        let suggestions = if suppressed {
            Vec::new()
        } else {
            ranked
                .into_iter()
                .map(|(id, p)| {
                    let a = self.vocab.action(id);
                    Suggestion {
                        action: a.name(),
                        connection: a.connection.clone(),
                        operation: a.operation.clone(),
                        probability: p,
                    }
                })
                .collect()
        };
        Ok(SuggestResponse {
            suggestions,
            suppressed,
            model_version: self.model_version.clone(),
        })
    }
}

/// Holder of the current engine. Readers clone the `Arc` and keep using
/// their snapshot even if a new one is published meanwhile.
#[derive(Default)]
pub struct SnapshotSlot {
    current: RwLock<Option<Arc<Engine>>>,
}

impl SnapshotSlot {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with(engine: Engine) -> Self {
        SnapshotSlot {
            current: RwLock::new(Some(Arc::new(engine))),
        }
    }

    pub fn current(&self) -> Option<Arc<Engine>> {
        self.current.read().expect("snapshot lock").clone()
    }

    /// Publishes `engine`, returning the previous snapshot.
    pub fn swap(&self, engine: Engine) -> Option<Arc<Engine>> {
        self.current.write().expect("snapshot lock").replace(Arc::new(engine))
    }
}

#[derive(Serialize)]
struct ActionEntry {
    id: u32,
    action: String,
    connection: String,
    operation: String,
    kind: ActionKind,
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    model_version: Option<String>,
}

async fn suggest(
    State(slot): State<Arc<SnapshotSlot>>,
    body: Result<Json<SuggestRequest>, JsonRejection>,
) -> Result<Json<SuggestResponse>, ApiError> {
    let engine = slot.current().ok_or_else(ApiError::unavailable)?;
    let Json(req) = body.map_err(|e| ApiError::bad_request("InvalidRequest", e.body_text()))?;
    engine.suggest(&req).map(Json)
}

async fn actions(State(slot): State<Arc<SnapshotSlot>>) -> Result<Json<Vec<ActionEntry>>, ApiError> {
    let engine = slot.current().ok_or_else(ApiError::unavailable)?;
    Ok(Json(
        engine
            .vocab
            .iter()
            .map(|(id, a)| ActionEntry {
                id: id.0,
                action: a.name(),
                connection: a.connection.clone(),
                operation: a.operation.clone(),
                kind: a.kind,
            })
            .collect(),
    ))
}

async fn healthz(State(slot): State<Arc<SnapshotSlot>>) -> (StatusCode, Json<Health>) {
    match slot.current() {
        Some(engine) => (
            StatusCode::OK,
            Json(Health {
                status: "ok",
                model_version: Some(engine.model_version.clone()),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "unavailable",
                model_version: None,
            }),
        ),
    }
}

pub fn router(slot: Arc<SnapshotSlot>) -> Router {
    Router::new()
        .route("/suggest", post(suggest))
        .route("/actions", get(actions))
        .route("/healthz", get(healthz))
        .with_state(slot)
}

/// Serves until ctrl-c.
pub async fn serve(addr: &str, slot: Arc<SnapshotSlot>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(slot))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
