mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::small_corpus;
use flowrec::corpus::{HistoryIndex, ProfileStore};
use flowrec::decoder::{DecoderError, ModelConfig, PersonalizedDecoder, TrainConfig};
use flowrec::flow::{ActionKind, ActionRef, ActionVocabulary};
use flowrec::pipeline::path_examples;
use flowrec::service::{router, Engine, ServiceError, SnapshotSlot, StrategyName, SuggestRequest, SuggestResponse};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

struct Fixture {
    model: PersonalizedDecoder<f32>,
    vocab: ActionVocabulary,
    store: ProfileStore,
    user: String,
    prefix: Vec<String>,
}

fn fixture(seed: u64) -> Fixture {
    let corpus = small_corpus(30, 11);
    let history = HistoryIndex::new(&corpus.flows, &corpus.vocab);
    let examples = path_examples(&corpus.flows, &corpus.vocab, &history).unwrap();
    let cfg = ModelConfig { seed, ..ModelConfig::new(corpus.vocab.size(), 16, 1, 2) };
    let mut model = PersonalizedDecoder::<f32>::build_for(&cfg, &corpus.vocab).unwrap();
    let tc = TrainConfig { epochs: 2, learning_rate: 3e-3, batch_size: 16, seed, ..TrainConfig::default() };
    model.train(&examples, &tc, &[]).unwrap();
    let flow = &corpus.flows[0];
    let paths = flowrec::flow::root_to_leaf_paths(flow, &corpus.vocab).unwrap();
    let prefix = paths[0][..paths[0].len().min(3)]
        .iter()
        .map(|&a| corpus.vocab.action(a).name())
        .collect();
    Fixture {
        store: ProfileStore::from_flows(&corpus.flows, &corpus.vocab),
        user: flow.user_id.clone(),
        model,
        vocab: corpus.vocab,
        prefix,
    }
}

fn engine(f: &Fixture) -> Engine {
    Engine::new(f.model.clone(), f.vocab.clone(), &f.store).unwrap()
}

async fn call(slot: &Arc<SnapshotSlot>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
    let resp = router(Arc::clone(slot)).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn suggest(slot: &Arc<SnapshotSlot>, req: &SuggestRequest) -> (StatusCode, Vec<u8>) {
    call(slot, "POST", "/suggest", Some(serde_json::to_string(req).unwrap())).await
}

fn request(f: &Fixture) -> SuggestRequest {
    let names: Vec<&str> = f.prefix.iter().map(String::as_str).collect();
    SuggestRequest::new(&names)
}

fn error_code(body: &[u8]) -> String {
    let v: Value = serde_json::from_slice(body).unwrap();
    v["code"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn empty_slot_is_unavailable() {
    let slot = Arc::new(SnapshotSlot::empty());
    let (status, body) = call(&slot, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(String::from_utf8(body).unwrap().contains("unavailable"));
    let (status, body) = suggest(&slot, &SuggestRequest::new(&["a/b"])).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_code(&body), "NoSnapshot");
    let (status, _) = call(&slot, "GET", "/actions", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn suggestions_are_ranked_and_well_formed() {
    let f = fixture(1);
    let slot = Arc::new(SnapshotSlot::with(engine(&f)));
    let mut req = request(&f);
    req.user_id = Some(f.user.clone());
    req.k = 4;
    let (status, body) = suggest(&slot, &req).await;
    assert_eq!(status, StatusCode::OK);
    let resp: SuggestResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.suggestions.len(), 4);
    assert!(!resp.suppressed);
    assert!(resp.model_version.starts_with("pdec-"));
    assert!(resp.suggestions.windows(2).all(|w| w[0].probability >= w[1].probability));
    for s in &resp.suggestions {
        let id = f.vocab.lookup(&s.action).unwrap();
        assert_ne!(f.vocab.kind(id), Some(ActionKind::Trigger));
        assert_eq!(s.action, format!("{}/{}", s.connection, s.operation));
    }
}

#[tokio::test]
async fn bad_requests_name_their_cause() {
    let f = fixture(1);
    let slot = Arc::new(SnapshotSlot::with(engine(&f)));
    let (status, body) = suggest(&slot, &SuggestRequest::new(&[])).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "EmptyPrefix"));
    let (_, body) = suggest(&slot, &SuggestRequest::new(&["nowhere/nothing"])).await;
    assert_eq!(error_code(&body), "UnknownAction");
    let non_trigger = f
        .vocab
        .iter()
        .find(|(_, a)| a.kind == ActionKind::Api)
        .map(|(_, a)| a.name())
        .unwrap();
    let (_, body) = suggest(&slot, &SuggestRequest::new(&[&non_trigger])).await;
    assert_eq!(error_code(&body), "NonTriggerRoot");
    let mut req = request(&f);
    req.k = 0;
    let (_, body) = suggest(&slot, &req).await;
    assert_eq!(error_code(&body), "InvalidRequest");
    let (status, body) = call(&slot, "POST", "/suggest", Some("{\"prefix\": 3}".into())).await;
    assert_eq!((status, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "InvalidRequest"));
    let (_, body) = call(&slot, "POST", "/suggest", Some("{\"prefix\": [], \"extra\": 1}".into())).await;
    assert_eq!(error_code(&body), "InvalidRequest");
}

#[tokio::test]
async fn unknown_user_matches_an_empty_history() {
    let f = fixture(1);
    let slot = Arc::new(SnapshotSlot::with(engine(&f)));
    let mut stranger = request(&f);
    stranger.user_id = Some("never-seen".into());
    let mut empty = request(&f);
    empty.history = Some(BTreeMap::new());
    let anonymous = request(&f);
    let a = suggest(&slot, &stranger).await;
    let b = suggest(&slot, &empty).await;
    let c = suggest(&slot, &anonymous).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[tokio::test]
async fn thresholds_gate_suggestions() {
    let f = fixture(1);
    let slot = Arc::new(SnapshotSlot::with(engine(&f)));
    for strategy in [StrategyName::Learned, StrategyName::None, StrategyName::FilterConnections, StrategyName::ReweightActions] {
        let mut req = request(&f);
        req.user_id = Some(f.user.clone());
        req.strategy = strategy;
        req.threshold = Some(0.0);
        let resp: SuggestResponse = serde_json::from_slice(&suggest(&slot, &req).await.1).unwrap();
        assert!(!resp.suppressed && !resp.suggestions.is_empty(), "{strategy:?}");
        req.threshold = Some(1.5);
        let resp: SuggestResponse = serde_json::from_slice(&suggest(&slot, &req).await.1).unwrap();
        assert!(resp.suppressed && resp.suggestions.is_empty(), "{strategy:?}");
    }
}

#[tokio::test]
async fn repeated_and_concurrent_requests_are_byte_identical() {
    let f = fixture(1);
    let slot = Arc::new(SnapshotSlot::with(engine(&f)));
    let mut req = request(&f);
    req.user_id = Some(f.user.clone());
    let first = suggest(&slot, &req).await;
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let slot = Arc::clone(&slot);
            let req = req.clone();
            tokio::spawn(async move { suggest(&slot, &req).await })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), first);
    }
}

#[tokio::test]
async fn response_matches_golden_file() {
    let f = fixture(1);
    let slot = Arc::new(SnapshotSlot::with(engine(&f)));
    let mut req = request(&f);
    req.user_id = Some(f.user.clone());
    req.k = 5;
    let (_, body) = suggest(&slot, &req).await;
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/suggest_response.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &body).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden file; regenerate with UPDATE_GOLDEN=1");
    assert_eq!(String::from_utf8(body).unwrap(), String::from_utf8(golden).unwrap());
}

#[tokio::test]
async fn actions_and_health_describe_the_snapshot() {
    let f = fixture(1);
    let e = engine(&f);
    let version = e.model_version().to_string();
    let slot = Arc::new(SnapshotSlot::with(e));
    let (status, body) = call(&slot, "GET", "/actions", None).await;
    assert_eq!(status, StatusCode::OK);
    let actions: Vec<Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(actions.len(), f.vocab.num_actions());
    assert_eq!(actions[0]["id"], 2);
    let (status, body) = call(&slot, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    let health: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(health["model_version"], version.as_str());
}

#[tokio::test]
async fn swapping_snapshots_changes_the_version() {
    let a = fixture(1);
    let b = fixture(2);
    let slot = Arc::new(SnapshotSlot::with(engine(&a)));
    let held = slot.current().unwrap();
    let before_body = suggest(&slot, &request(&a)).await.1;
    let before: SuggestResponse = serde_json::from_slice(&before_body).unwrap();
    let previous = slot.swap(engine(&b)).unwrap();
    assert!(Arc::ptr_eq(&previous, &held));
    let after: SuggestResponse = serde_json::from_slice(&suggest(&slot, &request(&a)).await.1).unwrap();
    assert_ne!(before.model_version, after.model_version);
    // a reader holding the old snapshot keeps answering from it
    let held_body = serde_json::to_vec(&held.suggest(&request(&a)).unwrap()).unwrap();
    assert_eq!(held_body, before_body);
}

#[test]
fn loading_checks_the_vocabulary_and_the_file() {
    let f = fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.pdec");
    let vocab = dir.path().join("vocab.json");
    let profiles = dir.path().join("profiles.json");
    f.model.save(&ckpt, &f.vocab).unwrap();
    f.vocab.save(&vocab).unwrap();
    f.store.save(&profiles).unwrap();
    let loaded = Engine::load(&ckpt, &vocab, &profiles).unwrap();
    assert_eq!(loaded.model_version(), engine(&f).model_version());

    let mut actions = f.vocab.actions().to_vec();
    actions.push(ActionRef::new("extra", "op", ActionKind::Api).unwrap());
    ActionVocabulary::new(actions).unwrap().save(&vocab).unwrap();
    assert!(matches!(
        Engine::load(&ckpt, &vocab, &profiles),
        Err(ServiceError::Decoder(DecoderError::HashMismatch { .. }))
    ));

    f.vocab.save(&vocab).unwrap();
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        Engine::load(&ckpt, &vocab, &profiles),
        Err(ServiceError::Decoder(DecoderError::CorruptCheckpoint(_)))
    ));
}

#[test]
fn full_size_suggestion_is_fast() {
    let mut actions = vec![ActionRef::new("svc", "trigger", ActionKind::Trigger).unwrap()];
    actions.extend((1..1421).map(|i| ActionRef::new(format!("c{}", i % 40), format!("op{i}"), ActionKind::Api).unwrap()));
    let vocab = ActionVocabulary::new(actions).unwrap();
    assert_eq!(vocab.size(), 1423);
    let model = PersonalizedDecoder::<f32>::build_for(&ModelConfig::production(vocab.size()), &vocab).unwrap();
    let engine = Engine::new(model, vocab.clone(), &ProfileStore::default()).unwrap();
    let mut prefix = vec!["svc/trigger".to_string()];
    prefix.extend((1..16).map(|i| format!("c{}/op{i}", i % 40)));
    let names: Vec<&str> = prefix.iter().map(String::as_str).collect();
    let mut req = SuggestRequest::new(&names);
    req.history = Some(BTreeMap::from([("c3/op3".to_string(), 4)]));
    engine.suggest(&req).unwrap();
    let mut times: Vec<f64> = (0..15)
        .map(|_| {
            let t = Instant::now();
            engine.suggest(&req).unwrap();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    assert!(median < 50.0, "median {median:.2} ms");
}
