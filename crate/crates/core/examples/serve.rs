//! Loads a freshly trained model into the suggestion service and answers
//! one request in process. With `--listen ADDR` it keeps serving HTTP.
//!
//! `cargo run --release --example serve -- --listen 127.0.0.1:8080`
//! then `curl -s localhost:8080/suggest -H 'content-type: application/json'
//! -d '{"prefix": ["core/recurrence"], "k": 3}'`

use std::sync::Arc;

use flowrec::corpus::{generate_corpus, CorpusConfig, HistoryIndex, ProfileStore};
use flowrec::decoder::{ModelConfig, PersonalizedDecoder, TrainConfig};
use flowrec::pipeline::path_examples;
use flowrec::service::{serve, Engine, SnapshotSlot, SuggestRequest};

fn main() -> anyhow::Result<()> {
    let listen = std::env::args().skip_while(|a| a != "--listen").nth(1);

    let corpus = generate_corpus(&CorpusConfig::reference(100, 9))?;
    let vocab = corpus.vocab.clone();
    let examples = path_examples(&corpus.flows, &vocab, &HistoryIndex::new(&corpus.flows, &vocab))?;
    let mut model = PersonalizedDecoder::<f32>::build_for(&ModelConfig::new(vocab.size(), 32, 1, 2), &vocab)?;
    model.train(&examples, &TrainConfig { epochs: 2, learning_rate: 2e-3, ..TrainConfig::default() }, &[])?;
    let store = ProfileStore::from_flows(&corpus.flows, &vocab);
    let engine = Engine::new(model, vocab, &store)?;

    let flow = &corpus.flows[0];
    let trigger = engine.vocab().action(flow.nodes[0].1).name();
    let mut req = SuggestRequest::new(&[trigger.as_str()]);
    req.user_id = Some(flow.user_id.clone());
    req.k = 3;
    println!("{}", serde_json::to_string_pretty(&engine.suggest(&req).map_err(|e| anyhow::anyhow!(e.message))?)?);

    if let Some(addr) = listen {
        println!("serving model {} on {addr}", engine.model_version());
        let slot = Arc::new(SnapshotSlot::with(engine));
        tokio::runtime::Runtime::new()?.block_on(serve(&addr, slot))?;
    }
    Ok(())
}
