//! Generates a small persona corpus and shows how strongly each persona
//! concentrates on its favourite connection.
//!
//! `cargo run --example generate_corpus -- [n_users] [out_dir]`

use std::collections::BTreeMap;

use flowrec::corpus::{generate_corpus, CorpusConfig};
use flowrec::flow::{write_flows_jsonl, ActionKind};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_users: usize = args.next().map_or(Ok(200), |s| s.parse())?;
    let out = args.next();

    let config = CorpusConfig::reference(n_users, 7);
    let corpus = generate_corpus(&config)?;
    let nodes: usize = corpus.flows.iter().map(|f| f.nodes.len()).sum();
    println!(
        "{} users, {} flows, {} actions in the vocabulary, {:.1} nodes per flow",
        corpus.user_personas.len(),
        corpus.flows.len(),
        corpus.vocab.num_actions(),
        nodes as f64 / corpus.flows.len() as f64
    );

    // API calls per (persona, connection)
    let mut usage: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for flow in &corpus.flows {
        let persona = corpus.user_personas[&flow.user_id].as_str();
        for id in flow.actions() {
            let action = corpus.vocab.action(id);
            if action.kind == ActionKind::Api {
                *usage.entry(persona).or_default().entry(action.connection.as_str()).or_default() += 1;
            }
        }
    }
    for (persona, conns) in usage.iter().take(5) {
        let total: usize = conns.values().sum();
        let (top, n) = conns.iter().max_by_key(|(_, n)| **n).unwrap();
        println!("  {persona}: {:.0}% of API calls on {top}", 100.0 * *n as f64 / total as f64);
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        corpus.vocab.save(format!("{dir}/vocab.json"))?;
        write_flows_jsonl(format!("{dir}/flows.jsonl"), &corpus.flows, &corpus.vocab)?;
        println!("wrote {dir}/vocab.json and {dir}/flows.jsonl");
    }
    Ok(())
}
