//! Trains the personalized decoder on a small corpus, saves a checkpoint
//! and reloads it.
//!
//! `cargo run --release --example train_decoder -- [epochs] [checkpoint]`

use flowrec::corpus::{generate_corpus, split_by_user, CorpusConfig, HistoryIndex};
use flowrec::decoder::{ModelConfig, PersonalizedDecoder, TrainConfig};
use flowrec::pipeline::path_examples;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(Ok(6), |s| s.parse())?;
    let checkpoint = args.next().unwrap_or_else(|| std::env::temp_dir().join("flowrec-example.pdec").display().to_string());

    let corpus = generate_corpus(&CorpusConfig::reference(150, 7))?;
    let vocab = &corpus.vocab;
    let (train, heldout) = split_by_user(&corpus.flows, 0.2, 7);
    // profiles come from each owner's other flows
    let history = HistoryIndex::new(&corpus.flows, vocab);
    let train = path_examples(&train, vocab, &history)?;
    let heldout = path_examples(&heldout, vocab, &history)?;

    let config = ModelConfig::new(vocab.size(), 32, 2, 2);
    let mut model = PersonalizedDecoder::<f32>::build_for(&config, vocab)?;
    println!("{} parameters, {} training paths", model.num_parameters(), train.len());
    let tc = TrainConfig { epochs, learning_rate: 2e-3, ..TrainConfig::default() };
    let log = model.train_with(&train, &tc, &heldout, |e| {
        println!(
            "epoch {}  loss {:.4}  held-out top-1 {:.3}  lr {:.1e}",
            e.epoch + 1,
            e.mean_loss,
            e.heldout_top1.unwrap_or(f64::NAN),
            e.learning_rate
        );
    })?;
    println!("initial loss {:.4}, final {:.4}", log.initial_loss, log.final_loss().unwrap_or(f64::NAN));

    model.save(&checkpoint, vocab)?;
    let reloaded = PersonalizedDecoder::load(&checkpoint, vocab)?;
    assert_eq!(reloaded.named_parameters(), model.named_parameters());
    println!("checkpoint round-trips through {checkpoint}");

    let ex = &heldout[0];
    let prefix = &ex.tokens[..ex.tokens.len().min(2)];
    for (a, p) in model.suggest(prefix, &ex.profile, 3)? {
        println!("  {:<32} {p:.3}", vocab.action(a).name());
    }
    Ok(())
}
