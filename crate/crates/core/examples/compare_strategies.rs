//! Learned personalization against the inference-time alternatives and
//! the n-gram baseline, on test users with a history. Writes the report
//! as CSV and SVG next to the system temp dir.
//!
//! `cargo run --release --example compare_strategies -- [n_users] [epochs]`

use flowrec::corpus::{generate_corpus, split_by_user, CorpusConfig, HistoryIndex};
use flowrec::decoder::{ModelConfig, PersonalizedDecoder, TrainConfig};
use flowrec::ngram::NgramModel;
use flowrec::pipeline::{eval_samples, evaluate, leaf_paths, partition_by_history, path_examples, EvalModels, EvalSettings};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_users: usize = args.next().map_or(Ok(300), |s| s.parse())?;
    let epochs: usize = args.next().map_or(Ok(4), |s| s.parse())?;

    let corpus = generate_corpus(&CorpusConfig::reference(n_users, 7))?;
    let vocab = &corpus.vocab;
    let (train, test) = split_by_user(&corpus.flows, 0.2, 7);
    let examples = path_examples(&train, vocab, &HistoryIndex::new(&train, vocab))?;
    let fit = |rate: f64| -> anyhow::Result<PersonalizedDecoder<f32>> {
        let mut m = PersonalizedDecoder::build_for(&ModelConfig::new(vocab.size(), 32, 2, 2), vocab)?;
        let tc = TrainConfig { personalization_rate: rate, epochs, learning_rate: 2e-3, ..TrainConfig::default() };
        m.train(&examples, &tc, &[])?;
        Ok(m)
    };
    let learned = fit(0.5)?;
    let baseline = fit(0.0)?;
    let ngram = NgramModel::fit(&leaf_paths(&train, vocab)?, 5, 0.4)?;

    let samples = eval_samples(&test, vocab, &HistoryIndex::new(&test, vocab))?;
    let (profiled, _) = partition_by_history(&samples);
    let models = EvalModels { learned: Some(&learned), baseline: Some(&baseline), ngram: Some(&ngram) };
    let report = evaluate(&models, vocab, &profiled, &EvalSettings::default(), "example", 7)?;
    for row in &report.rows {
        println!(
            "{:<20} top-1 {:.3}  top-3 {:.3}  top-5 {:.3}",
            row.strategy, row.accuracy[0], row.accuracy[2], row.accuracy[4]
        );
    }
    let dir = std::env::temp_dir();
    std::fs::write(dir.join("flowrec-topk.csv"), report.to_csv())?;
    std::fs::write(dir.join("flowrec-topk.svg"), report.to_svg())?;
    println!("report written to {}", dir.join("flowrec-topk.{csv,svg}").display());
    Ok(())
}
