//! How many suggestions survive a top-1 confidence threshold, and how
//! accurate the surviving ones are.

use flowrec::corpus::{generate_corpus, split_by_user, CorpusConfig, HistoryIndex};
use flowrec::decoder::{ModelConfig, PersonalizedDecoder, TrainConfig};
use flowrec::eval::{confidence_coverage, DecoderRanker, Strategy};
use flowrec::pipeline::{eval_samples, path_examples};

fn main() -> anyhow::Result<()> {
    let corpus = generate_corpus(&CorpusConfig::reference(200, 3))?;
    let vocab = &corpus.vocab;
    let (train, test) = split_by_user(&corpus.flows, 0.2, 3);
    let examples = path_examples(&train, vocab, &HistoryIndex::new(&train, vocab))?;
    let mut model = PersonalizedDecoder::<f32>::build_for(&ModelConfig::new(vocab.size(), 32, 2, 2), vocab)?;
    model.train(&examples, &TrainConfig { epochs: 3, learning_rate: 2e-3, ..TrainConfig::default() }, &[])?;

    let samples = eval_samples(&test, vocab, &HistoryIndex::new(&test, vocab))?;
    let ranker = DecoderRanker { model: &model, vocab, strategy: Strategy::Learned };
    let thresholds: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let report = confidence_coverage(&ranker, &samples, &thresholds, 1)?;
    println!("{:>9} {:>9} {:>9}", "threshold", "coverage", "top-1");
    for p in &report.points {
        let acc = p.accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
        println!("{:>9.1} {:>9.3} {acc:>9}", p.threshold, p.coverage);
    }
    println!("median probability of the target when ranked first: {:.3}", report.target_probability_at_rank[0].median.unwrap_or(f64::NAN));
    Ok(())
}
