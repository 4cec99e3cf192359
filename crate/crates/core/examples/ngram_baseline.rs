//! Fits the stupid-backoff n-gram baseline on training paths and reports
//! its top-k accuracy next to the theoretical maximum.

use flowrec::corpus::{generate_corpus, split_by_user, CorpusConfig, HistoryIndex};
use flowrec::eval::{theoretical_max_row, topk_accuracy, NgramRanker};
use flowrec::ngram::{NgramModel, DEFAULT_ALPHA, DEFAULT_ORDER};
use flowrec::pipeline::{eval_samples, leaf_paths};

fn main() -> anyhow::Result<()> {
    let corpus = generate_corpus(&CorpusConfig::reference(300, 7))?;
    let (train, test) = split_by_user(&corpus.flows, 0.2, 7);
    let model = NgramModel::fit(&leaf_paths(&train, &corpus.vocab)?, DEFAULT_ORDER, DEFAULT_ALPHA)?;
    println!("contexts per length: {:?}", model.table_sizes());

    let trigger = corpus.flows[0].nodes[0].1;
    println!("after {}:", corpus.vocab.action(trigger).name());
    for (a, score) in model.score_next(&[trigger]).iter().take(3) {
        println!("  {:<32} {score:.3}", corpus.vocab.action(*a).name());
    }

    let samples = eval_samples(&test, &corpus.vocab, &HistoryIndex::new(&test, &corpus.vocab))?;
    let ks = [1, 3, 5];
    let ngram = topk_accuracy(&NgramRanker(&model), &samples, &ks)?;
    let max = theoretical_max_row(&samples, &ks)?;
    for (i, k) in ks.iter().enumerate() {
        println!("top-{k}: ngram {:.3}, theoretical max {:.3}", ngram.accuracy[i], max.accuracy[i]);
    }
    Ok(())
}
