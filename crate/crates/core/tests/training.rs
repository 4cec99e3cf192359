mod common;

use std::collections::BTreeMap;

use common::small_corpus;
use flowrec::corpus::{split_by_user, HistoryIndex};
use flowrec::decoder::{ModelConfig, PersonalizedDecoder, TrainConfig};
use flowrec::flow::ActionId;
use flowrec::pipeline::path_examples;

#[test]
fn two_hundred_flows_train_below_half_the_initial_loss() {
    let corpus = small_corpus(60, 21);
    let flows: Vec<_> = corpus.flows.iter().take(200).cloned().collect();
    assert_eq!(flows.len(), 200);
    let (train_flows, held_flows) = split_by_user(&flows, 0.2, 21);
    let history = HistoryIndex::new(&flows, &corpus.vocab);
    let train = path_examples(&train_flows, &corpus.vocab, &history).unwrap();
    let heldout = path_examples(&held_flows, &corpus.vocab, &history).unwrap();

    let cfg = ModelConfig { seed: 21, ..ModelConfig::new(corpus.vocab.size(), 32, 2, 2) };
    let mut model = PersonalizedDecoder::<f32>::build_for(&cfg, &corpus.vocab).unwrap();
    let tc = TrainConfig { learning_rate: 3e-3, epochs: 15, batch_size: 16, seed: 21, ..TrainConfig::default() };
    let log = model.train(&train, &tc, &heldout).unwrap();
    assert!(model.all_finite());
    let final_loss = log.final_loss().unwrap();
    assert!(final_loss < 0.5 * log.initial_loss, "{final_loss} vs {}", log.initial_loss);

    // most frequent training target, scored on the same held-out positions
    let mut freq: BTreeMap<ActionId, usize> = BTreeMap::new();
    for ex in &train {
        for &a in &ex.tokens[1..] {
            *freq.entry(a).or_default() += 1;
        }
    }
    let unigram = freq.iter().max_by_key(|(a, c)| (**c, std::cmp::Reverse(**a))).map(|(a, _)| *a).unwrap();
    let (hits, total) = heldout.iter().fold((0, 0), |(h, t), ex| {
        (h + ex.tokens[1..].iter().filter(|&&a| a == unigram).count(), t + ex.tokens.len() - 1)
    });
    let unigram_top1 = hits as f64 / total as f64;
    let decoder_top1 = log.epochs.last().unwrap().heldout_top1.unwrap();
    assert!(decoder_top1 >= unigram_top1, "decoder {decoder_top1} vs unigram {unigram_top1}");
}
