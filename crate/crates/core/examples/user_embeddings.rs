//! Projects user profiles through a trained decoder's personalization
//! layer and checks whether personas separate in the top two principal
//! components.

use flowrec::corpus::{generate_corpus, CorpusConfig, HistoryIndex};
use flowrec::decoder::{ModelConfig, PersonalizedDecoder, TrainConfig};
use flowrec::eval::{pca_2d, pca_csv, scatter_svg, silhouette};
use flowrec::pipeline::path_examples;

fn main() -> anyhow::Result<()> {
    let corpus = generate_corpus(&CorpusConfig::reference(200, 5))?;
    let vocab = &corpus.vocab;
    let history = HistoryIndex::new(&corpus.flows, vocab);
    let examples = path_examples(&corpus.flows, vocab, &history)?;
    let mut model = PersonalizedDecoder::<f32>::build_for(&ModelConfig::new(vocab.size(), 32, 2, 2), vocab)?;
    model.train(&examples, &TrainConfig { epochs: 3, learning_rate: 2e-3, ..TrainConfig::default() }, &[])?;

    // the first three personas keep the picture readable
    let keep = ["p00", "p01", "p02"];
    let users: Vec<String> = corpus
        .user_personas
        .iter()
        .filter(|(_, p)| keep.contains(&p.as_str()))
        .map(|(u, _)| u.clone())
        .collect();
    let labels: Vec<String> = users.iter().map(|u| corpus.user_personas[u].clone()).collect();
    let profiles: Vec<Vec<f64>> = users.iter().map(|u| history.profile(u, None).histogram).collect();
    let refs: Vec<&[f64]> = profiles.iter().map(Vec::as_slice).collect();
    let emb = model.export_user_embeddings(&refs)?;
    let rows: Vec<Vec<f64>> = (0..emb.rows()).map(|i| emb.row(i).iter().map(|&x| x as f64).collect()).collect();
    let pca = pca_2d(&rows)?;
    println!(
        "{} users, first two components explain {:.1}% of the variance",
        users.len(),
        100.0 * (pca.explained_variance[0] + pca.explained_variance[1]) / pca.total_variance
    );
    println!("persona silhouette {:.3}", silhouette(&pca.coords, &labels).unwrap_or(f64::NAN));
    let dir = std::env::temp_dir();
    std::fs::write(dir.join("flowrec-users.csv"), pca_csv(&users, &pca, &labels))?;
    std::fs::write(dir.join("flowrec-users.svg"), scatter_svg("user embeddings", &pca.coords, &labels))?;
    Ok(())
}
