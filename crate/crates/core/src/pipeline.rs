//! Glue between corpus artifacts and the models: training sequences,
//! evaluation samples, and run configuration.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusConfig, CorpusError, HistoryIndex, PersonaSeparation};
use crate::decoder::{DecoderError, ModelConfig, PersonalizedDecoder, TrainConfig, TrainExample};
use crate::eval::{
    theoretical_max_row, topk_accuracy, DecoderRanker, EvalError, EvalReport, EvalSample, History, NgramRanker,
    Strategy, DEFAULT_KS,
};
use crate::flow::{enumerate_prefix_samples, root_to_leaf_paths, ActionId, ActionVocabulary, Flow, FlowError};
use crate::ngram::{NgramError, NgramModel, DEFAULT_ALPHA, DEFAULT_ORDER};
use crate::personalize::DEFAULT_BETA;

/// One example per root-to-leaf path, each paired with the owner's
/// profile computed from their other flows.
pub fn path_examples(
    flows: &[Flow],
    vocab: &ActionVocabulary,
    history: &HistoryIndex,
) -> Result<Vec<TrainExample>, FlowError> {
    let mut out = Vec::new();
    for flow in flows {
        let profile = history.profile(&flow.user_id, Some(&flow.flow_id)).histogram;
        for tokens in root_to_leaf_paths(flow, vocab)? {
            out.push(TrainExample {
                tokens,
                profile: profile.clone(),
            });
        }
    }
    Ok(out)
}

/// Prefix samples of `flows`, each carrying the owner's history excluding
/// the flow being predicted.
pub fn eval_samples(
    flows: &[Flow],
    vocab: &ActionVocabulary,
    history: &HistoryIndex,
) -> Result<Vec<EvalSample>, FlowError> {
    let mut out = Vec::new();
    for flow in flows {
        let h = Arc::new(History::from_counts(history.counts(&flow.user_id, Some(&flow.flow_id))));
        for sample in enumerate_prefix_samples(flow, vocab)? {
            out.push(EvalSample {
                sample,
                history: Arc::clone(&h),
            });
        }
    }
    Ok(out)
}

/// Everything a pipeline run depends on; its hash identifies the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSettings,
    pub split: SplitSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub ngram: NgramSettings,
    pub eval: EvalSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub n_users: usize,
    pub separation: PersonaSeparation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to four times `embed_dim`.
    pub ffn_dim: Option<usize>,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NgramSettings {
    pub order: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// k used for accuracy within the covered set.
    pub coverage_k: usize,
    pub beta: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            corpus: CorpusSettings::default(),
            split: SplitSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig {
                learning_rate: DESK_LEARNING_RATE,
                epochs: DESK_EPOCHS,
                ..TrainConfig::default()
            },
            ngram: NgramSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Learning rate and epoch count used at desk scale; the library default
/// of 3e-4 needs several times more epochs on corpora this small.
pub const DESK_LEARNING_RATE: f64 = 1e-3;
pub const DESK_EPOCHS: usize = 6;

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings {
            n_users: 2000,
            separation: PersonaSeparation::strong(),
        }
    }
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings { test_fraction: 0.2 }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: None,
            max_len: 64,
        }
    }
}

impl Default for NgramSettings {
    fn default() -> Self {
        NgramSettings {
            order: DEFAULT_ORDER,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: DEFAULT_KS.to_vec(),
            thresholds: (0..=10).map(|i| i as f64 / 10.0).collect(),
            coverage_k: 1,
            beta: DEFAULT_BETA,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Parses a possibly partial config. Missing fields, including fields
    /// inside a section that is present, keep their default values.
    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, serde_json::from_str(json)?);
        Ok(serde_json::from_value(merged)?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig::reference_with(self.corpus.n_users, self.seed, &self.corpus.separation)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ffn_dim: m.ffn_dim.unwrap_or(4 * m.embed_dim),
            max_len: m.max_len,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, personalization_rate: f64) -> TrainConfig {
        TrainConfig {
            personalization_rate,
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(base), serde_json::Value::Object(patch)) => {
            for (key, value) in patch {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Ngram(#[from] NgramError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `git describe --always --dirty` of the working directory, or "unknown".
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Three comment lines identifying a run.
pub fn reproducibility_header(config: &PipelineConfig) -> String {
    format!(
        "# seed: {}\n# config-hash: {}\n# git: {}\n",
        config.seed,
        config.hash_hex(),
        git_describe()
    )
}

/// Root-to-leaf paths of every flow, the n-gram training sequences.
pub fn leaf_paths(flows: &[Flow], vocab: &ActionVocabulary) -> Result<Vec<Vec<ActionId>>, FlowError> {
    let mut out = Vec::new();
    for flow in flows {
        out.extend(root_to_leaf_paths(flow, vocab)?);
    }
    Ok(out)
}

/// Models compared by [`evaluate`]. `baseline` is the profile-free model
/// the inference-time strategies post-process; without it `learned` is
/// used with a zero profile.
pub struct EvalModels<'a> {
    pub learned: Option<&'a PersonalizedDecoder<f32>>,
    pub baseline: Option<&'a PersonalizedDecoder<f32>>,
    pub ngram: Option<&'a NgramModel>,
}

/// Top-k rows for every available strategy plus the theoretical maximum.
pub fn evaluate(
    models: &EvalModels,
    vocab: &ActionVocabulary,
    samples: &[EvalSample],
    settings: &EvalSettings,
    corpus: &str,
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    let ks = &settings.ks;
    let mut rows = Vec::new();
    if let Some(model) = models.learned {
        let ranker = DecoderRanker {
            model,
            vocab,
            strategy: Strategy::Learned,
        };
        rows.push(topk_accuracy(&ranker, samples, ks)?);
    }
    if let Some(model) = models.baseline.or(models.learned) {
        for strategy in [
            Strategy::None,
            Strategy::FilterConnections,
            Strategy::ReweightActions { beta: settings.beta },
        ] {
            let ranker = DecoderRanker { model, vocab, strategy };
            rows.push(topk_accuracy(&ranker, samples, ks)?);
        }
    }
    if let Some(ngram) = models.ngram {
        rows.push(topk_accuracy(&NgramRanker(ngram), samples, ks)?);
    }
    rows.push(theoretical_max_row(samples, ks)?);
    Ok(EvalReport {
        corpus: corpus.to_string(),
        seed,
        ks: ks.clone(),
        rows,
    })
}

/// Splits samples by whether the owner has any other flow.
pub fn partition_by_history(samples: &[EvalSample]) -> (Vec<EvalSample>, Vec<EvalSample>) {
    samples.iter().cloned().partition(|s| !s.history.is_empty())
}

/// The same samples with every history replaced by the empty one, the
/// new-user view.
pub fn without_history(samples: &[EvalSample], vocab_size: usize) -> Vec<EvalSample> {
    let empty = Arc::new(History::zeros(vocab_size));
    samples
        .iter()
        .map(|s| EvalSample {
            sample: s.sample.clone(),
            history: Arc::clone(&empty),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::tests::{fig3_flow, fig3_vocab, flow};

    #[test]
    fn partial_sections_keep_pipeline_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"train": {"epochs": 1}, "corpus": {"n_users": 5}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.train.learning_rate, DESK_LEARNING_RATE);
        assert_eq!(cfg.corpus.n_users, 5);
        assert_eq!(cfg.corpus.separation, PersonaSeparation::strong());
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn hash_follows_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.seed += 1;
        assert_ne!(a.hash_hex(), b.hash_hex());
        let header = reproducibility_header(&a);
        let lines: Vec<&str> = header.lines().collect();
        assert_eq!(lines[0], "# seed: 7");
        assert_eq!(lines[1], format!("# config-hash: {}", a.hash_hex()));
        assert!(lines[2].starts_with("# git: "));
    }

    #[test]
    fn profiles_exclude_the_flow_being_predicted() {
        let vocab = fig3_vocab();
        let mut a = fig3_flow();
        a.flow_id = "a".into();
        let mut b = flow("u", &[("t", 2), ("x", 6)], &[("t", "x")]);
        b.flow_id = "b".into();
        let flows = vec![a, b];
        let history = HistoryIndex::new(&flows, &vocab);
        let examples = path_examples(&flows, &vocab, &history).unwrap();
        assert_eq!(examples.len(), 3);
        // the paths of flow a see only flow b's actions, and vice versa
        assert_eq!(examples[0].profile, vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5]);
        assert_eq!(examples[2].profile[4], 1.0 / 5.0);
        let samples = eval_samples(&flows, &vocab, &history).unwrap();
        assert!(Arc::ptr_eq(&samples[0].history, &samples[1].history));
        assert_eq!(samples.last().unwrap().history.counts[6], 1);
    }
}
