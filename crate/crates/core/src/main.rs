use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flowrec::corpus::{generate_corpus, split_by_user, HistoryIndex, ProfileStore};
use flowrec::decoder::{PersonalizedDecoder, TrainLog};
use flowrec::eval::{confidence_coverage, pca_2d, pca_csv, scatter_svg, silhouette, DecoderRanker, Strategy};
use flowrec::flow::{read_flows_jsonl, write_flows_jsonl, ActionVocabulary};
use flowrec::ngram::NgramModel;
use flowrec::oracle::ContinuationTable;
use flowrec::pipeline::{
    eval_samples, evaluate, leaf_paths, partition_by_history, path_examples, reproducibility_header, EvalModels,
    PipelineConfig,
};
use flowrec::service::{serve, Engine, SnapshotSlot};

#[derive(Parser)]
#[command(name = "flowrec", about = "Personalized next-action recommendation for workflow flows")]
struct Cli {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON pipeline config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a persona-structured synthetic corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a corpus into train and test users.
    Split(SplitArgs),
    /// Write the per-user action-count store used by the service.
    ProfileStore {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the decoder.
    Train(TrainArgs),
    /// Fit the n-gram baseline.
    Ngram {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k evaluation of every strategy on test flows.
    Eval(EvalArgs),
    /// Theoretical maximum top-k accuracy of the test flows.
    Oracle {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// PCA of learned user embeddings, coloured by persona.
    EmbedViz(EmbedArgs),
    /// HTTP suggestion service.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Args)]
struct SplitArgs {
    /// Directory written by gen-corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Flows used to build profiles; defaults to the training flows.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Probability of keeping a training example's profile.
    #[arg(long, default_value_t = 0.5)]
    personalization_rate: f64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Per-epoch training log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Personalized decoder checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Decoder trained without profiles, post-processed by the
    /// inference-time strategies.
    #[arg(long)]
    baseline_model: Option<PathBuf>,
    #[arg(long)]
    ngram: Option<PathBuf>,
    /// Evaluate only test samples whose user has other flows.
    #[arg(long)]
    profiled_only: bool,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Coverage table of the personalized model.
    #[arg(long)]
    coverage_csv: Option<PathBuf>,
    /// Per-rank probability summaries of the personalized model.
    #[arg(long)]
    rank_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Flows whose owners are embedded.
    #[arg(long)]
    flows: PathBuf,
    /// `personas.json` written by gen-corpus.
    #[arg(long)]
    personas: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<ActionVocabulary> {
    ActionVocabulary::load(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn load_flows(path: &Path, vocab: &ActionVocabulary) -> Result<Vec<flowrec::flow::Flow>> {
    read_flows_jsonl(path, vocab).with_context(|| format!("reading flows {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    print!("{}", reproducibility_header(&config));
    match cli.command {
        Command::GenCorpus { out } => {
            std::fs::create_dir_all(&out)?;
            let corpus_config = config.corpus_config();
            let corpus = generate_corpus(&corpus_config)?;
            corpus.vocab.save(out.join("vocab.json"))?;
            write_flows_jsonl(out.join("flows.jsonl"), &corpus.flows, &corpus.vocab)?;
            write(&out.join("personas.json"), &serde_json::to_string_pretty(&corpus.user_personas)?)?;
            write(&out.join("corpus_config.json"), &serde_json::to_string_pretty(&corpus_config)?)?;
            println!(
                "{} users, {} flows, {} actions -> {}",
                corpus.user_personas.len(),
                corpus.flows.len(),
                corpus.vocab.num_actions(),
                out.display()
            );
        }
        Command::Split(args) => {
            let vocab = load_vocab(&args.corpus.join("vocab.json"))?;
            let flows = load_flows(&args.corpus.join("flows.jsonl"), &vocab)?;
            let (train, test) = split_by_user(&flows, config.split.test_fraction, config.seed);
            std::fs::create_dir_all(&args.out)?;
            write_flows_jsonl(args.out.join("train.jsonl"), &train, &vocab)?;
            write_flows_jsonl(args.out.join("test.jsonl"), &test, &vocab)?;
            println!("train {} flows, test {} flows", train.len(), test.len());
        }
        Command::ProfileStore { vocab, flows, out } => {
            let vocab = load_vocab(&vocab)?;
            let flows = load_flows(&flows, &vocab)?;
            let store = ProfileStore::from_flows(&flows, &vocab);
            store.save(&out)?;
            println!("{} user profiles -> {}", store.users.len(), out.display());
        }
        Command::Train(args) => train(&config, args)?,
        Command::Ngram { vocab, train, out } => {
            let vocab = load_vocab(&vocab)?;
            let flows = load_flows(&train, &vocab)?;
            let model = NgramModel::fit(&leaf_paths(&flows, &vocab)?, config.ngram.order, config.ngram.alpha)?;
            model.save(&out, &vocab)?;
            println!("context tables {:?} -> {}", model.table_sizes(), out.display());
        }
        Command::Eval(args) => eval(&config, args)?,
        Command::Oracle { vocab, test, out_csv } => {
            let vocab = load_vocab(&vocab)?;
            let flows = load_flows(&test, &vocab)?;
            let samples: Vec<_> = eval_samples(&flows, &vocab, &HistoryIndex::new(&flows, &vocab))?
                .into_iter()
                .map(|s| s.sample)
                .collect();
            let table = ContinuationTable::new(&samples)?;
            let mut csv = String::from("strategy,k,accuracy,n\n");
            for &k in &config.eval.ks {
                csv.push_str(&format!("theoretical-max,{k},{},{}\n", table.accuracy(k)?, samples.len()));
            }
            print!("{csv}");
            if let Some(path) = out_csv {
                write(&path, &csv)?;
            }
        }
        Command::EmbedViz(args) => embed_viz(args)?,
        Command::Serve {
            model,
            vocab,
            profiles,
            addr,
        } => {
            let engine = Engine::load(&model, &vocab, &profiles)?;
            println!("model {} listening on {addr}", engine.model_version());
            let slot = Arc::new(SnapshotSlot::with(engine));
            tokio::runtime::Runtime::new()?.block_on(serve(&addr, slot))?;
        }
    }
    Ok(())
}

fn train(config: &PipelineConfig, args: TrainArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let flows = load_flows(&args.train, &vocab)?;
    let history_flows = match &args.history {
        Some(path) => load_flows(path, &vocab)?,
        None => flows.clone(),
    };
    let history = HistoryIndex::new(&history_flows, &vocab);
    let examples = path_examples(&flows, &vocab, &history)?;
    let mut train_config = config.train_config(args.personalization_rate);
    if let Some(epochs) = args.epochs {
        train_config.epochs = epochs;
    }
    let mut model = PersonalizedDecoder::<f32>::build_for(&config.model_config(vocab.size()), &vocab)?;
    println!(
        "{} parameters, {} sequences, personalization rate {}",
        model.num_parameters(),
        examples.len(),
        train_config.personalization_rate
    );
    let log: TrainLog = model.train_with(&examples, &train_config, &[], |e| {
        println!("epoch {:>3}  loss {:.4}  lr {:.2e}", e.epoch + 1, e.mean_loss, e.learning_rate)
    })?;
    model.save(&args.out, &vocab)?;
    if let Some(path) = args.log {
        write(&path, &serde_json::to_string_pretty(&log)?)?;
    }
    println!("initial loss {:.4} -> {}", log.initial_loss, args.out.display());
    Ok(())
}

fn eval(config: &PipelineConfig, args: EvalArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let flows = load_flows(&args.test, &vocab)?;
    let mut samples = eval_samples(&flows, &vocab, &HistoryIndex::new(&flows, &vocab))?;
    if args.profiled_only {
        samples = partition_by_history(&samples).0;
    }
    if samples.is_empty() {
        bail!("no evaluation samples");
    }
    let learned = args.model.as_ref().map(|p| PersonalizedDecoder::load(p, &vocab)).transpose()?;
    let baseline = args.baseline_model.as_ref().map(|p| PersonalizedDecoder::load(p, &vocab)).transpose()?;
    let ngram = args.ngram.as_ref().map(|p| NgramModel::load(p, &vocab)).transpose()?;
    let models = EvalModels {
        learned: learned.as_ref(),
        baseline: baseline.as_ref(),
        ngram: ngram.as_ref(),
    };
    let corpus = args.test.display().to_string();
    let report = evaluate(&models, &vocab, &samples, &config.eval, &corpus, config.seed)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = &args.out_csv {
        write(path, &csv)?;
    }
    if let Some(path) = &args.svg {
        write(path, &report.to_svg())?;
    }
    if let Some(path) = &args.json {
        write(path, &report.to_json())?;
    }
    if args.coverage_csv.is_some() || args.rank_csv.is_some() {
        let Some(model) = learned.as_ref() else {
            bail!("coverage needs --model");
        };
        let ranker = DecoderRanker {
            model,
            vocab: &vocab,
            strategy: Strategy::Learned,
        };
        let coverage = confidence_coverage(&ranker, &samples, &config.eval.thresholds, config.eval.coverage_k)?;
        if let Some(path) = &args.coverage_csv {
            write(path, &coverage.to_csv())?;
        }
        if let Some(path) = &args.rank_csv {
            write(path, &coverage.rank_csv())?;
        }
    }
    Ok(())
}

fn embed_viz(args: EmbedArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let model = PersonalizedDecoder::load(&args.model, &vocab)?;
    let flows = load_flows(&args.flows, &vocab)?;
    let personas: BTreeMap<String, String> = serde_json::from_str(&std::fs::read_to_string(&args.personas)?)?;
    let history = HistoryIndex::new(&flows, &vocab);
    let mut users: Vec<String> = history.users().map(str::to_string).collect();
    users.sort();
    let profiles: Vec<Vec<f64>> = users.iter().map(|u| history.profile(u, None).histogram).collect();
    let refs: Vec<&[f64]> = profiles.iter().map(Vec::as_slice).collect();
    let embeddings = model.export_user_embeddings(&refs)?;
    let rows: Vec<Vec<f64>> = (0..embeddings.rows())
        .map(|r| embeddings.row(r).iter().map(|&x| x as f64).collect())
        .collect();
    let pca = pca_2d(&rows)?;
    let labels: Vec<String> = users
        .iter()
        .map(|u| personas.get(u).cloned().unwrap_or_else(|| "unknown".into()))
        .collect();
    write(&args.out_csv, &pca_csv(&users, &pca, &labels))?;
    if let Some(path) = &args.svg {
        write(path, &scatter_svg("user embeddings", &pca.coords, &labels))?;
    }
    println!(
        "{} users, explained variance {:.4} / {:.4} of {:.4}, persona silhouette {}",
        users.len(),
        pca.explained_variance[0],
        pca.explained_variance[1],
        pca.total_variance,
        silhouette(&pca.coords, &labels).map_or("n/a".into(), |s| format!("{s:.4}"))
    );
    Ok(())
}
