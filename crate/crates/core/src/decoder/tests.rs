use super::*;
use crate::flow::tests::{fig3_flow, fig3_vocab};
use crate::flow::root_to_leaf_paths;

fn ids(raw: &[u32]) -> Vec<ActionId> {
    raw.iter().map(|&i| ActionId(i)).collect()
}

fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        embed_dim: 4,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 8,
        max_len: 6,
        seed: 11,
    }
}

/// Randomises every tensor, biases and norms included, so that no
/// parameter sits at a special value.
fn perturbed(model: &mut PersonalizedDecoder<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 0.5).unwrap();
    for t in model.parameters_mut() {
        for x in t.data_mut() {
            *x += dist.sample(&mut rng);
        }
    }
}

#[test]
fn reference_size_parameter_audit() {
    let config = ModelConfig::production(1423);
    let model = PersonalizedDecoder::<f32>::build(&config).unwrap();
    assert_eq!(model.num_parameters(), config.parameter_count());
    assert_eq!(config.parameter_count(), 2_325_248);
    assert!((2_200_000..=2_500_000).contains(&model.num_parameters()));
}

#[test]
fn config_validation() {
    let ok = tiny_config(7);
    assert!(ok.validate().is_ok());
    for bad in [
        ModelConfig { embed_dim: 5, ..ok.clone() },
        ModelConfig { n_layers: 0, ..ok.clone() },
        ModelConfig { max_len: 1, ..ok.clone() },
        ModelConfig { vocab_size: 2, ..ok.clone() },
    ] {
        assert!(matches!(
            PersonalizedDecoder::<f32>::build(&bad),
            Err(DecoderError::ConfigInvalid(_))
        ));
    }
    let vocab = fig3_vocab();
    assert!(PersonalizedDecoder::<f32>::build_for(&tiny_config(9), &vocab).is_err());
}

#[test]
fn initialisation_is_seeded() {
    let a = PersonalizedDecoder::<f32>::build(&tiny_config(7)).unwrap();
    let b = PersonalizedDecoder::<f32>::build(&tiny_config(7)).unwrap();
    let c = PersonalizedDecoder::<f32>::build(&ModelConfig { seed: 12, ..tiny_config(7) }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.tok_emb, c.tok_emb);
}

#[test]
fn embedded_input_layout() {
    let vocab = fig3_vocab();
    let mut model = PersonalizedDecoder::<f64>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    perturbed(&mut model, 1);
    let profile = [0.0, 0.0, 0.25, 0.25, 0.5, 0.0, 0.0];
    let tokens = ids(&[2, 3, 4]);
    let x = model.embed_input(&tokens, &profile).unwrap();
    let d = 4;
    assert_eq!(x.shape(), &[4, d]);
    for j in 0..d {
        let projected: f64 = (0..7).map(|i| profile[i] * model.profile_w.data()[i * d + j]).sum::<f64>()
            + model.profile_b.data()[j];
        assert!((x.row(0)[j] - projected - model.pos_emb.row(0)[j]).abs() < 1e-12);
        for (t, tok) in tokens.iter().enumerate() {
            let want = model.tok_emb.row(tok.index())[j] + model.pos_emb.row(t + 1)[j];
            assert_eq!(x.row(t + 1)[j], want);
        }
    }
    assert!(matches!(
        model.embed_input(&ids(&[2, 3, 4, 5, 6, 3]), &profile),
        Err(DecoderError::TooLong { len: 6, max: 5 })
    ));
    assert!(matches!(model.embed_input(&ids(&[1]), &profile), Err(DecoderError::InvalidToken(1))));
    assert!(matches!(model.embed_input(&ids(&[7]), &profile), Err(DecoderError::InvalidToken(7))));
    assert!(matches!(
        model.embed_input(&tokens, &profile[..3]),
        Err(DecoderError::ProfileSize { got: 3, expected: 7 })
    ));
}

// Plain nested-loop evaluation of the same network, used as an oracle.
mod straight_line {
    use super::*;

    type M = Vec<Vec<f64>>;

    fn mat(t: &Tensor<f64>) -> M {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn vecf(t: &Tensor<f64>) -> Vec<f64> {
        t.data().to_vec()
    }

    fn mm(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    fn bias(mut a: M, b: &[f64]) -> M {
        a.iter_mut().for_each(|r| r.iter_mut().zip(b).for_each(|(x, y)| *x += y));
        a
    }

    fn plus(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn norm(a: &M, g: &[f64], b: &[f64]) -> M {
        a.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, x)| (x - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn softmax(r: &[f64]) -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn last_distribution(model: &PersonalizedDecoder<f64>, tokens: &[ActionId], profile: &[f64]) -> Vec<f64> {
        let c = model.config();
        let d = c.embed_dim;
        let tok = mat(&model.tok_emb);
        let pos = mat(&model.pos_emb);
        let mut x: M = vec![bias(mm(&vec![profile.to_vec()], &mat(&model.profile_w)), &vecf(&model.profile_b))[0].clone()];
        for t in tokens {
            x.push(tok[t.index()].clone());
        }
        for (i, row) in x.iter_mut().enumerate() {
            row.iter_mut().zip(&pos[i]).for_each(|(a, b)| *a += b);
        }
        let n = x.len();
        let dh = d / c.n_heads;
        for b in &model.blocks {
            let h = norm(&x, &vecf(&b.ln1_g), &vecf(&b.ln1_b));
            let q = bias(mm(&h, &mat(&b.wq)), &vecf(&b.bq));
            let k = bias(mm(&h, &mat(&b.wk)), &vecf(&b.bk));
            let v = bias(mm(&h, &mat(&b.wv)), &vecf(&b.bv));
            let mut merged = vec![vec![0.0; d]; n];
            for head in 0..c.n_heads {
                let cols = head * dh..(head + 1) * dh;
                for i in 0..n {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| cols.clone().map(|col| q[i][col] * k[j][col]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let w = softmax(&scores);
                    for col in cols.clone() {
                        merged[i][col] = (0..=i).map(|j| w[j] * v[j][col]).sum();
                    }
                }
            }
            let a = bias(mm(&merged, &mat(&b.wo)), &vecf(&b.bo));
            x = plus(&x, &a);
            let h = norm(&x, &vecf(&b.ln2_g), &vecf(&b.ln2_b));
            let mut u = bias(mm(&h, &mat(&b.w1)), &vecf(&b.b1));
            u.iter_mut().for_each(|r| r.iter_mut().for_each(|z| *z = gelu(*z)));
            let f = bias(mm(&u, &mat(&b.w2)), &vecf(&b.b2));
            x = plus(&x, &f);
        }
        let x = norm(&x, &vecf(&model.lnf_g), &vecf(&model.lnf_b));
        let last = &x[n - 1];
        let mask = model.output_mask();
        let logits: Vec<f64> = tok
            .iter()
            .enumerate()
            .map(|(id, e)| if mask[id] { f64::NEG_INFINITY } else { last.iter().zip(e).map(|(a, b)| a * b).sum() })
            .collect();
        softmax(&logits)
    }
}

#[test]
fn matches_straight_line_evaluation() {
    let vocab = fig3_vocab();
    let mut model = PersonalizedDecoder::<f64>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    perturbed(&mut model, 2);
    let profile = [0.0, 0.0, 0.1, 0.2, 0.3, 0.4, 0.0];
    for prefix in [ids(&[2]), ids(&[2, 3]), ids(&[2, 3, 4, 5])] {
        let got = model.forward(&prefix, &profile).unwrap();
        let want = straight_line::last_distribution(&model, &prefix, &profile);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn smallest_model_matches_straight_line_evaluation() {
    let config = ModelConfig {
        vocab_size: 4,
        embed_dim: 2,
        n_layers: 1,
        n_heads: 1,
        ffn_dim: 8,
        max_len: 4,
        seed: 3,
    };
    let mut model = PersonalizedDecoder::<f64>::build(&config).unwrap();
    perturbed(&mut model, 9);
    let profile = [0.0, 0.0, 0.75, 0.25];
    for prefix in [ids(&[2]), ids(&[2, 3]), ids(&[2, 3, 3])] {
        let got = model.forward(&prefix, &profile).unwrap();
        let want = straight_line::last_distribution(&model, &prefix, &profile);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn forward_is_a_distribution_over_predictable_actions() {
    let vocab = fig3_vocab();
    let model = PersonalizedDecoder::<f32>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    let dist = model.forward(&ids(&[2, 3]), &[0.0; 7]).unwrap();
    let total: f32 = dist.iter().sum();
    assert!((total - 1.0).abs() < 1e-5);
    assert_eq!(&dist[..3], &[0.0, 0.0, 0.0]);
    assert!(dist[3..].iter().all(|&p| p > 0.0));
    assert!(matches!(model.forward(&[], &[0.0; 7]), Err(DecoderError::InvalidToken(0))));
}

#[test]
fn one_pass_equals_per_prefix_passes() {
    let vocab = fig3_vocab();
    let mut model = PersonalizedDecoder::<f64>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    perturbed(&mut model, 3);
    let model = model.cast::<f32>();
    let profile = [0.0, 0.0, 0.5, 0.0, 0.5, 0.0, 0.0];
    let path = ids(&[2, 3, 4, 5]);
    let along = model.distributions_along(&path, &profile).unwrap();
    for t in 0..path.len() {
        assert_eq!(along[t], model.forward(&path[..=t], &profile).unwrap());
    }
}

#[test]
fn suggest_ranks_unmasked_actions() {
    let vocab = fig3_vocab();
    let model = PersonalizedDecoder::<f32>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    let all = model.suggest(&ids(&[2]), &[0.0; 7], vocab.size()).unwrap();
    assert_eq!(all.len(), 4);
    assert!(all.iter().all(|(id, _)| id.0 >= 3));
    assert!((all.iter().map(|x| x.1).sum::<f32>() - 1.0).abs() < 1e-5);
    assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
    assert_eq!(model.suggest(&ids(&[2]), &[0.0; 7], 2).unwrap(), all[..2].to_vec());
    // prefixes beyond the window keep their most recent actions
    let long = ids(&[2, 3, 4, 5, 6, 3, 4]);
    assert_eq!(
        model.suggest(&long, &[0.0; 7], 3).unwrap(),
        model.suggest(&long[2..], &[0.0; 7], 3).unwrap()
    );
}

#[test]
fn rank_ties_break_by_id() {
    let ranked = rank_distribution(&[0.0f64, 0.0, 0.3, 0.3, 0.4], &[true, true, false, false, false], 5);
    assert_eq!(ranked.iter().map(|r| r.0 .0).collect::<Vec<_>>(), vec![4, 2, 3]);
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let vocab = fig3_vocab();
    let mut model = PersonalizedDecoder::<f64>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    perturbed(&mut model, 4);
    let tokens = ids(&[2, 3, 4, 5]);
    let profile = [0.0, 0.0, 0.2, 0.3, 0.1, 0.4, 0.0];
    let loss_of = |m: &PersonalizedDecoder<f64>| {
        let mut g = Graph::new();
        let (loss, _) = m.sequence_loss(&mut g, &tokens, &profile).unwrap();
        g.value(loss).data()[0]
    };
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let (loss, params) = model.sequence_loss(&mut g, &tokens, &profile).unwrap();
        g.backward(loss).unwrap();
        params.iter().map(|&p| g.grad(p).unwrap().to_vec()).collect()
    };
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (t, name) in names.iter().enumerate() {
        for i in 0..analytic[t].len() {
            let mut probe = model.clone();
            probe.parameters_mut()[t].data_mut()[i] += h;
            let plus = loss_of(&probe);
            probe.parameters_mut()[t].data_mut()[i] -= 2.0 * h;
            let minus = loss_of(&probe);
            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic[t][i];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {ad} numeric {fd}");
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn user_embeddings_are_profile_projections() {
    let vocab = fig3_vocab();
    let mut model = PersonalizedDecoder::<f64>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    perturbed(&mut model, 5);
    let a = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let z = [0.0; 7];
    let e = model.export_user_embeddings(&[&a, &z]).unwrap();
    assert_eq!(e.shape(), &[2, 4]);
    for j in 0..4 {
        assert!((e.row(0)[j] - model.profile_w.row(2)[j] - model.profile_b.data()[j]).abs() < 1e-12);
        assert_eq!(e.row(1)[j], model.profile_b.data()[j]);
    }
}

fn fig3_examples() -> Vec<TrainExample> {
    let vocab = fig3_vocab();
    let profile = vec![0.0, 0.0, 0.2, 0.2, 0.2, 0.2, 0.2];
    root_to_leaf_paths(&fig3_flow(), &vocab)
        .unwrap()
        .into_iter()
        .map(|tokens| TrainExample { tokens, profile: profile.clone() })
        .collect()
}

fn quick_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 2,
        epochs: 150,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_single_flow() {
    let vocab = fig3_vocab();
    let config = ModelConfig { embed_dim: 16, n_heads: 2, ffn_dim: 32, ..tiny_config(vocab.size()) };
    let mut model = PersonalizedDecoder::<f32>::build_for(&config, &vocab).unwrap();
    let examples = fig3_examples();
    let log = model.train(&examples, &quick_train_config(), &examples).unwrap();
    assert!(log.final_loss().unwrap() < 0.5 * log.initial_loss);
    assert!(model.all_finite());
    let profile = &examples[0].profile;
    // after the condition both branches are equally likely
    let top = |prefix: &[u32]| model.suggest(&ids(prefix), profile, 1).unwrap()[0].0;
    assert_eq!(top(&[2]), ActionId(3));
    assert_eq!(top(&[2, 3, 4]), ActionId(5));
    let branches = model.suggest(&ids(&[2, 3]), profile, 2).unwrap();
    let mut branch_ids: Vec<u32> = branches.iter().map(|b| b.0 .0).collect();
    branch_ids.sort();
    assert_eq!(branch_ids, vec![4, 6]);
    assert!(log.epochs.last().unwrap().heldout_top1.unwrap() >= 0.75);
}

#[test]
fn training_is_bit_reproducible() {
    let vocab = fig3_vocab();
    let run = || {
        let mut model = PersonalizedDecoder::<f32>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
        let cfg = TrainConfig { epochs: 5, ..quick_train_config() };
        let log = model.train(&fig3_examples(), &cfg, &[]).unwrap();
        (model, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn zero_rate_ignores_profiles() {
    let vocab = fig3_vocab();
    let run = |profile: Vec<f64>| {
        let mut model = PersonalizedDecoder::<f32>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
        let examples: Vec<TrainExample> = fig3_examples()
            .into_iter()
            .map(|e| TrainExample { profile: profile.clone(), ..e })
            .collect();
        let cfg = TrainConfig { epochs: 4, personalization_rate: 0.0, ..quick_train_config() };
        model.train(&examples, &cfg, &[]).unwrap()
    };
    assert_eq!(run(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]), run(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]));
}

#[test]
fn training_rejects_bad_input() {
    let vocab = fig3_vocab();
    let mut model = PersonalizedDecoder::<f32>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    let lone = vec![TrainExample { tokens: ids(&[2]), profile: vec![0.0; 7] }];
    assert!(matches!(model.train(&lone, &TrainConfig::default(), &[]), Err(DecoderError::EmptyTrainingSet)));
    let cfg = TrainConfig { personalization_rate: 1.5, ..TrainConfig::default() };
    assert!(matches!(model.train(&fig3_examples(), &cfg, &[]), Err(DecoderError::TrainConfigInvalid(_))));
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig { learning_rate: 1.0, final_lr_fraction: 0.1, ..TrainConfig::default() };
    assert_eq!(cfg.lr_at(0, 11), 1.0);
    assert!((cfg.lr_at(10, 11) - 0.1).abs() < 1e-12);
    assert!((cfg.lr_at(5, 11) - 0.55).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let vocab = fig3_vocab();
    let mut model = PersonalizedDecoder::<f32>::build_for(&tiny_config(vocab.size()), &vocab).unwrap();
    model.train(&fig3_examples(), &TrainConfig { epochs: 3, ..quick_train_config() }, &[]).unwrap();
    let mut bytes = Vec::new();
    model.write_to(&mut bytes, &vocab).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let loaded = PersonalizedDecoder::read_from(&mut bytes.as_slice(), &vocab).unwrap();
    assert_eq!(loaded, model);
    let p = [0.0, 0.0, 0.3, 0.3, 0.4, 0.0, 0.0];
    assert_eq!(loaded.forward(&ids(&[2, 3]), &p).unwrap(), model.forward(&ids(&[2, 3]), &p).unwrap());

    let other = ActionVocabulary::new(vec![
        crate::flow::ActionRef::new("a", "t", ActionKind::Trigger).unwrap(),
        crate::flow::ActionRef::new("a", "b", ActionKind::Api).unwrap(),
        crate::flow::ActionRef::new("a", "c", ActionKind::Api).unwrap(),
        crate::flow::ActionRef::new("a", "d", ActionKind::Api).unwrap(),
        crate::flow::ActionRef::new("a", "e", ActionKind::Api).unwrap(),
    ])
    .unwrap();
    assert!(matches!(
        PersonalizedDecoder::read_from(&mut bytes.as_slice(), &other),
        Err(DecoderError::HashMismatch { .. })
    ));
    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(
        PersonalizedDecoder::read_from(&mut &truncated[..], &vocab),
        Err(DecoderError::CorruptCheckpoint(_))
    ));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(
        PersonalizedDecoder::read_from(&mut trailing.as_slice(), &vocab),
        Err(DecoderError::CorruptCheckpoint(_))
    ));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        PersonalizedDecoder::read_from(&mut bad_magic.as_slice(), &vocab),
        Err(DecoderError::CorruptCheckpoint(_))
    ));
}
