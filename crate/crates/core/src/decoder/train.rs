use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DecoderError, PersonalizedDecoder};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Real};
use crate::flow::ActionId;

/// One training sequence (trigger first) and the profile shown with it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<ActionId>,
    pub profile: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Probability that an example keeps its profile; otherwise the
    /// profile is replaced by zeros for that step.
    pub personalization_rate: f64,
    pub learning_rate: f64,
    /// The cosine schedule decays to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            personalization_rate: 0.5,
            learning_rate: 3e-4,
            final_lr_fraction: 0.1,
            batch_size: 64,
            epochs: 10,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: &str| Err(DecoderError::TrainConfigInvalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.personalization_rate) {
            return bad("personalization_rate must be in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must be in [0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Learning rate for optimiser step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout_top1: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss of the first batch, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

impl<T: Real> PersonalizedDecoder<T> {
    pub fn train(
        &mut self,
        examples: &[TrainExample],
        config: &TrainConfig,
        heldout: &[TrainExample],
    ) -> Result<TrainLog, DecoderError> {
        self.train_with(examples, config, heldout, |_| {})
    }

    /// Teacher-forced training over every action after the trigger.
    /// Deterministic given the model seed and `config.seed`.
    pub fn train_with(
        &mut self,
        examples: &[TrainExample],
        config: &TrainConfig,
        heldout: &[TrainExample],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainLog, DecoderError> {
        config.validate()?;
        let max = self.config.max_len - 1;
        let usable: Vec<&TrainExample> = examples.iter().filter(|e| e.tokens.len() >= 2).collect();
        if usable.is_empty() {
            return Err(DecoderError::EmptyTrainingSet);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let zeros = vec![0.0; self.config.vocab_size];
        let sizes: Vec<usize> = self.named_parameters().iter().map(|(_, t)| t.len()).collect();
        let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        let mut state = AdamState::default();
        let adam = AdamConfig::default();
        let batches_per_epoch = usable.len().div_ceil(config.batch_size);
        let total_steps = batches_per_epoch * config.epochs;
        let mut log = TrainLog::default();
        let mut order: Vec<usize> = (0..usable.len()).collect();

        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut lr = config.learning_rate;
            for batch in order.chunks(config.batch_size) {
                grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = T::zero()));
                let mut batch_loss = 0.0;
                for &i in batch {
                    let ex = usable[i];
                    let keep = rng.random::<f64>() < config.personalization_rate;
                    let profile = if keep { &ex.profile[..] } else { &zeros[..] };
                    let tokens = &ex.tokens[..ex.tokens.len().min(max)];
                    let mut g = Graph::new();
                    let (loss, ids) = self.sequence_loss(&mut g, tokens, profile)?;
                    g.backward(loss)?;
                    batch_loss += g.value(loss).data()[0].as_f64();
                    for (acc, id) in grads.iter_mut().zip(ids) {
                        if let Some(gr) = g.grad(id) {
                            for (a, &x) in acc.iter_mut().zip(gr) {
                                *a = *a + x;
                            }
                        }
                    }
                }
                let n = batch.len() as f64;
                if log.steps == 0 {
                    log.initial_loss = batch_loss / n;
                }
                loss_sum += batch_loss;
                scale_and_clip(&mut grads, 1.0 / n, config.grad_clip);
                lr = config.lr_at(log.steps, total_steps);
                let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
                adam_step(&mut self.parameters_mut(), &grad_refs, &mut state, lr, &adam)?;
                log.steps += 1;
            }
            let entry = EpochLog {
                epoch,
                mean_loss: loss_sum / usable.len() as f64,
                heldout_top1: if heldout.is_empty() {
                    None
                } else {
                    Some(self.teacher_forced_top1(heldout)?)
                },
                learning_rate: lr,
            };
            on_epoch(&entry);
            log.epochs.push(entry);
        }
        Ok(log)
    }

    /// Fraction of supervised positions whose target is the arg-max.
    pub fn teacher_forced_top1(&self, examples: &[TrainExample]) -> Result<f64, DecoderError> {
        let max = self.config.max_len - 1;
        let (mut hits, mut total) = (0usize, 0usize);
        for ex in examples {
            let tokens = &ex.tokens[..ex.tokens.len().min(max)];
            if tokens.len() < 2 {
                continue;
            }
            let dists = self.distributions_along(&tokens[..tokens.len() - 1], &ex.profile)?;
            for (dist, target) in dists.iter().zip(&tokens[1..]) {
                let best = super::rank_distribution(dist, &self.output_mask, 1);
                hits += usize::from(best.first().map(|b| b.0) == Some(*target));
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
    }
}

fn scale_and_clip<T: Real>(grads: &mut [Vec<T>], scale: f64, clip: f64) {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let v = x.as_f64() * scale;
            v * v
        })
        .sum();
    let norm = norm_sq.sqrt();
    let factor = if norm > clip { scale * clip / norm } else { scale };
    let factor = T::from_f64(factor);
    grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x = *x * factor);
}
