//! Inference-time personalization applied to the output distribution of a
//! model that never saw a profile.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::flow::{ActionId, ActionKind, ActionVocabulary};

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum PersonalizeError {
    #[error("smoothing beta must be positive, got {0}")]
    BetaNonPositive(f64),
    #[error("histogram has {got} entries, expected {expected}")]
    SizeMismatch { got: usize, expected: usize },
}

/// Connections with at least one used API action in `counts`.
pub fn seen_connections(counts: &[u32], vocab: &ActionVocabulary) -> BTreeSet<String> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .filter_map(|(i, _)| vocab.get(ActionId(i as u32)))
        .filter(|a| a.kind == ActionKind::Api)
        .map(|a| a.connection.clone())
        .collect()
}

/// Zeroes API actions of connections the user never used, keeps control
/// actions, and renormalizes. Returns `dist` unchanged if nothing survives.
pub fn filter_by_connections(
    dist: &[f64],
    seen: &BTreeSet<String>,
    vocab: &ActionVocabulary,
) -> Vec<f64> {
    let filtered: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(i, &p)| match vocab.get(ActionId(i as u32)) {
            Some(a) if a.kind == ActionKind::Api && !seen.contains(&a.connection) => 0.0,
            _ => p,
        })
        .collect();
    let total: f64 = filtered.iter().sum();
    if total <= 0.0 {
        return dist.to_vec();
    }
    filtered.iter().map(|p| p / total).collect()
}

/// `dist(a) * (count(a) + beta) / (sum(counts) + beta * V)`, renormalized.
/// `V` is the length of `dist`.
pub fn reweight_by_actions(dist: &[f64], counts: &[u32], beta: f64) -> Result<Vec<f64>, PersonalizeError> {
    if !(beta > 0.0) {
        return Err(PersonalizeError::BetaNonPositive(beta));
    }
    if counts.len() != dist.len() {
        return Err(PersonalizeError::SizeMismatch {
            got: counts.len(),
            expected: dist.len(),
        });
    }
    let total = counts.iter().map(|&c| c as f64).sum::<f64>() + beta * dist.len() as f64;
    let weighted: Vec<f64> = dist
        .iter()
        .zip(counts)
        .map(|(p, &c)| p * (c as f64 + beta) / total)
        .collect();
    let norm: f64 = weighted.iter().sum();
    if norm <= 0.0 {
        return Ok(dist.to_vec());
    }
    Ok(weighted.iter().map(|w| w / norm).collect())
}
