//! Best achievable top-k accuracy for any ranker that only sees the prefix.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::flow::{ActionId, PrefixSample};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("no samples")]
    EmptyInput,
    #[error("k must be at least 1")]
    ZeroK,
}

/// Continuation counts grouped by exact (untruncated) prefix.
pub struct ContinuationTable<'a> {
    groups: HashMap<&'a [ActionId], BTreeMap<ActionId, usize>>,
    total: usize,
}

impl<'a> ContinuationTable<'a> {
    pub fn new(samples: &'a [PrefixSample]) -> Result<Self, OracleError> {
        if samples.is_empty() {
            return Err(OracleError::EmptyInput);
        }
        let mut groups: HashMap<&[ActionId], BTreeMap<ActionId, usize>> = HashMap::new();
        for s in samples {
            *groups.entry(&s.prefix).or_default().entry(s.target).or_default() += 1;
        }
        Ok(ContinuationTable {
            groups,
            total: samples.len(),
        })
    }

    /// Fraction of samples whose target is among the `k` most frequent
    /// continuations of its prefix.
    pub fn accuracy(&self, k: usize) -> Result<f64, OracleError> {
        if k == 0 {
            return Err(OracleError::ZeroK);
        }
        let hits: usize = self
            .groups
            .values()
            .map(|counts| {
                let mut freq: Vec<usize> = counts.values().copied().collect();
                freq.sort_unstable_by(|a, b| b.cmp(a));
                freq.iter().take(k).sum::<usize>()
            })
            .sum();
        Ok(hits as f64 / self.total as f64)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Top-k theoretical maximum over `samples`.
pub fn theoretical_max(samples: &[PrefixSample], k: usize) -> Result<f64, OracleError> {
    ContinuationTable::new(samples)?.accuracy(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(targets: &[u32]) -> Vec<PrefixSample> {
        targets
            .iter()
            .map(|&t| PrefixSample {
                user_id: "u".into(),
                flow_id: "f".into(),
                prefix: vec![ActionId(2)],
                target: ActionId(t),
            })
            .collect()
    }

    #[test]
    fn worked_example() {
        // continuations [a, b, b, c, c, c]
        let s = group(&[3, 4, 4, 5, 5, 5]);
        assert_eq!(theoretical_max(&s, 1).unwrap(), 0.5);
        assert_eq!(theoretical_max(&s, 2).unwrap(), 5.0 / 6.0);
        assert_eq!(theoretical_max(&s, 3).unwrap(), 1.0);
        assert_eq!(theoretical_max(&s, 50).unwrap(), 1.0);
    }

    #[test]
    fn groups_are_separate() {
        let mut s = group(&[3, 3, 4]);
        s.push(PrefixSample {
            prefix: vec![ActionId(2), ActionId(3)],
            ..s[2].clone()
        });
        // group 1: [3,3,4] -> 2 hits at k=1; group 2: [4] -> 1 hit
        assert_eq!(theoretical_max(&s, 1).unwrap(), 0.75);
    }

    #[test]
    fn errors() {
        assert_eq!(theoretical_max(&[], 1), Err(OracleError::EmptyInput));
        assert_eq!(theoretical_max(&group(&[3]), 0), Err(OracleError::ZeroK));
    }
}
