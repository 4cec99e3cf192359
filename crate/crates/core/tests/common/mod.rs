#![allow(dead_code)]

use std::collections::BTreeMap;

use flowrec::corpus::{generate_corpus, Corpus, CorpusConfig};
use flowrec::flow::{ActionId, ActionKind, ActionRef, ActionVocabulary, Flow};

/// Trigger, condition, two outlook operations and one excel operation,
/// ids 2..=6.
pub fn tiny_vocab() -> ActionVocabulary {
    ActionVocabulary::new(vec![
        ActionRef::new("outlook", "when_email_arrives", ActionKind::Trigger).unwrap(),
        ActionRef::new("core", "condition", ActionKind::Control).unwrap(),
        ActionRef::new("outlook", "create_event", ActionKind::Api).unwrap(),
        ActionRef::new("outlook", "send_invite", ActionKind::Api).unwrap(),
        ActionRef::new("excel", "add_row", ActionKind::Api).unwrap(),
    ])
    .unwrap()
}

pub fn flow(flow_id: &str, user: &str, nodes: &[(&str, u32)], edges: &[(&str, &str)]) -> Flow {
    Flow {
        flow_id: flow_id.into(),
        user_id: user.into(),
        nodes: nodes.iter().map(|(n, a)| (n.to_string(), ActionId(*a))).collect(),
        edges: edges.iter().map(|(p, c)| (p.to_string(), c.to_string())).collect(),
    }
}

pub fn ids(raw: &[u32]) -> Vec<ActionId> {
    raw.iter().copied().map(ActionId).collect()
}

pub fn small_corpus(n_users: usize, seed: u64) -> Corpus {
    generate_corpus(&CorpusConfig::reference(n_users, seed)).unwrap()
}

/// Stupid backoff written directly from its recursive definition over raw
/// window counts, sharing no code with the library model.
pub struct BackoffOracle {
    order: usize,
    alpha: f64,
    windows: BTreeMap<Vec<ActionId>, u64>,
}

impl BackoffOracle {
    pub fn fit(sequences: &[Vec<ActionId>], order: usize, alpha: f64) -> Self {
        let mut windows = BTreeMap::new();
        for seq in sequences {
            for t in 1..seq.len() {
                for m in 0..order.min(t + 1) {
                    *windows.entry(seq[t - m..=t].to_vec()).or_insert(0) += 1;
                }
            }
        }
        BackoffOracle { order, alpha, windows }
    }

    fn count(&self, ctx: &[ActionId], next: ActionId) -> u64 {
        let mut key = ctx.to_vec();
        key.push(next);
        self.windows.get(&key).copied().unwrap_or(0)
    }

    fn total(&self, ctx: &[ActionId]) -> u64 {
        self.windows
            .iter()
            .filter(|(k, _)| k.len() == ctx.len() + 1 && k[..ctx.len()] == *ctx)
            .map(|(_, c)| c)
            .sum()
    }

    fn score_ctx(&self, ctx: &[ActionId], next: ActionId) -> f64 {
        let c = self.count(ctx, next);
        if c > 0 {
            return c as f64 / self.total(ctx) as f64;
        }
        if ctx.is_empty() {
            return 0.0;
        }
        self.alpha * self.score_ctx(&ctx[1..], next)
    }

    pub fn score(&self, prefix: &[ActionId], next: ActionId) -> f64 {
        let m = prefix.len().min(self.order - 1);
        self.score_ctx(&prefix[prefix.len() - m..], next)
    }

    pub fn candidates(&self) -> Vec<ActionId> {
        let mut out: Vec<ActionId> = self.windows.keys().filter(|k| k.len() == 1).map(|k| k[0]).collect();
        out.sort();
        out
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
/// descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}
