//! Count-based next-action baseline with stupid backoff.
//!
//! Scores are relative frequencies after the longest matching context,
//! discounted by `alpha` per backed-off step. They are not probabilities;
//! only the ranking is meaningful.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::flow::{ActionId, ActionVocabulary};

pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.4;

const MAGIC: &[u8; 4] = b"NGM1";

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("no training sequence has a next action to count")]
    EmptyCorpus,
    #[error("invalid n-gram parameters: {0}")]
    InvalidParams(String),
    #[error("vocabulary hash mismatch: model {model}, vocabulary {vocab}")]
    HashMismatch { model: String, vocab: String },
    #[error("corrupt n-gram file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextCounts {
    pub total: u64,
    pub next: BTreeMap<ActionId, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    order: usize,
    alpha: f64,
    /// `levels[m]` maps an m-token context to its continuation counts.
    levels: Vec<HashMap<Vec<ActionId>, ContextCounts>>,
}

impl NgramModel {
    /// Counts every (context, next) window with context length `0..order`.
    pub fn fit(sequences: &[Vec<ActionId>], order: usize, alpha: f64) -> Result<Self, NgramError> {
        if order == 0 {
            return Err(NgramError::InvalidParams("order must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(NgramError::InvalidParams(format!("alpha {alpha} outside (0, 1]")));
        }
        let mut levels: Vec<HashMap<Vec<ActionId>, ContextCounts>> = vec![HashMap::new(); order];
        for seq in sequences {
            for i in 1..seq.len() {
                let next = seq[i];
                for (m, level) in levels.iter_mut().enumerate().take(i.min(order - 1) + 1) {
                    let entry = level.entry(seq[i - m..i].to_vec()).or_default();
                    entry.total += 1;
                    *entry.next.entry(next).or_default() += 1;
                }
            }
        }
        if levels[0].is_empty() {
            return Err(NgramError::EmptyCorpus);
        }
        Ok(NgramModel {
            order,
            alpha,
            levels,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self, context: &[ActionId]) -> Option<&ContextCounts> {
        self.levels.get(context.len())?.get(context)
    }

    pub fn count(&self, context: &[ActionId], next: ActionId) -> u64 {
        self.counts(context)
            .and_then(|c| c.next.get(&next).copied())
            .unwrap_or(0)
    }

    /// Number of distinct contexts stored at each context length.
    pub fn table_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(HashMap::len).collect()
    }

    /// Every action seen as a continuation, ranked by backoff score
    /// (descending, ties by ascending id).
    pub fn score_next(&self, prefix: &[ActionId]) -> Vec<(ActionId, f64)> {
        let longest = prefix.len().min(self.order - 1);
        let mut scores: BTreeMap<ActionId, f64> = BTreeMap::new();
        for m in (0..=longest).rev() {
            let Some(ctx) = self.levels[m].get(&prefix[prefix.len() - m..]) else {
                continue;
            };
            let discount = self.alpha.powi((longest - m) as i32);
            for (&a, &c) in &ctx.next {
                scores
                    .entry(a)
                    .or_insert_with(|| discount * (c as f64 / ctx.total as f64));
            }
        }
        let mut ranked: Vec<(ActionId, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    pub fn write_to(&self, out: &mut impl Write, vocab: &ActionVocabulary) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&vocab.content_hash())?;
        out.write_all(&(self.order as u32).to_le_bytes())?;
        out.write_all(&self.alpha.to_le_bytes())?;
        for level in &self.levels {
            let mut contexts: Vec<_> = level.iter().collect();
            contexts.sort_by(|a, b| a.0.cmp(b.0));
            out.write_all(&(contexts.len() as u64).to_le_bytes())?;
            for (ctx, counts) in contexts {
                out.write_all(&(ctx.len() as u32).to_le_bytes())?;
                for a in ctx {
                    out.write_all(&a.0.to_le_bytes())?;
                }
                out.write_all(&(counts.next.len() as u32).to_le_bytes())?;
                for (a, c) in &counts.next {
                    out.write_all(&a.0.to_le_bytes())?;
                    out.write_all(&c.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read, vocab: &ActionVocabulary) -> Result<Self, NgramError> {
        let mut r = Reader(input);
        if &r.array::<4>()? != MAGIC {
            return Err(NgramError::Corrupt("bad magic".into()));
        }
        let hash = r.array::<32>()?;
        if hash != vocab.content_hash() {
            return Err(NgramError::HashMismatch {
                model: hex::encode(hash),
                vocab: vocab.hash_hex(),
            });
        }
        let order = r.u32()? as usize;
        let alpha = f64::from_le_bytes(r.array()?);
        if order == 0 || order > 64 || !(alpha > 0.0 && alpha <= 1.0) {
            return Err(NgramError::Corrupt(format!("order {order}, alpha {alpha}")));
        }
        let mut levels = Vec::with_capacity(order);
        for m in 0..order {
            let n = r.u64()?;
            let mut level = HashMap::new();
            for _ in 0..n {
                let len = r.u32()? as usize;
                if len != m {
                    return Err(NgramError::Corrupt(format!("context of length {len} in level {m}")));
                }
                let ctx = (0..len).map(|_| r.u32().map(ActionId)).collect::<Result<Vec<_>, _>>()?;
                let mut counts = ContextCounts::default();
                for _ in 0..r.u32()? {
                    let a = ActionId(r.u32()?);
                    let c = r.u64()?;
                    counts.total += c;
                    counts.next.insert(a, c);
                }
                level.insert(ctx, counts);
            }
            levels.push(level);
        }
        let mut rest = Vec::new();
        r.0.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(NgramError::Corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(NgramModel {
            order,
            alpha,
            levels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &ActionVocabulary) -> Result<(), NgramError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out, vocab)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, vocab: &ActionVocabulary) -> Result<Self, NgramError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut input, vocab)
    }
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N], NgramError> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => NgramError::Corrupt("truncated".into()),
            _ => NgramError::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, NgramError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, NgramError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
