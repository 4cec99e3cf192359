//! Top-k evaluation, confidence coverage, PCA of user embeddings, and
//! report emission (CSV and SVG).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{rank_distribution, DecoderError, PersonalizedDecoder};
use crate::flow::{encode_prefix, ActionId, ActionVocabulary, PrefixSample};
use crate::ngram::NgramModel;
use crate::oracle::{ContinuationTable, OracleError};
use crate::personalize::{filter_by_connections, reweight_by_actions, seen_connections, PersonalizeError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples")]
    EmptyInput,
    #[error("k values must be positive")]
    InvalidK,
    #[error("thresholds must be finite and sorted ascending")]
    InvalidThresholds,
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Personalize(#[from] PersonalizeError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub const DEFAULT_KS: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// A user's prior action usage: raw counts and the L1-normalized histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub counts: Vec<u32>,
    pub histogram: Vec<f64>,
}

impl History {
    pub fn from_counts(counts: Vec<u32>) -> Self {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let histogram = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        History { counts, histogram }
    }

    pub fn zeros(vocab_size: usize) -> Self {
        Self::from_counts(vec![0; vocab_size])
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

/// A prefix sample plus the owner's history excluding the current flow.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub sample: PrefixSample,
    pub history: Arc<History>,
}

/// Actions with scores, best first.
pub type Ranking = Vec<(ActionId, f64)>;

pub trait Ranker {
    fn name(&self) -> String;

    fn rank(&self, prefix: &[ActionId], history: &History) -> Result<Ranking, EvalError>;

    fn rank_all(&self, samples: &[EvalSample]) -> Result<Vec<Ranking>, EvalError> {
        samples
            .iter()
            .map(|s| self.rank(&s.sample.prefix, &s.history))
            .collect()
    }
}

/// Wraps a closure as a [`Ranker`].
pub struct FnRanker<F> {
    pub name: String,
    pub f: F,
}

impl<F> Ranker for FnRanker<F>
where
    F: Fn(&[ActionId], &History) -> Ranking,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn rank(&self, prefix: &[ActionId], history: &History) -> Result<Ranking, EvalError> {
        Ok((self.f)(prefix, history))
    }
}

pub struct NgramRanker<'a>(pub &'a NgramModel);

impl Ranker for NgramRanker<'_> {
    fn name(&self) -> String {
        "ngram".into()
    }

    fn rank(&self, prefix: &[ActionId], _: &History) -> Result<Ranking, EvalError> {
        Ok(self.0.score_next(prefix))
    }
}

/// How a decoder's distribution is personalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum Strategy {
    /// Profile token from the user's history.
    Learned,
    /// Zero profile, no adjustment.
    None,
    /// Zero profile, API actions restricted to connections the user used.
    FilterConnections,
    /// Zero profile, probabilities weighted by smoothed past usage.
    ReweightActions { beta: f64 },
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Learned => "learned",
            Strategy::None => "none",
            Strategy::FilterConnections => "filter-connections",
            Strategy::ReweightActions { .. } => "reweight-actions",
        }
    }

    fn uses_profile(&self) -> bool {
        matches!(self, Strategy::Learned)
    }
}

/// Applies `strategy` to a decoder distribution that was computed with
/// the profile the strategy calls for.
pub fn personalize_distribution(
    dist: &[f64],
    strategy: Strategy,
    history: &History,
    vocab: &ActionVocabulary,
) -> Result<Vec<f64>, EvalError> {
    Ok(match strategy {
        Strategy::Learned | Strategy::None => dist.to_vec(),
        Strategy::FilterConnections => {
            filter_by_connections(dist, &seen_connections(&history.counts, vocab), vocab)
        }
        Strategy::ReweightActions { beta } => reweight_by_actions(dist, &history.counts, beta)?,
    })
}

pub struct DecoderRanker<'a> {
    pub model: &'a PersonalizedDecoder<f32>,
    pub vocab: &'a ActionVocabulary,
    pub strategy: Strategy,
}

impl DecoderRanker<'_> {
    fn profile<'h>(&self, history: &'h History, zeros: &'h [f64]) -> &'h [f64] {
        if self.strategy.uses_profile() {
            &history.histogram
        } else {
            zeros
        }
    }

    fn finish(&self, dist: &[f32], history: &History) -> Result<Ranking, EvalError> {
        let dist: Vec<f64> = dist.iter().map(|&p| p as f64).collect();
        let adjusted = personalize_distribution(&dist, self.strategy, history, self.vocab)?;
        Ok(rank_distribution(&adjusted, self.model.output_mask(), adjusted.len()))
    }
}

impl Ranker for DecoderRanker<'_> {
    fn name(&self) -> String {
        self.strategy.label().into()
    }

    fn rank(&self, prefix: &[ActionId], history: &History) -> Result<Ranking, EvalError> {
        let zeros = vec![0.0; self.model.config().vocab_size];
        let prefix = encode_prefix(prefix, self.model.config().max_len);
        let dist = self.model.forward(&prefix, self.profile(history, &zeros))?;
        self.finish(&dist, history)
    }

    /// Scores each distinct (profile, prefix) once; a single pass over the
    /// longest prefix yields every shorter one.
    fn rank_all(&self, samples: &[EvalSample]) -> Result<Vec<Ranking>, EvalError> {
        let max = self.model.config().max_len - 1;
        let zeros = vec![0.0; self.model.config().vocab_size];
        let mut cache: HashMap<(usize, Vec<ActionId>), Vec<f32>> = HashMap::new();
        // with a shared zero profile every sample is in group 0
        let group_of = |s: &EvalSample| {
            if self.strategy.uses_profile() {
                Arc::as_ptr(&s.history) as usize
            } else {
                0
            }
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(samples[i].sample.prefix.len()));
        for &i in &order {
            let s = &samples[i];
            let group = group_of(s);
            let prefix = &s.sample.prefix;
            if cache.contains_key(&(group, prefix.clone())) {
                continue;
            }
            let profile = self.profile(&s.history, &zeros);
            if prefix.len() <= max {
                let rows = self.model.distributions_along(prefix, profile)?;
                for (t, row) in rows.into_iter().enumerate() {
                    cache.entry((group, prefix[..=t].to_vec())).or_insert(row);
                }
            } else {
                let dist = self.model.forward(&encode_prefix(prefix, max + 1), profile)?;
                cache.insert((group, prefix.clone()), dist);
            }
        }
        samples
            .iter()
            .map(|s| self.finish(&cache[&(group_of(s), s.sample.prefix.clone())], &s.history))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    /// Aligned with [`EvalReport::ks`].
    pub accuracy: Vec<f64>,
    pub n: usize,
}

/// 1-based rank of `target`, if present.
fn rank_of(ranking: &Ranking, target: ActionId) -> Option<usize> {
    ranking.iter().position(|(a, _)| *a == target).map(|p| p + 1)
}

fn check_ks(ks: &[usize]) -> Result<(), EvalError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    Ok(())
}

/// Top-k accuracy of precomputed rankings.
pub fn topk_from_rankings(
    strategy: &str,
    samples: &[EvalSample],
    rankings: &[Ranking],
    ks: &[usize],
) -> Result<StrategyRow, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    check_ks(ks)?;
    let mut hits = vec![0usize; ks.len()];
    for (s, r) in samples.iter().zip(rankings) {
        if let Some(rank) = rank_of(r, s.sample.target) {
            for (h, &k) in hits.iter_mut().zip(ks) {
                *h += usize::from(rank <= k);
            }
        }
    }
    Ok(StrategyRow {
        strategy: strategy.to_string(),
        accuracy: hits.iter().map(|&h| h as f64 / samples.len() as f64).collect(),
        n: samples.len(),
    })
}

/// Fraction of samples whose target is among the ranker's first k items.
pub fn topk_accuracy(ranker: &dyn Ranker, samples: &[EvalSample], ks: &[usize]) -> Result<StrategyRow, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let rankings = ranker.rank_all(samples)?;
    topk_from_rankings(&ranker.name(), samples, &rankings, ks)
}

/// The prefix-only theoretical maximum as a report row.
pub fn theoretical_max_row(samples: &[EvalSample], ks: &[usize]) -> Result<StrategyRow, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    check_ks(ks)?;
    let plain: Vec<PrefixSample> = samples.iter().map(|s| s.sample.clone()).collect();
    let table = ContinuationTable::new(&plain)?;
    Ok(StrategyRow {
        strategy: "theoretical-max".into(),
        accuracy: ks.iter().map(|&k| table.accuracy(k)).collect::<Result<_, _>>()?,
        n: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub rows: Vec<StrategyRow>,
}

impl EvalReport {
    pub fn row(&self, strategy: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn accuracy(&self, strategy: &str, k: usize) -> Option<f64> {
        let col = self.ks.iter().position(|&x| x == k)?;
        self.row(strategy).map(|r| r.accuracy[col])
    }

    /// `strategy,k,accuracy,n`, one line per strategy and k.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,k,accuracy,n\n");
        for row in &self.rows {
            for (k, acc) in self.ks.iter().zip(&row.accuracy) {
                writeln!(out, "{},{},{},{}", row.strategy, k, acc, row.n).unwrap();
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Accuracy vs k, one line per strategy.
    pub fn to_svg(&self) -> String {
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .rows
            .iter()
            .map(|r| {
                let pts = self.ks.iter().zip(&r.accuracy).map(|(&k, &a)| (k as f64, a)).collect();
                (r.strategy.clone(), pts)
            })
            .collect();
        line_chart_svg("top-k accuracy", "k", "accuracy", &series)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub threshold: f64,
    pub coverage: f64,
    pub covered: usize,
    /// Top-k accuracy over covered samples; absent when nothing is covered.
    pub accuracy: Option<f64>,
}

/// Quartiles of a set of probabilities observed at one rank position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub position: usize,
    pub count: usize,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub k: usize,
    pub points: Vec<CoveragePoint>,
    /// Probability assigned to the target, for targets that landed at each rank.
    pub target_probability_at_rank: Vec<RankSummary>,
    /// Probability of whatever item sits at each rank, over all samples.
    pub probability_mass_at_rank: Vec<RankSummary>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

fn summarize(position: usize, mut values: Vec<f64>) -> RankSummary {
    values.sort_by(|a, b| a.total_cmp(b));
    RankSummary {
        position,
        count: values.len(),
        q1: quantile(&values, 0.25),
        median: quantile(&values, 0.5),
        q3: quantile(&values, 0.75),
    }
}

/// Coverage and covered-set top-k accuracy when suggestions are withheld
/// below each top-1 probability threshold, plus per-rank probability
/// summaries for positions 1..=10.
pub fn confidence_coverage(
    ranker: &dyn Ranker,
    samples: &[EvalSample],
    thresholds: &[f64],
    k: usize,
) -> Result<CoverageReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let rankings = ranker.rank_all(samples)?;
    coverage_from_rankings(samples, &rankings, thresholds, k)
}

pub fn coverage_from_rankings(
    samples: &[EvalSample],
    rankings: &[Ranking],
    thresholds: &[f64],
    k: usize,
) -> Result<CoverageReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    check_ks(&[k])?;
    if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::InvalidThresholds);
    }
    let scored: Vec<(f64, Option<usize>)> = samples
        .iter()
        .zip(rankings)
        .map(|(s, r)| (r.first().map_or(0.0, |x| x.1), rank_of(r, s.sample.target)))
        .collect();
    let points = thresholds
        .iter()
        .map(|&t| {
            let covered: Vec<&(f64, Option<usize>)> = scored.iter().filter(|(p, _)| *p >= t).collect();
            let hits = covered.iter().filter(|(_, r)| r.is_some_and(|r| r <= k)).count();
            CoveragePoint {
                threshold: t,
                coverage: covered.len() as f64 / samples.len() as f64,
                covered: covered.len(),
                accuracy: (!covered.is_empty()).then(|| hits as f64 / covered.len() as f64),
            }
        })
        .collect();
    let positions = 10;
    let mut at_rank: Vec<Vec<f64>> = vec![Vec::new(); positions];
    let mut mass: Vec<Vec<f64>> = vec![Vec::new(); positions];
    for (s, r) in samples.iter().zip(rankings) {
        if let Some(rank) = rank_of(r, s.sample.target).filter(|&r| r <= positions) {
            at_rank[rank - 1].push(r[rank - 1].1);
        }
        for (i, (_, p)) in r.iter().take(positions).enumerate() {
            mass[i].push(*p);
        }
    }
    Ok(CoverageReport {
        k,
        points,
        target_probability_at_rank: at_rank.into_iter().enumerate().map(|(i, v)| summarize(i + 1, v)).collect(),
        probability_mass_at_rank: mass.into_iter().enumerate().map(|(i, v)| summarize(i + 1, v)).collect(),
    })
}

impl CoverageReport {
    /// `threshold,coverage,covered,accuracy`; empty accuracy when undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,coverage,covered,accuracy\n");
        for p in &self.points {
            let acc = p.accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", p.threshold, p.coverage, p.covered, acc).unwrap();
        }
        out
    }

    /// `summary,position,count,q1,median,q3` for both per-rank summaries.
    pub fn rank_csv(&self) -> String {
        let mut out = String::from("summary,position,count,q1,median,q3\n");
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (label, rows) in [
            ("target-probability", &self.target_probability_at_rank),
            ("rank-mass", &self.probability_mass_at_rank),
        ] {
            for r in rows {
                writeln!(out, "{label},{},{},{},{},{}", r.position, r.count, opt(r.q1), opt(r.median), opt(r.q3)).unwrap();
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub coords: Vec<[f64; 2]>,
    /// Variance captured by each component.
    pub explained_variance: [f64; 2],
    pub total_variance: f64,
    pub components: [Vec<f64>; 2],
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITER: usize = 1000;

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leading eigenvector of a symmetric PSD matrix by power iteration.
fn leading_eigen(cov: &[Vec<f64>], rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let d = cov.len();
    let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    for _ in 0..PCA_MAX_ITER {
        let w = mat_vec(cov, &v);
        let len = norm(&w);
        if len == 0.0 {
            return (0.0, v);
        }
        let next: Vec<f64> = w.iter().map(|x| x / len).collect();
        let delta = norm(&next.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda = v.iter().zip(mat_vec(cov, &v)).map(|(a, b)| a * b).sum::<f64>();
    (lambda.max(0.0), v)
}

/// Mean-centred projection onto the top two principal directions, found by
/// power iteration with deflation. Each direction is signed so that its
/// largest-magnitude entry is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Pca, EvalError> {
    if rows.len() < 3 {
        return Err(EvalError::TooFewPoints(rows.len()));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(EvalError::DegenerateInput("rows must share a positive width".into()));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / n;
            }
        }
    }
    let total: f64 = (0..d).map(|i| cov[i][i]).sum();
    if total == 0.0 {
        return Err(EvalError::DegenerateInput("zero variance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca);
    let mut components: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut explained = [0.0; 2];
    for c in 0..2 {
        let (lambda, mut v) = leading_eigen(&cov, &mut rng);
        let lead = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        explained[c] = lambda;
        components[c] = v;
    }
    let coords = centred
        .iter()
        .map(|r| {
            let p = |c: &Vec<f64>| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Pca {
        coords,
        explained_variance: explained,
        total_variance: total,
        components,
    })
}

/// Mean silhouette coefficient of `labels` over 2-D points (Euclidean).
/// Points alone in their cluster score 0. `None` with fewer than two labels.
pub fn silhouette(points: &[[f64; 2]], labels: &[String]) -> Option<f64> {
    let distinct: Vec<&String> = {
        let mut l: Vec<&String> = labels.iter().collect();
        l.sort();
        l.dedup();
        l
    };
    if distinct.len() < 2 || points.len() != labels.len() {
        return None;
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums: BTreeMap<&String, (f64, usize)> = BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let e = sums.entry(&labels[j]).or_default();
                e.0 += dist(p, q);
                e.1 += 1;
            }
        }
        let own = match sums.get(&labels[i]) {
            Some(&(s, c)) if c > 0 => s / c as f64,
            _ => continue,
        };
        let nearest = sums
            .iter()
            .filter(|(l, _)| **l != &labels[i])
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = own.max(nearest);
        if denom > 0.0 {
            total += (nearest - own) / denom;
        }
    }
    Some(total / points.len() as f64)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame {
            x: (f64::INFINITY, f64::NEG_INFINITY),
            y: (f64::INFINITY, f64::NEG_INFINITY),
        };
        for (x, y) in points {
            f.x = (f.x.0.min(x), f.x.1.max(x));
            f.y = (f.y.0.min(y), f.y.1.max(y));
        }
        for r in [&mut f.x, &mut f.y] {
            if !r.0.is_finite() {
                *r = (0.0, 1.0);
            } else if r.0 == r.1 {
                *r = (r.0 - 0.5, r.1 + 0.5);
            }
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#).unwrap();
        writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#, W / 2.0).unwrap();
        let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
        writeln!(out, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#).unwrap();
        for (v, label) in [(self.x.0, x0), (self.x.1, x1)] {
            writeln!(out, r#"<text x="{label}" y="{}" text-anchor="middle">{v:.3}</text>"#, y0 + 16.0).unwrap();
        }
        for (v, pos) in [(self.y.0, y0), (self.y.1, y1)] {
            writeln!(out, r#"<text x="{}" y="{pos}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0).unwrap();
        }
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 18.0).unwrap();
        writeln!(out, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{ylabel}</text>"#, H / 2.0, H / 2.0).unwrap();
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, W - MARGIN - 150.0, y - 9.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{y}">{name}</text>"#, W - MARGIN - 135.0).unwrap();
    }
}

/// Static SVG with one polyline per named series.
pub fn line_chart_svg(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|(_, pts)| pts.iter().copied()));
    let mut out = String::new();
    frame.axes(&mut out, title, xlabel, ylabel);
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            path.join(" "),
            PALETTE[i % PALETTE.len()]
        )
        .unwrap();
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Static SVG scatter plot coloured by label.
pub fn scatter_svg(title: &str, points: &[[f64; 2]], labels: &[String]) -> String {
    let frame = Frame::fit(points.iter().map(|p| (p[0], p[1])));
    let mut distinct: Vec<&str> = labels.iter().map(String::as_str).collect();
    distinct.sort();
    distinct.dedup();
    let mut out = String::new();
    frame.axes(&mut out, title, "component 1", "component 2");
    for (p, l) in points.iter().zip(labels) {
        let i = distinct.binary_search(&l.as_str()).unwrap_or(0);
        writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
            frame.px(p[0]),
            frame.py(p[1]),
            PALETTE[i % PALETTE.len()]
        )
        .unwrap();
    }
    if distinct.len() <= PALETTE.len() {
        legend(&mut out, &distinct);
    }
    out.push_str("</svg>\n");
    out
}

/// `user_id,x,y,persona_id`.
pub fn pca_csv(user_ids: &[String], pca: &Pca, personas: &[String]) -> String {
    let mut out = String::from("user_id,x,y,persona_id\n");
    for ((u, c), p) in user_ids.iter().zip(&pca.coords).zip(personas) {
        writeln!(out, "{u},{},{},{p}", c[0], c[1]).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(prefix: &[u32], target: u32, flow: &str) -> EvalSample {
        EvalSample {
            sample: PrefixSample {
                user_id: "u".into(),
                flow_id: flow.into(),
                prefix: prefix.iter().map(|&i| ActionId(i)).collect(),
                target: ActionId(target),
            },
            history: Arc::new(History::zeros(8)),
        }
    }

    fn fixed(order: &'static [u32]) -> FnRanker<impl Fn(&[ActionId], &History) -> Ranking> {
        FnRanker {
            name: "fixed".into(),
            f: move |_: &[ActionId], _: &History| order.iter().map(|&i| (ActionId(i), 1.0 / (i as f64))).collect(),
        }
    }

    #[test]
    fn perfect_and_adversarial_rankers() {
        let samples = vec![sample(&[2], 3, "a"), sample(&[2, 3], 4, "a"), sample(&[2], 5, "b")];
        let perfect = FnRanker {
            name: "perfect".into(),
            f: |p: &[ActionId], _: &History| {
                let t = match p.len() {
                    2 => 4,
                    _ => 3,
                };
                vec![(ActionId(t), 1.0)]
            },
        };
        // the perfect-by-prefix ranker cannot know the third target
        let row = topk_accuracy(&perfect, &samples[..2], &DEFAULT_KS).unwrap();
        assert!(row.accuracy.iter().all(|&a| a == 1.0));
        let last = FnRanker {
            name: "last".into(),
            f: |_: &[ActionId], _: &History| (2..8).rev().filter(|&i| i != 3).chain([3]).map(|i| (ActionId(i), 0.0)).collect(),
        };
        let row = topk_accuracy(&last, &samples[..1], &[1, 2, 3, 4, 5]).unwrap();
        assert!(row.accuracy.iter().all(|&a| a == 0.0));
        assert!(matches!(topk_accuracy(&perfect, &[], &DEFAULT_KS), Err(EvalError::EmptyInput)));
        assert!(matches!(topk_accuracy(&perfect, &samples, &[0]), Err(EvalError::InvalidK)));
    }

    #[test]
    fn accuracy_counts_rank_positions() {
        let samples = vec![sample(&[2], 7, "a"), sample(&[2], 5, "a"), sample(&[2], 3, "a"), sample(&[2], 1, "a")];
        let row = topk_accuracy(&fixed(&[7, 5, 3]), &samples, &[1, 2, 3, 4]).unwrap();
        assert_eq!(row.accuracy, vec![0.25, 0.5, 0.75, 0.75]);
        assert_eq!(row.n, 4);
    }

    #[test]
    fn report_csv_schema() {
        let report = EvalReport {
            corpus: "c".into(),
            seed: 1,
            ks: vec![1, 2],
            rows: vec![StrategyRow {
                strategy: "ngram".into(),
                accuracy: vec![0.5, 0.75],
                n: 4,
            }],
        };
        assert_eq!(report.to_csv(), "strategy,k,accuracy,n\nngram,1,0.5,4\nngram,2,0.75,4\n");
        assert_eq!(report.accuracy("ngram", 2), Some(0.75));
        assert!(report.to_svg().starts_with("<svg"));
    }

    #[test]
    fn coverage_boundaries() {
        let samples = vec![sample(&[2], 7, "a"), sample(&[2], 5, "a")];
        let rankings = vec![
            vec![(ActionId(7), 0.9), (ActionId(5), 0.1)],
            vec![(ActionId(7), 0.4), (ActionId(5), 0.3)],
        ];
        let r = coverage_from_rankings(&samples, &rankings, &[0.0, 0.5, 1.0 + 1e-9], 1).unwrap();
        assert_eq!(r.points[0].coverage, 1.0);
        assert_eq!(r.points[0].accuracy, Some(0.5));
        assert_eq!(r.points[1].coverage, 0.5);
        assert_eq!(r.points[1].accuracy, Some(1.0));
        assert_eq!(r.points[2].coverage, 0.0);
        assert_eq!(r.points[2].accuracy, None);
        assert_eq!(r.target_probability_at_rank[0].count, 1);
        assert_eq!(r.target_probability_at_rank[0].median, Some(0.9));
        assert_eq!(r.target_probability_at_rank[1].median, Some(0.3));
        assert_eq!(r.probability_mass_at_rank[0].median, Some(0.65));
        assert!(r.to_csv().starts_with("threshold,coverage,covered,accuracy\n"));
        assert!(matches!(
            coverage_from_rankings(&samples, &rankings, &[0.5, 0.1], 1),
            Err(EvalError::InvalidThresholds)
        ));
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), Some(2.5));
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), Some(1.75));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn pca_of_line_is_rank_one() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let pca = pca_2d(&rows).unwrap();
        assert!(pca.explained_variance[1] < 1e-6 * pca.total_variance);
        assert!((pca.explained_variance[0] - pca.total_variance).abs() < 1e-9);
        let lead = pca.components[0].iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(lead > 0.0);
    }

    #[test]
    fn pca_errors() {
        assert!(matches!(pca_2d(&[vec![1.0], vec![2.0]]), Err(EvalError::TooFewPoints(2))));
        assert!(matches!(pca_2d(&vec![vec![1.0, 2.0]; 4]), Err(EvalError::DegenerateInput(_))));
    }

    #[test]
    fn silhouette_of_separated_clusters() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let s = silhouette(&pts, &labels).unwrap();
        // a(i) = 1, b(i) = (10 + sqrt(101)) / 2
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s - (b - 1.0) / b).abs() < 1e-12);
        let mixed: Vec<String> = ["a", "b", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(silhouette(&pts, &mixed).unwrap() < 0.0);
        assert_eq!(silhouette(&pts, &vec!["a".to_string(); 4]), None);
    }
}
