//! Link and topic relatedness of community pairs, placed on a percentile
//! scale built from every unordered pair of eligible communities.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::affix::AffixPair;
use crate::corpus::{CommunityId, CommunityIndex};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// `|A ∩ B| / |A ∪ B|`; two empty sets score 0.
pub fn jaccard<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|x| large.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard over sorted, deduplicated slices by merge.
pub fn jaccard_sorted<T: Ord>(a: &[T], b: &[T]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector: non-negative entries summing to one within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicDistribution(Vec<f64>);

impl TopicDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::contract("topic distribution has dimension 0"));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::contract("topic distribution has a negative or non-finite entry"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::contract(format!("topic distribution sums to {sum}")));
        }
        Ok(TopicDistribution(p))
    }

    /// Scales non-negative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::contract("topic weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::contract("topic weights sum to zero"));
        }
        TopicDistribution::new(weights.into_iter().map(|x| x / sum).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `p·log2(2p/(p+q))` with `0·log 0 = 0`.
#[inline]
fn half_term(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (2.0 * p / (p + q)).log2()
    } else {
        0.0
    }
}

/// Base-2 Jensen–Shannon divergence, in `[0, 1]`.
pub fn js_divergence(p: &TopicDistribution, q: &TopicDistribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::contract(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    if p.0 == q.0 {
        return Ok(0.0);
    }
    // Mass on one side only contributes exactly its own weight; writing it as
    // one minus the shared mass keeps disjoint supports at exactly 1.
    let (mut shared, mut mass_p, mut mass_q) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.0.iter().zip(&q.0) {
        if a > 0.0 && b > 0.0 {
            shared += half_term(a, b) + half_term(b, a);
            mass_p += a;
            mass_q += b;
        }
    }
    Ok((0.5 * ((1.0 - mass_p) + (1.0 - mass_q) + shared)).clamp(0.0, 1.0))
}

/// Add-one smoothed unigram distribution over a joint vocabulary of size
/// `vocab`, stored sparsely: only the observed counts are kept.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedUnigram {
    counts: Vec<(u32, u64)>,
    total: u64,
    vocab: usize,
}

impl SmoothedUnigram {
    /// `counts` must be sorted by token id with ids `< vocab`.
    pub fn new(counts: Vec<(u32, u64)>, vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::contract("empty vocabulary"));
        }
        if counts.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::contract("unigram counts must be sorted by token id"));
        }
        if counts.last().is_some_and(|&(t, _)| t as usize >= vocab) {
            return Err(Error::contract("token id outside vocabulary"));
        }
        let total = counts.iter().map(|&(_, n)| n).sum();
        Ok(SmoothedUnigram { counts, total, vocab })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn denom(&self) -> f64 {
        (self.total + self.vocab as u64) as f64
    }

    pub fn probability(&self, token: u32) -> f64 {
        let c = match self.counts.binary_search_by_key(&token, |&(t, _)| t) {
            Ok(i) => self.counts[i].1,
            Err(_) => 0,
        };
        (c + 1) as f64 / self.denom()
    }

    pub fn to_dense(&self) -> TopicDistribution {
        let d = self.denom();
        let mut v = vec![1.0 / d; self.vocab];
        for &(t, c) in &self.counts {
            v[t as usize] = (c + 1) as f64 / d;
        }
        TopicDistribution(v)
    }
}

/// JS divergence between two smoothed unigram distributions. Tokens absent
/// from both communities share one probability on each side, so their
/// contribution is computed once and multiplied.
pub fn js_divergence_smoothed(a: &SmoothedUnigram, b: &SmoothedUnigram) -> Result<f64> {
    if a.vocab != b.vocab {
        return Err(Error::contract("vocabulary mismatch"));
    }
    let (da, db) = (a.denom(), b.denom());
    let term = |ca: u64, cb: u64| {
        let p = (ca + 1) as f64 / da;
        let q = (cb + 1) as f64 / db;
        half_term(p, q) + half_term(q, p)
    };
    let (mut i, mut j) = (0, 0);
    let mut support = 0usize;
    let mut s = 0.0;
    while i < a.counts.len() || j < b.counts.len() {
        let ta = a.counts.get(i).map(|x| x.0).unwrap_or(u32::MAX);
        let tb = b.counts.get(j).map(|x| x.0).unwrap_or(u32::MAX);
        if ta < tb {
            s += term(a.counts[i].1, 0);
            i += 1;
        } else if tb < ta {
            s += term(0, b.counts[j].1);
            j += 1;
        } else {
            s += term(a.counts[i].1, b.counts[j].1);
            i += 1;
            j += 1;
        }
        support += 1;
    }
    let unseen = a.vocab - support;
    s += unseen as f64 * term(0, 0);
    Ok((0.5 * s).clamp(0.0, 1.0))
}

/// Per-community topic representation used for the topic metric.
#[derive(Clone, Debug)]
pub enum TopicModel {
    /// Precomputed distributions keyed by community key.
    External(HashMap<String, TopicDistribution>),
    /// Smoothed unigram fallback keyed by community key.
    Unigram(HashMap<String, SmoothedUnigram>),
}

impl TopicModel {
    /// Reads `{"community": name, "theta": [...]}` lines. Rows are
    /// renormalized; every row must share one dimension.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            community: String,
            theta: Vec<f64>,
        }
        let mut map = HashMap::new();
        let mut dim = None;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("topic file line {}: {e}", n + 1)))?;
            let theta = TopicDistribution::normalized(row.theta)?;
            match dim {
                None => dim = Some(theta.dim()),
                Some(d) if d != theta.dim() => {
                    return Err(Error::contract(format!(
                        "topic file line {}: dimension {} differs from {d}",
                        n + 1,
                        theta.dim()
                    )))
                }
                _ => {}
            }
            map.insert(row.community.trim().to_lowercase(), theta);
        }
        Ok(TopicModel::External(map))
    }

    /// Smoothed unigram distributions over the joint vocabulary of
    /// `communities`. `None` when those communities carry no text at all.
    pub fn unigram_fallback(index: &CommunityIndex, communities: &[CommunityId]) -> Option<Self> {
        let mut vocab: Vec<u32> = communities
            .iter()
            .flat_map(|&c| index.community_by_id(c).unigrams().iter().map(|(t, _)| t.0))
            .collect();
        vocab.sort_unstable();
        vocab.dedup();
        if vocab.is_empty() {
            return None;
        }
        let dense: HashMap<u32, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i as u32))
            .collect();
        let map = communities
            .iter()
            .map(|&c| {
                let comm = index.community_by_id(c);
                let counts = comm.unigrams().iter().map(|&(t, n)| (dense[&t.0], n)).collect();
                let uni = SmoothedUnigram::new(counts, vocab.len()).expect("sorted by construction");
                (comm.key().to_string(), uni)
            })
            .collect();
        Some(TopicModel::Unigram(map))
    }

    pub fn covers(&self, community: &str) -> bool {
        match self {
            TopicModel::External(m) => m.contains_key(community),
            TopicModel::Unigram(m) => m.contains_key(community),
        }
    }

    /// Divergence between two communities, `None` when either lacks topic data.
    pub fn divergence(&self, a: &str, b: &str) -> Option<f64> {
        match self {
            TopicModel::External(m) => js_divergence(m.get(a)?, m.get(b)?).ok(),
            TopicModel::Unigram(m) => js_divergence_smoothed(m.get(a)?, m.get(b)?).ok(),
        }
    }
}

// ---------------------------------------------------------------------------
// Percentiles

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Link Jaccard: higher is more similar.
    Link,
    /// Topic JS divergence: lower is more similar.
    Topic,
}

/// Midrank percentile against a fixed background sample.
#[derive(Clone, Debug)]
pub struct PercentileScale {
    sorted: Vec<f64>,
    metric: Metric,
}

impl PercentileScale {
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// `100 × (background values less similar than x + ½ ties) / N`.
    pub fn percentile(&self, x: f64) -> f64 {
        let n = self.sorted.len();
        let below = self.sorted.partition_point(|&v| v < x);
        let not_above = self.sorted.partition_point(|&v| v <= x);
        let ties = not_above - below;
        let less_similar = match self.metric {
            Metric::Link => below,
            Metric::Topic => n - not_above,
        };
        100.0 * (less_similar as f64 + 0.5 * ties as f64) / n as f64
    }
}

pub fn background_percentiles(mut values: Vec<f64>, metric: Metric) -> Result<PercentileScale> {
    if values.is_empty() {
        return Err(Error::config(format!("empty {metric:?} background")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::contract("NaN in background values"));
    }
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    Ok(PercentileScale { sorted: values, metric })
}

/// Metric values over every unordered pair of `communities`.
#[derive(Clone, Debug, Default)]
pub struct Background {
    pub link: Vec<f64>,
    pub topic: Vec<f64>,
    pub pairs: usize,
}

pub fn compute_background(
    index: &CommunityIndex,
    communities: &[CommunityId],
    topics: Option<&TopicModel>,
    exec: Exec,
) -> Background {
    let n = communities.len();
    let rows = par::map_range(exec, 0..n, |i| {
        let a = index.community_by_id(communities[i]);
        let mut link = Vec::with_capacity(n - i - 1);
        let mut topic = Vec::with_capacity(if topics.is_some() { n - i - 1 } else { 0 });
        for &cj in &communities[i + 1..] {
            let b = index.community_by_id(cj);
            link.push(jaccard_sorted(a.links(), b.links()));
            if let Some(d) = topics.and_then(|t| t.divergence(a.key(), b.key())) {
                topic.push(d);
            }
        }
        (link, topic)
    });
    let mut bg = Background {
        pairs: n * n.saturating_sub(1) / 2,
        ..Background::default()
    };
    for (l, t) in rows {
        bg.link.extend(l);
        bg.topic.extend(t);
    }
    bg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub base: String,
    pub modified: String,
    pub jaccard: f64,
    pub js: Option<f64>,
    pub link_pct: f64,
    pub topic_pct: Option<f64>,
    pub related: bool,
}

impl SimilarityScore {
    pub fn passes(&self, threshold: f64) -> bool {
        self.link_pct >= threshold || self.topic_pct.is_some_and(|t| t >= threshold)
    }
}

/// Scores each pair against the background scales. Pairs whose communities
/// are missing from the index are skipped.
pub fn score_pairs(
    pairs: &[AffixPair],
    index: &CommunityIndex,
    topics: Option<&TopicModel>,
    link_scale: &PercentileScale,
    topic_scale: Option<&PercentileScale>,
    threshold: f64,
) -> Vec<SimilarityScore> {
    pairs
        .iter()
        .filter_map(|p| {
            let a = index.community(&p.base)?;
            let b = index.community(&p.modified)?;
            let jac = jaccard_sorted(a.links(), b.links());
            let js = topics.and_then(|t| t.divergence(a.key(), b.key()));
            let mut s = SimilarityScore {
                base: p.base.clone(),
                modified: p.modified.clone(),
                jaccard: jac,
                js,
                link_pct: link_scale.percentile(jac),
                topic_pct: match (js, topic_scale) {
                    (Some(d), Some(scale)) => Some(scale.percentile(d)),
                    _ => None,
                },
                related: false,
            };
            s.related = s.passes(threshold);
            Some(s)
        })
        .collect()
}

/// Pairs with link or topic percentile at or above `threshold`.
pub fn filter_related(pairs: &[AffixPair], scores: &[SimilarityScore], threshold: f64) -> Result<Vec<AffixPair>> {
    if !(0.0..=100.0).contains(&threshold) {
        return Err(Error::config(format!("percentile threshold {threshold} outside [0, 100]")));
    }
    let by_id: BTreeMap<(&str, &str), &SimilarityScore> = scores
        .iter()
        .map(|s| ((s.base.as_str(), s.modified.as_str()), s))
        .collect();
    Ok(pairs
        .iter()
        .filter(|p| {
            by_id
                .get(&(p.base.as_str(), p.modified.as_str()))
                .is_some_and(|s| s.passes(threshold))
        })
        .cloned()
        .collect())
}

/// Writes `base,modified,jaccard,js,link_pct,topic_pct,related`.
pub fn write_scores<W: Write>(scores: &[SimilarityScore], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in scores {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}
