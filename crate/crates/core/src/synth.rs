//! Synthetic multi-community corpora with planted ground truth.
//!
//! Background communities get random names that never form affix pairs,
//! independent link pools and vocabularies, and Poisson per-user activity.
//! Planted pairs add controlled link and vocabulary overlap, an exact or
//! random share of early participants drawn from the older community, a
//! monthly activity schedule, and an explorer/loyalist population whose
//! post-window activity encodes a known exploration effect.
//!
//! Timing conventions keep the plants unambiguous: exploration anchors fall
//! on whole minutes and every other generated action falls on the half
//! minute, so no background action can coincide with an anchor.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::affix::{AffixPosition, Taxonomy};
use crate::corpus::{EventKind, EventRecord, Timestamp, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::stats::mix_seed;

/// 2009-01-01T00:00:00Z.
pub const DEFAULT_START: Timestamp = 1_230_768_000;
const MINUTE: i64 = 60;
const MONTH: i64 = 30 * SECONDS_PER_DAY;
const COMMON_VOCAB: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantMode {
    #[default]
    Deterministic,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivitySpec {
    pub users: usize,
    /// Events per user per day.
    pub rate: f64,
    pub post_fraction: f64,
    /// Probability that a post carries a link.
    pub link_prob: f64,
    pub link_pool: usize,
    pub vocab: usize,
    pub tokens_per_post: usize,
    /// Probability that a token comes from the corpus-wide common pool.
    pub common_tokens: f64,
}

impl Default for ActivitySpec {
    fn default() -> Self {
        ActivitySpec {
            users: 40,
            rate: 0.05,
            post_fraction: 0.5,
            link_prob: 0.8,
            link_pool: 20,
            vocab: 30,
            tokens_per_post: 6,
            common_tokens: 0.3,
        }
    }
}

impl ActivitySpec {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::config(format!("{what}: activity rate must be positive")));
        }
        for (name, v) in [
            ("post_fraction", self.post_fraction),
            ("link_prob", self.link_prob),
            ("common_tokens", self.common_tokens),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{what}: {name} must lie in [0, 1]")));
            }
        }
        if self.link_pool == 0 || self.vocab == 0 {
            return Err(Error::config(format!("{what}: link pool and vocabulary must be non-empty")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct BackgroundSpec {
    pub communities: usize,
    /// Creation days are drawn uniformly from `[0, created_day_max]`.
    pub created_day_max: i64,
    pub activity: ActivitySpec,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlySpec {
    #[serde(default = "default_early_n")]
    pub n: usize,
    pub fraction: f64,
    #[serde(default)]
    pub mode: PlantMode,
}

fn default_early_n() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSpec {
    #[serde(default)]
    pub mode: PlantMode,
    pub explorers: usize,
    #[serde(default = "default_window")]
    pub window_days: i64,
    /// Stochastic: mean pre-window count.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Stochastic: target `p_e − p_ne`; the explorer post-rate boost is solved from it.
    #[serde(default)]
    pub effect: f64,
    /// Deterministic: exact pre-window count of every explorer.
    #[serde(default = "default_pre")]
    pub pre: usize,
    /// Deterministic: exact increase shares.
    #[serde(default)]
    pub p_e: f64,
    #[serde(default)]
    pub p_ne: f64,
}

fn default_window() -> i64 {
    30
}
fn default_lambda() -> f64 {
    8.0
}
fn default_pre() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub base: String,
    pub affix: String,
    #[serde(default = "default_position")]
    pub position: AffixPosition,
    pub base_created_day: i64,
    pub modified_created_day: i64,
    #[serde(default)]
    pub activity: ActivitySpec,
    #[serde(default)]
    pub modified_activity: Option<ActivitySpec>,
    #[serde(default)]
    pub link_overlap: f64,
    #[serde(default)]
    pub topic_shared: f64,
    #[serde(default)]
    pub early: Option<EarlySpec>,
    #[serde(default)]
    pub exploration: Option<ExplorationSpec>,
    /// Per 30-day bin after the newer community's creation: `[newer, older]`
    /// extra events from one regular user on each side.
    #[serde(default)]
    pub schedule: Vec<[u32; 2]>,
}

fn default_position() -> AffixPosition {
    AffixPosition::Suffix
}

impl PairSpec {
    pub fn modified(&self) -> String {
        match self.position {
            AffixPosition::Suffix => format!("{}{}", self.base, self.affix),
            AffixPosition::Prefix => format!("{}{}", self.affix, self.base),
        }
    }

    fn modified_is_newer(&self) -> bool {
        self.modified_created_day > self.base_created_day
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start_ts: Timestamp,
    pub duration_days: i64,
    #[serde(default)]
    pub background: BackgroundSpec,
    #[serde(default)]
    pub pairs: Vec<PairSpec>,
}

fn default_start() -> Timestamp {
    DEFAULT_START
}

fn fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl SynthConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn end_ts(&self) -> Timestamp {
        self.start_ts + self.duration_days * SECONDS_PER_DAY
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_days <= 0 {
            return Err(Error::config("duration_days must be positive"));
        }
        if self.start_ts % MINUTE != 0 {
            return Err(Error::config("start_ts must fall on a whole minute"));
        }
        let bg = &self.background;
        if bg.communities > 0 {
            bg.activity.validate("background")?;
            if !(0..self.duration_days).contains(&bg.created_day_max) {
                return Err(Error::config("background created_day_max outside the corpus"));
            }
        }
        let mut names = BTreeSet::new();
        for p in &self.pairs {
            let id = format!("{}:{}", p.base, p.modified());
            if p.base.is_empty() || p.affix.is_empty() {
                return Err(Error::config(format!("{id}: empty base or affix")));
            }
            if p.base.chars().any(|c| !c.is_ascii_lowercase() && !c.is_ascii_digit())
                || p.affix.chars().any(|c| !c.is_ascii_lowercase() && !c.is_ascii_digit())
            {
                return Err(Error::config(format!("{id}: names must be lowercase alphanumeric")));
            }
            for n in [p.base.clone(), p.modified()] {
                if !names.insert(n.clone()) {
                    return Err(Error::config(format!("community {n} planted twice")));
                }
            }
            for d in [p.base_created_day, p.modified_created_day] {
                if !(0..self.duration_days).contains(&d) {
                    return Err(Error::config(format!("{id}: creation day {d} outside the corpus")));
                }
            }
            p.activity.validate(&id)?;
            if let Some(a) = &p.modified_activity {
                a.validate(&id)?;
            }
            fraction("link_overlap", p.link_overlap)?;
            fraction("topic_shared", p.topic_shared)?;
            let gap_days = (p.modified_created_day - p.base_created_day).abs();
            if let Some(e) = &p.early {
                fraction("early fraction", e.fraction)?;
                if e.n == 0 {
                    return Err(Error::config(format!("{id}: early n must be at least 1")));
                }
                if e.fraction > 0.0 && gap_days < 2 {
                    return Err(Error::config(format!(
                        "{id}: early members need the older community to exist a day before the newer one"
                    )));
                }
            }
            if let Some(x) = &p.exploration {
                if !p.modified_is_newer() {
                    return Err(Error::config(format!("{id}: spinoff planted before parent")));
                }
                if x.window_days <= 0 || x.explorers == 0 {
                    return Err(Error::config(format!("{id}: exploration window and explorers must be positive")));
                }
                match x.mode {
                    PlantMode::Stochastic => {
                        if !(x.lambda > 1.0 && x.lambda.is_finite()) {
                            return Err(Error::config(format!("{id}: lambda must exceed 1")));
                        }
                        let p_ne = loyalist_increase_probability(x.lambda);
                        if !(x.effect >= 0.0 && x.effect + p_ne < 1.0) {
                            return Err(Error::config(format!(
                                "{id}: effect {} unreachable (loyalist share {p_ne:.4})",
                                x.effect
                            )));
                        }
                    }
                    PlantMode::Deterministic => {
                        fraction("p_e", x.p_e)?;
                        fraction("p_ne", x.p_ne)?;
                        if x.pre < 1 {
                            return Err(Error::config(format!("{id}: pre must be at least 1")));
                        }
                    }
                }
                let last = exploration_start(self, p, x) + x.explorers as i64 * MINUTE + x.window_days * SECONDS_PER_DAY;
                if last >= self.end_ts() {
                    return Err(Error::config(format!("{id}: exploration plant runs past the corpus end")));
                }
            }
        }
        Ok(())
    }
}

/// One generated action, serialized as a corpus input line.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SynthEvent {
    pub ts: Timestamp,
    pub community: String,
    pub user: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl SynthEvent {
    pub fn to_record(&self) -> Result<EventRecord> {
        let kind = if self.kind == "post" {
            EventKind::Post
        } else {
            EventKind::Comment
        };
        let mut r = EventRecord::new(&self.user, &self.community, self.ts, kind)?;
        if let Some(u) = &self.url {
            r = r.with_link(u)?;
        }
        if let Some(t) = &self.text {
            r = r.with_text(t);
        }
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationTruth {
    pub mode: PlantMode,
    pub explorers: usize,
    pub window_days: i64,
    pub lambda: Option<f64>,
    pub boost: Option<f64>,
    pub p_e: f64,
    pub p_ne: f64,
    pub effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub pair: String,
    pub base: String,
    pub modified: String,
    pub affix: String,
    pub position: AffixPosition,
    pub category: String,
    pub base_created: Timestamp,
    pub modified_created: Timestamp,
    pub modified_is_newer: bool,
    pub link_overlap: f64,
    pub topic_shared: f64,
    pub early_n: Option<usize>,
    pub early_fraction: Option<f64>,
    pub early_mode: Option<PlantMode>,
    pub spinoff: Option<bool>,
    pub exploration: Option<ExplorationTruth>,
    pub schedule: Vec<[u32; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub events: usize,
    pub background: Vec<String>,
    pub pairs: Vec<PlantedPair>,
}

struct Emitter {
    events: Vec<SynthEvent>,
}

impl Emitter {
    fn comment(&mut self, community: &str, user: &str, ts: Timestamp) {
        self.events.push(SynthEvent {
            ts,
            community: community.to_string(),
            user: user.to_string(),
            kind: "comment".to_string(),
            url: None,
            text: None,
        });
    }
}

/// Content pools of one community.
struct Pools {
    links: Vec<String>,
    vocab: Vec<String>,
}

impl Pools {
    fn own(name: &str, a: &ActivitySpec) -> Self {
        Pools {
            links: (0..a.link_pool).map(|i| format!("https://{name}.example.org/item/{i}")).collect(),
            vocab: (0..a.vocab).map(|i| format!("{name}w{i}")).collect(),
        }
    }

    /// Own pools with the leading `overlap` share replaced by `from`'s items.
    fn overlapping(name: &str, a: &ActivitySpec, from: &Pools, link_overlap: f64, topic_shared: f64) -> Self {
        let mut p = Pools::own(name, a);
        let nl = ((link_overlap * p.links.len() as f64).round() as usize).min(from.links.len());
        p.links[..nl].clone_from_slice(&from.links[..nl]);
        let nv = ((topic_shared * p.vocab.len() as f64).round() as usize).min(from.vocab.len());
        p.vocab[..nv].clone_from_slice(&from.vocab[..nv]);
        p
    }
}

/// Half-minute timestamp in `[lo, hi)`, uniform over whole minutes.
fn half_minute(rng: &mut ChaCha8Rng, lo: Timestamp, hi: Timestamp) -> Option<Timestamp> {
    let first = lo.div_euclid(MINUTE) + i64::from(lo.rem_euclid(MINUTE) > 30);
    let last = (hi - 31).div_euclid(MINUTE);
    (first <= last).then(|| rng.gen_range(first..=last) * MINUTE + 30)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Background-style activity of `users` users over `[from, to)`.
#[allow(clippy::too_many_arguments)]
fn emit_activity(
    out: &mut Emitter,
    rng: &mut ChaCha8Rng,
    community: &str,
    user_prefix: &str,
    a: &ActivitySpec,
    pools: &Pools,
    from: Timestamp,
    to: Timestamp,
) {
    if to <= from {
        return;
    }
    let days = (to - from) as f64 / SECONDS_PER_DAY as f64;
    for u in 0..a.users {
        let user = format!("{user_prefix}{u}");
        let n = poisson(rng, a.rate * days);
        for _ in 0..n {
            let Some(ts) = half_minute(rng, from, to) else { break };
            let post = rng.gen_bool(a.post_fraction);
            let (url, text) = if post {
                let url = rng.gen_bool(a.link_prob).then(|| pools.links.choose(rng).unwrap().clone());
                let words: Vec<String> = (0..a.tokens_per_post)
                    .map(|_| {
                        if rng.gen_bool(a.common_tokens) {
                            format!("common{}", rng.gen_range(0..COMMON_VOCAB))
                        } else {
                            pools.vocab.choose(rng).unwrap().clone()
                        }
                    })
                    .collect();
                (url, Some(words.join(" ")))
            } else {
                (None, None)
            };
            out.events.push(SynthEvent {
                ts,
                community: community.to_string(),
                user: user.clone(),
                kind: if post { "post" } else { "comment" }.to_string(),
                url,
                text,
            });
        }
    }
}

/// Founding post at exactly `created`.
fn emit_founder(out: &mut Emitter, community: &str, created: Timestamp, pools: &Pools) {
    out.events.push(SynthEvent {
        ts: created,
        community: community.to_string(),
        user: format!("{community}_founder"),
        kind: "post".to_string(),
        url: pools.links.first().cloned(),
        text: Some(pools.vocab.iter().take(3).cloned().collect::<Vec<_>>().join(" ")),
    });
}

/// Indices `i < n` chosen so that exactly `m` are selected, evenly spread.
fn spread(m: usize, n: usize) -> impl Fn(usize) -> bool {
    move |i| (i + 1) * m / n > i * m / n
}

fn poisson_pmf(mean: f64, upto: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(upto + 1);
    let mut term = (-mean).exp();
    p.push(term);
    for k in 1..=upto {
        term *= mean / k as f64;
        p.push(term);
    }
    p
}

fn pmf_support(lambda: f64) -> usize {
    (lambda + 12.0 * lambda.sqrt() + 40.0).ceil() as usize
}

/// `P(N = j | N ≥ min)` for `N ~ Poisson(lambda)`, truncated at `upto`.
fn conditional_pre(lambda: f64, min: usize, upto: usize) -> Vec<f64> {
    let mut p = poisson_pmf(lambda, upto);
    for x in p.iter_mut().take(min) {
        *x = 0.0;
    }
    let z: f64 = p.iter().sum();
    p.iter().map(|x| x / z).collect()
}

/// Minimum pre-window count of planted explorers and loyalists.
pub const PLANT_MIN_PRE: usize = 5;

/// Probability that a loyalist's post count `1 + Poisson(λ − 1)` exceeds its
/// pre count `N ~ Poisson(λ) | N ≥ 5`.
pub fn loyalist_increase_probability(lambda: f64) -> f64 {
    let upto = pmf_support(lambda);
    let pre = conditional_pre(lambda, PLANT_MIN_PRE, upto);
    let post = poisson_pmf(lambda - 1.0, upto);
    // P(1 + X > j) = P(X ≥ j)
    let mut tail = 1.0;
    let mut total = 0.0;
    for (j, pj) in pre.iter().enumerate() {
        total += pj * tail;
        tail -= post[j];
    }
    total
}

/// Probability that an explorer's post count `Poisson(b·λ)` exceeds its pre count.
pub fn explorer_increase_probability(lambda: f64, boost: f64) -> f64 {
    let upto = pmf_support(lambda * boost.max(1.0));
    let pre = conditional_pre(lambda, PLANT_MIN_PRE, upto);
    let post = poisson_pmf(lambda * boost, upto);
    let mut cdf = 0.0;
    let mut total = 0.0;
    for (j, pj) in pre.iter().enumerate() {
        cdf += post[j];
        total += pj * (1.0 - cdf);
    }
    total
}

/// Boost `b` with `explorer_increase_probability(λ, b) − loyalist share = effect`.
pub fn solve_boost(lambda: f64, effect: f64) -> Result<f64> {
    let target = loyalist_increase_probability(lambda) + effect;
    if !(0.0..1.0).contains(&target) {
        return Err(Error::config(format!("effect {effect} unreachable at lambda {lambda}")));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while explorer_increase_probability(lambda, hi) < target {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::config(format!("effect {effect} unreachable at lambda {lambda}")));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if explorer_increase_probability(lambda, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn exploration_start(cfg: &SynthConfig, p: &PairSpec, x: &ExplorationSpec) -> Timestamp {
    let base = cfg.start_ts + p.base_created_day * SECONDS_PER_DAY;
    let modified = cfg.start_ts + p.modified_created_day * SECONDS_PER_DAY;
    (base + (x.window_days + 1) * SECONDS_PER_DAY).max(modified + SECONDS_PER_DAY)
}

/// `count` half-minute times in `[lo, hi)`.
fn times(rng: &mut ChaCha8Rng, count: usize, lo: Timestamp, hi: Timestamp) -> Vec<Timestamp> {
    (0..count).filter_map(|_| half_minute(rng, lo, hi)).collect()
}

fn plant_exploration(
    out: &mut Emitter,
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    p: &PairSpec,
    x: &ExplorationSpec,
) -> Result<ExplorationTruth> {
    let base = p.base.as_str();
    let modified = p.modified();
    let w = x.window_days * SECONDS_PER_DAY;
    let t0 = exploration_start(cfg, p, x);
    let k = x.explorers;
    let (boost, p_e, p_ne) = match x.mode {
        PlantMode::Stochastic => {
            let b = solve_boost(x.lambda, x.effect)?;
            (Some(b), explorer_increase_probability(x.lambda, b), loyalist_increase_probability(x.lambda))
        }
        PlantMode::Deterministic => {
            let ke = (x.p_e * k as f64).round() as usize;
            let kne = (x.p_ne * k as f64).round() as usize;
            (None, ke as f64 / k as f64, kne as f64 / k as f64)
        }
    };
    let (inc_e, inc_ne) = {
        let ke = (x.p_e * k as f64).round() as usize;
        let kne = (x.p_ne * k as f64).round() as usize;
        (spread(ke, k), spread(kne, k))
    };
    for i in 0..k {
        let t = t0 + i as i64 * MINUTE;
        let explorer = format!("{modified}_explorer{i}");
        let loyalist = format!("{base}_loyalist{i}");
        let (pre, e_post, l_extra) = match x.mode {
            PlantMode::Stochastic => {
                let mut n = poisson(rng, x.lambda) as usize;
                while n < PLANT_MIN_PRE {
                    n = poisson(rng, x.lambda) as usize;
                }
                let e_post = poisson(rng, boost.unwrap() * x.lambda) as usize;
                let l_extra = poisson(rng, x.lambda - 1.0) as usize;
                (n, e_post, l_extra)
            }
            PlantMode::Deterministic => {
                let n = x.pre;
                let e_post = if inc_e(i) { n + 2 } else { n };
                let l_extra = if inc_ne(i) { n + 1 } else { 0 };
                (n, e_post, l_extra)
            }
        };
        let pre_times = times(rng, pre, t - w, t);
        for &ts in &pre_times {
            out.comment(base, &explorer, ts);
            out.comment(base, &loyalist, ts);
        }
        out.comment(&modified, &explorer, t);
        for ts in times(rng, e_post, t, t + w) {
            out.comment(base, &explorer, ts);
        }
        out.comment(base, &loyalist, t);
        for ts in times(rng, l_extra, t, t + w) {
            out.comment(base, &loyalist, ts);
        }
    }
    Ok(ExplorationTruth {
        mode: x.mode,
        explorers: k,
        window_days: x.window_days,
        lambda: (x.mode == PlantMode::Stochastic).then_some(x.lambda),
        boost,
        p_e,
        p_ne,
        effect: p_e - p_ne,
    })
}

fn is_affix_related(a: &str, b: &str) -> bool {
    a != b && (a.starts_with(b) || b.starts_with(a) || a.ends_with(b) || b.ends_with(a))
}

/// Random lowercase name of `len` letters.
fn random_word(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// `n` distinct names, none a prefix or suffix of another or of `reserved`.
pub fn unrelated_names(rng: &mut ChaCha8Rng, n: usize, reserved: &BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(7..=11);
        let cand = random_word(rng, len);
        if reserved.contains(&cand)
            || out.contains(&cand)
            || reserved.iter().chain(out.iter()).any(|o| is_affix_related(o, &cand))
        {
            continue;
        }
        out.push(cand);
    }
    out
}

/// `n` distinct names mixing short random bases, their affixed variants
/// from the taxonomy pool, and unrelated noise. Sorted.
pub fn random_names(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tax = Taxonomy::default();
    let affixes: Vec<String> = tax.affixes().map(str::to_string).collect();
    let mut names = BTreeSet::new();
    let mut bases: Vec<String> = Vec::new();
    while names.len() < n {
        let roll: f64 = rng.gen();
        let name = if roll < 0.3 || bases.is_empty() {
            let len = rng.gen_range(2..=6);
            let b = random_word(&mut rng, len);
            bases.push(b.clone());
            b
        } else if roll < 0.85 {
            let b = bases.choose(&mut rng).unwrap().clone();
            let a = affixes.choose(&mut rng).unwrap();
            if rng.gen_bool(0.7) {
                format!("{b}{a}")
            } else {
                format!("{a}{b}")
            }
        } else {
            let len = rng.gen_range(1..=9);
            random_word(&mut rng, len)
        };
        names.insert(name);
    }
    names.into_iter().collect()
}

/// Generates the event stream (sorted by time, community, user) and its manifest.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<SynthEvent>, GroundTruth)> {
    cfg.validate()?;
    let tax = Taxonomy::default();
    let end = cfg.end_ts();
    let mut out = Emitter { events: Vec::new() };

    let reserved: BTreeSet<String> = cfg.pairs.iter().flat_map(|p| [p.base.clone(), p.modified()]).collect();
    let mut name_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0));
    let background = unrelated_names(&mut name_rng, cfg.background.communities, &reserved);
    for (i, name) in background.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1 + i as u64));
        let a = &cfg.background.activity;
        let day = rng.gen_range(0..=cfg.background.created_day_max);
        let created = cfg.start_ts + day * SECONDS_PER_DAY;
        let pools = Pools::own(name, a);
        emit_founder(&mut out, name, created, &pools);
        emit_activity(&mut out, &mut rng, name, &format!("{name}_u"), a, &pools, created, end);
    }

    let mut planted = Vec::with_capacity(cfg.pairs.len());
    for (i, p) in cfg.pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1_000_000 + i as u64));
        let base = p.base.as_str();
        let modified = p.modified();
        let base_created = cfg.start_ts + p.base_created_day * SECONDS_PER_DAY;
        let modified_created = cfg.start_ts + p.modified_created_day * SECONDS_PER_DAY;
        let mod_act = p.modified_activity.as_ref().unwrap_or(&p.activity);
        let base_pools = Pools::own(base, &p.activity);
        let mod_pools = Pools::overlapping(&modified, mod_act, &base_pools, p.link_overlap, p.topic_shared);
        let modified_is_newer = p.modified_is_newer();
        let (older, newer, older_created, newer_created) = if modified_is_newer {
            (base.to_string(), modified.clone(), base_created, modified_created)
        } else {
            (modified.clone(), base.to_string(), modified_created, base_created)
        };

        emit_founder(&mut out, &older, older_created, if modified_is_newer { &base_pools } else { &mod_pools });
        // the early block occupies the newer community's first day
        let newer_open = match &p.early {
            Some(e) => {
                let members = (e.fraction * e.n as f64).round() as usize;
                let chosen = spread(members, e.n);
                for j in 0..e.n {
                    let user = format!("{newer}_early{j}");
                    let first = newer_created + j as i64 * MINUTE;
                    out.comment(&newer, &user, first);
                    let member = match e.mode {
                        PlantMode::Deterministic => chosen(j),
                        PlantMode::Stochastic => rng.gen_bool(e.fraction),
                    };
                    if member {
                        out.comment(&older, &user, first - SECONDS_PER_DAY + 30);
                    }
                }
                newer_created + SECONDS_PER_DAY.max(e.n as i64 * MINUTE + MINUTE)
            }
            None => {
                emit_founder(&mut out, &newer, newer_created, if modified_is_newer { &mod_pools } else { &base_pools });
                newer_created + SECONDS_PER_DAY
            }
        };
        let (base_open, mod_open) = if modified_is_newer {
            (base_created, newer_open)
        } else {
            (newer_open, modified_created)
        };
        emit_activity(&mut out, &mut rng, base, &format!("{base}_u"), &p.activity, &base_pools, base_open, end);
        emit_activity(&mut out, &mut rng, &modified, &format!("{modified}_u"), mod_act, &mod_pools, mod_open, end);

        for (m, [n_new, n_old]) in p.schedule.iter().enumerate() {
            let bin = newer_created + m as i64 * MONTH;
            for (community, count) in [(&newer, *n_new), (&older, *n_old)] {
                let user = format!("{community}_regular");
                for j in 0..count as i64 {
                    let ts = bin + SECONDS_PER_DAY + j * MINUTE + 30;
                    if ts < (bin + MONTH).min(end) {
                        out.comment(community, &user, ts);
                    }
                }
            }
        }

        let exploration = match &p.exploration {
            Some(x) => Some(plant_exploration(&mut out, &mut rng, cfg, p, x)?),
            None => None,
        };

        let early_fraction = p.early.as_ref().map(|e| match e.mode {
            PlantMode::Deterministic => (e.fraction * e.n as f64).round() / e.n as f64,
            PlantMode::Stochastic => e.fraction,
        });
        planted.push(PlantedPair {
            pair: format!("{base}:{modified}"),
            base: base.to_string(),
            modified: modified.clone(),
            affix: p.affix.clone(),
            position: p.position,
            category: tax.category(&p.affix).to_string(),
            base_created,
            modified_created,
            modified_is_newer,
            link_overlap: p.link_overlap,
            topic_shared: p.topic_shared,
            early_n: p.early.as_ref().map(|e| e.n),
            early_fraction,
            early_mode: p.early.as_ref().map(|e| e.mode),
            spinoff: early_fraction.map(|f| modified_is_newer && f > 0.10),
            exploration,
            schedule: p.schedule.clone(),
        });
    }

    // one action at the very end fixes the corpus time range
    if let Some(first) = background.first().map(String::as_str).or(cfg.pairs.first().map(|p| p.base.as_str())) {
        out.comment(first, "corpus_sentinel", end - 30);
    }

    let mut events = out.events;
    events.sort_unstable();
    events.dedup();
    let truth = GroundTruth {
        seed: cfg.seed,
        start_ts: cfg.start_ts,
        end_ts: end,
        events: events.len(),
        background,
        pairs: planted,
    };
    Ok((events, truth))
}

pub fn write_jsonl<W: Write>(events: &[SynthEvent], out: W) -> Result<()> {
    let mut w = io::BufWriter::new(out);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest<W: Write>(truth: &GroundTruth, out: W) -> Result<()> {
    let mut w = io::BufWriter::new(out);
    serde_json::to_writer_pretty(&mut w, truth)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn to_records(events: &[SynthEvent]) -> Result<Vec<EventRecord>> {
    events.iter().map(SynthEvent::to_record).collect()
}

/// A lazily generated JSON Lines corpus of `total` events over `communities`
/// communities and `users` users, for throughput measurement without
/// materializing the input.
pub struct StreamingCorpus {
    rng: ChaCha8Rng,
    remaining: u64,
    communities: u32,
    users: u32,
    ts: Timestamp,
    buf: Vec<u8>,
    pos: usize,
}

impl StreamingCorpus {
    pub fn new(seed: u64, total: u64, communities: u32, users: u32) -> Self {
        StreamingCorpus {
            rng: ChaCha8Rng::seed_from_u64(seed),
            remaining: total,
            communities: communities.max(1),
            users: users.max(1),
            ts: DEFAULT_START,
            buf: Vec::with_capacity(1 << 16),
            pos: 0,
        }
    }

    fn refill(&mut self) {
        self.buf.clear();
        self.pos = 0;
        while self.remaining > 0 && self.buf.len() < (1 << 16) - 256 {
            self.remaining -= 1;
            self.ts += self.rng.gen_range(0..3);
            let c = self.rng.gen_range(0..self.communities);
            let u = self.rng.gen_range(0..self.users);
            if self.rng.gen_bool(0.3) {
                let link = self.rng.gen_range(0..1000u32);
                let _ = writeln!(
                    self.buf,
                    r#"{{"user":"u{u}","community":"c{c}","ts":{},"kind":"post","url":"https://c{c}.example.org/{link}","text":"w{} w{} w{}"}}"#,
                    self.ts,
                    link % 50,
                    link % 7,
                    c
                );
            } else {
                let _ = writeln!(
                    self.buf,
                    r#"{{"user":"u{u}","community":"c{c}","ts":{},"kind":"comment"}}"#,
                    self.ts
                );
            }
        }
    }
}

impl Read for StreamingCorpus {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if self.pos == self.buf.len() {
            self.refill();
            if self.buf.is_empty() {
                return Ok(0);
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig::from_json(
            r#"{
                "seed": 1,
                "duration_days": 400,
                "background": {"communities": 5, "created_day_max": 100},
                "pairs": [{
                    "base": "food", "affix": "true", "position": "prefix",
                    "base_created_day": 10, "modified_created_day": 60,
                    "link_overlap": 0.5, "topic_shared": 0.5,
                    "early": {"n": 100, "fraction": 0.5},
                    "exploration": {"explorers": 20, "pre": 6, "p_e": 0.6, "p_ne": 0.5}
                }]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let render = |cfg: &SynthConfig| {
            let (ev, truth) = generate(cfg).unwrap();
            let mut a = Vec::new();
            write_jsonl(&ev, &mut a).unwrap();
            write_manifest(&truth, &mut a).unwrap();
            a
        };
        assert_eq!(render(&small()), render(&small()));
        let mut other = small();
        other.seed = 2;
        assert_ne!(render(&small()), render(&other));
    }

    #[test]
    fn stream_parses_without_skips() {
        let (ev, truth) = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ev, &mut buf).unwrap();
        let (records, report) = crate::corpus::parse_events(&buf[..], crate::corpus::InputFormat::JsonLines).unwrap();
        assert_eq!(report.skipped, 0);
        assert_eq!(records.len(), truth.events);
        assert_eq!(truth.pairs[0].category, "better");
        assert_eq!(truth.pairs[0].spinoff, Some(true));
    }

    #[test]
    fn spinoff_before_parent_rejected() {
        let mut cfg = small();
        cfg.pairs[0].modified_created_day = 5;
        let err = generate(&cfg).unwrap_err().to_string();
        assert!(err.contains("spinoff planted before parent"), "{err}");
    }

    #[test]
    fn invalid_fractions_rejected() {
        let mut cfg = small();
        cfg.pairs[0].link_overlap = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.background.activity.rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn background_names_unrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reserved: BTreeSet<String> = ["food".to_string()].into();
        let names = unrelated_names(&mut rng, 200, &reserved);
        for (i, a) in names.iter().enumerate() {
            assert!(!is_affix_related(a, "food"));
            for b in &names[i + 1..] {
                assert!(!is_affix_related(a, b));
            }
        }
    }

    #[test]
    fn spread_is_exact() {
        for (m, n) in [(0, 100), (50, 100), (11, 100), (100, 100), (3, 7)] {
            let f = spread(m, n);
            assert_eq!((0..n).filter(|&i| f(i)).count(), m);
        }
    }

    #[test]
    fn boost_hits_target_effect() {
        for lambda in [6.0, 8.0, 15.0] {
            let b = solve_boost(lambda, 0.10).unwrap();
            let eff = explorer_increase_probability(lambda, b) - loyalist_increase_probability(lambda);
            assert!((eff - 0.10).abs() < 1e-9, "lambda {lambda}: {eff}");
            assert!(b > 1.0);
        }
    }

    #[test]
    fn increase_probabilities_match_simulation() {
        let lambda = 8.0;
        let b = 1.3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut inc_e, mut inc_ne, n) = (0, 0, 200_000);
        for _ in 0..n {
            let mut pre = poisson(&mut rng, lambda);
            while pre < 5 {
                pre = poisson(&mut rng, lambda);
            }
            inc_e += (poisson(&mut rng, b * lambda) > pre) as usize;
            inc_ne += (1 + poisson(&mut rng, lambda - 1.0) > pre) as usize;
        }
        let se = 0.5 / (n as f64).sqrt();
        assert!((inc_e as f64 / n as f64 - explorer_increase_probability(lambda, b)).abs() < 5.0 * se);
        assert!((inc_ne as f64 / n as f64 - loyalist_increase_probability(lambda)).abs() < 5.0 * se);
    }

    #[test]
    fn streaming_corpus_emits_exact_count() {
        let mut s = StreamingCorpus::new(1, 5000, 10, 100);
        let mut text = String::new();
        s.read_to_string(&mut text).unwrap();
        assert_eq!(text.lines().count(), 5000);
    }

    #[test]
    fn half_minute_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let t = half_minute(&mut rng, 600, 720).unwrap();
            assert!(t == 630 || t == 690);
        }
        assert!(half_minute(&mut rng, 600, 630).is_none());
    }
}
