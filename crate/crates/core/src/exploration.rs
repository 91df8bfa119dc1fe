//! Explorer identification, matched nonexplorer sampling, and the
//! exploration effect `p_e − p_ne`.
//!
//! For a spinoff pair, an explorer is a user of the original community whose
//! first spinoff action at `t` was preceded by at least `min_pre` original
//! actions in `[t − w, t)`. Each explorer, in ascending `t` order, is matched
//! to one never-exploring user of the original community who acted there
//! within 24 hours of `t` (anchor `t'`, the action closest to `t`) and whose
//! pre-count over `[t' − w, t')` differs by less than 5% of the explorer's.
//! Controls are drawn without replacement within a pair.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Community, CommunityIndex, Timestamp, UserId, SECONDS_PER_DAY, SECONDS_PER_HOUR};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::stats::{self, Interval};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationParams {
    pub window_days: i64,
    pub match_window_hours: i64,
    pub match_tolerance: f64,
    pub min_pre: usize,
    pub min_k: usize,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for ExplorationParams {
    fn default() -> Self {
        ExplorationParams {
            window_days: 30,
            match_window_hours: 24,
            match_tolerance: 0.05,
            min_pre: 5,
            min_k: 100,
            bootstrap_resamples: 1000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

impl ExplorationParams {
    pub fn window(&self) -> i64 {
        self.window_days * SECONDS_PER_DAY
    }

    pub fn match_window(&self) -> i64 {
        self.match_window_hours * SECONDS_PER_HOUR
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_days <= 0 || self.match_window_hours < 0 {
            return Err(Error::config("windows must be positive"));
        }
        if !(0.0..=1.0).contains(&self.match_tolerance) {
            return Err(Error::config("match tolerance must lie in [0, 1]"));
        }
        if !(0.0 < self.confidence && self.confidence < 1.0) {
            return Err(Error::config("confidence level must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explorer {
    pub user: String,
    #[serde(skip)]
    pub user_id: Option<UserId>,
    pub t: Timestamp,
    pub pre_count: usize,
    pub post_count: usize,
}

impl Explorer {
    pub fn increased(&self) -> bool {
        self.post_count > self.pre_count
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub explorer: Explorer,
    pub control: String,
    #[serde(skip)]
    pub control_id: Option<UserId>,
    pub t_prime: Timestamp,
    pub control_pre: usize,
    pub control_post: usize,
}

impl MatchedPair {
    pub fn control_increased(&self) -> bool {
        self.control_post > self.control_pre
    }
}

fn resolve<'a>(index: &'a CommunityIndex, name: &str) -> Result<&'a Community> {
    index
        .community(name)
        .ok_or_else(|| Error::contract(format!("community {name:?} not in index")))
}

/// Last second whose post window is fully observed: `t + w − 1 ≤ end`.
fn observable(t: Timestamp, window: i64, corpus_end: Timestamp) -> bool {
    t + window - 1 <= corpus_end
}

/// Explorers of `spinoff` drawn from `original`, ascending by `(t, user)`.
pub fn find_explorers(
    index: &CommunityIndex,
    original: &str,
    spinoff: &str,
    params: &ExplorationParams,
) -> Result<Vec<Explorer>> {
    let orig = resolve(index, original)?;
    let spin = resolve(index, spinoff)?;
    let Some((_, corpus_end)) = index.time_range() else {
        return Ok(Vec::new());
    };
    let w = params.window();
    let mut out: Vec<Explorer> = spin
        .users()
        .iter()
        .filter_map(|&u| {
            let t = *spin.user_actions(u).first()?;
            if !observable(t, w, corpus_end) {
                return None;
            }
            let pre = orig.activity_count(u, t - w, t);
            if pre < params.min_pre {
                return None;
            }
            Some(Explorer {
                user: index.user_name(u).to_string(),
                user_id: Some(u),
                t,
                pre_count: pre,
                post_count: orig.activity_count(u, t, t + w),
            })
        })
        .collect();
    out.sort_by(|a, b| (a.t, &a.user).cmp(&(b.t, &b.user)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    /// No unused nonexplorer acted in the original community near `t`.
    NoCandidate,
    /// The closest pre-count was not within tolerance.
    OutsideTolerance { best_diff: usize },
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropReason::NoCandidate => f.write_str("no_candidate"),
            DropReason::OutsideTolerance { best_diff } => write!(f, "outside_tolerance:diff={best_diff}"),
        }
    }
}

/// Sequential, without-replacement control sampler for one pair.
pub struct ControlSampler<'a> {
    index: &'a CommunityIndex,
    original: &'a Community,
    spinoff: &'a Community,
    params: &'a ExplorationParams,
    used: HashSet<UserId>,
    // per-user stamp of the last sample that saw them; dense over user ids
    seen: Vec<u32>,
    stamp: u32,
}

impl<'a> ControlSampler<'a> {
    pub fn new(
        index: &'a CommunityIndex,
        original: &'a Community,
        spinoff: &'a Community,
        params: &'a ExplorationParams,
    ) -> Self {
        ControlSampler {
            index,
            original,
            spinoff,
            params,
            used: HashSet::new(),
            seen: vec![0; index.user_count()],
            stamp: 0,
        }
    }

    pub fn used(&self) -> &HashSet<UserId> {
        &self.used
    }

    /// Matches one explorer, consuming the chosen control.
    ///
    /// Entries are visited outward from `t`, the earlier side first at equal
    /// distance, so a user's first visit is their closest action. The winner
    /// minimizes `(|pre' - pre|, |t' - t|, user id)`.
    pub fn sample(&mut self, explorer: &Explorer) -> std::result::Result<MatchedPair, DropReason> {
        let t = explorer.t;
        let (w, h) = (self.params.window(), self.params.match_window());
        self.stamp += 1;
        if self.stamp == u32::MAX {
            self.seen.fill(0);
            self.stamp = 1;
        }

        let entries = self.original.entries_between(t - h, t + h);
        let split = entries.partition_point(|e| e.ts < t);
        let (mut left, mut right) = (split, split);
        let mut best: Option<(usize, i64, UserId, Timestamp, usize)> = None;
        loop {
            let take_left = match (left > 0, right < entries.len()) {
                (false, false) => break,
                (true, false) => true,
                (false, true) => false,
                (true, true) => t - entries[left - 1].ts <= entries[right].ts - t,
            };
            let e = if take_left {
                left -= 1;
                &entries[left]
            } else {
                right += 1;
                &entries[right - 1]
            };
            let dist = (e.ts - t).abs();
            if let Some(b) = best {
                if b.0 == 0 && dist > b.1 {
                    break;
                }
            }
            let slot = &mut self.seen[e.user.index()];
            if *slot == self.stamp {
                continue;
            }
            *slot = self.stamp;
            if self.used.contains(&e.user) || self.spinoff.has_user(e.user) {
                continue;
            }
            let pre = self.original.activity_count(e.user, e.ts - w, e.ts);
            let cand = (pre.abs_diff(explorer.pre_count), dist, e.user, e.ts, pre);
            if best.is_none_or(|b| (cand.0, cand.1, cand.2) < (b.0, b.1, b.2)) {
                best = Some(cand);
            }
        }

        let Some((diff, _, user, t_prime, control_pre)) = best else {
            return Err(DropReason::NoCandidate);
        };
        if (diff as f64) >= self.params.match_tolerance * explorer.pre_count as f64 {
            return Err(DropReason::OutsideTolerance { best_diff: diff });
        }
        self.used.insert(user);
        Ok(MatchedPair {
            explorer: explorer.clone(),
            control: self.index.user_name(user).to_string(),
            control_id: Some(user),
            t_prime,
            control_pre,
            control_post: self.original.activity_count(user, t_prime, t_prime + w),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairMatching {
    pub explorers: Vec<Explorer>,
    pub matches: Vec<MatchedPair>,
    pub dropped: Vec<(Explorer, DropReason)>,
}

/// Finds explorers and samples a control for each, in ascending `t` order.
pub fn match_pair(
    index: &CommunityIndex,
    original: &str,
    spinoff: &str,
    params: &ExplorationParams,
) -> Result<PairMatching> {
    let explorers = find_explorers(index, original, spinoff, params)?;
    let orig = resolve(index, original)?;
    let spin = resolve(index, spinoff)?;
    let mut sampler = ControlSampler::new(index, orig, spin, params);
    let mut out = PairMatching::default();
    for e in &explorers {
        match sampler.sample(e) {
            Ok(m) => out.matches.push(m),
            Err(reason) => out.dropped.push((e.clone(), reason)),
        }
    }
    out.explorers = explorers;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartileStat {
    pub quartile: u8,
    pub n: usize,
    pub p_e: f64,
    pub p_ne: f64,
    pub p_e_ci: Option<Interval>,
    pub p_ne_ci: Option<Interval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartileBreakdown {
    pub bins: Vec<QuartileStat>,
    /// Ties left at least one bin empty.
    pub degenerate: bool,
}

/// Bin (1–4) of each matched pair by the explorer's pre-count. Cut points
/// are the lower quantiles `sorted[⌈j·k/4⌉ − 1]`; ties go to the lower bin.
pub fn quartile_assignment(matches: &[MatchedPair]) -> Vec<u8> {
    let k = matches.len();
    if k == 0 {
        return Vec::new();
    }
    let mut sorted: Vec<usize> = matches.iter().map(|m| m.explorer.pre_count).collect();
    sorted.sort_unstable();
    let cuts: Vec<usize> = (1..=3).map(|j| sorted[(j * k).div_ceil(4) - 1]).collect();
    matches
        .iter()
        .map(|m| {
            let x = m.explorer.pre_count;
            cuts.iter().position(|&c| x <= c).map(|i| i as u8 + 1).unwrap_or(4)
        })
        .collect()
}

pub fn quartile_breakdown(matches: &[MatchedPair], params: &ExplorationParams, seed: u64, exec: Exec) -> QuartileBreakdown {
    let bins = quartile_assignment(matches);
    let stats: Vec<QuartileStat> = (1..=4u8)
        .map(|q| {
            let members: Vec<&MatchedPair> = matches
                .iter()
                .zip(&bins)
                .filter(|(_, &b)| b == q)
                .map(|(m, _)| m)
                .collect();
            let e: Vec<bool> = members.iter().map(|m| m.explorer.increased()).collect();
            let ne: Vec<bool> = members.iter().map(|m| m.control_increased()).collect();
            let boot = stats::paired_proportion_bootstrap(
                &e,
                &ne,
                params.bootstrap_resamples,
                params.confidence,
                stats::mix_seed(seed, 1000 + q as u64),
                exec,
            );
            QuartileStat {
                quartile: q,
                n: members.len(),
                p_e: stats::fraction_true(&e),
                p_ne: stats::fraction_true(&ne),
                p_e_ci: boot.map(|b| b.first),
                p_ne_ci: boot.map(|b| b.second),
            }
        })
        .collect();
    let degenerate = stats.iter().any(|s| s.n == 0);
    QuartileBreakdown { bins: stats, degenerate }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationResult {
    pub pair: String,
    pub k: usize,
    pub p_e: f64,
    pub p_ne: f64,
    pub effect: f64,
    pub ci: Option<Interval>,
    /// `k < min_k`: excluded from reports and aggregation.
    pub discarded: bool,
    pub quartiles: Option<QuartileBreakdown>,
}

/// Derives the bootstrap seed for a pair from the run seed and its id.
pub fn pair_seed(seed: u64, pair: &str) -> u64 {
    stats::mix_seed(seed, stats::fnv1a(pair.as_bytes()))
}

pub fn exploration_effect(pair: &str, matches: &[MatchedPair], params: &ExplorationParams, exec: Exec) -> ExplorationResult {
    let k = matches.len();
    let e: Vec<bool> = matches.iter().map(|m| m.explorer.increased()).collect();
    let ne: Vec<bool> = matches.iter().map(|m| m.control_increased()).collect();
    let p_e = stats::fraction_true(&e);
    let p_ne = stats::fraction_true(&ne);
    let discarded = k < params.min_k || k == 0;
    let seed = pair_seed(params.seed, pair);
    let (ci, quartiles) = if discarded {
        (None, None)
    } else {
        let boot = stats::paired_proportion_bootstrap(
            &e,
            &ne,
            params.bootstrap_resamples,
            params.confidence,
            seed,
            exec,
        );
        (
            boot.map(|b| b.difference),
            Some(quartile_breakdown(matches, params, seed, exec)),
        )
    };
    ExplorationResult {
        pair: pair.to_string(),
        k,
        p_e,
        p_ne,
        effect: p_e - p_ne,
        ci,
        discarded,
        quartiles,
    }
}

/// A spinoff pair to evaluate: explorers come from `original` into `spinoff`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpinoffPair {
    pub pair: String,
    pub original: String,
    pub spinoff: String,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairOutcome {
    pub pair: SpinoffPair,
    pub matching: PairMatching,
    pub result: ExplorationResult,
}

/// Runs matching and effect estimation for every pair. Pairs run in
/// parallel; matching within a pair is sequential.
pub fn explore_pairs(
    index: &CommunityIndex,
    pairs: &[SpinoffPair],
    params: &ExplorationParams,
    exec: Exec,
) -> Result<Vec<PairOutcome>> {
    params.validate()?;
    par::map(exec, pairs, |p| {
        let matching = match_pair(index, &p.original, &p.spinoff, params)?;
        let result = exploration_effect(&p.pair, &matching.matches, params, exec);
        Ok(PairOutcome {
            pair: p.clone(),
            matching,
            result,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEffect {
    pub category: String,
    pub pairs: usize,
    pub mean_effect: f64,
    /// At least `min_pairs` pairs; smaller categories stay in the raw output.
    pub shown: bool,
}

/// Macro average of per-pair effects by category over non-discarded pairs.
pub fn aggregate(outcomes: &[(String, f64)], min_pairs: usize) -> Vec<CategoryEffect> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (cat, effect) in outcomes {
        groups.entry(cat).or_default().push(*effect);
    }
    groups
        .into_iter()
        .map(|(c, effects)| CategoryEffect {
            category: c.to_string(),
            pairs: effects.len(),
            mean_effect: stats::mean(&effects).unwrap_or(0.0),
            shown: effects.len() >= min_pairs,
        })
        .collect()
}

pub fn aggregate_outcomes(outcomes: &[PairOutcome], min_pairs: usize) -> Vec<CategoryEffect> {
    let rows: Vec<(String, f64)> = outcomes
        .iter()
        .filter(|o| !o.result.discarded)
        .map(|o| (o.pair.category.clone(), o.result.effect))
        .collect();
    aggregate(&rows, min_pairs)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `pair,k,p_e,p_ne,effect,ci_lo,ci_hi` for reported (non-discarded) pairs.
pub fn write_results<W: Write>(outcomes: &[PairOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair", "k", "p_e", "p_ne", "effect", "ci_lo", "ci_hi"])?;
    for o in outcomes.iter().filter(|o| !o.result.discarded) {
        let r = &o.result;
        w.write_record([
            r.pair.clone(),
            r.k.to_string(),
            r.p_e.to_string(),
            r.p_ne.to_string(),
            r.effect.to_string(),
            opt(r.ci.map(|c| c.lo)),
            opt(r.ci.map(|c| c.hi)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `pair,quartile,p_e,p_ne,n`.
pub fn write_quartiles<W: Write>(outcomes: &[PairOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair", "quartile", "p_e", "p_ne", "n"])?;
    for o in outcomes {
        if let Some(q) = &o.result.quartiles {
            for b in &q.bins {
                w.write_record([
                    o.result.pair.clone(),
                    b.quartile.to_string(),
                    b.p_e.to_string(),
                    b.p_ne.to_string(),
                    b.n.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `category,pairs,mean_effect,shown`.
pub fn write_categories<W: Write>(cats: &[CategoryEffect], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cats {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

/// Every emitted match: `pair,explorer,t,pre,post,control,t_prime,control_pre,control_post`.
pub fn write_matches<W: Write>(outcomes: &[PairOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "pair",
        "explorer",
        "t",
        "pre",
        "post",
        "control",
        "t_prime",
        "control_pre",
        "control_post",
    ])?;
    for o in outcomes {
        for m in &o.matching.matches {
            w.write_record([
                o.pair.pair.clone(),
                m.explorer.user.clone(),
                m.explorer.t.to_string(),
                m.explorer.pre_count.to_string(),
                m.explorer.post_count.to_string(),
                m.control.clone(),
                m.t_prime.to_string(),
                m.control_pre.to_string(),
                m.control_post.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Dropped entities with reasons: `pair,entity,reason`.
pub fn write_dropped<W: Write>(outcomes: &[PairOutcome], min_k: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair", "entity", "reason"])?;
    for o in outcomes {
        for (e, reason) in &o.matching.dropped {
            w.write_record([o.pair.pair.clone(), format!("explorer:{}", e.user), reason.to_string()])?;
        }
        if o.result.discarded {
            w.write_record([
                o.pair.pair.clone(),
                "pair".to_string(),
                format!("k={}<{}", o.result.k, min_k),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
