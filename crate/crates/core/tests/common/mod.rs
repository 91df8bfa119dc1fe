//! Independent reference implementations used as test oracles. Everything
//! here works from raw records with plain linear scans and ordered sets.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use relcom::corpus::{EventKind, EventRecord};
use relcom::exploration::{ExplorationParams, PairMatching};

pub fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Base-2 JS divergence by direct summation of both KL terms.
pub fn js(p: &[f64], q: &[f64]) -> f64 {
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        if p[i] > 0.0 {
            kl_p += p[i] * (p[i] / m).log2();
        }
        if q[i] > 0.0 {
            kl_q += q[i] * (q[i] / m).log2();
        }
    }
    0.5 * kl_p + 0.5 * kl_q
}

/// Midrank percentile by counting: strictly less similar plus half the ties.
pub fn midrank(values: &[f64], x: f64, higher_is_similar: bool) -> f64 {
    let mut less = 0usize;
    let mut ties = 0usize;
    for &v in values {
        if v == x {
            ties += 1;
        } else if (v < x) == higher_is_similar {
            less += 1;
        }
    }
    100.0 * (less as f64 + 0.5 * ties as f64) / values.len() as f64
}

/// `(base, modified, position, affix)` over every ordered pair of names.
pub fn affix_pairs(names: &[String]) -> BTreeSet<(String, String, String, String)> {
    let names: Vec<String> = names.iter().map(|n| n.to_lowercase()).collect();
    let mut out = BTreeSet::new();
    for a in &names {
        for b in &names {
            if b.len() <= a.len() {
                continue;
            }
            if b.starts_with(a.as_str()) {
                out.insert((a.clone(), b.clone(), "suffix".into(), b[a.len()..].to_string()));
            }
            if b.ends_with(a.as_str()) {
                out.insert((a.clone(), b.clone(), "prefix".into(), b[..b.len() - a.len()].to_string()));
            }
        }
    }
    out
}

/// Deduplicated per-user, per-community action times rebuilt from records.
pub struct Activity {
    times: HashMap<(String, String), Vec<i64>>,
    members: HashMap<String, BTreeSet<String>>,
    posters: HashMap<String, BTreeSet<String>>,
    first: HashMap<String, i64>,
    pub end: i64,
}

impl Activity {
    pub fn new(records: &[EventRecord]) -> Self {
        let keys: BTreeSet<(String, i64, String, bool, Option<String>)> = records
            .iter()
            .map(|r| {
                (
                    r.community.key().to_string(),
                    r.timestamp,
                    r.user_id.clone(),
                    r.kind == EventKind::Post,
                    r.link_url.clone(),
                )
            })
            .collect();
        let mut a = Activity {
            times: HashMap::new(),
            members: HashMap::new(),
            posters: HashMap::new(),
            first: HashMap::new(),
            end: i64::MIN,
        };
        for (c, ts, u, post, _) in keys {
            a.times.entry((u.clone(), c.clone())).or_default().push(ts);
            a.members.entry(c.clone()).or_default().insert(u.clone());
            if post {
                a.posters.entry(c.clone()).or_default().insert(u);
            }
            let f = a.first.entry(c).or_insert(ts);
            *f = (*f).min(ts);
            a.end = a.end.max(ts);
        }
        for v in a.times.values_mut() {
            v.sort_unstable();
        }
        a
    }

    pub fn times(&self, user: &str, community: &str) -> &[i64] {
        self.times
            .get(&(user.to_string(), community.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn count(&self, user: &str, community: &str, a: i64, b: i64) -> usize {
        self.times(user, community).iter().filter(|&&t| a <= t && t < b).count()
    }

    pub fn members(&self, community: &str) -> impl Iterator<Item = &String> {
        self.members.get(community).into_iter().flatten()
    }

    pub fn posters(&self, community: &str) -> usize {
        self.posters.get(community).map_or(0, BTreeSet::len)
    }

    pub fn first(&self, community: &str) -> Option<i64> {
        self.first.get(community).copied()
    }

    pub fn communities(&self) -> BTreeSet<&String> {
        self.members.keys().collect()
    }
}

/// Explorers by per-user window scan: `(user, t, pre, post)`.
pub fn explorers(act: &Activity, original: &str, spinoff: &str, p: &ExplorationParams) -> BTreeSet<(String, i64, usize, usize)> {
    let w = p.window();
    act.members(spinoff)
        .filter_map(|u| {
            let t = *act.times(u, spinoff).iter().min()?;
            let pre = act.count(u, original, t - w, t);
            (pre >= p.min_pre && t + w - 1 <= act.end).then(|| (u.clone(), t, pre, act.count(u, original, t, t + w)))
        })
        .collect()
}

/// A candidate's closest action to `t` within the match window; ties go to the earlier action.
fn anchor(act: &Activity, user: &str, original: &str, t: i64, h: i64) -> Option<i64> {
    let mut best: Option<i64> = None;
    for &s in act.times(user, original) {
        if (s - t).abs() > h {
            continue;
        }
        best = match best {
            Some(b) if (b - t).abs() < (s - t).abs() => Some(b),
            Some(b) if (b - t).abs() == (s - t).abs() => Some(b.min(s)),
            _ => Some(s),
        };
    }
    best
}

#[derive(Debug, Default)]
pub struct Audit {
    pub matches: usize,
    pub dropped: usize,
    pub violations: Vec<String>,
    pub feasible_drops: Vec<String>,
}

/// Checks every emitted match against the three constraints and scans every
/// dropped explorer for a control that was still available and feasible.
pub fn audit(act: &Activity, original: &str, spinoff: &str, m: &PairMatching, p: &ExplorationParams) -> Audit {
    let h = p.match_window();
    let w = p.window();
    let matched: HashMap<&str, usize> = m
        .matches
        .iter()
        .enumerate()
        .map(|(i, x)| (x.explorer.user.as_str(), i))
        .collect();
    let dropped: HashSet<&str> = m.dropped.iter().map(|(e, _)| e.user.as_str()).collect();
    let spin_members: HashSet<&String> = act.members(spinoff).collect();
    let mut used: HashSet<String> = HashSet::new();
    let mut out = Audit {
        matches: m.matches.len(),
        dropped: m.dropped.len(),
        ..Audit::default()
    };
    for e in &m.explorers {
        if let Some(&i) = matched.get(e.user.as_str()) {
            let x = &m.matches[i];
            let c = x.control.as_str();
            if spin_members.contains(&x.control) || !act.times(c, spinoff).is_empty() {
                out.violations.push(format!("{c} acted in the spinoff"));
            }
            if (x.t_prime - e.t).abs() > h {
                out.violations.push(format!("{c}: |t'-t| = {}", (x.t_prime - e.t).abs()));
            }
            if anchor(act, c, original, e.t, h) != Some(x.t_prime) {
                out.violations.push(format!("{c}: t' is not the closest action"));
            }
            let pre = act.count(c, original, x.t_prime - w, x.t_prime);
            if pre != x.control_pre || act.count(c, original, x.t_prime, x.t_prime + w) != x.control_post {
                out.violations.push(format!("{c}: window counts differ"));
            }
            if (pre.abs_diff(e.pre_count) as f64) >= p.match_tolerance * e.pre_count as f64 {
                out.violations.push(format!("{c}: pre {pre} vs {}", e.pre_count));
            }
            if !used.insert(c.to_string()) {
                out.violations.push(format!("{c} reused"));
            }
        } else if dropped.contains(e.user.as_str()) {
            for u in act.members(original) {
                if used.contains(u) || spin_members.contains(u) {
                    continue;
                }
                if let Some(tp) = anchor(act, u, original, e.t, h) {
                    let pre = act.count(u, original, tp - w, tp);
                    if (pre.abs_diff(e.pre_count) as f64) < p.match_tolerance * e.pre_count as f64 {
                        out.feasible_drops.push(format!("{} could match {u}", e.user));
                        break;
                    }
                }
            }
        } else {
            out.violations.push(format!("explorer {} neither matched nor dropped", e.user));
        }
    }
    out
}

/// Sort-and-slice quartile bins: `sorted[⌈jk/4⌉−1]` cut points, ties low.
pub fn quartile_bins(pre: &[usize]) -> Vec<u8> {
    let mut s = pre.to_vec();
    s.sort();
    let k = s.len();
    let q1 = s[k.div_ceil(4) - 1];
    let q2 = s[(2 * k).div_ceil(4) - 1];
    let q3 = s[(3 * k).div_ceil(4) - 1];
    pre.iter()
        .map(|&x| {
            if x <= q1 {
                1
            } else if x <= q2 {
                2
            } else if x <= q3 {
                3
            } else {
                4
            }
        })
        .collect()
}

pub fn group_mean(rows: &[(String, f64)]) -> BTreeMap<String, (usize, f64)> {
    let mut g: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (c, v) in rows {
        g.entry(c.clone()).or_default().push(*v);
    }
    g.into_iter()
        .map(|(c, v)| (c, (v.len(), v.iter().sum::<f64>() / v.len() as f64)))
        .collect()
}
