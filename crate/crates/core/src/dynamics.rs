//! Per-pair dynamics: which community came first, how active each is once
//! both exist, where the newer community's first participants came from,
//! and whether the pair is a spinoff.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};

use crate::affix::{AffixPair, UNCATEGORIZED};
use crate::corpus::{Community, CommunityIndex, Timestamp, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Month bins are fixed 30-day spans anchored at the newer community's creation.
pub const MONTH_SECONDS: i64 = 30 * SECONDS_PER_DAY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub early_n: usize,
    pub membership_window_days: i64,
    pub horizon_months: usize,
    pub spinoff_threshold: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            early_n: 100,
            membership_window_days: 30,
            horizon_months: 24,
            spinoff_threshold: 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalOrder {
    pub older: String,
    pub newer: String,
    pub older_created: Timestamp,
    pub newer_created: Timestamp,
    pub gap_days: f64,
    pub modified_is_newer: bool,
    /// Both communities share a creation timestamp; the older one was
    /// picked by name.
    pub creation_tie: bool,
}

fn lookup<'a>(index: &'a CommunityIndex, name: &str) -> Result<&'a Community> {
    index
        .community(name)
        .ok_or_else(|| Error::contract(format!("community {name:?} not in index")))
}

pub fn temporal_order(pair: &AffixPair, index: &CommunityIndex) -> Result<TemporalOrder> {
    let base = lookup(index, &pair.base)?;
    let modified = lookup(index, &pair.modified)?;
    let (tb, tm) = (base.first_event_time(), modified.first_event_time());
    let modified_is_newer = match tm.cmp(&tb) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => modified.key() > base.key(),
    };
    let (older, newer) = if modified_is_newer {
        (base, modified)
    } else {
        (modified, base)
    };
    Ok(TemporalOrder {
        older: older.key().to_string(),
        newer: newer.key().to_string(),
        older_created: older.first_event_time(),
        newer_created: newer.first_event_time(),
        gap_days: (newer.first_event_time() - older.first_event_time()) as f64 / SECONDS_PER_DAY as f64,
        modified_is_newer,
        creation_tie: tb == tm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortGap {
    pub year: i32,
    pub pairs: usize,
    pub mean_gap_days: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GapSummary {
    pub by_year: Vec<CohortGap>,
    pub overall_mean_days: Option<f64>,
}

pub fn utc_year(ts: Timestamp) -> i32 {
    DateTime::from_timestamp(ts, 0).map(|d| d.year()).unwrap_or(1970)
}

/// Mean gap grouped by the calendar year (UTC) the older community appeared.
pub fn gap_by_cohort(orders: &[TemporalOrder]) -> GapSummary {
    let mut groups: BTreeMap<i32, (usize, f64)> = BTreeMap::new();
    for o in orders {
        let g = groups.entry(utc_year(o.older_created)).or_default();
        g.0 += 1;
        g.1 += o.gap_days;
    }
    let by_year = groups
        .into_iter()
        .map(|(year, (pairs, sum))| CohortGap {
            year,
            pairs,
            mean_gap_days: sum / pairs as f64,
        })
        .collect();
    let overall_mean_days = if orders.is_empty() {
        None
    } else {
        Some(orders.iter().map(|o| o.gap_days).sum::<f64>() / orders.len() as f64)
    };
    GapSummary {
        by_year,
        overall_mean_days,
    }
}

/// `ln((a + 1) / (b + 1))`.
pub fn smoothed_log_ratio(a: usize, b: usize) -> f64 {
    ((a as f64 + 1.0) / (b as f64 + 1.0)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivityBalance {
    pub newer_count: usize,
    pub older_count: usize,
    pub log_ratio: f64,
}

/// Activity of newer vs older, counting only actions at or after the newer
/// community's creation.
pub fn activity_log_ratio(order: &TemporalOrder, index: &CommunityIndex) -> Result<ActivityBalance> {
    let newer = lookup(index, &order.newer)?;
    let older = lookup(index, &order.older)?;
    let newer_count = newer.events_since(order.newer_created);
    let older_count = older.events_since(order.newer_created);
    Ok(ActivityBalance {
        newer_count,
        older_count,
        log_ratio: smoothed_log_ratio(newer_count, older_count),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlyBin {
    pub month: usize,
    pub newer: usize,
    pub older: usize,
    pub log_ratio: f64,
}

pub fn monthly_ratio_series(
    order: &TemporalOrder,
    index: &CommunityIndex,
    horizon_months: usize,
) -> Result<Vec<MonthlyBin>> {
    if horizon_months == 0 {
        return Err(Error::config("horizon must be at least one month"));
    }
    let newer = lookup(index, &order.newer)?;
    let older = lookup(index, &order.older)?;
    Ok((0..horizon_months)
        .map(|m| {
            let a = order.newer_created + m as i64 * MONTH_SECONDS;
            let b = a + MONTH_SECONDS;
            let (n, o) = (newer.events_in(a, b), older.events_in(a, b));
            MonthlyBin {
                month: m,
                newer: n,
                older: o,
                log_ratio: smoothed_log_ratio(n, o),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyParticipants {
    pub fraction: f64,
    pub from_older: usize,
    pub considered: usize,
    /// Fewer than `n` distinct users existed.
    pub reduced: bool,
}

/// Fraction of the newer community's first `n` distinct users (by first
/// action, ties by user id) who acted in the older community within the
/// `window_days` before that first action.
pub fn early_participant_fraction(
    order: &TemporalOrder,
    index: &CommunityIndex,
    n: usize,
    window_days: i64,
) -> Result<EarlyParticipants> {
    if n == 0 {
        return Err(Error::config("early participant count must be at least 1"));
    }
    let newer = lookup(index, &order.newer)?;
    let older = lookup(index, &order.older)?;
    let window = window_days * SECONDS_PER_DAY;
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut from_older = 0;
    for e in newer.timeline() {
        if seen.len() == n {
            break;
        }
        if seen.insert(e.user) && older.activity_count(e.user, e.ts - window, e.ts) > 0 {
            from_older += 1;
        }
    }
    let considered = seen.len();
    Ok(EarlyParticipants {
        fraction: if considered == 0 {
            0.0
        } else {
            from_older as f64 / considered as f64
        },
        from_older,
        considered,
        reduced: considered < n,
    })
}

/// Strictly more than `threshold` of early participants from the older
/// community, and the newer community is the modified one.
pub fn is_spinoff(early_fraction: f64, modified_is_newer: bool, threshold: f64) -> bool {
    modified_is_newer && early_fraction > threshold
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpinoffReport {
    pub base: String,
    pub modified: String,
    pub older: String,
    pub newer: String,
    pub gap_days: f64,
    pub modified_is_newer: bool,
    pub creation_tie: bool,
    pub newer_count: usize,
    pub older_count: usize,
    pub log_ratio: f64,
    pub early_frac: f64,
    pub early_considered: usize,
    pub reduced_n: bool,
    pub spinoff: bool,
    pub category: String,
    pub monthly: Vec<MonthlyBin>,
}

impl SpinoffReport {
    pub fn id(&self) -> String {
        crate::affix::pair_id(&self.base, &self.modified)
    }

    /// The community explorers come from.
    pub fn original(&self) -> &str {
        &self.older
    }
}

pub fn characterize_pair(pair: &AffixPair, index: &CommunityIndex, params: &DynamicsParams) -> Result<SpinoffReport> {
    let order = temporal_order(pair, index)?;
    let balance = activity_log_ratio(&order, index)?;
    let monthly = monthly_ratio_series(&order, index, params.horizon_months)?;
    let early = early_participant_fraction(&order, index, params.early_n, params.membership_window_days)?;
    Ok(SpinoffReport {
        base: pair.base.clone(),
        modified: pair.modified.clone(),
        older: order.older,
        newer: order.newer,
        gap_days: order.gap_days,
        modified_is_newer: order.modified_is_newer,
        creation_tie: order.creation_tie,
        newer_count: balance.newer_count,
        older_count: balance.older_count,
        log_ratio: balance.log_ratio,
        early_frac: early.fraction,
        early_considered: early.considered,
        reduced_n: early.reduced,
        spinoff: is_spinoff(early.fraction, order.modified_is_newer, params.spinoff_threshold),
        category: pair.category_or_default().to_string(),
        monthly,
    })
}

pub fn characterize(
    pairs: &[AffixPair],
    index: &CommunityIndex,
    params: &DynamicsParams,
    exec: Exec,
) -> Result<Vec<SpinoffReport>> {
    par::map(exec, pairs, |p| characterize_pair(p, index, params))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEarly {
    pub category: String,
    pub pairs: usize,
    pub mean_early_frac: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpinoffClassification {
    pub spinoffs: Vec<SpinoffReport>,
    pub category_early: Vec<CategoryEarly>,
}

/// Re-applies the spinoff rule at `threshold` and averages early fractions
/// per category over all pairs.
pub fn classify_spinoffs(reports: &[SpinoffReport], threshold: f64) -> SpinoffClassification {
    let mut groups: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in reports {
        let g = groups.entry(r.category.as_str()).or_default();
        g.0 += 1;
        g.1 += r.early_frac;
    }
    SpinoffClassification {
        spinoffs: reports
            .iter()
            .filter(|r| is_spinoff(r.early_frac, r.modified_is_newer, threshold))
            .map(|r| SpinoffReport {
                spinoff: true,
                ..r.clone()
            })
            .collect(),
        category_early: groups
            .into_iter()
            .map(|(c, (n, s))| CategoryEarly {
                category: c.to_string(),
                pairs: n,
                mean_early_frac: s / n as f64,
            })
            .collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    pub pairs: usize,
    pub modified_newer_fraction: Option<f64>,
    pub overtake_fraction: Option<f64>,
    pub mean_log_ratio: Option<f64>,
    pub mean_gap_days: Option<f64>,
}

pub fn summarize(reports: &[SpinoffReport]) -> DynamicsSummary {
    let n = reports.len();
    let frac = |count: usize| (n > 0).then(|| count as f64 / n as f64);
    let mean = |sum: f64| (n > 0).then(|| sum / n as f64);
    DynamicsSummary {
        pairs: n,
        modified_newer_fraction: frac(reports.iter().filter(|r| r.modified_is_newer).count()),
        overtake_fraction: frac(reports.iter().filter(|r| r.log_ratio > 0.0).count()),
        mean_log_ratio: mean(reports.iter().map(|r| r.log_ratio).sum()),
        mean_gap_days: mean(reports.iter().map(|r| r.gap_days).sum()),
    }
}

/// One row of the dynamics report CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub base: String,
    pub modified: String,
    pub older: String,
    pub newer: String,
    pub gap_days: f64,
    pub modified_is_newer: bool,
    pub log_ratio: f64,
    pub early_frac: f64,
    pub spinoff: bool,
    pub category: String,
}

impl From<&SpinoffReport> for ReportRow {
    fn from(r: &SpinoffReport) -> Self {
        ReportRow {
            base: r.base.clone(),
            modified: r.modified.clone(),
            older: r.older.clone(),
            newer: r.newer.clone(),
            gap_days: r.gap_days,
            modified_is_newer: r.modified_is_newer,
            log_ratio: r.log_ratio,
            early_frac: r.early_frac,
            spinoff: r.spinoff,
            category: r.category.clone(),
        }
    }
}

/// Writes `base,modified,older,newer,gap_days,modified_is_newer,log_ratio,early_frac,spinoff,category`.
pub fn write_reports<W: Write>(reports: &[SpinoffReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(ReportRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_rows<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes the long-format monthly series: `pair,month,newer,older,log_ratio`.
pub fn write_monthly<W: Write>(reports: &[SpinoffReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair", "month", "newer", "older", "log_ratio"])?;
    for r in reports {
        for b in &r.monthly {
            w.write_record([
                r.id(),
                b.month.to_string(),
                b.newer.to_string(),
                b.older.to_string(),
                b.log_ratio.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Proxy and sample-size flags: `pair,flag`.
pub fn write_flags<W: Write>(reports: &[SpinoffReport], early_n: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair", "flag"])?;
    for r in reports {
        if r.creation_tie {
            w.write_record([r.id(), "creation_tie".to_string()])?;
        }
        if r.reduced_n {
            w.write_record([r.id(), format!("reduced_n:{}<{}", r.early_considered, early_n)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn category_label(category: Option<&str>) -> &str {
    category.unwrap_or(UNCATEGORIZED)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affix::AffixPosition;
    use crate::corpus::{build_index, EventKind, EventRecord};

    fn ev(user: &str, community: &str, ts: i64) -> EventRecord {
        EventRecord::new(user, community, ts, EventKind::Post).unwrap()
    }

    fn pair(base: &str, modified: &str) -> AffixPair {
        AffixPair {
            base: base.into(),
            modified: modified.into(),
            position: AffixPosition::Prefix,
            affix: modified.strip_suffix(base).unwrap_or("x").into(),
            category: None,
        }
    }

    #[test]
    fn gap_in_days() {
        let idx = build_index(&[ev("u", "food", 100), ev("u", "healthyfood", 200)]);
        let o = temporal_order(&pair("food", "healthyfood"), &idx).unwrap();
        assert_eq!(o.gap_days, 100.0 / 86400.0);
        assert!(o.modified_is_newer);
        assert_eq!((o.older.as_str(), o.newer.as_str()), ("food", "healthyfood"));
    }

    #[test]
    fn modified_older_than_base() {
        let idx = build_index(&[ev("u", "ukpolitics", 100), ev("u", "politics", 500)]);
        let o = temporal_order(&pair("politics", "ukpolitics"), &idx).unwrap();
        assert!(!o.modified_is_newer);
        assert_eq!(o.older, "ukpolitics");
    }

    #[test]
    fn creation_tie_picks_smaller_name() {
        let idx = build_index(&[ev("u", "food", 100), ev("v", "healthyfood", 100)]);
        let o = temporal_order(&pair("food", "healthyfood"), &idx).unwrap();
        assert!(o.creation_tie);
        assert_eq!(o.older, "food");
        assert!(o.modified_is_newer);
        assert_eq!(o.gap_days, 0.0);
    }

    #[test]
    fn missing_community_is_contract_error() {
        let idx = build_index(&[ev("u", "food", 100)]);
        assert!(temporal_order(&pair("food", "healthyfood"), &idx).is_err());
    }

    #[test]
    fn single_pair_cohort() {
        let o = TemporalOrder {
            older: "a".into(),
            newer: "b".into(),
            older_created: 1_300_000_000,
            newer_created: 1_300_000_000 + 10 * SECONDS_PER_DAY,
            gap_days: 10.0,
            modified_is_newer: true,
            creation_tie: false,
        };
        let g = gap_by_cohort(&[o]);
        assert_eq!(g.by_year, vec![CohortGap { year: 2011, pairs: 1, mean_gap_days: 10.0 }]);
        assert_eq!(g.overall_mean_days, Some(10.0));
        assert_eq!(gap_by_cohort(&[]).overall_mean_days, None);
    }

    #[test]
    fn log_ratio_values() {
        assert_eq!(smoothed_log_ratio(0, 0), 0.0);
        assert_eq!(smoothed_log_ratio(7, 7), 0.0);
        let r = smoothed_log_ratio(134, 999);
        assert!((r - (135.0f64 / 1000.0).ln()).abs() < 1e-15);
        // ln(0.135), evaluated independently
        assert!((r - (-2.002_480_500_543_707_6)).abs() < 1e-12);
    }

    #[test]
    fn activity_counts_after_newer_creation() {
        let idx = build_index(&[
            ev("a", "old", 0),
            ev("a", "old", 5),
            ev("b", "old", 10),
            ev("c", "old", 20),
            ev("c", "oldx", 10),
            ev("d", "oldx", 30),
        ]);
        let o = temporal_order(&pair("old", "oldx"), &idx).unwrap();
        let bal = activity_log_ratio(&o, &idx).unwrap();
        assert_eq!((bal.newer_count, bal.older_count), (2, 2));
        assert_eq!(bal.log_ratio, 0.0);
    }

    #[test]
    fn monthly_bins_conserve_counts() {
        let m = MONTH_SECONDS;
        let idx = build_index(&[
            ev("a", "old", 0),
            ev("a", "old", m + 5),
            ev("b", "oldx", m),
            ev("b", "oldx", m + 1),
            ev("c", "oldx", 3 * m + 2),
        ]);
        let o = temporal_order(&pair("old", "oldx"), &idx).unwrap();
        let bins = monthly_ratio_series(&o, &idx, 4).unwrap();
        assert_eq!(bins.len(), 4);
        assert_eq!((bins[0].newer, bins[0].older), (2, 1));
        assert_eq!(bins[1].log_ratio, 0.0);
        assert_eq!((bins[2].newer, bins[2].older), (1, 0));
        let n: usize = bins.iter().map(|b| b.newer).sum();
        let od: usize = bins.iter().map(|b| b.older).sum();
        let end = o.newer_created + 4 * m;
        assert_eq!(n, idx.community("oldx").unwrap().events_in(o.newer_created, end));
        assert_eq!(od, idx.community("old").unwrap().events_in(o.newer_created, end));
        assert!(monthly_ratio_series(&o, &idx, 0).is_err());
    }

    #[test]
    fn early_fraction_window() {
        let d = SECONDS_PER_DAY;
        let base = 100 * d;
        let mut evs = vec![ev("seed", "old", 0)];
        // u0 acted in old 1 day before; u1 acted 31 days before; u2 never
        evs.push(ev("u0", "old", base - d));
        evs.push(ev("u0", "oldx", base));
        evs.push(ev("u1", "old", base - 31 * d));
        evs.push(ev("u1", "oldx", base + 1));
        evs.push(ev("u2", "oldx", base + 2));
        let idx = build_index(&evs);
        let o = temporal_order(&pair("old", "oldx"), &idx).unwrap();
        let e = early_participant_fraction(&o, &idx, 100, 30).unwrap();
        assert_eq!((e.from_older, e.considered), (1, 3));
        assert!(e.reduced);
        let wide = early_participant_fraction(&o, &idx, 100, 40).unwrap();
        assert_eq!(wide.from_older, 2);
        let first_two = early_participant_fraction(&o, &idx, 2, 30).unwrap();
        assert_eq!(first_two.fraction, 0.5);
        assert!(!first_two.reduced);
    }

    #[test]
    fn spinoff_threshold_is_strict() {
        assert!(!is_spinoff(10.0 / 100.0, true, 0.10));
        assert!(is_spinoff(11.0 / 100.0, true, 0.10));
        assert!(!is_spinoff(0.9, false, 0.10));
    }

    #[test]
    fn report_csv_columns() {
        let r = SpinoffReport {
            base: "a".into(),
            modified: "ab".into(),
            older: "a".into(),
            newer: "ab".into(),
            gap_days: 1.5,
            modified_is_newer: true,
            creation_tie: false,
            newer_count: 1,
            older_count: 1,
            log_ratio: 0.0,
            early_frac: 0.25,
            early_considered: 4,
            reduced_n: true,
            spinoff: true,
            category: "parody".into(),
            monthly: vec![],
        };
        let mut out = Vec::new();
        write_reports(std::slice::from_ref(&r), &mut out).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "base,modified,older,newer,gap_days,modified_is_newer,log_ratio,early_frac,spinoff,category"
        );
        let rows = read_report_rows(&out[..]).unwrap();
        assert_eq!(rows[0], ReportRow::from(&r));

        let c = classify_spinoffs(&[r], 0.10);
        assert_eq!(c.spinoffs.len(), 1);
        assert_eq!(c.category_early[0].mean_early_frac, 0.25);
    }
}
