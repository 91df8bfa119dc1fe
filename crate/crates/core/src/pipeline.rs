//! End-to-end orchestration: ingest → pairs → similarity → characterize →
//! spinoffs → explore → report.
//!
//! Every stage reads and writes plain CSV files, so a stage can be rerun on
//! its own from the previous stage's output. `run_pipeline` composes the
//! same stage functions in memory and writes a `manifest.json` with row
//! counts and the effective configuration.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::affix::{self, AffixPair, Taxonomy};
use crate::corpus::{self, BuildOptions, CommunityId, CommunityIndex, InputFormat, ParseReport};
use crate::dynamics::{self, DynamicsParams, DynamicsSummary, ReportRow, SpinoffReport};
use crate::error::{Error, Result};
use crate::exploration::{self, ExplorationParams, PairOutcome, SpinoffPair};
use crate::par::Exec;
use crate::similarity::{self, Metric, SimilarityScore, TopicModel};
use crate::stats::Interval;

pub const PARTIAL_MARKER: &str = ".partial";
pub const MANIFEST: &str = "manifest.json";

pub mod files {
    pub const INDEX_STATS: &str = "index_stats.csv";
    pub const CANDIDATES: &str = "candidate_pairs.csv";
    pub const CHAINS: &str = "chains.csv";
    pub const SIMILARITY: &str = "similarity.csv";
    pub const RELATED: &str = "related_pairs.csv";
    pub const DYNAMICS: &str = "dynamics.csv";
    pub const MONTHLY: &str = "monthly.csv";
    pub const FLAGS: &str = "flags.csv";
    pub const GAPS: &str = "gap_by_cohort.csv";
    pub const SPINOFFS: &str = "spinoffs.csv";
    pub const CATEGORY_EARLY: &str = "category_early.csv";
    pub const EXPLORATION: &str = "exploration.csv";
    pub const QUARTILES: &str = "quartiles.csv";
    pub const QUARTILE_CI: &str = "quartile_ci.csv";
    pub const CATEGORIES: &str = "categories.csv";
    pub const MATCHES: &str = "matches.csv";
    pub const DROPPED: &str = "dropped.csv";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Vec<PathBuf>,
    pub format: InputFormat,
    pub topics: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub exclude_users: Vec<String>,
    pub min_posters: usize,
    pub threshold: f64,
    pub min_affix_count: usize,
    pub early_n: usize,
    pub membership_window_days: i64,
    pub horizon_months: usize,
    pub spinoff_threshold: f64,
    pub window_days: i64,
    pub match_window_hours: i64,
    pub match_tolerance: f64,
    pub min_pre: usize,
    pub min_k: usize,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    pub min_category_pairs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let d = DynamicsParams::default();
        let x = ExplorationParams::default();
        PipelineConfig {
            inputs: Vec::new(),
            format: InputFormat::JsonLines,
            topics: None,
            taxonomy: None,
            exclude_users: Vec::new(),
            min_posters: 300,
            threshold: 90.0,
            min_affix_count: 3,
            early_n: d.early_n,
            membership_window_days: d.membership_window_days,
            horizon_months: d.horizon_months,
            spinoff_threshold: d.spinoff_threshold,
            window_days: x.window_days,
            match_window_hours: x.match_window_hours,
            match_tolerance: x.match_tolerance,
            min_pre: x.min_pre,
            min_k: x.min_k,
            bootstrap_resamples: x.bootstrap_resamples,
            confidence: x.confidence,
            min_category_pairs: 4,
            seed: x.seed,
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML (`.toml`) or JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }

    pub fn dynamics(&self) -> DynamicsParams {
        DynamicsParams {
            early_n: self.early_n,
            membership_window_days: self.membership_window_days,
            horizon_months: self.horizon_months,
            spinoff_threshold: self.spinoff_threshold,
        }
    }

    pub fn exploration(&self) -> ExplorationParams {
        ExplorationParams {
            window_days: self.window_days,
            match_window_hours: self.match_window_hours,
            match_tolerance: self.match_tolerance,
            min_pre: self.min_pre,
            min_k: self.min_k,
            bootstrap_resamples: self.bootstrap_resamples,
            confidence: self.confidence,
            seed: self.seed,
        }
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        match &self.taxonomy {
            Some(p) => Taxonomy::load(p),
            None => Ok(Taxonomy::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_posters == 0 || self.min_affix_count == 0 || self.early_n == 0 {
            return Err(Error::config("min_posters, min_affix_count and early_n must be at least 1"));
        }
        if !(0.0..=100.0).contains(&self.threshold) {
            return Err(Error::config("threshold must lie in [0, 100]"));
        }
        if self.horizon_months == 0 {
            return Err(Error::config("horizon_months must be at least 1"));
        }
        self.exploration().validate()
    }

    /// Fields that differ from the defaults, as `name → value`.
    pub fn overrides(&self) -> BTreeMap<String, serde_json::Value> {
        let to_map = |c: &PipelineConfig| match serde_json::to_value(c) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => serde_json::Map::new(),
        };
        let (cur, def) = (to_map(self), to_map(&PipelineConfig::default()));
        const PLUMBING: [&str; 4] = ["inputs", "format", "topics", "taxonomy"];
        cur.into_iter()
            .filter(|(k, v)| !PLUMBING.contains(&k.as_str()) && def.get(k) != Some(v))
            .collect()
    }
}

/// Row counts of one written file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub file: String,
    pub rows: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Option<PipelineConfig>,
    pub overrides: BTreeMap<String, serde_json::Value>,
    pub parse: Option<ParseReport>,
    pub index: Option<IndexSummary>,
    pub topic_source: Option<String>,
    pub dynamics: Option<DynamicsSummary>,
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub outputs: Vec<Output>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub communities: usize,
    pub users: usize,
    pub events: usize,
    pub duplicates_removed: usize,
    pub excluded_events: usize,
    pub first_ts: Option<i64>,
    pub last_ts: Option<i64>,
}

impl IndexSummary {
    pub fn of(index: &CommunityIndex) -> Self {
        let range = index.time_range();
        IndexSummary {
            communities: index.communities().len(),
            users: index.user_count(),
            events: index.total_events(),
            duplicates_removed: index.duplicates_removed(),
            excluded_events: index.excluded_events(),
            first_ts: range.map(|r| r.0),
            last_ts: range.map(|r| r.1),
        }
    }
}

/// Writes `name` in `dir` through `f` and returns its data row count.
pub fn write_file<F>(dir: &Path, name: &str, f: F) -> Result<Output>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(dir.join(name), &buf)?;
    let lines = buf.iter().filter(|&&b| b == b'\n').count();
    Ok(Output {
        file: name.to_string(),
        rows: lines.saturating_sub(1),
    })
}

fn write_rows<T: Serialize>(rows: &[T], header: &[&str], out: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?));
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

// ---------------------------------------------------------------------------
// Stages

/// Reads every input file in order into one index.
pub fn stage_ingest(cfg: &PipelineConfig, exec: Exec) -> Result<(CommunityIndex, ParseReport)> {
    if cfg.inputs.is_empty() {
        return Err(Error::config("no input files given"));
    }
    let mut reader: Box<dyn Read> = Box::new(std::io::empty());
    for p in &cfg.inputs {
        let f = File::open(p).map_err(|e| Error::file(p, e))?;
        // keep records on separate lines across file boundaries
        reader = Box::new(reader.chain(f).chain(&b"\n"[..]));
    }
    let opts = BuildOptions {
        exclude_users: cfg.exclude_users.clone(),
    };
    let (index, report) = corpus::ingest(reader, cfg.format, &opts, exec)?;
    info!(
        accepted = report.accepted,
        skipped = report.skipped,
        communities = index.communities().len(),
        "ingested"
    );
    Ok((index, report))
}

pub fn eligible_ids(index: &CommunityIndex, min_posters: usize) -> Result<Vec<CommunityId>> {
    let names = corpus::eligible_communities(index, min_posters)?;
    Ok(names.iter().filter_map(|n| index.community(n).map(|c| c.id())).collect())
}

/// Candidate affix pairs among eligible communities, categorized.
pub fn stage_pairs(index: &CommunityIndex, cfg: &PipelineConfig, tax: &Taxonomy, exec: Exec) -> Result<Vec<AffixPair>> {
    let names = corpus::eligible_communities(index, cfg.min_posters)?;
    let pairs = affix::dedupe_pairs(affix::detect_pairs_with(names.iter(), exec));
    Ok(affix::categorize(&pairs, tax))
}

pub struct SimilarityOutput {
    pub scores: Vec<SimilarityScore>,
    pub related: Vec<AffixPair>,
    pub topic_source: &'static str,
    pub warnings: Vec<String>,
}

/// Loads the topic file, or falls back to smoothed unigrams with a warning
/// when it is missing.
pub fn load_topics(
    cfg: &PipelineConfig,
    index: &CommunityIndex,
    ids: &[CommunityId],
) -> Result<(Option<TopicModel>, &'static str, Vec<String>)> {
    let mut warnings = Vec::new();
    if let Some(path) = &cfg.topics {
        if path.exists() {
            let model = TopicModel::from_jsonl(BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?))?;
            return Ok((Some(model), "file", warnings));
        }
        let msg = format!("topic file {} not found; using unigram fallback", path.display());
        warn!("{msg}");
        warnings.push(msg);
    }
    match TopicModel::unigram_fallback(index, ids) {
        Some(m) => Ok((Some(m), "unigram", warnings)),
        None => {
            let msg = "no text available; topic metric disabled".to_string();
            warn!("{msg}");
            warnings.push(msg);
            Ok((None, "none", warnings))
        }
    }
}

/// Scores candidates against the all-pairs background of eligible
/// communities, keeps related pairs, then applies the affix frequency floor.
pub fn stage_similarity(
    index: &CommunityIndex,
    candidates: &[AffixPair],
    cfg: &PipelineConfig,
    tax: &Taxonomy,
    exec: Exec,
) -> Result<SimilarityOutput> {
    let ids = eligible_ids(index, cfg.min_posters)?;
    let (topics, topic_source, warnings) = load_topics(cfg, index, &ids)?;
    let bg = similarity::compute_background(index, &ids, topics.as_ref(), exec);
    if bg.link.is_empty() {
        return Ok(SimilarityOutput {
            scores: Vec::new(),
            related: Vec::new(),
            topic_source,
            warnings,
        });
    }
    let link_scale = similarity::background_percentiles(bg.link, Metric::Link)?;
    let topic_scale = if bg.topic.is_empty() {
        None
    } else {
        Some(similarity::background_percentiles(bg.topic, Metric::Topic)?)
    };
    let scores = similarity::score_pairs(
        candidates,
        index,
        topics.as_ref(),
        &link_scale,
        topic_scale.as_ref(),
        cfg.threshold,
    );
    let related = similarity::filter_related(candidates, &scores, cfg.threshold)?;
    let related = affix::filter_affix_frequency(&related, cfg.min_affix_count)?;
    Ok(SimilarityOutput {
        scores,
        related: affix::categorize(&related, tax),
        topic_source,
        warnings,
    })
}

pub fn stage_characterize(
    index: &CommunityIndex,
    related: &[AffixPair],
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<Vec<SpinoffReport>> {
    dynamics::characterize(related, index, &cfg.dynamics(), exec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEarlyRow {
    pub category: String,
    pub pairs: usize,
    pub mean_early_frac: f64,
}

/// Spinoff rows and per-category mean early fractions, from report rows.
pub fn stage_spinoffs(rows: &[ReportRow], threshold: f64) -> (Vec<ReportRow>, Vec<CategoryEarlyRow>) {
    let mut groups: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry(r.category.as_str()).or_default();
        g.0 += 1;
        g.1 += r.early_frac;
    }
    let spinoffs = rows
        .iter()
        .filter(|r| dynamics::is_spinoff(r.early_frac, r.modified_is_newer, threshold))
        .map(|r| ReportRow {
            spinoff: true,
            ..r.clone()
        })
        .collect();
    let cats = groups
        .into_iter()
        .map(|(c, (n, s))| CategoryEarlyRow {
            category: c.to_string(),
            pairs: n,
            mean_early_frac: s / n as f64,
        })
        .collect();
    (spinoffs, cats)
}

pub fn spinoff_pairs(rows: &[ReportRow]) -> Vec<SpinoffPair> {
    rows.iter()
        .map(|r| SpinoffPair {
            pair: affix::pair_id(&r.base, &r.modified),
            original: r.older.clone(),
            spinoff: r.newer.clone(),
            category: r.category.clone(),
        })
        .collect()
}

pub fn stage_explore(
    index: &CommunityIndex,
    spinoffs: &[ReportRow],
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<Vec<PairOutcome>> {
    exploration::explore_pairs(index, &spinoff_pairs(spinoffs), &cfg.exploration(), exec)
}

// ---------------------------------------------------------------------------
// Stage writers

pub fn write_pairs_csv(pairs: &[AffixPair], out: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["base", "modified", "position", "affix", "category"])?;
    for p in pairs {
        w.write_record([
            p.base.as_str(),
            p.modified.as_str(),
            p.position.as_str(),
            p.affix.as_str(),
            p.category.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<AffixPair>> {
    read_csv(path)
}

pub fn write_pairs_outputs(dir: &Path, pairs: &[AffixPair]) -> Result<Vec<Output>> {
    let chains = affix::find_chains(pairs);
    Ok(vec![
        write_file(dir, files::CANDIDATES, |b| write_pairs_csv(pairs, b))?,
        write_file(dir, files::CHAINS, |b| write_rows(&chains, &["base", "middle", "top"], b))?,
    ])
}

pub fn write_similarity_outputs(dir: &Path, sim: &SimilarityOutput) -> Result<Vec<Output>> {
    Ok(vec![
        write_file(dir, files::SIMILARITY, |b| {
            if sim.scores.is_empty() {
                write_rows::<SimilarityScore>(
                    &[],
                    &["base", "modified", "jaccard", "js", "link_pct", "topic_pct", "related"],
                    b,
                )
            } else {
                similarity::write_scores(&sim.scores, b)
            }
        })?,
        write_file(dir, files::RELATED, |b| write_pairs_csv(&sim.related, b))?,
    ])
}

pub fn write_dynamics_outputs(dir: &Path, reports: &[SpinoffReport], early_n: usize) -> Result<Vec<Output>> {
    Ok(vec![
        write_file(dir, files::DYNAMICS, |b| {
            let rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
            write_report_rows(&rows, b)
        })?,
        write_file(dir, files::MONTHLY, |b| dynamics::write_monthly(reports, b))?,
        write_file(dir, files::FLAGS, |b| dynamics::write_flags(reports, early_n, b))?,
    ])
}

pub fn write_report_rows(rows: &[ReportRow], out: &mut Vec<u8>) -> Result<()> {
    write_rows(
        rows,
        &[
            "base",
            "modified",
            "older",
            "newer",
            "gap_days",
            "modified_is_newer",
            "log_ratio",
            "early_frac",
            "spinoff",
            "category",
        ],
        out,
    )
}

pub fn write_gaps(dir: &Path, gaps: &dynamics::GapSummary) -> Result<Output> {
    write_file(dir, files::GAPS, |b| write_rows(&gaps.by_year, &["year", "pairs", "mean_gap_days"], b))
}

pub fn write_spinoff_outputs(dir: &Path, spinoffs: &[ReportRow], cats: &[CategoryEarlyRow]) -> Result<Vec<Output>> {
    Ok(vec![
        write_file(dir, files::SPINOFFS, |b| write_report_rows(spinoffs, b))?,
        write_file(dir, files::CATEGORY_EARLY, |b| {
            write_rows(cats, &["category", "pairs", "mean_early_frac"], b)
        })?,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartileCiRow {
    pub pair: String,
    pub quartile: u8,
    pub group: String,
    pub p: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

fn quartile_ci_rows(outcomes: &[PairOutcome]) -> Vec<QuartileCiRow> {
    let mut rows = Vec::new();
    for o in outcomes {
        let Some(q) = &o.result.quartiles else { continue };
        for b in &q.bins {
            for (group, p, ci) in [("explorer", b.p_e, b.p_e_ci), ("nonexplorer", b.p_ne, b.p_ne_ci)] {
                rows.push(QuartileCiRow {
                    pair: o.result.pair.clone(),
                    quartile: b.quartile,
                    group: group.to_string(),
                    p,
                    ci_lo: ci.map(|c: Interval| c.lo),
                    ci_hi: ci.map(|c: Interval| c.hi),
                });
            }
        }
    }
    rows
}

pub fn write_exploration_outputs(dir: &Path, outcomes: &[PairOutcome], cfg: &PipelineConfig) -> Result<Vec<Output>> {
    let cats = exploration::aggregate_outcomes(outcomes, cfg.min_category_pairs);
    let qci = quartile_ci_rows(outcomes);
    Ok(vec![
        write_file(dir, files::EXPLORATION, |b| exploration::write_results(outcomes, b))?,
        write_file(dir, files::QUARTILES, |b| exploration::write_quartiles(outcomes, b))?,
        write_file(dir, files::QUARTILE_CI, |b| {
            write_rows(&qci, &["pair", "quartile", "group", "p", "ci_lo", "ci_hi"], b)
        })?,
        write_file(dir, files::CATEGORIES, |b| {
            write_rows(&cats, &["category", "pairs", "mean_effect", "shown"], b)
        })?,
        write_file(dir, files::MATCHES, |b| exploration::write_matches(outcomes, b))?,
        write_file(dir, files::DROPPED, |b| exploration::write_dropped(outcomes, cfg.min_k, b))?,
    ])
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Deserialize)]
struct ExplorationRow {
    pair: String,
    #[allow(dead_code)]
    k: usize,
    #[allow(dead_code)]
    p_e: f64,
    #[allow(dead_code)]
    p_ne: f64,
    effect: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct MonthlyRow {
    pair: String,
    month: usize,
    newer: usize,
    older: usize,
    log_ratio: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct CategoryRow {
    category: String,
    pairs: usize,
    mean_effect: f64,
    shown: bool,
}

/// Plot-ready long-format tables, one per figure family, built from the
/// stage files in `dir`. Files for stages that have not run are skipped.
pub fn stage_report(dir: &Path) -> Result<Vec<Output>> {
    let mut out = Vec::new();
    let have = |name: &str| dir.join(name).exists();

    if have(files::RELATED) {
        let related = read_pairs(&dir.join(files::RELATED))?;
        let stats = affix::affix_stats(&related);
        out.push(write_file(dir, "fig_affix_frequency.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["affix", "category", "pairs", "suffix_fraction"])?;
            for (a, c) in &stats.per_affix {
                w.write_record([a.clone(), c.category.clone(), c.pairs.to_string(), c.suffix_fraction.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })?);
        out.push(write_file(dir, "fig_category_frequency.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["category", "pairs"])?;
            for (c, n) in &stats.per_category {
                w.write_record([c.clone(), n.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })?);
    }

    if have(files::DYNAMICS) {
        let rows: Vec<ReportRow> = read_csv(&dir.join(files::DYNAMICS))?;
        out.push(write_file(dir, "fig_pair_dynamics.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["pair", "category", "metric", "value"])?;
            for r in &rows {
                let id = affix::pair_id(&r.base, &r.modified);
                for (m, v) in [
                    ("gap_days", r.gap_days),
                    ("modified_is_newer", f64::from(u8::from(r.modified_is_newer))),
                    ("log_ratio", r.log_ratio),
                    ("early_frac", r.early_frac),
                ] {
                    w.write_record([id.clone(), r.category.clone(), m.to_string(), v.to_string()])?;
                }
            }
            w.flush()?;
            Ok(())
        })?);
        let n = rows.len();
        let frac = |c: usize| if n == 0 { String::new() } else { (c as f64 / n as f64).to_string() };
        let mean = |s: f64| if n == 0 { String::new() } else { (s / n as f64).to_string() };
        out.push(write_file(dir, "fig_summary.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["metric", "value"])?;
            w.write_record(["pairs".to_string(), n.to_string()])?;
            w.write_record([
                "modified_newer_fraction".to_string(),
                frac(rows.iter().filter(|r| r.modified_is_newer).count()),
            ])?;
            w.write_record([
                "overtake_fraction".to_string(),
                frac(rows.iter().filter(|r| r.log_ratio > 0.0).count()),
            ])?;
            w.write_record(["mean_log_ratio".to_string(), mean(rows.iter().map(|r| r.log_ratio).sum())])?;
            w.write_record(["mean_gap_days".to_string(), mean(rows.iter().map(|r| r.gap_days).sum())])?;
            w.write_record([
                "spinoffs".to_string(),
                rows.iter().filter(|r| r.spinoff).count().to_string(),
            ])?;
            w.flush()?;
            Ok(())
        })?);
    }

    if have(files::GAPS) {
        let gaps: Vec<dynamics::CohortGap> = read_csv(&dir.join(files::GAPS))?;
        out.push(write_file(dir, "fig_gap_year.csv", |b| {
            write_rows(&gaps, &["year", "pairs", "mean_gap_days"], b)
        })?);
    }

    if have(files::MONTHLY) {
        let rows: Vec<MonthlyRow> = read_csv(&dir.join(files::MONTHLY))?;
        out.push(write_file(dir, "fig_activity_case.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["pair", "month", "series", "value"])?;
            for r in &rows {
                for (s, v) in [
                    ("newer", r.newer.to_string()),
                    ("older", r.older.to_string()),
                    ("log_ratio", r.log_ratio.to_string()),
                ] {
                    w.write_record([r.pair.clone(), r.month.to_string(), s.to_string(), v])?;
                }
            }
            w.flush()?;
            Ok(())
        })?);
    }

    if have(files::CATEGORY_EARLY) {
        let rows: Vec<CategoryEarlyRow> = read_csv(&dir.join(files::CATEGORY_EARLY))?;
        out.push(write_file(dir, "fig_top_founder.csv", |b| {
            write_rows(&rows, &["category", "pairs", "mean_early_frac"], b)
        })?);
    }

    if have(files::QUARTILE_CI) {
        let rows: Vec<QuartileCiRow> = read_csv(&dir.join(files::QUARTILE_CI))?;
        out.push(write_file(dir, "fig_two_lines.csv", |b| {
            write_rows(&rows, &["pair", "quartile", "group", "p", "ci_lo", "ci_hi"], b)
        })?);
    }

    if have(files::EXPLORATION) && have(files::SPINOFFS) {
        let spin: Vec<ReportRow> = read_csv(&dir.join(files::SPINOFFS))?;
        let cat: BTreeMap<String, String> = spin
            .iter()
            .map(|r| (affix::pair_id(&r.base, &r.modified), r.category.clone()))
            .collect();
        let rows: Vec<ExplorationRow> = read_csv(&dir.join(files::EXPLORATION))?;
        out.push(write_file(dir, "fig_splits.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["pair", "category", "effect", "ci_lo", "ci_hi"])?;
            for r in &rows {
                let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([
                    r.pair.clone(),
                    cat.get(&r.pair).cloned().unwrap_or_default(),
                    r.effect.to_string(),
                    opt(r.ci_lo),
                    opt(r.ci_hi),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?);
    }

    if have(files::CATEGORIES) {
        let rows: Vec<CategoryRow> = read_csv(&dir.join(files::CATEGORIES))?;
        let shown: Vec<&CategoryRow> = rows.iter().filter(|r| r.shown).collect();
        out.push(write_file(dir, "fig_tax.csv", |b| {
            write_rows(&shown, &["category", "pairs", "mean_effect", "shown"], b)
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Orchestration

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// Runs every stage into `out_dir`. On failure the outputs written so far
/// are kept, a `.partial` marker names the failed stage, and the error is
/// returned.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path, exec: Exec) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let marker = out_dir.join(PARTIAL_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let mut manifest = Manifest {
        config: Some(cfg.clone()),
        overrides: cfg.overrides(),
        ..Manifest::default()
    };
    let mut stage = "config";
    let result = run_stages(cfg, out_dir, exec, &mut manifest, &mut stage);
    match result {
        Ok(()) => {
            write_manifest(out_dir, &manifest)?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = write_manifest(out_dir, &manifest);
            fs::write(&marker, format!("stage: {stage}\nerror: {e}\n"))?;
            Err(e)
        }
    }
}

fn run_stages(
    cfg: &PipelineConfig,
    dir: &Path,
    exec: Exec,
    m: &mut Manifest,
    stage: &mut &'static str,
) -> Result<()> {
    cfg.validate()?;
    let tax = cfg.taxonomy()?;

    *stage = "ingest";
    let (index, report) = stage_ingest(cfg, exec)?;
    m.parse = Some(report);
    m.index = Some(IndexSummary::of(&index));
    let o = write_file(dir, files::INDEX_STATS, |b| corpus::write_index_stats(&index, b))?;
    m.stages.push(StageRecord {
        stage: "ingest".into(),
        outputs: vec![o],
    });

    *stage = "pairs";
    let candidates = stage_pairs(&index, cfg, &tax, exec)?;
    m.stages.push(StageRecord {
        stage: "pairs".into(),
        outputs: write_pairs_outputs(dir, &candidates)?,
    });

    *stage = "similarity";
    let sim = stage_similarity(&index, &candidates, cfg, &tax, exec)?;
    m.topic_source = Some(sim.topic_source.to_string());
    m.warnings.extend(sim.warnings.iter().cloned());
    m.stages.push(StageRecord {
        stage: "similarity".into(),
        outputs: write_similarity_outputs(dir, &sim)?,
    });

    *stage = "characterize";
    let reports = stage_characterize(&index, &sim.related, cfg, exec)?;
    let orders: Vec<dynamics::TemporalOrder> = sim
        .related
        .iter()
        .map(|p| dynamics::temporal_order(p, &index))
        .collect::<Result<_>>()?;
    let gaps = dynamics::gap_by_cohort(&orders);
    m.dynamics = Some(dynamics::summarize(&reports));
    let mut outputs = write_dynamics_outputs(dir, &reports, cfg.early_n)?;
    outputs.push(write_gaps(dir, &gaps)?);
    m.stages.push(StageRecord {
        stage: "characterize".into(),
        outputs,
    });

    *stage = "spinoffs";
    let rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
    let (spinoffs, cats) = stage_spinoffs(&rows, cfg.spinoff_threshold);
    m.stages.push(StageRecord {
        stage: "spinoffs".into(),
        outputs: write_spinoff_outputs(dir, &spinoffs, &cats)?,
    });

    *stage = "explore";
    let outcomes = stage_explore(&index, &spinoffs, cfg, exec)?;
    for o in outcomes.iter().filter(|o| o.result.discarded) {
        info!(pair = %o.result.pair, k = o.result.k, "pair discarded");
    }
    m.stages.push(StageRecord {
        stage: "explore".into(),
        outputs: write_exploration_outputs(dir, &outcomes, cfg)?,
    });

    *stage = "report";
    m.stages.push(StageRecord {
        stage: "report".into(),
        outputs: stage_report(dir)?,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = PipelineConfig::default();
        assert_eq!(c.min_posters, 300);
        assert_eq!(c.threshold, 90.0);
        assert_eq!(c.min_affix_count, 3);
        assert_eq!(c.min_k, 100);
        assert!(c.overrides().is_empty());
        let c = PipelineConfig {
            min_posters: 20,
            seed: 4,
            ..PipelineConfig::default()
        };
        let o = c.overrides();
        assert_eq!(o.len(), 2);
        assert_eq!(o["min_posters"], serde_json::json!(20));
    }

    #[test]
    fn config_roundtrip_toml() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "min_posters = 5\nseed = 9\ninputs = [\"a.jsonl\"]\n").unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.min_posters, 5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.threshold, 90.0);
        fs::write(&p, "bogus = 1\n").unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }

    #[test]
    fn failure_leaves_partial_marker() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            inputs: vec![dir.path().join("missing.jsonl")],
            ..PipelineConfig::default()
        };
        let out = dir.path().join("out");
        assert!(run_pipeline(&cfg, &out, Exec::Sequential).is_err());
        let marker = fs::read_to_string(out.join(PARTIAL_MARKER)).unwrap();
        assert!(marker.contains("stage: ingest"));
    }
}
