//! Event-log ingestion and the immutable per-community index.
//!
//! Raw records arrive as JSON Lines (or CSV with the same columns). Parsing is
//! lenient: a malformed line is counted and skipped, never fatal. The index
//! interns users, communities, links and tokens into dense ids whose order
//! matches the lexicographic order of the original strings, so every derived
//! ordering (timeline ties, "first n users", control tie-breaks) is stable
//! across runs and input permutations.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};

use rustc_hash::FxHashMap;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Seconds since the Unix epoch.
pub type Timestamp = i64;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const SECONDS_PER_HOUR: i64 = 3_600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Post,
    Comment,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Post => "post",
            EventKind::Comment => "comment",
        }
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "post" => Ok(EventKind::Post),
            "comment" => Ok(EventKind::Comment),
            other => Err(Error::Input(format!("unknown event kind {other:?}"))),
        }
    }
}

/// A community name: lowercased `key` for matching, original casing for display.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommunityName {
    key: String,
    display: String,
}

impl CommunityName {
    /// Returns `None` when the name is empty after trimming.
    pub fn new(raw: &str) -> Option<Self> {
        let display = raw.trim();
        if display.is_empty() {
            return None;
        }
        Some(CommunityName {
            key: display.to_lowercase(),
            display: display.to_string(),
        })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn display(&self) -> &str {
        &self.display
    }
}

/// One user action in one community.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub user_id: String,
    pub community: CommunityName,
    pub timestamp: Timestamp,
    pub kind: EventKind,
    pub link_url: Option<String>,
    pub tokens: Option<Vec<String>>,
}

impl EventRecord {
    pub fn new(
        user_id: impl Into<String>,
        community: &str,
        timestamp: Timestamp,
        kind: EventKind,
    ) -> Result<Self> {
        let user_id = user_id.into();
        if user_id.is_empty() {
            return Err(Error::Input("empty user id".into()));
        }
        if timestamp < 0 {
            return Err(Error::Input(format!("negative timestamp {timestamp}")));
        }
        let community = CommunityName::new(community)
            .ok_or_else(|| Error::Input("empty community name".into()))?;
        Ok(EventRecord {
            user_id,
            community,
            timestamp,
            kind,
            link_url: None,
            tokens: None,
        })
    }

    /// Attaches a link; only posts may carry one.
    pub fn with_link(mut self, url: &str) -> Result<Self> {
        if self.kind != EventKind::Post {
            return Err(Error::Input("link on a non-post record".into()));
        }
        self.link_url = normalize_url(url);
        Ok(self)
    }

    /// Attaches post text. Comment text is not modeled and is ignored.
    pub fn with_text(mut self, text: &str) -> Self {
        if self.kind == EventKind::Post {
            self.tokens = Some(tokenize(text));
        }
        self
    }
}

/// Canonical link key: scheme dropped, host lowercased, trailing slashes removed.
pub fn normalize_url(raw: &str) -> Option<String> {
    let mut s = raw.trim();
    if let Some(pos) = s.find("://") {
        let scheme = &s[..pos];
        let valid = scheme.as_bytes().first().is_some_and(u8::is_ascii_alphabetic)
            && scheme
                .bytes()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, b'+' | b'-' | b'.'));
        if valid {
            s = &s[pos + 3..];
        }
    }
    let s = s.trim_end_matches('/');
    if s.is_empty() {
        return None;
    }
    let (host, rest) = match s.find('/') {
        Some(i) => s.split_at(i),
        None => (s, ""),
    };
    let mut out = if host.is_ascii() {
        let mut h = String::with_capacity(s.len());
        h.push_str(host);
        h.make_ascii_lowercase();
        h
    } else {
        host.to_lowercase()
    };
    out.push_str(rest);
    Some(out)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InputFormat {
    #[default]
    #[serde(rename = "jsonl")]
    JsonLines,
    #[serde(rename = "csv")]
    Csv,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "jsonlines" | "ndjson" => Ok(InputFormat::JsonLines),
            "csv" => Ok(InputFormat::Csv),
            other => Err(Error::config(format!("unknown input format {other:?}"))),
        }
    }
}

/// Accepted/skipped line counts from a parse.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub accepted: u64,
    pub skipped: u64,
}

impl ParseReport {
    fn absorb(&mut self, other: ParseReport) {
        self.accepted += other.accepted;
        self.skipped += other.skipped;
    }
}

#[derive(Deserialize)]
struct RawEvent<'a> {
    #[serde(borrow)]
    user: Cow<'a, str>,
    #[serde(borrow)]
    community: Cow<'a, str>,
    ts: i64,
    #[serde(borrow)]
    kind: Cow<'a, str>,
    #[serde(borrow, default)]
    url: Option<Cow<'a, str>>,
    #[serde(borrow, default)]
    text: Option<Cow<'a, str>>,
}

/// A validated record whose strings may still borrow from the input.
struct Fields<'a> {
    user: Cow<'a, str>,
    display: Cow<'a, str>,
    ts: Timestamp,
    kind: EventKind,
    link: Option<String>,
    tokens: Option<Vec<String>>,
}

fn trim_cow(s: Cow<'_, str>) -> Cow<'_, str> {
    match s {
        Cow::Borrowed(b) => Cow::Borrowed(b.trim()),
        Cow::Owned(o) if o.trim().len() == o.len() => Cow::Owned(o),
        Cow::Owned(o) => Cow::Owned(o.trim().to_string()),
    }
}

fn lowercase_cow<'b>(s: &'b str) -> Cow<'b, str> {
    if s.bytes().any(|b| b.is_ascii_uppercase() || !b.is_ascii()) {
        Cow::Owned(s.to_lowercase())
    } else {
        Cow::Borrowed(s)
    }
}

impl<'a> RawEvent<'a> {
    /// Same acceptance rules as building an [`EventRecord`].
    fn validate(self) -> Result<Fields<'a>> {
        let kind: EventKind = self.kind.parse()?;
        if self.user.is_empty() {
            return Err(Error::Input("empty user id".into()));
        }
        if self.ts < 0 {
            return Err(Error::Input(format!("negative timestamp {}", self.ts)));
        }
        let display = trim_cow(self.community);
        if display.is_empty() {
            return Err(Error::Input("empty community name".into()));
        }
        let link = match self.url.as_deref().filter(|u| !u.trim().is_empty()) {
            Some(_) if kind != EventKind::Post => return Err(Error::Input("link on a non-post record".into())),
            Some(u) => normalize_url(u),
            None => None,
        };
        let tokens = match (kind, self.text.as_deref()) {
            (EventKind::Post, Some(t)) => Some(tokenize(t)),
            _ => None,
        };
        Ok(Fields {
            user: self.user,
            display,
            ts: self.ts,
            kind,
            link,
            tokens,
        })
    }

    fn into_record(self) -> Result<EventRecord> {
        let f = self.validate()?;
        Ok(EventRecord {
            user_id: f.user.into_owned(),
            community: CommunityName {
                key: f.display.to_lowercase(),
                display: f.display.into_owned(),
            },
            timestamp: f.ts,
            kind: f.kind,
            link_url: f.link,
            tokens: f.tokens,
        })
    }
}

/// Parses a single JSON Lines record. `None` for a malformed line.
pub fn parse_json_line(line: &[u8]) -> Option<EventRecord> {
    let raw: RawEvent<'_> = serde_json::from_slice(line).ok()?;
    raw.into_record().ok()
}

fn is_blank(line: &[u8]) -> bool {
    line.iter().all(u8::is_ascii_whitespace)
}

const BLOCK_BYTES: usize = 4 << 20;

/// Streams newline-aligned blocks of a JSON Lines input, handing each
/// block's non-blank lines to `f` in input order.
fn for_each_line_block<R, F>(mut reader: R, mut f: F) -> Result<()>
where
    R: Read,
    F: FnMut(&[&[u8]]),
{
    let mut buf: Vec<u8> = Vec::with_capacity(BLOCK_BYTES + 4096);
    let mut chunk = vec![0u8; BLOCK_BYTES];
    let mut eof = false;
    while !eof {
        let n = match reader.read(&mut chunk) {
            Ok(0) => {
                eof = true;
                0
            }
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Io(e)),
        };
        buf.extend_from_slice(&chunk[..n]);
        if buf.len() < BLOCK_BYTES && !eof {
            continue;
        }
        let cut = if eof {
            buf.len()
        } else {
            match buf.iter().rposition(|&b| b == b'\n') {
                Some(i) => i + 1,
                None => continue,
            }
        };
        let lines: Vec<&[u8]> = buf[..cut]
            .split(|&b| b == b'\n')
            .filter(|l| !is_blank(l))
            .collect();
        f(&lines);
        buf.drain(..cut);
    }
    Ok(())
}

/// Parses each block with `exec` and hands the accepted records to `sink`.
fn for_each_json_block<R, F>(reader: R, exec: Exec, mut sink: F) -> Result<ParseReport>
where
    R: Read,
    F: FnMut(Vec<EventRecord>),
{
    let mut report = ParseReport::default();
    for_each_line_block(reader, |lines| {
        let parsed = par::map(exec, lines, |l| parse_json_line(l));
        let mut records = Vec::with_capacity(parsed.len());
        for rec in parsed {
            match rec {
                Some(r) => {
                    report.accepted += 1;
                    records.push(r);
                }
                None => report.skipped += 1,
            }
        }
        sink(records);
    })?;
    Ok(report)
}

#[derive(Deserialize)]
struct CsvRow {
    user: String,
    community: String,
    ts: i64,
    kind: String,
    #[serde(default)]
    url: Option<String>,
    #[serde(default)]
    text: Option<String>,
}

fn for_each_csv_block<R, F>(reader: R, mut sink: F) -> Result<ParseReport>
where
    R: Read,
    F: FnMut(Vec<EventRecord>),
{
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let mut report = ParseReport::default();
    let mut records = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = match row {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(Error::Csv(e)),
            Err(_) => {
                report.skipped += 1;
                continue;
            }
        };
        let raw = RawEvent {
            user: Cow::Owned(row.user),
            community: Cow::Owned(row.community),
            ts: row.ts,
            kind: Cow::Owned(row.kind),
            url: row.url.map(Cow::Owned),
            text: row.text.map(Cow::Owned),
        };
        match raw.into_record() {
            Ok(r) => {
                report.accepted += 1;
                records.push(r);
            }
            Err(_) => report.skipped += 1,
        }
        if records.len() >= 1 << 16 {
            sink(std::mem::take(&mut records));
        }
    }
    if !records.is_empty() {
        sink(records);
    }
    Ok(report)
}

fn for_each_block<R, F>(reader: R, format: InputFormat, exec: Exec, sink: F) -> Result<ParseReport>
where
    R: Read,
    F: FnMut(Vec<EventRecord>),
{
    match format {
        InputFormat::JsonLines => for_each_json_block(reader, exec, sink),
        InputFormat::Csv => for_each_csv_block(reader, sink),
    }
}

/// Parses every well-formed record; malformed lines are skipped and counted.
pub fn parse_events<R: BufRead>(reader: R, format: InputFormat) -> Result<(Vec<EventRecord>, ParseReport)> {
    let mut out = Vec::new();
    let report = for_each_block(reader, format, Exec::default(), |recs| out.extend(recs))?;
    Ok((out, report))
}

/// Parses and indexes in one streaming pass without materializing the full
/// record sequence.
pub fn ingest<R: Read>(
    reader: R,
    format: InputFormat,
    options: &BuildOptions,
    exec: Exec,
) -> Result<(CommunityIndex, ParseReport)> {
    let mut builder = IndexBuilder::new(options.clone());
    let mut report = ParseReport::default();
    match format {
        InputFormat::JsonLines => for_each_line_block(reader, |lines| {
            let parsed = par::map(exec, lines, |l| {
                serde_json::from_slice::<RawEvent<'_>>(l).ok().and_then(|r| r.validate().ok())
            });

            for f in parsed {
                match f {
                    Some(f) => {
                        report.accepted += 1;
                        builder.push_fields(&f.user, &lowercase_cow(&f.display), &f.display, f.ts, f.kind, f.link.as_deref(), f.tokens.as_deref());
                    }
                    None => report.skipped += 1,
                }
            }
        })?,
        InputFormat::Csv => report.absorb(for_each_csv_block(reader, |recs| {
            for r in &recs {
                builder.push(r);
            }
        })?),
    }
    Ok((builder.finish(exec), report))
}

// ---------------------------------------------------------------------------
// Index

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

id_type!(UserId);
id_type!(CommunityId);
id_type!(LinkId);
id_type!(TokenId);

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// User ids dropped at build time (e.g. `[deleted]`). Empty by default.
    #[serde(default)]
    pub exclude_users: Vec<String>,
}

/// One timeline entry. Timelines are ordered by `(ts, user, kind)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimelineEntry {
    pub ts: Timestamp,
    pub user: UserId,
    pub kind: EventKind,
}

#[derive(Clone, Debug)]
pub struct Community {
    id: CommunityId,
    key: String,
    display: String,
    first_event_time: Timestamp,
    unique_posting_users: usize,
    timeline: Vec<TimelineEntry>,
    links: Vec<LinkId>,
    unigrams: Vec<(TokenId, u64)>,
    // Action timestamps grouped by user, ascending within each user;
    // `user_ranges[i]` belongs to `users_sorted[i]`.
    user_ranges: Vec<(u32, u32)>,
    user_times: Vec<Timestamp>,
    users_sorted: Vec<UserId>,
}

impl Community {
    pub fn id(&self) -> CommunityId {
        self.id
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn display(&self) -> &str {
        &self.display
    }

    /// Creation-time proxy: the first observed event.
    pub fn first_event_time(&self) -> Timestamp {
        self.first_event_time
    }

    pub fn unique_posting_users(&self) -> usize {
        self.unique_posting_users
    }

    pub fn timeline(&self) -> &[TimelineEntry] {
        &self.timeline
    }

    pub fn event_count(&self) -> usize {
        self.timeline.len()
    }

    /// Sorted, deduplicated link ids.
    pub fn links(&self) -> &[LinkId] {
        &self.links
    }

    /// Token counts sorted by token id.
    pub fn unigrams(&self) -> &[(TokenId, u64)] {
        &self.unigrams
    }

    /// Every user with at least one action here, ascending by id.
    pub fn users(&self) -> &[UserId] {
        &self.users_sorted
    }

    pub fn has_user(&self, user: UserId) -> bool {
        self.users_sorted.binary_search(&user).is_ok()
    }

    /// The user's action timestamps here, ascending.
    pub fn user_actions(&self, user: UserId) -> &[Timestamp] {
        match self.users_sorted.binary_search(&user) {
            Ok(i) => {
                let (a, b) = self.user_ranges[i];
                &self.user_times[a as usize..b as usize]
            }
            Err(_) => &[],
        }
    }

    /// Number of the user's actions with timestamp in `[t_a, t_b)`.
    pub fn activity_count(&self, user: UserId, t_a: Timestamp, t_b: Timestamp) -> usize {
        count_in_window(self.user_actions(user), t_a, t_b)
    }

    /// Number of events (any user) with timestamp in `[t_a, t_b)`.
    pub fn events_in(&self, t_a: Timestamp, t_b: Timestamp) -> usize {
        if t_b <= t_a {
            return 0;
        }
        let lo = self.timeline.partition_point(|e| e.ts < t_a);
        let hi = self.timeline.partition_point(|e| e.ts < t_b);
        hi - lo
    }

    /// Number of events with timestamp `>= t`.
    pub fn events_since(&self, t: Timestamp) -> usize {
        self.timeline.len() - self.timeline.partition_point(|e| e.ts < t)
    }

    /// Timeline entries with timestamp in the closed range `[t_a, t_b]`.
    pub fn entries_between(&self, t_a: Timestamp, t_b: Timestamp) -> &[TimelineEntry] {
        let lo = self.timeline.partition_point(|e| e.ts < t_a);
        let hi = self.timeline.partition_point(|e| e.ts <= t_b);
        if hi <= lo {
            &[]
        } else {
            &self.timeline[lo..hi]
        }
    }
}

/// Count of sorted timestamps in `[t_a, t_b)`.
pub fn count_in_window(sorted: &[Timestamp], t_a: Timestamp, t_b: Timestamp) -> usize {
    if t_b <= t_a {
        return 0;
    }
    sorted.partition_point(|&t| t < t_b) - sorted.partition_point(|&t| t < t_a)
}

/// Immutable, read-shareable index over an event log.
#[derive(Clone, Debug, Default)]
pub struct CommunityIndex {
    users: Vec<String>,
    user_lookup: HashMap<String, UserId>,
    communities: Vec<Community>,
    community_lookup: HashMap<String, CommunityId>,
    urls: Vec<String>,
    tokens: Vec<String>,
    time_range: Option<(Timestamp, Timestamp)>,
    total_events: usize,
    duplicates_removed: usize,
    excluded_events: usize,
}

impl CommunityIndex {
    pub fn communities(&self) -> &[Community] {
        &self.communities
    }

    pub fn community(&self, name: &str) -> Option<&Community> {
        let id = self.community_lookup.get(name).or_else(|| {
            let lower = name.trim().to_lowercase();
            self.community_lookup.get(&lower)
        })?;
        Some(&self.communities[id.index()])
    }

    pub fn community_by_id(&self, id: CommunityId) -> &Community {
        &self.communities[id.index()]
    }

    pub fn user_id(&self, name: &str) -> Option<UserId> {
        self.user_lookup.get(name).copied()
    }

    pub fn user_name(&self, id: UserId) -> &str {
        &self.users[id.index()]
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn url(&self, id: LinkId) -> &str {
        &self.urls[id.index()]
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn vocabulary_size(&self) -> usize {
        self.tokens.len()
    }

    /// `(min, max)` timestamp over all accepted events.
    pub fn time_range(&self) -> Option<(Timestamp, Timestamp)> {
        self.time_range
    }

    /// Accepted events after deduplication.
    pub fn total_events(&self) -> usize {
        self.total_events
    }

    pub fn duplicates_removed(&self) -> usize {
        self.duplicates_removed
    }

    pub fn excluded_events(&self) -> usize {
        self.excluded_events
    }

    /// `p(u, t_a, t_b)`: the user's actions in the community within `[t_a, t_b)`.
    /// Unknown users or communities count as zero.
    pub fn activity_count(&self, user: &str, community: &str, t_a: Timestamp, t_b: Timestamp) -> usize {
        match (self.user_id(user), self.community(community)) {
            (Some(u), Some(c)) => c.activity_count(u, t_a, t_b),
            _ => 0,
        }
    }

    /// Per-community aggregates for the `--index-stats` dump.
    pub fn stats_rows(&self) -> Vec<IndexStatsRow> {
        self.communities
            .iter()
            .map(|c| IndexStatsRow {
                community: c.display.clone(),
                first_ts: c.first_event_time,
                posters: c.unique_posting_users,
                events: c.timeline.len(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStatsRow {
    pub community: String,
    pub first_ts: Timestamp,
    pub posters: usize,
    pub events: usize,
}

/// Writes `community,first_ts,posters,events`.
pub fn write_index_stats<W: Write>(index: &CommunityIndex, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in index.stats_rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Communities with at least `min_posters` distinct posting users, by key.
pub fn eligible_communities(index: &CommunityIndex, min_posters: usize) -> Result<BTreeSet<String>> {
    if min_posters == 0 {
        return Err(Error::config("min_posters must be at least 1"));
    }
    Ok(index
        .communities
        .iter()
        .filter(|c| c.unique_posting_users >= min_posters)
        .map(|c| c.key.clone())
        .collect())
}

pub fn build_index(events: &[EventRecord]) -> CommunityIndex {
    build_index_with(events, &BuildOptions::default(), Exec::default())
}

pub fn build_index_with(events: &[EventRecord], options: &BuildOptions, exec: Exec) -> CommunityIndex {
    let mut b = IndexBuilder::new(options.clone());
    for e in events {
        b.push(e);
    }
    b.finish(exec)
}

#[derive(Default)]
struct Interner {
    lookup: FxHashMap<String, u32>,
    names: Vec<String>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.lookup.get(s) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(s.to_string());
        self.lookup.insert(s.to_string(), id);
        id
    }

    /// Sorted names plus the old-id → new-id map.
    fn into_sorted(self) -> (Vec<String>, Vec<u32>) {
        let mut order: Vec<u32> = (0..self.names.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| self.names[a as usize].cmp(&self.names[b as usize]));
        let mut remap = vec![0u32; self.names.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old as usize] = new as u32;
        }
        let mut names = self.names;
        let mut sorted = Vec::with_capacity(names.len());
        for &old in &order {
            sorted.push(std::mem::take(&mut names[old as usize]));
        }
        (sorted, remap)
    }
}

#[derive(Clone, Copy)]
struct RawEntry {
    community: u32,
    user: u32,
    ts: Timestamp,
    kind: EventKind,
    link: u32,
    bag: u32,
}

/// Incremental index construction; records may arrive in any order.
pub struct IndexBuilder {
    options: BuildOptions,
    users: Interner,
    communities: Interner,
    display: Vec<String>,
    urls: Interner,
    tokens: Interner,
    bags: Vec<Vec<u32>>,
    entries: Vec<RawEntry>,
    excluded: usize,
}

impl IndexBuilder {
    pub fn new(options: BuildOptions) -> Self {
        IndexBuilder {
            options,
            users: Interner::default(),
            communities: Interner::default(),
            display: Vec::new(),
            urls: Interner::default(),
            tokens: Interner::default(),
            bags: Vec::new(),
            entries: Vec::new(),
            excluded: 0,
        }
    }

    pub fn push(&mut self, e: &EventRecord) {
        self.push_fields(
            &e.user_id,
            e.community.key(),
            e.community.display(),
            e.timestamp,
            e.kind,
            e.link_url.as_deref(),
            e.tokens.as_deref(),
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn push_fields(
        &mut self,
        user: &str,
        key: &str,
        display: &str,
        ts: Timestamp,
        kind: EventKind,
        link: Option<&str>,
        tokens: Option<&[String]>,
    ) {
        if !self.options.exclude_users.is_empty() && self.options.exclude_users.iter().any(|u| u == user) {
            self.excluded += 1;
            return;
        }
        let community = self.communities.intern(key);
        if community as usize == self.display.len() {
            self.display.push(display.to_string());
        } else if display < self.display[community as usize].as_str() {
            // smallest casing wins so the display name is order-independent
            self.display[community as usize] = display.to_string();
        }
        let user = self.users.intern(user);
        let link = match link {
            Some(u) => self.urls.intern(u),
            None => NONE,
        };
        let bag = match tokens {
            Some(toks) if !toks.is_empty() => {
                let ids: Vec<u32> = toks.iter().map(|t| self.tokens.intern(t)).collect();
                self.bags.push(ids);
                (self.bags.len() - 1) as u32
            }
            _ => NONE,
        };
        self.entries.push(RawEntry {
            community,
            user,
            ts,
            kind,
            link,
            bag,
        });
    }

    pub fn finish(self, exec: Exec) -> CommunityIndex {
        let IndexBuilder {
            users,
            communities,
            display,
            urls,
            tokens,
            mut bags,
            mut entries,
            excluded,
            ..
        } = self;

        let (user_names, user_map) = users.into_sorted();
        let (community_keys, community_map) = communities.into_sorted();
        let (url_names, url_map) = urls.into_sorted();
        let (token_names, token_map) = tokens.into_sorted();

        let mut displays = vec![String::new(); community_keys.len()];
        for (old, d) in display.into_iter().enumerate() {
            displays[community_map[old] as usize] = d;
        }
        for bag in bags.iter_mut() {
            for t in bag.iter_mut() {
                *t = token_map[*t as usize];
            }
            bag.sort_unstable();
        }
        let mut buckets: Vec<Vec<RawEntry>> = vec![Vec::new(); community_keys.len()];
        for mut e in entries.drain(..) {
            e.community = community_map[e.community as usize];
            e.user = user_map[e.user as usize];
            if e.link != NONE {
                e.link = url_map[e.link as usize];
            }
            buckets[e.community as usize].push(e);
        }
        drop(entries);

        let bags_ref = &bags;
        let keys_ref = &community_keys;
        let displays_ref = &displays;
        let built = par::map_owned(exec, buckets.into_iter().enumerate().collect(), |(c, mut bucket)| {
            let before = bucket.len();
            sort_and_dedup(&mut bucket, bags_ref);
            let community = build_community(
                CommunityId(c as u32),
                keys_ref[c].clone(),
                displays_ref[c].clone(),
                &bucket,
                bags_ref,
            );
            (community, before - bucket.len())
        });
        let duplicates_removed = built.iter().map(|(_, d)| d).sum();
        let community_data: Vec<Community> = built.into_iter().map(|(c, _)| c).collect();
        let total_events = community_data.iter().map(|c| c.timeline.len()).sum();
        let time_range = community_data
            .iter()
            .filter_map(|c| Some((c.timeline.first()?.ts, c.timeline.last()?.ts)))
            .reduce(|(a, b), (c, d)| (a.min(c), b.max(d)));

        let user_lookup = user_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), UserId(i as u32)))
            .collect();
        let community_lookup = community_keys
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), CommunityId(i as u32)))
            .collect();

        CommunityIndex {
            users: user_names,
            user_lookup,
            communities: community_data,
            community_lookup,
            urls: url_names,
            tokens: token_names,
            time_range,
            total_events,
            duplicates_removed,
            excluded_events: excluded,
        }
    }
}

/// Orders one community's entries by `(ts, user, kind, link, tokens)` and
/// drops repeats of `(ts, user, kind, link)`, keeping the smallest token bag.
fn sort_and_dedup(entries: &mut Vec<RawEntry>, bags: &[Vec<u32>]) {
    let bag_of = |b: u32| -> &[u32] {
        if b == NONE {
            &[]
        } else {
            &bags[b as usize]
        }
    };
    entries.sort_unstable_by(|a, b| {
        (a.ts, a.user, a.kind, a.link)
            .cmp(&(b.ts, b.user, b.kind, b.link))
            .then_with(|| bag_of(a.bag).cmp(bag_of(b.bag)))
    });
    entries.dedup_by(|b, a| (a.ts, a.user, a.kind, a.link) == (b.ts, b.user, b.kind, b.link));
}

fn build_community(
    id: CommunityId,
    key: String,
    display: String,
    entries: &[RawEntry],
    bags: &[Vec<u32>],
) -> Community {
    let timeline: Vec<TimelineEntry> = entries
        .iter()
        .map(|e| TimelineEntry {
            ts: e.ts,
            user: UserId(e.user),
            kind: e.kind,
        })
        .collect();
    let first_event_time = timeline.first().map(|e| e.ts).unwrap_or(0);

    let mut posters: Vec<u32> = entries
        .iter()
        .filter(|e| e.kind == EventKind::Post)
        .map(|e| e.user)
        .collect();
    posters.sort_unstable();
    posters.dedup();

    let mut links: Vec<LinkId> = entries
        .iter()
        .filter(|e| e.link != NONE)
        .map(|e| LinkId(e.link))
        .collect();
    links.sort_unstable();
    links.dedup();

    let mut toks: Vec<u32> = entries
        .iter()
        .filter(|e| e.bag != NONE)
        .flat_map(|e| bags[e.bag as usize].iter().copied())
        .collect();
    toks.sort_unstable();
    let mut unigrams: Vec<(TokenId, u64)> = Vec::new();
    for t in toks {
        match unigrams.last_mut() {
            Some((last, n)) if last.0 == t => *n += 1,
            _ => unigrams.push((TokenId(t), 1)),
        }
    }

    let mut by_user: Vec<(UserId, Timestamp)> = timeline.iter().map(|e| (e.user, e.ts)).collect();
    by_user.sort_unstable();
    let mut user_ranges = Vec::new();
    let mut users_sorted = Vec::new();
    let mut i = 0;
    while i < by_user.len() {
        let u = by_user[i].0;
        let j = i + by_user[i..].partition_point(|x| x.0 == u);
        user_ranges.push((i as u32, j as u32));
        users_sorted.push(u);
        i = j;
    }
    let user_times = by_user.into_iter().map(|(_, t)| t).collect();

    Community {
        id,
        key,
        display,
        first_event_time,
        unique_posting_users: posters.len(),
        timeline,
        links,
        unigrams,
        user_ranges,
        user_times,
        users_sorted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: &str, community: &str, ts: i64, kind: EventKind) -> EventRecord {
        EventRecord::new(user, community, ts, kind).unwrap()
    }

    #[test]
    fn json_line_normalizes_community() {
        let line = br#"{"user":"a","community":"Food","ts":100,"kind":"post"}"#;
        let r = parse_json_line(line).unwrap();
        assert_eq!(r.community.key(), "food");
        assert_eq!(r.community.display(), "Food");
        assert_eq!(r.timestamp, 100);
        assert_eq!(r.kind, EventKind::Post);
    }

    #[test]
    fn empty_stream() {
        let (recs, rep) = parse_events(&b""[..], InputFormat::JsonLines).unwrap();
        assert!(recs.is_empty());
        assert_eq!(rep, ParseReport { accepted: 0, skipped: 0 });
    }

    #[test]
    fn malformed_lines_are_counted() {
        let input = "\
{\"user\":\"a\",\"community\":\"x\",\"ts\":1,\"kind\":\"post\"}
{\"user\":\"b\",\"community\":\"x\",\"ts\":2,\"kind\":\"comment\"}
not json at all
{\"user\":\"c\",\"community\":\"y\",\"ts\":3,\"kind\":\"post\",\"url\":\"http://E.com/a/\"}
";
        let (recs, rep) = parse_events(input.as_bytes(), InputFormat::JsonLines).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(rep, ParseReport { accepted: 3, skipped: 1 });
        assert_eq!(recs[2].link_url.as_deref(), Some("e.com/a"));
    }

    #[test]
    fn contract_violations_are_malformed() {
        let bad = [
            r#"{"user":"a","community":"x","ts":-1,"kind":"post"}"#,
            r#"{"user":"a","community":"  ","ts":1,"kind":"post"}"#,
            r#"{"user":"a","community":"x","ts":1,"kind":"comment","url":"http://a.b"}"#,
            r#"{"user":"a","community":"x","ts":1,"kind":"vote"}"#,
            r#"{"user":"a","community":"x","kind":"post"}"#,
        ];
        for line in bad {
            assert!(parse_json_line(line.as_bytes()).is_none(), "{line}");
        }
    }

    #[test]
    fn unknown_format_is_config_error() {
        assert!(matches!("parquet".parse::<InputFormat>(), Err(Error::Config(_))));
        assert_eq!("CSV".parse::<InputFormat>().unwrap(), InputFormat::Csv);
    }

    #[test]
    fn csv_variant() {
        let input = "user,community,ts,kind,url,text\n\
                     a,Food,10,post,,Hello World\n\
                     b,food,11,comment,,\n\
                     c,food,oops,post,,\n";
        let (recs, rep) = parse_events(input.as_bytes(), InputFormat::Csv).unwrap();
        assert_eq!(rep, ParseReport { accepted: 2, skipped: 1 });
        assert_eq!(recs[0].tokens.as_deref(), Some(&["hello".to_string(), "world".to_string()][..]));
        assert_eq!(recs[1].community.key(), "food");
    }

    #[test]
    fn url_normalization() {
        assert_eq!(normalize_url("HTTPS://Example.COM/Path/").as_deref(), Some("example.com/Path"));
        assert_eq!(normalize_url("example.com").as_deref(), Some("example.com"));
        assert_eq!(normalize_url("http://"), None);
        assert_eq!(normalize_url("  "), None);
    }

    #[test]
    fn posters_count_distinct_post_authors() {
        let idx = build_index(&[
            ev("u", "c", 1, EventKind::Post),
            ev("u", "c", 2, EventKind::Post),
            ev("v", "c", 3, EventKind::Comment),
        ]);
        let c = idx.community("c").unwrap();
        assert_eq!(c.unique_posting_users(), 1);
        assert_eq!(c.event_count(), 3);
    }

    #[test]
    fn timeline_sorted() {
        let idx = build_index(&[
            ev("u", "c", 5, EventKind::Post),
            ev("u", "c", 3, EventKind::Post),
            ev("u", "c", 4, EventKind::Post),
        ]);
        let ts: Vec<_> = idx.community("c").unwrap().timeline().iter().map(|e| e.ts).collect();
        assert_eq!(ts, vec![3, 4, 5]);
        assert_eq!(idx.community("c").unwrap().first_event_time(), 3);
    }

    #[test]
    fn timeline_ties_break_by_user_then_kind() {
        let idx = build_index(&[
            ev("zed", "c", 1, EventKind::Post),
            ev("amy", "c", 1, EventKind::Comment),
            ev("amy", "c", 1, EventKind::Post),
        ]);
        let c = idx.community("c").unwrap();
        let order: Vec<_> = c
            .timeline()
            .iter()
            .map(|e| (idx.user_name(e.user).to_string(), e.kind))
            .collect();
        assert_eq!(
            order,
            vec![
                ("amy".into(), EventKind::Post),
                ("amy".into(), EventKind::Comment),
                ("zed".into(), EventKind::Post)
            ]
        );
    }

    #[test]
    fn exact_duplicates_collapse() {
        let a = ev("u", "c", 1, EventKind::Post).with_link("http://x.org").unwrap();
        let idx = build_index(&[a.clone(), a.clone(), ev("u", "c", 1, EventKind::Comment)]);
        assert_eq!(idx.total_events(), 2);
        assert_eq!(idx.duplicates_removed(), 1);
    }

    #[test]
    fn excluded_users_are_dropped() {
        let opts = BuildOptions {
            exclude_users: vec!["[deleted]".into()],
        };
        let idx = build_index_with(
            &[ev("[deleted]", "c", 1, EventKind::Post), ev("u", "c", 2, EventKind::Post)],
            &opts,
            Exec::Sequential,
        );
        assert_eq!(idx.total_events(), 1);
        assert_eq!(idx.excluded_events(), 1);
    }

    #[test]
    fn activity_window_is_half_open() {
        let idx = build_index(&[
            ev("u", "c", 10, EventKind::Post),
            ev("u", "c", 20, EventKind::Comment),
            ev("u", "c", 30, EventKind::Post),
        ]);
        assert_eq!(idx.activity_count("u", "c", 10, 30), 2);
        assert_eq!(idx.activity_count("u", "c", 31, 40), 0);
        assert_eq!(idx.activity_count("nobody", "c", 0, 100), 0);
        assert_eq!(idx.activity_count("u", "nowhere", 0, 100), 0);
        assert_eq!(idx.activity_count("u", "C", 0, 100), 3);
    }

    #[test]
    fn eligibility_boundary() {
        let mut evs = Vec::new();
        for i in 0..300 {
            evs.push(ev(&format!("u{i}"), "big", i, EventKind::Post));
        }
        for i in 0..299 {
            evs.push(ev(&format!("u{i}"), "small", i, EventKind::Post));
        }
        let idx = build_index(&evs);
        let set = eligible_communities(&idx, 300).unwrap();
        assert!(set.contains("big"));
        assert!(!set.contains("small"));
        assert!(eligible_communities(&idx, 0).is_err());
    }

    #[test]
    fn display_name_is_order_independent() {
        let a = build_index(&[ev("u", "Food", 1, EventKind::Post), ev("u", "FOOD", 2, EventKind::Post)]);
        let b = build_index(&[ev("u", "FOOD", 2, EventKind::Post), ev("u", "Food", 1, EventKind::Post)]);
        assert_eq!(a.community("food").unwrap().display(), "FOOD");
        assert_eq!(b.community("food").unwrap().display(), "FOOD");
    }

    #[test]
    fn index_stats_csv() {
        let idx = build_index(&[ev("u", "Food", 7, EventKind::Post), ev("v", "food", 9, EventKind::Comment)]);
        let mut out = Vec::new();
        write_index_stats(&idx, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "community,first_ts,posters,events\nFood,7,1,2\n");
    }

    #[test]
    fn streaming_ingest_equals_record_path() {
        let input = "\
{\"user\":\"a\",\"community\":\" Food \",\"ts\":5,\"kind\":\"post\",\"url\":\"HTTPS://Ex.COM/A/\",\"text\":\"Hi there\"}
{\"user\":\"b\\u00e9\",\"community\":\"FOOD\",\"ts\":5,\"kind\":\"comment\"}
{\"user\":\"a\",\"community\":\"food\",\"ts\":5,\"kind\":\"post\",\"url\":\"ex.com/A\",\"text\":\"again\"}
{\"user\":\"c\",\"community\":\"Ünï\",\"ts\":9,\"kind\":\"post\",\"url\":\"  \"}
{\"user\":\"c\",\"community\":\"x\",\"ts\":9,\"kind\":\"comment\",\"url\":\"ex.com\"}
{\"user\":\"\",\"community\":\"x\",\"ts\":9,\"kind\":\"comment\"}
{\"user\":\"d\",\"community\":\"x\",\"ts\":-1,\"kind\":\"comment\"}

{\"user\":\"d\",\"community\":\"\\tBar\",\"ts\":3,\"kind\":\" post \"}
";
        let (recs, r1) = parse_events(input.as_bytes(), InputFormat::JsonLines).unwrap();
        let a = build_index(&recs);
        let (b, r2) = ingest(input.as_bytes(), InputFormat::JsonLines, &BuildOptions::default(), Exec::Sequential).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1, ParseReport { accepted: 5, skipped: 3 });
        assert_eq!(a.stats_rows(), b.stats_rows());
        for (ca, cb) in a.communities().iter().zip(b.communities()) {
            assert_eq!((ca.key(), ca.display()), (cb.key(), cb.display()));
            assert_eq!(ca.timeline(), cb.timeline());
            assert_eq!(ca.links(), cb.links());
            assert_eq!(ca.unigrams(), cb.unigrams());
        }
        assert_eq!(b.community("ünï").unwrap().display(), "Ünï");
        assert_eq!(b.url(LinkId(0)), "ex.com/A");
    }
}
