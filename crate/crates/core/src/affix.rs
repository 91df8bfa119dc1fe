//! Name-affix pairing and the affix taxonomy.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const UNCATEGORIZED: &str = "uncategorized";

/// Where the affix sits on the modified name. `Suffix` orders first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffixPosition {
    Suffix,
    Prefix,
}

impl AffixPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            AffixPosition::Prefix => "prefix",
            AffixPosition::Suffix => "suffix",
        }
    }
}

impl fmt::Display for AffixPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A candidate related pair. Names are lowercase community keys.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AffixPair {
    pub base: String,
    pub modified: String,
    pub position: AffixPosition,
    pub affix: String,
    #[serde(default)]
    pub category: Option<String>,
}

impl AffixPair {
    /// Stable identifier used across report files.
    pub fn id(&self) -> String {
        pair_id(&self.base, &self.modified)
    }

    /// `affix + base` (prefix) or `base + affix` (suffix).
    pub fn reconstruct(&self) -> String {
        match self.position {
            AffixPosition::Prefix => format!("{}{}", self.affix, self.base),
            AffixPosition::Suffix => format!("{}{}", self.base, self.affix),
        }
    }

    pub fn category_or_default(&self) -> &str {
        self.category.as_deref().unwrap_or(UNCATEGORIZED)
    }
}

pub fn pair_id(base: &str, modified: &str) -> String {
    format!("{base}:{modified}")
}

/// Every pair where one lowercased name is a proper prefix or suffix of another.
///
/// Runs in `O(total name length)` hash probes: each name is split at every
/// character boundary and both halves are looked up.
pub fn detect_pairs<I, S>(names: I) -> Vec<AffixPair>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    detect_pairs_with(names, Exec::default())
}

pub fn detect_pairs_with<I, S>(names: I, exec: Exec) -> Vec<AffixPair>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let set: BTreeSet<String> = names
        .into_iter()
        .map(|n| n.as_ref().trim().to_lowercase())
        .filter(|n| !n.is_empty())
        .collect();
    let list: Vec<&String> = set.iter().collect();
    let lookup: HashSet<&str> = list.iter().map(|s| s.as_str()).collect();

    let mut pairs = par::flat_map_range(exec, 0..list.len(), |i| {
        let modified = list[i].as_str();
        let mut out = Vec::new();
        for (cut, _) in modified.char_indices().skip(1) {
            let (head, tail) = modified.split_at(cut);
            if lookup.contains(tail) {
                out.push(AffixPair {
                    base: tail.to_string(),
                    modified: modified.to_string(),
                    position: AffixPosition::Prefix,
                    affix: head.to_string(),
                    category: None,
                });
            }
            if lookup.contains(head) {
                out.push(AffixPair {
                    base: head.to_string(),
                    modified: modified.to_string(),
                    position: AffixPosition::Suffix,
                    affix: tail.to_string(),
                    category: None,
                });
            }
        }
        out
    });
    pairs.sort();
    pairs
}

/// Keeps one reading per `(base, modified)`, preferring the suffix reading.
pub fn dedupe_pairs(mut pairs: Vec<AffixPair>) -> Vec<AffixPair> {
    pairs.sort();
    pairs.dedup_by(|b, a| a.base == b.base && a.modified == b.modified);
    pairs
}

/// Retains pairs whose affix occurs in at least `min_count` pairs of the input.
pub fn filter_affix_frequency(pairs: &[AffixPair], min_count: usize) -> Result<Vec<AffixPair>> {
    if min_count == 0 {
        return Err(Error::config("min affix count must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        *counts.entry(p.affix.as_str()).or_default() += 1;
    }
    Ok(pairs
        .iter()
        .filter(|p| counts[p.affix.as_str()] >= min_count)
        .cloned()
        .collect())
}

/// Names that are the modified side of one pair and the base of another,
/// e.g. `jokes → antijokes → antiantijokes`, as `(base, middle, top)`.
pub fn find_chains(pairs: &[AffixPair]) -> Vec<(String, String, String)> {
    let mut by_base: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for p in pairs {
        by_base.entry(&p.base).or_default().push(&p.modified);
    }
    let mut chains = BTreeSet::new();
    for p in pairs {
        if let Some(tops) = by_base.get(p.modified.as_str()) {
            for top in tops {
                chains.insert((p.base.clone(), p.modified.clone(), top.to_string()));
            }
        }
    }
    chains.into_iter().collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffixCount {
    pub pairs: usize,
    pub suffix_pairs: usize,
    pub suffix_fraction: f64,
    pub category: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffixStats {
    pub per_affix: BTreeMap<String, AffixCount>,
    pub per_category: BTreeMap<String, usize>,
}

pub fn affix_stats(pairs: &[AffixPair]) -> AffixStats {
    let mut stats = AffixStats::default();
    for p in pairs {
        let entry = stats.per_affix.entry(p.affix.clone()).or_default();
        entry.pairs += 1;
        if p.position == AffixPosition::Suffix {
            entry.suffix_pairs += 1;
        }
        entry.category = p.category_or_default().to_string();
        *stats
            .per_category
            .entry(p.category_or_default().to_string())
            .or_default() += 1;
    }
    for c in stats.per_affix.values_mut() {
        c.suffix_fraction = c.suffix_pairs as f64 / c.pairs as f64;
    }
    stats
}

// ---------------------------------------------------------------------------
// Taxonomy

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.toml");

#[derive(Debug, Deserialize, Serialize)]
struct TaxonomyFile {
    category: Vec<CategoryEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CategoryEntry {
    name: String,
    group: String,
    affixes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub category: String,
    pub group: String,
}

/// affix → (category, part-of-speech group).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    entries: BTreeMap<String, TaxonomyEntry>,
    categories: Vec<(String, String)>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy::from_toml(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }
}

impl Taxonomy {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| Error::config(format!("taxonomy: {e}")))?;
        let mut entries: BTreeMap<String, TaxonomyEntry> = BTreeMap::new();
        let mut categories = Vec::new();
        for cat in file.category {
            categories.push((cat.name.clone(), cat.group.clone()));
            for affix in cat.affixes {
                let affix = affix.to_lowercase();
                if let Some(prev) = entries.get(&affix) {
                    if prev.category != cat.name {
                        return Err(Error::config(format!(
                            "affix {affix:?} listed under both {:?} and {:?}",
                            prev.category, cat.name
                        )));
                    }
                    continue;
                }
                entries.insert(
                    affix,
                    TaxonomyEntry {
                        category: cat.name.clone(),
                        group: cat.group.clone(),
                    },
                );
            }
        }
        Ok(Taxonomy { entries, categories })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Taxonomy::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }

    pub fn lookup(&self, affix: &str) -> Option<&TaxonomyEntry> {
        self.entries.get(affix)
    }

    pub fn category(&self, affix: &str) -> &str {
        self.lookup(affix).map(|e| e.category.as_str()).unwrap_or(UNCATEGORIZED)
    }

    pub fn affixes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// `(category, group)` in file order.
    pub fn categories(&self) -> &[(String, String)] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn categorize(pairs: &[AffixPair], taxonomy: &Taxonomy) -> Vec<AffixPair> {
    pairs
        .iter()
        .map(|p| AffixPair {
            category: Some(taxonomy.category(&p.affix).to_string()),
            ..p.clone()
        })
        .collect()
}
