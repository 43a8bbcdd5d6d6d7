//! Free-text and fielded search over committed versions, filtered per caller.
//!
//! Text is tokenized by lowercasing and splitting on non-alphanumerics. A hit's
//! score is the number of distinct query tokens found among the entry's name,
//! description and tag tokens. Results are ordered by score, then newest first,
//! then by (asset, version) so identical inputs always give identical pages.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::checksum::Checksum;
use crate::error::{AeroError, Result};
use crate::ids::{AssetId, FunctionId, PrincipalId, RunId};
use crate::model::VersionRef;

pub const MAX_LIMIT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Public,
    /// Listed principals only. The default admits nobody.
    Principals(BTreeSet<PrincipalId>),
}

impl Default for Visibility {
    fn default() -> Self {
        Visibility::Principals(BTreeSet::new())
    }
}

impl Visibility {
    pub fn admits(&self, principal: Option<PrincipalId>) -> bool {
        match self {
            Visibility::Public => true,
            Visibility::Principals(set) => principal.is_some_and(|p| set.contains(&p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceSummary {
    pub run_id: RunId,
    pub function_ref: FunctionId,
    pub inputs: Vec<VersionRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub asset_id: AssetId,
    pub version: u64,
    pub name: String,
    pub description: String,
    /// Source URL for ingested data, `run:<id>` for flow-produced data.
    pub original_source: String,
    pub download_url: String,
    pub tags: BTreeSet<String>,
    pub size_bytes: u64,
    pub checksum: Checksum,
    pub created_at: DateTime<Utc>,
    pub provenance: Option<ProvenanceSummary>,
    /// Never sent to clients: it would list who else may read the asset.
    #[serde(skip)]
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub score: usize,
    #[serde(flatten)]
    pub entry: SearchEntry,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub asset_id: Option<AssetId>,
    #[serde(default)]
    pub created_after: Option<DateTime<Utc>>,
    #[serde(default)]
    pub created_before: Option<DateTime<Utc>>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub offset: usize,
}

impl SearchQuery {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(limit) = self.limit {
            if limit == 0 || limit > MAX_LIMIT {
                return Err(AeroError::MalformedFilter(format!(
                    "limit must be in 1..={MAX_LIMIT}"
                )));
            }
        }
        if let (Some(a), Some(b)) = (self.created_after, self.created_before) {
            if a > b {
                return Err(AeroError::MalformedFilter(
                    "created_after is later than created_before".into(),
                ));
            }
        }
        if self.tags.iter().any(|t| t.trim().is_empty()) {
            return Err(AeroError::MalformedFilter("empty tag".into()));
        }
        Ok(())
    }

    /// Whether `entry` satisfies the fielded filters (text is scored separately).
    pub fn filters_match(&self, entry: &SearchEntry) -> bool {
        self.tags.iter().all(|t| entry.tags.contains(t))
            && self.asset_id.is_none_or(|a| a == entry.asset_id)
            && self.created_after.is_none_or(|t| entry.created_at >= t)
            && self.created_before.is_none_or(|t| entry.created_at <= t)
    }
}

pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn entry_tokens(e: &SearchEntry) -> BTreeSet<String> {
    let mut tokens = tokenize(&e.name);
    tokens.extend(tokenize(&e.description));
    for tag in &e.tags {
        tokens.extend(tokenize(tag));
    }
    tokens
}

struct Indexed {
    entry: SearchEntry,
    tokens: BTreeSet<String>,
}

#[derive(Default)]
pub struct SearchIndex {
    entries: RwLock<BTreeMap<VersionRef, Indexed>>,
}

impl SearchIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the entry for one (asset, version).
    pub fn index_version(&self, entry: SearchEntry) -> VersionRef {
        let id = VersionRef::new(entry.asset_id, entry.version);
        let tokens = entry_tokens(&entry);
        self.entries.write().insert(id, Indexed { entry, tokens });
        id
    }

    pub fn set_visibility(&self, asset_id: AssetId, visibility: &Visibility) {
        let mut entries = self.entries.write();
        for (_, ix) in entries.range_mut(VersionRef::new(asset_id, 0)..=VersionRef::new(asset_id, u64::MAX)) {
            ix.entry.visibility = visibility.clone();
        }
    }

    pub fn remove_asset(&self, asset_id: AssetId) {
        self.entries
            .write()
            .retain(|k, _| k.asset_id != asset_id);
    }

    /// Replaces the whole index (rebuild from the registry).
    pub fn replace_all(&self, entries: impl IntoIterator<Item = SearchEntry>) {
        let fresh = entries
            .into_iter()
            .map(|e| {
                (
                    VersionRef::new(e.asset_id, e.version),
                    Indexed {
                        tokens: entry_tokens(&e),
                        entry: e,
                    },
                )
            })
            .collect();
        *self.entries.write() = fresh;
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: VersionRef) -> Option<SearchEntry> {
        self.entries.read().get(&id).map(|ix| ix.entry.clone())
    }

    pub fn query(&self, q: &SearchQuery, principal: Option<PrincipalId>) -> Result<Vec<SearchHit>> {
        q.validate()?;
        let wanted = tokenize(&q.text);
        let entries = self.entries.read();
        let mut hits: Vec<SearchHit> = entries
            .values()
            .filter(|ix| ix.entry.visibility.admits(principal) && q.filters_match(&ix.entry))
            .filter_map(|ix| {
                let score = wanted.iter().filter(|t| ix.tokens.contains(*t)).count();
                (wanted.is_empty() || score > 0).then(|| SearchHit {
                    score,
                    entry: ix.entry.clone(),
                })
            })
            .collect();
        drop(entries);
        hits.sort_by_key(|h| {
            (
                Reverse(h.score),
                Reverse(h.entry.created_at),
                h.entry.asset_id,
                h.entry.version,
            )
        });
        let limit = q.limit.unwrap_or(100);
        Ok(hits.into_iter().skip(q.offset).take(limit).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn entry(name: &str, description: &str, tags: &[&str], vis: Visibility, age_s: i64) -> SearchEntry {
        SearchEntry {
            asset_id: AssetId::new(),
            version: 1,
            name: name.into(),
            description: description.into(),
            original_source: "https://example.org/data.csv".into(),
            download_url: String::new(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            size_bytes: 0,
            checksum: Checksum::of_bytes(b""),
            created_at: Utc::now() - Duration::seconds(age_s),
            provenance: None,
            visibility: vis,
        }
    }

    #[test]
    fn tokenizer() {
        assert_eq!(
            tokenize("ww_OBrien  wastewater-2024"),
            ["2024", "obrien", "wastewater", "ww"].iter().map(|s| s.to_string()).collect()
        );
        assert!(tokenize("  --  ").is_empty());
    }

    #[test]
    fn name_token_match() {
        let ix = SearchIndex::new();
        ix.index_version(entry("ww_obrien", "O'Brien wastewater", &["covid"], Visibility::Public, 0));
        let hits = ix.query(&SearchQuery::text("obrien"), None).unwrap();
        assert_eq!(hits.len(), 1);
        assert!(ix.query(&SearchQuery::text("stickney"), None).unwrap().is_empty());
    }

    #[test]
    fn empty_text_with_tag_filter() {
        let ix = SearchIndex::new();
        ix.index_version(entry("a", "", &["covid"], Visibility::Public, 0));
        ix.index_version(entry("b", "", &["covid", "rt"], Visibility::Public, 0));
        ix.index_version(entry("c", "", &["flu"], Visibility::Public, 0));
        let q = SearchQuery {
            tags: BTreeSet::from(["covid".to_string()]),
            ..SearchQuery::default()
        };
        let names: BTreeSet<String> = ix
            .query(&q, None)
            .unwrap()
            .into_iter()
            .map(|h| h.entry.name)
            .collect();
        assert_eq!(names, BTreeSet::from(["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn private_entries_hidden_from_strangers() {
        let ix = SearchIndex::new();
        let owner = PrincipalId::new();
        ix.index_version(entry(
            "secret_series",
            "",
            &[],
            Visibility::Principals(BTreeSet::from([owner])),
            0,
        ));
        let q = SearchQuery::text("secret_series");
        assert!(ix.query(&q, Some(PrincipalId::new())).unwrap().is_empty());
        assert!(ix.query(&q, None).unwrap().is_empty());
        assert_eq!(ix.query(&q, Some(owner)).unwrap().len(), 1);
    }

    #[test]
    fn more_token_hits_rank_first() {
        let ix = SearchIndex::new();
        // The one-token match is newer, so recency alone would put it first.
        ix.index_version(entry("rt estimate", "wastewater", &[], Visibility::Public, 100));
        ix.index_version(entry("rt series", "", &[], Visibility::Public, 0));
        let hits = ix.query(&SearchQuery::text("rt wastewater"), None).unwrap();
        // Brute-force scores: entry 1 contains {rt, wastewater} = 2, entry 2 contains {rt} = 1.
        assert_eq!(hits.iter().map(|h| h.score).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(hits[0].entry.name, "rt estimate");
    }

    #[test]
    fn pagination_is_stable() {
        let ix = SearchIndex::new();
        for i in 0..10 {
            ix.index_version(entry(&format!("series {i}"), "", &[], Visibility::Public, 5));
        }
        let page = |offset| {
            ix.query(
                &SearchQuery {
                    text: "series".into(),
                    limit: Some(4),
                    offset,
                    ..SearchQuery::default()
                },
                None,
            )
            .unwrap()
        };
        let all: Vec<_> = [0, 4, 8].into_iter().flat_map(page).collect();
        assert_eq!(all.len(), 10);
        let distinct: BTreeSet<_> = all.iter().map(|h| h.entry.asset_id).collect();
        assert_eq!(distinct.len(), 10);
        assert_eq!(page(4), page(4));
    }

    #[test]
    fn malformed_filters() {
        let ix = SearchIndex::new();
        let bad_limit = SearchQuery {
            limit: Some(0),
            ..SearchQuery::default()
        };
        assert!(matches!(ix.query(&bad_limit, None), Err(AeroError::MalformedFilter(_))));
        let now = Utc::now();
        let bad_range = SearchQuery {
            created_after: Some(now),
            created_before: Some(now - Duration::seconds(1)),
            ..SearchQuery::default()
        };
        assert!(matches!(ix.query(&bad_range, None), Err(AeroError::MalformedFilter(_))));
    }

    #[test]
    fn visibility_update_applies_to_all_versions() {
        let ix = SearchIndex::new();
        let mut e = entry("x", "", &[], Visibility::Principals(BTreeSet::new()), 0);
        ix.index_version(e.clone());
        e.version = 2;
        ix.index_version(e.clone());
        ix.set_visibility(e.asset_id, &Visibility::Public);
        assert_eq!(ix.query(&SearchQuery::text("x"), None).unwrap().len(), 2);
    }
}
