//! Region tables: the mapping from integer label codes to named ROIs.
//!
//! Left/right hemisphere codes share a `merge_key` so that both count into a
//! single region. The file format is one entry per line,
//! `code<TAB>name<TAB>group<TAB>merge_key[<TAB>noicv]`, with `#` comments.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

const DEFAULT_TABLE_TEXT: &str = include_str!("../assets/default_regions.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RegionGroup {
    Subcortical,
    Cortical,
}

impl fmt::Display for RegionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionGroup::Subcortical => write!(f, "subcortical"),
            RegionGroup::Cortical => write!(f, "cortical"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEntry {
    pub code: u32,
    pub name: String,
    pub group: RegionGroup,
    pub merge_key: String,
    /// Codes flagged `noicv` are excluded from the total intracranial volume.
    pub in_icv: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionTable {
    entries: Vec<RegionEntry>,
    by_code: BTreeMap<u32, usize>,
}

impl RegionTable {
    pub fn empty() -> Self {
        RegionTable::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RegionEntry] {
        &self.entries
    }

    pub fn lookup(&self, code: u32) -> Option<&RegionEntry> {
        self.by_code.get(&code).map(|&i| &self.entries[i])
    }

    /// Sorted, deduplicated merge keys.
    pub fn merge_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.entries.iter().map(|e| e.merge_key.clone()).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    /// Number of merged ROIs per group.
    pub fn merged_counts(&self) -> (usize, usize) {
        let mut sub = std::collections::BTreeSet::new();
        let mut cort = std::collections::BTreeSet::new();
        for e in &self.entries {
            match e.group {
                RegionGroup::Subcortical => sub.insert(&e.merge_key),
                RegionGroup::Cortical => cort.insert(&e.merge_key),
            };
        }
        (sub.len(), cort.len())
    }

    pub fn from_entries(entries: Vec<RegionEntry>) -> Result<Self> {
        let mut by_code = BTreeMap::new();
        let mut group_of: BTreeMap<&str, RegionGroup> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.merge_key.is_empty() {
                return Err(Error::BadRegionTable {
                    line: i + 1,
                    reason: format!("code {}: empty merge_key", e.code),
                });
            }
            if by_code.insert(e.code, i).is_some() {
                return Err(Error::BadRegionTable {
                    line: i + 1,
                    reason: format!("duplicate code {}", e.code),
                });
            }
            if let Some(&g) = group_of.get(e.merge_key.as_str()) {
                if g != e.group {
                    return Err(Error::BadRegionTable {
                        line: i + 1,
                        reason: format!(
                            "merge_key {:?} maps to both {} and {}",
                            e.merge_key, g, e.group
                        ),
                    });
                }
            } else {
                group_of.insert(&e.merge_key, e.group);
            }
        }
        Ok(RegionTable { entries, by_code })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() < 4 {
                return Err(Error::BadRegionTable {
                    line: lineno + 1,
                    reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let code: u32 = fields[0].parse().map_err(|_| Error::BadRegionTable {
                line: lineno + 1,
                reason: format!("bad code {:?}", fields[0]),
            })?;
            let group = match fields[2] {
                "subcortical" => RegionGroup::Subcortical,
                "cortical" => RegionGroup::Cortical,
                other => {
                    return Err(Error::BadRegionTable {
                        line: lineno + 1,
                        reason: format!("unknown group {other:?}"),
                    })
                }
            };
            let in_icv = !fields.get(4).map(|&f| f == "noicv").unwrap_or(false);
            entries.push(RegionEntry {
                code,
                name: fields[1].to_string(),
                group,
                merge_key: fields[3].to_string(),
                in_icv,
            });
        }
        RegionTable::from_entries(entries)
    }

    /// The shipped table: FreeSurfer-convention codes merging into 16
    /// subcortical and 33 cortical ROIs.
    pub fn default_table() -> Self {
        RegionTable::parse(DEFAULT_TABLE_TEXT).expect("bundled region table is valid")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# code\tname\tgroup\tmerge_key\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}{}\n",
                e.code,
                e.name,
                e.group,
                e.merge_key,
                if e.in_icv { "" } else { "\tnoicv" }
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_merges_to_16_plus_33() {
        let t = RegionTable::default_table();
        let (sub, cort) = t.merged_counts();
        assert_eq!(sub, 16);
        assert_eq!(cort, 33);
        assert_eq!(t.merge_keys().len(), 49);
    }

    #[test]
    fn default_table_merges_hemispheres() {
        let t = RegionTable::default_table();
        let left = t.lookup(17).unwrap();
        let right = t.lookup(53).unwrap();
        assert_eq!(left.merge_key, "hippocampus");
        assert_eq!(left.merge_key, right.merge_key);
        assert_eq!(left.group, RegionGroup::Subcortical);
    }

    #[test]
    fn duplicate_codes_rejected() {
        let text = "1\ta\tsubcortical\tx\n1\tb\tsubcortical\ty\n";
        assert!(matches!(
            RegionTable::parse(text),
            Err(Error::BadRegionTable { .. })
        ));
    }

    #[test]
    fn merge_key_cannot_span_groups() {
        let text = "1\ta\tsubcortical\tx\n2\tb\tcortical\tx\n";
        assert!(RegionTable::parse(text).is_err());
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let text = "# hello\n\n7\tmid\tsubcortical\tcore\n";
        let t = RegionTable::parse(text).unwrap();
        assert_eq!(t.entries().len(), 1);
        assert_eq!(t.lookup(7).unwrap().merge_key, "core");
    }

    #[test]
    fn noicv_flag_parses() {
        let text = "24\tCSF\tsubcortical\tcsf\tnoicv\n";
        let t = RegionTable::parse(text).unwrap();
        assert!(!t.lookup(24).unwrap().in_icv);
    }

    #[test]
    fn round_trips_through_text() {
        let t = RegionTable::default_table();
        let again = RegionTable::parse(&t.to_text()).unwrap();
        assert_eq!(t, again);
    }
}
