use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// Deduplicated triples with head/tail lookup for filtered ranking.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleStore {
    triples: Vec<Triple>,
    seen: BTreeSet<Triple>,
    tails: BTreeMap<(String, String), BTreeSet<String>>,
    heads: BTreeMap<(String, String), BTreeSet<String>>,
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` when the triple was already present.
    pub fn insert(&mut self, t: Triple) -> bool {
        if !self.seen.insert(t.clone()) {
            return false;
        }
        self.tails
            .entry((t.head.clone(), t.relation.clone()))
            .or_default()
            .insert(t.tail.clone());
        self.heads
            .entry((t.relation.clone(), t.tail.clone()))
            .or_default()
            .insert(t.head.clone());
        self.triples.push(t);
        true
    }

    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut s = Self::new();
        for t in triples {
            s.insert(t);
        }
        s
    }

    /// Union of several stores, e.g. train+dev+test for filtering.
    pub fn merged<'a>(stores: impl IntoIterator<Item = &'a TripleStore>) -> Self {
        Self::from_triples(stores.into_iter().flat_map(|s| s.triples.iter().cloned()))
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.seen.contains(t)
    }

    /// Known tails of `(head, relation)`.
    pub fn known_tails(&self, head: &str, relation: &str) -> Option<&BTreeSet<String>> {
        self.tails.get(&(head.to_string(), relation.to_string()))
    }

    /// Known heads of `(relation, tail)`.
    pub fn known_heads(&self, relation: &str, tail: &str) -> Option<&BTreeSet<String>> {
        self.heads.get(&(relation.to_string(), tail.to_string()))
    }

    pub fn entity_ids(&self) -> BTreeSet<&str> {
        self.triples
            .iter()
            .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
            .collect()
    }

    pub fn relation_ids(&self) -> BTreeSet<&str> {
        self.triples.iter().map(|t| t.relation.as_str()).collect()
    }

    /// Canonical TSV: sorted, one triple per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.seen {
            out.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
        }
        out
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<(Self, Vec<String>)> {
        let mut store = Self::new();
        let mut warnings = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::parse(path, i + 1, "expected head<TAB>relation<TAB>tail"));
            }
            if !store.insert(Triple::new(fields[0], fields[1], fields[2])) {
                warnings.push(format!("{}:{}: duplicate triple ignored", path.display(), i + 1));
            }
        }
        Ok((store, warnings))
    }

    /// Fails with a vocabulary error if any triple mentions an unknown entity or relation.
    pub fn check_ids(
        &self,
        mut entity_known: impl FnMut(&str) -> bool,
        mut relation_known: impl FnMut(&str) -> bool,
    ) -> Result<()> {
        for t in &self.triples {
            for e in [&t.head, &t.tail] {
                if !entity_known(e) {
                    return Err(Error::Vocabulary(format!("unknown entity `{e}`")));
                }
            }
            if !relation_known(&t.relation) {
                return Err(Error::Vocabulary(format!("unknown relation `{}`", t.relation)));
            }
        }
        Ok(())
    }
}

pub fn load_triples(path: &Path) -> Result<TripleStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (store, warnings) = TripleStore::parse_tsv(&text, path)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(store)
}

pub fn save_triples(store: &TripleStore, path: &Path) -> Result<()> {
    fs::write(path, store.to_tsv()).map_err(|e| Error::io(path, e))
}
