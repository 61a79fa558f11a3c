use std::collections::{BTreeSet, HashMap};

use crate::data::ImageTensor;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const HEAD_OPEN: &str = "<h>";
pub const HEAD_CLOSE: &str = "</h>";
pub const TAIL_OPEN: &str = "<t>";
pub const TAIL_CLOSE: &str = "</t>";

/// Reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 9] = [PAD, CLS, SEP, MASK, UNK, HEAD_OPEN, HEAD_CLOSE, TAIL_OPEN, TAIL_CLOSE];

/// Word-level vocabulary: the reserved tokens followed by words in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextVocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let extra: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        let words: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(extra).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Exact lookup.
    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Lookup falling back to `[UNK]`.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(self.special(UNK))
    }

    pub fn special(&self, token: &str) -> usize {
        self.index[token]
    }
}

/// One knowledge-graph entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub id: String,
    pub name: String,
    pub description: Vec<String>,
    pub images: Vec<ImageTensor>,
}

/// Entities in table order; entity `i` owns embedding row `i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityVocabulary {
    records: Vec<EntityRecord>,
    index: HashMap<String, usize>,
}

impl EntityVocabulary {
    pub fn new(records: Vec<EntityRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate entity id `{}`", r.id)));
            }
        }
        Ok(Self { records, index })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown entity `{id}`")))
    }

    pub fn get(&self, i: usize) -> &EntityRecord {
        &self.records[i]
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

/// Dense class or relation indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationLabelSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationLabelSet {
    /// Indices follow first appearance; repeats are ignored.
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = Self::default();
        for n in names {
            let n = n.as_ref();
            if !set.index.contains_key(n) {
                set.index.insert(n.to_string(), set.names.len());
                set.names.push(n.to_string());
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown relation `{name}`")))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = TextVocab::new(["zeta", "alpha", "alpha", "[MASK]"]);
        assert_eq!(v.len(), SPECIAL_TOKENS.len() + 2);
        assert_eq!(v.special(PAD), 0);
        assert_eq!(v.special(CLS), 1);
        assert_eq!(v.special(MASK), 3);
        assert_eq!(v.get("alpha"), Some(9));
        assert_eq!(v.id("missing"), v.special(UNK));
    }

    #[test]
    fn label_set_is_dense_and_stable() {
        let l = RelationLabelSet::new(["b", "a", "b", "c"]);
        assert_eq!(l.names(), &["b", "a", "c"]);
        assert_eq!(l.index_of("c").unwrap(), 2);
        assert!(matches!(l.index_of("z"), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn duplicate_entities_rejected() {
        let r = EntityRecord {
            id: "e".into(),
            name: "e".into(),
            description: vec![],
            images: vec![],
        };
        assert!(EntityVocabulary::new(vec![r.clone(), r]).is_err());
    }
}
