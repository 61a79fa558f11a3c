//! Token sequences fed to the textual stream for each task.

use super::vocab::{
    EntityVocabulary, RelationLabelSet, TextVocab, CLS, HEAD_CLOSE, HEAD_OPEN, MASK, SEP, TAIL_CLOSE, TAIL_OPEN,
};
use crate::data::tokenize;
use crate::error::{shape_err, Error, Result};

/// A rendered input: display tokens, their ids and the `[MASK]` position if any.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub mask: Option<usize>,
}

struct Builder<'a> {
    vocab: &'a TextVocab,
    out: EncodedInput,
}

impl<'a> Builder<'a> {
    fn new(vocab: &'a TextVocab) -> Self {
        Self {
            vocab,
            out: EncodedInput {
                tokens: Vec::new(),
                ids: Vec::new(),
                mask: None,
            },
        }
    }

    fn word(&mut self, w: &str) -> &mut Self {
        self.out.tokens.push(w.to_string());
        self.out.ids.push(self.vocab.id(w));
        self
    }

    fn words<S: AsRef<str>>(&mut self, ws: &[S]) -> &mut Self {
        for w in ws {
            self.word(w.as_ref());
        }
        self
    }

    fn mask(&mut self) -> &mut Self {
        self.out.mask = Some(self.out.ids.len());
        self.word(MASK)
    }

    fn entity(&mut self, entities: &EntityVocabulary, idx: usize) -> &mut Self {
        self.out.tokens.push(format!("<{}>", entities.get(idx).id));
        self.out.ids.push(self.vocab.len() + idx);
        self
    }

    fn finish(&mut self) -> EncodedInput {
        std::mem::replace(
            &mut self.out,
            EncodedInput {
                tokens: Vec::new(),
                ids: Vec::new(),
                mask: None,
            },
        )
    }
}

/// `[CLS] desc is the description of [MASK] [SEP]`.
pub fn build_entity_modeling_input(
    entity: usize,
    entities: &EntityVocabulary,
    vocab: &TextVocab,
) -> Result<EncodedInput> {
    if entity >= entities.len() {
        return Err(Error::Vocabulary(format!("entity index {entity} out of range")));
    }
    let desc = &entities.get(entity).description;
    Ok(Builder::new(vocab)
        .word(CLS)
        .words(desc)
        .words(&["is", "the", "description", "of"])
        .mask()
        .word(SEP)
        .finish())
}

/// Tail query `[CLS] <e_h> desc [SEP] r [SEP] [MASK] [SEP]`.
pub fn build_triple_query_input(
    head: &str,
    relation: &str,
    entities: &EntityVocabulary,
    relations: &RelationLabelSet,
    vocab: &TextVocab,
) -> Result<EncodedInput> {
    let h = entities.index_of(head)?;
    relations.index_of(relation)?;
    let desc = &entities.get(h).description;
    Ok(Builder::new(vocab)
        .word(CLS)
        .entity(entities, h)
        .words(desc)
        .word(SEP)
        .words(&tokenize(relation))
        .word(SEP)
        .mask()
        .word(SEP)
        .finish())
}

/// Head query `[CLS] [MASK] [SEP] r [SEP] <e_t> desc [SEP]`.
pub fn build_head_query_input(
    tail: &str,
    relation: &str,
    entities: &EntityVocabulary,
    relations: &RelationLabelSet,
    vocab: &TextVocab,
) -> Result<EncodedInput> {
    let t = entities.index_of(tail)?;
    relations.index_of(relation)?;
    let desc = &entities.get(t).description;
    Ok(Builder::new(vocab)
        .word(CLS)
        .mask()
        .word(SEP)
        .words(&tokenize(relation))
        .word(SEP)
        .entity(entities, t)
        .words(desc)
        .word(SEP)
        .finish())
}

/// `[CLS] tokens [SEP]` with `<h> </h>` and `<t> </t>` around the half-open spans.
pub fn build_relation_input(
    tokens: &[String],
    head: (usize, usize),
    tail: (usize, usize),
    vocab: &TextVocab,
) -> Result<EncodedInput> {
    let n = tokens.len();
    for (s, e) in [head, tail] {
        if s >= e || e > n {
            return Err(shape_err!("span {s}:{e} outside {n} tokens"));
        }
    }
    if head.0 < tail.1 && tail.0 < head.1 {
        return Err(Error::Label(format!(
            "head {}:{} overlaps tail {}:{}",
            head.0, head.1, tail.0, tail.1
        )));
    }
    let mut b = Builder::new(vocab);
    b.word(CLS);
    for (i, tok) in tokens.iter().enumerate() {
        if i == head.0 {
            b.word(HEAD_OPEN);
        }
        if i == tail.0 {
            b.word(TAIL_OPEN);
        }
        b.word(tok);
        if i + 1 == head.1 {
            b.word(HEAD_CLOSE);
        }
        if i + 1 == tail.1 {
            b.word(TAIL_CLOSE);
        }
    }
    b.word(SEP);
    Ok(b.finish())
}

/// `[CLS] tokens [SEP]`; token `i` sits at position `i + 1`.
pub fn build_tagging_input(tokens: &[String], vocab: &TextVocab) -> EncodedInput {
    Builder::new(vocab).word(CLS).words(tokens).word(SEP).finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_heads::vocab::EntityRecord;

    fn fixture(desc: &str) -> (EntityVocabulary, RelationLabelSet, TextVocab) {
        let record = EntityRecord {
            id: "superman_returns".into(),
            name: "Superman Returns".into(),
            description: tokenize(desc),
            images: vec![],
        };
        let ents = EntityVocabulary::new(vec![record]).unwrap();
        let rels = RelationLabelSet::new(["director"]);
        let vocab = TextVocab::new(
            tokenize(desc)
                .into_iter()
                .chain(["is", "the", "description", "of", "director"].map(String::from)),
        );
        (ents, rels, vocab)
    }

    fn count(tokens: &[String], t: &str) -> usize {
        tokens.iter().filter(|x| *x == t).count()
    }

    #[test]
    fn entity_modeling_template() {
        let (e, _, v) = fixture("Superman Returns film");
        let x = build_entity_modeling_input(0, &e, &v).unwrap();
        assert_eq!(
            x.tokens.join(" "),
            "[CLS] superman returns film is the description of [MASK] [SEP]"
        );
        assert_eq!(x.mask, Some(8));
        assert_eq!(x.ids.len(), 3 + 7);

        let (e, _, v) = fixture("");
        let x = build_entity_modeling_input(0, &e, &v).unwrap();
        assert_eq!(x.tokens.join(" "), "[CLS] is the description of [MASK] [SEP]");
        assert_eq!(count(&x.tokens, MASK), 1);
    }

    #[test]
    fn triple_query_template() {
        let (e, r, v) = fixture("superman returns film");
        let x = build_triple_query_input("superman_returns", "director", &e, &r, &v).unwrap();
        assert_eq!(
            x.tokens.join(" "),
            "[CLS] <superman_returns> superman returns film [SEP] director [SEP] [MASK] [SEP]"
        );
        assert_eq!(x.ids[1], v.len());
        assert_eq!(x.mask, Some(8));
        assert_eq!(count(&x.tokens, SEP), 3);

        let (e, r, v) = fixture("");
        let x = build_triple_query_input("superman_returns", "director", &e, &r, &v).unwrap();
        assert_eq!(x.tokens.join(" "), "[CLS] <superman_returns> [SEP] director [SEP] [MASK] [SEP]");

        assert!(matches!(
            build_triple_query_input("batman", "director", &e, &r, &v),
            Err(Error::Vocabulary(_))
        ));
        assert!(matches!(
            build_triple_query_input("superman_returns", "cast", &e, &r, &v),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn head_query_template() {
        let (e, r, v) = fixture("film");
        let x = build_head_query_input("superman_returns", "director", &e, &r, &v).unwrap();
        assert_eq!(x.tokens.join(" "), "[CLS] [MASK] [SEP] director [SEP] <superman_returns> film [SEP]");
        assert_eq!(x.mask, Some(1));
    }

    #[test]
    fn relation_markers() {
        let v = TextVocab::new(["a", "b", "c", "d"]);
        let toks: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        let x = build_relation_input(&toks, (0, 2), (3, 4), &v).unwrap();
        assert_eq!(x.tokens.join(" "), "[CLS] <h> a b </h> c <t> d </t> [SEP]");
        let x = build_relation_input(&toks, (2, 3), (0, 1), &v).unwrap();
        assert_eq!(x.tokens.join(" "), "[CLS] <t> a </t> b <h> c </h> d [SEP]");
        assert!(build_relation_input(&toks, (0, 2), (1, 3), &v).is_err());
        assert!(build_relation_input(&toks, (0, 5), (1, 3), &v).is_err());
    }

    #[test]
    fn tagging_layout() {
        let v = TextVocab::new(["a"]);
        let x = build_tagging_input(&["a".to_string(), "zz".to_string()], &v);
        assert_eq!(x.ids, vec![1, v.get("a").unwrap(), v.id("[UNK]"), 2]);
    }
}
