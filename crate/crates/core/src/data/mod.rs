//! File formats, tokenization, synthetic data and few-shot sampling.

mod corpus;
mod entities;
mod image;
mod kshot;
mod synthetic;
mod triples;

pub use corpus::{
    load_sequence_corpus, parse_sequence_corpus, save_sequence_corpus, Payload, SequenceExample, SequenceTask,
};
pub use entities::{load_entities, load_image_list, parse_entities, ImageSpec};
pub use image::{fit_image_count, ImageTensor, IMAGE_MAGIC};
pub use kshot::sample_k_shot;
pub use synthetic::{
    entity_id, generate_synthetic, ner_planted_rule, re_planted_rule, relation_id, synthetic_link, synthetic_ner,
    synthetic_re, SyntheticLink, SyntheticSpec, SyntheticTask,
};
pub use triples::{load_triples, save_triples, Triple, TripleStore};

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}
