//! Seeded generators for small link-prediction, RE and NER datasets with
//! planted, learnable patterns.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{save_sequence_corpus, Payload, SequenceExample};
use super::entities::ImageSpec;
use super::image::ImageTensor;
use super::triples::{save_triples, Triple, TripleStore};
use crate::error::{Error, Result};
use crate::task_heads::BioTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    Link,
    Re,
    Ner,
}

impl SyntheticTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "link" => Ok(Self::Link),
            "re" => Ok(Self::Re),
            "ner" => Ok(Self::Ner),
            other => Err(Error::Config(format!("unknown task `{other}` (expected link, re or ner)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    /// Relation classes (RE) or entity types (NER).
    pub classes: usize,
    pub examples: usize,
    pub image: ImageSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            entities: 20,
            relations: 5,
            triples: 100,
            classes: 4,
            examples: 80,
            image: ImageSpec {
                height: 8,
                width: 8,
                channels: 1,
                count: 2,
            },
        }
    }
}

/// In-memory link-prediction dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLink {
    /// `(id, name, description)` per entity.
    pub entities: Vec<(String, String, String)>,
    /// Images per entity, `image.count` each.
    pub images: Vec<Vec<ImageTensor>>,
    pub triples: TripleStore,
}

pub fn entity_id(i: usize) -> String {
    format!("e{i}")
}

pub fn relation_id(r: usize) -> String {
    format!("r{r}")
}

/// Smooth per-key pattern plus a little seeded noise.
fn patterned_image(spec: &ImageSpec, key: usize, variant: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (h, w, c) = spec.dims();
    let freq = 0.3 + 0.17 * key as f64;
    let phase = 0.5 * variant as f64;
    let data = (0..h * w * c)
        .map(|i| (freq * (i as f64 + 1.0) + phase).sin() + 0.05 * rng.random_range(-1.0..1.0))
        .collect();
    ImageTensor::from_vec(h, w, c, data).expect("image size")
}

/// Tails follow `t = (h + k_r + j·stride) mod E`, where `j` counts how many
/// times the pair `(h, r)` has been used.
pub fn synthetic_link(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticLink> {
    let (e, r) = (spec.entities, spec.relations);
    if e < 2 || r == 0 {
        return Err(Error::Config("link generator needs at least 2 entities and 1 relation".into()));
    }
    if spec.triples > e * r * (e - 1) {
        return Err(Error::Config(format!(
            "{} triples requested but only {} distinct tails exist",
            spec.triples,
            e * r * (e - 1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<usize> = (0..r).map(|k| 1 + (k * 7) % (e - 1)).collect();
    let stride = if e > 3 { 3 } else { 1 };

    let mut pairs: Vec<(usize, usize)> = (0..e).flat_map(|h| (0..r).map(move |k| (h, k))).collect();
    pairs.shuffle(&mut rng);
    let mut store = TripleStore::new();
    let mut round = 0;
    while store.len() < spec.triples {
        for &(h, k) in &pairs {
            if store.len() == spec.triples {
                break;
            }
            let mut t = (h + offsets[k] + round * stride) % e;
            while t == h || store.contains(&Triple::new(entity_id(h), relation_id(k), entity_id(t))) {
                t = (t + 1) % e;
            }
            store.insert(Triple::new(entity_id(h), relation_id(k), entity_id(t)));
        }
        round += 1;
    }

    let entities = (0..e)
        .map(|i| (entity_id(i), format!("Entity {i}"), format!("group{} item{i}", i % 4)))
        .collect();
    let images = (0..e)
        .map(|i| (0..spec.image.count).map(|v| patterned_image(&spec.image, i, v, &mut rng)).collect())
        .collect();
    Ok(SyntheticLink {
        entities,
        images,
        triples: store,
    })
}

/// Relation label recovered from the trigger word between the two spans.
pub fn re_planted_rule(ex: &SequenceExample) -> Option<String> {
    ex.tokens
        .iter()
        .find_map(|t| t.strip_prefix("trig").map(|c| format!("rel{c}")))
}

/// Entity type recovered from a token's lexicon prefix.
pub fn ner_planted_rule(token: &str) -> Option<String> {
    let (prefix, _) = token.split_once("name").or_else(|| token.split_once("tail"))?;
    Some(prefix.to_uppercase())
}

fn ner_type_names(n: usize) -> Vec<String> {
    let base = ["PER", "LOC", "ORG", "MISC"];
    (0..n)
        .map(|i| base.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("T{i}")))
        .collect()
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    format!("w{}", rng.random_range(0..24))
}

/// Sentences `fill* H fill* trigC fill* T fill*` (or tail first); the
/// trigger word fixes the class.
pub fn synthetic_re(seed: u64, spec: &SyntheticSpec) -> Result<Vec<SequenceExample>> {
    if spec.classes == 0 {
        return Err(Error::Config("RE generator needs at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.examples);
    for i in 0..spec.examples {
        let class = i % spec.classes;
        let mut toks: Vec<String> = Vec::new();
        for _ in 0..rng.random_range(0..3) {
            toks.push(filler(&mut rng));
        }
        let first = (toks.len(), toks.len() + 1);
        toks.push(format!("ent{}", rng.random_range(0..10)));
        for _ in 0..rng.random_range(0..2) {
            toks.push(filler(&mut rng));
        }
        toks.push(format!("trig{class}"));
        for _ in 0..rng.random_range(0..2) {
            toks.push(filler(&mut rng));
        }
        let second = (toks.len(), toks.len() + 1);
        toks.push(format!("ent{}", rng.random_range(0..10)));
        for _ in 0..rng.random_range(0..3) {
            toks.push(filler(&mut rng));
        }
        let (head, tail) = if rng.random_bool(0.5) { (first, second) } else { (second, first) };
        out.push(SequenceExample {
            tokens: toks,
            payload: Payload::Re {
                head,
                tail,
                relation: format!("rel{class}"),
            },
            image: format!("images/{i}.mkgi"),
        });
    }
    Ok(out)
}

/// Sentences of filler words with one or two typed mentions drawn from
/// per-type lexicons (`pername3`, `pertail1`, ...).
pub fn synthetic_ner(seed: u64, spec: &SyntheticSpec) -> Result<Vec<SequenceExample>> {
    if spec.classes == 0 {
        return Err(Error::Config("NER generator needs at least one entity type".into()));
    }
    let types = ner_type_names(spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.examples);
    for i in 0..spec.examples {
        let mut toks = Vec::new();
        let mut tags = Vec::new();
        let mentions = 1 + rng.random_range(0..2);
        for m in 0..mentions {
            for _ in 0..rng.random_range(if m == 0 { 0 } else { 1 }..3) {
                toks.push(filler(&mut rng));
                tags.push(BioTag::Outside);
            }
            let ty = if m == 0 { i % types.len() } else { rng.random_range(0..types.len()) };
            let name = &types[ty];
            let lower = name.to_lowercase();
            toks.push(format!("{lower}name{}", rng.random_range(0..5)));
            tags.push(BioTag::Begin(name.clone()));
            if rng.random_bool(0.4) {
                toks.push(format!("{lower}tail{}", rng.random_range(0..3)));
                tags.push(BioTag::Inside(name.clone()));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            toks.push(filler(&mut rng));
            tags.push(BioTag::Outside);
        }
        out.push(SequenceExample {
            tokens: toks,
            payload: Payload::Ner { tags },
            image: format!("images/{i}.mkgi"),
        });
    }
    Ok(out)
}

/// Writes a generated dataset under `dir` and returns the files written.
///
/// Link: `entities.tsv`, `train.tsv`, `images/`. RE/NER: `train.tsv`, `images/`.
pub fn generate_synthetic(task: SyntheticTask, seed: u64, spec: &SyntheticSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut written = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    match task {
        SyntheticTask::Link => {
            let data = synthetic_link(seed, spec)?;
            let mut lines = String::new();
            for ((id, name, desc), imgs) in data.entities.iter().zip(&data.images) {
                let mut names = Vec::new();
                for (v, img) in imgs.iter().enumerate() {
                    let file = format!("{id}_{v}.mkgi");
                    let path = img_dir.join(&file);
                    img.save(&path)?;
                    written.push(path);
                    names.push(format!("images/{file}"));
                }
                lines.push_str(&format!("{id}\t{name}\t{desc}\t{}\n", names.join(",")));
            }
            let ents = dir.join("entities.tsv");
            fs::write(&ents, lines).map_err(|e| Error::io(&ents, e))?;
            written.push(ents);
            let train = dir.join("train.tsv");
            save_triples(&data.triples, &train)?;
            written.push(train);
        }
        SyntheticTask::Re | SyntheticTask::Ner => {
            let examples = if task == SyntheticTask::Re {
                synthetic_re(seed, spec)?
            } else {
                synthetic_ner(seed, spec)?
            };
            for ex in &examples {
                let key = ex.class_label().bytes().map(usize::from).sum::<usize>() % 11;
                let path = dir.join(&ex.image);
                patterned_image(&spec.image, key, 0, &mut rng).save(&path)?;
                written.push(path);
            }
            let train = dir.join("train.tsv");
            save_sequence_corpus(&examples, &train)?;
            written.push(train);
        }
    }
    Ok(written)
}
