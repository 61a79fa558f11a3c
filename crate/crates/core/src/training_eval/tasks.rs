//! Task datasets turned into model inputs, their losses and their evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::metrics::{filtered_rank, micro_f1, span_f1, Prf, RankingMetrics};
use crate::autograd::{Graph, NodeId};
use crate::data::{
    fit_image_count, load_image_list, tokenize, ImageSpec, ImageTensor, Payload, SequenceExample, SequenceTask,
    SyntheticLink, TripleStore,
};
use crate::error::{Error, Result};
use crate::model::{HybridModel, ModelInput, TaskHead};
use crate::numerics::{Matrix, ParamStore, Targets};
use crate::task_heads::{
    bio_spans, build_entity_modeling_input, build_head_query_input, build_relation_input, build_tagging_input,
    build_triple_query_input, crf_viterbi, BioTag, CrfParams, EntityRecord, EntityVocabulary, RelationLabelSet,
    TagSet, TextVocab,
};

/// Supervision attached to one input.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Single gold entity at the `[MASK]` row (cross-entropy over entities).
    Entity { mask: usize, entity: usize },
    /// Every listed entity is a positive at the `[MASK]` row (binary cross-entropy).
    Entities { mask: usize, positives: Vec<usize> },
    /// Relation class from `[CLS]`.
    Relation(usize),
    /// One tag index per token.
    Tags(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub target: Target,
}

/// Scalar loss node for `ex`, reading parameters from `store`.
pub fn example_loss(model: &HybridModel, g: &mut Graph, store: &ParamStore, ex: &Example) -> Result<NodeId> {
    let out = model.forward_with(g, store, &ex.input, false)?;
    match &ex.target {
        Target::Entity { mask, entity } => {
            let logits = model.entity_logits(g, store, out.text, *mask)?;
            g.classification_loss(logits, &Targets::Classes(vec![*entity]))
        }
        Target::Entities { mask, positives } => {
            let logits = model.entity_logits(g, store, out.text, *mask)?;
            let mut y = Matrix::zeros(1, g.value(logits).cols());
            for &p in positives {
                if p >= y.cols() {
                    return Err(Error::Target(format!("entity {p} out of range for {} entities", y.cols())));
                }
                y[(0, p)] = 1.0;
            }
            g.classification_loss(logits, &Targets::Multilabel(y))
        }
        Target::Relation(class) => {
            let logits = model.relation_logits(g, store, out.text)?;
            g.classification_loss(logits, &Targets::Classes(vec![*class]))
        }
        Target::Tags(gold) => {
            let em = model.emissions(g, store, out.text, gold.len())?;
            let trans = model
                .transitions
                .ok_or_else(|| Error::State("model has no tagging head".into()))?;
            let trans = g.param(store, trans);
            g.crf_nll(em, trans, gold, None)
        }
    }
}

/// Loss value of `ex` under `store`; the objective used for finite differences.
pub fn example_loss_value(model: &HybridModel, store: &ParamStore, ex: &Example) -> Result<f64> {
    let mut g = Graph::new();
    let loss = example_loss(model, &mut g, store, ex)?;
    Ok(g.scalar(loss))
}

/// Loss and analytic gradients (store order) of `ex`.
pub fn example_gradients(model: &HybridModel, ex: &Example) -> Result<(f64, Vec<Matrix>)> {
    let mut g = Graph::new();
    let loss = example_loss(model, &mut g, &model.store, ex)?;
    Ok((g.scalar(loss), g.backward(loss, &model.store)?))
}

/// Words the link templates may emit beyond entity descriptions and relations.
const TEMPLATE_WORDS: [&str; 4] = ["is", "the", "description", "of"];

/// Entities, relations and vocabulary of a link-prediction problem.
#[derive(Debug, Clone)]
pub struct LinkData {
    pub vocab: TextVocab,
    pub entities: EntityVocabulary,
    pub relations: RelationLabelSet,
    pub train: TripleStore,
}

impl LinkData {
    /// `others` are further splits whose relations must be known to the model.
    pub fn new(entities: EntityVocabulary, train: TripleStore, others: &[&TripleStore]) -> Result<Self> {
        let mut relation_names = Vec::new();
        for split in std::iter::once(&train).chain(others.iter().copied()) {
            split.check_ids(|e| entities.index_of(e).is_ok(), |_| true)?;
            relation_names.extend(split.relation_ids().into_iter().map(str::to_string));
        }
        if relation_names.is_empty() {
            return Err(Error::Input("no triples to learn relations from".into()));
        }
        let relations = RelationLabelSet::new(relation_names);
        let words = entities
            .records()
            .iter()
            .flat_map(|r| r.description.iter().cloned())
            .chain(relations.names().iter().flat_map(|r| tokenize(r)))
            .chain(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        let vocab = TextVocab::new(words);
        Ok(Self {
            vocab,
            entities,
            relations,
            train,
        })
    }

    pub fn from_synthetic(data: &SyntheticLink) -> Result<Self> {
        let records = data
            .entities
            .iter()
            .zip(&data.images)
            .map(|((id, name, desc), images)| EntityRecord {
                id: id.clone(),
                name: name.clone(),
                description: tokenize(desc),
                images: images.clone(),
            })
            .collect();
        Self::new(EntityVocabulary::new(records)?, data.triples.clone(), &[])
    }

    fn images(&self, entity: usize, count: usize, dims: (usize, usize, usize)) -> Vec<ImageTensor> {
        fit_image_count(self.entities.get(entity).images.clone(), count, dims)
    }

    fn image_dims(model: &HybridModel) -> (usize, usize, usize) {
        (model.cfg.image_h, model.cfg.image_w, model.cfg.image_c)
    }

    /// One masked description per entity, paired with the entity's own images.
    pub fn entity_examples(&self, model: &HybridModel) -> Result<Vec<Example>> {
        let dims = Self::image_dims(model);
        (0..self.entities.len())
            .map(|i| {
                let enc = build_entity_modeling_input(i, &self.entities, &self.vocab)?;
                Ok(Example {
                    input: ModelInput {
                        ids: enc.ids,
                        images: self.images(i, model.cfg.images, dims),
                    },
                    target: Target::Entity {
                        mask: enc.mask.expect("template has a mask"),
                        entity: i,
                    },
                })
            })
            .collect()
    }

    /// Tail query for `(head, relation)`: input plus `[MASK]` position.
    pub fn tail_query(&self, model: &HybridModel, head: &str, relation: &str) -> Result<(ModelInput, usize)> {
        let enc = build_triple_query_input(head, relation, &self.entities, &self.relations, &self.vocab)?;
        let h = self.entities.index_of(head)?;
        let images = self.images(h, model.cfg.images, Self::image_dims(model));
        Ok((ModelInput { ids: enc.ids, images }, enc.mask.expect("template has a mask")))
    }

    /// Head query for `(relation, tail)`.
    pub fn head_query(&self, model: &HybridModel, relation: &str, tail: &str) -> Result<(ModelInput, usize)> {
        let enc = build_head_query_input(tail, relation, &self.entities, &self.relations, &self.vocab)?;
        let t = self.entities.index_of(tail)?;
        let images = self.images(t, model.cfg.images, Self::image_dims(model));
        Ok((ModelInput { ids: enc.ids, images }, enc.mask.expect("template has a mask")))
    }

    fn indices<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Result<Vec<usize>> {
        ids.into_iter().map(|id| self.entities.index_of(id)).collect()
    }

    /// One multilabel example per distinct tail query `(h, r)` and head query
    /// `(r, t)` of the training split; every known training answer is positive.
    pub fn link_examples(&self, model: &HybridModel) -> Result<Vec<Example>> {
        let mut tails: BTreeMap<(&str, &str), ()> = BTreeMap::new();
        let mut heads: BTreeMap<(&str, &str), ()> = BTreeMap::new();
        for t in self.train.triples() {
            tails.insert((&t.head, &t.relation), ());
            heads.insert((&t.relation, &t.tail), ());
        }
        let mut out = Vec::with_capacity(tails.len() + heads.len());
        for &(h, r) in tails.keys() {
            let (input, mask) = self.tail_query(model, h, r)?;
            let positives = self.indices(self.train.known_tails(h, r).into_iter().flatten())?;
            out.push(Example {
                input,
                target: Target::Entities { mask, positives },
            });
        }
        for &(r, t) in heads.keys() {
            let (input, mask) = self.head_query(model, r, t)?;
            let positives = self.indices(self.train.known_heads(r, t).into_iter().flatten())?;
            out.push(Example {
                input,
                target: Target::Entities { mask, positives },
            });
        }
        Ok(out)
    }
}

/// Entity scores at the `[MASK]` row.
pub fn entity_scores(model: &HybridModel, input: &ModelInput, mask: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, input, false)?;
    let logits = model.entity_logits(&mut g, &model.store, out.text, mask)?;
    Ok(g.value(logits).row(0).to_vec())
}

/// Filtered ranks of every triple of `split`: the tail query rank followed by
/// the head query rank. Known answers in `filter` other than the gold one are
/// excluded from the competition.
pub fn link_ranks(model: &HybridModel, data: &LinkData, split: &TripleStore, filter: &TripleStore) -> Result<Vec<usize>> {
    let n = data.entities.len();
    let mut tail_cache: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
    let mut head_cache: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
    let mut ranks = Vec::with_capacity(2 * split.len());
    for t in split.triples() {
        let key = (t.head.as_str(), t.relation.as_str());
        if let std::collections::hash_map::Entry::Vacant(e) = tail_cache.entry(key) {
            let (input, mask) = data.tail_query(model, &t.head, &t.relation)?;
            e.insert(entity_scores(model, &input, mask)?);
        }
        let mut flt = vec![false; n];
        for id in filter.known_tails(&t.head, &t.relation).into_iter().flatten() {
            flt[data.entities.index_of(id)?] = true;
        }
        ranks.push(filtered_rank(&tail_cache[&key], data.entities.index_of(&t.tail)?, &flt)?);

        let key = (t.relation.as_str(), t.tail.as_str());
        if let std::collections::hash_map::Entry::Vacant(e) = head_cache.entry(key) {
            let (input, mask) = data.head_query(model, &t.relation, &t.tail)?;
            e.insert(entity_scores(model, &input, mask)?);
        }
        let mut flt = vec![false; n];
        for id in filter.known_heads(&t.relation, &t.tail).into_iter().flatten() {
            flt[data.entities.index_of(id)?] = true;
        }
        ranks.push(filtered_rank(&head_cache[&key], data.entities.index_of(&t.head)?, &flt)?);
    }
    Ok(ranks)
}

/// MR and Hits@K over head and tail queries of `split`.
pub fn evaluate_ranking(model: &HybridModel, data: &LinkData, split: &TripleStore, filter: &TripleStore) -> Result<RankingMetrics> {
    if split.is_empty() {
        return Err(Error::Input("evaluation split has no triples".into()));
    }
    RankingMetrics::from_ranks(&link_ranks(model, data, split, filter)?)
}

/// Relation names treated as "no relation" when scoring RE.
const NULL_RELATIONS: [&str; 3] = ["None", "none", "NA"];

/// Vocabulary and label inventories for an RE or NER corpus.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub task: SequenceTask,
    pub vocab: TextVocab,
    pub relations: RelationLabelSet,
    pub tags: TagSet,
}

impl SequenceData {
    /// Inventories covering every corpus in `corpora`.
    pub fn new(task: SequenceTask, corpora: &[&[SequenceExample]]) -> Result<Self> {
        let all = || corpora.iter().flat_map(|c| c.iter());
        if all().next().is_none() {
            return Err(Error::Input("empty corpus".into()));
        }
        let vocab = TextVocab::new(all().flat_map(|e| e.tokens.iter().cloned()));
        let relations = RelationLabelSet::new(all().filter_map(|e| e.relation().map(str::to_string)));
        let types: Vec<String> = all()
            .filter_map(|e| e.tags())
            .flatten()
            .filter_map(|t| t.entity_type().map(str::to_string))
            .collect();
        let tags = TagSet::from_types(types);
        Ok(Self {
            task,
            vocab,
            relations,
            tags,
        })
    }

    pub fn head(&self) -> TaskHead {
        match self.task {
            SequenceTask::Re => TaskHead::Relation {
                classes: self.relations.len(),
            },
            SequenceTask::Ner => TaskHead::Tagging { tags: self.tags.clone() },
        }
    }

    pub fn null_relation(&self) -> Option<usize> {
        NULL_RELATIONS.iter().find_map(|n| self.relations.index_of(n).ok())
    }

    /// Inputs and targets; `images[i]` belongs to `corpus[i]`.
    pub fn examples(&self, corpus: &[SequenceExample], images: &[Vec<ImageTensor>]) -> Result<Vec<Example>> {
        if images.len() != corpus.len() {
            return Err(Error::Input(format!("{} image lists for {} examples", images.len(), corpus.len())));
        }
        corpus
            .iter()
            .zip(images)
            .map(|(ex, imgs)| {
                let (ids, target) = match &ex.payload {
                    Payload::Re { head, tail, relation } => {
                        if self.task != SequenceTask::Re {
                            return Err(Error::Input("relation example in a tagging corpus".into()));
                        }
                        let enc = build_relation_input(&ex.tokens, *head, *tail, &self.vocab)?;
                        (enc.ids, Target::Relation(self.relations.index_of(relation)?))
                    }
                    Payload::Ner { tags } => {
                        if self.task != SequenceTask::Ner {
                            return Err(Error::Input("tagging example in a relation corpus".into()));
                        }
                        let enc = build_tagging_input(&ex.tokens, &self.vocab);
                        (enc.ids, Target::Tags(self.tags.encode(tags)?))
                    }
                };
                Ok(Example {
                    input: ModelInput {
                        ids,
                        images: imgs.clone(),
                    },
                    target,
                })
            })
            .collect()
    }
}

/// Loads each example's image relative to `dir`; missing files become zero images.
pub fn load_corpus_images(corpus: &[SequenceExample], dir: &Path, spec: &ImageSpec) -> Result<Vec<Vec<ImageTensor>>> {
    let mut warnings = Vec::new();
    let out = corpus
        .iter()
        .map(|ex| {
            let paths: Vec<&str> = if ex.image.is_empty() { vec![] } else { vec![ex.image.as_str()] };
            load_image_list(&paths, dir, spec, &mut warnings)
        })
        .collect::<Result<Vec<_>>>()?;
    if !warnings.is_empty() {
        log::warn!("{} corpus images missing; first: {}", warnings.len(), warnings[0]);
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

pub fn predict_relation(model: &HybridModel, input: &ModelInput) -> Result<usize> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, input, false)?;
    let logits = model.relation_logits(&mut g, &model.store, out.text)?;
    Ok(argmax(g.value(logits).row(0)))
}

/// Viterbi tags for the `n` tokens of `input`.
pub fn predict_tags(model: &HybridModel, input: &ModelInput, n: usize) -> Result<Vec<usize>> {
    let tags = model
        .tags()
        .ok_or_else(|| Error::State("model has no tagging head".into()))?
        .clone();
    let trans = model.transitions.expect("tagging model has transitions");
    let mut g = Graph::new();
    let out = model.forward(&mut g, input, false)?;
    let em = model.emissions(&mut g, &model.store, out.text, n)?;
    let params = CrfParams {
        tags,
        transitions: model.store.value(trans).clone(),
        hard_constraints: false,
    };
    crf_viterbi(g.value(em), &params)
}

/// Micro scores for RE, exact-match span scores for NER.
pub fn evaluate_sequence(model: &HybridModel, data: &SequenceData, examples: &[Example]) -> Result<Prf> {
    match data.task {
        SequenceTask::Re => {
            let mut pred = Vec::with_capacity(examples.len());
            let mut gold = Vec::with_capacity(examples.len());
            for ex in examples {
                let Target::Relation(c) = ex.target else {
                    return Err(Error::Input("expected relation targets".into()));
                };
                pred.push(predict_relation(model, &ex.input)?);
                gold.push(c);
            }
            micro_f1(&pred, &gold, data.null_relation())
        }
        SequenceTask::Ner => {
            let to_spans = |idx: &[usize]| {
                let tags: Vec<BioTag> = idx.iter().map(|&i| data.tags.tag(i).clone()).collect();
                bio_spans(&tags)
            };
            let mut pred = Vec::with_capacity(examples.len());
            let mut gold = Vec::with_capacity(examples.len());
            for ex in examples {
                let Target::Tags(t) = &ex.target else {
                    return Err(Error::Input("expected tag targets".into()));
                };
                pred.push(to_spans(&predict_tags(model, &ex.input, t.len())?));
                gold.push(to_spans(t));
            }
            span_f1(&pred, &gold)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_link, synthetic_re, SyntheticSpec, Triple};
    use crate::encoders::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            d_m: 16,
            text_layers: 1,
            vision_layers: 1,
            fusion_layers: 1,
            ..ModelConfig::default()
        }
    }

    fn link() -> (LinkData, HybridModel) {
        let spec = SyntheticSpec {
            entities: 6,
            relations: 2,
            triples: 10,
            ..SyntheticSpec::default()
        };
        let data = LinkData::from_synthetic(&synthetic_link(1, &spec).unwrap()).unwrap();
        let model = HybridModel::new(cfg(), data.vocab.len(), data.entities.len(), TaskHead::Link, 0).unwrap();
        (data, model)
    }

    #[test]
    fn link_targets_cover_all_known_answers() {
        let (data, model) = link();
        let ex = data.link_examples(&model).unwrap();
        let (mut tails, mut heads) = (0, 0);
        for t in data.train.triples() {
            let (input, _) = data.tail_query(&model, &t.head, &t.relation).unwrap();
            let hit = ex.iter().find(|e| e.input == input).unwrap();
            let Target::Entities { positives, .. } = &hit.target else { panic!() };
            assert!(positives.contains(&data.entities.index_of(&t.tail).unwrap()));
            assert_eq!(positives.len(), data.train.known_tails(&t.head, &t.relation).unwrap().len());
            tails += 1;
            let (input, _) = data.head_query(&model, &t.relation, &t.tail).unwrap();
            let hit = ex.iter().find(|e| e.input == input).unwrap();
            let Target::Entities { positives, .. } = &hit.target else { panic!() };
            assert!(positives.contains(&data.entities.index_of(&t.head).unwrap()));
            heads += 1;
        }
        assert_eq!((tails, heads), (10, 10));
        assert!(ex.len() <= 20);
    }

    #[test]
    fn all_positive_target_and_entity_examples() {
        let (data, model) = link();
        let em = data.entity_examples(&model).unwrap();
        assert_eq!(em.len(), 6);
        let Target::Entity { mask, entity } = em[3].target else { panic!() };
        assert_eq!(entity, 3);
        assert_eq!(data.vocab.word(em[3].input.ids[mask]), Some("[MASK]"));
        let ex = Example {
            input: em[0].input.clone(),
            target: Target::Entities {
                mask,
                positives: (0..6).collect(),
            },
        };
        assert!(example_loss_value(&model, &model.store, &ex).unwrap() > 0.0);
    }

    #[test]
    fn ranking_is_filtered_and_rejects_empty_split() {
        let (data, model) = link();
        let ranks = link_ranks(&model, &data, &data.train, &data.train).unwrap();
        assert_eq!(ranks.len(), 20);
        let n = data.entities.len();
        for t in data.train.triples() {
            // brute force with the same filter
            let (input, mask) = data.tail_query(&model, &t.head, &t.relation).unwrap();
            let s = entity_scores(&model, &input, mask).unwrap();
            let gold = data.entities.index_of(&t.tail).unwrap();
            let known = data.train.known_tails(&t.head, &t.relation).unwrap();
            let better = (0..n)
                .filter(|&j| j != gold && !known.contains(data.entities.get(j).id.as_str()) && s[j] >= s[gold])
                .count();
            assert!(ranks.contains(&(better + 1)));
        }
        assert!(evaluate_ranking(&model, &data, &TripleStore::new(), &data.train).is_err());
    }

    #[test]
    fn unknown_ids_rejected() {
        let (data, _) = link();
        let bad = TripleStore::from_triples([Triple::new("e0", "r0", "zz")]);
        assert!(LinkData::new(data.entities.clone(), data.train.clone(), &[&bad]).is_err());
    }

    #[test]
    fn sequence_examples_and_one_class_corpus() {
        let spec = SyntheticSpec {
            classes: 1,
            examples: 4,
            ..SyntheticSpec::default()
        };
        let corpus = synthetic_re(0, &spec).unwrap();
        let data = SequenceData::new(SequenceTask::Re, &[&corpus]).unwrap();
        let images = vec![vec![ImageTensor::zeros(8, 8, 1); 2]; corpus.len()];
        let ex = data.examples(&corpus, &images).unwrap();
        let model = HybridModel::new(cfg(), data.vocab.len(), 0, data.head(), 0).unwrap();
        // one class: the loss is exactly zero and every prediction is right
        assert_eq!(example_loss_value(&model, &model.store, &ex[0]).unwrap(), 0.0);
        assert_eq!(evaluate_sequence(&model, &data, &ex).unwrap().f1, 1.0);
        assert!(data.examples(&corpus, &images[..1]).is_err());
        let ner = SequenceData::new(SequenceTask::Ner, &[&corpus]).unwrap();
        assert!(ner.examples(&corpus, &images).is_err());
    }
}
