use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optimizer::{Adam, AdamConfig};
use super::tasks::{example_loss, Example, LinkData};
use crate::autograd::Graph;
use crate::encoders::Ablation;
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::numerics::{Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    Link,
    Re,
    Ner,
}

impl TrainTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "link" => Ok(Self::Link),
            "re" => Ok(Self::Re),
            "ner" => Ok(Self::Ner),
            other => Err(Error::Config(format!("unknown task `{other}` (expected link, re or ner)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Link => "link",
            Self::Re => "re",
            Self::Ner => "ner",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TrainTask,
    /// Epochs of the task phase (triple phase for link prediction).
    pub epochs: usize,
    /// Epochs of the entity-modeling phase.
    pub entity_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub entity_phase: bool,
    pub triple_phase: bool,
    /// Parameter-name prefixes kept frozen during the task phase.
    pub freeze: Vec<String>,
    pub ablation: Ablation,
    pub k_shot: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TrainTask::Link,
            epochs: 20,
            entity_epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            seed: 42,
            entity_phase: true,
            triple_phase: true,
            freeze: Vec::new(),
            ablation: Ablation::None,
            k_shot: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.k_shot == Some(0) {
            return Err(Error::Config("k-shot must be at least 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Freezes every parameter whose name starts with one of `prefixes`.
pub fn apply_freeze(store: &mut ParamStore, prefixes: &[String]) -> Result<()> {
    for prefix in prefixes {
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix.as_str())).map(|(id, _)| id).collect();
        if ids.is_empty() {
            return Err(Error::Config(format!("freeze prefix `{prefix}` matches no parameter")));
        }
        for id in ids {
            store.set_frozen(id, true);
        }
    }
    Ok(())
}

/// Called after every epoch with `(epoch, mean loss, model)`; `Break` stops training.
pub type EpochHook<'a> = dyn FnMut(usize, f64, &HybridModel) -> Result<ControlFlow<()>> + 'a;

/// Mini-batch training over `examples`. Gradients are averaged within a
/// batch; the order is reshuffled every epoch from `seed`. Returns the mean
/// loss of every completed epoch.
pub fn train_examples(
    model: &mut HybridModel,
    examples: &[Example],
    epochs: usize,
    batch_size: usize,
    opt: &mut Adam,
    seed: u64,
    on_epoch: &mut EpochHook<'_>,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut acc: Vec<Matrix> = model
        .store
        .iter()
        .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
        .collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            acc.iter_mut().for_each(|m| m.data_mut().fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut g = Graph::new();
                let loss = example_loss(model, &mut g, &model.store, &examples[i])?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
                }
                total += value;
                for (a, grad) in acc.iter_mut().zip(g.backward(loss, &model.store)?) {
                    for (x, y) in a.data_mut().iter_mut().zip(grad.data()) {
                        *x += scale * y;
                    }
                }
            }
            opt.step(&mut model.store, &acc)?;
        }
        let mean = total / examples.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
        if on_epoch(epoch, mean, model)?.is_break() {
            break;
        }
    }
    Ok(history)
}

/// Phase one: only the entity embedding rows learn, from masked descriptions.
pub fn train_entity_modeling(
    model: &mut HybridModel,
    data: &LinkData,
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let examples = data.entity_examples(model)?;
    model.store.freeze_all();
    let entities = model.text_embedding.entities;
    model.store.set_frozen(entities, false);
    let mut opt = Adam::new(&model.store, cfg.adam());
    train_examples(model, &examples, cfg.entity_epochs, cfg.batch_size, &mut opt, cfg.seed, on_epoch)
}

/// Phase two: multilabel head and tail queries with every parameter
/// trainable except those matched by `cfg.freeze`.
pub fn train_link_prediction(
    model: &mut HybridModel,
    data: &LinkData,
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let examples = data.link_examples(model)?;
    model.store.unfreeze_all();
    apply_freeze(&mut model.store, &cfg.freeze)?;
    let mut opt = Adam::new(&model.store, cfg.adam());
    train_examples(model, &examples, cfg.epochs, cfg.batch_size, &mut opt, cfg.seed.wrapping_add(1), on_epoch)
}

/// Fine-tunes the whole model (minus `cfg.freeze`) on RE or NER examples.
pub fn train_classifier_head(
    model: &mut HybridModel,
    examples: &[Example],
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    model.store.unfreeze_all();
    apply_freeze(&mut model.store, &cfg.freeze)?;
    let mut opt = Adam::new(&model.store, cfg.adam());
    train_examples(model, examples, cfg.epochs, cfg.batch_size, &mut opt, cfg.seed, on_epoch)
}

/// A hook that never stops training.
pub fn no_hook(_: usize, _: f64, _: &HybridModel) -> Result<ControlFlow<()>> {
    Ok(ControlFlow::Continue(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_link, SyntheticSpec};
    use crate::encoders::ModelConfig;
    use crate::model::TaskHead;
    use crate::task_heads::{EntityRecord, EntityVocabulary};
    use crate::data::{Triple, TripleStore};

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

    fn link(entities: usize) -> (LinkData, HybridModel) {
        let spec = SyntheticSpec {
            entities,
            relations: 2,
            triples: 8,
            ..SyntheticSpec::default()
        };
        let data = LinkData::from_synthetic(&synthetic_link(3, &spec).unwrap()).unwrap();
        let model = HybridModel::new(cfg(), data.vocab.len(), data.entities.len(), TaskHead::Link, 0).unwrap();
        (data, model)
    }

    #[test]
    fn entity_phase_changes_only_entity_rows() {
        let (data, mut model) = link(6);
        let before = model.store.clone();
        let tc = TrainConfig {
            entity_epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train_entity_modeling(&mut model, &data, &tc, &mut no_hook).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(before.iter()) {
            if a.name == "embed.entities" {
                assert_ne!(a.value, b.value);
            } else {
                assert_eq!(a.value.data(), b.value.data(), "{} changed", a.name);
            }
        }
    }

    #[test]
    fn single_entity_loss_is_zero() {
        let rec = EntityRecord {
            id: "a".into(),
            name: "A".into(),
            description: vec!["only".into()],
            images: vec![],
        };
        let store = TripleStore::from_triples([Triple::new("a", "r", "a")]);
        let data = LinkData::new(EntityVocabulary::new(vec![rec]).unwrap(), store, &[]).unwrap();
        let mut model = HybridModel::new(cfg(), data.vocab.len(), 1, TaskHead::Link, 0).unwrap();
        let tc = TrainConfig {
            entity_epochs: 1,
            ..TrainConfig::default()
        };
        let losses = train_entity_modeling(&mut model, &data, &tc, &mut no_hook).unwrap();
        assert_eq!(losses, vec![0.0]);
    }

    #[test]
    fn link_phase_is_deterministic_and_respects_freeze_list() {
        let run = || {
            let (data, mut model) = link(6);
            let tc = TrainConfig {
                epochs: 2,
                freeze: vec!["vision.".into()],
                ..TrainConfig::default()
            };
            let losses = train_link_prediction(&mut model, &data, &tc, &mut no_hook).unwrap();
            (losses, model.store)
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
        let (_, fresh) = link(6);
        for ((_, a), (_, b)) in s1.iter().zip(fresh.store.iter()) {
            if a.name.starts_with("vision.") {
                assert_eq!(a.value.data(), b.value.data());
            }
        }
    }

    #[test]
    fn hook_can_stop_early_and_config_checks() {
        let (data, mut model) = link(6);
        let tc = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let mut hook = |e: usize, _: f64, _: &HybridModel| {
            seen = e;
            Ok(if e == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
        };
        assert_eq!(train_link_prediction(&mut model, &data, &tc, &mut hook).unwrap().len(), 2);
        assert_eq!(seen, 2);
        let bad = TrainConfig { lr: 0.0, ..tc.clone() };
        assert!(train_link_prediction(&mut model, &data, &bad, &mut no_hook).is_err());
        let bad = TrainConfig {
            freeze: vec!["nope".into()],
            ..tc
        };
        assert!(train_link_prediction(&mut model, &data, &bad, &mut no_hook).is_err());
        assert!(TrainTask::parse("qa").is_err());
    }
}
