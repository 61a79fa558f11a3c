use std::ops::ControlFlow;

use hyfuse_core::data::{synthetic_link, SyntheticSpec};
use hyfuse_core::encoders::{Ablation, ModelConfig};
use hyfuse_core::model::{HybridModel, TaskHead};
use hyfuse_core::training_eval::{
    evaluate_ranking, no_hook, train_entity_modeling, train_link_prediction, LinkData, TrainConfig,
};

fn small() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        d_m: 32,
        text_layers: 1,
        vision_layers: 1,
        fusion_layers: 1,
        ..ModelConfig::default()
    }
}

fn link_data() -> LinkData {
    LinkData::from_synthetic(&synthetic_link(42, &SyntheticSpec::default()).unwrap()).unwrap()
}

#[test]
fn entity_modeling_loss_falls_over_50_epochs() {
    let data = link_data();
    let mut model = HybridModel::new(small(), data.vocab.len(), data.entities.len(), TaskHead::Link, 1).unwrap();
    let cfg = TrainConfig {
        entity_epochs: 50,
        ..TrainConfig::default()
    };
    let history = train_entity_modeling(&mut model, &data, &cfg, &mut no_hook).unwrap();
    assert_eq!(history.len(), 50);
    assert!(history[49] < history[0], "{} -> {}", history[0], history[49]);
}

fn short_run(seed: u64, ablation: Ablation) -> (Vec<f64>, f64) {
    let data = link_data();
    let cfg = ModelConfig { ablation, ..small() };
    let mut model = HybridModel::new(cfg, data.vocab.len(), data.entities.len(), TaskHead::Link, seed).unwrap();
    let train = TrainConfig {
        entity_epochs: 3,
        epochs: 4,
        lr: 5e-3,
        seed,
        ablation,
        ..TrainConfig::default()
    };
    train_entity_modeling(&mut model, &data, &train, &mut no_hook).unwrap();
    let mut seen = 0;
    let history = train_link_prediction(&mut model, &data, &train, &mut |epoch, loss, _| {
        seen = epoch;
        assert!(loss.is_finite());
        Ok(ControlFlow::Continue(()))
    })
    .unwrap();
    assert_eq!(seen, 4);
    let m = evaluate_ranking(&model, &data, &data.train, &data.train).unwrap();
    assert_eq!(m.queries, 2 * data.train.len());
    assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
    assert!(m.mr >= 1.0 && m.mr <= data.entities.len() as f64);
    (history, m.mrr)
}

#[test]
fn two_phase_training_is_deterministic_per_seed() {
    let a = short_run(7, Ablation::None);
    assert_eq!(a, short_run(7, Ablation::None));
    assert_ne!(a.0, short_run(8, Ablation::None).0);
}

#[test]
fn every_ablation_trains_end_to_end() {
    for ab in [Ablation::NoPgi, Ablation::NoCaf, Ablation::Independent] {
        let (history, _) = short_run(3, ab);
        assert!(history[3] < history[0], "{ab:?}: {history:?}");
    }
}
