//! The full dual-stream network: embeddings, unimodal stacks, fused layers
//! and the task-specific output parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::data::ImageTensor;
use crate::encoders::{
    t_encoder_forward, v_encoder_forward, BlockWeights, ModelConfig, PatchEmbedding, TextEmbedding,
};
use crate::error::{shape_err, Error, Result};
use crate::m_encoder::{m_encoder_forward, FusionOptions, FusionTrace, MEncoderLayer};
use crate::numerics::{Matrix, ParamId, ParamStore};
use crate::task_heads::TagSet;

/// Which output parameters the model carries.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    /// Scores entity rows at the `[MASK]` position.
    Link,
    /// `d × classes` classifier on `[CLS]`.
    Relation { classes: usize },
    /// Emission projection plus CRF transitions.
    Tagging { tags: TagSet },
}

/// One forward input: token ids and the `images` images of the example.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub images: Vec<ImageTensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub text: NodeId,
    pub visual: NodeId,
    pub trace: Option<FusionTrace>,
}

#[derive(Debug, Clone)]
pub struct HybridModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub text_embedding: TextEmbedding,
    pub patch_embedding: PatchEmbedding,
    pub text_blocks: Vec<BlockWeights>,
    pub vision_blocks: Vec<BlockWeights>,
    pub fusion: Vec<MEncoderLayer>,
    pub head: TaskHead,
    pub relation_w: Option<ParamId>,
    pub emission_w: Option<ParamId>,
    pub transitions: Option<ParamId>,
}

impl HybridModel {
    /// Builds and randomly initialises a model; identical arguments give identical weights.
    pub fn new(cfg: ModelConfig, base_vocab: usize, entity_count: usize, head: TaskHead, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if base_vocab == 0 {
            return Err(Error::Config("empty text vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text_embedding = TextEmbedding::new(&mut store, &cfg, base_vocab, entity_count, &mut rng);
        let patch_embedding = PatchEmbedding::new(&mut store, &cfg, &mut rng);
        let text_blocks = (0..cfg.text_stack_depth())
            .map(|i| BlockWeights::new(&mut store, &format!("text.{i}"), &cfg, &mut rng))
            .collect();
        let vision_blocks = (0..cfg.vision_stack_depth())
            .map(|i| BlockWeights::new(&mut store, &format!("vision.{i}"), &cfg, &mut rng))
            .collect();
        let fusion = (0..cfg.fusion_layers)
            .map(|i| MEncoderLayer::new(&mut store, &format!("fusion.{i}"), &cfg, &mut rng))
            .collect();
        let (mut relation_w, mut emission_w, mut transitions) = (None, None, None);
        match &head {
            TaskHead::Link => {}
            TaskHead::Relation { classes } => {
                if *classes == 0 {
                    return Err(Error::Config("relation head needs at least one class".into()));
                }
                relation_w = Some(store.add_normal("head.relation", cfg.d, *classes, cfg.init_std, &mut rng));
            }
            TaskHead::Tagging { tags } => {
                emission_w = Some(store.add_normal("head.emission", cfg.d, tags.len(), cfg.init_std, &mut rng));
                transitions = Some(store.add("head.transitions", Matrix::zeros(tags.len() + 2, tags.len() + 2)));
            }
        }
        Ok(Self {
            cfg,
            store,
            text_embedding,
            patch_embedding,
            text_blocks,
            vision_blocks,
            fusion,
            head,
            relation_w,
            emission_w,
            transitions,
        })
    }

    pub fn fusion_options(&self) -> FusionOptions {
        FusionOptions::new(self.cfg.ablation, self.cfg.ln_eps)
    }

    pub fn entity_table(&self) -> &Matrix {
        self.store.value(self.text_embedding.entities)
    }

    pub fn tags(&self) -> Option<&TagSet> {
        match &self.head {
            TaskHead::Tagging { tags } => Some(tags),
            _ => None,
        }
    }

    /// Embeds both modalities and runs the unimodal stacks and fused layers.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput, trace: bool) -> Result<ForwardOutput> {
        self.forward_with(g, &self.store, input, trace)
    }

    /// As [`forward`](Self::forward) but reading parameters from `store`,
    /// which must share this model's layout.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, input: &ModelInput, trace: bool) -> Result<ForwardOutput> {
        let eps = self.cfg.ln_eps;
        let x_t = self.text_embedding.embed_text(g, store, &input.ids)?;
        let x_v = self.patch_embedding.embed_patches(g, store, &input.images)?;
        let h_t = t_encoder_forward(g, store, x_t, &self.text_blocks, eps, None)?;
        let h_v = v_encoder_forward(g, store, x_v, &self.vision_blocks, eps)?;
        let out = m_encoder_forward(g, store, h_t, h_v, &self.fusion, &self.fusion_options(), trace)?;
        Ok(ForwardOutput {
            text: out.text,
            visual: out.visual,
            trace: out.trace,
        })
    }

    /// `1 × |E|` inner products of the state at `mask` with the entity rows.
    pub fn entity_logits(&self, g: &mut Graph, store: &ParamStore, text: NodeId, mask: usize) -> Result<NodeId> {
        if mask >= g.value(text).rows() {
            return Err(shape_err!("mask position {mask} outside {} rows", g.value(text).rows()));
        }
        let h = g.gather_rows(text, &[mask])?;
        let table = g.param(store, self.text_embedding.entities);
        g.matmul_t(h, table)
    }

    /// `1 × classes` logits from the `[CLS]` row.
    pub fn relation_logits(&self, g: &mut Graph, store: &ParamStore, text: NodeId) -> Result<NodeId> {
        let w = self.relation_w.ok_or_else(|| Error::State("model has no relation head".into()))?;
        let h = g.gather_rows(text, &[0])?;
        let w = g.param(store, w);
        g.matmul(h, w)
    }

    /// `n × |Y|` emissions for the `n` tokens following `[CLS]`.
    pub fn emissions(&self, g: &mut Graph, store: &ParamStore, text: NodeId, n: usize) -> Result<NodeId> {
        let w = self.emission_w.ok_or_else(|| Error::State("model has no tagging head".into()))?;
        if n + 1 > g.value(text).rows() {
            return Err(shape_err!("{n} tokens but only {} rows", g.value(text).rows()));
        }
        let rows: Vec<usize> = (1..=n).collect();
        let h = g.gather_rows(text, &rows)?;
        let w = g.param(store, w);
        g.matmul(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Ablation;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            d_m: 16,
            text_layers: 1,
            vision_layers: 1,
            fusion_layers: 1,
            image_h: 4,
            image_w: 4,
            image_c: 1,
            patch: 2,
            images: 2,
            max_len: 16,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    fn input() -> ModelInput {
        ModelInput {
            ids: vec![1, 5, 9, 3, 2],
            images: vec![ImageTensor::zeros(4, 4, 1); 2],
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = HybridModel::new(cfg(), 10, 4, TaskHead::Link, 3).unwrap();
        let run = |m: &HybridModel| {
            let mut g = Graph::new();
            let out = m.forward(&mut g, &input(), true).unwrap();
            let logits = m.entity_logits(&mut g, &m.store, out.text, 3).unwrap();
            (g.value(out.text).clone(), g.value(out.visual).clone(), g.value(logits).clone(), out.trace)
        };
        let (t, v, l, trace) = run(&m);
        assert_eq!(t.shape(), (5, 8));
        assert_eq!(v.shape(), (8, 8));
        assert_eq!(l.shape(), (1, 4));
        assert_eq!(trace.unwrap().layers.len(), 1);
        let m2 = HybridModel::new(cfg(), 10, 4, TaskHead::Link, 3).unwrap();
        assert_eq!(run(&m2).0, t);
    }

    #[test]
    fn independent_ablation_deepens_unimodal_stacks() {
        let c = ModelConfig {
            ablation: Ablation::Independent,
            ..cfg()
        };
        let m = HybridModel::new(c, 10, 0, TaskHead::Relation { classes: 3 }, 1).unwrap();
        assert_eq!(m.text_blocks.len(), 2);
        assert_eq!(m.vision_blocks.len(), 2);
        assert_eq!(m.fusion.len(), 1);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &input(), false).unwrap();
        let l = m.relation_logits(&mut g, &m.store, out.text).unwrap();
        assert_eq!(g.value(l).shape(), (1, 3));
    }

    #[test]
    fn heads_require_matching_parameters() {
        let m = HybridModel::new(cfg(), 10, 0, TaskHead::Tagging { tags: TagSet::from_types(["PER"]) }, 1).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &input(), false).unwrap();
        assert!(m.relation_logits(&mut g, &m.store, out.text).is_err());
        let em = m.emissions(&mut g, &m.store, out.text, 3).unwrap();
        assert_eq!(g.value(em).shape(), (3, 3));
        assert!(m.emissions(&mut g, &m.store, out.text, 5).is_err());
    }
}
