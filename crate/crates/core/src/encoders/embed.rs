use rand::Rng;

use super::ModelConfig;
use crate::autograd::{Graph, NodeId};
use crate::data::ImageTensor;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore};

/// Splits an image into non-overlapping `P×P×C` patches in raster order.
/// Row `k` holds patch `k` flattened in `(dy, dx, c)` order.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Matrix> {
    let (h, w, c) = image.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err!("{h}x{w} image is not divisible into {patch}-pixel patches"));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Matrix::zeros(ph * pw, patch * patch * c);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        row[k] = image.get(py * patch + dy, px * patch + dx, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Matrix, height: usize, width: usize, channels: usize, patch: usize) -> Result<ImageTensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(shape_err!("{height}x{width} image is not divisible into {patch}-pixel patches"));
    }
    let (ph, pw) = (height / patch, width / patch);
    if patches.shape() != (ph * pw, patch * patch * channels) {
        return Err(shape_err!("patch matrix {:?} for {height}x{width}x{channels}", patches.shape()));
    }
    let mut img = ImageTensor::zeros(height, width, channels);
    for py in 0..ph {
        for px in 0..pw {
            let row = patches.row(py * pw + px);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..channels {
                        img.set(py * patch + dy, px * patch + dx, ch, row[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Word table, appended entity rows and position table.
///
/// Token ids `0..base_vocab` index the word table; ids
/// `base_vocab..base_vocab + entities` index the entity table.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub words: ParamId,
    pub entities: ParamId,
    pub positions: ParamId,
    pub base_vocab: usize,
    pub entity_count: usize,
    pub max_len: usize,
}

impl TextEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        base_vocab: usize,
        entity_count: usize,
        rng: &mut R,
    ) -> Self {
        let std = cfg.init_std;
        Self {
            words: store.add_normal("embed.words", base_vocab, cfg.d, std, rng),
            entities: store.add_normal("embed.entities", entity_count.max(1), cfg.d, std, rng),
            positions: store.add_normal("embed.text_pos", cfg.max_len, cfg.d, std, rng),
            base_vocab,
            entity_count,
            max_len: cfg.max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.base_vocab + self.entity_count
    }

    /// `X_wd + T_pos` for a token id sequence.
    pub fn embed_text(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        if ids.len() > self.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.max_len,
            });
        }
        if ids.is_empty() {
            return Err(shape_err!("empty token sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size()) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        let words = g.param(store, self.words);
        let table = if self.entity_count > 0 {
            let ents = g.param(store, self.entities);
            g.concat_rows(&[words, ents])?
        } else {
            words
        };
        let x = g.gather_rows(table, ids)?;
        let pos = g.param(store, self.positions);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather_rows(pos, &positions)?;
        g.add(x, p)
    }
}

/// Patch projection plus visual position table.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub projection: ParamId,
    pub positions: ParamId,
    pub patch: usize,
    pub image_dims: (usize, usize, usize),
    pub images: usize,
}

impl PatchEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let std = cfg.init_std;
        Self {
            projection: store.add_normal("embed.patch_proj", cfg.patch_dim(), cfg.d, std, rng),
            positions: store.add_normal("embed.visual_pos", cfg.visual_len(), cfg.d, std, rng),
            patch: cfg.patch,
            image_dims: (cfg.image_h, cfg.image_w, cfg.image_c),
            images: cfg.images,
        }
    }

    /// Stacked patches of all images; image `j` fills rows `[j·u, (j+1)·u)`.
    pub fn stacked_patches(&self, images: &[ImageTensor]) -> Result<Matrix> {
        if images.len() != self.images {
            return Err(shape_err!("expected {} images, got {}", self.images, images.len()));
        }
        let mut parts = Vec::with_capacity(images.len());
        for img in images {
            if img.dims() != self.image_dims {
                return Err(shape_err!("image {:?}, expected {:?}", img.dims(), self.image_dims));
            }
            parts.push(patchify(img, self.patch)?);
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        Matrix::concat_rows(&refs)
    }

    /// `X_pc + V_pos` over the concatenation of all images.
    pub fn embed_patches(&self, g: &mut Graph, store: &ParamStore, images: &[ImageTensor]) -> Result<NodeId> {
        let patches = g.constant(self.stacked_patches(images)?);
        let proj = g.param(store, self.projection);
        let x = g.matmul(patches, proj)?;
        let pos = g.param(store, self.positions);
        g.add(x, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, c: usize) -> ImageTensor {
        ImageTensor::from_vec(h, w, c, (0..h * w * c).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn patchify_shapes_and_raster_order() {
        let img = ramp(4, 4, 1);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), (4, 4));
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);

        let p = patchify(&ImageTensor::zeros(224, 224, 3), 32).unwrap();
        assert_eq!(p.shape(), (49, 3072));

        let img = ramp(3, 3, 2);
        let p = patchify(&img, 3).unwrap();
        assert_eq!(p.shape(), (1, 18));
        assert_eq!(p.row(0), img.data());

        assert!(patchify(&ramp(4, 6, 1), 4).is_err());
    }

    #[test]
    fn unpatchify_round_trip() {
        let img = ramp(8, 12, 3);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(unpatchify(&p, 8, 12, 3, 4).unwrap(), img);
    }

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            image_h: 4,
            image_w: 4,
            image_c: 1,
            patch: 2,
            images: 2,
            max_len: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn embed_text_is_table_lookup_plus_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = toy_cfg();
        let emb = TextEmbedding::new(&mut store, &cfg, 10, 3, &mut rng);
        let ids = [3usize, 7, 11];
        let out = Graph::run(|g| emb.embed_text(g, &store, &ids)).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let word = if id < 10 {
                store.value(emb.words).row(id).to_vec()
            } else {
                store.value(emb.entities).row(id - 10).to_vec()
            };
            let pos = store.value(emb.positions).row(i);
            for c in 0..8 {
                assert_eq!(out[(i, c)], word[c] + pos[c]);
            }
        }
    }

    #[test]
    fn embed_text_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let emb = TextEmbedding::new(&mut store, &toy_cfg(), 10, 3, &mut rng);
        assert!(matches!(
            Graph::run(|g| emb.embed_text(g, &store, &[13])),
            Err(Error::Vocabulary(_))
        ));
        assert!(matches!(
            Graph::run(|g| emb.embed_text(g, &store, &[1; 7])),
            Err(Error::Length { len: 7, max: 6 })
        ));
    }

    #[test]
    fn zero_tables_give_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let emb = TextEmbedding::new(&mut store, &ModelConfig { init_std: 0.0, ..toy_cfg() }, 5, 0, &mut rng);
        let out = Graph::run(|g| emb.embed_text(g, &store, &[0, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_patches_shapes_and_shared_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = toy_cfg();
        let pe = PatchEmbedding::new(&mut store, &cfg, &mut rng);
        let img = ramp(4, 4, 1);
        let out = Graph::run(|g| pe.embed_patches(g, &store, &[img.clone(), img.clone()])).unwrap();
        assert_eq!(out.shape(), (8, 8));
        let pos = store.value(pe.positions);
        for r in 0..4 {
            for c in 0..8 {
                let lhs = out[(r, c)] - out[(r + 4, c)];
                let rhs = pos[(r, c)] - pos[(r + 4, c)];
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }

        // zero projection leaves just the position table
        *store.value_mut(pe.projection) = Matrix::zeros(4, 8);
        let single = PatchEmbedding { images: 1, ..pe.clone() };
        let mut pos1 = store.clone();
        *pos1.value_mut(pe.positions) = store.value(pe.positions).gather_rows(&[0, 1, 2, 3]).unwrap();
        let out = Graph::run(|g| single.embed_patches(g, &pos1, std::slice::from_ref(&img))).unwrap();
        assert_eq!(&out, pos1.value(pe.positions));

        assert!(Graph::run(|g| pe.embed_patches(g, &store, std::slice::from_ref(&img))).is_err());
        assert!(Graph::run(|g| pe.embed_patches(g, &store, &[ramp(2, 2, 1), ramp(2, 2, 1)])).is_err());
    }
}
