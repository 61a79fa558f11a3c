//! Output heads for entity prediction, relation classification and tagging.

pub mod crf;
mod templates;
mod vocab;

pub use crf::{
    bio_spans, crf_log_partition, crf_nll, crf_sequence_score, crf_viterbi, log_partition_raw, validate_bio, viterbi_raw,
    BioTag, CrfParams, TagSet,
};
pub use templates::{
    build_entity_modeling_input, build_head_query_input, build_relation_input, build_tagging_input,
    build_triple_query_input, EncodedInput,
};
pub use vocab::{
    EntityRecord, EntityVocabulary, RelationLabelSet, TextVocab, CLS, HEAD_CLOSE, HEAD_OPEN, MASK, PAD, SEP,
    SPECIAL_TOKENS, TAIL_CLOSE, TAIL_OPEN, UNK,
};

use crate::error::{shape_err, Result};
use crate::numerics::{dot, softmax_rows, Matrix};

/// Inner product of `h_mask` with every entity embedding row.
pub fn masked_entity_logits(h_mask: &[f64], entity_table: &Matrix) -> Result<Vec<f64>> {
    if h_mask.len() != entity_table.cols() {
        return Err(shape_err!(
            "mask state of width {} against entity table {:?}",
            h_mask.len(),
            entity_table.shape()
        ));
    }
    Ok((0..entity_table.rows()).map(|i| dot(h_mask, entity_table.row(i))).collect())
}

/// `softmax(h_cls W)` with `W` of shape `d × classes`.
pub fn relation_classify(h_cls: &[f64], w: &Matrix) -> Result<Vec<f64>> {
    let logits = Matrix::row_vector(h_cls).matmul(w)?;
    Ok(softmax_rows(&logits).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entity_logits_examples() {
        let e = Matrix::identity(4);
        let l = masked_entity_logits(e.row(2), &e).unwrap();
        let arg = (0..4).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
        assert_eq!(arg, 2);
        assert!(masked_entity_logits(&[0.0; 4], &e).unwrap().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = Matrix::random_normal(5, 6, 1.0, &mut rng);
        let h = Matrix::random_normal(1, 6, 1.0, &mut rng);
        let l = masked_entity_logits(h.row(0), &table).unwrap();
        for i in 0..5 {
            let manual: f64 = (0..6).map(|c| h[(0, c)] * table[(i, c)]).sum();
            assert!((l[i] - manual).abs() < 1e-12);
        }
        assert!(masked_entity_logits(&[0.0; 3], &table).is_err());
    }

    #[test]
    fn relation_classify_examples() {
        let p = relation_classify(&[1.0, -2.0], &Matrix::zeros(2, 4)).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn classify_is_distribution_and_shift_invariant(seed in 0u64..1000, c in 1usize..6, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::random_normal(3, c, 2.0, &mut rng);
            let h = Matrix::random_normal(1, 3, 2.0, &mut rng);
            let p = relation_classify(h.row(0), &w).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let logits = h.matmul(&w).unwrap().map(|v| v + shift);
            let q = softmax_rows(&logits);
            for (a, b) in p.iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn entity_ranking_invariant_under_positive_scaling(seed in 0u64..1000, s in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = Matrix::random_normal(6, 4, 1.0, &mut rng);
            let h = Matrix::random_normal(1, 4, 1.0, &mut rng);
            let rank = |v: Vec<f64>| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
                idx
            };
            let a = rank(masked_entity_logits(h.row(0), &table).unwrap());
            let b = rank(masked_entity_logits(h.scale(s).row(0), &table).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
