//! Attention, multi-head attention, the two-layer FFN, and the post-LN
//! (textual) / pre-LN (visual) transformer blocks built from them.

use rand::Rng;

use super::ModelConfig;
use crate::autograd::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, ParamId, ParamStore};

/// Additive logit for masked keys.
pub const MASKED_LOGIT: f64 = -1e30;

/// Parameters of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// LN around attention.
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    /// LN around the FFN.
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl BlockWeights {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, dh, dm, std) = (cfg.d, cfg.head_dim(), cfg.d_m, cfg.init_std);
        let per_head = |kind: &str, store: &mut ParamStore, rng: &mut R| -> Vec<ParamId> {
            (0..cfg.heads)
                .map(|h| store.add_normal(format!("{prefix}.w{kind}.{h}"), d, dh, std, rng))
                .collect()
        };
        let wq = per_head("q", store, rng);
        let wk = per_head("k", store, rng);
        let wv = per_head("v", store, rng);
        Self {
            wq,
            wk,
            wv,
            wo: store.add_normal(format!("{prefix}.wo"), d, d, std, rng),
            w1: store.add_normal(format!("{prefix}.w1"), d, dm, std, rng),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, dm)),
            w2: store.add_normal(format!("{prefix}.w2"), dm, d, std, rng),
            b2: store.add(format!("{prefix}.b2"), Matrix::zeros(1, d)),
            ln1_gamma: store.add(format!("{prefix}.ln1.gamma"), Matrix::filled(1, d, 1.0)),
            ln1_beta: store.add(format!("{prefix}.ln1.beta"), Matrix::zeros(1, d)),
            ln2_gamma: store.add(format!("{prefix}.ln2.gamma"), Matrix::filled(1, d, 1.0)),
            ln2_beta: store.add(format!("{prefix}.ln2.beta"), Matrix::zeros(1, d)),
        }
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(&self.wq);
        ids.extend(&self.wk);
        ids.extend(&self.wv);
        ids.extend([
            self.wo,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
        ]);
        ids
    }
}

/// Row vector of additive key logits: 0 for visible keys, [`MASKED_LOGIT`] for masked ones.
pub fn key_mask_row(masked: &[bool]) -> Matrix {
    Matrix::row_vector(&masked.iter().map(|&m| if m { MASKED_LOGIT } else { 0.0 }).collect::<Vec<_>>())
}

/// `softmax(Q Kᵀ / √d_k) V`, where `d_k` is the width of the supplied keys.
/// `key_bias`, when given, is a `1 × keys` row added to every logit row.
pub fn attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, key_bias: Option<&Matrix>) -> Result<NodeId> {
    let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
    if qv.cols() != kv.cols() || kv.rows() != vv.rows() {
        return Err(shape_err!(
            "attention Q {:?}, K {:?}, V {:?}",
            qv.shape(),
            kv.shape(),
            vv.shape()
        ));
    }
    let scale = 1.0 / (kv.cols() as f64).sqrt();
    let logits = g.matmul_t(q, k)?;
    let mut logits = g.scale(logits, scale)?;
    if let Some(bias) = key_bias {
        let b = g.constant(bias.clone());
        logits = g.add_row(logits, b)?;
    }
    let weights = g.softmax_rows(logits)?;
    g.matmul(weights, v)
}

/// Per-head `(x W_q, x W_k, x W_v)`.
pub fn head_projections(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    w: &BlockWeights,
    head: usize,
) -> Result<(NodeId, NodeId, NodeId)> {
    let wq = g.param(store, w.wq[head]);
    let wk = g.param(store, w.wk[head]);
    let wv = g.param(store, w.wv[head]);
    Ok((g.matmul(x, wq)?, g.matmul(x, wk)?, g.matmul(x, wv)?))
}

/// `[head_1; …; head_h] W_o`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    w: &BlockWeights,
    key_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let d = g.value(x).cols();
    let wo_shape = store.value(w.wo).shape();
    if wo_shape != (d, d) || w.heads() == 0 || !d.is_multiple_of(w.heads()) {
        return Err(shape_err!("MHA input width {d} with W_o {:?} and {} heads", wo_shape, w.heads()));
    }
    let bias = key_mask.map(key_mask_row);
    let mut heads = Vec::with_capacity(w.heads());
    for h in 0..w.heads() {
        let (q, k, v) = head_projections(g, store, x, w, h)?;
        heads.push(attention(g, q, k, v, bias.as_ref())?);
    }
    let cat = g.concat_cols(&heads)?;
    let wo = g.param(store, w.wo);
    g.matmul(cat, wo)
}

/// `ReLU(x W_1 + b_1) W_2 + b_2`.
pub fn ffn(g: &mut Graph, store: &ParamStore, x: NodeId, w: &BlockWeights) -> Result<NodeId> {
    let w1 = g.param(store, w.w1);
    let b1 = g.param(store, w.b1);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    ffn_output(g, store, h, w)
}

/// `ReLU(pre) W_2 + b_2`; shared tail of the plain and fused FFN.
pub(crate) fn ffn_output(g: &mut Graph, store: &ParamStore, pre: NodeId, w: &BlockWeights) -> Result<NodeId> {
    let a = g.relu(pre)?;
    let w2 = g.param(store, w.w2);
    let b2 = g.param(store, w.b2);
    let o = g.matmul(a, w2)?;
    g.add_row(o, b2)
}

pub(crate) fn ln1(g: &mut Graph, store: &ParamStore, x: NodeId, w: &BlockWeights, eps: f64) -> Result<NodeId> {
    let gamma = g.param(store, w.ln1_gamma);
    let beta = g.param(store, w.ln1_beta);
    g.layer_norm(x, gamma, beta, eps)
}

pub(crate) fn ln2(g: &mut Graph, store: &ParamStore, x: NodeId, w: &BlockWeights, eps: f64) -> Result<NodeId> {
    let gamma = g.param(store, w.ln2_gamma);
    let beta = g.param(store, w.ln2_beta);
    g.layer_norm(x, gamma, beta, eps)
}

/// Textual block: `x̄ = LN(MHA(x)) + x`, then `LN(FFN(x̄)) + x̄`.
pub fn post_ln_block(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    w: &BlockWeights,
    eps: f64,
    key_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let a = multi_head_attention(g, store, x, w, key_mask)?;
    let a = ln1(g, store, a, w, eps)?;
    let xb = g.add(a, x)?;
    let f = ffn(g, store, xb, w)?;
    let f = ln2(g, store, f, w, eps)?;
    g.add(f, xb)
}

/// Visual block: `x̄ = MHA(LN(x)) + x`, then `FFN(LN(x̄)) + x̄`.
pub fn pre_ln_block(g: &mut Graph, store: &ParamStore, x: NodeId, w: &BlockWeights, eps: f64) -> Result<NodeId> {
    let n = ln1(g, store, x, w, eps)?;
    let a = multi_head_attention(g, store, n, w, None)?;
    let xb = g.add(a, x)?;
    let n = ln2(g, store, xb, w, eps)?;
    let f = ffn(g, store, n, w)?;
    g.add(f, xb)
}

/// Applies the textual blocks in order.
pub fn t_encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    blocks: &[BlockWeights],
    eps: f64,
    key_mask: Option<&[bool]>,
) -> Result<NodeId> {
    blocks
        .iter()
        .try_fold(x, |h, w| post_ln_block(g, store, h, w, eps, key_mask))
}

/// Applies the visual blocks in order.
pub fn v_encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    blocks: &[BlockWeights],
    eps: f64,
) -> Result<NodeId> {
    blocks.iter().try_fold(x, |h, w| pre_ln_block(g, store, h, w, eps))
}

/// Zeroes every weight of a block, including LN gammas and betas.
pub fn zero_block(store: &mut ParamStore, w: &BlockWeights) {
    for id in w.param_ids() {
        let (r, c) = store.value(id).shape();
        *store.value_mut(id) = Matrix::zeros(r, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{layer_norm, relu, softmax_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, heads: usize, d_m: usize) -> ModelConfig {
        ModelConfig {
            d,
            heads,
            d_m,
            init_std: 0.5,
            ..ModelConfig::default()
        }
    }

    fn attn(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        Graph::run(|g| {
            let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            attention(g, q, k, v, None)
        })
        .unwrap()
    }

    /// Independent three-step evaluation: matmul, softmax, matmul.
    fn attn_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let mut logits = Matrix::zeros(q.rows(), k.rows());
        let s = (k.cols() as f64).sqrt();
        for i in 0..q.rows() {
            for j in 0..k.rows() {
                logits[(i, j)] = (0..q.cols()).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / s;
            }
        }
        softmax_rows(&logits).matmul(v).unwrap()
    }

    #[test]
    fn attention_single_key_repeats_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let k = Matrix::random_normal(1, 3, 1.0, &mut rng);
        let v = Matrix::random_normal(1, 5, 1.0, &mut rng);
        let out = attn(&q, &k, &v);
        for r in 0..4 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn attention_equal_logits_give_column_mean() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let k = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 3.0]]);
        let v = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]);
        let out = attn(&q, &k, &v);
        assert!((out[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((out[(0, 1)] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_three_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let k = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let v = Matrix::random_normal(3, 4, 1.0, &mut rng);
        assert!(attn(&q, &k, &v).max_abs_diff(&attn_oracle(&q, &k, &v)).unwrap() < 1e-12);
    }

    #[test]
    fn attention_shape_error() {
        let r = Graph::run(|g| {
            let q = g.constant(Matrix::zeros(2, 3));
            let k = g.constant(Matrix::zeros(2, 4));
            attention(g, q, k, k, None)
        });
        assert!(r.is_err());
    }

    #[test]
    fn mha_single_head_identity_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let c = cfg(4, 1, 8);
        let w = BlockWeights::new(&mut store, "b", &c, &mut rng);
        *store.value_mut(w.wo) = Matrix::identity(4);
        let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let out = Graph::run(|g| {
            let xn = g.constant(x.clone());
            multi_head_attention(g, &store, xn, &w, None)
        })
        .unwrap();
        let q = x.matmul(store.value(w.wq[0])).unwrap();
        let k = x.matmul(store.value(w.wk[0])).unwrap();
        let v = x.matmul(store.value(w.wv[0])).unwrap();
        assert!(out.max_abs_diff(&attn_oracle(&q, &k, &v)).unwrap() < 1e-12);
    }

    #[test]
    fn mha_zero_values_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let c = cfg(8, 2, 16);
        let w = BlockWeights::new(&mut store, "b", &c, &mut rng);
        let x = Matrix::random_normal(3, 8, 1.0, &mut rng);
        let out = Graph::run(|g| {
            let xn = g.constant(x.clone());
            multi_head_attention(g, &store, xn, &w, None)
        })
        .unwrap();
        assert_eq!(out.shape(), (3, 8));
        for &id in &w.wv {
            *store.value_mut(id) = Matrix::zeros(8, 4);
        }
        let out = Graph::run(|g| {
            let xn = g.constant(x.clone());
            multi_head_attention(g, &store, xn, &w, None)
        })
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let c = cfg(4, 1, 6);
        let w = BlockWeights::new(&mut store, "b", &c, &mut rng);
        let run = |store: &ParamStore, x: &Matrix| {
            Graph::run(|g| {
                let xn = g.constant(x.clone());
                ffn(g, store, xn, &w)
            })
            .unwrap()
        };
        assert!(run(&store, &Matrix::zeros(2, 4)).data().iter().all(|&v| v == 0.0));

        let x = Matrix::random_normal(2, 4, 1.0, &mut rng);
        *store.value_mut(w.b1) = Matrix::random_normal(1, 6, 1.0, &mut rng);
        *store.value_mut(w.b2) = Matrix::random_normal(1, 4, 1.0, &mut rng);
        let h = relu(&x.matmul(store.value(w.w1)).unwrap().add_row_broadcast(store.value(w.b1)).unwrap());
        let expect = h.matmul(store.value(w.w2)).unwrap().add_row_broadcast(store.value(w.b2)).unwrap();
        assert!(run(&store, &x).max_abs_diff(&expect).unwrap() < 1e-12);

        *store.value_mut(w.w2) = Matrix::zeros(6, 4);
        let out = run(&store, &x);
        for r in 0..2 {
            assert_eq!(out.row(r), store.value(w.b2).row(0));
        }
    }

    fn stack(n_blocks: usize, d: usize, seed: u64) -> (ParamStore, Vec<BlockWeights>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg(d, 2, 2 * d);
        let blocks = (0..n_blocks)
            .map(|i| BlockWeights::new(&mut store, &format!("l{i}"), &c, &mut rng))
            .collect();
        (store, blocks)
    }

    #[test]
    fn zero_weight_blocks_are_identity() {
        let (mut store, blocks) = stack(2, 8, 8);
        for b in &blocks {
            zero_block(&mut store, b);
        }
        let x = Matrix::random_normal(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for textual in [true, false] {
            let out = Graph::run(|g| {
                let xn = g.constant(x.clone());
                if textual {
                    t_encoder_forward(g, &store, xn, &blocks, 1e-5, None)
                } else {
                    v_encoder_forward(g, &store, xn, &blocks, 1e-5)
                }
            })
            .unwrap();
            assert_eq!(out, x);
        }
        // no blocks at all is also the identity
        let out = Graph::run(|g| {
            let xn = g.constant(x.clone());
            t_encoder_forward(g, &store, xn, &[], 1e-5, None)
        })
        .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn t_encoder_is_deterministic() {
        let x = Matrix::random_normal(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let run = || {
            let (store, blocks) = stack(2, 8, 42);
            Graph::run(|g| {
                let xn = g.constant(x.clone());
                t_encoder_forward(g, &store, xn, &blocks, 1e-5, None)
            })
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn v_encoder_single_block_matches_manual_composition() {
        let (store, blocks) = stack(1, 16, 10);
        let w = &blocks[0];
        let x = Matrix::random_normal(8, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let out = Graph::run(|g| {
            let xn = g.constant(x.clone());
            v_encoder_forward(g, &store, xn, &blocks, 1e-5)
        })
        .unwrap();
        assert_eq!(out.shape(), (8, 16));

        let ln = |m: &Matrix, ga, be| layer_norm(m, store.value(ga), store.value(be), 1e-5).unwrap();
        let n = ln(&x, w.ln1_gamma, w.ln1_beta);
        let heads: Vec<Matrix> = (0..2)
            .map(|h| {
                let q = n.matmul(store.value(w.wq[h])).unwrap();
                let k = n.matmul(store.value(w.wk[h])).unwrap();
                let v = n.matmul(store.value(w.wv[h])).unwrap();
                attn_oracle(&q, &k, &v)
            })
            .collect();
        let mha = Matrix::concat_cols(&[&heads[0], &heads[1]]).unwrap().matmul(store.value(w.wo)).unwrap();
        let xb = mha.add(&x).unwrap();
        let n2 = ln(&xb, w.ln2_gamma, w.ln2_beta);
        let h = relu(&n2.matmul(store.value(w.w1)).unwrap().add_row_broadcast(store.value(w.b1)).unwrap());
        let f = h.matmul(store.value(w.w2)).unwrap().add_row_broadcast(store.value(w.b2)).unwrap();
        let expect = f.add(&xb).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn attention_rows_are_convex_combinations(seed in 0u64..1000, n in 1usize..6, m in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = Matrix::random_normal(n, 4, 2.0, &mut rng);
                let k = Matrix::random_normal(m, 4, 2.0, &mut rng);
                let v = Matrix::random_normal(m, 3, 1.0, &mut rng);
                let out = attn(&q, &k, &v);
                for c in 0..3 {
                    let col = v.column(c);
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    for r in 0..n {
                        prop_assert!(out[(r, c)] >= lo - 1e-12 && out[(r, c)] <= hi + 1e-12);
                    }
                }
            }

            #[test]
            fn stacks_preserve_shape(seed in 0u64..100, n in 1usize..7) {
                let (store, blocks) = stack(2, 8, seed);
                let x = Matrix::random_normal(n, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
                let t = Graph::run(|g| { let xn = g.constant(x.clone()); t_encoder_forward(g, &store, xn, &blocks, 1e-5, None) }).unwrap();
                let v = Graph::run(|g| { let xn = g.constant(x.clone()); v_encoder_forward(g, &store, xn, &blocks, 1e-5) }).unwrap();
                prop_assert_eq!(t.shape(), (n, 8));
                prop_assert_eq!(v.shape(), (n, 8));
            }
        }
    }
}
