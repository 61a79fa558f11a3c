//! Fused text/vision layers: prefix-guided attention on the visual stream
//! and correlation-aware fusion in the textual FFN.

mod trace;

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::encoders::{
    attention, ffn, ffn_output, head_projections, key_mask_row, ln1, ln2, multi_head_attention, Ablation,
    BlockWeights, ModelConfig,
};
use crate::error::{shape_err, Result};
use crate::numerics::{layer_norm, log_sum_exp, softmax_rows, Matrix, ParamId, ParamStore};

pub use trace::{format_g9, FusionTrace, LayerTrace};

/// One fused layer.
#[derive(Debug, Clone)]
pub struct MEncoderLayer {
    pub text: BlockWeights,
    pub visual: BlockWeights,
    /// `d × d_m` projection of the aggregated visual states.
    pub w3: ParamId,
}

impl MEncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let text = BlockWeights::new(store, &format!("{prefix}.text"), cfg, rng);
        let visual = BlockWeights::new(store, &format!("{prefix}.visual"), cfg, rng);
        let w3 = store.add_normal(format!("{prefix}.w3"), cfg.d, cfg.d_m, cfg.init_std, rng);
        Self { text, visual, w3 }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.text.param_ids();
        ids.extend(self.visual.param_ids());
        ids.push(self.w3);
        ids
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let d = store.value(self.text.wo).cols();
        let dm = store.value(self.text.w1).cols();
        if store.value(self.visual.wo).cols() != d {
            return Err(shape_err!("textual width {d} but visual width {}", store.value(self.visual.wo).cols()));
        }
        if store.value(self.w3).shape() != (d, dm) {
            return Err(shape_err!("W_3 {:?}, expected {:?}", store.value(self.w3).shape(), (d, dm)));
        }
        Ok(())
    }
}

/// Switches and constants shared by every fused layer.
#[derive(Debug, Clone, Default)]
pub struct FusionOptions {
    pub ablation: Ablation,
    pub ln_eps: f64,
    /// Masks every textual key seen by the visual queries.
    pub mask_text_keys: bool,
}

impl FusionOptions {
    pub fn new(ablation: Ablation, ln_eps: f64) -> Self {
        Self {
            ablation,
            ln_eps,
            mask_text_keys: false,
        }
    }
}

/// Result of the attention half of a fused layer.
#[derive(Debug, Clone)]
pub struct PgiOutput {
    pub text: NodeId,
    pub visual: NodeId,
    /// Per-head visual attention outputs before `W_o`.
    pub visual_heads: Vec<NodeId>,
    /// `λ` per head (rows) and visual query (columns); empty under `no_pgi`.
    pub lambda: Matrix,
}

/// `λ` per query row: share of the exponentiated, `1/√d_h`-scaled logits that
/// falls on the textual keys.
pub fn lambda_weights(q_v: &Matrix, k_v: &Matrix, k_t: &Matrix) -> Result<Vec<f64>> {
    lambda_weights_biased(q_v, k_v, k_t, None)
}

fn lambda_weights_biased(q_v: &Matrix, k_v: &Matrix, k_t: &Matrix, text_bias: Option<&Matrix>) -> Result<Vec<f64>> {
    if q_v.cols() != k_v.cols() || q_v.cols() != k_t.cols() {
        return Err(shape_err!(
            "queries {:?} with keys {:?} and {:?}",
            q_v.shape(),
            k_v.shape(),
            k_t.shape()
        ));
    }
    let scale = 1.0 / (q_v.cols() as f64).sqrt();
    let lv = q_v.matmul_t(k_v)?.scale(scale);
    let mut lt = q_v.matmul_t(k_t)?.scale(scale);
    if let Some(b) = text_bias {
        lt = lt.add_row_broadcast(b)?;
    }
    let mut out = Vec::with_capacity(q_v.rows());
    for r in 0..q_v.rows() {
        let st = log_sum_exp(lt.row(r));
        let sv = log_sum_exp(lv.row(r));
        // λ = e^st / (e^st + e^sv)
        out.push(1.0 / (1.0 + (sv - st).exp()));
    }
    Ok(out)
}

/// Attention half of a fused layer: standard post-LN self-attention on the
/// textual stream; pre-LN attention over `[visual; textual]` keys and values
/// on the visual stream.
pub fn pgi(
    g: &mut Graph,
    store: &ParamStore,
    h_t: NodeId,
    h_v: NodeId,
    layer: &MEncoderLayer,
    opts: &FusionOptions,
) -> Result<PgiOutput> {
    layer.check(store)?;
    let (d_t, d_v) = (g.value(h_t).cols(), g.value(h_v).cols());
    let heads = layer.visual.heads();
    if d_t != d_v || d_t != store.value(layer.text.wo).cols() || heads == 0 || d_t % heads != 0 {
        return Err(shape_err!("PGI widths {d_t}/{d_v} with {heads} heads"));
    }
    let eps = opts.ln_eps;

    let a_t = multi_head_attention(g, store, h_t, &layer.text, None)?;
    let a_t = ln1(g, store, a_t, &layer.text, eps)?;
    let text = g.add(a_t, h_t)?;

    let x_v = ln1(g, store, h_v, &layer.visual, eps)?;
    let n = g.value(h_t).rows();
    let m = g.value(h_v).rows();
    let use_pgi = opts.ablation.pgi();
    let bias = if use_pgi && opts.mask_text_keys {
        let mut mask = vec![false; m];
        mask.extend(std::iter::repeat_n(true, n));
        Some(key_mask_row(&mask))
    } else {
        None
    };
    let text_bias = opts.mask_text_keys.then(|| key_mask_row(&vec![true; n]));

    let mut visual_heads = Vec::with_capacity(heads);
    let mut lambda = if use_pgi { Matrix::zeros(heads, m) } else { Matrix::zeros(0, m) };
    for h in 0..heads {
        let (q, kv, vv) = head_projections(g, store, x_v, &layer.visual, h)?;
        let out = if use_pgi {
            let wk = g.param(store, layer.text.wk[h]);
            let wv = g.param(store, layer.text.wv[h]);
            let kt = g.matmul(h_t, wk)?;
            let vt = g.matmul(h_t, wv)?;
            let lam = lambda_weights_biased(g.value(q), g.value(kv), g.value(kt), text_bias.as_ref())?;
            lambda.row_mut(h).copy_from_slice(&lam);
            let k = g.concat_rows(&[kv, kt])?;
            let v = g.concat_rows(&[vv, vt])?;
            attention(g, q, k, v, bias.as_ref())?
        } else {
            attention(g, q, kv, vv, None)?
        };
        visual_heads.push(out);
    }
    let cat = g.concat_cols(&visual_heads)?;
    let wo = g.param(store, layer.visual.wo);
    let a_v = g.matmul(cat, wo)?;
    let visual = g.add(a_v, h_v)?;
    Ok(PgiOutput {
        text,
        visual,
        visual_heads,
        lambda,
    })
}

/// Reference form of the visual branch of [`pgi`]: per head,
/// `(1−λ)·Attn(Q_v, K_v, V_v) + λ·Attn(Q_v, K_t, V_t)`, before `W_o`.
/// Built from plain matrix kernels only.
pub fn pgi_interpolated(
    store: &ParamStore,
    h_t: &Matrix,
    h_v: &Matrix,
    layer: &MEncoderLayer,
    ln_eps: f64,
) -> Result<Vec<Matrix>> {
    if h_t.cols() != h_v.cols() {
        return Err(shape_err!("PGI widths {} and {}", h_t.cols(), h_v.cols()));
    }
    let vw = &layer.visual;
    let x_v = layer_norm(h_v, store.value(vw.ln1_gamma), store.value(vw.ln1_beta), ln_eps)?;
    let attn = |q: &Matrix, k: &Matrix, v: &Matrix| -> Result<Matrix> {
        let logits = q.matmul_t(k)?.scale(1.0 / (q.cols() as f64).sqrt());
        softmax_rows(&logits).matmul(v)
    };
    let mut out = Vec::with_capacity(vw.heads());
    for h in 0..vw.heads() {
        let q = x_v.matmul(store.value(vw.wq[h]))?;
        let kv = x_v.matmul(store.value(vw.wk[h]))?;
        let vv = x_v.matmul(store.value(vw.wv[h]))?;
        let kt = h_t.matmul(store.value(layer.text.wk[h]))?;
        let vt = h_t.matmul(store.value(layer.text.wv[h]))?;
        let lam = lambda_weights(&q, &kv, &kt)?;
        let self_att = attn(&q, &kv, &vv)?;
        let cross_att = attn(&q, &kt, &vt)?;
        let mut blended = Matrix::zeros(q.rows(), vv.cols());
        for r in 0..q.rows() {
            let l = lam[r];
            for c in 0..vv.cols() {
                blended[(r, c)] = (1.0 - l) * self_att[(r, c)] + l * cross_att[(r, c)];
            }
        }
        out.push(blended);
    }
    Ok(out)
}

/// `S = x_t x_vᵀ`, unscaled.
pub fn caf_similarity(g: &mut Graph, x_t: NodeId, x_v: NodeId) -> Result<NodeId> {
    if g.value(x_t).cols() != g.value(x_v).cols() {
        return Err(shape_err!(
            "similarity of {:?} and {:?}",
            g.value(x_t).shape(),
            g.value(x_v).shape()
        ));
    }
    g.matmul_t(x_t, x_v)
}

/// Row `i` is `softmax(S_i) · x_v`.
pub fn caf_aggregate(g: &mut Graph, s: NodeId, x_v: NodeId) -> Result<NodeId> {
    if g.value(s).cols() != g.value(x_v).rows() {
        return Err(shape_err!(
            "aggregation of S {:?} over {:?}",
            g.value(s).shape(),
            g.value(x_v).shape()
        ));
    }
    let w = g.softmax_rows(s)?;
    g.matmul(w, x_v)
}

/// `ReLU(x_t W_1 + b_1 + Agg W_3) W_2 + b_2`.
pub fn caf_ffn(g: &mut Graph, store: &ParamStore, x_t: NodeId, agg: NodeId, layer: &MEncoderLayer) -> Result<NodeId> {
    layer.check(store)?;
    if g.value(x_t).shape() != g.value(agg).shape() {
        return Err(shape_err!(
            "CAF input {:?} with aggregate {:?}",
            g.value(x_t).shape(),
            g.value(agg).shape()
        ));
    }
    let w = &layer.text;
    let w1 = g.param(store, w.w1);
    let b1 = g.param(store, w.b1);
    let w3 = g.param(store, layer.w3);
    let h = g.matmul(x_t, w1)?;
    let h = g.add_row(h, b1)?;
    let fused = g.matmul(agg, w3)?;
    let pre = g.add(h, fused)?;
    ffn_output(g, store, pre, w)
}

/// Output of the fused stack.
#[derive(Debug, Clone)]
pub struct MEncoderOutput {
    pub text: NodeId,
    pub visual: NodeId,
    pub trace: Option<FusionTrace>,
}

/// Runs the fused layers in order.
pub fn m_encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    h_t: NodeId,
    h_v: NodeId,
    layers: &[MEncoderLayer],
    opts: &FusionOptions,
    trace: bool,
) -> Result<MEncoderOutput> {
    let eps = opts.ln_eps;
    let mut record = trace.then(FusionTrace::default);
    let (mut t, mut v) = (h_t, h_v);
    for layer in layers {
        let p = pgi(g, store, t, v, layer, opts)?;
        let (ht, hv) = (p.text, p.visual);

        let s = caf_similarity(g, ht, hv)?;
        let agg = caf_aggregate(g, s, hv)?;
        let f_t = if opts.ablation.caf() {
            caf_ffn(g, store, ht, agg, layer)?
        } else {
            ffn(g, store, ht, &layer.text)?
        };
        let f_t = ln2(g, store, f_t, &layer.text, eps)?;
        t = g.add(f_t, ht)?;

        let n_v = ln2(g, store, hv, &layer.visual, eps)?;
        let f_v = ffn(g, store, n_v, &layer.visual)?;
        v = g.add(f_v, hv)?;

        if let Some(rec) = record.as_mut() {
            rec.layers.push(LayerTrace {
                lambda: p.lambda,
                similarity: g.value(s).clone(),
                aggregated: g.value(agg).clone(),
            });
        }
    }
    Ok(MEncoderOutput {
        text: t,
        visual: v,
        trace: record,
    })
}
