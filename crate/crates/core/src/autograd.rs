//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] evaluates every operation eagerly and records how each node was
//! produced. [`Graph::backward`] then walks the record in reverse to produce
//! exact gradients for every parameter that entered the computation. Model
//! code is written once against the graph; inference simply never calls
//! `backward`.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    classification_loss_with_grad, layer_norm_backward, layer_norm_with_cache, relu, softmax_rows,
    softmax_rows_backward, LayerNormCache, Matrix, ParamId, ParamStore, Targets,
};
use crate::task_heads::crf::{marginals_raw, sequence_score_raw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: LayerNormCache,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    Sum(NodeId),
    /// Scalar loss with its gradient w.r.t. the input cached at forward time.
    Loss {
        input: NodeId,
        local_grad: Matrix,
    },
    CrfNll {
        emissions: NodeId,
        transitions: NodeId,
        d_emissions: Matrix,
        d_transitions: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a throwaway graph, runs `f` and returns the produced value.
    pub fn run<F>(f: F) -> Result<Matrix>
    where
        F: FnOnce(&mut Graph) -> Result<NodeId>,
    {
        let mut g = Graph::new();
        let out = f(&mut g)?;
        Ok(g.nodes.swap_remove(out.0).value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.nodes.push(Node {
            value: m,
            op: Op::Constant,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row_broadcast(self.value(bias))?;
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (v, cache) = layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(v, Op::LayerNorm { x, gamma, beta, cache })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(table).gather_rows(idx)?;
        self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean cross-entropy or binary cross-entropy of `logits` (scalar node).
    pub fn classification_loss(&mut self, logits: NodeId, targets: &Targets) -> Result<NodeId> {
        let (loss, local_grad) = classification_loss_with_grad(self.value(logits), targets)?;
        self.push(
            Matrix::filled(1, 1, loss),
            Op::Loss {
                input: logits,
                local_grad,
            },
        )
    }

    /// CRF negative log-likelihood of `gold`. `mask` is added to the
    /// transitions (use `−∞` entries to forbid moves) and is not differentiated.
    pub fn crf_nll(
        &mut self,
        emissions: NodeId,
        transitions: NodeId,
        gold: &[usize],
        mask: Option<&Matrix>,
    ) -> Result<NodeId> {
        let em = self.value(emissions);
        let trans = match mask {
            Some(m) => self.value(transitions).add(m)?,
            None => self.value(transitions).clone(),
        };
        let marg = marginals_raw(em, &trans)?;
        let gold_score = sequence_score_raw(em, &trans, gold)?;
        if !gold_score.is_finite() {
            return Err(Error::Label("gold tag sequence has zero probability".into()));
        }
        let y = em.cols();
        let mut d_em = marg.unary;
        let mut d_tr = marg.pairwise;
        d_tr[(y, gold[0])] -= 1.0;
        d_tr[(gold[gold.len() - 1], y + 1)] -= 1.0;
        for (t, &g) in gold.iter().enumerate() {
            d_em[(t, g)] -= 1.0;
            if t > 0 {
                d_tr[(gold[t - 1], g)] -= 1.0;
            }
        }
        let nll = (marg.log_z - gold_score).max(0.0);
        self.push(
            Matrix::filled(1, 1, nll),
            Op::CrfNll {
                emissions,
                transitions,
                d_emissions: d_em,
                d_transitions: d_tr,
            },
        )
    }

    /// Gradients of the scalar `loss` for every parameter in `store`, in store
    /// order. Frozen parameters and parameters not on the graph get zeros.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Vec<Matrix>> {
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(Error::State("backward called on a node that was never computed".into()));
        };
        if root.value.shape() != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *bias, g.sum_rows())?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Relu(a) => {
                    let mask = self.value(*a);
                    let mut d = g;
                    for (dv, &x) in d.data_mut().iter_mut().zip(mask.data()) {
                        if x <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Softmax(a) => accumulate(&mut grads, *a, softmax_rows_backward(&node.value, &g))?,
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = layer_norm_backward(&g, self.value(*gamma), cache);
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, dg)?;
                    accumulate(&mut grads, *beta, db)?;
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let idx: Vec<usize> = (row..row + r).collect();
                        accumulate(&mut grads, p, g.gather_rows(&idx)?)?;
                        row += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(col, col + c)?)?;
                        col += c;
                    }
                }
                Op::GatherRows { table, idx } => {
                    let t = self.value(*table);
                    let mut d = Matrix::zeros(t.rows(), t.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, d)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g[(0, 0)]))?;
                }
                Op::Loss { input, local_grad } => {
                    accumulate(&mut grads, *input, local_grad.scale(g[(0, 0)]))?;
                }
                Op::CrfNll {
                    emissions,
                    transitions,
                    d_emissions,
                    d_transitions,
                } => {
                    accumulate(&mut grads, *emissions, d_emissions.scale(g[(0, 0)]))?;
                    accumulate(&mut grads, *transitions, d_transitions.scale(g[(0, 0)]))?;
                }
            }
        }

        let mut out: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        for (&pid, &node) in &self.params {
            if node.0 > loss.0 || store.get(pid).frozen {
                continue;
            }
            if let Some(g) = grads[node.0].take() {
                out[pid.0] = g;
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::Sum(_) => "sum",
        Op::Loss { .. } => "loss",
        Op::CrfNll { .. } => "crf_nll",
    }
}

/// Scalar-valued helper used across tests: `Σ (x ⊙ weights)`.
pub fn weighted_sum(g: &mut Graph, x: NodeId, weights: Matrix) -> Result<NodeId> {
    if g.value(x).shape() != weights.shape() {
        return Err(shape_err!("weights {:?} for value {:?}", weights.shape(), g.value(x).shape()));
    }
    let w = g.constant(weights);
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_probe_closed_form() {
        // loss = ½‖W x‖², dL/dW = (W x) xᵀ
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.0, 1.0]]));
        let x = Matrix::from_rows(&[vec![0.5], vec![1.5], vec![-1.0]]);
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let xn = g.constant(x.clone());
        let y = g.matmul(wn, xn).unwrap();
        let sq = g.mul(y, y).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        let wx = store.value(w).matmul(&x).unwrap();
        let expect = wx.matmul(&x.transpose()).unwrap();
        assert!(grads[0].max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn frozen_params_get_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(2, 2, 1.0));
        store.freeze_all();
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let loss = g.sum(wn).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        assert!(grads[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_forward() {
        let store = ParamStore::new();
        let g = Graph::new();
        assert!(matches!(g.backward(NodeId(0), &store), Err(Error::State(_))));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.add_normal("a", 3, 4, 0.7, &mut rng);
        let b = store.add_normal("b", 4, 4, 0.7, &mut rng);
        let bias = store.add_normal("bias", 1, 4, 0.7, &mut rng);
        let gamma = store.add_normal("gamma", 1, 4, 0.7, &mut rng);
        let beta = store.add_normal("beta", 1, 4, 0.7, &mut rng);
        let trans = store.add_normal("trans", 5, 5, 0.7, &mut rng);
        let wsum = Matrix::random_normal(3, 4, 1.0, &mut rng);

        let build = |store: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let an = g.param(store, a);
            let bn = g.param(store, b);
            let bi = g.param(store, bias);
            let ga = g.param(store, gamma);
            let be = g.param(store, beta);
            let tr = g.param(store, trans);
            let h = g.matmul(an, bn)?;
            let h = g.add_row(h, bi)?;
            let h = g.layer_norm(h, ga, be, 1e-5)?;
            let r = g.relu(h)?;
            let s = g.softmax_rows(h)?;
            let ht = g.transpose(h)?;
            let gram = g.matmul(s, ht)?; // 3x3
            let cat = g.concat_cols(&[r, gram])?; // 3x7
            let picked = g.gather_rows(cat, &[2, 0, 2])?;
            let half = g.scale(picked, 0.5)?;
            let rows = g.concat_rows(&[half, cat])?; // 6x7
            let l1 = weighted_sum(&mut g, h, wsum.clone())?;
            let logits = g.gather_rows(rows, &[0, 4])?;
            let l2 = g.classification_loss(logits, &Targets::Classes(vec![3, 1]))?;
            let ml = g.gather_rows(rows, &[5])?;
            let l3 = g.classification_loss(ml, &Targets::Multilabel(Matrix::row_vector(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0])))?;
            let em = g.matmul(an, bn)?;
            let em = g.gather_rows(em, &[0, 1])?;
            let proj = g.constant(Matrix::random_normal(4, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
            let em3 = g.matmul(em, proj)?;
            let l4 = g.crf_nll(em3, tr, &[2, 0], None)?;
            let t = g.add(l1, l2)?;
            let t = g.add(t, l3)?;
            let t = g.add(t, l4)?;
            Ok((g, t))
        };
        let (g, loss) = build(&store).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        let fd = finite_difference_gradient(
            |s| {
                let (g, l) = build(s)?;
                Ok(g.scalar(l))
            },
            &mut store,
            &ids,
            1e-5,
        )
        .unwrap();
        for (k, (an, nu)) in grads.iter().zip(&fd).enumerate() {
            let err = crate::numerics::relative_error(an, nu, 1e-10).unwrap();
            assert!(err < 1e-6, "param {k}: rel err {err}");
        }
    }
}
