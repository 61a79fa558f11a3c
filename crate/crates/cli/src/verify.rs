//! Self-contained property suites, each comparing the implementation with an
//! independent reference on generated fixtures.

use std::collections::BTreeSet;
use std::fmt;

use hyfuse_core::autograd::{weighted_sum, Graph, NodeId};
use hyfuse_core::data::{synthetic_link, synthetic_ner, synthetic_re, ImageTensor, SequenceTask, SyntheticSpec};
use hyfuse_core::encoders::{Ablation, ModelConfig};
use hyfuse_core::m_encoder::{
    caf_aggregate, caf_ffn, caf_similarity, lambda_weights, m_encoder_forward, pgi, pgi_interpolated, FusionOptions,
    MEncoderLayer,
};
use hyfuse_core::model::{HybridModel, TaskHead};
use hyfuse_core::numerics::{
    finite_difference_gradient, layer_norm, log_sum_exp, relative_error, relu, softmax_rows, Matrix, ParamId,
    ParamStore,
};
use hyfuse_core::task_heads::{log_partition_raw, viterbi_raw};
use hyfuse_core::training_eval::{
    example_gradients, example_loss_value, filtered_rank, micro_f1, span_f1, Example, LinkData, Prf, RankingMetrics,
    SequenceData, Span, Target,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Suite names accepted by `verify --only`.
pub const SUITES: [&str; 6] = [
    "pgi-identity",
    "gradient",
    "crf-brute-force",
    "metric-oracles",
    "permutation-invariance",
    "ablation-integrity",
];

/// Fault injection for checking that the suites can fail.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Scales every analytic `W_3` gradient by 1.5 before comparison.
    pub corrupt_w3_grad: bool,
}

/// One measured quantity against its bound; `value ≤ tolerance` passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Measurement {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub measurements: Vec<Measurement>,
    /// Failures that have no numeric measure (mismatched decodes, errors).
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            measurements: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn measure(&mut self, name: impl Into<String>, value: f64, tolerance: f64) {
        self.measurements.push(Measurement::new(name, value, tolerance));
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.measurements.iter().all(Measurement::passed)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.measurements.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", if self.passed() { "PASS" } else { "FAIL" }, self.suite)?;
        for m in &self.measurements {
            write!(f, " {}={:.3e}(tol {:.0e})", m.name, m.value, m.tolerance)?;
        }
        for x in &self.failures {
            write!(f, " [{x}]")?;
        }
        Ok(())
    }
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Option<SuiteReport> {
    let mut r = SuiteReport::new(SUITES.iter().copied().find(|s| *s == name)?);
    let outcome = match name {
        "pgi-identity" => pgi_identity(&mut r),
        "gradient" => gradient(&mut r, opts),
        "crf-brute-force" => crf_brute_force(&mut r),
        "metric-oracles" => metric_oracles(&mut r),
        "permutation-invariance" => permutation_invariance(&mut r),
        _ => ablation_integrity(&mut r),
    };
    if let Err(e) = outcome {
        r.failures.push(format!("error: {e}"));
    }
    Some(r)
}

type SuiteResult = hyfuse_core::Result<()>;

fn fusion_cfg(d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        d,
        heads,
        d_m: 2 * d,
        init_std: 0.4,
        ..ModelConfig::default()
    }
}

fn fusion_layers(d: usize, heads: usize, count: usize, rng: &mut ChaCha8Rng) -> (ParamStore, Vec<MEncoderLayer>) {
    let mut store = ParamStore::new();
    let cfg = fusion_cfg(d, heads);
    let layers = (0..count)
        .map(|l| MEncoderLayer::new(&mut store, &format!("m{l}"), &cfg, rng))
        .collect();
    (store, layers)
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, rng)
}

/// Hybrid-key attention against the explicit λ-interpolation of two
/// separately normalised attentions.
fn pgi_identity(r: &mut SuiteReport) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut max_diff, mut lambda_outside, mut equal_err) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..1000 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=16 / heads);
        let (n, m) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (store, layers) = fusion_layers(d, heads, 1, &mut rng);
        let (ht, hv) = (normal(n, d, &mut rng), normal(m, d, &mut rng));
        let mut g = Graph::new();
        let (t, v) = (g.constant(ht.clone()), g.constant(hv.clone()));
        let out = pgi(&mut g, &store, t, v, &layers[0], &FusionOptions::new(Ablation::None, 1e-5))?;
        let twin = pgi_interpolated(&store, &ht, &hv, &layers[0], 1e-5)?;
        for (a, b) in out.visual_heads.iter().zip(&twin) {
            max_diff = max_diff.max(g.value(*a).max_abs_diff(b)?);
        }
        lambda_outside += out.lambda.data().iter().filter(|&&l| !(l > 0.0 && l < 1.0)).count();
        let dh = d / heads;
        let lam = lambda_weights(&Matrix::zeros(m, dh), &normal(m, dh, &mut rng), &normal(n, dh, &mut rng))?;
        let expect = n as f64 / (n + m) as f64;
        for l in lam {
            equal_err = equal_err.max((l - expect).abs());
        }
    }
    r.measure("max_abs_diff", max_diff, 1e-6);
    r.measure("lambda_outside_unit", lambda_outside as f64, 0.0);
    r.measure("equal_logit_lambda_err", equal_err, 1e-12);
    Ok(())
}

fn toy_cfg() -> ModelConfig {
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
        max_len: 32,
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

/// A toy model and one example for each of the four training losses.
pub fn gradient_fixtures() -> hyfuse_core::Result<Vec<(&'static str, HybridModel, Example)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = |rng: &mut ChaCha8Rng| -> Vec<ImageTensor> {
        (0..2)
            .map(|_| ImageTensor::from_vec(4, 4, 1, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    };
    let mut spec = SyntheticSpec {
        entities: 5,
        relations: 2,
        triples: 6,
        classes: 3,
        examples: 3,
        ..SyntheticSpec::default()
    };
    spec.image.height = 4;
    spec.image.width = 4;
    let link = LinkData::from_synthetic(&synthetic_link(1, &spec)?)?;
    let link_model = HybridModel::new(toy_cfg(), link.vocab.len(), link.entities.len(), TaskHead::Link, 3)?;
    let entity_ex = link.entity_examples(&link_model)?.remove(2);
    let mut link_ex = link.link_examples(&link_model)?.remove(0);
    if let Target::Entities { positives, .. } = &mut link_ex.target {
        positives.push((positives[0] + 2) % link.entities.len());
        positives.sort_unstable();
        positives.dedup();
    }

    let re_corpus = synthetic_re(2, &spec)?;
    let re = SequenceData::new(SequenceTask::Re, &[&re_corpus])?;
    let re_images = vec![images(&mut rng); re_corpus.len()];
    let re_ex = re.examples(&re_corpus, &re_images)?.remove(1);
    let re_model = HybridModel::new(toy_cfg(), re.vocab.len(), 0, re.head(), 4)?;

    let ner_corpus = synthetic_ner(3, &spec)?;
    let ner = SequenceData::new(SequenceTask::Ner, &[&ner_corpus])?;
    let ner_images = vec![images(&mut rng); ner_corpus.len()];
    let ner_ex = ner.examples(&ner_corpus, &ner_images)?.remove(0);
    let mut ner_model = HybridModel::new(toy_cfg(), ner.vocab.len(), 0, ner.head(), 5)?;
    let trans = ner_model.transitions.expect("tagging head");
    *ner_model.store.value_mut(trans) = Matrix::random_normal(ner.tags.len() + 2, ner.tags.len() + 2, 0.5, &mut rng);

    Ok(vec![
        ("entity_ce", link_model.clone(), entity_ex),
        ("link_bce", link_model, link_ex),
        ("re_ce", re_model, re_ex),
        ("crf_nll", ner_model, ner_example_images(ner_ex, &mut rng, images)),
    ])
}

fn ner_example_images(
    mut ex: Example,
    rng: &mut ChaCha8Rng,
    images: impl Fn(&mut ChaCha8Rng) -> Vec<ImageTensor>,
) -> Example {
    ex.input.images = images(rng);
    ex
}

fn corrupt(store: &ParamStore, grads: &mut [Matrix], opts: &VerifyOptions) {
    if !opts.corrupt_w3_grad {
        return;
    }
    for (i, (_, p)) in store.iter().enumerate() {
        if p.name.ends_with(".w3") {
            grads[i] = grads[i].scale(1.5);
        }
    }
}

/// Largest per-parameter relative error and the parameter it occurs in.
fn worst_error(store: &ParamStore, analytic: &[Matrix], numeric: &[Matrix], ids: &[ParamId]) -> hyfuse_core::Result<(f64, String)> {
    let mut worst = (0.0, String::new());
    for (k, &id) in ids.iter().enumerate() {
        let e = relative_error(&analytic[id.0], &numeric[k], 1e-10)?;
        if e > worst.0 {
            worst = (e, store.get(id).name.clone());
        }
    }
    Ok(worst)
}

const FD_STEP: f64 = 1e-5;

/// Whole-model gradients for the four losses and isolated PGI / CAF
/// sub-networks, each against central finite differences.
fn gradient(r: &mut SuiteReport, opts: &VerifyOptions) -> SuiteResult {
    for (name, model, ex) in gradient_fixtures()? {
        let (_, mut grads) = example_gradients(&model, &ex)?;
        corrupt(&model.store, &mut grads, opts);
        let ids: Vec<ParamId> = model.store.ids().collect();
        let mut store = model.store.clone();
        let numeric = finite_difference_gradient(|s| example_loss_value(&model, s, &ex), &mut store, &ids, FD_STEP)?;
        let (err, at) = worst_error(&model.store, &grads, &numeric, &ids)?;
        log::debug!("{name}: worst relative error {err:.3e} in {at}");
        r.measure(format!("{name}_rel_err"), err, 1e-3);
    }
    for (name, sub) in [("pgi", isolated_pgi as SubNet), ("caf", isolated_caf as SubNet)] {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mut store, layers) = fusion_layers(8, 2, 1, &mut rng);
        let ht = store.add("input.text", normal(3, 8, &mut rng));
        let hv = store.add("input.visual", normal(4, 8, &mut rng));
        let w_t = normal(3, 8, &mut rng);
        let w_v = normal(4, 8, &mut rng);
        let objective = |s: &ParamStore, g: &mut Graph| -> hyfuse_core::Result<NodeId> {
            let (t, v) = (g.param(s, ht), g.param(s, hv));
            let (out_t, out_v) = sub(g, s, t, v, &layers[0])?;
            let a = weighted_sum(g, out_t, w_t.clone())?;
            match out_v {
                Some(out_v) => {
                    let b = weighted_sum(g, out_v, w_v.clone())?;
                    g.add(a, b)
                }
                None => Ok(a),
            }
        };
        let mut g = Graph::new();
        let loss = objective(&store, &mut g)?;
        let mut grads = g.backward(loss, &store)?;
        corrupt(&store, &mut grads, opts);
        let ids: Vec<ParamId> = store.ids().collect();
        let frozen = store.clone();
        let numeric = finite_difference_gradient(
            |s| {
                let mut g = Graph::new();
                let l = objective(s, &mut g)?;
                Ok(g.scalar(l))
            },
            &mut store,
            &ids,
            FD_STEP,
        )?;
        let (err, at) = worst_error(&frozen, &grads, &numeric, &ids)?;
        log::debug!("isolated {name}: worst relative error {err:.3e} in {at}");
        r.measure(format!("{name}_isolated_rel_err"), err, 1e-4);
    }
    Ok(())
}

type SubNet = fn(&mut Graph, &ParamStore, NodeId, NodeId, &MEncoderLayer) -> hyfuse_core::Result<(NodeId, Option<NodeId>)>;

fn isolated_pgi(g: &mut Graph, s: &ParamStore, t: NodeId, v: NodeId, layer: &MEncoderLayer) -> hyfuse_core::Result<(NodeId, Option<NodeId>)> {
    let out = pgi(g, s, t, v, layer, &FusionOptions::new(Ablation::None, 1e-5))?;
    Ok((out.text, Some(out.visual)))
}

fn isolated_caf(g: &mut Graph, s: &ParamStore, t: NodeId, v: NodeId, layer: &MEncoderLayer) -> hyfuse_core::Result<(NodeId, Option<NodeId>)> {
    let sim = caf_similarity(g, t, v)?;
    let agg = caf_aggregate(g, sim, v)?;
    Ok((caf_ffn(g, s, t, agg, layer)?, None))
}

/// Score of one tag path: start, emissions, pairwise, end.
fn path_score(em: &Matrix, trans: &Matrix, path: &[usize]) -> f64 {
    let y = em.cols();
    let mut s = trans[(y, path[0])] + trans[(path[path.len() - 1], y + 1)];
    for (t, &tag) in path.iter().enumerate() {
        s += em[(t, tag)];
        if t > 0 {
            s += trans[(path[t - 1], tag)];
        }
    }
    s
}

fn all_paths(n: usize, y: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..y).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    out
}

/// Forward algorithm and Viterbi against enumeration of every tag path.
fn crf_brute_force(r: &mut SuiteReport) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut max_err = 0.0f64;
    let mut viterbi_misses = 0;
    for _ in 0..100 {
        let (n, y) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let em = normal(n, y, &mut rng);
        let trans = normal(y + 2, y + 2, &mut rng);
        let paths = all_paths(n, y);
        let scores: Vec<f64> = paths.iter().map(|p| path_score(&em, &trans, p)).collect();
        max_err = max_err.max((log_partition_raw(&em, &trans)? - log_sum_exp(&scores)).abs());
        let best = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &s)| if s > b.1 { (i, s) } else { b })
            .0;
        if viterbi_raw(&em, &trans)? != paths[best] {
            viterbi_misses += 1;
        }
    }
    r.measure("log_partition_abs_err", max_err, 1e-8);
    r.measure("viterbi_mismatches", viterbi_misses as f64, 0.0);
    Ok(())
}

/// Rank by sorting: competitors first on ties, so the gold lands last among equals.
fn brute_rank(scores: &[f64], gold: usize, filtered: &[bool]) -> usize {
    let mut pool: Vec<(f64, bool)> = (0..scores.len())
        .filter(|&j| j == gold || !filtered[j])
        .map(|j| (scores[j], j == gold))
        .collect();
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    pool.iter().position(|&(_, g)| g).unwrap() + 1
}

fn brute_prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn prf_mismatch(got: &Prf, expect: (f64, f64, f64)) -> bool {
    (got.precision, got.recall, got.f1) != expect
}

fn random_spans(rng: &mut ChaCha8Rng) -> Vec<Span> {
    let types = ["PER", "LOC", "ORG"];
    let mut set = BTreeSet::new();
    for _ in 0..rng.random_range(0..5) {
        let s = rng.random_range(0..8);
        set.insert((s, s + rng.random_range(1..3), types[rng.random_range(0..3)].to_string()));
    }
    set.into_iter().collect()
}

/// Ranking, micro-F1 and span-F1 against direct counting references.
fn metric_oracles(r: &mut SuiteReport) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut mismatches = 0usize;
    let mut non_monotone = 0usize;
    for _ in 0..100 {
        let queries = rng.random_range(1..=6);
        let mut ranks = Vec::new();
        let mut expect = Vec::new();
        for _ in 0..queries {
            let e = rng.random_range(2..=30);
            let scores: Vec<f64> = (0..e).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
            let gold = rng.random_range(0..e);
            let filtered: Vec<bool> = (0..e).map(|j| j != gold && rng.random_bool(0.2)).collect();
            ranks.push(filtered_rank(&scores, gold, &filtered)?);
            expect.push(brute_rank(&scores, gold, &filtered));
        }
        if ranks != expect {
            mismatches += 1;
        }
        let m = RankingMetrics::from_ranks(&ranks)?;
        let n = expect.len() as f64;
        let hits = |k: usize| expect.iter().filter(|&&x| x <= k).count() as f64 / n;
        let mr = expect.iter().sum::<usize>() as f64 / n;
        if (m.mr, m.hits1, m.hits3, m.hits10) != (mr, hits(1), hits(3), hits(10)) {
            mismatches += 1;
        }
        if !(m.hits1 <= m.hits3 && m.hits3 <= m.hits10) {
            non_monotone += 1;
        }
    }
    for _ in 0..100 {
        let sentences = rng.random_range(1..=4);
        let gold: Vec<Vec<Span>> = (0..sentences).map(|_| random_spans(&mut rng)).collect();
        let pred: Vec<Vec<Span>> = gold
            .iter()
            .map(|g| {
                let mut p: Vec<Span> = g.iter().filter(|_| rng.random_bool(0.7)).cloned().collect();
                p.extend(random_spans(&mut rng).into_iter().take(rng.random_range(0..2)));
                p.sort();
                p.dedup();
                p
            })
            .collect();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in pred.iter().zip(&gold) {
            let hit = p.iter().filter(|s| g.contains(s)).count();
            tp += hit;
            fp += p.len() - hit;
            fn_ += g.len() - hit;
        }
        if prf_mismatch(&span_f1(&pred, &gold)?, brute_prf(tp, fp, fn_)) {
            mismatches += 1;
        }

        let classes = rng.random_range(2..=5);
        let len = rng.random_range(1..=20);
        let gold: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = gold
            .iter()
            .map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..classes) })
            .collect();
        let null = rng.random_bool(0.5).then_some(0);
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for c in (0..classes).filter(|&c| Some(c) != null) {
            tp += pred.iter().zip(&gold).filter(|&(&p, &g)| p == c && g == c).count();
            fp += pred.iter().zip(&gold).filter(|&(&p, &g)| p == c && g != c).count();
            fn_ += pred.iter().zip(&gold).filter(|&(&p, &g)| g == c && p != c).count();
        }
        let got = micro_f1(&pred, &gold, null)?;
        if prf_mismatch(&got, brute_prf(tp, fp, fn_)) {
            mismatches += 1;
        }
        if (got.f1 - brute_prf(got.tp, got.fp, got.fn_).2).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    r.measure("mismatches", mismatches as f64, 0.0);
    r.measure("non_monotone_hits", non_monotone as f64, 0.0);
    Ok(())
}

fn run_fusion(store: &ParamStore, layers: &[MEncoderLayer], ht: &Matrix, hv: &Matrix, ablation: Ablation) -> hyfuse_core::Result<(Matrix, Matrix)> {
    let mut g = Graph::new();
    let (t, v) = (g.constant(ht.clone()), g.constant(hv.clone()));
    let out = m_encoder_forward(&mut g, store, t, v, layers, &FusionOptions::new(ablation, 1e-5), false)?;
    Ok((g.value(out.text).clone(), g.value(out.visual).clone()))
}

/// Reordering the visual rows leaves every textual output unchanged.
fn permutation_invariance(r: &mut SuiteReport) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut max_diff = 0.0f64;
    for _ in 0..100 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=16 / heads);
        let (n, m) = (rng.random_range(1..=8), rng.random_range(2..=8));
        let (store, layers) = fusion_layers(d, heads, rng.random_range(1..=3), &mut rng);
        let (ht, hv) = (normal(n, d, &mut rng), normal(m, d, &mut rng));
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let (t1, _) = run_fusion(&store, &layers, &ht, &hv, Ablation::None)?;
        let (t2, _) = run_fusion(&store, &layers, &ht, &hv.gather_rows(&perm)?, Ablation::None)?;
        max_diff = max_diff.max(t1.max_abs_diff(&t2)?);
    }
    r.measure("max_text_change", max_diff, 1e-9);
    Ok(())
}

/// Reference self-attention on the visual stream with the visual block's weights.
fn plain_visual_attention(store: &ParamStore, layer: &MEncoderLayer, hv: &Matrix, eps: f64) -> hyfuse_core::Result<Matrix> {
    let w = &layer.visual;
    let x = layer_norm(hv, store.value(w.ln1_gamma), store.value(w.ln1_beta), eps)?;
    let mut heads = Vec::new();
    for h in 0..w.heads() {
        let q = x.matmul(store.value(w.wq[h]))?;
        let k = x.matmul(store.value(w.wk[h]))?;
        let v = x.matmul(store.value(w.wv[h]))?;
        let a = softmax_rows(&q.matmul_t(&k)?.scale(1.0 / (q.cols() as f64).sqrt()));
        heads.push(a.matmul(&v)?);
    }
    let refs: Vec<&Matrix> = heads.iter().collect();
    Matrix::concat_cols(&refs)?.matmul(store.value(w.wo))?.add(hv)
}

/// Switched-off components reduce to their plain counterparts.
fn ablation_integrity(r: &mut SuiteReport) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let (mut caf_diff, mut pgi_diff) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=16 / heads);
        let (n, m) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (store, layers) = fusion_layers(d, heads, 1, &mut rng);
        let layer = &layers[0];
        let (ht, hv) = (normal(n, d, &mut rng), normal(m, d, &mut rng));

        // no_caf: LN2(ReLU(h̄W1 + b1)W2 + b2) + h̄ on the textual PGI output
        let mut g = Graph::new();
        let (t, v) = (g.constant(ht.clone()), g.constant(hv.clone()));
        let p = pgi(&mut g, &store, t, v, layer, &FusionOptions::new(Ablation::NoCaf, 1e-5))?;
        let hbar = g.value(p.text).clone();
        let w = &layer.text;
        let inner = relu(&hbar.matmul(store.value(w.w1))?.add_row_broadcast(store.value(w.b1))?);
        let ffn = inner.matmul(store.value(w.w2))?.add_row_broadcast(store.value(w.b2))?;
        let expect = layer_norm(&ffn, store.value(w.ln2_gamma), store.value(w.ln2_beta), 1e-5)?.add(&hbar)?;
        let (got, _) = run_fusion(&store, &layers, &ht, &hv, Ablation::NoCaf)?;
        caf_diff = caf_diff.max(got.max_abs_diff(&expect)?);

        // no_pgi: visual attention is ordinary self-attention
        let mut g = Graph::new();
        let (t, v) = (g.constant(ht.clone()), g.constant(hv.clone()));
        let p = pgi(&mut g, &store, t, v, layer, &FusionOptions::new(Ablation::NoPgi, 1e-5))?;
        let expect = plain_visual_attention(&store, layer, &hv, 1e-5)?;
        pgi_diff = pgi_diff.max(g.value(p.visual).max_abs_diff(&expect)?);
    }
    r.measure("no_caf_ffn_diff", caf_diff, 0.0);
    r.measure("no_pgi_attention_diff", pgi_diff, 1e-12);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_rank_examples() {
        assert_eq!(brute_rank(&[0.5, 0.5, 0.9], 0, &[false; 3]), 3);
        assert_eq!(brute_rank(&[0.5, 0.5, 0.9], 0, &[false, false, true]), 2);
        assert_eq!(all_paths(2, 3).len(), 9);
    }

    #[test]
    fn unknown_suite() {
        assert!(run_suite("nope", &VerifyOptions::default()).is_none());
    }

    #[test]
    fn fast_suites_pass() {
        for s in ["crf-brute-force", "metric-oracles"] {
            let r = run_suite(s, &VerifyOptions::default()).unwrap();
            assert!(r.passed(), "{r}");
        }
    }
}
