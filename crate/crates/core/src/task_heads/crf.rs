//! Linear-chain CRF over a BIO tag set.
//!
//! The transition matrix is `(|Y|+2) × (|Y|+2)`: rows/columns `0..|Y|` are real
//! tags, `|Y|` is the virtual start tag and `|Y|+1` the virtual end tag.
//! `transitions[(i, j)]` scores moving from tag `i` to tag `j`.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{log_sum_exp, Matrix};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioTag {
    Outside,
    Begin(String),
    Inside(String),
}

impl BioTag {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(BioTag::Outside);
        }
        match s.split_once('-') {
            Some(("B", ty)) if !ty.is_empty() => Ok(BioTag::Begin(ty.to_string())),
            Some(("I", ty)) if !ty.is_empty() => Ok(BioTag::Inside(ty.to_string())),
            _ => Err(Error::Label(format!("`{s}` is not a BIO tag"))),
        }
    }

    pub fn entity_type(&self) -> Option<&str> {
        match self {
            BioTag::Outside => None,
            BioTag::Begin(t) | BioTag::Inside(t) => Some(t),
        }
    }

    /// Whether `self` may follow `prev` (`None` = sequence start).
    pub fn may_follow(&self, prev: Option<&BioTag>) -> bool {
        match self {
            BioTag::Inside(ty) => matches!(prev, Some(BioTag::Begin(p) | BioTag::Inside(p)) if p == ty),
            _ => true,
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::Outside => write!(f, "O"),
            BioTag::Begin(t) => write!(f, "B-{t}"),
            BioTag::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

/// Ordered BIO tag inventory: `O` first, then `B-X`, `I-X` per type in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<BioTag>,
}

impl TagSet {
    pub fn from_types<I, S>(types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let types: BTreeSet<String> = types.into_iter().map(Into::into).collect();
        let mut tags = vec![BioTag::Outside];
        for t in types {
            tags.push(BioTag::Begin(t.clone()));
            tags.push(BioTag::Inside(t));
        }
        Self { tags }
    }

    /// Single-tag set (`O` only); the degenerate CRF with one possible path.
    pub fn outside_only() -> Self {
        Self {
            tags: vec![BioTag::Outside],
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, i: usize) -> &BioTag {
        &self.tags[i]
    }

    pub fn tags(&self) -> &[BioTag] {
        &self.tags
    }

    pub fn index_of(&self, tag: &BioTag) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn encode(&self, tags: &[BioTag]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| self.index_of(t).ok_or_else(|| Error::Label(format!("tag {t} not in tag set"))))
            .collect()
    }

    /// `(|Y|+2)²` additive mask: `−∞` on BIO-illegal transitions, 0 elsewhere.
    pub fn constraint_mask(&self) -> Matrix {
        let y = self.len();
        let mut mask = Matrix::zeros(y + 2, y + 2);
        for (j, cur) in self.tags.iter().enumerate() {
            if !cur.may_follow(None) {
                mask[(y, j)] = f64::NEG_INFINITY;
            }
            for (i, prev) in self.tags.iter().enumerate() {
                if !cur.may_follow(Some(prev)) {
                    mask[(i, j)] = f64::NEG_INFINITY;
                }
            }
        }
        mask
    }
}

/// Checks BIO well-formedness of a tag sequence.
pub fn validate_bio(tags: &[BioTag]) -> Result<()> {
    let mut prev: Option<&BioTag> = None;
    for (i, t) in tags.iter().enumerate() {
        if !t.may_follow(prev) {
            let p = prev.map_or("<start>".to_string(), ToString::to_string);
            return Err(Error::Label(format!("illegal BIO transition {p} -> {t} at position {i}")));
        }
        prev = Some(t);
    }
    Ok(())
}

/// Extracts `(start, end_exclusive, type)` spans. An `I-X` that does not
/// continue an `X` span opens a new one.
pub fn bio_spans(tags: &[BioTag]) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, t) in tags.iter().enumerate() {
        match t {
            BioTag::Outside => {
                if let Some((s, ty)) = open.take() {
                    spans.push((s, i, ty));
                }
            }
            BioTag::Begin(ty) => {
                if let Some((s, pty)) = open.take() {
                    spans.push((s, i, pty));
                }
                open = Some((i, ty.clone()));
            }
            BioTag::Inside(ty) => match &open {
                Some((_, pty)) if pty == ty => {}
                _ => {
                    if let Some((s, pty)) = open.take() {
                        spans.push((s, i, pty));
                    }
                    open = Some((i, ty.clone()));
                }
            },
        }
    }
    if let Some((s, ty)) = open {
        spans.push((s, tags.len(), ty));
    }
    spans
}

/// Tag inventory plus transition scores.
#[derive(Debug, Clone)]
pub struct CrfParams {
    pub tags: TagSet,
    pub transitions: Matrix,
    pub hard_constraints: bool,
}

impl CrfParams {
    pub fn zeros(tags: TagSet) -> Self {
        let y = tags.len();
        Self {
            tags,
            transitions: Matrix::zeros(y + 2, y + 2),
            hard_constraints: false,
        }
    }

    /// Transitions with the BIO mask applied when hard constraints are on.
    pub fn effective_transitions(&self) -> Result<Matrix> {
        effective_transitions(&self.transitions, &self.tags, self.hard_constraints)
    }
}

pub(crate) fn effective_transitions(trans: &Matrix, tags: &TagSet, hard: bool) -> Result<Matrix> {
    let y = tags.len();
    if trans.shape() != (y + 2, y + 2) {
        return Err(shape_err!("transitions {:?} for {y} tags", trans.shape()));
    }
    if hard {
        trans.add(&tags.constraint_mask())
    } else {
        Ok(trans.clone())
    }
}

fn check_emissions(em: &Matrix, trans: &Matrix) -> Result<usize> {
    let y = em.cols();
    if em.rows() == 0 {
        return Err(shape_err!("CRF needs at least one position"));
    }
    if trans.shape() != (y + 2, y + 2) {
        return Err(shape_err!("emissions width {y} with transitions {:?}", trans.shape()));
    }
    Ok(y)
}

fn forward_scores(em: &Matrix, trans: &Matrix) -> Vec<Vec<f64>> {
    let (n, y) = em.shape();
    let start = y;
    let mut alpha = vec![vec![0.0; y]; n];
    for j in 0..y {
        alpha[0][j] = trans[(start, j)] + em[(0, j)];
    }
    let mut buf = vec![0.0; y];
    for t in 1..n {
        for j in 0..y {
            for i in 0..y {
                buf[i] = alpha[t - 1][i] + trans[(i, j)];
            }
            alpha[t][j] = em[(t, j)] + log_sum_exp(&buf);
        }
    }
    alpha
}

fn backward_scores(em: &Matrix, trans: &Matrix) -> Vec<Vec<f64>> {
    let (n, y) = em.shape();
    let end = y + 1;
    let mut beta = vec![vec![0.0; y]; n];
    for i in 0..y {
        beta[n - 1][i] = trans[(i, end)];
    }
    let mut buf = vec![0.0; y];
    for t in (0..n - 1).rev() {
        for i in 0..y {
            for j in 0..y {
                buf[j] = trans[(i, j)] + em[(t + 1, j)] + beta[t + 1][j];
            }
            beta[t][i] = log_sum_exp(&buf);
        }
    }
    beta
}

/// Log-partition for an arbitrary `n × Y` emission matrix and `(Y+2)²`
/// transitions whose row `Y` is the start state and column `Y+1` the end state.
pub fn log_partition_raw(em: &Matrix, trans: &Matrix) -> Result<f64> {
    let y = check_emissions(em, trans)?;
    let alpha = forward_scores(em, trans);
    let last = alpha.last().expect("n >= 1");
    let fin: Vec<f64> = (0..y).map(|j| last[j] + trans[(j, y + 1)]).collect();
    Ok(log_sum_exp(&fin))
}

pub(crate) fn sequence_score_raw(em: &Matrix, trans: &Matrix, tags: &[usize]) -> Result<f64> {
    let y = check_emissions(em, trans)?;
    if tags.len() != em.rows() {
        return Err(shape_err!("{} tags for {} positions", tags.len(), em.rows()));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= y) {
        return Err(Error::Label(format!("tag index {bad} out of {y}")));
    }
    let mut s = trans[(y, tags[0])] + trans[(tags[tags.len() - 1], y + 1)];
    for (t, &tag) in tags.iter().enumerate() {
        s += em[(t, tag)];
        if t > 0 {
            s += trans[(tags[t - 1], tag)];
        }
    }
    Ok(s)
}

/// Expected feature counts under the CRF distribution.
pub(crate) struct CrfMarginals {
    pub log_z: f64,
    /// `n × |Y|` posterior tag probabilities.
    pub unary: Matrix,
    /// `(|Y|+2)²` expected transition counts (including start/end).
    pub pairwise: Matrix,
}

pub(crate) fn marginals_raw(em: &Matrix, trans: &Matrix) -> Result<CrfMarginals> {
    let y = check_emissions(em, trans)?;
    let n = em.rows();
    let alpha = forward_scores(em, trans);
    let beta = backward_scores(em, trans);
    let fin: Vec<f64> = (0..y).map(|j| alpha[n - 1][j] + trans[(j, y + 1)]).collect();
    let log_z = log_sum_exp(&fin);
    if !log_z.is_finite() {
        return Err(Error::Numeric("CRF partition function is not finite".into()));
    }
    let mut unary = Matrix::zeros(n, y);
    for t in 0..n {
        for j in 0..y {
            unary[(t, j)] = (alpha[t][j] + beta[t][j] - log_z).exp();
        }
    }
    let mut pairwise = Matrix::zeros(y + 2, y + 2);
    for j in 0..y {
        pairwise[(y, j)] = unary[(0, j)];
        pairwise[(j, y + 1)] = unary[(n - 1, j)];
    }
    for t in 0..n - 1 {
        for i in 0..y {
            for j in 0..y {
                let lp = alpha[t][i] + trans[(i, j)] + em[(t + 1, j)] + beta[t + 1][j] - log_z;
                pairwise[(i, j)] += lp.exp();
            }
        }
    }
    Ok(CrfMarginals { log_z, unary, pairwise })
}

/// Viterbi decoding with the same conventions as [`log_partition_raw`].
pub fn viterbi_raw(em: &Matrix, trans: &Matrix) -> Result<Vec<usize>> {
    let y = check_emissions(em, trans)?;
    let n = em.rows();
    let mut score = vec![0.0; y];
    for j in 0..y {
        score[j] = trans[(y, j)] + em[(0, j)];
    }
    let mut back = vec![vec![0usize; y]; n];
    for t in 1..n {
        let mut next = vec![0.0; y];
        for j in 0..y {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..y {
                let s = score[i] + trans[(i, j)];
                // strict comparison keeps the lowest index among ties
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best + em[(t, j)];
            back[t][j] = arg;
        }
        score = next;
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for j in 0..y {
        let s = score[j] + trans[(j, y + 1)];
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}

/// `log Σ_y exp(score(y))` over all `|Y|ⁿ` tag sequences (forward algorithm).
pub fn crf_log_partition(emissions: &Matrix, params: &CrfParams) -> Result<f64> {
    log_partition_raw(emissions, &params.effective_transitions()?)
}

/// Highest-scoring tag sequence.
pub fn crf_viterbi(emissions: &Matrix, params: &CrfParams) -> Result<Vec<usize>> {
    viterbi_raw(emissions, &params.effective_transitions()?)
}

/// Score of one tag sequence under the (masked) transitions.
pub fn crf_sequence_score(emissions: &Matrix, tags: &[usize], params: &CrfParams) -> Result<f64> {
    sequence_score_raw(emissions, &params.effective_transitions()?, tags)
}

/// Negative log-likelihood of `gold`.
pub fn crf_nll(emissions: &Matrix, gold: &[usize], params: &CrfParams) -> Result<f64> {
    if params.hard_constraints {
        let tags: Vec<BioTag> = gold
            .iter()
            .map(|&g| {
                if g < params.tags.len() {
                    Ok(params.tags.tag(g).clone())
                } else {
                    Err(Error::Label(format!("tag index {g} out of range")))
                }
            })
            .collect::<Result<_>>()?;
        validate_bio(&tags)?;
    }
    let trans = params.effective_transitions()?;
    let nll = log_partition_raw(emissions, &trans)? - sequence_score_raw(emissions, &trans, gold)?;
    Ok(nll.max(0.0))
}
