//! Device-domain score computation: query-codebook lookup tables,
//! index-gather score aggregation, and softmax normalization.
//!
//! Building the table costs `d * c` multiplications regardless of
//! sequence length; scoring a token is then `g` table lookups and adds.

use crate::error::{Error, Result};
use crate::mat::dot;
use crate::quantizer::{Codebook, KeyIndexMatrix};

/// Per-query table of sub-vector/centroid dot products, shape `g x c`.
///
/// Group-major layout: scoring token `j` walks one entry per group in
/// ascending group order, matching the index matrix row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    values: Vec<f32>,
    g: usize,
    c: usize,
}

impl LookupTable {
    pub fn g(&self) -> usize {
        self.g
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn value(&self, group: usize, index: usize) -> f32 {
        self.values[group * self.c + index]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Raw attention scores for every cached token, plus softmax weights
/// once [`normalize`] has run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f32>,
    pub weights: Option<Vec<f32>>,
}

impl ScoreVector {
    pub fn from_scores(scores: Vec<f32>) -> Self {
        Self {
            scores,
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Dot the query's sub-vectors against every centroid of every group.
pub fn build_table(q: &[f32], cb: &Codebook) -> Result<LookupTable> {
    let cfg = cb.config();
    if q.len() != cfg.d {
        return Err(Error::ShapeMismatch(format!(
            "query length {} does not match head dimension {}",
            q.len(),
            cfg.d
        )));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("query vector"));
    }
    let sd = cfg.sub_dim();
    let mut values = Vec::with_capacity(cfg.g * cfg.c);
    for group in 0..cfg.g {
        let q_sub = &q[group * sd..(group + 1) * sd];
        for m in 0..cfg.c {
            values.push(dot(q_sub, cb.centroid(group, m)) as f32);
        }
    }
    Ok(LookupTable {
        values,
        g: cfg.g,
        c: cfg.c,
    })
}

/// Score every token by summing its `g` table entries, ascending group
/// order, f64 accumulator.
pub fn approx_scores(table: &LookupTable, p: &KeyIndexMatrix) -> Result<ScoreVector> {
    if p.g() != table.g {
        return Err(Error::ShapeMismatch(format!(
            "index matrix has {} groups, table has {}",
            p.g(),
            table.g
        )));
    }
    if let Some(max) = p.max_index() {
        if max as usize >= table.c {
            return Err(Error::IndexOutOfRange {
                what: "table column",
                index: max as usize,
                size: table.c,
            });
        }
    }
    let mut scores = Vec::with_capacity(p.n());
    for token in 0..p.n() {
        let row = p.row(token);
        let mut acc = 0.0f64;
        for (group, &idx) in row.iter().enumerate() {
            acc += table.values[group * table.c + idx as usize] as f64;
        }
        scores.push(acc as f32);
    }
    Ok(ScoreVector::from_scores(scores))
}

/// Softmax of `scores / sqrt(d)` with max subtraction; exponentials and
/// their sum run in f64 so the stored f32 weights sum to 1 within 1e-6.
pub fn normalize(z: &ScoreVector, d: usize) -> Result<ScoreVector> {
    if z.scores.is_empty() {
        return Err(Error::EmptyInput("score vector"));
    }
    if z.scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention scores"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let max = z
        .scores
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64 * scale));
    let exps: Vec<f64> = z
        .scores
        .iter()
        .map(|&x| (x as f64 * scale - max).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    let weights = exps.iter().map(|&e| (e / total) as f32).collect();
    Ok(ScoreVector {
        scores: z.scores.clone(),
        weights: Some(weights),
    })
}
