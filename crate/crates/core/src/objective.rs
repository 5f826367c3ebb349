//! Loss mathematics on embeddings, in `f64`: condition masks, masked distance,
//! triplet losses, the auxiliary target and loss, and their batch combination.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Indicator of the `D` coordinates owned by condition `c` in a `C·D` embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMask {
    pub condition: usize,
    pub dim: usize,
    pub num_conditions: usize,
    pub values: Vec<f64>,
}

impl ConditionMask {
    pub fn range(&self) -> Range<usize> {
        self.condition * self.dim..(self.condition + 1) * self.dim
    }
}

pub fn condition_mask(c: usize, dim: usize, num_conditions: usize) -> Result<ConditionMask> {
    if c >= num_conditions {
        return Err(Error::param(format!("condition {c} out of range 0..{num_conditions}")));
    }
    if dim == 0 {
        return Err(Error::param("subspace width must be at least 1"));
    }
    let values = (0..dim * num_conditions)
        .map(|d| if (c * dim..(c + 1) * dim).contains(&d) { 1.0 } else { 0.0 })
        .collect();
    Ok(ConditionMask {
        condition: c,
        dim,
        num_conditions,
        values,
    })
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `‖a ⊙ m − b ⊙ m‖₂` for an arbitrary elementwise mask.
pub fn masked_distance(a: &[f64], b: &[f64], mask: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    same_len(a, mask)?;
    Ok(a.iter()
        .zip(b)
        .zip(mask)
        .map(|((x, y), m)| (x * m - y * m).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn masked_triplet_loss(a: &[f64], p: &[f64], n: &[f64], mask: &[f64], delta: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::param(format!("margin {delta} must be non-negative")));
    }
    Ok((masked_distance(a, p, mask)? - masked_distance(a, n, mask)? + delta).max(0.0))
}

pub fn plain_triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    masked_triplet_loss(a, p, n, &vec![1.0; a.len()], margin)
}

/// Normalized concatenation of per-condition instrument embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEmbedding {
    pub values: Vec<f64>,
    /// Set when every block is zero, so no unit-norm target exists.
    pub flagged: bool,
}

/// Builds `y / ‖y‖₂` with a zero block for every absent condition.
pub fn target_embedding(blocks: &[Option<Vec<f64>>], dim: usize) -> Result<TargetEmbedding> {
    let mut y = Vec::with_capacity(blocks.len() * dim);
    for (c, b) in blocks.iter().enumerate() {
        match b {
            Some(v) if v.len() != dim => {
                return Err(Error::shape(format!("block {c} has width {}, expected {dim}", v.len())))
            }
            Some(v) => y.extend_from_slice(v),
            None => y.extend(std::iter::repeat(0.0).take(dim)),
        }
    }
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Ok(TargetEmbedding {
            values: vec![0.0; y.len()],
            flagged: true,
        });
    }
    y.iter_mut().for_each(|v| *v /= norm);
    Ok(TargetEmbedding {
        values: y,
        flagged: false,
    })
}

pub fn auxiliary_loss(f: &[f64], target: &[f64]) -> Result<f64> {
    same_len(f, target)?;
    Ok(euclidean(f, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_triplet: f64,
    pub l_aux: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn combined_loss(l_triplet: f64, l_aux: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("lambda {lambda} must be non-negative")));
    }
    Ok(LossBreakdown {
        l_triplet,
        l_aux,
        lambda,
        total: l_triplet + lambda * l_aux,
    })
}

/// A triplet over rows of a batch embedding matrix, compared in subspace `condition`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub condition: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxTerm {
    pub row: usize,
    pub target: TargetEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossShape {
    pub num_conditions: usize,
    pub dim: usize,
    pub margin: f64,
    pub lambda: f64,
}

impl LossShape {
    pub fn embedding_len(&self) -> usize {
        self.num_conditions * self.dim
    }
}

/// Mean masked triplet loss plus `λ ·` mean auxiliary loss over unflagged terms,
/// and its gradient with respect to every row of `rows` (`n × C·D`, row-major).
pub fn batch_loss(
    rows: &[f64],
    shape: &LossShape,
    triplets: &[TripletTerm],
    aux: &[AuxTerm],
) -> Result<(LossBreakdown, Vec<f64>)> {
    let e = shape.embedding_len();
    if e == 0 || rows.len() % e != 0 {
        return Err(Error::shape("row buffer is not a whole number of embeddings"));
    }
    let n_rows = rows.len() / e;
    let row = |i: usize| &rows[i * e..(i + 1) * e];
    let mut grad = vec![0.0; rows.len()];

    let mut l_t = 0.0;
    if !triplets.is_empty() {
        let w = 1.0 / triplets.len() as f64;
        for t in triplets {
            if [t.anchor, t.positive, t.negative].iter().any(|&i| i >= n_rows) || t.condition >= shape.num_conditions {
                return Err(Error::shape(format!("triplet {t:?} out of range")));
            }
            let r = t.condition * shape.dim..(t.condition + 1) * shape.dim;
            let (a, p, n) = (&row(t.anchor)[r.clone()], &row(t.positive)[r.clone()], &row(t.negative)[r.clone()]);
            let dp = euclidean(a, p);
            let dn = euclidean(a, n);
            let raw = dp - dn + shape.margin;
            if raw <= 0.0 {
                continue;
            }
            l_t += w * raw;
            for (k, d) in r.enumerate() {
                let gp = if dp > 0.0 { (a[k] - p[k]) / dp } else { 0.0 };
                let gn = if dn > 0.0 { (a[k] - n[k]) / dn } else { 0.0 };
                grad[t.anchor * e + d] += w * (gp - gn);
                grad[t.positive * e + d] -= w * gp;
                grad[t.negative * e + d] += w * gn;
            }
        }
    }

    let active: Vec<&AuxTerm> = aux.iter().filter(|a| !a.target.flagged).collect();
    let mut l_m = 0.0;
    if !active.is_empty() {
        let w = 1.0 / active.len() as f64;
        for a in active {
            if a.row >= n_rows || a.target.values.len() != e {
                return Err(Error::shape("auxiliary term out of range"));
            }
            let f = row(a.row);
            let dist = euclidean(f, &a.target.values);
            l_m += w * dist;
            if dist > 0.0 && shape.lambda != 0.0 {
                for d in 0..e {
                    grad[a.row * e + d] += shape.lambda * w * (f[d] - a.target.values[d]) / dist;
                }
            }
        }
    }
    Ok((combined_loss(l_t, l_m, shape.lambda)?, grad))
}
