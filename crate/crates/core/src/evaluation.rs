//! kNN music-ID evaluation, pseudo-mix subspace evaluation with the exclusion
//! rule, 2-D projections, and listening-test stimulus export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::dataset::{condition_name, mix_full, Piece};
use crate::error::{Error, Result};
use crate::features::{segment_waveform, MelExtractor, SegmentParams, SegmentWindow};
use crate::hashing;
use crate::models::Encoder;
use crate::objective::condition_mask;
use crate::seeding::rng_for;

/// Metadata of one stored embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    /// Human-readable segment reference, e.g. `mix12@48000`.
    pub segment: String,
    /// Label used for kNN voting.
    pub label: u32,
    pub mix_id: u32,
    pub focus_piece_id: u32,
    pub accomp_piece_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub rows: Vec<f64>,
    pub meta: Vec<RowMeta>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn push(&mut self, embedding: &[f32], meta: RowMeta) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::shape(format!("embedding width {} != {}", embedding.len(), self.dim)));
        }
        self.rows.extend(embedding.iter().map(|&v| v as f64));
        self.meta.push(meta);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub predicted: u32,
    /// Neighbour rows, nearest first.
    pub neighbors: Vec<usize>,
    pub k_used: usize,
}

/// Majority vote over the `k` nearest rows not excluded. Ties go to the label
/// with the smaller summed distance, then the smaller label.
pub fn knn_predict(
    query: &[f64],
    store: &EmbeddingStore,
    mask: &[f64],
    k: usize,
    exclude: impl Fn(usize) -> bool,
) -> Result<KnnResult> {
    if query.len() != store.dim || mask.len() != store.dim {
        return Err(Error::shape("query, mask and store widths differ"));
    }
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    let mut cands: Vec<(f64, usize)> = (0..store.len())
        .filter(|&i| !exclude(i))
        .map(|i| {
            let d = store
                .row(i)
                .iter()
                .zip(query)
                .zip(mask)
                .map(|((a, b), m)| (a * m - b * m).powi(2))
                .sum::<f64>()
                .sqrt();
            (d, i)
        })
        .collect();
    if cands.is_empty() {
        return Err(Error::Evaluation("reference set is empty".into()));
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k_used = k.min(cands.len());
    let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for &(d, i) in &cands[..k_used] {
        let e = votes.entry(store.meta[i].label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    let predicted = votes
        .iter()
        .min_by(|(la, (va, da)), (lb, (vb, db))| vb.cmp(va).then(da.total_cmp(db)).then(la.cmp(lb)))
        .map(|(&l, _)| l)
        .expect("at least one vote");
    Ok(KnnResult {
        predicted,
        neighbors: cands[..k_used].iter().map(|&(_, i)| i).collect(),
        k_used,
    })
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(correct: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = total as f64;
    let p = correct as f64 / n;
    let den = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / den;
    let half = z * ((p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt()) / den;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// Condition whose pseudo-mixes (or test pieces) are queried.
    pub condition: String,
    /// Subspace used for distances.
    pub subspace: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl AccuracyRow {
    fn new(condition: String, subspace: String, correct: usize, total: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(correct, total);
        Self {
            condition,
            subspace,
            correct,
            total,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            ci_low,
            ci_high,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionStats {
    pub queries: usize,
    pub excluded_rows: usize,
    /// Reference rows sharing (focus, accompaniment) with their query. Must be zero.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub input_length_s: f64,
    pub k: usize,
    pub rows: Vec<AccuracyRow>,
    #[serde(default)]
    pub exclusion: Option<ExclusionStats>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn accuracy(&self, condition: &str, subspace: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.subspace == subspace)
            .map(|r| r.accuracy)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{} (input {} s, k = {})\n", self.kind, self.input_length_s, self.k);
        let _ = writeln!(s, "{:<10} {:<10} {:>8} {:>7} {:>9} {:>17}", "queries", "subspace", "correct", "total", "accuracy", "95% CI");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<10} {:>8} {:>7} {:>8.2}% {:>7.2}%-{:>6.2}%",
                r.condition,
                r.subspace,
                r.correct,
                r.total,
                100.0 * r.accuracy,
                100.0 * r.ci_low,
                100.0 * r.ci_high
            );
        }
        if let Some(e) = &self.exclusion {
            let _ = writeln!(s, "exclusion: {} queries, {} rows excluded, {} violations", e.queries, e.excluded_rows, e.violations);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

fn clip_k(k: usize, store_len: usize, warnings: &mut Vec<String>) -> usize {
    if store_len >= 1 && k > store_len - 1 {
        let clipped = (store_len - 1).max(1);
        let msg = format!("k = {k} exceeds the {} available references; using k = {clipped}", store_len - 1);
        log::warn!("{msg}");
        warnings.push(msg);
        clipped
    } else {
        k
    }
}

/// Leave-one-out kNN music-ID accuracy with each condition's subspace mask.
pub fn eval_embedding_accuracy(
    store: &EmbeddingStore,
    num_conditions: usize,
    k: usize,
    input_length_s: f64,
) -> Result<EvalReport> {
    let ids: BTreeSet<u32> = store.meta.iter().map(|m| m.label).collect();
    if ids.len() < 2 {
        return Err(Error::Evaluation(format!("need at least 2 test pieces, found {}", ids.len())));
    }
    if store.dim % num_conditions != 0 {
        return Err(Error::shape("store width is not a multiple of the condition count"));
    }
    let dim = store.dim / num_conditions;
    let mut warnings = Vec::new();
    let k = clip_k(k, store.len(), &mut warnings);
    let mut rows = Vec::new();
    for c in 0..num_conditions {
        let mask = condition_mask(c, dim, num_conditions)?;
        let mut correct = 0;
        for q in 0..store.len() {
            let r = knn_predict(store.row(q), store, &mask.values, k, |i| i == q)?;
            correct += (r.predicted == store.meta[q].label) as usize;
        }
        rows.push(AccuracyRow::new(condition_name(c), condition_name(c), correct, store.len()));
    }
    Ok(EvalReport {
        kind: "knn-music-id".into(),
        input_length_s,
        k,
        rows,
        exclusion: None,
        warnings,
        config: serde_json::Value::Null,
    })
}

/// Pseudo-mix subspace evaluation for mixes focused on condition `c`, measuring
/// distances in subspace `mask_condition`. Labels must be focus piece ids.
/// All segments of the query's own mix are removed from the references.
pub fn eval_subspace(
    store: &EmbeddingStore,
    c: usize,
    mask_condition: usize,
    num_conditions: usize,
    k: usize,
    input_length_s: f64,
) -> Result<EvalReport> {
    if store.is_empty() {
        return Err(Error::Evaluation("empty pseudo-mix store".into()));
    }
    let dim = store.dim / num_conditions;
    let mask = condition_mask(mask_condition, dim, num_conditions)?;
    let mut warnings = Vec::new();
    let mut stats = ExclusionStats::default();
    let mut correct = 0;
    let mut k_eff = k;
    for q in 0..store.len() {
        let qm = &store.meta[q];
        let excluded = |i: usize| store.meta[i].mix_id == qm.mix_id;
        let n_excluded = (0..store.len()).filter(|&i| excluded(i)).count();
        if n_excluded == store.len() {
            return Err(Error::Evaluation(format!("exclusion of mix {} empties the reference set", qm.mix_id)));
        }
        let refs = store.len() - n_excluded;
        if k > refs && k_eff > refs {
            k_eff = refs;
            warnings.push(format!("k clipped to {refs} references"));
        }
        let r = knn_predict(store.row(q), store, &mask.values, k, excluded)?;
        stats.queries += 1;
        stats.excluded_rows += n_excluded;
        stats.violations += r
            .neighbors
            .iter()
            .filter(|&&i| {
                let m = &store.meta[i];
                i == q || (m.focus_piece_id == qm.focus_piece_id && m.accomp_piece_id == qm.accomp_piece_id)
            })
            .count();
        correct += (r.predicted == qm.focus_piece_id) as usize;
    }
    Ok(EvalReport {
        kind: "pseudo-mix-subspace".into(),
        input_length_s,
        k: k_eff,
        rows: vec![AccuracyRow::new(
            condition_name(c),
            condition_name(mask_condition),
            correct,
            store.len(),
        )],
        exclusion: Some(stats),
        warnings,
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Pca,
    Tsne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 10.0,
            iterations: 500,
            seed: 0,
        }
    }
}

/// Projection onto the top two principal axes. Each axis is signed so that its
/// largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::param(format!("PCA needs at least 3 rows, got {n}")));
    }
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let s = if big < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| s * x).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let mut out = [0.0; 2];
            for (o, axis) in out.iter_mut().zip(&axes) {
                *o = row.iter().zip(axis).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect())
}

/// Exact t-SNE with early exaggeration, momentum and adaptive gains.
pub fn tsne_2d(points: &[Vec<f64>], params: &TsneParams) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::param(format!("t-SNE needs at least 3 rows, got {n}")));
    }
    if !(params.perplexity > 0.0) || params.perplexity >= n as f64 {
        return Err(Error::param(format!("perplexity {} must lie in (0, {n})", params.perplexity)));
    }
    let d2: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum()
        })
        .collect();
    let target = params.perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let row_min = (0..n).filter(|&j| j != i).map(|j| d2[i * n + j]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut hsum = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-(d2[i * n + j] - row_min) * beta).exp();
                p[i * n + j] = w;
                sum += w;
                hsum += w * (d2[i * n + j] - row_min);
            }
            let entropy = sum.ln() + beta * hsum / sum;
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = (0..n).filter(|&j| j != i).map(|j| p[i * n + j]).sum();
        for j in 0..n {
            p[i * n + j] = if j == i { 0.0 } else { p[i * n + j] / sum };
        }
    }
    let mut pj = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = rng_for(params.seed, "tsne", 0);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let mut vel = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let eta = (n as f64 / 48.0).max(50.0);
    let exaggeration_iters = (params.iterations / 4).min(250);
    let mut num = vec![0.0f64; n * n];
    for it in 0..params.iterations {
        let exag = if it < exaggeration_iters { 12.0 } else { 1.0 };
        let momentum = if it < exaggeration_iters { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dy = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                    let q = 1.0 / (1.0 + dy[0] * dy[0] + dy[1] * dy[1]);
                    num[i * n + j] = q;
                    zsum += q;
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in (0..n).filter(|&j| j != i) {
                let q = num[i * n + j];
                let coef = 4.0 * (exag * pj[i * n + j] - q / zsum) * q;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (g[a] > 0.0) != (vel[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                vel[i][a] = momentum * vel[i][a] - eta * gains[i][a] * g[a];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let c = [y.iter().map(|v| v[0]).sum::<f64>() / n as f64, y.iter().map(|v| v[1]).sum::<f64>() / n as f64];
        for v in &mut y {
            v[0] -= c[0];
            v[1] -= c[1];
        }
    }
    Ok(y)
}

fn palette(label: u32) -> image::Rgb<u8> {
    let h = (label as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let s = |v: f64| (40.0 + 190.0 * v) as u8;
    image::Rgb([s(r), s(g), s(b)])
}

/// Writes `coords.csv` and `scatter.png` for the masked store rows projected to 2-D.
pub fn export_visualization(
    store: &EmbeddingStore,
    mask: &[f64],
    method: Projection,
    tsne: &TsneParams,
    out_dir: &Path,
) -> Result<Vec<[f64; 2]>> {
    if mask.len() != store.dim {
        return Err(Error::shape("mask width differs from the store"));
    }
    let points: Vec<Vec<f64>> = (0..store.len())
        .map(|i| store.row(i).iter().zip(mask).map(|(a, m)| a * m).collect())
        .collect();
    let coords = match method {
        Projection::Pca => pca_2d(&points)?,
        Projection::Tsne => tsne_2d(&points, tsne)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("segment,x,y,music_id\n");
    for (m, c) in store.meta.iter().zip(&coords) {
        let _ = writeln!(csv, "{},{:.17e},{:.17e},{}", m.segment, c[0], c[1], m.label);
    }
    std::fs::write(out_dir.join("coords.csv"), csv)?;

    const SIZE: u32 = 512;
    const PAD: f64 = 16.0;
    let mut img = image::RgbImage::from_pixel(SIZE, SIZE, image::Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &coords {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let span = |a: usize| (hi[a] - lo[a]).max(1e-12);
    for (m, c) in store.meta.iter().zip(&coords) {
        let px = PAD + (c[0] - lo[0]) / span(0) * (SIZE as f64 - 2.0 * PAD);
        let py = PAD + (hi[1] - c[1]) / span(1) * (SIZE as f64 - 2.0 * PAD);
        for dx in -2i32..=2 {
            for dy in -2i32..=2 {
                let (x, y) = (px as i32 + dx, py as i32 + dy);
                if (0..SIZE as i32).contains(&x) && (0..SIZE as i32).contains(&y) {
                    img.put_pixel(x as u32, y as u32, palette(m.label));
                }
            }
        }
    }
    img.save(out_dir.join("scatter.png"))?;
    Ok(coords)
}

/// Which alternative of a stimulus set is closer to the reference clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRef {
    pub file: String,
    pub piece_id: u32,
    pub start_sample: usize,
    pub len_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListeningSet {
    pub set_id: usize,
    pub instrument: String,
    pub condition: usize,
    /// `"xab"` or `"xyc"`.
    pub set_type: String,
    pub reference: ClipRef,
    pub first: ClipRef,
    pub second: ClipRef,
    pub distance_first: f64,
    pub distance_second: f64,
    pub answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListeningBundle {
    pub sets: Vec<ListeningSet>,
    pub sample_rate: u32,
    pub clip_length_s: f64,
    /// File name to sha256, for every WAV in the bundle.
    pub files: BTreeMap<String, String>,
    pub bundle_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListeningParams {
    pub n_query_pieces: usize,
    pub conditions: Vec<usize>,
    pub clip_length_s: f64,
    pub num_conditions: usize,
    pub seed: u64,
}

impl Default for ListeningParams {
    fn default() -> Self {
        Self {
            n_query_pieces: 8,
            conditions: vec![0, 1, 2, 3],
            clip_length_s: 10.0,
            num_conditions: crate::dataset::NUM_CONDITIONS,
            seed: 0,
        }
    }
}

/// Embeds the full-mix window of `piece` under `f` and returns its subspace-`c` distance to `other`.
pub fn clip_embedding(f: &Encoder, extractor: &MelExtractor, piece: &Piece, window: &SegmentWindow) -> Result<Vec<f64>> {
    let mix = mix_full(piece)?;
    let mel = extractor.features(window.slice(&mix.samples));
    Ok(f.encode(&mel)?.into_iter().map(f64::from).collect())
}

/// Builds the `{x, a, b}` and `{x, y, c}` stimulus sets for every instrument and
/// query piece. Clips are stem audio; the answer key compares the main encoder's
/// embeddings of the full-mix windows at the same times in the instrument's subspace.
pub fn export_listening_sets(
    pieces: &[&Piece],
    f: &Encoder,
    extractor: &MelExtractor,
    params: &ListeningParams,
    silence_threshold_db: f64,
    out_dir: &Path,
) -> Result<ListeningBundle> {
    if pieces.len() < 4 {
        return Err(Error::Export(format!("need at least 4 test pieces, got {}", pieces.len())));
    }
    let sr = extractor.params().sample_rate;
    let seg = SegmentParams {
        length_s: params.clip_length_s,
        overlap: 0.5,
        max_segments: usize::MAX,
        silence_threshold_db,
    };
    let dim = f.output_dim() / params.num_conditions;
    std::fs::create_dir_all(out_dir)?;
    let mut sets = Vec::new();
    let mut files = BTreeMap::new();
    let mut cache: BTreeMap<(u32, usize), Vec<f64>> = BTreeMap::new();

    for &c in &params.conditions {
        let mask = condition_mask(c, dim, params.num_conditions)?;
        let r = mask.range();
        let mut windows: BTreeMap<u32, Vec<SegmentWindow>> = BTreeMap::new();
        for p in pieces {
            let w = if p.is_present(c) { segment_waveform(p.stem(c), sr, &seg)? } else { Vec::new() };
            windows.insert(p.music_id, w);
        }
        let lacking: Vec<u32> = windows.iter().filter(|(_, w)| w.len() < 2).map(|(&id, _)| id).collect();
        let eligible: Vec<u32> = windows.iter().filter(|(_, w)| w.len() >= 2).map(|(&id, _)| id).collect();
        if eligible.len() < params.n_query_pieces.max(4) {
            return Err(Error::Export(format!(
                "{}: only {} pieces have two non-silent {} s clips; lacking: {lacking:?}",
                condition_name(c),
                eligible.len(),
                params.clip_length_s
            )));
        }
        let mut rng = rng_for(params.seed, "listening", c as u64);
        let queries: Vec<u32> = eligible.choose_multiple(&mut rng, params.n_query_pieces).copied().collect();
        for (q, &x_id) in queries.iter().enumerate() {
            let mut rng = rng_for(params.seed, "listening-set", ((c as u64) << 16) | q as u64);
            let xw = &windows[&x_id];
            let xi = rng.gen_range(0..xw.len());
            let far: Vec<usize> = (0..xw.len())
                .filter(|&j| j != xi && xw[j].start_sample.abs_diff(xw[xi].start_sample) >= xw[xi].len_samples)
                .collect();
            let yi = if far.is_empty() {
                *(0..xw.len()).filter(|&j| j != xi).collect::<Vec<_>>().choose(&mut rng).unwrap()
            } else {
                *far.choose(&mut rng).unwrap()
            };
            let others: Vec<u32> = eligible.iter().copied().filter(|&id| id != x_id).collect();
            let abc: Vec<u32> = others.choose_multiple(&mut rng, 3).copied().collect();
            let pick = |id: u32, rng: &mut rand_chacha::ChaCha8Rng| {
                let ws = &windows[&id];
                ws[rng.gen_range(0..ws.len())]
            };
            let clips = [
                ("x", x_id, xw[xi]),
                ("y", x_id, xw[yi]),
                ("a", abc[0], pick(abc[0], &mut rng)),
                ("b", abc[1], pick(abc[1], &mut rng)),
                ("c", abc[2], pick(abc[2], &mut rng)),
            ];
            let mut refs = BTreeMap::new();
            let mut embs = BTreeMap::new();
            for (name, id, w) in clips {
                let piece = pieces.iter().find(|p| p.music_id == id).copied().expect("piece");
                let file = format!("{}_q{q}_{name}.wav", condition_name(c));
                audio::write_wav(&out_dir.join(&file), w.slice(piece.stem(c)), sr)?;
                files.insert(file.clone(), hashing::file_sha256(&out_dir.join(&file))?);
                let key = (id, w.start_sample);
                if !cache.contains_key(&key) {
                    cache.insert(key, clip_embedding(f, extractor, piece, &w)?);
                }
                embs.insert(name, cache[&key][r.clone()].to_vec());
                refs.insert(
                    name,
                    ClipRef {
                        file,
                        piece_id: id,
                        start_sample: w.start_sample,
                        len_samples: w.len_samples,
                    },
                );
            }
            for (set_type, first, second) in [("xab", "a", "b"), ("xyc", "y", "c")] {
                let d1 = crate::objective::euclidean(&embs["x"], &embs[first]);
                let d2 = crate::objective::euclidean(&embs["x"], &embs[second]);
                sets.push(ListeningSet {
                    set_id: sets.len(),
                    instrument: condition_name(c),
                    condition: c,
                    set_type: set_type.into(),
                    reference: refs["x"].clone(),
                    first: refs[first].clone(),
                    second: refs[second].clone(),
                    distance_first: d1,
                    distance_second: d2,
                    answer: if d1 <= d2 { Answer::First } else { Answer::Second },
                });
            }
        }
    }
    let bundle_hash = hashing::sha256_hex(
        serde_json::to_string(&(&sets, &files))?.as_bytes(),
    );
    let bundle = ListeningBundle {
        sets,
        sample_rate: sr,
        clip_length_s: params.clip_length_s,
        files,
        bundle_hash,
    };
    std::fs::write(out_dir.join("answer_key.json"), serde_json::to_vec_pretty(&bundle)?)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(points: &[(Vec<f64>, u32)]) -> EmbeddingStore {
        let dim = points[0].0.len();
        let mut s = EmbeddingStore::new(dim);
        for (i, (p, l)) in points.iter().enumerate() {
            let v: Vec<f32> = p.iter().map(|&x| x as f32).collect();
            s.push(
                &v,
                RowMeta {
                    segment: format!("s{i}"),
                    label: *l,
                    mix_id: i as u32,
                    focus_piece_id: *l,
                    accomp_piece_id: 0,
                },
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn unanimous_vote() {
        let pts: Vec<(Vec<f64>, u32)> = (0..5).map(|i| (vec![i as f64 * 0.01], 7)).chain([(vec![5.0], 1), (vec![6.0], 2)]).collect();
        let s = store(&pts);
        assert_eq!(knn_predict(&[0.0], &s, &[1.0], 5, |_| false).unwrap().predicted, 7);
    }

    #[test]
    fn tie_goes_to_smaller_summed_distance() {
        // Neighbours labelled [3, 3, 5, 5, 9]; label 3's pair is closer in sum.
        let s = store(&[
            (vec![1.0], 5),
            (vec![1.5], 3),
            (vec![1.6], 3),
            (vec![2.0], 5),
            (vec![2.5], 9),
            (vec![10.0], 9),
        ]);
        let r = knn_predict(&[0.0], &s, &[1.0], 5, |_| false).unwrap();
        // sums: 3 -> 3.1, 5 -> 3.0; label 5 wins on distance.
        assert_eq!(r.predicted, 5);
        let s = store(&[(vec![1.0], 5), (vec![1.1], 3), (vec![1.2], 3), (vec![2.0], 5), (vec![2.5], 9)]);
        assert_eq!(knn_predict(&[0.0], &s, &[1.0], 5, |_| false).unwrap().predicted, 3);
        // exact tie in votes and distance: smaller label
        let s = store(&[(vec![1.0], 8), (vec![-1.0], 4)]);
        assert_eq!(knn_predict(&[0.0], &s, &[1.0], 2, |_| false).unwrap().predicted, 4);
    }

    #[test]
    fn empty_reference_set_is_an_error() {
        let s = store(&[(vec![1.0], 1)]);
        assert!(matches!(knn_predict(&[0.0], &s, &[1.0], 1, |_| true), Err(Error::Evaluation(_))));
    }

    #[test]
    fn k_is_clipped_with_a_warning() {
        let s = store(&[(vec![0.0, 0.0], 1), (vec![1.0, 1.0], 2), (vec![2.0, 2.0], 3)]);
        let r = eval_embedding_accuracy(&s, 2, 5, 3.0).unwrap();
        assert_eq!(r.k, 2);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate() {
        let (lo, hi) = wilson_interval(40, 100);
        assert!(lo < 0.4 && 0.4 < hi);
        assert!((lo - 0.3094).abs() < 1e-3 && (hi - 0.4980).abs() < 1e-3);
    }

    #[test]
    fn pca_recovers_planar_points() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let (u, v) = ((i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos());
                vec![u + v, u - v, 2.0 * v, 0.0]
            })
            .collect();
        let y = pca_2d(&pts).unwrap();
        // Pairwise distances are preserved by the projection.
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d_in = crate::objective::euclidean(&pts[i], &pts[j]);
                let d_out = ((y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2)).sqrt();
                assert!((d_in - d_out).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn tsne_is_seeded_and_separates_clusters() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i / 10) as f64 * 10.0 + (i % 10) as f64 * 0.01, (i % 7) as f64 * 0.01]).collect();
        let p = TsneParams { perplexity: 5.0, iterations: 300, seed: 4 };
        let a = tsne_2d(&pts, &p).unwrap();
        assert_eq!(a, tsne_2d(&pts, &p).unwrap());
        for i in 0..a.len() {
            let nearest = (0..a.len())
                .filter(|&j| j != i)
                .min_by(|&x, &y| {
                    let d = |j: usize| (a[i][0] - a[j][0]).powi(2) + (a[i][1] - a[j][1]).powi(2);
                    d(x).total_cmp(&d(y))
                })
                .unwrap();
            assert_eq!(nearest / 10, i / 10, "point {i} lands next to another cluster");
        }
        assert!(tsne_2d(&pts[..2], &p).is_err());
    }

    #[test]
    fn visualization_files_have_one_row_per_embedding() {
        let s = store(&(0..6).map(|i| (vec![i as f64, (i * i) as f64, 1.0], i as u32 % 2)).collect::<Vec<_>>());
        let dir = tempfile::tempdir().unwrap();
        export_visualization(&s, &[1.0, 1.0, 0.0], Projection::Pca, &TsneParams::default(), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("coords.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(dir.path().join("scatter.png").exists());
    }
}
