//! The three optimization stages: individual instrument encoders with
//! track-based triplets, main-encoder pretraining on the auxiliary loss alone,
//! and main training on masked triplets plus `λ ·` auxiliary loss.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Piece;
use crate::error::{Error, Result};
use crate::features::{segment_waveform, MelExtractor, MelSegment, SegmentParams};
use crate::hashing;
use crate::models::{Encoder, EncoderConfig, InstrumentEncoder};
use crate::nn::{Adam, AdamConfig};
use crate::objective::{batch_loss, AuxTerm, LossBreakdown, LossShape, TargetEmbedding, TripletTerm};
use crate::pseudomix::MixProvenance;
use crate::sampling::{anchor_targets, SegmentTable, TripletSpec};
use crate::seeding::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub individual_epochs: usize,
    pub optimizer: String,
    pub adam: AdamConfig,
    pub seed: u64,
    pub n_triplets: usize,
    pub interchange_ratio: f64,
    pub per_focus_count: usize,
    pub tempo_bin_bpm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            lambda: 0.1,
            batch_size: 64,
            epochs: 50,
            pretrain_epochs: 20,
            individual_epochs: 20,
            optimizer: "adam".into(),
            adam: AdamConfig::default(),
            seed: 0,
            n_triplets: 2000,
            interchange_ratio: 1.0,
            per_focus_count: 3,
            tempo_bin_bpm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::param("margin and lambda must be non-negative"));
        }
        if self.batch_size < 2 || self.n_triplets == 0 || self.per_focus_count == 0 {
            return Err(Error::param("batch_size >= 2, n_triplets >= 1 and per_focus_count >= 1 required"));
        }
        if self.optimizer != "adam" {
            return Err(Error::param(format!("unsupported optimizer {:?}", self.optimizer)));
        }
        if !(self.adam.lr > 0.0) || !(self.tempo_bin_bpm > 0.0) {
            return Err(Error::param("learning rate and tempo bin width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub stage: String,
    pub epochs: Vec<LossBreakdown>,
    pub steps: Vec<StepLoss>,
}

impl History {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.into(),
            ..Default::default()
        }
    }

    fn close_epoch(&mut self, epoch: usize, lambda: f64) {
        let steps: Vec<&LossBreakdown> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| &s.loss).collect();
        let n = steps.len().max(1) as f64;
        let l_triplet = steps.iter().map(|l| l.l_triplet).sum::<f64>() / n;
        let l_aux = steps.iter().map(|l| l.l_aux).sum::<f64>() / n;
        self.epochs.push(LossBreakdown {
            l_triplet,
            l_aux,
            lambda,
            total: l_triplet + lambda * l_aux,
        });
    }

    /// Mean total loss of the first and last `k` epochs.
    pub fn head_tail_means(&self, k: usize) -> (f64, f64) {
        let k = k.min(self.epochs.len()).max(1);
        let mean = |xs: &[LossBreakdown]| xs.iter().map(|l| l.total).sum::<f64>() / xs.len().max(1) as f64;
        (mean(&self.epochs[..k]), mean(&self.epochs[self.epochs.len() - k..]))
    }
}

/// Feature extraction settings shared by every stage.
#[derive(Debug, Clone)]
pub struct FeatureContext {
    pub extractor: MelExtractor,
    pub segment: SegmentParams,
}

impl FeatureContext {
    pub fn sample_rate(&self) -> u32 {
        self.extractor.params().sample_rate
    }
}

/// Segments of a set of mixes with their normalized mel features, indexed by segment id.
#[derive(Debug, Clone)]
pub struct SegmentBank {
    pub table: SegmentTable,
    pub mels: Vec<MelSegment>,
}

impl SegmentBank {
    /// Mixes are consumed one at a time so only their features stay in memory.
    pub fn from_mixes(mixes: impl IntoIterator<Item = Result<(MixProvenance, Vec<f32>)>>, ctx: &FeatureContext) -> Result<Self> {
        let mut entries = Vec::new();
        let mut by_mix: BTreeMap<u32, Vec<MelSegment>> = BTreeMap::new();
        for item in mixes {
            let (prov, wave) = item?;
            let windows = segment_waveform(&wave, ctx.sample_rate(), &ctx.segment)?;
            let mels = windows.iter().map(|w| ctx.extractor.features(w.slice(&wave))).collect();
            by_mix.insert(prov.mix_id, mels);
            entries.push((prov, windows));
        }
        let table = SegmentTable::build(entries)?;
        let mels = by_mix.into_values().flatten().collect();
        Ok(Self { table, mels })
    }

    pub fn mel(&self, segment: u32) -> &MelSegment {
        &self.mels[segment as usize]
    }

    pub fn len(&self) -> usize {
        self.mels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mels.is_empty()
    }
}

fn piece_lookup<'a>(pieces: &'a [&'a Piece]) -> impl Fn(u32) -> Option<&'a Piece> + Copy + 'a {
    move |id| pieces.iter().find(|p| p.music_id == id).copied()
}

/// Auxiliary targets for the given segments, keyed by segment id.
pub fn targets_for(
    bank: &SegmentBank,
    segments: &BTreeSet<u32>,
    pieces: &[&Piece],
    instruments: &[InstrumentEncoder],
    ctx: &FeatureContext,
    num_conditions: usize,
) -> Result<BTreeMap<u32, TargetEmbedding>> {
    if instruments.len() != num_conditions {
        return Err(Error::Dependency(format!(
            "{} instrument encoders available, {num_conditions} required",
            instruments.len()
        )));
    }
    let ids: Vec<u32> = segments.iter().copied().collect();
    let targets = anchor_targets(
        &bank.table,
        &ids,
        piece_lookup(pieces),
        instruments,
        &ctx.extractor,
        ctx.segment.silence_threshold_db,
    )?;
    Ok(ids.into_iter().zip(targets).collect())
}

/// One optimizer step on a batch; `loss` maps `f64` embedding rows to a loss and its row gradient.
fn optimize_batch(
    enc: &mut Encoder,
    opt: &mut Adam,
    mels: &[&MelSegment],
    loss: impl FnOnce(&[f64]) -> Result<(LossBreakdown, Vec<f64>)>,
) -> Result<Option<LossBreakdown>> {
    let tape = enc.forward_train(mels)?;
    let rows: Vec<f64> = tape.outputs.iter().map(|&v| v as f64).collect();
    let (lb, grad) = loss(&rows)?;
    if !lb.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Ok(None);
    }
    let d_out: Vec<f32> = grad.iter().map(|&g| g as f32).collect();
    let grads = enc.backward(&tape, &d_out);
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(None);
    }
    opt.step(&mut enc.params.data, &grads);
    enc.update_running_stats(&tape);
    Ok(Some(lb))
}

/// Index triples `(anchor, positive, negative)` over segments labelled by piece:
/// positives come from the anchor's piece, negatives from any other piece.
/// Anchors whose piece has a single segment are skipped.
pub fn individual_triplets<R: Rng>(piece_of: &[u32], rng: &mut R) -> Vec<(usize, usize, usize)> {
    let mut by_piece: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &p) in piece_of.iter().enumerate() {
        by_piece.entry(p).or_default().push(i);
    }
    let mut anchors: Vec<usize> = (0..piece_of.len()).filter(|&i| by_piece[&piece_of[i]].len() > 1).collect();
    anchors.shuffle(rng);
    anchors
        .into_iter()
        .map(|a| {
            let same: Vec<usize> = by_piece[&piece_of[a]].iter().copied().filter(|&i| i != a).collect();
            let others: Vec<usize> = (0..piece_of.len()).filter(|&i| piece_of[i] != piece_of[a]).collect();
            let p = same[rng.gen_range(0..same.len())];
            let n = others[rng.gen_range(0..others.len())];
            (a, p, n)
        })
        .collect()
}

/// Segments of the stem `c` of each piece, with the owning piece id.
pub fn stem_segments(pieces: &[&Piece], c: usize, ctx: &FeatureContext) -> Result<(Vec<u32>, Vec<MelSegment>)> {
    let mut owners = Vec::new();
    let mut mels = Vec::new();
    for p in pieces.iter().filter(|p| p.is_present(c)) {
        for w in segment_waveform(p.stem(c), ctx.sample_rate(), &ctx.segment)? {
            owners.push(p.music_id);
            mels.push(ctx.extractor.features(w.slice(p.stem(c))));
        }
    }
    Ok((owners, mels))
}

/// Trains `g_c` with the track-based triplet loss on isolated stems of condition `c`.
pub fn pretrain_individual(
    pieces: &[&Piece],
    c: usize,
    config: EncoderConfig,
    train: &TrainConfig,
    ctx: &FeatureContext,
) -> Result<(InstrumentEncoder, History)> {
    train.validate()?;
    let (owners, mels) = stem_segments(pieces, c, ctx)?;
    let distinct: BTreeSet<u32> = owners.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::EmptyDataset(format!(
            "condition {c}: {} piece(s) with non-silent stem segments, need at least 2",
            distinct.len()
        )));
    }
    let mut g = InstrumentEncoder::new(c, config, derive_seed(train.seed, "g", c as u64))?;
    let shape = LossShape {
        num_conditions: 1,
        dim: g.dim(),
        margin: train.margin,
        lambda: 0.0,
    };
    let mut opt = Adam::new(train.adam.clone(), g.encoder.num_params());
    let mut history = History::new(&format!("individual-{c}"));
    for epoch in 0..train.individual_epochs {
        let mut rng = rng_for(train.seed, "individual", ((c as u64) << 32) | epoch as u64);
        let triplets = individual_triplets(&owners, &mut rng);
        for (batch, chunk) in triplets.chunks(train.batch_size).enumerate() {
            let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
            let mut order = Vec::new();
            let mut row_of = |i: usize, order: &mut Vec<usize>| {
                *rows.entry(i).or_insert_with(|| {
                    order.push(i);
                    order.len() - 1
                })
            };
            let terms: Vec<TripletTerm> = chunk
                .iter()
                .map(|&(a, p, n)| TripletTerm {
                    anchor: row_of(a, &mut order),
                    positive: row_of(p, &mut order),
                    negative: row_of(n, &mut order),
                    condition: 0,
                })
                .collect();
            let batch_mels: Vec<&MelSegment> = order.iter().map(|&i| &mels[i]).collect();
            let lb = optimize_batch(&mut g.encoder, &mut opt, &batch_mels, |r| batch_loss(r, &shape, &terms, &[]))?
                .ok_or_else(|| Error::NonFiniteLoss {
                    batch,
                    triplets: chunk.iter().map(|t| t.0).collect(),
                })?;
            history.steps.push(StepLoss { epoch, batch, loss: lb });
        }
        history.close_epoch(epoch, 0.0);
    }
    Ok((g, history))
}

/// Mean auxiliary loss of `f` over the given segments (inference mode).
pub fn mean_aux_loss(f: &Encoder, bank: &SegmentBank, targets: &BTreeMap<u32, TargetEmbedding>) -> Result<f64> {
    let ids: Vec<u32> = targets.iter().filter(|(_, t)| !t.flagged).map(|(&s, _)| s).collect();
    if ids.is_empty() {
        return Err(Error::Evaluation("no segment has a non-degenerate target".into()));
    }
    let mels: Vec<&MelSegment> = ids.iter().map(|&s| bank.mel(s)).collect();
    let embs = f.encode_many(&mels)?;
    let total: f64 = ids
        .iter()
        .zip(&embs)
        .map(|(s, e)| {
            let e64: Vec<f64> = e.iter().map(|&v| v as f64).collect();
            crate::objective::euclidean(&e64, &targets[s].values)
        })
        .sum();
    Ok(total / ids.len() as f64)
}

/// Fits `f` to the auxiliary targets of every segment in `bank` (pure `L_M`).
pub fn pretrain_main(
    bank: &SegmentBank,
    targets: &BTreeMap<u32, TargetEmbedding>,
    mut f: Encoder,
    train: &TrainConfig,
) -> Result<(Encoder, History)> {
    train.validate()?;
    let ids: Vec<u32> = targets.iter().filter(|(_, t)| !t.flagged).map(|(&s, _)| s).collect();
    if ids.len() < 2 {
        return Err(Error::EmptyDataset("pretraining needs at least two segments with targets".into()));
    }
    let shape = LossShape {
        num_conditions: 1,
        dim: f.output_dim(),
        margin: train.margin,
        lambda: 1.0,
    };
    let mut opt = Adam::new(train.adam.clone(), f.num_params());
    let mut history = History::new("pretrain-main");
    for epoch in 0..train.pretrain_epochs {
        let mut order = ids.clone();
        order.shuffle(&mut rng_for(train.seed, "pretrain", epoch as u64));
        for (batch, chunk) in order.chunks(train.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mels: Vec<&MelSegment> = chunk.iter().map(|&s| bank.mel(s)).collect();
            let aux: Vec<AuxTerm> = chunk
                .iter()
                .enumerate()
                .map(|(row, s)| AuxTerm {
                    row,
                    target: targets[s].clone(),
                })
                .collect();
            let lb = optimize_batch(&mut f, &mut opt, &mels, |r| {
                let (lb, g) = batch_loss(r, &shape, &[], &aux)?;
                Ok((LossBreakdown { l_triplet: 0.0, ..lb }, g))
            })?
            .ok_or_else(|| Error::NonFiniteLoss {
                batch,
                triplets: chunk.iter().map(|&s| s as usize).collect(),
            })?;
            history.steps.push(StepLoss { epoch, batch, loss: lb });
        }
        history.close_epoch(epoch, 1.0);
    }
    Ok((f, history))
}

/// Main training on `L_T + λ L_M`. Triplets are processed in `index` order;
/// `targets` may be `None` when `λ = 0`.
pub fn train_main(
    bank: &SegmentBank,
    triplets: &[TripletSpec],
    targets: Option<&BTreeMap<u32, TargetEmbedding>>,
    mut f: Encoder,
    train: &TrainConfig,
    num_conditions: usize,
) -> Result<(Encoder, History)> {
    train.validate()?;
    if f.output_dim() % num_conditions != 0 {
        return Err(Error::shape("embedding width is not a multiple of the condition count"));
    }
    if train.lambda > 0.0 && targets.is_none() {
        return Err(Error::Dependency("auxiliary targets are required when lambda > 0".into()));
    }
    let mut sorted = triplets.to_vec();
    sorted.sort_by_key(|t| t.index);
    for t in &sorted {
        for s in [t.anchor, t.positive, t.negative] {
            if s as usize >= bank.len() {
                return Err(Error::Provenance(format!("triplet {} references unknown segment {s}", t.index)));
            }
        }
    }
    let shape = LossShape {
        num_conditions,
        dim: f.output_dim() / num_conditions,
        margin: train.margin,
        lambda: train.lambda,
    };
    let mut opt = Adam::new(train.adam.clone(), f.num_params());
    let mut history = History::new("train");
    for epoch in 0..train.epochs {
        for (batch, chunk) in sorted.chunks(train.batch_size).enumerate() {
            let mut rows: BTreeMap<u32, usize> = BTreeMap::new();
            let mut order: Vec<u32> = Vec::new();
            let mut row_of = |s: u32| {
                *rows.entry(s).or_insert_with(|| {
                    order.push(s);
                    order.len() - 1
                })
            };
            let terms: Vec<TripletTerm> = chunk
                .iter()
                .map(|t| TripletTerm {
                    anchor: row_of(t.anchor),
                    positive: row_of(t.positive),
                    negative: row_of(t.negative),
                    condition: t.condition,
                })
                .collect();
            let mut aux = Vec::new();
            if let Some(targets) = targets {
                let anchors: BTreeSet<u32> = chunk.iter().map(|t| t.anchor).collect();
                for a in anchors {
                    let target = targets
                        .get(&a)
                        .ok_or_else(|| Error::Provenance(format!("no auxiliary target for anchor segment {a}")))?;
                    aux.push(AuxTerm {
                        row: rows[&a],
                        target: target.clone(),
                    });
                }
            }
            if order.len() < 2 {
                continue;
            }
            let mels: Vec<&MelSegment> = order.iter().map(|&s| bank.mel(s)).collect();
            let lb = optimize_batch(&mut f, &mut opt, &mels, |r| batch_loss(r, &shape, &terms, &aux))?.ok_or_else(|| {
                Error::NonFiniteLoss {
                    batch,
                    triplets: chunk.iter().map(|t| t.index as usize).collect(),
                }
            })?;
            history.steps.push(StepLoss { epoch, batch, loss: lb });
        }
        history.close_epoch(epoch, train.lambda);
    }
    Ok((f, history))
}

/// Record of one pipeline stage: effective config, hashed inputs and outputs, loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config: serde_json::Value,
    /// Logical input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the manifest) to sha256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub history: Vec<History>,
}

impl RunManifest {
    pub fn new(stage: &str, config: serde_json::Value) -> Self {
        Self {
            stage: stage.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            history: Vec::new(),
        }
    }

    /// Hashes `dir/rel` and records it as an output.
    pub fn add_output(&mut self, dir: &Path, rel: &str) -> Result<()> {
        self.outputs.insert(rel.into(), hashing::file_sha256(&dir.join(rel))?);
        Ok(())
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hashing::sha256_hex(&serde_json::to_vec(self)?))
    }

    /// Checks every recorded output against the files under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (rel, hash) in &self.outputs {
            hashing::verify_file(&dir.join(rel), hash)?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn individual_triplets_respect_track_identity() {
        let owners = [1, 1, 1, 2, 2, 3];
        for s in 0..20 {
            let mut rng = rng_for(s, "t", 0);
            let ts = individual_triplets(&owners, &mut rng);
            assert_eq!(ts.len(), 5);
            for (a, p, n) in ts {
                assert_ne!(a, p);
                assert_eq!(owners[a], owners[p]);
                assert_ne!(owners[a], owners[n]);
            }
        }
    }

    #[test]
    fn epoch_summary_satisfies_the_decomposition() {
        let mut h = History::new("x");
        for (b, (t, m)) in [(0.3, 0.7), (0.1, 0.9)].into_iter().enumerate() {
            h.steps.push(StepLoss {
                epoch: 0,
                batch: b,
                loss: crate::objective::combined_loss(t, m, 0.1).unwrap(),
            });
        }
        h.close_epoch(0, 0.1);
        let e = h.epochs[0];
        assert_eq!(e.total, e.l_triplet + e.lambda * e.l_aux);
    }
}
