//! End-to-end toy pipeline: synthetic data, instrument encoders, pseudo-mix
//! corpus, triplets, the three training variants and both evaluations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, SynthConfig};
use crate::dataset::{mix_full, Dataset, Piece, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    eval_embedding_accuracy, eval_subspace, EmbeddingStore, EvalReport, ListeningParams, RowMeta, TsneParams,
};
use crate::features::{segment_waveform, MelExtractor, MelParams, MelSegment, SegmentParams};
use crate::models::{Encoder, EncoderConfig, InstrumentEncoder};
use crate::nn::Activation;
use crate::pseudomix::{plan_pseudomix_corpus, render_plan, tempo_group, MixPlan, MixProvenance, TempoGrouping};
use crate::sampling::{build_triplet_set, TripletSetParams, TripletSpec};
use crate::seeding::derive_seed;
use crate::training::{
    pretrain_individual, pretrain_main, targets_for, train_main, FeatureContext, History, SegmentBank, TrainConfig,
};

/// Which parts of the method a main-model training uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Basic triplets only.
    #[serde(rename = "basic")]
    Basic,
    /// Pretraining on the auxiliary loss, then basic triplets plus the auxiliary term.
    #[serde(rename = "aux+basic")]
    AuxBasic,
    /// As `AuxBasic`, with interchanged triplets added.
    #[serde(rename = "aux+basic+add")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Basic, Variant::AuxBasic, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::AuxBasic => "aux+basic",
            Variant::Full => "aux+basic+add",
        }
    }

    pub fn uses_aux(self) -> bool {
        self != Variant::Basic
    }

    pub fn interchange_ratio(self, configured: f64) -> f64 {
        if self == Variant::Full {
            configured
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub channels: Vec<usize>,
    pub fc_hidden: usize,
    pub activation: Activation,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub mel: MelParams,
    pub segment: SegmentParams,
    /// Length of the long evaluation inputs.
    pub long_segment_s: f64,
    pub num_conditions: usize,
    pub dim: usize,
    pub main_model: ModelShape,
    pub instrument_model: ModelShape,
    pub train: TrainConfig,
    pub k: usize,
    pub eval_per_focus_count: usize,
    pub min_non_silent_fraction: f64,
    pub tsne: TsneParams,
    pub listening: ListeningParams,
}

impl PipelineConfig {
    /// Sizes that train in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            synth: SynthConfig {
                pretrain_pieces: 0,
                train_pieces: 12,
                test_pieces: 10,
                ..SynthConfig::default()
            },
            mel: MelParams {
                n_mels: 32,
                hop: 512,
                ..MelParams::default()
            },
            segment: SegmentParams::default(),
            long_segment_s: 10.0,
            num_conditions: crate::dataset::NUM_CONDITIONS,
            dim: 16,
            main_model: ModelShape {
                channels: vec![16, 32, 64, 64],
                fc_hidden: 256,
                activation: Activation::Relu,
                batch_norm: true,
            },
            instrument_model: ModelShape {
                channels: vec![8, 16, 16, 16],
                fc_hidden: 64,
                activation: Activation::Relu,
                batch_norm: true,
            },
            train: TrainConfig {
                epochs: 12,
                pretrain_epochs: 6,
                individual_epochs: 10,
                batch_size: 32,
                ..TrainConfig::default()
            },
            k: 5,
            eval_per_focus_count: 4,
            min_non_silent_fraction: 0.1,
            tsne: TsneParams::default(),
            listening: ListeningParams::default(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn encoder_config(&self, shape: &ModelShape, output_dim: usize) -> EncoderConfig {
        let mut cfg = EncoderConfig::with_channels(self.mel.n_mels, &shape.channels, shape.fc_hidden, output_dim);
        cfg.activation = shape.activation;
        cfg.batch_norm = shape.batch_norm;
        cfg
    }

    pub fn main_config(&self) -> EncoderConfig {
        self.encoder_config(&self.main_model, self.num_conditions * self.dim)
    }

    pub fn instrument_config(&self) -> EncoderConfig {
        self.encoder_config(&self.instrument_model, self.dim)
    }

    pub fn context(&self, length_s: f64) -> Result<FeatureContext> {
        Ok(FeatureContext {
            extractor: MelExtractor::new(self.mel)?,
            segment: self.segment.clone().with_length(length_s),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.main_config().validate()?;
        self.instrument_config().validate()?;
        if self.dim == 0 || self.num_conditions == 0 || self.k == 0 {
            return Err(Error::param("dim, num_conditions and k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_non_silent_fraction) {
            return Err(Error::param("min_non_silent_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Training-split mixes rendered and featurized, with the triplets sampled on them.
#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    pub bank: SegmentBank,
    pub triplets: Vec<TripletSpec>,
}

pub fn build_training_corpus(cfg: &PipelineConfig, pieces: &[&Piece], interchange_ratio: f64) -> Result<TrainingCorpus> {
    let ctx = cfg.context(cfg.segment.length_s)?;
    let (plans, grouping) = plan_split_mixes(cfg, pieces, Split::Train)?;
    let bank = SegmentBank::from_mixes(
        plans.iter().map(|p| render_plan(p, pieces, &grouping).map(|m| (m.provenance, m.waveform))),
        &ctx,
    )?;
    let triplets = build_triplet_set(
        &bank.table,
        &TripletSetParams {
            n_triplets: cfg.train.n_triplets,
            interchange_ratio,
            num_conditions: cfg.num_conditions,
            seed: cfg.train.seed,
        },
    )?;
    Ok(TrainingCorpus { bank, triplets })
}

/// Keeps only the basic triplets, renumbered densely in their original order.
pub fn basic_only(triplets: &[TripletSpec]) -> Vec<TripletSpec> {
    triplets
        .iter()
        .filter(|t| t.derived_from.is_none())
        .enumerate()
        .map(|(i, t)| TripletSpec { index: i as u32, ..*t })
        .collect()
}

pub fn train_instruments(cfg: &PipelineConfig, pieces: &[&Piece]) -> Result<Vec<(InstrumentEncoder, History)>> {
    let ctx = cfg.context(cfg.segment.length_s)?;
    (0..cfg.num_conditions)
        .map(|c| pretrain_individual(pieces, c, cfg.instrument_config(), &cfg.train, &ctx))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub variant: Variant,
    pub encoder: Encoder,
    pub histories: Vec<History>,
}

/// Trains one main-model variant on a shared corpus. `corpus` must have been
/// sampled with interchanged triplets; the basic variants drop them.
pub fn train_variant(
    cfg: &PipelineConfig,
    variant: Variant,
    corpus: &TrainingCorpus,
    pieces: &[&Piece],
    instruments: &[InstrumentEncoder],
) -> Result<TrainedModel> {
    let ctx = cfg.context(cfg.segment.length_s)?;
    let f = Encoder::new(cfg.main_config(), derive_seed(cfg.train.seed, "f", 0))?;
    let triplets = if variant == Variant::Full { corpus.triplets.clone() } else { basic_only(&corpus.triplets) };
    let mut histories = Vec::new();
    let mut train = cfg.train.clone();
    let (f, targets) = if variant.uses_aux() {
        let all: BTreeSet<u32> = (0..corpus.bank.len() as u32).collect();
        let targets = targets_for(&corpus.bank, &all, pieces, instruments, &ctx, cfg.num_conditions)?;
        let (f, h) = pretrain_main(&corpus.bank, &targets, f, &train)?;
        histories.push(h);
        (f, Some(targets))
    } else {
        train.lambda = 0.0;
        (f, None)
    };
    let (f, h) = train_main(&corpus.bank, &triplets, targets.as_ref(), f, &train, cfg.num_conditions)?;
    histories.push(h);
    Ok(TrainedModel {
        variant,
        encoder: f,
        histories,
    })
}

/// Fraction of `length_s` windows of `wave` that are not silent.
pub fn non_silent_fraction(wave: &[f32], sample_rate: u32, params: &SegmentParams) -> Result<f64> {
    let all = SegmentParams {
        silence_threshold_db: f64::NEG_INFINITY,
        max_segments: usize::MAX,
        ..params.clone()
    };
    let total = segment_waveform(wave, sample_rate, &all)?.len();
    let kept = segment_waveform(wave, sample_rate, &SegmentParams { max_segments: usize::MAX, ..params.clone() })?.len();
    Ok(if total == 0 { 0.0 } else { kept as f64 / total as f64 })
}

/// Full-mix segments of each test piece, labelled by music id. Pieces whose
/// non-silent fraction is below `min_fraction` are skipped and reported.
pub fn music_id_store(
    f: &Encoder,
    pieces: &[&Piece],
    ctx: &FeatureContext,
    min_fraction: f64,
) -> Result<(EmbeddingStore, Vec<u32>)> {
    let mut store = EmbeddingStore::new(f.output_dim());
    let mut dropped = Vec::new();
    let sr = ctx.sample_rate();
    for p in pieces {
        let mix = mix_full(p)?;
        if non_silent_fraction(&mix.samples, sr, &ctx.segment)? < min_fraction {
            log::warn!("piece {} dropped: too few non-silent segments", p.music_id);
            dropped.push(p.music_id);
            continue;
        }
        let windows = segment_waveform(&mix.samples, sr, &ctx.segment)?;
        let mels: Vec<MelSegment> = windows.iter().map(|w| ctx.extractor.features(w.slice(&mix.samples))).collect();
        let refs: Vec<&MelSegment> = mels.iter().collect();
        for (w, e) in windows.iter().zip(f.encode_many(&refs)?) {
            store.push(
                &e,
                RowMeta {
                    segment: format!("piece{}@{}", p.music_id, w.start_sample),
                    label: p.music_id,
                    mix_id: p.music_id,
                    focus_piece_id: p.music_id,
                    accomp_piece_id: p.music_id,
                },
            )?;
        }
    }
    Ok((store, dropped))
}

/// Mix plans for a split: training mixes use `train.per_focus_count` donors,
/// test mixes use `eval_per_focus_count`.
pub fn plan_split_mixes(cfg: &PipelineConfig, pieces: &[&Piece], split: Split) -> Result<(Vec<MixPlan>, TempoGrouping)> {
    let grouping = tempo_group(pieces.iter().copied(), cfg.train.tempo_bin_bpm)?;
    let plans = match split {
        Split::Test => plan_pseudomix_corpus(pieces, &grouping, cfg.eval_per_focus_count, derive_seed(cfg.synth.seed, "test-mixes", 0))?,
        _ => plan_pseudomix_corpus(pieces, &grouping, cfg.train.per_focus_count, cfg.train.seed)?,
    };
    Ok((plans, grouping))
}

/// One store per focus condition with the segments of that condition's pseudo-mixes.
pub fn subspace_stores_from(
    f: &Encoder,
    mixes: impl IntoIterator<Item = Result<(MixProvenance, Vec<f32>)>>,
    ctx: &FeatureContext,
    num_conditions: usize,
) -> Result<Vec<EmbeddingStore>> {
    let mut stores: Vec<EmbeddingStore> = (0..num_conditions).map(|_| EmbeddingStore::new(f.output_dim())).collect();
    for item in mixes {
        let (prov, wave) = item?;
        if prov.focus_condition >= num_conditions {
            return Err(Error::Provenance(format!("mix {} has focus condition {}", prov.mix_id, prov.focus_condition)));
        }
        let windows = segment_waveform(&wave, ctx.sample_rate(), &ctx.segment)?;
        let mels: Vec<MelSegment> = windows.iter().map(|w| ctx.extractor.features(w.slice(&wave))).collect();
        let refs: Vec<&MelSegment> = mels.iter().collect();
        for (w, e) in windows.iter().zip(f.encode_many(&refs)?) {
            stores[prov.focus_condition].push(
                &e,
                RowMeta {
                    segment: format!("mix{}@{}", prov.mix_id, w.start_sample),
                    label: prov.focus_piece_id,
                    mix_id: prov.mix_id,
                    focus_piece_id: prov.focus_piece_id,
                    accomp_piece_id: prov.accomp_piece_id,
                },
            )?;
        }
    }
    Ok(stores)
}

/// Runs `eval_subspace` for every (focus condition, subspace) pair.
pub fn subspace_matrix(stores: &[EmbeddingStore], num_conditions: usize, k: usize, length_s: f64) -> Result<Vec<Vec<EvalReport>>> {
    stores
        .iter()
        .enumerate()
        .map(|(c, store)| {
            (0..num_conditions)
                .map(|m| eval_subspace(store, c, m, num_conditions, k, length_s))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub knn_short: EvalReport,
    pub knn_long: EvalReport,
    /// Row `c`, column `m`: pseudo-mixes focused on `c`, distances in subspace `m`.
    pub subspace: Vec<Vec<EvalReport>>,
    pub dropped_pieces: Vec<u32>,
}

impl EvalSummary {
    pub fn subspace_accuracy(&self, c: usize, m: usize) -> f64 {
        self.subspace[c][m].rows[0].accuracy
    }

    /// Mean accuracy with the matching subspace.
    pub fn matched_mean(&self) -> f64 {
        let n = self.subspace.len();
        (0..n).map(|c| self.subspace_accuracy(c, c)).sum::<f64>() / n as f64
    }

    /// Mean accuracy with a uniformly chosen other subspace.
    pub fn mismatched_mean(&self) -> f64 {
        let n = self.subspace.len();
        (0..n)
            .map(|c| (0..n).filter(|&m| m != c).map(|m| self.subspace_accuracy(c, m)).sum::<f64>() / (n - 1) as f64)
            .sum::<f64>()
            / n as f64
    }

    pub fn exclusion_violations(&self) -> usize {
        self.subspace
            .iter()
            .flatten()
            .filter_map(|r| r.exclusion.as_ref())
            .map(|e| e.violations)
            .sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = self.knn_short.to_table();
        s.push('\n');
        s.push_str(&self.knn_long.to_table());
        s.push_str("\npseudo-mix subspace accuracy (rows: focus condition, columns: subspace)\n");
        for row in &self.subspace {
            let cells: Vec<String> = row.iter().map(|r| format!("{:6.2}%", 100.0 * r.rows[0].accuracy)).collect();
            s.push_str(&format!("{:<8} {}\n", row[0].rows[0].condition, cells.join(" ")));
        }
        s
    }
}

pub fn evaluate(cfg: &PipelineConfig, f: &Encoder, pieces: &[&Piece]) -> Result<EvalSummary> {
    let short = cfg.context(cfg.segment.length_s)?;
    let long = cfg.context(cfg.long_segment_s)?;
    let (store_s, mut dropped) = music_id_store(f, pieces, &short, cfg.min_non_silent_fraction)?;
    let (store_l, dropped_l) = music_id_store(f, pieces, &long, cfg.min_non_silent_fraction)?;
    dropped.extend(dropped_l);
    dropped.sort_unstable();
    dropped.dedup();
    let knn_short = eval_embedding_accuracy(&store_s, cfg.num_conditions, cfg.k, cfg.segment.length_s)?;
    let knn_long = eval_embedding_accuracy(&store_l, cfg.num_conditions, cfg.k, cfg.long_segment_s)?;
    let (plans, grouping) = plan_split_mixes(cfg, pieces, Split::Test)?;
    let stores = subspace_stores_from(
        f,
        plans.iter().map(|p| render_plan(p, pieces, &grouping).map(|m| (m.provenance, m.waveform))),
        &long,
        cfg.num_conditions,
    )?;
    let subspace = subspace_matrix(&stores, cfg.num_conditions, cfg.k, cfg.long_segment_s)?;
    Ok(EvalSummary {
        knn_short,
        knn_long,
        subspace,
        dropped_pieces: dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub mean_accuracy_long: f64,
    pub per_condition_long: Vec<f64>,
    pub matched_subspace: f64,
    pub mismatched_subspace: f64,
}

/// Trains every requested variant for one seed and evaluates each on the test split.
pub fn run_seed(cfg: &PipelineConfig, data: &Dataset, variants: &[Variant]) -> Result<BTreeMap<Variant, (TrainedModel, EvalSummary)>> {
    let inst_pieces = data.pretraining_pieces();
    let train_pieces = data.split(Split::Train);
    let test_pieces = data.split(Split::Test);
    let instruments: Vec<InstrumentEncoder> = train_instruments(cfg, &inst_pieces)?.into_iter().map(|(g, _)| g).collect();
    let corpus = build_training_corpus(cfg, &train_pieces, cfg.train.interchange_ratio)?;
    let mut out = BTreeMap::new();
    for &v in variants {
        log::info!("training {} (seed {})", v.name(), cfg.train.seed);
        let model = train_variant(cfg, v, &corpus, &train_pieces, &instruments)?;
        let summary = evaluate(cfg, &model.encoder, &test_pieces)?;
        out.insert(v, (model, summary));
    }
    Ok(out)
}

pub fn summarize(variant: Variant, seed: u64, s: &EvalSummary) -> VariantResult {
    VariantResult {
        variant,
        seed,
        mean_accuracy_long: s.knn_long.mean_accuracy(),
        per_condition_long: s.knn_long.rows.iter().map(|r| r.accuracy).collect(),
        matched_subspace: s.matched_mean(),
        mismatched_subspace: s.mismatched_mean(),
    }
}

/// The synthetic dataset of a pipeline config.
pub fn toy_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    generate_dataset(&cfg.synth)
}
