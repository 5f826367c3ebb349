//! Multi-stem pieces: synthesis, ingestion, manifests and full mixes.

mod ingest;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio;
use crate::error::{Error, Result};

pub use ingest::ingest_stem_directory;
pub use synth::{generate_dataset, synthesize_piece, SynthConfig};

/// Number of instrument conditions (and embedding subspaces).
pub const NUM_CONDITIONS: usize = 5;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_SILENCE_DB: f64 = -60.0;

/// Instrument condition; the discriminant is the subspace index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Drums = 0,
    Bass = 1,
    Piano = 2,
    Guitar = 3,
    Others = 4,
}

impl Condition {
    pub const ALL: [Condition; NUM_CONDITIONS] = [
        Condition::Drums,
        Condition::Bass,
        Condition::Piano,
        Condition::Guitar,
        Condition::Others,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(c: usize) -> Result<Self> {
        Self::ALL
            .get(c)
            .copied()
            .ok_or_else(|| Error::param(format!("condition index {c} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Drums => "drums",
            Condition::Bass => "bass",
            Condition::Piano => "piano",
            Condition::Guitar => "guitar",
            Condition::Others => "others",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn condition_name(c: usize) -> String {
    Condition::from_index(c)
        .map(|c| c.name().to_string())
        .unwrap_or_else(|_| format!("condition-{c}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

/// A multi-stem piece. All stems share one sample rate and one length.
#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub music_id: u32,
    pub tempo_bpm: f64,
    pub first_onset_s: f64,
    pub sample_rate: u32,
    /// One waveform per condition; absent stems are all-zero.
    pub stems: Vec<Vec<f32>>,
    /// Conditions whose stem RMS exceeds the silence threshold.
    pub present: BTreeSet<usize>,
}

impl Piece {
    pub fn new(
        music_id: u32,
        tempo_bpm: f64,
        first_onset_s: f64,
        sample_rate: u32,
        stems: Vec<Vec<f32>>,
        silence_threshold_db: f64,
    ) -> Result<Self> {
        if !(tempo_bpm > 0.0) || !(first_onset_s >= 0.0) || sample_rate == 0 {
            return Err(Error::param(format!(
                "piece {music_id}: tempo {tempo_bpm}, onset {first_onset_s}, rate {sample_rate}"
            )));
        }
        if stems.len() != NUM_CONDITIONS {
            return Err(Error::shape(format!(
                "piece {music_id} has {} stems, expected {NUM_CONDITIONS}",
                stems.len()
            )));
        }
        let len = stems[0].len();
        if len == 0 || stems.iter().any(|s| s.len() != len) {
            return Err(Error::shape(format!("piece {music_id}: stems differ in length")));
        }
        let present = stems
            .iter()
            .enumerate()
            .filter(|(_, s)| !audio::is_silent(s, silence_threshold_db))
            .map(|(c, _)| c)
            .collect();
        Ok(Self {
            music_id,
            tempo_bpm,
            first_onset_s,
            sample_rate,
            stems,
            present,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.stems[0].len()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    pub fn is_present(&self, c: usize) -> bool {
        self.present.contains(&c)
    }

    pub fn stem(&self, c: usize) -> &[f32] {
        &self.stems[c]
    }
}

/// Peak-safe mixture with the scalar gain that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedAudio {
    pub samples: Vec<f32>,
    pub gain: f64,
}

/// A stem placed into a mix starting at `offset` samples (negative offsets trim the head).
pub(crate) struct PlacedStem<'a> {
    pub samples: &'a [f32],
    pub offset: isize,
}

/// Sums placed stems into a buffer of `len` samples and applies
/// `gain = min(1, 0.99 / peak(sum))`.
pub(crate) fn mix_placed(len: usize, stems: &[PlacedStem<'_>]) -> MixedAudio {
    let mut acc = vec![0.0f64; len];
    for stem in stems {
        for (i, &s) in stem.samples.iter().enumerate() {
            let t = i as isize + stem.offset;
            if t >= 0 && (t as usize) < len {
                acc[t as usize] += s as f64;
            }
        }
    }
    let peak = acc.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let gain = if peak > 0.0 { (0.99 / peak).min(1.0) } else { 1.0 };
    MixedAudio {
        samples: acc.iter().map(|&v| (gain * v) as f32).collect(),
        gain,
    }
}

/// The self-mix: all stems of a piece summed with peak-safe gain.
pub fn mix_full(piece: &Piece) -> Result<MixedAudio> {
    if piece.present.is_empty() {
        return Err(Error::EmptyMix(piece.music_id));
    }
    let placed: Vec<PlacedStem<'_>> = piece
        .stems
        .iter()
        .map(|s| PlacedStem {
            samples: s,
            offset: 0,
        })
        .collect();
    Ok(mix_placed(piece.num_samples(), &placed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPiece {
    pub music_id: u32,
    pub tempo_bpm: f64,
    pub first_onset_s: f64,
    pub duration_s: f64,
    pub split: Split,
    /// Stem name to WAV path relative to the manifest.
    pub paths: BTreeMap<String, String>,
    pub present: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pieces: Vec<ManifestPiece>,
    pub sample_rate_hz: u32,
    pub seed: u64,
    pub silence_threshold_db: f64,
}

/// Pieces with split tags, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pieces: Vec<Piece>,
    pub splits: Vec<Split>,
    pub sample_rate_hz: u32,
    pub seed: u64,
    pub silence_threshold_db: f64,
    pub source_names: Vec<Option<String>>,
}

impl Dataset {
    pub fn piece(&self, music_id: u32) -> Option<&Piece> {
        self.pieces.iter().find(|p| p.music_id == music_id)
    }

    pub fn split(&self, split: Split) -> Vec<&Piece> {
        self.pieces
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p)
            .collect()
    }

    /// Pieces used for pretraining: the pretrain split, or the train split when
    /// no piece is tagged for pretraining.
    pub fn pretraining_pieces(&self) -> Vec<&Piece> {
        let pre = self.split(Split::Pretrain);
        if pre.is_empty() {
            self.split(Split::Train)
        } else {
            pre
        }
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pieces {
            if !seen.insert(p.music_id) {
                return Err(Error::Constraint(format!("duplicate music id {}", p.music_id)));
            }
        }
        Ok(())
    }

    /// Writes every stem as `<dir>/<music_id>/<stem>.wav` plus `<dir>/manifest.json`.
    /// Silent stems are not written.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        self.check_unique_ids()?;
        std::fs::create_dir_all(dir)?;
        let mut pieces = Vec::with_capacity(self.pieces.len());
        for ((piece, split), name) in self.pieces.iter().zip(&self.splits).zip(&self.source_names) {
            let piece_dir = dir.join(piece.music_id.to_string());
            std::fs::create_dir_all(&piece_dir)?;
            let mut paths = BTreeMap::new();
            for c in Condition::ALL {
                if !piece.is_present(c.index()) {
                    continue;
                }
                let rel = format!("{}/{}.wav", piece.music_id, c.name());
                audio::write_wav(&dir.join(&rel), piece.stem(c.index()), piece.sample_rate)?;
                paths.insert(c.name().to_string(), rel);
            }
            pieces.push(ManifestPiece {
                music_id: piece.music_id,
                tempo_bpm: piece.tempo_bpm,
                first_onset_s: piece.first_onset_s,
                duration_s: piece.duration_s(),
                split: *split,
                paths,
                present: piece.present.iter().copied().collect(),
                source_name: name.clone(),
            });
        }
        let manifest = DatasetManifest {
            pieces,
            sample_rate_hz: self.sample_rate_hz,
            seed: self.seed,
            silence_threshold_db: self.silence_threshold_db,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Loads a dataset from a manifest, checking every referenced file.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(&manifest, &base)
    }

    pub fn from_manifest(manifest: &DatasetManifest, base: &Path) -> Result<Self> {
        if manifest.pieces.is_empty() {
            return Err(Error::EmptyDataset(base.display().to_string()));
        }
        let mut pieces = Vec::new();
        let mut splits = Vec::new();
        let mut names = Vec::new();
        for mp in &manifest.pieces {
            let len = (mp.duration_s * manifest.sample_rate_hz as f64).round() as usize;
            let mut stems = vec![vec![0.0f32; len]; NUM_CONDITIONS];
            for (name, rel) in &mp.paths {
                let cond = Condition::from_name(name).ok_or_else(|| Error::Ingestion {
                    path: PathBuf::from(rel),
                    reason: format!("unknown stem name {name}"),
                })?;
                let path = base.join(rel);
                if !path.exists() {
                    return Err(Error::Ingestion {
                        path,
                        reason: "referenced file does not exist".into(),
                    });
                }
                let mut samples = audio::read_wav_at(&path, manifest.sample_rate_hz)?;
                samples.resize(len, 0.0);
                stems[cond.index()] = samples;
            }
            pieces.push(Piece::new(
                mp.music_id,
                mp.tempo_bpm,
                mp.first_onset_s,
                manifest.sample_rate_hz,
                stems,
                manifest.silence_threshold_db,
            )?);
            splits.push(mp.split);
            names.push(mp.source_name.clone());
        }
        let ds = Self {
            pieces,
            splits,
            sample_rate_hz: manifest.sample_rate_hz,
            seed: manifest.seed,
            silence_threshold_db: manifest.silence_threshold_db,
            source_names: names,
        };
        ds.check_unique_ids()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piece_with(stems: Vec<Vec<f32>>) -> Piece {
        Piece::new(1, 120.0, 0.0, 8, stems, DEFAULT_SILENCE_DB).unwrap()
    }

    #[test]
    fn mix_of_single_stem_is_proportional() {
        let mut stems = vec![vec![0.0f32; 6]; NUM_CONDITIONS];
        stems[2] = vec![0.1, -0.2, 0.3, 0.0, 0.25, -0.1];
        let piece = piece_with(stems.clone());
        assert_eq!(piece.present, BTreeSet::from([2]));
        let mix = mix_full(&piece).unwrap();
        assert_eq!(mix.gain, 1.0);
        assert_eq!(mix.samples, stems[2]);
    }

    #[test]
    fn mix_below_clip_has_unit_gain() {
        let mut stems = vec![vec![0.0f32; 4]; NUM_CONDITIONS];
        stems[0] = vec![0.3, 0.1, -0.2, 0.0];
        stems[1] = vec![0.3, 0.1, 0.1, -0.1];
        let mix = mix_full(&piece_with(stems)).unwrap();
        assert_eq!(mix.gain, 1.0);
        let expected = [0.6f32, 0.2, -0.1, -0.1];
        for (a, b) in mix.samples.iter().zip(expected) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn loud_mix_is_scaled_by_recorded_gain() {
        let mut stems = vec![vec![0.0f32; 4]; NUM_CONDITIONS];
        for s in stems.iter_mut().take(4) {
            *s = vec![0.5, -0.25, 0.125, 0.3];
        }
        // peak of the sum is 2.0
        let mix = mix_full(&piece_with(stems.clone())).unwrap();
        assert!((mix.gain - 0.495).abs() < 1e-15);
        for (t, &y) in mix.samples.iter().enumerate() {
            let sum: f64 = stems.iter().map(|s| s[t] as f64).sum();
            assert!((y as f64 - mix.gain * sum).abs() <= 1e-7);
        }
    }

    #[test]
    fn silent_piece_cannot_be_mixed() {
        let piece = piece_with(vec![vec![0.0f32; 4]; NUM_CONDITIONS]);
        assert!(matches!(mix_full(&piece), Err(Error::EmptyMix(1))));
    }

    #[test]
    fn unequal_stem_lengths_are_rejected() {
        let mut stems = vec![vec![0.1f32; 4]; NUM_CONDITIONS];
        stems[3] = vec![0.1; 5];
        assert!(Piece::new(1, 120.0, 0.0, 8, stems, -60.0).is_err());
    }

    #[test]
    fn condition_names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(Condition::from_name(c.name()), Some(c));
            assert_eq!(Condition::from_index(c.index()).unwrap(), c);
        }
        assert!(Condition::from_index(5).is_err());
    }
}
