//! Ingestion of `<root>/<piece>/<stem>.wav` directories.
//!
//! An optional `<root>/<piece>/meta.json` may carry `tempo_bpm`, `first_onset_s`
//! and `split`. Without it the piece is tagged `train` at 120 BPM and its first
//! onset is the first 10 ms frame of the summed stems above the silence threshold.

use std::path::Path;

use serde::Deserialize;

use super::{Condition, Dataset, Piece, Split, NUM_CONDITIONS};
use crate::audio;
use crate::error::{Error, Result};

const DEFAULT_TEMPO: f64 = 120.0;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PieceMeta {
    tempo_bpm: Option<f64>,
    first_onset_s: Option<f64>,
    split: Option<Split>,
}

pub fn ingest_stem_directory(
    root: &Path,
    sample_rate_hz: u32,
    silence_threshold_db: f64,
) -> Result<Dataset> {
    let io_err = |e: std::io::Error| Error::Ingestion {
        path: root.to_path_buf(),
        reason: e.to_string(),
    };
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(io_err)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let names: Vec<String> = dirs
        .iter()
        .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let numeric: Option<Vec<u32>> = names.iter().map(|n| n.parse().ok()).collect();

    let mut pieces = Vec::new();
    let mut splits = Vec::new();
    let mut source_names = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let mut stems: Vec<Option<Vec<f32>>> = vec![None; NUM_CONDITIONS];
        for c in Condition::ALL {
            let path = dir.join(format!("{}.wav", c.name()));
            if path.exists() {
                stems[c.index()] = Some(audio::read_wav_at(&path, sample_rate_hz)?);
            }
        }
        if stems.iter().all(Option::is_none) {
            log::warn!("skipping {}: no stem files", dir.display());
            continue;
        }
        let len = stems.iter().flatten().map(Vec::len).max().unwrap_or(0);
        let stems: Vec<Vec<f32>> = stems
            .into_iter()
            .map(|s| {
                let mut s = s.unwrap_or_default();
                s.resize(len, 0.0);
                s
            })
            .collect();

        let meta_path = dir.join("meta.json");
        let meta: PieceMeta = if meta_path.exists() {
            let bytes = std::fs::read(&meta_path).map_err(|e| Error::Ingestion {
                path: meta_path.clone(),
                reason: e.to_string(),
            })?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Ingestion {
                path: meta_path.clone(),
                reason: e.to_string(),
            })?
        } else {
            PieceMeta::default()
        };
        let first_onset = meta
            .first_onset_s
            .unwrap_or_else(|| first_active_time(&stems, sample_rate_hz, silence_threshold_db));
        let music_id = match &numeric {
            Some(ids) => ids[i],
            None => i as u32 + 1,
        };
        pieces.push(Piece::new(
            music_id,
            meta.tempo_bpm.unwrap_or(DEFAULT_TEMPO),
            first_onset,
            sample_rate_hz,
            stems,
            silence_threshold_db,
        )?);
        splits.push(meta.split.unwrap_or(Split::Train));
        source_names.push(numeric.is_none().then(|| names[i].clone()));
    }
    if pieces.is_empty() {
        return Err(Error::EmptyDataset(root.display().to_string()));
    }
    Ok(Dataset {
        pieces,
        splits,
        sample_rate_hz,
        seed: 0,
        silence_threshold_db,
        source_names,
    })
}

fn first_active_time(stems: &[Vec<f32>], sr: u32, threshold_db: f64) -> f64 {
    let frame = (sr as usize / 100).max(1);
    let len = stems[0].len();
    let mut buf = vec![0.0f32; frame];
    for start in (0..len).step_by(frame) {
        let end = (start + frame).min(len);
        for (t, b) in (start..end).zip(buf.iter_mut()) {
            *b = stems.iter().map(|s| s[t]).sum();
        }
        if !audio::is_silent(&buf[..end - start], threshold_db) {
            return start as f64 / sr as f64;
        }
    }
    0.0
}
