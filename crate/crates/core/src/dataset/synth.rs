//! Procedural multi-stem pieces on a tempo grid.
//!
//! Every piece draws its own drum pattern and filter colour, bass line, chord
//! progression, pluck melody and pad voicing, so that each stem carries a
//! piece-specific identity that survives being mixed with stems of another piece.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Piece, Split, DEFAULT_SAMPLE_RATE, DEFAULT_SILENCE_DB, NUM_CONDITIONS};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

const STEM_RMS_DB: f64 = -20.0;
const STEM_PEAK: f32 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub pretrain_pieces: usize,
    pub train_pieces: usize,
    pub test_pieces: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
    /// Tempi assigned round-robin to pretrain and train pieces.
    pub tempo_choices: Vec<f64>,
    /// Tempi assigned round-robin to test pieces.
    pub test_tempo_choices: Vec<f64>,
    pub silence_threshold_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pretrain_pieces: 12,
            train_pieces: 24,
            test_pieces: 10,
            duration_s: 30.0,
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            seed: 7,
            tempo_choices: vec![90.0, 120.0, 150.0],
            test_tempo_choices: vec![120.0],
            silence_threshold_db: DEFAULT_SILENCE_DB,
        }
    }
}

/// Synthesizes all splits; music ids run from 1 over pretrain, train, then test.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.tempo_choices.is_empty() || cfg.test_tempo_choices.is_empty() {
        return Err(Error::param("tempo choice lists must be non-empty"));
    }
    let mut jobs = Vec::new();
    let mut id = 1u32;
    for (split, count) in [
        (Split::Pretrain, cfg.pretrain_pieces),
        (Split::Train, cfg.train_pieces),
        (Split::Test, cfg.test_pieces),
    ] {
        let tempos = if split == Split::Test {
            &cfg.test_tempo_choices
        } else {
            &cfg.tempo_choices
        };
        for i in 0..count {
            jobs.push((id, tempos[i % tempos.len()], split));
            id += 1;
        }
    }
    if jobs.is_empty() {
        return Err(Error::EmptyDataset("zero pieces requested".into()));
    }
    use rayon::prelude::*;
    let pieces = jobs
        .par_iter()
        .map(|&(id, tempo, _)| {
            synthesize_piece_at(id, tempo, cfg.duration_s, cfg.seed, NUM_CONDITIONS, cfg.sample_rate_hz)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        pieces,
        splits: jobs.iter().map(|j| j.2).collect(),
        sample_rate_hz: cfg.sample_rate_hz,
        seed: cfg.seed,
        silence_threshold_db: cfg.silence_threshold_db,
        source_names: vec![None; jobs.len()],
    })
}

/// Deterministic synthetic piece at the default sample rate.
pub fn synthesize_piece(
    music_id: u32,
    tempo_bpm: f64,
    duration_s: f64,
    seed: u64,
    num_conditions: usize,
) -> Result<Piece> {
    synthesize_piece_at(music_id, tempo_bpm, duration_s, seed, num_conditions, DEFAULT_SAMPLE_RATE)
}

pub fn synthesize_piece_at(
    music_id: u32,
    tempo_bpm: f64,
    duration_s: f64,
    seed: u64,
    num_conditions: usize,
    sample_rate: u32,
) -> Result<Piece> {
    if !(40.0..=240.0).contains(&tempo_bpm) {
        return Err(Error::param(format!("tempo {tempo_bpm} BPM outside [40, 240]")));
    }
    if !(duration_s >= 12.0) {
        return Err(Error::param(format!("duration {duration_s} s is shorter than 12 s")));
    }
    if num_conditions != NUM_CONDITIONS {
        return Err(Error::param(format!(
            "synthesis supports exactly {NUM_CONDITIONS} conditions, got {num_conditions}"
        )));
    }
    if sample_rate < 4000 {
        return Err(Error::param(format!("sample rate {sample_rate} Hz too low")));
    }
    let mut rng = rng_for(seed, "piece", music_id as u64);
    let grid = Grid {
        sr: sample_rate as f64,
        len: (duration_s * sample_rate as f64).round() as usize,
        first_onset: rng.gen_range(0.05..0.5),
        beat: 60.0 / tempo_bpm,
    };
    let stem_seed = |c: u64| rng_for(seed, "stem", ((music_id as u64) << 8) | c);
    let mut stems = vec![
        drums(&grid, &mut stem_seed(0)),
        bass(&grid, &mut stem_seed(1)),
        piano(&grid, &mut stem_seed(2)),
        guitar(&grid, &mut stem_seed(3)),
        pad(&grid, &mut stem_seed(4)),
    ];
    for stem in &mut stems {
        level_stem(stem);
    }
    Piece::new(music_id, tempo_bpm, grid.first_onset, sample_rate, stems, DEFAULT_SILENCE_DB)
}

struct Grid {
    sr: f64,
    len: usize,
    first_onset: f64,
    beat: f64,
}

impl Grid {
    /// Onset times of every `steps_per_beat` subdivision, starting at the first onset.
    fn steps(&self, steps_per_beat: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let step = self.beat / steps_per_beat as f64;
        let end = self.len as f64 / self.sr;
        (0..)
            .map(move |k| (k, self.first_onset + k as f64 * step))
            .take_while(move |&(_, t)| t < end)
    }

    fn sample(&self, t: f64) -> usize {
        (t * self.sr).round() as usize
    }
}

/// Scales a stem to a common RMS level, backing off if that would push its peak
/// past `STEM_PEAK`. Equal loudness keeps percussive stems from being buried.
fn level_stem(x: &mut [f32]) {
    let rms = (x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let peak = x.iter().fold(0.0f32, |m, &v| m.max(v.abs())) as f64;
    if rms > 0.0 {
        let g = (10f64.powf(STEM_RMS_DB / 20.0) / rms).min(STEM_PEAK as f64 / peak);
        x.iter_mut().for_each(|v| *v = (*v as f64 * g) as f32);
    }
}

fn midi_hz(note: f64) -> f64 {
    440.0 * 2f64.powf((note - 69.0) / 12.0)
}

/// Adds a harmonic tone with per-harmonic exponential decay into `out`.
#[allow(clippy::too_many_arguments)]
fn add_tone(
    out: &mut [f64],
    sr: f64,
    start: usize,
    len: usize,
    freq: f64,
    harmonics: &[f64],
    decay_s: f64,
    harmonic_damping: f64,
    attack_s: f64,
    amp: f64,
) {
    let nyquist = sr / 2.0;
    let end = (start + len).min(out.len());
    let attack = (attack_s * sr).max(1.0);
    for (h, &ha) in harmonics.iter().enumerate() {
        let f = freq * (h + 1) as f64;
        if f >= nyquist * 0.95 || ha == 0.0 {
            continue;
        }
        let w = TAU * f / sr;
        let tau = decay_s / (1.0 + harmonic_damping * h as f64);
        let k = (-1.0 / (tau * sr)).exp();
        let mut env = amp * ha;
        for (i, o) in out[start..end].iter_mut().enumerate() {
            let a = (i as f64 / attack).min(1.0);
            *o += env * a * (w * i as f64).sin();
            env *= k;
        }
    }
}

fn drums(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f64; grid.len];
    // two burst voices with their own colour and decay
    let low_coef: f64 = rng.gen_range(0.85..0.97);
    let low_decay: f64 = rng.gen_range(0.05..0.2);
    let high_coef: f64 = rng.gen_range(0.2..0.7);
    let high_decay: f64 = rng.gen_range(0.01..0.06);
    let p_low: f64 = rng.gen_range(0.15..0.4);
    let p_high: f64 = rng.gen_range(0.3..0.8);
    let pattern: Vec<(bool, bool, f64)> = (0..16)
        .map(|i| {
            let low = i == 0 || rng.gen_bool(p_low);
            let high = rng.gen_bool(p_high);
            (low, high, rng.gen_range(0.5..1.0))
        })
        .collect();
    for (k, t) in grid.steps(4) {
        let (low, high, accent) = pattern[k % pattern.len()];
        let start = grid.sample(t);
        if low {
            burst(&mut out, grid.sr, start, low_decay, low_coef, false, accent, rng);
        }
        if high {
            burst(&mut out, grid.sr, start, high_decay, high_coef, true, accent * 0.6, rng);
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

#[allow(clippy::too_many_arguments)]
fn burst(
    out: &mut [f64],
    sr: f64,
    start: usize,
    decay_s: f64,
    coef: f64,
    highpass: bool,
    amp: f64,
    rng: &mut ChaCha8Rng,
) {
    let len = (5.0 * decay_s * sr) as usize;
    let end = (start + len).min(out.len());
    let k = (-1.0 / (decay_s * sr)).exp();
    let mut env = amp;
    let mut lp = 0.0;
    for o in out[start.min(end)..end].iter_mut() {
        let noise: f64 = rng.gen_range(-1.0..1.0);
        lp = coef * lp + (1.0 - coef) * noise;
        let v = if highpass { noise - lp } else { lp * 4.0 };
        *o += env * v;
        env *= k;
    }
}

fn bass(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f64; grid.len];
    let root: f64 = rng.gen_range(28..41) as f64;
    let degrees = [0.0, 3.0, 5.0, 7.0, 10.0, 12.0];
    let pattern: Vec<Option<f64>> = (0..16)
        .map(|i| {
            if i > 0 && rng.gen_bool(0.25) {
                None
            } else {
                Some(root + degrees[rng.gen_range(0..degrees.len())])
            }
        })
        .collect();
    let brightness: f64 = rng.gen_range(0.3..0.9);
    let harmonics: Vec<f64> = (0..5).map(|h| brightness.powi(h)).collect();
    let decay: f64 = rng.gen_range(0.1..0.4);
    let note_len = (grid.beat / 2.0 * 0.95 * grid.sr) as usize;
    for (k, t) in grid.steps(2) {
        if let Some(note) = pattern[k % pattern.len()] {
            add_tone(&mut out, grid.sr, grid.sample(t), note_len, midi_hz(note), &harmonics, decay, 0.3, 0.005, 1.0);
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn piano(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f64; grid.len];
    let chords: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let root: f64 = rng.gen_range(48..61) as f64;
            let third = if rng.gen_bool(0.5) { 4.0 } else { 3.0 };
            let mut notes = vec![root, root + third, root + 7.0];
            if rng.gen_bool(0.4) {
                notes.push(root + 10.0);
            }
            notes
        })
        .collect();
    let hits: Vec<bool> = (0..8).map(|i| i == 0 || rng.gen_bool(0.35)).collect();
    let decay: f64 = rng.gen_range(0.3..0.8);
    let harmonics: Vec<f64> = (1..=6).map(|h| 1.0 / (h as f64).powf(1.5)).collect();
    let note_len = (grid.beat * 2.0 * grid.sr) as usize;
    for (k, t) in grid.steps(2) {
        if !hits[k % 8] {
            continue;
        }
        // one chord per bar of eight eighth-notes
        let chord = &chords[(k / 8) % chords.len()];
        for &n in chord {
            add_tone(&mut out, grid.sr, grid.sample(t), note_len, midi_hz(n), &harmonics, decay, 0.5, 0.002, 0.4);
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn guitar(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f64; grid.len];
    let base: f64 = rng.gen_range(52..65) as f64;
    let scale = [0.0, 2.0, 4.0, 7.0, 9.0, 12.0, 14.0];
    let density: f64 = rng.gen_range(0.3..0.7);
    let pattern: Vec<Option<f64>> = (0..16)
        .map(|i| {
            if i == 0 || rng.gen_bool(density) {
                Some(base + scale[rng.gen_range(0..scale.len())])
            } else {
                None
            }
        })
        .collect();
    let decay: f64 = rng.gen_range(0.15..0.4);
    let harmonics: Vec<f64> = (1..=6).map(|h| 1.0 / h as f64).collect();
    let note_len = (5.0 * decay * grid.sr) as usize;
    for (k, t) in grid.steps(4) {
        if let Some(note) = pattern[k % pattern.len()] {
            add_tone(&mut out, grid.sr, grid.sample(t), note_len, midi_hz(note), &harmonics, decay, 1.0, 0.001, 1.0);
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn pad(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f64; grid.len];
    let voicings: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let root: f64 = rng.gen_range(60..73) as f64;
            vec![root, root + rng.gen_range(3..6) as f64, root + 7.0 + rng.gen_range(0..5) as f64]
        })
        .collect();
    let lfo_hz: f64 = rng.gen_range(0.2..1.0);
    let second: f64 = rng.gen_range(0.1..0.5);
    let bar = grid.beat * 4.0;
    let attack = 0.3;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / grid.sr;
        if t < grid.first_onset {
            continue;
        }
        let rel = t - grid.first_onset;
        // voicing changes every two bars
        let seg = (rel / (2.0 * bar)) as usize;
        let local = rel - seg as f64 * 2.0 * bar;
        let env = (local / attack).min(1.0) * (0.6 + 0.4 * (TAU * lfo_hz * t).sin());
        let mut v = 0.0;
        for &n in &voicings[seg % voicings.len()] {
            let f = midi_hz(n);
            v += (TAU * f * t).sin() + second * (TAU * 2.0 * f * t).sin();
        }
        *o = env * v;
    }
    out.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize_piece_at(1, 120.0, 12.0, 7, 5, 8000).unwrap();
        let b = synthesize_piece_at(1, 120.0, 12.0, 7, 5, 8000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_ids_differ_in_every_stem() {
        let a = synthesize_piece_at(1, 120.0, 12.0, 7, 5, 8000).unwrap();
        let b = synthesize_piece_at(2, 120.0, 12.0, 7, 5, 8000).unwrap();
        for c in 0..NUM_CONDITIONS {
            assert_ne!(a.stems[c], b.stems[c], "condition {c}");
        }
    }

    #[test]
    fn bounds_are_checked() {
        assert!(matches!(synthesize_piece(3, 30.0, 30.0, 7, 5), Err(Error::Parameter(_))));
        assert!(matches!(synthesize_piece(3, 120.0, 11.0, 7, 5), Err(Error::Parameter(_))));
        assert!(matches!(synthesize_piece(3, 120.0, 30.0, 7, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn stems_are_level_matched_and_present() {
        let p = synthesize_piece_at(5, 150.0, 12.0, 1, 5, 8000).unwrap();
        for s in &p.stems {
            let peak = s.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(peak <= STEM_PEAK + 1e-6);
            let db = crate::audio::rms_dbfs(s);
            assert!(db <= STEM_RMS_DB + 1e-6 && db > STEM_RMS_DB - 8.0, "{db}");
        }
        assert_eq!(p.present.len(), NUM_CONDITIONS);
        assert_eq!(p.num_samples(), 96_000);
    }

    #[test]
    fn dataset_assigns_splits_and_tempi() {
        let cfg = SynthConfig {
            pretrain_pieces: 0,
            train_pieces: 3,
            test_pieces: 2,
            duration_s: 12.0,
            sample_rate_hz: 8000,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.pieces.len(), 5);
        let tempi: Vec<f64> = ds.pieces.iter().map(|p| p.tempo_bpm).collect();
        assert_eq!(tempi, vec![90.0, 120.0, 150.0, 120.0, 120.0]);
        assert_eq!(ds.split(Split::Test).len(), 2);
        assert_eq!(ds.pretraining_pieces().len(), 3);
    }
}
