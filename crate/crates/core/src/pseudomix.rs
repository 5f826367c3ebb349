//! Pseudo-mixed pieces: the focus stem of piece A for condition `c` laid over the
//! accompaniment stems of piece B, restricted to pieces of the same tempo group.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::dataset::{condition_name, mix_placed, Piece, PlacedStem};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// Assignment of every piece to a tempo bin `floor(tempo / bin_width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempoGrouping {
    pub bin_width_bpm: f64,
    pub groups: BTreeMap<u32, i64>,
}

impl TempoGrouping {
    pub fn group_of(&self, music_id: u32) -> Option<i64> {
        self.groups.get(&music_id).copied()
    }

    pub fn members(&self, key: i64) -> Vec<u32> {
        self.groups
            .iter()
            .filter(|(_, &k)| k == key)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn keys(&self) -> BTreeSet<i64> {
        self.groups.values().copied().collect()
    }

    pub fn same_group(&self, a: u32, b: u32) -> bool {
        matches!((self.group_of(a), self.group_of(b)), (Some(x), Some(y)) if x == y)
    }
}

pub fn tempo_group<'a>(
    pieces: impl IntoIterator<Item = &'a Piece>,
    bin_width_bpm: f64,
) -> Result<TempoGrouping> {
    if !(bin_width_bpm > 0.0) {
        return Err(Error::param(format!("tempo bin width {bin_width_bpm} must be positive")));
    }
    let mut groups = BTreeMap::new();
    for p in pieces {
        if groups
            .insert(p.music_id, (p.tempo_bpm / bin_width_bpm).floor() as i64)
            .is_some()
        {
            return Err(Error::Constraint(format!("music id {} listed twice", p.music_id)));
        }
    }
    Ok(TempoGrouping {
        bin_width_bpm,
        groups,
    })
}

/// Where each condition of a mix came from, plus the alignment and gain used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixProvenance {
    pub mix_id: u32,
    pub focus_condition: usize,
    pub focus_piece_id: u32,
    pub accomp_piece_id: u32,
    /// Offset in samples applied to the focus stem.
    pub shift_samples: i64,
    pub gain: f64,
    pub num_samples: usize,
    /// Condition to source music id, restricted to stems present.
    pub label_vector: BTreeMap<usize, u32>,
}

impl MixProvenance {
    pub fn source_of(&self, c: usize) -> Option<u32> {
        self.label_vector.get(&c).copied()
    }

    pub fn is_self_mix(&self) -> bool {
        self.focus_piece_id == self.accomp_piece_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMix {
    pub provenance: MixProvenance,
    pub waveform: Vec<f32>,
}

fn check_pair(a: &Piece, c: usize, b: &Piece, grouping: &TempoGrouping) -> Result<()> {
    if !grouping.same_group(a.music_id, b.music_id) {
        return Err(Error::Constraint(format!(
            "pieces {} and {} are in different tempo groups",
            a.music_id, b.music_id
        )));
    }
    if !a.is_present(c) {
        return Err(Error::MissingStem {
            piece: a.music_id,
            condition: condition_name(c),
        });
    }
    if a.music_id != b.music_id && !b.present.iter().any(|&x| x != c) {
        return Err(Error::Constraint(format!(
            "piece {} has no accompaniment besides {}",
            b.music_id,
            condition_name(c)
        )));
    }
    if a.sample_rate != b.sample_rate {
        return Err(Error::Constraint("sample rates differ".into()));
    }
    Ok(())
}

/// Onset shift that moves A's first beat onto B's first beat.
pub fn alignment_shift(a: &Piece, b: &Piece) -> i64 {
    ((b.first_onset_s - a.first_onset_s) * b.sample_rate as f64).round() as i64
}

/// Builds `A^(c)_B`. Passing the same piece twice yields the self-mix (the original piece).
pub fn make_pseudo_mix(
    a: &Piece,
    c: usize,
    b: &Piece,
    grouping: &TempoGrouping,
) -> Result<PseudoMix> {
    make_pseudo_mix_with_id(a, c, b, grouping, 0)
}

fn make_pseudo_mix_with_id(
    a: &Piece,
    c: usize,
    b: &Piece,
    grouping: &TempoGrouping,
    mix_id: u32,
) -> Result<PseudoMix> {
    check_pair(a, c, b, grouping)?;
    let shift = alignment_shift(a, b);
    let mut label_vector = BTreeMap::new();
    label_vector.insert(c, a.music_id);
    for &other in b.present.iter().filter(|&&x| x != c) {
        label_vector.insert(other, b.music_id);
    }
    let (waveform, gain) = render_labels(&label_vector, c, shift, b.num_samples(), |id| {
        if id == a.music_id {
            Some(a)
        } else if id == b.music_id {
            Some(b)
        } else {
            None
        }
    })?;
    Ok(PseudoMix {
        provenance: MixProvenance {
            mix_id,
            focus_condition: c,
            focus_piece_id: a.music_id,
            accomp_piece_id: b.music_id,
            shift_samples: shift,
            gain,
            num_samples: waveform.len(),
            label_vector,
        },
        waveform,
    })
}

fn render_labels<'a>(
    labels: &BTreeMap<usize, u32>,
    focus: usize,
    shift: i64,
    len: usize,
    lookup: impl Fn(u32) -> Option<&'a Piece>,
) -> Result<(Vec<f32>, f64)> {
    let mut placed = Vec::with_capacity(labels.len());
    for (&cond, &id) in labels {
        let piece = lookup(id)
            .ok_or_else(|| Error::Provenance(format!("piece {id} not available for re-mixing")))?;
        placed.push(PlacedStem {
            samples: piece.stem(cond),
            offset: if cond == focus { shift as isize } else { 0 },
        });
    }
    let mix = mix_placed(len, &placed);
    Ok((mix.samples, mix.gain))
}

/// Re-renders a mix from its provenance alone.
pub fn remix_from_provenance<'a>(
    prov: &MixProvenance,
    lookup: impl Fn(u32) -> Option<&'a Piece>,
) -> Result<PseudoMix> {
    let (waveform, gain) = render_labels(
        &prov.label_vector,
        prov.focus_condition,
        prov.shift_samples,
        prov.num_samples,
        lookup,
    )?;
    Ok(PseudoMix {
        provenance: MixProvenance {
            gain,
            ..prov.clone()
        },
        waveform,
    })
}

/// One planned mix `focus^(condition)_accomp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPlan {
    pub mix_id: u32,
    pub focus_condition: usize,
    pub focus_piece_id: u32,
    pub accomp_piece_id: u32,
}

/// For every piece A and every condition present in A, picks `per_focus_count`
/// distinct donors from A's tempo group without replacement.
pub fn plan_pseudomix_corpus(
    pieces: &[&Piece],
    grouping: &TempoGrouping,
    per_focus_count: usize,
    seed: u64,
) -> Result<Vec<MixPlan>> {
    if per_focus_count == 0 {
        return Err(Error::param("per_focus_count must be at least 1"));
    }
    for key in grouping.keys() {
        let members = grouping.members(key);
        let in_corpus = members
            .iter()
            .filter(|id| pieces.iter().any(|p| p.music_id == **id))
            .count();
        if in_corpus > 0 && in_corpus < per_focus_count + 1 {
            return Err(Error::Constraint(format!(
                "tempo group {key} has {in_corpus} pieces, needs {}",
                per_focus_count + 1
            )));
        }
    }
    let mut sorted: Vec<&Piece> = pieces.to_vec();
    sorted.sort_by_key(|p| p.music_id);
    let mut plans = Vec::new();
    for a in &sorted {
        let key = grouping
            .group_of(a.music_id)
            .ok_or_else(|| Error::Constraint(format!("piece {} has no tempo group", a.music_id)))?;
        for &c in &a.present {
            let donors: Vec<u32> = sorted
                .iter()
                .filter(|b| {
                    b.music_id != a.music_id
                        && grouping.group_of(b.music_id) == Some(key)
                        && b.present.iter().any(|&x| x != c)
                })
                .map(|b| b.music_id)
                .collect();
            if donors.len() < per_focus_count {
                return Err(Error::Constraint(format!(
                    "tempo group {key}: piece {} has {} eligible donors for {}, needs {per_focus_count}",
                    a.music_id,
                    donors.len(),
                    condition_name(c)
                )));
            }
            let mut rng = rng_for(seed, "donors", ((a.music_id as u64) << 8) | c as u64);
            let mut chosen: Vec<u32> = index::sample(&mut rng, donors.len(), per_focus_count)
                .into_iter()
                .map(|i| donors[i])
                .collect();
            chosen.sort_unstable();
            for b in chosen {
                plans.push(MixPlan {
                    mix_id: plans.len() as u32,
                    focus_condition: c,
                    focus_piece_id: a.music_id,
                    accomp_piece_id: b,
                });
            }
        }
    }
    Ok(plans)
}

pub fn render_plan(plan: &MixPlan, pieces: &[&Piece], grouping: &TempoGrouping) -> Result<PseudoMix> {
    let find = |id: u32| {
        pieces
            .iter()
            .find(|p| p.music_id == id)
            .copied()
            .ok_or_else(|| Error::Provenance(format!("piece {id} missing")))
    };
    make_pseudo_mix_with_id(
        find(plan.focus_piece_id)?,
        plan.focus_condition,
        find(plan.accomp_piece_id)?,
        grouping,
        plan.mix_id,
    )
}

pub fn build_pseudomix_corpus(
    pieces: &[&Piece],
    grouping: &TempoGrouping,
    per_focus_count: usize,
    seed: u64,
) -> Result<Vec<PseudoMix>> {
    use rayon::prelude::*;
    plan_pseudomix_corpus(pieces, grouping, per_focus_count, seed)?
        .par_iter()
        .map(|plan| render_plan(plan, pieces, grouping))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub mix_id: u32,
    pub focus_condition: usize,
    pub focus_piece_id: u32,
    pub accomp_piece_id: u32,
    pub gain: f64,
    pub path: String,
    pub shift_samples: i64,
    pub num_samples: usize,
    pub label_vector: BTreeMap<usize, u32>,
}

impl CorpusEntry {
    pub fn provenance(&self) -> MixProvenance {
        MixProvenance {
            mix_id: self.mix_id,
            focus_condition: self.focus_condition,
            focus_piece_id: self.focus_piece_id,
            accomp_piece_id: self.accomp_piece_id,
            shift_samples: self.shift_samples,
            gain: self.gain,
            num_samples: self.num_samples,
            label_vector: self.label_vector.clone(),
        }
    }
}

/// Writes each mix as `mix_<id>.wav` and the index as `corpus.json`.
pub fn write_corpus(dir: &Path, mixes: &[PseudoMix], sample_rate: u32) -> Result<Vec<CorpusEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(mixes.len());
    for mix in mixes {
        let p = &mix.provenance;
        let rel = format!("mix_{:05}.wav", p.mix_id);
        audio::write_wav(&dir.join(&rel), &mix.waveform, sample_rate)?;
        entries.push(CorpusEntry {
            mix_id: p.mix_id,
            focus_condition: p.focus_condition,
            focus_piece_id: p.focus_piece_id,
            accomp_piece_id: p.accomp_piece_id,
            gain: p.gain,
            path: rel,
            shift_samples: p.shift_samples,
            num_samples: p.num_samples,
            label_vector: p.label_vector.clone(),
        });
    }
    std::fs::write(dir.join("corpus.json"), serde_json::to_vec_pretty(&entries)?)?;
    Ok(entries)
}

pub fn read_corpus_index(path: &Path) -> Result<Vec<CorpusEntry>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Counts corpus entries whose focus and accompaniment pieces fall in different tempo groups.
pub fn count_tempo_violations<'a>(
    provenance: impl IntoIterator<Item = &'a MixProvenance>,
    grouping: &TempoGrouping,
) -> usize {
    provenance
        .into_iter()
        .filter(|p| !grouping.same_group(p.focus_piece_id, p.accomp_piece_id))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{mix_full, NUM_CONDITIONS};

    fn piece(id: u32, tempo: f64, onset: f64, len: usize) -> Piece {
        let stems = (0..NUM_CONDITIONS)
            .map(|c| {
                (0..len)
                    .map(|t| 0.1 * ((t as f32 + 1.0) * 0.01 * (c as f32 + 1.0) + id as f32).sin())
                    .collect()
            })
            .collect();
        Piece::new(id, tempo, onset, 100, stems, -60.0).unwrap()
    }

    #[test]
    fn tempo_bins_follow_floor() {
        let ps = [piece(1, 90.0, 0.0, 10), piece(2, 92.0, 0.0, 10), piece(3, 120.0, 0.0, 10)];
        let g = tempo_group(&ps, 10.0).unwrap();
        assert_eq!(g.keys().len(), 2);
        assert!(g.same_group(1, 2));
        assert!(!g.same_group(1, 3));
        let ps = [piece(1, 90.0, 0.0, 10), piece(2, 120.0, 0.0, 10), piece(3, 150.0, 0.0, 10)];
        assert_eq!(tempo_group(&ps, 1.0).unwrap().keys().len(), 3);
        let ps = [piece(1, 120.0, 0.0, 10), piece(2, 120.0, 0.0, 10)];
        let g = tempo_group(&ps, 5.0).unwrap();
        assert_eq!(g.members(24), vec![1, 2]);
        assert!(tempo_group(&ps, 0.0).is_err());
    }

    #[test]
    fn zero_shift_mix_is_plain_sum() {
        let a = piece(1, 120.0, 0.1, 200);
        let b = piece(2, 120.0, 0.1, 200);
        let g = tempo_group([&a, &b], 1.0).unwrap();
        let m = make_pseudo_mix(&a, 0, &b, &g).unwrap();
        assert_eq!(m.provenance.shift_samples, 0);
        for t in 0..200 {
            let sum: f64 = a.stems[0][t] as f64 + (1..5).map(|c| b.stems[c][t] as f64).sum::<f64>();
            assert!((m.waveform[t] as f64 - m.provenance.gain * sum).abs() <= 1e-7);
        }
        assert_eq!(m.provenance.label_vector[&0], 1);
        assert_eq!(m.provenance.label_vector[&3], 2);
    }

    #[test]
    fn focus_stem_is_shifted_onto_donor_onset() {
        let a = piece(1, 120.0, 0.05, 200);
        let b = piece(2, 120.0, 0.15, 150);
        let g = tempo_group([&a, &b], 1.0).unwrap();
        let mut b_silent = b.clone();
        for c in 1..NUM_CONDITIONS {
            b_silent.stems[c].iter_mut().for_each(|s| *s = 0.0);
        }
        b_silent.stems[1][0] = 1e-3; // keep one accompaniment stem nominally present
        b_silent.present = BTreeSet::from([1]);
        let m = make_pseudo_mix(&a, 2, &b_silent, &g).unwrap();
        assert_eq!(m.provenance.shift_samples, 10);
        assert_eq!(m.waveform.len(), 150);
        for t in 11..150 {
            let expect = m.provenance.gain * a.stems[2][t - 10] as f64;
            assert!((m.waveform[t] as f64 - expect).abs() <= 1e-7);
        }
        assert!(m.waveform[5].abs() < 1e-12);
    }

    #[test]
    fn cross_group_and_missing_stem_are_rejected() {
        let a = piece(1, 120.0, 0.0, 50);
        let b = piece(2, 90.0, 0.0, 50);
        let g = tempo_group([&a, &b], 1.0).unwrap();
        assert!(matches!(make_pseudo_mix(&a, 0, &b, &g), Err(Error::Constraint(_))));
        let mut c = piece(3, 120.0, 0.0, 50);
        c.stems[3].iter_mut().for_each(|s| *s = 0.0);
        c.present.remove(&3);
        let g = tempo_group([&a, &c], 1.0).unwrap();
        assert!(matches!(make_pseudo_mix(&c, 3, &a, &g), Err(Error::MissingStem { .. })));
    }

    #[test]
    fn self_mix_equals_full_mix() {
        let a = piece(1, 120.0, 0.2, 80);
        let g = tempo_group([&a], 1.0).unwrap();
        let m = make_pseudo_mix(&a, 1, &a, &g).unwrap();
        assert!(m.provenance.is_self_mix());
        assert_eq!(m.waveform, mix_full(&a).unwrap().samples);
    }

    #[test]
    fn two_piece_group_forces_donor() {
        let ps = [piece(1, 120.0, 0.0, 40), piece(2, 120.0, 0.1, 40)];
        let refs: Vec<&Piece> = ps.iter().collect();
        let g = tempo_group(refs.iter().copied(), 1.0).unwrap();
        let plans = plan_pseudomix_corpus(&refs, &g, 1, 3).unwrap();
        assert_eq!(plans.len(), 10);
        for p in &plans {
            assert_ne!(p.focus_piece_id, p.accomp_piece_id);
        }
        assert!(matches!(
            plan_pseudomix_corpus(&refs, &g, 2, 3),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn corpus_is_deterministic_and_remixable() {
        let ps: Vec<Piece> = (1..=5).map(|i| piece(i, 120.0, 0.01 * i as f64, 60)).collect();
        let refs: Vec<&Piece> = ps.iter().collect();
        let g = tempo_group(refs.iter().copied(), 1.0).unwrap();
        let a = build_pseudomix_corpus(&refs, &g, 4, 11).unwrap();
        let b = build_pseudomix_corpus(&refs, &g, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5 * 5 * 4);
        assert_eq!(count_tempo_violations(a.iter().map(|m| &m.provenance), &g), 0);
        for m in &a {
            let r = remix_from_provenance(&m.provenance, |id| ps.iter().find(|p| p.music_id == id)).unwrap();
            let dev = r
                .waveform
                .iter()
                .zip(&m.waveform)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(dev <= 1e-7);
        }
    }
}
