//! Triplet construction over a segmented pseudo-mix corpus, and the
//! co-located stem windows used to build auxiliary targets for anchors.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::dataset::Piece;
use crate::error::{Error, Result};
use crate::features::{MelExtractor, MelSegment, SegmentWindow};
use crate::hashing;
use crate::models::InstrumentEncoder;
use crate::objective::{target_embedding, TargetEmbedding};
use crate::pseudomix::MixProvenance;
use crate::seeding::rng_for;

/// One segment of one corpus mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub id: u32,
    pub mix_id: u32,
    pub start_sample: usize,
    pub len_samples: usize,
}

impl SegmentEntry {
    pub fn window(&self) -> SegmentWindow {
        SegmentWindow {
            start_sample: self.start_sample,
            len_samples: self.len_samples,
        }
    }
}

/// All segments of a corpus with the provenance of their mixes.
#[derive(Debug, Clone, Default)]
pub struct SegmentTable {
    pub segments: Vec<SegmentEntry>,
    pub mixes: BTreeMap<u32, MixProvenance>,
    by_mix: BTreeMap<u32, Vec<u32>>,
}

impl SegmentTable {
    /// Segment ids are assigned in (mix id, window order).
    pub fn build(mixes: Vec<(MixProvenance, Vec<SegmentWindow>)>) -> Result<Self> {
        let mut table = SegmentTable::default();
        let mut mixes = mixes;
        mixes.sort_by_key(|(p, _)| p.mix_id);
        for (prov, windows) in mixes {
            let ids: Vec<u32> = windows
                .iter()
                .map(|w| {
                    let id = table.segments.len() as u32;
                    table.segments.push(SegmentEntry {
                        id,
                        mix_id: prov.mix_id,
                        start_sample: w.start_sample,
                        len_samples: w.len_samples,
                    });
                    id
                })
                .collect();
            table.by_mix.insert(prov.mix_id, ids);
            if table.mixes.insert(prov.mix_id, prov).is_some() {
                return Err(Error::Provenance("duplicate mix id in corpus".into()));
            }
        }
        Ok(table)
    }

    pub fn segment(&self, id: u32) -> Result<&SegmentEntry> {
        self.segments
            .get(id as usize)
            .ok_or_else(|| Error::Provenance(format!("unknown segment {id}")))
    }

    pub fn provenance_of(&self, segment: u32) -> Result<&MixProvenance> {
        let s = self.segment(segment)?;
        self.mixes
            .get(&s.mix_id)
            .ok_or_else(|| Error::Provenance(format!("segment {segment} refers to unknown mix {}", s.mix_id)))
    }

    pub fn segments_of(&self, mix_id: u32) -> &[u32] {
        self.by_mix.get(&mix_id).map_or(&[], Vec::as_slice)
    }

    fn usable(&self, p: &MixProvenance) -> bool {
        !self.segments_of(p.mix_id).is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletKind {
    Basic,
    Interchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub index: u32,
    pub condition: usize,
    pub kind: TripletKind,
    pub anchor: u32,
    pub positive: u32,
    pub negative: u32,
    /// For an interchanged triplet, the index of the basic triplet it was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<u32>,
}

fn pick<R: Rng>(rng: &mut R, xs: &[u32]) -> u32 {
    xs[rng.gen_range(0..xs.len())]
}

/// Samples `{A^c_B, A^c_C', C^c_B}` with `C' ∉ {A, B}` and `C ∉ {A, B}`.
pub fn sample_basic_triplet<R: Rng>(table: &SegmentTable, c: usize, rng: &mut R) -> Result<TripletSpec> {
    let focus_c: Vec<&MixProvenance> = table
        .mixes
        .values()
        .filter(|p| p.focus_condition == c && !p.is_self_mix() && table.usable(p))
        .collect();
    let mut order: Vec<usize> = (0..focus_c.len()).collect();
    order.shuffle(rng);
    for i in order {
        let anchor = focus_c[i];
        let (a, b) = (anchor.focus_piece_id, anchor.accomp_piece_id);
        let positives: Vec<u32> = focus_c
            .iter()
            .filter(|p| p.focus_piece_id == a && p.accomp_piece_id != a && p.accomp_piece_id != b)
            .map(|p| p.mix_id)
            .collect();
        let negatives: Vec<u32> = focus_c
            .iter()
            .filter(|p| p.accomp_piece_id == b && p.focus_piece_id != a && p.focus_piece_id != b)
            .map(|p| p.mix_id)
            .collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let pos_mix = pick(rng, &positives);
        let neg_mix = pick(rng, &negatives);
        return Ok(TripletSpec {
            index: 0,
            condition: c,
            kind: TripletKind::Basic,
            anchor: pick(rng, table.segments_of(anchor.mix_id)),
            positive: pick(rng, table.segments_of(pos_mix)),
            negative: pick(rng, table.segments_of(neg_mix)),
            derived_from: None,
        });
    }
    Err(Error::SamplingExhausted(format!(
        "no anchor/positive/negative pattern available for condition {c}"
    )))
}

/// Conditions `c' ≠ c` under which the basic triplet can be interchanged without conflict.
pub fn interchange_candidates(table: &SegmentTable, basic: &TripletSpec, num_conditions: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for cp in 0..num_conditions {
        if cp != basic.condition && check_interchange(table, basic, cp).is_ok() {
            out.push(cp);
        }
    }
    Ok(out)
}

fn check_interchange(table: &SegmentTable, basic: &TripletSpec, c_prime: usize) -> Result<()> {
    let anchor = table.provenance_of(basic.anchor)?;
    let new_pos = table.provenance_of(basic.negative)?;
    let new_neg = table.provenance_of(basic.positive)?;
    let conflict = |why: &str| Error::Conflict(format!("triplet {} under condition {c_prime}: {why}", basic.index));
    let Some(src) = anchor.source_of(c_prime) else {
        return Err(conflict("anchor lacks the condition"));
    };
    match new_pos.source_of(c_prime) {
        Some(s) if s == src => {}
        _ => return Err(conflict("new positive does not share the anchor's source")),
    }
    match new_neg.source_of(c_prime) {
        Some(s) if s != src => {}
        Some(_) => return Err(conflict("new negative shares the anchor's source")),
        None => return Err(conflict("new negative lacks the condition")),
    }
    Ok(())
}

/// Swaps positive and negative of a basic triplet and moves it to condition `c_prime`.
pub fn derive_interchanged_triplet(table: &SegmentTable, basic: &TripletSpec, c_prime: usize) -> Result<TripletSpec> {
    if basic.kind != TripletKind::Basic {
        return Err(Error::param("only basic triplets can be interchanged"));
    }
    if c_prime == basic.condition {
        return Err(Error::param(format!("interchanged condition must differ from {}", basic.condition)));
    }
    check_interchange(table, basic, c_prime)?;
    Ok(TripletSpec {
        index: basic.index + 1,
        condition: c_prime,
        kind: TripletKind::Interchanged,
        anchor: basic.anchor,
        positive: basic.negative,
        negative: basic.positive,
        derived_from: Some(basic.index),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletSetParams {
    pub n_triplets: usize,
    pub interchange_ratio: f64,
    pub num_conditions: usize,
    pub seed: u64,
}

/// Basic triplets with conditions cycling `i mod C`, each followed by an
/// interchanged twin with probability `interchange_ratio`.
pub fn build_triplet_set(table: &SegmentTable, params: &TripletSetParams) -> Result<Vec<TripletSpec>> {
    if params.n_triplets == 0 {
        return Err(Error::param("n_triplets must be at least 1"));
    }
    if !(0.0..=1.0).contains(&params.interchange_ratio) {
        return Err(Error::param("interchange_ratio must lie in [0, 1]"));
    }
    let mut out = Vec::with_capacity(2 * params.n_triplets);
    let mut skipped = 0usize;
    for i in 0..params.n_triplets {
        let mut rng = rng_for(params.seed, "triplet", i as u64);
        let mut basic = sample_basic_triplet(table, i % params.num_conditions, &mut rng)?;
        basic.index = out.len() as u32;
        out.push(basic);
        if rng.gen::<f64>() < params.interchange_ratio {
            let cands = interchange_candidates(table, &basic, params.num_conditions)?;
            if cands.is_empty() {
                skipped += 1;
                continue;
            }
            let cp = cands[rng.gen_range(0..cands.len())];
            out.push(derive_interchanged_triplet(table, &basic, cp)?);
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} basic triplets had no conflict-free condition to interchange");
    }
    Ok(out)
}

/// One JSON object per line; returns the order-independent content hash.
pub fn write_triplets(path: &Path, triplets: &[TripletSpec]) -> Result<String> {
    let mut text = String::new();
    for t in triplets {
        text.push_str(&serde_json::to_string(t)?);
        text.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(hashing::lines_content_hash(&text))
}

pub fn read_triplets(path: &Path) -> Result<Vec<TripletSpec>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Label-vector checks for a basic triplet and, if given, its interchanged twin.
/// Returns a description of every violated relation.
pub fn audit_pair(table: &SegmentTable, basic: &TripletSpec, twin: Option<&TripletSpec>) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    let (a, p, n) = (
        table.provenance_of(basic.anchor)?,
        table.provenance_of(basic.positive)?,
        table.provenance_of(basic.negative)?,
    );
    let c = basic.condition;
    if a.source_of(c).is_none() || a.source_of(c) != p.source_of(c) {
        bad.push(format!("basic {}: positive does not share the focus piece", basic.index));
    }
    if n.source_of(c) == a.source_of(c) {
        bad.push(format!("basic {}: negative shares the focus piece", basic.index));
    }
    if a.accomp_piece_id != n.accomp_piece_id {
        bad.push(format!("basic {}: negative has a different accompaniment", basic.index));
    }
    if let Some(t) = twin {
        let cp = t.condition;
        if cp == c || t.anchor != basic.anchor || t.positive != basic.negative || t.negative != basic.positive {
            bad.push(format!("twin {}: not a swap of basic {}", t.index, basic.index));
        }
        if a.source_of(cp).is_none() || n.source_of(cp) != a.source_of(cp) {
            bad.push(format!("twin {}: positive does not share the anchor's source", t.index));
        }
        if p.source_of(cp).is_none() || p.source_of(cp) == a.source_of(cp) {
            bad.push(format!("twin {}: negative shares the anchor's source", t.index));
        }
    }
    Ok(bad)
}

/// Samples of stem `c` co-located with `window` in a mix, or `None` if the mix lacks `c`.
///
/// The focus stem was shifted by `shift_samples` when mixed, so its window is
/// offset accordingly; samples outside the stem are zero.
pub fn stem_window<'a>(
    prov: &MixProvenance,
    c: usize,
    window: &SegmentWindow,
    lookup: impl Fn(u32) -> Option<&'a Piece>,
) -> Result<Option<Vec<f32>>> {
    let Some(src) = prov.source_of(c) else {
        return Ok(None);
    };
    let piece = lookup(src).ok_or_else(|| Error::Provenance(format!("stem audio for piece {src} is unavailable")))?;
    let stem = piece.stem(c);
    let offset = if c == prov.focus_condition { prov.shift_samples } else { 0 };
    let start = window.start_sample as i64 - offset;
    Ok(Some(
        (0..window.len_samples as i64)
            .map(|t| {
                let i = start + t;
                if i >= 0 && (i as usize) < stem.len() {
                    stem[i as usize]
                } else {
                    0.0
                }
            })
            .collect(),
    ))
}

/// Auxiliary targets for segments of `table`: every condition's co-located stem
/// window goes through its instrument encoder, silent or absent stems give a zero block.
pub fn anchor_targets<'a>(
    table: &SegmentTable,
    segments: &[u32],
    lookup: impl Fn(u32) -> Option<&'a Piece> + Copy,
    instruments: &[InstrumentEncoder],
    extractor: &MelExtractor,
    silence_threshold_db: f64,
) -> Result<Vec<TargetEmbedding>> {
    let dim = instruments.first().map_or(0, InstrumentEncoder::dim);
    if instruments.iter().enumerate().any(|(c, g)| g.condition != c || g.dim() != dim) {
        return Err(Error::Dependency("instrument encoders must cover conditions 0..C in order with one width".into()));
    }
    let mut blocks: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; instruments.len()]; segments.len()];
    for (c, g) in instruments.iter().enumerate() {
        let mut mels = Vec::new();
        let mut owners = Vec::new();
        for (k, &seg) in segments.iter().enumerate() {
            let prov = table.provenance_of(seg)?;
            let window = table.segment(seg)?.window();
            if let Some(samples) = stem_window(prov, c, &window, lookup)? {
                if !audio::is_silent(&samples, silence_threshold_db) {
                    mels.push(extractor.features(&samples));
                    owners.push(k);
                }
            }
        }
        let refs: Vec<&MelSegment> = mels.iter().collect();
        for (k, e) in owners.into_iter().zip(g.encoder.encode_many(&refs)?) {
            blocks[k][c] = Some(e.into_iter().map(f64::from).collect());
        }
    }
    blocks.iter().map(|b| target_embedding(b, dim)).collect()
}

pub fn anchor_target<'a>(
    table: &SegmentTable,
    anchor: u32,
    lookup: impl Fn(u32) -> Option<&'a Piece> + Copy,
    instruments: &[InstrumentEncoder],
    extractor: &MelExtractor,
    silence_threshold_db: f64,
) -> Result<TargetEmbedding> {
    Ok(anchor_targets(table, &[anchor], lookup, instruments, extractor, silence_threshold_db)?.remove(0))
}

/// Provenance describing an original (unmixed) piece.
pub fn self_provenance(piece: &Piece, mix_id: u32, gain: f64) -> MixProvenance {
    let focus = piece.present.iter().next().copied().unwrap_or(0);
    MixProvenance {
        mix_id,
        focus_condition: focus,
        focus_piece_id: piece.music_id,
        accomp_piece_id: piece.music_id,
        shift_samples: 0,
        gain,
        num_samples: piece.num_samples(),
        label_vector: piece.present.iter().map(|&c| (c, piece.music_id)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Four pieces, all-to-all donors for every condition, two segments per mix.
    fn full_table(present: &[BTreeSet<usize>]) -> SegmentTable {
        let mut mixes = Vec::new();
        let ids: Vec<u32> = (1..=present.len() as u32).collect();
        for &a in &ids {
            for c in present[a as usize - 1].iter().copied() {
                for &b in &ids {
                    if a == b {
                        continue;
                    }
                    let mut label_vector = BTreeMap::new();
                    label_vector.insert(c, a);
                    for &o in present[b as usize - 1].iter().filter(|&&o| o != c) {
                        label_vector.insert(o, b);
                    }
                    let prov = MixProvenance {
                        mix_id: mixes.len() as u32,
                        focus_condition: c,
                        focus_piece_id: a,
                        accomp_piece_id: b,
                        shift_samples: 0,
                        gain: 1.0,
                        num_samples: 100,
                        label_vector,
                    };
                    let w = vec![
                        SegmentWindow { start_sample: 0, len_samples: 50 },
                        SegmentWindow { start_sample: 25, len_samples: 50 },
                    ];
                    mixes.push((prov, w));
                }
            }
        }
        SegmentTable::build(mixes).unwrap()
    }

    fn all_present(n: usize) -> Vec<BTreeSet<usize>> {
        vec![(0..5).collect(); n]
    }

    #[test]
    fn basic_triplet_follows_the_pattern() {
        let t = full_table(&all_present(4));
        let mut rng = rng_for(1, "t", 0);
        for c in 0..5 {
            let s = sample_basic_triplet(&t, c, &mut rng).unwrap();
            let (a, p, n) = (
                t.provenance_of(s.anchor).unwrap(),
                t.provenance_of(s.positive).unwrap(),
                t.provenance_of(s.negative).unwrap(),
            );
            assert_eq!(a.focus_condition, c);
            assert_eq!(a.focus_piece_id, p.focus_piece_id);
            assert_ne!(p.accomp_piece_id, a.accomp_piece_id);
            assert_eq!(a.accomp_piece_id, n.accomp_piece_id);
            assert_ne!(n.focus_piece_id, a.focus_piece_id);
            assert!(audit_pair(&t, &s, None).unwrap().is_empty());
        }
    }

    #[test]
    fn two_pieces_cannot_form_a_basic_triplet() {
        // C' and C must avoid both A and B.
        assert!(sample_basic_triplet(&full_table(&all_present(3)), 0, &mut rng_for(1, "t", 0)).is_ok());
        let t = full_table(&all_present(2));
        let mut rng = rng_for(1, "t", 0);
        assert!(matches!(sample_basic_triplet(&t, 0, &mut rng), Err(Error::SamplingExhausted(_))));
    }

    #[test]
    fn interchange_swaps_and_checks_conflicts() {
        let t = full_table(&all_present(4));
        let mut rng = rng_for(2, "t", 0);
        let b = sample_basic_triplet(&t, 3, &mut rng).unwrap();
        let x = derive_interchanged_triplet(&t, &b, 1).unwrap();
        assert_eq!((x.anchor, x.positive, x.negative), (b.anchor, b.negative, b.positive));
        assert_eq!(x.kind, TripletKind::Interchanged);
        assert!(matches!(derive_interchanged_triplet(&t, &b, 3), Err(Error::Parameter(_))));
        assert!(audit_pair(&t, &b, Some(&x)).unwrap().is_empty());
    }

    #[test]
    fn interchange_without_shared_condition_is_a_conflict() {
        // Piece 2 (a possible accompaniment) lacks bass, so bass can never be c' for anchors over 2.
        let mut present = all_present(4);
        present[1].remove(&1);
        let t = full_table(&present);
        for i in 0..50 {
            let mut rng = rng_for(3, "t", i);
            let b = sample_basic_triplet(&t, 0, &mut rng).unwrap();
            let over_two = t.provenance_of(b.anchor).unwrap().accomp_piece_id == 2;
            let r = derive_interchanged_triplet(&t, &b, 1);
            if over_two {
                assert!(matches!(r, Err(Error::Conflict(_))));
                assert!(!interchange_candidates(&t, &b, 5).unwrap().contains(&1));
            }
        }
    }

    #[test]
    fn triplet_set_cycles_and_round_trips() {
        let t = full_table(&all_present(4));
        let params = TripletSetParams {
            n_triplets: 5,
            interchange_ratio: 0.0,
            num_conditions: 5,
            seed: 9,
        };
        let set = build_triplet_set(&t, &params).unwrap();
        assert_eq!(set.iter().map(|s| s.condition).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let full = build_triplet_set(&t, &TripletSetParams { n_triplets: 40, interchange_ratio: 1.0, ..params }).unwrap();
        assert_eq!(full.len(), 80);
        assert_eq!(full.iter().filter(|s| s.kind == TripletKind::Basic).count(), 40);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let h1 = write_triplets(&p1, &full).unwrap();
        let again = build_triplet_set(&t, &TripletSetParams { n_triplets: 40, interchange_ratio: 1.0, ..params }).unwrap();
        let h2 = write_triplets(&p2, &again).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(h1, h2);
        assert_eq!(read_triplets(&p1).unwrap(), full);
    }

    #[test]
    fn stem_window_accounts_for_the_focus_shift() {
        let stems = (0..5).map(|c| (0..40).map(|t| (c * 100 + t) as f32 / 1000.0).collect()).collect();
        let a = Piece::new(1, 120.0, 0.0, 100, stems, -60.0).unwrap();
        let mut prov = self_provenance(&a, 0, 1.0);
        prov.focus_condition = 2;
        prov.shift_samples = 5;
        let w = SegmentWindow { start_sample: 3, len_samples: 4 };
        let look = |id: u32| (id == 1).then_some(&a);
        let focus = stem_window(&prov, 2, &w, look).unwrap().unwrap();
        assert_eq!(focus, vec![0.0, 0.0, 0.2, 0.201]);
        let other = stem_window(&prov, 0, &w, look).unwrap().unwrap();
        assert_eq!(other, vec![0.003, 0.004, 0.005, 0.006]);
        prov.label_vector.remove(&4);
        assert!(stem_window(&prov, 4, &w, look).unwrap().is_none());
    }
}
