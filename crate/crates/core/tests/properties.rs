use proptest::prelude::*;

use stemsim::dataset::Piece;
use stemsim::evaluation::{knn_predict, wilson_interval, EmbeddingStore, RowMeta};
use stemsim::features::{segment_waveform, SegmentParams};
use stemsim::objective::{
    batch_loss, condition_mask, masked_distance, masked_triplet_loss, plain_triplet_loss, target_embedding, AuxTerm,
    LossShape, TripletTerm,
};
use stemsim::pseudomix::{make_pseudo_mix, tempo_group};

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..6, 1usize..6).prop_flat_map(|(cc, d)| (Just(cc), Just(d), 0..cc))
}

fn vecs(len: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, len), n)
}

proptest! {
    #[test]
    fn masks_partition_the_embedding((cc, d, _c) in shape()) {
        let mut cover = vec![0.0; cc * d];
        for c in 0..cc {
            let m = condition_mask(c, d, cc).unwrap();
            prop_assert_eq!(m.values.iter().filter(|&&v| v == 1.0).count(), d);
            for (acc, v) in cover.iter_mut().zip(&m.values) {
                *acc += v;
            }
        }
        prop_assert!(cover.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masked_distance_ignores_other_subspaces(
        (cc, d, c) in shape(),
        seed in any::<u64>(),
    ) {
        let e = cc * d;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> { (0..e).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect() };
        let (a, b, noise) = (draw(), draw(), draw());
        let m = condition_mask(c, d, cc).unwrap();
        let mut b2 = b.clone();
        for i in 0..e {
            if m.values[i] == 0.0 {
                b2[i] += noise[i];
            }
        }
        prop_assert_eq!(masked_distance(&a, &b, &m.values).unwrap(), masked_distance(&a, &b2, &m.values).unwrap());
    }

    #[test]
    fn masked_triplet_loss_is_the_plain_loss_on_the_subspace(
        (cc, d, c) in shape(),
        delta in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let e = cc * d;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> { (0..e).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect() };
        let (a, p, n) = (draw(), draw(), draw());
        let m = condition_mask(c, d, cc).unwrap();
        let r = m.range();
        let masked = masked_triplet_loss(&a, &p, &n, &m.values, delta).unwrap();
        let sliced = plain_triplet_loss(&a[r.clone()], &p[r.clone()], &n[r], delta).unwrap();
        prop_assert!(masked >= 0.0);
        prop_assert!((masked - sliced).abs() <= 1e-12);
    }

    #[test]
    fn targets_are_unit_norm_with_zero_blocks_for_missing_stems(
        blocks in prop::collection::vec(prop::option::of(prop::collection::vec(-5.0f64..5.0, 3)), 1..6),
    ) {
        let t = target_embedding(&blocks, 3).unwrap();
        let norm = t.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if t.flagged {
            prop_assert!(t.values.iter().all(|&v| v == 0.0));
        } else {
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
        for (c, b) in blocks.iter().enumerate() {
            if b.is_none() {
                prop_assert!(t.values[c * 3..(c + 1) * 3].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn batch_gradient_matches_central_differences(
        rows in vecs(6, 4),
        conds in prop::collection::vec(0usize..3, 3),
        lambda in 0.0f64..1.0,
        target in prop::collection::vec(0.1f64..1.0, 6),
    ) {
        let shape = LossShape { num_conditions: 3, dim: 2, margin: 0.2, lambda };
        let flat: Vec<f64> = rows.concat();
        let triplets: Vec<TripletTerm> = conds
            .iter()
            .enumerate()
            .map(|(i, &c)| TripletTerm { anchor: i % 4, positive: (i + 1) % 4, negative: (i + 2) % 4, condition: c })
            .collect();
        let t = target_embedding(&[Some(target[..2].to_vec()), Some(target[2..4].to_vec()), Some(target[4..].to_vec())], 2).unwrap();
        let aux = vec![AuxTerm { row: 3, target: t }];
        let (_, g) = batch_loss(&flat, &shape, &triplets, &aux).unwrap();
        let h = 1e-6;
        // Skip inputs within the step of a hinge corner or a zero distance.
        let raw = |x: &[f64], t: &TripletTerm| {
            let r = t.condition * 2..t.condition * 2 + 2;
            let dist = |i: usize, j: usize| {
                r.clone().map(|k| (x[i * 6 + k] - x[j * 6 + k]).powi(2)).sum::<f64>().sqrt()
            };
            (dist(t.anchor, t.positive) - dist(t.anchor, t.negative) + 0.2, dist(t.anchor, t.positive).min(dist(t.anchor, t.negative)))
        };
        prop_assume!(triplets.iter().all(|t| { let (v, m) = raw(&flat, t); v.abs() > 1e-3 && m > 1e-3 }));
        for i in 0..flat.len() {
            let mut up = flat.clone();
            up[i] += h;
            let mut dn = flat.clone();
            dn[i] -= h;
            let fd = (batch_loss(&up, &shape, &triplets, &aux).unwrap().0.total
                - batch_loss(&dn, &shape, &triplets, &aux).unwrap().0.total) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() < 1e-6, "coordinate {}: fd {} analytic {}", i, fd, g[i]);
        }
    }

    #[test]
    fn knn_with_a_mask_equals_knn_on_the_sliced_rows(
        points in vecs(6, 12),
        labels in prop::collection::vec(0u32..4, 12),
        c in 0usize..3,
        k in 1usize..6,
    ) {
        let mut full = EmbeddingStore::new(6);
        let mut sliced = EmbeddingStore::new(2);
        for (i, (p, &l)) in points.iter().zip(&labels).enumerate() {
            let meta = RowMeta { segment: format!("s{i}"), label: l, mix_id: i as u32, focus_piece_id: l, accomp_piece_id: l };
            let f32s: Vec<f32> = p.iter().map(|&v| v as f32).collect();
            full.push(&f32s, meta.clone()).unwrap();
            sliced.push(&f32s[c * 2..c * 2 + 2], meta).unwrap();
        }
        let mask = condition_mask(c, 2, 3).unwrap();
        for q in 0..12 {
            let a = knn_predict(full.row(q), &full, &mask.values, k, |i| i == q).unwrap();
            let b = knn_predict(sliced.row(q), &sliced, &[1.0, 1.0], k, |i| i == q).unwrap();
            prop_assert_eq!(a.predicted, b.predicted);
            prop_assert!(!a.neighbors.contains(&q));
        }
    }

    #[test]
    fn wilson_interval_brackets_the_proportion(total in 1usize..500, frac in 0.0f64..=1.0) {
        let correct = ((total as f64) * frac).floor() as usize;
        let (lo, hi) = wilson_interval(correct, total);
        let p = correct as f64 / total as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p - 1e-12 <= hi && hi <= 1.0);
    }

    #[test]
    fn segments_stay_inside_the_waveform(
        len in 0usize..5000,
        length_s in 0.05f64..0.5,
        overlap in 0.0f64..0.9,
        max_segments in 1usize..30,
    ) {
        let wave: Vec<f32> = (0..len).map(|t| (t as f32 * 0.3).sin() * 0.5).collect();
        let params = SegmentParams { length_s, overlap, max_segments, silence_threshold_db: -60.0 };
        let ws = segment_waveform(&wave, 1000, &params).unwrap();
        prop_assert!(ws.len() <= max_segments);
        for w in &ws {
            prop_assert_eq!(w.len_samples, (length_s * 1000.0).round() as usize);
            prop_assert!(w.start_sample + w.len_samples <= len);
        }
        prop_assert!(ws.windows(2).all(|p| p[0].start_sample < p[1].start_sample));
    }

    #[test]
    fn pseudo_mix_is_the_scaled_sum_of_its_sources(
        seed_a in any::<u32>(),
        seed_b in any::<u32>(),
        onset_a in 0.0f64..0.05,
        onset_b in 0.0f64..0.05,
        c in 0usize..5,
    ) {
        let piece = |id: u32, seed: u32, onset: f64| {
            let stems = (0..5)
                .map(|s| (0..800).map(|t| 0.3 * ((t as f32) * 0.01 * (s as f32 + 1.0) + seed as f32 * 1e-3).sin()).collect())
                .collect();
            Piece::new(id, 120.0, onset, 1000, stems, -60.0).unwrap()
        };
        let (a, b) = (piece(1, seed_a, onset_a), piece(2, seed_b, onset_b));
        let g = tempo_group([&a, &b], 1.0).unwrap();
        let mix = make_pseudo_mix(&a, c, &b, &g).unwrap();
        let prov = &mix.provenance;
        prop_assert!(prov.gain > 0.0 && prov.gain <= 1.0);
        prop_assert_eq!(prov.source_of(c), Some(1));
        for other in (0..5).filter(|&o| o != c) {
            prop_assert_eq!(prov.source_of(other), Some(2));
        }
        for (t, &y) in mix.waveform.iter().enumerate() {
            let src = t as i64 - prov.shift_samples;
            let mut want = 0.0f64;
            if src >= 0 && (src as usize) < 800 {
                want += a.stem(c)[src as usize] as f64;
            }
            for o in (0..5).filter(|&o| o != c) {
                want += b.stem(o)[t] as f64;
            }
            prop_assert!((y as f64 - prov.gain * want).abs() <= 1e-7);
            prop_assert!(y.abs() <= 0.99 + 1e-6);
        }
    }
}
