use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

fn random_index(rng: &mut impl Rng, n: usize, d: usize) -> GalleryIndex {
    let mut idx = GalleryIndex::new(16, d);
    for i in 0..n {
        idx.push(GalleryEntry {
            video_id: format!("v{}", i % 3),
            start: i * 8,
            embedding: unit(rng, d),
        })
        .unwrap();
    }
    idx
}

fn ranked(flags: &[bool]) -> RankedQuery {
    RankedQuery {
        hits: (0..flags.len())
            .map(|i| Hit {
                entry: i,
                score: -(i as f64),
            })
            .collect(),
        relevant: flags.to_vec(),
    }
}

fn first_at(rank: usize, n: usize) -> RankedQuery {
    ranked(&(1..=n).map(|r| r == rank).collect::<Vec<_>>())
}

#[test]
fn self_query_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let idx = random_index(&mut rng, 30, 8);
    let q = idx.entries[17].embedding.clone();
    let top = query_topk(&idx, &q, 3).unwrap();
    assert_eq!(top[0].entry, 17);
    assert!((top[0].score - 1.0).abs() < 1e-6);
    assert_eq!(top.len(), 3);
    assert_eq!(query_topk(&idx, &q, 100).unwrap().len(), 30);
    assert!(matches!(query_topk(&idx, &q, 0), Err(Error::Config(_))));
}

#[test]
fn identical_gallery_keeps_insertion_order() {
    let mut idx = GalleryIndex::new(16, 2);
    for i in 0..7 {
        idx.push(GalleryEntry {
            video_id: "b".into(),
            start: i,
            embedding: vec![0.6, 0.8],
        })
        .unwrap();
    }
    let order: Vec<usize> = query_topk(&idx, &[1.0, 0.0], 7).unwrap().iter().map(|h| h.entry).collect();
    assert_eq!(order, (0..7).collect::<Vec<_>>());
}

/// Selection sort: repeatedly take the highest remaining score, the lowest
/// index among equals.
fn oracle_ranking(index: &GalleryIndex, q: &[f32]) -> Vec<usize> {
    let scores: Vec<f64> = index
        .entries
        .iter()
        .map(|e| {
            let mut s = 0.0;
            for j in 0..q.len() {
                s += e.embedding[j] as f64 * q[j] as f64;
            }
            s
        })
        .collect();
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            if scores[left[p]] > scores[left[best]] {
                best = p;
            }
        }
        out.push(left.remove(best));
    }
    out
}

#[test]
fn topk_matches_selection_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let n = rng.random_range(1..60);
        let d = rng.random_range(2..9);
        let mut idx = random_index(&mut rng, n, d);
        // force some exact ties
        if trial % 3 == 0 && n > 3 {
            let e = idx.entries[0].embedding.clone();
            idx.entries[n - 1].embedding = e.clone();
            idx.entries[n / 2].embedding = e;
        }
        let q = unit(&mut rng, d);
        let k = rng.random_range(1..=n + 5);
        let got: Vec<usize> = query_topk(&idx, &q, k).unwrap().iter().map(|h| h.entry).collect();
        let want: Vec<usize> = oracle_ranking(&idx, &q).into_iter().take(k).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn interval_relevance() {
    let q = QueryEntry {
        video: "pair00_a".into(),
        start: 100,
        len: 16,
        target_video: "pair00_b".into(),
        target_start: 16,
        target_len: 16,
    };
    let w = |start| ClipWindow { start, len: 16 };
    assert_eq!(temporal_iou(w(16), w(16)), 1.0);
    assert!(relevance("pair00_b", w(16), &q, 0.5));
    assert_eq!(temporal_iou(w(40), w(16)), 0.0);
    assert!(!relevance("pair00_b", w(40), &q, 0.5));
    assert!((temporal_iou(w(8), w(16)) - 8.0 / 24.0).abs() < 1e-15);
    assert!(!relevance("pair00_b", w(8), &q, 0.5));
    assert!(!relevance("pair01_b", w(16), &q, 0.5));
}

#[test]
fn worked_recall_and_ap() {
    let qs = vec![first_at(1, 20), first_at(4, 20), first_at(12, 20)];
    assert_eq!(recall_at_k(&qs, 1), 1.0 / 3.0);
    assert_eq!(recall_at_k(&qs, 5), 2.0 / 3.0);
    assert_eq!(recall_at_k(&qs, 10), 2.0 / 3.0);
    assert_eq!(recall_at_k(&[first_at(1, 5), first_at(1, 9)], 1), 1.0);

    assert_eq!(average_precision(&[true, false, false]), 1.0);
    let ap = average_precision(&[true, false, true, false]);
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((ap - 0.8333).abs() < 1e-4);
    let m = mean_ap(&[ranked(&[true, false]), ranked(&[true, false, true, false])]);
    assert!((m - 0.9167).abs() < 1e-4);
}

#[test]
fn queries_without_relevant_items_are_excluded() {
    let qs = vec![first_at(1, 5), ranked(&[false; 5])];
    assert_eq!(recall_at_k(&qs, 1), 1.0);
    assert_eq!(mean_ap(&qs), 1.0);
    assert_eq!(recall_at_k(&[ranked(&[false; 3])], 1), 0.0);
}

/// Recall from explicit counting over a score/relevance matrix.
fn brute_recall(scores: &[Vec<f64>], rel: &[Vec<bool>], k: usize) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for (s, r) in scores.iter().zip(rel) {
        if !r.iter().any(|&x| x) {
            continue;
        }
        n += 1;
        // item j is in the top k when fewer than k items outrank it
        let found = (0..s.len()).any(|j| {
            let ahead = (0..s.len()).filter(|&i| s[i] > s[j] || (s[i] == s[j] && i < j)).count();
            r[j] && ahead < k
        });
        if found {
            hit += 1;
        }
    }
    hit as f64 / n as f64
}

/// AP from the definition: precision at the rank of every relevant item.
fn brute_ap(s: &[f64], r: &[bool]) -> f64 {
    let rank = |j: usize| 1 + (0..s.len()).filter(|&i| s[i] > s[j] || (s[i] == s[j] && i < j)).count();
    let rel: Vec<usize> = (0..s.len()).filter(|&j| r[j]).collect();
    let mut total = 0.0;
    for &j in &rel {
        let rj = rank(j);
        let above = rel.iter().filter(|&&i| rank(i) <= rj).count();
        total += above as f64 / rj as f64;
    }
    total / rel.len() as f64
}

fn rank_matrix(scores: &[Vec<f64>], rel: &[Vec<bool>]) -> Vec<RankedQuery> {
    scores
        .iter()
        .zip(rel)
        .map(|(s, r)| {
            let hits = rank_scores(s);
            let relevant = hits.iter().map(|h| r[h.entry]).collect();
            RankedQuery { hits, relevant }
        })
        .collect()
}

#[test]
fn metrics_match_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let nq = rng.random_range(1..12);
        let ng = rng.random_range(1..40);
        // coarse scores so ties occur
        let scores: Vec<Vec<f64>> = (0..nq)
            .map(|_| (0..ng).map(|_| rng.random_range(0..10) as f64 / 10.0).collect())
            .collect();
        let mut rel: Vec<Vec<bool>> = (0..nq).map(|_| (0..ng).map(|_| rng.random_bool(0.15)).collect()).collect();
        rel[0][rng.random_range(0..ng)] = true;
        let ranked = rank_matrix(&scores, &rel);
        for k in [1, 5, 10] {
            assert_eq!(recall_at_k(&ranked, k), brute_recall(&scores, &rel, k));
        }
        let kept: Vec<usize> = (0..nq).filter(|&q| rel[q].iter().any(|&x| x)).collect();
        let want = kept.iter().map(|&q| brute_ap(&scores[q], &rel[q])).sum::<f64>() / kept.len() as f64;
        assert!((mean_ap(&ranked) - want).abs() < 1e-12);
    }
}

#[test]
fn metrics_are_monotone_and_invariant_under_monotone_score_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let ng = rng.random_range(2..30);
        let scores: Vec<Vec<f64>> = (0..6).map(|_| (0..ng).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut rel: Vec<Vec<bool>> = (0..6).map(|_| (0..ng).map(|_| rng.random_bool(0.2)).collect()).collect();
        rel[0][0] = true;
        let a = rank_matrix(&scores, &rel);
        let mapped: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|&x| (3.0 * x).exp() + 2.0).collect()).collect();
        let b = rank_matrix(&mapped, &rel);
        let mut prev = 0.0;
        for k in 1..=ng {
            let r = recall_at_k(&a, k);
            assert!(r >= prev && (0.0..=1.0).contains(&r));
            assert_eq!(r, recall_at_k(&b, k));
            prev = r;
        }
        assert_eq!(mean_ap(&a), mean_ap(&b));
        assert!((0.0..=1.0).contains(&mean_ap(&a)));
    }
}

#[test]
fn cidx_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let idx = random_index(&mut rng, 12, 6);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.cidx");
    idx.save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"CIDX");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 12);
    assert_eq!(bytes.len(), 16 + 12 * (2 + 2 + 4 + 24));
    assert_eq!(GalleryIndex::load(&p).unwrap(), idx);

    std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(GalleryIndex::load(&p), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(GalleryIndex::load(&p), Err(Error::BadMagic { .. })));
}

#[test]
fn index_rejects_non_unit_and_duplicate_entries() {
    let mut idx = GalleryIndex::new(16, 2);
    let e = |start, v: Vec<f32>| GalleryEntry {
        video_id: "b".into(),
        start,
        embedding: v,
    };
    idx.push(e(0, vec![1.0, 0.0])).unwrap();
    assert!(matches!(idx.push(e(8, vec![1.0, 1.0])), Err(Error::Contract(_))));
    assert!(matches!(idx.push(e(0, vec![0.0, 1.0])), Err(Error::Contract(_))));
    assert!(matches!(idx.push(e(8, vec![1.0])), Err(Error::Dimension(_))));
}

#[test]
fn report_line_matches_csv() {
    let q = QueryEntry {
        video: "a".into(),
        start: 0,
        len: 16,
        target_video: "b".into(),
        target_start: 0,
        target_len: 16,
    };
    let rep = RetrievalReport::from_rankings(
        GalleryMode::Sliding,
        20,
        &[q.clone(), q.clone(), q],
        vec![first_at(1, 20), first_at(4, 20), first_at(12, 20)],
    );
    assert_eq!(rep.metric_line(), "R@1=0.333333 R@5=0.666667 R@10=0.666667 mAP=0.444444");
    let csv = rep.to_csv();
    let last = csv.lines().last().unwrap();
    assert_eq!(last, "all,sliding,20,,,,,0.444444,0.333333,0.666667,0.666667");
    assert_eq!(csv.lines().count(), 5);
    assert!(rep.to_svg().starts_with("<svg"));
}
