use proptest::prelude::*;

use stochreid::clustering::{dbscan, DbscanParams, PseudoLabeling};
use stochreid::distance::{camera_offsets, unified, DistanceMode};
use stochreid::evaluation::{evaluate_features, LabeledFeatures};
use stochreid::loss::{contrastive_loss, softmax, LossConfig};
use stochreid::memory::{subset_size, InstanceMemory};
use stochreid::numerics::{cosine, l2_normalize, norm, pairwise_similarity, Mat, Rng};
use stochreid::sampler::{epoch_batches, SamplerConfig};

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, dim)
}

fn nonzero(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    vector(dim).prop_filter("non-zero", |v| norm(v) > 1e-3)
}

fn unit_rows(rows: usize, dim: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(nonzero(dim), rows)
        .prop_map(|rs| Mat::from_rows(&rs.iter().map(|r| l2_normalize(r).unwrap()).collect::<Vec<_>>()).unwrap())
}

proptest! {
    #[test]
    fn cosine_is_bounded_and_symmetric(a in nonzero(6), b in nonzero(6)) {
        let ab = cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, cosine(&b, &a).unwrap());
    }

    #[test]
    fn normalize_gives_unit(v in nonzero(9)) {
        prop_assert!((norm(&l2_normalize(&v).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_matrix_symmetric_unit_diagonal(m in (1usize..20).prop_flat_map(|n| unit_rows(n, 5))) {
        let s = pairwise_similarity(&m);
        prop_assert!(s.is_symmetric(0.0));
        for i in 0..s.rows() {
            prop_assert_eq!(s.get(i, i), 1.0);
        }
    }

    #[test]
    fn momentum_keeps_rows_unit(
        m in unit_rows(4, 5),
        updates in prop::collection::vec((0usize..4, nonzero(5)), 1..40),
        mu in 0.0f64..=1.0,
    ) {
        let mut mem = InstanceMemory::from_features(m, mu).unwrap();
        for (i, f) in &updates {
            mem.update(*i, f).unwrap();
        }
        for row in mem.features().row_iter() {
            prop_assert!((norm(row) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_distribution(logits in prop::collection::vec(-300.0f64..300.0, 1..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn loss_nonnegative_and_finite(
        f in nonzero(4),
        centers in unit_rows(5, 4),
        target in 0usize..5,
        tau in prop::sample::select(vec![0.04, 0.2, 1.0]),
    ) {
        let f = l2_normalize(&f).unwrap();
        let out = contrastive_loss(&f, &centers, target, &LossConfig { tau }).unwrap();
        prop_assert!(out.loss >= 0.0 && out.loss.is_finite());
        prop_assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn subset_size_within_bounds(n in 1usize..500, rho in 1e-9f64..=1.0) {
        let k = subset_size(n, rho);
        prop_assert!(k >= 1 && k <= n);
        prop_assert!(k as f64 >= rho * n as f64 - 1e-6);
    }

    #[test]
    fn dbscan_labels_are_canonical(
        pts in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0), 1..60),
        eps in 0.05f64..0.8,
        min_num in 1usize..6,
    ) {
        let n = pts.len();
        let mut d = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                d.set(i, j, ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt());
            }
        }
        let l = dbscan(&d, &DbscanParams { eps, min_num }).unwrap();
        // Cluster ids appear in order of smallest member.
        let mut next = 0;
        for label in l.labels().iter().flatten() {
            prop_assert!(*label <= next);
            if *label == next {
                next += 1;
            }
        }
        prop_assert_eq!(next, l.num_clusters());
        prop_assert_eq!(l.num_clustered() + l.num_outliers(), n);
        // Neighbors of a core point are clustered; neighboring cores share a cluster.
        let nb = |u: usize| (0..n).filter(|&v| v == u || d.get(u, v) < eps).collect::<Vec<usize>>();
        let core: Vec<bool> = (0..n).map(|u| nb(u).len() >= min_num).collect();
        for u in (0..n).filter(|&u| core[u]) {
            for v in nb(u) {
                prop_assert!(l.label(v).is_some());
                if core[v] {
                    prop_assert_eq!(l.label(v), l.label(u));
                }
            }
        }
    }

    #[test]
    fn direct_distance_symmetric(m in unit_rows(12, 4), cams in prop::collection::vec(0usize..3, 12), lambda in 0.0f64..2.0) {
        let sim = pairwise_similarity(&m);
        let off = camera_offsets(&sim, &cams, 3).unwrap();
        for mode in [DistanceMode::Direct, DistanceMode::SoftmaxRelative] {
            let d = unified(&sim, &off, &cams, lambda, mode).unwrap().dist;
            prop_assert!(d.is_symmetric(1e-12));
        }
        let d0 = unified(&sim, &off, &cams, 0.0, DistanceMode::Direct).unwrap().dist;
        for i in 0..12 {
            for j in 0..12 {
                prop_assert_eq!(d0.get(i, j), 1.0 - sim.get(i, j));
            }
        }
    }

    #[test]
    fn retrieval_metrics_consistent(
        q in unit_rows(6, 3),
        g in unit_rows(15, 3),
        qid in prop::collection::vec(0i64..4, 6),
        gid in prop::collection::vec(0i64..4, 15),
        qcam in prop::collection::vec(0usize..3, 6),
        gcam in prop::collection::vec(0usize..3, 15),
    ) {
        let r = evaluate_features(
            &LabeledFeatures { features: q, identities: qid, cameras: qcam },
            &LabeledFeatures { features: g, identities: gid, cameras: gcam },
        ).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&r.map));
        prop_assert!(r.map <= r.cmc.last().copied().unwrap() + 1e-12);
        prop_assert_eq!(r.num_queries + r.skipped, 6);
    }

    #[test]
    fn sampler_slots_are_full_and_pure(
        labels in prop::collection::vec(prop::option::weighted(0.8, 0usize..6), 6..80),
        seed in any::<u64>(),
        k in 2usize..6,
    ) {
        // Make ids contiguous.
        let mut labels = labels;
        for (j, l) in labels.iter_mut().take(6).enumerate() {
            *l = Some(j);
        }
        let labeling = PseudoLabeling::from_labels(labels).unwrap();
        let mut rng = Rng::new(seed);
        let cams: Vec<usize> = (0..labeling.len()).map(|_| rng.below(3)).collect();
        let batches = epoch_batches(&labeling, &cams, &SamplerConfig { p: 4, k }, &mut rng).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.slots.iter().map(|s| s.cluster)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..6).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(b.slots.len() <= 4);
            for s in &b.slots {
                prop_assert_eq!(s.members.len(), k);
                prop_assert!(s.members.iter().all(|&i| labeling.label(i) == Some(s.cluster)));
            }
        }
    }
}
