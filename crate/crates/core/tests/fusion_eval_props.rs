use arreid_core::fusion::l2_normalize;
use arreid_core::reid_eval::rank_gallery;
use arreid_core::{
    adaptive_weight, evaluate, fuse_features, DistanceKind, EvalProtocol, FeatureSet, FusionPolicy, TaggedFeature,
};
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn feature_set(n: usize, dim: usize, ids: u64) -> impl Strategy<Value = FeatureSet> {
    (
        prop::collection::vec(-1.0f64..1.0, n * dim),
        prop::collection::vec(0..ids, n),
        prop::collection::vec(0u32..3, n),
    )
        .prop_map(move |(v, vid, cam)| FeatureSet::new(Array2::from_shape_vec((n, dim), v).unwrap(), vid, cam).unwrap())
}

fn eval_case() -> impl Strategy<Value = (FeatureSet, FeatureSet, EvalProtocol)> {
    (1usize..10, 4usize..40, 2usize..6, 2u64..6, any::<bool>(), any::<bool>()).prop_flat_map(|(nq, ng, d, ids, cos, ex)| {
        let protocol = EvalProtocol {
            distance: if cos { DistanceKind::Cosine } else { DistanceKind::SquaredEuclidean },
            exclude_same_camera: ex,
            ..EvalProtocol::default()
        };
        (feature_set(nq, d, ids), feature_set(ng, d, ids), Just(protocol))
    })
}

fn same_metrics(a: &arreid_core::EvalReport, b: &arreid_core::EvalReport) -> bool {
    (a.map - b.map).abs() <= 1e-9 && a.cmc_curve.iter().zip(&b.cmc_curve).all(|(x, y)| (x - y).abs() <= 1e-9)
}

/// Random rotation from Gram-Schmidt on a seeded matrix.
fn orthogonal(d: usize, raw: &[f64]) -> Array2<f64> {
    let mut q = Array2::from_shape_vec((d, d), raw[..d * d].to_vec()).unwrap();
    for i in 0..d {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let rj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &rj);
        }
        let n = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / n);
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weight_is_non_increasing_step(a in 0.0f64..5.0, b in 0.0f64..5.0, base in 0.3f64..3.0) {
        let p = FusionPolicy::default();
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        let (wn, wf) = (adaptive_weight(base, base + near, &p), adaptive_weight(base, base + far, &p));
        prop_assert!(wn >= wf);
        prop_assert!([1.3, 1.0, 0.9].contains(&wn));
    }

    #[test]
    fn fusion_linear_and_order_free(
        vs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 1..5),
        us in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 5),
        ars in prop::collection::vec(0.5f64..2.0, 5),
        alpha in -3.0f64..3.0,
        image_ar in 0.5f64..2.0,
    ) {
        let p = FusionPolicy::default();
        let tag = |v: &[Vec<f64>]| -> Vec<TaggedFeature> {
            v.iter().zip(&ars).map(|(x, &ar)| TaggedFeature { vector: x.clone(), model_ar: ar }).collect()
        };
        let fv = fuse_features(&tag(&vs), image_ar, &p).unwrap();
        let fu = fuse_features(&tag(&us[..vs.len()]), image_ar, &p).unwrap();
        let combo: Vec<Vec<f64>> = vs.iter().zip(&us).map(|(v, u)| v.iter().zip(u).map(|(a, b)| alpha * a + b).collect()).collect();
        let fc = fuse_features(&tag(&combo), image_ar, &p).unwrap();
        for i in 0..6 {
            prop_assert!((fc[i] - (alpha * fv[i] + fu[i])).abs() <= 1e-9);
        }
        let mut rev = tag(&vs);
        rev.reverse();
        let fr = fuse_features(&rev, image_ar, &p).unwrap();
        for (a, b) in fr.iter().zip(&fv) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_ranking_ignores_policy_scale((q, g, _) in eval_case(), factor in 0.01f64..100.0, ars in prop::collection::vec(0.5f64..2.0, 40)) {
        let protocol = EvalProtocol { distance: DistanceKind::Cosine, ..EvalProtocol::default() };
        // each gallery row fused from itself and its reverse under two model ARs
        let fused = |policy: &FusionPolicy| {
            let rows: Vec<f64> = g.features.rows().into_iter().zip(&ars).flat_map(|(r, &image_ar)| {
                let v = r.to_vec();
                let tagged = [
                    TaggedFeature { vector: v.clone(), model_ar: 1.0 },
                    TaggedFeature { vector: v.iter().rev().copied().collect(), model_ar: 1.7 },
                ];
                fuse_features(&tagged, image_ar, policy).unwrap()
            }).collect();
            FeatureSet::new(Array2::from_shape_vec(g.features.dim(), rows).unwrap(), g.vehicle_ids.clone(), g.camera_ids.clone()).unwrap()
        };
        let base = FusionPolicy::default();
        let (a_set, b_set) = (fused(&base), fused(&base.scaled(factor)));
        let meta = (q.vehicle_ids[0], q.camera_ids[0]);
        let qrow = q.features.row(0).to_vec();
        let a = rank_gallery(&qrow, meta, &a_set, &protocol).unwrap();
        let b = rank_gallery(&qrow, meta, &b_set, &protocol).unwrap();
        // equal-weight fusions of mirrored rows tie exactly; ties may swap
        let mut dist = vec![f64::NAN; g.len()];
        for (&i, &d) in a.order.iter().zip(&a.distances) {
            dist[i] = d;
        }
        prop_assert_eq!(a.order.len(), b.order.len());
        for w in b.order.windows(2) {
            prop_assert!(dist[w[0]] <= dist[w[1]] + 1e-12, "scaled ranking reorders {} and {}", w[0], w[1]);
        }
    }

    #[test]
    fn metrics_invariant_to_gallery_permutation((q, g, protocol) in eval_case(), seed in any::<u64>()) {
        let Ok(base) = evaluate(&q, &g, &protocol) else { return Ok(()); };
        let n = g.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left((seed % n as u64) as usize);
        let perm = FeatureSet::new(
            g.features.select(Axis(0), &order),
            order.iter().map(|&i| g.vehicle_ids[i]).collect(),
            order.iter().map(|&i| g.camera_ids[i]).collect(),
        ).unwrap();
        prop_assert!(same_metrics(&base, &evaluate(&q, &perm, &protocol).unwrap()));
    }

    #[test]
    fn metrics_invariant_to_scale_and_rotation((q, g, protocol) in eval_case(), factor in 0.1f64..10.0, raw in prop::collection::vec(-1.0f64..1.0, 36)) {
        let Ok(base) = evaluate(&q, &g, &protocol) else { return Ok(()); };
        let d = q.dim();
        let rot = orthogonal(d, &raw);
        prop_assume!(rot.iter().all(|v| v.is_finite()));
        let map = |s: &FeatureSet, f: f64| FeatureSet::new(s.features.dot(&rot.t()) * f, s.vehicle_ids.clone(), s.camera_ids.clone()).unwrap();
        prop_assert!(same_metrics(&base, &evaluate(&map(&q, 1.0), &map(&g, 1.0), &protocol).unwrap()));
        if protocol.distance == DistanceKind::Cosine {
            prop_assert!(same_metrics(&base, &evaluate(&map(&q, factor), &map(&g, factor), &protocol).unwrap()));
        }
    }

    #[test]
    fn cmc_monotone_and_bounded_by_perfect_ap((q, g, protocol) in eval_case()) {
        let Ok(r) = evaluate(&q, &g, &protocol) else { return Ok(()); };
        prop_assert!(r.cmc_curve.windows(2).all(|w| w[0] <= w[1]));
        let valid: Vec<f64> = r.per_query_ap.iter().flatten().copied().collect();
        prop_assert!(valid.iter().all(|ap| (0.0..=1.0).contains(ap)));
        prop_assert!((0.0..=1.0).contains(&r.map));
        let perfect = valid.iter().filter(|&&ap| ap == 1.0).count() as f64 / valid.len() as f64;
        prop_assert!(r.cmc_curve.iter().all(|&c| c >= perfect - 1e-12));
        let (r1, r5, r10) = (r.rank(1).unwrap(), r.rank(5).unwrap(), r.rank(10).unwrap());
        prop_assert!(r1 <= r5 && r5 <= r10);
    }

    #[test]
    fn normalized_vectors_have_unit_length(mut v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        l2_normalize(&mut v);
        prop_assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
