use arreid_core::io::{store_size, FeatureRecord, FeatureStore, RunConfig};
use arreid_core::patch_geometry::plan_from_centers;
use arreid_core::{DistanceKind, Error};
use proptest::prelude::*;

fn store() -> impl Strategy<Value = FeatureStore> {
    (1u32..24, 0usize..20, 0.2f32..3.0).prop_flat_map(|(dim, n, ar)| {
        prop::collection::vec(
            (any::<u64>(), any::<u32>(), prop::collection::vec(-1e6f32..1e6, dim as usize)),
            n,
        )
        .prop_map(move |recs| {
            let records = recs
                .into_iter()
                .map(|(vehicle_id, camera_id, vector)| FeatureRecord {
                    vehicle_id,
                    camera_id,
                    vector,
                })
                .collect();
            FeatureStore::new(dim, ar, records).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn store_bytes_round_trip(s in store()) {
        let bytes = s.to_bytes().unwrap();
        prop_assert_eq!(bytes.len() as u64, store_size(s.dim, s.len() as u64));
        let back = FeatureStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_store_rejected(s in store(), cut in 1usize..64) {
        let bytes = s.to_bytes().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(matches!(FeatureStore::from_bytes(&bytes[..keep]), Err(Error::Format(_))));
    }

    #[test]
    fn run_config_round_trips(
        seed in any::<u64>(),
        frac in 0.0f64..=1.0,
        cosine in any::<bool>(),
        centers in prop::collection::vec(0.5f64..2.0, 0..4),
        steps in 1usize..1000,
    ) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.mixup.image_fraction = frac;
        cfg.protocol.distance = if cosine { DistanceKind::Cosine } else { DistanceKind::SquaredEuclidean };
        cfg.train.steps = steps;
        if !centers.is_empty() {
            cfg.resize = plan_from_centers(&centers, 64).unwrap();
        }
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back.to_json(), cfg.to_json());
    }
}
