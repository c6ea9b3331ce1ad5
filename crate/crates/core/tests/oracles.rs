use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use anchorloc::dbscan::dbscan;
use anchorloc::features::{synth_features, ImageStyle, SyntheticWorld, WorldParams};
use anchorloc::geo::GeoPoint;
use anchorloc::metrics::{recall_at_n, top_k_at_n, EvalRecord};
use anchorloc::retrieval::{db_build, query_topk, SyntheticSatellite};
use anchorloc::tiles::{build_grid, ground_truth_neighbors};
use anchorloc::vlad::{build_vocabulary, encode, similarity};
use anchorloc_oracles as oracle;

fn small_world() -> SyntheticWorld {
    SyntheticWorld::new(WorldParams {
        dim: 16,
        features_per_image: 64,
        ..WorldParams::default()
    })
    .unwrap()
}

#[test]
fn vlad_matches_naive_on_world_features() {
    let world = small_world();
    let grid = build_grid(GeoPoint::new(0.0, 0.0), (200.0, 200.0), 40.0, 60.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let training: Vec<_> = grid
        .tiles()
        .iter()
        .map(|t| synth_features(&world, &t.center, 60.0, ImageStyle::Satellite, 0.0, &mut rng).unwrap())
        .collect();
    let vocab = build_vocabulary(&training, 8, 3, 50).unwrap();
    let cents: Vec<Vec<f64>> = (0..8).map(|k| vocab.centroid(k).to_vec()).collect();
    for _ in 0..20 {
        let c = GeoPoint::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
        let fs = synth_features(&world, &c, 60.0, ImageStyle::Camera, 0.3, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = fs.rows().map(|r| r.iter().map(|v| *v as f64).collect()).collect();
        let want = oracle::naive_vlad(&rows, &cents);
        let got = encode(&fs, &vocab).unwrap();
        for (a, b) in got.values().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn topk_matches_full_sort() {
    let world = small_world();
    let grid = build_grid(GeoPoint::new(0.0, 0.0), (240.0, 200.0), 40.0, 60.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let training: Vec<_> = grid
        .tiles()
        .iter()
        .map(|t| synth_features(&world, &t.center, 60.0, ImageStyle::Satellite, 0.0, &mut rng).unwrap())
        .collect();
    let vocab = build_vocabulary(&training, 6, 4, 50).unwrap();
    let db = db_build(&grid, &vocab, &SyntheticSatellite { world: &world }).unwrap();
    for _ in 0..20 {
        let c = GeoPoint::new(rng.random_range(0.0..240.0), rng.random_range(0.0..200.0));
        let q = encode(
            &synth_features(&world, &c, 60.0, ImageStyle::Camera, 0.2, &mut rng).unwrap(),
            &vocab,
        )
        .unwrap();
        let scores: Vec<(u32, f64)> = db
            .entries()
            .iter()
            .map(|e| (e.tile_id, similarity(&q, &e.descriptor).unwrap().value))
            .collect();
        for k in [1, 5, db.len()] {
            assert_eq!(query_topk(&db, &q, k).unwrap().tile_ids(), oracle::top_k_ids(&scores, k));
        }
    }
}

#[test]
fn ground_truth_neighbors_match_full_sort() {
    let grid = build_grid(GeoPoint::new(-100.0, 50.0), (400.0, 350.0), 40.0, 60.0).unwrap();
    let centers: Vec<(u32, f64, f64)> = grid
        .tiles()
        .iter()
        .map(|t| (t.tile_id, t.center.easting, t.center.northing))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..500 {
        // every fifth query sits exactly on a lattice point or midpoint
        let q = if i % 5 == 0 {
            (-100.0 + 20.0 * rng.random_range(0..20) as f64, 50.0 + 20.0 * rng.random_range(0..17) as f64)
        } else {
            (rng.random_range(-150.0..350.0), rng.random_range(0.0..450.0))
        };
        for n in [1, 5, 9] {
            let got = ground_truth_neighbors(&grid, &GeoPoint::new(q.0, q.1), n).unwrap();
            assert_eq!(got, oracle::nearest_ids(&centers, q, n), "query {q:?} n {n}");
        }
    }
}

#[test]
fn metrics_match_exhaustive_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let queries = rng.random_range(1..=40);
        let mut records = Vec::new();
        let mut cases = Vec::new();
        for q in 0..queries {
            let mut pick = || {
                let mut ids: Vec<u32> = (0..10).collect();
                for i in 0..5 {
                    let j = rng.random_range(i..10);
                    ids.swap(i, j);
                }
                ids.truncate(5);
                ids
            };
            let (r, g) = (pick(), pick());
            cases.push((r.clone(), g.clone()));
            records.push(EvalRecord::new(format!("{q}"), r, g));
        }
        for n in 1..=5 {
            assert_eq!(recall_at_n(&records, n).unwrap(), oracle::recall_at_n(&cases, n));
            for k in 1..=n {
                assert_eq!(top_k_at_n(&records, k, n).unwrap(), oracle::top_k_at_n(&cases, k, n));
            }
        }
    }
}

#[test]
fn dbscan_matches_naive_on_retrieval_like_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        // tile centers on a 40 m lattice, as retrieval returns them
        let n = rng.random_range(1..=12);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (40.0 * rng.random_range(0..10) as f64, 40.0 * rng.random_range(0..9) as f64))
            .collect();
        let geo: Vec<GeoPoint> = pts.iter().map(|p| GeoPoint::new(p.0, p.1)).collect();
        let min_pts = rng.random_range(1..=3);
        let got = dbscan(&geo, 60.0, min_pts).unwrap();
        assert_eq!(got.labels, oracle::naive_dbscan(&pts, 60.0, min_pts), "{pts:?}");
    }
}
