use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use anchorloc::features::{synth_features, ImageStyle, RepetitionZone, SyntheticWorld, WorldParams};
use anchorloc::geo::GeoPoint;
use anchorloc::scenario::{vocabulary_training_set, GridConfig};
use anchorloc::sim::{corrupt_odometry, generate_truth, DriftModel, Pattern, TrajectorySpec};
use anchorloc::vlad::{build_vocabulary, build_vocabulary_with_stats, encode, similarity, Vocabulary};

fn vocab_for(world: &SyntheticWorld) -> Vocabulary {
    let grid = GridConfig::default().build().unwrap();
    let training = vocabulary_training_set(world, &grid, 4).unwrap();
    build_vocabulary(&training, 32, 1, 100).unwrap()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Area overlap fraction of two axis-aligned squares of side `fov`.
fn square_overlap(a: &GeoPoint, b: &GeoPoint, fov: f64) -> f64 {
    let ox = (fov - (a.easting - b.easting).abs()).max(0.0);
    let oy = (fov - (a.northing - b.northing).abs()).max(0.0);
    ox * oy / (fov * fov)
}

#[test]
fn similarity_rises_with_footprint_overlap() {
    let world = SyntheticWorld::new(WorldParams::default()).unwrap();
    let vocab = vocab_for(&world);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut overlaps, mut sims) = (Vec::new(), Vec::new());
    for _ in 0..150 {
        let a = GeoPoint::new(rng.random_range(60.0..340.0), rng.random_range(60.0..290.0));
        let r = rng.random_range(0.0..70.0);
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        let b = a.offset(r * th.cos(), r * th.sin());
        let da = encode(&synth_features(&world, &a, 60.0, ImageStyle::Satellite, 0.0, &mut rng).unwrap(), &vocab).unwrap();
        let db = encode(&synth_features(&world, &b, 60.0, ImageStyle::Camera, 0.2, &mut rng).unwrap(), &vocab).unwrap();
        overlaps.push(square_overlap(&a, &b, 60.0));
        sims.push(similarity(&da, &db).unwrap().value);
    }
    let rho = pearson(&ranks(&overlaps), &ranks(&sims));
    assert!(rho > 0.8, "spearman {rho}");
}

#[test]
fn repetition_zone_descriptors_alias() {
    let zone = RepetitionZone {
        center: GeoPoint::new(200.0, 200.0),
        radius: 120.0,
    };
    let world = SyntheticWorld::new(WorldParams {
        repetition_zones: vec![zone],
        ..WorldParams::default()
    })
    .unwrap();
    let vocab = vocab_for(&world);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (a, b) in [((180.0, 190.0), (230.0, 215.0)), ((160.0, 200.0), (200.0, 240.0))] {
        let da = encode(
            &synth_features(&world, &GeoPoint::new(a.0, a.1), 60.0, ImageStyle::Satellite, 0.0, &mut rng).unwrap(),
            &vocab,
        )
        .unwrap();
        let db = encode(
            &synth_features(&world, &GeoPoint::new(b.0, b.1), 60.0, ImageStyle::Satellite, 0.0, &mut rng).unwrap(),
            &vocab,
        )
        .unwrap();
        let s = similarity(&da, &db).unwrap().value;
        assert!(s > 0.99, "cosine {s}");
    }
}

#[test]
fn kmeans_inertia_never_increases() {
    let world = SyntheticWorld::new(WorldParams::default()).unwrap();
    let grid = GridConfig::default().build().unwrap();
    let training = vocabulary_training_set(&world, &grid, 8).unwrap();
    for seed in 0..5 {
        for n_c in [4, 16, 32] {
            let (_, stats) = build_vocabulary_with_stats(&training, n_c, seed, 100).unwrap();
            for w in stats.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "seed {seed} n_c {n_c}: {w:?}");
            }
            assert_eq!(stats.cluster_sizes.iter().sum::<usize>(), training.iter().map(|s| s.len()).sum::<usize>());
        }
    }
}

#[test]
fn heading_walk_error_grows_like_sqrt_distance() {
    let spec = TrajectorySpec {
        pattern: Pattern::Lawnmower,
        length: 2000.0,
        ..TrajectorySpec::default()
    };
    let truth = generate_truth(&spec, GeoPoint::new(0.0, 0.0), 0.1).unwrap();
    let zero = corrupt_odometry(&truth, &DriftModel::none()).unwrap();
    let checkpoints = [250.0, 500.0, 1000.0, 1990.0];
    let seeds = 200;
    let mut var = [0.0; 4];
    for seed in 0..seeds {
        let model = DriftModel {
            heading_random_walk: 0.002,
            seed,
            ..DriftModel::none()
        };
        let odo = corrupt_odometry(&truth, &model).unwrap();
        for (slot, meters) in var.iter_mut().zip(checkpoints) {
            let i = (meters / spec.speed / 0.1) as usize;
            let d = odo.samples()[i].orientation.euler_angles().2 - zero.samples()[i].orientation.euler_angles().2;
            *slot += d.sin().atan2(d.cos()).powi(2) / seeds as f64;
        }
    }
    // heading error sd ~ q·sqrt(distance)
    for (v, meters) in var.iter().zip(checkpoints) {
        let expected = 0.002f64.powi(2) * meters;
        assert!((v / expected - 1.0).abs() < 0.25, "{meters} m: variance {v} vs {expected}");
    }
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    for w in sd.windows(2) {
        assert!(w[1] > w[0]);
    }
}
