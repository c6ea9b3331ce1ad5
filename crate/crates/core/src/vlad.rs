//! Aerial vocabulary (k-means over local features) and VLAD aggregation.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::LocalFeatureSet;

pub const DEFAULT_N_C: usize = 32;
pub const DEFAULT_MAX_ITERS: usize = 100;

const VOCAB_MAGIC: &[u8; 4] = b"FLVB";

/// k-means cluster centers defining the VLAD assignment space.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    centroids: Vec<f64>,
    n_c: usize,
    d: usize,
    build_seed: u64,
    fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansStats {
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansStats {
    pub fn final_inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

impl Vocabulary {
    /// Centroid values are stored at `f32` precision so that the file
    /// representation is lossless.
    pub fn from_centroids(centroids: Vec<f64>, n_c: usize, d: usize, build_seed: u64) -> Result<Self> {
        if n_c < 2 {
            return Err(Error::param("vocabulary needs at least 2 centroids"));
        }
        if d == 0 || centroids.len() != n_c * d {
            return Err(Error::DimensionMismatch {
                expected: n_c * d,
                actual: centroids.len(),
            });
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("centroids must be finite"));
        }
        let centroids: Vec<f64> = centroids.into_iter().map(|v| v as f32 as f64).collect();
        let fingerprint = fingerprint_of(&centroids, n_c, d);
        Ok(Self {
            centroids,
            n_c,
            d,
            build_seed,
            fingerprint,
        })
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn build_seed(&self) -> u64 {
        self.build_seed
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.d..(k + 1) * self.d]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Nearest centroid by squared Euclidean distance, lowest index on ties.
    pub fn assign(&self, x: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, self.d, x)
    }

    /// Stable 64-bit digest of the centroid values and shape.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

fn fingerprint_of(centroids: &[f64], n_c: usize, d: usize) -> u64 {
    let mut h = Sha256::new();
    h.update((n_c as u32).to_le_bytes());
    h.update((d as u32).to_le_bytes());
    for v in centroids {
        h.update((*v as f32).to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn nearest(centroids: &[f64], d: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(d).enumerate() {
        let dist: f64 = c.iter().zip(x).map(|(c, x)| (x - c) * (x - c)).sum();
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

fn pooled_points(feature_sets: &[LocalFeatureSet]) -> Result<(Vec<f64>, usize)> {
    let d = feature_sets.first().ok_or(Error::Empty("feature set list"))?.dim();
    let mut points = Vec::new();
    for fs in feature_sets {
        if fs.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: fs.dim(),
            });
        }
        points.extend(fs.as_slice().iter().map(|&v| v as f64));
    }
    Ok((points, d))
}

pub fn build_vocabulary(
    feature_sets: &[LocalFeatureSet],
    n_c: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vocabulary> {
    build_vocabulary_with_stats(feature_sets, n_c, seed, max_iters).map(|(v, _)| v)
}

/// k-means with k-means++ seeding over all pooled features.
///
/// Iterates until the assignment reaches a fixpoint or `max_iters` Lloyd
/// steps have run. A cluster left empty is reseeded with the point
/// farthest from its current centroid.
pub fn build_vocabulary_with_stats(
    feature_sets: &[LocalFeatureSet],
    n_c: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Vocabulary, KMeansStats)> {
    if n_c < 2 {
        return Err(Error::param("n_c must be at least 2"));
    }
    let (points, d) = pooled_points(feature_sets)?;
    let n = points.len() / d;
    if n < n_c {
        return Err(Error::InsufficientFeatures {
            needed: n_c,
            available: n,
        });
    }
    let point = |i: usize| &points[i * d..(i + 1) * d];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, d, n_c, &mut rng)?;

    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(&centroids, d, point(i)))
            .collect();
        let changed = assigned
            .iter()
            .zip(&assignment)
            .any(|((k, _), prev)| k != prev);
        for (slot, (k, _)) in assignment.iter_mut().zip(&assigned) {
            *slot = *k;
        }
        let mut dist: Vec<f64> = assigned.iter().map(|(_, d2)| *d2).collect();
        history.push(dist.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        iterations += 1;

        let mut counts = vec![0usize; n_c];
        for &k in &assignment {
            counts[k] += 1;
        }
        for k in 0..n_c {
            if counts[k] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assignment[i]] -= 1;
                assignment[i] = k;
                counts[k] = 1;
                dist[i] = 0.0;
            }
        }

        let mut sums = vec![0.0; n_c * d];
        for (i, &k) in assignment.iter().enumerate() {
            for (s, x) in sums[k * d..(k + 1) * d].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for k in 0..n_c {
            if counts[k] > 0 {
                let inv = 1.0 / counts[k] as f64;
                for (c, s) in centroids[k * d..(k + 1) * d].iter_mut().zip(&sums[k * d..(k + 1) * d]) {
                    *c = s * inv;
                }
            }
        }
    }

    let mut cluster_sizes = vec![0usize; n_c];
    for &k in &assignment {
        cluster_sizes[k] += 1;
    }
    let vocab = Vocabulary::from_centroids(centroids, n_c, d, seed)?;
    Ok((
        vocab,
        KMeansStats {
            inertia_history: history,
            cluster_sizes,
            iterations,
            converged,
        },
    ))
}

fn kmeans_pp<R: Rng>(points: &[f64], d: usize, n_c: usize, rng: &mut R) -> Result<Vec<f64>> {
    let n = points.len() / d;
    let point = |i: usize| &points[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(n_c * d);
    centroids.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[..d])).collect();
    for _ in 1..n_c {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InsufficientFeatures {
                needed: n_c,
                available: centroids.len() / d,
            });
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, w) in d2.iter().enumerate() {
            if *w > 0.0 && target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        while d2[pick] == 0.0 {
            pick -= 1;
        }
        let start = centroids.len();
        centroids.extend_from_slice(point(pick));
        let c = centroids[start..].to_vec();
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(point(i), &c));
        }
    }
    Ok(centroids)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Unit-norm VLAD descriptor of length `n_c·d`. A descriptor whose
/// residuals all vanish is kept as the zero vector with `degenerate` set.
#[derive(Debug, Clone, PartialEq)]
pub struct VladDescriptor {
    values: Vec<f64>,
    n_c: usize,
    d: usize,
    degenerate: bool,
    vocab_fingerprint: u64,
}

impl VladDescriptor {
    /// Wrap raw values, e.g. from a database file. Zero vectors are
    /// marked degenerate.
    pub fn from_values(values: Vec<f64>, n_c: usize, d: usize, vocab_fingerprint: u64) -> Result<Self> {
        if values.len() != n_c * d {
            return Err(Error::DimensionMismatch {
                expected: n_c * d,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("descriptor entries must be finite"));
        }
        let degenerate = values.iter().all(|v| *v == 0.0);
        Ok(Self {
            values,
            n_c,
            d,
            degenerate,
            vocab_fingerprint,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Fingerprint of the vocabulary this descriptor was encoded with.
    pub fn vocab_fingerprint(&self) -> u64 {
        self.vocab_fingerprint
    }

    /// Same descriptor with values rounded to `f32` storage precision.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| *v as f32 as f64).collect(),
            ..self.clone()
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

/// Hard-assignment VLAD with per-cluster then global L2 normalization.
pub fn encode(features: &LocalFeatureSet, vocab: &Vocabulary) -> Result<VladDescriptor> {
    if features.dim() != vocab.d {
        return Err(Error::DimensionMismatch {
            expected: vocab.d,
            actual: features.dim(),
        });
    }
    let d = vocab.d;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); vocab.n_c];
    let mut x = vec![0.0; d];
    for (i, row) in features.rows().enumerate() {
        for (xi, r) in x.iter_mut().zip(row) {
            *xi = *r as f64;
        }
        members[vocab.assign(&x).0].push(i);
    }
    // rows are summed in a canonical order so the result does not depend
    // on the order of the input features
    let mut values = vec![0.0; vocab.n_c * d];
    for (k, idx) in members.iter_mut().enumerate() {
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (features.row(a), features.row(b));
            ra.iter()
                .zip(rb)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let c = vocab.centroid(k);
        let block = &mut values[k * d..(k + 1) * d];
        for &i in idx.iter() {
            for ((v, r), ci) in block.iter_mut().zip(features.row(i)).zip(c) {
                *v += *r as f64 - ci;
            }
        }
    }
    for block in values.chunks_exact_mut(d) {
        let n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            block.iter_mut().for_each(|v| *v /= n);
        }
    }
    let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let degenerate = !(n > 0.0);
    if !degenerate {
        values.iter_mut().for_each(|v| *v /= n);
    }
    Ok(VladDescriptor {
        values,
        n_c: vocab.n_c,
        d,
        degenerate,
        vocab_fingerprint: vocab.fingerprint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// Set when either side was a zero descriptor; `value` is then 0.
    pub degenerate: bool,
}

/// Cosine similarity in `[-1, 1]`.
pub fn similarity(a: &VladDescriptor, b: &VladDescriptor) -> Result<Similarity> {
    if a.n_c != b.n_c || a.d != b.d {
        return Err(Error::DimensionMismatch {
            expected: a.values.len(),
            actual: b.values.len(),
        });
    }
    if a.degenerate || b.degenerate {
        return Ok(Similarity {
            value: 0.0,
            degenerate: true,
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(Similarity {
        value: (dot / (a.norm() * b.norm())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn write_vocabulary(mut w: impl Write, vocab: &Vocabulary) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + vocab.centroids.len() * 4);
    buf.extend_from_slice(VOCAB_MAGIC);
    buf.extend_from_slice(&(vocab.n_c as u32).to_le_bytes());
    buf.extend_from_slice(&(vocab.d as u32).to_le_bytes());
    buf.extend_from_slice(&vocab.build_seed.to_le_bytes());
    for v in &vocab.centroids {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_vocabulary(mut r: impl Read) -> Result<Vocabulary> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != VOCAB_MAGIC {
        return Err(Error::format("malformed vocabulary header"));
    }
    let n_c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload = &bytes[20..];
    if payload.len() != n_c * d * 4 {
        return Err(Error::format("vocabulary payload length does not match header"));
    }
    let centroids = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Vocabulary::from_centroids(centroids, n_c, d, seed)
}
