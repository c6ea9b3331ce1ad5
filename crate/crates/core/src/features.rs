//! Dense local feature sets: a seeded synthetic world generator and the
//! `FLF1` binary file format used to plug in externally computed features.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_FEATURES_PER_IMAGE: usize = 256;

const FEATURE_MAGIC: &[u8; 4] = b"FLF1";

/// Row-major set of `d`-dimensional local features from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    dim: usize,
    data: Vec<f32>,
    pub source_id: String,
}

impl LocalFeatureSet {
    pub fn new(dim: usize, data: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("feature dimension must be positive"));
        }
        if data.is_empty() {
            return Err(Error::Empty("feature set"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len() % dim,
            });
        }
        Ok(Self {
            dim,
            data,
            source_id: source_id.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], source_id: impl Into<String>) -> Result<Self> {
        let dim = rows.first().ok_or(Error::Empty("feature set"))?.len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data, source_id)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Circular area whose appearance repeats, producing aliasing retrievals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepetitionZone {
    pub center: GeoPoint,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageStyle {
    Satellite,
    Camera,
}

/// Parameters of the synthetic appearance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub seed: u64,
    /// Lattice pitch of the texture field, meters.
    pub texture_scale: f64,
    /// Size of the shared texture alphabet.
    pub n_basis: usize,
    /// 0 = every lattice node is an alphabet entry, 1 = every node unique.
    pub distinctiveness: f64,
    pub repetition_zones: Vec<RepetitionZone>,
    pub dim: usize,
    pub features_per_image: usize,
    /// Rotation magnitude and bias scale of the camera style shift.
    pub style_strength: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            seed: 7,
            texture_scale: 10.0,
            n_basis: 48,
            distinctiveness: 0.6,
            repetition_zones: Vec::new(),
            dim: DEFAULT_FEATURE_DIM,
            features_per_image: DEFAULT_FEATURES_PER_IMAGE,
            style_strength: 0.1,
        }
    }
}

const ZONE_ALPHABET: usize = 16;

/// Seeded synthetic world. Appearance at a ground point is a bilinear blend
/// of per-node texture vectors on a square lattice; each node mixes an
/// entry of a shared alphabet with a node-unique vector according to
/// `distinctiveness`.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    params: WorldParams,
    basis: Vec<Vec<f64>>,
    zone_vectors: Vec<Vec<Vec<f64>>>,
    style_rotation: DMatrix<f64>,
    style_bias: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(params: WorldParams) -> Result<Self> {
        if !(params.texture_scale > 0.0) {
            return Err(Error::param("texture_scale must be positive"));
        }
        if !(0.0..=1.0).contains(&params.distinctiveness) {
            return Err(Error::param("distinctiveness must lie in [0, 1]"));
        }
        if params.n_basis == 0 || params.dim == 0 || params.features_per_image == 0 {
            return Err(Error::param("n_basis, dim and features_per_image must be positive"));
        }
        if params.repetition_zones.iter().any(|z| !(z.radius > 0.0)) {
            return Err(Error::param("repetition zone radius must be positive"));
        }
        let d = params.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[params.seed, 0xB0A5]));
        let basis: Vec<Vec<f64>> = (0..params.n_basis).map(|_| gaussian(&mut rng, d)).collect();

        let zone_vectors = (0..params.repetition_zones.len())
            .map(|z| {
                let mut zr = ChaCha8Rng::seed_from_u64(mix(&[params.seed, 0x2011E, z as u64]));
                (0..ZONE_ALPHABET)
                    .map(|_| {
                        let b = &basis[zr.random_range(0..basis.len())];
                        let u = gaussian(&mut zr, d);
                        b.iter().zip(&u).map(|(b, u)| 0.8 * b + 0.2 * u).collect()
                    })
                    .collect()
            })
            .collect();

        // Near-identity orthogonal map: Q factor of I + s·G with a
        // positive-diagonal R.
        let mut sr = ChaCha8Rng::seed_from_u64(mix(&[params.seed, 0x57E1]));
        let g = DMatrix::from_fn(d, d, |_, _| sr.sample::<f64, _>(StandardNormal));
        let m = DMatrix::identity(d, d) + g * (params.style_strength / (d as f64).sqrt());
        let qr = m.qr();
        let (mut q, r) = (qr.q(), qr.r());
        for k in 0..d {
            if r[(k, k)] < 0.0 {
                q.column_mut(k).neg_mut();
            }
        }
        let style_bias = gaussian(&mut sr, d)
            .into_iter()
            .map(|v| v * params.style_strength)
            .collect();

        Ok(Self {
            params,
            basis,
            zone_vectors,
            style_rotation: q,
            style_bias,
        })
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Map a satellite-domain feature into the camera domain.
    pub fn apply_style(&self, feature: &[f64]) -> Vec<f64> {
        let d = self.params.dim;
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| self.style_rotation[(i, j)] * feature[j])
                    .sum::<f64>()
                    + self.style_bias[i]
            })
            .collect()
    }

    pub fn style_rotation(&self) -> &DMatrix<f64> {
        &self.style_rotation
    }

    pub fn style_bias(&self) -> &[f64] {
        &self.style_bias
    }

    fn node_vector(&self, i: i64, j: i64) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix(&[self.params.seed, 0x40DE, i as u64, j as u64]));
        let b = &self.basis[rng.random_range(0..self.basis.len())];
        let u = gaussian(&mut rng, self.params.dim);
        let w = self.params.distinctiveness;
        b.iter().zip(&u).map(|(b, u)| (1.0 - w) * b + w * u).collect()
    }

    fn zone_of(&self, p: &GeoPoint) -> Option<usize> {
        self.params
            .repetition_zones
            .iter()
            .position(|z| z.center.distance(p) <= z.radius)
    }

    /// Whether `p` lies in a repetition zone.
    pub fn in_repetition_zone(&self, p: &GeoPoint) -> bool {
        self.zone_of(p).is_some()
    }

    /// Noise-free satellite-domain feature rows for a square footprint.
    fn clean_features(&self, center: &GeoPoint, fov: f64) -> Vec<Vec<f64>> {
        let n = self.params.features_per_image;
        let side = (n as f64).sqrt().ceil() as usize;
        let s = self.params.texture_scale;

        let lo_e = ((center.easting - fov / 2.0) / s).floor() as i64;
        let lo_n = ((center.northing - fov / 2.0) / s).floor() as i64;
        let hi_e = ((center.easting + fov / 2.0) / s).floor() as i64 + 1;
        let hi_n = ((center.northing + fov / 2.0) / s).floor() as i64 + 1;
        let w = (hi_e - lo_e + 1) as usize;
        let nodes: Vec<Vec<f64>> = (lo_n..=hi_n)
            .flat_map(|j| (lo_e..=hi_e).map(move |i| (i, j)))
            .map(|(i, j)| self.node_vector(i, j))
            .collect();
        let node = |i: i64, j: i64| &nodes[(j - lo_n) as usize * w + (i - lo_e) as usize];

        (0..n)
            .map(|k| {
                let (a, b) = (k % side, k / side);
                let p = center.offset(
                    ((a as f64 + 0.5) / side as f64 - 0.5) * fov,
                    ((b as f64 + 0.5) / side as f64 - 0.5) * fov,
                );
                if let Some(z) = self.zone_of(&p) {
                    return self.zone_vectors[z][k % ZONE_ALPHABET].clone();
                }
                let (ue, un) = (p.easting / s, p.northing / s);
                let (i0, j0) = (ue.floor() as i64, un.floor() as i64);
                let (fe, fn_) = (ue - i0 as f64, un - j0 as f64);
                let (c00, c10, c01, c11) = (
                    (1.0 - fe) * (1.0 - fn_),
                    fe * (1.0 - fn_),
                    (1.0 - fe) * fn_,
                    fe * fn_,
                );
                let (v00, v10, v01, v11) =
                    (node(i0, j0), node(i0 + 1, j0), node(i0, j0 + 1), node(i0 + 1, j0 + 1));
                (0..self.params.dim)
                    .map(|c| c00 * v00[c] + c10 * v10[c] + c01 * v01[c] + c11 * v11[c])
                    .collect()
            })
            .collect()
    }
}

/// Synthesize the local features an image of `style` would yield for the
/// square footprint at `center`. With `noise_sigma == 0` the result is a
/// pure function of the world, footprint and style and `rng` is untouched.
pub fn synth_features<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    center: &GeoPoint,
    fov: f64,
    style: ImageStyle,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<LocalFeatureSet> {
    if !(fov > 0.0) {
        return Err(Error::param("fov must be positive"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::param("noise_sigma must be non-negative"));
    }
    let mut data = Vec::with_capacity(world.params.features_per_image * world.params.dim);
    for row in world.clean_features(center, fov) {
        let styled = match style {
            ImageStyle::Satellite => row,
            ImageStyle::Camera => world.apply_style(&row),
        };
        for v in styled {
            let noisy = if noise_sigma > 0.0 {
                v + noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                v
            };
            data.push(noisy as f32);
        }
    }
    let tag = match style {
        ImageStyle::Satellite => "sat",
        ImageStyle::Camera => "cam",
    };
    LocalFeatureSet::new(
        world.params.dim,
        data,
        format!("{tag}@{},{}", center.easting, center.northing),
    )
}

pub fn write_features(mut w: impl Write, set: &LocalFeatureSet) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + set.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(set.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for v in &set.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_features(mut r: impl Read, source_id: impl Into<String>) -> Result<LocalFeatureSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.is_empty() {
        return Err(Error::Empty("feature file"));
    }
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format("malformed feature file header"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 || count == 0 {
        return Err(Error::format("feature file declares zero dimension or count"));
    }
    let payload = &bytes[12..];
    if payload.len() != dim * count * 4 {
        return Err(Error::format(format!(
            "feature payload is {} bytes, header implies {}",
            payload.len(),
            dim * count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LocalFeatureSet::new(dim, data, source_id)
}

pub fn load_features(path: impl AsRef<std::path::Path>) -> Result<LocalFeatureSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_features(std::io::BufReader::new(file), path.display().to_string())
}

pub fn save_features(path: impl AsRef<std::path::Path>, set: &LocalFeatureSet) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_features(&mut w, set)?;
    w.flush()?;
    Ok(())
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// SplitMix64-style fold of several words into one seed.
pub(crate) fn mix(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        h ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(WorldParams {
            repetition_zones: vec![RepetitionZone {
                center: GeoPoint::new(500.0, 500.0),
                radius: 120.0,
            }],
            ..WorldParams::default()
        })
        .unwrap()
    }

    fn synth(w: &SyntheticWorld, c: GeoPoint, style: ImageStyle) -> LocalFeatureSet {
        synth_features(w, &c, 60.0, style, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn noiseless_is_deterministic() {
        let w = world();
        let c = GeoPoint::new(123.0, 45.0);
        let a = synth(&w, c, ImageStyle::Satellite);
        assert_eq!(a, synth(&w, c, ImageStyle::Satellite));
        assert_eq!(a, synth(&world(), c, ImageStyle::Satellite));
        assert_eq!(a.len(), DEFAULT_FEATURES_PER_IMAGE);
        assert_eq!(a.dim(), DEFAULT_FEATURE_DIM);
    }

    #[test]
    fn camera_is_style_map_of_satellite() {
        let w = world();
        let c = GeoPoint::new(-70.0, 310.0);
        let sat = synth(&w, c, ImageStyle::Satellite);
        let cam = synth(&w, c, ImageStyle::Camera);
        assert_ne!(sat, cam);
        for (s, k) in sat.rows().zip(cam.rows()) {
            let s64: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            let mapped = w.apply_style(&s64);
            for (m, k) in mapped.iter().zip(k) {
                assert!((m - *k as f64).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn style_rotation_is_orthogonal() {
        let w = world();
        let q = w.style_rotation();
        let err = (q.transpose() * q - DMatrix::identity(w.dim(), w.dim())).abs().max();
        assert!(err < 1e-10);
        assert!(q.determinant() > 0.0);
    }

    #[test]
    fn noise_changes_values() {
        let w = world();
        let c = GeoPoint::new(0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = synth_features(&w, &c, 60.0, ImageStyle::Camera, 0.5, &mut rng).unwrap();
        assert_ne!(noisy, synth(&w, c, ImageStyle::Camera));
    }

    #[test]
    fn zone_footprints_share_features() {
        let w = world();
        let a = synth(&w, GeoPoint::new(470.0, 480.0), ImageStyle::Satellite);
        let b = synth(&w, GeoPoint::new(530.0, 520.0), ImageStyle::Satellite);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = WorldParams {
            distinctiveness: 1.5,
            ..WorldParams::default()
        };
        assert!(SyntheticWorld::new(bad).is_err());
        let bad = WorldParams {
            texture_scale: 0.0,
            ..WorldParams::default()
        };
        assert!(SyntheticWorld::new(bad).is_err());
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synth_features(&w, &GeoPoint::default(), 0.0, ImageStyle::Camera, 0.0, &mut rng).is_err());
        assert!(synth_features(&w, &GeoPoint::default(), 60.0, ImageStyle::Camera, -1.0, &mut rng).is_err());
    }

    #[test]
    fn file_small_fixture() {
        let set = LocalFeatureSet::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], "x").unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &set).unwrap();
        assert_eq!(&buf[..4], b"FLF1");
        let back = read_features(buf.as_slice(), "x").unwrap();
        assert_eq!((back.len(), back.dim()), (2, 3));
        assert_eq!(back.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn file_rejects_malformed() {
        assert!(matches!(read_features(&[][..], "e"), Err(Error::Empty(_))));
        assert!(matches!(read_features(&b"FLX1\0\0\0\0\0\0\0\0"[..], "e"), Err(Error::Format(_))));
        // header says 2 rows of dim 3 but one row is short
        let mut buf = Vec::new();
        buf.extend_from_slice(b"FLF1");
        buf.extend_from_slice(&3u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(read_features(buf.as_slice(), "e"), Err(Error::Format(_))));
    }

    #[test]
    fn synth_round_trip_is_bitwise() {
        let w = world();
        let set = synth(&w, GeoPoint::new(10.0, 20.0), ImageStyle::Camera);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flf");
        save_features(&path, &set).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.dim(), set.dim());
        let bits = |s: &LocalFeatureSet| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&set));
    }

    #[test]
    fn row_length_mismatch() {
        assert!(matches!(
            LocalFeatureSet::from_rows(&[vec![1.0, 2.0], vec![1.0]], "x"),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
