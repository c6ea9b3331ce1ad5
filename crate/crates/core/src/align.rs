//! Anchoring the odometry frame to the Earth frame from a sliding window of
//! (odometry position, geo-observation) correspondences.
//!
//! Two solvers are provided. [`align_rigid`] is the unconstrained
//! closed-form least-squares rigid fit, which loses one rotational degree
//! of freedom when the trajectory is a straight line. [`align_gravity`]
//! treats gravity agreement as a hard constraint: the rotation is the
//! minimal tilt taking local gravity onto world gravity, followed by the
//! closed-form optimal yaw about the world vertical. It stays well posed for
//! colinear windows.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geo::{AnchorTransform, GeoPoint, GravityVector};

pub const DEFAULT_WINDOW_CAPACITY: usize = 20;
pub const DEFAULT_CONDITION_THRESHOLD: f64 = 50.0;
pub const DEFAULT_MIN_PAIRS: usize = 5;
pub const DEFAULT_MIN_EXTENT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub local: Vector3<f64>,
    pub world: GeoPoint,
}

/// Chronological window holding at most `capacity` correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceWindow {
    pairs: VecDeque<Correspondence>,
    capacity: usize,
}

impl CorrespondenceWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("window capacity must be positive"));
        }
        Ok(Self {
            pairs: VecDeque::with_capacity(capacity + 1),
            capacity,
        })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = Correspondence>, capacity: usize) -> Result<Self> {
        let mut w = Self::new(capacity)?;
        for p in pairs {
            w.push(p.local, p.world);
        }
        Ok(w)
    }

    /// Append, evicting the oldest pair when over capacity.
    pub fn push(&mut self, local: Vector3<f64>, world: GeoPoint) {
        self.pairs.push_back(Correspondence { local, world });
        while self.pairs.len() > self.capacity {
            self.pairs.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.pairs.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Correspondence> {
        self.pairs.iter()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Largest horizontal (x, y) distance between any two local positions.
    pub fn horizontal_extent(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.pairs.iter().enumerate() {
            for b in self.pairs.iter().skip(i + 1) {
                best = best.max((a.local.x - b.local.x).hypot(a.local.y - b.local.y));
            }
        }
        best
    }
}

pub fn push_correspondence(
    mut window: CorrespondenceWindow,
    local: Vector3<f64>,
    obs: GeoPoint,
) -> CorrespondenceWindow {
    window.push(local, obs);
    window
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentReport {
    #[serde(skip)]
    pub transform: AnchorTransform,
    pub rms_residual: f64,
    /// Largest singular value of the centered horizontal local positions.
    pub spread: f64,
    /// Ratio of the two horizontal singular values; infinite when the
    /// positions are colinear.
    pub condition: f64,
    pub degenerate: bool,
    /// Local and world gravity were antiparallel; the tilt was taken about
    /// a fixed reference axis.
    pub gravity_flipped: bool,
}

fn centroids(window: &CorrespondenceWindow) -> (Vector3<f64>, Vector3<f64>) {
    let n = window.len() as f64;
    let (mut cl, mut cw) = (Vector3::zeros(), Vector3::zeros());
    for p in window.iter() {
        cl += p.local;
        cw += p.world.lift();
    }
    (cl / n, cw / n)
}

fn check_finite(window: &CorrespondenceWindow) -> Result<()> {
    if window
        .iter()
        .any(|p| !p.local.iter().all(|v| v.is_finite()) || !p.world.is_finite())
    {
        return Err(Error::param("correspondence coordinates must be finite"));
    }
    Ok(())
}

/// (spread, condition) of vectors projected onto the plane normal to `up`.
fn horizontal_scatter(vectors: impl Iterator<Item = Vector3<f64>>, up: &Vector3<f64>) -> (f64, f64) {
    let (e1, e2) = plane_basis(up);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for v in vectors {
        let (x, y) = (v.dot(&e1), v.dot(&e2));
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let l1 = (tr / 2.0 + disc).max(0.0);
    let l2 = (tr / 2.0 - disc).max(0.0);
    let spread = l1.sqrt();
    let condition = if l2 <= l1 * 1e-24 || l2 == 0.0 {
        f64::INFINITY
    } else {
        (l1 / l2).sqrt()
    };
    (spread, condition)
}

fn plane_basis(up: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if up.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (seed - up * seed.dot(up)).normalize();
    let e2 = up.cross(&e1);
    (e1, e2)
}

fn rms(window: &CorrespondenceWindow, t: &AnchorTransform) -> f64 {
    let ss: f64 = window
        .iter()
        .map(|p| (t.apply(&p.local) - p.world.lift()).norm_squared())
        .sum();
    (ss / window.len() as f64).sqrt()
}

/// Unconstrained closed-form rigid fit (centroid subtraction, SVD of the
/// cross-covariance, reflection correction).
pub fn align_rigid(window: &CorrespondenceWindow) -> Result<AlignmentReport> {
    align_rigid_with(window, DEFAULT_CONDITION_THRESHOLD)
}

pub fn align_rigid_with(window: &CorrespondenceWindow, condition_threshold: f64) -> Result<AlignmentReport> {
    if window.len() < 3 {
        return Err(Error::InsufficientPairs {
            needed: 3,
            available: window.len(),
        });
    }
    check_finite(window)?;
    let (cl, cw) = centroids(window);
    let mut h = Matrix3::zeros();
    for p in window.iter() {
        h += (p.local - cl) * (p.world.lift() - cw).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = Rotation3::from_matrix_unchecked(r);
    let translation = cw - rotation * cl;

    let (spread, condition) = horizontal_scatter(window.iter().map(|p| p.local - cl), &Vector3::z());
    let degenerate = !(condition <= condition_threshold);
    let mut transform = AnchorTransform::new(rotation, translation);
    transform.residual_rms = rms(window, &transform);
    transform.degenerate = degenerate;
    Ok(AlignmentReport {
        transform,
        rms_residual: transform.residual_rms,
        spread,
        condition,
        degenerate,
        gravity_flipped: false,
    })
}

/// Minimal rotation taking `from` onto `to`; antiparallel inputs rotate by
/// π about a fixed axis orthogonal to `from` and report `true`.
pub fn tilt_between(from: &Vector3<f64>, to: &Vector3<f64>) -> (Rotation3<f64>, bool) {
    let c = from.dot(to);
    if c > -1.0 + 1e-12 {
        if let Some(r) = Rotation3::rotation_between(from, to) {
            return (r, false);
        }
        return (Rotation3::identity(), false);
    }
    let (axis, _) = plane_basis(from);
    (Rotation3::from_axis_angle(&Unit::new_normalize(axis), std::f64::consts::PI), true)
}

/// Gravity-constrained alignment with gravity as a hard constraint.
pub fn align_gravity(
    window: &CorrespondenceWindow,
    g_local: &GravityVector,
    g_world: &GravityVector,
) -> Result<AlignmentReport> {
    if window.len() < 2 {
        return Err(Error::InsufficientPairs {
            needed: 2,
            available: window.len(),
        });
    }
    check_finite(window)?;
    let (tilt, flipped) = tilt_between(g_local.direction(), g_world.direction());
    let up = -g_world.direction();
    let (cl, cw) = centroids(window);

    let flat = |v: Vector3<f64>| v - up * v.dot(&up);
    let (mut sin_sum, mut cos_sum, mut energy) = (0.0, 0.0, 0.0);
    for p in window.iter() {
        let a = flat(tilt * (p.local - cl));
        let b = flat(p.world.lift() - cw);
        sin_sum += a.cross(&b).dot(&up);
        cos_sum += a.dot(&b);
        energy += a.norm_squared();
    }
    if energy < 1e-12 {
        return Err(Error::InsufficientExtent);
    }
    let yaw = sin_sum.atan2(cos_sum);
    let rotation = Rotation3::from_axis_angle(&Unit::new_unchecked(up), yaw) * tilt;
    let translation = cw - rotation * cl;

    let (spread, condition) = horizontal_scatter(window.iter().map(|p| tilt * (p.local - cl)), &up);
    let mut transform = AnchorTransform::new(rotation, translation);
    transform.residual_rms = rms(window, &transform);
    Ok(AlignmentReport {
        transform,
        rms_residual: transform.residual_rms,
        spread,
        condition,
        degenerate: false,
        gravity_flipped: flipped,
    })
}

/// Soft-constraint variant: minimizes the trajectory residuals plus
/// `weight·‖R·g_local − g_world‖²` by damped Gauss-Newton on SO(3),
/// starting from the hard-constraint solution.
pub fn align_gravity_weighted(
    window: &CorrespondenceWindow,
    g_local: &GravityVector,
    g_world: &GravityVector,
    weight: f64,
) -> Result<AlignmentReport> {
    if !(weight >= 0.0) {
        return Err(Error::param("gravity weight must be non-negative"));
    }
    let start = align_gravity(window, g_local, g_world)?;
    let (cl, cw) = centroids(window);
    let a: Vec<Vector3<f64>> = window.iter().map(|p| p.local - cl).collect();
    let b: Vec<Vector3<f64>> = window.iter().map(|p| p.world.lift() - cw).collect();
    let (gl, gw) = (*g_local.direction(), *g_world.direction());

    let cost = |r: &Rotation3<f64>| -> f64 {
        a.iter().zip(&b).map(|(a, b)| (r * a - b).norm_squared()).sum::<f64>()
            + weight * (r * gl - gw).norm_squared()
    };
    let skew = |v: &Vector3<f64>| v.cross_matrix();

    let mut r = start.transform.rotation;
    let mut f = cost(&r);
    let mut lambda = 1e-6;
    for _ in 0..200 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (a, b) in a.iter().zip(&b) {
            let ra = r * a;
            let j = -skew(&ra);
            let res = ra - b;
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let rg = r * gl;
        let j = -skew(&rg);
        jtj += j.transpose() * j * weight;
        jtr += j.transpose() * (rg - gw) * weight;

        let mut improved = false;
        for _ in 0..20 {
            let damped = jtj + Matrix3::from_diagonal_element(lambda * (1.0 + jtj.trace()));
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                break;
            };
            let candidate = Rotation3::new(step) * r;
            let fc = cost(&candidate);
            if fc <= f {
                let done = step.norm() < 1e-13;
                r = candidate;
                f = fc;
                lambda = (lambda * 0.3).max(1e-15);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }

    let rotation = r;
    let translation = cw - rotation * cl;
    let mut transform = AnchorTransform::new(rotation, translation);
    transform.residual_rms = rms(window, &transform);
    Ok(AlignmentReport {
        transform,
        rms_residual: transform.residual_rms,
        ..start
    })
}

/// When the pipeline attempts an alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct AnchorTrigger {
    pub min_pairs: usize,
    pub min_extent: f64,
}

impl Default for AnchorTrigger {
    fn default() -> Self {
        Self {
            min_pairs: DEFAULT_MIN_PAIRS,
            min_extent: DEFAULT_MIN_EXTENT,
        }
    }
}

impl AnchorTrigger {
    pub fn ready(&self, window: &CorrespondenceWindow) -> bool {
        window.len() >= self.min_pairs.max(2) && window.horizontal_extent() >= self.min_extent
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignmentLogEntry {
    pub timestamp: f64,
    pub pairs: usize,
    pub yaw: f64,
    pub translation: [f64; 3],
    pub rms_residual: f64,
    pub condition: f64,
    pub degenerate: bool,
}

impl AlignmentLogEntry {
    pub fn new(timestamp: f64, pairs: usize, report: &AlignmentReport) -> Self {
        let t = report.transform.translation;
        Self {
            timestamp,
            pairs,
            yaw: report.transform.yaw(),
            translation: [t.x, t.y, t.z],
            rms_residual: report.rms_residual,
            condition: report.condition,
            degenerate: report.degenerate,
        }
    }
}

/// One JSON object per solve. Infinite conditions serialize as `null`.
pub fn write_alignment_log(mut w: impl Write, entries: &[AlignmentLogEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(|err| Error::format(err.to_string()))?;
        out.push(b'\n');
    }
    w.write_all(&out)?;
    Ok(())
}

pub const CORRESPONDENCE_HEADER: &str = "x,y,z,easting,northing";

/// Correspondence CSV: local position then geo-observation, one pair per
/// row in chronological order.
pub fn read_correspondences(reader: impl std::io::BufRead) -> Result<Vec<Correspondence>> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or(Error::Empty("correspondence file"))??;
    if header.trim() != CORRESPONDENCE_HEADER {
        return Err(Error::format(format!(
            "unexpected header {:?}, expected {CORRESPONDENCE_HEADER:?}",
            header.trim()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("line {}: {e}", i + 2)))?;
        if v.len() != 5 {
            return Err(Error::format(format!("line {}: expected 5 columns, got {}", i + 2, v.len())));
        }
        out.push(Correspondence {
            local: Vector3::new(v[0], v[1], v[2]),
            world: GeoPoint::new(v[3], v[4]),
        });
    }
    Ok(out)
}

pub fn write_correspondences(mut w: impl Write, pairs: &[Correspondence]) -> Result<()> {
    let mut s = format!("{CORRESPONDENCE_HEADER}\n");
    for p in pairs {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.local.x, p.local.y, p.local.z, p.world.easting, p.world.northing
        ));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}
