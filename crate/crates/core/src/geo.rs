//! Geometric primitives shared by every stage: Earth-fixed planar points,
//! odometry poses, gravity directions, anchor transforms and trajectories.
//!
//! Easting/Northing are treated as a local planar metric frame (UTM-style).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar Earth-fixed position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoPoint {
    pub easting: f64,
    pub northing: f64,
}

impl GeoPoint {
    pub const fn new(easting: f64, northing: f64) -> Self {
        Self { easting, northing }
    }

    pub fn is_finite(&self) -> bool {
        self.easting.is_finite() && self.northing.is_finite()
    }

    pub fn distance(&self, other: &GeoPoint) -> f64 {
        (self.easting - other.easting).hypot(self.northing - other.northing)
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.easting, self.northing)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v.x, v.y)
    }

    /// Lift to 3D with zero vertical component.
    pub fn lift(&self) -> Vector3<f64> {
        Vector3::new(self.easting, self.northing, 0.0)
    }

    pub fn offset(&self, de: f64, dn: f64) -> Self {
        Self::new(self.easting + de, self.northing + dn)
    }

    /// Arithmetic mean of a non-empty set of points.
    pub fn centroid<'a>(points: impl IntoIterator<Item = &'a GeoPoint>) -> Option<GeoPoint> {
        let mut n = 0usize;
        let (mut e, mut no) = (0.0, 0.0);
        for p in points {
            e += p.easting;
            no += p.northing;
            n += 1;
        }
        (n > 0).then(|| GeoPoint::new(e / n as f64, no / n as f64))
    }
}

/// A timestamped pose in the local odometry frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdomPose {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    /// Body-to-odometry orientation.
    pub orientation: UnitQuaternion<f64>,
}

impl OdomPose {
    pub fn new(timestamp: f64, position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            timestamp,
            position,
            orientation,
        }
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        self.orientation.to_rotation_matrix()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Local,
    World,
}

/// Unit gravity direction expressed in either the odometry or world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityVector {
    direction: Vector3<f64>,
    frame: Frame,
}

impl GravityVector {
    /// Normalizes `direction`; fails on zero or non-finite input.
    pub fn new(direction: Vector3<f64>, frame: Frame) -> Result<Self> {
        let n = direction.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::param("gravity direction must be finite and nonzero"));
        }
        Ok(Self {
            direction: direction / n,
            frame,
        })
    }

    /// Straight down, `(0, 0, -1)`.
    pub fn down(frame: Frame) -> Self {
        Self {
            direction: -Vector3::z(),
            frame,
        }
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }
}

/// Rigid transform from the odometry frame to the Earth frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTransform {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
    pub residual_rms: f64,
    pub degenerate: bool,
}

impl AnchorTransform {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            residual_rms: 0.0,
            degenerate: false,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    /// Rotation by `yaw` about +z followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::from_axis_angle(&Vector3::z_axis(), yaw), translation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        apply_transform(self, p)
    }

    /// Rotate a displacement (no translation).
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self {
            rotation: rinv,
            translation: -(rinv * self.translation),
            residual_rms: self.residual_rms,
            degenerate: self.degenerate,
        }
    }

    /// Heading of the rotated local x axis in the horizontal plane.
    pub fn yaw(&self) -> f64 {
        let m = self.rotation.matrix();
        m[(1, 0)].atan2(m[(0, 0)])
    }
}

/// Returns `R·p + t`.
pub fn apply_transform(t: &AnchorTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.rotation * p + t.translation
}

/// Anything with a timestamp in seconds.
pub trait Timestamped {
    fn timestamp(&self) -> f64;
}

impl Timestamped for OdomPose {
    fn timestamp(&self) -> f64 {
        self.timestamp
    }
}

/// Timestamped Earth-fixed position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoStamp {
    pub timestamp: f64,
    pub point: GeoPoint,
}

impl GeoStamp {
    pub fn new(timestamp: f64, point: GeoPoint) -> Self {
        Self { timestamp, point }
    }
}

impl Timestamped for GeoStamp {
    fn timestamp(&self) -> f64 {
        self.timestamp
    }
}

/// Non-empty sequence with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    samples: Vec<T>,
}

pub type OdomTrajectory = Trajectory<OdomPose>;
pub type GeoTrajectory = Trajectory<GeoStamp>;

impl<T: Timestamped> Trajectory<T> {
    pub fn new(samples: Vec<T>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Trajectory("trajectory must contain at least one sample".into()));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].timestamp() > w[0].timestamp()) {
                return Err(Error::Trajectory(format!(
                    "timestamps not strictly increasing at index {}",
                    i + 1
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.samples.iter()
    }

    pub fn first(&self) -> &T {
        &self.samples[0]
    }

    pub fn last(&self) -> &T {
        &self.samples[self.samples.len() - 1]
    }

    pub fn duration(&self) -> f64 {
        self.last().timestamp() - self.first().timestamp()
    }

    /// Index of the sample nearest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let idx = self.samples.partition_point(|s| s.timestamp() < t);
        if idx == 0 {
            0
        } else if idx == self.samples.len() {
            idx - 1
        } else {
            let before = t - self.samples[idx - 1].timestamp();
            let after = self.samples[idx].timestamp() - t;
            if after < before {
                idx
            } else {
                idx - 1
            }
        }
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }
}

impl GeoTrajectory {
    /// Total planar path length.
    pub fn path_length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[0].point.distance(&w[1].point))
            .sum()
    }
}

/// Absolute trajectory error summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub mean: f64,
    pub sd: f64,
    pub per_point: Vec<AtePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtePoint {
    pub timestamp: f64,
    pub error: f64,
}

pub const DEFAULT_ATE_WINDOW: f64 = 0.5;

/// 2D absolute trajectory error with nearest-timestamp association.
///
/// Each estimate is paired with the truth sample closest in time; pairs
/// further apart than `window` seconds are dropped. The standard deviation
/// is the population one.
pub fn ate(estimated: &GeoTrajectory, truth: &GeoTrajectory, window: f64) -> Result<AteReport> {
    if !(window >= 0.0) {
        return Err(Error::param("association window must be non-negative"));
    }
    let per_point: Vec<AtePoint> = estimated
        .iter()
        .filter_map(|e| {
            let g = &truth.samples()[truth.nearest_index(e.timestamp)];
            ((g.timestamp - e.timestamp).abs() <= window).then(|| AtePoint {
                timestamp: e.timestamp,
                error: e.point.distance(&g.point),
            })
        })
        .collect();
    if per_point.is_empty() {
        return Err(Error::NoAssociablePairs);
    }
    let (mean, sd) = mean_sd(per_point.iter().map(|p| p.error));
    Ok(AteReport {
        mean,
        sd,
        per_point,
    })
}

/// Mean and population standard deviation.
pub fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

const ODOM_HEADER: &str = "timestamp,x,y,z,qw,qx,qy,qz";
const GEO_HEADER: &str = "timestamp,easting,northing";

fn parse_row(line: &str, expected: usize, lineno: usize) -> Result<Vec<f64>> {
    let vals = line
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(format!("line {lineno}: {e}")))?;
    if vals.len() != expected {
        return Err(Error::format(format!(
            "line {lineno}: expected {expected} columns, got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn read_rows(reader: impl BufRead, header: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or(Error::Empty("trajectory file"))??;
    if first.trim() != header {
        return Err(Error::format(format!(
            "unexpected header {:?}, expected {header:?}",
            first.trim()
        )));
    }
    let cols = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_row(&line, cols, i + 2)?);
    }
    Ok(rows)
}

pub fn read_geo_trajectory(reader: impl BufRead) -> Result<GeoTrajectory> {
    let rows = read_rows(reader, GEO_HEADER)?;
    Trajectory::new(
        rows.into_iter()
            .map(|r| GeoStamp::new(r[0], GeoPoint::new(r[1], r[2])))
            .collect(),
    )
}

pub fn write_geo_trajectory(mut w: impl Write, traj: &GeoTrajectory) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{GEO_HEADER}").unwrap();
    for s in traj.iter() {
        writeln!(out, "{},{},{}", s.timestamp, s.point.easting, s.point.northing).unwrap();
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_odom_trajectory(reader: impl BufRead) -> Result<OdomTrajectory> {
    let rows = read_rows(reader, ODOM_HEADER)?;
    let mut poses = Vec::with_capacity(rows.len());
    for r in rows {
        let q = nalgebra::Quaternion::new(r[4], r[5], r[6], r[7]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::format(format!(
                "quaternion at t={} is not unit norm",
                r[0]
            )));
        }
        poses.push(OdomPose::new(
            r[0],
            Vector3::new(r[1], r[2], r[3]),
            UnitQuaternion::new_normalize(q),
        ));
    }
    Trajectory::new(poses)
}

pub fn write_odom_trajectory(mut w: impl Write, traj: &OdomTrajectory) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{ODOM_HEADER}").unwrap();
    for p in traj.iter() {
        let q = p.orientation.quaternion();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.timestamp, p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k
        )
        .unwrap();
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn geo_traj(points: &[(f64, f64, f64)]) -> GeoTrajectory {
        Trajectory::new(
            points
                .iter()
                .map(|&(t, e, n)| GeoStamp::new(t, GeoPoint::new(e, n)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_transform_is_noop() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(apply_transform(&AnchorTransform::identity(), &p), p);
    }

    #[test]
    fn quarter_yaw_maps_x_to_y() {
        let t = AnchorTransform::from_yaw(FRAC_PI_2, Vector3::zeros());
        let q = apply_transform(&t, &Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn pure_translation() {
        let t = AnchorTransform::new(Rotation3::identity(), Vector3::new(10.0, -5.0, 0.0));
        let q = apply_transform(&t, &Vector3::new(1.0, 1.0, 0.0));
        assert_eq!(q, Vector3::new(11.0, -4.0, 0.0));
    }

    #[test]
    fn ate_identical_is_zero() {
        let a = geo_traj(&[(0.0, 1.0, 2.0), (1.0, 3.0, 4.0)]);
        let r = ate(&a, &a, DEFAULT_ATE_WINDOW).unwrap();
        assert_eq!((r.mean, r.sd), (0.0, 0.0));
    }

    #[test]
    fn ate_uniform_shift() {
        let truth = geo_traj(&[(0.0, 0.0, 0.0), (1.0, 10.0, 0.0), (2.0, 20.0, 5.0)]);
        let est = geo_traj(&[(0.0, 3.0, 4.0), (1.0, 13.0, 4.0), (2.0, 23.0, 9.0)]);
        let r = ate(&est, &truth, DEFAULT_ATE_WINDOW).unwrap();
        assert!((r.mean - 5.0).abs() < 1e-12);
        assert!(r.sd.abs() < 1e-12);
    }

    #[test]
    fn ate_population_sd() {
        let truth = geo_traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0)]);
        let est = geo_traj(&[(0.0, 0.0, 0.0), (1.0, 3.0, 4.0), (2.0, 6.0, 8.0)]);
        let r = ate(&est, &truth, DEFAULT_ATE_WINDOW).unwrap();
        assert!((r.mean - 5.0).abs() < 1e-12);
        assert!((r.sd - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.sd - 4.0825).abs() < 1e-4);
    }

    #[test]
    fn ate_without_overlap_errors() {
        let truth = geo_traj(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)]);
        let est = geo_traj(&[(10.0, 0.0, 0.0), (11.0, 0.0, 0.0)]);
        assert!(matches!(
            ate(&est, &truth, DEFAULT_ATE_WINDOW),
            Err(Error::NoAssociablePairs)
        ));
    }

    #[test]
    fn ate_pairs_by_nearest_timestamp() {
        let truth = geo_traj(&[(0.0, 0.0, 0.0), (1.0, 10.0, 0.0), (2.0, 20.0, 0.0)]);
        // 1.4 -> truth at t=1; 1.6 -> truth at t=2
        let est = geo_traj(&[(1.4, 10.0, 0.0), (1.6, 20.0, 0.0)]);
        let r = ate(&est, &truth, DEFAULT_ATE_WINDOW).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn trajectory_rejects_bad_timestamps() {
        assert!(Trajectory::<GeoStamp>::new(vec![]).is_err());
        let s = GeoStamp::new(1.0, GeoPoint::default());
        assert!(Trajectory::new(vec![s, s]).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let a = geo_traj(&[(0.0, 1.25, -2.5), (0.5, 3.0, 1e-3)]);
        let mut buf = Vec::new();
        write_geo_trajectory(&mut buf, &a).unwrap();
        assert!(buf.starts_with(b"timestamp,easting,northing\n"));
        let b = read_geo_trajectory(buf.as_slice()).unwrap();
        assert_eq!(a, b);

        let odom = Trajectory::new(vec![OdomPose::new(
            0.0,
            Vector3::new(1.0, 2.0, 3.0),
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
        )])
        .unwrap();
        let mut buf = Vec::new();
        write_odom_trajectory(&mut buf, &odom).unwrap();
        let back = read_odom_trajectory(buf.as_slice()).unwrap();
        assert!((back.first().position - odom.first().position).norm() < 1e-12);
        assert!(back.first().orientation.angle_to(&odom.first().orientation) < 1e-9);
    }

    #[test]
    fn csv_rejects_wrong_header() {
        let err = read_geo_trajectory("t,e,n\n0,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn transform() -> impl Strategy<Value = AnchorTransform> {
            (
                -3.2f64..3.2,
                -3.2f64..3.2,
                -3.2f64..3.2,
                prop::array::uniform3(-1e3f64..1e3),
            )
                .prop_map(|(r, p, y, t)| {
                    AnchorTransform::new(
                        Rotation3::from_euler_angles(r, p, y),
                        Vector3::from_column_slice(&t),
                    )
                })
        }

        fn vec3() -> impl Strategy<Value = Vector3<f64>> {
            prop::array::uniform3(-1e3f64..1e3).prop_map(|a| Vector3::from_column_slice(&a))
        }

        proptest! {
            #[test]
            fn preserves_distances(t in transform(), p in vec3(), q in vec3()) {
                let d0 = (p - q).norm();
                let d1 = (apply_transform(&t, &p) - apply_transform(&t, &q)).norm();
                prop_assert!((d0 - d1).abs() < 1e-9);
            }

            #[test]
            fn inverse_composes_to_identity(t in transform(), p in vec3()) {
                let back = apply_transform(&t, &apply_transform(&t.inverse(), &p));
                prop_assert!((back - p).norm() < 1e-9);
            }

            #[test]
            fn ate_shift_from_zero_error(
                pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..30),
                v in (-100f64..100.0, -100f64..100.0),
            ) {
                let truth: Vec<_> = pts.iter().enumerate()
                    .map(|(i, &(e, n))| (i as f64, e, n)).collect();
                let shifted: Vec<_> = truth.iter().map(|&(t, e, n)| (t, e + v.0, n + v.1)).collect();
                let r = ate(&geo_traj(&shifted), &geo_traj(&truth), DEFAULT_ATE_WINDOW).unwrap();
                prop_assert!((r.mean - v.0.hypot(v.1)).abs() < 1e-9);
            }

            #[test]
            fn ate_shift_bounded(
                pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -50f64..50.0, -50f64..50.0), 1..30),
                v in (-100f64..100.0, -100f64..100.0),
            ) {
                let truth: Vec<_> = pts.iter().enumerate()
                    .map(|(i, p)| (i as f64, p.0, p.1)).collect();
                let est: Vec<_> = pts.iter().enumerate()
                    .map(|(i, p)| (i as f64, p.0 + p.2, p.1 + p.3)).collect();
                let moved: Vec<_> = est.iter().map(|&(t, e, n)| (t, e + v.0, n + v.1)).collect();
                let before = ate(&geo_traj(&est), &geo_traj(&truth), DEFAULT_ATE_WINDOW).unwrap();
                let after = ate(&geo_traj(&moved), &geo_traj(&truth), DEFAULT_ATE_WINDOW).unwrap();
                prop_assert!(after.mean <= before.mean + v.0.hypot(v.1) + 1e-9);
            }
        }
    }
}
