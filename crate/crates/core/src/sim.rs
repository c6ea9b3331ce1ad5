//! Flight patterns, the drifting odometry model that stands in for VIO, and
//! the keyframe schedule.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{mix, LocalFeatureSet};
use crate::geo::{Frame, GeoPoint, GeoStamp, GeoTrajectory, GravityVector, OdomPose, OdomTrajectory};

pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_KEYFRAME_RATE: f64 = 1.0;

const RECT_ASPECT: f64 = 1.5;
const RECT_CORNER: f64 = 20.0;
const LAWNMOWER_SPACING: f64 = 40.0;
const ARC_SEGMENTS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Two tangent circles flown in opposite senses.
    Eight,
    /// Rounded rectangle, 3:2 aspect.
    Rectangle,
    /// Back-and-forth rows 40 m apart.
    Lawnmower,
    /// Closed polygon through `waypoints`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub pattern: Pattern,
    /// Length of one loop, meters. Ignored for `Custom`.
    pub length: f64,
    pub speed: f64,
    pub altitude: f64,
    pub loops: u32,
    /// Offsets from the pattern origin, meters. Only for `Custom`.
    pub waypoints: Vec<[f64; 2]>,
    /// Pattern center in the world; the grid center when absent. The
    /// default sits off the tile lattice so that 1 Hz keyframes at 10 m/s do
    /// not land exactly on cell boundaries.
    pub center: Option<[f64; 2]>,
    /// Where along the loop the flight starts, as a fraction in [0, 1).
    pub start_phase: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::Rectangle,
            length: 1000.0,
            speed: 10.0,
            altitude: 120.0,
            loops: 1,
            waypoints: Vec::new(),
            center: Some([207.0, 171.0]),
            start_phase: 0.0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::param("speed must be positive"));
        }
        if !(self.altitude > 0.0 && self.altitude.is_finite()) {
            return Err(Error::param("altitude must be positive"));
        }
        if self.loops == 0 {
            return Err(Error::param("loops must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.start_phase) {
            return Err(Error::param("start_phase must lie in [0, 1)"));
        }
        if self.pattern != Pattern::Custom && !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::Trajectory("pattern length must be positive".into()));
        }
        Ok(())
    }

    fn closed(&self) -> bool {
        self.pattern != Pattern::Lawnmower
    }
}

fn arc(out: &mut Vec<Vector2<f64>>, c: Vector2<f64>, r: f64, from: f64, to: f64) {
    for k in 1..=ARC_SEGMENTS {
        let a = from + (to - from) * k as f64 / ARC_SEGMENTS as f64;
        out.push(c + Vector2::new(a.cos(), a.sin()) * r);
    }
}

fn polyline_length(pts: &[Vector2<f64>]) -> f64 {
    pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Vertices of one loop centered on the origin, with total length exactly
/// `spec.length` (or the waypoint perimeter for `Custom`).
pub fn pattern_polyline(spec: &TrajectorySpec) -> Result<Vec<Vector2<f64>>> {
    spec.validate()?;
    let l = spec.length;
    let mut pts = Vec::new();
    match spec.pattern {
        Pattern::Rectangle => {
            let r = RECT_CORNER.min(l / 20.0);
            let h = (l + (8.0 - TAU) * r) / (2.0 * (1.0 + RECT_ASPECT));
            let (a, b) = (RECT_ASPECT * h / 2.0, h / 2.0);
            pts.push(Vector2::new(0.0, -b));
            pts.push(Vector2::new(a - r, -b));
            arc(&mut pts, Vector2::new(a - r, -b + r), r, -PI / 2.0, 0.0);
            pts.push(Vector2::new(a, b - r));
            arc(&mut pts, Vector2::new(a - r, b - r), r, 0.0, PI / 2.0);
            pts.push(Vector2::new(-a + r, b));
            arc(&mut pts, Vector2::new(-a + r, b - r), r, PI / 2.0, PI);
            pts.push(Vector2::new(-a, -b + r));
            arc(&mut pts, Vector2::new(-a + r, -b + r), r, PI, 1.5 * PI);
            pts.push(Vector2::new(0.0, -b));
        }
        Pattern::Eight => {
            let rho = l / (2.0 * TAU);
            pts.push(Vector2::zeros());
            let segs = 2 * ARC_SEGMENTS;
            for k in 1..=segs {
                let a = PI + TAU * k as f64 / segs as f64;
                pts.push(Vector2::new(rho, 0.0) + Vector2::new(a.cos(), a.sin()) * rho);
            }
            for k in 1..=segs {
                let a = -TAU * k as f64 / segs as f64;
                pts.push(Vector2::new(-rho, 0.0) + Vector2::new(a.cos(), a.sin()) * rho);
            }
        }
        Pattern::Lawnmower => {
            let n = (((l + LAWNMOWER_SPACING) / (300.0 + LAWNMOWER_SPACING)).round() as usize).max(2);
            let w = (l - LAWNMOWER_SPACING * (n - 1) as f64) / n as f64;
            if !(w > 0.0) {
                return Err(Error::Trajectory("lawnmower length too short for its rows".into()));
            }
            let y0 = -LAWNMOWER_SPACING * (n - 1) as f64 / 2.0;
            for row in 0..n {
                let y = y0 + LAWNMOWER_SPACING * row as f64;
                let (x_from, x_to) = if row % 2 == 0 { (-w / 2.0, w / 2.0) } else { (w / 2.0, -w / 2.0) };
                pts.push(Vector2::new(x_from, y));
                pts.push(Vector2::new(x_to, y));
            }
            return Ok(pts);
        }
        Pattern::Custom => {
            if spec.waypoints.len() < 2 {
                return Err(Error::Trajectory("custom pattern needs at least 2 waypoints".into()));
            }
            if spec.waypoints.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Trajectory("waypoints must be finite".into()));
            }
            pts.extend(spec.waypoints.iter().map(|w| Vector2::new(w[0], w[1])));
            pts.push(pts[0]);
            if polyline_length(&pts) <= 0.0 {
                return Err(Error::Trajectory("zero-length pattern".into()));
            }
            return Ok(pts);
        }
    }
    let scale = l / polyline_length(&pts);
    Ok(pts.into_iter().map(|p| p * scale).collect())
}

struct Walker {
    pts: Vec<Vector2<f64>>,
    cum: Vec<f64>,
}

impl Walker {
    fn new(pts: Vec<Vector2<f64>>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and unit direction at arc length `s`.
    fn at(&self, s: f64) -> (Vector2<f64>, Vector2<f64>) {
        let s = s.clamp(0.0, self.length());
        let mut i = self.cum.partition_point(|&c| c <= s).saturating_sub(1);
        i = i.min(self.pts.len() - 2);
        // skip zero-length segments
        while self.cum[i + 1] - self.cum[i] <= 0.0 && i + 2 < self.pts.len() {
            i += 1;
        }
        let seg = self.pts[i + 1] - self.pts[i];
        let len = seg.norm();
        let f = if len > 0.0 { (s - self.cum[i]) / len } else { 0.0 };
        (self.pts[i] + seg * f, if len > 0.0 { seg / len } else { Vector2::x() })
    }
}

fn yaw_quaternion(dir: &Vector2<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), dir.y.atan2(dir.x))
}

/// Ground-truth flight sampled every `dt` seconds at constant speed.
///
/// Poses are in the world frame: position is (easting, northing, altitude)
/// and orientation is the yaw along the direction of travel.
pub fn generate_truth(spec: &TrajectorySpec, world_origin: GeoPoint, dt: f64) -> Result<OdomTrajectory> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt must be positive"));
    }
    let walker = Walker::new(pattern_polyline(spec)?);
    let loop_len = walker.length();
    if !(loop_len > 0.0) {
        return Err(Error::Trajectory("zero-length pattern".into()));
    }
    let total = loop_len * spec.loops as f64;
    let duration = total / spec.speed;
    let n = (duration / dt + 1e-9).floor() as usize + 1;
    let origin = world_origin.to_vector();
    let offset = spec.start_phase * loop_len;
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            let s = (t * spec.speed).min(total) + offset;
            let lap = ((s / loop_len).floor() as u64).min(spec.loops as u64 + 1);
            let mut u = s - lap as f64 * loop_len;
            if u >= loop_len {
                u = loop_len;
            }
            let (p, mut d) = if !spec.closed() && lap % 2 == 1 {
                let (p, d) = walker.at(loop_len - u);
                (p, -d)
            } else {
                walker.at(u)
            };
            if d.norm() == 0.0 {
                d = Vector2::x();
            }
            let p = p + origin;
            OdomPose::new(t, Vector3::new(p.x, p.y, spec.altitude), yaw_quaternion(&d))
        })
        .collect();
    OdomTrajectory::new(samples)
}

/// Horizontal projection of a world-frame pose trajectory.
pub fn to_geo(traj: &OdomTrajectory) -> GeoTrajectory {
    let samples = traj
        .iter()
        .map(|p| GeoStamp::new(p.timestamp, GeoPoint::new(p.position.x, p.position.y)))
        .collect();
    GeoTrajectory::new(samples).expect("timestamps already validated")
}

/// Parametric stand-in for VIO drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftModel {
    /// Extra rotation of the odometry frame beyond the initial body
    /// heading, rad.
    pub heading_bias: f64,
    /// rad/√m.
    pub heading_random_walk: f64,
    /// Multiplier on travelled distance.
    pub scale_error: f64,
    /// m/√m, per horizontal axis.
    pub position_noise: f64,
    /// Angular noise of the odometry gravity estimate, rad.
    pub gravity_noise: f64,
    pub seed: u64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            heading_bias: 0.6,
            heading_random_walk: 0.002,
            scale_error: 1.03,
            position_noise: 0.05,
            gravity_noise: 1e-3,
            seed: 0,
        }
    }
}

impl DriftModel {
    /// No drift at all; odometry is the truth expressed in the start frame.
    pub fn none() -> Self {
        Self {
            heading_bias: 0.0,
            heading_random_walk: 0.0,
            scale_error: 1.0,
            position_noise: 0.0,
            gravity_noise: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_error > 0.0 && self.scale_error.is_finite()) {
            return Err(Error::param("scale_error must be positive"));
        }
        if !(self.heading_random_walk >= 0.0 && self.position_noise >= 0.0 && self.gravity_noise >= 0.0) {
            return Err(Error::param("drift noise levels must be non-negative"));
        }
        if !self.heading_bias.is_finite() {
            return Err(Error::param("heading_bias must be finite"));
        }
        Ok(())
    }

    /// Odometry-frame gravity estimate for keyframe `index`.
    pub fn gravity_estimate(&self, index: u64) -> GravityVector {
        if self.gravity_noise == 0.0 {
            return GravityVector::down(Frame::Local);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, 0x6EA7, index]));
        let axis_angle = rng.random_range(0.0..TAU);
        let tilt = self.gravity_noise * rng.sample::<f64, _>(StandardNormal);
        let axis = Vector3::new(axis_angle.cos(), axis_angle.sin(), 0.0);
        let r = nalgebra::Rotation3::new(axis * tilt);
        GravityVector::new(r * -Vector3::z(), Frame::Local).expect("unit vector")
    }
}

/// Express `truth` in a drifting odometry frame.
///
/// The frame starts at the first truth sample with x along the initial
/// direction of travel rotated by `heading_bias`. Each step's displacement
/// is rotated by the current heading error (which random-walks with
/// variance `heading_random_walk²·d`), scaled by `scale_error`, and
/// perturbed by Gaussian noise of variance `position_noise²·d`.
pub fn corrupt_odometry(truth: &OdomTrajectory, model: &DriftModel) -> Result<OdomTrajectory> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[model.seed, 0x0D0E]));
    let first = truth.first();
    let yaw0 = first.orientation.euler_angles().2;
    let mut heading = yaw0 + model.heading_bias;
    let mut local = Vector3::zeros();
    let mut out = Vec::with_capacity(truth.len());
    let z0 = first.position.z;
    let local_pose = |t: f64, p: Vector3<f64>, q: &UnitQuaternion<f64>, heading: f64| {
        let yaw = q.euler_angles().2 - heading;
        OdomPose::new(t, p, UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw))
    };
    out.push(local_pose(first.timestamp, local, &first.orientation, heading));
    for w in truth.samples().windows(2) {
        let d = (w[1].position - w[0].position).xy();
        let dist = d.norm();
        if dist > 0.0 {
            heading += model.heading_random_walk * dist.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        let mut step = Rotation2::new(-heading) * d * model.scale_error;
        if dist > 0.0 && model.position_noise > 0.0 {
            let s = model.position_noise * dist.sqrt();
            step += Vector2::new(
                s * rng.sample::<f64, _>(StandardNormal),
                s * rng.sample::<f64, _>(StandardNormal),
            );
        }
        local.x += step.x;
        local.y += step.y;
        local.z = w[1].position.z - z0;
        out.push(local_pose(w[1].timestamp, local, &w[1].orientation, heading));
    }
    OdomTrajectory::new(out)
}

/// One keyframe handed to place recognition.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeEvent {
    pub index: usize,
    pub sample: usize,
    pub timestamp: f64,
    pub true_position: GeoPoint,
    pub odom_position: Vector3<f64>,
    pub gravity: GravityVector,
    /// Camera-style features; filled by the place-recognition stage.
    pub features: Option<LocalFeatureSet>,
}

/// Sample indices of keyframes at `rate` Hz for a trajectory sampled every
/// `dt` seconds, starting with the first sample.
pub fn keyframe_samples(n_samples: usize, dt: f64, rate: f64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && dt > 0.0) {
        return Err(Error::param("keyframe rate and dt must be positive"));
    }
    if rate * dt > 1.0 + 1e-9 {
        return Err(Error::param("keyframe rate exceeds the sampling rate"));
    }
    let step = ((1.0 / (rate * dt)).round() as usize).max(1);
    Ok((0..n_samples).step_by(step).collect())
}

pub fn keyframes(
    truth: &OdomTrajectory,
    odom: &OdomTrajectory,
    model: &DriftModel,
    dt: f64,
    rate: f64,
) -> Result<Vec<KeyframeEvent>> {
    if truth.len() != odom.len() {
        return Err(Error::Trajectory("truth and odometry lengths differ".into()));
    }
    Ok(keyframe_samples(truth.len(), dt, rate)?
        .into_iter()
        .enumerate()
        .map(|(index, sample)| {
            let t = &truth.samples()[sample];
            KeyframeEvent {
                index,
                sample,
                timestamp: t.timestamp,
                true_position: GeoPoint::new(t.position.x, t.position.y),
                odom_position: odom.samples()[sample].position,
                gravity: model.gravity_estimate(index as u64),
                features: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pattern: Pattern, length: f64) -> TrajectorySpec {
        TrajectorySpec {
            pattern,
            length,
            ..Default::default()
        }
    }

    #[test]
    fn reference_pattern_durations() {
        let rect = generate_truth(&spec(Pattern::Rectangle, 1000.0), GeoPoint::new(0.0, 0.0), 0.1).unwrap();
        assert!((rect.last().timestamp - 100.0).abs() < 1e-6);
        let eight = generate_truth(&spec(Pattern::Eight, 880.0), GeoPoint::new(0.0, 0.0), 0.1).unwrap();
        assert!((eight.last().timestamp - 88.0).abs() < 1e-6);
        for t in [&rect, &eight] {
            let len = to_geo(t).path_length();
            let target = if t.len() == rect.len() { 1000.0 } else { 880.0 };
            assert!((len - target).abs() / target < 0.01, "{len}");
        }
    }

    #[test]
    fn polylines_have_exact_length() {
        for (p, l) in [(Pattern::Rectangle, 1000.0), (Pattern::Eight, 880.0), (Pattern::Lawnmower, 1500.0)] {
            let pts = pattern_polyline(&spec(p, l)).unwrap();
            assert!((polyline_length(&pts) - l).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn custom_square() {
        let s = TrajectorySpec {
            pattern: Pattern::Custom,
            waypoints: vec![[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0]],
            ..Default::default()
        };
        let t = generate_truth(&s, GeoPoint::new(10.0, 20.0), 0.05).unwrap();
        assert!((to_geo(&t).path_length() - 400.0).abs() < 1e-6);
        assert_eq!(t.first().position.xy(), Vector2::new(10.0, 20.0));
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_truth(&spec(Pattern::Rectangle, 0.0), GeoPoint::default(), 0.1).is_err());
        assert!(generate_truth(&spec(Pattern::Rectangle, 100.0), GeoPoint::default(), 0.0).is_err());
        let s = TrajectorySpec {
            speed: 0.0,
            ..Default::default()
        };
        assert!(generate_truth(&s, GeoPoint::default(), 0.1).is_err());
        let c = TrajectorySpec {
            pattern: Pattern::Custom,
            waypoints: vec![[1.0, 1.0], [1.0, 1.0]],
            ..Default::default()
        };
        assert!(generate_truth(&c, GeoPoint::default(), 0.1).is_err());
    }

    #[test]
    fn constant_speed_and_altitude() {
        let t = generate_truth(&spec(Pattern::Eight, 880.0), GeoPoint::new(200.0, 175.0), 0.1).unwrap();
        for w in t.samples().windows(2) {
            let step = (w[1].position - w[0].position).norm();
            assert!(step <= 1.0 + 1e-9 && step > 0.95, "{step}");
            assert_eq!(w[1].position.z, 120.0);
        }
    }

    #[test]
    fn start_phase_shifts_start() {
        let mut s = spec(Pattern::Rectangle, 1000.0);
        let a = generate_truth(&s, GeoPoint::default(), 0.1).unwrap();
        s.start_phase = 0.25;
        let b = generate_truth(&s, GeoPoint::default(), 0.1).unwrap();
        assert!((b.first().position - a.samples()[250].position).norm() < 1e-6);
    }

    fn straight(len: f64) -> OdomTrajectory {
        let s = TrajectorySpec {
            pattern: Pattern::Custom,
            waypoints: vec![[0.0, 0.0], [len, 0.0]],
            ..Default::default()
        };
        let t = generate_truth(&s, GeoPoint::new(500.0, 300.0), 0.1).unwrap();
        // first leg only
        OdomTrajectory::new(t.samples()[..=(len / 1.0) as usize].to_vec()).unwrap()
    }

    #[test]
    fn zero_drift_is_the_start_frame() {
        let truth = generate_truth(&spec(Pattern::Rectangle, 1000.0), GeoPoint::new(200.0, 175.0), 0.1).unwrap();
        let odom = corrupt_odometry(&truth, &DriftModel::none()).unwrap();
        assert_eq!(odom.first().position, Vector3::zeros());
        // initial travel is along +x and distances are preserved
        assert!(odom.samples()[10].position.y.abs() < 1e-9);
        assert!(odom.samples()[10].position.x > 0.0);
        let p0 = truth.first().position;
        for (t, o) in truth.iter().zip(odom.iter()).step_by(97) {
            assert!(((t.position - p0).norm() - o.position.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_error_stretches_legs() {
        let truth = straight(100.0);
        let model = DriftModel {
            scale_error: 1.05,
            ..DriftModel::none()
        };
        let odom = corrupt_odometry(&truth, &model).unwrap();
        assert!((odom.last().position.norm() - 105.0).abs() < 1e-9);
    }

    #[test]
    fn heading_bias_rotates_frame() {
        let truth = straight(100.0);
        let model = DriftModel {
            heading_bias: 0.5,
            ..DriftModel::none()
        };
        let odom = corrupt_odometry(&truth, &model).unwrap();
        let end = odom.last().position;
        assert!((end.y.atan2(end.x) + 0.5).abs() < 1e-9);
    }

    #[test]
    fn drift_is_seeded() {
        let truth = straight(100.0);
        let m = DriftModel {
            seed: 3,
            ..Default::default()
        };
        assert_eq!(corrupt_odometry(&truth, &m).unwrap(), corrupt_odometry(&truth, &m).unwrap());
        let other = DriftModel { seed: 4, ..m };
        assert_ne!(corrupt_odometry(&truth, &m).unwrap(), corrupt_odometry(&truth, &other).unwrap());
        assert!(corrupt_odometry(&truth, &DriftModel { scale_error: 0.0, ..m }).is_err());
    }

    #[test]
    fn gravity_estimate_is_close_to_down() {
        let m = DriftModel::default();
        for i in 0..20 {
            let g = m.gravity_estimate(i);
            assert!(g.direction().angle(&-Vector3::z()) < 10.0 * m.gravity_noise);
        }
        assert_eq!(DriftModel::none().gravity_estimate(5).direction(), &-Vector3::z());
    }

    #[test]
    fn keyframe_schedule() {
        assert_eq!(keyframe_samples(25, 0.1, 1.0).unwrap(), vec![0, 10, 20]);
        assert!(keyframe_samples(25, 0.1, 20.0).is_err());
        let truth = straight(30.0);
        let odom = corrupt_odometry(&truth, &DriftModel::none()).unwrap();
        let kfs = keyframes(&truth, &odom, &DriftModel::none(), 0.1, 1.0).unwrap();
        assert_eq!(kfs.len(), 4);
        assert!((kfs[2].timestamp - 2.0).abs() < 1e-12);
        assert!((kfs[2].odom_position.x - 20.0).abs() < 1e-9);
    }
}
