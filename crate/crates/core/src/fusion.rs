//! Two-dimensional position filter fusing anchored odometry increments with
//! the anchored-position memory and the instant VPR observation.
//!
//! The state is the Earth-frame position only. Heading lives in the anchor
//! transform. Both corrections use `H = I` and a Joseph-form covariance
//! update, and are gated on the squared Mahalanobis distance of the
//! innovation.

use std::io::{BufRead, Write};

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// χ²₂ 99% quantile.
pub const DEFAULT_GATE: f64 = 9.21;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// m² of position variance added per meter travelled.
    pub process_noise_per_meter: f64,
    pub memory_obs_variance: f64,
    pub instant_obs_variance: f64,
    pub gate_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            process_noise_per_meter: 0.05,
            memory_obs_variance: 20.0 * 20.0 / 3.0,
            instant_obs_variance: 30.0 * 30.0,
            gate_threshold: DEFAULT_GATE,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.process_noise_per_meter)
            && ok(self.memory_obs_variance)
            && ok(self.instant_obs_variance)
            && ok(self.gate_threshold))
        {
            return Err(Error::param("fusion parameters must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Correction {
    Memory,
    Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateOutcome {
    pub accepted: bool,
    /// Squared Mahalanobis distance of the innovation.
    pub nis: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub position: GeoPoint,
    pub covariance: Matrix2<f64>,
    pub initialized: bool,
    pub last_timestamp: f64,
    pub rejected_memory: usize,
    pub rejected_instant: usize,
}

impl Default for FilterState {
    fn default() -> Self {
        Self::new()
    }
}

impl FilterState {
    pub fn new() -> Self {
        Self {
            position: GeoPoint::new(0.0, 0.0),
            covariance: Matrix2::zeros(),
            initialized: false,
            last_timestamp: f64::NEG_INFINITY,
            rejected_memory: 0,
            rejected_instant: 0,
        }
    }

    pub fn initialize(&mut self, first_anchor: GeoPoint, cfg: &FusionConfig) -> Result<()> {
        if self.initialized {
            return Err(Error::AlreadyInitialized);
        }
        self.reset(first_anchor, cfg)
    }

    /// Re-seed at `anchor` regardless of the current state; rejection
    /// counters are kept.
    pub fn reset(&mut self, anchor: GeoPoint, cfg: &FusionConfig) -> Result<()> {
        if !anchor.is_finite() {
            return Err(Error::param("anchor must be finite"));
        }
        self.position = anchor;
        self.covariance = Matrix2::identity() * cfg.memory_obs_variance;
        self.initialized = true;
        Ok(())
    }

    pub fn predict(&mut self, delta: Vector2<f64>, cfg: &FusionConfig) -> Result<()> {
        if !self.initialized {
            return Err(Error::NotInitialized);
        }
        self.position = GeoPoint::from_vector(&(self.position.to_vector() + delta));
        self.covariance += Matrix2::identity() * (cfg.process_noise_per_meter * delta.norm());
        Ok(())
    }

    pub fn update_memory(&mut self, anchored: GeoPoint, cfg: &FusionConfig) -> Result<UpdateOutcome> {
        self.update(anchored, cfg.memory_obs_variance, cfg.gate_threshold, Correction::Memory)
    }

    pub fn update_instant(&mut self, vpr_obs: GeoPoint, cfg: &FusionConfig) -> Result<UpdateOutcome> {
        self.update(vpr_obs, cfg.instant_obs_variance, cfg.gate_threshold, Correction::Instant)
    }

    /// Squared Mahalanobis distance of `z` against the predicted
    /// measurement with noise `variance·I`.
    pub fn nis(&self, z: &GeoPoint, variance: f64) -> Result<f64> {
        if !self.initialized {
            return Err(Error::NotInitialized);
        }
        let s = self.covariance + Matrix2::identity() * variance;
        let v = z.to_vector() - self.position.to_vector();
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::param("singular innovation covariance"))?;
        Ok((v.transpose() * s_inv * v)[(0, 0)])
    }

    fn update(&mut self, z: GeoPoint, variance: f64, gate: f64, kind: Correction) -> Result<UpdateOutcome> {
        if !z.is_finite() {
            return Err(Error::param("observation must be finite"));
        }
        let nis = self.nis(&z, variance)?;
        if !(nis <= gate) {
            match kind {
                Correction::Memory => self.rejected_memory += 1,
                Correction::Instant => self.rejected_instant += 1,
            }
            return Ok(UpdateOutcome { accepted: false, nis });
        }
        let r = Matrix2::identity() * variance;
        let p = self.covariance;
        let s_inv = (p + r).try_inverse().expect("checked in nis");
        let k = p * s_inv;
        let v = z.to_vector() - self.position.to_vector();
        self.position = GeoPoint::from_vector(&(self.position.to_vector() + k * v));
        let a = Matrix2::identity() - k;
        let joseph = a * p * a.transpose() + k * r * k.transpose();
        self.covariance = (joseph + joseph.transpose()) * 0.5;
        Ok(UpdateOutcome { accepted: true, nis })
    }

    pub fn is_symmetric_pd(&self) -> bool {
        let p = &self.covariance;
        (p[(0, 1)] - p[(1, 0)]).abs() <= 1e-12 * p.norm().max(1.0)
            && p[(0, 0)] > 0.0
            && p.determinant() > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub timestamp: f64,
    pub easting: f64,
    pub northing: f64,
    pub var_e: f64,
    pub var_n: f64,
}

impl EstimateRecord {
    pub fn from_state(timestamp: f64, state: &FilterState) -> Self {
        Self {
            timestamp,
            easting: state.position.easting,
            northing: state.position.northing,
            var_e: state.covariance[(0, 0)],
            var_n: state.covariance[(1, 1)],
        }
    }

    pub fn position(&self) -> GeoPoint {
        GeoPoint::new(self.easting, self.northing)
    }
}

pub const ESTIMATE_HEADER: &str = "timestamp,easting,northing,var_e,var_n";

pub fn write_estimates(mut w: impl Write, records: &[EstimateRecord]) -> Result<()> {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(ESTIMATE_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.timestamp, r.easting, r.northing, r.var_e, r.var_n
        ));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_estimates(reader: impl BufRead) -> Result<Vec<EstimateRecord>> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty estimate file"))??;
    if header.trim() != ESTIMATE_HEADER {
        return Err(Error::format(format!("unexpected estimate header {header:?}")));
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
            return Err(Error::format(format!("line {}: expected 5 fields", i + 2)));
        }
        out.push(EstimateRecord {
            timestamp: v[0],
            easting: v[1],
            northing: v[2],
            var_e: v[3],
            var_n: v[4],
        });
    }
    Ok(out)
}
