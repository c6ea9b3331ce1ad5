//! Closed-loop localization: keyframes flow through place recognition,
//! false-positive filtering, map alignment and the fusion filter.
//!
//! Place recognition runs on a worker thread and hands results to the
//! alignment/fusion stage over a bounded channel. The channel blocks rather
//! than dropping, and every random draw is seeded per keyframe, so the
//! output does not depend on thread timing.

use std::sync::mpsc;
use std::thread;

use nalgebra::Vector2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    align_gravity, align_gravity_weighted, AlignmentLogEntry, AnchorTrigger, CorrespondenceWindow,
    DEFAULT_WINDOW_CAPACITY,
};
use crate::dbscan::{filter_matches, unfiltered_observation, DEFAULT_EPS_SPACING_FACTOR, DEFAULT_MIN_PTS};
use crate::error::{Error, Result};
use crate::features::{mix, synth_features, ImageStyle, SyntheticWorld};
use crate::fusion::{EstimateRecord, FilterState, FusionConfig};
use crate::geo::{ate, AnchorTransform, AteReport, Frame, GeoPoint, GeoStamp, GeoTrajectory, GravityVector, OdomTrajectory};
use crate::metrics::{summarize, EvalRecord, VprSummary};
use crate::retrieval::{query_topk_named, DescriptorDb, RetrievalResult, DEFAULT_TOP_K};
use crate::sim::{corrupt_odometry, generate_truth, keyframes, to_geo, DriftModel, KeyframeEvent, TrajectorySpec};
use crate::tiles::{ground_truth_neighbors, TileGrid};
use crate::vlad::{encode, Vocabulary};

/// Where instant observations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationSource {
    Retrieval,
    /// Exact true positions, bypassing retrieval. For testing the
    /// alignment and fusion stages in isolation.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VprConfig {
    pub top_k: usize,
    /// DBSCAN radius, meters; `eps_factor × spacing` when absent.
    pub eps: Option<f64>,
    pub eps_factor: f64,
    pub min_pts: usize,
    /// Off reproduces the unfiltered configuration: the observation is the
    /// centroid of all top-K positions.
    pub filtering: bool,
    /// Per-match probability of replacement by an aliasing tile.
    pub fp_rate: f64,
    /// Std-dev of Gaussian noise on camera features.
    pub query_noise: f64,
    pub n_c: usize,
    pub vocab_seed: u64,
    pub vocab_max_iters: usize,
    /// Keep every `vocab_subsample`-th feature row for vocabulary training.
    pub vocab_subsample: usize,
    pub observations: ObservationSource,
}

impl Default for VprConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            eps: None,
            eps_factor: DEFAULT_EPS_SPACING_FACTOR,
            min_pts: DEFAULT_MIN_PTS,
            filtering: true,
            fp_rate: 0.04,
            query_noise: 0.2,
            n_c: crate::vlad::DEFAULT_N_C,
            vocab_seed: 1,
            vocab_max_iters: crate::vlad::DEFAULT_MAX_ITERS,
            vocab_subsample: 4,
            observations: ObservationSource::Retrieval,
        }
    }
}

impl VprConfig {
    pub fn eps_for(&self, grid: &TileGrid) -> f64 {
        self.eps.unwrap_or(self.eps_factor * grid.spacing())
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::param("top_k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.fp_rate) {
            return Err(Error::param("fp_rate must lie in [0, 1]"));
        }
        if !(self.query_noise >= 0.0) {
            return Err(Error::param("query_noise must be non-negative"));
        }
        if self.vocab_subsample == 0 {
            return Err(Error::param("vocab_subsample must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub window: usize,
    pub min_pairs: usize,
    pub min_extent: f64,
    /// Use the soft-constraint solver with this gravity weight.
    pub gravity_weight: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW_CAPACITY,
            min_pairs: crate::align::DEFAULT_MIN_PAIRS,
            min_extent: crate::align::DEFAULT_MIN_EXTENT,
            gravity_weight: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub keyframe_rate: f64,
    /// Consecutive gated memory corrections after which the filter is
    /// re-seeded at the anchored position.
    pub reset_after: usize,
    pub channel_capacity: usize,
    /// Association window for ATE, seconds.
    pub ate_window: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: crate::sim::DEFAULT_DT,
            keyframe_rate: crate::sim::DEFAULT_KEYFRAME_RATE,
            reset_after: 5,
            channel_capacity: 8,
            ate_window: crate::geo::DEFAULT_ATE_WINDOW,
        }
    }
}

/// Static inputs of a pipeline run.
pub struct PipelineInputs<'a> {
    pub spec: &'a TrajectorySpec,
    pub world: &'a SyntheticWorld,
    pub grid: &'a TileGrid,
    pub vocab: &'a Vocabulary,
    pub db: &'a DescriptorDb,
    pub drift: &'a DriftModel,
    pub fusion: &'a FusionConfig,
    pub vpr: &'a VprConfig,
    pub align: &'a AlignConfig,
    pub sim: &'a SimConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub keyframes: usize,
    pub observations: usize,
    pub fp_injected: usize,
    pub all_noise: usize,
    pub recall: Option<VprSummary>,
    /// Mean distance between instant observations and the truth.
    pub observation_error_mean: Option<f64>,
    pub anchors: usize,
    pub anchor_failures: usize,
    pub initialized_at: Option<f64>,
    pub initialized_keyframe: Option<usize>,
    pub memory_accepted: usize,
    pub memory_rejected: usize,
    pub instant_accepted: usize,
    pub instant_rejected: usize,
    pub resets: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub estimates: Vec<EstimateRecord>,
    pub truth: GeoTrajectory,
    pub odometry: OdomTrajectory,
    /// `None` when the filter never initialized.
    pub ate: Option<AteReport>,
    pub diagnostics: Diagnostics,
    pub alignment_log: Vec<AlignmentLogEntry>,
    pub eval_records: Vec<EvalRecord>,
    pub final_anchor: Option<AnchorTransform>,
}

impl PipelineOutput {
    pub fn estimate_trajectory(&self) -> Result<GeoTrajectory> {
        GeoTrajectory::new(
            self.estimates
                .iter()
                .map(|e| GeoStamp::new(e.timestamp, e.position()))
                .collect(),
        )
    }
}

/// What place recognition hands to the alignment stage for one keyframe.
#[derive(Debug, Clone)]
struct VprEvent {
    index: usize,
    observation: Option<GeoPoint>,
    eval: Option<EvalRecord>,
    fp_injected: usize,
    all_noise: bool,
}

fn aliasing_pool(world: &SyntheticWorld, db: &DescriptorDb) -> Vec<usize> {
    let zoned: Vec<usize> = (0..db.len())
        .filter(|&i| world.in_repetition_zone(&db.entries()[i].position))
        .collect();
    if zoned.is_empty() {
        (0..db.len()).collect()
    } else {
        zoned
    }
}

/// Replace each match, with probability `rate`, by a tile drawn from
/// `pool` that is not already in the list. Ranks and similarities keep
/// their slots.
fn inject_false_positives(
    result: &mut RetrievalResult,
    db: &DescriptorDb,
    pool: &[usize],
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let mut injected = 0;
    for slot in 0..result.matches.len() {
        if !(rng.random::<f64>() < rate) {
            continue;
        }
        let taken = result.tile_ids();
        let free: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| !taken.contains(&db.entries()[i].tile_id))
            .collect();
        if let Some(&i) = free.choose(rng) {
            let e = &db.entries()[i];
            result.matches[slot].tile_id = e.tile_id;
            result.matches[slot].position = e.position;
            injected += 1;
        }
    }
    injected
}

fn place_recognition(inp: &PipelineInputs<'_>, kf: &KeyframeEvent, pool: &[usize]) -> Result<VprEvent> {
    let vpr = inp.vpr;
    if vpr.observations == ObservationSource::Truth {
        return Ok(VprEvent {
            index: kf.index,
            observation: Some(kf.true_position),
            eval: None,
            fp_injected: 0,
            all_noise: false,
        });
    }
    let seed = inp.drift.seed;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x9E7, kf.index as u64]));
    let features = synth_features(
        inp.world,
        &kf.true_position,
        inp.grid.fov(),
        ImageStyle::Camera,
        vpr.query_noise,
        &mut noise_rng,
    )?;
    let q = encode(&features, inp.vocab)?;
    let mut result = query_topk_named(inp.db, &q, vpr.top_k, format!("kf{}", kf.index))?;
    let mut fp_rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0xF9, kf.index as u64]));
    let fp_injected = inject_false_positives(&mut result, inp.db, pool, vpr.fp_rate, &mut fp_rng);

    let gt = ground_truth_neighbors(inp.grid, &kf.true_position, vpr.top_k)?;
    let mut eval = EvalRecord::new(result.query_id.clone(), result.tile_ids(), gt);
    eval.retrieved_distances = result
        .matches
        .iter()
        .map(|m| m.position.distance(&kf.true_position))
        .collect();

    let (observation, all_noise) = if vpr.filtering {
        let f = filter_matches(&result, vpr.eps_for(inp.grid), vpr.min_pts)?;
        (f.observation, f.observation.is_none())
    } else {
        (unfiltered_observation(&result), false)
    };
    Ok(VprEvent {
        index: kf.index,
        observation,
        eval: Some(eval),
        fp_injected,
        all_noise,
    })
}

/// Run the full loop over one simulated flight.
pub fn run_pipeline(inp: &PipelineInputs<'_>) -> Result<PipelineOutput> {
    inp.spec.validate()?;
    inp.vpr.validate()?;
    inp.fusion.validate()?;
    inp.drift.validate()?;
    if inp.sim.channel_capacity == 0 {
        return Err(Error::param("channel_capacity must be at least 1"));
    }
    if inp.vocab.fingerprint() != inp.db.vocab_fingerprint() {
        return Err(Error::FingerprintMismatch {
            database: inp.db.vocab_fingerprint(),
            query: inp.vocab.fingerprint(),
        });
    }
    let origin = inp
        .spec
        .center
        .map(|c| GeoPoint::new(c[0], c[1]))
        .unwrap_or_else(|| inp.grid.center());
    let truth = generate_truth(inp.spec, origin, inp.sim.dt).map_err(|e| e.in_stage("trajectory"))?;
    let odom = corrupt_odometry(&truth, inp.drift).map_err(|e| e.in_stage("odometry"))?;
    let kfs = keyframes(&truth, &odom, inp.drift, inp.sim.dt, inp.sim.keyframe_rate)?;
    let pool = aliasing_pool(inp.world, inp.db);

    let (tx, rx) = mpsc::sync_channel::<Result<VprEvent>>(inp.sim.channel_capacity);
    let (kfs_ref, pool_ref) = (&kfs, &pool);
    let consumed = thread::scope(|scope| {
        scope.spawn(move || {
            for kf in kfs_ref {
                let ev = place_recognition(inp, kf, pool_ref).map_err(|e| e.in_stage("place recognition"));
                let stop = ev.is_err();
                if tx.send(ev).is_err() || stop {
                    break;
                }
            }
        });
        fuse(inp, &odom, &kfs, rx)
    })?;

    let truth_geo = to_geo(&truth);
    let (estimates, mut diagnostics, alignment_log, eval_records, final_anchor) = consumed;
    let ate = if estimates.is_empty() {
        None
    } else {
        let est = GeoTrajectory::new(estimates.iter().map(|e| GeoStamp::new(e.timestamp, e.position())).collect())?;
        Some(ate(&est, &truth_geo, inp.sim.ate_window)?)
    };
    if !eval_records.is_empty() {
        let n = inp.vpr.top_k;
        diagnostics.recall = Some(summarize(&eval_records, 3.min(n), n)?);
    }
    Ok(PipelineOutput {
        estimates,
        truth: truth_geo,
        odometry: odom,
        ate,
        diagnostics,
        alignment_log,
        eval_records,
        final_anchor,
    })
}

type Fused = (
    Vec<EstimateRecord>,
    Diagnostics,
    Vec<AlignmentLogEntry>,
    Vec<EvalRecord>,
    Option<AnchorTransform>,
);

/// Alignment and fusion stage: consumes place-recognition events in
/// keyframe order and propagates the filter at every odometry sample.
fn fuse(
    inp: &PipelineInputs<'_>,
    odom: &OdomTrajectory,
    kfs: &[KeyframeEvent],
    rx: mpsc::Receiver<Result<VprEvent>>,
) -> Result<Fused> {
    let cfg = inp.fusion;
    let trigger = AnchorTrigger {
        min_pairs: inp.align.min_pairs,
        min_extent: inp.align.min_extent,
    };
    let g_world = GravityVector::down(Frame::World);
    let mut window = CorrespondenceWindow::new(inp.align.window)?;
    let mut state = FilterState::new();
    let mut anchor: Option<AnchorTransform> = None;
    let mut diag = Diagnostics {
        keyframes: kfs.len(),
        ..Default::default()
    };
    let mut estimates = Vec::with_capacity(odom.len());
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut obs_err_sum = 0.0;
    let mut memory_streak = 0usize;
    let mut next_kf = 0usize;

    for (i, pose) in odom.iter().enumerate() {
        if i > 0 && state.initialized {
            let a = anchor.expect("initialized implies anchored");
            let d = a.rotate(&(pose.position - odom.samples()[i - 1].position));
            state
                .predict(Vector2::new(d.x, d.y), cfg)
                .map_err(|e| e.in_stage("fusion"))?;
        }

        if next_kf < kfs.len() && kfs[next_kf].sample == i {
            let kf = &kfs[next_kf];
            next_kf += 1;
            let ev = rx
                .recv()
                .map_err(|_| Error::param("place recognition stage ended early").in_stage("pipeline"))??;
            debug_assert_eq!(ev.index, kf.index);
            diag.fp_injected += ev.fp_injected;
            diag.all_noise += ev.all_noise as usize;
            if let Some(e) = ev.eval {
                evals.push(e);
            }

            if let Some(obs) = ev.observation {
                diag.observations += 1;
                obs_err_sum += obs.distance(&kf.true_position);
                window.push(kf.odom_position, obs);
                if trigger.ready(&window) {
                    let solved = match inp.align.gravity_weight {
                        None => align_gravity(&window, &kf.gravity, &g_world),
                        Some(w) => align_gravity_weighted(&window, &kf.gravity, &g_world, w),
                    };
                    match solved {
                        Ok(report) => {
                            diag.anchors += 1;
                            log.push(AlignmentLogEntry::new(kf.timestamp, window.len(), &report));
                            anchor = Some(report.transform);
                        }
                        Err(Error::InsufficientExtent) | Err(Error::InsufficientPairs { .. }) => {
                            diag.anchor_failures += 1;
                        }
                        Err(e) => return Err(e.in_stage("alignment")),
                    }
                }

                if let Some(a) = anchor {
                    let p = a.apply(&kf.odom_position);
                    let memory = GeoPoint::new(p.x, p.y);
                    if !state.initialized {
                        state.initialize(memory, cfg).map_err(|e| e.in_stage("fusion"))?;
                        diag.initialized_at = Some(kf.timestamp);
                        diag.initialized_keyframe = Some(kf.index);
                    } else {
                        let m = state.update_memory(memory, cfg).map_err(|e| e.in_stage("fusion"))?;
                        if m.accepted {
                            diag.memory_accepted += 1;
                            memory_streak = 0;
                        } else {
                            diag.memory_rejected += 1;
                            memory_streak += 1;
                            if memory_streak >= inp.sim.reset_after {
                                state.reset(memory, cfg).map_err(|e| e.in_stage("fusion"))?;
                                diag.resets += 1;
                                memory_streak = 0;
                            }
                        }
                        let o = state.update_instant(obs, cfg).map_err(|e| e.in_stage("fusion"))?;
                        if o.accepted {
                            diag.instant_accepted += 1;
                        } else {
                            diag.instant_rejected += 1;
                        }
                    }
                }
            }
        }

        if state.initialized {
            state.last_timestamp = pose.timestamp;
            debug_assert!(state.is_symmetric_pd());
            estimates.push(EstimateRecord::from_state(pose.timestamp, &state));
        }
    }
    if diag.observations > 0 {
        diag.observation_error_mean = Some(obs_err_sum / diag.observations as f64);
    }
    Ok((estimates, diag, log, evals, anchor))
}
