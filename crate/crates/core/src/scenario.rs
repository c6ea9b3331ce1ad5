//! Declarative scenario files and the setup shared by simulation runs.
//!
//! A scenario is a TOML document with optional `[world]`, `[grid]`,
//! `[trajectory]`, `[drift]`, `[fusion]`, `[vpr]`, `[align]` and `[sim]`
//! tables. Omitted keys take their defaults; unknown keys are rejected.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{synth_features, ImageStyle, LocalFeatureSet, SyntheticWorld, WorldParams};
use crate::fusion::FusionConfig;
use crate::geo::GeoPoint;
use crate::pipeline::{run_pipeline, AlignConfig, PipelineInputs, PipelineOutput, SimConfig, VprConfig};
use crate::retrieval::{db_build, DescriptorDb, SyntheticSatellite};
use crate::sim::{DriftModel, TrajectorySpec};
use crate::tiles::{build_grid, TileGrid, DEFAULT_EXTENT, DEFAULT_FOV, DEFAULT_SPACING};
use crate::vlad::{build_vocabulary_with_stats, KMeansStats, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub origin: [f64; 2],
    pub extent: [f64; 2],
    pub spacing: f64,
    pub fov: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            origin: [0.0, 0.0],
            extent: [DEFAULT_EXTENT.0, DEFAULT_EXTENT.1],
            spacing: DEFAULT_SPACING,
            fov: DEFAULT_FOV,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<TileGrid> {
        build_grid(
            GeoPoint::new(self.origin[0], self.origin[1]),
            (self.extent[0], self.extent[1]),
            self.spacing,
            self.fov,
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub world: WorldParams,
    pub grid: GridConfig,
    pub trajectory: TrajectorySpec,
    pub drift: DriftModel,
    pub fusion: FusionConfig,
    pub vpr: VprConfig,
    pub align: AlignConfig,
    pub sim: SimConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Features used to train the vocabulary: every tile in satellite style
/// plus a camera-style view at the same centers, rows subsampled.
pub fn vocabulary_training_set(world: &SyntheticWorld, grid: &TileGrid, subsample: usize) -> Result<Vec<LocalFeatureSet>> {
    if subsample == 0 {
        return Err(Error::param("subsample must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sets = Vec::with_capacity(2 * grid.len());
    for tile in grid.tiles() {
        for style in [ImageStyle::Satellite, ImageStyle::Camera] {
            let fs = synth_features(world, &tile.center, tile.fov, style, 0.0, &mut rng)?;
            let rows: Vec<Vec<f32>> = fs.rows().step_by(subsample).map(|r| r.to_vec()).collect();
            sets.push(LocalFeatureSet::from_rows(&rows, fs.source_id.clone())?);
        }
    }
    Ok(sets)
}

/// Everything a run needs that does not depend on the run seed.
pub struct Prepared {
    pub world: SyntheticWorld,
    pub grid: TileGrid,
    pub vocab: Vocabulary,
    pub vocab_stats: KMeansStats,
    pub db: DescriptorDb,
}

impl Prepared {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let world = SyntheticWorld::new(cfg.world.clone()).map_err(|e| e.in_stage("world"))?;
        let grid = cfg.grid.build().map_err(|e| e.in_stage("grid"))?;
        let training = vocabulary_training_set(&world, &grid, cfg.vpr.vocab_subsample)?;
        let (vocab, vocab_stats) =
            build_vocabulary_with_stats(&training, cfg.vpr.n_c, cfg.vpr.vocab_seed, cfg.vpr.vocab_max_iters)
                .map_err(|e| e.in_stage("vocabulary"))?;
        let db = db_build(&grid, &vocab, &SyntheticSatellite { world: &world }).map_err(|e| e.in_stage("database"))?;
        Ok(Self {
            world,
            grid,
            vocab,
            vocab_stats,
            db,
        })
    }

    /// Run the pipeline with the scenario's parameters.
    pub fn run(&self, cfg: &ScenarioConfig) -> Result<PipelineOutput> {
        run_pipeline(&PipelineInputs {
            spec: &cfg.trajectory,
            world: &self.world,
            grid: &self.grid,
            vocab: &self.vocab,
            db: &self.db,
            drift: &cfg.drift,
            fusion: &cfg.fusion,
            vpr: &cfg.vpr,
            align: &cfg.align,
            sim: &cfg.sim,
        })
    }
}
