//! Georeferenced reference tile grid standing in for the satellite map.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// Default sampling distance between tile centers, meters.
pub const DEFAULT_SPACING: f64 = 40.0;
/// Default square ground footprint side, meters.
pub const DEFAULT_FOV: f64 = 60.0;
/// Default area of interest (about 140,000 m²).
pub const DEFAULT_EXTENT: (f64, f64) = (400.0, 350.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub tile_id: u32,
    pub center: GeoPoint,
    pub fov: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    tiles: Vec<TileRecord>,
    spacing: f64,
    origin: GeoPoint,
    extent: (f64, f64),
}

/// Regular lattice of tiles starting at `origin` (the lower-left tile
/// center), ids assigned row-major with easting varying fastest.
pub fn build_grid(origin: GeoPoint, extent: (f64, f64), spacing: f64, fov: f64) -> Result<TileGrid> {
    if !(extent.0 > 0.0 && extent.1 > 0.0) {
        return Err(Error::param("grid extent must be positive"));
    }
    if !(spacing > 0.0) {
        return Err(Error::param("grid spacing must be positive"));
    }
    if !(fov > 0.0) {
        return Err(Error::param("tile fov must be positive"));
    }
    if !origin.is_finite() {
        return Err(Error::param("grid origin must be finite"));
    }
    let nx = (extent.0 / spacing).floor() as u32 + 1;
    let ny = (extent.1 / spacing).floor() as u32 + 1;
    let mut tiles = Vec::with_capacity((nx * ny) as usize);
    for j in 0..ny {
        for i in 0..nx {
            tiles.push(TileRecord {
                tile_id: j * nx + i,
                center: origin.offset(i as f64 * spacing, j as f64 * spacing),
                fov,
            });
        }
    }
    Ok(TileGrid {
        tiles,
        spacing,
        origin,
        extent,
    })
}

impl TileGrid {
    /// Rebuild from manifest records. The lattice spacing is recovered as
    /// the smallest nonzero easting/northing gap between centers.
    pub fn from_records(tiles: Vec<TileRecord>) -> Result<Self> {
        if tiles.is_empty() {
            return Err(Error::Empty("tile grid"));
        }
        let mut ids: Vec<u32> = tiles.iter().map(|t| t.tile_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format("duplicate tile_id in manifest"));
        }
        if tiles.iter().any(|t| !(t.fov > 0.0) || !t.center.is_finite()) {
            return Err(Error::format("tile with non-positive fov or non-finite center"));
        }
        let min_e = tiles.iter().map(|t| t.center.easting).fold(f64::INFINITY, f64::min);
        let min_n = tiles.iter().map(|t| t.center.northing).fold(f64::INFINITY, f64::min);
        let max_e = tiles.iter().map(|t| t.center.easting).fold(f64::NEG_INFINITY, f64::max);
        let max_n = tiles.iter().map(|t| t.center.northing).fold(f64::NEG_INFINITY, f64::max);
        let spacing = smallest_gap(tiles.iter().map(|t| t.center.easting))
            .into_iter()
            .chain(smallest_gap(tiles.iter().map(|t| t.center.northing)))
            .fold(f64::INFINITY, f64::min);
        let spacing = if spacing.is_finite() { spacing } else { tiles[0].fov };
        Ok(Self {
            tiles,
            spacing,
            origin: GeoPoint::new(min_e, min_n),
            extent: (max_e - min_e, max_n - min_n),
        })
    }

    pub fn tiles(&self) -> &[TileRecord] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn extent(&self) -> (f64, f64) {
        self.extent
    }

    /// Footprint side of the first tile; grids built here are uniform.
    pub fn fov(&self) -> f64 {
        self.tiles.first().map_or(0.0, |t| t.fov)
    }

    pub fn center(&self) -> GeoPoint {
        self.origin.offset(self.extent.0 / 2.0, self.extent.1 / 2.0)
    }

    pub fn tile(&self, tile_id: u32) -> Option<&TileRecord> {
        self.tiles.iter().find(|t| t.tile_id == tile_id)
    }

    /// Whether `q` lies inside the rectangle spanned by the tile centers.
    pub fn contains(&self, q: &GeoPoint) -> bool {
        let (de, dn) = (q.easting - self.origin.easting, q.northing - self.origin.northing);
        (0.0..=self.extent.0).contains(&de) && (0.0..=self.extent.1).contains(&dn)
    }
}

fn smallest_gap(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 1e-9)
        .min_by(f64::total_cmp)
}

/// Fraction of a footprint shared with its immediate neighbor along one
/// axis; zero for disjoint tiles.
pub fn overlap_fraction(grid: &TileGrid) -> f64 {
    overlap_fraction_for(grid.spacing, grid.fov())
}

pub fn overlap_fraction_for(spacing: f64, fov: f64) -> f64 {
    if fov <= spacing {
        0.0
    } else {
        (fov - spacing) / fov
    }
}

/// Tile ids sorted by distance from `q`, ties by ascending id.
pub fn ground_truth_neighbors(grid: &TileGrid, q: &GeoPoint, n: usize) -> Result<Vec<u32>> {
    if grid.is_empty() {
        return Err(Error::Empty("tile grid"));
    }
    if n == 0 || n > grid.len() {
        return Err(Error::param(format!(
            "neighbor count {n} outside 1..={}",
            grid.len()
        )));
    }
    let mut ranked: Vec<(f64, u32)> = grid
        .tiles
        .iter()
        .map(|t| (t.center.distance(q), t.tile_id))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(n).map(|(_, id)| id).collect())
}

/// Per-axis bound on the reference position error when the correct tile
/// is retrieved: half the spacing.
pub fn nearest_tile_error_bound(grid: &TileGrid) -> f64 {
    grid.spacing / 2.0
}

/// Euclidean worst case on a square lattice, `spacing·√2/2`.
pub fn nearest_tile_diagonal_bound(grid: &TileGrid) -> f64 {
    grid.spacing * std::f64::consts::SQRT_2 / 2.0
}

const MANIFEST_HEADER: &str = "tile_id,easting,northing,fov_m";

pub fn write_manifest(mut w: impl Write, grid: &TileGrid) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{MANIFEST_HEADER}").unwrap();
    for t in grid.tiles() {
        writeln!(out, "{},{},{},{}", t.tile_id, t.center.easting, t.center.northing, t.fov).unwrap();
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_manifest(reader: impl BufRead) -> Result<TileGrid> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or(Error::Empty("tile manifest"))??;
    if header.trim() != MANIFEST_HEADER {
        return Err(Error::format(format!("unexpected manifest header {:?}", header.trim())));
    }
    let mut tiles = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::format(format!("manifest line {}: {what}", i + 2));
        if cols.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let tile_id = cols[0].parse().map_err(|_| bad("bad tile_id"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        tiles.push(TileRecord {
            tile_id,
            center: GeoPoint::new(num(cols[1])?, num(cols[2])?),
            fov: num(cols[3])?,
        });
    }
    TileGrid::from_records(tiles)
}
