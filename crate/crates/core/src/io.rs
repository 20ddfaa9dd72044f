//! Measurement ingestion and REM grid export.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{RemError, Result};
use crate::geometry::{radial_bin, to_spherical, CartesianPoint, RangeArray};
use crate::parallel;

pub const DEFAULT_RSRP_FLOOR_DBM: f64 = -120.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Meters relative to the base station.
    pub position: CartesianPoint,
    pub rsrp_dbm: f64,
    pub altitude_label: Option<String>,
    pub timestamp: Option<String>,
}

impl Measurement {
    pub fn new(position: CartesianPoint, rsrp_dbm: f64) -> Self {
        Self { position, rsrp_dbm, altitude_label: None, timestamp: None }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.altitude_label = Some(label.into());
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub below_floor: usize,
    pub malformed: usize,
    pub non_finite: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.below_floor + self.malformed + self.non_finite
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<PathBuf>,
    pub rsrp_floor_dbm: Option<f64>,
    pub rows_read: usize,
    pub dropped: DropCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub records: Vec<Measurement>,
    pub provenance: Provenance,
}

impl MeasurementSet {
    pub fn from_records(records: Vec<Measurement>) -> Self {
        Self { records, provenance: Provenance::default() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> MeasurementSet {
        MeasurementSet {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn positions(&self) -> Vec<CartesianPoint> {
        self.records.iter().map(|r| r.position).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rsrp_dbm).collect()
    }

    /// Records whose altitude label is one of `labels`.
    pub fn with_labels(&self, labels: &[&str]) -> Result<MeasurementSet> {
        if self.records.iter().any(|r| r.altitude_label.is_none()) {
            return Err(RemError::Data("measurement without altitude label".to_string()));
        }
        let records = self
            .records
            .iter()
            .filter(|r| labels.contains(&r.altitude_label.as_deref().unwrap()))
            .cloned()
            .collect();
        Ok(MeasurementSet { records, provenance: self.provenance.clone() })
    }

    /// Splits into records that fall inside the radial range and those that do not.
    pub fn partition_in_region(&self, delta: &RangeArray) -> (MeasurementSet, usize) {
        let (inside, outside): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .cloned()
            .partition(|r| to_spherical(&r.position).and_then(|s| radial_bin(s.rho, delta)).is_ok());
        (MeasurementSet { records: inside, provenance: self.provenance.clone() }, outside.len())
    }

    /// `x,y,z,rsrp_dbm,altitude_label,timestamp`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "z", "rsrp_dbm", "altitude_label", "timestamp"])?;
        for r in &self.records {
            w.write_record([
                r.position.x.to_string(),
                r.position.y.to_string(),
                r.position.z.to_string(),
                r.rsrp_dbm.to_string(),
                r.altitude_label.clone().unwrap_or_default(),
                r.timestamp.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Geodetic position of the base station used to convert lat/lon/alt columns
/// to local east-north-up meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoOrigin {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

const WGS84_A: f64 = 6_378_137.0;
const WGS84_E2: f64 = 6.694_379_990_14e-3;

fn ecef(lat_deg: f64, lon_deg: f64, alt: f64) -> [f64; 3] {
    let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
    let n = WGS84_A / (1.0 - WGS84_E2 * lat.sin().powi(2)).sqrt();
    [
        (n + alt) * lat.cos() * lon.cos(),
        (n + alt) * lat.cos() * lon.sin(),
        (n * (1.0 - WGS84_E2) + alt) * lat.sin(),
    ]
}

/// WGS-84 geodetic coordinates to east-north-up meters around `origin`.
pub fn geodetic_to_enu(lat_deg: f64, lon_deg: f64, alt_m: f64, origin: &GeoOrigin) -> CartesianPoint {
    let p = ecef(lat_deg, lon_deg, alt_m);
    let o = ecef(origin.lat_deg, origin.lon_deg, origin.alt_m);
    let d = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
    let (lat, lon) = (origin.lat_deg.to_radians(), origin.lon_deg.to_radians());
    let (sl, cl, so, co) = (lat.sin(), lat.cos(), lon.sin(), lon.cos());
    CartesianPoint::new(
        -so * d[0] + co * d[1],
        -sl * co * d[0] - sl * so * d[1] + cl * d[2],
        cl * co * d[0] + cl * so * d[1] + sl * d[2],
    )
}

/// Column names in the source CSV. Either `x/y/z` or `lat/lon/alt` plus an
/// origin must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaMapping {
    pub x: Option<String>,
    pub y: Option<String>,
    pub z: Option<String>,
    pub lat: Option<String>,
    pub lon: Option<String>,
    pub alt: Option<String>,
    pub origin: Option<GeoOrigin>,
    pub rsrp: String,
    pub altitude_label: Option<String>,
    pub timestamp: Option<String>,
    /// Ingestion aborts when more than this fraction of rows is malformed.
    pub max_malformed_fraction: f64,
}

impl Default for SchemaMapping {
    fn default() -> Self {
        Self {
            x: Some("x".into()),
            y: Some("y".into()),
            z: Some("z".into()),
            lat: None,
            lon: None,
            alt: None,
            origin: None,
            rsrp: "rsrp_dbm".into(),
            altitude_label: Some("altitude_label".into()),
            timestamp: Some("timestamp".into()),
            max_malformed_fraction: 0.01,
        }
    }
}

impl SchemaMapping {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut e = Vec::new();
        let cart = self.x.is_some() && self.y.is_some() && self.z.is_some();
        let geo = self.lat.is_some() && self.lon.is_some() && self.alt.is_some();
        if !cart && !geo {
            e.push(format!("{prefix}: need x/y/z or lat/lon/alt columns"));
        }
        if !cart && geo && self.origin.is_none() {
            e.push(format!("{prefix}.origin is required with lat/lon/alt columns"));
        }
        if !(0.0..=1.0).contains(&self.max_malformed_fraction) {
            e.push(format!("{prefix}.max_malformed_fraction must lie in [0, 1]"));
        }
        e
    }
}

enum Coords {
    Cartesian([usize; 3]),
    Geodetic([usize; 3], GeoOrigin),
}

/// Reads measurements from CSV, dropping rows below `rsrp_floor_dbm`, rows that
/// fail to parse and rows with non-finite values.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &SchemaMapping, rsrp_floor_dbm: f64) -> Result<MeasurementSet> {
    let path = path.as_ref();
    let (records, rows, dropped) = read_rows(path, schema, Some(rsrp_floor_dbm))?;
    log::info!(
        "ingested {} of {rows} rows from {} (below floor {}, malformed {}, non-finite {})",
        records.len(),
        path.display(),
        dropped.below_floor,
        dropped.malformed,
        dropped.non_finite
    );
    Ok(MeasurementSet {
        records,
        provenance: Provenance {
            source: Some(path.to_path_buf()),
            rsrp_floor_dbm: Some(rsrp_floor_dbm),
            rows_read: rows,
            dropped,
        },
    })
}

/// Query locations from CSV. Only the coordinate columns are required; the
/// returned records carry NaN power.
pub fn read_query_points(path: impl AsRef<Path>, schema: &SchemaMapping) -> Result<Vec<Measurement>> {
    Ok(read_rows(path.as_ref(), schema, None)?.0)
}

/// Shared CSV reader. `floor: None` means the power column is not read.
fn read_rows(path: &Path, schema: &SchemaMapping, floor: Option<f64>) -> Result<(Vec<Measurement>, usize, DropCounts)> {
    let problems = schema.problems("schema");
    if !problems.is_empty() {
        return Err(RemError::Config(problems));
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(RemError::Empty(format!("{} has no header row", path.display())));
    }
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| -> Result<usize> {
        index.get(name).copied().ok_or_else(|| RemError::Data(format!("missing column '{name}' in {}", path.display())))
    };
    let opt_col = |name: &Option<String>| name.as_deref().and_then(|n| index.get(n).copied());
    let has = |n: &Option<String>| n.as_deref().is_some_and(|n| index.contains_key(n));

    let coords = if has(&schema.x) && has(&schema.y) && has(&schema.z) {
        Coords::Cartesian([
            col(schema.x.as_deref().unwrap())?,
            col(schema.y.as_deref().unwrap())?,
            col(schema.z.as_deref().unwrap())?,
        ])
    } else if let (Some(la), Some(lo), Some(al)) = (&schema.lat, &schema.lon, &schema.alt) {
        let origin = schema.origin.ok_or_else(|| RemError::Config(vec!["schema.origin is required".into()]))?;
        Coords::Geodetic([col(la)?, col(lo)?, col(al)?], origin)
    } else {
        let name = [&schema.x, &schema.y, &schema.z].iter().find(|n| !has(n)).and_then(|n| n.as_deref()).unwrap_or("x");
        return Err(RemError::Data(format!("missing column '{name}' in {}", path.display())));
    };
    let rsrp_col = match floor {
        Some(_) => Some(col(&schema.rsrp)?),
        None => None,
    };
    let label_col = opt_col(&schema.altitude_label);
    let time_col = opt_col(&schema.timestamp);

    let mut records = Vec::new();
    let mut dropped = DropCounts::default();
    let mut rows = 0usize;
    for row in rdr.records() {
        rows += 1;
        let Ok(row) = row else {
            dropped.malformed += 1;
            continue;
        };
        let num = |i: usize| row.get(i).and_then(|s| s.parse::<f64>().ok());
        let vals: Option<Vec<f64>> = match &coords {
            Coords::Cartesian(ix) | Coords::Geodetic(ix, _) => {
                ix.iter().chain(rsrp_col.as_ref()).map(|&i| num(i)).collect()
            }
        };
        let Some(vals) = vals else {
            dropped.malformed += 1;
            continue;
        };
        if vals.iter().any(|v| !v.is_finite()) {
            dropped.non_finite += 1;
            continue;
        }
        let position = match &coords {
            Coords::Cartesian(_) => CartesianPoint::new(vals[0], vals[1], vals[2]),
            Coords::Geodetic(_, origin) => geodetic_to_enu(vals[0], vals[1], vals[2], origin),
        };
        let rsrp = vals.get(3).copied().unwrap_or(f64::NAN);
        if floor.is_some_and(|f| rsrp < f) {
            dropped.below_floor += 1;
            continue;
        }
        let text = |c: Option<usize>| c.and_then(|i| row.get(i)).filter(|s| !s.is_empty()).map(str::to_string);
        records.push(Measurement {
            position,
            rsrp_dbm: rsrp,
            altitude_label: text(label_col),
            timestamp: text(time_col),
        });
    }
    if rows == 0 {
        return Err(RemError::Empty(format!("{} contains no data rows", path.display())));
    }
    if dropped.malformed as f64 > schema.max_malformed_fraction * rows as f64 {
        return Err(RemError::Data(format!(
            "{} malformed rows out of {rows} in {} exceeds the {:.1}% limit",
            dropped.malformed,
            path.display(),
            100.0 * schema.max_malformed_fraction
        )));
    }
    Ok((records, rows, dropped))
}

/// Anything that maps a point to received power.
pub trait Predictor: Sync {
    fn predict(&self, p: &CartesianPoint) -> Result<f64>;

    fn predict_many(&self, points: &[CartesianPoint]) -> Result<Vec<f64>> {
        parallel::map_collect(points, |p| self.predict(p))
    }
}

impl Predictor for crate::model::EncoderModel {
    fn predict(&self, p: &CartesianPoint) -> Result<f64> {
        self.predict_point(p)
    }
}

/// Axis-aligned box split into equal Cartesian cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub cell: [f64; 3],
}

impl GridRegion {
    pub fn counts(&self) -> Result<[usize; 3]> {
        let mut n = [0; 3];
        for a in 0..3 {
            let span = self.max[a] - self.min[a];
            if !(span > 0.0 && self.cell[a] > 0.0) || !span.is_finite() {
                return Err(RemError::Domain(format!("grid axis {a}: need max > min and cell > 0")));
            }
            n[a] = ((span / self.cell[a]) - 1e-9).ceil().max(1.0) as usize;
        }
        Ok(n)
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> CartesianPoint {
        CartesianPoint::new(
            self.min[0] + (ix as f64 + 0.5) * self.cell[0],
            self.min[1] + (iy as f64 + 0.5) * self.cell[1],
            self.min[2] + (iz as f64 + 0.5) * self.cell[2],
        )
    }
}

pub const GRID_MAGIC: &[u8; 8] = b"REMGRID\0";
pub const GRID_VERSION: u32 = 1;
pub const DEFAULT_FILL: f64 = -9999.0;

/// Predicted power on a Cartesian grid; `values[(iz * ny + iy) * nx + ix]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemGrid {
    pub origin: [f64; 3],
    pub cell: [f64; 3],
    pub counts: [usize; 3],
    pub fill: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub format: String,
    pub version: u32,
    pub origin_m: [f64; 3],
    pub cell_m: [f64; 3],
    pub counts: [usize; 3],
    pub order: String,
    pub units: String,
    pub fill: f64,
    pub filled_cells: usize,
}

impl RemGrid {
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.counts[1] + iy) * self.counts[0] + ix
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.index(ix, iy, iz)]
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> CartesianPoint {
        CartesianPoint::new(
            self.origin[0] + (ix as f64 + 0.5) * self.cell[0],
            self.origin[1] + (iy as f64 + 0.5) * self.cell[1],
            self.origin[2] + (iz as f64 + 0.5) * self.cell[2],
        )
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            format: "rem-grid".into(),
            version: GRID_VERSION,
            origin_m: self.origin,
            cell_m: self.cell,
            counts: self.counts,
            order: "x fastest, then y, then z".into(),
            units: "dBm".into(),
            fill: self.fill,
            filled_cells: self.values.iter().filter(|v| **v == self.fill).count(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(8 * self.values.len() + 80);
        for n in self.counts {
            p.extend((n as u64).to_le_bytes());
        }
        for v in self.origin.iter().chain(&self.cell).chain(std::iter::once(&self.fill)) {
            p.extend(v.to_le_bytes());
        }
        for v in &self.values {
            p.extend(v.to_le_bytes());
        }
        let mut out = Vec::with_capacity(p.len() + 16);
        out.extend(GRID_MAGIC);
        out.extend(GRID_VERSION.to_le_bytes());
        out.extend(&p);
        out.extend(crc32fast::hash(&p).to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<RemGrid> {
        let bad = |m: &str| RemError::Data(format!("grid file: {m}"));
        if b.len() < 16 || &b[..8] != GRID_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(b[8..12].try_into().unwrap());
        if version != GRID_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let p = &b[12..b.len() - 4];
        let stored = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
        if crc32fast::hash(p) != stored {
            return Err(bad("checksum mismatch"));
        }
        if p.len() < 80 || !(p.len() - 80).is_multiple_of(8) {
            return Err(bad("truncated"));
        }
        let u = |i: usize| u64::from_le_bytes(p[8 * i..8 * i + 8].try_into().unwrap()) as usize;
        let f = |i: usize| f64::from_le_bytes(p[8 * i..8 * i + 8].try_into().unwrap());
        let counts = [u(0), u(1), u(2)];
        let n = counts.iter().product::<usize>();
        if p.len() != 80 + 8 * n {
            return Err(bad("value count does not match cell counts"));
        }
        Ok(RemGrid {
            counts,
            origin: [f(3), f(4), f(5)],
            cell: [f(6), f(7), f(8)],
            fill: f(9),
            values: (0..n).map(|i| f(10 + i)).collect(),
        })
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn write_binary(&self, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let bin = stem.as_ref().with_extension("bin");
        let json = stem.as_ref().with_extension("json");
        std::fs::write(&bin, self.to_bytes())?;
        std::fs::write(&json, serde_json::to_string_pretty(&self.header())?)?;
        Ok((bin, json))
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<RemGrid> {
        RemGrid::from_bytes(&std::fs::read(path)?)
    }

    /// `ix,iy,iz,x,y,z,rsrp_dbm`, one row per cell in storage order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["ix", "iy", "iz", "x", "y", "z", "rsrp_dbm"])?;
        for iz in 0..self.counts[2] {
            for iy in 0..self.counts[1] {
                for ix in 0..self.counts[0] {
                    let c = self.center(ix, iy, iz);
                    w.write_record([
                        ix.to_string(),
                        iy.to_string(),
                        iz.to_string(),
                        c.x.to_string(),
                        c.y.to_string(),
                        c.z.to_string(),
                        self.get(ix, iy, iz).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates `predictor` at every cell center. Cells whose center lies
/// outside the sphere of radius `delta.limit()` (or on the base station)
/// get `fill`. Errors if the box reaches beyond the bounding cube of that
/// sphere.
pub fn export_rem_grid(
    predictor: &dyn Predictor,
    region: &GridRegion,
    delta: &RangeArray,
    fill: f64,
) -> Result<RemGrid> {
    let counts = region.counts()?;
    let lim = delta.limit();
    for a in 0..3 {
        if region.min[a] < -lim || region.max[a] > lim {
            return Err(RemError::OutsideRegion { rho: region.min[a].abs().max(region.max[a].abs()), limit: lim });
        }
    }
    let n = counts.iter().product::<usize>();
    let values = parallel::map_range(n, |i| {
        let ix = i % counts[0];
        let iy = (i / counts[0]) % counts[1];
        let iz = i / (counts[0] * counts[1]);
        let c = region.center(ix, iy, iz);
        match to_spherical(&c).and_then(|s| radial_bin(s.rho, delta)) {
            Ok(_) => predictor.predict(&c),
            Err(_) => Ok(fill),
        }
    })?;
    Ok(RemGrid { origin: region.min, cell: region.cell, counts, fill, values })
}
