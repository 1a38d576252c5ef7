//! Descriptor and GPS log parsing, stream synchronization, bearing
//! derivation and keyframe sub-sampling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap;

/// Mean Earth radius used by the equirectangular projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const DEFAULT_SYNC_TOLERANCE: f64 = 0.1;
pub const DEFAULT_TRANS_THRESH: f64 = 5.0;
pub const DEFAULT_ROT_THRESH: f64 = std::f64::consts::PI / 6.0;

/// Positions closer than this are treated as coincident when deriving bearings.
const STATIONARY_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorRecord {
    #[serde(rename = "t")]
    pub timestamp: f64,
    #[serde(rename = "d")]
    pub vector: Vec<f64>,
}

impl DescriptorRecord {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// One line of a GPS log, before projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GpsRow {
    Geodetic { t: f64, lat: f64, lon: f64 },
    Metric { t: f64, x: f64, y: f64 },
}

impl GpsRow {
    pub fn timestamp(&self) -> f64 {
        match *self {
            GpsRow::Geodetic { t, .. } | GpsRow::Metric { t, .. } => t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    /// Heading of travel, wrapped to (-π, π].
    pub bearing: f64,
    pub source_geodetic: Option<(f64, f64)>,
}

impl GpsFix {
    pub fn new(timestamp: f64, x: f64, y: f64) -> Self {
        Self {
            timestamp,
            x,
            y,
            bearing: 0.0,
            source_geodetic: None,
        }
    }

    pub fn distance(&self, other: &GpsFix) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub descriptor: DescriptorRecord,
    pub fix: GpsFix,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorLine {
    t: f64,
    d: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GpsLine {
    t: f64,
    lat: Option<f64>,
    lon: Option<f64>,
    x: Option<f64>,
    y: Option<f64>,
}

fn for_each_line(path: &Path, mut f: impl FnMut(usize, &str) -> Result<()>) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        f(i + 1, trimmed)?;
    }
    Ok(())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_descriptors(path: &Path) -> Result<Vec<DescriptorRecord>> {
    let mut out: Vec<DescriptorRecord> = Vec::new();
    for_each_line(path, |lineno, text| {
        let rec: DescriptorLine =
            serde_json::from_str(text).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if rec.d.is_empty() {
            return Err(parse_err(path, lineno, "descriptor has dimension 0"));
        }
        if !rec.t.is_finite() || rec.d.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, lineno, "non-finite value"));
        }
        if let Some(first) = out.first() {
            if first.dim() != rec.d.len() {
                return Err(Error::Dimension {
                    expected: first.dim(),
                    actual: rec.d.len(),
                    location: Some(lineno),
                });
            }
        }
        out.push(DescriptorRecord {
            timestamp: rec.t,
            vector: rec.d,
        });
        Ok(())
    })?;
    if out.is_empty() {
        return Err(Error::EmptyStream(format!("{}", path.display())));
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(out)
}

pub fn load_gps(path: &Path) -> Result<Vec<GpsRow>> {
    let mut out: Vec<GpsRow> = Vec::new();
    for_each_line(path, |lineno, text| {
        let rec: GpsLine =
            serde_json::from_str(text).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let row = match (rec.lat, rec.lon, rec.x, rec.y) {
            (Some(lat), Some(lon), None, None) => GpsRow::Geodetic { t: rec.t, lat, lon },
            (None, None, Some(x), Some(y)) => GpsRow::Metric { t: rec.t, x, y },
            _ => {
                return Err(parse_err(
                    path,
                    lineno,
                    "expected either {lat, lon} or {x, y}",
                ))
            }
        };
        let finite = match row {
            GpsRow::Geodetic { t, lat, lon } => t.is_finite() && lat.is_finite() && lon.is_finite(),
            GpsRow::Metric { t, x, y } => t.is_finite() && x.is_finite() && y.is_finite(),
        };
        if !finite {
            return Err(parse_err(path, lineno, "non-finite value"));
        }
        if let Some(first) = out.first() {
            if std::mem::discriminant(first) != std::mem::discriminant(&row) {
                return Err(parse_err(
                    path,
                    lineno,
                    "geodetic and metric rows mixed in one file",
                ));
            }
        }
        out.push(row);
        Ok(())
    })?;
    if out.is_empty() {
        return Err(Error::EmptyStream(format!("{}", path.display())));
    }
    out.sort_by(|a, b| a.timestamp().total_cmp(&b.timestamp()));
    Ok(out)
}

/// Reads a descriptor log and a GPS log, both timestamp-sorted on return.
pub fn load_session(
    descriptor_path: &Path,
    gps_path: &Path,
) -> Result<(Vec<DescriptorRecord>, Vec<GpsRow>)> {
    Ok((load_descriptors(descriptor_path)?, load_gps(gps_path)?))
}

/// Equirectangular projection about the first row. Input and output are
/// `(lat, lon)` degrees and `(x, y)` meters respectively.
pub fn geodetic_to_local(rows: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let Some(&(lat0, lon0)) = rows.first() else {
        return Err(Error::EmptyStream("no geodetic rows".into()));
    };
    for &(lat, lon) in rows {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!(
                "geodetic coordinate out of range: ({lat}, {lon})"
            )));
        }
    }
    let cos0 = lat0.to_radians().cos();
    Ok(rows
        .iter()
        .map(|&(lat, lon)| {
            let x = EARTH_RADIUS_M * (lon - lon0).to_radians() * cos0;
            let y = EARTH_RADIUS_M * (lat - lat0).to_radians();
            (x, y)
        })
        .collect())
}

/// Converts raw rows to fixes in the local frame and derives bearings.
/// Metric logs are taken to already be in a local frame.
pub fn fixes_from_rows(rows: &[GpsRow]) -> Result<Vec<GpsFix>> {
    let geodetic: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| match *r {
            GpsRow::Geodetic { lat, lon, .. } => Some((lat, lon)),
            GpsRow::Metric { .. } => None,
        })
        .collect();
    let fixes: Vec<GpsFix> = if geodetic.is_empty() {
        rows.iter()
            .map(|r| match *r {
                GpsRow::Metric { t, x, y } => Ok(GpsFix::new(t, x, y)),
                GpsRow::Geodetic { .. } => Err(Error::invalid("mixed GPS rows")),
            })
            .collect::<Result<_>>()?
    } else {
        if geodetic.len() != rows.len() {
            return Err(Error::invalid("mixed GPS rows"));
        }
        let local = geodetic_to_local(&geodetic)?;
        rows.iter()
            .zip(local)
            .zip(geodetic)
            .map(|((r, (x, y)), src)| GpsFix {
                source_geodetic: Some(src),
                ..GpsFix::new(r.timestamp(), x, y)
            })
            .collect()
    };
    derive_bearings(&fixes)
}

/// Heading from forward differences; the last fix repeats its predecessor
/// and stationary stretches carry the neighbouring bearing.
pub fn derive_bearings(fixes: &[GpsFix]) -> Result<Vec<GpsFix>> {
    if fixes.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 fixes to derive bearings, got {}",
            fixes.len()
        )));
    }
    let n = fixes.len();
    let mut raw: Vec<Option<f64>> = fixes
        .windows(2)
        .map(|w| {
            let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
            (dx.hypot(dy) > STATIONARY_EPS).then(|| dy.atan2(dx))
        })
        .collect();
    raw.push(None);

    let first_defined = raw.iter().flatten().copied().next().unwrap_or(0.0);
    let mut current = first_defined;
    let mut out = Vec::with_capacity(n);
    for (fix, b) in fixes.iter().zip(raw) {
        if let Some(b) = b {
            current = b;
        }
        out.push(GpsFix {
            bearing: wrap(current),
            ..*fix
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SyncResult {
    pub pairs: Vec<(DescriptorRecord, GpsFix)>,
    pub dropped: usize,
}

/// Matches every descriptor to its nearest-in-time fix; pairs further apart
/// than `tolerance` seconds are dropped and counted.
pub fn synchronize(
    descriptors: &[DescriptorRecord],
    fixes: &[GpsFix],
    tolerance: f64,
) -> SyncResult {
    let mut pairs = Vec::with_capacity(descriptors.len());
    let mut dropped = 0;
    for d in descriptors {
        let t = d.timestamp;
        let idx = fixes.partition_point(|f| f.timestamp < t);
        let candidates = [idx.checked_sub(1), (idx < fixes.len()).then_some(idx)];
        let best = candidates.into_iter().flatten().min_by(|&a, &b| {
            let ga = (fixes[a].timestamp - t).abs();
            let gb = (fixes[b].timestamp - t).abs();
            ga.total_cmp(&gb).then(a.cmp(&b))
        });
        match best {
            Some(i) if (fixes[i].timestamp - t).abs() <= tolerance => {
                pairs.push((d.clone(), fixes[i]))
            }
            _ => dropped += 1,
        }
    }
    SyncResult { pairs, dropped }
}

/// Keeps a pair whenever it has moved at least `trans_thresh` meters or
/// turned at least `rot_thresh` radians from the last kept pair.
pub fn select_keyframes(
    synced: &[(DescriptorRecord, GpsFix)],
    trans_thresh: f64,
    rot_thresh: f64,
) -> Vec<Keyframe> {
    let mut out: Vec<Keyframe> = Vec::new();
    for (desc, fix) in synced {
        let accept = match out.last() {
            None => true,
            Some(last) => {
                fix.distance(&last.fix) >= trans_thresh
                    || wrap(fix.bearing - last.fix.bearing).abs() >= rot_thresh
            }
        };
        if accept {
            out.push(Keyframe {
                id: out.len(),
                descriptor: desc.clone(),
                fix: *fix,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframeParams {
    pub sync_tolerance: f64,
    pub trans_thresh: f64,
    pub rot_thresh: f64,
}

impl Default for KeyframeParams {
    fn default() -> Self {
        Self {
            sync_tolerance: DEFAULT_SYNC_TOLERANCE,
            trans_thresh: DEFAULT_TRANS_THRESH,
            rot_thresh: DEFAULT_ROT_THRESH,
        }
    }
}

/// Full ingest chain: project, derive bearings, synchronize, sub-sample.
pub fn build_keyframes(
    descriptors: &[DescriptorRecord],
    gps: &[GpsRow],
    params: &KeyframeParams,
) -> Result<(Vec<Keyframe>, usize)> {
    let fixes = fixes_from_rows(gps)?;
    let synced = synchronize(descriptors, &fixes, params.sync_tolerance);
    if synced.pairs.is_empty() {
        return Err(Error::EmptyStream(
            "no descriptor could be synchronized with a GPS fix".into(),
        ));
    }
    let kfs = select_keyframes(&synced.pairs, params.trans_thresh, params.rot_thresh);
    Ok((kfs, synced.dropped))
}

pub fn load_keyframes(
    descriptor_path: &Path,
    gps_path: &Path,
    params: &KeyframeParams,
) -> Result<Vec<Keyframe>> {
    let (descs, rows) = load_session(descriptor_path, gps_path)?;
    Ok(build_keyframes(&descs, &rows, params)?.0)
}

#[derive(Serialize, Deserialize)]
struct KeyframeLine {
    id: usize,
    t: f64,
    x: f64,
    y: f64,
    bearing: f64,
    d: Vec<f64>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub(crate) fn write_jsonl<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        let line = serde_json::to_string(&row).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_keyframes(path: &Path, frames: &[Keyframe]) -> Result<()> {
    write_jsonl(
        path,
        frames.iter().map(|k| KeyframeLine {
            id: k.id,
            t: k.descriptor.timestamp,
            x: k.fix.x,
            y: k.fix.y,
            bearing: k.fix.bearing,
            d: k.descriptor.vector.clone(),
        }),
    )
}

pub fn read_keyframes(path: &Path) -> Result<Vec<Keyframe>> {
    let mut out = Vec::new();
    for_each_line(path, |lineno, text| {
        let k: KeyframeLine =
            serde_json::from_str(text).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        out.push(Keyframe {
            id: k.id,
            descriptor: DescriptorRecord {
                timestamp: k.t,
                vector: k.d,
            },
            fix: GpsFix {
                timestamp: k.t,
                x: k.x,
                y: k.y,
                bearing: k.bearing,
                source_geodetic: None,
            },
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_descriptors(path: &Path, records: &[DescriptorRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn write_gps(path: &Path, rows: &[GpsRow]) -> Result<()> {
    write_jsonl(
        path,
        rows.iter().map(|r| match *r {
            GpsRow::Geodetic { t, lat, lon } => serde_json::json!({"t": t, "lat": lat, "lon": lon}),
            GpsRow::Metric { t, x, y } => serde_json::json!({"t": t, "x": x, "y": y}),
        }),
    )
}

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}
