//! Synthetic driving sessions over a Manhattan street grid.
//!
//! A vehicle follows a closed route between grid intersections for a
//! number of laps. Descriptors come from a fixed random two-layer map of
//! `[appearance(position); cos θ; sin θ; nuisance(t)]`, where appearance
//! is a bilinear interpolation of latent vectors on a square lattice and
//! the nuisance channel drifts slowly with time. World structure (lattice,
//! map weights, nuisance periods) depends only on `seed`; the nuisance
//! phase and all measurement noise additionally depend on `session`.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap, Pose2};
use crate::ingest::{self, DescriptorRecord, GpsRow};
use crate::rng::RngStream;

const GENERATOR_HIDDEN: usize = 64;
const NUISANCE_CHANNELS: usize = 4;
const NUISANCE_PERIOD_RANGE: (f64, f64) = (30.0, 90.0);
/// Two samples count as a revisit only if the vehicle travelled at least
/// this far in between.
const REVISIT_MIN_TRAVEL: f64 = 50.0;
pub const REVISIT_MAX_DIST: f64 = 5.0;
pub const REVISIT_MAX_BEARING: f64 = PI / 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Distance between adjacent intersections, meters.
    pub block_size: f64,
    /// Intersection grid as (rows, cols).
    pub grid: (usize, usize),
    /// Closed loop of intersection indices (`row * cols + col`).
    pub route: Vec<usize>,
    pub sample_spacing: f64,
    pub laps: usize,
    pub appearance_dim: usize,
    pub descriptor_dim: usize,
    pub nuisance_amplitude: f64,
    pub descriptor_noise_sigma: f64,
    pub gps_noise_sigma: f64,
    /// Lattice spacing of the appearance latents, meters.
    pub appearance_cell: f64,
    /// Vehicle speed, m/s; sets the timestamps.
    pub speed: f64,
    pub seed: u64,
    /// Session index; distinct sessions share the world but not the noise.
    pub session: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            block_size: 20.0,
            grid: (4, 4),
            route: vec![0, 3, 7, 4, 8, 11, 15, 12],
            sample_spacing: 1.0,
            laps: 2,
            appearance_dim: 16,
            descriptor_dim: 128,
            nuisance_amplitude: 0.75,
            descriptor_noise_sigma: 0.05,
            gps_noise_sigma: 0.1,
            appearance_cell: 20.0,
            speed: 10.0,
            seed: 42,
            session: 0,
        }
    }
}

impl WorldConfig {
    fn intersection(&self, idx: usize) -> Result<(f64, f64)> {
        let (rows, cols) = self.grid;
        if idx >= rows * cols {
            return Err(Error::invalid(format!(
                "route waypoint {idx} outside {rows}x{cols} grid"
            )));
        }
        let (r, c) = (idx / cols, idx % cols);
        Ok((c as f64 * self.block_size, r as f64 * self.block_size))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid dimensions must be >= 1");
        }
        if self.appearance_dim == 0 || self.descriptor_dim == 0 || self.laps == 0 {
            return bad("appearance_dim, descriptor_dim and laps must be >= 1");
        }
        for (name, v) in [
            ("block_size", self.block_size),
            ("sample_spacing", self.sample_spacing),
            ("appearance_cell", self.appearance_cell),
            ("speed", self.speed),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("nuisance_amplitude", self.nuisance_amplitude),
            ("descriptor_noise_sigma", self.descriptor_noise_sigma),
            ("gps_noise_sigma", self.gps_noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        if self.route.len() < 2 {
            return bad("route needs at least two waypoints");
        }
        let n = self.route.len();
        let mut edges = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (self.route[i], self.route[(i + 1) % n]);
            let (pa, pb) = (self.intersection(a)?, self.intersection(b)?);
            if a == b || (pa.0 != pb.0 && pa.1 != pb.1) {
                return Err(Error::invalid(format!(
                    "route leg {a} -> {b} is not a straight street segment"
                )));
            }
            edges.push((a, b));
        }
        let repeated = (0..edges.len()).any(|i| edges[i + 1..].contains(&edges[i]));
        if self.laps < 2 && !repeated {
            return bad("route never revisits a street; use laps >= 2");
        }
        Ok(())
    }

    /// Number of samples generated per lap.
    pub fn samples_per_lap(&self) -> Result<usize> {
        let len = self.lap_length()?;
        Ok(((len / self.sample_spacing) - 1e-9).ceil().max(1.0) as usize)
    }

    pub fn lap_length(&self) -> Result<f64> {
        Ok(self.legs()?.iter().map(|l| l.length).sum())
    }

    fn legs(&self) -> Result<Vec<Leg>> {
        let n = self.route.len();
        (0..n)
            .map(|i| {
                let a = self.intersection(self.route[i])?;
                let b = self.intersection(self.route[(i + 1) % n])?;
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                Ok(Leg {
                    start: a,
                    heading: dy.atan2(dx),
                    length: dx.hypot(dy),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Leg {
    start: (f64, f64),
    heading: f64,
    length: f64,
}

fn pose_at(legs: &[Leg], s: f64) -> Pose2 {
    let mut rem = s;
    for leg in legs {
        if rem < leg.length {
            let (sn, cs) = leg.heading.sin_cos();
            return Pose2::from_parts(leg.start.0 + rem * cs, leg.start.1 + rem * sn, leg.heading);
        }
        rem -= leg.length;
    }
    let last = legs.last().expect("route has legs");
    let (sn, cs) = last.heading.sin_cos();
    Pose2::from_parts(
        last.start.0 + last.length * cs,
        last.start.1 + last.length * sn,
        last.heading,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSession {
    pub timestamps: Vec<f64>,
    pub truth_poses: Vec<Pose2>,
    pub gps_rows: Vec<GpsRow>,
    pub descriptor_rows: Vec<DescriptorRecord>,
    /// Sample index pairs `(i, j)`, `i < j`, that revisit the same place
    /// with the same heading.
    pub revisit_pairs: Vec<(usize, usize)>,
}

/// The fixed random pieces shared by every session of one world.
struct WorldModel {
    lattice: Vec<Vec<f64>>,
    lattice_cols: usize,
    lattice_rows: usize,
    origin: (f64, f64),
    cell: f64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    periods: [f64; NUISANCE_CHANNELS],
    input_dim: usize,
}

impl WorldModel {
    fn new(cfg: &WorldConfig) -> Self {
        let base = RngStream::new(cfg.seed);
        let mut rng = base.fork(0);
        let k = cfg.appearance_dim;
        let cell = cfg.appearance_cell;
        let (rows, cols) = cfg.grid;
        let width = (cols.saturating_sub(1)) as f64 * cfg.block_size;
        let height = (rows.saturating_sub(1)) as f64 * cfg.block_size;
        let origin = (-cell, -cell);
        let lattice_cols = ((width + 2.0 * cell) / cell).ceil() as usize + 2;
        let lattice_rows = ((height + 2.0 * cell) / cell).ceil() as usize + 2;
        let lattice = (0..lattice_rows * lattice_cols)
            .map(|_| (0..k).map(|_| rng.normal()).collect())
            .collect();

        let input_dim = k + 2 + NUISANCE_CHANNELS;
        let h = GENERATOR_HIDDEN;
        let s1 = 1.5 / (input_dim as f64).sqrt();
        let w1 = (0..h * input_dim).map(|_| s1 * rng.normal()).collect();
        let b1 = (0..h).map(|_| 0.5 * rng.normal()).collect();
        let s2 = 1.5 / (h as f64).sqrt();
        let w2 = (0..cfg.descriptor_dim * h)
            .map(|_| s2 * rng.normal())
            .collect();
        let mut periods = [0.0; NUISANCE_CHANNELS];
        for p in &mut periods {
            *p = rng.uniform(NUISANCE_PERIOD_RANGE.0, NUISANCE_PERIOD_RANGE.1);
        }
        Self {
            lattice,
            lattice_cols,
            lattice_rows,
            origin,
            cell,
            w1,
            b1,
            w2,
            periods,
            input_dim,
        }
    }

    fn appearance(&self, x: f64, y: f64, out: &mut [f64]) {
        let gx = ((x - self.origin.0) / self.cell).clamp(0.0, (self.lattice_cols - 1) as f64);
        let gy = ((y - self.origin.1) / self.cell).clamp(0.0, (self.lattice_rows - 1) as f64);
        let (c0, r0) = (
            (gx.floor() as usize).min(self.lattice_cols - 2),
            (gy.floor() as usize).min(self.lattice_rows - 2),
        );
        let (fx, fy) = (gx - c0 as f64, gy - r0 as f64);
        let at = |r: usize, c: usize| &self.lattice[r * self.lattice_cols + c];
        let corners = [
            (at(r0, c0), (1.0 - fx) * (1.0 - fy)),
            (at(r0, c0 + 1), fx * (1.0 - fy)),
            (at(r0 + 1, c0), (1.0 - fx) * fy),
            (at(r0 + 1, c0 + 1), fx * fy),
        ];
        for (i, o) in out.iter_mut().enumerate() {
            *o = corners.iter().map(|(v, w)| v[i] * w).sum();
        }
    }

    fn descriptor(&self, input: &[f64], out: &mut [f64]) {
        let h = GENERATOR_HIDDEN;
        let mut hidden = vec![0.0; h];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            let z: f64 = row.iter().zip(input).map(|(w, u)| w * u).sum::<f64>() + self.b1[j];
            *hj = z.max(0.0);
        }
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w2[i * h..(i + 1) * h];
            *o = row
                .iter()
                .zip(&hidden)
                .map(|(w, v)| w * v)
                .sum::<f64>()
                .tanh();
        }
    }
}

pub fn generate_session(cfg: &WorldConfig) -> Result<SyntheticSession> {
    cfg.validate()?;
    let legs = cfg.legs()?;
    let per_lap = cfg.samples_per_lap()?;
    let world = WorldModel::new(cfg);

    let base = RngStream::new(cfg.seed);
    let stream = 1 + 4 * cfg.session;
    let mut gps_rng = base.fork(stream);
    let mut desc_rng = base.fork(stream + 1);
    let mut phase_rng = base.fork(stream + 2);
    let phases: Vec<f64> = (0..NUISANCE_CHANNELS)
        .map(|_| phase_rng.uniform(0.0, TAU))
        .collect();

    let total = per_lap * cfg.laps;
    let dt = cfg.sample_spacing / cfg.speed;
    let k = cfg.appearance_dim;
    let mut input = vec![0.0; world.input_dim];
    let mut timestamps = Vec::with_capacity(total);
    let mut truth = Vec::with_capacity(total);
    let mut gps_rows = Vec::with_capacity(total);
    let mut descriptor_rows = Vec::with_capacity(total);

    for i in 0..total {
        let t = i as f64 * dt;
        let s = (i % per_lap) as f64 * cfg.sample_spacing;
        let pose = pose_at(&legs, s);

        world.appearance(pose.x, pose.y, &mut input[..k]);
        input[k] = pose.theta.cos();
        input[k + 1] = pose.theta.sin();
        for c in 0..NUISANCE_CHANNELS {
            input[k + 2 + c] =
                cfg.nuisance_amplitude * (TAU * t / world.periods[c] + phases[c]).sin();
        }
        let mut d = vec![0.0; cfg.descriptor_dim];
        world.descriptor(&input, &mut d);
        for v in &mut d {
            *v += desc_rng.gaussian(cfg.descriptor_noise_sigma);
        }

        gps_rows.push(GpsRow::Metric {
            t,
            x: pose.x + gps_rng.gaussian(cfg.gps_noise_sigma),
            y: pose.y + gps_rng.gaussian(cfg.gps_noise_sigma),
        });
        descriptor_rows.push(DescriptorRecord {
            timestamp: t,
            vector: d,
        });
        timestamps.push(t);
        truth.push(pose);
    }

    let min_gap = (REVISIT_MIN_TRAVEL / cfg.sample_spacing).ceil() as usize;
    let revisit_pairs = revisits(&truth, min_gap);

    Ok(SyntheticSession {
        timestamps,
        truth_poses: truth,
        gps_rows,
        descriptor_rows,
        revisit_pairs,
    })
}

fn revisits(truth: &[Pose2], min_gap: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..truth.len() {
        for j in i + min_gap..truth.len() {
            if truth[i].translation_distance(&truth[j]) < REVISIT_MAX_DIST
                && wrap(truth[i].theta - truth[j].theta).abs() < REVISIT_MAX_BEARING
            {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TruthLine {
    t: f64,
    x: f64,
    y: f64,
    theta: f64,
}

/// File names used inside a session directory.
pub const DESCRIPTOR_FILE: &str = "descriptors.jsonl";
pub const GPS_FILE: &str = "gps.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

impl SyntheticSession {
    pub fn write(&self, dir: &Path) -> Result<()> {
        ingest::write_descriptors(&dir.join(DESCRIPTOR_FILE), &self.descriptor_rows)?;
        ingest::write_gps(&dir.join(GPS_FILE), &self.gps_rows)?;
        write_truth(&dir.join(TRUTH_FILE), &self.timestamps, &self.truth_poses)
    }
}

pub fn write_truth(path: &Path, timestamps: &[f64], poses: &[Pose2]) -> Result<()> {
    ingest::write_jsonl(
        path,
        timestamps.iter().zip(poses).map(|(&t, p)| TruthLine {
            t,
            x: p.x,
            y: p.y,
            theta: p.theta,
        }),
    )
}

/// Reads a truth file as `(timestamp, pose)` rows.
pub fn read_truth(path: &Path) -> Result<Vec<(f64, Pose2)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: TruthLine = serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok((r.t, Pose2::new(r.x, r.y, r.theta)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> WorldConfig {
        WorldConfig {
            nuisance_amplitude: 0.0,
            descriptor_noise_sigma: 0.0,
            gps_noise_sigma: 0.0,
            ..WorldConfig::default()
        }
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(
            generate_session(&cfg).unwrap(),
            generate_session(&cfg).unwrap()
        );
    }

    #[test]
    fn sessions_share_world_but_not_noise() {
        let a = generate_session(&quiet()).unwrap();
        let b = generate_session(&WorldConfig {
            session: 3,
            ..quiet()
        })
        .unwrap();
        assert_eq!(a.descriptor_rows, b.descriptor_rows);
        let c = generate_session(&WorldConfig::default()).unwrap();
        let d = generate_session(&WorldConfig {
            session: 1,
            ..WorldConfig::default()
        })
        .unwrap();
        assert_ne!(c.gps_rows, d.gps_rows);
        assert_eq!(c.truth_poses, d.truth_poses);
    }

    #[test]
    fn row_counts_follow_route_length() {
        let cfg = WorldConfig::default();
        let s = generate_session(&cfg).unwrap();
        // 4 row streets of 60 m, 3 connectors of 20 m, 60 m return leg
        assert_eq!(cfg.lap_length().unwrap(), 360.0);
        assert_eq!(s.truth_poses.len(), 720);
        assert_eq!(s.gps_rows.len(), 720);
        assert_eq!(s.descriptor_rows.len(), 720);
    }

    #[test]
    fn co_located_samples_match_without_noise() {
        let cfg = quiet();
        let s = generate_session(&cfg).unwrap();
        let per_lap = cfg.samples_per_lap().unwrap();
        for i in 0..per_lap {
            assert_eq!(s.truth_poses[i], s.truth_poses[i + per_lap]);
            assert_eq!(
                s.descriptor_rows[i].vector,
                s.descriptor_rows[i + per_lap].vector
            );
        }
    }

    #[test]
    fn descriptors_depend_on_heading() {
        // Row 1 is driven westbound; row 0 eastbound. Build an eastbound
        // route through row 1 and compare the same spot.
        let east = WorldConfig {
            route: vec![4, 7, 3, 0],
            ..quiet()
        };
        let west = quiet();
        let se = generate_session(&east).unwrap();
        let sw = generate_session(&west).unwrap();
        let spot = |s: &SyntheticSession, x: f64, y: f64, heading: f64| {
            let i = s
                .truth_poses
                .iter()
                .position(|p| {
                    (p.x - x).abs() < 1e-9
                        && (p.y - y).abs() < 1e-9
                        && wrap(p.theta - heading).abs() < 1e-9
                })
                .expect("sample exists");
            s.descriptor_rows[i].vector.clone()
        };
        let a = spot(&se, 30.0, 20.0, 0.0);
        let b = spot(&sw, 30.0, 20.0, PI);
        assert!(dist(&a, &b) > 0.0);
    }

    #[test]
    fn revisits_are_co_located() {
        let s = generate_session(&WorldConfig::default()).unwrap();
        assert!(!s.revisit_pairs.is_empty());
        // brute-force re-scan of the truth poses
        let n = s.truth_poses.len();
        let mut expected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&s.truth_poses[i], &s.truth_poses[j]);
                let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                if j - i >= 50 && d < 5.0 && wrap(a.theta - b.theta).abs() < PI / 6.0 {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(s.revisit_pairs, expected);
    }

    #[test]
    fn gps_noise_statistics() {
        let cfg = WorldConfig {
            gps_noise_sigma: 0.7,
            ..WorldConfig::default()
        };
        let s = generate_session(&cfg).unwrap();
        let errs: Vec<f64> = s
            .gps_rows
            .iter()
            .zip(&s.truth_poses)
            .flat_map(|(g, p)| match *g {
                GpsRow::Metric { x, y, .. } => [x - p.x, y - p.y],
                GpsRow::Geodetic { .. } => unreachable!(),
            })
            .collect();
        assert!(errs.len() >= 1000);
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64).sqrt();
        assert!((sd - 0.7).abs() < 0.2 * 0.7, "sd {sd}");
    }

    #[test]
    fn invalid_routes_rejected() {
        let off_grid = WorldConfig {
            route: vec![0, 3, 99],
            ..WorldConfig::default()
        };
        assert!(generate_session(&off_grid).is_err());
        let diagonal = WorldConfig {
            route: vec![0, 5],
            ..WorldConfig::default()
        };
        assert!(generate_session(&diagonal).is_err());
        let single_lap = WorldConfig {
            laps: 1,
            ..WorldConfig::default()
        };
        assert!(generate_session(&single_lap).is_err());
    }

    #[test]
    fn write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_session(&WorldConfig::default()).unwrap();
        s.write(dir.path()).unwrap();
        let (d, g) = ingest::load_session(
            &dir.path().join(DESCRIPTOR_FILE),
            &dir.path().join(GPS_FILE),
        )
        .unwrap();
        assert_eq!(d, s.descriptor_rows);
        assert_eq!(g, s.gps_rows);
        let truth = read_truth(&dir.path().join(TRUTH_FILE)).unwrap();
        assert_eq!(truth.len(), s.truth_poses.len());
        assert_eq!(truth[5].1, s.truth_poses[5]);
    }
}
