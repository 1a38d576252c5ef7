//! Online loop-closure SLAM over a keyframe sequence: each keyframe is
//! embedded, matched against everything seen so far by ε-NN search, and
//! attached to a pose graph built from noise-injected odometry.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddedDescriptor, EmbeddingModel};
use crate::error::{Error, Result};
use crate::geometry::{wrap, Pose2};
use crate::index::KdIndex;
use crate::ingest::{create_file, Keyframe};
use crate::posegraph::{ate_rmse, inject_noise, NoiseSpec, OptimizeReport, PoseGraph};
use crate::rng::RngStream;

/// A closure is correct when the true poses are this close...
pub const CLOSURE_MAX_DIST: f64 = 20.0;
/// ...and headed within this angle of each other.
pub const CLOSURE_MAX_BEARING: f64 = PI / 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    /// ε-NN radius in embedding space; the model margin when absent.
    pub accept_radius: Option<f64>,
    pub temporal_guard: usize,
    pub reoptimize_every: usize,
    pub noise: NoiseSpec,
    pub max_iters: usize,
    pub tol: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            accept_radius: None,
            temporal_guard: 10,
            reoptimize_every: 10,
            noise: NoiseSpec::default(),
            max_iters: 50,
            tol: 1e-8,
            seed: 42,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.reoptimize_every == 0 || self.max_iters == 0 {
            return Err(Error::invalid(
                "reoptimize_every and max_iters must be >= 1",
            ));
        }
        if let Some(r) = self.accept_radius {
            if !(r >= 0.0) {
                return Err(Error::invalid("accept_radius must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Closure {
    pub i: usize,
    pub j: usize,
    pub embedded_distance: f64,
    pub truth_distance: f64,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlamReport {
    pub truth: Vec<Pose2>,
    pub dead_reckoned: Vec<Pose2>,
    pub optimized: Vec<Pose2>,
    pub closures: Vec<Closure>,
    pub accept_radius: f64,
    pub dead_reckoned_ate: f64,
    pub optimized_ate: f64,
    pub optimizations: usize,
    pub last_optimization: Option<OptimizeReport>,
}

impl SlamReport {
    /// Fraction of accepted closures that are true revisits; 1.0 when none.
    pub fn closure_precision(&self) -> f64 {
        if self.closures.is_empty() {
            return 1.0;
        }
        self.closures.iter().filter(|c| c.correct).count() as f64 / self.closures.len() as f64
    }

    pub fn summary(&self) -> SlamSummary {
        SlamSummary {
            keyframes: self.truth.len(),
            accept_radius: self.accept_radius,
            closures: self.closures.len(),
            correct_closures: self.closures.iter().filter(|c| c.correct).count(),
            closure_precision: self.closure_precision(),
            dead_reckoned_ate: self.dead_reckoned_ate,
            optimized_ate: self.optimized_ate,
            optimizations: self.optimizations,
            final_chi2: self.last_optimization.as_ref().map(|r| r.final_chi2),
            converged: self.last_optimization.as_ref().is_none_or(|r| r.converged),
        }
    }

    /// `node_id,x,y,theta`
    pub fn write_trajectory_csv(path: &Path, poses: &[Pose2]) -> Result<()> {
        let rows = poses
            .iter()
            .enumerate()
            .map(|(k, p)| format!("{k},{},{},{}", p.x, p.y, p.theta));
        write_csv(path, "node_id,x,y,theta", rows)
    }

    /// `i,j,embedded_distance,truth_distance,correct_flag`
    pub fn write_closures_csv(&self, path: &Path) -> Result<()> {
        let rows = self.closures.iter().map(|c| {
            format!(
                "{},{},{},{},{}",
                c.i, c.j, c.embedded_distance, c.truth_distance, c.correct as u8
            )
        });
        write_csv(
            path,
            "i,j,embedded_distance,truth_distance,correct_flag",
            rows,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlamSummary {
    pub keyframes: usize,
    pub accept_radius: f64,
    pub closures: usize,
    pub correct_closures: usize,
    pub closure_precision: f64,
    pub dead_reckoned_ate: f64,
    pub optimized_ate: f64,
    pub optimizations: usize,
    pub final_chi2: Option<f64>,
    pub converged: bool,
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut w = create_file(path)?;
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(w, "{r}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Picks the truth pose nearest in time to each keyframe's descriptor.
pub fn truth_for_keyframes(
    frames: &[Keyframe],
    truth: &[(f64, Pose2)],
    tolerance: f64,
) -> Result<Vec<Pose2>> {
    if truth.is_empty() {
        return Err(Error::EmptyStream("truth".into()));
    }
    frames
        .iter()
        .map(|k| {
            let t = k.descriptor.timestamp;
            let at = truth.partition_point(|(s, _)| *s < t);
            let best = [at.saturating_sub(1), at.min(truth.len() - 1)]
                .into_iter()
                .min_by(|&a, &b| (truth[a].0 - t).abs().total_cmp(&(truth[b].0 - t).abs()))
                .expect("non-empty");
            if (truth[best].0 - t).abs() > tolerance {
                return Err(Error::invalid(format!(
                    "keyframe {} at t={t} has no truth pose within {tolerance} s",
                    k.id
                )));
            }
            Ok(truth[best].1)
        })
        .collect()
}

fn is_true_revisit(a: &Pose2, b: &Pose2) -> bool {
    a.translation_distance(b) < CLOSURE_MAX_DIST
        && wrap((a.theta - b.theta).abs()).abs() < CLOSURE_MAX_BEARING
}

/// Replays the keyframes in order. Odometry between consecutive keyframes
/// is the true relative motion plus Gaussian noise; loop closures join the
/// new keyframe to every earlier one outside the temporal guard whose
/// embedding lies within the accept radius. The graph is re-optimized
/// after every `reoptimize_every` insertions and once at the end.
pub fn run_slam_experiment(
    frames: &[Keyframe],
    truth: &[Pose2],
    model: &EmbeddingModel,
    cfg: &SlamConfig,
) -> Result<SlamReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyStream("keyframes".into()));
    }
    if frames.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} keyframes but {} truth poses",
            frames.len(),
            truth.len()
        )));
    }
    let radius = cfg.accept_radius.unwrap_or_else(|| model.margin());
    let mut rng = RngStream::new(cfg.seed).fork(0x534c_414d);
    let mut index = KdIndex::new(model.output_dim());
    let mut graph = PoseGraph::new(truth[0]);
    let mut dead_reckoned = vec![truth[0]];
    let mut closures = Vec::new();
    let mut optimizations = 0;
    let mut last = None;

    for (k, frame) in frames.iter().enumerate() {
        if k > 0 {
            let measured = inject_noise(&truth[k - 1].relative(&truth[k]), &cfg.noise, &mut rng);
            graph.add_odometry(k - 1, measured, &cfg.noise)?;
            let prev = dead_reckoned[k - 1];
            dead_reckoned.push(prev.compose(&measured));
        }
        let phi = model.forward(&frame.descriptor.vector)?;
        if radius > 0.0 {
            for nb in index.query_radius(&phi, radius)? {
                if k - nb.id <= cfg.temporal_guard {
                    continue;
                }
                graph.add_loop_closure(nb.id, k)?;
                let truth_distance = truth[nb.id].translation_distance(&truth[k]);
                closures.push(Closure {
                    i: nb.id,
                    j: k,
                    embedded_distance: nb.distance,
                    truth_distance,
                    correct: is_true_revisit(&truth[nb.id], &truth[k]),
                });
            }
        }
        index.insert(&EmbeddedDescriptor {
            keyframe_id: k,
            phi,
        })?;
        if (k + 1) % cfg.reoptimize_every == 0 && graph.loop_count() > 0 {
            last = Some(graph.optimize(cfg.max_iters, cfg.tol)?);
            optimizations += 1;
        }
    }
    if graph.loop_count() > 0 {
        last = Some(graph.optimize(cfg.max_iters, cfg.tol)?);
        optimizations += 1;
    }

    let optimized = graph.nodes().to_vec();
    Ok(SlamReport {
        dead_reckoned_ate: ate_rmse(&dead_reckoned, truth)?,
        optimized_ate: ate_rmse(&optimized, truth)?,
        truth: truth.to_vec(),
        dead_reckoned,
        optimized,
        closures,
        accept_radius: radius,
        optimizations,
        last_optimization: last,
    })
}
