//! The command implementations behind the `placerec` binary. Every
//! command reads a [`RunConfig`] and writes fixed-name artifacts under the
//! output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Proposal, RunConfig};
use crate::embedding::{train_observed, EmbeddingModel};
use crate::error::{Error, Result};
use crate::evaluate::{compare_spaces, pr_curve_knn, write_distance_pgm, PrPoint};
use crate::geometry::Pose2;
use crate::ingest::{self, Keyframe};
use crate::slam::{run_slam_experiment, truth_for_keyframes, SlamReport, SlamSummary};
use crate::supervision::{label_sessions, self_similarity};
use crate::synthworld::{generate_session, read_truth, DESCRIPTOR_FILE, GPS_FILE, TRUTH_FILE};

pub const MODEL_FILE: &str = "model.json";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const TRAIN_SIMILARITY_FILE: &str = "similarity_train.pgm";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const KEYFRAMES_FILE: &str = "keyframes.jsonl";
pub const PR_CURVE_FILE: &str = "pr_curve.csv";
pub const HIST_FILE: &str = "hist.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const TEST_SIMILARITY_FILE: &str = "similarity_test.pgm";
pub const RAW_DISTANCE_FILE: &str = "distance_raw.pgm";
pub const LEARNED_DISTANCE_FILE: &str = "distance_learned.pgm";
pub const TRUTH_TRAJECTORY_FILE: &str = "trajectory_truth.csv";
pub const DEAD_RECKONED_FILE: &str = "trajectory_dead_reckoned.csv";
pub const OPTIMIZED_FILE: &str = "trajectory_optimized.csv";
pub const CLOSURES_FILE: &str = "closures.csv";
pub const SLAM_SUMMARY_FILE: &str = "slam_summary.json";

/// Timestamp tolerance when matching keyframes to truth poses, seconds.
const TRUTH_TOLERANCE: f64 = 0.05;
/// Similarity snapshots taken during training, evenly spaced in epochs.
const SNAPSHOTS: usize = 4;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    let mut w = ingest::create_file(path)?;
    std::io::Write::write_all(&mut w, (text + "\n").as_bytes())
        .and_then(|_| std::io::Write::flush(&mut w))
        .map_err(|e| Error::io(path, e))
}

pub fn session_dir(out_dir: &Path, session: u64) -> PathBuf {
    out_dir.join("sessions").join(format!("s{session}"))
}

fn train_dirs(cfg: &RunConfig, out: &Path) -> Vec<PathBuf> {
    match &cfg.paths.train_sessions {
        Some(list) => list.clone(),
        None => cfg
            .sessions
            .train
            .iter()
            .map(|&s| session_dir(out, s))
            .collect(),
    }
}

fn test_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.paths
        .test_session
        .clone()
        .unwrap_or_else(|| session_dir(out, cfg.sessions.test))
}

/// Keyframes of one session directory.
pub fn load_session_keyframes(dir: &Path, cfg: &RunConfig) -> Result<Vec<Keyframe>> {
    ingest::load_keyframes(
        &dir.join(DESCRIPTOR_FILE),
        &dir.join(GPS_FILE),
        &cfg.keyframes,
    )
}

/// Truth poses for the keyframes of a session: `truth.jsonl` when the
/// directory has one, otherwise the GPS fixes with their bearings.
pub fn session_truth(dir: &Path, frames: &[Keyframe]) -> Result<Vec<Pose2>> {
    let path = dir.join(TRUTH_FILE);
    if path.exists() {
        truth_for_keyframes(frames, &read_truth(&path)?, TRUTH_TOLERANCE)
    } else {
        frames
            .iter()
            .map(|k| Pose2::new(k.fix.x, k.fix.y, k.fix.bearing))
            .collect()
    }
}

/// Writes every configured synthetic session (training and test) under
/// `out_dir/sessions/s<k>`. Returns the session directories.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut ids = cfg.sessions.train.clone();
    ids.push(cfg.sessions.test);
    ids.iter()
        .map(|&s| {
            let dir = session_dir(out, s);
            generate_session(&cfg.world_for(s))?.write(&dir)?;
            Ok(dir)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub sessions: usize,
    pub keyframes: usize,
    pub positives: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

/// Labels the training sessions, trains the embedding and writes the
/// checkpoint, the loss trace and similarity snapshots.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let dirs = train_dirs(cfg, out);
    let sessions: Vec<Vec<Keyframe>> = dirs
        .iter()
        .map(|d| load_session_keyframes(d, cfg))
        .collect::<Result<_>>()?;
    let (frames, pairs) = label_sessions(&sessions, &cfg.kernel, &cfg.labels, cfg.temporal_guard);
    if pairs.positives.is_empty() || pairs.negatives.is_empty() {
        return Err(Error::invalid(format!(
            "labeling produced {} positives (similarity > tau_p = {:?}) and {} negatives \
             (similarity < tau_n = {:?}); adjust labels.tau_p / labels.tau_n or supply sessions that revisit places",
            pairs.positives.len(),
            cfg.labels.tau_p,
            pairs.negatives.len(),
            cfg.labels.tau_n
        )));
    }
    let descriptors: Vec<Vec<f64>> = frames.iter().map(|k| k.descriptor.vector.clone()).collect();
    let input_dim = descriptors[0].len();
    let model = EmbeddingModel::new(input_dim, &cfg.model, cfg.model_seed())?;
    self_similarity(&sessions[0], &cfg.kernel).write_pgm(&out.join(TRAIN_SIMILARITY_FILE))?;

    let tcfg = cfg.train_config();
    let snapshot_every = tcfg.epochs.div_ceil(SNAPSHOTS).max(1);
    let first: Vec<&[f64]> = sessions[0]
        .iter()
        .map(|k| k.descriptor.vector.as_slice())
        .collect();
    let snapshot = |epoch: usize, m: &EmbeddingModel| -> Result<()> {
        let emb: Vec<Vec<f64>> = first.iter().map(|d| m.forward(d)).collect::<Result<_>>()?;
        write_distance_pgm(
            &out.join(SNAPSHOT_DIR).join(format!("epoch_{epoch:05}.pgm")),
            &emb,
        )
    };
    snapshot(0, &model)?;
    let (model, trace) = train_observed(&model, &pairs, &descriptors, &tcfg, |epoch, m, _| {
        if epoch % snapshot_every == 0 || epoch == tcfg.epochs {
            snapshot(epoch, m)?;
        }
        Ok(())
    })?;

    let echo = serde_json::json!({
        "seed": cfg.seed,
        "temporal_guard": cfg.temporal_guard,
        "keyframes": cfg.keyframes,
        "kernel": cfg.kernel,
        "labels": cfg.labels,
        "model": cfg.model,
        "train": cfg.train,
    });
    model.save(&out.join(MODEL_FILE), Some(echo))?;
    let rows = trace
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{},{l}", e + 1));
    write_lines(&out.join(LOSS_TRACE_FILE), "epoch,mean_loss", rows)?;
    let summary = TrainSummary {
        sessions: sessions.len(),
        keyframes: frames.len(),
        positives: pairs.positives.len(),
        negatives: pairs.negatives.len(),
        epochs: trace.len(),
        first_epoch_loss: trace[0],
        final_epoch_loss: *trace.last().expect("at least one epoch"),
    };
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut w = ingest::create_file(path)?;
    let mut emit = |line: &str| std::io::Write::write_all(&mut w, format!("{line}\n").as_bytes());
    emit(header).map_err(|e| Error::io(path, e))?;
    for r in rows {
        emit(&r).map_err(|e| Error::io(path, e))?;
    }
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSummary {
    pub auc: f64,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub keyframes: usize,
    pub proposal: Proposal,
    pub raw: SpaceSummary,
    pub learned: SpaceSummary,
    pub margin: f64,
    pub learned_at_margin: PrPoint,
}

fn load_checkpoint(path: &Path, frames: &[Keyframe]) -> Result<EmbeddingModel> {
    let model = EmbeddingModel::load(path)?;
    if let Some(k) = frames
        .iter()
        .find(|k| k.descriptor.vector.len() != model.input_dim())
    {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            actual: k.descriptor.vector.len(),
            location: None,
        });
    }
    Ok(model)
}

fn checkpoint_path(out: &Path, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| out.join(MODEL_FILE), Path::to_path_buf)
}

/// Compares raw and learned spaces on the held-out session.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let dir = test_dir(cfg, out);
    let frames = load_session_keyframes(&dir, cfg)?;
    let model = load_checkpoint(&checkpoint_path(out, checkpoint), &frames)?;
    let ecfg = cfg.eval_config();
    let mut cmp = compare_spaces(&frames, &model, &ecfg)?;
    let raw: Vec<Vec<f64>> = frames.iter().map(|k| k.descriptor.vector.clone()).collect();
    let learned: Vec<Vec<f64>> = raw
        .iter()
        .map(|d| model.forward(d))
        .collect::<Result<_>>()?;
    if cfg.eval.proposal == Proposal::Knn {
        let ks: Vec<usize> = (1..=cfg.eval.knn_max).collect();
        for (space, emb) in [(&mut cmp.raw, &raw), (&mut cmp.learned, &learned)] {
            space.pr = pr_curve_knn(&frames, emb, &ecfg.rule, ecfg.temporal_guard, &ks)?;
            space.auc = space.pr.auc;
        }
    }
    ingest::write_keyframes(&out.join(KEYFRAMES_FILE), &frames)?;
    cmp.write_pr_csv(&out.join(PR_CURVE_FILE))?;
    cmp.write_hist_csv(&out.join(HIST_FILE))?;
    self_similarity(&frames, &cfg.kernel).write_pgm(&out.join(TEST_SIMILARITY_FILE))?;
    write_distance_pgm(&out.join(RAW_DISTANCE_FILE), &raw)?;
    write_distance_pgm(&out.join(LEARNED_DISTANCE_FILE), &learned)?;
    let summary = EvalSummary {
        keyframes: frames.len(),
        proposal: cfg.eval.proposal,
        raw: SpaceSummary {
            auc: cmp.raw.auc,
            overlap: cmp.raw.overlap,
        },
        learned: SpaceSummary {
            auc: cmp.learned.auc,
            overlap: cmp.learned.overlap,
        },
        margin: cmp.margin,
        learned_at_margin: cmp.learned_at_margin,
    };
    write_json(&out.join(EVAL_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Runs the loop-closure SLAM experiment on the held-out session.
pub fn cmd_slam(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<SlamSummary> {
    let dir = test_dir(cfg, out);
    let frames = load_session_keyframes(&dir, cfg)?;
    let model = load_checkpoint(&checkpoint_path(out, checkpoint), &frames)?;
    let truth = session_truth(&dir, &frames)?;
    let report = run_slam_experiment(&frames, &truth, &model, &cfg.slam_config(None))?;
    write_slam_outputs(&report, out)?;
    let summary = report.summary();
    write_json(&out.join(SLAM_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn write_slam_outputs(report: &SlamReport, out: &Path) -> Result<()> {
    SlamReport::write_trajectory_csv(&out.join(TRUTH_TRAJECTORY_FILE), &report.truth)?;
    SlamReport::write_trajectory_csv(&out.join(DEAD_RECKONED_FILE), &report.dead_reckoned)?;
    SlamReport::write_trajectory_csv(&out.join(OPTIMIZED_FILE), &report.optimized)?;
    report.write_closures_csv(&out.join(CLOSURES_FILE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub train: TrainSummary,
    pub eval: EvalSummary,
    pub slam: SlamSummary,
}

/// generate, train, eval and slam in sequence; stops at the first error.
pub fn cmd_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineSummary> {
    cmd_generate(cfg, out)?;
    let train = cmd_train(cfg, out)?;
    let eval = cmd_eval(cfg, out, None)?;
    let slam = cmd_slam(cfg, out, None)?;
    Ok(PipelineSummary { train, eval, slam })
}
