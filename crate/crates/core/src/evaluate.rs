//! Loop-closure retrieval metrics: precision-recall sweeps, embedding
//! distance histograms and raw-versus-learned comparisons.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::geometry::wrap;
use crate::index::KdIndex;
use crate::ingest::{create_file, GpsFix, Keyframe};
use crate::supervision::euclidean;

/// Heading agreement required of a bearing-aware match.
pub const MATCH_BEARING: f64 = PI / 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthRule {
    /// Pairs closer than this (meters) are true loop closures.
    pub dist_thresh: f64,
    pub bearing_aware: bool,
    /// Histogram negatives are at least this far apart (meters).
    pub neg_floor: f64,
}

impl Default for GroundTruthRule {
    fn default() -> Self {
        Self {
            dist_thresh: 20.0,
            bearing_aware: true,
            neg_floor: 50.0,
        }
    }
}

impl GroundTruthRule {
    pub fn validate(&self) -> Result<()> {
        if self.dist_thresh > 0.0 && self.neg_floor > self.dist_thresh {
            Ok(())
        } else {
            Err(Error::invalid("need 0 < dist_thresh < neg_floor"))
        }
    }

    pub fn is_match(&self, a: &GpsFix, b: &GpsFix) -> bool {
        a.distance(b) < self.dist_thresh
            && (!self.bearing_aware || wrap((a.bearing - b.bearing).abs()).abs() < MATCH_BEARING)
    }

    pub fn is_far(&self, a: &GpsFix, b: &GpsFix) -> bool {
        a.distance(b) >= self.neg_floor
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// A candidate pair with its embedded distance and ground-truth label.
#[derive(Clone, Copy, Debug)]
struct ScoredPair {
    distance: f64,
    positive: bool,
}

/// Pairs `i < j` more than `guard` keyframes apart.
fn guarded_pairs(n: usize, guard: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + guard + 1..n).map(move |j| (i, j)))
}

fn check_aligned(frames: &[Keyframe], embeddings: &[Vec<f64>]) -> Result<()> {
    if frames.len() != embeddings.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} embeddings",
            frames.len(),
            embeddings.len()
        )));
    }
    Ok(())
}

fn score_within(
    frames: &[Keyframe],
    embeddings: &[Vec<f64>],
    rule: &GroundTruthRule,
    guard: usize,
) -> Result<Vec<ScoredPair>> {
    check_aligned(frames, embeddings)?;
    Ok(guarded_pairs(frames.len(), guard)
        .map(|(i, j)| ScoredPair {
            distance: euclidean(&embeddings[i], &embeddings[j]),
            positive: rule.is_match(&frames[i].fix, &frames[j].fix),
        })
        .collect())
}

fn curve_from_scores(mut scored: Vec<ScoredPair>, sweep: &[f64]) -> Result<PrCurve> {
    if sweep.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("threshold sweep must be ascending"));
    }
    let total_pos = scored.iter().filter(|s| s.positive).count();
    if total_pos == 0 {
        return Err(Error::invalid(
            "undefined recall: no ground-truth positive pairs",
        ));
    }
    scored.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let mut points = Vec::with_capacity(sweep.len());
    let (mut cursor, mut proposed, mut correct) = (0usize, 0usize, 0usize);
    for &tau in sweep {
        while cursor < scored.len() && scored[cursor].distance <= tau {
            proposed += 1;
            correct += scored[cursor].positive as usize;
            cursor += 1;
        }
        points.push(PrPoint {
            threshold: tau,
            precision: if proposed == 0 {
                1.0
            } else {
                correct as f64 / proposed as f64
            },
            recall: correct as f64 / total_pos as f64,
        });
    }
    let auc = trapezoid_auc(&points);
    Ok(PrCurve { points, auc })
}

/// Area under precision as a function of recall, trapezoid rule, starting
/// from recall 0 at the first point's precision.
pub fn trapezoid_auc(points: &[PrPoint]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let (mut r0, mut p0) = (0.0, first.precision);
    let mut area = 0.0;
    for p in points {
        area += (p.recall - r0) * 0.5 * (p.precision + p0);
        r0 = p.recall;
        p0 = p.precision;
    }
    area.clamp(0.0, 1.0)
}

/// Precision-recall over all guarded pairs of one session, proposing a
/// pair whenever its embedded distance is within each sweep threshold.
pub fn pr_curve(
    frames: &[Keyframe],
    embeddings: &[Vec<f64>],
    rule: &GroundTruthRule,
    temporal_guard: usize,
    sweep: &[f64],
) -> Result<PrCurve> {
    curve_from_scores(
        score_within(frames, embeddings, rule, temporal_guard)?,
        sweep,
    )
}

/// Precision-recall between a query session and a separate database
/// session; every cross pair is a candidate.
pub fn pr_curve_across(
    query: &[Keyframe],
    query_emb: &[Vec<f64>],
    db: &[Keyframe],
    db_emb: &[Vec<f64>],
    rule: &GroundTruthRule,
    sweep: &[f64],
) -> Result<PrCurve> {
    check_aligned(query, query_emb)?;
    check_aligned(db, db_emb)?;
    let scored = query
        .iter()
        .zip(query_emb)
        .flat_map(|(q, qe)| {
            db.iter().zip(db_emb).map(move |(d, de)| ScoredPair {
                distance: euclidean(qe, de),
                positive: rule.is_match(&q.fix, &d.fix),
            })
        })
        .collect();
    curve_from_scores(scored, sweep)
}

/// Rank-based variant: each keyframe proposes its `k` nearest guarded
/// neighbours, found through the KD-tree. The curve's `threshold` column
/// holds `k`.
pub fn pr_curve_knn(
    frames: &[Keyframe],
    embeddings: &[Vec<f64>],
    rule: &GroundTruthRule,
    temporal_guard: usize,
    ks: &[usize],
) -> Result<PrCurve> {
    check_aligned(frames, embeddings)?;
    if ks.windows(2).any(|w| w[1] < w[0]) || ks.first() == Some(&0) {
        return Err(Error::invalid("k sweep must be ascending and >= 1"));
    }
    let n = frames.len();
    let total_pos = guarded_pairs(n, temporal_guard)
        .filter(|&(i, j)| rule.is_match(&frames[i].fix, &frames[j].fix))
        .count();
    if total_pos == 0 {
        return Err(Error::invalid(
            "undefined recall: no ground-truth positive pairs",
        ));
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    let entries: Vec<_> = embeddings
        .iter()
        .enumerate()
        .map(|(i, phi)| crate::embedding::EmbeddedDescriptor {
            keyframe_id: i,
            phi: phi.clone(),
        })
        .collect();
    let index = KdIndex::from_entries(dim, &entries)?;
    let kmax = ks.last().copied().unwrap_or(1);
    // up to 2·guard + 1 neighbours can be excluded by the guard
    let fetch = kmax + 2 * temporal_guard + 1;
    let ranked: Vec<Vec<usize>> = embeddings
        .iter()
        .enumerate()
        .map(|(i, q)| {
            Ok(index
                .query_knn(q, fetch)?
                .into_iter()
                .filter(|nb| nb.id.abs_diff(i) > temporal_guard)
                .map(|nb| nb.id)
                .take(kmax)
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut proposals: Vec<(usize, usize)> = ranked
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().take(k).map(move |&j| (i.min(j), i.max(j))))
            .collect();
        proposals.sort_unstable();
        proposals.dedup();
        let correct = proposals
            .iter()
            .filter(|&&(i, j)| rule.is_match(&frames[i].fix, &frames[j].fix))
            .count();
        points.push(PrPoint {
            threshold: k as f64,
            precision: if proposals.is_empty() {
                1.0
            } else {
                correct as f64 / proposals.len() as f64
            },
            recall: correct as f64 / total_pos as f64,
        });
    }
    let auc = trapezoid_auc(&points);
    Ok(PrCurve { points, auc })
}

/// `steps + 1` evenly spaced thresholds from 0 to `max`.
pub fn linear_sweep(max: f64, steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|k| max * k as f64 / steps as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    /// `bins + 1` shared edges over `[0, max observed distance]`.
    pub edges: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub overlap: f64,
}

/// Σ_b min(p_b, n_b).
pub fn histogram_overlap(p: &[f64], n: &[f64]) -> f64 {
    p.iter().zip(n).map(|(a, b)| a.min(*b)).sum()
}

fn normalized_histogram(values: &[f64], max: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let b = if max > 0.0 {
            ((v / max * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        h[b] += 1.0;
    }
    let total = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= total);
    h
}

/// Embedded-distance histograms of same-place pairs (closer than the match
/// rule) and far pairs (at least `neg_floor` apart).
pub fn distance_histograms(
    frames: &[Keyframe],
    embeddings: &[Vec<f64>],
    rule: &GroundTruthRule,
    temporal_guard: usize,
    bins: usize,
) -> Result<Histograms> {
    check_aligned(frames, embeddings)?;
    if bins == 0 {
        return Err(Error::invalid("bins must be >= 1"));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (i, j) in guarded_pairs(frames.len(), temporal_guard) {
        let (a, b) = (&frames[i].fix, &frames[j].fix);
        if rule.is_match(a, b) {
            pos.push(euclidean(&embeddings[i], &embeddings[j]));
        } else if rule.is_far(a, b) {
            neg.push(euclidean(&embeddings[i], &embeddings[j]));
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "histograms need both classes (have {} positive, {} negative pairs)",
            pos.len(),
            neg.len()
        )));
    }
    let max = pos.iter().chain(&neg).copied().fold(0.0, f64::max);
    let edges = linear_sweep(max, bins);
    let positive = normalized_histogram(&pos, max, bins);
    let negative = normalized_histogram(&neg, max, bins);
    let overlap = histogram_overlap(&positive, &negative);
    Ok(Histograms {
        edges,
        positive,
        negative,
        overlap,
    })
}

/// Precision and recall of fixed-radius retrieval at one distance.
pub fn precision_recall_at(
    frames: &[Keyframe],
    embeddings: &[Vec<f64>],
    rule: &GroundTruthRule,
    temporal_guard: usize,
    radius: f64,
) -> Result<PrPoint> {
    let curve = pr_curve(frames, embeddings, rule, temporal_guard, &[radius])?;
    Ok(curve.points[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceMetrics {
    pub pr: PrCurve,
    pub histograms: Histograms,
    pub auc: f64,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceComparison {
    pub raw: SpaceMetrics,
    pub learned: SpaceMetrics,
    /// Fixed-radius retrieval in the learned space at the model margin.
    pub learned_at_margin: PrPoint,
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rule: GroundTruthRule,
    pub temporal_guard: usize,
    pub sweep_steps: usize,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rule: GroundTruthRule::default(),
            temporal_guard: 10,
            sweep_steps: 200,
            bins: 50,
        }
    }
}

fn space_metrics(frames: &[Keyframe], emb: &[Vec<f64>], cfg: &EvalConfig) -> Result<SpaceMetrics> {
    let max = guarded_pairs(frames.len(), cfg.temporal_guard)
        .map(|(i, j)| euclidean(&emb[i], &emb[j]))
        .fold(0.0, f64::max);
    let pr = pr_curve(
        frames,
        emb,
        &cfg.rule,
        cfg.temporal_guard,
        &linear_sweep(max, cfg.sweep_steps),
    )?;
    let histograms = distance_histograms(frames, emb, &cfg.rule, cfg.temporal_guard, cfg.bins)?;
    Ok(SpaceMetrics {
        auc: pr.auc,
        overlap: histograms.overlap,
        pr,
        histograms,
    })
}

/// Runs the PR sweep and histogram analysis on the raw descriptors and on
/// their embeddings. Each space is swept from 0 to its own largest pair
/// distance.
pub fn compare_spaces(
    frames: &[Keyframe],
    model: &EmbeddingModel,
    cfg: &EvalConfig,
) -> Result<SpaceComparison> {
    let raw: Vec<Vec<f64>> = frames.iter().map(|k| k.descriptor.vector.clone()).collect();
    let learned: Vec<Vec<f64>> = raw
        .iter()
        .map(|d| model.forward(d))
        .collect::<Result<_>>()?;
    Ok(SpaceComparison {
        raw: space_metrics(frames, &raw, cfg)?,
        learned_at_margin: precision_recall_at(
            frames,
            &learned,
            &cfg.rule,
            cfg.temporal_guard,
            model.margin(),
        )?,
        learned: space_metrics(frames, &learned, cfg)?,
        margin: model.margin(),
    })
}

impl SpaceComparison {
    /// `space,threshold,precision,recall`
    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let mut w = create_file(path)?;
        let mut lines = vec!["space,threshold,precision,recall".to_string()];
        for (name, m) in [("raw", &self.raw), ("learned", &self.learned)] {
            for p in &m.pr.points {
                lines.push(format!(
                    "{name},{},{},{}",
                    p.threshold, p.precision, p.recall
                ));
            }
        }
        writeln!(w, "{}", lines.join("\n"))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// `space,bin_left,bin_right,pos_mass,neg_mass`
    pub fn write_hist_csv(&self, path: &Path) -> Result<()> {
        let mut w = create_file(path)?;
        let mut lines = vec!["space,bin_left,bin_right,pos_mass,neg_mass".to_string()];
        for (name, m) in [("raw", &self.raw), ("learned", &self.learned)] {
            let h = &m.histograms;
            for b in 0..h.positive.len() {
                lines.push(format!(
                    "{name},{},{},{},{}",
                    h.edges[b],
                    h.edges[b + 1],
                    h.positive[b],
                    h.negative[b]
                ));
            }
        }
        writeln!(w, "{}", lines.join("\n"))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Greyscale rendering of an embedding distance matrix, bright = close.
pub fn write_distance_pgm(path: &Path, embeddings: &[Vec<f64>]) -> Result<()> {
    let n = embeddings.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclidean(&embeddings[i], &embeddings[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let max = d.iter().copied().fold(0.0, f64::max);
    let sim: Vec<f64> = d
        .iter()
        .map(|v| if max > 0.0 { 1.0 - v / max } else { 1.0 })
        .collect();
    crate::supervision::write_pgm(path, n, &sim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DescriptorRecord;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn frame(id: usize, x: f64, y: f64, bearing: f64) -> Keyframe {
        Keyframe {
            id,
            descriptor: DescriptorRecord {
                timestamp: id as f64,
                vector: vec![x, y],
            },
            fix: GpsFix {
                bearing,
                ..GpsFix::new(id as f64, x, y)
            },
        }
    }

    /// 10 frames: two passes over five spots 100 m apart, eastbound.
    fn toy() -> Vec<Keyframe> {
        (0..10)
            .map(|i| frame(i, 100.0 * (i % 5) as f64 + 0.5 * (i / 5) as f64, 0.0, 0.0))
            .collect()
    }

    /// Quadratic-scan reference: recount every threshold from scratch.
    fn oracle(
        frames: &[Keyframe],
        emb: &[Vec<f64>],
        rule: &GroundTruthRule,
        guard: usize,
        tau: f64,
    ) -> (f64, f64) {
        let (mut proposed, mut correct, mut total) = (0, 0, 0);
        for i in 0..frames.len() {
            for j in 0..frames.len() {
                if j <= i || j - i <= guard {
                    continue;
                }
                let d: f64 = emb[i]
                    .iter()
                    .zip(&emb[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let gd = ((frames[i].fix.x - frames[j].fix.x).powi(2)
                    + (frames[i].fix.y - frames[j].fix.y).powi(2))
                .sqrt();
                let bd = wrap((frames[i].fix.bearing - frames[j].fix.bearing).abs()).abs();
                let pos = gd < rule.dist_thresh && (!rule.bearing_aware || bd < PI / 6.0);
                total += pos as usize;
                if d <= tau {
                    proposed += 1;
                    correct += pos as usize;
                }
            }
        }
        let p = if proposed == 0 {
            1.0
        } else {
            correct as f64 / proposed as f64
        };
        (p, correct as f64 / total as f64)
    }

    #[test]
    fn gps_embedding_gives_perfect_precision() {
        let frames = toy();
        let emb: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| vec![f.fix.x, f.fix.y, 0.0, 0.0])
            .collect();
        let rule = GroundTruthRule::default();
        let sweep = linear_sweep(500.0, 100);
        let c = pr_curve(&frames, &emb, &rule, 0, &sweep).unwrap();
        for p in c.points.iter().filter(|p| p.threshold < rule.neg_floor) {
            assert_eq!(p.precision, 1.0);
        }
        assert_eq!(c.points.last().unwrap().recall, 1.0);
        for (p, &tau) in c.points.iter().zip(&sweep) {
            let (op, or) = oracle(&frames, &emb, &rule, 0, tau);
            assert_eq!((p.precision, p.recall), (op, or));
        }
    }

    #[test]
    fn zero_threshold_proposes_nothing() {
        let frames = toy();
        let emb: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let c = pr_curve(&frames, &emb, &GroundTruthRule::default(), 0, &[0.0]).unwrap();
        assert_eq!((c.points[0].precision, c.points[0].recall), (1.0, 0.0));
    }

    #[test]
    fn huge_threshold_gives_base_rate() {
        let frames = toy();
        let mut rng = RngStream::new(4);
        let emb: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let c = pr_curve(&frames, &emb, &GroundTruthRule::default(), 1, &[1e9]).unwrap();
        // guard 1 over 10 frames: 36 pairs, 5 of them repeat visits
        assert_eq!(c.points[0].recall, 1.0);
        assert_eq!(c.points[0].precision, 5.0 / 36.0);
    }

    #[test]
    fn no_positives_is_an_error() {
        let frames: Vec<_> = (0..5)
            .map(|i| frame(i, 100.0 * i as f64, 0.0, 0.0))
            .collect();
        let emb: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let err = pr_curve(&frames, &emb, &GroundTruthRule::default(), 0, &[1.0]).unwrap_err();
        assert!(err.to_string().contains("undefined recall"));
        assert!(pr_curve(
            &toy(),
            &vec![vec![0.0]; 10],
            &GroundTruthRule::default(),
            0,
            &[2.0, 1.0]
        )
        .is_err());
    }

    #[test]
    fn bearing_aware_rule() {
        let rule = GroundTruthRule::default();
        let a = frame(0, 0.0, 0.0, 0.0).fix;
        assert!(rule.is_match(&a, &frame(1, 5.0, 0.0, 0.2).fix));
        assert!(!rule.is_match(&a, &frame(1, 5.0, 0.0, PI).fix));
        let blind = GroundTruthRule {
            bearing_aware: false,
            ..rule
        };
        assert!(blind.is_match(&a, &frame(1, 5.0, 0.0, PI).fix));
    }

    #[test]
    fn histogram_overlap_limits() {
        let frames = toy();
        let rule = GroundTruthRule::default();
        // identical embedding for everyone: both classes land in bin 0
        let same = vec![vec![1.0, 1.0]; 10];
        let h = distance_histograms(&frames, &same, &rule, 0, 10).unwrap();
        assert_eq!(h.overlap, 1.0);
        // GPS positions as embeddings: positives < 1 m, negatives >= 100 m
        let gps: Vec<Vec<f64>> = frames.iter().map(|f| vec![f.fix.x, f.fix.y]).collect();
        let h = distance_histograms(&frames, &gps, &rule, 0, 10).unwrap();
        assert_eq!(h.overlap, 0.0);
        assert!((h.positive.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((h.negative.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(
            histogram_overlap(&h.positive, &h.negative),
            histogram_overlap(&h.negative, &h.positive)
        );
    }

    #[test]
    fn identity_model_gives_identical_spaces() {
        let frames = toy();
        let model = EmbeddingModel::identity(2, 1.0).unwrap();
        let c = compare_spaces(
            &frames,
            &model,
            &EvalConfig {
                temporal_guard: 0,
                ..EvalConfig::default()
            },
        )
        .unwrap();
        assert_eq!(c.raw, c.learned);
        let again = compare_spaces(
            &frames,
            &model,
            &EvalConfig {
                temporal_guard: 0,
                ..EvalConfig::default()
            },
        )
        .unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn knn_sweep_matches_brute_force_ranks() {
        let frames = toy();
        let emb: Vec<Vec<f64>> = frames.iter().map(|f| vec![f.fix.x, f.fix.y]).collect();
        let c = pr_curve_knn(&frames, &emb, &GroundTruthRule::default(), 1, &[1, 2]).unwrap();
        // nearest guarded neighbour of every frame is its repeat visit
        assert_eq!(c.points[0].precision, 1.0);
        assert_eq!(c.points[0].recall, 1.0);
        assert!(c.points[1].precision < 1.0);
    }

    #[test]
    fn across_sessions() {
        let a = toy();
        let b: Vec<_> = (0..5)
            .map(|i| frame(i, 100.0 * i as f64 + 1.0, 0.0, 0.0))
            .collect();
        let ea: Vec<Vec<f64>> = a.iter().map(|f| vec![f.fix.x]).collect();
        let eb: Vec<Vec<f64>> = b.iter().map(|f| vec![f.fix.x]).collect();
        let c = pr_curve_across(&a, &ea, &b, &eb, &GroundTruthRule::default(), &[5.0]).unwrap();
        assert_eq!((c.points[0].precision, c.points[0].recall), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn agrees_with_quadratic_oracle(
            pts in proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64, -3.0..3.0f64, -2.0..2.0f64, -2.0..2.0f64), 2..50),
            guard in 0usize..3,
            aware in any::<bool>(),
        ) {
            let frames: Vec<_> = pts.iter().enumerate().map(|(i, p)| frame(i, p.0, p.1, p.2)).collect();
            let emb: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.3, p.4]).collect();
            let rule = GroundTruthRule { bearing_aware: aware, ..GroundTruthRule::default() };
            let sweep = linear_sweep(6.0, 30);
            let Ok(c) = pr_curve(&frames, &emb, &rule, guard, &sweep) else {
                return Ok(());
            };
            let mut prev = 0.0;
            for (p, &tau) in c.points.iter().zip(&sweep) {
                prop_assert!(p.recall >= prev);
                prev = p.recall;
                prop_assert!((0.0..=1.0).contains(&p.precision));
                let (op, or) = oracle(&frames, &emb, &rule, guard, tau);
                prop_assert_eq!((p.precision, p.recall), (op, or));
            }
            prop_assert!((0.0..=1.0).contains(&c.auc));
        }
    }
}
