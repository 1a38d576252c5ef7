//! GPS similarity kernel, self-similarity matrices, pair labeling and
//! distance-weighted batch sampling.

use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap;
use crate::ingest::{create_file, GpsFix, Keyframe};
use crate::rng::RngStream;

/// Offset added to raw descriptor distances before inversion.
const INVERSE_DISTANCE_EPS: f64 = 1e-6;
const WEIGHT_CLAMP_LO: f64 = 0.1;
const WEIGHT_CLAMP_HI: f64 = 10.0;

/// Bandwidths of the translation and rotation Gaussians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    /// 1/m²
    pub gamma_t: f64,
    /// 1/rad²
    pub gamma_r: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        let frustum = std::f64::consts::PI / 6.0;
        Self {
            gamma_t: 1.0 / (2.0 * 10.0 * 10.0),
            gamma_r: 1.0 / (2.0 * frustum * frustum),
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_t > 0.0 && self.gamma_r > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("kernel bandwidths must be positive"))
        }
    }
}

/// Product of a translation and a (wrap-aware) rotation Gaussian.
pub fn kernel(zi: &GpsFix, zj: &GpsFix, p: &KernelParams) -> f64 {
    let d2 = (zi.x - zj.x).powi(2) + (zi.y - zj.y).powi(2);
    // |Δ| first so that kernel(a, b) == kernel(b, a) bit for bit
    let dr = wrap((zi.bearing - zj.bearing).abs());
    (-p.gamma_t * d2).exp() * (-p.gamma_r * dr * dr).exp()
}

/// Dense symmetric `n × n` matrix with unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = f(i, i);
            for j in i + 1..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Binary greyscale PGM, one pixel per entry, value × 255 rounded.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.n, &self.values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = create_file(path)?;
        for i in 0..self.n {
            let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn write_pgm(path: &Path, n: usize, values: &[f64]) -> Result<()> {
    let mut w = create_file(path)?;
    let header = format!("P5\n{n} {n}\n255\n");
    let pixels: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&pixels))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn self_similarity(frames: &[Keyframe], p: &KernelParams) -> SimilarityMatrix {
    SimilarityMatrix::from_fn(frames.len(), |i, j| {
        if i == j {
            1.0
        } else {
            kernel(&frames[i].fix, &frames[j].fix, p)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelThresholds {
    pub tau_p: f64,
    pub tau_n: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            tau_p: 0.9,
            tau_n: 0.4,
        }
    }
}

impl LabelThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v < 1.0;
        if ok(self.tau_p) && ok(self.tau_n) && self.tau_n < self.tau_p {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "thresholds need 0 < tau_n < tau_p < 1, got tau_n={} tau_p={}",
                self.tau_n, self.tau_p
            )))
        }
    }
}

/// Labeled keyframe pairs; every pair has `i < j`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl PairSet {
    /// Shifts every index by `offset`, for stacking several sessions.
    pub fn offset(mut self, offset: usize) -> Self {
        for p in self.positives.iter_mut().chain(self.negatives.iter_mut()) {
            p.0 += offset;
            p.1 += offset;
        }
        self
    }

    pub fn extend(&mut self, other: PairSet) {
        self.positives.extend(other.positives);
        self.negatives.extend(other.negatives);
    }
}

/// Positives have similarity above `tau_p`, negatives below `tau_n`; pairs
/// closer than `temporal_guard` keyframes apart are ignored.
pub fn label_pairs(sim: &SimilarityMatrix, th: &LabelThresholds, temporal_guard: usize) -> PairSet {
    let n = sim.len();
    let mut out = PairSet::default();
    for i in 0..n {
        for j in i + temporal_guard + 1..n {
            let k = sim.get(i, j);
            if k > th.tau_p {
                out.positives.push((i, j));
            } else if k < th.tau_n {
                out.negatives.push((i, j));
            }
        }
    }
    out
}

/// Labels several sessions jointly. Keyframes are concatenated in session
/// order; pairs inside one session obey the temporal guard, while every
/// pair spanning two sessions is labeled from the kernel alone.
pub fn label_sessions(
    sessions: &[Vec<Keyframe>],
    p: &KernelParams,
    th: &LabelThresholds,
    temporal_guard: usize,
) -> (Vec<Keyframe>, PairSet) {
    let mut frames = Vec::new();
    let mut owner = Vec::new();
    for (s, kfs) in sessions.iter().enumerate() {
        frames.extend(kfs.iter().cloned());
        owner.extend(std::iter::repeat_n(s, kfs.len()));
    }
    let mut out = PairSet::default();
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            if owner[i] == owner[j] && j - i <= temporal_guard {
                continue;
            }
            let k = kernel(&frames[i].fix, &frames[j].fix, p);
            if k > th.tau_p {
                out.positives.push((i, j));
            } else if k < th.tau_n {
                out.negatives.push((i, j));
            }
        }
    }
    (frames, out)
}

/// One labeled training pair: indices into the descriptor list and the
/// similarity label (1 = same place).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub i: usize,
    pub j: usize,
    pub y: u8,
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Inverse-distance weights clipped to `[0.1, 10] × median`.
pub fn inverse_distance_weights(pairs: &[(usize, usize)], descriptors: &[Vec<f64>]) -> Vec<f64> {
    let raw: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| 1.0 / (euclidean(&descriptors[i], &descriptors[j]) + INVERSE_DISTANCE_EPS))
        .collect();
    if raw.is_empty() {
        return raw;
    }
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let (lo, hi) = (WEIGHT_CLAMP_LO * median, WEIGHT_CLAMP_HI * median);
    raw.into_iter().map(|w| w.clamp(lo, hi)).collect()
}

/// Draws training batches from a fixed pair set. Negative weights are
/// computed once at construction.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    pairs: &'a PairSet,
    negative_weights: Vec<f64>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(pairs: &'a PairSet, descriptors: &[Vec<f64>]) -> Result<Self> {
        if pairs.positives.is_empty() || pairs.negatives.is_empty() {
            return Err(Error::invalid(format!(
                "pair set needs positives and negatives (have {} / {})",
                pairs.positives.len(),
                pairs.negatives.len()
            )));
        }
        let max_idx = pairs
            .positives
            .iter()
            .chain(&pairs.negatives)
            .map(|p| p.1)
            .max()
            .unwrap_or(0);
        if max_idx >= descriptors.len() {
            return Err(Error::invalid(format!(
                "pair index {max_idx} outside {} descriptors",
                descriptors.len()
            )));
        }
        Ok(Self {
            pairs,
            negative_weights: inverse_distance_weights(&pairs.negatives, descriptors),
        })
    }

    pub fn negative_weights(&self) -> &[f64] {
        &self.negative_weights
    }

    pub fn sample(
        &self,
        rng: &mut RngStream,
        batch_positives: usize,
        neg_ratio: usize,
    ) -> Result<Vec<LabeledPair>> {
        let n_neg = batch_positives * neg_ratio;
        if batch_positives > self.pairs.positives.len() || n_neg > self.pairs.negatives.len() {
            return Err(Error::invalid(format!(
                "batch of {batch_positives} positives + {n_neg} negatives exceeds available {} / {}",
                self.pairs.positives.len(),
                self.pairs.negatives.len()
            )));
        }
        let mut out = Vec::with_capacity(batch_positives + n_neg);
        out.extend(
            self.pairs
                .positives
                .choose_multiple(rng, batch_positives)
                .map(|&(i, j)| LabeledPair { i, j, y: 1 }),
        );
        let idx: Vec<usize> = (0..self.pairs.negatives.len()).collect();
        let chosen = idx
            .choose_multiple_weighted(rng, n_neg, |&k| self.negative_weights[k])
            .map_err(|e| Error::Numerical(format!("negative sampling weights: {e}")))?;
        out.extend(chosen.map(|&k| {
            let (i, j) = self.pairs.negatives[k];
            LabeledPair { i, j, y: 0 }
        }));
        Ok(out)
    }
}

/// Samples `batch_positives` positives uniformly and `neg_ratio` times as
/// many negatives without replacement, weighted by inverse raw distance.
pub fn sample_batch(
    pairs: &PairSet,
    descriptors: &[Vec<f64>],
    rng: &mut RngStream,
    batch_positives: usize,
    neg_ratio: usize,
) -> Result<Vec<LabeledPair>> {
    BatchSampler::new(pairs, descriptors)?.sample(rng, batch_positives, neg_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn fix(x: f64, y: f64, bearing: f64) -> GpsFix {
        GpsFix {
            bearing,
            ..GpsFix::new(0.0, x, y)
        }
    }

    fn frames(fixes: &[GpsFix]) -> Vec<Keyframe> {
        fixes
            .iter()
            .enumerate()
            .map(|(id, f)| Keyframe {
                id,
                descriptor: crate::ingest::DescriptorRecord {
                    timestamp: 0.0,
                    vector: vec![id as f64],
                },
                fix: *f,
            })
            .collect()
    }

    #[test]
    fn kernel_examples() {
        let p = KernelParams {
            gamma_t: 0.01,
            gamma_r: 2.0,
        };
        let a = fix(3.0, 4.0, 1.0);
        assert_eq!(kernel(&a, &a, &p), 1.0);
        let k = kernel(&fix(0.0, 0.0, 0.3), &fix(10.0, 0.0, 0.3), &p);
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k - 0.36788).abs() < 1e-5);
        let k = kernel(&fix(0.0, 0.0, PI - 0.1), &fix(0.0, 0.0, -PI + 0.1), &p);
        assert!((k - (-0.08f64).exp()).abs() < 1e-12);
        assert!((k - 0.92312).abs() < 1e-5);
    }

    #[test]
    fn default_bandwidths() {
        let p = KernelParams::default();
        assert_eq!(p.gamma_t, 0.005);
        assert!((p.gamma_r - 1.8238).abs() < 1e-4);
        // a 10 m offset alone gives exp(-0.5)
        let k = kernel(&fix(0.0, 0.0, 0.0), &fix(10.0, 0.0, 0.0), &p);
        assert!((k - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn similarity_examples() {
        let p = KernelParams {
            gamma_t: 0.01,
            gamma_r: 1.0,
        };
        let one = self_similarity(&frames(&[fix(1.0, 1.0, 0.0)]), &p);
        assert_eq!((one.len(), one.get(0, 0)), (1, 1.0));
        let s = self_similarity(
            &frames(&[fix(0.0, 0.0, 0.0), fix(10.0, 0.0, 0.0), fix(20.0, 0.0, 0.0)]),
            &p,
        );
        assert!((s.get(0, 1) - 0.36788).abs() < 1e-5);
        assert!((s.get(0, 2) - 0.01832).abs() < 1e-5);
        for i in 0..3 {
            assert_eq!(s.get(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
    }

    #[test]
    fn labeling_examples() {
        let th = LabelThresholds::default();
        let n = 6;
        let sim = SimilarityMatrix::from_fn(n, |i, j| if i == j { 1.0 } else { 0.01 });
        let ps = label_pairs(&sim, &th, 2);
        assert!(ps.positives.is_empty());
        assert_eq!(
            ps.negatives.len(),
            (0..n).map(|i| n.saturating_sub(i + 3)).sum::<usize>()
        );

        let sim = SimilarityMatrix::from_fn(3, |i, j| match (i.min(j), i.max(j)) {
            (a, b) if a == b => 1.0,
            (0, 1) => 0.95,
            _ => 0.5,
        });
        let ps = label_pairs(&sim, &th, 0);
        assert_eq!(ps.positives, vec![(0, 1)]);
        assert!(ps.negatives.is_empty());
    }

    #[test]
    fn pooled_sessions_skip_guard_across_sessions() {
        let a = frames(&[fix(0.0, 0.0, 0.0), fix(1.0, 0.0, 0.0), fix(100.0, 0.0, 0.0)]);
        let b = frames(&[fix(0.5, 0.0, 0.0)]);
        let (all, ps) = label_sessions(
            &[a, b],
            &KernelParams::default(),
            &LabelThresholds::default(),
            5,
        );
        assert_eq!(all.len(), 4);
        // (0, 1) is within one session and guarded; both cross pairs survive
        assert_eq!(ps.positives, vec![(0, 3), (1, 3)]);
        assert_eq!(ps.negatives, vec![(2, 3)]);
        let single = label_sessions(
            &[all.clone()],
            &KernelParams::default(),
            &LabelThresholds::default(),
            0,
        )
        .1;
        assert_eq!(
            single,
            label_pairs(
                &self_similarity(&all, &KernelParams::default()),
                &LabelThresholds::default(),
                0
            )
        );
    }

    #[test]
    fn thresholds_validate() {
        assert!(LabelThresholds::default().validate().is_ok());
        assert!(LabelThresholds {
            tau_p: 0.3,
            tau_n: 0.4
        }
        .validate()
        .is_err());
    }

    fn toy_pairs() -> (PairSet, Vec<Vec<f64>>) {
        let descs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let positives: Vec<_> = (0..10).map(|i| (i, i + 20)).collect();
        let negatives: Vec<_> = (0..30)
            .flat_map(|i| (i + 5..40).map(move |j| (i, j)))
            .collect();
        (
            PairSet {
                positives,
                negatives,
            },
            descs,
        )
    }

    #[test]
    fn batch_composition() {
        let (ps, descs) = toy_pairs();
        let mut rng = RngStream::new(1);
        let b = sample_batch(&ps, &descs, &mut rng, 2, 10).unwrap();
        assert_eq!(b.iter().filter(|p| p.y == 1).count(), 2);
        assert_eq!(b.iter().filter(|p| p.y == 0).count(), 20);
        for p in &b {
            let pair = (p.i, p.j);
            if p.y == 1 {
                assert!(ps.positives.contains(&pair));
            } else {
                assert!(ps.negatives.contains(&pair));
            }
        }
        let negs: std::collections::HashSet<_> = b.iter().filter(|p| p.y == 0).collect();
        assert_eq!(negs.len(), 20, "negatives drawn without replacement");

        let again = sample_batch(&ps, &descs, &mut RngStream::new(1), 2, 10).unwrap();
        assert_eq!(b, again);
        assert!(sample_batch(&ps, &descs, &mut rng, 11, 1).is_err());
    }

    #[test]
    fn inverse_distance_selection_ratio() {
        // Two candidates at raw distance 1 and 3: weights 1 and 1/3.
        let descs = vec![vec![0.0], vec![1.0], vec![3.0]];
        let ps = PairSet {
            positives: vec![(1, 2)],
            negatives: vec![(0, 1), (0, 2)],
        };
        let sampler = BatchSampler::new(&ps, &descs).unwrap();
        let mut rng = RngStream::new(99);
        let trials = 10_000;
        let mut near = 0usize;
        for _ in 0..trials {
            let b = sampler.sample(&mut rng, 1, 1).unwrap();
            if (b[1].i, b[1].j) == (0, 1) {
                near += 1;
            }
        }
        let ratio = near as f64 / (trials - near) as f64;
        assert!((ratio - 3.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn weights_are_clamped_around_median() {
        let descs = vec![vec![0.0], vec![1e-9], vec![1.0], vec![1.1], vec![1e6]];
        let pairs = vec![(0, 1), (0, 2), (0, 3), (0, 4)];
        let w = inverse_distance_weights(&pairs, &descs);
        let median = 0.5 * (1.0 / (1.0 + 1e-6) + 1.0 / (1.1 + 1e-6));
        assert!((w[0] - 10.0 * median).abs() < 1e-12);
        assert!((w[3] - 0.1 * median).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_monotone(
            x in -50.0..50.0f64, y in -50.0..50.0f64, b1 in -4.0..4.0f64, b2 in -4.0..4.0f64
        ) {
            let p = KernelParams::default();
            let a = fix(0.0, 0.0, b1);
            let b = fix(x, y, b2);
            let k = kernel(&a, &b, &p);
            prop_assert_eq!(k, kernel(&b, &a, &p));
            prop_assert!(k > 0.0 && k <= 1.0);
            let mut prev = f64::INFINITY;
            for gap in 0..30 {
                let k = kernel(&a, &fix(gap as f64, 0.0, b1), &p);
                prop_assert!(k <= prev);
                prev = k;
            }
        }

        #[test]
        fn labels_are_separated(
            pts in proptest::collection::vec((0.0..60.0f64, 0.0..60.0f64, -3.0..3.0f64), 2..40),
            guard in 0usize..4,
        ) {
            let fx: Vec<_> = pts.iter().map(|&(x, y, b)| fix(x, y, b)).collect();
            let fr = frames(&fx);
            let sim = self_similarity(&fr, &KernelParams::default());
            let th = LabelThresholds::default();
            let ps = label_pairs(&sim, &th, guard);
            for &(i, j) in &ps.positives {
                prop_assert!(i < j && j - i > guard && sim.get(i, j) > th.tau_p);
                prop_assert!(!ps.negatives.contains(&(i, j)));
            }
            for &(i, j) in &ps.negatives {
                prop_assert!(i < j && j - i > guard && sim.get(i, j) < th.tau_n);
            }
            if !ps.positives.is_empty() && !ps.negatives.is_empty() {
                let max_neg = ps.negatives.iter().map(|&(i, j)| sim.get(i, j)).fold(0.0, f64::max);
                let min_pos = ps.positives.iter().map(|&(i, j)| sim.get(i, j)).fold(1.0, f64::min);
                prop_assert!(max_neg < min_pos);
            }
        }
    }
}
