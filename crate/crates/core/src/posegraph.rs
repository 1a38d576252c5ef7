//! SE(2) pose graph with odometry, loop-closure and prior factors, solved
//! by Levenberg-damped Gauss-Newton on the dense normal equations.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap, Pose2};
use crate::rng::RngStream;

/// Loop closures are zero-motion constraints with 3 m / 0.3 rad deviation.
pub const LOOP_SIGMA_TRANS: f64 = 3.0;
pub const LOOP_SIGMA_ROT: f64 = 0.3;
/// Prior on the first node; stiff enough to pin the gauge.
pub const PRIOR_INFORMATION: f64 = 1e12;
/// Sigmas below this are clamped when forming information matrices.
pub const MIN_SIGMA: f64 = 1e-6;

const LAMBDA_INIT: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e12;
const NONCONVERGED_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_rot: f64,
    pub sigma_trans: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_rot: 1e-3,
            sigma_trans: 5e-2,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            sigma_rot: 0.0,
            sigma_trans: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_rot >= 0.0 && self.sigma_trans >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("noise sigmas must be >= 0"))
        }
    }

    pub fn information(&self) -> Matrix3<f64> {
        diag_information(self.sigma_trans, self.sigma_rot)
    }
}

fn diag_information(sigma_trans: f64, sigma_rot: f64) -> Matrix3<f64> {
    let t = sigma_trans.max(MIN_SIGMA);
    let r = sigma_rot.max(MIN_SIGMA);
    Matrix3::from_diagonal(&Vector3::new(1.0 / (t * t), 1.0 / (t * t), 1.0 / (r * r)))
}

/// Perturbs a relative pose with independent Gaussian noise per component.
pub fn inject_noise(true_rel: &Pose2, spec: &NoiseSpec, rng: &mut RngStream) -> Pose2 {
    Pose2::from_parts(
        true_rel.x + rng.gaussian(spec.sigma_trans),
        true_rel.y + rng.gaussian(spec.sigma_trans),
        true_rel.theta + rng.gaussian(spec.sigma_rot),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Odometry,
    Loop,
    Prior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub i: usize,
    /// Unused for priors.
    pub j: usize,
    pub measurement: Pose2,
    pub information: Matrix3<f64>,
}

impl Factor {
    fn relative(
        kind: FactorKind,
        i: usize,
        j: usize,
        measurement: Pose2,
        information: Matrix3<f64>,
    ) -> Result<Self> {
        check_information(&information)?;
        Ok(Self {
            kind,
            i,
            j,
            measurement,
            information,
        })
    }

    /// Residual `v(Z⁻¹ ⊕ (Xi⁻¹ ⊕ Xj))` (or `v(Z⁻¹ ⊕ Xi)` for a prior) with
    /// the Jacobians with respect to `Xi` and `Xj`.
    fn linearize(&self, nodes: &[Pose2]) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
        let z = &self.measurement;
        let (sz, cz) = z.theta.sin_cos();
        let rz_t = Matrix3::new(cz, sz, 0.0, -sz, cz, 0.0, 0.0, 0.0, 1.0);
        match self.kind {
            FactorKind::Prior => {
                let x = &nodes[self.i];
                let e = Vector3::new(
                    cz * (x.x - z.x) + sz * (x.y - z.y),
                    -sz * (x.x - z.x) + cz * (x.y - z.y),
                    wrap(x.theta - z.theta),
                );
                (e, rz_t, Matrix3::zeros())
            }
            FactorKind::Odometry | FactorKind::Loop => {
                let (xi, xj) = (&nodes[self.i], &nodes[self.j]);
                let (si, ci) = xi.theta.sin_cos();
                let (dx, dy) = (xj.x - xi.x, xj.y - xi.y);
                // Ri^T · dt and its derivative with respect to θi
                let (lx, ly) = (ci * dx + si * dy, -si * dx + ci * dy);
                let (dlx, dly) = (-si * dx + ci * dy, -ci * dx - si * dy);
                let e = Vector3::new(
                    cz * (lx - z.x) + sz * (ly - z.y),
                    -sz * (lx - z.x) + cz * (ly - z.y),
                    wrap(xj.theta - xi.theta - z.theta),
                );
                // Rz^T · Ri^T = R(θi + θz)^T
                let rzri = {
                    let a = cz * ci - sz * si;
                    let b = cz * si + sz * ci;
                    nalgebra::Matrix2::new(a, b, -b, a)
                };
                let a = Matrix3::new(
                    -rzri[(0, 0)],
                    -rzri[(0, 1)],
                    cz * dlx + sz * dly,
                    -rzri[(1, 0)],
                    -rzri[(1, 1)],
                    -sz * dlx + cz * dly,
                    0.0,
                    0.0,
                    -1.0,
                );
                let b = Matrix3::new(
                    rzri[(0, 0)],
                    rzri[(0, 1)],
                    0.0,
                    rzri[(1, 0)],
                    rzri[(1, 1)],
                    0.0,
                    0.0,
                    0.0,
                    1.0,
                );
                (e, a, b)
            }
        }
    }

    pub fn residual(&self, nodes: &[Pose2]) -> Vector3<f64> {
        self.linearize(nodes).0
    }

    pub fn chi2(&self, nodes: &[Pose2]) -> f64 {
        let e = self.residual(nodes);
        (e.transpose() * self.information * e)[(0, 0)]
    }
}

fn check_information(info: &Matrix3<f64>) -> Result<()> {
    let asym = (info - info.transpose()).abs().max();
    if asym > 1e-12 * info.abs().max().max(1.0) {
        return Err(Error::invalid("information matrix is not symmetric"));
    }
    if info.cholesky().is_none() {
        return Err(Error::invalid(
            "information matrix is not positive-definite",
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    pub last_step_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraph {
    nodes: Vec<Pose2>,
    factors: Vec<Factor>,
}

impl PoseGraph {
    /// Graph with one node anchored by a prior at `origin`.
    pub fn new(origin: Pose2) -> Self {
        let info = Matrix3::from_diagonal_element(PRIOR_INFORMATION);
        Self {
            nodes: vec![origin],
            factors: vec![Factor {
                kind: FactorKind::Prior,
                i: 0,
                j: 0,
                measurement: origin,
                information: info,
            }],
        }
    }

    pub fn nodes(&self) -> &[Pose2] {
        &self.nodes
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn loop_count(&self) -> usize {
        self.factors
            .iter()
            .filter(|f| f.kind == FactorKind::Loop)
            .count()
    }

    /// Appends node `i + 1` by dead reckoning from node `i`, which must be
    /// the newest node. Returns the new node id.
    pub fn add_odometry(
        &mut self,
        i: usize,
        measured_rel: Pose2,
        spec: &NoiseSpec,
    ) -> Result<usize> {
        if i + 1 != self.nodes.len() {
            return Err(Error::invalid(format!(
                "odometry must extend the newest node {}, got {i}",
                self.nodes.len() - 1
            )));
        }
        if !measured_rel.is_finite() {
            return Err(Error::invalid("non-finite odometry measurement"));
        }
        self.factors.push(Factor::relative(
            FactorKind::Odometry,
            i,
            i + 1,
            measured_rel,
            spec.information(),
        )?);
        let next = self.nodes[i].compose(&measured_rel);
        self.nodes.push(next);
        Ok(i + 1)
    }

    /// Zero-motion constraint between two existing nodes.
    pub fn add_loop_closure(&mut self, i: usize, j: usize) -> Result<()> {
        if i == j {
            return Err(Error::invalid("loop closure needs two distinct nodes"));
        }
        let n = self.nodes.len();
        if i >= n || j >= n {
            return Err(Error::invalid(format!(
                "loop closure ({i}, {j}) outside {n} nodes"
            )));
        }
        let dup = self
            .factors
            .iter()
            .any(|f| f.kind == FactorKind::Loop && ((f.i, f.j) == (i, j) || (f.i, f.j) == (j, i)));
        if dup {
            return Err(Error::Duplicate(format!("loop closure ({i}, {j})")));
        }
        self.factors.push(Factor::relative(
            FactorKind::Loop,
            i,
            j,
            Pose2::identity(),
            diag_information(LOOP_SIGMA_TRANS, LOOP_SIGMA_ROT),
        )?);
        Ok(())
    }

    pub fn chi2(&self) -> f64 {
        chi2_at(&self.factors, &self.nodes)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.factors {
            if f.kind != FactorKind::Prior {
                let (a, b) = (find(&mut parent, f.i), find(&mut parent, f.j));
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        if let Some(k) = (0..n).find(|&k| find(&mut parent, k) != root) {
            return Err(Error::Singular(format!(
                "node {k} is not connected to the anchored node"
            )));
        }
        Ok(())
    }

    /// Iterated linearization with Levenberg damping: λ starts at 1e-6,
    /// grows ×10 when a step would raise χ² and shrinks ÷10 after an
    /// accepted step. Stops once the step norm drops below `tol`.
    pub fn optimize(&mut self, max_iters: usize, tol: f64) -> Result<OptimizeReport> {
        self.check_connected()?;
        let n = self.nodes.len();
        let initial = self.chi2();
        let mut chi = initial;
        let mut lambda = LAMBDA_INIT;
        let mut iterations = 0;
        let mut last_step = 0.0;
        let mut converged = false;

        while iterations < max_iters {
            iterations += 1;
            let (h, b) = self.normal_equations();
            let mut accepted = false;
            while lambda <= LAMBDA_MAX {
                let mut damped = h.clone();
                for k in 0..3 * n {
                    damped[(k, k)] += lambda;
                }
                let Some(chol) = damped.cholesky() else {
                    return Err(Error::Singular(
                        "normal equations are not positive-definite".into(),
                    ));
                };
                let step = chol.solve(&(-&b));
                let candidate: Vec<Pose2> = self
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        Pose2::from_parts(
                            p.x + step[3 * k],
                            p.y + step[3 * k + 1],
                            p.theta + step[3 * k + 2],
                        )
                    })
                    .collect();
                let new_chi = chi2_at(&self.factors, &candidate);
                last_step = step.norm();
                if new_chi.is_finite() && new_chi <= chi {
                    self.nodes = candidate;
                    chi = new_chi;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // no descent direction left at any damping: at a minimum
                converged = true;
                last_step = 0.0;
                break;
            }
            if last_step < tol {
                converged = true;
                break;
            }
        }
        if !converged && last_step <= NONCONVERGED_STEP {
            converged = true;
        }
        Ok(OptimizeReport {
            initial_chi2: initial,
            final_chi2: chi,
            iterations,
            last_step_norm: last_step,
            converged,
        })
    }

    fn normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.nodes.len();
        let mut h = DMatrix::<f64>::zeros(3 * n, 3 * n);
        let mut b = DVector::<f64>::zeros(3 * n);
        for f in &self.factors {
            let (e, ja, jb) = f.linearize(&self.nodes);
            let lam = &f.information;
            let blocks: &[(usize, &Matrix3<f64>)] = if f.kind == FactorKind::Prior {
                &[(f.i, &ja)]
            } else {
                &[(f.i, &ja), (f.j, &jb)]
            };
            for &(r, jr) in blocks {
                let g = jr.transpose() * lam * e;
                for a in 0..3 {
                    b[3 * r + a] += g[a];
                }
                for &(c, jc) in blocks {
                    let blk = jr.transpose() * lam * jc;
                    for a in 0..3 {
                        for d in 0..3 {
                            h[(3 * r + a, 3 * c + d)] += blk[(a, d)];
                        }
                    }
                }
            }
        }
        (h, b)
    }
}

fn chi2_at(factors: &[Factor], nodes: &[Pose2]) -> f64 {
    factors.iter().map(|f| f.chi2(nodes)).sum()
}

/// Root-mean-square positional error between two aligned trajectories.
pub fn ate_rmse(estimated: &[Pose2], truth: &[Pose2]) -> Result<f64> {
    if estimated.len() != truth.len() || estimated.is_empty() {
        return Err(Error::invalid(format!(
            "trajectory lengths differ or are empty: {} vs {}",
            estimated.len(),
            truth.len()
        )));
    }
    let sum: f64 = estimated
        .iter()
        .zip(truth)
        .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
        .sum();
    Ok((sum / estimated.len() as f64).sqrt())
}
