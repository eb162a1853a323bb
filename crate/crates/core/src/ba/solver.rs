//! Levenberg-Marquardt with per-point elimination, and a dense reference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linearize::Linearization;
use super::{BaError, BaProblem};
use crate::geometry::{Pose, Twist};

/// Lower bound on the diagonal used for Marquardt scaling.
const DAMPING_FLOOR: f64 = 1e-6;

fn damped(h: f64, lambda: f64) -> f64 {
    h + lambda * h.max(DAMPING_FLOOR)
}

/// Update in block layout: 8 values per non-fixed frame
/// (`ξ`, `a`, `b`), zero on held coordinates, plus one `Δρ` per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub camera: DVector<f64>,
    pub points: Vec<f64>,
}

impl Step {
    pub fn max_abs_difference(&self, other: &Step) -> f64 {
        let c = (&self.camera - &other.camera).amax();
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a - b).abs())
            .fold(c, f64::max)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    /// Cost before the first and after every accepted step.
    pub costs: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub final_lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaStats {
    pub levels: Vec<LevelStats>,
}

impl BaStats {
    pub fn final_cost(&self) -> Option<f64> {
        self.levels.last().and_then(|l| l.costs.last().copied())
    }

    /// Whether every level's cost history is non-increasing.
    pub fn monotone(&self) -> bool {
        self.levels.iter().all(|l| l.costs.windows(2).all(|w| w[1] <= w[0]))
    }
}

/// Undamped full normal equations over active camera columns followed by
/// one column per point, assembled row by row from the weighted Jacobian.
#[derive(Clone, Debug)]
pub struct DenseSystem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// Block-layout index of every camera column.
    pub camera_columns: Vec<usize>,
    pub block_len: usize,
}

impl DenseSystem {
    pub fn solve(&self, lambda: f64) -> Result<Step, BaError> {
        let mut h = self.hessian.clone();
        for i in 0..h.nrows() {
            h[(i, i)] = damped(h[(i, i)], lambda);
        }
        let chol = h.cholesky().ok_or(BaError::RankDeficient)?;
        let x = chol.solve(&(-&self.gradient));
        let nc = self.camera_columns.len();
        let mut camera = DVector::zeros(self.block_len);
        for (k, &c) in self.camera_columns.iter().enumerate() {
            camera[c] = x[k];
        }
        Ok(Step {
            camera,
            points: x.rows(nc, x.len() - nc).iter().copied().collect(),
        })
    }
}

impl BaProblem {
    fn clamp_level(&self, level: usize) -> usize {
        let top = self.frames.iter().map(|f| f.pyramid.num_levels()).min().unwrap_or(1);
        level.min(top - 1)
    }

    /// LM step from the reduced camera system.
    pub(super) fn schur_step(&self, lin: &Linearization, lambda: f64) -> Result<Step, BaError> {
        let nb = lin.b_c.len();
        let mut s = lin.h_cc.clone();
        for i in 0..nb {
            s[(i, i)] = damped(s[(i, i)], lambda);
        }
        let mut rhs = lin.b_c.clone();
        let hpp: Vec<f64> = lin.points.iter().map(|p| damped(p.h_pp, lambda)).collect();
        for (p, &h) in lin.points.iter().zip(&hpp) {
            for (a, ca) in &p.coupling {
                rhs.rows_mut(8 * a, 8).axpy(-p.b_p / h, ca, 1.0);
                for (b, cb) in &p.coupling {
                    let mut blk = s.view_mut((8 * a, 8 * b), (8, 8));
                    blk.ger(-1.0 / h, ca, cb, 1.0);
                }
            }
        }
        let cols = self.active_columns();
        let s_act = s.select_rows(&cols).select_columns(&cols);
        let rhs_act = rhs.select_rows(&cols);
        let chol = s_act.cholesky().ok_or(BaError::RankDeficient)?;
        let x = chol.solve(&(-rhs_act));
        let mut camera = DVector::zeros(nb);
        for (k, &c) in cols.iter().enumerate() {
            camera[c] = x[k];
        }
        let points = lin
            .points
            .iter()
            .zip(&hpp)
            .map(|(p, &h)| {
                let coupled: f64 = p
                    .coupling
                    .iter()
                    .map(|(a, ca)| ca.dot(&camera.rows(8 * a, 8)))
                    .sum();
                -(p.b_p + coupled) / h
            })
            .collect();
        Ok(Step { camera, points })
    }

    /// Decrease of the damped quadratic model, `½ (Δᵀ D Δ − gᵀ Δ)`.
    fn predicted_decrease(lin: &Linearization, step: &Step, lambda: f64) -> f64 {
        let mut sum = 0.0;
        for i in 0..lin.b_c.len() {
            let d = step.camera[i];
            if d != 0.0 {
                sum += (damped(lin.h_cc[(i, i)], lambda) - lin.h_cc[(i, i)]) * d * d - lin.b_c[i] * d;
            }
        }
        for (p, d) in lin.points.iter().zip(&step.points) {
            sum += (damped(p.h_pp, lambda) - p.h_pp) * d * d - p.b_p * d;
        }
        0.5 * sum
    }

    /// Reduced-system step at the current state.
    pub fn reduced_step(&self, level: usize, lambda: f64) -> Result<Step, BaError> {
        let lin = self.linearize(self.clamp_level(level));
        self.schur_step(&lin, lambda)
    }

    pub fn dense_system(&self, level: usize) -> DenseSystem {
        let level = self.clamp_level(level);
        let blocks = self.blocks();
        let block_len = 8 * blocks.iter().flatten().count();
        let camera_columns = self.active_columns();
        let mut col_of = vec![None; block_len];
        for (k, &c) in camera_columns.iter().enumerate() {
            col_of[c] = Some(k);
        }
        let nc = camera_columns.len();
        let n = nc + self.points.len();
        let mut hessian = DMatrix::zeros(n, n);
        let mut gradient = DVector::zeros(n);
        for j in 0..self.points.len() {
            for row in self.residual_rows(j, level) {
                let mut entries: Vec<(usize, f64)> = vec![(nc + j, row.jacobians.d_rho)];
                let mut frame = |f: usize, pose: &[f64], affine: &[f64]| {
                    let Some(b) = blocks[f] else { return };
                    for (i, v) in pose.iter().chain(affine).enumerate() {
                        if let Some(c) = col_of[8 * b + i] {
                            entries.push((c, *v));
                        }
                    }
                };
                let jh = &row.jacobians;
                frame(row.host, jh.d_xi_host.as_slice(), jh.d_affine_host.as_slice());
                if let Some(o) = row.observer {
                    frame(o, jh.d_xi_observer.as_slice(), jh.d_affine_observer.as_slice());
                }
                for &(a, va) in &entries {
                    gradient[a] += row.weight * va * row.residual;
                    for &(b, vb) in &entries {
                        hessian[(a, b)] += row.weight * va * vb;
                    }
                }
            }
        }
        let w = self.params.affine_prior_weight;
        for (f, b) in self.frames.iter().zip(&blocks) {
            let Some(b) = b else { continue };
            for (i, r) in [f.affine.a - f.affine_prior.a, f.affine.b - f.affine_prior.b]
                .into_iter()
                .enumerate()
            {
                if let Some(c) = col_of[8 * b + 6 + i] {
                    hessian[(c, c)] += w;
                    gradient[c] += w * r;
                }
            }
        }
        DenseSystem {
            hessian,
            gradient,
            camera_columns,
            block_len,
        }
    }

    /// LM step from the dense full system; reference for `reduced_step`.
    pub fn dense_step(&self, level: usize, lambda: f64) -> Result<Step, BaError> {
        self.dense_system(level).solve(lambda)
    }

    /// New problem with `step` applied: `T ← T · Exp(ξ)`, additive
    /// affine and inverse-depth updates.
    pub fn apply_step(&self, step: &Step) -> BaProblem {
        let mut out = self.clone();
        let blocks = self.blocks();
        for (f, b) in out.frames.iter_mut().zip(&blocks) {
            let Some(b) = b else { continue };
            let d = step.camera.rows(8 * b, 8);
            if f.pose_free() {
                let xi = Twist(nalgebra::Vector6::from_iterator(d.rows(0, 6).iter().copied()));
                f.pose = f.pose.compose(&Pose::exp(&xi));
            }
            f.affine.a += d[6];
            f.affine.b += d[7];
        }
        for (p, d) in out.points.iter_mut().zip(&step.points) {
            p.rho += d;
        }
        out
    }

    /// Optimizes in place over the configured pyramid schedule, with the
    /// world origin temporarily moved to the newest keyframe.
    pub fn solve(&mut self) -> Result<BaStats, BaError> {
        if self.free_frame_count() == 0 {
            return Err(BaError::Empty);
        }
        let offset = self.recenter();
        let result = self.optimize();
        self.uncenter(&offset);
        for f in &mut self.frames {
            f.pose = f.pose.renormalized();
        }
        result
    }

    fn optimize(&mut self) -> Result<BaStats, BaError> {
        let mut stats = BaStats::default();
        let schedule: Vec<(usize, usize)> = self
            .params
            .levels
            .iter()
            .copied()
            .zip(self.params.iterations.iter().copied())
            .collect();
        for (level, iterations) in schedule {
            let level = self.clamp_level(level);
            stats.levels.push(self.optimize_level(level, iterations)?);
        }
        Ok(stats)
    }

    fn optimize_level(&mut self, level: usize, max_iterations: usize) -> Result<LevelStats, BaError> {
        let mut lin = self.linearize(level);
        if !lin.cost.is_finite() {
            return Err(BaError::SolverDiverged);
        }
        let mut stats = LevelStats {
            level,
            costs: vec![lin.cost],
            ..Default::default()
        };
        let mut lambda = self.params.lambda_init;
        let tol = self.params.rel_cost_tol;
        'outer: for _ in 0..max_iterations {
            let mut accepted = None;
            while lambda <= self.params.lambda_max {
                match self.schur_step(&lin, lambda) {
                    Ok(step) => {
                        if Self::predicted_decrease(&lin, &step, lambda) <= tol * lin.cost {
                            break 'outer;
                        }
                        let trial = self.apply_step(&step);
                        if trial.cost(level) < lin.cost {
                            accepted = Some(trial);
                            break;
                        }
                    }
                    Err(BaError::RankDeficient) => {}
                    Err(e) => return Err(e),
                }
                stats.rejected += 1;
                lambda *= 10.0;
            }
            let Some(trial) = accepted else {
                if stats.accepted == 0 && self.schur_step(&lin, self.params.lambda_max).is_err() {
                    return Err(BaError::RankDeficient);
                }
                break;
            };
            *self = trial;
            lambda = (lambda / 3.0).max(1e-12);
            let next = self.linearize(level);
            let rel = (lin.cost - next.cost) / lin.cost.max(f64::MIN_POSITIVE);
            lin = next;
            stats.costs.push(lin.cost);
            stats.accepted += 1;
            if rel < tol {
                break;
            }
        }
        stats.final_lambda = lambda;
        Ok(stats)
    }
}
