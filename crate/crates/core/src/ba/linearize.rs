//! Per-point residual evaluation and normal-equation blocks.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use super::{BaPoint, BaProblem, Freedom};
use crate::config::PhotoAggregation;
use crate::parallel::map_ordered;
use crate::residuals::{
    center_transport, depth_jacobian_with, photo_linearize_masked, photo_residual_masked, FrameView,
    PointParams, ResidualError, ResidualJacobians, PATTERN_LEN,
};
use crate::robust::{huber, tls};

pub(super) type V8 = SVector<f64, 8>;
type V10 = SVector<f64, 10>;
type M10 = SMatrix<f64, 10, 10>;

/// Blocks of one host/observer pair in the compact coordinates
/// `v = (ξ_h, a_h, b_h, a_o, b_o)`; the observer pose column is `−ξ_h`.
struct PairBlock {
    host: usize,
    observer: usize,
    m: M10,
    b: V10,
    hcp: V10,
}

impl PairBlock {
    fn new(host: usize, observer: usize) -> Self {
        Self {
            host,
            observer,
            m: M10::zeros(),
            b: V10::zeros(),
            hcp: V10::zeros(),
        }
    }
}

/// Indices into `v` and signs building the 8 frame columns of host and observer.
const HOST_SEL: [(usize, f64); 8] = [(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0), (4, 1.0), (5, 1.0), (6, 1.0), (7, 1.0)];
const OBS_SEL: [(usize, f64); 8] = [
    (0, -1.0),
    (1, -1.0),
    (2, -1.0),
    (3, -1.0),
    (4, -1.0),
    (5, -1.0),
    (8, 1.0),
    (9, 1.0),
];

/// One scalar residual of a point with its kernel weight, for dense assembly.
#[derive(Clone, Copy, Debug)]
pub(super) struct ResidualRow {
    pub host: usize,
    /// `None` for the host depth residual.
    pub observer: Option<usize>,
    pub residual: f64,
    pub weight: f64,
    pub jacobians: ResidualJacobians,
}

#[derive(Default)]
pub(super) struct PointEval {
    pub cost: f64,
    pub h_pp: f64,
    pub b_p: f64,
    pairs: Vec<PairBlock>,
    pub rows: Vec<ResidualRow>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(super) enum Mode {
    Cost,
    Normal,
    Rows,
}

fn compact(j: &ResidualJacobians) -> V10 {
    let mut v = V10::zeros();
    v.fixed_rows_mut::<6>(0).copy_from(&j.d_xi_host.transpose());
    v[6] = j.d_affine_host.x;
    v[7] = j.d_affine_host.y;
    v[8] = j.d_affine_observer.x;
    v[9] = j.d_affine_observer.y;
    v
}

impl PointEval {
    fn add(&mut self, pair: Option<usize>, r: f64, w: f64, j: &ResidualJacobians) {
        self.h_pp += w * j.d_rho * j.d_rho;
        self.b_p += w * j.d_rho * r;
        if let Some(k) = pair {
            if w != 0.0 {
                let v = compact(j);
                let blk = &mut self.pairs[k];
                blk.m.syger(w, &v, &v, 1.0);
                blk.b.axpy(w * r, &v, 1.0);
                blk.hcp.axpy(w * j.d_rho, &v, 1.0);
            }
        }
    }
}

impl BaProblem {
    fn point_params(p: &BaPoint) -> PointParams {
        PointParams {
            host_pixel: p.host_pixel,
            rho: p.rho,
        }
    }

    pub(super) fn delta_sum(&self) -> f64 {
        self.params.huber_delta * (PATTERN_LEN as f64).sqrt()
    }

    /// Photometric cost and, in `Normal`/`Rows` mode, linear terms of one
    /// host/observer pair. Returns `Err` only for a non-positive ρ.
    fn eval_photo(
        &self,
        p: &BaPoint,
        observer: usize,
        level: usize,
        mode: Mode,
        pair: usize,
        out: &mut PointEval,
    ) -> Result<(), ResidualError> {
        let host = &self.frames[p.host];
        let obs = &self.frames[observer];
        let hv = FrameView {
            pose: host.pose,
            affine: host.affine,
            image: host.pyramid.level(level),
        };
        let ov = FrameView {
            pose: obs.pose,
            affine: obs.affine,
            image: obs.pyramid.level(level),
        };
        let pp = Self::point_params(p);
        let delta = self.params.huber_delta;
        let lin = match mode {
            Mode::Cost => photo_residual_masked(&pp, &hv, &ov, &self.camera, level).map(|residual| {
                crate::residuals::PhotoLinearization {
                    residual,
                    jacobians: [ResidualJacobians::default(); PATTERN_LEN],
                }
            }),
            _ => photo_linearize_masked(&pp, &hv, &ov, &self.camera, level),
        };
        let lin = match lin {
            Ok(l) => l,
            Err(ResidualError::NonPositiveInverseDepth) => return Err(ResidualError::NonPositiveInverseDepth),
            Err(_) => {
                out.cost += PATTERN_LEN as f64 * delta * delta;
                return Ok(());
            }
        };
        match self.params.aggregation {
            PhotoAggregation::PerPixel => {
                for k in 0..PATTERN_LEN {
                    if !lin.residual.valid[k] {
                        out.cost += delta * delta;
                        continue;
                    }
                    let r = lin.residual.residuals[k];
                    let kernel = huber(r * r, delta);
                    out.cost += kernel.cost;
                    self.push(out, mode, pair, p.host, Some(observer), r, kernel.weight, &lin.jacobians[k]);
                }
            }
            PhotoAggregation::PatchSum => {
                let ds = self.delta_sum();
                if !lin.residual.all_valid() {
                    out.cost += ds * ds;
                    return Ok(());
                }
                let r = lin.residual.patch_sum();
                let kernel = huber(r * r, ds);
                out.cost += kernel.cost;
                let j = lin.patch_sum_jacobian();
                self.push(out, mode, pair, p.host, Some(observer), r, kernel.weight, &j);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &self,
        out: &mut PointEval,
        mode: Mode,
        pair: usize,
        host: usize,
        observer: Option<usize>,
        r: f64,
        w: f64,
        j: &ResidualJacobians,
    ) {
        match mode {
            Mode::Cost => {}
            Mode::Normal => out.add(observer.map(|_| pair), r, w, j),
            Mode::Rows => out.rows.push(ResidualRow {
                host,
                observer,
                residual: r,
                weight: w,
                jacobians: *j,
            }),
        }
    }

    /// Cost and linear terms of every residual of point `index`.
    pub(super) fn eval_point(&self, index: usize, level: usize, mode: Mode) -> PointEval {
        let p = &self.points[index];
        let mut out = PointEval::default();
        if !(p.rho > 0.0) || !p.rho.is_finite() {
            out.cost = f64::INFINITY;
            return out;
        }
        let k2 = self.params.depth_weight * self.params.depth_weight;
        let tau = self.params.tls_tau;
        let host = &self.frames[p.host];
        if mode == Mode::Normal {
            out.pairs = p.observers.iter().map(|&o| PairBlock::new(p.host, o)).collect();
        }
        for (pair, &o) in p.observers.iter().enumerate() {
            if self.eval_photo(p, o, level, mode, pair, &mut out).is_err() {
                out.cost = f64::INFINITY;
                return out;
            }
            if k2 == 0.0 {
                continue;
            }
            let obs = &self.frames[o];
            let pp = Self::point_params(p);
            let Ok(t) = center_transport(&pp, &host.pose, &obs.pose, &self.camera) else {
                continue;
            };
            let Ok((res, j)) = depth_jacobian_with(&t, p.rho, obs.raster.as_ref()) else {
                continue;
            };
            let kernel = tls(res.residual * res.residual, tau);
            out.cost += k2 * kernel.cost;
            self.push(&mut out, mode, pair, p.host, Some(o), res.residual, k2 * kernel.weight, &j);
        }
        if k2 != 0.0 {
            if let Some(d) = host.raster.interpolate(p.host_pixel.x, p.host_pixel.y) {
                let r = d - p.rho;
                let kernel = tls(r * r, tau);
                out.cost += k2 * kernel.cost;
                let j = crate::residuals::depth_host_jacobian();
                self.push(&mut out, mode, 0, p.host, None, r, k2 * kernel.weight, &j);
            }
        }
        out
    }

    pub(super) fn prior_cost(&self) -> f64 {
        let w = self.params.affine_prior_weight;
        self.frames
            .iter()
            .filter(|f| f.affine_free())
            .map(|f| w * ((f.affine.a - f.affine_prior.a).powi(2) + (f.affine.b - f.affine_prior.b).powi(2)))
            .sum()
    }

    /// Total robust cost at pyramid `level`.
    pub fn cost(&self, level: usize) -> f64 {
        let idx: Vec<usize> = (0..self.points.len()).collect();
        let costs = map_ordered(&idx, self.params.threads, |&j| self.eval_point(j, level, Mode::Cost).cost);
        costs.iter().sum::<f64>() + self.prior_cost()
    }

    /// Block index of every frame that has parameters (`None` when fixed).
    pub(super) fn blocks(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.frames
            .iter()
            .map(|f| {
                (f.freedom != Freedom::Fixed).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    /// Columns of the block layout that are actually optimized.
    pub(super) fn active_columns(&self) -> Vec<usize> {
        let blocks = self.blocks();
        let mut cols = Vec::new();
        for (f, b) in self.frames.iter().zip(&blocks) {
            let Some(b) = b else { continue };
            if f.pose_free() {
                cols.extend(8 * b..8 * b + 6);
            }
            cols.extend(8 * b + 6..8 * b + 8);
        }
        cols
    }

    /// Normal equations with points kept separate for elimination.
    pub(super) fn linearize(&self, level: usize) -> Linearization {
        let blocks = self.blocks();
        let nb = 8 * blocks.iter().flatten().count();
        let idx: Vec<usize> = (0..self.points.len()).collect();
        let evals = map_ordered(&idx, self.params.threads, |&j| self.eval_point(j, level, Mode::Normal));
        let mut h_cc = DMatrix::zeros(nb, nb);
        let mut b_c = DVector::zeros(nb);
        let mut cost = 0.0;
        let mut points = Vec::with_capacity(evals.len());
        for e in evals {
            cost += e.cost;
            let mut coupling: Vec<(usize, V8)> = Vec::new();
            let mut add_coupling = |blk: usize, c: V8| match coupling.iter_mut().find(|(b, _)| *b == blk) {
                Some((_, acc)) => *acc += c,
                None => coupling.push((blk, c)),
            };
            for pair in &e.pairs {
                let mut m = pair.m;
                m.fill_upper_triangle_with_lower_triangle();
                let ends = [(blocks[pair.host], &HOST_SEL), (blocks[pair.observer], &OBS_SEL)];
                for &(ba, sa) in &ends {
                    let Some(ba) = ba else { continue };
                    let mut c = V8::zeros();
                    for (i, &(vi, si)) in sa.iter().enumerate() {
                        b_c[8 * ba + i] += si * pair.b[vi];
                        c[i] = si * pair.hcp[vi];
                    }
                    add_coupling(ba, c);
                    for &(bb, sb) in &ends {
                        let Some(bb) = bb else { continue };
                        for (i, &(vi, si)) in sa.iter().enumerate() {
                            for (k, &(vk, sk)) in sb.iter().enumerate() {
                                h_cc[(8 * ba + i, 8 * bb + k)] += si * sk * m[(vi, vk)];
                            }
                        }
                    }
                }
            }
            points.push(PointTerm {
                h_pp: e.h_pp,
                b_p: e.b_p,
                coupling,
            });
        }
        cost += self.prior_cost();
        let w = self.params.affine_prior_weight;
        for (f, b) in self.frames.iter().zip(&blocks) {
            let Some(b) = b else { continue };
            for (i, (v, v0)) in [(f.affine.a, f.affine_prior.a), (f.affine.b, f.affine_prior.b)]
                .into_iter()
                .enumerate()
            {
                h_cc[(8 * b + 6 + i, 8 * b + 6 + i)] += w;
                b_c[8 * b + 6 + i] += w * (v - v0);
            }
        }
        Linearization {
            cost,
            h_cc,
            b_c,
            points,
        }
    }

    /// Every weighted scalar residual of point `index` at `level`.
    pub(super) fn residual_rows(&self, index: usize, level: usize) -> Vec<ResidualRow> {
        self.eval_point(index, level, Mode::Rows).rows
    }
}

pub(super) struct PointTerm {
    pub h_pp: f64,
    pub b_p: f64,
    /// `H_cp` restricted to the frame blocks this point touches.
    pub coupling: Vec<(usize, V8)>,
}

pub struct Linearization {
    pub cost: f64,
    pub(super) h_cc: DMatrix<f64>,
    pub(super) b_c: DVector<f64>,
    pub(super) points: Vec<PointTerm>,
}
