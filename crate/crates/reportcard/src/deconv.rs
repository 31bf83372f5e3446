//! Penalized log-spline deconvolution of the latent mixing distribution.
//!
//! The mixing distribution lives on a dense equally spaced grid; its masses
//! are a softmax of a natural-spline expansion, `g_m = exp(q_m' alpha -
//! logsumexp(Q alpha))`. Coefficients maximize the marginal log-likelihood
//! of the noisy estimates minus a penalty `c * sqrt(alpha' alpha)`, by
//! damped Newton ascent started from `alpha = 0` (the uniform
//! distribution), with a gradient-ascent fallback. The penalty is calibrated
//! so that the implied moments match method-of-moments targets as closely as
//! possible, with ties broken toward the larger penalty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::UnitRecord;
use crate::optim::golden_section;
use crate::par;
use crate::spline::{BasisKind, SplineBasis};

pub const DEFAULT_SPLINE_ORDER: usize = 5;
pub const DEFAULT_BASIS: BasisKind = BasisKind::OrthogonalNatural;

/// Discrete-grid exponential-family mixing distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineMixing {
    /// Ascending support grid.
    pub support: Vec<f64>,
    /// Basis specification; absent for externally constructed mixings.
    pub basis: Option<SplineBasis>,
    pub alpha: Vec<f64>,
    /// Softmax masses; nonnegative, summing to one.
    pub masses: Vec<f64>,
    pub penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl SplineMixing {
    /// Assemble a mixing distribution from explicit masses (normalized here).
    pub fn from_parts(support: Vec<f64>, masses: Vec<f64>, penalty: f64) -> Self {
        let total: f64 = masses.iter().sum();
        let masses = masses.iter().map(|m| m / total).collect();
        SplineMixing {
            support,
            basis: None,
            alpha: Vec::new(),
            masses,
            penalty,
        }
    }

    /// Recompute masses from the stored coefficients; identical to `masses`
    /// for a fitted object.
    pub fn masses_from_alpha(&self) -> Option<Vec<f64>> {
        let basis = self.basis?;
        let q = basis.evaluate(&self.support);
        let alpha = DVector::from_column_slice(&self.alpha);
        Some(softmax(&(q * alpha)))
    }

    /// Exact discrete moments of the grid distribution.
    pub fn moments(&self) -> Moments {
        moments_of(&self.support, &self.masses)
    }

    /// Moments of `scale * v` mixed over a collection of per-unit scales
    /// (the theta-scale marginal when scales are `s_i^beta`).
    pub fn scaled_moments(&self, scales: &[f64]) -> Moments {
        let raw: Vec<f64> = (1..=4)
            .map(|k| {
                let ev: f64 = self
                    .support
                    .iter()
                    .zip(&self.masses)
                    .map(|(x, w)| x.powi(k) * w)
                    .sum();
                let sk = scales.iter().map(|s| s.powi(k)).sum::<f64>() / scales.len() as f64;
                sk * ev
            })
            .collect();
        central_moments(raw[0], raw[1], raw[2], raw[3])
    }
}

fn moments_of(support: &[f64], masses: &[f64]) -> Moments {
    let raw = |k: i32| -> f64 {
        support
            .iter()
            .zip(masses)
            .map(|(x, w)| x.powi(k) * w)
            .sum()
    };
    central_moments(raw(1), raw(2), raw(3), raw(4))
}

fn central_moments(m1: f64, m2: f64, m3: f64, m4: f64) -> Moments {
    let var = (m2 - m1 * m1).max(0.0);
    let sd = var.sqrt();
    let mu3 = m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3);
    let mu4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
    Moments {
        mean: m1,
        sd,
        skewness: if sd > 0.0 { mu3 / sd.powi(3) } else { 0.0 },
        excess_kurtosis: if sd > 0.0 { mu4 / (sd * sd * sd * sd) - 3.0 } else { 0.0 },
    }
}

fn softmax(u: &DVector<f64>) -> Vec<f64> {
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = u.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= total;
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SupportConfig {
    /// Number of grid points.
    pub points: usize,
    /// Lower limit of the support.
    pub floor: f64,
}

impl Default for SupportConfig {
    fn default() -> Self {
        SupportConfig {
            points: 1000,
            floor: 0.0,
        }
    }
}

/// Equally spaced support from the floor to the larger of the empirical
/// maximum and five standard deviations above the estimated mean.
pub fn build_support(estimates: &[f64], mean: f64, sd: f64, cfg: &SupportConfig) -> Result<Vec<f64>> {
    if estimates.is_empty() {
        return Err(Error::domain("cannot build a support from no estimates"));
    }
    let emp_max = estimates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let upper = emp_max.max(mean + 5.0 * sd);
    if !(upper > cfg.floor) {
        return Err(Error::domain(format!(
            "degenerate support: upper {upper} <= floor {}",
            cfg.floor
        )));
    }
    let m = cfg.points.max(2);
    Ok((0..m)
        .map(|i| cfg.floor + (upper - cfg.floor) * i as f64 / (m - 1) as f64)
        .collect())
}

/// Log Gaussian kernel rows: `LK[i][m] = -(vhat_i - x_m)^2 / (2 noise_i^2)`,
/// up to the per-unit constant that cancels in the posterior and enters the
/// likelihood only additively.
fn log_kernel(units: &[UnitRecord], beta: f64, support: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let rows = par::map_slice(units, |u| {
        let scale = u.se.powf(beta);
        let noise = u.se.powf(1.0 - beta);
        let vhat = u.estimate / scale;
        support
            .iter()
            .map(|&x| {
                let z = (vhat - x) / noise;
                -0.5 * z * z - noise.ln()
            })
            .collect::<Vec<f64>>()
    });
    let consts = units.iter().map(|_| 0.0).collect();
    (rows, consts)
}

struct PenalizedFit {
    alpha: DVector<f64>,
    masses: Vec<f64>,
    grad_norm: f64,
}

/// Damped Newton ascent of the penalized likelihood from `alpha = 0`.
fn ascend(
    q: &DMatrix<f64>,
    log_kernel_rows: &[Vec<f64>],
    penalty: f64,
    start: Option<&DVector<f64>>,
) -> PenalizedFit {
    let b = q.ncols();
    let n = log_kernel_rows.len();
    let eps = 1e-12;

    let evaluate = |alpha: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
        let u = q * alpha;
        let g = softmax(&u);
        let lg: Vec<f64> = g.iter().map(|&v| v.max(1e-300).ln()).collect();
        // responsibilities and likelihood, row by row
        let per_unit = par::map_slice(log_kernel_rows, |row| {
            let mut max = f64::NEG_INFINITY;
            for (m, lk) in row.iter().enumerate() {
                let v = lk + lg[m];
                if v > max {
                    max = v;
                }
            }
            let mut total = 0.0;
            let mut w: Vec<f64> = Vec::with_capacity(row.len());
            for (m, lk) in row.iter().enumerate() {
                let v = (lk + lg[m] - max).exp();
                total += v;
                w.push(v);
            }
            for v in w.iter_mut() {
                *v /= total;
            }
            (max + total.ln(), w)
        });
        let loglik: f64 = per_unit.iter().map(|(ll, _)| ll).sum();
        // sum of responsibilities and sum of outer products (via Q'w_i)
        let mut wbar = vec![0.0; g.len()];
        let mut qtw_outer = DMatrix::zeros(b, b);
        let mut qtw_sum = DVector::zeros(b);
        for (_, w) in &per_unit {
            let mut qtw = DVector::zeros(b);
            for (m, &wm) in w.iter().enumerate() {
                if wm > 0.0 {
                    for c in 0..b {
                        qtw[c] += q[(m, c)] * wm;
                    }
                }
            }
            qtw_outer += &qtw * qtw.transpose();
            qtw_sum += &qtw;
            for (m, &wm) in w.iter().enumerate() {
                wbar[m] += wm;
            }
        }
        let qtg = {
            let mut v = DVector::zeros(b);
            for (m, &gm) in g.iter().enumerate() {
                for c in 0..b {
                    v[c] += q[(m, c)] * gm;
                }
            }
            v
        };
        let norm = (alpha.dot(alpha) + eps).sqrt();
        let objective = loglik - penalty * norm;
        let grad = {
            let mut v = qtw_sum.clone();
            v -= &qtg * n as f64;
            v -= alpha * (penalty / norm);
            v
        };
        // Hessian: Q' diag(wbar) Q - sum_i (Q'w_i)(Q'w_i)'
        //        - n [Q' diag(g) Q - (Q'g)(Q'g)'] - penalty curvature
        let mut h = DMatrix::zeros(b, b);
        for m in 0..g.len() {
            let w_eff = wbar[m] - n as f64 * g[m];
            if w_eff != 0.0 {
                for r in 0..b {
                    let qr = q[(m, r)];
                    for c in 0..b {
                        h[(r, c)] += w_eff * qr * q[(m, c)];
                    }
                }
            }
        }
        h -= &qtw_outer;
        h += &qtg * qtg.transpose() * n as f64;
        let pen_h = DMatrix::identity(b, b) * (penalty / norm)
            - alpha * alpha.transpose() * (penalty / norm.powi(3));
        h -= pen_h;
        (objective, grad, h)
    };

    let mut alpha = start.cloned().unwrap_or_else(|| DVector::zeros(b));
    let (mut obj, mut grad, mut hess) = evaluate(&alpha);
    let mut damping = 1e-4;
    for _ in 0..400 {
        if grad.norm() < 1e-9 * (1.0 + obj.abs()) {
            break;
        }
        let mut stepped = false;
        for _ in 0..60 {
            let lhs = -&hess + DMatrix::identity(b, b) * damping;
            let step = lhs.lu().solve(&grad);
            match step {
                Some(step) if step.iter().all(|v| v.is_finite()) => {
                    let cand = &alpha + &step;
                    let (new_obj, new_grad, new_hess) = evaluate(&cand);
                    if new_obj > obj - 1e-13 {
                        alpha = cand;
                        obj = new_obj;
                        grad = new_grad;
                        hess = new_hess;
                        damping = (damping / 3.0).max(1e-10);
                        stepped = true;
                        break;
                    }
                    damping *= 10.0;
                }
                _ => damping *= 10.0,
            }
            if damping > 1e14 {
                break;
            }
        }
        if !stepped {
            // gradient ascent with backtracking line search
            let mut t = 1.0 / (1.0 + grad.norm());
            let mut moved = false;
            for _ in 0..50 {
                let cand = &alpha + &grad * t;
                let (new_obj, new_grad, new_hess) = evaluate(&cand);
                if new_obj > obj + 1e-13 {
                    alpha = cand;
                    obj = new_obj;
                    grad = new_grad;
                    hess = new_hess;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }
    let u = q * &alpha;
    PenalizedFit {
        masses: softmax(&u),
        grad_norm: grad.norm(),
        alpha,
    }
}

/// Fit the mixing distribution of `v = theta / s^beta` by penalized maximum
/// likelihood on the given support.
pub fn fit_logspline(
    units: &[UnitRecord],
    beta: f64,
    support: &[f64],
    penalty: f64,
    kind: BasisKind,
    order: usize,
) -> Result<SplineMixing> {
    if units.is_empty() {
        return Err(Error::estimation("cannot fit a mixing from no units"));
    }
    if !(penalty >= 0.0) {
        return Err(Error::domain(format!("penalty must be nonnegative, got {penalty}")));
    }
    let basis = SplineBasis::new(kind, support[0], support[support.len() - 1], order);
    let q = basis.evaluate(support);
    let (lk, _) = log_kernel(units, beta, support);
    let fit = ascend(&q, &lk, penalty, None);
    if fit.grad_norm > 1e-6 * (1.0 + units.len() as f64) {
        return Err(Error::estimation(format!(
            "log-spline ascent stalled: |grad| = {:.3e}",
            fit.grad_norm
        )));
    }
    Ok(SplineMixing {
        support: support.to_vec(),
        basis: Some(basis),
        alpha: fit.alpha.iter().cloned().collect(),
        masses: fit.masses,
        penalty,
    })
}

/// Calibration targets: moments the fitted mixing should reproduce, with an
/// inverse-covariance weighting from the moment estimator.
#[derive(Debug, Clone, Copy)]
pub struct MomentTargets {
    pub mean: f64,
    pub sd: f64,
    /// Inverse covariance of (mean, sd) estimates.
    pub weight: [[f64; 2]; 2],
}

impl MomentTargets {
    pub fn distance(&self, m: &Moments) -> f64 {
        let d = [m.mean - self.mean, m.sd - self.sd];
        let w = &self.weight;
        d[0] * (w[0][0] * d[0] + w[0][1] * d[1]) + d[1] * (w[1][0] * d[0] + w[1][1] * d[1])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CalibratedPenalty {
    pub penalty: f64,
    pub criterion: f64,
    /// The search hit the boundary of the penalty domain.
    pub at_boundary: bool,
}

const PENALTY_LO: f64 = 1e-4;
const PENALTY_HI: f64 = 1e4;

/// Choose the penalty whose fitted moments are closest to the targets:
/// coarse scan over log-penalty, golden-section polish, ties broken toward
/// the larger penalty.
pub fn calibrate_penalty(
    units: &[UnitRecord],
    beta: f64,
    support: &[f64],
    targets: &MomentTargets,
    kind: BasisKind,
    order: usize,
) -> Result<CalibratedPenalty> {
    let basis = SplineBasis::new(kind, support[0], support[support.len() - 1], order);
    let q = basis.evaluate(support);
    let (lk, _) = log_kernel(units, beta, support);
    let crit = |log_c: f64| -> f64 {
        let fit = ascend(&q, &lk, log_c.exp(), None);
        let m = moments_of(support, &fit.masses);
        targets.distance(&m)
    };
    Ok(search_penalty(&crit, 33))
}

/// Shared penalty search: coarse log-grid scan, golden-section polish of
/// the minimum, then extension to the largest penalty whose criterion still
/// ties the minimum (within half of its value). The targets carry sampling
/// error of order one in these units, so sub-tie differences in match
/// quality are noise and the smoothest qualifying fit is preferred.
fn search_penalty(crit: &dyn Fn(f64) -> f64, grid_n: usize) -> CalibratedPenalty {
    let (lo, hi) = (PENALTY_LO.ln(), PENALTY_HI.ln());
    let grid: Vec<f64> = (0..grid_n)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_n - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&c| crit(c)).collect();
    let min_ix = (0..grid_n)
        .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap())
        .unwrap();
    let a = grid[min_ix.saturating_sub(1)];
    let b = grid[(min_ix + 1).min(grid_n - 1)];
    let (log_c_min, mut crit_min) = if b > a {
        golden_section(crit, a, b, 20)
    } else {
        (grid[min_ix], values[min_ix])
    };
    crit_min = crit_min.min(values[min_ix]);
    let threshold = 1.5 * crit_min + 1e-12;

    // largest grid point still tying the minimum
    let mut edge_ix = min_ix;
    for i in min_ix..grid_n {
        if values[i] <= threshold {
            edge_ix = i;
        }
    }
    let mut log_c = grid[edge_ix].max(log_c_min);
    if edge_ix + 1 < grid_n {
        // bisect the tie boundary between the edge and the next grid point
        let (mut inside, mut outside) = (log_c, grid[edge_ix + 1]);
        for _ in 0..30 {
            let mid = 0.5 * (inside + outside);
            if crit(mid) <= threshold {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        log_c = inside;
    }
    CalibratedPenalty {
        penalty: log_c.exp(),
        criterion: crit(log_c),
        at_boundary: edge_ix == grid_n - 1 || min_ix == 0,
    }
}

// ---------------------------------------------------------------------------
// hierarchical estimator
// ---------------------------------------------------------------------------

/// Grouped data view used by the hierarchical likelihood.
struct GroupedData {
    /// `vhat` per unit, grouped.
    groups: Vec<Vec<usize>>,
    vhat: Vec<f64>,
    noise: Vec<f64>,
}

fn grouped_data(units: &[UnitRecord], beta: f64) -> Result<GroupedData> {
    let mut labels: Vec<&str> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, u) in units.iter().enumerate() {
        let g = u
            .group
            .as_deref()
            .ok_or_else(|| Error::domain(format!("unit `{}` has no group label", u.id)))?;
        match labels.iter().position(|l| *l == g) {
            Some(ix) => groups[ix].push(i),
            None => {
                labels.push(g);
                groups.push(vec![i]);
            }
        }
    }
    Ok(GroupedData {
        groups,
        vhat: units
            .iter()
            .map(|u| u.estimate / u.se.powf(beta))
            .collect(),
        noise: units.iter().map(|u| u.se.powf(1.0 - beta)).collect(),
    })
}

/// Joint penalized likelihood machinery for the two-level model. The
/// between-group mixing is constrained to mean one.
struct HierFit<'a> {
    data: &'a GroupedData,
    eta_support: &'a [f64],
    xi_support: &'a [f64],
    q_eta: DMatrix<f64>,
    q_xi: DMatrix<f64>,
    /// `log phi((vhat_i - eta_l xi_m) / noise_i)` flattened (i, l, m).
    kernel: Vec<f64>,
    c_eta: f64,
    c_xi: f64,
}

impl<'a> HierFit<'a> {
    fn new(
        data: &'a GroupedData,
        eta_support: &'a [f64],
        xi_support: &'a [f64],
        q_eta: DMatrix<f64>,
        q_xi: DMatrix<f64>,
        c_eta: f64,
        c_xi: f64,
    ) -> Self {
        let m_eta = eta_support.len();
        let m_xi = xi_support.len();
        let n = data.vhat.len();
        let kernel_rows = par::map_range(n, |i| {
            let mut row = vec![0.0; m_eta * m_xi];
            let vhat = data.vhat[i];
            let noise = data.noise[i];
            for (l, &e) in eta_support.iter().enumerate() {
                for (m, &x) in xi_support.iter().enumerate() {
                    let z = (vhat - e * x) / noise;
                    row[l * m_xi + m] = -0.5 * z * z - noise.ln();
                }
            }
            row
        });
        let mut kernel = Vec::with_capacity(n * m_eta * m_xi);
        for row in kernel_rows {
            kernel.extend_from_slice(&row);
        }
        HierFit {
            data,
            eta_support,
            xi_support,
            q_eta,
            q_xi,
            kernel,
            c_eta,
            c_xi,
        }
    }

    fn b_eta(&self) -> usize {
        self.q_eta.ncols()
    }

    fn b_xi(&self) -> usize {
        self.q_xi.ncols()
    }

    /// Penalized log-likelihood and its analytic gradient.
    fn objective_grad(&self, alpha: &DVector<f64>) -> (f64, DVector<f64>) {
        let (be, bx) = (self.b_eta(), self.b_xi());
        let a_eta = alpha.rows(0, be).into_owned();
        let a_xi = alpha.rows(be, bx).into_owned();
        let g_eta = softmax(&(&self.q_eta * &a_eta));
        let g_xi = softmax(&(&self.q_xi * &a_xi));
        let lg_xi: Vec<f64> = g_xi.iter().map(|v| v.max(1e-300).ln()).collect();
        let lg_eta: Vec<f64> = g_eta.iter().map(|v| v.max(1e-300).ln()).collect();
        let m_eta = self.eta_support.len();
        let m_xi = self.xi_support.len();
        let n = self.data.vhat.len();

        // per-unit, per-eta: A[i][l] = logsumexp_m(lg_xi + kernel),
        // W[i][l][m] responsibilities
        let per_unit: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n, |i| {
            let base = i * m_eta * m_xi;
            let mut a_row = vec![0.0; m_eta];
            let mut w_row = vec![0.0; m_eta * m_xi];
            for l in 0..m_eta {
                let offset = base + l * m_xi;
                let mut max = f64::NEG_INFINITY;
                for m in 0..m_xi {
                    let v = self.kernel[offset + m] + lg_xi[m];
                    if v > max {
                        max = v;
                    }
                }
                let mut total = 0.0;
                for m in 0..m_xi {
                    let v = (self.kernel[offset + m] + lg_xi[m] - max).exp();
                    w_row[l * m_xi + m] = v;
                    total += v;
                }
                for m in 0..m_xi {
                    w_row[l * m_xi + m] /= total;
                }
                a_row[l] = max + total.ln();
            }
            (a_row, w_row)
        });

        let mut loglik = 0.0;
        let mut d_eta = vec![0.0; m_eta]; // sum_k (r_k - g_eta)
        let mut d_xi = vec![0.0; m_xi]; // sum_i sum_l r_{k(i),l} (w_il - g_xi)
        for group in &self.data.groups {
            let mut b_l = vec![0.0; m_eta];
            for l in 0..m_eta {
                b_l[l] = lg_eta[l];
                for &i in group {
                    b_l[l] += per_unit[i].0[l];
                }
            }
            let max = b_l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            let mut r = vec![0.0; m_eta];
            for l in 0..m_eta {
                let v = (b_l[l] - max).exp();
                r[l] = v;
                total += v;
            }
            for v in r.iter_mut() {
                *v /= total;
            }
            loglik += max + total.ln();
            for l in 0..m_eta {
                d_eta[l] += r[l] - g_eta[l];
                if r[l] > 1e-300 {
                    for &i in group {
                        let w = &per_unit[i].1;
                        for m in 0..m_xi {
                            d_xi[m] += r[l] * (w[l * m_xi + m] - g_xi[m]);
                        }
                    }
                }
            }
        }

        let eps = 1e-12;
        let n_eta = (a_eta.dot(&a_eta) + eps).sqrt();
        let n_xi = (a_xi.dot(&a_xi) + eps).sqrt();
        let objective = loglik - self.c_eta * n_eta - self.c_xi * n_xi;

        let mut grad = DVector::zeros(be + bx);
        for c in 0..be {
            let mut v = 0.0;
            for l in 0..m_eta {
                v += self.q_eta[(l, c)] * d_eta[l];
            }
            grad[c] = v - self.c_eta * a_eta[c] / n_eta;
        }
        for c in 0..bx {
            let mut v = 0.0;
            for m in 0..m_xi {
                v += self.q_xi[(m, c)] * d_xi[m];
            }
            grad[be + c] = v - self.c_xi * a_xi[c] / n_xi;
        }
        (objective, grad)
    }

    /// Mean-one constraint on the between-group mixing and its gradient.
    fn constraint(&self, alpha: &DVector<f64>) -> (f64, DVector<f64>) {
        let be = self.b_eta();
        let a_eta = alpha.rows(0, be).into_owned();
        let g_eta = softmax(&(&self.q_eta * &a_eta));
        let mean: f64 = self
            .eta_support
            .iter()
            .zip(&g_eta)
            .map(|(x, w)| x * w)
            .sum();
        let mut grad = DVector::zeros(alpha.len());
        for c in 0..be {
            let mut v = 0.0;
            for (l, &x) in self.eta_support.iter().enumerate() {
                v += g_eta[l] * (x - mean) * self.q_eta[(l, c)];
            }
            grad[c] = v;
        }
        (mean - 1.0, grad)
    }

    /// Equality-constrained maximization by damped SQP with a
    /// finite-difference Hessian of the analytic gradient.
    fn solve(&self, start: Option<&DVector<f64>>) -> Result<(DVector<f64>, f64)> {
        let dim = self.b_eta() + self.b_xi();
        let mut alpha = start.cloned().unwrap_or_else(|| DVector::zeros(dim));
        let fd_hessian = |a: &DVector<f64>| -> DMatrix<f64> {
            let mut h = DMatrix::zeros(dim, dim);
            let step = 1e-5;
            let cols: Vec<DVector<f64>> = par::map_range(dim, |j| {
                let mut hi = a.clone();
                let mut lo = a.clone();
                hi[j] += step;
                lo[j] -= step;
                let (_, ghi) = self.objective_grad(&hi);
                let (_, glo) = self.objective_grad(&lo);
                (ghi - glo) / (2.0 * step)
            });
            for (j, col) in cols.iter().enumerate() {
                for r in 0..dim {
                    h[(r, j)] = col[r];
                }
            }
            // symmetrize
            let ht = h.transpose();
            (h + ht) * 0.5
        };

        let merit_rho = 50.0;
        let (mut obj, mut grad) = self.objective_grad(&alpha);
        let (mut h_val, mut h_grad) = self.constraint(&alpha);
        let mut damping = 1e-3;
        for _ in 0..200 {
            let kkt_ok = grad
                .iter()
                .zip(h_grad.iter())
                .map(|(g, a)| g - a * 0.0)
                .map(|v| v * v)
                .sum::<f64>();
            let _ = kkt_ok;
            // projected gradient norm: grad minus its component along h_grad
            let hg_norm2 = h_grad.dot(&h_grad);
            let proj = if hg_norm2 > 0.0 {
                &grad - &h_grad * (grad.dot(&h_grad) / hg_norm2)
            } else {
                grad.clone()
            };
            if proj.norm() < 1e-7 && h_val.abs() < 1e-11 {
                break;
            }
            let hess = fd_hessian(&alpha);
            let mut stepped = false;
            for _ in 0..40 {
                // KKT system for maximize obj s.t. h = 0
                let mut kkt = DMatrix::zeros(dim + 1, dim + 1);
                for r in 0..dim {
                    for c in 0..dim {
                        kkt[(r, c)] = -hess[(r, c)];
                    }
                    kkt[(r, r)] += damping;
                    kkt[(r, dim)] = h_grad[r];
                    kkt[(dim, r)] = h_grad[r];
                }
                let mut rhs = DVector::zeros(dim + 1);
                for r in 0..dim {
                    rhs[r] = grad[r];
                }
                rhs[dim] = -h_val;
                match kkt.lu().solve(&rhs) {
                    Some(sol) if sol.iter().all(|v| v.is_finite()) => {
                        let step = sol.rows(0, dim).into_owned();
                        let cand = &alpha + &step;
                        let (new_obj, new_grad) = self.objective_grad(&cand);
                        let (new_h, new_hg) = self.constraint(&cand);
                        let merit_old = -obj + merit_rho * h_val.abs();
                        let merit_new = -new_obj + merit_rho * new_h.abs();
                        if merit_new < merit_old - 1e-13 {
                            alpha = cand;
                            obj = new_obj;
                            grad = new_grad;
                            h_val = new_h;
                            h_grad = new_hg;
                            damping = (damping / 3.0).max(1e-9);
                            stepped = true;
                            break;
                        }
                        damping *= 8.0;
                    }
                    _ => damping *= 8.0,
                }
                if damping > 1e13 {
                    break;
                }
            }
            if !stepped {
                break;
            }
        }
        // final exact projection onto the constraint via a small Newton in
        // the constraint direction
        for _ in 0..50 {
            if h_val.abs() < 1e-12 {
                break;
            }
            let hg_norm2 = h_grad.dot(&h_grad);
            if hg_norm2 <= 0.0 {
                break;
            }
            alpha -= &h_grad * (h_val / hg_norm2);
            let (v, g) = self.constraint(&alpha);
            h_val = v;
            h_grad = g;
        }
        let (_, grad) = self.objective_grad(&alpha);
        let hg_norm2 = h_grad.dot(&h_grad);
        let proj = if hg_norm2 > 0.0 {
            &grad - &h_grad * (grad.dot(&h_grad) / hg_norm2)
        } else {
            grad.clone()
        };
        if proj.norm() > 1e-4 {
            return Err(Error::estimation(format!(
                "hierarchical ascent stalled: projected |grad| = {:.3e}, |constraint| = {:.3e}",
                proj.norm(),
                h_val.abs()
            )));
        }
        Ok((alpha, h_val))
    }
}

/// Fit the two-level mixing distributions by penalized maximum likelihood
/// subject to the mean-one normalization of the between-group component.
/// A single-point eta support at 1.0 reduces exactly to [`fit_logspline`].
pub fn fit_hierarchical(
    units: &[UnitRecord],
    beta: f64,
    eta_support: &[f64],
    xi_support: &[f64],
    c_eta: f64,
    c_xi: f64,
    kind: BasisKind,
    order: usize,
) -> Result<(SplineMixing, SplineMixing)> {
    if eta_support.len() == 1 {
        if (eta_support[0] - 1.0).abs() > 1e-12 {
            return Err(Error::domain(
                "degenerate between-group support must sit at 1.0",
            ));
        }
        let xi = fit_logspline(units, beta, xi_support, c_xi, kind, order)?;
        let eta = SplineMixing {
            support: vec![1.0],
            basis: None,
            alpha: Vec::new(),
            masses: vec![1.0],
            penalty: c_eta,
        };
        return Ok((eta, xi));
    }
    let data = grouped_data(units, beta)?;
    let basis_eta = SplineBasis::new(kind, eta_support[0], eta_support[eta_support.len() - 1], order);
    let basis_xi = SplineBasis::new(kind, xi_support[0], xi_support[xi_support.len() - 1], order);
    let fitter = HierFit::new(
        &data,
        eta_support,
        xi_support,
        basis_eta.evaluate(eta_support),
        basis_xi.evaluate(xi_support),
        c_eta,
        c_xi,
    );
    let (alpha, _) = fitter.solve(None)?;
    let be = fitter.b_eta();
    let a_eta = alpha.rows(0, be).into_owned();
    let a_xi = alpha.rows(be, fitter.b_xi()).into_owned();
    let g_eta = softmax(&(&fitter.q_eta * &a_eta));
    let g_xi = softmax(&(&fitter.q_xi * &a_xi));
    Ok((
        SplineMixing {
            support: eta_support.to_vec(),
            basis: Some(basis_eta),
            alpha: a_eta.iter().cloned().collect(),
            masses: g_eta,
            penalty: c_eta,
        },
        SplineMixing {
            support: xi_support.to_vec(),
            basis: Some(basis_xi),
            alpha: a_xi.iter().cloned().collect(),
            masses: g_xi,
            penalty: c_xi,
        },
    ))
}

/// Hierarchical calibration targets: the unit-effect mean and the two
/// dispersion components, weighted by the inverse covariance of their GMM
/// estimates.
#[derive(Debug, Clone)]
pub struct HierMomentTargets {
    pub mu_v: f64,
    pub sigma_eta: f64,
    pub sigma_xi: f64,
    pub weight: [[f64; 3]; 3],
}

impl HierMomentTargets {
    fn distance(&self, eta: &Moments, xi: &Moments) -> f64 {
        let d = [
            xi.mean - self.mu_v,
            eta.sd - self.sigma_eta,
            xi.sd - self.sigma_xi,
        ];
        let mut total = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                total += d[r] * self.weight[r][c] * d[c];
            }
        }
        total
    }
}

/// Coordinate descent over the two penalties (three sweeps of a coarse
/// log-grid plus golden polish per coordinate), ties toward larger
/// penalties.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_penalty_hierarchical(
    units: &[UnitRecord],
    beta: f64,
    eta_support: &[f64],
    xi_support: &[f64],
    targets: &HierMomentTargets,
    kind: BasisKind,
    order: usize,
    sweeps: usize,
) -> Result<(CalibratedPenalty, CalibratedPenalty)> {
    let data = grouped_data(units, beta)?;
    let basis_eta = SplineBasis::new(kind, eta_support[0], eta_support[eta_support.len() - 1], order);
    let basis_xi = SplineBasis::new(kind, xi_support[0], xi_support[xi_support.len() - 1], order);
    let q_eta = basis_eta.evaluate(eta_support);
    let q_xi = basis_xi.evaluate(xi_support);

    let eval = |c_eta: f64, c_xi: f64| -> f64 {
        let fitter = HierFit::new(
            &data,
            eta_support,
            xi_support,
            q_eta.clone(),
            q_xi.clone(),
            c_eta,
            c_xi,
        );
        match fitter.solve(None) {
            Ok((alpha, _)) => {
                let be = fitter.b_eta();
                let g_eta = softmax(&(&fitter.q_eta * alpha.rows(0, be).into_owned()));
                let g_xi = softmax(&(&fitter.q_xi * alpha.rows(be, fitter.b_xi()).into_owned()));
                targets.distance(
                    &moments_of(eta_support, &g_eta),
                    &moments_of(xi_support, &g_xi),
                )
            }
            Err(_) => f64::INFINITY,
        }
    };

    let (mut c_eta, mut c_xi) = (1.0, 1.0);
    let mut last_eta = CalibratedPenalty {
        penalty: c_eta,
        criterion: f64::INFINITY,
        at_boundary: false,
    };
    let mut last_xi = last_eta;
    for _ in 0..sweeps.max(1) {
        let fixed_xi = c_xi;
        let crit_eta = |log_c: f64| eval(log_c.exp(), fixed_xi);
        last_eta = search_penalty(&crit_eta, 13);
        c_eta = last_eta.penalty;
        let fixed_eta = c_eta;
        let crit_xi = |log_c: f64| eval(fixed_eta, log_c.exp());
        last_xi = search_penalty(&crit_xi, 13);
        c_xi = last_xi.penalty;
    }
    Ok((last_eta, last_xi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simulate_two_atom(n: usize, seed: u64) -> Vec<UnitRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v = if rng.gen_bool(0.5) { 0.3 } else { 0.7 };
                let se = 0.05;
                let noise: f64 = {
                    // Box-Muller from two uniforms
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
                UnitRecord::new(format!("u{i}"), v + se * noise, se)
            })
            .collect()
    }

    #[test]
    fn support_rule() {
        let cfg = SupportConfig {
            points: 5,
            floor: 0.0,
        };
        let support = build_support(&[0.2, 1.1, 0.4], 0.3, 0.2, &cfg).unwrap();
        assert_abs_diff_eq!(*support.last().unwrap(), 1.3, epsilon = 1e-12);
        assert_eq!(support.len(), 5);
        assert_eq!(support[0], 0.0);

        let cfg1000 = SupportConfig::default();
        let s = build_support(&[0.5], 0.3, 0.2, &cfg1000).unwrap();
        assert_eq!(s.len(), 1000);

        assert!(build_support(&[], 0.3, 0.2, &cfg).is_err());
        assert!(build_support(&[-5.0], -10.0, 0.1, &cfg).is_err());
    }

    #[test]
    fn moments_examples() {
        let g = SplineMixing::from_parts(vec![0.0, 2.0], vec![0.5, 0.5], 0.0);
        let m = g.moments();
        assert_abs_diff_eq!(m.mean, 1.0);
        assert_abs_diff_eq!(m.sd, 1.0);
        assert_abs_diff_eq!(m.skewness, 0.0);
        assert_abs_diff_eq!(m.excess_kurtosis, -2.0);

        let point = SplineMixing::from_parts(vec![0.7], vec![1.0], 0.0);
        assert_abs_diff_eq!(point.moments().sd, 0.0);
    }

    #[test]
    fn huge_penalty_gives_uniform_masses() {
        let units = simulate_two_atom(60, 1);
        let support = build_support(
            &units.iter().map(|u| u.estimate).collect::<Vec<_>>(),
            0.5,
            0.2,
            &SupportConfig {
                points: 120,
                floor: 0.0,
            },
        )
        .unwrap();
        let fit = fit_logspline(&units, 0.0, &support, 1e9, DEFAULT_BASIS, 5).unwrap();
        let uniform = 1.0 / support.len() as f64;
        for w in &fit.masses {
            assert_abs_diff_eq!(*w, uniform, epsilon = 1e-6);
        }
    }

    #[test]
    fn masses_match_softmax_of_alpha() {
        let units = simulate_two_atom(50, 2);
        let support = build_support(
            &units.iter().map(|u| u.estimate).collect::<Vec<_>>(),
            0.5,
            0.2,
            &SupportConfig {
                points: 80,
                floor: 0.0,
            },
        )
        .unwrap();
        let fit = fit_logspline(&units, 0.0, &support, 0.5, DEFAULT_BASIS, 5).unwrap();
        let recomputed = fit.masses_from_alpha().unwrap();
        for (a, b) in fit.masses.iter().zip(&recomputed) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let total: f64 = fit.masses.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn recovers_two_atom_mixture_modes() {
        // 10,000 draws from a known two-atom mixture with beta = 0: the
        // fitted density must be bimodal with modes near the atoms
        let units = simulate_two_atom(10_000, 3);
        let support: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let fit = fit_logspline(&units, 0.0, &support, 1.0, DEFAULT_BASIS, 5).unwrap();
        let dx = support[1] - support[0];
        // local maxima of the fitted masses
        let mut modes = Vec::new();
        for m in 1..support.len() - 1 {
            if fit.masses[m] > fit.masses[m - 1] && fit.masses[m] >= fit.masses[m + 1] {
                modes.push(support[m]);
            }
        }
        assert!(
            modes.iter().any(|&x| (x - 0.3).abs() <= dx + 1e-9),
            "no mode near 0.3: {modes:?}"
        );
        assert!(
            modes.iter().any(|&x| (x - 0.7).abs() <= dx + 1e-9),
            "no mode near 0.7: {modes:?}"
        );
    }

    #[test]
    fn penalty_shrinks_alpha_norm() {
        let units = simulate_two_atom(80, 4);
        let support: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let mut last = f64::INFINITY;
        for c in [0.1, 1.0, 10.0, 100.0] {
            let fit = fit_logspline(&units, 0.0, &support, c, DEFAULT_BASIS, 5).unwrap();
            let norm = fit.alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(norm <= last + 1e-9, "norm grew: {norm} > {last}");
            last = norm;
        }
    }

    #[test]
    fn hierarchical_degenerate_eta_reduces_to_logspline() {
        let mut units = simulate_two_atom(40, 5);
        for u in units.iter_mut() {
            u.group = Some("all".into());
        }
        let support: Vec<f64> = (0..80).map(|i| i as f64 / 79.0).collect();
        let (eta, xi) =
            fit_hierarchical(&units, 0.0, &[1.0], &support, 1.0, 0.7, DEFAULT_BASIS, 5).unwrap();
        assert_eq!(eta.masses, vec![1.0]);
        let direct = fit_logspline(&units, 0.0, &support, 0.7, DEFAULT_BASIS, 5).unwrap();
        for (a, b) in xi.masses.iter().zip(&direct.masses) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn hierarchical_constraint_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut units = Vec::new();
        for g in 0..6 {
            let eta = 0.6 + 0.2 * g as f64 / 5.0 + rng.gen_range(0.0..0.4);
            for i in 0..6 {
                let xi = 0.25 + rng.gen_range(0.0..0.15);
                let se = 0.06;
                let noise: f64 = {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
                let mut u = UnitRecord::new(format!("g{g}u{i}"), eta * xi + se * noise, se);
                u.group = Some(format!("g{g}"));
                units.push(u);
            }
        }
        let eta_support: Vec<f64> = (0..40).map(|i| i as f64 * 2.5 / 39.0).collect();
        let xi_support: Vec<f64> = (0..40).map(|i| i as f64 * 1.0 / 39.0).collect();
        let (eta, xi) = fit_hierarchical(
            &units,
            0.0,
            &eta_support,
            &xi_support,
            1.0,
            1.0,
            DEFAULT_BASIS,
            5,
        )
        .unwrap();
        let mean_eta: f64 = eta
            .support
            .iter()
            .zip(&eta.masses)
            .map(|(x, w)| x * w)
            .sum();
        assert_abs_diff_eq!(mean_eta, 1.0, epsilon = 1e-10);
        let total: f64 = xi.masses.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_hits_achievable_targets() {
        let units = simulate_two_atom(300, 7);
        let support: Vec<f64> = (0..150).map(|i| i as f64 / 149.0).collect();
        // targets from a fit at a known penalty: criterion should be ~0 there
        let reference = fit_logspline(&units, 0.0, &support, 2.0, DEFAULT_BASIS, 5).unwrap();
        let m = reference.moments();
        let targets = MomentTargets {
            mean: m.mean,
            sd: m.sd,
            weight: [[1e4, 0.0], [0.0, 1e4]],
        };
        let cal = calibrate_penalty(&units, 0.0, &support, &targets, DEFAULT_BASIS, 5).unwrap();
        assert!(cal.criterion < 1e-4, "criterion {} at c={}", cal.criterion, cal.penalty);
    }

    #[test]
    fn degenerate_sd_target_hits_boundary() {
        // two tight clusters at the support extremes: implied sd decreases
        // with smoothing, so a zero sd target drives the penalty up
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let units: Vec<UnitRecord> = (0..60)
            .map(|i| {
                let v = if i % 2 == 0 { 0.02 } else { 0.98 };
                UnitRecord::new(format!("u{i}"), v + 0.01 * rng.gen_range(-1.0..1.0f64), 0.01)
            })
            .collect();
        let support: Vec<f64> = (0..80).map(|i| i as f64 / 79.0).collect();
        let targets = MomentTargets {
            mean: 0.5,
            sd: 0.0,
            weight: [[1.0, 0.0], [0.0, 1e6]],
        };
        let cal = calibrate_penalty(&units, 0.0, &support, &targets, DEFAULT_BASIS, 5).unwrap();
        assert!(cal.at_boundary, "expected boundary, got c = {}", cal.penalty);
        assert!(cal.penalty > 1e3, "expected upper bound, got {}", cal.penalty);
    }
}
