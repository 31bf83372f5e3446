//! Unit-level posteriors and pairwise posterior ordering quantities.
//!
//! Posteriors live on the discrete support of the fitted mixing
//! distribution. For a unit with estimate `theta_hat` and standard error
//! `s`, the posterior over latent `v` weights each grid point `x` by
//! `g(x) * phi((theta_hat/s^beta - x) / s^{1-beta})`, and the unit's latent
//! effect is `theta = s^beta * v`. Pairwise ordering probabilities
//! `pi_ij = Pr(theta_i > theta_j | Y)` are computed exactly on the grid via
//! a merged prefix-CDF walk; grid points that land on exactly equal scaled
//! values contribute half mass, preserving antisymmetry.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deconv::SplineMixing;
use crate::error::{Error, Result};
use crate::ingest::UnitRecord;
use crate::par;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMat {
    n: usize,
    data: Vec<f64>,
}

impl SquareMat {
    pub fn zeros(n: usize) -> Self {
        SquareMat {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.n + j] = value;
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn from_raw(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        SquareMat { n, data }
    }
}

/// Discrete posterior of one unit on the mixing support (v-scale).
#[derive(Debug, Clone)]
pub struct UnitPosterior {
    pub id: String,
    /// Support grid on the v-scale, shared across units.
    pub grid: Arc<Vec<f64>>,
    /// Normalized posterior masses.
    pub weights: Vec<f64>,
    /// Multiplier `s^beta` mapping the grid to the unit's theta-scale.
    pub scale: f64,
}

impl UnitPosterior {
    /// Posterior mean on the theta-scale.
    pub fn mean(&self) -> f64 {
        self.scale
            * self
                .grid
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
    }

    /// Posterior second moment of theta.
    pub fn second_moment(&self) -> f64 {
        self.scale
            * self.scale
            * self
                .grid
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| x * x * w)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub id: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub second_moment: f64,
}

/// Pairwise posterior matrices: ordering probabilities and, for weighted
/// loss, the truncated and full p-th moments of pairwise differences.
#[derive(Debug, Clone)]
pub struct PairwiseMatrices {
    pub ids: Vec<String>,
    /// `pi[(i, j)] = Pr(theta_i > theta_j | Y)`.
    pub pi: SquareMat,
    /// `mu_p[(i, j)] = E[max(theta_i - theta_j, 0)^p | Y]`.
    pub mu_p: Option<SquareMat>,
    /// `m_p[(i, j)] = E[(theta_i - theta_j)^p | Y]`.
    pub m_p: Option<SquareMat>,
    pub exponent: u8,
    /// Monte-Carlo standard errors of `pi`, when simulated.
    pub mc_se: Option<SquareMat>,
}

impl PairwiseMatrices {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Posterior masses for every unit given a fitted mixing distribution.
pub fn unit_posteriors(
    units: &[UnitRecord],
    mixing: &SplineMixing,
    beta: f64,
) -> Result<Vec<UnitPosterior>> {
    let grid = Arc::new(mixing.support.clone());
    let log_mass: Vec<f64> = mixing
        .masses
        .iter()
        .map(|&m| if m > 0.0 { m.ln() } else { f64::NEG_INFINITY })
        .collect();
    let posteriors = par::map_slice(units, |u| {
        let scale = u.se.powf(beta);
        let noise = u.se.powf(1.0 - beta);
        let vhat = u.estimate / scale;
        let mut logw: Vec<f64> = grid
            .iter()
            .zip(&log_mass)
            .map(|(&x, &lg)| {
                let z = (vhat - x) / noise;
                lg - 0.5 * z * z
            })
            .collect();
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::estimation(format!(
                "posterior for unit `{}` has no support on the grid",
                u.id
            )));
        }
        let mut total = 0.0;
        for w in logw.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        if !(total > 0.0) {
            return Err(Error::estimation(format!(
                "posterior for unit `{}` underflowed to zero",
                u.id
            )));
        }
        for w in logw.iter_mut() {
            *w /= total;
        }
        Ok(UnitPosterior {
            id: u.id.clone(),
            grid: grid.clone(),
            weights: logw,
            scale,
        })
    });
    posteriors.into_iter().collect()
}

/// Interpolated inverse of a discrete CDF; values clamped to the support.
fn discrete_quantile(grid: &[f64], cdf: &[f64], q: f64) -> f64 {
    let idx = cdf.partition_point(|&c| c < q);
    if idx == 0 {
        return grid[0];
    }
    if idx >= grid.len() {
        return grid[grid.len() - 1];
    }
    let (c0, c1) = (cdf[idx - 1], cdf[idx]);
    if c1 <= c0 {
        return grid[idx];
    }
    let t = (q - c0) / (c1 - c0);
    grid[idx - 1] + t * (grid[idx] - grid[idx - 1])
}

/// Posterior mean and central credible interval on the theta-scale.
pub fn posterior_summary(up: &UnitPosterior, level: f64) -> Result<PosteriorSummary> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::domain(format!("level {level} outside (0, 1)")));
    }
    let mut cdf = Vec::with_capacity(up.weights.len());
    let mut acc = 0.0;
    for w in &up.weights {
        acc += w;
        cdf.push(acc);
    }
    let tail = (1.0 - level) / 2.0;
    let lo = up.scale * discrete_quantile(&up.grid, &cdf, tail);
    let hi = up.scale * discrete_quantile(&up.grid, &cdf, 1.0 - tail);
    let mean = up.mean();
    Ok(PosteriorSummary {
        id: up.id.clone(),
        mean,
        lo: lo.min(mean),
        hi: hi.max(mean),
        second_moment: up.second_moment(),
    })
}

/// One-directional exact grid integral `Pr(theta_a > theta_b)` with half
/// mass on exact ties, via a merged two-pointer walk over the scaled grids.
fn pi_one_direction(a: &UnitPosterior, b: &UnitPosterior) -> f64 {
    let ga = &*a.grid;
    let gb = &*b.grid;
    let (mut lo, mut hi) = (0usize, 0usize); // counts of b-atoms strictly below / at-or-below
    let (mut cdf_lo, mut cdf_hi) = (0.0, 0.0);
    let mut total = 0.0;
    for (m, &xa) in ga.iter().enumerate() {
        let va = a.scale * xa;
        while lo < gb.len() && b.scale * gb[lo] < va {
            cdf_lo += b.weights[lo];
            lo += 1;
        }
        while hi < gb.len() && b.scale * gb[hi] <= va {
            cdf_hi += b.weights[hi];
            hi += 1;
        }
        total += a.weights[m] * (cdf_lo + 0.5 * (cdf_hi - cdf_lo));
    }
    total
}

/// `E[max(theta_a - theta_b, 0)^2]` by prefix sums over the scaled grids.
fn mu2_one_direction(a: &UnitPosterior, b: &UnitPosterior) -> f64 {
    let ga = &*a.grid;
    let gb = &*b.grid;
    let mut ptr = 0usize;
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    let mut total = 0.0;
    for (m, &xa) in ga.iter().enumerate() {
        let va = a.scale * xa;
        while ptr < gb.len() && b.scale * gb[ptr] < va {
            let vb = b.scale * gb[ptr];
            let w = b.weights[ptr];
            s0 += w;
            s1 += w * vb;
            s2 += w * vb * vb;
            ptr += 1;
        }
        total += a.weights[m] * (va * va * s0 - 2.0 * va * s1 + s2);
    }
    total
}

/// Pairwise matrices over independent unit posteriors. `p` must be 0 or 2;
/// `p = 2` additionally fills the truncated and full second-moment matrices.
pub fn pairwise_matrices(posteriors: &[UnitPosterior], p: u8) -> PairwiseMatrices {
    assert!(p == 0 || p == 2, "exponent must be 0 or 2");
    let n = posteriors.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .collect();
    let results = par::map_slice(&pairs, |&(i, j)| {
        let pij = pi_one_direction(&posteriors[i], &posteriors[j]);
        let pji = pi_one_direction(&posteriors[j], &posteriors[i]);
        if p == 2 {
            let mu_ij = mu2_one_direction(&posteriors[i], &posteriors[j]);
            let mu_ji = mu2_one_direction(&posteriors[j], &posteriors[i]);
            (pij, pji, mu_ij, mu_ji)
        } else {
            (pij, pji, 0.0, 0.0)
        }
    });

    let mut pi = SquareMat::zeros(n);
    for i in 0..n {
        pi.set(i, i, 0.5);
    }
    let (mut mu_p, mut m_p) = if p == 2 {
        (Some(SquareMat::zeros(n)), Some(SquareMat::zeros(n)))
    } else {
        (None, None)
    };
    for (&(i, j), &(pij, pji, mu_ij, mu_ji)) in pairs.iter().zip(&results) {
        pi.set(i, j, pij);
        pi.set(j, i, pji);
        if let (Some(mu), Some(m)) = (mu_p.as_mut(), m_p.as_mut()) {
            mu.set(i, j, mu_ij);
            mu.set(j, i, mu_ji);
            let (ei, ej) = (posteriors[i].mean(), posteriors[j].mean());
            let m2 = posteriors[i].second_moment() + posteriors[j].second_moment()
                - 2.0 * ei * ej;
            m.set(i, j, m2);
            m.set(j, i, m2);
        }
    }
    PairwiseMatrices {
        ids: posteriors.iter().map(|u| u.id.clone()).collect(),
        pi,
        mu_p,
        m_p,
        exponent: p,
        mc_se: None,
    }
}

/// Output of the hierarchical posterior engine.
#[derive(Debug, Clone)]
pub struct HierarchicalPosteriors {
    pub summaries: Vec<PosteriorSummary>,
    pub matrices: PairwiseMatrices,
    /// Effective sample size of the importance weights per group.
    pub group_ess: Vec<(String, f64)>,
    pub seed: u64,
    pub draws: usize,
}

/// Joint posteriors for the grouped model by self-normalized importance
/// sampling: group-effect atoms are drawn from their prior lattice and
/// weighted by the group marginal likelihood; unit effects are then drawn
/// from their exact conditional posteriors given the group effect. Units in
/// the same group share draws; cross-group pairs combine independent
/// per-group streams.
pub fn hierarchical_posteriors(
    units: &[UnitRecord],
    g_eta: &SplineMixing,
    g_xi: &SplineMixing,
    beta: f64,
    draws: usize,
    seed: u64,
    level: f64,
) -> Result<HierarchicalPosteriors> {
    if draws < 10_000 {
        return Err(Error::domain(format!(
            "hierarchical integration needs at least 10,000 draws, got {draws}"
        )));
    }
    let n = units.len();
    let mut groups: Vec<String> = Vec::new();
    let mut group_of = Vec::with_capacity(n);
    for u in units {
        let g = u.group.clone().ok_or_else(|| {
            Error::domain(format!("unit `{}` has no group label", u.id))
        })?;
        let ix = groups.iter().position(|x| *x == g).unwrap_or_else(|| {
            groups.push(g.clone());
            groups.len() - 1
        });
        group_of.push(ix);
    }
    let k = groups.len();
    let members: Vec<Vec<usize>> = (0..k)
        .map(|g| (0..n).filter(|&i| group_of[i] == g).collect())
        .collect();

    let eta = &g_eta.support;
    let xi = &g_xi.support;
    let m_eta = eta.len();
    let m_xi = xi.len();

    struct GroupDraws {
        /// normalized importance weights, one per draw
        weights: Vec<f64>,
        /// theta draws: [unit-in-group][draw]
        theta: Vec<Vec<f64>>,
        ess: f64,
    }

    let group_results: Vec<Result<GroupDraws>> = par::map_range(k, |g| {
        let ids = &members[g];
        let nk = ids.len();
        // conditional xi posteriors per (unit, eta atom): CDF tables
        let mut cond_cdf = vec![0.0; nk * m_eta * m_xi];
        let mut log_marg = vec![0.0; m_eta]; // log prior + sum_i log A_il
        for l in 0..m_eta {
            log_marg[l] = if g_eta.masses[l] > 0.0 {
                g_eta.masses[l].ln()
            } else {
                f64::NEG_INFINITY
            };
        }
        for (t, &i) in ids.iter().enumerate() {
            let u = &units[i];
            let scale = u.se.powf(beta);
            let noise = u.se.powf(1.0 - beta);
            let vhat = u.estimate / scale;
            for (l, &eta_l) in eta.iter().enumerate() {
                let mut logs = Vec::with_capacity(m_xi);
                let mut max = f64::NEG_INFINITY;
                for (m, &xi_m) in xi.iter().enumerate() {
                    let z = (vhat - eta_l * xi_m) / noise;
                    let lw = if g_xi.masses[m] > 0.0 {
                        g_xi.masses[m].ln() - 0.5 * z * z
                    } else {
                        f64::NEG_INFINITY
                    };
                    logs.push(lw);
                    if lw > max {
                        max = lw;
                    }
                }
                let mut total = 0.0;
                let base = (t * m_eta + l) * m_xi;
                for m in 0..m_xi {
                    let w = if max.is_finite() {
                        (logs[m] - max).exp()
                    } else {
                        0.0
                    };
                    total += w;
                    cond_cdf[base + m] = total;
                }
                if total > 0.0 {
                    for m in 0..m_xi {
                        cond_cdf[base + m] /= total;
                    }
                    log_marg[l] += max + total.ln();
                } else {
                    log_marg[l] = f64::NEG_INFINITY;
                }
            }
        }
        // importance weights over the prior lattice are the group marginal
        // likelihoods at each atom; draws sample atoms from the prior
        let max_lm = log_marg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max_lm.is_finite() {
            return Err(Error::estimation(format!(
                "group `{}` has zero marginal likelihood on the grid",
                groups[g]
            )));
        }
        let prior_cdf: Vec<f64> = {
            let mut acc = 0.0;
            g_eta
                .masses
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect()
        };
        let like: Vec<f64> = log_marg
            .iter()
            .zip(&g_eta.masses)
            .map(|(&lm, &prior)| {
                if prior > 0.0 {
                    (lm - max_lm).exp() / prior
                } else {
                    0.0
                }
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (g as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut weights = Vec::with_capacity(draws);
        let mut theta = vec![Vec::with_capacity(draws); nk];
        let mut wsum = 0.0;
        let mut w2sum = 0.0;
        for _ in 0..draws {
            let u01: f64 = rng.gen();
            let l = prior_cdf.partition_point(|&c| c < u01).min(m_eta - 1);
            let w = like[l];
            weights.push(w);
            wsum += w;
            w2sum += w * w;
            for (t, &i) in ids.iter().enumerate() {
                let base = (t * m_eta + l) * m_xi;
                let u2: f64 = rng.gen();
                let cdf = &cond_cdf[base..base + m_xi];
                let m = cdf.partition_point(|&c| c < u2).min(m_xi - 1);
                let scale = units[i].se.powf(beta);
                theta[t].push(scale * eta[l] * xi[m]);
            }
        }
        if !(wsum > 0.0) {
            return Err(Error::estimation(format!(
                "importance weights for group `{}` all vanished",
                groups[g]
            )));
        }
        let ess = wsum * wsum / w2sum;
        if ess < draws as f64 / 100.0 {
            return Err(Error::estimation(format!(
                "effective sample size {ess:.1} in group `{}` is below draws/100; increase draws",
                groups[g]
            )));
        }
        for w in weights.iter_mut() {
            *w /= wsum;
        }
        Ok(GroupDraws { weights, theta, ess })
    });

    let mut per_group = Vec::with_capacity(k);
    for r in group_results {
        per_group.push(r?);
    }

    // per-unit summaries from weighted draws
    let unit_list: Vec<(usize, usize, usize)> = (0..k)
        .flat_map(|g| {
            members[g]
                .iter()
                .enumerate()
                .map(move |(t, &i)| (g, t, i))
                .collect::<Vec<_>>()
        })
        .collect();
    let summaries_raw = par::map_slice(&unit_list, |&(g, t, i)| {
        let gd = &per_group[g];
        let vals = &gd.theta[t];
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut mean = 0.0;
        let mut second = 0.0;
        for (v, w) in vals.iter().zip(&gd.weights) {
            mean += v * w;
            second += v * v * w;
        }
        let tail = (1.0 - level) / 2.0;
        let quant = |q: f64| -> f64 {
            let mut acc = 0.0;
            for &ix in &order {
                acc += gd.weights[ix];
                if acc >= q {
                    return vals[ix];
                }
            }
            vals[order[order.len() - 1]]
        };
        PosteriorSummary {
            id: units[i].id.clone(),
            mean,
            lo: quant(tail),
            hi: quant(1.0 - tail),
            second_moment: second,
        }
    });
    let mut summaries: Vec<Option<PosteriorSummary>> = vec![None; n];
    for (&(_, _, i), s) in unit_list.iter().zip(summaries_raw.into_iter()) {
        summaries[i] = Some(s);
    }
    let summaries: Vec<PosteriorSummary> = summaries.into_iter().map(|s| s.unwrap()).collect();

    // pairwise probabilities from draws
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .collect();
    let slot = |i: usize| -> (usize, usize) {
        let g = group_of[i];
        let t = members[g].iter().position(|&x| x == i).unwrap();
        (g, t)
    };
    let pair_vals = par::map_slice(&pairs, |&(i, j)| {
        let (gi, ti) = slot(i);
        let (gj, tj) = slot(j);
        let (mut num, mut den, mut var_acc) = (0.0, 0.0, 0.0);
        let same = gi == gj;
        let (wi, wj) = (&per_group[gi].weights, &per_group[gj].weights);
        let (vi, vj) = (&per_group[gi].theta[ti], &per_group[gj].theta[tj]);
        for r in 0..draws {
            let w = if same { wi[r] } else { wi[r] * wj[r] };
            let z = if vi[r] > vj[r] {
                1.0
            } else if vi[r] == vj[r] {
                0.5
            } else {
                0.0
            };
            num += w * z;
            den += w;
        }
        let pij = num / den;
        for r in 0..draws {
            let w = if same { wi[r] } else { wi[r] * wj[r] };
            let z = if vi[r] > vj[r] {
                1.0
            } else if vi[r] == vj[r] {
                0.5
            } else {
                0.0
            };
            let wt = w / den;
            var_acc += wt * wt * (z - pij) * (z - pij);
        }
        (pij, var_acc.sqrt())
    });
    let mut pi = SquareMat::zeros(n);
    let mut se = SquareMat::zeros(n);
    for i in 0..n {
        pi.set(i, i, 0.5);
    }
    for (&(i, j), &(pij, seij)) in pairs.iter().zip(&pair_vals) {
        pi.set(i, j, pij);
        pi.set(j, i, 1.0 - pij);
        se.set(i, j, seij);
        se.set(j, i, seij);
    }
    let matrices = PairwiseMatrices {
        ids: units.iter().map(|u| u.id.clone()).collect(),
        pi,
        mu_p: None,
        m_p: None,
        exponent: 0,
        mc_se: Some(se),
    };
    Ok(HierarchicalPosteriors {
        summaries,
        matrices,
        group_ess: groups
            .iter()
            .cloned()
            .zip(per_group.iter().map(|g| g.ess))
            .collect(),
        seed,
        draws,
    })
}

/// Firm-weighted between-grade variance of theta via posterior moments, and
/// the implied R-squared against a marginal variance.
pub fn between_grade_variance(
    grades: &[usize],
    summaries: &[PosteriorSummary],
    marginal_variance: f64,
) -> (f64, f64) {
    assert_eq!(grades.len(), summaries.len());
    let n = grades.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let n_grades = grades.iter().copied().max().unwrap_or(1);
    let mut share = vec![0.0; n_grades + 1];
    let mut mean_sum = vec![0.0; n_grades + 1];
    let mut sq_sum = vec![0.0; n_grades + 1];
    let mut mean_sq_sum = vec![0.0; n_grades + 1];
    let mut count = vec![0usize; n_grades + 1];
    for (g, s) in grades.iter().zip(summaries) {
        count[*g] += 1;
        mean_sum[*g] += s.mean;
        sq_sum[*g] += s.second_moment;
        mean_sq_sum[*g] += s.mean * s.mean;
    }
    let mut grade_mean = vec![0.0; n_grades + 1];
    let mut grade_mean_sq = vec![0.0; n_grades + 1];
    for g in 1..=n_grades {
        if count[g] == 0 {
            continue;
        }
        let ng = count[g] as f64;
        share[g] = ng / n as f64;
        grade_mean[g] = mean_sum[g] / ng;
        // posterior mean of the squared grade average
        grade_mean_sq[g] =
            (sq_sum[g] + mean_sum[g] * mean_sum[g] - mean_sq_sum[g]) / (ng * ng);
    }
    let mut between = 0.0;
    for g in 1..=n_grades {
        between += share[g] * (1.0 - share[g]) * grade_mean_sq[g];
        for h in 1..=n_grades {
            if h != g {
                between -= share[g] * share[h] * grade_mean[g] * grade_mean[h];
            }
        }
    }
    let r2 = if marginal_variance > 0.0 {
        between / marginal_variance
    } else {
        0.0
    };
    (between, r2)
}
