//! Two-step GMM for the precision-dependence model `theta_i = s_i^beta * v_i`.
//!
//! The baseline model estimates `(beta, mu_v, sigma_v)` from four moment
//! conditions on the studentized residuals. The hierarchical model splits
//! `v_i` into a group effect times a unit effect, `v_i = eta_k(i) * xi_i`
//! (with `E[eta] = 1`), and adds two moment conditions on squared deviations
//! of group means. Group-level moments enter the sample moment vector once
//! per unit, so larger groups carry proportionally more weight; the noise
//! part of `Var(vbar_k)` is `n_k^{-2} * sum_i s_i^{2(1-beta)}`.
//!
//! The second-step weighting matrix is the inverse of the first-step moment
//! covariance, clustered by group whenever group labels are present. The
//! J-statistic is `n` times the minimized second-step criterion.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::ingest::UnitRecord;
use crate::optim::nelder_mead;

/// Variance parameterization: a single dispersion for the baseline model, or
/// between/within components for the hierarchical model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VarianceParams {
    Baseline { sigma_v: f64 },
    Hierarchical { sigma_eta: f64, sigma_xi: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionModelParams {
    pub beta: f64,
    pub mu_v: f64,
    #[serde(flatten)]
    pub variance: VarianceParams,
    /// Parameter covariance; order (beta, mu_v, sigma_v) or
    /// (beta, mu_v, sigma_eta, sigma_xi).
    pub vcov: Vec<Vec<f64>>,
    pub j_stat: f64,
    pub j_df: usize,
    pub seed: u64,
}

impl PrecisionModelParams {
    /// Marginal dispersion of `v`; for the hierarchical model this applies
    /// the identity `sigma_v^2 = se^2 sx^2 + se^2 mu^2 + sx^2`.
    pub fn sigma_v(&self) -> f64 {
        match self.variance {
            VarianceParams::Baseline { sigma_v } => sigma_v,
            VarianceParams::Hierarchical { sigma_eta, sigma_xi } => {
                let (e2, x2) = (sigma_eta * sigma_eta, sigma_xi * sigma_xi);
                (e2 * x2 + e2 * self.mu_v * self.mu_v + x2).sqrt()
            }
        }
    }

    /// Share of the variance of `v` that is within-group:
    /// `(sigma_eta^2 + 1) sigma_xi^2 / sigma_v^2`.
    pub fn within_share(&self) -> Option<f64> {
        match self.variance {
            VarianceParams::Baseline { .. } => None,
            VarianceParams::Hierarchical { sigma_eta, sigma_xi } => {
                let sv2 = self.sigma_v().powi(2);
                Some((sigma_eta * sigma_eta + 1.0) * sigma_xi * sigma_xi / sv2)
            }
        }
    }

    pub fn is_hierarchical(&self) -> bool {
        matches!(self.variance, VarianceParams::Hierarchical { .. })
    }

    /// Covariance block of `(mu_v, sigma_v)`, used to weight penalty
    /// calibration targets.
    pub fn moment_target_vcov(&self) -> [[f64; 2]; 2] {
        match self.variance {
            VarianceParams::Baseline { .. } => [
                [self.vcov[1][1], self.vcov[1][2]],
                [self.vcov[2][1], self.vcov[2][2]],
            ],
            // For the hierarchical model the relevant targets are handled
            // per-component; fall back to the (mu_v, sigma_eta) block scale.
            VarianceParams::Hierarchical { .. } => [
                [self.vcov[1][1], 0.0],
                [0.0, self.vcov[2][2].max(self.vcov[3][3])],
            ],
        }
    }
}

/// Studentized residual `T_i = (theta_hat - s^beta mu_v) / sqrt(s^{2 beta}
/// sigma_v^2 + s^2)`.
pub fn studentize(theta_hat: f64, s: f64, params: &PrecisionModelParams) -> f64 {
    let sv = params.sigma_v();
    let sb = s.powf(params.beta);
    (theta_hat - sb * params.mu_v) / (sb * sb * sv * sv + s * s).sqrt()
}

/// Upper-tail chi-square p-value for the over-identification statistic.
pub fn j_test(params: &PrecisionModelParams) -> Result<(f64, usize, f64)> {
    if params.j_df == 0 {
        return Err(Error::estimation(
            "model is exactly identified; no over-identification test",
        ));
    }
    let dist = ChiSquared::new(params.j_df as f64)
        .map_err(|e| Error::estimation(format!("chi-square({}) invalid: {e}", params.j_df)))?;
    let p = 1.0 - dist.cdf(params.j_stat);
    Ok((params.j_stat, params.j_df, p))
}

struct GmmData {
    theta: Vec<f64>,
    s: Vec<f64>,
    /// Group index per unit, or one singleton "cluster" per unit.
    cluster: Vec<usize>,
    n_clusters: usize,
    hierarchical: bool,
}

impl GmmData {
    fn n_moments(&self) -> usize {
        if self.hierarchical {
            6
        } else {
            4
        }
    }

    fn n_params(&self) -> usize {
        if self.hierarchical {
            4
        } else {
            3
        }
    }

    /// Per-unit moment rows. `p` is the natural-scale parameter vector.
    fn moment_rows(&self, p: &[f64]) -> Vec<Vec<f64>> {
        let n = self.theta.len();
        let beta = p[0];
        let mu = p[1];
        let sv2 = if self.hierarchical {
            let (se, sx) = (p[2], p[3]);
            se * se * sx * sx + se * se * mu * mu + sx * sx
        } else {
            p[2] * p[2]
        };
        let mut rows = vec![vec![0.0; self.n_moments()]; n];
        for i in 0..n {
            let s = self.s[i];
            let sb = s.powf(beta);
            let t = (self.theta[i] - sb * mu) / (sb * sb * sv2 + s * s).sqrt();
            rows[i][0] = t;
            rows[i][1] = t * s;
            rows[i][2] = t * t - 1.0;
            rows[i][3] = (t * t - 1.0) * s;
        }
        if self.hierarchical {
            let (se, sx) = (p[2], p[3]);
            // group means of v_hat = theta / s^beta and of s
            let mut sum_v = vec![0.0; self.n_clusters];
            let mut sum_s = vec![0.0; self.n_clusters];
            let mut sum_noise = vec![0.0; self.n_clusters];
            let mut count = vec![0usize; self.n_clusters];
            for i in 0..n {
                let k = self.cluster[i];
                sum_v[k] += self.theta[i] / self.s[i].powf(beta);
                sum_s[k] += self.s[i];
                sum_noise[k] += self.s[i].powf(2.0 * (1.0 - beta));
                count[k] += 1;
            }
            for i in 0..n {
                let k = self.cluster[i];
                let nk = count[k] as f64;
                let vbar = sum_v[k] / nk;
                let sbar = sum_s[k] / nk;
                let vk = se * se * sx * sx / nk
                    + se * se * mu * mu
                    + sx * sx / nk
                    + sum_noise[k] / (nk * nk);
                let dev = (vbar - mu) * (vbar - mu) - vk;
                rows[i][4] = dev;
                rows[i][5] = dev * sbar;
            }
        }
        rows
    }

    fn mean_moments(&self, p: &[f64]) -> Vec<f64> {
        let rows = self.moment_rows(p);
        let n = rows.len() as f64;
        let m = self.n_moments();
        let mut g = vec![0.0; m];
        for row in &rows {
            for j in 0..m {
                g[j] += row[j] / n;
            }
        }
        g
    }

    fn criterion(&self, p: &[f64], w: &DMatrix<f64>) -> f64 {
        let g = self.mean_moments(p);
        let m = self.n_moments();
        let mut q = 0.0;
        for a in 0..m {
            for b in 0..m {
                q += g[a] * w[(a, b)] * g[b];
            }
        }
        q
    }

    /// Moment covariance at `p`, clustered over `self.cluster`.
    fn moment_cov(&self, p: &[f64]) -> DMatrix<f64> {
        let rows = self.moment_rows(p);
        let n = rows.len();
        let m = self.n_moments();
        let mut sums = vec![vec![0.0; m]; self.n_clusters];
        for (i, row) in rows.iter().enumerate() {
            let k = self.cluster[i];
            for j in 0..m {
                sums[k][j] += row[j];
            }
        }
        let mut s = DMatrix::zeros(m, m);
        for gk in &sums {
            for a in 0..m {
                for b in 0..m {
                    s[(a, b)] += gk[a] * gk[b];
                }
            }
        }
        s / n as f64
    }
}

/// Transform optimizer coordinates (beta, log mu, log sigma ...) to the
/// natural scale.
fn natural(x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    for v in p.iter_mut().skip(1) {
        *v = v.exp();
    }
    p
}

/// Fit the precision model by two-step GMM. First step uses identity
/// weighting; the second step weights by the inverse clustered moment
/// covariance. Variance parameters are optimized on the log scale.
pub fn fit_gmm(units: &[UnitRecord], hierarchical: bool, seed: u64) -> Result<PrecisionModelParams> {
    let n = units.len();
    if n < 10 {
        return Err(Error::estimation(format!(
            "need at least 10 units to fit the precision model, got {n}"
        )));
    }
    let mut cluster = Vec::with_capacity(n);
    let mut labels: Vec<&str> = Vec::new();
    let mut any_group = false;
    for u in units {
        match u.group.as_deref() {
            Some(g) => {
                any_group = true;
                let ix = labels.iter().position(|l| *l == g).unwrap_or_else(|| {
                    labels.push(g);
                    labels.len() - 1
                });
                cluster.push(ix);
            }
            None => cluster.push(usize::MAX),
        }
    }
    if hierarchical {
        if !any_group || cluster.iter().any(|&c| c == usize::MAX) {
            return Err(Error::estimation(
                "hierarchical fit requires a group label on every unit",
            ));
        }
        if labels.len() < 2 {
            return Err(Error::estimation("hierarchical fit requires >= 2 groups"));
        }
    }
    // Units without labels cluster as singletons.
    let mut next = labels.len();
    for c in cluster.iter_mut() {
        if *c == usize::MAX {
            *c = next;
            next += 1;
        }
    }
    let data = GmmData {
        theta: units.iter().map(|u| u.estimate).collect(),
        s: units.iter().map(|u| u.se).collect(),
        cluster,
        n_clusters: next,
        hierarchical,
    };

    let starts = start_points(&data, seed);
    let identity = DMatrix::identity(data.n_moments(), data.n_moments());
    let step1 = minimize_over(&data, &identity, &starts)?;

    let s_hat = data.moment_cov(&natural(&step1.0));
    let w2 = invert_spd(&s_hat)
        .ok_or_else(|| Error::estimation("first-step moment covariance is singular"))?;
    let mut starts2 = starts;
    starts2.insert(0, step1.0.clone());
    let (x2, q2) = minimize_over(&data, &w2, &starts2)?;
    let p2 = natural(&x2);

    let j_stat = (n as f64) * q2;
    let j_df = data.n_moments() - data.n_params();
    let vcov = parameter_vcov(&data, &p2, &w2);

    let variance = if hierarchical {
        VarianceParams::Hierarchical {
            sigma_eta: p2[2],
            sigma_xi: p2[3],
        }
    } else {
        VarianceParams::Baseline { sigma_v: p2[2] }
    };
    Ok(PrecisionModelParams {
        beta: p2[0],
        mu_v: p2[1],
        variance,
        vcov,
        j_stat,
        j_df,
        seed,
    })
}

/// Coarse beta grid plus seeded random restarts, in optimizer coordinates.
fn start_points(data: &GmmData, seed: u64) -> Vec<Vec<f64>> {
    let mut starts = Vec::new();
    let robust_scale = |values: &mut Vec<f64>| -> (f64, f64) {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| values[((values.len() - 1) as f64 * p).round() as usize];
        let center = q(0.5).abs().max(1e-3);
        let spread = ((q(0.84) - q(0.16)) / 2.0).abs().max(1e-3);
        (center, spread)
    };
    for ix in 0..=12 {
        let beta = -1.0 + 3.0 * ix as f64 / 12.0;
        let mut v: Vec<f64> = data
            .theta
            .iter()
            .zip(&data.s)
            .map(|(t, s)| t / s.powf(beta))
            .collect();
        let (center, spread) = robust_scale(&mut v);
        if data.hierarchical {
            starts.push(vec![beta, center.ln(), (spread * 0.9).ln(), (spread * 0.5).ln()]);
            starts.push(vec![beta, center.ln(), (spread * 0.4).ln(), (spread * 0.9).ln()]);
        } else {
            starts.push(vec![beta, center.ln(), spread.ln()]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        let beta = rng.gen_range(-1.0..2.0);
        let mu = rng.gen_range(0.02..1.5f64);
        if data.hierarchical {
            starts.push(vec![
                beta,
                mu.ln(),
                rng.gen_range(0.02..1.5f64).ln(),
                rng.gen_range(0.02..1.5f64).ln(),
            ]);
        } else {
            starts.push(vec![beta, mu.ln(), rng.gen_range(0.02..1.5f64).ln()]);
        }
    }
    starts
}

fn minimize_over(data: &GmmData, w: &DMatrix<f64>, starts: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let objective = |x: &[f64]| {
        let q = data.criterion(&natural(x), w);
        if q.is_finite() {
            q
        } else {
            f64::INFINITY
        }
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let (x, q) = nelder_mead(&objective, start, 0.25, 4000, 1e-14);
        // polish with a tighter simplex
        let (x, q2) = nelder_mead(&objective, &x, 0.02, 4000, 1e-15);
        let q = q.min(q2);
        if best.as_ref().map_or(true, |(_, bq)| q < *bq) {
            best = Some((x, q));
        }
    }
    let (x, q) = best.ok_or_else(|| Error::estimation("no admissible GMM start point"))?;
    if !q.is_finite() {
        return Err(Error::estimation(
            "GMM criterion not finite at any iterate after restarts",
        ));
    }
    Ok((x, q))
}

fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().try_inverse()
}

/// Delta-method parameter covariance `(D' W D)^{-1} / n` with the moment
/// Jacobian `D` from central differences (relative step 1e-5).
fn parameter_vcov(data: &GmmData, p: &[f64], w: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let m = data.n_moments();
    let k = data.n_params();
    let n = data.theta.len() as f64;
    let mut d = DMatrix::zeros(m, k);
    for j in 0..k {
        let h = 1e-5 * p[j].abs().max(1e-3);
        let mut hi = p.to_vec();
        let mut lo = p.to_vec();
        hi[j] += h;
        lo[j] -= h;
        let ghi = data.mean_moments(&hi);
        let glo = data.mean_moments(&lo);
        for a in 0..m {
            d[(a, j)] = (ghi[a] - glo[a]) / (2.0 * h);
        }
    }
    let bread = (d.transpose() * w * &d).try_inverse();
    match bread {
        Some(b) => {
            let v = b / n;
            (0..k).map(|a| (0..k).map(|b| v[(a, b)]).collect()).collect()
        }
        None => vec![vec![f64::NAN; k]; k],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::distributions::Distribution;

    fn params_baseline(beta: f64, mu_v: f64, sigma_v: f64) -> PrecisionModelParams {
        PrecisionModelParams {
            beta,
            mu_v,
            variance: VarianceParams::Baseline { sigma_v },
            vcov: vec![vec![0.0; 3]; 3],
            j_stat: 0.0,
            j_df: 1,
            seed: 0,
        }
    }

    #[test]
    fn studentize_centered_case_is_zero() {
        let p = params_baseline(0.51, 0.313, 0.207);
        let s: f64 = 0.07;
        let theta = s.powf(0.51) * 0.313;
        assert_abs_diff_eq!(studentize(theta, s, &p), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn studentize_degenerate_reduces_to_z_score() {
        let p = params_baseline(0.0, 0.0, 0.0);
        assert_abs_diff_eq!(studentize(0.42, 0.07, &p), 0.42 / 0.07, epsilon = 1e-12);
    }

    #[test]
    fn studentize_single_expression_evaluation() {
        // direct evaluation of the defining expression, independent route
        let (beta, mu, sg) = (0.510, 0.313, 0.207);
        let (theta, s): (f64, f64) = (0.33, 0.07);
        let expected =
            (theta - s.powf(beta) * mu) / (s.powf(2.0 * beta) * sg * sg + s * s).sqrt();
        let p = params_baseline(beta, mu, sg);
        assert_abs_diff_eq!(studentize(theta, s, &p), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, 2.8335, epsilon = 5e-4);
    }

    #[test]
    fn j_test_values() {
        let mut p = params_baseline(0.5, 0.3, 0.2);
        p.j_stat = 0.101;
        let (_, _, pv) = j_test(&p).unwrap();
        assert_abs_diff_eq!(pv, 0.7507, epsilon = 5e-4);

        p.j_stat = 0.0;
        assert_abs_diff_eq!(j_test(&p).unwrap().2, 1.0, epsilon = 1e-12);

        p.j_stat = 1e6;
        p.j_df = 2;
        assert!(j_test(&p).unwrap().2 < 1e-12);

        p.j_df = 0;
        assert!(j_test(&p).is_err());
    }

    #[test]
    fn too_few_units_rejected() {
        let units: Vec<UnitRecord> = (0..5)
            .map(|i| UnitRecord::new(format!("u{i}"), 0.1, 0.05))
            .collect();
        assert!(fit_gmm(&units, false, 0).is_err());
    }

    #[test]
    fn hierarchical_requires_groups() {
        let units: Vec<UnitRecord> = (0..20)
            .map(|i| UnitRecord::new(format!("u{i}"), 0.1, 0.05))
            .collect();
        assert!(fit_gmm(&units, true, 0).is_err());
    }

    #[test]
    fn recovers_beta_zero_on_simulated_data() {
        // theta_i = v_i with beta = 0; moderate noise.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        let n = 5000;
        let mut units = Vec::with_capacity(n);
        for i in 0..n {
            let v = 0.5 + 0.15 * normal.sample(&mut rng);
            let s = 0.05 + 0.1 * rng.gen_range(0.0..1.0f64);
            let theta = v + s * normal.sample(&mut rng);
            units.push(UnitRecord::new(format!("u{i}"), theta, s));
        }
        let fit = fit_gmm(&units, false, 7).unwrap();
        // Monte-Carlo interval around the truth beta = 0
        assert!(fit.beta.abs() < 0.12, "beta = {}", fit.beta);
        assert_abs_diff_eq!(fit.mu_v, 0.5, epsilon = 0.02);
        assert_abs_diff_eq!(fit.sigma_v(), 0.15, epsilon = 0.02);
        assert_eq!(fit.j_df, 1);
    }

    #[test]
    fn hierarchical_identity_holds() {
        let p = PrecisionModelParams {
            beta: 0.5,
            mu_v: 0.292,
            variance: VarianceParams::Hierarchical {
                sigma_eta: 0.452,
                sigma_xi: 0.144,
            },
            vcov: vec![vec![0.0; 4]; 4],
            j_stat: 0.0,
            j_df: 2,
            seed: 0,
        };
        let sv2 = p.sigma_v().powi(2);
        let expect = 0.452f64.powi(2) * 0.144f64.powi(2)
            + 0.452f64.powi(2) * 0.292f64.powi(2)
            + 0.144f64.powi(2);
        assert_abs_diff_eq!(sv2, expect, epsilon = 1e-12);
        let ws = p.within_share().unwrap();
        assert_abs_diff_eq!(
            ws,
            (0.452f64.powi(2) + 1.0) * 0.144f64.powi(2) / expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn json_round_trip() {
        let mut p = params_baseline(0.51, 0.313, 0.207);
        p.j_stat = 0.101;
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("sigma_v"));
        let back: PrecisionModelParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back.beta, p.beta);
        assert_eq!(back.sigma_v(), p.sigma_v());
    }
}
