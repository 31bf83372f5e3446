//! Pipeline stages. Every stage reads its inputs from the output directory,
//! writes its artifacts there, and appends a manifest record with content
//! hashes, so a rerun with the same config reproduces identical artifacts.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use reportcard::deconv::{
    build_support, calibrate_penalty, calibrate_penalty_hierarchical, fit_hierarchical,
    fit_logspline, HierMomentTargets, MomentTargets, SplineMixing, SupportConfig,
};
use reportcard::ingest::{ColumnSchema, FilterConfig, LoadReport, UnitRecord};
use reportcard::matrix_io::{read_matrix_binary, write_matrix_binary, write_matrix_csv};
use reportcard::metrics::{
    conditional_dr_matrix, discordance_rate, expected_tau, frontier_table, write_dr_matrix_csv,
    write_frontier_csv,
};
use reportcard::posterior::{
    between_grade_variance, hierarchical_posteriors, pairwise_matrices, posterior_summary,
    unit_posteriors, PairwiseMatrices, PosteriorSummary, SquareMat,
};
use reportcard::precision::{fit_gmm, PrecisionModelParams, VarianceParams};
use reportcard::solver::{assemble_objective, lambda_sweep, solve, GradeAssignment};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::manifest::{hash_files, RunManifest, StageRecord};

/// Six-significant-digit float formatting used in every CSV artifact.
fn g6(v: f64) -> String {
    format!("{v:.5e}")
}

pub struct Pipeline {
    pub config: PipelineConfig,
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatricesMeta {
    ids: Vec<String>,
    exponent: u8,
    has_mc_se: bool,
}

/// Grade-stage metadata persisted per lambda.
#[derive(Debug, Serialize, Deserialize)]
struct AssignmentArtifact {
    lambda: f64,
    p: u8,
    assignment: GradeAssignment,
    between_grade_sd: f64,
    r_squared: f64,
    marginal_theta_variance: f64,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> anyhow::Result<Self> {
        let out = config.output.dir.clone();
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Pipeline { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest_path(&self) -> PathBuf {
        self.path("manifest.json")
    }

    fn record(
        &self,
        stage: &str,
        started: Instant,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        seed: Option<u64>,
        notes: Vec<String>,
    ) -> anyhow::Result<()> {
        let record = StageRecord {
            stage: stage.to_string(),
            inputs: hash_files(&inputs)?,
            outputs: hash_files(&outputs)?,
            seed,
            wall_time_ms: started.elapsed().as_millis(),
            notes,
        };
        let mut manifest = RunManifest::load_or_default(&self.manifest_path());
        manifest.config = Some(toml::Value::try_from(&self.config)?);
        manifest.upsert(record);
        manifest.save(&self.manifest_path())?;
        Ok(())
    }

    fn load_units(&self) -> anyhow::Result<Vec<UnitRecord>> {
        let raw = std::fs::read_to_string(self.path("units.json"))
            .context("units.json missing; run the ingest stage first")?;
        Ok(serde_json::from_str(&raw)?)
    }

    fn load_params(&self) -> anyhow::Result<PrecisionModelParams> {
        let raw = std::fs::read_to_string(self.path("gmm.json"))
            .context("gmm.json missing; run the fit-gmm stage first")?;
        Ok(serde_json::from_str(&raw)?)
    }

    fn load_prior(&self, name: &str) -> anyhow::Result<SplineMixing> {
        let raw = std::fs::read_to_string(self.path(name))
            .with_context(|| format!("{name} missing; run the fit-prior stage first"))?;
        Ok(serde_json::from_str(&raw)?)
    }

    fn load_summaries(&self) -> anyhow::Result<Vec<PosteriorSummary>> {
        let raw = std::fs::read_to_string(self.path("posteriors.json"))
            .context("posteriors.json missing; run the posteriors stage first")?;
        Ok(serde_json::from_str(&raw)?)
    }

    fn load_matrices(&self) -> anyhow::Result<PairwiseMatrices> {
        let raw = std::fs::read_to_string(self.path("matrices.json"))
            .context("matrices.json missing; run the posteriors stage first")?;
        let meta: MatricesMeta = serde_json::from_str(&raw)?;
        let pi = read_matrix_binary(self.path("pi.bin"))?;
        let (mu_p, m_p) = if meta.exponent == 2 {
            (
                Some(read_matrix_binary(self.path("mu2.bin"))?),
                Some(read_matrix_binary(self.path("m2.bin"))?),
            )
        } else {
            (None, None)
        };
        let mc_se = if meta.has_mc_se {
            Some(read_matrix_binary(self.path("pi_mc_se.bin"))?)
        } else {
            None
        };
        Ok(PairwiseMatrices {
            ids: meta.ids,
            pi,
            mu_p,
            m_p,
            exponent: meta.exponent,
            mc_se,
        })
    }

    // -----------------------------------------------------------------
    // stages
    // -----------------------------------------------------------------

    pub fn stage_ingest(&self) -> anyhow::Result<()> {
        let started = Instant::now();
        let input = &self.config.input;
        let filter = FilterConfig {
            min_rate: self.config.filter.min_rate,
            min_trials: self.config.filter.min_trials,
        };
        let LoadReport { units, warnings } = match input.transform.as_str() {
            "log-gap" => self.load_log_gap(&filter)?,
            "arcsine" => {
                let schema = ColumnSchema {
                    id_col: input.id_col.clone(),
                    estimate_col: None,
                    se_col: None,
                    group_col: input.group_col.clone(),
                    successes_col: Some(
                        input
                            .successes_col
                            .clone()
                            .context("arcsine transform needs successes_col")?,
                    ),
                    trials_col: Some(
                        input
                            .trials_col
                            .clone()
                            .context("arcsine transform needs trials_col")?,
                    ),
                };
                reportcard::ingest::load_units(&input.path, &schema, &filter)?
            }
            _ => {
                let schema = ColumnSchema {
                    id_col: input.id_col.clone(),
                    estimate_col: Some(
                        input
                            .estimate_col
                            .clone()
                            .context("passthrough transform needs estimate_col")?,
                    ),
                    se_col: Some(
                        input.se_col.clone().context("passthrough transform needs se_col")?,
                    ),
                    group_col: input.group_col.clone(),
                    successes_col: input.successes_col.clone(),
                    trials_col: input.trials_col.clone(),
                };
                reportcard::ingest::load_units(&input.path, &schema, &filter)?
            }
        };
        for w in &warnings {
            eprintln!("warning: {w}");
        }
        let out = self.path("units.json");
        std::fs::write(&out, serde_json::to_string_pretty(&units)?)?;
        self.record(
            "ingest",
            started,
            vec![input.path.clone()],
            vec![out],
            None,
            warnings,
        )
    }

    fn load_log_gap(&self, filter: &FilterConfig) -> anyhow::Result<LoadReport> {
        let input = &self.config.input;
        let need = |o: &Option<String>, name: &str| -> anyhow::Result<String> {
            o.clone().with_context(|| format!("log-gap transform needs {name}"))
        };
        let cols = [
            need(&input.rate_w_col, "rate_w_col")?,
            need(&input.rate_b_col, "rate_b_col")?,
            need(&input.var_w_col, "var_w_col")?,
            need(&input.var_b_col, "var_b_col")?,
            need(&input.cov_col, "cov_col")?,
        ];
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&input.path)?;
        let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
        let find = |name: &str| -> anyhow::Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .with_context(|| format!("missing column `{name}`"))
        };
        let id_ix = find(&input.id_col)?;
        let group_ix = input.group_col.as_deref().map(find).transpose()?;
        let ixs: Vec<usize> = cols.iter().map(|c| find(c)).collect::<anyhow::Result<_>>()?;
        let mut units = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let value = |ix: usize| -> anyhow::Result<f64> {
                record
                    .get(ix)
                    .unwrap_or("")
                    .parse::<f64>()
                    .with_context(|| format!("row {}: bad number", row + 2))
            };
            let (pw, pb, vw, vb, cov) = (
                value(ixs[0])?,
                value(ixs[1])?,
                value(ixs[2])?,
                value(ixs[3])?,
                value(ixs[4])?,
            );
            let (estimate, se) = reportcard::ingest::log_gap_transform(pw, pb, vw, vb, cov)?;
            let mut unit = UnitRecord::new(record.get(id_ix).unwrap_or("").to_string(), estimate, se);
            if let Some(gix) = group_ix {
                let g = record.get(gix).unwrap_or("");
                if !g.is_empty() {
                    unit.group = Some(g.to_string());
                }
            }
            units.push(unit);
        }
        let warnings = if units.is_empty() {
            vec!["input contains no data rows".to_string()]
        } else {
            Vec::new()
        };
        let units = units.into_iter().filter(|u| filter_keeps(filter, u)).collect();
        Ok(LoadReport { units, warnings })
    }

    pub fn stage_fit_gmm(&self) -> anyhow::Result<()> {
        let started = Instant::now();
        let units = self.load_units()?;
        let params = match self.config.model.precision.as_str() {
            "none" => pseudo_params(&units, self.config.model.seed)?,
            _ => fit_gmm(
                &units,
                self.config.model.kind == "hierarchical",
                self.config.model.seed,
            )?,
        };
        let out = self.path("gmm.json");
        std::fs::write(&out, serde_json::to_string_pretty(&params)?)?;
        self.record(
            "fit-gmm",
            started,
            vec![self.path("units.json")],
            vec![out],
            Some(self.config.model.seed),
            vec![],
        )
    }

    pub fn stage_fit_prior(&self) -> anyhow::Result<()> {
        let started = Instant::now();
        let units = self.load_units()?;
        let params = self.load_params()?;
        let kind = self.config.basis_kind();
        let order = self.config.prior.spline_order;
        let mut outputs = Vec::new();
        let mut notes = Vec::new();

        if self.config.model.kind == "hierarchical" {
            let (eta_support, xi_support) = self.hierarchical_supports(&units, &params)?;
            let (sigma_eta, sigma_xi) = match params.variance {
                VarianceParams::Hierarchical { sigma_eta, sigma_xi } => (sigma_eta, sigma_xi),
                _ => anyhow::bail!("hierarchical prior needs a hierarchical precision fit"),
            };
            let (c_eta, c_xi) = match (self.config.prior.penalty_eta, self.config.prior.penalty) {
                (Some(ce), Some(cx)) => (ce, cx),
                _ if self.config.prior.calibrate => {
                    let weight = hier_weight(&params);
                    let targets = HierMomentTargets {
                        mu_v: params.mu_v,
                        sigma_eta,
                        sigma_xi,
                        weight,
                    };
                    let (ce, cx) = calibrate_penalty_hierarchical(
                        &units,
                        params.beta,
                        &eta_support,
                        &xi_support,
                        &targets,
                        kind,
                        order,
                        3,
                    )?;
                    if ce.at_boundary || cx.at_boundary {
                        notes.push("penalty search hit its boundary".to_string());
                    }
                    notes.push(format!(
                        "calibrated penalties ({:.6}, {:.6}), criterion {:.6}",
                        ce.penalty, cx.penalty, cx.criterion
                    ));
                    (ce.penalty, cx.penalty)
                }
                _ => (1.0, 1.0),
            };
            let (g_eta, g_xi) = fit_hierarchical(
                &units,
                params.beta,
                &eta_support,
                &xi_support,
                c_eta,
                c_xi,
                kind,
                order,
            )?;
            let eta_path = self.path("prior_eta.json");
            let xi_path = self.path("prior_xi.json");
            std::fs::write(&eta_path, serde_json::to_string(&g_eta)?)?;
            std::fs::write(&xi_path, serde_json::to_string(&g_xi)?)?;
            outputs.push(eta_path);
            outputs.push(xi_path);
        } else {
            let estimates: Vec<f64> = units
                .iter()
                .map(|u| u.estimate / u.se.powf(params.beta))
                .collect();
            let support = build_support(
                &estimates,
                params.mu_v,
                params.sigma_v(),
                &SupportConfig {
                    points: self.config.prior.grid_points,
                    floor: 0.0,
                },
            )?;
            let penalty = match self.config.prior.penalty {
                Some(c) => c,
                None if self.config.prior.calibrate => {
                    let targets = MomentTargets {
                        mean: params.mu_v,
                        sd: params.sigma_v(),
                        weight: invert2(params.moment_target_vcov()),
                    };
                    let cal =
                        calibrate_penalty(&units, params.beta, &support, &targets, kind, order)?;
                    if cal.at_boundary {
                        notes.push("penalty search hit its boundary".to_string());
                    }
                    notes.push(format!(
                        "calibrated penalty {:.6}, criterion {:.6}",
                        cal.penalty, cal.criterion
                    ));
                    cal.penalty
                }
                None => 1.0,
            };
            let prior = fit_logspline(&units, params.beta, &support, penalty, kind, order)?;
            let path = self.path("prior.json");
            std::fs::write(&path, serde_json::to_string(&prior)?)?;
            outputs.push(path);
        }
        self.record(
            "fit-prior",
            started,
            vec![self.path("units.json"), self.path("gmm.json")],
            outputs,
            None,
            notes,
        )
    }

    fn hierarchical_supports(
        &self,
        units: &[UnitRecord],
        params: &PrecisionModelParams,
    ) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
        let (sigma_eta, sigma_xi) = match params.variance {
            VarianceParams::Hierarchical { sigma_eta, sigma_xi } => (sigma_eta, sigma_xi),
            _ => anyhow::bail!("hierarchical supports need a hierarchical precision fit"),
        };
        // group means of vhat estimate the group effects (normalized by mu_v);
        // unit ratios against them estimate the unit effects
        let mut by_group: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
        for u in units {
            let g = u.group.as_deref().context("hierarchical model needs group labels")?;
            by_group
                .entry(g)
                .or_default()
                .push(u.estimate / u.se.powf(params.beta));
        }
        let mut eta_hat = Vec::new();
        let mut group_mean = std::collections::BTreeMap::new();
        for (g, vals) in &by_group {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            eta_hat.push(mean / params.mu_v);
            group_mean.insert(*g, mean / params.mu_v);
        }
        let mut xi_hat = Vec::new();
        for u in units {
            let g = u.group.as_deref().unwrap();
            let eta = group_mean[g];
            let vhat = u.estimate / u.se.powf(params.beta);
            if eta.abs() > 1e-9 {
                xi_hat.push(vhat / eta);
            }
        }
        let cfg = SupportConfig {
            points: self.config.prior.eta_grid_points,
            floor: 0.0,
        };
        let eta_support = build_support(&eta_hat, 1.0, sigma_eta, &cfg)?;
        let xi_support = build_support(&xi_hat, params.mu_v, sigma_xi, &cfg)?;
        Ok((eta_support, xi_support))
    }

    pub fn stage_posteriors(&self) -> anyhow::Result<()> {
        let started = Instant::now();
        let units = self.load_units()?;
        let params = self.load_params()?;
        let mut outputs = Vec::new();
        let mut notes = Vec::new();
        let (summaries, matrices) = if self.config.model.kind == "hierarchical" {
            let g_eta = self.load_prior("prior_eta.json")?;
            let g_xi = self.load_prior("prior_xi.json")?;
            let result = hierarchical_posteriors(
                &units,
                &g_eta,
                &g_xi,
                params.beta,
                self.config.prior.draws,
                self.config.model.seed,
                0.95,
            )?;
            for (g, ess) in &result.group_ess {
                notes.push(format!("group {g}: importance ESS {ess:.1}"));
            }
            (result.summaries, result.matrices)
        } else {
            let prior = self.load_prior("prior.json")?;
            let posts = unit_posteriors(&units, &prior, params.beta)?;
            let summaries = posts
                .iter()
                .map(|p| posterior_summary(p, 0.95))
                .collect::<reportcard::Result<Vec<_>>>()?;
            let matrices = pairwise_matrices(&posts, self.config.grading.p);
            (summaries, matrices)
        };

        let post_path = self.path("posteriors.json");
        std::fs::write(&post_path, serde_json::to_string_pretty(&summaries)?)?;
        outputs.push(post_path);
        let csv_path = self.path("posteriors.csv");
        {
            let mut w = csv::Writer::from_path(&csv_path)?;
            w.write_record(["id", "mean", "lo", "hi", "second_moment"])?;
            for s in &summaries {
                w.write_record([
                    s.id.clone(),
                    g6(s.mean),
                    g6(s.lo),
                    g6(s.hi),
                    g6(s.second_moment),
                ])?;
            }
            w.flush()?;
        }
        outputs.push(csv_path);

        let meta = MatricesMeta {
            ids: matrices.ids.clone(),
            exponent: matrices.exponent,
            has_mc_se: matrices.mc_se.is_some(),
        };
        let meta_path = self.path("matrices.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        outputs.push(meta_path);
        write_matrix_csv(&matrices.ids, &matrices.pi, self.path("pi.csv"))?;
        write_matrix_binary(&matrices.pi, self.path("pi.bin"))?;
        outputs.push(self.path("pi.csv"));
        outputs.push(self.path("pi.bin"));
        if let (Some(mu), Some(m)) = (&matrices.mu_p, &matrices.m_p) {
            write_matrix_csv(&matrices.ids, mu, self.path("mu2.csv"))?;
            write_matrix_binary(mu, self.path("mu2.bin"))?;
            write_matrix_csv(&matrices.ids, m, self.path("m2.csv"))?;
            write_matrix_binary(m, self.path("m2.bin"))?;
            outputs.extend([
                self.path("mu2.csv"),
                self.path("mu2.bin"),
                self.path("m2.csv"),
                self.path("m2.bin"),
            ]);
        }
        if let Some(se) = &matrices.mc_se {
            write_matrix_binary(se, self.path("pi_mc_se.bin"))?;
            outputs.push(self.path("pi_mc_se.bin"));
        }
        let mut inputs = vec![self.path("units.json"), self.path("gmm.json")];
        if self.config.model.kind == "hierarchical" {
            inputs.push(self.path("prior_eta.json"));
            inputs.push(self.path("prior_xi.json"));
        } else {
            inputs.push(self.path("prior.json"));
        }
        self.record(
            "posteriors",
            started,
            inputs,
            outputs,
            Some(self.config.model.seed),
            notes,
        )
    }

    fn marginal_theta_variance(&self, units: &[UnitRecord], params: &PrecisionModelParams) -> anyhow::Result<f64> {
        let scales: Vec<f64> = units.iter().map(|u| u.se.powf(params.beta)).collect();
        if self.config.model.kind == "hierarchical" {
            let g_eta = self.load_prior("prior_eta.json")?;
            let g_xi = self.load_prior("prior_xi.json")?;
            let raw = |g: &SplineMixing, k: i32| -> f64 {
                g.support
                    .iter()
                    .zip(&g.masses)
                    .map(|(x, w)| x.powi(k) * w)
                    .sum()
            };
            let (e1, e2) = (raw(&g_eta, 1), raw(&g_eta, 2));
            let (x1, x2) = (raw(&g_xi, 1), raw(&g_xi, 2));
            let s1 = scales.iter().sum::<f64>() / scales.len() as f64;
            let s2 = scales.iter().map(|s| s * s).sum::<f64>() / scales.len() as f64;
            Ok(s2 * e2 * x2 - (s1 * e1 * x1).powi(2))
        } else {
            let prior = self.load_prior("prior.json")?;
            let m = prior.scaled_moments(&scales);
            Ok(m.sd * m.sd)
        }
    }

    pub fn stage_grade(&self) -> anyhow::Result<()> {
        let started = Instant::now();
        let units = self.load_units()?;
        let params = self.load_params()?;
        let matrices = self.load_matrices()?;
        let summaries = self.load_summaries()?;
        let opts = self.config.solve_options();
        let sweep = lambda_sweep(&matrices, &self.config.grading.lambdas, &opts)?;
        let marginal_var = self.marginal_theta_variance(&units, &params)?;
        let mut outputs = Vec::new();
        for (lambda, assignment) in &sweep {
            if !self.config.grading.lambdas.contains(lambda) && *lambda == 1.0 {
                // lambda = 1 solved only for Condorcet ranks
            }
            let (between, r2) =
                between_grade_variance(&assignment.grades, &summaries, marginal_var);
            let artifact = AssignmentArtifact {
                lambda: *lambda,
                p: self.config.grading.p,
                assignment: assignment.clone(),
                between_grade_sd: between.max(0.0).sqrt(),
                r_squared: r2,
                marginal_theta_variance: marginal_var,
            };
            let json_path = self.path(&format!("assignment_{lambda}.json"));
            std::fs::write(&json_path, serde_json::to_string_pretty(&artifact)?)?;
            outputs.push(json_path);
            let csv_path = self.path(&format!("grades_{lambda}.csv"));
            let mut w = csv::Writer::from_path(&csv_path)?;
            w.write_record(["id", "grade", "condorcet_rank"])?;
            let ranks = assignment.condorcet_rank.clone().unwrap_or_default();
            for (ix, id) in assignment.ids.iter().enumerate() {
                w.write_record([
                    id.clone(),
                    assignment.grades[ix].to_string(),
                    ranks.get(ix).map(|r| r.to_string()).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            outputs.push(csv_path);
            let dr_cells = conditional_dr_matrix(&assignment.grades, &matrices);
            let dr_path = self.path(&format!("dr_matrix_{lambda}.csv"));
            write_dr_matrix_csv(&dr_cells, &dr_path)?;
            outputs.push(dr_path);
        }
        self.record(
            "grade",
            started,
            vec![self.path("matrices.json"), self.path("posteriors.json")],
            outputs,
            Some(self.config.grading.seed),
            vec![],
        )
    }

    pub fn stage_frontier(&self) -> anyhow::Result<()> {
        let started = Instant::now();
        let units = self.load_units()?;
        let summaries = self.load_summaries()?;
        let matrices = self.load_matrices()?;
        let opts = self.config.solve_options();
        let sweep = lambda_sweep(&matrices, &self.config.grading.lambdas, &opts)?;
        let estimates: Vec<f64> = units.iter().map(|u| u.estimate).collect();
        let means: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
        let rows = frontier_table(
            &sweep,
            &matrices,
            &[("estimate_rank", estimates), ("posterior_mean_rank", means)],
        )?;
        let path = self.path("frontier.csv");
        write_frontier_csv(&rows, &path)?;
        self.record(
            "frontier",
            started,
            vec![self.path("matrices.json"), self.path("posteriors.json")],
            vec![path],
            Some(self.config.grading.seed),
            vec![],
        )
    }

    pub fn stage_report(&self) -> anyhow::Result<()> {
        let started = Instant::now();
        let units = self.load_units()?;
        let summaries = self.load_summaries()?;
        let mut outputs = Vec::new();
        let mut notes = Vec::new();
        // anonymized ids: rank of the point estimate, 1 = largest
        let anon_ids: Vec<String> = {
            let mut order: Vec<usize> = (0..units.len()).collect();
            order.sort_by(|&a, &b| {
                units[b]
                    .estimate
                    .partial_cmp(&units[a].estimate)
                    .unwrap()
                    .then(units[a].id.cmp(&units[b].id))
            });
            let mut ids = vec![String::new(); units.len()];
            for (rank, &u) in order.iter().enumerate() {
                ids[u] = (rank + 1).to_string();
            }
            ids
        };
        for lambda in &self.config.grading.lambdas {
            let raw = std::fs::read_to_string(self.path(&format!("assignment_{lambda}.json")))
                .with_context(|| format!("assignment for lambda {lambda} missing; run grade"))?;
            let artifact: AssignmentArtifact = serde_json::from_str(&raw)?;
            let assignment = &artifact.assignment;
            anyhow::ensure!(
                assignment.ids.len() == summaries.len(),
                "assignment and posterior summaries cover different units"
            );
            let ranks = assignment
                .condorcet_rank
                .clone()
                .context("assignment lacks Condorcet ranks")?;
            let stars: Vec<usize> = if self.config.output.polarity == "stars_worst" {
                assignment.grades.clone()
            } else {
                assignment.stars()
            };
            // ordered by Condorcet rank (1 = most biased first)
            let mut order: Vec<usize> = (0..units.len()).collect();
            order.sort_by_key(|&i| ranks[i]);
            // grade contiguity along the ordering
            let mut seen_grades: Vec<usize> = Vec::new();
            for &i in &order {
                if seen_grades.last() != Some(&assignment.grades[i]) {
                    if seen_grades.contains(&assignment.grades[i]) {
                        notes.push(format!(
                            "lambda {lambda}: grades not contiguous in Condorcet order at unit {}",
                            assignment.ids[i]
                        ));
                    }
                    seen_grades.push(assignment.grades[i]);
                }
            }

            let aux_keys: Vec<String> = {
                let mut keys: Vec<String> = units
                    .iter()
                    .flat_map(|u| u.aux.keys().cloned())
                    .collect();
                keys.sort();
                keys.dedup();
                keys
            };
            let csv_path = self.path(&format!("report_{lambda}.csv"));
            let mut w = csv::Writer::from_path(&csv_path)?;
            let mut header = vec![
                "id".to_string(),
                "group".to_string(),
                "estimate".to_string(),
                "se".to_string(),
                "post_mean".to_string(),
                "ci_lo".to_string(),
                "ci_hi".to_string(),
                "grade_stars".to_string(),
                "condorcet_rank".to_string(),
            ];
            header.extend(aux_keys.iter().cloned());
            w.write_record(&header)?;
            for &i in &order {
                let u = &units[i];
                let s = &summaries[i];
                let id = if self.config.output.anonymize {
                    anon_ids[i].clone()
                } else {
                    u.id.clone()
                };
                let mut row = vec![
                    id,
                    u.group.clone().unwrap_or_default(),
                    g6(u.estimate),
                    g6(u.se),
                    g6(s.mean),
                    g6(s.lo),
                    g6(s.hi),
                    stars[i].to_string(),
                    ranks[i].to_string(),
                ];
                for key in &aux_keys {
                    row.push(u.aux.get(key).cloned().unwrap_or_default());
                }
                w.write_record(&row)?;
            }
            w.flush()?;
            outputs.push(csv_path);

            #[derive(Serialize)]
            struct CaterpillarUnit {
                id: String,
                rank: usize,
                mean: f64,
                lo: f64,
                hi: f64,
                stars: usize,
            }
            let layout: Vec<CaterpillarUnit> = order
                .iter()
                .map(|&i| CaterpillarUnit {
                    id: if self.config.output.anonymize {
                        anon_ids[i].clone()
                    } else {
                        units[i].id.clone()
                    },
                    rank: ranks[i],
                    mean: summaries[i].mean,
                    lo: summaries[i].lo,
                    hi: summaries[i].hi,
                    stars: stars[i],
                })
                .collect();
            let json_path = self.path(&format!("caterpillar_{lambda}.json"));
            std::fs::write(&json_path, serde_json::to_string_pretty(&layout)?)?;
            outputs.push(json_path);
        }
        let inputs: Vec<PathBuf> = self
            .config
            .grading
            .lambdas
            .iter()
            .map(|l| self.path(&format!("assignment_{l}.json")))
            .chain([self.path("posteriors.json"), self.path("units.json")])
            .collect();
        self.record("report", started, inputs, outputs, None, notes)
    }

    /// The full pipeline: ingest, fit-gmm, fit-prior, posteriors, grade,
    /// report.
    pub fn run_all(&self) -> anyhow::Result<()> {
        self.stage_ingest()?;
        self.stage_fit_gmm()?;
        self.stage_fit_prior()?;
        self.stage_posteriors()?;
        self.stage_grade()?;
        self.stage_report()?;
        Ok(())
    }
}

fn filter_keeps(filter: &FilterConfig, unit: &UnitRecord) -> bool {
    if let Some((c, n)) = unit.counts {
        if let Some(min_rate) = filter.min_rate {
            if (c as f64) / (n as f64) < min_rate {
                return false;
            }
        }
        if let Some(min_trials) = filter.min_trials {
            if n < min_trials {
                return false;
            }
        }
    }
    true
}

/// Precision parameters when no dependence model is fit: beta fixed to
/// zero, targets from the bias-corrected sample moments.
fn pseudo_params(units: &[UnitRecord], seed: u64) -> anyhow::Result<PrecisionModelParams> {
    let n = units.len() as f64;
    anyhow::ensure!(n >= 2.0, "need at least two units");
    let mean = units.iter().map(|u| u.estimate).sum::<f64>() / n;
    let sample_var = units
        .iter()
        .map(|u| (u.estimate - mean).powi(2))
        .sum::<f64>()
        / n;
    let mean_se2 = units.iter().map(|u| u.se * u.se).sum::<f64>() / n;
    let var = (sample_var - mean_se2).max(1e-12);
    let sd = var.sqrt();
    // influence-function variances of the moment estimates
    let var_mean = sample_var / n;
    let var_of_var = units
        .iter()
        .map(|u| ((u.estimate - mean).powi(2) - u.se * u.se - var).powi(2))
        .sum::<f64>()
        / (n * n);
    let var_sd = var_of_var / (4.0 * var);
    let mut vcov = vec![vec![0.0; 3]; 3];
    vcov[1][1] = var_mean;
    vcov[2][2] = var_sd;
    Ok(PrecisionModelParams {
        beta: 0.0,
        mu_v: mean,
        variance: VarianceParams::Baseline { sigma_v: sd },
        vcov,
        j_stat: 0.0,
        j_df: 0,
        seed,
    })
}

fn invert2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-300 {
        return [[1.0, 0.0], [0.0, 1.0]];
    }
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

fn hier_weight(params: &PrecisionModelParams) -> [[f64; 3]; 3] {
    // inverse of the (mu_v, sigma_eta, sigma_xi) covariance block
    let idx = [1usize, 2, 3];
    let mut block = nalgebra::DMatrix::zeros(3, 3);
    for (r, &ir) in idx.iter().enumerate() {
        for (c, &ic) in idx.iter().enumerate() {
            block[(r, c)] = params
                .vcov
                .get(ir)
                .and_then(|row| row.get(ic))
                .copied()
                .unwrap_or(0.0);
        }
    }
    match block.clone().try_inverse() {
        Some(inv) => {
            let mut out = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    out[r][c] = inv[(r, c)];
                }
            }
            out
        }
        None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    }
}

