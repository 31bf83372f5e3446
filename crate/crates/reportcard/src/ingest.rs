//! Loading unit-level measurements and measurement-scale transforms.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ranked unit: a point estimate with its standard error, plus optional
/// group label and raw counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: String,
    /// Point estimate, in transform-specific units.
    pub estimate: f64,
    /// Standard error of the estimate; strictly positive.
    pub se: f64,
    /// Optional group label (e.g. an industry code).
    pub group: Option<String>,
    /// Optional raw counts as (successes, trials).
    pub counts: Option<(u64, u64)>,
    /// Extra columns carried through to reports untouched.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, String>,
}

impl UnitRecord {
    pub fn new(id: impl Into<String>, estimate: f64, se: f64) -> Self {
        UnitRecord {
            id: id.into(),
            estimate,
            se,
            group: None,
            counts: None,
            aux: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    fn validate(&self, row: usize) -> Result<()> {
        if !self.estimate.is_finite() {
            return Err(Error::Parse {
                row,
                field: "estimate".into(),
                message: "estimate must be finite".into(),
            });
        }
        if !(self.se > 0.0) || !self.se.is_finite() {
            return Err(Error::Parse {
                row,
                field: "se".into(),
                message: format!("standard error must be positive, got {}", self.se),
            });
        }
        if let Some(g) = &self.group {
            if g.is_empty() {
                return Err(Error::Parse {
                    row,
                    field: "group".into(),
                    message: "group label must be nonempty when present".into(),
                });
            }
        }
        if let Some((c, n)) = self.counts {
            if n == 0 || c > n {
                return Err(Error::Parse {
                    row,
                    field: "counts".into(),
                    message: format!("need 0 <= successes <= trials with trials > 0, got ({c}, {n})"),
                });
            }
        }
        Ok(())
    }
}

/// Column names for CSV input. `estimate`/`se` may be omitted when counts are
/// present (the caller then applies a transform to fill them).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub id_col: String,
    #[serde(default)]
    pub estimate_col: Option<String>,
    #[serde(default)]
    pub se_col: Option<String>,
    #[serde(default)]
    pub group_col: Option<String>,
    #[serde(default)]
    pub successes_col: Option<String>,
    #[serde(default)]
    pub trials_col: Option<String>,
}

impl ColumnSchema {
    pub fn estimates(id: &str, estimate: &str, se: &str) -> Self {
        ColumnSchema {
            id_col: id.into(),
            estimate_col: Some(estimate.into()),
            se_col: Some(se.into()),
            group_col: None,
            successes_col: None,
            trials_col: None,
        }
    }

    pub fn group(mut self, col: &str) -> Self {
        self.group_col = Some(col.into());
        self
    }
}

/// Optional sample filters, all off by default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Drop units whose success rate `C/N` is below this value.
    #[serde(default)]
    pub min_rate: Option<f64>,
    /// Drop units with fewer than this many trials.
    #[serde(default)]
    pub min_trials: Option<u64>,
}

impl FilterConfig {
    fn keeps(&self, unit: &UnitRecord) -> bool {
        if let Some((c, n)) = unit.counts {
            if let Some(min_rate) = self.min_rate {
                if (c as f64) / (n as f64) < min_rate {
                    return false;
                }
            }
            if let Some(min_trials) = self.min_trials {
                if n < min_trials {
                    return false;
                }
            }
        }
        true
    }
}

/// Units plus any non-fatal warnings produced while loading.
#[derive(Debug)]
pub struct LoadReport {
    pub units: Vec<UnitRecord>,
    pub warnings: Vec<String>,
}

/// Load units from a CSV file (UTF-8, header row, comma-delimited) or, when
/// the file starts with `[`, from a JSON array of records. Row order is
/// preserved and filters are applied after validation.
pub fn load_units(
    path: impl AsRef<Path>,
    schema: &ColumnSchema,
    filter: &FilterConfig,
) -> Result<LoadReport> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path)?;
    if raw.trim_start().starts_with('[') {
        return load_json(&raw, filter);
    }
    load_csv(&raw, schema, filter)
}

fn load_json(raw: &str, filter: &FilterConfig) -> Result<LoadReport> {
    let units: Vec<UnitRecord> = serde_json::from_str(raw)?;
    let mut warnings = Vec::new();
    if units.is_empty() {
        warnings.push("input contains no units".to_string());
    }
    let mut seen = HashSet::new();
    for (row, u) in units.iter().enumerate() {
        u.validate(row + 1)?;
        if !seen.insert(u.id.clone()) {
            return Err(Error::DuplicateId(u.id.clone()));
        }
    }
    let kept: Vec<UnitRecord> = units.into_iter().filter(|u| filter.keeps(u)).collect();
    Ok(LoadReport {
        units: kept,
        warnings,
    })
}

fn load_csv(raw: &str, schema: &ColumnSchema, filter: &FilterConfig) -> Result<LoadReport> {
    let mut warnings = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw.as_bytes());

    if raw.trim().is_empty() {
        warnings.push("input file is empty".to_string());
        return Ok(LoadReport {
            units: Vec::new(),
            warnings,
        });
    }

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_ix = col(&schema.id_col)?;
    let est_ix = schema.estimate_col.as_deref().map(col).transpose()?;
    let se_ix = schema.se_col.as_deref().map(col).transpose()?;
    let group_ix = schema.group_col.as_deref().map(col).transpose()?;
    let succ_ix = schema.successes_col.as_deref().map(col).transpose()?;
    let trial_ix = schema.trials_col.as_deref().map(col).transpose()?;
    let named: HashSet<usize> = [Some(id_ix), est_ix, se_ix, group_ix, succ_ix, trial_ix]
        .into_iter()
        .flatten()
        .collect();

    let mut units = Vec::new();
    let mut seen = HashSet::new();
    for (ix, record) in reader.records().enumerate() {
        let row = ix + 2; // 1-based, after the header
        let record = record?;
        let field = |ix: usize| record.get(ix).unwrap_or("").to_string();
        let parse_f64 = |ix: usize, name: &str| -> Result<f64> {
            field(ix).parse::<f64>().map_err(|_| Error::Parse {
                row,
                field: name.to_string(),
                message: format!("cannot parse `{}` as a number", field(ix)),
            })
        };
        let parse_u64 = |ix: usize, name: &str| -> Result<u64> {
            field(ix).parse::<u64>().map_err(|_| Error::Parse {
                row,
                field: name.to_string(),
                message: format!("cannot parse `{}` as a count", field(ix)),
            })
        };

        let id = field(id_ix);
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let counts = match (succ_ix, trial_ix) {
            (Some(ci), Some(ni)) => Some((
                parse_u64(ci, schema.successes_col.as_deref().unwrap())?,
                parse_u64(ni, schema.trials_col.as_deref().unwrap())?,
            )),
            _ => None,
        };
        let (estimate, se) = match (est_ix, se_ix) {
            (Some(ei), Some(si)) => (
                parse_f64(ei, schema.estimate_col.as_deref().unwrap())?,
                parse_f64(si, schema.se_col.as_deref().unwrap())?,
            ),
            _ => {
                let (c, n) = counts.ok_or_else(|| Error::Parse {
                    row,
                    field: "estimate".into(),
                    message: "schema names neither estimate/se nor counts columns".into(),
                })?;
                arcsine_transform(c, n).map_err(|e| Error::Parse {
                    row,
                    field: "counts".into(),
                    message: e.to_string(),
                })?
            }
        };
        let group = group_ix.map(&field).filter(|g| !g.is_empty());
        let mut aux = BTreeMap::new();
        for (hx, header) in headers.iter().enumerate() {
            if !named.contains(&hx) {
                aux.insert(header.clone(), field(hx));
            }
        }

        let unit = UnitRecord {
            id,
            estimate,
            se,
            group,
            counts,
            aux,
        };
        unit.validate(row)?;
        units.push(unit);
    }

    if units.is_empty() {
        warnings.push("input contains no data rows".to_string());
    }
    let units: Vec<UnitRecord> = units.into_iter().filter(|u| filter.keeps(u)).collect();
    Ok(LoadReport { units, warnings })
}

/// Variance-stabilizing transform of a success count: maps `(C, N)` to
/// `(asin(sqrt(C/N)), (4N)^{-1/2})`.
pub fn arcsine_transform(successes: u64, trials: u64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::domain("trials must be positive"));
    }
    if successes > trials {
        return Err(Error::domain(format!(
            "successes ({successes}) exceed trials ({trials})"
        )));
    }
    let rate = successes as f64 / trials as f64;
    let estimate = rate.sqrt().asin();
    let se = 1.0 / (4.0 * trials as f64).sqrt();
    Ok((estimate, se))
}

/// Inverse of [`arcsine_transform`] on its range: `theta -> sin(theta)^2`.
pub fn back_transform_rate(theta: f64) -> Result<f64> {
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return Err(Error::domain(format!(
            "theta {theta} outside [0, pi/2]"
        )));
    }
    Ok(theta.sin().powi(2))
}

/// Log contact-gap estimand `ln(pw) - ln(pb)` with its Delta-method standard
/// error from the sampling variances and covariance of the two rates.
pub fn log_gap_transform(
    pw: f64,
    pb: f64,
    var_w: f64,
    var_b: f64,
    cov: f64,
) -> Result<(f64, f64)> {
    if !(pw > 0.0) || !(pb > 0.0) {
        return Err(Error::domain(format!(
            "rates must be positive, got ({pw}, {pb})"
        )));
    }
    let estimate = pw.ln() - pb.ln();
    let variance = var_w / (pw * pw) + var_b / (pb * pb) - 2.0 * cov / (pw * pb);
    if !(variance > 0.0) {
        return Err(Error::domain(format!(
            "implied variance must be positive, got {variance}"
        )));
    }
    Ok((estimate, variance.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_csv_row() {
        let f = write_temp("id,estimate,se,group\n6,0.33,0.07,55\n");
        let schema = ColumnSchema::estimates("id", "estimate", "se").group("group");
        let report = load_units(f.path(), &schema, &FilterConfig::default()).unwrap();
        assert_eq!(report.units.len(), 1);
        let u = &report.units[0];
        assert_eq!(u.id, "6");
        assert_eq!(u.estimate, 0.33);
        assert_eq!(u.se, 0.07);
        assert_eq!(u.group.as_deref(), Some("55"));
    }

    #[test]
    fn empty_file_warns() {
        let f = write_temp("");
        let schema = ColumnSchema::estimates("id", "estimate", "se");
        let report = load_units(f.path(), &schema, &FilterConfig::default()).unwrap();
        assert!(report.units.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn zero_se_names_row() {
        let f = write_temp("id,estimate,se\na,0.1,0.05\nb,0.2,0\n");
        let schema = ColumnSchema::estimates("id", "estimate", "se");
        let err = load_units(f.path(), &schema, &FilterConfig::default()).unwrap_err();
        match err {
            Error::Parse { row, field, .. } => {
                assert_eq!(row, 3);
                assert_eq!(field, "se");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let f = write_temp("id,estimate\na,0.1\n");
        let schema = ColumnSchema::estimates("id", "estimate", "se");
        let err = load_units(f.path(), &schema, &FilterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "se"));
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write_temp("id,estimate,se\na,0.1,0.05\na,0.2,0.05\n");
        let schema = ColumnSchema::estimates("id", "estimate", "se");
        let err = load_units(f.path(), &schema, &FilterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "a"));
    }

    #[test]
    fn json_alternative() {
        let f = write_temp(r#"[{"id":"x","estimate":0.2,"se":0.1,"group":"g","counts":null}]"#);
        let schema = ColumnSchema::estimates("id", "estimate", "se");
        let report = load_units(f.path(), &schema, &FilterConfig::default()).unwrap();
        assert_eq!(report.units.len(), 1);
        assert_eq!(report.units[0].id, "x");
    }

    #[test]
    fn filter_drops_low_rate_and_small_samples() {
        let f = write_temp("id,successes,trials\na,1,100\nb,50,100\nc,20,30\n");
        let schema = ColumnSchema {
            id_col: "id".into(),
            estimate_col: None,
            se_col: None,
            group_col: None,
            successes_col: Some("successes".into()),
            trials_col: Some("trials".into()),
        };
        let filter = FilterConfig {
            min_rate: Some(0.03),
            min_trials: Some(40),
        };
        let report = load_units(f.path(), &schema, &filter).unwrap();
        assert_eq!(report.units.len(), 1);
        assert_eq!(report.units[0].id, "b");
    }

    #[test]
    fn arcsine_examples() {
        let (est, se) = arcsine_transform(0, 100).unwrap();
        assert_abs_diff_eq!(est, 0.0);
        assert_abs_diff_eq!(se, 0.05);
        let (est, se) = arcsine_transform(100, 100).unwrap();
        assert_abs_diff_eq!(est, FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!(se, 0.05);
        let (est, _) = arcsine_transform(25, 100).unwrap();
        assert_abs_diff_eq!(est, FRAC_PI_6, epsilon = 1e-15);
        assert!(arcsine_transform(101, 100).is_err());
        assert!(arcsine_transform(0, 0).is_err());
    }

    #[test]
    fn arcsine_se_depends_only_on_trials() {
        let (_, se1) = arcsine_transform(3, 50).unwrap();
        let (_, se2) = arcsine_transform(47, 50).unwrap();
        assert_eq!(se1, se2);
        let (_, se_more) = arcsine_transform(3, 500).unwrap();
        assert!(se_more < se1);
    }

    #[test]
    fn back_transform_examples() {
        assert_abs_diff_eq!(back_transform_rate(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(back_transform_rate(FRAC_PI_2).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(back_transform_rate(FRAC_PI_6).unwrap(), 0.25, epsilon = 1e-15);
        assert!(back_transform_rate(-0.1).is_err());
        assert!(back_transform_rate(2.0).is_err());
    }

    #[test]
    fn round_trip_over_count_grid() {
        for &n in &[1u64, 7, 100, 9999] {
            for c in (0..=n).step_by((n as usize / 7).max(1)) {
                let (theta, _) = arcsine_transform(c, n).unwrap();
                let rate = back_transform_rate(theta).unwrap();
                assert_abs_diff_eq!(rate, c as f64 / n as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn log_gap_examples() {
        let (est, se) = log_gap_transform(0.25, 0.25, 0.001, 0.001, 0.0).unwrap();
        assert_abs_diff_eq!(est, 0.0);
        assert_abs_diff_eq!(se, 0.032f64.sqrt(), epsilon = 1e-12);

        let (est, _) = log_gap_transform(0.256, 0.236, 0.001, 0.001, 0.0).unwrap();
        assert_abs_diff_eq!(est, (0.256f64).ln() - (0.236f64).ln(), epsilon = 1e-15);

        assert!(log_gap_transform(0.25, 0.0, 0.001, 0.001, 0.0).is_err());
    }

    #[test]
    fn log_gap_antisymmetry() {
        let (est, se) = log_gap_transform(0.31, 0.22, 0.002, 0.003, 0.0005).unwrap();
        let (est2, se2) = log_gap_transform(0.22, 0.31, 0.003, 0.002, 0.0005).unwrap();
        assert_abs_diff_eq!(est, -est2, epsilon = 1e-15);
        assert_abs_diff_eq!(se, se2, epsilon = 1e-15);
    }
}
