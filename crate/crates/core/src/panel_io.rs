//! Panel CSV ingestion, balancing, and first-stage residualization.
//!
//! The on-disk schema is one row per household-year with columns
//! `household_id,year,log_earnings,age,<z1..zk>,instrument`. Every column that
//! is not one of the named ones is treated as a demographic covariate, in
//! header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fewest periods per household the estimator accepts.
pub const MIN_PERIODS: usize = 5;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("malformed value {value:?} at line {line}, column `{column}`")]
    Malformed {
        line: u64,
        column: String,
        value: String,
    },
    #[error("panel too short: {periods} periods after balancing, need at least {MIN_PERIODS}")]
    TooShort { periods: usize },
    #[error("panel has no complete households")]
    Empty,
    #[error("design matrix [1, demographics] is rank deficient (collinear demographics)")]
    RankDeficient,
    #[error("inconsistent dimensions: {0}")]
    Shape(String),
}

/// Column names of the panel CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanelSchema {
    pub household_id: String,
    pub year: String,
    pub log_earnings: String,
    pub age: String,
    pub instrument: String,
    /// Demographic columns; `None` means every remaining column.
    pub demographics: Option<Vec<String>>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            household_id: "household_id".into(),
            year: "year".into(),
            log_earnings: "log_earnings".into(),
            age: "age".into(),
            instrument: "instrument".into(),
            demographics: None,
        }
    }
}

/// All observations of one household, ordered by year.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdRecord {
    pub household_id: i64,
    pub years: Vec<i64>,
    pub log_earnings: Vec<f64>,
    pub age: Vec<f64>,
    /// One covariate vector per year.
    pub demographics: Vec<Vec<f64>>,
    pub instrument: Vec<u8>,
}

/// Balanced panel as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    pub demographic_names: Vec<String>,
    pub households: Vec<HouseholdRecord>,
    pub n_periods: usize,
    /// Households removed because their years were incomplete or not consecutive.
    pub dropped_households: usize,
}

impl RawPanel {
    pub fn n_households(&self) -> usize {
        self.households.len()
    }
}

pub fn parse_panel(path: &Path, schema: &PanelSchema) -> Result<RawPanel, PanelError> {
    let file = std::fs::File::open(path).map_err(|source| PanelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_panel_reader(file, schema)
}

struct Row {
    year: i64,
    log_earnings: f64,
    age: f64,
    demographics: Vec<f64>,
    instrument: u8,
}

pub fn parse_panel_reader<R: Read>(reader: R, schema: &PanelSchema) -> Result<RawPanel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
    };
    let i_id = col(&schema.household_id)?;
    let i_year = col(&schema.year)?;
    let i_y = col(&schema.log_earnings)?;
    let i_age = col(&schema.age)?;
    let i_w = col(&schema.instrument)?;
    let named = [i_id, i_year, i_y, i_age, i_w];
    let demo_names: Vec<String> = match &schema.demographics {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !named.contains(i))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let demo_idx = demo_names.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;

    let mut groups: BTreeMap<i64, Vec<Row>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let bad = |i: usize| PanelError::Malformed {
            line,
            column: headers.get(i).unwrap_or("?").to_string(),
            value: field(i).to_string(),
        };
        let real = |i: usize| -> Result<f64, PanelError> {
            field(i).parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(i))
        };
        let int = |i: usize| -> Result<i64, PanelError> { field(i).parse::<i64>().map_err(|_| bad(i)) };
        let id = int(i_id)?;
        let instrument = match field(i_w) {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad(i_w)),
        };
        let row = Row {
            year: int(i_year)?,
            log_earnings: real(i_y)?,
            age: real(i_age)?,
            demographics: demo_idx.iter().map(|&i| real(i)).collect::<Result<_, _>>()?,
            instrument,
        };
        groups.entry(id).or_default().push(row);
    }

    let total = groups.len();
    let mut complete: Vec<(i64, Vec<Row>)> = groups
        .into_iter()
        .filter_map(|(id, mut rows)| {
            rows.sort_by_key(|r| r.year);
            let consecutive = rows.windows(2).all(|w| w[1].year == w[0].year + 1);
            consecutive.then_some((id, rows))
        })
        .collect();
    let n_periods = complete.iter().map(|(_, r)| r.len()).max().ok_or(PanelError::Empty)?;
    complete.retain(|(_, r)| r.len() == n_periods);
    if n_periods < MIN_PERIODS {
        return Err(PanelError::TooShort { periods: n_periods });
    }

    let households = complete
        .into_iter()
        .map(|(id, rows)| HouseholdRecord {
            household_id: id,
            years: rows.iter().map(|r| r.year).collect(),
            log_earnings: rows.iter().map(|r| r.log_earnings).collect(),
            age: rows.iter().map(|r| r.age).collect(),
            instrument: rows.iter().map(|r| r.instrument).collect(),
            demographics: rows.into_iter().map(|r| r.demographics).collect(),
        })
        .collect::<Vec<_>>();
    Ok(RawPanel {
        demographic_names: demo_names,
        dropped_households: total - households.len(),
        households,
        n_periods,
    })
}

/// Write a panel in the canonical column order.
pub fn write_panel_csv<W: Write>(raw: &RawPanel, writer: W) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["household_id".to_string(), "year".into(), "log_earnings".into(), "age".into()];
    header.extend(raw.demographic_names.iter().cloned());
    header.push("instrument".into());
    w.write_record(&header)?;
    for h in &raw.households {
        for t in 0..h.years.len() {
            let mut rec = vec![
                h.household_id.to_string(),
                h.years[t].to_string(),
                h.log_earnings[t].to_string(),
                h.age[t].to_string(),
            ];
            rec.extend(h.demographics[t].iter().map(|v| v.to_string()));
            rec.push(h.instrument[t].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|source| PanelError::Io {
        path: PathBuf::from("<writer>"),
        source,
    })?;
    Ok(())
}

/// Residualized, balanced panel used by the estimator. All matrices are
/// `N x T`, stored row-major by household.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub n_households: usize,
    pub n_periods: usize,
    pub household_ids: Vec<i64>,
    pub years: Vec<i64>,
    pub y: Vec<f64>,
    pub age: Vec<f64>,
    pub instrument: Vec<u8>,
    pub beta_hat: Vec<f64>,
    pub age_mean: f64,
    pub age_sd: f64,
}

impl PanelDataset {
    /// Assemble from already residualized data; computes the age statistics.
    pub fn from_parts(
        household_ids: Vec<i64>,
        years: Vec<i64>,
        y: Vec<f64>,
        age: Vec<f64>,
        instrument: Vec<u8>,
        beta_hat: Vec<f64>,
        n_periods: usize,
    ) -> Result<Self, PanelError> {
        let n = household_ids.len();
        let cells = n * n_periods;
        if n == 0 || n_periods == 0 {
            return Err(PanelError::Empty);
        }
        for (name, len) in [("years", years.len()), ("y", y.len()), ("age", age.len()), ("instrument", instrument.len())] {
            if len != cells {
                return Err(PanelError::Shape(format!("{name} has {len} cells, expected {n} x {n_periods}")));
            }
        }
        let (age_mean, age_sd) = age_stats(&age);
        Ok(Self {
            n_households: n,
            n_periods,
            household_ids,
            years,
            y,
            age,
            instrument,
            beta_hat,
            age_mean,
            age_sd,
        })
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_periods..(i + 1) * self.n_periods]
    }

    pub fn age_row(&self, i: usize) -> &[f64] {
        &self.age[i * self.n_periods..(i + 1) * self.n_periods]
    }

    pub fn instrument_row(&self, i: usize) -> &[u8] {
        &self.instrument[i * self.n_periods..(i + 1) * self.n_periods]
    }

    /// Age in units of the sample standard deviation around the sample mean.
    pub fn standardized_age(&self, age: f64) -> f64 {
        (age - self.age_mean) / self.age_sd
    }

    /// Back to a raw panel with `log_earnings = y` and no demographics.
    pub fn to_raw(&self) -> RawPanel {
        let t = self.n_periods;
        let households = (0..self.n_households)
            .map(|i| HouseholdRecord {
                household_id: self.household_ids[i],
                years: self.years[i * t..(i + 1) * t].to_vec(),
                log_earnings: self.y_row(i).to_vec(),
                age: self.age_row(i).to_vec(),
                demographics: vec![Vec::new(); t],
                instrument: self.instrument_row(i).to_vec(),
            })
            .collect();
        RawPanel {
            demographic_names: Vec::new(),
            households,
            n_periods: t,
            dropped_households: 0,
        }
    }

    pub fn meta(&self, dropped_households: usize, demographic_names: &[String]) -> PanelMeta {
        PanelMeta {
            n_households: self.n_households,
            n_periods: self.n_periods,
            beta_hat: self.beta_hat.clone(),
            regressors: std::iter::once("intercept".to_string())
                .chain(demographic_names.iter().cloned())
                .collect(),
            age_mean: self.age_mean,
            age_sd: self.age_sd,
            dropped_households,
        }
    }
}

fn age_stats(age: &[f64]) -> (f64, f64) {
    let n = age.len() as f64;
    let mean = age.iter().sum::<f64>() / n;
    let var = if age.len() > 1 {
        age.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    // A degenerate age column is left unscaled.
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, sd)
}

/// Contents of `panel.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub n_households: usize,
    pub n_periods: usize,
    pub beta_hat: Vec<f64>,
    pub regressors: Vec<String>,
    pub age_mean: f64,
    pub age_sd: f64,
    pub dropped_households: usize,
}

/// Pooled OLS of log-earnings on `[1, demographics]`; `y` is the residual.
pub fn residualize(raw: &RawPanel) -> Result<PanelDataset, PanelError> {
    let t = raw.n_periods;
    let n = raw.n_households();
    if n == 0 {
        return Err(PanelError::Empty);
    }
    let k = raw.demographic_names.len() + 1;
    let rows = n * t;
    if rows < k {
        return Err(PanelError::RankDeficient);
    }
    let mut x = DMatrix::<f64>::zeros(rows, k);
    let mut target = DVector::<f64>::zeros(rows);
    for (i, h) in raw.households.iter().enumerate() {
        for s in 0..t {
            let r = i * t + s;
            x[(r, 0)] = 1.0;
            for (j, &z) in h.demographics[s].iter().enumerate() {
                x[(r, j + 1)] = z;
            }
            target[r] = h.log_earnings[s];
        }
    }
    let qr = x.clone().qr();
    let rmat = qr.r();
    let diag_max = rmat.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if rmat.diagonal().iter().any(|v| !(v.abs() > 1e-10 * diag_max.max(1.0))) {
        return Err(PanelError::RankDeficient);
    }
    let qty = qr.q().transpose() * &target;
    let beta = rmat.solve_upper_triangular(&qty).ok_or(PanelError::RankDeficient)?;
    let resid = &target - &x * &beta;

    let household_ids = raw.households.iter().map(|h| h.household_id).collect();
    let years = raw.households.iter().flat_map(|h| h.years.iter().copied()).collect();
    let age = raw.households.iter().flat_map(|h| h.age.iter().copied()).collect();
    let instrument = raw.households.iter().flat_map(|h| h.instrument.iter().copied()).collect();
    PanelDataset::from_parts(
        household_ids,
        years,
        resid.iter().copied().collect(),
        age,
        instrument,
        beta.iter().copied().collect(),
        t,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_text(households: &[(i64, &[i64])], with_z: bool) -> String {
        let mut s = String::from(if with_z {
            "household_id,year,log_earnings,age,z1,instrument\n"
        } else {
            "household_id,year,log_earnings,age,instrument\n"
        });
        for (id, years) in households {
            for (k, y) in years.iter().enumerate() {
                let le = 10.0 + 0.01 * (*id as f64) + 0.1 * k as f64;
                if with_z {
                    s += &format!("{id},{y},{le},{},{},{}\n", 30 + k, k as f64 * 0.5, (id + k as i64) % 2);
                } else {
                    s += &format!("{id},{y},{le},{},{}\n", 30 + k, (id + k as i64) % 2);
                }
            }
        }
        s
    }

    #[test]
    fn parses_complete_panel() {
        let years: &[i64] = &[2001, 2002, 2003, 2004, 2005];
        let text = csv_text(&[(1, years), (2, years), (3, years)], true);
        let raw = parse_panel_reader(text.as_bytes(), &PanelSchema::default()).unwrap();
        assert_eq!(raw.n_households(), 3);
        assert_eq!(raw.n_periods, 5);
        assert_eq!(raw.demographic_names, vec!["z1".to_string()]);
        assert_eq!(raw.dropped_households, 0);
    }

    #[test]
    fn household_with_gap_is_dropped() {
        let full: &[i64] = &[1, 2, 3, 4, 5];
        let gap: &[i64] = &[1, 2, 4, 5, 6];
        let text = csv_text(&[(1, full), (2, gap), (3, full)], false);
        let raw = parse_panel_reader(text.as_bytes(), &PanelSchema::default()).unwrap();
        assert_eq!(raw.n_households(), 2);
        assert_eq!(raw.dropped_households, 1);
    }

    #[test]
    fn four_periods_is_too_short() {
        let years: &[i64] = &[1, 2, 3, 4];
        let text = csv_text(&[(1, years), (2, years)], false);
        let err = parse_panel_reader(text.as_bytes(), &PanelSchema::default()).unwrap_err();
        assert!(matches!(err, PanelError::TooShort { periods: 4 }));
        assert!(err.to_string().contains("panel too short"));
    }

    #[test]
    fn malformed_cell_is_located() {
        let text = "household_id,year,log_earnings,age,instrument\n1,2000,abc,30,0\n";
        match parse_panel_reader(text.as_bytes(), &PanelSchema::default()).unwrap_err() {
            PanelError::Malformed { line, column, value } => {
                assert_eq!(line, 2);
                assert_eq!(column, "log_earnings");
                assert_eq!(value, "abc");
            }
            e => panic!("unexpected {e}"),
        }
        let text = "household_id,year,log_earnings,age,instrument\n1,2000,1.0,30,2\n";
        assert!(matches!(
            parse_panel_reader(text.as_bytes(), &PanelSchema::default()),
            Err(PanelError::Malformed { .. })
        ));
    }

    #[test]
    fn missing_column_and_file() {
        let text = "household_id,year,age,instrument\n";
        assert!(matches!(
            parse_panel_reader(text.as_bytes(), &PanelSchema::default()),
            Err(PanelError::MissingColumn(c)) if c == "log_earnings"
        ));
        assert!(matches!(
            parse_panel(Path::new("/nonexistent/panel.csv"), &PanelSchema::default()),
            Err(PanelError::Io { .. })
        ));
    }

    fn raw_from(log_earnings: Vec<Vec<f64>>, z: Option<Vec<Vec<f64>>>) -> RawPanel {
        let t = log_earnings[0].len();
        let households = log_earnings
            .into_iter()
            .enumerate()
            .map(|(i, le)| HouseholdRecord {
                household_id: i as i64,
                years: (0..t as i64).collect(),
                age: (0..t).map(|s| 30.0 + s as f64 + i as f64).collect(),
                demographics: match &z {
                    Some(z) => z[i].iter().map(|v| vec![*v]).collect(),
                    None => vec![Vec::new(); t],
                },
                instrument: vec![0; t],
                log_earnings: le,
            })
            .collect();
        RawPanel {
            demographic_names: if z.is_some() { vec!["z".into()] } else { vec![] },
            households,
            n_periods: t,
            dropped_households: 0,
        }
    }

    #[test]
    fn intercept_only_constant() {
        let raw = raw_from(vec![vec![2.5; 5]; 3], None);
        let d = residualize(&raw).unwrap();
        assert!((d.beta_hat[0] - 2.5).abs() < 1e-12);
        assert!(d.y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn exact_linear_fit() {
        let z: Vec<Vec<f64>> = (0..4).map(|i| (0..5).map(|s| (i * 5 + s) as f64 * 0.3 - 1.0).collect()).collect();
        let le = z.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
        let d = residualize(&raw_from(le, Some(z))).unwrap();
        assert!(d.y.iter().all(|v| v.abs() < 1e-10));
        assert!((d.beta_hat[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn collinear_demographic_is_rejected() {
        let z = vec![vec![1.0; 5]; 3];
        let le = vec![vec![0.0, 1.0, 2.0, 3.0, 4.0]; 3];
        assert!(matches!(residualize(&raw_from(le, Some(z))), Err(PanelError::RankDeficient)));
    }
}
