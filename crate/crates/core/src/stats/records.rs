use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::StatsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    White,
    NonWhite,
}

impl Group {
    pub fn other(self) -> Self {
        match self {
            Group::White => Group::NonWhite,
            Group::NonWhite => Group::White,
        }
    }
}

/// One subject of a population analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Years.
    pub age: f64,
    pub sex: u8,
    /// kg/m².
    pub bmi: f64,
    pub disease: u8,
    /// Follow-up time in years.
    pub time: f64,
    pub event: u8,
    pub group: Group,
    pub metrics: BTreeMap<String, f64>,
}

/// Covariates of the association models, in design-matrix order.
pub const ASSOCIATION_COVARIATES: [&str; 4] = ["disease", "age", "sex", "bmi"];

const FIXED_COLUMNS: [&str; 8] = ["id", "age", "sex", "bmi", "disease", "time", "event", "group"];

impl SubjectRecord {
    pub fn validate(&self) -> Result<(), StatsError> {
        let bad = |what: String| Err(StatsError::InvalidRecord { id: self.id.clone(), what });
        if !(self.time >= 0.0) {
            return bad(format!("time {} is negative", self.time));
        }
        if !(self.bmi > 0.0) {
            return bad(format!("bmi {} is not positive", self.bmi));
        }
        if !self.age.is_finite() {
            return bad("age is not finite".into());
        }
        if self.sex > 1 || self.disease > 1 || self.event > 1 {
            return bad("sex, disease and event must be 0 or 1".into());
        }
        Ok(())
    }

    pub fn metric(&self, name: &str) -> Result<f64, StatsError> {
        self.metrics
            .get(name)
            .copied()
            .ok_or_else(|| StatsError::MissingMetric { id: self.id.clone(), metric: name.to_string() })
    }

    fn covariate(&self, name: &str) -> f64 {
        match name {
            "disease" => self.disease as f64,
            "age" => self.age,
            "sex" => self.sex as f64,
            "bmi" => self.bmi,
            _ => unreachable!("known covariate"),
        }
    }
}

/// `[n, 4]` matrix of disease, age, sex and BMI.
pub fn association_design(records: &[SubjectRecord]) -> Array2<f64> {
    Array2::from_shape_fn((records.len(), ASSOCIATION_COVARIATES.len()), |(i, j)| {
        records[i].covariate(ASSOCIATION_COVARIATES[j])
    })
}

fn parse_group(s: &str) -> Option<Group> {
    match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "white" => Some(Group::White),
        "nonwhite" => Some(Group::NonWhite),
        _ => None,
    }
}

/// Read records from CSV with the columns `id, age, sex, bmi, disease, time,
/// event, group`; every further column is a metric.
pub fn read_records(path: &Path) -> Result<Vec<SubjectRecord>, StatsError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut fixed = [0usize; 8];
    for (k, name) in FIXED_COLUMNS.iter().enumerate() {
        fixed[k] = col(name).ok_or_else(|| StatsError::InvalidRecord { id: "<header>".into(), what: format!("missing column {name}") })?;
    }
    let metric_cols: Vec<(usize, String)> =
        headers.iter().enumerate().filter(|(_, h)| !FIXED_COLUMNS.contains(h)).map(|(i, h)| (i, h.to_string())).collect();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let id = row[fixed[0]].to_string();
        let num = |k: usize| -> Result<f64, StatsError> {
            let name = FIXED_COLUMNS[k];
            row[fixed[k]]
                .trim()
                .parse::<f64>()
                .map_err(|_| StatsError::InvalidRecord { id: id.clone(), what: format!("{name} is not a number") })
        };
        let flag = |k: usize| -> Result<u8, StatsError> {
            match num(k)? {
                0.0 => Ok(0),
                1.0 => Ok(1),
                v => Err(StatsError::InvalidRecord { id: id.clone(), what: format!("{} must be 0 or 1, got {v}", FIXED_COLUMNS[k]) }),
            }
        };
        let group = parse_group(&row[fixed[7]])
            .ok_or_else(|| StatsError::InvalidRecord { id: id.clone(), what: format!("unknown group {:?}", &row[fixed[7]]) })?;
        let mut metrics = BTreeMap::new();
        for (i, name) in &metric_cols {
            let v = row[*i].trim();
            if !v.is_empty() {
                let x = v.parse::<f64>().map_err(|_| StatsError::InvalidRecord { id: id.clone(), what: format!("{name} is not a number") })?;
                metrics.insert(name.clone(), x);
            }
        }
        let r = SubjectRecord {
            age: num(1)?,
            sex: flag(2)?,
            bmi: num(3)?,
            disease: flag(4)?,
            time: num(5)?,
            event: flag(6)?,
            group,
            metrics,
            id,
        };
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Write records in the layout read by [`read_records`]; metric columns are the union over records.
pub fn write_records(records: &[SubjectRecord], path: &Path) -> Result<(), StatsError> {
    let names: std::collections::BTreeSet<&String> = records.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(names.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.age.to_string(),
            r.sex.to_string(),
            r.bmi.to_string(),
            r.disease.to_string(),
            r.time.to_string(),
            r.event.to_string(),
            format!("{:?}", r.group),
        ];
        row.extend(names.iter().map(|n| r.metrics.get(*n).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
