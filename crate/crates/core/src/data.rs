//! Long-format longitudinal data with left-censored responses.
//!
//! One row per measurement. The censoring indicator follows the usual
//! `OBS` convention: `1` means the response was measured, `0` means it is
//! only known to lie below the row's detection limit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use log::warn;

use crate::error::{Error, Result};

/// A single measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub subject_id: String,
    pub time: f64,
    /// Measured value. For censored rows this is a placeholder (the threshold
    /// by convention) and is never read by the censoring-aware likelihoods.
    pub response: f64,
    pub is_observed: bool,
    /// Detection limit. Required to be finite on censored rows.
    pub threshold: f64,
    /// 1-based residual-variance stratum.
    pub marker: usize,
    pub covariates: Vec<f64>,
}

impl Observation {
    /// Observed measurement with no covariates on marker 1.
    pub fn observed(subject_id: impl Into<String>, time: f64, response: f64) -> Self {
        Observation {
            subject_id: subject_id.into(),
            time,
            response,
            is_observed: true,
            threshold: f64::NAN,
            marker: 1,
            covariates: Vec::new(),
        }
    }

    /// Left-censored measurement; the response placeholder is the threshold.
    pub fn censored(subject_id: impl Into<String>, time: f64, threshold: f64) -> Self {
        Observation {
            subject_id: subject_id.into(),
            time,
            response: threshold,
            is_observed: false,
            threshold,
            marker: 1,
            covariates: Vec::new(),
        }
    }

    pub fn with_marker(mut self, marker: usize) -> Self {
        self.marker = marker;
        self
    }

    pub fn with_covariates(mut self, covariates: Vec<f64>) -> Self {
        self.covariates = covariates;
        self
    }

    fn check(&self) -> Result<()> {
        if self.is_observed && !self.response.is_finite() {
            return Err(Error::InvalidData(format!(
                "subject `{}`: observed response must be finite",
                self.subject_id
            )));
        }
        if !self.is_observed && !self.threshold.is_finite() {
            return Err(Error::InvalidData(format!(
                "subject `{}`: censored row at time {} has no finite threshold",
                self.subject_id, self.time
            )));
        }
        if !self.time.is_finite() {
            return Err(Error::InvalidData(format!(
                "subject `{}`: non-finite time",
                self.subject_id
            )));
        }
        if self.marker == 0 {
            return Err(Error::InvalidData(format!(
                "subject `{}`: marker index is 1-based",
                self.subject_id
            )));
        }
        Ok(())
    }
}

/// All measurements of one subject, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    subject_id: String,
    observations: Vec<Observation>,
}

impl SubjectData {
    pub fn new(subject_id: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let subject_id = subject_id.into();
        if observations.is_empty() {
            return Err(Error::InvalidData(format!(
                "subject `{subject_id}` has no observations"
            )));
        }
        for o in &observations {
            if o.subject_id != subject_id {
                return Err(Error::InvalidData(format!(
                    "observation for `{}` placed in subject `{subject_id}`",
                    o.subject_id
                )));
            }
            o.check()?;
        }
        Ok(SubjectData {
            subject_id,
            observations,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn n_obs(&self) -> usize {
        self.observations.iter().filter(|o| o.is_observed).count()
    }

    pub fn n_cens(&self) -> usize {
        self.len() - self.n_obs()
    }
}

/// Split a subject's measurements into observed and censored index blocks,
/// each in input order.
pub fn partition_subject(s: &SubjectData) -> (Vec<usize>, Vec<usize>) {
    let mut observed = Vec::with_capacity(s.len());
    let mut censored = Vec::new();
    for (j, o) in s.observations.iter().enumerate() {
        if o.is_observed {
            observed.push(j);
        } else {
            censored.push(j);
        }
    }
    (observed, censored)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subjects: Vec<SubjectData>,
    column_names: Vec<String>,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectData>, column_names: Vec<String>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidData("dataset has no subjects".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::InvalidData(format!(
                    "duplicate subject id `{}`",
                    s.subject_id
                )));
            }
        }
        Ok(Dataset {
            subjects,
            column_names,
        })
    }

    /// Groups observations by subject id, keeping first-appearance order of
    /// subjects and input order within each subject.
    pub fn from_observations(
        observations: Vec<Observation>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let mut groups: IndexMap<String, Vec<Observation>> = IndexMap::new();
        for o in observations {
            groups.entry(o.subject_id.clone()).or_default().push(o);
        }
        let subjects = groups
            .into_iter()
            .map(|(id, obs)| SubjectData::new(id, obs))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(subjects, column_names)
    }

    pub fn subjects(&self) -> &[SubjectData] {
        &self.subjects
    }

    /// Names of the extra covariate columns, in covariate-vector order.
    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn n_rows(&self) -> usize {
        self.subjects.iter().map(SubjectData::len).sum()
    }

    pub fn n_censored(&self) -> usize {
        self.subjects.iter().map(SubjectData::n_cens).sum()
    }

    pub fn censored_fraction(&self) -> f64 {
        self.n_censored() as f64 / self.n_rows() as f64
    }

    pub fn max_marker(&self) -> usize {
        self.subjects
            .iter()
            .flat_map(|s| s.observations.iter().map(|o| o.marker))
            .max()
            .unwrap_or(1)
    }

    /// Copy of the dataset where every censored response is replaced by its
    /// threshold and flagged as observed.
    pub fn impute_thresholds(&self) -> Dataset {
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectData {
                subject_id: s.subject_id.clone(),
                observations: s
                    .observations
                    .iter()
                    .map(|o| {
                        let mut o = o.clone();
                        if !o.is_observed {
                            o.response = o.threshold;
                            o.is_observed = true;
                        }
                        o
                    })
                    .collect(),
            })
            .collect();
        Dataset {
            subjects,
            column_names: self.column_names.clone(),
        }
    }
}

/// Column mapping for [`read_long_csv`].
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub response: String,
    pub obs: String,
    /// Per-row detection limit column. Used when present in the file.
    pub limit: Option<String>,
    /// Marker / stratum column (1-based). Defaults to 1 when absent.
    pub marker: Option<String>,
    pub covariates: Vec<String>,
    /// Detection limit broadcast to rows without a per-row limit.
    pub global_threshold: Option<f64>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "id".into(),
            time: "time".into(),
            response: "y".into(),
            obs: "obs".into(),
            limit: Some("limit".into()),
            marker: Some("marker".into()),
            covariates: Vec::new(),
            global_threshold: None,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c == "."
}

fn parse_f64(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{cell}`: {e}"),
    })
}

pub fn read_long_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    read_long_csv_from(file, schema)
}

/// Reads long-format data. Row numbers in errors are 1-based data rows
/// (the header is row 0).
pub fn read_long_csv_from<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = find(&schema.id)?;
    let time_col = find(&schema.time)?;
    let y_col = find(&schema.response)?;
    let obs_col = find(&schema.obs)?;
    // Optional columns are silently skipped when the file does not carry them.
    let limit_col = schema
        .limit
        .as_deref()
        .and_then(|n| headers.iter().position(|h| h == n));
    let marker_col = schema
        .marker
        .as_deref()
        .and_then(|n| headers.iter().position(|h| h == n));
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let get = |col: usize| rec.get(col).unwrap_or("");
        let subject_id = get(id_col).to_string();
        if subject_id.is_empty() {
            return Err(Error::Parse {
                row,
                column: schema.id.clone(),
                message: "empty subject id".into(),
            });
        }
        let time = parse_f64(get(time_col), row, &schema.time)?;
        let is_observed = match get(obs_col) {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    row,
                    column: schema.obs.clone(),
                    message: format!("censoring indicator must be 0 or 1, got `{other}`"),
                })
            }
        };
        let threshold = match limit_col {
            Some(c) if !is_missing(get(c)) => {
                parse_f64(get(c), row, schema.limit.as_deref().unwrap_or("limit"))?
            }
            _ => schema.global_threshold.unwrap_or(f64::NAN),
        };
        let y_cell = get(y_col);
        let response = if is_missing(y_cell) {
            if is_observed {
                warn!("row {row}: missing response for subject `{subject_id}` dropped");
                continue;
            }
            threshold
        } else {
            parse_f64(y_cell, row, &schema.response)?
        };
        if !is_observed && !threshold.is_finite() {
            return Err(Error::Parse {
                row,
                column: schema.limit.clone().unwrap_or_else(|| "limit".into()),
                message: "censored row without a detection limit (supply a limit column or a global threshold)".into(),
            });
        }
        let marker = match marker_col {
            Some(c) if !is_missing(get(c)) => {
                let m = get(c).parse::<usize>().map_err(|e| Error::Parse {
                    row,
                    column: schema.marker.clone().unwrap_or_default(),
                    message: format!("`{}`: {e}", get(c)),
                })?;
                if m == 0 {
                    return Err(Error::Parse {
                        row,
                        column: schema.marker.clone().unwrap_or_default(),
                        message: "marker is 1-based".into(),
                    });
                }
                m
            }
            _ => 1,
        };
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_f64(get(c), row, name))
            .collect::<Result<Vec<_>>>()?;
        observations.push(Observation {
            subject_id,
            time,
            response,
            is_observed,
            threshold,
            marker,
            covariates,
        });
    }
    Dataset::from_observations(observations, schema.covariates.clone())
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        // Shortest representation that parses back to the same f64.
        format!("{x}")
    }
}

/// Writes the dataset with header `id,time,y,obs,limit,marker[,covariates...]`.
pub fn write_long_csv<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "id".to_string(),
        "time".into(),
        "y".into(),
        "obs".into(),
        "limit".into(),
        "marker".into(),
    ];
    header.extend(d.column_names.iter().cloned());
    w.write_record(&header)?;
    for s in &d.subjects {
        for o in &s.observations {
            let mut rec = vec![
                o.subject_id.clone(),
                fmt_num(o.time),
                fmt_num(o.response),
                if o.is_observed { "1".into() } else { "0".into() },
                fmt_num(o.threshold),
                o.marker.to_string(),
            ];
            rec.extend(o.covariates.iter().map(|&c| fmt_num(c)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_long_csv_file(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_long_csv(d, std::io::BufWriter::new(file))
}

/// Schema matching the columns produced by [`write_long_csv`].
pub fn written_schema(d: &Dataset) -> CsvSchema {
    CsvSchema {
        covariates: d.column_names.clone(),
        ..CsvSchema::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(flags: &[bool]) -> SubjectData {
        let obs = flags
            .iter()
            .enumerate()
            .map(|(j, &f)| {
                if f {
                    Observation::observed("s", j as f64, 3.0)
                } else {
                    Observation::censored("s", j as f64, 2.0)
                }
            })
            .collect();
        SubjectData::new("s", obs).unwrap()
    }

    #[test]
    fn partition_read_off() {
        let s = subject(&[true, false, true, false, false]);
        assert_eq!(partition_subject(&s), (vec![0, 2], vec![1, 3, 4]));
        let s = subject(&[true; 4]);
        assert_eq!(partition_subject(&s), (vec![0, 1, 2, 3], vec![]));
        let s = subject(&[false; 3]);
        assert_eq!(partition_subject(&s), (vec![], vec![0, 1, 2]));
    }

    #[test]
    fn five_rows_one_subject_uncensored() {
        let csv = "id,time,y,obs\n1,0,3.1,1\n1,1,3.4,1\n1,2,3.9,1\n1,3,4.1,1\n1,4,4.6,1\n";
        let d = read_long_csv_from(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(d.subjects().len(), 1);
        assert_eq!(d.subjects()[0].n_obs(), 5);
        assert_eq!(d.subjects()[0].n_cens(), 0);
    }

    #[test]
    fn missing_indicator_column_is_schema_error() {
        let csv = "id,time,y\n1,0,3.1\n";
        match read_long_csv_from(csv.as_bytes(), &CsvSchema::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "obs"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let csv = "id,time,y,obs\n1,0,3.1,1\n1,abc,3.4,1\n";
        match read_long_csv_from(csv.as_bytes(), &CsvSchema::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "time");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn censored_rows_use_global_threshold() {
        let schema = CsvSchema {
            global_threshold: Some(2.7),
            ..CsvSchema::default()
        };
        let csv = "id,time,y,obs\nA,0,,0\nA,1,3.0,1\nB,0,2.7,0\n";
        let d = read_long_csv_from(csv.as_bytes(), &schema).unwrap();
        assert_eq!(d.subjects().len(), 2);
        let a = &d.subjects()[0];
        assert_eq!(a.n_cens(), 1);
        assert_eq!(a.observations()[0].threshold, 2.7);
        assert_eq!(a.observations()[0].response, 2.7);
    }

    #[test]
    fn censored_row_without_threshold_is_rejected() {
        let csv = "id,time,y,obs\nA,0,1.0,0\n";
        assert!(read_long_csv_from(csv.as_bytes(), &CsvSchema::default()).is_err());
    }

    #[test]
    fn missing_observed_response_is_dropped() {
        let csv = "id,time,y,obs\nA,0,NA,1\nA,1,3.0,1\n";
        let d = read_long_csv_from(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(d.n_rows(), 1);
    }

    #[test]
    fn interleaved_subjects_are_grouped_in_order() {
        let csv = "id,time,y,obs\nB,0,1,1\nA,0,2,1\nB,1,3,1\n";
        let d = read_long_csv_from(csv.as_bytes(), &CsvSchema::default()).unwrap();
        let ids: Vec<_> = d.subjects().iter().map(|s| s.subject_id()).collect();
        assert_eq!(ids, ["B", "A"]);
        let b: Vec<_> = d.subjects()[0]
            .observations()
            .iter()
            .map(|o| o.response)
            .collect();
        assert_eq!(b, [1.0, 3.0]);
    }

    #[test]
    fn bad_indicator_value() {
        let csv = "id,time,y,obs\nA,0,1,2\n";
        assert!(matches!(
            read_long_csv_from(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn duplicate_subjects_rejected() {
        let s = subject(&[true]);
        assert!(Dataset::new(vec![s.clone(), s], vec![]).is_err());
    }
}
