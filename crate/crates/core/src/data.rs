//! Response and covariate curves per subject, plus the long-format CSV
//! layout used on disk.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::basis::Domain;
use crate::error::{FlcmError, Result};
use crate::fpca::{FunctionalObservations, SubjectCurve};

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub response: SubjectCurve,
    /// One curve per covariate, in the dataset's covariate order.
    pub covariates: Vec<SubjectCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    pub domain: Domain,
    pub response_name: String,
    pub covariate_names: Vec<String>,
    pub subjects: Vec<SubjectData>,
}

/// One row of the long CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub subject_id: String,
    pub time: f64,
    pub series: String,
    pub value: f64,
}

/// What the ingester expects to find in a long CSV.
#[derive(Debug, Clone, Default)]
pub struct Schema {
    pub response: String,
    /// When set, any other series name is rejected. Otherwise every
    /// non-response series becomes a covariate, in order of first appearance.
    pub covariates: Option<Vec<String>>,
    /// Defaults to the range of observed times.
    pub domain: Option<Domain>,
}

impl FunctionalDataset {
    pub fn new(
        domain: Domain,
        response_name: impl Into<String>,
        covariate_names: Vec<String>,
        subjects: Vec<SubjectData>,
    ) -> Result<Self> {
        let response_name = response_name.into();
        if subjects.is_empty() {
            return Err(FlcmError::Data("dataset has no subjects".into()));
        }
        let p = covariate_names.len();
        for s in &subjects {
            if s.covariates.len() != p {
                return Err(FlcmError::Data(format!(
                    "subject {} has {} covariates, expected {p}",
                    s.id,
                    s.covariates.len()
                )));
            }
            if s.response.is_empty() {
                return Err(FlcmError::Data(format!("subject {} has no response observations", s.id)));
            }
            for (name, c) in std::iter::once((&response_name, &s.response)).chain(covariate_names.iter().zip(&s.covariates)) {
                if let Some(t) = c.times.iter().find(|t| !domain.contains(**t)) {
                    return Err(FlcmError::Data(format!(
                        "subject {}: {name} observed at {t}, outside [{}, {}]",
                        s.id, domain.lower, domain.upper
                    )));
                }
                if c.times.windows(2).any(|w| w[0] == w[1]) {
                    return Err(FlcmError::Data(format!("subject {}: repeated time in {name}", s.id)));
                }
            }
        }
        Ok(FunctionalDataset {
            domain,
            response_name,
            covariate_names,
            subjects,
        })
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn num_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.response.len()).sum()
    }

    pub fn response_observations(&self) -> Result<FunctionalObservations> {
        FunctionalObservations::new(self.domain, self.subjects.iter().map(|s| s.response.clone()).collect())
    }

    pub fn covariate_observations(&self, j: usize) -> Result<FunctionalObservations> {
        FunctionalObservations::new(self.domain, self.subjects.iter().map(|s| s.covariates[j].clone()).collect())
    }

    /// True when every covariate is observed exactly at its subject's response times.
    pub fn is_aligned(&self) -> bool {
        self.subjects
            .iter()
            .all(|s| s.covariates.iter().all(|c| c.times == s.response.times))
    }

    /// The response grid when all subjects share one.
    pub fn common_response_grid(&self) -> Option<&[f64]> {
        let first = &self.subjects[0].response.times;
        self.subjects
            .iter()
            .all(|s| &s.response.times == first)
            .then_some(first.as_slice())
    }

    /// Subjects drawn by index (repeats allowed). Ids of repeated subjects get
    /// a `#k` suffix so they stay distinct.
    pub fn resample(&self, indices: &[usize]) -> Result<Self> {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut subjects = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .subjects
                .get(i)
                .ok_or_else(|| FlcmError::Data(format!("subject index {i} out of range")))?;
            let k = seen.entry(i).or_insert(0);
            let mut copy = s.clone();
            if *k > 0 {
                copy.id = format!("{}#{}", s.id, k);
            }
            *k += 1;
            subjects.push(copy);
        }
        FunctionalDataset::new(self.domain, self.response_name.clone(), self.covariate_names.clone(), subjects)
    }

    /// Adds covariates (named `names`) whose curves are given per subject.
    pub fn with_extra_covariates(&self, names: Vec<String>, curves: Vec<Vec<SubjectCurve>>) -> Result<Self> {
        if curves.len() != self.n() {
            return Err(FlcmError::Data("extra covariates must cover every subject".into()));
        }
        let mut out = self.clone();
        out.covariate_names.extend(names);
        for (s, extra) in out.subjects.iter_mut().zip(curves) {
            s.covariates.extend(extra);
        }
        FunctionalDataset::new(out.domain, out.response_name, out.covariate_names, out.subjects)
    }

    /// Adds `Z_j(t - l*dt)` for every covariate and lag `l = 1..=window`.
    ///
    /// Needs a shared, regular grid with aligned covariates; the response and
    /// the original covariates are truncated to the points where every lag exists.
    pub fn lag_augment(&self, window: usize) -> Result<Self> {
        if window == 0 {
            return Ok(self.clone());
        }
        let grid = self
            .common_response_grid()
            .ok_or_else(|| FlcmError::Data("lag augmentation needs a grid shared by all subjects".into()))?;
        if !self.is_aligned() {
            return Err(FlcmError::Data("lag augmentation needs covariates on the response grid".into()));
        }
        let m = grid.len();
        if window >= m {
            return Err(FlcmError::Config(format!("lag window {window} must be below the grid size {m}")));
        }
        if m >= 3 {
            let dt = grid[1] - grid[0];
            if grid.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0)) {
                return Err(FlcmError::Data("lag augmentation needs a regular grid".into()));
            }
        }
        let times = grid[window..].to_vec();
        let mut names = self.covariate_names.clone();
        for name in &self.covariate_names {
            for l in 1..=window {
                names.push(format!("{name}_lag{l}"));
            }
        }
        let mut subjects = Vec::with_capacity(self.n());
        for s in &self.subjects {
            let cut = |v: &[f64], lag: usize| v[window - lag..m - lag].to_vec();
            let mut covs: Vec<SubjectCurve> = s
                .covariates
                .iter()
                .map(|c| SubjectCurve::new(times.clone(), cut(&c.values, 0)))
                .collect::<Result<_>>()?;
            for c in &s.covariates {
                for l in 1..=window {
                    covs.push(SubjectCurve::new(times.clone(), cut(&c.values, l))?);
                }
            }
            subjects.push(SubjectData {
                id: s.id.clone(),
                response: SubjectCurve::new(times.clone(), cut(&s.response.values, 0))?,
                covariates: covs,
            });
        }
        let domain = Domain::new(times[0], self.domain.upper)?;
        FunctionalDataset::new(domain, self.response_name.clone(), names, subjects)
    }

    pub fn to_records(&self) -> Vec<LongRecord> {
        let mut out = Vec::with_capacity(self.num_observations() * (1 + self.p()));
        for s in &self.subjects {
            let series = std::iter::once((&self.response_name, &s.response)).chain(self.covariate_names.iter().zip(&s.covariates));
            for (name, curve) in series {
                for (t, v) in curve.times.iter().zip(&curve.values) {
                    out.push(LongRecord {
                        subject_id: s.id.clone(),
                        time: *t,
                        series: name.clone(),
                        value: *v,
                    });
                }
            }
        }
        out
    }

    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in self.to_records() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_long_csv<R: Read>(reader: R, schema: &Schema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["subject_id", "time", "series", "value"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(FlcmError::Data(format!(
                "header must be {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for (k, row) in rdr.deserialize::<LongRecord>().enumerate() {
            // header is line 1
            let line = k + 2;
            let rec = row.map_err(|e| FlcmError::Data(format!("line {line}: {e}")))?;
            if !rec.time.is_finite() || !rec.value.is_finite() {
                return Err(FlcmError::Data(format!("line {line}: time and value must be finite")));
            }
            records.push((line, rec));
        }
        Self::from_records(records, schema)
    }

    /// Builds a dataset from `(line number, record)` pairs.
    pub fn from_records(records: Vec<(usize, LongRecord)>, schema: &Schema) -> Result<Self> {
        let mut covariates: Vec<String> = schema.covariates.clone().unwrap_or_default();
        let fixed = schema.covariates.is_some();
        let mut seen: HashMap<(String, u64, String), usize> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        // subject -> series slot -> (time, value)
        let mut by_subject: HashMap<String, Vec<Vec<(f64, f64)>>> = HashMap::new();
        let mut saw_response = false;
        for (line, r) in &records {
            let key = (r.subject_id.clone(), r.time.to_bits(), r.series.clone());
            if let Some(first) = seen.insert(key, *line) {
                return Err(FlcmError::Data(format!(
                    "duplicate observation (subject {}, time {}, series {}) on lines {first} and {line}",
                    r.subject_id, r.time, r.series
                )));
            }
            let slot = if r.series == schema.response {
                saw_response = true;
                0
            } else if let Some(j) = covariates.iter().position(|c| *c == r.series) {
                j + 1
            } else if fixed {
                let mut known = vec![schema.response.clone()];
                known.extend(covariates.iter().cloned());
                return Err(FlcmError::Data(format!(
                    "line {line}: unknown series '{}'; known series are {}",
                    r.series,
                    known.join(", ")
                )));
            } else {
                covariates.push(r.series.clone());
                covariates.len()
            };
            let entry = by_subject.entry(r.subject_id.clone()).or_insert_with(|| {
                order.push(r.subject_id.clone());
                Vec::new()
            });
            if entry.len() <= slot {
                entry.resize(slot + 1, Vec::new());
            }
            entry[slot].push((r.time, r.value));
        }
        if !saw_response {
            return Err(FlcmError::Data(format!("response series '{}' not found", schema.response)));
        }
        let domain = match schema.domain {
            Some(d) => d,
            None => {
                let (lo, hi) = records
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, r)| (lo.min(r.time), hi.max(r.time)));
                Domain::new(lo, hi)?
            }
        };
        let names: Vec<&String> = std::iter::once(&schema.response).chain(covariates.iter()).collect();
        let mut subjects = Vec::with_capacity(order.len());
        for id in order {
            let mut slots = by_subject.remove(&id).unwrap_or_default();
            slots.resize(covariates.len() + 1, Vec::new());
            let mut curves = Vec::with_capacity(slots.len());
            for (slot, mut obs) in slots.into_iter().enumerate() {
                if obs.is_empty() {
                    return Err(FlcmError::Data(format!("subject {id} has no observations of {}", names[slot])));
                }
                obs.sort_by(|a, b| a.0.total_cmp(&b.0));
                let (t, v) = obs.into_iter().unzip();
                curves.push(SubjectCurve::new(t, v)?);
            }
            let response = curves.remove(0);
            subjects.push(SubjectData {
                id,
                response,
                covariates: curves,
            });
        }
        FunctionalDataset::new(domain, schema.response.clone(), covariates, subjects)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "subject_id,time,series,value
a,0,y,1.5
a,0.5,y,2
a,1,y,2.5
a,0,z1,0.1
a,0.5,z1,0.2
a,1,z1,0.3
a,0,z2,1
a,0.5,z2,1
a,1,z2,1
b,0,y,-1
b,0.5,y,0
b,1,y,1
b,0,z1,0.4
b,0.5,z1,0.5
b,1,z1,0.6
b,0,z2,2
b,0.5,z2,2
b,1,z2,2
";

    fn schema() -> Schema {
        Schema {
            response: "y".into(),
            ..Default::default()
        }
    }

    #[test]
    fn well_formed_file() {
        let d = FunctionalDataset::read_long_csv(SMALL.as_bytes(), &schema()).unwrap();
        assert_eq!((d.n(), d.p()), (2, 2));
        assert_eq!(d.covariate_names, vec!["z1", "z2"]);
        assert!(d.is_aligned());
        assert_eq!(d.common_response_grid(), Some(&[0.0, 0.5, 1.0][..]));
        assert_eq!(d.subjects[1].covariates[0].values, vec![0.4, 0.5, 0.6]);
    }

    #[test]
    fn duplicate_row_is_named() {
        let text = format!("{SMALL}b,0.5,z1,9\n");
        let err = FunctionalDataset::read_long_csv(text.as_bytes(), &schema()).unwrap_err().to_string();
        assert!(err.contains("subject b, time 0.5, series z1"), "{err}");
        assert!(err.contains("lines 15 and 20"), "{err}");
    }

    #[test]
    fn unknown_series_lists_known_names() {
        let s = Schema {
            response: "y".into(),
            covariates: Some(vec!["z1".into()]),
            domain: None,
        };
        let err = FunctionalDataset::read_long_csv(SMALL.as_bytes(), &s).unwrap_err().to_string();
        assert!(err.contains("unknown series 'z2'") && err.contains("y, z1"), "{err}");
    }

    #[test]
    fn non_numeric_value_is_rejected() {
        let text = SMALL.replace("a,0.5,y,2", "a,0.5,y,two");
        let err = FunctionalDataset::read_long_csv(text.as_bytes(), &schema()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn covariate_off_the_response_grid_is_accepted() {
        let text = format!("{SMALL}a,0.25,z1,0.15\n");
        let d = FunctionalDataset::read_long_csv(text.as_bytes(), &schema()).unwrap();
        assert!(!d.is_aligned());
        assert_eq!(d.subjects[0].covariates[0].times, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut d = FunctionalDataset::read_long_csv(SMALL.as_bytes(), &schema()).unwrap();
        d.subjects[0].response.values[1] = 0.1 + 0.2;
        d.subjects[1].covariates[1].values[2] = std::f64::consts::PI * 1e-17;
        let mut buf = Vec::new();
        d.write_long_csv(&mut buf).unwrap();
        let s = Schema {
            response: "y".into(),
            covariates: None,
            domain: Some(d.domain),
        };
        let back = FunctionalDataset::read_long_csv(buf.as_slice(), &s).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn lag_window_zero_is_identity() {
        let d = FunctionalDataset::read_long_csv(SMALL.as_bytes(), &schema()).unwrap();
        assert_eq!(d.lag_augment(0).unwrap(), d);
    }

    #[test]
    fn lagged_copy_equals_shifted_original() {
        let d = FunctionalDataset::read_long_csv(SMALL.as_bytes(), &schema()).unwrap();
        let l = d.lag_augment(1).unwrap();
        assert_eq!(l.p(), 4);
        assert_eq!(l.covariate_names[2], "z1_lag1");
        let s = &l.subjects[1];
        assert_eq!(s.response.times, vec![0.5, 1.0]);
        assert_eq!(s.covariates[0].values, vec![0.5, 0.6]);
        assert_eq!(s.covariates[2].values, vec![0.4, 0.5]);
        assert!(d.lag_augment(3).is_err());
    }

    #[test]
    fn lag_count_arithmetic() {
        let times: Vec<f64> = (0..81).map(|i| i as f64 * 1.25).collect();
        let curve = SubjectCurve::new(times.clone(), times.clone()).unwrap();
        let names: Vec<String> = (1..=20).map(|j| format!("z{j}")).collect();
        let subj = SubjectData {
            id: "s".into(),
            response: curve.clone(),
            covariates: vec![curve; 20],
        };
        let d = FunctionalDataset::new(Domain::new(0.0, 100.0).unwrap(), "y", names, vec![subj]).unwrap();
        let l = d.lag_augment(1).unwrap();
        assert_eq!(l.p(), 40);
        assert_eq!(l.subjects[0].response.len(), 80);
    }

    #[test]
    fn resampled_ids_stay_unique() {
        let d = FunctionalDataset::read_long_csv(SMALL.as_bytes(), &schema()).unwrap();
        let r = d.resample(&[1, 1, 0]).unwrap();
        let ids: Vec<&str> = r.subjects.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["b", "b#1", "a"]);
    }
}
