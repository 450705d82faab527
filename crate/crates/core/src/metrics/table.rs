use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::PrCurve;
use crate::error::{Error, Result};

/// Pose columns, in file order.
pub const POSE_COLUMNS: [&str; 3] = ["roll", "pitch", "yaw"];

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    /// One score in [0, 1] per table attribute.
    pub scores: Vec<f64>,
    /// Roll, pitch, yaw in degrees.
    pub pose: [f64; 3],
}

/// Predictor outputs for a set of samples, one row per sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionTable {
    pub attributes: Vec<String>,
    pub rows: Vec<PredictionRow>,
    index: HashMap<String, usize>,
}

impl PredictionTable {
    pub fn new(attributes: Vec<String>) -> Self {
        Self {
            attributes,
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, row: PredictionRow) -> Result<()> {
        if row.scores.len() != self.attributes.len() {
            return Err(Error::dim(format!(
                "row `{}` has {} scores for {} attributes",
                row.id,
                row.scores.len(),
                self.attributes.len()
            )));
        }
        if let Some(s) = row.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Invariant(format!("row `{}` has score {s} outside [0, 1]", row.id)));
        }
        if row.pose.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("row `{}` has a non-finite pose", row.id)));
        }
        if self.index.contains_key(&row.id) {
            return Err(Error::Invariant(format!("duplicate id `{}`", row.id)));
        }
        self.index.insert(row.id.clone(), self.rows.len());
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PredictionRow> {
        self.index.get(id).map(|&i| &self.rows[i])
    }

    pub fn column(&self, attribute: &str) -> Option<Vec<f64>> {
        let a = self.attributes.iter().position(|x| x == attribute)?;
        Some(self.rows.iter().map(|r| r.scores[a]).collect())
    }

    /// Header `id,<attributes...>,roll,pitch,yaw`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend(self.attributes.iter().cloned());
        header.extend(POSE_COLUMNS.iter().map(|s| s.to_string()));
        out.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone()];
            rec.extend(r.scores.iter().chain(&r.pose).map(|v| v.to_string()));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let header: Vec<String> = input.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let n = header.len();
        if n < 4 || header[0] != "id" || header[n - 3..] != POSE_COLUMNS {
            return Err(Error::Format(format!(
                "prediction header must be id,<attributes>,roll,pitch,yaw; got {header:?}"
            )));
        }
        let mut table = Self::new(header[1..n - 3].to_vec());
        for (line, rec) in input.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let mut vals = Vec::with_capacity(n - 1);
            for f in rec.iter().skip(1) {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad number `{f}`", line + 1)))?;
                vals.push(v);
            }
            let pose = [vals[n - 4], vals[n - 3], vals[n - 2]];
            vals.truncate(n - 4);
            table.push(PredictionRow {
                id: rec[0].to_string(),
                scores: vals,
                pose,
            })?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Classifier scores for one attribute under one manipulation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub manipulation: String,
    pub attribute: String,
    pub scores: Vec<f64>,
    pub truths: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveEntry {
    pub manipulation: String,
    pub attribute: String,
    /// `None` when the table has no positives.
    pub curve: Option<PrCurve>,
}

/// Long format `manipulation,attribute,threshold,precision,recall`; an
/// absent curve is one row of `NA`.
pub fn write_curves<W: Write>(entries: &[CurveEntry], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["manipulation", "attribute", "threshold", "precision", "recall"])
        .map_err(csv_err)?;
    for e in entries {
        match &e.curve {
            None => out
                .write_record([e.manipulation.as_str(), e.attribute.as_str(), "NA", "NA", "NA"])
                .map_err(csv_err)?,
            Some(c) => {
                for k in 0..c.thresholds.len() {
                    out.write_record([
                        e.manipulation.clone(),
                        e.attribute.clone(),
                        c.thresholds[k].to_string(),
                        c.precision[k].to_string(),
                        c.recall[k].to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}
