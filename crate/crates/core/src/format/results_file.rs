//! Localization results as JSON lines, one record per query in input order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::map::KeyframeId;
use crate::pipeline::{LocalizationResult, StageTimings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: u64,
    /// `"localized"` or `"failed"`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_wxyz: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_xyz: Option<[f64; 3]>,
    pub num_inliers: usize,
    pub places_retrieved: usize,
    pub places_evaluated: usize,
    #[serde(default)]
    pub priors: Vec<u64>,
    pub timings_ms: StageTimings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const STATUS_LOCALIZED: &str = "localized";
pub const STATUS_FAILED: &str = "failed";

impl From<&LocalizationResult> for ResultRecord {
    fn from(r: &LocalizationResult) -> Self {
        Self {
            query_id: r.query_id,
            status: if r.pose.is_some() {
                STATUS_LOCALIZED
            } else {
                STATUS_FAILED
            }
            .into(),
            q_wxyz: r.pose.map(|p| p.wxyz()),
            t_xyz: r.pose.map(|p| p.t_xyz()),
            num_inliers: r.num_inliers,
            places_retrieved: r.places_retrieved,
            places_evaluated: r.places_evaluated,
            priors: r.priors.iter().map(|k| k.0).collect(),
            timings_ms: r.timings,
            error: r.error.clone(),
        }
    }
}

impl ResultRecord {
    /// Rebuilds the summary part of a [`LocalizationResult`] (inlier lists and
    /// per-place traces are not persisted).
    pub fn to_result(&self) -> Result<LocalizationResult> {
        let entity = || format!("result for query {}", self.query_id);
        let pose = match (self.status.as_str(), self.q_wxyz, self.t_xyz) {
            (STATUS_LOCALIZED, Some(q), Some(t)) => {
                Some(Pose::from_wxyz(q, t).map_err(|e| Error::schema(entity(), e.to_string()))?)
            }
            (STATUS_FAILED, None, None) => None,
            (status, ..) => {
                return Err(Error::schema(
                    entity(),
                    format!("status {status:?} inconsistent with pose fields"),
                ))
            }
        };
        Ok(LocalizationResult {
            query_id: self.query_id,
            pose,
            inliers: Vec::new(),
            num_inliers: self.num_inliers,
            places_retrieved: self.places_retrieved,
            places_evaluated: self.places_evaluated,
            priors: self.priors.iter().map(|&k| KeyframeId(k)).collect(),
            attempts: Vec::new(),
            timings: self.timings_ms,
            error: self.error.clone(),
        })
    }
}

pub fn write_results(path: &Path, results: &[LocalizationResult]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        serde_json::to_writer(&mut w, &ResultRecord::from(r))
            .map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<LocalizationResult>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResultRecord = serde_json::from_str(&line)
            .map_err(|e| Error::schema(format!("{} line {}", path.display(), i + 1), e.to_string()))?;
        out.push(rec.to_result()?);
    }
    Ok(out)
}
