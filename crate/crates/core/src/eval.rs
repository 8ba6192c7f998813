//! Retrieval and localization metrics, and their CSV exports.
//!
//! Conventions:
//! - recall counts localized queries within the position threshold over
//!   *all* queries;
//! - precision uses the same numerator over the *localized* queries;
//! - the median error is taken over localized queries;
//! - means of places and inliers are over all queries (failed queries
//!   contribute 0 inliers);
//! - the cumulative error curve is over all queries, so failed queries cap it
//!   below 1.
//!
//! Orientation is ignored by the localization metrics. Undefined values
//! (no localized query) are `None` and written as `undefined`.
//!
//! Every CSV starts with a `# hloc-eval schema v1` comment line followed by
//! a header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{pose_error, Pose};
use crate::global_index::GlobalIndex;
use crate::map::VisualMap;
use crate::matching::QueryFrame;
use crate::pipeline::LocalizationResult;

pub const DEFAULT_POSITION_THRESHOLD_M: f64 = 0.1;
pub const DEFAULT_GT_MATCH_DISTANCE_M: f64 = 5.0;
pub const DEFAULT_GT_MATCH_ANGLE_DEG: f64 = 90.0;
pub const DEFAULT_RETRIEVAL_N_VALUES: [usize; 6] = [1, 2, 5, 10, 20, 50];

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub position_threshold_m: f64,
    pub gt_match_distance_m: f64,
    pub gt_match_angle_deg: f64,
    pub retrieval_n_values: Vec<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            position_threshold_m: DEFAULT_POSITION_THRESHOLD_M,
            gt_match_distance_m: DEFAULT_GT_MATCH_DISTANCE_M,
            gt_match_angle_deg: DEFAULT_GT_MATCH_ANGLE_DEG,
            retrieval_n_values: DEFAULT_RETRIEVAL_N_VALUES.to_vec(),
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("position_threshold_m", self.position_threshold_m),
            ("gt_match_distance_m", self.gt_match_distance_m),
            ("gt_match_angle_deg", self.gt_match_angle_deg),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(name, format!("{v} must be > 0")));
            }
        }
        if self.retrieval_n_values.contains(&0) {
            return Err(Error::invalid("retrieval_n_values", "values must be at least 1"));
        }
        Ok(())
    }

    /// Whether a keyframe pose is a ground-truth global match for a query.
    pub fn is_gt_match(&self, keyframe: &Pose, query: &Pose) -> bool {
        let e = pose_error(keyframe, query);
        e.position_m < self.gt_match_distance_m && e.angle_deg < self.gt_match_angle_deg
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub num_queries: usize,
    pub num_localized: usize,
    pub recall_at_threshold: f64,
    pub precision_at_threshold: Option<f64>,
    pub median_error_m: Option<f64>,
    pub mean_places_retrieved: f64,
    pub mean_places_evaluated: f64,
    pub mean_inliers: f64,
    pub retrieval_recall_at_n: Vec<(usize, f64)>,
    /// `(error, fraction of all queries localized within error)`, one point
    /// per distinct error, ascending.
    pub cumulative_error_curve: Vec<(f64, f64)>,
    pub position_threshold_m: f64,
}

impl EvalReport {
    /// Fraction of all queries localized within `error` meters.
    pub fn cumulative_fraction_at(&self, error: f64) -> f64 {
        let i = self.cumulative_error_curve.partition_point(|&(e, _)| e <= error);
        if i == 0 {
            0.0
        } else {
            self.cumulative_error_curve[i - 1].1
        }
    }

    /// The three localization rows as a fixed-width text table.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or(UNDEFINED.to_string(), |v| format!("{:.1}", 100.0 * v));
        let t = self.position_threshold_m;
        let rows = [
            (format!("Recall@{t}m (%)"), pct(Some(self.recall_at_threshold))),
            (format!("Precision@{t}m (%)"), pct(self.precision_at_threshold)),
            (
                "Median error (m)".to_string(),
                self.median_error_m.map_or(UNDEFINED.to_string(), |m| format!("{m:.3}")),
            ),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            out.push_str(&format!("{name:<22}{value:>10}\n"));
        }
        out
    }
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

/// Localization metrics of `results` against index-aligned ground truth.
pub fn localization_metrics(
    results: &[LocalizationResult],
    ground_truth: &[Pose],
    params: &EvalParams,
) -> Result<EvalReport> {
    params.validate()?;
    if results.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if results.len() != ground_truth.len() {
        return Err(Error::DimensionMismatch {
            context: "results vs ground-truth poses".into(),
            expected: ground_truth.len(),
            actual: results.len(),
        });
    }
    let total = results.len() as f64;
    let mut errors: Vec<f64> = results
        .iter()
        .zip(ground_truth)
        .filter_map(|(r, gt)| r.pose.map(|p| pose_error(&p, gt).position_m))
        .collect();
    errors.sort_by(f64::total_cmp);
    let localized = errors.len();
    let within = errors.partition_point(|&e| e <= params.position_threshold_m);

    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (i, &e) in errors.iter().enumerate() {
        let fraction = (i + 1) as f64 / total;
        match curve.last_mut() {
            Some(last) if last.0 == e => last.1 = fraction,
            _ => curve.push((e, fraction)),
        }
    }

    let mean = |f: &dyn Fn(&LocalizationResult) -> usize| results.iter().map(|r| f(r) as f64).sum::<f64>() / total;
    Ok(EvalReport {
        num_queries: results.len(),
        num_localized: localized,
        recall_at_threshold: within as f64 / total,
        precision_at_threshold: (localized > 0).then(|| within as f64 / localized as f64),
        median_error_m: median(&errors),
        mean_places_retrieved: mean(&|r| r.places_retrieved),
        mean_places_evaluated: mean(&|r| r.places_evaluated),
        mean_inliers: mean(&|r| if r.pose.is_some() { r.num_inliers } else { 0 }),
        retrieval_recall_at_n: Vec::new(),
        cumulative_error_curve: curve,
        position_threshold_m: params.position_threshold_m,
    })
}

/// Fraction of queries whose top-`n` priors contain a ground-truth match,
/// for every `n` in `params.retrieval_n_values`. Queries without any
/// ground-truth match in the map are left out.
pub fn retrieval_recall(
    index: &GlobalIndex,
    map: &VisualMap,
    queries: &[QueryFrame],
    params: &EvalParams,
) -> Result<Vec<(usize, f64)>> {
    params.validate()?;
    let max_n = params.retrieval_n_values.iter().copied().max().unwrap_or(1);
    let mut hits = vec![0usize; params.retrieval_n_values.len()];
    let mut counted = 0usize;
    for q in queries {
        let gt = q.ground_truth.ok_or_else(|| {
            Error::schema(format!("query {}", q.id), "ground-truth pose required for retrieval recall")
        })?;
        if !map.keyframes().iter().any(|kf| params.is_gt_match(&kf.pose, &gt)) {
            continue;
        }
        counted += 1;
        let priors = match index.retrieve_priors(&q.global_descriptor, max_n) {
            Ok(p) => p,
            Err(Error::DegenerateProjection { .. }) => continue,
            Err(e) => return Err(e),
        };
        let first_match = priors.iter().position(|id| {
            map.keyframe(*id)
                .is_some_and(|kf| params.is_gt_match(&kf.pose, &gt))
        });
        if let Some(rank) = first_match {
            for (h, &n) in hits.iter_mut().zip(&params.retrieval_n_values) {
                if rank < n {
                    *h += 1;
                }
            }
        }
    }
    if counted == 0 {
        return Err(Error::EmptyQuerySet);
    }
    Ok(params
        .retrieval_n_values
        .iter()
        .zip(hits)
        .map(|(&n, h)| (n, h as f64 / counted as f64))
        .collect())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# hloc-eval schema v{CSV_SCHEMA_VERSION}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(w))
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: &[[String; N]]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let to_io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(row).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(UNDEFINED.to_string(), |v| v.to_string())
}

/// Writes `metrics.csv`, `stats.csv`, `recall_at_n.csv`,
/// `cumulative_errors.csv` and `timings.csv` into `dir`.
pub fn write_csvs(dir: &Path, report: &EvalReport, results: &[LocalizationResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = report.position_threshold_m;
    write_rows(
        &dir.join("metrics.csv"),
        ["metric", "value"],
        &[
            [format!("Recall@{t}m"), report.recall_at_threshold.to_string()],
            [format!("Precision@{t}m"), opt(report.precision_at_threshold)],
            ["Median error (m)".into(), opt(report.median_error_m)],
        ],
    )?;
    write_rows(
        &dir.join("stats.csv"),
        ["statistic", "value"],
        &[
            ["num_queries".into(), report.num_queries.to_string()],
            ["num_localized".into(), report.num_localized.to_string()],
            ["mean_places_retrieved".into(), report.mean_places_retrieved.to_string()],
            ["mean_places_evaluated".into(), report.mean_places_evaluated.to_string()],
            ["mean_inliers".into(), report.mean_inliers.to_string()],
        ],
    )?;
    let recall_rows: Vec<[String; 2]> = report
        .retrieval_recall_at_n
        .iter()
        .map(|(n, r)| [n.to_string(), r.to_string()])
        .collect();
    write_rows(&dir.join("recall_at_n.csv"), ["n", "recall"], &recall_rows)?;
    let curve_rows: Vec<[String; 2]> = report
        .cumulative_error_curve
        .iter()
        .map(|(e, f)| [e.to_string(), f.to_string()])
        .collect();
    write_rows(&dir.join("cumulative_errors.csv"), ["error_m", "fraction"], &curve_rows)?;
    let timing_rows: Vec<[String; 7]> = results
        .iter()
        .map(|r| {
            let t = &r.timings;
            [
                r.query_id.to_string(),
                if r.pose.is_some() { "localized" } else { "failed" }.to_string(),
                t.global_search_ms.to_string(),
                t.clustering_ms.to_string(),
                t.matching_ms.to_string(),
                t.pnp_ransac_ms.to_string(),
                t.total_ms.to_string(),
            ]
        })
        .collect();
    write_rows(
        &dir.join("timings.csv"),
        [
            "query_id",
            "status",
            "global_search_ms",
            "clustering_ms",
            "matching_ms",
            "pnp_ransac_ms",
            "total_ms",
        ],
        &timing_rows,
    )
}
