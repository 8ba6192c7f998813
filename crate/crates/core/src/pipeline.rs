//! End-to-end localization of query frames.
//!
//! Hierarchical mode retrieves `N` prior frames, clusters them into places
//! and tries the places in rank order; the first place whose matches yield a
//! valid pose wins and later places are never matched. Direct mode matches
//! against every landmark of the map and runs a single RANSAC.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covisibility::cluster_priors;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::global_index::{GlobalIndex, DEFAULT_NUM_PRIORS};
use crate::map::{KeyframeId, VisualMap};
use crate::matching::{LandmarkMatcher, Match2D3D, MatchParams, QueryFrame};
use crate::pnp::{ransac_pnp, RansacOutcome, RansacParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Hierarchical,
    Direct,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Hierarchical => "hierarchical",
            Mode::Direct => "direct",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Mode::Hierarchical),
            "direct" => Ok(Mode::Direct),
            other => Err(Error::invalid("mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    pub num_priors: usize,
    pub matching: MatchParams,
    pub ransac: RansacParams,
    pub mode: Mode,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            num_priors: DEFAULT_NUM_PRIORS,
            matching: MatchParams::default(),
            ransac: RansacParams::default(),
            mode: Mode::default(),
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_priors < 1 {
            return Err(Error::invalid("num_priors", "must be at least 1"));
        }
        self.matching.validate()?;
        self.ransac.validate()
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub global_search_ms: f64,
    pub clustering_ms: f64,
    pub matching_ms: f64,
    pub pnp_ransac_ms: f64,
    pub total_ms: f64,
}

/// Trace of one place (or of the whole map in direct mode).
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceAttempt {
    pub rank: usize,
    pub num_keyframes: usize,
    pub num_landmarks: usize,
    pub num_matches: usize,
    /// Inliers of the pose if one was accepted, else the best count seen.
    pub num_inliers: usize,
    pub localized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub query_id: u64,
    /// `None` when the query failed.
    pub pose: Option<Pose>,
    pub inliers: Vec<Match2D3D>,
    pub num_inliers: usize,
    pub places_retrieved: usize,
    pub places_evaluated: usize,
    pub priors: Vec<KeyframeId>,
    pub attempts: Vec<PlaceAttempt>,
    pub timings: StageTimings,
    /// Set when the query could not be processed (e.g. wrong dimensions).
    pub error: Option<String>,
}

impl LocalizationResult {
    fn failed(query_id: u64) -> Self {
        Self {
            query_id,
            pose: None,
            inliers: Vec::new(),
            num_inliers: 0,
            places_retrieved: 0,
            places_evaluated: 0,
            priors: Vec::new(),
            attempts: Vec::new(),
            timings: StageTimings::default(),
            error: None,
        }
    }

    pub fn is_localized(&self) -> bool {
        self.pose.is_some()
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Per-query RANSAC seed, independent of batch order and thread count.
fn query_seed(base: u64, query_id: u64) -> u64 {
    base ^ query_id.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Read-only localizer over a map and its global index. Safe to share
/// across threads.
#[derive(Debug)]
pub struct Localizer<'a> {
    map: &'a VisualMap,
    index: &'a GlobalIndex,
    whole_map: OnceLock<LandmarkMatcher>,
}

impl<'a> Localizer<'a> {
    pub fn new(map: &'a VisualMap, index: &'a GlobalIndex) -> Result<Self> {
        if index.len() != map.num_keyframes() || index.projector().input_dim() != map.global_dim() {
            return Err(Error::invalid(
                "index",
                format!(
                    "index of {} keyframes (input dim {}) does not fit a map of {} keyframes (dim {})",
                    index.len(),
                    index.projector().input_dim(),
                    map.num_keyframes(),
                    map.global_dim()
                ),
            ));
        }
        Ok(Self {
            map,
            index,
            whole_map: OnceLock::new(),
        })
    }

    pub fn map(&self) -> &VisualMap {
        self.map
    }

    /// Matcher over all map landmarks, built on first use.
    fn whole_map_matcher(&self) -> Result<&LandmarkMatcher> {
        if let Some(m) = self.whole_map.get() {
            return Ok(m);
        }
        let built = LandmarkMatcher::whole_map(self.map)?;
        Ok(self.whole_map.get_or_init(|| built))
    }

    /// Localizes one query. Errors are reserved for invalid parameters or
    /// inputs; an unsuccessful search is a failed result.
    pub fn localize(&self, query: &QueryFrame, params: &PipelineParams) -> Result<LocalizationResult> {
        params.validate()?;
        query.validate(self.map.global_dim(), self.map.local_dim())?;
        let start = Instant::now();
        let mut result = match params.mode {
            Mode::Hierarchical => self.localize_hierarchical(query, params)?,
            Mode::Direct => self.localize_direct(query, params)?,
        };
        result.timings.total_ms = ms_since(start);
        Ok(result)
    }

    fn localize_hierarchical(&self, query: &QueryFrame, params: &PipelineParams) -> Result<LocalizationResult> {
        let mut result = LocalizationResult::failed(query.id);
        let mut ransac = params.ransac;
        ransac.rng_seed = query_seed(ransac.rng_seed, query.id);

        let t = Instant::now();
        let priors = match self.index.retrieve_priors(&query.global_descriptor, params.num_priors) {
            Ok(p) => p,
            Err(Error::DegenerateProjection { .. }) => Vec::new(),
            Err(e) => return Err(e),
        };
        result.timings.global_search_ms = ms_since(t);
        if priors.is_empty() {
            return Ok(result);
        }

        let t = Instant::now();
        let places = cluster_priors(self.map, &priors)?;
        result.timings.clustering_ms = ms_since(t);
        result.priors = priors;
        result.places_retrieved = places.len();

        for place in &places {
            let t = Instant::now();
            let matches = LandmarkMatcher::new(self.map, &place.landmark_ids)?.match_query(query, &params.matching)?;
            result.timings.matching_ms += ms_since(t);

            let t = Instant::now();
            let outcome = ransac_pnp(&matches, self.map, query, &ransac)?;
            result.timings.pnp_ransac_ms += ms_since(t);

            result.places_evaluated = place.rank + 1;
            let mut attempt = PlaceAttempt {
                rank: place.rank,
                num_keyframes: place.keyframe_ids.len(),
                num_landmarks: place.landmark_ids.len(),
                num_matches: matches.len(),
                num_inliers: 0,
                localized: false,
            };
            match outcome {
                RansacOutcome::Pose(est) => {
                    attempt.num_inliers = est.inlier_matches.len();
                    attempt.localized = true;
                    result.attempts.push(attempt);
                    result.pose = Some(est.pose);
                    result.num_inliers = est.inlier_matches.len();
                    result.inliers = est.inlier_matches;
                    return Ok(result);
                }
                RansacOutcome::NoPose { best_inliers, .. } => {
                    attempt.num_inliers = best_inliers;
                    result.attempts.push(attempt);
                }
            }
        }
        Ok(result)
    }

    fn localize_direct(&self, query: &QueryFrame, params: &PipelineParams) -> Result<LocalizationResult> {
        let mut result = LocalizationResult::failed(query.id);
        let mut ransac = params.ransac;
        ransac.rng_seed = query_seed(ransac.rng_seed, query.id);
        result.places_retrieved = 1;
        result.places_evaluated = 1;

        let matcher = self.whole_map_matcher()?;
        let t = Instant::now();
        let matches = matcher.match_query(query, &params.matching)?;
        result.timings.matching_ms = ms_since(t);

        let t = Instant::now();
        let outcome = ransac_pnp(&matches, self.map, query, &ransac)?;
        result.timings.pnp_ransac_ms = ms_since(t);

        let mut attempt = PlaceAttempt {
            rank: 0,
            num_keyframes: self.map.num_keyframes(),
            num_landmarks: matcher.num_landmarks(),
            num_matches: matches.len(),
            num_inliers: 0,
            localized: false,
        };
        match outcome {
            RansacOutcome::Pose(est) => {
                attempt.num_inliers = est.inlier_matches.len();
                attempt.localized = true;
                result.pose = Some(est.pose);
                result.num_inliers = est.inlier_matches.len();
                result.inliers = est.inlier_matches;
            }
            RansacOutcome::NoPose { best_inliers, .. } => attempt.num_inliers = best_inliers,
        }
        result.attempts.push(attempt);
        Ok(result)
    }

    /// Localizes queries in parallel; results keep the input order. A query
    /// that cannot be processed yields a failed result carrying the error.
    pub fn localize_batch(&self, queries: &[QueryFrame], params: &PipelineParams) -> Result<Vec<LocalizationResult>> {
        params.validate()?;
        if params.mode == Mode::Direct {
            self.whole_map_matcher()?;
        }
        Ok(queries
            .par_iter()
            .map(|q| {
                self.localize(q, params).unwrap_or_else(|e| {
                    let mut r = LocalizationResult::failed(q.id);
                    r.error = Some(e.to_string());
                    r
                })
            })
            .collect())
    }
}

/// Convenience wrapper for a single query.
pub fn localize(
    index: &GlobalIndex,
    map: &VisualMap,
    query: &QueryFrame,
    params: &PipelineParams,
) -> Result<LocalizationResult> {
    Localizer::new(map, index)?.localize(query, params)
}

/// Convenience wrapper for a batch of queries.
pub fn localize_batch(
    index: &GlobalIndex,
    map: &VisualMap,
    queries: &[QueryFrame],
    params: &PipelineParams,
) -> Result<Vec<LocalizationResult>> {
    Localizer::new(map, index)?.localize_batch(queries, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let p = PipelineParams::default();
        assert_eq!(p.num_priors, 10);
        assert_eq!(p.matching.epsilon, 3.0);
        assert_eq!(p.mode, Mode::Hierarchical);
        assert!(PipelineParams { num_priors: 0, ..p }.validate().is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in [Mode::Hierarchical, Mode::Direct] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn seeds_differ_per_query() {
        assert_ne!(query_seed(1, 0), query_seed(1, 1));
        assert_eq!(query_seed(7, 3), query_seed(7, 3));
    }
}
