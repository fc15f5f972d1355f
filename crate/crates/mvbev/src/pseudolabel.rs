//! Post-processing of occupancy maps into detections: conventional
//! greedy NMS and local-max extraction.
//!
//! Determinism contract: candidates sort by descending score with ties
//! broken by ascending `(i, j)`, and plateau resolution greedily suppresses
//! later candidates, so outputs are identical across runs and platforms.

use crate::tinynet::OccupancyMap;
use serde::{Deserialize, Serialize};

/// One detection: grid cell plus the score it was extracted at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub cell: (usize, usize),
    pub score: f32,
}

pub type DetectionSet = Vec<Detection>;

/// Threshold and suppression parameters for both extraction methods.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// Confidence threshold; candidates must score strictly above it.
    pub tau: f64,
    /// Euclidean suppression radius for vanilla NMS, in cells.
    pub d_cells: f64,
    /// Local-max neighborhood half-width, in cells.
    pub k_d: usize,
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.tau.is_nan() || self.tau <= 0.0 || self.tau >= 1.0 {
            return Err(format!("tau must be in (0, 1), got {}", self.tau));
        }
        if self.d_cells <= 0.0 || self.d_cells.is_nan() {
            return Err(format!("d_cells must be positive, got {}", self.d_cells));
        }
        if self.k_d < 1 {
            return Err("k_d must be at least 1".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    LocalMax,
}

/// Candidates above `tau`, sorted by descending score (ties by ascending
/// cell), shared by both methods.
fn thresholded_sorted(map: &OccupancyMap, tau: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for i in 0..map.h {
        for j in 0..map.w {
            let score = map.at(i, j);
            if (score as f64) > tau {
                out.push(Detection { cell: (i, j), score });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    out
}

fn euclidean(a: (usize, usize), b: (usize, usize)) -> f64 {
    let di = a.0 as f64 - b.0 as f64;
    let dj = a.1 as f64 - b.1 as f64;
    (di * di + dj * dj).sqrt()
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    let di = a.0.abs_diff(b.0);
    let dj = a.1.abs_diff(b.1);
    di.max(dj)
}

/// Conventional post-processing: threshold at `tau`, then greedily emit the
/// best remaining candidate and drop everything within Euclidean distance
/// `d_cells` of it. Emission order is preserved in the output.
pub fn vanilla_nms(map: &OccupancyMap, tau: f64, d_cells: f64) -> DetectionSet {
    let candidates = thresholded_sorted(map, tau);
    let mut emitted: DetectionSet = Vec::new();
    let mut suppressed = vec![false; candidates.len()];
    for k in 0..candidates.len() {
        if suppressed[k] {
            continue;
        }
        let det = candidates[k];
        emitted.push(det);
        for (m, c) in candidates.iter().enumerate().skip(k + 1) {
            if !suppressed[m] && euclidean(det.cell, c.cell) <= d_cells {
                suppressed[m] = true;
            }
        }
    }
    emitted
}

/// Cells that score above `tau` and dominate (>=) their full clipped
/// `(2 k_d + 1)^2` neighborhood. This is the candidate stage of
/// [`local_max`], before plateau resolution.
pub fn local_max_candidates(map: &OccupancyMap, tau: f64, k_d: usize) -> Vec<(usize, usize)> {
    let k = k_d as i64;
    let mut out = Vec::new();
    for i in 0..map.h {
        for j in 0..map.w {
            let score = map.at(i, j);
            if (score as f64) <= tau {
                continue;
            }
            let mut dominant = true;
            'scan: for di in -k..=k {
                let ni = i as i64 + di;
                if ni < 0 || ni >= map.h as i64 {
                    continue;
                }
                for dj in -k..=k {
                    let nj = j as i64 + dj;
                    if nj < 0 || nj >= map.w as i64 {
                        continue;
                    }
                    if map.at(ni as usize, nj as usize) > score {
                        dominant = false;
                        break 'scan;
                    }
                }
            }
            if dominant {
                out.push((i, j));
            }
        }
    }
    out
}

/// Local-max post-processing: only neighborhood-dominating cells above `tau`
/// are candidates; exact plateaus are resolved by greedy suppression within
/// Chebyshev distance `k_d`, so emitted detections are always more than
/// `k_d` apart.
pub fn local_max(map: &OccupancyMap, tau: f64, k_d: usize) -> DetectionSet {
    let mut candidates: Vec<Detection> = local_max_candidates(map, tau, k_d)
        .into_iter()
        .map(|cell| Detection {
            cell,
            score: map.at(cell.0, cell.1),
        })
        .collect();
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    let mut emitted: DetectionSet = Vec::new();
    for det in candidates {
        if emitted.iter().all(|e| chebyshev(e.cell, det.cell) > k_d) {
            emitted.push(det);
        }
    }
    emitted
}

/// Strips scores; the resulting cell list feeds the Gaussian soft target.
pub fn to_pseudo_label(dets: &[Detection]) -> Vec<(usize, usize)> {
    dets.iter().map(|d| d.cell).collect()
}

pub fn extract(map: &OccupancyMap, cfg: &PostprocessConfig, method: Method) -> DetectionSet {
    match method {
        Method::Vanilla => vanilla_nms(map, cfg.tau, cfg.d_cells),
        Method::LocalMax => local_max(map, cfg.tau, cfg.k_d),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionLine {
    i: usize,
    j: usize,
    score: f32,
}

/// JSON-lines serialization in emission order.
pub fn detections_to_jsonl(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let line = DetectionLine {
            i: d.cell.0,
            j: d.cell.1,
            score: d.score,
        };
        out.push_str(&serde_json::to_string(&line).expect("detection serializes"));
        out.push('\n');
    }
    out
}

pub fn detections_from_jsonl(text: &str) -> Result<DetectionSet, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<DetectionLine>(l).map(|d| Detection {
                cell: (d.i, d.j),
                score: d.score,
            })
        })
        .collect()
}
