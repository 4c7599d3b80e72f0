use std::cmp::Ordering;

use nalgebra::Vector3;

use crate::descriptor::{FeatureCloud, Features};
use crate::error::{Error, Result};

/// Dense matrix of Euclidean descriptor distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// One entry of a [`DistanceMatrix`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub distance: f64,
}

fn entry_order(a: &Entry, b: &Entry) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

impl DistanceMatrix {
    pub fn compute(f: &Features, g: &Features) -> Result<Self> {
        if f.dim() != g.dim() {
            return Err(Error::param(format!(
                "descriptor widths differ: {} vs {}",
                f.dim(),
                g.dim()
            )));
        }
        let mut data = Vec::with_capacity(f.len() * g.len());
        for a in f.rows() {
            for b in g.rows() {
                let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                data.push(s.sqrt());
            }
        }
        Ok(Self {
            rows: f.len(),
            cols: g.len(),
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::param("ragged distance rows"));
        }
        let data: Vec<f64> = rows.concat();
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::param("distances must be finite and non-negative"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// The `s` smallest entries sorted by (distance, row, col).
    pub fn smallest(&self, s: usize) -> Result<Vec<Entry>> {
        let total = self.rows * self.cols;
        if s == 0 || s > total {
            return Err(Error::param(format!(
                "s = {s} must lie in [1, {total}] for a {}x{} distance matrix",
                self.rows, self.cols
            )));
        }
        let mut all: Vec<Entry> = self
            .data
            .iter()
            .enumerate()
            .map(|(k, &distance)| Entry {
                row: k / self.cols,
                col: k % self.cols,
                distance,
            })
            .collect();
        if s < total {
            all.select_nth_unstable_by(s - 1, entry_order);
            all.truncate(s);
        }
        all.sort_by(entry_order);
        Ok(all)
    }

    /// Mean of the `s` smallest entries, summed in ascending order.
    pub fn mean_smallest(&self, s: usize) -> Result<f64> {
        let mut values: Vec<f64> = self.smallest(s)?.iter().map(|e| e.distance).collect();
        values.sort_by(f64::total_cmp);
        Ok(values.iter().sum::<f64>() / s as f64)
    }
}

/// Mean of the `s` smallest pairwise descriptor distances. Symmetric in its
/// arguments bit for bit.
pub fn inter_scan_distance(f: &Features, g: &Features, s: usize) -> Result<f64> {
    DistanceMatrix::compute(f, g)?.mean_smallest(s)
}

/// Best loop candidate for a query keyframe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopMatch {
    pub candidate: usize,
    pub distance: f64,
}

/// Inter-scan distance to every candidate; `s` is clamped to the size of
/// each distance matrix.
pub fn candidate_distances(query: &Features, candidates: &[&Features], s: usize) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|c| {
            let total = query.len() * c.len();
            if total == 0 {
                return Ok(f64::INFINITY);
            }
            inter_scan_distance(query, c, s.clamp(1, total))
        })
        .collect()
}

/// Argmin-distance candidate if its distance is below `threshold`; ties go to
/// the lowest candidate index.
pub fn detect_loop(query: &Features, candidates: &[&Features], threshold: f64, s: usize) -> Result<Option<LoopMatch>> {
    let distances = candidate_distances(query, candidates, s)?;
    Ok(best_below(&distances, threshold))
}

pub(crate) fn best_below(distances: &[f64], threshold: f64) -> Option<LoopMatch> {
    let mut best: Option<LoopMatch> = None;
    for (candidate, &distance) in distances.iter().enumerate() {
        if best.map_or(true, |b| distance < b.distance) {
            best = Some(LoopMatch { candidate, distance });
        }
    }
    best.filter(|b| b.distance < threshold)
}

/// A keypoint pair selected by descriptor distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
    pub distance: f64,
}

/// The `s` globally closest descriptor pairs between two feature clouds.
pub fn select_correspondences(source: &FeatureCloud, target: &FeatureCloud, s: usize) -> Result<Vec<Correspondence>> {
    let d = DistanceMatrix::compute(&source.descriptors, &target.descriptors)?;
    Ok(d
        .smallest(s)?
        .into_iter()
        .map(|e| Correspondence {
            source_index: e.row,
            target_index: e.col,
            source: source.keypoints[e.row],
            target: target.keypoints[e.col],
            distance: e.distance,
        })
        .collect())
}
