//! Lip vertex error, face dynamics deviation and mouth-opening difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;

/// Vertex regions of a topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub lip_indices: Vec<usize>,
    pub upper_face_indices: Vec<usize>,
    /// `(upper lip, lower lip)`
    pub mouth_pair: (usize, usize),
    /// Template position of the upper mouth vertex minus the lower one.
    pub mouth_rest_gap: [f64; 3],
}

impl RegionSpec {
    pub fn validate(&self, vertices: usize) -> Result<()> {
        if self.lip_indices.is_empty() || self.upper_face_indices.is_empty() {
            return Err(Error::invalid("region index sets must be non-empty"));
        }
        let (u, l) = self.mouth_pair;
        if u == l {
            return Err(Error::invalid("mouth pair vertices must differ"));
        }
        let all = self.lip_indices.iter().chain(&self.upper_face_indices).chain([&u, &l]);
        if let Some(bad) = all.copied().find(|&i| i >= vertices) {
            return Err(Error::invalid(format!("region index {bad} outside {vertices} vertices")));
        }
        Ok(())
    }
}

/// Aggregation of lip distances within a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LveMode {
    #[default]
    Max,
    Mean,
}

fn check_pair(pred: &MotionSequence, gt: &MotionSequence, region: &RegionSpec) -> Result<()> {
    if pred.frames() != gt.frames() || pred.vertices() != gt.vertices() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.frames(),
            pred.vertices(),
            gt.frames(),
            gt.vertices()
        )));
    }
    region.validate(gt.vertices())
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn diff(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn lve(pred: &MotionSequence, gt: &MotionSequence, region: &RegionSpec) -> Result<f64> {
    lve_with(pred, gt, region, LveMode::Max)
}

/// Per-frame max (or mean) of lip-vertex L2 errors, averaged over frames.
pub fn lve_with(pred: &MotionSequence, gt: &MotionSequence, region: &RegionSpec, mode: LveMode) -> Result<f64> {
    check_pair(pred, gt, region)?;
    let mut total = 0.0;
    for t in 0..gt.frames() {
        let d = region.lip_indices.iter().map(|&v| norm(diff(pred.vertex(t, v), gt.vertex(t, v))));
        total += match mode {
            LveMode::Max => d.fold(0.0, f64::max),
            LveMode::Mean => d.sum::<f64>() / region.lip_indices.len() as f64,
        };
    }
    Ok(total / gt.frames() as f64)
}

/// Population standard deviation over time of each upper-face vertex's offset norm.
fn dynamics(m: &MotionSequence, v: usize) -> f64 {
    let n = m.frames() as f64;
    let norms: Vec<f64> = (0..m.frames()).map(|t| norm(m.vertex(t, v))).collect();
    let mean = norms.iter().sum::<f64>() / n;
    (norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean over upper-face vertices of `dyn(pred) − dyn(gt)` (signed).
pub fn fdd(pred: &MotionSequence, gt: &MotionSequence, region: &RegionSpec) -> Result<f64> {
    check_pair(pred, gt, region)?;
    if gt.frames() < 2 {
        return Err(Error::invalid("face dynamics need at least two frames"));
    }
    let sum: f64 = region.upper_face_indices.iter().map(|&v| dynamics(pred, v) - dynamics(gt, v)).sum();
    Ok(sum / region.upper_face_indices.len() as f64)
}

fn opening(m: &MotionSequence, t: usize, region: &RegionSpec) -> f64 {
    let (u, l) = region.mouth_pair;
    let g = region.mouth_rest_gap;
    let d = diff(m.vertex(t, u), m.vertex(t, l));
    norm([g[0] + d[0], g[1] + d[1], g[2] + d[2]])
}

/// Mean absolute difference of the mouth-pair distance.
pub fn mouth_open_diff(pred: &MotionSequence, gt: &MotionSequence, region: &RegionSpec) -> Result<f64> {
    check_pair(pred, gt, region)?;
    let sum: f64 = (0..gt.frames()).map(|t| (opening(pred, t, region) - opening(gt, t, region)).abs()).sum();
    Ok(sum / gt.frames() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub lve: f64,
    pub fdd: f64,
    pub mod_: f64,
}

pub fn evaluate(pred: &MotionSequence, gt: &MotionSequence, region: &RegionSpec) -> Result<MetricRow> {
    Ok(MetricRow { lve: lve(pred, gt, region)?, fdd: fdd(pred, gt, region)?, mod_: mouth_open_diff(pred, gt, region)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region() -> RegionSpec {
        RegionSpec { lip_indices: vec![0, 1], upper_face_indices: vec![2], mouth_pair: (0, 1), mouth_rest_gap: [0.0; 3] }
    }

    #[test]
    fn lve_three_four_five() {
        let gt = MotionSequence::new(1, 3, vec![0.0; 9], 25.0).unwrap();
        let pred = MotionSequence::new(1, 3, vec![3.0, 4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 25.0).unwrap();
        assert_eq!(lve(&pred, &gt, &region()).unwrap(), 5.0);
        assert_eq!(lve_with(&pred, &gt, &region(), LveMode::Mean).unwrap(), 3.0);
        assert_eq!(lve(&gt, &gt, &region()).unwrap(), 0.0);
    }

    #[test]
    fn constant_motion_has_no_dynamics() {
        let a = MotionSequence::new(3, 3, (0..27).map(|i| (i % 9) as f64).collect(), 25.0).unwrap();
        let b = MotionSequence::new(3, 3, vec![0.5; 27], 25.0).unwrap();
        assert!(fdd(&a, &b, &region()).unwrap().abs() < 1e-14);
        let one = MotionSequence::new(1, 3, vec![0.0; 9], 25.0).unwrap();
        assert!(fdd(&one, &one, &region()).is_err());
    }

    #[test]
    fn mouth_opening_constants() {
        let mut r = region();
        r.mouth_rest_gap = [0.0, 1.5, 0.0];
        let gt = MotionSequence::new(2, 3, vec![0.0; 18], 25.0).unwrap();
        let mut off = vec![0.0; 18];
        off[1] = 0.5;
        off[9 + 1] = 0.5;
        let pred = MotionSequence::new(2, 3, off, 25.0).unwrap();
        assert!((mouth_open_diff(&pred, &gt, &r).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatch_and_bad_regions() {
        let a = MotionSequence::new(2, 3, vec![0.0; 18], 25.0).unwrap();
        let b = MotionSequence::new(3, 3, vec![0.0; 27], 25.0).unwrap();
        assert!(lve(&a, &b, &region()).is_err());
        let mut r = region();
        r.mouth_pair = (1, 1);
        assert!(lve(&a, &a, &r).is_err());
        r = region();
        r.lip_indices.push(7);
        assert!(mouth_open_diff(&a, &a, &r).is_err());
    }
}
