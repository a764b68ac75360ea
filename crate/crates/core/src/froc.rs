//! Free-response ROC evaluation: hit matching, curve construction,
//! sensitivity at the seven standard operating points, and recall reporting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Ground-truth nodule annotation in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub scan_id: String,
    /// (z, y, x) mm.
    pub center_world: [f64; 3],
    pub diameter_mm: f64,
}

/// Detection emitted by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub scan_id: String,
    /// (z, y, x) mm.
    pub center_world: [f64; 3],
    pub probability: f64,
}

/// Outcome of matching one candidate against the annotations of its scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    /// Highest-probability hitter of the annotation it hit.
    TruePositive { annotation: usize },
    /// Hit an annotation that a higher-probability candidate also hit;
    /// counts as neither TP nor FP.
    Ignored { annotation: usize },
    FalsePositive,
}

/// Per-candidate match flags plus per-annotation detection state.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// One entry per input candidate, in input order.
    pub kinds: Vec<MatchKind>,
    /// Per annotation: probability of its best hitter, if any.
    pub best_hit_probability: Vec<Option<f64>>,
    pub annotation_count: usize,
}

impl MatchResult {
    pub fn detected(&self) -> usize {
        self.best_hit_probability.iter().flatten().count()
    }

    pub fn false_positive_count(&self) -> usize {
        self.kinds
            .iter()
            .filter(|k| matches!(k, MatchKind::FalsePositive))
            .count()
    }
}

/// A candidate hits an annotation iff the Euclidean distance between centers
/// is strictly less than the annotation radius. Among multiple hitters of one
/// annotation, only the highest-probability one (ties: earliest input index)
/// is its true positive; the rest are ignored. A candidate that hits several
/// annotations is assigned to the nearest one (ties: lowest annotation index).
/// Candidates on scans absent from `scan_ids` are an input error.
pub fn match_candidates(
    candidates: &[Candidate],
    annotations: &[Annotation],
    scan_ids: &[String],
) -> Result<MatchResult> {
    let known: std::collections::BTreeSet<&str> = scan_ids.iter().map(String::as_str).collect();
    for c in candidates {
        if !known.contains(c.scan_id.as_str()) {
            return Err(Error::Input(format!(
                "candidate references unknown scan '{}'",
                c.scan_id
            )));
        }
    }
    for a in annotations {
        if !known.contains(a.scan_id.as_str()) {
            return Err(Error::Input(format!(
                "annotation references unknown scan '{}'",
                a.scan_id
            )));
        }
    }

    let mut ann_by_scan: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in annotations.iter().enumerate() {
        ann_by_scan.entry(a.scan_id.as_str()).or_default().push(i);
    }

    // Assign each candidate to the nearest annotation it hits, if any.
    let mut hit_target: Vec<Option<usize>> = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut best: Option<(f64, usize)> = None;
        if let Some(idxs) = ann_by_scan.get(c.scan_id.as_str()) {
            for &ai in idxs {
                let a = &annotations[ai];
                let dist = euclid(c.center_world, a.center_world);
                if dist < a.diameter_mm / 2.0 {
                    let better = match best {
                        None => true,
                        Some((bd, bi)) => dist < bd || (dist == bd && ai < bi),
                    };
                    if better {
                        best = Some((dist, ai));
                    }
                }
            }
        }
        hit_target.push(best.map(|(_, ai)| ai));
    }

    // Per annotation, the best hitter becomes its TP.
    let mut best_hitter: Vec<Option<usize>> = vec![None; annotations.len()];
    for (ci, target) in hit_target.iter().enumerate() {
        if let Some(ai) = *target {
            let replace = match best_hitter[ai] {
                None => true,
                Some(prev) => candidates[ci].probability > candidates[prev].probability,
            };
            if replace {
                best_hitter[ai] = Some(ci);
            }
        }
    }

    let kinds = hit_target
        .iter()
        .enumerate()
        .map(|(ci, target)| match *target {
            None => MatchKind::FalsePositive,
            Some(ai) => {
                if best_hitter[ai] == Some(ci) {
                    MatchKind::TruePositive { annotation: ai }
                } else {
                    MatchKind::Ignored { annotation: ai }
                }
            }
        })
        .collect();

    let best_hit_probability = best_hitter
        .iter()
        .map(|h| h.map(|ci| candidates[ci].probability))
        .collect();

    Ok(MatchResult {
        kinds,
        best_hit_probability,
        annotation_count: annotations.len(),
    })
}

fn euclid(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dz = a[0] - b[0];
    let dy = a[1] - b[1];
    let dx = a[2] - b[2];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// The seven standard FROC operating points (false positives per scan).
pub const OPERATING_POINTS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// FROC curve: (fp_per_scan, sensitivity) points ordered by increasing
/// fp_per_scan, sensitivities at the seven operating points, and their mean.
#[derive(Debug, Clone)]
pub struct FrocCurve {
    pub points: Vec<(f64, f64)>,
    pub operating_sensitivities: [f64; 7],
    pub mean_sensitivity: f64,
}

/// Build the FROC curve by sweeping the decision threshold over every
/// distinct candidate probability, descending. At each threshold t the
/// candidate set is {probability >= t}; sensitivity counts annotations whose
/// best hitter clears t, false positives count non-hitting candidates that
/// clear t. Operating sensitivities are a step-function lookup: the largest
/// sensitivity among points with fp_per_scan <= the operating point.
pub fn froc_curve(
    matches: &MatchResult,
    candidates: &[Candidate],
    n_scans: usize,
) -> Result<FrocCurve> {
    if n_scans == 0 {
        return Err(Error::Config("n_scans must be >= 1".into()));
    }
    if matches.annotation_count == 0 {
        return Err(Error::UndefinedMetric(
            "FROC needs at least one annotation".into(),
        ));
    }
    if matches.kinds.len() != candidates.len() {
        return Err(Error::ShapeMismatch(
            "match result does not correspond to the candidate list".into(),
        ));
    }

    let mut thresholds: Vec<f64> = candidates.iter().map(|c| c.probability).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    thresholds.dedup();

    let mut fp_probs: Vec<f64> = matches
        .kinds
        .iter()
        .zip(candidates)
        .filter(|(k, _)| matches!(k, MatchKind::FalsePositive))
        .map(|(_, c)| c.probability)
        .collect();
    fp_probs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));

    let mut hit_probs: Vec<f64> = matches
        .best_hit_probability
        .iter()
        .flatten()
        .copied()
        .collect();
    hit_probs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));

    let total = matches.annotation_count as f64;
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let fps = fp_probs.iter().take_while(|&&p| p >= t).count();
            let detected = hit_probs.iter().take_while(|&&p| p >= t).count();
            (fps as f64 / n_scans as f64, detected as f64 / total)
        })
        .collect();

    let operating_sensitivities = operating_lookup(&points);
    let mean_sensitivity = operating_sensitivities.iter().sum::<f64>() / 7.0;
    Ok(FrocCurve {
        points,
        operating_sensitivities,
        mean_sensitivity,
    })
}

fn operating_lookup(points: &[(f64, f64)]) -> [f64; 7] {
    let mut out = [0.0; 7];
    for (i, &op) in OPERATING_POINTS.iter().enumerate() {
        out[i] = points
            .iter()
            .filter(|(fp, _)| *fp <= op)
            .map(|&(_, s)| s)
            .fold(0.0, f64::max);
    }
    out
}

/// Recall over all candidates (threshold zero) plus the raw candidate count.
pub fn recall_report(matches: &MatchResult, candidate_count: usize) -> Result<(f64, usize)> {
    if matches.annotation_count == 0 {
        return Err(Error::UndefinedMetric(
            "recall needs at least one annotation".into(),
        ));
    }
    Ok((
        matches.detected() as f64 / matches.annotation_count as f64,
        candidate_count,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(scan: &str, z: f64, diameter: f64) -> Annotation {
        Annotation {
            scan_id: scan.into(),
            center_world: [z, 0.0, 0.0],
            diameter_mm: diameter,
        }
    }

    fn cand(scan: &str, z: f64, p: f64) -> Candidate {
        Candidate {
            scan_id: scan.into(),
            center_world: [z, 0.0, 0.0],
            probability: p,
        }
    }

    fn scans(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hit_inside_radius() {
        let anns = vec![ann("s", 0.0, 6.0)];
        let cands = vec![cand("s", 2.0, 0.9)];
        let m = match_candidates(&cands, &anns, &scans(&["s"])).unwrap();
        assert_eq!(m.kinds[0], MatchKind::TruePositive { annotation: 0 });
        assert_eq!(m.detected(), 1);
    }

    #[test]
    fn boundary_is_not_a_hit() {
        let anns = vec![ann("s", 0.0, 6.0)];
        let cands = vec![cand("s", 3.0, 0.9)];
        let m = match_candidates(&cands, &anns, &scans(&["s"])).unwrap();
        assert_eq!(m.kinds[0], MatchKind::FalsePositive);
    }

    #[test]
    fn multiple_hitters_counted_once() {
        let anns = vec![ann("s", 0.0, 10.0)];
        let cands = vec![cand("s", 1.0, 0.6), cand("s", -1.0, 0.8), cand("s", 50.0, 0.7)];
        let m = match_candidates(&cands, &anns, &scans(&["s"])).unwrap();
        assert_eq!(m.kinds[0], MatchKind::Ignored { annotation: 0 });
        assert_eq!(m.kinds[1], MatchKind::TruePositive { annotation: 0 });
        assert_eq!(m.kinds[2], MatchKind::FalsePositive);
        assert_eq!(m.detected(), 1);
        assert_eq!(m.false_positive_count(), 1);
        assert_eq!(m.best_hit_probability[0], Some(0.8));
    }

    #[test]
    fn unknown_scan_is_input_error() {
        let anns = vec![ann("s", 0.0, 6.0)];
        let cands = vec![cand("other", 0.0, 0.5)];
        assert!(matches!(
            match_candidates(&cands, &anns, &scans(&["s"])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn perfect_detector_curve() {
        let anns = vec![ann("a", 0.0, 6.0), ann("b", 10.0, 8.0)];
        let cands = vec![cand("a", 0.0, 1.0), cand("b", 10.0, 1.0)];
        let m = match_candidates(&cands, &anns, &scans(&["a", "b"])).unwrap();
        let curve = froc_curve(&m, &cands, 2).unwrap();
        assert!(curve.operating_sensitivities.iter().all(|&s| s == 1.0));
        assert_eq!(curve.mean_sensitivity, 1.0);
    }

    #[test]
    fn empty_detector_curve() {
        let anns = vec![ann("a", 0.0, 6.0)];
        let m = match_candidates(&[], &anns, &scans(&["a"])).unwrap();
        let curve = froc_curve(&m, &[], 1).unwrap();
        assert!(curve.points.is_empty());
        assert!(curve.operating_sensitivities.iter().all(|&s| s == 0.0));
        assert_eq!(curve.mean_sensitivity, 0.0);
    }

    #[test]
    fn zero_annotations_is_undefined() {
        let cands = vec![cand("a", 0.0, 0.5)];
        let m = match_candidates(&cands, &[], &scans(&["a"])).unwrap();
        assert!(matches!(
            froc_curve(&m, &cands, 1),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn hand_built_curve() {
        // 2 scans, 3 nodules, 5 candidates.
        let anns = vec![ann("a", 0.0, 6.0), ann("a", 20.0, 6.0), ann("b", 0.0, 6.0)];
        let cands = vec![
            cand("a", 0.5, 0.9),   // hits ann 0
            cand("a", 40.0, 0.8),  // FP
            cand("a", 20.5, 0.6),  // hits ann 1
            cand("b", 0.5, 0.4),   // hits ann 2
            cand("b", -30.0, 0.2), // FP
        ];
        let m = match_candidates(&cands, &anns, &scans(&["a", "b"])).unwrap();
        let curve = froc_curve(&m, &cands, 2).unwrap();
        // thresholds 0.9, 0.8, 0.6, 0.4, 0.2:
        let expect = [
            (0.0, 1.0 / 3.0),
            (0.5, 1.0 / 3.0),
            (0.5, 2.0 / 3.0),
            (0.5, 1.0),
            (1.0, 1.0),
        ];
        assert_eq!(curve.points.len(), expect.len());
        for ((fp, s), (efp, es)) in curve.points.iter().zip(&expect) {
            assert!((fp - efp).abs() < 1e-12 && (s - es).abs() < 1e-12);
        }
        // operating: 0.125, 0.25 -> fp<=op only (0.0, 1/3); 0.5 -> best is 1.0
        assert!((curve.operating_sensitivities[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((curve.operating_sensitivities[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((curve.operating_sensitivities[2] - 1.0).abs() < 1e-12);
        assert!((curve.operating_sensitivities[6] - 1.0).abs() < 1e-12);
        let mean: f64 = curve.operating_sensitivities.iter().sum::<f64>() / 7.0;
        assert_eq!(curve.mean_sensitivity, mean);
    }

    #[test]
    fn recall_counts() {
        let anns = vec![ann("a", 0.0, 6.0), ann("a", 20.0, 6.0), ann("a", 40.0, 6.0)];
        let cands = vec![cand("a", 0.0, 0.9), cand("a", 20.0, 0.1)];
        let m = match_candidates(&cands, &anns, &scans(&["a"])).unwrap();
        let (recall, count) = recall_report(&m, cands.len()).unwrap();
        assert!((recall - 0.666667).abs() < 1e-5);
        assert_eq!(count, 2);
    }
}
