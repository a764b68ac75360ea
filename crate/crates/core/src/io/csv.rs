//! Annotation and candidate CSV formats (LUNA16-style).
//!
//! Column coordinates are world mm in (x, y, z) order; the in-memory types
//! use (z, y, x). Reordering happens here and only here.

use crate::error::{Error, Result};
use crate::froc::{Annotation, Candidate};

pub const ANNOTATIONS_HEADER: &str = "seriesuid,coordX,coordY,coordZ,diameter_mm";
pub const CANDIDATES_HEADER: &str = "seriesuid,coordX,coordY,coordZ,probability";

fn split_row(line: &str, line_no: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 5 {
        return Err(Error::ParseAt {
            line: line_no,
            msg: format!("expected 5 comma-separated fields, got {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_f64(field: &str, name: &str, line_no: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::ParseAt {
        line: line_no,
        msg: format!("invalid {name} '{field}'"),
    })
}

pub fn read_annotations_csv(text: &str) -> Result<Vec<Annotation>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == ANNOTATIONS_HEADER => {}
        other => {
            return Err(Error::ParseAt {
                line: 1,
                msg: format!(
                    "expected header '{ANNOTATIONS_HEADER}', got '{}'",
                    other.map(|(_, h)| h).unwrap_or("")
                ),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let f = split_row(line, line_no)?;
        let x = parse_f64(f[1], "coordX", line_no)?;
        let y = parse_f64(f[2], "coordY", line_no)?;
        let z = parse_f64(f[3], "coordZ", line_no)?;
        let diameter_mm = parse_f64(f[4], "diameter_mm", line_no)?;
        if diameter_mm <= 0.0 {
            return Err(Error::ParseAt {
                line: line_no,
                msg: format!("diameter_mm must be > 0, got {diameter_mm}"),
            });
        }
        out.push(Annotation {
            scan_id: f[0].to_string(),
            center_world: [z, y, x],
            diameter_mm,
        });
    }
    Ok(out)
}

pub fn read_candidates_csv(text: &str) -> Result<Vec<Candidate>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CANDIDATES_HEADER => {}
        other => {
            return Err(Error::ParseAt {
                line: 1,
                msg: format!(
                    "expected header '{CANDIDATES_HEADER}', got '{}'",
                    other.map(|(_, h)| h).unwrap_or("")
                ),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let f = split_row(line, line_no)?;
        let x = parse_f64(f[1], "coordX", line_no)?;
        let y = parse_f64(f[2], "coordY", line_no)?;
        let z = parse_f64(f[3], "coordZ", line_no)?;
        let probability = parse_f64(f[4], "probability", line_no)?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::ParseAt {
                line: line_no,
                msg: format!("probability must lie in [0, 1], got {probability}"),
            });
        }
        out.push(Candidate {
            scan_id: f[0].to_string(),
            center_world: [z, y, x],
            probability,
        });
    }
    Ok(out)
}

pub fn write_annotations_csv(annotations: &[Annotation]) -> String {
    let mut s = String::from(ANNOTATIONS_HEADER);
    s.push('\n');
    for a in annotations {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            a.scan_id, a.center_world[2], a.center_world[1], a.center_world[0], a.diameter_mm
        ));
    }
    s
}

pub fn write_candidates_csv(candidates: &[Candidate]) -> String {
    let mut s = String::from(CANDIDATES_HEADER);
    s.push('\n');
    for c in candidates {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            c.scan_id, c.center_world[2], c.center_world[1], c.center_world[0], c.probability
        ));
    }
    s
}

/// Annotations whose diameter falls outside the plausible [1, 64] mm range;
/// callers surface these as warnings.
pub fn implausible_diameters(annotations: &[Annotation]) -> Vec<String> {
    annotations
        .iter()
        .filter(|a| a.diameter_mm < 1.0 || a.diameter_mm > 64.0)
        .map(|a| {
            format!(
                "annotation on scan {} has implausible diameter {:.2} mm",
                a.scan_id, a.diameter_mm
            )
        })
        .collect()
}
