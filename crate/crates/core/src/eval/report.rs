use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{pr_radii, sr_thresholds, SequenceResult, PR_RADIUS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// Success rate against IoU threshold.
    pub success: Curve,
    /// Precision rate against pixel radius.
    pub precision: Curve,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sr_auc: f64,
    #[serde(rename = "sr@0.5")]
    pub sr_05: f64,
    #[serde(rename = "pr@20")]
    pub pr_20: f64,
    pub frames: usize,
    pub curves: Curves,
}

impl Report {
    pub fn from_result(r: &SequenceResult) -> Result<Self> {
        Ok(Self {
            sr_auc: r.sr_auc(),
            sr_05: r.sr_at(0.5)?,
            pr_20: r.pr_at(PR_RADIUS)?,
            frames: r.ious.len(),
            curves: Curves {
                success: Curve {
                    x: sr_thresholds(),
                    y: r.sr_curve.clone(),
                },
                precision: Curve {
                    x: pr_radii(),
                    y: r.pr_curve.clone(),
                },
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Long-format CSV `curve,x,y` with both curves.
pub fn write_curves_csv(path: &Path, report: &Report) -> Result<()> {
    let mut out = String::from("curve,x,y\n");
    for (name, c) in [("success", &report.curves.success), ("precision", &report.curves.precision)] {
        if c.x.len() != c.y.len() {
            return Err(Error::Validation(format!("{name} curve has mismatched lengths")));
        }
        for (x, y) in c.x.iter().zip(&c.y) {
            writeln!(out, "{name},{x},{y}").expect("string write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
