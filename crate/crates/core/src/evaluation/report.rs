use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BootstrapResult, EvalConfig, Result};
use crate::rerank::RankerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mean: f64,
    pub stderr: f64,
    pub fallback_tasks: usize,
}

impl MethodRow {
    pub fn new(spec: &RankerSpec, r: &BootstrapResult) -> Self {
        Self {
            method: spec.label(),
            mean: r.mean,
            stderr: r.stderr,
            fallback_tasks: r.fallback_tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrRow {
    pub method: String,
    pub return_only: f64,
    pub repetitive: f64,
    pub copy_prompt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub size: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub weighted_mmi: BootstrapResult,
    pub alternate: Option<BootstrapResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub tasks: usize,
    pub bootstrap: Vec<MethodRow>,
    pub mrr: Vec<MrrRow>,
    pub sample_curve: Vec<CurveRow>,
    pub alpha_sweep: Vec<AlphaRow>,
}

/// One line of the flat CSV export.
#[derive(Debug, Serialize)]
struct FlatRow<'a> {
    section: &'static str,
    method: &'a str,
    metric: &'static str,
    param: String,
    value: f64,
}

impl EvalReport {
    fn flat_rows(&self) -> Vec<FlatRow<'_>> {
        let mut rows = Vec::new();
        let mut push = |section, method, metric, param: String, value| {
            rows.push(FlatRow {
                section,
                method,
                metric,
                param,
                value,
            })
        };
        for r in &self.bootstrap {
            let n = self.config.subsample_size.to_string();
            push("bootstrap", r.method.as_str(), "mean", n.clone(), r.mean);
            push("bootstrap", r.method.as_str(), "stderr", n.clone(), r.stderr);
            push(
                "bootstrap",
                r.method.as_str(),
                "fallback_tasks",
                n,
                r.fallback_tasks as f64,
            );
        }
        for r in &self.mrr {
            push("mrr", r.method.as_str(), "mrr", "return-only".into(), r.return_only);
            push("mrr", r.method.as_str(), "mrr", "repetitive".into(), r.repetitive);
            push("mrr", r.method.as_str(), "mrr", "copy-prompt".into(), r.copy_prompt);
        }
        for r in &self.sample_curve {
            push("sample_curve", r.method.as_str(), "mean", r.size.to_string(), r.mean);
            push(
                "sample_curve",
                r.method.as_str(),
                "stderr",
                r.size.to_string(),
                r.stderr,
            );
        }
        for r in &self.alpha_sweep {
            let a = r.alpha.to_string();
            push("alpha_sweep", "weighted-mmi", "mean", a.clone(), r.weighted_mmi.mean);
            push(
                "alpha_sweep",
                "weighted-mmi",
                "stderr",
                a.clone(),
                r.weighted_mmi.stderr,
            );
            if let Some(alt) = &r.alternate {
                push("alpha_sweep", "alternate", "mean", a.clone(), alt.mean);
                push("alpha_sweep", "alternate", "stderr", a, alt.stderr);
            }
        }
        rows
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(dir.join("report.json"), json + "\n")?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        for row in self.flat_rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sections_present(&self) -> bool {
        !self.bootstrap.is_empty()
            && !self.mrr.is_empty()
            && !self.sample_curve.is_empty()
            && !self.alpha_sweep.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(mean: f64) -> BootstrapResult {
        BootstrapResult {
            mean,
            stderr: 0.01,
            trials: 5,
            fallback_tasks: 0,
        }
    }

    #[test]
    fn writes_json_and_flat_csv() {
        let report = EvalReport {
            config: EvalConfig::default(),
            tasks: 1,
            bootstrap: vec![MethodRow {
                method: "coder".into(),
                mean: 0.5,
                stderr: 0.1,
                fallback_tasks: 1,
            }],
            mrr: vec![MrrRow {
                method: "coder".into(),
                return_only: 1.0,
                repetitive: 0.5,
                copy_prompt: 0.25,
            }],
            sample_curve: vec![CurveRow {
                method: "coder".into(),
                size: 5,
                mean: 0.4,
                stderr: 0.0,
            }],
            alpha_sweep: vec![AlphaRow {
                alpha: 0.5,
                weighted_mmi: r(0.6),
                alternate: Some(r(0.3)),
            }],
        };
        assert!(report.sections_present());
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let back: EvalReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "section,method,metric,param,value");
        assert_eq!(lines.len(), 1 + 3 + 3 + 2 + 4);
        assert!(lines.contains(&"mrr,coder,mrr,copy-prompt,0.25"));
    }
}
