use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{SampleSource, TaskMode};
use crate::error::{Error, Result};
use crate::flow::TimePoint;
use crate::models::Interpolator;
use crate::objective::{psnr, ssim};

use super::load_checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// Header, one row per sample and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.id, r.psnr, r.ssim);
        }
        let _ = writeln!(out, "mean,{},{}", self.mean_psnr, self.mean_ssim);
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))
    }
}

/// PSNR and SSIM of every target frame, averaged per sample and over the set.
pub fn evaluate(model: &Interpolator, samples: &[SampleSource]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for src in samples {
        let s = src.load()?;
        let (mut p, mut q) = (0.0, 0.0);
        for (t, gt) in &s.targets {
            let out = model.interpolate(&s.i0, &s.i1, TimePoint::new(*t)?)?;
            p += psnr(&out.frame, gt)?;
            q += ssim(&out.frame, gt)?;
        }
        let k = s.targets.len() as f64;
        rows.push(EvalRow {
            id: s.id,
            psnr: p / k,
            ssim: q / k,
        });
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(EvalReport { rows, mean_psnr, mean_ssim })
}

/// Evaluates a checkpoint; its recorded task mode must equal `mode`.
pub fn evaluate_checkpoint(checkpoint: impl AsRef<Path>, samples: &[SampleSource], mode: TaskMode) -> Result<EvalReport> {
    let state = load_checkpoint(checkpoint.as_ref(), None, false)?;
    if state.mode != mode {
        return Err(Error::Config(format!(
            "checkpoint {} was trained for {}, evaluation asked for {mode}",
            checkpoint.as_ref().display(),
            state.mode
        )));
    }
    evaluate(&state.model, samples)
}
