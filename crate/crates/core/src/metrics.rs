//! Saliency evaluation measures: MAE, mean F-measure, mean E-measure and S-measure.
//!
//! Predictions are maps in `[0, 1]`; ground truths are binary (any value `>= 0.5`
//! counts as foreground).

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Machine epsilon as used by the reference implementations.
const EPS: f64 = f64::EPSILON;

pub const BETA2: f64 = 0.3;

/// The 255 thresholds `k/256`, `k = 1..=255`.
pub fn thresholds() -> impl Iterator<Item = f64> {
    (1..=255).map(|k| k as f64 / 256.0)
}

fn check(pred: &[f32], gt: &[f32]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::argument(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn binary(gt: &[f32]) -> Vec<bool> {
    gt.iter().map(|v| *v >= 0.5).collect()
}

pub fn mae(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (*p as f64 - *g as f64).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// F-measure from confusion counts, with `0/0` read as 0.
pub fn f_from_counts(tp: usize, fp: usize, fn_: usize, beta2: f64) -> f64 {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

fn f_at(pred: &[f32], gt: &[bool], threshold: f64, beta2: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, &g) in pred.iter().zip(gt) {
        match ((*p as f64) >= threshold, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    f_from_counts(tp, fp, fn_, beta2)
}

/// Mean over the 255-threshold sweep of the F-measure.
pub fn mean_f(pred: &[f32], gt: &[f32], beta2: f64) -> Result<f64> {
    check(pred, gt)?;
    let gt = binary(gt);
    Ok(thresholds().map(|t| f_at(pred, &gt, t, beta2)).sum::<f64>() / 255.0)
}

/// F-measure at the adaptive threshold `min(2·mean(pred), 1)`.
pub fn adaptive_f(pred: &[f32], gt: &[f32], beta2: f64) -> Result<f64> {
    check(pred, gt)?;
    let mean = pred.iter().map(|v| *v as f64).sum::<f64>() / pred.len() as f64;
    Ok(f_at(pred, &binary(gt), (2.0 * mean).min(1.0), beta2))
}

/// Enhanced alignment between a binary foreground map and the ground truth.
fn e_binary(fm: &[bool], gt: &[bool]) -> f64 {
    let n = gt.len() as f64;
    let fg = gt.iter().filter(|g| **g).count();
    if fg == 0 {
        return fm.iter().filter(|f| !**f).count() as f64 / n;
    }
    if fg == gt.len() {
        return fm.iter().filter(|f| **f).count() as f64 / n;
    }
    let mu_f = fm.iter().filter(|f| **f).count() as f64 / n;
    let mu_g = fg as f64 / n;
    let mut sum = 0.0;
    for (&f, &g) in fm.iter().zip(gt) {
        let a = f as u8 as f64 - mu_f;
        let b = g as u8 as f64 - mu_g;
        let align = 2.0 * a * b / (a * a + b * b + EPS);
        sum += (align + 1.0) * (align + 1.0) / 4.0;
    }
    sum / n
}

/// Mean E-measure over the threshold sweep.
pub fn e_measure(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check(pred, gt)?;
    let gt = binary(gt);
    let total: f64 = thresholds()
        .map(|t| {
            let fm: Vec<bool> = pred.iter().map(|p| *p as f64 >= t).collect();
            e_binary(&fm, &gt)
        })
        .sum();
    Ok(total / 255.0)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std, n)
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma, _) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &[f64], gt: &[bool]) -> f64 {
    let fg = object_score(pred.iter().zip(gt).filter(|(_, g)| **g).map(|(p, _)| *p));
    let bg = object_score(pred.iter().zip(gt).filter(|(_, g)| !**g).map(|(p, _)| 1.0 - *p));
    let u = gt.iter().filter(|g| **g).count() as f64 / gt.len() as f64;
    u * fg + (1.0 - u) * bg
}

fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let d = n - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-based centroid `(x, y)` of the foreground, rounded.
fn centroid(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if gt[i * w + j] {
                sx += (j + 1) as f64;
                sy += (i + 1) as f64;
                total += 1.0;
            }
        }
    }
    if total == 0.0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn s_region(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (x, y) = centroid(gt, h, w);
    let area = (h * w) as f64;
    let quadrants = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let mut score = 0.0;
    for (r0, r1, c0, c1) in quadrants {
        let count = (r1 - r0) * (c1 - c0);
        if count == 0 {
            continue;
        }
        let mut p = Vec::with_capacity(count);
        let mut g = Vec::with_capacity(count);
        for i in r0..r1 {
            for j in c0..c1 {
                p.push(pred[i * w + j]);
                g.push(gt[i * w + j] as u8 as f64);
            }
        }
        score += count as f64 / area * region_ssim(&p, &g);
    }
    score
}

/// Structure measure `α·S_object + (1−α)·S_region` on an `h×w` map, clamped at 0.
pub fn s_measure(pred: &[f32], gt: &[f32], (h, w): (usize, usize), alpha: f64) -> Result<f64> {
    check(pred, gt)?;
    if h * w != pred.len() {
        return Err(Error::argument(format!("{h}x{w} does not match {} pixels", pred.len())));
    }
    let gtb = binary(gt);
    let p: Vec<f64> = pred.iter().map(|v| *v as f64).collect();
    let y = gtb.iter().filter(|g| **g).count() as f64 / gtb.len() as f64;
    let mean_pred = p.iter().sum::<f64>() / p.len() as f64;
    let q = if y == 0.0 {
        1.0 - mean_pred
    } else if y == 1.0 {
        mean_pred
    } else {
        alpha * s_object(&p, &gtb) + (1.0 - alpha) * s_region(&p, &gtb, h, w)
    };
    Ok(q.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub mae: f64,
    pub mean_f: f64,
    pub adaptive_f: f64,
    pub e_measure: f64,
    pub s_measure: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mae: f64,
    pub mean_f: f64,
    pub adaptive_f: f64,
    pub e_measure: f64,
    pub s_measure: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<ImageRecord>,
    pub means: MetricMeans,
    pub errors: Vec<String>,
}

impl MetricReport {
    pub fn from_records(records: Vec<ImageRecord>, errors: Vec<String>) -> Self {
        let n = records.len().max(1) as f64;
        let sum = |f: fn(&ImageRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let means = MetricMeans {
            mae: sum(|r| r.mae),
            mean_f: sum(|r| r.mean_f),
            adaptive_f: sum(|r| r.adaptive_f),
            e_measure: sum(|r| r.e_measure),
            s_measure: sum(|r| r.s_measure),
        };
        Self { records, means, errors }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// All measures for one prediction/ground-truth pair of size `h×w`.
pub fn evaluate_pair(id: &str, pred: &[f32], gt: &[f32], size: (usize, usize)) -> Result<ImageRecord> {
    Ok(ImageRecord {
        id: id.to_string(),
        mae: mae(pred, gt)?,
        mean_f: mean_f(pred, gt, BETA2)?,
        adaptive_f: adaptive_f(pred, gt, BETA2)?,
        e_measure: e_measure(pred, gt)?,
        s_measure: s_measure(pred, gt, size, 0.5)?,
    })
}

fn raster_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && crate::data::is_raster(&path) {
            if let Some(stem) = path.file_stem() {
                out.push((stem.to_string_lossy().into_owned(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn evaluate_files(id: &str, pred: &Path, gt: &Path) -> Result<ImageRecord> {
    let (g, h, w) = crate::data::read_gray(gt)?;
    let g: Vec<f32> = g.iter().map(|v| if *v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let (p, ph, pw) = crate::data::read_gray(pred)?;
    let p = if (ph, pw) == (h, w) {
        p
    } else {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(pw as u32, ph as u32, p).expect("buffer matches its dimensions");
        image::imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle).into_raw()
    };
    evaluate_pair(id, &p, &g, (h, w))
}

/// Pairs prediction and ground-truth rasters by file stem and evaluates every pair.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = raster_stems(pred_dir)?;
    let gts = raster_stems(gt_dir)?;
    let mut errors = Vec::new();
    let mut pairs = Vec::new();
    for (stem, p) in &preds {
        match gts.iter().find(|(s, _)| s == stem) {
            Some((_, g)) => pairs.push((stem.clone(), p.clone(), g.clone())),
            None => errors.push(format!("{}: no ground truth", p.display())),
        }
    }
    for (stem, g) in &gts {
        if !preds.iter().any(|(s, _)| s == stem) {
            errors.push(format!("{}: no prediction", g.display()));
        }
    }
    let results: Vec<Result<ImageRecord>> = pairs.par_iter().map(|(id, p, g)| evaluate_files(id, p, g)).collect();
    let mut records = Vec::new();
    for ((id, _, _), r) in pairs.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(format!("{id}: {e}")),
        }
    }
    Ok(MetricReport::from_records(records, errors))
}
