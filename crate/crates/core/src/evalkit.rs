//! One-pass evaluation metrics, the confidence/IoU correlation diagnostic and
//! the window-influence sweep.
//!
//! Conventions: success counts frames with IoU strictly above each of the 21
//! thresholds 0, 0.05, ..., 1; precision counts center distances at or below
//! each pixel threshold 0..=50; normalized precision divides the center
//! offset per axis by the ground-truth width and height and thresholds the
//! resulting distance over 0, 0.01, ..., 0.5.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{iou, BBox};
use crate::model::Model;
use crate::synthetic::{gen_synthetic_sequence, SyntheticConfig};
use crate::tracker::{track, FrameResult, PostProcessConfig};

pub const SUCCESS_POINTS: usize = 21;
pub const PRECISION_MAX_PX: usize = 50;
pub const PRECISION_REPORT_PX: f64 = 20.0;
pub const NORM_PRECISION_STEPS: usize = 50;
pub const NORM_PRECISION_MAX: f64 = 0.5;
pub const NORM_PRECISION_REPORT: f64 = 0.2;

/// Seed offset of the fixed evaluation suite, kept far from training seeds.
pub const SUITE_SEED_BASE: u64 = 0x5EED_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    fn mean_of(curves: &[&Curve]) -> Curve {
        let n = curves.len() as f64;
        let thresholds = curves[0].thresholds.clone();
        let values = (0..thresholds.len())
            .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / n)
            .collect();
        Curve { thresholds, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub curve: Curve,
}

fn check_lengths(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    Ok(())
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_POINTS).map(|i| i as f64 / (SUCCESS_POINTS - 1) as f64).collect()
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..=PRECISION_MAX_PX).map(|p| p as f64).collect()
}

pub fn norm_precision_thresholds() -> Vec<f64> {
    (0..=NORM_PRECISION_STEPS)
        .map(|i| NORM_PRECISION_MAX * i as f64 / NORM_PRECISION_STEPS as f64)
        .collect()
}

fn fraction(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|v| pass(**v)).count() as f64 / values.len() as f64
}

pub fn overlaps(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect()
}

pub fn center_distances(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let (a, b) = (p.center(), g.center());
            (a.x - b.x).hypot(a.y - b.y)
        })
        .collect())
}

pub fn normalized_distances(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            if !(g.width() > 0.0 && g.height() > 0.0) {
                return Err(Error::invalid("ground-truth box has zero size"));
            }
            let (a, b) = (p.center(), g.center());
            Ok(((a.x - b.x) / g.width()).hypot((a.y - b.y) / g.height()))
        })
        .collect()
}

/// Mean of the success rates at the 21 IoU thresholds.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<Metric> {
    let ious = overlaps(pred, gt)?;
    let thresholds = success_thresholds();
    let values: Vec<f64> = thresholds.iter().map(|t| fraction(&ious, |v| v > *t)).collect();
    let value = values.iter().sum::<f64>() / values.len() as f64;
    Ok(Metric {
        value,
        curve: Curve { thresholds, values },
    })
}

/// Fraction of frames with center distance within `threshold_px`.
pub fn precision(pred: &[BBox], gt: &[BBox], threshold_px: f64) -> Result<Metric> {
    let d = center_distances(pred, gt)?;
    let thresholds = precision_thresholds();
    let values = thresholds.iter().map(|t| fraction(&d, |v| v <= *t)).collect();
    Ok(Metric {
        value: fraction(&d, |v| v <= threshold_px),
        curve: Curve { thresholds, values },
    })
}

pub fn norm_precision(pred: &[BBox], gt: &[BBox]) -> Result<Metric> {
    let d = normalized_distances(pred, gt)?;
    let thresholds = norm_precision_thresholds();
    let values = thresholds.iter().map(|t| fraction(&d, |v| v <= *t)).collect();
    Ok(Metric {
        value: fraction(&d, |v| v <= NORM_PRECISION_REPORT),
        curve: Curve { thresholds, values },
    })
}

/// Pearson correlation; `r` is `None` when either series has zero variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: Option<f64>,
    pub n: usize,
}

impl Correlation {
    pub fn undefined(&self) -> bool {
        self.r.is_none()
    }
}

/// Two-pass Pearson correlation of paired samples (n >= 3).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::invalid(format!("correlation needs at least 3 pairs, got {n}")));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::invalid("correlation input is not finite"));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let r = if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
    };
    Ok(Correlation { r, n })
}

/// Per-frame (IoU, confidence) pairs for the correlation diagnostic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scatter {
    pub iou: Vec<f64>,
    /// Pre-window product `cls * loc` at the selected cell.
    pub confidence: Vec<f64>,
    /// Final combined score after penalty and window.
    pub combined: Vec<f64>,
}

impl Scatter {
    /// Pairs from tracked frames; the initialization frame is skipped since
    /// its scores are fixed.
    pub fn from_results(results: &[FrameResult], gt: &[BBox]) -> Result<Self> {
        let pred = result_boxes(results)?;
        let ious = overlaps(&pred, gt)?;
        let mut s = Scatter::default();
        for (r, v) in results.iter().zip(ious).skip(1) {
            s.iou.push(v);
            s.confidence.push(r.confidence());
            s.combined.push(r.score);
        }
        Ok(s)
    }

    fn extend(&mut self, other: &Scatter) {
        self.iou.extend_from_slice(&other.iou);
        self.confidence.extend_from_slice(&other.confidence);
        self.combined.extend_from_slice(&other.combined);
    }

    fn correlations(&self) -> (Option<Correlation>, Option<Correlation>) {
        let c = |y: &[f64]| pearson(&self.iou, y).ok();
        (c(&self.confidence), c(&self.combined))
    }
}

pub fn confidence_iou_correlation(results: &[FrameResult], gt: &[BBox]) -> Result<(Correlation, Scatter)> {
    let s = Scatter::from_results(results, gt)?;
    Ok((pearson(&s.iou, &s.confidence)?, s))
}

pub fn result_boxes(results: &[FrameResult]) -> Result<Vec<BBox>> {
    results.iter().map(FrameResult::bbox).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub frames: usize,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub success_curve: Curve,
    pub precision_curve: Curve,
    pub norm_precision_curve: Curve,
    /// Correlation of IoU with `cls * loc`; absent with fewer than 3
    /// tracked frames.
    pub pearson: Option<Correlation>,
    /// Correlation of IoU with the final combined score.
    pub pearson_combined: Option<Correlation>,
    pub scatter: Scatter,
}

pub fn evaluate_sequence(name: &str, results: &[FrameResult], gt: &[BBox]) -> Result<SequenceReport> {
    let pred = result_boxes(results)?;
    if pred.len() != gt.len() {
        return Err(Error::data(format!(
            "sequence `{name}`: {} results for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let auc = success_auc(&pred, gt)?;
    let prec = precision(&pred, gt, PRECISION_REPORT_PX)?;
    let norm = norm_precision(&pred, gt)?;
    let scatter = Scatter::from_results(results, gt)?;
    let (pearson, pearson_combined) = scatter.correlations();
    Ok(SequenceReport {
        name: name.to_string(),
        frames: pred.len(),
        auc: auc.value,
        precision: prec.value,
        norm_precision: norm.value,
        success_curve: auc.curve,
        precision_curve: prec.curve,
        norm_precision_curve: norm.curve,
        pearson,
        pearson_combined,
        scatter,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: Option<String>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sequences: usize,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub success_curve: Curve,
    pub precision_curve: Curve,
    pub norm_precision_curve: Curve,
    /// Pooled over the frames of every sequence.
    pub pearson: Option<Correlation>,
    pub pearson_combined: Option<Correlation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    /// Sorted by name.
    pub sequences: Vec<SequenceReport>,
    /// Means over sequences.
    pub aggregate: Aggregate,
}

/// Aggregate per-sequence reports; the result does not depend on input order.
pub fn build_report(mut sequences: Vec<SequenceReport>, meta: ReportMeta) -> Result<EvalReport> {
    if sequences.is_empty() {
        return Err(Error::invalid("no sequences to report"));
    }
    sequences.sort_by(|a, b| a.name.cmp(&b.name));
    if let Some(w) = sequences.windows(2).find(|w| w[0].name == w[1].name) {
        return Err(Error::data(format!("sequence `{}` appears twice", w[0].name)));
    }
    let n = sequences.len() as f64;
    let mean = |f: fn(&SequenceReport) -> f64| sequences.iter().map(f).sum::<f64>() / n;
    let curves = |f: fn(&SequenceReport) -> &Curve| Curve::mean_of(&sequences.iter().map(f).collect::<Vec<_>>());
    let mut pooled = Scatter::default();
    for s in &sequences {
        pooled.extend(&s.scatter);
    }
    let (pearson, pearson_combined) = pooled.correlations();
    let aggregate = Aggregate {
        sequences: sequences.len(),
        auc: mean(|s| s.auc),
        precision: mean(|s| s.precision),
        norm_precision: mean(|s| s.norm_precision),
        success_curve: curves(|s| &s.success_curve),
        precision_curve: curves(|s| &s.precision_curve),
        norm_precision_curve: curves(|s| &s.norm_precision_curve),
        pearson,
        pearson_combined,
    };
    Ok(EvalReport {
        meta,
        sequences,
        aggregate,
    })
}

/// Write `report.json`, `curves/*.json` and, when asked, `plots/*.png`.
pub fn write_report(dir: &Path, report: &EvalReport, plots: bool) -> Result<()> {
    let curves_dir = dir.join("curves");
    std::fs::create_dir_all(&curves_dir).map_err(|e| Error::io(&curves_dir, e))?;
    write_json(&dir.join("report.json"), report)?;
    let a = &report.aggregate;
    let named = [
        ("success", &a.success_curve),
        ("precision", &a.precision_curve),
        ("norm_precision", &a.norm_precision_curve),
    ];
    for (name, c) in named {
        write_json(&curves_dir.join(format!("{name}.json")), c)?;
    }
    let scatter = serde_json::json!({
        "sequences": report.sequences.iter().map(|s| (&s.name, &s.scatter)).collect::<Vec<_>>(),
    });
    write_json(&curves_dir.join("confidence_iou.json"), &scatter)?;
    if plots {
        let plots_dir = dir.join("plots");
        std::fs::create_dir_all(&plots_dir).map_err(|e| Error::io(&plots_dir, e))?;
        for (name, c) in named {
            render_curves(&plots_dir.join(format!("{name}.png")), &[c])?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 360;
const PLOT_MARGIN: u32 = 30;
const PLOT_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// Render curves on shared axes (y in [0,1]) as a plain PNG line chart.
pub fn render_curves(path: &Path, curves: &[&Curve]) -> Result<()> {
    let mut img = image::RgbImage::from_pixel(PLOT_W, PLOT_H, image::Rgb([255, 255, 255]));
    let (x0, y0) = (PLOT_MARGIN as f64, (PLOT_H - PLOT_MARGIN) as f64);
    let (w, h) = ((PLOT_W - 2 * PLOT_MARGIN) as f64, (PLOT_H - 2 * PLOT_MARGIN) as f64);
    let grey = [160, 160, 160];
    draw_line(&mut img, (x0, y0), (x0 + w, y0), grey);
    draw_line(&mut img, (x0, y0), (x0, y0 - h), grey);
    for (i, c) in curves.iter().enumerate() {
        let (lo, hi) = match (c.thresholds.first(), c.thresholds.last()) {
            (Some(lo), Some(hi)) if hi > lo => (*lo, *hi),
            _ => continue,
        };
        let pts: Vec<(f64, f64)> = c
            .thresholds
            .iter()
            .zip(&c.values)
            .map(|(t, v)| (x0 + w * (t - lo) / (hi - lo), y0 - h * v.clamp(0.0, 1.0)))
            .collect();
        for seg in pts.windows(2) {
            draw_line(&mut img, seg[0], seg[1], PLOT_COLORS[i % PLOT_COLORS.len()]);
        }
    }
    img.save(path).map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).round();
        let y = (a.1 + (b.1 - a.1) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}

/// A sequence held in memory for evaluation.
#[derive(Debug, Clone)]
pub struct EvalSequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub gt: Vec<BBox>,
}

/// The fixed synthetic evaluation suite: `count` sequences drawn from `base`
/// with seeds independent of the base seed.
pub fn synthetic_suite(base: &SyntheticConfig, count: usize) -> Result<Vec<EvalSequence>> {
    (0..count)
        .map(|i| {
            let cfg = SyntheticConfig {
                seed: SUITE_SEED_BASE + i as u64,
                ..base.clone()
            };
            let seq = gen_synthetic_sequence(&cfg)?;
            Ok(EvalSequence {
                name: format!("synth-{i:03}"),
                frames: seq.frames,
                gt: seq.boxes,
            })
        })
        .collect()
}

/// Track every sequence from its first ground-truth box and evaluate.
pub fn evaluate_model(model: &Model, sequences: &[EvalSequence], cfg: &PostProcessConfig) -> Result<EvalReport> {
    let reports = sequences
        .iter()
        .map(|s| {
            let init = *s.gt.first().ok_or_else(|| Error::data(format!("sequence `{}` has no boxes", s.name)))?;
            let run = track(model, s.frames.iter().cloned().map(Ok), init, cfg, false)?;
            evaluate_sequence(&s.name, &run.results, &s.gt)
        })
        .collect::<Result<Vec<_>>>()?;
    build_report(reports, ReportMeta::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window_influence: f64,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    /// `(name, auc)` per sequence, sorted by name.
    pub per_sequence: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `max - min` of the aggregate AUC over the swept values.
    pub fn auc_range(&self) -> f64 {
        let aucs = self.rows.iter().map(|r| r.auc);
        let hi = aucs.clone().fold(f64::NEG_INFINITY, f64::max);
        let lo = aucs.fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn curve(&self) -> Curve {
        Curve {
            thresholds: self.rows.iter().map(|r| r.window_influence).collect(),
            values: self.rows.iter().map(|r| r.auc).collect(),
        }
    }
}

/// Track and score every sequence once per window influence.
pub fn window_sweep(
    model: &Model,
    sequences: &[EvalSequence],
    base: &PostProcessConfig,
    windows: &[f64],
) -> Result<SweepTable> {
    if windows.is_empty() {
        return Err(Error::invalid("window sweep needs at least one value"));
    }
    let rows = windows
        .iter()
        .map(|&w| {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!("window influence {w} outside [0, 1]")));
            }
            let cfg = PostProcessConfig {
                window_influence: w,
                ..base.clone()
            };
            let report = evaluate_model(model, sequences, &cfg)?;
            Ok(SweepRow {
                window_influence: w,
                auc: report.aggregate.auc,
                precision: report.aggregate.precision,
                norm_precision: report.aggregate.norm_precision,
                per_sequence: report.sequences.iter().map(|s| (s.name.clone(), s.auc)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::from_xywh(x, y, w, h).unwrap()
    }

    #[test]
    fn perfect_prediction_auc() {
        let gt = vec![bx(10.0, 10.0, 20.0, 30.0), bx(5.0, 7.0, 11.0, 13.0)];
        let m = success_auc(&gt, &gt).unwrap();
        assert!((m.value - 20.0 / 21.0).abs() < 1e-15);
        assert_eq!(m.curve.values[20], 0.0);
    }

    #[test]
    fn zero_overlap_auc_is_zero() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let pred = vec![bx(50.0, 50.0, 10.0, 10.0)];
        assert_eq!(success_auc(&pred, &gt).unwrap().value, 0.0);
    }

    #[test]
    fn half_overlap_is_a_step() {
        // IoU = 10*10 / (10*20) = 0.5
        let gt = vec![bx(0.0, 0.0, 20.0, 10.0)];
        let pred = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let m = success_auc(&pred, &gt).unwrap();
        for (t, v) in m.curve.thresholds.iter().zip(&m.curve.values) {
            assert_eq!(*v, if *t < 0.5 { 1.0 } else { 0.0 }, "tau {t}");
        }
    }

    #[test]
    fn precision_steps() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0); 3];
        let pred = vec![bx(25.0, 0.0, 10.0, 10.0); 3];
        assert_eq!(precision(&pred, &gt, 20.0).unwrap().value, 0.0);
        assert_eq!(precision(&pred, &gt, 30.0).unwrap().value, 1.0);
        assert_eq!(precision(&gt, &gt, 20.0).unwrap().value, 1.0);
    }

    #[test]
    fn norm_precision_offsets_and_scale() {
        let gt = vec![bx(0.0, 0.0, 40.0, 20.0)];
        let pred = vec![bx(12.0, 6.0, 40.0, 20.0)];
        assert_eq!(norm_precision(&pred, &gt).unwrap().value, 0.0);
        assert_eq!(norm_precision(&gt, &gt).unwrap().value, 1.0);
        let near = vec![bx(4.0, 2.0, 40.0, 20.0)];
        let a = norm_precision(&near, &gt).unwrap();
        let two = |b: &BBox| BBox::new(2.0 * b.x1, 2.0 * b.y1, 2.0 * b.x2, 2.0 * b.y2).unwrap();
        let b = norm_precision(&near.iter().map(two).collect::<Vec<_>>(), &gt.iter().map(two).collect::<Vec<_>>()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let gt = vec![bx(0.0, 0.0, 10.0, 10.0)];
        assert!(matches!(success_auc(&[], &gt), Err(Error::InvalidInput(_))));
        assert!(matches!(precision(&gt, &[], 20.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pearson_limits() {
        let x = [0.1, 0.5, 0.3, 0.9];
        assert!((pearson(&x, &x).unwrap().r.unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!((pearson(&x, &y).unwrap().r.unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 4]).unwrap().undefined());
        assert!(pearson(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
