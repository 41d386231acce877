//! Browser bindings for three explorers: soft-label curves, the region and
//! label map of a ground-truth box, and score combination with the cosine
//! window. Every export returns a JSON string.

use latrack_core::geometry::{iou, BBox, Grid, Point};
use latrack_core::labeling::{assign_regions, build_cls_targets, iou_sigmoid, soft_label, LabelConfig, SampleCategory};
use latrack_core::maps::ScoreMap;
use latrack_core::tracker::{combine_scores, cosine_window, ranked_cells, scale_penalty};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct LabelCurves {
    pub iou: Vec<f64>,
    pub sigmoid: Vec<f64>,
    pub center: Vec<f64>,
    pub boundary: Vec<f64>,
}

pub fn label_curves(alpha: f64, beta: f64, lambda_boundary: f64, samples: usize) -> latrack_core::Result<LabelCurves> {
    let n = samples.max(2);
    let iou: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let center = iou.iter().map(|v| soft_label(*v, 1.0, alpha, beta)).collect::<Result<_, _>>()?;
    let boundary = iou
        .iter()
        .map(|v| soft_label(*v, lambda_boundary, alpha, beta))
        .collect::<Result<_, _>>()?;
    Ok(LabelCurves {
        sigmoid: iou.iter().map(|v| iou_sigmoid(*v, alpha, beta)).collect(),
        iou,
        center,
        boundary,
    })
}

#[derive(Debug, Serialize)]
pub struct LabelMap {
    pub size: usize,
    pub stride: f64,
    pub origin: f64,
    /// 0 center, 1 boundary, 2 negative; row-major.
    pub categories: Vec<u8>,
    /// IoU of each cell's predicted box with the ground truth.
    pub iou: Vec<f64>,
    /// Classification targets after normalization.
    pub labels: Vec<f64>,
}

/// Region split and targets for a box in a `search`-pixel crop. Each cell is
/// assumed to predict a box of the ground-truth size scaled by `pred_scale`,
/// centered on the cell, so IoU falls off with distance from the target.
#[allow(clippy::too_many_arguments)]
pub fn label_map(
    gt: [f64; 4],
    search: usize,
    size: usize,
    stride: f64,
    center_shrink: f64,
    lambda_boundary: f64,
    pred_scale: f64,
    ladl: bool,
    lals: bool,
) -> latrack_core::Result<LabelMap> {
    let grid = Grid::centered(size, stride, search)?;
    let [x, y, w, h] = gt;
    let gt = BBox::from_xywh(x, y, w, h)?;
    let region = assign_regions(&gt, &grid, center_shrink, lambda_boundary)?;
    let decoded: Vec<BBox> = (0..size)
        .flat_map(|i| (0..size).map(move |j| (i, j)))
        .map(|(i, j)| {
            let p: Point = grid.point(i, j);
            BBox::from_center(p.x, p.y, w * pred_scale, h * pred_scale)
        })
        .collect::<Result<_, _>>()?;
    let cfg = LabelConfig {
        center_shrink,
        lambda_boundary,
        ladl,
        lals,
        ..LabelConfig::default()
    };
    let targets = build_cls_targets(&region, &decoded, &gt, &cfg)?;
    Ok(LabelMap {
        size,
        stride,
        origin: grid.origin.x,
        categories: region
            .categories
            .iter()
            .map(|c| match c {
                SampleCategory::CenterPositive => 0,
                SampleCategory::BoundaryPositive => 1,
                SampleCategory::Negative => 2,
            })
            .collect(),
        iou: decoded.iter().map(|d| iou(d, &gt)).collect::<Result<_, _>>()?,
        labels: targets.map.values,
    })
}

#[derive(Debug, Serialize)]
pub struct Combination {
    pub size: usize,
    pub cls: Vec<f64>,
    pub loc: Vec<f64>,
    pub penalty: Vec<f64>,
    pub window: Vec<f64>,
    pub combined: Vec<f64>,
    pub best: usize,
}

fn bump(size: usize, cx: f64, cy: f64, sigma: f64, peak: f64) -> Vec<f64> {
    (0..size * size)
        .map(|k| {
            let (i, j) = ((k / size) as f64, (k % size) as f64);
            peak * (-((i - cy).powi(2) + (j - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// A toy frame: the target sits at the map center, a distractor at
/// `(dx, dy)` cells from it with classification strength `distractor` and
/// boxes `distractor_scale` times the previous size. Both peaks get the same
/// localization quality, so only the penalty and the window separate them.
#[allow(clippy::too_many_arguments)]
pub fn combination(
    size: usize,
    dx: f64,
    dy: f64,
    distractor: f64,
    distractor_scale: f64,
    window_influence: f64,
    penalty_k: f64,
) -> latrack_core::Result<Combination> {
    let size = size.max(3);
    let c = (size - 1) as f64 / 2.0;
    let target = bump(size, c, c, 1.2, 0.8);
    let other = bump(size, c + dx, c + dy, 1.2, distractor);
    let cls: Vec<f64> = target.iter().zip(&other).map(|(a, b)| a.max(*b).max(0.02)).collect();
    let loc: Vec<f64> = bump(size, c, c, 1.5, 0.85)
        .iter()
        .zip(bump(size, c + dx, c + dy, 1.5, 0.85))
        .map(|(a, b)| a.max(b) + 0.1)
        .collect();
    let prev = BBox::from_center(0.0, 0.0, 40.0, 30.0)?;
    let candidates: Vec<BBox> = other
        .iter()
        .zip(&target)
        .map(|(o, t)| {
            let s = if o > t { distractor_scale } else { 1.0 };
            BBox::from_center(0.0, 0.0, 40.0 * s, 30.0 * s.sqrt())
        })
        .collect::<Result<_, _>>()?;
    let penalty = scale_penalty(&prev, &candidates, size, size, penalty_k)?;
    let window = cosine_window(size, size);
    let cls = ScoreMap::from_vec(size, size, cls)?;
    let loc = ScoreMap::from_vec(size, size, loc)?;
    let combined = combine_scores(&cls, &loc, &penalty, &window, window_influence)?;
    let best = ranked_cells(&combined)[0];
    Ok(Combination {
        size,
        cls: cls.data,
        loc: loc.data,
        penalty: penalty.data,
        window: window.data,
        combined: combined.data,
        best,
    })
}

fn to_js<T: Serialize>(r: latrack_core::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = labelCurves)]
pub fn label_curves_js(alpha: f64, beta: f64, lambda_boundary: f64, samples: usize) -> Result<String, JsError> {
    to_js(label_curves(alpha, beta, lambda_boundary, samples))
}

#[wasm_bindgen(js_name = labelMap)]
#[allow(clippy::too_many_arguments)]
pub fn label_map_js(
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    search: usize,
    size: usize,
    stride: f64,
    center_shrink: f64,
    lambda_boundary: f64,
    pred_scale: f64,
    ladl: bool,
    lals: bool,
) -> Result<String, JsError> {
    to_js(label_map(
        [x, y, w, h],
        search,
        size,
        stride,
        center_shrink,
        lambda_boundary,
        pred_scale,
        ladl,
        lals,
    ))
}

#[wasm_bindgen(js_name = combineScores)]
pub fn combination_js(
    size: usize,
    dx: f64,
    dy: f64,
    distractor: f64,
    distractor_scale: f64,
    window_influence: f64,
    penalty_k: f64,
) -> Result<String, JsError> {
    to_js(combination(size, dx, dy, distractor, distractor_scale, window_influence, penalty_k))
}
