//! Frame-to-frame inference: crops, score combination, box selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{batch_tensor, crop, CropTransform, Frame, Patch};
use crate::geometry::{decode_unchecked, BBox};
use crate::maps::ScoreMap;
use crate::model::{HeadOutputs, Model};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostProcessConfig {
    /// Blend weight of the cosine window.
    pub window_influence: f64,
    /// Strength of the scale-change penalty.
    pub penalty_k: f64,
    /// Number of best candidates averaged into the output box.
    pub top_n: usize,
    /// Context added around the target, as a fraction of `w + h`.
    pub context: f64,
    /// Smoothed size update; 0 disables it and the selected box size is used directly.
    pub size_lr: f64,
    /// Minimum side of a reported box in pixels.
    pub min_size: f64,
}

impl Default for PostProcessConfig {
    fn default() -> Self {
        Self {
            window_influence: 0.40,
            penalty_k: 0.04,
            top_n: 3,
            context: 0.5,
            size_lr: 0.0,
            min_size: 4.0,
        }
    }
}

impl PostProcessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.window_influence) {
            return Err(Error::Config(format!(
                "window_influence {} outside [0, 1]",
                self.window_influence
            )));
        }
        if !(self.penalty_k > 0.0) {
            return Err(Error::Config(format!("penalty_k {} must be positive", self.penalty_k)));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        if !(self.context >= 0.0) || !(0.0..=1.0).contains(&self.size_lr) || !(self.min_size > 0.0) {
            return Err(Error::Config(
                "context must be >= 0, size_lr in [0, 1], min_size > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Side of the context-padded square around a box: `sqrt((w + p)(h + p))`
/// with `p = context * (w + h)`.
pub fn context_side(b: &BBox, context: f64) -> f64 {
    let (w, h) = (b.width(), b.height());
    let p = context * (w + h);
    ((w + p) * (h + p)).sqrt()
}

fn check_on_frame(frame: &Frame, b: &BBox) -> Result<()> {
    b.validate()?;
    let f = frame.bounds();
    if b.x2 < f.x1 || b.y2 < f.y1 || b.x1 > f.x2 || b.y1 > f.y2 {
        return Err(Error::invalid(format!("box {b:?} lies outside the frame")));
    }
    Ok(())
}

/// Template crop centered on `b`, resized to `size` pixels.
pub fn crop_template(frame: &Frame, b: &BBox, size: usize, context: f64) -> Result<(Patch, CropTransform)> {
    check_on_frame(frame, b)?;
    let side = context_side(b, context).max(1.0);
    let t = CropTransform::new(b.center(), side, size)?;
    Ok((crop(frame, &t, frame.mean_color()), t))
}

/// Search crop around the previous box: the template context square scaled
/// by `search_size / template_size`. `CropTransform::scale` maps crop pixels
/// back to frame pixels.
pub fn crop_search(
    frame: &Frame,
    prev: &BBox,
    template_size: usize,
    search_size: usize,
    context: f64,
) -> Result<(Patch, CropTransform)> {
    check_on_frame(frame, prev)?;
    let side = context_side(prev, context).max(1.0) * search_size as f64 / template_size as f64;
    let t = CropTransform::new(prev.center(), side, search_size)?;
    Ok((crop(frame, &t, frame.mean_color()), t))
}

/// Penalty for one candidate: `exp(-k (max(r/r', r'/r) * max(s/s', s'/s) - 1))`
/// with `r` the aspect ratio and `s` the context-padded size. Sides are
/// clamped to at least one pixel.
pub fn penalty_value(prev: &BBox, cand: &BBox, k: f64) -> f64 {
    let dims = |b: &BBox| (b.width().max(1.0), b.height().max(1.0));
    let (pw, ph) = dims(prev);
    let (cw, ch) = dims(cand);
    let padded = |w: f64, h: f64| {
        let p = (w + h) / 2.0;
        ((w + p) * (h + p)).sqrt()
    };
    let change = |a: f64, b: f64| (a / b).max(b / a);
    let r = change(ph / pw, ch / cw);
    let s = change(padded(pw, ph), padded(cw, ch));
    (-k * (r * s - 1.0)).exp()
}

pub fn scale_penalty(prev: &BBox, candidates: &[BBox], height: usize, width: usize, k: f64) -> Result<ScoreMap> {
    if candidates.len() != height * width {
        return Err(Error::shape(format!(
            "{} candidates for a {height}x{width} map",
            candidates.len()
        )));
    }
    ScoreMap::from_vec(
        height,
        width,
        candidates.iter().map(|c| penalty_value(prev, c, k)).collect(),
    )
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Outer product of Hann windows.
pub fn cosine_window(height: usize, width: usize) -> ScoreMap {
    let (hy, hx) = (hann(height), hann(width));
    let data = hy.iter().flat_map(|a| hx.iter().map(move |b| a * b)).collect();
    ScoreMap {
        height,
        width,
        data,
    }
}

/// `(1 - w) * cls * loc * penalty + w * window`.
pub fn combine_scores(
    cls: &ScoreMap,
    loc: &ScoreMap,
    penalty: &ScoreMap,
    window: &ScoreMap,
    w: f64,
) -> Result<ScoreMap> {
    for m in [loc, penalty, window] {
        cls.check_shape(m, "score maps")?;
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("window influence {w} outside [0, 1]")));
    }
    let data = (0..cls.len())
        .map(|k| (1.0 - w) * cls.data[k] * loc.data[k] * penalty.data[k] + w * window.data[k])
        .collect();
    Ok(ScoreMap {
        height: cls.height,
        width: cls.width,
        data,
    })
}

/// Cells ordered by descending score; equal scores keep row-major order.
pub fn ranked_cells(s: &ScoreMap) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.data[b].total_cmp(&s.data[a]).then(a.cmp(&b)));
    idx
}

/// Coordinate-wise mean of the `top_n` best candidates, and their cells.
pub fn select_box(s: &ScoreMap, candidates: &[BBox], top_n: usize) -> Result<(BBox, Vec<usize>)> {
    if candidates.len() != s.len() {
        return Err(Error::shape(format!(
            "{} candidates for {} scores",
            candidates.len(),
            s.len()
        )));
    }
    if top_n == 0 || s.is_empty() {
        return Err(Error::invalid("top_n must be at least 1 on a non-empty map"));
    }
    let cells: Vec<usize> = ranked_cells(s).into_iter().take(top_n).collect();
    let n = cells.len() as f64;
    let mut acc = [0.0; 4];
    for &c in &cells {
        let b = &candidates[c];
        acc[0] += b.x1;
        acc[1] += b.y1;
        acc[2] += b.x2;
        acc[3] += b.y2;
    }
    Ok((
        BBox {
            x1: acc[0] / n,
            y1: acc[1] / n,
            x2: acc[2] / n,
            y2: acc[3] / n,
        },
        cells,
    ))
}

/// Score maps of one frame, for visualization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMaps {
    pub cls: ScoreMap,
    pub loc: ScoreMap,
    pub combined: ScoreMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    /// `[x, y, w, h]` in frame pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Best combined score.
    pub score: f64,
    /// Raw classification score at the best cell.
    pub cls: f64,
    /// Raw localization score at the best cell.
    pub loc: f64,
}

impl FrameResult {
    pub fn bbox(&self) -> Result<BBox> {
        let [x, y, w, h] = self.bbox;
        BBox::from_xywh(x, y, w, h)
    }

    /// The pre-window target confidence `cls * loc`.
    pub fn confidence(&self) -> f64 {
        self.cls * self.loc
    }
}

/// State carried between frames.
#[derive(Debug, Clone)]
pub struct TrackerState {
    pub template_features: Tensor,
    pub prev_box: BBox,
    pub config: PostProcessConfig,
    pub window: ScoreMap,
}

pub struct Tracker<'m> {
    model: &'m Model,
    state: TrackerState,
    frames_seen: usize,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, first: &Frame, init: BBox, config: PostProcessConfig) -> Result<Self> {
        config.validate()?;
        let mc = model.config();
        let (patch, _) = crop_template(first, &init, mc.template_size, config.context)?;
        let template_features = model.template_features(&batch_tensor(&[&patch])?)?;
        let grid = model.grid();
        Ok(Self {
            model,
            state: TrackerState {
                template_features,
                prev_box: init,
                window: cosine_window(grid.height, grid.width),
                config,
            },
            frames_seen: 1,
        })
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    /// Track one frame; the returned result's box becomes the new previous box.
    pub fn step(&mut self, frame: &Frame) -> Result<(FrameResult, FrameMaps)> {
        let mc = self.model.config();
        let cfg = &self.state.config;
        let prev = self.state.prev_box;
        let (patch, t) = crop_search(frame, &prev, mc.template_size, mc.search_size, cfg.context)?;
        let out = self
            .model
            .infer(&self.state.template_features, &batch_tensor(&[&patch])?)?
            .pop()
            .expect("one sample");
        let HeadOutputs { cls, reg, loc } = out;
        let grid = self.model.grid();
        let candidates: Vec<BBox> = reg
            .data
            .iter()
            .enumerate()
            .map(|(k, o)| t.box_to_frame(&decode_unchecked(grid.point(k / grid.width, k % grid.width), *o)))
            .collect();
        let penalty = scale_penalty(&prev, &candidates, grid.height, grid.width, cfg.penalty_k)?;
        let combined = combine_scores(&cls, &loc, &penalty, &self.state.window, cfg.window_influence)?;
        let (mut b, cells) = select_box(&combined, &candidates, cfg.top_n)?;
        let best = cells[0];
        if cfg.size_lr > 0.0 {
            let lr = penalty.data[best] * cls.data[best] * loc.data[best] * cfg.size_lr;
            let c = b.center();
            let w = prev.width() * (1.0 - lr) + b.width() * lr;
            let h = prev.height() * (1.0 - lr) + b.height() * lr;
            b = BBox::from_center(c.x, c.y, w, h)?;
        }
        let b = clamp_to_frame(&b, frame, cfg.min_size);
        let result = FrameResult {
            frame: self.frames_seen,
            bbox: b.to_xywh(),
            score: combined.data[best],
            cls: cls.data[best],
            loc: loc.data[best],
        };
        self.frames_seen += 1;
        self.state.prev_box = b;
        Ok((result, FrameMaps { cls, loc, combined }))
    }
}

/// Keep the center inside the frame and the size within `[min_size, frame size]`.
fn clamp_to_frame(b: &BBox, frame: &Frame, min_size: f64) -> BBox {
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    let c = b.center();
    let cx = c.x.clamp(0.0, fw - 1.0);
    let cy = c.y.clamp(0.0, fh - 1.0);
    let w = b.width().clamp(min_size.min(fw), fw);
    let h = b.height().clamp(min_size.min(fh), fh);
    BBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

/// Result record for the initialization frame.
pub fn initial_result(init: &BBox) -> FrameResult {
    FrameResult {
        frame: 0,
        bbox: init.to_xywh(),
        score: 1.0,
        cls: 1.0,
        loc: 1.0,
    }
}

/// Output of a full sequence run.
#[derive(Debug, Clone, Default)]
pub struct TrackRun {
    pub results: Vec<FrameResult>,
    pub maps: Vec<FrameMaps>,
    /// Set when a frame could not be read; `results` then holds the frames
    /// processed before it.
    pub error: Option<String>,
}

/// One-pass tracking: the first frame initializes, every later frame is
/// tracked from the previous output. Map dumps are kept when `keep_maps`.
pub fn track<I>(model: &Model, frames: I, init: BBox, config: &PostProcessConfig, keep_maps: bool) -> Result<TrackRun>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut frames = frames.into_iter();
    let first = frames
        .next()
        .ok_or_else(|| Error::invalid("sequence has no frames"))??;
    let mut tracker = Tracker::new(model, &first, init, config.clone())?;
    let mut run = TrackRun {
        results: vec![initial_result(&init)],
        ..TrackRun::default()
    };
    for frame in frames {
        let frame = match frame {
            Ok(f) => f,
            Err(e) => {
                run.error = Some(e.to_string());
                return Ok(run);
            }
        };
        let (r, maps) = tracker.step(&frame)?;
        run.results.push(r);
        if keep_maps {
            run.maps.push(maps);
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn penalty_is_one_for_unchanged_box() {
        let b = bx(10.0, 20.0, 50.0, 45.0);
        assert_eq!(penalty_value(&b, &b, 0.04), 1.0);
    }

    #[test]
    fn penalty_for_doubled_box() {
        let a = bx(0.0, 0.0, 20.0, 10.0);
        let b = bx(0.0, 0.0, 40.0, 20.0);
        // aspect unchanged, padded size doubles
        let expected = (-0.04f64 * (2.0 - 1.0)).exp();
        assert!((penalty_value(&a, &b, 0.04) - expected).abs() < 1e-15);
        assert_eq!(penalty_value(&a, &b, 0.04), penalty_value(&b, &a, 0.04));
    }

    #[test]
    fn window_peaks_at_center() {
        let w = cosine_window(5, 5);
        assert_eq!(w.get(2, 2), 1.0);
        assert_eq!(w.get(0, 3), 0.0);
        assert!(w.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn combine_limits() {
        let cls = ScoreMap::from_vec(1, 3, vec![0.2, 0.5, 0.9]).unwrap();
        let loc = ScoreMap::from_vec(1, 3, vec![0.3, 0.4, 0.1]).unwrap();
        let pen = ScoreMap::from_vec(1, 3, vec![1.0, 0.9, 0.8]).unwrap();
        let win = ScoreMap::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let s0 = combine_scores(&cls, &loc, &pen, &win, 0.0).unwrap();
        assert_eq!(s0.data, vec![0.2 * 0.3 * 1.0, 0.5 * 0.4 * 0.9, 0.9 * 0.1 * 0.8]);
        let s1 = combine_scores(&cls, &loc, &pen, &win, 1.0).unwrap();
        assert_eq!(s1.data, win.data);
    }

    #[test]
    fn select_breaks_ties_row_major() {
        let s = ScoreMap::from_vec(2, 2, vec![0.5, 0.9, 0.9, 0.1]).unwrap();
        let c: Vec<BBox> = (0..4).map(|k| bx(k as f64, 0.0, k as f64 + 1.0, 1.0)).collect();
        let (b, cells) = select_box(&s, &c, 1).unwrap();
        assert_eq!(cells, vec![1]);
        assert_eq!(b, c[1]);
        let (b, cells) = select_box(&s, &c, 3).unwrap();
        assert_eq!(cells, vec![1, 2, 0]);
        assert!((b.x1 - 1.0).abs() < 1e-15);
    }
}
