//! Localization-aware classification targets and localization-branch samples.
//!
//! Cells are split into center positives, boundary positives and negatives
//! from the ground-truth box. Positive cells get soft labels derived from the
//! IoU between the box their regression output decodes to and the ground
//! truth; boundary cells are additionally shrunk by a `1/lambda` power so a
//! boundary point never outranks a center point with the same IoU.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleCategory {
    CenterPositive,
    BoundaryPositive,
    Negative,
}

impl SampleCategory {
    pub fn is_positive(self) -> bool {
        !matches!(self, SampleCategory::Negative)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub height: usize,
    pub width: usize,
    pub categories: Vec<SampleCategory>,
    /// Smoothing exponent per cell: 1 on center cells, the boundary value on
    /// boundary cells, 0 on negatives (sentinel, never used as an exponent).
    pub lambda: Vec<f64>,
}

impl RegionMap {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn count(&self, cat: SampleCategory) -> usize {
        self.categories.iter().filter(|c| **c == cat).count()
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.categories.iter().map(|c| c.is_positive()).collect()
    }
}

/// Knobs for target construction. `ladl`/`lals` switch the dynamic labels and
/// the boundary smoothing on and off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_boundary: f64,
    pub center_shrink: f64,
    pub ladl: bool,
    pub lals: bool,
    pub normalize: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 10.0,
            lambda_boundary: 0.2,
            center_shrink: 0.5,
            ladl: true,
            lals: true,
            normalize: true,
        }
    }
}

/// Split grid cells into center / boundary / negative regions.
///
/// Center cells are those whose point lies in the ground truth shrunk by
/// `center_shrink` about its center, plus any cell whose stride-sized square
/// contains the ground-truth center (so the center region is never empty for
/// a box that covers its own central cell). Boundary cells are the remaining
/// cells inside the ground truth.
pub fn assign_regions(
    gt: &BBox,
    grid: &Grid,
    center_shrink: f64,
    lambda_boundary: f64,
) -> Result<RegionMap> {
    gt.validate()?;
    if !(gt.area() > 0.0) {
        return Err(Error::invalid("ground truth must have positive area"));
    }
    if !(center_shrink > 0.0 && center_shrink <= 1.0) {
        return Err(Error::invalid(format!("center_shrink {center_shrink} outside (0, 1]")));
    }
    check_lambda(lambda_boundary)?;

    let shrunk = gt.scaled_about_center(center_shrink);
    let c = gt.center();
    let half = grid.stride / 2.0;
    let mut categories = Vec::with_capacity(grid.len());
    let mut lambda = Vec::with_capacity(grid.len());
    for i in 0..grid.height {
        for j in 0..grid.width {
            let p = grid.point(i, j);
            let cat = if !gt.contains(p) {
                SampleCategory::Negative
            } else if shrunk.contains(p) || ((p.x - c.x).abs() <= half && (p.y - c.y).abs() <= half)
            {
                SampleCategory::CenterPositive
            } else {
                SampleCategory::BoundaryPositive
            };
            lambda.push(match cat {
                SampleCategory::CenterPositive => 1.0,
                SampleCategory::BoundaryPositive => lambda_boundary,
                SampleCategory::Negative => 0.0,
            });
            categories.push(cat);
        }
    }
    if categories.iter().all(|c| *c == SampleCategory::Negative) {
        return Err(Error::DegenerateTarget(format!(
            "box {gt:?} covers no grid points"
        )));
    }
    Ok(RegionMap {
        height: grid.height,
        width: grid.width,
        categories,
        lambda,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda {lambda} outside (0, 1]")))
    }
}

/// Increasing logistic map of an IoU, `1 / (1 + exp(-beta (iou - alpha)))`.
pub fn iou_sigmoid(iou: f64, alpha: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-beta * (iou - alpha)).exp())
}

/// Soft label for a positive cell: the logistic IoU map raised to `1/lambda`.
pub fn soft_label(iou: f64, lambda: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::invalid(format!("iou {iou} outside [0, 1]")));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(iou_sigmoid(iou, alpha, beta).powf(1.0 / lambda))
}

/// Per-cell classification targets.
///
/// `mask` marks the positive (soft-labelled) cells; unmasked cells are
/// negatives with target 0. Every cell contributes to the classification
/// loss, the mask only selects which branch of the loss applies.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SoftTargetMap {
    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub map: SoftTargetMap,
    /// The masked values were constant and were all set to 1.
    pub fallback: bool,
}

/// Min-max normalization of the masked cells to span exactly `[0, 1]`.
pub fn normalize_labels(raw: &SoftTargetMap) -> Result<Normalized> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (v, m) in raw.values.iter().zip(&raw.mask) {
        if *m {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if lo > hi {
        return Err(Error::DegenerateTarget("normalization mask is empty".into()));
    }
    let mut map = raw.clone();
    let fallback = hi == lo;
    for (v, m) in map.values.iter_mut().zip(&raw.mask) {
        if *m {
            *v = if fallback { 1.0 } else { (*v - lo) / (hi - lo) };
        } else {
            *v = 0.0;
        }
    }
    Ok(Normalized { map, fallback })
}

/// Classification targets from the region split and the current decoded boxes.
///
/// `decoded` must hold one box per grid cell (row-major). With `ladl` off the
/// targets are binary (boundary cells get `lambda_boundary` if `lals` is on).
/// With `lals` off boundary cells are negatives.
pub fn build_cls_targets(
    region: &RegionMap,
    decoded: &[BBox],
    gt: &BBox,
    cfg: &LabelConfig,
) -> Result<Normalized> {
    if decoded.len() != region.len() {
        return Err(Error::shape(format!(
            "{} decoded boxes for {} cells",
            decoded.len(),
            region.len()
        )));
    }
    gt.validate()?;
    let mut values = vec![0.0; region.len()];
    let mut mask = vec![false; region.len()];
    for (k, cat) in region.categories.iter().enumerate() {
        let lambda = match cat {
            SampleCategory::Negative => continue,
            SampleCategory::BoundaryPositive if !cfg.lals => continue,
            SampleCategory::BoundaryPositive => cfg.lambda_boundary,
            SampleCategory::CenterPositive => 1.0,
        };
        mask[k] = true;
        values[k] = if cfg.ladl {
            decoded[k].validate()?;
            soft_label(iou_unchecked(&decoded[k], gt), lambda, cfg.alpha, cfg.beta)?
        } else {
            lambda
        };
    }
    let raw = SoftTargetMap {
        height: region.height,
        width: region.width,
        values,
        mask,
    };
    if raw.positives() == 0 {
        return Err(Error::DegenerateTarget("no positive cells".into()));
    }
    if cfg.ladl && cfg.normalize {
        normalize_labels(&raw)
    } else {
        Ok(Normalized {
            map: raw,
            fallback: false,
        })
    }
}

/// Training samples for the localization branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LocSampleSet {
    /// Row-major cell indices: positives first, then sampled negatives.
    pub cells: Vec<usize>,
    pub targets: Vec<f64>,
    pub positives: usize,
}

impl LocSampleSet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// All positive cells plus an equal number of uniformly drawn negatives
/// (every negative when fewer exist). Targets are the IoU between each
/// sampled cell's decoded box and the ground truth.
pub fn sample_loc_targets<R: Rng + ?Sized>(
    region: &RegionMap,
    decoded: &[BBox],
    gt: &BBox,
    rng: &mut R,
) -> Result<LocSampleSet> {
    if decoded.len() != region.len() {
        return Err(Error::shape(format!(
            "{} decoded boxes for {} cells",
            decoded.len(),
            region.len()
        )));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (k, cat) in region.categories.iter().enumerate() {
        if cat.is_positive() {
            positives.push(k);
        } else {
            negatives.push(k);
        }
    }
    if positives.is_empty() {
        return Err(Error::DegenerateTarget("no positive cells to sample".into()));
    }
    let take = positives.len().min(negatives.len());
    let mut picked: Vec<usize> = index::sample(rng, negatives.len(), take)
        .into_iter()
        .map(|i| negatives[i])
        .collect();
    picked.sort_unstable();

    let n_pos = positives.len();
    let mut cells = positives;
    cells.extend(picked);
    let targets = cells
        .iter()
        .map(|&k| iou_unchecked(&decoded[k], gt))
        .collect();
    Ok(LocSampleSet {
        cells,
        targets,
        positives: n_pos,
    })
}
