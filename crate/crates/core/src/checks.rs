//! Gradient verification suite over every loss and the full training
//! objective through a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::{BBox, Grid, Offsets};
use crate::gradcheck::{compare_with_finite_differences, grad_check, GradCheckReport};
use crate::labeling::{assign_regions, build_cls_targets, sample_loc_targets, LabelConfig};
use crate::losses::{centerness_loss, cls_loss, gt_offsets, iou_loss_offsets, loc_loss, ClsLossKind};
use crate::maps::{OffsetMap, ScoreMap};
use crate::model::{LocHead, Model, STRIDE};
use crate::nn::{Graph, Mode};
use crate::training::{make_batch, objective};

pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const LOSS_STEP: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const MODEL_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    pub report: GradCheckReport,
}

/// Two-channel, 47/95 crop configuration with a 7x7 score map.
pub fn gradcheck_config(loc_head: LocHead, soft_labels: bool) -> RunConfig {
    let mut run = RunConfig::default();
    run.model.template_size = 47;
    run.model.search_size = 95;
    run.model.channels = 2;
    run.model.template_feature_size = 0;
    run.model.tower_depth = 1;
    run.model.init_offset = 12.0;
    run.model.loc_head = loc_head;
    let lafa = loc_head == LocHead::Lafa;
    run.model.nonlocal = lafa;
    run.model.aggregate = lafa;
    run.train.batch_size = 2;
    run.train.labels.ladl = soft_labels;
    run.train.labels.lals = soft_labels;
    run.synth.min_size = 20.0;
    run.synth.max_size = 32.0;
    run
}

struct LossCase {
    grid: Grid,
    gt: BBox,
    decoded: Vec<BBox>,
    offsets: Vec<f64>,
    scores: Vec<f64>,
}

fn loss_case(rng: &mut ChaCha8Rng) -> Result<LossCase> {
    let grid = Grid::centered(9, STRIDE as f64, 127)?;
    let c = 63.0 + rng.random_range(-6.0..6.0);
    let (w, h) = (rng.random_range(30.0..60.0), rng.random_range(30.0..60.0));
    let gt = BBox::from_center(c, 63.0 + rng.random_range(-6.0..6.0), w, h)?;
    let offsets: Vec<f64> = (0..4 * grid.len()).map(|_| rng.random_range(4.0..36.0)).collect();
    let decoded = offset_map(&grid, &offsets).decode(&grid)?;
    let scores = (0..grid.len()).map(|_| rng.random_range(0.05..0.95)).collect();
    Ok(LossCase {
        grid,
        gt,
        decoded,
        offsets,
        scores,
    })
}

fn offset_map(grid: &Grid, v: &[f64]) -> OffsetMap {
    let data = v.chunks(4).map(|c| Offsets::new(c[0], c[1], c[2], c[3])).collect();
    OffsetMap::from_vec(grid.height, grid.width, data).expect("sized to the grid")
}

fn score_map(grid: &Grid, v: &[f64]) -> ScoreMap {
    ScoreMap::from_vec(grid.height, grid.width, v.to_vec()).expect("sized to the grid")
}

/// Checks of the classification, regression and localization losses at
/// random interior inputs.
pub fn loss_checks(seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = loss_case(&mut rng)?;
    let labels = LabelConfig::default();
    let region = assign_regions(&case.gt, &case.grid, labels.center_shrink, labels.lambda_boundary)?;
    let soft = build_cls_targets(&region, &case.decoded, &case.gt, &labels)?.map;
    let binary = build_cls_targets(
        &region,
        &case.decoded,
        &case.gt,
        &LabelConfig {
            ladl: false,
            lals: false,
            ..labels
        },
    )?
    .map;
    let samples = sample_loc_targets(&region, &case.decoded, &case.gt, &mut rng)?;
    let mask = region.positive_mask();
    let (gt_offs, inside) = gt_offsets(&case.grid, &case.gt);
    let grid = &case.grid;

    let mut rows = Vec::new();
    let mut push = |name: &str, report| {
        rows.push(GradRow {
            name: name.to_string(),
            report,
        })
    };
    for (name, targets, kind) in [
        ("cls_loss.soft", &soft, ClsLossKind::Ladl),
        ("cls_loss.binary", &binary, ClsLossKind::CrossEntropy),
    ] {
        let r = grad_check(
            |v| {
                let e = cls_loss(&score_map(grid, v), targets, kind).expect("valid shapes");
                (e.value, e.grad)
            },
            &case.scores,
            LOSS_STEP,
            LOSS_TOLERANCE,
        );
        push(name, r);
    }
    let r = grad_check(
        |v| {
            let e = iou_loss_offsets(grid, &offset_map(grid, v), &case.gt, &mask).expect("valid shapes");
            (e.value, e.grad)
        },
        &case.offsets,
        LOSS_STEP,
        LOSS_TOLERANCE,
    );
    push("iou_loss", r);
    let r = grad_check(
        |v| {
            let e = loc_loss(&score_map(grid, v), &samples).expect("valid shapes");
            (e.value, e.grad)
        },
        &case.scores,
        LOSS_STEP,
        LOSS_TOLERANCE,
    );
    push("loc_loss", r);
    let r = grad_check(
        |v| {
            let e = centerness_loss(&score_map(grid, v), &gt_offs, &inside).expect("valid shapes");
            (e.value, e.grad)
        },
        &case.scores,
        LOSS_STEP,
        LOSS_TOLERANCE,
    );
    push("centerness_loss", r);
    Ok(rows)
}

/// Gradient of the total objective with respect to every parameter.
///
/// Parameters are jittered away from their zero initializations, the
/// targets and gather positions are frozen after the first evaluation and
/// batch norm runs in training mode.
pub fn model_check(run: &RunConfig, seed: u64) -> Result<GradCheckReport> {
    run.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(run.model.clone(), &mut rng)?;
    for p in model.store_mut().params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let batch = make_batch(run, seed as usize)?;
    let cfg = run.train.objective();
    let (analytic, detached) = {
        let mut g = Graph::new(model.store(), Mode::Train);
        let obj = objective(&model, &mut g, &batch, &cfg, None, &mut rng)?;
        let grads = g.backward(obj.total);
        (grads.flatten_params(model.store()), obj.detached)
    };
    let flat = model.store().flatten();
    let mut err = None;
    let report = compare_with_finite_differences(
        |x| {
            model.store_mut().load_flat(x);
            let mut g = Graph::new(model.store(), Mode::Train);
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            match objective(&model, &mut g, &batch, &cfg, Some(&detached), &mut unused) {
                Ok(o) => o.breakdown.total,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat,
        &analytic,
        MODEL_STEP,
        MODEL_TOLERANCE,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Every loss check plus the end-to-end objective for the full and the
/// baseline head.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradRow>> {
    let mut rows = loss_checks(seed)?;
    for (name, head, soft) in [
        ("objective.lafa", LocHead::Lafa, true),
        ("objective.centerness", LocHead::Centerness, false),
    ] {
        rows.push(GradRow {
            name: name.to_string(),
            report: model_check(&gradcheck_config(head, soft), seed)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_rows_pass() {
        for row in loss_checks(11).unwrap() {
            assert!(row.report.passed, "{}: {:?}", row.name, row.report);
        }
    }
}
