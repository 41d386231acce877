//! Training objectives with analytic gradients.
//!
//! Every loss returns a [`LossEval`] holding the scalar value and its gradient
//! with respect to the loss inputs (post-sigmoid scores or raw offsets). The
//! model's autograd tape consumes these gradients directly, and the
//! [`crate::gradcheck`] harness verifies them against central differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_unchecked, iou_unchecked, iou_with_grad, BBox, Grid, Offsets};
use crate::labeling::{LocSampleSet, SoftTargetMap};
use crate::maps::{OffsetMap, ScoreMap};

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;
/// IoU floor inside `-ln(iou)`.
pub const IOU_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Gradient with respect to the loss inputs, same layout as the input.
    pub grad: Vec<f64>,
    /// Number of inputs that hit a clamp (their gradient is zero).
    pub clamped: usize,
    /// Number of terms averaged.
    pub count: usize,
}

fn clamp_score(c: f64) -> (f64, bool) {
    if c < SCORE_EPS {
        (SCORE_EPS, true)
    } else if c > 1.0 - SCORE_EPS {
        (1.0 - SCORE_EPS, true)
    } else {
        (c, false)
    }
}

/// Soft-target binary cross-entropy and its derivative in `c`.
pub fn soft_bce(c: f64, t: f64) -> (f64, f64) {
    let v = -(t * c.ln() + (1.0 - t) * (1.0 - c).ln());
    let d = -t / c + (1.0 - t) / (1.0 - c);
    (v, d)
}

/// Negative-cell term `-(1 + c) ln(1 - c)`: plain `-ln(1 - c)` scaled by `1 + c`
/// so confidently wrong negatives weigh more.
pub fn reweighted_negative(c: f64) -> (f64, f64) {
    let l = (1.0 - c).ln();
    (-(1.0 + c) * l, -l + (1.0 + c) / (1.0 - c))
}

/// Which classification objective to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClsLossKind {
    /// Soft-target cross-entropy on positives, score-reweighted negatives.
    Ladl,
    /// Plain cross-entropy on both branches.
    CrossEntropy,
}

/// Classification loss averaged over every cell.
#[allow(clippy::needless_range_loop)]
pub fn cls_loss(scores: &ScoreMap, targets: &SoftTargetMap, kind: ClsLossKind) -> Result<LossEval> {
    if scores.height != targets.height || scores.width != targets.width {
        return Err(Error::shape(format!(
            "scores {}x{} vs targets {}x{}",
            scores.height, scores.width, targets.height, targets.width
        )));
    }
    let n = scores.len();
    if n == 0 {
        return Err(Error::DegenerateTarget("empty score map".into()));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    let mut clamped = 0;
    for k in 0..n {
        let (c, hit) = clamp_score(scores.data[k]);
        let (v, d) = if targets.mask[k] {
            soft_bce(c, targets.values[k])
        } else {
            match kind {
                ClsLossKind::Ladl => reweighted_negative(c),
                ClsLossKind::CrossEntropy => soft_bce(c, 0.0),
            }
        };
        value += v;
        if hit {
            clamped += 1;
        } else {
            grad[k] = d / n as f64;
        }
    }
    Ok(LossEval {
        value: value / n as f64,
        grad,
        clamped,
        count: n,
    })
}

pub fn ladl_loss(scores: &ScoreMap, targets: &SoftTargetMap) -> Result<LossEval> {
    cls_loss(scores, targets, ClsLossKind::Ladl)
}

/// Mean `-ln(max(iou, IOU_EPS))` over masked boxes.
pub fn iou_loss(decoded: &[BBox], gt: &BBox, positive_mask: &[bool]) -> Result<f64> {
    if decoded.len() != positive_mask.len() {
        return Err(Error::shape("decoded boxes and mask differ in length"));
    }
    gt.validate()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (b, m) in decoded.iter().zip(positive_mask) {
        if *m {
            b.validate()?;
            sum += -iou_unchecked(b, gt).max(IOU_EPS).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateTarget("iou loss with empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// IoU loss as a function of the raw offset map; gradient layout is
/// `[cell * 4 + {l, t, r, b}]`.
pub fn iou_loss_offsets(
    grid: &Grid,
    offsets: &OffsetMap,
    gt: &BBox,
    positive_mask: &[bool],
) -> Result<LossEval> {
    if offsets.data.len() != positive_mask.len() || grid.len() != positive_mask.len() {
        return Err(Error::shape("grid, offsets and mask differ in size"));
    }
    gt.validate()?;
    let count = positive_mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::DegenerateTarget("iou loss with empty mask".into()));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; positive_mask.len() * 4];
    let mut clamped = 0;
    for (k, m) in positive_mask.iter().enumerate() {
        if !*m {
            continue;
        }
        let o = offsets.data[k];
        let b = decode_unchecked(grid.point(k / grid.width, k % grid.width), o);
        let (u, du) = iou_with_grad(&b, gt);
        if u < IOU_EPS {
            value -= IOU_EPS.ln();
            clamped += 1;
            continue;
        }
        value -= u.ln();
        // x1 = px - l, y1 = py - t, x2 = px + r, y2 = py + b
        let scale = -1.0 / (u * count as f64);
        grad[k * 4] = -du[0] * scale;
        grad[k * 4 + 1] = -du[1] * scale;
        grad[k * 4 + 2] = du[2] * scale;
        grad[k * 4 + 3] = du[3] * scale;
    }
    Ok(LossEval {
        value: value / count as f64,
        grad,
        clamped,
        count,
    })
}

/// Mean soft-target BCE over the sampled cells, target = sampled IoU.
pub fn loc_loss(scores: &ScoreMap, samples: &LocSampleSet) -> Result<LossEval> {
    if samples.is_empty() {
        return Err(Error::DegenerateTarget("no localization samples".into()));
    }
    let n = samples.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; scores.len()];
    let mut clamped = 0;
    for (&k, &t) in samples.cells.iter().zip(&samples.targets) {
        if k >= scores.len() {
            return Err(Error::shape(format!("sample cell {k} outside score map")));
        }
        let (c, hit) = clamp_score(scores.data[k]);
        let (v, d) = soft_bce(c, t);
        value += v;
        if hit {
            clamped += 1;
        } else {
            grad[k] += d / n;
        }
    }
    Ok(LossEval {
        value: value / n,
        grad,
        clamped,
        count: samples.len(),
    })
}

/// Center-ness of a point given its distances to the box sides.
pub fn centerness(o: Offsets) -> f64 {
    let ratio = |a: f64, b: f64| {
        let hi = a.max(b);
        if hi <= 0.0 {
            0.0
        } else {
            a.min(b) / hi
        }
    };
    (ratio(o.l, o.r) * ratio(o.t, o.b)).sqrt()
}

/// Ground-truth offsets for every grid point inside `gt` (zeros elsewhere)
/// and the matching inside-mask.
pub fn gt_offsets(grid: &Grid, gt: &BBox) -> (OffsetMap, Vec<bool>) {
    let mut data = Vec::with_capacity(grid.len());
    let mut mask = Vec::with_capacity(grid.len());
    for i in 0..grid.height {
        for j in 0..grid.width {
            let p = grid.point(i, j);
            if gt.contains(p) {
                data.push(Offsets::new(p.x - gt.x1, p.y - gt.y1, gt.x2 - p.x, gt.y2 - p.y));
                mask.push(true);
            } else {
                data.push(Offsets::default());
                mask.push(false);
            }
        }
    }
    (
        OffsetMap {
            height: grid.height,
            width: grid.width,
            data,
        },
        mask,
    )
}

/// Baseline center-ness objective: BCE against the center-ness of the
/// ground-truth offsets on positive cells.
pub fn centerness_loss(
    scores: &ScoreMap,
    offsets: &OffsetMap,
    positive_mask: &[bool],
) -> Result<LossEval> {
    if scores.len() != offsets.data.len() || scores.len() != positive_mask.len() {
        return Err(Error::shape("scores, offsets and mask differ in size"));
    }
    let count = positive_mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::DegenerateTarget("center-ness loss with empty mask".into()));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; scores.len()];
    let mut clamped = 0;
    for k in 0..scores.len() {
        if !positive_mask[k] {
            continue;
        }
        let (c, hit) = clamp_score(scores.data[k]);
        let (v, d) = soft_bce(c, centerness(offsets.data[k]));
        value += v;
        if hit {
            clamped += 1;
        } else {
            grad[k] = d / count as f64;
        }
    }
    Ok(LossEval {
        value: value / count as f64,
        grad,
        clamped,
        count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCounts {
    pub cls: usize,
    pub reg: usize,
    pub loc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub loc: f64,
    pub total: f64,
    pub counts: LossCounts,
}

/// `cls + reg_weight * reg + loc_weight * loc`.
pub fn total_loss(
    cls: f64,
    reg: f64,
    loc: f64,
    reg_weight: f64,
    loc_weight: f64,
    counts: LossCounts,
) -> Result<LossBreakdown> {
    for (name, v) in [("cls", cls), ("reg", reg), ("loc", loc)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is {v}")));
        }
        if v < 0.0 {
            return Err(Error::invalid(format!("{name} loss is negative ({v})")));
        }
    }
    let total = cls + reg_weight * reg + loc_weight * loc;
    if !total.is_finite() {
        return Err(Error::Numerical(format!("total loss is {total}")));
    }
    Ok(LossBreakdown {
        cls,
        reg,
        loc,
        total,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::gradcheck::grad_check;
    use crate::labeling::{LocSampleSet, SoftTargetMap};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_cell(mask: bool, target: f64) -> SoftTargetMap {
        SoftTargetMap {
            height: 1,
            width: 1,
            values: vec![target],
            mask: vec![mask],
        }
    }

    fn score(c: f64) -> ScoreMap {
        ScoreMap::filled(1, 1, c)
    }

    #[test]
    fn ladl_examples() {
        let v = ladl_loss(&score(1.0 - 1e-12), &one_cell(true, 1.0)).unwrap();
        assert!(v.value < 1e-6);
        assert_eq!(v.clamped, 1);
        let v = ladl_loss(&score(0.5), &one_cell(false, 0.0)).unwrap();
        assert!((v.value - 1.039_720_770_839_917_9).abs() < 1e-12);
        let v = ladl_loss(&score(0.9), &one_cell(false, 0.0)).unwrap();
        assert!((v.value - 4.374_911_676_688_686).abs() < 1e-12);
    }

    #[test]
    fn negative_reweighting_identity() {
        for c in [0.01, 0.2, 0.5, 0.77, 0.99] {
            let (v, _) = reweighted_negative(c);
            let (plain, _) = soft_bce(c, 0.0);
            assert!((v - (1.0 + c) * plain).abs() <= 1e-15 * v.abs().max(1.0));
        }
    }

    #[test]
    fn iou_loss_examples() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou_loss(&[gt, gt], &gt, &[true, false]).unwrap(), 0.0);
        // inner box with area ratio e^-1 has IoU e^-1
        let s = (-1.0f64).exp().sqrt();
        let inner = gt.scaled_about_center(s);
        let v = iou_loss(&[inner], &gt, &[true]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0).unwrap();
        let v = iou_loss(&[far], &gt, &[true]).unwrap();
        assert_eq!(v, -IOU_EPS.ln());
        assert!(matches!(
            iou_loss(&[gt], &gt, &[false]),
            Err(Error::DegenerateTarget(_))
        ));
    }

    #[test]
    fn loc_loss_examples() {
        let s = |t: f64| LocSampleSet {
            cells: vec![0],
            targets: vec![t],
            positives: 1,
        };
        let ln2 = std::f64::consts::LN_2;
        assert!((loc_loss(&score(0.5), &s(0.0)).unwrap().value - ln2).abs() < 1e-15);
        assert!((loc_loss(&score(0.5), &s(1.0)).unwrap().value - ln2).abs() < 1e-15);
        let t: f64 = 0.3;
        let h = -(t * t.ln() + (1.0 - t) * (1.0 - t).ln());
        assert!((loc_loss(&score(t), &s(t)).unwrap().value - h).abs() < 1e-15);
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness(Offsets::new(3.0, 2.0, 3.0, 2.0)), 1.0);
        assert_eq!(centerness(Offsets::new(0.0, 2.0, 3.0, 2.0)), 0.0);
        assert!((centerness(Offsets::new(1.0, 2.0, 4.0, 2.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let c = LossCounts::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, 1.0, 1.0, c).unwrap().total, 6.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.0, 0.0, c).unwrap().total, 1.0);
        assert!(matches!(
            total_loss(f64::NAN, 2.0, 3.0, 1.0, 1.0, c),
            Err(Error::Numerical(_))
        ));
    }

    fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> SoftTargetMap {
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let values = mask
            .iter()
            .map(|m| if *m { rng.random_range(0.0..1.0) } else { 0.0 })
            .collect();
        SoftTargetMap {
            height: 5,
            width: n / 5,
            values,
            mask,
        }
    }

    #[test]
    fn cls_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let targets = random_targets(&mut rng, 25);
        let x: Vec<f64> = (0..25).map(|_| rng.random_range(0.05..0.95)).collect();
        for kind in [ClsLossKind::Ladl, ClsLossKind::CrossEntropy] {
            let report = grad_check(
                |v: &[f64]| {
                    let e = cls_loss(&ScoreMap::from_vec(5, 5, v.to_vec()).unwrap(), &targets, kind)
                        .unwrap();
                    (e.value, e.grad)
                },
                &x,
                1e-5,
                1e-4,
            );
            assert!(report.passed, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn loc_and_centerness_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..25).map(|_| rng.random_range(0.05..0.95)).collect();
        let samples = LocSampleSet {
            cells: vec![0, 3, 7, 8, 19, 24],
            targets: (0..6).map(|_| rng.random_range(0.0..1.0)).collect(),
            positives: 3,
        };
        let r = grad_check(
            |v: &[f64]| {
                let e = loc_loss(&ScoreMap::from_vec(5, 5, v.to_vec()).unwrap(), &samples).unwrap();
                (e.value, e.grad)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(r.passed, "{r:?}");

        let grid = Grid::new(5, 5, 8.0, Point::new(0.0, 0.0)).unwrap();
        let gt = BBox::new(3.0, 1.0, 29.0, 25.0).unwrap();
        let (offs, mask) = gt_offsets(&grid, &gt);
        let r = grad_check(
            |v: &[f64]| {
                let e = centerness_loss(&ScoreMap::from_vec(5, 5, v.to_vec()).unwrap(), &offs, &mask)
                    .unwrap();
                (e.value, e.grad)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn iou_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = Grid::new(4, 4, 8.0, Point::new(20.0, 20.0)).unwrap();
        let gt = BBox::new(18.0, 15.0, 50.0, 47.0).unwrap();
        let mask: Vec<bool> = (0..16).map(|k| k % 3 != 1).collect();
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(2.0..30.0)).collect();
        let r = grad_check(
            |v: &[f64]| {
                let data = v.chunks(4).map(|c| Offsets::new(c[0], c[1], c[2], c[3])).collect();
                let om = OffsetMap::from_vec(4, 4, data).unwrap();
                let e = iou_loss_offsets(&grid, &om, &gt, &mask).unwrap();
                (e.value, e.grad)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #[test]
        fn positive_branch_minimized_at_target(t in 0.01..0.99f64, c in 0.001..0.999f64) {
            let (at_t, d_t) = soft_bce(t, t);
            let (at_c, _) = soft_bce(c, t);
            prop_assert!(at_t <= at_c + 1e-12);
            prop_assert!(d_t.abs() < 1e-9);
        }

        #[test]
        fn negative_branch_increasing(a in 0.0001..0.999f64, b in 0.0001..0.999f64) {
            prop_assume!(a < b);
            prop_assert!(reweighted_negative(a).0 < reweighted_negative(b).0);
        }

        #[test]
        fn cls_loss_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_targets(&mut rng, 20);
            let s: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
            let mut perm: Vec<usize> = (0..20).collect();
            perm.reverse();
            perm.swap(3, 11);
            let t2 = SoftTargetMap {
                height: 5, width: 4,
                values: perm.iter().map(|&k| t.values[k]).collect(),
                mask: perm.iter().map(|&k| t.mask[k]).collect(),
            };
            let s2: Vec<f64> = perm.iter().map(|&k| s[k]).collect();
            let a = ladl_loss(&ScoreMap::from_vec(5, 4, s).unwrap(), &SoftTargetMap { height: 5, width: 4, ..t }).unwrap();
            let b = ladl_loss(&ScoreMap::from_vec(5, 4, s2).unwrap(), &t2).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
        }
    }
}
