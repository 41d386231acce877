//! Training pairs, the combined objective, and the SGD loop.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::frame::{batch_tensor, crop, CropTransform, Patch};
use crate::geometry::{BBox, Grid, Point};
use crate::labeling::{
    assign_regions, build_cls_targets, sample_loc_targets, LabelConfig, LocSampleSet, RegionMap,
    SoftTargetMap,
};
use crate::losses::{
    centerness_loss, cls_loss, gt_offsets, iou_loss_offsets, loc_loss, total_loss, ClsLossKind,
    LossBreakdown, LossCounts, LossEval,
};
use crate::maps::{OffsetMap, ScoreMap};
use crate::model::{decode_regression, LocHead, Model, ModelConfig};
use crate::nn::{Graph, Mode, ParamGroup, Taps, Tensor, Var};
use crate::synthetic::{gen_synthetic_sequence, Sequence, SyntheticConfig};
use crate::tracker::{context_side, crop_template};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Leading epochs during which backbone parameters are not updated.
    pub freeze_epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Weight of the regression loss.
    pub reg_weight: f64,
    /// Weight of the localization loss.
    pub loc_weight: f64,
    pub labels: LabelConfig,
    pub seed: u64,
    /// Maximum target displacement in the search crop, as a fraction of its side.
    pub shift: f64,
    /// Search-crop scale jitter: the side is multiplied by `exp(u)`, `|u| <= scale_jitter`.
    pub scale_jitter: f64,
    /// Maximum frame distance between template and search frame.
    pub max_gap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 200,
            batch_size: 16,
            freeze_epochs: 1,
            lr_start: 5e-3,
            lr_end: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            reg_weight: 1.0,
            loc_weight: 1.0,
            labels: LabelConfig::default(),
            seed: 0,
            shift: 0.125,
            scale_jitter: 0.1,
            max_gap: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be positive".into());
        }
        if self.freeze_epochs > self.epochs {
            return bad(format!(
                "freeze_epochs {} exceeds epochs {}",
                self.freeze_epochs, self.epochs
            ));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad(format!(
                "learning rates must satisfy lr_start >= lr_end > 0 (got {} and {})",
                self.lr_start, self.lr_end
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("momentum must lie in [0, 1), weight_decay and clip_norm must be >= 0".into());
        }
        if !(self.reg_weight >= 0.0 && self.loc_weight >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        let l = &self.labels;
        if !(l.beta > 0.0) || !(l.lambda_boundary > 0.0 && l.lambda_boundary <= 1.0) {
            return bad("beta must be positive and lambda_boundary in (0, 1]".into());
        }
        if !(l.center_shrink > 0.0 && l.center_shrink <= 1.0) {
            return bad(format!("center_shrink {} outside (0, 1]", l.center_shrink));
        }
        if !(0.0..0.5).contains(&self.shift) || !(self.scale_jitter >= 0.0) || self.max_gap == 0 {
            return bad("shift must lie in [0, 0.5), scale_jitter >= 0, max_gap >= 1".into());
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch: constant through the freeze, then
    /// geometric from `lr_start` to `lr_end` over the remaining epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.freeze_epochs {
            return self.lr_start;
        }
        let span = self.epochs - self.freeze_epochs;
        if span <= 1 {
            return self.lr_start;
        }
        let k = (epoch - self.freeze_epochs).min(span - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(k / (span - 1) as f64)
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            labels: self.labels,
            reg_weight: self.reg_weight,
            loc_weight: self.loc_weight,
        }
    }
}

/// One template/search pair with the target box in search-crop pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub template: Patch,
    pub search: Patch,
    pub gt: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub shift: f64,
    pub scale_jitter: f64,
    pub max_gap: usize,
    pub context: f64,
}

/// Template from one frame, search crop from another within `max_gap`
/// frames, with the target randomly displaced and rescaled inside it.
pub fn make_training_pair<R: Rng + ?Sized>(
    seq: &Sequence,
    model: &ModelConfig,
    aug: &Augment,
    rng: &mut R,
) -> Result<TrainingPair> {
    let n = seq.frames.len();
    if n < 2 || seq.boxes.len() != n {
        return Err(Error::invalid("training pairs need a sequence of at least two frames"));
    }
    let t = rng.random_range(0..n);
    let lo = t.saturating_sub(aug.max_gap);
    let hi = (t + aug.max_gap).min(n - 1);
    let mut s = rng.random_range(lo..hi);
    if s >= t {
        s += 1;
    }
    let (template, _) = crop_template(&seq.frames[t], &seq.boxes[t], model.template_size, aug.context)?;

    let gt = seq.boxes[s];
    let size = model.search_size as f64;
    let jitter = if aug.scale_jitter > 0.0 {
        rng.random_range(-aug.scale_jitter..=aug.scale_jitter).exp()
    } else {
        1.0
    };
    let side = context_side(&gt, aug.context).max(1.0) * size / model.template_size as f64 * jitter;
    let max_shift = aug.shift * size;
    let (dx, dy) = if max_shift > 0.0 {
        (
            rng.random_range(-max_shift..=max_shift),
            rng.random_range(-max_shift..=max_shift),
        )
    } else {
        (0.0, 0.0)
    };
    let c = gt.center();
    let scale = side / size;
    let transform = CropTransform::new(Point::new(c.x - dx * scale, c.y - dy * scale), side, model.search_size)?;
    let frame = &seq.frames[s];
    let search = crop(frame, &transform, frame.mean_color());
    Ok(TrainingPair {
        template,
        search,
        gt: transform.box_to_crop(&gt),
    })
}

/// Network inputs for one optimization step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub template: Tensor,
    pub search: Tensor,
    pub gt: Vec<BBox>,
}

impl Batch {
    pub fn from_pairs(pairs: &[TrainingPair]) -> Result<Self> {
        let z: Vec<&Patch> = pairs.iter().map(|p| &p.template).collect();
        let x: Vec<&Patch> = pairs.iter().map(|p| &p.search).collect();
        Ok(Self {
            template: batch_tensor(&z)?,
            search: batch_tensor(&x)?,
            gt: pairs.iter().map(|p| p.gt).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The training batch of a given step; each pair comes from its own short
/// sequence seeded by `(seed, step, index)`.
pub fn make_batch(run: &RunConfig, step: usize) -> Result<Batch> {
    let tc = &run.train;
    let aug = Augment {
        shift: tc.shift,
        scale_jitter: tc.scale_jitter,
        max_gap: tc.max_gap,
        context: run.track.context,
    };
    let pairs = (0..tc.batch_size)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, step as u64, i as u64));
            let synth = SyntheticConfig {
                seed: rng.random(),
                length: tc.max_gap + 1,
                ..run.synth.clone()
            };
            let seq = gen_synthetic_sequence(&synth)?;
            make_training_pair(&seq, &run.model, &aug, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::from_pairs(&pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub labels: LabelConfig,
    pub reg_weight: f64,
    pub loc_weight: f64,
}

/// Localization-branch supervision of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum LocTargets {
    /// IoU targets on sampled cells.
    Iou(LocSampleSet),
    /// Center-ness targets from ground-truth offsets on inside cells.
    Centerness { offsets: OffsetMap, mask: Vec<bool> },
}

/// Targets of one sample, derived from the ground truth and the detached
/// regression output.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTargets {
    pub region: Option<RegionMap>,
    pub cls: SoftTargetMap,
    pub reg_mask: Vec<bool>,
    pub loc: Option<LocTargets>,
    pub fallback: bool,
}

/// Everything the objective treats as constant: targets and gather positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached {
    pub taps: Option<Vec<Taps>>,
    pub targets: Vec<SampleTargets>,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub detached: Detached,
    pub label_fallbacks: usize,
    pub clamped: usize,
}

fn sample_targets<R: Rng + ?Sized>(
    model: &ModelConfig,
    grid: &Grid,
    reg: &Tensor,
    sample: usize,
    gt: &BBox,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<SampleTargets> {
    let l = grid.len();
    let region = match assign_regions(gt, grid, cfg.labels.center_shrink, cfg.labels.lambda_boundary) {
        Ok(r) => r,
        Err(Error::DegenerateTarget(_)) => {
            return Ok(SampleTargets {
                region: None,
                cls: SoftTargetMap {
                    height: grid.height,
                    width: grid.width,
                    values: vec![0.0; l],
                    mask: vec![false; l],
                },
                reg_mask: vec![false; l],
                loc: None,
                fallback: false,
            })
        }
        Err(e) => return Err(e),
    };
    let decoded = decode_regression(reg, sample, grid);
    let cls = build_cls_targets(&region, &decoded, gt, &cfg.labels)?;
    let reg_mask = region.positive_mask();
    let loc = match model.loc_head {
        LocHead::Lafa => LocTargets::Iou(sample_loc_targets(&region, &decoded, gt, rng)?),
        LocHead::Centerness => {
            let (offsets, _) = gt_offsets(grid, gt);
            LocTargets::Centerness {
                offsets,
                mask: reg_mask.clone(),
            }
        }
    };
    Ok(SampleTargets {
        region: Some(region),
        cls: cls.map,
        reg_mask,
        loc: Some(loc),
        fallback: cls.fallback,
    })
}

fn sample_map(t: &Tensor, s: usize) -> Result<ScoreMap> {
    let [_, _, h, w] = t.dims4();
    ScoreMap::from_vec(h, w, t.sample(s).into_data())
}

fn sample_offsets(t: &Tensor, s: usize) -> OffsetMap {
    let [_, _, h, w] = t.dims4();
    let l = h * w;
    let d = &t.data()[s * 4 * l..(s + 1) * 4 * l];
    OffsetMap {
        height: h,
        width: w,
        data: (0..l)
            .map(|k| crate::geometry::Offsets::new(d[k], d[l + k], d[2 * l + k], d[3 * l + k]))
            .collect(),
    }
}

/// Accumulate per-sample loss evaluations into a batch mean and its gradient tensor.
struct Term {
    value: f64,
    grad: Vec<f64>,
    samples: usize,
    count: usize,
    clamped: usize,
}

impl Term {
    fn new(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
            samples: 0,
            count: 0,
            clamped: 0,
        }
    }

    fn add(&mut self, offset: usize, e: LossEval) {
        self.value += e.value;
        for (g, d) in self.grad[offset..offset + e.grad.len()].iter_mut().zip(&e.grad) {
            *g += d;
        }
        self.samples += 1;
        self.count += e.count;
        self.clamped += e.clamped;
    }

    fn finish(mut self, g: &mut Graph, var: Var) -> Result<(Var, f64, usize, usize)> {
        let n = self.samples.max(1) as f64;
        for v in &mut self.grad {
            *v /= n;
        }
        let value = self.value / n;
        let shape = g.value(var).shape().to_vec();
        let grad = Tensor::from_vec(&shape, self.grad)?;
        Ok((g.custom_loss(var, value, grad)?, value, self.count, self.clamped))
    }
}

/// Forward pass plus the weighted loss `cls + reg_weight * reg + loc_weight * loc`.
///
/// Targets are computed from the current regression output unless `frozen`
/// supplies them (and the gather positions), which makes the objective a
/// smooth function of the parameters for finite-difference checks.
pub fn objective<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph,
    batch: &Batch,
    cfg: &ObjectiveConfig,
    frozen: Option<&Detached>,
    rng: &mut R,
) -> Result<Objective> {
    let z = g.input(batch.template.clone());
    let x = g.input(batch.search.clone());
    let vars = model.forward(g, z, x, frozen.and_then(|d| d.taps.as_deref()))?;
    let grid = model.grid();
    let l = grid.len();
    let n = batch.len();

    let targets = match frozen {
        Some(d) => d.targets.clone(),
        None => {
            let reg = g.value(vars.reg).clone();
            (0..n)
                .map(|s| sample_targets(model.config(), &grid, &reg, s, &batch.gt[s], cfg, rng))
                .collect::<Result<Vec<_>>>()?
        }
    };
    if targets.len() != n {
        return Err(Error::shape(format!("{} target sets for {n} samples", targets.len())));
    }

    let kind = if cfg.labels.ladl {
        ClsLossKind::Ladl
    } else {
        ClsLossKind::CrossEntropy
    };
    let cls_t = g.value(vars.cls).clone();
    let reg_t = g.value(vars.reg).clone();
    let loc_t = g.value(vars.loc).clone();
    let mut cls = Term::new(n * l);
    let mut reg = Term::new(n * 4 * l);
    let mut loc = Term::new(n * l);
    for (s, t) in targets.iter().enumerate() {
        cls.add(s * l, cls_loss(&sample_map(&cls_t, s)?, &t.cls, kind)?);
        if t.reg_mask.iter().any(|m| *m) {
            let e = iou_loss_offsets(&grid, &sample_offsets(&reg_t, s), &batch.gt[s], &t.reg_mask)?;
            // reorder from cell-major [cell * 4 + side] to channel-major planes
            let mut planar = vec![0.0; 4 * l];
            for k in 0..l {
                for side in 0..4 {
                    planar[side * l + k] = e.grad[k * 4 + side];
                }
            }
            reg.add(s * 4 * l, LossEval { grad: planar, ..e });
        }
        match &t.loc {
            Some(LocTargets::Iou(samples)) => loc.add(s * l, loc_loss(&sample_map(&loc_t, s)?, samples)?),
            Some(LocTargets::Centerness { offsets, mask }) => {
                loc.add(s * l, centerness_loss(&sample_map(&loc_t, s)?, offsets, mask)?)
            }
            None => {}
        }
    }
    let fallbacks = targets.iter().filter(|t| t.fallback).count();
    let (cls_v, cls_value, cls_count, c1) = cls.finish(g, vars.cls)?;
    let (reg_v, reg_value, reg_count, c2) = reg.finish(g, vars.reg)?;
    let (loc_v, loc_value, loc_count, c3) = loc.finish(g, vars.loc)?;
    let breakdown = total_loss(
        cls_value,
        reg_value,
        loc_value,
        cfg.reg_weight,
        cfg.loc_weight,
        LossCounts {
            cls: cls_count,
            reg: reg_count,
            loc: loc_count,
        },
    )?;
    let total = g.weighted_sum(vec![(cls_v, 1.0), (reg_v, cfg.reg_weight), (loc_v, cfg.loc_weight)]);
    Ok(Objective {
        total,
        breakdown,
        detached: Detached {
            taps: vars.taps,
            targets,
        },
        label_fallbacks: fallbacks,
        clamped: c1 + c2 + c3,
    })
}

/// Per-step metrics record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    pub reg: f64,
    pub loc: f64,
    pub total: f64,
}

/// SGD with momentum and weight decay over a model, with backbone freezing.
pub struct Trainer {
    run: RunConfig,
    model: Model,
    velocity: Vec<Vec<f64>>,
    step: usize,
    sampler: ChaCha8Rng,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(run.train.seed, u64::MAX, 0));
        let model = Model::new(run.model.clone(), &mut init_rng)?;
        Ok(Self::with_model(run, model))
    }

    pub fn with_model(run: RunConfig, model: Model) -> Self {
        let velocity = model.store().params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        let sampler = ChaCha8Rng::seed_from_u64(mix_seed(run.train.seed, u64::MAX, 1));
        Self {
            run,
            model,
            velocity,
            step: 0,
            sampler,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn sampler(&self) -> &ChaCha8Rng {
        &self.sampler
    }

    /// One optimization step at the given epoch.
    pub fn train_step(&mut self, epoch: usize) -> Result<StepRecord> {
        let tc = &self.run.train;
        let lr = tc.lr_at(epoch);
        let frozen_backbone = epoch < tc.freeze_epochs;
        let batch = make_batch(&self.run, self.step)?;
        let (record, grads, updates) = {
            let mut g = Graph::new(self.model.store(), Mode::Train);
            let obj = objective(&self.model, &mut g, &batch, &tc.objective(), None, &mut self.sampler)?;
            let grads = g.backward(obj.total);
            let b = obj.breakdown;
            let record = StepRecord {
                step: self.step,
                lr,
                cls: b.cls,
                reg: b.reg,
                loc: b.loc,
                total: b.total,
            };
            (record, grads.flatten_params(self.model.store()), g.bn_updates().to_vec())
        };
        if !grads.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {}", self.step)));
        }
        let mut scale = 1.0;
        if tc.clip_norm > 0.0 {
            let norm = grads.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > tc.clip_norm {
                scale = tc.clip_norm / norm;
            }
        }
        let (momentum, wd) = (tc.momentum, tc.weight_decay);
        let store = self.model.store_mut();
        let mut at = 0;
        for (p, vel) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let n = p.value.len();
            let g = &grads[at..at + n];
            at += n;
            if frozen_backbone && p.group == ParamGroup::Backbone {
                continue;
            }
            for ((w, v), d) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = momentum * *v + d * scale + wd * *w;
                *w -= lr * *v;
            }
        }
        for u in updates {
            for (id, batch_stat) in [(u.layer.running_mean, &u.mean), (u.layer.running_var, &u.var)] {
                for (r, b) in store.buffer_mut(id).data_mut().iter_mut().zip(batch_stat) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        if !store.params().iter().all(|p| p.value.all_finite()) {
            return Err(Error::Numerical(format!("non-finite parameters after step {}", self.step)));
        }
        self.step += 1;
        Ok(record)
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            config: self.run.clone(),
            store: self.model.store().clone(),
            rng: checkpoint::RngState::of(&self.sampler),
            step: self.step as u64,
            epoch: epoch as u64,
        }
    }
}

/// Running-statistics update rate of batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Final (last good) checkpoint.
    pub checkpoint: PathBuf,
    /// Checkpoint of the epoch with the lowest mean loss.
    pub best: Option<PathBuf>,
    /// JSON-lines metrics log.
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Full training run. The final checkpoint is rewritten after every epoch;
/// on a numerical fault it holds the last good parameters and the error is
/// returned.
pub fn train<F>(run: &RunConfig, outputs: &TrainOutputs, mut on_step: F) -> Result<TrainSummary>
where
    F: FnMut(&StepRecord),
{
    let mut trainer = Trainer::new(run.clone())?;
    let mut metrics = match &outputs.metrics {
        Some(p) => Some(crate::io::JsonLinesWriter::create(p)?),
        None => None,
    };
    let mut epoch_losses = Vec::with_capacity(run.train.epochs);
    let mut best = (f64::INFINITY, 0);
    for epoch in 0..run.train.epochs {
        let mut sum = 0.0;
        for _ in 0..run.train.steps_per_epoch {
            let good = trainer.checkpoint(epoch);
            let rec = match trainer.train_step(epoch) {
                Ok(r) => r,
                Err(e @ Error::Numerical(_)) => {
                    checkpoint::save(&outputs.checkpoint, &good)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(m) = &mut metrics {
                m.write(&rec)?;
            }
            on_step(&rec);
            sum += rec.total;
        }
        let mean = sum / run.train.steps_per_epoch as f64;
        epoch_losses.push(mean);
        let ckpt = trainer.checkpoint(epoch + 1);
        checkpoint::save(&outputs.checkpoint, &ckpt)?;
        if mean < best.0 {
            best = (mean, epoch);
            if let Some(p) = &outputs.best {
                checkpoint::save(p, &ckpt)?;
            }
        }
    }
    if let Some(m) = metrics {
        m.finish()?;
    }
    Ok(TrainSummary {
        steps: trainer.step_count(),
        epoch_losses,
        best_epoch: best.1,
    })
}
