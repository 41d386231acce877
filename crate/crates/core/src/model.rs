//! The Siamese network: a small strided backbone, depthwise cross-correlation
//! fusion, classification and regression towers, and a separate
//! localization-quality branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_unchecked, BBox, Grid, Offsets, Point};
use crate::maps::{OffsetMap, ScoreMap};
use crate::nn::kernels::bilinear_taps;
use crate::nn::{BnParams, Graph, Mode, ParamGroup, ParamId, ParamStore, Taps, Tensor, Var};

/// Total stride of the backbone in input pixels.
pub const STRIDE: usize = 8;

/// Regression outputs are `stride * exp(raw)` with `raw` clamped to this range.
const REG_RAW_RANGE: (f64, f64) = (-15.0, 10.0);

/// Number of points gathered per decoded box.
pub const AGGREGATION_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocHead {
    /// Separate branch: position-embedded non-local block, box-point
    /// aggregation, IoU-supervised output.
    Lafa,
    /// Baseline center-ness output on top of the classification tower.
    Centerness,
}

impl std::str::FromStr for LocHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lafa" => Ok(Self::Lafa),
            "centerness" => Ok(Self::Centerness),
            other => Err(Error::Config(format!(
                "unknown loc head `{other}` (expected lafa or centerness)"
            ))),
        }
    }
}

impl std::fmt::Display for LocHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lafa => "lafa",
            Self::Centerness => "centerness",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub channels: usize,
    /// Side of the center crop applied to template features; 0 keeps them whole.
    pub template_feature_size: usize,
    /// Conv-ReLU-BN blocks per tower.
    pub tower_depth: usize,
    pub loc_head: LocHead,
    /// Non-local block inside the localization branch.
    pub nonlocal: bool,
    /// Five-point box aggregation inside the localization branch.
    pub aggregate: bool,
    /// Initial regression offset in pixels.
    pub init_offset: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            template_size: 127,
            search_size: 255,
            channels: 32,
            template_feature_size: 7,
            tower_depth: 2,
            loc_head: LocHead::Lafa,
            nonlocal: true,
            aggregate: true,
            init_offset: 24.0,
        }
    }
}

fn backbone_out(size: usize) -> Option<usize> {
    let mut s = size;
    for _ in 0..3 {
        if s < 3 {
            return None;
        }
        s = (s - 3) / 2 + 1;
    }
    Some(s)
}

impl ModelConfig {
    /// Spatial side of the template feature after cropping.
    pub fn template_feature_side(&self) -> Result<usize> {
        let full = backbone_out(self.template_size)
            .ok_or_else(|| Error::Config(format!("template size {} too small", self.template_size)))?;
        match self.template_feature_size {
            0 => Ok(full),
            s if s <= full => Ok(s),
            s => Err(Error::Config(format!(
                "template feature crop {s} exceeds backbone output {full}"
            ))),
        }
    }

    pub fn search_feature_side(&self) -> Result<usize> {
        backbone_out(self.search_size)
            .ok_or_else(|| Error::Config(format!("search size {} too small", self.search_size)))
    }

    /// Side of the score maps.
    pub fn score_size(&self) -> Result<usize> {
        let z = self.template_feature_side()?;
        let x = self.search_feature_side()?;
        if z > x {
            return Err(Error::Config(format!(
                "template feature {z} larger than search feature {x}"
            )));
        }
        Ok(x - z + 1)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::centered(self.score_size()?, STRIDE as f64, self.search_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "channels must be even and at least 2, got {}",
                self.channels
            )));
        }
        if self.tower_depth == 0 {
            return Err(Error::Config("tower_depth must be at least 1".into()));
        }
        if !(self.init_offset > 0.0 && self.init_offset.is_finite()) {
            return Err(Error::Config(format!("init_offset {} must be positive", self.init_offset)));
        }
        self.score_size().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: Conv,
    bn: BnParams,
}

#[derive(Debug, Clone)]
struct NonLocalIds {
    q: Conv,
    k: Conv,
    v: Conv,
    f: Conv,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum LocLayout {
    Lafa {
        embed: Conv,
        nonlocal: Option<NonLocalIds>,
        proj: Option<Conv>,
        tower: Vec<ConvBn>,
        out: Conv,
    },
    Centerness {
        out: Conv,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: Vec<(ConvBn, bool)>,
    cls_tower: Vec<ConvBn>,
    cls_out: Conv,
    reg_tower: Vec<ConvBn>,
    reg_out: Conv,
    loc: LocLayout,
}

/// Raw head outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub cls: ScoreMap,
    pub reg: OffsetMap,
    pub loc: ScoreMap,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub cls: Var,
    pub reg: Var,
    pub loc: Var,
    pub fused: Var,
    pub attention: Option<Var>,
    /// Bilinear taps used by the aggregation gather, one set per
    /// (sample, cell, point).
    pub taps: Option<Vec<Taps>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

struct Builder<'a, R: Rng> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: Option<f64>,
        std: Option<f64>,
    ) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = std.unwrap_or_else(|| (2.0 / fan_in).sqrt());
        let value = if std == 0.0 {
            Tensor::zeros(&[cout, cin, k, k])
        } else {
            self.normal(&[cout, cin, k, k], std)
        };
        let w = self.store.add_param(format!("{name}.weight"), group, value);
        let b = bias.map(|b| {
            self.store
                .add_param(format!("{name}.bias"), group, Tensor::filled(&[cout], b))
        });
        Conv { w, b, stride, pad }
    }

    fn bn(&mut self, name: &str, group: ParamGroup, c: usize) -> BnParams {
        BnParams {
            gamma: self
                .store
                .add_param(format!("{name}.gamma"), group, Tensor::filled(&[c], 1.0)),
            beta: self
                .store
                .add_param(format!("{name}.beta"), group, Tensor::zeros(&[c])),
            running_mean: self
                .store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: self
                .store
                .add_buffer(format!("{name}.running_var"), Tensor::filled(&[c], 1.0)),
        }
    }

    fn tower(&mut self, name: &str, c: usize, depth: usize) -> Vec<ConvBn> {
        (0..depth)
            .map(|d| ConvBn {
                conv: self.conv(&format!("{name}.{d}.conv"), ParamGroup::Head, c, c, 3, 1, 1, Some(0.0), None),
                bn: self.bn(&format!("{name}.{d}.bn"), ParamGroup::Head, c),
            })
            .collect()
    }
}

impl Model {
    /// Fresh model with randomly initialized weights.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
        };
        let widths = [3, (c / 2).max(1), c, c, c];
        let mut backbone = Vec::new();
        for layer in 0..4 {
            let (stride, pad) = if layer < 3 { (2, 0) } else { (1, 1) };
            let conv = b.conv(
                &format!("backbone.{layer}.conv"),
                ParamGroup::Backbone,
                widths[layer],
                widths[layer + 1],
                3,
                stride,
                pad,
                None,
                None,
            );
            let bn = b.bn(&format!("backbone.{layer}.bn"), ParamGroup::Backbone, widths[layer + 1]);
            backbone.push((ConvBn { conv, bn }, layer < 3));
        }

        let cls_tower = b.tower("cls.tower", c, config.tower_depth);
        let prior: f64 = 0.01;
        let cls_out = b.conv("cls.out", ParamGroup::Head, c, 1, 3, 1, 1, Some(-((1.0 - prior) / prior).ln()), Some(0.01));
        let reg_tower = b.tower("reg.tower", c, config.tower_depth);
        let reg_out = b.conv(
            "reg.out",
            ParamGroup::Head,
            c,
            4,
            3,
            1,
            1,
            Some((config.init_offset / STRIDE as f64).ln()),
            Some(0.01),
        );

        let loc = match config.loc_head {
            LocHead::Centerness => LocLayout::Centerness {
                out: b.conv("loc.out", ParamGroup::Head, c, 1, 3, 1, 1, Some(0.0), Some(0.01)),
            },
            LocHead::Lafa => {
                let d = c / 2;
                let embed = b.conv("loc.embed", ParamGroup::Head, 1, c, 1, 1, 0, Some(0.0), Some(0.0));
                let nonlocal = config.nonlocal.then(|| {
                    let proj_std = Some((1.0 / c as f64).sqrt());
                    NonLocalIds {
                        q: b.conv("loc.nonlocal.query", ParamGroup::Head, c, d, 1, 1, 0, Some(0.0), proj_std),
                        k: b.conv("loc.nonlocal.key", ParamGroup::Head, c, d, 1, 1, 0, Some(0.0), proj_std),
                        v: b.conv("loc.nonlocal.value", ParamGroup::Head, c, d, 1, 1, 0, Some(0.0), proj_std),
                        f: b.conv("loc.nonlocal.out", ParamGroup::Head, d, c, 1, 1, 0, Some(0.0), Some(0.0)),
                    }
                });
                let proj = config.aggregate.then(|| {
                    b.conv(
                        "loc.aggregate",
                        ParamGroup::Head,
                        AGGREGATION_POINTS * c,
                        c,
                        1,
                        1,
                        0,
                        Some(0.0),
                        None,
                    )
                });
                let tower = b.tower("loc.tower", c, config.tower_depth);
                let out = b.conv("loc.out", ParamGroup::Head, c, 1, 3, 1, 1, Some(0.0), Some(0.01));
                LocLayout::Lafa {
                    embed,
                    nonlocal,
                    proj,
                    tower,
                    out,
                }
            }
        };
        let store = b.store;
        Ok(Self {
            config,
            store,
            layout: Layout {
                backbone,
                cls_tower,
                cls_out,
                reg_tower,
                reg_out,
                loc,
            },
        })
    }

    /// Model with the given config and previously saved parameter values.
    /// The store must match the config's layout name for name and shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.load_store(store)?;
        Ok(model)
    }

    fn load_store(&mut self, store: ParamStore) -> Result<()> {
        let ours = &self.store;
        let same_params = ours.params().len() == store.params().len()
            && ours
                .params()
                .iter()
                .zip(store.params())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape() && a.group == b.group);
        let same_buffers = ours.buffers().len() == store.buffers().len()
            && ours
                .buffers()
                .iter()
                .zip(store.buffers())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same_params || !same_buffers {
            return Err(Error::Data("parameter layout does not match the model config".into()));
        }
        self.store = store;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn grid(&self) -> Grid {
        self.config.grid().expect("validated at construction")
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn conv(g: &mut Graph, x: Var, c: &Conv) -> Result<Var> {
        g.conv2d(x, c.w, c.b, c.stride, c.pad)
    }

    fn crb(g: &mut Graph, mut x: Var, tower: &[ConvBn]) -> Result<Var> {
        for layer in tower {
            let y = Self::conv(g, x, &layer.conv)?;
            let y = g.relu(y);
            x = g.batch_norm(y, &layer.bn);
        }
        Ok(x)
    }

    fn check_input(&self, g: &Graph, x: Var, size: usize, what: &str) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(Error::invalid(format!(
                "{what} input has shape {shape:?}, expected [N, 3, {size}, {size}]"
            )));
        }
        Ok(())
    }

    fn backbone(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (layer, relu) in &self.layout().backbone {
            let y = Self::conv(g, x, &layer.conv)?;
            let y = g.batch_norm(y, &layer.bn);
            x = if *relu { g.relu(y) } else { y };
        }
        Ok(x)
    }

    /// Backbone features of a template batch, center-cropped.
    pub fn template_branch(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.check_input(g, z, self.config.template_size, "template")?;
        let f = self.backbone(g, z)?;
        match self.config.template_feature_size {
            0 => Ok(f),
            s => g.center_crop(f, s),
        }
    }

    pub fn search_branch(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x, self.config.search_size, "search")?;
        self.backbone(g, x)
    }

    /// Prediction head on already extracted features. `frozen_taps` replaces
    /// the gather positions normally derived from the current regression
    /// output.
    pub fn head(
        &self,
        g: &mut Graph,
        zf: Var,
        xf: Var,
        frozen_taps: Option<&[Taps]>,
    ) -> Result<HeadVars> {
        let layout = self.layout();
        let fused = g.xcorr(zf, xf)?;

        let ct = Self::crb(g, fused, &layout.cls_tower)?;
        let cls_raw = Self::conv(g, ct, &layout.cls_out)?;
        let cls = g.sigmoid(cls_raw);

        let rt = Self::crb(g, fused, &layout.reg_tower)?;
        let reg_raw = Self::conv(g, rt, &layout.reg_out)?;
        let reg = g.exp_scaled(reg_raw, STRIDE as f64, REG_RAW_RANGE.0, REG_RAW_RANGE.1);

        let (loc, attention, taps) = match &layout.loc {
            LocLayout::Centerness { out } => {
                let raw = Self::conv(g, ct, out)?;
                (g.sigmoid(raw), None, None)
            }
            LocLayout::Lafa {
                embed,
                nonlocal,
                proj,
                tower,
                out,
            } => {
                let mut x = fused;
                let mut attention = None;
                if let Some(nl) = nonlocal {
                    let p = self.position_embedding_vars(g, zf, fused, embed)?;
                    let (y, a) = nonlocal_vars(g, x, p, nl)?;
                    x = y;
                    attention = Some(a);
                }
                let mut taps = None;
                if let Some(proj) = proj {
                    let t = match frozen_taps {
                        Some(t) => t.to_vec(),
                        None => {
                            let grid = self.grid();
                            let reg_t = g.value(reg).clone();
                            let mut all = Vec::new();
                            for s in 0..reg_t.shape()[0] {
                                let boxes = decode_reg_tensor(&reg_t, s, &grid);
                                all.extend(aggregation_taps(&boxes, &grid));
                            }
                            all
                        }
                    };
                    let gathered = g.gather(x, AGGREGATION_POINTS, t.clone())?;
                    x = Self::conv(g, gathered, proj)?;
                    taps = Some(t);
                }
                let lt = Self::crb(g, x, tower)?;
                let raw = Self::conv(g, lt, out)?;
                (g.sigmoid(raw), attention, taps)
            }
        };
        Ok(HeadVars {
            cls,
            reg,
            loc,
            fused,
            attention,
            taps,
        })
    }

    fn position_embedding_vars(&self, g: &mut Graph, zf: Var, fused: Var, embed: &Conv) -> Result<Var> {
        let [_, c, k, _] = g.value(zf).dims4();
        let h = g.channel_sum(fused);
        let h = g.scale(h, 1.0 / (c * k * k) as f64);
        Self::conv(g, h, embed)
    }

    pub fn forward(&self, g: &mut Graph, z: Var, x: Var, frozen_taps: Option<&[Taps]>) -> Result<HeadVars> {
        let zf = self.template_branch(g, z)?;
        let xf = self.search_branch(g, x)?;
        self.head(g, zf, xf, frozen_taps)
    }

    /// Template features in inference mode, `[N, C, k, k]`.
    pub fn template_features(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let zv = g.input(z.clone());
        let f = self.template_branch(&mut g, zv)?;
        Ok(g.value(f).clone())
    }

    /// Inference on a search batch against precomputed template features.
    pub fn infer(&self, template_features: &Tensor, x: &Tensor) -> Result<Vec<HeadOutputs>> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let zv = g.input(template_features.clone());
        let xv = g.input(x.clone());
        let xf = self.search_branch(&mut g, xv)?;
        let vars = self.head(&mut g, zv, xf, None)?;
        let n = g.value(vars.cls).shape()[0];
        (0..n).map(|s| head_outputs(&g, &vars, s)).collect()
    }
}

/// Split one sample of the graph outputs into score and offset maps.
pub fn head_outputs(g: &Graph, vars: &HeadVars, sample: usize) -> Result<HeadOutputs> {
    let cls = g.value(vars.cls);
    let [_, _, h, w] = cls.dims4();
    let cls = ScoreMap::from_vec(h, w, cls.sample(sample).into_data())?;
    let loc = ScoreMap::from_vec(h, w, g.value(vars.loc).sample(sample).into_data())?;
    let reg = offsets_from_tensor(g.value(vars.reg), sample);
    Ok(HeadOutputs { cls, reg, loc })
}

fn offsets_from_tensor(reg: &Tensor, sample: usize) -> OffsetMap {
    let [_, _, h, w] = reg.dims4();
    let l = h * w;
    let d = &reg.data()[sample * 4 * l..(sample + 1) * 4 * l];
    let data = (0..l)
        .map(|k| Offsets::new(d[k], d[l + k], d[2 * l + k], d[3 * l + k]))
        .collect();
    OffsetMap {
        height: h,
        width: w,
        data,
    }
}

fn decode_reg_tensor(reg: &Tensor, sample: usize, grid: &Grid) -> Vec<BBox> {
    let offsets = offsets_from_tensor(reg, sample);
    offsets
        .data
        .iter()
        .enumerate()
        .map(|(k, o)| decode_unchecked(grid.point(k / grid.width, k % grid.width), *o))
        .collect()
}

/// Decoded boxes of one sample's regression output.
pub fn decode_regression(reg: &Tensor, sample: usize, grid: &Grid) -> Vec<BBox> {
    decode_reg_tensor(reg, sample, grid)
}

/// The five gather points of a box: center, top-left, top-right,
/// bottom-right, bottom-left.
pub fn aggregation_points(b: &BBox) -> [Point; AGGREGATION_POINTS] {
    [
        b.center(),
        Point::new(b.x1, b.y1),
        Point::new(b.x2, b.y1),
        Point::new(b.x2, b.y2),
        Point::new(b.x1, b.y2),
    ]
}

/// Bilinear taps on the score-map lattice for every cell's five points.
pub fn aggregation_taps(decoded: &[BBox], grid: &Grid) -> Vec<Taps> {
    let mut taps = Vec::with_capacity(decoded.len() * AGGREGATION_POINTS);
    for b in decoded {
        for p in aggregation_points(b) {
            let (row, col) = grid.to_cell_coords(p);
            taps.push(bilinear_taps(row, col, grid.height, grid.width));
        }
    }
    taps
}

fn nonlocal_vars(g: &mut Graph, x: Var, p: Var, nl: &NonLocalIds) -> Result<(Var, Var)> {
    let xp = g.add(x, p)?;
    let q = Model::conv(g, xp, &nl.q)?;
    let k = Model::conv(g, xp, &nl.k)?;
    let v = Model::conv(g, x, &nl.v)?;
    let a = g.attention(q, k, v)?;
    let f = Model::conv(g, a, &nl.f)?;
    Ok((g.add(f, x)?, a))
}

/// Weights of a 1×1 projection: `[cout, cin, 1, 1]` and `[cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projection {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, 1, 1]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn register(&self, store: &mut ParamStore, name: &str) -> Result<Conv> {
        let [cout, _, k, k2] = self.weight.dims4();
        if k != 1 || k2 != 1 || self.bias.shape() != [cout] {
            return Err(Error::shape(format!(
                "projection `{name}` has weight {:?} and bias {:?}",
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        Ok(Conv {
            w: store.add_param(format!("{name}.weight"), ParamGroup::Head, self.weight.clone()),
            b: Some(store.add_param(format!("{name}.bias"), ParamGroup::Head, self.bias.clone())),
            stride: 1,
            pad: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalWeights {
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub out: Projection,
}

/// Depthwise cross-correlation of template features over search features.
pub fn cross_correlate(z: &Tensor, x: &Tensor) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let zv = g.input(z.clone());
    let xv = g.input(x.clone());
    let out = g.xcorr(zv, xv)?;
    Ok(g.value(out).clone())
}

/// Single-channel response: depthwise correlation summed over channels and
/// divided by `C * k * k`.
pub fn correlation_map(z: &Tensor, x: &Tensor) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let zv = g.input(z.clone());
    let xv = g.input(x.clone());
    let fused = g.xcorr(zv, xv)?;
    let [_, c, k, _] = z.dims4();
    let h = g.channel_sum(fused);
    let h = g.scale(h, 1.0 / (c * k * k) as f64);
    Ok(g.value(h).clone())
}

/// Position embedding: the correlation map expanded to `C` channels by a 1×1 projection.
pub fn position_embedding(z: &Tensor, x: &Tensor, expand: &Projection) -> Result<Tensor> {
    let h = correlation_map(z, x)?;
    let mut store = ParamStore::new();
    let e = expand.register(&mut store, "embed")?;
    let mut g = Graph::new(&store, Mode::Eval);
    let hv = g.input(h);
    let p = Model::conv(&mut g, hv, &e)?;
    Ok(g.value(p).clone())
}

/// Non-local block with position embedding added to the query/key input.
/// Returns the output and the attention weights `[N, L, L]`.
pub fn la_nonlocal(x: &Tensor, p: &Tensor, w: &NonLocalWeights) -> Result<(Tensor, Vec<f64>)> {
    if x.shape() != p.shape() {
        return Err(Error::shape(format!(
            "features {:?} and position embedding {:?}",
            x.shape(),
            p.shape()
        )));
    }
    let mut store = ParamStore::new();
    let nl = NonLocalIds {
        q: w.query.register(&mut store, "query")?,
        k: w.key.register(&mut store, "key")?,
        v: w.value.register(&mut store, "value")?,
        f: w.out.register(&mut store, "out")?,
    };
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input(x.clone());
    let pv = g.input(p.clone());
    let (y, a) = nonlocal_vars(&mut g, xv, pv, &nl)?;
    let attn = g.attention_weights(a).expect("attention node").to_vec();
    Ok((g.value(y).clone(), attn))
}

/// Five-point bilinear gather of `features` (`[1, C, H, W]` on `grid`) at
/// every cell's decoded box, fused by a 1×1 projection from `5C` to its
/// output width.
pub fn feature_aggregate(
    features: &Tensor,
    decoded: &[BBox],
    grid: &Grid,
    fuse: &Projection,
) -> Result<Tensor> {
    let [n, _, h, w] = features.dims4();
    if n != 1 || h != grid.height || w != grid.width || decoded.len() != grid.len() {
        return Err(Error::shape(format!(
            "features {:?} with {} boxes on a {}x{} grid",
            features.shape(),
            decoded.len(),
            grid.height,
            grid.width
        )));
    }
    let mut store = ParamStore::new();
    let proj = fuse.register(&mut store, "fuse")?;
    let mut g = Graph::new(&store, Mode::Eval);
    let fv = g.input(features.clone());
    let gathered = g.gather(fv, AGGREGATION_POINTS, aggregation_taps(decoded, grid))?;
    let out = Model::conv(&mut g, gathered, &proj)?;
    Ok(g.value(out).clone())
}
