//! A per-voxel affine segmenter trained by full-batch gradient descent.
//!
//! Features per voxel, in order: intensity, box means of radius 1 and 2,
//! grid coordinates scaled to [-1, 1], optionally the eight atlas heatmap
//! values, and a constant bias. The model maps them to eight logits with one
//! weight matrix; an optional auxiliary matrix regresses the atlas heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{convolve_axis, HeatmapAtlas};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossWeights};
use crate::numeric::{dd, div, round, Dd};
use crate::stats::ShapeStats;
use crate::volume::{ClassField, Grid, LabelVolume, ProbVolume, Volume, NUM_CLASSES};

pub const MODEL_FORMAT: &str = "cardioprior.model";
pub const MODEL_VERSION: u32 = 1;

/// Step size calibrated on 48³ phantoms (15 training cases, atlas features).
pub const DEFAULT_STEP: f64 = 10.0;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_CLIP_NORM: f64 = 0.1;
/// From a near-uniform start the shape terms are orders of magnitude larger
/// than the baseline terms and saturate the softmax in one step.
pub const DEFAULT_REG_START: usize = 50;

const BASE_FEATURES: [&str; 6] = ["intensity", "box_r1", "box_r2", "coord_x", "coord_y", "coord_z"];

pub fn feature_names(heatmaps: bool) -> Vec<String> {
    let mut names: Vec<String> = BASE_FEATURES.iter().map(|s| s.to_string()).collect();
    if heatmaps {
        names.extend((0..NUM_CLASSES).map(|c| format!("heatmap_{c}")));
    }
    names.push("bias".into());
    names
}

/// Voxel-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    grid: Grid,
    width: usize,
    data: Vec<f64>,
    heatmaps: Option<Vec<f64>>,
}

impl FeatureStack {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn has_heatmaps(&self) -> bool {
        self.heatmaps.is_some()
    }

    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.data[v * self.width..(v + 1) * self.width]
    }

    pub fn num_voxels(&self) -> usize {
        self.grid.len()
    }
}

fn box_mean(grid: &Grid, data: &[f64], radius: isize) -> Vec<f64> {
    let kernel = vec![1.0 / (2 * radius + 1) as f64; (2 * radius + 1) as usize];
    let mut out = data.to_vec();
    for axis in 0..3 {
        out = convolve_axis(grid, &out, axis, &kernel, radius);
    }
    out
}

fn same_geometry(a: &Grid, b: &Grid) -> bool {
    a.dims == b.dims
        && a.spacing == b.spacing
        && a.offset.iter().zip(&b.offset).all(|(x, y)| (x - y).abs() <= 1e-6)
}

pub fn featurize(image: &Volume<f64>, atlas: Option<&HeatmapAtlas>) -> Result<FeatureStack> {
    let grid = *image.grid();
    if let Some(a) = atlas {
        if !same_geometry(a.grid(), &grid) {
            return Err(Error::GridMismatch(format!(
                "image {:?} @ {:?} mm, atlas {:?} @ {:?} mm",
                grid.dims,
                grid.spacing,
                a.grid().dims,
                a.grid().spacing
            )));
        }
    }
    let width = BASE_FEATURES.len() + atlas.map_or(0, |_| NUM_CLASSES) + 1;
    let smooth1 = box_mean(&grid, image.data(), 1);
    let smooth2 = box_mean(&grid, image.data(), 2);
    let coord = |i: usize, axis: usize| {
        let half = (grid.dims[axis] as f64 - 1.0) / 2.0;
        if half == 0.0 {
            0.0
        } else {
            (i as f64 - half) / half
        }
    };
    let mut data = Vec::with_capacity(width * grid.len());
    for v in 0..grid.len() {
        let [x, y, z] = grid.coords(v);
        data.extend([image.data()[v], smooth1[v], smooth2[v], coord(x, 0), coord(y, 1), coord(z, 2)]);
        if let Some(a) = atlas {
            data.extend(a.at(v));
        }
        data.push(1.0);
    }
    let heatmaps = atlas.map(|a| (0..grid.len()).flat_map(|v| a.at(v)).collect());
    Ok(FeatureStack {
        grid,
        width,
        data,
        heatmaps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step: f64,
    pub epochs: usize,
    /// Recorded for provenance; initialization is all zeros.
    pub seed: u64,
    pub loss: LossConfig,
    pub aux_head: bool,
    pub aux_weight: f64,
    /// Rescale the weight gradient to at most this Frobenius norm.
    pub clip_norm: Option<f64>,
    /// Shape regularizers are switched off before this epoch.
    pub reg_start: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step: DEFAULT_STEP,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            loss: LossConfig::baseline(),
            aux_head: false,
            aux_weight: 0.0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            reg_start: DEFAULT_REG_START,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidDocument(format!("step size {}", self.step)));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::InvalidDocument(format!("aux weight {}", self.aux_weight)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidDocument(format!("clip norm {c}")));
            }
        }
        let w = &self.loss.weights;
        if self.reg_start > 0 && w.gdice == 0.0 && w.ce == 0.0 {
            return Err(Error::InvalidDocument(
                "a delayed regularizer start needs a nonzero gdice or ce weight".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroModel {
    pub format: String,
    pub version: u32,
    pub features: Vec<String>,
    /// Row-major `NUM_CLASSES × features.len()`.
    pub weights: Vec<f64>,
    pub aux_weights: Option<Vec<f64>>,
    pub config: TrainConfig,
}

impl MicroModel {
    pub fn zeros(heatmaps: bool, config: TrainConfig) -> MicroModel {
        let features = feature_names(heatmaps);
        let n = NUM_CLASSES * features.len();
        MicroModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            aux_weights: config.aux_head.then(|| vec![0.0; n]),
            weights: vec![0.0; n],
            features,
            config,
        }
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }

    pub fn uses_heatmaps(&self) -> bool {
        self.features.len() > BASE_FEATURES.len() + 1
    }

    fn check_arity(&self, f: &FeatureStack) -> Result<()> {
        if f.width != self.width() {
            return Err(Error::ArityMismatch {
                expected: self.width(),
                actual: f.width,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<MicroModel> {
        let m: MicroModel = serde_json::from_str(text)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::InvalidDocument(format!("unsupported model {} v{}", m.format, m.version)));
        }
        let n = NUM_CLASSES * m.features.len();
        if m.weights.len() != n || m.aux_weights.as_ref().is_some_and(|a| a.len() != n) {
            return Err(Error::InvalidDocument("weight matrix does not match the feature list".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MicroModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn affine(w: &[f64], f: &FeatureStack) -> ClassField {
    let mut out = Vec::with_capacity(f.num_voxels() * NUM_CLASSES);
    for v in 0..f.num_voxels() {
        let x = f.voxel(v);
        for row in w.chunks_exact(f.width) {
            out.push(row.iter().zip(x).map(|(a, b)| a * b).sum());
        }
    }
    ClassField::new(f.grid, out).expect("logit shape")
}

/// Logits and, when the model has one, the auxiliary head outputs.
pub fn forward(model: &MicroModel, f: &FeatureStack) -> Result<(ClassField, Option<ClassField>)> {
    model.check_arity(f)?;
    let aux = model.aux_weights.as_ref().map(|a| affine(a, f));
    Ok((affine(&model.weights, f), aux))
}

pub fn predict(model: &MicroModel, image: &Volume<f64>, atlas: Option<&HeatmapAtlas>) -> Result<ProbVolume> {
    let f = featurize(image, atlas)?;
    Ok(forward(model, &f)?.0.softmax())
}

/// Σ_v grad[v, c] · x[v, f], row-major over (c, f).
fn weight_gradient(grad: &[f64], f: &FeatureStack) -> Vec<f64> {
    let mut out = vec![0.0; NUM_CLASSES * f.width];
    for v in 0..f.num_voxels() {
        let x = f.voxel(v);
        let g = &grad[v * NUM_CLASSES..(v + 1) * NUM_CLASSES];
        for (c, &gc) in g.iter().enumerate() {
            if gc != 0.0 {
                for (o, xf) in out[c * f.width..(c + 1) * f.width].iter_mut().zip(x) {
                    *o += gc * xf;
                }
            }
        }
    }
    out
}

/// One training case: features and one-hot ground truth.
pub struct TrainCase {
    pub features: FeatureStack,
    pub truth: ProbVolume,
}

impl TrainCase {
    pub fn new(image: &Volume<f64>, labels: &LabelVolume, atlas: Option<&HeatmapAtlas>) -> Result<TrainCase> {
        let features = featurize(image, atlas)?;
        if labels.dims() != image.dims() || labels.spacing() != image.spacing() {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs labels {:?}",
                image.dims(),
                labels.dims()
            )));
        }
        Ok(TrainCase {
            features,
            truth: crate::volume::one_hot(labels)?,
        })
    }
}

/// Objective value and weight gradients, averaged over cases.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub terms: BTreeMap<String, f64>,
    pub aux_mse: f64,
    pub grad: Vec<f64>,
    pub aux_grad: Option<Vec<f64>>,
    /// `value` before its final rounding.
    pub(crate) precise: Dd,
}

struct CaseObjective {
    value: Dd,
    terms: BTreeMap<String, f64>,
    aux_mse: f64,
    grad: Vec<f64>,
    aux_grad: Option<Vec<f64>>,
}

fn case_objective(
    model: &MicroModel,
    loss: &LossConfig,
    case: &TrainCase,
    stats: Option<&ShapeStats>,
) -> Result<CaseObjective> {
    let (logits, aux) = forward(model, &case.features)?;
    let eval = total_loss(&logits, &case.truth, loss, stats)?;
    let grad = weight_gradient(eval.grad.data(), &case.features);
    let (aux_mse, aux_grad) = match (aux, &case.features.heatmaps) {
        (Some(out), Some(target)) => {
            let n = target.len() as f64;
            let mut sse = 0.0;
            let mut d = Vec::with_capacity(target.len());
            for (a, h) in out.data().iter().zip(target) {
                sse += (a - h) * (a - h);
                d.push(model.config.aux_weight * 2.0 * (a - h) / n);
            }
            (sse / n, Some(weight_gradient(&d, &case.features)))
        }
        (Some(_), None) => {
            return Err(Error::ArityMismatch {
                expected: model.width(),
                actual: case.features.width,
            })
        }
        _ => (0.0, None),
    };
    Ok(CaseObjective {
        value: eval.precise,
        terms: eval.terms,
        aux_mse,
        grad,
        aux_grad,
    })
}

/// Mean over cases of `total_loss + aux_weight · aux_mse`, with gradients
/// over both weight matrices. Cases are reduced in order.
pub fn objective(model: &MicroModel, cases: &[TrainCase], stats: Option<&ShapeStats>) -> Result<Objective> {
    objective_with(model, &model.config.loss, cases, stats)
}

fn objective_with(
    model: &MicroModel,
    loss: &LossConfig,
    cases: &[TrainCase],
    stats: Option<&ShapeStats>,
) -> Result<Objective> {
    if cases.is_empty() {
        return Err(Error::InvalidDocument("no training cases".into()));
    }
    let per_case: Vec<CaseObjective> = cases
        .par_iter()
        .map(|c| case_objective(model, loss, c, stats))
        .collect::<Result<_>>()?;
    let k = cases.len() as f64;
    let mut precise = dd(0.0);
    let mut out = Objective {
        value: 0.0,
        terms: BTreeMap::new(),
        aux_mse: 0.0,
        grad: vec![0.0; model.weights.len()],
        aux_grad: model.aux_weights.as_ref().map(|a| vec![0.0; a.len()]),
        precise: dd(0.0),
    };
    for c in per_case {
        precise += c.value;
        out.aux_mse += c.aux_mse / k;
        for (name, v) in c.terms {
            *out.terms.entry(name).or_insert(0.0) += v / k;
        }
        for (o, g) in out.grad.iter_mut().zip(&c.grad) {
            *o += g / k;
        }
        if let (Some(o), Some(g)) = (out.aux_grad.as_mut(), c.aux_grad.as_ref()) {
            for (o, g) in o.iter_mut().zip(g) {
                *o += g / k;
            }
        }
    }
    out.precise = div(precise, dd(k)) + dd(model.config.aux_weight) * out.aux_mse;
    out.value = round(out.precise);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub aux_mse: f64,
}

/// Per-epoch objective before each update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = LossWeights::default().all().iter().map(|(n, _)| *n).collect();
        let mut s = format!("epoch,total,{},aux_mse\n", names.join(","));
        for r in &self.rows {
            let _ = write!(s, "{},{:e}", r.epoch, r.total);
            for n in &names {
                let _ = write!(s, ",{:e}", r.terms.get(*n).copied().unwrap_or(0.0));
            }
            let _ = writeln!(s, ",{:e}", r.aux_mse);
        }
        s
    }
}

fn clip(grad: &mut [f64], aux: Option<&mut Vec<f64>>, max_norm: f64) {
    let mut n2: f64 = grad.iter().map(|g| g * g).sum();
    if let Some(a) = aux.as_deref() {
        n2 += a.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = n2.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
        if let Some(a) = aux {
            a.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Full-batch gradient descent from `model`'s current weights.
pub fn train(
    mut model: MicroModel,
    cases: &[TrainCase],
    stats: Option<&ShapeStats>,
) -> Result<(MicroModel, LossTrace)> {
    model.config.validate()?;
    if let Some(c) = cases.iter().find(|c| c.features.width != model.width()) {
        return Err(Error::ArityMismatch {
            expected: model.width(),
            actual: c.features.width,
        });
    }
    let grid = cases.first().map(|c| c.features.grid);
    if cases.iter().any(|c| Some(c.features.grid.dims) != grid.map(|g| g.dims)) {
        return Err(Error::GridMismatch("training cases are not on a common grid".into()));
    }
    let step = model.config.step;
    let early = LossConfig {
        weights: LossWeights {
            volume: 0.0,
            moment_centroid: 0.0,
            moment_second: 0.0,
            relation_dist: 0.0,
            relation_angle: 0.0,
            ..model.config.loss.weights
        },
        ..model.config.loss.clone()
    };
    let mut trace = LossTrace::default();
    for epoch in 0..model.config.epochs {
        let loss = if epoch < model.config.reg_start { &early } else { &model.config.loss };
        let mut obj = match objective_with(&model, loss, cases, stats) {
            Err(Error::InvalidVolume(_)) => return Err(Error::NonfiniteLoss { epoch }),
            r => r?,
        };
        let finite = obj.value.is_finite()
            && obj.grad.iter().all(|g| g.is_finite())
            && obj.aux_grad.iter().flatten().all(|g| g.is_finite());
        if !finite {
            return Err(Error::NonfiniteLoss { epoch });
        }
        trace.rows.push(TraceRow {
            epoch,
            total: obj.value,
            terms: obj.terms,
            aux_mse: obj.aux_mse,
        });
        if let Some(max) = model.config.clip_norm {
            clip(&mut obj.grad, obj.aux_grad.as_mut(), max);
        }
        for (w, g) in model.weights.iter_mut().zip(&obj.grad) {
            *w -= step * g;
        }
        if let (Some(a), Some(g)) = (model.aux_weights.as_mut(), obj.aux_grad.as_ref()) {
            for (w, g) in a.iter_mut().zip(g) {
                *w -= step * g;
            }
        }
    }
    Ok((model, trace))
}
