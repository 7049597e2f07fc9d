//! Central finite-difference check of the analytic loss gradients.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{overlap, shape, softmax_backward, LossConfig, LossEval};
use crate::numeric::round;
use crate::error::{Error, Result};
use crate::stats::{aggregate, describe, ShapeStats, MASS_EPSILON};
use crate::volume::{
    one_hot, ClassField, Grid, ProbVolume, Volume, WorldPoint, NUM_CLASSES,
};

pub const FD_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Acceptance bound on the maximum relative error.
pub const TOLERANCE: f64 = 1e-6;

/// Losses known to the checker. Component losses are checked over
/// probabilities, `Total` over logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    GdiceCe,
    Volume,
    Moment,
    Relation,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::GdiceCe,
        LossKind::Volume,
        LossKind::Moment,
        LossKind::Relation,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::GdiceCe => "gdice_ce",
            LossKind::Volume => "volume_loss",
            LossKind::Moment => "moment_loss",
            LossKind::Relation => "relation_loss",
            LossKind::Total => "total_loss",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let base = key.strip_suffix("_loss").unwrap_or(&key);
        Ok(match base {
            "gdice_ce" | "gdice" | "baseline" => LossKind::GdiceCe,
            "volume" => LossKind::Volume,
            "moment" => LossKind::Moment,
            "relation" => LossKind::Relation,
            "total" => LossKind::Total,
            _ => return Err(Error::UnknownLoss(s.to_string())),
        })
    }
}

/// A seeded random problem: logits, one-hot truth and population statistics
/// with nonzero spread.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub logits: ClassField,
    pub truth: ProbVolume,
    pub stats: ShapeStats,
}

fn instance_grid(size: usize) -> Grid {
    Grid::new([size; 3], [1.0, 1.25, 1.5], [-4.0, 2.5, 1.0]).expect("valid grid")
}

/// Builds the instance for `size`³ voxels. Deterministic in `seed`.
///
/// The truth holds every class in (nearly) equal proportion. Logits are
/// smooth per-class bumps plus noise with a bias towards the truth. The
/// statistics come from noisy copies of the same prediction.
pub fn gradcheck_instance(size: usize, seed: u64) -> GradcheckInstance {
    let size = size.max(2);
    let grid = instance_grid(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels: Vec<u8> = (0..grid.len()).map(|i| (i % NUM_CLASSES) as u8).collect();
    labels.shuffle(&mut rng);
    let truth = one_hot(&Volume::new(grid, labels.clone()).expect("labels in range"))
        .expect("valid labels");

    let extent = grid.far_corner() - grid.world(0);
    let width = extent.norm() / 4.0;
    let bumps: Vec<WorldPoint> = (0..NUM_CLASSES)
        .map(|_| {
            let t: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            grid.world(0) + extent.component_mul(&WorldPoint::from(t))
        })
        .collect();
    let noise: Vec<f64> = (0..grid.len() * NUM_CLASSES)
        .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let logits_for = |bumps: &[WorldPoint]| {
        let mut data = Vec::with_capacity(grid.len() * NUM_CLASSES);
        for i in 0..grid.len() {
            let x = grid.world(i);
            for (c, m) in bumps.iter().enumerate() {
                let r2 = (x - m).norm_squared();
                let bias = if labels[i] as usize == c { 1.0 } else { 0.0 };
                data.push(1.5 * (-r2 / (2.0 * width * width)).exp() + bias + noise[data.len()]);
            }
        }
        ClassField::new(grid, data).expect("logit shape")
    };
    let logits = logits_for(&bumps);

    // population: antithetic pairs of bump displacements (~1 mm) around the
    // instance, so its descriptors sit close to the population mean
    let mut descriptors = Vec::new();
    for _ in 0..3 {
        let shift: Vec<WorldPoint> = (0..NUM_CLASSES)
            .map(|_| WorldPoint::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        for sign in [1.0, -1.0] {
            let moved: Vec<WorldPoint> =
                bumps.iter().zip(&shift).map(|(m, d)| m + d * sign).collect();
            descriptors.push(describe(&logits_for(&moved).softmax(), MASS_EPSILON));
        }
    }
    GradcheckInstance {
        logits,
        truth,
        stats: aggregate(&descriptors),
    }
}

/// Location of the worst entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryLocation {
    pub voxel: [usize; 3],
    pub class: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub size: usize,
    pub seed: u64,
    pub step: f64,
    pub entries: usize,
    pub value: f64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub argmax: EntryLocation,
}

impl GradcheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// |a − b| / max(|a|, |b|, floor).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient returned by `f` at `field` with central differences
/// over every entry. Fields `loss`, `size` and `seed` are left blank.
pub(crate) fn check_field_gradient(
    field: &ClassField,
    f: impl Fn(&ClassField) -> Result<LossEval>,
) -> GradcheckReport {
    let h = FD_STEP;
    let at = f(field).expect("loss defined at the check point");
    let mut probe = field.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut worst = (0, at.grad.data()[0], f64::NAN);
    for k in 0..field.data().len() {
        let x0 = field.data()[k];
        let (hi, lo) = (x0 + h, x0 - h);
        probe.data_mut()[k] = hi;
        let up = f(&probe).expect("loss defined near the check point").precise;
        probe.data_mut()[k] = lo;
        let down = f(&probe).expect("loss defined near the check point").precise;
        probe.data_mut()[k] = x0;
        // divide by the step actually taken; `hi - lo` is exact
        let numeric = round((up - down) / (hi - lo));
        let analytic = at.grad.data()[k];
        let rel = relative_error(analytic, numeric);
        if rel > max_rel || (k == 0 && rel.is_nan()) {
            max_rel = rel;
            worst = (k, analytic, numeric);
        }
        max_abs = max_abs.max((analytic - numeric).abs());
    }
    GradcheckReport {
        loss: String::new(),
        size: field.grid().dims[0],
        seed: 0,
        step: FD_STEP,
        entries: field.data().len(),
        value: at.value,
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        argmax: EntryLocation {
            voxel: field.grid().coords(worst.0 / NUM_CLASSES),
            class: worst.0 % NUM_CLASSES,
            analytic: worst.1,
            numeric: worst.2,
        },
    }
}

/// Runs the check for `kind` on [`gradcheck_instance`]`(size, seed)` with the
/// default loss configuration.
pub fn gradcheck(kind: LossKind, size: usize, seed: u64) -> Result<GradcheckReport> {
    if size < 2 {
        return Err(Error::InvalidVolume(format!("gradcheck size {size} (need at least 2)")));
    }
    let inst = gradcheck_instance(size, seed);
    let cfg = LossConfig::default();
    let p = inst.logits.softmax();
    let g = inst.truth.field();
    let stats = &inst.stats;
    // fail early with the loss's own error rather than a panic in the probe loop
    let mut report = match kind {
        LossKind::GdiceCe => {
            overlap::gdice_ce_field(p.field(), g, &cfg)?;
            check_field_gradient(p.field(), |q| overlap::gdice_ce_field(q, g, &cfg))
        }
        LossKind::Volume => {
            shape::volume_field(p.field(), stats, &cfg)?;
            check_field_gradient(p.field(), |q| shape::volume_field(q, stats, &cfg))
        }
        LossKind::Moment => {
            shape::moment_field(p.field(), stats, &cfg)?;
            check_field_gradient(p.field(), |q| shape::moment_field(q, stats, &cfg))
        }
        LossKind::Relation => {
            shape::relation_field(p.field(), stats, &cfg)?;
            check_field_gradient(p.field(), |q| shape::relation_field(q, stats, &cfg))
        }
        LossKind::Total => {
            let total = |z: &ClassField| {
                let q = z.softmax();
                let mut e = super::evaluate_field(q.field(), g, &cfg, Some(stats))?;
                e.grad = softmax_backward(&q, &e.grad);
                Ok(e)
            };
            total(&inst.logits)?;
            check_field_gradient(&inst.logits, total)
        }
    };
    report.loss = kind.name().to_string();
    report.size = size;
    report.seed = seed;
    Ok(report)
}
