//! Overlap and surface-distance metrics on hard label volumes.
//!
//! Surfaces are the centers of class voxels that have at least one
//! 6-neighbour outside the class; faces on the grid boundary count as outside.
//! Point-to-set distances come from an exact anisotropic Euclidean distance
//! transform (lower envelope of parabolas, one pass per axis).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::volume::{ClassId, Grid, LabelVolume};

/// Recorded in every report so consumers do not have to guess.
pub const EMPTY_CLASS_POLICY: &str = "dice/jaccard absent when the class is empty in both volumes and 0 when empty in exactly one; \
     hd/assd/hd95 absent when either surface is empty; macro averages over classes present in ground truth, skipping absent values";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub hd_mm: f64,
    pub assd_mm: f64,
    /// max of the two directed 95th percentiles (linear interpolation)
    pub hd95_mm: f64,
}

fn check_pair(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    let (a, b) = (pred.grid(), gt.grid());
    if a.dims != b.dims || a.spacing != b.spacing {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} @ {:?} mm vs ground truth {:?} @ {:?} mm",
            a.dims, a.spacing, b.dims, b.spacing
        )));
    }
    Ok(())
}

/// Dice and Jaccard for one class; `None` when the class is in neither volume.
pub fn overlap(pred: &LabelVolume, gt: &LabelVolume, c: ClassId) -> Result<Option<Overlap>> {
    check_pair(pred, gt)?;
    let c = c as u8;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p += (a == c) as usize;
        g += (b == c) as usize;
        both += (a == c && b == c) as usize;
    }
    if p + g == 0 {
        return Ok(None);
    }
    Ok(Some(Overlap {
        dice: 2.0 * both as f64 / (p + g) as f64,
        jaccard: both as f64 / (p + g - both) as f64,
    }))
}

/// Sorted indices of the boundary voxels of class `c`.
pub fn surface_voxels(labels: &LabelVolume, c: ClassId) -> Vec<usize> {
    let c = c as u8;
    let grid = labels.grid();
    let data = labels.data();
    (0..grid.len())
        .filter(|&i| {
            data[i] == c
                && grid
                    .neighbors6(i)
                    .any(|n| n.is_none_or(|j| data[j] != c))
        })
        .collect()
}

/// Euclidean distance in mm from every voxel center to the nearest voxel in
/// `features`. Infinite everywhere when `features` is empty.
pub fn distance_map(grid: &Grid, features: &[usize]) -> Vec<f64> {
    let mut d2 = vec![f64::INFINITY; grid.len()];
    for &i in features {
        d2[i] = 0.0;
    }
    let [nx, ny, _] = grid.dims;
    let strides = [1, nx, nx * ny];
    let mut line = Vec::new();
    let mut scratch = Envelope::default();
    for axis in 0..3 {
        let n = grid.dims[axis];
        let stride = strides[axis];
        let spacing = grid.spacing[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (n0, n1) = (grid.dims[others[0]], grid.dims[others[1]]);
        for b in 0..n1 {
            for a in 0..n0 {
                let start = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| d2[start + k * stride]));
                scratch.transform(&line, spacing);
                for (k, &v) in scratch.out.iter().enumerate() {
                    d2[start + k * stride] = v;
                }
            }
        }
    }
    d2.into_iter().map(f64::sqrt).collect()
}

#[derive(Default)]
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
    out: Vec<f64>,
}

impl Envelope {
    /// 1D squared-distance transform of `f` with sample spacing `h`.
    fn transform(&mut self, f: &[f64], h: f64) {
        let n = f.len();
        self.sites.clear();
        self.bounds.clear();
        self.out.clear();
        let pos = |q: usize| q as f64 * h;
        let meet = |q: usize, v: usize| {
            ((f[q] + pos(q) * pos(q)) - (f[v] + pos(v) * pos(v))) / (2.0 * (pos(q) - pos(v)))
        };
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            while let Some(&v) = self.sites.last() {
                let s = meet(q, v);
                if s <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.bounds.push(s);
                    break;
                }
            }
            if self.sites.is_empty() {
                self.bounds.push(f64::NEG_INFINITY);
            }
            self.sites.push(q);
        }
        if self.sites.is_empty() {
            self.out.resize(n, f64::INFINITY);
            return;
        }
        // bounds[k] is where site k takes over from site k - 1
        let mut k = 0;
        for p in 0..n {
            let x = pos(p);
            while k + 1 < self.sites.len() && self.bounds[k + 1] < x {
                k += 1;
            }
            let q = self.sites[k];
            let dx = (p as f64 - q as f64) * h;
            self.out.push(f[q] + dx * dx);
        }
    }
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Hausdorff, average symmetric surface distance and HD95 for one class.
pub fn surface_distances(
    pred: &LabelVolume,
    gt: &LabelVolume,
    c: ClassId,
) -> Result<SurfaceDistances> {
    check_pair(pred, gt)?;
    let sp = surface_voxels(pred, c);
    let sg = surface_voxels(gt, c);
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::EmptySurface(c.name()));
    }
    let grid = gt.grid();
    let to_gt = distance_map(grid, &sg);
    let to_pred = distance_map(grid, &sp);
    let mut forward: Vec<f64> = sp.iter().map(|&i| to_gt[i]).collect();
    let mut backward: Vec<f64> = sg.iter().map(|&i| to_pred[i]).collect();

    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let hd_mm = max(&forward).max(max(&backward));
    let total = numeric::sum(forward.iter().chain(&backward).copied());
    let assd_mm = total / (forward.len() + backward.len()) as f64;
    let hd95_mm = percentile(&mut forward, 0.95).max(percentile(&mut backward, 0.95));
    Ok(SurfaceDistances {
        hd_mm,
        assd_mm,
        hd95_mm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ClassId,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub gt_voxels: usize,
    pub pred_voxels: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
    /// Classes present in ground truth.
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub spacing: [f64; 3],
    pub policy: String,
    pub classes: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAverages,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| numeric::sum(v.iter().copied()) / v.len() as f64)
}

impl MacroAverages {
    pub fn over(classes: &[ClassMetrics]) -> MacroAverages {
        let present: Vec<&ClassMetrics> = classes.iter().filter(|m| m.gt_voxels > 0).collect();
        let avg = |f: fn(&ClassMetrics) -> Option<f64>| mean_of(present.iter().map(|m| f(m)));
        MacroAverages {
            dice: avg(|m| m.dice),
            jaccard: avg(|m| m.jaccard),
            hd_mm: avg(|m| m.hd_mm),
            assd_mm: avg(|m| m.assd_mm),
            hd95_mm: avg(|m| m.hd95_mm),
            classes: present.len(),
        }
    }
}

/// All metrics for every foreground class.
pub fn evaluate_case(case_id: &str, pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsReport> {
    check_pair(pred, gt)?;
    let mut classes = Vec::with_capacity(ClassId::FOREGROUND.len());
    for c in ClassId::FOREGROUND {
        let ov = overlap(pred, gt, c)?;
        let sd = match surface_distances(pred, gt, c) {
            Ok(sd) => Some(sd),
            Err(Error::EmptySurface(_)) => None,
            Err(e) => return Err(e),
        };
        classes.push(ClassMetrics {
            class: c,
            dice: ov.map(|o| o.dice),
            jaccard: ov.map(|o| o.jaccard),
            hd_mm: sd.map(|s| s.hd_mm),
            assd_mm: sd.map(|s| s.assd_mm),
            hd95_mm: sd.map(|s| s.hd95_mm),
            gt_voxels: gt.count(c),
            pred_voxels: pred.count(c),
        });
    }
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        spacing: gt.spacing(),
        policy: EMPTY_CLASS_POLICY.to_string(),
        macro_avg: MacroAverages::over(&classes),
        classes,
    })
}

impl MetricsReport {
    pub fn class(&self, c: ClassId) -> Option<&ClassMetrics> {
        self.classes.iter().find(|m| m.class == c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<MetricsReport> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MetricsReport> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
