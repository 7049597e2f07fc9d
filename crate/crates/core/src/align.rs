//! Centroid-landmark Procrustes alignment and label-distribution atlases.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_volume, write_volume};
use crate::preprocess::{resample_onto, FovSpec, Interpolation};
use crate::volume::{ClassId, Grid, LabelVolume, Volume, Voxel, WorldPoint, NUM_CLASSES};

const NUM_LANDMARKS: usize = NUM_CLASSES - 1;

pub const ATLAS_FORMAT: &str = "cardioprior.atlas";
pub const ATLAS_VERSION: u32 = 1;

/// `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    #[inline]
    pub fn apply(&self, p: &WorldPoint) -> WorldPoint {
        self.rotation * p * self.scale + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, x: &WorldPoint) -> WorldPoint {
        self.rotation.transpose() * (x - self.translation) / self.scale
    }

    /// Checks orthonormality and orientation to `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.scale > 0.0
    }

    /// `[R | t]` as 12 reals, row-major.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(m: &[f64; 12], scale: f64) -> Self {
        let mut rotation = Matrix3::zeros();
        let mut translation = Vector3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rotation[(r, c)] = m[r * 4 + c];
            }
            translation[r] = m[r * 4 + 3];
        }
        RigidTransform {
            rotation,
            translation,
            scale,
        }
    }
}

/// Per-class centroids, one slot per foreground class in class-id order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkSet {
    pub points: [WorldPoint; NUM_LANDMARKS],
    pub present: [bool; NUM_LANDMARKS],
}

impl LandmarkSet {
    pub fn empty() -> Self {
        LandmarkSet {
            points: [WorldPoint::zeros(); NUM_LANDMARKS],
            present: [false; NUM_LANDMARKS],
        }
    }

    pub fn get(&self, c: ClassId) -> Option<WorldPoint> {
        let i = c.index().checked_sub(1)?;
        self.present[i].then_some(self.points[i])
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn transformed(&self, t: &RigidTransform) -> LandmarkSet {
        LandmarkSet {
            points: self.points.map(|p| t.apply(&p)),
            present: self.present,
        }
    }
}

/// Unweighted mean world coordinate of each foreground class.
pub fn class_centroids(labels: &LabelVolume) -> LandmarkSet {
    let g = labels.grid();
    let mut sums = [WorldPoint::zeros(); NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 {
            sums[l as usize] += g.world(i);
            counts[l as usize] += 1;
        }
    }
    let mut out = LandmarkSet::empty();
    for k in 0..NUM_LANDMARKS {
        if counts[k + 1] > 0 {
            out.points[k] = sums[k + 1] / counts[k + 1] as f64;
            out.present[k] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesFit {
    pub transform: RigidTransform,
    /// Σ ‖s·R·p + t − q‖² over the shared landmarks, mm².
    pub residual: f64,
    pub landmarks: usize,
}

/// Closed-form least-squares fit mapping `source` onto `target` over the
/// landmarks present in both. Reflections are excluded by flipping the last
/// singular direction when `det(U Vᵀ) < 0`.
pub fn procrustes_fit(
    source: &LandmarkSet,
    target: &LandmarkSet,
    with_scale: bool,
) -> Result<ProcrustesFit> {
    let shared: Vec<usize> = (0..NUM_LANDMARKS)
        .filter(|&k| source.present[k] && target.present[k])
        .collect();
    if shared.len() < 3 {
        return Err(Error::InsufficientLandmarks {
            present: shared.len(),
        });
    }
    let n = shared.len() as f64;
    let src_mean = shared.iter().map(|&k| source.points[k]).sum::<Vector3<f64>>() / n;
    let tgt_mean = shared.iter().map(|&k| target.points[k]).sum::<Vector3<f64>>() / n;
    let src = Matrix3xX::from_columns(
        &shared
            .iter()
            .map(|&k| source.points[k] - src_mean)
            .collect::<Vec<_>>(),
    );
    let tgt = Matrix3xX::from_columns(
        &shared
            .iter()
            .map(|&k| target.points[k] - tgt_mean)
            .collect::<Vec<_>>(),
    );

    let src_sv = (&src * src.transpose()).symmetric_eigen().eigenvalues;
    let mut sv: Vec<f64> = src_sv.iter().map(|e| e.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= f64::EPSILON || sv[1] <= 1e-9 * sv[0] {
        return Err(Error::DegenerateConfiguration(format!(
            "centered source landmarks have rank < 2 (singular values {sv:?})"
        )));
    }

    let cov = &tgt * src.transpose();
    let svd = cov.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
        trace / src.norm_squared()
    } else {
        1.0
    };
    let translation = tgt_mean - rotation * src_mean * scale;
    let transform = RigidTransform {
        rotation,
        translation,
        scale,
    };
    let residual = shared
        .iter()
        .map(|&k| (transform.apply(&source.points[k]) - target.points[k]).norm_squared())
        .sum();
    Ok(ProcrustesFit {
        transform,
        residual,
        landmarks: shared.len(),
    })
}

/// Resamples `v` onto `target`: the output voxel at `x` takes the input value
/// at `T⁻¹(x)`.
pub fn apply_transform<T: Voxel>(
    v: &Volume<T>,
    transform: &RigidTransform,
    target: &Grid,
    mode: Interpolation,
) -> Result<Volume<T>> {
    resample_onto(v, target, mode, |x| transform.apply_inverse(x))
}

/// Population label-distribution heatmaps in the registered reference space.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapAtlas {
    pub reference: FovSpec,
    /// Indexed by class id, background first.
    pub heatmaps: Vec<Volume<f64>>,
    pub case_ids: Vec<String>,
    /// Maps each case's world space into the reference space.
    pub transforms: BTreeMap<String, RigidTransform>,
    pub with_scale: bool,
    pub gpa_iters: usize,
    /// Sum of per-case fit residuals after each fitting round.
    pub objective_trace: Vec<f64>,
}

impl HeatmapAtlas {
    pub fn case_count(&self) -> usize {
        self.case_ids.len()
    }

    pub fn grid(&self) -> &Grid {
        self.heatmaps[0].grid()
    }

    pub fn heatmap(&self, c: ClassId) -> &Volume<f64> {
        &self.heatmaps[c.index()]
    }

    /// The eight heatmap values at one voxel.
    pub fn at(&self, voxel: usize) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| self.heatmaps[c].data()[voxel])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlasConfig {
    pub fov: FovSpec,
    /// Fitting rounds; at least one round always runs.
    pub gpa_iters: usize,
    pub with_scale: bool,
}

/// Generalized Procrustes over class-centroid landmarks, then averages the
/// aligned one-hot labels per class.
pub fn build_atlas(label_volumes: &[LabelVolume], cfg: &AtlasConfig) -> Result<HeatmapAtlas> {
    let ids: Vec<String> = (0..label_volumes.len()).map(|i| format!("case_{i}")).collect();
    build_atlas_named(&ids, label_volumes, cfg)
}

pub fn build_atlas_named(
    ids: &[String],
    label_volumes: &[LabelVolume],
    cfg: &AtlasConfig,
) -> Result<HeatmapAtlas> {
    cfg.fov.validate()?;
    if label_volumes.is_empty() {
        return Err(Error::InsufficientLandmarks { present: 0 });
    }
    if ids.len() != label_volumes.len() {
        return Err(Error::InvalidDocument(format!(
            "{} case ids for {} volumes",
            ids.len(),
            label_volumes.len()
        )));
    }
    let landmarks: Vec<LandmarkSet> = label_volumes.iter().map(class_centroids).collect();
    for l in &landmarks {
        if l.count() < 3 {
            return Err(Error::InsufficientLandmarks { present: l.count() });
        }
    }

    // initial reference: case 0 re-centered at the FOV center (world origin)
    let mut reference = landmarks[0];
    let mean = (0..NUM_LANDMARKS)
        .filter(|&k| reference.present[k])
        .map(|k| reference.points[k])
        .sum::<Vector3<f64>>()
        / reference.count() as f64;
    for k in 0..NUM_LANDMARKS {
        if reference.present[k] {
            reference.points[k] -= mean;
        }
    }

    let rounds = cfg.gpa_iters.max(1);
    let mut transforms = vec![RigidTransform::identity(); landmarks.len()];
    let mut objective_trace = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut objective = 0.0;
        for (l, t) in landmarks.iter().zip(transforms.iter_mut()) {
            let fit = procrustes_fit(l, &reference, cfg.with_scale)?;
            *t = fit.transform;
            objective += fit.residual;
        }
        objective_trace.push(objective);

        let mut next = LandmarkSet::empty();
        let mut counts = [0usize; NUM_LANDMARKS];
        for (l, t) in landmarks.iter().zip(&transforms) {
            let aligned = l.transformed(t);
            for k in 0..NUM_LANDMARKS {
                if aligned.present[k] {
                    next.points[k] += aligned.points[k];
                    counts[k] += 1;
                }
            }
        }
        for k in 0..NUM_LANDMARKS {
            if counts[k] > 0 {
                next.points[k] /= counts[k] as f64;
                next.present[k] = true;
            }
        }
        reference = next;
    }

    let grid = cfg.fov.reference_grid();
    let mut counts = vec![[0u32; NUM_CLASSES]; grid.len()];
    for (labels, t) in label_volumes.iter().zip(&transforms) {
        let aligned = apply_transform(labels, t, &grid, Interpolation::Nearest)?;
        for (count, &l) in counts.iter_mut().zip(aligned.data()) {
            count[l as usize] += 1;
        }
    }
    let n = label_volumes.len() as f64;
    let mut heatmaps: Vec<Vec<f64>> = vec![Vec::with_capacity(grid.len()); NUM_CLASSES];
    for count in &counts {
        let mut fg_sum = 0.0;
        for c in 1..NUM_CLASSES {
            let h = count[c] as f64 / n;
            fg_sum += h;
            heatmaps[c].push(h);
        }
        heatmaps[0].push((1.0 - fg_sum).clamp(0.0, 1.0));
    }
    Ok(HeatmapAtlas {
        reference: cfg.fov,
        heatmaps: heatmaps
            .into_iter()
            .map(|h| Volume::from_parts(grid, h))
            .collect(),
        case_ids: ids.to_vec(),
        transforms: ids.iter().cloned().zip(transforms).collect(),
        with_scale: cfg.with_scale,
        gpa_iters: cfg.gpa_iters,
        objective_trace,
    })
}

/// Optional separable Gaussian smoothing of the foreground heatmaps
/// (reflective boundaries); background is recomputed as the complement.
pub fn smooth_atlas(atlas: &HeatmapAtlas, sigma_mm: f64) -> Result<HeatmapAtlas> {
    if !(sigma_mm > 0.0) {
        return Err(Error::InvalidSpacing([sigma_mm; 3]));
    }
    let grid = *atlas.grid();
    let sigma = sigma_mm / atlas.reference.spacing_mm;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let mut out = atlas.clone();
    for c in 1..NUM_CLASSES {
        let mut data = atlas.heatmaps[c].data().to_vec();
        for axis in 0..3 {
            data = convolve_axis(&grid, &data, axis, &kernel, radius);
        }
        out.heatmaps[c] = Volume::from_parts(grid, data.iter().map(|v| v.clamp(0.0, 1.0)).collect());
    }
    let bg = (0..grid.len())
        .map(|i| {
            let s: f64 = (1..NUM_CLASSES).map(|c| out.heatmaps[c].data()[i]).sum();
            (1.0 - s).clamp(0.0, 1.0)
        })
        .collect();
    out.heatmaps[0] = Volume::from_parts(grid, bg);
    Ok(out)
}

pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

pub(crate) fn convolve_axis(grid: &Grid, data: &[f64], axis: usize, kernel: &[f64], radius: isize) -> Vec<f64> {
    let n = grid.dims[axis];
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut ijk = grid.coords(i);
        let center = ijk[axis] as isize;
        let mut acc = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            ijk[axis] = reflect(center + k as isize - radius, n);
            acc += w * data[grid.index(ijk[0], ijk[1], ijk[2])];
        }
        *o = acc;
    }
    out
}

// ---- atlas directory ----

#[derive(Debug, Serialize, Deserialize)]
struct TransformEntry {
    case_id: String,
    matrix: [f64; 12],
    scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AtlasManifest {
    format: String,
    version: u32,
    tool_version: String,
    reference_grid: FovSpec,
    class_names: Vec<String>,
    heatmap_files: Vec<String>,
    case_ids: Vec<String>,
    transforms: Vec<TransformEntry>,
    gpa_iters: usize,
    with_scale: bool,
    objective_trace: Vec<f64>,
}

pub fn heatmap_file_stem(c: ClassId) -> String {
    format!("heatmap_{}", c.name())
}

impl HeatmapAtlas {
    /// Writes `heatmap_<class>.mhd/.raw` per class plus `atlas.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in ClassId::ALL {
            write_volume(self.heatmap(c), dir.join(heatmap_file_stem(c)))?;
        }
        let manifest = AtlasManifest {
            format: ATLAS_FORMAT.into(),
            version: ATLAS_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            reference_grid: self.reference,
            class_names: ClassId::ALL.iter().map(|c| c.name().to_string()).collect(),
            heatmap_files: ClassId::ALL
                .iter()
                .map(|&c| format!("{}.mhd", heatmap_file_stem(c)))
                .collect(),
            case_ids: self.case_ids.clone(),
            transforms: self
                .case_ids
                .iter()
                .map(|id| {
                    let t = &self.transforms[id];
                    TransformEntry {
                        case_id: id.clone(),
                        matrix: t.to_row_major(),
                        scale: t.scale,
                    }
                })
                .collect(),
            gpa_iters: self.gpa_iters,
            with_scale: self.with_scale,
            objective_trace: self.objective_trace.clone(),
        };
        let path = dir.join("atlas.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<HeatmapAtlas> {
        let dir = dir.as_ref();
        let path = dir.join("atlas.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: AtlasManifest = serde_json::from_str(&text)?;
        if m.format != ATLAS_FORMAT || m.version != ATLAS_VERSION {
            return Err(Error::InvalidDocument(format!(
                "expected {ATLAS_FORMAT} v{ATLAS_VERSION}, found {} v{}",
                m.format, m.version
            )));
        }
        let expected: Vec<&str> = ClassId::ALL.iter().map(|c| c.name()).collect();
        if m.class_names != expected {
            return Err(Error::InvalidDocument(format!(
                "atlas class roster {:?} does not match {:?}",
                m.class_names, expected
            )));
        }
        m.reference_grid.validate()?;
        let grid = m.reference_grid.reference_grid();
        let mut heatmaps = Vec::with_capacity(NUM_CLASSES);
        for c in ClassId::ALL {
            let v = read_volume(dir.join(heatmap_file_stem(c)))?.into_f64();
            if v.grid() != &grid {
                return Err(Error::GridMismatch(format!(
                    "heatmap {} is not on the reference grid",
                    c.name()
                )));
            }
            heatmaps.push(v);
        }
        let transforms = m
            .transforms
            .iter()
            .map(|t| {
                (
                    t.case_id.clone(),
                    RigidTransform::from_row_major(&t.matrix, t.scale),
                )
            })
            .collect();
        Ok(HeatmapAtlas {
            reference: m.reference_grid,
            heatmaps,
            case_ids: m.case_ids,
            transforms,
            with_scale: m.with_scale,
            gpa_iters: m.gpa_iters,
            objective_trace: m.objective_trace,
        })
    }
}
