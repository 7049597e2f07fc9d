//! Synthetic seven-compartment hearts on a standardized grid.
//!
//! Compartments are analytic solids (ellipsoids and capsules) in a heart
//! frame whose unit is `R = 0.3 · min grid extent`, so a canonical heart spans
//! about 60% of the field of view. Each case applies a random rigid pose, a
//! global scale and per-class axis variation drawn from a ChaCha stream keyed
//! on `(seed, case_index)`. Where solids overlap the first class in
//! [`PRIORITY`] wins.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::FovSpec;
use crate::volume::{ClassId, Grid, LabelVolume, Volume, WorldPoint, NUM_CLASSES};

/// Overlap resolution order.
pub const PRIORITY: [ClassId; 7] = [
    ClassId::LeftVentricle,
    ClassId::Myocardium,
    ClassId::RightVentricle,
    ClassId::LeftAtrium,
    ClassId::RightAtrium,
    ClassId::AscendingAorta,
    ClassId::PulmonaryArtery,
];

/// Pseudo-CT base intensity per class, indexed by label value.
pub const BASE_INTENSITY: [f32; NUM_CLASSES] = [0.0, 1.0, 0.9, 0.95, 0.85, 0.5, 1.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub pose_rotation_max_deg: f64,
    pub translation_max_mm: f64,
    pub scale_range: [f64; 2],
    /// Each semi-axis or radius is scaled by `1 + u`, `u ~ U(-f, f)`.
    pub axis_variation: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        pose_rotation_max_deg: 0.0,
        translation_max_mm: 0.0,
        scale_range: [1.0, 1.0],
        axis_variation: 0.0,
    };
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            pose_rotation_max_deg: 10.0,
            translation_max_mm: 3.0,
            scale_range: [0.92, 1.08],
            axis_variation: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: FovSpec,
    pub seed: u64,
    pub jitter: Jitter,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: FovSpec {
                grid_size: [48; 3],
                spacing_mm: 2.0,
            },
            seed: 0,
            jitter: Jitter::default(),
            noise_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solid {
    Ellipsoid {
        center: WorldPoint,
        semi_axes: Vector3<f64>,
    },
    /// Segment `a`–`b` swept by a ball.
    Capsule {
        a: WorldPoint,
        b: WorldPoint,
        radius: f64,
    },
}

impl Solid {
    fn contains(&self, q: &WorldPoint) -> bool {
        match self {
            Solid::Ellipsoid { center, semi_axes } => {
                (q - center).component_div(semi_axes).norm_squared() <= 1.0
            }
            Solid::Capsule { a, b, radius } => {
                let ab = b - a;
                let t = ((q - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (q - (a + ab * t)).norm_squared() <= radius * radius
            }
        }
    }

    /// Closed-form volume in mm³.
    pub fn volume(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Solid::Ellipsoid { semi_axes, .. } => 4.0 / 3.0 * PI * semi_axes.iter().product::<f64>(),
            Solid::Capsule { a, b, radius } => {
                PI * radius * radius * (b - a).norm() + 4.0 / 3.0 * PI * radius.powi(3)
            }
        }
    }

    /// Largest distance from the frame origin to a point of the solid.
    fn reach(&self) -> f64 {
        match self {
            Solid::Ellipsoid { center, semi_axes } => center.norm() + semi_axes.max(),
            Solid::Capsule { a, b, radius } => a.norm().max(b.norm()) + radius,
        }
    }

    fn scaled(&self, s: f64, axes: &Vector3<f64>) -> Solid {
        match *self {
            Solid::Ellipsoid { center, semi_axes } => Solid::Ellipsoid {
                center: center * s,
                semi_axes: semi_axes.component_mul(axes) * s,
            },
            Solid::Capsule { a, b, radius } => Solid::Capsule {
                a: a * s,
                b: b * s,
                radius: radius * axes[0] * s,
            },
        }
    }
}

fn ellipsoid(c: [f64; 3], r: [f64; 3]) -> Solid {
    Solid::Ellipsoid {
        center: c.into(),
        semi_axes: r.into(),
    }
}

/// Canonical solids in units of `R`, in priority order. The myocardium is
/// the outer wall of the LV; priority carves the cavity out of it.
fn canonical() -> [(ClassId, Solid); 7] {
    [
        (ClassId::LeftVentricle, ellipsoid([0.2, -0.1, -0.3], [0.42, 0.42, 0.55])),
        (ClassId::Myocardium, ellipsoid([0.2, -0.1, -0.3], [0.55, 0.55, 0.68])),
        (ClassId::RightVentricle, ellipsoid([-0.5, 0.05, -0.3], [0.32, 0.4, 0.48])),
        (ClassId::LeftAtrium, ellipsoid([0.25, 0.2, 0.4], [0.28, 0.25, 0.22])),
        (ClassId::RightAtrium, ellipsoid([-0.45, 0.25, 0.35], [0.27, 0.25, 0.24])),
        (
            ClassId::AscendingAorta,
            Solid::Capsule {
                a: [0.0, -0.05, 0.15].into(),
                b: [0.05, -0.15, 0.8].into(),
                radius: 0.12,
            },
        ),
        (
            ClassId::PulmonaryArtery,
            Solid::Capsule {
                a: [-0.2, -0.3, 0.1].into(),
                b: [-0.1, -0.45, 0.75].into(),
                radius: 0.12,
            },
        ),
    ]
}

/// One case's placed heart.
#[derive(Debug, Clone, PartialEq)]
pub struct HeartGeometry {
    pub rotation: Rotation3<f64>,
    pub translation: WorldPoint,
    pub scale: f64,
    /// Solids in mm in the heart frame, in priority order.
    pub compartments: Vec<(ClassId, Solid)>,
}

impl HeartGeometry {
    pub fn label_at(&self, p: &WorldPoint) -> u8 {
        let q = self.rotation.inverse() * (p - self.translation);
        self.compartments
            .iter()
            .find(|(_, s)| s.contains(&q))
            .map_or(0, |(c, _)| *c as u8)
    }

    pub fn solid(&self, c: ClassId) -> Option<&Solid> {
        self.compartments.iter().find(|(k, _)| *k == c).map(|(_, s)| s)
    }
}

impl PhantomSpec {
    pub fn unit_mm(&self) -> f64 {
        let n = self.grid.grid_size.iter().min().copied().unwrap_or(0);
        0.3 * n as f64 * self.grid.spacing_mm
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let j = &self.jitter;
        let bad = |what: &str| Err(Error::DegenerateSpec(what.to_string()));
        if !(0.0..=45.0).contains(&j.pose_rotation_max_deg) {
            return bad("rotation maximum must lie in [0, 45] degrees");
        }
        if !(j.translation_max_mm >= 0.0 && j.translation_max_mm.is_finite()) {
            return bad("translation maximum must be finite and non-negative");
        }
        let [lo, hi] = j.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale range must be a positive interval");
        }
        if !(0.0..0.5).contains(&j.axis_variation) {
            return bad("axis variation must lie in [0, 0.5)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        let reach = canonical().iter().map(|(_, s)| s.reach()).fold(0.0, f64::max)
            * self.unit_mm()
            * hi
            * (1.0 + j.axis_variation)
            + j.translation_max_mm * 3f64.sqrt();
        let g = self.grid.reference_grid();
        let room = (0..3)
            .map(|a| (g.offset[a].abs()).min(g.far_corner()[a]))
            .fold(f64::INFINITY, f64::min);
        if reach > room {
            return Err(Error::DegenerateSpec(format!(
                "compartments reach {reach:.1} mm from the center but the voxel centers only reach {room:.1} mm"
            )));
        }
        Ok(())
    }

    /// Draws the pose and shape of one case.
    pub fn geometry(&self, case_index: u64) -> Result<HeartGeometry> {
        self.validate()?;
        let mut rng = self.stream(case_index);
        Ok(self.draw_geometry(&mut rng))
    }

    fn stream(&self, case_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(case_index);
        rng
    }

    fn draw_geometry(&self, rng: &mut ChaCha8Rng) -> HeartGeometry {
        let j = &self.jitter;
        let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let axis = Vector3::new(uniform(-1.0, 1.0), uniform(-1.0, 1.0), uniform(-1.0, 1.0));
        let angle = uniform(0.0, j.pose_rotation_max_deg.to_radians());
        let rotation = match Unit::try_new(axis, 1e-9) {
            Some(axis) => Rotation3::from_axis_angle(&axis, angle),
            None => Rotation3::identity(),
        };
        let t = j.translation_max_mm;
        let translation = Vector3::new(uniform(-t, t), uniform(-t, t), uniform(-t, t));
        let scale = uniform(j.scale_range[0], j.scale_range[1]);
        let f = j.axis_variation;
        let unit = self.unit_mm() * scale;
        let compartments = canonical()
            .iter()
            .map(|(c, s)| {
                let axes = Vector3::new(uniform(-f, f), uniform(-f, f), uniform(-f, f)).add_scalar(1.0);
                (*c, s.scaled(unit, &axes))
            })
            .collect();
        HeartGeometry {
            rotation,
            translation,
            scale,
            compartments,
        }
    }
}

/// Image and labels for one case. A pure function of `(spec, case_index)`.
pub fn generate(spec: &PhantomSpec, case_index: u64) -> Result<(Volume<f32>, LabelVolume)> {
    spec.validate()?;
    let mut rng = spec.stream(case_index);
    let geometry = spec.draw_geometry(&mut rng);
    let grid: Grid = spec.grid.reference_grid();
    let labels: Vec<u8> = (0..grid.len()).map(|i| geometry.label_at(&grid.world(i))).collect();
    let image = labels
        .iter()
        .map(|&l| {
            let n: f64 = rng.sample(StandardNormal);
            BASE_INTENSITY[l as usize] + (spec.noise_sigma * n) as f32
        })
        .collect();
    Ok((Volume::new(grid, image)?, Volume::new(grid, labels)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    Erode,
    Dilate,
    DropClass,
    SwapBoundary,
}

impl FromStr for DegradeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "erode" => Ok(DegradeMode::Erode),
            "dilate" => Ok(DegradeMode::Dilate),
            "drop_class" | "drop" => Ok(DegradeMode::DropClass),
            "swap_boundary" | "swap" => Ok(DegradeMode::SwapBoundary),
            _ => Err(Error::UnknownMode(s.to_string())),
        }
    }
}

/// Corrupts a label map.
///
/// `magnitude` is the number of 6-connected passes for `Erode` and `Dilate`,
/// the label value to remove for `DropClass`, and the fraction of
/// inter-class boundary voxels relabelled for `SwapBoundary`.
pub fn degrade(labels: &LabelVolume, mode: DegradeMode, magnitude: f64, seed: u64) -> Result<LabelVolume> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidDocument(format!("degrade magnitude {magnitude}")));
    }
    let grid = *labels.grid();
    let mut data = labels.data().to_vec();
    match mode {
        DegradeMode::Erode => {
            for _ in 0..magnitude.round() as usize {
                let prev = data.clone();
                for i in 0..grid.len() {
                    let c = prev[i];
                    if c != 0 && grid.neighbors6(i).any(|n| n.is_none_or(|j| prev[j] != c)) {
                        data[i] = 0;
                    }
                }
            }
        }
        DegradeMode::Dilate => {
            for _ in 0..magnitude.round() as usize {
                let prev = data.clone();
                for i in 0..grid.len() {
                    if prev[i] == 0 {
                        if let Some(c) = grid.neighbors6(i).flatten().map(|j| prev[j]).find(|&c| c != 0) {
                            data[i] = c;
                        }
                    }
                }
            }
        }
        DegradeMode::DropClass => {
            let c = magnitude.round();
            if c > 0.0 && c < NUM_CLASSES as f64 {
                for l in &mut data {
                    if *l == c as u8 {
                        *l = 0;
                    }
                }
            } else if c != 0.0 {
                return Err(Error::InvalidDocument(format!("no foreground class {c}")));
            }
        }
        DegradeMode::SwapBoundary => {
            let frac = magnitude.min(1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..grid.len() {
                let c = labels.data()[i];
                let other = grid
                    .neighbors6(i)
                    .flatten()
                    .map(|j| labels.data()[j])
                    .find(|&d| d != c);
                // draw for every boundary voxel so the pattern is stable in `frac`
                if let Some(d) = other {
                    if rng.random::<f64>() < frac {
                        data[i] = d;
                    }
                }
            }
        }
    }
    Volume::new(grid, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCase {
    pub index: u64,
    pub image: String,
    pub label: String,
}

/// The `dataset.json` manifest written next to generated cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: PhantomSpec,
    pub cases: Vec<DatasetCase>,
}

impl DatasetManifest {
    pub const FORMAT: &'static str = "cardioprior-dataset/1";

    pub fn new(spec: PhantomSpec, cases: Vec<DatasetCase>) -> Self {
        DatasetManifest {
            format: Self::FORMAT.to_string(),
            spec,
            cases,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format != Self::FORMAT {
            return Err(Error::InvalidDocument(format!("unsupported dataset format `{}`", m.format)));
        }
        Ok(m)
    }
}

/// File stem of case `k`.
pub fn case_stem(k: u64, kind: &str) -> String {
    format!("case_{k:03}_{kind}")
}
