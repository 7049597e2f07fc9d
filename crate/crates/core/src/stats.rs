//! Soft shape descriptors (volumes, centroids, central second moments,
//! centroid relations) and their population statistics.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, dd, Dd};
use crate::volume::{one_hot, ClassField, ClassId, LabelVolume, ProbVolume, WorldPoint, NUM_CLASSES};

/// Minimum soft mass (in voxels) for centroid and moment quantities.
pub const MASS_EPSILON: f64 = 1e-6;

/// Centroid segments shorter than this are omitted from descriptors, mm.
pub const MIN_SEGMENT_MM: f64 = 1e-9;

pub const STATS_FORMAT: &str = "cardioprior.stats";
pub const STATS_VERSION: u32 = 1;

/// Σ_x p_c(x), in voxels.
pub fn soft_mass(p: &ProbVolume, c: ClassId) -> f64 {
    field_mass(p.field(), c)
}

pub(crate) fn field_mass(p: &ClassField, c: ClassId) -> f64 {
    numeric::round(precise_mass(p, c))
}

pub(crate) fn precise_mass(p: &ClassField, c: ClassId) -> Dd {
    let c = c.index();
    p.data()
        .chunks_exact(NUM_CLASSES)
        .fold(dd(0.0), |acc, v| acc + v[c])
}

/// Soft volume in mm³.
pub fn soft_volume(p: &ProbVolume, c: ClassId) -> f64 {
    soft_mass(p, c) * p.grid().voxel_volume()
}

fn checked_mass(p: &ClassField, c: ClassId, mass_epsilon: f64) -> Result<f64> {
    let mass = field_mass(p, c);
    if mass < mass_epsilon {
        return Err(Error::VanishingMass {
            class: c.name(),
            mass,
        });
    }
    Ok(mass)
}

/// Centroid relative to the grid center.
pub(crate) fn local_centroid(p: &ClassField, c: ClassId, mass: f64) -> WorldPoint {
    let m = precise_local_centroid(p, c, dd(mass));
    WorldPoint::from(m.map(numeric::round))
}

pub(crate) fn precise_local_centroid(p: &ClassField, c: ClassId, mass: Dd) -> [Dd; 3] {
    let g = p.grid();
    let ci = c.index();
    let mut sum = [dd(0.0); 3];
    for (i, v) in p.data().chunks_exact(NUM_CLASSES).enumerate() {
        let w = v[ci];
        if w != 0.0 {
            let x = g.local(i);
            for a in 0..3 {
                sum[a] += Dd::new_mul(x[a], w);
            }
        }
    }
    sum.map(|s| numeric::div(s, mass))
}

fn weighted_centroid(p: &ClassField, c: ClassId, mass: f64) -> WorldPoint {
    p.grid().center() + local_centroid(p, c, mass)
}

/// Probability-weighted mean world position of class `c`.
pub fn soft_centroid(p: &ProbVolume, c: ClassId, mass_epsilon: f64) -> Result<WorldPoint> {
    let mass = checked_mass(p.field(), c, mass_epsilon)?;
    Ok(weighted_centroid(p.field(), c, mass))
}

/// Central second moment Σ p (x−m)(x−m)ᵀ / Σ p, mm².
pub fn soft_second_moment(p: &ProbVolume, c: ClassId, mass_epsilon: f64) -> Result<Matrix3<f64>> {
    Ok(class_moments(p, c, mass_epsilon)?.second_moment)
}

/// Zeroth, first and central second moments of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMoments {
    pub mass: f64,
    pub centroid: WorldPoint,
    pub second_moment: Matrix3<f64>,
}

pub fn class_moments(p: &ProbVolume, c: ClassId, mass_epsilon: f64) -> Result<ClassMoments> {
    field_moments(p.field(), c, mass_epsilon)
}

/// Moments of an arbitrary non-negative per-voxel field (not necessarily normalized).
pub(crate) fn field_moments(p: &ClassField, c: ClassId, mass_epsilon: f64) -> Result<ClassMoments> {
    let mut m = local_moments(p, c, mass_epsilon)?;
    m.centroid += p.grid().center();
    Ok(m)
}

/// As [`field_moments`] with the centroid relative to the grid center.
pub(crate) fn local_moments(p: &ClassField, c: ClassId, mass_epsilon: f64) -> Result<ClassMoments> {
    Ok(precise_moments(p, c, mass_epsilon)?.round())
}

/// Moments in double-double precision; centroid relative to the grid center,
/// second moment as the upper triangle `xx xy xz yy yz zz`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreciseMoments {
    pub mass: Dd,
    pub centroid: [Dd; 3],
    pub second: [Dd; 6],
}

impl PreciseMoments {
    pub(crate) fn round(&self) -> ClassMoments {
        let [xx, xy, xz, yy, yz, zz] = self.second.map(numeric::round);
        ClassMoments {
            mass: numeric::round(self.mass),
            centroid: WorldPoint::from(self.centroid.map(numeric::round)),
            second_moment: Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz),
        }
    }
}

pub(crate) fn precise_moments(
    p: &ClassField,
    c: ClassId,
    mass_epsilon: f64,
) -> Result<PreciseMoments> {
    let mass = precise_mass(p, c);
    if mass.hi() < mass_epsilon {
        return Err(Error::VanishingMass {
            class: c.name(),
            mass: mass.hi(),
        });
    }
    let centroid = precise_local_centroid(p, c, mass);
    let g = p.grid();
    let ci = c.index();
    let mut acc = [dd(0.0); 6];
    for (i, v) in p.data().chunks_exact(NUM_CLASSES).enumerate() {
        let w = v[ci];
        if w != 0.0 {
            let x = g.local(i);
            let d: [Dd; 3] = std::array::from_fn(|a| x[a] - centroid[a]);
            let wd = d.map(|da| da * w);
            acc[0] += wd[0] * d[0];
            acc[1] += wd[0] * d[1];
            acc[2] += wd[0] * d[2];
            acc[3] += wd[1] * d[1];
            acc[4] += wd[1] * d[2];
            acc[5] += wd[2] * d[2];
        }
    }
    Ok(PreciseMoments {
        mass,
        centroid,
        second: acc.map(|s| numeric::div(s, mass)),
    })
}

/// Foreground class pair `(i, j)` with `i < j`.
pub type PairKey = (ClassId, ClassId);
/// Triple `(i, j, k)`: angle at vertex `j` between `i` and `k`, with `i < k`.
pub type TripleKey = (ClassId, ClassId, ClassId);

/// Every foreground pair in canonical order.
pub fn all_pairs() -> impl Iterator<Item = PairKey> {
    let fg = ClassId::FOREGROUND;
    (0..fg.len()).flat_map(move |a| (a + 1..fg.len()).map(move |b| (fg[a], fg[b])))
}

/// Every vertex-ordered foreground triple (105 of them).
pub fn all_triples() -> impl Iterator<Item = TripleKey> {
    let fg = ClassId::FOREGROUND;
    all_pairs().flat_map(move |(i, k)| {
        fg.into_iter()
            .filter(move |&j| j != i && j != k)
            .map(move |j| (i, j, k))
    })
}

/// Cosine of the angle at `vertex` between `a` and `b`, if both segments are
/// at least `min_segment` long.
pub fn vertex_cosine(
    a: &WorldPoint,
    vertex: &WorldPoint,
    b: &WorldPoint,
    min_segment: f64,
) -> Option<f64> {
    let u = a - vertex;
    let v = b - vertex;
    let (nu, nv) = (u.norm(), v.norm());
    if nu < min_segment || nv < min_segment {
        return None;
    }
    Some(u.dot(&v) / (nu * nv))
}

/// Pairwise centroid distances and vertex cosines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relations {
    pub pair_distance: BTreeMap<PairKey, f64>,
    pub triple_cosine: BTreeMap<TripleKey, f64>,
}

/// Relations among present centroids (indexed by class id; background ignored).
pub fn relations(centroids: &[Option<WorldPoint>; NUM_CLASSES], min_segment: f64) -> Relations {
    let mut out = Relations::default();
    for (i, j) in all_pairs() {
        if let (Some(a), Some(b)) = (&centroids[i.index()], &centroids[j.index()]) {
            let d = (a - b).norm();
            if d >= min_segment {
                out.pair_distance.insert((i, j), d);
            }
        }
    }
    for (i, j, k) in all_triples() {
        if let (Some(a), Some(v), Some(b)) = (
            &centroids[i.index()],
            &centroids[j.index()],
            &centroids[k.index()],
        ) {
            if let Some(cos) = vertex_cosine(a, v, b, min_segment) {
                out.triple_cosine.insert((i, j, k), cos);
            }
        }
    }
    out
}

/// Shape descriptor of one case. Arrays are indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseDescriptor {
    pub soft_volume: [f64; NUM_CLASSES],
    pub soft_centroid: [Option<WorldPoint>; NUM_CLASSES],
    pub second_moment: [Option<Matrix3<f64>>; NUM_CLASSES],
    pub relations: Relations,
}

impl CaseDescriptor {
    pub fn is_present(&self, c: ClassId) -> bool {
        self.soft_centroid[c.index()].is_some()
    }
}

pub fn describe(p: &ProbVolume, mass_epsilon: f64) -> CaseDescriptor {
    let mut soft_volume = [0.0; NUM_CLASSES];
    let mut soft_centroid = [None; NUM_CLASSES];
    let mut second_moment = [None; NUM_CLASSES];
    for c in ClassId::FOREGROUND {
        soft_volume[c.index()] = self::soft_volume(p, c);
        if let Ok(m) = class_moments(p, c, mass_epsilon) {
            soft_centroid[c.index()] = Some(m.centroid);
            second_moment[c.index()] = Some(m.second_moment);
        }
    }
    let relations = relations(&soft_centroid, MIN_SEGMENT_MM);
    CaseDescriptor {
        soft_volume,
        soft_centroid,
        second_moment,
        relations,
    }
}

pub fn describe_labels(labels: &LabelVolume) -> Result<CaseDescriptor> {
    Ok(describe(&one_hot(labels)?, MASS_EPSILON))
}

/// Mean, population standard deviation and sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// Order-independent: values are sorted before every reduction.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if v[0] == v[n - 1] {
            return Some(Summary {
                mean: v[0],
                std: 0.0,
                n,
            });
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        dev.sort_by(f64::total_cmp);
        let std = (dev.iter().sum::<f64>() / n as f64).sqrt();
        Some(Summary { mean, std, n })
    }
}

/// Per-class population statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class: ClassId,
    pub volume: Summary,
    pub centroid_mean: WorldPoint,
    pub second_moment_mean: Matrix3<f64>,
}

impl ClassStats {
    pub fn n(&self) -> usize {
        self.volume.n
    }
}

/// Population statistics that parameterize the shape losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeStats {
    pub n_cases: usize,
    /// Indexed by class id; background is always `None`.
    pub classes: [Option<ClassStats>; NUM_CLASSES],
    pub pairs: BTreeMap<PairKey, Summary>,
    pub triples: BTreeMap<TripleKey, Summary>,
}

impl ShapeStats {
    pub fn class(&self, c: ClassId) -> Option<&ClassStats> {
        self.classes[c.index()].as_ref()
    }
}

/// Population statistics over case descriptors; each quantity uses only the
/// cases where it is present.
pub fn aggregate(descriptors: &[CaseDescriptor]) -> ShapeStats {
    let mut classes: [Option<ClassStats>; NUM_CLASSES] = Default::default();
    for c in ClassId::FOREGROUND {
        let present: Vec<&CaseDescriptor> =
            descriptors.iter().filter(|d| d.is_present(c)).collect();
        let volumes: Vec<f64> = present.iter().map(|d| d.soft_volume[c.index()]).collect();
        let Some(volume) = Summary::of(&volumes) else {
            continue;
        };
        let mut centroid_mean = WorldPoint::zeros();
        for a in 0..3 {
            let vals: Vec<f64> = present
                .iter()
                .map(|d| d.soft_centroid[c.index()].expect("present")[a])
                .collect();
            centroid_mean[a] = Summary::of(&vals).expect("nonempty").mean;
        }
        let mut second_moment_mean = Matrix3::zeros();
        for r in 0..3 {
            for s in 0..3 {
                let vals: Vec<f64> = present
                    .iter()
                    .map(|d| d.second_moment[c.index()].expect("present")[(r, s)])
                    .collect();
                second_moment_mean[(r, s)] = Summary::of(&vals).expect("nonempty").mean;
            }
        }
        classes[c.index()] = Some(ClassStats {
            class: c,
            volume,
            centroid_mean,
            second_moment_mean,
        });
    }

    let mut pairs = BTreeMap::new();
    for key in all_pairs() {
        let vals: Vec<f64> = descriptors
            .iter()
            .filter_map(|d| d.relations.pair_distance.get(&key).copied())
            .collect();
        if let Some(s) = Summary::of(&vals) {
            pairs.insert(key, s);
        }
    }
    let mut triples = BTreeMap::new();
    for key in all_triples() {
        let vals: Vec<f64> = descriptors
            .iter()
            .filter_map(|d| d.relations.triple_cosine.get(&key).copied())
            .collect();
        if let Some(s) = Summary::of(&vals) {
            triples.insert(key, s);
        }
    }
    ShapeStats {
        n_cases: descriptors.len(),
        classes,
        pairs,
        triples,
    }
}

// ---- stats.json ----

#[derive(Debug, Serialize, Deserialize)]
struct ClassEntry {
    name: String,
    volume_mean: Option<f64>,
    volume_std: Option<f64>,
    centroid_mean: Option<[f64; 3]>,
    second_moment_mean: Option<[f64; 9]>,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairEntry {
    pair: [u8; 2],
    mean: f64,
    std: f64,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripleEntry {
    triple: [u8; 3],
    cos_mean: f64,
    cos_std: f64,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsDocument {
    format: String,
    version: u32,
    n_cases: usize,
    classes: Vec<ClassEntry>,
    pairs: Vec<PairEntry>,
    triples: Vec<TripleEntry>,
}

fn class_of(id: u8) -> Result<ClassId> {
    ClassId::from_u8(id)
        .filter(|c| *c != ClassId::Background)
        .ok_or_else(|| Error::InvalidDocument(format!("{id} is not a foreground class id")))
}

impl ShapeStats {
    pub fn to_json(&self) -> Result<String> {
        let classes = ClassId::FOREGROUND
            .iter()
            .map(|&c| match self.class(c) {
                Some(s) => ClassEntry {
                    name: c.name().into(),
                    volume_mean: Some(s.volume.mean),
                    volume_std: Some(s.volume.std),
                    centroid_mean: Some([s.centroid_mean[0], s.centroid_mean[1], s.centroid_mean[2]]),
                    second_moment_mean: Some(std::array::from_fn(|i| {
                        s.second_moment_mean[(i / 3, i % 3)]
                    })),
                    n: s.n(),
                },
                None => ClassEntry {
                    name: c.name().into(),
                    volume_mean: None,
                    volume_std: None,
                    centroid_mean: None,
                    second_moment_mean: None,
                    n: 0,
                },
            })
            .collect();
        let doc = StatsDocument {
            format: STATS_FORMAT.into(),
            version: STATS_VERSION,
            n_cases: self.n_cases,
            classes,
            pairs: self
                .pairs
                .iter()
                .map(|(&(i, j), s)| PairEntry {
                    pair: [i as u8, j as u8],
                    mean: s.mean,
                    std: s.std,
                    n: s.n,
                })
                .collect(),
            triples: self
                .triples
                .iter()
                .map(|(&(i, j, k), s)| TripleEntry {
                    triple: [i as u8, j as u8, k as u8],
                    cos_mean: s.mean,
                    cos_std: s.std,
                    n: s.n,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<ShapeStats> {
        let doc: StatsDocument = serde_json::from_str(text)?;
        if doc.format != STATS_FORMAT || doc.version != STATS_VERSION {
            return Err(Error::InvalidDocument(format!(
                "expected {STATS_FORMAT} v{STATS_VERSION}, found {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.classes.len() != ClassId::FOREGROUND.len() {
            return Err(Error::InvalidDocument(format!(
                "expected {} class entries, found {}",
                ClassId::FOREGROUND.len(),
                doc.classes.len()
            )));
        }
        let mut classes: [Option<ClassStats>; NUM_CLASSES] = Default::default();
        for (entry, c) in doc.classes.iter().zip(ClassId::FOREGROUND) {
            if entry.name != c.name() {
                return Err(Error::InvalidDocument(format!(
                    "class entry `{}` found where `{}` was expected",
                    entry.name,
                    c.name()
                )));
            }
            if let (Some(mean), Some(std), Some(cm), Some(sm)) = (
                entry.volume_mean,
                entry.volume_std,
                entry.centroid_mean,
                entry.second_moment_mean,
            ) {
                classes[c.index()] = Some(ClassStats {
                    class: c,
                    volume: Summary {
                        mean,
                        std,
                        n: entry.n,
                    },
                    centroid_mean: WorldPoint::new(cm[0], cm[1], cm[2]),
                    second_moment_mean: Matrix3::from_row_slice(&sm),
                });
            }
        }
        let mut pairs = BTreeMap::new();
        for p in &doc.pairs {
            let (i, j) = (class_of(p.pair[0])?, class_of(p.pair[1])?);
            if i >= j {
                return Err(Error::InvalidDocument(format!("pair {:?} not ordered", p.pair)));
            }
            pairs.insert(
                (i, j),
                Summary {
                    mean: p.mean,
                    std: p.std,
                    n: p.n,
                },
            );
        }
        let mut triples = BTreeMap::new();
        for t in &doc.triples {
            let (i, j, k) = (class_of(t.triple[0])?, class_of(t.triple[1])?, class_of(t.triple[2])?);
            if i >= k || j == i || j == k {
                return Err(Error::InvalidDocument(format!(
                    "triple {:?} not vertex-ordered",
                    t.triple
                )));
            }
            triples.insert(
                (i, j, k),
                Summary {
                    mean: t.cos_mean,
                    std: t.cos_std,
                    n: t.n,
                },
            );
        }
        Ok(ShapeStats {
            n_cases: doc.n_cases,
            classes,
            pairs,
            triples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ShapeStats> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Grid, Volume};
    use nalgebra::{Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3], spacing: f64) -> Grid {
        Grid::new(dims, [spacing; 3], [0.0; 3]).unwrap()
    }

    fn random_soft(g: Grid, seed: u64) -> ProbVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(g.len() * NUM_CLASSES);
        for _ in 0..g.len() {
            let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|r| r / s));
        }
        ProbVolume::new(g, data).unwrap()
    }

    #[test]
    fn counting_volume() {
        let g = grid([5, 5, 5], 1.0);
        let mut d = vec![0u8; g.len()];
        for v in d.iter_mut().take(10) {
            *v = 2;
        }
        let p = one_hot(&Volume::new(g, d).unwrap()).unwrap();
        assert_eq!(soft_volume(&p, ClassId::RightVentricle), 10.0);
        assert_eq!(soft_volume(&p, ClassId::LeftAtrium), 0.0);
    }

    #[test]
    fn half_probability_volume() {
        let g = grid([4, 4, 4], 2.0);
        let mut data = Vec::new();
        for _ in 0..g.len() {
            data.extend_from_slice(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let p = ProbVolume::new(g, data).unwrap();
        assert_eq!(soft_volume(&p, ClassId::LeftVentricle), 256.0);
    }

    #[test]
    fn two_point_moments() {
        let g = grid([3, 1, 1], 1.0);
        let mut data = vec![0.0; 3 * NUM_CLASSES];
        for (vox, p1) in [(0, 0.3), (1, 0.0), (2, 0.3)] {
            data[vox * NUM_CLASSES + 1] = p1;
            data[vox * NUM_CLASSES] = 1.0 - p1;
        }
        let p = ProbVolume::new(g, data).unwrap();
        let c = ClassId::LeftVentricle;
        assert!((soft_centroid(&p, c, MASS_EPSILON).unwrap()[0] - 1.0).abs() < 1e-15);
        let m = soft_second_moment(&p, c, MASS_EPSILON).unwrap();
        // d = 2 → d²/4 = 1
        let mut expected = Matrix3::zeros();
        expected[(0, 0)] = 1.0;
        assert!((m - expected).abs().max() < 1e-15);
    }

    #[test]
    fn single_voxel_moments() {
        let g = grid([4, 4, 4], 1.5);
        let mut d = vec![0u8; g.len()];
        d[g.index(1, 2, 3)] = 5;
        let p = one_hot(&Volume::new(g, d).unwrap()).unwrap();
        let m = class_moments(&p, ClassId::Myocardium, MASS_EPSILON).unwrap();
        assert_eq!(m.centroid, g.world_of([1, 2, 3]));
        assert_eq!(m.second_moment, Matrix3::zeros());
        assert!(matches!(
            soft_centroid(&p, ClassId::LeftAtrium, MASS_EPSILON),
            Err(Error::VanishingMass { .. })
        ));
    }

    #[test]
    fn soft_centroid_matches_weighted_mean() {
        let g = Grid::new([5, 6, 4], [0.9, 1.1, 2.0], [-4.0, 3.0, 1.0]).unwrap();
        let p = random_soft(g, 21);
        for c in ClassId::FOREGROUND {
            let (mut w, mut s) = (0.0, [0.0; 3]);
            for i in 0..g.len() {
                let [x, y, z] = g.coords(i);
                let pos = [
                    -4.0 + 0.9 * x as f64,
                    3.0 + 1.1 * y as f64,
                    1.0 + 2.0 * z as f64,
                ];
                let pc = p.at(i, c.index());
                w += pc;
                for a in 0..3 {
                    s[a] += pc * pos[a];
                }
            }
            let m = soft_centroid(&p, c, MASS_EPSILON).unwrap();
            for a in 0..3 {
                assert!((m[a] - s[a] / w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn second_moment_is_symmetric_psd() {
        let g = Grid::new([6, 5, 4], [1.0, 0.5, 2.0], [0.0; 3]).unwrap();
        let p = random_soft(g, 22);
        for c in ClassId::FOREGROUND {
            let m = soft_second_moment(&p, c, MASS_EPSILON).unwrap();
            assert!((m - m.transpose()).abs().max() < 1e-9);
            let eig = m.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e > -1e-9));
        }
    }

    #[test]
    fn soft_volume_is_linear() {
        let g = grid([4, 3, 5], 1.3);
        let (p1, p2) = (random_soft(g, 1), random_soft(g, 2));
        let alpha = 0.25;
        let mix: Vec<f64> = p1
            .data()
            .iter()
            .zip(p2.data())
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        let pm = ProbVolume::new(g, mix).unwrap();
        for c in ClassId::ALL {
            let lhs = soft_volume(&pm, c);
            let rhs = alpha * soft_volume(&p1, c) + (1.0 - alpha) * soft_volume(&p2, c);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    fn centroid_set(points: &[(ClassId, [f64; 3])]) -> [Option<WorldPoint>; NUM_CLASSES] {
        let mut out = [None; NUM_CLASSES];
        for (c, p) in points {
            out[c.index()] = Some(WorldPoint::new(p[0], p[1], p[2]));
        }
        out
    }

    #[test]
    fn relations_hand_geometry() {
        use ClassId::*;
        let cs = centroid_set(&[
            (LeftVentricle, [0.0, 0.0, 0.0]),
            (RightVentricle, [1.0, 0.0, 0.0]),
            (LeftAtrium, [0.0, 1.0, 0.0]),
        ]);
        let r = relations(&cs, MIN_SEGMENT_MM);
        assert_eq!(r.pair_distance[&(LeftVentricle, RightVentricle)], 1.0);
        assert_eq!(r.pair_distance[&(LeftVentricle, LeftAtrium)], 1.0);
        assert!((r.pair_distance[&(RightVentricle, LeftAtrium)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.triple_cosine[&(RightVentricle, LeftVentricle, LeftAtrium)], 0.0);
        assert_eq!(r.pair_distance.len(), 3);
        assert_eq!(r.triple_cosine.len(), 3);
    }

    #[test]
    fn collinear_cosines_are_unit() {
        use ClassId::*;
        let cs = centroid_set(&[
            (LeftVentricle, [0.0, 0.0, 0.0]),
            (RightVentricle, [1.0, 0.0, 0.0]),
            (LeftAtrium, [3.0, 0.0, 0.0]),
        ]);
        let r = relations(&cs, MIN_SEGMENT_MM);
        assert_eq!(r.triple_cosine[&(LeftVentricle, RightVentricle, LeftAtrium)], -1.0);
        assert_eq!(r.triple_cosine[&(RightVentricle, LeftVentricle, LeftAtrium)], 1.0);
    }

    #[test]
    fn coincident_centroids_are_omitted() {
        use ClassId::*;
        let cs = centroid_set(&[
            (LeftVentricle, [0.0, 0.0, 0.0]),
            (RightVentricle, [0.0, 0.0, 0.0]),
        ]);
        assert!(relations(&cs, MIN_SEGMENT_MM).pair_distance.is_empty());
    }

    #[test]
    fn triple_count() {
        assert_eq!(all_pairs().count(), 21);
        assert_eq!(all_triples().count(), 105);
    }

    #[test]
    fn relations_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cs = [None; NUM_CLASSES];
        for c in ClassId::FOREGROUND {
            cs[c.index()] = Some(WorldPoint::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ));
        }
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::new(0.3, -0.5, 0.8)), 1.1);
        let t = Vector3::new(12.0, -7.0, 3.5);
        let moved = cs.map(|p| p.map(|p| rot * p + t));
        let (a, b) = (relations(&cs, MIN_SEGMENT_MM), relations(&moved, MIN_SEGMENT_MM));
        for (k, v) in &a.pair_distance {
            assert!((v - b.pair_distance[k]).abs() < 1e-12);
        }
        for (k, v) in &a.triple_cosine {
            assert!((v - b.triple_cosine[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn second_moment_conjugates_under_rotation() {
        // analytic point set: masses at ±a along x, ±b along y
        let pts = [
            Vector3::new(3.0, 0.0, 0.0),
            Vector3::new(-3.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        ];
        let second = |pts: &[Vector3<f64>]| {
            let m = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            pts.iter()
                .map(|p| (p - m) * (p - m).transpose())
                .sum::<Matrix3<f64>>()
                / pts.len() as f64
        };
        let rot = Rotation3::from_euler_angles(0.2, -0.7, 1.3);
        let moved: Vec<_> = pts.iter().map(|p| rot * p).collect();
        let lhs = second(&moved);
        let rhs = rot.matrix() * second(&pts) * rot.matrix().transpose();
        assert!((lhs - rhs).abs().max() < 1e-9);
    }

    #[test]
    fn aggregate_single_and_pair() {
        let mk = |vol: f64| {
            let mut d = CaseDescriptor {
                soft_volume: [0.0; NUM_CLASSES],
                soft_centroid: [None; NUM_CLASSES],
                second_moment: [None; NUM_CLASSES],
                relations: Relations::default(),
            };
            d.soft_volume[1] = vol;
            d.soft_centroid[1] = Some(WorldPoint::new(vol, 0.0, 0.0));
            d.second_moment[1] = Some(Matrix3::identity());
            d
        };
        let one = aggregate(&[mk(90.0)]);
        let s = one.class(ClassId::LeftVentricle).unwrap();
        assert_eq!((s.volume.mean, s.volume.std, s.n()), (90.0, 0.0, 1));
        assert!(one.class(ClassId::RightVentricle).is_none());

        let two = aggregate(&[mk(90.0), mk(110.0)]);
        let s = two.class(ClassId::LeftVentricle).unwrap();
        assert_eq!((s.volume.mean, s.volume.std), (100.0, 10.0));
        assert_eq!(s.centroid_mean[0], 100.0);
    }

    fn random_labels(g: Grid, seed: u64) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new(g, (0..g.len()).map(|_| rng.random_range(0..8u8)).collect()).unwrap()
    }

    #[test]
    fn aggregate_is_order_independent() {
        let g = grid([6, 6, 6], 1.0);
        let mut ds: Vec<_> = (0..5)
            .map(|s| describe_labels(&random_labels(g, 100 + s)).unwrap())
            .collect();
        let a = aggregate(&ds);
        ds.reverse();
        ds.swap(0, 2);
        assert_eq!(aggregate(&ds), a);
    }

    #[test]
    fn json_round_trip_and_name_check() {
        let g = grid([6, 6, 6], 1.0);
        let ds: Vec<_> = (0..3)
            .map(|s| describe_labels(&random_labels(g, 200 + s)).unwrap())
            .collect();
        let stats = aggregate(&ds);
        let text = stats.to_json().unwrap();
        assert_eq!(ShapeStats::from_json(&text).unwrap(), stats);
        let swapped = text
            .replacen("\"left_ventricle\"", "\"tmp\"", 1)
            .replacen("\"right_ventricle\"", "\"left_ventricle\"", 1)
            .replacen("\"tmp\"", "\"right_ventricle\"", 1);
        assert!(ShapeStats::from_json(&swapped).is_err());
    }
}
