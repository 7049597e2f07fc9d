//! Dense 3D voxel grids, the class roster, and per-voxel class fields.
//!
//! Voxel order is x-fastest everywhere: `index = x + nx * (y + ny * z)`.
//! World coordinates are axis-aligned: the center of voxel `(i, j, k)` sits at
//! `offset + (i, j, k) * spacing` in millimeters.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes including background.
pub const NUM_CLASSES: usize = 8;

/// World position in millimeters.
pub type WorldPoint = Vector3<f64>;

/// The fixed cardiac class roster. Discriminants are the on-disk label values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ClassId {
    Background = 0,
    LeftVentricle = 1,
    RightVentricle = 2,
    LeftAtrium = 3,
    RightAtrium = 4,
    Myocardium = 5,
    AscendingAorta = 6,
    PulmonaryArtery = 7,
}

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [
        ClassId::Background,
        ClassId::LeftVentricle,
        ClassId::RightVentricle,
        ClassId::LeftAtrium,
        ClassId::RightAtrium,
        ClassId::Myocardium,
        ClassId::AscendingAorta,
        ClassId::PulmonaryArtery,
    ];

    pub const FOREGROUND: [ClassId; NUM_CLASSES - 1] = [
        ClassId::LeftVentricle,
        ClassId::RightVentricle,
        ClassId::LeftAtrium,
        ClassId::RightAtrium,
        ClassId::Myocardium,
        ClassId::AscendingAorta,
        ClassId::PulmonaryArtery,
    ];

    pub fn from_u8(value: u8) -> Option<ClassId> {
        Self::ALL.get(value as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Stable serialized name.
    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::LeftVentricle => "left_ventricle",
            ClassId::RightVentricle => "right_ventricle",
            ClassId::LeftAtrium => "left_atrium",
            ClassId::RightAtrium => "right_atrium",
            ClassId::Myocardium => "myocardium",
            ClassId::AscendingAorta => "ascending_aorta",
            ClassId::PulmonaryArtery => "pulmonary_artery",
        }
    }

    pub fn from_name(name: &str) -> Option<ClassId> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometry shared by every volume-shaped value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub offset: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], offset: [f64; 3]) -> Result<Self> {
        let grid = Grid {
            dims,
            spacing,
            offset,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "dims {:?} must be positive",
                self.dims
            )));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidSpacing(self.spacing));
        }
        if self.offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "offset {:?} must be finite",
                self.offset
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn world_of(&self, ijk: [usize; 3]) -> WorldPoint {
        Vector3::new(
            self.offset[0] + ijk[0] as f64 * self.spacing[0],
            self.offset[1] + ijk[1] as f64 * self.spacing[1],
            self.offset[2] + ijk[2] as f64 * self.spacing[2],
        )
    }

    #[inline]
    pub fn world(&self, index: usize) -> WorldPoint {
        self.world_of(self.coords(index))
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn continuous_index(&self, p: &WorldPoint) -> [f64; 3] {
        [
            (p[0] - self.offset[0]) / self.spacing[0],
            (p[1] - self.offset[1]) / self.spacing[1],
            (p[2] - self.offset[2]) / self.spacing[2],
        ]
    }

    /// Product of the spacing components, mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// World position of the central voxel, index `n / 2` on each axis.
    pub fn center(&self) -> WorldPoint {
        self.world_of([self.dims[0] / 2, self.dims[1] / 2, self.dims[2] / 2])
    }

    /// Position of a voxel relative to [`Grid::center`], mm. Small numbers
    /// whatever the offset, which keeps moment sums accurate.
    pub fn local(&self, index: usize) -> WorldPoint {
        let ijk = self.coords(index);
        WorldPoint::from_fn(|a, _| (ijk[a] as f64 - (self.dims[a] / 2) as f64) * self.spacing[a])
    }

    /// World position of the last voxel center.
    pub fn far_corner(&self) -> WorldPoint {
        self.world_of([self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1])
    }

    /// Iterates the 6-connected in-bounds neighbours of a voxel.
    pub fn neighbors6(&self, index: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        let [x, y, z] = self.coords(index);
        let [nx, ny, nz] = self.dims;
        let steps: [(isize, isize, isize); 6] = [
            (-1, 0, 0),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ];
        steps.into_iter().map(move |(dx, dy, dz)| {
            let xx = x as isize + dx;
            let yy = y as isize + dy;
            let zz = z as isize + dz;
            if xx < 0
                || yy < 0
                || zz < 0
                || xx >= nx as isize
                || yy >= ny as isize
                || zz >= nz as isize
            {
                None
            } else {
                Some(self.index(xx as usize, yy as usize, zz as usize))
            }
        })
    }
}

/// Element type as recorded in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    UInt8,
    Float32,
    Float64,
}

impl ElementKind {
    pub fn size(self) -> usize {
        match self {
            ElementKind::UInt8 => 1,
            ElementKind::Float32 => 4,
            ElementKind::Float64 => 8,
        }
    }
}

/// Scalar types a [`Volume`] can hold.
pub trait Voxel: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const KIND: ElementKind;
    /// Whether values may be blended (false for labels).
    const CONTINUOUS: bool;

    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn validate(_data: &[Self]) -> Result<()> {
        Ok(())
    }
}

impl Voxel for u8 {
    const KIND: ElementKind = ElementKind::UInt8;
    const CONTINUOUS: bool = false;

    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
    fn validate(data: &[Self]) -> Result<()> {
        match data.iter().position(|&v| v as usize >= NUM_CLASSES) {
            Some(index) => Err(Error::InvalidLabelValue {
                value: data[index],
                index,
            }),
            None => Ok(()),
        }
    }
}

impl Voxel for f32 {
    const KIND: ElementKind = ElementKind::Float32;
    const CONTINUOUS: bool = true;

    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Voxel for f64 {
    const KIND: ElementKind = ElementKind::Float64;
    const CONTINUOUS: bool = true;

    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// A dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    data: Vec<T>,
}

/// Label volume: every value is a [`ClassId`] discriminant.
pub type LabelVolume = Volume<u8>;

impl<T: Voxel> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        T::validate(&data)?;
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_parts(grid: Grid, data: Vec<T>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Volume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn offset(&self) -> [f64; 3] {
        self.grid.offset
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.grid.index(x, y, z)]
    }

    /// Same data with a different offset.
    pub fn with_offset(mut self, offset: [f64; 3]) -> Result<Self> {
        self.grid.offset = offset;
        self.grid.validate()?;
        Ok(self)
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Result<Volume<U>> {
        Volume::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl LabelVolume {
    /// Voxel count of class `c`.
    pub fn count(&self, c: ClassId) -> usize {
        let value = c as u8;
        self.data.iter().filter(|&&v| v == value).count()
    }

    /// Sorted set of label values present.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; NUM_CLASSES];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..NUM_CLASSES as u8).filter(|&v| seen[v as usize]).collect()
    }
}

/// Per-voxel vectors of [`NUM_CLASSES`] reals, voxel-major
/// (`data[voxel * NUM_CLASSES + class]`). Carries logits and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassField {
    grid: Grid,
    data: Vec<f64>,
}

impl ClassField {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() * NUM_CLASSES {
            return Err(Error::InvalidVolume(format!(
                "class field length {} does not match {} voxels x {NUM_CLASSES} classes",
                data.len(),
                grid.len()
            )));
        }
        Ok(ClassField { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        ClassField {
            grid,
            data: vec![0.0; grid.len() * NUM_CLASSES],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    pub fn at(&self, voxel: usize, class: usize) -> f64 {
        self.data[voxel * NUM_CLASSES + class]
    }

    #[inline]
    pub fn voxel(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * NUM_CLASSES..(voxel + 1) * NUM_CLASSES]
    }

    /// Extracts one class plane as a scalar volume.
    pub fn plane(&self, class: ClassId) -> Volume<f64> {
        let c = class.index();
        Volume::from_parts(
            self.grid,
            self.data.chunks_exact(NUM_CLASSES).map(|v| v[c]).collect(),
        )
    }

    /// Row-wise softmax, numerically stabilized by the per-voxel maximum.
    pub fn softmax(&self) -> ProbVolume {
        let mut out = Vec::with_capacity(self.data.len());
        for z in self.data.chunks_exact(NUM_CLASSES) {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut e = [0.0; NUM_CLASSES];
            let mut sum = 0.0;
            for (dst, &v) in e.iter_mut().zip(z) {
                *dst = (v - max).exp();
                sum += *dst;
            }
            out.extend(e.iter().map(|v| v / sum));
        }
        ProbVolume {
            field: ClassField {
                grid: self.grid,
                data: out,
            },
        }
    }
}

/// Soft class assignment: every per-voxel vector lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    field: ClassField,
}

pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

impl ProbVolume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        let field = ClassField::new(grid, data)?;
        for (i, v) in field.data.chunks_exact(NUM_CLASSES).enumerate() {
            if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidVolume(format!(
                    "probability outside [0, 1] at voxel {i}"
                )));
            }
            let sum: f64 = v.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::InvalidVolume(format!(
                    "probabilities sum to {sum} at voxel {i}"
                )));
            }
        }
        Ok(ProbVolume { field })
    }

    /// Uniform 1/8 everywhere.
    pub fn uniform(grid: Grid) -> Self {
        ProbVolume {
            field: ClassField {
                grid,
                data: vec![1.0 / NUM_CLASSES as f64; grid.len() * NUM_CLASSES],
            },
        }
    }

    pub fn field(&self) -> &ClassField {
        &self.field
    }

    pub fn grid(&self) -> &Grid {
        &self.field.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.field.data
    }

    pub fn num_voxels(&self) -> usize {
        self.field.num_voxels()
    }

    #[inline]
    pub fn at(&self, voxel: usize, class: usize) -> f64 {
        self.field.at(voxel, class)
    }

    #[inline]
    pub fn voxel(&self, voxel: usize) -> &[f64] {
        self.field.voxel(voxel)
    }

    pub fn with_offset(mut self, offset: [f64; 3]) -> Result<Self> {
        self.field.grid.offset = offset;
        self.field.grid.validate()?;
        Ok(self)
    }

    pub fn plane(&self, class: ClassId) -> Volume<f64> {
        self.field.plane(class)
    }
}

/// Hard labels to a one-hot probability volume.
pub fn one_hot(labels: &LabelVolume) -> Result<ProbVolume> {
    u8::validate(labels.data())?;
    let mut data = vec![0.0; labels.data().len() * NUM_CLASSES];
    for (i, &l) in labels.data().iter().enumerate() {
        data[i * NUM_CLASSES + l as usize] = 1.0;
    }
    Ok(ProbVolume {
        field: ClassField {
            grid: *labels.grid(),
            data,
        },
    })
}

/// Per-voxel argmax; ties resolve to the smallest class id.
pub fn argmax_labels(p: &ProbVolume) -> LabelVolume {
    let data = p
        .data()
        .chunks_exact(NUM_CLASSES)
        .map(|v| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if v[c] > v[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Volume::from_parts(*p.grid(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn class_roster_is_frozen() {
        assert_eq!(ClassId::ALL.len(), 8);
        for (i, c) in ClassId::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ClassId::from_name(c.name()), Some(*c));
        }
        assert_eq!(ClassId::LeftAtrium as u8, 3);
        assert_eq!(ClassId::from_u8(8), None);
    }

    #[test]
    fn index_and_coords_are_inverse() {
        let g = grid([3, 4, 5]);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(
            Grid::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]),
            Err(Error::InvalidSpacing(_))
        ));
        assert!(Volume::new(grid([2, 2, 2]), vec![0u8; 7]).is_err());
        assert!(matches!(
            Volume::new(grid([1, 1, 2]), vec![0u8, 9]),
            Err(Error::InvalidLabelValue { value: 9, index: 1 })
        ));
    }

    #[test]
    fn one_hot_background() {
        let labels = Volume::filled(grid([2, 2, 2]), 0u8).unwrap();
        let p = one_hot(&labels).unwrap();
        for v in 0..8 {
            assert_eq!(p.voxel(v), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn one_hot_single_voxel_is_basis_vector() {
        let mut data = vec![0u8; 27];
        data[13] = ClassId::LeftAtrium as u8;
        let p = one_hot(&Volume::new(grid([3, 3, 3]), data).unwrap()).unwrap();
        let mut e3 = [0.0; 8];
        e3[3] = 1.0;
        assert_eq!(p.voxel(13), &e3);
    }

    #[test]
    fn one_hot_sums_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid([10, 10, 10]);
        let data: Vec<u8> = (0..g.len()).map(|_| rng.random_range(0..8)).collect();
        let p = one_hot(&Volume::new(g, data).unwrap()).unwrap();
        for v in 0..g.len() {
            assert_eq!(p.voxel(v).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn argmax_tie_breaks_to_smallest_id() {
        let g = grid([2, 1, 1]);
        let mut data = vec![0.125; 8];
        data.extend_from_slice(&[0.1, 0.4, 0.4, 0.1, 0.0, 0.0, 0.0, 0.0]);
        let p = ProbVolume::new(g, data).unwrap();
        assert_eq!(argmax_labels(&p).data(), &[0, 1]);
    }

    #[test]
    fn prob_volume_validates_simplex() {
        let g = grid([1, 1, 1]);
        assert!(ProbVolume::new(g, vec![0.5; 8]).is_err());
        assert!(ProbVolume::new(g, vec![-0.1, 1.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = grid([2, 2, 1]);
        let logits: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin() * 40.0).collect();
        let p = ClassField::new(g, logits).unwrap().softmax();
        for v in 0..4 {
            assert!((p.voxel(v).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn argmax_inverts_one_hot(data in proptest::collection::vec(0u8..8, 24)) {
            let labels = Volume::new(grid([2, 3, 4]), data).unwrap();
            let back = argmax_labels(&one_hot(&labels).unwrap());
            proptest::prop_assert_eq!(back, labels);
        }
    }
}
