//! Geometric normalization: reorientation, isotropic resampling, centroid
//! centering and embedding into a standardized field of view.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Volume, Voxel, WorldPoint};

/// Continuous indices within this distance of an integer are snapped to it.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interpolation::Nearest),
            "trilinear" => Ok(Interpolation::Trilinear),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

/// Axis permutation plus per-output-axis flips.
///
/// Output axis `i` is input axis `axis_permutation[i]`; `flips[i]` reverses
/// output axis `i`. World axes are relabeled along with the voxel axes, and a
/// flipped axis is mirrored within its own extent, so the set of voxel-center
/// world positions is preserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientation {
    pub axis_permutation: [usize; 3],
    pub flips: [bool; 3],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation::IDENTITY
    }
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation {
        axis_permutation: [0, 1, 2],
        flips: [false; 3],
    };

    pub fn new(axis_permutation: [usize; 3], flips: [bool; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &a in &axis_permutation {
            if a > 2 || seen[a] {
                return Err(Error::InvalidDocument(format!(
                    "{axis_permutation:?} is not a permutation of (0, 1, 2)"
                )));
            }
            seen[a] = true;
        }
        Ok(Orientation {
            axis_permutation,
            flips,
        })
    }

    pub fn inverse(&self) -> Orientation {
        let mut perm = [0; 3];
        let mut flips = [false; 3];
        for (out_axis, &in_axis) in self.axis_permutation.iter().enumerate() {
            perm[in_axis] = out_axis;
        }
        for j in 0..3 {
            flips[j] = self.flips[perm[j]];
        }
        Orientation {
            axis_permutation: perm,
            flips,
        }
    }
}

/// Standardized field of view: an isotropic grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FovSpec {
    pub grid_size: [usize; 3],
    pub spacing_mm: f64,
}

impl FovSpec {
    pub fn new(grid_size: [usize; 3], spacing_mm: f64) -> Result<Self> {
        let fov = FovSpec {
            grid_size,
            spacing_mm,
        };
        fov.validate()?;
        Ok(fov)
    }

    pub fn cube(n: usize, spacing_mm: f64) -> Result<Self> {
        Self::new([n; 3], spacing_mm)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.spacing_mm.is_finite() || self.spacing_mm <= 0.0 {
            return Err(Error::InvalidSpacing([self.spacing_mm; 3]));
        }
        if self.grid_size.iter().any(|&n| n < 8) {
            return Err(Error::InvalidDocument(format!(
                "FOV grid size {:?} must be at least 8 per axis",
                self.grid_size
            )));
        }
        Ok(())
    }

    /// Index of the central voxel (`n / 2` per axis, so it exists for even sizes).
    pub fn center_index(&self) -> [usize; 3] {
        self.grid_size.map(|n| n / 2)
    }

    /// The FOV grid placed so that its central voxel sits at `center`.
    pub fn grid_at(&self, center: &WorldPoint) -> Grid {
        let ci = self.center_index();
        let offset = [0, 1, 2].map(|a| center[a] - ci[a] as f64 * self.spacing_mm);
        Grid {
            dims: self.grid_size,
            spacing: [self.spacing_mm; 3],
            offset,
        }
    }

    /// The registered reference space: central voxel at the world origin.
    pub fn reference_grid(&self) -> Grid {
        self.grid_at(&WorldPoint::zeros())
    }
}

pub fn reorient<T: Voxel>(v: &Volume<T>, o: &Orientation) -> Volume<T> {
    let src = v.grid();
    let perm = o.axis_permutation;
    let dims = perm.map(|a| src.dims[a]);
    let spacing = perm.map(|a| src.spacing[a]);
    let offset = perm.map(|a| src.offset[a]);
    let grid = Grid {
        dims,
        spacing,
        offset,
    };
    let mut data = Vec::with_capacity(src.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let out = [x, y, z];
                let mut ijk = [0usize; 3];
                for i in 0..3 {
                    let c = if o.flips[i] { dims[i] - 1 - out[i] } else { out[i] };
                    ijk[perm[i]] = c;
                }
                data.push(v.data()[src.index(ijk[0], ijk[1], ijk[2])]);
            }
        }
    }
    Volume::from_parts(grid, data)
}

#[inline]
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP {
        r
    } else {
        c
    }
}

/// Samples `v` at a world point; constant fill (`T::default()`) outside the
/// hull of voxel centers.
pub fn sample<T: Voxel>(v: &Volume<T>, p: &WorldPoint, mode: Interpolation) -> T {
    let g = v.grid();
    let ci = g.continuous_index(p).map(snap);
    match mode {
        Interpolation::Nearest => {
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                let r = (ci[a] + 0.5).floor();
                if r < 0.0 || r >= g.dims[a] as f64 {
                    return T::default();
                }
                ijk[a] = r as usize;
            }
            v.data()[g.index(ijk[0], ijk[1], ijk[2])]
        }
        Interpolation::Trilinear => {
            let mut base = [0usize; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                if ci[a] < 0.0 || ci[a] > (g.dims[a] - 1) as f64 {
                    return T::default();
                }
                let f = ci[a].floor();
                let b = (f as usize).min(g.dims[a].saturating_sub(2));
                base[a] = b;
                frac[a] = ci[a] - b as f64;
            }
            let at = |dx: usize, dy: usize, dz: usize| -> f64 {
                let x = (base[0] + dx).min(g.dims[0] - 1);
                let y = (base[1] + dy).min(g.dims[1] - 1);
                let z = (base[2] + dz).min(g.dims[2] - 1);
                v.data()[g.index(x, y, z)].to_f64()
            };
            let [fx, fy, fz] = frac;
            let lerp = |a: f64, b: f64, t: f64| {
                if t == 0.0 {
                    a
                } else if t == 1.0 {
                    b
                } else {
                    a + (b - a) * t
                }
            };
            let c00 = lerp(at(0, 0, 0), at(1, 0, 0), fx);
            let c10 = lerp(at(0, 1, 0), at(1, 1, 0), fx);
            let c01 = lerp(at(0, 0, 1), at(1, 0, 1), fx);
            let c11 = lerp(at(0, 1, 1), at(1, 1, 1), fx);
            let c0 = lerp(c00, c10, fy);
            let c1 = lerp(c01, c11, fy);
            T::from_f64(lerp(c0, c1, fz))
        }
    }
}

/// Resamples `v` onto `target`: the output voxel at world point `x` takes the
/// value of `v` at `to_source(x)`.
pub fn resample_onto<T: Voxel>(
    v: &Volume<T>,
    target: &Grid,
    mode: Interpolation,
    to_source: impl Fn(&WorldPoint) -> WorldPoint,
) -> Result<Volume<T>> {
    target.validate()?;
    if mode == Interpolation::Trilinear && !T::CONTINUOUS {
        return Err(Error::LabelInterpolation);
    }
    let data = (0..target.len())
        .map(|i| sample(v, &to_source(&target.world(i)), mode))
        .collect();
    Ok(Volume::from_parts(*target, data))
}

/// Resamples to `target_spacing`, covering the input's world extent from the
/// same origin voxel.
pub fn resample<T: Voxel>(
    v: &Volume<T>,
    target_spacing: [f64; 3],
    mode: Interpolation,
) -> Result<Volume<T>> {
    if target_spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::InvalidSpacing(target_spacing));
    }
    let src = v.grid();
    let dims = [0, 1, 2].map(|a| {
        let extent = (src.dims[a] - 1) as f64 * src.spacing[a];
        (snap(extent / target_spacing[a]).floor() as usize) + 1
    });
    let target = Grid {
        dims,
        spacing: target_spacing,
        offset: src.offset,
    };
    resample_onto(v, &target, mode, |p| *p)
}

/// Mean world position of all voxels with a nonzero label.
pub fn foreground_centroid(labels: &LabelVolume) -> Result<WorldPoint> {
    let g = labels.grid();
    let mut sum = WorldPoint::zeros();
    let mut n = 0usize;
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 {
            sum += g.world(i);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyForeground);
    }
    Ok(sum / n as f64)
}

/// Embeds `v` into the FOV grid whose central voxel is at `center`.
pub fn embed_fov<T: Voxel>(
    v: &Volume<T>,
    center: &WorldPoint,
    fov: &FovSpec,
    mode: Interpolation,
) -> Result<Volume<T>> {
    fov.validate()?;
    resample_onto(v, &fov.grid_at(center), mode, |p| *p)
}
