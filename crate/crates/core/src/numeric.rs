//! Double-double accumulation used by voxel reductions and loss values.
//!
//! Reductions run sequentially in voxel order, so results are reproducible
//! bit for bit. Sums and the shape-loss values built on them carry about 32
//! significant digits before the final rounding, which keeps finite
//! differences of the losses meaningful down to step sizes around 1e-5.

pub(crate) use twofloat::TwoFloat as Dd;

#[inline]
pub(crate) fn dd(x: f64) -> Dd {
    Dd::from_f64(x)
}

#[inline]
pub(crate) fn round(x: Dd) -> f64 {
    x.hi() + x.lo()
}

/// Compensated sum of a sequence.
pub(crate) fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    round(values.into_iter().fold(dd(0.0), |acc, v| acc + v))
}

/// Double-double quotient by long division. The `Dd / Dd` operator of the
/// backing crate loses the low word on targets without a fused multiply-add.
pub(crate) fn div(a: Dd, b: Dd) -> Dd {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    Dd::new_add(q1, q2) + q3
}

pub(crate) fn dot3(a: &[Dd; 3], b: &[Dd; 3]) -> Dd {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub3(a: &[Dd; 3], b: &[Dd; 3]) -> [Dd; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
