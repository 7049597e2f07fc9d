//! Volume, moment and centroid-relation regularizers.
//!
//! Degenerate terms (zero reference spread, vanishing soft mass, coincident
//! centroids) are skipped and reported in [`LossEval::skipped`]. A regularizer
//! fails with `NoUsableStats` only when the reference statistics provide no
//! usable term at all.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::{LossConfig, LossEval};
use crate::error::{Error, Result};
use crate::numeric::{dd, div, dot3, round, sub3, Dd};
use crate::stats::{precise_local_centroid, precise_mass, precise_moments, ClassMoments, ShapeStats};
use crate::volume::{ClassField, ClassId, ProbVolume, WorldPoint, NUM_CLASSES};

/// Σ_c ((V_c − μ_c) / σ_c)² over foreground classes with σ_c > 0.
pub fn volume_loss(p: &ProbVolume, stats: &ShapeStats, cfg: &LossConfig) -> Result<LossEval> {
    volume_field(p.field(), stats, cfg)
}

/// Σ_c [w₁ ‖m_c − m̄_c‖² + w₂ ‖M_c − M̄_c‖²_F] on soft centroids and central
/// second moments.
pub fn moment_loss(p: &ProbVolume, stats: &ShapeStats, cfg: &LossConfig) -> Result<LossEval> {
    moment_field(p.field(), stats, cfg)
}

/// Squared z-scores of soft-centroid pair distances and vertex cosines.
pub fn relation_loss(p: &ProbVolume, stats: &ShapeStats, cfg: &LossConfig) -> Result<LossEval> {
    relation_field(p.field(), stats, cfg)
}

fn finish(
    p: &ClassField,
    grad: Vec<f64>,
    terms: Vec<(&str, Dd)>,
    skipped: Vec<String>,
) -> LossEval {
    let precise = terms.iter().fold(dd(0.0), |acc, (_, v)| acc + *v);
    LossEval {
        value: round(precise),
        precise,
        grad: ClassField::new(*p.grid(), grad).expect("gradient has the field's shape"),
        terms: terms
            .into_iter()
            .map(|(k, v)| (k.to_string(), round(v)))
            .collect::<BTreeMap<_, _>>(),
        skipped,
    }
}

pub(crate) fn volume_field(p: &ClassField, stats: &ShapeStats, cfg: &LossConfig) -> Result<LossEval> {
    let weight = cfg.weights.volume;
    let voxel_volume = p.grid().voxel_volume();
    let mut slope = [0.0; NUM_CLASSES];
    let mut value = dd(0.0);
    let mut scored = 0;
    let mut skipped = Vec::new();
    for c in ClassId::FOREGROUND {
        let Some(s) = stats.class(c).filter(|s| s.volume.std > 0.0) else {
            skipped.push(format!("volume:{c} (no reference spread)"));
            continue;
        };
        scored += 1;
        let (mu, sigma) = (s.volume.mean, s.volume.std);
        let z = (precise_mass(p, c) * voxel_volume - mu) / sigma;
        value += z * z * weight;
        slope[c.index()] = weight * 2.0 * round(z) / sigma * voxel_volume;
    }
    if scored == 0 {
        return Err(Error::NoUsableStats("volume"));
    }
    let grad = (0..p.data().len()).map(|i| slope[i % NUM_CLASSES]).collect();
    Ok(finish(p, grad, vec![("volume", value)], skipped))
}

/// Adds `per_voxel(x)` to one class plane; `x` is relative to the grid center.
fn scatter(
    p: &ClassField,
    grad: &mut [f64],
    c: ClassId,
    mut per_voxel: impl FnMut(&WorldPoint) -> f64,
) {
    let g = p.grid();
    let ci = c.index();
    for i in 0..g.len() {
        grad[i * NUM_CLASSES + ci] += per_voxel(&g.local(i));
    }
}

/// Upper-triangle index pairs of a symmetric 3×3 matrix, with the weight of
/// each entry in a Frobenius norm.
const UPPER: [(usize, usize, f64); 6] = [
    (0, 0, 1.0),
    (0, 1, 2.0),
    (0, 2, 2.0),
    (1, 1, 1.0),
    (1, 2, 2.0),
    (2, 2, 1.0),
];

pub(crate) fn moment_field(p: &ClassField, stats: &ShapeStats, cfg: &LossConfig) -> Result<LossEval> {
    let (w1, w2) = (cfg.weights.moment_centroid, cfg.weights.moment_second);
    if !ClassId::FOREGROUND.iter().any(|&c| stats.class(c).is_some()) {
        return Err(Error::NoUsableStats("moment"));
    }
    let center = p.grid().center();
    let mut grad = vec![0.0; p.data().len()];
    let mut centroid_term = dd(0.0);
    let mut second_term = dd(0.0);
    let mut skipped = Vec::new();
    for c in ClassId::FOREGROUND {
        let Some(reference) = stats.class(c) else {
            skipped.push(format!("moment:{c} (no reference)"));
            continue;
        };
        let Ok(precise) = precise_moments(p, c, cfg.mass_epsilon) else {
            skipped.push(format!("moment:{c} (vanishing mass)"));
            continue;
        };
        let dm: [Dd; 3] = std::array::from_fn(|a| {
            precise.centroid[a] - (dd(reference.centroid_mean[a]) - center[a])
        });
        centroid_term += dot3(&dm, &dm) * w1;
        for (k, &(r, q, mult)) in UPPER.iter().enumerate() {
            let e = precise.second[k] - reference.second_moment_mean[(r, q)];
            second_term += e * e * (w2 * mult);
        }

        let ClassMoments {
            mass,
            centroid,
            second_moment,
        } = precise.round();
        let dm = WorldPoint::from(dm.map(round));
        let dmat = second_moment - reference.second_moment_mean;
        let inner = dmat.dot(&second_moment);
        scatter(p, &mut grad, c, |x| {
            let d = x - centroid;
            (2.0 * w1 * dm.dot(&d) + 2.0 * w2 * (d.dot(&(dmat * d)) - inner)) / mass
        });
    }
    Ok(finish(
        p,
        grad,
        vec![
            ("moment_centroid", centroid_term),
            ("moment_second", second_term),
        ],
        skipped,
    ))
}

pub(crate) fn relation_field(
    p: &ClassField,
    stats: &ShapeStats,
    cfg: &LossConfig,
) -> Result<LossEval> {
    let (wd, wa) = (cfg.weights.relation_dist, cfg.weights.relation_angle);
    let usable_pairs = wd > 0.0 && stats.pairs.values().any(|s| s.std > 0.0);
    let usable_triples = wa > 0.0 && stats.triples.values().any(|s| s.std > 0.0);
    if !usable_pairs && !usable_triples {
        return Err(Error::NoUsableStats("relation"));
    }

    // soft mass and centroid relative to the grid center
    let mut moments: [Option<(Dd, [Dd; 3])>; NUM_CLASSES] = [None; NUM_CLASSES];
    for c in ClassId::FOREGROUND {
        let mass = precise_mass(p, c);
        if mass.hi() >= cfg.mass_epsilon {
            moments[c.index()] = Some((mass, precise_local_centroid(p, c, mass)));
        }
    }
    let centroid = |c: ClassId| moments[c.index()].map(|(_, m)| m);
    let rounded = |m: [Dd; 3]| WorldPoint::from(m.map(round));

    let mut centroid_grad = [Vector3::<f64>::zeros(); NUM_CLASSES];
    let mut dist_term = dd(0.0);
    let mut angle_term = dd(0.0);
    let mut skipped = Vec::new();

    if wd > 0.0 {
        for (&(i, j), s) in &stats.pairs {
            if s.std <= 0.0 {
                skipped.push(format!("relation:{i}-{j} (no reference spread)"));
                continue;
            }
            let (Some(mi), Some(mj)) = (centroid(i), centroid(j)) else {
                skipped.push(format!("relation:{i}-{j} (vanishing mass)"));
                continue;
            };
            let u = sub3(&mi, &mj);
            let d = dot3(&u, &u).sqrt();
            if d.hi() < cfg.min_segment_mm {
                skipped.push(format!("relation:{i}-{j} (coincident centroids)"));
                continue;
            }
            let z = (d - s.mean) / s.std;
            dist_term += z * z * wd;
            let dd_du = rounded(u) * (wd * 2.0 * round(z) / (s.std * round(d)));
            centroid_grad[i.index()] += dd_du;
            centroid_grad[j.index()] -= dd_du;
        }
    }
    if wa > 0.0 {
        for (&(i, j, k), s) in &stats.triples {
            if s.std <= 0.0 {
                skipped.push(format!("relation:{i}-{j}-{k} (no reference spread)"));
                continue;
            }
            let (Some(mi), Some(mj), Some(mk)) = (centroid(i), centroid(j), centroid(k)) else {
                skipped.push(format!("relation:{i}-{j}-{k} (vanishing mass)"));
                continue;
            };
            let (u, v) = (sub3(&mi, &mj), sub3(&mk, &mj));
            let (nu, nv) = (dot3(&u, &u).sqrt(), dot3(&v, &v).sqrt());
            if nu.hi() < cfg.min_segment_mm || nv.hi() < cfg.min_segment_mm {
                skipped.push(format!("relation:{i}-{j}-{k} (coincident centroids)"));
                continue;
            }
            let cos = div(dot3(&u, &v), nu * nv);
            let z = (cos - s.mean) / s.std;
            angle_term += z * z * wa;

            let (u, v, nu, nv, cos) = (rounded(u), rounded(v), round(nu), round(nv), round(cos));
            let coef = wa * 2.0 * round(z) / s.std;
            let dcos_du = v / (nu * nv) - u * (cos / (nu * nu));
            let dcos_dv = u / (nu * nv) - v * (cos / (nv * nv));
            centroid_grad[i.index()] += dcos_du * coef;
            centroid_grad[k.index()] += dcos_dv * coef;
            centroid_grad[j.index()] -= (dcos_du + dcos_dv) * coef;
        }
    }

    let mut grad = vec![0.0; p.data().len()];
    for c in ClassId::FOREGROUND {
        let gm = centroid_grad[c.index()];
        if let Some((mass, m)) = moments[c.index()] {
            if gm != Vector3::zeros() {
                let (mass, m) = (round(mass), rounded(m));
                scatter(p, &mut grad, c, |x| gm.dot(&(x - m)) / mass);
            }
        }
    }
    Ok(finish(
        p,
        grad,
        vec![
            ("relation_dist", dist_term),
            ("relation_angle", angle_term),
        ],
        skipped,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::{check_field_gradient, gradcheck_instance};
    use crate::stats::{aggregate, describe, describe_labels, Summary, MASS_EPSILON};
    use crate::preprocess::{reorient, Orientation};
    use crate::volume::{one_hot, Grid, LabelVolume, Volume};

    /// Three blocks; `shift` translates the LV block along y (1.5 mm voxels).
    fn blocks(shift: usize) -> LabelVolume {
        let g = Grid::new([10, 8, 8], [1.0, 1.5, 2.0], [-3.0, 2.0, 0.5]).unwrap();
        let mut d = vec![0u8; g.len()];
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            d[i] = if x <= 2 && (shift..=shift + 2).contains(&y) && z <= 3 {
                1
            } else if (4..=6).contains(&x) && y <= 1 && z <= 2 {
                2
            } else if x <= 1 && (4..=6).contains(&y) && (4..=6).contains(&z) {
                3
            } else {
                0
            };
        }
        Volume::new(g, d).unwrap()
    }

    fn three_class_stats() -> ShapeStats {
        let mut stats = aggregate(&[describe_labels(&blocks(0)).unwrap()]);
        for s in stats.classes.iter_mut().flatten() {
            s.volume.std = 7.0;
        }
        for s in stats.pairs.values_mut() {
            s.std = 1.5;
        }
        for s in stats.triples.values_mut() {
            s.std = 0.2;
        }
        stats
    }

    #[test]
    fn volume_zero_at_reference() {
        let labels = blocks(0);
        let mut stats = aggregate(&[describe_labels(&labels).unwrap()]);
        for s in stats.classes.iter_mut().flatten() {
            s.volume.std = 3.0;
        }
        let e = volume_loss(&one_hot(&labels).unwrap(), &stats, &LossConfig::default()).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.grad.data().iter().all(|&g| g == 0.0));
        // four absent foreground classes are listed
        assert_eq!(e.skipped.len(), 4);
    }

    #[test]
    fn volume_unit_z_score() {
        let labels = blocks(0);
        let p = one_hot(&labels).unwrap();
        let mut stats = aggregate(&[describe_labels(&labels).unwrap()]);
        let lv = ClassId::LeftVentricle.index();
        let v = stats.classes[lv].as_ref().unwrap().volume.mean;
        for c in stats.classes.iter_mut() {
            *c = None;
        }
        let mut only = aggregate(&[describe_labels(&labels).unwrap()]);
        let s = only.classes[lv].as_mut().unwrap();
        s.volume = Summary {
            mean: v - 4.0,
            std: 4.0,
            n: 2,
        };
        stats.classes[lv] = only.classes[lv].clone();
        let e = volume_loss(&p, &stats, &LossConfig::default()).unwrap();
        assert_eq!(e.value, 1.0);
    }

    #[test]
    fn volume_without_spread_is_unusable() {
        let labels = blocks(0);
        let stats = aggregate(&[describe_labels(&labels).unwrap()]);
        assert!(matches!(
            volume_loss(&one_hot(&labels).unwrap(), &stats, &LossConfig::default()),
            Err(Error::NoUsableStats("volume"))
        ));
    }

    #[test]
    fn moment_zero_on_self_reference() {
        let labels = blocks(0);
        let stats = aggregate(&[describe_labels(&labels).unwrap()]);
        let e = moment_loss(&one_hot(&labels).unwrap(), &stats, &LossConfig::default()).unwrap();
        assert!(e.value.abs() < 1e-9);
    }

    #[test]
    fn moment_centroid_shift_adds_delta_squared() {
        let base = blocks(0);
        let stats = aggregate(&[describe_labels(&base).unwrap()]);
        let cfg = LossConfig::default();
        let moved = blocks(2);
        let e0 = moment_loss(&one_hot(&base).unwrap(), &stats, &cfg).unwrap();
        let e1 = moment_loss(&one_hot(&moved).unwrap(), &stats, &cfg).unwrap();
        let delta = 2.0 * 1.5;
        assert!((e1.terms["moment_centroid"] - e0.terms["moment_centroid"] - delta * delta).abs() < 1e-9);
        assert!(e1.terms["moment_second"].abs() < 1e-9);
    }

    #[test]
    fn relation_zero_on_matching_constellation() {
        let labels = blocks(0);
        let stats = three_class_stats();
        let e = relation_loss(&one_hot(&labels).unwrap(), &stats, &LossConfig::default()).unwrap();
        assert!(e.value.abs() < 1e-20);
    }

    #[test]
    fn relation_unit_distance_z_score() {
        let labels = blocks(0);
        let p = one_hot(&labels).unwrap();
        let d = describe(&p, MASS_EPSILON);
        let key = (ClassId::LeftVentricle, ClassId::RightVentricle);
        let mut stats = aggregate(&[d.clone()]);
        stats.triples.clear();
        stats.pairs.retain(|k, _| *k == key);
        let s = stats.pairs.get_mut(&key).unwrap();
        s.std = 2.0;
        s.mean = d.relations.pair_distance[&key] - 2.0;
        let e = relation_loss(&p, &stats, &LossConfig::default()).unwrap();
        assert!((e.terms["relation_dist"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relation_rigid_invariance() {
        let inst = gradcheck_instance(8, 9);
        let p = inst.logits.softmax();
        let cfg = LossConfig::default();
        let base = relation_loss(&p, &inst.stats, &cfg).unwrap().value;
        let shifted = p.clone().with_offset([40.0, -13.5, 7.25]).unwrap();
        let moved = relation_loss(&shifted, &inst.stats, &cfg).unwrap().value;
        assert!((base - moved).abs() < 1e-9 * base.max(1.0));

        // axis permutation with a flip: an orthogonal motion of world coordinates
        let o = Orientation::new([2, 0, 1], [true, false, false]).unwrap();
        let planes: Vec<Volume<f64>> = ClassId::ALL
            .iter()
            .map(|&c| reorient(&p.plane(c), &o))
            .collect();
        let grid = *planes[0].grid();
        let data = (0..grid.len())
            .flat_map(|i| planes.iter().map(move |pl| pl.data()[i]))
            .collect();
        let permuted = ProbVolume::new(grid, data).unwrap();
        let rotated = relation_loss(&permuted, &inst.stats, &cfg).unwrap().value;
        assert!((base - rotated).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn gradients_match_finite_differences_three_classes() {
        // prediction mass on three foreground classes only
        let labels = blocks(0);
        let g = *labels.grid();
        let mut data = Vec::with_capacity(g.len() * NUM_CLASSES);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            let mut v = [0.0; NUM_CLASSES];
            v[1] = 0.1 + 0.05 * (x as f64 / 10.0);
            v[2] = 0.1 + 0.05 * (y as f64 / 8.0);
            v[3] = 0.1 + 0.05 * (z as f64 / 8.0);
            v[labels.data()[i] as usize] += 0.5;
            let s: f64 = v.iter().sum();
            data.extend(v.iter().map(|x| x / s));
        }
        let p = ProbVolume::new(g, data).unwrap();
        let stats = three_class_stats();
        let cfg = LossConfig::default();
        for f in [volume_field, moment_field, relation_field] {
            let r = check_field_gradient(p.field(), |q| f(q, &stats, &cfg));
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
    }
}
