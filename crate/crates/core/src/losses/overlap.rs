use std::collections::BTreeMap;

use super::{check_shapes, LossConfig, LossEval, CE_PROB_FLOOR};
use crate::error::{Error, Result};
use crate::numeric::{dd, div, round};
use crate::volume::{ClassField, ProbVolume, NUM_CLASSES};

/// Hard label per voxel, or `NotOneHot`.
pub(crate) fn hard_labels(g: &ClassField) -> Result<Vec<u8>> {
    g.data()
        .chunks_exact(NUM_CLASSES)
        .enumerate()
        .map(|(i, v)| {
            let mut label = None;
            for (c, &x) in v.iter().enumerate() {
                if x == 1.0 && label.is_none() {
                    label = Some(c as u8);
                } else if x != 0.0 {
                    return Err(Error::NotOneHot(i));
                }
            }
            label.ok_or(Error::NotOneHot(i))
        })
        .collect()
}

/// Generalized Dice (class weights `1 / (Σ g_c + ε)²`) plus mean
/// cross-entropy with a floored log, each scaled by its config weight.
pub fn gdice_ce(p: &ProbVolume, g: &ProbVolume, cfg: &LossConfig) -> Result<LossEval> {
    gdice_ce_field(p.field(), g.field(), cfg)
}

pub(crate) fn gdice_ce_field(p: &ClassField, g: &ClassField, cfg: &LossConfig) -> Result<LossEval> {
    check_shapes(p, g)?;
    let labels = hard_labels(g)?;
    let n = labels.len();
    let eps = cfg.epsilon_gd;
    let (w_gd, w_ce) = (cfg.weights.gdice, cfg.weights.ce);

    let mut intersect = [dd(0.0); NUM_CLASSES];
    let mut pred_sum = [dd(0.0); NUM_CLASSES];
    let mut gt_count = [0.0; NUM_CLASSES];
    let mut ce_sum = dd(0.0);
    for (v, &l) in p.data().chunks_exact(NUM_CLASSES).zip(&labels) {
        let l = l as usize;
        for c in 0..NUM_CLASSES {
            pred_sum[c] += v[c];
        }
        intersect[l] += v[l];
        gt_count[l] += 1.0;
        ce_sum += v[l].max(CE_PROB_FLOOR).ln();
    }

    let class_w: [f64; NUM_CLASSES] = std::array::from_fn(|c| 1.0 / (gt_count[c] + eps).powi(2));
    let mut num = dd(0.0);
    let mut den = dd(0.0);
    for c in 0..NUM_CLASSES {
        num += intersect[c] * class_w[c];
        den += (pred_sum[c] + gt_count[c]) * class_w[c];
    }
    let gd = 1.0 - div(num * 2.0, den + eps);
    let ce = -ce_sum / n as f64;
    let precise = gd * w_gd + ce * w_ce;
    let (num, den_eps, gd, ce) = (round(num), round(den + eps), round(gd), round(ce));

    let mut grad = vec![0.0; p.data().len()];
    let inv_den2 = 1.0 / (den_eps * den_eps);
    for (i, (v, &l)) in p.data().chunks_exact(NUM_CLASSES).zip(&labels).enumerate() {
        let l = l as usize;
        let out = &mut grad[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let gc = if c == l { 1.0 } else { 0.0 };
            out[c] = w_gd * (-2.0 * class_w[c] * (gc * den_eps - num) * inv_den2);
        }
        if v[l] > CE_PROB_FLOOR {
            out[l] += w_ce * (-1.0 / (n as f64 * v[l]));
        }
    }

    let mut terms = BTreeMap::new();
    terms.insert("gdice".to_string(), w_gd * gd);
    terms.insert("ce".to_string(), w_ce * ce);
    Ok(LossEval {
        value: round(precise),
        grad: ClassField::new(*p.grid(), grad)?,
        terms,
        skipped: Vec::new(),
        precise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{one_hot, Grid, Volume};

    fn all_classes(g: Grid) -> ProbVolume {
        let data = (0..g.len()).map(|i| (i % NUM_CLASSES) as u8).collect();
        one_hot(&Volume::new(g, data).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = Grid::new([4, 4, 2], [1.0; 3], [0.0; 3]).unwrap();
        let truth = all_classes(g);
        let e = gdice_ce(&truth, &truth, &LossConfig::baseline()).unwrap();
        assert!(e.terms["gdice"] < 1e-6);
        assert!(e.terms["ce"].abs() < 1e-9);
    }

    #[test]
    fn uniform_prediction_ce_is_ln8() {
        let g = Grid::new([4, 4, 2], [1.0; 3], [0.0; 3]).unwrap();
        let truth = all_classes(g);
        let e = gdice_ce(&ProbVolume::uniform(g), &truth, &LossConfig::baseline()).unwrap();
        assert!((e.terms["ce"] - 8f64.ln()).abs() < 1e-12);
        // every class holds N/8 voxels: Dice ratio = 2·(N/64) / (N/8 + N/8) per class
        assert!((e.terms["gdice"] - 0.875).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let g = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let h = Grid::new([2, 2, 3], [1.0; 3], [0.0; 3]).unwrap();
        let cfg = LossConfig::baseline();
        assert!(matches!(
            gdice_ce(&ProbVolume::uniform(g), &ProbVolume::uniform(h), &cfg),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            gdice_ce(&ProbVolume::uniform(g), &ProbVolume::uniform(g), &cfg),
            Err(Error::NotOneHot(0))
        ));
    }
}
