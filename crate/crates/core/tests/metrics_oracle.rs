use cardioprior::metrics::{distance_map, evaluate_case, overlap, surface_distances, surface_voxels};
use cardioprior::preprocess::{reorient, Orientation};
use cardioprior::{ClassId, Grid, LabelVolume, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Brute-force references. Surfaces are recomputed from raw coordinates and
// point-to-set distances by exhaustive search.

fn brute_surface(v: &LabelVolume, c: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = v.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if v.get(x, y, z) != c {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let outside = |q: [i64; 3]| {
                    q[0] < 0
                        || q[1] < 0
                        || q[2] < 0
                        || q[0] >= nx as i64
                        || q[1] >= ny as i64
                        || q[2] >= nz as i64
                        || v.get(q[0] as usize, q[1] as usize, q[2] as usize) != c
                };
                let faces = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
                if faces.iter().any(|d| outside([p[0] + d[0], p[1] + d[1], p[2] + d[2]])) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn brute_point_to_set(a: [usize; 3], set: &[[usize; 3]], s: [f64; 3]) -> f64 {
    set.iter()
        .map(|b| {
            let d: f64 = (0..3)
                .map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2))
                .sum();
            d.sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn brute_hd_assd(p: &LabelVolume, g: &LabelVolume, c: u8) -> Option<(f64, f64)> {
    let s = p.spacing();
    let sp = brute_surface(p, c);
    let sg = brute_surface(g, c);
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    let fwd: Vec<f64> = sp.iter().map(|&a| brute_point_to_set(a, &sg, s)).collect();
    let bwd: Vec<f64> = sg.iter().map(|&b| brute_point_to_set(b, &sp, s)).collect();
    let hd = fwd.iter().chain(&bwd).copied().fold(0.0, f64::max);
    let assd = (fwd.iter().sum::<f64>() + bwd.iter().sum::<f64>()) / (fwd.len() + bwd.len()) as f64;
    Some((hd, assd))
}

fn brute_dice(p: &LabelVolume, g: &LabelVolume, c: u8) -> Option<f64> {
    let a = p.data().iter().filter(|&&v| v == c).count();
    let b = g.data().iter().filter(|&&v| v == c).count();
    let both = p.data().iter().zip(g.data()).filter(|(&x, &y)| x == c && y == c).count();
    (a + b > 0).then(|| 2.0 * both as f64 / (a + b) as f64)
}

/// Random blobs: a few boxes per class over a small random grid.
fn random_pair(seed: u64) -> (LabelVolume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [
        rng.random_range(2..=16),
        rng.random_range(2..=16),
        rng.random_range(1..=16),
    ];
    let spacing = [0.5, 1.0, 1.7].map(|s: f64| s * rng.random_range(0.5..2.0));
    let grid = Grid::new(dims, spacing, [0.0; 3]).unwrap();
    let make = |rng: &mut ChaCha8Rng| {
        let mut data = vec![0u8; grid.len()];
        for _ in 0..rng.random_range(1..6) {
            let c = rng.random_range(1..=3u8);
            let lo: [usize; 3] = std::array::from_fn(|k| rng.random_range(0..dims[k]));
            let hi: [usize; 3] = std::array::from_fn(|k| rng.random_range(lo[k]..dims[k]));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        data[grid.index(x, y, z)] = c;
                    }
                }
            }
        }
        // speckle
        for _ in 0..rng.random_range(0..4) {
            let i = rng.random_range(0..grid.len());
            data[i] = rng.random_range(0..=3u8);
        }
        Volume::new(grid, data).unwrap()
    };
    let a = make(&mut rng);
    let b = make(&mut rng);
    (a, b)
}

#[test]
fn randomized_pairs_match_brute_force() {
    let mut compared = 0;
    for seed in 0..240 {
        let (p, g) = random_pair(seed);
        for c in [ClassId::LeftVentricle, ClassId::RightVentricle, ClassId::LeftAtrium] {
            let ov = overlap(&p, &g, c).unwrap();
            assert_eq!(ov.map(|o| o.dice), brute_dice(&p, &g, c as u8));
            if let Some(o) = ov {
                assert!((o.jaccard - o.dice / (2.0 - o.dice)).abs() < 1e-12);
            }
            let mine = surface_distances(&p, &g, c).ok().map(|d| (d.hd_mm, d.assd_mm));
            match (mine, brute_hd_assd(&p, &g, c as u8)) {
                (Some((hd, assd)), Some((bhd, bassd))) => {
                    assert!((hd - bhd).abs() < 1e-9, "seed {seed} {c}: {hd} vs {bhd}");
                    assert!((assd - bassd).abs() < 1e-9, "seed {seed} {c}: {assd} vs {bassd}");
                    compared += 1;
                }
                (None, None) => {}
                other => panic!("seed {seed} {c}: {other:?}"),
            }
        }
    }
    assert!(compared >= 200, "{compared}");
}

#[test]
fn surface_matches_brute_force() {
    for seed in 0..50 {
        let (p, _) = random_pair(seed);
        let grid = *p.grid();
        for c in ClassId::ALL {
            let expected: Vec<usize> = brute_surface(&p, c as u8)
                .into_iter()
                .map(|[x, y, z]| grid.index(x, y, z))
                .collect();
            let mut got = surface_voxels(&p, c);
            got.sort();
            let mut expected = expected;
            expected.sort();
            assert_eq!(got, expected);
        }
    }
}

#[test]
fn distance_map_matches_brute_force() {
    for seed in 0..40 {
        let (p, _) = random_pair(seed);
        let grid = *p.grid();
        let s = p.spacing();
        let features = surface_voxels(&p, ClassId::LeftVentricle);
        if features.is_empty() {
            continue;
        }
        let pts: Vec<[usize; 3]> = features.iter().map(|&i| grid.coords(i)).collect();
        let d = distance_map(&grid, &features);
        for (i, &v) in d.iter().enumerate() {
            let b = brute_point_to_set(grid.coords(i), &pts, s);
            assert!((v - b).abs() < 1e-9, "seed {seed} voxel {i}: {v} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_and_ordered(seed in any::<u64>()) {
        let (p, g) = random_pair(seed);
        for c in ClassId::FOREGROUND {
            if let (Ok(a), Ok(b)) = (surface_distances(&p, &g, c), surface_distances(&g, &p, c)) {
                prop_assert!((a.hd_mm - b.hd_mm).abs() <= 1e-12);
                prop_assert!((a.assd_mm - b.assd_mm).abs() <= 1e-12);
                prop_assert!(a.hd_mm >= a.assd_mm && a.assd_mm >= 0.0);
                prop_assert!(a.hd_mm >= a.hd95_mm);
            }
            if let Some(o) = overlap(&p, &g, c).unwrap() {
                prop_assert!((0.0..=1.0).contains(&o.dice) && (0.0..=1.0).contains(&o.jaccard));
                prop_assert!((o.jaccard - o.dice / (2.0 - o.dice)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn invariant_under_axis_permutation(seed in any::<u64>(), perm in 0usize..6, flips in any::<[bool; 3]>()) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let o = Orientation::new(perms[perm], flips).unwrap();
        let (p, g) = random_pair(seed);
        let a = evaluate_case("a", &p, &g).unwrap();
        let b = evaluate_case("b", &reorient(&p, &o), &reorient(&g, &o)).unwrap();
        for (x, y) in a.classes.iter().zip(&b.classes) {
            prop_assert_eq!(x.dice, y.dice);
            prop_assert_eq!(x.jaccard, y.jaccard);
            prop_assert_eq!(x.hd_mm.is_some(), y.hd_mm.is_some());
            if let (Some(u), Some(v)) = (x.hd_mm, y.hd_mm) {
                prop_assert!((u - v).abs() < 1e-9);
            }
            if let (Some(u), Some(v)) = (x.assd_mm, y.assd_mm) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
