//! Overlap and surface-distance metrics: Dice, Jaccard, ASD, HD95.
//!
//! Surfaces use face (6-) connectivity with the outside of the volume counted
//! as background. Distances are in voxels (unit isotropic spacing) and come
//! from an exact squared Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::volume_io::{voxel_index, Dims, LabelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Percent.
    pub dice: f64,
    /// Percent.
    pub jaccard: f64,
    /// `None` when exactly one of the masks is empty.
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    pub pred_empty: bool,
    pub gt_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Foreground classes `1..K`.
    pub per_class: Vec<ClassMetrics>,
    pub dice: f64,
    pub jaccard: f64,
    /// Mean over classes with a defined distance; `None` if there are none.
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

impl MetricsRecord {
    /// Averages several per-volume records: overlaps over all, distances over defined ones.
    pub fn mean(records: &[MetricsRecord]) -> Option<MetricsRecord> {
        let first = records.first()?;
        let n = records.len() as f64;
        let defined_mean = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| {
            let v: Vec<f64> = records.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let per_class = (0..first.per_class.len())
            .map(|i| {
                let of = |r: &MetricsRecord| r.per_class[i].clone();
                let cls: Vec<ClassMetrics> = records.iter().map(of).collect();
                let opt_mean = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| {
                    let v: Vec<f64> = cls.iter().filter_map(f).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                ClassMetrics {
                    class: first.per_class[i].class,
                    dice: cls.iter().map(|c| c.dice).sum::<f64>() / n,
                    jaccard: cls.iter().map(|c| c.jaccard).sum::<f64>() / n,
                    asd: opt_mean(&|c| c.asd),
                    hd95: opt_mean(&|c| c.hd95),
                    pred_empty: cls.iter().all(|c| c.pred_empty),
                    gt_empty: cls.iter().all(|c| c.gt_empty),
                }
            })
            .collect();
        Some(MetricsRecord {
            per_class,
            dice: records.iter().map(|r| r.dice).sum::<f64>() / n,
            jaccard: records.iter().map(|r| r.jaccard).sum::<f64>() / n,
            asd: defined_mean(&|r| r.asd),
            hd95: defined_mean(&|r| r.hd95),
        })
    }
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsRecord> {
    if pred.dims() != gt.dims() {
        return Err(shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let k = gt.num_classes();
    if pred.num_classes() != k {
        return Err(invalid(format!("prediction has K={}, ground truth K={k}", pred.num_classes())));
    }
    let per_class: Vec<ClassMetrics> = (1..k).map(|c| class_metrics(pred, gt, c)).collect();
    let m = per_class.len() as f64;
    let mean_opt = |f: fn(&ClassMetrics) -> Option<f64>| {
        let v: Vec<f64> = per_class.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(MetricsRecord {
        dice: per_class.iter().map(|c| c.dice).sum::<f64>() / m,
        jaccard: per_class.iter().map(|c| c.jaccard).sum::<f64>() / m,
        asd: mean_opt(|c| c.asd),
        hd95: mean_opt(|c| c.hd95),
        per_class,
    })
}

fn class_metrics(pred: &LabelVolume, gt: &LabelVolume, c: usize) -> ClassMetrics {
    let c8 = c as u8;
    let p: Vec<bool> = pred.data().iter().map(|&v| v == c8).collect();
    let g: Vec<bool> = gt.data().iter().map(|&v| v == c8).collect();
    let (np, ng) = (p.iter().filter(|&&b| b).count(), g.iter().filter(|&&b| b).count());
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    let (pred_empty, gt_empty) = (np == 0, ng == 0);
    let base = ClassMetrics { class: c, dice: 0.0, jaccard: 0.0, asd: None, hd95: None, pred_empty, gt_empty };
    match (pred_empty, gt_empty) {
        (true, true) => ClassMetrics { dice: 100.0, jaccard: 100.0, asd: Some(0.0), hd95: Some(0.0), ..base },
        (true, false) | (false, true) => base,
        (false, false) => {
            let dims = gt.dims();
            let d_pg = directed_distances(&p, &g, dims);
            let d_gp = directed_distances(&g, &p, dims);
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            ClassMetrics {
                dice: 200.0 * inter as f64 / (np + ng) as f64,
                jaccard: 100.0 * inter as f64 / (np + ng - inter) as f64,
                asd: Some(0.5 * (mean(&d_pg) + mean(&d_gp))),
                hd95: Some(percentile95(d_pg).max(percentile95(d_gp))),
                ..base
            }
        }
    }
}

/// Mask voxels with at least one face neighbour outside the mask or the volume.
pub fn surface(mask: &[bool], dims: Dims) -> Vec<bool> {
    let [h, w, d] = dims;
    let inside = |hh: isize, ww: isize, dd: isize| {
        hh >= 0
            && ww >= 0
            && dd >= 0
            && (hh as usize) < h
            && (ww as usize) < w
            && (dd as usize) < d
            && mask[voxel_index(dims, hh as usize, ww as usize, dd as usize)]
    };
    let mut out = vec![false; mask.len()];
    for a in 0..h {
        for b in 0..w {
            for c in 0..d {
                let i = voxel_index(dims, a, b, c);
                if !mask[i] {
                    continue;
                }
                let (x, y, z) = (a as isize, b as isize, c as isize);
                out[i] = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(dx, dy, dz)| !inside(x + dx, y + dy, z + dz));
            }
        }
    }
    out
}

/// Distance from every surface voxel of `from` to the nearest surface voxel of `to`.
fn directed_distances(from: &[bool], to: &[bool], dims: Dims) -> Vec<f64> {
    let sq = squared_edt(&surface(to, dims), dims);
    surface(from, dims).iter().zip(&sq).filter(|(s, _)| **s).map(|(_, &d)| d.sqrt()).collect()
}

/// Nearest-rank 95th percentile.
pub fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = (0.95 * v.len() as f64).ceil() as usize;
    v[rank.max(1) - 1]
}

/// Exact squared Euclidean distance to the nearest `true` site, separable
/// lower-envelope algorithm. Cells are `INFINITY` when there are no sites.
pub fn squared_edt(sites: &[bool], dims: Dims) -> Vec<f64> {
    let [h, w, d] = dims;
    let mut f: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    // Along d (contiguous), then w, then h.
    for (len, stride, outer) in [(d, 1, vec![(h * w, d)]), (w, d, vec![(h, w * d), (d, 1)]), (h, w * d, vec![(w * d, 1)])]
    {
        let starts: Vec<usize> = match outer.as_slice() {
            [(n, step)] => (0..*n).map(|i| i * step).collect(),
            [(n1, s1), (n2, s2)] => (0..*n1).flat_map(|i| (0..*n2).map(move |j| i * s1 + j * s2)).collect(),
            _ => unreachable!(),
        };
        for start in starts {
            line.clear();
            line.extend((0..len).map(|i| f[start + i * stride]));
            envelope_1d(&line, &mut out);
            for (i, &v) in out.iter().enumerate() {
                f[start + i * stride] = v;
            }
        }
    }
    f
}

/// `out[q] = min_p (q − p)² + f[p]` over finite `f[p]`.
fn envelope_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    let sites: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if sites.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let inter = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        while let Some(&top) = v.last() {
            if inter(top, q) <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        z.push(if v.is_empty() { f64::NEG_INFINITY } else { inter(*v.last().unwrap(), q) });
        v.push(q);
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        out.push(dq * dq + f[v[k]]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(dims: Dims, data: Vec<u8>, k: usize) -> LabelVolume {
        LabelVolume::new(dims, data, k).unwrap()
    }

    fn coords(mask: &[bool], dims: Dims) -> Vec<[f64; 3]> {
        let mut v = Vec::new();
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    if mask[voxel_index(dims, a, b, c)] {
                        v.push([a as f64, b as f64, c as f64]);
                    }
                }
            }
        }
        v
    }

    /// All-pairs surface distances, written independently of the EDT path.
    fn brute_force(pred: &LabelVolume, gt: &LabelVolume, c: u8) -> (f64, f64) {
        let dims = gt.dims();
        let p: Vec<bool> = pred.data().iter().map(|&v| v == c).collect();
        let g: Vec<bool> = gt.data().iter().map(|&v| v == c).collect();
        let (sp, sg) = (coords(&surface(&p, dims), dims), coords(&surface(&g, dims), dims));
        let directed = |a: &[[f64; 3]], b: &[[f64; 3]]| -> Vec<f64> {
            a.iter()
                .map(|x| {
                    b.iter()
                        .map(|y| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let (a, b) = (directed(&sp, &sg), directed(&sg, &sp));
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let p95 = |mut v: Vec<f64>| {
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v[((v.len() as f64) * 0.95).ceil() as usize - 1]
        };
        ((avg(&a) + avg(&b)) / 2.0, p95(a).max(p95(b)))
    }

    fn random_blobs(rng: &mut ChaCha8Rng, dims: Dims, k: usize) -> LabelVolume {
        let [h, w, d] = dims;
        let mut data = vec![0u8; h * w * d];
        for c in 1..k {
            let ctr = [rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(0.0..d as f64)];
            let r = rng.random_range(1.0..(h.min(d) as f64 / 2.0).max(1.5));
            for a in 0..h {
                for b in 0..w {
                    for cc in 0..d {
                        let dist2 = (a as f64 - ctr[0]).powi(2) + (b as f64 - ctr[1]).powi(2) + (cc as f64 - ctr[2]).powi(2);
                        if dist2 <= r * r || rng.random::<f64>() < 0.03 {
                            data[voxel_index(dims, a, b, cc)] = c as u8;
                        }
                    }
                }
            }
        }
        labels(dims, data, k)
    }

    #[test]
    fn identical_masks_are_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_blobs(&mut rng, [8, 8, 8], 3);
        let r = evaluate(&gt, &gt).unwrap();
        assert_eq!((r.dice, r.jaccard, r.asd, r.hd95), (100.0, 100.0, Some(0.0), Some(0.0)));
    }

    #[test]
    fn singletons_three_apart() {
        let dims = [8, 8, 8];
        let mut p = vec![0u8; 512];
        let mut g = vec![0u8; 512];
        p[voxel_index(dims, 2, 2, 1)] = 1;
        g[voxel_index(dims, 2, 2, 4)] = 1;
        let r = evaluate(&labels(dims, p, 2), &labels(dims, g, 2)).unwrap();
        assert_eq!(r.dice, 0.0);
        assert_eq!(r.asd, Some(3.0));
        assert_eq!(r.hd95, Some(3.0));
    }

    #[test]
    fn empty_mask_conventions() {
        let dims = [4, 4, 4];
        let empty = labels(dims, vec![0; 64], 3);
        let both = evaluate(&empty, &empty).unwrap();
        assert_eq!(both.per_class[0].dice, 100.0);
        assert_eq!(both.per_class[0].asd, Some(0.0));
        let mut one = vec![0u8; 64];
        one[5] = 1;
        let r = evaluate(&labels(dims, one, 3), &empty).unwrap();
        let c1 = &r.per_class[0];
        assert_eq!((c1.dice, c1.jaccard, c1.asd, c1.pred_empty, c1.gt_empty), (0.0, 0.0, None, false, true));
        // Class 2 is empty in both and is the only defined distance.
        assert_eq!(r.asd, Some(0.0));
        assert_eq!(r.dice, 50.0);
    }

    #[test]
    fn mismatches_are_errors() {
        let a = labels([2, 2, 2], vec![0; 8], 2);
        assert!(evaluate(&a, &labels([2, 2, 3], vec![0; 12], 2)).is_err());
        assert!(evaluate(&a, &labels([2, 2, 2], vec![0; 8], 3)).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [5, 6, 7];
        for _ in 0..20 {
            let sites: Vec<bool> = (0..210).map(|_| rng.random::<f64>() < 0.05).collect();
            let got = squared_edt(&sites, dims);
            let pts = coords(&sites, dims);
            for (i, q) in coords(&vec![true; 210], dims).iter().enumerate() {
                let want = pts
                    .iter()
                    .map(|p| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(got[i], want);
            }
        }
    }

    #[test]
    fn random_masks_match_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let dims = [12, 12, 12];
            let (p, g) = (random_blobs(&mut rng, dims, 2), random_blobs(&mut rng, dims, 2));
            let r = evaluate(&p, &g).unwrap();
            let (asd, hd) = brute_force(&p, &g, 1);
            assert!((r.asd.unwrap() - asd).abs() < 1e-9);
            assert!((r.hd95.unwrap() - hd).abs() < 1e-9);
        }
    }

    #[test]
    fn percentile_is_nearest_rank() {
        assert_eq!(percentile95(vec![3.0]), 3.0);
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile95(v), 19.0);
        let v: Vec<f64> = (1..=21).map(f64::from).collect();
        assert_eq!(percentile95(v), 20.0);
    }

    #[test]
    fn surface_counts_volume_border() {
        let dims = [3, 3, 3];
        let s = surface(&[true; 27], dims);
        assert_eq!(s.iter().filter(|&&b| b).count(), 26);
        assert!(!s[voxel_index(dims, 1, 1, 1)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn symmetry_identity_and_monotonicity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [7, 7, 6];
            let (p, g) = (random_blobs(&mut rng, dims, 3), random_blobs(&mut rng, dims, 3));
            let pg = evaluate(&p, &g).unwrap();
            let gp = evaluate(&g, &p).unwrap();
            prop_assert_eq!(pg.dice, gp.dice);
            prop_assert_eq!(pg.asd, gp.asd);
            prop_assert_eq!(pg.hd95, gp.hd95);
            for c in &pg.per_class {
                prop_assert!(c.jaccard <= c.dice + 1e-12);
                prop_assert!((0.0..=100.0).contains(&c.dice));
                let d = c.dice / 100.0;
                prop_assert!((c.jaccard / 100.0 - d / (2.0 - d)).abs() < 1e-9);
                prop_assert!(c.asd.is_none_or(|a| a >= 0.0) && c.hd95.is_none_or(|h| h >= 0.0));
            }
            // Turning one missed voxel into a hit never lowers that class's Dice.
            if let Some(i) = (0..g.data().len()).find(|&i| g.data()[i] == 1 && p.data()[i] != 1) {
                let mut better = p.data().to_vec();
                better[i] = 1;
                let b = evaluate(&labels(dims, better, 3), &g).unwrap();
                prop_assert!(b.per_class[0].dice >= pg.per_class[0].dice);
            }
        }
    }
}
