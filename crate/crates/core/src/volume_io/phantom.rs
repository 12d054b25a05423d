//! Synthetic ellipsoid phantoms standing in for annotated medical volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_dims, voxel_index, Dims, LabelVolume, Volume3D};
use crate::error::{invalid, CfrError, Result};

/// Smallest share of the volume any foreground class may occupy.
const MIN_CLASS_FRACTION: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub num_classes: usize,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    /// Semi-axis range as a fraction of the extent along each axis.
    #[serde(default = "default_radius_range")]
    pub radius_range: (f64, f64),
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_sigma() -> f64 {
    0.05
}

fn default_radius_range() -> (f64, f64) {
    (0.12, 0.3)
}

fn default_retries() -> usize {
    200
}

impl PhantomConfig {
    pub fn new(dims: Dims, num_classes: usize) -> Self {
        Self {
            dims,
            num_classes,
            noise_sigma: default_sigma(),
            radius_range: default_radius_range(),
            max_retries: default_retries(),
        }
    }
}

/// Mean intensity of class `c`: evenly spaced over `[0.2, 0.9]`, background lowest.
pub fn class_mean_intensity(c: usize, num_classes: usize) -> f64 {
    0.2 + 0.7 * c as f64 / (num_classes - 1) as f64
}

pub fn generate_phantom(seed: u64, dims: Dims, num_classes: usize) -> Result<(Volume3D, LabelVolume)> {
    generate_phantom_with(seed, &PhantomConfig::new(dims, num_classes))
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// In-plane rotation (radians) about the depth axis.
    angle: f64,
}

impl Ellipsoid {
    fn contains(&self, h: usize, w: usize, d: usize) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dh = h as f64 + 0.5 - self.center[0];
        let dw = w as f64 + 0.5 - self.center[1];
        let dd = d as f64 + 0.5 - self.center[2];
        let u = c * dh + s * dw;
        let v = -s * dh + c * dw;
        (u / self.radii[0]).powi(2) + (v / self.radii[1]).powi(2) + (dd / self.radii[2]).powi(2) <= 1.0
    }

    fn sample(rng: &mut ChaCha8Rng, dims: Dims, (lo, hi): (f64, f64)) -> Self {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for axis in 0..3 {
            let extent = dims[axis] as f64;
            let r = (rng.random_range(lo..=hi) * extent).max(1.0);
            radii[axis] = r;
            // Keep the ellipsoid inside the volume when it fits.
            let (cmin, cmax) = if 2.0 * r < extent { (r, extent - r) } else { (extent / 2.0, extent / 2.0) };
            center[axis] = if cmax > cmin { rng.random_range(cmin..cmax) } else { cmin };
        }
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        Self { center, radii, angle }
    }
}

/// Deterministic in `(seed, config)`: one ellipsoid per foreground class, no
/// overlaps, each class covering at least 0.5% of the voxels.
pub fn generate_phantom_with(seed: u64, cfg: &PhantomConfig) -> Result<(Volume3D, LabelVolume)> {
    let k = cfg.num_classes;
    if k < 2 {
        return Err(invalid(format!("phantom needs at least one foreground class, got K={k}")));
    }
    if k > 256 {
        return Err(invalid(format!("K={k} exceeds label storage")));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(invalid("noise sigma must be finite and non-negative"));
    }
    let (lo, hi) = cfg.radius_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(invalid("radius range must satisfy 0 < lo <= hi"));
    }
    let n = check_dims(cfg.dims)?;
    let dims = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u8; n];
    let min_voxels = (MIN_CLASS_FRACTION * n as f64).ceil() as usize;

    for class in 1..k {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let e = Ellipsoid::sample(&mut rng, dims, cfg.radius_range);
            let mut cells = Vec::new();
            let mut overlaps = false;
            'scan: for h in 0..dims[0] {
                for w in 0..dims[1] {
                    for d in 0..dims[2] {
                        if e.contains(h, w, d) {
                            let i = voxel_index(dims, h, w, d);
                            if labels[i] != 0 {
                                overlaps = true;
                                break 'scan;
                            }
                            cells.push(i);
                        }
                    }
                }
            }
            if overlaps || cells.len() < min_voxels {
                continue;
            }
            for i in cells {
                labels[i] = class as u8;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(CfrError::Generation(format!(
                "could not place class {class} after {} attempts",
                cfg.max_retries
            )));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let image = labels
        .iter()
        .map(|&c| (class_mean_intensity(c as usize, k) + noise.sample(&mut rng)) as f32)
        .collect();
    Ok((Volume3D::new(dims, image)?, LabelVolume::new(dims, labels, k)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_phantom(7, [32, 32, 36], 2).unwrap();
        let b = generate_phantom(7, [32, 32, 36], 2).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(8, [32, 32, 36], 2).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn foreground_fraction_within_bounds() {
        let (_, labels) = generate_phantom(7, [32, 32, 36], 2).unwrap();
        let frac = labels.count(1) as f64 / labels.data().len() as f64;
        assert!((0.005..=0.5).contains(&frac), "foreground fraction {frac}");
    }

    #[test]
    fn multi_class_classes_all_present() {
        for seed in 0..5 {
            let (_, labels) = generate_phantom(seed, [24, 24, 20], 4).unwrap();
            let n = labels.data().len() as f64;
            for c in 1..4 {
                assert!(labels.count(c) as f64 / n >= MIN_CLASS_FRACTION);
            }
        }
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(generate_phantom(7, [8, 8, 8], 1), Err(CfrError::InvalidArgument(_))));
    }

    #[test]
    fn impossible_placement_reports_generation_error() {
        let mut cfg = PhantomConfig::new([16, 16, 16], 40);
        cfg.max_retries = 3;
        assert!(matches!(generate_phantom_with(1, &cfg), Err(CfrError::Generation(_))));
    }

    #[test]
    fn noise_free_intensities_equal_class_means() {
        let mut cfg = PhantomConfig::new([16, 16, 12], 3);
        cfg.noise_sigma = 0.0;
        let (img, lab) = generate_phantom_with(3, &cfg).unwrap();
        for (&v, &c) in img.data().iter().zip(lab.data()) {
            assert_eq!(v, class_mean_intensity(c as usize, 3) as f32);
        }
    }
}
