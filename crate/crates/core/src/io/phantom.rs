//! Deterministic synthetic phantoms: Gaussian background noise with
//! implanted spherical Gaussian lesions, plus ground-truth annotations.

use crate::error::{Error, Result};
use crate::froc::Annotation;
use crate::io::volume::Volume;
use crate::rng::Rng;

/// Parameters for one synthetic scan. Intensities live directly on the
/// normalized [0, 1] scale used by the networks.
#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub nodule_count: usize,
    /// Lesion diameters are drawn uniformly from this range (mm).
    pub diameter_range_mm: (f64, f64),
    /// Peak lesion intensity above the background mean.
    pub contrast: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

pub const BACKGROUND_MEAN: f32 = 0.15;
/// FWHM of a Gaussian = 2 sqrt(2 ln 2) sigma; lesions use FWHM == diameter.
const FWHM_FACTOR: f64 = 2.354_820_045_030_949;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.diameter_range_mm;
        if !(lo <= hi) {
            return Err(Error::Config(format!(
                "diameter range lo {lo} must be <= hi {hi}"
            )));
        }
        if lo < 3.0 || hi > 30.0 {
            return Err(Error::Config(format!(
                "diameter range ({lo}, {hi}) must lie within [3, 30] mm"
            )));
        }
        if !(self.contrast > 0.0) {
            return Err(Error::Config(format!(
                "contrast must be > 0, got {}",
                self.contrast
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("dims {:?} contain zero", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        Ok(())
    }
}

struct Lesion {
    /// Center in mm relative to the volume origin-corner, (z, y, x).
    center_rel: [f64; 3],
    diameter_mm: f64,
}

/// Generate a phantom volume and its ground-truth annotations. Fully
/// deterministic per config: lesion parameters are drawn first, then the
/// noise field, then lesions are added, all in fixed order.
pub fn generate_phantom(config: &PhantomConfig, scan_id: &str) -> Result<(Volume, Vec<Annotation>)> {
    config.validate()?;
    let mut rng = Rng::from_seed(config.seed);
    let [d, h, w] = config.dims;
    // Physical extent spanned by voxel centers, per axis.
    let extent = [
        (d - 1) as f64 * config.spacing[0],
        (h - 1) as f64 * config.spacing[1],
        (w - 1) as f64 * config.spacing[2],
    ];
    // Center the volume on the world origin so transforms are exercised.
    let origin = [-extent[0] / 2.0, -extent[1] / 2.0, -extent[2] / 2.0];

    // Place lesions by rejection sampling: inside the volume with a margin
    // of one radius, centers at least the sum of radii apart.
    let mut lesions: Vec<Lesion> = Vec::with_capacity(config.nodule_count);
    let mut attempts = 0usize;
    while lesions.len() < config.nodule_count {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {} non-overlapping nodules in {MAX_PLACEMENT_ATTEMPTS} attempts",
                config.nodule_count
            )));
        }
        attempts += 1;
        let (lo, hi) = config.diameter_range_mm;
        let diameter_mm = rng.uniform_f64(lo, hi);
        let radius = diameter_mm / 2.0;
        let mut center_rel = [0.0f64; 3];
        let mut fits = true;
        for axis in 0..3 {
            if extent[axis] < 2.0 * radius {
                fits = false;
                break;
            }
            center_rel[axis] = rng.uniform_f64(radius, extent[axis] - radius);
        }
        if !fits {
            return Err(Error::Generation(format!(
                "volume extent {extent:?} mm cannot hold a nodule of diameter {diameter_mm:.1} mm"
            )));
        }
        let overlaps = lesions.iter().any(|l| {
            let dist = distance(l.center_rel, center_rel);
            dist < (l.diameter_mm + diameter_mm) / 2.0
        });
        if overlaps {
            continue;
        }
        lesions.push(Lesion {
            center_rel,
            diameter_mm,
        });
    }

    // Background noise in fixed voxel order.
    let mut data = vec![0.0f32; d * h * w];
    for v in data.iter_mut() {
        *v = BACKGROUND_MEAN + config.noise_sigma * rng.normal() as f32;
    }

    // Add lesion blobs. Support truncated at 4 sigma (amplitude < 4e-4 of peak).
    for lesion in &lesions {
        let sigma = lesion.diameter_mm / FWHM_FACTOR;
        let cutoff = 4.0 * sigma;
        let lo = [
            ((lesion.center_rel[0] - cutoff) / config.spacing[0]).floor().max(0.0) as usize,
            ((lesion.center_rel[1] - cutoff) / config.spacing[1]).floor().max(0.0) as usize,
            ((lesion.center_rel[2] - cutoff) / config.spacing[2]).floor().max(0.0) as usize,
        ];
        let hi = [
            (((lesion.center_rel[0] + cutoff) / config.spacing[0]).ceil() as usize).min(d - 1),
            (((lesion.center_rel[1] + cutoff) / config.spacing[1]).ceil() as usize).min(h - 1),
            (((lesion.center_rel[2] + cutoff) / config.spacing[2]).ceil() as usize).min(w - 1),
        ];
        let denom = 2.0 * sigma * sigma;
        for z in lo[0]..=hi[0] {
            let dz = z as f64 * config.spacing[0] - lesion.center_rel[0];
            for y in lo[1]..=hi[1] {
                let dy = y as f64 * config.spacing[1] - lesion.center_rel[1];
                for x in lo[2]..=hi[2] {
                    let dx = x as f64 * config.spacing[2] - lesion.center_rel[2];
                    let r2 = dz * dz + dy * dy + dx * dx;
                    data[(z * h + y) * w + x] +=
                        config.contrast * (-r2 / denom).exp() as f32;
                }
            }
        }
    }

    let volume = Volume::new(config.dims, config.spacing, origin, data)?;
    let annotations = lesions
        .iter()
        .map(|l| Annotation {
            scan_id: scan_id.to_string(),
            center_world: [
                l.center_rel[0] + origin[0],
                l.center_rel[1] + origin[1],
                l.center_rel[2] + origin[2],
            ],
            diameter_mm: l.diameter_mm,
        })
        .collect();
    Ok((volume, annotations))
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dz = a[0] - b[0];
    let dy = a[1] - b[1];
    let dx = a[2] - b[2];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config() -> PhantomConfig {
        PhantomConfig {
            dims: [64, 64, 64],
            spacing: [0.7, 0.7, 0.7],
            nodule_count: 2,
            diameter_range_mm: (6.0, 20.0),
            contrast: 0.5,
            noise_sigma: 0.05,
            seed: 42,
        }
    }

    #[test]
    fn zero_nodules_is_pure_noise() {
        let mut cfg = test_config();
        cfg.nodule_count = 0;
        let (vol, anns) = generate_phantom(&cfg, "s").unwrap();
        assert!(anns.is_empty());
        let mean: f64 = vol.data.iter().map(|&v| v as f64).sum::<f64>() / vol.data.len() as f64;
        assert!((mean - BACKGROUND_MEAN as f64).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = test_config();
        let (a, anns_a) = generate_phantom(&cfg, "s").unwrap();
        let (b, anns_b) = generate_phantom(&cfg, "s").unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(anns_a.len(), anns_b.len());
        for (x, y) in anns_a.iter().zip(&anns_b) {
            assert_eq!(x.center_world, y.center_world);
            assert_eq!(x.diameter_mm, y.diameter_mm);
        }
        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let (c, _) = generate_phantom(&cfg2, "s").unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn lesion_centers_are_bright() {
        let cfg = test_config();
        let (vol, anns) = generate_phantom(&cfg, "s").unwrap();
        assert_eq!(anns.len(), 2);
        let threshold = BACKGROUND_MEAN + 3.0 * cfg.noise_sigma;
        for ann in &anns {
            let v = vol.world_to_voxel(ann.center_world).unwrap();
            let val = vol.at(
                v[0].round() as usize,
                v[1].round() as usize,
                v[2].round() as usize,
            );
            assert!(val > threshold, "center intensity {val} <= {threshold}");
        }
    }

    #[test]
    fn annotations_inside_volume() {
        let cfg = test_config();
        let (vol, anns) = generate_phantom(&cfg, "s").unwrap();
        for ann in &anns {
            assert!(vol.contains_world(ann.center_world));
        }
    }

    #[test]
    fn lesions_do_not_overlap() {
        let mut cfg = test_config();
        cfg.nodule_count = 3;
        cfg.dims = [96, 96, 96];
        let (_, anns) = generate_phantom(&cfg, "s").unwrap();
        for i in 0..anns.len() {
            for j in (i + 1)..anns.len() {
                let dist = distance(anns[i].center_world, anns[j].center_world);
                assert!(dist >= (anns[i].diameter_mm + anns[j].diameter_mm) / 2.0);
            }
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let mut cfg = test_config();
        cfg.dims = [24, 24, 24]; // 16.1 mm extent
        cfg.nodule_count = 30;
        cfg.diameter_range_mm = (8.0, 8.0);
        match generate_phantom(&cfg, "s") {
            Err(Error::Generation(_)) => {}
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_nodule_errors() {
        let mut cfg = test_config();
        cfg.dims = [8, 8, 8]; // 4.9 mm extent
        cfg.diameter_range_mm = (20.0, 20.0);
        cfg.nodule_count = 1;
        assert!(generate_phantom(&cfg, "s").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = test_config();
        cfg.diameter_range_mm = (10.0, 5.0);
        assert!(generate_phantom(&cfg, "s").is_err());
        let mut cfg = test_config();
        cfg.diameter_range_mm = (1.0, 5.0);
        assert!(generate_phantom(&cfg, "s").is_err());
        let mut cfg = test_config();
        cfg.contrast = 0.0;
        assert!(generate_phantom(&cfg, "s").is_err());
    }
}
