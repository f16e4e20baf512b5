//! Synthetic complementary-modality phantoms: non-overlapping ellipsoids per
//! class, each class shown at its own contrast in a subset of modalities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MultiModalVolume;
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub modalities: usize,
    /// Number of labels including background (label 0).
    pub classes: usize,
    /// Inclusive range of ellipsoids per foreground class.
    pub objects_per_class: [usize; 2],
    /// Inclusive range of semi-axis lengths in voxels.
    pub radius: [f64; 2],
    /// `visibility[i][c]`: intensity of class `c` in modality `i`. Empty means
    /// the default: class `c` shows only in modality `(c - 1) mod M`.
    pub visibility: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub spacing: [f32; 3],
    pub seed: u64,
    /// Placement attempts per object before giving up.
    pub max_retries: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [32; 3],
            modalities: 2,
            classes: 3,
            objects_per_class: [1, 2],
            radius: [3.0, 6.0],
            visibility: Vec::new(),
            noise_sigma: 0.1,
            spacing: [1.0; 3],
            seed: 0,
            max_retries: 200,
        }
    }
}

/// Class `c` is visible only in modality `(c - 1) mod M`; classes sharing a
/// modality get distinct contrasts 1, 2, ...
pub fn default_visibility(modalities: usize, classes: usize) -> Vec<Vec<f64>> {
    let mut vis = vec![vec![0.0; classes]; modalities];
    if modalities == 0 {
        return vis;
    }
    for c in 1..classes {
        vis[(c - 1) % modalities][c] = 1.0 + ((c - 1) / modalities) as f64;
    }
    vis
}

impl PhantomSpec {
    pub fn visibility_matrix(&self) -> Vec<Vec<f64>> {
        if self.visibility.is_empty() {
            default_visibility(self.modalities, self.classes)
        } else {
            self.visibility.clone()
        }
    }

    /// A class is recoverable in modality `i` when its contrast there differs
    /// from every other label's, so a noiseless threshold isolates it.
    fn recoverable_in(vis: &[Vec<f64>], i: usize, c: usize) -> bool {
        (0..vis[i].len()).all(|o| o == c || vis[i][o] != vis[i][c])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.extents.iter().find(|&&e| e == 0 || e % 16 != 0) {
            return Err(Error::Validation(format!(
                "phantom.extents {:?}: extent {e} is not a positive multiple of 16",
                self.extents
            )));
        }
        if self.modalities == 0 {
            return Err(Error::Validation("phantom.modalities must be >= 1".into()));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::Validation("phantom.classes must be in 2..=256".into()));
        }
        let [omin, omax] = self.objects_per_class;
        if omin == 0 || omin > omax {
            return Err(Error::Validation(format!(
                "phantom.objects_per_class {:?} must satisfy 1 <= min <= max",
                self.objects_per_class
            )));
        }
        let [rmin, rmax] = self.radius;
        let smallest = *self.extents.iter().min().unwrap() as f64;
        if !(rmin >= 0.5 && rmin <= rmax && 2.0 * rmax.ceil() + 1.0 <= smallest) {
            return Err(Error::Validation(format!(
                "phantom.radius {:?} must satisfy 0.5 <= min <= max and fit the volume",
                self.radius
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("phantom.noise_sigma must be finite and >= 0".into()));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Validation("phantom.spacing must be positive".into()));
        }
        let vis = self.visibility_matrix();
        if vis.len() != self.modalities || vis.iter().any(|r| r.len() != self.classes) {
            return Err(Error::Validation(format!(
                "phantom.visibility must be {}×{} (modalities × classes)",
                self.modalities, self.classes
            )));
        }
        if vis.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("phantom.visibility entries must be finite".into()));
        }
        for c in 1..self.classes {
            if !(0..self.modalities).any(|i| Self::recoverable_in(&vis, i, c)) {
                return Err(Error::Validation(format!(
                    "phantom.visibility: class {c} is not distinguishable in any modality"
                )));
            }
        }
        let some_hidden = (1..self.classes).any(|c| (0..self.modalities).any(|i| vis[i][c] == vis[i][0]));
        if !some_hidden {
            return Err(Error::Validation(
                "phantom.visibility: every class is visible in every modality; at least one class \
                 must be invisible in some modality"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel coordinates, `[z, y, x]` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub class: u8,
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Flat indices of voxel centers inside `e`, scanning only its bounding box.
pub fn rasterize_ellipsoid(e: &Ellipsoid, extents: [usize; 3]) -> Vec<usize> {
    let range = |a: usize| {
        let lo = (e.center[a] - e.radii[a]).ceil().max(0.0) as usize;
        let hi = ((e.center[a] + e.radii[a]).floor() as i64).min(extents[a] as i64 - 1);
        (lo, hi)
    };
    let (rz, ry, rx) = (range(0), range(1), range(2));
    let mut out = Vec::new();
    if rz.1 < 0 || ry.1 < 0 || rx.1 < 0 {
        return out;
    }
    for z in rz.0..=rz.1 as usize {
        for y in ry.0..=ry.1 as usize {
            for x in rx.0..=rx.1 as usize {
                if e.contains([z, y, x]) {
                    out.push((z * extents[1] + y) * extents[2] + x);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: MultiModalVolume,
    pub mask: SegmentationMask,
    pub objects: Vec<Ellipsoid>,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let ext = spec.extents;
    let n: usize = ext.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = vec![0u8; n];
    let mut objects = Vec::new();

    for class in 1..spec.classes {
        let count = rng.random_range(spec.objects_per_class[0]..=spec.objects_per_class[1]);
        for k in 0..count {
            let mut placed = false;
            for _ in 0..spec.max_retries.max(1) {
                let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(spec.radius[0]..=spec.radius[1]));
                let center: [f64; 3] = std::array::from_fn(|a| {
                    let lo = radii[a].ceil();
                    let hi = ext[a] as f64 - 1.0 - radii[a].ceil();
                    rng.random_range(lo..=hi).round()
                });
                let e = Ellipsoid {
                    center,
                    radii,
                    class: class as u8,
                };
                let voxels = rasterize_ellipsoid(&e, ext);
                if voxels.is_empty() || voxels.iter().any(|&v| labels[v] != 0) {
                    continue;
                }
                for v in voxels {
                    labels[v] = class as u8;
                }
                objects.push(e);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place object {k} of class {class} without overlap after {} attempts",
                    spec.max_retries
                )));
            }
        }
    }

    let vis = spec.visibility_matrix();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Validation(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.modalities * n);
    for row in &vis {
        for &l in &labels {
            let mut v = row[l as usize];
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v as f32);
        }
    }
    let volume = MultiModalVolume::new(spec.modalities, ext, spec.spacing, data)?;
    let mask = SegmentationMask::new(labels, ext, spec.classes)?.with_spacing(spec.spacing)?;
    Ok(Phantom { volume, mask, objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PhantomSpec {
        PhantomSpec {
            extents: [16; 3],
            radius: [2.0, 3.0],
            ..Default::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        PhantomSpec::default().validate().unwrap();
    }

    #[test]
    fn indivisible_extents_rejected() {
        let s = PhantomSpec {
            extents: [16, 16, 20],
            ..spec()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn fully_visible_matrix_rejected() {
        let s = PhantomSpec {
            modalities: 1,
            classes: 2,
            visibility: vec![vec![0.0, 1.0]],
            ..spec()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn invisible_class_rejected() {
        let s = PhantomSpec {
            visibility: vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]],
            ..spec()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn rasterize_unit_sphere() {
        let e = Ellipsoid {
            center: [4.0; 3],
            radii: [1.0; 3],
            class: 1,
        };
        // Center plus its six face neighbors.
        assert_eq!(rasterize_ellipsoid(&e, [8; 3]).len(), 7);
    }

    #[test]
    fn objects_do_not_overlap() {
        let p = generate_phantom(&spec()).unwrap();
        let total: usize = p.objects.iter().map(|e| rasterize_ellipsoid(e, [16; 3]).len()).sum();
        let fg = p.mask.labels().iter().filter(|&&l| l != 0).count();
        assert_eq!(total, fg);
    }

    #[test]
    fn impossible_placement_is_generation_error() {
        let s = PhantomSpec {
            objects_per_class: [40, 40],
            radius: [7.0, 7.0],
            max_retries: 5,
            ..spec()
        };
        assert!(matches!(generate_phantom(&s), Err(Error::Generation(_))));
    }
}
